use crate::error::{Error, Result};
use crate::numerics::{dot, Rng, Tensor2D};
use crate::routing::DownstreamTask;

/// Hierarchical Gaussian mixture.
///
/// Supercluster means sit at distance `separation` from the origin in random
/// directions. The sub-cluster means of supercluster `c` lie in a private
/// random subspace of dimension `subspace_dim`, at distance `sub_spread` from
/// the supercluster mean. Samples add isotropic noise of scale `noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub superclusters: usize,
    pub subclusters: usize,
    pub samples_per_subcluster: usize,
    pub dim: usize,
    pub separation: f64,
    pub sub_spread: f64,
    pub subspace_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            superclusters: 4,
            subclusters: 4,
            samples_per_subcluster: 125,
            dim: 32,
            separation: 6.0,
            sub_spread: 3.0,
            subspace_dim: 8,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.superclusters == 0 || self.subclusters == 0 || self.samples_per_subcluster == 0 {
            return bad("synthetic counts must be >= 1");
        }
        if self.dim == 0 || self.subspace_dim == 0 || self.subspace_dim > self.dim {
            return bad("need 1 <= subspace_dim <= dim");
        }
        for (name, v) in [("separation", self.separation), ("sub_spread", self.sub_spread), ("noise", self.noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Generated samples plus the generator state needed to draw fresh task data.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub x: Tensor2D,
    pub super_labels: Vec<usize>,
    /// Sub-cluster within its supercluster, in `0..subclusters`.
    pub sub_labels: Vec<usize>,
    /// `sub_means[c][s]`.
    pub sub_means: Vec<Vec<Vec<f64>>>,
    pub noise: f64,
}

fn gaussian(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.normal()).collect()
}

fn unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let v = gaussian(dim, rng);
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `m` orthonormal random vectors (Gram-Schmidt on Gaussian draws).
fn random_basis(dim: usize, m: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v = gaussian(dim, rng);
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn draw(mean: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64> {
    mean.iter().map(|m| m + noise * rng.normal()).collect()
}

/// Samples ordered by supercluster, then sub-cluster.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut sub_means = Vec::with_capacity(spec.superclusters);
    for _ in 0..spec.superclusters {
        let center: Vec<f64> = unit(spec.dim, &mut rng).into_iter().map(|v| v * spec.separation).collect();
        let basis = random_basis(spec.dim, spec.subspace_dim, &mut rng);
        let means = (0..spec.subclusters)
            .map(|_| {
                let coeff = unit(spec.subspace_dim, &mut rng);
                let mut m = center.clone();
                for (a, b) in coeff.iter().zip(&basis) {
                    m.iter_mut().zip(b).for_each(|(x, y)| *x += spec.sub_spread * a * y);
                }
                m
            })
            .collect::<Vec<_>>();
        sub_means.push(means);
    }
    let n = spec.superclusters * spec.subclusters * spec.samples_per_subcluster;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut super_labels = Vec::with_capacity(n);
    let mut sub_labels = Vec::with_capacity(n);
    for (c, means) in sub_means.iter().enumerate() {
        for (s, mean) in means.iter().enumerate() {
            for _ in 0..spec.samples_per_subcluster {
                data.extend(draw(mean, spec.noise, &mut rng));
                super_labels.push(c);
                sub_labels.push(s);
            }
        }
    }
    Ok(SyntheticData {
        x: Tensor2D::from_vec(n, spec.dim, data)?,
        super_labels,
        sub_labels,
        sub_means,
        noise: spec.noise,
    })
}

impl SyntheticData {
    /// Fresh draws of `per_subcluster` samples from every sub-cluster, in generation order,
    /// with their supercluster labels.
    pub fn sample(&self, per_subcluster: usize, rng: &mut Rng) -> Result<(Tensor2D, Vec<usize>)> {
        let dim = self.x.cols();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, means) in self.sub_means.iter().enumerate() {
            for mean in means {
                for _ in 0..per_subcluster {
                    rows.extend(draw(mean, self.noise, rng));
                    labels.push(c);
                }
            }
        }
        Ok((Tensor2D::from_vec(labels.len(), dim, rows)?, labels))
    }

    /// Fresh draws from supercluster `c`, labelled by sub-cluster.
    pub fn task(&self, c: usize, train_per_class: usize, eval_per_class: usize, rng: &mut Rng) -> Result<DownstreamTask> {
        let means = self
            .sub_means
            .get(c)
            .ok_or_else(|| Error::InvalidConfig(format!("no supercluster {c}")))?;
        let dim = self.x.cols();
        let mut split = |per: usize| -> Result<(Tensor2D, Vec<usize>)> {
            let mut rows = Vec::with_capacity(per * means.len() * dim);
            let mut labels = Vec::with_capacity(per * means.len());
            for (s, mean) in means.iter().enumerate() {
                for _ in 0..per {
                    rows.extend(draw(mean, self.noise, rng));
                    labels.push(s);
                }
            }
            Ok((Tensor2D::from_vec(labels.len(), dim, rows)?, labels))
        };
        let (tx, ty) = split(train_per_class)?;
        let (ex, ey) = split(eval_per_class)?;
        DownstreamTask::new(format!("supercluster{c}"), tx, ty, ex, ey)
    }
}

/// Adjusted Rand index between two labelings of the same samples.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |n: u64| (n * n.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().flatten().map(|&n| pairs(n)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(a.len() as u64);
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticSpec {
            samples_per_subcluster: 5,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = generate(&SyntheticSpec { seed: 1, ..spec.clone() }).unwrap();
        assert_ne!(generate(&spec).unwrap().x, other.x);
    }

    #[test]
    fn shapes_and_labels() {
        let d = generate(&SyntheticSpec {
            samples_per_subcluster: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!(d.x.shape(), (48, 32));
        assert_eq!(d.super_labels[0], 0);
        assert_eq!(d.super_labels[47], 3);
        assert_eq!(d.sub_labels[3], 1);
        let t = d.task(2, 4, 2, &mut Rng::new(1)).unwrap();
        assert_eq!(t.train_x.rows(), 16);
        assert_eq!(t.eval_y, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        let r = adjusted_rand_index(&[0, 0, 1, 1, 2, 2], &[0, 1, 0, 1, 0, 1]);
        assert!(r < 0.0);
    }
}
