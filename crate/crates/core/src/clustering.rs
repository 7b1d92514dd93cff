//! Balanced clustering of frozen features.
//!
//! Soft assignments `U` come from entropic optimal transport solved with
//! Sinkhorn-Knopp scaling in the log domain; the transportation polytope has
//! uniform row marginals `1/n` and uniform column marginals `1/k`. Centroids
//! `C` are fitted by SGD on the cross entropy between `n·U` and the softmax of
//! the scores `S = F Cᵀ`. The two updates alternate for a fixed number of
//! epochs, after which hard labels are the row-argmax of `S`.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Rng, SgdConfig, SgdState, Tensor2D, NORM_EPS};

/// Row-normalized features plus a stable identifier per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    features: Tensor2D,
    sample_ids: Vec<String>,
}

impl FeatureTable {
    /// Normalizes every row to unit length. Ids default to row indices.
    pub fn from_raw(features: &Tensor2D, sample_ids: Option<Vec<String>>) -> Result<Self> {
        let ids = sample_ids.unwrap_or_else(|| (0..features.rows()).map(|i| i.to_string()).collect());
        if ids.len() != features.rows() {
            return Err(shape_err(
                "FeatureTable",
                format!("{} ids for {} rows", ids.len(), features.rows()),
            ));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("features contain non-finite values".into()));
        }
        Ok(Self {
            features: features.normalize_rows(NORM_EPS),
            sample_ids: ids,
        })
    }

    pub fn features(&self) -> &Tensor2D {
        &self.features
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterConfig {
    /// Entropy weight ε.
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub epochs: usize,
    /// Softmax temperature of the centroid cross entropy.
    pub temperature: f64,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            sinkhorn_iters: 200,
            sinkhorn_tol: 1e-6,
            epochs: 30,
            temperature: 0.1,
            learning_rate: 1e-4,
            momentum: 0.0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::InvalidConfig("sinkhorn_iters must be >= 1".into()));
        }
        SgdConfig::new(self.learning_rate, self.momentum, 0.0).map(|_| ())
    }
}

/// Output of [`sinkhorn`].
#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornResult {
    pub plan: Tensor2D,
    /// max(row l1 error, column l1 error) against the target marginals.
    pub marginal_error: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Fitted clustering state.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub centroids: Tensor2D,
    pub epsilon: f64,
    pub assignment: Tensor2D,
    pub labels: Vec<usize>,
}

/// Partition of sample indices into `k` clusters; `all` is the full index list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub subsets: Vec<Vec<usize>>,
    pub all: Vec<usize>,
}

impl DatasetSplit {
    pub fn k(&self) -> usize {
        self.subsets.len()
    }

    pub fn subset(&self, cluster: usize) -> &[usize] {
        &self.subsets[cluster]
    }

    /// Hard label of each sample.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.all.len()];
        for (j, s) in self.subsets.iter().enumerate() {
            for &i in s {
                labels[i] = j;
            }
        }
        labels
    }
}

/// `S = F Cᵀ`, shape `n x k`.
pub fn score_matrix(table: &FeatureTable, centroids: &Tensor2D) -> Result<Tensor2D> {
    if centroids.cols() != table.dim() {
        return Err(shape_err(
            "score_matrix",
            format!("features have {} dims, centroids {}", table.dim(), centroids.cols()),
        ));
    }
    table.features().matmul_nt(centroids)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT assignment on the balanced transportation polytope.
///
/// Returns `U = diag(u) exp(S/ε) diag(v)` whose rows sum to `1/n` and columns
/// to `1/k`. Scalings are kept as logarithms so `exp(S/ε)` never overflows.
pub fn sinkhorn(scores: &Tensor2D, epsilon: f64, max_iters: usize, tol: f64) -> Result<SinkhornResult> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !scores.is_finite() {
        return Err(Error::Numeric("score matrix contains non-finite values".into()));
    }
    let (n, k) = scores.shape();
    if n == 0 || k == 0 {
        return Err(shape_err("sinkhorn", format!("empty score matrix {n}x{k}")));
    }
    let log_row = -(n as f64).ln();
    let log_col = -(k as f64).ln();
    let log_kernel = scores.scaled(1.0 / epsilon);
    let mut log_u = vec![0.0; n];
    let mut log_v = vec![0.0; k];

    let plan_of = |log_u: &[f64], log_v: &[f64]| {
        let mut plan = Tensor2D::zeros(n, k);
        for i in 0..n {
            let kr = log_kernel.row(i);
            for (j, p) in plan.row_mut(i).iter_mut().enumerate() {
                *p = (kr[j] + log_u[i] + log_v[j]).exp();
            }
        }
        plan
    };
    let marginal_error = |plan: &Tensor2D| {
        let row_err: f64 = plan
            .iter_rows()
            .map(|r| (r.iter().sum::<f64>() - 1.0 / n as f64).abs())
            .sum();
        let col_err: f64 = plan
            .sum_rows()
            .data()
            .iter()
            .map(|c| (c - 1.0 / k as f64).abs())
            .sum();
        row_err.max(col_err)
    };

    let mut iterations = 0;
    let mut err = f64::INFINITY;
    let mut plan = Tensor2D::zeros(n, k);
    while iterations < max_iters {
        iterations += 1;
        for i in 0..n {
            let kr = log_kernel.row(i);
            log_u[i] = log_row - log_sum_exp(kr.iter().zip(&log_v).map(|(a, b)| a + b));
        }
        for j in 0..k {
            log_v[j] = log_col - log_sum_exp((0..n).map(|i| log_kernel.get(i, j) + log_u[i]));
        }
        plan = plan_of(&log_u, &log_v);
        err = marginal_error(&plan);
        if err <= tol {
            break;
        }
    }
    Ok(SinkhornResult {
        plan,
        marginal_error: err,
        iterations,
        converged: err <= tol,
    })
}

/// `Tr(UᵀS) + ε·H(U)` with `H(U) = −Σ U log U` (and `0 log 0 = 0`).
pub fn transport_objective(plan: &Tensor2D, scores: &Tensor2D, epsilon: f64) -> f64 {
    plan.data()
        .iter()
        .zip(scores.data())
        .map(|(&u, &s)| u * s - if u > 0.0 { epsilon * u * u.ln() } else { 0.0 })
        .sum()
}

fn softmax_rows(scores: &Tensor2D, temperature: f64) -> Tensor2D {
    let mut out = scores.scaled(1.0 / temperature);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn check_assignment(table: &FeatureTable, assignment: &Tensor2D, centroids: &Tensor2D) -> Result<()> {
    if assignment.rows() != table.len() || assignment.cols() != centroids.rows() {
        return Err(shape_err(
            "centroid_step",
            format!(
                "assignment {:?} for {} samples and {} centroids",
                assignment.shape(),
                table.len(),
                centroids.rows()
            ),
        ));
    }
    Ok(())
}

/// `−Σᵢⱼ n·U[i,j] · log softmax_j(S[i,·]/T)`.
pub fn centroid_loss(table: &FeatureTable, assignment: &Tensor2D, centroids: &Tensor2D, temperature: f64) -> Result<f64> {
    check_assignment(table, assignment, centroids)?;
    let n = table.len() as f64;
    let scaled = score_matrix(table, centroids)?.scaled(1.0 / temperature);
    let mut loss = 0.0;
    for (i, row) in scaled.iter_rows().enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        for (j, &s) in row.iter().enumerate() {
            loss -= n * assignment.get(i, j) * (s - lse);
        }
    }
    Ok(loss)
}

/// Gradient of [`centroid_loss`] with respect to the centroids (`k x d`).
pub fn centroid_grad(table: &FeatureTable, assignment: &Tensor2D, centroids: &Tensor2D, temperature: f64) -> Result<Tensor2D> {
    check_assignment(table, assignment, centroids)?;
    let n = table.len() as f64;
    let probs = softmax_rows(&score_matrix(table, centroids)?, temperature);
    // dL/dS[i,j] = (P[i,j]·Σⱼ' nU[i,j'] − nU[i,j]) / T
    let mut d_scores = Tensor2D::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let mass: f64 = assignment.row(i).iter().map(|u| n * u).sum();
        for j in 0..probs.cols() {
            let g = (probs.get(i, j) * mass - n * assignment.get(i, j)) / temperature;
            d_scores.set(i, j, g);
        }
    }
    d_scores.matmul_tn(table.features())
}

/// One SGD step on the centroids followed by row re-normalization.
pub fn centroid_step(
    table: &FeatureTable,
    assignment: &Tensor2D,
    centroids: &Tensor2D,
    state: &mut SgdState,
    temperature: f64,
) -> Result<Tensor2D> {
    let grad = centroid_grad(table, assignment, centroids, temperature)?;
    let mut updated = centroids.clone();
    state.step_one(0, &mut updated, &grad)?;
    if state.config.learning_rate == 0.0 {
        return Ok(updated);
    }
    Ok(updated.normalize_rows(NORM_EPS))
}

fn row_argmax(scores: &Tensor2D) -> Vec<usize> {
    scores
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Alternates Sinkhorn assignment and centroid updates for `epochs` rounds.
pub fn cluster(table: &FeatureTable, k: usize, epochs: usize, rng: &mut Rng, config: &ClusterConfig) -> Result<ClusterModel> {
    config.validate()?;
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if k > table.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds the number of samples ({})",
            table.len()
        )));
    }
    let init = rng.sample_without_replacement(table.len(), k);
    let mut centroids = table.features().select_rows(&init);
    let sgd = SgdConfig::new(config.learning_rate, config.momentum, 0.0)?;
    let mut state = SgdState::new(sgd, [&centroids]);
    for _ in 0..epochs {
        let scores = score_matrix(table, &centroids)?;
        let assignment = sinkhorn(&scores, config.epsilon, config.sinkhorn_iters, config.sinkhorn_tol)?.plan;
        centroids = centroid_step(table, &assignment, &centroids, &mut state, config.temperature)?;
    }
    let scores = score_matrix(table, &centroids)?;
    let assignment = sinkhorn(&scores, config.epsilon, config.sinkhorn_iters, config.sinkhorn_tol)?.plan;
    Ok(ClusterModel {
        labels: row_argmax(&scores),
        centroids,
        epsilon: config.epsilon,
        assignment,
    })
}

/// Groups sample indices by label; every cluster must be non-empty.
pub fn split_dataset(labels: &[usize], k: usize) -> Result<DatasetSplit> {
    let mut subsets = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::InvalidConfig(format!("label {l} at sample {i} is outside [0, {k})")));
        }
        subsets[l].push(i);
    }
    if let Some(cluster) = subsets.iter().position(Vec::is_empty) {
        return Err(Error::EmptyCluster { cluster, k });
    }
    Ok(DatasetSplit {
        subsets,
        all: (0..labels.len()).collect(),
    })
}
