use std::collections::BTreeMap;

use super::forward::Norm;
use super::{SdrNet, Target};
use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor2D;

/// Lower bound applied to every normalization variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Per-channel statistics of one block, groups concatenated in activation order
/// (shared first, then the active individual groups).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Eval-mode statistics of one target.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnEntry {
    pub blocks: Vec<BlockStats>,
}

/// Calibrated statistics keyed by target.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnStats {
    entries: BTreeMap<Target, BnEntry>,
}

impl BnStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, target: Target, entry: BnEntry) {
        self.entries.insert(target, entry);
    }

    pub fn get(&self, target: &Target) -> Option<&BnEntry> {
        self.entries.get(target)
    }

    pub fn contains(&self, target: &Target) -> bool {
        self.entries.contains_key(target)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Target, &BnEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Calibrates `target` on `data` and stores the result.
    pub fn calibrate(&mut self, net: &SdrNet, target: &Target, data: &Tensor2D, batch_size: usize) -> Result<()> {
        let entry = bn_calibrate(net, target, data, batch_size)?;
        self.insert(target.clone(), entry);
        Ok(())
    }
}

/// Running statistics for `target`: the plain average of per-batch means and
/// variances over consecutive chunks of `data`. Stored variances are floored.
pub fn bn_calibrate(net: &SdrNet, target: &Target, data: &Tensor2D, batch_size: usize) -> Result<BnEntry> {
    if data.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(shape_err("bn_calibrate", "batch size must be >= 1"));
    }
    let mut sum: Option<Vec<BlockStats>> = None;
    let mut chunks = 0usize;
    let indices: Vec<usize> = (0..data.rows()).collect();
    for chunk in indices.chunks(batch_size) {
        let batch = data.select_rows(chunk);
        let mut stats = Vec::new();
        net.forward_with(target, &batch, Norm::Batch { allow_single: true }, Some(&mut stats))?;
        match &mut sum {
            None => sum = Some(stats),
            Some(acc) => {
                for (a, s) in acc.iter_mut().zip(&stats) {
                    a.mean.iter_mut().zip(&s.mean).for_each(|(x, y)| *x += y);
                    a.var.iter_mut().zip(&s.var).for_each(|(x, y)| *x += y);
                }
            }
        }
        chunks += 1;
    }
    let mut blocks = sum.expect("at least one chunk");
    let inv = 1.0 / chunks as f64;
    for b in &mut blocks {
        b.mean.iter_mut().for_each(|m| *m *= inv);
        b.var.iter_mut().for_each(|v| *v = (*v * inv).max(VARIANCE_FLOOR));
    }
    Ok(BnEntry { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::sdrnet::{Mode, NetConfig, PathCode};

    fn cfg() -> NetConfig {
        NetConfig {
            input_dim: 4,
            blocks: 2,
            groups: 2,
            shared_width: 2,
            individual_width: 3,
            stem_width: None,
            proj_dims: vec![4],
            pred_dims: vec![4],
            bn_affine: true,
        }
    }

    fn data(rows: usize, seed: u64) -> Tensor2D {
        let mut rng = Rng::new(seed);
        let v = (0..rows * 4).map(|_| rng.normal()).collect();
        Tensor2D::from_vec(rows, 4, v).unwrap()
    }

    #[test]
    fn identical_samples_floor_the_variance() {
        let net = SdrNet::new(cfg(), &mut Rng::new(1)).unwrap();
        let row = data(1, 2);
        let rep = Tensor2D::vcat(&vec![&row; 8]).unwrap();
        let entry = bn_calibrate(&net, &Target::Full, &rep, 4).unwrap();
        for b in &entry.blocks {
            assert!(b.var.iter().all(|&v| v == VARIANCE_FLOOR));
        }
        let mut stats = BnStats::new();
        stats.insert(Target::Full, entry);
        let out = net.forward(&Target::Full, &rep, Mode::Eval, Some(&stats)).unwrap();
        assert!(out.z.is_finite());
    }

    #[test]
    fn calibration_is_deterministic() {
        let net = SdrNet::new(cfg(), &mut Rng::new(3)).unwrap();
        let x = data(23, 4);
        let t = Target::Path(PathCode::new(vec![1, 0], 2).unwrap());
        assert_eq!(bn_calibrate(&net, &t, &x, 5).unwrap(), bn_calibrate(&net, &t, &x, 5).unwrap());
    }

    #[test]
    fn single_batch_eval_matches_train() {
        let net = SdrNet::new(cfg(), &mut Rng::new(5)).unwrap();
        let x = data(16, 6);
        let mut stats = BnStats::new();
        stats.calibrate(&net, &Target::Full, &x, 16).unwrap();
        let train = net.forward(&Target::Full, &x, Mode::Train, None).unwrap();
        let eval = net.forward(&Target::Full, &x, Mode::Eval, Some(&stats)).unwrap();
        assert!(train.z.max_abs_diff(&eval.z) < 1e-12);
    }

    #[test]
    fn empty_data_is_an_error() {
        let net = SdrNet::new(cfg(), &mut Rng::new(7)).unwrap();
        assert!(matches!(
            bn_calibrate(&net, &Target::Full, &Tensor2D::zeros(0, 4), 4),
            Err(Error::EmptyDataset)
        ));
    }
}
