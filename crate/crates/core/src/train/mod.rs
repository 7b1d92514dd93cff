//! Self-supervised pre-training of the weight-sharing network.
//!
//! Every step samples one target from the active network space, draws a batch
//! from that target's dataset, builds two augmented views and applies one SGD
//! step to the target's parameters. Full-net steps optimize the stop-gradient
//! Siamese objective on the whole dataset. Sub-net steps add a distillation
//! term towards the full net's projections, computed in train mode with no
//! gradient. The space grows phase by phase, unlocking paths that differ in
//! progressively earlier blocks.

mod augment;
mod loss;

pub use augment::{augment, augment_batch, AugmentConfig};
pub use loss::{collapse_metric, l2_distill_loss, neg_cosine_batch, siamkd_loss, simsiam_loss, PairLoss};

use std::fmt;

use crate::clustering::DatasetSplit;
use crate::error::{Error, Result};
use crate::numerics::{Rng, SgdConfig, SgdState, Tensor2D};
use crate::sdrnet::{path_decode, Gradients, Mode, SdrNet, Target};

/// Distillation objective used on sub-net steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distill {
    /// Negative cosine between sub-net predictions and the full net's projections.
    SiamKd,
    /// Squared error between sub-net and full-net projections of the same view.
    L2,
}

impl fmt::Display for Distill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distill::SiamKd => "siamkd",
            Distill::L2 => "l2",
        })
    }
}

impl std::str::FromStr for Distill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "siamkd" => Ok(Distill::SiamKd),
            "l2" => Ok(Distill::L2),
            other => Err(Error::InvalidConfig(format!("unknown distillation `{other}` (expected siamkd or l2)"))),
        }
    }
}

/// Targets trainable in phase `p`: the full net alone in phase 0, then the
/// full net plus every path whose first `L − p` digits are zero, in index order.
pub fn phase_space(p: usize, g: usize, blocks: usize) -> Result<Vec<Target>> {
    if p > blocks {
        return Err(Error::InvalidConfig(format!("phase {p} is outside [0, {blocks}]")));
    }
    if g == 0 {
        return Err(Error::InvalidConfig("g must be >= 1".into()));
    }
    let unlocked = g
        .checked_pow(p as u32)
        .ok_or_else(|| Error::InvalidConfig("path count overflows".into()))?;
    let mut space = vec![Target::Full];
    if p == 0 {
        return Ok(space);
    }
    for i in 0..unlocked {
        space.push(Target::Path(path_decode(i, g, blocks)?));
    }
    Ok(space)
}

/// Fixed step budget for each phase `0..=L`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhaseSchedule {
    pub steps_per_phase: Vec<usize>,
}

impl PhaseSchedule {
    /// 30% of `total` in phase 0, the rest shared equally by phases `1..=L`;
    /// leftover steps go to the earliest of those.
    pub fn split(total: usize, blocks: usize) -> Self {
        let first = total * 3 / 10;
        let rest = total - first;
        let mut steps = vec![first];
        if blocks == 0 {
            steps[0] = total;
        } else {
            steps.extend((0..blocks).map(|i| rest / blocks + usize::from(i < rest % blocks)));
        }
        Self { steps_per_phase: steps }
    }

    pub fn total(&self) -> usize {
        self.steps_per_phase.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch_size: usize,
    /// Weight of the distillation term on sub-net steps; 0 disables it.
    pub lambda: f64,
    pub distill: Distill,
    pub augment: AugmentConfig,
    pub schedule: PhaseSchedule,
    /// Cosine decay of the learning rate from its base value to 0.
    pub cosine_decay: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.augment.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be >= 2 for batch statistics, got {}",
                self.batch_size
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    fn learning_rate_at(&self, step: usize) -> f64 {
        let base = self.sgd.learning_rate;
        let total = self.schedule.total();
        if !self.cosine_decay || total == 0 {
            return base;
        }
        let t = step.min(total) as f64 / total as f64;
        0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Rows of one dataset, tagged with its index: 0 is the whole dataset and
/// `i ≥ 1` is cluster `i − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub dataset: usize,
    pub x: Tensor2D,
}

/// Dataset index a target trains on.
pub fn dataset_for(target: &Target, g: usize) -> Result<usize> {
    match target {
        Target::Full => Ok(0),
        Target::Path(p) => Ok(p.index(g)? + 1),
    }
}

/// Draws `batch_size` rows of `data` from `indices`, with replacement.
pub fn sample_batch(data: &Tensor2D, indices: &[usize], batch_size: usize, dataset: usize, rng: &mut Rng) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let picks: Vec<usize> = (0..batch_size).map(|_| indices[rng.below(indices.len())]).collect();
    Ok(Batch {
        dataset,
        x: data.select_rows(&picks),
    })
}

/// One record of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub phase: usize,
    /// `full` or the path index.
    pub target: String,
    pub loss: f64,
    pub kd: f64,
    pub collapse: f64,
}

impl fmt::Display for MetricRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} phase={} target={} loss={} kd={} collapse={}",
            self.step, self.phase, self.target, self.loss, self.kd, self.collapse
        )
    }
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: SdrNet,
    pub opt: SgdState,
    pub phase: usize,
    pub step: usize,
    pub rng: Rng,
    pub log: Vec<MetricRecord>,
}

impl TrainState {
    pub fn new(net: SdrNet, sgd: SgdConfig, rng: Rng) -> Self {
        let opt = net.optimizer(sgd);
        Self {
            net,
            opt,
            phase: 0,
            step: 0,
            rng,
            log: Vec::new(),
        }
    }
}

/// Loss of one step on fixed views and its gradient over the target's parameters.
#[derive(Clone, Debug)]
pub struct StepObjective {
    /// Siamese loss plus `λ·kd`.
    pub loss: f64,
    pub kd: f64,
    pub grads: Gradients,
    /// Projections of the first view.
    pub z1: Tensor2D,
}

/// Full-net projections of both views, computed in train mode and treated as constants.
pub fn teacher_outputs(net: &SdrNet, x1: &Tensor2D, x2: &Tensor2D) -> Result<(Tensor2D, Tensor2D)> {
    let a = net.forward(&Target::Full, x1, Mode::Train, None)?;
    let b = net.forward(&Target::Full, x2, Mode::Train, None)?;
    Ok((a.z, b.z))
}

/// Evaluates the step objective for `target` on views `x1`, `x2`.
///
/// `teacher` holds the full net's projections; it is ignored for the full net
/// and when `lambda` is 0.
pub fn step_objective(
    net: &SdrNet,
    target: &Target,
    x1: &Tensor2D,
    x2: &Tensor2D,
    teacher: Option<(&Tensor2D, &Tensor2D)>,
    lambda: f64,
    distill: Distill,
) -> Result<StepObjective> {
    let o1 = net.forward(target, x1, Mode::Train, None)?;
    let o2 = net.forward(target, x2, Mode::Train, None)?;
    let mut total = simsiam_loss(&o1.z, &o2.z, &o1.p, &o2.p)?;
    let mut kd = 0.0;
    if let (Target::Path(_), Some((t1, t2))) = (target, teacher) {
        if lambda > 0.0 {
            let d = match distill {
                Distill::SiamKd => siamkd_loss(&o1.p, &o2.p, t1, t2)?,
                Distill::L2 => l2_distill_loss(&o1.z, &o2.z, t1, t2)?,
            };
            kd = d.loss;
            total.loss += lambda * d.loss;
            total.d_z1.axpy(lambda, &d.d_z1)?;
            total.d_z2.axpy(lambda, &d.d_z2)?;
            total.d_p1.axpy(lambda, &d.d_p1)?;
            total.d_p2.axpy(lambda, &d.d_p2)?;
        }
    }
    let mut grads = net.backward(&o1.cache, &total.d_z1, &total.d_p1)?;
    grads.accumulate(&net.backward(&o2.cache, &total.d_z2, &total.d_p2)?)?;
    Ok(StepObjective {
        loss: total.loss,
        kd,
        grads,
        z1: o1.z,
    })
}

/// One optimizer step of `target` on `batch`; appends and returns its metric record.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, target: &Target, batch: &Batch) -> Result<MetricRecord> {
    let g = state.net.config().groups;
    let expected = dataset_for(target, g)?;
    if batch.dataset != expected {
        let name = |i: usize| if i == 0 { "D_0 (all samples)".to_string() } else { format!("cluster {}", i - 1) };
        return Err(Error::DatasetMismatch {
            target: target.to_string(),
            expected: name(expected),
            got: name(batch.dataset),
        });
    }
    let (x1, x2) = augment_batch(&batch.x, &mut state.rng, &cfg.augment);
    let teacher = match target {
        Target::Path(_) if cfg.lambda > 0.0 => Some(teacher_outputs(&state.net, &x1, &x2)?),
        _ => None,
    };
    let obj = step_objective(
        &state.net,
        target,
        &x1,
        &x2,
        teacher.as_ref().map(|(a, b)| (a, b)),
        cfg.lambda,
        cfg.distill,
    )?;
    if !obj.loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {}", state.step)));
    }
    state.opt.config.learning_rate = cfg.learning_rate_at(state.step);
    state.net.apply_gradients(&obj.grads, &mut state.opt)?;
    let record = MetricRecord {
        step: state.step,
        phase: state.phase,
        target: target.label(g),
        loss: obj.loss,
        kd: obj.kd,
        collapse: collapse_metric(&obj.z1)?,
    };
    state.step += 1;
    state.log.push(record.clone());
    Ok(record)
}

/// Trained network plus its metrics log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: SdrNet,
    pub log: Vec<MetricRecord>,
}

/// Runs the full phase schedule. Cluster `j` of `split` trains path `path_decode(j)`.
pub fn train(net: SdrNet, cfg: &TrainConfig, split: &DatasetSplit, data: &Tensor2D, rng: Rng) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (g, blocks) = (net.config().groups, net.config().blocks);
    let paths = net.config().path_count().expect("validated config");
    if split.k() != paths {
        return Err(Error::InvalidConfig(format!(
            "the split has k = {} clusters but g^L = {g}^{blocks} = {paths}",
            split.k()
        )));
    }
    if split.all.len() != data.rows() {
        return Err(Error::InvalidConfig(format!(
            "the split covers {} samples but the data has {}",
            split.all.len(),
            data.rows()
        )));
    }
    if cfg.schedule.steps_per_phase.len() != blocks + 1 {
        return Err(Error::InvalidConfig(format!(
            "schedule lists {} phases, expected L + 1 = {}",
            cfg.schedule.steps_per_phase.len(),
            blocks + 1
        )));
    }
    let mut state = TrainState::new(net, cfg.sgd, rng);
    for (phase, &steps) in cfg.schedule.steps_per_phase.iter().enumerate() {
        state.phase = phase;
        let space = phase_space(phase, g, blocks)?;
        for _ in 0..steps {
            let target = space[state.rng.below(space.len())].clone();
            let dataset = dataset_for(&target, g)?;
            let indices = if dataset == 0 { &split.all[..] } else { split.subset(dataset - 1) };
            let batch = sample_batch(data, indices, cfg.batch_size, dataset, &mut state.rng)?;
            train_step(&mut state, cfg, &target, &batch)?;
        }
    }
    Ok(TrainOutcome {
        net: state.net,
        log: state.log,
    })
}

/// Trains only the full net on every sample.
pub fn train_full(net: SdrNet, cfg: &TrainConfig, data: &Tensor2D, steps: usize, rng: Rng) -> Result<TrainOutcome> {
    cfg.validate()?;
    let all: Vec<usize> = (0..data.rows()).collect();
    let mut state = TrainState::new(net, cfg.sgd, rng);
    for _ in 0..steps {
        let batch = sample_batch(data, &all, cfg.batch_size, 0, &mut state.rng)?;
        train_step(&mut state, cfg, &Target::Full, &batch)?;
    }
    Ok(TrainOutcome {
        net: state.net,
        log: state.log,
    })
}
