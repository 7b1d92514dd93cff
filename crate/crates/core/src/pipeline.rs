//! In-process stages of the pre-training and routing pipeline.
//!
//! Each stage draws its randomness from a stream derived from the run seed and
//! the stage name, so stages can be re-run independently with identical output.

use crate::clustering::{cluster, split_dataset, ClusterModel, DatasetSplit, FeatureTable};
use crate::error::Result;
use crate::harness::{fnv1a64, PipelineConfig, SyntheticData};
use crate::numerics::{Rng, Tensor2D};
use crate::routing::{calibrate_missing, extract_features, knn_accuracy, route, DownstreamTask, RouteReport};
use crate::sdrnet::{all_paths, BnStats, SdrNet, Target};
use crate::train::{train, train_full, MetricRecord};

/// Random stream for `stage` under `seed`.
pub fn stage_rng(seed: u64, stage: &str) -> Rng {
    Rng::new(seed ^ fnv1a64(stage.as_bytes()))
}

/// A trained network with calibrated statistics and its training log.
#[derive(Clone, Debug)]
pub struct Trained {
    pub net: SdrNet,
    pub bn: BnStats,
    pub log: Vec<MetricRecord>,
}

/// Plain Siamese pre-training of a single-path net on every sample.
pub fn pretrain_base(cfg: &PipelineConfig, data: &Tensor2D) -> Result<Trained> {
    let net = SdrNet::new(cfg.base_net_config()?, &mut stage_rng(cfg.seed, "base-init"))?;
    let out = train_full(net, &cfg.train_config()?, data, cfg.base_steps, stage_rng(cfg.seed, "base-train"))?;
    let mut bn = BnStats::new();
    bn.calibrate(&out.net, &Target::Full, data, cfg.calibration_batch)?;
    Ok(Trained {
        net: out.net,
        bn,
        log: out.log,
    })
}

/// Backbone features of the base net for every sample.
pub fn base_features(base: &Trained, data: &Tensor2D) -> Result<FeatureTable> {
    FeatureTable::from_raw(&extract_features(&base.net, &Target::Full, data, &base.bn)?, None)
}

/// Balanced clustering of the base features into `k` subsets.
pub fn cluster_features(cfg: &PipelineConfig, table: &FeatureTable) -> Result<(ClusterModel, DatasetSplit)> {
    let model = cluster(table, cfg.k, cfg.cluster.epochs, &mut stage_rng(cfg.seed, "cluster"), &cfg.cluster)?;
    let split = split_dataset(&model.labels, cfg.k)?;
    Ok((model, split))
}

/// Progressive pre-training of the weight-sharing net, then calibration of every target.
pub fn pretrain_sdr(cfg: &PipelineConfig, data: &Tensor2D, split: &DatasetSplit) -> Result<Trained> {
    let net = SdrNet::new(cfg.net_config()?, &mut stage_rng(cfg.seed, "sdr-init"))?;
    let out = train(net, &cfg.train_config()?, split, data, stage_rng(cfg.seed, "sdr-train"))?;
    let mut targets: Vec<Target> = all_paths(cfg.g, cfg.blocks)?.into_iter().map(Target::Path).collect();
    targets.push(Target::Full);
    let mut bn = BnStats::new();
    calibrate_missing(&out.net, &mut bn, &targets, split, data, cfg.calibration_batch)?;
    Ok(Trained {
        net: out.net,
        bn,
        log: out.log,
    })
}

/// kNN accuracy of the base net on `task`.
pub fn baseline_accuracy(cfg: &PipelineConfig, base: &Trained, task: &DownstreamTask) -> Result<f64> {
    let tr = extract_features(&base.net, &Target::Full, &task.train_x, &base.bn)?;
    let ev = extract_features(&base.net, &Target::Full, &task.eval_x, &base.bn)?;
    knn_accuracy(task, &tr, &ev, cfg.knn_k, cfg.knn_weighted)
}

/// Routes `task` over the trained net; `baseline` is recorded in the report.
pub fn route_task(
    cfg: &PipelineConfig,
    sdr: &mut Trained,
    split: &DatasetSplit,
    data: &Tensor2D,
    task: &DownstreamTask,
    baseline: Option<f64>,
) -> Result<RouteReport> {
    let mut report = route(&sdr.net, &mut sdr.bn, split, data, task, &cfg.route_config())?;
    report.baseline = baseline;
    Ok(report)
}

/// One downstream task per supercluster, drawn fresh from the generator.
pub fn downstream_tasks(cfg: &PipelineConfig, synth: &SyntheticData) -> Result<Vec<DownstreamTask>> {
    let mut rng = stage_rng(cfg.seed, "tasks");
    (0..synth.sub_means.len())
        .map(|c| synth.task(c, cfg.task_train_per_class, cfg.task_eval_per_class, &mut rng))
        .collect()
}

/// The cluster holding most samples of ground-truth group `group`; ties to the lower cluster.
pub fn majority_cluster(cluster_labels: &[usize], truth: &[usize], group: usize, k: usize) -> usize {
    let mut counts = vec![0usize; k];
    for (&c, _) in cluster_labels.iter().zip(truth).filter(|(_, &t)| t == group) {
        counts[c] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}
