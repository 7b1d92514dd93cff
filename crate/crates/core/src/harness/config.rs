use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::synthetic::SyntheticSpec;
use crate::clustering::ClusterConfig;
use crate::error::{Error, Result};
use crate::numerics::SgdConfig;
use crate::routing::RouteConfig;
use crate::sdrnet::NetConfig;
use crate::train::{AugmentConfig, Distill, PhaseSchedule, TrainConfig};

/// Raw `key = value` pairs with the line each came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    /// Parses UTF-8 lines; `#` starts a comment, blank lines are skipped, later keys win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("bad key `{key}`"),
                });
            }
            entries.insert(key.to_string(), (v.trim().to_string(), n + 1));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn typed<T: FromStr>(&self, key: &str, into: &mut T) -> Result<()> {
        if let Some((v, line)) = self.entries.get(key) {
            *into = v.parse().map_err(|_| Error::Parse {
                line: *line,
                msg: format!("cannot parse `{v}` for {key}"),
            })?;
        }
        Ok(())
    }

    fn list(&self, key: &str, into: &mut Vec<usize>) -> Result<()> {
        if let Some((v, line)) = self.entries.get(key) {
            *into = if v.is_empty() {
                Vec::new()
            } else {
                v.split(',')
                    .map(|s| {
                        s.trim().parse().map_err(|_| Error::Parse {
                            line: *line,
                            msg: format!("cannot parse `{v}` as a list of counts for {key}"),
                        })
                    })
                    .collect::<Result<_>>()?
            };
        }
        Ok(())
    }
}

/// Every tunable of the pipeline. `Default` is the bundled reference setup.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    pub task_train_per_class: usize,
    pub task_eval_per_class: usize,
    pub k: usize,
    pub g: usize,
    pub blocks: usize,
    pub shared_width: usize,
    pub individual_width: usize,
    pub stem_width: usize,
    pub proj_dims: Vec<usize>,
    pub pred_dims: Vec<usize>,
    pub bn_affine: bool,
    pub cluster: ClusterConfig,
    pub base_steps: usize,
    pub sdr_steps: usize,
    /// Overrides the default split of `sdr_steps` when non-empty.
    pub steps_per_phase: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub distill: Distill,
    pub cosine_decay: bool,
    pub augment: AugmentConfig,
    pub knn_k: usize,
    pub knn_weighted: bool,
    pub calibration_batch: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SyntheticSpec::default(),
            task_train_per_class: 50,
            task_eval_per_class: 50,
            k: 4,
            g: 2,
            blocks: 2,
            shared_width: 4,
            individual_width: 8,
            stem_width: 0,
            proj_dims: vec![16],
            pred_dims: vec![16, 16],
            bn_affine: false,
            cluster: ClusterConfig::default(),
            base_steps: 2000,
            sdr_steps: 4000,
            steps_per_phase: Vec::new(),
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            lambda: 1.0,
            distill: Distill::SiamKd,
            cosine_decay: false,
            augment: AugmentConfig::default(),
            knn_k: 200,
            knn_weighted: false,
            calibration_batch: 64,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "data.superclusters",
    "data.subclusters",
    "data.samples_per_subcluster",
    "data.dim",
    "data.separation",
    "data.sub_spread",
    "data.subspace_dim",
    "data.noise",
    "data.task_train_per_class",
    "data.task_eval_per_class",
    "cluster.k",
    "cluster.epsilon",
    "cluster.sinkhorn_iters",
    "cluster.sinkhorn_tol",
    "cluster.epochs",
    "cluster.temperature",
    "cluster.learning_rate",
    "cluster.momentum",
    "net.g",
    "net.L",
    "net.shared_width",
    "net.individual_width",
    "net.stem_width",
    "net.proj_dims",
    "net.pred_dims",
    "net.bn_affine",
    "base.steps",
    "train.steps",
    "train.steps_per_phase",
    "train.learning_rate",
    "train.momentum",
    "train.weight_decay",
    "train.batch_size",
    "train.lambda",
    "train.distill",
    "train.cosine_decay",
    "augment.noise",
    "augment.mask_prob",
    "augment.scale_jitter",
    "knn.k",
    "knn.weighted",
    "bn.calibration_batch",
];

impl PipelineConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        if let Some(unknown) = kv.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(Error::InvalidConfig(format!("unknown key `{unknown}`")));
        }
        let mut c = Self::default();
        kv.typed("seed", &mut c.seed)?;
        kv.typed("data.superclusters", &mut c.data.superclusters)?;
        kv.typed("data.subclusters", &mut c.data.subclusters)?;
        kv.typed("data.samples_per_subcluster", &mut c.data.samples_per_subcluster)?;
        kv.typed("data.dim", &mut c.data.dim)?;
        kv.typed("data.separation", &mut c.data.separation)?;
        kv.typed("data.sub_spread", &mut c.data.sub_spread)?;
        kv.typed("data.subspace_dim", &mut c.data.subspace_dim)?;
        kv.typed("data.noise", &mut c.data.noise)?;
        kv.typed("data.task_train_per_class", &mut c.task_train_per_class)?;
        kv.typed("data.task_eval_per_class", &mut c.task_eval_per_class)?;
        kv.typed("cluster.k", &mut c.k)?;
        kv.typed("cluster.epsilon", &mut c.cluster.epsilon)?;
        kv.typed("cluster.sinkhorn_iters", &mut c.cluster.sinkhorn_iters)?;
        kv.typed("cluster.sinkhorn_tol", &mut c.cluster.sinkhorn_tol)?;
        kv.typed("cluster.epochs", &mut c.cluster.epochs)?;
        kv.typed("cluster.temperature", &mut c.cluster.temperature)?;
        kv.typed("cluster.learning_rate", &mut c.cluster.learning_rate)?;
        kv.typed("cluster.momentum", &mut c.cluster.momentum)?;
        kv.typed("net.g", &mut c.g)?;
        kv.typed("net.L", &mut c.blocks)?;
        kv.typed("net.shared_width", &mut c.shared_width)?;
        kv.typed("net.individual_width", &mut c.individual_width)?;
        kv.typed("net.stem_width", &mut c.stem_width)?;
        kv.list("net.proj_dims", &mut c.proj_dims)?;
        kv.list("net.pred_dims", &mut c.pred_dims)?;
        kv.typed("net.bn_affine", &mut c.bn_affine)?;
        kv.typed("base.steps", &mut c.base_steps)?;
        kv.typed("train.steps", &mut c.sdr_steps)?;
        kv.list("train.steps_per_phase", &mut c.steps_per_phase)?;
        kv.typed("train.learning_rate", &mut c.learning_rate)?;
        kv.typed("train.momentum", &mut c.momentum)?;
        kv.typed("train.weight_decay", &mut c.weight_decay)?;
        kv.typed("train.batch_size", &mut c.batch_size)?;
        kv.typed("train.lambda", &mut c.lambda)?;
        kv.typed("train.distill", &mut c.distill)?;
        kv.typed("train.cosine_decay", &mut c.cosine_decay)?;
        kv.typed("augment.noise", &mut c.augment.gaussian_noise_sigma)?;
        kv.typed("augment.mask_prob", &mut c.augment.mask_prob)?;
        kv.typed("augment.scale_jitter", &mut c.augment.scale_jitter)?;
        kv.typed("knn.k", &mut c.knn_k)?;
        kv.typed("knn.weighted", &mut c.knn_weighted)?;
        kv.typed("bn.calibration_batch", &mut c.calibration_batch)?;
        c.validate()?;
        Ok(c)
    }

    /// `key = value` text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("seed", self.seed.to_string());
        put("data.superclusters", self.data.superclusters.to_string());
        put("data.subclusters", self.data.subclusters.to_string());
        put("data.samples_per_subcluster", self.data.samples_per_subcluster.to_string());
        put("data.dim", self.data.dim.to_string());
        put("data.separation", self.data.separation.to_string());
        put("data.sub_spread", self.data.sub_spread.to_string());
        put("data.subspace_dim", self.data.subspace_dim.to_string());
        put("data.noise", self.data.noise.to_string());
        put("data.task_train_per_class", self.task_train_per_class.to_string());
        put("data.task_eval_per_class", self.task_eval_per_class.to_string());
        put("cluster.k", self.k.to_string());
        put("cluster.epsilon", self.cluster.epsilon.to_string());
        put("cluster.sinkhorn_iters", self.cluster.sinkhorn_iters.to_string());
        put("cluster.sinkhorn_tol", self.cluster.sinkhorn_tol.to_string());
        put("cluster.epochs", self.cluster.epochs.to_string());
        put("cluster.temperature", self.cluster.temperature.to_string());
        put("cluster.learning_rate", self.cluster.learning_rate.to_string());
        put("cluster.momentum", self.cluster.momentum.to_string());
        put("net.g", self.g.to_string());
        put("net.L", self.blocks.to_string());
        put("net.shared_width", self.shared_width.to_string());
        put("net.individual_width", self.individual_width.to_string());
        put("net.stem_width", self.stem_width.to_string());
        put("net.proj_dims", list(&self.proj_dims));
        put("net.pred_dims", list(&self.pred_dims));
        put("net.bn_affine", self.bn_affine.to_string());
        put("base.steps", self.base_steps.to_string());
        put("train.steps", self.sdr_steps.to_string());
        put("train.steps_per_phase", list(&self.steps_per_phase));
        put("train.learning_rate", self.learning_rate.to_string());
        put("train.momentum", self.momentum.to_string());
        put("train.weight_decay", self.weight_decay.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.lambda", self.lambda.to_string());
        put("train.distill", self.distill.to_string());
        put("train.cosine_decay", self.cosine_decay.to_string());
        put("augment.noise", self.augment.gaussian_noise_sigma.to_string());
        put("augment.mask_prob", self.augment.mask_prob.to_string());
        put("augment.scale_jitter", self.augment.scale_jitter.to_string());
        put("knn.k", self.knn_k.to_string());
        put("knn.weighted", self.knn_weighted.to_string());
        put("bn.calibration_batch", self.calibration_batch.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let paths = u32::try_from(self.blocks)
            .ok()
            .and_then(|l| self.g.checked_pow(l))
            .ok_or_else(|| Error::InvalidConfig("g^L overflows".into()))?;
        if self.k != paths {
            return Err(Error::InvalidConfig(format!(
                "cluster.k = {} must equal g^L = {}^{} = {paths}",
                self.k, self.g, self.blocks
            )));
        }
        self.data.validate()?;
        self.net_config()?;
        self.base_net_config()?;
        self.train_config()?.validate()?;
        self.cluster.validate()?;
        if self.knn_k == 0 || self.calibration_batch == 0 {
            return Err(Error::InvalidConfig("knn.k and bn.calibration_batch must be >= 1".into()));
        }
        if self.task_train_per_class == 0 {
            return Err(Error::InvalidConfig("data.task_train_per_class must be >= 1".into()));
        }
        Ok(())
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let cfg = NetConfig {
            input_dim: self.data.dim,
            blocks: self.blocks,
            groups: self.g,
            shared_width: self.shared_width,
            individual_width: self.individual_width,
            stem_width: (self.stem_width > 0).then_some(self.stem_width),
            proj_dims: self.proj_dims.clone(),
            pred_dims: self.pred_dims.clone(),
            bn_affine: self.bn_affine,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The single-path reference net: same widths as one sub-net.
    pub fn base_net_config(&self) -> Result<NetConfig> {
        let cfg = NetConfig {
            groups: 1,
            ..self.net_config()?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> PhaseSchedule {
        if self.steps_per_phase.is_empty() {
            PhaseSchedule::split(self.sdr_steps, self.blocks)
        } else {
            PhaseSchedule {
                steps_per_phase: self.steps_per_phase.clone(),
            }
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            sgd: SgdConfig::new(self.learning_rate, self.momentum, self.weight_decay)?,
            batch_size: self.batch_size,
            lambda: self.lambda,
            distill: self.distill,
            augment: self.augment,
            schedule: self.schedule(),
            cosine_decay: self.cosine_decay,
        })
    }

    pub fn route_config(&self) -> RouteConfig {
        RouteConfig {
            k: self.knn_k,
            weighted: self.knn_weighted,
            calibration_batch: self.calibration_batch,
            seed: self.seed,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_sections() {
        let kv = KeyValues::parse("# header\nnet.g = 4 # trailing\n\n  seed=9\n").unwrap();
        assert_eq!(kv.get("net.g"), Some("4"));
        assert_eq!(kv.get("seed"), Some("9"));
        assert!(matches!(KeyValues::parse("a = 1\nnot a pair\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn k_must_match_paths() {
        let err = PipelineConfig::from_text("net.g = 2\nnet.L = 3\ncluster.k = 4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cluster.k = 4") && msg.contains("8"), "{msg}");
    }

    #[test]
    fn text_round_trip() {
        let c = PipelineConfig {
            seed: 17,
            lambda: 0.5,
            distill: Distill::L2,
            steps_per_phase: vec![3, 4, 5],
            ..PipelineConfig::default()
        };
        assert_eq!(PipelineConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(PipelineConfig::from_text("net.gg = 2\n").is_err());
        assert!(matches!(
            PipelineConfig::from_text("seed = 1\ntrain.learning_rate = fast\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
