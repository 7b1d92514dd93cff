//! Picks, for a labelled downstream task, the sub-net whose frozen features
//! give the best kNN accuracy.

use std::fmt;

use rayon::prelude::*;

use crate::clustering::DatasetSplit;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{dot, Tensor2D, NORM_EPS};
use crate::sdrnet::{all_paths, BnEntry, BnStats, Mode, NetConfig, PathCode, SdrNet, Target};

/// Labelled train and eval splits of a downstream task.
#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamTask {
    pub name: String,
    pub train_x: Tensor2D,
    pub train_y: Vec<usize>,
    pub eval_x: Tensor2D,
    pub eval_y: Vec<usize>,
}

impl DownstreamTask {
    /// Every eval label must appear among the train labels.
    pub fn new(name: impl Into<String>, train_x: Tensor2D, train_y: Vec<usize>, eval_x: Tensor2D, eval_y: Vec<usize>) -> Result<Self> {
        if train_x.rows() != train_y.len() || eval_x.rows() != eval_y.len() {
            return Err(shape_err("DownstreamTask", "label count differs from sample count"));
        }
        if train_x.cols() != eval_x.cols() {
            return Err(shape_err("DownstreamTask", "train and eval widths differ"));
        }
        if train_y.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(l) = eval_y.iter().find(|l| !train_y.contains(l)) {
            return Err(Error::InvalidConfig(format!("eval label {l} never appears in the train split")));
        }
        Ok(Self {
            name: name.into(),
            train_x,
            train_y,
            eval_x,
            eval_y,
        })
    }
}

/// Eval-mode backbone features of `target`, rows l2-normalized.
pub fn extract_features(net: &SdrNet, target: &Target, samples: &Tensor2D, bn: &BnStats) -> Result<Tensor2D> {
    let out = net.forward(target, samples, Mode::Eval, Some(bn))?;
    Ok(out.backbone.normalize_rows(NORM_EPS))
}

/// Majority-vote kNN over cosine similarity of l2-normalized rows.
///
/// Neighbours are the `min(k, n)` rows with the highest similarity, ties to the
/// lower row index. Vote ties go to the class with the larger summed
/// similarity, then to the lower class id.
pub fn knn_predict(train: &Tensor2D, labels: &[usize], queries: &Tensor2D, k: usize) -> Result<Vec<usize>> {
    knn_predict_with(train, labels, queries, k, false)
}

/// [`knn_predict`] with optional similarity-weighted votes.
pub fn knn_predict_with(train: &Tensor2D, labels: &[usize], queries: &Tensor2D, k: usize, weighted: bool) -> Result<Vec<usize>> {
    if train.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("kNN k must be >= 1".into()));
    }
    if labels.len() != train.rows() {
        return Err(shape_err("knn_predict", format!("{} labels for {} rows", labels.len(), train.rows())));
    }
    if queries.cols() != train.cols() {
        return Err(shape_err("knn_predict", format!("query width {} vs train width {}", queries.cols(), train.cols())));
    }
    let k = k.min(train.rows());
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(train.rows());
    let mut votes = vec![0.0f64; classes];
    let mut sums = vec![0.0f64; classes];
    Ok(queries
        .iter_rows()
        .map(|q| {
            order.clear();
            order.extend(train.iter_rows().enumerate().map(|(i, t)| (dot(q, t), i)));
            let rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            if k < order.len() {
                order.select_nth_unstable_by(k - 1, rank);
            }
            // Canonical order so tied similarity sums round identically.
            order[..k].sort_unstable_by(rank);
            votes.iter_mut().for_each(|v| *v = 0.0);
            sums.iter_mut().for_each(|v| *v = 0.0);
            for &(s, i) in &order[..k] {
                let c = labels[i];
                votes[c] += if weighted { s } else { 1.0 };
                sums[c] += s;
            }
            let mut best = 0;
            for c in 1..classes {
                let better = votes[c] > votes[best] || (votes[c] == votes[best] && sums[c] > sums[best]);
                if better {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Fraction of the task's eval labels predicted correctly.
pub fn knn_accuracy(task: &DownstreamTask, train_feats: &Tensor2D, eval_feats: &Tensor2D, k: usize, weighted: bool) -> Result<f64> {
    if eval_feats.rows() != task.eval_y.len() {
        return Err(shape_err("knn_accuracy", "eval features do not match the task"));
    }
    if task.eval_y.is_empty() {
        return Ok(0.0);
    }
    let pred = knn_predict_with(train_feats, &task.train_y, eval_feats, k, weighted)?;
    let hits = pred.iter().zip(&task.eval_y).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / task.eval_y.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouteConfig {
    /// Neighbour count; clipped to the train split size.
    pub k: usize,
    pub weighted: bool,
    /// Chunk size for batch-norm calibration.
    pub calibration_batch: usize,
    /// Recorded in the report header.
    pub seed: u64,
}

impl Default for RouteConfig {
    fn default() -> Self {
        Self {
            k: 200,
            weighted: false,
            calibration_batch: 64,
            seed: 0,
        }
    }
}

/// Accuracy of one evaluated network.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteEntry {
    pub path: PathCode,
    pub index: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteReport {
    pub task: String,
    pub k: usize,
    pub seed: u64,
    /// One entry per path, by index.
    pub entries: Vec<RouteEntry>,
    pub full_accuracy: f64,
    /// `None` when the full net strictly beats every path.
    pub best: Option<usize>,
    pub best_accuracy: f64,
    /// Accuracy of a reference model, when one was supplied.
    pub baseline: Option<f64>,
}

const TIE_NOTE: &str = "ties go to the lowest path index; the full net wins only when strictly best";

impl RouteReport {
    pub fn best_target(&self, g: usize, blocks: usize) -> Result<Target> {
        match self.best {
            Some(i) => Ok(Target::Path(crate::sdrnet::path_decode(i, g, blocks)?)),
            None => Ok(Target::Full),
        }
    }

    /// Population standard deviation of the per-path accuracies.
    pub fn path_accuracy_std(&self) -> f64 {
        let n = self.entries.len() as f64;
        let mean = self.entries.iter().map(|e| e.accuracy).sum::<f64>() / n;
        (self.entries.iter().map(|e| (e.accuracy - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// Inverse of the `Display` form.
    pub fn parse(text: &str) -> Result<Self> {
        let mut task = None;
        let mut k = None;
        let mut seed = None;
        let mut baseline = None;
        let mut entries = Vec::new();
        let mut full = None;
        let mut best = None;
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let err = |msg: &str| Error::Parse {
                line: line_no,
                msg: msg.to_string(),
            };
            let fields: Vec<(&str, &str)> = line
                .split_whitespace()
                .map(|f| f.split_once('=').ok_or_else(|| err("expected key=value")))
                .collect::<Result<_>>()?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| err("not a number"));
            match fields.first() {
                None => continue,
                Some(("task", _)) => task = Some(line["task=".len()..].to_string()),
                Some(("k", v)) => k = Some(v.parse().map_err(|_| err("bad k"))?),
                Some(("seed", v)) => seed = Some(v.parse().map_err(|_| err("bad seed"))?),
                Some(("baseline", v)) => baseline = Some(num(v)?),
                Some(("note", _)) => {}
                Some(("path", "full")) => {
                    let acc = fields.iter().find(|(k, _)| *k == "acc").ok_or_else(|| err("missing acc"))?;
                    full = Some(num(acc.1)?);
                }
                Some(("path", v)) => {
                    let index: usize = v.parse().map_err(|_| err("bad path index"))?;
                    let get = |key: &str| fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).ok_or_else(|| err("missing field"));
                    let digits = get("digits")?
                        .split(',')
                        .map(|d| d.parse::<usize>().map_err(|_| err("bad digit")))
                        .collect::<Result<Vec<_>>>()?;
                    let g = digits.iter().max().map_or(1, |m| m + 1);
                    let path = PathCode::new(digits, g).map_err(|e| err(&e.to_string()))?;
                    entries.push(RouteEntry {
                        path,
                        index,
                        accuracy: num(get("acc")?)?,
                    });
                }
                Some(("best", v)) => {
                    let acc = fields.iter().find(|(k, _)| *k == "acc").ok_or_else(|| err("missing acc"))?;
                    let which = if *v == "full" { None } else { Some(v.parse::<usize>().map_err(|_| err("bad best"))?) };
                    best = Some((which, num(acc.1)?));
                }
                Some((key, _)) => return Err(err(&format!("unknown key `{key}`"))),
            }
        }
        let missing = |what: &str| Error::Parse {
            line: 0,
            msg: format!("report lacks {what}"),
        };
        let (best, best_accuracy) = best.ok_or_else(|| missing("a best= line"))?;
        Ok(Self {
            task: task.ok_or_else(|| missing("task="))?,
            k: k.ok_or_else(|| missing("k="))?,
            seed: seed.ok_or_else(|| missing("seed="))?,
            entries,
            full_accuracy: full.ok_or_else(|| missing("the full-net entry"))?,
            best,
            best_accuracy,
            baseline,
        })
    }
}

impl fmt::Display for RouteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task={}", self.task)?;
        writeln!(f, "k={}", self.k)?;
        writeln!(f, "seed={}", self.seed)?;
        if let Some(b) = self.baseline {
            writeln!(f, "baseline={b}")?;
        }
        writeln!(f, "note={}", TIE_NOTE.replace(' ', "_"))?;
        for e in &self.entries {
            writeln!(f, "path={} digits={} acc={}", e.index, e.path.digit_string(), e.accuracy)?;
        }
        writeln!(f, "path=full digits=- acc={}", self.full_accuracy)?;
        match self.best {
            Some(i) => writeln!(f, "best={i} acc={}", self.best_accuracy),
            None => writeln!(f, "best=full acc={}", self.best_accuracy),
        }
    }
}

/// Worker count from `SDR_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("SDR_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn with_pool<T: Send>(work: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(work))
}

/// Rows each target was pre-trained on: all samples for the full net, cluster
/// `index` for a path.
fn calibration_rows<'a>(target: &Target, g: usize, split: &'a DatasetSplit) -> Result<&'a [usize]> {
    match target {
        Target::Full => Ok(&split.all),
        Target::Path(p) => {
            let i = p.index(g)?;
            if i >= split.k() {
                return Err(Error::InvalidConfig(format!("split has {} clusters, path {i} has none", split.k())));
            }
            Ok(split.subset(i))
        }
    }
}

/// Calibrates every target in `targets` that `bn` lacks, each on its own subset.
pub fn calibrate_missing(net: &SdrNet, bn: &mut BnStats, targets: &[Target], split: &DatasetSplit, data: &Tensor2D, batch: usize) -> Result<()> {
    let g = net.config().groups;
    let missing: Vec<&Target> = targets.iter().filter(|t| !bn.contains(t)).collect();
    let fresh: Vec<Result<(Target, BnEntry)>> = with_pool(|| {
        missing
            .par_iter()
            .map(|t| {
                let rows = data.select_rows(calibration_rows(t, g, split)?);
                Ok(((*t).clone(), crate::sdrnet::bn_calibrate(net, t, &rows, batch)?))
            })
            .collect()
    })?;
    for r in fresh {
        let (t, e) = r?;
        bn.insert(t, e);
    }
    Ok(())
}

/// Evaluates every path and the full net on `task` and picks the best path.
pub fn route(
    net: &SdrNet,
    bn: &mut BnStats,
    split: &DatasetSplit,
    data: &Tensor2D,
    task: &DownstreamTask,
    cfg: &RouteConfig,
) -> Result<RouteReport> {
    let NetConfig { groups: g, blocks, .. } = *net.config();
    let paths = all_paths(g, blocks)?;
    let mut targets: Vec<Target> = paths.iter().cloned().map(Target::Path).collect();
    targets.push(Target::Full);
    calibrate_missing(net, bn, &targets, split, data, cfg.calibration_batch)?;
    let stats: &BnStats = bn;
    let scores: Vec<Result<f64>> = with_pool(|| {
        targets
            .par_iter()
            .map(|t| {
                let tr = extract_features(net, t, &task.train_x, stats)?;
                let ev = extract_features(net, t, &task.eval_x, stats)?;
                knn_accuracy(task, &tr, &ev, cfg.k, cfg.weighted)
            })
            .collect()
    })?;
    let mut scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    let full_accuracy = scores.pop().expect("full net evaluated");
    let entries: Vec<RouteEntry> = paths
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(index, (path, accuracy))| RouteEntry { path, index, accuracy })
        .collect();
    let top = entries
        .iter()
        .fold(None::<&RouteEntry>, |best, e| match best {
            Some(b) if b.accuracy >= e.accuracy => Some(b),
            _ => Some(e),
        })
        .expect("at least one path");
    let (best, best_accuracy) = if full_accuracy > top.accuracy {
        (None, full_accuracy)
    } else {
        (Some(top.index), top.accuracy)
    };
    Ok(RouteReport {
        task: task.name.clone(),
        k: cfg.k.min(task.train_y.len()),
        seed: cfg.seed,
        entries,
        full_accuracy,
        best,
        best_accuracy,
        baseline: None,
    })
}

/// A single-path network holding only `path`'s parameters, with its statistics
/// stored under both the full net and the all-zero path.
pub fn export_subnet(net: &SdrNet, path: &PathCode, bn: &BnStats) -> Result<(SdrNet, BnStats)> {
    let target = Target::Path(path.clone());
    net.check_target(&target)?;
    let entry = bn
        .get(&target)
        .ok_or_else(|| Error::CalibrationRequired(target.to_string()))?;
    let cfg = NetConfig {
        groups: 1,
        ..net.config().clone()
    };
    let mut out = SdrNet::zeros(cfg)?;
    for id in net.subnet_params(&target)? {
        let name = net.name(id);
        let renamed = rename_individual(name, path);
        let dest = out
            .find(&renamed)
            .ok_or_else(|| Error::Format(format!("exported net lacks {renamed}")))?;
        out.set_param(dest, net.param(id).clone())?;
    }
    let mut stats = BnStats::new();
    stats.insert(Target::Path(PathCode::zeros(path.len())), entry.clone());
    stats.insert(Target::Full, entry.clone());
    Ok((out, stats))
}

/// `block{l}.ind{d}…` and `block{l}.bn.ind{d}…` become `…ind0…`.
fn rename_individual(name: &str, path: &PathCode) -> String {
    for (l, &d) in path.digits().iter().enumerate() {
        for prefix in [format!("block{l}.ind{d}."), format!("block{l}.bn.ind{d}.")] {
            if let Some(rest) = name.strip_prefix(&prefix) {
                let head = &prefix[..prefix.len() - format!("ind{d}.").len()];
                return format!("{head}ind0.{rest}");
            }
        }
    }
    name.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::split_dataset;
    use crate::numerics::Rng;

    fn unit_rows(rows: usize, cols: usize, rng: &mut Rng) -> Tensor2D {
        let t = Tensor2D::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap();
        t.normalize_rows(NORM_EPS)
    }

    #[test]
    fn single_training_row_wins_everywhere() {
        let mut rng = Rng::new(1);
        let train = unit_rows(1, 3, &mut rng);
        let q = unit_rows(5, 3, &mut rng);
        assert_eq!(knn_predict(&train, &[4], &q, 10).unwrap(), vec![4; 5]);
    }

    #[test]
    fn exact_match_with_k1() {
        let mut rng = Rng::new(2);
        let train = unit_rows(20, 4, &mut rng);
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let q = train.select_rows(&[7, 11]);
        assert_eq!(knn_predict(&train, &labels, &q, 1).unwrap(), vec![labels[7], labels[11]]);
    }

    #[test]
    fn vote_tie_uses_similarity_then_class() {
        let train = Tensor2D::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let q = Tensor2D::from_rows(&[[0.8, 0.6]]).unwrap();
        assert_eq!(knn_predict(&train, &[1, 0], &q, 2).unwrap(), vec![1]);
        let sym = Tensor2D::from_rows(&[[std::f64::consts::FRAC_1_SQRT_2; 2]]).unwrap();
        assert_eq!(knn_predict(&train, &[1, 0], &sym, 2).unwrap(), vec![0]);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(knn_predict(&Tensor2D::zeros(0, 2), &[], &Tensor2D::zeros(1, 2), 1).is_err());
    }

    #[test]
    fn k_is_clipped() {
        let mut rng = Rng::new(3);
        let train = unit_rows(9, 3, &mut rng);
        let labels: Vec<usize> = (0..9).map(|i| i % 2).collect();
        let q = unit_rows(6, 3, &mut rng);
        assert_eq!(knn_predict(&train, &labels, &q, 9).unwrap(), knn_predict(&train, &labels, &q, 500).unwrap());
    }

    #[test]
    fn identical_splits_score_one() {
        let mut rng = Rng::new(4);
        let x = unit_rows(15, 3, &mut rng);
        let y: Vec<usize> = (0..15).map(|i| i % 3).collect();
        let task = DownstreamTask::new("self", x.clone(), y.clone(), x.clone(), y).unwrap();
        assert_eq!(knn_accuracy(&task, &x, &x, 1, false).unwrap(), 1.0);
    }

    #[test]
    fn unseen_eval_label_is_rejected() {
        let x = Tensor2D::zeros(2, 2);
        assert!(DownstreamTask::new("t", x.clone(), vec![0, 0], x, vec![0, 1]).is_err());
    }

    fn small_net(g: usize, blocks: usize, seed: u64) -> SdrNet {
        let cfg = NetConfig {
            input_dim: 4,
            blocks,
            groups: g,
            shared_width: 2,
            individual_width: 3,
            stem_width: Some(5),
            proj_dims: vec![4],
            pred_dims: vec![4],
            bn_affine: true,
        };
        SdrNet::new(cfg, &mut Rng::new(seed)).unwrap()
    }

    fn toy_task(seed: u64) -> (Tensor2D, DatasetSplit, DownstreamTask) {
        let mut rng = Rng::new(seed);
        let data = Tensor2D::from_vec(40, 4, (0..160).map(|_| rng.normal()).collect()).unwrap();
        let split = split_dataset(&(0..40).map(|i| i % 4).collect::<Vec<_>>(), 4).unwrap();
        let tx = Tensor2D::from_vec(12, 4, (0..48).map(|_| rng.normal()).collect()).unwrap();
        let ex = Tensor2D::from_vec(6, 4, (0..24).map(|_| rng.normal()).collect()).unwrap();
        let task = DownstreamTask::new("toy", tx, (0..12).map(|i| i % 2).collect(), ex, (0..6).map(|i| i % 2).collect()).unwrap();
        (data, split, task)
    }

    #[test]
    fn features_have_unit_rows() {
        let net = small_net(2, 2, 5);
        let (data, split, _) = toy_task(6);
        let mut bn = BnStats::new();
        calibrate_missing(&net, &mut bn, &[Target::Full], &split, &data, 16).unwrap();
        let f = extract_features(&net, &Target::Full, &data, &bn).unwrap();
        assert_eq!(f.rows(), 40);
        for r in f.iter_rows() {
            assert!((crate::numerics::norm2(r) - 1.0).abs() < 1e-12);
        }
        let missing = Target::Path(PathCode::zeros(2));
        assert!(matches!(extract_features(&net, &missing, &data, &bn), Err(Error::CalibrationRequired(_))));
    }

    #[test]
    fn route_is_deterministic_and_round_trips() {
        let net = small_net(2, 2, 7);
        let (data, split, task) = toy_task(8);
        let cfg = RouteConfig {
            k: 5,
            ..RouteConfig::default()
        };
        let a = route(&net, &mut BnStats::new(), &split, &data, &task, &cfg).unwrap();
        let b = route(&net, &mut BnStats::new(), &split, &data, &task, &cfg).unwrap();
        assert_eq!(a.to_string(), b.to_string());
        assert_eq!(a.entries.len(), 4);
        assert_eq!(RouteReport::parse(&a.to_string()).unwrap(), a);
        let top = a.entries.iter().map(|e| e.accuracy).fold(f64::MIN, f64::max);
        assert!(a.best_accuracy >= top);
    }

    #[test]
    fn degenerate_net_routes_to_its_only_path() {
        let net = small_net(1, 1, 9);
        let mut rng = Rng::new(10);
        let data = Tensor2D::from_vec(10, 4, (0..40).map(|_| rng.normal()).collect()).unwrap();
        let split = split_dataset(&[0; 10], 1).unwrap();
        let task = DownstreamTask::new("t", data.clone(), (0..10).map(|i| i % 2).collect(), data.clone(), (0..10).map(|i| i % 2).collect()).unwrap();
        let r = route(&net, &mut BnStats::new(), &split, &data, &task, &RouteConfig::default()).unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.full_accuracy, r.entries[0].accuracy);
        assert_eq!(r.best, Some(0));
    }

    #[test]
    fn export_matches_parent_forward() {
        let net = small_net(2, 3, 11);
        let mut rng = Rng::new(12);
        let data = Tensor2D::from_vec(30, 4, (0..120).map(|_| rng.normal()).collect()).unwrap();
        let p = PathCode::new(vec![1, 0, 1], 2).unwrap();
        let t = Target::Path(p.clone());
        let mut bn = BnStats::new();
        bn.calibrate(&net, &t, &data, 10).unwrap();
        let (sub, stats) = export_subnet(&net, &p, &bn).unwrap();
        assert_eq!(sub.param_count(&Target::Full).unwrap(), net.param_count(&t).unwrap());
        let x = Tensor2D::from_vec(100, 4, (0..400).map(|_| rng.normal()).collect()).unwrap();
        let parent = net.forward(&t, &x, Mode::Eval, Some(&bn)).unwrap();
        let child = sub.forward(&Target::Path(PathCode::zeros(3)), &x, Mode::Eval, Some(&stats)).unwrap();
        assert_eq!(parent.backbone, child.backbone);
        assert_eq!(parent.p, child.p);
        assert!(export_subnet(&net, &PathCode::zeros(3), &bn).is_err());
    }
}
