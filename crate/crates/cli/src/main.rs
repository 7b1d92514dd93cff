//! `sdr`: pipeline driver for clustered weight-sharing pre-training and routing.
//!
//! Every stage reads its inputs from and writes its outputs to the run
//! directory given by `--out`, so stages can be run one at a time:
//!
//! ```text
//! sdr gen-data → pretrain-base → extract-features → cluster → pretrain-sdr → route → export → report
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sdr_core::clustering::{cluster, split_dataset, FeatureTable};
use sdr_core::harness::{
    gain_columns, generate, ingest, parse_metrics, parse_split, render_metrics, render_route_reports, split_to_text,
    write_atomic, write_dataset, Checkpoint, Dataset, Format, PipelineConfig,
};
use sdr_core::numerics::Tensor2D;
use sdr_core::pipeline::{downstream_tasks, stage_rng};
use sdr_core::routing::{export_subnet, extract_features, knn_accuracy, route, DownstreamTask, RouteReport};
use sdr_core::sdrnet::{all_paths, path_decode, BnStats, PathCode, SdrNet, Target};
use sdr_core::train::{train, train_full, MetricRecord};
use sdr_core::Error;

const DATA: &str = "data.csv";
const TASKS: &str = "tasks";
const BASE: &str = "base.ckpt";
const FEATURES: &str = "features.csv";
const SPLIT: &str = "split.tsv";
const SDR: &str = "sdr.ckpt";
const SUBNET: &str = "subnet.ckpt";

#[derive(Parser)]
#[command(name = "sdr", version, about = "Clustered weight-sharing pre-training with per-task routing")]
struct Cli {
    /// `key = value` configuration file; built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draws the synthetic dataset and one downstream task per supercluster.
    GenData,
    /// Trains a single-path net on every sample.
    PretrainBase(InputArgs),
    /// Writes base-net backbone features for every sample.
    ExtractFeatures(InputArgs),
    /// Clusters the features into g^L subsets and writes the split file.
    Cluster(InputArgs),
    /// Progressive training of the weight-sharing net.
    PretrainSdr(InputArgs),
    /// Scores every path on each downstream task.
    Route(RouteArgs),
    /// Writes one path as a standalone single-path checkpoint.
    Export(ExportArgs),
    /// Summarises training logs and route reports of one or more runs.
    Report(ReportArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Input artifact; defaults to the stage's usual file in the run directory.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct RouteArgs {
    /// Task name (`<dir>/<name>.train.csv` and `<name>.eval.csv`); every task in `tasks/` when absent.
    #[arg(long)]
    task: Option<String>,
    /// Directory holding task files.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Comma-separated group choices, e.g. `1,0`.
    #[arg(long, conflicts_with = "task")]
    path: Option<String>,
    /// Exports the best path of this task's route report.
    #[arg(long)]
    task: Option<String>,
    /// Destination checkpoint.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to summarise; the `--out` directory when absent.
    #[arg(long)]
    input: Vec<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.cmd {
        Cmd::GenData => gen_data(&cfg, out),
        Cmd::PretrainBase(a) => pretrain_base(&mut cfg, out, a.input),
        Cmd::ExtractFeatures(a) => extract(&cfg, out, a.input),
        Cmd::Cluster(a) => cluster_cmd(&cfg, out, a.input),
        Cmd::PretrainSdr(a) => pretrain_sdr(&mut cfg, out, a.input),
        Cmd::Route(a) => route_cmd(&cfg, out, a),
        Cmd::Export(a) => export(out, a),
        Cmd::Report(a) => report(out, a),
    }
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            artifact: path.display().to_string(),
            stage,
        }
        .into());
    }
    Ok(())
}

fn load_data(cfg: &mut PipelineConfig, out: &Path, input: Option<PathBuf>) -> Result<Dataset> {
    let path = input.unwrap_or_else(|| out.join(DATA));
    require(&path, "gen-data")?;
    let ds = ingest(&path, Format::from_path(&path)).with_context(|| format!("reading {}", path.display()))?;
    cfg.data.dim = ds.x.cols();
    Ok(ds)
}

fn load_ckpt(path: &Path, stage: &'static str) -> Result<(SdrNet, BnStats)> {
    require(path, stage)?;
    let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ckpt.to_net()?)
}

fn load_split(cfg: &PipelineConfig, out: &Path) -> Result<sdr_core::clustering::DatasetSplit> {
    let path = out.join(SPLIT);
    require(&path, "cluster")?;
    Ok(parse_split(&fs::read_to_string(&path)?, cfg.k).with_context(|| format!("reading {}", path.display()))?)
}

fn write_log(path: &Path, log: &[MetricRecord]) -> Result<()> {
    let text: String = log.iter().map(|r| format!("{r}\n")).collect();
    Ok(write_atomic(path, text.as_bytes())?)
}

fn stage_meta(cfg: &PipelineConfig, stage: &str, steps: usize) -> Vec<(String, String)> {
    let mut meta = vec![("stage".to_string(), stage.to_string()), ("step".to_string(), steps.to_string())];
    for line in cfg.to_text().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            meta.push((format!("config.{k}"), v.to_string()));
        }
    }
    meta
}

fn gen_data(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let synth = generate(&cfg.synthetic_spec())?;
    let ds = Dataset {
        x: synth.x.clone(),
        labels: Some(synth.super_labels.clone()),
    };
    write_dataset(&out.join(DATA), &ds, Format::Csv)?;
    for task in downstream_tasks(cfg, &synth)? {
        let dir = out.join(TASKS);
        let write = |suffix: &str, x: &Tensor2D, y: &[usize]| {
            let ds = Dataset {
                x: x.clone(),
                labels: Some(y.to_vec()),
            };
            write_dataset(&dir.join(format!("{}.{suffix}.csv", task.name)), &ds, Format::Csv)
        };
        write("train", &task.train_x, &task.train_y)?;
        write("eval", &task.eval_x, &task.eval_y)?;
    }
    println!("wrote {} samples of dimension {} to {}", synth.x.rows(), synth.x.cols(), out.display());
    Ok(())
}

fn pretrain_base(cfg: &mut PipelineConfig, out: &Path, input: Option<PathBuf>) -> Result<()> {
    let ds = load_data(cfg, out, input)?;
    let net = SdrNet::new(cfg.base_net_config()?, &mut stage_rng(cfg.seed, "base-init"))?;
    let trained = train_full(net, &cfg.train_config()?, &ds.x, cfg.base_steps, stage_rng(cfg.seed, "base-train"))?;
    let mut bn = BnStats::new();
    bn.calibrate(&trained.net, &Target::Full, &ds.x, cfg.calibration_batch)?;
    Checkpoint::from_net(&trained.net, &bn, &stage_meta(cfg, "pretrain-base", cfg.base_steps)).save(&out.join(BASE))?;
    write_log(&out.join("base.metrics.log"), &trained.log)?;
    println!("trained base net for {} steps", cfg.base_steps);
    Ok(())
}

fn extract(cfg: &PipelineConfig, out: &Path, input: Option<PathBuf>) -> Result<()> {
    let mut cfg = cfg.clone();
    let ds = load_data(&mut cfg, out, input)?;
    let (net, bn) = load_ckpt(&out.join(BASE), "pretrain-base")?;
    let feats = extract_features(&net, &Target::Full, &ds.x, &bn)?;
    write_dataset(&out.join(FEATURES), &Dataset { x: feats, labels: None }, Format::Csv)?;
    println!("wrote features for {} samples", ds.x.rows());
    Ok(())
}

fn cluster_cmd(cfg: &PipelineConfig, out: &Path, input: Option<PathBuf>) -> Result<()> {
    let path = input.unwrap_or_else(|| out.join(FEATURES));
    require(&path, "extract-features")?;
    let feats = ingest(&path, Format::from_path(&path))?;
    let table = FeatureTable::from_raw(&feats.x, None)?;
    let model = cluster(&table, cfg.k, cfg.cluster.epochs, &mut stage_rng(cfg.seed, "cluster"), &cfg.cluster)?;
    let split = split_dataset(&model.labels, cfg.k)?;
    write_atomic(&out.join(SPLIT), split_to_text(&split, table.sample_ids()).as_bytes())?;
    let sizes: Vec<usize> = (0..cfg.k).map(|c| split.subset(c).len()).collect();
    println!("cluster sizes {sizes:?}");
    Ok(())
}

fn pretrain_sdr(cfg: &mut PipelineConfig, out: &Path, input: Option<PathBuf>) -> Result<()> {
    let ds = load_data(cfg, out, input)?;
    let split = load_split(cfg, out)?;
    let net = SdrNet::new(cfg.net_config()?, &mut stage_rng(cfg.seed, "sdr-init"))?;
    let trained = train(net, &cfg.train_config()?, &split, &ds.x, stage_rng(cfg.seed, "sdr-train"))?;
    let mut targets: Vec<Target> = all_paths(cfg.g, cfg.blocks)?.into_iter().map(Target::Path).collect();
    targets.push(Target::Full);
    let mut bn = BnStats::new();
    sdr_core::routing::calibrate_missing(&trained.net, &mut bn, &targets, &split, &ds.x, cfg.calibration_batch)?;
    let steps = trained.log.len();
    Checkpoint::from_net(&trained.net, &bn, &stage_meta(cfg, "pretrain-sdr", steps)).save(&out.join(SDR))?;
    write_log(&out.join("sdr.metrics.log"), &trained.log)?;
    println!("trained weight-sharing net for {steps} steps");
    Ok(())
}

fn load_task(dir: &Path, name: &str) -> Result<DownstreamTask> {
    let read = |suffix: &str| -> Result<(Tensor2D, Vec<usize>)> {
        let path = dir.join(format!("{name}.{suffix}.csv"));
        require(&path, "gen-data")?;
        let ds = ingest(&path, Format::Csv)?;
        let labels = ds.labels.with_context(|| format!("{} has no label column", path.display()))?;
        Ok((ds.x, labels))
    };
    let (tx, ty) = read("train")?;
    let (ex, ey) = read("eval")?;
    Ok(DownstreamTask::new(name, tx, ty, ex, ey)?)
}

fn task_names(dir: &Path) -> Result<Vec<String>> {
    require(dir, "gen-data")?;
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".train.csv")).map(str::to_string))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no `*.train.csv` task files in {}", dir.display());
    }
    Ok(names)
}

fn route_cmd(cfg: &PipelineConfig, out: &Path, args: RouteArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    let ds = load_data(&mut cfg, out, None)?;
    let (net, mut bn) = load_ckpt(&out.join(SDR), "pretrain-sdr")?;
    let split = load_split(&cfg, out)?;
    let base = if out.join(BASE).exists() { Some(load_ckpt(&out.join(BASE), "pretrain-base")?) } else { None };
    let dir = args.input.unwrap_or_else(|| out.join(TASKS));
    let names = match args.task {
        Some(t) => vec![t],
        None => task_names(&dir)?,
    };
    for name in names {
        let task = load_task(&dir, &name)?;
        let mut report = route(&net, &mut bn, &split, &ds.x, &task, &cfg.route_config())?;
        if let Some((bnet, bbn)) = &base {
            let tr = extract_features(bnet, &Target::Full, &task.train_x, bbn)?;
            let ev = extract_features(bnet, &Target::Full, &task.eval_x, bbn)?;
            report.baseline = Some(knn_accuracy(&task, &tr, &ev, cfg.knn_k, cfg.knn_weighted)?);
        }
        write_atomic(&out.join(format!("route.{name}.txt")), report.to_string().as_bytes())?;
        let best = report.best.map_or("full".to_string(), |i| i.to_string());
        println!("{name}: best={best} acc={:.4}", report.best_accuracy);
    }
    Ok(())
}

fn parse_path_arg(text: &str, g: usize, blocks: usize) -> Result<PathCode> {
    let digits = text
        .split(',')
        .map(|d| d.trim().parse::<usize>().with_context(|| format!("`{d}` is not a group index")))
        .collect::<Result<Vec<_>>>()?;
    if digits.len() != blocks {
        bail!("path `{text}` has {} entries but the net has {blocks} blocks", digits.len());
    }
    Ok(PathCode::new(digits, g)?)
}

fn export(out: &Path, args: ExportArgs) -> Result<()> {
    let (net, bn) = load_ckpt(&out.join(SDR), "pretrain-sdr")?;
    let (g, blocks) = (net.config().groups, net.config().blocks);
    let path = match (args.path, args.task) {
        (Some(p), _) => parse_path_arg(&p, g, blocks)?,
        (None, Some(task)) => {
            let file = out.join(format!("route.{task}.txt"));
            require(&file, "route")?;
            let report = RouteReport::parse(&fs::read_to_string(&file)?)?;
            match report.best {
                Some(i) => path_decode(i, g, blocks)?,
                None => bail!("the full net wins on {task}; there is no single path to export"),
            }
        }
        (None, None) => bail!("pass --path or --task"),
    };
    let (sub, sub_bn) = export_subnet(&net, &path, &bn)?;
    let dest = args.output.unwrap_or_else(|| out.join(SUBNET));
    let meta = vec![("stage".to_string(), "export".to_string()), ("path".to_string(), path.digit_string())];
    Checkpoint::from_net(&sub, &sub_bn, &meta).save(&dest)?;
    println!("exported path {} to {}", path.digit_string(), dest.display());
    Ok(())
}

fn report(out: &Path, args: ReportArgs) -> Result<()> {
    let dirs = if args.input.is_empty() { vec![out.to_path_buf()] } else { args.input };
    let mut text = String::new();
    let mut reports = Vec::new();
    for dir in &dirs {
        let mut found = false;
        for log in ["base.metrics.log", "sdr.metrics.log"] {
            let path = dir.join(log);
            if path.exists() {
                let records = parse_metrics(&fs::read_to_string(&path)?).with_context(|| format!("reading {}", path.display()))?;
                text.push_str(&format!("== {}\n{}\n", path.display(), render_metrics(&records)));
                found = true;
            }
        }
        let mut routes: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("route.") && n.ends_with(".txt")))
            .collect();
        routes.sort();
        for path in routes {
            let r = RouteReport::parse(&fs::read_to_string(&path)?).with_context(|| format!("reading {}", path.display()))?;
            reports.push((format!("{}:{}", dir.display(), r.task), r));
            found = true;
        }
        if !found {
            return Err(Error::MissingArtifact {
                artifact: format!("{}/sdr.metrics.log or route.*.txt", dir.display()),
                stage: "pretrain-sdr",
            }
            .into());
        }
    }
    text.push_str(&render_route_reports(&reports));
    write_atomic(&out.join("report.txt"), text.as_bytes())?;
    write_atomic(&out.join("report.dat"), gain_columns(&reports).as_bytes())?;
    print!("{text}");
    Ok(())
}
