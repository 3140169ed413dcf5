//! `depthhint` command-line entry point.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use depthhint::depth_data::{
    aggregate_loo, build_inst_dataset, load_records, read_manifest, save_records, BinningSpec, ClassPooling,
};
use depthhint::embedding::{random_store, EmbeddingStore};
use depthhint::harness::{dataset_loss, export_lookup, gen_synthetic, pretrain, run_loo, LookupTable, TrainSpec};
use depthhint::hints::{render_features, render_features_from_table, render_scalar, ScalarSource};
use depthhint::l2d::{AdamConfig, L2DConfig, MlpParameters, Mode};
use depthhint::losses::eigen_metrics;
use depthhint::{DepthFrame, DepthRecord, Error, RngSeed};

#[derive(Parser)]
#[command(
    name = "depthhint",
    version,
    about = "Language-derived depth priors: datasets, L2D training, leave-one-out evaluation, hint planes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the per-instance dataset (or, with --loo, the per-class one) from frame files.
    BuildDataset(BuildDatasetArgs),
    /// Train one L2D model and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Leave-one-out training and evaluation over every class.
    LooRun(LooRunArgs),
    /// Eigen metrics between two files of depths.
    Eval(EvalArgs),
    /// Render a hint plane for one frame.
    RenderHints(RenderArgs),
    /// Write a synthetic embedding store and per-class dataset.
    GenSynthetic(SyntheticArgs),
}

#[derive(Args)]
struct BinningArgs {
    #[arg(long, default_value_t = 0.0)]
    min_depth: f64,
    #[arg(long, default_value_t = 10.0)]
    max_depth: f64,
    #[arg(long, default_value_t = 256)]
    bins: usize,
}

impl BinningArgs {
    fn spec(&self) -> Result<BinningSpec, Error> {
        BinningSpec::new(self.min_depth, self.max_depth, self.bins)
    }
}

#[derive(Args)]
struct BuildDatasetArgs {
    /// Text file listing one frame path per line.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pool instances into one record per vocabulary label.
    #[arg(long, requires = "vocab")]
    loo: bool,
    /// Vocabulary file, one label per line.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Class mean as the unweighted mean of instance means.
    #[arg(long, requires = "loo")]
    unweighted: bool,
    #[command(flatten)]
    binning: BinningArgs,
    /// Run report path (default: <out>.report.json).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Logmean,
    Class,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Logmean => Mode::LogMean,
            ModeArg::Class => Mode::Classification,
        }
    }
}

#[derive(Args)]
struct EmbeddingArgs {
    /// DHEMB embedding file.
    #[arg(long, conflicts_with = "random_dim", required_unless_present = "random_dim")]
    embeddings: Option<PathBuf>,
    /// Use random control embeddings of this dimension instead.
    #[arg(long)]
    random_dim: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "logmean")]
    mode: ModeArg,
    /// Seed for random embeddings, initialization and shuffling.
    #[arg(long, env = "DEPTHHINT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

impl TrainArgs {
    fn spec(&self, default_batch: usize) -> TrainSpec {
        TrainSpec {
            epochs: self.epochs,
            batch_size: self.batch_size.unwrap_or(default_batch),
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            ..TrainSpec::inst(RngSeed(self.seed))
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    /// JSON-lines dataset.
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    embeddings: EmbeddingArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Also export a lookup table over every embedding label.
    #[arg(long)]
    lookup: Option<PathBuf>,
    #[command(flatten)]
    binning: BinningArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct LooRunArgs {
    /// JSON-lines per-class dataset.
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    embeddings: EmbeddingArgs,
    #[command(flatten)]
    train: TrainArgs,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
    /// Lookup table output path.
    #[arg(long)]
    lookup: Option<PathBuf>,
    /// Directory for one checkpoint per held-out class.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Parallel class runs; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    binning: BinningArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Whitespace-separated predicted depths.
    #[arg(long)]
    pred_file: PathBuf,
    /// Whitespace-separated ground-truth depths.
    #[arg(long)]
    gt_file: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    frame: PathBuf,
    #[arg(
        long,
        conflicts_with = "lookup",
        required_unless_present = "lookup",
        requires = "embeddings"
    )]
    model: Option<PathBuf>,
    #[arg(long)]
    lookup: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Depth hints from a classification model (expected bin centre).
    #[arg(long, conflicts_with = "features")]
    scalar: bool,
    /// Feature hints from a lookup table's features50 column.
    #[arg(long)]
    features: bool,
    #[command(flatten)]
    binning: BinningArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    signal: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, env = "DEPTHHINT_SEED", default_value_t = 0)]
    seed: u64,
    /// Writes <prefix>.dhemb, <prefix>.jsonl and <prefix>.report.json.
    #[arg(long)]
    out_prefix: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildDataset(a) => build_dataset(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::LooRun(a) => loo_run(a),
        Command::Eval(a) => eval(a),
        Command::RenderHints(a) => render_hints(a),
        Command::GenSynthetic(a) => gen_synthetic_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

type CmdResult = Result<(), Error>;

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{}: no such file", path.display())))
    }
}

fn require_out_dir(path: &Path) -> CmdResult {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Error::Invalid(format!(
            "{}: output directory does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

fn report_path(explicit: Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut name = out.as_os_str().to_owned();
        name.push(".report.json");
        PathBuf::from(name)
    })
}

fn write_report(path: &Path, report: &Value) -> CmdResult {
    let mut text = serde_json::to_string_pretty(report).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn read_lines(path: &Path) -> Result<Vec<String>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn build_dataset(a: BuildDatasetArgs) -> CmdResult {
    require_file(&a.manifest)?;
    if let Some(v) = &a.vocab {
        require_file(v)?;
    }
    require_out_dir(&a.out)?;
    let binning = a.binning.spec()?;
    let frames = read_manifest(&a.manifest)?;
    for f in &frames {
        require_file(f)?;
    }
    let inst = build_inst_dataset(&frames, &binning)?;
    let mut report = json!({
        "command": "build-dataset",
        "manifest": path_str(&a.manifest),
        "frames": frames.len(),
        "binning": binning,
        "instances": inst.records.len(),
        "dropped_instances": inst.dropped,
    });
    let records = if a.loo {
        let vocab = read_lines(a.vocab.as_deref().expect("clap requires vocab"))?;
        let pooling = if a.unweighted {
            ClassPooling::Unweighted
        } else {
            ClassPooling::PixelWeighted
        };
        let agg = aggregate_loo(&inst.records, &vocab, pooling)?;
        report["loo"] = json!({
            "vocabulary": vocab.len(),
            "pooling": pooling,
            "classes": agg.records.len(),
            "missing_labels": agg.missing,
            "ignored_instances": agg.ignored,
        });
        agg.records
    } else {
        inst.records
    };
    save_records(&records, &a.out)?;
    report["records"] = json!(records.len());
    report["out"] = json!(path_str(&a.out));
    write_report(&report_path(a.report, &a.out), &report)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

/// Store plus a description of where it came from.
fn load_embeddings(args: &EmbeddingArgs, records: &[DepthRecord], seed: u64) -> Result<(EmbeddingStore, Value), Error> {
    match (&args.embeddings, args.random_dim) {
        (Some(path), _) => {
            let store = EmbeddingStore::load(path)?;
            let src = json!({"control": false, "embeddings": path_str(path), "dim": store.dim()});
            Ok((store, src))
        }
        (None, Some(dim)) => {
            let mut labels: Vec<&str> = Vec::new();
            let mut seen = std::collections::HashSet::new();
            for r in records {
                if seen.insert(r.label.as_str()) {
                    labels.push(&r.label);
                }
            }
            let store = random_store(&labels, dim, RngSeed(seed))?;
            let src = json!({"control": true, "random_dim": dim, "embedding_seed": seed});
            Ok((store, src))
        }
        (None, None) => Err(Error::Invalid("either --embeddings or --random-dim is required".into())),
    }
}

fn check_mode_data(mode: Mode, records: &[DepthRecord]) -> CmdResult {
    if mode == Mode::Classification {
        if let Some(r) = records.iter().find(|r| r.histogram.is_none()) {
            return Err(Error::Invalid(format!(
                "--mode class needs histograms, record `{}` has none",
                r.label
            )));
        }
    }
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs) -> CmdResult {
    require_file(&a.dataset)?;
    if let Some(e) = &a.embeddings.embeddings {
        require_file(e)?;
    }
    require_out_dir(&a.out)?;
    if let Some(l) = &a.lookup {
        require_out_dir(l)?;
    }
    let binning = a.binning.spec()?;
    let records = load_records(&a.dataset)?;
    let mode: Mode = a.train.mode.into();
    check_mode_data(mode, &records)?;
    let (store, source) = load_embeddings(&a.embeddings, &records, a.train.seed)?;
    let config = L2DConfig::for_mode(mode, store.dim());
    let spec = TrainSpec {
        binning,
        ..a.train.spec(1000)
    };
    let outcome = pretrain(&config, &store, &records, &spec)?;
    let final_loss = dataset_loss(&outcome.params, &store, &records, &spec)?;
    outcome.params.save(&a.out)?;
    if let Some(path) = &a.lookup {
        let vocab: Vec<&str> = store.labels().collect();
        export_lookup(&outcome.params, &store, &vocab, &binning)?.save(path)?;
    }
    let report = json!({
        "command": "pretrain",
        "dataset": path_str(&a.dataset),
        "records": records.len(),
        "source": source,
        "config": config,
        "train": spec,
        "epoch_losses": outcome.epoch_losses,
        "final_loss": final_loss,
        "fallback_count": outcome.fallbacks.values().sum::<usize>(),
        "fallbacks": outcome.fallbacks,
        "out": path_str(&a.out),
        "lookup": a.lookup.as_deref().map(path_str),
    });
    write_report(&report_path(a.report, &a.out), &report)?;
    println!("final loss {final_loss:.6}, checkpoint {}", a.out.display());
    Ok(())
}

fn loo_run(a: LooRunArgs) -> CmdResult {
    require_file(&a.dataset)?;
    if let Some(e) = &a.embeddings.embeddings {
        require_file(e)?;
    }
    require_out_dir(&a.out)?;
    if let Some(l) = &a.lookup {
        require_out_dir(l)?;
    }
    if let Some(dir) = &a.checkpoints {
        if !dir.is_dir() {
            return Err(Error::Invalid(format!(
                "{}: checkpoint directory does not exist",
                dir.display()
            )));
        }
    }
    if a.workers == 0 {
        return Err(Error::Invalid("--workers must be at least 1".into()));
    }
    let records = load_records(&a.dataset)?;
    let mode: Mode = a.train.mode.into();
    check_mode_data(mode, &records)?;
    let (store, source) = load_embeddings(&a.embeddings, &records, a.train.seed)?;
    let config = L2DConfig::for_mode(mode, store.dim());
    let default_batch = TrainSpec::loo(records.len(), RngSeed(0)).batch_size;
    let spec = TrainSpec {
        binning: a.binning.spec()?,
        ..a.train.spec(default_batch)
    };
    let outcome = run_loo(&config, &store, &records, &spec, a.workers)?;

    if let Some(path) = &a.lookup {
        let vocab: Vec<&str> = records.iter().map(|r| r.label.as_str()).collect();
        outcome.lookup_table(&vocab)?.save(path)?;
    }
    if let Some(dir) = &a.checkpoints {
        for (i, model) in outcome.models.iter().enumerate() {
            model.save(dir.join(format!("class_{i:04}.dhl2")))?;
        }
    }
    let metrics = &outcome.report.metrics;
    let report = json!({
        "command": "loo-run",
        "dataset": path_str(&a.dataset),
        "source": source,
        "seed": a.train.seed,
        "workers": a.workers,
        "metrics": metrics.report_json(outcome.report.rows.len()),
        "table": metrics.table().lines().collect::<Vec<_>>(),
        "loo": outcome.report,
        "lookup": a.lookup.as_deref().map(path_str),
    });
    write_report(&a.out, &report)?;
    print!("{}", metrics.table());
    Ok(())
}

fn read_depths(path: &Path) -> Result<Vec<f64>, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Invalid(format!("{}: `{t}` is not a number", path.display())))
        })
        .collect()
}

fn eval(a: EvalArgs) -> CmdResult {
    require_file(&a.pred_file)?;
    require_file(&a.gt_file)?;
    if let Some(r) = &a.report {
        require_out_dir(r)?;
    }
    let pred = read_depths(&a.pred_file)?;
    let gt = read_depths(&a.gt_file)?;
    let metrics = eigen_metrics(&pred, &gt)?;
    let json = metrics.report_json(gt.len());
    println!("{json}");
    print!("{}", metrics.table());
    if let Some(path) = &a.report {
        let report = json!({
            "command": "eval",
            "pred_file": path_str(&a.pred_file),
            "gt_file": path_str(&a.gt_file),
            "metrics": json,
        });
        write_report(path, &report)?;
    }
    Ok(())
}

fn render_hints(a: RenderArgs) -> CmdResult {
    require_file(&a.frame)?;
    for p in [&a.model, &a.lookup, &a.embeddings].into_iter().flatten() {
        require_file(p)?;
    }
    require_out_dir(&a.out)?;
    let binning = a.binning.spec()?;
    let frame = DepthFrame::load(&a.frame)?;
    let (rendered, source) = if let Some(model_path) = &a.model {
        let params = MlpParameters::load(model_path)?;
        let store = EmbeddingStore::load(a.embeddings.as_deref().expect("clap requires embeddings"))?;
        let rendered = match (params.mode(), a.scalar) {
            (Mode::Classification, false) => render_features(&frame, &params, &store)?,
            _ => render_scalar(
                &frame,
                ScalarSource::Model {
                    params: &params,
                    store: &store,
                    binning: &binning,
                },
            )?,
        };
        (rendered, json!({"model": path_str(model_path), "mode": params.mode()}))
    } else {
        let path = a.lookup.as_deref().expect("clap requires model or lookup");
        let table = LookupTable::load(path)?;
        let rendered = if a.features {
            render_features_from_table(&frame, &table)?
        } else {
            render_scalar(&frame, ScalarSource::Table(&table))?
        };
        (rendered, json!({"lookup": path_str(path)}))
    };
    rendered.plane.save(&a.out)?;
    let report = json!({
        "command": "render-hints",
        "frame": path_str(&a.frame),
        "source": source,
        "height": rendered.plane.height(),
        "width": rendered.plane.width(),
        "channels": rendered.plane.channels(),
        "fallback_count": rendered.fallbacks.len(),
        "fallbacks": rendered.fallbacks,
        "out": path_str(&a.out),
    });
    write_report(&report_path(a.report, &a.out), &report)?;
    println!(
        "wrote {}x{}x{} plane to {}",
        rendered.plane.height(),
        rendered.plane.width(),
        rendered.plane.channels(),
        a.out.display()
    );
    Ok(())
}

fn gen_synthetic_cmd(a: SyntheticArgs) -> CmdResult {
    require_out_dir(&a.out_prefix)?;
    let data = gen_synthetic(a.classes, a.dim, a.signal, a.noise, RngSeed(a.seed))?;
    let with_ext = |ext: &str| {
        let mut name = a.out_prefix.as_os_str().to_owned();
        name.push(ext);
        PathBuf::from(name)
    };
    let (emb, dataset, report) = (with_ext(".dhemb"), with_ext(".jsonl"), with_ext(".report.json"));
    data.store.save(&emb)?;
    save_records(&data.records, &dataset)?;
    write_report(
        &report,
        &json!({
            "command": "gen-synthetic",
            "classes": a.classes,
            "dim": a.dim,
            "signal": a.signal,
            "noise": a.noise,
            "seed": a.seed,
            "embeddings": path_str(&emb),
            "dataset": path_str(&dataset),
        }),
    )?;
    write_text(
        &with_ext(".vocab"),
        &(data
            .records
            .iter()
            .map(|r| r.label.as_str())
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"),
    )?;
    println!("wrote {} and {}", emb.display(), dataset.display());
    Ok(())
}
