use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tgforecast::datagen::{gen_dataset, load_scenes, parse_counts, GenDataConfig, Manifest, Split};
use tgforecast::harness::ablate::{ablate, runs_csv, summarize, variant, TABLE_ROWS};
use tgforecast::harness::eval::{
    evaluate_prepared, evaluate_records, load_model, read_predictions, write_predictions, write_report, Frame,
    PredictionRecord,
};
use tgforecast::harness::gradcheck::{run_grad_check, GradCheckSettings};
use tgforecast::harness::plot::plot;
use tgforecast::harness::{train, TrainConfig, TrainOptions};
use tgforecast::metrics::MetricsReport;
use tgforecast::scene::{load_scene, LaneFilter, RawScene};
use tgforecast::{Error, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "tgforecast", version, about = "Temporal-graph motion forecasting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Compute metrics from a checkpoint or a predictions file.
    Eval(EvalArgs),
    /// Write prediction records.
    Predict(PredictArgs),
    /// Render a scene and its forecast as SVG.
    Plot(PlotArgs),
    /// Compare analytic and finite-difference gradients on micro-scenes.
    GradCheck(GradCheckArgs),
    /// Train the component-ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scenes per preset, e.g. `straight=10,yield=20`.
    #[arg(long)]
    counts: Option<String>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LaneFilterArg {
    AnyAgent,
    AoiOnly,
}

/// Flags shared by `train` and `ablate`; each overrides its config key.
#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tg: Option<bool>,
    #[arg(long)]
    seq_mem: Option<bool>,
    #[arg(long)]
    scene_mem: Option<bool>,
    #[arg(long)]
    goal_pred: Option<bool>,
    #[arg(long)]
    goal_loss: Option<bool>,
    #[arg(long, value_enum)]
    lane_filter: Option<LaneFilterArg>,
    #[arg(long)]
    validate_every: Option<usize>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(short, long)]
    quiet: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::All => None,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate stored prediction records instead of a checkpoint.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Dataset directory or a single scene file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long)]
    k: Option<usize>,
    /// Training config whose model section must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FrameArg {
    Normalized,
    Raw,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "raw")]
    frame: FrameArg,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Scene record file.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Check at most this many coordinates per block.
    #[arg(long)]
    per_block: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    jitter: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Comma-separated variant names; all rows by default.
    #[arg(long)]
    variants: Option<String>,
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
}

fn train_config(flags: &TrainFlags, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($flag:expr => $($field:tt)+) => {
            if let Some(v) = $flag.clone() {
                cfg.$($field)+ = v;
            }
        };
    }
    set!(flags.batch_size => batch_size);
    set!(flags.epochs => epochs);
    set!(flags.lr => lr);
    set!(flags.augment => augment);
    set!(flags.validate_every => validate_every);
    set!(flags.feature_dim => model.feature_dim);
    set!(flags.k => model.k);
    set!(flags.tg => model.toggles.tg);
    set!(flags.seq_mem => model.toggles.seq_mem);
    set!(flags.scene_mem => model.toggles.scene_mem);
    set!(flags.goal_pred => model.toggles.goal_pred);
    set!(flags.goal_loss => model.toggles.goal_loss);
    if flags.max_steps.is_some() {
        cfg.max_steps = flags.max_steps;
    }
    if seed.is_some() {
        cfg.seed = seed;
    }
    if flags.data.is_some() {
        cfg.data_dir = flags.data.clone();
    }
    if flags.out.is_some() {
        cfg.out_dir = flags.out.clone();
    }
    if flags.init_checkpoint.is_some() {
        cfg.init_checkpoint = flags.init_checkpoint.clone();
    }
    if let Some(f) = flags.lane_filter {
        cfg.model.lane_filter = match f {
            LaneFilterArg::AnyAgent => LaneFilter::AnyAgent,
            LaneFilterArg::AoiOnly => LaneFilter::AoiOnly,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::InvalidArgument(format!("`{key}` must be given in the config or as a flag")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn train_and_val(data: &Path) -> Result<(Vec<RawScene>, Vec<RawScene>)> {
    Ok((load_scenes(data, Some(Split::Train))?, load_scenes(data, Some(Split::Val))?))
}

fn print_report(r: &MetricsReport) {
    println!(
        "scenes {} K {} minADE {:.4} minFDE {:.4} MR {:.4} b-minFDE {:.4}",
        r.scenes.len(),
        r.k,
        r.min_ade,
        r.min_fde,
        r.miss_rate,
        r.b_min_fde
    );
}

fn expected_model(config: &Option<PathBuf>) -> Result<Option<ModelConfig>> {
    config.as_ref().map(|p| TrainConfig::load(p).map(|c| c.model)).transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let mut cfg = match &a.config {
                Some(p) => GenDataConfig::load(p)?,
                None => GenDataConfig::default(),
            };
            if a.seed.is_some() {
                cfg.seed = a.seed;
            }
            if a.out.is_some() {
                cfg.out_dir = a.out.clone();
            }
            if let Some(c) = &a.counts {
                cfg.counts = parse_counts(c)?;
            }
            if let Some(v) = a.val_fraction {
                cfg.val_fraction = v;
            }
            let seed = cfg
                .seed
                .ok_or_else(|| Error::InvalidArgument("a seed is required (--seed or `seed` in the config)".into()))?;
            let out = required(&cfg.out_dir, "out_dir")?;
            let m = gen_dataset(&cfg.spec(), seed, &out)?;
            println!(
                "wrote {} scenes ({} train, {} val) to {}",
                m.scenes.len(),
                m.ids(Some(Split::Train)).len(),
                m.ids(Some(Split::Val)).len(),
                out.display()
            );
        }
        Command::Train(a) => {
            let cfg = train_config(&a.flags, a.seed)?;
            cfg.require_seed()?;
            let data = required(&cfg.data_dir, "data_dir")?;
            let out = required(&cfg.out_dir, "out_dir")?;
            create_dir(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| Error::Io {
                path: out.join("config.toml"),
                source: e,
            })?;
            let (tr, va) = train_and_val(&data)?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                verbose: !a.flags.quiet,
            };
            let outcome = train(&cfg, &tr, &va, &opts)?;
            let r = &outcome.record;
            println!(
                "trained {} steps over {} epochs; run record at {}",
                r.steps.len(),
                r.epochs.len(),
                out.join(tgforecast::harness::RunRecord::FILE).display()
            );
        }
        Command::Eval(a) => {
            let split = a.split.split();
            let scenes = load_scenes(&a.data, split)?;
            let report = match (&a.checkpoint, &a.predictions) {
                (Some(ckpt), None) => {
                    let (model, store) = load_model(ckpt, expected_model(&a.config)?.as_ref())?;
                    let prepared = scenes.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>()?;
                    evaluate_prepared(&model, &store, &prepared, a.k.unwrap_or(model.cfg.k))?
                }
                (None, Some(pred)) => {
                    let records = read_predictions(pred)?;
                    let k = a.k.unwrap_or_else(|| records.first().map_or(6, |r| r.k));
                    evaluate_records(&records, &scenes, k)?
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "give exactly one of --checkpoint and --predictions".into(),
                    ))
                }
            };
            print_report(&report);
            if let Some(out) = &a.out {
                write_report(&report, out)?;
            }
        }
        Command::Predict(a) => {
            let (model, store) = load_model(&a.checkpoint, expected_model(&a.config)?.as_ref())?;
            let scenes = load_scenes(&a.data, a.split.split())?;
            let frame = match a.frame {
                FrameArg::Normalized => Frame::Normalized,
                FrameArg::Raw => Frame::Raw,
            };
            let mut records = Vec::with_capacity(scenes.len());
            for s in &scenes {
                let out = model.forecast(&store, &model.prepare(s)?)?;
                records.push(PredictionRecord::from_forecast(&out, frame));
            }
            write_predictions(&records, &a.out)?;
            println!("wrote {} prediction records to {}", records.len(), a.out.display());
        }
        Command::Plot(a) => {
            let scene = load_scene(&a.scene)?;
            let records = read_predictions(&a.predictions)?;
            let rec = records
                .iter()
                .find(|r| r.scene_id == scene.scene_id)
                .ok_or_else(|| Error::InvalidArgument(format!("no prediction for scene `{}`", scene.scene_id)))?;
            plot(&scene, rec, &a.out)?;
            println!("wrote {}", a.out.display());
        }
        Command::GradCheck(a) => {
            let settings = GradCheckSettings {
                model: ModelConfig {
                    feature_dim: a.feature_dim,
                    ..ModelConfig::default()
                },
                scenes: a.scenes,
                eps: a.eps,
                per_block: a.per_block,
                seed: a.seed,
                jitter: a.jitter,
            };
            let results = run_grad_check(&settings)?;
            let mut worst = 0.0f64;
            for r in &results {
                println!(
                    "{} coords {} max_rel_error {:.3e} worst {}",
                    r.scene_id,
                    r.coordinates,
                    r.max_rel_error,
                    r.worst_block.as_deref().unwrap_or("-")
                );
                worst = worst.max(r.max_rel_error);
            }
            println!("max relative error {worst:.3e} (tolerance {:.1e})", a.tolerance);
            if !(worst <= a.tolerance) {
                return Err(Error::NonFinite(format!(
                    "gradient mismatch {worst:.3e} exceeds {:.1e}",
                    a.tolerance
                )));
            }
        }
        Command::Ablate(a) => {
            let cfg = train_config(&a.flags, None)?;
            let data = required(&cfg.data_dir, "data_dir")?;
            let out = required(&cfg.out_dir, "out_dir")?;
            create_dir(&out)?;
            let variants: Vec<(&str, _)> = match &a.variants {
                Some(v) => v
                    .split(',')
                    .map(|n| variant(n.trim()).map(|t| (TABLE_ROWS.iter().find(|r| r.0 == n.trim()).unwrap().0, t)))
                    .collect::<Result<_>>()?,
                None => TABLE_ROWS.to_vec(),
            };
            let seeds: Vec<u64> = a
                .seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad seed `{s}`")))
                })
                .collect::<Result<_>>()?;
            Manifest::load(&data)?;
            let (tr, va) = train_and_val(&data)?;
            let runs = ablate(&cfg, &variants, &seeds, &tr, &va, Some(&out), !a.flags.quiet)?;
            let csv_path = out.join("ablation_runs.csv");
            fs::write(&csv_path, runs_csv(&runs)).map_err(|e| Error::Io {
                path: csv_path.clone(),
                source: e,
            })?;
            println!("variant,median_min_ade,median_min_fde,median_miss_rate,median_b_min_fde");
            for s in summarize(&runs) {
                println!(
                    "{},{:.4},{:.4},{:.4},{:.4}",
                    s.variant, s.median.min_ade, s.median.min_fde, s.median.miss_rate, s.median.b_min_fde
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
