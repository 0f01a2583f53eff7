use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use concept_forgetting::feature_store::{align_pair, load_from_layout, FeatureKey, Split};
use concept_forgetting::pipeline::analysis::FeatureSource;
use concept_forgetting::pipeline::config::RunConfig;
use concept_forgetting::pipeline::{
    emit_plot_tables, emit_sweep_tables, run_analysis, run_sweep, write_analysis_outputs,
    write_sweep_outputs, AnalysisReport, SweepReport, TaskPair, TranslatorMethod, SWEEP_REPORT_FILE,
};
use concept_forgetting::pipeline::report::write_atomically;
use concept_forgetting::sae::train_sae;
use concept_forgetting::synth::{generate_task, write_synth, DriftKind, DriftSpec, SynthSpec};
use concept_forgetting::translator::{fit_linear, fit_linear_closed_form};
use concept_forgetting::{Error, Result};

#[derive(Parser)]
#[command(name = "concept-forgetting", version, about = "Concept-level forgetting analysis")]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "CONCEPT_FORGETTING_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature layout with a planted drift.
    Synth(SynthArgs),
    /// Train the anchor SAE of one task.
    TrainSae(TrainSaeArgs),
    /// Fit the linear translator of one (task, checkpoint) pair.
    Translate(TranslateArgs),
    /// Run the full analysis and write the report and plot tables.
    Analyze(RunArgs),
    /// Run the (K, batch, tau) grid with repeated runs.
    Sweep(SweepArgs),
    /// Rebuild plot tables from an existing report.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DriftArg {
    Identity,
    Rotation,
    RotationScaling,
    Affine,
    Erasure,
    Nonlinear,
}

impl From<DriftArg> for DriftKind {
    fn from(d: DriftArg) -> Self {
        match d {
            DriftArg::Identity => DriftKind::Identity,
            DriftArg::Rotation => DriftKind::Rotation,
            DriftArg::RotationScaling => DriftKind::RotationScaling,
            DriftArg::Affine => DriftKind::Affine,
            DriftArg::Erasure => DriftKind::Erasure,
            DriftArg::Nonlinear => DriftKind::Nonlinear,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synth spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    drift: Option<DriftArg>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n_atoms: Option<usize>,
    #[arg(long)]
    k_true: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    n_classes: Option<usize>,
    /// Erased atom indices, comma separated.
    #[arg(long, value_delimiter = ',')]
    erase: Option<Vec<usize>>,
    #[arg(long)]
    rotate_after_erasure: bool,
    #[arg(long)]
    scale_range: Option<String>,
    #[arg(long)]
    bias_norm: Option<f64>,
    #[arg(long)]
    n_checkpoints: Option<usize>,
    #[arg(long, default_value_t = 1)]
    tasks: u32,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    features_root: Option<PathBuf>,
    /// Task pairs as `t:s`, repeatable.
    #[arg(long = "pair", value_parser = parse_pair)]
    pairs: Vec<TaskPair>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    expansion: Option<f64>,
    #[arg(long)]
    sae_epochs: Option<usize>,
    #[arg(long)]
    sae_batch_size: Option<usize>,
    #[arg(long)]
    sae_lr: Option<f64>,
    #[arg(long)]
    dead_loss_weight: Option<f64>,
    #[arg(long)]
    dead_window_steps: Option<usize>,
    #[arg(long, value_enum)]
    translator: Option<MethodArg>,
    #[arg(long)]
    translator_epochs: Option<usize>,
    #[arg(long)]
    ridge_lambda: Option<f64>,
    #[arg(long)]
    nonlinear_baseline: bool,
    #[arg(long)]
    probe_all_deleted: bool,
    #[arg(long)]
    min_sae_r2: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Gradient,
    ClosedForm,
}

#[derive(Args)]
struct TrainSaeArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 0)]
    task: u32,
}

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 0)]
    task: u32,
    #[arg(long, default_value_t = 1)]
    checkpoint: u32,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    batch_sizes: Option<Vec<usize>>,
    #[arg(long)]
    n_runs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// An analysis or sweep report.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_pair(s: &str) -> std::result::Result<TaskPair, String> {
    let (t, c) = s
        .split_once(':')
        .ok_or_else(|| format!("expected `task:checkpoint`, got `{s}`"))?;
    Ok(TaskPair {
        task: t.trim().parse().map_err(|e| format!("bad task in `{s}`: {e}"))?,
        checkpoint: c.trim().parse().map_err(|e| format!("bad checkpoint in `{s}`: {e}"))?,
    })
}

fn parse_range(s: &str) -> Result<[f64; 2]> {
    let bad = || Error::InvalidConfig(format!("scale range `{s}` must be `lo,hi`"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    Ok([
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
    ])
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.features_root {
            c.features_root = v.clone();
        }
        if !self.pairs.is_empty() {
            c.pairs = self.pairs.clone();
        }
        macro_rules! set {
            ($($field:ident => $($target:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { c.$($target).+ = v; })*
            };
        }
        set! {
            tau => tau,
            seed => seed,
            k => sae.k,
            expansion => sae.expansion,
            sae_epochs => sae.epochs,
            sae_batch_size => sae.batch_size,
            sae_lr => sae.lr,
            dead_loss_weight => sae.dead_loss_weight,
            dead_window_steps => sae.dead_window_steps,
            translator_epochs => translator.epochs,
            ridge_lambda => translator.ridge_lambda,
            min_sae_r2 => min_sae_r2,
            output_dir => output_dir,
        }
        if let Some(m) = self.translator {
            c.translator.method = match m {
                MethodArg::Gradient => TranslatorMethod::Gradient,
                MethodArg::ClosedForm => TranslatorMethod::ClosedForm,
            };
        }
        c.translator.nonlinear_baseline |= self.nonlinear_baseline;
        c.probe_all_deleted |= self.probe_all_deleted;
        c.validate()?;
        Ok(c)
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Schema {
                path: p.clone(),
                message: e.to_string(),
            })?
        }
        None => SynthSpec::reference(DriftSpec::new(DriftKind::Rotation), 0),
    };
    if let Some(k) = args.drift {
        spec.drift.kind = k.into();
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { spec.$field = v; })* };
    }
    set!(d, n_atoms, k_true, n_train, n_test, noise_sigma, n_classes, n_checkpoints, seed);
    if let Some(e) = &args.erase {
        spec.drift.erased_atoms = e.clone();
    }
    spec.drift.rotate_after_erasure |= args.rotate_after_erasure;
    if let Some(r) = &args.scale_range {
        spec.drift.scale_range = parse_range(r)?;
    }
    if let Some(b) = args.bias_norm {
        spec.drift.bias_norm = b;
    }
    for task in 0..args.tasks {
        let data = generate_task(&spec, task)?;
        let truth = write_synth(&data, &args.out)?;
        log::info!("task {task}: ground truth at {}", truth.display());
    }
    println!("{}", args.out.display());
    Ok(())
}

fn feature_key(task: u32, checkpoint: u32, split: Split) -> FeatureKey {
    FeatureKey {
        task_id: task,
        checkpoint_id: checkpoint,
        split,
    }
}

fn train_sae_cmd(args: &TrainSaeArgs) -> Result<()> {
    let c = args.run.resolve()?;
    let train = load_from_layout(&c.features_root, feature_key(args.task, 0, Split::Train))?;
    let model = train_sae(&train, &c.sae.to_config(train.dim(), c.seed))?;
    let dir = c.output_dir.join(format!("task{}", args.task));
    let path = model.save(&dir)?;
    let d = model.diagnostics;
    println!(
        "{} r2={} dead_rate={} final_loss={}",
        path.display(),
        d.r2,
        d.dead_rate,
        d.final_loss
    );
    Ok(())
}

fn translate_cmd(args: &TranslateArgs) -> Result<()> {
    let c = args.run.resolve()?;
    let root = &c.features_root;
    let later = load_from_layout(root, feature_key(args.task, args.checkpoint, Split::Train))?;
    let anchor = load_from_layout(root, feature_key(args.task, 0, Split::Train))?;
    let view = align_pair(&later, &anchor)?;
    let model = match c.translator.method {
        TranslatorMethod::Gradient => fit_linear(&view, &c.translator.to_config(c.seed))?,
        TranslatorMethod::ClosedForm => fit_linear_closed_form(&view, c.translator.ridge_lambda)?,
    };
    let dir = c
        .output_dir
        .join(format!("task{}", args.task))
        .join(format!("ckpt{}", args.checkpoint));
    let path = model.save(&dir)?;
    match model.val_mse {
        Some(v) => println!("{} train_mse={} val_mse={v}", path.display(), model.train_mse),
        None => println!("{} train_mse={}", path.display(), model.train_mse),
    }
    Ok(())
}

fn analyze(args: &RunArgs) -> Result<()> {
    let c = args.resolve()?;
    let report = run_analysis(&c, &FeatureSource::Layout(c.features_root.clone()))?;
    let written = write_analysis_outputs(&report, &c.output_dir)?;
    if let Some(p) = written.last() {
        println!("{}", p.display());
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let mut c = args.run.resolve()?;
    if let Some(v) = &args.taus {
        c.sweep.taus = v.clone();
    }
    if let Some(v) = &args.ks {
        c.sweep.ks = v.clone();
    }
    if let Some(v) = &args.batch_sizes {
        c.sweep.batch_sizes = v.clone();
    }
    if let Some(v) = args.n_runs {
        c.sweep.n_runs = v;
    }
    let report = run_sweep(&c, &FeatureSource::Layout(c.features_root.clone()))?;
    let written = write_sweep_outputs(&report, &c.output_dir)?;
    if let Some(p) = written.last() {
        println!("{}", p.display());
    }
    Ok(())
}

fn is_sweep_report(path: &Path) -> bool {
    path.file_name().is_some_and(|n| n == SWEEP_REPORT_FILE)
}

fn report(args: &ReportArgs) -> Result<()> {
    let tables = if is_sweep_report(&args.input) {
        emit_sweep_tables(&SweepReport::load(&args.input)?)?
    } else {
        emit_plot_tables(&AnalysisReport::load(&args.input)?)?
    };
    for p in write_atomically(&args.out, &tables)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainSae(a) => train_sae_cmd(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Analyze(a) => analyze(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
