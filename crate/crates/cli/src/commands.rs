//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use rulcast_core::dataio::{
    attach_hs_labels, attach_rul_labels, fit_norm, label_hs, label_rul, load_cell_csv,
    load_manifest, make_windows, save_cell_csv, CellSeries, Manifest, ManifestEntry, NormStats,
    Schema, SynthSpec, WindowSample,
};
use rulcast_core::harness::{
    detect_fpc_for_cell, mape_excluded_count, metric_mae, metric_mape, metric_mse,
    run_experiment_on_cells, ExperimentConfig, FpcRecord, FpcReport, MetricsReport,
};
use rulcast_core::hs::{train_hs, HsClassifier, HsConfig};
use rulcast_core::stman::{rul_to_cycles, train_rul, StManModel};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(rulcast_core::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<rulcast_core::Error> for CliError {
    fn from(e: rulcast_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(rulcast_core::Error::Training(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "rulcast",
    version,
    about = "Two-stage battery remaining-useful-life pipeline"
)]
pub struct Cli {
    /// RNG seed; overrides the config file's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment config JSON; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic degradation corpus with ground-truth knees.
    SynthGen(SynthGenArgs),
    /// Train the Stage-1 health-state classifier on a whole manifest.
    TrainHs(TrainArgs),
    /// Locate the first prediction cycle of one cell with a trained model.
    DetectFpc(DetectFpcArgs),
    /// Train the Stage-2 RUL network on post-FPC windows of a manifest.
    TrainRul(TrainRulArgs),
    /// Score trained models on a manifest and emit prediction CSVs.
    Evaluate(EvaluateArgs),
    /// Run the full k-fold cross-validated experiment.
    RunCv(RunCvArgs),
    /// Pretty-print the summary of an existing report.json.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct SynthGenArgs {
    /// Number of cells.
    #[arg(long, default_value_t = 20)]
    pub cells: usize,
    #[arg(long, default_value_t = 400)]
    pub eol_min: usize,
    #[arg(long, default_value_t = 800)]
    pub eol_max: usize,
    /// Knee position range as a fraction of EOL.
    #[arg(long, default_value_t = 0.88)]
    pub knee_min: f64,
    #[arg(long, default_value_t = 0.92)]
    pub knee_max: f64,
    /// Noise multiplier (0 disables noise).
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Output directory for the corpus.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Cell schema (mit7, hust5, synth).
    #[arg(long)]
    pub schema: Option<Schema>,
    /// Training epochs; overrides the config file.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct DetectFpcArgs {
    /// Stage-1 checkpoint (hs.ckpt.json).
    #[arg(long)]
    pub model: PathBuf,
    /// Cell CSV to scan.
    #[arg(long)]
    pub cell: PathBuf,
    /// Schema of the cell CSV.
    #[arg(long)]
    pub schema: Schema,
    /// MCT reference lifetime; defaults to the cell's own cycle count.
    #[arg(long)]
    pub mct_reference: Option<f64>,
}

#[derive(Args)]
pub struct TrainRulArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub schema: Option<Schema>,
    /// Trained Stage-1 checkpoint used to place each cell's FPC.
    #[arg(long)]
    pub hs_model: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub schema: Option<Schema>,
    #[arg(long)]
    pub hs_model: PathBuf,
    /// Trained Stage-2 checkpoint.
    #[arg(long)]
    pub rul_model: PathBuf,
}

#[derive(Args)]
pub struct RunCvArgs {
    /// Dataset manifest; overrides the config file.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Path to a report.json produced by run-cv.
    #[arg(long)]
    pub report: PathBuf,
}

pub fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::SynthGen(args) => synth_gen(&cli, args),
        Command::TrainHs(args) => train_hs_cmd(&cli, args),
        Command::DetectFpc(args) => detect_fpc_cmd(&cli, args),
        Command::TrainRul(args) => train_rul_cmd(&cli, args),
        Command::Evaluate(args) => evaluate_cmd(&cli, args),
        Command::RunCv(args) => run_cv_cmd(&cli, args),
        Command::Report(args) => report_cmd(args),
    }
}

fn require_out_dir(cli: &Cli) -> Result<&Path, CliError> {
    cli.out_dir
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out-dir is required for this command".into()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(CliError::from)
}

/// Load the config file if given, apply flag overrides, echo the resolved
/// config next to the outputs.
fn resolve_config(
    cli: &Cli,
    manifest: Option<&Path>,
    schema: Option<Schema>,
    epochs: Option<usize>,
) -> Result<ExperimentConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            let raw = fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str::<ExperimentConfig>(&raw).map_err(|e| {
                CliError::Usage(format!("config {}: {e}", path.display()))
            })?
        }
        None => {
            let manifest = manifest.ok_or_else(|| {
                CliError::Usage("either --config or --manifest is required".into())
            })?;
            let schema = schema.ok_or_else(|| {
                CliError::Usage("--schema is required when no config file is given".into())
            })?;
            ExperimentConfig::new(manifest.to_string_lossy(), schema)
        }
    };
    if let Some(path) = manifest {
        config.manifest = path.to_string_lossy().into_owned();
    }
    if let Some(schema) = schema {
        config.schema = schema;
    }
    if let Some(epochs) = epochs {
        config.epochs = epochs;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_cells(config: &ExperimentConfig) -> Result<Vec<CellSeries>, CliError> {
    let path = Path::new(&config.manifest);
    let manifest = load_manifest(path)?;
    let cells = manifest.load_cells(path)?;
    for cell in &cells {
        if cell.schema() != config.schema {
            return Err(CliError::Core(rulcast_core::Error::InvalidArgument(format!(
                "cell `{}` has schema {}, config expects {}",
                cell.cell_id(),
                cell.schema(),
                config.schema
            ))));
        }
    }
    Ok(cells)
}

fn labeled_hs_windows(
    cells: &[CellSeries],
    norm: &NormStats,
    config: &ExperimentConfig,
) -> Result<Vec<WindowSample>, CliError> {
    let mut out = Vec::new();
    for cell in cells {
        let mut windows = make_windows(&norm.apply_cell(cell)?, config.n_w, config.step)?;
        attach_hs_labels(&mut windows, &label_hs(cell, config.p)?);
        out.extend(windows.into_iter().filter(|w| w.hs_label.is_some()));
    }
    Ok(out)
}

fn train_config_of(config: &ExperimentConfig, seed: u64) -> rulcast_core::train::TrainConfig {
    rulcast_core::train::TrainConfig {
        batch_size: config.batch_size,
        epochs: config.epochs,
        patience: config.patience,
        lr: config.optimizer.lr,
        beta1: config.optimizer.beta1,
        beta2: config.optimizer.beta2,
        seed,
        val_fraction: 0.1,
        label_smoothing: config.label_smoothing,
    }
}

// ── synth-gen ───────────────────────────────────────────────────────────

#[derive(serde::Serialize)]
struct KneeEntry {
    cell_id: String,
    knee_cycle: usize,
    eol: usize,
}

#[derive(serde::Serialize)]
struct KneeFile {
    format: String,
    knees: Vec<KneeEntry>,
}

fn synth_gen(cli: &Cli, args: &SynthGenArgs) -> CliResult {
    if args.eol_min > args.eol_max {
        return Err(CliError::Usage(format!(
            "--eol-min {} exceeds --eol-max {}",
            args.eol_min, args.eol_max
        )));
    }
    if args.knee_min > args.knee_max {
        return Err(CliError::Usage(format!(
            "--knee-min {} exceeds --knee-max {}",
            args.knee_min, args.knee_max
        )));
    }
    let spec = SynthSpec {
        n_cells: args.cells,
        eol_min: args.eol_min,
        eol_max: args.eol_max,
        knee_frac_min: args.knee_min,
        knee_frac_max: args.knee_max,
        noise: args.noise,
        seed: cli.seed.unwrap_or(0),
        ..SynthSpec::default()
    };
    let cells = rulcast_core::dataio::generate_synthetic(&spec)?;

    let out = &args.out;
    let cell_dir = out.join("cells");
    fs::create_dir_all(&cell_dir)?;
    let mut entries = Vec::new();
    let mut knees = Vec::new();
    for sc in &cells {
        let file = format!("{}.csv", sc.series.cell_id());
        save_cell_csv(&cell_dir.join(&file), &sc.series)?;
        entries.push(ManifestEntry {
            cell_id: sc.series.cell_id().to_string(),
            path: format!("cells/{file}"),
            schema: Schema::Synth,
        });
        knees.push(KneeEntry {
            cell_id: sc.series.cell_id().to_string(),
            knee_cycle: sc.knee_cycle,
            eol: sc.series.eol(),
        });
    }
    Manifest::new(entries).save(&out.join("manifest.json"))?;
    write_json(
        &out.join("knees.json"),
        &KneeFile {
            format: "rulcast-knees/v1".to_string(),
            knees,
        },
    )?;
    write_json(&out.join("resolved-config.json"), &spec)?;
    println!(
        "wrote {} cells to {} (manifest.json, knees.json)",
        cells.len(),
        out.display()
    );
    Ok(())
}

// ── train-hs ────────────────────────────────────────────────────────────

fn train_hs_cmd(cli: &Cli, args: &TrainArgs) -> CliResult {
    let out_dir = require_out_dir(cli)?;
    let config = resolve_config(cli, Some(&args.manifest), args.schema, args.epochs)?;
    let cells = load_cells(&config)?;
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("resolved-config.json"), &config)?;

    let refs: Vec<&CellSeries> = cells.iter().collect();
    let norm = fit_norm(&refs)?;
    let windows = labeled_hs_windows(&cells, &norm, &config)?;
    let mut model = HsClassifier::new(
        HsConfig {
            n_f: config.schema.n_features(),
            n_w: config.n_w,
            hidden: config.hs_hidden,
        },
        config.seed,
    );
    let history = train_hs(&mut model, &windows, &train_config_of(&config, config.seed))?;
    model.save(&out_dir.join("hs.ckpt.json"), &norm)?;
    write_json(&out_dir.join("hs_history.json"), &history)?;
    println!(
        "trained HS classifier on {} labeled windows; best val loss {:.6} (epoch {}); checkpoint {}",
        windows.len(),
        history.best_val_loss,
        history.best_epoch,
        out_dir.join("hs.ckpt.json").display()
    );
    Ok(())
}

// ── detect-fpc ──────────────────────────────────────────────────────────

fn detect_fpc_cmd(cli: &Cli, args: &DetectFpcArgs) -> CliResult {
    let out_dir = require_out_dir(cli)?;
    let (model, norm) = HsClassifier::load(&args.model)?;
    let cell = load_cell_csv(&args.cell, args.schema)?;
    if cell.n_features() != model.config().n_f {
        return Err(CliError::Core(rulcast_core::Error::InvalidArgument(format!(
            "checkpoint expects {} features, cell `{}` with schema {} has {}",
            model.config().n_f,
            cell.cell_id(),
            args.schema,
            cell.n_features()
        ))));
    }
    // Config file may override trigger settings.
    let trigger = match &cli.config {
        Some(path) => {
            let raw = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<ExperimentConfig>(&raw)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
                .trigger
        }
        None => Default::default(),
    };
    let decision = match args.mct_reference {
        Some(reference) => {
            let windows = make_windows(&norm.apply_cell(&cell)?, model.config().n_w, 1)?;
            let probs = rulcast_core::hs::cycle_probabilities(&model, &windows)?;
            rulcast_core::hs::decide_fpc(cell.cell_id(), &probs, reference, &trigger)
        }
        None => detect_fpc_for_cell(&model, &norm, &cell, &trigger, model.config().n_w, 1)?,
    };

    fs::create_dir_all(out_dir)?;
    let record = FpcRecord::detailed(&cell, decision.as_ref());
    let triggered = record.triggered;
    write_json(
        &out_dir.join("fpc-report.json"),
        &FpcReport::new(vec![record]),
    )?;
    write_json(&out_dir.join("resolved-config.json"), &trigger)?;
    match decision {
        Some(d) => println!(
            "cell `{}`: FPC at cycle {} ({:.2}% capacity remaining)",
            cell.cell_id(),
            d.fpc_cycle,
            rulcast_core::hs::fpc_capacity_pct(&cell, d.fpc_cycle)
        ),
        None => println!("cell `{}`: trigger never fired (triggered: {triggered})", cell.cell_id()),
    }
    Ok(())
}

// ── train-rul ───────────────────────────────────────────────────────────

fn train_rul_cmd(cli: &Cli, args: &TrainRulArgs) -> CliResult {
    let out_dir = require_out_dir(cli)?;
    let config = resolve_config(cli, Some(&args.manifest), args.schema, args.epochs)?;
    let cells = load_cells(&config)?;
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("resolved-config.json"), &config)?;

    let (hs_model, norm) = HsClassifier::load(&args.hs_model)?;
    let mut windows = Vec::new();
    let mut records = Vec::new();
    for cell in &cells {
        let decision =
            detect_fpc_for_cell(&hs_model, &norm, cell, &config.trigger, config.n_w, config.step)?;
        records.push(FpcRecord::from_decision(cell, decision.as_ref()));
        if let Some(d) = decision {
            let mut cell_windows = make_windows(&norm.apply_cell(cell)?, config.n_w, config.step)?;
            attach_rul_labels(&mut cell_windows, &label_rul(cell, d.fpc_cycle)?);
            windows.extend(cell_windows.into_iter().filter(|w| w.rul_label.is_some()));
        }
    }
    write_json(&out_dir.join("fpc-report.json"), &FpcReport::new(records))?;

    let mut model = StManModel::new(
        config.stman.clone(),
        config.schema.n_features(),
        config.n_w,
        config.seed,
    )?;
    let history = train_rul(&mut model, &windows, &train_config_of(&config, config.seed))?;
    model.save(&out_dir.join("stman.ckpt.json"), &norm)?;
    write_json(&out_dir.join("rul_history.json"), &history)?;
    println!(
        "trained RUL model on {} post-FPC windows; best val loss {:.6} (epoch {}); checkpoint {}",
        windows.len(),
        history.best_val_loss,
        history.best_epoch,
        out_dir.join("stman.ckpt.json").display()
    );
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────────

#[derive(serde::Serialize)]
struct EvaluationSummary {
    format: String,
    mae: f64,
    mse: f64,
    mape_pct: f64,
    n_windows: usize,
    n_mape_excluded: usize,
    untriggered: Vec<String>,
}

fn evaluate_cmd(cli: &Cli, args: &EvaluateArgs) -> CliResult {
    let out_dir = require_out_dir(cli)?;
    let config = resolve_config(cli, Some(&args.manifest), args.schema, None)?;
    let cells = load_cells(&config)?;
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("resolved-config.json"), &config)?;

    let (hs_model, norm) = HsClassifier::load(&args.hs_model)?;
    let (rul_model, _) = StManModel::load(&args.rul_model)?;
    let pred_dir = out_dir.join("predictions");
    fs::create_dir_all(&pred_dir)?;

    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut untriggered = Vec::new();
    let mut records = Vec::new();
    for cell in &cells {
        let decision =
            detect_fpc_for_cell(&hs_model, &norm, cell, &config.trigger, config.n_w, config.step)?;
        records.push(FpcRecord::from_decision(cell, decision.as_ref()));
        let Some(d) = decision else {
            untriggered.push(cell.cell_id().to_string());
            continue;
        };
        let mut windows = make_windows(&norm.apply_cell(cell)?, config.n_w, config.step)?;
        attach_rul_labels(&mut windows, &label_rul(cell, d.fpc_cycle)?);
        let mut csv = String::from("cycle,rul_pct_pred,rul_pct_label,remaining_cycles_pred\n");
        for w in windows.iter().filter(|w| w.rul_label.is_some()) {
            let pred = rul_model.predict(&w.matrix)?;
            let label = w.rul_label.unwrap();
            if w.end_cycle > d.fpc_cycle {
                let remaining = rul_to_cycles(pred.min(1.0 - 1e-12), w.end_cycle, d.fpc_cycle)?;
                csv.push_str(&format!("{},{},{},{}\n", w.end_cycle, pred, label, remaining));
            } else {
                csv.push_str(&format!("{},{},{},\n", w.end_cycle, pred, label));
            }
            preds.push(pred);
            labels.push(label);
        }
        fs::write(pred_dir.join(format!("{}.csv", cell.cell_id())), csv)?;
    }
    if preds.is_empty() {
        return Err(CliError::Core(rulcast_core::Error::Training(
            "no cell triggered; nothing to evaluate".into(),
        )));
    }
    write_json(&out_dir.join("fpc-report.json"), &FpcReport::new(records))?;
    let summary = EvaluationSummary {
        format: "rulcast-evaluation/v1".to_string(),
        mae: metric_mae(&preds, &labels)?,
        mse: metric_mse(&preds, &labels)?,
        mape_pct: metric_mape(&preds, &labels)?,
        n_windows: preds.len(),
        n_mape_excluded: mape_excluded_count(&labels),
        untriggered,
    };
    write_json(&out_dir.join("metrics.json"), &summary)?;
    println!(
        "MAE {:.4} | MSE {:.4} | MAPE {:.2}% over {} windows ({} untriggered cells)",
        summary.mae,
        summary.mse,
        summary.mape_pct,
        summary.n_windows,
        summary.untriggered.len()
    );
    Ok(())
}

// ── run-cv ──────────────────────────────────────────────────────────────

fn run_cv_cmd(cli: &Cli, args: &RunCvArgs) -> CliResult {
    let out_dir = require_out_dir(cli)?;
    if cli.config.is_none() && args.manifest.is_none() {
        return Err(CliError::Usage("run-cv needs --config (and/or --manifest)".into()));
    }
    let config = resolve_config(cli, args.manifest.as_deref(), None, None)?;
    let cells = load_cells(&config)?;
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("resolved-config.json"), &config)?;

    let report = run_experiment_on_cells(&config, &cells, out_dir)?;
    println!("{}", report.summary_row());
    println!(
        "FPC triggered on {}/{} test cells; mean capacity at FPC {}",
        report.fpc_summary.n_triggered,
        report.fpc_summary.n_test_cells,
        report
            .fpc_summary
            .mean_capacity_pct
            .map(|v| format!("{v:.2}%"))
            .unwrap_or_else(|| "n/a".to_string())
    );
    println!("report: {}", out_dir.join("report.json").display());
    Ok(())
}

// ── report ──────────────────────────────────────────────────────────────

fn report_cmd(args: &ReportArgs) -> CliResult {
    let raw = fs::read_to_string(&args.report)?;
    let report: MetricsReport = serde_json::from_str(&raw)?;
    println!("{}", report.summary_row());
    for fold in &report.folds {
        println!(
            "fold {}: MAE {:.4} | MSE {:.4} | MAPE {:.2}% | {} windows | HS acc {:.3} | untriggered {}",
            fold.fold_index,
            fold.metrics.mae,
            fold.metrics.mse,
            fold.metrics.mape_pct,
            fold.metrics.n_windows,
            fold.hs_test_accuracy,
            fold.untriggered_test.len()
        );
    }
    Ok(())
}
