//! Cross-validated experiment runner: Stage 1 -> FPC -> Stage 2 per fold,
//! pooled test metrics per fold, and mean ± std aggregation across folds.

mod metrics;

pub use metrics::{
    aggregate, mape_excluded_count, metric_mae, metric_mape, metric_mse, MeanStd,
    MAPE_EXCLUSION_THRESHOLD,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{
    attach_hs_labels, attach_rul_labels, fit_norm, kfold_split, label_hs, label_rul, load_manifest,
    make_windows, CellSeries, FoldSplit, NormStats, Schema, WindowSample,
};
use crate::error::{Error, Result};
use crate::hs::{
    cycle_probabilities, decide_fpc, fpc_capacity_pct, train_hs, FpcResult, HsClassifier, HsConfig,
    TriggerConfig,
};
use crate::stman::{rul_to_cycles, train_rul, StManConfig, StManModel};
use crate::train::{TrainConfig, TrainHistory};

fn default_n_w() -> usize {
    50
}
fn default_step() -> usize {
    1
}
fn default_p() -> f64 {
    0.10
}
fn default_hs_hidden() -> usize {
    32
}
fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    20
}
fn default_k_folds() -> usize {
    5
}

/// Adam settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
        }
    }
}

/// Full experiment description; serialized next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Path to the dataset manifest JSON.
    pub manifest: String,
    pub schema: Schema,
    #[serde(default = "default_n_w")]
    pub n_w: usize,
    #[serde(default = "default_step")]
    pub step: usize,
    /// Head/tail labeling fraction for Stage 1.
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub trigger: TriggerConfig,
    #[serde(default)]
    pub stman: StManConfig,
    #[serde(default = "default_hs_hidden")]
    pub hs_hidden: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    /// Stage-1 label smoothing (0 = hard targets).
    #[serde(default)]
    pub label_smoothing: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(manifest: impl Into<String>, schema: Schema) -> Self {
        ExperimentConfig {
            manifest: manifest.into(),
            schema,
            n_w: default_n_w(),
            step: default_step(),
            p: default_p(),
            trigger: TriggerConfig::default(),
            stman: StManConfig::default(),
            hs_hidden: default_hs_hidden(),
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            patience: default_patience(),
            k_folds: default_k_folds(),
            label_smoothing: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "config.p must lie in (0, 0.5), got {}",
                self.p
            )));
        }
        self.trigger.validate()?;
        self.stman.validate()?;
        if self.n_w == 0 || self.step == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(
                "n_w, step, batch_size, and epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            lr: self.optimizer.lr,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            seed,
            val_fraction: 0.1,
            label_smoothing: self.label_smoothing,
        }
    }
}

/// One cell's FPC decision as reported (`fpc-report.json` rows). The
/// trigger trace fields are filled by `detect-fpc`-style detailed reports
/// and omitted from fold summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpcRecord {
    pub cell_id: String,
    pub triggered: bool,
    pub fpc_cycle: Option<usize>,
    pub fpc_capacity_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_cycle_window: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<crate::hs::CycleProb>>,
}

impl FpcRecord {
    pub fn from_decision(cell: &CellSeries, decision: Option<&FpcResult>) -> FpcRecord {
        match decision {
            Some(r) => FpcRecord {
                cell_id: cell.cell_id().to_string(),
                triggered: true,
                fpc_cycle: Some(r.fpc_cycle),
                fpc_capacity_pct: Some(fpc_capacity_pct(cell, r.fpc_cycle)),
                trigger_cycle_window: None,
                probabilities: None,
            },
            None => FpcRecord {
                cell_id: cell.cell_id().to_string(),
                triggered: false,
                fpc_cycle: None,
                fpc_capacity_pct: None,
                trigger_cycle_window: None,
                probabilities: None,
            },
        }
    }

    /// Detailed record including the trigger trace.
    pub fn detailed(cell: &CellSeries, decision: Option<&FpcResult>) -> FpcRecord {
        let mut record = FpcRecord::from_decision(cell, decision);
        if let Some(r) = decision {
            record.trigger_cycle_window = Some(r.trigger_cycle_window.clone());
            record.probabilities = Some(r.probabilities.clone());
        }
        record
    }
}

pub const FPC_REPORT_FORMAT: &str = "rulcast-fpc-report/v1";

/// `fpc-report.json` payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpcReport {
    pub format: String,
    pub cells: Vec<FpcRecord>,
}

impl FpcReport {
    pub fn new(cells: Vec<FpcRecord>) -> Self {
        FpcReport {
            format: FPC_REPORT_FORMAT.to_string(),
            cells,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub mae: f64,
    pub mse: f64,
    pub mape_pct: f64,
    pub n_windows: usize,
    pub n_mape_excluded: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub hs_history: TrainHistory,
    pub rul_history: TrainHistory,
    /// Accuracy on the labeled head/tail windows of the test cells.
    pub hs_test_accuracy: f64,
    pub hs_test_labeled_windows: usize,
    pub fpc_test: Vec<FpcRecord>,
    pub fpc_train: Vec<FpcRecord>,
    pub untriggered_test: Vec<String>,
    pub untriggered_train: Vec<String>,
    pub metrics: FoldMetrics,
    /// True once every stage passed the cell-disjointness assertions.
    pub leakage_checked: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mae: MeanStd,
    pub mse: MeanStd,
    pub mape_pct: MeanStd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpcSummary {
    pub n_test_cells: usize,
    pub n_triggered: usize,
    /// Mean percentage of initial discharge capacity at the FPC over all
    /// triggered test cells.
    pub mean_capacity_pct: Option<f64>,
}

pub const REPORT_FORMAT: &str = "rulcast-report/v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub config: ExperimentConfig,
    pub folds: Vec<FoldReport>,
    pub aggregate: AggregateMetrics,
    pub fpc_summary: FpcSummary,
    pub stman_parameter_count: usize,
    pub stman_flops: u64,
    pub hs_parameter_count: usize,
    pub mape_exclusion_threshold: f64,
    /// Wall-clock time; kept out of the serialized report so reruns with
    /// the same seed are byte-identical.
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl MetricsReport {
    /// One-line summary in the "m ± s" table style.
    pub fn summary_row(&self) -> String {
        format!(
            "MAE {:.4} ± {:.4} | MSE {:.4} ± {:.4} | MAPE {:.2}% ± {:.2}% | params {} | FLOPs {}",
            self.aggregate.mae.mean,
            self.aggregate.mae.std,
            self.aggregate.mse.mean,
            self.aggregate.mse.std,
            self.aggregate.mape_pct.mean,
            self.aggregate.mape_pct.std,
            self.stman_parameter_count,
            self.stman_flops,
        )
    }
}

fn assert_disjoint(stage: &str, train: &BTreeSet<&str>, test: &BTreeSet<&str>) -> Result<()> {
    let overlap: Vec<&&str> = train.intersection(test).collect();
    if !overlap.is_empty() {
        return Err(Error::Training(format!(
            "leakage at {stage}: cells {overlap:?} appear in both train and test"
        )));
    }
    Ok(())
}

fn assert_subset(stage: &str, windows: &[WindowSample], allowed: &BTreeSet<&str>) -> Result<()> {
    for w in windows {
        if !allowed.contains(w.cell_id.as_str()) {
            return Err(Error::Training(format!(
                "leakage at {stage}: window from cell `{}` is outside the allowed set",
                w.cell_id
            )));
        }
    }
    Ok(())
}

/// Normalized windows of one cell.
fn normalized_windows(
    cell: &CellSeries,
    norm: &NormStats,
    n_w: usize,
    step: usize,
) -> Result<Vec<WindowSample>> {
    make_windows(&norm.apply_cell(cell)?, n_w, step)
}

/// Run Stage 1 inference over a whole (raw) cell and decide its FPC using
/// the cell's own observed cycle count as the MCT reference.
pub fn detect_fpc_for_cell(
    model: &HsClassifier,
    norm: &NormStats,
    cell: &CellSeries,
    trigger: &TriggerConfig,
    n_w: usize,
    step: usize,
) -> Result<Option<FpcResult>> {
    let windows = normalized_windows(cell, norm, n_w, step)?;
    let probs = cycle_probabilities(model, &windows)?;
    Ok(decide_fpc(cell.cell_id(), &probs, cell.eol() as f64, trigger))
}

struct PredictionRow {
    cycle: usize,
    pred: f64,
    label: f64,
    remaining_pred: Option<f64>,
}

fn write_prediction_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut out = String::from("cycle,rul_pct_pred,rul_pct_label,remaining_cycles_pred\n");
    for r in rows {
        match r.remaining_pred {
            Some(rem) => {
                out.push_str(&format!("{},{},{},{}\n", r.cycle, r.pred, r.label, rem))
            }
            None => out.push_str(&format!("{},{},{},\n", r.cycle, r.pred, r.label)),
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Train and evaluate one fold; all artifacts land under `out_dir`.
pub fn run_fold(
    config: &ExperimentConfig,
    cells: &[CellSeries],
    fold: &FoldSplit,
    out_dir: &Path,
) -> Result<FoldReport> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut log = fs::File::create(out_dir.join("training_log.txt"))?;

    let by_id: BTreeMap<&str, &CellSeries> =
        cells.iter().map(|c| (c.cell_id(), c)).collect();
    let lookup = |ids: &[String]| -> Result<Vec<&CellSeries>> {
        ids.iter()
            .map(|id| {
                by_id.get(id.as_str()).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("fold references unknown cell `{id}`"))
                })
            })
            .collect()
    };
    let train_cells = lookup(&fold.train_ids)?;
    let test_cells = lookup(&fold.test_ids)?;
    let train_set: BTreeSet<&str> = train_cells.iter().map(|c| c.cell_id()).collect();
    let test_set: BTreeSet<&str> = test_cells.iter().map(|c| c.cell_id()).collect();
    assert_disjoint("fold split", &train_set, &test_set)?;

    let fold_seed = config
        .seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(fold.fold_index as u64 + 1));

    // Normalization statistics come from training-fold cells only.
    let norm = fit_norm(&train_cells)?;
    norm.apply_cell(train_cells[0])?;

    // ── Stage 1: health-state classifier ───────────────────────────────
    let mut hs_train_windows = Vec::new();
    for cell in &train_cells {
        let mut windows = normalized_windows(cell, &norm, config.n_w, config.step)?;
        attach_hs_labels(&mut windows, &label_hs(cell, config.p)?);
        hs_train_windows.extend(windows.into_iter().filter(|w| w.hs_label.is_some()));
    }
    assert_subset("stage-1 training", &hs_train_windows, &train_set)?;

    let hs_config = HsConfig {
        n_f: config.schema.n_features(),
        n_w: config.n_w,
        hidden: config.hs_hidden,
    };
    let mut hs_model = HsClassifier::new(hs_config, fold_seed);
    let hs_history = train_hs(&mut hs_model, &hs_train_windows, &config.train_config(fold_seed))?;
    for e in &hs_history.epochs {
        writeln!(
            log,
            "fold {} hs epoch {} train {:.6} val {:.6}",
            fold.fold_index, e.epoch, e.train_loss, e.val_loss
        )?;
    }

    // Stage-1 test accuracy on labeled head/tail windows.
    let mut hs_hits = 0usize;
    let mut hs_total = 0usize;
    for cell in &test_cells {
        let mut windows = normalized_windows(cell, &norm, config.n_w, config.step)?;
        attach_hs_labels(&mut windows, &label_hs(cell, config.p)?);
        for w in windows.iter().filter(|w| w.hs_label.is_some()) {
            let plabel = u8::from(hs_model.predict(&w.matrix)? >= config.trigger.unhealthy_threshold);
            hs_hits += usize::from(plabel == w.hs_label.unwrap());
            hs_total += 1;
        }
    }
    let hs_test_accuracy = if hs_total == 0 {
        0.0
    } else {
        hs_hits as f64 / hs_total as f64
    };

    // ── FPC for every cell via the trained classifier ──────────────────
    let mut fpc_decisions: BTreeMap<String, FpcResult> = BTreeMap::new();
    let mut fpc_train = Vec::new();
    let mut fpc_test = Vec::new();
    let mut untriggered_train = Vec::new();
    let mut untriggered_test = Vec::new();
    for (cells_slice, records, untriggered) in [
        (&train_cells, &mut fpc_train, &mut untriggered_train),
        (&test_cells, &mut fpc_test, &mut untriggered_test),
    ] {
        for cell in cells_slice.iter() {
            let decision =
                detect_fpc_for_cell(&hs_model, &norm, cell, &config.trigger, config.n_w, config.step)?;
            records.push(FpcRecord::from_decision(cell, decision.as_ref()));
            match decision {
                Some(d) => {
                    fpc_decisions.insert(cell.cell_id().to_string(), d);
                }
                None => untriggered.push(cell.cell_id().to_string()),
            }
        }
    }

    // ── Stage 2: RUL regression on post-FPC windows ─────────────────────
    let mut rul_train_windows = Vec::new();
    for cell in &train_cells {
        let Some(decision) = fpc_decisions.get(cell.cell_id()) else {
            continue;
        };
        let mut windows = normalized_windows(cell, &norm, config.n_w, config.step)?;
        attach_rul_labels(&mut windows, &label_rul(cell, decision.fpc_cycle)?);
        rul_train_windows.extend(windows.into_iter().filter(|w| w.rul_label.is_some()));
    }
    assert_subset("stage-2 training", &rul_train_windows, &train_set)?;

    let mut stman_model = StManModel::new(
        config.stman.clone(),
        config.schema.n_features(),
        config.n_w,
        fold_seed.wrapping_add(1),
    )?;
    let rul_history = train_rul(
        &mut stman_model,
        &rul_train_windows,
        &config.train_config(fold_seed.wrapping_add(1)),
    )?;
    for e in &rul_history.epochs {
        writeln!(
            log,
            "fold {} rul epoch {} train {:.6} val {:.6}",
            fold.fold_index, e.epoch, e.train_loss, e.val_loss
        )?;
    }

    // ── Evaluation on triggered test cells ──────────────────────────────
    let pred_dir = out_dir.join("predictions");
    fs::create_dir_all(&pred_dir)?;
    let mut all_preds = Vec::new();
    let mut all_labels = Vec::new();
    for cell in &test_cells {
        let Some(decision) = fpc_decisions.get(cell.cell_id()) else {
            continue;
        };
        let fpc = decision.fpc_cycle;
        let mut windows = normalized_windows(cell, &norm, config.n_w, config.step)?;
        attach_rul_labels(&mut windows, &label_rul(cell, fpc)?);
        let mut rows = Vec::new();
        for w in windows.iter().filter(|w| w.rul_label.is_some()) {
            let pred = stman_model.predict(&w.matrix)?;
            let label = w.rul_label.unwrap();
            let remaining_pred = if w.end_cycle > fpc {
                Some(rul_to_cycles(pred.min(1.0 - 1e-12), w.end_cycle, fpc)?)
            } else {
                None
            };
            rows.push(PredictionRow {
                cycle: w.end_cycle,
                pred,
                label,
                remaining_pred,
            });
            all_preds.push(pred);
            all_labels.push(label);
        }
        assert_subset(
            "evaluation",
            &windows.iter().filter(|w| w.rul_label.is_some()).cloned().collect::<Vec<_>>(),
            &test_set,
        )?;
        write_prediction_csv(&pred_dir.join(format!("{}.csv", cell.cell_id())), &rows)?;
    }

    let metrics = if all_preds.is_empty() {
        FoldMetrics {
            mae: f64::NAN,
            mse: f64::NAN,
            mape_pct: f64::NAN,
            n_windows: 0,
            n_mape_excluded: 0,
        }
    } else {
        FoldMetrics {
            mae: metric_mae(&all_preds, &all_labels)?,
            mse: metric_mse(&all_preds, &all_labels)?,
            mape_pct: metric_mape(&all_preds, &all_labels)?,
            n_windows: all_preds.len(),
            n_mape_excluded: mape_excluded_count(&all_labels),
        }
    };

    // ── Artifacts ───────────────────────────────────────────────────────
    fs::write(
        out_dir.join("fold.json"),
        serde_json::to_string_pretty(fold)? + "\n",
    )?;
    hs_model.save(&out_dir.join("hs.ckpt.json"), &norm)?;
    stman_model.save(&out_dir.join("stman.ckpt.json"), &norm)?;
    fs::write(
        out_dir.join("fpc-report.json"),
        serde_json::to_string_pretty(&FpcReport::new(fpc_test.clone()))? + "\n",
    )?;

    Ok(FoldReport {
        fold_index: fold.fold_index,
        train_ids: fold.train_ids.clone(),
        test_ids: fold.test_ids.clone(),
        hs_history,
        rul_history,
        hs_test_accuracy,
        hs_test_labeled_windows: hs_total,
        fpc_test,
        fpc_train,
        untriggered_test,
        untriggered_train,
        metrics,
        leakage_checked: true,
    })
}

/// Run the full k-fold experiment over in-memory cells. `report.json` and
/// per-fold artifacts are written under `out_dir`.
pub fn run_experiment_on_cells(
    config: &ExperimentConfig,
    cells: &[CellSeries],
    out_dir: &Path,
) -> Result<MetricsReport> {
    config.validate()?;
    let start = std::time::Instant::now();
    for cell in cells {
        if cell.schema() != config.schema {
            return Err(Error::InvalidArgument(format!(
                "cell `{}` has schema {}, config expects {}",
                cell.cell_id(),
                cell.schema(),
                config.schema
            )));
        }
    }
    fs::create_dir_all(out_dir)?;
    let folds_spec = kfold_split(cells, config.k_folds, config.seed)?;

    let mut folds = Vec::with_capacity(folds_spec.len());
    for fold in &folds_spec {
        let fold_dir = out_dir.join(format!("fold_{}", fold.fold_index));
        folds.push(run_fold(config, cells, fold, &fold_dir)?);
    }

    let finite: Vec<&FoldReport> = folds
        .iter()
        .filter(|f| f.metrics.n_windows > 0)
        .collect();
    if finite.is_empty() {
        return Err(Error::Training(
            "no fold produced any evaluated test window".into(),
        ));
    }
    let collect = |f: fn(&FoldMetrics) -> f64| -> Vec<f64> {
        finite.iter().map(|r| f(&r.metrics)).collect()
    };
    let aggregate_metrics = AggregateMetrics {
        mae: aggregate(&collect(|m| m.mae))?,
        mse: aggregate(&collect(|m| m.mse))?,
        mape_pct: aggregate(&collect(|m| m.mape_pct))?,
    };

    let all_test_fpc: Vec<&FpcRecord> = folds.iter().flat_map(|f| f.fpc_test.iter()).collect();
    let triggered: Vec<f64> = all_test_fpc
        .iter()
        .filter_map(|r| r.fpc_capacity_pct)
        .collect();
    let fpc_summary = FpcSummary {
        n_test_cells: all_test_fpc.len(),
        n_triggered: triggered.len(),
        mean_capacity_pct: if triggered.is_empty() {
            None
        } else {
            Some(triggered.iter().sum::<f64>() / triggered.len() as f64)
        },
    };

    let stman_probe = StManModel::new(config.stman.clone(), config.schema.n_features(), config.n_w, 0)?;
    let hs_probe = HsClassifier::new(
        HsConfig {
            n_f: config.schema.n_features(),
            n_w: config.n_w,
            hidden: config.hs_hidden,
        },
        0,
    );

    let report = MetricsReport {
        format: REPORT_FORMAT.to_string(),
        config: config.clone(),
        folds,
        aggregate: aggregate_metrics,
        fpc_summary,
        stman_parameter_count: stman_probe.count_parameters(),
        stman_flops: stman_probe.estimate_flops()?,
        hs_parameter_count: hs_probe.count_parameters(),
        mape_exclusion_threshold: MAPE_EXCLUSION_THRESHOLD,
        runtime_seconds: start.elapsed().as_secs_f64(),
    };
    fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    fs::write(
        out_dir.join("timing.txt"),
        format!("runtime_seconds: {:.3}\n", report.runtime_seconds),
    )?;
    Ok(report)
}

/// Load the manifest named by the config and run the experiment.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<MetricsReport> {
    let manifest_path = Path::new(&config.manifest);
    let manifest = load_manifest(manifest_path)?;
    let cells = manifest.load_cells(manifest_path)?;
    run_experiment_on_cells(config, &cells, out_dir)
}
