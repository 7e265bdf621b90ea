//! Cell data: schemas, CSV ingest, labeling, windowing, normalization,
//! fold splits, and the synthetic degradation generator.

mod csvio;
mod synth;

pub use csvio::{load_cell_csv, load_manifest, save_cell_csv, Manifest, ManifestEntry};
pub use synth::{generate_synthetic, SynthCell, SynthSpec};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Column layout of a cell CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    /// 7 features per cycle (the MIT column set).
    Mit7,
    /// 5 features per cycle: the 3 HUST base columns plus the derived
    /// 10th-cycle voltage and charge-capacity differences.
    Hust5,
    /// The 3 raw HUST columns before feature derivation.
    HustBase,
    /// Synthetic cells; same column set as `Mit7`.
    Synth,
}

impl Schema {
    pub fn columns(&self) -> &'static [&'static str] {
        match self {
            Schema::Mit7 | Schema::Synth => &[
                "discharge_capacity",
                "internal_resistance",
                "charge_capacity",
                "temp_avg",
                "temp_min",
                "temp_max",
                "charge_time",
            ],
            Schema::HustBase => &["charge_voltage", "discharge_capacity", "charge_capacity"],
            Schema::Hust5 => &[
                "charge_voltage",
                "discharge_capacity",
                "charge_capacity",
                "delta_v_10",
                "delta_q_10",
            ],
        }
    }

    pub fn n_features(&self) -> usize {
        self.columns().len()
    }

    /// Index of the discharge-capacity feature.
    pub fn discharge_capacity_index(&self) -> usize {
        match self {
            Schema::Mit7 | Schema::Synth => 0,
            Schema::HustBase | Schema::Hust5 => 1,
        }
    }

    /// Columns expected in a CSV file of this schema. `Hust5` files carry
    /// only the base columns; the two difference features are derived.
    pub fn csv_columns(&self) -> &'static [&'static str] {
        match self {
            Schema::Hust5 => Schema::HustBase.columns(),
            s => s.columns(),
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Schema::Mit7 => "mit7",
            Schema::Hust5 => "hust5",
            Schema::HustBase => "hust_base",
            Schema::Synth => "synth",
        };
        f.write_str(s)
    }
}

impl FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mit7" => Ok(Schema::Mit7),
            "hust5" => Ok(Schema::Hust5),
            "hust_base" => Ok(Schema::HustBase),
            "synth" => Ok(Schema::Synth),
            other => Err(Error::InvalidArgument(format!(
                "unknown schema `{other}` (expected mit7, hust5, hust_base, or synth)"
            ))),
        }
    }
}

/// One battery cell's full per-cycle record. Cycle indices are 1-based and
/// contiguous; `eol` equals the number of cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSeries {
    cell_id: String,
    schema: Schema,
    cycles: Vec<Vec<f64>>,
    eol: usize,
}

impl CellSeries {
    pub fn new(cell_id: impl Into<String>, schema: Schema, cycles: Vec<Vec<f64>>) -> Result<Self> {
        if cycles.is_empty() {
            return Err(Error::InvalidArgument("cell has no cycles".into()));
        }
        let n_f = schema.n_features();
        for (i, c) in cycles.iter().enumerate() {
            if c.len() != n_f {
                return Err(Error::InvalidArgument(format!(
                    "cycle {} has {} features, schema {} expects {}",
                    i + 1,
                    c.len(),
                    schema,
                    n_f
                )));
            }
        }
        let eol = cycles.len();
        Ok(CellSeries {
            cell_id: cell_id.into(),
            schema,
            cycles,
            eol,
        })
    }

    pub fn cell_id(&self) -> &str {
        &self.cell_id
    }

    pub fn schema(&self) -> Schema {
        self.schema
    }

    pub fn eol(&self) -> usize {
        self.eol
    }

    pub fn n_features(&self) -> usize {
        self.schema.n_features()
    }

    pub fn cycles(&self) -> &[Vec<f64>] {
        &self.cycles
    }

    /// Feature value at a 1-based cycle index.
    pub fn feature(&self, cycle: usize, feature: usize) -> f64 {
        self.cycles[cycle - 1][feature]
    }

    pub fn discharge_capacity(&self, cycle: usize) -> f64 {
        self.feature(cycle, self.schema.discharge_capacity_index())
    }
}

/// Derive the 5-feature HUST layout from the 3 base columns by appending
/// the differences of charge voltage and charge capacity against cycle 10.
pub fn build_hust_features(cell: &CellSeries) -> Result<CellSeries> {
    if cell.schema() != Schema::HustBase {
        return Err(Error::InvalidArgument(format!(
            "build_hust_features expects schema hust_base, got {}",
            cell.schema()
        )));
    }
    if cell.eol() < 10 {
        return Err(Error::InvalidArgument(format!(
            "cell `{}` has {} cycles; the 10th-cycle differences need at least 10",
            cell.cell_id(),
            cell.eol()
        )));
    }
    let v10 = cell.feature(10, 0);
    let q10 = cell.feature(10, 2);
    let cycles = cell
        .cycles()
        .iter()
        .map(|c| vec![c[0], c[1], c[2], c[0] - v10, c[2] - q10])
        .collect();
    CellSeries::new(cell.cell_id(), Schema::Hust5, cycles)
}

/// An n_f x n_w slice of a cell ending at `end_cycle`, with the label of
/// its end cycle when one exists.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub cell_id: String,
    pub end_cycle: usize,
    pub matrix: Tensor,
    pub hs_label: Option<u8>,
    pub rul_label: Option<f64>,
}

/// Health-state labels per Eq.-style head/tail annotation: the first
/// `floor(eol * p)` cycles are healthy (0), the last `floor(eol * p)` are
/// unhealthy (1), everything between is unlabeled.
pub fn label_hs(cell: &CellSeries, p: f64) -> Result<Vec<Option<u8>>> {
    if !(p > 0.0 && p < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "label fraction p must lie in (0, 0.5), got {p}"
        )));
    }
    let eol = cell.eol();
    let n = (eol as f64 * p).floor() as usize;
    let mut labels = vec![None; eol];
    for l in labels.iter_mut().take(n) {
        *l = Some(0);
    }
    for l in labels.iter_mut().skip(eol - n) {
        *l = Some(1);
    }
    Ok(labels)
}

/// RUL percentage labels y(j) = (eol - j) / (eol - fpc) for cycles j >= fpc;
/// cycles before the FPC are unlabeled.
pub fn label_rul(cell: &CellSeries, fpc: usize) -> Result<Vec<Option<f64>>> {
    let eol = cell.eol();
    if fpc >= eol {
        return Err(Error::InvalidArgument(format!(
            "fpc {fpc} must be smaller than eol {eol}"
        )));
    }
    let denom = (eol - fpc) as f64;
    let labels = (1..=eol)
        .map(|j| {
            if j >= fpc {
                Some((eol - j) as f64 / denom)
            } else {
                None
            }
        })
        .collect();
    Ok(labels)
}

/// Sliding windows of width `n_w` ending at cycles `n_w, n_w + step, ...`.
/// Labels are left unset; see [`attach_hs_labels`] / [`attach_rul_labels`].
pub fn make_windows(cell: &CellSeries, n_w: usize, step: usize) -> Result<Vec<WindowSample>> {
    if step == 0 {
        return Err(Error::InvalidArgument("window step must be positive".into()));
    }
    if cell.eol() < n_w {
        return Err(Error::CellTooShort {
            cell_id: cell.cell_id().to_string(),
            eol: cell.eol(),
            n_w,
        });
    }
    let n_f = cell.n_features();
    let mut windows = Vec::new();
    let mut j = n_w;
    while j <= cell.eol() {
        let mut data = Vec::with_capacity(n_f * n_w);
        for f in 0..n_f {
            for t in 0..n_w {
                data.push(cell.cycles[j - n_w + t][f]);
            }
        }
        windows.push(WindowSample {
            cell_id: cell.cell_id().to_string(),
            end_cycle: j,
            matrix: Tensor::new(vec![n_f, n_w], data)?,
            hs_label: None,
            rul_label: None,
        });
        j += step;
    }
    Ok(windows)
}

/// Copy each window's end-cycle label out of a per-cycle label vector.
pub fn attach_hs_labels(windows: &mut [WindowSample], labels: &[Option<u8>]) {
    for w in windows.iter_mut() {
        w.hs_label = labels[w.end_cycle - 1];
    }
}

pub fn attach_rul_labels(windows: &mut [WindowSample], labels: &[Option<f64>]) {
    for w in windows.iter_mut() {
        w.rul_label = labels[w.end_cycle - 1];
    }
}

/// Per-feature z-score statistics, fit on training-fold cells only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard-deviation floor applied when a feature is constant.
pub const NORM_STD_FLOOR: f64 = 1e-8;

pub fn fit_norm(cells: &[&CellSeries]) -> Result<NormStats> {
    let n_f = cells
        .first()
        .ok_or_else(|| Error::InvalidArgument("fit_norm on an empty cell set".into()))?
        .n_features();
    let mut count = 0usize;
    let mut mean = vec![0.0; n_f];
    for cell in cells {
        for cyc in cell.cycles() {
            for (m, v) in mean.iter_mut().zip(cyc) {
                *m += v;
            }
            count += 1;
        }
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; n_f];
    for cell in cells {
        for cyc in cell.cycles() {
            for (s, (v, m)) in var.iter_mut().zip(cyc.iter().zip(&mean)) {
                let d = v - m;
                *s += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|s| (s / count as f64).sqrt().max(NORM_STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

impl NormStats {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// Pure per-feature z-score of a whole cell.
    pub fn apply_cell(&self, cell: &CellSeries) -> Result<CellSeries> {
        if cell.n_features() != self.n_features() {
            return Err(Error::InvalidArgument(format!(
                "norm stats cover {} features, cell `{}` has {}",
                self.n_features(),
                cell.cell_id(),
                cell.n_features()
            )));
        }
        let cycles = cell
            .cycles()
            .iter()
            .map(|c| {
                c.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect()
            })
            .collect();
        CellSeries::new(cell.cell_id(), cell.schema(), cycles)
    }

    /// Pure per-feature z-score of one window (rows are features).
    pub fn apply_window(&self, window: &WindowSample) -> Result<WindowSample> {
        let shape = window.matrix.shape().to_vec();
        if shape[0] != self.n_features() {
            return Err(Error::InvalidArgument(format!(
                "norm stats cover {} features, window has {}",
                self.n_features(),
                shape[0]
            )));
        }
        let n_w = shape[1];
        let mut data = window.matrix.data().to_vec();
        for f in 0..shape[0] {
            let (m, s) = (self.mean[f], self.std[f]);
            for v in data[f * n_w..(f + 1) * n_w].iter_mut() {
                *v = (*v - m) / s;
            }
        }
        Ok(WindowSample {
            matrix: Tensor::new(shape, data)?,
            ..window.clone()
        })
    }
}

/// One train/test split by cell id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

/// Split cells into k folds by cell id, never by window. Every cell lands
/// in exactly one test fold; fold sizes differ by at most one.
pub fn kfold_split(cells: &[CellSeries], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if k > cells.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {} exceeds the number of cells {}",
            k,
            cells.len()
        )));
    }
    let mut ids: Vec<String> = cells.iter().map(|c| c.cell_id().to_string()).collect();
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::InvalidArgument("duplicate cell ids in fold split".into()));
    }
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n = ids.len();
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold_index in 0..k {
        let size = base + usize::from(fold_index < extra);
        let test: BTreeSet<String> = ids[start..start + size].iter().cloned().collect();
        start += size;
        let mut test_ids: Vec<String> = test.iter().cloned().collect();
        let mut train_ids: Vec<String> =
            ids.iter().filter(|id| !test.contains(*id)).cloned().collect();
        test_ids.sort();
        train_ids.sort();
        folds.push(FoldSplit {
            fold_index,
            train_ids,
            test_ids,
            seed,
        });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cell(eol: usize) -> CellSeries {
        let cycles = (1..=eol)
            .map(|j| {
                let x = j as f64;
                vec![1.1 - 0.0001 * x, 0.016, 1.1, 30.0, 29.0, 31.0, 13.0 + 0.001 * x]
            })
            .collect();
        CellSeries::new(format!("cell-{eol}"), Schema::Mit7, cycles).unwrap()
    }

    #[test]
    fn hs_labels_head_and_tail() {
        let cell = toy_cell(1000);
        let labels = label_hs(&cell, 0.1).unwrap();
        assert_eq!(labels[49], Some(0)); // cycle 50
        assert_eq!(labels[949], Some(1)); // cycle 950
        assert_eq!(labels[499], None); // cycle 500
        let zeros = labels.iter().filter(|l| **l == Some(0)).count();
        let ones = labels.iter().filter(|l| **l == Some(1)).count();
        assert_eq!((zeros, ones), (100, 100));
    }

    #[test]
    fn hs_labels_tiny_cell() {
        let cell = toy_cell(10);
        let labels = label_hs(&cell, 0.1).unwrap();
        assert_eq!(labels[0], Some(0));
        assert_eq!(labels[9], Some(1));
        assert_eq!(labels.iter().filter(|l| l.is_some()).count(), 2);
    }

    #[test]
    fn hs_labels_reject_half() {
        let cell = toy_cell(100);
        assert!(label_hs(&cell, 0.5).is_err());
    }

    #[test]
    fn rul_labels_endpoints_and_midpoint() {
        let cell = toy_cell(1000);
        let labels = label_rul(&cell, 800).unwrap();
        assert_eq!(labels[799], Some(1.0)); // j = fpc
        assert_eq!(labels[999], Some(0.0)); // j = eol
        assert_eq!(labels[899], Some(0.5)); // midpoint
        assert_eq!(labels[798], None);

        let cell = toy_cell(150);
        let labels = label_rul(&cell, 100).unwrap();
        assert!((labels[119].unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn rul_labels_reject_fpc_at_eol() {
        let cell = toy_cell(100);
        assert!(label_rul(&cell, 100).is_err());
    }

    #[test]
    fn window_counts() {
        let cell = toy_cell(60);
        assert_eq!(make_windows(&cell, 50, 1).unwrap().len(), 11);
        let cell = toy_cell(50);
        assert_eq!(make_windows(&cell, 50, 1).unwrap().len(), 1);
        let cell = toy_cell(49);
        assert!(matches!(
            make_windows(&cell, 50, 1),
            Err(Error::CellTooShort { .. })
        ));
    }

    #[test]
    fn windows_do_not_mutate_columns() {
        let cell = toy_cell(60);
        let windows = make_windows(&cell, 50, 1).unwrap();
        // Cycle 55 appears in several windows; every copy must be identical.
        let expected: Vec<f64> = cell.cycles()[54].clone();
        for w in &windows {
            let lo = w.end_cycle + 1 - 50;
            if lo <= 55 && 55 <= w.end_cycle {
                let t = 55 - lo;
                for f in 0..cell.n_features() {
                    assert_eq!(w.matrix.at(f, t), expected[f]);
                }
            }
        }
    }

    #[test]
    fn hust_feature_derivation() {
        let cycles: Vec<Vec<f64>> = (1..=15)
            .map(|j| vec![3.3 + 0.01 * (j as f64 - 10.0), 1.1, 1.05 + 0.001 * (j as f64 - 10.0)])
            .collect();
        let base = CellSeries::new("h1", Schema::HustBase, cycles).unwrap();
        let full = build_hust_features(&base).unwrap();
        assert_eq!(full.schema(), Schema::Hust5);
        assert_eq!(full.n_features(), 5);
        assert_eq!(full.feature(10, 3), 0.0);
        assert_eq!(full.feature(10, 4), 0.0);
        assert!((full.feature(15, 3) - 0.05).abs() < 1e-12);

        let short = CellSeries::new(
            "h2",
            Schema::HustBase,
            vec![vec![3.3, 1.1, 1.05]; 9],
        )
        .unwrap();
        assert!(build_hust_features(&short).is_err());

        // Constant-voltage cell: the difference feature is identically zero.
        let const_v = CellSeries::new(
            "h3",
            Schema::HustBase,
            vec![vec![3.3, 1.1, 1.05]; 20],
        )
        .unwrap();
        let full = build_hust_features(&const_v).unwrap();
        for j in 10..=20 {
            assert_eq!(full.feature(j, 3), 0.0);
        }
    }

    #[test]
    fn norm_fit_and_apply() {
        let cell = toy_cell(200);
        let stats = fit_norm(&[&cell]).unwrap();
        // Constant feature is floored, normalizing to ~0 (the floored std
        // amplifies the mean's last-ulp rounding, so not exactly 0).
        let normed = stats.apply_cell(&cell).unwrap();
        for cyc in normed.cycles() {
            assert!(cyc[1].abs() < 1e-6, "constant feature -> {}", cyc[1]);
        }
        // Non-constant feature has mean ~0, std ~1 after normalization.
        let col: Vec<f64> = normed.cycles().iter().map(|c| c[0]).collect();
        let mean: f64 = col.iter().sum::<f64>() / col.len() as f64;
        let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var.sqrt() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn norm_stats_roundtrip_serialization() {
        let cell = toy_cell(100);
        let stats = fit_norm(&[&cell]).unwrap();
        let json = serde_json::to_string(&stats).unwrap();
        let back: NormStats = serde_json::from_str(&json).unwrap();
        assert_eq!(stats, back);
        let w = &make_windows(&cell, 50, 1).unwrap()[0];
        assert_eq!(
            stats.apply_window(w).unwrap().matrix,
            back.apply_window(w).unwrap().matrix
        );
    }

    #[test]
    fn kfold_sizes_and_partition() {
        let cells: Vec<CellSeries> = (0..124)
            .map(|i| {
                CellSeries::new(format!("c{i:03}"), Schema::Mit7, vec![vec![0.0; 7]; 60]).unwrap()
            })
            .collect();
        let folds = kfold_split(&cells, 5, 42).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(|f| f.test_ids.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![24, 25, 25, 25, 25]);

        // Union of test folds is every cell, pairwise disjoint.
        let mut seen = BTreeSet::new();
        for f in &folds {
            for id in &f.test_ids {
                assert!(seen.insert(id.clone()), "{id} in two test folds");
                assert!(!f.train_ids.contains(id));
            }
            assert_eq!(f.train_ids.len() + f.test_ids.len(), 124);
        }
        assert_eq!(seen.len(), 124);

        let folds10 = kfold_split(&cells[..10], 5, 1).unwrap();
        assert!(folds10.iter().all(|f| f.test_ids.len() == 2));

        assert!(kfold_split(&cells[..3], 5, 1).is_err());
    }
}
