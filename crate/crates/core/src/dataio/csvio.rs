//! Cell CSV and dataset-manifest I/O.
//!
//! Cell CSV interchange format: UTF-8, header `cycle,<feature columns>`,
//! one row per cycle with 1-based contiguous cycle indices. Column order is
//! free; extra columns are ignored.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{build_hust_features, CellSeries, Schema};
use crate::error::{Error, Result};

fn parse_err(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::CsvParse {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

/// Load one cell from CSV. For [`Schema::Hust5`] the file carries the three
/// base columns and the two 10th-cycle difference features are derived.
pub fn load_cell_csv(path: &Path, schema: Schema) -> Result<CellSeries> {
    let file = File::open(path).map_err(|e| parse_err(path, 0, format!("cannot open: {e}")))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 0, format!("cannot read header: {e}")))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let cycle_idx = find("cycle").ok_or_else(|| parse_err(path, 0, "missing column `cycle`"))?;
    let wanted = schema.csv_columns();
    let mut col_idx = Vec::with_capacity(wanted.len());
    for col in wanted {
        col_idx.push(
            find(col).ok_or_else(|| parse_err(path, 0, format!("missing column `{col}`")))?,
        );
    }

    let mut cycles: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_err(path, row, e.to_string()))?;
        let cycle: usize = record
            .get(cycle_idx)
            .unwrap_or("")
            .parse()
            .map_err(|_| {
                parse_err(
                    path,
                    row,
                    format!("non-numeric value `{}` in column `cycle`", record.get(cycle_idx).unwrap_or("")),
                )
            })?;
        let expected = row;
        if cycle != expected {
            return Err(parse_err(
                path,
                row,
                format!("gap in cycle index: expected cycle {expected}, found {cycle}"),
            ));
        }
        let mut features = Vec::with_capacity(col_idx.len());
        for (&idx, col) in col_idx.iter().zip(wanted) {
            let raw = record.get(idx).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| {
                parse_err(path, row, format!("non-numeric value `{raw}` in column `{col}`"))
            })?;
            features.push(v);
        }
        cycles.push(features);
    }
    if cycles.is_empty() {
        return Err(parse_err(path, 0, "file contains no data rows"));
    }

    let cell_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("cell")
        .to_string();
    let base_schema = if schema == Schema::Hust5 { Schema::HustBase } else { schema };
    let cell = CellSeries::new(cell_id, base_schema, cycles)?;
    if schema == Schema::Hust5 {
        build_hust_features(&cell)
    } else {
        Ok(cell)
    }
}

/// Write a cell to CSV in the interchange format (full f64 precision).
pub fn save_cell_csv(path: &Path, cell: &CellSeries) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let columns = match cell.schema() {
        Schema::Hust5 => Schema::HustBase.columns(),
        s => s.columns(),
    };
    writeln!(w, "cycle,{}", columns.join(","))?;
    for (i, cyc) in cell.cycles().iter().enumerate() {
        write!(w, "{}", i + 1)?;
        for v in cyc.iter().take(columns.len()) {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Dataset manifest: the list of cell files making up one corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub cells: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cell_id: String,
    /// Path to the cell CSV, relative to the manifest file.
    pub path: String,
    pub schema: Schema,
}

pub const MANIFEST_FORMAT: &str = "rulcast-manifest/v1";

impl Manifest {
    pub fn new(cells: Vec<ManifestEntry>) -> Self {
        Manifest {
            format: MANIFEST_FORMAT.to_string(),
            cells,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    /// Load every cell listed in the manifest, resolving paths relative to
    /// the manifest's directory.
    pub fn load_cells(&self, manifest_path: &Path) -> Result<Vec<CellSeries>> {
        let base: PathBuf = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let mut cells = Vec::with_capacity(self.cells.len());
        for entry in &self.cells {
            let mut cell = load_cell_csv(&base.join(&entry.path), entry.schema)?;
            if cell.cell_id() != entry.cell_id {
                cell = CellSeries::new(entry.cell_id.clone(), cell.schema(), cell.cycles().to_vec())?;
            }
            cells.push(cell);
        }
        Ok(cells)
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let raw = std::fs::read_to_string(path).map_err(|e| {
        Error::InvalidArgument(format!("cannot read manifest {}: {e}", path.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&raw)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::InvalidArgument(format!(
            "manifest {} has format `{}`, expected `{MANIFEST_FORMAT}`",
            path.display(),
            manifest.format
        )));
    }
    Ok(manifest)
}
