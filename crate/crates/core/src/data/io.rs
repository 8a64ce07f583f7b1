//! Dataset directory format: `manifest.json` plus headerless CSV matrices.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RegionDataset, ViewKind, ViewMatrix};
use crate::error::DataError;
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    n: usize,
    region_ids: Vec<String>,
    views: Vec<ManifestView>,
    #[serde(default)]
    targets: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestView {
    name: String,
    kind: ViewKind,
    file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    categories: Option<Vec<String>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<RegionDataset, DataError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(DataError::MissingFile { path: manifest_path });
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    if manifest.region_ids.len() != manifest.n {
        return Err(DataError::Manifest {
            path: manifest_path,
            message: format!("n = {} but {} region ids", manifest.n, manifest.region_ids.len()),
        });
    }
    let n = manifest.n;

    let mut views = Vec::with_capacity(manifest.views.len());
    for mv in manifest.views {
        let rows = read_matrix(&dir.join(&mv.file), &mv.file, n, None)?;
        let f = rows.first().map(Vec::len).unwrap_or(0);
        let labels = match (mv.categories, mv.kind) {
            (Some(c), _) => c,
            (None, ViewKind::Mobility) => manifest.region_ids.clone(),
            (None, ViewKind::CategoricalCount) => (0..f).map(|i| format!("c{i}")).collect(),
        };
        let matrix = if f == 0 {
            return Err(DataError::Invalid(format!("{}: empty matrix", mv.file)));
        } else {
            Tensor::from_rows(&rows)
        };
        views.push(ViewMatrix { name: mv.name, kind: mv.kind, matrix, category_labels: labels });
    }

    let mut targets = BTreeMap::new();
    for (task, file) in manifest.targets {
        let rows = read_matrix(&dir.join(&file), &file, n, Some(1))?;
        targets.insert(task, rows.into_iter().map(|r| r[0]).collect());
    }

    let ds = RegionDataset { region_ids: manifest.region_ids, views, targets };
    // cell-level errors were reported above with file names; this checks the rest
    ds.validate()?;
    Ok(ds)
}

fn read_matrix(path: &Path, label: &str, n: usize, width: Option<usize>) -> Result<Vec<Vec<f64>>, DataError> {
    let rows = read_table(path, label, width, true)?;
    if rows.len() != n {
        return Err(DataError::RowCount { file: label.into(), expected: n, found: rows.len() });
    }
    Ok(rows)
}

/// Reads a headerless CSV of real numbers into an `rows × cols` tensor.
pub fn read_real_matrix(path: impl AsRef<Path>) -> Result<Tensor, DataError> {
    let path = path.as_ref();
    let label = path.display().to_string();
    let rows = read_table(path, &label, None, false)?;
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.is_empty() || cols == 0 {
        return Err(DataError::Invalid(format!("{label}: empty matrix")));
    }
    Tensor::new(&[rows.len(), cols], rows.concat()).map_err(|e| DataError::Invalid(format!("{label}: {e}")))
}

fn read_table(path: &Path, label: &str, width: Option<usize>, nonnegative: bool) -> Result<Vec<Vec<f64>>, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile { path: path.to_path_buf() });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| DataError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })?;
        let expected = width.or_else(|| rows.first().map(Vec::len));
        if let Some(expected) = expected {
            if record.len() != expected {
                return Err(DataError::ColumnCount { file: label.into(), row, expected, found: record.len() });
            }
        }
        let mut values = Vec::with_capacity(record.len());
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::NonNumeric {
                file: label.into(),
                row,
                col,
                cell: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFiniteCell { file: label.into(), row, col });
            }
            if nonnegative && v < 0.0 {
                return Err(DataError::NegativeCount { file: label.into(), row, col, value: v });
            }
            values.push(v);
        }
        rows.push(values);
    }
    Ok(rows)
}

/// Formats with the shortest representation that parses back to the same `f64`.
pub(crate) fn write_csv_rows<'a>(path: &Path, rows: impl Iterator<Item = &'a [f64]>) -> Result<(), DataError> {
    let mut out = String::new();
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))
}

fn file_name(name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{clean}.csv")
}

pub fn write_dataset(ds: &RegionDataset, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut views = Vec::with_capacity(ds.views.len());
    for v in &ds.views {
        let file = file_name(&v.name);
        let path: PathBuf = dir.join(&file);
        let f = v.features();
        write_csv_rows(&path, v.matrix.data().chunks(f))?;
        let categories = match v.kind {
            ViewKind::Mobility if v.category_labels == ds.region_ids => None,
            _ => Some(v.category_labels.clone()),
        };
        views.push(ManifestView { name: v.name.clone(), kind: v.kind, file, categories });
    }
    let mut targets = BTreeMap::new();
    for (task, y) in &ds.targets {
        let file = format!("target_{}", file_name(task));
        write_csv_rows(&dir.join(&file), y.iter().map(std::slice::from_ref))?;
        targets.insert(task.clone(), file);
    }
    let manifest = Manifest { n: ds.n(), region_ids: ds.region_ids.clone(), views, targets };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}
