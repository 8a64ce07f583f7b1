//! Region datasets: in-memory model, directory format, synthesis, and fold splits.

mod io;
mod kfold;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DataError;
use crate::numerics::Tensor;

pub use io::{load_dataset, read_real_matrix, write_dataset, MANIFEST_FILE};
pub(crate) use io::write_csv_rows;
pub use kfold::{split_kfold, Fold};
pub use synth::{generate_synthetic, Planted, SynthConfig, TARGET_TASKS};
pub(crate) use synth::generate_unchecked;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewKind {
    #[serde(rename = "mobility")]
    Mobility,
    #[serde(rename = "categorical-count")]
    CategoricalCount,
}

/// One feature view: an `n × f` matrix of nonnegative counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMatrix {
    pub name: String,
    pub kind: ViewKind,
    pub matrix: Tensor,
    pub category_labels: Vec<String>,
}

impl ViewMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn features(&self) -> usize {
        self.matrix.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionDataset {
    pub region_ids: Vec<String>,
    pub views: Vec<ViewMatrix>,
    pub targets: BTreeMap<String, Vec<f64>>,
}

/// Shape and content summary used to pair checkpoints with datasets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub n: usize,
    pub views: Vec<ViewSchema>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSchema {
    pub name: String,
    pub kind: ViewKind,
    pub features: usize,
}

impl RegionDataset {
    pub fn new(
        region_ids: Vec<String>,
        views: Vec<ViewMatrix>,
        targets: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self, DataError> {
        let ds = Self { region_ids, views, targets };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.region_ids.len()
    }

    pub fn view(&self, name: &str) -> Option<&ViewMatrix> {
        self.views.iter().find(|v| v.name == name)
    }

    pub fn target(&self, task: &str) -> Result<&[f64], DataError> {
        self.targets.get(task).map(Vec::as_slice).ok_or_else(|| {
            let available: Vec<&str> = self.targets.keys().map(String::as_str).collect();
            DataError::Invalid(format!(
                "unknown task `{task}`; available tasks: [{}]",
                available.join(", ")
            ))
        })
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.n();
        if n == 0 {
            return Err(DataError::Invalid("dataset has no regions".into()));
        }
        if self.views.is_empty() {
            return Err(DataError::Invalid("dataset has no views".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for v in &self.views {
            if !names.insert(v.name.as_str()) {
                return Err(DataError::Invalid(format!("duplicate view name `{}`", v.name)));
            }
            if v.matrix.rank() != 2 {
                return Err(DataError::Invalid(format!("view `{}` is not a matrix", v.name)));
            }
            if v.rows() != n {
                return Err(DataError::RowCount { file: v.name.clone(), expected: n, found: v.rows() });
            }
            if v.kind == ViewKind::Mobility && v.features() != n {
                return Err(DataError::Invalid(format!(
                    "mobility view `{}` must be {n}x{n}, got {n}x{}",
                    v.name,
                    v.features()
                )));
            }
            if v.category_labels.len() != v.features() {
                return Err(DataError::Invalid(format!(
                    "view `{}` has {} category labels for {} columns",
                    v.name,
                    v.category_labels.len(),
                    v.features()
                )));
            }
            let f = v.features();
            for (i, &x) in v.matrix.data().iter().enumerate() {
                if !x.is_finite() {
                    return Err(DataError::NonFiniteCell { file: v.name.clone(), row: i / f, col: i % f });
                }
                if x < 0.0 {
                    return Err(DataError::NegativeCount { file: v.name.clone(), row: i / f, col: i % f, value: x });
                }
            }
        }
        for (task, y) in &self.targets {
            if y.len() != n {
                return Err(DataError::RowCount { file: format!("target `{task}`"), expected: n, found: y.len() });
            }
            if let Some(row) = y.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteCell { file: format!("target `{task}`"), row, col: 0 });
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> Vec<ViewSchema> {
        self.views
            .iter()
            .map(|v| ViewSchema { name: v.name.clone(), kind: v.kind, features: v.features() })
            .collect()
    }

    /// SHA-256 over view names, kinds, shapes, and little-endian values.
    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        h.update((self.n() as u64).to_le_bytes());
        for v in &self.views {
            h.update((v.name.len() as u64).to_le_bytes());
            h.update(v.name.as_bytes());
            h.update([matches!(v.kind, ViewKind::Mobility) as u8]);
            h.update((v.rows() as u64).to_le_bytes());
            h.update((v.features() as u64).to_le_bytes());
            for x in v.matrix.data() {
                h.update(x.to_le_bytes());
            }
        }
        Fingerprint { n: self.n(), views: self.schema(), sha256: hex::encode(h.finalize()) }
    }
}
