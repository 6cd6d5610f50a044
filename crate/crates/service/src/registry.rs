//! Named feature matrices available to sessions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use prior_loom::corpus::FeatureMatrix;
use serde::Serialize;

pub const MATRIX_EXTENSION: &str = "plfm";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetInfo {
    pub name: String,
    pub n_samples: usize,
    pub n_features: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
struct Entry {
    path: PathBuf,
    matrix: Arc<FeatureMatrix>,
}

#[derive(Debug, Default)]
pub struct DatasetRegistry {
    entries: BTreeMap<String, Entry>,
}

impl DatasetRegistry {
    /// Registers every `*.plfm` file directly inside `dir` under its file
    /// stem. Unreadable files are skipped with a warning.
    pub fn scan(dir: &Path) -> std::io::Result<Self> {
        let mut registry = Self::default();
        if !dir.exists() {
            return Ok(registry);
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == MATRIX_EXTENSION))
            .collect();
        paths.sort();
        for path in paths {
            let Some(name) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
                continue;
            };
            if let Err(e) = registry.register(&name, &path) {
                warn!("skipping {}: {e}", path.display());
            }
        }
        Ok(registry)
    }

    /// Loads the matrix at `path` and stores it under `name`, replacing any
    /// previous entry.
    pub fn register(&mut self, name: &str, path: &Path) -> prior_loom::Result<DatasetInfo> {
        check_name(name)?;
        let matrix = FeatureMatrix::load(path)?;
        self.insert(name, path, matrix)
    }

    /// Stores an already loaded matrix under `name`.
    pub fn insert(&mut self, name: &str, path: &Path, matrix: FeatureMatrix) -> prior_loom::Result<DatasetInfo> {
        check_name(name)?;
        self.entries.insert(
            name.to_owned(),
            Entry {
                path: path.to_owned(),
                matrix: Arc::new(matrix),
            },
        );
        Ok(self.info(name).expect("just inserted"))
    }

    pub fn get(&self, name: &str) -> Option<Arc<FeatureMatrix>> {
        self.entries.get(name).map(|e| Arc::clone(&e.matrix))
    }

    pub fn info(&self, name: &str) -> Option<DatasetInfo> {
        self.entries.get(name).map(|e| DatasetInfo {
            name: name.to_owned(),
            n_samples: e.matrix.n_samples(),
            n_features: e.matrix.n_features(),
            path: e.path.clone(),
        })
    }

    pub fn list(&self) -> Vec<DatasetInfo> {
        self.entries.keys().filter_map(|k| self.info(k)).collect()
    }
}

fn check_name(name: &str) -> prior_loom::Result<()> {
    let valid = !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if valid {
        Ok(())
    } else {
        Err(prior_loom::Error::InvalidArgument(format!(
            "dataset names use letters, digits, '-', '_' and '.', got {name:?}"
        )))
    }
}
