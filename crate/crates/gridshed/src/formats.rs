//! On-disk formats: JSON Lines for microgrids, labels and datasets; a single
//! JSON document for trained models; CSV for plot data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use gridshed_core::attack::AttackScenario;
use gridshed_core::autodiff::Matrix;
use gridshed_core::dataset::{extract_features, InstanceRecord, Standardizer, EDGE_FEATURES, NODE_FEATURES};
use gridshed_core::gats::{init_params, ModelConfig, ModelParams};
use gridshed_core::microgrid::Microgrid;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Schema { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Model { path: PathBuf, message: String },
    #[error("{path}: model expects {expected}, file declares {found}")]
    Dimension { path: PathBuf, expected: String, found: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |cause| FormatError::Io { path: path.to_path_buf(), cause }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), FormatError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| FormatError::Schema {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads JSON Lines; blank lines are skipped, errors name the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| FormatError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// One line of the `label` stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub instance: Microgrid,
    pub elsr: f64,
    pub std_error: f64,
    pub n_scenarios: usize,
    pub seed: u64,
}

/// Scenario dump with lines given by their endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDump {
    pub disrupted_buses: Vec<usize>,
    pub disrupted_lines: Vec<(usize, usize)>,
}

impl ScenarioDump {
    pub fn new(mg: &Microgrid, s: &AttackScenario) -> Self {
        Self {
            disrupted_buses: s.disrupted_buses.clone(),
            disrupted_lines: s.disrupted_lines.iter().map(|&k| (mg.lines[k].from_bus, mg.lines[k].to_bus)).collect(),
        }
    }
}

/// Any line the evaluation stages accept: a labeled instance, a bare
/// microgrid, or a dataset record.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum AnyRecord {
    Labeled(LabeledInstance),
    Grid(Microgrid),
    Dataset(InstanceRecord),
}

impl AnyRecord {
    pub fn features(&self) -> InstanceRecord {
        match self {
            AnyRecord::Labeled(l) => extract_features(&l.instance).with_label(l.elsr),
            AnyRecord::Grid(g) => extract_features(g),
            AnyRecord::Dataset(r) => r.clone(),
        }
    }

    pub fn microgrid(&self) -> Option<&Microgrid> {
        match self {
            AnyRecord::Labeled(l) => Some(&l.instance),
            AnyRecord::Grid(g) => Some(g),
            AnyRecord::Dataset(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub config: ModelConfig,
    pub standardizer: Standardizer,
    /// Named tensors as nested row arrays.
    pub parameters: BTreeMap<String, Vec<Vec<f64>>>,
    /// Mean training label, used as the reference baseline at evaluation.
    #[serde(default)]
    pub train_label_mean: Option<f64>,
}

impl ModelArtifact {
    pub fn from_model(model: &ModelParams, train_label_mean: Option<f64>) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            config: model.config,
            standardizer: model.standardizer.clone(),
            parameters: model.named_tensors().into_iter().map(|(name, m)| (name, m.to_rows())).collect(),
            train_label_mean,
        }
    }

    pub fn into_model(self, path: &Path) -> Result<ModelParams, FormatError> {
        let model_err = |message: String| FormatError::Model { path: path.to_path_buf(), message };
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(model_err(format!(
                "unsupported format_version {} (expected {MODEL_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.config.node_feature_dim != NODE_FEATURES || self.config.edge_feature_dim != EDGE_FEATURES {
            return Err(FormatError::Dimension {
                path: path.to_path_buf(),
                expected: format!("{NODE_FEATURES} node / {EDGE_FEATURES} edge features"),
                found: format!(
                    "{} node / {} edge features",
                    self.config.node_feature_dim, self.config.edge_feature_dim
                ),
            });
        }
        let mut model = init_params(&self.config, 0).map_err(|e| model_err(e.to_string()))?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != self.parameters.len() {
            return Err(model_err(format!("{} tensors stored, config implies {}", self.parameters.len(), names.len())));
        }
        let mut flat = Vec::with_capacity(names.len());
        for name in &names {
            let rows = self.parameters.get(name).ok_or_else(|| model_err(format!("missing tensor {name}")))?;
            let n_rows = rows.len();
            let n_cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != n_cols) {
                return Err(model_err(format!("tensor {name} has ragged rows")));
            }
            flat.push(Matrix { rows: n_rows, cols: n_cols, data: rows.iter().flatten().copied().collect() });
        }
        model.set_flat(&flat).map_err(|e| model_err(format!("{e}")))?;
        model.standardizer = self.standardizer;
        Ok(model)
    }
}

pub fn save_model(path: &Path, model: &ModelParams, train_label_mean: Option<f64>) -> Result<(), FormatError> {
    let artifact = ModelArtifact::from_model(model, train_label_mean);
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, &artifact)
        .map_err(|e| FormatError::Model { path: path.to_path_buf(), message: e.to_string() })?;
    w.flush().map_err(io_err(path))
}

pub fn load_model_artifact(path: &Path) -> Result<ModelArtifact, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| FormatError::Model { path: path.to_path_buf(), message: format!("not a model artifact: {e}") })
}

pub fn load_model(path: &Path) -> Result<ModelParams, FormatError> {
    load_model_artifact(path)?.into_model(path)
}

pub fn write_dataset(path: &Path, records: &[InstanceRecord]) -> Result<(), FormatError> {
    write_jsonl(path, records)
}

pub fn read_dataset(path: &Path) -> Result<Vec<InstanceRecord>, FormatError> {
    let records: Vec<InstanceRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        r.check().map_err(|e| FormatError::Schema { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
    }
    Ok(records)
}

/// Writes a CSV with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), FormatError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", header.join(",")).map_err(io_err(path))?;
    for row in rows {
        writeln!(w, "{}", row.join(",")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| FormatError::Schema {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    writeln!(w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}
