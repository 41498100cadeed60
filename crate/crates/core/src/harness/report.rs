use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use crate::clustering::EntropyDiagnostics;
use crate::error::{Error, Result};
use crate::numcore::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Cluster the client was assigned to (absent for the averaging baseline).
    pub cluster: Option<usize>,
    /// Accuracy of the client's local model on its own test split.
    pub local_accuracy: f64,
    /// Accuracy of the model the mode delivers to this client.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringRecord {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

/// Weights of one target cluster after every distillation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTrajectory {
    pub cluster: usize,
    pub iterations: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub val_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub class: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub seed: u64,
    pub mode: Mode,
    pub config: ExperimentConfig,
    pub clients: Vec<ClientRecord>,
    pub mean_accuracy: Option<f64>,
    pub clustering: Option<ClusteringRecord>,
    pub weights: Vec<WeightTrajectory>,
    pub entropy: Option<EntropyDiagnostics>,
    /// Wall-clock seconds per stage; not part of the reproducible content.
    pub timings: BTreeMap<String, f64>,
    pub error: Option<ErrorRecord>,
}

impl RunReport {
    pub fn new(config: &ExperimentConfig) -> Self {
        RunReport {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            mode: config.mode,
            config: config.clone(),
            clients: Vec::new(),
            mean_accuracy: None,
            clustering: None,
            weights: Vec::new(),
            entropy: None,
            timings: BTreeMap::new(),
            error: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The JSON with timings removed, for reproducibility comparisons.
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.timings.clear();
        r.to_json()
    }

    /// True when every number in the report is finite.
    pub fn all_finite(&self) -> bool {
        let c = self
            .clients
            .iter()
            .all(|c| c.accuracy.is_finite() && c.local_accuracy.is_finite());
        let w = self
            .weights
            .iter()
            .all(|t| t.weights.iter().flatten().all(|v| v.is_finite()) && t.val_loss.iter().all(|v| v.is_finite()));
        let e = self
            .entropy
            .as_ref()
            .is_none_or(|e| e.all_clients.is_finite() && e.clusters.iter().all(|v| v.is_finite()));
        c && w
            && e
            && self.mean_accuracy.is_none_or(f64::is_finite)
            && self.clustering.as_ref().is_none_or(|c| c.inertia.is_finite())
            && self.timings.values().all(|v| v.is_finite())
    }
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn accuracy_csv(report: &RunReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "client",
        "cluster",
        "train_size",
        "test_size",
        "local_accuracy",
        "accuracy",
    ])?;
    for c in &report.clients {
        w.write_record([
            c.client.to_string(),
            c.cluster.map(|k| k.to_string()).unwrap_or_default(),
            c.train_size.to_string(),
            c.test_size.to_string(),
            c.local_accuracy.to_string(),
            c.accuracy.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// One row per (target cluster, iteration): `iteration, cluster, w_1..w_K`.
pub fn weights_csv(report: &RunReport) -> Result<Vec<u8>> {
    let k = report
        .weights
        .first()
        .map_or(0, |t| t.weights.first().map_or(0, Vec::len));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iteration".to_string(), "cluster".to_string()];
    header.extend((1..=k).map(|j| format!("w_{j}")));
    header.push("val_loss".into());
    w.write_record(&header)?;
    for t in &report.weights {
        for ((it, ws), loss) in t.iterations.iter().zip(&t.weights).zip(&t.val_loss) {
            let mut row = vec![it.to_string(), t.cluster.to_string()];
            row.extend(ws.iter().map(f64::to_string));
            row.push(loss.to_string());
            w.write_record(&row)?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Write `report.json`, `accuracy.csv` and `weights.csv` into `dir`. Every
/// payload is rendered before anything touches the disk.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        ("report.json", report.to_json()?.into_bytes()),
        ("accuracy.csv", accuracy_csv(report)?),
        ("weights.csv", weights_csv(report)?),
    ];
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, bytes) in files {
        let p = dir.join(name);
        write_atomic(&p, &bytes)?;
        written.push(p);
    }
    Ok(written)
}

pub const MODEL_FORMAT: &str = "fedbicross-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Self-describing model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelContainer {
    pub format: String,
    pub format_version: u32,
    pub role: String,
    pub index: usize,
    pub model: Model,
}

pub fn save_model(path: &Path, role: &str, index: usize, model: &Model) -> Result<()> {
    let c = ModelContainer {
        format: MODEL_FORMAT.into(),
        format_version: MODEL_FORMAT_VERSION,
        role: role.into(),
        index,
        model: model.clone(),
    };
    write_atomic(path, serde_json::to_string(&c)?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<ModelContainer> {
    let c: ModelContainer = serde_json::from_str(&fs::read_to_string(path)?)?;
    if c.format != MODEL_FORMAT || c.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "{} is not a version {MODEL_FORMAT_VERSION} model container",
            path.display()
        )));
    }
    Ok(c)
}
