//! JSON metric reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stats::{paired_t_test, TTest};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub metric: String,
    pub trials: Vec<f64>,
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_test: Option<TTest>,
    pub config_hash: String,
    pub dataset_hash: String,
}

impl MetricsReport {
    pub fn new(task: &str, metric: &str, trials: Vec<f64>, config_hash: String, dataset_hash: String) -> Self {
        let mean = trials.iter().sum::<f64>() / trials.len().max(1) as f64;
        MetricsReport {
            task: task.into(),
            metric: metric.into(),
            trials,
            mean,
            t_test: None,
            config_hash,
            dataset_hash,
        }
    }

    /// Attaches a paired t-test of these trials against `baseline`'s.
    pub fn compare(&mut self, baseline: &MetricsReport) -> Result<TTest> {
        if baseline.metric != self.metric {
            return Err(Error::InvalidArgument(format!(
                "cannot compare {} with {}",
                self.metric, baseline.metric
            )));
        }
        let t = paired_t_test(&self.trials, &baseline.trials)?;
        self.t_test = Some(t);
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_round_trip() {
        let r = MetricsReport::new("nc", "auc", vec![0.5, 0.7, 0.9], "c".into(), "d".into());
        assert!((r.mean - 0.7).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        r.save(&p).unwrap();
        assert_eq!(MetricsReport::load(&p).unwrap(), r);
    }
}
