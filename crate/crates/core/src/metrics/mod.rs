//! Quantitative evaluation: FID over Gaussian-fitted features, pairwise L2
//! variety, histogram mutual information, IoU, normalized Hausdorff distance
//! and COCO-style mAP.

pub mod detection;
pub mod distance;
pub mod features;
pub mod fid;
pub mod masks;
pub mod mi;

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Named scalar results plus the configuration that produced them.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<(String, f64)>,
    pub config_hash: String,
    pub dataset_ids: Vec<String>,
}

impl MetricReport {
    pub fn new(config_hash: &str, dataset_ids: &[String]) -> Self {
        MetricReport {
            entries: Vec::new(),
            config_hash: config_hash.to_string(),
            dataset_ids: dataset_ids.to_vec(),
        }
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(CoreError::numeric(format!("metric {name} is not finite: {value}")));
        }
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Line-oriented text form: `name = value` plus header keys.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("config_hash = {}\n", self.config_hash));
        for id in &self.dataset_ids {
            out.push_str(&format!("dataset = {id}\n"));
        }
        for (name, value) in &self.entries {
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trips_and_rejects_non_finite() {
        let mut r = MetricReport::new("abc", &["toy".to_string()]);
        r.insert("fid", 12.5).unwrap();
        assert!(r.insert("bad", f64::NAN).is_err());
        let text = r.to_text();
        assert!(text.contains("fid = 12.5"));
        let json = r.to_json().unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.get("fid"), Some(12.5));
    }
}
