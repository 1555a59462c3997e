//! Evaluation reports: key:value text plus a JSON sidecar, stored under
//! content-addressed names so nothing is ever overwritten.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{format_err, io_err, Result};

/// Per-query results; hits are 0 or 100 so aggregates are plain means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub caption: String,
    pub shape_id: String,
    pub iou: f64,
    pub r_precision: f64,
    pub class_acc: f64,
    pub color_acc: f64,
    /// Set when nothing cleared the occupancy threshold.
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub corpus_id: String,
    pub checkpoints: BTreeMap<String, String>,
    pub config_hash: String,
    pub wall_clock_secs: f64,
    pub items: Vec<ItemMetrics>,
    pub aggregates: BTreeMap<String, f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl MetricReport {
    /// Builds the report; aggregates are the means of the per-item values.
    pub fn new(
        label: &str,
        corpus_id: &str,
        checkpoints: BTreeMap<String, String>,
        config_hash: &str,
        wall_clock_secs: f64,
        items: Vec<ItemMetrics>,
    ) -> Self {
        let mut aggregates = BTreeMap::new();
        aggregates.insert("iou".to_string(), mean(items.iter().map(|i| i.iou)));
        aggregates.insert("r_precision".to_string(), mean(items.iter().map(|i| i.r_precision)));
        aggregates.insert("class_acc".to_string(), mean(items.iter().map(|i| i.class_acc)));
        aggregates.insert("color_acc".to_string(), mean(items.iter().map(|i| i.color_acc)));
        aggregates.insert(
            "empty".to_string(),
            mean(items.iter().map(|i| f64::from(u8::from(i.empty)))),
        );
        Self {
            label: label.to_string(),
            corpus_id: corpus_id.to_string(),
            checkpoints,
            config_hash: config_hash.to_string(),
            wall_clock_secs,
            items,
            aggregates,
        }
    }

    pub fn aggregate(&self, key: &str) -> f64 {
        self.aggregates.get(key).copied().unwrap_or(f64::NAN)
    }

    /// Summary lines `key: value`, aggregates first, then one line per item.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "label: {}", self.label);
        let _ = writeln!(s, "corpus: {}", self.corpus_id);
        let _ = writeln!(s, "config_hash: {}", self.config_hash);
        for (k, v) in &self.checkpoints {
            let _ = writeln!(s, "checkpoint.{k}: {v}");
        }
        let _ = writeln!(s, "wall_clock_secs: {:.3}", self.wall_clock_secs);
        let _ = writeln!(s, "items: {}", self.items.len());
        for (k, v) in &self.aggregates {
            let _ = writeln!(s, "{k}: {v:.6}");
        }
        for (i, it) in self.items.iter().enumerate() {
            let _ = writeln!(
                s,
                "item.{i}: shape={} iou={:.6} r_precision={} class_acc={} color_acc={} empty={} caption={:?}",
                it.shape_id, it.iou, it.r_precision, it.class_acc, it.color_acc, it.empty, it.caption
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| format_err("report", e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| format_err("report", e.to_string()))
    }

    /// Writes `report-<label>-<hash>.txt` and `.json` under `dir`, where the hash
    /// covers the JSON content. Existing files with that name are left alone.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let json = self.to_json()?;
        let digest = hex(&Sha256::digest(json.as_bytes()));
        let stem = format!("report-{}-{}", self.label, &digest[..16]);
        let txt = dir.join(format!("{stem}.txt"));
        let side = dir.join(format!("{stem}.json"));
        for (path, body) in [(&txt, self.to_text()), (&side, json)] {
            if !path.exists() {
                std::fs::write(path, body).map_err(io_err(path))?;
            }
        }
        Ok((txt, side))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(iou: f64, hit: bool) -> ItemMetrics {
        ItemMetrics {
            caption: "a red table".into(),
            shape_id: "s00001".into(),
            iou,
            r_precision: if hit { 100.0 } else { 0.0 },
            class_acc: 100.0,
            color_acc: 0.0,
            empty: false,
        }
    }

    #[test]
    fn aggregates_are_means_and_json_round_trips() {
        let r = MetricReport::new(
            "full",
            "c",
            BTreeMap::new(),
            "h",
            1.5,
            vec![item(0.25, true), item(0.5, false), item(0.1, true)],
        );
        assert!((r.aggregate("iou") - (0.25 + 0.5 + 0.1) / 3.0).abs() < 1e-12);
        assert!((r.aggregate("r_precision") - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(MetricReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!(r.to_text().contains("iou: 0.283333"));
    }

    #[test]
    fn reports_are_never_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let a = MetricReport::new("x", "c", BTreeMap::new(), "h", 1.0, vec![item(0.3, true)]);
        let b = MetricReport::new("x", "c", BTreeMap::new(), "h", 2.0, vec![item(0.3, true)]);
        let (pa, _) = a.write(dir.path()).unwrap();
        let (pb, _) = b.write(dir.path()).unwrap();
        assert_ne!(pa, pb);
        assert_eq!(a.write(dir.path()).unwrap().0, pa);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 4);
    }
}
