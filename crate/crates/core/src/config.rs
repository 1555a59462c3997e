//! Run configuration. Files are TOML with sectioned keys (`causal.t = 0.0498`);
//! unknown keys are rejected and every field has a default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_shapes: usize,
    pub captions_per_shape: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_shapes: 512,
            captions_per_shape: 3,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared feature width `d`.
    pub d: usize,
    pub word_dim: usize,
    pub max_len: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub ff_hidden: usize,
    /// Hidden width of the five-layer implicit decoders.
    pub dec_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            word_dim: 64,
            max_len: 24,
            heads: 4,
            text_layers: 2,
            ff_hidden: 256,
            dec_hidden: 64,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub ae_batch: usize,
    /// Points sampled per shape and step; the full grid when ≥ r³.
    pub ae_points: usize,
    /// Share of sampled points drawn from occupied cells.
    pub ae_occupied_fraction: f64,
    pub joint_epochs: usize,
    pub joint_lr: f64,
    pub joint_batch: usize,
    /// Weight of the text→shape direction in the joint loss.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            ae_epochs: 25,
            ae_lr: 2e-3,
            ae_batch: 8,
            ae_occupied_fraction: 0.25,
            ae_points: 1024,
            joint_epochs: 20,
            joint_lr: 1e-3,
            joint_batch: 32,
            alpha: 0.5,
            seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgraphConfig {
    /// Shape–shape neighbours kept per shape.
    pub k: usize,
    /// Shape priors returned per query.
    pub m: usize,
}

impl Default for KgraphConfig {
    fn default() -> Self {
        Self { k: 5, m: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CausalConfig {
    /// Magnitude threshold; dimensions with `|x| > t` are kept.
    pub t: f64,
    /// Number of samplings (heads and index blocks).
    pub n: usize,
    /// Weight of the per-head cosine alignment term added to the selector loss.
    pub align_weight: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for CausalConfig {
    fn default() -> Self {
        Self {
            t: (-3.0f64).exp(),
            n: 5,
            align_weight: 1.0,
            epochs: 20,
            lr: 1e-3,
            batch: 32,
            seed: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseConfig {
    /// Self-attention blocks over `{f_t, F'_p}`.
    pub shape_blocks: usize,
    /// Cross-attention blocks from points to attributes.
    pub attr_blocks: usize,
    /// Reduced width `d̂` of the point/attribute features.
    pub d_hat: usize,
    pub ae_weight: f64,
    pub reg_weight: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub points: usize,
    /// Share of sampled points drawn from occupied cells.
    pub occupied_fraction: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self {
            shape_blocks: 2,
            attr_blocks: 2,
            d_hat: 64,
            ae_weight: 1.0,
            reg_weight: 0.1,
            epochs: 12,
            lr: 5e-4,
            batch: 8,
            points: 512,
            occupied_fraction: 0.5,
            threshold: 0.5,
            seed: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityConfig {
    pub d_z: usize,
    pub hidden: usize,
    pub sigma: f64,
    pub eta_steps: Vec<f64>,
    /// Noise draws per item per step (`l` in the min-over-draws loss).
    pub draws: usize,
    pub noise_std: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            d_z: 32,
            hidden: 128,
            sigma: 4.0,
            eta_steps: vec![1.0, 2.0, 3.0],
            draws: 8,
            noise_std: 1.0,
            epochs: 10,
            batch: 16,
            lr: 1e-3,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub shape_prior: bool,
    pub attr_prior: bool,
    pub causal: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            shape_prior: true,
            attr_prior: true,
            causal: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub r_precision_top: usize,
    pub retrieval_gallery: usize,
    pub retrieval_top: usize,
    /// Held-out captions evaluated per report; 0 means all.
    pub max_queries: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            r_precision_top: 20,
            retrieval_gallery: 128,
            retrieval_top: 10,
            max_queries: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub kgraph: KgraphConfig,
    pub causal: CausalConfig,
    pub fuse: FuseConfig,
    pub diversity: DiversityConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Applies `section.key=value` overrides, as given on a command line.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| CoreError::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("override `{o}` is not key=value")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| CoreError::Config(format!("override key `{key}` needs a section")))?;
            let parsed: toml::Table = toml::from_str(&format!("v = {}", value.trim()))
                .or_else(|_| toml::from_str(&format!("v = {:?}", value.trim())))
                .map_err(|e| CoreError::Config(e.to_string()))?;
            let sec = table
                .get_mut(section)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| CoreError::Config(format!("unknown section `{section}`")))?;
            sec.insert(field.to_string(), parsed["v"].clone());
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CoreError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    // Negated comparisons so NaN fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        let m = &self.model;
        if m.heads == 0 || !m.d.is_multiple_of(m.heads) {
            return bad(format!(
                "model.d = {} is not divisible by model.heads = {}",
                m.d, m.heads
            ));
        }
        if !self.fuse.d_hat.is_multiple_of(m.heads) {
            return bad(format!(
                "fuse.d_hat = {} is not divisible by model.heads",
                self.fuse.d_hat
            ));
        }
        if !(self.causal.t > 0.0) {
            return bad("causal.t must be positive".into());
        }
        if self.causal.n == 0 || self.kgraph.m == 0 || self.kgraph.k == 0 {
            return bad("causal.n, kgraph.m and kgraph.k must be positive".into());
        }
        if !(self.diversity.sigma > 0.0) || self.diversity.eta_steps.is_empty() {
            return bad("diversity.sigma must be positive and diversity.eta_steps nonempty".into());
        }
        if !(0.0..=1.0).contains(&self.pretrain.alpha) || !(0.0..=1.0).contains(&self.fuse.threshold) {
            return bad("pretrain.alpha and fuse.threshold must lie in [0, 1]".into());
        }
        if self.eval.retrieval_top == 0 || self.eval.r_precision_top == 0 {
            return bad("eval top-n values must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization; independent of key order in the source file.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Hash of the sections that determine `stage`'s artifact: its own section
    /// plus those of every stage it consumes. Used as a cache key.
    pub fn stage_key(&self, stage: Stage) -> String {
        let mut parts: Vec<Vec<u8>> = Vec::new();
        let mut add = |v: serde_json::Result<Vec<u8>>| parts.push(v.expect("config serializes"));
        add(serde_json::to_vec(&self.data));
        if stage >= Stage::RepNet {
            add(serde_json::to_vec(&self.model));
            add(serde_json::to_vec(&self.pretrain));
        }
        if stage >= Stage::Graph {
            add(serde_json::to_vec(&self.kgraph));
        }
        if stage >= Stage::Selector {
            add(serde_json::to_vec(&self.causal));
        }
        if stage >= Stage::Generator {
            add(serde_json::to_vec(&self.fuse));
            add(serde_json::to_vec(&self.ablation));
        }
        if stage >= Stage::Latent {
            add(serde_json::to_vec(&self.diversity));
        }
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p);
        }
        hex(&h.finalize())
    }
}

/// Pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Corpus,
    RepNet,
    Graph,
    Selector,
    Generator,
    Latent,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Corpus => "corpus",
            Self::RepNet => "repnet",
            Self::Graph => "graph",
            Self::Selector => "selector",
            Self::Generator => "generator",
            Self::Latent => "latent",
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
