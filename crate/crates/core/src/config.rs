//! Run configuration: one JSON document with a section per stage of the pipeline.
//! Every field has a default and unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, random_clustering, ClusterMap};
use crate::error::{CtfError, Result};
use crate::eval::BenchConfig;
use crate::model::TrunkConfig;
use crate::pipeline::{SamplerConfig, TrainConfig};
use crate::tokenizer::{Codebook, TokenizerConfig};

/// Codebook entries per cluster at full scale (16384 codewords, 512 clusters).
pub const CLUSTER_RATIO: usize = 32;
pub const FULL_SCALE_CODEBOOK: usize = 16384;
pub const FULL_SCALE_CLUSTERS: usize = FULL_SCALE_CODEBOOK / CLUSTER_RATIO;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { classes: 10, train_per_class: 50, val_per_class: 20, height: 32, width: 32, seed: 7 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringMode {
    Kmeans,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringConfig {
    /// M
    pub clusters: usize,
    pub mode: ClusteringMode,
    pub max_iters: usize,
    /// Relative SSE change below which Lloyd iterations stop.
    pub tol: f64,
    pub seed: u64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self { clusters: 16, mode: ClusteringMode::Kmeans, max_iters: 100, tol: 1e-6, seed: 0 }
    }
}

impl ClusteringConfig {
    pub fn build(&self, codebook: &Codebook) -> Result<ClusterMap> {
        if self.clusters > codebook.k() {
            return Err(CtfError::Config(format!("{} clusters for a codebook of {} entries", self.clusters, codebook.k())));
        }
        match self.mode {
            ClusteringMode::Kmeans => kmeans(codebook, self.clusters, self.seed, self.max_iters, self.tol),
            ClusteringMode::Random => random_clustering(codebook, self.clusters, self.seed),
        }
    }
}

/// Trunk shape per model kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stage1: TrunkConfig,
    pub stage2: TrunkConfig,
    pub baseline: TrunkConfig,
    /// When false, stage 2 sees only the coarse sequence (null class row, no guidance).
    pub stage2_class_conditioning: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let small = TrunkConfig { dim: 64, layers: 2, heads: 4, mlp_ratio: 4 };
        Self { stage1: small.clone(), stage2: small.clone(), baseline: small, stage2_class_conditioning: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Images drawn by `sample` and per sweep point; classes cycle.
    pub samples: usize,
    /// Validation images used by the substitution experiment (0 = all).
    pub substitution_images: usize,
    pub seed: u64,
    pub bench: BenchConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 20, substitution_images: 0, seed: 0, bench: BenchConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub clustering: ClusteringConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

fn check_trunk(name: &str, t: &TrunkConfig) -> Result<()> {
    if t.dim == 0 || t.layers == 0 || t.heads == 0 || t.mlp_ratio == 0 {
        return Err(CtfError::Config(format!("model.{name}: every trunk size must be positive")));
    }
    if t.dim % t.heads != 0 {
        return Err(CtfError::Config(format!("model.{name}: dim {} not divisible by {} heads", t.dim, t.heads)));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CtfError::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CtfError::MissingArtifact(format!("config file {}", path.display())));
        }
        Self::from_json(&fs::read_to_string(path).map_err(|e| CtfError::io(path, e))?)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serialises")
    }

    /// Checks every cross-field constraint before any compute starts.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.classes < 2 {
            return Err(CtfError::Config(format!("data.classes must be at least 2, got {}", d.classes)));
        }
        if d.train_per_class == 0 {
            return Err(CtfError::Config("data.train_per_class must be positive".into()));
        }
        let t = &self.tokenizer;
        if t.patch == 0 || d.height % t.patch != 0 || d.width % t.patch != 0 {
            return Err(CtfError::Config(format!("{}x{} images are not divisible by patch {}", d.height, d.width, t.patch)));
        }
        if t.codebook_size < 2 || t.latent_dim == 0 || t.batch_size == 0 {
            return Err(CtfError::Config("tokenizer needs codebook_size ≥ 2, latent_dim ≥ 1 and batch_size ≥ 1".into()));
        }
        // the upper bound on M depends on the codebook actually clustered, which may be imported
        if self.clustering.clusters == 0 {
            return Err(CtfError::Config("clustering.clusters must be positive".into()));
        }
        check_trunk("stage1", &self.model.stage1)?;
        check_trunk("stage2", &self.model.stage2)?;
        check_trunk("baseline", &self.model.baseline)?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.sampler.top_k > t.codebook_size {
            return Err(CtfError::Config(format!("sampler.top_k {} exceeds the codebook size", self.sampler.top_k)));
        }
        if self.eval.bench.trials == 0 || self.eval.bench.batch == 0 {
            return Err(CtfError::Config("eval.bench needs trials ≥ 1 and batch ≥ 1".into()));
        }
        Ok(())
    }

    /// Tokens per image, N.
    pub fn seq_len(&self) -> usize {
        (self.data.height / self.tokenizer.patch) * (self.data.width / self.tokenizer.patch)
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    /// Replaces the seed of every section.
    pub seed: Option<u64>,
    pub clusters: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub temp1: Option<f64>,
    pub temp2: Option<f64>,
    pub top_k: Option<usize>,
    pub cluster_mask: Option<bool>,
    pub epochs: Option<usize>,
    /// Trunk preset applied to all three model kinds.
    pub model_size: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.data.seed = s;
            cfg.tokenizer.seed = s;
            cfg.clustering.seed = s;
            cfg.train.seed = s;
            cfg.sampler.seed = s;
            cfg.eval.seed = s;
            cfg.eval.bench.seed = s;
        }
        if let Some(m) = self.clusters {
            cfg.clustering.clusters = m;
        }
        if let Some(v) = self.cfg_scale {
            cfg.sampler.cfg_scale = v;
        }
        if let Some(v) = self.temp1 {
            cfg.sampler.temperature_stage1 = v;
        }
        if let Some(v) = self.temp2 {
            cfg.sampler.temperature_stage2 = v;
        }
        if let Some(v) = self.top_k {
            cfg.sampler.top_k = v;
        }
        if let Some(v) = self.cluster_mask {
            cfg.sampler.cluster_mask = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(name) = &self.model_size {
            let t = TrunkConfig::preset(name)?;
            cfg.model = ModelConfig { stage1: t.clone(), stage2: t.clone(), baseline: t, ..cfg.model.clone() };
        }
        cfg.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [r#"{"bogus": 1}"#, r#"{"train": {"epochs": 2, "lr": 0.1}}"#, r#"{"sampler": {"cfg": 2}}"#] {
            assert!(matches!(RunConfig::from_json(doc), Err(CtfError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3}, "clustering": {"mode": "random"}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr_init, 1e-4);
        assert_eq!(cfg.clustering.mode, ClusteringMode::Random);
        assert_eq!(cfg.clustering.clusters, 16);
    }

    #[test]
    fn validation_catches_cross_field_errors() {
        assert!(RunConfig::from_json(r#"{"clustering": {"clusters": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"tokenizer": {"patch": 5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"stage1": {"dim": 30, "heads": 4}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sampler": {"temperature_stage1": 0}}"#).is_err());
    }

    #[test]
    fn overrides_apply_and_revalidate() {
        let mut cfg = RunConfig::default();
        let o = Overrides { seed: Some(9), clusters: Some(8), top_k: Some(4), model_size: Some("tiny".into()), ..Default::default() };
        o.apply(&mut cfg).unwrap();
        assert_eq!((cfg.train.seed, cfg.sampler.seed, cfg.data.seed), (9, 9, 9));
        assert_eq!(cfg.clustering.clusters, 8);
        assert_eq!(cfg.model.stage2.dim, 32);
        let bad = Overrides { model_size: Some("huge".into()), ..Default::default() };
        assert!(bad.apply(&mut cfg).is_err());
    }

    #[test]
    fn seq_len_from_patch_grid() {
        assert_eq!(RunConfig::default().seq_len(), 64);
    }
}
