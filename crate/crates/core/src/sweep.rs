//! Ablation sweeps: one axis of the run configuration varied over a list of values,
//! with evaluation metrics per value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterMap;
use crate::config::{ClusteringMode, RunConfig};
use crate::error::{CtfError, Result};
use crate::eval::token_accuracy;
use crate::model::{ModelKind, TransformerParams, TrunkConfig};
use crate::pipeline::{model_config, sample_coarse, sample_fine, train_on_tokens, TokenizedDataset};
use crate::tokenizer::Codebook;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Clusters,
    Stage2Size,
    Cfg,
    TopK,
    Temp1,
    Temp2,
    ClusteringMode,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 7] = [
        SweepAxis::Clusters,
        SweepAxis::Stage2Size,
        SweepAxis::Cfg,
        SweepAxis::TopK,
        SweepAxis::Temp1,
        SweepAxis::Temp2,
        SweepAxis::ClusteringMode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Clusters => "clusters",
            SweepAxis::Stage2Size => "stage2_size",
            SweepAxis::Cfg => "cfg",
            SweepAxis::TopK => "top_k",
            SweepAxis::Temp1 => "temp1",
            SweepAxis::Temp2 => "temp2",
            SweepAxis::ClusteringMode => "clustering_mode",
        }
    }

    /// Axes that only change sampling and reuse one trained model pair.
    pub fn sampling_only(self) -> bool {
        matches!(self, SweepAxis::Cfg | SweepAxis::TopK | SweepAxis::Temp1 | SweepAxis::Temp2)
    }

    /// Writes `value` into the matching field of `cfg`.
    pub fn apply(self, cfg: &mut RunConfig, value: &str) -> Result<()> {
        let bad = |what: &str| CtfError::Config(format!("{} value '{value}' is not {what}", self.name()));
        match self {
            SweepAxis::Clusters => cfg.clustering.clusters = value.parse().map_err(|_| bad("a cluster count"))?,
            SweepAxis::Stage2Size => cfg.model.stage2 = TrunkConfig::preset(value)?,
            SweepAxis::Cfg => cfg.sampler.cfg_scale = value.parse().map_err(|_| bad("a number"))?,
            SweepAxis::TopK => cfg.sampler.top_k = value.parse().map_err(|_| bad("a count"))?,
            SweepAxis::Temp1 => cfg.sampler.temperature_stage1 = value.parse().map_err(|_| bad("a number"))?,
            SweepAxis::Temp2 => cfg.sampler.temperature_stage2 = value.parse().map_err(|_| bad("a number"))?,
            SweepAxis::ClusteringMode => {
                cfg.clustering.mode = match value {
                    "kmeans" => ClusteringMode::Kmeans,
                    "random" => ClusteringMode::Random,
                    _ => return Err(bad("kmeans or random")),
                }
            }
        }
        cfg.validate()
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = CtfError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
            CtfError::Config(format!("unknown sweep axis '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Resolved base configuration.
    pub config: serde_json::Value,
    pub duration_secs: f64,
}

impl SweepReport {
    pub fn row(&self, value: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }
}

/// Tokenized data shared by every sweep point.
pub struct SweepInputs<'a> {
    pub codebook: &'a Codebook,
    pub train: &'a TokenizedDataset,
    pub val: &'a TokenizedDataset,
}

struct Pair {
    map: ClusterMap,
    stage1: Option<TransformerParams>,
    stage2: TransformerParams,
}

fn train_pair(cfg: &RunConfig, inputs: &SweepInputs, with_stage1: bool) -> Result<Pair> {
    let map = cfg.clustering.build(inputs.codebook)?;
    let k = inputs.codebook.k();
    let fit = |kind: ModelKind, trunk: &TrunkConfig| -> Result<TransformerParams> {
        let mut mc = model_config(kind, inputs.train, k, Some(&map), trunk.clone())?;
        mc.class_conditioning = kind != ModelKind::Stage2 || cfg.model.stage2_class_conditioning;
        Ok(train_on_tokens(mc, inputs.train, Some(&map), &cfg.train, None)?.0)
    };
    let stage1 = if with_stage1 { Some(fit(ModelKind::Stage1, &cfg.model.stage1)?) } else { None };
    let stage2 = fit(ModelKind::Stage2, &cfg.model.stage2)?;
    Ok(Pair { map, stage1, stage2 })
}

fn model_metrics(pair: &Pair, val: &TokenizedDataset, out: &mut BTreeMap<String, f64>) -> Result<()> {
    out.insert("clusters".into(), pair.map.m() as f64);
    out.insert("sse".into(), pair.map.sse);
    let s2 = token_accuracy(&pair.stage2, val, Some(&pair.map))?;
    out.insert("stage2_accuracy".into(), s2.value("accuracy")?);
    out.insert("stage2_masked_accuracy".into(), s2.value("masked_accuracy")?);
    if let Some(s1) = &pair.stage1 {
        out.insert("stage1_accuracy".into(), token_accuracy(s1, val, Some(&pair.map))?.value("accuracy")?);
    }
    Ok(())
}

/// Distinct fine grids and token-usage entropy (nats) over `count` generated samples.
fn sample_metrics(cfg: &RunConfig, pair: &Pair, classes: usize, count: usize, out: &mut BTreeMap<String, f64>) -> Result<()> {
    let stage1 = pair.stage1.as_ref().ok_or_else(|| CtfError::MissingArtifact("stage1 model".into()))?;
    let labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    let (coarse, _) = sample_coarse(stage1, &labels, &cfg.sampler)?;
    let (fine, _) = sample_fine(&pair.stage2, &coarse, &labels, &pair.map, &cfg.sampler)?;
    let distinct: BTreeSet<&Vec<usize>> = fine.iter().collect();
    let mut hist = BTreeMap::<usize, usize>::new();
    for &t in fine.iter().flatten() {
        *hist.entry(t).or_default() += 1;
    }
    let total = fine.iter().map(Vec::len).sum::<usize>() as f64;
    let entropy = -hist.values().map(|&c| c as f64 / total).map(|p| p * p.ln()).sum::<f64>();
    out.insert("samples".into(), count as f64);
    out.insert("distinct_grids".into(), distinct.len() as f64);
    out.insert("distinct_tokens".into(), hist.len() as f64);
    out.insert("token_entropy".into(), entropy);
    Ok(())
}

/// Runs `axis` over `values`. Model-shaping axes retrain per value; sampling axes train one
/// model pair from the base configuration and only resample.
pub fn ablation_sweep(base: &RunConfig, axis: SweepAxis, values: &[String], inputs: &SweepInputs) -> Result<SweepReport> {
    let start = Instant::now();
    if values.is_empty() {
        return Err(CtfError::Config(format!("sweep over {axis} needs at least one value")));
    }
    base.validate()?;
    // resolve every point before training anything
    let points: Vec<RunConfig> = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            axis.apply(&mut c, v)?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let classes = inputs.train.class_count;
    let count = base.eval.samples.max(1);
    let shared = if axis.sampling_only() { Some(train_pair(base, inputs, true)?) } else { None };
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&points) {
        let mut metrics = BTreeMap::new();
        match &shared {
            Some(pair) => {
                sample_metrics(cfg, pair, classes, count, &mut metrics)?;
            }
            None => {
                let pair = train_pair(cfg, inputs, axis != SweepAxis::Stage2Size)?;
                model_metrics(&pair, inputs.val, &mut metrics)?;
                if pair.stage1.is_some() {
                    sample_metrics(cfg, &pair, classes, count, &mut metrics)?;
                }
            }
        }
        rows.push(SweepRow { value: value.clone(), metrics });
    }
    Ok(SweepReport { axis, rows, config: base.to_value(), duration_secs: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in SweepAxis::ALL {
            assert_eq!(a.name().parse::<SweepAxis>().unwrap(), a);
            assert_eq!(serde_json::to_value(a).unwrap(), a.name());
        }
        assert!("nope".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn apply_sets_fields_and_validates() {
        let mut cfg = RunConfig::default();
        SweepAxis::TopK.apply(&mut cfg, "32").unwrap();
        assert_eq!(cfg.sampler.top_k, 32);
        SweepAxis::ClusteringMode.apply(&mut cfg, "random").unwrap();
        assert_eq!(cfg.clustering.mode, ClusteringMode::Random);
        SweepAxis::Stage2Size.apply(&mut cfg, "tiny").unwrap();
        assert_eq!(cfg.model.stage2.dim, 32);
        assert!(SweepAxis::Temp1.apply(&mut cfg, "0").is_err());
        assert!(SweepAxis::Clusters.apply(&mut cfg, "many").is_err());
    }
}
