//! Evaluation harnesses: token substitution, teacher-forced accuracy, held-out
//! likelihood, sampling throughput and per-epoch convergence series.

use std::collections::BTreeMap;
use std::time::Instant;

use ctf_tensor::SeedStream;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{clustermap_fingerprint, tensors_fingerprint, tokenizer_fingerprint};
use crate::clustering::{ClusterMap, Provenance};
use crate::data::{Image, LabeledDataset};
use crate::error::{CtfError, Result};
use crate::model::{
    autoregressive_batch, batch_loss, forward_logits, stage2_batch, ModelKind, TransformerConfig, TransformerParams,
    TrunkConfig,
};
use crate::pipeline::{
    model_config, sample_autoregressive, sample_fine, train_on_tokens, SamplerConfig, TokenizedDataset, TrainConfig,
};
use crate::tokenizer::{decode_tokens, tokenize, TokenGrid, TokenizerParams};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub series: BTreeMap<String, Vec<f64>>,
    /// Digests of every input (parameters, cluster map, tokenizer, dataset seeds).
    pub fingerprint: BTreeMap<String, String>,
    pub duration_secs: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    fn new(metric: &str) -> Self {
        Self { metric: metric.into(), ..Default::default() }
    }

    pub fn value(&self, key: &str) -> Result<f64> {
        self.values.get(key).copied().ok_or_else(|| CtfError::MissingArtifact(format!("report value {key}")))
    }

    fn finish(mut self, start: Instant) -> Self {
        self.duration_secs = start.elapsed().as_secs_f64();
        self
    }
}

fn dataset_fingerprint(ds: &LabeledDataset) -> String {
    format!("{}:seed={}:n={}:classes={}", ds.split.name(), ds.seed, ds.len(), ds.class_count)
}

fn tokens_fingerprint(tokens: &TokenizedDataset) -> String {
    let flat: Vec<u8> = tokens
        .grids
        .iter()
        .zip(&tokens.labels)
        .flat_map(|(g, &l)| std::iter::once(l as u32).chain(g.tokens.iter().map(|&t| t as u32)))
        .flat_map(u32::to_le_bytes)
        .collect();
    crate::checkpoint::digest(&flat)
}

fn params_fingerprint(p: &TransformerParams) -> String {
    tensors_fingerprint(&p.named_tensors())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubstitutionMode {
    /// Each token replaced by a different member of its cluster (singletons keep the token).
    SameCluster,
    /// Each token replaced by a uniform draw from the whole codebook.
    AnyToken,
    Identity,
}

impl SubstitutionMode {
    pub fn name(self) -> &'static str {
        match self {
            SubstitutionMode::SameCluster => "same_cluster",
            SubstitutionMode::AnyToken => "any_token",
            SubstitutionMode::Identity => "identity",
        }
    }
}

pub struct Substitution {
    pub report: EvalReport,
    pub per_image_mse: Vec<f64>,
    /// Rows of (original | reconstruction | substituted) for the first few images.
    pub grid: Image,
}

pub fn substitute_tokens(tokens: &TokenGrid, map: &ClusterMap, mode: SubstitutionMode, rng: &mut SeedStream) -> Result<TokenGrid> {
    let out = tokens
        .tokens
        .iter()
        .map(|&t| -> Result<usize> {
            Ok(match mode {
                SubstitutionMode::Identity => t,
                SubstitutionMode::AnyToken => rng.below(map.k()),
                SubstitutionMode::SameCluster => {
                    let members = map.members(map.phi(t)?)?;
                    if members.len() == 1 {
                        t
                    } else {
                        let pick = rng.below(members.len() - 1);
                        let pos = members.binary_search(&t).map_err(|_| CtfError::Index(format!("token {t} not in its cluster")))?;
                        members[if pick >= pos { pick + 1 } else { pick }]
                    }
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TokenGrid::new(tokens.h, tokens.w, out)
}

/// Mean pixel MSE between the decode of substituted tokens and the unmodified decode.
pub fn substitution_experiment(
    dataset: &LabeledDataset,
    tokenizer: &TokenizerParams,
    map: &ClusterMap,
    mode: SubstitutionMode,
    seed: u64,
) -> Result<Substitution> {
    let start = Instant::now();
    if map.k() != tokenizer.codebook.k() {
        return Err(CtfError::Config(format!("cluster map over K={} for a codebook of {}", map.k(), tokenizer.codebook.k())));
    }
    let root = SeedStream::new(seed).split("substitution").split(mode.name());
    let mut per_image = Vec::with_capacity(dataset.len());
    let mut rows = Vec::new();
    for (i, im) in dataset.images.iter().enumerate() {
        let tokens = tokenize(im, tokenizer)?;
        let base = decode_tokens(&tokens, tokenizer)?;
        let swapped = substitute_tokens(&tokens, map, mode, &mut root.split_index(i as u64))?;
        let out = decode_tokens(&swapped, tokenizer)?;
        per_image.push(out.mse(&base));
        if rows.len() < 8 {
            rows.push(Image::hstack(&[im.clone(), base, out], 1)?);
        }
    }
    let mut report = EvalReport::new("substitution_mse");
    report.values.insert("mse".into(), per_image.iter().sum::<f64>() / per_image.len().max(1) as f64);
    report.values.insert("images".into(), per_image.len() as f64);
    report.fingerprint.insert("tokenizer".into(), tokenizer_fingerprint(tokenizer));
    report.fingerprint.insert("clustermap".into(), clustermap_fingerprint(map));
    report.fingerprint.insert("dataset".into(), dataset_fingerprint(dataset));
    report.fingerprint.insert("mode".into(), mode.name().into());
    report.fingerprint.insert("seed".into(), seed.to_string());
    if map.provenance != Provenance::Kmeans {
        report.notes.push(format!("cluster map provenance is {:?}, not k-means", map.provenance));
    }
    Ok(Substitution { report: report.finish(start), per_image_mse: per_image, grid: Image::vstack(&rows, 1)? })
}

/// Teacher-forced accuracies of one model on token grids.
///
/// Stage 1 reports `accuracy` over coarse labels. Stage 2 reports fine `accuracy` given the true
/// coarse grid and `masked_accuracy` with the argmax restricted to the true cluster. The baseline
/// reports fine `accuracy` and `coarse_accuracy`: the argmax of its next-token distribution
/// summed within clusters, compared with the true coarse label.
pub fn token_accuracy(params: &TransformerParams, tokens: &TokenizedDataset, map: Option<&ClusterMap>) -> Result<EvalReport> {
    let start = Instant::now();
    let kind = params.config.kind;
    let mut report = EvalReport::new(&format!("{}_token_accuracy", kind.name()));
    let counts = accuracy_counts(params, tokens, map)?;
    let total = counts.total as f64;
    report.values.insert("accuracy".into(), counts.correct as f64 / total);
    report.values.insert("positions".into(), total);
    match kind {
        ModelKind::Stage2 => {
            report.values.insert("masked_accuracy".into(), counts.masked as f64 / total);
        }
        ModelKind::Baseline if map.is_some() => {
            report.values.insert("coarse_accuracy".into(), counts.coarse as f64 / total);
        }
        _ => {}
    }
    report.fingerprint.insert("params".into(), params_fingerprint(params));
    report.fingerprint.insert("tokens".into(), tokens_fingerprint(tokens));
    if let Some(m) = map {
        report.fingerprint.insert("clustermap".into(), clustermap_fingerprint(m));
    }
    Ok(report.finish(start))
}

#[derive(Default)]
struct Counts {
    correct: usize,
    masked: usize,
    coarse: usize,
    total: usize,
}

const EVAL_BATCH: usize = 32;

fn accuracy_counts(params: &TransformerParams, tokens: &TokenizedDataset, map: Option<&ClusterMap>) -> Result<Counts> {
    let kind = params.config.kind;
    let need_map = || map.ok_or_else(|| CtfError::Config(format!("{} accuracy needs a cluster map", kind.name())));
    let coarse: Vec<Vec<usize>> = match kind {
        ModelKind::Baseline => match map {
            Some(m) => tokens.coarse(m)?.into_iter().map(|g| g.tokens).collect(),
            None => Vec::new(),
        },
        _ => tokens.coarse(need_map()?)?.into_iter().map(|g| g.tokens).collect(),
    };
    let v = params.config.output_vocab;
    let n = params.config.seq_len;
    let mut c = Counts::default();
    let indices: Vec<usize> = (0..tokens.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let classes: Vec<usize> = chunk.iter().map(|&i| tokens.labels[i]).collect();
        let fine: Vec<&[usize]> = chunk.iter().map(|&i| tokens.grids[i].tokens.as_slice()).collect();
        let crs: Vec<&[usize]> = if coarse.is_empty() { Vec::new() } else { chunk.iter().map(|&i| coarse[i].as_slice()).collect() };
        let (layout, targets, offset, rows) = match kind {
            ModelKind::Stage1 => {
                let b = autoregressive_batch(params, &crs, &classes)?;
                (b.layout, b.targets, 0, n)
            }
            ModelKind::Baseline => {
                let b = autoregressive_batch(params, &fine, &classes)?;
                (b.layout, b.targets, 0, n)
            }
            ModelKind::Stage2 => {
                let b = stage2_batch(params, &crs, &fine, &classes, None)?;
                (b.layout, b.targets, 1, n + 1)
            }
        };
        let logits = forward_logits(params, &layout)?;
        for (bi, _) in chunk.iter().enumerate() {
            for pos in 0..n {
                let r = bi * rows + offset + pos;
                let row = &logits.data()[r * v..(r + 1) * v];
                let target = targets[r];
                if argmax(row) == target {
                    c.correct += 1;
                }
                if kind == ModelKind::Stage2 {
                    let members = need_map()?.members(crs[bi][pos])?;
                    let best = members.iter().copied().max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
                    if best == target {
                        c.masked += 1;
                    }
                }
                if kind == ModelKind::Baseline {
                    if let Some(m) = map {
                        if coarse_argmax(row, m) == crs[bi][pos] {
                            c.coarse += 1;
                        }
                    }
                }
                c.total += 1;
            }
        }
    }
    Ok(c)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cluster with the largest total probability under softmax(row).
fn coarse_argmax(row: &[f32], map: &ClusterMap) -> usize {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut mass = vec![0.0f64; map.m()];
    for (i, &v) in row.iter().enumerate() {
        mass[map.assignment()[i]] += (v as f64 - max).exp();
    }
    let mut best = 0;
    for (c, &m) in mass.iter().enumerate() {
        if m > mass[best] {
            best = c;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NllMode {
    Baseline,
    CtfMasked,
    /// Rejected: unrestricted stage-2 probabilities do not form a joint over fine sequences.
    CtfUnrestricted,
}

/// Models evaluated by [`nll_report`].
pub struct NllModels<'a> {
    pub stage1: Option<&'a TransformerParams>,
    pub stage2: Option<&'a TransformerParams>,
    pub baseline: Option<&'a TransformerParams>,
}

/// Held-out negative log-likelihood in nats per token.
pub fn nll_report(models: &NllModels, tokens: &TokenizedDataset, map: Option<&ClusterMap>, mode: NllMode) -> Result<EvalReport> {
    let start = Instant::now();
    let mut report = EvalReport::new(&format!("nll_{}", match mode {
        NllMode::Baseline => "baseline",
        NllMode::CtfMasked => "ctf_masked",
        NllMode::CtfUnrestricted => "ctf_unrestricted",
    }));
    let indices: Vec<usize> = (0..tokens.len()).collect();
    match mode {
        NllMode::CtfUnrestricted => {
            return Err(CtfError::Config(
                "joint NLL needs the cluster-restricted stage-2 likelihood; unrestricted stage-2 probabilities \
                 put mass on tokens outside the given cluster, so they are not a normalised joint over fine sequences"
                    .into(),
            ))
        }
        NllMode::Baseline => {
            let p = models.baseline.ok_or_else(|| CtfError::MissingArtifact("baseline model".into()))?;
            let mut total = 0.0;
            for chunk in indices.chunks(EVAL_BATCH) {
                let fine: Vec<&[usize]> = chunk.iter().map(|&i| tokens.grids[i].tokens.as_slice()).collect();
                let classes: Vec<usize> = chunk.iter().map(|&i| tokens.labels[i]).collect();
                total += batch_loss(p, &autoregressive_batch(p, &fine, &classes)?)? as f64 * chunk.len() as f64;
            }
            report.values.insert("nll".into(), total / tokens.len() as f64);
            report.fingerprint.insert("baseline".into(), params_fingerprint(p));
        }
        NllMode::CtfMasked => {
            let s1 = models.stage1.ok_or_else(|| CtfError::MissingArtifact("stage1 model".into()))?;
            let s2 = models.stage2.ok_or_else(|| CtfError::MissingArtifact("stage2 model".into()))?;
            let map = map.ok_or_else(|| CtfError::Config("ctf_masked NLL needs a cluster map".into()))?;
            let coarse: Vec<Vec<usize>> = tokens.coarse(map)?.into_iter().map(|g| g.tokens).collect();
            let members = |c: usize| -> Result<Vec<usize>> { Ok(map.members(c)?.to_vec()) };
            let (mut coarse_total, mut fine_total) = (0.0, 0.0);
            for chunk in indices.chunks(EVAL_BATCH) {
                let fine: Vec<&[usize]> = chunk.iter().map(|&i| tokens.grids[i].tokens.as_slice()).collect();
                let crs: Vec<&[usize]> = chunk.iter().map(|&i| coarse[i].as_slice()).collect();
                let classes: Vec<usize> = chunk.iter().map(|&i| tokens.labels[i]).collect();
                let w = chunk.len() as f64;
                coarse_total += batch_loss(s1, &autoregressive_batch(s1, &crs, &classes)?)? as f64 * w;
                fine_total += batch_loss(s2, &stage2_batch(s2, &crs, &fine, &classes, Some(&members))?)? as f64 * w;
            }
            let n = tokens.len() as f64;
            report.values.insert("coarse_nll".into(), coarse_total / n);
            report.values.insert("fine_nll".into(), fine_total / n);
            report.values.insert("nll".into(), (coarse_total + fine_total) / n);
            report.fingerprint.insert("stage1".into(), params_fingerprint(s1));
            report.fingerprint.insert("stage2".into(), params_fingerprint(s2));
            report.fingerprint.insert("clustermap".into(), clustermap_fingerprint(map));
        }
    }
    report.values.insert("sequences".into(), tokens.len() as f64);
    report.fingerprint.insert("tokens".into(), tokens_fingerprint(tokens));
    Ok(report.finish(start))
}

/// Joint negative log-likelihood (nats, summed over positions) of one fine sequence under
/// the two-stage model with a cluster-restricted stage 2.
pub fn joint_nll(stage1: &TransformerParams, stage2: &TransformerParams, map: &ClusterMap, class: usize, fine: &[usize]) -> Result<f64> {
    let coarse: Vec<usize> = fine.iter().map(|&t| map.phi(t)).collect::<Result<_>>()?;
    let members = |c: usize| -> Result<Vec<usize>> { Ok(map.members(c)?.to_vec()) };
    let n = fine.len() as f64;
    let a = batch_loss(stage1, &autoregressive_batch(stage1, &[&coarse], &[class])?)? as f64;
    let b = batch_loss(stage2, &stage2_batch(stage2, &[&coarse], &[fine], &[class], Some(&members))?)? as f64;
    Ok((a + b) * n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub codebook_size: usize,
    pub clusters: usize,
    pub seq_len: usize,
    pub trunk: TrunkConfig,
    pub batch: usize,
    pub trials: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            codebook_size: 16384,
            clusters: 512,
            seq_len: 64,
            trunk: TrunkConfig { dim: 64, layers: 2, heads: 4, mlp_ratio: 4 },
            batch: 4,
            trials: 5,
            warmup: 1,
            threads: 1,
            seed: 0,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Splits `classes` over `threads` workers and runs `job` on each share.
fn run_threads<F>(classes: &[usize], threads: usize, job: F) -> Result<usize>
where
    F: Fn(&[usize]) -> Result<usize> + Sync,
{
    let share = classes.len().div_ceil(threads.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = classes.chunks(share).map(|c| s.spawn(|| job(c))).collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).sum()
    })
}

/// Sampling throughput of the baseline (N steps over a K-row head) against the two-stage
/// model (N steps over an M-row head plus one full-attention pass) on identical trunks.
pub fn throughput_bench(cfg: &BenchConfig) -> Result<EvalReport> {
    let start = Instant::now();
    let (k, m, n) = (cfg.codebook_size, cfg.clusters, cfg.seq_len);
    if cfg.trials == 0 || cfg.batch == 0 {
        return Err(CtfError::Config("bench needs at least one trial and a nonempty batch".into()));
    }
    let rng = SeedStream::new(cfg.seed);
    let classes_total = 10;
    let baseline = TransformerParams::init(TransformerConfig::baseline(k, n, classes_total, cfg.trunk.clone()), &mut rng.split("baseline"))?;
    let stage1 = TransformerParams::init(TransformerConfig::stage1(m, n, classes_total, cfg.trunk.clone()), &mut rng.split("stage1"))?;
    let stage2 = TransformerParams::init(TransformerConfig::stage2(m, k, n, classes_total, cfg.trunk.clone()), &mut rng.split("stage2"))?;
    // an arbitrary balanced partition suffices for timing
    let assignment: Vec<usize> = (0..k).map(|i| i % m).collect();
    let codebook = crate::tokenizer::Codebook::random(k, 1, &mut rng.split("codebook"))?;
    let map = ClusterMap::from_assignment(&codebook, assignment, m)?;
    let sampler = SamplerConfig { seed: cfg.seed, ..SamplerConfig::default() };
    let classes: Vec<usize> = (0..cfg.batch).map(|i| i % classes_total).collect();

    let run_baseline = |c: &[usize]| -> Result<usize> {
        let (_, steps) = sample_autoregressive(&baseline, c, sampler.temperature_stage1 as f32, Some(sampler.cfg_scale as f32), 0, sampler.seed, "baseline")?;
        Ok(steps)
    };
    let run_ctf = |c: &[usize]| -> Result<usize> {
        let (coarse, s1) = sample_autoregressive(&stage1, c, sampler.temperature_stage1 as f32, Some(sampler.cfg_scale as f32), 0, sampler.seed, "coarse")?;
        let (_, s2) = sample_fine(&stage2, &coarse, c, &map, &sampler)?;
        Ok(s1 + s2)
    };
    let workers = cfg.threads.max(1);
    let time = |job: &(dyn Fn(&[usize]) -> Result<usize> + Sync)| -> Result<(f64, usize)> {
        for _ in 0..cfg.warmup {
            run_threads(&classes, workers, job)?;
        }
        let mut secs = Vec::with_capacity(cfg.trials);
        for _ in 0..cfg.trials {
            let t = Instant::now();
            run_threads(&classes, workers, job)?;
            secs.push(t.elapsed().as_secs_f64());
        }
        // invocation count for a single sample
        let steps = job(&classes[..1])?;
        Ok((median(&mut secs), steps))
    };
    let (base_secs, base_steps) = time(&run_baseline)?;
    let (ctf_secs, ctf_steps) = time(&run_ctf)?;

    let dim = cfg.trunk.dim as f64;
    let mut report = EvalReport::new("throughput");
    let v = &mut report.values;
    v.insert("baseline_samples_per_sec".into(), cfg.batch as f64 / base_secs);
    v.insert("ctf_samples_per_sec".into(), cfg.batch as f64 / ctf_secs);
    v.insert("baseline_tokens_per_sec".into(), (cfg.batch * n) as f64 / base_secs);
    v.insert("ctf_tokens_per_sec".into(), (cfg.batch * n) as f64 / ctf_secs);
    v.insert("speedup".into(), base_secs / ctf_secs);
    v.insert("baseline_steps".into(), base_steps as f64);
    v.insert("ctf_steps".into(), ctf_steps as f64);
    v.insert("baseline_head_flops_per_step".into(), 2.0 * dim * k as f64);
    v.insert("ctf_head_flops_per_step".into(), 2.0 * dim * m as f64);
    v.insert("head_flops_ratio".into(), k as f64 / m as f64);
    v.insert("baseline_params".into(), crate::model::count_params(&baseline) as f64);
    v.insert("ctf_params".into(), (crate::model::count_params(&stage1) + crate::model::count_params(&stage2)) as f64);
    v.insert("threads".into(), workers as f64);
    v.insert("batch".into(), cfg.batch as f64);
    v.insert("trials".into(), cfg.trials as f64);
    report.fingerprint.insert("config".into(), crate::checkpoint::digest(&serde_json::to_vec(cfg)?));
    Ok(report.finish(start))
}

/// Per-epoch series for a matched stage-1 / baseline pair.
///
/// Both models are evaluated on `val` after every epoch: stage 1 by coarse accuracy, the
/// baseline by coarse-equivalent accuracy (cluster-summed argmax).
pub fn convergence_curves(
    train: &TokenizedDataset,
    val: &TokenizedDataset,
    map: &ClusterMap,
    trunk: TrunkConfig,
    train_cfg: &TrainConfig,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut report = EvalReport::new("convergence");
    for kind in [ModelKind::Stage1, ModelKind::Baseline] {
        let config = model_config(kind, train, map.k(), Some(map), trunk.clone())?;
        let mut acc = Vec::new();
        let mut hook = |e: &crate::pipeline::EpochEnd| -> Result<()> {
            let c = accuracy_counts(e.params, val, Some(map))?;
            let hits = if kind == ModelKind::Baseline { c.coarse } else { c.correct };
            acc.push(hits as f64 / c.total as f64);
            Ok(())
        };
        let (params, curve) = train_on_tokens(config, train, Some(map), train_cfg, Some(&mut hook))?;
        report.series.insert(format!("{}_coarse_accuracy", kind.name()), acc);
        report.series.insert(format!("{}_train_loss", kind.name()), curve.epoch_loss);
        report.fingerprint.insert(kind.name().into(), params_fingerprint(&params));
    }
    let s1 = &report.series["stage1_coarse_accuracy"];
    let bl = &report.series["baseline_coarse_accuracy"];
    let target = *bl.last().unwrap_or(&0.0);
    let reach = s1.iter().position(|&a| a >= target).map_or(f64::NAN, |i| (i + 1) as f64);
    report.values.insert("baseline_final_coarse_accuracy".into(), target);
    report.values.insert("stage1_final_coarse_accuracy".into(), *s1.last().unwrap_or(&0.0));
    report.values.insert("stage1_epochs_to_baseline_final".into(), reach);
    report.values.insert("epochs".into(), bl.len() as f64);
    report.fingerprint.insert("clustermap".into(), clustermap_fingerprint(map));
    report.fingerprint.insert("train_tokens".into(), tokens_fingerprint(train));
    report.fingerprint.insert("val_tokens".into(), tokens_fingerprint(val));
    report.fingerprint.insert("train_config".into(), crate::checkpoint::digest(&serde_json::to_vec(train_cfg)?));
    Ok(report.finish(start))
}
