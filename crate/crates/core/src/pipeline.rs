//! Training of the three models and two-stage generation with guidance,
//! temperature and top-k sampling.

use std::collections::BTreeMap;

use ctf_tensor::kernels::fast_exp;
use ctf_tensor::{cosine_lr, AdamWConfig, OptimState, SeedStream, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{clustermap_fingerprint, tokenizer_fingerprint, Checkpoint, CheckpointMeta, RngState};
use crate::clustering::ClusterMap;
use crate::data::{Image, LabeledDataset};
use crate::error::{CtfError, Result};
use crate::model::{
    apply_head, autoregressive_batch, loss_tape, register_params, stage2_batch, stage2_hidden, Batch, IncrementalDecoder, ModelKind,
    StepInput, TransformerConfig, TransformerParams, TrunkConfig,
};
use crate::tokenizer::{decode_tokens, tokenize, TokenGrid, TokenizerParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05, max_grad_norm: 1.0 }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1 as f32,
            beta2: self.beta2 as f32,
            eps: self.eps as f32,
            weight_decay: self.weight_decay as f32,
            max_grad_norm: (self.max_grad_norm > 0.0).then_some(self.max_grad_norm as f32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub optimizer: OptimizerConfig,
    /// Probability of replacing the class with the null class per training sequence.
    pub cfg_dropout: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Caps the optimizer steps; the schedule spans the capped length.
    pub max_steps: Option<usize>,
    /// Stage 2 only: normalise the loss over the members of the true cluster.
    pub restrict_stage2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr_init: 1e-4,
            lr_final: 1e-5,
            optimizer: OptimizerConfig::default(),
            cfg_dropout: 0.1,
            seed: 0,
            checkpoint_every: 0,
            max_steps: None,
            restrict_stage2: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cfg_dropout) {
            return Err(CtfError::Config(format!("cfg_dropout {} outside [0, 1)", self.cfg_dropout)));
        }
        if self.batch_size == 0 {
            return Err(CtfError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_init > 0.0 && self.lr_final >= 0.0) {
            return Err(CtfError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Token grids of a dataset under a fixed tokenizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedDataset {
    pub grids: Vec<TokenGrid>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl TokenizedDataset {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.grids.first().map_or(0, TokenGrid::len)
    }

    pub fn coarse(&self, map: &ClusterMap) -> Result<Vec<TokenGrid>> {
        self.grids.iter().map(|g| map.coarsen(g)).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            grids: indices.iter().map(|&i| self.grids[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

pub fn tokenize_dataset(dataset: &LabeledDataset, tokenizer: &TokenizerParams) -> Result<TokenizedDataset> {
    let grids = dataset.images.iter().map(|im| tokenize(im, tokenizer)).collect::<Result<Vec<_>>>()?;
    Ok(TokenizedDataset { grids, labels: dataset.labels.clone(), class_count: dataset.class_count })
}

/// Upstream artifacts a model was trained against.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub tokenizer: Option<String>,
    pub clustermap: Option<String>,
}

impl Lineage {
    pub fn of(tokenizer: Option<&TokenizerParams>, map: Option<&ClusterMap>) -> Self {
        Self { tokenizer: tokenizer.map(tokenizer_fingerprint), clustermap: map.map(clustermap_fingerprint) }
    }

    fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        if let Some(t) = &self.tokenizer {
            m.insert("tokenizer".into(), t.clone());
        }
        if let Some(c) = &self.clustermap {
            m.insert("clustermap".into(), c.clone());
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: TransformerParams,
    pub lineage: Lineage,
    pub step: u64,
    pub seed: u64,
}

impl TrainedModel {
    pub fn to_checkpoint(&self, run_config: Option<serde_json::Value>) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: CheckpointMeta {
                kind: self.params.config.kind.name().into(),
                config: serde_json::to_value(&self.params.config)?,
                step: self.step,
                rng: RngState { seed: self.seed, step: self.step },
                fingerprints: self.lineage.to_map(),
                run_config,
            },
            tensors: self.params.named_tensors(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let config: TransformerConfig = serde_json::from_value(ckpt.meta.config.clone())
            .map_err(|e| CtfError::Config(format!("checkpoint model config: {e}")))?;
        if config.kind.name() != ckpt.meta.kind {
            return Err(CtfError::Config(format!("checkpoint kind {} disagrees with its config", ckpt.meta.kind)));
        }
        let fp = &ckpt.meta.fingerprints;
        Ok(Self {
            params: TransformerParams::from_named_tensors(config, ckpt.tensors)?,
            lineage: Lineage { tokenizer: fp.get("tokenizer").cloned(), clustermap: fp.get("clustermap").cloned() },
            step: ckpt.meta.step,
            seed: ckpt.meta.rng.seed,
        })
    }

    /// Errors unless this model was trained against exactly these artifacts.
    pub fn check_lineage(&self, tokenizer: Option<&TokenizerParams>, map: Option<&ClusterMap>) -> Result<()> {
        let name = self.params.config.kind.name();
        if let (Some(want), Some(tok)) = (&self.lineage.tokenizer, tokenizer) {
            if *want != tokenizer_fingerprint(tok) {
                return Err(CtfError::Fingerprint(format!("{name} was trained with a different tokenizer")));
            }
        }
        if let (Some(want), Some(map)) = (&self.lineage.clustermap, map) {
            if *want != clustermap_fingerprint(map) {
                return Err(CtfError::Fingerprint(format!("{name} was trained with a different cluster map")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub kind: Option<ModelKind>,
    /// Loss per optimizer step.
    pub step_loss: Vec<f32>,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    /// Gradient norm of the null-class embedding row per step (before clipping).
    pub null_class_grad_norm: Vec<f32>,
}

/// Passed to the epoch callback after each completed epoch.
pub struct EpochEnd<'a> {
    /// 1-based epoch number.
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub params: &'a TransformerParams,
}

pub type EpochHook<'h> = dyn FnMut(&EpochEnd) -> Result<()> + 'h;

/// Model config matching a tokenized dataset and cluster map.
pub fn model_config(
    kind: ModelKind,
    tokens: &TokenizedDataset,
    codebook_size: usize,
    map: Option<&ClusterMap>,
    trunk: TrunkConfig,
) -> Result<TransformerConfig> {
    let n = tokens.seq_len();
    let need_map = || map.ok_or_else(|| CtfError::Config(format!("{} training requires a cluster map", kind.name())));
    Ok(match kind {
        ModelKind::Stage1 => TransformerConfig::stage1(need_map()?.m(), n, tokens.class_count, trunk),
        ModelKind::Stage2 => TransformerConfig::stage2(need_map()?.m(), codebook_size, n, tokens.class_count, trunk),
        ModelKind::Baseline => TransformerConfig::baseline(codebook_size, n, tokens.class_count, trunk),
    })
}

/// Builds training batches for one model kind from token grids.
pub struct BatchBuilder<'a> {
    kind: ModelKind,
    fine: Vec<&'a [usize]>,
    coarse: Vec<Vec<usize>>,
    labels: &'a [usize],
    map: Option<&'a ClusterMap>,
    restrict: bool,
}

impl<'a> BatchBuilder<'a> {
    pub fn new(kind: ModelKind, tokens: &'a TokenizedDataset, map: Option<&'a ClusterMap>, restrict: bool) -> Result<Self> {
        let coarse = match (kind, map) {
            (ModelKind::Baseline, _) => Vec::new(),
            (_, Some(m)) => tokens.coarse(m)?.into_iter().map(|g| g.tokens).collect(),
            (_, None) => return Err(CtfError::Config(format!("{} training requires a cluster map", kind.name()))),
        };
        Ok(Self {
            kind,
            fine: tokens.grids.iter().map(|g| g.tokens.as_slice()).collect(),
            coarse,
            labels: &tokens.labels,
            map,
            restrict: restrict && kind == ModelKind::Stage2,
        })
    }

    /// Teacher-forced batch over `indices` with the given (possibly nulled) classes.
    pub fn batch(&self, params: &TransformerParams, indices: &[usize], classes: &[usize]) -> Result<Batch> {
        match self.kind {
            ModelKind::Baseline => {
                let s: Vec<&[usize]> = indices.iter().map(|&i| self.fine[i]).collect();
                autoregressive_batch(params, &s, classes)
            }
            ModelKind::Stage1 => {
                let s: Vec<&[usize]> = indices.iter().map(|&i| self.coarse[i].as_slice()).collect();
                autoregressive_batch(params, &s, classes)
            }
            ModelKind::Stage2 => {
                let c: Vec<&[usize]> = indices.iter().map(|&i| self.coarse[i].as_slice()).collect();
                let f: Vec<&[usize]> = indices.iter().map(|&i| self.fine[i]).collect();
                let map = self.map.unwrap();
                let members = |ci: usize| -> Result<Vec<usize>> { Ok(map.members(ci)?.to_vec()) };
                stage2_batch(params, &c, &f, classes, self.restrict.then_some(&members as &dyn Fn(usize) -> Result<Vec<usize>>))
            }
        }
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Trains a fresh model of `config.kind` on token grids.
pub fn train_on_tokens(
    config: TransformerConfig,
    tokens: &TokenizedDataset,
    map: Option<&ClusterMap>,
    train: &TrainConfig,
    mut hook: Option<&mut EpochHook>,
) -> Result<(TransformerParams, LossCurve)> {
    train.validate()?;
    if tokens.is_empty() {
        return Err(CtfError::Parameter("cannot train on an empty dataset".into()));
    }
    if tokens.seq_len() != config.seq_len {
        return Err(CtfError::Shape(format!("token grids of {} tokens for N={}", tokens.seq_len(), config.seq_len)));
    }
    let kind = config.kind;
    let builder = BatchBuilder::new(kind, tokens, map, train.restrict_stage2)?;
    let root = SeedStream::new(train.seed);
    let mut params = TransformerParams::init(config, &mut root.split("init"))?;
    let null = params.config.null_class();
    let dim = params.config.trunk.dim;
    let mut opt = OptimState::new(train.optimizer.adamw(), &params.tensors().iter().collect::<Vec<_>>());

    let batch = train.batch_size.min(tokens.len());
    let per_epoch = tokens.len().div_ceil(batch);
    let total = train.max_steps.map_or(train.epochs * per_epoch, |m| m.min(train.epochs * per_epoch));
    let mut curve = LossCurve { kind: Some(kind), ..Default::default() };
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    let mut step = 0usize;
    'epochs: for epoch in 0..train.epochs {
        root.split("shuffle").split_index(epoch as u64).shuffle(&mut order);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for chunk in order.chunks(batch) {
            if step >= total {
                break 'epochs;
            }
            let mut drop = root.split("cfg-dropout").split_index(step as u64);
            let classes: Vec<usize> = builder
                .labels(chunk)
                .into_iter()
                .map(|c| if train.cfg_dropout > 0.0 && drop.uniform() < train.cfg_dropout { null } else { c })
                .collect();
            let b = builder.batch(&params, chunk, &classes)?;
            let mut tape = Tape::new();
            let ids = register_params(&mut tape, &params);
            let loss = loss_tape(&mut tape, &params, &ids, &b).map_err(|e| training_error(step, e))?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(CtfError::Training { step: step as u64, message: "loss is not finite".into() });
            }
            let mut grads = tape.backward(loss).map_err(|e| training_error(step, e.into()))?;
            let g: Vec<Tensor> = ids.iter().map(|&id| grads.take(id)).collect();
            let cls_grad = &g[TransformerParams::class_embedding_index()];
            let null_norm = cls_grad.data()[null * dim..(null + 1) * dim].iter().map(|v| v * v).sum::<f32>().sqrt();
            let lr = cosine_lr(step as u64, total as u64, train.lr_init, train.lr_final);
            let mut refs: Vec<&mut Tensor> = params.tensors_mut().iter_mut().collect();
            opt.step(&mut refs, &g, lr as f32).map_err(|e| training_error(step, e.into()))?;
            curve.step_loss.push(value);
            curve.learning_rate.push(lr);
            curve.null_class_grad_norm.push(null_norm);
            sum += value as f64;
            count += 1;
            step += 1;
        }
        let mean_loss = sum / count.max(1) as f64;
        curve.epoch_loss.push(mean_loss);
        if let Some(h) = hook.as_deref_mut() {
            h(&EpochEnd { epoch: epoch + 1, step: step as u64, mean_loss, params: &params })?;
        }
    }
    Ok((params, curve))
}

fn training_error(step: usize, e: CtfError) -> CtfError {
    match e {
        e @ CtfError::Training { .. } => e,
        other => CtfError::Training { step: step as u64, message: other.to_string() },
    }
}

/// Tokenizes `dataset` and trains a `kind` model against the given tokenizer and cluster map.
pub fn train_model(
    kind: ModelKind,
    dataset: &LabeledDataset,
    tokenizer: &TokenizerParams,
    map: Option<&ClusterMap>,
    trunk: TrunkConfig,
    class_conditioning: bool,
    train: &TrainConfig,
) -> Result<(TrainedModel, LossCurve)> {
    if kind != ModelKind::Baseline && map.is_none() {
        return Err(CtfError::Config(format!("{} training requires a cluster map", kind.name())));
    }
    let tokens = tokenize_dataset(dataset, tokenizer)?;
    let mut config = model_config(kind, &tokens, tokenizer.codebook.k(), map, trunk)?;
    config.class_conditioning = class_conditioning;
    let (params, curve) = train_on_tokens(config, &tokens, map, train, None)?;
    let lineage = Lineage::of(Some(tokenizer), if kind == ModelKind::Baseline { None } else { map });
    let step = curve.step_loss.len() as u64;
    Ok((TrainedModel { params, lineage, step, seed: train.seed }, curve))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub cfg_scale: f64,
    pub temperature_stage1: f64,
    pub temperature_stage2: f64,
    /// 0 keeps the full distribution.
    pub top_k: usize,
    /// Restrict stage-2 sampling to members of the sampled cluster.
    pub cluster_mask: bool,
    pub seed: u64,
    pub cfg_stage1: bool,
    pub cfg_stage2: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            cfg_scale: 2.0,
            temperature_stage1: 1.1,
            temperature_stage2: 1.1,
            top_k: 0,
            cluster_mask: false,
            seed: 0,
            cfg_stage1: true,
            cfg_stage2: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("temperature_stage1", self.temperature_stage1), ("temperature_stage2", self.temperature_stage2)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CtfError::Config(format!("{name} must be positive, got {t}")));
            }
        }
        if !self.cfg_scale.is_finite() {
            return Err(CtfError::Config("cfg_scale must be finite".into()));
        }
        Ok(())
    }
}

/// `l_uncond + s·(l_cond − l_uncond)`. Scales 1 and 0 return the corresponding input unchanged.
pub fn cfg_combine(l_cond: &[f32], l_uncond: &[f32], s: f32) -> Result<Vec<f32>> {
    if l_cond.len() != l_uncond.len() {
        return Err(CtfError::Shape(format!("{} conditional vs {} unconditional logits", l_cond.len(), l_uncond.len())));
    }
    if s == 1.0 {
        return Ok(l_cond.to_vec());
    }
    if s == 0.0 {
        return Ok(l_uncond.to_vec());
    }
    Ok(l_cond.iter().zip(l_uncond).map(|(&c, &u)| u + s * (c - u)).collect())
}

fn argmax(logits: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in logits.iter().enumerate() {
        if v > f32::NEG_INFINITY && best.is_none_or(|b| v > logits[b]) {
            best = Some(i);
        }
    }
    best
}

/// Temperature, then top-k (ties to the lowest index), then softmax and one draw.
pub fn sample_categorical(logits: &[f32], temperature: f32, top_k: usize, rng: &mut SeedStream) -> Result<usize> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CtfError::Parameter(format!("temperature must be positive, got {temperature}")));
    }
    if top_k > logits.len() {
        return Err(CtfError::Parameter(format!("top_k {top_k} exceeds vocabulary {}", logits.len())));
    }
    if logits.iter().any(|v| v.is_nan() || *v == f32::INFINITY) {
        return Err(CtfError::Sampling("logits contain NaN or +inf".into()));
    }
    let Some(best) = argmax(logits) else {
        return Err(CtfError::Sampling("every logit is -inf".into()));
    };
    if top_k == 1 {
        return Ok(best);
    }
    let inv = 1.0 / temperature;
    let mut weights: Vec<f32> = logits.iter().map(|&v| v * inv).collect();
    if top_k > 1 {
        let mut idx: Vec<usize> = (0..logits.len()).collect();
        idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        for &i in &idx[top_k..] {
            weights[i] = f32::NEG_INFINITY;
        }
    }
    let max = weights[best];
    let mut total = 0.0f64;
    for w in weights.iter_mut() {
        *w = fast_exp(*w - max);
        total += *w as f64;
    }
    let target = rng.uniform() * total;
    let mut acc = 0.0f64;
    for (i, &w) in weights.iter().enumerate() {
        acc += w as f64;
        if w > 0.0 && acc > target {
            return Ok(i);
        }
    }
    Ok(weights.iter().rposition(|&w| w > 0.0).unwrap_or(best))
}

/// Per-sample random stream for one stage of generation.
fn sample_stream(seed: u64, stage: &str, index: usize) -> SeedStream {
    SeedStream::new(seed).split(stage).split_index(index as u64)
}

/// Autoregressive sampling of full sequences for a batch of classes from a causal model.
/// Returns the sequences and the number of forward invocations (N).
pub fn sample_autoregressive(
    params: &TransformerParams,
    classes: &[usize],
    temperature: f32,
    cfg_scale: Option<f32>,
    top_k: usize,
    seed: u64,
    stage: &str,
) -> Result<(Vec<Vec<usize>>, usize)> {
    let cfg = &params.config;
    let b = classes.len();
    let guided = cfg_scale.filter(|&s| s != 1.0 && cfg.class_conditioning);
    let rows = if guided.is_some() { 2 * b } else { b };
    let mut decoder = IncrementalDecoder::new(params, rows)?;
    let mut rngs: Vec<SeedStream> = (0..b).map(|i| sample_stream(seed, stage, i)).collect();
    let mut inputs: Vec<StepInput> = classes.iter().map(|&c| StepInput::Class(c)).collect();
    if guided.is_some() {
        inputs.extend((0..b).map(|_| StepInput::Class(cfg.null_class())));
    }
    let v = cfg.output_vocab;
    let mut seqs = vec![Vec::with_capacity(cfg.seq_len); b];
    for _ in 0..cfg.seq_len {
        let logits = decoder.step(&inputs)?;
        for i in 0..b {
            let cond = &logits[i * v..(i + 1) * v];
            let row = match guided {
                Some(s) => cfg_combine(cond, &logits[(b + i) * v..(b + i + 1) * v], s)?,
                None => cond.to_vec(),
            };
            let tok = sample_categorical(&row, temperature, top_k, &mut rngs[i])?;
            seqs[i].push(tok);
            inputs[i] = StepInput::Token(tok);
            if guided.is_some() {
                inputs[b + i] = StepInput::Token(tok);
            }
        }
    }
    Ok((seqs, decoder.steps))
}

/// Coarse grids for a batch of classes (stage 1, N invocations).
pub fn sample_coarse(stage1: &TransformerParams, classes: &[usize], cfg: &SamplerConfig) -> Result<(Vec<Vec<usize>>, usize)> {
    cfg.validate()?;
    if stage1.config.kind != ModelKind::Stage1 {
        return Err(CtfError::Config(format!("expected a stage1 model, got {}", stage1.config.kind.name())));
    }
    let scale = cfg.cfg_stage1.then_some(cfg.cfg_scale as f32);
    // one top_k serves both stages; at or above M it leaves stage 1 unrestricted
    let top_k = cfg.top_k.min(stage1.config.output_vocab);
    sample_autoregressive(stage1, classes, cfg.temperature_stage1 as f32, scale, top_k, cfg.seed, "coarse")
}

/// Fine grids for given coarse grids (stage 2, one invocation).
pub fn sample_fine(
    stage2: &TransformerParams,
    coarse: &[Vec<usize>],
    classes: &[usize],
    map: &ClusterMap,
    cfg: &SamplerConfig,
) -> Result<(Vec<Vec<usize>>, usize)> {
    cfg.validate()?;
    let mc = &stage2.config;
    if mc.kind != ModelKind::Stage2 {
        return Err(CtfError::Config(format!("expected a stage2 model, got {}", mc.kind.name())));
    }
    if map.k() != mc.output_vocab || map.m() != mc.input_vocab {
        return Err(CtfError::Config(format!(
            "cluster map K={}, M={} does not fit stage2 vocabularies {}→{}",
            map.k(),
            map.m(),
            mc.input_vocab,
            mc.output_vocab
        )));
    }
    let b = coarse.len();
    let guided = (cfg.cfg_stage2 && cfg.cfg_scale != 1.0 && mc.class_conditioning).then_some(cfg.cfg_scale as f32);
    let mut refs: Vec<&[usize]> = coarse.iter().map(Vec::as_slice).collect();
    let mut rows: Vec<usize> = classes.to_vec();
    if guided.is_some() {
        refs.extend(coarse.iter().map(Vec::as_slice));
        rows.extend(std::iter::repeat_n(mc.null_class(), b));
    }
    // one trunk pass for every sequence; the head is applied per sample so logits stay small
    let hidden = stage2_hidden(stage2, &refs, &rows)?;
    let (n, dim, v) = (mc.seq_len, mc.trunk.dim, mc.output_vocab);
    let head_rows = |seq: usize| apply_head(stage2, &hidden.data()[(seq * (n + 1) + 1) * dim..(seq + 1) * (n + 1) * dim]);
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let cond_all = head_rows(i)?;
        let uncond_all = if guided.is_some() { Some(head_rows(b + i)?) } else { None };
        let mut rng = sample_stream(cfg.seed, "fine", i);
        let mut fine = Vec::with_capacity(n);
        let mut row = vec![0.0f32; v];
        for (pos, &c) in coarse[i].iter().enumerate() {
            let cond = &cond_all[pos * v..(pos + 1) * v];
            match (guided, &uncond_all) {
                (Some(s), Some(u)) => {
                    for ((r, &c), &u) in row.iter_mut().zip(cond).zip(&u[pos * v..(pos + 1) * v]) {
                        *r = u + s * (c - u);
                    }
                }
                _ => row.copy_from_slice(cond),
            }
            if cfg.cluster_mask {
                let members = map.members(c)?;
                let kept: Vec<f32> = members.iter().map(|&m| row[m]).collect();
                row.fill(f32::NEG_INFINITY);
                for (&m, &x) in members.iter().zip(&kept) {
                    row[m] = x;
                }
            }
            let tok = sample_categorical(&row, cfg.temperature_stage2 as f32, cfg.top_k, &mut rng)
                .map_err(|e| CtfError::Sampling(format!("position {pos} (cluster {c}): {e}")))?;
            fine.push(tok);
        }
        out.push(fine);
    }
    Ok((out, 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub images: Vec<Image>,
    pub coarse: Vec<Vec<usize>>,
    pub fine: Vec<Vec<usize>>,
    pub stage1_invocations: usize,
    pub stage2_invocations: usize,
}

/// Two-stage generation: coarse sequence, then all fine tokens at once, then decode.
pub fn generate(
    classes: &[usize],
    stage1: &TrainedModel,
    stage2: &TrainedModel,
    map: &ClusterMap,
    tokenizer: &TokenizerParams,
    cfg: &SamplerConfig,
) -> Result<Generation> {
    stage1.check_lineage(Some(tokenizer), Some(map))?;
    stage2.check_lineage(Some(tokenizer), Some(map))?;
    let n = stage1.params.config.seq_len;
    let (h, w) = grid_shape(n)?;
    let (coarse, s1) = sample_coarse(&stage1.params, classes, cfg)?;
    let (fine, s2) = sample_fine(&stage2.params, &coarse, classes, map, cfg)?;
    let images = fine
        .iter()
        .map(|f| decode_tokens(&TokenGrid::new(h, w, f.clone())?, tokenizer))
        .collect::<Result<Vec<_>>>()?;
    Ok(Generation { images, coarse, fine, stage1_invocations: s1, stage2_invocations: s2 })
}

/// Single-stage generation with the baseline model.
pub fn generate_baseline(
    classes: &[usize],
    baseline: &TrainedModel,
    tokenizer: &TokenizerParams,
    cfg: &SamplerConfig,
) -> Result<Generation> {
    cfg.validate()?;
    baseline.check_lineage(Some(tokenizer), None)?;
    let n = baseline.params.config.seq_len;
    let (h, w) = grid_shape(n)?;
    let scale = cfg.cfg_stage1.then_some(cfg.cfg_scale as f32);
    let (fine, steps) = sample_autoregressive(&baseline.params, classes, cfg.temperature_stage1 as f32, scale, cfg.top_k, cfg.seed, "baseline")?;
    let images = fine
        .iter()
        .map(|f| decode_tokens(&TokenGrid::new(h, w, f.clone())?, tokenizer))
        .collect::<Result<Vec<_>>>()?;
    Ok(Generation { images, coarse: Vec::new(), fine, stage1_invocations: steps, stage2_invocations: 0 })
}

/// Square token grid for N tokens.
fn grid_shape(n: usize) -> Result<(usize, usize)> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(CtfError::Shape(format!("N={n} is not a square token grid")));
    }
    Ok((side, side))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cfg_combine_examples() {
        let c = [2.0f32, 0.0, 0.1];
        let u = [1.0f32, 0.0, 1e8];
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&[2.0, 0.0], &[1.0, 0.0], 2.0).unwrap(), vec![3.0, 0.0]);
        assert!(matches!(cfg_combine(&[1.0], &[1.0, 2.0], 2.0), Err(CtfError::Shape(_))));
    }

    #[test]
    fn top1_is_argmax_for_any_temperature() {
        let logits = [0.3f32, 2.5, -1.0, 2.5];
        for seed in 0..20 {
            for t in [0.01f32, 1.0, 50.0] {
                assert_eq!(sample_categorical(&logits, t, 1, &mut SeedStream::new(seed)).unwrap(), 1);
            }
        }
    }

    #[test]
    fn masked_logits_never_win() {
        let logits = [0.0f32, f32::NEG_INFINITY, f32::NEG_INFINITY];
        let mut rng = SeedStream::new(1);
        for _ in 0..200 {
            assert_eq!(sample_categorical(&logits, 1.1, 0, &mut rng).unwrap(), 0);
        }
        let dead = [f32::NEG_INFINITY; 3];
        assert!(matches!(sample_categorical(&dead, 1.0, 0, &mut rng), Err(CtfError::Sampling(_))));
        assert!(sample_categorical(&logits, 0.0, 0, &mut rng).is_err());
    }

    #[test]
    fn top_k_keeps_only_k_largest() {
        let logits = [1.0f32, 5.0, 3.0, 5.0, 0.0];
        let mut rng = SeedStream::new(4);
        for _ in 0..500 {
            let i = sample_categorical(&logits, 10.0, 2, &mut rng).unwrap();
            assert!(i == 1 || i == 3);
        }
    }

    #[test]
    fn sampler_defaults() {
        let s = SamplerConfig::default();
        assert_eq!((s.cfg_scale, s.temperature_stage1, s.temperature_stage2, s.top_k, s.cluster_mask), (2.0, 1.1, 1.1, 0, false));
        let t = TrainConfig::default();
        assert_eq!((t.lr_init, t.lr_final, t.cfg_dropout), (1e-4, 1e-5, 0.1));
        assert!(TrainConfig { cfg_dropout: 1.0, ..t }.validate().is_err());
    }
}
