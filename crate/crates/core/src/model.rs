//! Transformer trunk shared by the coarse AR model, the full-attention fine
//! predictor and the single-stage baseline.

use ctf_tensor::kernels::{self, View, ViewMut};
use ctf_tensor::{NodeId, SeedStream, SequenceLayout, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CtfError, Result};

/// Target value for rows excluded from the loss.
pub const IGNORE: usize = usize::MAX;

pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Stage1,
    Stage2,
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Stage1 => "stage1",
            ModelKind::Stage2 => "stage2",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn attention(self) -> AttentionKind {
        match self {
            ModelKind::Stage2 => AttentionKind::Full,
            _ => AttentionKind::Causal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Causal,
    Full,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrunkConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self { dim: 128, layers: 4, heads: 4, mlp_ratio: 4 }
    }
}

impl TrunkConfig {
    /// Named presets for `--model-size`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self { dim: 32, layers: 2, heads: 2, mlp_ratio: 4 }),
            "small" => Ok(Self { dim: 64, layers: 2, heads: 4, mlp_ratio: 4 }),
            "desk" | "base" => Ok(Self::default()),
            "large" => Ok(Self { dim: 192, layers: 6, heads: 6, mlp_ratio: 4 }),
            other => Err(CtfError::Config(format!("unknown model size '{other}' (tiny, small, desk, large)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub kind: ModelKind,
    /// Input token vocabulary (M for both stages, K for the baseline).
    pub input_vocab: usize,
    /// Output vocabulary (M for stage 1, K for stage 2 and the baseline).
    pub output_vocab: usize,
    /// Tokens per image, N.
    pub seq_len: usize,
    pub trunk: TrunkConfig,
    pub class_count: usize,
    /// When false the model always sees the null class.
    pub class_conditioning: bool,
}

impl TransformerConfig {
    pub fn stage1(m: usize, n: usize, class_count: usize, trunk: TrunkConfig) -> Self {
        Self { kind: ModelKind::Stage1, input_vocab: m, output_vocab: m, seq_len: n, trunk, class_count, class_conditioning: true }
    }

    pub fn stage2(m: usize, k: usize, n: usize, class_count: usize, trunk: TrunkConfig) -> Self {
        Self { kind: ModelKind::Stage2, input_vocab: m, output_vocab: k, seq_len: n, trunk, class_count, class_conditioning: true }
    }

    pub fn baseline(k: usize, n: usize, class_count: usize, trunk: TrunkConfig) -> Self {
        Self { kind: ModelKind::Baseline, input_vocab: k, output_vocab: k, seq_len: n, trunk, class_count, class_conditioning: true }
    }

    pub fn attention(&self) -> AttentionKind {
        self.kind.attention()
    }

    /// Index of the reserved unconditional class row.
    pub fn null_class(&self) -> usize {
        self.class_count
    }

    /// Rows per sequence seen by the trunk.
    pub fn sequence_rows(&self) -> usize {
        match self.kind {
            ModelKind::Stage2 => self.seq_len + 1,
            _ => self.seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.trunk;
        if t.dim == 0 || t.heads == 0 || t.dim % t.heads != 0 {
            return Err(CtfError::Config(format!("embed dim {} not divisible by {} heads", t.dim, t.heads)));
        }
        if t.layers == 0 || t.mlp_ratio == 0 {
            return Err(CtfError::Config("layers and mlp_ratio must be positive".into()));
        }
        if self.input_vocab < 2 || self.output_vocab < 2 {
            return Err(CtfError::Config("vocabularies need at least 2 entries".into()));
        }
        if self.kind != ModelKind::Stage2 && self.input_vocab != self.output_vocab {
            return Err(CtfError::Config(format!("{} model needs equal input and output vocabularies", self.kind.name())));
        }
        if self.seq_len == 0 || self.class_count == 0 {
            return Err(CtfError::Config("sequence length and class count must be positive".into()));
        }
        Ok(())
    }
}

const TOK: usize = 0;
const CLS: usize = 1;
const POS: usize = 2;
const FIRST_BLOCK: usize = 3;
const PER_LAYER: usize = 6;
const NORM1: usize = 0;
const WQKV: usize = 1;
const WO: usize = 2;
const NORM2: usize = 3;
const W_UP: usize = 4;
const W_DOWN: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub config: TransformerConfig,
    tensors: Vec<Tensor>,
}

fn tensor_names(cfg: &TransformerConfig) -> Vec<String> {
    let mut names = vec!["tok_emb".to_string(), "cls_emb".into(), "pos_emb".into()];
    for l in 0..cfg.trunk.layers {
        for part in ["norm1", "wqkv", "wo", "norm2", "w_up", "w_down"] {
            names.push(format!("blocks.{l}.{part}"));
        }
    }
    names.push("norm_f".into());
    names.push("head".into());
    names
}

fn tensor_shapes(cfg: &TransformerConfig) -> Vec<Vec<usize>> {
    let d = cfg.trunk.dim;
    let hidden = d * cfg.trunk.mlp_ratio;
    let mut shapes = vec![vec![cfg.input_vocab, d], vec![cfg.class_count + 1, d], vec![cfg.seq_len + 1, d]];
    for _ in 0..cfg.trunk.layers {
        shapes.extend([vec![d], vec![d, 3 * d], vec![d, d], vec![d], vec![d, hidden], vec![hidden, d]]);
    }
    shapes.push(vec![d]);
    shapes.push(vec![d, cfg.output_vocab]);
    shapes
}

impl TransformerParams {
    /// Normal(0, `std`) weights and unit norm scales.
    pub fn init_with_std(config: TransformerConfig, std: f32, rng: &mut SeedStream) -> Result<Self> {
        config.validate()?;
        let tensors = tensor_names(&config)
            .iter()
            .zip(tensor_shapes(&config))
            .map(|(name, shape)| {
                if name.contains("norm") {
                    Tensor::ones(&shape)
                } else {
                    Tensor::randn(&shape, std, &mut rng.split(name))
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn init(config: TransformerConfig, rng: &mut SeedStream) -> Result<Self> {
        Self::init_with_std(config, INIT_STD, rng)
    }

    pub fn from_named_tensors(config: TransformerConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let names = tensor_names(&config);
        let shapes = tensor_shapes(&config);
        if named.len() != names.len() {
            return Err(CtfError::Shape(format!("{} tensors, expected {}", named.len(), names.len())));
        }
        let mut tensors = Vec::with_capacity(names.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(names.iter().zip(&shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(CtfError::Shape(format!("tensor {name} {:?} where {want} {shape:?} expected", t.shape())));
            }
            tensors.push(t);
        }
        Ok(Self { config, tensors })
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        tensor_names(&self.config).into_iter().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Rows of the class-embedding table; the last is the null class.
    pub fn class_embedding(&self) -> &Tensor {
        &self.tensors[CLS]
    }

    pub fn head(&self) -> &Tensor {
        self.tensors.last().unwrap()
    }

    pub fn class_embedding_index() -> usize {
        CLS
    }

    pub fn head_param_count(&self) -> usize {
        self.head().numel()
    }

    /// Class row actually fed to the trunk.
    pub fn class_row(&self, class: usize) -> Result<usize> {
        let c = &self.config;
        if class > c.class_count {
            return Err(CtfError::Index(format!("class {class} outside {} classes (+ null)", c.class_count)));
        }
        Ok(if c.class_conditioning { class } else { c.null_class() })
    }

    fn layer(&self, l: usize, part: usize) -> &Tensor {
        &self.tensors[FIRST_BLOCK + l * PER_LAYER + part]
    }

    fn norm_f(&self) -> &Tensor {
        &self.tensors[self.tensors.len() - 2]
    }
}

/// Exact number of weight elements.
pub fn count_params(params: &TransformerParams) -> usize {
    params.tensors.iter().map(Tensor::numel).sum()
}

/// A batch of sequences in trunk layout plus per-row targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub layout: SequenceLayout,
    pub targets: Vec<usize>,
    /// Per-row allowed target sets for cluster-restricted stage-2 losses.
    pub restrict: Option<Vec<Vec<usize>>>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.targets.len()
    }
}

/// Next-token batch: row 0 is the class, row i holds token i-1 and predicts token i.
pub fn autoregressive_batch(params: &TransformerParams, seqs: &[&[usize]], classes: &[usize]) -> Result<Batch> {
    let n = params.config.seq_len;
    check_batch(seqs, classes, n)?;
    let mut tokens = Vec::with_capacity(seqs.len() * (n - 1));
    let mut targets = Vec::with_capacity(seqs.len() * n);
    for s in seqs {
        tokens.extend_from_slice(&s[..n - 1]);
        targets.extend_from_slice(s);
    }
    let classes = classes.iter().map(|&c| params.class_row(c)).collect::<Result<_>>()?;
    Ok(Batch { layout: SequenceLayout { tokens, classes, seq: n }, targets, restrict: None })
}

/// Fine-prediction batch: the class row is ignored, row i+1 sees the whole coarse grid and predicts fine token i.
pub fn stage2_batch(
    params: &TransformerParams,
    coarse: &[&[usize]],
    fine: &[&[usize]],
    classes: &[usize],
    members: Option<&dyn Fn(usize) -> Result<Vec<usize>>>,
) -> Result<Batch> {
    let n = params.config.seq_len;
    check_batch(coarse, classes, n)?;
    check_batch(fine, classes, n)?;
    let mut tokens = Vec::with_capacity(coarse.len() * n);
    let mut targets = Vec::with_capacity(coarse.len() * (n + 1));
    let mut restrict = members.map(|_| Vec::with_capacity(coarse.len() * (n + 1)));
    for (c, f) in coarse.iter().zip(fine) {
        tokens.extend_from_slice(c);
        targets.push(IGNORE);
        targets.extend_from_slice(f);
        if let (Some(r), Some(members)) = (restrict.as_mut(), members) {
            r.push(Vec::new());
            for &ci in c.iter() {
                r.push(members(ci)?);
            }
        }
    }
    let classes = classes.iter().map(|&c| params.class_row(c)).collect::<Result<_>>()?;
    Ok(Batch { layout: SequenceLayout { tokens, classes, seq: n + 1 }, targets, restrict })
}

fn check_batch(seqs: &[&[usize]], classes: &[usize], n: usize) -> Result<()> {
    if seqs.is_empty() || seqs.len() != classes.len() {
        return Err(CtfError::Shape(format!("{} sequences with {} classes", seqs.len(), classes.len())));
    }
    if let Some(s) = seqs.iter().find(|s| s.len() != n) {
        return Err(CtfError::Shape(format!("sequence of length {} where N={n}", s.len())));
    }
    Ok(())
}

/// Records the trunk up to the final norm; `ids` must cover every tensor before the head.
pub fn forward_hidden_tape(tape: &mut Tape, params: &TransformerParams, ids: &[NodeId], layout: &SequenceLayout) -> Result<NodeId> {
    let cfg = &params.config;
    let batch = layout.classes.len();
    let seq = layout.seq;
    let mut x = tape.embed(ids[TOK], ids[CLS], ids[POS], layout.clone())?;
    let causal = cfg.attention() == AttentionKind::Causal;
    for l in 0..cfg.trunk.layers {
        let p = |part: usize| ids[FIRST_BLOCK + l * PER_LAYER + part];
        let h = tape.rms_norm(x, p(NORM1))?;
        let qkv = tape.matmul(h, p(WQKV))?;
        let a = tape.attention(qkv, batch, seq, cfg.trunk.heads, causal)?;
        let a = tape.matmul(a, p(WO))?;
        x = tape.add(x, a)?;
        let h = tape.rms_norm(x, p(NORM2))?;
        let u = tape.matmul(h, p(W_UP))?;
        let u = tape.gelu(u)?;
        let dn = tape.matmul(u, p(W_DOWN))?;
        x = tape.add(x, dn)?;
    }
    Ok(tape.rms_norm(x, ids[FIRST_BLOCK + cfg.trunk.layers * PER_LAYER])?)
}

/// Records the full forward pass on `tape`; `ids` are the tape nodes of the parameter tensors.
pub fn forward_tape(tape: &mut Tape, params: &TransformerParams, ids: &[NodeId], layout: &SequenceLayout) -> Result<NodeId> {
    let h = forward_hidden_tape(tape, params, ids, layout)?;
    Ok(tape.matmul(h, ids[ids.len() - 1])?)
}

/// Registers every parameter on `tape` as a trainable leaf.
pub fn register_params(tape: &mut Tape, params: &TransformerParams) -> Vec<NodeId> {
    params.tensors.iter().map(|t| tape.param(t.clone())).collect()
}

/// Mean cross-entropy of `batch` and its tape node.
pub fn loss_tape(tape: &mut Tape, params: &TransformerParams, ids: &[NodeId], batch: &Batch) -> Result<NodeId> {
    let logits = forward_tape(tape, params, ids, &batch.layout)?;
    let ignore = batch.targets.contains(&IGNORE).then_some(IGNORE);
    Ok(tape.cross_entropy(logits, &batch.targets, ignore, batch.restrict.as_deref())?)
}

/// Logits `[batch·rows, V]` for every trunk row, without recording gradients.
pub fn forward_logits(params: &TransformerParams, layout: &SequenceLayout) -> Result<Tensor> {
    let hidden = hidden_states(params, layout)?;
    let rows = hidden.shape()[0];
    Tensor::new(vec![rows, params.config.output_vocab], apply_head(params, hidden.data())?).map_err(Into::into)
}

/// Final-norm hidden states `[batch·rows, dim]`, without recording gradients.
pub fn hidden_states(params: &TransformerParams, layout: &SequenceLayout) -> Result<Tensor> {
    let mut tape = Tape::new();
    let n = params.tensors.len();
    let ids: Vec<NodeId> = params.tensors[..n - 1].iter().map(|t| tape.constant(t.clone())).collect();
    let out = forward_hidden_tape(&mut tape, params, &ids, layout)?;
    Ok(tape.into_value(out))
}

/// Output-head logits for rows of final hidden states.
pub fn apply_head(params: &TransformerParams, hidden: &[f32]) -> Result<Vec<f32>> {
    let (dim, v) = (params.config.trunk.dim, params.config.output_vocab);
    if hidden.len() % dim != 0 || hidden.is_empty() {
        return Err(CtfError::Shape(format!("{} hidden values for width {dim}", hidden.len())));
    }
    let rows = hidden.len() / dim;
    let mut out = vec![0.0f32; rows * v];
    kernels::gemm(rows, dim, v, hidden, false, params.head().data(), false, 0.0, &mut out);
    Ok(out)
}

/// Batch loss value without gradients.
pub fn batch_loss(params: &TransformerParams, batch: &Batch) -> Result<f32> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let l = loss_tape(&mut tape, params, &ids, batch)?;
    Ok(tape.value(l).data()[0])
}

/// Logits for the token after `prefix` by full recomputation (causal models).
pub fn next_logits(params: &TransformerParams, class: usize, prefix: &[usize]) -> Result<Vec<f32>> {
    let cfg = &params.config;
    if cfg.attention() != AttentionKind::Causal {
        return Err(CtfError::Config("next-token logits need a causal model".into()));
    }
    if prefix.len() >= cfg.seq_len {
        return Err(CtfError::Shape(format!("prefix of {} tokens leaves nothing to predict (N={})", prefix.len(), cfg.seq_len)));
    }
    let layout = SequenceLayout { tokens: prefix.to_vec(), classes: vec![params.class_row(class)?], seq: prefix.len() + 1 };
    let logits = forward_logits(params, &layout)?;
    Ok(logits.row(prefix.len()).to_vec())
}

/// Final hidden states `[B·(N+1), dim]` of the fine predictor; row 0 of each sequence is the class row.
pub fn stage2_hidden(params: &TransformerParams, coarse: &[&[usize]], classes: &[usize]) -> Result<Tensor> {
    let cfg = &params.config;
    if cfg.kind != ModelKind::Stage2 {
        return Err(CtfError::Config(format!("{} model cannot predict fine tokens in one pass", cfg.kind.name())));
    }
    check_batch(coarse, classes, cfg.seq_len)?;
    let layout = SequenceLayout {
        tokens: coarse.concat(),
        classes: classes.iter().map(|&c| params.class_row(c)).collect::<Result<_>>()?,
        seq: cfg.seq_len + 1,
    };
    hidden_states(params, &layout)
}

/// Per-position fine logits `[N, K]` for each coarse grid.
pub fn stage2_logits(params: &TransformerParams, coarse: &[&[usize]], classes: &[usize]) -> Result<Vec<Tensor>> {
    let hidden = stage2_hidden(params, coarse, classes)?;
    let cfg = &params.config;
    let (n, dim) = (cfg.seq_len, cfg.trunk.dim);
    (0..coarse.len())
        .map(|b| {
            let rows = &hidden.data()[(b * (n + 1) + 1) * dim..(b + 1) * (n + 1) * dim];
            Ok(Tensor::new(vec![n, cfg.output_vocab], apply_head(params, rows)?)?)
        })
        .collect()
}

/// One decoding step's input for one batch row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepInput {
    Class(usize),
    Token(usize),
}

/// Cached keys and values for incremental causal decoding of a batch of sequences.
pub struct KvCache {
    batch: usize,
    capacity: usize,
    dim: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(config: &TransformerConfig, batch: usize) -> Self {
        let (capacity, dim) = (config.seq_len + 1, config.trunk.dim);
        let layer = || vec![0.0f32; batch * capacity * dim];
        Self {
            batch,
            capacity,
            dim,
            keys: (0..config.trunk.layers).map(|_| layer()).collect(),
            values: (0..config.trunk.layers).map(|_| layer()).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Cached key row for (layer, batch row, position).
    pub fn key(&self, layer: usize, b: usize, t: usize) -> &[f32] {
        let off = (b * self.capacity + t) * self.dim;
        &self.keys[layer][off..off + self.dim]
    }
}

/// Incremental decoder: each call to [`IncrementalDecoder::step`] appends one position per batch row.
pub struct IncrementalDecoder<'a> {
    params: &'a TransformerParams,
    cache: KvCache,
    /// Forward invocations so far.
    pub steps: usize,
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(params: &'a TransformerParams, batch: usize) -> Result<Self> {
        if params.config.attention() != AttentionKind::Causal {
            return Err(CtfError::Config("incremental decoding needs a causal model".into()));
        }
        if batch == 0 {
            return Err(CtfError::Shape("empty decoding batch".into()));
        }
        Ok(Self { params, cache: KvCache::new(&params.config, batch), steps: 0 })
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Logits `[batch, V]` for the position after the one appended.
    pub fn step(&mut self, inputs: &[StepInput]) -> Result<Vec<f32>> {
        let p = self.params;
        let cfg = &p.config;
        let (batch, dim, cap) = (self.cache.batch, cfg.trunk.dim, self.cache.capacity);
        let t = self.cache.len;
        if inputs.len() != batch {
            return Err(CtfError::Shape(format!("{} step inputs for batch {batch}", inputs.len())));
        }
        if t >= cfg.sequence_rows() {
            return Err(CtfError::Shape(format!("cache full at {t} positions")));
        }
        let mut x = vec![0.0f32; batch * dim];
        let pos = &p.tensors[POS].row(t)[..dim];
        for (b, inp) in inputs.iter().enumerate() {
            let src = match *inp {
                StepInput::Class(c) => p.tensors[CLS].row(p.class_row(c)?),
                StepInput::Token(tok) => {
                    if tok >= cfg.input_vocab {
                        return Err(CtfError::Index(format!("token {tok} outside vocabulary of {}", cfg.input_vocab)));
                    }
                    p.tensors[TOK].row(tok)
                }
            };
            for ((o, &s), &q) in x[b * dim..(b + 1) * dim].iter_mut().zip(src).zip(pos) {
                *o = s + q;
            }
        }
        let heads = cfg.trunk.heads;
        let hd = dim / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let hidden = dim * cfg.trunk.mlp_ratio;
        let mut h = vec![0.0f32; batch * dim];
        let mut qkv = vec![0.0f32; batch * 3 * dim];
        let mut att = vec![0.0f32; batch * dim];
        let mut up = vec![0.0f32; batch * hidden];
        let mut scores = vec![0.0f32; t + 1];
        for l in 0..cfg.trunk.layers {
            kernels::rms_norm_rows(&x, p.layer(l, NORM1).data(), &mut h);
            kernels::gemm(batch, dim, 3 * dim, &h, false, p.layer(l, WQKV).data(), false, 0.0, &mut qkv);
            let (keys, values) = (&mut self.cache.keys[l], &mut self.cache.values[l]);
            for b in 0..batch {
                let off = (b * cap + t) * dim;
                keys[off..off + dim].copy_from_slice(&qkv[b * 3 * dim + dim..b * 3 * dim + 2 * dim]);
                values[off..off + dim].copy_from_slice(&qkv[b * 3 * dim + 2 * dim..(b + 1) * 3 * dim]);
            }
            for b in 0..batch {
                let kbase = b * cap * dim;
                for hh in 0..heads {
                    let q = &qkv[b * 3 * dim + hh * hd..b * 3 * dim + (hh + 1) * hd];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k = &keys[kbase + j * dim + hh * hd..kbase + j * dim + (hh + 1) * hd];
                        *s = q.iter().zip(k).map(|(a, c)| a * c).sum::<f32>() * scale;
                    }
                    kernels::softmax_rows_in_place(&mut scores, t + 1);
                    let o = &mut att[b * dim + hh * hd..b * dim + (hh + 1) * hd];
                    o.fill(0.0);
                    for (j, &w) in scores.iter().enumerate() {
                        let v = &values[kbase + j * dim + hh * hd..kbase + j * dim + (hh + 1) * hd];
                        o.iter_mut().zip(v).for_each(|(o, &v)| *o += w * v);
                    }
                }
            }
            // x += att · wo
            kernels::gemm(batch, dim, dim, &att, false, p.layer(l, WO).data(), false, 1.0, &mut x);
            kernels::rms_norm_rows(&x, p.layer(l, NORM2).data(), &mut h);
            kernels::gemm(batch, dim, hidden, &h, false, p.layer(l, W_UP).data(), false, 0.0, &mut up);
            up.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            kernels::gemm(batch, hidden, dim, &up, false, p.layer(l, W_DOWN).data(), false, 1.0, &mut x);
        }
        kernels::rms_norm_rows(&x, p.norm_f().data(), &mut h);
        let v = cfg.output_vocab;
        let mut logits = vec![0.0f32; batch * v];
        let head = View::row_major(p.head().data(), v);
        kernels::gemm_view(batch, dim, v, 1.0, View::row_major(&h, dim), head, 0.0, ViewMut::row_major(&mut logits, v));
        self.cache.len += 1;
        self.steps += 1;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(CtfError::Sampling(format!("non-finite logits at position {t}")));
        }
        Ok(logits)
    }
}
