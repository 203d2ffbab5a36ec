//! Patch-linear vector-quantising tokenizer.
//!
//! Images are cut into `patch×patch` tiles, each tile is projected affinely to a
//! `d`-dimensional latent, and every latent is snapped to its nearest codeword.
//! Decoding maps codewords back through a second affine projection.

use std::fs;
use std::path::Path;

use ctf_tensor::{cosine_lr, AdamWConfig, NodeId, OptimState, SeedStream, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Image, LabeledDataset};
use crate::error::{CtfError, Result};

/// K codewords of dimension d, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    entries: Vec<f32>,
}

impl Codebook {
    pub fn new(k: usize, d: usize, entries: Vec<f32>) -> Result<Self> {
        if k < 2 || d == 0 {
            return Err(CtfError::Parameter(format!("codebook needs K >= 2 and d >= 1, got K={k}, d={d}")));
        }
        if entries.len() != k * d {
            return Err(CtfError::Shape(format!("{k}x{d} codebook with {} values", entries.len())));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(CtfError::Parameter("codebook contains non-finite values".into()));
        }
        Ok(Self { k, d, entries })
    }

    /// Gaussian codewords scaled by 1/sqrt(d).
    pub fn random(k: usize, d: usize, rng: &mut SeedStream) -> Result<Self> {
        let t = Tensor::randn(&[k, d], 1.0 / (d as f32).sqrt(), rng);
        Self::new(k, d, t.into_data())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        &self.entries[i * self.d..(i + 1) * self.d]
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    /// Index of the nearest codeword by squared Euclidean distance, lowest index on ties.
    pub fn nearest(&self, z: &[f32]) -> usize {
        let mut best = (0, f32::INFINITY);
        for k in 0..self.k {
            let dist: f32 = self.entry(k).iter().zip(z).map(|(e, v)| (v - e) * (v - e)).sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.k, self.d], self.entries.clone()).expect("codebook shape")
    }
}

const CBK_MAGIC: &[u8; 4] = b"CBK1";

/// "CBK1", u32 K, u32 d, then K·d little-endian f32 values.
pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + cb.entries.len() * 4);
    out.extend_from_slice(CBK_MAGIC);
    out.extend_from_slice(&(cb.k as u32).to_le_bytes());
    out.extend_from_slice(&(cb.d as u32).to_le_bytes());
    for v in &cb.entries {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_codebook(bytes: &[u8]) -> Result<Codebook> {
    if bytes.len() < 12 {
        return Err(CtfError::format(bytes.len() as u64, "codebook header truncated"));
    }
    if &bytes[..4] != CBK_MAGIC {
        return Err(CtfError::format(0, "bad codebook magic"));
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if k < 2 {
        return Err(CtfError::format(4, format!("codebook K={k}, need at least 2")));
    }
    if d == 0 {
        return Err(CtfError::format(8, "codebook d=0"));
    }
    let need = k * d * 4;
    if bytes.len() - 12 != need {
        return Err(CtfError::format(
            bytes.len() as u64,
            format!("codebook payload: expected {need} bytes, found {}", bytes.len() - 12),
        ));
    }
    let entries = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Codebook::new(k, d, entries).map_err(|e| CtfError::format(12, e.to_string()))
}

pub fn export_codebook(cb: &Codebook, path: &Path) -> Result<()> {
    fs::write(path, encode_codebook(cb)).map_err(|e| CtfError::io(path, e))
}

pub fn import_codebook(path: &Path) -> Result<Codebook> {
    decode_codebook(&fs::read(path).map_err(|e| CtfError::io(path, e))?)
}

/// h×w grid of d-dimensional latents.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f32>,
}

impl LatentGrid {
    pub fn cell(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// h×w grid of token indices, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != h * w {
            return Err(CtfError::Shape(format!("{h}x{w} grid with {} tokens", tokens.len())));
        }
        Ok(Self { h, w, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub patch: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub commitment: f64,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            latent_dim: 16,
            patch: 4,
            steps: 1500,
            batch_size: 32,
            lr: 1e-2,
            lr_final: 1e-3,
            commitment: 0.25,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerParams {
    pub patch: usize,
    /// `[patch·patch·3, d]`
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    /// `[d, patch·patch·3]`
    pub dec_w: Tensor,
    pub dec_b: Tensor,
    pub codebook: Codebook,
}

impl TokenizerParams {
    pub fn init(cfg: &TokenizerConfig, rng: &mut SeedStream) -> Result<Self> {
        let p = cfg.patch * cfg.patch * 3;
        let d = cfg.latent_dim;
        Ok(Self {
            patch: cfg.patch,
            enc_w: Tensor::randn(&[p, d], 1.0 / (p as f32).sqrt(), &mut rng.split("enc")),
            enc_b: Tensor::zeros(&[d]),
            dec_w: Tensor::randn(&[d, p], 1.0 / (d as f32).sqrt(), &mut rng.split("dec")),
            dec_b: Tensor::filled(&[p], 0.5),
            codebook: Codebook::random(cfg.codebook_size, d, &mut rng.split("codebook"))?,
        })
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn latent_dim(&self) -> usize {
        self.codebook.d
    }

    /// Named tensors in a fixed order (encoder, decoder, codebook).
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("enc_w".into(), self.enc_w.clone()),
            ("enc_b".into(), self.enc_b.clone()),
            ("dec_w".into(), self.dec_w.clone()),
            ("dec_b".into(), self.dec_b.clone()),
            ("codebook".into(), self.codebook.to_tensor()),
        ]
    }

    pub fn from_named_tensors(patch: usize, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| CtfError::MissingArtifact(format!("tokenizer tensor {name}")))
        };
        let (enc_w, enc_b, dec_w, dec_b, cb) = (get("enc_w")?, get("enc_b")?, get("dec_w")?, get("dec_b")?, get("codebook")?);
        let (k, d) = cb.dims2()?;
        let p = patch * patch * 3;
        if enc_w.shape() != [p, d] || enc_b.shape() != [d] || dec_w.shape() != [d, p] || dec_b.shape() != [p] {
            return Err(CtfError::Shape("tokenizer tensors inconsistent with patch size and d".into()));
        }
        Ok(Self { patch, enc_w, enc_b, dec_w, dec_b, codebook: Codebook::new(k, d, cb.into_data())? })
    }

    fn grid_dims(&self, image: &Image) -> Result<(usize, usize)> {
        if image.height % self.patch != 0 || image.width % self.patch != 0 {
            return Err(CtfError::Parameter(format!(
                "{}x{} image is not divisible by patch size {}",
                image.height, image.width, self.patch
            )));
        }
        Ok((image.height / self.patch, image.width / self.patch))
    }
}

/// Flattened patches `[h·w, patch·patch·3]` in raster order; each patch is (dy, dx, channel) ordered.
pub fn patchify(image: &Image, patch: usize) -> Result<Vec<f32>> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(CtfError::Parameter(format!(
            "{}x{} image is not divisible by patch size {patch}",
            image.height, image.width
        )));
    }
    let (h, w) = (image.height / patch, image.width / patch);
    let mut out = Vec::with_capacity(image.pixels.len());
    for py in 0..h {
        for px in 0..w {
            for dy in 0..patch {
                let y = py * patch + dy;
                let start = (y * image.width + px * patch) * 3;
                out.extend_from_slice(&image.pixels[start..start + patch * 3]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f32], h: usize, w: usize, patch: usize) -> Result<Image> {
    let (height, width) = (h * patch, w * patch);
    if patches.len() != height * width * 3 {
        return Err(CtfError::Shape("patch buffer size".into()));
    }
    let mut pixels = vec![0.0; height * width * 3];
    let pdim = patch * patch * 3;
    for py in 0..h {
        for px in 0..w {
            let src = &patches[(py * w + px) * pdim..(py * w + px + 1) * pdim];
            for dy in 0..patch {
                let y = py * patch + dy;
                let start = (y * width + px * patch) * 3;
                pixels[start..start + patch * 3].copy_from_slice(&src[dy * patch * 3..(dy + 1) * patch * 3]);
            }
        }
    }
    Image::new(height, width, pixels)
}

fn affine(x: &[f32], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f32> {
    let (k, n) = w.dims2().expect("weight matrix");
    let mut out = vec![0.0; rows * n];
    for r in out.chunks_mut(n) {
        r.copy_from_slice(b.data());
    }
    ctf_tensor::kernels::gemm(rows, k, n, x, false, w.data(), false, 1.0, &mut out);
    out
}

pub fn encode(image: &Image, params: &TokenizerParams) -> Result<LatentGrid> {
    let (h, w) = params.grid_dims(image)?;
    let patches = patchify(image, params.patch)?;
    let data = affine(&patches, h * w, &params.enc_w, &params.enc_b);
    Ok(LatentGrid { h, w, d: params.latent_dim(), data })
}

/// Nearest-codeword assignment per cell, with the quantised latents.
pub fn quantize(z: &LatentGrid, codebook: &Codebook) -> Result<(TokenGrid, LatentGrid)> {
    if z.d != codebook.d {
        return Err(CtfError::Shape(format!("latent d={} vs codebook d={}", z.d, codebook.d)));
    }
    let n = z.h * z.w;
    let tokens: Vec<usize> = (0..n).map(|i| codebook.nearest(z.cell(i))).collect();
    let data = tokens.iter().flat_map(|&t| codebook.entry(t).iter().copied()).collect();
    Ok((TokenGrid::new(z.h, z.w, tokens)?, LatentGrid { h: z.h, w: z.w, d: z.d, data }))
}

pub fn tokenize(image: &Image, params: &TokenizerParams) -> Result<TokenGrid> {
    Ok(quantize(&encode(image, params)?, &params.codebook)?.0)
}

/// Tokens → codewords → per-patch affine decode → clamp to [0, 1].
pub fn decode_tokens(tokens: &TokenGrid, params: &TokenizerParams) -> Result<Image> {
    let k = params.codebook.k;
    if let Some(&bad) = tokens.tokens.iter().find(|&&t| t >= k) {
        return Err(CtfError::Index(format!("token {bad} outside codebook of {k}")));
    }
    let zq: Vec<f32> = tokens.tokens.iter().flat_map(|&t| params.codebook.entry(t).iter().copied()).collect();
    let mut patches = affine(&zq, tokens.len(), &params.dec_w, &params.dec_b);
    patches.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    unpatchify(&patches, tokens.h, tokens.w, params.patch)
}

pub fn reconstruct(image: &Image, params: &TokenizerParams) -> Result<Image> {
    decode_tokens(&tokenize(image, params)?, params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub steps: usize,
    pub final_loss: f32,
    /// Mean per-pixel squared error of clamped reconstructions over the training set.
    pub recon_mse: f64,
    /// Fraction of codewords used when tokenizing the training set.
    pub codebook_usage: f64,
    pub loss_curve: Vec<f32>,
}

/// Fraction of codebook entries that occur in `grids`.
pub fn codebook_usage(grids: &[TokenGrid], k: usize) -> f64 {
    let mut seen = vec![false; k];
    grids.iter().flat_map(|g| &g.tokens).for_each(|&t| seen[t] = true);
    seen.iter().filter(|&&s| s).count() as f64 / k as f64
}

/// Trains encoder, decoder and codebook jointly on reconstruction MSE plus the
/// codebook and commitment terms, with a straight-through estimator across quantisation.
pub fn train_tokenizer(dataset: &LabeledDataset, cfg: &TokenizerConfig) -> Result<(TokenizerParams, TokenizerReport)> {
    if dataset.is_empty() {
        return Err(CtfError::Parameter("cannot train a tokenizer on an empty dataset".into()));
    }
    let root = SeedStream::new(cfg.seed);
    let mut params = TokenizerParams::init(cfg, &mut root.split("init"))?;
    let patch_sets: Vec<Vec<f32>> =
        dataset.images.iter().map(|im| patchify(im, cfg.patch)).collect::<Result<_>>()?;
    let pdim = params.patch_dim();

    let mut tensors = [
        params.enc_w.clone(),
        params.enc_b.clone(),
        params.dec_w.clone(),
        params.dec_b.clone(),
        params.codebook.to_tensor(),
    ];
    let opt_cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let mut opt = OptimState::new(opt_cfg, &tensors.iter().collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = root.split("shuffle");
    let mut cursor = order.len();
    let mut curve = Vec::with_capacity(cfg.steps);
    let batch = cfg.batch_size.max(1).min(dataset.len());

    for step in 0..cfg.steps {
        let mut x = Vec::with_capacity(batch * patch_sets[0].len());
        for _ in 0..batch {
            if cursor == order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            x.extend_from_slice(&patch_sets[order[cursor]]);
            cursor += 1;
        }
        let rows = x.len() / pdim;
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let (ew, eb, dw, db, cb) = (ids[0], ids[1], ids[2], ids[3], ids[4]);
        let xn = tape.constant(Tensor::new(vec![rows, pdim], x)?);
        let z = tape.matmul(xn, ew)?;
        let z = tape.add_bias(z, eb)?;
        let codebook = Codebook::new(cfg.codebook_size, cfg.latent_dim, tensors[4].data().to_vec())?;
        let zv = tape.value(z).data();
        let idx: Vec<usize> = zv.chunks(cfg.latent_dim).map(|c| codebook.nearest(c)).collect();
        let zq = tape.gather_rows(cb, &idx)?;
        // straight-through: forward value zq, gradient flows to z
        let delta = tape.sub(zq, z)?;
        let delta = tape.stop_grad(delta);
        let st = tape.add(z, delta)?;
        let rec = tape.matmul(st, dw)?;
        let rec = tape.add_bias(rec, db)?;
        let rec_loss = tape.mse(rec, xn)?;
        let z_sg = tape.stop_grad(z);
        let cb_loss = tape.mse(zq, z_sg)?;
        let zq_sg = tape.stop_grad(zq);
        let commit = tape.mse(z, zq_sg)?;
        let commit = tape.scale(commit, cfg.commitment as f32)?;
        let loss = tape.add(rec_loss, cb_loss)?;
        let loss = tape.add(loss, commit)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(CtfError::Training { step: step as u64, message: "tokenizer loss is not finite".into() });
        }
        let mut grads = tape.backward(loss).map_err(|e| training_error(step, e))?;
        let g: Vec<Tensor> = ids.iter().map(|&id| grads.take(id)).collect();
        let lr = cosine_lr(step as u64, cfg.steps as u64, cfg.lr, cfg.lr_final) as f32;
        let mut refs: Vec<&mut Tensor> = tensors.iter_mut().collect();
        opt.step(&mut refs, &g, lr).map_err(|e| training_error(step, e))?;
        curve.push(loss_value);
    }

    let [enc_w, enc_b, dec_w, dec_b, cb] = tensors;
    params.enc_w = enc_w;
    params.enc_b = enc_b;
    params.dec_w = dec_w;
    params.dec_b = dec_b;
    params.codebook = Codebook::new(cfg.codebook_size, cfg.latent_dim, cb.into_data())?;

    let grids: Vec<TokenGrid> = dataset.images.iter().map(|im| tokenize(im, &params)).collect::<Result<_>>()?;
    let recon_mse = grids
        .iter()
        .zip(&dataset.images)
        .map(|(g, im)| Ok(decode_tokens(g, &params)?.mse(im)))
        .sum::<Result<f64>>()?
        / dataset.len() as f64;
    let report = TokenizerReport {
        steps: cfg.steps,
        final_loss: curve.last().copied().unwrap_or(f32::NAN),
        recon_mse,
        codebook_usage: codebook_usage(&grids, cfg.codebook_size),
        loss_curve: curve,
    };
    Ok((params, report))
}

fn training_error(step: usize, e: ctf_tensor::TensorError) -> CtfError {
    CtfError::Training { step: step as u64, message: e.to_string() }
}
