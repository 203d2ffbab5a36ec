//! Binary checkpoints and content fingerprints.
//!
//! Layout: "CTF1", u32 version, u64 metadata length, metadata JSON, then tensor
//! records `[u32 name length, name, u8 dtype (0 = f32), u8 rank, rank × u64 dims, payload]`.
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ctf_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{encode_cluster_map, ClusterMap};
use crate::error::{CtfError, Result};
use crate::tokenizer::TokenizerParams;

pub const MAGIC: &[u8; 4] = b"CTF1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Optimizer steps consumed; per-step streams are derived from (seed, step).
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// "tokenizer", "stage1", "stage2" or "baseline".
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub rng: RngState,
    /// Fingerprints of upstream artifacts, e.g. "tokenizer" and "clustermap".
    pub fingerprints: BTreeMap<String, String>,
    /// Resolved run configuration that produced the checkpoint, when available.
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ckpt.meta)?;
    let mut out = Vec::with_capacity(meta.len() + 16 + ckpt.tensors.iter().map(|(_, t)| t.numel() * 4 + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for (name, t) in &ckpt.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(CtfError::format(
                self.bytes.len() as u64,
                format!("truncated {what}: expected {n} bytes at offset {}, found {have}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CtfError::format(0, "bad magic, expected CTF1"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CtfError::format(4, format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let meta_len = r.u64("metadata length")? as usize;
    let meta_at = r.pos;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| CtfError::format(meta_at as u64, format!("bad metadata: {e}")))?;
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos as u64;
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| CtfError::format(start + 4, "tensor name is not UTF-8"))?;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(CtfError::UnsupportedDtype(dtype));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).filter(|&n| n > 0);
        let numel = numel.ok_or_else(|| CtfError::format(start, format!("tensor {name} has invalid shape {shape:?}")))?;
        let payload = r.take(numel * 4, &format!("payload of {name}"))?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| CtfError::format(start, e.to_string()))?;
        tensors.push((name, t));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| CtfError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CtfError::MissingArtifact(path.display().to_string()));
    }
    decode_checkpoint(&fs::read(path).map_err(|e| CtfError::io(path, e))?)
}

/// Hex SHA-256 digest.
pub fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest over names, shapes and values of a tensor list.
pub fn tensors_fingerprint(tensors: &[(String, Tensor)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Tokenizer weights as a checkpoint of kind "tokenizer"; the config records the patch size.
pub fn tokenizer_checkpoint(params: &TokenizerParams, seed: u64, step: u64, run_config: Option<serde_json::Value>) -> Checkpoint {
    Checkpoint {
        meta: CheckpointMeta {
            kind: "tokenizer".into(),
            config: serde_json::json!({
                "patch": params.patch,
                "codebook_size": params.codebook.k(),
                "latent_dim": params.codebook.d(),
            }),
            step,
            rng: RngState { seed, step },
            fingerprints: BTreeMap::new(),
            run_config,
        },
        tensors: params.named_tensors(),
    }
}

pub fn tokenizer_from_checkpoint(ckpt: Checkpoint) -> Result<TokenizerParams> {
    if ckpt.meta.kind != "tokenizer" {
        return Err(CtfError::Config(format!("expected a tokenizer checkpoint, got {}", ckpt.meta.kind)));
    }
    let patch = ckpt.meta.config["patch"]
        .as_u64()
        .ok_or_else(|| CtfError::Config("tokenizer checkpoint lacks a patch size".into()))?;
    TokenizerParams::from_named_tensors(patch as usize, ckpt.tensors)
}

pub fn tokenizer_fingerprint(params: &TokenizerParams) -> String {
    tensors_fingerprint(&params.named_tensors())
}

pub fn clustermap_fingerprint(map: &ClusterMap) -> String {
    // the encoding cannot fail for a constructed map
    digest(&encode_cluster_map(map).expect("cluster map encodes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctf_tensor::SeedStream;

    fn sample() -> Checkpoint {
        let mut rng = SeedStream::new(1);
        Checkpoint {
            meta: CheckpointMeta {
                kind: "stage1".into(),
                config: serde_json::json!({"dim": 8}),
                step: 12,
                rng: RngState { seed: 3, step: 12 },
                fingerprints: BTreeMap::from([("tokenizer".to_string(), "abc".to_string())]),
                run_config: None,
            },
            tensors: vec![
                ("a".into(), Tensor::randn(&[3, 4], 1.0, &mut rng)),
                ("b.c".into(), Tensor::randn(&[5], 1.0, &mut rng)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"CTF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        assert_eq!(meta["kind"], "stage1");
        // first record: name length 1, "a", dtype 0, rank 2, dims 3 and 4
        let rec = &bytes[16 + len..];
        assert_eq!(&rec[..4], &1u32.to_le_bytes());
        assert_eq!(rec[4], b'a');
        assert_eq!(&rec[5..7], &[0, 2]);
        assert_eq!(&rec[7..15], &3u64.to_le_bytes());
    }

    #[test]
    fn truncation_reports_expected_and_found() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 6]).unwrap_err();
        match err {
            CtfError::Format { message, .. } => {
                assert!(message.contains("expected 20 bytes"), "{message}");
                assert!(message.contains("found 14"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_version_and_dtype() {
        let mut bytes = encode_checkpoint(&sample()).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_checkpoint(&wrong), Err(CtfError::Format { offset: 0, .. })));
        let mut wrong = bytes.clone();
        wrong[4] = 2;
        assert!(matches!(decode_checkpoint(&wrong), Err(CtfError::Format { offset: 4, .. })));
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        bytes[16 + len + 5] = 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(CtfError::UnsupportedDtype(1))));
    }

    #[test]
    fn fingerprints_track_content() {
        let c = sample();
        let a = tensors_fingerprint(&c.tensors);
        let mut t = c.tensors.clone();
        t[1].1.data_mut()[0] += 1.0;
        assert_ne!(a, tensors_fingerprint(&t));
        assert_eq!(a, tensors_fingerprint(&c.tensors));
        assert_eq!(digest(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
