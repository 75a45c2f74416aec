//! Minimal binary checkpoint format (see `docs/checkpoint-format.md`).
//!
//! ```text
//! magic "SRTD" | version u32 | meta_len u32 | meta (UTF-8 JSON)
//! tensor_count u32 | tensors sorted by name:
//!   name_len u32 | name | rank u32 | dims u32*rank | dtype u32 | payload_len u32 | payload
//! ```
//! All integers are little-endian `u32`; payloads are little-endian floats.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExitHead, ExitSet, ModelConfig, Parameters, PerExitHeads};
use crate::tensor::{DType, Scalar, Tensor};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"SRTD";
pub const FORMAT_VERSION: u32 = 1;

/// Configuration echoed into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub exits: ExitSet,
    pub train: Option<TrainConfig>,
    pub seed: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

/// Serialises state into the canonical byte layout.
pub fn encode_checkpoint<T: Scalar>(
    params: &Parameters<T>,
    heads: Option<&PerExitHeads<T>>,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>> {
    if meta.model != params.config {
        return Err(Error::InvalidArgument(
            "checkpoint metadata model config differs from the parameters".into(),
        ));
    }
    let mut tensors: BTreeMap<String, &Tensor<T>> = params.named_tensors().into_iter().collect();
    if let Some(h) = heads {
        for (depth, eh) in &h.heads {
            tensors.insert(format!("exit_{depth}.final_norm"), &eh.final_norm);
            tensors.insert(format!("exit_{depth}.head"), &eh.head);
        }
    }

    let meta_json = serde_json::to_vec(meta).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, to_u32(meta_json.len(), "metadata length")?);
    out.extend_from_slice(&meta_json);
    put_u32(&mut out, to_u32(tensors.len(), "tensor count")?);
    for (name, t) in tensors {
        put_u32(&mut out, to_u32(name.len(), "name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, to_u32(t.shape().len(), "rank")?);
        for &d in t.shape() {
            put_u32(&mut out, to_u32(d, "dimension")?);
        }
        put_u32(&mut out, T::DTYPE.code());
        put_u32(&mut out, to_u32(t.len() * T::DTYPE.size(), "payload length")?);
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(
    params: &Parameters<T>,
    heads: Option<&PerExitHeads<T>>,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, heads, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

type Decoded<T> = (Parameters<T>, Option<PerExitHeads<T>>, CheckpointMeta);

/// Parses a checkpoint; tensors stored in either dtype are converted to `T`.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], origin: &Path) -> Result<Decoded<T>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotACheckpoint(origin.to_path_buf()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
    meta.model.validate()?;
    meta.exits.validate(meta.model.n_blocks)?;

    let count = r.u32("tensor count")? as usize;
    let mut found: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let code = r.u32("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Corrupt(format!("{name}: unknown dtype {code}")))?;
        let payload_len = r.u32("payload length")? as usize;
        let numel: usize = dims.iter().product();
        if numel * dtype.size() != payload_len {
            return Err(Error::Corrupt(format!(
                "{name}: payload of {payload_len} bytes does not match dims {dims:?}"
            )));
        }
        let payload = r.take(payload_len, &name)?;
        let data: Vec<T> = payload
            .chunks_exact(dtype.size())
            .map(|c| match dtype {
                DType::F32 => T::from_f64_lossy(f32::read_le(c) as f64),
                DType::F64 => T::from_f64_lossy(f64::read_le(c)),
            })
            .collect();
        if found.insert(name.clone(), Tensor::from_vec(&dims, data)).is_some() {
            return Err(Error::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut params = Parameters::<T>::zeros(&meta.model);
    for (name, slot) in params.named_tensors_mut() {
        let t = found
            .remove(&name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Corrupt(format!(
                "{name}: shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }

    let mut heads = PerExitHeads::default();
    let keys: Vec<String> = found.keys().cloned().collect();
    for key in keys {
        let Some(rest) = key.strip_prefix("exit_") else {
            return Err(Error::Corrupt(format!("unexpected tensor {key}")));
        };
        let Some((depth, part)) = rest.split_once('.') else {
            return Err(Error::Corrupt(format!("unexpected tensor {key}")));
        };
        let depth: usize = depth
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad exit depth in {key}")))?;
        if part != "final_norm" && part != "head" {
            return Err(Error::Corrupt(format!("unexpected tensor {key}")));
        }
        if heads.heads.contains_key(&depth) {
            continue;
        }
        let norm = found
            .remove(&format!("exit_{depth}.final_norm"))
            .ok_or_else(|| Error::Corrupt(format!("exit {depth} lacks final_norm")))?;
        let head = found
            .remove(&format!("exit_{depth}.head"))
            .ok_or_else(|| Error::Corrupt(format!("exit {depth} lacks head")))?;
        if norm.shape() != params.final_norm.shape() || head.shape() != params.head.shape() {
            return Err(Error::Corrupt(format!("exit {depth} head has the wrong shape")));
        }
        heads.heads.insert(depth, ExitHead { final_norm: norm, head });
    }
    let heads = (!heads.heads.is_empty()).then_some(heads);
    Ok((params, heads, meta))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Decoded<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(cfg: &ModelConfig) -> CheckpointMeta {
        CheckpointMeta {
            model: cfg.clone(),
            exits: ExitSet::new(vec![1, 2], cfg.n_blocks).unwrap(),
            train: Some(TrainConfig::default()),
            seed: 11,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::tiny();
        let p = Parameters::<f32>::init(&cfg, 3).unwrap();
        let m = meta(&cfg);
        let bytes = encode_checkpoint(&p, None, &m).unwrap();
        let (q, heads, m2) = decode_checkpoint::<f32>(&bytes, Path::new("mem")).unwrap();
        assert_eq!(p, q);
        assert!(heads.is_none());
        assert_eq!(m, m2);
        assert_eq!(bytes, encode_checkpoint(&q, None, &m2).unwrap());
    }

    #[test]
    fn heads_use_exit_names() {
        let cfg = ModelConfig::tiny();
        let p = Parameters::<f64>::init(&cfg, 3).unwrap();
        let h = PerExitHeads::cloned_from(&p, &[1, 2]);
        let bytes = encode_checkpoint(&p, Some(&h), &meta(&cfg)).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        for name in ["exit_1.head", "exit_1.final_norm", "exit_2.head", "exit_2.final_norm"] {
            assert!(text.contains(name), "{name}");
        }
        let (_, h2, _) = decode_checkpoint::<f64>(&bytes, Path::new("mem")).unwrap();
        assert_eq!(h2.unwrap(), h);
    }

    #[test]
    fn header_errors() {
        let cfg = ModelConfig::tiny();
        let p = Parameters::<f32>::init(&cfg, 3).unwrap();
        let mut bytes = encode_checkpoint(&p, None, &meta(&cfg)).unwrap();

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_checkpoint::<f32>(&bad, Path::new("x")),
            Err(Error::NotACheckpoint(_))
        ));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint::<f32>(&bad, Path::new("x")),
            Err(Error::UnsupportedVersion(999))
        ));

        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes, Path::new("x")),
            Err(Error::Corrupt(_))
        ));
    }
}
