//! `irmatch-ckpt v1` container.
//!
//! ```text
//! "irmatch-ckpt v1\n"
//! u32 len, config record (key = value text)
//! u32 len, vocabulary file text (len 0: none)
//! u32 tensor count
//! per tensor: u32 len, name; u32 ndim; ndim x u32 dims; f32 values, row-major
//! ```
//! All integers and floats are little-endian. A two-tower checkpoint
//! stores the source tower under names prefixed with `source.`.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{EncoderModel, ModelConfig};
use crate::bpe::Vocabulary;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"irmatch-ckpt v1\n";
const SOURCE_PREFIX: &str = "source.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: Option<Vocabulary>,
    /// The shared encoder, or the binary-side tower of a two-tower model.
    pub model: EncoderModel,
    pub source_model: Option<EncoderModel>,
}

/// Hex SHA-256 of a serialized checkpoint.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }

    fn string(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.blob()?).map_err(|_| Error::format("checkpoint", "invalid UTF-8"))
    }
}

fn write_model(out: &mut Vec<u8>, model: &EncoderModel, prefix: &str) {
    for (name, tensor) in model.params.tensors() {
        put_blob(out, format!("{prefix}{name}").as_bytes());
        put_u32(out, tensor.ndim());
        for &d in tensor.shape() {
            put_u32(out, d);
        }
        for &v in tensor.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn new(model: EncoderModel) -> Self {
        Self { vocab: None, model, source_model: None }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_blob(&mut out, self.model.config.to_kv_string().as_bytes());
        let vocab = self.vocab.as_ref().map(Vocabulary::to_file_string).unwrap_or_default();
        put_blob(&mut out, vocab.as_bytes());
        let per_model = self.model.params.tensors().len();
        put_u32(&mut out, per_model * (1 + usize::from(self.source_model.is_some())));
        write_model(&mut out, &self.model, "");
        if let Some(source) = &self.source_model {
            write_model(&mut out, source, SOURCE_PREFIX);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let config = ModelConfig::from_kv_str(r.string()?)?;
        let vocab_text = r.string()?;
        let vocab = if vocab_text.is_empty() { None } else { Some(Vocabulary::from_file_str(vocab_text)?) };
        let count = r.u32()?;
        let mut tensors = std::collections::HashMap::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?.to_string();
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "tensor too large"))?)?;
            let values: Vec<f64> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            tensors.insert(name, (shape, values));
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        let two_tower = tensors.keys().any(|k| k.starts_with(SOURCE_PREFIX));
        let mut load = |prefix: &str| -> Result<EncoderModel> {
            let mut model = EncoderModel::new(config.clone(), 0)?;
            for (name, mut view) in model.params.tensors_mut() {
                let key = format!("{prefix}{name}");
                let (shape, values) =
                    tensors.remove(&key).ok_or_else(|| Error::format("checkpoint", format!("missing tensor {key}")))?;
                if shape != view.shape() {
                    return Err(Error::format(
                        "checkpoint",
                        format!("tensor {key} has shape {shape:?}, expected {:?}", view.shape()),
                    ));
                }
                for (dst, src) in view.iter_mut().zip(values) {
                    *dst = src;
                }
            }
            Ok(model)
        };
        let model = load("")?;
        let source_model = if two_tower { Some(load(SOURCE_PREFIX)?) } else { None };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::format("checkpoint", format!("unexpected tensor {extra}")));
        }
        Ok(Self { vocab, model, source_model })
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
