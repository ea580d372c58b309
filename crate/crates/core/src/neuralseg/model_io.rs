//! Binary model files: `TPIS` magic, format version, network spec, raw
//! parameter tensors and training metadata, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{build_net, NetParams};
use super::spec::NetSpec;
use super::TrainConfig;
use crate::tenpool::TensorPoolConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TPIS";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub train: TrainConfig,
    pub tensor_pool: TensorPoolConfig,
    /// Working frame the tensor maps were computed at.
    pub frame: [usize; 2],
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetSpec,
    pub params: NetParams<f32>,
    pub metadata: ModelMetadata,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_blob(w: &mut impl Write, bytes: &[u8]) -> std::io::Result<()> {
    put_u64(w, bytes.len() as u64)?;
    w.write_all(bytes)
}

/// Serializes a model to any writer.
pub fn encode_model(model: &Model, w: &mut impl Write) -> Result<()> {
    let spec_json = serde_json::to_vec(&model.spec).map_err(|e| Error::Format(e.to_string()))?;
    let meta_json = serde_json::to_vec(&model.metadata).map_err(|e| Error::Format(e.to_string()))?;
    let tensors = model.params.all_tensors();
    let io = |e| Error::io("<model stream>", e);
    w.write_all(MAGIC).map_err(io)?;
    put_u32(w, MODEL_VERSION).map_err(io)?;
    put_blob(w, &spec_json).map_err(io)?;
    put_u64(w, model.params.seed).map_err(io)?;
    put_u64(w, tensors.len() as u64).map_err(io)?;
    for t in tensors {
        put_u64(w, t.len() as u64).map_err(io)?;
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(io)?;
    }
    put_blob(w, &meta_json).map_err(io)?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated model file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        if n > (1 << 34) {
            return Err(Error::Format(format!("implausible {what} length {n}")));
        }
        Ok(n as usize)
    }
}

/// Parses a model from any reader.
pub fn decode_model(r: impl Read) -> Result<Model> {
    let mut cur = Cursor { inner: r };
    if &cur.bytes(4)?[..] != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let n = cur.len("spec")?;
    let spec: NetSpec = serde_json::from_slice(&cur.bytes(n)?)
        .map_err(|e| Error::Format(format!("model spec: {e}")))?;
    spec.validate()?;
    let seed = cur.u64()?;
    let (mut params, _) = build_net::<f32>(&spec, seed)?;
    let count = cur.len("tensor count")?;
    let slots = params.all_tensors_mut();
    if count != slots.len() {
        return Err(Error::Format(format!(
            "model has {count} tensors, spec expects {}",
            slots.len()
        )));
    }
    for (i, slot) in slots.into_iter().enumerate() {
        let len = cur.len("tensor")?;
        if len != slot.len() {
            return Err(Error::Format(format!(
                "tensor {i} has {len} values, spec expects {}",
                slot.len()
            )));
        }
        let raw = cur.bytes(len * 4)?;
        for (dst, chunk) in slot.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    let n = cur.len("metadata")?;
    let metadata: ModelMetadata = serde_json::from_slice(&cur.bytes(n)?)
        .map_err(|e| Error::Format(format!("model metadata: {e}")))?;
    params.check_against(&spec)?;
    Ok(Model {
        spec,
        params,
        metadata,
    })
}

pub fn write_model(model: &Model, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    encode_model(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_model(path: &Path) -> Result<Model> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_model(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralseg::spec::desk_reference;

    fn sample() -> Model {
        let spec = desk_reference(2, 16, 24, [4, 4, 8]).unwrap();
        let (mut params, _) = build_net::<f32>(&spec, 3).unwrap();
        for t in params.all_tensors_mut() {
            for (i, v) in t.iter_mut().enumerate() {
                *v += (i as f32).sin() * 1e-3 + f32::EPSILON;
            }
        }
        Model {
            spec,
            params,
            metadata: ModelMetadata {
                seed: 3,
                epochs: 7,
                train: TrainConfig::default(),
                tensor_pool: TensorPoolConfig::default(),
                frame: [16, 24],
                categories: vec!["rectangle".into(), "disk".into()],
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = sample();
        let mut buf = Vec::new();
        encode_model(&m, &mut buf).unwrap();
        let back = decode_model(&buf[..]).unwrap();
        assert_eq!(back, m);
        let bits = |m: &Model| -> Vec<u32> {
            m.params.all_tensors().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut buf = Vec::new();
        encode_model(&sample(), &mut buf).unwrap();
        buf[4..8].copy_from_slice(&99u32.to_le_bytes());
        match decode_model(&buf[..]) {
            Err(Error::Version { found: 99, expected }) => assert_eq!(expected, MODEL_VERSION),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_and_bad_magic_fail() {
        let mut buf = Vec::new();
        encode_model(&sample(), &mut buf).unwrap();
        assert!(decode_model(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(matches!(decode_model(&buf[..]), Err(Error::Format(_))));
    }
}
