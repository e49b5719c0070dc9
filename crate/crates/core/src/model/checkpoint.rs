//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "HYDRAREC"
//! version  u32      1
//! config   u32 length + UTF-8 JSON ModelConfig
//! metadata u32 length + UTF-8 JSON object
//! count    u32      number of tensors
//! tensor   u32 name length, name bytes, u32 rank, rank × u64 dims,
//!          numel × f32 row-major values
//! ```
//!
//! Model parameters come first in registry order; any further tensors
//! (optimizer moments, for instance) follow under their own names.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HYDRAREC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, metadata: serde_json::Value) -> Self {
        Self {
            config: model.config.clone(),
            metadata,
            tensors: model.params().to_vec(),
        }
    }

    /// The model parameters, validated against the stored config.
    pub fn model(&self) -> Result<Model<f32>> {
        let n = self.config.param_shapes().len();
        if self.tensors.len() < n {
            return Err(Error::Checkpoint(format!(
                "expected at least {n} tensors, found {}",
                self.tensors.len()
            )));
        }
        Model::from_params(self.config.clone(), self.tensors[..n].to_vec())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let config = serde_json::to_vec(&self.config).map_err(std::io::Error::other)?;
        write_block(w, &config)?;
        let meta = serde_json::to_vec(&self.metadata).map_err(std::io::Error::other)?;
        write_block(w, &meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_block(w, name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &dim in t.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::io("<checkpoint>", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a hydrarec checkpoint".into()));
        }
        let version = read_u32(r).map_err(io)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config: ModelConfig = serde_json::from_slice(&read_block(r).map_err(io)?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let metadata = serde_json::from_slice(&read_block(r).map_err(io)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = read_u32(r).map_err(io)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(read_block(r).map_err(io)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r).map_err(io)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(io)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw).map_err(io)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Self {
            config,
            metadata,
            tensors,
        })
    }
}

fn write_block(w: &mut impl Write, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_block(r: &mut impl Read) -> std::io::Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionSpec;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            layers: 1,
            ffn_dim: 16,
            ..ModelConfig::new(30, 8, 7)
        }
        .with_attention(AttentionSpec::hydra(8));
        let model = Model::<f32>::init(cfg, 5).unwrap();
        let mut ck = Checkpoint::from_model(&model, serde_json::json!({"epoch": 3}));
        ck.tensors.push(("extra".into(), Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let m = back.model().unwrap();
        for ((_, a), (_, b)) in m.params().iter().zip(model.params()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_foreign_bytes() {
        let err = Checkpoint::read_from(&mut &b"NOTACKPT\x01\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }
}
