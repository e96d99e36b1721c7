//! The frozen base model: a tiny decoder-only transformer over bytes.
//!
//! Parameters are plain dense matrices in a fixed declaration order. The
//! base is immutable after construction; the only trainable state lives in
//! LoRA adapters layered on top.

use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use crate::tensor::{Matrix, Scalar};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

/// Token ids above the 256 raw bytes.
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;

/// Byte vocabulary plus BOS/EOS/PAD.
pub const BYTE_VOCAB: usize = 259;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"FLSIM1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: BYTE_VOCAB,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 128,
        }
    }
}

/// One adapted linear layer: computes y = W x with W of shape d_out x d_in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
        {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }

    /// The linear layers that receive LoRA adapters, in canonical order:
    /// q/k/v/o projections and both MLP projections of every block.
    /// Embeddings and the LM head are not adapted.
    pub fn adapted_layers(&self) -> Vec<LayerInfo> {
        let d = self.d_model;
        let mut out = Vec::with_capacity(self.n_layers * 6);
        for b in 0..self.n_layers {
            for proj in ["q", "k", "v", "o"] {
                out.push(LayerInfo {
                    name: format!("blocks.{b}.attn.{proj}"),
                    d_out: d,
                    d_in: d,
                });
            }
            out.push(LayerInfo {
                name: format!("blocks.{b}.mlp.up"),
                d_out: self.d_ff,
                d_in: d,
            });
            out.push(LayerInfo {
                name: format!("blocks.{b}.mlp.down"),
                d_out: d,
                d_in: self.d_ff,
            });
        }
        out
    }
}

/// Frozen transformer parameters in declaration order.
#[derive(Debug, Clone)]
pub struct BaseModel<T> {
    pub config: ModelConfig,
    params: Vec<(String, Matrix<T>)>,
    pub frozen: bool,
}

impl<T: Scalar> BaseModel<T> {
    /// Random init standing in for pretrained weights: Gaussian embeddings,
    /// Xavier-scaled linear layers.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| -> Matrix<T> {
            let dist = Normal::new(0.0, std).expect("valid std");
            let mut m = Matrix::zeros(rows, cols);
            for v in m.as_mut_slice() {
                *v = T::from_f64(dist.sample(&mut rng));
            }
            m
        };

        let d = config.d_model;
        let mut params = Vec::new();
        params.push(("tok_emb".to_string(), gauss(config.vocab_size, d, 0.1)));
        params.push(("pos_emb".to_string(), gauss(config.max_seq_len, d, 0.05)));
        for layer in config.adapted_layers() {
            let std = 1.0 / (layer.d_in as f64).sqrt();
            params.push((layer.name, gauss(layer.d_out, layer.d_in, std)));
        }
        params.push((
            "lm_head".to_string(),
            gauss(config.vocab_size, d, 1.0 / (d as f64).sqrt()),
        ));

        Ok(BaseModel {
            config,
            params,
            frozen: true,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<(String, Matrix<T>)>) -> Result<Self> {
        config.validate()?;
        let model = BaseModel {
            config,
            params,
            frozen: true,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let cfg = &self.config;
        let mut expected = vec![
            ("tok_emb".to_string(), cfg.vocab_size, cfg.d_model),
            ("pos_emb".to_string(), cfg.max_seq_len, cfg.d_model),
        ];
        for l in cfg.adapted_layers() {
            expected.push((l.name, l.d_out, l.d_in));
        }
        expected.push(("lm_head".to_string(), cfg.vocab_size, cfg.d_model));

        if expected.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for ((name, rows, cols), (pname, m)) in expected.iter().zip(&self.params) {
            if name != pname || m.shape() != (*rows, *cols) {
                return Err(Error::Config(format!(
                    "parameter {pname} has shape {:?}, expected {name} {:?}",
                    m.shape(),
                    (rows, cols)
                )));
            }
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> &Matrix<T> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub(crate) fn param_mut(&mut self, name: &str) -> &mut Matrix<T> {
        self.params
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.params.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, m)| m.len()).sum()
    }

    /// SHA-256 over all parameter entries in declaration order. Used by the
    /// freeze contract: the hash must be identical before and after training.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, m) in &self.params {
            hasher.update(name.as_bytes());
            for v in m.as_slice() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

impl BaseModel<f32> {
    /// Serializes as: magic, config (six u32), tensor count, then per tensor
    /// name length, name, rows, cols, f32 entries little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        let cfg = &self.config;
        for v in [
            cfg.vocab_size,
            cfg.d_model,
            cfg.n_layers,
            cfg.n_heads,
            cfg.d_ff,
            cfg.max_seq_len,
        ] {
            write_u32(&mut w, v as u32)?;
        }
        write_u32(&mut w, self.params.len() as u32)?;
        for (name, m) in &self.params {
            write_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, m.rows() as u32)?;
            write_u32(&mut w, m.cols() as u32)?;
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint too short for magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let config = ModelConfig {
            vocab_size: dims[0],
            d_model: dims[1],
            n_layers: dims[2],
            n_heads: dims[3],
            d_ff: dims[4],
            max_seq_len: dims[5],
        };
        let count = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)
                .map_err(|_| Error::Format("checkpoint truncated in name".into()))?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::Format("checkpoint name not utf-8".into()))?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let mut data = vec![0f32; rows * cols];
            for v in &mut data {
                let mut buf = [0u8; 4];
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Format("checkpoint truncated in tensor".into()))?;
                *v = f32::from_le_bytes(buf);
            }
            params.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        BaseModel::from_params(config, params)
    }
}
