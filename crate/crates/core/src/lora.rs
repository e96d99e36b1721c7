//! Low-rank adapters: the only trainable (and transmitted) state.
//!
//! Each adapted linear layer W (d_out x d_in) carries a pair B (d_out x r),
//! A (r x d_in). The adapted forward is h = Wx + B(Ax), computed as two
//! rank-r products; merge-for-inference folds BA into W.

use crate::error::{Error, Result};
use crate::model::{BaseModel, ModelConfig};
use crate::rng::seeded_rng;
use crate::tensor::{matmul_nn, Matrix, Scalar};
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;

pub const ADAPTER_MAGIC: &[u8; 6] = b"FLADP1";

/// Where a set of adapters came from; carried through the federation loop
/// for logging, never serialized into the adapter file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Init,
    Global { round: u32 },
    Client { round: u32, client_id: u64 },
    Loaded,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Init => write!(f, "init"),
            Provenance::Global { round } => write!(f, "global@{round}"),
            Provenance::Client { round, client_id } => write!(f, "client{client_id}@{round}"),
            Provenance::Loaded => write!(f, "loaded"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub layer_name: String,
    /// r x d_in
    pub a: Matrix<T>,
    /// d_out x r
    pub b: Matrix<T>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    /// B(Ax) for a single input vector of length d_in, without ever forming
    /// the d_out x d_in product.
    pub fn contribution(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.d_in() {
            return Err(Error::Input(format!(
                "adapter {} expects input length {}, got {}",
                self.layer_name,
                self.d_in(),
                x.len()
            )));
        }
        let r = self.rank();
        let mut ax = vec![T::zero(); r];
        for (i, axi) in ax.iter_mut().enumerate() {
            let row = self.a.row(i);
            let mut acc = T::zero();
            for (&av, &xv) in row.iter().zip(x) {
                acc = acc + av * xv;
            }
            *axi = acc;
        }
        let mut out = vec![T::zero(); self.d_out()];
        for (o, outi) in out.iter_mut().enumerate() {
            let row = self.b.row(o);
            let mut acc = T::zero();
            for (&bv, &axv) in row.iter().zip(&ax) {
                acc = acc + bv * axv;
            }
            *outi = acc;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapterSet<T> {
    adapters: Vec<LoraAdapter<T>>,
    rank: usize,
    pub provenance: Provenance,
}

impl<T: Scalar> LoraAdapterSet<T> {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn adapters(&self) -> &[LoraAdapter<T>] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter<T>] {
        &mut self.adapters
    }

    pub fn get(&self, layer_name: &str) -> Option<&LoraAdapter<T>> {
        self.adapters.iter().find(|a| a.layer_name == layer_name)
    }

    pub fn get_mut(&mut self, layer_name: &str) -> Option<&mut LoraAdapter<T>> {
        self.adapters
            .iter_mut()
            .find(|a| a.layer_name == layer_name)
    }

    /// Total trainable entries: sum of r*(d_out + d_in) over layers.
    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(|a| a.a.len() + a.b.len()).sum()
    }

    /// L2 norm of the entrywise difference against another set of the same shape.
    pub fn update_l2(&self, other: &Self) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.adapters.iter().zip(&other.adapters) {
            for (x, y) in a.a.as_slice().iter().zip(b.a.as_slice()) {
                let d = x.as_f64() - y.as_f64();
                acc += d * d;
            }
            for (x, y) in a.b.as_slice().iter().zip(b.b.as_slice()) {
                let d = x.as_f64() - y.as_f64();
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.adapters.len() == other.adapters.len()
            && self.adapters.iter().zip(&other.adapters).all(|(x, y)| {
                x.layer_name == y.layer_name && x.a.bitwise_eq(&y.a) && x.b.bitwise_eq(&y.b)
            })
    }

    /// Checks this set matches the layers the model declares as adapted.
    pub fn validate_against(&self, config: &ModelConfig) -> Result<()> {
        let layers = config.adapted_layers();
        if layers.len() != self.adapters.len() {
            return Err(Error::Config(format!(
                "adapter set has {} layers, model declares {}",
                self.adapters.len(),
                layers.len()
            )));
        }
        for (info, adapter) in layers.iter().zip(&self.adapters) {
            if info.name != adapter.layer_name {
                return Err(Error::Config(format!(
                    "adapter order mismatch: expected {}, found {}",
                    info.name, adapter.layer_name
                )));
            }
            if adapter.a.shape() != (self.rank, info.d_in)
                || adapter.b.shape() != (info.d_out, self.rank)
            {
                return Err(Error::Config(format!(
                    "adapter {} has shapes A{:?} B{:?}, expected A{:?} B{:?}",
                    info.name,
                    adapter.a.shape(),
                    adapter.b.shape(),
                    (self.rank, info.d_in),
                    (info.d_out, self.rank)
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapterSet<U> {
        LoraAdapterSet {
            adapters: self
                .adapters
                .iter()
                .map(|a| LoraAdapter {
                    layer_name: a.layer_name.clone(),
                    a: a.a.cast(),
                    b: a.b.cast(),
                })
                .collect(),
            rank: self.rank,
            provenance: self.provenance.clone(),
        }
    }
}

/// Fresh adapters: A ~ Gaussian(0, (1/rank)^2), B = 0, so BA = 0 and the
/// adapted model starts exactly at the base model.
pub fn init_adapters<T: Scalar>(
    model: &BaseModel<T>,
    rank: usize,
    seed: u64,
) -> Result<LoraAdapterSet<T>> {
    if rank == 0 {
        return Err(Error::Config("lora rank must be at least 1".into()));
    }
    let layers = model.config.adapted_layers();
    for l in &layers {
        if rank > l.d_out.min(l.d_in) {
            return Err(Error::Config(format!(
                "rank {} exceeds min dim {} of layer {}",
                rank,
                l.d_out.min(l.d_in),
                l.name
            )));
        }
    }
    let mut rng = seeded_rng(seed);
    let dist = Normal::new(0.0, 1.0 / rank as f64).expect("valid std");
    let adapters = layers
        .into_iter()
        .map(|l| {
            let mut a = Matrix::zeros(rank, l.d_in);
            for v in a.as_mut_slice() {
                *v = T::from_f64(dist.sample(&mut rng));
            }
            LoraAdapter {
                layer_name: l.name,
                a,
                b: Matrix::zeros(l.d_out, rank),
            }
        })
        .collect();
    Ok(LoraAdapterSet {
        adapters,
        rank,
        provenance: Provenance::Init,
    })
}

/// W <- W + BA per adapted layer, on a fresh copy of the model.
pub fn merge<T: Scalar>(model: &BaseModel<T>, adapters: &LoraAdapterSet<T>) -> Result<BaseModel<T>> {
    adapters.validate_against(&model.config)?;
    let mut merged = model.clone();
    for adapter in &adapters.adapters {
        // BA is exactly zero when either factor is; skipping the add keeps
        // the merged weights bit-identical to the base in that case.
        if adapter.b.all_zero() || adapter.a.all_zero() {
            continue;
        }
        let delta = matmul_nn(&adapter.b, &adapter.a);
        merged.param_mut(&adapter.layer_name).add_assign(&delta);
    }
    Ok(merged)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub adapter_params: usize,
    pub base_params: usize,
    pub fraction: f64,
}

/// Trainable-parameter accounting: sum of r*(d_out + d_in) over adapted
/// layers against the full frozen parameter count.
pub fn trainable_param_count(config: &ModelConfig, rank: usize) -> ParamCount {
    let adapter_params: usize = config
        .adapted_layers()
        .iter()
        .map(|l| rank * (l.d_out + l.d_in))
        .sum();
    let base_params = config.vocab_size * config.d_model
        + config.max_seq_len * config.d_model
        + config
            .adapted_layers()
            .iter()
            .map(|l| l.d_out * l.d_in)
            .sum::<usize>()
        + config.vocab_size * config.d_model;
    ParamCount {
        adapter_params,
        base_params,
        fraction: adapter_params as f64 / base_params as f64,
    }
}

/// Bytes of the serialized form that are not f32 adapter entries. For a
/// fixed model config this is a constant, so
/// serialized length = header_bytes + 4 * adapter_params.
pub fn header_bytes(adapters: &LoraAdapterSet<f32>) -> usize {
    let mut n = 6 + 4 + 4; // magic, rank, layer count
    for a in adapters.adapters() {
        n += 4 + a.layer_name.len() + 4 + 4; // name length, name, d_out, d_in
    }
    n
}

/// Total serialized length; this is the simulated per-client payload.
pub fn payload_bytes(adapters: &LoraAdapterSet<f32>) -> usize {
    header_bytes(adapters) + 4 * adapters.param_count()
}

pub fn serialize_adapters(adapters: &LoraAdapterSet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload_bytes(adapters));
    out.extend_from_slice(ADAPTER_MAGIC);
    out.extend_from_slice(&(adapters.rank as u32).to_le_bytes());
    out.extend_from_slice(&(adapters.adapters.len() as u32).to_le_bytes());
    for a in &adapters.adapters {
        out.extend_from_slice(&(a.layer_name.len() as u32).to_le_bytes());
        out.extend_from_slice(a.layer_name.as_bytes());
        out.extend_from_slice(&(a.d_out() as u32).to_le_bytes());
        out.extend_from_slice(&(a.d_in() as u32).to_le_bytes());
        for v in a.a.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in a.b.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn deserialize_adapters(bytes: &[u8]) -> Result<LoraAdapterSet<f32>> {
    let mut r = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("adapter bytes too short for magic".into()))?;
    if &magic != ADAPTER_MAGIC {
        return Err(Error::Format("bad adapter magic".into()));
    }
    let read_u32 = |r: &mut std::io::Cursor<&[u8]>| -> Result<u32> {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("adapter bytes truncated".into()))?;
        Ok(u32::from_le_bytes(buf))
    };
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 {
        return Err(Error::Format("adapter rank must be positive".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut adapters = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::Format("adapter bytes truncated in name".into()))?;
        let layer_name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("adapter layer name not utf-8".into()))?;
        let d_out = read_u32(&mut r)? as usize;
        let d_in = read_u32(&mut r)? as usize;
        if rank > d_out.min(d_in) {
            return Err(Error::Format(format!(
                "layer {layer_name}: rank {rank} exceeds min dim"
            )));
        }
        let mut read_mat = |rows: usize, cols: usize| -> Result<Matrix<f32>> {
            let mut data = vec![0f32; rows * cols];
            for v in &mut data {
                let mut buf = [0u8; 4];
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Format("adapter bytes truncated in tensor".into()))?;
                *v = f32::from_le_bytes(buf);
            }
            Matrix::from_vec(rows, cols, data)
        };
        let a = read_mat(rank, d_in)?;
        let b = read_mat(d_out, rank)?;
        adapters.push(LoraAdapter { layer_name, a, b });
    }
    if r.position() != bytes.len() as u64 {
        return Err(Error::Format("trailing bytes after adapter payload".into()));
    }
    Ok(LoraAdapterSet {
        adapters,
        rank,
        provenance: Provenance::Loaded,
    })
}

pub fn save_adapters(adapters: &LoraAdapterSet<f32>, path: &Path) -> Result<()> {
    let bytes = serialize_adapters(adapters);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_adapters(path: &Path) -> Result<LoraAdapterSet<f32>> {
    let bytes = std::fs::read(path)?;
    deserialize_adapters(&bytes)
}

/// Construction hook for tests and aggregation.
pub(crate) fn set_from_adapters<T: Scalar>(
    adapters: Vec<LoraAdapter<T>>,
    rank: usize,
    provenance: Provenance,
) -> LoraAdapterSet<T> {
    LoraAdapterSet {
        adapters,
        rank,
        provenance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_model() -> BaseModel<f32> {
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            ..ModelConfig::default()
        };
        BaseModel::init(cfg, 1).unwrap()
    }

    #[test]
    fn init_sets_b_zero_and_is_seed_deterministic() {
        let model = small_model();
        let s1 = init_adapters(&model, 2, 42).unwrap();
        let s2 = init_adapters(&model, 2, 42).unwrap();
        let s3 = init_adapters(&model, 2, 43).unwrap();
        for a in s1.adapters() {
            assert!(a.b.all_zero());
            assert!(!a.a.all_zero());
        }
        assert!(s1.bitwise_eq(&s2));
        assert!(!s1.bitwise_eq(&s3));
    }

    #[test]
    fn init_rejects_rank_too_large() {
        let model = small_model();
        let err = init_adapters(&model, 9, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("blocks.0.attn.q"), "error names the layer: {msg}");
        assert!(init_adapters(&model, 0, 0).is_err());
    }

    #[test]
    fn contribution_matches_dense_oracle() {
        // W0 = I2, r = 1, A = [[1, 1]], B = [[1], [0]], x = [2, 3]
        let adapter = LoraAdapter {
            layer_name: "t".into(),
            a: Matrix::from_rows(&[vec![1.0f32, 1.0]]),
            b: Matrix::from_rows(&[vec![1.0f32], vec![0.0]]),
        };
        let contrib = adapter.contribution(&[2.0, 3.0]).unwrap();
        assert_eq!(contrib, vec![5.0, 0.0]);
        // h = W0 x + contribution with W0 = I
        let h: Vec<f32> = [2.0, 3.0].iter().zip(&contrib).map(|(x, c)| x + c).collect();
        assert_eq!(h, vec![7.0, 3.0]);

        // dense oracle: (B*A) x
        let ba = matmul_nn(&adapter.b, &adapter.a);
        let oracle: Vec<f32> = (0..2)
            .map(|i| ba.row(i).iter().zip([2.0, 3.0].iter()).map(|(w, x)| w * x).sum())
            .collect();
        assert_eq!(contrib, oracle);
    }

    #[test]
    fn contribution_zero_cases() {
        let adapter = LoraAdapter {
            layer_name: "t".into(),
            a: Matrix::from_rows(&[vec![0.0f32, 0.0]]),
            b: Matrix::from_rows(&[vec![5.0f32], vec![-3.0]]),
        };
        assert_eq!(adapter.contribution(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        let adapter2 = LoraAdapter {
            layer_name: "t".into(),
            a: Matrix::from_rows(&[vec![4.0f32, 1.0]]),
            b: Matrix::zeros(2, 1),
        };
        assert_eq!(adapter2.contribution(&[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert!(adapter2.contribution(&[1.0]).is_err());
    }

    #[test]
    fn merge_with_zero_b_is_bitwise_base() {
        let model = small_model();
        let adapters = init_adapters(&model, 2, 5).unwrap();
        let merged = merge(&model, &adapters).unwrap();
        assert_eq!(model.param_hash(), merged.param_hash());
    }

    #[test]
    fn merging_twice_adds_twice() {
        let model = small_model();
        let mut adapters = init_adapters(&model, 2, 5).unwrap();
        // give B mass so BA != 0
        for a in 0..adapters.adapters().len() {
            let name = adapters.adapters()[a].layer_name.clone();
            let ad = adapters.get_mut(&name).unwrap();
            for v in ad.b.as_mut_slice() {
                *v = 0.01;
            }
        }
        let once = merge(&model, &adapters).unwrap();
        let twice = merge(&once, &adapters).unwrap();
        assert_ne!(once.param_hash(), twice.param_hash());
        // twice = base + 2BA
        let w_base = model.param("blocks.0.attn.q");
        let w_once = once.param("blocks.0.attn.q");
        let w_twice = twice.param("blocks.0.attn.q");
        let d1 = w_once.sub(w_base);
        let d2 = w_twice.sub(w_base);
        assert!(d2.max_abs_diff(&d1.scale(2.0)) < 1e-6);
    }

    #[test]
    fn param_count_formula() {
        let cfg = ModelConfig::default();
        // single 64x64 linear at r=8 contributes 8*(64+64) = 1024
        let q = &cfg.adapted_layers()[0];
        assert_eq!(8 * (q.d_out + q.d_in), 1024);

        let pc = trainable_param_count(&cfg, 8);
        let oracle: usize = cfg
            .adapted_layers()
            .iter()
            .map(|l| 8 * (l.d_out + l.d_in))
            .sum();
        assert_eq!(pc.adapter_params, oracle);
        // linear in rank
        let pc2 = trainable_param_count(&cfg, 16);
        assert_eq!(pc2.adapter_params, 2 * pc.adapter_params);
        assert!(pc2.fraction > pc.fraction);
    }

    #[test]
    fn desk_model_counts_frozen_regression() {
        // Shape-walk oracle over the default desk model at rank 8, frozen.
        let cfg = ModelConfig::default();
        let model = BaseModel::<f32>::init(cfg.clone(), 0).unwrap();
        let walked: usize = model.params().map(|(_, m)| m.len()).sum();
        let pc = trainable_param_count(&cfg, 8);
        assert_eq!(pc.base_params, walked);
        assert_eq!(pc.adapter_params, 14336);
        assert_eq!(pc.base_params, 106880);
        assert!((pc.fraction - 14336.0 / 106880.0).abs() < 1e-12);
    }

    #[test]
    fn serialization_round_trip_is_bitwise() {
        let model = small_model();
        let mut adapters = init_adapters(&model, 2, 9).unwrap();
        let names: Vec<String> = adapters
            .adapters()
            .iter()
            .map(|a| a.layer_name.clone())
            .collect();
        for name in names {
            let ad = adapters.get_mut(&name).unwrap();
            for (i, v) in ad.b.as_mut_slice().iter_mut().enumerate() {
                *v = (i as f32).sin();
            }
        }
        let bytes = serialize_adapters(&adapters);
        assert_eq!(bytes.len(), payload_bytes(&adapters));
        assert_eq!(
            bytes.len(),
            header_bytes(&adapters) + 4 * adapters.param_count()
        );
        let back = deserialize_adapters(&bytes).unwrap();
        assert!(adapters.bitwise_eq(&back));

        // truncation is a format error
        let err = deserialize_adapters(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let err = deserialize_adapters(b"BADMAG").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
