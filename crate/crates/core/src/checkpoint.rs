//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"TAH1"
//! u32    meta length, then meta as UTF-8 JSON
//! u32    record count
//! per record:
//!   u32  name length, then name bytes
//!   u8   dtype tag (0 = f32, 1 = f64)
//!   u32  ndim, then ndim x u64 extents
//!   payload: numel x dtype-size bytes, row-major
//! ```
//!
//! Records are sorted by name, so save -> load -> save round-trips
//! byte-identically. Backbone weights live at their bare names, decider
//! weights under `decider.`, optimizer moments under `opt.`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decider::{Decider, DeciderConfig};
use crate::error::{Result, TahError};
use crate::model::{Backbone, ModelConfig};
use crate::tensor::{Dtype, OptimizerState, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"TAH1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epoch: u64,
    pub global_step: u64,
    pub optimizer_step: u64,
    pub best_val_ppl: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dtype: Dtype,
    pub model: ModelConfig,
    pub decider: Option<DeciderConfig>,
    pub progress: Option<TrainProgress>,
}

pub struct Record<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

/// Serializes named tensors plus metadata. Names must be unique.
pub fn save<T: Scalar, P: AsRef<Path>>(
    path: P,
    meta: &CheckpointMeta,
    records: &[(String, Tensor<T>)],
) -> Result<()> {
    let mut sorted: Vec<&(String, Tensor<T>)> = records.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(TahError::Format(format!(
                "duplicate record name {}",
                pair[0].0
            )));
        }
    }
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| TahError::Format(format!("meta encode: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, meta_json.len() as u32);
    buf.extend_from_slice(&meta_json);
    put_u32(&mut buf, sorted.len() as u32);
    for (name, tensor) in sorted {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE.tag());
        put_u32(&mut buf, tensor.shape().len() as u32);
        for &d in tensor.shape() {
            put_u64(&mut buf, d as u64);
        }
        for &x in tensor.data().iter() {
            x.write_le(&mut buf);
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TahError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads only the metadata header.
pub fn peek_meta<P: AsRef<Path>>(path: P) -> Result<CheckpointMeta> {
    let mut file = std::fs::File::open(&path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(TahError::Format("bad magic; not a checkpoint".into()));
    }
    let len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
        .map_err(|e| TahError::Format(format!("meta decode: {e}")))?;
    Ok(meta)
}

/// Loads metadata and all records; every record must match `T`'s dtype.
pub fn load<T: Scalar, P: AsRef<Path>>(
    path: P,
) -> Result<(CheckpointMeta, BTreeMap<String, Record<T>>)> {
    let mut file = std::fs::File::open(&path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(TahError::Format("bad magic; not a checkpoint".into()));
    }
    let len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
        .map_err(|e| TahError::Format(format!("meta decode: {e}")))?;
    let count = r.u32()? as usize;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| TahError::Format(format!("record name: {e}")))?;
        let tag = r.take(1)?[0];
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| TahError::Format(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(TahError::Format(format!(
                "record {name} has dtype {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = T::DTYPE.size_bytes();
        let payload = r.take(numel * width)?;
        let data: Vec<T> = payload.chunks_exact(width).map(T::read_le).collect();
        records.insert(name, Record { shape, data });
    }
    if r.pos != r.buf.len() {
        return Err(TahError::Format("trailing bytes after records".into()));
    }
    Ok((meta, records))
}

/// Saves a backbone (optionally with decider and optimizer state) as one
/// container.
pub fn save_model<T: Scalar, P: AsRef<Path>>(
    path: P,
    backbone: &Backbone<T>,
    decider: Option<&Decider<T>>,
    optimizer: Option<(&[(String, Tensor<T>)], &OptimizerState<T>)>,
    progress: Option<TrainProgress>,
) -> Result<()> {
    let mut records = backbone.named_params();
    if let Some(d) = decider {
        for (name, t) in d.named_params() {
            records.push((format!("decider.{name}"), t));
        }
    }
    if let Some((params, state)) = optimizer {
        if params.len() != state.m.len() {
            return Err(TahError::Contract(format!(
                "optimizer state for {} buffers vs {} params",
                state.m.len(),
                params.len()
            )));
        }
        for (i, (name, t)) in params.iter().enumerate() {
            records.push((
                format!("opt.m.{name}"),
                Tensor::from_vec(t.shape(), state.m[i].clone(), false)?,
            ));
            records.push((
                format!("opt.v.{name}"),
                Tensor::from_vec(t.shape(), state.v[i].clone(), false)?,
            ));
        }
    }
    let meta = CheckpointMeta {
        dtype: T::DTYPE,
        model: backbone.config.clone(),
        decider: decider.map(|d| d.config.clone()),
        progress,
    };
    save(path, &meta, &records)
}

pub struct LoadedModel<T: Scalar> {
    pub meta: CheckpointMeta,
    pub backbone: Backbone<T>,
    pub decider: Option<Decider<T>>,
    /// Raw optimizer moment records (`m.<name>` / `v.<name>` keyed).
    pub opt_records: BTreeMap<String, Record<T>>,
}

/// Reconstructs a model from a container written by [`save_model`].
pub fn load_model<T: Scalar, P: AsRef<Path>>(path: P) -> Result<LoadedModel<T>> {
    let (meta, mut records) = load::<T, P>(path)?;
    let mut decider_records = BTreeMap::new();
    let mut opt_records = BTreeMap::new();
    let mut backbone_records = BTreeMap::new();
    for (name, rec) in std::mem::take(&mut records) {
        if let Some(rest) = name.strip_prefix("decider.") {
            decider_records.insert(rest.to_string(), rec);
        } else if let Some(rest) = name.strip_prefix("opt.") {
            opt_records.insert(rest.to_string(), rec);
        } else {
            backbone_records.insert(name, rec);
        }
    }
    let backbone = backbone_from_records(meta.model.clone(), backbone_records)?;
    let decider = match &meta.decider {
        Some(cfg) => Some(decider_from_records(cfg.clone(), decider_records)?),
        None => None,
    };
    Ok(LoadedModel {
        meta,
        backbone,
        decider,
        opt_records,
    })
}

/// Rebuilds an optimizer state from `opt.` records for a parameter list.
pub fn optimizer_state_from_records<T: Scalar>(
    params: &[(String, Tensor<T>)],
    opt_records: &BTreeMap<String, Record<T>>,
    step: u64,
) -> Result<OptimizerState<T>> {
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for (name, t) in params {
        let mr = opt_records
            .get(&format!("m.{name}"))
            .ok_or_else(|| TahError::MissingArtifact(format!("optimizer moment m.{name}")))?;
        let vr = opt_records
            .get(&format!("v.{name}"))
            .ok_or_else(|| TahError::MissingArtifact(format!("optimizer moment v.{name}")))?;
        if mr.data.len() != t.numel() || vr.data.len() != t.numel() {
            return Err(TahError::Format(format!(
                "optimizer moment size mismatch for {name}"
            )));
        }
        m.push(mr.data.clone());
        v.push(vr.data.clone());
    }
    Ok(OptimizerState { step, m, v })
}

fn take_record<T: Scalar>(
    records: &mut BTreeMap<String, Record<T>>,
    name: &str,
    shape: &[usize],
    trainable: bool,
) -> Result<Tensor<T>> {
    let rec = records
        .remove(name)
        .ok_or_else(|| TahError::Format(format!("checkpoint missing record {name}")))?;
    if rec.shape != shape {
        return Err(TahError::Format(format!(
            "record {name}: shape {:?} != expected {:?}",
            rec.shape, shape
        )));
    }
    Tensor::from_vec(shape, rec.data, trainable)
}

fn backbone_from_records<T: Scalar>(
    config: ModelConfig,
    mut records: BTreeMap<String, Record<T>>,
) -> Result<Backbone<T>> {
    config.validate()?;
    // init a skeleton with the right shapes, then replace every tensor
    let skeleton = Backbone::<T>::init(config.clone(), 0)?;
    let h = config.hidden_dim;
    let aw = config.num_heads * config.head_dim;
    let embedding = take_record(&mut records, "embedding", &[config.vocab_size, h], true)?;
    let final_norm = take_record(&mut records, "final_norm", &[h], true)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for i in 0..config.num_layers {
        layers.push(crate::model::LayerParams {
            attn_norm: take_record(&mut records, &format!("layers.{i}.attn_norm"), &[h], true)?,
            wq: take_record(&mut records, &format!("layers.{i}.wq"), &[h, aw], true)?,
            wk: take_record(&mut records, &format!("layers.{i}.wk"), &[h, aw], true)?,
            wv: take_record(&mut records, &format!("layers.{i}.wv"), &[h, aw], true)?,
            wo: take_record(&mut records, &format!("layers.{i}.wo"), &[aw, h], true)?,
            mlp_norm: take_record(&mut records, &format!("layers.{i}.mlp_norm"), &[h], true)?,
            w_gate: take_record(
                &mut records,
                &format!("layers.{i}.w_gate"),
                &[h, config.mlp_dim],
                true,
            )?,
            w_up: take_record(
                &mut records,
                &format!("layers.{i}.w_up"),
                &[h, config.mlp_dim],
                true,
            )?,
            w_down: take_record(
                &mut records,
                &format!("layers.{i}.w_down"),
                &[config.mlp_dim, h],
                true,
            )?,
        });
    }
    let w_out = if config.tie_embeddings {
        None
    } else {
        Some(take_record(
            &mut records,
            "w_out",
            &[h, config.vocab_size],
            true,
        )?)
    };
    let mut lora = BTreeMap::new();
    for (name, pair) in &skeleton.params.lora {
        let a = take_record(
            &mut records,
            &format!("lora.{name}.a"),
            pair.a.shape(),
            true,
        )?;
        let b = take_record(
            &mut records,
            &format!("lora.{name}.b"),
            pair.b.shape(),
            true,
        )?;
        lora.insert(name.clone(), crate::model::LoraPair { a, b });
    }
    if !records.is_empty() {
        let extra: Vec<&String> = records.keys().collect();
        return Err(TahError::Format(format!(
            "checkpoint has unexpected records: {extra:?}"
        )));
    }
    Ok(Backbone {
        config,
        params: crate::model::BackboneParams {
            embedding,
            layers,
            final_norm,
            w_out,
            lora,
        },
    })
}

fn decider_from_records<T: Scalar>(
    config: DeciderConfig,
    mut records: BTreeMap<String, Record<T>>,
) -> Result<Decider<T>> {
    config.validate()?;
    let mut layers = Vec::new();
    let mut fan_in = config.input_dim();
    let dims: Vec<usize> = config.mlp_dims.iter().copied().chain([1]).collect();
    for (i, out) in dims.into_iter().enumerate() {
        let w = take_record(&mut records, &format!("mlp.{i}.weight"), &[fan_in, out], true)?;
        let b = take_record(&mut records, &format!("mlp.{i}.bias"), &[out], true)?;
        layers.push((w, b));
        fan_in = out;
    }
    if !records.is_empty() {
        let extra: Vec<&String> = records.keys().collect();
        return Err(TahError::Format(format!(
            "decider has unexpected records: {extra:?}"
        )));
    }
    Ok(Decider { config, layers })
}
