//! Checkpoints as a single named-tensor archive.
//!
//! Records, in order: every model parameter under its own name, optimizer
//! moments as `opt.m.<name>` (and `opt.v.<name>` for Adam), then metadata:
//! `__meta.model` (architecture fields), `__meta.opt` (kind, three
//! hyper-parameters, update count), `__meta.step`, `__meta.phase` and
//! `__meta.config_hash` (32 bytes as sixteen 16-bit chunks).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{hex, Optimizer, OptimizerKind, Phase, Result, TrainError};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::tensor::{read_archive, write_archive, Array, NamedTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Optimizer,
    /// Completed global steps.
    pub step: u64,
    /// Phase of the last completed step (`O` before any step).
    pub phase: Phase,
    pub config_hash: [u8; 32],
}

impl Checkpoint {
    pub fn new(model: Model, kind: OptimizerKind, config_hash: [u8; 32]) -> Self {
        let optimizer = Optimizer::new(kind, model.params.values());
        Self {
            model,
            optimizer,
            step: 0,
            phase: Phase::O,
            config_hash,
        }
    }
}

fn model_fields(c: &ModelConfig) -> Vec<f64> {
    vec![
        c.image_size as f64,
        c.patch_size as f64,
        c.channels as f64,
        c.embed_dim as f64,
        c.num_layers as f64,
        c.num_heads as f64,
        c.text_vocab_size as f64,
        c.text_max_len as f64,
        c.mlp_hidden as f64,
        c.proj_dim as f64,
        c.logit_scale_init,
        c.init_std,
    ]
}

fn bad(record: &str, msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint {
        record: record.to_string(),
        msg: msg.into(),
    }
}

fn as_count(record: &str, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
        Ok(v as usize)
    } else {
        Err(bad(record, format!("{v} is not a count")))
    }
}

fn model_config(v: &[f64]) -> Result<ModelConfig> {
    const R: &str = "__meta.model";
    if v.len() != 12 {
        return Err(bad(R, format!("expected 12 fields, found {}", v.len())));
    }
    let c = ModelConfig {
        image_size: as_count(R, v[0])?,
        patch_size: as_count(R, v[1])?,
        channels: as_count(R, v[2])?,
        embed_dim: as_count(R, v[3])?,
        num_layers: as_count(R, v[4])?,
        num_heads: as_count(R, v[5])?,
        text_vocab_size: as_count(R, v[6])?,
        text_max_len: as_count(R, v[7])?,
        mlp_hidden: as_count(R, v[8])?,
        proj_dim: as_count(R, v[9])?,
        logit_scale_init: v[10],
        init_std: v[11],
    };
    c.validate().map_err(|e| bad(R, e.to_string()))?;
    Ok(c)
}

pub fn write_checkpoint<W: Write>(w: W, ckpt: &Checkpoint) -> Result<()> {
    let params = &ckpt.model.params;
    let mut recs: Vec<NamedTensor> = params
        .names()
        .iter()
        .zip(params.values())
        .map(|(n, v)| NamedTensor {
            name: n.clone(),
            value: v.clone(),
        })
        .collect();
    for (slot, arrays) in [("m", &ckpt.optimizer.m), ("v", &ckpt.optimizer.v)] {
        for (n, v) in params.names().iter().zip(arrays.iter()) {
            recs.push(NamedTensor {
                name: format!("opt.{slot}.{n}"),
                value: v.clone(),
            });
        }
    }
    let opt = match ckpt.optimizer.kind {
        OptimizerKind::Sgd { momentum } => [0.0, momentum, 0.0, 0.0],
        OptimizerKind::Adam { beta1, beta2, eps } => [1.0, beta1, beta2, eps],
    };
    let mut opt = opt.to_vec();
    opt.push(ckpt.optimizer.t as f64);
    let hash: Vec<f64> = ckpt
        .config_hash
        .chunks(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
        .collect();
    let meta = [
        ("__meta.model", Array::vector(model_fields(&ckpt.model.config))),
        ("__meta.opt", Array::vector(opt)),
        ("__meta.step", Array::scalar(ckpt.step as f64)),
        ("__meta.phase", Array::scalar(ckpt.phase.index() as f64)),
        ("__meta.config_hash", Array::vector(hash)),
    ];
    recs.extend(meta.into_iter().map(|(n, v)| NamedTensor {
        name: n.to_string(),
        value: v,
    }));
    write_archive(w, &recs)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let recs = read_archive(r).map_err(|e| bad("<archive>", e.to_string()))?;
    let mut by_name: HashMap<String, Array> = HashMap::with_capacity(recs.len());
    for rec in recs {
        if by_name.contains_key(&rec.name) {
            return Err(bad(&rec.name, "duplicate record"));
        }
        by_name.insert(rec.name, rec.value);
    }
    let mut take = |name: &str| by_name.remove(name).ok_or_else(|| bad(name, "missing"));

    let config = model_config(take("__meta.model")?.data())?;
    let reference = Model::new(config.clone(), 0)?;
    let mut store = ParamStore::new();
    for (name, init) in reference.params.names().iter().zip(reference.params.values()) {
        let v = take(name)?;
        if v.shape() != init.shape() {
            return Err(bad(name, format!("shape {:?}, expected {:?}", v.shape(), init.shape())));
        }
        store.insert(name, v);
    }
    let model = Model::from_params(config, store)?;

    let opt_meta = take("__meta.opt")?;
    let o = opt_meta.data();
    if o.len() != 5 {
        return Err(bad("__meta.opt", "expected 5 values"));
    }
    let kind = match o[0] {
        k if k == 0.0 => OptimizerKind::Sgd { momentum: o[1] },
        k if k == 1.0 => OptimizerKind::Adam {
            beta1: o[1],
            beta2: o[2],
            eps: o[3],
        },
        k => return Err(bad("__meta.opt", format!("unknown optimizer kind {k}"))),
    };
    let mut optimizer = Optimizer::new(kind, model.params.values());
    optimizer.t = as_count("__meta.opt", o[4])? as u64;
    let slots: &[&str] = match kind {
        OptimizerKind::Sgd { .. } => &["m"],
        OptimizerKind::Adam { .. } => &["m", "v"],
    };
    for slot in slots {
        for (i, name) in model.params.names().iter().enumerate() {
            let rec = format!("opt.{slot}.{name}");
            let v = take(&rec)?;
            if v.shape() != model.params.values()[i].shape() {
                return Err(bad(&rec, "shape does not match its parameter"));
            }
            match *slot {
                "m" => optimizer.m[i] = v,
                _ => optimizer.v[i] = v,
            }
        }
    }

    let step = as_count("__meta.step", take("__meta.step")?.item())? as u64;
    let phase = Phase::from_index(as_count("__meta.phase", take("__meta.phase")?.item())?)
        .ok_or_else(|| bad("__meta.phase", "not 0, 1 or 2"))?;
    let h = take("__meta.config_hash")?;
    if h.len() != 16 {
        return Err(bad("__meta.config_hash", "expected 16 chunks"));
    }
    let mut config_hash = [0u8; 32];
    for (i, &c) in h.data().iter().enumerate() {
        let c = as_count("__meta.config_hash", c)?;
        if c > u16::MAX as usize {
            return Err(bad("__meta.config_hash", "chunk exceeds 16 bits"));
        }
        config_hash[2 * i..2 * i + 2].copy_from_slice(&(c as u16).to_le_bytes());
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(bad(extra, "unexpected record"));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        step,
        phase,
        config_hash,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint. With `expected_hash` set, a mismatching
/// configuration hash is refused unless `force`.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&[u8; 32]>, force: bool) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(BufReader::new(File::open(path)?))?;
    if let Some(exp) = expected_hash {
        if *exp != ckpt.config_hash {
            if force {
                log::warn!("loading checkpoint despite configuration hash mismatch");
            } else {
                return Err(TrainError::HashMismatch {
                    found: hex(&ckpt.config_hash),
                    expected: hex(exp),
                });
            }
        }
    }
    Ok(ckpt)
}
