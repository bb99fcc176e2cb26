//! Binary checkpoint format.
//!
//! Layout: the magic bytes `DMTL`, a u32 format version, then a sequence of
//! named tensors until end of file. Each tensor is written as
//! `name_len: u32, name: utf8, rank: u32, dims: [u32; rank], values: [f64]`,
//! all little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::CenterBank;
use crate::network::{Activation, Branch, Dense, ModelParams};
use crate::numerics::Tensor;
use crate::optim::OptimState;
use crate::taskweights::WeightModuleState;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 4] = b"DMTL";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("missing DMTL magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let at = r.pos;
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint(format!("tensor name at byte {at} is not UTF-8")))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` too large")))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Flattens a full training state into named tensors.
pub fn state_tensors(state: &TrainState) -> Vec<(String, Tensor)> {
    let m = &state.model;
    let mut out = vec![(
        "meta.model".to_string(),
        Tensor::vector(vec![
            m.activation.code(),
            m.dropout_rate,
            m.input_dim() as f64,
        ]),
    )];
    let named = m.named_tensors();
    out.extend(named.iter().map(|(n, t)| (n.clone(), (*t).clone())));
    out.push(("psi.weight".into(), state.psi.psi.clone()));
    out.push(("psi.bias".into(), state.psi.bias.clone()));
    out.push((
        "psi.options".into(),
        Tensor::vector(vec![
            state.psi.learning_rate,
            f64::from(u8::from(state.psi.update_bias)),
        ]),
    ));
    for (t, bank) in state.banks.iter().enumerate() {
        if let Some(bank) = bank {
            out.push((format!("center.{t}.centers"), bank.centers.clone()));
            out.push((format!("center.{t}.rate"), Tensor::scalar(bank.rate)));
        }
    }
    for ((name, _), (acc, buf)) in named.iter().zip(state.opt.acc.iter().zip(&state.opt.buf)) {
        out.push((format!("opt.acc.{name}"), acc.clone()));
        out.push((format!("opt.buf.{name}"), buf.clone()));
    }
    out
}

pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    write(path, &state_tensors(state))
}

struct Lookup(HashMap<String, Tensor>);

impl Lookup {
    fn get(&mut self, name: &str) -> Result<Tensor> {
        self.0
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    fn has(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    fn dense(&mut self, prefix: &str) -> Result<Dense> {
        Ok(Dense {
            weight: self.get(&format!("{prefix}.weight"))?,
            bias: self.get(&format!("{prefix}.bias"))?,
        })
    }
}

/// Rebuilds a network from a checkpoint's tensors.
pub fn model_from_tensors(tensors: Vec<(String, Tensor)>) -> Result<ModelParams> {
    let mut map = Lookup(tensors.into_iter().collect());
    model_from_lookup(&mut map)
}

fn model_from_lookup(map: &mut Lookup) -> Result<ModelParams> {
    let meta = map.get("meta.model")?;
    let &[code, dropout, input_dim] = meta.data() else {
        return Err(Error::Checkpoint("`meta.model` must hold 3 values".into()));
    };
    let activation = Activation::from_code(code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown activation code {code}")))?;
    let mut trunk = Vec::new();
    while map.has(&format!("trunk.{}.weight", trunk.len())) {
        trunk.push(map.dense(&format!("trunk.{}", trunk.len()))?);
    }
    let mut branches = Vec::new();
    while map.has(&format!("branch.{}.bottleneck.weight", branches.len())) {
        let t = branches.len();
        let mut hidden = Vec::new();
        while map.has(&format!("branch.{t}.hidden.{}.weight", hidden.len())) {
            hidden.push(map.dense(&format!("branch.{t}.hidden.{}", hidden.len()))?);
        }
        branches.push(Branch {
            hidden,
            bottleneck: map.dense(&format!("branch.{t}.bottleneck"))?,
            classifier: map.dense(&format!("branch.{t}.classifier"))?,
        });
    }
    if branches.is_empty() {
        return Err(Error::Checkpoint("no task branches".into()));
    }
    ModelParams::from_parts(trunk, branches, activation, dropout, input_dim as usize)
        .map_err(|e| Error::Checkpoint(format!("inconsistent layer widths: {e}")))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    model_from_tensors(read(path)?)
}

pub fn state_from_tensors(tensors: Vec<(String, Tensor)>) -> Result<TrainState> {
    let mut map = Lookup(tensors.into_iter().collect());
    let model = model_from_lookup(&mut map)?;
    let options = map.get("psi.options")?;
    let &[learning_rate, update_bias] = options.data() else {
        return Err(Error::Checkpoint("`psi.options` must hold 2 values".into()));
    };
    let psi = WeightModuleState {
        psi: map.get("psi.weight")?,
        bias: map.get("psi.bias")?,
        learning_rate,
        update_bias: update_bias != 0.0,
    };
    let banks = (0..model.num_tasks())
        .map(|t| {
            if !map.has(&format!("center.{t}.centers")) {
                return Ok(None);
            }
            Ok(Some(CenterBank {
                centers: map.get(&format!("center.{t}.centers"))?,
                rate: map.get(&format!("center.{t}.rate"))?.item()?,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut opt = OptimState {
        acc: Vec::new(),
        buf: Vec::new(),
    };
    for n in &names {
        opt.acc.push(map.get(&format!("opt.acc.{n}"))?);
        opt.buf.push(map.get(&format!("opt.buf.{n}"))?);
    }
    Ok(TrainState {
        model,
        psi,
        banks,
        opt,
    })
}

pub fn load_state(path: &Path) -> Result<TrainState> {
    state_from_tensors(read(path)?)
}
