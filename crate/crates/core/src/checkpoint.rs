//! Versioned little-endian binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! b"COVICKPT"  u32 version
//! u32 input_dim, n_classes, hidden, feat_dim, emp_hidden
//! u64 seed, u64 epochs_done, u64 steps_done
//! u32 array count, then per array:
//!     u32 name length, name bytes (UTF-8), u32 ndim, u32 dims…, f64 data…
//! ```
//!
//! Parameter arrays use the names in [`PARAM_NAMES`]; optimizer velocities
//! are stored as `velocity.theta.<i>` and `velocity.phi.<i>`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams, PARAM_NAMES};
use crate::tensor::Tensor;
use crate::trainer::TrainerState;

pub const MAGIC: &[u8; 8] = b"COVICKPT";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn array(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.u32(name.len());
        self.0.extend_from_slice(name.as_bytes());
        self.u32(shape.len());
        for &d in shape {
            self.u32(d);
        }
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn encode(state: &TrainerState) -> Vec<u8> {
    let p = &state.params;
    let d = p.dims();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    for v in [d.input_dim, d.n_classes, d.hidden, d.feat_dim, d.emp_hidden] {
        w.u32(v);
    }
    w.u64(p.seed());
    w.u64(state.epochs_done as u64);
    w.u64(state.steps_done as u64);
    w.u32(10 + state.theta_velocity.len() + state.phi_velocity.len());
    for (name, t) in p.named_params() {
        w.array(name, t.shape(), t.data());
    }
    for (group, vel) in [("theta", &state.theta_velocity), ("phi", &state.phi_velocity)] {
        for (i, v) in vel.iter().enumerate() {
            w.array(&format!("velocity.{group}.{i}"), &[v.len()], v);
        }
    }
    w.0
}

/// Checkpoint of bare parameters: no velocities, zero counters.
pub fn encode_params(p: &ModelParams) -> Vec<u8> {
    encode(&TrainerState {
        params: p.clone(),
        theta_velocity: Vec::new(),
        phi_velocity: Vec::new(),
        epochs_done: 0,
        steps_done: 0,
    })
}

fn velocity(arrays: &[(String, Tensor)], group: &str) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    loop {
        let name = format!("velocity.{group}.{}", out.len());
        match arrays.iter().find(|(n, _)| *n == name) {
            Some((_, t)) => out.push(t.data().to_vec()),
            None => return Ok(out),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrainerState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let dims = ModelDims {
        input_dim: r.u32()?,
        n_classes: r.u32()?,
        hidden: r.u32()?,
        feat_dim: r.u32()?,
        emp_hidden: r.u32()?,
    };
    let seed = r.u64()?;
    let epochs_done = r.u64()? as usize;
    let steps_done = r.u64()? as usize;
    let count = r.u32()?;
    let mut arrays: Vec<(String, Tensor)> = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u32()?;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .into();
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("array {name} too large")))?;
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        arrays.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let named: Vec<(&str, &Tensor)> = arrays
        .iter()
        .filter(|(n, _)| PARAM_NAMES.contains(&n.as_str()))
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    Ok(TrainerState {
        params: ModelParams::from_named(dims, seed, &named)?,
        theta_velocity: velocity(&arrays, "theta")?,
        phi_velocity: velocity(&arrays, "phi")?,
        epochs_done,
        steps_done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Group};

    fn state() -> TrainerState {
        let p = init_model(ModelDims::new(2, 2), 21).unwrap();
        TrainerState {
            params: p,
            theta_velocity: alloc::vec![alloc::vec![0.5, -1e-300], alloc::vec![f64::MIN_POSITIVE]],
            phi_velocity: Vec::new(),
            epochs_done: 7,
            steps_done: 300,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = state();
        let bytes = encode(&s);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.params.checksum(Group::Theta), s.params.checksum(Group::Theta));
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn params_only() {
        let p = init_model(ModelDims::new(3, 4), 1).unwrap();
        let back = decode(&encode_params(&p)).unwrap();
        assert_eq!(back.params, p);
        assert!(back.theta_velocity.is_empty());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode(&state());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"NOTACKPT").is_err());
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(decode(&v).is_err());
        let mut v = bytes;
        v.push(0);
        assert!(decode(&v).is_err());
    }
}
