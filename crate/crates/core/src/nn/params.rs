//! Trainable parameters, non-trainable buffers and the Adam optimiser.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A named parameter together with its gradient, Adam moments and penalties.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
    pub m: Tensor2,
    pub v: Tensor2,
    /// L1 coefficient; adds `l1 * sign(w)` to the gradient before each step.
    pub l1: f64,
    /// L2 coefficient; adds `2 * l2 * w` to the gradient before each step.
    pub l2: f64,
}

impl Param {
    fn new(name: String, value: Tensor2, l1: f64, l2: f64) -> Self {
        let (r, c) = value.shape();
        Self {
            name,
            value,
            grad: Tensor2::zeros(r, c),
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
            l1,
            l2,
        }
    }

    /// Penalty value `l1·Σ|w| + l2·Σw²`.
    pub fn penalty(&self) -> f64 {
        if self.l1 == 0.0 && self.l2 == 0.0 {
            return 0.0;
        }
        self.value
            .data()
            .iter()
            .map(|w| self.l1 * w.abs() + self.l2 * w * w)
            .sum()
    }
}

/// Running statistics and other state that is saved but not optimised.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2, l1: f64, l2: f64) -> ParamId {
        self.params.push(Param::new(name.into(), value, l1, l2));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, data: Vec<f64>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            data,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id.0].data
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Vec<f64> {
        &mut self.buffers[id.0].data
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Sum of all L1/L2 penalty terms.
    pub fn penalty(&self) -> f64 {
        self.params.iter().map(Param::penalty).sum()
    }

    /// One Adam update with bias correction. Penalty subgradients are added
    /// to each parameter's gradient before the moments are updated.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for p in &mut self.params {
            let (l1, l2) = (p.l1, p.l2);
            let w = p.value.data_mut();
            let g = p.grad.data();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for i in 0..w.len() {
                let mut gi = g[i];
                if l1 != 0.0 {
                    gi += l1 * sign(w[i]);
                }
                if l2 != 0.0 {
                    gi += 2.0 * l2 * w[i];
                }
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }

    /// Copies values and buffers from `other`, which must have the same layout.
    /// Optimiser state is left untouched.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_layout(other)?;
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            p.value = q.value.clone();
        }
        for (b, c) in self.buffers.iter_mut().zip(&other.buffers) {
            b.data = c.data.clone();
        }
        Ok(())
    }

    fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() || self.buffers.len() != other.buffers.len() {
            return Err(Error::Dimension {
                context: "ParamStore layout",
                expected: self.params.len(),
                got: other.params.len(),
            });
        }
        for (p, q) in self.params.iter().zip(&other.params) {
            if p.name != q.name || p.value.shape() != q.value.shape() {
                return Err(Error::State(format!("parameter {} does not match {}", p.name, q.name)));
            }
        }
        Ok(())
    }

    /// Writes a versioned little-endian binary checkpoint.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            write_str(&mut w, &p.name)?;
            w.write_all(&(p.value.rows() as u64).to_le_bytes())?;
            w.write_all(&(p.value.cols() as u64).to_le_bytes())?;
            w.write_all(&p.l1.to_le_bytes())?;
            w.write_all(&p.l2.to_le_bytes())?;
            for t in [&p.value, &p.m, &p.v] {
                write_f64s(&mut w, t.data())?;
            }
        }
        w.write_all(&(self.buffers.len() as u64).to_le_bytes())?;
        for b in &self.buffers {
            write_str(&mut w, &b.name)?;
            w.write_all(&(b.data.len() as u64).to_le_bytes())?;
            write_f64s(&mut w, &b.data)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a parameter checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let step = read_u64(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_str(&mut r)?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let l1 = read_f64(&mut r)?;
            let l2 = read_f64(&mut r)?;
            let value = Tensor2::from_vec(rows, cols, read_f64s(&mut r, rows * cols)?)?;
            let m = Tensor2::from_vec(rows, cols, read_f64s(&mut r, rows * cols)?)?;
            let v = Tensor2::from_vec(rows, cols, read_f64s(&mut r, rows * cols)?)?;
            params.push(Param {
                name,
                value,
                grad: Tensor2::zeros(rows, cols),
                m,
                v,
                l1,
                l2,
            });
        }
        let nb = read_u64(&mut r)? as usize;
        let mut buffers = Vec::with_capacity(nb);
        for _ in 0..nb {
            let name = read_str(&mut r)?;
            let len = read_u64(&mut r)? as usize;
            buffers.push(Buffer {
                name,
                data: read_f64s(&mut r, len)?,
            });
        }
        Ok(Self { params, buffers, step })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";
const CHECKPOINT_VERSION: u32 = 1;

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u64(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Data("corrupt checkpoint: name too long".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor2::filled(1, 1, w), 0.0, 0.0);
        (s, id)
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let (mut s, id) = scalar_store(0.5);
        s.param_mut(id).grad.fill(1.0);
        s.adam_step(&AdamConfig::default());
        let dw = s.param(id).value.get(0, 0) - 0.5;
        assert!((dw + 0.0003).abs() < 1e-10, "{dw}");
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn two_steps_match_scalar_adam() {
        // Hand-rolled scalar Adam as an independent oracle.
        let cfg = AdamConfig::default();
        let (mut w, mut m, mut v) = (1.0_f64, 0.0_f64, 0.0_f64);
        let g = 0.25;
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9_f64.powi(t));
            let vh = v / (1.0 - 0.999_f64.powi(t));
            w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        let (mut s, id) = scalar_store(1.0);
        for _ in 0..2 {
            s.param_mut(id).grad.fill(g);
            s.adam_step(&cfg);
        }
        assert!((s.param(id).value.get(0, 0) - w).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_pure_penalty_pull() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor2::filled(1, 1, 0.2), 0.0, 0.0);
        let b = s.add("b", Tensor2::filled(1, 1, 0.2), 1e-3, 0.0);
        s.adam_step(&AdamConfig::default());
        assert_eq!(s.param(a).value.get(0, 0), 0.2);
        assert!(s.param(b).value.get(0, 0) < 0.2);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut s = ParamStore::new();
        let id = s.add(
            "layer.w",
            Tensor2::from_vec(2, 2, vec![0.1, -1e-300, f64::MIN_POSITIVE, 3.5]).unwrap(),
            1e-4,
            0.0,
        );
        s.add_buffer("bn.mean", vec![0.25, -0.5]);
        s.param_mut(id).grad.fill(0.3);
        s.adam_step(&AdamConfig::default());
        let mut bytes = Vec::new();
        s.write_checkpoint(&mut bytes).unwrap();
        let back = ParamStore::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back.step_count(), s.step_count());
        for (p, q) in s.params().iter().zip(back.params()) {
            assert_eq!(p.name, q.name);
            for (x, y) in p.value.data().iter().zip(q.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(p.m, q.m);
            assert_eq!(p.v, q.v);
        }
        assert_eq!(back.buffers(), s.buffers());
        assert!(ParamStore::read_checkpoint(&b"XXXX"[..]).is_err());
    }
}
