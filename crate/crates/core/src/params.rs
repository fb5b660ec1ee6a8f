//! Named parameter tensors and their binding into a [`Graph`].

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub type ParamId = usize;

/// Ordered collection of trainable parameters and non-trainable buffers
/// (e.g. power-iteration vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        self.trainable.push(trainable);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(p, _)| p.len())
            .sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        (0..self.len())
            .filter(|&i| self.trainable[i] && self.names[i].starts_with(prefix))
            .map(|i| self.tensors[i].len())
            .sum()
    }

    /// Inserts all entries into `g`: trainable ones as gradient-tracked leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .zip(&self.trainable)
                .map(|(t, &tr)| if tr { g.leaf(t.clone()) } else { g.constant(t.clone()) })
                .collect(),
        }
    }

    /// Inserts all entries as constants.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            trainable: self.trainable.clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, bool)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.trainable)
            .map(|((n, t), &tr)| (n.as_str(), t, tr))
    }
}

impl ParamStore<f32> {
    /// Little-endian blob: count, then per entry name, trainable flag,
    /// shape and `f32` data.
    pub fn write_blob(&self, out: &mut impl Write) -> std::io::Result<()> {
        out.write_all(b"PGPS")?;
        out.write_all(&(self.len() as u32).to_le_bytes())?;
        for ((name, t), &tr) in self.names.iter().zip(&self.tensors).zip(&self.trainable) {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&[tr as u8])?;
            out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_blob(input: &mut impl Read) -> Result<Self> {
        fn u32_of(r: &mut impl Read) -> std::io::Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        let corrupt = |m: &str| Error::Config(format!("parameter blob: {m}"));
        let io = |e: std::io::Error| Error::Config(format!("parameter blob: {e}"));
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != b"PGPS" {
            return Err(corrupt("bad magic"));
        }
        let count = u32_of(input).map_err(io)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = u32_of(input).map_err(io)? as usize;
            let mut name = vec![0u8; nlen];
            input.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| corrupt("name is not utf-8"))?;
            let mut flag = [0u8; 1];
            input.read_exact(&mut flag).map_err(io)?;
            let rank = u32_of(input).map_err(io)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                input.read_exact(&mut b).map_err(io)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            input.read_exact(&mut raw).map_err(io)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            store.push(name, Tensor::new(&shape, data)?, flag[0] == 1);
        }
        Ok(store)
    }

    /// Replaces values with those of `other`, which must have the same
    /// names and shapes in the same order.
    pub fn load_from(&mut self, other: &ParamStore<f32>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter names do not match the architecture".into()));
        }
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::Config(format!(
                    "parameter shape {:?} does not match {:?}",
                    theirs.shape(),
                    mine.shape()
                )));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }
}

/// Graph handles for every entry of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles supplied by the caller, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Glorot-uniform weights for a conv kernel `out x in x k x k`.
pub fn glorot_conv<T: Real>(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, k: usize) -> Tensor<T> {
    let fan_in = (in_ch * k * k) as f64;
    let fan_out = (out_ch * k * k) as f64;
    let a = (6.0 / (fan_in + fan_out)).sqrt();
    Tensor::from_fn(&[out_ch, in_ch, k, k], |_| T::of(rng.random_range(-a..a)))
}

/// Unit vector with standard-normal direction.
pub fn random_unit<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Tensor<T> {
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    Tensor::new(&[n], v.into_iter().map(|x| T::of(x / norm)).collect()).expect("unit vector")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn blob_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", glorot_conv(&mut rng, 4, 3, 3));
        s.add_buffer("a.u", random_unit(&mut rng, 4));
        let mut buf = Vec::new();
        s.write_blob(&mut buf).unwrap();
        let back = ParamStore::read_blob(&mut buf.as_slice()).unwrap();
        assert_eq!(s, back);
        assert_eq!(back.count_trainable(), 4 * 3 * 9);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("x", Tensor::ones(&[3]));
        let mut buf = Vec::new();
        s.write_blob(&mut buf).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(ParamStore::read_blob(&mut buf.as_slice()).is_err());
    }
}
