//! Named parameter storage, the layers built on it, and the checkpoint file.
//!
//! Checkpoint layout (all integers little-endian `u32`, values `f32`):
//!
//! ```text
//! magic  "SRCK"
//! version
//! count
//! count x { name_len, name bytes (UTF-8), rank, dims[rank], data[prod(dims)] }
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::gradcheck::compare_central;
use crate::tensor::{Gradients, Graph, Real, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.values.iter_mut()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Overwrites every parameter of `self` from the checkpoint at `path`.
    /// Names and shapes must match exactly.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let ctx = path.display().to_string();
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
            ctx: &ctx,
        };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(4, &format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        if count != self.len() {
            return Err(r.err(
                8,
                &format!(
                    "checkpoint has {count} tensors, model expects {}",
                    self.len()
                ),
            ));
        }
        for _ in 0..count {
            let at = r.pos as u64;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map(str::to_string);
            let name = name.map_err(|_| r.err(at, "name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(T::c(
                    f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64
                ));
            }
            let id = self
                .id(&name)
                .ok_or_else(|| r.err(at, &format!("unknown parameter {name}")))?;
            if self.get(id).shape() != dims.as_slice() {
                return Err(r.err(
                    at,
                    &format!(
                        "{name}: shape {dims:?} does not match model shape {:?}",
                        self.get(id).shape()
                    ),
                ));
            }
            *self.get_mut(id) = Tensor::new(dims, data)?;
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos as u64, "trailing bytes"));
        }
        Ok(())
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    ctx: &'a str,
}

impl ByteReader<'_> {
    fn err(&self, offset: u64, msg: &str) -> Error {
        Error::Format {
            context: self.ctx.to_string(),
            offset,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(self.pos as u64, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Normal samples truncated to two standard deviations.
pub fn trunc_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// One forward/backward evaluation against a parameter store. Parameters are
/// bound into the graph lazily, once each.
pub struct Session<'s, T> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Gradient for every parameter in store order; unused ones are zero.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Vec<T>> {
        self.store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.get(v))
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); self.store.get(id).numel()])
            })
            .collect()
    }
}

/// Worst relative error (see [`compare_central`]) between analytic
/// parameter gradients of the scalar built by `f` and central differences,
/// probing up to `per_tensor` evenly spaced coordinates of every tensor.
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    f: F,
    step: f64,
    per_tensor: usize,
) -> Result<f64>
where
    F: Fn(&mut Session<f64>) -> Result<Var>,
{
    let mut s = Session::new(store);
    let loss = f(&mut s)?;
    let grads = s.g.backward(loss)?;
    let analytic = s.param_grads(&grads);
    let mut worst = 0.0f64;
    for (pi, id) in store.ids().enumerate() {
        let base = store.get(id);
        let n = base.numel();
        let take = per_tensor.min(n).max(1);
        let coords: Vec<usize> = (0..take).map(|j| j * n / take).collect();
        let eval = |data: &[f64]| -> crate::tensor::Result<f64> {
            let mut probe = store.clone();
            probe.get_mut(id).data_mut().copy_from_slice(data);
            let mut s = Session::new(&probe);
            let out = f(&mut s).map_err(|e| crate::tensor::TensorError::Invalid {
                op: "check_param_gradients",
                msg: e.to_string(),
            })?;
            Ok(s.g.value(out).item())
        };
        let e = compare_central(&analytic[pi], base.data(), eval, step, &coords)?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Affine layer `x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::from_f64(vec![d_in, d_out], &trunc_normal(rng, d_in * d_out, std))
            .expect("shape");
        let w = store.add(format!("{name}.weight"), w);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out])));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> crate::tensor::Result<Var> {
        let w = s.p(self.w);
        let b = self.b.map(|b| s.p(b));
        s.g.linear(x, w, b)
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![dim], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        Self {
            gamma,
            beta,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> crate::tensor::Result<Var> {
        let y = s.g.layer_norm(x, self.eps)?;
        let gamma = s.p(self.gamma);
        let beta = s.p(self.beta);
        let y = s.g.mul(y, gamma)?;
        s.g.add(y, beta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Stack of affine layers with an activation between them and none after
/// the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        act: Activation,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, std, rng))
            .collect();
        Self { layers, act }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, mut x: Var) -> crate::tensor::Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(s, x)?;
            if i < last {
                x = match self.act {
                    Activation::Relu => s.g.relu(x)?,
                    Activation::Gelu => s.g.gelu(x)?,
                };
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "a", 3, 2, true, 0.5, &mut rng);
        LayerNorm::new(&mut store, "ln", 2);
        store
    }

    #[test]
    fn checkpoint_round_trip_at_f32_precision() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        store.save(&path).unwrap();
        let mut fresh = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Linear::new(&mut fresh, "a", 3, 2, true, 0.5, &mut rng);
        LayerNorm::new(&mut fresh, "ln", 2);
        fresh.load_into(&path).unwrap();
        for ((n1, t1), (n2, t2)) in store.iter().zip(fresh.iter()) {
            assert_eq!(n1, n2);
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        store.save(&path).unwrap();
        let mut other = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Linear::new(&mut other, "a", 4, 2, true, 0.5, &mut rng);
        LayerNorm::new(&mut other, "ln", 2);
        let err = other.load_into(&path).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let store = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        store.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let mut fresh = sample_store();
        let err = fresh.load_into(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let store = sample_store();
        let mut s = Session::new(&store);
        let x =
            s.g.constant(Tensor::from_f64(vec![1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let lin = Linear {
            w: store.id("a.weight").unwrap(),
            b: store.id("a.bias"),
            d_in: 3,
            d_out: 2,
        };
        let y = lin.forward(&mut s, x).unwrap();
        let l = s.g.sum_all(y).unwrap();
        let grads = s.g.backward(l).unwrap();
        let pg = s.param_grads(&grads);
        assert_eq!(pg[0], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(pg[2], vec![0.0, 0.0]);
    }
}
