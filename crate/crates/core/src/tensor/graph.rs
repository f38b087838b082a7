use super::broadcast::{broadcast_shape, mapping, Bcast};
use super::{split_axis, Real, Result, Tensor, TensorError, MASKED_BELOW};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var, Bcast, Bcast),
    Sub(Var, Var, Bcast, Bcast),
    Mul(Var, Var, Bcast, Bcast),
    Div(Var, Var, Bcast, Bcast),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Abs(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
        uniform_rows: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    L2Norm(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    QuatMul(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradient buffers produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Invalid {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Bcast, Bcast)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(op, &sa, &sb)?;
        let ma = mapping(&sa, &out_shape);
        let mb = mapping(&sb, &out_shape);
        let n: usize = out_shape.iter().product();
        let da = self.data(a);
        let db = self.data(b);
        let data: Vec<T> = match (&ma, &mb) {
            (Bcast::Same, Bcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(da[ma.at(i)], db[mb.at(i)])).collect(),
        };
        finite(op, &data)?;
        Ok((Tensor::new(out_shape, data)?, ma, mb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b, ma, mb), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b, ma, mb), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b, ma, mb), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ma, mb) = self.binary("div", a, b, |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Div(a, b, ma, mb), ng))
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let src = &self.nodes[x.0].value;
        let data: Vec<T> = src.data().iter().map(|&v| f(v)).collect();
        finite(op, &data)?;
        Tensor::new(src.shape().to_vec(), data)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        let t = self.unary("scale", x, |v| v * s)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Scale(x, s), ng))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        let t = self.unary("add_scalar", x, |v| v + s)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::AddScalar(x), ng))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.unary("exp", x, |v| v.exp())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Exp(x), ng))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.unary("abs", x, |v| v.abs())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Abs(x), ng))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.unary("sqrt", x, |v| v.sqrt())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Sqrt(x), ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.unary("relu", x, |v| v.max(T::zero()))?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Relu(x), ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::c(GELU_C);
        let a = T::c(GELU_A);
        let half = T::c(0.5);
        let t = self.unary("gelu", x, |v| {
            half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
        })?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Gelu(x), ng))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        finite("matmul", &out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            ng,
        ))
    }

    /// Batched product `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let da = self.data(a);
            let db = self.data(b);
            for bi in 0..batch {
                let ab = &da[bi * m * k..(bi + 1) * m * k];
                let bb = &db[bi * k * n..(bi + 1) * k * n];
                let ob = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(ab, bb, ob, m, k, n);
                } else {
                    gemm_nn(ab, bb, ob, m, k, n);
                }
            }
        }
        finite("bmm", &out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            ng,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax of `x + mask` along `axis`. `mask` is a constant broadcast to
    /// `x`'s shape. Rows whose mask entries are all saturated get uniform
    /// weights and no gradient.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor<T>, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, mask: Option<&Tensor<T>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let mut z = self.data(x).to_vec();
        let mut masked = vec![false; z.len()];
        if let Some(mask) = mask {
            let out = broadcast_shape("masked_softmax", &shape, mask.shape())?;
            if out != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: shape,
                    rhs: mask.shape().to_vec(),
                });
            }
            let mm = mapping(mask.shape(), &shape);
            let md = mask.data();
            let thr = T::c(MASKED_BELOW);
            for i in 0..z.len() {
                let m = md[mm.at(i)];
                z[i] += m;
                masked[i] = m <= thr;
            }
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut uniform_rows = vec![false; outer * inner];
        let mut out = vec![T::zero(); z.len()];
        let inv_len = T::one() / T::c(len as f64);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let all_masked = mask.is_some() && (0..len).all(|j| masked[base + j * inner]);
                if all_masked {
                    uniform_rows[o * inner + i] = true;
                    for j in 0..len {
                        out[base + j * inner] = inv_len;
                    }
                    continue;
                }
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(z[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (z[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / s;
                }
            }
        }
        finite("softmax", &out)?;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                axis,
                uniform_rows,
            },
            ng,
        ))
    }

    /// Normalizes over the last axis (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "scalar input".into(),
            });
        }
        let d = *shape.last().unwrap();
        let rows = self.value(x).numel() / d.max(1);
        let src = self.data(x);
        let eps = T::c(eps);
        let inv_d = T::one() / T::c(d as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * is;
            }
        }
        finite("layer_norm", &xhat)?;
        let ng = self.ng(x);
        let value = Tensor::new(shape, xhat.clone())?;
        Ok(self.push(value, Op::LayerNorm { x, xhat, inv_std }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.data(p);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    fn reduce_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("sum", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        finite("sum", &out)?;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(Self::reduce_shape(&shape, axis), out)?,
            Op::SumAxis(x, axis),
            ng,
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("mean", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let inv = T::one() / T::c(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        finite("mean", &out)?;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(Self::reduce_shape(&shape, axis), out)?,
            Op::MeanAxis(x, axis),
            ng,
        ))
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("max", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(TensorError::Invalid {
                op: "max",
                msg: "empty axis".into(),
            });
        }
        let d = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = d[o * len * inner + i];
                for j in 1..len {
                    let v = d[(o * len + j) * inner + i];
                    if v > bv {
                        bv = v;
                        best = j;
                    }
                }
                out[o * inner + i] = bv;
                argmax[o * inner + i] = best;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(Self::reduce_shape(&shape, axis), out)?,
            Op::MaxAxis { x, axis, argmax },
            ng,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: T = self.data(x).iter().copied().sum();
        finite("sum_all", &[s])?;
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), ng))
    }

    /// Selects rows (entries along axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "scalar input".into(),
            });
        }
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = idx.len();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::Invalid {
                op: "l2_norm",
                msg: "scalar input".into(),
            });
        }
        let d = *shape.last().unwrap();
        let src = self.data(x);
        let out: Vec<T> = src
            .chunks(d.max(1))
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        finite("l2_norm", &out)?;
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(shape[..shape.len() - 1].to_vec(), out)?,
            Op::L2Norm(x),
            ng,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.data(x), &shape, perm);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("rank {r} < 2"),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Hamilton product of two `[4]` quaternions in (w, x, y, z) order.
    pub fn quat_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != [4] || self.shape(b) != [4] {
            return Err(TensorError::ShapeMismatch {
                op: "quat_mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let p = self.data(a);
        let q = self.data(b);
        let out = hamilton([p[0], p[1], p[2], p[3]], [q[0], q[1], q[2], q[3]]);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![4], out.to_vec())?, Op::QuatMul(a, b), ng))
    }

    /// Affine map over the last axis: `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::Invalid {
            op: "linear",
            msg: "scalar input".into(),
        })?;
        let rows = self.value(x).numel() / d.max(1);
        let x2 = if shape.len() == 2 {
            x
        } else {
            self.reshape(x, &[rows, d])?
        };
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.shape(y)[1];
            self.reshape(y, &out_shape)
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, ma, mb) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ma.at(i)] += gi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[mb.at(i)] += gi;
                    }
                }
            }
            Op::Sub(a, b, ma, mb) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ma.at(i)] += gi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[mb.at(i)] -= gi;
                    }
                }
            }
            Op::Mul(a, b, ma, mb) => {
                let da = self.data(*a);
                let db = self.data(*b);
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ma.at(i)] += gi * db[mb.at(i)];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[mb.at(i)] += gi * da[ma.at(i)];
                    }
                }
            }
            Op::Div(a, b, ma, mb) => {
                let da = self.data(*a);
                let db = self.data(*b);
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ma.at(i)] += gi / db[mb.at(i)];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        let y = db[mb.at(i)];
                        gb[mb.at(i)] -= gi * da[ma.at(i)] / (y * y);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += gi * *s;
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, &gi) in gx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i];
                    }
                }
            }
            Op::Abs(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        let s = if xd[i] > T::zero() {
                            T::one()
                        } else if xd[i] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        gx[i] += g[i] * s;
                    }
                }
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    let half = T::c(0.5);
                    for i in 0..g.len() {
                        if y[i] > T::zero() {
                            gx[i] += g[i] * half / y[i];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        if xd[i] > T::zero() {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    let c = T::c(GELU_C);
                    let a = T::c(GELU_A);
                    let half = T::c(0.5);
                    let three = T::c(3.0);
                    for i in 0..g.len() {
                        let v = xd[i];
                        let u = c * (v + a * v * v * v);
                        let th = u.tanh();
                        let du = c * (T::one() + three * a * v * v);
                        let d = half * (T::one() + th) + half * v * (T::one() - th * th) * du;
                        gx[i] += g[i] * d;
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.ng(*a) {
                    let db = self.data(*b);
                    let ga = self.acc(grads, *a).unwrap();
                    // dA = dC · Bᵀ
                    gemm_nt_acc(g, db, ga, m, n, k);
                }
                if self.ng(*b) {
                    let da = self.data(*a);
                    let gb = self.acc(grads, *b).unwrap();
                    // dB = Aᵀ · dC
                    gemm_tn_acc(da, g, gb, m, k, n);
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let da = self.data(*a);
                let db = self.data(*b);
                if self.ng(*a) {
                    let ga = self.acc(grads, *a).unwrap();
                    for bi in 0..*batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &db[bi * k * n..(bi + 1) * k * n];
                        let gab = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // C = A Bᵀ, B: [n, k]; dA = dC · B
                            gemm_nn_acc(gc, bb, gab, m, n, k);
                        } else {
                            gemm_nt_acc(gc, bb, gab, m, n, k);
                        }
                    }
                }
                if self.ng(*b) {
                    let gb = self.acc(grads, *b).unwrap();
                    for bi in 0..*batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &da[bi * m * k..(bi + 1) * m * k];
                        let gbb = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // dB = dCᵀ · A  ([n, m] x [m, k])
                            gemm_tn_acc(gc, ab, gbb, m, n, k);
                        } else {
                            gemm_tn_acc(ab, gc, gbb, m, k, n);
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                axis,
                uniform_rows,
            } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            if uniform_rows[o * inner + i] {
                                continue;
                            }
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                let p = base + j * inner;
                                dot += g[p] * y[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let d = *node.value.shape().last().unwrap();
                if let Some(gx) = self.acc(grads, *x) {
                    let inv_d = T::one() / T::c(d as f64);
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mg = gr.iter().copied().sum::<T>() * inv_d;
                        let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for j in 0..d {
                            gx[r * d + j] += is * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g
                                [(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, &s) in gp[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let f = if matches!(node.op, Op::MeanAxis(..)) {
                    T::one() / T::c(len as f64)
                } else {
                    T::one()
                };
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] += g[o * inner + i] * f;
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = argmax[o * inner + i];
                            gx[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let shape = self.shape(*x);
                let width: usize = shape[1..].iter().product();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[r * width..(r + 1) * width];
                        for (d, &s) in gx[i * width..(i + 1) * width].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::L2Norm(x) => {
                let xd = self.data(*x);
                let d = *self.shape(*x).last().unwrap();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (&n, &gr)) in y.iter().zip(g).enumerate() {
                        if n > T::zero() {
                            for j in 0..d {
                                gx[r * d + j] += gr * xd[r * d + j] / n;
                            }
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inv);
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, s) in gx.iter_mut().zip(back) {
                        *d += s;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::QuatMul(a, b) => {
                let p = self.data(*a).to_vec();
                let q = self.data(*b).to_vec();
                // out = L(p) q = R(q) p
                let lp = left_matrix([p[0], p[1], p[2], p[3]]);
                let rq = right_matrix([q[0], q[1], q[2], q[3]]);
                if let Some(ga) = self.acc(grads, *a) {
                    for c in 0..4 {
                        for r in 0..4 {
                            ga[c] += rq[r][c] * g[r];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for c in 0..4 {
                        for r in 0..4 {
                            gb[c] += lp[r][c] * g[r];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn hamilton<T: Real>(p: [T; 4], q: [T; 4]) -> [T; 4] {
    let [w1, x1, y1, z1] = p;
    let [w2, x2, y2, z2] = q;
    [
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ]
}

/// Matrix of `q -> p ⊗ q`.
fn left_matrix<T: Real>(p: [T; 4]) -> [[T; 4]; 4] {
    let [w, x, y, z] = p;
    [[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]]
}

/// Matrix of `p -> p ⊗ q`.
fn right_matrix<T: Real>(q: [T; 4]) -> [[T; 4]; 4] {
    let [w, x, y, z] = q;
    [[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]]
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    out
}

/// out[m,n] = a[m,k] · b[k,n]
fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm_nn_acc(a, b, out, m, k, n)
}

fn gemm_nn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] = a[m,k] · b[n,k]ᵀ
fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm_nt_acc(a, b, out, m, k, n)
}

fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
