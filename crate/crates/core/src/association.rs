//! Cross-frame association: multi-head cross-attention between the two
//! frames, then per-source-token motion embeddings gathered over a set of
//! target candidates (all target tokens, or the k nearest).

use rand::Rng;

use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::params::{LayerNorm, Linear, ParamStore, Session};
use crate::pointcloud::Vec3;
use crate::tensor::{Real, Tensor, Var};

pub const COSINE_EPS: f64 = 1e-8;
/// Width of the geometric part of a pair descriptor: `x, y, x - y, |x - y|`.
pub const RELATIVE_WIDTH: usize = 10;
/// Geometric plus similarity channels.
pub const PAIR_EXTRA: usize = RELATIVE_WIDTH + 2;
pub const DEFAULT_K: usize = 16;

/// `x ⊕ y ⊕ (x - y) ⊕ |x - y|`.
pub fn relative_space_info(x: Vec3, y: Vec3) -> [f64; RELATIVE_WIDTH] {
    let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    [x[0], x[1], x[2], y[0], y[1], y[2], d[0], d[1], d[2], n]
}

/// Mean-pooling over each token's 3x3 neighborhood of valid tokens on its
/// stage grid (wrapping horizontally). Stored as nine `(row, weight)` slots
/// per token, indexing into the valid-token list.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolPlan {
    pub idx: Vec<usize>,
    pub weights: Vec<f64>,
}

pub const POOL_SLOTS: usize = 9;

impl PoolPlan {
    /// `raster` lists the grid positions of the tokens (in row order of the
    /// feature matrix) on a `height x width` grid.
    pub fn from_grid(raster: &[usize], height: usize, width: usize) -> Result<Self> {
        let mut row_of = vec![usize::MAX; height * width];
        for (r, &p) in raster.iter().enumerate() {
            if p >= height * width {
                return Err(Error::Invalid(format!(
                    "token position {p} outside a {height}x{width} grid"
                )));
            }
            row_of[p] = r;
        }
        let mut idx = Vec::with_capacity(raster.len() * POOL_SLOTS);
        let mut weights = Vec::with_capacity(raster.len() * POOL_SLOTS);
        for (r, &p) in raster.iter().enumerate() {
            let (v, u) = (p / width, p % width);
            let mut rows = Vec::with_capacity(POOL_SLOTS);
            for dv in -1i64..=1 {
                let vv = v as i64 + dv;
                if vv < 0 || vv >= height as i64 {
                    continue;
                }
                // Narrow grids would otherwise visit a column twice.
                let mut cols: Vec<usize> = (-1i64..=1)
                    .map(|du| (u as i64 + du).rem_euclid(width as i64) as usize)
                    .collect();
                cols.sort_unstable();
                cols.dedup();
                for uu in cols {
                    let q = row_of[vv as usize * width + uu];
                    if q != usize::MAX {
                        rows.push(q);
                    }
                }
            }
            let w = 1.0 / rows.len() as f64;
            for slot in 0..POOL_SLOTS {
                match rows.get(slot) {
                    Some(&q) => {
                        idx.push(q);
                        weights.push(w);
                    }
                    None => {
                        idx.push(r);
                        weights.push(0.0);
                    }
                }
            }
        }
        Ok(Self { idx, weights })
    }

    pub fn len(&self) -> usize {
        self.idx.len() / POOL_SLOTS
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    pub fn apply<T: Real>(&self, s: &mut Session<T>, f: Var) -> Result<Var> {
        let n = self.len();
        let c = s.g.shape(f)[1];
        let g = s.g.gather_rows(f, &self.idx)?;
        let g = s.g.reshape(g, &[n, POOL_SLOTS, c])?;
        let w =
            s.g.constant(Tensor::from_f64(vec![n, POOL_SLOTS, 1], &self.weights)?);
        let g = s.g.mul(g, w)?;
        Ok(s.g.sum_axis(g, 1)?)
    }
}

/// Tokens of one frame at one stage: features `[n, C]`, centroids, and the
/// neighborhood pooling plan.
#[derive(Clone, Debug)]
pub struct FrameTokens {
    pub features: Var,
    pub coords: Vec<Vec3>,
    pub pool: PoolPlan,
}

impl FrameTokens {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Multi-head attention from one frame's tokens to the other's, wrapped as
/// `LN(F + MHA(F, G))`. One set of weights serves both directions.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm: LayerNorm,
    pub heads: usize,
    pub dim: usize,
}

impl CrossAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Invalid(format!(
                "width {dim} not divisible by {heads} heads"
            )));
        }
        let mut lin = |n: &str, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), dim, dim, true, INIT_STD, rng)
        };
        let q = lin("q", rng);
        let k = lin("k", rng);
        let v = lin("v", rng);
        let out = lin("out", rng);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), dim);
        Ok(Self {
            q,
            k,
            v,
            out,
            norm,
            heads,
            dim,
        })
    }

    /// Conditioned `a` (attending to `b`) and the weights `[heads, n, m]`.
    pub fn attend_with_weights<T: Real>(
        &self,
        s: &mut Session<T>,
        a: Var,
        b: Var,
    ) -> Result<(Var, Var)> {
        let (n, m) = (s.g.shape(a)[0], s.g.shape(b)[0]);
        if n == 0 || m == 0 {
            return Err(Error::Degenerate(format!(
                "cross-attention needs tokens in both frames, got {n} and {m}"
            )));
        }
        let (h, d) = (self.heads, self.dim / self.heads);
        let heads = |s: &mut Session<T>, lin: &Linear, x: Var, rows: usize| -> Result<Var> {
            let y = lin.forward(s, x)?;
            let y = s.g.reshape(y, &[rows, h, d])?;
            Ok(s.g.permute(y, &[1, 0, 2])?)
        };
        let q = heads(s, &self.q, a, n)?;
        let k = heads(s, &self.k, b, m)?;
        let v = heads(s, &self.v, b, m)?;
        let scores = s.g.bmm(q, k, true)?;
        let scores = s.g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = s.g.softmax(scores, 2)?;
        let y = s.g.bmm(attn, v, false)?;
        let y = s.g.permute(y, &[1, 0, 2])?;
        let y = s.g.reshape(y, &[n, self.dim])?;
        let y = self.out.forward(s, y)?;
        let y = s.g.add(a, y)?;
        Ok((self.norm.forward(s, y)?, attn))
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, fs: Var, ft: Var) -> Result<(Var, Var)> {
        let (cs, _) = self.attend_with_weights(s, fs, ft)?;
        let (ct, _) = self.attend_with_weights(s, ft, fs)?;
        Ok((cs, ct))
    }
}

/// Flat candidate list: `cands[i * k + j]` is the j-th target candidate of
/// source token `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidates {
    pub k: usize,
    pub idx: Vec<usize>,
}

impl Candidates {
    pub fn all(n: usize, m: usize) -> Self {
        Self {
            k: m,
            idx: (0..n).flat_map(|_| 0..m).collect(),
        }
    }

    /// The `k` nearest targets of each source point, ties broken by target
    /// index. `k > m` is clamped to `m` with a warning.
    pub fn knn(src: &[Vec3], tgt: &[Vec3], k: usize) -> Result<Self> {
        if tgt.is_empty() || k == 0 {
            return Err(Error::Degenerate(format!(
                "k-nearest search with k = {k} over {} targets",
                tgt.len()
            )));
        }
        let k = if k > tgt.len() {
            // Routine on small grids; say it once per process.
            static WARNED: std::sync::Once = std::sync::Once::new();
            WARNED
                .call_once(|| log::warn!("k = {k} exceeds {} target tokens; clamping", tgt.len()));
            log::debug!("k = {k} clamped to {}", tgt.len());
            tgt.len()
        } else {
            k
        };
        let mut idx = Vec::with_capacity(src.len() * k);
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(tgt.len());
        for x in src {
            order.clear();
            order.extend(tgt.iter().enumerate().map(|(j, y)| {
                let d = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2);
                (d, j)
            }));
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            idx.extend(order[..k].iter().map(|&(_, j)| j));
        }
        Ok(Self { k, idx })
    }

    pub fn source_rows(&self) -> Vec<usize> {
        (0..self.idx.len()).map(|p| p / self.k).collect()
    }
}

/// Shared per-pair MLP over `f_i ⊕ f_k ⊕ r_ik ⊕ s_ik` followed by a
/// per-channel softmax across candidates. The first layer is stored as
/// three blocks (source, target, pair extras) so the feature products are
/// computed once per token rather than once per pair.
#[derive(Clone, Debug)]
pub struct Gathering {
    pub first_src: Linear,
    pub first_tgt: Linear,
    pub first_extra: Linear,
    pub rest: Vec<Linear>,
    pub dim: usize,
}

impl Gathering {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let first_src = Linear::new(
            store,
            &format!("{name}.l0.src"),
            dim,
            dim,
            true,
            INIT_STD,
            rng,
        );
        let first_tgt = Linear::new(
            store,
            &format!("{name}.l0.tgt"),
            dim,
            dim,
            false,
            INIT_STD,
            rng,
        );
        let first_extra = Linear::new(
            store,
            &format!("{name}.l0.extra"),
            PAIR_EXTRA,
            dim,
            false,
            INIT_STD,
            rng,
        );
        let rest = (1..3)
            .map(|i| {
                Linear::new(
                    store,
                    &format!("{name}.l{i}"),
                    dim,
                    dim,
                    true,
                    INIT_STD,
                    rng,
                )
            })
            .collect();
        Self {
            first_src,
            first_tgt,
            first_extra,
            rest,
            dim,
        }
    }

    /// Full first-layer weight `[2C + 12, C]` and bias, rows ordered
    /// source, target, extras. Used by reference implementations.
    pub fn first_layer_dense<T: Real>(&self, store: &ParamStore<T>) -> (Vec<f64>, Vec<f64>) {
        let mut w = store.get(self.first_src.w).to_f64_vec();
        w.extend(store.get(self.first_tgt.w).to_f64_vec());
        w.extend(store.get(self.first_extra.w).to_f64_vec());
        let b = store.get(self.first_src.b.expect("bias")).to_f64_vec();
        (w, b)
    }

    /// Per-pair extras `[n*k, 12]`: relative geometry as constants plus
    /// the two similarity channels computed in-graph.
    fn pair_extras<T: Real>(
        &self,
        s: &mut Session<T>,
        src: &FrameTokens,
        tgt: &FrameTokens,
        src_coords: &[Vec3],
        cands: &Candidates,
        rows_i: &[usize],
    ) -> Result<Var> {
        let p = cands.idx.len();
        let mut geo = Vec::with_capacity(p * RELATIVE_WIDTH);
        for (q, &j) in cands.idx.iter().enumerate() {
            geo.extend(relative_space_info(src_coords[rows_i[q]], tgt.coords[j]));
        }
        let geo =
            s.g.constant(Tensor::from_f64(vec![p, RELATIVE_WIDTH], &geo)?);
        let cos = pair_cosine(s, src.features, tgt.features, rows_i, &cands.idx)?;
        let ps = src.pool.apply(s, src.features)?;
        let pt = tgt.pool.apply(s, tgt.features)?;
        let ncos = pair_cosine(s, ps, pt, rows_i, &cands.idx)?;
        Ok(s.g.concat(&[geo, cos, ncos], 1)?)
    }

    /// Motion embedding `[n, C]` for source tokens. `src_coords` are the
    /// (possibly warped) source centroids used for geometry and must match
    /// `src` row for row.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        src: &FrameTokens,
        tgt: &FrameTokens,
        src_coords: &[Vec3],
        cands: &Candidates,
    ) -> Result<Var> {
        let (n, m) = (src.len(), tgt.len());
        if n == 0 || m == 0 {
            return Err(Error::Degenerate(format!(
                "gathering needs tokens in both frames, got {n} and {m}"
            )));
        }
        if src_coords.len() != n || cands.idx.len() != n * cands.k {
            return Err(Error::Invalid("gathering inputs disagree in size".into()));
        }
        let rows_i = cands.source_rows();
        let a = self.first_src.forward(s, src.features)?;
        let b = self.first_tgt.forward(s, tgt.features)?;
        let a = s.g.gather_rows(a, &rows_i)?;
        let b = s.g.gather_rows(b, &cands.idx)?;
        let extras = self.pair_extras(s, src, tgt, src_coords, cands, &rows_i)?;
        let e = self.first_extra.forward(s, extras)?;
        let h = s.g.add(a, b)?;
        let h = s.g.add(h, e)?;
        let mut h = s.g.relu(h)?;
        for (i, l) in self.rest.iter().enumerate() {
            h = l.forward(s, h)?;
            if i + 1 < self.rest.len() {
                h = s.g.relu(h)?;
            }
        }
        let l = s.g.reshape(h, &[n, cands.k, self.dim])?;
        let w = s.g.softmax(l, 1)?;
        let y = s.g.mul(l, w)?;
        Ok(s.g.sum_axis(y, 1)?)
    }
}

/// `a_i · b_k / (|a_i| |b_k| + eps)` for each listed pair, as `[p, 1]`.
fn pair_cosine<T: Real>(
    s: &mut Session<T>,
    a: Var,
    b: Var,
    rows_a: &[usize],
    rows_b: &[usize],
) -> Result<Var> {
    let p = rows_a.len();
    let ga = s.g.gather_rows(a, rows_a)?;
    let gb = s.g.gather_rows(b, rows_b)?;
    let prod = s.g.mul(ga, gb)?;
    let dot = s.g.sum_axis(prod, 1)?;
    let na = s.g.l2_norm(ga)?;
    let nb = s.g.l2_norm(gb)?;
    let den = s.g.mul(na, nb)?;
    let den = s.g.add_scalar(den, COSINE_EPS)?;
    let cos = s.g.div(dot, den)?;
    Ok(s.g.reshape(cos, &[p, 1])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relative_info_examples() {
        assert_eq!(relative_space_info([0.0; 3], [0.0; 3]), [0.0; 10]);
        assert_eq!(
            relative_space_info([1.0, 0.0, 0.0], [0.0; 3]),
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn pool_plan_weights_and_wrap() {
        // 2x4 grid, all valid: token 0 sees rows 0..=1 and columns 3, 0, 1.
        let raster: Vec<usize> = (0..8).collect();
        let plan = PoolPlan::from_grid(&raster, 2, 4).unwrap();
        let slots = &plan.idx[..POOL_SLOTS];
        let w = &plan.weights[..POOL_SLOTS];
        let mut used: Vec<usize> = slots
            .iter()
            .zip(w)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&i, _)| i)
            .collect();
        used.sort();
        assert_eq!(used, vec![0, 1, 3, 4, 5, 7]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        // Single valid token pools to itself.
        let lone = PoolPlan::from_grid(&[5], 2, 4).unwrap();
        assert_eq!(lone.weights.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn cosine_channel_examples() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store);
        let a =
            s.g.constant(Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -2.0, 0.0]).unwrap());
        let b =
            s.g.constant(Tensor::new(vec![1, 2], vec![3.0, 0.0]).unwrap());
        let c = pair_cosine(&mut s, a, b, &[0, 1, 2], &[0, 0, 0]).unwrap();
        let v = s.g.data(c);
        assert!((v[0] - 1.0).abs() < 1e-8 && v[1].abs() < 1e-15 && (v[2] + 1.0).abs() < 1e-8);
        let z = s.g.constant(Tensor::zeros(vec![1, 2]));
        let c = pair_cosine(&mut s, z, b, &[0], &[0]).unwrap();
        assert_eq!(s.g.data(c)[0], 0.0);
    }

    #[test]
    fn knn_ties_go_to_lower_index_and_clamp() {
        let tgt = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 5.0, 0.0]];
        let c = Candidates::knn(&[[0.0; 3]], &tgt, 2).unwrap();
        assert_eq!(c.idx, vec![0, 1]);
        let c = Candidates::knn(&[[0.0; 3]], &tgt, 10).unwrap();
        assert_eq!(c.k, 3);
        assert!(Candidates::knn(&[[0.0; 3]], &[], 1).is_err());
    }

    #[test]
    fn single_pair_cross_attention_weight_is_one() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ca = CrossAttention::new(&mut store, "x", 8, 2, &mut rng).unwrap();
        let mut s = Session::new(&store);
        let a =
            s.g.constant(Tensor::from_f64(vec![1, 8], &[0.3; 8]).unwrap());
        let b =
            s.g.constant(Tensor::from_f64(vec![1, 8], &[-0.1; 8]).unwrap());
        let (_, w) = ca.attend_with_weights(&mut s, a, b).unwrap();
        assert!(s.g.data(w).iter().all(|&x| x == 1.0));
        let empty = s.g.constant(Tensor::zeros(vec![0, 8]));
        assert!(ca.attend_with_weights(&mut s, a, empty).is_err());
    }

    #[test]
    fn identical_keys_give_uniform_readout() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ca = CrossAttention::new(&mut store, "x", 8, 2, &mut rng).unwrap();
        let mut s = Session::new(&store);
        let a = s.g.constant(
            Tensor::from_f64(
                vec![2, 8],
                &(0..16).map(|i| i as f64 * 0.1).collect::<Vec<_>>(),
            )
            .unwrap(),
        );
        let b =
            s.g.constant(Tensor::from_f64(vec![3, 8], &[0.5; 24]).unwrap());
        let (_, w) = ca.attend_with_weights(&mut s, a, b).unwrap();
        for &x in s.g.data(w) {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
