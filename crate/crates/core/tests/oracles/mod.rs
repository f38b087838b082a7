//! Brute-force references for the integration tests. Everything here is
//! written with plain loops over `f64` and deliberately shares no helpers
//! with the library beyond its data types.

#![allow(dead_code)]

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};

/// Literal `softmax(Q K^T / sqrt(d) + mask + bias) V` for one head.
/// `mask` and `bias` are `T x T`, `q`, `k`, `v` are `T x d`.
pub fn dense_masked_attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    mask: &[Vec<f64>],
    bias: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let t = q.len();
    let d = q[0].len();
    let mut out = vec![vec![0.0; v[0].len()]; t];
    for i in 0..t {
        let mut logits = vec![0.0; k.len()];
        for j in 0..k.len() {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q[i][c] * k[j][c];
            }
            logits[j] = dot / (d as f64).sqrt() + mask[i][j] + bias[i][j];
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let mut w = vec![0.0; k.len()];
        for j in 0..k.len() {
            w[j] = (logits[j] - mx).exp();
            z += w[j];
        }
        for j in 0..k.len() {
            for c in 0..v[0].len() {
                out[i][c] += w[j] / z * v[j][c];
            }
        }
    }
    out
}

/// `x W + b` for a row-major `[d_in, d_out]` weight.
pub fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, d_out: usize) -> Vec<f64> {
    let d_in = x.len();
    let mut y = vec![0.0; d_out];
    for o in 0..d_out {
        let mut acc = b.map_or(0.0, |b| b[o]);
        for i in 0..d_in {
            acc += x[i] * w[i * d_out + o];
        }
        y[o] = acc;
    }
    y
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b) + 1e-8)
}

/// Tokens of one frame for the reference association.
pub struct NaiveFrame {
    pub features: Vec<Vec<f64>>,
    pub coords: Vec<[f64; 3]>,
    /// `(row, col)` of each token on a `height x width` grid.
    pub cells: Vec<(usize, usize)>,
    pub height: usize,
    pub width: usize,
}

impl NaiveFrame {
    /// Mean of the features of tokens within one row/column step
    /// (columns wrap around), including the token itself.
    fn pooled(&self, i: usize) -> Vec<f64> {
        let (r, c) = self.cells[i];
        let mut sum = vec![0.0; self.features[0].len()];
        let mut count = 0.0;
        for (j, &(r2, c2)) in self.cells.iter().enumerate() {
            let dr = r as i64 - r2 as i64;
            let dc = (c as i64 - c2 as i64).rem_euclid(self.width as i64);
            let near_col = dc == 0 || dc == 1 || dc == self.width as i64 - 1;
            if dr.abs() <= 1 && near_col {
                for (s, f) in sum.iter_mut().zip(&self.features[j]) {
                    *s += f;
                }
                count += 1.0;
            }
        }
        sum.iter().map(|s| s / count).collect()
    }
}

/// Weights of the three-layer pair MLP; `w[0]` is `[2C + 12, C]` with rows
/// ordered source feature, target feature, geometry (10), similarity (2).
pub struct NaiveMlp {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub dim: usize,
}

/// Per-pair evaluation of the association embedding over explicit
/// candidate lists (`cands[i]` are target indices for source token `i`).
pub fn naive_bat(
    src: &NaiveFrame,
    tgt: &NaiveFrame,
    src_coords: &[[f64; 3]],
    cands: &[Vec<usize>],
    mlp: &NaiveMlp,
) -> Vec<Vec<f64>> {
    let c = mlp.dim;
    let mut out = Vec::new();
    for i in 0..src.features.len() {
        let pi = src.pooled(i);
        let mut ls: Vec<Vec<f64>> = Vec::new();
        for &k in &cands[i] {
            let x = src_coords[i];
            let y = tgt.coords[k];
            let mut input = src.features[i].clone();
            input.extend(&tgt.features[k]);
            input.extend(x);
            input.extend(y);
            let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
            input.extend(d);
            input.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
            input.push(cosine(&src.features[i], &tgt.features[k]));
            input.push(cosine(&pi, &tgt.pooled(k)));
            let mut h = input;
            for layer in 0..3 {
                h = affine(&h, &mlp.w[layer], Some(&mlp.b[layer]), c);
                if layer < 2 {
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            ls.push(h);
        }
        let mut fe = vec![0.0; c];
        for ch in 0..c {
            let mx = ls.iter().map(|l| l[ch]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = ls.iter().map(|l| (l[ch] - mx).exp()).sum();
            for l in &ls {
                fe[ch] += l[ch] * (l[ch] - mx).exp() / z;
            }
        }
        out.push(fe);
    }
    out
}

/// Least-squares rigid alignment `tgt ≈ R src + t` via the quaternion
/// eigenproblem. Returns `(q, t, rms residual)`.
pub fn kabsch_align(
    src: &[[f64; 3]],
    tgt: &[[f64; 3]],
) -> Result<([f64; 4], [f64; 3], f64), String> {
    if src.len() != tgt.len() {
        return Err("point counts differ".into());
    }
    if src.len() < 3 {
        return Err(format!(
            "need at least 3 correspondences, got {}",
            src.len()
        ));
    }
    let n = src.len() as f64;
    let cs = src
        .iter()
        .fold(Vector3::zeros(), |a, p| a + Vector3::from(*p))
        / n;
    let ct = tgt
        .iter()
        .fold(Vector3::zeros(), |a, p| a + Vector3::from(*p))
        / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (a, b) in src.iter().zip(tgt) {
        let a = Vector3::from(*a) - cs;
        let b = Vector3::from(*b) - ct;
        h += a * b.transpose();
        spread += a * a.transpose();
    }
    let ev = SymmetricEigen::new(spread).eigenvalues;
    let mut ev: Vec<f64> = ev.iter().cloned().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[1] <= 1e-12 * ev[0].max(1e-300) {
        return Err("source points are collinear".into());
    }
    let (sxx, sxy, sxz) = (h[(0, 0)], h[(0, 1)], h[(0, 2)]);
    let (syx, syy, syz) = (h[(1, 0)], h[(1, 1)], h[(1, 2)]);
    let (szx, szy, szz) = (h[(2, 0)], h[(2, 1)], h[(2, 2)]);
    let nmat = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let best = (0..4)
        .max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
        .unwrap();
    let v = eig.eigenvectors.column(best);
    let q = [v[0], v[1], v[2], v[3]];
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let r = Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    );
    let t = ct - r * cs;
    let mut sq = 0.0;
    for (a, b) in src.iter().zip(tgt) {
        let p = r * Vector3::from(*a) + t - Vector3::from(*b);
        sq += p.norm_squared();
    }
    Ok((q, [t[0], t[1], t[2]], (sq / n).sqrt()))
}

/// Single-pass count of pairs with both errors strictly under the bounds.
pub fn recount_recall(errors: &[(f64, f64)], rre_thresh: f64, rte_thresh: f64) -> f64 {
    let mut hits = 0usize;
    for &(r, t) in errors {
        if r < rre_thresh {
            if t < rte_thresh {
                hits += 1;
            }
        }
    }
    hits as f64 / errors.len() as f64
}

/// Rotation angle between two unit quaternions from their matrices, in
/// degrees (trace formula), used to cross-check pose results.
pub fn angle_between_deg(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ra = quat_matrix(a);
    let rb = quat_matrix(b);
    let rel = ra.transpose() * rb;
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

pub fn quat_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// 4x4 homogeneous matrix of `(q, t)`.
pub fn homogeneous(q: [f64; 4], t: [f64; 3]) -> Matrix4<f64> {
    let r = quat_matrix(q);
    let mut m = Matrix4::identity();
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = r[(i, j)];
        }
        m[(i, 3)] = t[i];
    }
    m
}
