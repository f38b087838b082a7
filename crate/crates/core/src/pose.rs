//! Pose regression from motion embeddings and residual composition across
//! refinement layers.

use rand::Rng;

use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::params::{Activation, Linear, Mlp, ParamStore, Session};
use crate::pointcloud::{quat_mul, quat_norm, quat_rotate, Pose, Quat, Vec3};
use crate::tensor::{Real, Tensor, Var};

/// Standard deviation for the regression layers, small so that the first
/// predictions sit near the identity.
pub const HEAD_STD: f64 = 1e-3;
pub const MIN_QUAT_NORM: f64 = 1e-12;
pub const UNIT_TOLERANCE: f64 = 1e-3;

/// Rotation and translation as graph nodes: `q: [4]` (unit), `t: [3]`.
#[derive(Clone, Copy, Debug)]
pub struct PoseVars {
    pub q: Var,
    pub t: Var,
}

impl PoseVars {
    pub fn value<T: Real>(&self, s: &Session<T>) -> Pose {
        let q = s.g.data(self.q);
        let t = s.g.data(self.t);
        Pose::new(
            [q[0].f64(), q[1].f64(), q[2].f64(), q[3].f64()],
            [t[0].f64(), t[1].f64(), t[2].f64()],
        )
    }
}

/// Per-channel token weighting followed by two regression layers.
#[derive(Clone, Debug)]
pub struct PoseHead {
    pub weighting: Mlp,
    pub fc_q: Linear,
    pub fc_t: Linear,
    pub dim: usize,
}

impl PoseHead {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let weighting = Mlp::new(
            store,
            &format!("{name}.weighting"),
            &[2 * dim, dim, dim],
            Activation::Relu,
            INIT_STD,
            rng,
        );
        let fc_q = Linear::new(store, &format!("{name}.fc_q"), dim, 4, true, HEAD_STD, rng);
        store.get_mut(fc_q.b.expect("bias")).data_mut()[0] = T::one();
        let fc_t = Linear::new(store, &format!("{name}.fc_t"), dim, 3, true, HEAD_STD, rng);
        Self {
            weighting,
            fc_q,
            fc_t,
            dim,
        }
    }

    /// Softmax over tokens, per channel, of `MLP(fe ⊕ f)`: `[n, C]`.
    pub fn attention_weights<T: Real>(&self, s: &mut Session<T>, fe: Var, f: Var) -> Result<Var> {
        let n = s.g.shape(fe)[0];
        if n == 0 {
            return Err(Error::Degenerate("pose head over zero tokens".into()));
        }
        if s.g.shape(f)[0] != n {
            return Err(Error::Invalid(format!(
                "embedding has {n} rows but features have {}",
                s.g.shape(f)[0]
            )));
        }
        let x = s.g.concat(&[fe, f], 1)?;
        let x = self.weighting.forward(s, x)?;
        Ok(s.g.softmax(x, 0)?)
    }

    /// Pools `fe` with its weights and regresses a unit quaternion and a
    /// translation.
    pub fn regress<T: Real>(&self, s: &mut Session<T>, fe: Var, w: Var) -> Result<PoseVars> {
        let pooled = s.g.mul(fe, w)?;
        let pooled = s.g.sum_axis(pooled, 0)?;
        let pooled = s.g.reshape(pooled, &[1, self.dim])?;
        let q = self.fc_q.forward(s, pooled)?;
        let q = s.g.reshape(q, &[4])?;
        let q = normalize(s, q)?;
        let t = self.fc_t.forward(s, pooled)?;
        let t = s.g.reshape(t, &[3])?;
        Ok(PoseVars { q, t })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, fe: Var, f: Var) -> Result<PoseVars> {
        let w = self.attention_weights(s, fe, f)?;
        self.regress(s, fe, w)
    }
}

fn normalize<T: Real>(s: &mut Session<T>, q: Var) -> Result<Var> {
    let norm = s.g.l2_norm(q)?;
    let nv = s.g.data(norm)[0].f64();
    if !(nv >= MIN_QUAT_NORM) {
        return Err(Error::Numerical(format!(
            "regressed quaternion has norm {nv:e}"
        )));
    }
    Ok(s.g.div(q, norm)?)
}

/// In-graph residual update: `q = dq ⊗ q_c` (renormalized) and
/// `t = dq [0, t_c] dq* + dt`.
pub fn compose_vars<T: Real>(
    s: &mut Session<T>,
    delta: &PoseVars,
    coarse: &PoseVars,
) -> Result<PoseVars> {
    let q = s.g.quat_mul(delta.q, coarse.q)?;
    let q = normalize(s, q)?;
    let zero = s.g.constant(Tensor::zeros(vec![1]));
    let tq = s.g.concat(&[zero, coarse.t], 0)?;
    let conj =
        s.g.constant(Tensor::from_f64(vec![4], &[1.0, -1.0, -1.0, -1.0])?);
    let dq_conj = s.g.mul(delta.q, conj)?;
    let r = s.g.quat_mul(delta.q, tq)?;
    let r = s.g.quat_mul(r, dq_conj)?;
    let r = s.g.reshape(r, &[4, 1])?;
    let r = s.g.gather_rows(r, &[1, 2, 3])?;
    let r = s.g.reshape(r, &[3])?;
    let t = s.g.add(r, delta.t)?;
    Ok(PoseVars { q, t })
}

/// Value-level residual update with unit checks on the raw quaternions.
pub fn compose_refinement(dq: Quat, dt: Vec3, q: Quat, t: Vec3) -> Result<Pose> {
    for (name, v) in [("delta", dq), ("coarse", q)] {
        let n = quat_norm(v);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Invalid(format!(
                "{name} quaternion has norm {n}, expected unit"
            )));
        }
    }
    let r = quat_rotate(dq, t);
    Ok(Pose::new(
        quat_mul(dq, q),
        [r[0] + dt[0], r[1] + dt[1], r[2] + dt[2]],
    ))
}

pub fn warp_tokens(coords: &[Vec3], pose: &Pose) -> Vec<Vec3> {
    coords.iter().map(|&c| pose.transform_point(c)).collect()
}
