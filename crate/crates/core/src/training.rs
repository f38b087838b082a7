//! Multi-layer supervised loss with learned uncertainty weights, Adam with
//! exponential learning-rate decay, and the synthetic overfit harness.

use std::fmt::Write as _;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{rre_deg, rte_m};
use crate::model::{Frame, ModelConfig, RegistrationModel};
use crate::params::{ParamId, ParamStore, Session};
use crate::pointcloud::{synth_pair, Pose, SensorFov};
use crate::pose::PoseVars;
use crate::projection::GridSpec;
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weights for layers 0, 1, 2, 3.
    pub alpha: [f64; 4],
    pub k_t_init: f64,
    pub k_r_init: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: [1.6, 0.8, 0.4, 0.2],
            k_t_init: 0.0,
            k_r_init: -2.5,
        }
    }
}

/// The two learned balance scalars, stored alongside the network weights.
#[derive(Clone, Copy, Debug)]
pub struct LossParams {
    pub k_t: ParamId,
    pub k_r: ParamId,
}

impl LossParams {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &LossConfig) -> Self {
        Self {
            k_t: store.add("loss.k_t", Tensor::full(vec![1], T::c(cfg.k_t_init))),
            k_r: store.add("loss.k_r", Tensor::full(vec![1], T::c(cfg.k_r_init))),
        }
    }

    pub fn values<T: Real>(&self, store: &ParamStore<T>) -> (f64, f64) {
        (
            store.get(self.k_t).data()[0].f64(),
            store.get(self.k_r).data()[0].f64(),
        )
    }
}

/// Loss nodes of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerLoss {
    pub total: Var,
    pub trans: Var,
    pub rot: Var,
}

/// `L_t e^{-k_t} + k_t + L_r e^{-k_r} + k_r` with `L_t = |t - t̂|_1` and
/// `L_r = |q/|q| - q̂|_2`, where `q̂` takes the sign closest to `q`.
pub fn layer_loss<T: Real>(
    s: &mut Session<T>,
    pred: &PoseVars,
    gt: &Pose,
    k_t: Var,
    k_r: Var,
) -> Result<LayerLoss> {
    let t_hat = s.g.constant(Tensor::from_f64(vec![3], &gt.t)?);
    let dt = s.g.sub(pred.t, t_hat)?;
    let dt = s.g.abs(dt)?;
    let trans = s.g.sum_all(dt)?;

    let q = s.g.data(pred.q);
    let gq = gt.q();
    let dot: f64 = (0..4).map(|i| q[i].f64() * gq[i]).sum();
    let sign = if dot < 0.0 { -1.0 } else { 1.0 };
    let q_hat: Vec<f64> = gq.iter().map(|v| sign * v).collect();
    let q_hat = s.g.constant(Tensor::from_f64(vec![4], &q_hat)?);
    let norm = s.g.l2_norm(pred.q)?;
    let qn = s.g.div(pred.q, norm)?;
    let dq = s.g.sub(qn, q_hat)?;
    let rot = s.g.l2_norm(dq)?;

    let total = weighted(s, trans, k_t)?;
    let r = weighted(s, rot, k_r)?;
    let total = s.g.add(total, r)?;
    let total = s.g.sum_all(total)?;
    Ok(LayerLoss { total, trans, rot })
}

/// `l e^{-k} + k`.
fn weighted<T: Real>(s: &mut Session<T>, l: Var, k: Var) -> Result<Var> {
    let e = s.g.neg(k)?;
    let e = s.g.exp(e)?;
    let y = s.g.mul(l, e)?;
    Ok(s.g.add(y, k)?)
}

/// Weighted sum over layers. `poses` and `gts` follow the network output
/// order (layers 3, 2, 1, 0); `alpha` is indexed by layer.
pub fn total_loss<T: Real>(
    s: &mut Session<T>,
    poses: &[PoseVars],
    gt: &Pose,
    k_t: Var,
    k_r: Var,
    alpha: &[f64; 4],
) -> Result<(Var, Vec<LayerLoss>)> {
    if poses.len() != 4 {
        return Err(Error::Invalid(format!(
            "expected 4 layer poses, got {}",
            poses.len()
        )));
    }
    let mut total = None;
    let mut layers = Vec::with_capacity(4);
    for (j, p) in poses.iter().enumerate() {
        let layer = 3 - j;
        let l = layer_loss(s, p, gt, k_t, k_r)?;
        let w = s.g.scale(l.total, alpha[layer])?;
        total = Some(match total {
            None => w,
            Some(acc) => s.g.add(acc, w)?,
        });
        layers.push(l);
    }
    Ok((total.unwrap(), layers))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_min: f64,
    /// Steps over which the rate decays from `lr` to `lr_min`.
    pub decay_horizon: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_min: 1e-5,
            decay_horizon: 200_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Per-step decay factor.
    pub fn gamma(&self) -> f64 {
        (self.lr_min / self.lr).powf(1.0 / self.decay_horizon.max(1) as f64)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        (self.lr * self.gamma().powf(step as f64)).max(self.lr_min)
    }
}

/// Adam with moments kept at 64-bit regardless of parameter precision.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: OptimConfig,
    pub step: u64,
    pub skipped: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(config: OptimConfig, store: &ParamStore<T>) -> Result<Self> {
        if !(config.lr > 0.0) || !(config.lr_min > 0.0) {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(Self {
            config,
            step: 0,
            skipped: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// Applies one update; non-finite gradients skip the step and return
    /// `false`.
    pub fn apply<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[Vec<f64>]) -> bool {
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient at step {}; skipping", self.step);
            return false;
        }
        let c = &self.config;
        let lr = c.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        for ((tensor, g), (m, v)) in store
            .values_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in tensor
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let upd = lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p = T::c(p.f64() - upd);
            }
        }
        true
    }
}

/// One supervised example.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub id: String,
    pub source: Frame,
    pub target: Frame,
    pub gt: Pose,
}

/// Per-pair loss summary, layers indexed 0..=3.
#[derive(Clone, Debug, Default)]
pub struct StepStats {
    pub total: f64,
    pub trans: [f64; 4],
    pub rot: [f64; 4],
}

/// Network plus loss parameters and the optimizer state.
pub struct Trainer<T> {
    pub model: RegistrationModel,
    pub loss_params: LossParams,
    pub loss: LossConfig,
    pub store: ParamStore<T>,
    pub adam: Adam,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        model_cfg: &ModelConfig,
        loss: LossConfig,
        optim: OptimConfig,
        seed: u64,
    ) -> Result<Self> {
        let (model, mut store) = RegistrationModel::init::<T>(model_cfg, seed)?;
        let loss_params = LossParams::new(&mut store, &loss);
        let adam = Adam::new(optim, &store)?;
        Ok(Self {
            model,
            loss_params,
            loss,
            store,
            adam,
        })
    }

    /// Loss and parameter gradients for one pair.
    pub fn pair_gradients(&self, pair: &TrainPair) -> Result<(StepStats, Vec<Vec<T>>)> {
        let mut s = Session::new(&self.store);
        let out = self.model.forward(&mut s, &pair.source, &pair.target)?;
        let k_t = s.p(self.loss_params.k_t);
        let k_r = s.p(self.loss_params.k_r);
        let (total, layers) = total_loss(&mut s, &out.poses, &pair.gt, k_t, k_r, &self.loss.alpha)?;
        let mut stats = StepStats {
            total: s.g.data(total)[0].f64(),
            ..Default::default()
        };
        for (j, l) in layers.iter().enumerate() {
            stats.trans[3 - j] = s.g.data(l.trans)[0].f64();
            stats.rot[3 - j] = s.g.data(l.rot)[0].f64();
        }
        let grads = s.g.backward(total)?;
        Ok((stats, s.param_grads(&grads)))
    }

    /// Mean loss and gradient over `pairs`, reduced in pair order.
    pub fn batch_gradients(&self, pairs: &[TrainPair]) -> Result<(StepStats, Vec<Vec<f64>>)> {
        if pairs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let results: Vec<Result<(StepStats, Vec<Vec<T>>)>> =
            map_ordered(pairs, |p| self.pair_gradients(p));
        let scale = 1.0 / pairs.len() as f64;
        let mut stats = StepStats::default();
        let mut acc: Vec<Vec<f64>> = self
            .store
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        for r in results {
            let (st, g) = r?;
            stats.total += st.total * scale;
            for l in 0..4 {
                stats.trans[l] += st.trans[l] * scale;
                stats.rot[l] += st.rot[l] * scale;
            }
            for (a, g) in acc.iter_mut().zip(&g) {
                for (a, &g) in a.iter_mut().zip(g) {
                    *a += g.f64() * scale;
                }
            }
        }
        Ok((stats, acc))
    }

    /// One optimizer step; returns the pre-update statistics.
    pub fn step(&mut self, pairs: &[TrainPair]) -> Result<StepStats> {
        let (stats, grads) = self.batch_gradients(pairs)?;
        if !stats.total.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became {} at step {}",
                stats.total, self.adam.step
            )));
        }
        self.adam.apply(&mut self.store, &grads);
        Ok(stats)
    }

    /// Per-layer `(RRE°, RTE m)` for every pair, layers indexed 0..=3.
    pub fn evaluate(&self, pairs: &[TrainPair]) -> Result<Vec<[(f64, f64); 4]>> {
        map_ordered(pairs, |p| {
            let poses = self.model.predict(&self.store, &p.source, &p.target)?;
            let mut out = [(0.0, 0.0); 4];
            for (j, pose) in poses.iter().enumerate() {
                out[3 - j] = (rre_deg(pose, &p.gt), rte_m(pose, &p.gt));
            }
            Ok(out)
        })
        .into_iter()
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverfitConfig {
    pub pairs: usize,
    pub points: usize,
    pub extent: f64,
    pub max_rot_deg: f64,
    pub max_trans_m: f64,
    pub steps: u64,
    /// Stop once every pair's final-layer error is below these bounds and
    /// per-layer mean errors are nonincreasing toward layer 0; checked every
    /// `check_every` steps. Zero disables the check.
    pub target_rre_deg: f64,
    pub target_rte_m: f64,
    pub check_every: u64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            pairs: 4,
            points: 2000,
            extent: 30.0,
            max_rot_deg: 10.0,
            max_trans_m: 2.0,
            steps: 5000,
            target_rre_deg: 0.0,
            target_rte_m: 0.0,
            check_every: 100,
        }
    }
}

/// Maps over pairs (in parallel when enabled), keeping input order.
#[cfg(feature = "parallel")]
fn map_ordered<P: Sync, R: Send>(items: &[P], f: impl Fn(&P) -> R + Sync + Send) -> Vec<R> {
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_ordered<P, R>(items: &[P], f: impl Fn(&P) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Projected synthetic training pairs; pair `i` uses seed `seed + i`.
pub fn synthetic_pairs(
    cfg: &OverfitConfig,
    grid: &GridSpec,
    fov: SensorFov,
    seed: u64,
) -> Result<Vec<TrainPair>> {
    (0..cfg.pairs)
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            let p = synth_pair(
                s,
                cfg.points,
                cfg.extent,
                cfg.max_rot_deg,
                cfg.max_trans_m,
                fov,
            );
            Ok(TrainPair {
                id: format!("synth-{s}"),
                source: Frame::project(&p.source, grid)?,
                target: Frame::project(&p.target, grid)?,
                gt: p.gt,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub history: Vec<(u64, StepStats, f64, f64, f64)>,
    pub steps_run: u64,
    pub skipped: u64,
    /// Per pair, per layer (0..=3) `(RRE°, RTE m)` after training.
    pub errors: Vec<[(f64, f64); 4]>,
    pub pair_ids: Vec<String>,
}

impl OverfitReport {
    /// Mean over pairs of layer `l` errors.
    pub fn layer_mean(&self, layer: usize) -> (f64, f64) {
        let n = self.errors.len().max(1) as f64;
        let r = self.errors.iter().map(|e| e[layer].0).sum::<f64>() / n;
        let t = self.errors.iter().map(|e| e[layer].1).sum::<f64>() / n;
        (r, t)
    }

    /// Line-oriented text report.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("# step total_loss");
        for l in 0..4 {
            let _ = write!(out, " L_trans{l} L_rot{l}");
        }
        out.push_str(" k_t k_r lr\n");
        for (step, st, kt, kr, lr) in &self.history {
            let _ = write!(out, "{step} {:.6e}", st.total);
            for l in 0..4 {
                let _ = write!(out, " {:.6e} {:.6e}", st.trans[l], st.rot[l]);
            }
            let _ = writeln!(out, " {kt:.6} {kr:.6} {lr:.6e}");
        }
        let _ = writeln!(
            out,
            "# steps_run {} skipped {}",
            self.steps_run, self.skipped
        );
        out.push_str("# pair layer RRE_deg RTE_m\n");
        for (id, e) in self.pair_ids.iter().zip(&self.errors) {
            for l in (0..4).rev() {
                let _ = writeln!(out, "# {id} {l} {:.6} {:.6}", e[l].0, e[l].1);
            }
        }
        for l in (0..4).rev() {
            let (r, t) = self.layer_mean(l);
            let _ = writeln!(out, "# mean layer {l} RRE_deg {r:.6} RTE_m {t:.6}");
        }
        out
    }
}

fn targets_met(cfg: &OverfitConfig, errors: &[[(f64, f64); 4]]) -> bool {
    if !(cfg.target_rre_deg > 0.0 && cfg.target_rte_m > 0.0) {
        return false;
    }
    let all_final = errors
        .iter()
        .all(|e| e[0].0 < cfg.target_rre_deg && e[0].1 < cfg.target_rte_m);
    let n = errors.len() as f64;
    let mean = |l: usize| {
        (
            errors.iter().map(|e| e[l].0).sum::<f64>() / n,
            errors.iter().map(|e| e[l].1).sum::<f64>() / n,
        )
    };
    let monotone = (1..4).all(|l| {
        let (a, b) = (mean(l), mean(l - 1));
        b.0 <= a.0 && b.1 <= a.1
    });
    all_final && monotone
}

/// Trains on `pairs` for up to `cfg.steps` steps and evaluates on them.
/// `on_step` sees every recorded step (for streaming reports).
pub fn overfit_run<T: Real>(
    trainer: &mut Trainer<T>,
    pairs: &[TrainPair],
    cfg: &OverfitConfig,
    mut on_step: impl FnMut(u64, &StepStats),
) -> Result<OverfitReport> {
    let mut history = Vec::new();
    let mut steps_run = 0;
    let record = |trainer: &Trainer<T>, step: u64, st: StepStats, h: &mut Vec<_>| {
        let (kt, kr) = trainer.loss_params.values(&trainer.store);
        h.push((step, st, kt, kr, trainer.adam.lr()));
    };
    if cfg.steps == 0 {
        let (st, _) = trainer.batch_gradients(pairs)?;
        on_step(0, &st);
        record(trainer, 0, st, &mut history);
    }
    for step in 0..cfg.steps {
        let st = trainer.step(pairs)?;
        on_step(step, &st);
        record(trainer, step, st, &mut history);
        steps_run = step + 1;
        if cfg.check_every > 0 && steps_run % cfg.check_every == 0 && cfg.target_rre_deg > 0.0 {
            let errors = trainer.evaluate(pairs)?;
            if targets_met(cfg, &errors) {
                log::info!("targets met after {steps_run} steps");
                break;
            }
        }
    }
    let errors = trainer.evaluate(pairs)?;
    Ok(OverfitReport {
        history,
        steps_run,
        skipped: trainer.adam.skipped,
        errors,
        pair_ids: pairs.iter().map(|p| p.id.clone()).collect(),
    })
}
