//! The full registration network: shared encoder for both frames,
//! cross-frame association at the coarsest stage, then three residual
//! refinement layers on progressively finer stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::association::{Candidates, CrossAttention, FrameTokens, Gathering, PoolPlan, DEFAULT_K};
use crate::encoder::{flatten_valid, Encoder, EncoderConfig, TokenGrid, NUM_STAGES};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::pointcloud::{PointCloud, Pose};
use crate::pose::{compose_vars, warp_tokens, PoseHead, PoseVars};
use crate::projection::{project_cylindrical, GridSpec, Projection, ProjectionMask, PseudoImage};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Use the projection mask; when off every pixel counts as valid.
    pub use_mask: bool,
    pub cross_attention: bool,
    /// Coarsest-layer candidates: every target token, or the k nearest.
    pub all_to_all: bool,
    /// Neighbors per source token in the k-nearest layers.
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            use_mask: true,
            cross_attention: true,
            all_to_all: true,
            k: DEFAULT_K,
        }
    }
}

impl ModelConfig {
    /// Small network for the 16x64 desk grid.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                channels: 16,
                patch: [2, 4],
                ..EncoderConfig::default()
            },
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct RefineLayer {
    pub stage: usize,
    pub gathering: Gathering,
    pub head: PoseHead,
}

#[derive(Clone, Debug)]
pub struct RegistrationModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub cross: CrossAttention,
    pub gather: Gathering,
    pub head: PoseHead,
    /// Layers 2, 1, 0 in evaluation order.
    pub refine: Vec<RefineLayer>,
}

/// Projected input frame.
#[derive(Clone, Debug)]
pub struct Frame {
    pub image: PseudoImage,
    pub mask: ProjectionMask,
}

impl Frame {
    pub fn project(pc: &PointCloud, grid: &GridSpec) -> Result<Frame> {
        let Projection { image, mask, .. } = project_cylindrical(pc, grid)?;
        if mask.valid_count() == 0 {
            return Err(Error::Degenerate(format!(
                "cloud `{}` has no points inside the projection grid",
                pc.frame_id
            )));
        }
        Ok(Frame { image, mask })
    }
}

/// Poses for layers 3, 2, 1, 0 (the last is the final estimate).
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub poses: Vec<PoseVars>,
}

impl ForwardOutput {
    pub const LAYERS: [usize; NUM_STAGES] = [3, 2, 1, 0];

    pub fn values<T: Real>(&self, s: &Session<T>) -> Vec<Pose> {
        self.poses.iter().map(|p| p.value(s)).collect()
    }
}

impl RegistrationModel {
    pub fn new<T: Real, R: rand::Rng>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        let enc_cfg = &config.encoder;
        let encoder = Encoder::new(store, "encoder", enc_cfg, rng)?;
        let top = NUM_STAGES - 1;
        let c3 = enc_cfg.stage_channels(top);
        let cross = CrossAttention::new(store, "cross", c3, enc_cfg.heads(top), rng)?;
        let gather = Gathering::new(store, "gather3", c3, rng);
        let head = PoseHead::new(store, "head3", c3, rng);
        let refine = (0..top)
            .rev()
            .map(|l| {
                let c = enc_cfg.stage_channels(l);
                RefineLayer {
                    stage: l,
                    gathering: Gathering::new(store, &format!("gather{l}"), c, rng),
                    head: PoseHead::new(store, &format!("head{l}"), c, rng),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            encoder,
            cross,
            gather,
            head,
            refine,
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(&mut store, config, &mut rng)?;
        Ok((model, store))
    }

    pub fn encode<T: Real>(&self, s: &mut Session<T>, frame: &Frame) -> Result<Vec<TokenGrid>> {
        if self.config.use_mask {
            self.encoder.forward(s, &frame.image, &frame.mask)
        } else {
            let m = &frame.mask;
            let all = ProjectionMask::all_valid(m.height, m.width, m.stage);
            self.encoder.forward(s, &frame.image, &all)
        }
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        src: &Frame,
        tgt: &Frame,
    ) -> Result<ForwardOutput> {
        let gs = self.encode(s, src)?;
        let gt = self.encode(s, tgt)?;
        let top = NUM_STAGES - 1;
        let src3 = frame_tokens(s, &gs[top])?;
        let tgt3 = frame_tokens(s, &gt[top])?;
        let (cs, ct) = if self.config.cross_attention {
            self.cross.forward(s, src3.features, tgt3.features)?
        } else {
            (src3.features, tgt3.features)
        };
        let src3 = FrameTokens {
            features: cs,
            ..src3
        };
        let tgt3 = FrameTokens {
            features: ct,
            ..tgt3
        };
        let cands = if self.config.all_to_all {
            Candidates::all(src3.len(), tgt3.len())
        } else {
            Candidates::knn(&src3.coords, &tgt3.coords, self.config.k)?
        };
        let fe = self.gather.forward(s, &src3, &tgt3, &src3.coords, &cands)?;
        let mut poses = vec![self.head.forward(s, fe, src3.features)?];
        for layer in &self.refine {
            let coarse = *poses.last().unwrap();
            let current = coarse.value(s);
            let src_l = frame_tokens(s, &gs[layer.stage])?;
            let tgt_l = frame_tokens(s, &gt[layer.stage])?;
            // The warp uses the current estimate as a constant.
            let warped = warp_tokens(&src_l.coords, &current);
            let cands = Candidates::knn(&warped, &tgt_l.coords, self.config.k)?;
            let fe = layer
                .gathering
                .forward(s, &src_l, &tgt_l, &warped, &cands)?;
            let delta = layer.head.forward(s, fe, src_l.features)?;
            poses.push(compose_vars(s, &delta, &coarse)?);
        }
        Ok(ForwardOutput { poses })
    }

    /// Inference convenience: layer poses 3, 2, 1, 0 as values.
    pub fn predict<T: Real>(
        &self,
        store: &ParamStore<T>,
        src: &Frame,
        tgt: &Frame,
    ) -> Result<Vec<Pose>> {
        let mut s = Session::new(store);
        let out = self.forward(&mut s, src, tgt)?;
        Ok(out.values(&s))
    }
}

fn frame_tokens<T: Real>(s: &mut Session<T>, grid: &TokenGrid) -> Result<FrameTokens> {
    let (features, coords, raster) = flatten_valid(s, grid)?;
    let pool = PoolPlan::from_grid(&raster, grid.height, grid.width)?;
    Ok(FrameTokens {
        features,
        coords,
        pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{quat_norm, synth_pair, SensorFov};
    use crate::projection::{build_default_grid, GridPreset};

    fn toy_pair(seed: u64) -> (Frame, Frame, Pose) {
        let grid = build_default_grid(GridPreset::Desk16x64).unwrap();
        let p = synth_pair(seed, 1500, 30.0, 10.0, 2.0, SensorFov::default());
        (
            Frame::project(&p.source, &grid).unwrap(),
            Frame::project(&p.target, &grid).unwrap(),
            p.gt,
        )
    }

    #[test]
    fn random_model_gives_unit_poses_at_every_layer() {
        let (src, tgt, _) = toy_pair(1);
        for cfg in [
            ModelConfig::toy(),
            ModelConfig {
                use_mask: false,
                cross_attention: false,
                all_to_all: false,
                ..ModelConfig::toy()
            },
        ] {
            let (model, store) = RegistrationModel::init::<f64>(&cfg, 3).unwrap();
            let poses = model.predict(&store, &src, &tgt).unwrap();
            assert_eq!(poses.len(), 4);
            for p in &poses {
                assert!((quat_norm(p.q()) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn siamese_encoders_agree() {
        let (src, _, _) = toy_pair(2);
        let (model, store) = RegistrationModel::init::<f64>(&ModelConfig::toy(), 3).unwrap();
        let mut s = Session::new(&store);
        let a = model.encode(&mut s, &src).unwrap();
        let b = model.encode(&mut s, &src).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(s.g.data(x.features), s.g.data(y.features));
        }
    }

    #[test]
    fn dropping_the_mask_changes_outputs() {
        let (src, tgt, _) = toy_pair(4);
        assert!(src.mask.valid_count() < src.mask.values.len());
        let cfg = ModelConfig::toy();
        let (model, store) = RegistrationModel::init::<f64>(&cfg, 3).unwrap();
        let no_mask = RegistrationModel {
            config: ModelConfig {
                use_mask: false,
                ..cfg
            },
            ..model.clone()
        };
        let a = model.predict(&store, &src, &tgt).unwrap();
        let b = no_mask.predict(&store, &src, &tgt).unwrap();
        assert_ne!(a[3], b[3]);
    }

    #[test]
    fn empty_frame_is_degenerate() {
        let grid = build_default_grid(GridPreset::Desk16x64).unwrap();
        let err = Frame::project(&PointCloud::new(vec![]), &grid).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }
}
