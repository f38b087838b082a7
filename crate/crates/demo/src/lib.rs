//! Browser demo: project a synthetic scan, inspect masked window attention
//! and watch the validity mask coarsen through the encoder stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use scanreg::encoder::{WindowAttention, WindowLayout};
use scanreg::params::{ParamStore, Session};
use scanreg::pointcloud::{synth_scene_with_fov, Pose, SensorFov};
use scanreg::projection::{
    downsample_mask, project_cylindrical, GridSpec, Projection, ProjectionMask,
};
use scanreg::tensor::Tensor;
use scanreg::{Error, Result};

const ELEV_MIN_DEG: f64 = -30.0;
const ELEV_MAX_DEG: f64 = 10.0;
const WINDOW: usize = 4;
const SHIFT: usize = 2;
const FEATURES: usize = 8;
const HEADS: usize = 2;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One projected scan of a generated scene.
#[wasm_bindgen]
pub struct Scan {
    projection: Projection,
}

impl Scan {
    /// Scene `seed` scanned with `points` returns from a sensor turned by
    /// `yaw_deg` and moved `forward_m` along its x axis.
    pub fn build(
        seed: u64,
        points: usize,
        height: usize,
        width: usize,
        yaw_deg: f64,
        forward_m: f64,
    ) -> Result<Scan> {
        if height % WINDOW != 0 || width % WINDOW != 0 {
            return Err(Error::Invalid(format!(
                "grid {height}x{width} must be a multiple of {WINDOW}"
            )));
        }
        let fov = SensorFov {
            elev_min_deg: ELEV_MIN_DEG,
            elev_max_deg: ELEV_MAX_DEG,
        };
        let grid = GridSpec::from_fov(height, width, ELEV_MIN_DEG, ELEV_MAX_DEG)?;
        let pose =
            Pose::from_axis_angle([0.0, 0.0, 1.0], yaw_deg.to_radians(), [forward_m, 0.0, 0.0]);
        // Points seen by the moved sensor, in its own frame.
        let cloud = synth_scene_with_fov(seed, points, 40.0, fov).transformed(&pose.inverse());
        Ok(Scan {
            projection: project_cylindrical(&cloud, &grid)?,
        })
    }

    fn mask(&self) -> &ProjectionMask {
        &self.projection.mask
    }

    /// Validity after `level` 2x2 merges.
    pub fn mask_at(&self, level: usize) -> Result<ProjectionMask> {
        let mut m = self.mask().clone();
        for _ in 0..level {
            m = downsample_mask(&m, 2, 2)?;
        }
        Ok(m)
    }

    /// Per-key attention weights (mean over heads) of the query pixel
    /// `(v, u)` in a randomly initialized window attention layer, laid out
    /// on the full grid. Pixels outside the query's window and empty pixels
    /// are zero; a window without valid keys is all zero.
    pub fn attention_map(&self, v: usize, u: usize, shifted: bool, seed: u64) -> Result<Vec<f64>> {
        let img = &self.projection.image;
        let (h, w) = (img.height(), img.width());
        if v >= h || u >= w {
            return Err(Error::Invalid(format!(
                "pixel ({v}, {u}) is outside the {h}x{w} grid"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let att = WindowAttention::new(&mut store, "demo", FEATURES, HEADS, WINDOW, &mut rng);
        for t in store.values_mut() {
            for x in t.data_mut() {
                *x = rand::Rng::gen_range(&mut rng, -0.5..0.5);
            }
        }
        let valid = self.mask().validity();
        let mut feats = Vec::with_capacity(h * w * FEATURES);
        for i in 0..h * w {
            let p = img.at(i / w, i % w);
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            let f = [p[0] / 10.0, p[1] / 10.0, p[2], r / 10.0, 1.0, 0.0, 0.0, 0.0];
            feats.extend(f.iter().map(|&x| if valid[i] { x } else { 0.0 }));
        }
        let layout = WindowLayout::new(h, w, WINDOW, SHIFT, shifted)?;
        let mut s = Session::new(&store);
        let x = s.g.constant(Tensor::new(vec![h * w, FEATURES], feats)?);
        let (_, attn) = att.forward_with_weights(&mut s, x, &layout, &valid)?;
        let weights = s.g.data(attn);
        let t = layout.tokens_per_window();
        let slot = layout.inverse[v * w + u];
        let (win, qi) = (slot / t, slot % t);
        let mut map = vec![0.0; h * w];
        for kj in 0..t {
            let mean = (0..HEADS)
                .map(|hd| weights[((win * HEADS + hd) * t + qi) * t + kj])
                .sum::<f64>()
                / HEADS as f64;
            let key = layout.perm[win * t + kj];
            if valid[key] {
                map[key] = mean;
            }
        }
        Ok(map)
    }
}

#[wasm_bindgen]
impl Scan {
    #[wasm_bindgen(constructor)]
    pub fn new(
        seed: u32,
        points: u32,
        height: u32,
        width: u32,
        yaw_deg: f64,
        forward_m: f64,
    ) -> std::result::Result<Scan, JsError> {
        Self::build(
            seed as u64,
            points as usize,
            height as usize,
            width as usize,
            yaw_deg,
            forward_m,
        )
        .map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.projection.image.height() as u32
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.projection.image.width() as u32
    }

    /// Range per pixel in meters, 0 for empty pixels.
    pub fn ranges(&self) -> Vec<f32> {
        let img = &self.projection.image;
        (0..img.grid.pixels())
            .map(|i| {
                if !img.is_filled(i) {
                    return 0.0;
                }
                let p = img.at(i / img.width(), i % img.width());
                (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() as f32
            })
            .collect()
    }

    /// `[input, landed, occluded, dropped_outside, dropped_zero_range]`.
    pub fn stats(&self) -> Vec<u32> {
        let s = &self.projection.stats;
        [
            s.input,
            s.landed,
            s.occluded,
            s.dropped_outside,
            s.dropped_zero_range,
        ]
        .map(|n| n as u32)
        .to_vec()
    }

    /// 1 for valid cells after `level` 2x2 merges; the grid is
    /// `(height >> level) x (width >> level)`.
    pub fn mask_level(&self, level: u32) -> std::result::Result<Vec<u8>, JsError> {
        let m = self.mask_at(level as usize).map_err(js)?;
        Ok(m.validity().into_iter().map(u8::from).collect())
    }

    pub fn attention(
        &self,
        v: u32,
        u: u32,
        shifted: bool,
        seed: u32,
    ) -> std::result::Result<Vec<f32>, JsError> {
        let map = self
            .attention_map(v as usize, u as usize, shifted, seed as u64)
            .map_err(js)?;
        Ok(map.into_iter().map(|x| x as f32).collect())
    }
}
