//! Ray-cast synthetic scenes: a ground plane, box buildings, thin poles and a
//! distant cylindrical backstop so every ray returns a point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PointCloud, Pose, Vec3};

const SENSOR_HEIGHT: f64 = 1.7;
const MIN_RANGE: f64 = 0.5;

/// Vertical field of view of the simulated sensor, degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorFov {
    pub elev_min_deg: f64,
    pub elev_max_deg: f64,
}

impl Default for SensorFov {
    fn default() -> Self {
        Self {
            elev_min_deg: -30.0,
            elev_max_deg: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    /// Entry distance of a ray, if it hits in front of the origin.
    fn hit(&self, o: Vec3, d: Vec3) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k] < self.min[k] || o[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - o[k]) / d[k];
            let b = (self.max[k] - o[k]) / d[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 >= t0 && t0 > 0.0).then_some(t0)
    }
}

/// Static world geometry in the world frame (origin at the first sensor).
#[derive(Clone, Debug)]
pub struct Scene {
    boxes: Vec<Aabb>,
    ground_z: f64,
    backstop_radius: f64,
}

impl Scene {
    pub fn generate(seed: u64, extent: f64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extent = extent.max(12.0);
        let ground_z = -SENSOR_HEIGHT;
        let mut boxes = Vec::new();
        let n_buildings = rng.gen_range(5..9);
        for _ in 0..n_buildings {
            let r = rng.gen_range(6.0..0.75 * extent);
            let az = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let (sx, sy) = (rng.gen_range(1.5..5.0), rng.gen_range(1.5..5.0));
            let h = rng.gen_range(2.0..7.0);
            let c = [r * az.cos(), r * az.sin()];
            boxes.push(Aabb {
                min: [c[0] - sx / 2.0, c[1] - sy / 2.0, ground_z],
                max: [c[0] + sx / 2.0, c[1] + sy / 2.0, ground_z + h],
            });
        }
        let n_poles = rng.gen_range(8..16);
        for _ in 0..n_poles {
            let r = rng.gen_range(4.0..0.9 * extent);
            let az = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let w = rng.gen_range(0.2..0.6);
            let h = rng.gen_range(1.0..4.0);
            let c = [r * az.cos(), r * az.sin()];
            boxes.push(Aabb {
                min: [c[0] - w / 2.0, c[1] - w / 2.0, ground_z],
                max: [c[0] + w / 2.0, c[1] + w / 2.0, ground_z + h],
            });
        }
        Scene {
            boxes,
            ground_z,
            backstop_radius: extent,
        }
    }

    /// Nearest hit distance along a unit ray, or `None` if nothing is hit
    /// beyond the minimum range.
    fn cast(&self, o: Vec3, d: Vec3) -> Option<f64> {
        let mut best = f64::INFINITY;
        if d[2] < -1e-12 {
            let t = (self.ground_z - o[2]) / d[2];
            if t > 0.0 {
                best = best.min(t);
            }
        }
        for b in &self.boxes {
            if let Some(t) = b.hit(o, d) {
                best = best.min(t);
            }
        }
        // |o_xy + t d_xy| = R
        let a = d[0] * d[0] + d[1] * d[1];
        if a > 1e-15 {
            let b = 2.0 * (o[0] * d[0] + o[1] * d[1]);
            let c = o[0] * o[0] + o[1] * o[1] - self.backstop_radius * self.backstop_radius;
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let t = (-b + disc.sqrt()) / (2.0 * a);
                if t > 0.0 {
                    best = best.min(t);
                }
            }
        }
        (best.is_finite() && best > MIN_RANGE).then_some(best)
    }

    /// Simulated scan from a sensor at `world_from_sensor`; points are
    /// returned in the sensor frame.
    pub fn scan<R: Rng>(
        &self,
        world_from_sensor: &Pose,
        n_points: usize,
        fov: SensorFov,
        rng: &mut R,
    ) -> PointCloud {
        let mut points = Vec::with_capacity(n_points);
        let r = world_from_sensor.rotation_matrix();
        let o = world_from_sensor.t;
        let (lo, hi) = (fov.elev_min_deg.to_radians(), fov.elev_max_deg.to_radians());
        let mut attempts = 0usize;
        while points.len() < n_points {
            attempts += 1;
            assert!(attempts < 100 * n_points + 1000, "scene yields no returns");
            let az = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let el = rng.gen_range(lo..hi);
            let ds = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let dw = [
                r[0][0] * ds[0] + r[0][1] * ds[1] + r[0][2] * ds[2],
                r[1][0] * ds[0] + r[1][1] * ds[1] + r[1][2] * ds[2],
                r[2][0] * ds[0] + r[2][1] * ds[1] + r[2][2] * ds[2],
            ];
            if let Some(t) = self.cast(o, dw) {
                points.push([ds[0] * t, ds[1] * t, ds[2] * t]);
            }
        }
        PointCloud::new(points)
    }
}

/// Deterministic scan of a generated scene from the world origin.
pub fn synth_scene(seed: u64, n_points: usize, extent: f64) -> PointCloud {
    synth_scene_with_fov(seed, n_points, extent, SensorFov::default())
}

pub fn synth_scene_with_fov(seed: u64, n_points: usize, extent: f64, fov: SensorFov) -> PointCloud {
    let scene = Scene::generate(seed, extent);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 1);
    scene
        .scan(&Pose::identity(), n_points, fov, &mut rng)
        .with_frame_id(format!("synth-{seed}"))
}

/// Two scans of one scene. `gt` maps source coordinates to target
/// coordinates: `p_target = gt · p_source`.
#[derive(Clone, Debug)]
pub struct ScenePair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt: Pose,
}

pub fn synth_pair(
    seed: u64,
    n_points: usize,
    extent: f64,
    max_rot_deg: f64,
    max_trans_m: f64,
    fov: SensorFov,
) -> ScenePair {
    let scene = Scene::generate(seed, extent);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 2);
    let gt = Pose::random(&mut rng, max_rot_deg, max_trans_m);
    let source = scene.scan(&Pose::identity(), n_points, fov, &mut rng);
    let target = scene.scan(&gt.inverse(), n_points, fov, &mut rng);
    ScenePair {
        source: source.with_frame_id(format!("synth-{seed}-src")),
        target: target.with_frame_id(format!("synth-{seed}-tgt")),
        gt,
    }
}
