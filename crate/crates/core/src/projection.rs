//! Cylindrical projection of a scan onto a pseudo image whose pixels hold raw
//! `(x, y, z)` coordinates, plus validity masks and per-token centroids.
//!
//! Pixel indices follow
//!
//! ```text
//! u = round(atan2(y, x) / dtheta + u_offset)  mod W
//! v = round(asin(z / range) / dphi + v_offset)      rejected outside [0, H)
//! ```
//!
//! with round-half-up. When several points land on one pixel the nearest
//! (smallest range) wins; exact range ties go to the lexicographically
//! smallest coordinates so the result does not depend on input order.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pointcloud::{PointCloud, SensorFov, Vec3};
use crate::tensor::MASK_VALUE;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Horizontal angular resolution, radians per pixel.
    pub dtheta: f64,
    /// Vertical angular resolution, radians per pixel.
    pub dphi: f64,
    pub v_offset: f64,
    pub u_offset: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GridPreset {
    /// 64 x 1792, HDL-64E vertical span [-24.8°, +2.0°].
    Kitti64x1792,
    /// 16 x 64, vertical span [-30°, +10°].
    Desk16x64,
    Custom {
        height: usize,
        width: usize,
        elev_min_deg: f64,
        elev_max_deg: f64,
    },
}

impl std::str::FromStr for GridPreset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kitti64x1792" => Ok(GridPreset::Kitti64x1792),
            "desk16x64" => Ok(GridPreset::Desk16x64),
            other => Err(format!(
                "unknown grid preset `{other}` (expected kitti64x1792 or desk16x64)"
            )),
        }
    }
}

impl GridPreset {
    /// Vertical span covered by the preset, for simulating a matching sensor.
    pub fn sensor_fov(&self) -> SensorFov {
        let (lo, hi) = match *self {
            GridPreset::Kitti64x1792 => (-24.8, 2.0),
            GridPreset::Desk16x64 => (-30.0, 10.0),
            GridPreset::Custom {
                elev_min_deg,
                elev_max_deg,
                ..
            } => (elev_min_deg, elev_max_deg),
        };
        SensorFov {
            elev_min_deg: lo,
            elev_max_deg: hi,
        }
    }
}

impl GridSpec {
    /// Uniform rows spanning `[elev_min, elev_max]` and full-circle columns.
    pub fn from_fov(
        height: usize,
        width: usize,
        elev_min_deg: f64,
        elev_max_deg: f64,
    ) -> Result<GridSpec> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "grid must be non-empty, got {height}x{width}"
            )));
        }
        if !(elev_max_deg > elev_min_deg) {
            return Err(Error::Invalid(format!(
                "vertical field of view [{elev_min_deg}, {elev_max_deg}] is empty"
            )));
        }
        let dphi = (elev_max_deg - elev_min_deg).to_radians() / height as f64;
        Ok(GridSpec {
            height,
            width,
            dtheta: 2.0 * std::f64::consts::PI / width as f64,
            dphi,
            v_offset: -elev_min_deg.to_radians() / dphi - 0.5,
            u_offset: (width / 2) as f64,
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// `(v, u)` of a point, or `None` for zero range or rows outside the grid.
    pub fn pixel_of(&self, p: Vec3) -> Option<(usize, usize)> {
        let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if !(range > 0.0) || !range.is_finite() {
            return None;
        }
        let az = p[1].atan2(p[0]);
        let el = (p[2] / range).clamp(-1.0, 1.0).asin();
        let u = round_half_up(az / self.dtheta + self.u_offset).rem_euclid(self.width as i64);
        let v = round_half_up(el / self.dphi + self.v_offset);
        if v < 0 || v >= self.height as i64 {
            return None;
        }
        Some((v as usize, u as usize))
    }
}

fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

fn from_preset(height: usize, width: usize, preset: GridPreset) -> Result<GridSpec> {
    let fov = preset.sensor_fov();
    GridSpec::from_fov(height, width, fov.elev_min_deg, fov.elev_max_deg)
}

pub fn build_default_grid(preset: GridPreset) -> Result<GridSpec> {
    match preset {
        GridPreset::Kitti64x1792 => from_preset(64, 1792, preset),
        GridPreset::Desk16x64 => from_preset(16, 64, preset),
        GridPreset::Custom { height, width, .. } => from_preset(height, width, preset),
    }
}

/// `H x W` grid of raw coordinates; invalid pixels hold `(0, 0, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoImage {
    pub grid: GridSpec,
    pub coords: Vec<Vec3>,
}

impl PseudoImage {
    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn at(&self, v: usize, u: usize) -> Vec3 {
        self.coords[v * self.grid.width + u]
    }

    /// Validity from the coordinate test: a pixel is invalid iff it is
    /// exactly `(0, 0, 0)`.
    pub fn is_filled(&self, i: usize) -> bool {
        self.coords[i] != [0.0; 3]
    }
}

/// Additive mask: `0` for valid positions, [`MASK_VALUE`] for invalid ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMask {
    pub height: usize,
    pub width: usize,
    pub stage: usize,
    pub values: Vec<f64>,
}

impl ProjectionMask {
    pub fn from_validity(height: usize, width: usize, stage: usize, valid: &[bool]) -> Self {
        debug_assert_eq!(valid.len(), height * width);
        Self {
            height,
            width,
            stage,
            values: valid
                .iter()
                .map(|&ok| if ok { 0.0 } else { MASK_VALUE })
                .collect(),
        }
    }

    pub fn all_valid(height: usize, width: usize, stage: usize) -> Self {
        Self::from_validity(height, width, stage, &vec![true; height * width])
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.values[i] == 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0.0).count()
    }

    pub fn validity(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v == 0.0).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    pub input: usize,
    pub landed: usize,
    pub occluded: usize,
    pub dropped_zero_range: usize,
    pub dropped_outside: usize,
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub image: PseudoImage,
    pub mask: ProjectionMask,
    /// Flat pixel index each input point maps to (also for points that lost
    /// a collision); `None` when the point was dropped.
    pub pixel_of_point: Vec<Option<usize>>,
    pub stats: ProjectionStats,
}

fn closer(a: Vec3, b: Vec3) -> bool {
    let ra = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
    let rb = b[0] * b[0] + b[1] * b[1] + b[2] * b[2];
    match ra.partial_cmp(&rb) {
        Some(std::cmp::Ordering::Less) => true,
        Some(std::cmp::Ordering::Greater) => false,
        _ => a < b,
    }
}

pub fn project_cylindrical(pc: &PointCloud, grid: &GridSpec) -> Result<Projection> {
    if !(grid.dtheta > 0.0 && grid.dphi > 0.0) {
        return Err(Error::Invalid(
            "angular resolutions must be positive".into(),
        ));
    }
    if grid.pixels() == 0 {
        return Err(Error::Invalid("grid must be non-empty".into()));
    }
    let mut coords = vec![[0.0; 3]; grid.pixels()];
    let mut filled = vec![false; grid.pixels()];
    let mut pixel_of_point = Vec::with_capacity(pc.len());
    let mut stats = ProjectionStats {
        input: pc.len(),
        ..Default::default()
    };
    for &p in &pc.points {
        if p == [0.0; 3] {
            stats.dropped_zero_range += 1;
            pixel_of_point.push(None);
            continue;
        }
        match grid.pixel_of(p) {
            None => {
                stats.dropped_outside += 1;
                pixel_of_point.push(None);
            }
            Some((v, u)) => {
                let i = v * grid.width + u;
                pixel_of_point.push(Some(i));
                if !filled[i] {
                    filled[i] = true;
                    coords[i] = p;
                    stats.landed += 1;
                } else {
                    stats.occluded += 1;
                    if closer(p, coords[i]) {
                        coords[i] = p;
                    }
                }
            }
        }
    }
    if pc.is_empty() {
        log::warn!("projecting an empty cloud");
    }
    let mask = ProjectionMask::from_validity(grid.height, grid.width, 0, &filled);
    Ok(Projection {
        image: PseudoImage {
            grid: *grid,
            coords,
        },
        mask,
        pixel_of_point,
        stats,
    })
}

/// A position of the output is valid iff any covered input position is.
pub fn downsample_mask(
    mask: &ProjectionMask,
    factor_v: usize,
    factor_u: usize,
) -> Result<ProjectionMask> {
    if factor_v == 0 || factor_u == 0 || mask.height % factor_v != 0 || mask.width % factor_u != 0 {
        return Err(Error::Invalid(format!(
            "mask {}x{} is not divisible by {factor_v}x{factor_u}",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height / factor_v, mask.width / factor_u);
    let mut valid = vec![false; h * w];
    for v in 0..mask.height {
        for u in 0..mask.width {
            if mask.is_valid(v * mask.width + u) {
                valid[(v / factor_v) * w + u / factor_u] = true;
            }
        }
    }
    Ok(ProjectionMask::from_validity(h, w, mask.stage + 1, &valid))
}

/// Per-token coordinate sums and valid-pixel counts. The centroid of a
/// token is `sum / count`; tokens with `count == 0` are invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGeometry {
    pub height: usize,
    pub width: usize,
    pub sums: Vec<Vec3>,
    pub counts: Vec<usize>,
}

impl TokenGeometry {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.counts[i] > 0
    }

    pub fn validity(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_valid(i)).collect()
    }

    /// Mean of the valid pixel coordinates; `(0, 0, 0)` for invalid tokens.
    pub fn centroid(&self, i: usize) -> Vec3 {
        let c = self.counts[i];
        if c == 0 {
            return [0.0; 3];
        }
        let s = self.sums[i];
        let n = c as f64;
        [s[0] / n, s[1] / n, s[2] / n]
    }

    pub fn centroids(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.centroid(i)).collect()
    }

    pub fn mask(&self, stage: usize) -> ProjectionMask {
        ProjectionMask::from_validity(self.height, self.width, stage, &self.validity())
    }

    /// 2x2 merge: counts and coordinate sums add, so centroids become
    /// count-weighted means.
    pub fn merge2x2(&self) -> Result<TokenGeometry> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Invalid(format!(
                "cannot merge a {}x{} token grid (odd dimension)",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / 2, self.width / 2);
        let mut sums = vec![[0.0; 3]; h * w];
        let mut counts = vec![0; h * w];
        for v in 0..self.height {
            for u in 0..self.width {
                let i = v * self.width + u;
                let o = (v / 2) * w + u / 2;
                counts[o] += self.counts[i];
                for k in 0..3 {
                    sums[o][k] += self.sums[i][k];
                }
            }
        }
        Ok(TokenGeometry {
            height: h,
            width: w,
            sums,
            counts,
        })
    }
}

pub fn token_centroids(
    img: &PseudoImage,
    mask: &ProjectionMask,
    patch_v: usize,
    patch_u: usize,
) -> Result<TokenGeometry> {
    let (hh, ww) = (img.height(), img.width());
    if patch_v == 0 || patch_u == 0 || hh % patch_v != 0 || ww % patch_u != 0 {
        return Err(Error::Invalid(format!(
            "image {hh}x{ww} is not divisible into {patch_v}x{patch_u} patches"
        )));
    }
    if mask.height != hh || mask.width != ww {
        return Err(Error::Invalid(format!(
            "mask {}x{} does not match image {hh}x{ww}",
            mask.height, mask.width
        )));
    }
    let (h, w) = (hh / patch_v, ww / patch_u);
    let mut sums = vec![[0.0; 3]; h * w];
    let mut counts = vec![0; h * w];
    for v in 0..hh {
        for u in 0..ww {
            let i = v * ww + u;
            if !mask.is_valid(i) {
                continue;
            }
            let o = (v / patch_v) * w + u / patch_u;
            counts[o] += 1;
            for k in 0..3 {
                sums[o][k] += img.coords[i][k];
            }
        }
    }
    Ok(TokenGeometry {
        height: h,
        width: w,
        sums,
        counts,
    })
}

/// Fraction of valid pixels whose stored coordinates project back to their
/// own index, and whether mask and coordinate test agree everywhere.
pub fn round_trip_check(img: &PseudoImage, mask: &ProjectionMask) -> (usize, usize, bool) {
    let mut valid = 0;
    let mut ok = 0;
    let mut agree = true;
    for i in 0..img.coords.len() {
        let filled = img.is_filled(i);
        if filled != mask.is_valid(i) {
            agree = false;
        }
        if filled {
            valid += 1;
            if let Some((v, u)) = img.grid.pixel_of(img.coords[i]) {
                if v * img.grid.width + u == i {
                    ok += 1;
                }
            }
        }
    }
    (ok, valid, agree)
}

/// Debug dump: `H`, `W` as little-endian `u32`, row-major `f32` triples,
/// then one byte per pixel (1 valid, 0 invalid).
pub fn write_debug_dump(path: &Path, img: &PseudoImage, mask: &ProjectionMask) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + img.coords.len() * 13);
    buf.extend_from_slice(&(img.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(img.width() as u32).to_le_bytes());
    for c in &img.coords {
        for v in c {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf.extend(mask.values.iter().map(|&v| u8::from(v == 0.0)));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a debug dump back as `(H, W, coords, validity)`.
pub fn read_debug_dump(path: &Path) -> Result<(usize, usize, Vec<[f32; 3]>, Vec<bool>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let fmt_err = |offset: usize, msg: &str| Error::Format {
        context: ctx.clone(),
        offset: offset as u64,
        msg: msg.into(),
    };
    if bytes.len() < 8 {
        return Err(fmt_err(bytes.len(), "missing header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = h * w;
    let expected = 8 + n * 12 + n;
    if bytes.len() != expected {
        return Err(fmt_err(
            bytes.len().min(expected),
            &format!("expected {expected} bytes for a {h}x{w} dump"),
        ));
    }
    let coords = (0..n)
        .map(|i| {
            let base = 8 + i * 12;
            let f = |k: usize| {
                f32::from_le_bytes(bytes[base + 4 * k..base + 4 * k + 4].try_into().unwrap())
            };
            [f(0), f(1), f(2)]
        })
        .collect();
    let valid = bytes[8 + n * 12..].iter().map(|&b| b == 1).collect();
    Ok((h, w, coords, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::synth_scene;
    use std::f64::consts::PI;

    fn test_grid(h: usize, w: usize) -> GridSpec {
        GridSpec {
            height: h,
            width: w,
            dtheta: 2.0 * PI / w as f64,
            dphi: (40.0f64).to_radians() / h as f64,
            v_offset: (h / 2) as f64,
            u_offset: (w / 2) as f64,
        }
    }

    #[test]
    fn forward_point_maps_to_center() {
        let g = test_grid(16, 64);
        assert_eq!(g.pixel_of([10.0, 0.0, 0.0]), Some((8, 32)));
    }

    #[test]
    fn left_point_is_a_quarter_turn_over() {
        let g = test_grid(16, 64);
        assert_eq!(g.pixel_of([0.0, 10.0, 0.0]), Some((8, 48)));
    }

    #[test]
    fn nearest_point_wins_a_collision() {
        let g = test_grid(16, 64);
        let near = [5.0, 0.0, 0.0];
        let far = [9.0, 0.0, 0.0];
        for pts in [vec![far, near], vec![near, far]] {
            let pr = project_cylindrical(&PointCloud::new(pts), &g).unwrap();
            assert_eq!(pr.image.at(8, 32), near);
            assert_eq!(pr.stats.occluded, 1);
        }
    }

    /// Brute force: for every pixel, scan all points, keep those that
    /// re-project onto it, take the nearest.
    #[test]
    fn collisions_match_brute_force_reprojection() {
        let g = build_default_grid(GridPreset::Desk16x64).unwrap();
        let pc = synth_scene(21, 3000, 30.0);
        let pr = project_cylindrical(&pc, &g).unwrap();
        for pix in 0..g.pixels() {
            let mut best: Option<Vec3> = None;
            for &p in &pc.points {
                if let Some((v, u)) = g.pixel_of(p) {
                    if v * g.width + u == pix {
                        let r = p.iter().map(|x| x * x).sum::<f64>();
                        if best.map_or(true, |b| r < b.iter().map(|x| x * x).sum::<f64>()) {
                            best = Some(p);
                        }
                    }
                }
            }
            assert_eq!(pr.image.coords[pix], best.unwrap_or([0.0; 3]));
        }
    }

    #[test]
    fn zero_range_and_out_of_fov_points_are_dropped() {
        let g = build_default_grid(GridPreset::Desk16x64).unwrap();
        let pc = PointCloud::new(vec![[0.0; 3], [0.0, 0.0, 5.0], [10.0, 0.0, 0.0]]);
        let pr = project_cylindrical(&pc, &g).unwrap();
        assert_eq!(pr.stats.dropped_zero_range, 1);
        assert_eq!(pr.stats.dropped_outside, 1);
        assert_eq!(pr.stats.landed, 1);
        assert_eq!(pr.mask.valid_count(), 1);
    }

    #[test]
    fn presets() {
        let k = build_default_grid(GridPreset::Kitti64x1792).unwrap();
        assert_eq!((k.height, k.width), (64, 1792));
        assert!((k.dtheta - 2.0 * PI / 1792.0).abs() < 1e-15);
        let d = build_default_grid(GridPreset::Desk16x64).unwrap();
        assert!((d.dtheta - 2.0 * PI / 64.0).abs() < 1e-15);
        assert!(build_default_grid(GridPreset::Custom {
            height: 0,
            width: 8,
            elev_min_deg: -10.0,
            elev_max_deg: 10.0
        })
        .is_err());
    }

    #[test]
    fn fov_edges_land_on_border_rows() {
        let g = build_default_grid(GridPreset::Desk16x64).unwrap();
        let at = |deg: f64| {
            let e = deg.to_radians();
            g.pixel_of([e.cos(), 0.0, e.sin()]).map(|(v, _)| v)
        };
        assert_eq!(at(-29.9), Some(0));
        assert_eq!(at(9.9), Some(15));
        assert_eq!(at(10.5), None);
        assert_eq!(at(-30.5), None);
    }

    #[test]
    fn desk_scene_fills_enough_pixels() {
        let g = build_default_grid(GridPreset::Desk16x64).unwrap();
        for seed in 0..5 {
            let pr = project_cylindrical(&synth_scene(seed, 1000, 40.0), &g).unwrap();
            let frac = pr.mask.valid_count() as f64 / g.pixels() as f64;
            assert!(frac >= 0.3, "seed {seed}: {frac}");
        }
    }

    #[test]
    fn downsample_any_valid_rule() {
        let invalid = ProjectionMask::from_validity(4, 8, 0, &[false; 32]);
        assert_eq!(
            downsample_mask(&invalid, 4, 8).unwrap().values,
            vec![MASK_VALUE]
        );
        let mut one = vec![false; 32];
        one[13] = true;
        let m = ProjectionMask::from_validity(4, 8, 0, &one);
        assert_eq!(downsample_mask(&m, 4, 8).unwrap().values, vec![0.0]);
        let checker: Vec<bool> = (0..16).map(|i| (i / 4 + i % 4) % 2 == 0).collect();
        let m = ProjectionMask::from_validity(4, 4, 0, &checker);
        let d = downsample_mask(&m, 2, 2).unwrap();
        assert_eq!(d.valid_count(), 4);
        assert!(downsample_mask(&m, 3, 2).is_err());
    }

    #[test]
    fn staged_downsampling_composes() {
        let g = build_default_grid(GridPreset::Desk16x64).unwrap();
        let pr = project_cylindrical(&synth_scene(4, 400, 40.0), &g).unwrap();
        let a = downsample_mask(&downsample_mask(&pr.mask, 2, 4).unwrap(), 2, 2).unwrap();
        let b = downsample_mask(&pr.mask, 4, 8).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn centroid_rules() {
        let grid = test_grid(2, 2);
        let mut coords = vec![[0.0; 3]; 4];
        coords[0] = [0.0, 0.0, 1.0];
        coords[3] = [0.0, 0.0, 3.0];
        let img = PseudoImage { grid, coords };
        let valid: Vec<bool> = (0..4).map(|i| img.is_filled(i)).collect();
        let mask = ProjectionMask::from_validity(2, 2, 0, &valid);
        let geo = token_centroids(&img, &mask, 2, 2).unwrap();
        assert_eq!(geo.centroid(0), [0.0, 0.0, 2.0]);
        let single = token_centroids(&img, &mask, 1, 1).unwrap();
        assert_eq!(single.centroid(0), [0.0, 0.0, 1.0]);
        assert!(!single.is_valid(1));
        assert_eq!(single.centroid(1), [0.0; 3]);
    }

    #[test]
    fn merging_preserves_coordinate_mass() {
        let g = build_default_grid(GridPreset::Desk16x64).unwrap();
        let pr = project_cylindrical(&synth_scene(8, 900, 40.0), &g).unwrap();
        let geo = token_centroids(&pr.image, &pr.mask, 2, 4).unwrap();
        let merged = geo.merge2x2().unwrap();
        let mass = |t: &TokenGeometry| {
            (0..t.len()).fold([0.0; 3], |mut acc, i| {
                let c = t.centroid(i);
                for k in 0..3 {
                    acc[k] += c[k] * t.counts[i] as f64;
                }
                acc
            })
        };
        let (a, b) = (mass(&geo), mass(&merged));
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-9 * a[k].abs().max(1.0));
        }
        assert_eq!(
            merged.mask(1).values,
            downsample_mask(&geo.mask(0), 2, 2).unwrap().values
        );
    }

    #[test]
    fn debug_dump_round_trip() {
        let g = build_default_grid(GridPreset::Desk16x64).unwrap();
        let pr = project_cylindrical(&synth_scene(2, 500, 40.0), &g).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.dump");
        write_debug_dump(&path, &pr.image, &pr.mask).unwrap();
        let (h, w, coords, valid) = read_debug_dump(&path).unwrap();
        assert_eq!((h, w), (16, 64));
        assert_eq!(valid, pr.mask.validity());
        assert_eq!(coords[5][0], pr.image.coords[5][0] as f32);
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 8 + 16 * 64 * 13);
    }
}
