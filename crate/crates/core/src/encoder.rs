//! Hierarchical window-attention encoder over projected pseudo images.
//!
//! Stage 0 is a patch embedding; stages 1..=3 each merge 2x2 tokens and run
//! one regular-window block followed by one shifted-window block. Windows
//! wrap around horizontally (the image is a cylinder) while the vertical
//! shift masks token pairs that come from different sides of the seam.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Activation, LayerNorm, Linear, Mlp, ParamId, ParamStore, Session};
use crate::projection::{token_centroids, ProjectionMask, PseudoImage, TokenGeometry};
use crate::tensor::{Real, Tensor, Var, MASK_VALUE};

pub const INIT_STD: f64 = 0.02;
pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Base width C; stage l has width C * 2^l.
    pub channels: usize,
    /// Patch height and width in pixels.
    pub patch: [usize; 2],
    pub window: usize,
    pub shift: usize,
    pub mlp_ratio: usize,
    /// Per-head width used to derive head counts (`max(1, C_l / head_dim)`).
    pub head_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            patch: [4, 8],
            window: 4,
            shift: 2,
            mlp_ratio: 4,
            head_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.channels << stage
    }

    pub fn heads(&self, stage: usize) -> usize {
        (self.stage_channels(stage) / self.head_dim).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.mlp_ratio == 0 || self.head_dim == 0 {
            return Err(Error::Invalid("encoder widths must be positive".into()));
        }
        if self.patch[0] == 0 || self.patch[1] == 0 {
            return Err(Error::Invalid("patch size must be positive".into()));
        }
        if self.window == 0 || self.shift >= self.window {
            return Err(Error::Invalid(format!(
                "need 0 <= shift < window, got shift {} window {}",
                self.shift, self.window
            )));
        }
        for stage in 1..NUM_STAGES {
            let c = self.stage_channels(stage);
            if c % self.heads(stage) != 0 {
                return Err(Error::Invalid(format!(
                    "stage {stage} width {c} not divisible by {} heads",
                    self.heads(stage)
                )));
            }
        }
        Ok(())
    }

    /// Token grid sizes for stages 0..=3 given the pixel grid, or an error
    /// naming the padding needed.
    pub fn token_grids(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        let [ph, pw] = self.patch;
        let mult_v = ph << (NUM_STAGES - 1);
        let mult_u = pw << (NUM_STAGES - 1);
        if height % mult_v != 0 || width % mult_u != 0 {
            let pad_v = (mult_v - height % mult_v) % mult_v;
            let pad_u = (mult_u - width % mult_u) % mult_u;
            return Err(Error::Invalid(format!(
                "image {height}x{width} does not fit patch {ph}x{pw} with {} merges; \
                 pad by {pad_v} rows and {pad_u} columns",
                NUM_STAGES - 1
            )));
        }
        Ok((0..NUM_STAGES)
            .map(|l| (height / ph >> l, width / pw >> l))
            .collect())
    }
}

/// Features of one stage: `features` is `[H_l * W_l, C_l]` in raster order.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub stage: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub features: Var,
    pub geometry: TokenGeometry,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validity(&self) -> Vec<bool> {
        self.geometry.validity()
    }

    pub fn mask(&self) -> ProjectionMask {
        self.geometry.mask(self.stage)
    }
}

/// Index bookkeeping for one (grid, shifted) combination.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub win_v: usize,
    pub win_u: usize,
    pub num_windows: usize,
    /// `perm[j]` is the raster index of the token at window-ordered slot `j`.
    pub perm: Vec<usize>,
    pub inverse: Vec<usize>,
    /// Per window, `T x T` flags for pairs separated by the vertical seam.
    pub seam: Vec<bool>,
    /// Relative-position table row for each `(query, key)` slot pair.
    pub rel_index: Vec<usize>,
}

impl WindowLayout {
    pub fn tokens_per_window(&self) -> usize {
        self.win_v * self.win_u
    }

    pub fn new(
        height: usize,
        width: usize,
        window: usize,
        shift: usize,
        shifted: bool,
    ) -> Result<Self> {
        // A window covering a whole axis is clamped to it and never shifts
        // along it.
        let win_v = window.min(height);
        let win_u = window.min(width);
        if height % win_v != 0 || width % win_u != 0 {
            return Err(Error::Invalid(format!(
                "window {window} does not tile a {height}x{width} grid"
            )));
        }
        let shift_v = if shifted && win_v < height { shift } else { 0 };
        let shift_u = if shifted && win_u < width { shift } else { 0 };
        let (nv, nu) = (height / win_v, width / win_u);
        let t = win_v * win_u;
        let mut perm = Vec::with_capacity(height * width);
        let mut region = Vec::with_capacity(height * width);
        for wv in 0..nv {
            for wu in 0..nu {
                for a in 0..win_v {
                    for b in 0..win_u {
                        // Shifted coordinates (r, c) read the original token at
                        // (r + shift) mod size.
                        let r = wv * win_v + a;
                        let c = wu * win_u + b;
                        let src_r = (r + shift_v) % height;
                        let src_c = (c + shift_u) % width;
                        perm.push(src_r * width + src_c);
                        region.push(if shift_v == 0 || r < height - win_v {
                            0
                        } else if r < height - shift_v {
                            1
                        } else {
                            2
                        });
                    }
                }
            }
        }
        let mut inverse = vec![0; perm.len()];
        for (j, &i) in perm.iter().enumerate() {
            inverse[i] = j;
        }
        let num_windows = nv * nu;
        let mut seam = vec![false; num_windows * t * t];
        for w in 0..num_windows {
            for i in 0..t {
                for j in 0..t {
                    seam[(w * t + i) * t + j] = region[w * t + i] != region[w * t + j];
                }
            }
        }
        let span = 2 * window - 1;
        let mut rel_index = Vec::with_capacity(t * t);
        for i in 0..t {
            for j in 0..t {
                let dv = (i / win_u) as isize - (j / win_u) as isize + window as isize - 1;
                let du = (i % win_u) as isize - (j % win_u) as isize + window as isize - 1;
                rel_index.push(dv as usize * span + du as usize);
            }
        }
        Ok(Self {
            win_v,
            win_u,
            num_windows,
            perm,
            inverse,
            seam,
            rel_index,
        })
    }

    /// Additive `[num_windows, 1, T, T]` mask: invalid keys and seam pairs
    /// get [`MASK_VALUE`].
    pub fn attention_mask<T: Real>(&self, valid: &[bool]) -> Tensor<T> {
        let t = self.tokens_per_window();
        let mut data = vec![T::zero(); self.num_windows * t * t];
        for w in 0..self.num_windows {
            for i in 0..t {
                for j in 0..t {
                    let k = (w * t + i) * t + j;
                    if !valid[self.perm[w * t + j]] || self.seam[k] {
                        data[k] = T::c(MASK_VALUE);
                    }
                }
            }
        }
        Tensor::new(vec![self.num_windows, 1, t, t], data).expect("mask shape")
    }
}

fn column_mask<T: Real>(valid: &[bool]) -> Tensor<T> {
    let data = valid
        .iter()
        .map(|&v| if v { T::one() } else { T::zero() })
        .collect();
    Tensor::new(vec![valid.len(), 1], data).expect("mask shape")
}

/// Multi-head attention within windows, with a learned relative-position
/// bias table of `(2w - 1)^2` entries per head.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub bias_table: ParamId,
    pub heads: usize,
    pub dim: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        rng: &mut R,
    ) -> Self {
        let lin = |store: &mut ParamStore<T>, n: &str, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), dim, dim, true, INIT_STD, rng)
        };
        let q = lin(store, "q", rng);
        let k = lin(store, "k", rng);
        let v = lin(store, "v", rng);
        let proj = lin(store, "proj", rng);
        let span = 2 * window - 1;
        let bias_table = store.add(
            format!("{name}.rel_bias"),
            Tensor::zeros(vec![span * span, heads]),
        );
        Self {
            q,
            k,
            v,
            proj,
            bias_table,
            heads,
            dim,
            window,
        }
    }

    /// Returns the output `[N, C]` and the attention weights
    /// `[num_windows, heads, T, T]` (window-ordered slots).
    pub fn forward_with_weights<T: Real>(
        &self,
        s: &mut Session<T>,
        x: Var,
        layout: &WindowLayout,
        valid: &[bool],
    ) -> Result<(Var, Var)> {
        let n = s.g.shape(x)[0];
        let (nw, t, h) = (layout.num_windows, layout.tokens_per_window(), self.heads);
        let d = self.dim / h;
        let xw = s.g.gather_rows(x, &layout.perm)?;
        let split = |s: &mut Session<T>, lin: &Linear| -> Result<Var> {
            let y = lin.forward(s, xw)?;
            let y = s.g.reshape(y, &[nw, t, h, d])?;
            let y = s.g.permute(y, &[0, 2, 1, 3])?;
            Ok(s.g.reshape(y, &[nw * h, t, d])?)
        };
        let q = split(s, &self.q)?;
        let k = split(s, &self.k)?;
        let v = split(s, &self.v)?;
        let scores = s.g.bmm(q, k, true)?;
        let scores = s.g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let scores = s.g.reshape(scores, &[nw, h, t, t])?;
        let table = s.p(self.bias_table);
        let bias = s.g.gather_rows(table, &layout.rel_index)?;
        let bias = s.g.transpose(bias)?;
        let bias = s.g.reshape(bias, &[h, t, t])?;
        let scores = s.g.add(scores, bias)?;
        let mask = layout.attention_mask::<T>(valid);
        let attn = s.g.masked_softmax(scores, &mask, 3)?;
        let a = s.g.reshape(attn, &[nw * h, t, t])?;
        let y = s.g.bmm(a, v, false)?;
        let y = s.g.reshape(y, &[nw, h, t, d])?;
        let y = s.g.permute(y, &[0, 2, 1, 3])?;
        let y = s.g.reshape(y, &[n, self.dim])?;
        let y = self.proj.forward(s, y)?;
        let y = s.g.gather_rows(y, &layout.inverse)?;
        let keep = s.g.constant(column_mask(valid));
        Ok((s.g.mul(y, keep)?, attn))
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        x: Var,
        layout: &WindowLayout,
        valid: &[bool],
    ) -> Result<Var> {
        Ok(self.forward_with_weights(s, x, layout, valid)?.0)
    }
}

/// Pre-norm attention block followed by a pre-norm GELU MLP, both residual.
#[derive(Clone, Debug)]
pub struct WindowBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub shifted: bool,
}

impl WindowBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        cfg: &EncoderConfig,
        shifted: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(store, &format!("{name}.attn"), dim, heads, cfg.window, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                &[dim, cfg.mlp_ratio * dim, dim],
                Activation::Gelu,
                INIT_STD,
                rng,
            ),
            shifted,
        }
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        x: Var,
        layout: &WindowLayout,
        valid: &[bool],
    ) -> Result<Var> {
        let y = self.norm1.forward(s, x)?;
        let y = self.attn.forward(s, y, layout, valid)?;
        let x = s.g.add(x, y)?;
        let y = self.norm2.forward(s, x)?;
        let y = self.mlp.forward(s, y)?;
        Ok(s.g.add(x, y)?)
    }
}

/// 2x2 neighbor concatenation, layer norm, and a bias-free reduction to
/// twice the width.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
    pub dim: usize,
}

impl PatchMerge {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduce: Linear::new(
                store,
                &format!("{name}.reduce"),
                4 * dim,
                2 * dim,
                false,
                INIT_STD,
                rng,
            ),
            dim,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, grid: &TokenGrid) -> Result<TokenGrid> {
        let geometry = grid.geometry.merge2x2()?;
        let (h, w) = (grid.height / 2, grid.width / 2);
        let mut idx = Vec::with_capacity(grid.len());
        for v in 0..h {
            for u in 0..w {
                for (dv, du) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    idx.push((2 * v + dv) * grid.width + 2 * u + du);
                }
            }
        }
        let x = s.g.gather_rows(grid.features, &idx)?;
        let x = s.g.reshape(x, &[h * w, 4 * self.dim])?;
        let x = self.norm.forward(s, x)?;
        let features = self.reduce.forward(s, x)?;
        Ok(TokenGrid {
            stage: grid.stage + 1,
            height: h,
            width: w,
            channels: 2 * self.dim,
            features,
            geometry,
        })
    }
}

/// Flattens each `ph x pw x 3` patch and maps it affinely to `C`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: [usize; 2],
}

impl PatchEmbed {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let d_in = cfg.patch[0] * cfg.patch[1] * 3;
        Self {
            proj: Linear::new(
                store,
                &format!("{name}.proj"),
                d_in,
                cfg.channels,
                true,
                INIT_STD,
                rng,
            ),
            patch: cfg.patch,
        }
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        img: &PseudoImage,
        mask: &ProjectionMask,
    ) -> Result<TokenGrid> {
        let [ph, pw] = self.patch;
        let geometry = token_centroids(img, mask, ph, pw)?;
        let (h, w) = (geometry.height, geometry.width);
        let width = img.width();
        let d_in = ph * pw * 3;
        let mut data = Vec::with_capacity(h * w * d_in);
        for v in 0..h {
            for u in 0..w {
                for a in 0..ph {
                    for b in 0..pw {
                        let p = (v * ph + a) * width + u * pw + b;
                        // Pixels excluded by the mask contribute zeros.
                        let c = if mask.is_valid(p) {
                            img.coords[p]
                        } else {
                            [0.0; 3]
                        };
                        data.extend(c.iter().map(|&x| T::c(x)));
                    }
                }
            }
        }
        let x = s.g.constant(Tensor::new(vec![h * w, d_in], data)?);
        let features = self.proj.forward(s, x)?;
        Ok(TokenGrid {
            stage: 0,
            height: h,
            width: w,
            channels: self.proj.d_out,
            features,
            geometry,
        })
    }
}

/// Merge (absent at stage 0) followed by a regular and a shifted block.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub merge: PatchMerge,
    pub blocks: [WindowBlock; 2],
    pub window: usize,
    pub shift: usize,
}

impl EncoderStage {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        stage: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let dim_in = cfg.stage_channels(stage - 1);
        let dim = cfg.stage_channels(stage);
        let heads = cfg.heads(stage);
        let merge = PatchMerge::new(store, &format!("{name}.merge"), dim_in, rng);
        let blocks = [
            WindowBlock::new(
                store,
                &format!("{name}.block0"),
                dim,
                heads,
                cfg,
                false,
                rng,
            ),
            WindowBlock::new(store, &format!("{name}.block1"), dim, heads, cfg, true, rng),
        ];
        Self {
            merge,
            blocks,
            window: cfg.window,
            shift: cfg.shift,
        }
    }

    /// Attention blocks only, on a grid of this stage's width.
    pub fn blocks_forward<T: Real>(
        &self,
        s: &mut Session<T>,
        grid: TokenGrid,
    ) -> Result<TokenGrid> {
        let valid = grid.validity();
        let mut x = grid.features;
        for block in &self.blocks {
            let layout = WindowLayout::new(
                grid.height,
                grid.width,
                self.window,
                self.shift,
                block.shifted,
            )?;
            x = block.forward(s, x, &layout, &valid)?;
        }
        Ok(TokenGrid {
            features: x,
            ..grid
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, grid: &TokenGrid) -> Result<TokenGrid> {
        let merged = self.merge.forward(s, grid)?;
        self.blocks_forward(s, merged)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::new(store, &format!("{name}.embed"), cfg, rng);
        let stages = (1..NUM_STAGES)
            .map(|l| EncoderStage::new(store, &format!("{name}.stage{l}"), l, cfg, rng))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            embed,
            stages,
        })
    }

    /// Token grids for stages 0..=3.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        img: &PseudoImage,
        mask: &ProjectionMask,
    ) -> Result<Vec<TokenGrid>> {
        self.config.token_grids(img.height(), img.width())?;
        let mut grids = vec![self.embed.forward(s, img, mask)?];
        for stage in &self.stages {
            let next = stage.forward(s, grids.last().unwrap())?;
            grids.push(next);
        }
        Ok(grids)
    }
}

/// Valid-token rows of a grid with their centroids.
pub fn flatten_valid<T: Real>(
    s: &mut Session<T>,
    grid: &TokenGrid,
) -> Result<(Var, Vec<[f64; 3]>, Vec<usize>)> {
    let idx = grid.geometry.valid_indices();
    if idx.is_empty() {
        return Err(Error::Degenerate(format!(
            "stage {} has no valid tokens",
            grid.stage
        )));
    }
    let f = s.g.gather_rows(grid.features, &idx)?;
    let coords = idx.iter().map(|&i| grid.geometry.centroid(i)).collect();
    Ok((f, coords, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::synth_scene;
    use crate::projection::{build_default_grid, project_cylindrical, GridPreset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            channels: 16,
            patch: [2, 4],
            ..Default::default()
        }
    }

    #[test]
    fn kitti_token_grids() {
        let cfg = EncoderConfig::default();
        let g = cfg.token_grids(64, 1792).unwrap();
        assert_eq!(g, vec![(16, 224), (8, 112), (4, 56), (2, 28)]);
        assert_eq!(cfg.stage_channels(3), 8 * cfg.channels);
    }

    #[test]
    fn indivisible_image_names_padding() {
        let err = EncoderConfig::default().token_grids(60, 1792).unwrap_err();
        assert!(err.to_string().contains("pad by 4 rows"), "{err}");
    }

    #[test]
    fn desk_patch_embed_grid() {
        let grid = build_default_grid(GridPreset::Desk16x64).unwrap();
        let pr = project_cylindrical(&synth_scene(1, 1000, 30.0), &grid).unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let embed = PatchEmbed::new(&mut store, "e", &EncoderConfig::default(), &mut rng);
        let mut s = Session::new(&store);
        let g = embed.forward(&mut s, &pr.image, &pr.mask).unwrap();
        assert_eq!((g.height, g.width), (4, 8));
        assert_eq!(s.g.shape(g.features), &[32, 32]);
    }

    #[test]
    fn layout_is_a_permutation_and_clamps() {
        for (h, w, shifted) in [(8, 16, false), (8, 16, true), (2, 28, true), (1, 2, true)] {
            let l = WindowLayout::new(h, w, 4, 2, shifted).unwrap();
            let mut seen = vec![false; h * w];
            for &p in &l.perm {
                assert!(!seen[p]);
                seen[p] = true;
            }
            assert_eq!(l.win_v, 4.min(h));
            assert!(l.seam.iter().all(|&b| !b) || (shifted && h > 4));
        }
        assert!(WindowLayout::new(6, 8, 4, 2, false).is_err());
    }

    #[test]
    fn horizontal_shift_wraps_without_seam_mask() {
        let l = WindowLayout::new(4, 8, 4, 2, true).unwrap();
        // The second window contains columns 6, 7, 0, 1 of each row.
        let t = l.tokens_per_window();
        let cols: Vec<usize> = l.perm[t..t + 4].iter().map(|p| p % 8).collect();
        assert_eq!(cols, vec![6, 7, 0, 1]);
        assert!(l.seam.iter().all(|&b| !b));
    }

    #[test]
    fn vertical_shift_masks_the_seam() {
        let l = WindowLayout::new(8, 4, 4, 2, true).unwrap();
        let t = l.tokens_per_window();
        // Last window holds rows 6, 7 (bottom) and 0, 1 (wrapped top).
        let rows: Vec<usize> = (0..4).map(|a| l.perm[t + a * 4] / 4).collect();
        assert_eq!(rows, vec![6, 7, 0, 1]);
        let seam = &l.seam[t * t..2 * t * t];
        assert!(!seam[1]); // both in row 6
        assert!(!seam[4]); // rows 6 and 7 sit on the same side
        assert!(seam[8]); // row 6 vs wrapped row 0
        assert!(l.seam[..t * t].iter().all(|&b| !b));
    }

    #[test]
    fn zero_weights_make_a_stage_the_identity() {
        let cfg = toy_cfg();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stage = EncoderStage::new(&mut store, "s", 1, &cfg, &mut rng);
        for t in store.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut s = Session::new(&store);
        let x: Vec<f64> = (0..8 * 32).map(|i| (i as f64 * 0.37).sin()).collect();
        let xv = s.g.constant(Tensor::new(vec![8, 32], x.clone()).unwrap());
        let geometry = TokenGeometry {
            height: 2,
            width: 4,
            sums: vec![[1.0; 3]; 8],
            counts: vec![1; 8],
        };
        let grid = TokenGrid {
            stage: 1,
            height: 2,
            width: 4,
            channels: 32,
            features: xv,
            geometry,
        };
        let out = stage.blocks_forward(&mut s, grid).unwrap();
        assert_eq!(s.g.data(out.features), &x[..]);
    }

    #[test]
    fn all_invalid_image_gives_finite_output() {
        let grid = build_default_grid(GridPreset::Desk16x64).unwrap();
        let img = PseudoImage {
            grid,
            coords: vec![[0.0; 3]; grid.pixels()],
        };
        let mask = ProjectionMask::from_validity(16, 64, 0, &vec![false; grid.pixels()]);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(&mut store, "enc", &toy_cfg(), &mut rng).unwrap();
        let mut s = Session::new(&store);
        let grids = enc.forward(&mut s, &img, &mask).unwrap();
        for g in &grids {
            assert!(g.validity().iter().all(|&v| !v));
            assert!(s.g.value(g.features).all_finite());
        }
        assert!(flatten_valid(&mut s, &grids[3]).is_err());
    }
}
