//! Run configuration: one TOML document, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use scanreg::model::ModelConfig;
use scanreg::projection::{build_default_grid, GridPreset, GridSpec};
use scanreg::training::{LossConfig, OptimConfig, OverfitConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// `desk16x64`, `kitti64x1792` or `custom`.
    pub preset: String,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub elev_min_deg: Option<f64>,
    pub elev_max_deg: Option<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            preset: "desk16x64".into(),
            height: None,
            width: None,
            elev_min_deg: None,
            elev_max_deg: None,
        }
    }
}

impl GridConfig {
    pub fn preset(&self) -> Result<GridPreset> {
        if self.preset == "custom" {
            match (
                self.height,
                self.width,
                self.elev_min_deg,
                self.elev_max_deg,
            ) {
                (Some(height), Some(width), Some(elev_min_deg), Some(elev_max_deg)) => {
                    Ok(GridPreset::Custom {
                        height,
                        width,
                        elev_min_deg,
                        elev_max_deg,
                    })
                }
                _ => {
                    bail!("grid preset `custom` needs height, width, elev_min_deg and elev_max_deg")
                }
            }
        } else {
            if self.height.is_some() || self.width.is_some() {
                bail!("grid height/width are only used with preset = \"custom\"");
            }
            self.preset.parse().map_err(anyhow::Error::msg)
        }
    }

    pub fn spec(&self) -> Result<GridSpec> {
        Ok(build_default_grid(self.preset()?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rre_thresh_deg: f64,
    pub rte_thresh_m: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rre_thresh_deg: 5.0,
            rte_thresh_m: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/latest"),
            checkpoint: None,
            pairs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub overfit: OverfitConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            precision: Precision::F64,
            grid: GridConfig::default(),
            model: ModelConfig::toy(),
            loss: LossConfig::default(),
            optim: OptimConfig {
                decay_horizon: 600,
                ..OptimConfig::default()
            },
            overfit: OverfitConfig {
                target_rre_deg: 2.0,
                target_rte_m: 0.1,
                check_every: 20,
                ..OverfitConfig::default()
            },
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.preset()?;
        self.model.encoder.validate()?;
        if self.model.k == 0 {
            bail!("model.k must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Annotated default configuration written by `init-config`.
pub const TEMPLATE: &str = r#"# scanreg run configuration. Every key is optional; omitted keys take the
# values shown here. Unknown keys are rejected.

seed = 7
# Floating point width of training and inference: "f32" or "f64".
precision = "f64"

[grid]
# "desk16x64" (16 x 64, elevation -30..10 deg), "kitti64x1792"
# (64 x 1792, elevation -24.8..2 deg) or "custom" with height, width,
# elev_min_deg and elev_max_deg.
preset = "desk16x64"

[model]
# Projection mask in attention and pooling; off = every pixel valid.
use_mask = true
# Cross-frame attention before association.
cross_attention = true
# Coarsest layer correlates every source token with every target token;
# false uses the k nearest instead.
all_to_all = true
# Neighbors per source token in the k-nearest layers.
k = 16

[model.encoder]
# Stage-0 width; stage l has channels * 2^l. The full-size network uses 32.
channels = 16
# Pixels per token (rows, columns). The full-size network uses [4, 8].
patch = [2, 4]
window = 4
shift = 2
mlp_ratio = 4
head_dim = 32

[loss]
# Layer weights for layers 0, 1, 2, 3.
alpha = [1.6, 0.8, 0.4, 0.2]
# Initial translation and rotation balance scalars.
k_t_init = 0.0
k_r_init = -2.5

[optim]
# Adam with exponential decay from lr to the lr_min floor.
lr = 0.001
lr_min = 0.00001
# Steps to reach the floor. The full-size schedule uses 200000; toy runs
# shrink it in proportion.
decay_horizon = 600
beta1 = 0.9
beta2 = 0.999
eps = 1e-8

[overfit]
pairs = 4
points = 2000
extent = 30.0
max_rot_deg = 10.0
max_trans_m = 2.0
steps = 5000
# Stop early once every pair's final error is below these bounds and
# per-layer errors shrink toward layer 0; 0 disables early stopping.
target_rre_deg = 2.0
target_rte_m = 0.1
check_every = 20

[eval]
# Success thresholds: RRE < rre_thresh_deg and RTE < rte_thresh_m.
rre_thresh_deg = 5.0
rte_thresh_m = 2.0

[paths]
out = "runs/latest"
"#;
