//! TOML run configuration.
//!
//! ```toml
//! [map]
//! resolution = 0.04          # m per cell
//! width = 250                # cells along y
//! height = 250               # cells along x
//! center = [0.0, 0.0]
//! layers = ["class_grass", "class_person"]
//! height_variance = 0.01     # per-point sigma_z^2, m^2
//! follow_robot = false       # recenter on the sensor before each update
//!
//! [[sources]]
//! name = "depth"
//! kind = "cloud"             # or "image"
//! width = 64
//! height = 48
//! fx = 60.0
//! fy = 60.0
//! cx = 31.5
//! cy = 23.5
//! start = [-1.0, 0.0, 2.0]   # sensor position at the first step
//! end = [1.0, 0.0, 2.0]      # and at the last step
//! look = [1.0, 0.0, -2.0]    # viewing direction, kept along the path
//! noise_sigma_z = 0.1
//! seed = 7
//! classes = "soft"           # "none", "one_hot" or "soft"
//! epsilon = 0.1
//! rgb = false
//! features = false
//!
//! [[sources.fusion]]
//! channels = ["class_grass", "class_person"]
//! layers = ["class_grass", "class_person"]
//! algorithm = "dirichlet"
//! prior_alpha = [1.0]
//!
//! [[plugins]]
//! plugin = "semantic_argmax"
//! inputs = ["class_grass", "class_person"]
//! every = 1
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{check_layer_conflicts, FusionConfig, HeightParams, DEFAULT_HEIGHT_VARIANCE};
use crate::grid::{GridMap, MapGeometry};
use crate::plugins::PluginSpec;
use crate::sensor::{CameraIntrinsics, Pose};
use crate::sim::{ChannelRequest, ClassEncoding, RenderOptions};

fn default_height_variance() -> f64 {
    DEFAULT_HEIGHT_VARIANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapConfig {
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub center: [f64; 2],
    #[serde(default)]
    pub layers: Vec<String>,
    #[serde(default = "default_height_variance")]
    pub height_variance: f64,
    #[serde(default)]
    pub follow_robot: bool,
}

impl MapConfig {
    pub fn geometry(&self) -> Result<MapGeometry> {
        MapGeometry::new(self.resolution, self.width, self.height, self.center)
    }

    pub fn create(&self) -> Result<GridMap> {
        GridMap::new(self.geometry()?, &self.layers)
    }

    pub fn height_params(&self) -> HeightParams {
        HeightParams {
            measurement_variance: self.height_variance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Cloud,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMode {
    #[default]
    None,
    OneHot,
    Soft,
}

fn default_range() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub name: String,
    pub kind: SourceKind,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub start: [f64; 3],
    #[serde(default)]
    pub end: Option<[f64; 3]>,
    pub look: [f64; 3],
    #[serde(default)]
    pub noise_sigma_z: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_range")]
    pub max_range: f64,
    #[serde(default)]
    pub classes: ClassMode,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub rgb: bool,
    #[serde(default)]
    pub features: bool,
    #[serde(default)]
    pub fusion: Vec<FusionConfig>,
}

impl SourceConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }

    /// Sensor pose at `step` of `steps`, moving linearly from `start` to `end`.
    pub fn pose_at(&self, step: usize, steps: usize) -> Result<Pose> {
        let end = self.end.unwrap_or(self.start);
        let s = if steps > 1 { step as f64 / (steps - 1) as f64 } else { 0.0 };
        let eye: [f64; 3] = std::array::from_fn(|k| self.start[k] + s * (end[k] - self.start[k]));
        let target: [f64; 3] = std::array::from_fn(|k| eye[k] + self.look[k]);
        // A vertical viewing direction needs a horizontal up hint.
        let horizontal = self.look[0].hypot(self.look[1]);
        let up = if horizontal < 1e-9 * self.look[2].abs() { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
        Pose::look_at(eye, target, up)
    }

    pub fn render_options(&self, step: usize) -> RenderOptions {
        RenderOptions {
            noise_sigma_z: self.noise_sigma_z,
            seed: self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64),
            max_range: self.max_range,
            channels: ChannelRequest {
                rgb: self.rgb,
                classes: match self.classes {
                    ClassMode::None => None,
                    ClassMode::OneHot => Some(ClassEncoding::OneHot),
                    ClassMode::Soft => Some(ClassEncoding::Soft { epsilon: self.epsilon }),
                },
                features: self.features,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub map: MapConfig,
    #[serde(default)]
    pub sources: Vec<SourceConfig>,
    #[serde(default)]
    pub plugins: Vec<PluginSpec>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.map.geometry()?;
        if !(self.map.height_variance > 0.0) {
            return Err(Error::InvalidConfig("map.height_variance must be positive".into()));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if self.sources[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::InvalidConfig(format!("duplicate source `{}`", s.name)));
            }
            s.intrinsics()?;
            if !(0.0..1.0).contains(&s.epsilon) {
                return Err(Error::InvalidConfig(format!("source `{}`: epsilon outside [0, 1)", s.name)));
            }
            for f in &s.fusion {
                f.validate()?;
            }
        }
        check_layer_conflicts(self.sources.iter().flat_map(|s| &s.fusion))
    }

    pub fn source(&self, name: &str) -> Result<&SourceConfig> {
        self.sources
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("no source named `{name}`")))
    }
}

/// Parses TOML, reporting syntax and schema errors with a 1-based line.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map_or(1, |span| text[..span.start.min(text.len())].matches('\n').count() + 1);
        Error::Parse {
            line,
            message: e.message().to_owned(),
        }
    })
}

pub fn load_toml<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    parse_toml(&std::fs::read_to_string(path)?)
}

pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let config: RunConfig = load_toml(path)?;
    config.validate()?;
    Ok(config)
}
