//! Fusion algorithms and map updates.
//!
//! A [`FusionConfig`] binds input channels to map layers and picks one of
//! four algorithms: `latest`, `exponential`, `gaussian` or `dirichlet`.
//! Probabilistic algorithms keep extra state layers next to their targets:
//!
//! | algorithm     | state layer per target | meaning                         |
//! |---------------|------------------------|---------------------------------|
//! | `exponential` | `<layer>__seen`        | 1 once the cell was observed    |
//! | `gaussian`    | `<layer>__var`         | posterior variance, 0 = unseen  |
//! | `dirichlet`   | `<layer>__alpha`       | concentration, 0 = unseen       |
//!
//! The target layers of `gaussian` and `dirichlet` hold the posterior mean
//! and the posterior class probabilities respectively.

pub mod kernels;
mod update;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{validate_name, BASE_LAYERS};

pub use update::{update_from_cloud, update_from_image, StageTimes, UpdateReport};

/// Default measurement variance of simulated depth sensors, m^2.
pub const DEFAULT_HEIGHT_VARIANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "snake_case")]
pub enum FusionAlgorithm {
    /// Keep the within-message average of the latest message.
    Latest,
    /// Exponential moving average with weight `0 < w <= 1` on new data.
    Exponential { weight: f64 },
    /// Conjugate Gaussian update with known measurement variance. Each
    /// parameter holds one value for every dimension or a single value
    /// shared by all.
    Gaussian {
        measurement_variance: Vec<f64>,
        prior_mean: Vec<f64>,
        prior_variance: Vec<f64>,
    },
    /// Dirichlet-categorical update; the channels form one class group.
    Dirichlet { prior_alpha: Vec<f64> },
}

impl FusionAlgorithm {
    pub fn name(&self) -> &'static str {
        match self {
            FusionAlgorithm::Latest => "latest",
            FusionAlgorithm::Exponential { .. } => "exponential",
            FusionAlgorithm::Gaussian { .. } => "gaussian",
            FusionAlgorithm::Dirichlet { .. } => "dirichlet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Input channels, matched positionally with `layers`.
    pub channels: Vec<String>,
    /// Target map layers.
    pub layers: Vec<String>,
    #[serde(flatten)]
    pub algorithm: FusionAlgorithm,
}

/// Value of a per-dimension parameter that may be given once for all.
pub(crate) fn broadcast(values: &[f64], i: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[i]
    }
}

pub(crate) fn seen_layer(name: &str) -> String {
    format!("{name}__seen")
}

pub(crate) fn variance_layer(name: &str) -> String {
    format!("{name}__var")
}

pub(crate) fn alpha_layer(name: &str) -> String {
    format!("{name}__alpha")
}

impl FusionConfig {
    pub fn new(
        channels: impl IntoIterator<Item = impl Into<String>>,
        layers: impl IntoIterator<Item = impl Into<String>>,
        algorithm: FusionAlgorithm,
    ) -> Self {
        Self {
            channels: channels.into_iter().map(Into::into).collect(),
            layers: layers.into_iter().map(Into::into).collect(),
            algorithm,
        }
    }

    /// Same names for channels and layers.
    pub fn identity(names: &[&str], algorithm: FusionAlgorithm) -> Self {
        Self::new(names.iter().copied(), names.iter().copied(), algorithm)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.channels.is_empty() {
            return bad("fusion entry without channels".into());
        }
        if self.channels.len() != self.layers.len() {
            return bad(format!(
                "{} channels mapped onto {} layers",
                self.channels.len(),
                self.layers.len()
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            validate_name(layer)?;
            if BASE_LAYERS.contains(&layer.as_str()) {
                return bad(format!("layer `{layer}` is reserved for geometry"));
            }
            if self.layers[..i].contains(layer) {
                return bad(format!("layer `{layer}` targeted twice in one entry"));
            }
        }
        let d = self.layers.len();
        let check_len = |name: &str, v: &[f64], expected: usize| {
            if v.len() == 1 || v.len() == expected {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "`{name}` needs 1 or {expected} values, got {}",
                    v.len()
                )))
            }
        };
        match &self.algorithm {
            FusionAlgorithm::Latest => {}
            FusionAlgorithm::Exponential { weight } => {
                if !(*weight > 0.0 && *weight <= 1.0) {
                    return bad(format!("exponential weight {weight} outside (0, 1]"));
                }
            }
            FusionAlgorithm::Gaussian {
                measurement_variance,
                prior_mean,
                prior_variance,
            } => {
                check_len("measurement_variance", measurement_variance, d)?;
                check_len("prior_mean", prior_mean, d)?;
                check_len("prior_variance", prior_variance, d)?;
                if measurement_variance
                    .iter()
                    .chain(prior_variance)
                    .any(|v| !(*v > 0.0 && v.is_finite()))
                {
                    return bad("gaussian variances must be positive".into());
                }
                if prior_mean.iter().any(|v| !v.is_finite()) {
                    return bad("gaussian prior mean must be finite".into());
                }
            }
            FusionAlgorithm::Dirichlet { prior_alpha } => {
                check_len("prior_alpha", prior_alpha, d)?;
                if prior_alpha.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                    return bad("dirichlet prior concentrations must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// Rejects configuration sets in which one layer is fused by two
/// different algorithms.
pub fn check_layer_conflicts<'a>(configs: impl IntoIterator<Item = &'a FusionConfig>) -> Result<()> {
    let mut owners: Vec<(&str, &'static str)> = Vec::new();
    for config in configs {
        for layer in &config.layers {
            let algorithm = config.algorithm.name();
            match owners.iter().find(|(l, _)| *l == layer.as_str()) {
                Some((_, other)) if *other != algorithm => {
                    return Err(Error::InvalidConfig(format!(
                        "layer `{layer}` is fused with both `{other}` and `{algorithm}`"
                    )));
                }
                Some(_) => {}
                None => owners.push((layer, algorithm)),
            }
        }
    }
    Ok(())
}

/// Height fusion parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightParams {
    /// Per-point measurement variance sigma_z^2, m^2.
    pub measurement_variance: f64,
}

impl Default for HeightParams {
    fn default() -> Self {
        Self {
            measurement_variance: DEFAULT_HEIGHT_VARIANCE,
        }
    }
}
