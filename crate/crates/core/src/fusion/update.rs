use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::kernels::{self, Gaussian, HeightEstimate};
use super::{
    alpha_layer, broadcast, check_layer_conflicts, seen_layer, variance_layer, FusionAlgorithm,
    FusionConfig, HeightParams,
};
use crate::association::{visible_cells, PointBins};
use crate::error::{Error, Result};
use crate::grid::{GridMap, LayerKind, ELEVATION, VALID, VARIANCE};
use crate::sensor::{transform_points, Channel, MultiModalImage, MultiModalPointCloud, Pose};

/// Wall-clock time per pipeline stage of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub transform: Duration,
    pub bin: Duration,
    pub height_update: Duration,
    pub raycast: Duration,
    pub multimodal_update: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    /// Input samples (points or pixels).
    pub samples: usize,
    /// Points outside the map window or with non-finite coordinates.
    pub dropped: usize,
    pub touched_cells: usize,
    pub timings: StageTimes,
}

/// A validated config with channel and layer names resolved to indices.
struct Bound<'a> {
    config: &'a FusionConfig,
    /// Positions in the source's channel list.
    channels: Vec<usize>,
    targets: Vec<usize>,
    /// State layer per target; empty for `latest`.
    state: Vec<usize>,
}

/// Checks every config against the map and the source before anything is
/// written. Returns the channel position of every config entry.
fn resolve_channels(
    map: &GridMap,
    channels: &[Channel],
    configs: &[FusionConfig],
) -> Result<Vec<Vec<usize>>> {
    check_layer_conflicts(configs)?;
    let mut resolved = Vec::with_capacity(configs.len());
    for config in configs {
        config.validate()?;
        for layer in &config.layers {
            if map.layer_index(layer).is_none() {
                return Err(map.unknown_layer(layer));
            }
        }
        let mut positions = Vec::with_capacity(config.channels.len());
        for name in &config.channels {
            let pos = channels
                .iter()
                .position(|c| &c.name == name)
                .ok_or_else(|| Error::UnknownChannel {
                    name: name.clone(),
                    available: channels.iter().map(|c| c.name.clone()).collect(),
                })?;
            let semantics = channels[pos].semantics;
            if matches!(config.algorithm, FusionAlgorithm::Dirichlet { .. }) && !semantics.is_class() {
                return Err(Error::SemanticsMismatch {
                    algorithm: config.algorithm.name(),
                    channel: name.clone(),
                    semantics: semantics.as_str(),
                });
            }
            positions.push(pos);
        }
        resolved.push(positions);
    }
    Ok(resolved)
}

/// Creates or looks up the state layers of every config. Infallible once
/// `resolve_channels` succeeded.
fn bind<'a>(
    map: &mut GridMap,
    configs: &'a [FusionConfig],
    channels: Vec<Vec<usize>>,
) -> Vec<Bound<'a>> {
    configs
        .iter()
        .zip(channels)
        .map(|(config, channels)| {
            let targets: Vec<usize> = config
                .layers
                .iter()
                .map(|l| map.layer_index(l).expect("resolved"))
                .collect();
            let state = match &config.algorithm {
                FusionAlgorithm::Latest => Vec::new(),
                FusionAlgorithm::Exponential { .. } => config
                    .layers
                    .iter()
                    .map(|l| state_layer(map, &seen_layer(l)).0)
                    .collect(),
                FusionAlgorithm::Gaussian { prior_mean, .. } => config
                    .layers
                    .iter()
                    .zip(&targets)
                    .enumerate()
                    .map(|(k, (l, &target))| {
                        let mu0 = broadcast(prior_mean, k) as f32;
                        let (idx, created) = state_layer(map, &variance_layer(l));
                        seed_prior(map, target, created, mu0);
                        idx
                    })
                    .collect(),
                FusionAlgorithm::Dirichlet { prior_alpha } => {
                    let total: f64 = (0..config.layers.len())
                        .map(|k| broadcast(prior_alpha, k))
                        .sum();
                    config
                        .layers
                        .iter()
                        .zip(&targets)
                        .enumerate()
                        .map(|(k, (l, &target))| {
                            let theta0 = (broadcast(prior_alpha, k) / total) as f32;
                            let (idx, created) = state_layer(map, &alpha_layer(l));
                            seed_prior(map, target, created, theta0);
                            idx
                        })
                        .collect()
                }
            };
            Bound {
                config,
                channels,
                targets,
                state,
            }
        })
        .collect()
}

fn state_layer(map: &mut GridMap, name: &str) -> (usize, bool) {
    match map.layer_index(name) {
        Some(i) => (i, false),
        None => (
            map.add_layer(name, LayerKind::Multimodal, 0.0)
                .expect("state layer names derive from valid layer names"),
            true,
        ),
    }
}

/// Unobserved cells of a probabilistic target report the prior mean.
fn seed_prior(map: &mut GridMap, target: usize, fresh_state: bool, prior: f32) {
    map.set_fill(target, prior);
    if fresh_state {
        map.layer_at_mut(target).values_mut().fill(prior);
    }
}

/// Writes `new[t]` to cell `touched[t]`.
fn scatter(values: &mut [f32], touched: &[u32], new: &[f32]) {
    for (&cell, &v) in touched.iter().zip(new) {
        values[cell as usize] = v;
    }
}

fn gather(values: &[f32], touched: &[u32]) -> Vec<f32> {
    touched.iter().map(|&c| values[c as usize]).collect()
}

/// Applies one bound config given per-channel sums over the touched cells.
fn apply(map: &mut GridMap, bound: &Bound, touched: &[u32], counts: &[u32], sums: &[Vec<f64>]) {
    let mean = |k: usize, t: usize| kernels::cell_average(sums[k][t], counts[t]);
    match &bound.config.algorithm {
        FusionAlgorithm::Latest => {
            for (k, &target) in bound.targets.iter().enumerate() {
                let new: Vec<f32> = (0..touched.len()).map(|t| mean(k, t) as f32).collect();
                scatter(map.layer_at_mut(target).values_mut(), touched, &new);
            }
        }
        FusionAlgorithm::Exponential { weight } => {
            for (k, (&target, &seen)) in bound.targets.iter().zip(&bound.state).enumerate() {
                let prev = gather(map.layer_at(target).values(), touched);
                let flags = gather(map.layer_at(seen).values(), touched);
                let new: Vec<f32> = (0..touched.len())
                    .into_par_iter()
                    .map(|t| {
                        let a = mean(k, t);
                        if flags[t] == 0.0 {
                            a as f32
                        } else {
                            kernels::exponential(prev[t] as f64, a, *weight) as f32
                        }
                    })
                    .collect();
                scatter(map.layer_at_mut(target).values_mut(), touched, &new);
                let seen_values = map.layer_at_mut(seen).values_mut();
                for &c in touched {
                    seen_values[c as usize] = 1.0;
                }
            }
        }
        FusionAlgorithm::Gaussian {
            measurement_variance,
            prior_mean,
            prior_variance,
        } => {
            for (k, (&target, &var)) in bound.targets.iter().zip(&bound.state).enumerate() {
                let (mf, mu0, v0) = (
                    broadcast(measurement_variance, k),
                    broadcast(prior_mean, k),
                    broadcast(prior_variance, k),
                );
                let means = gather(map.layer_at(target).values(), touched);
                let vars = gather(map.layer_at(var).values(), touched);
                let (new_mean, new_var): (Vec<f32>, Vec<f32>) = (0..touched.len())
                    .into_par_iter()
                    .map(|t| {
                        let prior = if vars[t] > 0.0 {
                            Gaussian::new(means[t] as f64, vars[t] as f64)
                        } else {
                            Gaussian::new(mu0, v0)
                        };
                        let post = prior.observe(counts[t], mean(k, t), mf);
                        (post.mean as f32, post.variance as f32)
                    })
                    .unzip();
                scatter(map.layer_at_mut(target).values_mut(), touched, &new_mean);
                scatter(map.layer_at_mut(var).values_mut(), touched, &new_var);
            }
        }
        FusionAlgorithm::Dirichlet { prior_alpha } => {
            let classes = bound.targets.len();
            let alphas: Vec<Vec<f32>> = bound
                .state
                .iter()
                .map(|&s| gather(map.layer_at(s).values(), touched))
                .collect();
            // Cell-major [alpha_0..alpha_K, theta_0..theta_K].
            let updated: Vec<f64> = (0..touched.len())
                .into_par_iter()
                .flat_map_iter(|t| {
                    let fresh = alphas.iter().all(|a| a[t] == 0.0);
                    let mut alpha: Vec<f64> = (0..classes)
                        .map(|k| {
                            if fresh {
                                broadcast(prior_alpha, k)
                            } else {
                                alphas[k][t] as f64
                            }
                        })
                        .collect();
                    let obs: Vec<f64> = (0..classes).map(|k| sums[k][t]).collect();
                    kernels::dirichlet_accumulate(&mut alpha, &obs);
                    let mut theta = vec![0.0; classes];
                    kernels::dirichlet_posterior(&alpha, &mut theta);
                    alpha.extend(theta);
                    alpha
                })
                .collect();
            for k in 0..classes {
                let alpha: Vec<f32> = (0..touched.len())
                    .map(|t| updated[t * 2 * classes + k] as f32)
                    .collect();
                let theta: Vec<f32> = (0..touched.len())
                    .map(|t| updated[t * 2 * classes + classes + k] as f32)
                    .collect();
                scatter(map.layer_at_mut(bound.state[k]).values_mut(), touched, &alpha);
                scatter(map.layer_at_mut(bound.targets[k]).values_mut(), touched, &theta);
            }
        }
    }
}

fn check_class_groups(
    bound: &[Vec<usize>],
    configs: &[FusionConfig],
    channels: &[Channel],
) -> Result<()> {
    for (config, positions) in configs.iter().zip(bound) {
        if matches!(config.algorithm, FusionAlgorithm::Dirichlet { .. }) {
            let group: Vec<&Channel> = positions.iter().map(|&p| &channels[p]).collect();
            crate::sensor::check_class_group(&group)?;
        }
    }
    Ok(())
}

/// Fuses one point cloud given in the sensor frame. The map is untouched
/// when an error is returned.
pub fn update_from_cloud(
    map: &mut GridMap,
    cloud: &MultiModalPointCloud,
    pose: &Pose,
    configs: &[FusionConfig],
    height: &HeightParams,
) -> Result<UpdateReport> {
    if !(height.measurement_variance > 0.0 && height.measurement_variance.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "height measurement variance {} must be positive",
            height.measurement_variance
        )));
    }
    let channels = resolve_channels(map, cloud.channels(), configs)?;
    check_class_groups(&channels, configs, cloud.channels())?;
    let mut report = UpdateReport {
        samples: cloud.len(),
        ..Default::default()
    };
    if cloud.is_empty() {
        return Ok(report);
    }
    let bound = bind(map, configs, channels);

    let clock = Instant::now();
    let moved = transform_points(cloud, pose);
    report.timings.transform = clock.elapsed();

    let clock = Instant::now();
    let bins = PointBins::build(map.geometry(), moved.points());
    let touched = bins.touched();
    let counts = bins.counts();
    report.dropped = bins.dropped();
    report.touched_cells = touched.len();
    report.timings.bin = clock.elapsed();

    let clock = Instant::now();
    update_height(map, &bins, moved.points(), &counts, height.measurement_variance);
    report.timings.height_update = clock.elapsed();

    let clock = Instant::now();
    for b in &bound {
        let sums: Vec<Vec<f64>> = b
            .channels
            .iter()
            .map(|&c| bins.sum(&moved.channels()[c].values))
            .collect();
        apply(map, b, touched, &counts, &sums);
    }
    report.timings.multimodal_update = clock.elapsed();
    Ok(report)
}

fn update_height(
    map: &mut GridMap,
    bins: &PointBins,
    points: &[[f32; 3]],
    counts: &[u32],
    measurement_variance: f64,
) {
    let touched = bins.touched();
    let z_sum = bins.sum_axis(points, 2);
    let elev = map.layer_index(ELEVATION).expect("base layer");
    let var = map.layer_index(VARIANCE).expect("base layer");
    let valid = map.layer_index(VALID).expect("base layer");
    let h = gather(map.layer_at(elev).values(), touched);
    let v = gather(map.layer_at(var).values(), touched);
    let ok = gather(map.layer_at(valid).values(), touched);
    let (new_h, new_v): (Vec<f32>, Vec<f32>) = (0..touched.len())
        .into_par_iter()
        .map(|t| {
            let n = counts[t];
            let z = kernels::cell_average(z_sum[t], n);
            let est = if ok[t] == 0.0 {
                HeightEstimate::first(z, n, measurement_variance)
            } else {
                HeightEstimate {
                    height: h[t] as f64,
                    variance: v[t] as f64,
                }
                .update(z, n, measurement_variance)
            };
            (est.height as f32, est.variance as f32)
        })
        .unzip();
    scatter(map.layer_at_mut(elev).values_mut(), touched, &new_h);
    scatter(map.layer_at_mut(var).values_mut(), touched, &new_v);
    let valid_values = map.layer_at_mut(valid).values_mut();
    for &c in touched {
        valid_values[c as usize] = 1.0;
    }
}

/// Fuses an image into the map by projecting every visible valid cell onto
/// its nearest pixel. Geometry layers are left untouched.
pub fn update_from_image(
    map: &mut GridMap,
    image: &MultiModalImage,
    configs: &[FusionConfig],
) -> Result<UpdateReport> {
    let channels = resolve_channels(map, image.channels(), configs)?;
    let mut report = UpdateReport {
        samples: image.width() * image.height(),
        ..Default::default()
    };

    let clock = Instant::now();
    let cells = visible_cells(map, image.intrinsics(), image.pose())?;
    report.timings.raycast = clock.elapsed();

    let clock = Instant::now();
    let geometry = *map.geometry();
    let touched: Vec<u32> = cells.iter().map(|c| geometry.linear(c.cell) as u32).collect();
    let counts = vec![1u32; touched.len()];
    let sample = |channel: usize| -> Vec<f64> {
        cells
            .iter()
            .map(|c| image.sample(channel, c.pixel.0, c.pixel.1) as f64)
            .collect()
    };
    let sampled: Vec<Vec<Vec<f64>>> = channels
        .iter()
        .map(|positions| positions.iter().map(|&p| sample(p)).collect())
        .collect();
    // Only the sampled pixels enter the map, so only they are checked.
    for (config, sums) in configs.iter().zip(&sampled) {
        if matches!(config.algorithm, FusionAlgorithm::Dirichlet { .. }) {
            check_sampled_simplex(sums, &cells)?;
        }
    }
    report.touched_cells = touched.len();
    let bound = bind(map, configs, channels);
    for (b, sums) in bound.iter().zip(&sampled) {
        apply(map, b, &touched, &counts, sums);
    }
    report.timings.multimodal_update = clock.elapsed();
    Ok(report)
}

fn check_sampled_simplex(
    sums: &[Vec<f64>],
    cells: &[crate::association::CellPixelCorrespondence],
) -> Result<()> {
    for (t, c) in cells.iter().enumerate() {
        let values: Vec<f64> = sums.iter().map(|s| s[t]).collect();
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "negative probability at pixel {:?}: {values:?}",
                c.pixel
            )));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > crate::sensor::SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!(
                "class vector does not sum to 1 at pixel {:?}: {values:?}",
                c.pixel
            )));
        }
    }
    Ok(())
}
