//! Per-stage timing harness and layer-count scaling sweep.
//!
//! The workload is a square map and a cloud of uniformly scattered points
//! carrying `n` raw channels, each fused into its own layer with the
//! exponential filter. The image stage uses a downward-tilted camera over
//! the same map with as many pixels as the cloud has points.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::association::visible_cells;
use crate::error::{Error, Result};
use crate::fusion::{update_from_cloud, FusionAlgorithm, FusionConfig, HeightParams};
use crate::grid::{GridMap, MapGeometry};
use crate::plugins::{run_plugins, PluginRegistry, PluginSpec};
use crate::sensor::{CameraIntrinsics, Channel, ChannelSemantics, MultiModalPointCloud, Pose};

pub const STAGES: [&str; 6] = [
    "transform",
    "bin",
    "height_update",
    "raycast",
    "multimodal_update",
    "plugins",
];

pub const MIN_ITERATIONS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Cells per side.
    pub map_cells: usize,
    pub resolution: f64,
    pub points: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            map_cells: 250,
            resolution: 0.04,
            points: 230_400,
            iterations: MIN_ITERATIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub iters: usize,
}

impl StageTiming {
    fn from_samples(stage: &str, samples: &[Duration]) -> Self {
        let ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = if ms.len() > 1 {
            ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            stage: stage.to_owned(),
            mean_ms: mean,
            std_ms: var.sqrt(),
            iters: ms.len(),
        }
    }
}

/// Map, cloud and fusion configs of the workload with `layers` channels.
pub struct Workload {
    pub map: GridMap,
    pub cloud: MultiModalPointCloud,
    pub configs: Vec<FusionConfig>,
    pub camera: (CameraIntrinsics, Pose),
}

impl Workload {
    pub fn new(config: &BenchConfig, layers: usize) -> Result<Self> {
        let geometry = MapGeometry::new(config.resolution, config.map_cells, config.map_cells, [0.0, 0.0])?;
        let names: Vec<String> = (0..layers).map(|k| format!("l{k}")).collect();
        let map = GridMap::new(geometry, &names)?;
        let [ex, ey] = geometry.extent();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let points: Vec<[f32; 3]> = (0..config.points)
            .map(|_| {
                [
                    (rng.random::<f64>() - 0.5) as f32 * ex as f32,
                    (rng.random::<f64>() - 0.5) as f32 * ey as f32,
                    rng.random_range(-0.05..0.05),
                ]
            })
            .collect();
        let channels = names
            .iter()
            .map(|n| {
                let values = (0..config.points).map(|_| rng.random::<f32>()).collect();
                Channel::new(n.clone(), ChannelSemantics::Raw, values)
            })
            .collect();
        let cloud = MultiModalPointCloud::new(points, channels)?;
        let configs = names
            .iter()
            .map(|n| FusionConfig::new([n.as_str()], [n.as_str()], FusionAlgorithm::Exponential { weight: 0.3 }))
            .collect();
        // 4:3 image with about as many pixels as points.
        let w = ((config.points as f64 * 4.0 / 3.0).sqrt().round() as usize).max(1);
        let h = (config.points / w).max(1);
        let f = w as f64 / 2.0;
        let intr = CameraIntrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)?;
        let pose = Pose::look_at([-ex / 2.0, 0.0, 2.0], [ex / 4.0, 0.0, 0.0], [0.0, 0.0, 1.0])?;
        Ok(Self {
            map,
            cloud,
            configs,
            camera: (intr, pose),
        })
    }
}

/// Times every stage over `iterations` messages after one warm-up message.
pub fn run_stages(config: &BenchConfig, layers: usize) -> Result<Vec<StageTiming>> {
    if config.iterations < MIN_ITERATIONS {
        return Err(Error::InvalidConfig(format!(
            "at least {MIN_ITERATIONS} iterations required, got {}",
            config.iterations
        )));
    }
    let mut w = Workload::new(config, layers)?;
    let pose = Pose::identity();
    let height = HeightParams::default();
    let plugins = [PluginSpec::new("normals"), PluginSpec::new("traversability")];
    let registry = PluginRegistry::default();
    let mut samples: Vec<Vec<Duration>> = vec![Vec::with_capacity(config.iterations); STAGES.len()];
    for i in 0..=config.iterations {
        let report = update_from_cloud(&mut w.map, &w.cloud, &pose, &w.configs, &height)?;
        let clock = Instant::now();
        std::hint::black_box(visible_cells(&w.map, &w.camera.0, &w.camera.1)?);
        let raycast = clock.elapsed();
        let clock = Instant::now();
        run_plugins(&mut w.map, &plugins, &registry)?;
        let plugin_time = clock.elapsed();
        if i == 0 {
            continue;
        }
        let t = report.timings;
        for (k, d) in [t.transform, t.bin, t.height_update, raycast, t.multimodal_update, plugin_time]
            .into_iter()
            .enumerate()
        {
            samples[k].push(d);
        }
    }
    Ok(STAGES
        .iter()
        .zip(&samples)
        .map(|(s, d)| StageTiming::from_samples(s, d))
        .collect())
}

/// Times the multimodal update for each layer count.
pub fn layer_sweep(config: &BenchConfig, layer_counts: &[usize]) -> Result<Vec<(usize, StageTiming)>> {
    let mut out = Vec::with_capacity(layer_counts.len());
    for &n in layer_counts {
        if config.iterations < MIN_ITERATIONS {
            return Err(Error::InvalidConfig(format!(
                "at least {MIN_ITERATIONS} iterations required, got {}",
                config.iterations
            )));
        }
        let mut w = Workload::new(config, n)?;
        let pose = Pose::identity();
        let height = HeightParams::default();
        let mut samples = Vec::with_capacity(config.iterations);
        for i in 0..=config.iterations {
            let report = update_from_cloud(&mut w.map, &w.cloud, &pose, &w.configs, &height)?;
            if i > 0 {
                samples.push(report.timings.multimodal_update);
            }
        }
        out.push((n, StageTiming::from_samples("multimodal_update", &samples)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidInput("linear fit needs at least two paired samples".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// `stage,mean_ms,std_ms,iters`.
pub fn stages_csv(timings: &[StageTiming]) -> String {
    let mut out = String::from("stage,mean_ms,std_ms,iters\n");
    for t in timings {
        out.push_str(&format!("{},{:.6},{:.6},{}\n", t.stage, t.mean_ms, t.std_ms, t.iters));
    }
    out
}

/// `layers,mean_ms,std_ms,iters`.
pub fn sweep_csv(sweep: &[(usize, StageTiming)]) -> String {
    let mut out = String::from("layers,mean_ms,std_ms,iters\n");
    for (n, t) in sweep {
        out.push_str(&format!("{n},{:.6},{:.6},{}\n", t.mean_ms, t.std_ms, t.iters));
    }
    out
}
