//! Multi-step simulated mapping runs.

use std::time::{Duration, Instant};

use crate::config::{RunConfig, SourceKind};
use crate::error::{Error, Result};
use crate::fusion::{update_from_cloud, update_from_image, UpdateReport};
use crate::grid::GridMap;
use crate::plugins::{PluginRegistry, PluginScheduler};
use crate::sim::{render_depth_cloud, render_image, Scene};

/// One sensor update of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub source: String,
    pub report: UpdateReport,
    pub plugins: Duration,
    pub plugins_run: usize,
}

/// Runs `f` on a pool of `workers` threads; `None` uses the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::InvalidConfig("worker count must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Renders and fuses every source at each of `steps` poses along its
/// trajectory, running periodic plugins after each update.
pub fn simulate(scene: &Scene, config: &RunConfig, steps: usize) -> Result<(GridMap, Vec<StepLog>)> {
    config.validate()?;
    let mut map = config.map.create()?;
    let mut scheduler = PluginScheduler::new(config.plugins.clone(), PluginRegistry::default());
    let height = config.map.height_params();
    let mut logs = Vec::with_capacity(steps * config.sources.len());
    for step in 0..steps {
        for source in &config.sources {
            let pose = source.pose_at(step, steps)?;
            if config.map.follow_robot {
                let t = pose.translation();
                map.recenter([t[0], t[1]]);
            }
            let intr = source.intrinsics()?;
            let options = source.render_options(step);
            let report = match source.kind {
                SourceKind::Cloud => {
                    let cloud = render_depth_cloud(scene, &intr, &pose, &options)?;
                    update_from_cloud(&mut map, &cloud, &pose, &source.fusion, &height)?
                }
                SourceKind::Image => {
                    let image = render_image(scene, &intr, &pose, &options)?;
                    update_from_image(&mut map, &image, &source.fusion)?
                }
            };
            let clock = Instant::now();
            let plugins_run = scheduler.after_update(&mut map)?;
            logs.push(StepLog {
                step,
                source: source.name.clone(),
                report,
                plugins: clock.elapsed(),
                plugins_run,
            });
        }
    }
    Ok((map, logs))
}

/// `step,source,samples,dropped,touched_cells,<stage>_ms...` table.
pub fn logs_csv(logs: &[StepLog]) -> String {
    let mut out = String::from(
        "step,source,samples,dropped,touched_cells,transform_ms,bin_ms,height_update_ms,raycast_ms,multimodal_update_ms,plugins_ms\n",
    );
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    for l in logs {
        let t = &l.report.timings;
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            l.step,
            l.source,
            l.report.samples,
            l.report.dropped,
            l.report.touched_cells,
            ms(t.transform),
            ms(t.bin),
            ms(t.height_update),
            ms(t.raycast),
            ms(t.multimodal_update),
            ms(l.plugins)
        ));
    }
    out
}
