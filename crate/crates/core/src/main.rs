use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mmem::bench::{self, BenchConfig};
use mmem::config::{load_run_config, load_toml, SourceKind};
use mmem::fusion::{update_from_cloud, update_from_image};
use mmem::pipeline::{logs_csv, simulate, with_workers};
use mmem::plugins::{run_plugins, PluginRegistry};
use mmem::sensor::Pose;
use mmem::sim::{Scene, SceneSpec};
use mmem::{io, Error, Result};

#[derive(Parser)]
#[command(name = "mmem", version, about = "Multi-modal 2.5D elevation mapping")]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render and fuse simulated sensor data along configured trajectories.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        /// Run config with map, sources, fusion and plugins.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Output directory for map.mmem, steps.csv and manifest.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse one point cloud (MMPC1) or image (MMIM1) file into a map.
    Fuse {
        #[arg(long)]
        config: PathBuf,
        /// Source whose fusion entries are applied.
        #[arg(long)]
        source: String,
        #[arg(long)]
        input: PathBuf,
        /// Existing map; a new one is created from the config when absent.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Sensor pose of a cloud as 12 comma-separated values: rotation
        /// row-major, then translation. Images carry their own pose.
        #[arg(long)]
        pose: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one layer (or an `r,g,b` triplet) as PNG or CSV.
    Export {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time pipeline stages and the layer-count scaling of fusion.
    Bench {
        #[arg(long, default_value_t = bench::MIN_ITERATIONS)]
        iterations: usize,
        #[arg(long, default_value_t = 250)]
        map_cells: usize,
        #[arg(long, default_value_t = 0.04)]
        resolution: f64,
        #[arg(long, default_value_t = 230_400)]
        points: usize,
        /// Layer count of the per-stage breakdown.
        #[arg(long, default_value_t = 8)]
        stage_layers: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,20")]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for stages.csv, sweep.csv and fit.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every plugin of a config on a map once.
    Plugins {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Csv,
}

fn parse_pose(text: &str) -> Result<Pose> {
    let values: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidPose(format!("cannot parse `{text}`")))?;
    let array: [f64; 12] = values
        .try_into()
        .map_err(|_| Error::InvalidPose("expected 12 comma-separated values".into()))?;
    Pose::from_array(array)
}

fn create_dir(path: &Path) -> Result<()> {
    Ok(fs::create_dir_all(path)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            scene,
            config,
            steps,
            out,
        } => {
            let scene = Scene::new(load_toml::<SceneSpec>(&scene)?)?;
            let config = load_run_config(&config)?;
            let (map, logs) = with_workers(cli.workers, || simulate(&scene, &config, steps))??;
            create_dir(&out)?;
            io::write_map(out.join("map.mmem"), &map)?;
            fs::write(out.join("steps.csv"), logs_csv(&logs))?;
            let manifest = format!(
                "map = map.mmem\nsteps = {steps}\nsources = {}\nupdates = {}\nvalid_cells = {}\nlayers = {}\n",
                config.sources.len(),
                logs.len(),
                map.valid_count(),
                map.layer_names().join(","),
            );
            fs::write(out.join("manifest.txt"), manifest)?;
            println!(
                "{} updates, {} valid cells, map written to {}",
                logs.len(),
                map.valid_count(),
                out.join("map.mmem").display()
            );
        }
        Command::Fuse {
            config,
            source,
            input,
            map,
            pose,
            out,
        } => {
            let config = load_run_config(&config)?;
            let source = config.source(&source)?;
            let mut grid = match map {
                Some(path) => io::read_map(path)?,
                None => config.map.create()?,
            };
            let report = with_workers(cli.workers, || match source.kind {
                SourceKind::Cloud => {
                    let cloud = io::read_cloud(&input)?;
                    let pose = pose.as_deref().map(parse_pose).transpose()?.unwrap_or_else(Pose::identity);
                    update_from_cloud(&mut grid, &cloud, &pose, &source.fusion, &config.map.height_params())
                }
                SourceKind::Image => update_from_image(&mut grid, &io::read_image(&input)?, &source.fusion),
            })??;
            io::write_map(&out, &grid)?;
            println!(
                "{} samples, {} dropped, {} cells touched",
                report.samples, report.dropped, report.touched_cells
            );
        }
        Command::Export {
            map,
            layer,
            format,
            out,
        } => {
            let grid = io::read_map(map)?;
            match format {
                Format::Csv => {
                    if layer.contains(',') {
                        return Err(Error::InvalidInput("CSV export takes a single layer".into()));
                    }
                    fs::write(out, io::export_csv(&grid, &layer)?)?;
                }
                Format::Png => io::export_png(&grid, &layer, out)?,
            }
        }
        Command::Bench {
            iterations,
            map_cells,
            resolution,
            points,
            stage_layers,
            layers,
            seed,
            out,
        } => {
            let config = BenchConfig {
                map_cells,
                resolution,
                points,
                iterations,
                seed,
            };
            let (stages, sweep) = with_workers(cli.workers, || -> Result<_> {
                Ok((bench::run_stages(&config, stage_layers)?, bench::layer_sweep(&config, &layers)?))
            })??;
            create_dir(&out)?;
            fs::write(out.join("stages.csv"), bench::stages_csv(&stages))?;
            fs::write(out.join("sweep.csv"), bench::sweep_csv(&sweep))?;
            print!("{}", bench::stages_csv(&stages));
            print!("{}", bench::sweep_csv(&sweep));
            if sweep.len() >= 2 {
                let xs: Vec<f64> = sweep.iter().map(|(n, _)| *n as f64).collect();
                let ys: Vec<f64> = sweep.iter().map(|(_, t)| t.mean_ms).collect();
                let fit = bench::linear_fit(&xs, &ys)?;
                let report = format!(
                    "slope_ms_per_layer = {:.6}\nintercept_ms = {:.6}\nr_squared = {:.6}\n",
                    fit.slope, fit.intercept, fit.r_squared
                );
                fs::write(out.join("fit.txt"), &report)?;
                print!("{report}");
            }
        }
        Command::Plugins { map, config, out } => {
            let config = load_run_config(&config)?;
            let mut grid = io::read_map(map)?;
            with_workers(cli.workers, || {
                run_plugins(&mut grid, &config.plugins, &PluginRegistry::default())
            })??;
            io::write_map(out, &grid)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
