//! Post-processing plugins over map layers.
//!
//! A plugin is a function from read-only input layers to freshly computed
//! output layers. Outputs are stored as [`LayerKind::PluginOutput`] layers
//! and may be consumed by later plugins in the same run. Cells with
//! `valid = 0` receive NaN in every built-in output.
//!
//! Third-party plugins register a callable with [`PluginRegistry::register`].

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridMap, LayerKind, MapGeometry, ELEVATION, VALID};

/// Read-only view handed to a plugin.
pub struct PluginInput<'a> {
    pub geometry: &'a MapGeometry,
    pub valid: &'a [f32],
    /// Input layers in the order requested by the spec.
    pub layers: Vec<&'a [f32]>,
    pub params: &'a BTreeMap<String, f64>,
}

impl PluginInput<'_> {
    pub fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }
}

/// Returns one value vector per output layer.
pub type PluginFn = dyn Fn(&PluginInput) -> Result<Vec<Vec<f32>>> + Send + Sync;

#[derive(Clone)]
struct Registered {
    func: Arc<PluginFn>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

/// Name to callable table. [`PluginRegistry::default`] holds the built-ins
/// `normals`, `traversability`, `pca` and `semantic_argmax`.
#[derive(Clone)]
pub struct PluginRegistry {
    plugins: BTreeMap<String, Registered>,
}

impl PluginRegistry {
    pub fn empty() -> Self {
        Self {
            plugins: BTreeMap::new(),
        }
    }

    /// Registers `func` under `name` with its default input and output
    /// layer names. Replaces an earlier registration of the same name.
    pub fn register<F>(&mut self, name: &str, default_inputs: &[&str], default_outputs: &[&str], func: F)
    where
        F: Fn(&PluginInput) -> Result<Vec<Vec<f32>>> + Send + Sync + 'static,
    {
        let owned = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        self.plugins.insert(
            name.to_owned(),
            Registered {
                func: Arc::new(func),
                inputs: owned(default_inputs),
                outputs: owned(default_outputs),
            },
        );
    }

    pub fn names(&self) -> Vec<&str> {
        self.plugins.keys().map(String::as_str).collect()
    }

    fn get(&self, name: &str) -> Result<&Registered> {
        self.plugins.get(name).ok_or_else(|| Error::Plugin {
            plugin: name.to_owned(),
            message: format!("not registered; available: {}", self.names().join(", ")),
        })
    }
}

impl Default for PluginRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("normals", &[ELEVATION], &["normal_x", "normal_y", "normal_z"], normals);
        r.register(
            "traversability",
            &["normal_z", ELEVATION],
            &["traversability"],
            traversability,
        );
        r.register("pca", &[], &["pca_0", "pca_1", "pca_2"], pca);
        r.register("semantic_argmax", &[], &["class_id", "confidence"], semantic_argmax);
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginSpec {
    /// Registered plugin to run.
    pub plugin: String,
    /// Input layers; empty selects the plugin's defaults.
    #[serde(default)]
    pub inputs: Vec<String>,
    /// Output layers; empty selects the plugin's defaults.
    #[serde(default)]
    pub outputs: Vec<String>,
    /// Run after every `n`-th map update; `None` runs only on demand.
    #[serde(default)]
    pub every: Option<u32>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl PluginSpec {
    pub fn new(plugin: &str) -> Self {
        Self {
            plugin: plugin.to_owned(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            every: None,
            params: BTreeMap::new(),
        }
    }

    pub fn with_inputs(mut self, inputs: &[&str]) -> Self {
        self.inputs = inputs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_outputs(mut self, outputs: &[&str]) -> Self {
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_owned(), value);
        self
    }

    pub fn every(mut self, n: u32) -> Self {
        self.every = Some(n);
        self
    }
}

/// Runs `specs` in order. Each plugin sees the outputs of earlier ones.
/// Fails before writing anything for the failing plugin; outputs of
/// earlier plugins are kept.
pub fn run_plugins(map: &mut GridMap, specs: &[PluginSpec], registry: &PluginRegistry) -> Result<()> {
    for spec in specs {
        run_one(map, spec, registry)?;
    }
    Ok(())
}

fn run_one(map: &mut GridMap, spec: &PluginSpec, registry: &PluginRegistry) -> Result<()> {
    let plugin = registry.get(&spec.plugin)?;
    let inputs = if spec.inputs.is_empty() { &plugin.inputs } else { &spec.inputs };
    let outputs = if spec.outputs.is_empty() { &plugin.outputs } else { &spec.outputs };
    let fail = |message: String| Error::Plugin {
        plugin: spec.plugin.clone(),
        message,
    };
    if let Some(n) = spec.every {
        if n == 0 {
            return Err(fail("`every` must be at least 1".into()));
        }
    }
    for (i, out) in outputs.iter().enumerate() {
        crate::grid::validate_name(out)?;
        if outputs[..i].contains(out) {
            return Err(fail(format!("output `{out}` listed twice")));
        }
        if inputs.contains(out) {
            return Err(fail(format!("output `{out}` would overwrite an input")));
        }
        if let Some(layer) = map.layer(out) {
            if layer.kind() != LayerKind::PluginOutput {
                return Err(fail(format!(
                    "output `{out}` would overwrite {} layer",
                    layer.kind().as_str()
                )));
            }
        }
    }

    let results = {
        let mut layers = Vec::with_capacity(inputs.len());
        for name in inputs {
            layers.push(map.values(name)?);
        }
        let view = PluginInput {
            geometry: map.geometry(),
            valid: map.values(VALID)?,
            layers,
            params: &spec.params,
        };
        (plugin.func)(&view)?
    };
    let cells = map.geometry().cell_count();
    if results.len() != outputs.len() || results.iter().any(|r| r.len() != cells) {
        return Err(fail(format!(
            "returned {} layers for {} outputs or wrong layer size",
            results.len(),
            outputs.len()
        )));
    }
    for (name, values) in outputs.iter().zip(results) {
        let idx = map.ensure_layer(name, LayerKind::PluginOutput, f32::NAN)?;
        map.layer_at_mut(idx).values_mut().copy_from_slice(&values);
    }
    Ok(())
}

/// Counts map updates and fires periodic plugins.
pub struct PluginScheduler {
    specs: Vec<PluginSpec>,
    registry: PluginRegistry,
    updates: u64,
}

impl PluginScheduler {
    pub fn new(specs: Vec<PluginSpec>, registry: PluginRegistry) -> Self {
        Self {
            specs,
            registry,
            updates: 0,
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Registers one map update and runs the plugins due now, in configured order.
    /// Returns how many ran.
    pub fn after_update(&mut self, map: &mut GridMap) -> Result<usize> {
        self.updates += 1;
        let due: Vec<PluginSpec> = self
            .specs
            .iter()
            .filter(|s| matches!(s.every, Some(n) if n > 0 && self.updates.is_multiple_of(n as u64)))
            .cloned()
            .collect();
        run_plugins(map, &due, &self.registry)?;
        Ok(due.len())
    }

    /// Runs every configured plugin regardless of its trigger.
    pub fn run_all(&self, map: &mut GridMap) -> Result<()> {
        run_plugins(map, &self.specs, &self.registry)
    }
}

fn expect_inputs(name: &str, input: &PluginInput, n: usize) -> Result<()> {
    if input.layers.len() == n {
        Ok(())
    } else {
        Err(Error::Plugin {
            plugin: name.to_owned(),
            message: format!("expects {n} input layers, got {}", input.layers.len()),
        })
    }
}

/// Derivative of `h` along one axis at `(r, c)` in m/m, or `None` when no
/// neighbor on that axis is valid.
fn axis_slope(input: &PluginInput, h: &[f32], r: usize, c: usize, along_rows: bool) -> Option<f64> {
    let g = input.geometry;
    let (n, i) = if along_rows { (g.height_cells, r) } else { (g.width_cells, c) };
    let at = |k: usize| if along_rows { k * g.width_cells + c } else { r * g.width_cells + k };
    let ok = |k: usize| input.valid[at(k)] != 0.0 && h[at(k)].is_finite();
    let prev = (i > 0 && ok(i - 1)).then(|| h[at(i - 1)] as f64);
    let next = (i + 1 < n && ok(i + 1)).then(|| h[at(i + 1)] as f64);
    let here = h[at(i)] as f64;
    let res = g.resolution;
    match (prev, next) {
        (Some(p), Some(q)) => Some((q - p) / (2.0 * res)),
        (None, Some(q)) => Some((q - here) / res),
        (Some(p), None) => Some((here - p) / res),
        (None, None) => None,
    }
}

/// Unit surface normals from elevation gradients. Central differences
/// where both axis neighbors are valid, one-sided otherwise; NaN when an
/// axis has no valid neighbor.
pub fn normals(input: &PluginInput) -> Result<Vec<Vec<f32>>> {
    expect_inputs("normals", input, 1)?;
    let h = input.layers[0];
    let g = input.geometry;
    let n: Vec<[f32; 3]> = (0..g.cell_count())
        .into_par_iter()
        .map(|offset| {
            let (r, c) = (offset / g.width_cells, offset % g.width_cells);
            if input.valid[offset] == 0.0 || !h[offset].is_finite() {
                return [f32::NAN; 3];
            }
            match (axis_slope(input, h, r, c, true), axis_slope(input, h, r, c, false)) {
                (Some(dx), Some(dy)) => {
                    let norm = (dx * dx + dy * dy + 1.0).sqrt();
                    [(-dx / norm) as f32, (-dy / norm) as f32, (1.0 / norm) as f32]
                }
                _ => [f32::NAN; 3],
            }
        })
        .collect();
    Ok((0..3).map(|k| n.iter().map(|v| v[k]).collect()).collect())
}

/// Slope and step traversability in [0, 1] on valid cells.
///
/// `slope_score = (n_z - cos(slope_max)) / (1 - cos(slope_max))`,
/// `step_score = 1 - max|h - h_neighbor| / step_max` over the valid
/// 8-neighborhood; the score is the clamped minimum of both. Cells without
/// a defined normal score 0. Parameters: `slope_max` (rad, default pi/4),
/// `step_max` (m, default 0.2).
pub fn traversability(input: &PluginInput) -> Result<Vec<Vec<f32>>> {
    expect_inputs("traversability", input, 2)?;
    let slope_max = input.param("slope_max", FRAC_PI_4);
    let step_max = input.param("step_max", 0.2);
    if !(slope_max > 0.0 && slope_max < std::f64::consts::FRAC_PI_2) || !(step_max > 0.0) {
        return Err(Error::Plugin {
            plugin: "traversability".into(),
            message: format!("invalid parameters slope_max={slope_max} step_max={step_max}"),
        });
    }
    let cos_max = slope_max.cos();
    let (nz, h) = (input.layers[0], input.layers[1]);
    let g = input.geometry;
    let out = (0..g.cell_count())
        .into_par_iter()
        .map(|offset| {
            if input.valid[offset] == 0.0 {
                return f32::NAN;
            }
            let normal_z = nz[offset] as f64;
            if !normal_z.is_finite() {
                return 0.0;
            }
            let slope_score = (normal_z - cos_max) / (1.0 - cos_max);
            let (r, c) = ((offset / g.width_cells) as i64, (offset % g.width_cells) as i64);
            let mut step = 0.0f64;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if (dr, dc) == (0, 0)
                        || nr < 0
                        || nc < 0
                        || nr >= g.height_cells as i64
                        || nc >= g.width_cells as i64
                    {
                        continue;
                    }
                    let o = nr as usize * g.width_cells + nc as usize;
                    if input.valid[o] != 0.0 {
                        step = step.max((h[o] as f64 - h[offset] as f64).abs());
                    }
                }
            }
            let step_score = 1.0 - step / step_max;
            slope_score.min(step_score).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(vec![out])
}

/// Three leading principal components of the feature vectors of valid
/// cells, each min-max scaled to [0, 1]. Component signs are fixed so the
/// largest-magnitude loading is positive. Components beyond the rank of the
/// data, and constant components, are 0.
pub fn pca(input: &PluginInput) -> Result<Vec<Vec<f32>>> {
    let d = input.layers.len();
    if d < 3 {
        return Err(Error::Plugin {
            plugin: "pca".into(),
            message: format!("needs at least 3 feature layers, got {d}"),
        });
    }
    let cells = input.valid.len();
    let rows: Vec<usize> = (0..cells)
        .filter(|&i| input.valid[i] != 0.0 && input.layers.iter().all(|l| l[i].is_finite()))
        .collect();
    let mut out = vec![vec![f32::NAN; cells]; 3];
    for &i in &rows {
        for o in out.iter_mut() {
            o[i] = 0.0;
        }
    }
    if rows.len() < 2 {
        return Ok(out);
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = input
        .layers
        .iter()
        .map(|l| rows.iter().map(|&i| l[i] as f64).sum::<f64>() / n)
        .collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for &i in &rows {
        for a in 0..d {
            let xa = input.layers[a][i] as f64 - mean[a];
            for b in a..d {
                cov[(a, b)] += xa * (input.layers[b][i] as f64 - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[(a, b)] /= n - 1.0;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (k, &e) in order.iter().take(3).enumerate() {
        if eig.eigenvalues[e] <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            continue;
        }
        let mut axis: Vec<f64> = eig.eigenvectors.column(e).iter().copied().collect();
        let lead = axis
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        let proj: Vec<f64> = rows
            .iter()
            .map(|&i| (0..d).map(|a| (input.layers[a][i] as f64 - mean[a]) * axis[a]).sum())
            .collect();
        let (lo, hi) = proj
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi - lo <= 0.0 {
            continue;
        }
        for (&i, &p) in rows.iter().zip(&proj) {
            out[k][i] = ((p - lo) / (hi - lo)) as f32;
        }
    }
    Ok(out)
}

/// `class_id = argmax_k theta_k` with ties going to the lowest index, and
/// `confidence = max_k theta_k`.
pub fn semantic_argmax(input: &PluginInput) -> Result<Vec<Vec<f32>>> {
    if input.layers.is_empty() {
        return Err(Error::Plugin {
            plugin: "semantic_argmax".into(),
            message: "needs at least one class layer".into(),
        });
    }
    let (ids, conf): (Vec<f32>, Vec<f32>) = (0..input.valid.len())
        .into_par_iter()
        .map(|i| {
            if input.valid[i] == 0.0 {
                return (f32::NAN, f32::NAN);
            }
            let mut best = 0;
            for k in 1..input.layers.len() {
                if input.layers[k][i] > input.layers[best][i] {
                    best = k;
                }
            }
            (best as f32, input.layers[best][i])
        })
        .unzip();
    Ok(vec![ids, conf])
}
