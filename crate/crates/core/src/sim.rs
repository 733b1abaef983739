//! Analytic 2.5D scenes and simulated depth and image sensors.
//!
//! A scene is a ground surface, optionally undulated, with primitives
//! stamped on top. Primitive heights are relative to the ground under them
//! and later primitives override earlier ones. Every point of the plane has
//! exactly one class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensor::{
    CameraIntrinsics, Channel, ChannelSemantics, MultiModalImage, MultiModalPointCloud, Pose,
};

/// Ray-march step, m.
pub const MARCH_STEP: f64 = 0.01;
const BISECTIONS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// RGB in [0, 1].
    pub color: [f32; 3],
    /// Mean feature vector; drawn from the scene seed when absent.
    #[serde(default)]
    pub feature: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Flat patch `height` above the ground.
    Plane { min: [f64; 2], max: [f64; 2], height: f64, class: String },
    /// Axis-aligned block `height` above the ground.
    Box { min: [f64; 2], max: [f64; 2], height: f64, class: String },
    /// Linear incline along `axis` (`"x"` or `"y"`), from `start_height` at
    /// the lower bound to `end_height` at the upper bound.
    Ramp {
        min: [f64; 2],
        max: [f64; 2],
        axis: String,
        start_height: f64,
        end_height: f64,
        class: String,
    },
    /// Segment `from`-`to` thickened to `thickness`.
    Wall { from: [f64; 2], to: [f64; 2], thickness: f64, height: f64, class: String },
}

impl Primitive {
    fn class(&self) -> &str {
        match self {
            Primitive::Plane { class, .. }
            | Primitive::Box { class, .. }
            | Primitive::Ramp { class, .. }
            | Primitive::Wall { class, .. } => class,
        }
    }

    /// Height above ground at `(x, y)` when the point lies on the primitive.
    fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        let inside = |min: &[f64; 2], max: &[f64; 2]| x >= min[0] && x < max[0] && y >= min[1] && y < max[1];
        match self {
            Primitive::Plane { min, max, height, .. } | Primitive::Box { min, max, height, .. } => {
                inside(min, max).then_some(*height)
            }
            Primitive::Ramp {
                min,
                max,
                axis,
                start_height,
                end_height,
                ..
            } => inside(min, max).then(|| {
                let (v, lo, hi) = if axis == "x" { (x, min[0], max[0]) } else { (y, min[1], max[1]) };
                start_height + (end_height - start_height) * (v - lo) / (hi - lo)
            }),
            Primitive::Wall {
                from,
                to,
                thickness,
                height,
                ..
            } => {
                let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
                let len2 = dx * dx + dy * dy;
                let s = if len2 > 0.0 {
                    (((x - from[0]) * dx + (y - from[1]) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (from[0] + s * dx - x, from[1] + s * dy - y);
                ((px * px + py * py).sqrt() <= thickness / 2.0).then_some(*height)
            }
        }
    }

    fn max_height(&self) -> f64 {
        match self {
            Primitive::Plane { height, .. } | Primitive::Box { height, .. } | Primitive::Wall { height, .. } => {
                *height
            }
            Primitive::Ramp {
                start_height,
                end_height,
                ..
            } => start_height.max(*end_height),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Primitive::Plane { min, max, height, .. } | Primitive::Box { min, max, height, .. } => {
                if !(finite(min) && finite(max) && height.is_finite()) || min[0] >= max[0] || min[1] >= max[1] {
                    return bad(format!("degenerate or non-finite primitive {self:?}"));
                }
            }
            Primitive::Ramp {
                min,
                max,
                axis,
                start_height,
                end_height,
                ..
            } => {
                if axis != "x" && axis != "y" {
                    return bad(format!("ramp axis must be \"x\" or \"y\", got {axis:?}"));
                }
                if !(finite(min) && finite(max) && start_height.is_finite() && end_height.is_finite())
                    || min[0] >= max[0]
                    || min[1] >= max[1]
                {
                    return bad(format!("degenerate or non-finite ramp {self:?}"));
                }
            }
            Primitive::Wall {
                from,
                to,
                thickness,
                height,
                ..
            } => {
                if !(finite(from) && finite(to) && height.is_finite()) || !(*thickness > 0.0) {
                    return bad(format!("degenerate or non-finite wall {self:?}"));
                }
            }
        }
        Ok(())
    }
}

fn default_wavelength() -> f64 {
    1.0
}

/// Serializable scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub classes: Vec<ClassSpec>,
    pub ground_class: String,
    #[serde(default)]
    pub ground_height: f64,
    /// Ground undulation `a sin(2 pi x / l) sin(2 pi y / l)`.
    #[serde(default)]
    pub undulation_amplitude: f64,
    #[serde(default = "default_wavelength")]
    pub undulation_wavelength: f64,
    /// Length of generated class features when none are given.
    #[serde(default)]
    pub feature_dim: usize,
    /// Per-sample Gaussian noise on features.
    #[serde(default)]
    pub feature_noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub primitives: Vec<Primitive>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    spec: SceneSpec,
    ground_class: usize,
    primitive_classes: Vec<usize>,
    features: Vec<Vec<f32>>,
    z_max: f64,
}

impl Scene {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        if spec.classes.is_empty() {
            return Err(Error::InvalidInput("scene without classes".into()));
        }
        for (i, c) in spec.classes.iter().enumerate() {
            crate::grid::validate_name(&c.name)?;
            if spec.classes[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::InvalidInput(format!("duplicate class `{}`", c.name)));
            }
        }
        let class_index = |name: &str| {
            spec.classes
                .iter()
                .position(|c| c.name == name)
                .ok_or_else(|| Error::InvalidInput(format!("unknown class `{name}`")))
        };
        let ground_class = class_index(&spec.ground_class)?;
        let mut primitive_classes = Vec::with_capacity(spec.primitives.len());
        for p in &spec.primitives {
            p.validate()?;
            primitive_classes.push(class_index(p.class())?);
        }
        if !(spec.ground_height.is_finite()
            && spec.undulation_amplitude.is_finite()
            && spec.undulation_wavelength > 0.0
            && spec.feature_noise >= 0.0)
        {
            return Err(Error::InvalidInput("invalid ground or noise parameters".into()));
        }

        let dim = spec
            .classes
            .iter()
            .find_map(|c| c.feature.as_ref().map(Vec::len))
            .unwrap_or(spec.feature_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut features = Vec::with_capacity(spec.classes.len());
        for c in &spec.classes {
            let f = match &c.feature {
                Some(f) if f.len() == dim => f.clone(),
                Some(f) => {
                    return Err(Error::InvalidInput(format!(
                        "class `{}` has {} features, expected {dim}",
                        c.name,
                        f.len()
                    )))
                }
                None => (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            features.push(f);
        }

        let amp = spec.undulation_amplitude.abs();
        let hi = spec.primitives.iter().map(Primitive::max_height).fold(0.0f64, f64::max);
        Ok(Self {
            z_max: spec.ground_height + amp + hi,
            ground_class,
            primitive_classes,
            features,
            spec,
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn class_count(&self) -> usize {
        self.spec.classes.len()
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.spec.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn ground_at(&self, x: f64, y: f64) -> f64 {
        let s = &self.spec;
        let k = 2.0 * std::f64::consts::PI / s.undulation_wavelength;
        s.ground_height + s.undulation_amplitude * (k * x).sin() * (k * y).sin()
    }

    /// Surface height and class at `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> (f64, usize) {
        let ground = self.ground_at(x, y);
        for (p, &class) in self.spec.primitives.iter().zip(&self.primitive_classes).rev() {
            if let Some(h) = p.height_at(x, y) {
                return (ground + h, class);
            }
        }
        (ground, self.ground_class)
    }

    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        self.sample(x, y).0
    }

    pub fn class_at(&self, x: f64, y: f64) -> usize {
        self.sample(x, y).1
    }

    /// First intersection of the ray `origin + t dir` (unit `dir`, `t` up to
    /// `max_range`) with the surface.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3], max_range: f64) -> Option<[f64; 3]> {
        let at = |t: f64| [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
        let below = |t: f64| {
            let p = at(t);
            p[2] <= self.height_at(p[0], p[1])
        };
        // Skip the empty slab above the highest surface point.
        let mut t = 0.0;
        if origin[2] > self.z_max {
            if dir[2] >= 0.0 {
                return None;
            }
            t = (self.z_max - origin[2]) / dir[2];
        }
        if below(t) {
            return Some(at(t));
        }
        loop {
            let next = t + MARCH_STEP;
            if next > max_range {
                return None;
            }
            let p = at(next);
            if below(next) {
                let (mut lo, mut hi) = (t, next);
                for _ in 0..BISECTIONS {
                    let mid = 0.5 * (lo + hi);
                    if below(mid) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Some(at(hi));
            }
            if p[2] > self.z_max && dir[2] >= 0.0 {
                return None;
            }
            t = next;
        }
    }
}

/// How class channels are encoded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassEncoding {
    /// Tagged `one_hot`; exact labels.
    OneHot,
    /// Tagged `probability`; the true class gets `1 - epsilon`, the others
    /// share `epsilon` equally.
    Soft { epsilon: f64 },
}

/// Channels attached to simulated samples: `r`, `g`, `b` (raw),
/// `class_<name>` and `feat_<i>` (feature).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChannelRequest {
    pub rgb: bool,
    pub classes: Option<ClassEncoding>,
    pub features: bool,
}

impl ChannelRequest {
    pub fn is_empty(&self) -> bool {
        !self.rgb && self.classes.is_none() && !self.features
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Standard deviation of Gaussian noise on point heights, m.
    pub noise_sigma_z: f64,
    pub seed: u64,
    pub max_range: f64,
    pub channels: ChannelRequest,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            noise_sigma_z: 0.0,
            seed: 0,
            max_range: 30.0,
            channels: ChannelRequest::default(),
        }
    }
}

/// Map-frame viewing ray through the center of pixel `(u, v)`.
fn pixel_ray(intr: &CameraIntrinsics, pose: &Pose, u: usize, v: usize) -> [f64; 3] {
    let d = nalgebra::Vector3::new((u as f64 - intr.cx) / intr.fx, (v as f64 - intr.cy) / intr.fy, 1.0);
    let w = (pose.rotation() * d).normalize();
    [w[0], w[1], w[2]]
}

/// Intersection per pixel, row-major.
fn cast(scene: &Scene, intr: &CameraIntrinsics, pose: &Pose, max_range: f64) -> Vec<Option<([f64; 3], usize)>> {
    let t = pose.translation();
    let origin = [t[0], t[1], t[2]];
    (0..intr.width * intr.height)
        .into_par_iter()
        .map(|i| {
            let dir = pixel_ray(intr, pose, i % intr.width, i / intr.width);
            scene
                .intersect(origin, dir, max_range)
                .map(|p| (p, scene.class_at(p[0], p[1])))
        })
        .collect()
}

/// Builds the requested channels for labelled samples. `None` marks a miss.
fn build_channels(
    scene: &Scene,
    labels: &[Option<usize>],
    request: &ChannelRequest,
    feature_noise: &[f32],
) -> Vec<Channel> {
    let mut out = Vec::new();
    let n = labels.len();
    if request.rgb {
        for (k, name) in ["r", "g", "b"].iter().enumerate() {
            let values = labels
                .iter()
                .map(|l| l.map_or(0.0, |c| scene.spec.classes[c].color[k]))
                .collect();
            out.push(Channel::new(*name, ChannelSemantics::Raw, values));
        }
    }
    if let Some(encoding) = request.classes {
        let classes = scene.class_count();
        let (semantics, hit, miss) = match encoding {
            ClassEncoding::OneHot => (ChannelSemantics::OneHot, 1.0, 0.0),
            ClassEncoding::Soft { epsilon } => {
                let other = if classes > 1 { epsilon / (classes - 1) as f64 } else { 0.0 };
                (ChannelSemantics::Probability, 1.0 - epsilon, other)
            }
        };
        let uniform = 1.0 / classes as f64;
        for (k, class) in scene.spec.classes.iter().enumerate() {
            let values = labels
                .iter()
                .map(|l| match l {
                    Some(c) if *c == k => hit as f32,
                    Some(_) => miss as f32,
                    // Misses carry no information; keep the class simplex.
                    None => uniform as f32,
                })
                .collect();
            // Uniform fill breaks one-hot tagging; misses never reach one-hot
            // point clouds, and images tag class channels as probabilities.
            let semantics = if labels.iter().any(Option::is_none) {
                ChannelSemantics::Probability
            } else {
                semantics
            };
            out.push(Channel::new(format!("class_{}", class.name), semantics, values));
        }
    }
    if request.features {
        let dim = scene.feature_dim();
        for j in 0..dim {
            let values = (0..n)
                .map(|i| labels[i].map_or(0.0, |c| scene.features[c][j] + feature_noise[i * dim + j]))
                .collect();
            out.push(Channel::new(format!("feat_{j}"), ChannelSemantics::Feature, values));
        }
    }
    out
}

fn feature_noise(scene: &Scene, rng: &mut ChaCha8Rng, samples: usize, enabled: bool) -> Vec<f32> {
    let dim = scene.feature_dim();
    if !enabled || scene.spec.feature_noise == 0.0 {
        return vec![0.0; samples * dim];
    }
    let normal = Normal::new(0.0, scene.spec.feature_noise).expect("validated noise");
    (0..samples * dim).map(|_| normal.sample(rng) as f32).collect()
}

/// Simulated depth camera. Points are returned in the sensor frame of
/// `pose`; pixels whose ray misses the surface produce no point.
pub fn render_depth_cloud(
    scene: &Scene,
    intr: &CameraIntrinsics,
    pose: &Pose,
    options: &RenderOptions,
) -> Result<MultiModalPointCloud> {
    intr.validate()?;
    if !(options.noise_sigma_z >= 0.0 && options.max_range > 0.0) {
        return Err(Error::InvalidInput("negative noise or non-positive range".into()));
    }
    let hits = cast(scene, intr, pose, options.max_range);

    // Noise is drawn serially in pixel order so it does not depend on the
    // number of workers.
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let normal = Normal::new(0.0, options.noise_sigma_z.max(f64::MIN_POSITIVE)).expect("non-negative");
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for hit in &hits {
        let dz = if options.noise_sigma_z > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        if let Some((p, class)) = hit {
            let q = pose.inverse_transform_point([p[0], p[1], p[2] + dz]);
            points.push([q[0] as f32, q[1] as f32, q[2] as f32]);
            labels.push(Some(*class));
        }
    }
    let noise = feature_noise(scene, &mut rng, labels.len(), options.channels.features);
    let channels = build_channels(scene, &labels, &options.channels, &noise);
    MultiModalPointCloud::new(points, channels)
}

/// Simulated multi-channel camera. Pixels whose ray misses the surface get
/// zeros, or a uniform distribution on class channels.
pub fn render_image(
    scene: &Scene,
    intr: &CameraIntrinsics,
    pose: &Pose,
    options: &RenderOptions,
) -> Result<MultiModalImage> {
    intr.validate()?;
    if options.channels.is_empty() {
        return Err(Error::InvalidInput("empty channel set requested".into()));
    }
    let hits = cast(scene, intr, pose, options.max_range);
    let labels: Vec<Option<usize>> = hits.iter().map(|h| h.map(|(_, c)| c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let noise = feature_noise(scene, &mut rng, labels.len(), options.channels.features);
    let channels = build_channels(scene, &labels, &options.channels, &noise);
    MultiModalImage::new(*intr, *pose, channels)
}
