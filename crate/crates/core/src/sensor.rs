//! Sensor inputs: poses, the pinhole camera, multi-modal point clouds and
//! images.
//!
//! Camera frames follow the optical convention: `x` right, `y` down, `z`
//! along the viewing direction. Inputs are assumed rectified.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::validate_name;

/// Points at or closer than this along the optical axis are behind the camera.
pub const Z_MIN: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-6;
/// Tolerance for class vectors summing to one.
pub const SIMPLEX_TOL: f64 = 1e-4;
/// Name of the class that absorbs residual top-k probability mass.
pub const OTHER_CLASS: &str = "other";

/// Rigid sensor-to-map transform `p_map = R * p_sensor + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let gram_error = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if gram_error > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (|R^T R - I| = {gram_error:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!("det(R) = {det}, expected +1")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::from(t),
        }
    }

    /// Rotation about the map `z` axis followed by a translation.
    pub fn from_yaw(yaw: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::from(t),
        }
    }

    /// Optical-frame camera pose at `eye` looking at `target`, with image
    /// "up" as close to `up` as possible.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = Vector3::from(target) - eye;
        let up = Vector3::from(up);
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidPose("eye and target coincide".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidPose("up vector is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t[0],
            t[1],
            t[2],
        ]
    }

    pub fn from_array(a: [f64; 12]) -> Result<Self> {
        Self::new(
            Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]),
            Vector3::new(a[9], a[10], a[11]),
        )
    }

    #[inline]
    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::from(p) + self.translation;
        [q[0], q[1], q[2]]
    }

    /// Map frame to sensor frame.
    #[inline]
    pub fn inverse_transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation.transpose() * (Vector3::from(p) - self.translation);
        [q[0], q[1], q[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("image must have pixels".into()));
        }
        if !(self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64)
        {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Nearest integer pixel for continuous image coordinates, if inside the image.
    #[inline]
    pub fn nearest_pixel(&self, uv: [f64; 2]) -> Option<(usize, usize)> {
        let u = uv[0].round();
        let v = uv[1].round();
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }
}

/// Pinhole projection of a camera-frame point; `None` when the point is
/// behind the camera (`z <= Z_MIN`).
#[inline]
pub fn pixel_of_point(intr: &CameraIntrinsics, p_cam: [f64; 3]) -> Option<[f64; 2]> {
    let [x, y, z] = p_cam;
    if !(z > Z_MIN) {
        return None;
    }
    Some([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])
}

/// How a channel's values are to be interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSemantics {
    Raw,
    Probability,
    OneHot,
    Feature,
}

impl ChannelSemantics {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelSemantics::Raw => "raw",
            ChannelSemantics::Probability => "probability",
            ChannelSemantics::OneHot => "one_hot",
            ChannelSemantics::Feature => "feature",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw" => Some(Self::Raw),
            "probability" => Some(Self::Probability),
            "one_hot" => Some(Self::OneHot),
            "feature" => Some(Self::Feature),
            _ => None,
        }
    }

    /// Class-probability channels (soft or one-hot).
    pub fn is_class(self) -> bool {
        matches!(self, Self::Probability | Self::OneHot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub semantics: ChannelSemantics,
    pub values: Vec<f32>,
}

impl Channel {
    pub fn new(name: impl Into<String>, semantics: ChannelSemantics, values: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            semantics,
            values,
        }
    }
}

fn validate_channels(channels: &[Channel], len: usize) -> Result<()> {
    for (i, ch) in channels.iter().enumerate() {
        validate_name(&ch.name)?;
        if channels[..i].iter().any(|c| c.name == ch.name) {
            return Err(Error::InvalidInput(format!("duplicate channel `{}`", ch.name)));
        }
        if ch.values.len() != len {
            return Err(Error::InvalidInput(format!(
                "channel `{}` has {} values, expected {len}",
                ch.name,
                ch.values.len()
            )));
        }
        match ch.semantics {
            ChannelSemantics::Probability => {
                if let Some(v) = ch.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::InvalidInput(format!(
                        "probability channel `{}` holds {v}",
                        ch.name
                    )));
                }
            }
            ChannelSemantics::OneHot => {
                if let Some(v) = ch.values.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidInput(format!(
                        "one-hot channel `{}` holds {v}",
                        ch.name
                    )));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn find_channel<'a>(channels: &'a [Channel], name: &str) -> Result<&'a Channel> {
    channels
        .iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::UnknownChannel {
            name: name.to_owned(),
            available: channels.iter().map(|c| c.name.clone()).collect(),
        })
}

/// Checks that the named channels sum to one (within [`SIMPLEX_TOL`]) and
/// are non-negative at every sample.
pub fn check_class_group(channels: &[&Channel]) -> Result<()> {
    let Some(first) = channels.first() else {
        return Ok(());
    };
    let n = first.values.len();
    let bad = (0..n).into_par_iter().find_first(|&i| {
        let mut sum = 0.0f64;
        for ch in channels {
            let v = ch.values[i];
            if !(v >= 0.0) {
                return true;
            }
            sum += v as f64;
        }
        (sum - 1.0).abs() > SIMPLEX_TOL
    });
    match bad {
        None => Ok(()),
        Some(i) => {
            let values: Vec<f32> = channels.iter().map(|c| c.values[i]).collect();
            let what = if values.iter().any(|v| !(*v >= 0.0)) {
                "negative probability"
            } else {
                "class vector does not sum to 1"
            };
            Err(Error::InvalidInput(format!("{what} at sample {i}: {values:?}")))
        }
    }
}

/// `N` points in the sensor frame with `C` named per-point channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalPointCloud {
    points: Vec<[f32; 3]>,
    channels: Vec<Channel>,
}

impl MultiModalPointCloud {
    pub fn new(points: Vec<[f32; 3]>, channels: Vec<Channel>) -> Result<Self> {
        validate_channels(&channels, points.len())?;
        Ok(Self { points, channels })
    }

    pub fn empty() -> Self {
        Self {
            points: Vec::new(),
            channels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel(&self, name: &str) -> Result<&Channel> {
        find_channel(&self.channels, name)
    }

    /// Declares `names` as a class group and checks the simplex constraint.
    pub fn check_class_group(&self, names: &[&str]) -> Result<()> {
        let group = names
            .iter()
            .map(|n| self.channel(n))
            .collect::<Result<Vec<_>>>()?;
        check_class_group(&group)
    }
}

/// Applies `p' = R p + t` to every point; channels are carried over.
pub fn transform_points(cloud: &MultiModalPointCloud, pose: &Pose) -> MultiModalPointCloud {
    let points = cloud
        .points
        .par_iter()
        .map(|p| {
            let q = pose.transform_point([p[0] as f64, p[1] as f64, p[2] as f64]);
            [q[0] as f32, q[1] as f32, q[2] as f32]
        })
        .collect();
    MultiModalPointCloud {
        points,
        channels: cloud.channels.clone(),
    }
}

/// `H x W` image with named channels, stored row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalImage {
    intrinsics: CameraIntrinsics,
    pose: Pose,
    channels: Vec<Channel>,
}

impl MultiModalImage {
    pub fn new(intrinsics: CameraIntrinsics, pose: Pose, channels: Vec<Channel>) -> Result<Self> {
        intrinsics.validate()?;
        validate_channels(&channels, intrinsics.width * intrinsics.height)?;
        Ok(Self {
            intrinsics,
            pose,
            channels,
        })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel(&self, name: &str) -> Result<&Channel> {
        find_channel(&self.channels, name)
    }

    pub fn check_class_group(&self, names: &[&str]) -> Result<()> {
        let group = names
            .iter()
            .map(|n| self.channel(n))
            .collect::<Result<Vec<_>>>()?;
        check_class_group(&group)
    }

    #[inline]
    pub fn sample(&self, channel: usize, u: usize, v: usize) -> f32 {
        self.channels[channel].values[v * self.intrinsics.width + u]
    }
}

/// Sparse class input: `k` (class id, probability) channel pairs per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKClassChannels {
    pub class_ids: Vec<Vec<f32>>,
    pub probabilities: Vec<Vec<f32>>,
}

impl TopKClassChannels {
    pub fn k(&self) -> usize {
        self.class_ids.len()
    }
}

/// Expands top-k class pairs into `K + 1` dense probability channels named
/// after `vocabulary`, plus [`OTHER_CLASS`] holding the residual mass.
pub fn expand_topk<S: AsRef<str>>(
    topk: &TopKClassChannels,
    vocabulary: &[S],
) -> Result<Vec<Channel>> {
    let k = topk.k();
    if topk.probabilities.len() != k {
        return Err(Error::InvalidInput(format!(
            "{k} class-id channels but {} probability channels",
            topk.probabilities.len()
        )));
    }
    if vocabulary.iter().any(|n| n.as_ref() == OTHER_CLASS) {
        return Err(Error::InvalidInput(format!(
            "`{OTHER_CLASS}` is reserved for residual mass"
        )));
    }
    let n = topk.class_ids.first().map_or(0, Vec::len);
    if topk
        .class_ids
        .iter()
        .chain(&topk.probabilities)
        .any(|c| c.len() != n)
    {
        return Err(Error::InvalidInput("top-k channels differ in length".into()));
    }
    let classes = vocabulary.len();
    let mut dense = vec![vec![0.0f32; n]; classes + 1];
    for i in 0..n {
        let mut mass = 0.0f64;
        for j in 0..k {
            let id = topk.class_ids[j][i];
            let p = topk.probabilities[j][i];
            if id.fract() != 0.0 || id < 0.0 || id >= classes as f32 {
                return Err(Error::InvalidInput(format!(
                    "class id {id} at sample {i} outside vocabulary of {classes}"
                )));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("probability {p} at sample {i}")));
            }
            dense[id as usize][i] += p;
            mass += p as f64;
        }
        if mass > 1.0 + SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!(
                "top-k probabilities sum to {mass} at sample {i}"
            )));
        }
        dense[classes][i] = (1.0 - mass).max(0.0) as f32;
    }
    let names = vocabulary
        .iter()
        .map(|s| s.as_ref().to_owned())
        .chain(std::iter::once(OTHER_CLASS.to_owned()));
    Ok(names
        .zip(dense)
        .map(|(name, values)| Channel::new(name, ChannelSemantics::Probability, values))
        .collect())
}
