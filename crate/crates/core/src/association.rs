//! Cell/data correspondences.
//!
//! Point clouds are binned by the horizontal coordinate of each point.
//! Images go the other way: each valid cell is projected into the camera
//! and kept only if the ray from the focal point to the cell clears every
//! intermediate cell on its Bresenham line.

use rayon::prelude::*;

use crate::error::Result;
use crate::grid::{CellIndex, GridMap, MapGeometry, ELEVATION, VALID};
use crate::sensor::{pixel_of_point, CameraIntrinsics, MultiModalPointCloud, Pose};

/// An intermediate cell occludes only when it rises this far above the ray.
pub const OCCLUSION_EPS: f64 = 1e-4;

const NO_CELL: u32 = u32::MAX;

/// Points grouped by the cell that contains them.
///
/// Within a cell, points keep their input order, so every per-cell
/// reduction is a fixed-order sum regardless of how many workers run it.
#[derive(Debug, Clone)]
pub struct PointBins {
    touched: Vec<u32>,
    offsets: Vec<u32>,
    order: Vec<u32>,
    dropped: usize,
}

impl PointBins {
    /// Bins map-frame positions. Non-finite and out-of-window points are dropped.
    pub fn build(geometry: &MapGeometry, positions: &[[f32; 3]]) -> Self {
        assert!(
            positions.len() < NO_CELL as usize && geometry.cell_count() < NO_CELL as usize,
            "point cloud or map too large for 32-bit bin indices"
        );
        let cells: Vec<u32> = positions
            .par_iter()
            .map(|p| {
                if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
                    return NO_CELL;
                }
                geometry
                    .cell_index(p[0] as f64, p[1] as f64)
                    .map_or(NO_CELL, |idx| geometry.linear(idx) as u32)
            })
            .collect();

        // Counting sort keyed by cell, stable in point order.
        let mut counts = vec![0u32; geometry.cell_count()];
        let mut dropped = 0;
        for &c in &cells {
            if c == NO_CELL {
                dropped += 1;
            } else {
                counts[c as usize] += 1;
            }
        }
        let mut touched = Vec::new();
        let mut offsets = vec![0u32];
        let mut cursor = vec![0u32; geometry.cell_count()];
        for (cell, &n) in counts.iter().enumerate() {
            if n > 0 {
                cursor[cell] = *offsets.last().unwrap();
                touched.push(cell as u32);
                offsets.push(cursor[cell] + n);
            }
        }
        let mut order = vec![0u32; positions.len() - dropped];
        for (i, &c) in cells.iter().enumerate() {
            if c != NO_CELL {
                let slot = &mut cursor[c as usize];
                order[*slot as usize] = i as u32;
                *slot += 1;
            }
        }
        Self {
            touched,
            offsets,
            order,
            dropped,
        }
    }

    /// Cells holding at least one point, ascending row-major offsets.
    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn binned(&self) -> usize {
        self.order.len()
    }

    /// Point indices of the `t`-th touched cell, in input order.
    pub fn points_of(&self, t: usize) -> &[u32] {
        &self.order[self.offsets[t] as usize..self.offsets[t + 1] as usize]
    }

    pub fn counts(&self) -> Vec<u32> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Per touched cell sum of `values` (one value per input point).
    pub fn sum(&self, values: &[f32]) -> Vec<f64> {
        (0..self.touched.len())
            .into_par_iter()
            .map(|t| self.points_of(t).iter().map(|&i| values[i as usize] as f64).sum())
            .collect()
    }

    /// Per touched cell sum of the `axis` coordinate of `positions`.
    pub fn sum_axis(&self, positions: &[[f32; 3]], axis: usize) -> Vec<f64> {
        (0..self.touched.len())
            .into_par_iter()
            .map(|t| {
                self.points_of(t)
                    .iter()
                    .map(|&i| positions[i as usize][axis] as f64)
                    .sum()
            })
            .collect()
    }
}

/// Per-cell sufficient statistics for one message: observation count and
/// per-channel sums, stored only for touched cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAccumulators {
    touched: Vec<u32>,
    counts: Vec<u32>,
    channels: Vec<String>,
    sums: Vec<Vec<f64>>,
    dropped: usize,
}

impl CellAccumulators {
    pub fn new(
        touched: Vec<u32>,
        counts: Vec<u32>,
        channels: Vec<String>,
        sums: Vec<Vec<f64>>,
        dropped: usize,
    ) -> Self {
        assert_eq!(touched.len(), counts.len());
        assert_eq!(channels.len(), sums.len());
        assert!(sums.iter().all(|s| s.len() == touched.len()));
        debug_assert!(touched.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(counts.iter().all(|&n| n > 0));
        Self {
            touched,
            counts,
            channels,
            sums,
            dropped,
        }
    }

    pub fn touched(&self) -> &[u32] {
        &self.touched
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    pub fn sums(&self, channel: usize) -> &[f64] {
        &self.sums[channel]
    }

    /// Within-message mean of a channel for the `t`-th touched cell.
    pub fn mean(&self, channel: usize, t: usize) -> f64 {
        self.sums[channel][t] / self.counts[t] as f64
    }

    /// Position of `cell` among the touched cells.
    pub fn find(&self, cell: usize) -> Option<usize> {
        self.touched.binary_search(&(cell as u32)).ok()
    }
}

/// Bins a map-frame cloud and accumulates every channel.
pub fn bin_points(geometry: &MapGeometry, cloud: &MultiModalPointCloud) -> CellAccumulators {
    let bins = PointBins::build(geometry, cloud.points());
    accumulate(&bins, cloud, cloud.channels().iter().map(|c| c.name.as_str()))
        .expect("channel names come from the cloud")
}

/// Channel sums for an existing binning.
pub fn accumulate<'a>(
    bins: &PointBins,
    cloud: &MultiModalPointCloud,
    channels: impl IntoIterator<Item = &'a str>,
) -> Result<CellAccumulators> {
    let mut names = Vec::new();
    let mut sums = Vec::new();
    for name in channels {
        let ch = cloud.channel(name)?;
        names.push(name.to_owned());
        sums.push(bins.sum(&ch.values));
    }
    Ok(CellAccumulators::new(
        bins.touched.clone(),
        bins.counts(),
        names,
        sums,
        bins.dropped,
    ))
}

/// Walks the 8-connected Bresenham line from `a` to `b`, both inclusive,
/// stopping early when `visit` returns `false`.
///
/// The line is always rasterized from the lexicographically smaller
/// endpoint, stepping one cell along the major axis (rows on ties) and
/// rounding the minor coordinate half-up in that direction. Swapping the
/// endpoints therefore yields the same cells in reverse order. With
/// `ordered == false` cells are always visited from the smaller endpoint,
/// which skips buffering when the visit order does not matter.
fn walk_line(
    a: (i64, i64),
    b: (i64, i64),
    ordered: bool,
    mut visit: impl FnMut(i64, i64) -> bool,
) -> bool {
    let reversed = b < a;
    let (start, end) = if reversed { (b, a) } else { (a, b) };
    let d_row = end.0 - start.0;
    let d_col = end.1 - start.1;
    let rows_major = d_row.abs() >= d_col.abs();
    let (n, d_minor) = if rows_major {
        (d_row.abs(), d_col)
    } else {
        (d_col.abs(), d_row)
    };
    let major_step = if rows_major {
        d_row.signum()
    } else {
        d_col.signum()
    };
    let minor_step = d_minor.signum();
    let d_minor = d_minor.abs();

    let cell_at = |i: i64, minor: i64| {
        if rows_major {
            (start.0 + major_step * i, start.1 + minor_step * minor)
        } else {
            (start.0 + minor_step * minor, start.1 + major_step * i)
        }
    };

    if reversed && ordered {
        // Replay forward into a buffer so the tie-break does not depend on
        // the call direction.
        let mut cells = Vec::with_capacity(n as usize + 1);
        forward_steps(n, d_minor, |i, m| cells.push(cell_at(i, m)));
        cells.into_iter().rev().all(|(r, c)| visit(r, c))
    } else {
        let mut keep_going = true;
        forward_steps(n, d_minor, |i, m| {
            if keep_going {
                let (r, c) = cell_at(i, m);
                keep_going = visit(r, c);
            }
        });
        keep_going
    }
}

/// Emits `(i, minor)` for `i = 0..=n` with
/// `minor = floor((2 i d_minor + n) / (2 n))`, incrementally.
fn forward_steps(n: i64, d_minor: i64, mut emit: impl FnMut(i64, i64)) {
    if n == 0 {
        emit(0, 0);
        return;
    }
    let mut minor = 0;
    // Numerator minus 2n * minor, kept in [0, 2n).
    let mut err = n;
    for i in 0..=n {
        emit(i, minor);
        err += 2 * d_minor;
        if err >= 2 * n {
            minor += 1;
            err -= 2 * n;
        }
    }
}

/// Cells strictly between `a` and `b` on their Bresenham line.
pub fn bresenham_cells(a: CellIndex, b: CellIndex) -> Vec<CellIndex> {
    let a = (a.row as i64, a.col as i64);
    let b = (b.row as i64, b.col as i64);
    let mut out = Vec::new();
    walk_line(a, b, true, |r, c| {
        if (r, c) != a && (r, c) != b {
            out.push(CellIndex::new(r as usize, c as usize));
        }
        true
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellPixelCorrespondence {
    pub cell: CellIndex,
    /// `(u, v)` nearest pixel.
    pub pixel: (usize, usize),
    /// The cell is not occluded from the camera.
    pub ray_ok: bool,
}

/// Every valid cell inside the camera frustum, with its nearest pixel and
/// the outcome of the occlusion test. Row-major order.
pub fn frustum_cells(
    map: &GridMap,
    intr: &CameraIntrinsics,
    pose: &Pose,
) -> Result<Vec<CellPixelCorrespondence>> {
    let elevation = map.values(ELEVATION)?;
    let valid = map.values(VALID)?;
    let geometry = *map.geometry();
    let camera = pose.translation();
    let camera = [camera[0], camera[1], camera[2]];
    let origin = RayOrigin::new(&geometry, camera);

    let out = (0..geometry.cell_count())
        .into_par_iter()
        .filter_map(|offset| {
            if valid[offset] == 0.0 {
                return None;
            }
            let cell = geometry.unlinear(offset);
            let [x, y] = geometry.cell_center_unchecked(cell);
            let z = elevation[offset] as f64;
            let uv = pixel_of_point(intr, pose.inverse_transform_point([x, y, z]))?;
            let pixel = intr.nearest_pixel(uv)?;
            let ray_ok = origin.clear_to(&geometry, elevation, valid, cell, z);
            Some(CellPixelCorrespondence {
                cell,
                pixel,
                ray_ok,
            })
        })
        .collect();
    Ok(out)
}

/// Valid cells that the camera sees unoccluded, row-major.
pub fn visible_cells(
    map: &GridMap,
    intr: &CameraIntrinsics,
    pose: &Pose,
) -> Result<Vec<CellPixelCorrespondence>> {
    let mut cells = frustum_cells(map, intr, pose)?;
    cells.retain(|c| c.ray_ok);
    Ok(cells)
}

/// Camera position in map and cell coordinates.
struct RayOrigin {
    camera: [f64; 3],
    /// Continuous `(row, col)` of the camera.
    continuous: (f64, f64),
    /// Footprint cell when the camera is above the map.
    footprint: Option<(i64, i64)>,
}

impl RayOrigin {
    fn new(geometry: &MapGeometry, camera: [f64; 3]) -> Self {
        Self {
            camera,
            continuous: geometry.continuous_index(camera[0], camera[1]),
            footprint: geometry
                .cell_index(camera[0], camera[1])
                .map(|c| (c.row as i64, c.col as i64)),
        }
    }

    /// First cell of the ray inside the map and whether that cell must be
    /// checked itself (it is, unless it is the camera's own footprint).
    fn start(&self, geometry: &MapGeometry, target: (i64, i64)) -> Option<((i64, i64), bool)> {
        if let Some(cell) = self.footprint {
            return Some((cell, false));
        }
        let rows = geometry.height_cells as f64;
        let cols = geometry.width_cells as f64;
        let (r0, c0) = self.continuous;
        let (r1, c1) = (target.0 as f64 + 0.5, target.1 as f64 + 0.5);
        let (dr, dc) = (r1 - r0, c1 - c0);
        // Liang-Barsky entry parameter against [0, rows] x [0, cols].
        let mut enter = 0.0f64;
        let mut exit = 1.0f64;
        for (p, q) in [(-dr, r0), (dr, rows - r0), (-dc, c0), (dc, cols - c0)] {
            if p == 0.0 {
                if q < 0.0 {
                    return None;
                }
            } else {
                let s = q / p;
                if p < 0.0 {
                    enter = enter.max(s);
                } else {
                    exit = exit.min(s);
                }
            }
        }
        if enter > exit {
            return None;
        }
        let row = (r0 + enter * dr).floor().clamp(0.0, rows - 1.0) as i64;
        let col = (c0 + enter * dc).floor().clamp(0.0, cols - 1.0) as i64;
        Some(((row, col), true))
    }

    /// True when no intermediate cell rises above the ray to `target`.
    fn clear_to(
        &self,
        geometry: &MapGeometry,
        elevation: &[f32],
        valid: &[f32],
        target: CellIndex,
        target_z: f64,
    ) -> bool {
        let t = (target.row as i64, target.col as i64);
        let Some((start, check_start)) = self.start(geometry, t) else {
            return true;
        };
        if start == t {
            return true;
        }
        let [cam_x, cam_y, cam_z] = self.camera;
        let [tx, ty] = geometry.cell_center_unchecked(target);
        let (dx, dy) = (tx - cam_x, ty - cam_y);
        let len2 = dx * dx + dy * dy;
        walk_line(start, t, false, |r, c| {
            if (r, c) == t || ((r, c) == start && !check_start) {
                return true;
            }
            let cell = CellIndex::new(r as usize, c as usize);
            let offset = geometry.linear(cell);
            if valid[offset] == 0.0 {
                // Unknown terrain never occludes.
                return true;
            }
            let [mx, my] = geometry.cell_center_unchecked(cell);
            let s = if len2 > 0.0 {
                (((mx - cam_x) * dx + (my - cam_y) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let ray_z = cam_z + s * (target_z - cam_z);
            (elevation[offset] as f64) <= ray_z + OCCLUSION_EPS
        })
    }
}
