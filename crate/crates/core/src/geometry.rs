//! Pinhole cameras, poses, depth maps and the image-space samplers built on them.
//!
//! Conventions used throughout the crate:
//! - camera frame is x right, y down, z forward;
//! - poses are camera-to-world, `X_world = R · X_cam + t`;
//! - depth is z-depth along the optical axis, never ray length;
//! - integer pixel coordinates address pixel centers.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point and a ~62° horizontal field of view.
    pub fn desk_scale(width: usize, height: usize) -> Self {
        let f = width as f64 * 80.0 / 96.0;
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be non-zero".into()));
        }
        Ok(())
    }

    /// Camera-frame point at z-depth `depth` along the ray through `p`.
    pub fn unproject(&self, p: PixelLocation, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (p.u - self.cx) / self.fx * depth,
            (p.v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Ray direction with unit z component, so the ray parameter is z-depth.
    pub fn ray(&self, p: PixelLocation) -> Vector3<f64> {
        self.unproject(p, 1.0)
    }

    /// `None` for points at or behind the camera plane.
    pub fn project(&self, x: &Vector3<f64>) -> Option<PixelLocation> {
        if x.z <= 0.0 {
            return None;
        }
        Some(PixelLocation {
            u: self.fx * x.x / x.z + self.cx,
            v: self.fy * x.y / x.z + self.cy,
        })
    }

    pub fn contains(&self, p: PixelLocation) -> bool {
        p.u >= 0.0
            && p.v >= 0.0
            && p.u <= (self.width - 1) as f64
            && p.v <= (self.height - 1) as f64
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ROTATION_TOLERANCE: f64 = 1e-6;

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Camera at `eye`, heading `yaw` radians about world +y (down axis),
    /// tilted by `pitch` (positive looks up). Zero yaw looks along world +z.
    pub fn from_yaw_pitch(eye: Vector3<f64>, yaw: f64, pitch: f64) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        // positive pitch rotates forward toward -y (up)
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, sp, 0.0, -sp, cp);
        Self {
            rotation: ry * rx,
            translation: eye,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(orth <= ROTATION_TOLERANCE && (det - 1.0).abs() <= ROTATION_TOLERANCE) {
            return Err(Error::Config(format!(
                "pose rotation is not a proper rotation (orthogonality error {orth:.2e}, det {det:.6})"
            )));
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("pose translation is not finite".into()));
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn transform_vector(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    /// World-space optical axis.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 {
            return Err(Error::Shape(format!(
                "pose needs 16 values, got {}",
                values.len()
            )));
        }
        let m = Matrix4::from_row_slice(values);
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Config(format!(
                "pose bottom row must be [0 0 0 1], got {bottom:?}"
            )));
        }
        Pose::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelLocation {
    pub u: f64,
    pub v: f64,
}

impl PixelLocation {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn pixel(u: usize, v: usize) -> Self {
        Self {
            u: u as f64,
            v: v as f64,
        }
    }
}

/// Per-pixel z-depth in meters with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub values: Grid<f32>,
    pub valid: Mask,
}

impl DepthMap {
    /// Marks every finite, strictly positive value valid.
    pub fn new(values: Grid<f32>) -> Self {
        let valid = values.map(|&d| d.is_finite() && d > 0.0);
        Self { values, valid }
    }

    pub fn constant(width: usize, height: usize, depth: f32) -> Self {
        Self::new(Grid::new(width, height, depth))
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<f32> {
        if *self.valid.get(u, v) {
            Some(*self.values.get(u, v))
        } else {
            None
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.values
            .iter()
            .zip(self.valid.iter())
            .filter_map(|(&d, &ok)| ok.then_some(d))
    }

    /// `(min, max)` over valid pixels.
    pub fn range(&self) -> Option<(f32, f32)> {
        self.valid_values().fold(None, |acc, d| match acc {
            None => Some((d, d)),
            Some((lo, hi)) => Some((lo.min(d), hi.max(d))),
        })
    }

    /// Checks the invariant that every valid value is finite and positive.
    pub fn validate(&self) -> Result<()> {
        if !self.values.same_shape(&self.valid) {
            return Err(Error::Shape("depth values and validity mask differ".into()));
        }
        for (u, v, &ok) in self.valid.indexed() {
            let d = *self.values.get(u, v);
            if ok && !(d.is_finite() && d > 0.0) {
                return Err(Error::Config(format!(
                    "valid depth at ({u}, {v}) is {d}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlaneSpec {
    /// Plane perpendicular to the optical axis at `distance` meters, moving with the camera.
    Frontoparallel { distance: f64 },
    /// Plane fixed in the world, facing `anchor` at `distance` meters along its optical axis.
    FixedInWorld { anchor: Pose, distance: f64 },
}

impl PlaneSpec {
    pub fn distance(&self) -> f64 {
        match *self {
            PlaneSpec::Frontoparallel { distance } => distance,
            PlaneSpec::FixedInWorld { distance, .. } => distance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.distance();
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Config(format!("plane distance must be > 0, got {d}")));
        }
        if let PlaneSpec::FixedInWorld { anchor, .. } = self {
            anchor.validate()?;
        }
        Ok(())
    }
}

/// Location in the previous frame of the surface point seen at `p` with z-depth
/// `depth_at_p` in the current frame. `None` when the point lands at or behind
/// the previous camera.
pub fn warp_location(
    p: PixelLocation,
    depth_at_p: f64,
    pose_t: &Pose,
    pose_prev: &Pose,
    k: &CameraIntrinsics,
) -> Option<PixelLocation> {
    let relative = pose_prev.inverse().compose(pose_t);
    warp_with_relative(p, depth_at_p, &relative, k)
}

/// Same as [`warp_location`] with a precomputed `pose_prev⁻¹ · pose_t`.
pub fn warp_with_relative(
    p: PixelLocation,
    depth_at_p: f64,
    relative: &Pose,
    k: &CameraIntrinsics,
) -> Option<PixelLocation> {
    if !(depth_at_p > 0.0) {
        return None;
    }
    let x = relative.transform_point(&k.unproject(p, depth_at_p));
    k.project(&x)
}

/// Neighbour indices and weights along one axis; `None` if a neighbour with
/// non-zero weight falls outside `0..len`.
#[inline]
fn axis_taps(x: f64, len: usize) -> Option<(usize, usize, f64)> {
    // absorb round-off from unproject/project round trips
    let x = if (x - x.round()).abs() < 1e-9 { x.round() } else { x };
    if !x.is_finite() || x < 0.0 || x > (len - 1) as f64 {
        return None;
    }
    let x0 = x.floor();
    let t = x - x0;
    let i0 = x0 as usize;
    if t == 0.0 {
        Some((i0, i0, 0.0))
    } else {
        Some((i0, i0 + 1, t))
    }
}

/// Bilinear interpolation; returns `oob_sentinel` when any contributing
/// neighbour lies outside the map.
pub fn bilinear_sample(map: &Grid<f32>, p: PixelLocation, oob_sentinel: f32) -> f32 {
    let (Some((u0, u1, tu)), Some((v0, v1, tv))) =
        (axis_taps(p.u, map.width()), axis_taps(p.v, map.height()))
    else {
        return oob_sentinel;
    };
    let (tu, tv) = (tu as f32, tv as f32);
    let top = map.get(u0, v0) * (1.0 - tu) + map.get(u1, v0) * tu;
    let bottom = map.get(u0, v1) * (1.0 - tu) + map.get(u1, v1) * tu;
    top * (1.0 - tv) + bottom * tv
}

/// Like [`bilinear_sample`] but also returns the sentinel when a contributing
/// neighbour is outside `defined`.
pub fn bilinear_sample_masked(
    map: &Grid<f32>,
    defined: &Mask,
    p: PixelLocation,
    oob_sentinel: f32,
) -> f32 {
    let (Some((u0, u1, tu)), Some((v0, v1, tv))) =
        (axis_taps(p.u, map.width()), axis_taps(p.v, map.height()))
    else {
        return oob_sentinel;
    };
    let corners = [
        (u0, v0, (1.0 - tu) * (1.0 - tv)),
        (u1, v0, tu * (1.0 - tv)),
        (u0, v1, (1.0 - tu) * tv),
        (u1, v1, tu * tv),
    ];
    if corners.iter().any(|&(u, v, w)| w > 0.0 && !*defined.get(u, v)) {
        return oob_sentinel;
    }
    bilinear_sample(map, p, oob_sentinel)
}

/// Renders the z-depth of a virtual plane as seen from `pose`. Pixels whose
/// ray misses the plane in front of the camera are invalid.
pub fn render_plane_depth(spec: &PlaneSpec, pose: &Pose, k: &CameraIntrinsics) -> DepthMap {
    match *spec {
        PlaneSpec::Frontoparallel { distance } => {
            DepthMap::constant(k.width, k.height, distance as f32)
        }
        PlaneSpec::FixedInWorld { anchor, distance } => {
            let normal = anchor.forward();
            let point = anchor.center() + normal * distance;
            let origin = pose.center();
            let offset = normal.dot(&(point - origin));
            let values = Grid::from_fn(k.width, k.height, |u, v| {
                let dir = pose.transform_vector(&k.ray(PixelLocation::pixel(u, v)));
                let denom = normal.dot(&dir);
                if denom.abs() < 1e-12 {
                    return f32::NAN;
                }
                let t = offset / denom;
                if t > 0.0 {
                    t as f32
                } else {
                    f32::NAN
                }
            });
            DepthMap::new(values)
        }
    }
}

/// Linear-interpolated percentile of an ascending slice, `q ∈ [0, 1]`.
pub fn percentile_sorted(sorted: &[f32], q: f64) -> Option<f32> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = (pos - lo as f64) as f32;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * t)
}

const SOBEL_X: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f32; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// 3×3 Sobel gradient magnitude. `None` where the full neighbourhood is not
/// valid (including the image border).
pub fn sobel_response(depth: &DepthMap) -> Grid<Option<f32>> {
    let (w, h) = (depth.width(), depth.height());
    Grid::from_fn(w, h, |u, v| {
        if u == 0 || v == 0 || u + 1 >= w || v + 1 >= h {
            return None;
        }
        let mut gx = 0.0;
        let mut gy = 0.0;
        for (dy, (kx_row, ky_row)) in SOBEL_X.iter().zip(SOBEL_Y.iter()).enumerate() {
            for dx in 0..3 {
                let d = depth.get(u + dx - 1, v + dy - 1)?;
                gx += kx_row[dx] * d;
                gy += ky_row[dx] * d;
            }
        }
        Some((gx * gx + gy * gy).sqrt())
    })
}

/// Depth-discontinuity mask: pixels whose Sobel response reaches the
/// per-image `percentile` of all computed responses and is non-zero.
///
/// Ties at the threshold are kept, so a single clean step edge is selected in
/// full; a constant map has no non-zero response and yields an empty mask.
pub fn sobel_edge_mask(depth: &DepthMap, percentile: f64) -> Mask {
    let response = sobel_response(depth);
    let mut values: Vec<f32> = response.iter().flatten().copied().collect();
    values.sort_by(f32::total_cmp);
    let Some(threshold) = percentile_sorted(&values, percentile) else {
        return Grid::new(depth.width(), depth.height(), false);
    };
    response.map(|r| matches!(*r, Some(x) if x > 0.0 && x >= threshold))
}
