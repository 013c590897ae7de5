//! Procedural indoor scenes: a box-shaped room with cuboid and sphere
//! furniture, ray cast into RGB-D frames along smooth camera trajectories.
//!
//! World frame has +y pointing down (matching the camera frame); the floor is
//! the plane `y = 0` and the ceiling sits at `y = -height`.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, PixelLocation, Pose};
use crate::grid::{Grid, RgbImage};
use crate::io;

/// Direction towards the light, world frame.
const LIGHT_DIRECTION: [f64; 3] = [0.35, -0.8, -0.45];
pub const SHADING_NOISE: f32 = 0.02;
/// Minimum distance kept between the camera center and any surface.
const CAMERA_CLEARANCE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Room {
    pub fn contains(&self, x: &Vector3<f64>, margin: f64) -> bool {
        (0..3).all(|i| x[i] > self.min[i] + margin && x[i] < self.max[i] - margin)
    }

    /// Distance from an interior point to the nearest wall.
    fn interior_distance(&self, x: &Vector3<f64>) -> f64 {
        (0..3)
            .map(|i| (x[i] - self.min[i]).min(self.max[i] - x[i]))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Box rotated by `yaw` about the vertical axis.
    Cuboid { half_extents: [f64; 3], yaw: f64 },
    Sphere { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub center: [f64; 3],
    pub albedo: [f32; 3],
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    normal: Vector3<f64>,
    albedo: [f32; 3],
}

fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

impl Primitive {
    fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    /// Nearest intersection with `t > 0` along `origin + t · dir`.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let c = self.center();
        match &self.shape {
            Shape::Sphere { radius } => {
                let oc = origin - c;
                let a = dir.dot(dir);
                let b = oc.dot(dir);
                let disc = b * b - a * (oc.dot(&oc) - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / a;
                let t1 = (-b + sq) / a;
                let t = if t0 > 1e-9 {
                    t0
                } else if t1 > 1e-9 {
                    t1
                } else {
                    return None;
                };
                Some((t, (origin + dir * t - c) / *radius))
            }
            Shape::Cuboid { half_extents, yaw } => {
                let rot = yaw_matrix(*yaw);
                let o = rot.transpose() * (origin - c);
                let d = rot.transpose() * dir;
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                let mut sign = 1.0;
                for i in 0..3 {
                    let h = half_extents[i];
                    if d[i].abs() < 1e-15 {
                        if o[i].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let mut t1 = (-h - o[i]) / d[i];
                    let mut t2 = (h - o[i]) / d[i];
                    let mut s = -1.0;
                    if t1 > t2 {
                        std::mem::swap(&mut t1, &mut t2);
                        s = 1.0;
                    }
                    if t1 > t_near {
                        t_near = t1;
                        axis = i;
                        sign = s;
                    }
                    t_far = t_far.min(t2);
                }
                if t_near > t_far || t_near <= 1e-9 {
                    return None;
                }
                let mut n = Vector3::zeros();
                n[axis] = sign;
                Some((t_near, rot * n))
            }
        }
    }

    /// Signed clearance from `x` to the primitive surface (negative inside).
    fn clearance(&self, x: &Vector3<f64>) -> f64 {
        let c = self.center();
        match &self.shape {
            Shape::Sphere { radius } => (x - c).norm() - radius,
            Shape::Cuboid { half_extents, yaw } => {
                let p = yaw_matrix(*yaw).transpose() * (x - c);
                let q = Vector3::new(
                    p.x.abs() - half_extents[0],
                    p.y.abs() - half_extents[1],
                    p.z.abs() - half_extents[2],
                );
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub seed: u64,
    pub room: Room,
    /// Albedo of the six room faces: -x, +x, ceiling, floor, -z, +z.
    pub wall_albedo: [[f32; 3]; 6],
    pub primitives: Vec<Primitive>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub room_width: (f64, f64),
    pub room_length: (f64, f64),
    pub room_height: (f64, f64),
    pub primitive_count: (usize, usize),
    /// Range of full primitive edge lengths (cuboids) or diameters (spheres).
    pub primitive_size: (f64, f64),
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            room_width: (4.0, 7.0),
            room_length: (4.0, 7.0),
            room_height: (2.5, 3.0),
            primitive_count: (3, 8),
            primitive_size: (0.3, 1.4),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("room_width", self.room_width),
            ("room_length", self.room_length),
            ("room_height", self.room_height),
            ("primitive_size", self.primitive_size),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) is invalid")));
            }
        }
        let (lo, hi) = self.primitive_count;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "primitive_count range ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        // a cuboid spins about the vertical axis, so its footprint radius is
        // half the horizontal diagonal
        let footprint = self.primitive_size.1 * std::f64::consts::SQRT_2;
        let smallest_room = self.room_width.0.min(self.room_length.0);
        if footprint >= smallest_room || self.primitive_size.1 >= self.room_height.0 {
            return Err(Error::Config(format!(
                "primitives up to {} m do not fit a {smallest_room} m x {} m room",
                self.primitive_size.1, self.room_height.0
            )));
        }
        Ok(())
    }
}

fn random_albedo(rng: &mut impl Rng) -> [f32; 3] {
    [
        rng.random_range(0.15..0.95),
        rng.random_range(0.15..0.95),
        rng.random_range(0.15..0.95),
    ]
}

pub fn generate_scene(seed: u64, config: &GenerationConfig) -> Result<SceneDescription> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = rng.random_range(config.room_width.0..=config.room_width.1);
    let length = rng.random_range(config.room_length.0..=config.room_length.1);
    let height = rng.random_range(config.room_height.0..=config.room_height.1);
    let room = Room {
        min: [-width / 2.0, -height, -length / 2.0],
        max: [width / 2.0, 0.0, length / 2.0],
    };
    let mut wall_albedo = [[0.0; 3]; 6];
    for a in &mut wall_albedo {
        *a = random_albedo(&mut rng);
    }
    let count = rng.random_range(config.primitive_count.0..=config.primitive_count.1);
    let (smin, smax) = config.primitive_size;
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let albedo = random_albedo(&mut rng);
        let (shape, footprint, half_height) = if rng.random_bool(0.6) {
            let he = [
                rng.random_range(smin..=smax) / 2.0,
                rng.random_range(smin..=smax) / 2.0,
                rng.random_range(smin..=smax) / 2.0,
            ];
            let yaw = rng.random_range(0.0..std::f64::consts::PI);
            let footprint = (he[0] * he[0] + he[2] * he[2]).sqrt();
            (Shape::Cuboid { half_extents: he, yaw }, footprint, he[1])
        } else {
            let r = rng.random_range(smin..=smax) / 2.0;
            (Shape::Sphere { radius: r }, r, r)
        };
        let x = rng.random_range(room.min[0] + footprint..=room.max[0] - footprint);
        let z = rng.random_range(room.min[2] + footprint..=room.max[2] - footprint);
        // resting on the floor, or floating for a third of spheres
        let mut y = -half_height;
        if matches!(shape, Shape::Sphere { .. }) && rng.random_bool(0.33) {
            let top = room.min[1] + half_height;
            y = rng.random_range(top.min(y)..=y);
        }
        primitives.push(Primitive {
            shape,
            center: [x, y, z],
            albedo,
        });
    }
    Ok(SceneDescription {
        seed,
        room,
        wall_albedo,
        primitives,
    })
}

impl SceneDescription {
    /// Nearest surface hit along a world ray. Rays from inside the room
    /// always hit a wall.
    fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        // room interior: exit point through the nearest face
        let mut t_exit = f64::INFINITY;
        let mut face = 0;
        for i in 0..3 {
            if dir[i] > 0.0 {
                let t = (self.room.max[i] - origin[i]) / dir[i];
                if t < t_exit {
                    t_exit = t;
                    face = 2 * i + 1;
                }
            } else if dir[i] < 0.0 {
                let t = (self.room.min[i] - origin[i]) / dir[i];
                if t < t_exit {
                    t_exit = t;
                    face = 2 * i;
                }
            }
        }
        if t_exit.is_finite() && t_exit > 0.0 {
            let mut normal = Vector3::zeros();
            normal[face / 2] = if face % 2 == 0 { 1.0 } else { -1.0 };
            best = Some(Hit {
                t: t_exit,
                normal,
                albedo: self.wall_albedo[face],
            });
        }
        for prim in &self.primitives {
            if let Some((t, normal)) = prim.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        normal,
                        albedo: prim.albedo,
                    });
                }
            }
        }
        best
    }

    /// Smallest distance from `x` to any surface (walls or primitives).
    pub fn clearance(&self, x: &Vector3<f64>) -> f64 {
        self.primitives
            .iter()
            .map(|p| p.clearance(x))
            .fold(self.room.interior_distance(x), f64::min)
    }

    fn check_placement(&self, pose: &Pose) -> Result<()> {
        let c = pose.center();
        if !self.room.contains(&c, 0.0) {
            return Err(Error::Placement(format!("camera at {c:?} is outside the room")));
        }
        if let Some(i) = self.primitives.iter().position(|p| p.clearance(&c) <= 0.0) {
            return Err(Error::Placement(format!(
                "camera at {c:?} is inside primitive {i}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub rgb: RgbImage,
    pub depth_gt: DepthMap,
    pub pose: Pose,
    pub timestamp: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Frame>,
    pub intrinsics: CameraIntrinsics,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Contiguous frames `range`, re-timestamped from zero.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Sequence {
        let frames = self.frames[range]
            .iter()
            .enumerate()
            .map(|(i, f)| Frame {
                timestamp: i,
                ..f.clone()
            })
            .collect();
        Sequence {
            frames,
            intrinsics: self.intrinsics,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::Config(format!(
                "a sequence needs at least 2 frames, got {}",
                self.frames.len()
            )));
        }
        let k = &self.intrinsics;
        k.validate()?;
        for (i, f) in self.frames.iter().enumerate() {
            if f.rgb.width() != k.width || f.rgb.height() != k.height {
                return Err(Error::Shape(format!("frame {i} rgb size differs from intrinsics")));
            }
            if !f.rgb.same_shape(&f.depth_gt.values) {
                return Err(Error::Shape(format!("frame {i} rgb and depth sizes differ")));
            }
            f.depth_gt.validate()?;
            f.pose.validate()?;
        }
        Ok(())
    }
}

fn mix_seed(mut h: u64, x: u64) -> u64 {
    // splitmix64 step
    h ^= x.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn render_row(
    scene: &SceneDescription,
    pose: &Pose,
    k: &CameraIntrinsics,
    v: usize,
    noise_seed: u64,
    light: &Vector3<f64>,
) -> (Vec<[f32; 3]>, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(noise_seed, v as u64));
    let origin = pose.center();
    let mut rgb = Vec::with_capacity(k.width);
    let mut depth = Vec::with_capacity(k.width);
    for u in 0..k.width {
        let dir = pose.transform_vector(&k.ray(PixelLocation::pixel(u, v)));
        match scene.trace(&origin, &dir) {
            Some(hit) => {
                let shade = hit.normal.dot(light).max(0.0) as f32;
                rgb.push(hit.albedo.map(|a| {
                    let n = rng.random_range(-SHADING_NOISE..=SHADING_NOISE);
                    (a * shade + n).clamp(0.0, 1.0)
                }));
                depth.push(hit.t as f32);
            }
            None => {
                rgb.push([0.0; 3]);
                depth.push(f32::NAN);
            }
        }
    }
    (rgb, depth)
}

/// Ray casts one RGB-D frame. Depth is the z-depth of the nearest surface;
/// color is Lambertian shading of the surface albedo plus seeded noise.
pub fn render_frame(scene: &SceneDescription, pose: &Pose, k: &CameraIntrinsics) -> Result<Frame> {
    k.validate()?;
    pose.validate()?;
    scene.check_placement(pose)?;
    let noise_seed = pose
        .to_row_major()
        .iter()
        .fold(scene.seed, |h, x| mix_seed(h, x.to_bits()));
    let light = Vector3::from(LIGHT_DIRECTION).normalize();

    #[cfg(feature = "parallel")]
    let rows: Vec<_> = {
        use rayon::prelude::*;
        (0..k.height)
            .into_par_iter()
            .map(|v| render_row(scene, pose, k, v, noise_seed, &light))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<_> = (0..k.height)
        .map(|v| render_row(scene, pose, k, v, noise_seed, &light))
        .collect();

    let mut rgb = Vec::with_capacity(k.width * k.height);
    let mut depth = Vec::with_capacity(k.width * k.height);
    for (r, d) in rows {
        rgb.extend(r);
        depth.extend(d);
    }
    Ok(Frame {
        rgb: Grid::from_vec(k.width, k.height, rgb),
        depth_gt: DepthMap::new(Grid::from_vec(k.width, k.height, depth)),
        pose: *pose,
        timestamp: 0,
    })
}

pub const MAX_STEP_TRANSLATION: f64 = 0.05;
pub const MAX_STEP_ROTATION_DEG: f64 = 2.0;
const TRAJECTORY_RETRIES: usize = 200;

#[derive(Clone, Copy, Debug)]
struct CameraState {
    eye: Vector3<f64>,
    yaw: f64,
    pitch: f64,
}

impl CameraState {
    fn pose(&self) -> Pose {
        Pose::from_yaw_pitch(self.eye, self.yaw, self.pitch)
    }
}

fn initial_state(scene: &SceneDescription, rng: &mut ChaCha8Rng) -> Result<CameraState> {
    let room = &scene.room;
    for _ in 0..TRAJECTORY_RETRIES {
        let eye = Vector3::new(
            rng.random_range(room.min[0] + CAMERA_CLEARANCE..room.max[0] - CAMERA_CLEARANCE),
            rng.random_range(-1.6..-1.1),
            rng.random_range(room.min[2] + CAMERA_CLEARANCE..room.max[2] - CAMERA_CLEARANCE),
        );
        if scene.clearance(&eye) < CAMERA_CLEARANCE {
            continue;
        }
        // look roughly towards the room center so furniture is in view
        let to_center = -eye;
        let yaw = to_center.x.atan2(to_center.z) + rng.random_range(-0.8..0.8);
        let pitch = rng.random_range(-0.3..0.0);
        return Ok(CameraState { eye, yaw, pitch });
    }
    Err(Error::Generation(
        "no free camera position found in the room".into(),
    ))
}

/// Smooth random walk through the scene. Consecutive poses differ by at most
/// 5 cm of translation and 2° of rotation.
pub fn generate_sequence(
    scene: &SceneDescription,
    trajectory_seed: u64,
    n_frames: usize,
    k: &CameraIntrinsics,
) -> Result<Sequence> {
    if n_frames < 2 {
        return Err(Error::Config(format!(
            "a sequence needs at least 2 frames, got {n_frames}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(scene.seed, trajectory_seed));
    let mut state = initial_state(scene, &mut rng)?;
    let mut velocity = Vector3::<f64>::zeros();
    let mut yaw_rate = 0.0f64;
    let mut pitch_rate = 0.0f64;
    let max_yaw_rate = 1.5f64.to_radians();
    let max_pitch_rate = 0.5f64.to_radians();

    let mut poses = vec![state.pose()];
    while poses.len() < n_frames {
        let mut next = None;
        for attempt in 0..TRAJECTORY_RETRIES {
            let jitter = if attempt == 0 { 0.008 } else { 0.03 };
            let mut v = velocity * 0.85
                + Vector3::new(
                    rng.random_range(-jitter..jitter),
                    rng.random_range(-jitter..jitter) * 0.3,
                    rng.random_range(-jitter..jitter),
                );
            let speed = v.norm();
            if speed > MAX_STEP_TRANSLATION * 0.95 {
                v *= MAX_STEP_TRANSLATION * 0.95 / speed;
            } else if speed < 0.005 {
                v = Vector3::new(0.005, 0.0, 0.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
            let yr = (yaw_rate * 0.85 + rng.random_range(-0.004..0.004))
                .clamp(-max_yaw_rate, max_yaw_rate);
            let pr = (pitch_rate * 0.85 + rng.random_range(-0.002..0.002))
                .clamp(-max_pitch_rate, max_pitch_rate);
            let candidate = CameraState {
                eye: state.eye + v,
                yaw: state.yaw + yr,
                pitch: (state.pitch + pr).clamp(-0.4, 0.1),
            };
            let in_height_band = (-1.8..=-0.9).contains(&candidate.eye.y);
            if in_height_band && scene.clearance(&candidate.eye) >= CAMERA_CLEARANCE {
                next = Some((candidate, v, yr, pr));
                break;
            }
            // bounce off obstacles
            velocity = -velocity;
        }
        let Some((candidate, v, yr, pr)) = next else {
            return Err(Error::Generation(format!(
                "trajectory left free space after {} frames",
                poses.len()
            )));
        };
        state = candidate;
        velocity = v;
        yaw_rate = yr;
        pitch_rate = pr;
        poses.push(state.pose());
    }

    let mut frames = Vec::with_capacity(n_frames);
    for (i, pose) in poses.iter().enumerate() {
        let mut frame = render_frame(scene, pose, k)?;
        frame.timestamp = i;
        frames.push(frame);
    }
    Ok(Sequence {
        frames,
        intrinsics: *k,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFrame {
    timestamp: usize,
    pose: Vec<f64>,
    rgb: String,
    depth: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    intrinsics: CameraIntrinsics,
    frame_count: usize,
    frames: Vec<ManifestFrame>,
}

const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// Writes `manifest.json`, `rgb_%05d.png` and `depth_%05d.bin` into `dir`.
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (i, frame) in seq.frames.iter().enumerate() {
        let rgb = format!("rgb_{i:05}.png");
        let depth = format!("depth_{i:05}.bin");
        io::write_rgb_png(&dir.join(&rgb), &frame.rgb)?;
        io::write_depth(&dir.join(&depth), &frame.depth_gt)?;
        frames.push(ManifestFrame {
            timestamp: frame.timestamp,
            pose: frame.pose.to_row_major().to_vec(),
            rgb,
            depth,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        intrinsics: seq.intrinsics,
        frame_count: frames.len(),
        frames,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads and validates a dataset directory. Ground-truth depth must be valid
/// everywhere since generated rooms are closed.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    if manifest.frame_count != manifest.frames.len() {
        return Err(Error::format(
            &path,
            format!(
                "frame_count is {} but {} frames are listed",
                manifest.frame_count,
                manifest.frames.len()
            ),
        ));
    }
    let k = manifest.intrinsics;
    k.validate()
        .map_err(|e| Error::format(&path, e.to_string()))?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for entry in &manifest.frames {
        let pose =
            Pose::from_row_major(&entry.pose).map_err(|e| Error::format(&path, e.to_string()))?;
        let rgb_path = dir.join(&entry.rgb);
        let rgb = io::read_rgb_png(&rgb_path)?;
        if rgb.width() != k.width || rgb.height() != k.height {
            return Err(Error::format(
                &rgb_path,
                format!(
                    "image is {}x{}, intrinsics say {}x{}",
                    rgb.width(),
                    rgb.height(),
                    k.width,
                    k.height
                ),
            ));
        }
        let depth_path = dir.join(&entry.depth);
        let depth_gt = io::read_depth(&depth_path)?;
        if !depth_gt.values.same_shape(&rgb) {
            return Err(Error::format(&depth_path, "depth size differs from rgb"));
        }
        if let Some((u, v, d)) = depth_gt
            .values
            .indexed()
            .find(|(_, _, d)| !(d.is_finite() && **d > 0.0))
        {
            return Err(Error::format(
                &depth_path,
                format!("depth at ({u}, {v}) is {d}, expected a finite positive value"),
            ));
        }
        frames.push(Frame {
            rgb,
            depth_gt,
            pose,
            timestamp: entry.timestamp,
        });
    }
    let seq = Sequence {
        frames,
        intrinsics: k,
    };
    seq.validate()
        .map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single_wall_scene() -> SceneDescription {
        SceneDescription {
            seed: 3,
            room: Room {
                min: [-5.0, -3.0, -1.0],
                max: [5.0, 0.0, 2.0],
            },
            wall_albedo: [[0.5; 3]; 6],
            primitives: vec![],
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let cfg = GenerationConfig::default();
        let a = serde_json::to_vec(&generate_scene(1, &cfg).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_scene(1, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
        let s1 = generate_scene(1, &cfg).unwrap();
        let s2 = generate_scene(2, &cfg).unwrap();
        assert_ne!(s1.primitives, s2.primitives);
    }

    #[test]
    fn zero_primitives_is_a_config_error() {
        let cfg = GenerationConfig {
            primitive_count: (0, 0),
            ..Default::default()
        };
        assert!(matches!(generate_scene(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn oversized_primitives_are_a_config_error() {
        let cfg = GenerationConfig {
            primitive_size: (1.0, 5.0),
            ..Default::default()
        };
        assert!(matches!(generate_scene(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn generated_primitives_stay_in_room() {
        for seed in 0..20 {
            let scene = generate_scene(seed, &GenerationConfig::default()).unwrap();
            assert!(!scene.primitives.is_empty());
            for p in &scene.primitives {
                let c = Vector3::from(p.center);
                assert!(scene.room.contains(&c, 0.0), "seed {seed}: {p:?}");
                assert!(p.albedo.iter().all(|a| (0.0..=1.0).contains(a)));
            }
        }
    }

    #[test]
    fn perpendicular_wall_has_constant_depth() {
        let scene = single_wall_scene();
        let k = CameraIntrinsics::desk_scale(24, 16);
        // the +z wall is 2 m ahead; side walls are far outside the view
        let frame = render_frame(&scene, &Pose::from_translation(Vector3::new(0.0, -1.5, 0.0)), &k)
            .unwrap();
        for d in frame.depth_gt.valid_values() {
            assert_abs_diff_eq!(d, 2.0, epsilon = 1e-5);
        }
        assert_eq!(frame.depth_gt.valid_count(), 24 * 16);
    }

    #[test]
    fn cuboid_on_axis_gives_near_face_depth() {
        let mut scene = single_wall_scene();
        scene.room.max[2] = 10.0;
        scene.primitives.push(Primitive {
            shape: Shape::Cuboid {
                half_extents: [0.5; 3],
                yaw: 0.0,
            },
            center: [0.0, -1.5, 3.0],
            albedo: [0.8; 3],
        });
        // odd size so a pixel sits exactly on the optical axis
        let k = CameraIntrinsics::desk_scale(25, 17);
        let frame = render_frame(&scene, &Pose::from_translation(Vector3::new(0.0, -1.5, 0.0)), &k)
            .unwrap();
        assert_abs_diff_eq!(frame.depth_gt.get(12, 8).unwrap(), 2.5, epsilon = 1e-5);
    }

    #[test]
    fn probe_rays_match_analytic_sphere() {
        let mut scene = single_wall_scene();
        scene.room.max[2] = 10.0;
        scene.primitives.push(Primitive {
            shape: Shape::Sphere { radius: 0.7 },
            center: [0.2, -1.4, 3.0],
            albedo: [0.3; 3],
        });
        let k = CameraIntrinsics::desk_scale(32, 24);
        let pose = Pose::from_translation(Vector3::new(0.0, -1.5, 0.0));
        let frame = render_frame(&scene, &pose, &k).unwrap();
        let c = Vector3::new(0.2, 0.1, 3.0);
        for (u, v, &d) in frame.depth_gt.values.indexed() {
            let ray = k.ray(PixelLocation::pixel(u, v));
            // solve |t·ray - c|² = r² for the smaller root
            let a = ray.dot(&ray);
            let b = -2.0 * ray.dot(&c);
            let cc = c.dot(&c) - 0.49;
            let disc = b * b - 4.0 * a * cc;
            if disc > 0.0 {
                let t = (-b - disc.sqrt()) / (2.0 * a);
                assert!((d as f64 - t).abs() < 1e-5, "pixel ({u}, {v}): {d} vs {t}");
            }
        }
    }

    #[test]
    fn camera_inside_primitive_is_rejected() {
        let mut scene = single_wall_scene();
        scene.primitives.push(Primitive {
            shape: Shape::Sphere { radius: 0.5 },
            center: [0.0, -1.5, 0.0],
            albedo: [0.3; 3],
        });
        let k = CameraIntrinsics::desk_scale(8, 8);
        let err = render_frame(&scene, &Pose::from_translation(Vector3::new(0.0, -1.5, 0.1)), &k)
            .unwrap_err();
        assert!(matches!(err, Error::Placement(_)));
    }

    #[test]
    fn render_is_deterministic_with_bounded_noise() {
        let scene = generate_scene(5, &GenerationConfig::default()).unwrap();
        let k = CameraIntrinsics::desk_scale(32, 24);
        let seq = generate_sequence(&scene, 0, 2, &k).unwrap();
        let pose = seq.frames[0].pose;
        let a = render_frame(&scene, &pose, &k).unwrap();
        let b = render_frame(&scene, &pose, &k).unwrap();
        assert_eq!(a, b);
        assert!(a.rgb.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn sequences_respect_motion_bounds() {
        let scene = generate_scene(11, &GenerationConfig::default()).unwrap();
        let k = CameraIntrinsics::desk_scale(16, 12);
        let seq = generate_sequence(&scene, 4, 30, &k).unwrap();
        assert_eq!(seq.len(), 30);
        seq.validate().unwrap();
        for pair in seq.frames.windows(2) {
            let step = (pair[1].pose.center() - pair[0].pose.center()).norm();
            assert!(step <= MAX_STEP_TRANSLATION && step > 0.0);
            let angle = pair[0].pose.rotation_angle_to(&pair[1].pose).to_degrees();
            assert!(angle <= MAX_STEP_ROTATION_DEG, "{angle}");
        }
        assert_eq!(seq, generate_sequence(&scene, 4, 30, &k).unwrap());
        assert!(generate_sequence(&scene, 4, 1, &k).is_err());
    }
}
