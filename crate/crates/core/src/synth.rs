//! Deterministic synthetic parking-scene generator.
//!
//! Scenes are flat-shaded box worlds on a checkered ground plane, rendered
//! by per-pixel ray casting through the camera model: unproject the pixel
//! center, intersect the ray with every box and the ground, nearest hit
//! wins. The ground-truth mask marks exactly the pixels whose nearest hit
//! is a truly-moving object, so the mask is analytic and independent of
//! the LiDAR annotation pipeline.
//!
//! The world frame is y-down with the ground plane at y = 0; boxes rest on
//! the ground, so their centers sit at y = -half_height. The ego vehicle
//! follows a straight line or a circular arc at constant speed, and moving
//! objects follow constant-velocity ground-plane paths.
//!
//! All randomness flows from a single ChaCha12 stream per scene. Per-scene
//! seeds are derived from (dataset seed, scene index) with a splitmix-style
//! mixer, so scenes can be generated in any order, or in parallel, and
//! still agree bit-for-bit with serial generation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{
    annotate_scene, read_lidar_txt, write_lidar_txt, AnnotationError, FramePayload, LidarScan,
    MotionAnnotation, MotionConfig, ObjectClass, OrientedBox3,
};
use crate::geometry::{vec3_serde, yaw_matrix, Camera, GeometryError, Pixel, Point3, Pose};
use crate::mask::{MaskError, SegmentationMask};
use crate::raster::{RasterError, RgbRaster};

/// Vehicles are 1.8 m wide, 1.5 m tall, 4.4 m long.
const VEHICLE_HALF_EXTENTS: [f64; 3] = [0.9, 0.75, 2.2];
/// Pedestrians are 0.6 m wide, 1.7 m tall, 0.6 m deep.
const PEDESTRIAN_HALF_EXTENTS: [f64; 3] = [0.3, 0.85, 0.3];
/// Camera mount in the ego frame: 1.3 m above ground, 0.8 m forward.
const CAMERA_MOUNT: [f64; 3] = [0.0, -1.3, 0.8];
/// LiDAR mount in the ego frame: 1.9 m above ground, on the roof center.
const LIDAR_MOUNT: [f64; 3] = [0.0, -1.9, 0.0];
/// LiDAR elevation rings, spanning 0 to 25 degrees below horizontal.
const LIDAR_RINGS: usize = 16;
const LIDAR_MAX_ELEVATION: f64 = 25.0 * std::f64::consts::PI / 180.0;
/// Rays are discarded beyond this range, like a real sensor's return limit.
const LIDAR_MAX_RANGE: f64 = 50.0;

const SKY_COLOR: [u8; 3] = [136, 162, 190];
const GROUND_LIGHT: [u8; 3] = [142, 142, 142];
const GROUND_DARK: [u8; 3] = [96, 96, 96];

/// Current manifest schema version.
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io { path: path.to_path_buf(), source }
}

/// Mixes a stream index into a base seed (splitmix64 golden-ratio step).
/// Scene k of a dataset draws from `mix_seed(dataset_seed, k)`.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn default_pair_stride() -> usize {
    1
}

/// Everything needed to generate one scene. Image dimensions live inside
/// the camera intrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub n_frames: usize,
    /// Seconds between consecutive frames (1/30 matches a 30 fps capture).
    pub dt: f64,
    pub n_vehicles: usize,
    pub n_pedestrians: usize,
    /// Fraction of objects designated as moving, rounded to a count.
    pub moving_fraction: f64,
    pub camera: Camera,
    /// Ego speed in m/s; zero keeps the ego parked.
    pub ego_speed: f64,
    /// Total rays per sweep, spread over 16 elevation rings.
    pub lidar_rays: usize,
    /// Frame gap between the paired images (t and t - stride).
    #[serde(default = "default_pair_stride")]
    pub pair_stride: usize,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::Config(m));
        if self.n_frames < 2 {
            return err(format!("n_frames must be at least 2, got {}", self.n_frames));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return err(format!("dt must be positive and finite, got {}", self.dt));
        }
        if !(0.0..=1.0).contains(&self.moving_fraction) {
            return err(format!("moving_fraction must lie in [0, 1], got {}", self.moving_fraction));
        }
        if !(self.ego_speed >= 0.0) || !self.ego_speed.is_finite() {
            return err(format!("ego_speed must be non-negative, got {}", self.ego_speed));
        }
        if self.lidar_rays < LIDAR_RINGS || self.lidar_rays % LIDAR_RINGS != 0 {
            return err(format!(
                "lidar_rays must be a positive multiple of {LIDAR_RINGS}, got {}",
                self.lidar_rays
            ));
        }
        if self.pair_stride == 0 || self.pair_stride >= self.n_frames {
            return err(format!(
                "pair_stride must lie in [1, n_frames), got {} with n_frames {}",
                self.pair_stride, self.n_frames
            ));
        }
        Ok(())
    }

    /// Samples per scene: one per frame that has a full pair behind it.
    pub fn samples_per_scene(&self) -> usize {
        self.n_frames - self.pair_stride
    }
}

/// Generator-private truth about one object, kept alongside its box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectTruth {
    pub box3: OrientedBox3,
    /// World-frame constant velocity; zero for static objects.
    #[serde(with = "vec3_serde")]
    pub velocity: Point3,
    pub moving: bool,
    pub albedo: [u8; 3],
}

/// One fully rendered frame with its sensor data and analytic truth.
#[derive(Debug, Clone)]
pub struct SceneFrame {
    pub frame_index: usize,
    pub timestamp: f64,
    pub image: RgbRaster,
    pub lidar: LidarScan,
    pub ego_pose: Pose,
    pub camera_pose: Pose,
    pub lidar_pose: Pose,
    pub objects: Vec<ObjectTruth>,
    pub gt_mask: SegmentationMask,
}

/// A training sample: frame t paired with frame t - stride.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub frame_index: usize,
    pub timestamp: f64,
    pub image_t: RgbRaster,
    pub image_t_minus_1: RgbRaster,
    pub lidar: LidarScan,
    pub ego_pose: Pose,
    pub camera_pose: Pose,
    pub boxes: Vec<ObjectTruth>,
    pub gt_mask: SegmentationMask,
}

/// Per-frame sidecar serialized as `frame_<k>.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMeta {
    pub frame_index: usize,
    pub timestamp: f64,
    pub ego_pose: Pose,
    pub camera_pose: Pose,
    pub lidar_pose: Pose,
    pub objects: Vec<ObjectTruth>,
}

/// What the renderer needs to know about one object.
#[derive(Debug, Clone)]
pub struct RenderObject {
    pub box3: OrientedBox3,
    pub albedo: [u8; 3],
    pub moving: bool,
}

impl From<&ObjectTruth> for RenderObject {
    fn from(o: &ObjectTruth) -> Self {
        RenderObject { box3: o.box3.clone(), albedo: o.albedo, moving: o.moving }
    }
}

/// Ego trajectory: a straight line along +z or a constant-radius arc.
#[derive(Debug, Clone, Copy)]
enum EgoPath {
    Straight,
    /// `left` turns toward -x; the arc center sits at (+-radius, 0, 0).
    Arc { radius: f64, left: bool },
}

impl EgoPath {
    /// Closed-form pose after traveling `speed * t` meters from the origin.
    fn pose_at(&self, speed: f64, t: f64) -> Pose {
        let s = speed * t;
        match *self {
            EgoPath::Straight => {
                Pose::from_yaw_translation(0.0, Point3::new(0.0, 0.0, s))
            }
            EgoPath::Arc { radius, left } => {
                let phi = s / radius;
                if left {
                    let p = Point3::new(-radius + radius * phi.cos(), 0.0, radius * phi.sin());
                    Pose::from_yaw_translation(-phi, p)
                } else {
                    let p = Point3::new(radius - radius * phi.cos(), 0.0, radius * phi.sin());
                    Pose::from_yaw_translation(phi, p)
                }
            }
        }
    }
}

/// What a ray hit first.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Hit {
    Nothing,
    Ground { t: f64 },
    Object { t: f64, index: usize },
}

impl Hit {
    fn range(&self) -> Option<f64> {
        match *self {
            Hit::Nothing => None,
            Hit::Ground { t } | Hit::Object { t, .. } => Some(t),
        }
    }
}

/// Entry distance of a ray into an oriented box, if it hits at all.
///
/// The ray is moved into the box frame with the inverse yaw rotation and
/// the standard slab test runs there. Hits closer than 1e-9 are ignored so
/// a ray starting exactly on a surface does not hit it again.
fn ray_box_entry(origin: &Point3, dir: &Point3, box3: &OrientedBox3) -> Option<f64> {
    let r_inv = yaw_matrix(box3.yaw).transpose();
    let o = r_inv * (origin - box3.center);
    let d = r_inv * dir;
    let mut t0 = 1e-9_f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let he = box3.half_extents[a];
        if d[a].abs() < 1e-15 {
            if o[a].abs() > he {
                return None;
            }
        } else {
            let inv = 1.0 / d[a];
            let mut ta = (-he - o[a]) * inv;
            let mut tb = (he - o[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
    }
    Some(t0)
}

/// Distance along the ray to the ground plane y = 0 (y points down, so
/// the camera sits at negative y and downward rays have positive dir.y).
fn ray_ground(origin: &Point3, dir: &Point3) -> Option<f64> {
    if dir.y <= 1e-12 {
        return None;
    }
    let t = -origin.y / dir.y;
    if t > 1e-9 {
        Some(t)
    } else {
        None
    }
}

fn nearest_hit(origin: &Point3, dir: &Point3, objects: &[RenderObject]) -> Hit {
    let mut best = match ray_ground(origin, dir) {
        Some(t) => Hit::Ground { t },
        None => Hit::Nothing,
    };
    for (index, obj) in objects.iter().enumerate() {
        if let Some(t) = ray_box_entry(origin, dir, &obj.box3) {
            if best.range().map_or(true, |bt| t < bt) {
                best = Hit::Object { t, index };
            }
        }
    }
    best
}

fn ground_color(p: &Point3) -> [u8; 3] {
    let parity = (p.x.floor() as i64 + p.z.floor() as i64).rem_euclid(2);
    if parity == 0 {
        GROUND_LIGHT
    } else {
        GROUND_DARK
    }
}

/// Renders one view by casting a ray through every pixel center.
///
/// Pixels whose center cannot be unprojected (outside the fisheye image
/// circle) come out black. The mask marks pixels whose nearest hit is an
/// object flagged as moving.
pub fn render_view(
    camera: &Camera,
    camera_pose: &Pose,
    objects: &[RenderObject],
) -> (RgbRaster, SegmentationMask) {
    let (w, h) = (camera.width(), camera.height());
    let mut image = RgbRaster::black(w, h);
    let mut mask = SegmentationMask::zeros(w, h);
    let origin = *camera_pose.translation();
    for v in 0..h {
        for u in 0..w {
            let px = Pixel::new(u as f64 + 0.5, v as f64 + 0.5);
            let ray_cam = match camera.unproject(&px) {
                Ok(d) => d,
                Err(_) => continue,
            };
            let dir = camera_pose.rotate(&ray_cam);
            match nearest_hit(&origin, &dir, objects) {
                Hit::Nothing => image.set(u, v, SKY_COLOR),
                Hit::Ground { t } => {
                    let p = origin + t * dir;
                    image.set(u, v, ground_color(&p));
                }
                Hit::Object { index, .. } => {
                    image.set(u, v, objects[index].albedo);
                    if objects[index].moving {
                        mask.set(u, v, 1);
                    }
                }
            }
        }
    }
    (image, mask)
}

/// Casts a fixed fan of rays and returns sensor-frame hit points.
///
/// The fan has 16 elevation rings from horizontal down to 25 degrees,
/// each with `n_rays / 16` evenly spaced azimuths. Rays that miss
/// everything within 50 m produce no point.
pub fn lidar_scan(
    lidar_pose: &Pose,
    objects: &[RenderObject],
    n_rays: usize,
    timestamp: f64,
) -> LidarScan {
    let n_az = n_rays / LIDAR_RINGS;
    let origin = *lidar_pose.translation();
    let world_to_sensor = lidar_pose.invert();
    let mut points = Vec::new();
    for ring in 0..LIDAR_RINGS {
        let elev = ring as f64 * LIDAR_MAX_ELEVATION / (LIDAR_RINGS - 1) as f64;
        for j in 0..n_az {
            let az = j as f64 * std::f64::consts::TAU / n_az as f64;
            // y is down, so positive elevation tips the ray toward the ground.
            let dir_sensor =
                Point3::new(az.sin() * elev.cos(), elev.sin(), az.cos() * elev.cos());
            let dir = lidar_pose.rotate(&dir_sensor);
            if let Some(t) = nearest_hit(&origin, &dir, objects).range() {
                if t <= LIDAR_MAX_RANGE {
                    let p_world = origin + t * dir;
                    points.push(world_to_sensor.transform(&p_world));
                }
            }
        }
    }
    LidarScan { timestamp, points, sensor_pose: lidar_pose.clone() }
}

/// Object placement drawn once per scene; boxes are re-posed per frame.
struct SceneLayout {
    path: EgoPath,
    objects: Vec<ObjectTruth>,
}

fn draw_layout(cfg: &SceneConfig, rng: &mut ChaCha12Rng) -> Result<SceneLayout, SynthError> {
    let path = if rng.gen_bool(0.5) {
        EgoPath::Straight
    } else {
        let radius = rng.gen_range(8.0..20.0);
        let left = rng.gen_bool(0.5);
        EgoPath::Arc { radius, left }
    };

    let n_total = cfg.n_vehicles + cfg.n_pedestrians;
    let mut placed: Vec<(ObjectClass, Point3, f64, [u8; 3])> = Vec::with_capacity(n_total);
    for i in 0..n_total {
        let class = if i < cfg.n_vehicles { ObjectClass::Vehicle } else { ObjectClass::Pedestrian };
        let half = if class == ObjectClass::Vehicle {
            VEHICLE_HALF_EXTENTS
        } else {
            PEDESTRIAN_HALF_EXTENTS
        };
        // Keep the ego corridor |x| < 2 clear; give up after 20 rejections
        // and keep the last draw rather than loop forever.
        let mut x = 0.0_f64;
        let mut z = 0.0_f64;
        for _ in 0..20 {
            x = rng.gen_range(-8.0..8.0);
            z = rng.gen_range(3.0..18.0);
            if x.abs() >= 2.0 {
                break;
            }
        }
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let albedo = [
            rng.gen_range(40..=230u8),
            rng.gen_range(40..=230u8),
            rng.gen_range(40..=230u8),
        ];
        placed.push((class, Point3::new(x, -half[1], z), yaw, albedo));
    }

    // Designate movers: shuffle indices, first round(fraction * n) move.
    let n_moving = (cfg.moving_fraction * n_total as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_total).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut moving = vec![false; n_total];
    for &idx in order.iter().take(n_moving.min(n_total)) {
        moving[idx] = true;
    }

    let mut objects = Vec::with_capacity(n_total);
    for (i, (class, center, yaw, albedo)) in placed.into_iter().enumerate() {
        let velocity = if moving[i] {
            let speed = if class == ObjectClass::Vehicle {
                rng.gen_range(1.4..2.8)
            } else {
                rng.gen_range(0.9..2.0)
            };
            let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            Point3::new(speed * heading.sin(), 0.0, speed * heading.cos())
        } else {
            Point3::zeros()
        };
        let half = if class == ObjectClass::Vehicle {
            VEHICLE_HALF_EXTENTS
        } else {
            PEDESTRIAN_HALF_EXTENTS
        };
        let box3 = OrientedBox3::new(
            i as u64 + 1,
            class,
            center,
            Point3::new(half[0], half[1], half[2]),
            yaw,
        )
        .map_err(|e| SynthError::Config(format!("object placement: {e}")))?;
        objects.push(ObjectTruth { box3, velocity, moving: moving[i], albedo });
    }
    Ok(SceneLayout { path, objects })
}

fn pose_from_mount(ego: &Pose, mount: [f64; 3]) -> Pose {
    ego.compose(&Pose::from_yaw_translation(0.0, Point3::new(mount[0], mount[1], mount[2])))
}

fn objects_at(layout: &SceneLayout, t: f64) -> Result<Vec<ObjectTruth>, SynthError> {
    layout
        .objects
        .iter()
        .map(|o| {
            let center = o.box3.center + o.velocity * t;
            let box3 = OrientedBox3::new(
                o.box3.object_id,
                o.box3.class_tag,
                center,
                o.box3.half_extents,
                o.box3.yaw,
            )
            .map_err(|e| SynthError::Config(format!("object path: {e}")))?;
            Ok(ObjectTruth { box3, velocity: o.velocity, moving: o.moving, albedo: o.albedo })
        })
        .collect()
}

/// Generates every frame of one scene. Identical configs (including the
/// seed) produce bit-identical frames.
pub fn generate_frames(cfg: &SceneConfig) -> Result<Vec<SceneFrame>, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let layout = draw_layout(cfg, &mut rng)?;

    let mut frames = Vec::with_capacity(cfg.n_frames);
    for k in 0..cfg.n_frames {
        let t = k as f64 * cfg.dt;
        let ego_pose = layout.path.pose_at(cfg.ego_speed, t);
        let camera_pose = pose_from_mount(&ego_pose, CAMERA_MOUNT);
        let lidar_pose = pose_from_mount(&ego_pose, LIDAR_MOUNT);
        let objects = objects_at(&layout, t)?;
        let render_objects: Vec<RenderObject> = objects.iter().map(RenderObject::from).collect();
        let (image, gt_mask) = render_view(&cfg.camera, &camera_pose, &render_objects);
        let lidar = lidar_scan(&lidar_pose, &render_objects, cfg.lidar_rays, t);
        frames.push(SceneFrame {
            frame_index: k,
            timestamp: t,
            image,
            lidar,
            ego_pose,
            camera_pose,
            lidar_pose,
            objects,
            gt_mask,
        });
    }
    Ok(frames)
}

/// Generates a scene and pairs each frame with the one `pair_stride`
/// steps earlier.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Vec<SceneSample>, SynthError> {
    let frames = generate_frames(cfg)?;
    let mut samples = Vec::with_capacity(cfg.samples_per_scene());
    for k in cfg.pair_stride..frames.len() {
        let cur = &frames[k];
        let prev = &frames[k - cfg.pair_stride];
        samples.push(SceneSample {
            frame_index: cur.frame_index,
            timestamp: cur.timestamp,
            image_t: cur.image.clone(),
            image_t_minus_1: prev.image.clone(),
            lidar: cur.lidar.clone(),
            ego_pose: cur.ego_pose.clone(),
            camera_pose: cur.camera_pose.clone(),
            boxes: cur.objects.clone(),
            gt_mask: cur.gt_mask.clone(),
        });
    }
    Ok(samples)
}

/// Scene-level train/test split: shuffle 0..n by seed, first
/// ceil(train_fraction * n) scenes train, the rest test. Both index lists
/// come back sorted.
pub fn split_indices(
    n_scenes: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), SynthError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SynthError::Config(format!(
            "train_fraction must lie strictly inside (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (train_fraction * n_scenes as f64).ceil() as usize;
    if n_train == 0 || n_train >= n_scenes {
        return Err(SynthError::Config(format!(
            "split of {n_scenes} scenes at {train_fraction} leaves an empty side \
             ({n_train} train / {} test)",
            n_scenes - n_train.min(n_scenes)
        )));
    }
    let mut order: Vec<usize> = (0..n_scenes).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut test: Vec<usize> = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One sample's file paths (relative to the dataset root) plus flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub scene_id: String,
    pub frame_index: usize,
    pub image_t: String,
    pub image_t_minus_1: String,
    pub lidar: String,
    pub meta: String,
    pub gt_mask: String,
    /// Label produced by the annotation pipeline; training reads this.
    #[serde(default)]
    pub label_mask: Option<String>,
    /// Per-frame annotation sidecar (hulls and motion labels).
    #[serde(default)]
    pub annotation: Option<String>,
    /// True when the sample's scene contains no moving object.
    #[serde(default)]
    pub static_only: bool,
    /// True for scenes appended by static-scene augmentation.
    #[serde(default)]
    pub augmented: bool,
}

/// Ordered file records for one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: Split,
    pub camera: Camera,
    /// Template the scenes were generated from; augmentation reuses it.
    pub scene_template: SceneConfig,
    pub dataset_seed: u64,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let mut body = serde_json::to_vec_pretty(self)
            .map_err(|e| SynthError::Json { path: path.to_path_buf(), source: e })?;
        body.push(b'\n');
        fs::write(path, body).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let body = fs::read(path).map_err(|e| io_err(path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&body)
            .map_err(|e| SynthError::Json { path: path.to_path_buf(), source: e })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(SynthError::Manifest(format!(
                "unsupported manifest version {} in {}",
                manifest.version,
                path.display()
            )));
        }
        Ok(manifest)
    }
}

/// Both splits of one generated dataset, written as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CombinedManifest {
    pub version: u32,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

impl CombinedManifest {
    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let mut body = serde_json::to_vec_pretty(self)
            .map_err(|e| SynthError::Json { path: path.to_path_buf(), source: e })?;
        body.push(b'\n');
        fs::write(path, body).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let body = fs::read(path).map_err(|e| io_err(path, e))?;
        let manifest: CombinedManifest = serde_json::from_slice(&body)
            .map_err(|e| SynthError::Json { path: path.to_path_buf(), source: e })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(SynthError::Manifest(format!(
                "unsupported manifest version {} in {}",
                manifest.version,
                path.display()
            )));
        }
        Ok(manifest)
    }
}

/// Dataset-level generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub train_fraction: f64,
    /// Fraction of each split's scenes regenerated with moving_fraction 0.
    pub static_scene_fraction: f64,
    /// Per-scene template; its seed field is replaced per scene.
    pub scene: SceneConfig,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_scenes < 2 {
            return Err(SynthError::Config(format!(
                "n_scenes must be at least 2 to split, got {}",
                self.n_scenes
            )));
        }
        if !(0.0..1.0).contains(&self.static_scene_fraction) {
            return Err(SynthError::Config(format!(
                "static_scene_fraction must lie in [0, 1), got {}",
                self.static_scene_fraction
            )));
        }
        self.scene.validate()
    }
}

fn frame_stem(k: usize) -> String {
    format!("frame_{k:04}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let mut body = serde_json::to_vec_pretty(value)
        .map_err(|e| SynthError::Json { path: path.to_path_buf(), source: e })?;
    body.push(b'\n');
    fs::write(path, body).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SynthError> {
    let body = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&body).map_err(|e| SynthError::Json { path: path.to_path_buf(), source: e })
}

/// Writes one scene's frames under `root/<split>/<scene_id>/` and returns
/// the sample records (paths relative to root).
///
/// With `label_from_gt` the records point their label at the ground-truth
/// mask; augmented static scenes use this because their masks are all-zero
/// by construction and need no annotation pass.
fn write_scene(
    root: &Path,
    split: Split,
    scene_id: &str,
    cfg: &SceneConfig,
    frames: &[SceneFrame],
    augmented: bool,
    label_from_gt: bool,
) -> Result<Vec<SampleRecord>, SynthError> {
    let rel_dir = format!("{}/{}", split.dir_name(), scene_id);
    let dir = root.join(&rel_dir);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;

    let static_only = frames.iter().all(|f| f.objects.iter().all(|o| !o.moving));
    for frame in frames {
        let stem = frame_stem(frame.frame_index);
        frame.image.write_ppm(&dir.join(format!("{stem}.ppm")))?;
        write_lidar_txt(&dir.join(format!("{stem}.txt")), &frame.lidar.points)?;
        frame.gt_mask.write_pgm(&dir.join(format!("{stem}_gt.pgm")))?;
        let meta = FrameMeta {
            frame_index: frame.frame_index,
            timestamp: frame.timestamp,
            ego_pose: frame.ego_pose.clone(),
            camera_pose: frame.camera_pose.clone(),
            lidar_pose: frame.lidar_pose.clone(),
            objects: frame.objects.clone(),
        };
        write_json(&dir.join(format!("{stem}.json")), &meta)?;
    }

    let mut records = Vec::with_capacity(cfg.samples_per_scene());
    for k in cfg.pair_stride..frames.len() {
        let stem = frame_stem(k);
        let prev_stem = frame_stem(k - cfg.pair_stride);
        let gt_mask = format!("{rel_dir}/{stem}_gt.pgm");
        records.push(SampleRecord {
            scene_id: scene_id.to_string(),
            frame_index: k,
            image_t: format!("{rel_dir}/{stem}.ppm"),
            image_t_minus_1: format!("{rel_dir}/{prev_stem}.ppm"),
            lidar: format!("{rel_dir}/{stem}.txt"),
            meta: format!("{rel_dir}/{stem}.json"),
            label_mask: if label_from_gt { Some(gt_mask.clone()) } else { None },
            gt_mask,
            annotation: None,
            static_only,
            augmented,
        });
    }
    Ok(records)
}

/// Generates `n_scenes` scenes, splits them scene-atomically, and writes
/// the dataset tree plus `manifest.json`, `manifest_train.json`, and
/// `manifest_test.json` at the root.
///
/// Within each split the trailing `round(static_scene_fraction * len)`
/// scenes are generated with moving_fraction 0 so both splits contain
/// purely static scenes for false-positive measurement.
pub fn generate_dataset(cfg: &DatasetConfig, root: &Path) -> Result<CombinedManifest, SynthError> {
    cfg.validate()?;
    let (train_ids, test_ids) = split_indices(cfg.n_scenes, cfg.train_fraction, cfg.seed)?;

    let mut manifests = Vec::with_capacity(2);
    for (split, ids) in [(Split::Train, &train_ids), (Split::Test, &test_ids)] {
        let n_static = ((cfg.static_scene_fraction * ids.len() as f64).round() as usize)
            .min(ids.len().saturating_sub(1));
        let first_static = ids.len() - n_static;
        let mut records = Vec::new();
        for (rank, &scene_index) in ids.iter().enumerate() {
            let mut scene_cfg = cfg.scene.clone();
            scene_cfg.seed = mix_seed(cfg.seed, scene_index as u64);
            if rank >= first_static {
                scene_cfg.moving_fraction = 0.0;
            }
            let frames = generate_frames(&scene_cfg)?;
            let scene_id = format!("scene_{scene_index:04}");
            records.extend(write_scene(root, split, &scene_id, &scene_cfg, &frames, false, false)?);
        }
        manifests.push(DatasetManifest {
            version: MANIFEST_VERSION,
            split,
            camera: cfg.scene.camera.clone(),
            scene_template: cfg.scene.clone(),
            dataset_seed: cfg.seed,
            records,
        });
    }

    let test = manifests.pop().expect("two splits");
    let train = manifests.pop().expect("two splits");
    let combined = CombinedManifest { version: MANIFEST_VERSION, train, test };
    combined.train.save(&root.join("manifest_train.json"))?;
    combined.test.save(&root.join("manifest_test.json"))?;
    combined.save(&root.join("manifest.json"))?;
    Ok(combined)
}

/// Appends `n_extra` all-static scenes to a train manifest, writing their
/// files under the same root. Their labels point at the analytic masks
/// (all-zero by construction), so they skip the annotation pass entirely.
///
/// The returned manifest is not saved; callers decide where it lands.
pub fn augment_static_scenes(
    manifest: &DatasetManifest,
    root: &Path,
    n_extra: usize,
    seed: u64,
) -> Result<DatasetManifest, SynthError> {
    if manifest.split != Split::Train {
        return Err(SynthError::Manifest(
            "static-scene augmentation only applies to the train split".to_string(),
        ));
    }
    let mut out = manifest.clone();
    for k in 0..n_extra {
        let mut scene_cfg = manifest.scene_template.clone();
        scene_cfg.seed = mix_seed(seed, k as u64);
        scene_cfg.moving_fraction = 0.0;
        let frames = generate_frames(&scene_cfg)?;
        let scene_id = format!("aug_static_{k:04}");
        out.records
            .extend(write_scene(root, Split::Train, &scene_id, &scene_cfg, &frames, true, true)?);
    }
    Ok(out)
}

/// Annotation sidecar serialized as `frame_<k>_ann.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameAnnotationFile {
    pub frame_index: usize,
    pub annotations: Vec<MotionAnnotation>,
    pub warnings: Vec<String>,
}

/// Loads one scene's frames back from disk as annotation inputs.
struct SceneOnDisk {
    metas: Vec<FrameMeta>,
    scans: Vec<LidarScan>,
    boxes: Vec<Vec<OrientedBox3>>,
}

fn load_scene(root: &Path, split: Split, scene_id: &str) -> Result<SceneOnDisk, SynthError> {
    let dir = root.join(split.dir_name()).join(scene_id);
    let mut stems: Vec<String> = Vec::new();
    let entries = fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".json") {
            if stem.starts_with("frame_") && !stem.ends_with("_ann") {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(SynthError::Manifest(format!("no frame metadata under {}", dir.display())));
    }

    let mut scene = SceneOnDisk { metas: Vec::new(), scans: Vec::new(), boxes: Vec::new() };
    for stem in &stems {
        let meta: FrameMeta = read_json(&dir.join(format!("{stem}.json")))?;
        let points = read_lidar_txt(&dir.join(format!("{stem}.txt")))?;
        scene.scans.push(LidarScan {
            timestamp: meta.timestamp,
            points,
            sensor_pose: meta.lidar_pose.clone(),
        });
        scene.boxes.push(meta.objects.iter().map(|o| o.box3.clone()).collect());
        scene.metas.push(meta);
    }
    Ok(scene)
}

fn copy_scene_files(
    src_root: &Path,
    dst_root: &Path,
    split: Split,
    scene_id: &str,
) -> Result<(), SynthError> {
    let src = src_root.join(split.dir_name()).join(scene_id);
    let dst = dst_root.join(split.dir_name()).join(scene_id);
    fs::create_dir_all(&dst).map_err(|e| io_err(&dst, e))?;
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(&src).map_err(|e| io_err(&src, e))? {
        let entry = entry.map_err(|e| io_err(&src, e))?;
        names.push(entry.file_name().to_string_lossy().into_owned());
    }
    names.sort();
    for name in names {
        fs::copy(src.join(&name), dst.join(&name)).map_err(|e| io_err(&dst.join(&name), e))?;
    }
    Ok(())
}

/// Runs the LiDAR annotation pipeline over every scene in a manifest and
/// writes `frame_<k>_label.pgm` and `frame_<k>_ann.json` next to the
/// frames. Records gain label_mask and annotation paths.
///
/// With `out_root` different from `root`, scene files are copied over
/// first and the dataset under `root` stays untouched. Augmented records
/// already label themselves with their analytic masks and are skipped.
pub fn annotate_dataset(
    manifest: &DatasetManifest,
    root: &Path,
    out_root: &Path,
    cfg: &MotionConfig,
) -> Result<DatasetManifest, SynthError> {
    let mut out = manifest.clone();
    let mut scene_splits: BTreeMap<&str, Split> = BTreeMap::new();
    for record in &manifest.records {
        scene_splits.entry(record.scene_id.as_str()).or_insert(manifest.split);
    }

    let copying = out_root != root;
    let mut label_paths: BTreeMap<(String, usize), (String, String)> = BTreeMap::new();
    for (&scene_id, &split) in &scene_splits {
        let augmented = manifest
            .records
            .iter()
            .any(|r| r.scene_id == scene_id && r.augmented);
        if copying {
            copy_scene_files(root, out_root, split, scene_id)?;
        }
        if augmented {
            continue;
        }
        let scene = load_scene(if copying { out_root } else { root }, split, scene_id)?;
        let payloads: Vec<FramePayload<'_>> = scene
            .metas
            .iter()
            .zip(&scene.scans)
            .zip(&scene.boxes)
            .map(|((meta, scan), boxes)| FramePayload {
                frame_index: meta.frame_index,
                timestamp: meta.timestamp,
                boxes,
                scan,
                cam_pose: meta.camera_pose.clone(),
            })
            .collect();
        let results = annotate_scene(&payloads, cfg, &manifest.camera);

        let rel_dir = format!("{}/{scene_id}", split.dir_name());
        let dir = out_root.join(&rel_dir);
        for (meta, result) in scene.metas.iter().zip(&results) {
            let stem = frame_stem(meta.frame_index);
            let label_rel = format!("{rel_dir}/{stem}_label.pgm");
            let ann_rel = format!("{rel_dir}/{stem}_ann.json");
            result.mask.write_pgm(&dir.join(format!("{stem}_label.pgm")))?;
            let sidecar = FrameAnnotationFile {
                frame_index: meta.frame_index,
                annotations: result.annotations.clone(),
                warnings: result.warnings.clone(),
            };
            write_json(&dir.join(format!("{stem}_ann.json")), &sidecar)?;
            label_paths.insert((scene_id.to_string(), meta.frame_index), (label_rel, ann_rel));
        }
    }

    for record in &mut out.records {
        if let Some((label, ann)) = label_paths.get(&(record.scene_id.clone(), record.frame_index))
        {
            record.label_mask = Some(label.clone());
            record.annotation = Some(ann.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FisheyeIntrinsics;

    fn small_fisheye() -> Camera {
        Camera::Fisheye(
            FisheyeIntrinsics::new(48, 32, 24.0, 16.0, 14.0, -1.2, 0.0, 0.0, 1.6).unwrap(),
        )
    }

    fn small_cfg(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            n_frames: 3,
            dt: 0.25,
            n_vehicles: 2,
            n_pedestrians: 1,
            moving_fraction: 0.5,
            camera: small_fisheye(),
            ego_speed: 0.0,
            lidar_rays: 512,
            pair_stride: 1,
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = small_cfg(1);
        cfg.n_frames = 1;
        assert!(cfg.validate().is_err());
        cfg = small_cfg(1);
        cfg.dt = 0.0;
        assert!(cfg.validate().is_err());
        cfg = small_cfg(1);
        cfg.moving_fraction = 1.5;
        assert!(cfg.validate().is_err());
        cfg = small_cfg(1);
        cfg.lidar_rays = 17;
        assert!(cfg.validate().is_err());
        cfg = small_cfg(1);
        cfg.pair_stride = 3;
        assert!(cfg.validate().is_err());
        assert!(small_cfg(1).validate().is_ok());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_frames(&small_cfg(7)).unwrap();
        let b = generate_frames(&small_cfg(7)).unwrap();
        assert_eq!(a.len(), b.len());
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.image.data(), fb.image.data());
            assert_eq!(fa.gt_mask.data(), fb.gt_mask.data());
            assert_eq!(fa.lidar.points.len(), fb.lidar.points.len());
            for (pa, pb) in fa.lidar.points.iter().zip(&fb.lidar.points) {
                assert_eq!(pa, pb);
            }
        }
    }

    #[test]
    fn zero_moving_fraction_gives_empty_masks() {
        let mut cfg = small_cfg(3);
        cfg.moving_fraction = 0.0;
        let frames = generate_frames(&cfg).unwrap();
        for frame in &frames {
            assert!(frame.objects.iter().all(|o| !o.moving));
            assert_eq!(frame.gt_mask.moving_pixel_count(), 0);
        }
    }

    #[test]
    fn full_moving_fraction_marks_every_object() {
        let mut cfg = small_cfg(4);
        cfg.moving_fraction = 1.0;
        let frames = generate_frames(&cfg).unwrap();
        assert!(frames[0].objects.iter().all(|o| o.moving));
        assert!(frames[0].objects.iter().all(|o| o.velocity.norm() > 0.0));
    }

    #[test]
    fn moving_objects_translate_between_frames() {
        let mut cfg = small_cfg(5);
        cfg.moving_fraction = 1.0;
        let frames = generate_frames(&cfg).unwrap();
        for (o0, o1) in frames[0].objects.iter().zip(&frames[1].objects) {
            let expected = o0.box3.center + o0.velocity * cfg.dt;
            assert!((o1.box3.center - expected).norm() < 1e-12);
            assert_eq!(o0.box3.yaw, o1.box3.yaw);
        }
    }

    #[test]
    fn straight_ego_path_moves_along_z() {
        let pose = EgoPath::Straight.pose_at(2.0, 1.5);
        assert!((pose.translation() - Point3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
        let fwd = pose.rotate(&Point3::new(0.0, 0.0, 1.0));
        assert!((fwd - Point3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn arc_ego_path_stays_on_circle() {
        for &left in &[false, true] {
            let radius = 12.0;
            let path = EgoPath::Arc { radius, left };
            let center = Point3::new(if left { -radius } else { radius }, 0.0, 0.0);
            for k in 0..8 {
                let pose = path.pose_at(3.0, k as f64 * 0.4);
                let r = (pose.translation() - center).norm();
                assert!((r - radius).abs() < 1e-9, "radius drifted to {r}");
                // Heading is tangent: velocity direction equals body +z.
                let phi = 3.0 * k as f64 * 0.4 / radius;
                let expected = if left {
                    Point3::new(-phi.sin(), 0.0, phi.cos())
                } else {
                    Point3::new(phi.sin(), 0.0, phi.cos())
                };
                let fwd = pose.rotate(&Point3::new(0.0, 0.0, 1.0));
                assert!((fwd - expected).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn camera_mount_sits_above_and_ahead_of_ego() {
        let frames = generate_frames(&small_cfg(6)).unwrap();
        let cam_t = frames[0].camera_pose.translation();
        assert!((cam_t - Point3::new(0.0, -1.3, 0.8)).norm() < 1e-12);
        let lidar_t = frames[0].lidar_pose.translation();
        assert!((lidar_t - Point3::new(0.0, -1.9, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn pair_stride_pairs_the_right_frames() {
        let mut cfg = small_cfg(8);
        cfg.n_frames = 5;
        cfg.pair_stride = 2;
        let frames = generate_frames(&cfg).unwrap();
        let samples = generate_scene(&cfg).unwrap();
        assert_eq!(samples.len(), 3);
        for (s, k) in samples.iter().zip(2usize..) {
            assert_eq!(s.frame_index, k);
            assert_eq!(s.image_t.data(), frames[k].image.data());
            assert_eq!(s.image_t_minus_1.data(), frames[k - 2].image.data());
        }
    }

    /// Signed distance from a point to the surface of an oriented box.
    fn box_surface_distance(p: &Point3, box3: &OrientedBox3) -> f64 {
        let q = yaw_matrix(box3.yaw).transpose() * (p - box3.center);
        let r = Point3::new(
            q.x.abs() - box3.half_extents.x,
            q.y.abs() - box3.half_extents.y,
            q.z.abs() - box3.half_extents.z,
        );
        let outside = Point3::new(r.x.max(0.0), r.y.max(0.0), r.z.max(0.0)).norm();
        let inside = r.x.max(r.y).max(r.z).min(0.0);
        (outside + inside).abs()
    }

    #[test]
    fn lidar_points_lie_on_box_or_ground() {
        let frames = generate_frames(&small_cfg(9)).unwrap();
        let mut checked = 0;
        for frame in &frames {
            for p in &frame.lidar.points {
                let world = frame.lidar.sensor_pose.transform(p);
                let on_ground = world.y.abs() < 1e-6;
                let on_box = frame
                    .objects
                    .iter()
                    .any(|o| box_surface_distance(&world, &o.box3) < 1e-6);
                assert!(on_ground || on_box, "stray LiDAR point at {world:?}");
                checked += 1;
            }
        }
        assert!(checked > 100, "only {checked} LiDAR points generated");
    }

    #[test]
    fn rendered_mask_agrees_with_reprojected_hit_points() {
        // One moving vehicle dead ahead with the ego parked: for every mask
        // pixel, the ray-cast hit point must project straight back into that
        // pixel, tying unproject and project together on real scene content.
        let camera = small_fisheye();
        let camera_pose = Pose::from_yaw_translation(0.0, Point3::new(0.0, -1.3, 0.8));
        let box3 = OrientedBox3::new(
            1,
            ObjectClass::Vehicle,
            Point3::new(0.5, -0.75, 3.5),
            Point3::new(0.9, 0.75, 2.2),
            0.3,
        )
        .unwrap();
        let objects =
            vec![RenderObject { box3, albedo: [200, 40, 40], moving: true }];
        let (_, mask) = render_view(&camera, &camera_pose, &objects);
        assert!(mask.moving_pixel_count() > 20, "vehicle should be visible");

        let origin = *camera_pose.translation();
        let world_to_cam = camera_pose.invert();
        for v in 0..mask.height() {
            for u in 0..mask.width() {
                if mask.get(u, v) == 0 {
                    continue;
                }
                let px = Pixel::new(u as f64 + 0.5, v as f64 + 0.5);
                let dir = camera_pose.rotate(&camera.unproject(&px).unwrap());
                let hit = nearest_hit(&origin, &dir, &objects);
                let t = match hit {
                    Hit::Object { t, index: 0 } => t,
                    other => panic!("mask pixel ({u},{v}) hit {other:?}"),
                };
                let p_world = origin + t * dir;
                let back = camera.project(&world_to_cam.transform(&p_world)).unwrap();
                assert!(
                    (back.u - px.u).abs() < 1e-6 && (back.v - px.v).abs() < 1e-6,
                    "pixel ({u},{v}) reprojected to ({}, {})",
                    back.u,
                    back.v
                );
            }
        }
    }

    #[test]
    fn projected_surface_samples_land_inside_the_mask() {
        // Dense points on the box surface, projected through the camera,
        // must land in silhouette pixels: the forward projection and the
        // ray-cast silhouette describe the same set.
        let camera = small_fisheye();
        let camera_pose = Pose::from_yaw_translation(0.0, Point3::new(0.0, -1.3, 0.8));
        let box3 = OrientedBox3::new(
            1,
            ObjectClass::Vehicle,
            Point3::new(0.0, -0.75, 5.0),
            Point3::new(0.9, 0.75, 2.2),
            0.0,
        )
        .unwrap();
        let objects =
            vec![RenderObject { box3: box3.clone(), albedo: [10, 200, 10], moving: true }];
        let (_, mask) = render_view(&camera, &camera_pose, &objects);
        let origin = *camera_pose.translation();
        let world_to_cam = camera_pose.invert();
        let rot = yaw_matrix(box3.yaw);

        let mut tested = 0;
        let mut exact = 0;
        let n = 40;
        for face in 0..6 {
            for a in 0..=n {
                for b in 0..=n {
                    let fa = -1.0 + 2.0 * a as f64 / n as f64;
                    let fb = -1.0 + 2.0 * b as f64 / n as f64;
                    let local = match face {
                        0 => Point3::new(1.0, fa, fb),
                        1 => Point3::new(-1.0, fa, fb),
                        2 => Point3::new(fa, 1.0, fb),
                        3 => Point3::new(fa, -1.0, fb),
                        4 => Point3::new(fa, fb, 1.0),
                        _ => Point3::new(fa, fb, -1.0),
                    };
                    let p = box3.center
                        + rot * local.component_mul(&box3.half_extents);
                    // Only front-facing surface points: the ray from the
                    // camera must reach this point before anything else.
                    let dir = p - origin;
                    let t_surf = dir.norm();
                    let dir = dir / t_surf;
                    match nearest_hit(&origin, &dir, &objects) {
                        Hit::Object { t, .. } if (t - t_surf).abs() < 1e-6 => {}
                        _ => continue,
                    }
                    let px = match camera.project(&world_to_cam.transform(&p)) {
                        Ok(px) => px,
                        Err(_) => continue,
                    };
                    let (u, v) = (px.u.floor() as i64, px.v.floor() as i64);
                    if u < 0 || v < 0 || u >= mask.width() as i64 || v >= mask.height() as i64 {
                        continue;
                    }
                    tested += 1;
                    if mask.get(u as u32, v as u32) == 1 {
                        exact += 1;
                        continue;
                    }
                    // A projected point can fall in a pixel whose center ray
                    // just misses the box; those stay within one pixel of the
                    // silhouette boundary.
                    let near = (-1..=1).any(|dv| {
                        (-1..=1).any(|du| {
                            let (nu, nv) = (u + du, v + dv);
                            nu >= 0
                                && nv >= 0
                                && nu < mask.width() as i64
                                && nv < mask.height() as i64
                                && mask.get(nu as u32, nv as u32) == 1
                        })
                    });
                    assert!(near, "surface point projected to ({u}, {v}) far from the silhouette");
                }
            }
        }
        assert!(tested > 500, "only {tested} surface samples landed in frame");
        assert!(
            exact as f64 >= 0.9 * tested as f64,
            "only {exact} of {tested} samples hit silhouette pixels directly"
        );
    }

    #[test]
    fn split_indices_honors_the_seventy_thirty_example() {
        let (train, test) = split_indices(10, 0.7, 11).unwrap();
        assert_eq!(train.len(), 7);
        assert_eq!(test.len(), 3);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_indices_rejects_degenerate_splits() {
        assert!(split_indices(2, 0.7, 0).is_err());
        assert!(split_indices(10, 0.0, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    #[test]
    fn split_indices_is_seed_deterministic() {
        let a = split_indices(100, 0.7, 42).unwrap();
        let b = split_indices(100, 0.7, 42).unwrap();
        assert_eq!(a, b);
        let c = split_indices(100, 0.7, 43).unwrap();
        assert_ne!(a.0, c.0, "different seeds should shuffle differently");
    }

    #[test]
    fn mix_seed_spreads_indices() {
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..100 {
            assert!(seen.insert(mix_seed(99, i)));
        }
    }

    #[test]
    fn dataset_generation_writes_a_loadable_tree() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            seed: 21,
            n_scenes: 4,
            train_fraction: 0.7,
            static_scene_fraction: 0.25,
            scene: small_cfg(0),
        };
        let combined = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(combined.train.records.len(), 3 * 2);
        assert_eq!(combined.test.records.len(), 2);

        let reloaded = CombinedManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(reloaded.train.records.len(), combined.train.records.len());
        let train_only = DatasetManifest::load(&dir.path().join("manifest_train.json")).unwrap();
        assert_eq!(train_only.split, Split::Train);

        // Scene-atomic split: no scene id appears in both manifests.
        let train_ids: std::collections::BTreeSet<_> =
            combined.train.records.iter().map(|r| r.scene_id.clone()).collect();
        for record in &combined.test.records {
            assert!(!train_ids.contains(&record.scene_id));
        }

        for record in combined.train.records.iter().chain(&combined.test.records) {
            for rel in [&record.image_t, &record.image_t_minus_1, &record.lidar, &record.meta] {
                assert!(dir.path().join(rel).exists(), "missing {rel}");
            }
            let mask = SegmentationMask::read_pgm(&dir.path().join(&record.gt_mask)).unwrap();
            assert_eq!(mask.width(), cfg.scene.camera.width());
        }
    }

    #[test]
    fn dataset_generation_is_byte_identical_across_runs() {
        let cfg = DatasetConfig {
            seed: 33,
            n_scenes: 3,
            train_fraction: 0.6,
            static_scene_fraction: 0.0,
            scene: small_cfg(0),
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = generate_dataset(&cfg, dir_a.path()).unwrap();
        generate_dataset(&cfg, dir_b.path()).unwrap();
        for name in ["manifest.json", "manifest_train.json", "manifest_test.json"] {
            assert_eq!(
                fs::read(dir_a.path().join(name)).unwrap(),
                fs::read(dir_b.path().join(name)).unwrap(),
                "{name} differs between runs"
            );
        }
        let record = &a.train.records[0];
        for rel in [&record.image_t, &record.lidar, &record.gt_mask, &record.meta] {
            assert_eq!(
                fs::read(dir_a.path().join(rel)).unwrap(),
                fs::read(dir_b.path().join(rel)).unwrap(),
                "{rel} differs between runs"
            );
        }
    }

    #[test]
    fn augment_appends_static_scenes_with_zero_masks() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            seed: 5,
            n_scenes: 3,
            train_fraction: 0.6,
            static_scene_fraction: 0.0,
            scene: small_cfg(0),
        };
        let combined = generate_dataset(&cfg, dir.path()).unwrap();
        let unchanged = augment_static_scenes(&combined.train, dir.path(), 0, 9).unwrap();
        assert_eq!(unchanged.records.len(), combined.train.records.len());

        let augmented = augment_static_scenes(&combined.train, dir.path(), 2, 9).unwrap();
        let extra: Vec<_> = augmented.records.iter().filter(|r| r.augmented).collect();
        assert_eq!(extra.len(), 2 * cfg.scene.samples_per_scene());
        for record in extra {
            assert!(record.static_only);
            let label = record.label_mask.as_ref().expect("augmented labels come from gt");
            let mask = SegmentationMask::read_pgm(&dir.path().join(label)).unwrap();
            assert_eq!(mask.moving_pixel_count(), 0);
        }
        assert!(augment_static_scenes(&combined.test, dir.path(), 1, 9).is_err());
    }

    #[test]
    fn annotate_dataset_fills_label_and_annotation_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut scene = small_cfg(0);
        scene.n_frames = 4;
        scene.lidar_rays = 2048;
        let cfg = DatasetConfig {
            seed: 12,
            n_scenes: 3,
            train_fraction: 0.6,
            static_scene_fraction: 0.0,
            scene,
        };
        let combined = generate_dataset(&cfg, dir.path()).unwrap();
        let annotated =
            annotate_dataset(&combined.train, dir.path(), dir.path(), &MotionConfig::default())
                .unwrap();
        for record in &annotated.records {
            let label = record.label_mask.as_ref().expect("label path set");
            let ann = record.annotation.as_ref().expect("annotation path set");
            let mask = SegmentationMask::read_pgm(&dir.path().join(label)).unwrap();
            assert_eq!(mask.width(), cfg.scene.camera.width());
            let sidecar: FrameAnnotationFile = read_json(&dir.path().join(ann)).unwrap();
            assert_eq!(sidecar.frame_index, record.frame_index);
        }
    }

    #[test]
    fn annotate_dataset_with_out_root_copies_and_leaves_source_clean() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        let mut scene = small_cfg(0);
        scene.n_frames = 3;
        scene.lidar_rays = 1024;
        let cfg = DatasetConfig {
            seed: 13,
            n_scenes: 3,
            train_fraction: 0.6,
            static_scene_fraction: 0.0,
            scene,
        };
        let combined = generate_dataset(&cfg, src.path()).unwrap();
        let annotated =
            annotate_dataset(&combined.train, src.path(), dst.path(), &MotionConfig::default())
                .unwrap();
        let record = &annotated.records[0];
        assert!(dst.path().join(&record.image_t).exists());
        assert!(dst.path().join(record.label_mask.as_ref().unwrap()).exists());
        assert!(!src.path().join(record.label_mask.as_ref().unwrap()).exists());
    }
}
