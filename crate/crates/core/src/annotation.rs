//! Semi-automatic moving-object annotation from LiDAR and 3D boxes.
//!
//! Per frame and per object the pipeline is: collect the LiDAR points inside
//! the object's oriented box, classify the object as moving or static from
//! the box-center track, project the points into the image, take the 2D
//! convex hull, and rasterize it. The frame mask is the union of the hulls
//! of moving objects; static objects are recorded but contribute no pixels.
//! A failure on one object (too few points, degenerate hull, missing track)
//! skips that object with a warning record and never aborts the frame.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{vec3_serde, Camera, GeometryError, Pixel, Point3, Pose};
use crate::mask::SegmentationMask;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("convex hull is degenerate ({0} points after dropping collinear ones)")]
    DegenerateHull(usize),
    #[error("track has {0} entries, need at least 2")]
    InsufficientTrack(usize),
    #[error("track timestamps are not strictly increasing at index {0}")]
    NonMonotonicTime(usize),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("lidar file {path}: {message}")]
    LidarFormat { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Pedestrian,
    Vehicle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionLabel {
    Moving,
    Static,
}

/// Oriented 3D box in the world frame: yaw about the world vertical (+y),
/// half extents along the box axes. The identifier is stable across frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox3 {
    pub object_id: u64,
    pub class_tag: ObjectClass,
    #[serde(with = "vec3_serde")]
    pub center: Point3,
    #[serde(with = "vec3_serde")]
    pub half_extents: Point3,
    pub yaw: f64,
}

impl OrientedBox3 {
    pub fn new(
        object_id: u64,
        class_tag: ObjectClass,
        center: Point3,
        half_extents: Point3,
        yaw: f64,
    ) -> Result<Self, AnnotationError> {
        if !(half_extents.x > 0.0 && half_extents.y > 0.0 && half_extents.z > 0.0) {
            return Err(AnnotationError::InvalidBox(format!(
                "half extents must be positive, got {half_extents:?}"
            )));
        }
        if !(-std::f64::consts::PI..=std::f64::consts::PI).contains(&yaw) {
            return Err(AnnotationError::InvalidBox(format!("yaw {yaw} outside [-pi, pi]")));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(AnnotationError::InvalidBox("non-finite center".into()));
        }
        Ok(OrientedBox3 { object_id, class_tag, center, half_extents, yaw })
    }

    /// Boundary-inclusive membership test for a world-frame point.
    pub fn contains(&self, p: &Point3) -> bool {
        let q = crate::geometry::yaw_matrix(self.yaw).transpose() * (p - self.center);
        q.x.abs() <= self.half_extents.x
            && q.y.abs() <= self.half_extents.y
            && q.z.abs() <= self.half_extents.z
    }
}

/// One LiDAR sweep: points in the sensor frame plus the sensor's world pose.
#[derive(Debug, Clone)]
pub struct LidarScan {
    pub timestamp: f64,
    pub points: Vec<Point3>,
    pub sensor_pose: Pose,
}

/// Thresholds for the motion decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionConfig {
    /// Mean centroid speed above which an object counts as moving, m/s.
    pub v_min: f64,
    /// Minimum LiDAR points inside the box for a valid annotation.
    pub min_points: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig { v_min: 0.3, min_points: 5 }
    }
}

/// One annotated object in one frame. The hull is counter-clockwise in
/// (u, v) coordinates (y down, so clockwise on screen), strictly convex:
/// every cross product of consecutive edges is positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionAnnotation {
    pub object_id: u64,
    pub label: MotionLabel,
    pub hull: Vec<Pixel>,
    pub frame_index: usize,
}

/// World-frame LiDAR points that fall inside the box (boundary inclusive).
pub fn extract_points_in_box(scan: &LidarScan, bbox: &OrientedBox3) -> Vec<Point3> {
    scan.points
        .iter()
        .map(|p| scan.sensor_pose.transform(p))
        .filter(|p| bbox.contains(p))
        .collect()
}

/// Classifies a box-center track as moving or static.
///
/// Speed is the path length of the centers divided by the elapsed time;
/// the object is moving iff that exceeds `v_min`.
pub fn classify_motion(
    track: &[(f64, OrientedBox3)],
    cfg: &MotionConfig,
) -> Result<MotionLabel, AnnotationError> {
    if track.len() < 2 {
        return Err(AnnotationError::InsufficientTrack(track.len()));
    }
    for i in 1..track.len() {
        if track[i].0 <= track[i - 1].0 {
            return Err(AnnotationError::NonMonotonicTime(i));
        }
    }
    let mut dist = 0.0;
    for w in track.windows(2) {
        dist += (w[1].1.center - w[0].1.center).norm();
    }
    let elapsed = track[track.len() - 1].0 - track[0].0;
    let speed = dist / elapsed;
    Ok(if speed > cfg.v_min { MotionLabel::Moving } else { MotionLabel::Static })
}

/// Projects world points into the camera; points that fail to project
/// (out of FOV, degenerate, behind a pinhole camera) are dropped.
pub fn project_object_points(points: &[Point3], cam_pose: &Pose, camera: &Camera) -> Vec<Pixel> {
    let world_to_cam = cam_pose.invert();
    points
        .iter()
        .filter_map(|p| {
            let p_cam = world_to_cam.transform(p);
            match camera.project(&p_cam) {
                Ok(px) => Some(px),
                Err(
                    GeometryError::AngleOutOfFov { .. }
                    | GeometryError::DegeneratePoint
                    | GeometryError::BehindCamera { .. },
                ) => None,
                // Remaining variants cannot come out of project().
                Err(_) => None,
            }
        })
        .collect()
}

fn cross(o: &Pixel, a: &Pixel, b: &Pixel) -> f64 {
    (a.u - o.u) * (b.v - o.v) - (a.v - o.v) * (b.u - o.u)
}

/// Andrew's monotone chain. Returns the hull counter-clockwise in (u, v)
/// coordinates starting at the lexicographically smallest vertex, with
/// collinear points removed. Fewer than 3 surviving vertices is an error.
pub fn convex_hull(points: &[Pixel]) -> Result<Vec<Pixel>, AnnotationError> {
    let mut pts: Vec<Pixel> = points.to_vec();
    pts.sort_by(|a, b| a.u.total_cmp(&b.u).then(a.v.total_cmp(&b.v)));
    pts.dedup_by(|a, b| a.u == b.u && a.v == b.v);
    if pts.len() < 3 {
        return Err(AnnotationError::DegenerateHull(pts.len()));
    }
    let mut hull: Vec<Pixel> = Vec::with_capacity(pts.len() + 1);
    // Lower chain, then upper chain over the reversed order. Popping on
    // cross <= 0 keeps strictly convex turns only.
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Pixel>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for p in iter {
            while hull.len() >= start + 2
                && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop(); // The chain's last point repeats as the next chain's first.
    }
    if hull.len() < 3 {
        return Err(AnnotationError::DegenerateHull(hull.len()));
    }
    Ok(hull)
}

/// True if `hull` is convex and counter-clockwise in (u, v) coordinates.
pub fn is_convex_ccw(hull: &[Pixel]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    let n = hull.len();
    (0..n).all(|i| cross(&hull[i], &hull[(i + 1) % n], &hull[(i + 2) % n]) >= 0.0)
}

/// Fills a convex hull: a pixel (u, v) is set iff its center
/// (u + 0.5, v + 0.5) lies inside or on the hull (half-plane test against
/// every edge). Iteration is limited to the hull's bounding box.
pub fn rasterize_hull(hull: &[Pixel], width: u32, height: u32) -> SegmentationMask {
    let mut mask = SegmentationMask::zeros(width, height);
    if hull.len() < 3 {
        return mask;
    }
    let (mut min_u, mut max_u) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_v, mut max_v) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in hull {
        min_u = min_u.min(p.u);
        max_u = max_u.max(p.u);
        min_v = min_v.min(p.v);
        max_v = max_v.max(p.v);
    }
    // Pixel centers are at integer + 0.5; clamp the candidate range to the image.
    let u_lo = ((min_u - 0.5).ceil().max(0.0)) as i64;
    let u_hi = ((max_u - 0.5).floor().min(width as f64 - 1.0)) as i64;
    let v_lo = ((min_v - 0.5).ceil().max(0.0)) as i64;
    let v_hi = ((max_v - 0.5).floor().min(height as f64 - 1.0)) as i64;
    let n = hull.len();
    for v in v_lo..=v_hi {
        for u in u_lo..=u_hi {
            let c = Pixel::new(u as f64 + 0.5, v as f64 + 0.5);
            let inside = (0..n).all(|i| cross(&hull[i], &hull[(i + 1) % n], &c) >= 0.0);
            if inside {
                mask.set(u as u32, v as u32, 1);
            }
        }
    }
    mask
}

/// Everything the annotator produced for one frame.
#[derive(Debug, Clone)]
pub struct FrameAnnotationResult {
    pub annotations: Vec<MotionAnnotation>,
    pub mask: SegmentationMask,
    pub warnings: Vec<String>,
}

/// Box-center tracks keyed by object id, as (timestamp, box) pairs.
pub type TrackMap = BTreeMap<u64, Vec<(f64, OrientedBox3)>>;

/// Annotates one frame given the scene-level tracks.
///
/// Every per-object failure is recorded as a warning and the object is
/// skipped; the frame mask is the union of the moving objects' hulls.
pub fn annotate_frame(
    frame_index: usize,
    boxes: &[OrientedBox3],
    scan: &LidarScan,
    tracks: &TrackMap,
    cfg: &MotionConfig,
    camera: &Camera,
    cam_pose: &Pose,
) -> FrameAnnotationResult {
    let mut annotations = Vec::new();
    let mut warnings = Vec::new();
    let mut mask = SegmentationMask::zeros(camera.width(), camera.height());
    let warn = |warnings: &mut Vec<String>, object_id: u64, message: String| {
        let text = format!("frame {frame_index} object {object_id}: {message}");
        log::warn!("{text}");
        warnings.push(text);
    };
    for bbox in boxes {
        let id = bbox.object_id;
        let track = tracks.get(&id).map(Vec::as_slice).unwrap_or(&[]);
        let label = match classify_motion(track, cfg) {
            Ok(label) => label,
            Err(e) => {
                warn(&mut warnings, id, format!("skipped, no motion decision: {e}"));
                continue;
            }
        };
        let points = extract_points_in_box(scan, bbox);
        if points.len() < cfg.min_points {
            warn(
                &mut warnings,
                id,
                format!("skipped, {} lidar points < min_points {}", points.len(), cfg.min_points),
            );
            continue;
        }
        let pixels = project_object_points(&points, cam_pose, camera);
        let hull = match convex_hull(&pixels) {
            Ok(hull) => hull,
            Err(e) => {
                warn(&mut warnings, id, format!("skipped, {e}"));
                continue;
            }
        };
        if label == MotionLabel::Moving {
            mask.union_with(&rasterize_hull(&hull, camera.width(), camera.height()));
        }
        annotations.push(MotionAnnotation { object_id: id, label, hull, frame_index });
    }
    FrameAnnotationResult { annotations, mask, warnings }
}

/// One frame's inputs to the annotator.
#[derive(Debug, Clone)]
pub struct FramePayload<'a> {
    pub frame_index: usize,
    pub timestamp: f64,
    pub boxes: &'a [OrientedBox3],
    pub scan: &'a LidarScan,
    pub cam_pose: Pose,
}

/// Builds box tracks across the given frames.
pub fn build_tracks(frames: &[FramePayload<'_>]) -> TrackMap {
    let mut tracks: TrackMap = BTreeMap::new();
    for f in frames {
        for b in f.boxes {
            tracks.entry(b.object_id).or_default().push((f.timestamp, b.clone()));
        }
    }
    tracks
}

/// Annotates every frame of a scene. Track context comes from all frames,
/// so objects visible in at least two frames get a motion decision.
pub fn annotate_scene(
    frames: &[FramePayload<'_>],
    cfg: &MotionConfig,
    camera: &Camera,
) -> Vec<FrameAnnotationResult> {
    let tracks = build_tracks(frames);
    frames
        .iter()
        .map(|f| annotate_frame(f.frame_index, f.boxes, f.scan, &tracks, cfg, camera, &f.cam_pose))
        .collect()
}

/// Writes LiDAR points as plain text, one `x y z` triple per line.
/// Floats use the shortest representation that round-trips exactly.
pub fn write_lidar_txt(path: &Path, points: &[Point3]) -> Result<(), AnnotationError> {
    let mut out = String::new();
    for p in points {
        writeln!(out, "{} {} {}", p.x, p.y, p.z).expect("write to string");
    }
    fs::write(path, out).map_err(|source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_lidar_txt(path: &Path) -> Result<Vec<Point3>, AnnotationError> {
    let text = fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let format_err = |message: String| AnnotationError::LidarFormat {
        path: path.display().to_string(),
        message,
    };
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_ascii_whitespace();
        let mut next = || -> Result<f64, AnnotationError> {
            it.next()
                .ok_or_else(|| format_err(format!("line {}: expected 3 fields", i + 1)))?
                .parse()
                .map_err(|e| format_err(format!("line {}: {e}", i + 1)))
        };
        let (x, y, z) = (next()?, next()?, next()?);
        if it.next().is_some() {
            return Err(format_err(format!("line {}: more than 3 fields", i + 1)));
        }
        points.push(Point3::new(x, y, z));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn unit_box(center: Point3, yaw: f64) -> OrientedBox3 {
        OrientedBox3::new(1, ObjectClass::Vehicle, center, Point3::new(0.5, 0.5, 0.5), yaw).unwrap()
    }

    fn track_along_x(step: f64, dt: f64, n: usize) -> Vec<(f64, OrientedBox3)> {
        (0..n)
            .map(|i| (i as f64 * dt, unit_box(Point3::new(i as f64 * step, 0.0, 0.0), 0.0)))
            .collect()
    }

    #[test]
    fn axis_aligned_box_membership() {
        let b = unit_box(Point3::zeros(), 0.0);
        assert!(b.contains(&Point3::new(0.4, 0.4, 0.4)));
        assert!(!b.contains(&Point3::new(0.6, 0.0, 0.0)));
        // Boundary inclusive.
        assert!(b.contains(&Point3::new(0.5, 0.5, 0.5)));
    }

    #[test]
    fn rotated_box_membership() {
        // Box yawed 45 degrees: the point (0.6, 0, 0.0) rotated into the box
        // frame is (0.6/sqrt2, 0, -0.6/sqrt2), inside the half extents.
        let b = unit_box(Point3::zeros(), FRAC_PI_4);
        assert!(b.contains(&Point3::new(0.6, 0.0, 0.0)));
        // Along the box diagonal in world space it leaves the box sooner.
        let d = Point3::new(FRAC_PI_4.cos(), 0.0, FRAC_PI_4.sin());
        assert!(!b.contains(&(d * 0.8)));
    }

    #[test]
    fn extract_applies_sensor_pose() {
        // Sensor sits at world (10, 0, 0); a point at sensor-frame origin
        // lands at world (10,0,0), inside a box centered there.
        let scan = LidarScan {
            timestamp: 0.0,
            points: vec![Point3::zeros(), Point3::new(5.0, 0.0, 0.0)],
            sensor_pose: Pose::from_yaw_translation(0.0, Point3::new(10.0, 0.0, 0.0)),
        };
        let b = unit_box(Point3::new(10.0, 0.0, 0.0), 0.0);
        let inside = extract_points_in_box(&scan, &b);
        assert_eq!(inside.len(), 1);
        assert_eq!(inside[0], Point3::new(10.0, 0.0, 0.0));
    }

    #[test]
    fn classify_moving_at_5_mps() {
        // 0.5 m per frame at 10 fps: speed 5 m/s.
        let track = track_along_x(0.5, 0.1, 4);
        let label = classify_motion(&track, &MotionConfig::default()).unwrap();
        assert_eq!(label, MotionLabel::Moving);
    }

    #[test]
    fn classify_static_drift_below_threshold() {
        // 0.2 m of drift over 1 s: speed 0.2 < v_min 0.3.
        let track = track_along_x(0.1, 0.5, 3);
        let label = classify_motion(&track, &MotionConfig::default()).unwrap();
        assert_eq!(label, MotionLabel::Static);
    }

    #[test]
    fn classify_requires_two_entries_and_monotonic_time() {
        let cfg = MotionConfig::default();
        let short = track_along_x(1.0, 0.1, 1);
        assert!(matches!(
            classify_motion(&short, &cfg),
            Err(AnnotationError::InsufficientTrack(1))
        ));
        let mut bad = track_along_x(1.0, 0.1, 3);
        bad[2].0 = bad[1].0;
        assert!(matches!(classify_motion(&bad, &cfg), Err(AnnotationError::NonMonotonicTime(2))));
    }

    #[test]
    fn hull_of_square_with_interior_point() {
        let pts = vec![
            Pixel::new(0.0, 0.0),
            Pixel::new(4.0, 0.0),
            Pixel::new(4.0, 4.0),
            Pixel::new(0.0, 4.0),
            Pixel::new(2.0, 2.0),
        ];
        let hull = convex_hull(&pts).unwrap();
        assert_eq!(hull.len(), 4);
        assert!(is_convex_ccw(&hull));
        // Starts at the lexicographic minimum and runs counter-clockwise in (u, v).
        assert_eq!((hull[0].u, hull[0].v), (0.0, 0.0));
        assert_eq!((hull[1].u, hull[1].v), (4.0, 0.0));
        assert_eq!((hull[2].u, hull[2].v), (4.0, 4.0));
        assert_eq!((hull[3].u, hull[3].v), (0.0, 4.0));
    }

    #[test]
    fn hull_removes_collinear_points() {
        let pts = vec![
            Pixel::new(0.0, 0.0),
            Pixel::new(2.0, 0.0),
            Pixel::new(4.0, 0.0),
            Pixel::new(4.0, 4.0),
            Pixel::new(0.0, 4.0),
        ];
        let hull = convex_hull(&pts).unwrap();
        assert_eq!(hull.len(), 4, "midpoint of the bottom edge must be dropped");
    }

    #[test]
    fn hull_rejects_degenerate_input() {
        assert!(matches!(
            convex_hull(&[Pixel::new(0.0, 0.0), Pixel::new(1.0, 1.0)]),
            Err(AnnotationError::DegenerateHull(_))
        ));
        let collinear: Vec<Pixel> = (0..5).map(|i| Pixel::new(i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(convex_hull(&collinear), Err(AnnotationError::DegenerateHull(_))));
        let dup = vec![Pixel::new(1.0, 1.0); 6];
        assert!(matches!(convex_hull(&dup), Err(AnnotationError::DegenerateHull(_))));
    }

    #[test]
    fn rasterize_triangle_frozen_pixels() {
        // Triangle (0,0) (4,0) (0,4) on an 8x8 mask. A center (u+.5, v+.5)
        // is inside iff u + v <= 3, worked out by hand: 10 pixels.
        let hull = vec![Pixel::new(0.0, 0.0), Pixel::new(4.0, 0.0), Pixel::new(0.0, 4.0)];
        let mask = rasterize_hull(&hull, 8, 8);
        let mut expected = SegmentationMask::zeros(8, 8);
        for (u, v) in [(0, 0), (1, 0), (2, 0), (3, 0), (0, 1), (1, 1), (2, 1), (0, 2), (1, 2), (0, 3)]
        {
            expected.set(u, v, 1);
        }
        assert_eq!(mask, expected);
        assert_eq!(mask.moving_pixel_count(), 10);
    }

    #[test]
    fn rasterize_clips_to_image() {
        let hull = vec![Pixel::new(-3.0, -3.0), Pixel::new(20.0, -3.0), Pixel::new(-3.0, 20.0)];
        let mask = rasterize_hull(&hull, 4, 4);
        assert_eq!(mask.moving_pixel_count(), 16, "hull covering the image fills it entirely");
    }

    #[test]
    fn annotate_frame_only_moving_objects_mask() {
        // Fisheye camera at the origin looking +z; one moving and one static
        // box ahead, each with a dense point cloud.
        let intr = crate::geometry::FisheyeIntrinsics::new(
            64, 64, 32.0, 32.0, 20.0, 0.0, 0.0, 0.0, 1.5,
        )
        .unwrap();
        let camera = Camera::Fisheye(intr);
        let cam_pose = Pose::identity();
        let mk_box = |id, x: f64| {
            OrientedBox3::new(
                id,
                ObjectClass::Pedestrian,
                Point3::new(x, 0.0, 5.0),
                Point3::new(0.4, 0.8, 0.4),
                0.0,
            )
            .unwrap()
        };
        let mut points = Vec::new();
        for id in 0..2 {
            let cx = if id == 0 { -2.0 } else { 2.0 };
            for i in 0..5 {
                for j in 0..5 {
                    points.push(Point3::new(
                        cx + (i as f64 - 2.0) * 0.1,
                        (j as f64 - 2.0) * 0.3,
                        4.8,
                    ));
                }
            }
        }
        let scan = LidarScan { timestamp: 1.0, points, sensor_pose: Pose::identity() };
        let boxes = vec![mk_box(0, -2.0), mk_box(1, 2.0)];
        // Object 0 moves 1 m/s along x; object 1 stays put.
        let mut tracks: TrackMap = BTreeMap::new();
        for step in 0..2 {
            let t = step as f64;
            tracks.entry(0).or_default().push((t, mk_box(0, -2.0 - t)));
            tracks.entry(1).or_default().push((t, mk_box(1, 2.0)));
        }
        let res = annotate_frame(
            0,
            &boxes,
            &scan,
            &tracks,
            &MotionConfig::default(),
            &camera,
            &cam_pose,
        );
        assert!(res.warnings.is_empty(), "{:?}", res.warnings);
        assert_eq!(res.annotations.len(), 2);
        let moving: Vec<_> =
            res.annotations.iter().filter(|a| a.label == MotionLabel::Moving).collect();
        assert_eq!(moving.len(), 1);
        assert_eq!(moving[0].object_id, 0);
        // The mask equals the moving hull's rasterization alone.
        let expected = rasterize_hull(&moving[0].hull, 64, 64);
        assert_eq!(res.mask, expected);
        assert!(res.mask.moving_pixel_count() > 0);
        // Moving hull sits on the -x side of the principal point.
        assert!(moving[0].hull.iter().all(|p| p.u < 32.0));
    }

    #[test]
    fn annotate_frame_skips_sparse_objects_with_warning() {
        let intr = crate::geometry::FisheyeIntrinsics::new(
            64, 64, 32.0, 32.0, 20.0, 0.0, 0.0, 0.0, 1.5,
        )
        .unwrap();
        let camera = Camera::Fisheye(intr);
        let b = unit_box(Point3::new(0.0, 0.0, 5.0), 0.0);
        let scan = LidarScan {
            timestamp: 0.0,
            points: vec![Point3::new(0.0, 0.0, 5.0); 3],
            sensor_pose: Pose::identity(),
        };
        let mut tracks: TrackMap = BTreeMap::new();
        tracks.insert(1, vec![(0.0, b.clone()), (1.0, b.clone())]);
        let res = annotate_frame(
            7,
            std::slice::from_ref(&b),
            &scan,
            &tracks,
            &MotionConfig::default(),
            &camera,
            &Pose::identity(),
        );
        assert!(res.annotations.is_empty());
        assert_eq!(res.warnings.len(), 1);
        assert!(res.warnings[0].contains("min_points"), "{}", res.warnings[0]);
        assert_eq!(res.mask.moving_pixel_count(), 0);
    }

    #[test]
    fn lidar_txt_round_trip_is_exact() {
        let pts = vec![
            Point3::new(1.5, -2.25, 3.0619775404930095),
            Point3::new(0.1, 0.2, 0.30000000000000004),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.txt");
        write_lidar_txt(&path, &pts).unwrap();
        let back = read_lidar_txt(&path).unwrap();
        assert_eq!(back, pts, "shortest float formatting must round-trip bit-exactly");
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap().split(' ').count(), 3);
    }
}
