//! Deterministic synthetic tabletop world.
//!
//! A [`Scenario`] holds a ground-truth camera trajectory (`T^{w,c}` per frame),
//! wireframe object models with their world poses (`T^{w,o}`), an occlusion
//! schedule and the noise settings of the simulated sensors. Rendering and
//! correspondence generation live in [`render`]; the six stock scenarios in
//! [`builtin`].
//!
//! Scenarios serialize to JSON. Poses are stored as plain number records
//! (translation followed by axis-angle) and are converted to [`Pose`] on
//! demand, so a write/read cycle reproduces every field bit for bit.

pub mod builtin;
pub mod render;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, streams};
use crate::se3::{CameraIntrinsics, GeometryError, Pose};

pub use render::{generate_correspondences, render_edge_map, Correspondence, EdgeMap, EdgePixel};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario '{name}' is invalid: {reason}")]
    Invalid { name: String, reason: String },
    #[error("unknown scenario '{0}'")]
    Unknown(String),
    #[error("unknown object label '{0}'")]
    UnknownObject(String),
    #[error("frame {frame} outside trajectory of {len} frames")]
    FrameOutOfRange { frame: usize, len: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scenario json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scenario io: {0}")]
    Io(#[from] std::io::Error),
}

/// Pose as `[tx, ty, tz, rx, ry, rz]`: translation in meters, rotation as an
/// axis-angle vector in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PoseRecord(pub [f64; 6]);

impl PoseRecord {
    pub fn from_pose(p: &Pose) -> Self {
        let t = p.translation();
        let r = p.axis_angle();
        Self([t.x, t.y, t.z, r.x, r.y, r.z])
    }

    pub fn to_pose(&self) -> Pose {
        let a = &self.0;
        Pose::from_axis_angle(
            Vector3::new(a[3], a[4], a[5]),
            Vector3::new(a[0], a[1], a[2]),
        )
    }
}

/// Trajectory sample `[time, tx, ty, tz, rx, ry, rz]` holding `T^{w,c}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StampedPose(pub [f64; 7]);

impl StampedPose {
    pub fn new(time: f64, pose: &Pose) -> Self {
        let r = PoseRecord::from_pose(pose).0;
        Self([time, r[0], r[1], r[2], r[3], r[4], r[5]])
    }

    pub fn time(&self) -> f64 {
        self.0[0]
    }

    pub fn pose(&self) -> Pose {
        let a = &self.0;
        Pose::from_axis_angle(
            Vector3::new(a[4], a[5], a[6]),
            Vector3::new(a[1], a[2], a[3]),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLandmark {
    pub id: u32,
    /// Object-frame position (meters).
    pub position: [f64; 3],
}

/// Object model: straight edges for the tracker and identifiable points for
/// the recognizer, both in the object frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireframeModel {
    pub label: String,
    /// Line segments as endpoint pairs (meters).
    pub segments: Vec<[[f64; 3]; 2]>,
    pub landmarks: Vec<ModelLandmark>,
}

impl WireframeModel {
    /// Axis-aligned box centred on the origin. Landmarks sit on the corners
    /// and at the quarter points of every edge.
    pub fn cuboid(label: &str, dx: f64, dy: f64, dz: f64) -> Self {
        let h = [dx / 2.0, dy / 2.0, dz / 2.0];
        let corner = |i: usize| -> [f64; 3] {
            [
                if i & 1 == 0 { -h[0] } else { h[0] },
                if i & 2 == 0 { -h[1] } else { h[1] },
                if i & 4 == 0 { -h[2] } else { h[2] },
            ]
        };
        let mut segments = Vec::with_capacity(12);
        for i in 0..8usize {
            for bit in [1usize, 2, 4] {
                if i & bit == 0 {
                    segments.push([corner(i), corner(i | bit)]);
                }
            }
        }
        let mut model = Self {
            label: label.to_string(),
            segments,
            landmarks: Vec::new(),
        };
        let points: Vec<[f64; 3]> = (0..8)
            .map(corner)
            .chain(model.edge_points(&[0.25, 0.5, 0.75]))
            .collect();
        model.landmarks = points
            .into_iter()
            .enumerate()
            .map(|(id, position)| ModelLandmark {
                id: id as u32,
                position,
            })
            .collect();
        model
    }

    /// Box with a gable top, like a drinks carton: the cuboid body plus a
    /// ridge and four roof edges.
    pub fn carton(label: &str, dx: f64, dy: f64, body: f64, roof: f64) -> Self {
        let mut model = Self::cuboid(label, dx, dy, body);
        let top = body / 2.0;
        let ridge = [[-dx / 2.0, 0.0, top + roof], [dx / 2.0, 0.0, top + roof]];
        model.segments.push(ridge);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                model.segments.push([
                    [sx * dx / 2.0, sy * dy / 2.0, top],
                    [sx * dx / 2.0, 0.0, top + roof],
                ]);
            }
        }
        let next = model.landmarks.len() as u32;
        for (i, p) in [ridge[0], ridge[1], [0.0, 0.0, top + roof]]
            .into_iter()
            .enumerate()
        {
            model.landmarks.push(ModelLandmark {
                id: next + i as u32,
                position: p,
            });
        }
        model
    }

    fn edge_points(&self, fractions: &[f64]) -> Vec<[f64; 3]> {
        let mut out = Vec::new();
        for [a, b] in &self.segments {
            for &f in fractions {
                out.push([
                    a[0] + f * (b[0] - a[0]),
                    a[1] + f * (b[1] - a[1]),
                    a[2] + f * (b[2] - a[2]),
                ]);
            }
        }
        out
    }

    pub fn segment(&self, i: usize) -> (Vector3<f64>, Vector3<f64>) {
        let [a, b] = self.segments[i];
        (Vector3::from(a), Vector3::from(b))
    }

    /// Segment index and edge parameter in `[0, 1]` of the segment closest to
    /// `point`. Occlusion uses this to hide landmarks consistently with edges.
    pub fn host_segment(&self, point: &Vector3<f64>) -> (usize, f64) {
        let mut best = (0, 0.0, f64::INFINITY);
        for i in 0..self.segments.len() {
            let (a, b) = self.segment(i);
            let d = b - a;
            let len2 = d.norm_squared();
            let t = if len2 > 0.0 {
                ((point - a).dot(&d) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dist = (a + d * t - point).norm();
            if dist < best.2 - 1e-12 {
                best = (i, t, dist);
            }
        }
        (best.0, best.1)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.segments.len() < 3 {
            return Err(format!("model '{}' needs at least 3 segments", self.label));
        }
        if self.landmarks.len() < 4 {
            return Err(format!("model '{}' needs at least 4 landmarks", self.label));
        }
        let finite = self
            .segments
            .iter()
            .flatten()
            .flatten()
            .all(|v| v.is_finite())
            && self
                .landmarks
                .iter()
                .flat_map(|l| l.position)
                .all(|v| v.is_finite());
        if !finite {
            return Err(format!("model '{}' has non-finite coordinates", self.label));
        }
        let pts: Vec<Vector3<f64>> = self
            .landmarks
            .iter()
            .map(|l| Vector3::from(l.position))
            .collect();
        let c = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let mut scatter = nalgebra::Matrix3::zeros();
        for p in &pts {
            scatter += (p - c) * (p - c).transpose();
        }
        let min_eig = scatter.symmetric_eigenvalues().min();
        if min_eig <= 1e-12 {
            return Err(format!("model '{}' landmarks are coplanar", self.label));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub model: WireframeModel,
    /// Ground-truth `T^{w,o}`.
    pub pose: PoseRecord,
}

/// Window during which a fraction of an object is hidden. Frames are
/// inclusive at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub label: String,
    pub start: usize,
    pub end: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Gaussian noise on rendered edge pixels (pixels).
    pub edge_pixel_sigma: f64,
    /// Random clutter segments per frame.
    pub clutter_edge_density: f64,
    /// Fraction of correspondences replaced by random image points.
    pub correspondence_outlier_ratio: f64,
    pub correspondence_pixel_sigma: f64,
    /// Multiplicative odometry scale drift per meter traveled.
    pub vo_translation_drift: f64,
    /// Per-frame odometry rotation noise (radians per axis).
    pub vo_rotation_sigma: f64,
    /// Per-frame odometry translation noise (meters per axis).
    pub vo_translation_sigma: f64,
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            edge_pixel_sigma: 0.0,
            clutter_edge_density: 0.0,
            correspondence_outlier_ratio: 0.0,
            correspondence_pixel_sigma: 0.0,
            vo_translation_drift: 0.0,
            vo_rotation_sigma: 0.0,
            vo_translation_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.edge_pixel_sigma,
            self.clutter_edge_density,
            self.correspondence_outlier_ratio,
            self.correspondence_pixel_sigma,
            self.vo_translation_drift,
            self.vo_rotation_sigma,
            self.vo_translation_sigma,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err("noise parameters must be finite and non-negative".into());
        }
        if self.correspondence_outlier_ratio > 1.0 {
            return Err("correspondence_outlier_ratio must be <= 1".into());
        }
        Ok(())
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            edge_pixel_sigma: 0.5,
            clutter_edge_density: 20.0,
            correspondence_outlier_ratio: 0.2,
            correspondence_pixel_sigma: 1.0,
            vo_translation_drift: 0.02,
            vo_rotation_sigma: 0.002,
            vo_translation_sigma: 0.001,
        }
    }
}

pub const DEFAULT_FRAME_PERIOD: f64 = 1.0 / 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Seconds between frames.
    pub frame_period: f64,
    pub seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub noise: NoiseConfig,
    /// Ground-truth `T^{w,c}` per frame.
    pub trajectory: Vec<StampedPose>,
    pub objects: Vec<SceneObject>,
    pub occlusions: Vec<Occlusion>,
    /// World points standing in for the texture the odometry tracks.
    #[serde(default)]
    pub background_points: Vec<[f64; 3]>,
}

impl Scenario {
    /// Scenario at the default frame rate and intrinsics with no occlusions
    /// or background texture.
    pub fn from_poses(
        name: &str,
        cameras: &[Pose],
        objects: Vec<SceneObject>,
        noise: NoiseConfig,
        seed: u64,
    ) -> Self {
        Self {
            name: name.to_string(),
            frame_period: DEFAULT_FRAME_PERIOD,
            seed,
            intrinsics: CameraIntrinsics::default(),
            noise,
            trajectory: cameras
                .iter()
                .enumerate()
                .map(|(k, p)| StampedPose::new(k as f64 * DEFAULT_FRAME_PERIOD, p))
                .collect(),
            objects,
            occlusions: Vec::new(),
            background_points: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |reason: String| {
            Err(ScenarioError::Invalid {
                name: self.name.clone(),
                reason,
            })
        };
        if self.trajectory.len() < 2 {
            return fail("trajectory needs at least 2 frames".into());
        }
        if !(self.frame_period > 0.0 && self.frame_period.is_finite()) {
            return fail("frame_period must be positive".into());
        }
        if self
            .trajectory
            .iter()
            .flat_map(|s| s.0)
            .any(|v| !v.is_finite())
        {
            return fail("trajectory has non-finite values".into());
        }
        self.intrinsics.validate()?;
        if let Err(e) = self.noise.validate() {
            return fail(e);
        }
        let mut labels = std::collections::HashSet::new();
        for obj in &self.objects {
            if let Err(e) = obj.model.validate() {
                return fail(e);
            }
            if !labels.insert(obj.model.label.as_str()) {
                return fail(format!("duplicate object label '{}'", obj.model.label));
            }
            if obj.pose.0.iter().any(|v| !v.is_finite()) {
                return fail(format!("object '{}' pose is not finite", obj.model.label));
            }
        }
        for occ in &self.occlusions {
            if !labels.contains(occ.label.as_str()) {
                return fail(format!(
                    "occlusion refers to unknown object '{}'",
                    occ.label
                ));
            }
            if occ.start > occ.end || occ.end >= self.trajectory.len() {
                return fail(format!(
                    "occlusion window {}..={} outside trajectory",
                    occ.start, occ.end
                ));
            }
            if !(0.0..=1.0).contains(&occ.fraction) {
                return fail(format!(
                    "occlusion fraction {} outside [0, 1]",
                    occ.fraction
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    /// Ground-truth `T^{w,c}` at `frame`.
    pub fn camera_pose(&self, frame: usize) -> Pose {
        self.trajectory[frame].pose()
    }

    pub fn object(&self, label: &str) -> Result<&SceneObject, ScenarioError> {
        self.objects
            .iter()
            .find(|o| o.model.label == label)
            .ok_or_else(|| ScenarioError::UnknownObject(label.to_string()))
    }

    /// Ground-truth `T^{c,o}` of an object at `frame`.
    pub fn object_in_camera(&self, frame: usize, label: &str) -> Result<Pose, ScenarioError> {
        let obj = self.object(label)?;
        Ok(self.camera_pose(frame).between(&obj.pose.to_pose()))
    }

    /// Relative camera motion `T^{c_{k-1}, c_k}` between frames `k-1` and `k`.
    pub fn ground_truth_relative(&self, k: usize) -> Pose {
        assert!(k >= 1, "relative motion needs k >= 1");
        self.camera_pose(k - 1).between(&self.camera_pose(k))
    }

    /// Ground-truth path length from frame 0 to `frame`.
    pub fn distance_traveled(&self, frame: usize) -> f64 {
        (1..=frame)
            .map(|k| self.ground_truth_relative(k).translation().norm())
            .sum()
    }

    /// Hidden edge-parameter interval `[a, a + f]` of `label` at `frame`, if
    /// an occlusion window is active. The offset `a` is fixed per window and
    /// seed so the occluder does not jump between frames.
    pub fn hidden_range(&self, label: &str, frame: usize) -> Option<(f64, f64)> {
        let (idx, occ) = self
            .occlusions
            .iter()
            .enumerate()
            .filter(|(_, o)| {
                o.label == label && o.start <= frame && frame <= o.end && o.fraction > 0.0
            })
            .max_by(|a, b| a.1.fraction.total_cmp(&b.1.fraction))?;
        let mut r = rng::stream(self.seed, streams::OCCLUSION, idx as u64);
        let u: f64 = r.random();
        let start = u * (1.0 - occ.fraction);
        Some((start, start + occ.fraction))
    }

    pub fn to_json(&self) -> Result<String, ScenarioError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ScenarioError> {
        let scn: Scenario = serde_json::from_str(s)?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<(), ScenarioError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Camera pose looking from `eye` towards `target`, world z up. The camera
/// frame has x right, y down and z along the optical axis.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Pose {
    let forward = (target - eye).normalize();
    let up = Vector3::z();
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let r = nalgebra::Matrix3::from_columns(&[right, down, forward]);
    Pose::new(r, *eye)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn straight_line(n: usize, step: f64) -> Scenario {
        let trajectory = (0..n)
            .map(|k| {
                StampedPose::new(
                    k as f64 / 30.0,
                    &Pose::from_translation(Vector3::new(step * k as f64, 0.0, 0.0)),
                )
            })
            .collect();
        Scenario {
            name: "line".into(),
            frame_period: DEFAULT_FRAME_PERIOD,
            seed: 1,
            intrinsics: CameraIntrinsics::default(),
            noise: NoiseConfig::zero(),
            trajectory,
            objects: vec![SceneObject {
                model: WireframeModel::cuboid("cube", 0.2, 0.2, 0.2),
                pose: PoseRecord::from_pose(&Pose::from_translation(Vector3::new(0.0, 0.0, 1.0))),
            }],
            occlusions: vec![],
            background_points: vec![],
        }
    }

    #[test]
    fn relative_of_static_trajectory_is_identity() {
        let scn = straight_line(5, 0.0);
        for k in 1..5 {
            assert_eq!(scn.ground_truth_relative(k), Pose::identity());
        }
    }

    #[test]
    fn relative_of_x_translation() {
        let scn = straight_line(5, 0.05);
        let rel = scn.ground_truth_relative(3);
        assert!((rel.translation() - Vector3::new(0.05, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn circular_relatives_telescope() {
        let n = 360;
        let trajectory = (0..n)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / n as f64;
                let eye = Vector3::new(a.cos(), a.sin(), 0.3);
                StampedPose::new(k as f64 / 30.0, &look_at(&eye, &Vector3::zeros()))
            })
            .collect();
        let scn = Scenario {
            trajectory,
            ..straight_line(2, 0.0)
        };
        let mut acc = scn.camera_pose(0);
        for k in 1..n {
            acc = acc.compose(&scn.ground_truth_relative(k));
        }
        let (dt, dr) = acc.distance(&scn.camera_pose(n - 1));
        assert!(dt < 1e-9 && dr < 1e-9, "{dt} {dr}");
    }

    #[test]
    fn cuboid_model_is_valid() {
        let m = WireframeModel::cuboid("b", 0.3, 0.2, 0.1);
        assert_eq!(m.segments.len(), 12);
        assert_eq!(m.landmarks.len(), 8 + 36);
        m.validate().unwrap();
        let c = WireframeModel::carton("c", 0.1, 0.1, 0.2, 0.04);
        assert_eq!(c.segments.len(), 17);
        c.validate().unwrap();
    }

    #[test]
    fn flat_landmarks_rejected() {
        let mut m = WireframeModel::cuboid("b", 0.3, 0.2, 0.1);
        for l in &mut m.landmarks {
            l.position[2] = 0.0;
        }
        assert!(m.validate().is_err());
    }

    #[test]
    fn occlusion_window_validation() {
        let mut scn = straight_line(10, 0.01);
        scn.occlusions.push(Occlusion {
            label: "cube".into(),
            start: 5,
            end: 10,
            fraction: 0.5,
        });
        assert!(scn.validate().is_err());
        scn.occlusions[0].end = 9;
        scn.validate().unwrap();
        scn.occlusions[0].fraction = 1.5;
        assert!(scn.validate().is_err());
    }

    #[test]
    fn hidden_range_is_stable_within_window() {
        let mut scn = straight_line(10, 0.01);
        scn.occlusions.push(Occlusion {
            label: "cube".into(),
            start: 2,
            end: 6,
            fraction: 0.4,
        });
        let r = scn.hidden_range("cube", 2).unwrap();
        assert_eq!(scn.hidden_range("cube", 6), Some(r));
        assert!((r.1 - r.0 - 0.4).abs() < 1e-15 && r.0 >= 0.0 && r.1 <= 1.0);
        assert_eq!(scn.hidden_range("cube", 7), None);
    }
}
