//! Stock scenarios: three tabletop objects, each with a plain and an occluded
//! sequence.
//!
//! Plain sequences orbit the object slowly with short partial occlusions. In
//! the occluded sequences the camera additionally pans away so the object
//! leaves the image behind a full-occlusion window, then comes back closer and
//! from the other side, where an untracked estimate is far from the truth.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use super::{
    look_at, NoiseConfig, Occlusion, PoseRecord, Scenario, ScenarioError, SceneObject, StampedPose,
    WireframeModel, DEFAULT_FRAME_PERIOD,
};
use crate::rng;
use crate::se3::{CameraIntrinsics, Pose};

pub const FRAMES: usize = 360;

/// Camera placement relative to the object at one knot of the trajectory.
#[derive(Debug, Clone, Copy)]
struct Knot {
    frame: usize,
    /// Orbit angle around the object (degrees).
    azimuth: f64,
    /// Horizontal distance to the object (meters).
    distance: f64,
    /// Camera height above the table (meters).
    height: f64,
    /// Pan away from the object, positive to the right (degrees).
    pan: f64,
}

const fn k(frame: usize, azimuth: f64, distance: f64, height: f64, pan: f64) -> Knot {
    Knot {
        frame,
        azimuth,
        distance,
        height,
        pan,
    }
}

const PLAIN: [Knot; 6] = [
    k(0, -30.0, 0.90, 0.45, 0.0),
    k(70, -22.0, 0.86, 0.42, 4.0),
    k(150, -8.0, 0.78, 0.44, -4.0),
    k(230, 8.0, 0.70, 0.40, 3.0),
    k(300, 20.0, 0.62, 0.40, 0.0),
    k(359, 30.0, 0.58, 0.42, -2.0),
];

const OCCLUDED: [Knot; 9] = [
    k(0, -30.0, 0.90, 0.45, 0.0),
    k(50, -16.0, 0.88, 0.43, 3.0),
    k(100, -12.0, 0.85, 0.42, 0.0),
    k(135, -10.0, 0.85, 0.42, 30.0),
    k(155, -6.0, 0.78, 0.41, 55.0),
    k(185, 0.0, 0.72, 0.40, -20.0),
    k(200, 2.0, 0.70, 0.40, -30.0),
    k(265, 10.0, 0.52, 0.38, -10.0),
    k(359, 25.0, 0.50, 0.40, -5.0),
];

/// Frames of the full-occlusion window in the occluded sequences.
pub const FULL_OCCLUSION: (usize, usize) = (135, 200);

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn interpolate(knots: &[Knot], frame: usize) -> Knot {
    let i = knots.iter().rposition(|kn| kn.frame <= frame).unwrap_or(0);
    if i + 1 >= knots.len() {
        return knots[knots.len() - 1];
    }
    let (a, b) = (knots[i], knots[i + 1]);
    let s = smoothstep((frame - a.frame) as f64 / (b.frame - a.frame) as f64);
    let lerp = |x: f64, y: f64| x + (y - x) * s;
    Knot {
        frame,
        azimuth: lerp(a.azimuth, b.azimuth),
        distance: lerp(a.distance, b.distance),
        height: lerp(a.height, b.height),
        pan: lerp(a.pan, b.pan),
    }
}

fn camera_at(knot: &Knot, target: &Vector3<f64>, frame: usize) -> Pose {
    let az = knot.azimuth.to_radians();
    let t = frame as f64 * DEFAULT_FRAME_PERIOD;
    // Slow hand-held wobble, identical for every run of a scenario.
    let wobble = Vector3::new(
        0.004 * (2.1 * t).sin(),
        0.003 * (1.7 * t + 0.5).sin(),
        0.003 * (2.9 * t + 1.1).sin(),
    );
    let eye = target
        + Vector3::new(
            knot.distance * az.cos(),
            knot.distance * az.sin(),
            knot.height - target.z,
        )
        + wobble;
    let base = look_at(&eye, target);
    let (s, c) = knot.pan.to_radians().sin_cos();
    let pan = Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
    Pose::new(base.rotation() * pan, eye)
}

fn trajectory(knots: &[Knot], target: &Vector3<f64>) -> Vec<StampedPose> {
    (0..FRAMES)
        .map(|f| {
            StampedPose::new(
                f as f64 * DEFAULT_FRAME_PERIOD,
                &camera_at(&interpolate(knots, f), target, f),
            )
        })
        .collect()
}

fn background(seed: u64) -> Vec<[f64; 3]> {
    let mut r = rng::stream(seed, 0xB6, 0);
    let mut pts = Vec::with_capacity(400);
    while pts.len() < 300 {
        let (x, y) = (r.random_range(-1.2..1.2), r.random_range(-1.2..1.2));
        if f64::hypot(x, y) > 0.25 {
            pts.push([x, y, 0.0]);
        }
    }
    for _ in 0..100 {
        pts.push([-1.5, r.random_range(-1.5..1.5), r.random_range(0.0..1.2)]);
    }
    pts
}

struct Spec {
    name: &'static str,
    model: fn() -> WireframeModel,
    seed: u64,
    occluded: bool,
}

fn large_box() -> WireframeModel {
    WireframeModel::cuboid("large-box", 0.28, 0.20, 0.10)
}

fn small_box() -> WireframeModel {
    WireframeModel::cuboid("small-box", 0.16, 0.07, 0.05)
}

fn tall_carton() -> WireframeModel {
    WireframeModel::carton("tall-carton", 0.095, 0.095, 0.20, 0.035)
}

const SPECS: [Spec; 6] = [
    Spec {
        name: "large-box",
        model: large_box,
        seed: 1,
        occluded: false,
    },
    Spec {
        name: "occluded-large-box",
        model: large_box,
        seed: 2,
        occluded: true,
    },
    Spec {
        name: "small-box",
        model: small_box,
        seed: 3,
        occluded: false,
    },
    Spec {
        name: "occluded-small-box",
        model: small_box,
        seed: 4,
        occluded: true,
    },
    Spec {
        name: "tall-carton",
        model: tall_carton,
        seed: 5,
        occluded: false,
    },
    Spec {
        name: "occluded-tall-carton",
        model: tall_carton,
        seed: 6,
        occluded: true,
    },
];

fn build(spec: &Spec) -> Scenario {
    let model = (spec.model)();
    let label = model.label.clone();
    let bottom = model
        .landmarks
        .iter()
        .map(|l| l.position[2])
        .fold(f64::INFINITY, f64::min);
    let center = Vector3::new(0.0, 0.0, -bottom);
    let object_pose = Pose::from_axis_angle(Vector3::new(0.0, 0.0, 15f64.to_radians()), center);
    let (knots, occlusions): (&[Knot], Vec<Occlusion>) = if spec.occluded {
        (
            &OCCLUDED,
            vec![
                Occlusion {
                    label: label.clone(),
                    start: 40,
                    end: 70,
                    fraction: 0.35,
                },
                Occlusion {
                    label: label.clone(),
                    start: FULL_OCCLUSION.0,
                    end: FULL_OCCLUSION.1,
                    fraction: 1.0,
                },
            ],
        )
    } else {
        (
            &PLAIN,
            vec![
                Occlusion {
                    label: label.clone(),
                    start: 90,
                    end: 120,
                    fraction: 0.3,
                },
                Occlusion {
                    label: label.clone(),
                    start: 250,
                    end: 270,
                    fraction: 0.4,
                },
            ],
        )
    };
    Scenario {
        name: spec.name.to_string(),
        frame_period: DEFAULT_FRAME_PERIOD,
        seed: spec.seed,
        intrinsics: CameraIntrinsics::default(),
        noise: NoiseConfig::default(),
        trajectory: trajectory(knots, &center),
        objects: vec![SceneObject {
            model,
            pose: PoseRecord::from_pose(&object_pose),
        }],
        occlusions,
        background_points: background(spec.seed),
    }
}

pub fn builtin_names() -> Vec<&'static str> {
    SPECS.iter().map(|s| s.name).collect()
}

pub fn builtin_scenarios() -> Vec<Scenario> {
    SPECS.iter().map(build).collect()
}

pub fn builtin(name: &str) -> Result<Scenario, ScenarioError> {
    SPECS
        .iter()
        .find(|s| s.name == name)
        .map(build)
        .ok_or_else(|| ScenarioError::Unknown(name.to_string()))
}

pub fn occluded_names() -> Vec<&'static str> {
    SPECS
        .iter()
        .filter(|s| s.occluded)
        .map(|s| s.name)
        .collect()
}
