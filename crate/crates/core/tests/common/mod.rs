#![allow(dead_code)]

pub mod graph;
pub mod metrics;

use nalgebra::Vector3;
use objslam::scene::{look_at, NoiseConfig, PoseRecord, Scenario, SceneObject, WireframeModel};
use objslam::se3::Pose;

pub fn boxed(label: &str) -> WireframeModel {
    WireframeModel::cuboid(label, 0.24, 0.18, 0.12)
}

/// Camera circling a box at the origin, `radius` m away and 0.4 m up,
/// advancing `speed` m/s along the circle.
pub fn orbit(frames: usize, radius: f64, speed: f64, noise: NoiseConfig, seed: u64) -> Scenario {
    let rate = speed / 30.0 / radius;
    let cams: Vec<Pose> = (0..frames)
        .map(|k| {
            let a = -0.6 + rate * k as f64;
            look_at(
                &Vector3::new(radius * a.cos(), radius * a.sin(), 0.4),
                &Vector3::zeros(),
            )
        })
        .collect();
    let obj = SceneObject {
        model: boxed("box"),
        pose: PoseRecord::from_pose(&Pose::from_axis_angle(
            Vector3::new(0.0, 0.0, 0.3),
            Vector3::zeros(),
        )),
    };
    Scenario::from_poses("orbit", &cams, vec![obj], noise, seed)
}

/// Camera sliding along world x, looking down at a box 1 m away.
pub fn slide(frames: usize, step: f64, noise: NoiseConfig, seed: u64) -> Scenario {
    let cams: Vec<Pose> = (0..frames)
        .map(|k| {
            let x = step * k as f64;
            look_at(&Vector3::new(x, -0.8, 0.6), &Vector3::new(x, 0.0, 0.0))
        })
        .collect();
    let obj = SceneObject {
        model: WireframeModel::cuboid("box", 0.4, 0.3, 0.2),
        pose: PoseRecord::from_pose(&Pose::from_axis_angle(
            Vector3::new(0.0, 0.0, 0.5),
            Vector3::zeros(),
        )),
    };
    Scenario::from_poses("slide", &cams, vec![obj], noise, seed)
}
