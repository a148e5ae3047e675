//! Simulated monocular odometry with an unknown scale and distance-driven
//! drift, plus object-based scale initialization and the keyframe policy.

use std::collections::VecDeque;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recognizer::PnPResult;
use crate::rng::{self, streams};
use crate::scene::{render::landmark_hidden, NoiseConfig, Scenario, ScenarioError};
use crate::se3::{Covariance6, Pose};

/// Relative translations shorter than this cannot fix the scale (meters).
pub const MIN_BASELINE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum VoError {
    #[error(
        "baseline too short for scale initialization (metric {metric} m, odometry {odometry})"
    )]
    Degenerate { metric: f64, odometry: f64 },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoConfig {
    /// Mean landmark disparity required between the first two keyframes
    /// (pixels).
    pub min_disparity: f64,
    /// Travel between keyframes once initialized (meters).
    pub keyframe_baseline: f64,
    pub max_keyframes: usize,
    /// Fewer visible features than this is a tracking failure.
    pub min_features: usize,
    /// Odometry factor noise (meters, radians per axis).
    pub translation_sigma: f64,
    pub rotation_sigma: f64,
}

impl Default for VoConfig {
    fn default() -> Self {
        Self {
            min_disparity: 10.0,
            keyframe_baseline: 0.05,
            max_keyframes: 100,
            min_features: 20,
            translation_sigma: 0.05,
            rotation_sigma: 5f64.to_radians(),
        }
    }
}

/// Relative camera motion `T^{c_{k-1}, c_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OdometryMeasurement {
    pub frame: usize,
    pub relative: Pose,
    pub covariance: Covariance6,
    /// Whether the metric scale had been applied.
    pub scaled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoState {
    /// Multiplier from odometry units to meters, meaningful once
    /// initialized.
    pub scale: f64,
    pub initialized: bool,
    pub keyframes: VecDeque<usize>,
    /// Estimated travel since the last keyframe (meters once initialized).
    pub accumulated_translation: f64,
}

impl Default for VoState {
    fn default() -> Self {
        Self {
            scale: 1.0,
            initialized: false,
            keyframes: VecDeque::new(),
            accumulated_translation: 0.0,
        }
    }
}

impl VoState {
    /// Adds frame `k` as a keyframe when the policy asks for one; returns
    /// whether it did. Before initialization the first frame always becomes
    /// a keyframe and the second needs `disparity >= min_disparity`;
    /// afterwards a keyframe is due every `keyframe_baseline` of travel.
    pub fn keyframe_policy(
        &mut self,
        cfg: &VoConfig,
        k: usize,
        disparity: f64,
        baseline: f64,
    ) -> bool {
        let add = if !self.initialized {
            match self.keyframes.len() {
                0 => true,
                1 => disparity >= cfg.min_disparity,
                _ => false,
            }
        } else {
            baseline >= cfg.keyframe_baseline
        };
        if add {
            self.keyframes.push_back(k);
            while self.keyframes.len() > cfg.max_keyframes {
                self.keyframes.pop_front();
            }
            self.accumulated_translation = 0.0;
        }
        add
    }
}

/// Odometry simulator for one scenario. Each frame's output depends only on
/// the scenario, the frame index and the VO state, never on call order.
#[derive(Debug, Clone)]
pub struct VoSimulator {
    cumulative: Vec<f64>,
    relatives: Vec<Pose>,
    true_scale: f64,
    seed: u64,
    noise: NoiseConfig,
    cfg: VoConfig,
}

impl VoSimulator {
    pub fn new(scn: &Scenario, cfg: VoConfig) -> Self {
        let mut cumulative = vec![0.0; scn.len()];
        let mut relatives = vec![Pose::identity(); scn.len()];
        for k in 1..scn.len() {
            relatives[k] = scn.ground_truth_relative(k);
            cumulative[k] = cumulative[k - 1] + relatives[k].translation().norm();
        }
        let mut r = rng::stream(scn.seed, streams::VO_SCALE, 0);
        let true_scale = r.random_range(0.3..3.0);
        Self {
            cumulative,
            relatives,
            true_scale,
            seed: scn.seed,
            noise: scn.noise,
            cfg,
        }
    }

    pub fn config(&self) -> &VoConfig {
        &self.cfg
    }

    /// Meters per unscaled odometry unit.
    pub fn true_scale(&self) -> f64 {
        self.true_scale
    }

    /// Ground-truth path length up to `frame`.
    pub fn distance(&self, frame: usize) -> f64 {
        self.cumulative[frame]
    }

    pub fn factor_covariance(&self) -> Covariance6 {
        Covariance6::from_sigmas(self.cfg.translation_sigma, self.cfg.rotation_sigma)
    }

    /// Background points and unoccluded object landmarks in view.
    pub fn visible_features(scn: &Scenario, k: usize) -> usize {
        let cam = scn.camera_pose(k);
        let inv = cam.inverse();
        let sees = |p: &Vector3<f64>| {
            scn.intrinsics
                .project(p)
                .is_ok_and(|px| scn.intrinsics.contains(&px))
        };
        let mut n = scn
            .background_points
            .iter()
            .filter(|p| sees(&inv.transform_point(&Vector3::from(**p))))
            .count();
        for obj in &scn.objects {
            let co = cam.between(&obj.pose.to_pose());
            let hidden = scn.hidden_range(&obj.model.label, k);
            n += obj
                .model
                .landmarks
                .iter()
                .map(|l| Vector3::from(l.position))
                .filter(|p| !landmark_hidden(&obj.model, p, hidden) && sees(&co.transform_point(p)))
                .count();
        }
        n
    }

    /// Odometry for frame `k >= 1`, or `None` when too few features are in
    /// view to track.
    pub fn step(&self, scn: &Scenario, k: usize, state: &VoState) -> Option<OdometryMeasurement> {
        assert!(k >= 1 && k < self.relatives.len(), "frame {k} out of range");
        if Self::visible_features(scn, k) < self.cfg.min_features {
            return None;
        }
        Some(self.measure(k, state))
    }

    /// The corrupted relative motion, ignoring feature visibility.
    pub fn measure(&self, k: usize, state: &VoState) -> OdometryMeasurement {
        let gt = &self.relatives[k];
        let mut r = rng::stream(self.seed, streams::VO, k as u64);
        let mut gauss = |s: f64| {
            if s == 0.0 {
                0.0
            } else {
                s * r.sample::<f64, _>(StandardNormal)
            }
        };
        let (sr, st) = (
            self.noise.vo_rotation_sigma,
            self.noise.vo_translation_sigma,
        );
        let dphi = Vector3::new(gauss(sr), gauss(sr), gauss(sr));
        let dt = Vector3::new(gauss(st), gauss(st), gauss(st));
        let mid = 0.5 * (self.cumulative[k - 1] + self.cumulative[k]);
        let metric = gt.translation() * (1.0 + self.noise.vo_translation_drift * mid) + dt;
        let unit = if state.initialized {
            state.scale / self.true_scale
        } else {
            1.0 / self.true_scale
        };
        let rotation = gt.rotation() * crate::se3::so3_exp(&dphi);
        OdometryMeasurement {
            frame: k,
            relative: Pose::new(rotation, metric * unit),
            covariance: self.factor_covariance(),
            scaled: state.initialized,
        }
    }
}

/// Scale from two object observations and the odometry accumulated between
/// them: `T^{c2,c1} = T_2^{c,o} * inv(T_1^{c,o})` gives the metric baseline.
pub fn initialize_scale(
    obs1: &PnPResult,
    obs2: &PnPResult,
    vo_accumulated: &Pose,
) -> Result<f64, VoError> {
    let metric = obs2.pose.compose(&obs1.pose.inverse()).translation().norm();
    let odometry = vo_accumulated.translation().norm();
    if metric < MIN_BASELINE || odometry < MIN_BASELINE {
        return Err(VoError::Degenerate { metric, odometry });
    }
    Ok(metric / odometry)
}

/// Mean image displacement of an object's unoccluded landmarks between two
/// frames, from ground-truth projections.
pub fn disparity(scn: &Scenario, label: &str, a: usize, b: usize) -> Result<f64, ScenarioError> {
    let obj = scn.object(label)?;
    let (pa, pb) = (
        scn.object_in_camera(a, label)?,
        scn.object_in_camera(b, label)?,
    );
    let (ha, hb) = (scn.hidden_range(label, a), scn.hidden_range(label, b));
    let proj = |pose: &Pose, p: &Vector3<f64>| -> Option<Vector2<f64>> {
        scn.intrinsics
            .project(&pose.transform_point(p))
            .ok()
            .filter(|px| scn.intrinsics.contains(px))
    };
    let mut sum = 0.0;
    let mut n = 0usize;
    for l in &obj.model.landmarks {
        let p = Vector3::from(l.position);
        if landmark_hidden(&obj.model, &p, ha) || landmark_hidden(&obj.model, &p, hb) {
            continue;
        }
        if let (Some(ua), Some(ub)) = (proj(&pa, &p), proj(&pb, &p)) {
            sum += (ub - ua).norm();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
