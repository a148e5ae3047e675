//! Edge-based 6-DOF object tracker: a particle filter over `T^{c,o}` whose
//! particles are polished by robust Gauss-Newton against image edges.

use nalgebra::{Matrix6, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::Exec;
use crate::recognizer::{PnPResult, RecognitionError};
use crate::rng::{self, label_key, streams};
use crate::scene::{EdgeMap, WireframeModel};
use crate::se3::{point_jacobian, CameraIntrinsics, Covariance6, Pose, Twist, Vec6};

const CORRIDOR_HALF_WIDTH: f64 = 1.5;
const LOST_INFLATION: f64 = 100.0;
const COV_FLOOR_TRANSLATION: f64 = 1e-3;
const COV_FLOOR_ROTATION: f64 = 0.1 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackerError {
    #[error("invalid tracker configuration: {0}")]
    Config(String),
    #[error("tracker has not been initialized")]
    NotInitialized,
    #[error("recognition failed: {0}")]
    Recognition(#[from] RecognitionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub n_particles: usize,
    /// Arc-length spacing of model samples (meters).
    pub sampling_step: f64,
    /// Half-length of the orthogonal edge search (pixels).
    pub max_edge_error: f64,
    pub health_threshold: f64,
    /// Per-frame particle diffusion, translation (meters).
    pub diffusion_translation: f64,
    /// Per-frame particle diffusion, rotation (radians).
    pub diffusion_rotation: f64,
    /// Spread of the particle likelihood in mean residual (pixels).
    pub likelihood_sigma: f64,
    pub irls_iterations: usize,
    /// Huber threshold of the refinement (pixels).
    pub huber_scale: f64,
    /// Fraction of the last frame's motion carried into the prediction.
    pub velocity_decay: f64,
    /// Largest refinement step per iteration (meters, radians).
    pub max_step_translation: f64,
    pub max_step_rotation: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            n_particles: 20,
            sampling_step: 0.01,
            max_edge_error: 32.0,
            health_threshold: 0.5,
            diffusion_translation: 0.005,
            diffusion_rotation: 0.5f64.to_radians(),
            likelihood_sigma: 3.0,
            irls_iterations: 8,
            huber_scale: 5.0,
            velocity_decay: 0.5,
            max_step_translation: 0.02,
            max_step_rotation: 2f64.to_radians(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        let positive = [
            self.sampling_step,
            self.max_edge_error,
            self.likelihood_sigma,
            self.huber_scale,
        ];
        if self.n_particles == 0 || positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(TrackerError::Config(
                "particle count, step, search bound, sigma and huber scale must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.velocity_decay) {
            return Err(TrackerError::Config(format!(
                "velocity decay {} outside [0, 1]",
                self.velocity_decay
            )));
        }
        if !(self.max_step_translation > 0.0 && self.max_step_rotation > 0.0) {
            return Err(TrackerError::Config(
                "refinement step bounds must be positive".into(),
            ));
        }
        if !(self.diffusion_translation >= 0.0 && self.diffusion_rotation >= 0.0) {
            return Err(TrackerError::Config(
                "diffusion must be non-negative".into(),
            ));
        }
        if !(self.health_threshold > 0.0 && self.health_threshold <= 1.0) {
            return Err(TrackerError::Config(format!(
                "health threshold {} outside (0, 1]",
                self.health_threshold
            )));
        }
        Ok(())
    }
}

/// Point on a model edge with the edge direction, both in the object frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelPoint {
    pub point: Vector3<f64>,
    pub direction: Vector3<f64>,
}

/// Walks every segment at `step` arc-length intervals, starting at the first
/// endpoint.
pub fn model_points(model: &WireframeModel, step: f64) -> Vec<ModelPoint> {
    let mut out = Vec::new();
    for i in 0..model.segments.len() {
        let (a, b) = model.segment(i);
        let d = b - a;
        let len = d.norm();
        if len == 0.0 {
            continue;
        }
        let dir = d / len;
        let n = (len / step + 1e-9).floor() as usize + 1;
        out.extend((0..n).map(|k| ModelPoint {
            point: a + dir * (step * k as f64),
            direction: dir,
        }));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSample {
    pub pixel: Vector2<f64>,
    /// Unit normal of the projected edge.
    pub normal: Vector2<f64>,
    pub visible: bool,
}

fn project_sample(mp: &ModelPoint, pose: &Pose, intr: &CameraIntrinsics) -> ImageSample {
    let pc = pose.transform_point(&mp.point);
    let hidden = ImageSample {
        pixel: Vector2::zeros(),
        normal: Vector2::zeros(),
        visible: false,
    };
    let Ok(pixel) = intr.project(&pc) else {
        return hidden;
    };
    let d = intr.project_jacobian(&pc) * (pose.rotation() * mp.direction);
    let len = d.norm();
    if len < 1e-12 {
        return ImageSample { pixel, ..hidden };
    }
    ImageSample {
        pixel,
        normal: Vector2::new(-d.y, d.x) / len,
        visible: intr.contains(&pixel),
    }
}

/// Projects the model samples of `model` at `pose`.
pub fn sample_model_points(
    model: &WireframeModel,
    pose: &Pose,
    intr: &CameraIntrinsics,
    step: f64,
) -> Vec<ImageSample> {
    model_points(model, step)
        .iter()
        .map(|mp| project_sample(mp, pose, intr))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeResidual {
    pub visible: bool,
    pub valid: bool,
    /// Signed distance to the matched edge along the sample normal (pixels).
    pub residual: f64,
}

/// Nearest edge pixel along the normal line of one sample, restricted to a
/// narrow corridor around the line.
pub fn search_edge(sample: &ImageSample, edges: &EdgeMap, max_err: f64) -> Option<f64> {
    let n = sample.normal;
    let t = Vector2::new(-n.y, n.x);
    let mut best: Option<f64> = None;
    let consider = |step: f64, best: &mut Option<f64>| {
        let centre = sample.pixel + n * step;
        for off in [-CORRIDOR_HALF_WIDTH, 0.0, CORRIDOR_HALF_WIDTH] {
            let probe = centre + t * off;
            for e in edges.near(probe.x, probe.y) {
                let d = Vector2::new(e.u, e.v) - sample.pixel;
                let along = d.dot(&n);
                if d.dot(&t).abs() <= CORRIDOR_HALF_WIDTH
                    && along.abs() < max_err
                    && best.is_none_or(|b: f64| along.abs() < b.abs())
                {
                    *best = Some(along);
                }
            }
        }
    };
    let reach = max_err.ceil() as i64;
    for k in 0..=reach {
        // Pixels in unvisited cells are at least k - 3 px away along the normal.
        if best.is_some_and(|b| b.abs() < k as f64 - 3.0) {
            break;
        }
        consider(k as f64, &mut best);
        if k > 0 {
            consider(-(k as f64), &mut best);
        }
    }
    best
}

pub fn edge_residuals(samples: &[ImageSample], edges: &EdgeMap, max_err: f64) -> Vec<EdgeResidual> {
    samples
        .iter()
        .map(|s| {
            if !s.visible {
                return EdgeResidual {
                    visible: false,
                    valid: false,
                    residual: 0.0,
                };
            }
            match search_edge(s, edges, max_err) {
                Some(r) => EdgeResidual {
                    visible: true,
                    valid: true,
                    residual: r,
                },
                None => EdgeResidual {
                    visible: true,
                    valid: false,
                    residual: 0.0,
                },
            }
        })
        .collect()
}

/// Valid, visible and health of a residual set.
pub fn health_of(res: &[EdgeResidual]) -> (usize, usize, f64) {
    let visible = res.iter().filter(|r| r.visible).count();
    let valid = res.iter().filter(|r| r.valid).count();
    (valid, visible, valid as f64 / visible.max(1) as f64)
}

fn huber(r: f64, k: f64) -> f64 {
    let a = r.abs();
    if a <= k {
        0.5 * r * r
    } else {
        k * (a - 0.5 * k)
    }
}

/// Robust cost of a residual set. Samples without a match, including those
/// out of view, are charged as if they sat at the search bound, so moving
/// the model out of the image never pays.
pub fn huber_cost(res: &[EdgeResidual], cfg: &TrackerConfig) -> f64 {
    res.iter()
        .map(|r| {
            huber(
                if r.valid {
                    r.residual
                } else {
                    cfg.max_edge_error
                },
                cfg.huber_scale,
            )
        })
        .sum()
}

/// Outcome of refining one pose hypothesis.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub pose: Pose,
    pub residuals: Vec<EdgeResidual>,
    /// Cost before the first iteration followed by the cost after every
    /// accepted iteration.
    pub costs: Vec<f64>,
}

fn evaluate(
    points: &[ModelPoint],
    pose: &Pose,
    edges: &EdgeMap,
    intr: &CameraIntrinsics,
    max_err: f64,
) -> (Vec<ImageSample>, Vec<EdgeResidual>) {
    let samples: Vec<ImageSample> = points
        .iter()
        .map(|mp| project_sample(mp, pose, intr))
        .collect();
    let res = edge_residuals(&samples, edges, max_err);
    (samples, res)
}

/// Iteratively reweighted Gauss-Newton on the Huber cost. A step that
/// raises the cost is discarded and ends the refinement.
pub fn refine(
    points: &[ModelPoint],
    init: &Pose,
    edges: &EdgeMap,
    intr: &CameraIntrinsics,
    cfg: &TrackerConfig,
) -> Refinement {
    let mut pose = *init;
    let (mut samples, mut res) = evaluate(points, &pose, edges, intr, cfg.max_edge_error);
    let mut cost = huber_cost(&res, cfg);
    let mut costs = vec![cost];
    for _ in 0..cfg.irls_iterations {
        let mut h = Matrix6::zeros();
        let mut g = Vec6::zeros();
        let mut used = 0;
        for ((mp, s), r) in points.iter().zip(&samples).zip(&res) {
            if !r.valid {
                continue;
            }
            let pc = pose.transform_point(&mp.point);
            let js = intr.project_jacobian(&pc) * point_jacobian(&pose, &mp.point);
            let a: Vec6 = js.transpose() * s.normal;
            let w = if r.residual.abs() <= cfg.huber_scale {
                1.0
            } else {
                cfg.huber_scale / r.residual.abs()
            };
            h += a * a.transpose() * w;
            g += a * (w * r.residual);
            used += 1;
        }
        if used < 6 {
            break;
        }
        for i in 0..6 {
            h[(i, i)] += 1e-9 * (1.0 + h[(i, i)]);
        }
        let Some(mut delta) = h.cholesky().map(|c| c.solve(&g)) else {
            break;
        };
        let (dt, dr) = (
            delta.fixed_rows::<3>(0).norm(),
            delta.fixed_rows::<3>(3).norm(),
        );
        delta *= (cfg.max_step_translation / dt)
            .min(cfg.max_step_rotation / dr)
            .min(1.0);
        if !delta.iter().all(|v| v.is_finite()) || delta.norm() < 1e-12 {
            break;
        }
        let trial = pose.retract(&delta);
        let (ts, tr) = evaluate(points, &trial, edges, intr, cfg.max_edge_error);
        let tc = huber_cost(&tr, cfg);
        if tc > cost {
            break;
        }
        pose = trial;
        samples = ts;
        res = tr;
        cost = tc;
        costs.push(cost);
    }
    Refinement {
        pose,
        residuals: res,
        costs,
    }
}

/// Particle likelihood before normalization: Gaussian in the mean matched
/// residual, scaled by the fraction of all model samples matched.
pub fn likelihood(res: &[EdgeResidual], sigma: f64) -> f64 {
    let (valid, _, _) = health_of(res);
    if valid == 0 {
        return 0.0;
    }
    let ratio = valid as f64 / res.len() as f64;
    let mean_abs = res
        .iter()
        .filter(|r| r.valid)
        .map(|r| r.residual.abs())
        .sum::<f64>()
        / valid as f64;
    (-mean_abs * mean_abs / (2.0 * sigma * sigma)).exp() * ratio
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Pose>,
    pub weights: Vec<f64>,
}

impl ParticleSet {
    pub fn uniform(particles: Vec<Pose>) -> Self {
        let n = particles.len();
        Self {
            particles,
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Normalizes the weights, falling back to uniform when they vanish.
    pub fn normalize(&mut self) {
        let total: f64 = self.weights.iter().sum();
        if total > 0.0 && total.is_finite() {
            self.weights.iter_mut().for_each(|w| *w /= total);
        } else {
            let n = self.weights.len() as f64;
            self.weights.iter_mut().for_each(|w| *w = 1.0 / n);
        }
    }

    /// Systematic resampling with offset `u0 in [0, 1/N)`; weights become
    /// uniform.
    pub fn resample(&mut self, u0: f64) {
        let n = self.len();
        let step = 1.0 / n as f64;
        let mut out = Vec::with_capacity(n);
        let mut cum = self.weights[0];
        let mut i = 0;
        for k in 0..n {
            let u = u0 + k as f64 * step;
            while u > cum && i + 1 < n {
                i += 1;
                cum += self.weights[i];
            }
            out.push(self.particles[i]);
        }
        *self = Self::uniform(out);
    }

    /// Weighted tangent-space mean about the heaviest particle and the
    /// weighted scatter around it.
    pub fn mean_and_scatter(&self) -> (Pose, Matrix6<f64>) {
        let best = self
            .weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let anchor = self.particles[best];
        let offsets: Vec<Vec6> = self
            .particles
            .iter()
            .map(|p| anchor.local(p).unwrap_or_else(|_| Vec6::zeros()))
            .collect();
        let mean: Vec6 = offsets.iter().zip(&self.weights).map(|(o, w)| o * *w).sum();
        let mut scatter = Matrix6::zeros();
        for (o, w) in offsets.iter().zip(&self.weights) {
            let d = o - mean;
            scatter += d * d.transpose() * *w;
        }
        (anchor.retract(&mean), scatter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerOutput {
    pub pose: Pose,
    pub covariance: Covariance6,
    pub health: f64,
    pub valid_points: usize,
    pub visible_points: usize,
}

impl TrackerOutput {
    pub fn is_healthy(&self, threshold: f64) -> bool {
        self.health >= threshold
    }
}

#[derive(Debug, Clone)]
pub struct EbtTracker {
    cfg: TrackerConfig,
    points: Vec<ModelPoint>,
    particles: Option<ParticleSet>,
    rng: ChaCha8Rng,
    health: f64,
    reinitializations: usize,
    /// Left-tangent motion applied to every particle before diffusion.
    velocity: Vec6,
    last_mean: Option<Pose>,
}

impl EbtTracker {
    pub fn new(
        model: &WireframeModel,
        cfg: TrackerConfig,
        seed: u64,
    ) -> Result<Self, TrackerError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            points: model_points(model, cfg.sampling_step),
            particles: None,
            rng: rng::stream(seed ^ label_key(&model.label), streams::TRACKER, 0),
            health: 0.0,
            reinitializations: 0,
            velocity: Vec6::zeros(),
            last_mean: None,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn model_points(&self) -> &[ModelPoint] {
        &self.points
    }

    pub fn is_initialized(&self) -> bool {
        self.particles.is_some()
    }

    pub fn particles(&self) -> Option<&ParticleSet> {
        self.particles.as_ref()
    }

    /// Health reported by the last step, zero after a failed
    /// reinitialization.
    pub fn health(&self) -> f64 {
        self.health
    }

    pub fn reinitializations(&self) -> usize {
        self.reinitializations
    }

    fn perturbation(&mut self, scale: f64) -> Vec6 {
        let (st, sr) = (
            self.cfg.diffusion_translation * scale,
            self.cfg.diffusion_rotation * scale,
        );
        let mut d = Vec6::zeros();
        for i in 0..6 {
            let s = if i < 3 { st } else { sr };
            let z: f64 = self.rng.sample(StandardNormal);
            d[i] = s * z;
        }
        d
    }

    /// Moves every particle to `pose` plus jitter at half the diffusion
    /// scale, with uniform weights, and forgets the motion estimate.
    pub fn reset(&mut self, pose: &Pose) {
        let particles = (0..self.cfg.n_particles)
            .map(|_| pose.retract(&self.perturbation(0.5)))
            .collect();
        self.particles = Some(ParticleSet::uniform(particles));
        self.velocity = Vec6::zeros();
        self.last_mean = None;
    }

    /// Per-frame motion used to predict the particles.
    pub fn velocity(&self) -> &Vec6 {
        &self.velocity
    }

    /// Resets to a recognized pose. A failed recognition leaves the particles
    /// untouched and marks the tracker lost.
    pub fn reinitialize(
        &mut self,
        recog: Result<&PnPResult, RecognitionError>,
    ) -> Result<(), TrackerError> {
        match recog {
            Ok(r) => {
                self.reset(&r.pose);
                self.reinitializations += 1;
                Ok(())
            }
            Err(e) => {
                self.health = 0.0;
                Err(e.into())
            }
        }
    }

    /// One filter update against the edges of a new frame.
    pub fn step(
        &mut self,
        edges: &EdgeMap,
        intr: &CameraIntrinsics,
        exec: Exec,
    ) -> Result<TrackerOutput, TrackerError> {
        let mut set = self.particles.take().ok_or(TrackerError::NotInitialized)?;
        let noise: Vec<Vec6> = (0..set.len()).map(|_| self.perturbation(1.0)).collect();
        let motion = Pose::exp(&Twist::from_vector(&self.velocity));
        let diffused: Vec<Pose> = set
            .particles
            .iter()
            .zip(&noise)
            .map(|(p, d)| motion.compose(p).retract(d))
            .collect();
        let cfg = self.cfg;
        let points = &self.points;
        let refined = exec.map(&diffused, |p| refine(points, p, edges, intr, &cfg));
        set.particles = refined.iter().map(|r| r.pose).collect();
        set.weights = refined
            .iter()
            .zip(&set.weights)
            .map(|(r, w)| w * likelihood(&r.residuals, cfg.likelihood_sigma))
            .collect();
        set.normalize();
        let (mean, scatter) = set.mean_and_scatter();
        if set.effective_sample_size() < set.len() as f64 / 2.0 {
            let u0 = self.rng.random::<f64>() / set.len() as f64;
            set.resample(u0);
        }
        self.particles = Some(set);

        let (_, res) = evaluate(points, &mean, edges, intr, cfg.max_edge_error);
        let (valid, visible, health) = health_of(&res);
        let mut cov = scatter;
        for i in 0..3 {
            cov[(i, i)] += COV_FLOOR_TRANSLATION * COV_FLOOR_TRANSLATION;
            cov[(i + 3, i + 3)] += COV_FLOOR_ROTATION * COV_FLOOR_ROTATION;
        }
        if visible == 0 {
            cov *= LOST_INFLATION;
        }
        self.health = health;
        let healthy = health >= cfg.health_threshold;
        self.velocity = match (&self.last_mean, healthy) {
            (Some(prev), true) => mean
                .compose(&prev.inverse())
                .log()
                .map_or(Vec6::zeros(), |t| t.to_vector() * cfg.velocity_decay),
            _ => Vec6::zeros(),
        };
        self.last_mean = healthy.then_some(mean);
        Ok(TrackerOutput {
            pose: mean,
            covariance: Covariance6::from_matrix_unchecked(crate::se3::symmetrize(&cov)),
            health,
            valid_points: valid,
            visible_points: visible,
        })
    }
}
