//! Object-level pose graph with covariance gating and tracker feedback.
//!
//! Camera poses are stored camera-to-world (`T^{w,c}`), landmarks as
//! object-to-world (`T^{w,o}`). An object factor predicts the camera-frame
//! object pose `inv(X_k) * L`; an odometry factor predicts the relative
//! motion `inv(X_{k-1}) * X_k`. Residuals are `log(inv(Z) * predicted)`.

mod snapshot;
mod solver;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::se3::{Covariance6, Mat6, Pose, Vec6};
use crate::vo::OdometryMeasurement;

pub use snapshot::{FactorRecord, LandmarkRecord, PoseEntry, Snapshot};
pub use solver::{OptimizeReport, SolverConfig, Termination};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapperError {
    #[error("pose {0} does not exist")]
    MissingPose(usize),
    #[error("landmark {0:?} does not exist")]
    MissingLandmark(String),
    #[error("pose {0} already exists")]
    DuplicatePose(usize),
    #[error("graph is not anchored")]
    NotAnchored,
    #[error("noise covariance is not invertible")]
    Noise,
    #[error("unsupported graph structure: {0}")]
    Structure(String),
    #[error("cost is not finite at the current linearization")]
    Diverged,
    #[error("information matrix is singular")]
    Singular,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Var {
    Pose(usize),
    Landmark(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Prior,
    Odometry,
    Object,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    /// One variable for a prior, two for a between factor.
    pub vars: Vec<Var>,
    pub measurement: Pose,
    pub noise: Covariance6,
    /// `L` with `L^T L = noise^{-1}`.
    pub(crate) sqrt_information: Mat6,
}

impl Factor {
    pub fn new(
        kind: FactorKind,
        vars: Vec<Var>,
        measurement: Pose,
        noise: Covariance6,
    ) -> Result<Self, MapperError> {
        let expected = if kind == FactorKind::Prior { 1 } else { 2 };
        if vars.len() != expected {
            return Err(MapperError::Structure(format!(
                "{kind:?} factor needs {expected} variables"
            )));
        }
        let info = noise.inverse().ok_or(MapperError::Noise)?;
        let chol = info.cholesky().ok_or(MapperError::Noise)?;
        Ok(Self {
            kind,
            vars,
            measurement,
            noise,
            sqrt_information: chol.l().transpose(),
        })
    }

    /// Unwhitened residual given the estimates of the referenced variables.
    pub fn residual(&self, a: &Pose, b: Option<&Pose>) -> Option<Vec6> {
        let predicted = match b {
            Some(b) => a.between(b),
            None => *a,
        };
        self.measurement.local(&predicted).ok()
    }
}

/// Variables and factors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphState {
    pub poses: BTreeMap<usize, Pose>,
    pub landmarks: BTreeMap<String, Pose>,
    pub factors: Vec<Factor>,
}

impl GraphState {
    /// Camera-frame object pose `inv(X_k) * L`.
    pub fn predict_object_pose(&self, frame: usize, label: &str) -> Result<Pose, MapperError> {
        let x = self
            .poses
            .get(&frame)
            .ok_or(MapperError::MissingPose(frame))?;
        let l = self
            .landmarks
            .get(label)
            .ok_or_else(|| MapperError::MissingLandmark(label.to_string()))?;
        Ok(x.between(l))
    }

    /// Sum of squared whitened residuals.
    pub fn cost(&self) -> f64 {
        solver::total_cost(self)
    }

    /// Whitened residual and per-variable Jacobians of factor `i`.
    pub fn linearize(&self, i: usize) -> Option<(Vec6, Vec<Mat6>)> {
        solver::linearize_factor(self, &self.factors[i])
    }

    /// Dense `J^T W J` with its variable ordering (poses by frame, then
    /// landmarks by label), for checking the structured solver.
    pub fn dense_information(&self) -> Result<(DMatrix<f64>, Vec<Var>), MapperError> {
        solver::dense_information(self)
    }

    pub fn count(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind == kind).count()
    }

    fn check_vars(&self, vars: &[Var]) -> Result<(), MapperError> {
        for v in vars {
            match v {
                Var::Pose(k) if !self.poses.contains_key(k) => {
                    return Err(MapperError::MissingPose(*k))
                }
                Var::Landmark(l) if !self.landmarks.contains_key(l) => {
                    return Err(MapperError::MissingLandmark(l.clone()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn add_factor(&mut self, f: Factor) -> Result<(), MapperError> {
        self.check_vars(&f.vars)?;
        self.factors.push(f);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GateKind {
    /// Every tangent component within `alpha` standard deviations.
    ComponentWise,
    /// Squared Mahalanobis distance within the chi-square(6) quantile that
    /// matches the two-sided `alpha`-sigma probability.
    Mahalanobis,
}

/// What the gate's spread is made of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateCovariance {
    /// The landmark's marginal alone.
    Landmark,
    /// Landmark marginal plus the tracker's reported covariance.
    LandmarkAndMeasurement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub alpha: f64,
    /// Resets allowed before asking for re-recognition.
    pub threshold: usize,
    pub gate: GateKind,
    pub gate_covariance: GateCovariance,
    /// When off, measurements are still gated but no feedback is emitted.
    pub feedback: bool,
    /// Tracker health needed before a measurement is considered.
    pub health_threshold: f64,
    /// Object factor noise (meters, radians per axis).
    pub object_translation_sigma: f64,
    pub object_rotation_sigma: f64,
    /// Per-axis sigma of the first pose's prior.
    pub prior_sigma: f64,
    /// Gated measurements a reset tracker must deliver in a row before its
    /// label contributes to the graph again.
    pub acknowledge_frames: usize,
    pub solver: SolverConfig,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            threshold: 500,
            gate: GateKind::ComponentWise,
            gate_covariance: GateCovariance::Landmark,
            feedback: true,
            health_threshold: 0.5,
            object_translation_sigma: 0.15,
            object_rotation_sigma: 30f64.to_radians(),
            prior_sigma: 1e-6,
            acknowledge_frames: 3,
            solver: SolverConfig::default(),
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<(), MapperError> {
        let positive = [
            ("alpha", self.alpha),
            ("object_translation_sigma", self.object_translation_sigma),
            ("object_rotation_sigma", self.object_rotation_sigma),
            ("prior_sigma", self.prior_sigma),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(MapperError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.health_threshold) {
            return Err(MapperError::Config(format!(
                "health_threshold must lie in [0, 1], got {}",
                self.health_threshold
            )));
        }
        Ok(())
    }

    pub fn object_noise(&self) -> Covariance6 {
        Covariance6::from_sigmas(self.object_translation_sigma, self.object_rotation_sigma)
    }

    /// Squared-distance bound of the Mahalanobis gate.
    pub fn chi2_bound(&self) -> f64 {
        let p = statrs::function::erf::erf(self.alpha / std::f64::consts::SQRT_2);
        ChiSquared::new(6.0)
            .expect("six degrees of freedom")
            .inverse_cdf(p)
    }
}

/// A tracker output routed to the mapper.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMeasurement {
    pub frame: usize,
    pub label: String,
    /// Camera-frame object pose `T_k^{c,o}`.
    pub pose: Pose,
    pub covariance: Covariance6,
    pub health: f64,
}

/// Residual `log(inv(L) * X_k * Z)` between a landmark and a measurement
/// taken from camera pose `X_k`.
pub fn gate_residual(landmark: &Pose, camera: &Pose, measured: &Pose) -> Option<Vec6> {
    landmark.local(&camera.compose(measured)).ok()
}

/// Accept/reject decision for a residual against the combined covariance.
pub fn gate_test(
    residual: &Vec6,
    covariance: &Mat6,
    alpha: f64,
    kind: GateKind,
    chi2_bound: f64,
) -> bool {
    match kind {
        GateKind::ComponentWise => {
            (0..6).all(|i| residual[i].abs() <= alpha * covariance[(i, i)].max(0.0).sqrt())
        }
        GateKind::Mahalanobis => match covariance.try_inverse() {
            Some(inv) => (residual.transpose() * inv * residual)[(0, 0)] <= chi2_bound,
            None => false,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateOutcome {
    Accepted,
    Rejected {
        residual: Option<Vec6>,
    },
    /// Passed the gate while the label is barred after a reset.
    Barred,
    /// First observation of a label; the landmark was created from it.
    Created,
    /// Tracker health below threshold, gate not evaluated.
    NotEvaluated,
}

impl GateOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Self::Accepted | Self::Created)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Accepted => "accepted",
            Self::Rejected { .. } => "rejected",
            Self::Barred => "barred",
            Self::Created => "created",
            Self::NotEvaluated => "unhealthy",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedbackAction {
    None,
    /// Restart the tracker around this camera-frame object pose.
    Reset {
        pose: Pose,
    },
    /// Re-run recognition and restart the tracker from its result.
    Reinitialize,
}

impl FeedbackAction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Reset { .. } => "reset",
            Self::Reinitialize => "reinitialize",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackMode {
    #[default]
    Tracking,
    Resetting,
    Reinitializing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ObjectFeedback {
    /// Consecutive resets since the last accepted measurement.
    pub counter: usize,
    /// Gated measurements still owed before the label is unbarred.
    pub pending: usize,
    pub mode: TrackMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub gate: GateOutcome,
    pub action: FeedbackAction,
    pub factor_added: bool,
}

/// Graph, solver and feedback state machine.
#[derive(Debug, Clone)]
pub struct Mapper {
    cfg: MapperConfig,
    chi2_bound: f64,
    graph: GraphState,
    feedback: BTreeMap<String, ObjectFeedback>,
    /// Marginals at the linearization of the last optimization.
    landmark_marginals: BTreeMap<String, Mat6>,
    pose_marginals: BTreeMap<usize, Mat6>,
    optimized: bool,
}

impl Mapper {
    pub fn new(cfg: MapperConfig) -> Result<Self, MapperError> {
        cfg.validate()?;
        Ok(Self {
            chi2_bound: cfg.chi2_bound(),
            cfg,
            graph: GraphState::default(),
            feedback: BTreeMap::new(),
            landmark_marginals: BTreeMap::new(),
            pose_marginals: BTreeMap::new(),
            optimized: false,
        })
    }

    pub fn config(&self) -> &MapperConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &GraphState {
        &self.graph
    }

    /// Direct access for tests and tools; bypasses the feedback logic.
    pub fn graph_mut(&mut self) -> &mut GraphState {
        self.optimized = false;
        &mut self.graph
    }

    pub fn feedback(&self, label: &str) -> ObjectFeedback {
        self.feedback.get(label).copied().unwrap_or_default()
    }

    /// Creates the first pose with a tight prior at `pose`.
    pub fn anchor(&mut self, frame: usize, pose: Pose) -> Result<(), MapperError> {
        if self.graph.poses.contains_key(&frame) {
            return Err(MapperError::DuplicatePose(frame));
        }
        self.graph.poses.insert(frame, pose);
        let noise = Covariance6::from_sigmas(self.cfg.prior_sigma, self.cfg.prior_sigma);
        self.graph.add_factor(Factor::new(
            FactorKind::Prior,
            vec![Var::Pose(frame)],
            pose,
            noise,
        )?)
    }

    /// Creates pose `frame` at `X_{frame-1} * relative` and links the two.
    pub fn add_odometry(&mut self, meas: &OdometryMeasurement) -> Result<(), MapperError> {
        let k = meas.frame;
        if k == 0 {
            return Err(MapperError::MissingPose(0));
        }
        let prev = *self
            .graph
            .poses
            .get(&(k - 1))
            .ok_or(MapperError::MissingPose(k - 1))?;
        if self.graph.poses.contains_key(&k) {
            return Err(MapperError::DuplicatePose(k));
        }
        let f = Factor::new(
            FactorKind::Odometry,
            vec![Var::Pose(k - 1), Var::Pose(k)],
            meas.relative,
            meas.covariance,
        )?;
        self.graph.poses.insert(k, prev.compose(&meas.relative));
        self.graph.factors.push(f);
        Ok(())
    }

    pub fn predict_object_pose(&self, frame: usize, label: &str) -> Result<Pose, MapperError> {
        self.graph.predict_object_pose(frame, label)
    }

    /// Landmark marginal from the last optimization, or computed at the
    /// current estimates if none is cached.
    pub fn landmark_marginal(&self, label: &str) -> Result<Covariance6, MapperError> {
        if let Some(m) = self.landmark_marginals.get(label) {
            return Ok(Covariance6::from_matrix_unchecked(*m));
        }
        if !self.graph.landmarks.contains_key(label) {
            return Err(MapperError::MissingLandmark(label.to_string()));
        }
        let m = solver::Marginals::new(&self.graph)?;
        Ok(Covariance6::from_matrix_unchecked(
            m.landmark(label).expect("landmark is ordered"),
        ))
    }

    /// Marginal covariance of any variable at the current estimates.
    pub fn marginal_covariance(&self, var: &Var) -> Result<Covariance6, MapperError> {
        if self.optimized {
            let cached = match var {
                Var::Pose(k) => self.pose_marginals.get(k),
                Var::Landmark(l) => self.landmark_marginals.get(l),
            };
            if let Some(m) = cached {
                return Ok(Covariance6::from_matrix_unchecked(*m));
            }
        }
        self.graph.check_vars(std::slice::from_ref(var))?;
        let m = solver::Marginals::new(&self.graph)?;
        let block = match var {
            Var::Pose(k) => m.pose(*k),
            Var::Landmark(l) => m.landmark(l),
        };
        Ok(Covariance6::from_matrix_unchecked(
            block.expect("variable is ordered"),
        ))
    }

    /// Residual and decision for a measurement against an existing landmark.
    pub fn gate(&self, meas: &ObjectMeasurement) -> Result<GateOutcome, MapperError> {
        let x = self
            .graph
            .poses
            .get(&meas.frame)
            .ok_or(MapperError::MissingPose(meas.frame))?;
        let l = self
            .graph
            .landmarks
            .get(&meas.label)
            .ok_or_else(|| MapperError::MissingLandmark(meas.label.clone()))?;
        let Some(r) = gate_residual(l, x, &meas.pose) else {
            return Ok(GateOutcome::Rejected { residual: None });
        };
        let cov = self.gate_covariance(meas)?;
        Ok(
            if gate_test(&r, &cov, self.cfg.alpha, self.cfg.gate, self.chi2_bound) {
                GateOutcome::Accepted
            } else {
                GateOutcome::Rejected { residual: Some(r) }
            },
        )
    }

    /// Covariance the gate compares a measurement's residual against.
    pub fn gate_covariance(&self, meas: &ObjectMeasurement) -> Result<Mat6, MapperError> {
        let lm = *self.landmark_marginal(&meas.label)?.matrix();
        Ok(match self.cfg.gate_covariance {
            GateCovariance::Landmark => lm,
            GateCovariance::LandmarkAndMeasurement => lm + meas.covariance.matrix(),
        })
    }

    fn add_object_factor(&mut self, meas: &ObjectMeasurement) -> Result<(), MapperError> {
        let f = Factor::new(
            FactorKind::Object,
            vec![Var::Pose(meas.frame), Var::Landmark(meas.label.clone())],
            meas.pose,
            self.cfg.object_noise(),
        )?;
        self.graph.add_factor(f)
    }

    /// Data association and feedback for one tracker output. The odometry
    /// for `meas.frame` must already be in the graph.
    pub fn process_measurement(
        &mut self,
        meas: &ObjectMeasurement,
    ) -> Result<Outcome, MapperError> {
        let x = *self
            .graph
            .poses
            .get(&meas.frame)
            .ok_or(MapperError::MissingPose(meas.frame))?;
        let healthy = meas.health >= self.cfg.health_threshold;
        let known = self.graph.landmarks.contains_key(&meas.label);
        let gate = if !healthy {
            GateOutcome::NotEvaluated
        } else if !known {
            self.graph
                .landmarks
                .insert(meas.label.clone(), x.compose(&meas.pose));
            GateOutcome::Created
        } else {
            self.gate(meas)?
        };
        let fb = self.feedback.entry(meas.label.clone()).or_default();
        if gate == GateOutcome::Accepted && fb.pending > 0 {
            fb.pending -= 1;
            return Ok(Outcome {
                gate: GateOutcome::Barred,
                action: FeedbackAction::None,
                factor_added: false,
            });
        }
        if gate.is_accepted() {
            fb.counter = 0;
            fb.mode = TrackMode::Tracking;
            self.add_object_factor(meas)?;
            return Ok(Outcome {
                gate,
                action: FeedbackAction::None,
                factor_added: true,
            });
        }
        let action = if !self.cfg.feedback {
            FeedbackAction::None
        } else if !known {
            fb.mode = TrackMode::Reinitializing;
            fb.pending = 0;
            FeedbackAction::Reinitialize
        } else if fb.counter <= self.cfg.threshold {
            fb.counter += 1;
            fb.pending = self.cfg.acknowledge_frames;
            fb.mode = TrackMode::Resetting;
            FeedbackAction::Reset {
                pose: self.graph.predict_object_pose(meas.frame, &meas.label)?,
            }
        } else {
            fb.mode = TrackMode::Reinitializing;
            fb.pending = 0;
            FeedbackAction::Reinitialize
        };
        Ok(Outcome {
            gate,
            action,
            factor_added: false,
        })
    }

    /// Warm-started LM over all variables, then marginals at the result.
    /// On a diverged or singular graph the estimates are left unchanged.
    pub fn optimize(&mut self) -> Result<OptimizeReport, MapperError> {
        if !self
            .graph
            .factors
            .iter()
            .any(|f| f.kind == FactorKind::Prior)
        {
            return Err(MapperError::NotAnchored);
        }
        let mut trial = self.graph.clone();
        let report = solver::levenberg_marquardt(&mut trial, &self.cfg.solver)?;
        let m = solver::Marginals::new(&trial)?;
        self.landmark_marginals = trial
            .landmarks
            .keys()
            .map(|l| (l.clone(), m.landmark(l).expect("ordered")))
            .collect();
        self.pose_marginals = match trial.poses.keys().next_back() {
            Some(k) => [(*k, m.pose(*k).expect("ordered"))].into(),
            None => BTreeMap::new(),
        };
        self.graph = trial;
        self.optimized = true;
        Ok(report)
    }

    pub fn snapshot(&self) -> Result<Snapshot, MapperError> {
        Snapshot::capture(self)
    }

    /// Rebuilds a mapper from a snapshot; feedback counters start fresh.
    pub fn from_snapshot(cfg: MapperConfig, snap: &Snapshot) -> Result<Self, MapperError> {
        let mut m = Self::new(cfg)?;
        m.graph = snap.to_graph()?;
        for l in &snap.landmarks {
            if let Some(v) = &l.marginal {
                m.landmark_marginals
                    .insert(l.label.clone(), Mat6::from_row_slice(v));
            }
        }
        Ok(m)
    }
}
