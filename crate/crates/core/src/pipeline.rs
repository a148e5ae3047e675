//! Closed-loop frame loop: render, track, odometry, map, feed back, record.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapper::{
    FeedbackAction, GateOutcome, Mapper, MapperConfig, MapperError, ObjectMeasurement,
};
use crate::par::Exec;
use crate::recognizer::{ransac_pnp, PnPResult, RansacConfig, RecognitionError};
use crate::rng::{self, label_key, streams};
use crate::scene::{generate_correspondences, render_edge_map, Scenario, ScenarioError};
use crate::se3::{Covariance6, Pose, Vec6};
use crate::table::fmt6;
use crate::tracker::{EbtTracker, TrackerConfig, TrackerError, TrackerOutput};
use crate::vo::{self, OdometryMeasurement, VoConfig, VoSimulator, VoState};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("record table line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("record table io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Tracker, odometry, graph and feedback.
    Full,
    /// Graph and gating, but rejected measurements trigger nothing.
    NoFeedback,
    /// The tracker alone.
    TrackerOnly,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::NoFeedback, Mode::TrackerOnly];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoFeedback => "no-feedback",
            Mode::TrackerOnly => "tracker-only",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!("unknown mode '{s}' (expected full, no-feedback or tracker-only)")
            })
    }
}

/// Replaces a fraction of the tracker measurements handed to the mapper by
/// copies displaced along one random tangent axis by `sigmas` gate standard
/// deviations. The tracker itself is not affected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierInjection {
    pub rate: f64,
    pub sigmas: f64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub mode: Mode,
    /// Replaces the scenario's own seed.
    pub seed: u64,
    pub tracker: TrackerConfig,
    pub mapper: MapperConfig,
    pub vo: VoConfig,
    pub ransac: RansacConfig,
    /// Odometry noise used when the odometry loses track for a frame.
    pub bridge_sigmas: (f64, f64),
    pub injection: Option<OutlierInjection>,
    pub exec: Exec,
}

impl RunConfig {
    pub fn new(scenario: Scenario, mode: Mode) -> Self {
        Self {
            seed: scenario.seed,
            scenario,
            mode,
            tracker: TrackerConfig::default(),
            mapper: MapperConfig::default(),
            vo: VoConfig::default(),
            ransac: RansacConfig::default(),
            bridge_sigmas: (0.5, 45f64.to_radians()),
            injection: None,
            exec: Exec::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.scenario.validate()?;
        self.tracker.validate()?;
        self.mapper.validate()?;
        if let Some(inj) = &self.injection {
            if !(0.0..=1.0).contains(&inj.rate) || !(inj.sigmas > 0.0) {
                return Err(PipelineError::Config(format!(
                    "outlier injection needs rate in [0, 1] and sigmas > 0, got {inj:?}"
                )));
            }
        }
        let (t, r) = self.bridge_sigmas;
        if !(t > 0.0 && r > 0.0) {
            return Err(PipelineError::Config(
                "bridge sigmas must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateDecision {
    Accepted,
    /// First sighting, which creates the landmark.
    Created,
    Rejected,
    /// Passed the gate shortly after a reset, kept out of the graph.
    Barred,
    /// Tracker health below threshold.
    Unhealthy,
    /// No measurement reached the mapper this frame.
    Skipped,
}

impl GateDecision {
    pub const ALL: [GateDecision; 6] = [
        Self::Accepted,
        Self::Created,
        Self::Rejected,
        Self::Barred,
        Self::Unhealthy,
        Self::Skipped,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Accepted => "accepted",
            Self::Created => "created",
            Self::Rejected => "rejected",
            Self::Barred => "barred",
            Self::Unhealthy => "unhealthy",
            Self::Skipped => "skipped",
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, Self::Accepted | Self::Created)
    }

    fn from_outcome(g: &GateOutcome) -> Self {
        match g {
            GateOutcome::Accepted => Self::Accepted,
            GateOutcome::Created => Self::Created,
            GateOutcome::Rejected { .. } => Self::Rejected,
            GateOutcome::Barred => Self::Barred,
            GateOutcome::NotEvaluated => Self::Unhealthy,
        }
    }
}

impl FromStr for GateDecision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| format!("unknown gate decision '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionKind {
    None,
    Reset,
    Reinitialize,
}

impl ActionKind {
    pub const ALL: [ActionKind; 3] = [Self::None, Self::Reset, Self::Reinitialize];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Reset => "reset",
            Self::Reinitialize => "reinitialize",
        }
    }
}

impl FromStr for ActionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown action '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub label: String,
    /// Camera-frame object pose, truth and estimate.
    pub ground_truth: Pose,
    pub estimate: Option<Pose>,
    pub health: f64,
    pub gate: GateDecision,
    pub action: ActionKind,
    pub injected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub camera_truth: Pose,
    /// Camera-to-world estimate in the graph's own world frame.
    pub camera_estimate: Option<Pose>,
    pub objects: Vec<ObjectRecord>,
}

struct Track {
    label: String,
    tracker: EbtTracker,
    /// Tracker output per frame so far.
    history: Vec<Option<TrackerOutput>>,
}

struct Loop<'a> {
    cfg: &'a RunConfig,
    scn: Scenario,
    tracks: Vec<Track>,
    sim: VoSimulator,
    vo: VoState,
    /// Per frame, whether the odometry tracked.
    vo_ok: Vec<bool>,
    /// First recognition of the first object, which opens scale
    /// initialization.
    first: Option<(usize, PnPResult)>,
    unscaled: Pose,
    mapper: Option<Mapper>,
}

impl<'a> Loop<'a> {
    fn recognize(&self, k: usize, label: &str) -> Result<PnPResult, RecognitionError> {
        let corrs = generate_correspondences(&self.scn, k, label)
            .map_err(|_| RecognitionError::TooFew(0))?;
        let seed =
            rng::stream(self.cfg.seed ^ label_key(label), streams::RANSAC, k as u64).random();
        ransac_pnp(
            &corrs,
            &self.scn.intrinsics,
            &RansacConfig {
                seed,
                ..self.cfg.ransac
            },
        )
    }

    fn odometry(&self, k: usize) -> OdometryMeasurement {
        if self.vo_ok[k] {
            self.sim.measure(k, &self.vo)
        } else {
            OdometryMeasurement {
                frame: k,
                relative: Pose::identity(),
                covariance: Covariance6::from_sigmas(
                    self.cfg.bridge_sigmas.0,
                    self.cfg.bridge_sigmas.1,
                ),
                scaled: true,
            }
        }
    }

    /// Monocular scale from the first recognition and a later keyframe.
    fn try_scale_init(&mut self, k: usize) {
        let Some((k1, obs1)) = self.first.clone() else {
            return;
        };
        if k <= k1 {
            return;
        }
        self.unscaled = self
            .unscaled
            .compose(&self.sim.measure(k, &self.vo).relative);
        let disparity = vo::disparity(&self.scn, &self.tracks[0].label, k1, k).unwrap_or(0.0);
        if !self.vo.keyframe_policy(&self.cfg.vo, k, disparity, 0.0) {
            return;
        }
        let scale = self
            .recognize(k, &self.tracks[0].label)
            .ok()
            .and_then(|obs2| vo::initialize_scale(&obs1, &obs2, &self.unscaled).ok());
        match scale {
            Some(s) => {
                self.vo.scale = s;
                self.vo.initialized = true;
            }
            None => {
                self.vo.keyframes.pop_back();
            }
        }
    }

    fn measurement(
        &self,
        k: usize,
        t: usize,
        out: &TrackerOutput,
        injected: bool,
    ) -> ObjectMeasurement {
        let label = &self.tracks[t].label;
        let mut pose = out.pose;
        if injected {
            let inj = self.cfg.injection.expect("injection configured");
            let mapper = self.mapper.as_ref().expect("graph running");
            let probe = ObjectMeasurement {
                frame: k,
                label: label.clone(),
                pose,
                covariance: out.covariance,
                health: out.health,
            };
            let cov = mapper.gate_covariance(&probe).expect("landmark exists");
            let mut r = rng::stream(
                self.cfg.seed ^ label_key(label),
                streams::INJECTION,
                2 * k as u64 + 1,
            );
            let axis = r.random_range(0..6);
            let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
            let mut d = Vec6::zeros();
            d[axis] = sign * inj.sigmas * cov[(axis, axis)].sqrt();
            pose = pose.retract(&d);
        }
        ObjectMeasurement {
            frame: k,
            label: label.clone(),
            pose,
            covariance: out.covariance,
            health: out.health,
        }
    }

    fn inject(&self, k: usize, t: usize) -> bool {
        let Some(inj) = self.cfg.injection else {
            return false;
        };
        let label = &self.tracks[t].label;
        if !self
            .mapper
            .as_ref()
            .is_some_and(|m| m.graph().landmarks.contains_key(label))
        {
            return false;
        }
        let mut r = rng::stream(
            self.cfg.seed ^ label_key(label),
            streams::INJECTION,
            2 * k as u64,
        );
        r.random::<f64>() < inj.rate
    }

    /// Feeds frame `k` to the graph; returns per-object decisions.
    fn map_frame(
        &mut self,
        k: usize,
    ) -> Result<Vec<(GateDecision, FeedbackAction, bool)>, PipelineError> {
        if k > 0 {
            let odo = self.odometry(k);
            self.mapper
                .as_mut()
                .expect("graph running")
                .add_odometry(&odo)?;
        }
        let mut out = Vec::with_capacity(self.tracks.len());
        for t in 0..self.tracks.len() {
            let Some(obs) = self.tracks[t].history[k].clone() else {
                out.push((GateDecision::Skipped, FeedbackAction::None, false));
                continue;
            };
            let injected = self.inject(k, t);
            let meas = self.measurement(k, t, &obs, injected);
            let o = self
                .mapper
                .as_mut()
                .expect("graph running")
                .process_measurement(&meas)?;
            out.push((GateDecision::from_outcome(&o.gate), o.action, injected));
        }
        // A failed optimization keeps the previous estimates.
        let _ = self.mapper.as_mut().expect("graph running").optimize();
        Ok(out)
    }

    fn start_graph(
        &mut self,
        k: usize,
    ) -> Result<Vec<(GateDecision, FeedbackAction, bool)>, PipelineError> {
        let mut m = Mapper::new(self.cfg.mapper)?;
        m.anchor(0, Pose::identity())?;
        self.mapper = Some(m);
        let mut last = Vec::new();
        for j in 0..=k {
            last = self.map_frame(j)?;
        }
        Ok(last)
    }

    fn apply(&mut self, k: usize, t: usize, action: &FeedbackAction) {
        match action {
            FeedbackAction::None => {}
            FeedbackAction::Reset { pose } => self.tracks[t].tracker.reset(pose),
            FeedbackAction::Reinitialize => {
                let r = self.recognize(k, &self.tracks[t].label);
                let _ = self.tracks[t]
                    .tracker
                    .reinitialize(r.as_ref().map_err(|e| e.clone()));
            }
        }
    }
}

/// Runs the whole scenario. Tracking losses are recorded, not raised.
pub fn run(cfg: &RunConfig) -> Result<Vec<FrameRecord>, PipelineError> {
    cfg.validate()?;
    let mut scn = cfg.scenario.clone();
    scn.seed = cfg.seed;
    let mut mapper_cfg = cfg.mapper;
    mapper_cfg.feedback = cfg.mode == Mode::Full;
    let cfg = &RunConfig {
        mapper: mapper_cfg,
        ..cfg.clone()
    };
    let tracks = scn
        .objects
        .iter()
        .map(|o| {
            Ok(Track {
                label: o.model.label.clone(),
                tracker: EbtTracker::new(&o.model, cfg.tracker, cfg.seed)?,
                history: Vec::with_capacity(scn.len()),
            })
        })
        .collect::<Result<Vec<_>, TrackerError>>()?;
    let mut lp = Loop {
        cfg,
        sim: VoSimulator::new(&scn, cfg.vo),
        vo_ok: vec![true; scn.len()],
        scn,
        tracks,
        vo: VoState::default(),
        first: None,
        unscaled: Pose::identity(),
        mapper: None,
    };
    let graph_mode = cfg.mode != Mode::TrackerOnly;
    let mut records = Vec::with_capacity(lp.scn.len());
    for k in 0..lp.scn.len() {
        for t in 0..lp.tracks.len() {
            if lp.tracks[t].tracker.is_initialized() {
                continue;
            }
            if let Ok(r) = lp.recognize(k, &lp.tracks[t].label) {
                lp.tracks[t].tracker.reinitialize(Ok(&r))?;
                if t == 0 && lp.first.is_none() {
                    lp.vo.keyframe_policy(&cfg.vo, k, 0.0, 0.0);
                    lp.first = Some((k, r));
                }
            }
        }
        let edges = render_edge_map(&lp.scn, k);
        for tr in lp.tracks.iter_mut() {
            let out = tr.tracker.step(&edges, &lp.scn.intrinsics, cfg.exec).ok();
            tr.history.push(out);
        }
        if k > 0 {
            lp.vo_ok[k] = lp.sim.step(&lp.scn, k, &lp.vo).is_some();
        }
        let mut decisions = None;
        if graph_mode {
            if lp.mapper.is_some() {
                decisions = Some(lp.map_frame(k)?);
            } else if !lp.vo.initialized {
                lp.try_scale_init(k);
                if lp.vo.initialized {
                    decisions = Some(lp.start_graph(k)?);
                }
            }
        }
        let cam_truth = lp.scn.camera_pose(k);
        let mut objects = Vec::with_capacity(lp.tracks.len());
        for t in 0..lp.tracks.len() {
            let label = lp.tracks[t].label.clone();
            let out = lp.tracks[t].history[k].clone();
            let (gate, action, injected) = match &decisions {
                Some(d) => d[t].clone(),
                None => (GateDecision::Skipped, FeedbackAction::None, false),
            };
            let predicted = lp
                .mapper
                .as_ref()
                .and_then(|m| m.predict_object_pose(k, &label).ok());
            let estimate = match (gate.is_accepted(), predicted) {
                (false, Some(p)) => Some(p),
                _ => out.as_ref().map(|o| o.pose),
            };
            objects.push(ObjectRecord {
                ground_truth: lp.scn.object_in_camera(k, &label)?,
                label,
                estimate,
                health: out.as_ref().map_or(0.0, |o| o.health),
                gate,
                action: match action {
                    FeedbackAction::None => ActionKind::None,
                    FeedbackAction::Reset { .. } => ActionKind::Reset,
                    FeedbackAction::Reinitialize => ActionKind::Reinitialize,
                },
                injected,
            });
            lp.apply(k, t, &action);
        }
        let camera_estimate = match &lp.mapper {
            Some(m) => m.graph().poses.get(&k).copied(),
            None if cfg.mode == Mode::TrackerOnly => {
                let obj = lp.scn.objects[0].pose.to_pose();
                objects[0].estimate.map(|e| obj.compose(&e.inverse()))
            }
            None => None,
        };
        records.push(FrameRecord {
            frame: k,
            camera_truth: cam_truth,
            camera_estimate,
            objects,
        });
    }
    Ok(records)
}

pub const RECORD_HEADER: &str = "frame,label,\
gt_tx,gt_ty,gt_tz,gt_rx,gt_ry,gt_rz,\
est_tx,est_ty,est_tz,est_rx,est_ry,est_rz,\
health,gate,action,injected,\
cam_gt_tx,cam_gt_ty,cam_gt_tz,cam_gt_rx,cam_gt_ry,cam_gt_rz,\
cam_est_tx,cam_est_ty,cam_est_tz,cam_est_rx,cam_est_ry,cam_est_rz";

fn pose_fields(p: Option<&Pose>) -> String {
    match p {
        Some(p) => {
            let (t, r) = (p.translation(), p.axis_angle());
            [t.x, t.y, t.z, r.x, r.y, r.z].map(fmt6).join(",")
        }
        None => ",,,,,".into(),
    }
}

/// Writes one row per frame per object under [`RECORD_HEADER`]. Poses are
/// translation (m) then axis-angle (rad); a missing estimate leaves its six
/// fields empty. Numbers use six significant digits.
pub fn write_records<W: Write>(records: &[FrameRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{RECORD_HEADER}")?;
    for r in records {
        for o in &r.objects {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.frame,
                o.label,
                pose_fields(Some(&o.ground_truth)),
                pose_fields(o.estimate.as_ref()),
                fmt6(o.health),
                o.gate.as_str(),
                o.action.as_str(),
                u8::from(o.injected),
                pose_fields(Some(&r.camera_truth)),
                pose_fields(r.camera_estimate.as_ref()),
            )?;
        }
    }
    Ok(())
}

fn parse_pose(fields: &[&str]) -> Result<Option<Pose>, String> {
    if fields.iter().all(|f| f.is_empty()) {
        return Ok(None);
    }
    let v: Vec<f64> = fields
        .iter()
        .map(|f| f.parse::<f64>().map_err(|e| format!("{f:?}: {e}")))
        .collect::<Result<_, _>>()?;
    Ok(Some(Pose::from_axis_angle(
        Vector3::new(v[3], v[4], v[5]),
        Vector3::new(v[0], v[1], v[2]),
    )))
}

/// Reads a table written by [`write_records`].
pub fn read_records<R: BufRead>(r: R) -> Result<Vec<FrameRecord>, PipelineError> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end() != RECORD_HEADER {
        return Err(PipelineError::Parse {
            line: 1,
            reason: "unexpected header".into(),
        });
    }
    let mut out: Vec<FrameRecord> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let n = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| PipelineError::Parse { line: n, reason };
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 30 {
            return Err(err(format!("expected 30 fields, found {}", f.len())));
        }
        let frame: usize = f[0].parse().map_err(|e| err(format!("frame: {e}")))?;
        let gt = parse_pose(&f[2..8])
            .map_err(err)?
            .ok_or_else(|| err("missing ground truth".into()))?;
        let estimate = parse_pose(&f[8..14]).map_err(err)?;
        let health: f64 = f[14].parse().map_err(|e| err(format!("health: {e}")))?;
        let gate: GateDecision = f[15].parse().map_err(err)?;
        let action: ActionKind = f[16].parse().map_err(err)?;
        let injected = match f[17] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("injected flag {other:?}"))),
        };
        let cam_gt = parse_pose(&f[18..24])
            .map_err(err)?
            .ok_or_else(|| err("missing camera truth".into()))?;
        let cam_est = parse_pose(&f[24..30]).map_err(err)?;
        let obj = ObjectRecord {
            label: f[1].to_string(),
            ground_truth: gt,
            estimate,
            health,
            gate,
            action,
            injected,
        };
        match out.last_mut() {
            Some(last) if last.frame == frame => last.objects.push(obj),
            _ => out.push(FrameRecord {
                frame,
                camera_truth: cam_gt,
                camera_estimate: cam_est,
                objects: vec![obj],
            }),
        }
    }
    Ok(out)
}
