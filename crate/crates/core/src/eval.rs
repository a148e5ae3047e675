//! Scoring against ground truth: per-frame object error with a lost
//! threshold, absolute trajectory error after rigid alignment, and seed
//! sweeps.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::par::Exec;
use crate::pipeline::{run, FrameRecord, Mode, PipelineError, RunConfig};
use crate::se3::Pose;
use crate::table::fmt6;

/// Object estimates farther than this from the truth count as lost (meters).
pub const LOST_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no frames to evaluate")]
    Empty,
    #[error("trajectory alignment needs at least 3 frames, got {0}")]
    TooFewFrames(usize),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerFrameReport {
    /// Mean translation error over frames under the threshold; `None` when
    /// every frame is lost.
    pub mean_m: Option<f64>,
    pub ratio_pct: f64,
    pub lost_threshold_m: f64,
    pub frames: usize,
    pub successes: usize,
}

/// Translation error of every object row, `None` where no estimate exists.
pub fn object_errors(records: &[FrameRecord]) -> Vec<Option<f64>> {
    records
        .iter()
        .flat_map(|r| r.objects.iter())
        .map(|o| {
            o.estimate
                .map(|e| (e.translation() - o.ground_truth.translation()).norm())
        })
        .collect()
}

/// Threshold semantics: a frame succeeds iff its error is strictly below
/// `threshold`; missing estimates are lost. The mean skips lost frames.
pub fn per_frame_report(
    errors: &[Option<f64>],
    threshold: f64,
) -> Result<PerFrameReport, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::Empty);
    }
    let ok: Vec<f64> = errors
        .iter()
        .flatten()
        .copied()
        .filter(|e| *e < threshold)
        .collect();
    Ok(PerFrameReport {
        mean_m: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
        ratio_pct: 100.0 * ok.len() as f64 / errors.len() as f64,
        lost_threshold_m: threshold,
        frames: errors.len(),
        successes: ok.len(),
    })
}

pub fn per_frame_error(
    records: &[FrameRecord],
    threshold: f64,
) -> Result<PerFrameReport, EvalError> {
    per_frame_report(&object_errors(records), threshold)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteReport {
    pub mean_m: f64,
    /// Population standard deviation.
    pub std_m: f64,
    pub median_m: f64,
    pub max_m: f64,
    pub frames: usize,
}

/// Rigid transform `T` minimizing `sum |T * est_i - gt_i|^2`.
pub fn align_rigid(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Pose, EvalError> {
    assert_eq!(est.len(), gt.len(), "point sets differ in length");
    let n = est.len();
    if n < 3 {
        return Err(EvalError::TooFewFrames(n));
    }
    let ce = est.iter().sum::<Vector3<f64>>() / n as f64;
    let cg = gt.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cross = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        cross += (g - cg) * (e - ce).transpose();
    }
    let svd = cross.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    Ok(Pose::new(r, cg - r * ce))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Error statistics of aligned positions.
pub fn ate_positions(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<AteReport, EvalError> {
    let t = align_rigid(est, gt)?;
    let errors: Vec<f64> = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (t.transform_point(e) - g).norm())
        .collect();
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(AteReport {
        mean_m: mean,
        std_m: var.sqrt(),
        median_m: median(&errors),
        max_m: errors.iter().copied().fold(0.0, f64::max),
        frames: errors.len(),
    })
}

/// Camera trajectory error over frames that carry a camera estimate.
pub fn ate(records: &[FrameRecord]) -> Result<AteReport, EvalError> {
    let (est, gt): (Vec<_>, Vec<_>) = records
        .iter()
        .filter_map(|r| {
            r.camera_estimate
                .map(|e| (*e.translation(), *r.camera_truth.translation()))
        })
        .unzip();
    ate_positions(&est, &gt)
}

pub const PER_FRAME_HEADER: &str = "sequence,mode,mean_m,ratio_pct,lost_threshold_m";
pub const ATE_HEADER: &str = "sequence,mode,mean_m,std_m,median_m";

fn opt6(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".into(), fmt6)
}

pub fn write_per_frame_report<W: Write>(
    rows: &[(String, Mode, PerFrameReport)],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "{PER_FRAME_HEADER}")?;
    for (seq, mode, r) in rows {
        writeln!(
            w,
            "{seq},{mode},{},{},{}",
            opt6(r.mean_m),
            fmt6(r.ratio_pct),
            fmt6(r.lost_threshold_m)
        )?;
    }
    Ok(())
}

pub fn write_ate_report<W: Write>(
    rows: &[(String, Mode, Option<AteReport>)],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "{ATE_HEADER}")?;
    for (seq, mode, r) in rows {
        let (m, s, md) = match r {
            Some(r) => (fmt6(r.mean_m), fmt6(r.std_m), fmt6(r.median_m)),
            None => ("nan".into(), "nan".into(), "nan".into()),
        };
        writeln!(w, "{seq},{mode},{m},{s},{md}")?;
    }
    Ok(())
}

/// Scores of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunScore {
    pub seed: u64,
    pub mode: Mode,
    pub per_frame: PerFrameReport,
    pub ate: Option<AteReport>,
}

pub fn score(records: &[FrameRecord], seed: u64, mode: Mode) -> Result<RunScore, EvalError> {
    Ok(RunScore {
        seed,
        mode,
        per_frame: per_frame_error(records, LOST_THRESHOLD)?,
        ate: ate(records).ok(),
    })
}

/// Medians over the seeds of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sequence: String,
    pub mode: Mode,
    pub seeds: usize,
    pub median_ratio_pct: f64,
    pub median_mean_m: f64,
    pub median_ate_m: f64,
}

pub const SWEEP_HEADER: &str = "sequence,mode,seeds,median_ratio_pct,median_mean_m,median_ate_m";

/// Runs every `(mode, seed)` pair, in parallel under `exec`, and
/// aggregates in mode order. Seeds are `0..seeds`.
pub fn sweep(
    base: &RunConfig,
    modes: &[Mode],
    seeds: u64,
    exec: Exec,
) -> Result<(Vec<SweepRow>, Vec<RunScore>), EvalError> {
    let jobs: Vec<(Mode, u64)> = modes
        .iter()
        .flat_map(|m| (0..seeds).map(move |s| (*m, s)))
        .collect();
    let scores = exec.map(&jobs, |(mode, seed)| {
        let cfg = RunConfig {
            mode: *mode,
            seed: *seed,
            exec: Exec::Sequential,
            ..base.clone()
        };
        let rec = run(&cfg)?;
        score(&rec, *seed, *mode)
    });
    let scores: Vec<RunScore> = scores.into_iter().collect::<Result<_, _>>()?;
    let rows = modes
        .iter()
        .map(|m| {
            let mine: Vec<&RunScore> = scores.iter().filter(|s| s.mode == *m).collect();
            let ratios: Vec<f64> = mine.iter().map(|s| s.per_frame.ratio_pct).collect();
            let means: Vec<f64> = mine.iter().filter_map(|s| s.per_frame.mean_m).collect();
            let ates: Vec<f64> = mine
                .iter()
                .filter_map(|s| s.ate.map(|a| a.mean_m))
                .collect();
            SweepRow {
                sequence: base.scenario.name.clone(),
                mode: *m,
                seeds: mine.len(),
                median_ratio_pct: median(&ratios),
                median_mean_m: median(&means),
                median_ate_m: median(&ates),
            }
        })
        .collect();
    Ok((rows, scores))
}

pub fn write_sweep<W: Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.sequence,
            r.mode,
            r.seeds,
            fmt6(r.median_ratio_pct),
            fmt6(r.median_mean_m),
            fmt6(r.median_ate_m)
        )?;
    }
    Ok(())
}
