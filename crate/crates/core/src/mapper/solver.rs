//! Levenberg-Marquardt over the pose chain and object landmarks.
//!
//! Variables are ordered poses first (by frame), then landmarks (by label).
//! Odometry only links consecutive poses, so the pose block of the normal
//! matrix is block tridiagonal; landmarks are eliminated through a Schur
//! complement. The same factorization yields the marginal covariances.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Matrix6, Matrix6xX};
use serde::{Deserialize, Serialize};

use super::{Factor, GraphState, MapperError, Var};
use crate::se3::{se3_right_jacobian_inv, Mat6, Pose, Vec6};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop when an accepted step improves the cost by less than this
    /// fraction.
    pub relative_tolerance: f64,
    /// Stop when the tangent step norm falls below this.
    pub step_tolerance: f64,
    pub initial_lambda: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_tolerance: 1e-9,
            step_tolerance: 1e-10,
            initial_lambda: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    StepTolerance,
    RelativeTolerance,
    MaxIterations,
    /// Damping grew past its limit without finding a non-increasing step.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    /// Number of accepted steps.
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Initial cost followed by the cost after every accepted step.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
}

impl OptimizeReport {
    pub fn is_monotone(&self) -> bool {
        self.cost_history.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Index of every variable in the solve.
#[derive(Debug, Clone)]
pub(crate) struct Ordering {
    pub poses: BTreeMap<usize, usize>,
    pub landmarks: BTreeMap<String, usize>,
}

impl Ordering {
    pub fn new(g: &GraphState) -> Self {
        Self {
            poses: g.poses.keys().enumerate().map(|(i, k)| (*k, i)).collect(),
            landmarks: g
                .landmarks
                .keys()
                .enumerate()
                .map(|(i, l)| (l.clone(), i))
                .collect(),
        }
    }

    pub fn n_poses(&self) -> usize {
        self.poses.len()
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    /// Position in the dense variable vector (in 6-blocks).
    pub fn block(&self, v: &Var) -> usize {
        match v {
            Var::Pose(k) => self.poses[k],
            Var::Landmark(l) => self.n_poses() + self.landmarks[l],
        }
    }
}

fn estimate<'a>(g: &'a GraphState, v: &Var) -> &'a Pose {
    match v {
        Var::Pose(k) => &g.poses[k],
        Var::Landmark(l) => &g.landmarks[l],
    }
}

/// Whitened residual of a factor at the current estimates.
pub(crate) fn whitened_residual(g: &GraphState, f: &Factor) -> Option<Vec6> {
    let r = f.residual(
        estimate(g, &f.vars[0]),
        f.vars.get(1).map(|v| estimate(g, v)),
    )?;
    Some(f.sqrt_information * r)
}

/// Whitened residual and Jacobians with respect to right perturbations of
/// each referenced variable.
pub(crate) fn linearize_factor(g: &GraphState, f: &Factor) -> Option<(Vec6, Vec<Mat6>)> {
    let a = estimate(g, &f.vars[0]);
    match f.vars.get(1) {
        None => {
            let r = f.residual(a, None)?;
            let j = se3_right_jacobian_inv(&r);
            Some((f.sqrt_information * r, vec![f.sqrt_information * j]))
        }
        Some(vb) => {
            let b = estimate(g, vb);
            let r = f.residual(a, Some(b))?;
            let jr = se3_right_jacobian_inv(&r);
            let jb = jr;
            let ja = -jr * b.between(a).adjoint();
            let l = &f.sqrt_information;
            Some((l * r, vec![l * ja, l * jb]))
        }
    }
}

pub(crate) fn total_cost(g: &GraphState) -> f64 {
    let mut c = 0.0;
    for f in &g.factors {
        match whitened_residual(g, f) {
            Some(r) => c += r.norm_squared(),
            None => return f64::INFINITY,
        }
    }
    c
}

/// Normal equations split into the block-tridiagonal pose part `A`, the
/// pose-landmark coupling `B` and the landmark part `C`.
#[derive(Debug, Clone)]
pub(crate) struct System {
    pub diag: Vec<Mat6>,
    /// `off[i]` is the block between poses `i` and `i + 1`.
    pub off: Vec<Mat6>,
    /// Row `i` holds the coupling of pose `i` with every landmark.
    pub coupling: Vec<Matrix6xX<f64>>,
    pub landmark: DMatrix<f64>,
    pub grad_pose: Vec<Vec6>,
    pub grad_landmark: DVector<f64>,
    pub cost: f64,
}

pub(crate) fn build_system(g: &GraphState, ord: &Ordering) -> Result<System, MapperError> {
    let (n, m) = (ord.n_poses(), ord.n_landmarks());
    let mut s = System {
        diag: vec![Mat6::zeros(); n],
        off: vec![Mat6::zeros(); n.saturating_sub(1)],
        coupling: vec![Matrix6xX::zeros(6 * m); n],
        landmark: DMatrix::zeros(6 * m, 6 * m),
        grad_pose: vec![Vec6::zeros(); n],
        grad_landmark: DVector::zeros(6 * m),
        cost: 0.0,
    };
    for f in &g.factors {
        let (r, jac) = linearize_factor(g, f).ok_or(MapperError::Diverged)?;
        s.cost += r.norm_squared();
        let blocks: Vec<usize> = f.vars.iter().map(|v| ord.block(v)).collect();
        for (a, ja) in blocks.iter().zip(&jac) {
            let grad = ja.transpose() * r;
            if *a < n {
                s.grad_pose[*a] += grad;
            } else {
                let o = 6 * (a - n);
                let mut seg = s.grad_landmark.fixed_rows_mut::<6>(o);
                seg += grad;
            }
            for (b, jb) in blocks.iter().zip(&jac) {
                let h = ja.transpose() * jb;
                add_block(&mut s, n, *a, *b, &h)?;
            }
        }
    }
    if !s.cost.is_finite() {
        return Err(MapperError::Diverged);
    }
    Ok(s)
}

fn add_block(s: &mut System, n: usize, a: usize, b: usize, h: &Mat6) -> Result<(), MapperError> {
    match (a < n, b < n) {
        (true, true) => {
            if a == b {
                s.diag[a] += h;
            } else if b == a + 1 {
                s.off[a] += h;
            } else if a == b + 1 {
                // The transposed copy is implied by symmetry.
            } else {
                return Err(MapperError::Structure(format!(
                    "poses {a} and {b} are linked but not consecutive"
                )));
            }
        }
        (true, false) => {
            let mut blk = s.coupling[a].fixed_view_mut::<6, 6>(0, 6 * (b - n));
            blk += h;
        }
        (false, true) => {}
        (false, false) => {
            let mut blk = s.landmark.view_mut((6 * (a - n), 6 * (b - n)), (6, 6));
            blk += h;
        }
    }
    Ok(())
}

/// Cholesky factor of a block-tridiagonal SPD matrix.
#[derive(Debug, Clone)]
pub(crate) struct TridiagonalCholesky {
    diag: Vec<Matrix6<f64>>,
    /// `sub[i]` is the factor block below `diag[i]`.
    sub: Vec<Matrix6<f64>>,
}

impl TridiagonalCholesky {
    pub fn new(diag: &[Mat6], off: &[Mat6]) -> Option<Self> {
        let n = diag.len();
        let mut ld = Vec::with_capacity(n);
        let mut ls: Vec<Mat6> = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            let mut d = diag[i];
            if i > 0 {
                let s = &ls[i - 1];
                d -= s * s.transpose();
            }
            let l = Cholesky::new(d)?.l();
            if i + 1 < n {
                // L_{i+1,i} = A_{i+1,i} L_ii^{-T}
                let a = off[i].transpose();
                let s = l.solve_lower_triangular(&a.transpose())?.transpose();
                ls.push(s);
            }
            ld.push(l);
        }
        Some(Self { diag: ld, sub: ls })
    }

    pub fn solve(&self, b: &[Matrix6xX<f64>]) -> Vec<Matrix6xX<f64>> {
        let n = self.diag.len();
        let mut y: Vec<Matrix6xX<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut rhs = b[i].clone();
            if i > 0 {
                rhs -= &self.sub[i - 1] * &y[i - 1];
            }
            y.push(
                self.diag[i]
                    .solve_lower_triangular(&rhs)
                    .expect("factor diagonal is non-singular"),
            );
        }
        let mut x = y;
        for i in (0..n).rev() {
            let mut rhs = x[i].clone();
            if i + 1 < n {
                rhs -= self.sub[i].transpose() * &x[i + 1];
            }
            x[i] = self.diag[i]
                .tr_solve_lower_triangular(&rhs)
                .expect("factor diagonal is non-singular");
        }
        x
    }
}

fn column_blocks(v: &[Vec6]) -> Vec<Matrix6xX<f64>> {
    v.iter()
        .map(|g| Matrix6xX::from_column_slice(g.as_slice()))
        .collect()
}

/// Solution of the (optionally damped) normal equations `H d = -g`.
pub(crate) fn solve_step(s: &System, lambda: f64) -> Option<(Vec<Vec6>, DVector<f64>)> {
    let n = s.diag.len();
    let m6 = s.landmark.nrows();
    let damp = |d: &Mat6| {
        let mut out = *d;
        for i in 0..6 {
            out[(i, i)] += lambda * d[(i, i)].max(1e-12);
        }
        out
    };
    let diag: Vec<Mat6> = s.diag.iter().map(damp).collect();
    let chol = TridiagonalCholesky::new(&diag, &s.off)?;
    let y = chol.solve(&column_blocks(&s.grad_pose));
    if m6 == 0 {
        return Some((
            y.iter()
                .map(|c| -Vec6::from_column_slice(c.as_slice()))
                .collect(),
            DVector::zeros(0),
        ));
    }
    let x = chol.solve(&s.coupling);
    let mut schur = s.landmark.clone();
    for i in 0..m6 {
        schur[(i, i)] += lambda * s.landmark[(i, i)].max(1e-12);
    }
    let mut rhs = -s.grad_landmark.clone();
    for i in 0..n {
        schur -= s.coupling[i].transpose() * &x[i];
        rhs += s.coupling[i].transpose() * &y[i];
    }
    let dl = schur.cholesky()?.solve(&rhs);
    let dp = (0..n)
        .map(|i| {
            let v = -(&y[i]) - &x[i] * &dl;
            Vec6::from_column_slice(v.as_slice())
        })
        .collect();
    Some((dp, dl))
}

fn apply_step(g: &GraphState, ord: &Ordering, dp: &[Vec6], dl: &DVector<f64>) -> GraphState {
    let mut out = g.clone();
    for (k, i) in &ord.poses {
        let p = out.poses.get_mut(k).expect("ordered pose exists");
        *p = p.retract(&dp[*i]);
    }
    for (l, j) in &ord.landmarks {
        let d = Vec6::from_column_slice(&dl.as_slice()[6 * j..6 * j + 6]);
        let p = out.landmarks.get_mut(l).expect("ordered landmark exists");
        *p = p.retract(&d);
    }
    out
}

fn step_norm(dp: &[Vec6], dl: &DVector<f64>) -> f64 {
    (dp.iter().map(|d| d.norm_squared()).sum::<f64>() + dl.norm_squared()).sqrt()
}

/// Runs LM from the current estimates. Steps are accepted only when the
/// cost does not increase. On error the graph is left untouched.
pub(crate) fn levenberg_marquardt(
    g: &mut GraphState,
    cfg: &SolverConfig,
) -> Result<OptimizeReport, MapperError> {
    let ord = Ordering::new(g);
    let mut sys = build_system(g, &ord)?;
    let mut cost = sys.cost;
    let mut history = vec![cost];
    let mut lambda = cfg.initial_lambda;
    let mut termination = Termination::MaxIterations;
    let mut current = g.clone();
    'outer: for _ in 0..cfg.max_iterations {
        loop {
            let Some((dp, dl)) = solve_step(&sys, lambda) else {
                lambda *= 10.0;
                if lambda > 1e12 {
                    termination = Termination::Stalled;
                    break 'outer;
                }
                continue;
            };
            if step_norm(&dp, &dl) < cfg.step_tolerance {
                termination = Termination::StepTolerance;
                break 'outer;
            }
            let trial = apply_step(&current, &ord, &dp, &dl);
            let trial_cost = total_cost(&trial);
            if trial_cost.is_finite() && trial_cost <= cost {
                let improvement = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
                current = trial;
                cost = trial_cost;
                history.push(cost);
                lambda = (lambda * 0.1).max(1e-12);
                if improvement < cfg.relative_tolerance {
                    termination = Termination::RelativeTolerance;
                    break 'outer;
                }
                sys = build_system(&current, &ord)?;
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                termination = Termination::Stalled;
                break 'outer;
            }
        }
    }
    *g = current;
    Ok(OptimizeReport {
        iterations: history.len() - 1,
        initial_cost: history[0],
        final_cost: cost,
        cost_history: history,
        termination,
    })
}

/// Factorization of the undamped information matrix at the current
/// estimates, from which any marginal block can be read.
pub(crate) struct Marginals {
    ord: Ordering,
    chol: TridiagonalCholesky,
    /// `A^{-1} B`, per pose.
    x: Vec<Matrix6xX<f64>>,
    /// Inverse Schur complement of the landmarks.
    schur_inv: DMatrix<f64>,
}

impl Marginals {
    pub fn new(g: &GraphState) -> Result<Self, MapperError> {
        let ord = Ordering::new(g);
        let s = build_system(g, &ord)?;
        let chol = TridiagonalCholesky::new(&s.diag, &s.off).ok_or(MapperError::Singular)?;
        let m6 = s.landmark.nrows();
        let (x, schur_inv) = if m6 == 0 {
            (Vec::new(), DMatrix::zeros(0, 0))
        } else {
            let x = chol.solve(&s.coupling);
            let mut schur = s.landmark.clone();
            for i in 0..s.diag.len() {
                schur -= s.coupling[i].transpose() * &x[i];
            }
            let inv = schur.cholesky().ok_or(MapperError::Singular)?.inverse();
            (x, inv)
        };
        Ok(Self {
            ord,
            chol,
            x,
            schur_inv,
        })
    }

    pub fn landmark(&self, label: &str) -> Option<Mat6> {
        let j = *self.ord.landmarks.get(label)?;
        Some(self.schur_inv.fixed_view::<6, 6>(6 * j, 6 * j).into_owned())
    }

    pub fn pose(&self, frame: usize) -> Option<Mat6> {
        let i = *self.ord.poses.get(&frame)?;
        let n = self.ord.n_poses();
        let mut e = vec![Matrix6xX::zeros(6); n];
        e[i] = Matrix6xX::from_column_slice(Mat6::identity().as_slice());
        let col = self.chol.solve(&e);
        let mut out = Mat6::from_column_slice(col[i].as_slice());
        if !self.x.is_empty() {
            out += &self.x[i] * &self.schur_inv * self.x[i].transpose();
        }
        Some(out)
    }
}

/// Dense information matrix `J^T J` in solver ordering with the ordering
/// used: poses by frame, then landmarks by label.
pub(crate) fn dense_information(g: &GraphState) -> Result<(DMatrix<f64>, Vec<Var>), MapperError> {
    let ord = Ordering::new(g);
    let dim = 6 * (ord.n_poses() + ord.n_landmarks());
    let mut h = DMatrix::zeros(dim, dim);
    for f in &g.factors {
        let (_, jac) = linearize_factor(g, f).ok_or(MapperError::Diverged)?;
        let blocks: Vec<usize> = f.vars.iter().map(|v| ord.block(v)).collect();
        for (a, ja) in blocks.iter().zip(&jac) {
            for (b, jb) in blocks.iter().zip(&jac) {
                let mut blk = h.view_mut((6 * a, 6 * b), (6, 6));
                blk += ja.transpose() * jb;
            }
        }
    }
    let vars = ord
        .poses
        .keys()
        .map(|k| Var::Pose(*k))
        .chain(ord.landmarks.keys().map(|l| Var::Landmark(l.clone())))
        .collect();
    Ok((h, vars))
}
