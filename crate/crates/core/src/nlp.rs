//! Small dense SQP solver for the MPC transcriptions.
//!
//! Problems are posed as
//!
//! ```text
//! min f(x)  s.t.  c_E(x) = 0,  c_I(x) >= 0,  l <= x <= u
//! ```
//!
//! and solved with a damped-BFGS SQP method, an l1 merit line search and
//! elastic relaxation of the inequality rows whenever a QP subproblem is
//! infeasible. Problems whose equality Jacobian is square and invertible in a
//! subset of the variables (the shooting states of an OCP) may declare that
//! subset; the QP is then solved in the reduced space of the remaining
//! variables, which keeps subproblems small.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Result;

pub trait NlpProblem {
    fn n_vars(&self) -> usize;
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;

    /// Lower and upper variable bounds; infinite entries are unbounded.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);

    fn objective(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        central_gradient(|z| self.objective(z), x, grad);
    }

    /// Writes `c_E(x)` into `eq` and `c_I(x)` (feasible when `>= 0`) into `ineq`.
    fn constraints(&self, x: &[f64], eq: &mut [f64], ineq: &mut [f64]);

    fn jacobian(&self, x: &[f64], jac_eq: &mut DMatrix<f64>, jac_ineq: &mut DMatrix<f64>) {
        central_jacobian(self, x, jac_eq, jac_ineq);
    }

    /// Initial Hessian approximation; identity when `None`.
    fn hessian_hint(&self) -> Option<DMatrix<f64>> {
        None
    }

    /// Variables in which the equality Jacobian is square and invertible.
    fn dependent_variables(&self) -> Option<Vec<usize>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Failed,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub merit: f64,
    pub kkt: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub lambda_eq: Vec<f64>,
    pub lambda_ineq: Vec<f64>,
    /// Net bound multipliers (lower minus upper).
    pub lambda_bounds: Vec<f64>,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub elastic_steps: usize,
    pub solve_time: f64,
    pub status: SolveStatus,
    pub message: Option<String>,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct SqpOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Linear penalty on the slacks of an elastic QP.
    pub elastic_penalty: f64,
    pub record_trace: bool,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100,
            elastic_penalty: 1e4,
            record_trace: false,
        }
    }
}

/// Central-difference gradient of a scalar function.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &mut [f64]) {
    let mut z = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        z[i] = x[i] + h;
        let fp = f(&z);
        z[i] = x[i] - h;
        let fm = f(&z);
        z[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
}

/// Central-difference Jacobians of a problem's constraints.
pub fn central_jacobian<P: NlpProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    jac_eq: &mut DMatrix<f64>,
    jac_ineq: &mut DMatrix<f64>,
) {
    let (me, mi) = (problem.n_eq(), problem.n_ineq());
    let mut z = x.to_vec();
    let (mut ep, mut em) = (vec![0.0; me], vec![0.0; me]);
    let (mut ip, mut im) = (vec![0.0; mi], vec![0.0; mi]);
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(1.0);
        z[j] = x[j] + h;
        problem.constraints(&z, &mut ep, &mut ip);
        z[j] = x[j] - h;
        problem.constraints(&z, &mut em, &mut im);
        z[j] = x[j];
        for i in 0..me {
            jac_eq[(i, j)] = (ep[i] - em[i]) / (2.0 * h);
        }
        for i in 0..mi {
            jac_ineq[(i, j)] = (ip[i] - im[i]) / (2.0 * h);
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub gradient_error: f64,
    pub jacobian_eq_error: f64,
    pub jacobian_ineq_error: f64,
    pub flagged: bool,
}

impl FdReport {
    pub fn max_error(&self) -> f64 {
        self.gradient_error
            .max(self.jacobian_eq_error)
            .max(self.jacobian_ineq_error)
    }
}

/// Compares a problem's analytic derivatives with central differences.
///
/// Errors are `|analytic - fd| / max(|fd|, 1)`, maximised over entries; the
/// report is flagged when any exceeds `1e-4`.
pub fn finite_diff_check<P: NlpProblem + ?Sized>(problem: &P, x: &[f64]) -> FdReport {
    let n = problem.n_vars();
    let (me, mi) = (problem.n_eq(), problem.n_ineq());
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);

    let mut grad = vec![0.0; n];
    problem.gradient(x, &mut grad);
    let mut fd = vec![0.0; n];
    central_gradient(|z| problem.objective(z), x, &mut fd);
    let gradient_error = grad
        .iter()
        .zip(&fd)
        .map(|(a, b)| rel(*a, *b))
        .fold(0.0, f64::max);

    let mut je = DMatrix::zeros(me, n);
    let mut ji = DMatrix::zeros(mi, n);
    problem.jacobian(x, &mut je, &mut ji);
    let mut fe = DMatrix::zeros(me, n);
    let mut fi = DMatrix::zeros(mi, n);
    central_jacobian(problem, x, &mut fe, &mut fi);
    let jacobian_eq_error = je
        .iter()
        .zip(fe.iter())
        .map(|(a, b)| rel(*a, *b))
        .fold(0.0, f64::max);
    let jacobian_ineq_error = ji
        .iter()
        .zip(fi.iter())
        .map(|(a, b)| rel(*a, *b))
        .fold(0.0, f64::max);

    let worst = gradient_error
        .max(jacobian_eq_error)
        .max(jacobian_ineq_error);
    FdReport {
        gradient_error,
        jacobian_eq_error,
        jacobian_ineq_error,
        flagged: worst > 1e-4,
    }
}

struct Point {
    x: Vec<f64>,
    f: f64,
    g: DVector<f64>,
    ce: DVector<f64>,
    ci: DVector<f64>,
    je: DMatrix<f64>,
    ji: DMatrix<f64>,
}

impl Point {
    fn new<P: NlpProblem + ?Sized>(problem: &P, x: Vec<f64>) -> Self {
        let n = x.len();
        let (me, mi) = (problem.n_eq(), problem.n_ineq());
        let f = problem.objective(&x);
        let mut g = vec![0.0; n];
        problem.gradient(&x, &mut g);
        let mut ce = vec![0.0; me];
        let mut ci = vec![0.0; mi];
        problem.constraints(&x, &mut ce, &mut ci);
        let mut je = DMatrix::zeros(me, n);
        let mut ji = DMatrix::zeros(mi, n);
        problem.jacobian(&x, &mut je, &mut ji);
        Self {
            x,
            f,
            g: DVector::from_vec(g),
            ce: DVector::from_vec(ce),
            ci: DVector::from_vec(ci),
            je,
            ji,
        }
    }

    fn is_finite(&self) -> bool {
        self.f.is_finite()
            && self.g.iter().all(|v| v.is_finite())
            && self.ce.iter().all(|v| v.is_finite())
            && self.ci.iter().all(|v| v.is_finite())
    }

    fn violation(&self) -> f64 {
        l1_violation(self.ce.as_slice(), self.ci.as_slice())
    }
}

struct QpStep {
    d: DVector<f64>,
    lambda_eq: DVector<f64>,
    lambda_ineq: DVector<f64>,
    lambda_bounds: DVector<f64>,
    /// l1 violation of the linearised constraints at the step.
    linear_violation: f64,
    elastic: bool,
}

/// Row of a QP in `quadprog` form: `a . z <= b`, tagged with its origin.
#[derive(Clone, Copy)]
enum RowKind {
    Ineq(usize),
    Upper(usize),
    Lower(usize),
}

struct QpData {
    q: DMatrix<f64>,
    c: DVector<f64>,
    eq_rows: Vec<(DVector<f64>, f64)>,
    rows: Vec<(DVector<f64>, f64, RowKind, bool)>,
}

fn solve_quadprog(data: &QpData, elastic: Option<f64>) -> Option<(DVector<f64>, Vec<f64>)> {
    let nz = data.c.len();
    // rows without coefficients cannot be influenced by the step; satisfied ones are dropped
    let kept: Vec<usize> = (0..data.rows.len())
        .filter(|&i| {
            let (row, rhs, _, _) = &data.rows[i];
            row.amax() > 1e-8 || *rhs < -1e-10
        })
        .collect();
    let soft: Vec<usize> = if elastic.is_some() {
        kept.iter().copied().filter(|&i| data.rows[i].3).collect()
    } else {
        Vec::new()
    };
    let ns = soft.len();
    let n = nz + ns;
    let mut q = vec![0.0; n * n];
    for i in 0..nz {
        for j in 0..nz {
            q[i * n + j] = 0.5 * (data.q[(i, j)] + data.q[(j, i)]);
        }
    }
    let mut c = vec![0.0; n];
    c[..nz].copy_from_slice(data.c.as_slice());
    if let Some(rho) = elastic {
        let curvature = 1e-6 * rho.max(1.0);
        for k in 0..ns {
            q[(nz + k) * n + nz + k] = curvature;
            c[nz + k] = rho;
        }
    }
    let meq = data.eq_rows.len();
    let n_rows = meq + kept.len() + ns;
    let mut a = vec![0.0; n_rows * n];
    let mut b = vec![0.0; n_rows];
    let mut r = 0;
    for (row, rhs) in &data.eq_rows {
        a[r * n..r * n + nz].copy_from_slice(row.as_slice());
        b[r] = *rhs;
        r += 1;
    }
    let mut slack_of = vec![usize::MAX; data.rows.len()];
    for (k, &i) in soft.iter().enumerate() {
        slack_of[i] = k;
    }
    for &i in &kept {
        let (row, rhs, _, _) = &data.rows[i];
        a[r * n..r * n + nz].copy_from_slice(row.as_slice());
        if slack_of[i] != usize::MAX {
            a[r * n + nz + slack_of[i]] = -1.0;
        }
        b[r] = *rhs;
        r += 1;
    }
    for k in 0..ns {
        a[r * n + nz + k] = -1.0;
        r += 1;
    }
    let sol = quadprog::solve_qp(&mut q, &c, &a, &b, meq, false).ok()?;
    if sol.sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let z = DVector::from_column_slice(&sol.sol[..nz]);
    let mut lagr = vec![0.0; meq + data.rows.len()];
    lagr[..meq].copy_from_slice(&sol.lagr[..meq]);
    for (k, &i) in kept.iter().enumerate() {
        lagr[meq + i] = sol.lagr[meq + k];
    }
    Some((z, lagr))
}

fn l1_violation(ce: &[f64], ci: &[f64]) -> f64 {
    ce.iter().map(|v| v.abs()).sum::<f64>() + ci.iter().map(|v| (-v).max(0.0)).sum::<f64>()
}

fn merit_terms<P: NlpProblem + ?Sized>(problem: &P, x: &[f64], me: usize, mi: usize) -> (f64, f64) {
    let mut ce = vec![0.0; me];
    let mut ci = vec![0.0; mi];
    problem.constraints(x, &mut ce, &mut ci);
    (problem.objective(x), l1_violation(&ce, &ci))
}

/// Moves the dependent variables of a rejected full step so that the
/// linearised equalities hold at the trial point again.
fn second_order_correction(
    point: &Point,
    reduction: Option<&Reduction>,
    trial: &[f64],
    ce_trial: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> Option<Vec<f64>> {
    let red = reduction?;
    let jd = point.je.select_columns(&red.dependent);
    let dy = jd.lu().solve(&(-DVector::from_column_slice(ce_trial)))?;
    let mut x = trial.to_vec();
    for (r, &j) in red.dependent.iter().enumerate() {
        x[j] = (x[j] + dy[r]).clamp(lower[j], upper[j]);
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

struct Reduction {
    dependent: Vec<usize>,
    independent: Vec<usize>,
}

pub fn solve_sqp<P: NlpProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    options: &SqpOptions,
) -> NlpSolution {
    let start = Instant::now();
    let n = problem.n_vars();
    let (me, mi) = (problem.n_eq(), problem.n_ineq());
    let (lower, upper) = problem.bounds();
    let x0: Vec<f64> = x0
        .iter()
        .enumerate()
        .map(|(i, v)| v.clamp(lower[i], upper[i]))
        .collect();

    let reduction = problem.dependent_variables().and_then(|dep| {
        if dep.len() != me || me == 0 {
            return None;
        }
        let mut is_dep = vec![false; n];
        for &i in &dep {
            is_dep[i] = true;
        }
        let independent = (0..n).filter(|i| !is_dep[*i]).collect();
        Some(Reduction {
            dependent: dep,
            independent,
        })
    });

    let hint = problem
        .hessian_hint()
        .unwrap_or_else(|| DMatrix::identity(n, n));
    let mut hess = hint.clone();
    let mut point = Point::new(problem, x0);
    let mut trace = Vec::new();
    let mut rho = 1.0_f64;
    let mut elastic_steps = 0;
    let mut resets = 0;
    let mut kkt = KktResiduals {
        stationarity: f64::INFINITY,
        primal: f64::INFINITY,
        complementarity: f64::INFINITY,
    };
    let mut multipliers = (DVector::zeros(me), DVector::zeros(mi), DVector::zeros(n));

    let finish = |point: Point,
                  multipliers: (DVector<f64>, DVector<f64>, DVector<f64>),
                  kkt: KktResiduals,
                  iterations: usize,
                  elastic_steps: usize,
                  status: SolveStatus,
                  message: Option<String>,
                  trace: Vec<TraceRow>| NlpSolution {
        objective: point.f,
        x: point.x,
        lambda_eq: multipliers.0.as_slice().to_vec(),
        lambda_ineq: multipliers.1.as_slice().to_vec(),
        lambda_bounds: multipliers.2.as_slice().to_vec(),
        kkt,
        iterations,
        elastic_steps,
        solve_time: start.elapsed().as_secs_f64(),
        status,
        message,
        trace,
    };

    if !point.is_finite() {
        return finish(
            point,
            multipliers,
            kkt,
            0,
            0,
            SolveStatus::Failed,
            Some("non-finite callback values at x0".into()),
            trace,
        );
    }

    let mut last_merit = None;
    let mut stalled = 0;
    for iter in 0..options.max_iter {
        let step = match solve_subproblem(
            &point,
            &hess,
            &lower,
            &upper,
            reduction.as_ref(),
            options,
            rho,
        ) {
            Some(s) => s,
            None => {
                if resets < 3 {
                    hess = hint.clone();
                    resets += 1;
                    continue;
                }
                return finish(
                    point,
                    multipliers,
                    kkt,
                    iter,
                    elastic_steps,
                    SolveStatus::Failed,
                    Some("QP subproblem could not be solved".into()),
                    trace,
                );
            }
        };
        if step.elastic {
            elastic_steps += 1;
        }

        kkt = kkt_residuals(&point, &step, &lower, &upper);
        let step_norm = step.d.amax();
        multipliers = (
            step.lambda_eq.clone(),
            step.lambda_ineq.clone(),
            step.lambda_bounds.clone(),
        );

        let lambda_max = step.lambda_eq.amax().max(step.lambda_ineq.amax());
        if step.elastic {
            // elastic multipliers sit at the penalty itself and would feed back into it
            rho = rho.max(options.elastic_penalty);
        } else if rho < 1.1 * lambda_max {
            rho = 1.5 * lambda_max + 1.0;
        }
        let merit = point.f + rho * point.violation();
        if step.elastic && last_merit.is_some_and(|m: f64| m - merit <= 1e-8 * m.abs().max(1.0)) {
            stalled += 1;
        } else {
            stalled = 0;
        }
        last_merit = Some(merit);
        if options.record_trace {
            trace.push(TraceRow {
                iter,
                merit,
                kkt: kkt.max(),
                step: step_norm,
            });
        }

        let x_scale = point.x.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let converged =
            kkt.max() <= options.tol || (step_norm <= 1e-12 * x_scale && kkt.primal <= options.tol);
        if converged {
            return finish(
                point,
                multipliers,
                kkt,
                iter,
                elastic_steps,
                SolveStatus::Converged,
                None,
                trace,
            );
        }
        if step.elastic && (step_norm <= 1e-10 * x_scale || stalled >= 5) {
            // stationary for the elastic (l1-penalised) problem: locally infeasible
            return finish(
                point,
                multipliers,
                kkt,
                iter,
                elastic_steps,
                SolveStatus::MaxIter,
                Some("stationary point of the elastic problem".into()),
                trace,
            );
        }

        let directional = step.d.dot(&point.g) - rho * (point.violation() - step.linear_violation);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= 1e-10 {
            let trial: Vec<f64> = point
                .x
                .iter()
                .zip(step.d.iter())
                .enumerate()
                .map(|(i, (x, d))| (x + alpha * d).clamp(lower[i], upper[i]))
                .collect();
            let f = problem.objective(&trial);
            let mut ce = vec![0.0; me];
            let mut ci = vec![0.0; mi];
            problem.constraints(&trial, &mut ce, &mut ci);
            let viol = l1_violation(&ce, &ci);
            let trial_merit = f + rho * viol;
            if trial_merit.is_finite() && trial_merit <= merit + 1e-4 * alpha * directional.min(0.0)
            {
                accepted = Some(trial);
                break;
            }
            if alpha == 1.0 {
                if let Some(corrected) =
                    second_order_correction(&point, reduction.as_ref(), &trial, &ce, &lower, &upper)
                {
                    let (f, viol) = merit_terms(problem, &corrected, me, mi);
                    let corrected_merit = f + rho * viol;
                    if corrected_merit.is_finite()
                        && corrected_merit <= merit + 1e-4 * directional.min(0.0)
                    {
                        accepted = Some(corrected);
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }

        let Some(trial) = accepted else {
            if resets < 3 && hess != hint {
                hess = hint.clone();
                resets += 1;
                continue;
            }
            return finish(
                point,
                multipliers,
                kkt,
                iter,
                elastic_steps,
                SolveStatus::Failed,
                Some("line search failed".into()),
                trace,
            );
        };

        let next = Point::new(problem, trial);
        if !next.is_finite() {
            return finish(
                point,
                multipliers,
                kkt,
                iter,
                elastic_steps,
                SolveStatus::Failed,
                Some("non-finite callback values".into()),
                trace,
            );
        }
        let lagrangian_gradient = |p: &Point| {
            let mut gl = p.g.clone();
            if me > 0 {
                gl -= p.je.transpose() * &step.lambda_eq;
            }
            if mi > 0 {
                gl -= p.ji.transpose() * &step.lambda_ineq;
            }
            gl
        };
        let s = DVector::from_iterator(n, next.x.iter().zip(&point.x).map(|(a, b)| a - b));
        let y = lagrangian_gradient(&next) - lagrangian_gradient(&point);
        damped_bfgs_update(&mut hess, &s, &y);
        point = next;
    }

    finish(
        point,
        multipliers,
        kkt,
        options.max_iter,
        elastic_steps,
        SolveStatus::MaxIter,
        None,
        trace,
    )
}

fn damped_bfgs_update(hess: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let hs = &*hess * s;
    let shs = s.dot(&hs);
    if shs <= 1e-16 * s.norm_squared().max(1e-300) || !shs.is_finite() {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * shs {
        1.0
    } else {
        0.8 * shs / (shs - sy)
    };
    let r = y * theta + &hs * (1.0 - theta);
    let sr = s.dot(&r);
    if sr <= 0.0 || !sr.is_finite() {
        return;
    }
    hess.ger(1.0 / sr, &r, &r, 1.0);
    hess.ger(-1.0 / shs, &hs, &hs, 1.0);
}

fn kkt_residuals(point: &Point, step: &QpStep, lower: &[f64], upper: &[f64]) -> KktResiduals {
    let n = point.x.len();
    let mut grad_l = point.g.clone();
    if !step.lambda_eq.is_empty() {
        grad_l -= point.je.transpose() * &step.lambda_eq;
    }
    if !step.lambda_ineq.is_empty() {
        grad_l -= point.ji.transpose() * &step.lambda_ineq;
    }
    grad_l -= &step.lambda_bounds;
    let scale = point.g.amax().max(1.0);
    let stationarity = grad_l.amax() / scale;

    let mut primal = point.ce.amax();
    for v in point.ci.iter() {
        primal = primal.max(-v);
    }
    for i in 0..n {
        primal = primal.max(lower[i] - point.x[i]).max(point.x[i] - upper[i]);
    }

    let mut comp = 0.0_f64;
    for (l, c) in step.lambda_ineq.iter().zip(point.ci.iter()) {
        comp = comp.max((l * c).abs());
    }
    for i in 0..n {
        let nu = step.lambda_bounds[i];
        if nu > 0.0 && lower[i].is_finite() {
            comp = comp.max(nu * (point.x[i] - lower[i]));
        } else if nu < 0.0 && upper[i].is_finite() {
            comp = comp.max(-nu * (upper[i] - point.x[i]));
        }
    }
    KktResiduals {
        stationarity,
        primal: primal.max(0.0),
        complementarity: comp / scale,
    }
}

fn solve_subproblem(
    point: &Point,
    hess: &DMatrix<f64>,
    lower: &[f64],
    upper: &[f64],
    reduction: Option<&Reduction>,
    options: &SqpOptions,
    rho: f64,
) -> Option<QpStep> {
    match reduction {
        Some(red) => solve_reduced(point, hess, lower, upper, red, options, rho),
        None => solve_full(point, hess, lower, upper, options, rho),
    }
}

fn linear_violation(point: &Point, d: &DVector<f64>) -> f64 {
    let mut v = 0.0;
    if !point.ce.is_empty() {
        v += (&point.ce + &point.je * d)
            .iter()
            .map(|x| x.abs())
            .sum::<f64>();
    }
    if !point.ci.is_empty() {
        v += (&point.ci + &point.ji * d)
            .iter()
            .map(|x| (-x).max(0.0))
            .sum::<f64>();
    }
    v
}

fn solve_full(
    point: &Point,
    hess: &DMatrix<f64>,
    lower: &[f64],
    upper: &[f64],
    options: &SqpOptions,
    rho: f64,
) -> Option<QpStep> {
    let n = point.x.len();
    let (me, mi) = (point.ce.len(), point.ci.len());
    let eq_rows = (0..me)
        .map(|i| (point.je.row(i).transpose(), -point.ce[i]))
        .collect();
    let mut rows = Vec::new();
    for i in 0..mi {
        rows.push((
            -point.ji.row(i).transpose(),
            point.ci[i],
            RowKind::Ineq(i),
            true,
        ));
    }
    for j in 0..n {
        if upper[j].is_finite() {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            rows.push((e, upper[j] - point.x[j], RowKind::Upper(j), false));
        }
        if lower[j].is_finite() {
            let mut e = DVector::zeros(n);
            e[j] = -1.0;
            rows.push((e, point.x[j] - lower[j], RowKind::Lower(j), false));
        }
    }
    let data = QpData {
        q: hess.clone(),
        c: point.g.clone(),
        eq_rows,
        rows,
    };
    let (d, lagr, elastic) = match solve_quadprog(&data, None) {
        Some((d, l)) => (d, l, false),
        None => {
            let (d, l) = solve_quadprog(&data, Some(options.elastic_penalty.max(rho)))?;
            (d, l, true)
        }
    };
    // quadprog reports equality multipliers for a*z = b; our convention is c + J d = 0
    let lambda_eq = DVector::from_iterator(me, lagr[..me].iter().copied());
    let mut lambda_ineq = DVector::zeros(mi);
    let mut lambda_bounds = DVector::zeros(n);
    for (k, (_, _, kind, _)) in data.rows.iter().enumerate() {
        let l = lagr[me + k];
        match *kind {
            RowKind::Ineq(i) => lambda_ineq[i] = l,
            RowKind::Upper(j) => lambda_bounds[j] -= l,
            RowKind::Lower(j) => lambda_bounds[j] += l,
        }
    }
    // recover equality multipliers from stationarity in the least-squares sense
    let lambda_eq = if me > 0 {
        let mut rhs = &point.g + hess * &d - &lambda_bounds;
        if mi > 0 {
            rhs -= point.ji.transpose() * &lambda_ineq;
        }
        let jt = point.je.transpose();
        let normal = point.je.clone() * &jt;
        normal.lu().solve(&(&point.je * rhs)).unwrap_or(lambda_eq)
    } else {
        lambda_eq
    };
    let linear_violation = linear_violation(point, &d);
    Some(QpStep {
        d,
        lambda_eq,
        lambda_ineq,
        lambda_bounds,
        linear_violation,
        elastic,
    })
}

fn solve_reduced(
    point: &Point,
    hess: &DMatrix<f64>,
    lower: &[f64],
    upper: &[f64],
    red: &Reduction,
    options: &SqpOptions,
    rho: f64,
) -> Option<QpStep> {
    let n = point.x.len();
    let mi = point.ci.len();
    let nd = red.dependent.len();
    let ni = red.independent.len();

    let jd = point.je.select_columns(&red.dependent);
    let ji_cols = point.je.select_columns(&red.independent);
    let lu = jd.clone().lu();
    // d_D = p + T z
    let p = lu.solve(&(-&point.ce))?;
    let t = lu.solve(&(-ji_cols))?;

    let mut zmat = DMatrix::zeros(n, ni);
    let mut offset = DVector::zeros(n);
    for (k, &j) in red.independent.iter().enumerate() {
        zmat[(j, k)] = 1.0;
    }
    for (r, &j) in red.dependent.iter().enumerate() {
        zmat.row_mut(j).copy_from(&t.row(r));
        offset[j] = p[r];
    }

    let hz = hess * &zmat;
    let q = zmat.transpose() * &hz;
    let c = zmat.transpose() * (&point.g + hess * &offset);

    let mut rows = Vec::new();
    if mi > 0 {
        let jz = &point.ji * &zmat;
        let je = &point.ji * &offset;
        for i in 0..mi {
            rows.push((
                -jz.row(i).transpose(),
                point.ci[i] + je[i],
                RowKind::Ineq(i),
                true,
            ));
        }
    }
    for (k, &j) in red.independent.iter().enumerate() {
        if upper[j].is_finite() {
            let mut e = DVector::zeros(ni);
            e[k] = 1.0;
            rows.push((e, upper[j] - point.x[j], RowKind::Upper(j), false));
        }
        if lower[j].is_finite() {
            let mut e = DVector::zeros(ni);
            e[k] = -1.0;
            rows.push((e, point.x[j] - lower[j], RowKind::Lower(j), false));
        }
    }
    for (r, &j) in red.dependent.iter().enumerate() {
        if upper[j].is_finite() {
            rows.push((
                t.row(r).transpose(),
                upper[j] - point.x[j] - p[r],
                RowKind::Upper(j),
                true,
            ));
        }
        if lower[j].is_finite() {
            rows.push((
                -t.row(r).transpose(),
                point.x[j] - lower[j] + p[r],
                RowKind::Lower(j),
                true,
            ));
        }
    }

    let data = QpData {
        q,
        c,
        eq_rows: Vec::new(),
        rows,
    };
    let (z, lagr, elastic) = match solve_quadprog(&data, None) {
        Some((z, l)) => (z, l, false),
        None => {
            let (z, l) = solve_quadprog(&data, Some(options.elastic_penalty.max(rho)))?;
            (z, l, true)
        }
    };
    let d = &zmat * &z + &offset;

    let mut lambda_ineq = DVector::zeros(mi);
    let mut lambda_bounds = DVector::zeros(n);
    for (k, (_, _, kind, _)) in data.rows.iter().enumerate() {
        let l = lagr[k];
        match *kind {
            RowKind::Ineq(i) => lambda_ineq[i] = l,
            RowKind::Upper(j) => lambda_bounds[j] -= l,
            RowKind::Lower(j) => lambda_bounds[j] += l,
        }
    }
    // stationarity restricted to the dependent rows: J_D' lambda_E = (g + H d - J_I' l_I - nu)_D
    let mut resid = &point.g + hess * &d - &lambda_bounds;
    if mi > 0 {
        resid -= point.ji.transpose() * &lambda_ineq;
    }
    let rhs = DVector::from_iterator(nd, red.dependent.iter().map(|&j| resid[j]));
    let lambda_eq = jd.transpose().lu().solve(&rhs)?;
    let linear_violation = linear_violation(point, &d);
    Some(QpStep {
        d,
        lambda_eq,
        lambda_ineq,
        lambda_bounds,
        linear_violation,
        elastic,
    })
}

/// Writes an `iter,merit,kkt,step` trace.
pub fn write_trace_csv<W: Write>(writer: W, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
