//! Chance-constrained MPC over the hybrid model: mean and covariance are
//! propagated along the horizon and the state constraints are tightened
//! around the mean.

use std::cell::RefCell;
use std::io::Write;
use std::rc::Rc;

use nalgebra::{DMatrix, Matrix2, SMatrix, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mpc::{
    BandSchedule, MpcConfig, MpcController, OcpSolution, PredictionModel, ShootingOcp, StepRecord,
};
use crate::nlp::{solve_sqp, NlpProblem};
use crate::plant::State;
use crate::residual::{HybridModel, ResidualPredictor};

/// Half-width offset of the survival band around `x_ref` (mg/L).
pub const BAND_MARGIN: f64 = 20.0;

/// Biomass survival band at time argument `t` (d).
pub fn survival_band(t: f64, x_ref: f64) -> (f64, f64) {
    let lb = (x_ref - BAND_MARGIN) * (0.1 * t + 0.01).tanh();
    let ub = (x_ref + BAND_MARGIN) * (0.1 * t + 1.0).tanh();
    (lb, ub)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChanceSpec {
    /// Acceptance probability of each state chance constraint.
    pub p_x: f64,
    /// Time (d) from which the survival band is enforced.
    pub activation: f64,
}

impl Default for ChanceSpec {
    fn default() -> Self {
        Self {
            p_x: 0.99,
            activation: 30.0,
        }
    }
}

impl ChanceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..1.0).contains(&self.p_x) {
            return Err(Error::InvalidParameter(format!(
                "p_x must lie in [0.5, 1), got {}",
                self.p_x
            )));
        }
        if !self.activation.is_finite() {
            return Err(Error::InvalidParameter(
                "band activation time must be finite".into(),
            ));
        }
        Ok(())
    }

    /// One-sided standard-normal quantile of `p_x`.
    pub fn quantile(&self) -> f64 {
        normal_quantile(self.p_x)
    }

    /// Survival band at absolute time `t`, `None` before activation.
    pub fn band(&self, t: f64, x_ref: f64) -> Option<(f64, f64)> {
        (t >= self.activation - 1e-9).then(|| survival_band(t, x_ref))
    }

    /// Band at prediction steps `k = 1..=horizon` from time `t`.
    pub fn schedule(&self, t: f64, dt: f64, horizon: usize, x_ref: f64) -> BandSchedule {
        (1..=horizon)
            .map(|k| self.band(t + k as f64 * dt, x_ref))
            .collect()
    }
}

pub fn normal_quantile(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    Normal::standard().inverse_cdf(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Lower,
    Upper,
}

/// Backs a bound off by `z * sqrt(variance)` towards the interior.
pub fn tighten_bound(bound: f64, direction: Direction, variance: f64, z: f64) -> f64 {
    let backoff = z * variance.max(0.0).sqrt();
    match direction {
        Direction::Lower => bound + backoff,
        Direction::Upper => bound - backoff,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeliefState {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl BeliefState {
    /// A measured state: zero covariance.
    pub fn measured(x: &Vector2<f64>) -> Self {
        Self {
            mean: *x,
            cov: Matrix2::zeros(),
        }
    }
}

/// Joint covariance of `(x, u, d)`. The inputs are deterministic, so every
/// block involving `u` is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointCov {
    pub sigma_x: Matrix2<f64>,
    /// Residual block with process noise added.
    pub sigma_d: Matrix2<f64>,
    pub sigma_xd: Matrix2<f64>,
}

impl JointCov {
    /// First-order joint covariance at a belief, for residual gradient `grad`,
    /// residual variance `var` and process-noise covariance `sigma_w`.
    pub fn new(
        sigma_x: &Matrix2<f64>,
        grad: &Matrix2<f64>,
        var: &Vector2<f64>,
        sigma_w: &Matrix2<f64>,
    ) -> Self {
        Self {
            sigma_x: *sigma_x,
            sigma_d: Matrix2::from_diagonal(var) + sigma_w + grad * sigma_x * grad.transpose(),
            sigma_xd: sigma_x * grad.transpose(),
        }
    }

    /// Dense matrix ordered `(X, S, F, d_X, d_S)`.
    pub fn matrix(&self) -> SMatrix<f64, 5, 5> {
        let mut m = SMatrix::<f64, 5, 5>::zeros();
        m.fixed_view_mut::<2, 2>(0, 0).copy_from(&self.sigma_x);
        m.fixed_view_mut::<2, 2>(0, 3).copy_from(&self.sigma_xd);
        m.fixed_view_mut::<2, 2>(3, 0)
            .copy_from(&self.sigma_xd.transpose());
        m.fixed_view_mut::<2, 2>(3, 3).copy_from(&self.sigma_d);
        m
    }
}

/// Symmetrizes and floors the eigenvalues at zero.
pub fn psd_project(m: &Matrix2<f64>) -> Matrix2<f64> {
    let s = 0.5 * (m + m.transpose());
    let (a, b, c) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
    let half_tr = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    if half_tr - disc >= 0.0 {
        return s;
    }
    let eig = s.symmetric_eigen();
    let floored = eig.eigenvalues.map(|l| l.max(0.0));
    eig.eigenvectors * Matrix2::from_diagonal(&floored) * eig.eigenvectors.transpose()
}

/// One step of the belief recursion through `x+ = f(x, u) + d(x) + w`.
pub fn propagate_belief<M, P>(
    belief: &BeliefState,
    u: f64,
    s_f: f64,
    nominal: &M,
    residual: &P,
    sigma_w: &Matrix2<f64>,
) -> BeliefState
where
    M: PredictionModel + ?Sized,
    P: ResidualPredictor + ?Sized,
{
    let sens = nominal.predict(&belief.mean, u, s_f);
    let d = residual.residual(&belief.mean);
    let joint = JointCov::new(&belief.cov, &d.grad, &d.var, sigma_w).matrix();
    let mut map = SMatrix::<f64, 2, 5>::zeros();
    map.fixed_view_mut::<2, 2>(0, 0).copy_from(&sens.dx);
    map.fixed_view_mut::<2, 1>(0, 2).copy_from(&sens.du);
    map.fixed_view_mut::<2, 2>(0, 3)
        .copy_from(&Matrix2::identity());
    let cov = map * joint * map.transpose();
    BeliefState {
        mean: sens.next + d.mean,
        cov: psd_project(&cov),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmpcConfig {
    pub mpc: MpcConfig,
    pub chance: ChanceSpec,
    /// Relative step of the finite differences of the local linearization.
    pub fd_step: f64,
    /// Adds the covariance trace terms of the expected quadratic cost.
    pub expected_cost: bool,
}

impl Default for SmpcConfig {
    fn default() -> Self {
        Self {
            mpc: MpcConfig {
                horizon: 32,
                ..Default::default()
            },
            chance: ChanceSpec::default(),
            fd_step: 1e-5,
            expected_cost: true,
        }
    }
}

impl SmpcConfig {
    pub fn validate(&self) -> Result<()> {
        self.mpc.validate()?;
        self.chance.validate()?;
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidParameter("fd_step must be positive".into()));
        }
        Ok(())
    }
}

struct Propagation {
    cov: Vec<Matrix2<f64>>,
    /// `dcov[k][j] = d Sigma_k / d z_j`.
    dcov: Option<Vec<Vec<Matrix2<f64>>>>,
}

/// The tractable chance-constrained OCP: multiple shooting in the mean,
/// single shooting in the covariance.
pub struct SmpcOcp<'a, P: ResidualPredictor + ?Sized> {
    base: ShootingOcp<'a, HybridModel<'a, P>>,
    hybrid: &'a HybridModel<'a, P>,
    sigma_w: Matrix2<f64>,
    z: f64,
    x_min: Vector2<f64>,
    fd_step: f64,
    expected_cost: bool,
    band: BandSchedule,
    band_rows: Vec<usize>,
    cache: RefCell<Option<(Vec<f64>, Rc<Propagation>)>>,
}

impl<'a, P: ResidualPredictor + ?Sized> SmpcOcp<'a, P> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: &SmpcConfig,
        x0: State,
        u_prev: f64,
        s_f: f64,
        hybrid: &'a HybridModel<'a, P>,
        sigma_w: Matrix2<f64>,
        band: BandSchedule,
    ) -> Self {
        let base = ShootingOcp::new(
            &config.mpc,
            x0,
            u_prev,
            s_f,
            hybrid,
            vec![None; config.mpc.horizon],
        );
        let band_rows = band
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_some())
            .map(|(k, _)| k + 1)
            .collect();
        Self {
            base,
            hybrid,
            sigma_w,
            z: config.chance.quantile(),
            x_min: Vector2::from(config.mpc.x_min),
            fd_step: config.fd_step,
            expected_cost: config.expected_cost,
            band,
            band_rows,
            cache: RefCell::new(None),
        }
    }

    pub fn initial_guess(&self, inputs: &[f64], states: &[Vector2<f64>]) -> Vec<f64> {
        self.base.initial_guess(inputs, states)
    }

    pub fn states(&self, z: &[f64]) -> Vec<State> {
        self.base.states(z)
    }

    /// Predicted state covariances `Sigma_0 .. Sigma_N` along `z`.
    pub fn covariances(&self, z: &[f64]) -> Vec<Matrix2<f64>> {
        self.propagation(z, false).cov.clone()
    }

    /// Tightened band at steps `k = 1..=N` for the covariances along `z`.
    pub fn tightened_band(&self, z: &[f64]) -> Vec<Option<(f64, f64)>> {
        let cov = self.covariances(z);
        self.band
            .iter()
            .enumerate()
            .map(|(i, b)| {
                b.map(|(lb, ub)| {
                    let v = cov[i + 1][(0, 0)];
                    (
                        tighten_bound(lb, Direction::Lower, v, self.z),
                        tighten_bound(ub, Direction::Upper, v, self.z),
                    )
                })
            })
            .collect()
    }

    fn local(&self, x: &Vector2<f64>, u: f64) -> (Matrix2<f64>, Matrix2<f64>) {
        let sens = self.hybrid.nominal.predict(x, u, self.base.s_f);
        let d = self.hybrid.residual.residual(x);
        (
            sens.dx + d.grad,
            Matrix2::from_diagonal(&d.var) + self.sigma_w,
        )
    }

    fn propagation(&self, z: &[f64], derivatives: bool) -> Rc<Propagation> {
        if let Some((zc, p)) = self.cache.borrow().as_ref() {
            if zc.as_slice() == z && (p.dcov.is_some() || !derivatives) {
                return p.clone();
            }
        }
        let p = Rc::new(self.propagate(z, derivatives));
        *self.cache.borrow_mut() = Some((z.to_vec(), p.clone()));
        p
    }

    fn propagate(&self, z: &[f64], derivatives: bool) -> Propagation {
        let l = &self.base.layout;
        let n = l.horizon;
        let nv = l.n_vars();
        let mut cov = vec![Matrix2::zeros(); n + 1];
        let mut dcov = derivatives.then(|| vec![vec![Matrix2::<f64>::zeros(); nv]; n + 1]);
        for k in 0..n {
            let xk = l.state(z, k, &self.base.x0);
            let uk = z[l.u(k)];
            let (a, v) = self.local(&xk, uk);
            let sigma = cov[k];
            cov[k + 1] = psd_project(&(a * sigma * a.transpose() + v));
            let Some(dcov) = dcov.as_mut() else { continue };
            let (prev, next) = dcov.split_at_mut(k + 1);
            let (dprev, dnext) = (&prev[k], &mut next[0]);
            for j in 0..nv {
                let d = dprev[j];
                if d != Matrix2::zeros() {
                    dnext[j] = a * d * a.transpose();
                }
            }
            let sym = |da: Matrix2<f64>| {
                let t = da * sigma * a.transpose();
                t + t.transpose()
            };
            if sigma != Matrix2::zeros() {
                let h = self.fd_step * uk.abs().max(1.0);
                let ap = self.hybrid.nominal.predict(&xk, uk + h, self.base.s_f).dx;
                let am = self.hybrid.nominal.predict(&xk, uk - h, self.base.s_f).dx;
                dnext[l.u(k)] += sym((ap - am) / (2.0 * h));
            }
            if k > 0 {
                let i = l.x(k);
                for c in 0..2 {
                    let h = self.fd_step * z[i + c].abs().max(1.0);
                    let mut xp = xk;
                    let mut xm = xk;
                    xp[c] += h * l.scale[c];
                    xm[c] -= h * l.scale[c];
                    let (ap, vp) = self.local(&xp, uk);
                    let (am, vm) = self.local(&xm, uk);
                    dnext[i + c] += sym((ap - am) / (2.0 * h)) + (vp - vm) / (2.0 * h);
                }
            }
        }
        Propagation { cov, dcov }
    }

    fn weight(&self, k: usize) -> Vector2<f64> {
        if k == self.base.layout.horizon {
            self.base.cost.q_terminal
        } else {
            self.base.cost.q_stage
        }
    }

    fn rows(&self) -> impl Iterator<Item = (usize, usize, Direction, f64)> + '_ {
        let l = &self.base.layout;
        let bounds = (1..=l.horizon).flat_map(move |k| {
            [
                (k, 0, Direction::Lower, self.x_min[0]),
                (k, 1, Direction::Lower, self.x_min[1]),
            ]
        });
        let band = self.band_rows.iter().flat_map(move |&k| {
            let (lb, ub) = self.band[k - 1].expect("band row");
            [(k, 0, Direction::Lower, lb), (k, 0, Direction::Upper, ub)]
        });
        bounds.chain(band)
    }
}

impl<P: ResidualPredictor + ?Sized> NlpProblem for SmpcOcp<'_, P> {
    fn n_vars(&self) -> usize {
        self.base.n_vars()
    }
    fn n_eq(&self) -> usize {
        self.base.n_eq()
    }
    fn n_ineq(&self) -> usize {
        2 * self.base.layout.horizon + 2 * self.band_rows.len()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let (mut lower, upper) = self.base.bounds();
        let l = &self.base.layout;
        for k in 1..=l.horizon {
            lower[l.x(k)] = f64::NEG_INFINITY;
            lower[l.x(k) + 1] = f64::NEG_INFINITY;
        }
        (lower, upper)
    }
    fn objective(&self, z: &[f64]) -> f64 {
        if !self.expected_cost {
            return self.base.objective(z);
        }
        let p = self.propagation(z, false);
        let trace: f64 = (1..=self.base.layout.horizon)
            .map(|k| self.weight(k).dot(&p.cov[k].diagonal()))
            .sum();
        self.base.objective(z) + self.base.cost.scale * trace
    }
    fn gradient(&self, z: &[f64], g: &mut [f64]) {
        self.base.gradient(z, g);
        if !self.expected_cost {
            return;
        }
        let p = self.propagation(z, true);
        let dcov = p.dcov.as_ref().expect("derivatives");
        let scale = self.base.cost.scale;
        for k in 1..=self.base.layout.horizon {
            let w = self.weight(k);
            for (gj, d) in g.iter_mut().zip(&dcov[k]) {
                *gj += scale * w.dot(&d.diagonal());
            }
        }
    }
    fn constraints(&self, z: &[f64], ce: &mut [f64], ci: &mut [f64]) {
        self.base.constraints(z, ce, &mut []);
        let p = self.propagation(z, false);
        let l = &self.base.layout;
        for (r, (k, c, dir, bound)) in self.rows().enumerate() {
            let tight = tighten_bound(bound, dir, p.cov[k][(c, c)], self.z) / l.scale[c];
            let xi = z[l.x(k) + c];
            ci[r] = match dir {
                Direction::Lower => xi - tight,
                Direction::Upper => tight - xi,
            };
        }
    }
    fn jacobian(&self, z: &[f64], je: &mut DMatrix<f64>, ji: &mut DMatrix<f64>) {
        let mut empty = DMatrix::zeros(0, self.n_vars());
        self.base.jacobian(z, je, &mut empty);
        ji.fill(0.0);
        let p = self.propagation(z, true);
        let dcov = p.dcov.as_ref().expect("derivatives");
        let l = &self.base.layout;
        for (r, (k, c, dir, _)) in self.rows().enumerate() {
            let sign = match dir {
                Direction::Lower => 1.0,
                Direction::Upper => -1.0,
            };
            ji[(r, l.x(k) + c)] = sign;
            let var = p.cov[k][(c, c)];
            if var > 1e-300 && self.z != 0.0 {
                // d(z sqrt(v)) = z dv / (2 sqrt(v)), the back-off moves the bound inwards
                let f = self.z / (2.0 * var.sqrt() * l.scale[c]);
                for (j, d) in dcov[k].iter().enumerate() {
                    ji[(r, j)] -= f * d[(c, c)];
                }
            }
        }
    }
    fn hessian_hint(&self) -> Option<DMatrix<f64>> {
        self.base.hessian_hint()
    }
    fn dependent_variables(&self) -> Option<Vec<usize>> {
        self.base.dependent_variables()
    }
}

#[derive(Debug, Clone)]
pub struct SmpcSolution {
    pub ocp: OcpSolution,
    /// `Sigma_0 .. Sigma_N` along the solution.
    pub covariances: Vec<Matrix2<f64>>,
    /// Tightened band at steps `k = 1..=N`.
    pub tightened: Vec<Option<(f64, f64)>>,
    pub band: BandSchedule,
}

/// Receding-horizon stochastic MPC over a nominal model plus learned residual.
#[derive(Debug, Clone)]
pub struct SmpcController {
    pub config: SmpcConfig,
    pub mpc: MpcController,
    pub sigma_w: Matrix2<f64>,
}

impl SmpcController {
    pub fn new(config: SmpcConfig, sigma_w: Matrix2<f64>) -> Self {
        let mpc = MpcController::new(config.mpc.clone());
        Self {
            config,
            mpc,
            sigma_w,
        }
    }

    /// Solves at measured state `x0` and time `t`, applies the first mean input
    /// and holds the last input when the solver fails.
    pub fn step<P: ResidualPredictor + ?Sized>(
        &mut self,
        hybrid: &HybridModel<'_, P>,
        x0: State,
        t: f64,
        s_f: f64,
    ) -> (StepRecord, SmpcSolution) {
        let cfg = &self.config;
        let band = cfg
            .chance
            .schedule(t, cfg.mpc.dt, cfg.mpc.horizon, cfg.mpc.x_ref[0]);
        let ocp = SmpcOcp::new(
            cfg,
            x0,
            self.mpc.u_prev,
            s_f,
            hybrid,
            self.sigma_w,
            band.clone(),
        );
        let (inputs, states) = self.mpc.guess(&x0.to_vector());
        let guess = ocp.initial_guess(&inputs, &states);
        let sol = solve_sqp(&ocp, &guess, &self.mpc.options());
        let n = cfg.mpc.horizon;
        let ocp_sol = OcpSolution::from_nlp(&sol, sol.x[..n].to_vec(), ocp.states(&sol.x));
        let record = self.mpc.apply(&ocp_sol);
        let solution = SmpcSolution {
            ocp: ocp_sol,
            covariances: ocp.covariances(&sol.x),
            tightened: ocp.tightened_band(&sol.x),
            band,
        };
        (record, solution)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmpcLogRow {
    pub t: f64,
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "F")]
    pub f: f64,
    pub lb: Option<f64>,
    pub ub: Option<f64>,
    pub tight_lb: Option<f64>,
    pub tight_ub: Option<f64>,
    pub solve_ms: f64,
    pub status: String,
    pub model_kind: String,
}

/// Writes `t,X,S,F,lb,ub,tight_lb,tight_ub,solve_ms,status,model_kind` rows;
/// inactive band entries are empty.
pub fn write_smpc_log<W: Write>(writer: W, rows: &[SmpcLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::DiscreteModel;
    use crate::nlp::{finite_diff_check, SolveStatus};
    use crate::plant::{PlantParams, StepSensitivity, SAMPLING_INTERVAL};
    use crate::residual::{ResidualPrediction, ZeroResidual};
    use proptest::prelude::*;

    struct Scalar;

    impl PredictionModel for Scalar {
        fn predict(&self, x: &Vector2<f64>, _u: f64, _s_f: f64) -> StepSensitivity {
            StepSensitivity {
                next: 0.9 * x,
                dx: Matrix2::identity() * 0.9,
                du: Vector2::zeros(),
            }
        }
    }

    struct ConstVar(f64);

    impl ResidualPredictor for ConstVar {
        fn residual(&self, _x: &Vector2<f64>) -> ResidualPrediction {
            ResidualPrediction {
                mean: Vector2::zeros(),
                var: Vector2::repeat(self.0),
                grad: Matrix2::zeros(),
            }
        }
    }

    /// Smooth residual with state-dependent mean and variance.
    struct Smooth;

    impl ResidualPredictor for Smooth {
        fn residual(&self, x: &Vector2<f64>) -> ResidualPrediction {
            let dx = (x[0] - 1000.0) / 100.0;
            let ds = (x[1] - 100.0) / 10.0;
            ResidualPrediction {
                mean: Vector2::new(8.0 + 0.5 * dx, -3.0 + 0.2 * ds * ds),
                var: Vector2::new(1.0 + 0.5 * dx * dx, 2.0 + (0.3 * ds).sin() + 0.2 * ds * ds),
                grad: Matrix2::new(0.5 / 100.0, 0.0, 0.0, 0.4 * ds / 10.0),
            }
        }
    }

    /// Exact one-step mismatch at the reference input, with a smooth variance.
    struct Oracle {
        truth: DiscreteModel,
        nominal: DiscreteModel,
    }

    impl Oracle {
        fn new() -> Self {
            let p = PlantParams::default();
            Self {
                truth: DiscreteModel {
                    reactor: p.true_plant(),
                    dt: SAMPLING_INTERVAL,
                },
                nominal: DiscreteModel::nominal(&p, SAMPLING_INTERVAL),
            }
        }
    }

    impl ResidualPredictor for Oracle {
        fn residual(&self, x: &Vector2<f64>) -> ResidualPrediction {
            let t = self.truth.predict(x, 0.714286, 5500.0);
            let n = self.nominal.predict(x, 0.714286, 5500.0);
            let r = (x - Vector2::new(1046.28, 101.615)).component_div(&Vector2::new(100.0, 20.0));
            ResidualPrediction {
                mean: t.next - n.next,
                var: Vector2::new(0.5 + 0.2 * r[0] * r[0], 0.3 + 0.1 * r[1] * r[1]),
                grad: t.dx - n.dx,
            }
        }
    }

    #[test]
    fn band_examples() {
        let (lb, ub) = survival_band(0.0, 1046.28);
        assert!((lb - 10.26).abs() < 0.1, "{lb}");
        assert!((ub - 812.1).abs() < 0.1, "{ub}");
        let (lb, ub) = survival_band(1e3, 1046.28);
        assert!((lb - 1026.28).abs() < 1e-9 && (ub - 1066.28).abs() < 1e-9);
        let spec = ChanceSpec::default();
        assert!(spec.band(29.9, 1046.28).is_none());
        assert_eq!(spec.band(30.0, 1046.28), Some(survival_band(30.0, 1046.28)));
    }

    #[test]
    fn quantile_and_tightening_examples() {
        let spec = ChanceSpec::default();
        assert!(
            (tighten_bound(0.0, Direction::Lower, 1.0, spec.quantile()) - 2.32635).abs() < 1e-5
        );
        assert_eq!(
            tighten_bound(10.0, Direction::Upper, 0.0, spec.quantile()),
            10.0
        );
        assert_eq!(
            ChanceSpec {
                p_x: 0.5,
                ..Default::default()
            }
            .quantile(),
            0.0
        );
        assert!(ChanceSpec {
            p_x: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ChanceSpec {
            p_x: 0.4,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn scalar_propagation_example() {
        let b = BeliefState {
            mean: Vector2::new(1.0, 2.0),
            cov: Matrix2::identity() * 0.04,
        };
        let next = propagate_belief(&b, 0.0, 0.0, &Scalar, &ConstVar(0.01), &Matrix2::zeros());
        assert_eq!(next.cov[(0, 0)], 0.81 * 0.04 + 0.01);
        assert!((next.cov[(0, 0)] - 0.0424).abs() < 1e-15);
        assert_eq!(next.cov[(0, 1)], 0.0);
        assert_eq!(next.mean, Vector2::new(0.9, 1.8));
    }

    #[test]
    fn zero_variance_keeps_covariance_zero() {
        let p = PlantParams::default();
        let nominal = DiscreteModel::nominal(&p, SAMPLING_INTERVAL);
        let hybrid = HybridModel::new(nominal, &Smooth);
        let mut b = BeliefState::measured(&Vector2::new(900.0, 90.0));
        let zero_var = ZeroVarianceOf(&Smooth);
        for _ in 0..20 {
            let next = propagate_belief(&b, 0.7, 5500.0, &nominal, &zero_var, &Matrix2::zeros());
            let (m, _) =
                hybrid.hybrid_step(State::from_vector(&b.mean), 0.7, 5500.0, Vector2::zeros());
            assert_eq!(next.cov, Matrix2::zeros());
            assert_eq!(next.mean, m.to_vector());
            b = next;
        }
    }

    struct ZeroVarianceOf<'a, P>(&'a P);

    impl<P: ResidualPredictor> ResidualPredictor for ZeroVarianceOf<'_, P> {
        fn residual(&self, x: &Vector2<f64>) -> ResidualPrediction {
            ResidualPrediction {
                var: Vector2::zeros(),
                ..self.0.residual(x)
            }
        }
    }

    #[test]
    fn joint_block_product_matches_closed_form() {
        let p = PlantParams::default();
        let nominal = DiscreteModel::nominal(&p, SAMPLING_INTERVAL);
        let x = Vector2::new(1020.0, 95.0);
        let sigma = Matrix2::new(4.0, 0.5, 0.5, 1.0);
        let sw = p.noise_covariance(SAMPLING_INTERVAL);
        let b = BeliefState {
            mean: x,
            cov: sigma,
        };
        let next = propagate_belief(&b, 0.8, 5400.0, &nominal, &Smooth, &sw);
        let a = nominal.predict(&x, 0.8, 5400.0).dx + Smooth.residual(&x).grad;
        let closed =
            a * sigma * a.transpose() + Matrix2::from_diagonal(&Smooth.residual(&x).var) + sw;
        assert!((next.cov - closed).abs().max() < 1e-10);

        let j = JointCov::new(
            &sigma,
            &Smooth.residual(&x).grad,
            &Smooth.residual(&x).var,
            &sw,
        )
        .matrix();
        assert_eq!(j, j.transpose());
        assert!(j.row(2).iter().all(|v| *v == 0.0));
        assert!(j.symmetric_eigen().eigenvalues.min() > -1e-9);
    }

    #[test]
    fn projection_floors_negative_eigenvalues() {
        let m = Matrix2::new(1.0, 2.0, 2.0, 1.0);
        let p = psd_project(&m);
        assert!(p.symmetric_eigen().eigenvalues.min() >= -1e-12);
        assert!((p - Matrix2::new(1.5, 1.5, 1.5, 1.5)).abs().max() < 1e-12);
        let ok = Matrix2::new(2.0, 0.3, 0.3, 1.0);
        assert_eq!(psd_project(&ok), ok);
    }

    fn smpc_config(p_x: f64) -> SmpcConfig {
        SmpcConfig {
            chance: ChanceSpec {
                p_x,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let p = PlantParams::default();
        let hybrid = HybridModel::new(DiscreteModel::nominal(&p, SAMPLING_INTERVAL), &Smooth);
        let cfg = SmpcConfig {
            mpc: MpcConfig {
                horizon: 8,
                ..Default::default()
            },
            ..smpc_config(0.99)
        };
        let band = cfg
            .chance
            .schedule(30.0, SAMPLING_INTERVAL, 8, cfg.mpc.x_ref[0]);
        let ocp = SmpcOcp::new(
            &cfg,
            State::new(1030.0, 98.0),
            0.7,
            5450.0,
            &hybrid,
            p.noise_covariance(SAMPLING_INTERVAL),
            band,
        );
        let inputs: Vec<f64> = (0..8).map(|k| 0.65 + 0.02 * k as f64).collect();
        let z = ShootingOcp::new(
            &cfg.mpc,
            State::new(1030.0, 98.0),
            0.7,
            5450.0,
            &hybrid,
            vec![None; 8],
        )
        .rollout(&inputs);
        let mut z = z;
        for (i, v) in z.iter_mut().enumerate().skip(8) {
            *v *= 1.0 + 1e-3 * ((i as f64).sin());
        }
        let report = finite_diff_check(&ocp, &z);
        assert!(report.max_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn trace_grows_along_steady_state_horizon() {
        let p = PlantParams::default();
        let hybrid = HybridModel::new(
            DiscreteModel::nominal(&p, SAMPLING_INTERVAL),
            &ConstVar(0.5),
        );
        let cfg = smpc_config(0.99);
        let x = Vector2::new(1046.28, 101.615);
        let ocp = SmpcOcp::new(
            &cfg,
            State::from_vector(&x),
            0.714286,
            5500.0,
            &hybrid,
            p.noise_covariance(SAMPLING_INTERVAL),
            vec![None; 32],
        );
        let z = ocp.initial_guess(&[0.714286; 32], &[x; 33]);
        let cov = ocp.covariances(&z);
        assert_eq!(cov[0], Matrix2::zeros());
        for w in cov.windows(2) {
            assert!(w[1].trace() >= w[0].trace() - 1e-12);
        }
    }

    #[test]
    fn zero_uncertainty_reduces_to_hybrid_mean_mpc() {
        let p = PlantParams::default();
        let oracle = Oracle::new();
        let residual = ZeroVarianceOf(&oracle);
        let hybrid = HybridModel::new(DiscreteModel::nominal(&p, SAMPLING_INTERVAL), &residual);
        let cfg = smpc_config(0.99);
        let x0 = State::new(1035.0, 99.0);
        let mut smpc = SmpcController::new(cfg.clone(), Matrix2::zeros());
        let (_, s) = smpc.step(&hybrid, x0, 31.0, 5500.0);
        let mut mpc = MpcController::new(cfg.mpc.clone());
        let band = cfg
            .chance
            .schedule(31.0, SAMPLING_INTERVAL, 32, cfg.mpc.x_ref[0]);
        let (_, m) = mpc.step(&hybrid, x0, 5500.0, band);
        assert_eq!(s.ocp.status, SolveStatus::Converged);
        assert_eq!(m.status, SolveStatus::Converged);
        let du = s
            .ocp
            .inputs
            .iter()
            .zip(&m.inputs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(du < 1e-4, "{du}");
        assert!(s.covariances.iter().all(|c| *c == Matrix2::zeros()));
    }

    #[test]
    fn median_chance_level_reduces_to_hybrid_mean_mpc() {
        let p = PlantParams::default();
        let oracle = Oracle::new();
        let hybrid = HybridModel::new(DiscreteModel::nominal(&p, SAMPLING_INTERVAL), &oracle);
        let cfg = SmpcConfig {
            expected_cost: false,
            ..smpc_config(0.5)
        };
        let sw = p.noise_covariance(SAMPLING_INTERVAL);
        for (x0, t) in [
            (State::new(1035.0, 99.0), 31.0),
            (State::new(1050.0, 105.0), 45.0),
            (State::new(1000.0, 90.0), 10.0),
        ] {
            let mut smpc = SmpcController::new(cfg.clone(), sw);
            let (_, s) = smpc.step(&hybrid, x0, t, 5500.0);
            let mut mpc = MpcController::new(cfg.mpc.clone());
            let band = cfg
                .chance
                .schedule(t, SAMPLING_INTERVAL, 32, cfg.mpc.x_ref[0]);
            let (_, m) = mpc.step(&hybrid, x0, 5500.0, band);
            let du = s
                .ocp
                .inputs
                .iter()
                .zip(&m.inputs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert_eq!(s.ocp.status, SolveStatus::Converged);
            assert!(du < 1e-6, "{du}");
            // the trace terms of the expected cost still depend on the trajectory
            let mut smpc = SmpcController::new(
                SmpcConfig {
                    expected_cost: true,
                    ..cfg.clone()
                },
                sw,
            );
            let (_, e) = smpc.step(&hybrid, x0, t, 5500.0);
            let du = e
                .ocp
                .inputs
                .iter()
                .zip(&m.inputs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(du < 1e-3, "{du}");
        }
    }

    #[test]
    fn tightened_band_is_strictly_inside() {
        let p = PlantParams::default();
        let hybrid = HybridModel::new(
            DiscreteModel::nominal(&p, SAMPLING_INTERVAL),
            &ConstVar(0.2),
        );
        let mut smpc =
            SmpcController::new(smpc_config(0.99), p.noise_covariance(SAMPLING_INTERVAL));
        let (rec, s) = smpc.step(&hybrid, State::new(1046.0, 101.0), 40.0, 5500.0);
        assert!(rec.solve_time > 0.0);
        for (b, t) in s.band.iter().zip(&s.tightened) {
            let ((lb, ub), (tl, tu)) = (b.unwrap(), t.unwrap());
            assert!(lb < tl && tu < ub);
        }
        for c in &s.covariances {
            assert!(psd_project(c) == *c);
        }
    }

    #[test]
    fn log_layout() {
        let row = SmpcLogRow {
            t: 0.0,
            x: 1.0,
            s: 2.0,
            f: 0.5,
            lb: None,
            ub: None,
            tight_lb: None,
            tight_ub: None,
            solve_ms: 3.0,
            status: "converged".into(),
            model_kind: "gp".into(),
        };
        let mut buf = Vec::new();
        write_smpc_log(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,X,S,F,lb,ub,tight_lb,tight_ub,solve_ms,status,model_kind\n0.0,1.0,2.0,0.5,,,,,3.0,converged,gp\n");
    }

    #[test]
    fn zero_residual_matches_nominal_recursion() {
        let p = PlantParams::default();
        let nominal = DiscreteModel::nominal(&p, SAMPLING_INTERVAL);
        let b = BeliefState::measured(&Vector2::new(500.0, 300.0));
        let next = propagate_belief(&b, 1.0, 5500.0, &nominal, &ZeroResidual, &Matrix2::zeros());
        assert_eq!(next.mean, nominal.predict(&b.mean, 1.0, 5500.0).next);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn propagation_is_psd(
            x in 0.0f64..3000.0, s in 0.0f64..3000.0, u in 0.0f64..2.0, sf in 4000.0f64..7000.0,
            l in proptest::array::uniform3(-30.0f64..30.0),
            g in proptest::array::uniform4(-2.0f64..2.0),
            var in proptest::array::uniform2(0.0f64..50.0),
        ) {
            struct Fixed(ResidualPrediction);
            impl ResidualPredictor for Fixed {
                fn residual(&self, _x: &Vector2<f64>) -> ResidualPrediction {
                    self.0
                }
            }
            let p = PlantParams::default();
            let nominal = DiscreteModel::nominal(&p, SAMPLING_INTERVAL);
            let chol = Matrix2::new(l[0], 0.0, l[1], l[2]);
            let b = BeliefState { mean: Vector2::new(x, s), cov: chol * chol.transpose() };
            let r = Fixed(ResidualPrediction { mean: Vector2::zeros(), var: Vector2::from(var), grad: Matrix2::from_row_slice(&g) });
            let next = propagate_belief(&b, u, sf, &nominal, &r, &p.noise_covariance(SAMPLING_INTERVAL));
            prop_assert_eq!(next.cov, next.cov.transpose());
            prop_assert!(next.cov.symmetric_eigen().eigenvalues.min() >= -1e-9 * next.cov.abs().max().max(1.0));
        }

        #[test]
        fn tightening_is_monotone(a in -100.0f64..100.0, v1 in 0.0f64..100.0, dv in 0.0f64..100.0, p in 0.5f64..0.999) {
            let z = normal_quantile(p);
            prop_assert!(tighten_bound(a, Direction::Lower, v1 + dv, z) >= tighten_bound(a, Direction::Lower, v1, z));
            prop_assert!(tighten_bound(a, Direction::Upper, v1 + dv, z) <= tighten_bound(a, Direction::Upper, v1, z));
        }

        #[test]
        fn band_is_ordered(t in 0.0f64..500.0) {
            let (lb, ub) = survival_band(t, 1046.28);
            prop_assert!(lb < ub);
        }
    }
}
