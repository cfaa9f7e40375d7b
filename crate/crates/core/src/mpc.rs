//! Nominal tracking MPC with a multiple-shooting transcription.

use std::io::Write;

use nalgebra::{DMatrix, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nlp::{solve_sqp, NlpProblem, NlpSolution, SolveStatus, SqpOptions};
use crate::plant::{PlantParams, Reactor, State, StepSensitivity, SAMPLING_INTERVAL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal of the stage state weight.
    pub q_stage: [f64; 2],
    /// Diagonal of the terminal state weight.
    pub q_terminal: [f64; 2],
    pub r_s: f64,
    pub r_c: f64,
    pub x_ref: [f64; 2],
    pub u_ref: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub x_min: [f64; 2],
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 80,
            dt: SAMPLING_INTERVAL,
            q_stage: [10.0, 10.0],
            q_terminal: [10.0, 10.0],
            r_s: 1.0,
            r_c: 5e3,
            x_ref: [1046.28, 101.615],
            u_ref: 0.714286,
            u_min: 0.0,
            u_max: 2.0,
            x_min: [0.0, 0.0],
            tol: 1e-6,
            max_iter: 100,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        let weights = [
            self.q_stage[0],
            self.q_stage[1],
            self.q_terminal[0],
            self.q_terminal[1],
            self.r_s,
            self.r_c,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter(
                "weights must be nonnegative".into(),
            ));
        }
        if self.u_min > self.u_max {
            return Err(Error::InvalidParameter("u_min > u_max".into()));
        }
        Ok(())
    }

    /// Variable scaling for the shooting states (reference magnitudes).
    pub(crate) fn state_scale(&self) -> Vector2<f64> {
        Vector2::new(self.x_ref[0].abs().max(1.0), self.x_ref[1].abs().max(1.0))
    }

    /// Objective scaling so the largest Hessian diagonal is of order one.
    pub(crate) fn cost_scale(&self) -> f64 {
        let s = self.state_scale();
        let qx = self.q_stage[0].max(self.q_terminal[0]) * s[0] * s[0];
        let qs = self.q_stage[1].max(self.q_terminal[1]) * s[1] * s[1];
        let r = self.r_s + 2.0 * self.r_c;
        1.0 / qx.max(qs).max(r).max(1e-12)
    }
}

/// A one-step discrete prediction model with sensitivities.
pub trait PredictionModel {
    fn predict(&self, x: &Vector2<f64>, u: f64, s_f: f64) -> StepSensitivity;
}

/// RK4 discretization of a reactor model over a fixed sampling interval.
#[derive(Debug, Clone, Copy)]
pub struct DiscreteModel {
    pub reactor: Reactor,
    pub dt: f64,
}

impl DiscreteModel {
    pub fn nominal(params: &PlantParams, dt: f64) -> Self {
        Self {
            reactor: params.nominal_model(),
            dt,
        }
    }
}

impl PredictionModel for DiscreteModel {
    fn predict(&self, x: &Vector2<f64>, u: f64, s_f: f64) -> StepSensitivity {
        self.reactor.step_sensitivity(x, u, s_f, self.dt)
    }
}

/// Decision-vector layout shared by the shooting transcriptions:
/// `[u_0 .. u_{N-1}, xi_1 .. xi_N]` with `x_k = scale * xi_k`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub horizon: usize,
    pub scale: Vector2<f64>,
}

impl Layout {
    pub fn n_vars(&self) -> usize {
        3 * self.horizon
    }
    pub fn u(&self, k: usize) -> usize {
        k
    }
    /// Index of the first component of `xi_k`, `k` in `1..=N`.
    pub fn x(&self, k: usize) -> usize {
        self.horizon + 2 * (k - 1)
    }
    pub fn state(&self, z: &[f64], k: usize, x0: &Vector2<f64>) -> Vector2<f64> {
        if k == 0 {
            *x0
        } else {
            let i = self.x(k);
            Vector2::new(z[i] * self.scale[0], z[i + 1] * self.scale[1])
        }
    }
    pub fn dependent(&self) -> Vec<usize> {
        (self.horizon..3 * self.horizon).collect()
    }
    pub fn pack(&self, inputs: &[f64], states: &[Vector2<f64>]) -> Vec<f64> {
        let mut z = vec![0.0; self.n_vars()];
        z[..self.horizon].copy_from_slice(&inputs[..self.horizon]);
        for k in 1..=self.horizon {
            let i = self.x(k);
            z[i] = states[k][0] / self.scale[0];
            z[i + 1] = states[k][1] / self.scale[1];
        }
        z
    }
}

/// Tracking cost at the mean trajectory, shared with the stochastic transcription.
#[derive(Debug, Clone)]
pub(crate) struct TrackingCost {
    pub q_stage: Vector2<f64>,
    pub q_terminal: Vector2<f64>,
    pub r_s: f64,
    pub r_c: f64,
    pub x_ref: Vector2<f64>,
    pub u_ref: f64,
    pub u_prev: f64,
    pub scale: f64,
}

impl TrackingCost {
    pub fn new(config: &MpcConfig, u_prev: f64) -> Self {
        Self {
            q_stage: Vector2::from(config.q_stage),
            q_terminal: Vector2::from(config.q_terminal),
            r_s: config.r_s,
            r_c: config.r_c,
            x_ref: Vector2::from(config.x_ref),
            u_ref: config.u_ref,
            u_prev,
            scale: config.cost_scale(),
        }
    }

    pub fn value(&self, layout: &Layout, z: &[f64], x0: &Vector2<f64>) -> f64 {
        let n = layout.horizon;
        let mut cost = 0.0;
        let mut u_last = self.u_prev;
        for k in 0..n {
            let e = layout.state(z, k, x0) - self.x_ref;
            let u = z[layout.u(k)];
            cost += self.q_stage.dot(&e.component_mul(&e));
            cost += self.r_s * (u - self.u_ref).powi(2) + self.r_c * (u - u_last).powi(2);
            u_last = u;
        }
        let e = layout.state(z, n, x0) - self.x_ref;
        cost += self.q_terminal.dot(&e.component_mul(&e));
        cost * self.scale
    }

    pub fn gradient(&self, layout: &Layout, z: &[f64], x0: &Vector2<f64>, g: &mut [f64]) {
        let n = layout.horizon;
        g.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..n {
            let u = z[layout.u(k)];
            let u_last = if k == 0 {
                self.u_prev
            } else {
                z[layout.u(k - 1)]
            };
            g[layout.u(k)] += 2.0 * self.r_s * (u - self.u_ref) + 2.0 * self.r_c * (u - u_last);
            if k > 0 {
                g[layout.u(k - 1)] -= 2.0 * self.r_c * (u - u_last);
            }
        }
        for k in 1..=n {
            let w = if k == n {
                self.q_terminal
            } else {
                self.q_stage
            };
            let e = layout.state(z, k, x0) - self.x_ref;
            let i = layout.x(k);
            g[i] += 2.0 * w[0] * e[0] * layout.scale[0];
            g[i + 1] += 2.0 * w[1] * e[1] * layout.scale[1];
        }
        g.iter_mut().for_each(|v| *v *= self.scale);
    }

    pub fn hessian(&self, layout: &Layout) -> DMatrix<f64> {
        let n = layout.horizon;
        let mut h = DMatrix::<f64>::zeros(layout.n_vars(), layout.n_vars());
        for k in 0..n {
            h[(k, k)] += 2.0 * (self.r_s + self.r_c);
            if k > 0 {
                h[(k - 1, k - 1)] += 2.0 * self.r_c;
                h[(k, k - 1)] -= 2.0 * self.r_c;
                h[(k - 1, k)] -= 2.0 * self.r_c;
            }
        }
        for k in 1..=n {
            let w = if k == n {
                self.q_terminal
            } else {
                self.q_stage
            };
            let i = layout.x(k);
            h[(i, i)] += 2.0 * w[0] * layout.scale[0].powi(2);
            h[(i + 1, i + 1)] += 2.0 * w[1] * layout.scale[1].powi(2);
        }
        // keep the BFGS seed positive definite when some weights vanish
        let floor = 1e-6 * h.diagonal().max().max(1.0);
        for i in 0..layout.n_vars() {
            h[(i, i)] = h[(i, i)].max(floor);
        }
        h * self.scale
    }
}

/// Biomass band `lb <= X_k <= ub` at prediction step `k` (`None` when inactive).
pub type BandSchedule = Vec<Option<(f64, f64)>>;

/// Multiple-shooting transcription of the tracking OCP over a mean model.
pub struct ShootingOcp<'a, M: PredictionModel + ?Sized> {
    pub(crate) layout: Layout,
    pub(crate) cost: TrackingCost,
    pub(crate) x0: Vector2<f64>,
    pub(crate) s_f: f64,
    pub(crate) model: &'a M,
    pub(crate) bounds: (Vec<f64>, Vec<f64>),
    /// Band per step `k = 1..=N` (index `k - 1`).
    pub(crate) band: BandSchedule,
    band_rows: Vec<usize>,
}

/// Builds the nominal OCP for measured state `x0`, previous input and current influent.
pub fn transcribe_ocp<'a, M: PredictionModel + ?Sized>(
    config: &MpcConfig,
    x0: State,
    u_prev: f64,
    s_f: f64,
    model: &'a M,
) -> ShootingOcp<'a, M> {
    ShootingOcp::new(config, x0, u_prev, s_f, model, vec![None; config.horizon])
}

impl<'a, M: PredictionModel + ?Sized> ShootingOcp<'a, M> {
    pub fn new(
        config: &MpcConfig,
        x0: State,
        u_prev: f64,
        s_f: f64,
        model: &'a M,
        band: BandSchedule,
    ) -> Self {
        let layout = Layout {
            horizon: config.horizon,
            scale: config.state_scale(),
        };
        let n = layout.n_vars();
        let mut lower = vec![f64::NEG_INFINITY; n];
        let mut upper = vec![f64::INFINITY; n];
        for k in 0..config.horizon {
            lower[layout.u(k)] = config.u_min;
            upper[layout.u(k)] = config.u_max;
        }
        for k in 1..=config.horizon {
            let i = layout.x(k);
            lower[i] = config.x_min[0] / layout.scale[0];
            lower[i + 1] = config.x_min[1] / layout.scale[1];
        }
        let band_rows = band
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_some())
            .map(|(k, _)| k + 1)
            .collect();
        Self {
            layout,
            cost: TrackingCost::new(config, u_prev),
            x0: x0.to_vector(),
            s_f,
            model,
            bounds: (lower, upper),
            band,
            band_rows,
        }
    }

    /// Simulates the model from `x0` under `inputs` to produce a consistent initial guess.
    pub fn rollout(&self, inputs: &[f64]) -> Vec<f64> {
        let mut states = vec![self.x0];
        for k in 0..self.layout.horizon {
            let next = self.model.predict(&states[k], inputs[k], self.s_f).next;
            states.push(Vector2::new(next[0].max(0.0), next[1].max(0.0)));
        }
        self.layout.pack(inputs, &states)
    }

    pub fn initial_guess(&self, inputs: &[f64], states: &[Vector2<f64>]) -> Vec<f64> {
        self.layout.pack(inputs, states)
    }

    pub fn states(&self, z: &[f64]) -> Vec<State> {
        (0..=self.layout.horizon)
            .map(|k| State::from_vector(&self.layout.state(z, k, &self.x0)))
            .collect()
    }
}

impl<M: PredictionModel + ?Sized> NlpProblem for ShootingOcp<'_, M> {
    fn n_vars(&self) -> usize {
        self.layout.n_vars()
    }
    fn n_eq(&self) -> usize {
        2 * self.layout.horizon
    }
    fn n_ineq(&self) -> usize {
        2 * self.band_rows.len()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.bounds.clone()
    }
    fn objective(&self, z: &[f64]) -> f64 {
        self.cost.value(&self.layout, z, &self.x0)
    }
    fn gradient(&self, z: &[f64], g: &mut [f64]) {
        self.cost.gradient(&self.layout, z, &self.x0, g);
    }
    fn constraints(&self, z: &[f64], ce: &mut [f64], ci: &mut [f64]) {
        let l = &self.layout;
        for k in 0..l.horizon {
            let xk = l.state(z, k, &self.x0);
            let pred = self.model.predict(&xk, z[l.u(k)], self.s_f).next;
            let i = l.x(k + 1);
            ce[2 * k] = z[i] - pred[0] / l.scale[0];
            ce[2 * k + 1] = z[i + 1] - pred[1] / l.scale[1];
        }
        for (r, &k) in self.band_rows.iter().enumerate() {
            let (lb, ub) = self.band[k - 1].expect("band row");
            let x = z[l.x(k)];
            ci[2 * r] = x - lb / l.scale[0];
            ci[2 * r + 1] = ub / l.scale[0] - x;
        }
    }
    fn jacobian(&self, z: &[f64], je: &mut DMatrix<f64>, ji: &mut DMatrix<f64>) {
        let l = &self.layout;
        je.fill(0.0);
        ji.fill(0.0);
        let s = l.scale;
        for k in 0..l.horizon {
            let xk = l.state(z, k, &self.x0);
            let sens = self.model.predict(&xk, z[l.u(k)], self.s_f);
            let i = l.x(k + 1);
            je[(2 * k, i)] = 1.0;
            je[(2 * k + 1, i + 1)] = 1.0;
            for r in 0..2 {
                je[(2 * k + r, l.u(k))] = -sens.du[r] / s[r];
                if k > 0 {
                    let j = l.x(k);
                    for c in 0..2 {
                        je[(2 * k + r, j + c)] = -sens.dx[(r, c)] * s[c] / s[r];
                    }
                }
            }
        }
        for (r, &k) in self.band_rows.iter().enumerate() {
            ji[(2 * r, l.x(k))] = 1.0;
            ji[(2 * r + 1, l.x(k))] = -1.0;
        }
    }
    fn hessian_hint(&self) -> Option<DMatrix<f64>> {
        Some(self.cost.hessian(&self.layout))
    }
    fn dependent_variables(&self) -> Option<Vec<usize>> {
        Some(self.layout.dependent())
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub inputs: Vec<f64>,
    pub states: Vec<State>,
    pub first_input: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt: f64,
    pub objective: f64,
    pub solve_time: f64,
    pub elastic_steps: usize,
}

impl OcpSolution {
    pub(crate) fn from_nlp(sol: &NlpSolution, inputs: Vec<f64>, states: Vec<State>) -> Self {
        Self {
            first_input: inputs[0],
            inputs,
            states,
            status: sol.status,
            iterations: sol.iterations,
            kkt: sol.kkt.max(),
            objective: sol.objective,
            solve_time: sol.solve_time,
            elastic_steps: sol.elastic_steps,
        }
    }
}

pub fn solve_ocp<M: PredictionModel + ?Sized>(
    ocp: &ShootingOcp<'_, M>,
    guess: &[f64],
    options: &SqpOptions,
) -> OcpSolution {
    let sol = solve_sqp(ocp, guess, options);
    let n = ocp.layout.horizon;
    OcpSolution::from_nlp(&sol, sol.x[..n].to_vec(), ocp.states(&sol.x))
}

/// Outcome of one receding-horizon step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub applied_input: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub solve_time: f64,
    pub fallback: bool,
}

/// Receding-horizon controller state: previous input and shifted warm start.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub config: MpcConfig,
    pub u_prev: f64,
    warm: Option<(Vec<f64>, Vec<Vector2<f64>>)>,
    pub failures: usize,
}

impl MpcController {
    pub fn new(config: MpcConfig) -> Self {
        let u_prev = config.u_ref;
        Self {
            config,
            u_prev,
            warm: None,
            failures: 0,
        }
    }

    pub fn options(&self) -> SqpOptions {
        SqpOptions {
            tol: self.config.tol,
            max_iter: self.config.max_iter,
            ..Default::default()
        }
    }

    /// Shift-and-repeat of the previous solution, or `(x0 replicated, u_ref)`.
    pub fn guess(&self, x0: &Vector2<f64>) -> (Vec<f64>, Vec<Vector2<f64>>) {
        let n = self.config.horizon;
        match &self.warm {
            Some((u, x)) if u.len() == n => {
                let mut inputs: Vec<f64> = u[1..].to_vec();
                inputs.push(u[n - 1]);
                let mut states = vec![*x0];
                states.extend_from_slice(&x[2..]);
                states.push(x[n]);
                (inputs, states)
            }
            _ => self.cold_guess(x0),
        }
    }

    pub fn cold_guess(&self, x0: &Vector2<f64>) -> (Vec<f64>, Vec<Vector2<f64>>) {
        let n = self.config.horizon;
        (vec![self.config.u_ref; n], vec![*x0; n + 1])
    }

    /// Solves the OCP at measured state `x0` and applies the first input; on
    /// solver failure the previous input is held.
    pub fn step<M: PredictionModel + ?Sized>(
        &mut self,
        model: &M,
        x0: State,
        s_f: f64,
        band: BandSchedule,
    ) -> (StepRecord, OcpSolution) {
        let ocp = ShootingOcp::new(&self.config, x0, self.u_prev, s_f, model, band);
        let (inputs, states) = self.guess(&x0.to_vector());
        let guess = ocp.initial_guess(&inputs, &states);
        let sol = solve_ocp(&ocp, &guess, &self.options());
        let record = self.apply(&sol);
        (record, sol)
    }

    pub(crate) fn apply(&mut self, sol: &OcpSolution) -> StepRecord {
        let fallback = sol.status == SolveStatus::Failed;
        let applied = if fallback {
            self.failures += 1;
            self.warm = None;
            self.u_prev
        } else {
            self.warm = Some((
                sol.inputs.clone(),
                sol.states.iter().map(|s| s.to_vector()).collect(),
            ));
            sol.first_input.clamp(self.config.u_min, self.config.u_max)
        };
        self.u_prev = applied;
        StepRecord {
            applied_input: applied,
            status: sol.status,
            iterations: sol.iterations,
            solve_time: sol.solve_time,
            fallback,
        }
    }
}

/// Replays an input sequence through the model and returns the largest
/// deviation (mg/L) from the predicted trajectory.
pub fn replay_error<M: PredictionModel + ?Sized>(model: &M, sol: &OcpSolution, s_f: f64) -> f64 {
    let mut x = sol.states[0].to_vector();
    let mut worst = 0.0_f64;
    for (k, u) in sol.inputs.iter().enumerate() {
        x = model.predict(&x, *u, s_f).next;
        worst = worst.max((x - sol.states[k + 1].to_vector()).abs().max());
    }
    worst
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLogRow {
    pub t: f64,
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "F")]
    pub f: f64,
    pub solve_ms: f64,
    pub status: String,
}

/// Writes `t,X,S,F,solve_ms,status` rows.
pub fn write_step_log<W: Write>(writer: W, rows: &[StepLogRow]) -> Result<()> {
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
    use crate::nlp::finite_diff_check;
    use crate::plant::{step_true_plant, DisturbanceDraw};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exact_model() -> DiscreteModel {
        let p = PlantParams::default();
        DiscreteModel {
            reactor: p.true_plant(),
            dt: SAMPLING_INTERVAL,
        }
    }

    #[test]
    fn fixed_point_gives_zero_cost() {
        // mismatch-free model: the reference is a steady state under u_ref
        let model = exact_model();
        let config = MpcConfig::default();
        let mut ctrl = MpcController::new(config.clone());
        let x0 = State::new(config.x_ref[0], config.x_ref[1]);
        let (rec, sol) = ctrl.step(&model, x0, 5500.0, vec![None; config.horizon]);
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(
            (rec.applied_input - config.u_ref).abs() < 1e-3,
            "{}",
            rec.applied_input
        );
        // cost is relative to the order-one scaling; tiny residual from the 1e-4 steady-state offset
        assert!(sol.objective < 1e-6, "{}", sol.objective);
    }

    #[test]
    fn single_step_horizon_converges() {
        let model = DiscreteModel::nominal(&PlantParams::default(), SAMPLING_INTERVAL);
        let config = MpcConfig {
            horizon: 1,
            ..Default::default()
        };
        let mut ctrl = MpcController::new(config.clone());
        let (_, sol) = ctrl.step(&model, State::new(900.0, 150.0), 5500.0, vec![None]);
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(sol.kkt <= 1e-6);
    }

    #[test]
    fn prediction_window_is_ten_days() {
        let config = MpcConfig::default();
        assert!((config.horizon as f64 * config.dt - 10.0).abs() < 1e-12);
    }

    #[test]
    fn transcription_derivatives_match_finite_differences() {
        let p = PlantParams::default();
        let model = DiscreteModel::nominal(&p, SAMPLING_INTERVAL);
        let config = MpcConfig {
            horizon: 12,
            ..Default::default()
        };
        let mut band = vec![None; 12];
        band[5] = Some((900.0, 1100.0));
        band[11] = Some((950.0, 1080.0));
        let ocp = ShootingOcp::new(&config, State::new(980.0, 120.0), 0.6, 5600.0, &model, band);
        let inputs: Vec<f64> = (0..12).map(|k| 0.5 + 0.05 * k as f64).collect();
        let mut z = ocp.rollout(&inputs);
        for (i, v) in z.iter_mut().enumerate().skip(12) {
            *v *= 1.0 + 0.01 * ((i % 5) as f64 - 2.0);
        }
        let report = finite_diff_check(&ocp, &z);
        assert!(report.max_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn predicted_trajectory_replays() {
        let model = DiscreteModel::nominal(&PlantParams::default(), SAMPLING_INTERVAL);
        let config = MpcConfig::default();
        let mut ctrl = MpcController::new(config.clone());
        let (_, sol) = ctrl.step(
            &model,
            State::new(700.0, 300.0),
            5500.0,
            vec![None; config.horizon],
        );
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(replay_error(&model, &sol, 5500.0) < 1e-3);
        assert!(sol.inputs.iter().all(|u| (0.0..=2.0).contains(u)));
    }

    #[test]
    fn closed_loop_regulation_without_mismatch() {
        // from the start-up state, noise-free, controller model equal to the plant
        let p = PlantParams {
            sigma_w: [0.0, 0.0],
            ..Default::default()
        };
        let model = exact_model();
        let config = MpcConfig::default();
        let mut ctrl = MpcController::new(config.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draw = DisturbanceDraw::constant();
        let mut x = State::new(0.2, 0.0);
        for k in 0..560 {
            let (rec, _) = ctrl.step(&model, x, 5500.0, vec![None; config.horizon]);
            assert!((0.0..=2.0).contains(&rec.applied_input));
            x = step_true_plant(
                &p,
                x,
                rec.applied_input,
                k as f64 * 0.125,
                0.125,
                &draw,
                &mut rng,
            )
            .unwrap();
        }
        assert!(
            (x.x - config.x_ref[0]).abs() / config.x_ref[0] < 0.01,
            "{x:?}"
        );
        assert!(
            (x.s - config.x_ref[1]).abs() / config.x_ref[1] < 0.01,
            "{x:?}"
        );
        assert_eq!(ctrl.failures, 0);
    }
}
