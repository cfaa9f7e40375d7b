//! Continuous-time bioreactor models and their fixed-step discretization.
//!
//! The "true" plant grows biomass with Contois kinetics; the controller's
//! nominal model uses Monod kinetics with perturbed parameters. Both share the
//! same mass balances:
//!
//! ```text
//! dX/dt = mu(X,S) X - (F/V) X - K_d X
//! dS/dt = (F/V) (S_f - S) - mu(X,S) X / Y
//! ```

use std::io::Write;

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling interval of the plant and of every controller model, in days.
pub const SAMPLING_INTERVAL: f64 = 0.125;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    /// Death rate (1/d).
    pub k_d: f64,
    /// Substrate yield coefficient.
    pub y_coeff: f64,
    /// Reactor volume (L).
    pub v_reactor: f64,
    /// Maximum Contois growth rate (1/d).
    pub mu_max_con: f64,
    /// Contois kinetic saturation coefficient.
    pub b_contois: f64,
    /// Maximum Monod growth rate (1/d).
    pub mu_max_mon: f64,
    /// Monod half-velocity constant (mg/L).
    pub k_s: f64,
    /// Process-noise standard deviation per state (mg/L per sqrt(d)).
    pub sigma_w: [f64; 2],
    /// Multiplicative factors on (k_s, mu_max_mon) for the controller model.
    pub param_mismatch: [f64; 2],
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            k_d: 0.0131,
            y_coeff: 0.2116,
            v_reactor: 5.0,
            mu_max_con: 0.9297,
            b_contois: 0.4818,
            mu_max_mon: 0.6275,
            k_s: 443.1,
            sigma_w: [1.0, 1.0],
            param_mismatch: [1.10, 0.80],
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_d", self.k_d),
            ("v_reactor", self.v_reactor),
            ("mu_max_con", self.mu_max_con),
            ("b_contois", self.b_contois),
            ("mu_max_mon", self.mu_max_mon),
            ("k_s", self.k_s),
            ("param_mismatch[0]", self.param_mismatch[0]),
            ("param_mismatch[1]", self.param_mismatch[1]),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if !(self.y_coeff > 0.0 && self.y_coeff <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "y_coeff must lie in (0, 1], got {}",
                self.y_coeff
            )));
        }
        if self.sigma_w.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidParameter(
                "sigma_w entries must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Discrete process-noise covariance over one sampling interval.
    pub fn noise_covariance(&self, dt: f64) -> Matrix2<f64> {
        Matrix2::new(
            self.sigma_w[0].powi(2) * dt,
            0.0,
            0.0,
            self.sigma_w[1].powi(2) * dt,
        )
    }

    pub fn true_kinetics(&self) -> Kinetics {
        Kinetics::Contois {
            mu_max: self.mu_max_con,
            b: self.b_contois,
        }
    }

    /// Monod kinetics with the tabulated (unperturbed) constants.
    pub fn table_monod(&self) -> Kinetics {
        Kinetics::Monod {
            mu_max: self.mu_max_mon,
            k_s: self.k_s,
        }
    }

    /// Monod kinetics as seen by the controller, with the parameter mismatch applied.
    pub fn nominal_kinetics(&self) -> Kinetics {
        Kinetics::Monod {
            mu_max: self.mu_max_mon * self.param_mismatch[1],
            k_s: self.k_s * self.param_mismatch[0],
        }
    }

    pub fn true_plant(&self) -> Reactor {
        Reactor::new(self, self.true_kinetics())
    }

    pub fn nominal_model(&self) -> Reactor {
        Reactor::new(self, self.nominal_kinetics())
    }
}

/// Biomass `x` and substrate `s`, both in mg/L.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub s: f64,
}

impl State {
    pub const fn new(x: f64, s: f64) -> Self {
        Self { x, s }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.x, self.s)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self { x: v[0], s: v[1] }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.s.is_finite()
    }

    pub fn clamp_nonnegative(self) -> Self {
        Self {
            x: self.x.max(0.0),
            s: self.s.max(0.0),
        }
    }
}

/// Contois rate `mu_max S / (B X + S)`; zero at the washout point `B X + S = 0`.
pub fn growth_contois(x: f64, s: f64, p: &PlantParams) -> f64 {
    p.true_kinetics().rate(x, s)
}

/// Monod rate with the tabulated constants.
pub fn growth_monod(s: f64, p: &PlantParams) -> f64 {
    p.table_monod().rate(0.0, s)
}

/// Monod rate as used by the controller model (mismatch applied).
pub fn growth_monod_nominal(s: f64, p: &PlantParams) -> f64 {
    p.nominal_kinetics().rate(0.0, s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kinetics {
    Contois { mu_max: f64, b: f64 },
    Monod { mu_max: f64, k_s: f64 },
}

impl Kinetics {
    pub fn rate(&self, x: f64, s: f64) -> f64 {
        match *self {
            Kinetics::Contois { mu_max, b } => {
                let den = b * x + s;
                if den == 0.0 {
                    0.0
                } else {
                    mu_max * s / den
                }
            }
            Kinetics::Monod { mu_max, k_s } => mu_max * s / (k_s + s),
        }
    }

    /// Partial derivatives of the rate with respect to (X, S).
    pub fn rate_gradient(&self, x: f64, s: f64) -> (f64, f64) {
        match *self {
            Kinetics::Contois { mu_max, b } => {
                let den = b * x + s;
                if den == 0.0 {
                    (0.0, 0.0)
                } else {
                    let den2 = den * den;
                    (-mu_max * s * b / den2, mu_max * b * x / den2)
                }
            }
            Kinetics::Monod { mu_max, k_s } => {
                let den = k_s + s;
                (0.0, mu_max * k_s / (den * den))
            }
        }
    }
}

/// Mass-balance right-hand side with a chosen growth law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reactor {
    pub k_d: f64,
    pub y_coeff: f64,
    pub v_reactor: f64,
    pub kinetics: Kinetics,
}

/// One discrete step together with its sensitivities.
#[derive(Debug, Clone, Copy)]
pub struct StepSensitivity {
    pub next: Vector2<f64>,
    /// d next / d state.
    pub dx: Matrix2<f64>,
    /// d next / d F.
    pub du: Vector2<f64>,
}

impl Reactor {
    pub fn new(p: &PlantParams, kinetics: Kinetics) -> Self {
        Self {
            k_d: p.k_d,
            y_coeff: p.y_coeff,
            v_reactor: p.v_reactor,
            kinetics,
        }
    }

    pub fn rhs(&self, state: &Vector2<f64>, flow: f64, s_f: f64) -> Vector2<f64> {
        let (x, s) = (state[0], state[1]);
        let mu = self.kinetics.rate(x, s);
        let dilution = flow / self.v_reactor;
        Vector2::new(
            mu * x - dilution * x - self.k_d * x,
            dilution * (s_f - s) - mu * x / self.y_coeff,
        )
    }

    /// Jacobian of the right-hand side with respect to the state and the flow.
    pub fn rhs_jacobian(
        &self,
        state: &Vector2<f64>,
        flow: f64,
        s_f: f64,
    ) -> (Matrix2<f64>, Vector2<f64>) {
        let (x, s) = (state[0], state[1]);
        let mu = self.kinetics.rate(x, s);
        let (mu_x, mu_s) = self.kinetics.rate_gradient(x, s);
        let dilution = flow / self.v_reactor;
        let dx = Matrix2::new(
            mu + x * mu_x - dilution - self.k_d,
            x * mu_s,
            -(mu + x * mu_x) / self.y_coeff,
            -dilution - x * mu_s / self.y_coeff,
        );
        let du = Vector2::new(-x / self.v_reactor, (s_f - s) / self.v_reactor);
        (dx, du)
    }

    /// One RK4 step with `flow` and `s_f` held over `dt`.
    pub fn step(&self, state: &Vector2<f64>, flow: f64, s_f: f64, dt: f64) -> Result<Vector2<f64>> {
        rk4_step(|z| self.rhs(z, flow, s_f), state, dt)
    }

    /// RK4 step plus its exact derivative (tangent propagation through the stages).
    pub fn step_sensitivity(
        &self,
        state: &Vector2<f64>,
        flow: f64,
        s_f: f64,
        dt: f64,
    ) -> StepSensitivity {
        let stage = |z: &Vector2<f64>| {
            let f = self.rhs(z, flow, s_f);
            let (jx, ju) = self.rhs_jacobian(z, flow, s_f);
            (f, jx, ju)
        };
        let (k1, a1, b1) = stage(state);
        let d1x = a1;
        let d1u = b1;

        let z2 = state + k1 * (0.5 * dt);
        let (k2, a2, b2) = stage(&z2);
        let d2x = a2 * (Matrix2::identity() + d1x * (0.5 * dt));
        let d2u = a2 * (d1u * (0.5 * dt)) + b2;

        let z3 = state + k2 * (0.5 * dt);
        let (k3, a3, b3) = stage(&z3);
        let d3x = a3 * (Matrix2::identity() + d2x * (0.5 * dt));
        let d3u = a3 * (d2u * (0.5 * dt)) + b3;

        let z4 = state + k3 * dt;
        let (k4, a4, b4) = stage(&z4);
        let d4x = a4 * (Matrix2::identity() + d3x * dt);
        let d4u = a4 * (d3u * dt) + b4;

        let w = dt / 6.0;
        StepSensitivity {
            next: state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * w,
            dx: Matrix2::identity() + (d1x + d2x * 2.0 + d3x * 2.0 + d4x) * w,
            du: (d1u + d2u * 2.0 + d3u * 2.0 + d4u) * w,
        }
    }
}

/// Classical fourth-order Runge-Kutta step of an autonomous right-hand side.
pub fn rk4_step<F>(rhs: F, state: &Vector2<f64>, dt: f64) -> Result<Vector2<f64>>
where
    F: Fn(&Vector2<f64>) -> Vector2<f64>,
{
    if dt == 0.0 {
        return Ok(*state);
    }
    let k1 = rhs(state);
    let k2 = rhs(&(state + k1 * (0.5 * dt)));
    let k3 = rhs(&(state + k2 * (0.5 * dt)));
    let k4 = rhs(&(state + k3 * dt));
    let next = state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::IntegrationFailure {
            t: f64::NAN,
            x: next[0],
            s: next[1],
        })
    }
}

/// Mixture parameters for the three influent frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisturbanceModel {
    pub base: f64,
    pub amplitude: f64,
    /// Mixture-component means (+/-) of (w_t, w_pi, w_e).
    pub means: [f64; 3],
    /// Component standard deviation, shared by all three mixtures.
    pub std: f64,
}

impl Default for DisturbanceModel {
    fn default() -> Self {
        Self {
            base: 5500.0,
            amplitude: 100.0,
            means: [0.3, 0.01, 0.08],
            std: 0.1,
        }
    }
}

/// Angular-frequency draws for one episode, fixed for its whole duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceDraw {
    pub w_t: f64,
    pub w_pi: f64,
    pub w_e: f64,
    #[serde(default = "default_base")]
    pub base: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_base() -> f64 {
    5500.0
}

fn default_amplitude() -> f64 {
    100.0
}

impl DisturbanceDraw {
    pub fn new(w_t: f64, w_pi: f64, w_e: f64) -> Self {
        Self {
            w_t,
            w_pi,
            w_e,
            base: default_base(),
            amplitude: default_amplitude(),
        }
    }

    /// Constant influent (all frequencies zero).
    pub fn constant() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }
}

impl DisturbanceModel {
    /// Each frequency comes from an equal-weight mixture of N(+m, std^2) and N(-m, std^2).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DisturbanceDraw {
        let mut draw = |mean: f64| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let xi: f64 = StandardNormal.sample(rng);
            sign * mean + self.std * xi
        };
        let w_t = draw(self.means[0]);
        let w_pi = draw(self.means[1]);
        let w_e = draw(self.means[2]);
        DisturbanceDraw {
            w_t,
            w_pi,
            w_e,
            base: self.base,
            amplitude: self.amplitude,
        }
    }
}

/// Influent substrate concentration S_f(t) in mg/L.
pub fn influent_substrate(t: f64, draw: &DisturbanceDraw) -> f64 {
    use std::f64::consts::{E, PI};
    draw.base
        + draw.amplitude
            * ((draw.w_t * t).sin() + (draw.w_pi * PI * t).sin() + (draw.w_e * E * t).sin())
}

/// One sampling interval of the true plant: RK4, additive noise scaled by
/// `sigma_w * sqrt(dt)`, then clamping at zero.
pub fn step_true_plant<R: Rng + ?Sized>(
    params: &PlantParams,
    state: State,
    flow: f64,
    t: f64,
    dt: f64,
    draw: &DisturbanceDraw,
    rng: &mut R,
) -> Result<State> {
    let plant = params.true_plant();
    let s_f = influent_substrate(t, draw);
    let next =
        plant
            .step(&state.to_vector(), flow, s_f, dt)
            .map_err(|_| Error::IntegrationFailure {
                t,
                x: state.x,
                s: state.s,
            })?;
    let scale = dt.sqrt();
    let nx: f64 = StandardNormal.sample(rng);
    let ns: f64 = StandardNormal.sample(rng);
    let noisy = State::new(
        next[0] + params.sigma_w[0] * scale * nx,
        next[1] + params.sigma_w[1] * scale * ns,
    );
    Ok(noisy.clamp_nonnegative())
}

/// Noise-free trajectory of `model` under an input profile, starting at `x0`.
pub fn simulate_open_loop(
    model: &Reactor,
    x0: State,
    dt: f64,
    steps: usize,
    flow: impl Fn(f64) -> f64,
    s_f: impl Fn(f64) -> f64,
) -> Result<Vec<TrajectoryRow>> {
    let mut rows = Vec::with_capacity(steps + 1);
    let mut state = x0.to_vector();
    for k in 0..=steps {
        let t = k as f64 * dt;
        let f = flow(t);
        let sf = s_f(t);
        rows.push(TrajectoryRow {
            t,
            x: state[0],
            s: state[1],
            f,
            s_f: sf,
        });
        if k < steps {
            state = model
                .step(&state, f, sf, dt)
                .map_err(|_| Error::IntegrationFailure {
                    t,
                    x: state[0],
                    s: state[1],
                })?;
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "S_f")]
    pub s_f: f64,
}

/// Writes `t,X,S,F,S_f` rows.
pub fn write_trajectory_csv<W: Write>(writer: W, rows: &[TrajectoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
