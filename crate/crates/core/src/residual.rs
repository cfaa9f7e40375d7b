//! The common prediction contract of the learned residual models and the
//! hybrid (nominal + residual) one-step model.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::datagen::Scaler;
use crate::mpc::{DiscreteModel, PredictionModel};
use crate::plant::{State, StepSensitivity};

/// Single-output probabilistic regressor in standardized units.
pub trait Regressor {
    fn input_dim(&self) -> usize;

    /// Predictive mean and variance.
    fn predict(&self, chi: &[f64]) -> (f64, f64);

    /// Gradient of the predictive mean.
    fn mean_gradient(&self, chi: &[f64]) -> Vec<f64>;

    /// Mean, variance and mean gradient together.
    fn predict_with_gradient(&self, chi: &[f64]) -> (f64, f64, Vec<f64>) {
        let (m, v) = self.predict(chi);
        (m, v, self.mean_gradient(chi))
    }
}

/// Residual moments in raw state units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualPrediction {
    pub mean: Vector2<f64>,
    pub var: Vector2<f64>,
    /// `grad[(i, j)] = d mean_i / d x_j`.
    pub grad: Matrix2<f64>,
}

pub trait ResidualPredictor {
    fn residual(&self, x: &Vector2<f64>) -> ResidualPrediction;
}

impl<P: ResidualPredictor + ?Sized> ResidualPredictor for &P {
    fn residual(&self, x: &Vector2<f64>) -> ResidualPrediction {
        (**self).residual(x)
    }
}

/// `d(x) = 0` with zero variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroResidual;

impl ResidualPredictor for ZeroResidual {
    fn residual(&self, _x: &Vector2<f64>) -> ResidualPrediction {
        ResidualPrediction {
            mean: Vector2::zeros(),
            var: Vector2::zeros(),
            grad: Matrix2::zeros(),
        }
    }
}

/// One regressor per state channel, trained on standardized features and labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnedResidual<R> {
    pub channels: [R; 2],
    pub features: Scaler,
    pub labels: Scaler,
}

impl<R: Regressor> ResidualPredictor for LearnedResidual<R> {
    fn residual(&self, x: &Vector2<f64>) -> ResidualPrediction {
        let chi = self.features.apply(&[x[0], x[1]]);
        let mut out = ResidualPrediction {
            mean: Vector2::zeros(),
            var: Vector2::zeros(),
            grad: Matrix2::zeros(),
        };
        for (c, model) in self.channels.iter().enumerate() {
            let (m, v, g) = model.predict_with_gradient(&chi);
            let sy = self.labels.std[c];
            out.mean[c] = self.labels.invert_one(c, m);
            out.var[c] = v * sy * sy;
            for d in 0..2 {
                out.grad[(c, d)] = sy * g[d] / self.features.std[d];
            }
        }
        out
    }
}

/// Nominal discrete model plus a learned residual, `x+ = f(x, u) + d(x)`.
#[derive(Debug, Clone, Copy)]
pub struct HybridModel<'a, P: ?Sized> {
    pub nominal: DiscreteModel,
    pub residual: &'a P,
}

impl<'a, P: ResidualPredictor + ?Sized> HybridModel<'a, P> {
    pub fn new(nominal: DiscreteModel, residual: &'a P) -> Self {
        Self { nominal, residual }
    }

    /// Mean and per-state variance of the next state; `noise_var` is the
    /// diagonal of the discrete process-noise covariance.
    pub fn hybrid_step(
        &self,
        state: State,
        flow: f64,
        s_f: f64,
        noise_var: Vector2<f64>,
    ) -> (State, Vector2<f64>) {
        let x = state.to_vector();
        let f = self.nominal.predict(&x, flow, s_f).next;
        let d = self.residual.residual(&x);
        (State::from_vector(&(f + d.mean)), d.var + noise_var)
    }
}

impl<P: ResidualPredictor + ?Sized> PredictionModel for HybridModel<'_, P> {
    fn predict(&self, x: &Vector2<f64>, u: f64, s_f: f64) -> StepSensitivity {
        let s = self.nominal.predict(x, u, s_f);
        let d = self.residual.residual(x);
        StepSensitivity {
            next: s.next + d.mean,
            dx: s.dx + d.grad,
            du: s.du,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::PlantParams;

    struct Linear;

    impl Regressor for Linear {
        fn input_dim(&self) -> usize {
            2
        }
        fn predict(&self, chi: &[f64]) -> (f64, f64) {
            (2.0 * chi[0] - chi[1], 0.5)
        }
        fn mean_gradient(&self, _chi: &[f64]) -> Vec<f64> {
            vec![2.0, -1.0]
        }
    }

    fn scaler(mean: [f64; 2], std: [f64; 2]) -> Scaler {
        Scaler {
            names: vec!["a".into(), "b".into()],
            mean: mean.to_vec(),
            std: std.to_vec(),
        }
    }

    #[test]
    fn zero_residual_reduces_to_nominal() {
        let p = PlantParams::default();
        let nominal = DiscreteModel::nominal(&p, 0.125);
        let hybrid = HybridModel::new(nominal, &ZeroResidual);
        let x = State::new(900.0, 80.0);
        let sw = Vector2::new(0.125, 0.125);
        let (m, v) = hybrid.hybrid_step(x, 0.7, 5400.0, sw);
        let f = nominal.predict(&x.to_vector(), 0.7, 5400.0).next;
        assert_eq!(m.to_vector(), f);
        assert_eq!(v, sw);
    }

    #[test]
    fn raw_unit_conversion_matches_finite_differences() {
        let r = LearnedResidual {
            channels: [Linear, Linear],
            features: scaler([1000.0, 100.0], [30.0, 5.0]),
            labels: scaler([0.5, -2.0], [0.2, 3.0]),
        };
        let x = Vector2::new(1010.0, 97.0);
        let p = r.residual(&x);
        assert!((p.var[1] - 0.5 * 9.0).abs() < 1e-12);
        for d in 0..2 {
            let mut hi = x;
            let mut lo = x;
            hi[d] += 1e-3;
            lo[d] -= 1e-3;
            let fd = (r.residual(&hi).mean - r.residual(&lo).mean) / 2e-3;
            for c in 0..2 {
                assert!((fd[c] - p.grad[(c, d)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn variance_dominates_noise() {
        let r = LearnedResidual {
            channels: [Linear, Linear],
            features: scaler([1000.0, 100.0], [30.0, 5.0]),
            labels: scaler([0.0, 0.0], [1.0, 1.0]),
        };
        let hybrid = HybridModel::new(DiscreteModel::nominal(&PlantParams::default(), 0.125), &r);
        let sw = Vector2::new(0.125, 0.125);
        let (_, v) = hybrid.hybrid_step(State::new(1000.0, 100.0), 0.7, 5500.0, sw);
        assert!(v[0] >= sw[0] && v[1] >= sw[1]);
    }
}
