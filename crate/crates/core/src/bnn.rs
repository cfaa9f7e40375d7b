//! Bayesian neural network trained by probabilistic backpropagation.
//!
//! Every weight carries an independent Gaussian belief. Means and variances
//! are pushed through the network in closed form (exact moments for the
//! linear layers, rectified-Gaussian moment matching for ReLU), and each
//! training point updates all beliefs by assumed density filtering. Gamma
//! beliefs over the noise precision and the prior precision complete the
//! model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::residual::Regressor;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaBelief {
    pub alpha: f64,
    pub beta: f64,
}

impl GammaBelief {
    pub fn mean(&self) -> f64 {
        self.alpha / self.beta
    }

    /// `E[1/gamma]`, defined for `alpha > 1`.
    pub fn inverse_mean(&self) -> Result<f64> {
        if self.alpha <= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "Gamma shape {} <= 1 has no inverse mean",
                self.alpha
            )));
        }
        Ok(self.beta / (self.alpha - 1.0))
    }
}

/// Gaussian beliefs of one fully connected layer; row-major
/// `n_out x (n_in + 1)` with the bias in the last column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Layer {
    fn width(&self) -> usize {
        self.n_in + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnnModel {
    pub layers: Vec<Layer>,
    /// Belief over the observation-noise precision.
    pub noise: GammaBelief,
    /// Prior belief over the weight precision.
    pub prior: GammaBelief,
    /// Posterior belief over the weight precision after the last refresh.
    pub lambda: GammaBelief,
    /// Prior precision currently folded into the weight beliefs.
    pub prior_precision: f64,
}

/// Moments of `max(a, 0)` for `a ~ N(m, v)` and their derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluMoments {
    pub mean: f64,
    pub var: f64,
    pub dmean_dm: f64,
    pub dmean_dv: f64,
    pub dvar_dm: f64,
    pub dvar_dv: f64,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * LN_2PI).exp()
}

pub fn relu_moments(m: f64, v: f64) -> ReluMoments {
    if v <= 1e-300 {
        return if m > 0.0 {
            ReluMoments {
                mean: m,
                var: v.max(0.0),
                dmean_dm: 1.0,
                dmean_dv: 0.0,
                dvar_dm: 0.0,
                dvar_dv: 1.0,
            }
        } else {
            ReluMoments {
                mean: 0.0,
                var: 0.0,
                dmean_dm: 0.0,
                dmean_dv: 0.0,
                dvar_dm: 0.0,
                dvar_dv: 0.0,
            }
        };
    }
    let s = v.sqrt();
    let a = m / s;
    let cdf = std_normal_cdf(a);
    let pdf = std_normal_pdf(a);
    let e1 = m * cdf + s * pdf;
    let e2 = (m * m + v) * cdf + m * s * pdf;
    ReluMoments {
        mean: e1,
        var: (e2 - e1 * e1).max(0.0),
        dmean_dm: cdf,
        dmean_dv: pdf / (2.0 * s),
        dvar_dm: 2.0 * e1 * (1.0 - cdf),
        dvar_dv: cdf - e1 * pdf / s,
    }
}

struct LayerTape {
    m_in: Vec<f64>,
    v_in: Vec<f64>,
    m_pre: Vec<f64>,
    v_pre: Vec<f64>,
}

/// Per-weight gradients of a scalar with respect to belief means and variances.
struct WeightGrads {
    dm: Vec<Vec<f64>>,
    dv: Vec<Vec<f64>>,
}

/// Outcome counters of one ADF update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub weight_updates: usize,
    pub weight_skips: usize,
    pub noise_skipped: bool,
}

impl BnnModel {
    /// Network `input_dim -> hidden.. -> 1` with means drawn from
    /// `N(0, 1/(fan_in + 1))` and variances set to the prior mean of `1/lambda`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        prior: GammaBelief,
        noise: GammaBelief,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let prior_precision = prior.mean();
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let dist = Normal::new(0.0, (1.0 / (n_in as f64 + 1.0)).sqrt()).expect("valid std");
                let count = n_out * (n_in + 1);
                Layer {
                    n_in,
                    n_out,
                    mean: (0..count).map(|_| dist.sample(&mut rng)).collect(),
                    var: vec![1.0 / prior_precision; count],
                }
            })
            .collect();
        Self {
            layers,
            noise,
            prior,
            lambda: prior,
            prior_precision,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_weights(&self) -> usize {
        self.layers.iter().map(|l| l.mean.len()).sum()
    }

    fn forward_tape(&self, chi: &[f64]) -> (Vec<LayerTape>, f64, f64) {
        let mut m: Vec<f64> = chi.to_vec();
        let mut v: Vec<f64> = vec![0.0; chi.len()];
        let mut tape = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let c = 1.0 / (layer.width() as f64).sqrt();
            let mut m_pre = vec![0.0; layer.n_out];
            let mut v_pre = vec![0.0; layer.n_out];
            for j in 0..layer.n_out {
                let row = j * layer.width();
                let (mut sm, mut sv) = (0.0, 0.0);
                for i in 0..layer.n_in {
                    let (wm, wv) = (layer.mean[row + i], layer.var[row + i]);
                    sm += wm * m[i];
                    sv += wv * (m[i] * m[i] + v[i]) + wm * wm * v[i];
                }
                sm += layer.mean[row + layer.n_in];
                sv += layer.var[row + layer.n_in];
                m_pre[j] = c * sm;
                v_pre[j] = c * c * sv;
            }
            let (next_m, next_v) = if l < last {
                m_pre
                    .iter()
                    .zip(&v_pre)
                    .map(|(a, b)| {
                        let r = relu_moments(*a, *b);
                        (r.mean, r.var)
                    })
                    .unzip()
            } else {
                (m_pre.clone(), v_pre.clone())
            };
            tape.push(LayerTape {
                m_in: m,
                v_in: v,
                m_pre,
                v_pre,
            });
            m = next_m;
            v = next_v;
        }
        (tape, m[0], v[0])
    }

    /// Reverse pass for a scalar with output sensitivities `(gm, gv)`;
    /// returns the gradient with respect to the input means.
    fn backward(
        &self,
        tape: &[LayerTape],
        gm: f64,
        gv: f64,
        mut grads: Option<&mut WeightGrads>,
    ) -> Vec<f64> {
        let mut g_m = vec![gm];
        let mut g_v = vec![gv];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let t = &tape[l];
            let c = 1.0 / (layer.width() as f64).sqrt();
            let c2 = c * c;
            // g_m, g_v currently refer to this layer's pre-activations
            let mut gi_m = vec![0.0; layer.n_in];
            let mut gi_v = vec![0.0; layer.n_in];
            for j in 0..layer.n_out {
                let row = j * layer.width();
                let (am, av) = (g_m[j], g_v[j]);
                for i in 0..=layer.n_in {
                    let (mi, vi) = if i < layer.n_in {
                        (t.m_in[i], t.v_in[i])
                    } else {
                        (1.0, 0.0)
                    };
                    let (wm, wv) = (layer.mean[row + i], layer.var[row + i]);
                    if let Some(g) = grads.as_deref_mut() {
                        g.dm[l][row + i] = am * c * mi + av * c2 * 2.0 * wm * vi;
                        g.dv[l][row + i] = av * c2 * (mi * mi + vi);
                    }
                    if i < layer.n_in {
                        gi_m[i] += am * c * wm + av * c2 * wv * 2.0 * mi;
                        gi_v[i] += av * c2 * (wv + wm * wm);
                    }
                }
            }
            if l == 0 {
                return gi_m;
            }
            // through the ReLU of the previous layer
            let prev = &tape[l - 1];
            g_m = vec![0.0; layer.n_in];
            g_v = vec![0.0; layer.n_in];
            for i in 0..layer.n_in {
                let r = relu_moments(prev.m_pre[i], prev.v_pre[i]);
                g_m[i] = gi_m[i] * r.dmean_dm + gi_v[i] * r.dvar_dm;
                g_v[i] = gi_m[i] * r.dmean_dv + gi_v[i] * r.dvar_dv;
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Output mean and variance before observation noise.
    pub fn forward_moments(&self, chi: &[f64]) -> (f64, f64) {
        let (_, m, v) = self.forward_tape(chi);
        (m, v)
    }

    /// Predictive mean and variance including the expected noise variance.
    pub fn predict(&self, chi: &[f64]) -> Result<(f64, f64)> {
        let (m, v) = self.forward_moments(chi);
        Ok((m, v + self.noise.inverse_mean()?))
    }

    pub fn mean_gradient(&self, chi: &[f64]) -> Vec<f64> {
        let (tape, _, _) = self.forward_tape(chi);
        self.backward(&tape, 1.0, 0.0, None)
    }

    /// One assumed-density-filtering step on `(chi, y)`. With `update_noise`
    /// false the noise belief stays fixed.
    pub fn adf_update(&mut self, chi: &[f64], y: f64, update_noise: bool) -> Result<UpdateStats> {
        let (tape, m, v) = self.forward_tape(chi);
        let noise_var = self.noise.inverse_mean()?;
        let s = v + noise_var;
        let r = y - m;
        let log_z = -0.5 * (LN_2PI + s.ln()) - 0.5 * r * r / s;
        if !log_z.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "non-finite log Z (mean {m}, variance {v}, label {y})"
            )));
        }
        let gm = r / s;
        let gv = -0.5 / s + 0.5 * r * r / (s * s);
        let mut grads = WeightGrads {
            dm: self
                .layers
                .iter()
                .map(|l| vec![0.0; l.mean.len()])
                .collect(),
            dv: self
                .layers
                .iter()
                .map(|l| vec![0.0; l.mean.len()])
                .collect(),
        };
        self.backward(&tape, gm, gv, Some(&mut grads));

        let mut stats = UpdateStats::default();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for k in 0..layer.mean.len() {
                let (wm, wv) = (layer.mean[k], layer.var[k]);
                let (dm, dv) = (grads.dm[l][k], grads.dv[l][k]);
                let new_m = wm + wv * dm;
                let new_v = wv - wv * wv * (dm * dm - 2.0 * dv);
                stats.weight_updates += 1;
                if new_v > 0.0 && new_v.is_finite() && new_m.is_finite() {
                    layer.mean[k] = new_m;
                    layer.var[k] = new_v;
                } else {
                    stats.weight_skips += 1;
                }
            }
        }

        if update_noise {
            let a = self.noise.alpha;
            let b = self.noise.beta;
            let log_n = |var: f64| -0.5 * (LN_2PI + (v + var).ln()) - 0.5 * r * r / (v + var);
            let z0 = log_z;
            let z1 = log_n(b / a);
            let z2 = log_n(b / (a + 1.0));
            let new_a = 1.0 / ((z0 + z2 - 2.0 * z1).exp() * (a + 1.0) / a - 1.0);
            let new_b = 1.0 / ((z2 - z1).exp() * (a + 1.0) / b - (z1 - z0).exp() * a / b);
            if new_a > 1.0 && new_b > 0.0 && new_a.is_finite() && new_b.is_finite() {
                self.noise = GammaBelief {
                    alpha: new_a,
                    beta: new_b,
                };
            } else {
                stats.noise_skipped = true;
            }
        }
        Ok(stats)
    }

    /// Re-estimates the weight precision from the current beliefs and swaps
    /// the Gaussian prior factor folded into every weight accordingly.
    pub fn refresh_prior(&mut self) -> usize {
        let w = self.n_weights() as f64;
        let ss: f64 = self
            .layers
            .iter()
            .flat_map(|l| l.mean.iter().zip(&l.var))
            .map(|(m, v)| m * m + v)
            .sum();
        self.lambda = GammaBelief {
            alpha: self.prior.alpha + 0.5 * w,
            beta: self.prior.beta + 0.5 * ss,
        };
        let new_precision = self.lambda.mean();
        let old_precision = self.prior_precision;
        let mut skips = 0;
        for layer in &mut self.layers {
            for k in 0..layer.mean.len() {
                let p = 1.0 / layer.var[k];
                let q = p - old_precision + new_precision;
                if q > 0.0 && q.is_finite() {
                    layer.mean[k] *= p / q;
                    layer.var[k] = 1.0 / q;
                } else {
                    skips += 1;
                }
            }
        }
        self.prior_precision = new_precision;
        skips
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PbpConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lambda_prior: GammaBelief,
    pub noise_prior: GammaBelief,
    pub seed: u64,
}

impl Default for PbpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![50],
            epochs: 10,
            lambda_prior: GammaBelief {
                alpha: 6.0,
                beta: 6.0,
            },
            noise_prior: GammaBelief {
                alpha: 6.0,
                beta: 6.0,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub weight_updates: usize,
    pub weight_skips: usize,
    pub noise_skips: usize,
    pub prior_skips: usize,
}

impl TrainReport {
    pub fn skip_rate(&self) -> f64 {
        if self.weight_updates == 0 {
            0.0
        } else {
            self.weight_skips as f64 / self.weight_updates as f64
        }
    }
}

/// Trains one output channel for `config.epochs` shuffled passes.
pub fn train_pbp(
    inputs: &[Vec<f64>],
    targets: &[f64],
    config: &PbpConfig,
) -> Result<(BnnModel, TrainReport)> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("BNN training set"));
    }
    if inputs.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: inputs.len(),
            right: targets.len(),
        });
    }
    let dim = inputs[0].len();
    let mut model = BnnModel::new(
        dim,
        &config.hidden,
        config.lambda_prior,
        config.noise_prior,
        config.seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let stats = model
                .adf_update(&inputs[i], targets[i], true)
                .map_err(|e| Error::TrainingDiverged(format!("epoch {epoch}, sample {i}: {e}")))?;
            report.weight_updates += stats.weight_updates;
            report.weight_skips += stats.weight_skips;
            report.noise_skips += usize::from(stats.noise_skipped);
        }
        report.prior_skips += model.refresh_prior();
        report.epochs += 1;
    }
    Ok((model, report))
}

impl Regressor for BnnModel {
    fn input_dim(&self) -> usize {
        BnnModel::input_dim(self)
    }

    fn predict(&self, chi: &[f64]) -> (f64, f64) {
        let (m, v) = self.forward_moments(chi);
        (m, v + self.noise.inverse_mean().unwrap_or(f64::INFINITY))
    }

    fn mean_gradient(&self, chi: &[f64]) -> Vec<f64> {
        BnnModel::mean_gradient(self, chi)
    }

    fn predict_with_gradient(&self, chi: &[f64]) -> (f64, f64, Vec<f64>) {
        let (tape, m, v) = self.forward_tape(chi);
        let g = self.backward(&tape, 1.0, 0.0, None);
        (m, v + self.noise.inverse_mean().unwrap_or(f64::INFINITY), g)
    }
}
