//! Single-output Gaussian-process regression with a squared-exponential ARD
//! kernel, fixed noise variance and zero prior mean.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residual::Regressor;

const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl GpHyper {
    pub fn unit(dim: usize, noise_variance: f64) -> Self {
        Self {
            length_scales: vec![1.0; dim],
            signal_variance: 1.0,
            noise_variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.length_scales.iter().all(|l| *l > 0.0 && l.is_finite())
            && self.signal_variance > 0.0
            && self.signal_variance.is_finite()
            && self.noise_variance > 0.0
            && self.noise_variance.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "GP hyperparameters must be positive and finite: {self:?}"
            )))
        }
    }

    /// `(log l_1, .., log l_D, log sf2)`.
    fn to_log(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.length_scales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_variance.ln());
        v
    }

    fn from_log(theta: &[f64], noise_variance: f64) -> Self {
        let d = theta.len() - 1;
        Self {
            length_scales: theta[..d].iter().map(|t| t.exp()).collect(),
            signal_variance: theta[d].exp(),
            noise_variance,
        }
    }
}

pub fn kernel_se_ard(a: &[f64], b: &[f64], hyper: &GpHyper) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&hyper.length_scales)
        .map(|((x, y), l)| {
            let d = (x - y) / l;
            d * d
        })
        .sum();
    hyper.signal_variance * (-0.5 * r2).exp()
}

fn kernel_matrix(inputs: &[Vec<f64>], hyper: &GpHyper) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.signal_variance;
        for j in 0..i {
            let v = kernel_se_ard(&inputs[i], &inputs[j], hyper);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky of `K + (noise + jitter) I`, escalating the jitter on failure.
fn factor(k: &DMatrix<f64>, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mut a = k.clone();
    for i in 0..n {
        a[(i, i)] += noise;
    }
    if let Some(c) = a.clone().cholesky() {
        return Ok((c, 0.0));
    }
    for jitter in JITTER_LADDER {
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        if let Some(c) = b.cholesky() {
            return Ok((c, jitter));
        }
    }
    Err(Error::NotPositiveDefinite {
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

fn check_data(inputs: &[Vec<f64>], targets: &[f64], dim: usize) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("GP training set"));
    }
    if inputs.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: inputs.len(),
            right: targets.len(),
        });
    }
    if let Some(bad) = inputs.iter().find(|x| x.len() != dim) {
        return Err(Error::LengthMismatch {
            left: bad.len(),
            right: dim,
        });
    }
    Ok(())
}

/// Negative log marginal likelihood.
pub fn nlml(hyper: &GpHyper, inputs: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    Ok(nlml_with_gradient(hyper, inputs, targets)?.0)
}

/// Negative log marginal likelihood and its gradient with respect to
/// `(log l_1, .., log l_D, log sf2)`.
pub fn nlml_with_gradient(
    hyper: &GpHyper,
    inputs: &[Vec<f64>],
    targets: &[f64],
) -> Result<(f64, Vec<f64>)> {
    hyper.validate()?;
    let dim = hyper.length_scales.len();
    check_data(inputs, targets, dim)?;
    let n = inputs.len();
    let k = kernel_matrix(inputs, hyper);
    let (chol, _) = factor(&k, hyper.noise_variance)?;
    let y = DVector::from_column_slice(targets);
    let alpha = chol.solve(&y);
    let log_det: f64 = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .take(n)
            .map(|d| d.ln())
            .sum::<f64>();
    let value =
        0.5 * y.dot(&alpha) + 0.5 * log_det + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // dNLML/dtheta = -1/2 tr((alpha alpha' - K^-1) dK/dtheta)
    let mut w = chol.inverse();
    w.ger(-1.0, &alpha, &alpha, 1.0);
    let mut grad = vec![0.0; dim + 1];
    for i in 0..n {
        for j in 0..n {
            let kf = k[(i, j)];
            let wij = w[(i, j)];
            grad[dim] += 0.5 * wij * kf;
            if i != j {
                for (d, g) in grad.iter_mut().take(dim).enumerate() {
                    let l = hyper.length_scales[d];
                    let diff = (inputs[i][d] - inputs[j][d]) / l;
                    *g += 0.5 * wij * kf * diff * diff;
                }
            }
        }
    }
    Ok((value, grad))
}

/// Trained GP posterior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModel {
    pub hyper: GpHyper,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Lower Cholesky factor of `K + sn2 I`, row-major.
    pub cholesky: Vec<f64>,
    pub jitter: f64,
    pub nlml: f64,
    #[serde(skip)]
    chol_cache: Option<DMatrix<f64>>,
}

impl GpModel {
    /// Conditions the GP on the data with fixed hyperparameters.
    pub fn fit(hyper: GpHyper, inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        hyper.validate()?;
        check_data(&inputs, &targets, hyper.length_scales.len())?;
        let n = inputs.len();
        let k = kernel_matrix(&inputs, &hyper);
        let (chol, jitter) = factor(&k, hyper.noise_variance)?;
        let y = DVector::from_column_slice(&targets);
        let alpha = chol.solve(&y);
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let nlml = 0.5 * y.dot(&alpha)
            + 0.5 * log_det
            + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        let mut cholesky = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                cholesky.push(l[(i, j)]);
            }
        }
        Ok(Self {
            hyper,
            inputs,
            targets,
            alpha: alpha.as_slice().to_vec(),
            cholesky,
            jitter,
            nlml,
            chol_cache: Some(l),
        })
    }

    /// A model without data: the prior.
    pub fn prior(hyper: GpHyper) -> Self {
        Self {
            hyper,
            inputs: Vec::new(),
            targets: Vec::new(),
            alpha: Vec::new(),
            cholesky: Vec::new(),
            jitter: 0.0,
            nlml: 0.0,
            chol_cache: Some(DMatrix::zeros(0, 0)),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn lower(&self) -> std::borrow::Cow<'_, DMatrix<f64>> {
        match &self.chol_cache {
            Some(l) => std::borrow::Cow::Borrowed(l),
            None => {
                let n = self.len();
                std::borrow::Cow::Owned(DMatrix::from_row_slice(n, n, &self.cholesky))
            }
        }
    }

    /// Rebuilds the cached factor after deserialization.
    pub fn restore(mut self) -> Self {
        let n = self.len();
        self.chol_cache = Some(DMatrix::from_row_slice(n, n, &self.cholesky));
        self
    }

    fn cross(&self, chi: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.inputs
                .iter()
                .map(|x| kernel_se_ard(chi, x, &self.hyper)),
        )
    }

    fn variance_from(&self, ks: &DVector<f64>) -> f64 {
        if self.is_empty() {
            return self.hyper.signal_variance;
        }
        let l = self.lower();
        let v = l
            .solve_lower_triangular(ks)
            .unwrap_or_else(|| DVector::zeros(ks.len()));
        (self.hyper.signal_variance - v.norm_squared()).max(0.0)
    }

    fn gradient_from(&self, chi: &[f64], ks: &DVector<f64>) -> Vec<f64> {
        let mut g = vec![0.0; self.hyper.length_scales.len()];
        for ((x, a), k) in self.inputs.iter().zip(&self.alpha).zip(ks.iter()) {
            let w = a * k;
            for (d, gd) in g.iter_mut().enumerate() {
                let l = self.hyper.length_scales[d];
                *gd -= w * (chi[d] - x[d]) / (l * l);
            }
        }
        g
    }
}

impl Regressor for GpModel {
    fn input_dim(&self) -> usize {
        self.hyper.length_scales.len()
    }

    /// Posterior mean and latent variance (observation noise excluded).
    fn predict(&self, chi: &[f64]) -> (f64, f64) {
        let ks = self.cross(chi);
        let mean = ks.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        (mean, self.variance_from(&ks))
    }

    fn mean_gradient(&self, chi: &[f64]) -> Vec<f64> {
        let ks = self.cross(chi);
        self.gradient_from(chi, &ks)
    }

    fn predict_with_gradient(&self, chi: &[f64]) -> (f64, f64, Vec<f64>) {
        let ks = self.cross(chi);
        let mean = ks.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        (mean, self.variance_from(&ks), self.gradient_from(chi, &ks))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpTrainOptions {
    /// Random restarts in addition to the initial hyperparameters.
    pub restarts: usize,
    pub max_iter: usize,
    pub initial_step: f64,
    /// Stop when the gradient max-norm falls below this.
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for GpTrainOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iter: 300,
            initial_step: 0.1,
            grad_tol: 1e-6,
            seed: 0,
        }
    }
}

/// Summary of one optimizer run.
#[derive(Debug, Clone, Serialize)]
pub struct RestartRecord {
    pub initial_nlml: f64,
    pub final_nlml: f64,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainedGp {
    pub model: GpModel,
    pub restarts: Vec<RestartRecord>,
}

/// Log-space box keeping the optimizer away from numerically meaningless scales.
const LOG_BOUND: f64 = 8.0;

fn descend(
    theta0: Vec<f64>,
    inputs: &[Vec<f64>],
    targets: &[f64],
    noise: f64,
    opts: &GpTrainOptions,
) -> Result<(Vec<f64>, RestartRecord)> {
    let eval =
        |theta: &[f64]| nlml_with_gradient(&GpHyper::from_log(theta, noise), inputs, targets);
    let (mut f, mut g) = eval(&theta0)?;
    let initial = f;
    let mut theta = theta0;
    let mut step = opts.initial_step;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let gmax = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if gmax < opts.grad_tol || step < 1e-12 {
            break;
        }
        iterations += 1;
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let trial: Vec<f64> = theta
            .iter()
            .zip(&g)
            .map(|(t, gi)| (t - step * gi / gnorm.max(1.0)).clamp(-LOG_BOUND, LOG_BOUND))
            .collect();
        match eval(&trial) {
            Ok((ft, gt)) if ft.is_finite() && ft < f => {
                theta = trial;
                f = ft;
                g = gt;
                step *= 1.2;
            }
            _ => step *= 0.5,
        }
    }
    Ok((
        theta,
        RestartRecord {
            initial_nlml: initial,
            final_nlml: f,
            iterations,
            error: None,
        },
    ))
}

/// Minimizes the NLML over log length scales and log signal variance, with
/// the noise variance held fixed, from `init` and from random restarts.
pub fn train_gp(
    inputs: &[Vec<f64>],
    targets: &[f64],
    init: &GpHyper,
    opts: &GpTrainOptions,
) -> Result<TrainedGp> {
    init.validate()?;
    check_data(inputs, targets, init.length_scales.len())?;
    let noise = init.noise_variance;
    let dim = init.length_scales.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![init.to_log()];
    for _ in 0..opts.restarts {
        starts.push((0..=dim).map(|_| rng.random_range(-2.0..2.0)).collect());
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut records = Vec::new();
    for theta0 in starts {
        match descend(theta0, inputs, targets, noise, opts) {
            Ok((theta, rec)) => {
                if best.as_ref().is_none_or(|(f, _)| rec.final_nlml < *f) {
                    best = Some((rec.final_nlml, theta));
                }
                records.push(rec);
            }
            Err(e) => records.push(RestartRecord {
                initial_nlml: f64::NAN,
                final_nlml: f64::NAN,
                iterations: 0,
                error: Some(e.to_string()),
            }),
        }
    }
    let Some((_, theta)) = best else {
        let trace: Vec<String> = records.iter().filter_map(|r| r.error.clone()).collect();
        return Err(Error::TrainingDiverged(format!(
            "all GP restarts failed: {}",
            trace.join("; ")
        )));
    };
    let model = GpModel::fit(
        GpHyper::from_log(&theta, noise),
        inputs.to_vec(),
        targets.to_vec(),
    )?;
    Ok(TrainedGp {
        model,
        restarts: records,
    })
}
