//! The experiment ladder: data generation, model training and evaluation,
//! open-loop comparison, closed-loop study and the timing benchmark.

use std::fmt;
use std::io::Read;
use std::str::FromStr;

use nalgebra::Vector2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bnn::{train_pbp, BnnModel, TrainReport};
use crate::config::ExperimentConfig;
use crate::datagen::{assemble_samples, run_data_episode, Dataset, Sample};
use crate::error::{Error, Result};
use crate::gp::{train_gp, GpHyper, GpModel, RestartRecord};
use crate::metrics::{evaluate, CalibrationCurve, ChannelMetrics};
use crate::mpc::{DiscreteModel, MpcController, PredictionModel};
use crate::nlp::SolveStatus;
use crate::plant::{
    influent_substrate, simulate_open_loop, step_true_plant, DisturbanceDraw, State, TrajectoryRow,
};
use crate::residual::{HybridModel, LearnedResidual, Regressor, ResidualPredictor};
use crate::smpc::{SmpcController, SmpcLogRow};

pub const CHANNELS: [&str; 2] = ["X", "S"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub x_ref: [f64; 2],
    pub draw: DisturbanceDraw,
    pub transitions: usize,
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub episodes: Vec<EpisodeSummary>,
    pub samples: Vec<Sample>,
    pub dataset: Dataset,
}

/// Runs the data episodes, labels the residuals and splits the samples.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<GeneratedData> {
    let d = &cfg.data;
    let nominal = DiscreteModel::nominal(&cfg.plant, cfg.mpc.dt);
    let mut episodes = Vec::with_capacity(d.episodes);
    let mut summaries = Vec::with_capacity(d.episodes);
    for i in 0..d.episodes {
        let ep = run_data_episode(
            &cfg.plant,
            &cfg.mpc,
            &cfg.disturbance,
            d.first_seed + i as u64,
            d.t_sim,
        )?;
        summaries.push(EpisodeSummary {
            seed: ep.seed,
            x_ref: ep.x_ref,
            draw: ep.draw,
            transitions: ep.transitions.len(),
        });
        episodes.push(ep);
    }
    let samples = assemble_samples(&episodes, &nominal, d.trim, d.target);
    let dataset = Dataset::from_samples(&samples, d.split_ratio, d.split_seed)?;
    Ok(GeneratedData {
        episodes: summaries,
        samples,
        dataset,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gp,
    Bnn,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Gp => "gp",
            ModelKind::Bnn => "bnn",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(ModelKind::Gp),
            "bnn" => Ok(ModelKind::Bnn),
            _ => Err(Error::Config(format!(
                "unknown model kind '{s}' (expected gp or bnn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChannelReport {
    pub channel: String,
    pub metrics: ChannelMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyper: Option<GpHyper>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restarts: Option<Vec<RestartRecord>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pbp: Option<TrainReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingReport {
    pub kind: ModelKind,
    pub train_size: usize,
    pub test_size: usize,
    pub channels: Vec<ChannelReport>,
}

#[derive(Debug, Clone)]
pub struct Trained<R> {
    pub residual: LearnedResidual<R>,
    pub report: TrainingReport,
    pub curves: [CalibrationCurve; 2],
    /// Training points of the models, raw units.
    pub points: Vec<Sample>,
}

pub const CALIBRATION_LEVELS: usize = 100;

fn evaluate_channel<R: Regressor>(
    model: &R,
    ds: &Dataset,
    channel: usize,
) -> Result<(ChannelMetrics, CalibrationCurve)> {
    let xs = ds.standardized_features(&ds.test);
    let ys = ds.standardized_labels(&ds.test, channel);
    let (means, vars): (Vec<f64>, Vec<f64>) = xs.iter().map(|x| model.predict(x)).unzip();
    evaluate(&means, &vars, &ys, CALIBRATION_LEVELS)
}

/// One GP per channel on the sparsified training set.
pub fn train_gp_residual(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Trained<GpModel>> {
    let points = ds.sparsified_train(cfg.data.sparsify_threshold);
    train_gp_on(cfg, ds, points)
}

/// One GP per channel on the given training points.
pub fn train_gp_on(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    points: Vec<Sample>,
) -> Result<Trained<GpModel>> {
    let xs = ds.standardized_features(&points);
    let mut models = Vec::with_capacity(2);
    let mut channels = Vec::with_capacity(2);
    let mut curves = Vec::with_capacity(2);
    for c in 0..2 {
        let ys = ds.standardized_labels(&points, c);
        let init = GpHyper::unit(2, cfg.gp.noise_variance[c]);
        let opts = crate::gp::GpTrainOptions {
            seed: cfg.gp.training.seed + c as u64,
            ..cfg.gp.training.clone()
        };
        let trained = train_gp(&xs, &ys, &init, &opts)?;
        let (metrics, curve) = evaluate_channel(&trained.model, ds, c)?;
        channels.push(ChannelReport {
            channel: CHANNELS[c].into(),
            metrics,
            hyper: Some(trained.model.hyper.clone()),
            restarts: Some(trained.restarts),
            pbp: None,
        });
        curves.push(curve);
        models.push(trained.model);
    }
    let report = TrainingReport {
        kind: ModelKind::Gp,
        train_size: points.len(),
        test_size: ds.test.len(),
        channels,
    };
    finish(models, ds, report, curves, points)
}

/// One PBP network per channel on the full training set.
pub fn train_bnn_residual(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Trained<BnnModel>> {
    let xs = ds.standardized_features(&ds.train);
    let mut models = Vec::with_capacity(2);
    let mut channels = Vec::with_capacity(2);
    let mut curves = Vec::with_capacity(2);
    for c in 0..2 {
        let ys = ds.standardized_labels(&ds.train, c);
        let pbp = crate::bnn::PbpConfig {
            seed: cfg.bnn.seed + c as u64,
            ..cfg.bnn.clone()
        };
        let (model, train_report) = train_pbp(&xs, &ys, &pbp)?;
        let (metrics, curve) = evaluate_channel(&model, ds, c)?;
        channels.push(ChannelReport {
            channel: CHANNELS[c].into(),
            metrics,
            hyper: None,
            restarts: None,
            pbp: Some(train_report),
        });
        curves.push(curve);
        models.push(model);
    }
    let report = TrainingReport {
        kind: ModelKind::Bnn,
        train_size: ds.train.len(),
        test_size: ds.test.len(),
        channels,
    };
    finish(models, ds, report, curves, ds.train.clone())
}

fn finish<R>(
    models: Vec<R>,
    ds: &Dataset,
    report: TrainingReport,
    curves: Vec<CalibrationCurve>,
    points: Vec<Sample>,
) -> Result<Trained<R>> {
    let channels: [R; 2] = models
        .try_into()
        .map_err(|_| Error::Config("expected two channels".into()))?;
    let curves: [CalibrationCurve; 2] = curves
        .try_into()
        .map_err(|_| Error::Config("expected two channels".into()))?;
    Ok(Trained {
        residual: LearnedResidual {
            channels,
            features: ds.features.clone(),
            labels: ds.labels.clone(),
        },
        report,
        curves,
        points,
    })
}

/// Reads a GP residual written with `serde_json` and rebuilds its factorizations.
pub fn read_gp_residual<Rd: Read>(reader: Rd) -> Result<LearnedResidual<GpModel>> {
    let r: LearnedResidual<GpModel> = serde_json::from_reader(reader)?;
    let [a, b] = r.channels;
    Ok(LearnedResidual {
        channels: [a.restore(), b.restore()],
        features: r.features,
        labels: r.labels,
    })
}

pub fn read_bnn_residual<Rd: Read>(reader: Rd) -> Result<LearnedResidual<BnnModel>> {
    Ok(serde_json::from_reader(reader)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "std_X")]
    pub std_x: f64,
    #[serde(rename = "std_S")]
    pub std_s: f64,
}

/// Predictive standard deviation (raw units) on an `n x n` grid covering the
/// training points with a 25% margin.
pub fn uncertainty_grid<P: ResidualPredictor + ?Sized>(
    residual: &P,
    points: &[Sample],
    n: usize,
) -> Vec<GridRow> {
    let range = |f: fn(&Sample) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let pad = 0.25 * (hi - lo).max(1.0);
        (lo - pad, hi + pad)
    };
    let (x0, x1) = range(|s| s.x);
    let (s0, s1) = range(|s| s.s);
    let n = n.max(2);
    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let x = x0 + (x1 - x0) * i as f64 / (n - 1) as f64;
            let s = s0 + (s1 - s0) * j as f64 / (n - 1) as f64;
            let p = residual.residual(&Vector2::new(x, s));
            rows.push(GridRow {
                x,
                s,
                std_x: p.var[0].max(0.0).sqrt(),
                std_s: p.var[1].max(0.0).sqrt(),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, Serialize)]
pub struct SteadyStateError {
    pub model: String,
    pub final_x: f64,
    pub final_s: f64,
    pub error_x: f64,
    pub error_s: f64,
}

#[derive(Debug, Clone)]
pub struct OpenLoopResult {
    pub traces: Vec<(String, Vec<TrajectoryRow>)>,
    pub summary: Vec<SteadyStateError>,
}

fn simulate_model<M: PredictionModel + ?Sized>(
    model: &M,
    cfg: &ExperimentConfig,
) -> Vec<TrajectoryRow> {
    let ol = &cfg.open_loop;
    let dt = cfg.mpc.dt;
    let steps = (ol.t_sim / dt).round() as usize;
    let mut x = Vector2::from(ol.x0);
    let mut rows = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let f = ol.flow(t);
        rows.push(TrajectoryRow {
            t,
            x: x[0],
            s: x[1],
            f,
            s_f: ol.s_f,
        });
        if k < steps {
            x = model.predict(&x, f, ol.s_f).next;
        }
    }
    rows
}

/// Noise-free response of the true plant, the nominal model and the hybrid
/// models to the configured flow profile.
pub fn open_loop(
    cfg: &ExperimentConfig,
    gp: Option<&LearnedResidual<GpModel>>,
    bnn: Option<&LearnedResidual<BnnModel>>,
) -> Result<OpenLoopResult> {
    let ol = &cfg.open_loop;
    let dt = cfg.mpc.dt;
    let steps = (ol.t_sim / dt).round() as usize;
    let truth = simulate_open_loop(
        &cfg.plant.true_plant(),
        State::new(ol.x0[0], ol.x0[1]),
        dt,
        steps,
        |t| ol.flow(t),
        |_| ol.s_f,
    )?;
    let nominal = DiscreteModel::nominal(&cfg.plant, dt);
    let mut traces = vec![
        ("true".to_string(), truth),
        ("nominal".to_string(), simulate_model(&nominal, cfg)),
    ];
    if let Some(r) = gp {
        traces.push((
            "gp".into(),
            simulate_model(&HybridModel::new(nominal, r), cfg),
        ));
    }
    if let Some(r) = bnn {
        traces.push((
            "bnn".into(),
            simulate_model(&HybridModel::new(nominal, r), cfg),
        ));
    }
    let last = *traces[0].1.last().expect("trajectory");
    let summary = traces
        .iter()
        .skip(1)
        .map(|(name, rows)| {
            let end = rows.last().expect("trajectory");
            SteadyStateError {
                model: name.clone(),
                final_x: end.x,
                final_s: end.s,
                error_x: (end.x - last.x).abs(),
                error_s: (end.s - last.s).abs(),
            }
        })
        .collect();
    Ok(OpenLoopResult { traces, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    Nominal,
    Hybrid,
    SmpcGp,
    SmpcBnn,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [
        ControllerKind::Nominal,
        ControllerKind::Hybrid,
        ControllerKind::SmpcGp,
        ControllerKind::SmpcBnn,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Nominal => "nominal",
            ControllerKind::Hybrid => "hybrid",
            ControllerKind::SmpcGp => "smpc-gp",
            ControllerKind::SmpcBnn => "smpc-bnn",
        }
    }

    pub fn needs(&self) -> Option<ModelKind> {
        match self {
            ControllerKind::Nominal => None,
            ControllerKind::Hybrid | ControllerKind::SmpcGp => Some(ModelKind::Gp),
            ControllerKind::SmpcBnn => Some(ModelKind::Bnn),
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown controller '{s}' (expected nominal, hybrid, smpc-gp or smpc-bnn)"
                ))
            })
    }
}

/// Learned residuals available to the controllers.
#[derive(Clone, Copy, Default)]
pub struct Residuals<'a> {
    pub gp: Option<&'a LearnedResidual<GpModel>>,
    pub bnn: Option<&'a LearnedResidual<BnnModel>>,
}

enum Policy<'a> {
    Mean(MpcController, HybridModel<'a, dyn ResidualPredictor + 'a>),
    Stochastic(SmpcController, HybridModel<'a, dyn ResidualPredictor + 'a>),
}

/// One seeded closed-loop episode from `t0` for `t_sim` days. The seed fixes
/// the influent draw and the process noise, so all controllers see the same
/// disturbances.
pub fn closed_loop_episode(
    cfg: &ExperimentConfig,
    kind: ControllerKind,
    residuals: Residuals<'_>,
    seed: u64,
    t0: f64,
    t_sim: f64,
    x0: [f64; 2],
) -> Result<Vec<SmpcLogRow>> {
    let dt = cfg.smpc.mpc.dt;
    let nominal = DiscreteModel::nominal(&cfg.plant, dt);
    let zero = crate::residual::ZeroResidual;
    let missing =
        |m: ModelKind| Error::Config(format!("controller {kind} needs a trained {m} model"));
    let gp = || {
        residuals
            .gp
            .map(|r| r as &dyn ResidualPredictor)
            .ok_or_else(|| missing(ModelKind::Gp))
    };
    let bnn = || {
        residuals
            .bnn
            .map(|r| r as &dyn ResidualPredictor)
            .ok_or_else(|| missing(ModelKind::Bnn))
    };
    let sigma_w = cfg.plant.noise_covariance(dt);
    let mut policy = match kind {
        ControllerKind::Nominal => Policy::Mean(
            MpcController::new(cfg.smpc.mpc.clone()),
            HybridModel::new(nominal, &zero as &dyn ResidualPredictor),
        ),
        ControllerKind::Hybrid => Policy::Mean(
            MpcController::new(cfg.smpc.mpc.clone()),
            HybridModel::new(nominal, gp()?),
        ),
        ControllerKind::SmpcGp => Policy::Stochastic(
            SmpcController::new(cfg.smpc.clone(), sigma_w),
            HybridModel::new(nominal, gp()?),
        ),
        ControllerKind::SmpcBnn => Policy::Stochastic(
            SmpcController::new(cfg.smpc.clone(), sigma_w),
            HybridModel::new(nominal, bnn()?),
        ),
    };
    let model_kind = kind
        .needs()
        .map_or("nominal".to_string(), |m| m.to_string());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = cfg.disturbance.sample(&mut rng);
    let chance = &cfg.smpc.chance;
    let x_ref = cfg.smpc.mpc.x_ref[0];
    let horizon = cfg.smpc.mpc.horizon;
    let steps = (t_sim / dt).round() as usize;
    let mut state = State::new(x0[0], x0[1]);
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = t0 + k as f64 * dt;
        let s_f = influent_substrate(t, &draw);
        let schedule = chance.schedule(t, dt, horizon, x_ref);
        let (record, tight) = match &mut policy {
            Policy::Mean(ctrl, model) => {
                let (rec, _) = ctrl.step(model, state, s_f, schedule.clone());
                (rec, schedule.first().copied().flatten())
            }
            Policy::Stochastic(ctrl, model) => {
                let (rec, sol) = ctrl.step(model, state, t, s_f);
                (rec, sol.tightened.first().copied().flatten())
            }
        };
        let band = chance.band(t, x_ref);
        rows.push(SmpcLogRow {
            t,
            x: state.x,
            s: state.s,
            f: record.applied_input,
            lb: band.map(|b| b.0),
            ub: band.map(|b| b.1),
            tight_lb: tight.map(|b| b.0),
            tight_ub: tight.map(|b| b.1),
            solve_ms: record.solve_time * 1e3,
            status: if record.fallback {
                "fallback".into()
            } else {
                record.status.to_string()
            },
            model_kind: model_kind.clone(),
        });
        state = step_true_plant(
            &cfg.plant,
            state,
            record.applied_input,
            t,
            dt,
            &draw,
            &mut rng,
        )?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ViolationCounts {
    pub steps: usize,
    pub active_steps: usize,
    pub violations: usize,
    pub lower: usize,
    pub upper: usize,
    pub max_depth: f64,
    pub first_violation: Option<f64>,
    pub fallbacks: usize,
}

impl ViolationCounts {
    pub fn rate(&self) -> f64 {
        if self.active_steps == 0 {
            0.0
        } else {
            self.violations as f64 / self.active_steps as f64
        }
    }

    pub fn merge(&mut self, other: &ViolationCounts) {
        self.steps += other.steps;
        self.active_steps += other.active_steps;
        self.violations += other.violations;
        self.lower += other.lower;
        self.upper += other.upper;
        self.max_depth = self.max_depth.max(other.max_depth);
        self.first_violation = match (self.first_violation, other.first_violation) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.fallbacks += other.fallbacks;
    }
}

/// Counts steps whose measured biomass lies outside the untightened band.
pub fn count_violations(rows: &[SmpcLogRow]) -> ViolationCounts {
    let mut c = ViolationCounts {
        steps: rows.len(),
        ..Default::default()
    };
    for r in rows {
        if r.status == "fallback" {
            c.fallbacks += 1;
        }
        let (Some(lb), Some(ub)) = (r.lb, r.ub) else {
            continue;
        };
        c.active_steps += 1;
        let depth = if r.x < lb {
            c.lower += 1;
            lb - r.x
        } else if r.x > ub {
            c.upper += 1;
            r.x - ub
        } else {
            continue;
        };
        c.violations += 1;
        c.max_depth = c.max_depth.max(depth);
        c.first_violation.get_or_insert(r.t);
    }
    c
}

pub fn read_smpc_log<Rd: Read>(reader: Rd) -> Result<Vec<SmpcLogRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    for col in [
        "t",
        "X",
        "S",
        "F",
        "lb",
        "ub",
        "tight_lb",
        "tight_ub",
        "solve_ms",
        "status",
        "model_kind",
    ] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::MissingColumn(col.to_string()));
        }
    }
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedViolations {
    pub seed: u64,
    #[serde(flatten)]
    pub counts: ViolationCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViolationReport {
    pub controller: ControllerKind,
    pub per_seed: Vec<SeedViolations>,
    pub total: ViolationCounts,
}

impl ViolationReport {
    pub fn from_logs(controller: ControllerKind, logs: &[(u64, Vec<SmpcLogRow>)]) -> Self {
        let per_seed: Vec<SeedViolations> = logs
            .iter()
            .map(|(seed, rows)| SeedViolations {
                seed: *seed,
                counts: count_violations(rows),
            })
            .collect();
        let mut total = ViolationCounts::default();
        for s in &per_seed {
            total.merge(&s.counts);
        }
        Self {
            controller,
            per_seed,
            total,
        }
    }
}

/// One closed-loop log per seed.
pub type SeedLog = (u64, Vec<SmpcLogRow>);

/// Closed-loop episodes of one controller over the configured seeds.
pub fn closed_loop_study(
    cfg: &ExperimentConfig,
    kind: ControllerKind,
    residuals: Residuals<'_>,
    seeds: &[u64],
) -> Result<(Vec<SeedLog>, ViolationReport)> {
    let cl = &cfg.closed_loop;
    let mut logs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        logs.push((
            seed,
            closed_loop_episode(cfg, kind, residuals, seed, 0.0, cl.t_sim, cl.x0)?,
        ));
    }
    let report = ViolationReport::from_logs(kind, &logs);
    Ok((logs, report))
}

/// Deterministic part of one timed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub model: String,
    pub train_size: usize,
    pub steps: usize,
    pub iterations: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub model: String,
    pub train_size: usize,
    pub repeat: usize,
    pub total_s: f64,
    pub per_step_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub runs: Vec<BenchmarkRow>,
    pub timings: Vec<TimingRow>,
}

impl BenchmarkResult {
    /// Median total time of each `(model, train_size)` pair, in run order.
    pub fn median_totals(&self) -> Vec<(String, usize, f64)> {
        let mut out: Vec<(String, usize, f64)> = Vec::new();
        for run in &self.runs {
            let mut t: Vec<f64> = self
                .timings
                .iter()
                .filter(|r| r.model == run.model && r.train_size == run.train_size)
                .map(|r| r.total_s)
                .collect();
            t.sort_by(f64::total_cmp);
            out.push((run.model.clone(), run.train_size, t[t.len() / 2]));
        }
        out
    }
}

fn timed_run<P: ResidualPredictor + ?Sized>(
    cfg: &ExperimentConfig,
    residual: &P,
) -> Result<(usize, usize, usize, f64)> {
    let b = &cfg.benchmark;
    let dt = cfg.smpc.mpc.dt;
    let nominal = DiscreteModel::nominal(&cfg.plant, dt);
    let hybrid = HybridModel::new(nominal, residual);
    let mut ctrl = SmpcController::new(cfg.smpc.clone(), cfg.plant.noise_covariance(dt));
    let mut rng = ChaCha8Rng::seed_from_u64(b.seed);
    let draw = cfg.disturbance.sample(&mut rng);
    let steps = (b.t_sim / dt).round() as usize;
    let mut state = State::new(cfg.closed_loop.x0[0], cfg.closed_loop.x0[1]);
    let (mut iterations, mut fallbacks, mut total) = (0, 0, 0.0);
    for k in 0..steps {
        let t = b.t_start + k as f64 * dt;
        let s_f = influent_substrate(t, &draw);
        let (rec, _) = ctrl.step(&hybrid, state, t, s_f);
        iterations += rec.iterations;
        fallbacks += usize::from(rec.fallback || rec.status == SolveStatus::Failed);
        total += rec.solve_time;
        state = step_true_plant(&cfg.plant, state, rec.applied_input, t, dt, &draw, &mut rng)?;
    }
    Ok((steps, iterations, fallbacks, total))
}

/// GP-SMPC runs at each configured training size (random subsets of the
/// training set) and a BNN-SMPC baseline, each repeated for timing.
pub fn benchmark_timing(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    bnn: &LearnedResidual<BnnModel>,
) -> Result<BenchmarkResult> {
    let b = &cfg.benchmark;
    let mut runs = Vec::new();
    let mut timings = Vec::new();
    let mut record = |name: &str, size: usize, reps: Vec<(usize, usize, usize, f64)>| {
        let (steps, iterations, fallbacks, _) = reps[0];
        runs.push(BenchmarkRow {
            model: name.into(),
            train_size: size,
            steps,
            iterations,
            fallbacks,
        });
        for (i, r) in reps.iter().enumerate() {
            timings.push(TimingRow {
                model: name.into(),
                train_size: size,
                repeat: i,
                total_s: r.3,
                per_step_ms: 1e3 * r.3 / r.0.max(1) as f64,
            });
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(b.seed);
    for &size in &b.sizes {
        if size > ds.train.len() {
            return Err(Error::Config(format!(
                "benchmark size {size} exceeds the {} training points",
                ds.train.len()
            )));
        }
        let mut idx = sample(&mut rng, ds.train.len(), size).into_vec();
        idx.sort_unstable();
        let points: Vec<Sample> = idx.iter().map(|&i| ds.train[i]).collect();
        let gp = train_gp_on(cfg, ds, points)?;
        let reps = (0..b.repeats)
            .map(|_| timed_run(cfg, &gp.residual))
            .collect::<Result<Vec<_>>>()?;
        record("gp", size, reps);
    }
    let reps = (0..b.repeats)
        .map(|_| timed_run(cfg, bnn))
        .collect::<Result<Vec<_>>>()?;
    record("bnn", ds.train.len(), reps);
    Ok(BenchmarkResult { runs, timings })
}

/// First benchmark size at which the GP-SMPC median time exceeds the BNN-SMPC one.
pub fn crossover_size(totals: &[(String, usize, f64)]) -> Option<usize> {
    let bnn = totals.iter().find(|t| t.0 == "bnn")?.2;
    totals
        .iter()
        .filter(|t| t.0 == "gp")
        .find(|t| t.2 > bnn)
        .map(|t| t.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, x: f64, band: Option<(f64, f64)>, status: &str) -> SmpcLogRow {
        SmpcLogRow {
            t,
            x,
            s: 100.0,
            f: 0.7,
            lb: band.map(|b| b.0),
            ub: band.map(|b| b.1),
            tight_lb: None,
            tight_ub: None,
            solve_ms: 1.0,
            status: status.into(),
            model_kind: "gp".into(),
        }
    }

    #[test]
    fn violation_counting() {
        let b = Some((1000.0, 1050.0));
        let rows = vec![
            row(0.0, 500.0, None, "converged"),
            row(30.0, 990.0, b, "converged"),
            row(30.125, 1020.0, b, "fallback"),
            row(30.25, 1060.0, b, "converged"),
        ];
        let c = count_violations(&rows);
        assert_eq!(
            (
                c.steps,
                c.active_steps,
                c.violations,
                c.lower,
                c.upper,
                c.fallbacks
            ),
            (4, 3, 2, 1, 1, 1)
        );
        assert_eq!(c.max_depth, 10.0);
        assert_eq!(c.first_violation, Some(30.0));
        assert!((c.rate() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn log_round_trip_recounts() {
        let b = Some((1000.0, 1050.0));
        let rows = vec![
            row(29.875, 900.0, None, "converged"),
            row(30.0, 990.0, b, "max_iter"),
        ];
        let mut buf = Vec::new();
        crate::smpc::write_smpc_log(&mut buf, &rows).unwrap();
        let back = read_smpc_log(buf.as_slice()).unwrap();
        assert_eq!(count_violations(&back), count_violations(&rows));
        assert!(
            matches!(read_smpc_log("t,X\n0,1\n".as_bytes()), Err(Error::MissingColumn(c)) if c == "S")
        );
    }

    #[test]
    fn kinds_parse() {
        for k in ControllerKind::ALL {
            assert_eq!(k.as_str().parse::<ControllerKind>().unwrap(), k);
        }
        assert!("mpc".parse::<ControllerKind>().is_err());
        assert_eq!("bnn".parse::<ModelKind>().unwrap(), ModelKind::Bnn);
    }

    #[test]
    fn crossover_detection() {
        let totals = vec![
            ("gp".to_string(), 25, 1.0),
            ("gp".to_string(), 50, 2.0),
            ("gp".to_string(), 100, 4.0),
            ("bnn".to_string(), 2240, 3.0),
        ];
        assert_eq!(crossover_size(&totals), Some(100));
        assert_eq!(crossover_size(&totals[..2]), None);
    }

    #[test]
    fn nominal_controller_needs_no_models() {
        let cfg = ExperimentConfig::default();
        let rows = closed_loop_episode(
            &cfg,
            ControllerKind::Nominal,
            Residuals::default(),
            3,
            29.0,
            2.0,
            [1046.28, 101.615],
        )
        .unwrap();
        assert_eq!(rows.len(), 16);
        assert!(rows.iter().all(|r| r.solve_ms > 0.0));
        assert!(rows[..8].iter().all(|r| r.lb.is_none()));
        assert!(rows[8..].iter().all(|r| r.lb.is_some()));
        assert!(closed_loop_episode(
            &cfg,
            ControllerKind::SmpcGp,
            Residuals::default(),
            3,
            0.0,
            1.0,
            [1046.28, 101.615]
        )
        .is_err());
    }
}
