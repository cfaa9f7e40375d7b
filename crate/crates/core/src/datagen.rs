//! Training data for the residual models: closed-loop episodes on the true
//! plant, model-plant residual labels, standardization, sparsification and
//! the train/test split.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpc::{DiscreteModel, MpcConfig, MpcController, PredictionModel};
use crate::nlp::SolveStatus;
use crate::plant::{
    influent_substrate, step_true_plant, DisturbanceDraw, DisturbanceModel, PlantParams, State,
};

/// Per-dimension affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fits means and population standard deviations column by column.
    pub fn fit<R: AsRef<[f64]>>(rows: &[R], names: &[&str]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 points to fit a scaler, got {}",
                rows.len()
            )));
        }
        let dim = names.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::LengthMismatch {
                    left: r.len(),
                    right: dim,
                });
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        for (s, name) in std.iter().zip(names) {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(Error::ZeroVariance((*name).to_string()));
            }
        }
        Ok(Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            mean,
            std,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| x * s + m)
            .collect()
    }

    pub fn apply_one(&self, dim: usize, v: f64) -> f64 {
        (v - self.mean[dim]) / self.std[dim]
    }

    pub fn invert_one(&self, dim: usize, v: f64) -> f64 {
        v * self.std[dim] + self.mean[dim]
    }
}

/// One closed-loop transition `(x_k, u_k) -> x_{k+1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub t: f64,
    pub state: State,
    pub input: f64,
    pub s_f: f64,
    pub next: State,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub seed: u64,
    pub x_ref: [f64; 2],
    pub draw: DisturbanceDraw,
    pub transitions: Vec<Transition>,
}

/// Draws the perturbed references `U(0.9, 1.1) * x_ref`.
pub fn sample_reference<R: Rng + ?Sized>(x_ref: [f64; 2], rng: &mut R) -> [f64; 2] {
    [
        x_ref[0] * rng.random_range(0.9..1.1),
        x_ref[1] * rng.random_range(0.9..1.1),
    ]
}

/// Runs one start-up episode from `(0.2, 0)` under nominal MPC with a
/// randomly perturbed reference.
pub fn run_data_episode(
    params: &PlantParams,
    mpc: &MpcConfig,
    disturbance: &DisturbanceModel,
    seed: u64,
    t_sim: f64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_ref = sample_reference(mpc.x_ref, &mut rng);
    let draw = disturbance.sample(&mut rng);
    let config = MpcConfig {
        x_ref,
        ..mpc.clone()
    };
    let model = DiscreteModel::nominal(params, config.dt);
    let mut ctrl = MpcController::new(config.clone());
    let steps = (t_sim / config.dt).round() as usize;
    let mut state = State::new(0.2, 0.0);
    let mut transitions = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * config.dt;
        let s_f = influent_substrate(t, &draw);
        let (record, _) = ctrl.step(&model, state, s_f, vec![None; config.horizon]);
        if record.status == SolveStatus::Failed {
            return Err(Error::Solver(format!(
                "episode seed {seed}: MPC failed at t={t:.3} d, state ({:.3}, {:.3})",
                state.x, state.s
            )));
        }
        let next = step_true_plant(
            params,
            state,
            record.applied_input,
            t,
            config.dt,
            &draw,
            &mut rng,
        )?;
        transitions.push(Transition {
            t,
            state,
            input: record.applied_input,
            s_f,
            next,
        });
        state = next;
    }
    Ok(Episode {
        seed,
        x_ref,
        draw,
        transitions,
    })
}

/// `x_{k+1} - f(x_k, u_k)` per state.
pub fn residual_labels<M: PredictionModel + ?Sized>(
    transitions: &[Transition],
    nominal: &M,
) -> Vec<[f64; 2]> {
    transitions
        .iter()
        .map(|tr| {
            let pred = nominal
                .predict(&tr.state.to_vector(), tr.input, tr.s_f)
                .next;
            [tr.next.x - pred[0], tr.next.s - pred[1]]
        })
        .collect()
}

/// Raw-unit feature/label pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "label_X")]
    pub label_x: f64,
    #[serde(rename = "label_S")]
    pub label_s: f64,
}

impl Sample {
    pub fn features(&self) -> [f64; 2] {
        [self.x, self.s]
    }
    pub fn labels(&self) -> [f64; 2] {
        [self.label_x, self.label_s]
    }
}

/// Evenly spaced subsample of `m` out of `n` indices.
fn even_indices(n: usize, m: usize) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    (0..m).map(|i| i * n / m).collect()
}

/// Drops transitions before `trim` days in every episode, labels the rest and
/// subsamples evenly so that the episodes together contribute `target` points.
pub fn assemble_samples<M: PredictionModel + ?Sized>(
    episodes: &[Episode],
    nominal: &M,
    trim: f64,
    target: usize,
) -> Vec<Sample> {
    let e = episodes.len();
    let mut out = Vec::with_capacity(target);
    for (i, ep) in episodes.iter().enumerate() {
        let kept: Vec<Transition> = ep
            .transitions
            .iter()
            .copied()
            .filter(|tr| tr.t >= trim)
            .collect();
        let labels = residual_labels(&kept, nominal);
        let quota = (i + 1) * target / e - i * target / e;
        for j in even_indices(kept.len(), quota) {
            let tr = &kept[j];
            out.push(Sample {
                x: tr.state.x,
                s: tr.state.s,
                label_x: labels[j][0],
                label_s: labels[j][1],
            });
        }
    }
    out
}

/// Greedy single-pass thinning: a point is kept when it lies at least
/// `threshold` away from every point kept before it. Returns kept indices.
pub fn sparsify_greedy<P: AsRef<[f64]>>(points: &[P], threshold: f64) -> Vec<usize> {
    let t2 = threshold * threshold;
    let mut kept: Vec<usize> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        let far = kept.iter().all(|&j| {
            let q = points[j].as_ref();
            p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= t2
        });
        if far {
            kept.push(i);
        }
    }
    kept
}

/// Random split into `(train, test)` with `round(ratio * n)` training items;
/// both parts keep the original storage order.
pub fn split<T: Clone>(data: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("split"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * data.len() as f64).round() as usize;
    idx[..n_train].sort_unstable();
    idx[n_train..].sort_unstable();
    let train = idx[..n_train].iter().map(|&i| data[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| data[i].clone()).collect();
    Ok((train, test))
}

/// Train/test samples with scalers fitted on the training part.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub features: Scaler,
    pub labels: Scaler,
}

impl Dataset {
    pub fn new(train: Vec<Sample>, test: Vec<Sample>) -> Result<Self> {
        let feats: Vec<[f64; 2]> = train.iter().map(Sample::features).collect();
        let labs: Vec<[f64; 2]> = train.iter().map(Sample::labels).collect();
        let features = Scaler::fit(&feats, &["X", "S"])?;
        let labels = Scaler::fit(&labs, &["label_X", "label_S"])?;
        Ok(Self {
            train,
            test,
            features,
            labels,
        })
    }

    pub fn from_samples(samples: &[Sample], ratio: f64, seed: u64) -> Result<Self> {
        let (train, test) = split(samples, ratio, seed)?;
        Self::new(train, test)
    }

    pub fn standardized_features(&self, samples: &[Sample]) -> Vec<Vec<f64>> {
        samples
            .iter()
            .map(|s| self.features.apply(&s.features()))
            .collect()
    }

    /// Standardized labels of one output channel (0 = X, 1 = S).
    pub fn standardized_labels(&self, samples: &[Sample], channel: usize) -> Vec<f64> {
        samples
            .iter()
            .map(|s| self.labels.apply_one(channel, s.labels()[channel]))
            .collect()
    }

    /// Training samples surviving greedy sparsification in standardized feature space.
    pub fn sparsified_train(&self, threshold: f64) -> Vec<Sample> {
        let feats = self.standardized_features(&self.train);
        sparsify_greedy(&feats, threshold)
            .into_iter()
            .map(|i| self.train[i])
            .collect()
    }
}

pub fn write_samples_csv<W: Write>(writer: W, samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(reader: R) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    for col in ["X", "S", "label_X", "label_S"] {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::MissingColumn(col.to_string()));
        }
    }
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn scaler_hand_example() {
        let rows = vec![[1.0], [2.0], [3.0]];
        let s = Scaler::fit(&rows, &["a"]).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 1e-15);
        assert!((s.std[0] - 0.816496580927726).abs() < 1e-12);
        let z: Vec<f64> = rows.iter().map(|r| s.apply(r)[0]).collect();
        for (a, b) in z.iter().zip([-1.224744871391589, 0.0, 1.224744871391589]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scaler_rejects_constant_dimension() {
        let rows = vec![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        match Scaler::fit(&rows, &["X", "S"]) {
            Err(Error::ZeroVariance(name)) => assert_eq!(name, "S"),
            other => panic!("expected zero-variance error, got {other:?}"),
        }
        assert!(Scaler::fit(&[[1.0]], &["X"]).is_err());
    }

    #[test]
    fn standardized_training_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<[f64; 2]> = (0..500)
            .map(|_| [rng.random_range(900.0..1100.0), rng.random::<f64>() * 50.0])
            .collect();
        let s = Scaler::fit(&rows, &["X", "S"]).unwrap();
        let z: Vec<Vec<f64>> = rows.iter().map(|r| s.apply(r)).collect();
        for d in 0..2 {
            let m = z.iter().map(|r| r[d]).sum::<f64>() / z.len() as f64;
            let v = z.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / z.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v.sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn sparsify_hand_example() {
        let pts = vec![[0.0, 0.0], [0.1, 0.0], [0.3, 0.0]];
        assert_eq!(sparsify_greedy(&pts, 0.2), vec![0, 2]);
        assert_eq!(sparsify_greedy(&pts, 0.0), vec![0, 1, 2]);
    }

    #[test]
    fn split_counts_and_union() {
        let data: Vec<usize> = (0..2800).collect();
        let (train, test) = split(&data, 0.8, 7).unwrap();
        assert_eq!((train.len(), test.len()), (2240, 560));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, data);
        assert_eq!(split(&data, 0.8, 7).unwrap().0, train);
        assert!(split(&data, 1.0, 7).is_err());
        assert!(split::<usize>(&[], 0.5, 7).is_err());
    }

    #[test]
    fn labels_vanish_without_mismatch_or_noise() {
        let params = PlantParams {
            sigma_w: [0.0, 0.0],
            param_mismatch: [1.0, 1.0],
            ..Default::default()
        };
        // a controller model built from the plant itself
        let exact = DiscreteModel {
            reactor: params.true_plant(),
            dt: 0.125,
        };
        let draw = DisturbanceDraw::new(0.3, 0.01, 0.08);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = State::new(0.2, 0.0);
        let mut trs = Vec::new();
        for k in 0..200 {
            let t = k as f64 * 0.125;
            let u = 0.5 + 0.3 * (0.1 * t).sin();
            let next = step_true_plant(&params, state, u, t, 0.125, &draw, &mut rng).unwrap();
            trs.push(Transition {
                t,
                state,
                input: u,
                s_f: influent_substrate(t, &draw),
                next,
            });
            state = next;
        }
        for l in residual_labels(&trs, &exact) {
            assert_eq!(l, [0.0, 0.0]);
        }
    }

    #[test]
    fn steady_state_substrate_label_reflects_growth_gap() {
        let params = PlantParams {
            sigma_w: [0.0, 0.0],
            ..Default::default()
        };
        let nominal = DiscreteModel::nominal(&params, 0.125);
        let x = State::new(1046.28, 101.615);
        let next = params
            .true_plant()
            .step(&x.to_vector(), 0.714286, 5500.0, 0.125)
            .unwrap();
        let tr = Transition {
            t: 0.0,
            state: x,
            input: 0.714286,
            s_f: 5500.0,
            next: State::from_vector(&next),
        };
        let l = residual_labels(&[tr], &nominal)[0];
        assert!(l[1].abs() > 1.0, "{l:?}");
    }

    #[test]
    fn even_subsample_hits_quota() {
        assert_eq!(even_indices(10, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(even_indices(3, 5), vec![0, 1, 2]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<Sample> = (0..50)
            .map(|_| Sample {
                x: rng.random(),
                s: rng.random::<f64>() * 1e3,
                label_x: -rng.random::<f64>(),
                label_s: rng.random::<f64>() / 3.0,
            })
            .collect();
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &samples).unwrap();
        assert_eq!(read_samples_csv(buf.as_slice()).unwrap(), samples);
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "X,S,label_X\n1,2,3\n";
        match read_samples_csv(csv.as_bytes()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "label_S"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn apply_invert_is_identity(v in proptest::collection::vec(-1e4f64..1e4, 3)) {
            let rows = vec![[0.0, 1.0, -3.0], [2.0, 5.0, 4.0], [7.0, -2.0, 1.0]];
            let s = Scaler::fit(&rows, &["a", "b", "c"]).unwrap();
            let back = s.invert(&s.apply(&v));
            for (a, b) in back.iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn sparsified_points_are_separated(pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..80), thr in 0.05f64..1.0) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(a, b)| [a, b]).collect();
            let kept = sparsify_greedy(&pts, thr);
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    let d = ((pts[a][0] - pts[b][0]).powi(2) + (pts[a][1] - pts[b][1]).powi(2)).sqrt();
                    prop_assert!(d >= thr - 1e-12);
                }
            }
        }
    }
}
