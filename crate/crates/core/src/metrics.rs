//! Accuracy and calibration metrics for probabilistic regressors.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::EmptyInput("metric inputs"));
    }
    Ok(())
}

fn check_variances(variances: &[f64]) -> Result<()> {
    match variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        Some(v) => Err(Error::InvalidParameter(format!(
            "predictive variance must be positive, got {v}"
        ))),
        None => Ok(()),
    }
}

pub fn rmse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let se: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok((se / labels.len() as f64).sqrt())
}

/// Mean Gaussian negative log-likelihood.
pub fn nll_gaussian(means: &[f64], variances: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(means.len(), labels.len())?;
    check_lengths(variances.len(), labels.len())?;
    check_variances(variances)?;
    let total: f64 = means
        .iter()
        .zip(variances)
        .zip(labels)
        .map(|((m, v), y)| {
            0.5 * (2.0 * std::f64::consts::PI * v).ln() + (y - m) * (y - m) / (2.0 * v)
        })
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub expected: Vec<f64>,
    pub observed: Vec<f64>,
}

/// Fraction of labels whose predictive CDF value is at most `p`, on
/// `n_levels` uniform levels `p_i = i / (n_levels + 1)`.
pub fn calibration_curve(
    means: &[f64],
    variances: &[f64],
    labels: &[f64],
    n_levels: usize,
) -> Result<CalibrationCurve> {
    check_lengths(means.len(), labels.len())?;
    check_lengths(variances.len(), labels.len())?;
    check_variances(variances)?;
    if n_levels < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 calibration levels, got {n_levels}"
        )));
    }
    let mut cdfs: Vec<f64> = means
        .iter()
        .zip(variances)
        .zip(labels)
        .map(|((m, v), y)| 0.5 * erfc(-(y - m) / (2.0 * v).sqrt()))
        .collect();
    cdfs.sort_by(f64::total_cmp);
    let n = cdfs.len() as f64;
    let expected: Vec<f64> = (1..=n_levels)
        .map(|i| i as f64 / (n_levels + 1) as f64)
        .collect();
    let observed = expected
        .iter()
        .map(|p| cdfs.partition_point(|c| c <= p) as f64 / n)
        .collect();
    Ok(CalibrationCurve { expected, observed })
}

/// Trapezoidal integral of `|observed(p) - p|`, with the curve pinned to
/// `(0, 0)` and `(1, 1)`.
pub fn miscalibration_area(curve: &CalibrationCurve) -> f64 {
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(
        curve
            .expected
            .iter()
            .copied()
            .zip(curve.observed.iter().copied()),
    );
    pts.push((1.0, 1.0));
    pts.windows(2)
        .map(|w| {
            let (p0, o0) = w[0];
            let (p1, o1) = w[1];
            0.5 * (p1 - p0) * ((o0 - p0).abs() + (o1 - p1).abs())
        })
        .sum()
}

/// Writes `p,observed` rows.
pub fn write_calibration_csv<W: Write>(writer: W, curve: &CalibrationCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["p", "observed"])?;
    for (p, o) in curve.expected.iter().zip(&curve.observed) {
        w.write_record([p.to_string(), o.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Metrics of one model on one output channel, in standardized label units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub rmse: f64,
    pub nll: f64,
    pub miscal_area: f64,
}

pub fn evaluate(
    means: &[f64],
    variances: &[f64],
    labels: &[f64],
    n_levels: usize,
) -> Result<(ChannelMetrics, CalibrationCurve)> {
    let curve = calibration_curve(means, variances, labels, n_levels)?;
    let metrics = ChannelMetrics {
        rmse: rmse(means, labels)?,
        nll: nll_gaussian(means, variances, labels)?,
        miscal_area: miscalibration_area(&curve),
    };
    Ok((metrics, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[1.0, -1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(rmse(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn nll_examples() {
        assert!((nll_gaussian(&[0.0], &[1.0], &[0.0]).unwrap() - 0.918939).abs() < 1e-6);
        assert!((nll_gaussian(&[0.0], &[1.0], &[1.0]).unwrap() - 1.418939).abs() < 1e-6);
        assert!(nll_gaussian(&[0.0], &[0.0], &[0.0]).is_err());
        let base = nll_gaussian(&[0.3, 0.1], &[1.0, 2.0], &[0.3, 0.1]).unwrap();
        let wider = nll_gaussian(&[0.3, 0.1], &[3.0, 6.0], &[0.3, 0.1]).unwrap();
        assert!(wider > base);
    }

    #[test]
    fn nll_improves_when_variance_matches_error() {
        let means = [0.0; 4];
        let labels = [2.0, -2.0, 2.0, -2.0];
        let wrong = nll_gaussian(&means, &[0.1; 4], &labels).unwrap();
        let right = nll_gaussian(&means, &[4.0; 4], &labels).unwrap();
        assert!(right < wrong);
    }

    #[test]
    fn sampling_oracle_is_calibrated() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut means = Vec::with_capacity(n);
        let mut vars = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let m: f64 = rng.random_range(-3.0..3.0);
            let v: f64 = rng.random_range(0.1..4.0);
            let z: f64 = StandardNormal.sample(&mut rng);
            means.push(m);
            vars.push(v);
            labels.push(m + v.sqrt() * z);
        }
        let curve = calibration_curve(&means, &vars, &labels, 100).unwrap();
        let dev = curve
            .expected
            .iter()
            .zip(&curve.observed)
            .map(|(p, o)| (p - o).abs())
            .fold(0.0, f64::max);
        assert!(dev < 0.01, "{dev}");
        assert!(miscalibration_area(&curve) < 0.01);
    }

    #[test]
    fn labels_far_above_predictions_give_zero_coverage() {
        let curve = calibration_curve(&[0.0; 10], &[1.0; 10], &[100.0; 10], 100).unwrap();
        assert!(curve.observed.iter().all(|o| *o == 0.0));
    }

    #[test]
    fn area_examples() {
        let perfect = CalibrationCurve {
            expected: vec![0.25, 0.5, 0.75],
            observed: vec![0.25, 0.5, 0.75],
        };
        assert!(miscalibration_area(&perfect).abs() < 1e-15);
        let levels: Vec<f64> = (1..=999).map(|i| i as f64 / 1000.0).collect();
        let zero = CalibrationCurve {
            observed: vec![0.0; levels.len()],
            expected: levels,
        };
        assert!((miscalibration_area(&zero) - 0.5).abs() < 2e-3);
    }

    #[test]
    fn csv_layout() {
        let curve = CalibrationCurve {
            expected: vec![0.5],
            observed: vec![0.25],
        };
        let mut buf = Vec::new();
        write_calibration_csv(&mut buf, &curve).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "p,observed\n0.5,0.25\n");
    }

    proptest! {
        #[test]
        fn curve_monotone_and_area_bounded(
            data in proptest::collection::vec((-5.0f64..5.0, 0.01f64..5.0, -10.0f64..10.0), 1..200),
        ) {
            let means: Vec<f64> = data.iter().map(|d| d.0).collect();
            let vars: Vec<f64> = data.iter().map(|d| d.1).collect();
            let labels: Vec<f64> = data.iter().map(|d| d.2).collect();
            let curve = calibration_curve(&means, &vars, &labels, 100).unwrap();
            for w in curve.observed.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
            prop_assert!(curve.observed.iter().all(|o| (0.0..=1.0).contains(o)));
            let area = miscalibration_area(&curve);
            prop_assert!((0.0..=0.5).contains(&area));
        }

        #[test]
        fn rmse_permutation_invariant(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50)) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let l: Vec<f64> = pairs.iter().map(|x| x.1).collect();
            let pr: Vec<f64> = p.iter().rev().copied().collect();
            let lr: Vec<f64> = l.iter().rev().copied().collect();
            prop_assert!((rmse(&p, &l).unwrap() - rmse(&pr, &lr).unwrap()).abs() < 1e-12);
        }
    }
}
