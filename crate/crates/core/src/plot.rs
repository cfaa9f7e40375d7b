//! Standalone SVG figures and a column-checked CSV reader for them.

use std::io::Read;

use plotters::prelude::*;
use plotters::style::colors::colormaps::ViridisRGB;

use crate::error::{Error, Result};
use crate::experiment::GridRow;
use crate::metrics::CalibrationCurve;
use crate::smpc::SmpcLogRow;

type BandFn = Box<dyn Fn(&SmpcLogRow) -> Option<f64>>;

const SIZE: (u32, u32) = (800, 500);

/// Numeric CSV columns addressed by header name. Empty cells read as NaN.
#[derive(Debug, Clone)]
pub struct Table {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.headers
            .iter()
            .position(|h| h == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads the numeric columns of a CSV, failing on the first missing
/// `required` header. Non-numeric cells of other columns read as NaN.
pub fn read_table<R: Read>(reader: R, required: &[&str]) -> Result<Table> {
    let mut r = csv::Reader::from_reader(reader);
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if let Some(missing) = required.iter().find(|c| !headers.iter().any(|h| h == *c)) {
        return Err(Error::MissingColumn(missing.to_string()));
    }
    let mut columns = vec![Vec::new(); headers.len()];
    for record in r.records() {
        let record = record?;
        for (col, cell) in columns.iter_mut().zip(record.iter()) {
            col.push(cell.trim().parse().unwrap_or(f64::NAN));
        }
    }
    Ok(Table { headers, columns })
}

fn plot_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::InvalidParameter(format!("plot: {e:?}"))
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9 * hi.abs().max(1.0));
    (lo - pad, hi + pad)
}

fn segments(t: &[f64], y: impl Iterator<Item = Option<f64>>) -> Vec<Vec<(f64, f64)>> {
    let mut out: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
    for (ti, yi) in t.iter().zip(y) {
        match yi.filter(|v| v.is_finite()) {
            Some(v) => out.last_mut().unwrap().push((*ti, v)),
            None if !out.last().unwrap().is_empty() => out.push(Vec::new()),
            None => {}
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

/// Biomass trajectory with the survival band and its tightened version.
pub fn trajectory_svg(rows: &[SmpcLogRow], title: &str) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("trajectory rows"));
    }
    let t: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let (y0, y1) = range(
        rows.iter()
            .flat_map(|r| [Some(r.x), r.lb.filter(|v| *v > 0.5 * r.x), r.ub])
            .flatten(),
    );
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(t[0]..*t.last().unwrap(), y0..y1)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("t [d]")
            .y_desc("X [mg/L]")
            .draw()
            .map_err(plot_err)?;
        let bands: [(BandFn, ShapeStyle); 4] = [
            (Box::new(|r| r.lb), BLACK.stroke_width(1)),
            (Box::new(|r| r.ub), BLACK.stroke_width(1)),
            (Box::new(|r| r.tight_lb), RED.mix(0.6).stroke_width(1)),
            (Box::new(|r| r.tight_ub), RED.mix(0.6).stroke_width(1)),
        ];
        for (get, style) in &bands {
            for seg in segments(&t, rows.iter().map(get)) {
                chart
                    .draw_series(LineSeries::new(seg, *style))
                    .map_err(plot_err)?;
            }
        }
        chart
            .draw_series(LineSeries::new(
                t.iter().zip(rows).map(|(t, r)| (*t, r.x)),
                BLUE.stroke_width(2),
            ))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Predictive standard deviation over the grid for one output channel
/// (0 = X, 1 = S), with the training inputs drawn as black dots.
pub fn heatmap_svg(
    grid: &[GridRow],
    channel: usize,
    points: &[(f64, f64)],
    title: &str,
) -> Result<String> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("heat-map grid"));
    }
    let std = |g: &GridRow| if channel == 0 { g.std_x } else { g.std_s };
    let mut xs: Vec<f64> = grid.iter().map(|g| g.x).collect();
    let mut ss: Vec<f64> = grid.iter().map(|g| g.s).collect();
    for v in [&mut xs, &mut ss] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let half = |v: &[f64]| {
        if v.len() > 1 {
            0.5 * (v[1] - v[0])
        } else {
            0.5
        }
    };
    let (hx, hs) = (half(&xs), half(&ss));
    let (lo, hi) = grid
        .iter()
        .map(std)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(
                xs[0] - hx..xs[xs.len() - 1] + hx,
                ss[0] - hs..ss[ss.len() - 1] + hs,
            )
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_mesh()
            .x_desc("X [mg/L]")
            .y_desc("S [mg/L]")
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(grid.iter().map(|g| {
                let c = ViridisRGB::get_color_normalized(std(g), lo, hi);
                Rectangle::new([(g.x - hx, g.s - hs), (g.x + hx, g.s + hs)], c.filled())
            }))
            .map_err(plot_err)?;
        chart
            .draw_series(points.iter().map(|p| Circle::new(*p, 2, BLACK.filled())))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Observed against expected coverage, with the ideal diagonal.
pub fn calibration_svg(curve: &CalibrationCurve, title: &str) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (500, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..1.0, 0.0..1.0)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("expected")
            .y_desc("observed")
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], BLACK.mix(0.5)))
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(
                curve
                    .expected
                    .iter()
                    .copied()
                    .zip(curve.observed.iter().copied()),
                BLUE.stroke_width(2),
            ))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// GP total time against training size, with the BNN time as a flat line.
pub fn timing_svg(totals: &[(String, usize, f64)], title: &str) -> Result<String> {
    let gp: Vec<(f64, f64)> = totals
        .iter()
        .filter(|t| t.0 == "gp")
        .map(|t| (t.1 as f64, t.2))
        .collect();
    if gp.is_empty() {
        return Err(Error::EmptyInput("gp timings"));
    }
    let bnn = totals.iter().find(|t| t.0 == "bnn").map(|t| t.2);
    let (x0, x1) = range(gp.iter().map(|p| p.0));
    let (_, y1) = range(gp.iter().map(|p| p.1).chain(bnn));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, 0.0..y1)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("GP training points")
            .y_desc("total time [s]")
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(gp.clone(), BLUE.stroke_width(2)))
            .map_err(plot_err)?;
        chart
            .draw_series(gp.iter().map(|p| Circle::new(*p, 3, BLUE.filled())))
            .map_err(plot_err)?;
        if let Some(b) = bnn {
            chart
                .draw_series(LineSeries::new([(x0, b), (x1, b)], RED.stroke_width(2)))
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_rows() -> Vec<SmpcLogRow> {
        (0..40)
            .map(|k| {
                let t = 28.0 + 0.125 * k as f64;
                let band = (t >= 30.0).then(|| crate::smpc::survival_band(t, 1046.28));
                SmpcLogRow {
                    t,
                    x: 1046.0 + (k as f64).sin(),
                    s: 100.0,
                    f: 0.7,
                    lb: band.map(|b| b.0),
                    ub: band.map(|b| b.1),
                    tight_lb: band.map(|b| b.0 + 2.0),
                    tight_ub: band.map(|b| b.1 - 2.0),
                    solve_ms: 1.0,
                    status: "converged".into(),
                    model_kind: "gp".into(),
                }
            })
            .collect()
    }

    #[test]
    fn missing_column_is_named() {
        let err = read_table("p,other\n0.5,1\n".as_bytes(), &["p", "observed"]).unwrap_err();
        assert!(
            matches!(&err, Error::MissingColumn(c) if c == "observed"),
            "{err}"
        );
        let t = read_table(
            "p,observed\n0.5,0.25\n0.6,\n".as_bytes(),
            &["p", "observed"],
        )
        .unwrap();
        assert_eq!(t.column("p").unwrap(), &[0.5, 0.6]);
        assert!(t.column("observed").unwrap()[1].is_nan());
    }

    #[test]
    fn perfect_calibration_overlays_diagonal() {
        let levels: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let curve = CalibrationCurve {
            expected: levels.clone(),
            observed: levels,
        };
        let svg = calibration_svg(&curve, "calibration").unwrap();
        let polylines: Vec<&str> = svg.lines().filter(|l| l.contains("<polyline")).collect();
        let [.., diagonal, series] = polylines.as_slice() else {
            panic!("no series drawn")
        };
        let points = |l: &str| -> Vec<(f64, f64)> {
            let s = l
                .split("points=\"")
                .nth(1)
                .unwrap()
                .split('"')
                .next()
                .unwrap();
            s.split_whitespace()
                .map(|p| {
                    let (a, b) = p.split_once(',').unwrap();
                    (a.parse().unwrap(), b.parse().unwrap())
                })
                .collect()
        };
        let diag = points(diagonal);
        let (p0, p1) = (diag[0], diag[diag.len() - 1]);
        for (x, y) in points(series) {
            let cross = (p1.0 - p0.0) * (y - p0.1) - (p1.1 - p0.1) * (x - p0.0);
            let len = ((p1.0 - p0.0).powi(2) + (p1.1 - p0.1).powi(2)).sqrt();
            assert!((cross / len).abs() <= 1.5, "({x}, {y}) off the diagonal");
        }
    }

    #[test]
    fn heatmap_draws_training_dots() {
        let grid: Vec<GridRow> = (0..4)
            .flat_map(|i| {
                (0..4).map(move |j| GridRow {
                    x: i as f64,
                    s: j as f64,
                    std_x: (i + j) as f64,
                    std_s: 1.0,
                })
            })
            .collect();
        let points = [(0.5, 0.5), (1.5, 2.5), (2.0, 1.0)];
        let svg = heatmap_svg(&grid, 0, &points, "std X").unwrap();
        assert_eq!(svg.matches("<circle").count(), points.len());
        assert!(svg.matches("<rect").count() >= grid.len());
    }

    #[test]
    fn figures_are_deterministic() {
        let rows = log_rows();
        assert_eq!(
            trajectory_svg(&rows, "X").unwrap(),
            trajectory_svg(&rows, "X").unwrap()
        );
        let totals = vec![
            ("gp".to_string(), 25, 1.0),
            ("gp".to_string(), 50, 2.0),
            ("bnn".to_string(), 2240, 1.5),
        ];
        let a = timing_svg(&totals, "timing").unwrap();
        assert_eq!(a, timing_svg(&totals, "timing").unwrap());
        assert!(a.contains("<svg"));
    }
}
