use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hybrid_smpc::bnn::BnnModel;
use hybrid_smpc::config::ExperimentConfig;
use hybrid_smpc::datagen::{read_samples_csv, write_samples_csv, Dataset, Sample};
use hybrid_smpc::experiment::{
    benchmark_timing, closed_loop_episode, crossover_size, generate_data, open_loop,
    read_bnn_residual, read_gp_residual, read_smpc_log, train_bnn_residual, train_gp_residual,
    uncertainty_grid, ControllerKind, GridRow, ModelKind, Residuals, TimingRow, Trained,
    ViolationReport, CHANNELS,
};
use hybrid_smpc::gp::GpModel;
use hybrid_smpc::metrics::{write_calibration_csv, CalibrationCurve};
use hybrid_smpc::plant::write_trajectory_csv;
use hybrid_smpc::plot::{calibration_svg, heatmap_svg, read_table, timing_svg, trajectory_svg};
use hybrid_smpc::residual::LearnedResidual;
use hybrid_smpc::smpc::{write_smpc_log, SmpcLogRow};
use hybrid_smpc::{Error, Result};
use serde::Serialize;

use crate::manifest::{record_wall_time, write_json, RunManifest, StageRecord};

pub const GRID_SIZE: usize = 40;

/// Output directory plus the artifact list of the running stage.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    artifacts: Vec<String>,
    volatile: Vec<String>,
    started: Instant,
}

impl Run {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let out = cfg.out_dir.clone();
        fs::create_dir_all(&out)?;
        Ok(Self {
            cfg,
            out,
            artifacts: Vec::new(),
            volatile: Vec::new(),
            started: Instant::now(),
        })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(p)
    }

    fn create(&mut self, rel: &str) -> Result<BufWriter<File>> {
        let p = self.path(rel)?;
        self.artifacts.push(rel.to_string());
        Ok(BufWriter::new(File::create(p)?))
    }

    fn json<T: Serialize + ?Sized>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel)?;
        self.artifacts.push(rel.to_string());
        write_json(&p, value)
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        self.artifacts.push(rel.to_string());
        fs::write(p, text)?;
        Ok(())
    }

    /// Writes a file whose content depends on wall-clock time.
    fn volatile(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel)?;
        self.volatile.push(rel.to_string());
        Ok(p)
    }

    fn input(&self, rel: &str, produced_by: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if !p.exists() {
            return Err(Error::Config(format!(
                "{} not found; run `{produced_by}` first",
                p.display()
            )));
        }
        Ok(p)
    }

    /// Records the stage in the manifest and its wall-time in the timing file.
    pub fn finish(mut self, stage: &str, seeds: Vec<u64>) -> Result<serde_json::Value> {
        self.text(&format!("config/{stage}.toml"), &self.cfg.to_toml()?)?;
        let mut artifacts = std::mem::take(&mut self.artifacts);
        artifacts.sort();
        artifacts.dedup();
        let mut volatile = std::mem::take(&mut self.volatile);
        volatile.sort();
        volatile.dedup();
        let mut manifest = RunManifest::load(&self.out)?;
        manifest.record(
            stage,
            StageRecord {
                config_hash: self.cfg.hash(),
                seeds,
                artifacts: artifacts.clone(),
                volatile,
            },
        );
        manifest.save(&self.out)?;
        record_wall_time(&self.out, stage, self.started.elapsed().as_secs_f64())?;
        Ok(serde_json::json!({ "stage": stage, "out": self.out, "artifacts": artifacts.len() }))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let samples = read_samples_csv(File::open(
            self.input("data/samples.csv", "generate-data")?,
        )?)?;
        Dataset::from_samples(
            &samples,
            self.cfg.data.split_ratio,
            self.cfg.data.split_seed,
        )
    }

    pub fn load_gp(&self) -> Result<LearnedResidual<GpModel>> {
        read_gp_residual(File::open(
            self.input("models/gp.json", "train --kind gp")?,
        )?)
    }

    pub fn load_bnn(&self) -> Result<LearnedResidual<BnnModel>> {
        read_bnn_residual(File::open(
            self.input("models/bnn.json", "train --kind bnn")?,
        )?)
    }

    fn has(&self, rel: &str) -> bool {
        self.out.join(rel).exists()
    }
}

pub fn generate_data_cmd(mut run: Run) -> Result<serde_json::Value> {
    let data = generate_data(&run.cfg)?;
    // write into a scratch directory so a failure leaves no partial dataset
    let tmp = run.out.join("data.partial");
    let _ = fs::remove_dir_all(&tmp);
    fs::create_dir_all(&tmp)?;
    let written = (|| -> Result<()> {
        write_samples_csv(
            BufWriter::new(File::create(tmp.join("samples.csv"))?),
            &data.samples,
        )?;
        write_samples_csv(
            BufWriter::new(File::create(tmp.join("train.csv"))?),
            &data.dataset.train,
        )?;
        write_samples_csv(
            BufWriter::new(File::create(tmp.join("test.csv"))?),
            &data.dataset.test,
        )?;
        let scaler =
            serde_json::json!({ "features": data.dataset.features, "labels": data.dataset.labels });
        write_json(&tmp.join("scaler.json"), &scaler)?;
        write_json(&tmp.join("episodes.json"), &data.episodes)?;
        let target = run.out.join("data");
        let _ = fs::remove_dir_all(&target);
        fs::rename(&tmp, &target)?;
        Ok(())
    })();
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    for f in [
        "samples.csv",
        "train.csv",
        "test.csv",
        "scaler.json",
        "episodes.json",
    ] {
        run.artifacts.push(format!("data/{f}"));
    }
    let seeds = data.episodes.iter().map(|e| e.seed).collect();
    let summary = serde_json::json!({
        "samples": data.samples.len(),
        "train": data.dataset.train.len(),
        "test": data.dataset.test.len(),
    });
    let mut out = run.finish("generate-data", seeds)?;
    out["data"] = summary;
    Ok(out)
}

fn write_training<R: Serialize>(
    run: &mut Run,
    kind: ModelKind,
    trained: &Trained<R>,
    ds: &Dataset,
) -> Result<()>
where
    LearnedResidual<R>: hybrid_smpc::residual::ResidualPredictor,
{
    run.json(&format!("models/{kind}.json"), &trained.residual)?;
    run.json(&format!("metrics/{kind}_metrics.json"), &trained.report)?;
    for (c, curve) in trained.curves.iter().enumerate() {
        write_calibration_csv(
            run.create(&format!("metrics/{kind}_calibration_{}.csv", CHANNELS[c]))?,
            curve,
        )?;
    }
    let grid = uncertainty_grid(&trained.residual, &ds.train, GRID_SIZE);
    let mut w = csv::Writer::from_writer(run.create(&format!("metrics/{kind}_grid.csv"))?);
    for row in &grid {
        w.serialize(row)?;
    }
    w.flush()?;
    write_samples_csv(
        run.create(&format!("metrics/{kind}_points.csv"))?,
        &trained.points,
    )?;
    Ok(())
}

pub fn train_cmd(mut run: Run, kind: ModelKind) -> Result<serde_json::Value> {
    let ds = run.load_dataset()?;
    let metrics = match kind {
        ModelKind::Gp => {
            let trained =
                train_gp_residual(&run.cfg, &ds).map_err(|e| stage_error("gp training", e))?;
            write_training(&mut run, kind, &trained, &ds)?;
            serde_json::to_value(&trained.report)?
        }
        ModelKind::Bnn => {
            let trained =
                train_bnn_residual(&run.cfg, &ds).map_err(|e| stage_error("bnn training", e))?;
            write_training(&mut run, kind, &trained, &ds)?;
            serde_json::to_value(&trained.report)?
        }
    };
    let seed = match kind {
        ModelKind::Gp => run.cfg.gp.training.seed,
        ModelKind::Bnn => run.cfg.bnn.seed,
    };
    let mut out = run.finish(&format!("train-{kind}"), vec![seed])?;
    out["report"] = metrics;
    Ok(out)
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::TrainingDiverged(msg) => Error::TrainingDiverged(format!("{stage}: {msg}")),
        other => other,
    }
}

pub fn open_loop_cmd(mut run: Run, models: &[ModelKind]) -> Result<serde_json::Value> {
    let wanted: Vec<ModelKind> = if models.is_empty() {
        [ModelKind::Gp, ModelKind::Bnn]
            .into_iter()
            .filter(|k| run.has(&format!("models/{k}.json")))
            .collect()
    } else {
        models.to_vec()
    };
    let gp = wanted
        .contains(&ModelKind::Gp)
        .then(|| run.load_gp())
        .transpose()?;
    let bnn = wanted
        .contains(&ModelKind::Bnn)
        .then(|| run.load_bnn())
        .transpose()?;
    let result = open_loop(&run.cfg, gp.as_ref(), bnn.as_ref())?;
    for (name, rows) in &result.traces {
        write_trajectory_csv(run.create(&format!("open_loop/{name}.csv"))?, rows)?;
    }
    run.json("open_loop/summary.json", &result.summary)?;
    let summary = serde_json::to_value(&result.summary)?;
    let mut out = run.finish("open-loop", Vec::new())?;
    out["summary"] = summary;
    Ok(out)
}

#[derive(Serialize)]
struct SolveTiming {
    steps: usize,
    mean_ms: f64,
    max_ms: f64,
}

pub fn closed_loop_cmd(
    mut run: Run,
    kind: ControllerKind,
    seeds: Vec<u64>,
) -> Result<serde_json::Value> {
    let gp = (kind.needs() == Some(ModelKind::Gp))
        .then(|| run.load_gp())
        .transpose()?;
    let bnn = (kind.needs() == Some(ModelKind::Bnn))
        .then(|| run.load_bnn())
        .transpose()?;
    let residuals = Residuals {
        gp: gp.as_ref(),
        bnn: bnn.as_ref(),
    };
    let cl = run.cfg.closed_loop.clone();
    let mut logs: Vec<(u64, Vec<SmpcLogRow>)> = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let rows = closed_loop_episode(&run.cfg, kind, residuals, seed, 0.0, cl.t_sim, cl.x0)?;
        write_smpc_log(
            run.create(&format!("closed_loop/{kind}/seed_{seed}.csv"))?,
            &rows,
        )?;
        logs.push((seed, rows));
    }
    let report = ViolationReport::from_logs(kind, &logs);
    run.json(&format!("closed_loop/{kind}/violations.json"), &report)?;
    let times: Vec<f64> = logs
        .iter()
        .flat_map(|(_, rows)| rows.iter().map(|r| r.solve_ms))
        .collect();
    let timing = SolveTiming {
        steps: times.len(),
        mean_ms: times.iter().sum::<f64>() / times.len().max(1) as f64,
        max_ms: times.iter().copied().fold(0.0, f64::max),
    };
    write_json(
        &run.volatile(&format!("closed_loop/{kind}/solve_times.json"))?,
        &timing,
    )?;
    let total = serde_json::to_value(&report.total)?;
    let rate = report.total.rate();
    let mut out = run.finish(&format!("closed-loop-{kind}"), seeds)?;
    out["violations"] = total;
    out["violation_rate"] = rate.into();
    Ok(out)
}

pub fn benchmark_cmd(mut run: Run) -> Result<serde_json::Value> {
    let ds = run.load_dataset()?;
    let bnn = if run.has("models/bnn.json") {
        run.load_bnn()?
    } else {
        train_bnn_residual(&run.cfg, &ds)?.residual
    };
    let result = benchmark_timing(&run.cfg, &ds, &bnn)?;
    let mut w = csv::Writer::from_writer(run.create("benchmark/runs.csv")?);
    for row in &result.runs {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(
        run.volatile("benchmark/timings.csv")?,
    )?));
    for row in &result.timings {
        w.serialize(row)?;
    }
    w.flush()?;
    let totals = result.median_totals();
    let summary = serde_json::json!({
        "median_total_s": totals.iter().map(|t| serde_json::json!({ "model": t.0, "train_size": t.1, "total_s": t.2 })).collect::<Vec<_>>(),
        "crossover_size": crossover_size(&totals),
    });
    write_json(&run.volatile("benchmark/summary.json")?, &summary)?;
    fs::write(
        run.volatile("benchmark/timing.svg")?,
        timing_svg(&totals, "SMPC computation time")?,
    )?;
    let seed = run.cfg.benchmark.seed;
    let mut out = run.finish("benchmark-timing", vec![seed])?;
    out["summary"] = summary;
    Ok(out)
}

fn read_curve(path: &Path) -> Result<CalibrationCurve> {
    let t = read_table(File::open(path)?, &["p", "observed"])?;
    Ok(CalibrationCurve {
        expected: t.column("p")?.to_vec(),
        observed: t.column("observed")?.to_vec(),
    })
}

fn read_grid(path: &Path) -> Result<Vec<GridRow>> {
    read_table(File::open(path)?, &["X", "S", "std_X", "std_S"])?;
    let mut r = csv::Reader::from_reader(File::open(path)?);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let samples: Vec<Sample> = read_samples_csv(File::open(path)?)?;
    Ok(samples.iter().map(|s| (s.x, s.s)).collect())
}

fn read_timings(path: &Path) -> Result<Vec<(String, usize, f64)>> {
    read_table(
        File::open(path)?,
        &["model", "train_size", "repeat", "total_s"],
    )?;
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let rows: Vec<TimingRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    let mut keys: Vec<(String, usize)> = Vec::new();
    for row in &rows {
        if !keys
            .iter()
            .any(|k| k.0 == row.model && k.1 == row.train_size)
        {
            keys.push((row.model.clone(), row.train_size));
        }
    }
    let totals = keys
        .into_iter()
        .map(|(model, size)| {
            let mut t: Vec<f64> = rows
                .iter()
                .filter(|r| r.model == model && r.train_size == size)
                .map(|r| r.total_s)
                .collect();
            t.sort_by(f64::total_cmp);
            let median = t[t.len() / 2];
            (model, size, median)
        })
        .collect();
    Ok(totals)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Renders every figure whose input CSVs exist in the output directory, or
/// only the given inputs.
pub fn plot_cmd(mut run: Run, inputs: &[PathBuf]) -> Result<serde_json::Value> {
    let mut jobs: Vec<(PathBuf, String)> = Vec::new();
    if inputs.is_empty() {
        for kind in [ModelKind::Gp, ModelKind::Bnn] {
            for ch in CHANNELS {
                let cal = run.out.join(format!("metrics/{kind}_calibration_{ch}.csv"));
                if cal.exists() {
                    jobs.push((cal, format!("plots/{kind}_calibration_{ch}.svg")));
                }
            }
            let grid = run.out.join(format!("metrics/{kind}_grid.csv"));
            if grid.exists() {
                jobs.push((grid, format!("plots/{kind}_heatmap.svg")));
            }
        }
        let cl = run.out.join("closed_loop");
        if cl.is_dir() {
            for dir in sorted_entries(&cl)?.into_iter().filter(|p| p.is_dir()) {
                let name = dir
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .to_string();
                for f in sorted_entries(&dir)? {
                    let stem = f
                        .file_stem()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .to_string();
                    if stem.starts_with("seed_") && f.extension().is_some_and(|e| e == "csv") {
                        jobs.push((f, format!("plots/closed_loop_{name}_{stem}.svg")));
                    }
                }
            }
        }
        let timings = run.out.join("benchmark/timings.csv");
        if timings.exists() {
            jobs.push((timings, "plots/timing.svg".into()));
        }
    } else {
        for p in inputs {
            let stem = p
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .to_string();
            jobs.push((p.clone(), format!("plots/{stem}.svg")));
        }
    }
    if jobs.is_empty() {
        return Err(Error::Config(format!(
            "no plottable CSVs under {}",
            run.out.display()
        )));
    }
    let mut written = Vec::new();
    for (input, target) in jobs {
        let name = input
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .to_string();
        let headers: Vec<String> = csv::Reader::from_reader(File::open(&input)?)
            .headers()?
            .iter()
            .map(str::to_string)
            .collect();
        let has = |c: &str| headers.iter().any(|h| h == c);
        let svg = if has("observed") || name.contains("calibration") {
            calibration_svg(&read_curve(&input)?, &name)?
        } else if has("std_X") || name.contains("grid") {
            let grid = read_grid(&input)?;
            let points_path = input.with_file_name(name.replace("grid", "points"));
            let points = if points_path.exists() {
                read_points(&points_path)?
            } else {
                Vec::new()
            };
            let x = heatmap_svg(&grid, 0, &points, &format!("{name}: std X"))?;
            let s = heatmap_svg(&grid, 1, &points, &format!("{name}: std S"))?;
            run.text(&target.replace(".svg", "_S.svg"), &s)?;
            written.push(target.replace(".svg", "_S.svg"));
            let target = target.replace(".svg", "_X.svg");
            run.text(&target, &x)?;
            written.push(target);
            continue;
        } else if has("total_s") || name.contains("timings") {
            let svg = timing_svg(&read_timings(&input)?, "SMPC computation time")?;
            fs::write(run.volatile(&target)?, svg)?;
            written.push(target);
            continue;
        } else {
            trajectory_svg(&read_smpc_log(File::open(&input)?)?, &name)?
        };
        run.text(&target, &svg)?;
        written.push(target);
    }
    let mut out = run.finish("plot", Vec::new())?;
    out["plots"] = serde_json::to_value(&written)?;
    Ok(out)
}
