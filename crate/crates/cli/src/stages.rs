//! One function per subcommand. Every stage reads its inputs from the output
//! directory, so running the stages one by one and running `all` produce the
//! same files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use stcopula::cluster::write_assignment_csv;
use stcopula::copula::model_report;
use stcopula::eval::{holdout_eval, loso_eval, MetricReport};
use stcopula::evd::write_margin_report_csv;
use stcopula::gapfill::impute_with_models;
use stcopula::ingest::{covering_axis, parse_csv, parse_stations_csv, read_matrix_csv, resample, write_matrix_csv};
use stcopula::interpolate::{interpolate_grid, write_stir_table_csv, BBox};
use stcopula::lagdep::write_lag_dependence_csv;
use stcopula::pipeline::{self, FittedModel, LagModel};
use stcopula::synthetic::write_stations_csv;
use stcopula::{ClusterAssignment, ObservationMatrix, Station, TimeAxis};

use crate::config::{PipelineConfig, Protocol};
use crate::error::CliError;

pub const STAGES: [&str; 6] = ["ingest", "cluster", "gapfill", "fit", "interpolate", "evaluate"];

/// The file whose presence marks each stage as done.
fn marker(stage: &str) -> &'static str {
    match stage {
        "ingest" => "axis.json",
        "cluster" => "assignment.json",
        "gapfill" => "imputed.csv",
        "fit" => "model.json",
        "interpolate" => "grid.csv",
        _ => "metrics.csv",
    }
}

/// Stages each stage reads from, in pipeline order.
fn prerequisites(stage: &str) -> &'static [&'static str] {
    match stage {
        "cluster" | "gapfill" => &["ingest"],
        "fit" => &["ingest", "cluster", "gapfill"],
        "interpolate" | "evaluate" => &["ingest", "cluster", "gapfill", "fit"],
        _ => &[],
    }
}

pub struct Workspace {
    pub out: PathBuf,
}

impl Workspace {
    pub fn new(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out)
            .map_err(|e| CliError::config(format!("cannot create output directory {}: {e}", out.display())))?;
        Ok(Self { out: out.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, stage: &str) -> Result<(), CliError> {
        for &before in prerequisites(stage) {
            let file = self.path(marker(before));
            if !file.exists() {
                return Err(CliError::Dependency {
                    stage: before,
                    missing: file.display().to_string(),
                });
            }
        }
        Ok(())
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        let p = self.path(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(BufWriter::new(File::create(&p)?))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T, CliError> {
        let f = File::open(self.path(name))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        let mut w = self.create(name)?;
        w.write_all(text.as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestMeta {
    axis: TimeAxis,
    stations: Vec<Station>,
}

struct Loaded {
    observed: ObservationMatrix,
}

fn open_input(path: &Path, what: &str) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::config(format!("cannot open {what} file {}: {e}", path.display())))
}

pub fn ingest(cfg: &PipelineConfig, ws: &Workspace) -> Result<String, CliError> {
    let stations = parse_stations_csv(open_input(&cfg.data.stations, "stations")?)?;
    let records = parse_csv(open_input(&cfg.data.observations, "observations")?, &cfg.data.schema)?;
    let derived = covering_axis(&records, cfg.granularity).ok_or_else(|| CliError::data("observations file has no records"))?;
    let axis = TimeAxis::new(
        cfg.data.start.unwrap_or(derived.start),
        cfg.granularity,
        cfg.data.buckets.unwrap_or(derived.count),
    );
    let matrix = resample(&records, &stations, &axis)?;
    write_matrix_csv(&matrix, ws.create("observed.csv")?)?;
    write_stations_csv(&stations, ws.create("stations.csv")?)?;
    ws.write_json("axis.json", &IngestMeta { axis, stations })?;
    Ok(format!(
        "{} stations x {} buckets, {} missing cells",
        matrix.n_stations(),
        matrix.n_times(),
        matrix.n_missing()
    ))
}

fn load_ingest(ws: &Workspace) -> Result<(IngestMeta, Loaded), CliError> {
    let meta: IngestMeta = ws.read_json("axis.json")?;
    let observed = read_matrix_csv(File::open(ws.path("observed.csv"))?, &meta.stations, &meta.axis)?;
    Ok((meta, Loaded { observed }))
}

pub fn cluster(cfg: &PipelineConfig, ws: &Workspace) -> Result<String, CliError> {
    ws.require("cluster")?;
    let (meta, data) = load_ingest(ws)?;
    let assignment = pipeline::cluster(&data.observed, &cfg.seeded_model()?);
    write_assignment_csv(&meta.stations, &assignment, ws.create("assignment.csv")?)?;
    ws.write_json("assignment.json", &assignment)?;
    Ok(format!("{} clusters at radius {} m", assignment.n_clusters(), assignment.radius_m))
}

pub fn gapfill(cfg: &PipelineConfig, ws: &Workspace) -> Result<String, CliError> {
    ws.require("gapfill")?;
    let (meta, data) = load_ingest(ws)?;
    let model = cfg.seeded_model()?;
    let (imputed, report, nets) = impute_with_models(&data.observed, &model.gapfill).map_err(pipeline::PipelineError::from)?;
    write_matrix_csv(&imputed, ws.create("imputed.csv")?)?;
    report.write_csv(ws.create("imputation_report.csv")?)?;
    let dir = ws.path("blstm");
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    for (s, net) in meta.stations.iter().zip(&nets) {
        if let Some(net) = net {
            ws.write_text(&format!("blstm/{}.txt", s.id), &net.to_text())?;
        }
    }
    let filled: usize = report.stations.iter().map(|s| s.n_imputed).sum();
    Ok(format!("{filled} cells imputed, {} networks trained", nets.iter().flatten().count()))
}

fn lag_rows(fitted: &FittedModel) -> Vec<(String, &LagModel)> {
    let mut rows = vec![("pooled".to_string(), &fitted.pooled)];
    rows.extend(fitted.clusters.iter().map(|c| (format!("cluster_{}", c.cluster), &c.model)));
    rows
}

pub fn fit(cfg: &PipelineConfig, ws: &Workspace) -> Result<String, CliError> {
    ws.require("fit")?;
    let (meta, _) = load_ingest(ws)?;
    let assignment: ClusterAssignment = ws.read_json("assignment.json")?;
    let imputed = read_matrix_csv(File::open(ws.path("imputed.csv"))?, &meta.stations, &meta.axis)?;
    let fitted = pipeline::fit(&imputed, &assignment, &cfg.seeded_model()?)?;

    let rows = lag_rows(&fitted);
    let deps: Vec<(String, &_)> = rows
        .iter()
        .flat_map(|(l, m)| [(format!("{l}_spatial"), &m.dep_h), (format!("{l}_temporal"), &m.dep_tau)])
        .collect();
    write_lag_dependence_csv(&deps, ws.create("lag_dependence.csv")?)?;
    let margins: Vec<(String, &_)> = rows
        .iter()
        .filter_map(|(l, m)| m.joint.as_ref().map(|j| (l, j)))
        .flat_map(|(l, j)| [(format!("{l}_spatial"), &j.margin_h), (format!("{l}_temporal"), &j.margin_tau)])
        .collect();
    write_margin_report_csv(&margins, ws.create("margins.csv")?)?;
    let mut report = String::new();
    for (label, m) in &rows {
        report.push_str(&format!("[{label}]\n"));
        match &m.joint {
            Some(j) => report.push_str(&model_report(j, m.theta_fit.as_ref())),
            None => report.push_str("copula: none\n"),
        }
        for n in &m.notes {
            report.push_str(&format!("note: {n}\n"));
        }
        report.push('\n');
    }
    ws.write_text("copula.txt", &report)?;
    let tables: Vec<(String, &_)> = rows.iter().map(|(l, m)| (l.clone(), &m.table)).collect();
    write_stir_table_csv(&tables, ws.create("stir_table.csv")?)?;
    ws.write_json("model.json", &fitted)?;
    let own = fitted
        .clusters
        .iter()
        .filter(|c| c.source == pipeline::ModelSource::Cluster)
        .count();
    Ok(format!("{} cluster models ({own} fitted on their own samples)", fitted.clusters.len()))
}

pub fn interpolate(cfg: &PipelineConfig, ws: &Workspace) -> Result<String, CliError> {
    ws.require("interpolate")?;
    let (meta, data) = load_ingest(ws)?;
    let fitted: FittedModel = ws.read_json("model.json")?;
    let bbox = cfg
        .export
        .bbox
        .unwrap_or_else(|| BBox::around(&meta.stations, cfg.export.pad_deg));
    let times: Vec<usize> = match &cfg.export.times {
        Some(t) => t.clone(),
        None => (0..data.observed.n_times()).collect(),
    };
    if let Some(&bad) = times.iter().find(|&&t| t >= data.observed.n_times()) {
        return Err(CliError::config(format!(
            "export.times contains {bad}, but there are only {} buckets",
            data.observed.n_times()
        )));
    }
    let grid = interpolate_grid(
        &data.observed,
        &fitted.assignment,
        &fitted.tables(),
        bbox,
        cfg.export.cell_deg,
        &times,
        cfg.model.interpolate,
    )
    .map_err(pipeline::PipelineError::from)?;
    grid.write_csv(ws.create("grid.csv")?)?;
    let mut w = ws.create("grid.geojson")?;
    serde_json::to_writer(&mut w, &grid.to_geojson())?;
    writeln!(w)?;
    w.flush()?;
    Ok(format!(
        "{} x {} cells over {} buckets ({} mode)",
        grid.n_lat,
        grid.n_lon,
        times.len(),
        cfg.model.interpolate.mode
    ))
}

pub fn evaluate(cfg: &PipelineConfig, ws: &Workspace) -> Result<String, CliError> {
    ws.require("evaluate")?;
    let (meta, data) = load_ingest(ws)?;
    let model = cfg.seeded_model()?;
    let seed = cfg.seed()?;
    let opts = cfg.model.interpolate;
    let mut protocols = cfg.eval.protocols.clone();
    protocols.sort();
    protocols.dedup();
    if protocols.is_empty() {
        return Err(CliError::config("eval.protocols is empty"));
    }

    let ids: Vec<&str> = meta.stations.iter().map(|s| s.id.as_str()).collect();
    let (mut csv, mut text, mut summary) = (Vec::new(), String::new(), Vec::new());
    for p in protocols {
        let report: MetricReport = match p {
            Protocol::Holdout => holdout_eval(&data.observed, &model, cfg.eval.fraction, seed, opts)?,
            Protocol::Loso => loso_eval(&data.observed, &model, opts)?,
        };
        let mut one = Vec::new();
        report.write_csv(&mut one)?;
        let skip = if csv.is_empty() { 0 } else { one.iter().position(|&b| b == b'\n').map_or(0, |i| i + 1) };
        csv.extend_from_slice(&one[skip..]);
        text.push_str(&report.to_text());
        report.write_cells_csv(&ids, ws.create(&format!("predictions_{}.csv", p.label()))?)?;
        summary.push(format!("{} rmse {:.6}", p.label(), report.rmse));
    }
    let mut w = ws.create("metrics.csv")?;
    w.write_all(&csv)?;
    w.flush()?;
    ws.write_text("metrics.txt", &text)?;
    Ok(summary.join(", "))
}

pub fn run_stage(stage: &str, cfg: &PipelineConfig, ws: &Workspace) -> Result<String, CliError> {
    match stage {
        "ingest" => ingest(cfg, ws),
        "cluster" => cluster(cfg, ws),
        "gapfill" => gapfill(cfg, ws),
        "fit" => fit(cfg, ws),
        "interpolate" => interpolate(cfg, ws),
        "evaluate" => evaluate(cfg, ws),
        other => unreachable!("unknown stage {other}"),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    stages: &'a [&'a str],
    seed: u64,
    threads: usize,
    config: &'a PipelineConfig,
}

#[derive(Serialize)]
struct StageTime<'a> {
    stage: &'a str,
    seconds: f64,
}

/// Runs `stages` in order, then writes `manifest.json` (everything needed to
/// repeat the run) and `timing.json` (wall times, kept apart so the manifest
/// stays byte-stable).
pub fn run(command: &str, stages: &[&str], cfg: &PipelineConfig, threads: usize, ws: &Workspace) -> Result<(), CliError> {
    let mut times = Vec::new();
    let total = Instant::now();
    for &stage in stages {
        let start = Instant::now();
        let summary = run_stage(stage, cfg, ws)?;
        times.push(StageTime {
            stage,
            seconds: start.elapsed().as_secs_f64(),
        });
        println!("{stage}: {summary}");
    }
    ws.write_json(
        "manifest.json",
        &Manifest {
            tool: "stcopula",
            version: env!("CARGO_PKG_VERSION"),
            command,
            stages,
            seed: cfg.seed()?,
            threads,
            config: cfg,
        },
    )?;
    ws.write_json(
        "timing.json",
        &serde_json::json!({ "command": command, "stages": times, "total_seconds": total.elapsed().as_secs_f64() }),
    )?;
    Ok(())
}
