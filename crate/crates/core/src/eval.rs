//! Accuracy metrics and the two validation protocols: random cell holdout and
//! leave-one-station-out.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fmt6;
use crate::interpolate::InterpOptions;
use crate::model::ObservationMatrix;
use crate::pipeline::{self, ModelConfig, PipelineError};
use crate::synthetic::mask_fraction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("prediction and truth lengths differ ({pred} vs {truth})")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("nothing to score")]
    Empty,
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Pipeline(p) => p,
            EvalError::Precondition(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

fn check(pred: &[f64], truth: &[f64]) -> Result<(), EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    check(pred, truth)?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, EvalError> {
    check(pred, truth)?;
    let sae: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sae / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetric {
    pub cluster: usize,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

/// One scored cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub station: usize,
    pub time: usize,
    pub cluster: usize,
    pub truth: f64,
    pub pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
    pub per_cluster: Vec<ClusterMetric>,
    pub cells: Vec<Scored>,
}

impl MetricReport {
    pub fn from_cells(protocol: &str, cells: Vec<Scored>) -> Result<Self, EvalError> {
        let (pred, truth): (Vec<f64>, Vec<f64>) = cells.iter().map(|c| (c.pred, c.truth)).unzip();
        let mut groups: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for c in &cells {
            let g = groups.entry(c.cluster).or_default();
            g.0.push(c.pred);
            g.1.push(c.truth);
        }
        let per_cluster = groups
            .into_iter()
            .map(|(cluster, (p, t))| {
                Ok(ClusterMetric {
                    cluster,
                    rmse: rmse(&p, &t)?,
                    mae: mae(&p, &t)?,
                    n: p.len(),
                })
            })
            .collect::<Result<_, EvalError>>()?;
        Ok(Self {
            protocol: protocol.to_string(),
            rmse: rmse(&pred, &truth)?,
            mae: mae(&pred, &truth)?,
            n: cells.len(),
            per_cluster,
            cells,
        })
    }

    /// Rows `scope,rmse,mae,n`: the total first, then each cluster.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["protocol", "scope", "rmse", "mae", "n"])?;
        w.write_record([self.protocol.as_str(), "all", &fmt6(self.rmse), &fmt6(self.mae), &self.n.to_string()])?;
        for c in &self.per_cluster {
            w.write_record([
                self.protocol.as_str(),
                &format!("cluster_{}", c.cluster),
                &fmt6(c.rmse),
                &fmt6(c.mae),
                &c.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_cells_csv<W: Write>(&self, station_ids: &[&str], writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["station_id", "time_index", "cluster", "truth", "pred"])?;
        for c in &self.cells {
            w.write_record([
                station_ids.get(c.station).copied().unwrap_or(""),
                &c.time.to_string(),
                &c.cluster.to_string(),
                &fmt6(c.truth),
                &fmt6(c.pred),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{}: rmse {} mae {} over {} cells\n",
            self.protocol,
            fmt6(self.rmse),
            fmt6(self.mae),
            self.n
        );
        for c in &self.per_cluster {
            s.push_str(&format!("  cluster {}: rmse {} mae {} n {}\n", c.cluster, fmt6(c.rmse), fmt6(c.mae), c.n));
        }
        s
    }
}

/// Masks a seeded fraction of observed cells, runs the whole pipeline on what
/// is left and scores the interpolated value at each masked cell.
pub fn holdout_eval(
    matrix: &ObservationMatrix,
    cfg: &ModelConfig,
    fraction: f64,
    seed: u64,
    opts: InterpOptions,
) -> Result<MetricReport, EvalError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EvalError::Precondition(format!("holdout fraction {fraction} is outside (0, 1)")));
    }
    let (masked, cells) = mask_fraction(matrix, fraction, seed);
    if cells.is_empty() {
        return Err(EvalError::Empty);
    }
    let run = pipeline::run(&masked, cfg)?;
    let stations = matrix.stations();
    let scored = cells
        .iter()
        .map(|&(i, j)| {
            let s = &stations[i];
            let p = pipeline::predict(&run.fitted, &masked, (s.lat, s.lon), j, opts)?;
            Ok(Scored {
                station: i,
                time: j,
                cluster: run.assignment.labels[i],
                truth: matrix.get(i, j).expect("masked cells were observed"),
                pred: p.value,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    MetricReport::from_cells("holdout", scored)
}

/// Drops each station in turn, fits on the others and predicts every observed
/// cell of the dropped station. Clusters are labelled by the full-network
/// clustering.
pub fn loso_eval(matrix: &ObservationMatrix, cfg: &ModelConfig, opts: InterpOptions) -> Result<MetricReport, EvalError> {
    let n = matrix.n_stations();
    if n < 3 {
        return Err(EvalError::Precondition(format!(
            "leave-one-station-out needs at least 3 stations, got {n}"
        )));
    }
    cfg.validate()?;
    let labels = pipeline::cluster(matrix, cfg).labels;
    let folds = (0..n)
        .into_par_iter()
        .map(|i| {
            let rest = matrix.without_station(i);
            let run = pipeline::run(&rest, cfg)?;
            let s = &matrix.stations()[i];
            (0..matrix.n_times())
                .filter_map(|j| matrix.get(i, j).map(|truth| (j, truth)))
                .map(|(j, truth)| {
                    let p = pipeline::predict(&run.fitted, &rest, (s.lat, s.lon), j, opts)?;
                    Ok(Scored {
                        station: i,
                        time: j,
                        cluster: labels[i],
                        truth,
                        pred: p.value,
                    })
                })
                .collect::<Result<Vec<_>, EvalError>>()
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    MetricReport::from_cells("loso", folds.into_iter().flatten().collect())
}
