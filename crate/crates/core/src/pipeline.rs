//! Stage chaining: cluster, impute, fit the per-cluster joint models and
//! build their lag tables, then predict.
//!
//! A cluster whose own fit fails (single station, too few bins for model
//! selection, degenerate margins) borrows the pooled model fitted on every
//! multi-station cluster. When the pooled margins also fail, the table falls
//! back to constraint corners, which needs no density at all.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{hsc_with, Linkage, DEFAULT_RADIUS_M};
use crate::copula::{fit_theta, CopulaError, GhParam, JointModel, ThetaFit};
use crate::evd::{select_model, EvdError, FamilySelector, FittedMargin};
use crate::gapfill::{impute_with_models, BlstmModel, GapfillError, ImputationReport, TrainConfig};
use crate::interpolate::{
    build_corner_table, build_stir_table, interpolate_point, InterpError, InterpOptions, Interpolated, LagGrid,
    StirTable, DEFAULT_H_STEPS, DEFAULT_QUANTILES,
};
use crate::lagdep::{
    freedman_diaconis_width, lag_dependence, sir_samples_with, tir_samples_with, LagDependence, LagError,
    LagRatioSample, Orientation, DEFAULT_MAX_LAG,
};
use crate::model::{ClusterAssignment, ObservationMatrix};

/// Error categories, each with its own process exit code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("ConfigError: {0}")]
    Config(String),
    #[error("DataError: {0}")]
    Data(String),
    #[error("NumericError: {0}")]
    Numeric(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numeric(_) => 4,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "ConfigError",
            PipelineError::Data(_) => "DataError",
            PipelineError::Numeric(_) => "NumericError",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            PipelineError::Config(m) | PipelineError::Data(m) | PipelineError::Numeric(m) => m,
        }
    }
}

impl From<GapfillError> for PipelineError {
    fn from(e: GapfillError) -> Self {
        match e {
            GapfillError::InvalidConfig(_) => PipelineError::Config(e.to_string()),
            GapfillError::Parse(_) => PipelineError::Data(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<InterpError> for PipelineError {
    fn from(e: InterpError) -> Self {
        match e {
            InterpError::UnknownMode(_) => PipelineError::Config(e.to_string()),
            InterpError::NoDonor => PipelineError::Data(e.to_string()),
            _ => PipelineError::Numeric(e.to_string()),
        }
    }
}

impl From<LagError> for PipelineError {
    fn from(e: LagError) -> Self {
        match e {
            LagError::ZeroMaxLag => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<EvdError> for PipelineError {
    fn from(e: EvdError) -> Self {
        match e {
            EvdError::NoCandidates | EvdError::UnknownFamily(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Numeric(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub radius_m: f64,
    pub linkage: Linkage,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            radius_m: DEFAULT_RADIUS_M,
            linkage: Linkage::Complete,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LagConfig {
    pub max_lag: usize,
    /// Fixed ratio-bin width; Freedman–Diaconis when absent.
    pub bin_width: Option<f64>,
    pub orientation: Orientation,
}

impl Default for LagConfig {
    fn default() -> Self {
        Self {
            max_lag: DEFAULT_MAX_LAG,
            bin_width: None,
            orientation: Orientation::IndexOrder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvdConfig {
    pub candidates: Vec<FamilySelector>,
}

impl Default for EvdConfig {
    fn default() -> Self {
        Self {
            candidates: FamilySelector::defaults(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub h_steps: usize,
    pub lower_quantile: f64,
    pub upper_quantile: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            h_steps: DEFAULT_H_STEPS,
            lower_quantile: DEFAULT_QUANTILES.0,
            upper_quantile: DEFAULT_QUANTILES.1,
        }
    }
}

/// Everything the model stages need, independent of file locations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub cluster: ClusterConfig,
    pub gapfill: TrainConfig,
    pub lagdep: LagConfig,
    pub evd: EvdConfig,
    pub grid: GridConfig,
    pub interpolate: InterpOptions,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.cluster.radius_m > 0.0) {
            return bad(format!("cluster radius must be positive, got {}", self.cluster.radius_m));
        }
        self.gapfill.validate()?;
        if self.lagdep.max_lag == 0 {
            return bad("lagdep.max_lag must be at least 1".into());
        }
        if let Some(w) = self.lagdep.bin_width {
            if !(w > 0.0 && w.is_finite()) {
                return bad(format!("lagdep.bin_width must be positive, got {w}"));
            }
        }
        if self.evd.candidates.is_empty() {
            return bad("evd.candidates is empty".into());
        }
        let g = &self.grid;
        if g.h_steps == 0 || !(0.0 < g.lower_quantile && g.lower_quantile < g.upper_quantile && g.upper_quantile < 1.0) {
            return bad("grid needs h_steps >= 1 and 0 < lower_quantile < upper_quantile < 1".into());
        }
        if self.interpolate.k_donors == 0 {
            return bad("interpolate.k_donors must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Fitted on the cluster's own samples.
    Cluster,
    /// Borrowed from the pooled fit over all multi-station clusters.
    Pooled,
}

/// Lag statistics, copula model and lag table used by one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagModel {
    pub dep_h: LagDependence,
    pub dep_tau: LagDependence,
    pub joint: Option<JointModel>,
    pub theta_fit: Option<ThetaFit>,
    pub grid: LagGrid,
    pub table: StirTable,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub cluster: usize,
    pub source: ModelSource,
    pub model: LagModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub assignment: ClusterAssignment,
    pub pooled: LagModel,
    pub clusters: Vec<ClusterModel>,
}

impl FittedModel {
    pub fn tables(&self) -> Vec<StirTable> {
        self.clusters.iter().map(|c| c.model.table.clone()).collect()
    }
}

fn bin_width(samples: &[LagRatioSample], cfg: &LagConfig) -> f64 {
    cfg.bin_width.unwrap_or_else(|| freedman_diaconis_width(samples))
}

fn tir_for(matrix: &ObservationMatrix, stations: &[usize], cfg: &LagConfig) -> Result<Vec<LagRatioSample>, LagError> {
    let mut out = Vec::new();
    for &i in stations {
        out.extend(tir_samples_with(matrix, i, cfg.max_lag, cfg.orientation)?);
    }
    Ok(out)
}

/// Fits margins, θ and the density table; `Err` carries why that failed.
fn fit_density(
    dep_h: &LagDependence,
    dep_tau: &LagDependence,
    cfg: &ModelConfig,
    notes: &mut Vec<String>,
) -> Result<(JointModel, Option<ThetaFit>, LagGrid, StirTable), String> {
    let sld = dep_h.max_lags();
    let tld = dep_tau.max_lags();
    let margin = |xs: &[f64], label: &str| -> Result<FittedMargin, String> {
        select_model(xs, &cfg.evd.candidates)
            .map(|s| s.best)
            .map_err(|e| format!("{label} margin: {e}"))
    };
    let margin_h = margin(&sld, "spatial")?;
    let margin_tau = margin(&tld, "temporal")?;

    // Bins are paired by rank of their ratio; the longer list is truncated.
    let pairs: Vec<(f64, f64)> = sld.iter().copied().zip(tld.iter().copied()).collect();
    let (copula, theta_fit) = match fit_theta(&pairs) {
        Ok(f) => {
            if let Some(w) = f.warning {
                notes.push(format!("theta: {w:?}"));
            }
            (f.param, Some(f))
        }
        Err(e @ (CopulaError::InsufficientPairs(_) | CopulaError::AllTies)) => {
            notes.push(format!("theta set to 1: {e}"));
            (GhParam::independence(), None)
        }
        Err(e) => return Err(e.to_string()),
    };
    let joint = JointModel {
        copula,
        margin_h,
        margin_tau,
    };
    let g = &cfg.grid;
    let grid = LagGrid::from_model(&joint, g.h_steps, (g.lower_quantile, g.upper_quantile), cfg.lagdep.max_lag)
        .map_err(|e| e.to_string())?;
    let table = build_stir_table(&joint, dep_h, dep_tau, &grid).map_err(|e| e.to_string())?;
    Ok((joint, theta_fit, grid, table))
}

fn corner_model(dep_h: LagDependence, dep_tau: LagDependence, cfg: &ModelConfig, mut notes: Vec<String>) -> Result<LagModel, PipelineError> {
    let sld = dep_h.max_lags();
    let lo = sld.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = sld.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(lo);
    let grid = LagGrid::spanning(lo, hi, cfg.grid.h_steps, cfg.lagdep.max_lag)?;
    let table = build_corner_table(&dep_h, &dep_tau, &grid)?;
    notes.push("constraint-corner table".into());
    Ok(LagModel {
        dep_h,
        dep_tau,
        joint: None,
        theta_fit: None,
        grid,
        table,
        notes,
    })
}

fn lag_model(sir: &[LagRatioSample], tir: &[LagRatioSample], cfg: &ModelConfig) -> Result<Result<LagModel, (LagDependence, LagDependence, Vec<String>)>, PipelineError> {
    let dep_h = lag_dependence(sir, bin_width(sir, &cfg.lagdep))?;
    let dep_tau = lag_dependence(tir, bin_width(tir, &cfg.lagdep))?;
    let mut notes = Vec::new();
    Ok(match fit_density(&dep_h, &dep_tau, cfg, &mut notes) {
        Ok((joint, theta_fit, grid, table)) => Ok(LagModel {
            dep_h,
            dep_tau,
            joint: Some(joint),
            theta_fit,
            grid,
            table,
            notes,
        }),
        Err(why) => {
            notes.push(why);
            Err((dep_h, dep_tau, notes))
        }
    })
}

/// Fits every cluster's lag model on a fully observed matrix.
pub fn fit(imputed: &ObservationMatrix, assignment: &ClusterAssignment, cfg: &ModelConfig) -> Result<FittedModel, PipelineError> {
    cfg.validate()?;
    if !imputed.is_fully_observed() {
        return Err(PipelineError::Data("fit needs a fully observed matrix".into()));
    }
    let lc = &cfg.lagdep;
    let clusters: Vec<usize> = (0..assignment.n_clusters()).collect();
    let per_cluster_samples: Vec<(Option<Vec<LagRatioSample>>, Vec<LagRatioSample>)> = clusters
        .par_iter()
        .map(|&c| {
            let sir = match sir_samples_with(imputed, assignment, c, lc.orientation) {
                Ok(s) => Some(s),
                Err(LagError::DegenerateCluster(_)) => None,
                Err(e) => return Err(PipelineError::from(e)),
            };
            Ok((sir, tir_for(imputed, &assignment.members(c), lc)?))
        })
        .collect::<Result<_, _>>()?;

    let mut pooled_sir: Vec<LagRatioSample> = per_cluster_samples.iter().filter_map(|(s, _)| s.clone()).flatten().collect();
    if pooled_sir.is_empty() && imputed.n_stations() >= 2 {
        // Only singleton clusters: pool every station pair instead.
        let all = ClusterAssignment {
            labels: vec![0; imputed.n_stations()],
            radius_m: f64::INFINITY,
            representatives: vec![0],
        };
        pooled_sir = sir_samples_with(imputed, &all, 0, lc.orientation)?;
    }
    if pooled_sir.is_empty() {
        pooled_sir.push(LagRatioSample { ratio: 1.0, lag: 0.0 });
    }
    let pooled_tir = tir_for(imputed, &(0..imputed.n_stations()).collect::<Vec<_>>(), lc)?;
    let pooled = match lag_model(&pooled_sir, &pooled_tir, cfg)? {
        Ok(m) => m,
        Err((dh, dt, notes)) => corner_model(dh, dt, cfg, notes)?,
    };

    let models: Vec<ClusterModel> = per_cluster_samples
        .into_par_iter()
        .enumerate()
        .map(|(c, (sir, tir))| {
            let borrowed = |note: String| {
                let mut model = pooled.clone();
                model.notes.insert(0, note);
                ClusterModel {
                    cluster: c,
                    source: ModelSource::Pooled,
                    model,
                }
            };
            let Some(sir) = sir else {
                return Ok(borrowed("single-station cluster".into()));
            };
            Ok(match lag_model(&sir, &tir, cfg)? {
                Ok(model) => ClusterModel {
                    cluster: c,
                    source: ModelSource::Cluster,
                    model,
                },
                Err((_, _, notes)) => borrowed(notes.join("; ")),
            })
        })
        .collect::<Result<_, PipelineError>>()?;

    Ok(FittedModel {
        assignment: assignment.clone(),
        pooled,
        clusters: models,
    })
}

/// Output of every stage for one matrix.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub assignment: ClusterAssignment,
    pub imputed: ObservationMatrix,
    pub imputation: ImputationReport,
    pub blstm: Vec<Option<BlstmModel>>,
    pub fitted: FittedModel,
}

pub fn cluster(matrix: &ObservationMatrix, cfg: &ModelConfig) -> ClusterAssignment {
    hsc_with(matrix.stations(), cfg.cluster.radius_m, cfg.cluster.linkage)
}

/// Cluster, impute and fit.
pub fn run(observed: &ObservationMatrix, cfg: &ModelConfig) -> Result<PipelineRun, PipelineError> {
    cfg.validate()?;
    let assignment = cluster(observed, cfg);
    let (imputed, imputation, blstm) = impute_with_models(observed, &cfg.gapfill)?;
    let fitted = fit(&imputed, &assignment, cfg)?;
    Ok(PipelineRun {
        assignment,
        imputed,
        imputation,
        blstm,
        fitted,
    })
}

/// Interpolated value at `(lat, lon, t)` using donors from `observed`.
pub fn predict(
    fitted: &FittedModel,
    observed: &ObservationMatrix,
    s0: (f64, f64),
    t0: usize,
    opts: InterpOptions,
) -> Result<Interpolated, PipelineError> {
    Ok(interpolate_point(observed, &fitted.assignment, &fitted.tables(), s0, t0, opts)?)
}
