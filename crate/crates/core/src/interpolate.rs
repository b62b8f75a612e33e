//! Most-likely-lag search, the lag-to-ratio map and donor-based interpolation.
//!
//! For a ratio pair `(r_h, r_tau)` the feasible lags are `h ≤ SLD(r_h)` and
//! `τ ≤ TLD(r_tau)`; the table row for that pair holds the feasible grid point
//! of highest joint density. Interpolating at `(s0, t0)` picks the closest
//! observed donor, maps its lag back to ratios through the table and scales
//! the donor value by the norm of the ratio pair.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::haversine;
use crate::copula::JointModel;
use crate::fmt6;
use crate::gapfill::VALUE_FLOOR;
use crate::lagdep::LagDependence;
use crate::model::{ClusterAssignment, ObservationMatrix, Station};

pub const DEFAULT_H_STEPS: usize = 200;
pub const DEFAULT_QUANTILES: (f64, f64) = (0.001, 0.999);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpError {
    #[error("no grid point satisfies h <= {h_max} and tau <= {tau_max}")]
    EmptyFeasibleRegion { h_max: f64, tau_max: f64 },
    #[error("every ratio pair was infeasible ({omitted} rows)")]
    EmptyTable { omitted: usize },
    #[error("no observed donor in the query's cluster")]
    NoDonor,
    #[error("invalid lag grid: {0}")]
    InvalidGrid(String),
    #[error("unknown interpolation mode {0:?}")]
    UnknownMode(String),
}

/// Search domain of the argmax: spatial lags in meters, temporal lags in buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagGrid {
    h: Vec<f64>,
    tau: Vec<f64>,
}

fn strictly_ascending(v: &[f64]) -> bool {
    !v.is_empty() && v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

impl LagGrid {
    pub fn new(h: Vec<f64>, tau: Vec<f64>) -> Result<Self, InterpError> {
        if !strictly_ascending(&h) || !strictly_ascending(&tau) {
            return Err(InterpError::InvalidGrid("axes must be non-empty, finite and strictly ascending".into()));
        }
        Ok(Self { h, tau })
    }

    /// `n_h` evenly spaced spatial lags over `[lo, hi]` and temporal lags `1..=max_lag`.
    pub fn spanning(lo: f64, hi: f64, n_h: usize, max_lag: usize) -> Result<Self, InterpError> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) || n_h == 0 || max_lag == 0 {
            return Err(InterpError::InvalidGrid(format!("[{lo}, {hi}] with {n_h} steps, max lag {max_lag}")));
        }
        let h = if n_h == 1 || lo == hi {
            vec![lo]
        } else {
            (0..n_h).map(|k| lo + (hi - lo) * k as f64 / (n_h - 1) as f64).collect()
        };
        Self::new(h, (1..=max_lag).map(|t| t as f64).collect())
    }

    /// Spatial axis over the given quantiles of the spatial margin.
    pub fn from_model(m: &JointModel, n_h: usize, quantiles: (f64, f64), max_lag: usize) -> Result<Self, InterpError> {
        let lo = m.margin_h.model.quantile(quantiles.0);
        let hi = m.margin_h.model.quantile(quantiles.1);
        if !(hi > lo) {
            return Err(InterpError::InvalidGrid(format!("degenerate spatial quantiles [{lo}, {hi}]")));
        }
        Self::spanning(lo, hi, n_h, max_lag)
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    fn span(v: &[f64]) -> f64 {
        let s = v[v.len() - 1] - v[0];
        if s > 0.0 { s } else { 1.0 }
    }

    pub fn h_span(&self) -> f64 {
        Self::span(&self.h)
    }

    pub fn tau_span(&self) -> f64 {
        Self::span(&self.tau)
    }

    pub fn len(&self) -> usize {
        self.h.len() * self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of one constrained argmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagChoice {
    pub h: f64,
    pub tau: f64,
    pub density: f64,
    /// A ratio fell outside the populated bins and the nearest bin was used.
    pub fallback: bool,
}

/// Exhaustive scan of the feasible grid points. Scans `h` then `τ` in
/// ascending order keeping the first strict maximum, so ties go to smaller
/// `h`, then smaller `τ`. Non-finite scores rank below every finite one.
pub fn argmax_feasible<F: Fn(f64, f64) -> f64>(grid: &LagGrid, h_max: f64, tau_max: f64, score: F) -> Option<(f64, f64, f64)> {
    let mut best: Option<(f64, f64, f64)> = None;
    for &h in grid.h.iter().take_while(|&&h| h <= h_max) {
        for &t in grid.tau.iter().take_while(|&&t| t <= tau_max) {
            let s = score(h, t);
            let s = if s.is_nan() { f64::NEG_INFINITY } else { s };
            match best {
                Some((_, _, b)) if s <= b => {}
                _ => best = Some((h, t, s)),
            }
        }
    }
    best
}

/// `(h*, τ*)` maximizing the joint density subject to `h ≤ SLD(r_h)`, `τ ≤ TLD(r_τ)`.
pub fn most_likely_lag(
    m: &JointModel,
    dep_h: &LagDependence,
    dep_tau: &LagDependence,
    stir: (f64, f64),
    grid: &LagGrid,
) -> Result<LagChoice, InterpError> {
    let (h_max, fb_h) = dep_h.lookup(stir.0).unwrap_or((f64::NEG_INFINITY, true));
    let (tau_max, fb_t) = dep_tau.lookup(stir.1).unwrap_or((f64::NEG_INFINITY, true));
    let (h, tau, ln) = argmax_feasible(grid, h_max, tau_max, |h, t| m.ln_pdf(h, t))
        .ok_or(InterpError::EmptyFeasibleRegion { h_max, tau_max })?;
    Ok(LagChoice {
        h,
        tau,
        density: ln.exp(),
        fallback: fb_h || fb_t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StirRow {
    pub r_h: f64,
    pub r_tau: f64,
    pub h_star: f64,
    pub tau_star: f64,
    pub density_at_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableSource {
    /// Rows from the constrained density argmax.
    Density,
    /// Margins unavailable; each row sits on its constraint corner.
    Corner,
}

/// Lookup table between most-likely lags and influence-ratio pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StirTable {
    pub rows: Vec<StirRow>,
    pub omitted: usize,
    pub h_span: f64,
    pub tau_span: f64,
    pub source: TableSource,
}

/// Every (spatial bin, temporal bin) pair, most populated first. The order
/// is the tie-break of [`a_map`]: among rows sharing the nearest lag, the
/// ratio pair seen most often wins.
fn cross_bins(dep_h: &LagDependence, dep_tau: &LagDependence) -> Vec<((f64, f64), (f64, f64))> {
    let mut pairs: Vec<(usize, (f64, f64), (f64, f64))> = dep_h
        .bins
        .iter()
        .enumerate()
        .flat_map(|(a, &bh)| {
            dep_tau
                .bins
                .iter()
                .enumerate()
                .map(move |(b, &bt)| (dep_h.count(a) * dep_tau.count(b), bh, bt))
        })
        .collect();
    pairs.sort_by(|x, y| y.0.cmp(&x.0));
    pairs.into_iter().map(|(_, bh, bt)| (bh, bt)).collect()
}

fn finish(rows: Vec<Option<StirRow>>, grid: &LagGrid, source: TableSource) -> Result<StirTable, InterpError> {
    let omitted = rows.iter().filter(|r| r.is_none()).count();
    let rows: Vec<StirRow> = rows.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(InterpError::EmptyTable { omitted });
    }
    Ok(StirTable {
        rows,
        omitted,
        h_span: grid.h_span(),
        tau_span: grid.tau_span(),
        source,
    })
}

/// One row per (spatial bin, temporal bin); infeasible combinations are omitted and counted.
pub fn build_stir_table(
    m: &JointModel,
    dep_h: &LagDependence,
    dep_tau: &LagDependence,
    grid: &LagGrid,
) -> Result<StirTable, InterpError> {
    let rows = cross_bins(dep_h, dep_tau)
        .into_par_iter()
        .map(|((r_h, h_max), (r_tau, tau_max))| {
            argmax_feasible(grid, h_max, tau_max, |h, t| m.ln_pdf(h, t)).map(|(h, t, ln)| StirRow {
                r_h,
                r_tau,
                h_star: h,
                tau_star: t,
                density_at_max: ln.exp(),
            })
        })
        .collect();
    finish(rows, grid, TableSource::Density)
}

/// Table without a density: every row takes the largest feasible grid lag on each axis.
pub fn build_corner_table(dep_h: &LagDependence, dep_tau: &LagDependence, grid: &LagGrid) -> Result<StirTable, InterpError> {
    let rows = cross_bins(dep_h, dep_tau)
        .into_iter()
        .map(|((r_h, h_max), (r_tau, tau_max))| {
            let h = grid.h.iter().rev().find(|&&h| h <= h_max)?;
            let t = grid.tau.iter().rev().find(|&&t| t <= tau_max)?;
            Some(StirRow {
                r_h,
                r_tau,
                h_star: *h,
                tau_star: *t,
                density_at_max: 0.0,
            })
        })
        .collect();
    finish(rows, grid, TableSource::Corner)
}

/// Ratios of the row nearest to `(h, τ)`, each axis scaled by its grid span.
pub fn a_map(table: &StirTable, h: f64, tau: f64) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0usize);
    for (k, r) in table.rows.iter().enumerate() {
        let dh = (r.h_star - h) / table.h_span;
        let dt = (r.tau_star - tau) / table.tau_span;
        let d = dh * dh + dt * dt;
        if d < best.0 {
            best = (d, k);
        }
    }
    let r = &table.rows[best.1];
    (r.r_h, r.r_tau)
}

/// Spatial lags below this count as co-located (absorbs cell-centre rounding).
pub const COLOCATED_M: f64 = 1e-3;

/// [`a_map`], except that a zero lag on an axis maps to the ratio 1 of a
/// value with itself.
pub fn stir_ratios(table: &StirTable, h: f64, tau: f64) -> (f64, f64) {
    let (r_h, r_tau) = a_map(table, h, tau);
    (if h < COLOCATED_M { 1.0 } else { r_h }, if tau == 0.0 { 1.0 } else { r_tau })
}

pub fn write_stir_table_csv<W: Write>(tables: &[(String, &StirTable)], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cluster", "source", "r_h", "r_tau", "h_star", "tau_star", "density_at_max"])?;
    for (label, t) in tables {
        let source = match t.source {
            TableSource::Density => "density",
            TableSource::Corner => "corner",
        };
        for r in &t.rows {
            w.write_record([
                label.as_str(),
                source,
                &fmt6(r.r_h),
                &fmt6(r.r_tau),
                &fmt6(r.h_star),
                &fmt6(r.tau_star),
                &format!("{:.6e}", r.density_at_max),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolationMode {
    /// Donor × ‖(r_h, r_τ)‖ as written.
    #[default]
    Literal,
    /// Literal divided by √2, so the pair (1, 1) returns the donor value.
    Normalized,
}

impl FromStr for InterpolationMode {
    type Err = InterpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "literal" => Ok(Self::Literal),
            "normalized" => Ok(Self::Normalized),
            _ => Err(InterpError::UnknownMode(s.to_string())),
        }
    }
}

impl fmt::Display for InterpolationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::Normalized => "normalized",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpOptions {
    pub mode: InterpolationMode,
    /// Donors averaged with inverse-distance weights.
    pub k_donors: usize,
}

impl Default for InterpOptions {
    fn default() -> Self {
        Self {
            mode: InterpolationMode::Literal,
            k_donors: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpolated {
    pub value: f64,
    pub donor_station: usize,
    pub donor_time: usize,
}

/// Index of the station nearest to `(lat, lon)`; ties go to the lower index.
pub fn nearest_station(stations: &[Station], lat: f64, lon: f64) -> Option<usize> {
    let q = Station::new("", lat, lon);
    let mut best: Option<(f64, usize)> = None;
    for (i, s) in stations.iter().enumerate() {
        let d = haversine(&q, s);
        if best.is_none_or(|(b, _)| d < b) {
            best = Some((d, i));
        }
    }
    best.map(|b| b.1)
}

fn table_for(tables: &[StirTable], cluster: usize) -> &StirTable {
    if tables.len() == 1 { &tables[0] } else { &tables[cluster] }
}

/// Interpolates at `(lat, lon, t0)` from the observed cells of the query's
/// cluster. `tables` holds one table per cluster, or a single shared one.
pub fn interpolate_point(
    matrix: &ObservationMatrix,
    assignment: &ClusterAssignment,
    tables: &[StirTable],
    s0: (f64, f64),
    t0: usize,
    opts: InterpOptions,
) -> Result<Interpolated, InterpError> {
    let stations = matrix.stations();
    let home = nearest_station(stations, s0.0, s0.1).ok_or(InterpError::NoDonor)?;
    let cluster = assignment.labels[home];
    let table = table_for(tables, cluster);
    let q = Station::new("", s0.0, s0.1);

    // (normalized distance, station, time, spatial lag, temporal lag)
    let mut donors: Vec<(f64, usize, usize, f64, f64)> = Vec::new();
    for i in assignment.members(cluster) {
        let h = haversine(&q, &stations[i]);
        for j in 0..matrix.n_times() {
            if matrix.is_observed(i, j) {
                let tau = (j as f64 - t0 as f64).abs();
                let d = ((h / table.h_span).powi(2) + (tau / table.tau_span).powi(2)).sqrt();
                donors.push((d, i, j, h, tau));
            }
        }
    }
    if donors.is_empty() {
        return Err(InterpError::NoDonor);
    }
    donors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    donors.truncate(opts.k_donors.max(1));

    let estimate = |&(_, i, j, h, tau): &(f64, usize, usize, f64, f64)| {
        let (r_h, r_tau) = stir_ratios(table, h, tau);
        let z = matrix.get(i, j).expect("donor is observed");
        let norm = (r_h * r_h + r_tau * r_tau).sqrt();
        match opts.mode {
            InterpolationMode::Literal => z * norm,
            InterpolationMode::Normalized => z * norm / std::f64::consts::SQRT_2,
        }
    };
    let value = if donors.len() == 1 || donors[0].0 == 0.0 {
        estimate(&donors[0])
    } else {
        let (mut num, mut den) = (0.0, 0.0);
        for d in &donors {
            num += estimate(d) / d.0;
            den += 1.0 / d.0;
        }
        num / den
    };
    Ok(Interpolated {
        value: value.max(VALUE_FLOOR),
        donor_station: donors[0].1,
        donor_time: donors[0].2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BBox {
    /// Station extent padded by `pad` degrees on every side.
    pub fn around(stations: &[Station], pad: f64) -> Self {
        let fold = |f: fn(&Station) -> f64, init: f64, op: fn(f64, f64) -> f64| stations.iter().map(f).fold(init, op);
        Self {
            min_lat: fold(|s| s.lat, f64::INFINITY, f64::min) - pad,
            max_lat: fold(|s| s.lat, f64::NEG_INFINITY, f64::max) + pad,
            min_lon: fold(|s| s.lon, f64::INFINITY, f64::min) - pad,
            max_lon: fold(|s| s.lon, f64::NEG_INFINITY, f64::max) + pad,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.min_lat, self.max_lat, self.min_lon, self.max_lon].iter().all(|v| v.is_finite())
            && self.min_lat <= self.max_lat
            && self.min_lon <= self.max_lon
    }

    pub fn overlaps(&self, stations: &[Station]) -> bool {
        let ext = Self::around(stations, 0.0);
        self.min_lat <= ext.max_lat && ext.min_lat <= self.max_lat && self.min_lon <= ext.max_lon && ext.min_lon <= self.max_lon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lat: f64,
    pub lon: f64,
    pub time_index: usize,
    pub value: Option<f64>,
    pub donor_id: Option<String>,
}

/// Cell centres in time-major, then latitude, then longitude order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationGrid {
    pub bbox: BBox,
    pub cell_deg: f64,
    pub n_lat: usize,
    pub n_lon: usize,
    pub times: Vec<usize>,
    pub cells: Vec<GridCell>,
}

fn n_cells(span: f64, cell: f64) -> usize {
    ((span / cell - 1e-9).ceil() as usize).max(1)
}

pub fn interpolate_grid(
    matrix: &ObservationMatrix,
    assignment: &ClusterAssignment,
    tables: &[StirTable],
    bbox: BBox,
    cell_deg: f64,
    times: &[usize],
    opts: InterpOptions,
) -> Result<InterpolationGrid, InterpError> {
    if !bbox.is_valid() || !(cell_deg > 0.0) {
        return Err(InterpError::InvalidGrid(format!("bbox {bbox:?} with cell {cell_deg}")));
    }
    if !bbox.overlaps(matrix.stations()) {
        return Err(InterpError::InvalidGrid("bounding box does not overlap the stations".into()));
    }
    let n_lat = n_cells(bbox.max_lat - bbox.min_lat, cell_deg);
    let n_lon = n_cells(bbox.max_lon - bbox.min_lon, cell_deg);
    let coords: Vec<(usize, f64, f64)> = times
        .iter()
        .flat_map(|&t| {
            (0..n_lat).flat_map(move |a| {
                (0..n_lon).map(move |b| {
                    (
                        t,
                        bbox.min_lat + (a as f64 + 0.5) * cell_deg,
                        bbox.min_lon + (b as f64 + 0.5) * cell_deg,
                    )
                })
            })
        })
        .collect();
    let cells = coords
        .into_par_iter()
        .map(|(t, lat, lon)| {
            let r = interpolate_point(matrix, assignment, tables, (lat, lon), t, opts).ok();
            GridCell {
                lat,
                lon,
                time_index: t,
                value: r.as_ref().map(|r| r.value),
                donor_id: r.map(|r| matrix.stations()[r.donor_station].id.clone()),
            }
        })
        .collect();
    Ok(InterpolationGrid {
        bbox,
        cell_deg,
        n_lat,
        n_lon,
        times: times.to_vec(),
        cells,
    })
}

impl InterpolationGrid {
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["lon", "lat", "time_index", "value", "donor_id"])?;
        for c in &self.cells {
            w.write_record([
                fmt6(c.lon),
                fmt6(c.lat),
                c.time_index.to_string(),
                c.value.map(fmt6).unwrap_or_default(),
                c.donor_id.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// FeatureCollection of square cell polygons.
    pub fn to_geojson(&self) -> serde_json::Value {
        let r6 = |x: f64| (x * 1e6).round() / 1e6;
        let half = self.cell_deg / 2.0;
        let features: Vec<serde_json::Value> = self
            .cells
            .iter()
            .map(|c| {
                let (w, e, s, n) = (r6(c.lon - half), r6(c.lon + half), r6(c.lat - half), r6(c.lat + half));
                serde_json::json!({
                    "type": "Feature",
                    "geometry": {
                        "type": "Polygon",
                        "coordinates": [[[w, s], [e, s], [e, n], [w, n], [w, s]]],
                    },
                    "properties": {
                        "time_index": c.time_index,
                        "value": c.value.map(r6),
                        "donor_id": c.donor_id,
                    },
                })
            })
            .collect();
        serde_json::json!({ "type": "FeatureCollection", "features": features })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::GhParam;
    use crate::evd::{EvdFamily, FittedMargin, Margin};
    use crate::model::{Granularity, TimeAxis};
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn margin(f: EvdFamily) -> FittedMargin {
        FittedMargin {
            model: Margin::Parametric(f),
            log_likelihood: 0.0,
            n_samples: 1,
            warnings: vec![],
        }
    }

    fn joint(theta: f64) -> JointModel {
        JointModel {
            copula: GhParam::new(theta).unwrap(),
            margin_h: margin(EvdFamily::Weibull { shape: 3.0, scale: 10_000.0 }),
            margin_tau: margin(EvdFamily::Weibull { shape: 2.5, scale: 3.0 }),
        }
    }

    fn dep(bins: &[(f64, f64)]) -> LagDependence {
        LagDependence {
            bins: bins.to_vec(),
            bin_width: 0.5,
            counts: vec![],
        }
    }

    fn grid() -> LagGrid {
        LagGrid::spanning(100.0, 30_000.0, 300, 5).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(LagGrid::new(vec![1.0, 1.0], vec![1.0]).is_err());
        assert!(LagGrid::new(vec![], vec![1.0]).is_err());
        let g = LagGrid::from_model(&joint(2.0), 200, DEFAULT_QUANTILES, 3).unwrap();
        assert_eq!(g.h().len(), 200);
        assert_eq!(g.tau(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn independence_lands_on_marginal_modes() {
        let m = joint(1.0);
        let g = grid();
        let choice = most_likely_lag(&m, &dep(&[(1.0, 1e9)]), &dep(&[(1.0, 1e9)]), (1.0, 1.0), &g).unwrap();
        let mode = |xs: &[f64], f: &dyn Fn(f64) -> f64| {
            xs.iter().copied().fold((f64::NAN, f64::NEG_INFINITY), |b, x| if f(x) > b.1 { (x, f(x)) } else { b }).0
        };
        assert_eq!(choice.h, mode(g.h(), &|h| m.margin_h.model.pdf(h)));
        assert_eq!(choice.tau, mode(g.tau(), &|t| m.margin_tau.model.pdf(t)));
        assert!(!choice.fallback);
    }

    #[test]
    fn tight_constraints_hit_the_corner() {
        let m = joint(2.0);
        let g = grid();
        let choice = most_likely_lag(&m, &dep(&[(1.0, 3_000.0)]), &dep(&[(1.0, 1.0)]), (1.0, 1.0), &g).unwrap();
        let h_corner = g.h().iter().rev().find(|&&h| h <= 3_000.0).copied().unwrap();
        assert_eq!((choice.h, choice.tau), (h_corner, 1.0));
    }

    #[test]
    fn infeasible_spatial_bound() {
        let r = most_likely_lag(&joint(2.0), &dep(&[(1.0, 50.0)]), &dep(&[(1.0, 3.0)]), (1.0, 1.0), &grid());
        assert!(matches!(r, Err(InterpError::EmptyFeasibleRegion { .. })));
    }

    fn brute(m: &JointModel, g: &LagGrid, hm: f64, tm: f64) -> Option<(f64, f64, f64)> {
        let mut pts: Vec<(f64, f64, f64)> = Vec::new();
        for &h in g.h() {
            for &t in g.tau() {
                if h <= hm && t <= tm {
                    pts.push((h, t, m.pdf(h, t)));
                }
            }
        }
        let best = pts.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
        pts.into_iter().filter(|p| p.2 == best).min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)))
    }

    #[test]
    fn table_rows_match_rescan() {
        let m = joint(1.8);
        let g = grid();
        let dh = dep(&[(0.5, 4_000.0), (1.0, 9_000.0), (1.5, 20_000.0)]);
        let dt = dep(&[(0.5, 2.0), (1.0, 4.0)]);
        let t = build_stir_table(&m, &dh, &dt, &g).unwrap();
        assert_eq!(t.rows.len(), 6);
        assert_eq!(t.omitted, 0);
        for r in &t.rows {
            let hm = dh.bins.iter().find(|b| b.0 == r.r_h).unwrap().1;
            let tm = dt.bins.iter().find(|b| b.0 == r.r_tau).unwrap().1;
            let (h, tau, d) = brute(&m, &g, hm, tm).unwrap();
            assert_eq!((r.h_star, r.tau_star), (h, tau));
            assert!((r.density_at_max - d).abs() <= 1e-12 * d);
        }
        let single = build_stir_table(&m, &dep(&[(1.0, 9_000.0)]), &dep(&[(1.0, 2.0)]), &g).unwrap();
        assert_eq!(single.rows.len(), 1);
        let err = build_stir_table(&m, &dep(&[(1.0, 10.0)]), &dep(&[(1.0, 2.0)]), &g);
        assert_eq!(err, Err(InterpError::EmptyTable { omitted: 1 }));
    }

    #[test]
    fn corner_table_takes_largest_feasible_lags() {
        let g = LagGrid::spanning(0.0, 10.0, 11, 3).unwrap();
        let t = build_corner_table(&dep(&[(1.0, 4.5)]), &dep(&[(1.0, 2.0)]), &g).unwrap();
        assert_eq!((t.rows[0].h_star, t.rows[0].tau_star), (4.0, 2.0));
        assert_eq!(t.source, TableSource::Corner);
    }

    fn table(rows: &[(f64, f64, f64, f64)]) -> StirTable {
        StirTable {
            rows: rows
                .iter()
                .map(|&(r_h, r_tau, h_star, tau_star)| StirRow {
                    r_h,
                    r_tau,
                    h_star,
                    tau_star,
                    density_at_max: 1.0,
                })
                .collect(),
            omitted: 0,
            h_span: 10_000.0,
            tau_span: 2.0,
            source: TableSource::Density,
        }
    }

    #[test]
    fn a_map_exact_single_and_ties() {
        let t = table(&[(0.6, 0.8, 1000.0, 1.0), (1.2, 0.9, 5000.0, 2.0), (2.0, 1.1, 9000.0, 3.0)]);
        assert_eq!(a_map(&t, 5000.0, 2.0), (1.2, 0.9));
        let one = table(&[(0.7, 1.3, 4.0, 1.0)]);
        assert_eq!(a_map(&one, 1e9, 77.0), (0.7, 1.3));
        let tied = table(&[(1.0, 1.0, 0.0, 1.0), (2.0, 2.0, 0.0, 1.0)]);
        assert_eq!(a_map(&tied, 0.0, 1.0), (1.0, 1.0));
    }

    #[test]
    fn a_map_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<_> = (0..30)
            .map(|_| (rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0), rng.gen_range(0.0..10_000.0), rng.gen_range(1..=3) as f64))
            .collect();
        let t = table(&rows);
        for _ in 0..50 {
            let (h, tau) = (rng.gen_range(0.0..12_000.0), rng.gen_range(0.0..4.0));
            let d = |r: &(f64, f64, f64, f64)| ((r.2 - h) / 10_000.0).powi(2) + ((r.3 - tau) / 2.0).powi(2);
            let best = rows.iter().min_by(|a, b| d(a).total_cmp(&d(b))).unwrap();
            assert_eq!(a_map(&t, h, tau), (best.0, best.1));
        }
    }

    fn toy() -> (ObservationMatrix, ClusterAssignment) {
        let stations = vec![
            Station::new("a", 28.60, 77.20),
            Station::new("b", 28.61, 77.21),
            Station::new("c", 28.62, 77.20),
        ];
        let axis = TimeAxis::new(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), Granularity::OneMonth, 3);
        let cells = vec![
            vec![Some(100.0), Some(110.0), Some(120.0)],
            vec![Some(80.0), None, Some(90.0)],
            vec![Some(50.0), Some(55.0), Some(60.0)],
        ];
        let m = ObservationMatrix::from_cells(stations, axis, cells).unwrap();
        let a = ClusterAssignment {
            labels: vec![0, 0, 0],
            radius_m: 18_026.0,
            representatives: vec![0],
        };
        (m, a)
    }

    fn opts(mode: InterpolationMode) -> InterpOptions {
        InterpOptions { mode, k_donors: 1 }
    }

    #[test]
    fn observed_point_in_both_modes() {
        let (m, a) = toy();
        let t = table(&[(0.6, 0.8, 1000.0, 1.0)]);
        let lit = interpolate_point(&m, &a, &[t.clone()], (28.60, 77.20), 1, opts(InterpolationMode::Literal)).unwrap();
        assert_eq!((lit.donor_station, lit.donor_time), (0, 1));
        assert_eq!(lit.value, 110.0 * 2f64.sqrt());
        let norm = interpolate_point(&m, &a, &[t], (28.60, 77.20), 1, opts(InterpolationMode::Normalized)).unwrap();
        assert!((norm.value - 110.0).abs() < 1e-9);
    }

    #[test]
    fn donor_times_norm_on_toy_set() {
        let (m, a) = toy();
        // Station b at t = 1 is missing. Station c at t = 1 (about 1.5 km away,
        // 0.15 scaled) beats b itself at t = 0 or 2 (0.5 scaled).
        let t = table(&[(0.6, 0.8, 1000.0, 1.0), (1.5, 2.0, 9000.0, 3.0)]);
        let b = m.stations()[1].clone();
        let h = haversine(&b, &m.stations()[2]);
        assert!((h / 10_000.0) < 0.5);
        let r = interpolate_point(&m, &a, &[t], (b.lat, b.lon), 1, opts(InterpolationMode::Literal)).unwrap();
        assert_eq!((r.donor_station, r.donor_time), (2, 1));
        // Nearest row to (h, 0) is the first; the zero temporal lag maps to ratio 1.
        assert!((r.value - 55.0 * (0.36f64 + 1.0).sqrt()).abs() < 1e-12);

        // With a tiny spatial span the station's own neighbouring months win (tie -> t = 0).
        let mut t2 = table(&[(0.6, 0.8, 1000.0, 1.0)]);
        t2.h_span = 100.0;
        let r = interpolate_point(&m, &a, &[t2], (b.lat, b.lon), 1, opts(InterpolationMode::Literal)).unwrap();
        assert_eq!((r.donor_station, r.donor_time), (1, 0));
        assert!((r.value - 80.0 * (1.0f64 + 0.64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn literal_three_four_five() {
        let (m, a) = toy();
        let t = table(&[(0.6, 0.8, 2000.0, 1.0)]);
        // Query between stations at an observed time of a: h > 0, tau = 1 via b's gap.
        let r = interpolate_point(&m, &a, &[t.clone()], (28.605, 77.205), 1, opts(InterpolationMode::Literal)).unwrap();
        let z = m.get(r.donor_station, r.donor_time).unwrap();
        let (rh, rt) = stir_ratios(&t, haversine(&Station::new("", 28.605, 77.205), &m.stations()[r.donor_station]), 0.0);
        assert_eq!(rt, 1.0);
        assert!((r.value - z * (rh * rh + rt * rt).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn no_donor_in_empty_cluster() {
        let (m, _) = toy();
        let m = m.with_masked(&[(0, 0), (0, 1), (0, 2)]);
        let a = ClusterAssignment {
            labels: vec![0, 1, 1],
            radius_m: 1.0,
            representatives: vec![0, 1],
        };
        let t = table(&[(1.0, 1.0, 0.0, 1.0)]);
        let r = interpolate_point(&m, &a, &[t], (28.60, 77.20), 0, opts(InterpolationMode::Literal));
        assert_eq!(r, Err(InterpError::NoDonor));
    }

    #[test]
    fn grid_shapes_and_single_cell() {
        let (m, a) = toy();
        let m = m.with_series(1, &[Some(80.0), Some(85.0), Some(90.0)]);
        let t = vec![table(&[(0.6, 0.8, 1000.0, 1.0), (1.1, 0.9, 3000.0, 2.0)])];
        let o = opts(InterpolationMode::Normalized);
        let bb = BBox {
            min_lat: 28.595,
            max_lat: 28.605,
            min_lon: 77.195,
            max_lon: 77.205,
        };
        let g = interpolate_grid(&m, &a, &t, bb, 0.01, &[2], o).unwrap();
        assert_eq!(g.cells.len(), 1);
        let direct = interpolate_point(&m, &a, &t, (g.cells[0].lat, g.cells[0].lon), 2, o).unwrap();
        assert_eq!(g.cells[0].value, Some(direct.value));
        assert!((direct.value - 120.0).abs() < 1e-9);
        assert_eq!(g.cells[0].donor_id.as_deref(), Some("a"));

        let empty = interpolate_grid(&m, &a, &t, bb, 0.01, &[], o).unwrap();
        assert!(empty.cells.is_empty());

        let wide = BBox {
            min_lat: 28.58,
            max_lat: 28.63,
            min_lon: 77.18,
            max_lon: 77.23,
        };
        let g = interpolate_grid(&m, &a, &t, wide, 0.005, &[0, 2], o).unwrap();
        assert_eq!((g.n_lat, g.n_lon, g.cells.len()), (10, 10, 200));
        assert!(g.cells.iter().all(|c| c.value.is_some_and(|v| v.is_finite() && v > 0.0) && c.donor_id.is_some()));
        assert_eq!(g, interpolate_grid(&m, &a, &t, wide, 0.005, &[0, 2], o).unwrap());

        let mut csv = Vec::new();
        g.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("lon,lat,time_index,value,donor_id\n"));
        assert_eq!(text.lines().count(), 201);
        let gj = g.to_geojson();
        assert_eq!(gj["features"].as_array().unwrap().len(), 200);
    }

    #[test]
    fn k_donor_average_is_between_estimates() {
        let (m, a) = toy();
        let t = vec![table(&[(1.0, 1.0, 1000.0, 1.0)])];
        let o = InterpOptions {
            mode: InterpolationMode::Normalized,
            k_donors: 3,
        };
        let r = interpolate_point(&m, &a, &t, (28.605, 77.205), 1, o).unwrap();
        assert!(r.value > 50.0 && r.value < 120.0);
    }

    proptest! {
        #[test]
        fn argmax_respects_constraints_and_scale(theta in 1.0f64..6.0, hm in 500.0f64..40_000.0, tm in 1.0f64..6.0, c in 1e-3f64..1e3) {
            let m = joint(theta);
            let g = grid();
            if let Some((h, t, _)) = argmax_feasible(&g, hm, tm, |h, t| m.ln_pdf(h, t)) {
                prop_assert!(h <= hm && t <= tm);
                let scaled = argmax_feasible(&g, hm, tm, |h, t| c * m.pdf(h, t)).unwrap();
                prop_assert_eq!((scaled.0, scaled.1), (h, t));
            }
        }
    }
}
