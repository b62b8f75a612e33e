//! Influence ratios and lag-dependence functions.
//!
//! A spatial influence ratio is `z(s_a, t) / z(s_b, t)` for a station pair in
//! one cluster; a temporal influence ratio is `z(s, t_a) / z(s, t_b)` for two
//! times at one station. Ratios are grouped into bins and each bin keeps the
//! largest lag at which its ratios occur; the empirical CDF over those
//! per-bin maxima is what the parametric margins are later fitted to.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::haversine;
use crate::fmt6;
use crate::model::{ClusterAssignment, ObservationMatrix};

/// Smallest ratio bin width the automatic rule will choose.
pub const MIN_BIN_WIDTH: f64 = 0.05;

/// Temporal lags considered by default, in buckets.
pub const DEFAULT_MAX_LAG: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum LagError {
    #[error("cluster {0} has fewer than two stations")]
    DegenerateCluster(usize),
    #[error("cluster {0} does not exist")]
    UnknownCluster(usize),
    #[error("matrix has missing cells; impute before computing ratios")]
    NotFullyObserved,
    #[error("max_lag must be at least 1")]
    ZeroMaxLag,
    #[error("no samples")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagRatioSample {
    /// Dimensionless, > 0.
    pub ratio: f64,
    /// Meters for spatial samples, buckets for temporal ones.
    pub lag: f64,
}

/// How a pair's ratio is oriented.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Lower index (station or time) in the numerator.
    #[default]
    IndexOrder,
    /// Larger value in the numerator, so every ratio is ≥ 1.
    MaxOverMin,
}

fn orient(a: f64, b: f64, o: Orientation) -> f64 {
    match o {
        Orientation::IndexOrder => a / b,
        Orientation::MaxOverMin => a.max(b) / a.min(b),
    }
}

/// Spatial ratios for every station pair of `cluster` at every time.
pub fn sir_samples(
    matrix: &ObservationMatrix,
    assignment: &ClusterAssignment,
    cluster: usize,
) -> Result<Vec<LagRatioSample>, LagError> {
    sir_samples_with(matrix, assignment, cluster, Orientation::IndexOrder)
}

pub fn sir_samples_with(
    matrix: &ObservationMatrix,
    assignment: &ClusterAssignment,
    cluster: usize,
    orientation: Orientation,
) -> Result<Vec<LagRatioSample>, LagError> {
    if !matrix.is_fully_observed() {
        return Err(LagError::NotFullyObserved);
    }
    if cluster >= assignment.n_clusters() {
        return Err(LagError::UnknownCluster(cluster));
    }
    let members = assignment.members(cluster);
    if members.len() < 2 {
        return Err(LagError::DegenerateCluster(cluster));
    }
    let st = matrix.stations();
    let mut out = Vec::with_capacity(members.len() * (members.len() - 1) / 2 * matrix.n_times());
    for (a, &i1) in members.iter().enumerate() {
        for &i2 in &members[a + 1..] {
            let lag = haversine(&st[i1], &st[i2]);
            for j in 0..matrix.n_times() {
                let (z1, z2) = (matrix.get(i1, j).unwrap(), matrix.get(i2, j).unwrap());
                out.push(LagRatioSample {
                    ratio: orient(z1, z2, orientation),
                    lag,
                });
            }
        }
    }
    Ok(out)
}

/// Temporal ratios at one station for every time pair at most `max_lag` apart.
pub fn tir_samples(
    matrix: &ObservationMatrix,
    station: usize,
    max_lag: usize,
) -> Result<Vec<LagRatioSample>, LagError> {
    tir_samples_with(matrix, station, max_lag, Orientation::IndexOrder)
}

pub fn tir_samples_with(
    matrix: &ObservationMatrix,
    station: usize,
    max_lag: usize,
    orientation: Orientation,
) -> Result<Vec<LagRatioSample>, LagError> {
    if max_lag == 0 {
        return Err(LagError::ZeroMaxLag);
    }
    let series: Vec<f64> = matrix
        .series(station)
        .into_iter()
        .collect::<Option<_>>()
        .ok_or(LagError::NotFullyObserved)?;
    let k = series.len();
    let mut out = Vec::new();
    for t1 in 0..k {
        for t2 in t1 + 1..k.min(t1 + max_lag + 1) {
            out.push(LagRatioSample {
                ratio: orient(series[t1], series[t2], orientation),
                lag: (t2 - t1) as f64,
            });
        }
    }
    Ok(out)
}

/// Freedman–Diaconis width of the ratio sample, floored at [`MIN_BIN_WIDTH`].
pub fn freedman_diaconis_width(samples: &[LagRatioSample]) -> f64 {
    if samples.len() < 2 {
        return MIN_BIN_WIDTH;
    }
    let mut r: Vec<f64> = samples.iter().map(|s| s.ratio).collect();
    r.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&r, 0.75) - quantile_sorted(&r, 0.25);
    let w = 2.0 * iqr / (r.len() as f64).cbrt();
    if w.is_finite() {
        w.max(MIN_BIN_WIDTH)
    } else {
        MIN_BIN_WIDTH
    }
}

/// Linear-interpolated quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-bin maximum lag. Bin `b` holds ratios nearest to `b * bin_width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagDependence {
    /// `(bin center, max lag)`, centers strictly increasing.
    pub bins: Vec<(f64, f64)>,
    pub bin_width: f64,
    /// Samples per bin, parallel to `bins`. Empty when unknown.
    #[serde(default)]
    pub counts: Vec<usize>,
}

impl LagDependence {
    /// Sample count of bin `k`; 1 when counts were not recorded.
    pub fn count(&self, k: usize) -> usize {
        self.counts.get(k).copied().unwrap_or(1)
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn max_lags(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.1).collect()
    }

    fn bin_index(&self, ratio: f64) -> i64 {
        (ratio / self.bin_width).round() as i64
    }

    /// Max lag of the bin holding `ratio`. When that bin is empty the nearest
    /// populated bin answers and the flag is `true`.
    pub fn lookup(&self, ratio: f64) -> Option<(f64, bool)> {
        let target = self.bin_index(ratio);
        let mut best: Option<(i64, f64)> = None;
        for &(center, lag) in &self.bins {
            let idx = self.bin_index(center);
            if idx == target {
                return Some((lag, false));
            }
            let gap = (idx - target).abs();
            if best.map_or(true, |(g, _)| gap < g) {
                best = Some((gap, lag));
            }
        }
        best.map(|(_, lag)| (lag, true))
    }
}

/// Groups samples into ratio bins of `bin_width`, keeping each bin's max lag.
pub fn lag_dependence(samples: &[LagRatioSample], bin_width: f64) -> Result<LagDependence, LagError> {
    assert!(bin_width > 0.0, "bin width must be positive");
    if samples.is_empty() {
        return Err(LagError::Empty);
    }
    let mut bins: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for s in samples {
        let idx = (s.ratio / bin_width).round() as i64;
        let slot = bins.entry(idx).or_insert((s.lag, 0));
        slot.0 = slot.0.max(s.lag);
        slot.1 += 1;
    }
    Ok(LagDependence {
        bins: bins
            .iter()
            .map(|(&idx, &(lag, _))| (idx as f64 * bin_width, lag))
            .collect(),
        bin_width,
        counts: bins.values().map(|v| v.1).collect(),
    })
}

/// Right-continuous step function over the distinct support points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    pub support: Vec<f64>,
    pub probs: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn from_values(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "ECDF of an empty sample");
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mut support = Vec::new();
        let mut probs = Vec::new();
        for (i, &x) in v.iter().enumerate() {
            if support.last() == Some(&x) {
                *probs.last_mut().unwrap() = (i + 1) as f64 / n;
            } else {
                support.push(x);
                probs.push((i + 1) as f64 / n);
            }
        }
        Self { support, probs }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.support.partition_point(|&s| s <= x);
        if k == 0 {
            0.0
        } else {
            self.probs[k - 1]
        }
    }
}

/// ECDF of the per-bin max lags, each bin weighted equally.
pub fn ecdf(dep: &LagDependence) -> EmpiricalCdf {
    EmpiricalCdf::from_values(&dep.max_lags())
}

/// Writes `label,ratio_bin,max_lag` rows.
pub fn write_lag_dependence_csv<W: Write>(
    rows: &[(String, &LagDependence)],
    writer: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["label", "ratio_bin", "max_lag"])?;
    for (label, dep) in rows {
        for &(c, lag) in &dep.bins {
            w.write_record([label.as_str(), &fmt6(c), &fmt6(lag)])?;
        }
    }
    w.flush()?;
    Ok(())
}
