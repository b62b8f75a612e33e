//! Shared domain types: stations, the time axis, the observation matrix with
//! its explicit missing-value mask, and cluster assignments.

use std::collections::HashSet;
use std::fmt;

use chrono::{Datelike, Months, NaiveDate};
use serde::{Deserialize, Serialize};

/// A monitoring station on a spherical earth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    /// Degrees, in [-90, 90].
    pub lat: f64,
    /// Degrees, in [-180, 180].
    pub lon: f64,
}

impl Station {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64) -> Self {
        Self {
            id: id.into(),
            lat,
            lon,
        }
    }
}

/// Width of one time bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Granularity {
    OneMonth,
    TwoMonths,
    ThreeMonths,
    /// Fixed-width buckets of the given number of days.
    CustomDays(u32),
}

impl Granularity {
    /// Months per bucket for calendar granularities.
    pub fn months(self) -> Option<u32> {
        match self {
            Granularity::OneMonth => Some(1),
            Granularity::TwoMonths => Some(2),
            Granularity::ThreeMonths => Some(3),
            Granularity::CustomDays(_) => None,
        }
    }

    /// Short label used in configs and on the command line (`1m`, `2m`, `3m`, `<n>d`).
    pub fn label(self) -> String {
        match self {
            Granularity::OneMonth => "1m".into(),
            Granularity::TwoMonths => "2m".into(),
            Granularity::ThreeMonths => "3m".into(),
            Granularity::CustomDays(d) => format!("{d}d"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "1m" => Some(Granularity::OneMonth),
            "2m" => Some(Granularity::TwoMonths),
            "3m" => Some(Granularity::ThreeMonths),
            other => other
                .strip_suffix('d')
                .and_then(|d| d.parse::<u32>().ok())
                .filter(|&d| d > 0)
                .map(Granularity::CustomDays),
        }
    }
}

impl TryFrom<String> for Granularity {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Granularity::parse(&s).ok_or_else(|| format!("unknown granularity {s:?} (expected 1m, 2m, 3m or <n>d)"))
    }
}

impl From<Granularity> for String {
    fn from(g: Granularity) -> String {
        g.label()
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// `count` consecutive buckets of width `granularity` starting at `start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub start: NaiveDate,
    pub granularity: Granularity,
    pub count: usize,
}

impl TimeAxis {
    pub fn new(start: NaiveDate, granularity: Granularity, count: usize) -> Self {
        Self {
            start,
            granularity,
            count,
        }
    }

    /// Bucket index containing `date`, or `None` when it falls outside the axis.
    pub fn bucket_of(&self, date: NaiveDate) -> Option<usize> {
        if date < self.start {
            return None;
        }
        let idx = match self.granularity {
            Granularity::CustomDays(days) => (date - self.start).num_days() as usize / days as usize,
            g => {
                let m = g.months().expect("calendar granularity");
                let months = (date.year() - self.start.year()) * 12 + date.month() as i32
                    - self.start.month() as i32;
                // A date earlier in the month than the start day belongs to the previous month.
                let months = if date.day() < self.start.day() {
                    months - 1
                } else {
                    months
                };
                months as usize / m as usize
            }
        };
        (idx < self.count).then_some(idx)
    }

    /// First calendar day of bucket `j`.
    pub fn bucket_start(&self, j: usize) -> NaiveDate {
        match self.granularity {
            Granularity::CustomDays(d) => self.start + chrono::Duration::days(i64::from(d) * j as i64),
            g => {
                let m = g.months().expect("calendar granularity");
                self.start
                    .checked_add_months(Months::new(m * j as u32))
                    .expect("time axis overflow")
            }
        }
    }
}

/// One invariant violation found by [`ObservationMatrix::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Dimension { what: String, expected: String, found: String },
    NonPositive { station: usize, time: usize, value: f64 },
    NonFinite { station: usize, time: usize },
    LatOutOfRange { station: usize, lat: f64 },
    LonOutOfRange { station: usize, lon: f64 },
    DuplicateStationId { id: String },
    ShortTimeAxis { count: usize },
    ZeroGranularity,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimension {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected {expected}, found {found}"),
            Violation::NonPositive {
                station,
                time,
                value,
            } => write!(f, "cell ({station}, {time}) observed with nonpositive value {value}"),
            Violation::NonFinite { station, time } => {
                write!(f, "cell ({station}, {time}) observed with non-finite value")
            }
            Violation::LatOutOfRange { station, lat } => {
                write!(f, "station {station}: latitude {lat} outside [-90, 90]")
            }
            Violation::LonOutOfRange { station, lon } => {
                write!(f, "station {station}: longitude {lon} outside [-180, 180]")
            }
            Violation::DuplicateStationId { id } => write!(f, "duplicate station id {id:?}"),
            Violation::ShortTimeAxis { count } => {
                write!(f, "time axis has {count} buckets, need at least 2")
            }
            Violation::ZeroGranularity => f.write_str("time axis granularity must be positive"),
        }
    }
}

/// n stations × k time buckets of a strictly positive field. A cell is
/// observed iff `mask[i][j]`; values under a false mask carry no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    stations: Vec<Station>,
    time_axis: TimeAxis,
    values: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
}

impl ObservationMatrix {
    /// Builds a matrix and rejects it if any invariant fails.
    pub fn new(
        stations: Vec<Station>,
        time_axis: TimeAxis,
        values: Vec<Vec<f64>>,
        mask: Vec<Vec<bool>>,
    ) -> Result<Self, Vec<Violation>> {
        let m = Self::from_raw_parts(stations, time_axis, values, mask);
        let violations = m.validate();
        if violations.is_empty() {
            Ok(m)
        } else {
            Err(violations)
        }
    }

    /// Builds a matrix from optional cells (`None` = missing).
    pub fn from_cells(
        stations: Vec<Station>,
        time_axis: TimeAxis,
        cells: Vec<Vec<Option<f64>>>,
    ) -> Result<Self, Vec<Violation>> {
        let mask = cells
            .iter()
            .map(|row| row.iter().map(Option::is_some).collect())
            .collect();
        let values = cells
            .iter()
            .map(|row| row.iter().map(|c| c.unwrap_or(0.0)).collect())
            .collect();
        Self::new(stations, time_axis, values, mask)
    }

    /// Assembles a matrix without checking invariants. Pair with [`validate`](Self::validate).
    pub fn from_raw_parts(
        stations: Vec<Station>,
        time_axis: TimeAxis,
        values: Vec<Vec<f64>>,
        mask: Vec<Vec<bool>>,
    ) -> Self {
        Self {
            stations,
            time_axis,
            values,
            mask,
        }
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn time_axis(&self) -> &TimeAxis {
        &self.time_axis
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn n_times(&self) -> usize {
        self.time_axis.count
    }

    pub fn get(&self, station: usize, time: usize) -> Option<f64> {
        if self.mask[station][time] {
            Some(self.values[station][time])
        } else {
            None
        }
    }

    pub fn is_observed(&self, station: usize, time: usize) -> bool {
        self.mask[station][time]
    }

    /// One station's series as optional cells.
    pub fn series(&self, station: usize) -> Vec<Option<f64>> {
        (0..self.n_times()).map(|j| self.get(station, j)).collect()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    pub fn n_missing(&self) -> usize {
        self.n_stations() * self.n_times() - self.n_observed()
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().flatten().all(|&m| m)
    }

    pub fn station_index(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }

    /// Copy with the given cells marked missing.
    pub fn with_masked(&self, cells: &[(usize, usize)]) -> Self {
        let mut out = self.clone();
        for &(i, j) in cells {
            out.mask[i][j] = false;
            out.values[i][j] = 0.0;
        }
        out
    }

    /// Copy with one series replaced. Every `Some` must be finite and positive.
    pub fn with_series(&self, station: usize, series: &[Option<f64>]) -> Self {
        let mut out = self.clone();
        for (j, cell) in series.iter().enumerate() {
            out.mask[station][j] = cell.is_some();
            out.values[station][j] = cell.unwrap_or(0.0);
        }
        out
    }

    /// Copy without the given station.
    pub fn without_station(&self, station: usize) -> Self {
        let mut out = self.clone();
        out.stations.remove(station);
        out.values.remove(station);
        out.mask.remove(station);
        out
    }

    /// Returns every invariant violation; an empty list means the matrix is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.stations.len();
        let k = self.time_axis.count;

        if k < 2 {
            out.push(Violation::ShortTimeAxis { count: k });
        }
        if self.time_axis.granularity == Granularity::CustomDays(0) {
            out.push(Violation::ZeroGranularity);
        }

        let mut seen = HashSet::new();
        for (i, s) in self.stations.iter().enumerate() {
            if !(-90.0..=90.0).contains(&s.lat) {
                out.push(Violation::LatOutOfRange { station: i, lat: s.lat });
            }
            if !(-180.0..=180.0).contains(&s.lon) {
                out.push(Violation::LonOutOfRange { station: i, lon: s.lon });
            }
            if !seen.insert(s.id.as_str()) {
                out.push(Violation::DuplicateStationId { id: s.id.clone() });
            }
        }

        fn shape<T>(g: &[Vec<T>], k: usize) -> Option<usize> {
            let cols = g.first().map_or(k, Vec::len);
            g.iter().all(|r| r.len() == cols).then_some(cols)
        }
        let describe = |rows: usize, cols: Option<usize>| match cols {
            Some(c) => format!("{rows}x{c}"),
            None => format!("{rows} ragged rows"),
        };
        let expected = format!("{n}x{k}");
        let values_shape = shape(&self.values, k);
        let mask_shape = shape(&self.mask, k);
        let mut dims_ok = true;
        if self.values.len() != n || values_shape != Some(k) {
            out.push(Violation::Dimension {
                what: "values".into(),
                expected: expected.clone(),
                found: describe(self.values.len(), values_shape),
            });
            dims_ok = false;
        }
        if self.mask.len() != n || mask_shape != Some(k) {
            out.push(Violation::Dimension {
                what: "mask".into(),
                expected,
                found: describe(self.mask.len(), mask_shape),
            });
            dims_ok = false;
        }

        if dims_ok {
            for i in 0..n {
                for j in 0..k {
                    if !self.mask[i][j] {
                        continue;
                    }
                    let v = self.values[i][j];
                    if !v.is_finite() {
                        out.push(Violation::NonFinite { station: i, time: j });
                    } else if v <= 0.0 {
                        out.push(Violation::NonPositive {
                            station: i,
                            time: j,
                            value: v,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Partition of stations into spatial clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster index of each station, in station order.
    pub labels: Vec<usize>,
    pub radius_m: f64,
    /// Station index of each cluster's representative (medoid).
    pub representatives: Vec<usize>,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.representatives.len()
    }

    /// Station indices belonging to `cluster`, ascending.
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn representative<'a>(&self, stations: &'a [Station], cluster: usize) -> &'a Station {
        &stations[self.representatives[cluster]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis(k: usize) -> TimeAxis {
        TimeAxis::new(
            NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
            Granularity::OneMonth,
            k,
        )
    }

    fn stations(n: usize) -> Vec<Station> {
        (0..n)
            .map(|i| Station::new(format!("S{i}"), 28.6 + i as f64 * 0.01, 77.2))
            .collect()
    }

    #[test]
    fn fully_observed_positive_matrix_is_valid() {
        let m = ObservationMatrix::from_raw_parts(
            stations(2),
            axis(2),
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            vec![vec![true; 2]; 2],
        );
        assert!(m.validate().is_empty());
    }

    #[test]
    fn zero_observed_cell_is_named() {
        let m = ObservationMatrix::from_raw_parts(
            stations(2),
            axis(2),
            vec![vec![1.0, 0.0], vec![3.0, 4.0]],
            vec![vec![true; 2]; 2],
        );
        let v = m.validate();
        assert_eq!(
            v,
            vec![Violation::NonPositive {
                station: 0,
                time: 1,
                value: 0.0
            }]
        );
    }

    #[test]
    fn mismatched_mask_reports_one_dimension_violation() {
        let m = ObservationMatrix::from_raw_parts(
            stations(2),
            axis(2),
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
            vec![vec![true; 3]; 2],
        );
        let v = m.validate();
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::Dimension { what, .. } if what == "mask"));
    }

    #[test]
    fn missing_cells_may_hold_anything() {
        let m = ObservationMatrix::from_raw_parts(
            stations(1),
            axis(2),
            vec![vec![-5.0, f64::NAN]],
            vec![vec![false, false]],
        );
        assert!(m.validate().is_empty());
        assert_eq!(m.n_missing(), 2);
    }

    #[test]
    fn station_bounds_and_duplicates() {
        let mut st = stations(2);
        st[1].id = "S0".into();
        st[0].lat = 91.0;
        let m = ObservationMatrix::from_raw_parts(st, axis(1), vec![vec![1.0]; 2], vec![vec![true]; 2]);
        let v = m.validate();
        assert!(v.contains(&Violation::ShortTimeAxis { count: 1 }));
        assert!(v.contains(&Violation::LatOutOfRange { station: 0, lat: 91.0 }));
        assert!(v.contains(&Violation::DuplicateStationId { id: "S0".into() }));
    }

    #[test]
    fn monthly_buckets() {
        let a = TimeAxis::new(
            NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
            Granularity::TwoMonths,
            2,
        );
        let d = |m, day| NaiveDate::from_ymd_opt(2019, m, day).unwrap();
        assert_eq!(a.bucket_of(d(1, 31)), Some(0));
        assert_eq!(a.bucket_of(d(2, 28)), Some(0));
        assert_eq!(a.bucket_of(d(3, 1)), Some(1));
        assert_eq!(a.bucket_of(d(4, 30)), Some(1));
        assert_eq!(a.bucket_of(d(5, 1)), None);
        assert_eq!(a.bucket_start(1), d(3, 1));
    }

    #[test]
    fn custom_day_buckets() {
        let a = TimeAxis::new(
            NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
            Granularity::CustomDays(10),
            3,
        );
        assert_eq!(a.bucket_of(NaiveDate::from_ymd_opt(2019, 1, 11).unwrap()), Some(1));
        assert_eq!(a.bucket_of(NaiveDate::from_ymd_opt(2019, 1, 31).unwrap()), None);
        assert_eq!(a.bucket_start(2), NaiveDate::from_ymd_opt(2019, 1, 21).unwrap());
    }

    #[test]
    fn granularity_labels_round_trip() {
        for g in [
            Granularity::OneMonth,
            Granularity::TwoMonths,
            Granularity::ThreeMonths,
            Granularity::CustomDays(7),
        ] {
            assert_eq!(Granularity::parse(&g.label()), Some(g));
        }
        assert_eq!(Granularity::parse("0d"), None);
    }
}
