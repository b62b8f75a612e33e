//! Seeded synthetic data: the bundled five-station demo set and the sinusoid
//! fixture used to score imputation.

use std::f64::consts::PI;
use std::io::Write;

use chrono::{Datelike, Months, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ingest::RawRecord;
use crate::model::{Granularity, ObservationMatrix, Station, TimeAxis};

pub const DEMO_MONTHS: usize = 24;

/// Five monitoring sites with Delhi-like coordinates.
pub fn delhi_stations() -> Vec<Station> {
    vec![
        Station::new("anand_vihar", 28.6469, 77.3164),
        Station::new("ito", 28.6289, 77.2405),
        Station::new("punjabi_bagh", 28.6740, 77.1310),
        Station::new("rk_puram", 28.5633, 77.1869),
        Station::new("narela", 28.8227, 77.1020),
    ]
}

pub fn demo_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date")
}

pub fn demo_axis(granularity: Granularity) -> TimeAxis {
    let count = match granularity.months() {
        Some(m) => DEMO_MONTHS.div_ceil(m as usize),
        None => DEMO_MONTHS * 30 / granularity_days(granularity),
    };
    TimeAxis::new(demo_start(), granularity, count)
}

fn granularity_days(g: Granularity) -> usize {
    match g {
        Granularity::CustomDays(d) => d.max(1) as usize,
        _ => 30,
    }
}

/// Weekly readings over 24 months: a winter-peaking seasonal cycle, a
/// per-station level, multiplicative noise, a few dropped readings and one
/// station with two silent months.
pub fn demo_records(seed: u64) -> Vec<RawRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stations = delhi_stations();
    let levels = [1.25, 1.05, 1.0, 0.9, 1.15];
    let mut out = Vec::new();
    for (i, s) in stations.iter().enumerate() {
        for m in 0..DEMO_MONTHS {
            let month_start = demo_start() + Months::new(m as u32);
            let silent = i == 3 && (m == 7 || m == 8);
            for day in [1u32, 8, 15, 22] {
                let date = month_start.with_day0(day - 1).expect("day within month");
                let phase = 2.0 * PI * (m as f64 + day as f64 / 30.0) / 12.0;
                let seasonal = 110.0 + 70.0 * phase.cos();
                let noise = (0.12 * rng.gen_range(-1.0..1.0f64)).exp();
                let value = levels[i] * seasonal * noise;
                let dropped = rng.gen_bool(0.05);
                out.push(RawRecord {
                    station_id: s.id.clone(),
                    timestamp: date.and_hms_opt(0, 0, 0).expect("midnight"),
                    value: if silent || dropped { None } else { Some(value) },
                });
            }
        }
    }
    out
}

pub fn write_records_csv<W: Write>(records: &[RawRecord], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["station_id", "timestamp", "value"])?;
    for r in records {
        let v = r.value.map(crate::fmt6).unwrap_or_default();
        w.write_record([r.station_id.as_str(), &r.timestamp.date().to_string(), &v])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stations_csv<W: Write>(stations: &[Station], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "lat", "lon"])?;
    for s in stations {
        w.write_record([s.id.as_str(), &s.lat.to_string(), &s.lon.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Noiseless sinusoids `level + amp·sin(2πt/12 + φ_i)` with seeded phases.
pub fn sinusoid_matrix(n_stations: usize, n_times: usize, seed: u64) -> ObservationMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stations: Vec<Station> = (0..n_stations)
        .map(|i| Station::new(format!("s{i}"), 28.5 + 0.02 * i as f64, 77.1 + 0.03 * i as f64))
        .collect();
    let cells = (0..n_stations)
        .map(|_| {
            let phase = rng.gen_range(0.0..2.0 * PI);
            (0..n_times)
                .map(|t| Some(60.0 + 25.0 * (2.0 * PI * t as f64 / 12.0 + phase).sin()))
                .collect()
        })
        .collect();
    let axis = TimeAxis::new(demo_start(), Granularity::OneMonth, n_times);
    ObservationMatrix::from_cells(stations, axis, cells).expect("well-formed synthetic matrix")
}

/// Masks `round(fraction · n_observed)` observed cells chosen uniformly.
/// Returns the masked matrix and the masked cells in (station, time) order.
pub fn mask_fraction(matrix: &ObservationMatrix, fraction: f64, seed: u64) -> (ObservationMatrix, Vec<(usize, usize)>) {
    let observed: Vec<(usize, usize)> = (0..matrix.n_stations())
        .flat_map(|i| (0..matrix.n_times()).map(move |j| (i, j)))
        .filter(|&(i, j)| matrix.is_observed(i, j))
        .collect();
    let k = ((fraction.clamp(0.0, 1.0) * observed.len() as f64).round() as usize).min(observed.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(usize, usize)> = sample(&mut rng, observed.len(), k)
        .into_iter()
        .map(|ix| observed[ix])
        .collect();
    picked.sort_unstable();
    (matrix.with_masked(&picked), picked)
}
