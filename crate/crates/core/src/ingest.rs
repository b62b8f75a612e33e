//! CSV ingestion of station time series and resampling onto a [`TimeAxis`].
//!
//! Observation files carry one reading per row (`station_id,timestamp,value`);
//! station coordinates come from a separate `id,lat,lon` file. Unparseable or
//! nonpositive readings become missing cells, never errors.

use std::collections::HashMap;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Granularity, ObservationMatrix, Station, TimeAxis, Violation};
use crate::fmt6;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("input has no data rows")]
    EmptyInput,
    #[error("line {line}: unparseable timestamp {value:?}")]
    BadTimestamp { line: u64, value: String },
    #[error("line {line}: {message}")]
    BadRow { line: u64, message: String },
    #[error("record references unknown station {0:?}")]
    UnknownStation(String),
    #[error("matrix header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("resampled matrix is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One timestamped reading; `value` is `None` when the cell could not be parsed.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub station_id: String,
    pub timestamp: NaiveDateTime,
    pub value: Option<f64>,
}

/// Column names of an observations file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub station_id: String,
    pub timestamp: String,
    pub value: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            station_id: "station_id".into(),
            timestamp: "timestamp".into(),
            value: "value".into(),
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
}

/// Accepts `YYYY-MM-DD`, `YYYY-MM-DDTHH:MM[:SS]` and the space-separated variant.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return d.and_hms_opt(0, 0, 0);
    }
    const FORMATS: [&str; 6] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
    ];
    let s = s.trim_end_matches('Z');
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Parses an observations CSV into raw records, one per data row.
pub fn parse_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<RawRecord>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = column(&headers, &schema.station_id)?;
    let ts_col = column(&headers, &schema.timestamp)?;
    let val_col = column(&headers, &schema.value)?;

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |c: usize| row.get(c).unwrap_or("");
        let id = field(id_col);
        if id.is_empty() {
            return Err(IngestError::BadRow {
                line,
                message: "empty station id".into(),
            });
        }
        let ts = field(ts_col);
        let timestamp = parse_timestamp(ts).ok_or_else(|| IngestError::BadTimestamp {
            line,
            value: ts.to_string(),
        })?;
        let value = field(val_col).parse::<f64>().ok().filter(|v| v.is_finite());
        out.push(RawRecord {
            station_id: id.to_string(),
            timestamp,
            value,
        });
    }
    if out.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    Ok(out)
}

/// Parses a stations CSV with columns `id,lat,lon`.
pub fn parse_stations_csv<R: Read>(reader: R) -> Result<Vec<Station>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = column(&headers, "id")?;
    let lat_col = column(&headers, "lat")?;
    let lon_col = column(&headers, "lon")?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |c: usize, what: &str| {
            row.get(c)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| IngestError::BadRow {
                    line,
                    message: format!("unparseable {what}"),
                })
        };
        out.push(Station::new(
            row.get(id_col).unwrap_or(""),
            num(lat_col, "lat")?,
            num(lon_col, "lon")?,
        ));
    }
    if out.is_empty() {
        return Err(IngestError::EmptyInput);
    }
    Ok(out)
}

/// Smallest axis at `granularity` holding every record: calendar buckets start
/// on the first of the earliest month, day buckets on the earliest day.
pub fn covering_axis(records: &[RawRecord], granularity: Granularity) -> Option<TimeAxis> {
    let first = records.iter().map(|r| r.timestamp.date()).min()?;
    let last = records.iter().map(|r| r.timestamp.date()).max()?;
    let start = match granularity {
        Granularity::CustomDays(_) => first,
        _ => first.with_day(1).expect("first of month"),
    };
    let open = TimeAxis::new(start, granularity, usize::MAX);
    let count = open.bucket_of(last).expect("last date is after the start") + 1;
    Some(TimeAxis::new(start, granularity, count))
}

/// Averages records into the buckets of `axis`. Records outside the axis are
/// dropped; nonpositive values are demoted to missing.
pub fn resample(
    records: &[RawRecord],
    stations: &[Station],
    axis: &TimeAxis,
) -> Result<ObservationMatrix, IngestError> {
    let index: HashMap<&str, usize> = stations
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let n = stations.len();
    let k = axis.count;
    let mut buckets: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); k]; n];
    let mut demoted = 0usize;

    for r in records {
        let &i = index
            .get(r.station_id.as_str())
            .ok_or_else(|| IngestError::UnknownStation(r.station_id.clone()))?;
        let Some(j) = axis.bucket_of(r.timestamp.date()) else {
            continue;
        };
        match r.value {
            Some(v) if v > 0.0 => buckets[i][j].push(v),
            Some(_) => demoted += 1,
            None => {}
        }
    }
    if demoted > 0 {
        log::warn!("{demoted} nonpositive readings treated as missing");
    }

    let cells = buckets
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|mut vals| {
                    if vals.is_empty() {
                        return None;
                    }
                    // Sorting fixes the summation order, so record order cannot leak into the result.
                    vals.sort_by(f64::total_cmp);
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect()
        })
        .collect();
    ObservationMatrix::from_cells(stations.to_vec(), axis.clone(), cells).map_err(IngestError::Invalid)
}

/// Writes one row per station and one column per bucket (headed by the
/// bucket start date); missing cells are empty.
pub fn write_matrix_csv<W: Write>(matrix: &ObservationMatrix, writer: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(writer);
    let axis = matrix.time_axis();
    let mut header = vec!["station_id".to_string()];
    header.extend((0..axis.count).map(|j| axis.bucket_start(j).to_string()));
    w.write_record(&header)?;
    for (i, s) in matrix.stations().iter().enumerate() {
        let mut row = vec![s.id.clone()];
        row.extend((0..axis.count).map(|j| matrix.get(i, j).map(fmt6).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a matrix written by [`write_matrix_csv`]. Rows are matched to
/// `stations` by id and the header must list the bucket starts of `axis`.
pub fn read_matrix_csv<R: Read>(
    reader: R,
    stations: &[Station],
    axis: &TimeAxis,
) -> Result<ObservationMatrix, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected: Vec<String> = (0..axis.count).map(|j| axis.bucket_start(j).to_string()).collect();
    let found: Vec<&str> = headers.iter().skip(1).collect();
    if found != expected {
        return Err(IngestError::HeaderMismatch(format!(
            "expected {} buckets starting {}, found {:?}",
            axis.count,
            axis.start,
            found.first()
        )));
    }
    let mut rows: HashMap<String, Vec<Option<f64>>> = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let id = row.get(0).unwrap_or("").to_string();
        let cells = row
            .iter()
            .skip(1)
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>().map(Some).map_err(|_| IngestError::BadRow {
                        line,
                        message: format!("unparseable cell {c:?}"),
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.insert(id, cells);
    }
    let cells = stations
        .iter()
        .map(|s| {
            rows.remove(&s.id)
                .ok_or_else(|| IngestError::UnknownStation(s.id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    ObservationMatrix::from_cells(stations.to_vec(), axis.clone(), cells).map_err(IngestError::Invalid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Granularity;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    #[test]
    fn single_row_maps_fields() {
        let csv = "station_id,timestamp,value\nS1,2019-04-01,55.0\n";
        let recs = parse_csv(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(
            recs,
            vec![RawRecord {
                station_id: "S1".into(),
                timestamp: ts("2019-04-01"),
                value: Some(55.0)
            }]
        );
    }

    #[test]
    fn na_value_becomes_absent() {
        let csv = "station_id,timestamp,value\nS1,2019-04-01,NA\n";
        let recs = parse_csv(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(recs[0].value, None);
    }

    #[test]
    fn header_only_is_empty_input() {
        let csv = "station_id,timestamp,value\n";
        assert!(matches!(
            parse_csv(csv.as_bytes(), &CsvSchema::default()),
            Err(IngestError::EmptyInput)
        ));
    }

    #[test]
    fn missing_column_is_reported() {
        let csv = "site,timestamp,value\nS1,2019-04-01,1\n";
        match parse_csv(csv.as_bytes(), &CsvSchema::default()) {
            Err(IngestError::MissingColumn(c)) => assert_eq!(c, "station_id"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn custom_schema_and_datetime_formats() {
        let csv = "From Date,Site,PM2.5\n2019-04-01 10:00:00,A,3\n2019-04-02T11:30,A,4\n";
        let schema = CsvSchema {
            station_id: "Site".into(),
            timestamp: "From Date".into(),
            value: "PM2.5".into(),
        };
        let recs = parse_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].timestamp, ts("2019-04-02T11:30:00"));
    }

    fn one_station() -> Vec<Station> {
        vec![Station::new("S1", 28.6, 77.2)]
    }

    fn rec(day: &str, v: Option<f64>) -> RawRecord {
        RawRecord {
            station_id: "S1".into(),
            timestamp: ts(day),
            value: v,
        }
    }

    fn axis(g: Granularity, k: usize) -> TimeAxis {
        TimeAxis::new(NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(), g, k)
    }

    #[test]
    fn monthly_mean() {
        let recs = vec![
            rec("2019-01-03", Some(10.0)),
            rec("2019-01-10", Some(20.0)),
            rec("2019-01-30", Some(30.0)),
        ];
        let m = resample(&recs, &one_station(), &axis(Granularity::OneMonth, 2)).unwrap();
        assert_eq!(m.get(0, 0), Some(20.0));
        assert_eq!(m.get(0, 1), None);
    }

    #[test]
    fn all_absent_bucket_is_missing() {
        let recs = vec![rec("2019-01-03", None), rec("2019-02-03", Some(4.0))];
        let m = resample(&recs, &one_station(), &axis(Granularity::OneMonth, 2)).unwrap();
        assert_eq!(m.get(0, 0), None);
        assert_eq!(m.get(0, 1), Some(4.0));
    }

    #[test]
    fn two_month_buckets_pool_records() {
        // Four months with one record each: means 10, 20, 30, 40.
        let recs = vec![
            rec("2019-01-15", Some(10.0)),
            rec("2019-02-15", Some(20.0)),
            rec("2019-03-15", Some(30.0)),
            rec("2019-04-15", Some(40.0)),
        ];
        let m = resample(&recs, &one_station(), &axis(Granularity::TwoMonths, 2)).unwrap();
        assert_eq!(m.series(0), vec![Some(15.0), Some(35.0)]);
    }

    #[test]
    fn nonpositive_values_are_demoted() {
        let recs = vec![rec("2019-01-03", Some(0.0)), rec("2019-01-04", Some(-2.0))];
        let m = resample(&recs, &one_station(), &axis(Granularity::OneMonth, 2)).unwrap();
        assert_eq!(m.get(0, 0), None);
        assert!(m.validate().is_empty());
    }

    #[test]
    fn unknown_station_rejected() {
        let mut r = rec("2019-01-03", Some(1.0));
        r.station_id = "X".into();
        assert!(matches!(
            resample(&[r], &one_station(), &axis(Granularity::OneMonth, 2)),
            Err(IngestError::UnknownStation(_))
        ));
    }

    #[test]
    fn matrix_csv_round_trip() {
        let recs = vec![rec("2019-01-03", Some(1.5)), rec("2019-03-03", Some(2.25))];
        let st = one_station();
        let ax = axis(Granularity::OneMonth, 3);
        let m = resample(&recs, &st, &ax).unwrap();
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "station_id,2019-01-01,2019-02-01,2019-03-01\nS1,1.500000,,2.250000\n"
        );
        let back = read_matrix_csv(buf.as_slice(), &st, &ax).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn stations_csv() {
        let st = parse_stations_csv("id,lat,lon\nA,28.1,77.0\nB,28.2,77.1\n".as_bytes()).unwrap();
        assert_eq!(st.len(), 2);
        assert_eq!(st[1], Station::new("B", 28.2, 77.1));
    }

    #[test]
    fn covering_axis_spans_all_records() {
        let rec = crate::synthetic::demo_records(1);
        let a = covering_axis(&rec, Granularity::OneMonth).unwrap();
        assert_eq!((a.start, a.count), (NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(), 24));
        assert_eq!(covering_axis(&rec, Granularity::ThreeMonths).unwrap().count, 8);
        assert!(covering_axis(&[], Granularity::OneMonth).is_none());
    }
}
