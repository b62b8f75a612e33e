//! Regenerates the bundled demo inputs: `cargo run --example generate_demo -- data`.

use std::fs::File;
use std::path::PathBuf;

use stcopula::synthetic::{delhi_stations, demo_records, write_records_csv, write_stations_csv};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    std::fs::create_dir_all(&dir)?;
    write_records_csv(&demo_records(42), File::create(dir.join("observations.csv"))?)?;
    write_stations_csv(&delhi_stations(), File::create(dir.join("stations.csv"))?)?;
    Ok(())
}
