//! Reproduces all five result tables and prints them as CSV.
//!
//!     cargo run --release --example reproduce_tables

use std::time::Instant;

use cmanet::experiments::{throughput_table, transmission_table, ALL_TABLES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for table in ALL_TABLES {
        let started = Instant::now();
        if table.range().is_some() {
            let t = throughput_table(table, None)?;
            println!("# table {} ({}), within tolerance: {}", t.table, t.range, t.within_tolerance());
            print!("{}", t.to_csv());
        } else {
            let t = transmission_table(table, None, 0)?;
            println!("# table {} at {} m/s, device ordering holds: {}", t.table, t.speed, t.ordering_holds());
            print!("{}", t.to_csv());
        }
        println!("# {:.2} s\n", started.elapsed().as_secs_f64());
    }
    Ok(())
}
