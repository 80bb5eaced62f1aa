//! Sweeps the device count of the 50 m/s transmission preset and prints the
//! metric rows consumed by the plotting tools.

use cmanet::engine::{self, SweepAxis};
use cmanet::experiments::transmission_preset;
use cmanet::metrics::write_metrics_csv;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = transmission_preset(50.0);
    let results = engine::sweep(&base, SweepAxis::Devices, &[5.0, 10.0, 20.0, 50.0], 0)?;
    for r in &results {
        eprintln!(
            "{:<24} score {:>9.3}  delivered {:>5}  digest {}",
            r.summary.name,
            r.summary.transmission_score,
            r.summary.delivered,
            &r.digest[..12]
        );
    }
    let rows: Vec<_> = results.iter().flat_map(|r| r.metrics.iter().cloned()).collect();
    write_metrics_csv(&rows, std::io::stdout())?;
    Ok(())
}
