//! Built-in experiment presets and the table reproductions built on them.
//!
//! Tables 3 to 5 measure per-type throughput between two stationary devices
//! at one range class. Tables 1 and 2 sweep the device count and `epsilon_k`
//! at a fixed mean speed and report the transmission score.

use std::path::Path;

use serde::Serialize;

use crate::engine::{
    self, Action, ArenaConfig, DeviceOverride, DevicesConfig, EngineError, MobilityConfig, RunResult, ScenarioConfig,
    SweepAxis, WorkloadItem,
};
use crate::linkmodel::{Channel, DataType, RangeClass, RateTable};
use crate::metrics::MetricRow;
use crate::mobility::MobilityParams;
use crate::oracle::OracleReport;
use crate::rng;

/// Published per-type throughput, Mbps, in `DataType::ALL` order.
pub fn reference_throughput(range: RangeClass) -> [f64; 4] {
    match range {
        RangeClass::M50 => [10.0, 8.1, 8.5, 5.8],
        RangeClass::M100 => [10.0, 7.2, 8.5, 4.0],
        RangeClass::M200 => [10.0, 6.8, 8.2, 2.6],
    }
}

pub const TABLE_EPSILONS: [f64; 6] = [0.1, 0.2, 0.4, 0.6, 0.8, 1.0];
pub const TABLE_DEVICES: [usize; 3] = [5, 10, 50];
/// Allowed relative deviation of a reproduced throughput cell.
pub const THROUGHPUT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TableId {
    Table1,
    Table2,
    Table3,
    Table4,
    Table5,
}

impl TableId {
    pub fn parse(s: &str) -> Option<TableId> {
        match s.trim_start_matches("table") {
            "1" => Some(TableId::Table1),
            "2" => Some(TableId::Table2),
            "3" => Some(TableId::Table3),
            "4" => Some(TableId::Table4),
            "5" => Some(TableId::Table5),
            _ => None,
        }
    }

    pub fn number(&self) -> u8 {
        *self as u8 + 1
    }

    pub fn range(&self) -> Option<RangeClass> {
        match self {
            TableId::Table3 => Some(RangeClass::M50),
            TableId::Table4 => Some(RangeClass::M100),
            TableId::Table5 => Some(RangeClass::M200),
            _ => None,
        }
    }

    /// Mean device speed for the transmission tables, m/s.
    pub fn speed(&self) -> Option<f64> {
        match self {
            TableId::Table1 => Some(50.0),
            TableId::Table2 => Some(100.0),
            _ => None,
        }
    }

    pub fn preset(&self) -> ScenarioConfig {
        match (self.range(), self.speed()) {
            (Some(r), _) => throughput_preset(r),
            (_, Some(v)) => transmission_preset(v),
            _ => unreachable!("every table has a range or a speed"),
        }
    }
}

pub const ALL_TABLES: [TableId; 5] = [TableId::Table1, TableId::Table2, TableId::Table3, TableId::Table4, TableId::Table5];

/// Preset by name (`table1` .. `table5`).
pub fn preset(name: &str) -> Option<ScenarioConfig> {
    name.strip_prefix("table").and_then(TableId::parse).map(|t| t.preset())
}

fn at(at: f64, action: Action) -> WorkloadItem {
    WorkloadItem { at, action }
}

/// Two stationary devices inside one range class, one saturating stream per
/// data type.
pub fn throughput_preset(range: RangeClass) -> ScenarioConfig {
    // well inside the class and beyond the next smaller one
    let distance = range.radius() * 0.75;
    let place = |index: usize, x: f64| DeviceOverride {
        index,
        position: Some([x, 100.0]),
        uplink: None,
        mobility: None,
        net_config: None,
    };
    let mut workload = vec![
        at(0.0, Action::Bootstrap { devices: None }),
        at(1.0, Action::Discover { device: 0, channel: Channel::WiFi }),
        at(1.0, Action::Connect { device: 0, peer: Some(1), data_type: DataType::Text }),
    ];
    for data_type in DataType::ALL {
        workload.push(at(2.0, Action::Send { device: 0, peer: 1, data_type, size_bits: 8e6, repeat: true }));
    }
    ScenarioConfig {
        name: format!("table{}", 3 + RangeClass::ALL.iter().position(|r| *r == range).expect("known class")),
        seed: 1,
        arena: ArenaConfig { width: 400.0, height: 200.0 },
        range,
        devices: DevicesConfig {
            count: 2,
            mobility: MobilityParams::stationary().into(),
            overrides: vec![place(0, 20.0), place(1, 20.0 + distance)],
            ..DevicesConfig::default()
        },
        workload,
        ..ScenarioConfig::default()
    }
}

/// Fast-moving devices exchanging short text payloads with their best
/// neighbour once per second.
pub fn transmission_preset(speed: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: format!("table{}", if speed <= 50.0 { 1 } else { 2 }),
        seed: 1,
        arena: ArenaConfig { width: 300.0, height: 300.0 },
        range: RangeClass::M100,
        devices: DevicesConfig {
            count: 10,
            mobility: MobilityConfig {
                lambda: 0.75,
                mean_speed: speed,
                mean_direction: 0.0,
                mean_direction_deg: None,
                speed_sigma: 0.1 * speed,
                direction_sigma: 0.5,
                max_speed: 2.0 * speed,
            },
            ..DevicesConfig::default()
        },
        workload: vec![
            at(0.0, Action::Bootstrap { devices: None }),
            at(0.5, Action::Exchange { interval: 1.0, data_type: DataType::Text, size_bits: 1e6 }),
        ],
        ..ScenarioConfig::default()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputRow {
    pub data_type: DataType,
    pub simulated_mbps: f64,
    pub reference_mbps: f64,
    /// Signed relative deviation, percent.
    pub deviation_pct: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputTable {
    pub table: u8,
    pub range: RangeClass,
    pub rows: Vec<ThroughputRow>,
    pub trace_digest: String,
    #[serde(skip)]
    pub run: RunResult,
}

impl ThroughputTable {
    pub fn within_tolerance(&self) -> bool {
        self.rows.iter().all(|r| r.deviation_pct.abs() <= THROUGHPUT_TOLERANCE * 100.0)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["data_type", "simulated [Mbps]", "published [Mbps]", "deviation [%]"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.data_type.to_string(),
                format!("{:.4}", r.simulated_mbps),
                format!("{}", r.reference_mbps),
                format!("{:+.3}", r.deviation_pct),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        self.run.metrics.clone()
    }
}

pub fn throughput_table(table: TableId, seed: Option<u64>) -> Result<ThroughputTable, EngineError> {
    let range = table.range().expect("throughput table");
    let mut config = throughput_preset(range);
    if let Some(s) = seed {
        config.seed = s;
    }
    let run = engine::run(config)?;
    let reference = reference_throughput(range);
    let rows = DataType::ALL
        .iter()
        .zip(reference)
        .map(|(&dt, reference_mbps)| {
            let simulated_mbps = run.summary.throughput_mbps[&dt];
            ThroughputRow {
                data_type: dt,
                simulated_mbps,
                reference_mbps,
                deviation_pct: 100.0 * (simulated_mbps - reference_mbps) / reference_mbps,
            }
        })
        .collect();
    Ok(ThroughputTable { table: table.number(), range, rows, trace_digest: run.digest.clone(), run })
}

/// Replays the throughput presets with the rate table at `path` and reports
/// the worst relative gap between measured and tabulated rates.
pub fn rate_pipeline_check(path: &Path) -> Result<OracleReport, EngineError> {
    let table = RateTable::from_csv_path(path)?;
    let mut cases = Vec::new();
    for range in RangeClass::ALL {
        let mut config = throughput_preset(range);
        config.rate_table = Some(path.to_path_buf());
        let run = engine::run(config)?;
        for dt in DataType::ALL {
            let expected = table.rate(dt, range)?;
            let measured = run.summary.throughput_mbps[&dt];
            cases.push(((measured - expected).abs() / expected, format!("{dt} at {range}: {measured:.4} vs {expected}")));
        }
    }
    Ok(OracleReport::from_cases("rate_pipeline", THROUGHPUT_TOLERANCE, cases))
}

#[derive(Debug, Clone, Serialize)]
pub struct TransmissionTable {
    pub table: u8,
    pub speed: f64,
    pub epsilons: Vec<f64>,
    pub devices: Vec<usize>,
    /// `scores[device row][epsilon column]`, dimensionless.
    pub scores: Vec<Vec<f64>>,
    pub digests: Vec<Vec<String>>,
}

impl TransmissionTable {
    /// Columns where the score strictly increases with the device count.
    pub fn ordered_columns(&self) -> Vec<bool> {
        (0..self.epsilons.len())
            .map(|c| self.scores.windows(2).all(|w| w[1][c] > w[0][c]))
            .collect()
    }

    pub fn ordering_holds(&self) -> bool {
        self.ordered_columns().into_iter().all(|ok| ok)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["devices [count]".to_string()];
        header.extend(self.epsilons.iter().map(|e| format!("eps={e} [dimensionless]")));
        w.write_record(&header).expect("in-memory write");
        for (d, row) in self.devices.iter().zip(&self.scores) {
            let mut rec = vec![d.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.4}")));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for (d, row) in self.devices.iter().zip(&self.scores) {
            for (e, v) in self.epsilons.iter().zip(row) {
                rows.push(MetricRow {
                    metric: "transmission_score".into(),
                    scenario: format!("table{}", self.table),
                    epsilon_k: *e,
                    devices: *d as u64,
                    value: *v,
                });
            }
        }
        rows
    }
}

/// Runs the `epsilon_k` x device-count grid. Every cell gets its own seed,
/// derived first along `epsilon_k` and then along the device count.
pub fn transmission_table(table: TableId, seed: Option<u64>, jobs: usize) -> Result<TransmissionTable, EngineError> {
    let speed = table.speed().expect("transmission table");
    let mut base = transmission_preset(speed);
    if let Some(s) = seed {
        base.seed = s;
    }
    let mut configs = Vec::new();
    for (i, &eps) in TABLE_EPSILONS.iter().enumerate() {
        let mut column = SweepAxis::EpsilonK.apply(&base, eps)?;
        column.seed = rng::derive_seed(base.seed, SweepAxis::EpsilonK.as_str(), i);
        let values: Vec<f64> = TABLE_DEVICES.iter().map(|&d| d as f64).collect();
        configs.extend(engine::sweep_configs(&column, SweepAxis::Devices, &values)?);
    }
    let runs = engine::run_all(configs, jobs)?;
    let n_dev = TABLE_DEVICES.len();
    let mut scores = vec![vec![0.0; TABLE_EPSILONS.len()]; n_dev];
    let mut digests = vec![vec![String::new(); TABLE_EPSILONS.len()]; n_dev];
    for (k, run) in runs.iter().enumerate() {
        let (col, row) = (k / n_dev, k % n_dev);
        scores[row][col] = run.summary.transmission_score;
        digests[row][col] = run.digest.clone();
    }
    Ok(TransmissionTable {
        table: table.number(),
        speed,
        epsilons: TABLE_EPSILONS.to_vec(),
        devices: TABLE_DEVICES.to_vec(),
        scores,
        digests,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for t in ALL_TABLES {
            let p = t.preset();
            assert!(p.violations().is_empty(), "{:?}: {:?}", t, p.violations());
            assert_eq!(preset(&format!("table{}", t.number())).unwrap(), p);
        }
        assert!(preset("table9").is_none());
        assert!(TableId::parse("9").is_none());
    }

    #[test]
    fn throughput_distances_fall_in_their_class() {
        for r in RangeClass::ALL {
            let p = throughput_preset(r);
            let [x0, _] = p.devices.overrides[0].position.unwrap();
            let [x1, _] = p.devices.overrides[1].position.unwrap();
            assert_eq!(RangeClass::for_distance(x1 - x0), Some(r));
        }
    }
}
