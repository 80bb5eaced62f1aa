//! Device-to-device link model: range checks, per-data-type rates,
//! log-normal session lifetime and Marcum-Q connectivity.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mobility::Position;
use crate::numerics::{self, LogNormalParams, MarcumArgs, NumericsError};

/// Radius of the Bluetooth discovery channel in meters.
pub const BLUETOOTH_RADIUS_M: f64 = 10.0;
/// Synthetic Bluetooth rate, only Text payloads are carried.
pub const BLUETOOTH_RATE_MBPS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("no rate entry for {data_type} at {range}")]
    MissingRate { data_type: DataType, range: RangeClass },
    #[error("rate table is invalid: {0}")]
    InvalidTable(String),
    #[error("payload size must be positive, got {0} bits")]
    InvalidSize(f64),
    #[error("protocol overhead must lie in [0, 0.5], got {0}")]
    InvalidOverhead(f64),
    #[error("elapsed link age must be finite and non-negative, got {0}")]
    InvalidElapsed(f64),
    #[error("survival probability underflow at elapsed {elapsed} s (P = {probability:e})")]
    SurvivalUnderflow { elapsed: f64, probability: f64 },
    #[error("connectivity arguments must be strictly positive: {0}")]
    InvalidConnectivity(String),
    #[error("{data_type} cannot be carried over Bluetooth")]
    UnsupportedOnBluetooth { data_type: DataType },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("rate table CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("rate table I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Text,
    Image,
    Voice,
    Video,
}

impl DataType {
    pub const ALL: [DataType; 4] = [DataType::Text, DataType::Image, DataType::Voice, DataType::Video];

    pub fn as_str(&self) -> &'static str {
        match self {
            DataType::Text => "text",
            DataType::Image => "image",
            DataType::Voice => "voice",
            DataType::Video => "video",
        }
    }
}

impl fmt::Display for DataType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DataType {
    type Err = LinkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" => Ok(DataType::Text),
            "image" => Ok(DataType::Image),
            "voice" => Ok(DataType::Voice),
            "video" => Ok(DataType::Video),
            other => Err(LinkError::InvalidTable(format!("unknown data type {other:?}"))),
        }
    }
}

/// One of the three tested Wi-Fi radii.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RangeClass {
    #[serde(rename = "50m")]
    M50,
    #[serde(rename = "100m")]
    M100,
    #[serde(rename = "200m")]
    M200,
}

impl RangeClass {
    pub const ALL: [RangeClass; 3] = [RangeClass::M50, RangeClass::M100, RangeClass::M200];

    pub fn radius(&self) -> f64 {
        match self {
            RangeClass::M50 => 50.0,
            RangeClass::M100 => 100.0,
            RangeClass::M200 => 200.0,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RangeClass::M50 => "50m",
            RangeClass::M100 => "100m",
            RangeClass::M200 => "200m",
        }
    }

    /// Smallest class whose radius covers `distance`, if any.
    pub fn for_distance(distance: f64) -> Option<RangeClass> {
        RangeClass::ALL.into_iter().find(|r| distance <= r.radius())
    }
}

impl fmt::Display for RangeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for RangeClass {
    type Err = LinkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().trim_end_matches('m').trim() {
            "50" => Ok(RangeClass::M50),
            "100" => Ok(RangeClass::M100),
            "200" => Ok(RangeClass::M200),
            _ => Err(LinkError::InvalidTable(format!("unknown range class {s:?}"))),
        }
    }
}

/// Radio channel used for discovery and connections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    #[serde(alias = "wifi")]
    WiFi,
    Bluetooth,
}

impl Channel {
    /// Discovery radius of the channel for a device whose Wi-Fi class is `range`.
    pub fn radius(&self, range: RangeClass) -> f64 {
        match self {
            Channel::WiFi => range.radius(),
            Channel::Bluetooth => BLUETOOTH_RADIUS_M,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::WiFi => f.write_str("wifi"),
            Channel::Bluetooth => f.write_str("bluetooth"),
        }
    }
}

/// Throughput in Mbps per (data type, range class).
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    entries: BTreeMap<(DataType, RangeClass), f64>,
}

/// Measured maximum throughput per data type at 50, 100 and 200 m.
const CALIBRATED_RATES: [(DataType, [f64; 3]); 4] = [
    (DataType::Text, [10.0, 10.0, 10.0]),
    (DataType::Image, [8.1, 7.2, 6.8]),
    (DataType::Voice, [8.5, 8.5, 8.2]),
    (DataType::Video, [5.8, 4.0, 2.6]),
];

impl Default for RateTable {
    fn default() -> Self {
        let mut entries = BTreeMap::new();
        for (data_type, rates) in CALIBRATED_RATES {
            for (range, rate) in RangeClass::ALL.into_iter().zip(rates) {
                entries.insert((data_type, range), rate);
            }
        }
        Self { entries }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RateRow {
    data_type: String,
    range: String,
    mbps: f64,
}

impl RateTable {
    /// Builds a table from explicit entries and validates it.
    pub fn from_entries(
        entries: impl IntoIterator<Item = ((DataType, RangeClass), f64)>,
    ) -> Result<Self, LinkError> {
        let table = Self { entries: entries.into_iter().collect() };
        table.validate()?;
        Ok(table)
    }

    /// Lists every violated table invariant.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for data_type in DataType::ALL {
            let mut previous: Option<(RangeClass, f64)> = None;
            for range in RangeClass::ALL {
                match self.entries.get(&(data_type, range)) {
                    None => out.push(format!("missing entry {data_type} at {range}")),
                    Some(&rate) if !(rate > 0.0 && rate.is_finite()) => {
                        out.push(format!("{data_type} at {range}: rate must be positive, got {rate}"))
                    }
                    Some(&rate) => {
                        if let Some((prev_range, prev_rate)) = previous {
                            if rate > prev_rate {
                                out.push(format!(
                                    "{data_type}: rate grows from {prev_rate} at {prev_range} to {rate} at {range}"
                                ));
                            }
                        }
                        previous = Some((range, rate));
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(LinkError::InvalidTable(violations.join("; ")))
        }
    }

    pub fn rate(&self, data_type: DataType, range: RangeClass) -> Result<f64, LinkError> {
        self.entries
            .get(&(data_type, range))
            .copied()
            .ok_or(LinkError::MissingRate { data_type, range })
    }

    pub fn iter(&self) -> impl Iterator<Item = (DataType, RangeClass, f64)> + '_ {
        self.entries.iter().map(|(&(d, r), &v)| (d, r, v))
    }

    /// Parses a `data_type,range,mbps` CSV without validating it.
    pub fn from_csv_reader_unchecked<R: Read>(reader: R) -> Result<Self, LinkError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["data_type", "range", "mbps"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(LinkError::InvalidTable(format!(
                "expected header data_type,range,mbps, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = BTreeMap::new();
        for row in rdr.deserialize() {
            let row: RateRow = row?;
            let key = (row.data_type.parse()?, row.range.parse()?);
            if entries.insert(key, row.mbps).is_some() {
                return Err(LinkError::InvalidTable(format!(
                    "duplicate entry {} at {}",
                    key.0, key.1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, LinkError> {
        let table = Self::from_csv_reader_unchecked(reader)?;
        table.validate()?;
        Ok(table)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, LinkError> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), LinkError> {
        let mut wtr = csv::Writer::from_writer(writer);
        for (data_type, range, mbps) in self.iter() {
            wtr.serialize(RateRow {
                data_type: data_type.to_string(),
                range: range.to_string(),
                mbps,
            })?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Euclidean distance between two positions.
pub fn distance(a: Position, b: Position) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// True iff the two positions are within `radius` (inclusive).
pub fn within_radius(a: Position, b: Position, radius: f64) -> bool {
    distance(a, b) <= radius
}

pub fn link_exists(a: Position, b: Position, range: RangeClass) -> bool {
    within_radius(a, b, range.radius())
}

/// Log-normal lifetime of a link that has already survived `elapsed` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkLifetime {
    params: LogNormalParams,
    elapsed: f64,
}

impl LinkLifetime {
    pub fn new(params: LogNormalParams, elapsed: f64) -> Result<Self, LinkError> {
        if !(elapsed >= 0.0 && elapsed.is_finite()) {
            return Err(LinkError::InvalidElapsed(elapsed));
        }
        Ok(Self { params, elapsed })
    }

    pub fn fresh(params: LogNormalParams) -> Self {
        Self { params, elapsed: 0.0 }
    }

    pub fn params(&self) -> LogNormalParams {
        self.params
    }

    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }

    /// The same link observed at a different age.
    pub fn at_age(&self, elapsed: f64) -> Result<Self, LinkError> {
        Self::new(self.params, elapsed)
    }

    /// `P(L > elapsed)`.
    pub fn survival_probability(&self) -> f64 {
        if self.elapsed == 0.0 {
            return 1.0;
        }
        let z = (self.elapsed.ln() - self.params.mu()) / self.params.sigma();
        0.5 * numerics::erfc(z / std::f64::consts::SQRT_2)
    }
}

const SURVIVAL_FLOOR: f64 = 1e-300;

/// Expected total link duration given survival to the current age,
/// `E[L | L > elapsed]` for log-normal `L`:
///
/// ```text
/// exp(mu + sigma^2/2) * erfc((ln a - mu - sigma^2) / (sigma sqrt 2))
///                     / erfc((ln a - mu) / (sigma sqrt 2))
/// ```
pub fn session_life(link: &LinkLifetime) -> Result<f64, LinkError> {
    let mean = numerics::lognormal_mean(link.params)?;
    if link.elapsed == 0.0 {
        return Ok(mean);
    }
    let survival = link.survival_probability();
    if survival < SURVIVAL_FLOOR {
        return Err(LinkError::SurvivalUnderflow { elapsed: link.elapsed, probability: survival });
    }
    let (mu, sigma) = (link.params.mu(), link.params.sigma());
    let z = (link.elapsed.ln() - mu) / sigma;
    let upper = 0.5 * numerics::erfc((z - sigma) / std::f64::consts::SQRT_2);
    Ok((mean * upper / survival).max(link.elapsed))
}

/// Expected remaining life, `E[L - elapsed | L > elapsed]`.
pub fn remaining_life(link: &LinkLifetime) -> Result<f64, LinkError> {
    Ok(session_life(link)? - link.elapsed)
}

/// Arguments of the connectivity probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectivityArgs {
    pub n_devices: u64,
    pub sigma: f64,
    pub alpha: f64,
}

impl ConnectivityArgs {
    pub fn new(n_devices: u64, sigma: f64, alpha: f64) -> Result<Self, LinkError> {
        if n_devices == 0 || !(sigma > 0.0 && sigma.is_finite()) || !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LinkError::InvalidConnectivity(format!(
                "n_devices={n_devices}, sigma={sigma}, alpha={alpha}"
            )));
        }
        Ok(Self { n_devices, sigma, alpha })
    }
}

/// `1 - Q_1(sqrt(sigma), sqrt(n / alpha))`.
pub fn connectivity_prob(args: ConnectivityArgs) -> f64 {
    connectivity_prob_continuous(args.n_devices as f64, args.sigma, args.alpha)
}

/// Same as [`connectivity_prob`] for a real-valued device count, used to
/// probe the `n -> 0` limit.
pub fn connectivity_prob_continuous(n: f64, sigma: f64, alpha: f64) -> f64 {
    let args = MarcumArgs::new(sigma.sqrt(), (n / alpha).sqrt())
        .expect("validated connectivity arguments are non-negative");
    (1.0 - numerics::marcum_q1(args)).clamp(0.0, 1.0)
}

/// Seconds needed to move `size_bits` of `data_type` at the calibrated rate.
pub fn transfer_duration(
    size_bits: f64,
    data_type: DataType,
    range: RangeClass,
    table: &RateTable,
    overhead: f64,
) -> Result<f64, LinkError> {
    let rate = table.rate(data_type, range)?;
    duration_at_rate(size_bits, rate, overhead)
}

pub(crate) fn duration_at_rate(size_bits: f64, rate_mbps: f64, overhead: f64) -> Result<f64, LinkError> {
    if !(size_bits > 0.0 && size_bits.is_finite()) {
        return Err(LinkError::InvalidSize(size_bits));
    }
    if !(0.0..=0.5).contains(&overhead) {
        return Err(LinkError::InvalidOverhead(overhead));
    }
    Ok(size_bits / (rate_mbps * 1e6 * (1.0 - overhead)))
}
