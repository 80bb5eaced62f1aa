//! Information-theoretic and throughput metrics.
//!
//! Entropies of the 3-axis device symbol use log base 3. Chain entropies can
//! be reported in any [`LogBase`].

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linkmodel::DataType;
use crate::middleware::{TransferOutcome, TransferRecord};
use crate::numerics::{self, MarcumArgs, NumericsError};

const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("information sizes must be a non-empty list of positive values")]
    InvalidInfoSizes,
    #[error("axis {axis} is invalid: {reason}")]
    InvalidAxis { axis: usize, reason: String },
    #[error("transition matrix is invalid: {0}")]
    InvalidMatrix(String),
    #[error("dimension mismatch: matrix is {matrix}x{matrix}, vector has {vector} entries")]
    DimensionMismatch { matrix: usize, vector: usize },
    #[error("stationary vector must be a probability vector")]
    InvalidStationary,
    #[error("transition matrix is reducible; no unique stationary distribution")]
    Reducible,
    #[error("stationary system is numerically degenerate")]
    Degenerate,
    #[error("transmission parameters are invalid: {0}")]
    InvalidTransmission(String),
    #[error("measurement window must be positive, got {0}")]
    InvalidWindow(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("metrics CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// `P_k = (1 / I_k) / sum_j (1 / I_j)`.
pub fn info_probability(info_sizes: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if info_sizes.is_empty() || info_sizes.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(MetricsError::InvalidInfoSizes);
    }
    let total: f64 = info_sizes.iter().map(|s| 1.0 / s).sum();
    Ok(info_sizes.iter().map(|s| (1.0 / s) / total).collect())
}

/// Marginal outcome distributions along the X, Y and Z axes of a device symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolDistribution {
    axes: [Vec<f64>; 3],
}

impl SymbolDistribution {
    pub fn new(x: Vec<f64>, y: Vec<f64>, z: Vec<f64>) -> Result<Self, MetricsError> {
        let axes = [x, y, z];
        for (axis, probs) in axes.iter().enumerate() {
            if probs.is_empty() {
                return Err(MetricsError::InvalidAxis { axis, reason: "no outcomes".into() });
            }
            if probs.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(MetricsError::InvalidAxis { axis, reason: "negative probability".into() });
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(MetricsError::InvalidAxis { axis, reason: format!("sums to {sum}") });
            }
        }
        Ok(Self { axes })
    }

    /// Uniform over `sizes[i]` outcomes on axis `i`.
    pub fn uniform(sizes: [usize; 3]) -> Result<Self, MetricsError> {
        let [x, y, z] = sizes.map(|n| vec![1.0 / n.max(1) as f64; n]);
        Self::new(x, y, z)
    }

    pub fn axes(&self) -> &[Vec<f64>; 3] {
        &self.axes
    }
}

/// Optional weighting of the symbol entropy: `alpha_k / beta * chi2(dof, x)`.
/// Every factor defaults to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyWeight {
    #[serde(default = "one")]
    pub alpha_k: f64,
    #[serde(default = "one")]
    pub beta: f64,
    /// `(dof, x)` of the chi-square convergence factor.
    #[serde(default)]
    pub chi_square: Option<(f64, f64)>,
}

fn one() -> f64 {
    1.0
}

impl Default for EntropyWeight {
    fn default() -> Self {
        Self { alpha_k: 1.0, beta: 1.0, chi_square: None }
    }
}

impl EntropyWeight {
    pub fn value(&self) -> Result<f64, MetricsError> {
        let chi = match self.chi_square {
            Some((dof, x)) => numerics::chi_square_weight(dof, x)?,
            None => 1.0,
        };
        let w = self.alpha_k / self.beta * chi;
        if !(w >= 0.0 && w.is_finite()) {
            return Err(MetricsError::InvalidTransmission(format!("entropy weight {w} is not a finite non-negative value")));
        }
        Ok(w)
    }
}

fn plogp_base(p: f64, ln_base: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln() / ln_base
    } else {
        0.0
    }
}

/// `weight * sum_{x,y,z} P_x P_y P_z log3(1 / (P_x P_y P_z))`.
///
/// The product-space sum factorises into the sum of the three per-axis
/// entropies, which is what is evaluated.
pub fn symbol_entropy(dist: &SymbolDistribution, weight: f64) -> f64 {
    let ln3 = 3f64.ln();
    let h: f64 = dist
        .axes
        .iter()
        .map(|axis| axis.iter().map(|&p| plogp_base(p, ln3)).sum::<f64>())
        .sum();
    weight * h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogBase {
    Two,
    Three,
    E,
}

impl LogBase {
    fn ln(&self) -> f64 {
        match self {
            LogBase::Two => std::f64::consts::LN_2,
            LogBase::Three => 3f64.ln(),
            LogBase::E => 1.0,
        }
    }
}

/// Row-stochastic `K x K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let dim = rows.len();
        if dim == 0 {
            return Err(MetricsError::InvalidMatrix("empty matrix".into()));
        }
        let mut entries = Vec::with_capacity(dim * dim);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(MetricsError::InvalidMatrix(format!("row {i} has {} entries, expected {dim}", row.len())));
            }
            if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(MetricsError::InvalidMatrix(format!("row {i} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(MetricsError::InvalidMatrix(format!("row {i} sums to {sum}")));
            }
            entries.extend(row);
        }
        Ok(Self { dim, entries })
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        Self { dim, entries }
    }

    pub fn uniform(dim: usize) -> Self {
        Self { dim, entries: vec![1.0 / dim as f64; dim * dim] }
    }

    /// Row-normalised empirical transition counts. Rows with no
    /// observations become self-loops.
    pub fn from_counts(counts: &[Vec<u64>]) -> Result<Self, MetricsError> {
        let dim = counts.len();
        let rows = counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
                } else {
                    row.iter().map(|&c| c as f64 / total as f64).collect()
                }
            })
            .collect();
        Self::new(rows)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    /// Matrix product `self * other`, rows renormalised. A row that drifts
    /// further than 1e-9 from unit mass is an error.
    pub fn compose(&self, other: &TransitionMatrix) -> Result<TransitionMatrix, MetricsError> {
        if self.dim != other.dim {
            return Err(MetricsError::DimensionMismatch { matrix: self.dim, vector: other.dim });
        }
        let k = self.dim;
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            for m in 0..k {
                let a = self.get(i, m);
                if a == 0.0 {
                    continue;
                }
                for j in 0..k {
                    entries[i * k + j] += a * other.get(m, j);
                }
            }
            let row = &mut entries[i * k..(i + 1) * k];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(MetricsError::InvalidMatrix(format!("product row {i} sums to {sum}")));
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(TransitionMatrix { dim: k, entries })
    }

    /// True when every state reaches every other state.
    pub fn is_irreducible(&self) -> bool {
        let reach = |forward: bool| {
            let mut seen = vec![false; self.dim];
            let mut queue = VecDeque::from([0usize]);
            seen[0] = true;
            while let Some(i) = queue.pop_front() {
                for j in 0..self.dim {
                    let p = if forward { self.get(i, j) } else { self.get(j, i) };
                    if p > 0.0 && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }
}

/// Entropy of row `i` in the given base.
pub fn row_entropy(m: &TransitionMatrix, i: usize, base: LogBase) -> f64 {
    let ln_base = base.ln();
    m.row(i).iter().map(|&p| plogp_base(p, ln_base)).sum()
}

/// `H = sum_i P_i H_i` with `H_i` the entropy of row `i`.
pub fn chain_entropy(m: &TransitionMatrix, stationary: &[f64], base: LogBase) -> Result<f64, MetricsError> {
    if stationary.len() != m.dim {
        return Err(MetricsError::DimensionMismatch { matrix: m.dim, vector: stationary.len() });
    }
    if stationary.iter().any(|&p| !(p >= 0.0)) || (stationary.iter().sum::<f64>() - 1.0).abs() > ROW_TOLERANCE {
        return Err(MetricsError::InvalidStationary);
    }
    Ok(stationary
        .iter()
        .enumerate()
        .map(|(i, &p)| p * row_entropy(m, i, base))
        .sum())
}

/// Solves `pi = pi P`, `sum pi = 1` for an irreducible chain.
pub fn stationary_distribution(m: &TransitionMatrix) -> Result<Vec<f64>, MetricsError> {
    let k = m.dim;
    if !m.is_irreducible() {
        return Err(MetricsError::Reducible);
    }
    // (P^T - I) pi = 0 with the last equation replaced by normalisation.
    let mut a = DMatrix::<f64>::from_fn(k, k, |i, j| m.get(j, i) - if i == j { 1.0 } else { 0.0 });
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(k);
    b[k - 1] = 1.0;
    let pi = a.lu().solve(&b).ok_or(MetricsError::Degenerate)?;
    let mut pi: Vec<f64> = pi.iter().map(|&v| v.max(0.0)).collect();
    let sum: f64 = pi.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(MetricsError::Degenerate);
    }
    pi.iter_mut().for_each(|v| *v /= sum);
    Ok(pi)
}

/// Inputs of the per-interval transmission score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmissionParams {
    pub epsilon_k: f64,
    pub n_devices: u64,
    pub info_units: u64,
    /// `(t_{i-1}, t_i)` in seconds.
    pub interval: (f64, f64),
}

impl TransmissionParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.epsilon_k > 0.0 && self.epsilon_k <= 1.0) {
            return Err(MetricsError::InvalidTransmission(format!("epsilon_k {} outside (0, 1]", self.epsilon_k)));
        }
        if self.n_devices == 0 || self.info_units == 0 {
            return Err(MetricsError::InvalidTransmission("device count and info units must be positive".into()));
        }
        let (start, end) = self.interval;
        if !(end > start) || !start.is_finite() || !end.is_finite() {
            return Err(MetricsError::InvalidTransmission(format!("interval ({start}, {end}) is empty or reversed")));
        }
        Ok(())
    }
}

/// `epsilon_k * S_n * I_k / (t_i - t_{i-1})`, a dimensionless score.
pub fn transmission_index(p: &TransmissionParams) -> Result<f64, MetricsError> {
    p.validate()?;
    let (start, end) = p.interval;
    Ok(p.epsilon_k * p.n_devices as f64 * p.info_units as f64 / (end - start))
}

/// Marcum-Q kernel of the transmission density at one instant:
/// `Q_1(sqrt(2 g^2 / (1 - g^2)) * n / t, sqrt(n / (1 - g^2)) * 2 g)`.
pub fn transmission_kernel(n_devices: f64, t: f64, gamma: f64) -> Result<f64, MetricsError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(MetricsError::InvalidTransmission(format!("gamma {gamma} outside (0, 1)")));
    }
    if !(n_devices > 0.0 && t > 0.0) {
        return Err(MetricsError::InvalidTransmission("device count and time must be positive".into()));
    }
    let g2 = gamma * gamma;
    let a = (2.0 * g2 / (1.0 - g2)).sqrt() * n_devices / t;
    let b = (n_devices / (1.0 - g2)).sqrt() * 2.0 * gamma;
    Ok(numerics::marcum_q1(MarcumArgs::new(a, b)?))
}

/// Time-average of [`transmission_kernel`] over `[t_start, t_end]`, by
/// composite Simpson quadrature. Reporting only.
pub fn transmission_probability(n_devices: f64, t_start: f64, t_end: f64, gamma: f64) -> Result<f64, MetricsError> {
    if !(t_end > t_start && t_start > 0.0) {
        return Err(MetricsError::InvalidTransmission(format!("window ({t_start}, {t_end}) is invalid")));
    }
    let panels = 256;
    let h = (t_end - t_start) / panels as f64;
    let mut acc = 0.0;
    for i in 0..=panels {
        let w = if i == 0 || i == panels {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * transmission_kernel(n_devices, t_start + i as f64 * h, gamma)?;
    }
    Ok(acc * h / 3.0 / (t_end - t_start))
}

/// Delivered Mbps per data type over `window` seconds. Failed transfers
/// count their partially delivered bits.
pub fn measure_throughput(log: &[TransferRecord], window: f64) -> Result<BTreeMap<DataType, f64>, MetricsError> {
    if !(window > 0.0 && window.is_finite()) {
        return Err(MetricsError::InvalidWindow(window));
    }
    let mut out: BTreeMap<DataType, f64> = DataType::ALL.iter().map(|&d| (d, 0.0)).collect();
    for record in log {
        let bits = match record.outcome {
            TransferOutcome::Delivered | TransferOutcome::Failed => record.delivered_bits,
            TransferOutcome::InFlight => 0.0,
        };
        *out.entry(record.data_type).or_default() += bits;
    }
    for v in out.values_mut() {
        *v /= window * 1e6;
    }
    Ok(out)
}

/// One row of the `metric,scenario,epsilon_k,devices,value` CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub scenario: String,
    pub epsilon_k: f64,
    pub devices: u64,
    pub value: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], writer: W) -> Result<(), MetricsError> {
    let mut wtr = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        wtr.write_record(["metric", "scenario", "epsilon_k", "devices", "value"])?;
    }
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(reader: R) -> Result<Vec<MetricRow>, MetricsError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let rows = rdr.deserialize().collect::<Result<Vec<MetricRow>, _>>()?;
    Ok(rows)
}
