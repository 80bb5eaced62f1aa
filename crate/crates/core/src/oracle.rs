//! Independent reference computations for the math core.
//!
//! Nothing here calls into `numerics`: each oracle evaluates the defining
//! integral, sum or expectation by brute force so that the fast
//! implementations can be checked against it.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::rng::{self, StreamRng};

/// Adaptive Simpson quadrature on `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        // the last clause stops refining once the difference is round-off
        if depth == 0 || delta.abs() <= 15.0 * tol || delta.abs() <= 1e-15 * (left + right).abs() {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    // split first so narrow peaks are not missed by the initial estimate
    let pieces = 64;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let (lo, hi) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            step(f, lo, hi, fa, fm, fb, whole, tol / pieces as f64, 40)
        })
        .sum()
}

/// `exp(-z) I0(z)` from `(1/pi) * int_0^pi exp(z (cos t - 1)) dt` by the
/// trapezoid rule, which converges geometrically for this periodic integrand.
/// The error is of order `I_2n(z) / I0(z)`, negligible once `n` is well past `z`.
pub fn bessel_i0_scaled_trapezoid(z: f64) -> f64 {
    let n = 64 + 2 * z.ceil() as usize;
    let h = std::f64::consts::PI / n as f64;
    let mut sum = 0.5 * (1.0 + (-2.0 * z).exp());
    for k in 1..n {
        sum += (z * ((k as f64 * h).cos() - 1.0)).exp();
    }
    sum / n as f64
}

/// First-order Marcum Q by quadrature of its defining integral,
/// `int_b^inf x exp(-(x - a)^2 / 2) [exp(-ax) I0(ax)] dx`.
pub fn marcum_q1_quadrature(a: f64, b: f64) -> f64 {
    let upper = a.max(b) + 12.0;
    if b >= upper {
        return 0.0;
    }
    let f = |x: f64| x * (-(x - a) * (x - a) / 2.0).exp() * bessel_i0_scaled_trapezoid(a * x);
    adaptive_simpson(&f, b, upper, 1e-12).clamp(0.0, 1.0)
}

/// Chi-square density from the gamma form `x^(k/2 - 1) exp(-x/2)`, with the
/// normalising constant found by quadrature (substituting `x = t^4` so the
/// integrand stays smooth at the origin for small `k`).
pub fn chi_square_quadrature(dof: f64, x: f64) -> f64 {
    let k = dof;
    let g = |t: f64| 4.0 * t.powf(2.0 * k - 1.0) * (-t.powi(4) / 2.0).exp();
    let z = adaptive_simpson(&g, 0.0, 4.0, 1e-13 * 2f64.powf(k / 2.0));
    x.powf(k / 2.0 - 1.0) * (-x / 2.0).exp() / z
}

/// Draws `Z ~ N(0, 1)` conditioned on `Z >= z0`.
pub fn truncated_normal_tail(rng: &mut StreamRng, z0: f64) -> f64 {
    if z0 <= 0.0 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z >= z0 {
                return z;
            }
        }
    }
    // exponential proposal with the optimal rate for the tail
    let alpha = 0.5 * (z0 + (z0 * z0 + 4.0).sqrt());
    loop {
        let e: f64 = rng.sample(Exp1);
        let z = z0 + e / alpha;
        let u: f64 = rng.random();
        if u <= (-(z - alpha) * (z - alpha) / 2.0).exp() {
            return z;
        }
    }
}

/// Monte Carlo estimate of `E[L | L > elapsed]` for `ln L ~ N(mu, sigma^2)`.
/// Returns `(mean, standard error)`.
pub fn session_life_monte_carlo(mu: f64, sigma: f64, elapsed: f64, samples: usize, rng: &mut StreamRng) -> (f64, f64) {
    let z0 = if elapsed > 0.0 { (elapsed.ln() - mu) / sigma } else { f64::NEG_INFINITY };
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let z = truncated_normal_tail(rng, z0);
        let l = (mu + sigma * z).exp();
        sum += l;
        sum_sq += l * l;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// Three-axis product-space entropy in base 3 by direct summation.
pub fn symbol_entropy_brute(x: &[f64], y: &[f64], z: &[f64], weight: f64) -> f64 {
    let mut h = 0.0;
    for &px in x {
        for &py in y {
            for &pz in z {
                let p = px * py * pz;
                if p > 0.0 {
                    h -= p * p.log(3.0);
                }
            }
        }
    }
    weight * h
}

/// Stationary distribution by Gaussian elimination on `pi (P - I) = 0`,
/// `sum pi = 1`.
pub fn stationary_brute(p: &[Vec<f64>]) -> Vec<f64> {
    let k = p.len();
    // rows of the augmented system A pi = rhs, A = (P^T - I) with last row ones
    let mut a: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut row: Vec<f64> = (0..k).map(|j| p[j][i] - if i == j { 1.0 } else { 0.0 }).collect();
            row.push(0.0);
            row
        })
        .collect();
    a[k - 1] = vec![1.0; k + 1];
    for col in 0..k {
        let piv = (col..k).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs())).expect("non-empty");
        a.swap(col, piv);
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..k).map(|i| a[i][k] / a[i][i]).collect()
}

/// `sum_i pi_i H(row_i)` with the natural log, divided by `ln(base)`.
pub fn chain_entropy_brute(p: &[Vec<f64>], base: f64) -> f64 {
    let pi = stationary_brute(p);
    pi.iter()
        .zip(p)
        .map(|(w, row)| w * row.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum::<f64>())
        .sum::<f64>()
        / base.ln()
}

/// Outcome of comparing one implementation against its oracle.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub worst_case: String,
    pub passed: bool,
}

impl OracleReport {
    pub fn from_cases(name: &str, tolerance: f64, cases: Vec<(f64, String)>) -> Self {
        let n = cases.len();
        let (max_deviation, worst_case) = cases
            .into_iter()
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap_or((0.0, String::new()));
        Self { name: name.into(), cases: n, passed: max_deviation <= tolerance, max_deviation, tolerance, worst_case }
    }
}

/// Grid for the session-life check: 5 values each of mu, sigma and
/// elapsed / median.
pub fn session_life_grid() -> Vec<(f64, f64, f64)> {
    let lin = |lo: f64, hi: f64| (0..5).map(move |i| lo + (hi - lo) * i as f64 / 4.0);
    let mut out = Vec::new();
    for mu in lin(0.0, 3.0) {
        for sigma in lin(0.2, 1.2) {
            for frac in lin(0.0, 3.0) {
                out.push((mu, sigma, frac * mu.exp()));
            }
        }
    }
    out
}

/// Relative deviation of `session_life` from Monte Carlo over the grid.
pub fn check_session_life(samples: usize, seed: u64) -> OracleReport {
    use crate::linkmodel::{session_life, LinkLifetime};
    use crate::numerics::LogNormalParams;
    let cases: Vec<(f64, String)> = session_life_grid()
        .into_par_iter()
        .enumerate()
        .map(|(i, (mu, sigma, elapsed))| {
            let mut rng = rng::stream(seed, "oracle", &format!("session_life/{i}"));
            let (mc, _) = session_life_monte_carlo(mu, sigma, elapsed, samples, &mut rng);
            let link = LinkLifetime::new(LogNormalParams::new(mu, sigma).expect("grid sigma > 0"), elapsed)
                .expect("grid elapsed >= 0");
            let closed = session_life(&link).expect("grid survival is representable");
            ((closed - mc).abs() / mc, format!("mu={mu} sigma={sigma} elapsed={elapsed:.4}: closed {closed:.6} vs MC {mc:.6}"))
        })
        .collect();
    OracleReport::from_cases("session_life", 0.01, cases)
}

/// Absolute deviation of `marcum_q1` from quadrature at random points of
/// `[0, 5]^2`.
pub fn check_marcum(cases: usize, seed: u64) -> OracleReport {
    use crate::numerics::{marcum_q1, MarcumArgs};
    let mut rng = rng::stream(seed, "oracle", "marcum");
    let points: Vec<(f64, f64)> = (0..cases).map(|_| (rng.random::<f64>() * 5.0, rng.random::<f64>() * 5.0)).collect();
    let cases = points
        .into_par_iter()
        .map(|(a, b)| {
            let fast = marcum_q1(MarcumArgs::new(a, b).expect("non-negative"));
            let slow = marcum_q1_quadrature(a, b);
            ((fast - slow).abs(), format!("a={a:.6} b={b:.6}: series {fast:.12} vs quadrature {slow:.12}"))
        })
        .collect();
    OracleReport::from_cases("marcum_q1", 1e-8, cases)
}

/// Symbol and chain entropy against brute force on random inputs.
pub fn check_entropy(cases: usize, seed: u64) -> OracleReport {
    use crate::metrics::{chain_entropy, stationary_distribution, symbol_entropy, LogBase, SymbolDistribution, TransitionMatrix};
    let mut rng = rng::stream(seed, "oracle", "entropy");
    let simplex = |k: usize, rng: &mut StreamRng| {
        let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let mut out = Vec::with_capacity(2 * cases);
    for i in 0..cases {
        let sizes: Vec<usize> = (0..3).map(|_| rng.random_range(1..=5)).collect();
        let (x, y, z) = (simplex(sizes[0], &mut rng), simplex(sizes[1], &mut rng), simplex(sizes[2], &mut rng));
        let dist = SymbolDistribution::new(x.clone(), y.clone(), z.clone()).expect("normalised axes");
        let d = (symbol_entropy(&dist, 1.0) - symbol_entropy_brute(&x, &y, &z, 1.0)).abs();
        out.push((d, format!("symbol case {i}, axes {sizes:?}")));

        let k = rng.random_range(2..=6);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| simplex(k, &mut rng)).collect();
        let m = TransitionMatrix::new(rows.clone()).expect("stochastic rows");
        let pi = stationary_distribution(&m).expect("positive matrix is irreducible");
        let h = chain_entropy(&m, &pi, LogBase::Two).expect("matching dimensions");
        let d = (h - chain_entropy_brute(&rows, 2.0)).abs();
        out.push((d, format!("chain case {i}, K={k}")));
    }
    OracleReport::from_cases("entropy", 1e-10, out)
}

/// Chi-square weight against the quadrature-normalised gamma form.
pub fn check_chi_square(seed: u64) -> OracleReport {
    use crate::numerics::chi_square_weight;
    let mut rng = rng::stream(seed, "oracle", "chi_square");
    let cases = (0..50)
        .map(|_| {
            let dof = 1.0 + rng.random::<f64>() * 9.0;
            let x = 0.05 + rng.random::<f64>() * 20.0;
            let fast = chi_square_weight(dof, x).expect("dof > 0");
            let slow = chi_square_quadrature(dof, x);
            ((fast - slow).abs() / slow.max(1e-300), format!("dof={dof:.4} x={x:.4}"))
        })
        .collect();
    OracleReport::from_cases("chi_square", 1e-9, cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_gaussian() {
        let f = |x: f64| (-x * x / 2.0).exp();
        let v = adaptive_simpson(&f, -12.0, 12.0, 1e-13);
        assert!((v - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-11);
    }

    #[test]
    fn scaled_i0_known_values() {
        // I0(1) = 1.2660658777520082
        assert!((bessel_i0_scaled_trapezoid(1.0) * 1f64.exp() - 1.2660658777520082).abs() < 1e-14);
        assert_eq!(bessel_i0_scaled_trapezoid(0.0), 1.0);
    }

    #[test]
    fn quadrature_marcum_closed_forms() {
        assert!((marcum_q1_quadrature(2.0, 0.0) - 1.0).abs() < 1e-11);
        assert!((marcum_q1_quadrature(0.0, 1.5) - (-1.125f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn brute_stationary_two_state() {
        let pi = stationary_brute(&[vec![0.9, 0.1], vec![0.5, 0.5]]);
        assert!((pi[0] - 5.0 / 6.0).abs() < 1e-15 && (pi[1] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn tail_sampler_respects_bound_and_mean() {
        let mut rng = rng::stream(3, "oracle", "tail");
        let n = 200_000;
        let z0 = 2.5;
        let draws: Vec<f64> = (0..n).map(|_| truncated_normal_tail(&mut rng, z0)).collect();
        assert!(draws.iter().all(|&z| z >= z0));
        // E[Z | Z > z0] = phi(z0) / (1 - Phi(z0)); 1 - Phi(2.5) = 0.006209665325776132
        let phi = (-z0 * z0 / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let expected = phi / 0.006209665325776132;
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!((mean - expected).abs() < 0.005, "{mean} vs {expected}");
    }
}
