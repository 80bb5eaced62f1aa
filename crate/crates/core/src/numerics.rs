//! Special functions used by the link and metric models.
//!
//! Everything here is a pure function of its arguments. The implementations
//! favour positive-term series and continued fractions so that accuracy holds
//! in the tails, where the link-lifetime conditioning lives.

use std::f64::consts::{FRAC_2_SQRT_PI, PI};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("log-normal sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("log-normal mu must be finite, got {0}")]
    InvalidMu(f64),
    #[error("Marcum-Q arguments must be finite and non-negative, got a={a}, b={b}")]
    InvalidMarcumArgs { a: f64, b: f64 },
    #[error("log-normal mean overflows: mu + sigma^2/2 = {0}")]
    Overflow(f64),
    #[error("chi-square degrees of freedom must be positive and finite, got {0}")]
    InvalidDof(f64),
    #[error("chi-square argument must be non-negative, got {0}")]
    NegativeArgument(f64),
}

/// Location/shape pair of a log-normal link duration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogNormalParams {
    mu: f64,
    sigma: f64,
}

impl LogNormalParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self, NumericsError> {
        if !mu.is_finite() {
            return Err(NumericsError::InvalidMu(mu));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(NumericsError::InvalidSigma(sigma));
        }
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `exp(mu)`, the median of the distribution.
    pub fn median(&self) -> f64 {
        self.mu.exp()
    }
}

/// Arguments `(a, b)` of the first-order Marcum-Q function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarcumArgs {
    a: f64,
    b: f64,
}

impl MarcumArgs {
    pub fn new(a: f64, b: f64) -> Result<Self, NumericsError> {
        if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return Err(NumericsError::InvalidMarcumArgs { a, b });
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

// Below this the positive-term series for erf is used, above it the
// continued fraction for erfc.
const ERF_SERIES_LIMIT: f64 = 3.0;
const ERFC_CF_START: f64 = 2.0;

/// Error function.
///
/// Uses `erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_n 2^n x^(2n+1) / (2n+1)!!`,
/// whose terms are all positive, for `|x| < 3`, and `1 - erfc(x)` from the
/// continued fraction beyond that.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return -erf(-x);
    }
    if x < ERF_SERIES_LIMIT {
        erf_series(x)
    } else {
        1.0 - erfc_continued_fraction(x)
    }
}

/// Complementary error function, accurate in relative terms deep into the
/// upper tail (until `exp(-x^2)` underflows).
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < ERFC_CF_START {
        1.0 - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-x2).exp() * sum
}

// erfc(x) = exp(-x^2)/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))),
// evaluated with the modified Lentz method.
fn erfc_continued_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for n in 1..5000 {
        let a = n as f64 * 0.5;
        d = x + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (PI.sqrt() * f)
}

/// Exponentially scaled modified Bessel functions `exp(-x) I_k(x)` for
/// `k = 0..=order`, by Miller's backward recurrence normalised with
/// `exp(-x) (I_0 + 2 sum_k I_k) = 1`.
pub fn bessel_i_scaled(x: f64, order: usize) -> Vec<f64> {
    let mut out = vec![0.0; order + 1];
    if x == 0.0 {
        out[0] = 1.0;
        return out;
    }
    if x < 1e-3 {
        // direct power series; two terms are already below f64 resolution
        let scale = (-x).exp();
        let half = 0.5 * x;
        let mut lead = 1.0; // (x/2)^k / k!
        for (k, slot) in out.iter_mut().enumerate() {
            if k > 0 {
                lead *= half / k as f64;
            }
            *slot = scale * lead * (1.0 + half * half / (k as f64 + 1.0));
        }
        return out;
    }
    // Start well beyond both the requested order and the bulk of the
    // distribution of I_k(x) over k.
    let start = order.max(x.ceil() as usize) + (10.0 * x.sqrt()).ceil() as usize + 40;
    let mut above = 0.0_f64;
    let mut current = 1e-280_f64;
    let mut norm = 0.0;
    for k in (1..=start).rev() {
        let below = (2.0 * k as f64 / x) * current + above;
        above = current;
        current = below;
        // `above` is now I_k, `current` I_{k-1} (unnormalised)
        if k <= order {
            out[k] = above;
        }
        norm += 2.0 * above;
        if current > 1e250 {
            let scale = 1e-250;
            current *= scale;
            above *= scale;
            norm *= scale;
            for v in out.iter_mut() {
                *v *= scale;
            }
        }
    }
    out[0] = current;
    norm += current;
    for v in out.iter_mut() {
        *v /= norm;
    }
    out
}

/// First-order Marcum-Q function `Q_1(a, b)`.
///
/// Series in scaled modified Bessel functions:
/// for `a < b`, `Q = exp(-(a-b)^2/2) * sum_{k>=0} (a/b)^k e^{-ab} I_k(ab)`;
/// otherwise `Q = 1 - exp(-(a-b)^2/2) * sum_{k>=1} (b/a)^k e^{-ab} I_k(ab)`.
/// Summation stops once a term falls below `1e-15` of the running sum.
pub fn marcum_q1(args: MarcumArgs) -> f64 {
    let MarcumArgs { a, b } = args;
    if b == 0.0 {
        return 1.0;
    }
    if a == 0.0 {
        return (-0.5 * b * b).exp();
    }
    let x = a * b;
    let prefactor = (-0.5 * (a - b) * (a - b)).exp();
    if prefactor == 0.0 {
        return if a < b { 0.0 } else { 1.0 };
    }
    let (ratio, first) = if a < b { (a / b, 0) } else { (b / a, 1) };

    let mut order = (x + 10.0 * x.sqrt()).ceil() as usize + 40;
    loop {
        let bessel = bessel_i_scaled(x, order);
        let mut sum = 0.0;
        let mut weight = ratio.powi(first as i32);
        let mut converged = false;
        for (k, &ik) in bessel.iter().enumerate().skip(first) {
            let term = weight * ik;
            sum += term;
            weight *= ratio;
            if k > x.ceil() as usize && term <= 1e-15 * sum {
                converged = true;
                break;
            }
        }
        if converged || order > 100_000 {
            let q = if a < b {
                prefactor * sum
            } else {
                1.0 - prefactor * sum
            };
            return q.clamp(0.0, 1.0);
        }
        order *= 2;
    }
}

/// Mean of a log-normal distribution, `exp(mu + sigma^2 / 2)`.
pub fn lognormal_mean(p: LogNormalParams) -> Result<f64, NumericsError> {
    let exponent = p.mu + 0.5 * p.sigma * p.sigma;
    if exponent > f64::MAX.ln() {
        return Err(NumericsError::Overflow(exponent));
    }
    Ok(exponent.exp())
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Chi-square probability density with `dof` degrees of freedom at `x`.
///
/// At `x = 0` the density is `+inf` for `dof < 2`, `1/2` for `dof = 2` and
/// `0` above.
pub fn chi_square_weight(dof: f64, x: f64) -> Result<f64, NumericsError> {
    if !(dof > 0.0 && dof.is_finite()) {
        return Err(NumericsError::InvalidDof(dof));
    }
    if !(x >= 0.0) {
        return Err(NumericsError::NegativeArgument(x));
    }
    let half = 0.5 * dof;
    if x == 0.0 {
        return Ok(match half.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Less) => f64::INFINITY,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        });
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    let ln_density = (half - 1.0) * x.ln() - 0.5 * x - half * std::f64::consts::LN_2 - ln_gamma(half);
    Ok(ln_density.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Alternating Maclaurin series, 30 terms.
    fn erf_taylor(x: f64) -> f64 {
        let mut sum = 0.0;
        let mut power = x;
        let mut factorial = 1.0;
        for n in 0..30 {
            if n > 0 {
                factorial *= n as f64;
                power *= x * x;
            }
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * power / (factorial * (2 * n + 1) as f64);
        }
        FRAC_2_SQRT_PI * sum
    }

    #[test]
    fn erf_basic_values() {
        assert_eq!(erf(0.0), 0.0);
        assert_eq!(erf(0.7), -erf(-0.7));
        assert!((erf(1.0) - erf_taylor(1.0)).abs() < 1e-12);
        assert!((erf(0.3) - erf_taylor(0.3)).abs() < 1e-14);
    }

    #[test]
    fn erf_matches_reference_values() {
        // Reference digits from high-precision tables.
        let cases = [
            (0.5, 0.520_499_877_813_046_5),
            (1.5, 0.966_105_146_475_310_7),
            (2.5, 0.999_593_047_982_555),
            (3.5, 0.999_999_256_901_627_7),
        ];
        for (x, want) in cases {
            assert!((erf(x) - want).abs() < 1e-14, "erf({x})");
        }
    }

    #[test]
    fn erfc_tail_is_relatively_accurate() {
        // erfc(5) = 1.5374597944280348e-12, erfc(10) = 2.088487583762545e-45
        assert_relative_eq!(erfc(5.0), 1.537_459_794_428_034_8e-12, max_relative = 1e-13);
        assert_relative_eq!(erfc(10.0), 2.088_487_583_762_545e-45, max_relative = 1e-13);
        assert_relative_eq!(erfc(2.0), 4.677_734_981_047_266e-3, max_relative = 1e-13);
        assert_relative_eq!(erfc(-1.0), 2.0 - erfc(1.0), max_relative = 1e-15);
    }

    #[test]
    fn erf_is_continuous_across_method_switch() {
        for &edge in &[ERFC_CF_START, ERF_SERIES_LIMIT] {
            let lo = erfc(edge - 1e-12);
            let hi = erfc(edge + 1e-12);
            assert_relative_eq!(lo, hi, max_relative = 1e-10);
        }
    }

    #[test]
    fn marcum_closed_forms() {
        let q = marcum_q1(MarcumArgs::new(2.0, 0.0).unwrap());
        assert_eq!(q, 1.0);
        let q = marcum_q1(MarcumArgs::new(0.0, 1.5).unwrap());
        assert_relative_eq!(q, (-1.5f64 * 1.5 / 2.0).exp(), max_relative = 1e-15);
    }

    #[test]
    fn marcum_equal_arguments_identity() {
        // Q1(a, a) = (1 + exp(-a^2) I_0(a^2)) / 2
        for a in [0.5, 1.0, 2.0, 4.0] {
            let i0 = bessel_i_scaled(a * a, 0)[0];
            let want = 0.5 * (1.0 + i0);
            let got = marcum_q1(MarcumArgs::new(a, a).unwrap());
            assert_relative_eq!(got, want, max_relative = 1e-13);
        }
    }

    #[test]
    fn marcum_rejects_negative_arguments() {
        assert!(MarcumArgs::new(-1.0, 1.0).is_err());
        assert!(MarcumArgs::new(1.0, f64::NAN).is_err());
    }

    #[test]
    fn scaled_bessel_matches_series() {
        // I_0(1) = 1.2660658777520082, I_1(1) = 0.5651591039924851
        let v = bessel_i_scaled(1.0, 3);
        assert_relative_eq!(v[0], 1.266_065_877_752_008_2 * (-1.0f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(v[1], 0.565_159_103_992_485_1 * (-1.0f64).exp(), max_relative = 1e-14);
        // large argument stays finite and normalised
        let v = bessel_i_scaled(400.0, 2);
        assert!(v[0] > 0.0 && v[0] < 1.0);
    }

    #[test]
    fn lognormal_mean_values() {
        let p = LogNormalParams::new(0.0, 1e-9).unwrap();
        assert_relative_eq!(lognormal_mean(p).unwrap(), 1.0, max_relative = 1e-15);
        let p = LogNormalParams::new(2.0, 1e-9).unwrap();
        assert_relative_eq!(lognormal_mean(p).unwrap(), 2.0f64.exp(), max_relative = 1e-15);
        let p = LogNormalParams::new(709.0, 2.0).unwrap();
        assert!(matches!(lognormal_mean(p), Err(NumericsError::Overflow(_))));
    }

    #[test]
    fn lognormal_mean_monte_carlo() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let p = LogNormalParams::new(1.0, 0.5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = (1.0 + 0.5 * z).exp();
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - lognormal_mean(p).unwrap()).abs() < 3.0 * se);
    }

    #[test]
    fn lognormal_params_validation() {
        assert!(LogNormalParams::new(0.0, 0.0).is_err());
        assert!(LogNormalParams::new(f64::INFINITY, 1.0).is_err());
        assert!(LogNormalParams::new(0.0, -1.0).is_err());
    }

    #[test]
    fn chi_square_closed_forms() {
        assert_eq!(chi_square_weight(2.0, 0.0).unwrap(), 0.5);
        assert_relative_eq!(chi_square_weight(2.0, 1.0).unwrap(), 0.5 * (-0.5f64).exp(), max_relative = 1e-13);
        assert!(chi_square_weight(0.0, 1.0).is_err());
        assert!(chi_square_weight(-2.0, 1.0).is_err());
        assert!(chi_square_weight(2.0, -1.0).is_err());
        assert_eq!(chi_square_weight(4.0, 0.0).unwrap(), 0.0);
        assert!(chi_square_weight(1.0, 0.0).unwrap().is_infinite());
    }

    #[test]
    fn ln_gamma_known_values() {
        assert_relative_eq!(ln_gamma(1.0), 0.0, epsilon = 1e-14);
        assert_relative_eq!(ln_gamma(0.5), PI.sqrt().ln(), max_relative = 1e-13);
        assert_relative_eq!(ln_gamma(10.0), 362_880.0f64.ln(), max_relative = 1e-13);
    }

    proptest! {
        #[test]
        fn erf_is_odd_and_bounded(x in -40.0f64..40.0) {
            let v = erf(x);
            prop_assert!(v.abs() <= 1.0);
            prop_assert!((v + erf(-x)).abs() <= 1e-14);
        }

        #[test]
        fn erf_is_monotone(x in -6.0f64..6.0, dx in 1e-6f64..1.0) {
            prop_assert!(erf(x + dx) >= erf(x));
        }

        #[test]
        fn marcum_monotone_in_both_arguments(a in 0.0f64..6.0, b in 0.0f64..6.0, d in 1e-3f64..1.0) {
            let q = marcum_q1(MarcumArgs::new(a, b).unwrap());
            prop_assert!((0.0..=1.0).contains(&q));
            let q_b = marcum_q1(MarcumArgs::new(a, b + d).unwrap());
            let q_a = marcum_q1(MarcumArgs::new(a + d, b).unwrap());
            prop_assert!(q_b <= q + 1e-14);
            prop_assert!(q_a >= q - 1e-14);
        }

        #[test]
        fn lognormal_mean_increasing(mu in -5.0f64..5.0, sigma in 0.01f64..3.0, d in 1e-3f64..1.0) {
            let base = lognormal_mean(LogNormalParams::new(mu, sigma).unwrap()).unwrap();
            let up_mu = lognormal_mean(LogNormalParams::new(mu + d, sigma).unwrap()).unwrap();
            let up_sigma = lognormal_mean(LogNormalParams::new(mu, sigma + d).unwrap()).unwrap();
            prop_assert!(up_mu > base);
            prop_assert!(up_sigma > base);
        }
    }
}
