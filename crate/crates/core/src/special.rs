//! Normal and gamma distribution primitives.
//!
//! `erfc` comes from `libm` and the regularized incomplete gamma function from
//! `statrs`; quantiles are obtained by safeguarded Newton iterations on top of
//! them so that the inversion accuracy is under our control.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

pub const SQRT_2PI: f64 = 2.506_628_274_631_000_5;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, accurate in both tails.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse of the standard normal CDF.
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    // one Newton polish on whichever tail is better conditioned
    for _ in 0..2 {
        let pdf = norm_pdf(x);
        if pdf <= 0.0 {
            break;
        }
        let step = if x < 0.0 {
            (norm_cdf(x) - p) / pdf
        } else {
            (norm_cdf(-x) - (1.0 - p)) / -pdf
        };
        x -= step;
    }
    x
}

/// Two-sided critical value `z_{1-alpha/2}`.
pub fn z_crit(alpha: f64) -> f64 {
    -norm_quantile(alpha / 2.0)
}

/// Log of `erfcx(x) = exp(x^2) erfc(x)`, evaluated without overflow.
///
/// The scaled complementary error function `q(x) = 2 exp(x^2) Phi(-x sqrt 2)`
/// used by the soft-threshold posterior equals `erfcx(x)`.
pub fn ln_erfcx(x: f64) -> f64 {
    if x < 25.0 {
        x * x + erfc(x).ln()
    } else {
        erfcx_large(x).ln()
    }
}

fn erfcx_large(x: f64) -> f64 {
    // Lentz evaluation of erfcx(x) = (1/sqrt(pi)) / (x + 1/2/(x + 1/(x + 3/2/(x + ...))))
    let mut f = x;
    for k in (1..=60).rev() {
        f = x + (k as f64 / 2.0) / f;
    }
    1.0 / (std::f64::consts::PI.sqrt() * f)
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        gamma_ur(a, x)
    }
}

fn ln_gamma_pdf_unit(a: f64, x: f64) -> f64 {
    (a - 1.0) * x.ln() - x - ln_gamma(a)
}

/// Quantile of the gamma distribution with the given shape and scale.
pub fn gamma_quantile(p: f64, shape: f64, scale: f64) -> f64 {
    assert!(shape > 0.0 && scale > 0.0, "gamma parameters must be positive");
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    scale * unit_gamma_quantile(p, shape)
}

fn unit_gamma_quantile(p: f64, a: f64) -> f64 {
    // bracket
    let mut lo = 0.0_f64;
    let mut hi = a.max(1.0);
    while gamma_p(a, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    // Wilson-Hilferty starting value, clamped into the bracket
    let z = norm_quantile(p);
    let wh = a * (1.0 - 1.0 / (9.0 * a) + z / (3.0 * a.sqrt())).powi(3);
    let mut x = if wh > lo && wh < hi { wh } else { 0.5 * (lo + hi) };
    let upper_tail = p > 0.5;
    let q = 1.0 - p;
    for _ in 0..200 {
        let resid = if upper_tail {
            q - gamma_q(a, x)
        } else {
            gamma_p(a, x) - p
        };
        if resid > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dens = ln_gamma_pdf_unit(a, x).exp();
        let mut next = if dens > 0.0 && dens.is_finite() {
            x - resid / dens
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let done = (next - x).abs() <= 1e-15 * x.max(1e-300) || hi - lo <= 1e-15 * hi;
        x = next;
        if done {
            break;
        }
    }
    x
}

/// Poisson probability mass function.
pub fn poisson_pmf(y: u32, rate: f64) -> f64 {
    if rate <= 0.0 {
        return if y == 0 { 1.0 } else { 0.0 };
    }
    let yf = y as f64;
    (yf * rate.ln() - rate - ln_gamma(yf + 1.0)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normal_quantile_roundtrip() {
        for &p in &[1e-12, 1e-6, 0.025, 0.3, 0.5, 0.8, 0.975, 1.0 - 1e-9] {
            let x = norm_quantile(p);
            assert_abs_diff_eq!(norm_cdf(x), p, epsilon = 1e-14_f64.max(p * 1e-12));
        }
        assert_abs_diff_eq!(z_crit(0.05), 1.959_963_984_540_054, epsilon = 1e-13);
    }

    #[test]
    fn erfcx_matches_direct_formula() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.0, 3.9, 4.1, 7.0, 20.0] {
            let direct = (x * x) + erfc(x).ln();
            let got = ln_erfcx(x);
            assert_abs_diff_eq!(got, direct, epsilon = 1e-12);
        }
        // continued fraction agrees with erfc just above the switch point
        let x: f64 = 25.5;
        assert_abs_diff_eq!(erfcx_large(x).ln(), x * x + erfc(x).ln(), epsilon = 1e-12);
        // no overflow far in the tail
        assert!(ln_erfcx(1e6).is_finite());
    }

    #[test]
    fn gamma_quantile_inverts_cdf() {
        for &a in &[0.3, 1.0, 2.5, 10.0, 31.0] {
            for &p in &[1e-6, 0.025, 0.5, 0.975, 0.999] {
                let x = gamma_quantile(p, a, 1.0);
                assert_abs_diff_eq!(gamma_p(a, x), p, epsilon = 1e-12);
            }
        }
        // exponential closed form
        let x = gamma_quantile(0.999, 1.0, 0.3);
        assert_abs_diff_eq!(x, -0.3 * (0.001_f64).ln(), epsilon = 1e-10);
    }

    #[test]
    fn poisson_pmf_sums_to_one() {
        let s: f64 = (0..200).map(|y| poisson_pmf(y, 7.5)).sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-13);
    }
}
