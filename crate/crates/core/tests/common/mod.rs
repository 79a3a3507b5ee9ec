//! Shared helpers for integration tests: a numerical-integration oracle for
//! the subsampled Gaussian RDP and small fixture builders.
#![allow(dead_code)]

use idp_core::calibration::{PrivacyGroup, PrivacySpec};

/// 15-point Kronrod nodes/weights on [-1, 1] (non-negative half) with the
/// embedded 7-point Gauss weights.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (whole, err) = gk15(f, a, b);
    assert!(whole.is_finite() && err.is_finite(), "non-finite integrand on [{a}, {b}]");
    // Below ~100 ulp of the panel value the error estimate is round-off.
    if err <= tol || err <= 100.0 * f64::EPSILON * whole.abs() || depth == 0 {
        return whole;
    }
    let m = 0.5 * (a + b);
    adaptive(f, a, m, 0.5 * tol, depth - 1) + adaptive(f, m, b, 0.5 * tol, depth - 1)
}

/// Adaptive Gauss–Kronrod over [a, b], pre-split into `pieces` panels.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, pieces: usize, abs_tol: f64) -> f64 {
    let w = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let lo = a + i as f64 * w;
            adaptive(f, lo, lo + w, abs_tol / pieces as f64, 30)
        })
        .sum()
}

/// Order-α Rényi divergence of the Poisson-subsampled Gaussian mixture
/// (1−q)N(0,σ²) + qN(1,σ²) from N(0,σ²), by direct one-dimensional
/// integration of E_{N(0,σ²)}[(1 − q + q·L(x))^α], L the likelihood ratio.
pub fn rdp_sgm_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    // u = q·(L − 1); E[u] = 0 under N(0, σ²).
    let u_of = move |x: f64| q * ((2.0 * x - 1.0) / (2.0 * s2)).exp_m1();
    let log_p0 = move |x: f64| log_norm - x * x / (2.0 * s2);
    let (a, b) = (-40.0 * sigma - 1.0, alpha + 40.0 * sigma + 1.0);
    let pieces = 400;

    let peak = (0..=4000)
        .map(|i| a + (b - a) * i as f64 / 4000.0)
        .map(|x| log_p0(x) + alpha * u_of(x).ln_1p())
        .fold(f64::NEG_INFINITY, f64::max);

    if peak < 30.0 {
        // E[(1+u)^α] − 1 = E[(1+u)^α − 1 − αu]; the integrand is
        // non-negative by convexity, so panels do not cancel.
        let f = move |x: f64| {
            let u = u_of(x);
            if u.abs() < 0.5 {
                log_p0(x).exp() * convex_excess(u, alpha)
            } else {
                (log_p0(x) + alpha * u.ln_1p()).exp() - log_p0(x).exp() * (1.0 + alpha * u)
            }
        };
        let rough = integrate(&f, a, b, pieces, f64::INFINITY);
        let excess = integrate(&f, a, b, pieces, 1e-13 * rough);
        excess.ln_1p() / (alpha - 1.0)
    } else {
        let f = move |x: f64| (log_p0(x) + alpha * u_of(x).ln_1p() - peak).exp();
        let rough = integrate(&f, a, b, pieces, f64::INFINITY);
        let scaled = integrate(&f, a, b, pieces, 1e-13 * rough);
        (scaled.ln() + peak) / (alpha - 1.0)
    }
}

/// (1 + u)^α − 1 − αu by its binomial series (|u| < 1).
fn convex_excess(u: f64, alpha: f64) -> f64 {
    let mut term = alpha * u;
    let mut sum = 0.0;
    for k in 2..400 {
        term *= (alpha - (k - 1) as f64) * u / k as f64;
        sum += term;
        if term.abs() <= 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

/// Group sizes by floor(p·N), remainder to the largest proportion.
pub fn split_sizes(n: u64, proportions: &[f64]) -> Vec<u64> {
    let mut sizes: Vec<u64> = proportions
        .iter()
        .map(|p| (p * n as f64 + 1e-9).floor() as u64)
        .collect();
    let rest = n - sizes.iter().sum::<u64>();
    let largest = proportions
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    sizes[largest] += rest;
    sizes
}

/// Three groups at 34%/43%/23% of `n` with budgets ε = 1, 2, 3.
pub fn three_group_spec(n: u64, delta: f64) -> PrivacySpec {
    let sizes = split_sizes(n, &[0.34, 0.43, 0.23]);
    PrivacySpec::new(
        vec![
            PrivacyGroup::new("eps1", sizes[0], 1.0),
            PrivacyGroup::new("eps2", sizes[1], 2.0),
            PrivacyGroup::new("eps3", sizes[2], 3.0),
        ],
        delta,
    )
    .unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
