//! Normal distributions truncated to `[0, ∞)`, parameterized by the location
//! `a` and scale `b` of the untruncated parent.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardUniform};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const CF_SWITCH: f64 = 3.0;
const CF_DEPTH: usize = 400;
const PANELS: usize = 6;
const PANEL_NODES: usize = 10;
/// Squared standardized span kept by [`quadrature`]; the discarded tail mass
/// is below `e^{-40}`.
const SPAN_SQ: f64 = 80.0;

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Backward evaluation of Laplace's continued fraction for the Mills ratio,
/// `Q(x)/φ(x) = 1/(x + 1/(x + 2/(x + 3/(x + ...))))`. Returns `(t1, t2)` with
/// `Q/φ = 1/(x + 1/t1)` and `t1 = x + 2/t2`.
fn mills_tail_terms(x: f64) -> (f64, f64) {
    let mut t = x;
    for k in (3..=CF_DEPTH).rev() {
        t = x + k as f64 / t;
    }
    let t2 = t;
    let t1 = x + 2.0 / t2;
    (t1, t2)
}

/// `ln Q(x)` where `Q = 1 - Φ` is the standard normal survival function.
pub fn ln_survival(x: f64) -> f64 {
    if x < CF_SWITCH {
        (0.5 * erfc(x / std::f64::consts::SQRT_2)).ln()
    } else {
        let (t1, _) = mills_tail_terms(x);
        -0.5 * x * x - LN_SQRT_2PI - (x + 1.0 / t1).ln()
    }
}

/// Mean and variance of the parent `N(a, b²)` truncated to `[0, ∞)`.
pub fn moments(location: f64, scale: f64) -> (f64, f64) {
    let alpha = -location / scale;
    if alpha < CF_SWITCH {
        let q = 0.5 * erfc(alpha / std::f64::consts::SQRT_2);
        let hazard = std_normal_pdf(alpha) / q;
        let mean = location + scale * hazard;
        let var_ratio = (1.0 + alpha * hazard - hazard * hazard).max(0.0);
        (mean.max(0.0), scale * scale * var_ratio)
    } else {
        // hazard = alpha + u with u = 1/t1, evaluated without cancellation.
        let (t1, t2) = mills_tail_terms(alpha);
        let u = 1.0 / t1;
        let mean = scale * u;
        let var_ratio = (2.0 / (alpha * t2 + 2.0) - u * u).max(0.0);
        (mean, scale * scale * var_ratio)
    }
}

/// `KL(q || p)` between two truncated normals on the same support.
pub fn kl_divergence(q: (f64, f64), p: (f64, f64)) -> f64 {
    let (qa, qb) = q;
    let (pa, pb) = p;
    let (mean, var) = moments(qa, qb);
    let second_q = var + (mean - qa).powi(2);
    let second_p = var + (mean - pa).powi(2);
    let ln_z_q = ln_survival(-qa / qb);
    let ln_z_p = ln_survival(-pa / pb);
    let e_log_q = -second_q / (2.0 * qb * qb) - qb.ln() - LN_SQRT_2PI - ln_z_q;
    let e_log_p = -second_p / (2.0 * pb * pb) - pb.ln() - LN_SQRT_2PI - ln_z_p;
    (e_log_q - e_log_p).max(0.0)
}

/// One draw from the truncated normal. Uses inversion away from the tail and
/// Robert's exponential rejection sampler deep in it.
pub fn sample<R: Rng + ?Sized>(location: f64, scale: f64, rng: &mut R) -> f64 {
    let alpha = -location / scale;
    if alpha < 5.0 {
        let q = 0.5 * erfc(alpha / std::f64::consts::SQRT_2);
        let u: f64 = StandardUniform.sample(rng);
        // Survival-side inversion keeps precision when q is small.
        let v = (u * q).max(f64::MIN_POSITIVE);
        let z = -Normal::standard().inverse_cdf(v);
        (location + scale * z).max(0.0)
    } else {
        let rate = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
        let exp = Exp::new(rate).expect("positive rate");
        loop {
            let z = alpha + exp.sample(rng);
            let u: f64 = StandardUniform.sample(rng);
            if u <= (-0.5 * (z - rate).powi(2)).exp() {
                return (location + scale * z).max(0.0);
            }
        }
    }
}

/// Parent location whose truncation has the requested mean, at fixed scale.
pub fn location_for_mean(target_mean: f64, scale: f64) -> f64 {
    // For wide parents the location sits near −scale²/mean, far below the mean.
    let mut lo = target_mean - scale;
    while moments(lo, scale).0 >= target_mean {
        lo = target_mean - 2.0 * (target_mean - lo);
    }
    let mut hi = target_mean;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if moments(mid, scale).0 < target_mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `ln σ(x)` for the logistic function σ.
pub fn ln_logistic(x: f64) -> f64 {
    if x > 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Slope `√(π/8)` at which the probit curve `Φ(κx)` matches `σ` at zero.
pub const PROBIT_SLOPE: f64 = 0.626_657_068_657_750_1;

/// Smooth stand-in for `ln σ(x)` whose slope is `Φ(−κx)` with
/// `κ =` [`PROBIT_SLOPE`]: `ℓ(x) = x Φ(−κx) − φ(κx)/κ`.
pub fn ln_logistic_probit(x: f64) -> f64 {
    gaussian_ln_logistic(x, 0.0).0
}

/// `E[ℓ(s)]` for `s ~ N(mean, var)` with `ℓ` from [`ln_logistic_probit`],
/// together with its derivatives in `mean` and `var`. Smoothing by the normal
/// only flattens the probit slope, so the expectation is exact in closed form.
pub fn gaussian_ln_logistic(mean: f64, var: f64) -> (f64, f64, f64) {
    let k = PROBIT_SLOPE / (1.0 + PROBIT_SLOPE * PROBIT_SLOPE * var).sqrt();
    let t = k * mean;
    let pdf = std_normal_pdf(t);
    let tail = 0.5 * erfc(t / std::f64::consts::SQRT_2);
    (mean * tail - pdf / k, tail, -0.5 * k * pdf)
}

/// Legendre polynomial `P_n(x)` and its derivative.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    (p1, n as f64 * (x * p1 - p0) / (x * x - 1.0))
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
fn legendre_rule() -> &'static [(f64, f64); PANEL_NODES] {
    static RULE: OnceLock<[(f64, f64); PANEL_NODES]> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = PANEL_NODES;
        let mut rule = [(0.0, 0.0); PANEL_NODES];
        for (i, slot) in rule.iter_mut().enumerate() {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, dp) = legendre(n, x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, dp) = legendre(n, x);
            *slot = (0.5 * (1.0 - x), 1.0 / ((1.0 - x * x) * dp * dp));
        }
        rule
    })
}

/// Nodes and weights (summing to one) for expectations under the truncated
/// normal. `refine` is a `(center, half_width)` window where the integrand
/// bends on a scale finer than the density; it gets panels of its own.
pub fn quadrature(location: f64, scale: f64, refine: Option<(f64, f64)>) -> Vec<(f64, f64)> {
    // Work in t = z − z_lo for the standardized parent z, so that deep
    // truncations never form `location + scale · z` by cancellation.
    let alpha = -location / scale;
    let z_lo = alpha.max(-SPAN_SQ.sqrt());
    let z_hi = (z_lo * z_lo + SPAN_SQ).sqrt();
    let length = if z_lo > 0.0 {
        SPAN_SQ / (z_hi + z_lo)
    } else {
        z_hi - z_lo
    };
    let origin = if z_lo == alpha { 0.0 } else { location + scale * z_lo };
    let panel = length / PANELS as f64;
    let mut edges: Vec<f64> = (0..=PANELS).map(|k| panel * k as f64).collect();
    if let Some((center, half_width)) = refine {
        let (c, h) = ((center - origin) / scale, half_width / scale);
        if h < 4.0 * panel {
            for f in [-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0] {
                let e = c + f * h;
                if e > 0.0 && e < length {
                    edges.push(e);
                }
            }
            edges.sort_by(f64::total_cmp);
        }
    }
    let mut nodes = Vec::with_capacity((edges.len() - 1) * PANEL_NODES);
    let mut total = 0.0;
    for w in edges.windows(2) {
        let width = w[1] - w[0];
        if width <= 0.0 {
            continue;
        }
        for &(x, wx) in legendre_rule() {
            let t = w[0] + width * x;
            let weight = wx * width * (-z_lo * t - 0.5 * t * t).exp();
            nodes.push((origin + scale * t, weight));
            total += weight;
        }
    }
    for node in &mut nodes {
        node.1 /= total;
    }
    nodes
}
