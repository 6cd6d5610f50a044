//! Bayesian linear regression with a full-covariance coefficient prior.
//!
//! ```text
//! y | β, φ  ~ N(Xβ, φ⁻¹ I)          φ = σ_noise⁻²
//! β | φ, ψ  ~ N(0, (φψ)⁻¹ C)         ψ = τ⁻²
//! φ ~ Gamma(a_φ, b_φ),  ψ ~ Gamma(a_ψ, b_ψ)
//! ```
//!
//! The posterior is approximated by `q(β) q(φ) q(ψ)` with coordinate ascent.
//! Internally `β = L u` with `C = L Lᵀ`, which whitens the prior; a single thin
//! SVD of `X L` then diagonalizes every `q(u)` update.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::corpus::ByteReader;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const POSTERIOR_MAGIC: &[u8; 4] = b"PLRP";
const POSTERIOR_VERSION: u32 = 1;

/// Slack on ELBO decreases, relative to the ELBO magnitude (floored at 1).
pub const ELBO_SLACK: f64 = 1e-8;

/// Prior covariance of the coefficients before scaling by `σ_noise² τ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorCovariance {
    /// Unjittered matrix.
    pub matrix: DMatrix<f64>,
    pub kernel_bandwidth: f64,
    /// Added to the diagonal before factorization.
    pub jitter: f64,
}

impl PriorCovariance {
    /// Uses the default jitter `1e-8 · trace(C) / D`.
    pub fn new(matrix: DMatrix<f64>, kernel_bandwidth: f64) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        let d = matrix.nrows().max(1);
        let jitter = 1e-8 * matrix.trace() / d as f64;
        Ok(Self {
            matrix,
            kernel_bandwidth,
            jitter,
        })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            matrix: DMatrix::identity(d, d),
            kernel_bandwidth: f64::INFINITY,
            jitter: 0.0,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn jittered(&self) -> DMatrix<f64> {
        let mut m = self.matrix.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += self.jitter;
        }
        m
    }
}

/// Prior on a precision parameter. `Pinned` is the infinite-shape limit at a
/// fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionPrior {
    Gamma { shape: f64, rate: f64 },
    Pinned(f64),
}

impl PrecisionPrior {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            PrecisionPrior::Gamma { shape, rate } => shape > 0.0 && rate > 0.0,
            PrecisionPrior::Pinned(v) => v > 0.0 && v.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{name} prior parameters must be positive"
            )))
        }
    }
}

/// Gamma priors on `τ⁻²` and `σ_noise⁻²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperPriors {
    pub tau: PrecisionPrior,
    pub noise: PrecisionPrior,
}

impl Default for HyperPriors {
    fn default() -> Self {
        Self {
            tau: PrecisionPrior::Gamma {
                shape: 1e-3,
                rate: 1e-3,
            },
            noise: PrecisionPrior::Gamma {
                shape: 1e-3,
                rate: 1e-3,
            },
        }
    }
}

impl HyperPriors {
    /// Fixes `τ²` and `σ_noise²`.
    pub fn pinned(tau2: f64, noise2: f64) -> Self {
        Self {
            tau: PrecisionPrior::Pinned(1.0 / tau2),
            noise: PrecisionPrior::Pinned(1.0 / noise2),
        }
    }
}

/// Variational factor of a precision parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionPosterior {
    Gamma { shape: f64, rate: f64 },
    Pinned(f64),
}

impl PrecisionPosterior {
    pub fn mean(&self) -> f64 {
        match *self {
            PrecisionPosterior::Gamma { shape, rate } => shape / rate,
            PrecisionPosterior::Pinned(v) => v,
        }
    }

    fn mean_log(&self) -> f64 {
        match *self {
            PrecisionPosterior::Gamma { shape, rate } => digamma(shape) - rate.ln(),
            PrecisionPosterior::Pinned(v) => v.ln(),
        }
    }

    /// `E_q[ln p(θ)] + H[q]`; zero for pinned parameters.
    fn prior_plus_entropy(&self, prior: &PrecisionPrior) -> f64 {
        match (*self, *prior) {
            (PrecisionPosterior::Gamma { shape, rate }, PrecisionPrior::Gamma { shape: a0, rate: b0 }) => {
                let e = shape / rate;
                let elog = digamma(shape) - rate.ln();
                let expected_log_prior = a0 * b0.ln() - ln_gamma(a0) + (a0 - 1.0) * elog - b0 * e;
                let entropy = shape - rate.ln() + ln_gamma(shape) + (1.0 - shape) * digamma(shape);
                expected_log_prior + entropy
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Relative ELBO change that counts as converged.
    pub tol: f64,
    pub max_iters: usize,
    /// Center `y` and the columns of `X`; the means return as an intercept.
    pub center: bool,
    /// Materialize the `D × D` posterior covariance of β.
    pub covariance: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 500,
            center: true,
            covariance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionPosterior {
    pub beta_mean: DVector<f64>,
    pub beta_cov: Option<DMatrix<f64>>,
    pub tau2_inv: PrecisionPosterior,
    pub noise2_inv: PrecisionPosterior,
    pub intercept: f64,
    pub elbo_trace: Vec<f64>,
}

impl RegressionPosterior {
    pub fn n_features(&self) -> usize {
        self.beta_mean.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.beta_mean.len();
        let mut out = Vec::new();
        out.extend_from_slice(POSTERIOR_MAGIC);
        out.extend_from_slice(&POSTERIOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&u32::from(self.beta_cov.is_some()).to_le_bytes());
        out.extend_from_slice(&self.intercept.to_le_bytes());
        for v in self.beta_mean.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(cov) = &self.beta_cov {
            for r in 0..d {
                for c in 0..d {
                    out.extend_from_slice(&cov[(r, c)].to_le_bytes());
                }
            }
        }
        for p in [self.tau2_inv, self.noise2_inv] {
            let (tag, a, b) = match p {
                PrecisionPosterior::Gamma { shape, rate } => (0u32, shape, rate),
                PrecisionPosterior::Pinned(v) => (1u32, v, 0.0),
            };
            out.extend_from_slice(&tag.to_le_bytes());
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
        out.extend_from_slice(&(self.elbo_trace.len() as u64).to_le_bytes());
        for v in &self.elbo_trace {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != POSTERIOR_MAGIC {
            return Err(Error::Format("missing PLRP magic".into()));
        }
        let version = r.u32()?;
        if version != POSTERIOR_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let d = r.u64()? as usize;
        let has_cov = r.u32()? != 0;
        let intercept = r.f64()?;
        let beta_mean = DVector::from_vec(r.f64s(d)?);
        let beta_cov = if has_cov {
            let cells = d.checked_mul(d).ok_or_else(|| Error::Format("size overflow".into()))?;
            Some(DMatrix::from_row_slice(d, d, &r.f64s(cells)?))
        } else {
            None
        };
        let mut precision = || -> Result<PrecisionPosterior> {
            let tag = r.u32()?;
            let a = r.f64()?;
            let b = r.f64()?;
            match tag {
                0 => Ok(PrecisionPosterior::Gamma { shape: a, rate: b }),
                1 => Ok(PrecisionPosterior::Pinned(a)),
                t => Err(Error::Format(format!("unknown precision tag {t}"))),
            }
        };
        let tau2_inv = precision()?;
        let noise2_inv = precision()?;
        let len = r.u64()? as usize;
        let elbo_trace = r.f64s(len)?;
        if !r.finished() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(Self {
            beta_mean,
            beta_cov,
            tau2_inv,
            noise2_inv,
            intercept,
            elbo_trace,
        })
    }
}

/// Cholesky factor of the jittered prior covariance, reusable across fits.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    lower: DMatrix<f64>,
}

impl PriorFactor {
    pub fn new(prior: &PriorCovariance) -> Result<Self> {
        let chol = Cholesky::new(prior.jittered()).ok_or(Error::SingularCovariance { jitter: prior.jitter })?;
        let lower = chol.unpack();
        if lower.diagonal().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::SingularCovariance { jitter: prior.jitter });
        }
        Ok(Self { lower })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }
}

pub fn fit_vb(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    prior: &PriorCovariance,
    hypers: &HyperPriors,
    options: &FitOptions,
) -> Result<RegressionPosterior> {
    let factor = PriorFactor::new(prior)?;
    fit_vb_factored(x, y, &factor, hypers, options)
}

/// Spectral state of `q(u)`: the covariance is `V diag(c) Vᵀ + null · (I − V Vᵀ)`.
struct CoefficientFactor {
    /// Posterior mean of `u` in the right-singular basis.
    mean_coords: DVector<f64>,
    var_coords: DVector<f64>,
    null_var: f64,
}

pub fn fit_vb_factored(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    factor: &PriorFactor,
    hypers: &HyperPriors,
    options: &FitOptions,
) -> Result<RegressionPosterior> {
    let (n, d) = x.shape();
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if factor.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: factor.dim(),
        });
    }
    hypers.tau.validate("tau")?;
    hypers.noise.validate("noise")?;

    let (xc, yc, x_mean, y_mean) = if options.center {
        let x_mean = x.row_mean();
        let y_mean = y.mean();
        let xc = DMatrix::from_fn(n, d, |r, c| x[(r, c)] - x_mean[c]);
        let yc = y.map(|v| v - y_mean);
        (xc, yc, Some(x_mean), y_mean)
    } else {
        (x.clone(), y.clone(), None, 0.0)
    };

    let whitened = &xc * &factor.lower;
    let svd = whitened.svd(true, true);
    let w = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V");
    let s = &svd.singular_values;
    let r = s.len();
    let proj_y = w.transpose() * &yc;
    let y_sq = yc.norm_squared();
    let n_f = n as f64;
    let d_f = d as f64;

    let mut tau = match hypers.tau {
        PrecisionPrior::Pinned(v) => PrecisionPosterior::Pinned(v),
        PrecisionPrior::Gamma { .. } => PrecisionPosterior::Gamma { shape: 1.0, rate: 1.0 },
    };
    let mut noise = match hypers.noise {
        PrecisionPrior::Pinned(v) => PrecisionPosterior::Pinned(v),
        PrecisionPrior::Gamma { .. } => {
            let var = y_sq / n_f;
            let precision = if var > 0.0 { 1.0 / var } else { 1.0 };
            PrecisionPosterior::Gamma {
                shape: precision,
                rate: 1.0,
            }
        }
    };

    let mut elbo_trace: Vec<f64> = Vec::new();
    let mut coef = CoefficientFactor {
        mean_coords: DVector::zeros(r),
        var_coords: DVector::zeros(r),
        null_var: 0.0,
    };

    for iteration in 0..options.max_iters.max(1) {
        // q(u)
        let phi = noise.mean();
        let psi = tau.mean();
        coef.mean_coords = DVector::from_fn(r, |l, _| s[l] * proj_y[l] / (s[l] * s[l] + psi));
        coef.var_coords = DVector::from_fn(r, |l, _| 1.0 / (phi * (s[l] * s[l] + psi)));
        coef.null_var = 1.0 / (phi * psi);

        let (residual_sq, u_sq) = expectations(&coef, s, &proj_y, y_sq, d);

        // q(φ)
        if let PrecisionPrior::Gamma { shape, rate } = hypers.noise {
            noise = PrecisionPosterior::Gamma {
                shape: shape + 0.5 * (n_f + d_f),
                rate: rate + 0.5 * residual_sq + 0.5 * tau.mean() * u_sq,
            };
        }
        // q(ψ)
        if let PrecisionPrior::Gamma { shape, rate } = hypers.tau {
            tau = PrecisionPosterior::Gamma {
                shape: shape + 0.5 * d_f,
                rate: rate + 0.5 * noise.mean() * u_sq,
            };
        }

        let elbo = elbo(&coef, s, residual_sq, u_sq, n, d, &noise, &tau, hypers);
        if !elbo.is_finite() {
            return Err(Error::NonFinite(format!("ELBO at iteration {iteration}")));
        }
        if let Some(&previous) = elbo_trace.last() {
            if elbo < previous - ELBO_SLACK * previous.abs().max(1.0) {
                return Err(Error::ElboDecrease {
                    iteration,
                    previous,
                    current: elbo,
                });
            }
            elbo_trace.push(elbo);
            if (elbo - previous).abs() <= options.tol * elbo.abs().max(f64::MIN_POSITIVE) {
                break;
            }
        } else {
            elbo_trace.push(elbo);
        }
    }

    let v = v_t.transpose();
    let u_mean = &v * &coef.mean_coords;
    let beta_mean = &factor.lower * u_mean;
    let beta_cov = options.covariance.then(|| {
        let mut u_cov = DMatrix::from_diagonal_element(d, d, coef.null_var);
        let scaled = DMatrix::from_fn(d, r, |row, l| v[(row, l)] * (coef.var_coords[l] - coef.null_var));
        u_cov += scaled * v_t;
        let cov = &factor.lower * u_cov * factor.lower.transpose();
        // symmetrize round-off
        (&cov + cov.transpose()) * 0.5
    });
    let intercept = match &x_mean {
        Some(mean) => y_mean - mean.iter().zip(beta_mean.iter()).map(|(m, b)| m * b).sum::<f64>(),
        None => 0.0,
    };

    Ok(RegressionPosterior {
        beta_mean,
        beta_cov,
        tau2_inv: tau,
        noise2_inv: noise,
        intercept,
        elbo_trace,
    })
}

/// `E‖y − X̃u‖²` and `E[uᵀu]` under `q(u)`.
fn expectations(coef: &CoefficientFactor, s: &DVector<f64>, proj_y: &DVector<f64>, y_sq: f64, d: usize) -> (f64, f64) {
    let r = s.len();
    let mut residual_sq = y_sq;
    let mut u_sq = coef.null_var * (d - r) as f64;
    for l in 0..r {
        let m = coef.mean_coords[l];
        let fitted = s[l] * m;
        residual_sq += -2.0 * fitted * proj_y[l] + fitted * fitted + s[l] * s[l] * coef.var_coords[l];
        u_sq += m * m + coef.var_coords[l];
    }
    (residual_sq.max(0.0), u_sq)
}

#[allow(clippy::too_many_arguments)]
fn elbo(
    coef: &CoefficientFactor,
    s: &DVector<f64>,
    residual_sq: f64,
    u_sq: f64,
    n: usize,
    d: usize,
    noise: &PrecisionPosterior,
    tau: &PrecisionPosterior,
    hypers: &HyperPriors,
) -> f64 {
    let (n_f, d_f) = (n as f64, d as f64);
    let (e_phi, e_log_phi) = (noise.mean(), noise.mean_log());
    let (e_psi, e_log_psi) = (tau.mean(), tau.mean_log());

    let likelihood = 0.5 * n_f * (e_log_phi - LN_2PI) - 0.5 * e_phi * residual_sq;
    let coef_prior = 0.5 * d_f * (e_log_phi + e_log_psi - LN_2PI) - 0.5 * e_phi * e_psi * u_sq;
    let log_det: f64 = coef.var_coords.iter().map(|v| v.ln()).sum::<f64>() + (d - s.len()) as f64 * coef.null_var.ln();
    let coef_entropy = 0.5 * d_f * (1.0 + LN_2PI) + 0.5 * log_det;

    likelihood
        + coef_prior
        + coef_entropy
        + noise.prior_plus_entropy(&hypers.noise)
        + tau.prior_plus_entropy(&hypers.tau)
}

pub fn predict(posterior: &RegressionPosterior, x_test: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x_test.ncols() != posterior.n_features() {
        return Err(Error::DimensionMismatch {
            expected: posterior.n_features(),
            got: x_test.ncols(),
        });
    }
    Ok(x_test * &posterior.beta_mean + DVector::from_element(x_test.nrows(), posterior.intercept))
}

pub fn mse(predicted: &DVector<f64>, actual: &DVector<f64>) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            expected: actual.len(),
            got: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::InvalidArgument("mse of empty vectors".into()));
    }
    Ok((predicted - actual).norm_squared() / actual.len() as f64)
}
