//! Forward corruption laws y|x and their exponential-family structure.
//!
//! Image intensities live in [0, 1]. Additive families return `x + eps` with
//! zero-mean noise. The Poisson family operates internally on counts
//! `z ~ P(x/gamma)` and exposes image units `y = gamma * z`; the binomial
//! family exposes the success rate `counts / n_trials` so that `E[y|x] = x`
//! holds for every family that admits it.

use crate::samplers::{self, digamma, ln_gamma, trigamma, RngStream};
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Tagged corruption law.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    AdditiveGaussian { sigma: f64 },
    AdditiveLaplace { b: f64 },
    /// eps = sigma_tilde * (ln z - bias), z ~ Gamma(shape ell, rate ell).
    AdditiveLogGamma { ell: f64, sigma: f64 },
    /// eps = k * z with white z ~ N(0, sigma^2) and a spatial kernel.
    CorrelatedGaussian { sigma: f64, kernel: Tensor },
    /// y = gamma * z, z ~ P(x / gamma).
    Poisson { gamma: f64 },
    /// y ~ Gamma(shape ell, scale x / ell).
    Gamma { ell: f64 },
    /// counts ~ Bin(n_trials, x); public y is counts / n_trials.
    Binomial { n_trials: u64 },
    /// y = x .* eps with eps ~ Ber(p0).
    BernoulliMask { p0: f64 },
    /// y = gamma * z_p + z_g, z_p ~ P(x/gamma), z_g ~ N(0, sigma^2).
    PoissonGaussian { gamma: f64, sigma: f64 },
}

/// Normalized 2-D Gaussian kernel with odd extent.
pub fn gaussian_kernel(size: usize, std: f64) -> Tensor {
    assert!(size % 2 == 1, "kernel extent must be odd");
    let half = (size / 2) as isize;
    let mut data = Vec::with_capacity(size * size);
    for u in -half..=half {
        for v in -half..=half {
            let r2 = (u * u + v * v) as f64;
            data.push((-r2 / (2.0 * std * std)).exp());
        }
    }
    let total: f64 = data.iter().sum();
    for d in &mut data {
        *d /= total;
    }
    Tensor::new(vec![1, 1, size, size], data).expect("kernel shape")
}

impl NoiseModel {
    /// Default 3x3 correlated model used by the paper-style experiments.
    pub fn correlated_default(sigma: f64) -> NoiseModel {
        NoiseModel::CorrelatedGaussian {
            sigma,
            kernel: gaussian_kernel(3, 0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Domain(msg));
        match self {
            NoiseModel::AdditiveGaussian { sigma } if *sigma <= 0.0 => {
                bad(format!("sigma must be > 0, got {sigma}"))
            }
            NoiseModel::AdditiveLaplace { b } if *b <= 0.0 => bad(format!("b must be > 0, got {b}")),
            NoiseModel::AdditiveLogGamma { ell, sigma } if *ell <= 0.0 || *sigma <= 0.0 => {
                bad(format!("log-gamma wants ell > 0 and sigma > 0, got ({ell}, {sigma})"))
            }
            NoiseModel::CorrelatedGaussian { sigma, kernel } => {
                if *sigma <= 0.0 {
                    return bad(format!("sigma must be > 0, got {sigma}"));
                }
                let s = kernel.shape();
                if s.len() != 4 || s[2] % 2 == 0 || s[3] % 2 == 0 {
                    return bad(format!("kernel must be [1,1,odd,odd], got {s:?}"));
                }
                if !kernel.is_finite() {
                    return bad("kernel has non-finite entries".into());
                }
                Ok(())
            }
            NoiseModel::Poisson { gamma } if *gamma <= 0.0 => {
                bad(format!("gamma must be > 0, got {gamma}"))
            }
            NoiseModel::Gamma { ell } if *ell <= 0.0 => bad(format!("ell must be > 0, got {ell}")),
            NoiseModel::Binomial { n_trials } if *n_trials < 1 => {
                bad("n_trials must be >= 1".into())
            }
            NoiseModel::BernoulliMask { p0 } if !(0.0 < *p0 && *p0 < 1.0) => {
                bad(format!("p0 must be in (0,1), got {p0}"))
            }
            NoiseModel::PoissonGaussian { gamma, sigma } if *gamma <= 0.0 || *sigma < 0.0 => {
                bad(format!("poisson-gaussian wants gamma > 0, sigma >= 0, got ({gamma}, {sigma})"))
            }
            _ => Ok(()),
        }
    }

    /// Standardization constants of the log-gamma construction:
    /// `bias = psi(ell) - ln(ell)` and `sigma_tilde = sigma / sqrt(psi1(ell))`,
    /// so the realized noise has mean 0 and standard deviation `sigma`.
    pub fn log_gamma_constants(ell: f64, sigma: f64) -> Result<(f64, f64)> {
        let bias = digamma(ell)? - ell.ln();
        let sigma_tilde = sigma / trigamma(ell)?.sqrt();
        Ok((bias, sigma_tilde))
    }

    fn check_domain(&self, x: &Tensor) -> Result<()> {
        let violations = |pred: &dyn Fn(f64) -> bool| x.data().iter().filter(|&&v| pred(v)).count();
        let n_bad = match self {
            NoiseModel::Poisson { .. } | NoiseModel::Gamma { .. } | NoiseModel::PoissonGaussian { .. } => {
                violations(&|v| !(v > 0.0) || !v.is_finite())
            }
            NoiseModel::Binomial { .. } => violations(&|v| !(v > 0.0 && v < 1.0)),
            _ => violations(&|v| !v.is_finite()),
        };
        if n_bad > 0 {
            return Err(Error::Domain(format!(
                "{} pixels outside the domain of {:?}",
                n_bad, self
            )));
        }
        Ok(())
    }

    /// Draw one corrupted observation of `x`.
    pub fn corrupt(&self, x: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
        self.validate()?;
        self.check_domain(x)?;
        match self {
            NoiseModel::AdditiveGaussian { sigma } => {
                Ok(x.map_with_rng(rng, |v, r| v + sigma * r.normal()))
            }
            NoiseModel::AdditiveLaplace { b } => Ok(x.map_with_rng(rng, |v, r| v + r.laplace(0.0, *b))),
            NoiseModel::AdditiveLogGamma { ell, sigma } => {
                let (bias, sigma_tilde) = NoiseModel::log_gamma_constants(*ell, *sigma)?;
                Ok(x.map_with_rng(rng, |v, r| {
                    let z = r.gamma(*ell, 1.0 / *ell);
                    v + sigma_tilde * (z.ln() - bias)
                }))
            }
            NoiseModel::CorrelatedGaussian { sigma, kernel } => {
                let shape = x.shape().to_vec();
                let four = as_images(x)?;
                let white = four.map_with_rng(rng, |_, r| sigma * r.normal());
                let eps = tensor::conv2d(&white, kernel)?;
                let y = four.zip(&eps, "corrupt", |a, e| a + e)?;
                y.reshape(&shape)
            }
            NoiseModel::Poisson { gamma } => {
                Ok(x.map_with_rng(rng, |v, r| gamma * r.poisson(v / gamma) as f64))
            }
            NoiseModel::Gamma { ell } => Ok(x.map_with_rng(rng, |v, r| r.gamma(*ell, v / ell))),
            NoiseModel::Binomial { n_trials } => {
                let n = *n_trials;
                Ok(x.map_with_rng(rng, |v, r| r.binomial(n, v) as f64 / n as f64))
            }
            NoiseModel::BernoulliMask { p0 } => {
                Ok(x.map_with_rng(rng, |v, r| v * r.bernoulli(*p0) as f64))
            }
            NoiseModel::PoissonGaussian { gamma, sigma } => {
                Ok(x.map_with_rng(rng, |v, r| {
                    gamma * r.poisson(v / gamma) as f64 + sigma * r.normal()
                }))
            }
        }
    }

    /// Closed-form per-pixel mean and variance of y given x.
    pub fn mean_var(&self, x: f64) -> (f64, f64) {
        match self {
            NoiseModel::AdditiveGaussian { sigma } => (x, sigma * sigma),
            NoiseModel::AdditiveLaplace { b } => (x, 2.0 * b * b),
            NoiseModel::AdditiveLogGamma { sigma, .. } => (x, sigma * sigma),
            NoiseModel::CorrelatedGaussian { sigma, kernel } => {
                let k2: f64 = kernel.data().iter().map(|k| k * k).sum();
                (x, sigma * sigma * k2)
            }
            NoiseModel::Poisson { gamma } => (x, gamma * x),
            NoiseModel::Gamma { ell } => (x, x * x / ell),
            NoiseModel::Binomial { n_trials } => (x, x * (1.0 - x) / *n_trials as f64),
            NoiseModel::BernoulliMask { p0 } => (p0 * x, p0 * (1.0 - p0) * x * x),
            NoiseModel::PoissonGaussian { gamma, sigma } => (x, gamma * x + sigma * sigma),
        }
    }

    /// Elementwise [`NoiseModel::mean_var`] over a tensor.
    pub fn model_mean_var(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.validate()?;
        self.check_domain(x)?;
        let mean = x.map(|v| self.mean_var(v).0);
        let var = x.map(|v| self.mean_var(v).1);
        Ok((mean, var))
    }

    /// Natural-exponential-family components, for the families that have them.
    pub fn nef_components(&self) -> Result<NefSpec> {
        match self {
            NoiseModel::AdditiveGaussian { sigma } => {
                let s2 = sigma * sigma;
                let s = *sigma;
                Ok(NefSpec {
                    eta: Box::new(move |x| x / s2),
                    phi: Box::new(move |x| x * x / (2.0 * s2)),
                    log_h: Box::new(move |y| {
                        0.5 * (std::f64::consts::TAU).ln() + s.ln() + y * y / (2.0 * s2)
                    }),
                })
            }
            NoiseModel::Poisson { gamma } => {
                let g = *gamma;
                Ok(NefSpec {
                    eta: Box::new(|x| x.ln()),
                    phi: Box::new(move |x| x / g),
                    log_h: Box::new(move |y| -y * g.ln() - ln_gamma(y + 1.0)),
                })
            }
            NoiseModel::Gamma { ell } => {
                let l = *ell;
                Ok(NefSpec {
                    eta: Box::new(move |x| -l / x),
                    phi: Box::new(move |x| l * x.ln()),
                    log_h: Box::new(move |y| l * l.ln() + (l - 1.0) * y.ln() - ln_gamma(l)),
                })
            }
            NoiseModel::Binomial { n_trials } => {
                let n = *n_trials as f64;
                Ok(NefSpec {
                    // phi as printed; see the sign-convention note on NefSpec.
                    eta: Box::new(|x| (x / (1.0 - x)).ln()),
                    phi: Box::new(move |x| n * (1.0 - x).ln()),
                    log_h: Box::new(move |y| {
                        ln_gamma(n + 1.0) - ln_gamma(y + 1.0) - ln_gamma(n - y + 1.0)
                    }),
                })
            }
            other => Err(Error::Domain(format!("{other:?} has no NEF form"))),
        }
    }
}

/// Scalar NEF components eta(x), phi(x), log h(y).
///
/// The binomial phi is kept exactly as tabulated, `n ln(1-x)`; the convex
/// convention would flip its sign. Validators report the resulting identity
/// gap rather than silently repairing it.
pub struct NefSpec {
    pub eta: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub phi: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub log_h: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

/// View a 2-D or 4-D tensor as [n, c, h, w] images.
pub(crate) fn as_images(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    match shape.len() {
        2 => x.reshape(&[1, 1, shape[0], shape[1]]),
        4 => Ok(x.clone()),
        _ => Err(Error::Domain(format!(
            "expected a 2-d image or [n,c,h,w] batch, got shape {shape:?}"
        ))),
    }
}

/// The exact transport g(w) = F_eps^{-1}(Phi(w)) pushing a standard normal
/// draw to the additive noise law; the reference curve for the learned
/// recorruptor.
pub fn oracle_transport(model: &NoiseModel, w: f64) -> Result<f64> {
    let u = samplers::normal_cdf(w);
    match model {
        NoiseModel::AdditiveGaussian { sigma } => Ok(sigma * w),
        NoiseModel::AdditiveLaplace { b } => {
            let c = u - 0.5;
            Ok(-b * c.signum() * (1.0 - 2.0 * c.abs()).ln())
        }
        NoiseModel::AdditiveLogGamma { ell, sigma } => {
            let (bias, sigma_tilde) = NoiseModel::log_gamma_constants(*ell, *sigma)?;
            let z = samplers::gamma_inv_cdf(u, *ell, 1.0 / *ell)?;
            Ok(sigma_tilde * (z.ln() - bias))
        }
        other => Err(Error::Domain(format!(
            "oracle transport is defined for scalar additive models, not {other:?}"
        ))),
    }
}

impl Tensor {
    /// Elementwise map threading the RNG through in row-major order.
    pub fn map_with_rng(&self, rng: &mut RngStream, mut f: impl FnMut(f64, &mut RngStream) -> f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| f(v, rng)).collect();
        Tensor::new(self.shape().to_vec(), data).expect("shape preserved")
    }
}
