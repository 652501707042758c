//! Deterministic, seedable random variate generation.
//!
//! The generator is counter-based (SplitMix-style output function over a
//! keyed counter), so independent streams are obtained by construction from
//! `(seed, stream_id)` with no coordination, and a stream replays its
//! sequence bit-for-bit.

use crate::tensor::Tensor;
use crate::{Error, Result};

const GOLDEN: u64 = 0x9E3779B97F4A7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Counter-based random stream. Single-owner; split before going parallel.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    base: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let base = mix(seed ^ 0x6A09E667F3BCC909).wrapping_add(mix(stream_id ^ 0xBB67AE8584CAA73B));
        RngStream {
            seed,
            stream_id,
            base,
            counter: 0,
            spare_normal: None,
        }
    }

    /// Derive an independent stream for a sub-task, without advancing `self`.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, mix(self.stream_id ^ 0x3C6EF372FE94F82B).wrapping_add(mix(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.base.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn u01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval `(0, 1)`.
    pub fn open01(&mut self) -> f64 {
        ((self.next_u64() >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
    }

    /// Standard normal via Box-Muller; the companion variate is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let r = (-2.0 * self.open01().ln()).sqrt();
        let theta = std::f64::consts::TAU * self.u01();
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> u64 {
        u64::from(self.u01() < p)
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Poisson counts: inversion below 10, transformed rejection (PTRS) above.
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        if lambda == 0.0 {
            return 0;
        }
        if lambda < 10.0 {
            let limit = (-lambda).exp();
            let mut k = 0u64;
            let mut p = 1.0;
            loop {
                p *= self.u01();
                if p <= limit {
                    return k;
                }
                k += 1;
            }
        }
        let slam = lambda.sqrt();
        let loglam = lambda.ln();
        let b = 0.931 + 2.53 * slam;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);
        loop {
            let u = self.u01() - 0.5;
            let v = self.open01();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
            if us >= 0.07 && v <= v_r {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            if (v * inv_alpha / (a / (us * us) + b)).ln() <= k * loglam - lambda - ln_gamma(k + 1.0) {
                return k as u64;
            }
        }
    }

    /// Gamma(shape, scale) via Marsaglia-Tsang, with the shape<1 boost.
    pub fn gamma(&mut self, shape: f64, scale: f64) -> f64 {
        if shape < 1.0 {
            let boost = self.open01().powf(1.0 / shape);
            return self.gamma(shape + 1.0, scale) * boost;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.open01();
            if u < 1.0 - 0.0331 * x.powi(4) {
                return d * v * scale;
            }
            if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v * scale;
            }
        }
    }

    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        let x = self.gamma(a, 1.0);
        let y = self.gamma(b, 1.0);
        x / (x + y)
    }

    /// Binomial counts: pmf inversion for small n or mean, else transformed
    /// rejection (BTRS).
    pub fn binomial(&mut self, n: u64, p: f64) -> u64 {
        if p <= 0.0 {
            return 0;
        }
        if p >= 1.0 {
            return n;
        }
        if p > 0.5 {
            return n - self.binomial(n, 1.0 - p);
        }
        if n <= 64 || (n as f64) * p <= 10.0 {
            return self.binomial_inversion(n, p);
        }
        self.binomial_btrs(n, p)
    }

    fn binomial_inversion(&mut self, n: u64, p: f64) -> u64 {
        let q = 1.0 - p;
        let ratio = p / q;
        let mut pmf = ((n as f64) * q.ln()).exp();
        let mut cdf = pmf;
        let mut k = 0u64;
        let u = self.u01();
        while u > cdf && k < n {
            pmf *= ((n - k) as f64) / ((k + 1) as f64) * ratio;
            k += 1;
            cdf += pmf;
        }
        k
    }

    fn binomial_btrs(&mut self, n: u64, p: f64) -> u64 {
        let nf = n as f64;
        let q = 1.0 - p;
        let spq = (nf * p * q).sqrt();
        let b = 1.15 + 2.53 * spq;
        let a = -0.0873 + 0.0248 * b + 0.01 * p;
        let c = nf * p + 0.5;
        let v_r = 0.92 - 4.2 / b;
        let alpha = (2.83 + 5.1 / b) * spq;
        let lpq = (p / q).ln();
        let m = ((nf + 1.0) * p).floor();
        let h = ln_gamma(m + 1.0) + ln_gamma(nf - m + 1.0);
        loop {
            let u = self.u01() - 0.5;
            let mut v = self.open01();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + c).floor();
            if k < 0.0 || k > nf {
                continue;
            }
            if us >= 0.07 && v <= v_r {
                return k as u64;
            }
            v = v * alpha / (a / (us * us) + b);
            if v.ln() <= h - ln_gamma(k + 1.0) - ln_gamma(nf - k + 1.0) + (k - m) * lpq {
                return k as u64;
            }
        }
    }

    /// Hypergeometric draw by pmf inversion; fine at desk-scale populations.
    pub fn hypergeometric(&mut self, total: u64, successes: u64, draws: u64) -> u64 {
        let (nn, kk, n) = (total as f64, successes as f64, draws as f64);
        let k_min = draws.saturating_sub(total - successes);
        let k_max = successes.min(draws);
        if k_min == k_max {
            return k_min;
        }
        let lpmf = |k: f64| {
            ln_choose(kk, k) + ln_choose(nn - kk, n - k) - ln_choose(nn, n)
        };
        let mut k = k_min;
        let mut pmf = lpmf(k_min as f64).exp();
        let mut cdf = pmf;
        let u = self.u01();
        while u > cdf && k < k_max {
            let kf = k as f64;
            pmf *= (kk - kf) * (n - kf) / ((kf + 1.0) * (nn - kk - n + kf + 1.0));
            k += 1;
            cdf += pmf;
        }
        k
    }

    pub fn laplace(&mut self, mu: f64, b: f64) -> f64 {
        let u = self.open01() - 0.5;
        mu - b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }
}

// ── Special functions ────────────────────────────────────────────────

/// Log-gamma via a 9-term Lanczos approximation (g = 7), ~1e-13 relative.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection keeps small arguments accurate.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (std::f64::consts::TAU).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn ln_choose(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// Digamma: recurrence up past 6, then the asymptotic series.
pub fn digamma(x: f64) -> Result<f64> {
    if x <= 0.0 {
        return Err(Error::Domain(format!("digamma wants x > 0, got {x}")));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 8.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // B_2k / (2k x^{2k}) terms.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    Ok(acc + x.ln() - 0.5 * inv - series)
}

/// Trigamma: recurrence up past 6, then the asymptotic series.
pub fn trigamma(x: f64) -> Result<f64> {
    if x <= 0.0 {
        return Err(Error::Domain(format!("trigamma wants x > 0, got {x}")));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 8.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0
            + inv * (0.5
                + inv * (1.0 / 6.0
                    - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0))))));
    Ok(acc + series)
}

/// Complementary error function, rational approximation (~1.2e-7 absolute).
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Standard normal CDF.
pub fn normal_cdf(w: f64) -> f64 {
    0.5 * erfc(-w / std::f64::consts::SQRT_2)
}

/// Regularized lower incomplete gamma P(a, x): series for x < a+1,
/// continued fraction otherwise.
pub fn gammp(a: f64, x: f64) -> Result<f64> {
    if a <= 0.0 || x < 0.0 {
        return Err(Error::Domain(format!("gammp wants a > 0, x >= 0, got ({a}, {x})")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let lg = ln_gamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..500 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        Ok(sum * (-x + a * x.ln() - lg).exp())
    } else {
        // Lentz's method for the continued fraction of Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        let q = (-x + a * x.ln() - lg).exp() * h;
        Ok(1.0 - q)
    }
}

/// Quantile of Gamma(shape, scale) by bisection on the regularized CDF.
pub fn gamma_inv_cdf(u: f64, shape: f64, scale: f64) -> Result<f64> {
    if !(0.0 < u && u < 1.0) {
        return Err(Error::Domain(format!("gamma_inv_cdf wants u in (0,1), got {u}")));
    }
    let mut hi = shape * scale;
    while gammp(shape, hi / scale)? < u {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::Domain("gamma_inv_cdf failed to bracket".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gammp(shape, mid / scale)? < u {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * (1.0 + hi) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ── Distribution specifications ──────────────────────────────────────

/// A scalar law; parameters are checked by [`DistSpec::validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum DistSpec {
    Normal { mu: f64, sigma: f64 },
    Poisson { lambda: f64 },
    Gamma { shape: f64, scale: f64 },
    Beta { a: f64, b: f64 },
    Binomial { n: u64, p: f64 },
    Hypergeometric { total: u64, successes: u64, draws: u64 },
    Bernoulli { p: f64 },
    Laplace { mu: f64, b: f64 },
    Rademacher,
}

impl DistSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |name: &str, bound: &str| -> Result<()> {
            Err(Error::Domain(format!("{self:?}: parameter {name} violates {bound}")))
        };
        match *self {
            DistSpec::Normal { sigma, .. } if sigma <= 0.0 => fail("sigma", "sigma > 0"),
            DistSpec::Poisson { lambda } if lambda < 0.0 => fail("lambda", "lambda >= 0"),
            DistSpec::Gamma { shape, .. } if shape <= 0.0 => fail("shape", "shape > 0"),
            DistSpec::Gamma { scale, .. } if scale <= 0.0 => fail("scale", "scale > 0"),
            DistSpec::Beta { a, .. } if a <= 0.0 => fail("a", "a > 0"),
            DistSpec::Beta { b, .. } if b <= 0.0 => fail("b", "b > 0"),
            DistSpec::Binomial { p, .. } if !(0.0..=1.0).contains(&p) => fail("p", "0 <= p <= 1"),
            DistSpec::Hypergeometric { total, successes, .. } if successes > total => {
                fail("successes", "0 <= successes <= total")
            }
            DistSpec::Hypergeometric { total, draws, .. } if draws > total => {
                fail("draws", "0 <= draws <= total")
            }
            DistSpec::Bernoulli { p } if !(0.0..=1.0).contains(&p) => fail("p", "0 <= p <= 1"),
            DistSpec::Laplace { b, .. } if b <= 0.0 => fail("b", "b > 0"),
            _ => Ok(()),
        }
    }

    /// One draw. Discrete families return integer-valued reals.
    pub fn draw(&self, rng: &mut RngStream) -> f64 {
        match *self {
            DistSpec::Normal { mu, sigma } => mu + sigma * rng.normal(),
            DistSpec::Poisson { lambda } => rng.poisson(lambda) as f64,
            DistSpec::Gamma { shape, scale } => rng.gamma(shape, scale),
            DistSpec::Beta { a, b } => rng.beta(a, b),
            DistSpec::Binomial { n, p } => rng.binomial(n, p) as f64,
            DistSpec::Hypergeometric { total, successes, draws } => {
                rng.hypergeometric(total, successes, draws) as f64
            }
            DistSpec::Bernoulli { p } => rng.bernoulli(p) as f64,
            DistSpec::Laplace { mu, b } => rng.laplace(mu, b),
            DistSpec::Rademacher => rng.rademacher(),
        }
    }

    /// Textbook mean and variance.
    pub fn mean_var(&self) -> (f64, f64) {
        match *self {
            DistSpec::Normal { mu, sigma } => (mu, sigma * sigma),
            DistSpec::Poisson { lambda } => (lambda, lambda),
            DistSpec::Gamma { shape, scale } => (shape * scale, shape * scale * scale),
            DistSpec::Beta { a, b } => {
                let s = a + b;
                (a / s, a * b / (s * s * (s + 1.0)))
            }
            DistSpec::Binomial { n, p } => (n as f64 * p, n as f64 * p * (1.0 - p)),
            DistSpec::Hypergeometric { total, successes, draws } => {
                let (nn, kk, n) = (total as f64, successes as f64, draws as f64);
                let frac = kk / nn;
                let var = if total > 1 {
                    n * frac * (1.0 - frac) * (nn - n) / (nn - 1.0)
                } else {
                    0.0
                };
                (n * frac, var)
            }
            DistSpec::Bernoulli { p } => (p, p * (1.0 - p)),
            DistSpec::Laplace { mu, b } => (mu, 2.0 * b * b),
            DistSpec::Rademacher => (0.0, 1.0),
        }
    }
}

/// Fill a tensor with i.i.d. draws from `spec`.
pub fn sample(spec: &DistSpec, shape: &[usize], rng: &mut RngStream) -> Result<Tensor> {
    spec.validate()?;
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| spec.draw(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

// ── Empirical moments ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MomentEstimate {
    pub order: usize,
    pub value: f64,
    pub se: f64,
}

/// Empirical raw moments `E[X^k]`, k = 1..=max_order, with jackknife
/// standard errors.
pub fn moment_report(
    spec: &DistSpec,
    n_samples: usize,
    max_order: usize,
    rng: &mut RngStream,
) -> Result<Vec<MomentEstimate>> {
    spec.validate()?;
    if n_samples < 100 {
        return Err(Error::Domain(format!(
            "moment_report wants n_samples >= 100, got {n_samples}"
        )));
    }
    if max_order > 8 {
        return Err(Error::Domain(format!(
            "moment_report wants max_order <= 8, got {max_order}"
        )));
    }
    let mut sums = vec![0.0f64; max_order];
    let mut sq_sums = vec![0.0f64; max_order];
    for _ in 0..n_samples {
        let x = spec.draw(rng);
        let mut p = 1.0;
        for k in 0..max_order {
            p *= x;
            sums[k] += p;
            sq_sums[k] += p * p;
        }
    }
    let n = n_samples as f64;
    Ok((0..max_order)
        .map(|k| {
            // Jackknife variance of the mean reduces to s^2 / n.
            let var = (sq_sums[k] - sums[k] * sums[k] / n).max(0.0) / (n * (n - 1.0));
            MomentEstimate {
                order: k + 1,
                value: sums[k] / n,
                se: var.sqrt(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_replay_bit_for_bit() {
        let mut a = RngStream::new(42, 7);
        let seq: Vec<u64> = (0..32).map(|_| a.next_u64()).collect();
        let mut b = RngStream::new(42, 7);
        let seq2: Vec<u64> = (0..32).map(|_| b.next_u64()).collect();
        assert_eq!(seq, seq2);
        let mut c = RngStream::new(42, 8);
        assert_ne!(seq[0], c.next_u64());
    }

    #[test]
    fn digamma_and_trigamma_reference_values() {
        // Euler-Mascheroni via the series oracle; pi^2/6 in closed form.
        assert!((digamma(1.0).unwrap() + 0.577215664901532861).abs() < 1e-10);
        assert!((trigamma(1.0).unwrap() - std::f64::consts::PI.powi(2) / 6.0).abs() < 1e-10);
        for &x in &[0.5, 2.0, 7.0] {
            let lhs = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            assert!((lhs - 1.0 / x).abs() < 1e-10, "digamma recurrence at {x}");
            let lhs = trigamma(x).unwrap() - trigamma(x + 1.0).unwrap();
            assert!((lhs - 1.0 / (x * x)).abs() < 1e-10, "trigamma recurrence at {x}");
        }
        assert!(digamma(0.0).is_err());
        assert!(trigamma(-1.0).is_err());
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut f = 1.0f64;
        for n in 1..15u32 {
            if n > 1 {
                f *= (n - 1) as f64;
            }
            assert!((ln_gamma(n as f64) - f.ln()).abs() < 1e-10, "ln_gamma({n})");
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_families() {
        let mut rng = RngStream::new(1, 1);
        let t = sample(&DistSpec::Binomial { n: 5, p: 0.0 }, &[100], &mut rng).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
        let t = sample(
            &DistSpec::Hypergeometric { total: 10, successes: 10, draws: 4 },
            &[100],
            &mut rng,
        )
        .unwrap();
        assert!(t.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn hypergeometric_respects_support() {
        let mut rng = RngStream::new(3, 5);
        for _ in 0..2000 {
            let k = rng.hypergeometric(20, 12, 9);
            assert!(k >= 1 && k <= 9, "draw {k} outside [1, 9]");
        }
    }

    fn mc_mean_var(spec: &DistSpec, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = RngStream::new(seed, 99);
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in 0..n {
            let x = spec.draw(&mut rng);
            s += x;
            s2 += x * x;
        }
        let nf = n as f64;
        (s / nf, (s2 - s * s / nf) / (nf - 1.0))
    }

    #[test]
    fn family_means_and_variances_within_four_se() {
        let n = 1_000_000usize;
        let specs = [
            DistSpec::Normal { mu: 0.3, sigma: 0.7 },
            DistSpec::Poisson { lambda: 4.2 },
            DistSpec::Poisson { lambda: 17.0 }, // PTRS branch
            DistSpec::Gamma { shape: 2.0, scale: 3.0 },
            DistSpec::Gamma { shape: 0.4, scale: 1.5 }, // boost branch
            DistSpec::Beta { a: 2.5, b: 1.5 },
            DistSpec::Binomial { n: 16, p: 0.3 },
            DistSpec::Binomial { n: 300, p: 0.4 }, // BTRS branch
            DistSpec::Hypergeometric { total: 16, successes: 9, draws: 4 },
            DistSpec::Bernoulli { p: 0.25 },
            DistSpec::Laplace { mu: 0.0, b: 0.5 },
            DistSpec::Rademacher,
        ];
        for (i, spec) in specs.iter().enumerate() {
            let (want_mean, want_var) = spec.mean_var();
            let (got_mean, got_var) = mc_mean_var(spec, n, 1000 + i as u64);
            let se_mean = (want_var / n as f64).sqrt();
            assert!(
                (got_mean - want_mean).abs() < 4.0 * se_mean + 1e-12,
                "{spec:?}: mean {got_mean} vs {want_mean} (se {se_mean})"
            );
            // Crude SE for the variance: sqrt of 4th-central-moment bound.
            let se_var = want_var * (8.0 / n as f64).sqrt() + 1e-9;
            assert!(
                (got_var - want_var).abs() < 8.0 * se_var,
                "{spec:?}: var {got_var} vs {want_var}"
            );
        }
    }

    #[test]
    fn gamma_mean_within_four_se() {
        let n = 1_000_000;
        let (mean, _) = mc_mean_var(&DistSpec::Gamma { shape: 2.0, scale: 3.0 }, n, 7);
        let se = (2.0 * 9.0 / n as f64).sqrt();
        assert!((mean - 6.0).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn moment_report_reference_values() {
        let mut rng = RngStream::new(11, 0);
        let report = moment_report(&DistSpec::Normal { mu: 0.0, sigma: 1.0 }, 1_000_000, 2, &mut rng).unwrap();
        let order2 = &report[1];
        assert!((order2.value - 1.0).abs() < 4.0 * order2.se, "E[X^2] {}", order2.value);

        // Laplace with b = 1/sqrt(2): E X^4 = 24 b^4 = 6.
        let b = 1.0 / std::f64::consts::SQRT_2;
        let want = 24.0 * b.powi(4);
        let mut rng = RngStream::new(12, 0);
        let report = moment_report(&DistSpec::Laplace { mu: 0.0, b }, 1_000_000, 4, &mut rng).unwrap();
        let order4 = &report[3];
        assert!((order4.value - want).abs() < 4.0 * order4.se, "E[X^4] {}", order4.value);

        // Rademacher even orders are exactly one.
        let mut rng = RngStream::new(13, 0);
        let report = moment_report(&DistSpec::Rademacher, 1000, 6, &mut rng).unwrap();
        assert_eq!(report[1].value, 1.0);
        assert_eq!(report[3].value, 1.0);
        assert_eq!(report[5].value, 1.0);

        assert!(moment_report(&DistSpec::Rademacher, 99, 2, &mut rng).is_err());
    }

    #[test]
    fn normal_cdf_and_gamma_quantiles() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 2e-7);
        assert!((normal_cdf(1.0) - 0.841344746).abs() < 1e-6);
        assert!((normal_cdf(-2.0) - 0.022750132).abs() < 1e-6);
        // Exp(1) quantile: F^{ -1 }(u) = -ln(1 - u).
        for &u in &[0.1, 0.5, 0.9] {
            let q = gamma_inv_cdf(u, 1.0, 1.0).unwrap();
            assert!((q + (1.0f64 - u).ln()).abs() < 1e-9, "u={u}: {q}");
        }
        // Chi-square_2 median = 2 ln 2 via Gamma(1, 2).
        let med = gamma_inv_cdf(0.5, 1.0, 2.0).unwrap();
        assert!((med - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn invalid_parameters_name_the_bound() {
        let err = sample(&DistSpec::Gamma { shape: -1.0, scale: 1.0 }, &[4], &mut RngStream::new(0, 0))
            .unwrap_err()
            .to_string();
        assert!(err.contains("shape") && err.contains("> 0"), "{err}");
    }
}
