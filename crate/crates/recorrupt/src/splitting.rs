//! Recorruption pairs and losses per noise family, plus Monte Carlo
//! checkers for the identities the pairs rely on.
//!
//! Notation: the scalar recorruption strength is `tau` for additive pairs
//! (`y1 = y + tau*w`, `y2 = y - w/tau`) and `alpha` for the exponential-family
//! splits; the auxiliary noise vector is always `w`. Count-valued families
//! split on counts internally and expose image units.

use crate::autodiff::{Graph, NodeId};
use crate::noise::NoiseModel;
use crate::samplers::{ln_gamma, DistSpec, RngStream};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Auxiliary law for additive pairs.
#[derive(Debug, Clone, PartialEq)]
pub enum AuxLaw {
    /// Draw the recorruption noise from the model's own noise law.
    ModelMatched,
    /// Draw from an explicit scalar law (moment-matched by the caller).
    Custom(DistSpec),
}

/// How the printed Poisson-Gaussian weight `diag(gamma*y2 + (1+1/tau^2)*sigma^2)`
/// enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgWeight {
    AsPrinted,
    Inverse,
}

#[derive(Debug, Clone)]
pub struct SplitConfig {
    /// Split level for exponential-family and mask pairs, in (0, 1).
    pub alpha: Option<f64>,
    /// Strength for additive pairs (and the Gaussian part of Poisson-Gaussian).
    pub tau: Option<f64>,
    pub aux: AuxLaw,
    pub pairs_per_image: usize,
    pub pg_weight: PgWeight,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            alpha: Some(0.5),
            tau: Some(0.5),
            aux: AuxLaw::ModelMatched,
            pairs_per_image: 1,
            pg_weight: PgWeight::AsPrinted,
        }
    }
}

impl SplitConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        SplitConfig {
            alpha: Some(alpha),
            ..SplitConfig::default()
        }
    }

    pub fn with_tau(tau: f64) -> Self {
        SplitConfig {
            tau: Some(tau),
            ..SplitConfig::default()
        }
    }

    fn alpha(&self) -> Result<f64> {
        match self.alpha {
            Some(a) if 0.0 < a && a < 1.0 => Ok(a),
            Some(a) => Err(Error::Domain(format!("alpha must lie in (0,1), got {a}"))),
            None => Err(Error::Config("this family needs an alpha split level".into())),
        }
    }

    fn tau(&self) -> Result<f64> {
        match self.tau {
            Some(t) if t > 0.0 => Ok(t),
            Some(t) => Err(Error::Domain(format!("tau must be > 0, got {t}"))),
            None => Err(Error::Config("this family needs a tau strength".into())),
        }
    }
}

/// One recorrupted observation pair.
#[derive(Debug, Clone)]
pub struct RecorruptedPair {
    pub y1: Tensor,
    pub y2: Tensor,
    /// Diagonal weight or keep-mask, when the family's loss uses one.
    pub weight: Option<Tensor>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub family: &'static str,
}

fn integer_counts(y: &Tensor, scale: f64, what: &str) -> Result<Vec<u64>> {
    let mut counts = Vec::with_capacity(y.numel());
    let mut bad = 0usize;
    for &v in y.data() {
        let c = v / scale;
        let r = c.round();
        if !(c.is_finite() && (c - r).abs() < 1e-6 && r >= 0.0) {
            bad += 1;
            counts.push(0);
        } else {
            counts.push(r as u64);
        }
    }
    if bad > 0 {
        return Err(Error::Domain(format!(
            "{bad} pixels of {what} are not non-negative integer counts"
        )));
    }
    Ok(counts)
}

/// Draw one additive auxiliary noise tensor.
fn draw_aux(model: &NoiseModel, aux: &AuxLaw, shape: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
    match aux {
        AuxLaw::ModelMatched => {
            // The model's own zero-mean noise: corrupt a zero image.
            let zero = Tensor::zeros(shape.shape());
            model.corrupt(&zero, rng)
        }
        AuxLaw::Custom(spec) => crate::samplers::sample(spec, shape.shape(), rng),
    }
}

/// Build the recorrupted pair for `y` under its noise model.
pub fn gr2r_pair(
    y: &Tensor,
    model: &NoiseModel,
    cfg: &SplitConfig,
    rng: &mut RngStream,
) -> Result<RecorruptedPair> {
    model.validate()?;
    match model {
        NoiseModel::AdditiveGaussian { .. }
        | NoiseModel::AdditiveLaplace { .. }
        | NoiseModel::AdditiveLogGamma { .. }
        | NoiseModel::CorrelatedGaussian { .. } => {
            let tau = cfg.tau()?;
            let w = draw_aux(model, &cfg.aux, y, rng)?;
            let y1 = y.zip(&w, "gr2r_pair", |a, b| a + tau * b)?;
            let y2 = y.zip(&w, "gr2r_pair", |a, b| a - b / tau)?;
            Ok(RecorruptedPair {
                y1,
                y2,
                weight: None,
                alpha: None,
                tau: Some(tau),
                family: "additive",
            })
        }
        NoiseModel::Poisson { gamma } => {
            let alpha = cfg.alpha()?;
            let counts = integer_counts(y, *gamma, "poisson observation")?;
            let mut y1 = Vec::with_capacity(counts.len());
            let mut y2 = Vec::with_capacity(counts.len());
            for &z in &counts {
                let w = rng.binomial(z, alpha);
                y1.push(gamma * (z - w) as f64 / (1.0 - alpha));
                y2.push(gamma * w as f64 / alpha);
            }
            Ok(RecorruptedPair {
                y1: Tensor::new(y.shape().to_vec(), y1)?,
                y2: Tensor::new(y.shape().to_vec(), y2)?,
                weight: None,
                alpha: Some(alpha),
                tau: None,
                family: "poisson",
            })
        }
        NoiseModel::Gamma { ell } => {
            let alpha = cfg.alpha()?;
            let w = y.map_with_rng(rng, |_, r| r.beta(ell * alpha, ell * (1.0 - alpha)));
            let y1 = y.zip(&w, "gr2r_pair", |a, b| a * (1.0 - b) / (1.0 - alpha))?;
            let y2 = y.zip(&w, "gr2r_pair", |a, b| a * b / alpha)?;
            Ok(RecorruptedPair {
                y1,
                y2,
                weight: None,
                alpha: Some(alpha),
                tau: None,
                family: "gamma",
            })
        }
        NoiseModel::Binomial { n_trials } => {
            let alpha = cfg.alpha()?;
            let n = *n_trials;
            let rate_scale = 1.0 / n as f64;
            let counts = integer_counts(y, rate_scale, "binomial observation")?;
            // Draws per the convention: population n, successes y, round(n*alpha)
            // draws, rounding half to even. The realized split level m/n keeps
            // the pair unbiased.
            let m = (n as f64 * alpha).round_ties_even() as u64;
            if m == 0 || m == n {
                return Err(Error::Domain(format!(
                    "alpha {alpha} rounds to a degenerate draw count {m} of {n}"
                )));
            }
            let alpha_eff = m as f64 / n as f64;
            let mut y1 = Vec::with_capacity(counts.len());
            let mut y2 = Vec::with_capacity(counts.len());
            for &z in &counts {
                let w = rng.hypergeometric(n, z, m);
                y1.push((z - w) as f64 / (n - m) as f64);
                y2.push(w as f64 / m as f64);
            }
            Ok(RecorruptedPair {
                y1: Tensor::new(y.shape().to_vec(), y1)?,
                y2: Tensor::new(y.shape().to_vec(), y2)?,
                weight: None,
                alpha: Some(alpha_eff),
                tau: None,
                family: "binomial",
            })
        }
        NoiseModel::BernoulliMask { .. } => {
            let alpha = cfg.alpha()?;
            let w = y.map_with_rng(rng, |_, r| r.bernoulli(alpha) as f64);
            let y2 = y.zip(&w, "gr2r_pair", |a, b| a * (1.0 - b) / (1.0 - alpha))?;
            let weight = y2.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            Ok(RecorruptedPair {
                y1: y.clone(),
                y2,
                weight: Some(weight),
                alpha: Some(alpha),
                tau: None,
                family: "bernoulli_mask",
            })
        }
        NoiseModel::PoissonGaussian { gamma, sigma } => {
            let p = cfg.alpha()?;
            let tau = cfg.tau()?;
            let mut y1 = Vec::with_capacity(y.numel());
            let mut y2 = Vec::with_capacity(y.numel());
            for &v in y.data() {
                let ybar = (v / gamma).round().max(0.0) as u64;
                let w0 = rng.binomial(ybar, p);
                let w1 = sigma * rng.normal();
                y1.push(gamma * (ybar - w0) as f64 / (1.0 - p) + tau * w1);
                y2.push(gamma * w0 as f64 / p - w1 / tau);
            }
            let y2 = Tensor::new(y.shape().to_vec(), y2)?;
            let wdiag = y2.map(|v| gamma * v + (1.0 + 1.0 / (tau * tau)) * sigma * sigma);
            let weight = match cfg.pg_weight {
                PgWeight::AsPrinted => wdiag,
                PgWeight::Inverse => wdiag.map(|v| 1.0 / v),
            };
            Ok(RecorruptedPair {
                y1: Tensor::new(y.shape().to_vec(), y1)?,
                y2,
                weight: Some(weight),
                alpha: Some(p),
                tau: Some(tau),
                family: "poisson_gaussian",
            })
        }
    }
}

// ── Losses ───────────────────────────────────────────────────────────

const NLL_FLOOR: f64 = 1e-6;

/// Family loss as a differentiable graph node; `pred` is the denoiser
/// output on `pair.y1`. Mean over pixels.
///
/// Negative-log-likelihood predictions are clamped to their domain
/// (`[1e-6, inf)` or `[1e-6, 1-1e-6]`) before the loss.
pub fn gr2r_loss_graph(
    g: &mut Graph,
    pred: NodeId,
    pair: &RecorruptedPair,
    model: &NoiseModel,
) -> Result<NodeId> {
    let nan = g.value(pred).data().iter().filter(|v| v.is_nan()).count();
    if nan > 0 {
        return Err(Error::NonFinite(format!("{nan} NaN pixels in the prediction")));
    }
    match model {
        NoiseModel::AdditiveGaussian { .. }
        | NoiseModel::AdditiveLaplace { .. }
        | NoiseModel::AdditiveLogGamma { .. }
        | NoiseModel::CorrelatedGaussian { .. } => {
            let y2 = g.constant(pair.y2.clone());
            g.mse(pred, y2)
        }
        NoiseModel::Poisson { .. } => {
            // -y2 .* ln(f) + f, in image units.
            let f = g.clamp_min(pred, NLL_FLOOR)?;
            let y2 = g.constant(pair.y2.clone());
            let lf = g.log(f)?;
            let cross = g.mul(y2, lf)?;
            let diff = g.sub(f, cross)?;
            Ok(g.mean(diff))
        }
        NoiseModel::Gamma { .. } => {
            // ln(f) + y2 / f.
            let f = g.clamp_min(pred, NLL_FLOOR)?;
            let y2 = g.constant(pair.y2.clone());
            let lf = g.log(f)?;
            let invf = g.recip(f)?;
            let ratio = g.mul(y2, invf)?;
            let total = g.add(lf, ratio)?;
            Ok(g.mean(total))
        }
        NoiseModel::Binomial { n_trials } => {
            // -y2_counts .* ln(f) + (y2_counts - n) .* ln(1 - f), as printed.
            let n = *n_trials as f64;
            let f0 = g.clamp_min(pred, NLL_FLOOR)?;
            let f = g.clamp_max(f0, 1.0 - NLL_FLOOR)?;
            let y2_counts = g.constant(pair.y2.map(|v| v * n));
            let lf = g.log(f)?;
            let negf = g.mul_scalar(f, -1.0)?;
            let one_minus = g.add_scalar(negf, 1.0)?;
            let l1f = g.log(one_minus)?;
            let t1 = g.mul(y2_counts, lf)?;
            let shifted = g.add_scalar(y2_counts, -n)?;
            let t2 = g.mul(shifted, l1f)?;
            let diff = g.sub(t2, t1)?;
            Ok(g.mean(diff))
        }
        NoiseModel::BernoulliMask { .. } | NoiseModel::PoissonGaussian { .. } => {
            let w = pair
                .weight
                .clone()
                .ok_or_else(|| Error::Config("weighted loss wants a pair weight".into()))?;
            let wnode = g.constant(w);
            let y2 = g.constant(pair.y2.clone());
            let d = g.sub(pred, y2)?;
            let wd = g.mul(wnode, d)?;
            let sq = g.square(wd);
            Ok(g.mean(sq))
        }
    }
}

/// Scalar loss of a fixed prediction tensor.
pub fn gr2r_loss(prediction: &Tensor, pair: &RecorruptedPair, model: &NoiseModel) -> Result<f64> {
    let mut g = Graph::new();
    let pred = g.constant(prediction.clone());
    let loss = gr2r_loss_graph(&mut g, pred, pair, model)?;
    let v = g.value(loss).item();
    if v.is_nan() {
        return Err(Error::NonFinite("loss is NaN".into()));
    }
    Ok(v)
}

// ── Validation reports ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub value: f64,
    pub se: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn csv_header() -> Vec<String> {
        ["name", "value", "se", "threshold", "pass"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn csv_row(&self) -> Vec<String> {
        vec![
            self.name.clone(),
            format!("{:.16e}", self.value),
            format!("{:.16e}", self.se),
            format!("{:.16e}", self.threshold),
            if self.pass { "1".into() } else { "0".into() },
        ]
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub rows: Vec<CheckRow>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    fn push(&mut self, name: String, value: f64, se: f64, threshold: f64, pass: bool) {
        self.rows.push(CheckRow {
            name,
            value,
            se,
            threshold,
            pass,
        });
    }
}

fn sample_stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Monte Carlo validation of the exponential-family splitting identities:
/// unbiasedness of both halves, the 1/(1-alpha) and 1/alpha variance
/// scalings, conditional independence, and (for discrete families) the
/// conditional law of the split against the tabulated auxiliary law.
pub fn nef_split_validate(
    model: &NoiseModel,
    xs: &[f64],
    alpha: f64,
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<ValidationReport> {
    if n_mc < 100_000 {
        return Err(Error::Domain(format!("nef_split_validate wants n_mc >= 1e5, got {n_mc}")));
    }
    let cfg = match model {
        NoiseModel::AdditiveGaussian { .. } => {
            // Gaussian NEF split via the additive pair at tau = sqrt(a/(1-a)).
            SplitConfig {
                alpha: Some(alpha),
                tau: Some((alpha / (1.0 - alpha)).sqrt()),
                ..SplitConfig::default()
            }
        }
        NoiseModel::Poisson { .. } | NoiseModel::Gamma { .. } | NoiseModel::Binomial { .. } => {
            SplitConfig::with_alpha(alpha)
        }
        other => return Err(Error::Domain(format!("{other:?} is not an NEF family"))),
    };
    let mut report = ValidationReport::default();
    for &x in xs {
        let xt = Tensor::filled(&[n_mc], x);
        let y = model.corrupt(&xt, rng)?;
        let pair = gr2r_pair(&y, model, &cfg, rng)?;
        let (_, var_y) = model.mean_var(x);
        let a_eff = pair.alpha.unwrap_or(alpha);

        let (m1, v1) = sample_stats(pair.y1.data());
        let (m2, v2) = sample_stats(pair.y2.data());
        let se1 = (v1 / n_mc as f64).sqrt();
        let se2 = (v2 / n_mc as f64).sqrt();
        report.push(
            format!("{}|x={x}|mean_y1_dev_se", pair.family),
            (m1 - x).abs() / se1,
            se1,
            4.0,
            (m1 - x).abs() / se1 < 4.0,
        );
        report.push(
            format!("{}|x={x}|mean_y2_dev_se", pair.family),
            (m2 - x).abs() / se2,
            se2,
            4.0,
            (m2 - x).abs() / se2 < 4.0,
        );

        let r1 = v1 * (1.0 - a_eff) / var_y;
        let r2 = v2 * a_eff / var_y;
        report.push(
            format!("{}|x={x}|var_ratio_y1", pair.family),
            r1,
            0.0,
            0.02,
            (r1 - 1.0).abs() <= 0.02,
        );
        report.push(
            format!("{}|x={x}|var_ratio_y2", pair.family),
            r2,
            0.0,
            0.02,
            (r2 - 1.0).abs() <= 0.02,
        );

        let mut cov = 0.0;
        for (a, b) in pair.y1.data().iter().zip(pair.y2.data()) {
            cov += (a - m1) * (b - m2);
        }
        cov /= n_mc as f64 - 1.0;
        let corr = cov / (v1 * v2).sqrt();
        report.push(
            format!("{}|x={x}|corr_y1_y2", pair.family),
            corr,
            (1.0 / n_mc as f64).sqrt(),
            0.01,
            corr.abs() < 0.01,
        );
    }

    // Conditional law of the split at fixed observations.
    match model {
        NoiseModel::Poisson { gamma } => {
            let lam = xs[xs.len() / 2] / gamma;
            let ys = [lam.floor().max(2.0), lam.floor() + 2.0, lam.floor() + 4.0];
            for &yv in &ys {
                let z = yv as u64;
                let n_tv = 200_000usize;
                let mut hist = vec![0usize; z as usize + 1];
                for _ in 0..n_tv {
                    hist[rng.binomial(z, alpha) as usize] += 1;
                }
                let tv = 0.5
                    * hist
                        .iter()
                        .enumerate()
                        .map(|(k, &c)| {
                            (c as f64 / n_tv as f64 - binomial_pmf(z, alpha, k as u64)).abs()
                        })
                        .sum::<f64>();
                report.push(
                    format!("poisson|y={z}|tv_z2_vs_binomial"),
                    tv,
                    0.0,
                    0.01,
                    tv < 0.01,
                );
            }
        }
        NoiseModel::Binomial { n_trials } => {
            let n = *n_trials;
            let m = (n as f64 * alpha).round_ties_even() as u64;
            for &z in &[n / 4, n / 2, 3 * n / 4] {
                let n_tv = 200_000usize;
                let lo = m.saturating_sub(n - z);
                let hi = z.min(m);
                let mut hist = vec![0usize; (hi - lo + 1) as usize];
                for _ in 0..n_tv {
                    hist[(rng.hypergeometric(n, z, m) - lo) as usize] += 1;
                }
                let tv = 0.5
                    * hist
                        .iter()
                        .enumerate()
                        .map(|(i, &c)| {
                            let k = lo + i as u64;
                            (c as f64 / n_tv as f64 - hypergeom_pmf(n, z, m, k)).abs()
                        })
                        .sum::<f64>();
                report.push(
                    format!("binomial|y={z}|tv_z2_vs_hypgeo"),
                    tv,
                    0.0,
                    0.01,
                    tv < 0.01,
                );
            }
        }
        _ => {}
    }
    Ok(report)
}

pub fn binomial_pmf(n: u64, p: f64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    let (nf, kf) = (n as f64, k as f64);
    (ln_gamma(nf + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0)
        + kf * p.ln()
        + (nf - kf) * (1.0 - p).ln())
    .exp()
}

pub fn hypergeom_pmf(total: u64, successes: u64, draws: u64, k: u64) -> f64 {
    let lo = draws.saturating_sub(total - successes);
    let hi = successes.min(draws);
    if k < lo || k > hi {
        return 0.0;
    }
    let lc = |n: u64, k: u64| {
        ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
    };
    (lc(successes, k) + lc(total - successes, draws - k) - lc(total, draws)).exp()
}

/// Empirical check that the conditional law of the Poisson split half does
/// not depend on x: simulate the independent two-component decomposition at
/// two intensities, condition on the same observed count, and compare both
/// conditional laws to Bin(y, alpha) and to each other.
pub struct XfreeRow {
    pub y: u64,
    pub tv_vs_binomial: [f64; 2],
    pub tv_between_x: f64,
}

pub fn poisson_xfree_check(
    gamma: f64,
    alpha: f64,
    y_values: &[u64],
    x_pair: (f64, f64),
    n_conditional: usize,
    rng: &mut RngStream,
) -> Result<Vec<XfreeRow>> {
    let mut out = Vec::new();
    for &yv in y_values {
        let mut laws: Vec<Vec<f64>> = Vec::new();
        for &x in &[x_pair.0, x_pair.1] {
            let lam = x / gamma;
            let mut hist = vec![0usize; yv as usize + 1];
            let mut hits = 0usize;
            let mut guard = 0usize;
            while hits < n_conditional {
                guard += 1;
                if guard > 400 * n_conditional {
                    return Err(Error::Domain(format!(
                        "conditioning on y={yv} at x={x} is too rare to sample"
                    )));
                }
                let z1 = rng.poisson((1.0 - alpha) * lam);
                let z2 = rng.poisson(alpha * lam);
                if z1 + z2 == yv {
                    hist[z2 as usize] += 1;
                    hits += 1;
                }
            }
            laws.push(hist.iter().map(|&c| c as f64 / n_conditional as f64).collect());
        }
        let tv_bin = |law: &[f64]| {
            0.5 * law
                .iter()
                .enumerate()
                .map(|(k, &p)| (p - binomial_pmf(yv, alpha, k as u64)).abs())
                .sum::<f64>()
        };
        let tv_between = 0.5
            * laws[0]
                .iter()
                .zip(&laws[1])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        out.push(XfreeRow {
            y: yv,
            tv_vs_binomial: [tv_bin(&laws[0]), tv_bin(&laws[1])],
            tv_between_x: tv_between,
        });
    }
    Ok(out)
}

// ── Moment conditions ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ConditionRow {
    pub lhs: f64,
    pub rhs: f64,
    pub se: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct ConditionReport {
    pub n1: ConditionRow,
    pub n3: ConditionRow,
    pub asymmetry_warning: bool,
}

/// Second and fourth raw moments, closed-form when available, else MC with
/// standard errors. Also reports the worst odd-moment deviation in SE units.
fn even_moments(spec: &DistSpec, n_mc: usize, rng: &mut RngStream) -> Result<(f64, f64, f64, f64, f64)> {
    let closed: Option<(f64, f64)> = match *spec {
        DistSpec::Normal { mu: 0.0, sigma } => {
            let s2 = sigma * sigma;
            Some((s2, 3.0 * s2 * s2))
        }
        DistSpec::Laplace { mu: 0.0, b } => Some((2.0 * b * b, 24.0 * b.powi(4))),
        DistSpec::Rademacher => Some((1.0, 1.0)),
        _ => None,
    };
    if let Some((m2, m4)) = closed {
        return Ok((m2, m4, 0.0, 0.0, 0.0));
    }
    let report = crate::samplers::moment_report(spec, n_mc, 4, rng)?;
    let odd_dev = (report[0].value.abs() / report[0].se.max(1e-300))
        .max(report[2].value.abs() / report[2].se.max(1e-300));
    Ok((report[1].value, report[3].value, report[1].se, report[3].se, odd_dev))
}

/// Check the two surviving moment-matching conditions for additive pairs
/// built from symmetric laws:
/// n=1: E[w^2] = E[eps^2]; n=3: E[w^4] = E[eps^4]/tau^2 - 3 E[eps^2]^2 (1 - 1/tau^2).
pub fn check_moment_conditions(
    eps_spec: &DistSpec,
    omega_spec: &DistSpec,
    tau: f64,
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<ConditionReport> {
    if n_mc < 100_000 {
        return Err(Error::Domain(format!("check_moment_conditions wants n_mc >= 1e5, got {n_mc}")));
    }
    if tau <= 0.0 {
        return Err(Error::Domain(format!("tau must be > 0, got {tau}")));
    }
    let (e2, e4, se_e2, se_e4, odd_e) = even_moments(eps_spec, n_mc, rng)?;
    let (w2, w4, se_w2, se_w4, odd_w) = even_moments(omega_spec, n_mc, rng)?;

    let tol = |se: f64, scale: f64| {
        if se == 0.0 {
            1e-9 * scale.abs().max(1.0)
        } else {
            4.0 * se
        }
    };

    let se1 = (se_w2 * se_w2 + se_e2 * se_e2).sqrt();
    let n1 = ConditionRow {
        lhs: w2,
        rhs: e2,
        se: se1,
        pass: (w2 - e2).abs() <= tol(se1, e2),
    };

    let rhs3 = e4 / (tau * tau) - 3.0 * e2 * e2 * (1.0 - 1.0 / (tau * tau));
    let se3 = (se_w4 * se_w4 + se_e4 * se_e4 / tau.powi(4)).sqrt();
    let n3 = ConditionRow {
        lhs: w4,
        rhs: rhs3,
        se: se3,
        pass: (w4 - rhs3).abs() <= tol(se3, rhs3),
    };

    Ok(ConditionReport {
        n1,
        n3,
        asymmetry_warning: odd_e > 4.0 || odd_w > 4.0,
    })
}

/// Monte Carlo estimate of E[(eps - w/tau) f(x + eps + tau w)], the scalar
/// functional whose vanishing makes the recorrupted loss supervised-equivalent.
pub fn correlation_functional(
    f: &dyn Fn(f64) -> f64,
    x: f64,
    eps_spec: &DistSpec,
    omega_spec: &DistSpec,
    tau: f64,
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    eps_spec.validate()?;
    omega_spec.validate()?;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for _ in 0..n_mc {
        let e = eps_spec.draw(rng);
        let w = omega_spec.draw(rng);
        let v = (e - w / tau) * f(x + e + tau * w);
        s += v;
        s2 += v * v;
    }
    let n = n_mc as f64;
    let mean = s / n;
    let var = (s2 - s * s / n).max(0.0) / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Estimate the offset between the recorrupted loss and the supervised loss
/// for a fixed denoiser, together with its closed-form value E||y2 - x||^2.
pub fn gr2r_supervised_gap(
    f: &dyn Fn(&Tensor) -> Tensor,
    model: &NoiseModel,
    cfg: &SplitConfig,
    x_truth: &Tensor,
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    let mut gap_acc = 0.0;
    for _ in 0..n_mc {
        let y = model.corrupt(x_truth, rng)?;
        let pair = gr2r_pair(&y, model, cfg, rng)?;
        let pred = f(&pair.y1);
        let a: f64 = pred
            .data()
            .iter()
            .zip(pair.y2.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let b: f64 = pred
            .data()
            .iter()
            .zip(x_truth.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        gap_acc += a - b;
    }
    let gap = gap_acc / n_mc as f64;

    // Var(y2 | x) summed over pixels.
    let closed: f64 = match model {
        NoiseModel::AdditiveGaussian { .. }
        | NoiseModel::AdditiveLaplace { .. }
        | NoiseModel::AdditiveLogGamma { .. }
        | NoiseModel::CorrelatedGaussian { .. } => {
            let tau = cfg.tau()?;
            let var_aux = match &cfg.aux {
                AuxLaw::ModelMatched => None,
                AuxLaw::Custom(spec) => Some(spec.mean_var().1),
            };
            x_truth
                .data()
                .iter()
                .map(|&x| {
                    let v_eps = model.mean_var(x).1;
                    v_eps + var_aux.unwrap_or(v_eps) / (tau * tau)
                })
                .sum()
        }
        _ => {
            let alpha = cfg.alpha()?;
            x_truth.data().iter().map(|&x| model.mean_var(x).1 / alpha).sum()
        }
    };
    Ok((gap, closed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn additive_pair_formula() {
        // y = 1.0, tau = 2, w = 0.5 -> y1 = 2.0, y2 = 0.75.
        let y = 1.0;
        let (tau, w) = (2.0, 0.5);
        assert_eq!(y + tau * w, 2.0);
        assert_eq!(y - w / tau, 0.75);
    }

    #[test]
    fn poisson_pair_formula() {
        // counts 5, alpha 0.4, drawn w = 2: y1 = 3/0.6 = 5, y2 = 2/0.4 = 5.
        let (z, alpha, w) = (5.0, 0.4, 2.0);
        assert!(((z - w) / (1.0 - alpha) - 5.0f64).abs() < 1e-12);
        assert!((w / alpha - 5.0f64).abs() < 1e-12);
    }

    #[test]
    fn nef_reassembly_is_exact() {
        let mut rng = RngStream::new(41, 0);
        let models: Vec<(NoiseModel, f64)> = vec![
            (NoiseModel::Poisson { gamma: 0.05 }, 0.5),
            (NoiseModel::Gamma { ell: 8.0 }, 0.5),
            (NoiseModel::Binomial { n_trials: 16 }, 0.25),
        ];
        for (model, alpha) in models {
            let x = Tensor::filled(&[512], 0.4);
            let y = model.corrupt(&x, &mut rng).unwrap();
            let pair = gr2r_pair(&y, &model, &SplitConfig::with_alpha(alpha), &mut rng).unwrap();
            let a = pair.alpha.unwrap();
            for ((&y1, &y2), &yv) in pair.y1.data().iter().zip(pair.y2.data()).zip(y.data()) {
                let back = (1.0 - a) * y1 + a * y2;
                assert!(
                    (back - yv).abs() < 1e-12,
                    "{model:?}: reassembled {back} vs {yv}"
                );
            }
        }
    }

    #[test]
    fn additive_loss_zero_at_perfect_match() {
        let mut rng = RngStream::new(42, 1);
        let model = NoiseModel::AdditiveGaussian { sigma: 0.1 };
        let x = Tensor::filled(&[64], 0.5);
        let y = model.corrupt(&x, &mut rng).unwrap();
        let pair = gr2r_pair(&y, &model, &SplitConfig::with_tau(1.0), &mut rng).unwrap();
        let loss = gr2r_loss(&pair.y2, &pair, &model).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn poisson_loss_value_and_minimizer() {
        // Per-pixel value at y2 = 2, c = 2, gamma = 1: -2 ln 2 + 2.
        let model = NoiseModel::Poisson { gamma: 1.0 };
        let pair = RecorruptedPair {
            y1: Tensor::from_vec(vec![2.0]),
            y2: Tensor::from_vec(vec![2.0]),
            weight: None,
            alpha: Some(0.5),
            tau: None,
            family: "poisson",
        };
        let at = |c: f64| gr2r_loss(&Tensor::from_vec(vec![c]), &pair, &model).unwrap();
        let want = -2.0 * std::f64::consts::LN_2 + 2.0;
        assert!((at(2.0) - want).abs() < 1e-12, "{} vs {want}", at(2.0));
        // First-order optimality at c = y2.
        assert!(at(2.0) < at(1.6) && at(2.0) < at(2.4));
    }

    #[test]
    fn gamma_loss_minimized_at_y2() {
        let model = NoiseModel::Gamma { ell: 3.0 };
        let pair = RecorruptedPair {
            y1: Tensor::from_vec(vec![3.0]),
            y2: Tensor::from_vec(vec![3.0]),
            weight: None,
            alpha: Some(0.5),
            tau: None,
            family: "gamma",
        };
        let at = |c: f64| gr2r_loss(&Tensor::from_vec(vec![c]), &pair, &model).unwrap();
        // d/dc [ln c + y2/c] = 1/c - y2/c^2 vanishes at c = y2 = 3.
        assert!(at(3.0) < at(2.5) && at(3.0) < at(3.5));
        let h = 1e-5;
        let deriv = (at(3.0 + h) - at(3.0 - h)) / (2.0 * h);
        assert!(deriv.abs() < 1e-8, "stationary point derivative {deriv}");
    }

    #[test]
    fn binomial_loss_stationary_at_rate() {
        let model = NoiseModel::Binomial { n_trials: 16 };
        let pair = RecorruptedPair {
            y1: Tensor::from_vec(vec![0.5]),
            y2: Tensor::from_vec(vec![0.25]), // rate units; counts = 4
            weight: None,
            alpha: Some(0.25),
            tau: None,
            family: "binomial",
        };
        let at = |c: f64| gr2r_loss(&Tensor::from_vec(vec![c]), &pair, &model).unwrap();
        let h = 1e-6;
        let deriv = (at(0.25 + h) - at(0.25 - h)) / (2.0 * h);
        assert!(deriv.abs() < 1e-6, "stationary point derivative {deriv}");
        assert!(at(0.25) < at(0.2) && at(0.25) < at(0.3));
    }

    #[test]
    fn mask_loss_ignores_dropped_pixels() {
        let model = NoiseModel::BernoulliMask { p0: 0.8 };
        let pair = RecorruptedPair {
            y1: Tensor::from_vec(vec![0.5, 0.5]),
            y2: Tensor::from_vec(vec![0.0, 1.0]),
            weight: Some(Tensor::from_vec(vec![0.0, 1.0])),
            alpha: Some(0.5),
            tau: None,
            family: "bernoulli_mask",
        };
        // First pixel is masked out: only the second contributes.
        let loss = gr2r_loss(&Tensor::from_vec(vec![9.0, 1.0]), &pair, &model).unwrap();
        assert_eq!(loss, 0.0);
        let loss = gr2r_loss(&Tensor::from_vec(vec![9.0, 0.5]), &pair, &model).unwrap();
        assert!((loss - 0.125).abs() < 1e-12);
    }

    #[test]
    fn moment_conditions_gaussian_pass_laplace_fail() {
        let mut rng = RngStream::new(50, 0);
        let sigma = 0.3;
        let gauss = DistSpec::Normal { mu: 0.0, sigma };
        let rep = check_moment_conditions(&gauss, &gauss, 1.0, 100_000, &mut rng).unwrap();
        assert!(rep.n1.pass && rep.n3.pass);
        assert!(!rep.asymmetry_warning);

        // Laplace eps, Gaussian omega, variance matched: n1 passes, n3 fails
        // with lhs/rhs = 3 sigma^4 / 6 sigma^4 = 0.5.
        let b = sigma / std::f64::consts::SQRT_2;
        let lap = DistSpec::Laplace { mu: 0.0, b };
        let rep = check_moment_conditions(&lap, &gauss, 1.0, 100_000, &mut rng).unwrap();
        assert!(rep.n1.pass);
        assert!(!rep.n3.pass);
        assert!((rep.n3.lhs / rep.n3.rhs - 0.5).abs() < 0.05, "ratio {}", rep.n3.lhs / rep.n3.rhs);
    }

    #[test]
    fn identical_laws_pass_all_conditions() {
        let mut rng = RngStream::new(51, 0);
        let spec = DistSpec::Laplace { mu: 0.0, b: 0.2 };
        let rep = check_moment_conditions(&spec, &spec, 1.0, 100_000, &mut rng).unwrap();
        assert!(rep.n1.pass && rep.n3.pass);
    }

    #[test]
    fn correlation_functional_detects_higher_order_mismatch() {
        let mut rng = RngStream::new(52, 0);
        let sigma = 0.5;
        let gauss = DistSpec::Normal { mu: 0.0, sigma };
        let b = sigma / std::f64::consts::SQRT_2;
        let lap = DistSpec::Laplace { mu: 0.0, b };

        // Constant f: zero-mean factor kills it.
        let (est, se) = correlation_functional(&|_| 1.0, 0.3, &lap, &gauss, 1.0, 200_000, &mut rng).unwrap();
        assert!(est.abs() < 4.0 * se, "constant f: {est} vs se {se}");

        // Linear f: only the n=1 condition matters, which holds.
        let (est, se) =
            correlation_functional(&|u| 2.0 * u - 0.3, 0.3, &lap, &gauss, 1.0, 200_000, &mut rng).unwrap();
        assert!(est.abs() < 4.0 * se, "linear f: {est} vs se {se}");

        // Cubic f: n=3 is violated, the functional must detect it.
        let (est, se) =
            correlation_functional(&|u| u * u * u, 0.0, &lap, &gauss, 1.0, 400_000, &mut rng).unwrap();
        assert!(est.abs() > 4.0 * se, "cubic f should fail: {est} vs se {se}");
    }

    #[test]
    fn supervised_gap_matches_closed_form() {
        let mut rng = RngStream::new(53, 0);
        let model = NoiseModel::AdditiveGaussian { sigma: 0.1 };
        let n = 32usize;
        let x = Tensor::filled(&[n], 0.5);
        let cfg = SplitConfig::with_tau(1.0);
        // Per-pixel constant: sigma^2 (1 + 1/tau^2) = 0.02.
        let (_, closed) = gr2r_supervised_gap(&|t: &Tensor| t.clone(), &model, &cfg, &x, 10, &mut rng).unwrap();
        assert!((closed / n as f64 - 0.02).abs() < 1e-12);

        // Oracle denoiser f = x: gap equals the constant in expectation.
        let x2 = x.clone();
        let (gap, closed) =
            gr2r_supervised_gap(&move |_t: &Tensor| x2.clone(), &model, &cfg, &x, 60_000, &mut rng).unwrap();
        let se_budget = closed * 0.02;
        assert!((gap - closed).abs() < se_budget, "gap {gap} vs {closed}");

        // Fixed linear f.
        let (gap, closed) = gr2r_supervised_gap(
            &|t: &Tensor| t.map(|v| 0.7 * v + 0.1),
            &model,
            &cfg,
            &x,
            100_000,
            &mut rng,
        )
        .unwrap();
        assert!((gap - closed).abs() < 0.03 * closed, "gap {gap} vs {closed}");
    }

    #[test]
    fn xfree_conditional_law() {
        let mut rng = RngStream::new(54, 0);
        let rows = poisson_xfree_check(0.1, 0.25, &[6], (0.5, 0.7), 40_000, &mut rng).unwrap();
        assert!(rows[0].tv_vs_binomial[0] < 0.015, "tv {}", rows[0].tv_vs_binomial[0]);
        assert!(rows[0].tv_vs_binomial[1] < 0.015);
        assert!(rows[0].tv_between_x < 0.015);
    }

    #[test]
    fn validate_rejects_non_nef_and_small_n() {
        let mut rng = RngStream::new(55, 0);
        assert!(nef_split_validate(
            &NoiseModel::AdditiveLaplace { b: 0.1 },
            &[0.5],
            0.5,
            100_000,
            &mut rng
        )
        .is_err());
        assert!(nef_split_validate(
            &NoiseModel::Poisson { gamma: 0.1 },
            &[0.5],
            0.5,
            1000,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn gaussian_split_validates() {
        let mut rng = RngStream::new(56, 0);
        let model = NoiseModel::AdditiveGaussian { sigma: 0.1 };
        let report = nef_split_validate(&model, &[0.3, 0.5], 0.5, 200_000, &mut rng).unwrap();
        assert!(report.all_pass(), "{:#?}", report.rows);
    }
}
