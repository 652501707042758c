//! Stein-type objectives: SURE with Monte Carlo divergence, UNSURE (scalar
//! and kernel-weighted), and the limiting conditional-moment estimator that
//! links recorrupted losses to SURE.

use crate::noise::NoiseModel;
use crate::samplers::RngStream;
use crate::splitting::{gr2r_pair, SplitConfig};
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SureConfig {
    /// Known noise level of the plain SURE variant.
    pub sigma: f64,
    pub mc_probes: usize,
    /// Forward-difference step of the divergence probe.
    pub fd_step: f64,
}

impl Default for SureConfig {
    fn default() -> Self {
        SureConfig {
            sigma: 0.1,
            mc_probes: 8,
            fd_step: 1e-4,
        }
    }
}

impl SureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::Domain(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.mc_probes == 0 {
            return Err(Error::Domain("mc_probes must be >= 1".into()));
        }
        if !(self.fd_step > 0.0 && self.fd_step <= 1e-2) {
            return Err(Error::Domain(format!(
                "fd_step must lie in (0, 1e-2], got {}",
                self.fd_step
            )));
        }
        Ok(())
    }
}

/// Lagrange multiplier state of the scalar UNSURE saddle.
#[derive(Debug, Clone)]
pub struct UnsureState {
    pub eta: f64,
    pub ascent_lr: f64,
}

impl UnsureState {
    pub fn new(ascent_lr: f64) -> Self {
        assert!(ascent_lr > 0.0, "ascent step must be positive");
        UnsureState { eta: 0.0, ascent_lr }
    }
}

/// Kernel-weighted UNSURE state: the divergence weight is the covariance
/// induced by convolving white noise with `kernel`.
#[derive(Debug, Clone)]
pub struct CorrelatedUnsureState {
    pub kernel: Tensor,
    pub ascent_lr: f64,
}

/// Hutchinson-style divergence with Rademacher probes and a shared forward
/// difference: mean over probes of v^T (f(y + d v) - f(y)) / d.
pub fn mc_divergence(
    f: &dyn Fn(&Tensor) -> Tensor,
    y: &Tensor,
    cfg: &SureConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    cfg.validate()?;
    let base = f(y);
    let d = cfg.fd_step;
    let mut acc = 0.0;
    for _ in 0..cfg.mc_probes {
        let v = y.map_with_rng(rng, |_, r| r.rademacher());
        let shifted = y.zip(&v, "mc_divergence", |a, b| a + d * b)?;
        let out = f(&shifted);
        let diff = out.zip(&base, "mc_divergence", |a, b| (a - b) / d)?;
        acc += v.dot(&diff)?;
    }
    Ok(acc / cfg.mc_probes as f64)
}

/// Per-pixel SURE loss `||f(y)-y||^2/n + 2 sigma^2 div/n` for a Gaussian
/// model with known sigma.
pub fn sure_loss(
    f: &dyn Fn(&Tensor) -> Tensor,
    y: &Tensor,
    cfg: &SureConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    cfg.validate()?;
    let n = y.numel() as f64;
    let pred = f(y);
    let fit: f64 = pred
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let div = mc_divergence(f, y, cfg, rng)?;
    Ok(fit / n + 2.0 * cfg.sigma * cfg.sigma * div / n)
}

/// Scalar UNSURE: the measurement-consistency loss plus `2 eta div/n`, and
/// the ascent gradient `2 div/n` that drives the expected divergence to zero.
pub fn unsure_objective(
    f: &dyn Fn(&Tensor) -> Tensor,
    y: &Tensor,
    state: &UnsureState,
    cfg: &SureConfig,
    rng: &mut RngStream,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    let n = y.numel() as f64;
    let pred = f(y);
    let fit: f64 = pred
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let div = mc_divergence(f, y, cfg, rng)?;
    let loss = fit / n + 2.0 * state.eta * div / n;
    let ascent_grad = 2.0 * div / n;
    Ok((loss, ascent_grad))
}

fn kernel_fits(kernel: &Tensor, y: &Tensor) -> Result<()> {
    let ks = kernel.shape();
    let ys = y.shape();
    let (h, w) = (ys[ys.len() - 2], ys[ys.len() - 1]);
    if ks[2] > h || ks[3] > w {
        return Err(Error::Domain(format!(
            "kernel {:?} larger than image {:?}",
            &ks[2..], &ys[ys.len() - 2..]
        )));
    }
    Ok(())
}

fn conv_probe(v: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let shape = v.shape().to_vec();
    let four = crate::noise::as_images(v)?;
    let out = tensor::conv2d(&four, kernel)?;
    out.reshape(&shape)
}

/// Kernel-weighted UNSURE objective. The probe perturbs along `k * v` and
/// projects onto the same direction, so its mean estimates `tr(Sigma grad f)`
/// with `Sigma = K K^T`. Returns the loss for f and the ascent gradient for
/// the kernel coefficients.
pub fn correlated_unsure_objective(
    f: &dyn Fn(&Tensor) -> Tensor,
    y: &Tensor,
    state: &CorrelatedUnsureState,
    cfg: &SureConfig,
    rng: &mut RngStream,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    kernel_fits(&state.kernel, y)?;
    let n = y.numel() as f64;
    let d = cfg.fd_step;
    let base = f(y);
    let fit: f64 = base
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    let klen = state.kernel.numel();
    let mut div_acc = 0.0;
    let mut grad_acc = vec![0.0f64; klen];
    for _ in 0..cfg.mc_probes {
        let v = y.map_with_rng(rng, |_, r| r.rademacher());
        let u = conv_probe(&v, &state.kernel)?;
        let shifted = y.zip(&u, "correlated_unsure", |a, b| a + d * b)?;
        let jac_u = f(&shifted).zip(&base, "correlated_unsure", |a, b| (a - b) / d)?;
        div_acc += u.dot(&jac_u)?;

        // d/dk_j tr(K^T J K) = tr(E_j^T J K) + tr(K^T J E_j), estimated with
        // the shared probe: (E_j v)^T (J K v) + (K v)^T (J E_j v).
        for j in 0..klen {
            let mut unit = Tensor::zeros(state.kernel.shape());
            unit.data_mut()[j] = 1.0;
            let ej_v = conv_probe(&v, &unit)?;
            let first = ej_v.dot(&jac_u)?;
            let shifted_j = y.zip(&ej_v, "correlated_unsure", |a, b| a + d * b)?;
            let jac_ej = f(&shifted_j).zip(&base, "correlated_unsure", |a, b| (a - b) / d)?;
            let second = u.dot(&jac_ej)?;
            grad_acc[j] += first + second;
        }
    }
    let probes = cfg.mc_probes as f64;
    let loss = fit / n + 2.0 * div_acc / (probes * n);
    let grad = Tensor::new(
        state.kernel.shape().to_vec(),
        grad_acc.iter().map(|g| 2.0 * g / (probes * n)).collect(),
    )?;
    Ok((loss, grad))
}

// ── Limiting conditional moments ─────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AkEstimate {
    pub alpha: f64,
    pub value: f64,
    pub se: f64,
}

/// Estimate `E[(y2 - y)(alpha y2)^k | y, alpha]` per split level and its
/// alpha -> 0 limit by linear extrapolation of the last two points.
///
/// The conditional split `y2 | y` is drawn through the family's pair rule;
/// for the Gaussian family the additive pair at `tau = sqrt(a/(1-a))`
/// realizes the exponential-family split.
pub fn estimate_ak(
    model: &NoiseModel,
    y: f64,
    k: u32,
    alpha_seq: &[f64],
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<(Vec<AkEstimate>, f64)> {
    if alpha_seq.len() < 2 {
        return Err(Error::Domain("estimate_ak wants at least 2 alphas".into()));
    }
    for w in alpha_seq.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::Domain("alpha_seq must be strictly decreasing".into()));
        }
    }
    if alpha_seq[0] > 0.5 || *alpha_seq.last().unwrap() <= 0.0 {
        return Err(Error::Domain("alphas must lie in (0, 0.5]".into()));
    }

    let chunk = 8192usize;
    let mut out = Vec::new();
    for &alpha in alpha_seq {
        let cfg = match model {
            NoiseModel::AdditiveGaussian { .. } => SplitConfig {
                alpha: Some(alpha),
                tau: Some((alpha / (1.0 - alpha)).sqrt()),
                ..SplitConfig::default()
            },
            _ => SplitConfig::with_alpha(alpha),
        };
        let mut s = 0.0;
        let mut s2 = 0.0;
        let mut seen = 0usize;
        while seen < n_mc {
            let m = chunk.min(n_mc - seen);
            let yt = Tensor::filled(&[m], y);
            let pair = gr2r_pair(&yt, model, &cfg, rng)?;
            let a_eff = pair.alpha.unwrap_or(alpha);
            for &y2 in pair.y2.data() {
                let v = (y2 - y) * (a_eff * y2).powi(k as i32);
                s += v;
                s2 += v * v;
            }
            seen += m;
        }
        let n = n_mc as f64;
        let mean = s / n;
        let var = (s2 - s * s / n).max(0.0) / (n - 1.0);
        out.push(AkEstimate {
            alpha,
            value: mean,
            se: (var / n).sqrt(),
        });
    }

    let last = &out[out.len() - 1];
    let prev = &out[out.len() - 2];
    let slope = (prev.value - last.value) / (prev.alpha - last.alpha);
    let limit = last.value - slope * last.alpha;
    Ok((out, limit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_f(scales: Vec<f64>) -> impl Fn(&Tensor) -> Tensor {
        move |t: &Tensor| {
            let data: Vec<f64> = t.data().iter().zip(&scales).map(|(v, s)| v * s).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        }
    }

    #[test]
    fn divergence_of_diagonal_map_is_trace() {
        let cfg = SureConfig {
            sigma: 0.1,
            mc_probes: 64,
            fd_step: 1e-4,
        };
        let f = diag_f(vec![1.0, 2.0, 3.0]);
        let y = Tensor::from_vec(vec![0.2, -0.4, 0.9]);
        let div = mc_divergence(&f, &y, &cfg, &mut RngStream::new(60, 0)).unwrap();
        assert!((div - 6.0).abs() < 0.15, "div {div}");
    }

    #[test]
    fn divergence_of_constant_is_zero_and_identity_is_n() {
        let cfg = SureConfig::default();
        let y = Tensor::filled(&[100], 0.3);
        let c = Tensor::filled(&[100], 0.7);
        let div = mc_divergence(&move |_| c.clone(), &y, &cfg, &mut RngStream::new(61, 0)).unwrap();
        assert_eq!(div, 0.0);
        let div = mc_divergence(&|t: &Tensor| t.clone(), &y, &cfg, &mut RngStream::new(61, 1)).unwrap();
        assert!((div - 100.0).abs() < 1e-9, "div {div}");
    }

    #[test]
    fn divergence_is_linear_under_shared_probes() {
        let cfg = SureConfig {
            sigma: 0.1,
            mc_probes: 4,
            fd_step: 1e-4,
        };
        let y = Tensor::from_vec(vec![0.1, 0.5, -0.3, 0.8]);
        let f = |t: &Tensor| t.map(|v| 0.7 * v + 0.2 * v * v);
        let g = |t: &Tensor| t.map(|v| (-0.4) * v + 0.1);
        let sum_fg = |t: &Tensor| {
            let a = f(t);
            let b = g(t);
            a.zip(&b, "sum", |x, y| x + y).unwrap()
        };
        let d_f = mc_divergence(&f, &y, &cfg, &mut RngStream::new(62, 5)).unwrap();
        let d_g = mc_divergence(&g, &y, &cfg, &mut RngStream::new(62, 5)).unwrap();
        let d_sum = mc_divergence(&sum_fg, &y, &cfg, &mut RngStream::new(62, 5)).unwrap();
        assert!((d_sum - (d_f + d_g)).abs() < 1e-9, "{d_sum} vs {}", d_f + d_g);
    }

    #[test]
    fn sure_identity_and_zero_denoisers() {
        let cfg = SureConfig {
            sigma: 0.1,
            mc_probes: 16,
            fd_step: 1e-4,
        };
        let y = Tensor::filled(&[100], 0.4);
        // Identity: 0 + 2 sigma^2 * n / n = 0.02 per pixel.
        let loss = sure_loss(&|t: &Tensor| t.clone(), &y, &cfg, &mut RngStream::new(63, 0)).unwrap();
        assert!((loss - 0.02).abs() < 1e-9, "loss {loss}");
        // Zero output: ||y||^2 / n.
        let loss = sure_loss(&|t: &Tensor| Tensor::zeros(t.shape()), &y, &cfg, &mut RngStream::new(63, 1)).unwrap();
        assert!((loss - 0.16).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn sure_is_unbiased_for_linear_denoiser() {
        // Fixed random linear f on 64 pixels; mean(sure) - sigma^2 should
        // match the true per-pixel MSE.
        let n = 64usize;
        let sigma = 0.1;
        let mut setup = RngStream::new(64, 0);
        let a: Vec<f64> = (0..n * n).map(|_| 0.02 * setup.normal()).collect();
        let x: Vec<f64> = (0..n).map(|_| 0.3 + 0.4 * setup.u01()).collect();
        let apply = {
            let a = a.clone();
            move |t: &Tensor| {
                let mut out = vec![0.0; n];
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += a[i * n + j] * t.data()[j];
                    }
                    out[i] = acc;
                }
                Tensor::from_vec(out)
            }
        };
        // Closed-form true risk: ||(A - I)x||^2 + sigma^2 ||A||_F^2, per pixel.
        let xt = Tensor::from_vec(x.clone());
        let ax = apply(&xt);
        let bias2: f64 = ax
            .data()
            .iter()
            .zip(&x)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let frob2: f64 = a.iter().map(|v| v * v).sum();
        let true_mse = (bias2 + sigma * sigma * frob2) / n as f64;

        let cfg = SureConfig {
            sigma,
            mc_probes: 4,
            fd_step: 1e-4,
        };
        let n_draws = 100_000usize;
        let mut rng = RngStream::new(64, 1);
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in 0..n_draws {
            let y = xt.map_with_rng(&mut rng, |v, r| v + sigma * r.normal());
            let v = sure_loss(&apply, &y, &cfg, &mut rng).unwrap();
            s += v;
            s2 += v * v;
        }
        let mean = s / n_draws as f64;
        let se = ((s2 - s * s / n_draws as f64) / (n_draws as f64 - 1.0) / n_draws as f64).sqrt();
        let dev = (mean - sigma * sigma - true_mse).abs();
        assert!(dev < 4.0 * se, "bias {dev} vs 4se {}", 4.0 * se);
    }

    #[test]
    fn unsure_reduces_to_consistency_at_zero_eta() {
        let cfg = SureConfig::default();
        let y = Tensor::filled(&[50], 0.5);
        let state = UnsureState::new(1e-3);
        let f = |t: &Tensor| t.map(|v| 0.8 * v);
        let (loss, grad) = unsure_objective(&f, &y, &state, &cfg, &mut RngStream::new(65, 0)).unwrap();
        // eta = 0: loss is the plain consistency term.
        assert!((loss - 0.01).abs() < 1e-12, "loss {loss}");
        // Ascent gradient is 2 div / n = 2 * 0.8.
        assert!((grad - 1.6).abs() < 1e-9, "grad {grad}");

        // Identity denoiser: gradient 2 per pixel pushes eta up.
        let (_, grad) = unsure_objective(&|t: &Tensor| t.clone(), &y, &state, &cfg, &mut RngStream::new(65, 1)).unwrap();
        assert!((grad - 2.0).abs() < 1e-9);
    }

    #[test]
    fn correlated_probe_reduces_to_scalar_with_delta_kernel() {
        let cfg = SureConfig {
            sigma: 0.1,
            mc_probes: 32,
            fd_step: 1e-4,
        };
        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        let state = CorrelatedUnsureState {
            kernel: delta,
            ascent_lr: 1e-3,
        };
        let y = Tensor::filled(&[8, 8], 0.4);
        let f = |t: &Tensor| t.map(|v| 0.5 * v);
        let (loss, _) = correlated_unsure_objective(&f, &y, &state, &cfg, &mut RngStream::new(66, 0)).unwrap();
        // Sigma = I: loss = ||f-y||^2/n + 2 * 1 * div/n = 0.04 + 2*0.5 = 1.04.
        assert!((loss - (0.04 + 1.0)).abs() < 1e-9, "loss {loss}");

        // Zero kernel kills the divergence term.
        let state = CorrelatedUnsureState {
            kernel: Tensor::zeros(&[1, 1, 3, 3]),
            ascent_lr: 1e-3,
        };
        let (loss, grad) = correlated_unsure_objective(&f, &y, &state, &cfg, &mut RngStream::new(66, 1)).unwrap();
        assert!((loss - 0.04).abs() < 1e-12);
        // The zero kernel is a stationary point of tr(K^T J K): zero gradient.
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn correlated_probe_matches_trace_for_linear_map() {
        // f = A acting pixelwise-mixed: use a small 3x3 image and a dense A.
        let n = 9usize;
        let mut setup = RngStream::new(67, 0);
        let a: Vec<f64> = (0..n * n).map(|_| 0.3 * setup.normal()).collect();
        let a2 = a.clone();
        let f = move |t: &Tensor| {
            let mut out = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    out[i] += a2[i * n + j] * t.data()[j];
                }
            }
            Tensor::new(t.shape().to_vec(), out).unwrap()
        };
        let kernel = crate::noise::gaussian_kernel(3, 0.7);
        let state = CorrelatedUnsureState {
            kernel: kernel.clone(),
            ascent_lr: 1e-3,
        };
        let cfg = SureConfig {
            sigma: 0.1,
            mc_probes: 2048,
            fd_step: 1e-4,
        };
        let y = Tensor::zeros(&[3, 3]);
        let (loss, _) = correlated_unsure_objective(&f, &y, &state, &cfg, &mut RngStream::new(67, 1)).unwrap();
        // tr(Sigma A) with Sigma = K K^T built explicitly from the conv matrix.
        let mut kmat = vec![0.0f64; n * n];
        for col in 0..n {
            let mut unit = Tensor::zeros(&[3, 3]);
            unit.data_mut()[col] = 1.0;
            let resp = conv_probe(&unit, &kernel).unwrap();
            for row in 0..n {
                kmat[row * n + col] = resp.data()[row];
            }
        }
        let mut trace = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut sig = 0.0;
                for l in 0..n {
                    sig += kmat[i * n + l] * kmat[j * n + l];
                }
                trace += sig * a[j * n + i];
            }
        }
        let div_est = (loss - 0.0) * n as f64 / 2.0; // fit term is ||A*0 - 0|| = 0
        assert!(
            (div_est - trace).abs() < 0.15 * trace.abs().max(1.0),
            "estimate {div_est} vs trace {trace}"
        );
    }

    #[test]
    fn ak_gaussian_closed_form_and_limit() {
        let model = NoiseModel::AdditiveGaussian { sigma: 0.2 };
        let mut rng = RngStream::new(68, 0);
        let (ests, limit) =
            estimate_ak(&model, 0.5, 1, &[0.2, 0.1, 0.05], 1_000_000, &mut rng).unwrap();
        for e in &ests {
            let want = (1.0 - e.alpha) * 0.04;
            assert!(
                (e.value - want).abs() < 0.02 * want,
                "alpha {}: {} vs {want}",
                e.alpha,
                e.value
            );
        }
        assert!((limit - 0.04).abs() < 0.03 * 0.04, "limit {limit}");
    }

    #[test]
    fn ak_zeroth_order_centers() {
        let model = NoiseModel::AdditiveGaussian { sigma: 0.2 };
        let mut rng = RngStream::new(69, 0);
        let (ests, _) = estimate_ak(&model, 0.5, 0, &[0.2, 0.1], 200_000, &mut rng).unwrap();
        for e in &ests {
            assert!(e.value.abs() < 4.0 * e.se, "alpha {}: {} vs se {}", e.alpha, e.value, e.se);
        }
    }

    #[test]
    fn ak_rejects_bad_sequences() {
        let model = NoiseModel::AdditiveGaussian { sigma: 0.2 };
        let mut rng = RngStream::new(70, 0);
        assert!(estimate_ak(&model, 0.5, 1, &[0.2], 1000, &mut rng).is_err());
        assert!(estimate_ak(&model, 0.5, 1, &[0.1, 0.2], 1000, &mut rng).is_err());
        assert!(estimate_ak(&model, 0.5, 1, &[0.9, 0.1], 1000, &mut rng).is_err());
    }
}
