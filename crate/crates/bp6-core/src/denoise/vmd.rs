//! Variational mode decomposition by ADMM in the spectral domain.
//!
//! The signal is mirror-extended to twice its length, transformed with an
//! FFT, and restricted to the positive half-spectrum. Each mode's spectrum is
//! updated by a Wiener-like filter centered on its current center frequency,
//! center frequencies are re-estimated as spectral centroids, and an optional
//! dual ascent step enforces exact reconstruction when `tau_dual > 0`.

use super::DenoiseError;
use crate::dsp::Segment;
use num_complex::Complex64;
use rustfft::FftPlanner;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmegaInit {
    /// All center frequencies start at zero.
    Zero,
    /// Center frequencies start uniformly spaced over [0, 0.5).
    Uniform,
}

#[derive(Debug, Clone)]
pub struct VmdConfig {
    pub k_modes: usize,
    /// Bandwidth penalty; larger values produce narrower modes.
    pub alpha: f64,
    /// Dual ascent step. Zero disables the reconstruction constraint.
    pub tau_dual: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub omega_init: OmegaInit,
}

impl Default for VmdConfig {
    fn default() -> Self {
        VmdConfig {
            k_modes: 6,
            alpha: 2000.0,
            tau_dual: 0.0,
            tol: 1e-7,
            max_iter: 500,
            omega_init: OmegaInit::Uniform,
        }
    }
}

impl VmdConfig {
    fn validate(&self) -> Result<(), DenoiseError> {
        if self.k_modes == 0 {
            return Err(DenoiseError::InvalidArgument(
                "k_modes must be at least 1".into(),
            ));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(DenoiseError::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.tau_dual.is_finite() && self.tau_dual >= 0.0) {
            return Err(DenoiseError::InvalidArgument(format!(
                "tau_dual must be non-negative, got {}",
                self.tau_dual
            )));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(DenoiseError::InvalidArgument(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(DenoiseError::InvalidArgument(
                "max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct VmdResult {
    /// Modes in ascending center-frequency order, each the input's length.
    pub modes: Vec<Vec<f64>>,
    /// Center frequencies in cycles per sample, one per mode, in [0, 0.5].
    pub omega: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn fftshift<T: Copy + Default>(x: &[T]) -> Vec<T> {
    let n = x.len();
    let half = n / 2;
    let mut out = vec![T::default(); n];
    for i in 0..n {
        out[i] = x[(i + half) % n];
    }
    out
}

/// Decomposes a segment into `k_modes` band-limited modes.
pub fn vmd_decompose(segment: &Segment, cfg: &VmdConfig) -> Result<VmdResult, DenoiseError> {
    cfg.validate()?;
    if segment.is_empty() {
        return Err(DenoiseError::InvalidArgument(
            "cannot decompose an empty segment".into(),
        ));
    }
    if let Some(index) = segment.first_non_finite() {
        return Err(DenoiseError::NonFinite {
            channel: segment.channel_name.clone(),
            index,
        });
    }

    // Odd lengths are mirror-padded by one sample and cropped at the end.
    let n_orig = segment.len();
    let mut x = segment.values.clone();
    if x.len() % 2 == 1 {
        x.push(x[x.len() - 1]);
    }
    let n = x.len();
    let t = 2 * n;
    let k = cfg.k_modes;

    // Mirror extension: first half reversed, the signal, second half reversed.
    let mut extended = Vec::with_capacity(t);
    extended.extend(x[..n / 2].iter().rev());
    extended.extend_from_slice(&x);
    extended.extend(x[n / 2..].iter().rev());

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(t);
    let ifft = planner.plan_fft_inverse(t);

    let mut buf: Vec<Complex64> = extended
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    fft.process(&mut buf);

    // Shift so index t/2 is DC; zero the negative half to keep only the
    // positive-frequency spectrum.
    let mut f_hat_plus = fftshift(&buf);
    for v in f_hat_plus.iter_mut().take(t / 2) {
        *v = Complex64::new(0.0, 0.0);
    }
    let freqs: Vec<f64> = (0..t).map(|i| i as f64 / t as f64 - 0.5).collect();

    let mut omega: Vec<f64> = match cfg.omega_init {
        OmegaInit::Zero => vec![0.0; k],
        OmegaInit::Uniform => (0..k).map(|i| 0.5 * i as f64 / k as f64).collect(),
    };

    let zero = Complex64::new(0.0, 0.0);
    let mut u_hat = vec![vec![zero; t]; k];
    let mut lambda_hat = vec![zero; t];

    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let prev = u_hat.clone();

        for ki in 0..k {
            // Sum of all other modes; modes with smaller index already hold
            // this iteration's update (Gauss-Seidel sweep).
            for i in t / 2..t {
                let mut others = zero;
                for (kj, mode) in u_hat.iter().enumerate() {
                    if kj != ki {
                        others += mode[i];
                    }
                }
                let df = freqs[i] - omega[ki];
                let denom = 1.0 + 2.0 * cfg.alpha * df * df;
                u_hat[ki][i] = (f_hat_plus[i] - others + lambda_hat[i] * 0.5) / denom;
            }
            // Center frequency: power-weighted centroid of the positive half.
            let mut num = 0.0;
            let mut den = 0.0;
            for i in t / 2..t {
                let p = u_hat[ki][i].norm_sqr();
                num += freqs[i] * p;
                den += p;
            }
            if den > 0.0 {
                omega[ki] = num / den;
                debug_assert!((0.0..=0.5).contains(&omega[ki]));
            }
        }

        if cfg.tau_dual > 0.0 {
            for i in t / 2..t {
                let mut sum = zero;
                for mode in &u_hat {
                    sum += mode[i];
                }
                lambda_hat[i] += cfg.tau_dual * (f_hat_plus[i] - sum);
            }
        }

        // Worst-case relative change across modes.
        let mut metric: f64 = 0.0;
        for ki in 0..k {
            let mut diff = 0.0;
            let mut norm = 0.0;
            for i in t / 2..t {
                diff += (u_hat[ki][i] - prev[ki][i]).norm_sqr();
                norm += prev[ki][i].norm_sqr();
            }
            let ratio = if diff <= f64::MIN_POSITIVE {
                0.0
            } else if norm <= f64::MIN_POSITIVE {
                f64::INFINITY
            } else {
                diff / norm
            };
            metric = metric.max(ratio);
        }
        if !metric.is_nan() && metric < cfg.tol {
            converged = true;
            break;
        }
        if u_hat
            .iter()
            .any(|m| m.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()))
        {
            return Err(DenoiseError::Numeric(
                "mode spectra diverged during decomposition".into(),
            ));
        }
    }

    // Back to the time domain: rebuild a Hermitian-symmetric spectrum from
    // the positive half, inverse-shift, inverse-transform, and crop the
    // mirror extension (the middle half carries the original signal).
    let mut modes = Vec::with_capacity(k);
    for ki in 0..k {
        let mut full = vec![zero; t];
        for i in t / 2..t {
            full[i] = u_hat[ki][i];
        }
        for j in 0..t / 2 {
            full[t / 2 - j] = u_hat[ki][t / 2 + j].conj();
        }
        full[0] = full[t - 1].conj();

        let mut time = fftshift(&full);
        ifft.process(&mut time);
        let scale = 1.0 / t as f64;
        let mode: Vec<f64> = time[t / 4..t / 4 + n]
            .iter()
            .map(|c| c.re * scale)
            .collect();
        modes.push(mode[..n_orig].to_vec());
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| omega[a].total_cmp(&omega[b]));
    let modes: Vec<Vec<f64>> = order.iter().map(|&i| std::mem::take(&mut modes[i])).collect();
    let omega: Vec<f64> = order.iter().map(|&i| omega[i]).collect();

    Ok(VmdResult {
        modes,
        omega,
        iterations,
        converged,
    })
}
