//! Basic single-channel signal conditioning: Butterworth low-pass design,
//! causal and zero-phase IIR application, decimation, and per-segment
//! standardization.

use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite sample in channel `{channel}` at index {index}")]
    NonFinite { channel: String, index: usize },
    #[error("segment `{channel}` too short: {len} samples, need at least {min}")]
    TooShort {
        channel: String,
        len: usize,
        min: usize,
    },
}

/// A uniformly sampled single-channel signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub values: Vec<f64>,
    pub fs_hz: f64,
    pub channel_name: String,
}

impl Segment {
    pub fn new(values: Vec<f64>, fs_hz: f64, channel_name: impl Into<String>) -> Self {
        Segment {
            values,
            fs_hz,
            channel_name: channel_name.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Returns the index of the first non-finite sample, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }

    fn ensure_finite(&self) -> Result<(), DspError> {
        match self.first_non_finite() {
            Some(index) => Err(DspError::NonFinite {
                channel: self.channel_name.clone(),
                index,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Lowpass,
}

/// Transfer-function coefficients of a designed IIR filter, normalized so
/// that `a[0] == 1`. Both vectors have length `order + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IirCoefficients {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub order: usize,
    pub kind: FilterKind,
}

impl IirCoefficients {
    /// Complex frequency response H(e^{jw}) at `freq_hz` for sample rate `fs_hz`.
    pub fn response_at(&self, freq_hz: f64, fs_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / fs_hz;
        let z_inv = Complex64::new(0.0, -w).exp();
        let eval = |coeffs: &[f64]| {
            let mut acc = Complex64::new(0.0, 0.0);
            // Horner's rule in powers of z^{-1}.
            for &c in coeffs.iter().rev() {
                acc = acc * z_inv + c;
            }
            acc
        };
        eval(&self.b) / eval(&self.a)
    }

    /// Magnitude response at `freq_hz`.
    pub fn gain_at(&self, freq_hz: f64, fs_hz: f64) -> f64 {
        self.response_at(freq_hz, fs_hz).norm()
    }
}

/// Expands a monic polynomial from its complex roots, returning the real
/// coefficient vector `[1, c1, ..., cn]`. The imaginary parts must cancel,
/// which holds when roots come in conjugate pairs or are real.
fn real_poly_from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs.into_iter().map(|c| c.re).collect()
}

/// Designs a digital Butterworth low-pass filter by bilinear transform of the
/// analog prototype with frequency prewarping.
///
/// `order` must be in `1..=8` and `cutoff_hz` strictly inside `(0, fs_hz/2)`.
pub fn design_butterworth_lowpass(
    order: usize,
    cutoff_hz: f64,
    fs_hz: f64,
) -> Result<IirCoefficients, DspError> {
    if !(1..=8).contains(&order) {
        return Err(DspError::InvalidArgument(format!(
            "filter order must be in 1..=8, got {order}"
        )));
    }
    if !(fs_hz.is_finite() && fs_hz > 0.0) {
        return Err(DspError::InvalidArgument(format!(
            "sample rate must be positive, got {fs_hz}"
        )));
    }
    if !(cutoff_hz.is_finite() && cutoff_hz > 0.0 && cutoff_hz < fs_hz / 2.0) {
        return Err(DspError::InvalidArgument(format!(
            "cutoff {cutoff_hz} Hz must lie strictly inside (0, {}) Hz",
            fs_hz / 2.0
        )));
    }

    // Bilinear constant 2/T and prewarped analog cutoff so the digital filter
    // hits -3 dB exactly at cutoff_hz.
    let fs2 = 2.0 * fs_hz;
    let warped = fs2 * (PI * cutoff_hz / fs_hz).tan();

    // Analog prototype poles scaled to the warped cutoff. All lie strictly in
    // the left half-plane, spaced on the Butterworth circle.
    let n = order as i32;
    let analog_poles: Vec<Complex64> = (0..order)
        .map(|k| {
            let theta = PI * (2 * k as i32 + n + 1) as f64 / (2 * n) as f64;
            warped * Complex64::new(theta.cos(), theta.sin())
        })
        .collect();

    // Bilinear transform: poles map to (fs2 + p) / (fs2 - p), the n analog
    // zeros at infinity map to z = -1, and the gain picks up prod(fs2 - p)^-1.
    let mut gain = Complex64::new(warped.powi(n), 0.0);
    for p in &analog_poles {
        gain /= fs2 - p;
    }
    let digital_poles: Vec<Complex64> = analog_poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    let zeros = vec![Complex64::new(-1.0, 0.0); order];

    let a = real_poly_from_roots(&digital_poles);
    let b: Vec<f64> = real_poly_from_roots(&zeros)
        .into_iter()
        .map(|c| c * gain.re)
        .collect();

    debug_assert!(gain.im.abs() < 1e-9 * gain.re.abs().max(1e-30));
    Ok(IirCoefficients {
        b,
        a,
        order,
        kind: FilterKind::Lowpass,
    })
}

/// Direct-form II transposed single pass with zero initial state.
fn filter_pass(coeffs: &IirCoefficients, x: &[f64]) -> Vec<f64> {
    let b = &coeffs.b;
    let a = &coeffs.a;
    let order = coeffs.order;
    let mut state = vec![0.0_f64; order];
    let mut y = Vec::with_capacity(x.len());
    for &xi in x {
        let yi = b[0] * xi + state[0];
        for i in 0..order - 1 {
            state[i] = b[i + 1] * xi + state[i + 1] - a[i + 1] * yi;
        }
        state[order - 1] = b[order] * xi - a[order] * yi;
        y.push(yi);
    }
    y
}

/// Applies an IIR filter to a segment.
///
/// In causal mode this is a single forward pass from zero initial state. In
/// zero-phase mode the signal is mirror-padded by `3 * order` samples on each
/// side (clamped to `len - 1`), filtered forward and backward, and cropped;
/// the effective magnitude response is the square of the single-pass response
/// and the phase is zero.
pub fn apply_filter(
    coeffs: &IirCoefficients,
    segment: &Segment,
    zero_phase: bool,
) -> Result<Segment, DspError> {
    segment.ensure_finite()?;
    let n = segment.len();
    if n == 0 {
        return Err(DspError::TooShort {
            channel: segment.channel_name.clone(),
            len: 0,
            min: 1,
        });
    }
    let values = if zero_phase {
        let min = 3 * coeffs.order;
        if n < min {
            return Err(DspError::TooShort {
                channel: segment.channel_name.clone(),
                len: n,
                min,
            });
        }
        let pad = (3 * coeffs.order).min(n - 1);
        let x = &segment.values;
        let mut padded = Vec::with_capacity(n + 2 * pad);
        padded.extend((1..=pad).rev().map(|i| x[i]));
        padded.extend_from_slice(x);
        padded.extend((n - 1 - pad..n - 1).rev().map(|i| x[i]));

        let mut y = filter_pass(coeffs, &padded);
        y.reverse();
        let mut y = filter_pass(coeffs, &y);
        y.reverse();
        y[pad..pad + n].to_vec()
    } else {
        filter_pass(coeffs, &segment.values)
    };
    Ok(Segment {
        values,
        fs_hz: segment.fs_hz,
        channel_name: segment.channel_name.clone(),
    })
}

/// Keeps every `factor`-th sample starting at index 0 and divides the sample
/// rate accordingly. The caller is responsible for prior anti-alias filtering.
pub fn decimate(segment: &Segment, factor: usize) -> Result<Segment, DspError> {
    if factor == 0 {
        return Err(DspError::InvalidArgument(
            "decimation factor must be positive".into(),
        ));
    }
    let values: Vec<f64> = segment.values.iter().step_by(factor).copied().collect();
    Ok(Segment {
        values,
        fs_hz: segment.fs_hz / factor as f64,
        channel_name: segment.channel_name.clone(),
    })
}

/// Threshold below which a segment's population standard deviation is treated
/// as zero and the standardized output is all zeros.
pub const STD_FLOOR: f64 = 1e-8;

/// Standardizes a segment to zero mean and unit variance using the population
/// (1/N) standard deviation. Near-constant segments map to all zeros instead
/// of dividing by a vanishing denominator.
pub fn standardize_segment(segment: &Segment) -> Result<Segment, DspError> {
    segment.ensure_finite()?;
    if segment.is_empty() {
        return Err(DspError::TooShort {
            channel: segment.channel_name.clone(),
            len: 0,
            min: 1,
        });
    }
    let n = segment.len() as f64;
    let mean = segment.values.iter().sum::<f64>() / n;
    let var = segment
        .values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let values = if std < STD_FLOOR {
        vec![0.0; segment.len()]
    } else {
        segment.values.iter().map(|v| (v - mean) / std).collect()
    };
    Ok(Segment {
        values,
        fs_hz: segment.fs_hz,
        channel_name: segment.channel_name.clone(),
    })
}
