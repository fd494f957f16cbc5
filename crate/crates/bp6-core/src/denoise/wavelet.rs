//! Discrete wavelet transform with the 8-tap Daubechies filter (four
//! vanishing moments), periodic boundary handling, and universal soft
//! thresholding of detail coefficients.

use super::DenoiseError;

/// Scaling (low-pass) filter. Sums to sqrt(2), unit energy.
const DB4_LO: [f64; 8] = [
    0.2303778133088965,
    0.7148465705529157,
    0.6308807679298589,
    -0.027983769416859854,
    -0.18703481171909309,
    0.030841381835560763,
    0.0328830116668852,
    -0.010597401785069032,
];

/// Wavelet (high-pass) filter derived by the quadrature mirror relation
/// g[k] = (-1)^k h[L-1-k].
fn db4_hi() -> [f64; 8] {
    let mut g = [0.0; 8];
    for (k, gk) in g.iter_mut().enumerate() {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        *gk = sign * DB4_LO[7 - k];
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveletBasis {
    Db4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdRule {
    /// Per-level threshold sigma * sqrt(2 ln N), sigma estimated from the
    /// median absolute detail coefficient.
    UniversalSoft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
}

#[derive(Debug, Clone)]
pub struct WaveletConfig {
    pub basis: WaveletBasis,
    pub levels: usize,
    pub threshold_rule: ThresholdRule,
    pub boundary: Boundary,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        WaveletConfig {
            basis: WaveletBasis::Db4,
            levels: 4,
            threshold_rule: ThresholdRule::UniversalSoft,
            boundary: Boundary::Periodic,
        }
    }
}

/// Multi-level decomposition. `details[0]` is the finest level; lengths halve
/// per level and the coefficient counts sum to the padded input length.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    pub approx: Vec<f64>,
    pub details: Vec<Vec<f64>>,
    pub original_len: usize,
    pub padded_len: usize,
}

impl WaveletPyramid {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    pub fn coefficient_count(&self) -> usize {
        self.approx.len() + self.details.iter().map(Vec::len).sum::<usize>()
    }

    pub fn total_energy(&self) -> f64 {
        let e: f64 = self.approx.iter().map(|v| v * v).sum();
        e + self
            .details
            .iter()
            .map(|d| d.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
    }
}

/// One periodic analysis step: input of even length N produces N/2
/// approximation and N/2 detail coefficients.
fn analysis_step(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let hi = db4_hi();
    let half = n / 2;
    let mut approx = Vec::with_capacity(half);
    let mut detail = Vec::with_capacity(half);
    for m in 0..half {
        let mut a = 0.0;
        let mut d = 0.0;
        for k in 0..8 {
            let v = x[(2 * m + k) % n];
            a += DB4_LO[k] * v;
            d += hi[k] * v;
        }
        approx.push(a);
        detail.push(d);
    }
    (approx, detail)
}

/// Transpose of [`analysis_step`]; exact inverse because the periodized
/// filter bank is orthonormal.
fn synthesis_step(approx: &[f64], detail: &[f64]) -> Vec<f64> {
    let half = approx.len();
    let n = 2 * half;
    let hi = db4_hi();
    let mut x = vec![0.0; n];
    for m in 0..half {
        for k in 0..8 {
            x[(2 * m + k) % n] += DB4_LO[k] * approx[m] + hi[k] * detail[m];
        }
    }
    x
}

/// Pads a signal to the next multiple of 2^levels by mirror extension of the
/// tail (last sample repeated first, then reflecting inward).
pub fn pad_to_multiple(x: &[f64], levels: usize) -> Vec<f64> {
    let block = 1usize << levels;
    let n = x.len();
    let padded_len = n.div_ceil(block) * block;
    let mut out = Vec::with_capacity(padded_len);
    out.extend_from_slice(x);
    for j in 0..padded_len - n {
        out.push(x[n - 1 - (j % n)]);
    }
    out
}

fn validate(x_len: usize, cfg: &WaveletConfig) -> Result<usize, DenoiseError> {
    if cfg.levels == 0 {
        return Err(DenoiseError::InvalidArgument(
            "wavelet levels must be at least 1".into(),
        ));
    }
    if x_len == 0 {
        return Err(DenoiseError::InvalidArgument(
            "cannot transform an empty signal".into(),
        ));
    }
    let block = 1usize << cfg.levels;
    let padded_len = x_len.div_ceil(block) * block;
    // Every analysis level must see at least one filter length of samples;
    // the coarsest input has padded_len / 2^(levels-1) samples.
    if padded_len >> (cfg.levels - 1) < 8 {
        return Err(DenoiseError::InvalidArgument(format!(
            "{} levels too deep for length {x_len}",
            cfg.levels
        )));
    }
    Ok(padded_len)
}

/// Forward transform. Inputs whose length is not a multiple of 2^levels are
/// mirror-padded internally; the pyramid records the original length so the
/// inverse can crop.
pub fn dwt_db4(x: &[f64], cfg: &WaveletConfig) -> Result<WaveletPyramid, DenoiseError> {
    let padded_len = validate(x.len(), cfg)?;
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(DenoiseError::NonFinite {
            channel: "wavelet input".into(),
            index,
        });
    }
    let mut current = if padded_len == x.len() {
        x.to_vec()
    } else {
        pad_to_multiple(x, cfg.levels)
    };
    let mut details = Vec::with_capacity(cfg.levels);
    for _ in 0..cfg.levels {
        let (a, d) = analysis_step(&current);
        details.push(d);
        current = a;
    }
    Ok(WaveletPyramid {
        approx: current,
        details,
        original_len: x.len(),
        padded_len,
    })
}

/// Inverse transform; returns a signal of the pyramid's original length.
pub fn idwt_db4(pyramid: &WaveletPyramid) -> Vec<f64> {
    let mut current = pyramid.approx.clone();
    for d in pyramid.details.iter().rev() {
        current = synthesis_step(&current, d);
    }
    current.truncate(pyramid.original_len);
    current
}

pub fn soft_threshold(v: f64, lambda: f64) -> f64 {
    v.signum() * (v.abs() - lambda).max(0.0)
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Scale factor relating the median absolute deviation of a Gaussian sample
/// to its standard deviation.
const MAD_TO_SIGMA: f64 = 0.6745;

/// Universal threshold for one detail level.
pub fn universal_threshold(detail: &[f64]) -> f64 {
    if detail.is_empty() {
        return 0.0;
    }
    let mut abs: Vec<f64> = detail.iter().map(|v| v.abs()).collect();
    let sigma = median(&mut abs) / MAD_TO_SIGMA;
    sigma * (2.0 * (detail.len() as f64).ln()).sqrt()
}

/// Soft-thresholds every detail level with its own universal threshold. The
/// approximation band passes through untouched.
pub fn shrink_coefficients(pyramid: &WaveletPyramid, rule: ThresholdRule) -> WaveletPyramid {
    let ThresholdRule::UniversalSoft = rule;
    let details = pyramid
        .details
        .iter()
        .map(|d| {
            let lambda = universal_threshold(d);
            d.iter().map(|&v| soft_threshold(v, lambda)).collect()
        })
        .collect();
    WaveletPyramid {
        approx: pyramid.approx.clone(),
        details,
        original_len: pyramid.original_len,
        padded_len: pyramid.padded_len,
    }
}

/// Denoises a signal by transform, detail shrinkage, and inverse transform.
pub fn wavelet_denoise(x: &[f64], cfg: &WaveletConfig) -> Result<Vec<f64>, DenoiseError> {
    let pyramid = dwt_db4(x, cfg)?;
    let shrunk = shrink_coefficients(&pyramid, cfg.threshold_rule);
    Ok(idwt_db4(&shrunk))
}
