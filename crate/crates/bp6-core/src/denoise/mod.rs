//! Modality-specific denoising pipelines built from variational mode
//! decomposition, wavelet shrinkage, and low-pass prefilters.

pub mod vmd;
pub mod wavelet;

use crate::dsp::{self, DspError, Segment};
use thiserror::Error;
pub use vmd::{vmd_decompose, OmegaInit, VmdConfig, VmdResult};
pub use wavelet::{
    dwt_db4, idwt_db4, shrink_coefficients, wavelet_denoise, ThresholdRule, WaveletConfig,
    WaveletPyramid,
};

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite sample in `{channel}` at index {index}")]
    NonFinite { channel: String, index: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Configuration for the ECG denoising chain: a low-pass prefilter, mode
/// decomposition, and per-mode wavelet shrinkage.
#[derive(Debug, Clone)]
pub struct EcgDenoiseConfig {
    pub prefilter_cutoff_hz: f64,
    pub prefilter_order: usize,
    pub vmd: VmdConfig,
    pub wavelet: WaveletConfig,
}

impl Default for EcgDenoiseConfig {
    fn default() -> Self {
        EcgDenoiseConfig {
            prefilter_cutoff_hz: 40.0,
            prefilter_order: 4,
            vmd: VmdConfig::default(),
            wavelet: WaveletConfig::default(),
        }
    }
}

/// Denoises an ECG segment: zero-phase low-pass prefilter, decomposition into
/// band-limited modes, universal soft shrinkage of each mode's detail
/// coefficients, and summation of the cleaned modes.
pub fn denoise_ecg_with(segment: &Segment, cfg: &EcgDenoiseConfig) -> Result<Segment, DenoiseError> {
    let lpf = dsp::design_butterworth_lowpass(cfg.prefilter_order, cfg.prefilter_cutoff_hz, segment.fs_hz)?;
    let filtered = dsp::apply_filter(&lpf, segment, true)?;
    let decomposition = vmd_decompose(&filtered, &cfg.vmd)?;

    let mut out = vec![0.0; segment.len()];
    for mode in &decomposition.modes {
        let cleaned = wavelet_denoise(mode, &cfg.wavelet)?;
        for (o, c) in out.iter_mut().zip(&cleaned) {
            *o += c;
        }
    }
    Ok(Segment {
        values: out,
        fs_hz: segment.fs_hz,
        channel_name: segment.channel_name.clone(),
    })
}

/// [`denoise_ecg_with`] using default parameters.
pub fn denoise_ecg(segment: &Segment) -> Result<Segment, DenoiseError> {
    denoise_ecg_with(segment, &EcgDenoiseConfig::default())
}

/// Denoises a PPG segment with a zero-phase second-order 7 Hz low-pass.
pub fn denoise_ppg(segment: &Segment) -> Result<Segment, DenoiseError> {
    denoise_ppg_with(segment, 7.0, 2)
}

pub fn denoise_ppg_with(
    segment: &Segment,
    cutoff_hz: f64,
    order: usize,
) -> Result<Segment, DenoiseError> {
    let lpf = dsp::design_butterworth_lowpass(order, cutoff_hz, segment.fs_hz)?;
    Ok(dsp::apply_filter(&lpf, segment, true)?)
}
