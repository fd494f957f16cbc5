//! Synthetic six-modal fixtures for desk-scale testing.
//!
//! Each sample embeds its (SBP, DBP) label in the signals through two
//! physiologically shaped carriers: the ECG-to-PPG pulse delay falls
//! monotonically with SBP, and the PPG pulse amplitude (relative to a fixed
//! noise floor) rises monotonically with DBP. The remaining modalities are
//! band-limited noise. All channels are standardized, so the mapping is
//! recoverable only from waveform structure, not raw scale.

use super::{DataError, MotionState, Provenance, SixModalSample, BLOCK_FS_HZ, BLOCK_LEN};
use crate::dsp::{self, IirCoefficients, Segment};
use crate::nn::MODALITY_CHANNELS;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// The generator internals for one sample, exposed for learnability checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthFeatures {
    /// ECG-to-PPG pulse delay in seconds; affine and decreasing in SBP.
    pub delay_s: f64,
    /// PPG pulse amplitude before standardization; affine and increasing in DBP.
    pub amplitude: f64,
    pub heart_rate_hz: f64,
}

const ECG_BUMP_SIGMA_S: f64 = 0.02;
const PPG_NOISE_LEVEL: f64 = 0.15;
/// Per-channel extra delay, seconds, mimicking staggered sensor sites.
const PPG_SITE_OFFSET_S: f64 = 0.005;

pub(crate) fn delay_of_sbp(sbp: f64) -> f64 {
    0.45 - 0.004 * (sbp - 90.0)
}

pub(crate) fn amplitude_of_dbp(dbp: f64) -> f64 {
    0.5 + 0.02 * (dbp - 60.0)
}

fn bump_train(centers: &[f64], sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; BLOCK_LEN];
    for (i, v) in out.iter_mut().enumerate() {
        let t = i as f64 / BLOCK_FS_HZ;
        for &c in centers {
            let z = (t - c) / sigma;
            if z.abs() < 6.0 {
                *v += (-0.5 * z * z).exp();
            }
        }
    }
    out
}

fn standardized(values: Vec<f64>, name: &str) -> Result<Vec<f64>, DataError> {
    Ok(dsp::standardize_segment(&Segment::new(values, BLOCK_FS_HZ, name))?.values)
}

fn lowpassed(values: Vec<f64>, lpf: &IirCoefficients, name: &str) -> Result<Vec<f64>, DataError> {
    Ok(dsp::apply_filter(lpf, &Segment::new(values, BLOCK_FS_HZ, name), true)?.values)
}

fn band_limited_noise(
    rng: &mut ChaCha8Rng,
    lpf: &IirCoefficients,
    name: &str,
) -> Result<Vec<f64>, DataError> {
    let white: Vec<f64> = (0..BLOCK_LEN).map(|_| rng.sample(StandardNormal)).collect();
    standardized(lowpassed(white, lpf, name)?, name)
}

fn to_f32(values: &[f64]) -> Vec<f32> {
    values.iter().map(|v| *v as f32).collect()
}

fn synth_sample(
    index: usize,
    sbp: f64,
    dbp: f64,
    lpf: &IirCoefficients,
    rng: &mut ChaCha8Rng,
) -> Result<(SixModalSample, SynthFeatures), DataError> {
    let heart_rate_hz = rng.gen_range(1.0..2.0);
    let period = 1.0 / heart_rate_hz;
    let phase: f64 = rng.gen_range(0.0..period);
    let delay_s = delay_of_sbp(sbp);
    let amplitude = amplitude_of_dbp(dbp);

    let span = BLOCK_LEN as f64 / BLOCK_FS_HZ;
    let mut centers = Vec::new();
    let mut k = -3i64;
    loop {
        let t = phase + k as f64 * period;
        if t > span + 0.6 {
            break;
        }
        if t > -0.6 {
            centers.push(t);
        }
        k += 1;
    }

    let ecg = standardized(bump_train(&centers, ECG_BUMP_SIGMA_S), "ecg")?;

    let mut ppg = Vec::with_capacity(6 * BLOCK_LEN);
    for c in 0..6 {
        let shifted: Vec<f64> = centers
            .iter()
            .map(|t| t + delay_s + PPG_SITE_OFFSET_S * c as f64)
            .collect();
        let name = format!("pleth_{}", c + 1);
        let pulse = standardized(
            lowpassed(bump_train(&shifted, ECG_BUMP_SIGMA_S), lpf, &name)?,
            &name,
        )?;
        let noise = band_limited_noise(rng, lpf, &name)?;
        let mixed: Vec<f64> = pulse
            .iter()
            .zip(&noise)
            .map(|(p, n)| amplitude * p + PPG_NOISE_LEVEL * n)
            .collect();
        ppg.extend(standardized(mixed, &name)?);
    }

    let mut blocks: [Vec<f32>; 6] = std::array::from_fn(|_| Vec::new());
    blocks[0] = to_f32(&ecg);
    blocks[1] = to_f32(&ppg);
    for (m, name) in [(2usize, "lc"), (3, "temp"), (4, "a"), (5, "g")] {
        let mut block = Vec::with_capacity(MODALITY_CHANNELS[m] * BLOCK_LEN);
        for c in 0..MODALITY_CHANNELS[m] {
            block.extend(to_f32(&band_limited_noise(rng, lpf, &format!("{name}_{c}"))?));
        }
        blocks[m] = block;
    }

    let sample = SixModalSample {
        blocks,
        label: Some([sbp as f32, dbp as f32]),
        provenance: Provenance {
            subject_id: format!("synth_{index:04}"),
            motion_state: MotionState::Sit,
            window_index: 0,
        },
    };
    sample.validate()?;
    Ok((sample, SynthFeatures { delay_s, amplitude, heart_rate_hz }))
}

/// Generates `n` labeled samples plus the generator features each one
/// embeds. Deterministic for a fixed seed.
pub fn synth_generate_with_features(
    n: usize,
    seed: u64,
) -> Result<(Vec<SixModalSample>, Vec<SynthFeatures>), DataError> {
    let lpf = dsp::design_butterworth_lowpass(2, 7.0, BLOCK_FS_HZ)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        let sbp = rng.gen_range(90.0..140.0);
        let dbp = rng.gen_range(60.0..90.0);
        let (sample, feats) = synth_sample(i, sbp, dbp, &lpf, &mut rng)?;
        samples.push(sample);
        features.push(feats);
    }
    Ok((samples, features))
}

/// [`synth_generate_with_features`] without the feature sidecar.
pub fn synth_generate(n: usize, seed: u64) -> Result<Vec<SixModalSample>, DataError> {
    Ok(synth_generate_with_features(n, seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = synth_generate(6, 7).unwrap();
        let b = synth_generate(6, 7).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(6, 8).unwrap();
        assert_ne!(a[0].blocks[0], c[0].blocks[0]);
    }

    #[test]
    fn labels_are_plausible_and_blocks_standardized() {
        let (samples, features) = synth_generate_with_features(20, 9).unwrap();
        assert_eq!(samples.len(), 20);
        for (s, f) in samples.iter().zip(&features) {
            let [sbp, dbp] = s.label.unwrap();
            assert!((90.0..140.0).contains(&sbp));
            assert!((60.0..90.0).contains(&dbp));
            assert!(dbp < sbp);
            s.validate().unwrap();
            assert!((1.0..2.0).contains(&f.heart_rate_hz));
            // Every channel is z-scored: mean ~0, population std ~1.
            for (m, block) in s.blocks.iter().enumerate() {
                for ch in block.chunks(super::BLOCK_LEN) {
                    let n = ch.len() as f64;
                    let mean = ch.iter().map(|v| *v as f64).sum::<f64>() / n;
                    let var =
                        ch.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
                    assert!(mean.abs() < 1e-3, "block {m} mean {mean}");
                    assert!((var - 1.0).abs() < 1e-3, "block {m} var {var}");
                }
            }
        }
    }

    #[test]
    fn known_features_recover_labels_affinely() {
        let (samples, features) = synth_generate_with_features(64, 10).unwrap();
        let rows: Vec<[f64; 3]> = features.iter().map(|f| [1.0, f.delay_s, f.amplitude]).collect();

        // Closed-form least squares via the 3x3 normal equations.
        let solve = |targets: Vec<f64>| -> [f64; 3] {
            let mut ata = [[0.0f64; 3]; 3];
            let mut atb = [0.0f64; 3];
            for (x, y) in rows.iter().zip(&targets) {
                for i in 0..3 {
                    for j in 0..3 {
                        ata[i][j] += x[i] * x[j];
                    }
                    atb[i] += x[i] * y;
                }
            }
            // Gaussian elimination with partial pivoting.
            let mut m = [[0.0f64; 4]; 3];
            for i in 0..3 {
                m[i][..3].copy_from_slice(&ata[i]);
                m[i][3] = atb[i];
            }
            for col in 0..3 {
                let pivot = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
                m.swap(col, pivot);
                for row in col + 1..3 {
                    let f = m[row][col] / m[col][col];
                    for k in col..4 {
                        m[row][k] -= f * m[col][k];
                    }
                }
            }
            let mut beta = [0.0f64; 3];
            for row in (0..3).rev() {
                let mut acc = m[row][3];
                for k in row + 1..3 {
                    acc -= m[row][k] * beta[k];
                }
                beta[row] = acc / m[row][row];
            }
            beta
        };

        for target in 0..2 {
            let y: Vec<f64> = samples.iter().map(|s| s.label.unwrap()[target] as f64).collect();
            let beta = solve(y.clone());
            let mae = rows
                .iter()
                .zip(&y)
                .map(|(x, y)| (x[0] * beta[0] + x[1] * beta[1] + x[2] * beta[2] - y).abs())
                .sum::<f64>()
                / y.len() as f64;
            assert!(mae < 2.0, "target {target}: affine fit MAE {mae}");
        }
    }

    #[test]
    fn the_pulse_delay_is_visible_in_the_signals() {
        let (samples, features) = synth_generate_with_features(12, 11).unwrap();
        for (s, f) in samples.iter().zip(&features) {
            let ecg: Vec<f64> = s.blocks[0].iter().map(|v| *v as f64).collect();
            let ppg: Vec<f64> = s.blocks[1][..BLOCK_LEN].iter().map(|v| *v as f64).collect();
            // The first PPG site has no extra offset; the pulse lag against
            // the ECG peaks where the cross-correlation does. Delays span
            // 0.25..0.45 s, within half a beat period, so the search window
            // contains exactly one candidate peak.
            let (mut best_lag, mut best) = (0usize, f64::NEG_INFINITY);
            for lag in 20..=50 {
                let score: f64 = (0..BLOCK_LEN - lag).map(|i| ecg[i] * ppg[i + lag]).sum();
                if score > best {
                    best = score;
                    best_lag = lag;
                }
            }
            let estimated = best_lag as f64 / BLOCK_FS_HZ;
            assert!(
                (estimated - f.delay_s).abs() <= 0.025,
                "delay {} estimated {estimated}",
                f.delay_s
            );
        }
    }

    #[test]
    fn a_higher_dbp_raises_the_pulse_to_noise_ratio() {
        // Same sample index and generator state, two different DBP values:
        // the only difference is the embedded amplitude, which must lift the
        // pulse component relative to the fixed noise floor.
        let lpf = dsp::design_butterworth_lowpass(2, 7.0, BLOCK_FS_HZ).unwrap();
        let make = |dbp: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(51);
            synth_sample(0, 120.0, dbp, &lpf, &mut rng).unwrap()
        };
        let (low, feat_low) = make(61.0);
        let (high, feat_high) = make(88.0);
        assert!(feat_high.amplitude > feat_low.amplitude);
        assert_eq!(feat_low.delay_s, feat_high.delay_s);

        // Between pulses the standardized channel holds only scaled noise,
        // so its local variance falls as the amplitude rises.
        let floor_var = |s: &SixModalSample, f: &SynthFeatures| {
            let ppg: Vec<f64> = s.blocks[1][..BLOCK_LEN].iter().map(|v| *v as f64).collect();
            let ecg: Vec<f64> = s.blocks[0].iter().map(|v| *v as f64).collect();
            // Standardization pushes the between-bump baseline below zero,
            // so only clearly positive excursions mark a QRS bump.
            let pulse_at = |i: usize| {
                let lag = (f.delay_s * BLOCK_FS_HZ).round() as usize;
                i >= lag && ecg[i - lag] > 0.5
            };
            let quiet: Vec<f64> = (0..BLOCK_LEN)
                .filter(|&i| {
                    let lo = i.saturating_sub(12);
                    let hi = (i + 12).min(BLOCK_LEN - 1);
                    (lo..=hi).all(|j| !pulse_at(j))
                })
                .map(|i| ppg[i])
                .collect();
            assert!(quiet.len() > 100, "not enough quiet samples: {}", quiet.len());
            quiet.iter().map(|v| v * v).sum::<f64>() / quiet.len() as f64
        };
        let v_low = floor_var(&low, &feat_low);
        let v_high = floor_var(&high, &feat_high);
        assert!(
            v_high < v_low,
            "noise floor should shrink as amplitude grows: {v_low} -> {v_high}"
        );
    }
}
