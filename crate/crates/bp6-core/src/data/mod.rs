//! Dataset pipeline: ingest raw 18-channel recordings, window, preprocess
//! into six-modal samples, label, split, and persist. Also hosts the
//! synthetic fixture generator for desk-scale testing.

mod store;
mod synth;

pub use store::{load_store, persist_store, read_sidecar, sidecar_path, write_sidecar, StoreSidecar};
pub use synth::{synth_generate, synth_generate_with_features, SynthFeatures};

use crate::denoise::{denoise_ecg_with, denoise_ppg_with, DenoiseError, EcgDenoiseConfig};
use crate::dsp::{self, DspError, IirCoefficients, Segment};
use crate::nn::MODALITY_CHANNELS;
use crate::train::TrainSample;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// Native sampling rate of the raw recordings.
pub const RAW_FS_HZ: f64 = 500.0;
/// Non-overlapping window length in raw samples (10 s at 500 Hz).
pub const WINDOW_LEN: usize = 5000;
/// Down-sampling factor applied after the anti-alias filter.
pub const DECIMATE_FACTOR: usize = 5;
/// Steps per preprocessed block.
pub const BLOCK_LEN: usize = WINDOW_LEN / DECIMATE_FACTOR;
/// Sampling rate of preprocessed blocks.
pub const BLOCK_FS_HZ: f64 = RAW_FS_HZ / DECIMATE_FACTOR as f64;
/// Anti-alias low-pass: 4th-order at 50 Hz, applied zero-phase.
pub const ANTIALIAS_CUTOFF_HZ: f64 = 50.0;
pub const ANTIALIAS_ORDER: usize = 4;

/// The 18 sensor channels, in canonical order. The auxiliary `peaks` column
/// is accepted in input files and dropped.
pub const CHANNEL_NAMES: [&str; 18] = [
    "ecg", "pleth_1", "pleth_2", "pleth_3", "pleth_4", "pleth_5", "pleth_6", "lc_1", "lc_2",
    "temp_1", "temp_2", "temp_3", "a_x", "a_y", "a_z", "g_x", "g_y", "g_z",
];

/// First channel index of each modality block in [`CHANNEL_NAMES`] order.
const MODALITY_STARTS: [usize; 6] = [0, 1, 7, 9, 12, 15];

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: missing channel {name}")]
    MissingChannel { path: String, name: String },
    #[error("{path}: unknown column {name}")]
    UnknownColumn { path: String, name: String },
    #[error("{path}: duplicate column {name}")]
    DuplicateColumn { path: String, name: String },
    #[error("{path}: row {row}, column {column}: cannot parse {value:?} as a number")]
    BadNumber { path: String, row: usize, column: String, value: String },
    #[error("{path}: row {row}, column {column}: non-finite value")]
    NonFiniteValue { path: String, row: usize, column: String },
    #[error("cannot infer (subject, motion state) from file name {0:?}; expected <subject>_<state>.csv")]
    BadFileName(String),
    #[error("unknown motion state {0:?}; expected run, walk, or sit")]
    BadMotionState(String),
    #[error("implausible annotation for {subject}/{state}: sbp {sbp}, dbp {dbp} (need 40 <= dbp < sbp <= 250)")]
    BadLabel { subject: String, state: String, sbp: f64, dbp: f64 },
    #[error("duplicate annotation for {subject}/{state}")]
    DuplicateAnnotation { subject: String, state: String },
    #[error("no annotation for: {}", keys.join(", "))]
    MissingAnnotation { keys: Vec<String> },
    #[error("window has {channels} channels of length {len}; expected 18 x {WINDOW_LEN}")]
    BadWindowShape { channels: usize, len: usize },
    #[error("preprocessing {subject}/{state} window {window}: {detail}")]
    Preprocess { subject: String, state: String, window: u32, detail: String },
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("sample {index} has no label; assign labels before persisting or training")]
    Unlabeled { index: usize },
    #[error("store format error: {0}")]
    Format(String),
    #[error("corrupt store: {0}")]
    CorruptStore(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MotionState {
    Run,
    Walk,
    Sit,
}

impl fmt::Display for MotionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotionState::Run => "run",
            MotionState::Walk => "walk",
            MotionState::Sit => "sit",
        })
    }
}

impl FromStr for MotionState {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "run" => Ok(MotionState::Run),
            "walk" => Ok(MotionState::Walk),
            "sit" => Ok(MotionState::Sit),
            other => Err(DataError::BadMotionState(other.to_string())),
        }
    }
}

/// One raw recording: 18 equal-length channels at 500 Hz in canonical order.
#[derive(Debug, Clone)]
pub struct Recording {
    pub subject_id: String,
    pub motion_state: MotionState,
    pub channels: Vec<Vec<f64>>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One row of the annotation file: the end-of-recording cuff readings for a
/// (subject, motion state) recording.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub subject_id: String,
    pub motion_state: MotionState,
    pub bp_sys_end: f64,
    pub bp_dia_end: f64,
}

/// Where a sample came from.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Provenance {
    pub subject_id: String,
    pub motion_state: MotionState,
    pub window_index: u32,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}#{}", self.subject_id, self.motion_state, self.window_index)
    }
}

/// One preprocessed sample: six standardized blocks of 1000 steps each with
/// channel counts (1, 6, 2, 3, 3, 3), stored row-major as f32, plus an
/// optional (SBP, DBP) label in mmHg.
#[derive(Debug, Clone, PartialEq)]
pub struct SixModalSample {
    pub blocks: [Vec<f32>; 6],
    pub label: Option<[f32; 2]>,
    pub provenance: Provenance,
}

impl SixModalSample {
    /// Shape of block `m` as (channels, steps).
    pub fn block_shape(m: usize) -> (usize, usize) {
        (MODALITY_CHANNELS[m], BLOCK_LEN)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (m, block) in self.blocks.iter().enumerate() {
            let (ch, len) = Self::block_shape(m);
            if block.len() != ch * len {
                return Err(DataError::BadWindowShape { channels: ch, len: block.len() });
            }
            if block.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteValue {
                    path: self.provenance.to_string(),
                    row: 0,
                    column: format!("block {m}"),
                });
            }
        }
        Ok(())
    }

    /// Converts to a training sample; requires a label.
    pub fn to_train_sample(&self) -> Result<TrainSample, DataError> {
        let label = self.label.ok_or(DataError::Unlabeled { index: 0 })?;
        let blocks = std::array::from_fn(|m| {
            let (ch, len) = Self::block_shape(m);
            let data = self.blocks[m].iter().map(|v| *v as f64).collect();
            Tensor::from_vec(&[ch, len], data).expect("validated block shape")
        });
        Ok(TrainSample {
            blocks,
            target: [label[0] as f64, label[1] as f64],
        })
    }
}

/// Converts labeled samples into training samples, failing on the first
/// unlabeled one.
pub fn to_train_samples(samples: &[SixModalSample]) -> Result<Vec<TrainSample>, DataError> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.to_train_sample()
                .map_err(|_| DataError::Unlabeled { index: i })
        })
        .collect()
}

fn parse_file_name(path: &Path) -> Result<(String, MotionState), DataError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| DataError::BadFileName(path.display().to_string()))?;
    let (subject, state) = stem
        .rsplit_once('_')
        .ok_or_else(|| DataError::BadFileName(stem.to_string()))?;
    if subject.is_empty() {
        return Err(DataError::BadFileName(stem.to_string()));
    }
    Ok((subject.to_string(), state.parse()?))
}

/// Reads one delimited-text recording. The file name must be
/// `<subject>_<state>.csv`; the header row must name every canonical channel
/// exactly once. A `peaks` column is allowed and dropped; any other unknown
/// column is a schema error. Rows containing non-numeric or non-finite
/// values are rejected with their (0-based) data row index.
pub fn ingest_recording(path: &Path) -> Result<Recording, DataError> {
    let (subject_id, motion_state) = parse_file_name(path)?;
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;

    let headers = reader.headers()?.clone();
    let mut col_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (idx, name) in headers.iter().enumerate() {
        if !CHANNEL_NAMES.contains(&name) && name != "peaks" {
            return Err(DataError::UnknownColumn { path: display, name: name.to_string() });
        }
        if col_of.insert(name, idx).is_some() {
            return Err(DataError::DuplicateColumn { path: display, name: name.to_string() });
        }
    }
    let mut columns = Vec::with_capacity(18);
    for name in CHANNEL_NAMES {
        match col_of.get(name) {
            Some(&idx) => columns.push(idx),
            None => {
                return Err(DataError::MissingChannel { path: display, name: name.to_string() })
            }
        }
    }

    let mut channels: Vec<Vec<f64>> = vec![Vec::new(); 18];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (slot, &idx) in columns.iter().enumerate() {
            let raw = record.get(idx).unwrap_or("");
            let value: f64 = raw.trim().parse().map_err(|_| DataError::BadNumber {
                path: display.clone(),
                row,
                column: CHANNEL_NAMES[slot].to_string(),
                value: raw.to_string(),
            })?;
            if !value.is_finite() {
                return Err(DataError::NonFiniteValue {
                    path: display.clone(),
                    row,
                    column: CHANNEL_NAMES[slot].to_string(),
                });
            }
            channels[slot].push(value);
        }
    }
    Ok(Recording { subject_id, motion_state, channels })
}

/// Reads the annotation file (columns `subject_id`, `motion_state`,
/// `bp_sys_end`, `bp_dia_end`; extra columns such as start-of-recording
/// readings are ignored). Every row is checked against the plausibility
/// gate 40 <= dbp < sbp <= 250.
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, DataError> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    let need = ["subject_id", "motion_state", "bp_sys_end", "bp_dia_end"];
    let mut cols = [0usize; 4];
    for (slot, name) in need.iter().enumerate() {
        cols[slot] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| DataError::MissingChannel {
                path: display.clone(),
                name: name.to_string(),
            })?;
    }

    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |slot: usize| record.get(cols[slot]).unwrap_or("").trim().to_string();
        let number = |slot: usize| -> Result<f64, DataError> {
            let raw = field(slot);
            raw.parse().map_err(|_| DataError::BadNumber {
                path: display.clone(),
                row,
                column: need[slot].to_string(),
                value: raw,
            })
        };
        let subject_id = field(0);
        let motion_state: MotionState = field(1).parse()?;
        let bp_sys_end = number(2)?;
        let bp_dia_end = number(3)?;
        if !(40.0 <= bp_dia_end && bp_dia_end < bp_sys_end && bp_sys_end <= 250.0) {
            return Err(DataError::BadLabel {
                subject: subject_id,
                state: motion_state.to_string(),
                sbp: bp_sys_end,
                dbp: bp_dia_end,
            });
        }
        if !seen.insert((subject_id.clone(), motion_state)) {
            return Err(DataError::DuplicateAnnotation {
                subject: subject_id,
                state: motion_state.to_string(),
            });
        }
        out.push(AnnotationRecord { subject_id, motion_state, bp_sys_end, bp_dia_end });
    }
    Ok(out)
}

/// One 18 x 5000 slice of a recording, tagged with its origin.
#[derive(Debug, Clone)]
pub struct RawWindow {
    pub provenance: Provenance,
    pub channels: Vec<Vec<f64>>,
}

/// Cuts a recording into non-overlapping 5000-sample windows; the trailing
/// remainder is dropped. A recording shorter than one window yields no
/// windows and a warning.
pub fn window_recording(rec: &Recording) -> Vec<RawWindow> {
    let n = rec.len() / WINDOW_LEN;
    if n == 0 {
        log::warn!(
            "{}/{}: {} samples is shorter than one {WINDOW_LEN}-sample window",
            rec.subject_id,
            rec.motion_state,
            rec.len()
        );
        return Vec::new();
    }
    (0..n)
        .map(|w| RawWindow {
            provenance: Provenance {
                subject_id: rec.subject_id.clone(),
                motion_state: rec.motion_state,
                window_index: w as u32,
            },
            channels: rec
                .channels
                .iter()
                .map(|ch| ch[w * WINDOW_LEN..(w + 1) * WINDOW_LEN].to_vec())
                .collect(),
        })
        .collect()
}

/// Tunable constants of the conditioning chain. The window length and
/// decimation factor are structural (they set every block shape) and stay
/// fixed at [`WINDOW_LEN`] and [`DECIMATE_FACTOR`].
#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub antialias_cutoff_hz: f64,
    pub antialias_order: usize,
    pub ecg: EcgDenoiseConfig,
    pub ppg_cutoff_hz: f64,
    pub ppg_order: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            antialias_cutoff_hz: ANTIALIAS_CUTOFF_HZ,
            antialias_order: ANTIALIAS_ORDER,
            ecg: EcgDenoiseConfig::default(),
            ppg_cutoff_hz: 7.0,
            ppg_order: 2,
        }
    }
}

fn preprocess_channel(
    name: &str,
    values: &[f64],
    lpf: &IirCoefficients,
    cfg: &PreprocessConfig,
) -> Result<Vec<f64>, DataError> {
    let seg = Segment::new(values.to_vec(), RAW_FS_HZ, name);
    let filtered = dsp::apply_filter(lpf, &seg, true)?;
    let decimated = dsp::decimate(&filtered, DECIMATE_FACTOR)?;
    let standardized = dsp::standardize_segment(&decimated)?;
    let denoised = match name {
        "ecg" => denoise_ecg_with(&standardized, &cfg.ecg)?,
        n if n.starts_with("pleth_") => {
            denoise_ppg_with(&standardized, cfg.ppg_cutoff_hz, cfg.ppg_order)?
        }
        _ => standardized,
    };
    Ok(denoised.values)
}

/// [`preprocess_window_with`] using the default constants.
pub fn preprocess_window(window: &RawWindow) -> Result<SixModalSample, DataError> {
    preprocess_window_with(window, &PreprocessConfig::default())
}

/// Runs the per-channel conditioning chain (anti-alias low-pass, decimate by
/// 5, standardize, then modality-specific denoising for ECG and PPG) and
/// groups the 18 channels into the six modality blocks.
pub fn preprocess_window_with(
    window: &RawWindow,
    cfg: &PreprocessConfig,
) -> Result<SixModalSample, DataError> {
    if window.channels.len() != 18 || window.channels.iter().any(|c| c.len() != WINDOW_LEN) {
        return Err(DataError::BadWindowShape {
            channels: window.channels.len(),
            len: window.channels.first().map_or(0, Vec::len),
        });
    }
    let context = |e: String| DataError::Preprocess {
        subject: window.provenance.subject_id.clone(),
        state: window.provenance.motion_state.to_string(),
        window: window.provenance.window_index,
        detail: e,
    };

    let lpf = dsp::design_butterworth_lowpass(cfg.antialias_order, cfg.antialias_cutoff_hz, RAW_FS_HZ)?;
    let mut blocks: [Vec<f32>; 6] = std::array::from_fn(|_| Vec::new());
    for (m, &start) in MODALITY_STARTS.iter().enumerate() {
        let mut block = Vec::with_capacity(MODALITY_CHANNELS[m] * BLOCK_LEN);
        for ch in start..start + MODALITY_CHANNELS[m] {
            let values = preprocess_channel(CHANNEL_NAMES[ch], &window.channels[ch], &lpf, cfg)
                .map_err(|e| context(e.to_string()))?;
            debug_assert_eq!(values.len(), BLOCK_LEN);
            block.extend(values.iter().map(|v| *v as f32));
        }
        blocks[m] = block;
    }
    let sample = SixModalSample {
        blocks,
        label: None,
        provenance: window.provenance.clone(),
    };
    sample.validate().map_err(|e| context(e.to_string()))?;
    Ok(sample)
}

/// Broadcasts each recording's end-of-recording cuff label onto all of its
/// windows. Fails if any (subject, state) present in `samples` lacks an
/// annotation, listing every unmatched key.
pub fn assign_labels(
    samples: &mut [SixModalSample],
    annotations: &[AnnotationRecord],
) -> Result<(), DataError> {
    let by_key: BTreeMap<(&str, MotionState), [f32; 2]> = annotations
        .iter()
        .map(|a| {
            (
                (a.subject_id.as_str(), a.motion_state),
                [a.bp_sys_end as f32, a.bp_dia_end as f32],
            )
        })
        .collect();
    let mut missing = BTreeSet::new();
    for sample in samples.iter() {
        let key = (sample.provenance.subject_id.as_str(), sample.provenance.motion_state);
        if !by_key.contains_key(&key) {
            missing.insert(format!("{}/{}", key.0, key.1));
        }
    }
    if !missing.is_empty() {
        return Err(DataError::MissingAnnotation { keys: missing.into_iter().collect() });
    }
    for sample in samples.iter_mut() {
        let key = (sample.provenance.subject_id.as_str(), sample.provenance.motion_state);
        sample.label = Some(by_key[&key]);
    }
    Ok(())
}

/// A seeded 7:1:2 partition of samples, disjoint by provenance.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SixModalSample>,
    pub validation: Vec<SixModalSample>,
    pub test: Vec<SixModalSample>,
    pub seed: u64,
}

/// Shuffles samples with the seeded generator and cuts at 70% / 10% /
/// remainder. Needs at least 10 samples so every part is nonempty.
pub fn split_dataset(samples: Vec<SixModalSample>, seed: u64) -> Result<DatasetSplit, DataError> {
    let n = samples.len();
    if n < 10 {
        return Err(DataError::TooFewSamples { n, min: 10 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = samples;
    samples.shuffle(&mut rng);
    let n_train = 7 * n / 10;
    let n_val = n / 10;
    let test = samples.split_off(n_train + n_val);
    let validation = samples.split_off(n_train);
    Ok(DatasetSplit { train: samples, validation, test, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::io::Write as _;

    fn write_recording_csv(
        path: &Path,
        names: &[&str],
        rows: usize,
        cell: impl Fn(usize, &str) -> String,
    ) {
        let mut f = std::fs::File::create(path).unwrap();
        writeln!(f, "{}", names.join(",")).unwrap();
        for r in 0..rows {
            let row: Vec<String> = names.iter().map(|n| cell(r, n)).collect();
            writeln!(f, "{}", row.join(",")).unwrap();
        }
    }

    fn all_columns() -> Vec<&'static str> {
        let mut names = CHANNEL_NAMES.to_vec();
        names.push("peaks");
        names
    }

    #[test]
    fn ingest_drops_peaks_and_orders_channels_canonically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s01_run.csv");
        // Shuffle the column order to prove ordering comes from the schema.
        let names = ["peaks", "g_z", "ecg", "pleth_2", "pleth_1", "pleth_3", "pleth_4", "pleth_5",
            "pleth_6", "lc_1", "lc_2", "temp_1", "temp_2", "temp_3", "a_x", "a_y", "a_z", "g_x", "g_y"];
        write_recording_csv(&path, &names, 3, |r, n| {
            if n == "ecg" {
                format!("{}", 10 * r)
            } else if n == "g_z" {
                format!("{}", r + 100)
            } else {
                "0.5".into()
            }
        });
        let rec = ingest_recording(&path).unwrap();
        assert_eq!(rec.subject_id, "s01");
        assert_eq!(rec.motion_state, MotionState::Run);
        assert_eq!(rec.channels.len(), 18);
        assert_eq!(rec.len(), 3);
        assert_eq!(rec.channels[0], vec![0.0, 10.0, 20.0]);
        assert_eq!(rec.channels[17], vec![100.0, 101.0, 102.0]);
    }

    #[test]
    fn ingest_schema_errors_name_the_offender() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("s02_walk.csv");
        let names: Vec<&str> = all_columns().into_iter().filter(|n| *n != "pleth_4").collect();
        write_recording_csv(&missing, &names, 2, |_, _| "1".into());
        match ingest_recording(&missing) {
            Err(DataError::MissingChannel { name, .. }) => assert_eq!(name, "pleth_4"),
            other => panic!("expected MissingChannel, got {other:?}"),
        }

        let unknown = dir.path().join("s03_sit.csv");
        let mut names = all_columns();
        names.push("bogus");
        write_recording_csv(&unknown, &names, 2, |_, _| "1".into());
        match ingest_recording(&unknown) {
            Err(DataError::UnknownColumn { name, .. }) => assert_eq!(name, "bogus"),
            other => panic!("expected UnknownColumn, got {other:?}"),
        }

        let badname = dir.path().join("norecording.csv");
        write_recording_csv(&badname, &all_columns(), 1, |_, _| "1".into());
        assert!(matches!(ingest_recording(&badname), Err(DataError::BadFileName(_))));

        let badstate = dir.path().join("s04_swim.csv");
        write_recording_csv(&badstate, &all_columns(), 1, |_, _| "1".into());
        assert!(matches!(ingest_recording(&badstate), Err(DataError::BadMotionState(_))));
    }

    #[test]
    fn ingest_rejects_bad_rows_with_their_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s05_run.csv");
        write_recording_csv(&path, &all_columns(), 4, |r, n| {
            if r == 2 && n == "lc_1" {
                "nan".into()
            } else {
                "1.0".into()
            }
        });
        match ingest_recording(&path) {
            Err(DataError::NonFiniteValue { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "lc_1");
            }
            other => panic!("expected NonFiniteValue, got {other:?}"),
        }

        let text = dir.path().join("s06_run.csv");
        write_recording_csv(&text, &all_columns(), 2, |r, n| {
            if r == 1 && n == "temp_2" {
                "oops".into()
            } else {
                "1.0".into()
            }
        });
        match ingest_recording(&text) {
            Err(DataError::BadNumber { row, column, value, .. }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (1, "temp_2", "oops"));
            }
            other => panic!("expected BadNumber, got {other:?}"),
        }

        // Ragged rows surface as parse errors from the reader.
        let ragged = dir.path().join("s07_run.csv");
        let mut f = std::fs::File::create(&ragged).unwrap();
        writeln!(f, "{}", all_columns().join(",")).unwrap();
        writeln!(f, "{}", vec!["1"; 19].join(",")).unwrap();
        writeln!(f, "1,2,3").unwrap();
        drop(f);
        assert!(matches!(ingest_recording(&ragged), Err(DataError::Csv(_))));
    }

    fn demo_recording(len: usize) -> Recording {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        Recording {
            subject_id: "s01".into(),
            motion_state: MotionState::Sit,
            channels: (0..18)
                .map(|c| {
                    (0..len)
                        .map(|i| {
                            let t = i as f64 / RAW_FS_HZ;
                            (2.0 * std::f64::consts::PI * (1.0 + c as f64 * 0.3) * t).sin()
                                + 0.1 * rng.gen_range(-1.0..1.0)
                        })
                        .collect()
                })
                .collect(),
        }
    }

    #[test]
    fn windowing_follows_floor_division() {
        let rec = demo_recording(12_000);
        let windows = window_recording(&rec);
        assert_eq!(windows.len(), 2);
        assert_eq!(windows[0].provenance.window_index, 0);
        assert_eq!(windows[1].provenance.window_index, 1);
        assert_eq!(windows[1].channels[3][0], rec.channels[3][WINDOW_LEN]);
        assert_eq!(window_recording(&demo_recording(WINDOW_LEN)).len(), 1);
        assert_eq!(window_recording(&demo_recording(WINDOW_LEN - 1)).len(), 0);
    }

    #[test]
    fn preprocessing_emits_the_block_shape_law() {
        let windows = window_recording(&demo_recording(WINDOW_LEN));
        let sample = preprocess_window(&windows[0]).unwrap();
        sample.validate().unwrap();
        for (m, want_ch) in MODALITY_CHANNELS.iter().enumerate() {
            assert_eq!(sample.blocks[m].len(), want_ch * BLOCK_LEN);
        }
        assert!(sample.label.is_none());
    }

    #[test]
    fn an_all_zero_window_maps_to_an_all_zero_sample() {
        let window = RawWindow {
            provenance: Provenance {
                subject_id: "s0".into(),
                motion_state: MotionState::Run,
                window_index: 0,
            },
            channels: vec![vec![0.0; WINDOW_LEN]; 18],
        };
        let sample = preprocess_window(&window).unwrap();
        for block in &sample.blocks {
            assert!(block.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn preprocessing_matches_the_hand_composed_chain() {
        let windows = window_recording(&demo_recording(WINDOW_LEN));
        let sample = preprocess_window(&windows[0]).unwrap();

        // Recompose the documented chain channel by channel and compare a
        // representative from each treatment class.
        use crate::denoise::{denoise_ecg, denoise_ppg};
        let compose = |name: &str, values: &[f64], ecg: bool, ppg: bool| -> Vec<f32> {
            let lpf = dsp::design_butterworth_lowpass(4, 50.0, 500.0).unwrap();
            let seg = Segment::new(values.to_vec(), 500.0, name);
            let f = dsp::apply_filter(&lpf, &seg, true).unwrap();
            let d = dsp::decimate(&f, 5).unwrap();
            let s = dsp::standardize_segment(&d).unwrap();
            let out = if ecg {
                denoise_ecg(&s).unwrap()
            } else if ppg {
                denoise_ppg(&s).unwrap()
            } else {
                s
            };
            out.values.iter().map(|v| *v as f32).collect()
        };
        let w = &windows[0];
        assert_eq!(sample.blocks[0], compose("ecg", &w.channels[0], true, false));
        assert_eq!(&sample.blocks[1][..BLOCK_LEN], compose("pleth_1", &w.channels[1], false, true));
        assert_eq!(
            &sample.blocks[3][BLOCK_LEN..2 * BLOCK_LEN],
            compose("temp_2", &w.channels[10], false, false)
        );
    }

    fn labeled_samples(n: usize) -> Vec<SixModalSample> {
        (0..n)
            .map(|i| SixModalSample {
                blocks: std::array::from_fn(|m| vec![0.0; MODALITY_CHANNELS[m] * BLOCK_LEN]),
                label: Some([120.0, 80.0]),
                provenance: Provenance {
                    subject_id: format!("s{:02}", i % 4),
                    motion_state: MotionState::Sit,
                    window_index: (i / 4) as u32,
                },
            })
            .collect()
    }

    #[test]
    fn labels_broadcast_per_recording_without_cross_contamination() {
        let mut samples = Vec::new();
        for (subject, state, windows) in
            [("s1", MotionState::Run, 3), ("s2", MotionState::Sit, 2)]
        {
            for w in 0..windows {
                samples.push(SixModalSample {
                    blocks: std::array::from_fn(|m| vec![0.0; MODALITY_CHANNELS[m] * BLOCK_LEN]),
                    label: None,
                    provenance: Provenance {
                        subject_id: subject.into(),
                        motion_state: state,
                        window_index: w,
                    },
                });
            }
        }
        let annotations = vec![
            AnnotationRecord {
                subject_id: "s1".into(),
                motion_state: MotionState::Run,
                bp_sys_end: 126.0,
                bp_dia_end: 77.0,
            },
            AnnotationRecord {
                subject_id: "s2".into(),
                motion_state: MotionState::Sit,
                bp_sys_end: 131.0,
                bp_dia_end: 82.0,
            },
        ];
        assign_labels(&mut samples, &annotations).unwrap();
        for s in &samples {
            let expected = if s.provenance.subject_id == "s1" {
                [126.0, 77.0]
            } else {
                [131.0, 82.0]
            };
            assert_eq!(s.label.unwrap(), expected);
        }

        let mut orphan = samples.clone();
        orphan[0].provenance.subject_id = "s9".into();
        match assign_labels(&mut orphan, &annotations) {
            Err(DataError::MissingAnnotation { keys }) => assert_eq!(keys, vec!["s9/run"]),
            other => panic!("expected MissingAnnotation, got {other:?}"),
        }
    }

    #[test]
    fn annotation_parsing_enforces_plausibility_and_uniqueness() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("ann.csv");
        std::fs::write(
            &good,
            "subject_id,motion_state,bp_sys_start,bp_sys_end,bp_dia_end\n\
             s1,run,118,126,77\n\
             s1,sit,117,121,79\n",
        )
        .unwrap();
        let anns = read_annotations(&good).unwrap();
        assert_eq!(anns.len(), 2);
        assert_eq!(anns[0].bp_sys_end, 126.0);

        let implausible = dir.path().join("bad.csv");
        std::fs::write(
            &implausible,
            "subject_id,motion_state,bp_sys_end,bp_dia_end\ns1,run,90,95\n",
        )
        .unwrap();
        assert!(matches!(read_annotations(&implausible), Err(DataError::BadLabel { .. })));

        let dup = dir.path().join("dup.csv");
        std::fs::write(
            &dup,
            "subject_id,motion_state,bp_sys_end,bp_dia_end\ns1,run,120,80\ns1,run,121,81\n",
        )
        .unwrap();
        assert!(matches!(read_annotations(&dup), Err(DataError::DuplicateAnnotation { .. })));
    }

    #[test]
    fn split_ratios_and_determinism() {
        let split = split_dataset(labeled_samples(100), 9).unwrap();
        assert_eq!(split.train.len(), 70);
        assert_eq!(split.validation.len(), 10);
        assert_eq!(split.test.len(), 20);

        let again = split_dataset(labeled_samples(100), 9).unwrap();
        assert_eq!(split.train, again.train);
        assert_eq!(split.test, again.test);

        let small = split_dataset(labeled_samples(10), 9).unwrap();
        assert_eq!(
            (small.train.len(), small.validation.len(), small.test.len()),
            (7, 1, 2)
        );
        assert!(matches!(
            split_dataset(labeled_samples(9), 9),
            Err(DataError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn split_parts_are_disjoint_and_cover_the_input() {
        let samples = labeled_samples(53);
        let all: BTreeSet<Provenance> = samples.iter().map(|s| s.provenance.clone()).collect();
        let split = split_dataset(samples, 77).unwrap();
        let mut seen = BTreeSet::new();
        for part in [&split.train, &split.validation, &split.test] {
            for s in part {
                assert!(seen.insert(s.provenance.clone()), "duplicate {}", s.provenance);
            }
        }
        assert_eq!(seen, all);
    }
}
