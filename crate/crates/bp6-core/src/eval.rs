//! Clinical agreement metrics: error statistics, BHS grading, AAMI numeric
//! compliance, Bland-Altman analysis, and plot-ready report export.
//!
//! Report files are written so that the serialized per-sample table is the
//! source of truth: summary statistics are computed from the rounded
//! per-sample values, which makes re-reading the CSV and recomputing the
//! statistics reproduce the JSON exactly.

use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and reference lengths differ: {pred} vs {reference}")]
    LengthMismatch { pred: usize, reference: usize },
    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Summary statistics of `pred - reference` errors, all in mmHg.
/// `sde` is the sample (n-1) standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorStats {
    pub n: usize,
    pub mae: f64,
    pub me: f64,
    pub sde: f64,
    pub rmse: f64,
}

/// Computes signed errors `pred[i] - reference[i]`.
pub fn errors_of(pred: &[f64], reference: &[f64]) -> Result<Vec<f64>, EvalError> {
    if pred.len() != reference.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            reference: reference.len(),
        });
    }
    let errors: Vec<f64> = pred.iter().zip(reference).map(|(p, r)| p - r).collect();
    if let Some(i) = errors.iter().position(|e| !e.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    Ok(errors)
}

/// Error statistics of predictions against references. Needs n >= 2 because
/// the sample standard deviation is undefined for a single point.
pub fn compute_errors(pred: &[f64], reference: &[f64]) -> Result<ErrorStats, EvalError> {
    let errors = errors_of(pred, reference)?;
    stats_from_errors(&errors)
}

/// Error statistics from a precomputed signed-error vector.
pub fn stats_from_errors(errors: &[f64]) -> Result<ErrorStats, EvalError> {
    let n = errors.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples { n, min: 2 });
    }
    let nf = n as f64;
    let me = errors.iter().sum::<f64>() / nf;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / nf;
    let msq = errors.iter().map(|e| e * e).sum::<f64>() / nf;
    let rmse = msq.sqrt();
    let var = errors.iter().map(|e| (e - me) * (e - me)).sum::<f64>() / (nf - 1.0);
    Ok(ErrorStats { n, mae, me, sde: var.sqrt(), rmse })
}

/// Mean arterial pressure from systolic and diastolic pressure, using the
/// standard clinical weighting (SBP + 2 DBP) / 3.
pub fn map_from_bp(sbp: f64, dbp: f64) -> f64 {
    (sbp + 2.0 * dbp) / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BhsGrade {
    A,
    B,
    C,
    D,
}

impl fmt::Display for BhsGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BhsGrade::A => "A",
            BhsGrade::B => "B",
            BhsGrade::C => "C",
            BhsGrade::D => "D",
        };
        f.write_str(s)
    }
}

/// Cumulative percentages of absolute errors within 5, 10, and 15 mmHg,
/// and the grade they earn. Thresholds are inclusive on both the error
/// (|e| <= 5 counts toward the 5 mmHg bucket) and the percentage
/// ("at least 60%" admits exactly 60%).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BhsReport {
    pub pct_le_5: f64,
    pub pct_le_10: f64,
    pub pct_le_15: f64,
    pub grade: BhsGrade,
}

const BHS_ROWS: [(BhsGrade, [f64; 3]); 3] = [
    (BhsGrade::A, [60.0, 85.0, 95.0]),
    (BhsGrade::B, [50.0, 75.0, 90.0]),
    (BhsGrade::C, [40.0, 65.0, 85.0]),
];

impl BhsReport {
    /// Grades cumulative percentages directly.
    pub fn from_percentages(pct_le_5: f64, pct_le_10: f64, pct_le_15: f64) -> Self {
        let pcts = [pct_le_5, pct_le_10, pct_le_15];
        let grade = BHS_ROWS
            .iter()
            .find(|(_, req)| pcts.iter().zip(req).all(|(p, r)| p >= r))
            .map(|(g, _)| *g)
            .unwrap_or(BhsGrade::D);
        BhsReport { pct_le_5, pct_le_10, pct_le_15, grade }
    }
}

/// Grades a signed-error vector against the cumulative-percentage protocol.
pub fn bhs_grade(errors: &[f64]) -> Result<BhsReport, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::TooFewSamples { n: 0, min: 1 });
    }
    let nf = errors.len() as f64;
    let pct = |limit: f64| 100.0 * errors.iter().filter(|e| e.abs() <= limit).count() as f64 / nf;
    Ok(BhsReport::from_percentages(pct(5.0), pct(10.0), pct(15.0)))
}

/// Numeric device criterion: |mean error| <= 5 mmHg and error SD <= 8 mmHg,
/// with full compliance additionally requiring at least 85 subjects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AamiReport {
    pub me: f64,
    pub sde: f64,
    pub n_subjects: usize,
    pub numeric_pass: bool,
    pub fully_compliant: bool,
}

impl AamiReport {
    pub fn from_stats(me: f64, sde: f64, n_subjects: usize) -> Self {
        let numeric_pass = me.abs() <= 5.0 && sde <= 8.0;
        AamiReport {
            me,
            sde,
            n_subjects,
            numeric_pass,
            fully_compliant: numeric_pass && n_subjects >= 85,
        }
    }
}

pub fn aami_check(pred: &[f64], reference: &[f64], n_subjects: usize) -> Result<AamiReport, EvalError> {
    let stats = compute_errors(pred, reference)?;
    Ok(AamiReport::from_stats(stats.me, stats.sde, n_subjects))
}

/// Agreement between two measurement methods: bias and 95% limits of
/// agreement of the paired differences, plus the (mean, difference) pairs
/// for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct BlandAltman {
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub pairs: Vec<(f64, f64)>,
}

pub fn bland_altman(pred: &[f64], reference: &[f64]) -> Result<BlandAltman, EvalError> {
    let errors = errors_of(pred, reference)?;
    let n = errors.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples { n, min: 2 });
    }
    let nf = n as f64;
    let bias = errors.iter().sum::<f64>() / nf;
    let var = errors.iter().map(|e| (e - bias) * (e - bias)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    let pairs = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| (0.5 * (p + r), p - r))
        .collect();
    Ok(BlandAltman {
        bias,
        loa_low: bias - 1.96 * sd,
        loa_high: bias + 1.96 * sd,
        pairs,
    })
}

/// Rounds to six significant digits, the precision used in all report files.
pub fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float reparses")
}

fn fmt6(x: f64) -> String {
    format!("{}", sig6(x))
}

/// One evaluated segment: predicted and reference SBP/DBP in mmHg.
#[derive(Debug, Clone, Copy)]
pub struct EvalPair {
    pub pred_sbp: f64,
    pub pred_dbp: f64,
    pub ref_sbp: f64,
    pub ref_dbp: f64,
}

/// Provenance recorded alongside the report.
#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Serialize)]
struct TargetReport {
    mae: f64,
    me: f64,
    sde: f64,
    rmse: f64,
    bhs: BhsReport,
    aami: AamiReport,
}

#[derive(Debug, Serialize)]
struct ReportJson {
    n: usize,
    seed: u64,
    config_hash: String,
    targets: BTreeMap<&'static str, TargetReport>,
}

fn round_report(r: &mut TargetReport) {
    r.mae = sig6(r.mae);
    r.me = sig6(r.me);
    r.sde = sig6(r.sde);
    r.rmse = sig6(r.rmse);
    r.bhs.pct_le_5 = sig6(r.bhs.pct_le_5);
    r.bhs.pct_le_10 = sig6(r.bhs.pct_le_10);
    r.bhs.pct_le_15 = sig6(r.bhs.pct_le_15);
    r.aami.me = sig6(r.aami.me);
    r.aami.sde = sig6(r.aami.sde);
}

fn target_report(pred: &[f64], reference: &[f64], n_subjects: usize) -> Result<TargetReport, EvalError> {
    let stats = compute_errors(pred, reference)?;
    let errors = errors_of(pred, reference)?;
    Ok(TargetReport {
        mae: stats.mae,
        me: stats.me,
        sde: stats.sde,
        rmse: stats.rmse,
        bhs: bhs_grade(&errors)?,
        aami: AamiReport::from_stats(stats.me, stats.sde, n_subjects),
    })
}

fn write_histogram(path: &Path, errors: &[f64]) -> Result<(), EvalError> {
    let mut bins: BTreeMap<i64, u64> = BTreeMap::new();
    for e in errors {
        *bins.entry(e.floor() as i64).or_insert(0) += 1;
    }
    let mut f = fs::File::create(path)?;
    writeln!(f, "error_low_mmhg,error_high_mmhg,count")?;
    for (lo, count) in bins {
        writeln!(f, "{lo},{},{count}", lo + 1)?;
    }
    Ok(())
}

fn write_bland_altman(path: &Path, ba: &BlandAltman) -> Result<(), EvalError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "mean_mmhg,difference_mmhg")?;
    for (mean, diff) in &ba.pairs {
        writeln!(f, "{},{}", fmt6(*mean), fmt6(*diff))?;
    }
    Ok(())
}

/// Writes the full evaluation report into `dir`:
/// `report.json` (summary statistics per target), `per_sample.csv`
/// (rounded predictions, references, and errors; the statistics in the JSON
/// are computed from exactly these values), `bland_altman_{sbp,dbp}.csv`,
/// and `error_hist_{sbp,dbp}.csv` with 1 mmHg bins.
pub fn export_report(
    dir: &Path,
    pairs: &[EvalPair],
    n_subjects: usize,
    meta: &ReportMeta,
) -> Result<(), EvalError> {
    if pairs.len() < 2 {
        return Err(EvalError::TooFewSamples { n: pairs.len(), min: 2 });
    }
    fs::create_dir_all(dir)?;

    // Round the per-sample values first; everything downstream is computed
    // from the rounded copies so the CSV reproduces the JSON.
    let ps: Vec<[f64; 4]> = pairs
        .iter()
        .map(|p| [sig6(p.pred_sbp), sig6(p.pred_dbp), sig6(p.ref_sbp), sig6(p.ref_dbp)])
        .collect();

    let mut f = fs::File::create(dir.join("per_sample.csv"))?;
    writeln!(f, "pred_sbp,pred_dbp,ref_sbp,ref_dbp,err_sbp,err_dbp")?;
    for r in &ps {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r[0], r[1], r[2], r[3], fmt6(r[0] - r[2]), fmt6(r[1] - r[3])
        )?;
    }
    drop(f);

    let pred_sbp: Vec<f64> = ps.iter().map(|r| r[0]).collect();
    let pred_dbp: Vec<f64> = ps.iter().map(|r| r[1]).collect();
    let ref_sbp: Vec<f64> = ps.iter().map(|r| r[2]).collect();
    let ref_dbp: Vec<f64> = ps.iter().map(|r| r[3]).collect();
    let pred_map: Vec<f64> = ps.iter().map(|r| map_from_bp(r[0], r[1])).collect();
    let ref_map: Vec<f64> = ps.iter().map(|r| map_from_bp(r[2], r[3])).collect();

    let mut targets = BTreeMap::new();
    let mut sbp_rep = target_report(&pred_sbp, &ref_sbp, n_subjects)?;
    let mut dbp_rep = target_report(&pred_dbp, &ref_dbp, n_subjects)?;
    let mut map_rep = target_report(&pred_map, &ref_map, n_subjects)?;
    round_report(&mut sbp_rep);
    round_report(&mut dbp_rep);
    round_report(&mut map_rep);
    targets.insert("sbp", sbp_rep);
    targets.insert("dbp", dbp_rep);
    targets.insert("map", map_rep);

    let report = ReportJson {
        n: pairs.len(),
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
        targets,
    };
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;

    write_bland_altman(&dir.join("bland_altman_sbp.csv"), &bland_altman(&pred_sbp, &ref_sbp)?)?;
    write_bland_altman(&dir.join("bland_altman_dbp.csv"), &bland_altman(&pred_dbp, &ref_dbp)?)?;
    let err_sbp: Vec<f64> = errors_of(&pred_sbp, &ref_sbp)?;
    let err_dbp: Vec<f64> = errors_of(&pred_dbp, &ref_dbp)?;
    write_histogram(&dir.join("error_hist_sbp.csv"), &err_sbp)?;
    write_histogram(&dir.join("error_hist_dbp.csv"), &err_dbp)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn perfect_predictions_give_zero_stats() {
        let v = vec![120.0, 118.0, 95.5];
        let s = compute_errors(&v, &v).unwrap();
        assert_eq!(s.n, 3);
        assert_eq!((s.mae, s.me, s.sde, s.rmse), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn hand_computed_plus_minus_one() {
        let s = compute_errors(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert!((s.mae - 1.0).abs() < 1e-15);
        assert!(s.me.abs() < 1e-15);
        assert!((s.sde - 2.0f64.sqrt()).abs() < 1e-12);
        assert!((s.rmse - 1.0).abs() < 1e-15);
        assert!(s.mae <= s.rmse);
    }

    #[test]
    fn sde_recovers_the_generator_sd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dist = Normal::new(0.0, 4.0).unwrap();
        let errors: Vec<f64> = (0..1000).map(|_| dist.sample(&mut rng)).collect();
        let s = stats_from_errors(&errors).unwrap();
        assert!(s.sde > 3.6 && s.sde < 4.4, "sde {}", s.sde);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(
            compute_errors(&[1.0], &[1.0, 2.0]),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            compute_errors(&[1.0], &[1.0]),
            Err(EvalError::TooFewSamples { .. })
        ));
        assert!(matches!(
            compute_errors(&[f64::NAN, 0.0], &[0.0, 0.0]),
            Err(EvalError::NonFinite(0))
        ));
    }

    #[test]
    fn stat_identities_hold_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..500 {
            let n = rng.gen_range(2..60);
            let errors: Vec<f64> = (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let s = stats_from_errors(&errors).unwrap();
            assert!(s.mae <= s.rmse + 1e-12);
            let lhs = s.rmse * s.rmse;
            let rhs = s.me * s.me + s.sde * s.sde * (n as f64 - 1.0) / n as f64;
            assert!((lhs - rhs).abs() <= 1e-9 * lhs.max(1.0), "identity off: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn map_formula_matches_hand_values() {
        assert!((map_from_bp(120.0, 80.0) - 280.0 / 3.0).abs() < 1e-12);
        assert_eq!(map_from_bp(95.0, 95.0), 95.0);
    }

    #[test]
    fn high_cumulative_percentages_earn_grade_a() {
        for (p5, p10, p15) in [(73.56, 96.47, 99.68), (82.37, 97.28, 100.00), (85.90, 98.40, 99.84)] {
            assert_eq!(BhsReport::from_percentages(p5, p10, p15).grade, BhsGrade::A);
        }
    }

    #[test]
    fn grade_boundaries_are_inclusive() {
        assert_eq!(BhsReport::from_percentages(60.0, 85.0, 95.0).grade, BhsGrade::A);
        assert_eq!(BhsReport::from_percentages(59.999, 85.0, 95.0).grade, BhsGrade::B);
        assert_eq!(BhsReport::from_percentages(50.0, 75.0, 90.0).grade, BhsGrade::B);
        assert_eq!(BhsReport::from_percentages(40.0, 65.0, 85.0).grade, BhsGrade::C);
        assert_eq!(BhsReport::from_percentages(39.0, 65.0, 85.0).grade, BhsGrade::D);
        assert_eq!(BhsReport::from_percentages(100.0, 60.0, 60.0).grade, BhsGrade::D);
    }

    #[test]
    fn grading_raw_errors_counts_inclusively() {
        // 4 mmHg everywhere is inside every bucket.
        let r = bhs_grade(&[4.0; 10]).unwrap();
        assert_eq!((r.pct_le_5, r.pct_le_10, r.pct_le_15), (100.0, 100.0, 100.0));
        assert_eq!(r.grade, BhsGrade::A);
        // An error of exactly 5.0 counts toward the 5 mmHg bucket.
        let r = bhs_grade(&[5.0, -5.0, 0.0, 1.0]).unwrap();
        assert_eq!(r.pct_le_5, 100.0);
        // Percentages are non-decreasing across thresholds.
        let r = bhs_grade(&[2.0, 7.0, 12.0, 30.0]).unwrap();
        assert!(r.pct_le_5 <= r.pct_le_10 && r.pct_le_10 <= r.pct_le_15);
        assert_eq!((r.pct_le_5, r.pct_le_10, r.pct_le_15), (25.0, 50.0, 75.0));
        assert_eq!(r.grade, BhsGrade::D);
    }

    #[test]
    fn adding_a_perfect_sample_never_worsens_the_grade() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let order = |g: BhsGrade| match g {
            BhsGrade::A => 0,
            BhsGrade::B => 1,
            BhsGrade::C => 2,
            BhsGrade::D => 3,
        };
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let mut errors: Vec<f64> = (0..n).map(|_| rng.gen_range(-25.0..25.0)).collect();
            let before = bhs_grade(&errors).unwrap().grade;
            errors.push(0.0);
            let after = bhs_grade(&errors).unwrap().grade;
            assert!(order(after) <= order(before), "{before:?} -> {after:?}");
        }
    }

    #[test]
    fn tight_error_stats_pass_numerically_but_not_fully() {
        for (me, sde) in [(-0.11, 4.62), (0.57, 3.93)] {
            let r = AamiReport::from_stats(me, sde, 22);
            assert!(r.numeric_pass);
            assert!(!r.fully_compliant, "22 subjects is below the 85 floor");
        }
        assert!(!AamiReport::from_stats(6.0, 3.0, 100).numeric_pass);
        assert!(!AamiReport::from_stats(0.0, 8.1, 100).numeric_pass);
        assert!(AamiReport::from_stats(-5.0, 8.0, 85).fully_compliant);
    }

    #[test]
    fn bland_altman_hand_values() {
        let ba = bland_altman(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert!(ba.bias.abs() < 1e-15);
        let expected = 1.96 * 2.0f64.sqrt();
        assert!((ba.loa_high - expected).abs() < 1e-12);
        assert!((ba.loa_low + expected).abs() < 1e-12);
        assert_eq!(ba.pairs, vec![(0.5, 1.0), (-0.5, -1.0)]);

        let same = bland_altman(&[7.0, 7.0], &[7.0, 7.0]).unwrap();
        assert_eq!((same.bias, same.loa_low, same.loa_high), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bland_altman_coverage_matches_the_nominal_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let dist = Normal::new(2.0, 5.0).unwrap();
        let reference: Vec<f64> = (0..10_000).map(|_| rng.gen_range(70.0..180.0)).collect();
        let pred: Vec<f64> = reference.iter().map(|r| r + dist.sample(&mut rng)).collect();
        let ba = bland_altman(&pred, &reference).unwrap();
        let inside = ba
            .pairs
            .iter()
            .filter(|(_, d)| *d >= ba.loa_low && *d <= ba.loa_high)
            .count() as f64
            / ba.pairs.len() as f64;
        assert!(inside > 0.94 && inside < 0.96, "coverage {inside}");
    }

    #[test]
    fn sig6_rounds_to_six_significant_digits() {
        assert_eq!(sig6(93.33333333333333), 93.3333);
        assert_eq!(sig6(0.0001234567), 0.000123457);
        assert_eq!(sig6(-120.4567890), -120.457);
        assert_eq!(sig6(0.0), 0.0);
        assert_eq!(sig6(123456789.0), 123457000.0);
    }

    fn demo_pairs(n: usize, seed: u64) -> Vec<EvalPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let ref_sbp = rng.gen_range(95.0..165.0);
                let ref_dbp = rng.gen_range(55.0..95.0);
                EvalPair {
                    pred_sbp: ref_sbp + rng.gen_range(-9.0..9.0),
                    pred_dbp: ref_dbp + rng.gen_range(-7.0..7.0),
                    ref_sbp,
                    ref_dbp,
                }
            })
            .collect()
    }

    #[test]
    fn report_has_the_full_schema_and_empty_input_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let meta = ReportMeta { seed: 3, config_hash: "deadbeef".into() };
        assert!(matches!(
            export_report(dir.path(), &[], 5, &meta),
            Err(EvalError::TooFewSamples { .. })
        ));

        export_report(dir.path(), &demo_pairs(40, 15), 5, &meta).unwrap();
        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(json["n"], 40);
        assert_eq!(json["config_hash"], "deadbeef");
        for target in ["sbp", "dbp", "map"] {
            let t = &json["targets"][target];
            for key in ["mae", "me", "sde", "rmse"] {
                assert!(t[key].is_number(), "missing {target}.{key}");
            }
            assert!(t["bhs"]["grade"].is_string());
            assert!(t["aami"]["numeric_pass"].is_boolean());
        }
        for file in [
            "per_sample.csv",
            "bland_altman_sbp.csv",
            "bland_altman_dbp.csv",
            "error_hist_sbp.csv",
            "error_hist_dbp.csv",
        ] {
            assert!(dir.path().join(file).exists(), "missing {file}");
        }
    }

    #[test]
    fn per_sample_csv_reproduces_the_json_statistics() {
        let dir = tempfile::tempdir().unwrap();
        let meta = ReportMeta { seed: 4, config_hash: "cafe".into() };
        export_report(dir.path(), &demo_pairs(64, 16), 7, &meta).unwrap();

        let csv = fs::read_to_string(dir.path().join("per_sample.csv")).unwrap();
        let mut pred_sbp = Vec::new();
        let mut ref_sbp = Vec::new();
        let mut pred_dbp = Vec::new();
        let mut ref_dbp = Vec::new();
        for line in csv.lines().skip(1) {
            let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            pred_sbp.push(cols[0]);
            pred_dbp.push(cols[1]);
            ref_sbp.push(cols[2]);
            ref_dbp.push(cols[3]);
        }
        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();

        for (target, pred, reference) in [
            ("sbp", &pred_sbp, &ref_sbp),
            ("dbp", &pred_dbp, &ref_dbp),
        ] {
            let s = compute_errors(pred, reference).unwrap();
            for (key, value) in [("mae", s.mae), ("me", s.me), ("sde", s.sde), ("rmse", s.rmse)] {
                let stored = json["targets"][target][key].as_f64().unwrap();
                assert!(
                    (sig6(value) - stored).abs() < 1e-9,
                    "{target}.{key}: recomputed {value} vs stored {stored}"
                );
            }
        }
        // MAP is the documented composition of the per-sample columns.
        let pred_map: Vec<f64> = pred_sbp.iter().zip(&pred_dbp).map(|(s, d)| map_from_bp(*s, *d)).collect();
        let ref_map: Vec<f64> = ref_sbp.iter().zip(&ref_dbp).map(|(s, d)| map_from_bp(*s, *d)).collect();
        let s = compute_errors(&pred_map, &ref_map).unwrap();
        let stored = json["targets"]["map"]["mae"].as_f64().unwrap();
        assert!((sig6(s.mae) - stored).abs() < 1e-9);
    }

    #[test]
    fn histogram_bins_are_one_mmhg_wide_and_count_everything() {
        let dir = tempfile::tempdir().unwrap();
        let meta = ReportMeta { seed: 5, config_hash: "00".into() };
        let pairs = demo_pairs(100, 17);
        export_report(dir.path(), &pairs, 3, &meta).unwrap();
        let csv = fs::read_to_string(dir.path().join("error_hist_sbp.csv")).unwrap();
        let mut total = 0u64;
        for line in csv.lines().skip(1) {
            let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cols[1] - cols[0], 1.0);
            total += cols[2] as u64;
        }
        assert_eq!(total, 100);
    }
}
