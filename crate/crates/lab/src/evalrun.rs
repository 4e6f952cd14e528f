//! Corruption-suite evaluation of a trained detector.
//!
//! Cells (corruption type x severity) are embarrassingly parallel; the
//! tape's tensors are single-threaded, so each worker rebuilds the
//! detector from a plain-data snapshot. Results are assembled by cell
//! index, making the report independent of the thread schedule.

use rayon::prelude::*;

use sdgod_core::corruption::{apply_corruption, CorruptionType, Severity};
use sdgod_core::data::DetectionRecord;
use sdgod_core::detector::DetectorSnapshot;
use sdgod_core::eval::{cosine_report, evaluate_detections, CosineSimReport, MpcReport};
use sdgod_core::rng::{fnv1a, indexed_seed, labeled_seed, mix};
use sdgod_core::{DetectionSample, ToyDetector};

use crate::config::RunConfig;
use crate::{LabError, Result};

/// Everything an evaluation emits: the Eq.-11 matrix, the similarity
/// analysis, and the raw detections every number is recomputable from.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub mpc_report: MpcReport,
    pub cosine: CosineSimReport,
    pub clean_detections: Vec<DetectionRecord>,
    /// Per cell, keyed "{corruption}_s{severity}".
    pub cell_detections: Vec<(String, Vec<DetectionRecord>)>,
}

/// Seed for one suite cell, stable in the cell's identity rather than
/// its position in the schedule.
fn cell_seed(suite_seed: u64, c: CorruptionType, s: Severity) -> u64 {
    mix(suite_seed ^ fnv1a(c.name().as_bytes()) ^ s.level() as u64)
}

/// Corrupt every sample of a split with per-image derived seeds; ids and
/// annotations carry over unchanged.
pub fn corrupt_split(
    samples: &[DetectionSample],
    c: CorruptionType,
    s: Severity,
    seed: u64,
) -> Vec<DetectionSample> {
    samples
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            let img = apply_corruption(&sample.image, c, s, indexed_seed(seed, i as u64));
            DetectionSample::new(
                sample.id.clone(),
                img,
                sample.boxes.clone(),
                sample.labels.clone(),
            )
            .expect("corruption preserves boxes")
        })
        .collect()
}

/// Build the full corruption suite for a test split.
pub fn build_suite(
    samples: &[DetectionSample],
    types: &[CorruptionType],
    severities: &[Severity],
    suite_seed: u64,
) -> Vec<(CorruptionType, Severity, Vec<DetectionSample>)> {
    let mut out = Vec::with_capacity(types.len() * severities.len());
    for &c in types {
        for &s in severities {
            out.push((c, s, corrupt_split(samples, c, s, cell_seed(suite_seed, c, s))));
        }
    }
    out
}

fn map_percent(
    det: &ToyDetector,
    samples: &[DetectionSample],
    cfg: &RunConfig,
) -> Result<(f64, Vec<DetectionRecord>)> {
    let records = det.detect_dataset(samples, cfg.eval.score_thresh, cfg.eval.nms_iou)?;
    let summary = evaluate_detections(
        samples,
        &records,
        cfg.detector.n_categories,
        cfg.eval.iou_thr,
    )?;
    Ok((summary.map_percent, records))
}

/// Evaluate a snapshot over the configured suite. `suite_seed` pins the
/// corrupted benchmark; passing the same value across arms makes their
/// numbers comparable.
pub fn evaluate_snapshot(
    snap: &DetectorSnapshot,
    test: &[DetectionSample],
    cfg: &RunConfig,
    suite_seed: u64,
) -> Result<EvalOutcome> {
    if test.is_empty() {
        return Err(LabError::Train("empty test split".into()));
    }
    let types = cfg.eval.corruption_types()?;
    let severities = cfg.eval.severity_levels()?;

    let cells: Vec<(usize, usize)> = (0..types.len())
        .flat_map(|ci| (0..severities.len()).map(move |si| (ci, si)))
        .collect();
    let evaluated: Vec<(usize, usize, f64, Vec<DetectionRecord>)> = cells
        .par_iter()
        .map(|&(ci, si)| {
            let (c, s) = (types[ci], severities[si]);
            let det = ToyDetector::from_snapshot(snap)?;
            let corrupted = corrupt_split(test, c, s, cell_seed(suite_seed, c, s));
            let (map, recs) = map_percent(&det, &corrupted, cfg)?;
            Ok((ci, si, map, recs))
        })
        .collect::<Result<_>>()?;

    let mut matrix = vec![vec![0.0; severities.len()]; types.len()];
    let mut cell_detections =
        vec![(String::new(), Vec::new()); types.len() * severities.len()];
    for (ci, si, map, recs) in evaluated {
        matrix[ci][si] = map;
        let name = format!("{}_s{}", types[ci].name(), severities[si].level());
        cell_detections[ci * severities.len() + si] = (name, recs);
    }

    let det = ToyDetector::from_snapshot(snap)?;
    let (clean_map, clean_detections) = map_percent(&det, test, cfg)?;

    let mpc_report = MpcReport {
        corruption_names: types.iter().map(|c| c.name().to_string()).collect(),
        severities: severities.iter().map(|s| s.level()).collect(),
        matrix,
        clean_map,
    };
    let cosine = cosine_snapshot(snap, test, cfg, suite_seed)?;
    Ok(EvalOutcome {
        mpc_report,
        cosine,
        clean_detections,
        cell_detections,
    })
}

/// Clean-vs-corrupted pooled-feature similarity at the configured
/// severity, one value per corruption type.
pub fn cosine_snapshot(
    snap: &DetectorSnapshot,
    test: &[DetectionSample],
    cfg: &RunConfig,
    suite_seed: u64,
) -> Result<CosineSimReport> {
    let types = cfg.eval.corruption_types()?;
    let sev = Severity::new(cfg.eval.cosine_severity)?;
    let suites: Vec<(String, Vec<DetectionSample>)> = types
        .iter()
        .map(|&c| {
            (
                c.name().to_string(),
                corrupt_split(test, c, sev, cell_seed(suite_seed, c, sev)),
            )
        })
        .collect();
    let det = ToyDetector::from_snapshot(snap)?;
    let report = cosine_report(
        |s: &DetectionSample| det.pooled_feature(&s.image),
        test,
        &suites,
        sev.level(),
    )?;
    Ok(report)
}

/// Suite seed every arm of a study shares, derived from the config seed.
pub fn suite_seed_for(cfg: &RunConfig) -> u64 {
    labeled_seed(cfg.seed, "suite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use sdgod_core::data::generate_dataset;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.test_images = 3;
        cfg.data.image_size = 48;
        cfg.eval.corruptions = vec!["gaussian_noise".into(), "fog".into()];
        cfg.eval.severities = vec![1, 5];
        cfg
    }

    #[test]
    fn evaluation_is_schedule_independent() {
        let cfg = small_cfg();
        let test = generate_dataset(&cfg.data.test_spec(), 4).unwrap();
        let det = ToyDetector::new(cfg.detector.clone(), 1).unwrap();
        let snap = det.snapshot();
        let a = evaluate_snapshot(&snap, &test, &cfg, 7).unwrap();
        let b = evaluate_snapshot(&snap, &test, &cfg, 7).unwrap();
        assert_eq!(a.mpc_report.matrix, b.mpc_report.matrix);
        assert_eq!(a.mpc_report.clean_map, b.mpc_report.clean_map);
        assert_eq!(a.cosine.mean_similarity, b.cosine.mean_similarity);
        // Different suite seed changes the corrupted pixels.
        let c = evaluate_snapshot(&snap, &test, &cfg, 8).unwrap();
        assert_ne!(a.cosine.mean_similarity, c.cosine.mean_similarity);
    }

    #[test]
    fn identity_suite_gives_unit_similarity() {
        let cfg = small_cfg();
        let test = generate_dataset(&cfg.data.test_spec(), 4).unwrap();
        let det = ToyDetector::new(cfg.detector.clone(), 1).unwrap();
        let suites = vec![("clean".to_string(), test.clone())];
        let report = cosine_report(
            |s: &DetectionSample| det.pooled_feature(&s.image),
            &test,
            &suites,
            5,
        )
        .unwrap();
        assert!((report.mean_similarity[0] - 1.0).abs() < 1e-12);
    }
}
