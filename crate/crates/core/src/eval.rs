//! Detection evaluation: IoU, average precision, mAP, the corruption
//! aggregate mPC (double mean over corruption types and severities), and
//! the clean-vs-corrupted cosine-similarity report.
//!
//! mAP and mPC are stored in percent, matching the usual table convention.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{BoxF, DetectionRecord, DetectionSample};
use crate::error::{CoreError, Result};
use crate::scalar::{to_f64, Real};

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou<T: Real>(a: &BoxF<T>, b: &BoxF<T>) -> T {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > T::zero() {
        inter / union
    } else {
        T::zero()
    }
}

/// One class-specific scored detection for AP computation. `image` scopes
/// matching: a detection can only claim ground truth of its own image.
#[derive(Debug, Clone, Copy)]
pub struct ScoredBox<T: Real> {
    pub image: usize,
    pub box_: BoxF<T>,
    pub score: T,
}

/// Average precision with greedy matching and the continuous
/// precision-envelope integral.
///
/// Detections are sorted by descending score (ties keep input order); each
/// one claims the highest-IoU unmatched ground truth of its image if that
/// IoU reaches `iou_thr`, otherwise it counts as a false positive.
/// With no ground truth anywhere the class is vacuous and scores 1.0;
/// aggregation excludes such classes from mAP.
pub fn average_precision<T: Real>(
    dets: &[ScoredBox<T>],
    gts: &[(usize, BoxF<T>)],
    iou_thr: T,
) -> f64 {
    if gts.is_empty() {
        return 1.0;
    }
    if dets.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut matched = vec![false; gts.len()];
    let mut tps: Vec<bool> = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, T)> = None;
        for (gi, (img, g)) in gts.iter().enumerate() {
            if *img != d.image || matched[gi] {
                continue;
            }
            let v = iou(&d.box_, g);
            if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tps.push(true);
            }
            None => tps.push(false),
        }
    }

    ap_from_tps(&tps, gts.len())
}

/// Integrate precision over recall with the running-max envelope. `tps`
/// is the TP/FP flag per detection in descending-score order.
fn ap_from_tps(tps: &[bool], n_gt: usize) -> f64 {
    let n = tps.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (i, is_tp) in tps.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    let mut envelope = precision.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..n {
        // Ascending-order accumulation; the oracle sums the same way so
        // equality can be exact.
        ap += (recall[i] - prev) * envelope[i];
        prev = recall[i];
    }
    ap
}

/// Per-class AP summary over a labeled dataset. `per_class[c]` is `None`
/// when class `c` has no ground truth anywhere (excluded from the mean).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapSummary {
    pub per_class: Vec<Option<f64>>,
    /// Mean AP over represented classes, percent.
    pub map_percent: f64,
}

/// Evaluate persisted detections against ground-truth samples at one IoU
/// threshold. Detection `image_id`s must all resolve to sample ids.
pub fn evaluate_detections<T: Real>(
    samples: &[DetectionSample<T>],
    dets: &[DetectionRecord],
    n_classes: usize,
    iou_thr: f64,
) -> Result<MapSummary> {
    let index_of: HashMap<&str, usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let mut class_dets: Vec<Vec<ScoredBox<f64>>> = vec![Vec::new(); n_classes];
    for d in dets {
        let img = *index_of.get(d.image_id.as_str()).ok_or_else(|| {
            CoreError::IdMismatch {
                msg: format!("detection references unknown image id {:?}", d.image_id),
            }
        })?;
        if d.category_id >= n_classes {
            return Err(CoreError::invalid(
                "evaluate_detections",
                format!("category id {} out of range {}", d.category_id, n_classes),
            ));
        }
        class_dets[d.category_id].push(ScoredBox {
            image: img,
            box_: BoxF::from_array(d.bbox)?,
            score: d.score,
        });
    }
    let mut class_gts: Vec<Vec<(usize, BoxF<f64>)>> = vec![Vec::new(); n_classes];
    for (i, s) in samples.iter().enumerate() {
        for (b, l) in s.boxes.iter().zip(&s.labels) {
            if *l >= n_classes {
                return Err(CoreError::invalid(
                    "evaluate_detections",
                    format!("ground-truth label {} out of range {}", l, n_classes),
                ));
            }
            class_gts[*l].push((
                i,
                BoxF {
                    x1: to_f64(b.x1),
                    y1: to_f64(b.y1),
                    x2: to_f64(b.x2),
                    y2: to_f64(b.y2),
                },
            ));
        }
    }
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            if class_gts[c].is_empty() {
                None
            } else {
                Some(average_precision(&class_dets[c], &class_gts[c], iou_thr))
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map_percent = 100.0 * mean(&present);
    Ok(MapSummary {
        per_class,
        map_percent,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean over per-class AP values.
pub fn mean_ap(aps: &[f64]) -> f64 {
    mean(aps)
}

/// Double mean: average severities within each corruption row, then
/// average the rows. Rows must share one length.
pub fn mpc(matrix: &[Vec<f64>]) -> Result<f64> {
    if matrix.is_empty() {
        return Err(CoreError::invalid("mpc", "empty matrix"));
    }
    let n_s = matrix[0].len();
    if n_s == 0 {
        return Err(CoreError::invalid("mpc", "empty severity row"));
    }
    for (i, row) in matrix.iter().enumerate() {
        if row.len() != n_s {
            return Err(CoreError::invalid(
                "mpc",
                format!("ragged matrix: row 0 has {} entries, row {} has {}", n_s, i, row.len()),
            ));
        }
    }
    Ok(mean(&matrix.iter().map(|row| mean(row)).collect::<Vec<_>>()))
}

/// The P_{C,S} matrix of per-corruption, per-severity mAP (percent),
/// alongside the clean mAP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcReport {
    pub corruption_names: Vec<String>,
    pub severities: Vec<u8>,
    /// Percent mAP, indexed `[corruption][severity]`.
    pub matrix: Vec<Vec<f64>>,
    /// Percent mAP on the uncorrupted split.
    pub clean_map: f64,
}

impl MpcReport {
    pub fn mpc(&self) -> Result<f64> {
        mpc(&self.matrix)
    }

    /// Table-style view: one severity-averaged value per corruption.
    pub fn severity_averaged(&self) -> Vec<f64> {
        self.matrix.iter().map(|row| mean(row)).collect()
    }

    /// CSV matrix: corruption rows, severity columns, trailing row mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("corruption");
        for s in &self.severities {
            out.push_str(&format!(",s{s}"));
        }
        out.push_str(",mean\n");
        for (name, row) in self.corruption_names.iter().zip(&self.matrix) {
            out.push_str(name);
            for v in row {
                out.push_str(&format!(",{v:.4}"));
            }
            out.push_str(&format!(",{:.4}\n", mean(row)));
        }
        out.push_str(&format!("clean,{:.4}\n", self.clean_map));
        if let Ok(m) = self.mpc() {
            out.push_str(&format!("mPC,{m:.4}\n"));
        }
        out
    }
}

/// Mean clean-vs-corrupted backbone feature similarity per corruption
/// type at one severity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CosineSimReport {
    pub severity: u8,
    pub corruption_names: Vec<String>,
    pub mean_similarity: Vec<f64>,
}

impl CosineSimReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("corruption,mean_cosine\n");
        for (n, v) in self.corruption_names.iter().zip(&self.mean_similarity) {
            out.push_str(&format!("{n},{v:.6}\n"));
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Build the similarity report from a pooled-feature extractor. Each suite
/// is `(corruption name, corrupted samples)`; ids must match the clean set
/// pairwise in order.
pub fn cosine_report<T, F>(
    mut features: F,
    clean: &[DetectionSample<T>],
    suites: &[(String, Vec<DetectionSample<T>>)],
    severity: u8,
) -> Result<CosineSimReport>
where
    T: Real,
    F: FnMut(&DetectionSample<T>) -> Result<Vec<T>>,
{
    let clean_feats: Vec<Vec<f64>> = clean
        .iter()
        .map(|s| Ok(features(s)?.iter().map(|v| to_f64(*v)).collect()))
        .collect::<Result<_>>()?;
    let mut names = Vec::with_capacity(suites.len());
    let mut sims = Vec::with_capacity(suites.len());
    for (name, corrupted) in suites {
        if corrupted.len() != clean.len() {
            return Err(CoreError::IdMismatch {
                msg: format!(
                    "suite {:?} has {} samples, clean set has {}",
                    name,
                    corrupted.len(),
                    clean.len()
                ),
            });
        }
        let mut acc = 0.0;
        for (i, (cs, cor)) in clean.iter().zip(corrupted).enumerate() {
            if cs.id != cor.id {
                return Err(CoreError::IdMismatch {
                    msg: format!("suite {:?}: {} paired with {}", name, cor.id, cs.id),
                });
            }
            let f: Vec<f64> = features(cor)?.iter().map(|v| to_f64(*v)).collect();
            acc += cosine(&clean_feats[i], &f);
        }
        names.push(name.clone());
        sims.push(acc / clean.len() as f64);
    }
    Ok(CosineSimReport {
        severity,
        corruption_names: names,
        mean_similarity: sims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxF<f64> {
        BoxF { x1, y1, x2, y2 }
    }

    #[test]
    fn iou_identical_disjoint_and_offset() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = bx(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &far), 0.0);
        let b = bx(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![(0, bx(0.0, 0.0, 2.0, 2.0)), (0, bx(5.0, 5.0, 8.0, 8.0))];
        let dets = vec![
            ScoredBox {
                image: 0,
                box_: bx(0.0, 0.0, 2.0, 2.0),
                score: 0.9,
            },
            ScoredBox {
                image: 0,
                box_: bx(5.0, 5.0, 8.0, 8.0),
                score: 0.8,
            },
        ];
        assert_eq!(average_precision(&dets, &gts, 0.5), 1.0);
    }

    #[test]
    fn no_detections_with_gt_scores_zero() {
        let gts = vec![(0, bx(0.0, 0.0, 2.0, 2.0))];
        assert_eq!(average_precision::<f64>(&[], &gts, 0.5), 0.0);
    }

    #[test]
    fn late_false_positive_keeps_ap_one() {
        // TP then FP: envelope keeps precision 1.0 through full recall.
        let gts = vec![(0, bx(0.0, 0.0, 10.0, 10.0))];
        let dets = vec![
            ScoredBox {
                image: 0,
                box_: bx(0.0, 0.0, 10.0, 9.0),
                score: 0.9,
            },
            ScoredBox {
                image: 0,
                box_: bx(20.0, 20.0, 30.0, 30.0),
                score: 0.5,
            },
        ];
        assert_eq!(average_precision(&dets, &gts, 0.5), 1.0);
    }

    #[test]
    fn early_false_positive_lowers_ap() {
        let gts = vec![(0, bx(0.0, 0.0, 10.0, 10.0))];
        let dets = vec![
            ScoredBox {
                image: 0,
                box_: bx(20.0, 20.0, 30.0, 30.0),
                score: 0.9,
            },
            ScoredBox {
                image: 0,
                box_: bx(0.0, 0.0, 10.0, 10.0),
                score: 0.5,
            },
        ];
        assert_eq!(average_precision(&dets, &gts, 0.5), 0.5);
    }

    #[test]
    fn matching_is_scoped_per_image() {
        // The detection in image 1 cannot claim image 0's ground truth.
        let gts = vec![(0, bx(0.0, 0.0, 10.0, 10.0))];
        let dets = vec![ScoredBox {
            image: 1,
            box_: bx(0.0, 0.0, 10.0, 10.0),
            score: 0.9,
        }];
        assert_eq!(average_precision(&dets, &gts, 0.5), 0.0);
    }

    #[test]
    fn mpc_is_a_double_mean() {
        let m = vec![vec![10.0, 20.0], vec![30.0, 40.0]];
        assert!((mpc(&m).unwrap() - 25.0).abs() < 1e-12);
        let constant = vec![vec![7.5; 5]; 15];
        assert!((mpc(&constant).unwrap() - 7.5).abs() < 1e-12);
    }

    #[test]
    fn mpc_rejects_ragged_input() {
        let m = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(mpc(&m).is_err());
        assert!(mpc(&[]).is_err());
    }

    #[test]
    fn cosine_identical_suites_report_one() {
        use crate::data::{generate_dataset, DatasetSpec};
        let ds = generate_dataset::<f64>(
            &DatasetSpec {
                n_images: 3,
                ..DatasetSpec::default()
            },
            9,
        )
        .unwrap();
        let suites = vec![("noop".to_string(), ds.clone())];
        let report = cosine_report(
            |s: &DetectionSample<f64>| Ok(s.image.data().to_vec()),
            &ds,
            &suites,
            5,
        )
        .unwrap();
        assert!((report.mean_similarity[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let a = vec![1.0, 2.0, 3.0];
        let b: Vec<f64> = a.iter().map(|v| v * 7.3).collect();
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_report_rejects_id_mismatch() {
        use crate::data::{generate_dataset, DatasetSpec};
        let ds = generate_dataset::<f64>(
            &DatasetSpec {
                n_images: 2,
                ..DatasetSpec::default()
            },
            9,
        )
        .unwrap();
        let mut shuffled = ds.clone();
        shuffled.reverse();
        let suites = vec![("bad".to_string(), shuffled)];
        let err = cosine_report(
            |s: &DetectionSample<f64>| Ok(s.image.data().to_vec()),
            &ds,
            &suites,
            5,
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::IdMismatch { .. }));
    }
}
