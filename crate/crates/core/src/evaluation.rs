//! Localization and retrieval metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnmitigation::{rank_desc, Embeddings};

/// IoU success threshold used for `ciou_at_050`.
pub const CIOU_SUCCESS: f64 = 0.5;

/// Threshold grid step of the success curve.
pub const AUC_STEP: f64 = 0.05;

fn check_same(pred: &[bool], gt: &[bool]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::dim("mask", pred.len(), gt.len()));
    }
    Ok(())
}

fn counts(pred: &[bool], gt: &[bool]) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    (inter, p, g)
}

/// `|pred ∩ gt| / |pred ∪ gt|`; two empty masks score 1.
pub fn ciou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    check_same(pred, gt)?;
    let (inter, p, g) = counts(pred, gt);
    let union = p + g - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Area under the success-rate curve: `success(t)` is the fraction of scores
/// `≥ t` on the grid `t = 0, 0.05, …, 1`, integrated with the trapezoid rule.
pub fn success_auc(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("success_auc of no samples".into()));
    }
    let steps = (1.0 / AUC_STEP).round() as usize;
    let n = scores.len() as f64;
    let success: Vec<f64> = (0..=steps)
        .map(|i| {
            let t = i as f64 * AUC_STEP;
            // grid points are compared with a small slack so that a score of
            // exactly 0.35 counts as reaching t = 7·0.05
            scores.iter().filter(|&&s| s >= t - 1e-12).count() as f64 / n
        })
        .collect();
    Ok(success.windows(2).map(|w| 0.5 * (w[0] + w[1]) * AUC_STEP).sum())
}

/// Per-sample IoU and F1 (precision/recall over pixels).
pub fn miou_fscore(pred: &[bool], gt: &[bool]) -> Result<(f64, f64)> {
    let iou = ciou(pred, gt)?;
    let (inter, p, g) = counts(pred, gt);
    if p == 0 && g == 0 {
        return Ok((iou, 1.0));
    }
    if inter == 0 {
        return Ok((iou, 0.0));
    }
    let precision = inter as f64 / p as f64;
    let recall = inter as f64 / g as f64;
    Ok((iou, 2.0 * precision * recall / (precision + recall)))
}

/// Recall@K in both retrieval directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RecallReport {
    pub audio_to_image: BTreeMap<usize, f64>,
    pub image_to_audio: BTreeMap<usize, f64>,
}

fn recall_one_way(sims: &[f64], m: usize, labels: &[usize], ks: &[usize], by_row: bool) -> BTreeMap<usize, f64> {
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for q in 0..m {
        let row: Vec<f64> = (0..m)
            .map(|j| if by_row { sims[q * m + j] } else { sims[j * m + q] })
            .collect();
        let ranked = rank_desc(&row, 0..m);
        for &k in ks {
            if ranked[..k].iter().any(|&j| labels[j] == labels[q]) {
                *hits.get_mut(&k).expect("k present") += 1;
            }
        }
    }
    hits.into_iter().map(|(k, h)| (k, h as f64 / m as f64)).collect()
}

/// Ranks every gallery item of the other modality by cosine similarity of
/// target slots; a query hits at K when any of its top K shares its label.
pub fn retrieval_recall(p_image: &Embeddings, p_audio: &Embeddings, labels: &[usize], ks: &[usize]) -> Result<RecallReport> {
    let m = p_image.rows;
    if p_audio.rows != m || labels.len() != m {
        return Err(Error::dim("retrieval_recall", m, format!("{} audio, {} labels", p_audio.rows, labels.len())));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= m) {
        return Err(Error::Config(format!("recall@{k} needs more than {k} samples (have {m})")));
    }
    // sims[i][j] = cos(image i, audio j)
    let sims = p_image.cosine_to(p_audio)?;
    Ok(RecallReport {
        audio_to_image: recall_one_way(&sims, m, labels, ks, false),
        image_to_audio: recall_one_way(&sims, m, labels, ks, true),
    })
}

/// Dataset-level evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ciou_at_050: f64,
    pub auc: f64,
    pub miou: f64,
    pub fscore: f64,
    pub recall: RecallReport,
    pub n_samples: usize,
}

impl EvalReport {
    /// Aggregates per-sample IoU/F scores and a retrieval report.
    pub fn from_scores(ious: &[f64], fscores: &[f64], recall: RecallReport) -> Result<Self> {
        if ious.is_empty() || ious.len() != fscores.len() {
            return Err(Error::Contract("evaluation needs matching, non-empty score lists".into()));
        }
        let n = ious.len() as f64;
        Ok(EvalReport {
            ciou_at_050: ious.iter().filter(|&&s| s >= CIOU_SUCCESS).count() as f64 / n,
            auc: success_auc(ious)?,
            miou: ious.iter().sum::<f64>() / n,
            fscore: fscores.iter().sum::<f64>() / n,
            recall,
            n_samples: ious.len(),
        })
    }

    /// Flat `key → value` view, e.g. `recall_a2i@5`.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        out.insert("ciou_at_050".into(), self.ciou_at_050);
        out.insert("auc".into(), self.auc);
        out.insert("miou".into(), self.miou);
        out.insert("fscore".into(), self.fscore);
        out.insert("n_samples".into(), self.n_samples as f64);
        for (k, v) in &self.recall.audio_to_image {
            out.insert(format!("recall_a2i@{k}"), *v);
        }
        for (k, v) in &self.recall.image_to_audio {
            out.insert(format!("recall_i2a@{k}"), *v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ciou_cases() {
        let gt = [true, true, false, false];
        assert_eq!(ciou(&gt, &gt).unwrap(), 1.0);
        assert_eq!(ciou(&[false, false, true, true], &gt).unwrap(), 0.0);
        assert_eq!(ciou(&[true, false, false, false], &gt).unwrap(), 0.5);
        assert_eq!(ciou(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert_eq!(ciou(&[false; 4], &gt).unwrap(), 0.0);
        assert!(ciou(&[true], &gt).is_err());
    }

    #[test]
    fn auc_fixed_points() {
        assert!((success_auc(&[1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((success_auc(&[0.0; 5]).unwrap() - 0.025).abs() < 1e-12);
        assert!((success_auc(&[0.5]).unwrap() - 0.525).abs() < 1e-12);
        assert!(success_auc(&[]).is_err());
    }

    #[test]
    fn miou_fscore_cases() {
        let gt = [true, true, false, false];
        assert_eq!(miou_fscore(&gt, &gt).unwrap(), (1.0, 1.0));
        assert_eq!(miou_fscore(&[false; 4], &gt).unwrap(), (0.0, 0.0));
        let (iou, f) = miou_fscore(&[true, false, false, false], &gt).unwrap();
        assert_eq!(iou, 0.5);
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn own_pair_first_gives_perfect_recall() {
        let eye: Vec<f64> = (0..36).map(|k| if k / 6 == k % 6 { 1.0 } else { 0.0 }).collect();
        let e = Embeddings::new(6, 6, eye).unwrap();
        let r = retrieval_recall(&e, &e, &[0, 1, 2, 3, 4, 5], &[1, 5]).unwrap();
        assert_eq!(r.audio_to_image[&1], 1.0);
        assert_eq!(r.image_to_audio[&1], 1.0);
        assert!(retrieval_recall(&e, &e, &[0; 6], &[6]).is_err());
    }
}
