//! Inference and dataset evaluation.

use rayon::prelude::*;
use serde::Serialize;

use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::evaluation::{miou_fscore, retrieval_recall, EvalReport};
use crate::fnmitigation::Embeddings;
use crate::localization::{refine_iqr, upsample_and_threshold, LocalizationMap, ThetaPolicy};
use crate::synthbench::{Dataset, SynthSample, IMAGE_SIZE};

use super::model::{Model, Pair};

/// Everything inference produces for one pair, as plain values.
#[derive(Debug, Clone)]
pub struct Inference {
    /// Audio target query over image keys, `h·w` values.
    pub ca: Vec<f64>,
    /// Image target query over image keys.
    pub ia: Vec<f64>,
    pub p_image: Vec<f64>,
    pub p_audio: Vec<f64>,
    /// Mean `cos(p, r)` over target/off-target pairs, per modality.
    pub slot_cos_image: f64,
    pub slot_cos_audio: f64,
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

fn mean_pair_cos(slots: &[f64], d: usize, n_target: usize) -> f64 {
    let rows: Vec<&[f64]> = slots.chunks(d).collect();
    let mut total = 0.0;
    let mut count = 0;
    for p in &rows[..n_target] {
        for r in &rows[n_target..] {
            total += cos(p, r);
            count += 1;
        }
    }
    total / count as f64
}

pub fn infer(model: &Model, image: &[f64], audio: &[f64]) -> Result<Inference> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, Pair { image, audio }, None)?;
    let d = model.config.d;
    let nt = model.config.n_target;
    Ok(Inference {
        ca: tape.value(fwd.ca_av).to_vec(),
        ia: tape.value(fwd.ia_vv).to_vec(),
        p_image: tape.value(fwd.p_image).to_vec(),
        p_audio: tape.value(fwd.p_audio).to_vec(),
        slot_cos_image: mean_pair_cos(tape.value(fwd.jsa.image.bundle.slots), d, nt),
        slot_cos_audio: mean_pair_cos(tape.value(fwd.jsa.audio.bundle.slots), d, nt),
    })
}

/// Heat map (ca, or its IQR blend when `alpha < 1`) upsampled to the image
/// size and thresholded.
pub fn localize(model: &Model, inf: &Inference, alpha: f64, theta: ThetaPolicy) -> Result<LocalizationMap> {
    let heat = refine_iqr(&inf.ca, &inf.ia, alpha)?;
    let (h, w) = (model.config.h, model.config.w);
    let mut map = upsample_and_threshold(&heat, h, w, IMAGE_SIZE, IMAGE_SIZE, theta)?;
    map.alpha = alpha;
    Ok(map)
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    /// Localization from cross-modal attention alone.
    pub plain: EvalReport,
    /// Localization with image-query refinement at the configured α.
    pub iqr: Option<EvalReport>,
    pub slot_cos_image: f64,
    pub slot_cos_audio: f64,
    pub theta: ThetaPolicy,
}

impl Evaluation {
    /// Mean `cos(p, r)` over both modalities.
    pub fn slot_cos(&self) -> f64 {
        0.5 * (self.slot_cos_image + self.slot_cos_audio)
    }
}

/// Recall cut-offs reported when the dataset is large enough.
pub const RECALL_KS: &[usize] = &[1, 5, 10];

fn report(model: &Model, data: &[SynthSample], infs: &[Inference], alpha: f64, theta: ThetaPolicy, recall: &crate::evaluation::RecallReport) -> Result<EvalReport> {
    let scores = data
        .par_iter()
        .zip(infs)
        .map(|(s, inf)| {
            let map = localize(model, inf, alpha, theta)?;
            miou_fscore(&map.mask, &s.gt_mask)
        })
        .collect::<Result<Vec<_>>>()?;
    let (ious, fs): (Vec<f64>, Vec<f64>) = scores.into_iter().unzip();
    EvalReport::from_scores(&ious, &fs, recall.clone())
}

pub fn evaluate(model: &Model, data: &Dataset, theta: ThetaPolicy, use_iqr: bool) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation on an empty dataset".into()));
    }
    let infs = data
        .samples
        .par_iter()
        .map(|s| infer(model, &s.image, &s.audio))
        .collect::<Result<Vec<_>>>()?;
    let d = model.config.d;
    let m = infs.len();
    let pv = Embeddings::new(m, d, infs.iter().flat_map(|i| i.p_image.iter().copied()).collect())?;
    let pa = Embeddings::new(m, d, infs.iter().flat_map(|i| i.p_audio.iter().copied()).collect())?;
    let labels: Vec<usize> = data.samples.iter().map(|s| s.category).collect();
    let ks: Vec<usize> = RECALL_KS.iter().copied().filter(|&k| k < m).collect();
    let recall = retrieval_recall(&pv, &pa, &labels, &ks)?;
    let plain = report(model, &data.samples, &infs, 1.0, theta, &recall)?;
    let iqr = if use_iqr {
        Some(report(model, &data.samples, &infs, model.config.alpha, theta, &recall)?)
    } else {
        None
    };
    let n = m as f64;
    Ok(Evaluation {
        plain,
        iqr,
        slot_cos_image: infs.iter().map(|i| i.slot_cos_image).sum::<f64>() / n,
        slot_cos_audio: infs.iter().map(|i| i.slot_cos_audio).sum::<f64>() / n,
        theta,
    })
}
