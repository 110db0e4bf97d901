//! Training objectives: contrastive loss on target slots, cross-modal
//! attention matching, slot divergence, slot reconstruction, and their
//! weighted total.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{cosine_matrix, cosine_sim, Linear, LinearVars, ParamId, ParamStore, Shape, Tape, Var};
use crate::encoders::{FeatureGrid, Modality};
use crate::error::{Error, Result};

/// Loss weights and temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub match_weight: f64,
    pub div_weight: f64,
    pub recon_weight: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            match_weight: 100.0,
            div_weight: 0.1,
            recon_weight: 0.1,
            tau: 0.03,
        }
    }
}

/// Scalar values of every loss component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cotr: f64,
    #[serde(rename = "match")]
    pub matching: f64,
    pub div: f64,
    pub recon: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
}

impl LossReport {
    /// Checks finiteness and composes `total` from the components.
    pub fn compose(cotr: f64, matching: f64, div: f64, recon: f64, w: &LossWeights) -> Result<Self> {
        for (name, v) in [("cotr", cotr), ("match", matching), ("div", div), ("recon", recon)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("loss component {name} is {v}")));
            }
        }
        Ok(LossReport {
            cotr,
            matching,
            div,
            recon,
            total: cotr + w.match_weight * matching + w.div_weight * div + w.recon_weight * recon,
            lambda1: w.match_weight,
            lambda2: w.div_weight,
            lambda3: w.recon_weight,
            tau: w.tau,
        })
    }
}

/// Symmetric InfoNCE over a batch of target slots.
///
/// `keep` is a row-major `B×B` matrix; `keep[i][j] = false` removes pair
/// `(i, j)` from both denominators of sample `i`. The diagonal must be kept.
pub fn contrastive_loss(tape: &mut Tape, p_image: Var, p_audio: Var, tau: f64, keep: &[bool]) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (si, sa) = (tape.shape(p_image), tape.shape(p_audio));
    if si != sa {
        return Err(Error::dim("contrastive_loss", si, sa));
    }
    let b = si.rows;
    if keep.len() != b * b {
        return Err(Error::dim("contrastive_loss", si, format!("mask of {}", keep.len())));
    }
    if (0..b).any(|i| !keep[i * b + i]) {
        return Err(Error::Contract("positive pairs cannot be excluded".into()));
    }
    let cos = cosine_matrix(tape, p_image, p_audio)?;
    let logits = tape.scale(cos, 1.0 / tau);
    let logits_t = tape.transpose(logits);
    let lse_row = tape.masked_logsumexp_rows(logits, keep)?;
    let lse_col = tape.masked_logsumexp_rows(logits_t, keep)?;
    let eye: Vec<f64> = (0..b * b).map(|k| if k / b == k % b { 1.0 } else { 0.0 }).collect();
    let eye = tape.constant(Shape::new(b, b), eye)?;
    let diag = tape.mul(logits, eye)?;
    let positives = tape.sum(diag);
    let denoms = tape.add(lse_row, lse_col)?;
    let denoms = tape.sum(denoms);
    let positives = tape.scale(positives, 2.0);
    let loss = tape.sub(denoms, positives)?;
    Ok(tape.scale(loss, 1.0 / b as f64))
}

/// `‖ca_av − sg(ia_vv)‖² + ‖ca_va − sg(ia_aa)‖²`.
pub fn attention_matching_loss(tape: &mut Tape, ca_av: Var, ia_vv: Var, ca_va: Var, ia_aa: Var) -> Result<Var> {
    let mut total = None;
    for (ca, ia) in [(ca_av, ia_vv), (ca_va, ia_aa)] {
        let (sc, si) = (tape.shape(ca), tape.shape(ia));
        if sc != si {
            return Err(Error::dim("attention_matching_loss", sc, si));
        }
        let target = tape.stop_gradient(ia);
        let diff = tape.sub(ca, target)?;
        let sq = tape.mul(diff, diff)?;
        let term = tape.sum(sq);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("two terms"))
}

fn hinge_cos_mean(tape: &mut Tape, targets: Var, others: Var) -> Result<Var> {
    let (st, so) = (tape.shape(targets), tape.shape(others));
    if st.cols != so.cols {
        return Err(Error::dim("divergence_loss", st, so));
    }
    let mut terms = Vec::with_capacity(st.rows * so.rows);
    for i in 0..st.rows {
        let p = tape.slice_rows(targets, i, 1)?;
        for j in 0..so.rows {
            let r = tape.slice_rows(others, j, 1)?;
            let c = cosine_sim(tape, p, r)?;
            terms.push(tape.relu(c));
        }
    }
    let stacked = tape.concat_rows(&terms)?;
    let s = tape.sum(stacked);
    Ok(tape.scale(s, 1.0 / terms.len() as f64))
}

/// `max{0, cos(p^v, r^v)} + max{0, cos(p^a, r^a)}`; averaged over all
/// target × off-target pairs when a modality has more than two slots.
pub fn divergence_loss(tape: &mut Tape, p_image: Var, r_image: Var, p_audio: Var, r_audio: Var) -> Result<Var> {
    let v = hinge_cos_mean(tape, p_image, r_image)?;
    let a = hinge_cos_mean(tape, p_audio, r_audio)?;
    tape.add(v, a)
}

/// Spatial broadcast decoder: every slot is tiled over all positions, added
/// to a learned positional embedding, decoded per position by a ReLU MLP into
/// `c` feature channels plus one alpha logit, and the slot decodings are
/// blended with a softmax over slots.
#[derive(Debug, Clone, Copy)]
pub struct BroadcastDecoder {
    pub positions: ParamId,
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    pub channels: usize,
}

pub struct DecoderVars {
    positions: Var,
    l1: LinearVars,
    l2: LinearVars,
    l3: LinearVars,
    channels: usize,
}

/// Default hidden width of the reconstruction decoders.
pub const DECODER_HIDDEN: usize = 64;

impl BroadcastDecoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        modality: Modality,
        positions: usize,
        d: usize,
        hidden: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let p = format!("decoder.{modality}");
        Ok(BroadcastDecoder {
            positions: store.normal_init(format!("{p}.positions"), Shape::new(positions, d), 0.5, rng)?,
            l1: Linear::new(store, &format!("{p}.l1"), d, hidden, rng)?,
            l2: Linear::new(store, &format!("{p}.l2"), hidden, hidden, rng)?,
            l3: Linear::new(store, &format!("{p}.l3"), hidden, channels + 1, rng)?,
            channels,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> DecoderVars {
        DecoderVars {
            positions: tape.param(store, self.positions),
            l1: self.l1.bind(tape, store),
            l2: self.l2.bind(tape, store),
            l3: self.l3.bind(tape, store),
            channels: self.channels,
        }
    }
}

impl DecoderVars {
    /// Reconstructs a `positions × c` grid from `slots` (`s × d`).
    pub fn decode(&self, tape: &mut Tape, slots: Var) -> Result<Var> {
        let n_slots = tape.shape(slots).rows;
        // (pos + slot)·W1 = pos·W1 + slot·W1
        let pos_proj = tape.matmul(self.positions, self.l1.weight)?;
        let slot_proj = tape.matmul(slots, self.l1.weight)?;
        let mut contents = Vec::with_capacity(n_slots);
        let mut alphas = Vec::with_capacity(n_slots);
        for s in 0..n_slots {
            let row = tape.slice_rows(slot_proj, s, 1)?;
            let h = tape.add_row(pos_proj, row)?;
            let h = tape.add_row(h, self.l1.bias)?;
            let h = tape.relu(h);
            let h = self.l2.forward(tape, h)?;
            let h = tape.relu(h);
            let out = self.l3.forward(tape, h)?;
            contents.push(tape.slice_cols(out, 0, self.channels)?);
            alphas.push(tape.slice_cols(out, self.channels, 1)?);
        }
        let logits = tape.concat_cols(&alphas)?;
        let weights = tape.softmax_rows(logits)?;
        let mut recon = None;
        for (s, content) in contents.into_iter().enumerate() {
            let w = tape.slice_cols(weights, s, 1)?;
            let part = tape.mul_col(content, w)?;
            recon = Some(match recon {
                None => part,
                Some(acc) => tape.add(acc, part)?,
            });
        }
        Ok(recon.expect("at least one slot"))
    }
}

/// `‖target − decoded‖²` summed over every entry.
pub fn squared_error(tape: &mut Tape, target: Var, decoded: Var) -> Result<Var> {
    let diff = tape.sub(target, decoded)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// `‖v − g_v(S^v)‖² + ‖a − g_a(S^a)‖²`.
pub fn reconstruction_loss(
    tape: &mut Tape,
    image: &FeatureGrid,
    audio: &FeatureGrid,
    slots_image: Var,
    slots_audio: Var,
    dec_image: &DecoderVars,
    dec_audio: &DecoderVars,
) -> Result<Var> {
    let rv = dec_image.decode(tape, slots_image)?;
    let ra = dec_audio.decode(tape, slots_audio)?;
    let lv = squared_error(tape, image.data, rv)?;
    let la = squared_error(tape, audio.data, ra)?;
    tape.add(lv, la)
}

/// Scalar loss nodes for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cotr: Var,
    pub matching: Var,
    pub div: Var,
    pub recon: Var,
}

/// `cotr + λ₁·match + λ₂·div + λ₃·recon`, with a report of the components.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossReport)> {
    let report = LossReport::compose(
        tape.scalar(terms.cotr),
        tape.scalar(terms.matching),
        tape.scalar(terms.div),
        tape.scalar(terms.recon),
        w,
    )?;
    let m = tape.scale(terms.matching, w.match_weight);
    let d = tape.scale(terms.div, w.div_weight);
    let r = tape.scale(terms.recon, w.recon_weight);
    let t = tape.add(terms.cotr, m)?;
    let t = tape.add(t, d)?;
    let t = tape.add(t, r)?;
    Ok((t, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(tape: &mut Tape, rows: usize, cols: usize, v: &[f64]) -> Var {
        tape.constant(Shape::new(rows, cols), v.to_vec()).unwrap()
    }

    #[test]
    fn single_pair_contrastive_is_zero() {
        let mut tape = Tape::new();
        let pv = c(&mut tape, 1, 3, &[0.2, -1.0, 0.4]);
        let pa = c(&mut tape, 1, 3, &[1.0, 0.3, 0.0]);
        let l = contrastive_loss(&mut tape, pv, pa, 0.03, &[true]).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn two_orthogonal_pairs_closed_form() {
        let mut tape = Tape::new();
        let pv = c(&mut tape, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let pa = c(&mut tape, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let l = contrastive_loss(&mut tape, pv, pa, 1.0, &[true; 4]).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.scalar(l) - expected).abs() < 1e-12);
        assert!((tape.scalar(l) - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn masking_the_only_negative_pair_zeroes_loss() {
        let mut tape = Tape::new();
        let pv = c(&mut tape, 2, 2, &[1.0, 0.0, 0.3, 1.0]);
        let pa = c(&mut tape, 2, 2, &[0.5, 0.5, 0.0, 1.0]);
        let l = contrastive_loss(&mut tape, pv, pa, 0.1, &[true, false, false, true]).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
    }

    #[test]
    fn contrastive_errors() {
        let mut tape = Tape::new();
        let pv = c(&mut tape, 1, 2, &[1.0, 0.0]);
        let z = c(&mut tape, 1, 2, &[0.0, 0.0]);
        assert!(matches!(contrastive_loss(&mut tape, pv, pv, 0.0, &[true]), Err(Error::Config(_))));
        assert!(matches!(contrastive_loss(&mut tape, pv, z, 0.1, &[true]), Err(Error::Degenerate(_))));
        assert!(matches!(contrastive_loss(&mut tape, pv, pv, 0.1, &[false]), Err(Error::Contract(_))));
    }

    #[test]
    fn matching_values() {
        let mut tape = Tape::new();
        let x = c(&mut tape, 2, 1, &[0.3, 0.7]);
        let zero = attention_matching_loss(&mut tape, x, x, x, x).unwrap();
        assert_eq!(tape.scalar(zero), 0.0);
        let ca = c(&mut tape, 2, 1, &[1.0, 0.0]);
        let ia = c(&mut tape, 2, 1, &[0.0, 1.0]);
        let two = attention_matching_loss(&mut tape, ca, ia, x, x).unwrap();
        assert!((tape.scalar(two) - 2.0).abs() < 1e-15);
        let short = c(&mut tape, 1, 1, &[1.0]);
        assert!(attention_matching_loss(&mut tape, ca, short, x, x).is_err());
    }

    #[test]
    fn divergence_values() {
        let mut tape = Tape::new();
        let e1 = c(&mut tape, 1, 2, &[1.0, 0.0]);
        let e2 = c(&mut tape, 1, 2, &[0.0, 1.0]);
        let l = divergence_loss(&mut tape, e1, e2, e1, e2).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let l = divergence_loss(&mut tape, e1, e1, e2, e2).unwrap();
        assert!((tape.scalar(l) - 2.0).abs() < 1e-15);
        let neg = c(&mut tape, 1, 2, &[-0.5, 3f64.sqrt() / 2.0]);
        let l = divergence_loss(&mut tape, e1, neg, e1, neg).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let z = c(&mut tape, 1, 2, &[0.0, 0.0]);
        assert!(matches!(divergence_loss(&mut tape, e1, z, e1, e2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn squared_error_values() {
        let mut tape = Tape::new();
        let v = c(&mut tape, 2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let same = squared_error(&mut tape, v, v).unwrap();
        assert_eq!(tape.scalar(same), 0.0);
        let z = c(&mut tape, 2, 2, &[0.0; 4]);
        let full = squared_error(&mut tape, v, z).unwrap();
        assert!((tape.scalar(full) - 14.25).abs() < 1e-15);
    }

    #[test]
    fn total_composition() {
        let w = LossWeights::default();
        let r = LossReport::compose(1.0, 1.0, 1.0, 1.0, &w).unwrap();
        assert!((r.total - 101.2).abs() < 1e-12);
        let zero = LossWeights {
            match_weight: 0.0,
            div_weight: 0.0,
            recon_weight: 0.0,
            tau: 0.03,
        };
        let r = LossReport::compose(2.5, 7.0, 1.0, 3.0, &zero).unwrap();
        assert_eq!(r.total, 2.5);
        let err = LossReport::compose(1.0, f64::NAN, 0.0, 0.0, &w).unwrap_err();
        assert!(err.to_string().contains("match"));
    }
}
