//! The full model: encoders, mask tokens, joint slot attention and the
//! reconstruction decoders, with per-sample and per-batch loss graphs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffcore::{ParamStore, Shape, Tape, Var};
use crate::encoders::{
    apply_mask_tokens, encode_audio, encode_image, AudioEncoder, FeatureGrid, ImageEncoder, MaskToken, Modality,
};
use crate::error::{Error, Result};
use crate::fnmitigation::{reciprocal_filter, Embeddings, NeighborSets};
use crate::jsa::{run_jsa, target_attention, JsaOutput, JsaParams};
use crate::localization::cross_modal_attention;
use crate::objectives::{
    attention_matching_loss, contrastive_loss, divergence_loss, reconstruction_loss, BroadcastDecoder, LossReport,
    LossWeights,
};
use crate::synthbench::sample_seed;

use super::config::TrainConfig;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    pub image_encoder: ImageEncoder,
    pub audio_encoder: AudioEncoder,
    pub jsa: JsaParams,
    pub mask_image: MaskToken,
    pub mask_audio: MaskToken,
    pub decoder_image: BroadcastDecoder,
    pub decoder_audio: BroadcastDecoder,
}

/// Random streams choosing which feature rows get mask tokens.
#[derive(Debug, Clone)]
pub struct Masking {
    pub image: ChaCha8Rng,
    pub audio: ChaCha8Rng,
}

impl Masking {
    /// Streams for sample slot `slot` of optimizer step `step`.
    pub fn for_step(seed: u64, step: u64, slot: usize) -> Self {
        let base = sample_seed(sample_seed(seed ^ 0x6d61_736b, step as usize), slot);
        Masking {
            image: ChaCha8Rng::seed_from_u64(sample_seed(base, 0)),
            audio: ChaCha8Rng::seed_from_u64(sample_seed(base, 1)),
        }
    }
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Encoder output before mask tokens.
    pub image_grid: FeatureGrid,
    pub audio_grid: FeatureGrid,
    pub jsa: JsaOutput,
    pub p_image: Var,
    pub p_audio: Var,
    /// Audio target query over image keys (`h·w × 1`).
    pub ca_av: Var,
    /// Image target query over audio keys (`t × 1`).
    pub ca_va: Var,
    pub ia_vv: Var,
    pub ia_aa: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SampleLosses {
    pub matching: Var,
    pub div: Var,
    pub recon: Var,
}

/// One raw image/spectrogram pair.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub image: &'a [f64],
    pub audio: &'a [f64],
}

/// Intra-modal attention values of one sample, held fixed as matching
/// targets. Finite-difference checks use these so that perturbations only
/// act through the paths the analytic gradient follows.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTargets {
    pub ia_image: Vec<f64>,
    pub ia_audio: Vec<f64>,
}

/// The single-graph batch loss.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub report: LossReport,
    pub neighbors: NeighborSets,
    /// Matching targets as computed in this pass.
    pub targets: Vec<FrozenTargets>,
}

/// Loss value, parameter gradients and false-negative sets of one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub report: LossReport,
    pub grads: Vec<Option<Vec<f64>>>,
    pub neighbors: NeighborSets,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.encoder_dims();
        let slots = config.slot_config();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let image_encoder = ImageEncoder::new(&mut store, &dims, &mut rng)?;
        let audio_encoder = AudioEncoder::new(&mut store, &dims, &mut rng)?;
        let jsa = JsaParams::new(&mut store, &slots, dims.channels, &mut rng)?;
        let mask_image = MaskToken::new(&mut store, Modality::Image, dims.channels, config.mask_ratio)?;
        let mask_audio = MaskToken::new(&mut store, Modality::Audio, dims.channels, config.mask_ratio)?;
        let side = dims.grid_side();
        let decoder_image = BroadcastDecoder::new(
            &mut store,
            Modality::Image,
            side * side,
            slots.d,
            config.decoder_hidden,
            dims.channels,
            &mut rng,
        )?;
        let decoder_audio = BroadcastDecoder::new(
            &mut store,
            Modality::Audio,
            dims.audio_len(),
            slots.d,
            config.decoder_hidden,
            dims.channels,
            &mut rng,
        )?;
        Ok(Model {
            config: config.clone(),
            store,
            image_encoder,
            audio_encoder,
            jsa,
            mask_image,
            mask_audio,
            decoder_image,
            decoder_audio,
        })
    }

    /// Encodes a pair, applies mask tokens when `masking` is given, and runs
    /// joint slot attention plus the cross- and intra-modal attention maps.
    pub fn forward(&self, tape: &mut Tape, pair: Pair<'_>, masking: Option<&mut Masking>) -> Result<Forward> {
        let dims = self.config.encoder_dims();
        let slots = self.config.slot_config();
        let image_grid = encode_image(tape, &self.store, &self.image_encoder, &dims, pair.image)?;
        let audio_grid = encode_audio(tape, &self.store, &self.audio_encoder, &dims, pair.audio)?;
        let (image_in, audio_in) = match masking {
            Some(m) => (
                apply_mask_tokens(tape, &self.store, &image_grid, &self.mask_image, &mut m.image)?.0,
                apply_mask_tokens(tape, &self.store, &audio_grid, &self.mask_audio, &mut m.audio)?.0,
            ),
            None => (image_grid, audio_grid),
        };
        let jsa = run_jsa(tape, &self.store, &self.jsa, &image_in, &audio_in, &slots)?;
        let p_image = jsa.image.bundle.target_embedding(tape, &slots)?;
        let p_audio = jsa.audio.bundle.target_embedding(tape, &slots)?;
        let (_, ca_av) = cross_modal_attention(tape, jsa.audio.bundle.query, jsa.image.keys, slots.n_target)?;
        let (_, ca_va) = cross_modal_attention(tape, jsa.image.bundle.query, jsa.audio.keys, slots.n_target)?;
        let ia_vv = target_attention(tape, jsa.image.intra.a_hat, slots.n_target)?;
        let ia_aa = target_attention(tape, jsa.audio.intra.a_hat, slots.n_target)?;
        Ok(Forward {
            image_grid,
            audio_grid,
            jsa,
            p_image,
            p_audio,
            ca_av,
            ca_va,
            ia_vv,
            ia_aa,
        })
    }

    /// Matching, divergence and reconstruction terms of one sample.
    pub fn sample_losses(&self, tape: &mut Tape, fwd: &Forward) -> Result<SampleLosses> {
        let slots = self.config.slot_config();
        let matching = attention_matching_loss(tape, fwd.ca_av, fwd.ia_vv, fwd.ca_va, fwd.ia_aa)?;
        let (img, aud) = (&fwd.jsa.image.bundle, &fwd.jsa.audio.bundle);
        let p_v = img.targets(tape, &slots)?;
        let r_v = img.off_targets(tape, &slots)?;
        let p_a = aud.targets(tape, &slots)?;
        let r_a = aud.off_targets(tape, &slots)?;
        let div = divergence_loss(tape, p_v, r_v, p_a, r_a)?;
        let dec_v = self.decoder_image.bind(tape, &self.store);
        let dec_a = self.decoder_audio.bind(tape, &self.store);
        let recon = reconstruction_loss(
            tape,
            &fwd.image_grid,
            &fwd.audio_grid,
            img.slots,
            aud.slots,
            &dec_v,
            &dec_a,
        )?;
        Ok(SampleLosses { matching, div, recon })
    }

    /// k-reciprocal false-negative sets from target embedding values.
    pub fn neighbor_sets(&self, p_image: &[f64], p_audio: &[f64], batch: usize) -> Result<NeighborSets> {
        let d = self.config.d;
        reciprocal_filter(
            &Embeddings::new(batch, d, p_image.to_vec())?,
            &Embeddings::new(batch, d, p_audio.to_vec())?,
            self.config.k,
        )
    }

    /// Whole-batch loss on a single tape. Used by gradient checks and as the
    /// reference for [`batch_gradients`](Self::batch_gradients). With `frozen`,
    /// the matching targets are replaced by the given constants.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        pairs: &[Pair<'_>],
        maskings: Option<&mut [Masking]>,
        frozen: Option<&[FrozenTargets]>,
    ) -> Result<BatchLoss> {
        let b = pairs.len();
        if let Some(f) = frozen {
            if f.len() != b {
                return Err(Error::dim("batch_loss", b, format!("{} frozen targets", f.len())));
            }
        }
        let w = self.config.loss_weights();
        let mut maskings = maskings;
        let mut p_v = Vec::with_capacity(b);
        let mut p_a = Vec::with_capacity(b);
        let mut locals = Vec::with_capacity(b);
        let mut targets = Vec::with_capacity(b);
        let mut sums = [0.0; 3];
        for (i, pair) in pairs.iter().enumerate() {
            let m = maskings.as_deref_mut().map(|m| &mut m[i]);
            let mut fwd = self.forward(tape, *pair, m)?;
            targets.push(FrozenTargets {
                ia_image: tape.value(fwd.ia_vv).to_vec(),
                ia_audio: tape.value(fwd.ia_aa).to_vec(),
            });
            if let Some(f) = frozen {
                fwd.ia_vv = tape.constant(tape.shape(fwd.ia_vv), f[i].ia_image.clone())?;
                fwd.ia_aa = tape.constant(tape.shape(fwd.ia_aa), f[i].ia_audio.clone())?;
            }
            let losses = self.sample_losses(tape, &fwd)?;
            accumulate(&mut sums, tape, &losses);
            locals.push(local_loss(tape, &losses, &w, b)?);
            p_v.push(fwd.p_image);
            p_a.push(fwd.p_audio);
        }
        let pv = tape.concat_rows(&p_v)?;
        let pa = tape.concat_rows(&p_a)?;
        let neighbors = self.neighbor_sets(tape.value(pv), tape.value(pa), b)?;
        let cotr = contrastive_loss(tape, pv, pa, w.tau, &neighbors.keep)?;
        let report = report_for(tape.scalar(cotr), &sums, b, &w)?;
        let mut total = cotr;
        for l in locals {
            total = tape.add(total, l)?;
        }
        Ok(BatchLoss {
            total,
            report,
            neighbors,
            targets,
        })
    }

    /// Batch gradients with samples sharded across threads.
    ///
    /// Each sample gets its own tape. The contrastive term is differentiated
    /// on a small tape over the stacked target embeddings, and its gradients
    /// are fed back into the sample tapes as extra seeds. Reduction runs in
    /// sample order, so the result does not depend on the thread count.
    pub fn batch_gradients(&self, pairs: &[Pair<'_>], maskings: Option<Vec<Masking>>) -> Result<BatchGradients> {
        let b = pairs.len();
        let d = self.config.d;
        let w = self.config.loss_weights();
        let mut maskings: Vec<Option<Masking>> = match maskings {
            Some(m) if m.len() == b => m.into_iter().map(Some).collect(),
            Some(m) => return Err(Error::dim("batch_gradients", b, format!("{} maskings", m.len()))),
            None => vec![None; b],
        };

        struct Shard {
            tape: Tape,
            fwd: Forward,
            losses: SampleLosses,
            local: Var,
        }
        let mut shards = pairs
            .par_iter()
            .zip(maskings.par_iter_mut())
            .map(|(pair, m)| -> Result<Shard> {
                let mut tape = Tape::new();
                let fwd = self.forward(&mut tape, *pair, m.as_mut())?;
                let losses = self.sample_losses(&mut tape, &fwd)?;
                let local = local_loss(&mut tape, &losses, &w, b)?;
                Ok(Shard {
                    tape,
                    fwd,
                    losses,
                    local,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut sums = [0.0; 3];
        let mut pv_data = Vec::with_capacity(b * d);
        let mut pa_data = Vec::with_capacity(b * d);
        for s in &shards {
            accumulate(&mut sums, &s.tape, &s.losses);
            pv_data.extend_from_slice(s.tape.value(s.fwd.p_image));
            pa_data.extend_from_slice(s.tape.value(s.fwd.p_audio));
        }
        let neighbors = self.neighbor_sets(&pv_data, &pa_data, b)?;
        let mut head = Tape::new();
        let pv = head.variable(Shape::new(b, d), pv_data)?;
        let pa = head.variable(Shape::new(b, d), pa_data)?;
        let cotr = contrastive_loss(&mut head, pv, pa, w.tau, &neighbors.keep)?;
        let report = report_for(head.scalar(cotr), &sums, b, &w)?;
        head.backward(cotr)?;
        let (gv, ga) = (head.grad(pv), head.grad(pa));

        let n_params = self.store.len();
        let per_sample = shards
            .par_iter_mut()
            .enumerate()
            .map(|(i, s)| -> Result<Vec<Option<Vec<f64>>>> {
                let seeds = [
                    (s.local, vec![1.0]),
                    (s.fwd.p_image, gv[i * d..(i + 1) * d].to_vec()),
                    (s.fwd.p_audio, ga[i * d..(i + 1) * d].to_vec()),
                ];
                s.tape.backward_seeded(&seeds)?;
                Ok(s.tape.param_grads(n_params))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_params];
        for sample in per_sample {
            for (acc, g) in grads.iter_mut().zip(sample) {
                if let Some(g) = g {
                    match acc {
                        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                        None => *acc = Some(g),
                    }
                }
            }
        }
        Ok(BatchGradients {
            report,
            grads,
            neighbors,
        })
    }
}

/// `(λ₁·match + λ₂·div + λ₃·recon) / B` for one sample.
fn local_loss(tape: &mut Tape, l: &SampleLosses, w: &LossWeights, b: usize) -> Result<Var> {
    let m = tape.scale(l.matching, w.match_weight);
    let d = tape.scale(l.div, w.div_weight);
    let r = tape.scale(l.recon, w.recon_weight);
    let s = tape.add(m, d)?;
    let s = tape.add(s, r)?;
    Ok(tape.scale(s, 1.0 / b as f64))
}

fn accumulate(sums: &mut [f64; 3], tape: &Tape, l: &SampleLosses) {
    sums[0] += tape.scalar(l.matching);
    sums[1] += tape.scalar(l.div);
    sums[2] += tape.scalar(l.recon);
}

fn report_for(cotr: f64, sums: &[f64; 3], b: usize, w: &LossWeights) -> Result<LossReport> {
    let n = b as f64;
    LossReport::compose(cotr, sums[0] / n, sums[1] / n, sums[2] / n, w)
}
