//! Joint slot attention.
//!
//! Image and audio features are each decomposed by an iterative slot
//! attention loop. Both loops start from the same learnable initial slots;
//! the projections, GRU and residual MLP are kept per modality. The first
//! `n_target` slots are target slots, the rest off-target slots.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{gru_cell, Gru, GruVars, Linear, LinearVars, Norm, NormVars, ParamId, ParamStore, Shape, Tape, Var};
use crate::encoders::{FeatureGrid, Modality};
use crate::error::{Error, Result};

/// Column-sum guard for key normalization. Kept far below the 1e-9
/// stochasticity tolerance of normalized columns.
pub const COLUMN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotConfig {
    pub n_target: usize,
    pub n_off: usize,
    pub d: usize,
    pub iters: usize,
}

impl Default for SlotConfig {
    fn default() -> Self {
        SlotConfig {
            n_target: 1,
            n_off: 1,
            d: 32,
            iters: 5,
        }
    }
}

impl SlotConfig {
    pub fn n_slots(&self) -> usize {
        self.n_target + self.n_off
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_target == 0 || self.n_off == 0 {
            return Err(Error::Config("need at least one target and one off-target slot".into()));
        }
        if self.d < 2 {
            return Err(Error::Config(format!("slot width d = {} too small", self.d)));
        }
        if self.iters == 0 {
            return Err(Error::Config("slot attention needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Per-modality weights of the slot attention loop.
#[derive(Debug, Clone, Copy)]
pub struct SideParams {
    pub norm_input: Norm,
    pub to_k: Linear,
    pub to_v: Linear,
    pub norm_slots: Norm,
    pub to_q: Linear,
    pub gru: Gru,
    pub norm_mlp: Norm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct SideVars {
    pub norm_input: NormVars,
    pub to_k: LinearVars,
    pub to_v: LinearVars,
    pub norm_slots: NormVars,
    pub to_q: LinearVars,
    pub gru: GruVars,
    pub norm_mlp: NormVars,
    pub mlp_in: LinearVars,
    pub mlp_out: LinearVars,
}

impl SideParams {
    pub fn new<R: Rng>(store: &mut ParamStore, modality: Modality, c: usize, d: usize, rng: &mut R) -> Result<Self> {
        let p = format!("jsa.{modality}");
        Ok(SideParams {
            norm_input: Norm::new(store, &format!("{p}.norm_input"), c)?,
            to_k: Linear::new(store, &format!("{p}.to_k"), c, d, rng)?,
            to_v: Linear::new(store, &format!("{p}.to_v"), c, d, rng)?,
            norm_slots: Norm::new(store, &format!("{p}.norm_slots"), d)?,
            to_q: Linear::new(store, &format!("{p}.to_q"), d, d, rng)?,
            gru: Gru::new(store, &format!("{p}.gru"), d, rng)?,
            norm_mlp: Norm::new(store, &format!("{p}.norm_mlp"), d)?,
            mlp_in: Linear::new(store, &format!("{p}.mlp_in"), d, 2 * d, rng)?,
            mlp_out: Linear::new(store, &format!("{p}.mlp_out"), 2 * d, d, rng)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> SideVars {
        SideVars {
            norm_input: self.norm_input.bind(tape, store),
            to_k: self.to_k.bind(tape, store),
            to_v: self.to_v.bind(tape, store),
            norm_slots: self.norm_slots.bind(tape, store),
            to_q: self.to_q.bind(tape, store),
            gru: self.gru.bind(tape, store),
            norm_mlp: self.norm_mlp.bind(tape, store),
            mlp_in: self.mlp_in.bind(tape, store),
            mlp_out: self.mlp_out.bind(tape, store),
        }
    }
}

/// Shared initial slots plus per-modality loop weights.
#[derive(Debug, Clone, Copy)]
pub struct JsaParams {
    pub slots0: ParamId,
    pub image: SideParams,
    pub audio: SideParams,
}

impl JsaParams {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &SlotConfig, c: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(JsaParams {
            slots0: store.normal_init("jsa.slots0", Shape::new(cfg.n_slots(), cfg.d), 1.0, rng)?,
            image: SideParams::new(store, Modality::Image, c, cfg.d, rng)?,
            audio: SideParams::new(store, Modality::Audio, c, cfg.d, rng)?,
        })
    }

    pub fn side(&self, modality: Modality) -> &SideParams {
        match modality {
            Modality::Image => &self.image,
            Modality::Audio => &self.audio,
        }
    }
}

/// Slot attention matrix `A` (softmax over slots per key) and its
/// key-normalized form `Â` (each slot column sums to one).
#[derive(Debug, Clone, Copy)]
pub struct AttentionMaps {
    pub a: Var,
    pub a_hat: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SlotBundle {
    /// Final slots `S_N`; rows `0..n_target` are target slots.
    pub slots: Var,
    /// Query used in the last iteration, `Q_N`.
    pub query: Var,
    pub modality: Modality,
}

impl SlotBundle {
    pub fn targets(&self, tape: &mut Tape, cfg: &SlotConfig) -> Result<Var> {
        tape.slice_rows(self.slots, 0, cfg.n_target)
    }

    pub fn off_targets(&self, tape: &mut Tape, cfg: &SlotConfig) -> Result<Var> {
        tape.slice_rows(self.slots, cfg.n_target, cfg.n_off)
    }

    /// One vector per sample for contrastive learning and retrieval: the
    /// target slot itself, or the mean of the target slots when there are several.
    pub fn target_embedding(&self, tape: &mut Tape, cfg: &SlotConfig) -> Result<Var> {
        let t = self.targets(tape, cfg)?;
        if cfg.n_target == 1 {
            return Ok(t);
        }
        let ones = tape.constant(Shape::new(1, cfg.n_target), vec![1.0 / cfg.n_target as f64; cfg.n_target])?;
        tape.matmul(ones, t)
    }
}

/// Output of one modality's slot attention loop.
#[derive(Debug, Clone)]
pub struct SideOutput {
    pub bundle: SlotBundle,
    pub keys: Var,
    pub values: Var,
    /// Maps of the final iteration (intra-modal attention).
    pub intra: AttentionMaps,
    /// Maps of every iteration, first to last.
    pub history: Vec<AttentionMaps>,
}

#[derive(Debug, Clone)]
pub struct JsaOutput {
    pub image: SideOutput,
    pub audio: SideOutput,
}

/// LayerNorm then the key and value projections.
pub fn project_kv(tape: &mut Tape, side: &SideVars, grid: &FeatureGrid) -> Result<(Var, Var)> {
    let normed = side.norm_input.forward(tape, grid.data)?;
    let k = side.to_k.forward(tape, normed)?;
    let v = side.to_v.forward(tape, normed)?;
    Ok((k, v))
}

/// `M = K·Qᵀ/√d`, softmax over the slot axis, then key normalization.
pub fn attention_maps(tape: &mut Tape, keys: Var, query: Var) -> Result<AttentionMaps> {
    let (sk, sq) = (tape.shape(keys), tape.shape(query));
    if sk.cols != sq.cols {
        return Err(Error::dim("attention", sk, sq));
    }
    let qt = tape.transpose(query);
    let logits = tape.matmul(keys, qt)?;
    let logits = tape.scale(logits, 1.0 / (sk.cols as f64).sqrt());
    let a = tape.softmax_rows(logits)?;
    let a_hat = tape.col_normalize(a, COLUMN_EPS)?;
    Ok(AttentionMaps { a, a_hat })
}

/// Attention over keys for the target slots: the first column of `Â`, or the
/// element-wise max over target columns when there are several.
pub fn target_attention(tape: &mut Tape, a_hat: Var, n_target: usize) -> Result<Var> {
    let cols = tape.slice_cols(a_hat, 0, n_target)?;
    if n_target == 1 {
        Ok(cols)
    } else {
        Ok(tape.row_max(cols))
    }
}

pub struct StepOutput {
    pub slots: Var,
    pub query: Var,
    pub maps: AttentionMaps,
}

/// One slot attention iteration.
pub fn attention_step(tape: &mut Tape, side: &SideVars, prev: Var, keys: Var, values: Var) -> Result<StepOutput> {
    let normed = side.norm_slots.forward(tape, prev)?;
    let query = side.to_q.forward(tape, normed)?;
    let maps = attention_maps(tape, keys, query)?;
    let a_hat_t = tape.transpose(maps.a_hat);
    let updates = tape.matmul(a_hat_t, values)?;
    let gated = gru_cell(tape, &side.gru, prev, updates)?;
    let normed = side.norm_mlp.forward(tape, gated)?;
    let hidden = side.mlp_in.forward(tape, normed)?;
    let hidden = tape.relu(hidden);
    let delta = side.mlp_out.forward(tape, hidden)?;
    let slots = tape.add(gated, delta)?;
    Ok(StepOutput { slots, query, maps })
}

/// Runs the slot attention loop for one modality from the initial slots.
pub fn run_side(tape: &mut Tape, side: &SideVars, grid: &FeatureGrid, slots0: Var, cfg: &SlotConfig) -> Result<SideOutput> {
    let s0 = tape.shape(slots0);
    if s0 != Shape::new(cfg.n_slots(), cfg.d) {
        return Err(Error::dim("run_jsa", s0, Shape::new(cfg.n_slots(), cfg.d)));
    }
    let (keys, values) = project_kv(tape, side, grid)?;
    let mut slots = slots0;
    let mut history = Vec::with_capacity(cfg.iters);
    let mut query = None;
    for _ in 0..cfg.iters {
        let step = attention_step(tape, side, slots, keys, values)?;
        slots = step.slots;
        query = Some(step.query);
        history.push(step.maps);
    }
    let query = query.ok_or_else(|| Error::Config("zero slot attention iterations".into()))?;
    let intra = *history.last().expect("at least one iteration");
    Ok(SideOutput {
        bundle: SlotBundle {
            slots,
            query,
            modality: grid.modality,
        },
        keys,
        values,
        intra,
        history,
    })
}

/// Joint slot attention over an image grid and an audio grid.
pub fn run_jsa(
    tape: &mut Tape,
    store: &ParamStore,
    params: &JsaParams,
    image: &FeatureGrid,
    audio: &FeatureGrid,
    cfg: &SlotConfig,
) -> Result<JsaOutput> {
    if image.channels != audio.channels {
        return Err(Error::dim("run_jsa", format!("image c={}", image.channels), format!("audio c={}", audio.channels)));
    }
    let slots0 = tape.param(store, params.slots0);
    let image_vars = params.image.bind(tape, store);
    let audio_vars = params.audio.bind(tape, store);
    let image_out = run_side(tape, &image_vars, image, slots0, cfg)?;
    let audio_out = run_side(tape, &audio_vars, audio, slots0, cfg)?;
    Ok(JsaOutput {
        image: image_out,
        audio: audio_out,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identical_queries_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let k = tape.constant(Shape::new(6, 4), random(&mut rng, 24)).unwrap();
        let q_row = random(&mut rng, 4);
        let q = tape.constant(Shape::new(2, 4), [q_row.clone(), q_row].concat()).unwrap();
        let maps = attention_maps(&mut tape, k, q).unwrap();
        for v in tape.value(maps.a) {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn key_normalization_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(Shape::new(2, 1), vec![0.5, 0.75]).unwrap();
        let n = tape.col_normalize(a, COLUMN_EPS).unwrap();
        let v = tape.value(n);
        assert!((v[0] - 0.4).abs() < 1e-12 && (v[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn updates_are_weighted_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let k = tape.constant(Shape::new(4, 3), random(&mut rng, 12)).unwrap();
        let v = tape.constant(Shape::new(4, 3), random(&mut rng, 12)).unwrap();
        let q = tape.constant(Shape::new(2, 3), random(&mut rng, 6)).unwrap();
        let maps = attention_maps(&mut tape, k, q).unwrap();
        let at = tape.transpose(maps.a_hat);
        let upd = tape.matmul(at, v).unwrap();

        // recompute: weight_ij = A_ij / Σ_l A_lj, update_j = Σ_i weight_ij v_i
        let (kv, qv, vv) = (tape.value(k).to_vec(), tape.value(q).to_vec(), tape.value(v).to_vec());
        let mut a = [[0.0; 2]; 4];
        for i in 0..4 {
            let logits: Vec<f64> = (0..2)
                .map(|j| (0..3).map(|c| kv[i * 3 + c] * qv[j * 3 + c]).sum::<f64>() / 3f64.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..2 {
                a[i][j] = logits[j].exp() / z;
            }
        }
        for j in 0..2 {
            let total: f64 = (0..4).map(|i| a[i][j]).sum();
            for c in 0..3 {
                let mean: f64 = (0..4).map(|i| a[i][j] * vv[i * 3 + c]).sum::<f64>() / total;
                assert!((tape.value(upd)[j * 3 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_slots_rejected() {
        let cfg = SlotConfig {
            n_target: 0,
            ..SlotConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
