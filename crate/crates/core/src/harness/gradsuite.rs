//! Finite-difference gradient suite over every differentiable operation,
//! the model's building blocks, and the full training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::gradcheck::{check_inputs, floored_relative_error, projection, FD_EPS, GRAD_FLOOR};
use crate::diffcore::{cosine_matrix, cosine_sim, gru_cell, Gru, Linear, Norm, ParamId, ParamStore, Shape, Tape, Var};
use crate::encoders::{encode_audio, encode_image, AudioEncoder, EncoderDims, FeatureGrid, ImageEncoder, Modality};
use crate::error::Result;
use crate::jsa::{run_side, SideParams, SlotConfig};
use crate::objectives::{attention_matching_loss, contrastive_loss, divergence_loss, BroadcastDecoder};

use super::config::TrainConfig;
use super::model::{FrozenTargets, Masking, Model, Pair};

/// Bound for single operations and small composites.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Bound for the full training loss.
pub const LOSS_TOLERANCE: f64 = 1e-4;
/// Steps of the four-point stencil used on parameter tensors, tried in
/// order until the sampled function looks smooth across the stencil.
pub const STENCIL_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
/// A stencil is rejected when its second differences disagree by more than
/// this fraction of the gradient (in slope units). A kink of slope jump Δ
/// inside the stencil produces a disagreement of at least Δ/2.
pub const KINK_FRACTION: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    /// Sampled entries sitting on a kink (relu, max-pool tie, a flipped
    /// neighbour set) at every stencil step; excluded from the error.
    pub skipped: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<(Shape, Vec<f64>)>,
    f: OpFn,
}

/// Wraps a tensor-valued op so the checked scalar is a random projection.
fn projected(weights: Vec<f64>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpFn {
    Box::new(move |t, v| {
        let y = f(t, v)?;
        projection(t, y, &weights)
    })
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let s = Shape::new;
    let mut u = |n: usize, lo: f64, hi: f64| uniform(rng, n, lo, hi);
    let mut cases = vec![
        OpCase {
            name: "matmul",
            inputs: vec![(s(4, 3), u(12, -1.0, 1.0)), (s(3, 2), u(6, -1.0, 1.0))],
            f: projected(u(8, -1.0, 1.0), |t, v| t.matmul(v[0], v[1])),
        },
        OpCase {
            name: "transpose",
            inputs: vec![(s(3, 4), u(12, -1.0, 1.0))],
            f: projected(u(12, -1.0, 1.0), |t, v| Ok(t.transpose(v[0]))),
        },
        OpCase {
            name: "add",
            inputs: vec![(s(2, 3), u(6, -1.0, 1.0)), (s(2, 3), u(6, -1.0, 1.0))],
            f: projected(u(6, -1.0, 1.0), |t, v| t.add(v[0], v[1])),
        },
        OpCase {
            name: "sub",
            inputs: vec![(s(2, 3), u(6, -1.0, 1.0)), (s(2, 3), u(6, -1.0, 1.0))],
            f: projected(u(6, -1.0, 1.0), |t, v| t.sub(v[0], v[1])),
        },
        OpCase {
            name: "mul",
            inputs: vec![(s(2, 3), u(6, -1.0, 1.0)), (s(2, 3), u(6, -1.0, 1.0))],
            f: projected(u(6, -1.0, 1.0), |t, v| t.mul(v[0], v[1])),
        },
        OpCase {
            name: "add_row",
            inputs: vec![(s(3, 4), u(12, -1.0, 1.0)), (s(1, 4), u(4, -1.0, 1.0))],
            f: projected(u(12, -1.0, 1.0), |t, v| t.add_row(v[0], v[1])),
        },
        OpCase {
            name: "mul_col",
            inputs: vec![(s(3, 4), u(12, -1.0, 1.0)), (s(3, 1), u(3, -1.0, 1.0))],
            f: projected(u(12, -1.0, 1.0), |t, v| t.mul_col(v[0], v[1])),
        },
        OpCase {
            name: "scale",
            inputs: vec![(s(2, 2), u(4, -1.0, 1.0))],
            f: projected(u(4, -1.0, 1.0), |t, v| Ok(t.scale(v[0], -1.7))),
        },
        OpCase {
            name: "add_scalar",
            inputs: vec![(s(2, 2), u(4, -1.0, 1.0))],
            f: projected(u(4, -1.0, 1.0), |t, v| Ok(t.add_scalar(v[0], 0.3))),
        },
        OpCase {
            name: "relu",
            inputs: vec![(s(3, 3), u(9, -1.0, 1.0))],
            f: projected(u(9, -1.0, 1.0), |t, v| Ok(t.relu(v[0]))),
        },
        OpCase {
            name: "sigmoid",
            inputs: vec![(s(3, 3), u(9, -3.0, 3.0))],
            f: projected(u(9, -1.0, 1.0), |t, v| Ok(t.sigmoid(v[0]))),
        },
        OpCase {
            name: "tanh",
            inputs: vec![(s(3, 3), u(9, -2.0, 2.0))],
            f: projected(u(9, -1.0, 1.0), |t, v| Ok(t.tanh(v[0]))),
        },
        OpCase {
            name: "exp",
            inputs: vec![(s(2, 3), u(6, -1.0, 1.0))],
            f: projected(u(6, -1.0, 1.0), |t, v| Ok(t.exp(v[0]))),
        },
        OpCase {
            name: "log",
            inputs: vec![(s(2, 3), u(6, 0.5, 2.0))],
            f: projected(u(6, -1.0, 1.0), |t, v| t.log(v[0])),
        },
        OpCase {
            name: "softmax_rows",
            inputs: vec![(s(5, 2), u(10, -2.0, 2.0))],
            f: projected(u(10, -1.0, 1.0), |t, v| t.softmax_rows(v[0])),
        },
        OpCase {
            name: "layer_norm",
            inputs: vec![(s(3, 5), u(15, -2.0, 2.0)), (s(1, 5), u(5, 0.5, 1.5)), (s(1, 5), u(5, -0.5, 0.5))],
            f: projected(u(15, -1.0, 1.0), |t, v| t.layer_norm(v[0], v[1], v[2])),
        },
        OpCase {
            name: "col_normalize",
            inputs: vec![(s(4, 3), u(12, 0.1, 1.0))],
            f: projected(u(12, -1.0, 1.0), |t, v| t.col_normalize(v[0], 1e-12)),
        },
        OpCase {
            name: "l2_normalize_rows",
            inputs: vec![(s(3, 4), u(12, -1.0, 1.0))],
            f: projected(u(12, -1.0, 1.0), |t, v| t.l2_normalize_rows(v[0])),
        },
        OpCase {
            name: "sum",
            inputs: vec![(s(3, 2), u(6, -1.0, 1.0))],
            f: Box::new(|t, v| Ok(t.sum(v[0]))),
        },
        OpCase {
            name: "slice_rows",
            inputs: vec![(s(4, 3), u(12, -1.0, 1.0))],
            f: projected(u(6, -1.0, 1.0), |t, v| t.slice_rows(v[0], 1, 2)),
        },
        OpCase {
            name: "slice_cols",
            inputs: vec![(s(3, 4), u(12, -1.0, 1.0))],
            f: projected(u(6, -1.0, 1.0), |t, v| t.slice_cols(v[0], 2, 2)),
        },
        OpCase {
            name: "concat_rows",
            inputs: vec![(s(1, 3), u(3, -1.0, 1.0)), (s(2, 3), u(6, -1.0, 1.0))],
            f: projected(u(9, -1.0, 1.0), |t, v| t.concat_rows(&[v[0], v[1]])),
        },
        OpCase {
            name: "concat_cols",
            inputs: vec![(s(2, 1), u(2, -1.0, 1.0)), (s(2, 3), u(6, -1.0, 1.0))],
            f: projected(u(8, -1.0, 1.0), |t, v| t.concat_cols(&[v[0], v[1]])),
        },
        OpCase {
            name: "max_pool_row_groups",
            inputs: vec![(s(12, 3), u(36, -1.0, 1.0))],
            f: projected(u(12, -1.0, 1.0), |t, v| t.max_pool_row_groups(v[0], 3)),
        },
        OpCase {
            name: "row_max",
            inputs: vec![(s(4, 3), u(12, -1.0, 1.0))],
            f: projected(u(4, -1.0, 1.0), |t, v| Ok(t.row_max(v[0]))),
        },
        OpCase {
            name: "replace_rows",
            inputs: vec![(s(5, 3), u(15, -1.0, 1.0)), (s(1, 3), u(3, -1.0, 1.0))],
            f: projected(u(15, -1.0, 1.0), |t, v| t.replace_rows(v[0], v[1], &[1, 3])),
        },
        OpCase {
            name: "cosine_sim",
            inputs: vec![(s(1, 16), u(16, -1.0, 1.0)), (s(1, 16), u(16, -1.0, 1.0))],
            f: Box::new(|t, v| cosine_sim(t, v[0], v[1])),
        },
        OpCase {
            name: "cosine_matrix",
            inputs: vec![(s(3, 4), u(12, -1.0, 1.0)), (s(3, 4), u(12, -1.0, 1.0))],
            f: projected(u(9, -1.0, 1.0), |t, v| cosine_matrix(t, v[0], v[1])),
        },
        {
            // The intra-modal targets sit behind a stop-gradient, so only the
            // cross-modal inputs are varied; the targets enter as constants.
            let (ia_v, ia_a) = (u(6, 0.0, 1.0), u(4, 0.0, 1.0));
            OpCase {
                name: "attention_matching_loss",
                inputs: vec![(s(6, 1), u(6, 0.0, 1.0)), (s(4, 1), u(4, 0.0, 1.0))],
                f: Box::new(move |t, v| {
                    let iv = t.variable(s(6, 1), ia_v.clone())?;
                    let ia = t.variable(s(4, 1), ia_a.clone())?;
                    attention_matching_loss(t, v[0], iv, v[1], ia)
                }),
            }
        },
        OpCase {
            name: "divergence_loss",
            inputs: vec![
                (s(1, 6), u(6, -1.0, 1.0)),
                (s(1, 6), u(6, -1.0, 1.0)),
                (s(1, 6), u(6, -1.0, 1.0)),
                (s(1, 6), u(6, -1.0, 1.0)),
            ],
            f: Box::new(|t, v| divergence_loss(t, v[0], v[1], v[2], v[3])),
        },
    ];
    let mask: Vec<bool> = (0..12).map(|k| k % 5 != 1).collect();
    cases.push(OpCase {
        name: "masked_logsumexp_rows",
        inputs: vec![(s(3, 4), u(12, -2.0, 2.0))],
        f: projected(u(3, -1.0, 1.0), move |t, v| t.masked_logsumexp_rows(v[0], &mask)),
    });
    let mut keep = vec![true; 16];
    keep[1] = false;
    keep[4] = false;
    cases.push(OpCase {
        name: "contrastive_loss",
        inputs: vec![(s(4, 5), u(20, -1.0, 1.0)), (s(4, 5), u(20, -1.0, 1.0))],
        f: Box::new(move |t, v| contrastive_loss(t, v[0], v[1], 0.3, &keep)),
    });
    cases
}

/// Every primitive and loss term, checked over all input entries with
/// two-point central differences at the default step.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases(&mut rng)
        .into_iter()
        .map(|case| {
            let err = check_inputs(&case.inputs, FD_EPS, &case.f)?;
            Ok(CheckResult {
                name: case.name.to_string(),
                max_rel_error: err,
                entries: case.inputs.iter().map(|(s, _)| s.numel()).sum(),
                skipped: 0,
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

/// Four-point central difference of `f` along one parameter entry, or
/// `None` when every step straddles a point where `f` is not differentiable.
/// `center` is `f` at the unperturbed parameters.
fn stencil<F>(store: &mut ParamStore, id: ParamId, e: usize, center: f64, f: &F) -> Result<Option<f64>>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let orig = store.get(id).data[e];
    let mut at = |x: f64| -> Result<f64> {
        store.get_mut(id).data[e] = x;
        f(store)
    };
    let mut found = None;
    for h in STENCIL_STEPS {
        let [m2, m1, p1, p2] = [at(orig - 2.0 * h)?, at(orig - h)?, at(orig + h)?, at(orig + 2.0 * h)?];
        let g = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
        // Second differences at −h, 0, +h agree up to O(h³) when f is smooth.
        let d2 = [m2 - 2.0 * m1 + center, m1 - 2.0 * center + p1, center - 2.0 * p1 + p2];
        let spread = d2.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - d2.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let scale = [m2, m1, center, p1, p2].iter().fold(1.0f64, |a, &b| a.max(b.abs()));
        let rounding = 1e-14 * scale;
        log::trace!("h {h:e} g {g:e} spread/h {:e} rounding/h {:e} scale {scale:e}", spread / h, rounding / h);
        if spread / h <= (KINK_FRACTION * g.abs().max(GRAD_FLOOR)).max(rounding / h) {
            found = Some(g);
            break;
        }
    }
    store.get_mut(id).data[e] = orig;
    Ok(found)
}

/// Outcome of a parameter gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCheck {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Checks parameter gradients of a scalar graph. `per_tensor` entries are
/// drawn from every trainable tensor (all of them when the tensor is smaller).
pub fn check_params<F>(store: &ParamStore, per_tensor: usize, rng: &mut ChaCha8Rng, f: F) -> Result<ParamCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let value = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let o = f(&mut t, s)?;
        Ok(t.scalar(o))
    };
    check_params_against(store, per_tensor, rng, &f, value)
}

/// Like [`check_params`], with the analytic graph and the function sampled
/// by finite differences given separately. They must agree in value at
/// `store`; the split lets the sampled function hold stop-gradient
/// quantities fixed.
pub fn check_params_against<F, V>(
    store: &ParamStore,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
    graph: F,
    value: V,
) -> Result<ParamCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    V: Fn(&ParamStore) -> Result<f64>,
{
    let mut tape = Tape::new();
    let out = graph(&mut tape, store)?;
    tape.backward(out)?;
    let grads = tape.param_grads(store.len());
    let center = value(store)?;
    let mut work = store.clone();
    let mut result = ParamCheck {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get(id);
        if !p.trainable {
            continue;
        }
        let n = p.data.len();
        let entries: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let analytic = grads[id.index()].clone().unwrap_or_else(|| vec![0.0; n]);
        for e in entries {
            let Some(numeric) = stencil(&mut work, id, e, center, &value)? else {
                log::debug!("{}[{e}]: not differentiable at any stencil step", p.name);
                result.skipped += 1;
                continue;
            };
            let err = floored_relative_error(analytic[e], numeric);
            if err > result.worst {
                log::debug!("{}[{e}]: analytic {} numeric {numeric} rel {err:e}", p.name, analytic[e]);
            }
            result.worst = result.worst.max(err);
            result.checked += 1;
        }
    }
    Ok(result)
}

fn component_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0);
    let mut out = Vec::new();
    let mut push = |name: &str, c: ParamCheck| {
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_error: c.worst,
            entries: c.checked,
            skipped: c.skipped,
            tolerance: OP_TOLERANCE,
        })
    };

    {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 5, 3, &mut rng)?;
        let x = uniform(&mut rng, 10, -1.0, 1.0);
        let w = uniform(&mut rng, 6, -1.0, 1.0);
        push(
            "linear",
            check_params(&store, 64, &mut rng, |t, s| {
                let xv = t.constant(Shape::new(2, 5), x.clone())?;
                let y = lin.bind(t, s).forward(t, xv)?;
                projection(t, y, &w)
            })?,
        );
    }
    {
        let mut store = ParamStore::new();
        let norm = Norm::new(&mut store, "ln", 6)?;
        let x = uniform(&mut rng, 18, -2.0, 2.0);
        let w = uniform(&mut rng, 18, -1.0, 1.0);
        push(
            "layer_norm_params",
            check_params(&store, 64, &mut rng, |t, s| {
                let xv = t.constant(Shape::new(3, 6), x.clone())?;
                let y = norm.bind(t, s).forward(t, xv)?;
                projection(t, y, &w)
            })?,
        );
    }
    {
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 8, &mut rng)?;
        let h = uniform(&mut rng, 16, -1.0, 1.0);
        let x = uniform(&mut rng, 16, -1.0, 1.0);
        let w = uniform(&mut rng, 16, -1.0, 1.0);
        push(
            "gru_cell",
            check_params(&store, 256, &mut rng, |t, s| {
                let hv = t.constant(Shape::new(2, 8), h.clone())?;
                let xv = t.constant(Shape::new(2, 8), x.clone())?;
                let gv = gru.bind(t, s);
                let y = gru_cell(t, &gv, hv, xv)?;
                projection(t, y, &w)
            })?,
        );
        let wrt_state = check_inputs(
            &[(Shape::new(2, 8), h.clone()), (Shape::new(2, 8), x.clone())],
            FD_EPS,
            |t, v| {
                let gv = gru.bind(t, &store);
                let y = gru_cell(t, &gv, v[0], v[1])?;
                projection(t, y, &w)
            },
        )?;
        push(
            "gru_cell_inputs",
            ParamCheck {
                worst: wrt_state,
                checked: 32,
                skipped: 0,
            },
        );
    }

    let dims = EncoderDims {
        hidden: 6,
        channels: 6,
        ..EncoderDims::default()
    };
    {
        let mut store = ParamStore::new();
        let img = ImageEncoder::new(&mut store, &dims, &mut rng)?;
        let aud = AudioEncoder::new(&mut store, &dims, &mut rng)?;
        let image = uniform(&mut rng, 28 * 28, 0.0, 1.0);
        let audio = uniform(&mut rng, 64 * 64, 0.0, 1.0);
        push(
            "image_encoder",
            check_params(&store, 12, &mut rng, |t, s| {
                let g = encode_image(t, s, &img, &dims, &image)?;
                Ok(t.sum(g.data))
            })?,
        );
        push(
            "audio_encoder",
            check_params(&store, 12, &mut rng, |t, s| {
                let g = encode_audio(t, s, &aud, &dims, &audio)?;
                Ok(t.sum(g.data))
            })?,
        );
    }
    {
        let cfg = SlotConfig {
            d: 6,
            iters: 3,
            ..SlotConfig::default()
        };
        let mut store = ParamStore::new();
        let side = SideParams::new(&mut store, Modality::Image, 5, cfg.d, &mut rng)?;
        let s0 = store.normal_init("slots0", Shape::new(2, cfg.d), 1.0, &mut rng)?;
        let feats = uniform(&mut rng, 9 * 5, -1.0, 1.0);
        let w = uniform(&mut rng, 2 * cfg.d, -1.0, 1.0);
        push(
            "slot_attention",
            check_params(&store, 8, &mut rng, |t, s| {
                let x = t.constant(Shape::new(9, 5), feats.clone())?;
                let grid = FeatureGrid::new(t, x, Modality::Image, 3, 3)?;
                let slots0 = t.param(s, s0);
                let sv = side.bind(t, s);
                let out = run_side(t, &sv, &grid, slots0, &cfg)?;
                projection(t, out.bundle.slots, &w)
            })?,
        );
    }
    {
        let mut store = ParamStore::new();
        let dec = BroadcastDecoder::new(&mut store, Modality::Audio, 4, 5, 7, 3, &mut rng)?;
        let slots = uniform(&mut rng, 10, -1.0, 1.0);
        let target = uniform(&mut rng, 12, -1.0, 1.0);
        push(
            "broadcast_decoder",
            check_params(&store, 16, &mut rng, |t, s| {
                let sv = t.constant(Shape::new(2, 5), slots.clone())?;
                let y = dec.bind(t, s).decode(t, sv)?;
                let tv = t.constant(Shape::new(4, 3), target.clone())?;
                crate::objectives::squared_error(t, tv, y)
            })?,
        );
    }
    Ok(out)
}

/// Small configuration used for the full-loss check.
pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        c: 6,
        d: 6,
        hidden: 6,
        decoder_hidden: 8,
        batch: 4,
        k: 1,
        seed,
        ..TrainConfig::default()
    }
}

/// Random raw inputs shaped like the synthetic benchmark.
pub fn random_pairs(seed: u64, b: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xda7a);
    let images = (0..b).map(|_| uniform(&mut rng, 28 * 28, 0.0, 1.0)).collect();
    let audios = (0..b).map(|_| uniform(&mut rng, 64 * 64, 0.0, 1.0)).collect();
    (images, audios)
}

/// The full weighted training loss of a random batch at random
/// initialization, mask tokens included.
pub fn full_loss_check(seed: u64, per_tensor: usize) -> Result<CheckResult> {
    let cfg = small_config(seed);
    let model = Model::new(&cfg)?;
    let (images, audios) = random_pairs(seed, cfg.batch);
    let pairs: Vec<Pair<'_>> = images
        .iter()
        .zip(&audios)
        .map(|(i, a)| Pair { image: i, audio: a })
        .collect();
    let maskings: Vec<Masking> = (0..cfg.batch).map(|i| Masking::for_step(seed, 1, i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0);
    let loss = |t: &mut Tape, s: &ParamStore, frozen: Option<&[FrozenTargets]>| {
        let probe = Model {
            store: s.clone(),
            ..model.clone()
        };
        let mut m = maskings.clone();
        probe.batch_loss(t, &pairs, Some(&mut m), frozen)
    };
    let targets = loss(&mut Tape::new(), &model.store, None)?.targets;
    let c = check_params_against(
        &model.store,
        per_tensor,
        &mut rng,
        |t, s| Ok(loss(t, s, None)?.total),
        |s| {
            let mut t = Tape::new();
            let out = loss(&mut t, s, Some(&targets))?.total;
            Ok(t.scalar(out))
        },
    )?;
    Ok(CheckResult {
        name: format!("full_loss[seed={seed}]"),
        max_rel_error: c.worst,
        entries: c.checked,
        skipped: c.skipped,
        tolerance: LOSS_TOLERANCE,
    })
}

/// Entries sampled per parameter tensor in the full-loss check.
pub const FULL_LOSS_ENTRIES: usize = 6;

/// The whole suite: operations, components, and the full loss at three seeds.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = op_checks(seed)?;
    out.extend(component_checks(seed)?);
    for s in 0..3 {
        out.push(full_loss_check(seed.wrapping_add(s), FULL_LOSS_ENTRIES)?);
    }
    Ok(out)
}

/// Fixed-width table of suite results.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!(
        "{:<28} {:>8} {:>8} {:>12} {:>10}  status\n",
        "check", "entries", "kinks", "max rel err", "bound"
    );
    for r in results {
        s.push_str(&format!(
            "{:<28} {:>8} {:>8} {:>12.3e} {:>10.0e}  {}\n",
            r.name,
            r.entries,
            r.skipped,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
