//! Module-level examples, invariants and brute-force oracles for the
//! encoders, slot attention, objectives, neighbor filtering, localization,
//! metrics and the synthetic benchmark.

mod common;

use std::collections::BTreeSet;

use common::{brute_knn, brute_predicted, random};

use jsaloc::diffcore::{ParamStore, Shape, Tape};
use jsaloc::encoders::{
    apply_mask_tokens, encode_audio, encode_image, masked_count, sample_mask_rows, AudioEncoder, EncoderDims,
    FeatureGrid, ImageEncoder, MaskToken, Modality,
};
use jsaloc::evaluation::{ciou, retrieval_recall, success_auc, EvalReport};
use jsaloc::fnmitigation::{knn_cosine, reciprocal_filter, Embeddings};
use jsaloc::jsa::{attention_maps, run_jsa, JsaParams, SlotConfig};
use jsaloc::localization::{bilinear_upsample, cross_modal_attention, refine_iqr, upsample_and_threshold, ThetaPolicy};
use jsaloc::objectives::{contrastive_loss, divergence_loss, total_loss, LossTerms, LossWeights};
use jsaloc::synthbench::{disc_footprint, generate, SynthConfig, IMAGE_SIZE};
use jsaloc::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn encoders(seed: u64) -> (ParamStore, ImageEncoder, AudioEncoder, EncoderDims) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dims = EncoderDims::default();
    let img = ImageEncoder::new(&mut store, &dims, &mut rng).unwrap();
    let aud = AudioEncoder::new(&mut store, &dims, &mut rng).unwrap();
    (store, img, aud, dims)
}

// ---------------------------------------------------------------- encoders

#[test]
fn encoder_shapes_follow_the_patch_grid() {
    let (store, img, aud, dims) = encoders(0);
    let mut t = Tape::new();
    let g = encode_image(&mut t, &store, &img, &dims, &vec![0.2; 28 * 28]).unwrap();
    assert_eq!((g.height, g.width, g.rows()), (7, 7, 49));
    let a = encode_audio(&mut t, &store, &aud, &dims, &vec![0.2; 64 * 64]).unwrap();
    assert_eq!((a.height, a.width, a.rows()), (16, 1, 16));
    assert_eq!(g.channels, a.channels);
}

#[test]
fn every_encoder_parameter_receives_gradient() {
    let (store, img, aud, dims) = encoders(1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Tape::new();
    let image: Vec<f64> = (0..28 * 28).map(|_| rng.random::<f64>()).collect();
    let audio: Vec<f64> = (0..64 * 64).map(|_| rng.random::<f64>()).collect();
    let g = encode_image(&mut t, &store, &img, &dims, &image).unwrap();
    let a = encode_audio(&mut t, &store, &aud, &dims, &audio).unwrap();
    let sg = t.sum(g.data);
    let sa = t.sum(a.data);
    let root = t.add(sg, sa).unwrap();
    t.backward(root).unwrap();
    for (id, p) in store.iter() {
        let g = t.param_grads(store.len())[id.index()].clone();
        let g = g.unwrap_or_else(|| panic!("{} has no gradient", p.name));
        assert!(g.iter().any(|v| *v != 0.0), "{} gradient is all zero", p.name);
    }
}

#[test]
fn zero_ratio_mask_is_bit_identical() {
    let (mut store, img, _, dims) = encoders(2);
    let token = MaskToken::new(&mut store, Modality::Image, dims.channels, 0.0).unwrap();
    let mut t = Tape::new();
    let g = encode_image(&mut t, &store, &img, &dims, &vec![0.7; 28 * 28]).unwrap();
    let before = t.value(g.data).to_vec();
    let (masked, rows) = apply_mask_tokens(&mut t, &store, &g, &token, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(rows.is_empty());
    let after = t.value(masked.data);
    assert!(before.iter().zip(after).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn ratio_one_is_rejected() {
    let mut store = ParamStore::new();
    assert!(matches!(MaskToken::new(&mut store, Modality::Audio, 8, 1.0), Err(Error::Config(_))));
}

/// Draws the same index set as the library sampler from its own shuffle.
fn reference_sampler(rows: usize, count: usize, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    let mut pool: Vec<usize> = (0..rows).collect();
    let mut chosen = BTreeSet::new();
    for i in 0..count {
        let j = rng.random_range(i..rows);
        pool.swap(i, j);
        chosen.insert(pool[i]);
    }
    chosen
}

proptest! {
    #[test]
    fn mask_sampler_matches_reference(seed in any::<u64>(), rows in 1usize..80, ratio in 0.0f64..0.99) {
        let count = masked_count(ratio, rows);
        prop_assert_eq!(count, (ratio * rows as f64).floor() as usize);
        let got = sample_mask_rows(rows, count, &mut ChaCha8Rng::seed_from_u64(seed));
        let want = reference_sampler(rows, count, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(got.len(), count);
        prop_assert_eq!(got.into_iter().collect::<BTreeSet<_>>(), want);
    }

    #[test]
    fn masking_replaces_floor_ratio_rows_with_the_token(seed in any::<u64>(), ratio in 0.0f64..0.5) {
        let mut store = ParamStore::new();
        let token = MaskToken::new(&mut store, Modality::Image, 3, ratio).unwrap();
        store.get_mut(token.token).data = vec![7.0, 8.0, 9.0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let x = t.constant(Shape::new(49, 3), random(&mut rng, 147)).unwrap();
        let grid = FeatureGrid::new(&t, x, Modality::Image, 7, 7).unwrap();
        let (out, rows) = apply_mask_tokens(&mut t, &store, &grid, &token, &mut rng).unwrap();
        prop_assert_eq!(rows.len(), masked_count(ratio, 49));
        let (xv, ov) = (t.value(x), t.value(out.data));
        for r in 0..49 {
            let row = &ov[r * 3..r * 3 + 3];
            if rows.contains(&r) {
                prop_assert_eq!(row, &[7.0, 8.0, 9.0][..]);
            } else {
                prop_assert_eq!(row, &xv[r * 3..r * 3 + 3]);
            }
        }
    }

    /// Lowering any entry that is not its column's group maximum leaves the
    /// pooled output unchanged.
    #[test]
    fn max_pool_ignores_values_below_the_maximum(seed in any::<u64>(), groups in 2usize..6) {
        let (steps, c) = (4usize, 3usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, groups * steps * c);
        let mut y = x.clone();
        for s in 0..steps {
            for ch in 0..c {
                let at = |g: usize| (g * steps + s) * c + ch;
                let best = (0..groups).max_by(|&a, &b| x[at(a)].total_cmp(&x[at(b)])).unwrap();
                for g in (0..groups).filter(|&g| g != best) {
                    y[at(g)] -= rng.random_range(0.0..5.0);
                }
            }
        }
        let mut t = Tape::new();
        let xv = t.constant(Shape::new(groups * steps, c), x).unwrap();
        let yv = t.constant(Shape::new(groups * steps, c), y).unwrap();
        let px = t.max_pool_row_groups(xv, groups).unwrap();
        let py = t.max_pool_row_groups(yv, groups).unwrap();
        prop_assert_eq!(t.value(px), t.value(py));
    }
}

// -------------------------------------------------------------------- jsa

struct JsaInstance {
    store: ParamStore,
    params: JsaParams,
    cfg: SlotConfig,
    image: Vec<f64>,
    audio: Vec<f64>,
}

const C: usize = 6;

fn jsa_instance(seed: u64, iters: usize) -> JsaInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SlotConfig { d: 4, iters, ..SlotConfig::default() };
    let mut store = ParamStore::new();
    let params = JsaParams::new(&mut store, &cfg, C, &mut rng).unwrap();
    JsaInstance {
        store,
        params,
        cfg,
        image: random(&mut rng, 9 * C),
        audio: random(&mut rng, 5 * C),
    }
}

fn grids(t: &mut Tape, inst: &JsaInstance, image: &[f64]) -> (FeatureGrid, FeatureGrid) {
    let iv = t.constant(Shape::new(9, C), image.to_vec()).unwrap();
    let av = t.constant(Shape::new(5, C), inst.audio.clone()).unwrap();
    (
        FeatureGrid::new(t, iv, Modality::Image, 3, 3).unwrap(),
        FeatureGrid::new(t, av, Modality::Audio, 5, 1).unwrap(),
    )
}

#[test]
fn identical_slot_queries_split_keys_evenly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut t = Tape::new();
    let k = t.constant(Shape::new(5, 3), random(&mut rng, 15)).unwrap();
    let q = random(&mut rng, 3);
    let q = t.constant(Shape::new(2, 3), [q.clone(), q].concat()).unwrap();
    let maps = attention_maps(&mut t, k, q).unwrap();
    assert!(t.value(maps.a).iter().all(|v| (v - 0.5).abs() < 1e-15));
}

#[test]
fn key_normalization_of_a_two_key_column() {
    let mut t = Tape::new();
    let a = t.constant(Shape::new(2, 1), vec![0.5, 0.75]).unwrap();
    let n = t.col_normalize(a, jsaloc::jsa::COLUMN_EPS).unwrap();
    let v = t.value(n);
    assert!((v[0] - 0.4).abs() < 1e-12 && (v[1] - 0.6).abs() < 1e-12);
}

#[test]
fn jsa_stays_finite_for_ten_times_the_iterations() {
    for seed in 0..5 {
        let inst = jsa_instance(seed, 50);
        let mut t = Tape::new();
        let (gi, ga) = grids(&mut t, &inst, &inst.image);
        let out = run_jsa(&mut t, &inst.store, &inst.params, &gi, &ga, &inst.cfg).unwrap();
        assert_eq!(out.image.history.len(), 50);
        for v in [out.image.bundle.slots, out.audio.bundle.slots] {
            assert!(t.value(v).iter().all(|x| x.is_finite()));
        }
    }
}

#[test]
fn swapping_initial_slots_swaps_output_slots() {
    let inst = jsa_instance(11, 5);
    let mut swapped = inst.store.clone();
    let s0 = &mut swapped.get_mut(inst.params.slots0).data;
    let d = inst.cfg.d;
    let (first, second) = s0.split_at_mut(d);
    first.swap_with_slice(second);

    let run = |store: &ParamStore| {
        let mut t = Tape::new();
        let (gi, ga) = grids(&mut t, &inst, &inst.image);
        let out = run_jsa(&mut t, store, &inst.params, &gi, &ga, &inst.cfg).unwrap();
        (t.value(out.image.bundle.slots).to_vec(), t.value(out.audio.bundle.slots).to_vec())
    };
    let (iv, av) = run(&inst.store);
    let (is, as_) = run(&swapped);
    for (orig, sw) in [(iv, is), (av, as_)] {
        assert_eq!(orig[..d], sw[d..]);
        assert_eq!(orig[d..], sw[..d]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_is_row_and_column_stochastic_every_iteration(seed in any::<u64>()) {
        let inst = jsa_instance(seed, 5);
        let mut t = Tape::new();
        let (gi, ga) = grids(&mut t, &inst, &inst.image);
        let out = run_jsa(&mut t, &inst.store, &inst.params, &gi, &ga, &inst.cfg).unwrap();
        for side in [&out.image, &out.audio] {
            prop_assert_eq!(side.history.len(), 5);
            for maps in &side.history {
                let s = t.shape(maps.a);
                let (a, ah) = (t.value(maps.a), t.value(maps.a_hat));
                for r in 0..s.rows {
                    prop_assert!((a[r * s.cols..(r + 1) * s.cols].iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
                for c in 0..s.cols {
                    prop_assert!(((0..s.rows).map(|r| ah[r * s.cols + c]).sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn jsa_is_equivariant_to_key_order(seed in any::<u64>()) {
        let inst = jsa_instance(seed, 5);
        let mut perm: Vec<usize> = (0..9).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for i in (1..9).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| inst.image[r * C..(r + 1) * C].to_vec()).collect();

        let run = |image: &[f64]| {
            let mut t = Tape::new();
            let (gi, ga) = grids(&mut t, &inst, image);
            let out = run_jsa(&mut t, &inst.store, &inst.params, &gi, &ga, &inst.cfg).unwrap();
            (t.value(out.image.bundle.slots).to_vec(), t.value(out.image.intra.a_hat).to_vec())
        };
        let (slots, a_hat) = run(&inst.image);
        let (slots_p, a_hat_p) = run(&permuted);
        for (x, y) in slots.iter().zip(&slots_p) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        let n = inst.cfg.n_slots();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..n {
                prop_assert!((a_hat_p[new_row * n + c] - a_hat[old_row * n + c]).abs() <= 1e-9);
            }
        }
    }
}

// ------------------------------------------------------------- objectives

fn keep_all(b: usize) -> Vec<bool> {
    vec![true; b * b]
}

#[test]
fn total_loss_with_paper_weights() {
    let mut t = Tape::new();
    let one = || 1.0;
    let terms = LossTerms {
        cotr: t.constant(Shape::scalar(), vec![one()]).unwrap(),
        matching: t.constant(Shape::scalar(), vec![one()]).unwrap(),
        div: t.constant(Shape::scalar(), vec![one()]).unwrap(),
        recon: t.constant(Shape::scalar(), vec![one()]).unwrap(),
    };
    let (total, report) = total_loss(&mut t, &terms, &LossWeights::default()).unwrap();
    assert!((t.scalar(total) - 101.2).abs() < 1e-12);
    assert_eq!(report.total, t.scalar(total));
}

#[test]
fn contrastive_loss_of_two_orthogonal_pairs() {
    // cos = I, so each denominator is log(e^{1/τ} + e^0) and the loss is
    // 2·log(1 + e^{−1/τ}) per sample on average.
    let tau = 0.5;
    let mut t = Tape::new();
    let pi = t.constant(Shape::new(2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let pa = t.constant(Shape::new(2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let l = contrastive_loss(&mut t, pi, pa, tau, &keep_all(2)).unwrap();
    let want = 2.0 * (1.0 + (-1.0f64 / tau).exp()).ln();
    assert!((t.scalar(l) - want).abs() < 1e-12);
}

proptest! {
    #[test]
    fn total_loss_matches_recomputation(vals in prop::array::uniform4(0.0f64..10.0), w in prop::array::uniform3(0.0f64..200.0)) {
        let weights = LossWeights { match_weight: w[0], div_weight: w[1], recon_weight: w[2], tau: 0.03 };
        let mut t = Tape::new();
        let mut c = |v: f64| t.constant(Shape::scalar(), vec![v]).unwrap();
        let terms = LossTerms { cotr: c(vals[0]), matching: c(vals[1]), div: c(vals[2]), recon: c(vals[3]) };
        let (total, _) = total_loss(&mut t, &terms, &weights).unwrap();
        let want = vals[0] + w[0] * vals[1] + w[1] * vals[2] + w[2] * vals[3];
        prop_assert!((t.scalar(total) - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn contrastive_loss_ignores_slot_scale(seed in any::<u64>(), b in 2usize..8, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pi, pa) = (random(&mut rng, b * 4), random(&mut rng, b * 4));
        let row = rng.random_range(0..b);
        let mut scaled = pi.clone();
        scaled[row * 4..row * 4 + 4].iter_mut().for_each(|v| *v *= scale);
        let loss = |image: Vec<f64>| {
            let mut t = Tape::new();
            let i = t.constant(Shape::new(b, 4), image).unwrap();
            let a = t.constant(Shape::new(b, 4), pa.clone()).unwrap();
            let l = contrastive_loss(&mut t, i, a, 0.03, &keep_all(b)).unwrap();
            t.scalar(l)
        };
        let (l0, l1) = (loss(pi), loss(scaled));
        prop_assert!(l0 >= 0.0);
        prop_assert!((l0 - l1).abs() <= 1e-9 * l0.max(1.0));
    }

    #[test]
    fn divergence_is_between_zero_and_two(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let mut v = || t.constant(Shape::new(1, 5), random(&mut rng, 5)).unwrap();
        let (p, r, pa, ra) = (v(), v(), v(), v());
        let d = divergence_loss(&mut t, p, r, pa, ra).unwrap();
        prop_assert!((0.0..=2.0).contains(&t.scalar(d)));
    }
}

// ----------------------------------------------------------- fnmitigation

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn neighbor_filter_matches_brute_force(seed in any::<u64>(), b in 2usize..=32, k in 1usize..=20, dim in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vi = Embeddings::new(b, dim, random(&mut rng, b * dim)).unwrap();
        let va = Embeddings::new(b, dim, random(&mut rng, b * dim)).unwrap();
        let k_eff = k.min(b - 1);
        prop_assert_eq!(knn_cosine(&vi, k_eff).unwrap(), brute_knn(&vi, k_eff));

        let predicted = brute_predicted(&vi, &va, k_eff);
        let sets = reciprocal_filter(&vi, &va, k).unwrap();
        for (i, want) in predicted.iter().enumerate() {
            prop_assert_eq!(&sets.predicted[i], want);
            prop_assert!(sets.keep[i * b + i]);
            for j in 0..b {
                let excluded = want.contains(&j);
                prop_assert_eq!(sets.keep[i * b + j], !excluded);
            }
        }
    }

    #[test]
    fn empty_neighbor_sets_reproduce_unfiltered_loss(seed in any::<u64>(), b in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // orthogonal image slots share no mutual neighbors with a reversed
        // audio ordering, so the filter keeps every pair
        let (pi, pa) = (random(&mut rng, b * 3), random(&mut rng, b * 3));
        let vi = Embeddings::new(b, 3, pi.clone()).unwrap();
        let va = Embeddings::new(b, 3, pa.clone()).unwrap();
        let sets = reciprocal_filter(&vi, &va, 1).unwrap();
        let loss = |keep: &[bool]| {
            let mut t = Tape::new();
            let i = t.constant(Shape::new(b, 3), pi.clone()).unwrap();
            let a = t.constant(Shape::new(b, 3), pa.clone()).unwrap();
            let l = contrastive_loss(&mut t, i, a, 0.03, keep).unwrap();
            t.scalar(l)
        };
        if sets.predicted.iter().all(|s| s.is_empty()) {
            prop_assert_eq!(loss(&sets.keep).to_bits(), loss(&keep_all(b)).to_bits());
        }
        let none = reciprocal_filter(&vi, &va, 0).unwrap();
        prop_assert!(none.predicted.iter().all(|s| s.is_empty()));
        prop_assert_eq!(loss(&none.keep).to_bits(), loss(&keep_all(b)).to_bits());
    }
}

// ----------------------------------------------------------- localization

#[test]
fn bilinear_two_by_two_to_four_by_four() {
    let up = bilinear_upsample(&[1.0, 0.0, 0.0, 0.0], 2, 2, 4, 4).unwrap();
    // half-pixel centres sample the source at −0.25, 0.25, 0.75, 1.25, so
    // each axis weights the lit pixel by 1, 0.75, 0.25, 0
    let w = [1.0, 0.75, 0.25, 0.0];
    for y in 0..4 {
        for x in 0..4 {
            assert!((up[y * 4 + x] - w[y] * w[x]).abs() < 1e-9, "({y},{x})");
        }
    }
    assert_eq!(up[0], 1.0);
    assert!((up[5] - 0.5625).abs() < 1e-9);
}

#[test]
fn thresholds_at_the_extremes() {
    let all = upsample_and_threshold(&[0.3; 4], 2, 2, 4, 4, ThetaPolicy::Fixed(0.2)).unwrap();
    assert!(all.mask.iter().all(|m| *m));
    let heat = [0.1, 0.9, 0.4, 0.2];
    let max = bilinear_upsample(&heat, 2, 2, 4, 4).unwrap().into_iter().fold(f64::MIN, f64::max);
    let none = upsample_and_threshold(&heat, 2, 2, 4, 4, ThetaPolicy::Fixed(max)).unwrap();
    assert_eq!(none.mask_area(), 0);
}

#[test]
fn iqr_endpoints_are_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ca: Vec<f64> = (0..49).map(|_| rng.random::<f64>()).collect();
    let ia: Vec<f64> = (0..49).map(|_| rng.random::<f64>()).collect();
    assert_eq!(refine_iqr(&ca, &ia, 1.0).unwrap(), ca);
    assert_eq!(refine_iqr(&ca, &ia, 0.0).unwrap(), ia);
}

#[test]
fn aligned_key_dominates_cross_modal_attention() {
    let mut t = Tape::new();
    // the target query points along the first key, the off-target query along the others
    let q = t.constant(Shape::new(2, 2), vec![10.0, 0.0, 0.0, 10.0]).unwrap();
    let k = t.constant(Shape::new(3, 2), vec![1.0, 0.0, 0.0, 1.0, 0.3, 1.0]).unwrap();
    let (_, ca) = cross_modal_attention(&mut t, q, k, 1).unwrap();
    let v = t.value(ca);
    assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(v[0] > 0.9, "{v:?}");
}

fn normalized(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

proptest! {
    #[test]
    fn cross_modal_attention_is_key_order_equivariant(seed in any::<u64>(), rows in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keys = random(&mut rng, rows * 3);
        let query = random(&mut rng, 2 * 3);
        let mut perm: Vec<usize> = (0..rows).collect();
        for i in (1..rows).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| keys[r * 3..r * 3 + 3].to_vec()).collect();
        let ca = |k: Vec<f64>| {
            let mut t = Tape::new();
            let q = t.constant(Shape::new(2, 3), query.clone()).unwrap();
            let k = t.constant(Shape::new(rows, 3), k).unwrap();
            let (_, ca) = cross_modal_attention(&mut t, q, k, 1).unwrap();
            t.value(ca).to_vec()
        };
        let (a, b) = (ca(keys.clone()), ca(permuted));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for (new, &old) in perm.iter().enumerate() {
            prop_assert!((b[new] - a[old]).abs() <= 1e-12);
        }
    }

    #[test]
    fn iqr_is_a_convex_blend(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ca, ia) = (normalized(&mut rng, 49), normalized(&mut rng, 49));
        let r = refine_iqr(&ca, &ia, alpha).unwrap();
        prop_assert!(r.iter().all(|v| *v >= 0.0));
        prop_assert!(r.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn raising_theta_never_grows_the_mask(seed in any::<u64>(), lo in 0.0f64..1.0, step in 0.0f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heat: Vec<f64> = (0..49).map(|_| rng.random::<f64>()).collect();
        let a = upsample_and_threshold(&heat, 7, 7, 28, 28, ThetaPolicy::Fixed(lo)).unwrap();
        let b = upsample_and_threshold(&heat, 7, 7, 28, 28, ThetaPolicy::Fixed(lo + step)).unwrap();
        prop_assert!(b.mask.iter().zip(&a.mask).all(|(hi, lo)| !*hi || *lo));
        for (m, v) in a.mask.iter().zip(&a.upsampled) {
            prop_assert_eq!(*m, *v > lo);
        }
    }
}

// ------------------------------------------------------------- evaluation

#[test]
fn auc_closed_forms() {
    assert!((success_auc(&[1.0; 5]).unwrap() - 1.0).abs() < 1e-9);
    // only t = 0 succeeds: one half-step of the first trapezoid
    assert!((success_auc(&[0.0; 5]).unwrap() - 0.025).abs() < 1e-9);
    // success is 1 up to t = 0.5 inclusive: ten full steps plus a half step
    assert!((success_auc(&[0.5; 3]).unwrap() - 0.525).abs() < 1e-9);
    // half the samples at 1, half at 0: the average of the two curves
    assert!((success_auc(&[1.0, 0.0]).unwrap() - 0.5125).abs() < 1e-9);
}

#[test]
fn recall_on_a_hand_built_four_sample_case() {
    // unit vectors at these angles; cosine falls with angular distance, so
    // every ranking below can be read off the angle gaps
    let ang = |a: f64| vec![a.cos(), a.sin()];
    let image = [0.0, 1.0, 2.0, 3.0].iter().flat_map(|&a| ang(a)).collect();
    let audio = [0.2, 2.3, 1.6, 2.9].iter().flat_map(|&a| ang(a)).collect();
    let pi = Embeddings::new(4, 2, image).unwrap();
    let pa = Embeddings::new(4, 2, audio).unwrap();
    let r = retrieval_recall(&pi, &pa, &[0, 1, 2, 3], &[1, 2, 3]).unwrap();
    // image queries rank audio as 0:[0,2,1,3] 1:[2,0,1,3] 2:[1,2,3,0] 3:[3,..]
    assert_eq!(r.image_to_audio[&1], 0.5);
    assert_eq!(r.image_to_audio[&2], 0.75);
    assert_eq!(r.image_to_audio[&3], 1.0);
    // audio queries rank images as 0:[0,..] 1:[2,3,1,0] 2:[2,..] 3:[3,..]
    assert_eq!(r.audio_to_image[&1], 0.75);
    assert_eq!(r.audio_to_image[&2], 0.75);
    assert_eq!(r.audio_to_image[&3], 1.0);
}

#[test]
fn random_slots_recall_tracks_the_class_prior() {
    let (m, classes, dim) = (2000, 10, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let pi = Embeddings::new(m, dim, random(&mut rng, m * dim)).unwrap();
    let pa = Embeddings::new(m, dim, random(&mut rng, m * dim)).unwrap();
    let labels: Vec<usize> = (0..m).map(|i| i % classes).collect();
    let r = retrieval_recall(&pi, &pa, &labels, &[1]).unwrap();
    for v in [r.audio_to_image[&1], r.image_to_audio[&1]] {
        assert!((v - 1.0 / classes as f64).abs() <= 0.05, "{v}");
    }
}

proptest! {
    #[test]
    fn auc_is_monotone_in_each_score(scores in prop::collection::vec(0.0f64..=1.0, 1..30), idx in any::<prop::sample::Index>(), bump in 0.0f64..1.0) {
        let i = idx.index(scores.len());
        let mut raised = scores.clone();
        raised[i] = (raised[i] + bump).min(1.0);
        prop_assert!(success_auc(&raised).unwrap() >= success_auc(&scores).unwrap());
    }

    #[test]
    fn recall_is_non_decreasing_in_k(seed in any::<u64>(), m in 3usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = Embeddings::new(m, 4, random(&mut rng, m * 4)).unwrap();
        let pa = Embeddings::new(m, 4, random(&mut rng, m * 4)).unwrap();
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..4)).collect();
        let ks: Vec<usize> = (1..m).collect();
        let r = retrieval_recall(&pi, &pa, &labels, &ks).unwrap();
        for dir in [&r.audio_to_image, &r.image_to_audio] {
            let v: Vec<f64> = dir.values().copied().collect();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn metrics_ignore_sample_order(seed in any::<u64>(), m in 3usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // continuous random slots have no similarity ties, so ranks are order-free
        let (vi, va) = (random(&mut rng, m * 4), random(&mut rng, m * 4));
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
        let ious: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let fs: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let rows = |v: &[f64]| perm.iter().flat_map(|&r| v[r * 4..r * 4 + 4].to_vec()).collect::<Vec<_>>();
        let pick = |v: &[f64]| perm.iter().map(|&r| v[r]).collect::<Vec<_>>();
        let report = |vi: Vec<f64>, va: Vec<f64>, labels: Vec<usize>, ious: Vec<f64>, fs: Vec<f64>| {
            let r = retrieval_recall(
                &Embeddings::new(m, 4, vi).unwrap(),
                &Embeddings::new(m, 4, va).unwrap(),
                &labels,
                &[1, 2],
            )
            .unwrap();
            EvalReport::from_scores(&ious, &fs, r).unwrap()
        };
        let a = report(vi.clone(), va.clone(), labels.clone(), ious.clone(), fs.clone());
        let b = report(rows(&vi), rows(&va), perm.iter().map(|&r| labels[r]).collect(), pick(&ious), pick(&fs));
        prop_assert_eq!(a.recall, b.recall);
        prop_assert_eq!(a.ciou_at_050, b.ciou_at_050);
        prop_assert_eq!(a.auc, b.auc);
        prop_assert!((a.miou - b.miou).abs() <= 1e-12);
    }
}

// -------------------------------------------------------------- synthbench

#[test]
fn benchmark_scan() {
    let cfg = SynthConfig { seed: 3, ..SynthConfig::default() };
    let ds = generate(&cfg).unwrap();
    let mut hist = vec![0usize; cfg.categories];
    let expected = cfg.n as f64 / cfg.categories as f64;
    for s in &ds.samples {
        hist[s.category] += 1;
        assert_eq!(s.meta.target.category, s.category);
        let area = s.gt_mask.iter().filter(|m| **m).count();
        assert!((cfg.min_area..=cfg.max_area).contains(&area), "sample {} area {area}", s.id);
        assert_eq!(s.gt_mask, disc_footprint(&s.meta.target));
        assert_eq!(s.gt_mask.len(), IMAGE_SIZE * IMAGE_SIZE);
        for d in &s.meta.distractors {
            assert_ne!(d.category, s.category);
            let overlap = disc_footprint(d).iter().zip(&s.gt_mask).filter(|(a, b)| **a && **b).count();
            assert!(overlap as f64 <= 0.1 * area as f64);
        }
    }
    for h in hist {
        assert!((h as f64 - expected).abs() <= 0.1 * expected);
    }
    assert_eq!(generate(&cfg).unwrap(), ds);
    let iou = ciou(&ds.samples[0].gt_mask, &ds.samples[0].gt_mask).unwrap();
    assert_eq!(iou, 1.0);
}
