use std::collections::HashMap;

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rsalign::align::{align_loss, cosine, iou_weights, region_nce_loss, AlignWeights, BoxPair};
use rsalign::dris::{
    cost_report, fuse_features, resolution_allocate, select_rois, DrisConfig, Resolution,
};
use rsalign::grid::{bilinear_upsample, crop, gaussian_blur, l2_normalize, pool, PoolMode};
use rsalign::metrics::{bleu, ngram_counts, recall_at_k, rouge_l, tokenize, Caption, RefSet};
use rsalign::selfcheck::{random_align_batch, random_weights};
use rsalign::toyvlm::{
    caption_loss, cross_modal_attention, lr_at, AttentionParams, Matrix, TokenSeq, ToyModelConfig,
    TrainConfig,
};
use rsalign::{EmbedVec, FeatureGrid, Roi};

fn grid_strategy(max: usize, channels: usize) -> impl Strategy<Value = FeatureGrid> {
    (1..=max, 1..=max, 1..=channels).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-10.0f64..10.0, h * w * c)
            .prop_map(move |data| FeatureGrid::new(h, w, c, data).unwrap())
    })
}

fn embed(dim: usize) -> impl Strategy<Value = EmbedVec> {
    prop::collection::vec(-2.0f64..2.0, dim)
        .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|v| EmbedVec::new(v).unwrap())
}

fn roi_in(h: usize, w: usize) -> impl Strategy<Value = Roi> {
    (0..h, 0..w).prop_flat_map(move |(r0, c0)| {
        (r0 + 1..=h, c0 + 1..=w).prop_map(move |(r1, c1)| Roi::new(r0, c0, r1, c1).unwrap())
    })
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]).prop_map(str::to_string)
}

fn naive_counts(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            let mut gram = Vec::new();
            for j in 0..n {
                gram.push(tokens[i + j].clone());
            }
            *out.entry(gram).or_insert(0) += 1;
        }
    }
    out
}

proptest! {
    #[test]
    fn upsample_by_one_is_identity(g in grid_strategy(6, 3)) {
        prop_assert_eq!(bilinear_upsample(&g, 1).unwrap(), g);
    }

    #[test]
    fn upsample_of_constant_is_constant(h in 1usize..5, w in 1usize..5, v in -5.0f64..5.0, f in 1usize..4) {
        let g = FeatureGrid::filled(h, w, 2, v).unwrap();
        let up = bilinear_upsample(&g, f).unwrap();
        prop_assert_eq!((up.height(), up.width()), (h * f, w * f));
        prop_assert!(up.data().iter().all(|&x| x == v));
    }

    #[test]
    fn same_size_pool_is_identity_and_average_in_range(g in grid_strategy(6, 2), oh in 1usize..6, ow in 1usize..6) {
        for mode in [PoolMode::Average, PoolMode::Max] {
            prop_assert_eq!(&pool(&g, g.height(), g.width(), mode).unwrap(), &g);
        }
        let (oh, ow) = (oh.min(g.height()), ow.min(g.width()));
        let p = pool(&g, oh, ow, PoolMode::Average).unwrap();
        prop_assert!(p.data().iter().all(|&x| x >= g.min() - 1e-12 && x <= g.max() + 1e-12));
    }

    #[test]
    fn blur_preserves_constants_and_range(g in grid_strategy(7, 2), sigma in 0.3f64..3.0, v in -3.0f64..3.0) {
        let b = gaussian_blur(&g, sigma).unwrap();
        prop_assert!(b.data().iter().all(|&x| x >= g.min() - 1e-12 && x <= g.max() + 1e-12));
        let c = FeatureGrid::filled(g.height(), g.width(), 1, v).unwrap();
        let bc = gaussian_blur(&c, sigma).unwrap();
        prop_assert!(bc.data().iter().all(|&x| (x - v).abs() <= 1e-12));
    }

    #[test]
    fn l2_normalize_is_idempotent(v in embed(8)) {
        let once = l2_normalize(&v).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn crop_full_of_upsample_is_upsample(g in grid_strategy(5, 2), f in 1usize..4) {
        let up = bilinear_upsample(&g, f).unwrap();
        prop_assert_eq!(crop(&up, &up.full_roi()).unwrap(), up);
    }

    #[test]
    fn raising_tau_never_adds_high_cells(g in grid_strategy(6, 1), t1 in -10.0f64..10.0, dt in 0.0f64..5.0) {
        let lo = resolution_allocate(&g, t1).unwrap();
        let hi = resolution_allocate(&g, t1 + dt).unwrap();
        for r in 0..g.height() {
            for c in 0..g.width() {
                if lo.get(r, c) == Resolution::Low {
                    prop_assert_eq!(hi.get(r, c), Resolution::Low);
                }
            }
        }
    }

    #[test]
    fn rois_inside_heatmap_and_rescale_invariant(
        g in grid_strategy(9, 1),
        k in 1usize..5,
        scale in 0.001f64..1000.0,
    ) {
        let cfg = DrisConfig {
            k,
            roi_size: (g.height().min(2), g.width().min(3)),
            ..DrisConfig::default()
        };
        let rois = select_rois(&g, &cfg).unwrap();
        prop_assert!(!rois.is_empty() && rois.len() <= k);
        prop_assert!(rois.iter().all(|r| r.fits_in(g.height(), g.width())));
        prop_assert_eq!(&select_rois(&g, &cfg).unwrap(), &rois);
        prop_assert_eq!(select_rois(&g.scaled(scale).unwrap(), &cfg).unwrap(), rois);
    }

    #[test]
    fn fusion_is_additive_cell_by_cell(
        (coarse, roi) in grid_strategy(4, 2).prop_flat_map(|g| {
            let (h, w) = (g.height(), g.width());
            (Just(g), roi_in(h, w))
        }),
        f in 1usize..4,
    ) {
        let (h, w, c) = (coarse.height(), coarse.width(), coarse.channels());
        let (fh, fw) = (roi.height() * f, roi.width() * f);
        let fine = FeatureGrid::from_fn(fh, fw, c, |r, col, ch| (r * 7 + col * 3 + ch) as f64 * 0.25).unwrap();
        let fused = fuse_features(&coarse, &fine, &roi, f).unwrap();
        let up = bilinear_upsample(&coarse, f).unwrap();
        let omega = roi.scaled(f);
        for r in 0..h * f {
            for col in 0..w * f {
                for ch in 0..c {
                    let want = if omega.contains(r, col) {
                        up.get(r, col, ch) + fine.get(r - omega.row0, col - omega.col0, ch)
                    } else {
                        up.get(r, col, ch)
                    };
                    prop_assert_eq!(fused.get(r, col, ch), want);
                }
            }
        }
    }

    #[test]
    fn empty_roi_cost_is_exactly_one_over_n_squared(a in 1usize..20, b in 1usize..20, n in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let cfg = DrisConfig { n, ..DrisConfig::default() };
        let rep = cost_report(a * n, b * n, &cfg, &[]);
        prop_assert!(rep.exact_division);
        prop_assert_eq!(rep.coarse_cell_ops * (n * n) as u64, rep.full_res_cell_ops);
        prop_assert_eq!(rep.fine_cell_ops, 0);
        prop_assert_eq!(rep.savings_ratio, 1.0 / (n * n) as f64);
    }

    #[test]
    fn cosine_is_scale_invariant(u in embed(6), v in embed(6), c in 0.01f64..100.0) {
        let cu = EmbedVec::new(u.values().iter().map(|x| x * c).collect()).unwrap();
        prop_assert!((cosine(&cu, &v).unwrap() - cosine(&u, &v).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn iou_weights_sum_to_one_and_permute(
        boxes in prop::collection::vec((roi_in(8, 8), roi_in(8, 8)), 1..6),
        rot in 0usize..6,
    ) {
        let pairs: Vec<BoxPair> = boxes
            .iter()
            .map(|&(predicted, ground_truth)| BoxPair { predicted, ground_truth })
            .collect();
        let w = iou_weights(&pairs).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shift = rot % pairs.len();
        let mut rotated = pairs.clone();
        rotated.rotate_left(shift);
        let mut expect = w.clone();
        expect.rotate_left(shift);
        let got = iou_weights(&rotated).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn nce_is_invariant_to_a_common_score_offset(
        visual in prop::collection::vec(embed(3), 1..5),
        phrases in prop::collection::vec(embed(3), 1..5),
        offset in -3.0f64..3.0,
        tau in 0.1f64..1.0,
        seed in any::<u64>(),
    ) {
        // Appending a coordinate of 1 to every region and `offset` to every
        // phrase adds `offset` to each score in a row.
        let positives: Vec<usize> = (0..visual.len()).map(|k| (seed as usize + k) % phrases.len()).collect();
        let base = region_nce_loss(&visual, &phrases, &positives, tau).unwrap().value;
        let ext = |v: &EmbedVec, x: f64| EmbedVec::new(v.values().iter().copied().chain([x]).collect()).unwrap();
        let v2: Vec<_> = visual.iter().map(|v| ext(v, 1.0)).collect();
        let p2: Vec<_> = phrases.iter().map(|p| ext(p, offset)).collect();
        let shifted = region_nce_loss(&v2, &p2, &positives, tau).unwrap().value;
        prop_assert!((base - shifted).abs() <= 1e-9, "{base} vs {shifted}");
    }

    #[test]
    fn align_loss_is_linear_in_tier_weights(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_align_batch(&mut rng, 16, 5);
        let w = random_weights(&mut rng);
        let doubled = AlignWeights { alpha: 2.0 * w.alpha, beta: 2.0 * w.beta, gamma: 2.0 * w.gamma, ..w };
        let a = align_loss(&batch, &w).unwrap();
        let b = align_loss(&batch, &doubled).unwrap();
        prop_assert!((b.l_align - 2.0 * a.l_align).abs() <= 1e-12);
        prop_assert!(a.l_reg >= a.l_reg_hard.min(a.l_reg_nce) - 1e-12);
        prop_assert!(a.l_reg <= a.l_reg_hard.max(a.l_reg_nce) + 1e-12);
    }

    #[test]
    fn caption_loss_nonnegative_and_zero_only_when_certain(
        logits in prop::collection::vec(-4.0f64..4.0, 12),
        targets in prop::collection::vec(0usize..4, 3),
    ) {
        let cfg = ToyModelConfig { vocab: 4, max_text_len: 3, ..ToyModelConfig::toy() };
        let seq = TokenSeq::new(targets.clone(), &cfg).unwrap();
        let mut probs = Matrix::new(3, 4, logits).unwrap();
        for r in 0..3 {
            let row: Vec<f64> = probs.row_slice(r).iter().map(|x| x.exp()).collect();
            let s: f64 = row.iter().sum();
            for (c, v) in row.iter().enumerate() {
                probs.set(r, c, v / s);
            }
        }
        let l = caption_loss(&probs, &seq).unwrap();
        prop_assert!(l.value > 0.0);
        let mut onehot = Matrix::zeros(3, 4);
        for (r, &t) in targets.iter().enumerate() {
            onehot.set(r, t, 1.0);
        }
        prop_assert_eq!(caption_loss(&onehot, &seq).unwrap().value, 0.0);
    }

    #[test]
    fn attention_ignores_image_row_order(
        t in 1usize..6,
        n in 1usize..6,
        seed in any::<u64>(),
        rot in 0usize..6,
    ) {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| {
            Matrix::new(r, c, (0..r * c).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect()).unwrap()
        };
        let text = m(t, d);
        let image = m(n, d);
        let params = AttentionParams { wq: m(d, d), wk: m(d, d), wv: m(d, d), wo: m(d, d), heads: 2 };
        let out = cross_modal_attention(&text, &image, &params).unwrap();
        prop_assert_eq!(out.rows(), t);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|r| image.row_slice(r).to_vec()).collect();
        rows.rotate_left(rot % n);
        rows.swap(0, n - 1);
        let permuted = Matrix::from_rows(&rows).unwrap();
        let out2 = cross_modal_attention(&text, &permuted, &params).unwrap();
        for (a, b) in out.data().iter().zip(out2.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn schedule_is_piecewise_linear_with_peak_at_warmup(
        warmup in 0usize..50,
        extra in 1usize..100,
        peak in 1e-5f64..1e-2,
    ) {
        let total = warmup + extra;
        let cfg = TrainConfig { peak_lr: peak, warmup_steps: warmup, total_steps: total, steps: total, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, &cfg).unwrap()).collect();
        let max = lrs.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(max, peak);
        prop_assert_eq!(lrs[warmup], peak);
        // Second differences vanish away from the kink.
        for s in 1..total {
            if s != warmup {
                prop_assert!((lrs[s + 1] - 2.0 * lrs[s] + lrs[s - 1]).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn ngram_counts_match_naive_counter(tokens in prop::collection::vec(word(), 0..12), n in 1usize..5) {
        let fast = ngram_counts(&tokens, n);
        let naive = naive_counts(&tokens, n);
        prop_assert_eq!(fast.len(), naive.len());
        for (gram, count) in naive {
            prop_assert_eq!(fast.get(gram.as_slice()).copied(), Some(count));
        }
    }

    #[test]
    fn self_match_and_ranges(tokens in prop::collection::vec(word(), 1..10), other in prop::collection::vec(word(), 1..10)) {
        let c = Caption::from_tokens(tokens.clone());
        let refs = RefSet::new(vec![c.clone()]).unwrap();
        for n in 1..=tokens.len().min(4) {
            prop_assert!((bleu(&c, &refs, n, None).unwrap() - 1.0).abs() <= 1e-9);
        }
        prop_assert!((rouge_l(&c, &c, 1.0) - 1.0).abs() <= 1e-9);
        let o = Caption::from_tokens(other);
        let b = bleu(&o, &refs, 2, None).unwrap();
        let r = rouge_l(&o, &c, 1.0);
        prop_assert!((0.0..=1.0).contains(&b) && (0.0..=1.0).contains(&r));
    }

    #[test]
    fn recall_is_monotone_in_k(ranks in prop::collection::vec(1usize..30, 1..20)) {
        let mut prev = 0.0;
        for k in 1..35 {
            let r = recall_at_k(&ranks, k).unwrap();
            prop_assert!(r >= prev && r <= 1.0);
            prev = r;
        }
    }

    #[test]
    fn tokenizer_is_idempotent(s in "[A-Za-z .,!?]{0,40}") {
        let once = tokenize(&s);
        prop_assert_eq!(tokenize(&once.join(" ")), once);
    }
}

#[test]
fn ngram_counter_matches_naive_on_200_sequences() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strat = prop::collection::vec(word(), 0..20);
    for _ in 0..200 {
        let tokens = strat.new_tree(&mut runner).unwrap().current();
        for n in 1..=4 {
            let fast = ngram_counts(&tokens, n);
            let naive = naive_counts(&tokens, n);
            assert_eq!(fast.len(), naive.len());
            for (gram, count) in &naive {
                assert_eq!(fast[gram.as_slice()], *count);
            }
        }
    }
}

#[test]
fn token_order_sensitivity() {
    let a = Caption::new("red roof next to the green field");
    let b = Caption::new("green field next to the red roof");
    let refs = RefSet::new(vec![a.clone()]).unwrap();
    assert_eq!(bleu(&b, &refs, 1, None).unwrap(), 1.0);
    assert!(bleu(&b, &refs, 2, None).unwrap() < 1.0);
    assert!(rouge_l(&b, &a, 1.0) < 1.0);
}
