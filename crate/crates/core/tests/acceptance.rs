//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::{HashMap, HashSet};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rsalign::align::{
    align_loss, global_loss, iou, iou_weights, object_loss, region_hard_loss, region_nce_loss,
    AlignBatch, AlignWeights, BoxPair, EmbedKey, PairLoss,
};
use rsalign::dris::{cost_report, resolution_allocate, select_rois, DrisConfig, Resolution};
use rsalign::io::FgrdPayload;
use rsalign::metrics::{bleu, cider, recall_at_k, rouge_l, spice_f1, Caption, RefSet, TripleSet};
use rsalign::selfcheck::{gradcheck_model_config, random_align_batch, random_weights};
use rsalign::toyvlm::{
    caption_loss_from_logits, cross_modal_attention, forward, lr_at, patchify, read_entries,
    synthetic_dataset, train, write_entries, AttentionParams, Matrix, ParamId, TensorEntry,
    TokenSeq, ToyModelConfig, ToyVlmParams, TrainConfig,
};
use rsalign::{EmbedVec, FeatureGrid, Roi};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Finite differences, independent of the library's gradient checker.

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-5;

fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + STEP;
            let up = f(&probe);
            probe[i] = orig - STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}

fn split_embeds(flat: &[f64], dims: &[usize]) -> Vec<EmbedVec> {
    let mut off = 0;
    dims.iter()
        .map(|&d| {
            let e = EmbedVec::new(flat[off..off + d].to_vec()).unwrap();
            off += d;
            e
        })
        .collect()
}

fn pair_loss_err(
    visual: &[EmbedVec],
    text: &[EmbedVec],
    loss: &dyn Fn(&[EmbedVec], &[EmbedVec]) -> PairLoss,
) -> f64 {
    let all: Vec<&EmbedVec> = visual.iter().chain(text).collect();
    let dims: Vec<usize> = all.iter().map(|e| e.dim()).collect();
    let x: Vec<f64> = all.iter().flat_map(|e| e.values().to_vec()).collect();
    let base = loss(visual, text);
    let analytic: Vec<f64> = base
        .grad_visual
        .iter()
        .chain(&base.grad_text)
        .flatten()
        .copied()
        .collect();
    let split = visual.len();
    let f = |p: &[f64]| {
        let e = split_embeds(p, &dims);
        loss(&e[..split], &e[split..]).value
    };
    max_rel_err(&analytic, &central_difference(&f, &x))
}

fn embed_of(b: &mut AlignBatch, k: EmbedKey) -> &mut EmbedVec {
    match k {
        EmbedKey::ObjectVisual(p) => &mut b.object_pairs[p].visual,
        EmbedKey::ObjectText(p) => &mut b.object_pairs[p].text,
        EmbedKey::RegionVisual(i) => &mut b.region_items[i].visual,
        EmbedKey::Phrase(j) => &mut b.phrases[j],
        EmbedKey::GlobalVisual => &mut b.global_visual,
        EmbedKey::GlobalText => &mut b.global_text,
    }
}

fn align_err(batch: &AlignBatch, w: &AlignWeights) -> f64 {
    let out = align_loss(batch, w).unwrap();
    let keys: Vec<EmbedKey> = out.gradients.keys().copied().collect();
    let mut b = batch.clone();
    let dims: Vec<usize> = keys.iter().map(|&k| embed_of(&mut b, k).dim()).collect();
    let x: Vec<f64> = keys
        .iter()
        .flat_map(|&k| embed_of(&mut b, k).values().to_vec())
        .collect();
    let analytic: Vec<f64> = keys.iter().flat_map(|k| out.gradients[k].clone()).collect();
    let f = |p: &[f64]| {
        let mut probe = batch.clone();
        for (k, e) in keys.iter().zip(split_embeds(p, &dims)) {
            *embed_of(&mut probe, *k) = e;
        }
        align_loss(&probe, w).unwrap().l_align
    };
    max_rel_err(&analytic, &central_difference(&f, &x))
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let mut worst: HashMap<&str, f64> = HashMap::new();
    let mut record = |name: &'static str, e: f64| {
        let slot = worst.entry(name).or_insert(0.0);
        *slot = slot.max(e);
    };
    for _ in 0..50 {
        let b = random_align_batch(&mut rng, 16, 5);
        let w = random_weights(&mut rng);
        let pairs: Vec<BoxPair> = b.object_pairs.iter().map(|p| p.boxes).collect();
        let iw = iou_weights(&pairs).unwrap();
        let ov: Vec<EmbedVec> = b.object_pairs.iter().map(|p| p.visual.clone()).collect();
        let ot: Vec<EmbedVec> = b.object_pairs.iter().map(|p| p.text.clone()).collect();
        record(
            "L_obj",
            pair_loss_err(&ov, &ot, &|v, t| object_loss(v, t, &iw).unwrap()),
        );
        let rv: Vec<EmbedVec> = b.region_items.iter().map(|r| r.visual.clone()).collect();
        record(
            "L_reg_hard",
            pair_loss_err(&rv, &b.phrases, &|v, p| {
                region_hard_loss(v, p, &b.hard_assignment).unwrap()
            }),
        );
        record(
            "L_reg_nce",
            pair_loss_err(&rv, &b.phrases, &|v, p| {
                region_nce_loss(v, p, &b.positive_index, w.tau_temp).unwrap()
            }),
        );
        record(
            "L_glob",
            pair_loss_err(
                std::slice::from_ref(&b.global_visual),
                std::slice::from_ref(&b.global_text),
                &|g, t| global_loss(&g[0], &t[0]).unwrap(),
            ),
        );
        record("L_align", align_err(&b, &w));

        let (t, v) = (rng.gen_range(1..=8), rng.gen_range(2..=12));
        let cfg = ToyModelConfig {
            vocab: v,
            max_text_len: t,
            ..ToyModelConfig::toy()
        };
        let seq = TokenSeq::new((0..t).map(|_| rng.gen_range(0..v)).collect(), &cfg).unwrap();
        let logits: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = Matrix::new(t, v, logits.clone()).unwrap();
        let analytic = caption_loss_from_logits(&m, &seq)
            .unwrap()
            .grad_logits
            .data()
            .to_vec();
        let f = |p: &[f64]| {
            caption_loss_from_logits(&Matrix::new(t, v, p.to_vec()).unwrap(), &seq)
                .unwrap()
                .value
        };
        record(
            "L_caption",
            max_rel_err(&analytic, &central_difference(&f, &logits)),
        );
    }

    let cfg = gradcheck_model_config();
    for seed in 0..50u64 {
        let data = synthetic_dataset(&cfg, 4, seed).unwrap();
        let params = ToyVlmParams::init(&cfg, 1000 + seed).unwrap();
        let w = random_weights(&mut rng);
        let item = &data[(seed % 4) as usize];
        let out = forward(&params, item, &w, true).unwrap();
        let analytic: Vec<f64> = out
            .grads
            .unwrap()
            .iter()
            .flat_map(|g| g.data().to_vec())
            .collect();
        let f = |p: &[f64]| {
            forward(&params.with_flat(p).unwrap(), item, &w, false)
                .unwrap()
                .total
        };
        record(
            "L_total",
            max_rel_err(&analytic, &central_difference(&f, &params.flatten())),
        );
    }

    let mut names: Vec<_> = worst.iter().collect();
    names.sort_by_key(|(k, _)| **k);
    let summary = names
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    let max = worst.values().cloned().fold(0.0, f64::max);
    check(max < 1e-4, || {
        format!("max rel err {max:.3e} >= 1e-4 ({summary})")
    })?;
    Ok(format!(
        "50 instances per loss, max rel err {max:.2e} < 1e-4 ({summary})"
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_recomp = 0.0f64;
    for i in 0..1000 {
        let b = random_align_batch(&mut rng, 16, 5);
        let w = random_weights(&mut rng);
        let l = align_loss(&b, &w).map_err(|e| format!("instance {i}: {e}"))?;
        for (name, v) in [
            ("l_obj", l.l_obj),
            ("l_reg_hard", l.l_reg_hard),
            ("l_glob", l.l_glob),
        ] {
            check((0.0..=2.0).contains(&v), || {
                format!("instance {i}: {name} = {v}")
            })?;
        }
        check(l.l_reg_nce >= 0.0, || {
            format!("instance {i}: l_reg_nce = {}", l.l_reg_nce)
        })?;
        let l_reg = w.mu * l.l_reg_hard + (1.0 - w.mu) * l.l_reg_nce;
        let recomposed = w.alpha * l.l_obj + w.beta * l_reg + w.gamma * l.l_glob;
        worst_recomp = worst_recomp.max((recomposed - l.l_align).abs());
    }
    check(worst_recomp <= 1e-12, || {
        format!("recomposition error {worst_recomp:e}")
    })?;
    Ok(format!(
        "1000 instances in range, recomposition error {worst_recomp:.1e}"
    ))
}

fn criterion_3() -> Outcome {
    let mut cases = 0;
    for n in [2usize, 4, 8] {
        for (a, b) in [(1, 1), (3, 5), (28, 28), (64, 48), (125, 7)] {
            let (h, w) = (a * n, b * n);
            let rep = cost_report(
                h,
                w,
                &DrisConfig {
                    n,
                    ..DrisConfig::default()
                },
                &[],
            );
            let full = (h * w) as u64;
            check(rep.full_res_cell_ops == full, || {
                format!("{h}x{w}: full = {}", rep.full_res_cell_ops)
            })?;
            check(rep.coarse_cell_ops * (n * n) as u64 == full, || {
                format!(
                    "{h}x{w}, n={n}: coarse {} * {} != {full}",
                    rep.coarse_cell_ops,
                    n * n
                )
            })?;
            check(
                rep.coarse_cell_ops == full / (n * n) as u64 && rep.fine_cell_ops == 0,
                || format!("{h}x{w}, n={n}: unexpected fine work"),
            )?;
            cases += 1;
        }
    }
    Ok(format!("{cases} image sizes, coarse == full / n^2 exactly"))
}

fn random_map(rng: &mut ChaCha8Rng) -> FeatureGrid {
    let (h, w) = (rng.gen_range(3..16), rng.gen_range(3..16));
    let data: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    FeatureGrid::new(h, w, 1, data).unwrap()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let s = random_map(&mut rng);
        let tau = rng.gen_range(0.0..1.0);
        let mask = resolution_allocate(&s, tau).unwrap();
        for r in 0..s.height() {
            for c in 0..s.width() {
                let oracle = if s.data()[r * s.width() + c] >= tau {
                    Resolution::High
                } else {
                    Resolution::Low
                };
                check(mask.get(r, c) == oracle, || {
                    format!("map {i}: cell ({r},{c})")
                })?;
            }
        }
    }
    for i in 0..100 {
        // Windows narrower than 3 cells are excluded: with reflect padding a
        // spike one cell from the border blurs to a higher value on the
        // border cell itself once sigma >= 1.5.
        let (h, w) = (rng.gen_range(3..20), rng.gen_range(3..20));
        let at = (rng.gen_range(0..h), rng.gen_range(0..w));
        let height = rng.gen_range(0.1..10.0);
        let spike =
            FeatureGrid::from_fn(h, w, 1, |r, c, _| if (r, c) == at { height } else { 0.0 })
                .unwrap();
        let cfg = DrisConfig {
            k: 1,
            sigma: rng.gen_range(0.5..3.0),
            roi_size: (rng.gen_range(3..=h.min(5)), rng.gen_range(3..=w.min(5))),
            ..DrisConfig::default()
        };
        let rois = select_rois(&spike, &cfg).unwrap();
        check(rois.len() == 1 && rois[0].contains(at.0, at.1), || {
            format!(
                "spike {i} at {at:?} in {h}x{w}, sigma {:.3}, window {:?}: {rois:?}",
                cfg.sigma, cfg.roi_size
            )
        })?;
    }
    for i in 0..100 {
        let s = random_map(&mut rng);
        let cfg = DrisConfig {
            k: rng.gen_range(1..6),
            roi_size: (2.min(s.height()), 2.min(s.width())),
            ..DrisConfig::default()
        };
        let base = select_rois(&s, &cfg).unwrap();
        for scale in [1e-6, 0.37, 3.0, 1234.5, 1e6] {
            let scaled = FeatureGrid::new(
                s.height(),
                s.width(),
                1,
                s.data().iter().map(|v| v * scale).collect(),
            )
            .unwrap();
            check(select_rois(&scaled, &cfg).unwrap() == base, || {
                format!("map {i}: scale {scale} changed ROIs")
            })?;
        }
    }
    Ok("100 threshold maps, 100 spikes (windows >= 3 cells), 100 maps x 5 scales".into())
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<Vec<String>, f64> {
    let mut out = HashMap::new();
    for i in 0..tokens.len().saturating_sub(n - 1) {
        *out.entry(tokens[i..i + n].to_vec()).or_insert(0.0) += 1.0;
    }
    out
}

/// CIDEr computed term by term from the definition.
fn cider_oracle(cand: &Caption, refs: &[Caption], corpus: &[Vec<Caption>]) -> f64 {
    let mut total = 0.0;
    for n in 1..=4 {
        let idf = |g: &Vec<String>| {
            let df = corpus
                .iter()
                .filter(|img| img.iter().any(|r| ngrams(&r.tokens, n).contains_key(g)))
                .count();
            (corpus.len() as f64 / (1.0 + df as f64)).ln().max(0.0)
        };
        let vector = |c: &Caption| -> HashMap<Vec<String>, f64> {
            let counts = ngrams(&c.tokens, n);
            let sum: f64 = counts.values().sum();
            counts
                .into_iter()
                .map(|(g, k)| {
                    let w = idf(&g);
                    (g, k / sum * w)
                })
                .collect()
        };
        let gc = vector(cand);
        let mut acc = 0.0;
        for r in refs {
            let gr = vector(r);
            let keys: HashSet<&Vec<String>> = gc.keys().chain(gr.keys()).collect();
            let dot: f64 = keys
                .iter()
                .map(|k| gc.get(*k).unwrap_or(&0.0) * gr.get(*k).unwrap_or(&0.0))
                .sum();
            let nc = gc.values().map(|v| v * v).sum::<f64>().sqrt();
            let nr = gr.values().map(|v| v * v).sum::<f64>().sqrt();
            acc += if nc == 0.0 || nr == 0.0 {
                0.0
            } else {
                dot / (nc * nr)
            };
        }
        total += acc / refs.len() as f64;
    }
    total / 4.0
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vocab = [
        "river", "bridge", "green", "field", "road", "two", "a", "large", "building", "near",
    ];
    for _ in 0..200 {
        let len = rng.gen_range(1..12);
        let c = Caption::from_tokens(
            (0..len)
                .map(|_| vocab[rng.gen_range(0..vocab.len())].to_string())
                .collect(),
        );
        let refs = RefSet::new(vec![c.clone()]).unwrap();
        for n in 1..=len.min(4) {
            let b = bleu(&c, &refs, n, None).unwrap();
            check((b - 1.0).abs() <= 1e-9, || {
                format!("BLEU-{n} self-match {b}")
            })?;
        }
        check((rouge_l(&c, &c, 1.0) - 1.0).abs() <= 1e-9, || {
            "ROUGE-L self-match".into()
        })?;
        let t = TripleSet::new(
            c.tokens
                .windows(2)
                .map(|w| (w[0].as_str(), "next", w[1].as_str())),
        );
        if !t.is_empty() {
            check((spice_f1(&t, &t) - 1.0).abs() <= 1e-9, || {
                "SPICE self-match".into()
            })?;
        }
    }

    let b1 = bleu(
        &Caption::new("the cat sat"),
        &RefSet::new(vec![Caption::new("the cat sat on the mat")]).unwrap(),
        1,
        None,
    )
    .unwrap();
    check((b1 - 0.367879).abs() <= 1e-6, || {
        format!("BLEU-1 example {b1}")
    })?;
    let rl = rouge_l(&Caption::new("a b c"), &Caption::new("a c"), 1.0);
    check((rl - 0.8).abs() <= 1e-6, || format!("ROUGE-L example {rl}"))?;
    let sp = spice_f1(
        &TripleSet::new([("a", "r", "b")]),
        &TripleSet::new([("a", "r", "b"), ("c", "r", "d")]),
    );
    check((sp - 2.0 / 3.0).abs() <= 1e-6, || {
        format!("SPICE example {sp}")
    })?;
    let ranks = [1usize, 3, 20];
    let r: Vec<f64> = [1, 5, 10]
        .iter()
        .map(|&k| recall_at_k(&ranks, k).unwrap())
        .collect();
    check(
        (r[0] - 1.0 / 3.0).abs() <= 1e-6
            && (r[1] - 2.0 / 3.0).abs() <= 1e-6
            && (r[2] - 2.0 / 3.0).abs() <= 1e-6,
        || format!("R@k example {r:?}"),
    )?;

    let corpus_text = [
        vec![
            "a large white ship is moored in the harbor",
            "a white ship in a harbor",
        ],
        vec![
            "a long bridge crosses the green river",
            "a bridge over a river",
        ],
        vec![
            "many cars are parked near the large building",
            "cars parked beside a building",
        ],
    ];
    let candidates = [
        "a white ship in the harbor",
        "a bridge over the river near cars",
        "a large building with parked cars",
    ];
    let corpus: Vec<Vec<Caption>> = corpus_text
        .iter()
        .map(|refs| refs.iter().map(|s| Caption::new(s)).collect())
        .collect();
    let sets: Vec<RefSet> = corpus
        .iter()
        .map(|r| RefSet::new(r.clone()).unwrap())
        .collect();
    let mut worst = 0.0f64;
    for (i, c) in candidates.iter().enumerate() {
        let cand = Caption::new(c);
        let got = cider(&cand, &sets[i], &sets, 4).unwrap();
        let want = cider_oracle(&cand, &corpus[i], &corpus);
        check(want > 0.0, || format!("degenerate oracle for image {i}"))?;
        worst = worst.max((got - want).abs());
    }
    check(worst <= 1e-9, || {
        format!("CIDEr differs from oracle by {worst:e}")
    })?;

    for i in 0..1000 {
        let ranks: Vec<usize> = (0..rng.gen_range(1..30))
            .map(|_| rng.gen_range(1..50))
            .collect();
        let mut prev = 0.0;
        for k in 1..=50 {
            let r = recall_at_k(&ranks, k).unwrap();
            check(r >= prev, || format!("ranking set {i}: R@{k} decreased"))?;
            prev = r;
        }
    }
    Ok(format!(
        "identities, worked examples, CIDEr oracle diff {worst:.1e}, 1000 R@k sets"
    ))
}

fn random_roi(rng: &mut ChaCha8Rng, side: usize) -> Roi {
    let (r0, c0) = (rng.gen_range(0..side), rng.gen_range(0..side));
    Roi::new(
        r0,
        c0,
        rng.gen_range(r0 + 1..=side),
        rng.gen_range(c0 + 1..=side),
    )
    .unwrap()
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut fallbacks = 0;
    for i in 0..1000 {
        let p = rng.gen_range(1..=6);
        let disjoint = i % 5 == 0;
        let pairs: Vec<BoxPair> = (0..p)
            .map(|_| {
                let predicted = random_roi(&mut rng, 10);
                let ground_truth = if disjoint {
                    Roi::new(20, 20, 22, 22).unwrap()
                } else {
                    random_roi(&mut rng, 10)
                };
                BoxPair {
                    predicted,
                    ground_truth,
                }
            })
            .collect();
        let w = iou_weights(&pairs).unwrap();
        if pairs
            .iter()
            .all(|b| iou(&b.predicted, &b.ground_truth) == 0.0)
        {
            fallbacks += 1;
            check(w.iter().all(|&x| x == 1.0 / p as f64), || {
                format!("set {i}: fallback not uniform")
            })?;
        }
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    check(worst <= 1e-12, || format!("weight sum off by {worst:e}"))?;
    check(fallbacks >= 200, || {
        format!("only {fallbacks} all-zero sets exercised")
    })?;
    let v = iou(
        &Roi::new(0, 0, 2, 2).unwrap(),
        &Roi::new(1, 1, 3, 3).unwrap(),
    );
    check((v - 1.0 / 7.0).abs() <= 1e-12, || {
        format!("IoU example {v}")
    })?;
    Ok(format!(
        "1000 sets ({fallbacks} zero-IoU), sum error {worst:.1e}, IoU example 1/7"
    ))
}

fn frozen_bits(p: &ToyVlmParams) -> Vec<u64> {
    ParamId::ALL
        .iter()
        .filter(|id| !id.group().is_trainable())
        .flat_map(|&id| {
            p.get(id)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        })
        .collect()
}

fn criterion_7() -> Outcome {
    let model = ToyModelConfig::toy();
    let cfg = TrainConfig {
        batch_size: 8,
        peak_lr: 3e-4,
        warmup_steps: 100,
        steps: 200,
        seed: 7,
        ..TrainConfig::default()
    };
    let run = || {
        let data = synthetic_dataset(&model, 32, cfg.seed).unwrap();
        let mut params = ToyVlmParams::init(&model, cfg.seed + 1).unwrap();
        let before = frozen_bits(&params);
        let report = train(&data, &mut params, &cfg, &AlignWeights::default()).unwrap();
        (report, before == frozen_bits(&params))
    };
    let (first, frozen_same) = run();
    let steps = &first.steps;
    check(steps.len() == 200, || {
        format!("{} steps recorded", steps.len())
    })?;
    let mean = |from: usize, to: usize| {
        steps[from..to].iter().map(|s| s.total).sum::<f64>() / (to - from) as f64
    };
    let (early, late) = (mean(10, 20), mean(190, 200));
    let ratio = late / early;
    check(ratio <= 0.5, || {
        format!("final/early loss ratio {ratio:.3} > 0.5")
    })?;
    check(frozen_same, || "frozen parameters changed".into())?;
    let (second, _) = run();
    check(
        first.loss_csv().as_bytes() == second.loss_csv().as_bytes(),
        || "loss CSVs differ".into(),
    )?;
    Ok(format!(
        "final/early ratio {ratio:.3} <= 0.5, frozen groups bit-identical, CSVs identical"
    ))
}

fn criterion_8() -> Outcome {
    let cfg = TrainConfig::default();
    let got: Vec<f64> = [100, 1000, 550]
        .iter()
        .map(|&s| lr_at(s, &cfg).unwrap())
        .collect();
    check(got[0] == 3e-4 && got[1] == 0.0 && got[2] == 1.5e-4, || {
        format!("{got:?}")
    })?;
    Ok(format!(
        "lr_at(100)={:e}, lr_at(1000)={}, lr_at(550)={:e}",
        got[0], got[1], got[2]
    ))
}

fn criterion_9() -> Outcome {
    let full = ToyModelConfig::full_scale();
    check(full.num_patches() == 196, || {
        format!("{} patches", full.num_patches())
    })?;
    let image = FeatureGrid::zeros(224, 224, 3).unwrap();
    let patches = patchify(&image, &full).unwrap();
    check(
        patches.rows() == 196 && patches.cols() == 16 * 16 * 3,
        || format!("patch matrix {}x{}", patches.rows(), patches.cols()),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 8;
    let mut m = |r: usize, c: usize| {
        Matrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let params = AttentionParams {
        wq: m(d, d),
        wk: m(d, d),
        wv: m(d, d),
        wo: m(d, d),
        heads: 2,
    };
    let image = m(16, d);
    for t in 1..=64 {
        let out = cross_modal_attention(&m(t, d), &image, &params).unwrap();
        check(out.rows() == t && out.cols() == d, || {
            format!("T={t}: output {}x{}", out.rows(), out.cols())
        })?;
    }
    Ok("224/16 -> 196 patches, attention rows == T for T in 1..=64".into())
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let finite = |rng: &mut ChaCha8Rng| loop {
        let v = f32::from_bits(rng.gen());
        if v.is_finite() {
            return v;
        }
    };
    for i in 0..100 {
        let (h, w, c) = (
            rng.gen_range(1..9u32),
            rng.gen_range(1..9u32),
            rng.gen_range(1..5u32),
        );
        let p = FgrdPayload {
            height: h,
            width: w,
            channels: c,
            data: (0..h * w * c).map(|_| finite(&mut rng)).collect(),
        };
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let back = FgrdPayload::read_from(buf.as_slice()).unwrap();
        check(
            bits(&back.data) == bits(&p.data)
                && (back.height, back.width, back.channels) == (h, w, c),
            || format!("FGRD payload {i} differs"),
        )?;

        let entries: Vec<TensorEntry> = (0..rng.gen_range(1..4))
            .map(|j| {
                let dims = vec![rng.gen_range(1..6), rng.gen_range(1..6)];
                let data = (0..dims[0] * dims[1]).map(|_| finite(&mut rng)).collect();
                TensorEntry::new(format!("tensor{j}"), dims, data).unwrap()
            })
            .collect();
        let mut buf = Vec::new();
        write_entries(&mut buf, &entries).unwrap();
        let back = read_entries(buf.as_slice()).unwrap();
        check(
            back.len() == entries.len()
                && back.iter().zip(&entries).all(|(a, b)| {
                    a.name == b.name && a.dims == b.dims && bits(&a.data) == bits(&b.data)
                }),
            || format!("TVLM payload {i} differs"),
        )?;
    }

    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_rsalign"))
        .arg("selfcheck")
        .env_remove("RSALIGN_TRAIN_SEED")
        .output()
        .map_err(|e| format!("cannot run selfcheck: {e}"))?;
    let secs = start.elapsed().as_secs_f64();
    check(out.status.success(), || {
        format!(
            "selfcheck exit {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        )
    })?;
    check(secs < 120.0, || format!("selfcheck took {secs:.1} s"))?;
    let checks = String::from_utf8_lossy(&out.stdout).lines().count() - 1;
    Ok(format!(
        "100 FGRD + 100 TVLM payloads bit-exact, selfcheck {checks} suites exit 0 in {secs:.1} s"
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("Gradient fidelity", criterion_1),
        ("Loss bounds and recomposition", criterion_2),
        ("DRIS cost claim", criterion_3),
        ("Threshold mask, spike ROI, rescale invariance", criterion_4),
        ("Metric identities and oracles", criterion_5),
        ("IoU-weight contract", criterion_6),
        ("Training contract", criterion_7),
        ("Schedule spot values", criterion_8),
        ("Shape contract", criterion_9),
        ("Serialization and selfcheck", criterion_10),
    ];
    let budgets = [
        60.0,
        f64::INFINITY,
        f64::INFINITY,
        f64::INFINITY,
        f64::INFINITY,
        f64::INFINITY,
        300.0,
        f64::INFINITY,
        f64::INFINITY,
        f64::INFINITY,
    ];
    let mut failed = 0;
    for (i, ((name, f), budget)) in criteria.iter().zip(budgets).enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(_) if secs >= budget => Err(format!("took {secs:.1} s, budget {budget} s")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail} ({secs:.2} s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {detail} ({secs:.2} s)", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
