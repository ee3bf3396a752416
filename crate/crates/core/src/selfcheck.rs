//! Built-in property suite run by the `selfcheck` command.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{
    align_loss, global_loss, iou, iou_weights, object_loss, region_hard_loss, region_nce_loss,
    AlignBatch, AlignWeights, BoxPair, EmbedKey, ObjectPair, PairLoss, RegionItem, RegionMask,
};
use crate::dris::{cost_report, resolution_allocate, select_rois, DrisConfig, Resolution};
use crate::error::Result;
use crate::grid::{EmbedVec, FeatureGrid, Roi};
use crate::io::fgrd::FgrdPayload;
use crate::metrics::{bleu, recall_at_k, rouge_l, spice_f1, Caption, RefSet, TripleSet};
use crate::toyvlm::checkpoint::{read_entries, write_entries, TensorEntry};
use crate::toyvlm::gradcheck::{compare, numeric_gradient, GradCheckReport};
use crate::toyvlm::{
    forward, lr_at, synthetic_dataset, train, Matrix, Tape, ToyModelConfig, ToyVlmParams,
    TrainConfig,
};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfcheckReport {
    pub checks: Vec<CheckResult>,
    pub passed: usize,
    pub failed: usize,
    pub seconds: f64,
}

impl SelfcheckReport {
    pub fn ok(&self) -> bool {
        self.failed == 0
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Random instances per gradient suite.
    pub instances: usize,
    /// Include the 200-step training run.
    pub training: bool,
    #[doc(hidden)]
    pub corrupt_gradient: bool,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 50,
            training: true,
            corrupt_gradient: false,
        }
    }
}

/// Random alignment payload: embedding dim in `2..=max_dim`, counts in
/// `1..=max_count`, boxes on an 8x8 grid, values uniform in `[-1, 1)`.
pub fn random_align_batch(rng: &mut impl Rng, max_dim: usize, max_count: usize) -> AlignBatch {
    let d = rng.gen_range(2..=max_dim.max(2));
    let max_count = max_count.max(1);
    let vec = |rng: &mut dyn rand::RngCore| -> EmbedVec {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-2 {
                return EmbedVec::new(v).expect("finite");
            }
        }
    };
    let p = rng.gen_range(1..=max_count);
    let k = rng.gen_range(1..=max_count);
    let m = rng.gen_range(1..=max_count);
    let random_box = |rng: &mut dyn rand::RngCore| {
        let (r0, c0) = (rng.gen_range(0..6), rng.gen_range(0..6));
        let (h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        Roi::new(r0, c0, r0 + h, c0 + w).expect("valid box")
    };
    let object_pairs = (0..p)
        .map(|_| ObjectPair {
            boxes: BoxPair {
                predicted: random_box(rng),
                ground_truth: random_box(rng),
            },
            visual: vec(rng),
            text: vec(rng),
        })
        .collect();
    let region_items = (0..k)
        .map(|i| RegionItem {
            mask: RegionMask::from_roi(8, 8, &Roi::new(i % 8, 0, i % 8 + 1, 8).expect("row"))
                .expect("nonempty"),
            visual: vec(rng),
        })
        .collect();
    let phrases = (0..m).map(|_| vec(rng)).collect();
    let positive_index = (0..k).map(|_| rng.gen_range(0..m)).collect();
    let hard_assignment = (0..k).map(|_| rng.gen_range(0..m)).collect();
    AlignBatch {
        visual_grid: FeatureGrid::zeros(8, 8, d).expect("grid"),
        object_pairs,
        region_items,
        phrases,
        positive_index,
        hard_assignment,
        global_visual: vec(rng),
        global_text: vec(rng),
    }
}

/// Random weights with `alpha, beta, gamma, mu` in `[0, 1]` and
/// temperature in `[0.05, 1]`.
pub fn random_weights(rng: &mut impl Rng) -> AlignWeights {
    AlignWeights {
        alpha: rng.gen_range(0.0..=1.0),
        beta: rng.gen_range(0.0..=1.0),
        gamma: rng.gen_range(0.0..=1.0),
        mu: rng.gen_range(0.0..=1.0),
        tau_temp: rng.gen_range(0.05..=1.0),
        delta: rng.gen_range(0.1..=1.0),
    }
}

/// Every embedding of `batch` in gradient-table key order.
pub fn batch_keys(batch: &AlignBatch) -> Vec<EmbedKey> {
    let mut keys = vec![EmbedKey::GlobalVisual, EmbedKey::GlobalText];
    for p in 0..batch.object_pairs.len() {
        keys.push(EmbedKey::ObjectVisual(p));
        keys.push(EmbedKey::ObjectText(p));
    }
    keys.extend((0..batch.region_items.len()).map(EmbedKey::RegionVisual));
    keys.extend((0..batch.phrases.len()).map(EmbedKey::Phrase));
    keys.sort();
    keys
}

fn embed_mut(batch: &mut AlignBatch, key: EmbedKey) -> &mut EmbedVec {
    match key {
        EmbedKey::ObjectVisual(p) => &mut batch.object_pairs[p].visual,
        EmbedKey::ObjectText(p) => &mut batch.object_pairs[p].text,
        EmbedKey::RegionVisual(k) => &mut batch.region_items[k].visual,
        EmbedKey::Phrase(j) => &mut batch.phrases[j],
        EmbedKey::GlobalVisual => &mut batch.global_visual,
        EmbedKey::GlobalText => &mut batch.global_text,
    }
}

/// Concatenated embedding values in [`batch_keys`] order.
pub fn flatten_batch(batch: &AlignBatch) -> Vec<f64> {
    let mut b = batch.clone();
    batch_keys(batch)
        .into_iter()
        .flat_map(|k| embed_mut(&mut b, k).values().to_vec())
        .collect()
}

/// Copy of `batch` with embeddings replaced from a flat vector.
pub fn unflatten_batch(batch: &AlignBatch, flat: &[f64]) -> AlignBatch {
    let mut b = batch.clone();
    let mut offset = 0;
    for k in batch_keys(batch) {
        let e = embed_mut(&mut b, k);
        let d = e.dim();
        *e = EmbedVec::new(flat[offset..offset + d].to_vec()).expect("finite probe");
        offset += d;
    }
    b
}

/// Analytic vs numeric gradient of `l_align` over every embedding.
pub fn check_align_gradient(batch: &AlignBatch, weights: &AlignWeights) -> Result<GradCheckReport> {
    let breakdown = align_loss(batch, weights)?;
    let analytic: Vec<f64> = batch_keys(batch)
        .iter()
        .flat_map(|k| breakdown.gradients[k].clone())
        .collect();
    let f =
        |x: &[f64]| align_loss(&unflatten_batch(batch, x), weights).map_or(f64::NAN, |b| b.l_align);
    Ok(compare(
        &analytic,
        &numeric_gradient(f, &flatten_batch(batch), GRAD_STEP),
    ))
}

/// Gradient check for a two-sided loss over `visual` and `text` sets.
pub fn check_pair_loss(
    visual: &[EmbedVec],
    text: &[EmbedVec],
    loss: impl Fn(&[EmbedVec], &[EmbedVec]) -> Result<PairLoss>,
) -> Result<GradCheckReport> {
    let split = visual.len();
    let all: Vec<EmbedVec> = visual.iter().chain(text).cloned().collect();
    let theta: Vec<f64> = all.iter().flat_map(|e| e.values().to_vec()).collect();
    let dims: Vec<usize> = all.iter().map(EmbedVec::dim).collect();
    let rebuild = |x: &[f64]| -> Vec<EmbedVec> {
        let mut off = 0;
        dims.iter()
            .map(|&d| {
                let e = EmbedVec::new(x[off..off + d].to_vec()).expect("finite probe");
                off += d;
                e
            })
            .collect()
    };
    let base = loss(visual, text)?;
    let analytic: Vec<f64> = base
        .grad_visual
        .iter()
        .chain(&base.grad_text)
        .flat_map(|g| g.iter().copied())
        .collect();
    let f = |x: &[f64]| {
        let e = rebuild(x);
        loss(&e[..split], &e[split..]).map_or(f64::NAN, |l| l.value)
    };
    Ok(compare(&analytic, &numeric_gradient(f, &theta, GRAD_STEP)))
}

/// Tape gradient of the summed cross-entropy over random logits.
pub fn check_caption_gradient(rng: &mut impl Rng) -> Result<GradCheckReport> {
    let t = rng.gen_range(1..=6);
    let v = rng.gen_range(2..=10);
    let logits: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let l = tape.leaf(Matrix::new(t, v, x.to_vec())?);
        let ce = tape.cross_entropy(l, &targets)?;
        let g = tape.backward(ce)?;
        Ok((tape.value(ce).item(), g.wrt(l).data().to_vec()))
    };
    let (_, analytic) = eval(&logits)?;
    let f = |x: &[f64]| eval(x).map_or(f64::NAN, |r| r.0);
    Ok(compare(&analytic, &numeric_gradient(f, &logits, GRAD_STEP)))
}

/// Small model configuration used for full-graph gradient checks.
pub fn gradcheck_model_config() -> ToyModelConfig {
    ToyModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        heads: 2,
        vocab: 10,
        max_text_len: 6,
    }
}

/// Gradient of the total objective with respect to every model parameter.
pub fn check_total_gradient(seed: u64, weights: &AlignWeights) -> Result<GradCheckReport> {
    let cfg = gradcheck_model_config();
    let data = synthetic_dataset(&cfg, 4, seed)?;
    let params = ToyVlmParams::init(&cfg, seed.wrapping_add(50))?;
    let item = &data[(seed % 4) as usize];
    let out = forward(&params, item, weights, true)?;
    let analytic: Vec<f64> = out
        .grads
        .unwrap_or_default()
        .iter()
        .flat_map(|m| m.data().to_vec())
        .collect();
    let f = |x: &[f64]| {
        params
            .with_flat(x)
            .and_then(|p| forward(&p, item, weights, false))
            .map_or(f64::NAN, |o| o.total)
    };
    Ok(compare(
        &analytic,
        &numeric_gradient(f, &params.flatten(), GRAD_STEP),
    ))
}

struct Suite {
    checks: Vec<CheckResult>,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> std::result::Result<String, String>) {
        let start = Instant::now();
        let (passed, detail) = match f() {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
}

fn grad_suite(
    n: usize,
    mut one: impl FnMut(usize) -> Result<GradCheckReport>,
) -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for i in 0..n {
        let r = one(i).map_err(|e| format!("instance {i}: {e}"))?;
        if !r.passes(GRAD_TOLERANCE) {
            return Err(format!(
                "instance {i}: max rel err {:.3e} at coordinate {}",
                r.max_rel_err, r.worst_index
            ));
        }
        worst = worst.max(r.max_rel_err);
    }
    Ok(format!("{n} instances, max rel err {worst:.3e}"))
}

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub fn run_selfcheck(opts: &SelfcheckOptions) -> SelfcheckReport {
    let start = Instant::now();
    let mut suite = Suite { checks: Vec::new() };
    let n = opts.instances.max(1);
    let rng_for = |salt: u64| ChaCha8Rng::seed_from_u64(opts.seed ^ salt);

    let mut rng = rng_for(1);
    suite.run("gradient.object", || {
        grad_suite(n, |_| {
            let b = random_align_batch(&mut rng, 16, 5);
            let pairs: Vec<BoxPair> = b.object_pairs.iter().map(|p| p.boxes).collect();
            let w = iou_weights(&pairs)?;
            let v: Vec<EmbedVec> = b.object_pairs.iter().map(|p| p.visual.clone()).collect();
            let o: Vec<EmbedVec> = b.object_pairs.iter().map(|p| p.text.clone()).collect();
            check_pair_loss(&v, &o, |v, o| object_loss(v, o, &w))
        })
    });
    let mut rng = rng_for(2);
    suite.run("gradient.region_hard", || {
        grad_suite(n, |_| {
            let b = random_align_batch(&mut rng, 16, 5);
            let v: Vec<EmbedVec> = b.region_items.iter().map(|r| r.visual.clone()).collect();
            check_pair_loss(&v, &b.phrases, |v, p| {
                region_hard_loss(v, p, &b.hard_assignment)
            })
        })
    });
    let mut rng = rng_for(3);
    suite.run("gradient.region_nce", || {
        grad_suite(n, |_| {
            let b = random_align_batch(&mut rng, 16, 5);
            let tau = rng.gen_range(0.05..1.0);
            let v: Vec<EmbedVec> = b.region_items.iter().map(|r| r.visual.clone()).collect();
            check_pair_loss(&v, &b.phrases, |v, p| {
                region_nce_loss(v, p, &b.positive_index, tau)
            })
        })
    });
    let mut rng = rng_for(4);
    suite.run("gradient.global", || {
        grad_suite(n, |_| {
            let b = random_align_batch(&mut rng, 8, 1);
            check_pair_loss(&[b.global_visual], &[b.global_text], |g, t| {
                global_loss(&g[0], &t[0])
            })
        })
    });
    let mut rng = rng_for(5);
    let corrupt = opts.corrupt_gradient;
    suite.run("gradient.align", || {
        grad_suite(n, |_| {
            let b = random_align_batch(&mut rng, 16, 5);
            let w = random_weights(&mut rng);
            let mut r = check_align_gradient(&b, &w)?;
            if corrupt {
                // Test hook: pretend the first partial was off by 10%.
                r.max_rel_err = r.max_rel_err.max(0.1);
                r.worst_index = 0;
            }
            Ok(r)
        })
    });
    let mut rng = rng_for(6);
    suite.run("gradient.caption", || {
        grad_suite(n, |_| check_caption_gradient(&mut rng))
    });
    suite.run("gradient.total", || {
        grad_suite(n.min(5), |i| {
            check_total_gradient(opts.seed.wrapping_add(i as u64), &AlignWeights::default())
        })
    });

    let mut rng = rng_for(7);
    suite.run("bounds.align", || {
        for i in 0..100 {
            let b = random_align_batch(&mut rng, 16, 5);
            let w = random_weights(&mut rng);
            let l = e2s(align_loss(&b, &w))?;
            let in02 = |v: f64| (0.0..=2.0 + 1e-12).contains(&v);
            ensure(
                in02(l.l_obj) && in02(l.l_reg_hard) && in02(l.l_glob) && l.l_reg_nce >= 0.0,
                format!("instance {i}: loss out of range {l:?}"),
            )?;
            let recomposed = w.alpha * l.l_obj + w.beta * l.l_reg + w.gamma * l.l_glob;
            ensure(
                (recomposed - l.l_align).abs() <= 1e-12,
                format!(
                    "instance {i}: recomposition off by {}",
                    recomposed - l.l_align
                ),
            )?;
        }
        Ok("100 instances".into())
    });

    let mut rng = rng_for(8);
    suite.run("iou.weights", || {
        let a = Roi::new(0, 0, 2, 2).map_err(|e| e.to_string())?;
        let b = Roi::new(1, 1, 3, 3).map_err(|e| e.to_string())?;
        ensure((iou(&a, &b) - 1.0 / 7.0).abs() <= 1e-12, "IoU example")?;
        let far = Roi::new(5, 5, 6, 6).map_err(|e| e.to_string())?;
        let disjoint = [
            BoxPair {
                predicted: a,
                ground_truth: far,
            },
            BoxPair {
                predicted: b,
                ground_truth: far,
            },
        ];
        ensure(
            e2s(iou_weights(&disjoint))? == vec![0.5, 0.5],
            "zero-IoU fallback",
        )?;
        for _ in 0..100 {
            let batch = random_align_batch(&mut rng, 2, 5);
            let pairs: Vec<BoxPair> = batch.object_pairs.iter().map(|p| p.boxes).collect();
            let w = e2s(iou_weights(&pairs))?;
            ensure(
                (w.iter().sum::<f64>() - 1.0).abs() <= 1e-12,
                "weights do not sum to 1",
            )?;
        }
        Ok("100 box sets".into())
    });

    suite.run("metrics.identities", || {
        let c = Caption::new("a plane parked beside the long runway");
        let refs = e2s(RefSet::new(vec![c.clone()]))?;
        for n in 1..=4 {
            ensure(
                (e2s(bleu(&c, &refs, n, None))? - 1.0).abs() <= 1e-9,
                format!("BLEU-{n} self-match"),
            )?;
        }
        ensure(
            (rouge_l(&c, &c, 1.0) - 1.0).abs() <= 1e-9,
            "ROUGE-L self-match",
        )?;
        let t = TripleSet::new([("plane", "on", "runway")]);
        ensure((spice_f1(&t, &t) - 1.0).abs() <= 1e-9, "SPICE self-match")?;
        let b1 = e2s(bleu(
            &Caption::new("the cat sat"),
            &e2s(RefSet::new(vec![Caption::new("the cat sat on the mat")]))?,
            1,
            None,
        ))?;
        ensure(
            (b1 - (-1f64).exp()).abs() <= 1e-6,
            format!("BLEU-1 example {b1}"),
        )?;
        let rl = rouge_l(&Caption::new("a b c"), &Caption::new("a c"), 1.0);
        ensure((rl - 0.8).abs() <= 1e-6, format!("ROUGE-L example {rl}"))?;
        let sp = spice_f1(
            &TripleSet::new([("a", "r", "b")]),
            &TripleSet::new([("a", "r", "b"), ("c", "r", "d")]),
        );
        ensure((sp - 2.0 / 3.0).abs() <= 1e-6, "SPICE example")?;
        let ranks = [1, 3, 20];
        let r: Vec<f64> = [1, 5, 10]
            .iter()
            .map(|&k| recall_at_k(&ranks, k).unwrap_or(-1.0))
            .collect();
        ensure(
            (r[0] - 1.0 / 3.0).abs() <= 1e-6
                && (r[1] - 2.0 / 3.0).abs() <= 1e-6
                && (r[2] - 2.0 / 3.0).abs() <= 1e-6,
            format!("R@k example {r:?}"),
        )?;
        Ok("self-match and worked examples".into())
    });

    let mut rng = rng_for(9);
    suite.run("dris.allocation", || {
        for i in 0..20 {
            let s = e2s(FeatureGrid::from_fn(6, 7, 1, |_, _, _| {
                rng.gen_range(0.0..1.0)
            }))?;
            let tau = rng.gen_range(0.0..1.0);
            let m = e2s(resolution_allocate(&s, tau))?;
            for r in 0..6 {
                for c in 0..7 {
                    let want = if s.get(r, c, 0) >= tau {
                        Resolution::High
                    } else {
                        Resolution::Low
                    };
                    ensure(m.get(r, c) == want, format!("map {i} cell ({r},{c})"))?;
                }
            }
        }
        Ok("20 maps".into())
    });
    let mut rng = rng_for(10);
    suite.run("dris.rois", || {
        for i in 0..20 {
            let (h, w) = (rng.gen_range(4..12), rng.gen_range(4..12));
            let (sr, sc) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let spike = e2s(FeatureGrid::from_fn(h, w, 1, |r, c, _| {
                if (r, c) == (sr, sc) {
                    1.0
                } else {
                    0.0
                }
            }))?;
            let cfg = DrisConfig {
                k: 1,
                roi_size: (3, 3),
                ..DrisConfig::default()
            };
            let rois = e2s(select_rois(&spike, &cfg))?;
            ensure(
                rois.len() == 1 && rois[0].contains(sr, sc),
                format!("spike {i} not covered"),
            )?;
            let scaled = e2s(spike.scaled(rng.gen_range(0.01..100.0)))?;
            ensure(
                e2s(select_rois(&scaled, &cfg))? == rois,
                format!("rescale changed map {i}"),
            )?;
        }
        for n in [2usize, 4, 8] {
            let cfg = DrisConfig {
                n,
                ..DrisConfig::default()
            };
            let rep = cost_report(64, 96, &cfg, &[]);
            ensure(
                rep.coarse_cell_ops * (n * n) as u64 == rep.full_res_cell_ops,
                format!("coarse cost for n={n}"),
            )?;
        }
        Ok("spikes, rescaling, cost".into())
    });

    suite.run("schedule", || {
        let cfg = TrainConfig::default();
        let got = [lr_at(100, &cfg), lr_at(1000, &cfg), lr_at(550, &cfg)];
        let got: Vec<f64> = got.into_iter().map(|r| r.unwrap_or(f64::NAN)).collect();
        ensure(got == [3e-4, 0.0, 1.5e-4], format!("spot values {got:?}"))?;
        Ok("lr_at(100), lr_at(1000), lr_at(550)".into())
    });

    suite.run("shape.patches", || {
        let full = ToyModelConfig::full_scale();
        ensure(full.num_patches() == 196, "full-scale patch count")?;
        ensure(ToyModelConfig::toy().num_patches() == 16, "toy patch count")?;
        Ok("196 / 16".into())
    });

    let mut rng = rng_for(11);
    suite.run("serialization", || {
        for i in 0..20 {
            let (h, w, c) = (
                rng.gen_range(1..6u32),
                rng.gen_range(1..6u32),
                rng.gen_range(1..4u32),
            );
            let p = FgrdPayload {
                height: h,
                width: w,
                channels: c,
                data: (0..h * w * c)
                    .map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff))
                    .collect(),
            };
            let mut buf = Vec::new();
            e2s(p.write_to(&mut buf))?;
            let back = e2s(FgrdPayload::read_from(buf.as_slice()))?;
            let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            ensure(
                bits(&back.data) == bits(&p.data),
                format!("FGRD payload {i}"),
            )?;

            let e = e2s(TensorEntry::new(
                format!("t{i}"),
                vec![h as usize, w as usize],
                p.data[..(h * w) as usize].to_vec(),
            ))?;
            let mut buf = Vec::new();
            e2s(write_entries(&mut buf, std::slice::from_ref(&e)))?;
            let back = e2s(read_entries(buf.as_slice()))?;
            ensure(
                back.len() == 1 && bits(&back[0].data) == bits(&e.data),
                format!("TVLM payload {i}"),
            )?;
        }
        Ok("20 FGRD and TVLM payloads".into())
    });

    if opts.training {
        suite.run("train.contract", || {
            let cfg = TrainConfig {
                seed: opts.seed,
                ..TrainConfig::default()
            };
            let run = || -> Result<crate::toyvlm::TrainReport> {
                let model = ToyModelConfig::toy();
                let data = synthetic_dataset(&model, 32, cfg.seed)?;
                let mut params = ToyVlmParams::init(&model, cfg.seed.wrapping_add(1))?;
                train(&data, &mut params, &cfg, &AlignWeights::default())
            };
            let first = e2s(run())?;
            let n = first.steps.len();
            let early = first.window_mean(10, 20).unwrap_or(f64::NAN);
            let late = first.window_mean(n - 10, n).unwrap_or(f64::NAN);
            ensure(
                late <= 0.5 * early,
                format!("late/early = {:.3}", late / early),
            )?;
            ensure(first.frozen_unchanged(), "frozen parameters changed")?;
            ensure(
                e2s(run())?.loss_csv() == first.loss_csv(),
                "loss CSV not reproducible",
            )?;
            Ok(format!("late/early = {:.3}", late / early))
        });
    }

    let passed = suite.checks.iter().filter(|c| c.passed).count();
    SelfcheckReport {
        failed: suite.checks.len() - passed,
        passed,
        checks: suite.checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}
