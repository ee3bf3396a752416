//! Training loop, optimizer and the synthetic dataset generator.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{AlignWeights, BoxPair, RegionMask};
use crate::error::{invalid, Error, Result};
use crate::grid::{EmbedVec, FeatureGrid, Roi};

use super::model::{
    forward, AlignTargets, ParamId, TokenSeq, ToyModelConfig, ToyVlmParams, TrainItem,
};
use super::schedule::lr_at;
use super::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Length of the learning-rate schedule.
    pub total_steps: usize,
    /// Optimizer steps actually taken; at most `total_steps`.
    pub steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(skip)]
    #[doc(hidden)]
    pub inject_nonfinite_at: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            peak_lr: 3e-4,
            warmup_steps: 100,
            total_steps: 1000,
            steps: 200,
            weight_decay: 0.01,
            seed: 0,
            inject_nonfinite_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be positive"));
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(invalid!("peak_lr must be finite and >= 0"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(invalid!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps,
                self.total_steps
            ));
        }
        if self.steps > self.total_steps {
            return Err(invalid!(
                "steps {} exceed total_steps {}",
                self.steps,
                self.total_steps
            ));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(invalid!("weight_decay must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay over the trainable tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ToyVlmParams, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update of every trainable tensor; frozen tensors are not touched.
    pub fn step(&mut self, params: &mut ToyVlmParams, grads: &[Matrix], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, id) in ParamId::ALL.iter().enumerate() {
            if !id.group().is_trainable() {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = params.get_mut(*id).data_mut();
            for j in 0..theta.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                theta[j] -= lr * (update + self.weight_decay * theta[j]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub caption: f64,
    pub align: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub frozen_checksum_before: u64,
    pub frozen_checksum_after: u64,
    pub trainable_checksum_before: u64,
    pub trainable_checksum_after: u64,
}

impl TrainReport {
    /// `step,lr,total,caption,align` with shortest round-trip float text.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,lr,total,caption,align\n");
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.step, r.lr, r.total, r.caption, r.align
            );
        }
        s
    }

    /// Mean total loss over steps `[from, to)`.
    pub fn window_mean(&self, from: usize, to: usize) -> Option<f64> {
        let w: Vec<f64> = self
            .steps
            .iter()
            .filter(|r| r.step >= from && r.step < to)
            .map(|r| r.total)
            .collect();
        (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
    }

    pub fn frozen_unchanged(&self) -> bool {
        self.frozen_checksum_before == self.frozen_checksum_after
    }
}

/// Train the projection and retrieval token in place.
///
/// Items are visited in a per-epoch shuffled order; each step averages the
/// loss and gradients over one batch. The update at step `s` uses
/// `lr_at(s + 1)`, so the first step runs at a nonzero rate.
pub fn train(
    dataset: &[TrainItem],
    params: &mut ToyVlmParams,
    cfg: &TrainConfig,
    weights: &AlignWeights,
) -> Result<TrainReport> {
    cfg.validate()?;
    weights.validate()?;
    if dataset.is_empty() {
        return Err(invalid!("empty training set"));
    }
    let frozen_before = params.frozen_checksum();
    let trainable_before = params.trainable_checksum();
    let mut opt = AdamW::new(params, cfg.weight_decay);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                order.shuffle(&mut rng);
                cursor = 0;
                epoch += 1;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        let (mut total, mut caption, mut align) = (0.0, 0.0, 0.0);
        for &i in &batch {
            let out = forward(params, &dataset[i], weights, true)?;
            total += scale * out.total;
            caption += scale * out.caption;
            align += scale * out.align.as_ref().map_or(0.0, |a| a.l_align);
            if let Some(g) = out.grads {
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_assign_scaled(gi, scale);
                }
            }
        }
        if cfg.inject_nonfinite_at == Some(step) {
            total = f64::NAN;
        }
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("total={total} caption={caption} align={align}"),
            });
        }
        let lr = lr_at(step + 1, cfg)?;
        opt.step(params, &grads, lr);
        records.push(StepRecord {
            step,
            lr,
            total,
            caption,
            align,
        });
    }

    Ok(TrainReport {
        steps: records,
        frozen_checksum_before: frozen_before,
        frozen_checksum_after: params.frozen_checksum(),
        trainable_checksum_before: trainable_before,
        trainable_checksum_after: params.trainable_checksum(),
    })
}

/// Number of object classes planted by [`synthetic_dataset`].
pub const SYNTHETIC_CLASSES: usize = 4;

/// Seeded image/caption pairs with planted structure.
///
/// Each image shows one object class as a rectangle of patches drawn from a
/// per-class prototype over a per-class background prototype. Its caption
/// alternates the two tokens owned by that class. Alignment targets mark the
/// object box, an object region and a background region, with phrase
/// embeddings drawn per class.
pub fn synthetic_dataset(cfg: &ToyModelConfig, pairs: usize, seed: u64) -> Result<Vec<TrainItem>> {
    cfg.validate()?;
    if cfg.vocab < 2 * SYNTHETIC_CLASSES {
        return Err(invalid!(
            "vocab {} too small for {SYNTHETIC_CLASSES} classes",
            cfg.vocab
        ));
    }
    let side = cfg.grid_side();
    if side < 2 {
        return Err(invalid!("patch grid must be at least 2x2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pd = cfg.patch_dim();
    let d = cfg.embed_dim;
    let vec_of = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let protos: Vec<Vec<f64>> = (0..SYNTHETIC_CLASSES)
        .map(|_| vec_of(pd, &mut rng))
        .collect();
    let backgrounds: Vec<Vec<f64>> = (0..SYNTHETIC_CLASSES)
        .map(|_| vec_of(pd, &mut rng))
        .collect();
    let class_text: Vec<Vec<f64>> = (0..SYNTHETIC_CLASSES)
        .map(|_| vec_of(d, &mut rng))
        .collect();
    let background_text = vec_of(d, &mut rng);
    let caption_len = cfg.max_text_len.min(8);

    let mut items = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let class = i % SYNTHETIC_CLASSES;
        let h = rng.gen_range(1..=side / 2 + 1).min(side);
        let w = rng.gen_range(1..=side / 2 + 1).min(side);
        let r0 = rng.gen_range(0..=side - h);
        let c0 = rng.gen_range(0..=side - w);
        let gt = Roi::new(r0, c0, r0 + h, c0 + w)?;

        let p = cfg.patch_size;
        let image =
            FeatureGrid::from_fn(cfg.image_size, cfg.image_size, cfg.channels, |r, c, ch| {
                let local = ((r % p) * p + c % p) * cfg.channels + ch;
                let proto = if gt.contains(r / p, c / p) {
                    &protos[class]
                } else {
                    &backgrounds[class]
                };
                proto[local]
            })?;
        let noise: Vec<f64> = (0..image.data().len())
            .map(|_| 0.1 * rng.gen_range(-1.0..1.0))
            .collect();
        let image = FeatureGrid::new(
            image.height(),
            image.width(),
            image.channels(),
            image
                .data()
                .iter()
                .zip(&noise)
                .map(|(a, b)| a + b)
                .collect(),
        )?;

        let ids: Vec<usize> = (0..caption_len).map(|k| 2 * class + k % 2).collect();
        let tokens = TokenSeq::new(ids, cfg)?;

        // Predicted box: ground truth shifted by at most one patch.
        let dr = rng.gen_range(0..=1usize);
        let dc = rng.gen_range(0..=1usize);
        let pr0 = (r0 + dr).min(side - h);
        let pc0 = (c0 + dc).min(side - w);
        let predicted = Roi::new(pr0, pc0, pr0 + h, pc0 + w)?;

        let mut regions = vec![RegionMask::from_roi(side, side, &gt)?];
        let mut positives = vec![0];
        if gt.area() < side * side {
            let outside = (0..side * side)
                .map(|k| !gt.contains(k / side, k % side))
                .collect();
            regions.push(RegionMask::new(side, side, outside)?);
            positives.push(1);
        }
        let distractor = class_text[(class + 1) % SYNTHETIC_CLASSES].clone();
        let phrases = vec![
            EmbedVec::new(class_text[class].clone())?,
            EmbedVec::new(background_text.clone())?,
            EmbedVec::new(distractor)?,
        ];

        items.push(TrainItem {
            image,
            tokens,
            targets: AlignTargets {
                object_boxes: vec![BoxPair {
                    predicted,
                    ground_truth: gt,
                }],
                object_text: vec![EmbedVec::new(class_text[class].clone())?],
                region_masks: regions,
                phrases,
                hard_assignment: positives.clone(),
                positive_index: positives,
            },
        });
    }
    Ok(items)
}

/// Deterministic 7:2:1 train/validation/test split of `0..n` after a seeded
/// shuffle. Rounding remainders go to the training share.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = n * 2 / 10;
    let n_test = n / 10;
    let n_train = n - n_val - n_test;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    (idx, val, test)
}
