//! Multi-scale vision-language alignment losses.
//!
//! Three tiers are scored against their text counterparts:
//!
//! * object level: RoI-pooled box features vs. entity embeddings, cosine
//!   similarity weighted by each box's IoU with its ground truth;
//! * local-region level: masked-pooled region features vs. phrase embeddings,
//!   a hard-assignment cosine term blended with a region-anchored InfoNCE term;
//! * global level: a spatial-pyramid-pooled image vector vs. the sentence
//!   vector.
//!
//! Every loss returns its value together with exact partial derivatives with
//! respect to each raw (unnormalized) embedding it consumed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::grid::{
    self, crop, l2_normalize, layer_norm, pool, roi_pool, EmbedVec, FeatureGrid, PoolMode, Roi,
};

/// LayerNorm epsilon used after the global projection.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `y = W x + b` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Projector {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(invalid!("projector dims must be positive"));
        }
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(shape_err!(
                "projector {out_dim}x{in_dim} got {} weights and {} biases",
                weight.len(),
                bias.len()
            ));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            in_dim: dim,
            out_dim: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    /// Averages `groups` consecutive blocks of `dim` values into one block.
    /// Maps a concatenation of pooled cells onto its per-channel mean.
    pub fn block_mean(dim: usize, groups: usize) -> Self {
        let in_dim = dim * groups;
        let mut weight = vec![0.0; in_dim * dim];
        for o in 0..dim {
            for g in 0..groups {
                weight[o * in_dim + g * dim + o] = 1.0 / groups as f64;
            }
        }
        Self {
            in_dim,
            out_dim: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(shape_err!(
                "projector expects {} inputs, got {}",
                self.in_dim,
                x.len()
            ));
        }
        Ok((0..self.out_dim)
            .map(|o| {
                grid::dot(&self.weight[o * self.in_dim..(o + 1) * self.in_dim], x) + self.bias[o]
            })
            .collect())
    }
}

/// Cosine similarity. Fails on a zero-norm operand.
pub fn cosine(u: &EmbedVec, v: &EmbedVec) -> Result<f64> {
    cosine_raw(u.values(), v.values()).map(|(c, _, _)| c)
}

/// Cosine plus its gradients with respect to both raw operands:
/// `d cos / du = v / (|u||v|) - cos * u / |u|^2`.
pub(crate) fn cosine_raw(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() {
        return Err(shape_err!("cosine of dims {} and {}", u.len(), v.len()));
    }
    let nu = grid::norm(u);
    let nv = grid::norm(v);
    if !(nu > 0.0) || !(nv > 0.0) {
        return Err(Error::DegenerateVector("cosine of a zero vector".into()));
    }
    let c = (grid::dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    let du = u
        .iter()
        .zip(v)
        .map(|(a, b)| b / (nu * nv) - c * a / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(a, b)| a / (nu * nv) - c * b / (nv * nv))
        .collect();
    Ok((c, du, dv))
}

/// Intersection over union; disjoint boxes give 0.
pub fn iou(a: &Roi, b: &Roi) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A detector box and its ground-truth counterpart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPair {
    pub predicted: Roi,
    pub ground_truth: Roi,
}

/// `w_p = IoU_p / sum_q IoU_q`, uniform `1/P` when every IoU is zero.
pub fn iou_weights(pairs: &[BoxPair]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(invalid!("iou_weights needs at least one pair"));
    }
    let ious: Vec<f64> = pairs
        .iter()
        .map(|p| iou(&p.predicted, &p.ground_truth))
        .collect();
    let total: f64 = ious.iter().sum();
    if total > 0.0 {
        Ok(ious.into_iter().map(|v| v / total).collect())
    } else {
        Ok(vec![1.0 / pairs.len() as f64; pairs.len()])
    }
}

/// Crop each box out of `v`, adaptive-average-pool it to `pool_size`, flatten
/// and project.
pub fn object_features(
    v: &FeatureGrid,
    boxes: &[Roi],
    pool_size: (usize, usize),
    projector: &Projector,
) -> Result<Vec<EmbedVec>> {
    boxes
        .iter()
        .map(|b| {
            let cropped = crop(v, b)?;
            let pooled = roi_pool(&cropped, pool_size.0, pool_size.1)?;
            EmbedVec::new(projector.apply(pooled.data())?)
        })
        .collect()
}

/// Pooled-and-flattened box features before projection.
pub fn pooled_box_features(
    v: &FeatureGrid,
    b: &Roi,
    pool_size: (usize, usize),
) -> Result<Vec<f64>> {
    Ok(roi_pool(&crop(v, b)?, pool_size.0, pool_size.1)?.into_data())
}

pub fn project_text(e: &EmbedVec, projector: &Projector) -> Result<EmbedVec> {
    EmbedVec::new(projector.apply(e.values())?)
}

/// Loss value with gradients for the visual-side and text-side inputs,
/// in the order the inputs were given.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub grad_visual: Vec<Vec<f64>>,
    pub grad_text: Vec<Vec<f64>>,
}

fn check_dims(sets: &[&[EmbedVec]]) -> Result<usize> {
    let mut dim = None;
    for set in sets {
        for e in *set {
            match dim {
                None => dim = Some(e.dim()),
                Some(d) if d != e.dim() => {
                    return Err(shape_err!("embedding dims differ: {d} vs {}", e.dim()))
                }
                _ => {}
            }
        }
    }
    dim.ok_or_else(|| invalid!("no embeddings supplied"))
}

/// `1 - (1/P) sum_p w_p cos(v_p, o_p)`; the `1/P` factor is kept alongside
/// the normalized weights.
pub fn object_loss(v_objs: &[EmbedVec], o_objs: &[EmbedVec], weights: &[f64]) -> Result<PairLoss> {
    let p = v_objs.len();
    if p == 0 || o_objs.len() != p || weights.len() != p {
        return Err(invalid!(
            "object_loss needs equal nonzero counts, got {} visual, {} text, {} weights",
            p,
            o_objs.len(),
            weights.len()
        ));
    }
    check_dims(&[v_objs, o_objs])?;
    let scale = 1.0 / p as f64;
    let mut acc = 0.0;
    let mut gv = Vec::with_capacity(p);
    let mut go = Vec::with_capacity(p);
    for ((v, o), &w) in v_objs.iter().zip(o_objs).zip(weights) {
        let (c, dv, d_o) = cosine_raw(v.values(), o.values())?;
        acc += w * c;
        let k = -scale * w;
        gv.push(dv.into_iter().map(|g| k * g).collect());
        go.push(d_o.into_iter().map(|g| k * g).collect());
    }
    Ok(PairLoss {
        value: 1.0 - scale * acc,
        grad_visual: gv,
        grad_text: go,
    })
}

/// Binary membership mask over a grid, with at least one member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    membership: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, membership: Vec<bool>) -> Result<Self> {
        if membership.len() != height * width {
            return Err(shape_err!(
                "mask {height}x{width} got {} cells",
                membership.len()
            ));
        }
        if !membership.iter().any(|&m| m) {
            return Err(invalid!("region mask has no member cells"));
        }
        Ok(Self {
            height,
            width,
            membership,
        })
    }

    pub fn from_roi(height: usize, width: usize, roi: &Roi) -> Result<Self> {
        let membership = (0..height * width)
            .map(|i| roi.contains(i / width, i % width))
            .collect();
        Self::new(height, width, membership)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn membership(&self) -> &[bool] {
        &self.membership
    }

    pub fn is_member(&self, r: usize, c: usize) -> bool {
        self.membership[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.membership.iter().filter(|&&m| m).count()
    }
}

/// Masked channel mean over member cells, before projection.
pub fn masked_mean(v: &FeatureGrid, mask: &RegionMask) -> Result<Vec<f64>> {
    if mask.height != v.height() || mask.width != v.width() {
        return Err(shape_err!(
            "mask {}x{} vs grid {}x{}",
            mask.height,
            mask.width,
            v.height(),
            v.width()
        ));
    }
    let mut acc = vec![0.0; v.channels()];
    for (i, _) in mask.membership.iter().enumerate().filter(|(_, &m)| m) {
        for (a, x) in acc.iter_mut().zip(v.cell(i / v.width(), i % v.width())) {
            *a += x;
        }
    }
    let n = mask.count() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

pub fn region_features(
    v: &FeatureGrid,
    masks: &[RegionMask],
    projector: &Projector,
) -> Result<Vec<EmbedVec>> {
    masks
        .iter()
        .map(|m| EmbedVec::new(projector.apply(&masked_mean(v, m)?)?))
        .collect()
}

fn check_indices(idx: &[usize], k: usize, m: usize, what: &str) -> Result<()> {
    if idx.len() != k {
        return Err(invalid!("{what} has {} entries for {k} regions", idx.len()));
    }
    if let Some(bad) = idx.iter().find(|&&j| j >= m) {
        return Err(invalid!("{what} index {bad} out of range for {m} phrases"));
    }
    Ok(())
}

/// `1 - (1/K) sum_k cos(v_k, p_{pi(k)})`.
pub fn region_hard_loss(
    v_regions: &[EmbedVec],
    phrases: &[EmbedVec],
    assignment: &[usize],
) -> Result<PairLoss> {
    let k = v_regions.len();
    if k == 0 || phrases.is_empty() {
        return Err(invalid!("region_hard_loss needs K >= 1 and M >= 1"));
    }
    check_indices(assignment, k, phrases.len(), "assignment")?;
    let dim = check_dims(&[v_regions, phrases])?;
    let scale = 1.0 / k as f64;
    let mut acc = 0.0;
    let mut gv = Vec::with_capacity(k);
    let mut gp = vec![vec![0.0; dim]; phrases.len()];
    for (v, &j) in v_regions.iter().zip(assignment) {
        let (c, dv, dp) = cosine_raw(v.values(), phrases[j].values())?;
        acc += c;
        gv.push(dv.into_iter().map(|g| -scale * g).collect());
        for (a, g) in gp[j].iter_mut().zip(dp) {
            *a -= scale * g;
        }
    }
    Ok(PairLoss {
        value: 1.0 - scale * acc,
        grad_visual: gv,
        grad_text: gp,
    })
}

/// Region-anchored InfoNCE over raw dot-product scores `s_kj = v_k . p_j / tau`.
pub fn region_nce_loss(
    v_regions: &[EmbedVec],
    phrases: &[EmbedVec],
    positives: &[usize],
    tau_temp: f64,
) -> Result<PairLoss> {
    let k = v_regions.len();
    let m = phrases.len();
    if k == 0 || m == 0 {
        return Err(invalid!("region_nce_loss needs K >= 1 and M >= 1"));
    }
    if !(tau_temp > 0.0) {
        return Err(invalid!("temperature must be > 0, got {tau_temp}"));
    }
    check_indices(positives, k, m, "positive index")?;
    let dim = check_dims(&[v_regions, phrases])?;
    let scale = 1.0 / k as f64;
    let mut total = 0.0;
    let mut gv = Vec::with_capacity(k);
    let mut gp = vec![vec![0.0; dim]; m];
    for (v, &y) in v_regions.iter().zip(positives) {
        let scores: Vec<f64> = phrases.iter().map(|p| v.dot(p) / tau_temp).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += max + z.ln() - scores[y];

        let mut g_row = vec![0.0; dim];
        for (j, p) in phrases.iter().enumerate() {
            let d_score = scale * (exps[j] / z - if j == y { 1.0 } else { 0.0 });
            for d in 0..dim {
                g_row[d] += d_score * p.values()[d] / tau_temp;
                gp[j][d] += d_score * v.values()[d] / tau_temp;
            }
        }
        gv.push(g_row);
    }
    Ok(PairLoss {
        value: (scale * total).max(0.0),
        grad_visual: gv,
        grad_text: gp,
    })
}

/// `mu * hard + (1 - mu) * nce`.
pub fn region_loss(hard: f64, nce: f64, mu: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(invalid!("mu must lie in [0, 1], got {mu}"));
    }
    Ok(mu * hard + (1.0 - mu) * nce)
}

/// Greedy argmax-cosine phrase assignment per region.
pub fn greedy_assignment(v_regions: &[EmbedVec], phrases: &[EmbedVec]) -> Result<Vec<usize>> {
    if phrases.is_empty() {
        return Err(invalid!("no phrases to assign"));
    }
    v_regions
        .iter()
        .map(|v| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, p) in phrases.iter().enumerate() {
                let c = cosine(v, p)?;
                if c > best.1 {
                    best = (j, c);
                }
            }
            Ok(best.0)
        })
        .collect()
}

/// Concatenation of adaptive-average-pooled cells for each pyramid level.
pub fn spp_concat(v: &FeatureGrid, levels: &[usize]) -> Result<Vec<f64>> {
    if levels.is_empty() {
        return Err(invalid!("spp needs at least one level"));
    }
    let min_side = v.height().min(v.width());
    let mut out = Vec::new();
    for &l in levels {
        if l == 0 || l > min_side {
            return Err(invalid!(
                "spp level {l} invalid for {}x{} grid",
                v.height(),
                v.width()
            ));
        }
        out.extend_from_slice(pool(v, l, l, PoolMode::Average)?.data());
    }
    Ok(out)
}

/// Global image vector: pyramid pooling, projection, LayerNorm, L2 norm.
pub fn spp(v: &FeatureGrid, levels: &[usize], projector: &Projector) -> Result<EmbedVec> {
    let projected = EmbedVec::new(projector.apply(&spp_concat(v, levels)?)?)?;
    l2_normalize(&layer_norm(&projected, LAYER_NORM_EPS)?)
}

/// `1 - cos(g, t_cls)`.
pub fn global_loss(g: &EmbedVec, t_cls: &EmbedVec) -> Result<PairLoss> {
    let (c, dg, dt) = cosine_raw(g.values(), t_cls.values())?;
    Ok(PairLoss {
        value: 1.0 - c,
        grad_visual: vec![dg.into_iter().map(|x| -x).collect()],
        grad_text: vec![dt.into_iter().map(|x| -x).collect()],
    })
}

/// Loss-combination weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub mu: f64,
    pub tau_temp: f64,
    pub delta: f64,
}

impl Default for AlignWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            gamma: 1.0 / 3.0,
            mu: 0.5,
            tau_temp: 0.07,
            delta: 0.5,
        }
    }
}

impl AlignWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(invalid!("mu must lie in [0, 1], got {}", self.mu));
        }
        if !(self.tau_temp > 0.0) {
            return Err(invalid!("tau_temp must be > 0"));
        }
        if !(self.delta > 0.0) {
            return Err(invalid!("delta must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPair {
    pub boxes: BoxPair,
    pub visual: EmbedVec,
    pub text: EmbedVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionItem {
    pub mask: RegionMask,
    pub visual: EmbedVec,
}

/// One image's alignment payload.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignBatch {
    pub visual_grid: FeatureGrid,
    pub object_pairs: Vec<ObjectPair>,
    pub region_items: Vec<RegionItem>,
    pub phrases: Vec<EmbedVec>,
    pub positive_index: Vec<usize>,
    pub hard_assignment: Vec<usize>,
    pub global_visual: EmbedVec,
    pub global_text: EmbedVec,
}

impl AlignBatch {
    /// Checks index ranges and that every embedding shares one dimension.
    pub fn validate(&self) -> Result<()> {
        let k = self.region_items.len();
        let m = self.phrases.len();
        if k > 0 {
            if m == 0 {
                return Err(invalid!("{k} regions but no phrases"));
            }
            check_indices(&self.positive_index, k, m, "positive index")?;
            check_indices(&self.hard_assignment, k, m, "hard assignment")?;
        }
        let mut all: Vec<EmbedVec> = vec![self.global_visual.clone(), self.global_text.clone()];
        for p in &self.object_pairs {
            all.push(p.visual.clone());
            all.push(p.text.clone());
        }
        all.extend(self.region_items.iter().map(|r| r.visual.clone()));
        all.extend(self.phrases.iter().cloned());
        check_dims(&[&all])?;
        Ok(())
    }
}

/// Identity of an embedding inside an [`AlignBatch`], for gradient lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmbedKey {
    ObjectVisual(usize),
    ObjectText(usize),
    RegionVisual(usize),
    Phrase(usize),
    GlobalVisual,
    GlobalText,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_obj: f64,
    pub l_reg_hard: f64,
    pub l_reg_nce: f64,
    pub l_reg: f64,
    pub l_glob: f64,
    pub l_align: f64,
    pub weights: AlignWeights,
    pub iou_weights: Vec<f64>,
    /// `d l_align / d embedding` for every embedding in the batch.
    pub gradients: BTreeMap<EmbedKey, Vec<f64>>,
}

fn accumulate(table: &mut BTreeMap<EmbedKey, Vec<f64>>, key: EmbedKey, grad: &[f64], scale: f64) {
    let dim = grad.len();
    let slot = table.entry(key).or_insert_with(|| vec![0.0; dim]);
    for (s, g) in slot.iter_mut().zip(grad) {
        *s += scale * g;
    }
}

/// Weighted three-tier alignment objective with the full gradient table.
///
/// A tier whose inputs are empty contributes 0 and is only allowed when its
/// weight is zero.
pub fn align_loss(batch: &AlignBatch, weights: &AlignWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    batch.validate()?;
    let mut grads = BTreeMap::new();
    let mut zero = |key: EmbedKey, dim: usize| {
        grads.entry(key).or_insert_with(|| vec![0.0; dim]);
    };
    let dim = batch.global_visual.dim();
    zero(EmbedKey::GlobalVisual, dim);
    zero(EmbedKey::GlobalText, dim);
    for p in 0..batch.object_pairs.len() {
        zero(EmbedKey::ObjectVisual(p), dim);
        zero(EmbedKey::ObjectText(p), dim);
    }
    for k in 0..batch.region_items.len() {
        zero(EmbedKey::RegionVisual(k), dim);
    }
    for j in 0..batch.phrases.len() {
        zero(EmbedKey::Phrase(j), dim);
    }

    let (l_obj, iou_w) = if batch.object_pairs.is_empty() {
        if weights.alpha != 0.0 {
            return Err(invalid!("object tier weighted but batch has no objects"));
        }
        (0.0, Vec::new())
    } else {
        let pairs: Vec<BoxPair> = batch.object_pairs.iter().map(|p| p.boxes).collect();
        let w = iou_weights(&pairs)?;
        let v: Vec<EmbedVec> = batch
            .object_pairs
            .iter()
            .map(|p| p.visual.clone())
            .collect();
        let o: Vec<EmbedVec> = batch.object_pairs.iter().map(|p| p.text.clone()).collect();
        let loss = object_loss(&v, &o, &w)?;
        for (p, (gv, go)) in loss.grad_visual.iter().zip(&loss.grad_text).enumerate() {
            accumulate(&mut grads, EmbedKey::ObjectVisual(p), gv, weights.alpha);
            accumulate(&mut grads, EmbedKey::ObjectText(p), go, weights.alpha);
        }
        (loss.value, w)
    };

    let (l_hard, l_nce) = if batch.region_items.is_empty() {
        if weights.beta != 0.0 {
            return Err(invalid!("region tier weighted but batch has no regions"));
        }
        (0.0, 0.0)
    } else {
        let v: Vec<EmbedVec> = batch
            .region_items
            .iter()
            .map(|r| r.visual.clone())
            .collect();
        let hard = region_hard_loss(&v, &batch.phrases, &batch.hard_assignment)?;
        let nce = region_nce_loss(&v, &batch.phrases, &batch.positive_index, weights.tau_temp)?;
        let wh = weights.beta * weights.mu;
        let wn = weights.beta * (1.0 - weights.mu);
        for (k, (gh, gn)) in hard.grad_visual.iter().zip(&nce.grad_visual).enumerate() {
            accumulate(&mut grads, EmbedKey::RegionVisual(k), gh, wh);
            accumulate(&mut grads, EmbedKey::RegionVisual(k), gn, wn);
        }
        for (j, (gh, gn)) in hard.grad_text.iter().zip(&nce.grad_text).enumerate() {
            accumulate(&mut grads, EmbedKey::Phrase(j), gh, wh);
            accumulate(&mut grads, EmbedKey::Phrase(j), gn, wn);
        }
        (hard.value, nce.value)
    };
    let l_reg = region_loss(l_hard, l_nce, weights.mu)?;

    let glob = global_loss(&batch.global_visual, &batch.global_text)?;
    accumulate(
        &mut grads,
        EmbedKey::GlobalVisual,
        &glob.grad_visual[0],
        weights.gamma,
    );
    accumulate(
        &mut grads,
        EmbedKey::GlobalText,
        &glob.grad_text[0],
        weights.gamma,
    );

    let l_align = weights.alpha * l_obj + weights.beta * l_reg + weights.gamma * glob.value;
    Ok(LossBreakdown {
        l_obj,
        l_reg_hard: l_hard,
        l_reg_nce: l_nce,
        l_reg,
        l_glob: glob.value,
        l_align,
        weights: *weights,
        iou_weights: iou_w,
        gradients: grads,
    })
}
