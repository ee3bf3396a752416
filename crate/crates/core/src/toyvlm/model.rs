//! A single-block vision-language model: patch embedding, a trainable
//! projection, text-to-image cross attention and a linear vocabulary head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    align_loss, AlignBatch, AlignWeights, BoxPair, EmbedKey, LossBreakdown, ObjectPair, RegionItem,
    RegionMask, LAYER_NORM_EPS,
};
use crate::error::{invalid, shape_err, Error, Result};
use crate::grid::{bin_range, EmbedVec, FeatureGrid};

use super::tape::{softmax_rows, Tape, Var};
use super::tensor::Matrix;

/// Pyramid levels used for the global image vector, over the patch grid.
pub const SPP_LEVELS: [usize; 2] = [1, 2];

/// Probability floor applied before taking logs in [`caption_loss`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_text_len: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ToyModelConfig {
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 32,
            heads: 4,
            vocab: 64,
            max_text_len: 16,
        }
    }

    /// Reference dimensions of the full-size model. Shape arithmetic only;
    /// nothing is allocated at this size.
    pub fn full_scale() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            heads: 12,
            vocab: 32000,
            max_text_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("vocab", self.vocab),
            ("max_text_len", self.max_text_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid!("{name} must be positive"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(invalid!(
                "patch_size {} does not divide image_size {}",
                self.patch_size,
                self.image_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(invalid!(
                "heads {} does not divide embed_dim {}",
                self.heads,
                self.embed_dim
            ));
        }
        if self.grid_side() < *SPP_LEVELS.iter().max().unwrap_or(&1) {
            return Err(invalid!(
                "patch grid {0}x{0} too small for pyramid pooling",
                self.grid_side()
            ));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    fn spp_cells(&self) -> usize {
        SPP_LEVELS.iter().map(|l| l * l).sum()
    }
}

/// Token ids of one caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>, cfg: &ToyModelConfig) -> Result<Self> {
        if ids.is_empty() {
            return Err(invalid!("empty token sequence"));
        }
        if ids.len() > cfg.max_text_len {
            return Err(invalid!(
                "{} tokens exceed max_text_len {}",
                ids.len(),
                cfg.max_text_len
            ));
        }
        if let Some(bad) = ids.iter().find(|&&t| t >= cfg.vocab) {
            return Err(invalid!("token {bad} outside vocabulary of {}", cfg.vocab));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Parameter groups. Only [`ParamGroup::Projection`] and
/// [`ParamGroup::RetToken`] are updated during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    PatchEmbed,
    TextEmbed,
    Attention,
    VocabHead,
    Projection,
    RetToken,
}

impl ParamGroup {
    pub fn is_trainable(self) -> bool {
        matches!(self, ParamGroup::Projection | ParamGroup::RetToken)
    }
}

/// Every tensor of the model, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    PatchW,
    PatchB,
    Pos,
    TokenEmbed,
    TextPos,
    Wq,
    Wk,
    Wv,
    Wo,
    HeadW,
    HeadB,
    ProjW,
    ProjB,
    SppW,
    SppB,
    Ret,
}

impl ParamId {
    pub const ALL: [ParamId; 16] = [
        ParamId::PatchW,
        ParamId::PatchB,
        ParamId::Pos,
        ParamId::TokenEmbed,
        ParamId::TextPos,
        ParamId::Wq,
        ParamId::Wk,
        ParamId::Wv,
        ParamId::Wo,
        ParamId::HeadW,
        ParamId::HeadB,
        ParamId::ProjW,
        ParamId::ProjB,
        ParamId::SppW,
        ParamId::SppB,
        ParamId::Ret,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::PatchW => "patch_embed.weight",
            ParamId::PatchB => "patch_embed.bias",
            ParamId::Pos => "patch_embed.position",
            ParamId::TokenEmbed => "text.token_embed",
            ParamId::TextPos => "text.position",
            ParamId::Wq => "attn.query",
            ParamId::Wk => "attn.key",
            ParamId::Wv => "attn.value",
            ParamId::Wo => "attn.output",
            ParamId::HeadW => "head.weight",
            ParamId::HeadB => "head.bias",
            ParamId::ProjW => "projection.weight",
            ParamId::ProjB => "projection.bias",
            ParamId::SppW => "projection.global_weight",
            ParamId::SppB => "projection.global_bias",
            ParamId::Ret => "ret_token",
        }
    }

    pub fn from_name(name: &str) -> Option<ParamId> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn group(self) -> ParamGroup {
        match self {
            ParamId::PatchW | ParamId::PatchB | ParamId::Pos => ParamGroup::PatchEmbed,
            ParamId::TokenEmbed | ParamId::TextPos => ParamGroup::TextEmbed,
            ParamId::Wq | ParamId::Wk | ParamId::Wv | ParamId::Wo => ParamGroup::Attention,
            ParamId::HeadW | ParamId::HeadB => ParamGroup::VocabHead,
            ParamId::ProjW | ParamId::ProjB | ParamId::SppW | ParamId::SppB => {
                ParamGroup::Projection
            }
            ParamId::Ret => ParamGroup::RetToken,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn shape(self, cfg: &ToyModelConfig) -> (usize, usize) {
        let d = cfg.embed_dim;
        match self {
            ParamId::PatchW => (cfg.patch_dim(), d),
            ParamId::PatchB | ParamId::ProjB | ParamId::SppB | ParamId::Ret => (1, d),
            ParamId::Pos => (cfg.num_patches(), d),
            ParamId::TokenEmbed => (cfg.vocab, d),
            ParamId::TextPos => (cfg.max_text_len, d),
            ParamId::Wq | ParamId::Wk | ParamId::Wv | ParamId::Wo | ParamId::ProjW => (d, d),
            ParamId::HeadW => (d, cfg.vocab),
            ParamId::HeadB => (1, cfg.vocab),
            ParamId::SppW => (cfg.spp_cells() * d, d),
        }
    }
}

/// Model parameters, one matrix per [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVlmParams {
    cfg: ToyModelConfig,
    tensors: Vec<Matrix>,
}

impl ToyVlmParams {
    /// Seeded uniform initialization.
    pub fn init(cfg: &ToyModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim as f64;
        let tensors = ParamId::ALL
            .iter()
            .map(|&id| {
                let (r, c) = id.shape(cfg);
                // Half-widths; uniform(-a, a) has std a / sqrt(3).
                let a = match id {
                    ParamId::PatchW => 12.0 * (3.0 / cfg.patch_dim() as f64).sqrt(),
                    ParamId::PatchB | ParamId::ProjB | ParamId::SppB | ParamId::HeadB => 0.0,
                    ParamId::Pos | ParamId::TextPos | ParamId::TokenEmbed | ParamId::Ret => 0.1,
                    ParamId::ProjW => 0.02,
                    ParamId::SppW => (3.0 / (cfg.spp_cells() as f64 * d)).sqrt(),
                    _ => (3.0 / d).sqrt(),
                };
                let data = (0..r * c)
                    .map(|_| if a == 0.0 { 0.0 } else { rng.gen_range(-a..a) })
                    .collect();
                Matrix::new(r, c, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg: *cfg, tensors })
    }

    /// Assemble from explicit tensors, checking every shape.
    pub fn from_tensors(cfg: &ToyModelConfig, tensors: Vec<Matrix>) -> Result<Self> {
        cfg.validate()?;
        if tensors.len() != ParamId::ALL.len() {
            return Err(invalid!(
                "expected {} tensors, got {}",
                ParamId::ALL.len(),
                tensors.len()
            ));
        }
        for (id, t) in ParamId::ALL.iter().zip(&tensors) {
            if t.shape() != id.shape(cfg) {
                return Err(shape_err!(
                    "{} has shape {:?}, expected {:?}",
                    id.name(),
                    t.shape(),
                    id.shape(cfg)
                ));
            }
        }
        Ok(Self { cfg: *cfg, tensors })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.index()]
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn attention(&self) -> AttentionParams {
        AttentionParams {
            wq: self.get(ParamId::Wq).clone(),
            wk: self.get(ParamId::Wk).clone(),
            wv: self.get(ParamId::Wv).clone(),
            wo: self.get(ParamId::Wo).clone(),
            heads: self.cfg.heads,
        }
    }

    /// FNV-1a 64 over the little-endian bytes of every value in the
    /// selected tensors, in storage order.
    pub fn checksum(&self, select: impl Fn(ParamGroup) -> bool) -> u64 {
        let mut h = Fnv1a::new();
        for (id, t) in ParamId::ALL.iter().zip(&self.tensors) {
            if select(id.group()) {
                for v in t.data() {
                    h.write(&v.to_le_bytes());
                }
            }
        }
        h.finish()
    }

    pub fn frozen_checksum(&self) -> u64 {
        self.checksum(|g| !g.is_trainable())
    }

    pub fn trainable_checksum(&self) -> u64 {
        self.checksum(ParamGroup::is_trainable)
    }

    /// All values concatenated in storage order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let total: usize = self.tensors.iter().map(Matrix::len).sum();
        if flat.len() != total {
            return Err(shape_err!("{} values for {total} parameters", flat.len()));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in &mut out.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }
}

/// FNV-1a 64-bit hash.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Split an image into flattened non-overlapping patches, one row per patch
/// in row-major patch order. Each row is the patch's cells row-major,
/// channel-minor.
pub fn patchify(image: &FeatureGrid, cfg: &ToyModelConfig) -> Result<Matrix> {
    cfg.validate()?;
    if image.height() != cfg.image_size
        || image.width() != cfg.image_size
        || image.channels() != cfg.channels
    {
        return Err(shape_err!(
            "image {}x{}x{} vs configured {}x{}x{}",
            image.height(),
            image.width(),
            image.channels(),
            cfg.image_size,
            cfg.image_size,
            cfg.channels
        ));
    }
    let (p, side) = (cfg.patch_size, cfg.grid_side());
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for pr in 0..side {
        for pc in 0..side {
            for r in pr * p..(pr + 1) * p {
                for c in pc * p..(pc + 1) * p {
                    data.extend_from_slice(image.cell(r, c));
                }
            }
        }
    }
    Matrix::new(cfg.num_patches(), cfg.patch_dim(), data)
}

/// `patches * W + b + pos`, one row per patch.
pub fn patch_embed(image: &FeatureGrid, params: &ToyVlmParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let z = record_patch_embed(&mut tape, image, params)?;
    Ok(tape.value(z).clone())
}

fn record_patch_embed(tape: &mut Tape, image: &FeatureGrid, params: &ToyVlmParams) -> Result<Var> {
    let patches = tape.leaf(patchify(image, &params.cfg)?);
    let w = tape.leaf(params.get(ParamId::PatchW).clone());
    let b = tape.leaf(params.get(ParamId::PatchB).clone());
    let pos = tape.leaf(params.get(ParamId::Pos).clone());
    let z = tape.matmul(patches, w)?;
    let z = tape.add_row(z, b)?;
    tape.add(z, pos)
}

/// Query, key, value and output maps (`embed_dim x embed_dim`, applied on
/// the right) shared by all heads; head `h` uses columns
/// `h*head_dim..(h+1)*head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: usize,
}

impl AttentionParams {
    pub fn identity(dim: usize, heads: usize) -> Self {
        Self {
            wq: Matrix::identity(dim),
            wk: Matrix::identity(dim),
            wv: Matrix::identity(dim),
            wo: Matrix::identity(dim),
            heads,
        }
    }
}

struct AttnVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
}

fn record_attention(tape: &mut Tape, text: Var, image: Var, w: &AttnVars) -> Result<Var> {
    let d = tape.value(text).cols();
    if tape.value(image).cols() != d {
        return Err(shape_err!(
            "text dim {d} vs image dim {}",
            tape.value(image).cols()
        ));
    }
    for v in [w.wq, w.wk, w.wv, w.wo] {
        if tape.value(v).shape() != (d, d) {
            return Err(shape_err!(
                "attention map {:?} for dim {d}",
                tape.value(v).shape()
            ));
        }
    }
    if w.heads == 0 || !d.is_multiple_of(w.heads) {
        return Err(invalid!("heads {} does not divide dim {d}", w.heads));
    }
    if tape.value(image).rows() == 0 || tape.value(text).rows() == 0 {
        return Err(invalid!(
            "attention needs at least one text and one image token"
        ));
    }
    let hd = d / w.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = tape.matmul(text, w.wq)?;
    let k = tape.matmul(image, w.wk)?;
    let v = tape.matmul(image, w.wv)?;
    let mut outs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s);
        outs.push(tape.matmul(a, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, w.wo)
}

/// Multi-head scaled dot-product attention: `text` rows query, `image` rows
/// provide keys and values. Returns one row per text row.
pub fn cross_modal_attention(
    text: &Matrix,
    image: &Matrix,
    params: &AttentionParams,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let t = tape.leaf(text.clone());
    let i = tape.leaf(image.clone());
    let w = AttnVars {
        wq: tape.leaf(params.wq.clone()),
        wk: tape.leaf(params.wk.clone()),
        wv: tape.leaf(params.wv.clone()),
        wo: tape.leaf(params.wo.clone()),
        heads: params.heads,
    };
    let out = record_attention(&mut tape, t, i, &w)?;
    Ok(tape.value(out).clone())
}

/// Caption loss value and its gradient with respect to the pre-softmax
/// logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionLoss {
    pub value: f64,
    pub grad_logits: Matrix,
    /// Set when some target probability fell below [`LOG_FLOOR`].
    pub floored: bool,
}

/// `-sum_k ln P(x_k)` over per-position distributions (`T x vocab`).
pub fn caption_loss(step_probs: &Matrix, target: &TokenSeq) -> Result<CaptionLoss> {
    if step_probs.rows() != target.len() {
        return Err(shape_err!(
            "{} distributions for {} targets",
            step_probs.rows(),
            target.len()
        ));
    }
    let mut value = 0.0;
    let mut floored = false;
    let mut grad = step_probs.clone();
    for (k, &t) in target.ids().iter().enumerate() {
        let row = step_probs.row_slice(k);
        if t >= row.len() {
            return Err(invalid!("target {t} outside vocabulary of {}", row.len()));
        }
        if row.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p)) {
            return Err(invalid!("position {k} has a value outside [0, 1]"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(invalid!("position {k} sums to {s}, not 1"));
        }
        let p = row[t];
        if p < LOG_FLOOR {
            floored = true;
        }
        value -= p.max(LOG_FLOOR).ln();
        grad.set(k, t, grad.get(k, t) - 1.0);
    }
    Ok(CaptionLoss {
        value,
        grad_logits: grad,
        floored,
    })
}

/// [`caption_loss`] on softmaxed logits.
pub fn caption_loss_from_logits(logits: &Matrix, target: &TokenSeq) -> Result<CaptionLoss> {
    caption_loss(&softmax_rows(logits), target)
}

/// `caption + delta * align`.
pub fn total_loss(caption: f64, align: &LossBreakdown, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(invalid!("delta must be > 0, got {delta}"));
    }
    Ok(caption + delta * align.l_align)
}

/// Text-side alignment targets for one image, in patch-grid coordinates.
/// Visual embeddings are computed by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignTargets {
    /// Predicted box (pooled) and its ground truth (weights only).
    pub object_boxes: Vec<BoxPair>,
    pub object_text: Vec<EmbedVec>,
    pub region_masks: Vec<RegionMask>,
    pub phrases: Vec<EmbedVec>,
    pub positive_index: Vec<usize>,
    pub hard_assignment: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub image: FeatureGrid,
    pub tokens: TokenSeq,
    pub targets: AlignTargets,
}

/// Losses of one item, plus gradients for every parameter when requested.
#[derive(Debug, Clone)]
pub struct ItemOutput {
    pub caption: f64,
    pub align: Option<LossBreakdown>,
    pub total: f64,
    pub grads: Option<Vec<Matrix>>,
}

fn pooling_rows(cfg: &ToyModelConfig, cells: &[Vec<(usize, usize)>]) -> Result<Matrix> {
    let side = cfg.grid_side();
    let mut m = Matrix::zeros(cells.len(), cfg.num_patches());
    for (i, members) in cells.iter().enumerate() {
        if members.is_empty() {
            return Err(invalid!("pooling region {i} is empty"));
        }
        let w = 1.0 / members.len() as f64;
        for &(r, c) in members {
            if r >= side || c >= side {
                return Err(invalid!("cell ({r}, {c}) outside {side}x{side} patch grid"));
            }
            m.set(i, r * side + c, w);
        }
    }
    Ok(m)
}

fn spp_pool_matrix(cfg: &ToyModelConfig) -> Result<Matrix> {
    let side = cfg.grid_side();
    let mut cells = Vec::new();
    for &l in &SPP_LEVELS {
        for br in 0..l {
            for bc in 0..l {
                let mut members = Vec::new();
                for r in bin_range(br, l, side) {
                    for c in bin_range(bc, l, side) {
                        members.push((r, c));
                    }
                }
                cells.push(members);
            }
        }
    }
    pooling_rows(cfg, &cells)
}

fn to_embeds(m: &Matrix) -> Result<Vec<EmbedVec>> {
    m.to_rows().into_iter().map(EmbedVec::new).collect()
}

/// Forward pass on a fresh tape; with `want_grads` also runs the backward
/// sweep and returns gradients for every parameter tensor.
pub fn forward(
    params: &ToyVlmParams,
    item: &TrainItem,
    weights: &AlignWeights,
    want_grads: bool,
) -> Result<ItemOutput> {
    let cfg = &params.cfg;
    weights.validate()?;
    let t_len = item.tokens.len();
    if t_len > cfg.max_text_len {
        return Err(invalid!("caption of {t_len} tokens exceeds max_text_len"));
    }
    let mut tape = Tape::new();
    let p: Vec<Var> = ParamId::ALL
        .iter()
        .map(|&id| tape.leaf(params.get(id).clone()))
        .collect();
    let pv = |id: ParamId| p[id.index()];

    // Image side.
    let patches = tape.leaf(patchify(&item.image, cfg)?);
    let z = tape.matmul(patches, pv(ParamId::PatchW))?;
    let z = tape.add_row(z, pv(ParamId::PatchB))?;
    let z = tape.add(z, pv(ParamId::Pos))?;
    let zp = tape.matmul(z, pv(ParamId::ProjW))?;
    let zp = tape.add_row(zp, pv(ParamId::ProjB))?;

    // Text side: [RET] followed by the shifted caption tokens.
    let ids = item.tokens.ids();
    let prev = tape.select_rows(pv(ParamId::TokenEmbed), &ids[..t_len - 1])?;
    let rows = if t_len > 1 {
        tape.concat_rows(&[pv(ParamId::Ret), prev])?
    } else {
        pv(ParamId::Ret)
    };
    let positions: Vec<usize> = (0..t_len).collect();
    let tpos = tape.select_rows(pv(ParamId::TextPos), &positions)?;
    let q_in = tape.add(rows, tpos)?;

    let attn = AttnVars {
        wq: pv(ParamId::Wq),
        wk: pv(ParamId::Wk),
        wv: pv(ParamId::Wv),
        wo: pv(ParamId::Wo),
        heads: cfg.heads,
    };
    let att = record_attention(&mut tape, q_in, zp, &attn)?;
    let fused = tape.add(q_in, att)?;
    let logits = tape.matmul(fused, pv(ParamId::HeadW))?;
    let logits = tape.add_row(logits, pv(ParamId::HeadB))?;
    let caption = tape.cross_entropy(logits, ids)?;
    let caption_value = tape.value(caption).item();

    let align_active = weights.alpha != 0.0 || weights.beta != 0.0 || weights.gamma != 0.0;
    let (terminal, align) = if align_active {
        let (align_var, breakdown) =
            record_align(&mut tape, cfg, &item.targets, zp, fused, &p, weights)?;
        let scaled = tape.scale(align_var, weights.delta);
        (tape.add(caption, scaled)?, Some(breakdown))
    } else {
        (caption, None)
    };
    let total = tape.value(terminal).item();

    let grads = if want_grads {
        let g = tape.backward(terminal)?;
        Some(p.iter().map(|&v| g.wrt(v)).collect())
    } else {
        None
    };
    Ok(ItemOutput {
        caption: caption_value,
        align,
        total,
        grads,
    })
}

fn record_align(
    tape: &mut Tape,
    cfg: &ToyModelConfig,
    targets: &AlignTargets,
    zp: Var,
    fused: Var,
    p: &[Var],
    weights: &AlignWeights,
) -> Result<(Var, LossBreakdown)> {
    let side = cfg.grid_side();
    let d = cfg.embed_dim;
    if targets.object_boxes.len() != targets.object_text.len() {
        return Err(invalid!(
            "{} boxes but {} object texts",
            targets.object_boxes.len(),
            targets.object_text.len()
        ));
    }

    let v_obj = if targets.object_boxes.is_empty() {
        None
    } else {
        let cells: Vec<Vec<(usize, usize)>> = targets
            .object_boxes
            .iter()
            .map(|b| {
                let roi = b.predicted;
                if !roi.fits_in(side, side) {
                    return Err(invalid!("box {roi:?} outside {side}x{side} patch grid"));
                }
                Ok((roi.row0..roi.row1)
                    .flat_map(|r| (roi.col0..roi.col1).map(move |c| (r, c)))
                    .collect())
            })
            .collect::<Result<_>>()?;
        let pool = tape.leaf(pooling_rows(cfg, &cells)?);
        Some(tape.matmul(pool, zp)?)
    };

    let v_reg = if targets.region_masks.is_empty() {
        None
    } else {
        let cells: Vec<Vec<(usize, usize)>> = targets
            .region_masks
            .iter()
            .map(|m| {
                if m.height() != side || m.width() != side {
                    return Err(shape_err!(
                        "mask {}x{} vs {side}x{side} patch grid",
                        m.height(),
                        m.width()
                    ));
                }
                Ok((0..side * side)
                    .filter(|i| m.membership()[*i])
                    .map(|i| (i / side, i % side))
                    .collect())
            })
            .collect::<Result<_>>()?;
        let pool = tape.leaf(pooling_rows(cfg, &cells)?);
        Some(tape.matmul(pool, zp)?)
    };

    let spp_pool = tape.leaf(spp_pool_matrix(cfg)?);
    let pooled = tape.matmul(spp_pool, zp)?;
    let flat = tape.reshape(pooled, 1, cfg.spp_cells() * d)?;
    let g = tape.matmul(flat, p[ParamId::SppW.index()])?;
    let g = tape.add_row(g, p[ParamId::SppB.index()])?;
    let g = tape.layer_norm_rows(g, LAYER_NORM_EPS);
    let g = tape.l2_normalize_rows(g)?;
    let t_cls = tape.select_rows(fused, &[0])?;

    let zp_val = tape.value(zp);
    let batch = AlignBatch {
        visual_grid: FeatureGrid::new(side, side, d, zp_val.data().to_vec())?,
        object_pairs: match v_obj {
            Some(v) => to_embeds(tape.value(v))?
                .into_iter()
                .zip(&targets.object_text)
                .zip(&targets.object_boxes)
                .map(|((visual, text), boxes)| ObjectPair {
                    boxes: *boxes,
                    visual,
                    text: text.clone(),
                })
                .collect(),
            None => Vec::new(),
        },
        region_items: match v_reg {
            Some(v) => to_embeds(tape.value(v))?
                .into_iter()
                .zip(&targets.region_masks)
                .map(|(visual, mask)| RegionItem {
                    mask: mask.clone(),
                    visual,
                })
                .collect(),
            None => Vec::new(),
        },
        phrases: targets.phrases.clone(),
        positive_index: targets.positive_index.clone(),
        hard_assignment: targets.hard_assignment.clone(),
        global_visual: EmbedVec::new(tape.value(g).data().to_vec())?,
        global_text: EmbedVec::new(tape.value(t_cls).data().to_vec())?,
    };
    let breakdown = align_loss(&batch, weights)?;

    let gather =
        |keys: &mut dyn Iterator<Item = EmbedKey>| -> Result<Matrix> {
            let rows: Vec<Vec<f64>> = keys
                .map(|k| {
                    breakdown.gradients.get(&k).cloned().ok_or_else(|| {
                        Error::InvalidArgument(format!("missing gradient for {k:?}"))
                    })
                })
                .collect::<Result<_>>()?;
            Matrix::from_rows(&rows)
        };
    let mut locals = Vec::new();
    if let Some(v) = v_obj {
        let n = tape.value(v).rows();
        locals.push((v, gather(&mut (0..n).map(EmbedKey::ObjectVisual))?));
    }
    if let Some(v) = v_reg {
        let n = tape.value(v).rows();
        locals.push((v, gather(&mut (0..n).map(EmbedKey::RegionVisual))?));
    }
    locals.push((g, gather(&mut std::iter::once(EmbedKey::GlobalVisual))?));
    locals.push((t_cls, gather(&mut std::iter::once(EmbedKey::GlobalText))?));
    let var = tape.custom_scalar(breakdown.l_align, locals)?;
    Ok((var, breakdown))
}
