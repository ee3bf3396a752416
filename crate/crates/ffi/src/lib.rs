//! C ABI over `rsalign`.
//!
//! Every fallible function returns an [`RsStatus`]; on failure the message
//! is kept per thread and can be copied out with [`rsalign_last_error`].
//! Handles ([`RsGrid`], [`RsModel`]) are opaque and must be released with
//! their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rsalign::align::{global_loss, iou, region_nce_loss, PairLoss};
use rsalign::dris::{channel_mean_saliency, cost_report, run_pipeline, DrisConfig};
use rsalign::io::{read_grid, write_grid};
use rsalign::metrics::{bleu, meteor, rouge_l, Caption, RefSet};
use rsalign::toyvlm::{load_params, lr_at, save_params, ToyModelConfig, ToyVlmParams, TrainConfig};
use rsalign::{EmbedVec, Error, FeatureGrid, Roi};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfBounds = 3,
    Shape = 4,
    DegenerateVector = 5,
    NonFinite = 6,
    Parse = 7,
    Format = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for RsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Record { .. } => RsStatus::InvalidArgument,
            Error::Bounds(_) => RsStatus::OutOfBounds,
            Error::Shape(_) => RsStatus::Shape,
            Error::DegenerateVector(_) => RsStatus::DegenerateVector,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => RsStatus::NonFinite,
            Error::Parse { .. } => RsStatus::Parse,
            Error::Format(_) => RsStatus::Format,
            Error::Io(_) => RsStatus::Io,
        }
    }
}

/// Opaque feature grid.
pub struct RsGrid(FeatureGrid);

/// Opaque toy model parameters.
pub struct RsModel(ToyVlmParams);

/// Half-open box `[row0, row1) x [col0, col1)`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RsRoi {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsDrisConfig {
    pub tau_saliency: f64,
    pub sigma: f64,
    pub k: usize,
    pub n: usize,
    pub roi_height: usize,
    pub roi_width: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RsCost {
    pub full_res_cell_ops: u64,
    pub coarse_cell_ops: u64,
    pub fine_cell_ops: u64,
    pub savings_ratio: f64,
    pub exact_division: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(RsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(RsStatus::from(&e), e.to_string())
    }
}

type FfiResult = std::result::Result<(), Fail>;

fn null(what: &str) -> Fail {
    Fail(RsStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> FfiResult) -> RsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside rsalign".into());
            RsStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> std::result::Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(
    p: *mut T,
    len: usize,
    what: &str,
) -> std::result::Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> std::result::Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|e| {
        Fail(
            RsStatus::InvalidArgument,
            format!("{what} is not UTF-8: {e}"),
        )
    })
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> std::result::Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn embeds(flat: &[f64], rows: usize, dim: usize) -> std::result::Result<Vec<EmbedVec>, Fail> {
    if dim == 0 || flat.len() != rows * dim {
        return Err(Fail(
            RsStatus::Shape,
            format!("expected {rows}x{dim} values, got {}", flat.len()),
        ));
    }
    Ok(flat
        .chunks(dim)
        .map(|c| EmbedVec::new(c.to_vec()))
        .collect::<rsalign::Result<_>>()?)
}

fn copy_grads(src: &[Vec<f64>], dst: &mut [f64]) {
    for (d, v) in dst.iter_mut().zip(src.iter().flatten()) {
        *d = *v;
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rsalign_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`). Returns the full message length plus one,
/// so a return value greater than `cap` means truncation.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rsalign_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Creates a grid from `h*w*c` row-major, channel-minor values.
///
/// # Safety
/// `data` must point to `len` readable doubles; `out_grid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsalign_grid_new(
    height: usize,
    width: usize,
    channels: usize,
    data: *const f64,
    len: usize,
    out_grid: *mut *mut RsGrid,
) -> RsStatus {
    guard(|| {
        let out_grid = out(out_grid, "out_grid")?;
        let values = slice(data, len, "data")?.to_vec();
        let grid = FeatureGrid::new(height, width, channels, values)?;
        *out_grid = Box::into_raw(Box::new(RsGrid(grid)));
        Ok(())
    })
}

/// Reads an FGRD file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_grid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsalign_grid_read_fgrd(
    path: *const c_char,
    out_grid: *mut *mut RsGrid,
) -> RsStatus {
    guard(|| {
        let out_grid = out(out_grid, "out_grid")?;
        let grid = read_grid(text(path, "path")?.as_ref())?;
        *out_grid = Box::into_raw(Box::new(RsGrid(grid)));
        Ok(())
    })
}

/// Writes `grid` as FGRD (values narrowed to f32).
///
/// # Safety
/// `grid` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rsalign_grid_write_fgrd(
    grid: *const RsGrid,
    path: *const c_char,
) -> RsStatus {
    guard(|| {
        let grid = grid.as_ref().ok_or_else(|| null("grid"))?;
        write_grid(text(path, "path")?.as_ref(), &grid.0)?;
        Ok(())
    })
}

/// # Safety
/// `grid` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsalign_grid_dims(
    grid: *const RsGrid,
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
) -> RsStatus {
    guard(|| {
        let g = &grid.as_ref().ok_or_else(|| null("grid"))?.0;
        *out(height, "height")? = g.height();
        *out(width, "width")? = g.width();
        *out(channels, "channels")? = g.channels();
        Ok(())
    })
}

/// Copies the grid values into `buf`, which must hold `h*w*c` doubles.
///
/// # Safety
/// `grid` must be a live handle; `buf` must point to `cap` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rsalign_grid_copy_data(
    grid: *const RsGrid,
    buf: *mut f64,
    cap: usize,
) -> RsStatus {
    guard(|| {
        let g = &grid.as_ref().ok_or_else(|| null("grid"))?.0;
        if cap < g.data().len() {
            return Err(Fail(
                RsStatus::BufferTooSmall,
                format!("need {} values, buffer holds {cap}", g.data().len()),
            ));
        }
        slice_mut(buf, g.data().len(), "buf")?.copy_from_slice(g.data());
        Ok(())
    })
}

/// # Safety
/// `grid` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rsalign_grid_free(grid: *mut RsGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Writes the default DRIS configuration into `cfg`.
///
/// # Safety
/// `cfg` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsalign_dris_config_default(cfg: *mut RsDrisConfig) -> RsStatus {
    guard(|| {
        let d = DrisConfig::default();
        *out(cfg, "cfg")? = RsDrisConfig {
            tau_saliency: d.tau_saliency,
            sigma: d.sigma,
            k: d.k,
            n: d.n,
            roi_height: d.roi_size.0,
            roi_width: d.roi_size.1,
        };
        Ok(())
    })
}

fn dris_config(c: &RsDrisConfig) -> DrisConfig {
    DrisConfig {
        tau_saliency: c.tau_saliency,
        sigma: c.sigma,
        k: c.k,
        n: c.n,
        roi_size: (c.roi_height, c.roi_width),
    }
}

fn rs_cost(c: &rsalign::dris::CostReport) -> RsCost {
    RsCost {
        full_res_cell_ops: c.full_res_cell_ops,
        coarse_cell_ops: c.coarse_cell_ops,
        fine_cell_ops: c.fine_cell_ops,
        savings_ratio: c.savings_ratio,
        exact_division: c.exact_division,
    }
}

/// Runs the coarse-to-fine pass with channel-mean saliency. ROIs (coarse
/// cells) are written to `rois` (capacity `cap`); `count` receives the
/// number selected, which may exceed `cap` (then `BufferTooSmall`).
///
/// # Safety
/// `grid` must be a live handle, `cfg` readable, `rois` null or `cap`
/// writable entries, `count` and `cost` writable (`cost` may be null).
#[no_mangle]
pub unsafe extern "C" fn rsalign_dris_run(
    grid: *const RsGrid,
    cfg: *const RsDrisConfig,
    rois: *mut RsRoi,
    cap: usize,
    count: *mut usize,
    cost: *mut RsCost,
) -> RsStatus {
    guard(|| {
        let g = &grid.as_ref().ok_or_else(|| null("grid"))?.0;
        let cfg = dris_config(cfg.as_ref().ok_or_else(|| null("cfg"))?);
        let count = out(count, "count")?;
        let result = run_pipeline(g, channel_mean_saliency, &cfg)?;
        *count = result.rois.len();
        if let Some(c) = cost.as_mut() {
            *c = rs_cost(&result.cost);
        }
        if result.rois.len() > cap {
            return Err(Fail(
                RsStatus::BufferTooSmall,
                format!("{} ROIs, buffer holds {cap}", result.rois.len()),
            ));
        }
        let dst = slice_mut(rois, result.rois.len(), "rois")?;
        for (d, r) in dst.iter_mut().zip(&result.rois) {
            *d = RsRoi {
                row0: r.row0,
                col0: r.col0,
                row1: r.row1,
                col1: r.col1,
            };
        }
        Ok(())
    })
}

/// Cell-operation counts for an `height x width` image and the given ROIs.
///
/// # Safety
/// `cfg` readable, `rois` `count` readable entries, `cost` writable.
#[no_mangle]
pub unsafe extern "C" fn rsalign_dris_cost(
    height: usize,
    width: usize,
    cfg: *const RsDrisConfig,
    rois: *const RsRoi,
    count: usize,
    cost: *mut RsCost,
) -> RsStatus {
    guard(|| {
        let cfg = dris_config(cfg.as_ref().ok_or_else(|| null("cfg"))?);
        cfg.validate()?;
        let rois = slice(rois, count, "rois")?
            .iter()
            .map(|r| Roi::new(r.row0, r.col0, r.row1, r.col1))
            .collect::<rsalign::Result<Vec<_>>>()?;
        *out(cost, "cost")? = rs_cost(&cost_report(height, width, &cfg, &rois));
        Ok(())
    })
}

/// Intersection over union of two boxes.
///
/// # Safety
/// `a`, `b` readable; `value` writable.
#[no_mangle]
pub unsafe extern "C" fn rsalign_iou(
    a: *const RsRoi,
    b: *const RsRoi,
    value: *mut f64,
) -> RsStatus {
    guard(|| {
        let roi = |r: *const RsRoi, what| -> std::result::Result<Roi, Fail> {
            let r = r.as_ref().ok_or_else(|| null(what))?;
            Ok(Roi::new(r.row0, r.col0, r.row1, r.col1)?)
        };
        *out(value, "value")? = iou(&roi(a, "a")?, &roi(b, "b")?);
        Ok(())
    })
}

fn write_pair(
    loss: PairLoss,
    value: *mut f64,
    grad_visual: *mut f64,
    visual_len: usize,
    grad_text: *mut f64,
    text_len: usize,
) -> FfiResult {
    // SAFETY: callers pass pointers validated by their own contracts.
    unsafe {
        *out(value, "value")? = loss.value;
        if !grad_visual.is_null() {
            copy_grads(
                &loss.grad_visual,
                slice_mut(grad_visual, visual_len, "grad_visual")?,
            );
        }
        if !grad_text.is_null() {
            copy_grads(
                &loss.grad_text,
                slice_mut(grad_text, text_len, "grad_text")?,
            );
        }
    }
    Ok(())
}

/// Global cosine loss `1 - cos(g, t)` and its gradients.
///
/// # Safety
/// `g`, `t` must point to `dim` doubles; `value` writable; `grad_g` and
/// `grad_t` null or `dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rsalign_global_loss(
    g: *const f64,
    t: *const f64,
    dim: usize,
    value: *mut f64,
    grad_g: *mut f64,
    grad_t: *mut f64,
) -> RsStatus {
    guard(|| {
        let gv = embeds(slice(g, dim, "g")?, 1, dim)?;
        let tv = embeds(slice(t, dim, "t")?, 1, dim)?;
        let loss = global_loss(&gv[0], &tv[0])?;
        write_pair(loss, value, grad_g, dim, grad_t, dim)
    })
}

/// Region InfoNCE over `k` visual rows and `m` phrase rows of width `dim`
/// with positive phrase indices `positives[k]`.
///
/// # Safety
/// Input arrays must hold the stated counts; `value` writable; gradient
/// buffers null or `k*dim` / `m*dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn rsalign_region_nce_loss(
    visual: *const f64,
    k: usize,
    phrases: *const f64,
    m: usize,
    dim: usize,
    positives: *const usize,
    tau: f64,
    value: *mut f64,
    grad_visual: *mut f64,
    grad_phrases: *mut f64,
) -> RsStatus {
    guard(|| {
        let v = embeds(slice(visual, k * dim, "visual")?, k, dim)?;
        let p = embeds(slice(phrases, m * dim, "phrases")?, m, dim)?;
        let pos = slice(positives, k, "positives")?;
        let loss = region_nce_loss(&v, &p, pos, tau)?;
        write_pair(loss, value, grad_visual, k * dim, grad_phrases, m * dim)
    })
}

/// Which caption score [`rsalign_caption_score`] computes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsMetric {
    Bleu1 = 0,
    Bleu2 = 1,
    Bleu3 = 2,
    Bleu4 = 3,
    Meteor = 4,
    RougeL = 5,
}

/// Scores `candidate` against a single `reference`.
///
/// # Safety
/// Both strings NUL-terminated; `value` writable.
#[no_mangle]
pub unsafe extern "C" fn rsalign_caption_score(
    metric: RsMetric,
    candidate: *const c_char,
    reference: *const c_char,
    value: *mut f64,
) -> RsStatus {
    guard(|| {
        let c = Caption::new(text(candidate, "candidate")?);
        let r = Caption::new(text(reference, "reference")?);
        let v = match metric {
            RsMetric::Bleu1 | RsMetric::Bleu2 | RsMetric::Bleu3 | RsMetric::Bleu4 => {
                bleu(&c, &RefSet::new(vec![r])?, metric as usize + 1, None)?
            }
            RsMetric::Meteor => meteor(&c, &r),
            RsMetric::RougeL => rouge_l(&c, &r, 1.0),
        };
        *out(value, "value")? = v;
        Ok(())
    })
}

/// Learning rate at `step` for linear warmup then linear decay.
///
/// # Safety
/// `lr` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsalign_lr_at(
    step: usize,
    peak_lr: f64,
    warmup_steps: usize,
    total_steps: usize,
    lr: *mut f64,
) -> RsStatus {
    guard(|| {
        let cfg = TrainConfig {
            peak_lr,
            warmup_steps,
            total_steps,
            steps: total_steps,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        *out(lr, "lr")? = lr_at(step, &cfg)?;
        Ok(())
    })
}

/// Freshly initialized toy-size model.
///
/// # Safety
/// `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsalign_model_init_toy(
    seed: u64,
    out_model: *mut *mut RsModel,
) -> RsStatus {
    guard(|| {
        let out_model = out(out_model, "out_model")?;
        let params = ToyVlmParams::init(&ToyModelConfig::toy(), seed)?;
        *out_model = Box::into_raw(Box::new(RsModel(params)));
        Ok(())
    })
}

/// Loads a TVLM checkpoint.
///
/// # Safety
/// `path` NUL-terminated; `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn rsalign_model_load(
    path: *const c_char,
    out_model: *mut *mut RsModel,
) -> RsStatus {
    guard(|| {
        let out_model = out(out_model, "out_model")?;
        let path = text(path, "path")?;
        let file = File::open(path).map_err(|e| Fail(RsStatus::Io, format!("{path}: {e}")))?;
        let params = load_params(BufReader::new(file))?;
        *out_model = Box::into_raw(Box::new(RsModel(params)));
        Ok(())
    })
}

/// Saves a TVLM checkpoint.
///
/// # Safety
/// `model` a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rsalign_model_save(
    model: *const RsModel,
    path: *const c_char,
) -> RsStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let path = text(path, "path")?;
        let file = File::create(path).map_err(|e| Fail(RsStatus::Io, format!("{path}: {e}")))?;
        save_params(BufWriter::new(file), m)?;
        Ok(())
    })
}

/// FNV-1a checksums of the frozen and trainable parameter groups.
///
/// # Safety
/// `model` a live handle; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn rsalign_model_checksums(
    model: *const RsModel,
    frozen: *mut u64,
    trainable: *mut u64,
) -> RsStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        *out(frozen, "frozen")? = m.frozen_checksum();
        *out(trainable, "trainable")? = m.trainable_checksum();
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rsalign_model_free(model: *mut RsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
