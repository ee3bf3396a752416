//! Coarse-to-fine dynamic-resolution input pipeline.
//!
//! A full-resolution image is average-pooled by the downsampling factor `n`,
//! a saliency map is computed on the coarse grid, cells at or above the
//! threshold are flagged for high resolution, the smoothed map's top-k cells
//! become fixed-size ROI windows, and full-resolution crops of those windows
//! are added back onto the upsampled coarse features.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::grid::{bilinear_upsample, crop, gaussian_blur, pool, FeatureGrid, PoolMode, Roi};

/// Blurred scores closer than this (relative to the map's largest magnitude)
/// rank as ties and fall back to row-major order.
pub const RANK_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    High,
    Low,
}

/// Per-cell resolution decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolutionMask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Resolution>,
}

impl ResolutionMask {
    pub fn get(&self, r: usize, c: usize) -> Resolution {
        self.cells[r * self.width + c]
    }

    pub fn high_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|&&c| c == Resolution::High)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrisConfig {
    pub tau_saliency: f64,
    pub sigma: f64,
    pub k: usize,
    pub n: usize,
    /// ROI window `(rows, cols)` in coarse cells.
    pub roi_size: (usize, usize),
}

impl Default for DrisConfig {
    fn default() -> Self {
        Self {
            tau_saliency: 0.5,
            sigma: 1.5,
            k: 4,
            n: 4,
            roi_size: (4, 4),
        }
    }
}

impl DrisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid!("downsampling factor n must be >= 1"));
        }
        if self.k == 0 {
            return Err(invalid!("k must be >= 1"));
        }
        if !(self.sigma > 0.0) {
            return Err(invalid!("sigma must be > 0"));
        }
        if self.roi_size.0 == 0 || self.roi_size.1 == 0 {
            return Err(invalid!("roi_size must be positive"));
        }
        if !self.tau_saliency.is_finite() {
            return Err(invalid!("tau_saliency must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub full_res_cell_ops: u64,
    pub coarse_cell_ops: u64,
    pub fine_cell_ops: u64,
    pub savings_ratio: f64,
    /// False when `n` does not divide the image dims and ceiling division
    /// was used for the coarse grid.
    pub exact_division: bool,
}

fn require_single_channel(grid: &FeatureGrid, what: &str) -> Result<()> {
    if grid.channels() != 1 {
        return Err(invalid!(
            "{what} must be single-channel, got {} channels",
            grid.channels()
        ));
    }
    Ok(())
}

/// Flags a cell HIGH iff its saliency is `>= tau`.
pub fn resolution_allocate(saliency: &FeatureGrid, tau_saliency: f64) -> Result<ResolutionMask> {
    require_single_channel(saliency, "saliency map")?;
    let cells = saliency
        .data()
        .iter()
        .map(|&s| {
            if s >= tau_saliency {
                Resolution::High
            } else {
                Resolution::Low
            }
        })
        .collect();
    Ok(ResolutionMask {
        height: saliency.height(),
        width: saliency.width(),
        cells,
    })
}

/// Cell indices sorted by descending score; near-equal scores keep
/// row-major order.
fn rank_cells(scores: &[f64]) -> Vec<usize> {
    let scale = scores.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = RANK_TIE_TOLERANCE * scale;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    // Regroup runs of near-equal neighbours and order each run by index.
    let mut out = Vec::with_capacity(order.len());
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end - 1]] - scores[order[end]] <= tol {
            end += 1;
        }
        let mut run = order[start..end].to_vec();
        run.sort_unstable();
        out.extend(run);
        start = end;
    }
    out
}

/// Fixed-size window centred on `(r, c)` and clamped inside the map.
fn window_at(r: usize, c: usize, size: (usize, usize), height: usize, width: usize) -> Roi {
    let row0 = r.saturating_sub(size.0 / 2).min(height - size.0);
    let col0 = c.saturating_sub(size.1 / 2).min(width - size.1);
    Roi {
        row0,
        col0,
        row1: row0 + size.0,
        col1: col0 + size.1,
    }
}

/// Top-k ROI screening on a smoothed attention heatmap.
///
/// Returns at most `cfg.k` distinct windows ordered by the blurred score of
/// the cell that produced them.
pub fn select_rois(heatmap: &FeatureGrid, cfg: &DrisConfig) -> Result<Vec<Roi>> {
    require_single_channel(heatmap, "heatmap")?;
    cfg.validate()?;
    let (h, w) = (heatmap.height(), heatmap.width());
    if cfg.roi_size.0 > h || cfg.roi_size.1 > w {
        return Err(invalid!(
            "roi window {:?} larger than {h}x{w} heatmap",
            cfg.roi_size
        ));
    }
    let blurred = gaussian_blur(heatmap, cfg.sigma)?;
    let mut rois: Vec<Roi> = Vec::with_capacity(cfg.k);
    for idx in rank_cells(blurred.data()) {
        let roi = window_at(idx / w, idx % w, cfg.roi_size, h, w);
        if !rois.contains(&roi) {
            rois.push(roi);
            if rois.len() == cfg.k {
                break;
            }
        }
    }
    Ok(rois)
}

/// Upsamples `coarse` by `factor` and adds `fine` onto the window `roi`
/// (given in coarse cells, so the fused window is `roi` scaled by `factor`).
pub fn fuse_features(
    coarse: &FeatureGrid,
    fine: &FeatureGrid,
    roi: &Roi,
    factor: usize,
) -> Result<FeatureGrid> {
    let up = bilinear_upsample(coarse, factor)?;
    let omega = roi.scaled(factor);
    check_fine(&up, fine, &omega)?;
    let mut data = up.data().to_vec();
    add_window(&mut data, &up, fine, &omega, None);
    FeatureGrid::new(up.height(), up.width(), up.channels(), data)
}

/// Multi-ROI variant used by the pipeline: every cell covered by at least
/// one window receives the fine value exactly once.
pub fn fuse_features_multi(
    coarse: &FeatureGrid,
    full: &FeatureGrid,
    rois: &[Roi],
    factor: usize,
) -> Result<FeatureGrid> {
    let up = bilinear_upsample(coarse, factor)?;
    if (up.height(), up.width(), up.channels()) != (full.height(), full.width(), full.channels()) {
        return Err(shape_err!(
            "full-resolution grid {}x{}x{} does not match upsampled {}x{}x{}",
            full.height(),
            full.width(),
            full.channels(),
            up.height(),
            up.width(),
            up.channels()
        ));
    }
    let mut covered = vec![false; up.height() * up.width()];
    let mut data = up.data().to_vec();
    for roi in rois {
        let omega = roi.scaled(factor);
        let fine = crop(full, &omega)?;
        add_window(&mut data, &up, &fine, &omega, Some(&mut covered));
    }
    FeatureGrid::new(up.height(), up.width(), up.channels(), data)
}

fn check_fine(up: &FeatureGrid, fine: &FeatureGrid, omega: &Roi) -> Result<()> {
    if !omega.fits_in(up.height(), up.width()) {
        return Err(Error::Bounds(format!(
            "fused window {omega:?} outside {}x{} upsampled grid",
            up.height(),
            up.width()
        )));
    }
    if fine.height() != omega.height()
        || fine.width() != omega.width()
        || fine.channels() != up.channels()
    {
        return Err(shape_err!(
            "fine grid {}x{}x{} does not match window {}x{}x{}",
            fine.height(),
            fine.width(),
            fine.channels(),
            omega.height(),
            omega.width(),
            up.channels()
        ));
    }
    Ok(())
}

fn add_window(
    data: &mut [f64],
    up: &FeatureGrid,
    fine: &FeatureGrid,
    omega: &Roi,
    mut covered: Option<&mut Vec<bool>>,
) {
    let (w, ch) = (up.width(), up.channels());
    for r in omega.row0..omega.row1 {
        for c in omega.col0..omega.col1 {
            if let Some(cov) = covered.as_deref_mut() {
                if std::mem::replace(&mut cov[r * w + c], true) {
                    continue;
                }
            }
            let src = fine.cell(r - omega.row0, c - omega.col0);
            let base = (r * w + c) * ch;
            for k in 0..ch {
                data[base + k] += src[k];
            }
        }
    }
}

/// Cell-operation accounting for one coarse pass plus full-resolution ROIs.
/// `rois` are in coarse cells.
pub fn cost_report(h: usize, w: usize, cfg: &DrisConfig, rois: &[Roi]) -> CostReport {
    let n = cfg.n.max(1) as u64;
    let (h, w) = (h as u64, w as u64);
    let exact = h % n == 0 && w % n == 0;
    let full = h * w;
    let coarse = h.div_ceil(n) * w.div_ceil(n);
    let fine: u64 = rois.iter().map(|r| r.area() as u64 * n * n).sum();
    CostReport {
        full_res_cell_ops: full,
        coarse_cell_ops: coarse,
        fine_cell_ops: fine,
        savings_ratio: (coarse + fine) as f64 / full as f64,
        exact_division: exact,
    }
}

/// Channel mean of the coarse grid, the default saliency source.
pub fn channel_mean_saliency(coarse: &FeatureGrid) -> Result<FeatureGrid> {
    Ok(coarse.channel_mean())
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub coarse: FeatureGrid,
    pub saliency: FeatureGrid,
    pub mask: ResolutionMask,
    pub rois: Vec<Roi>,
    pub fused: FeatureGrid,
    pub cost: CostReport,
}

/// Runs the whole coarse-to-fine pass. `saliency_provider` receives the
/// coarse grid and must return a single-channel map of the same size.
pub fn run_pipeline<F>(
    image: &FeatureGrid,
    saliency_provider: F,
    cfg: &DrisConfig,
) -> Result<PipelineOutput>
where
    F: Fn(&FeatureGrid) -> Result<FeatureGrid>,
{
    cfg.validate()?;
    let n = cfg.n;
    if !image.height().is_multiple_of(n) || !image.width().is_multiple_of(n) {
        return Err(invalid!(
            "image {}x{} not divisible by n = {n}",
            image.height(),
            image.width()
        ));
    }
    let coarse = pool(
        image,
        image.height() / n,
        image.width() / n,
        PoolMode::Average,
    )?;
    let saliency = saliency_provider(&coarse)?;
    if saliency.height() != coarse.height() || saliency.width() != coarse.width() {
        return Err(shape_err!(
            "saliency map {}x{} does not match coarse grid {}x{}",
            saliency.height(),
            saliency.width(),
            coarse.height(),
            coarse.width()
        ));
    }
    let mask = resolution_allocate(&saliency, cfg.tau_saliency)?;
    let rois = select_rois(&saliency, cfg)?;
    let fused = fuse_features_multi(&coarse, image, &rois, n)?;
    let cost = cost_report(image.height(), image.width(), cfg, &rois);
    Ok(PipelineOutput {
        coarse,
        saliency,
        mask,
        rois,
        fused,
        cost,
    })
}
