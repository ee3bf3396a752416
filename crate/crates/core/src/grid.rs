//! Dense grid container and the spatial primitives the rest of the crate
//! composes: bilinear upsampling, cropping, adaptive pooling, separable
//! Gaussian blur, and the two vector normalizations.
//!
//! All math runs in `f64`. Grids are stored row-major with the channel index
//! varying fastest, so cell `(r, c)` occupies
//! `data[(r * width + c) * channels ..][..channels]`.

use crate::error::{invalid, shape_err, Error, Result};

/// Dense `height x width x channels` grid of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid!(
                "grid dims must be positive, got {height}x{width}x{channels}"
            ));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid value at flat index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    /// Builds a grid by evaluating `f(row, col, channel)` for every entry.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.width + c) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[self.offset(r, c, ch)]
    }

    /// Channel vector of one cell.
    pub fn cell(&self, r: usize, c: usize) -> &[f64] {
        let o = self.offset(r, c, 0);
        &self.data[o..o + self.channels]
    }

    /// Overwrites one entry. Rejects non-finite values to keep the invariant.
    pub fn set(&mut self, r: usize, c: usize, ch: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("set ({r},{c},{ch})")));
        }
        let o = self.offset(r, c, ch);
        self.data[o] = value;
        Ok(())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Full-extent ROI covering the whole grid.
    pub fn full_roi(&self) -> Roi {
        Roi {
            row0: 0,
            col0: 0,
            row1: self.height,
            col1: self.width,
        }
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    /// Per-cell mean over channels, as a single-channel grid.
    pub fn channel_mean(&self) -> FeatureGrid {
        let n = self.channels as f64;
        let data = self
            .data
            .chunks(self.channels)
            .map(|cell| cell.iter().sum::<f64>() / n)
            .collect();
        FeatureGrid {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }
}

/// Axis-aligned half-open rectangle `[row0, row1) x [col0, col1)` in cell units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Roi {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Roi {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Result<Self> {
        if row1 <= row0 || col1 <= col0 {
            return Err(invalid!("empty roi [{row0},{row1})x[{col0},{col1})"));
        }
        Ok(Self {
            row0,
            col0,
            row1,
            col1,
        })
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row0..self.row1).contains(&r) && (self.col0..self.col1).contains(&c)
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.row1 <= height && self.col1 <= width
    }

    pub fn intersection_area(&self, other: &Roi) -> usize {
        let h = self
            .row1
            .min(other.row1)
            .saturating_sub(self.row0.max(other.row0));
        let w = self
            .col1
            .min(other.col1)
            .saturating_sub(self.col0.max(other.col0));
        h * w
    }

    /// Same rectangle expressed on a grid `factor` times finer.
    pub fn scaled(&self, factor: usize) -> Roi {
        Roi {
            row0: self.row0 * factor,
            col0: self.col0 * factor,
            row1: self.row1 * factor,
            col1: self.col1 * factor,
        }
    }
}

/// Dense vector in the shared alignment space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedVec {
    values: Vec<f64>,
    normalized: bool,
}

impl EmbedVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid!("embedding must have dim >= 1"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding component {i}")));
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// True when produced by [`l2_normalize`].
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn dot(&self, other: &EmbedVec) -> f64 {
        dot(&self.values, &other.values)
    }
}

impl TryFrom<Vec<f64>> for EmbedVec {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        EmbedVec::new(values)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Reduction used by [`pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Average,
    Max,
}

/// Bilinear upsampling by an integer factor with half-pixel centers
/// (align-corners = false). Source coordinates are clamped to the grid.
pub fn bilinear_upsample(grid: &FeatureGrid, factor: usize) -> Result<FeatureGrid> {
    if factor == 0 {
        return Err(invalid!("upsample factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let (h, w, ch) = (grid.height, grid.width, grid.channels);
    let (oh, ow) = (h * factor, w * factor);
    let rows: Vec<_> = (0..oh).map(|i| source_coord(i, factor, h)).collect();
    let cols: Vec<_> = (0..ow).map(|j| source_coord(j, factor, w)).collect();

    let mut data = Vec::with_capacity(oh * ow * ch);
    for &(r0, r1, ty) in &rows {
        for &(c0, c1, tx) in &cols {
            for k in 0..ch {
                let top = lerp(grid.get(r0, c0, k), grid.get(r0, c1, k), tx);
                let bottom = lerp(grid.get(r1, c0, k), grid.get(r1, c1, k), tx);
                data.push(lerp(top, bottom, ty));
            }
        }
    }
    FeatureGrid::new(oh, ow, ch, data)
}

/// `a + t(b - a)`: exact when `a == b`, so constant grids stay constant.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Lower/upper source index and interpolation weight for output index `i`.
fn source_coord(i: usize, factor: usize, len: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    let t = if hi == lo { 0.0 } else { src - lo as f64 };
    (lo, hi, t)
}

/// Copies the cells inside `roi`.
pub fn crop(grid: &FeatureGrid, roi: &Roi) -> Result<FeatureGrid> {
    if !roi.fits_in(grid.height, grid.width) || roi.row1 <= roi.row0 || roi.col1 <= roi.col0 {
        return Err(Error::Bounds(format!(
            "roi {roi:?} outside {}x{} grid",
            grid.height, grid.width
        )));
    }
    let ch = grid.channels;
    let mut data = Vec::with_capacity(roi.area() * ch);
    for r in roi.row0..roi.row1 {
        let start = grid.offset(r, roi.col0, 0);
        let end = grid.offset(r, roi.col1 - 1, 0) + ch;
        data.extend_from_slice(&grid.data[start..end]);
    }
    FeatureGrid::new(roi.height(), roi.width(), ch, data)
}

/// Half-open bin `[floor(b*len/bins), floor((b+1)*len/bins))`.
#[inline]
pub(crate) fn bin_range(b: usize, bins: usize, len: usize) -> std::ops::Range<usize> {
    (b * len / bins)..((b + 1) * len / bins)
}

/// Adaptive pooling to `out_h x out_w`, per channel.
pub fn pool(grid: &FeatureGrid, out_h: usize, out_w: usize, mode: PoolMode) -> Result<FeatureGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("pool output dims must be positive"));
    }
    if out_h > grid.height || out_w > grid.width {
        return Err(invalid!(
            "pool output {out_h}x{out_w} exceeds input {}x{}",
            grid.height,
            grid.width
        ));
    }
    let ch = grid.channels;
    let mut data = Vec::with_capacity(out_h * out_w * ch);
    for br in 0..out_h {
        let rows = bin_range(br, out_h, grid.height);
        for bc in 0..out_w {
            let cols = bin_range(bc, out_w, grid.width);
            let count = (rows.len() * cols.len()) as f64;
            for k in 0..ch {
                let cells = rows
                    .clone()
                    .flat_map(|r| cols.clone().map(move |c| (r, c)))
                    .map(|(r, c)| grid.get(r, c, k));
                let v = match mode {
                    PoolMode::Average => cells.sum::<f64>() / count,
                    PoolMode::Max => cells.fold(f64::NEG_INFINITY, f64::max),
                };
                data.push(v);
            }
        }
    }
    FeatureGrid::new(out_h, out_w, ch, data)
}

/// Adaptive average pooling that also accepts outputs larger than the input:
/// every bin covers at least one source row/column, so small boxes replicate
/// cells across bins. For `out <= len` the bins equal those of [`pool`].
pub fn roi_pool(grid: &FeatureGrid, out_h: usize, out_w: usize) -> Result<FeatureGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("pool output dims must be positive"));
    }
    let nonempty = |b: usize, bins: usize, len: usize| {
        let lo = (b * len / bins).min(len - 1);
        let hi = ((b + 1) * len / bins).max(lo + 1);
        lo..hi
    };
    let ch = grid.channels;
    let mut data = Vec::with_capacity(out_h * out_w * ch);
    for br in 0..out_h {
        let rows = nonempty(br, out_h, grid.height);
        for bc in 0..out_w {
            let cols = nonempty(bc, out_w, grid.width);
            let count = (rows.len() * cols.len()) as f64;
            for k in 0..ch {
                let mut acc = 0.0;
                for r in rows.clone() {
                    for c in cols.clone() {
                        acc += grid.get(r, c, k);
                    }
                }
                data.push(acc / count);
            }
        }
    }
    FeatureGrid::new(out_h, out_w, ch, data)
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`, with
/// `radius = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid!("sigma must be positive, got {sigma}"));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let denom = 2.0 * sigma * sigma;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / denom).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Mirror an out-of-range index back into `[0, len)`, repeating the edge
/// sample (`cba|abc|cba`).
pub fn reflect_index(i: i64, len: usize) -> usize {
    let len = len as i64;
    if len == 1 {
        return 0;
    }
    let period = 2 * len;
    let m = i.rem_euclid(period);
    (if m < len { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur, horizontal pass then vertical pass, with
/// edge-repeating reflection at the borders.
pub fn gaussian_blur(grid: &FeatureGrid, sigma: f64) -> Result<FeatureGrid> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as i64;
    let (h, w, ch) = (grid.height, grid.width, grid.channels);

    let mut tmp = vec![0.0; h * w * ch];
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = 0.0;
                for (t, weight) in kernel.iter().enumerate() {
                    let src = reflect_index(c as i64 + t as i64 - radius, w);
                    acc += weight * grid.get(r, src, k);
                }
                tmp[(r * w + c) * ch + k] = acc;
            }
        }
    }
    let mut out = vec![0.0; h * w * ch];
    for r in 0..h {
        for c in 0..w {
            for k in 0..ch {
                let mut acc = 0.0;
                for (t, weight) in kernel.iter().enumerate() {
                    let src = reflect_index(r as i64 + t as i64 - radius, h);
                    acc += weight * tmp[(src * w + c) * ch + k];
                }
                out[(r * w + c) * ch + k] = acc;
            }
        }
    }
    FeatureGrid::new(h, w, ch, out)
}

/// Scales a nonzero vector to unit Euclidean norm.
pub fn l2_normalize(vec: &EmbedVec) -> Result<EmbedVec> {
    let n = vec.norm();
    if !(n > 0.0) {
        return Err(Error::DegenerateVector(
            "cannot l2-normalize a zero vector".into(),
        ));
    }
    Ok(EmbedVec {
        values: vec.values.iter().map(|v| v / n).collect(),
        normalized: true,
    })
}

/// `(x - mean) / sqrt(var + eps)` with population variance and no affine.
pub fn layer_norm(vec: &EmbedVec, eps: f64) -> Result<EmbedVec> {
    if eps < 0.0 {
        return Err(invalid!("layer_norm eps must be non-negative"));
    }
    let n = vec.dim() as f64;
    let mean = vec.values.iter().sum::<f64>() / n;
    let var = vec.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    let values = if denom > 0.0 {
        vec.values.iter().map(|v| (v - mean) / denom).collect()
    } else {
        vec![0.0; vec.dim()]
    };
    EmbedVec::new(values)
}
