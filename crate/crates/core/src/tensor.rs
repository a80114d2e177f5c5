//! Dense float grids: encoder feature maps, shared-resolution token grids and
//! flattened token matrices.
//!
//! Everything is row-major with the channel axis innermost, so cell `(y, x)`
//! of a grid with `c` channels lives at `data[(y * width + x) * c..][..c]`.
//!
//! Resampling conventions:
//! * bilinear uses align-corners geometry: output index `i` samples source
//!   coordinate `i * (src - 1) / (dst - 1)`, so the corner cells map exactly;
//! * nearest uses half-pixel centres and rounds ties toward the smaller
//!   source index.

use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors and left untouched.
pub const ZERO_NORM: f64 = 1e-12;

/// An `H x W x C` feature map as delivered by an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::validation(format!(
                "feature map {height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        ensure_finite(&data)?;
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A square `d x d x C` grid at the shared token resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    d: usize,
    channels: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl TokenGrid {
    pub fn new(d: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != d * d * channels {
            return Err(Error::validation(format!(
                "token grid {d}x{d}x{channels} needs {} values, got {}",
                d * d * channels,
                data.len()
            )));
        }
        ensure_finite(&data)?;
        Ok(Self {
            d,
            channels,
            data,
            normalized: false,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Channel vector of cell `index = y * d + x`.
    pub fn cell(&self, index: usize) -> &[f32] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn cells(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.channels.max(1))
    }

    /// Unit-normalize every cell vector; zero cells pass through.
    pub fn normalized(mut self) -> Self {
        normalize_rows_in_place(&mut self.data, self.channels);
        self.normalized = true;
        self
    }

    pub fn as_feature_map(&self) -> FeatureMap {
        FeatureMap {
            height: self.d,
            width: self.d,
            channels: self.channels,
            data: self.data.clone(),
        }
    }
}

/// Row-stacked token vectors: one row per (view, cell).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::validation(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stack the flattened grids of `n` views into an `n*d*d x C` matrix.
    pub fn stack(grids: &[TokenGrid]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::validation("cannot stack zero token grids"))?;
        let (d, channels) = (first.d, first.channels);
        let mut data = Vec::with_capacity(grids.len() * d * d * channels);
        for (view, g) in grids.iter().enumerate() {
            if g.d != d || g.channels != channels {
                return Err(Error::validation(format!(
                    "view {view} grid is {}x{}x{}, expected {d}x{d}x{channels}",
                    g.d, g.d, g.channels
                )));
            }
            data.extend_from_slice(&g.data);
        }
        Self::new(grids.len() * d * d, channels, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.rows).map(move |r| self.row(r))
    }
}

pub(crate) fn ensure_finite(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::validation(format!(
            "non-finite value {} at index {i}",
            data[i]
        ))),
        None => Ok(()),
    }
}

/// Euclidean norm accumulated in f64.
pub(crate) fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub(crate) fn normalize_in_place(v: &mut [f32]) {
    let n = norm(v);
    if n >= ZERO_NORM {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / n) as f32;
        }
    }
}

pub(crate) fn normalize_rows_in_place(data: &mut [f32], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks_exact_mut(cols) {
        normalize_in_place(row);
    }
}

/// Unit-normalize every row. Rows with norm below [`ZERO_NORM`] are returned
/// unchanged.
pub fn l2_normalize(vectors: &TokenMatrix) -> Result<TokenMatrix> {
    ensure_finite(&vectors.data)?;
    let mut out = vectors.clone();
    normalize_rows_in_place(&mut out.data, out.cols);
    Ok(out)
}

/// Bilinear (align-corners) resampling to the shared `d x d` grid.
pub fn resize_bilinear(src: &FeatureMap, d: usize) -> Result<TokenGrid> {
    if d == 0 {
        return Err(Error::validation("target size d must be at least 1"));
    }
    let out = resample_bilinear(src, d, d)?;
    Ok(TokenGrid {
        d,
        channels: out.channels,
        data: out.data,
        normalized: false,
    })
}

/// Nearest-neighbour resampling to the shared `d x d` grid.
pub fn resize_nearest(src: &FeatureMap, d: usize) -> Result<TokenGrid> {
    if d == 0 {
        return Err(Error::validation("target size d must be at least 1"));
    }
    if src.is_empty() {
        return Err(Error::validation("cannot resample an empty feature map"));
    }
    let rows: Vec<usize> = (0..d).map(|i| nearest_source(i, src.height, d)).collect();
    let cols: Vec<usize> = (0..d).map(|i| nearest_source(i, src.width, d)).collect();
    let c = src.channels;
    let mut data = Vec::with_capacity(d * d * c);
    for &sy in &rows {
        for &sx in &cols {
            data.extend_from_slice(src.cell(sy, sx));
        }
    }
    Ok(TokenGrid {
        d,
        channels: c,
        data,
        normalized: false,
    })
}

/// Source index nearest to the centre of output cell `i` (half-pixel
/// centres, exact integer arithmetic, ties toward the smaller index).
fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    // centre in source units: ((2i + 1) * src - dst) / (2 * dst)
    let num = (2 * i as i64 + 1) * src as i64 - dst as i64;
    let den = 2 * dst as i64;
    let lo = num.div_euclid(den);
    let rem = num.rem_euclid(den);
    let j = if 2 * rem > den { lo + 1 } else { lo };
    j.clamp(0, src as i64 - 1) as usize
}

/// Align-corners sample positions: (lower index, fraction) per output index.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, f32)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 2);
            (lo, (pos - lo as f64) as f32)
        })
        .collect()
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // a + t * (b - a) keeps constants exact; clamp guards rounding overshoot
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// Bilinear (align-corners) resampling to an arbitrary `height x width`.
pub fn resample_bilinear(src: &FeatureMap, height: usize, width: usize) -> Result<FeatureMap> {
    if height == 0 || width == 0 {
        return Err(Error::validation("target size must be non-zero"));
    }
    if src.is_empty() {
        return Err(Error::validation("cannot resample an empty feature map"));
    }
    if src.height == height && src.width == width {
        return Ok(src.clone());
    }
    let c = src.channels;
    let ys = bilinear_taps(src.height, height);
    let xs = bilinear_taps(src.width, width);
    let mut data = vec![0.0f32; height * width * c];
    for (oy, &(y0, ty)) in ys.iter().enumerate() {
        let y1 = (y0 + 1).min(src.height - 1);
        for (ox, &(x0, tx)) in xs.iter().enumerate() {
            let x1 = (x0 + 1).min(src.width - 1);
            let (a, b) = (src.cell(y0, x0), src.cell(y0, x1));
            let (p, q) = (src.cell(y1, x0), src.cell(y1, x1));
            let out = &mut data[(oy * width + ox) * c..][..c];
            for ch in 0..c {
                let top = lerp(a[ch], b[ch], tx);
                let bottom = lerp(p[ch], q[ch], tx);
                out[ch] = lerp(top, bottom, ty);
            }
        }
    }
    Ok(FeatureMap {
        height,
        width,
        channels: c,
        data,
    })
}

/// Flatten a grid into a `d*d x C` matrix; row `r` is cell `(r / d, r % d)`.
pub fn flatten(grid: &TokenGrid) -> TokenMatrix {
    TokenMatrix {
        rows: grid.d * grid.d,
        cols: grid.channels,
        data: grid.data.clone(),
    }
}

/// Inverse of [`flatten`].
pub fn unflatten(matrix: &TokenMatrix, d: usize) -> Result<TokenGrid> {
    if matrix.rows != d * d {
        return Err(Error::validation(format!(
            "{} rows cannot form a {d}x{d} grid",
            matrix.rows
        )));
    }
    TokenGrid::new(d, matrix.cols, matrix.data.clone())
}
