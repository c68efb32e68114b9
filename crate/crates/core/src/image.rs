//! Band-major hyperspectral rasters and binary change maps.

use std::fmt;

use crate::error::{Error, Result};

/// Shape of a band-major cube: `bands × rows × cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub bands: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(bands: usize, rows: usize, cols: usize) -> Self {
        Self { bands, rows, cols }
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.bands * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.bands, self.rows, self.cols)
    }
}

/// A multiband image stored band after band.
///
/// Entry `(b, r, c)` lives at `b * rows * cols + r * cols + c`, so each band is a
/// contiguous row-major plane and a pixel's spectrum is strided by `rows * cols`.
/// Latent and observed radiance images are nonnegative; change images may not be.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperImage {
    shape: Shape,
    data: Vec<f64>,
}

impl HyperImage {
    pub fn zeros(bands: usize, rows: usize, cols: usize) -> Self {
        Self {
            shape: Shape::new(bands, rows, cols),
            data: vec![0.0; bands * rows * cols],
        }
    }

    pub fn filled(bands: usize, rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: Shape::new(bands, rows, cols),
            data: vec![value; bands * rows * cols],
        }
    }

    pub fn zeros_like(other: &HyperImage) -> Self {
        Self::zeros(other.bands(), other.rows(), other.cols())
    }

    pub fn from_vec(bands: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(bands, rows, cols);
        if data.len() != shape.len() {
            return Err(Error::shape("HyperImage::from_vec", shape.len(), data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite entry at index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(
        bands: usize,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(bands * rows * cols);
        for b in 0..bands {
            for r in 0..rows {
                for c in 0..cols {
                    data.push(f(b, r, c));
                }
            }
        }
        Self {
            shape: Shape::new(bands, rows, cols),
            data,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn bands(&self) -> usize {
        self.shape.bands
    }
    pub fn rows(&self) -> usize {
        self.shape.rows
    }
    pub fn cols(&self) -> usize {
        self.shape.cols
    }
    pub fn pixels(&self) -> usize {
        self.shape.pixels()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f64 {
        self.data[(band * self.shape.rows + row) * self.shape.cols + col]
    }

    pub fn set(&mut self, band: usize, row: usize, col: usize, value: f64) {
        let idx = (band * self.shape.rows + row) * self.shape.cols + col;
        self.data[idx] = value;
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Spectral column of pixel `p` (row-major pixel index).
    pub fn pixel(&self, p: usize) -> PixelColumn<'_> {
        PixelColumn {
            image: self,
            pixel: p,
        }
    }

    pub fn set_pixel(&mut self, p: usize, values: &[f64]) {
        let n = self.pixels();
        for (b, v) in values.iter().enumerate() {
            self.data[b * n + p] = *v;
        }
    }

    pub fn ensure_shape(&self, expected: Shape, context: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(context, expected, self.shape));
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> HyperImage {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> HyperImage {
        HyperImage {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + k * other`.
    pub fn axpy(&self, k: f64, other: &HyperImage) -> Result<HyperImage> {
        other.ensure_shape(self.shape, "axpy")?;
        Ok(HyperImage {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + k * b)
                .collect(),
        })
    }

    pub fn add(&self, other: &HyperImage) -> Result<HyperImage> {
        self.axpy(1.0, other)
    }

    pub fn dot(&self, other: &HyperImage) -> Result<f64> {
        other.ensure_shape(self.shape, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&v| v >= 0.0)
    }
}

/// Strided view over one pixel's spectrum.
#[derive(Clone, Copy)]
pub struct PixelColumn<'a> {
    image: &'a HyperImage,
    pixel: usize,
}

impl<'a> PixelColumn<'a> {
    pub fn len(&self) -> usize {
        self.image.bands()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, band: usize) -> f64 {
        self.image.data[band * self.image.pixels() + self.pixel]
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + 'a {
        let n = self.image.pixels();
        let p = self.pixel;
        let data = &self.image.data;
        (0..self.image.bands()).map(move |b| data[b * n + p])
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.iter().collect()
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Pixel-wise difference `a - b`.
pub fn image_sub(a: &HyperImage, b: &HyperImage) -> Result<HyperImage> {
    a.axpy(-1.0, b)
}

pub fn frobenius_norm(a: &HyperImage) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Sum over pixels of the Euclidean norm of each spectral column.
pub fn group21_norm(a: &HyperImage) -> f64 {
    pixel_norms(a).into_iter().sum()
}

/// Euclidean norm of every pixel's spectral column, row-major. Columns are
/// rescaled by their largest entry so tiny nonzero columns stay nonzero.
pub fn pixel_norms(a: &HyperImage) -> Vec<f64> {
    let n = a.pixels();
    let mut scale = vec![0.0f64; n];
    for b in 0..a.bands() {
        for (s, v) in scale.iter_mut().zip(a.band(b)) {
            *s = s.max(v.abs());
        }
    }
    let mut acc = vec![0.0; n];
    for b in 0..a.bands() {
        for ((s, v), k) in acc.iter_mut().zip(a.band(b)).zip(&scale) {
            if *k > 0.0 {
                *s += (v / k) * (v / k);
            }
        }
    }
    acc.into_iter().zip(scale).map(|(s, k)| k * s.sqrt()).collect()
}

/// Per-pixel {0,1} labelling; 1 marks a changed pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl BinaryMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("BinaryMap::from_vec", rows * cols, data.len()));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Invalid(format!("binary map entry {v} is not 0 or 1")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_bools(rows: usize, cols: usize, flags: impl IntoIterator<Item = bool>) -> Result<Self> {
        Self::from_vec(rows, cols, flags.into_iter().map(u8::from).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_changed(&self, p: usize) -> bool {
        self.data[p] == 1
    }

    pub fn set(&mut self, p: usize, changed: bool) {
        self.data[p] = u8::from(changed);
    }

    pub fn count_changed(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Indices of changed pixels.
    pub fn changed(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.is_changed(p)).collect()
    }

    pub fn unchanged(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| !self.is_changed(p)).collect()
    }
}
