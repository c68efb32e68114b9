//! Linear degradation operators.
//!
//! `SpatialOp` blurs every band with a truncated Gaussian and keeps every d-th
//! pixel in both directions; `SpectralOp` maps each pixel's spectrum through a
//! response matrix. Both come with exact adjoints, used by the model-based
//! fusion solver and to backpropagate through the observation model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::HyperImage;
use crate::rng::Rng;

/// Index into a length-`n` signal under half-sample symmetric extension
/// (`... c b a | a b c ... x y z | z y x ...`).
pub fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let j = i.rem_euclid(period) as usize;
    if j < n {
        j
    } else {
        2 * n - 1 - j
    }
}

/// Normalized Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    if sigma <= 0.0 || radius == 0 {
        return vec![1.0];
    }
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub fn default_radius(sigma: f64) -> usize {
    (4.0 * sigma).ceil().max(0.0) as usize
}

/// Gaussian blur followed by regular decimation (offset 0).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialOp {
    blur_sigma: f64,
    kernel_radius: usize,
    factor: usize,
    kernel: Vec<f64>,
}

impl SpatialOp {
    pub fn new(blur_sigma: f64, factor: usize) -> Result<Self> {
        Self::with_radius(blur_sigma, default_radius(blur_sigma), factor)
    }

    pub fn with_radius(blur_sigma: f64, kernel_radius: usize, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Invalid("subsampling factor must be at least 1".into()));
        }
        if !blur_sigma.is_finite() || blur_sigma < 0.0 {
            return Err(Error::Invalid(format!("blur sigma {blur_sigma} must be finite and >= 0")));
        }
        Ok(Self {
            blur_sigma,
            kernel_radius,
            factor,
            kernel: gaussian_kernel(blur_sigma, kernel_radius),
        })
    }

    pub fn blur_sigma(&self) -> f64 {
        self.blur_sigma
    }
    pub fn kernel_radius(&self) -> usize {
        self.kernel_radius
    }
    pub fn factor(&self) -> usize {
        self.factor
    }
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn output_dims(&self, rows: usize, cols: usize) -> Result<(usize, usize)> {
        if !rows.is_multiple_of(self.factor) {
            return Err(Error::NotDivisible { dim: "rows", size: rows, factor: self.factor });
        }
        if !cols.is_multiple_of(self.factor) {
            return Err(Error::NotDivisible { dim: "cols", size: cols, factor: self.factor });
        }
        Ok((rows / self.factor, cols / self.factor))
    }

    /// The one-dimensional blur + decimate map along an axis of length `n`,
    /// as a row-major `(n / d) × n` matrix. A band plane `P` maps to
    /// `D_rows · P · D_colsᵀ`.
    pub fn axis_matrix(&self, n: usize) -> Vec<f64> {
        let (d, r) = (self.factor, self.kernel_radius as isize);
        let m = n / d;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for (t, w) in self.kernel.iter().enumerate() {
                out[i * n + reflect((i * d) as isize + t as isize - r, n)] += w;
            }
        }
        out
    }

    /// Blur + decimate one band plane.
    pub fn apply_plane(&self, input: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
        let (d, r) = (self.factor, self.kernel_radius as isize);
        let (orows, ocols) = (rows / d, cols / d);
        // Horizontal pass, evaluated only at kept columns.
        let mut tmp = vec![0.0; rows * ocols];
        for row in 0..rows {
            let line = &input[row * cols..(row + 1) * cols];
            let dst = &mut tmp[row * ocols..(row + 1) * ocols];
            for (oc, slot) in dst.iter_mut().enumerate() {
                let centre = (oc * d) as isize;
                let mut acc = 0.0;
                for (t, w) in self.kernel.iter().enumerate() {
                    acc += w * line[reflect(centre + t as isize - r, cols)];
                }
                *slot = acc;
            }
        }
        // Vertical pass at kept rows.
        for orow in 0..orows {
            let dst = &mut out[orow * ocols..(orow + 1) * ocols];
            dst.iter_mut().for_each(|v| *v = 0.0);
            let centre = (orow * d) as isize;
            for (t, w) in self.kernel.iter().enumerate() {
                let src_row = reflect(centre + t as isize - r, rows);
                let src = &tmp[src_row * ocols..(src_row + 1) * ocols];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }

    /// Adjoint of [`apply_plane`](Self::apply_plane): zero-fill upsampling
    /// followed by the transposed (scatter) blur. `out` is overwritten.
    pub fn adjoint_plane(&self, input: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
        let (d, r) = (self.factor, self.kernel_radius as isize);
        let (orows, ocols) = (rows / d, cols / d);
        let mut tmp = vec![0.0; rows * ocols];
        for orow in 0..orows {
            let src = &input[orow * ocols..(orow + 1) * ocols];
            let centre = (orow * d) as isize;
            for (t, w) in self.kernel.iter().enumerate() {
                let dst_row = reflect(centre + t as isize - r, rows);
                let dst = &mut tmp[dst_row * ocols..(dst_row + 1) * ocols];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for row in 0..rows {
            let src = &tmp[row * ocols..(row + 1) * ocols];
            let line = &mut out[row * cols..(row + 1) * cols];
            for (oc, g) in src.iter().enumerate() {
                let centre = (oc * d) as isize;
                for (t, w) in self.kernel.iter().enumerate() {
                    line[reflect(centre + t as isize - r, cols)] += w * g;
                }
            }
        }
    }
}

/// Per-pixel spectral response: each row holds one output band's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralOp {
    out_bands: usize,
    in_bands: usize,
    response: Vec<f64>,
}

impl SpectralOp {
    pub fn from_rows(out_bands: usize, in_bands: usize, response: Vec<f64>) -> Result<Self> {
        if response.len() != out_bands * in_bands {
            return Err(Error::shape("SpectralOp response", out_bands * in_bands, response.len()));
        }
        if response.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("spectral response has non-finite weights".into()));
        }
        Ok(Self { out_bands, in_bands, response })
    }

    pub fn identity(bands: usize) -> Self {
        let mut response = vec![0.0; bands * bands];
        for b in 0..bands {
            response[b * bands + b] = 1.0;
        }
        Self { out_bands: bands, in_bands: bands, response }
    }

    /// Average `width` contiguous bands per output band; the `m mod width`
    /// trailing bands are dropped.
    pub fn band_average(in_bands: usize, width: usize) -> Result<Self> {
        if width == 0 || width > in_bands {
            return Err(Error::Invalid(format!(
                "spectral grouping width {width} invalid for {in_bands} bands"
            )));
        }
        let out_bands = in_bands / width;
        let mut response = vec![0.0; out_bands * in_bands];
        for j in 0..out_bands {
            for b in j * width..(j + 1) * width {
                response[j * in_bands + b] = 1.0 / width as f64;
            }
        }
        Ok(Self { out_bands, in_bands, response })
    }

    pub fn out_bands(&self) -> usize {
        self.out_bands
    }
    pub fn in_bands(&self) -> usize {
        self.in_bands
    }
    pub fn response(&self) -> &[f64] {
        &self.response
    }
    pub fn weight(&self, out: usize, input: usize) -> f64 {
        self.response[out * self.in_bands + input]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.response.iter().map(|v| v * v).sum()
    }
}

/// The pair of degradations relating latent images to the two observations.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationPair {
    pub spatial: SpatialOp,
    pub spectral: SpectralOp,
}

pub fn apply_spatial(op: &SpatialOp, x: &HyperImage) -> Result<HyperImage> {
    let (rows, cols) = (x.rows(), x.cols());
    let (orows, ocols) = op.output_dims(rows, cols)?;
    let mut out = HyperImage::zeros(x.bands(), orows, ocols);
    let in_plane = rows * cols;
    out.data_mut()
        .par_chunks_mut(orows * ocols)
        .enumerate()
        .for_each(|(b, dst)| op.apply_plane(&x.data()[b * in_plane..(b + 1) * in_plane], rows, cols, dst));
    Ok(out)
}

/// Adjoint of [`apply_spatial`] back onto a `rows × cols` grid.
pub fn adjoint_spatial(op: &SpatialOp, y: &HyperImage, rows: usize, cols: usize) -> Result<HyperImage> {
    let (orows, ocols) = op.output_dims(rows, cols)?;
    if (y.rows(), y.cols()) != (orows, ocols) {
        return Err(Error::shape(
            "adjoint_spatial input",
            format!("{}x{orows}x{ocols}", y.bands()),
            y.shape(),
        ));
    }
    let mut out = HyperImage::zeros(y.bands(), rows, cols);
    let small = orows * ocols;
    out.data_mut()
        .par_chunks_mut(rows * cols)
        .enumerate()
        .for_each(|(b, dst)| op.adjoint_plane(&y.data()[b * small..(b + 1) * small], rows, cols, dst));
    Ok(out)
}

fn mix_bands(weights: &[f64], out_bands: usize, in_bands: usize, x: &HyperImage) -> HyperImage {
    let n = x.pixels();
    let mut out = HyperImage::zeros(out_bands, x.rows(), x.cols());
    out.data_mut().par_chunks_mut(n).enumerate().for_each(|(j, dst)| {
        for i in 0..in_bands {
            let w = weights[j * in_bands + i];
            if w != 0.0 {
                for (o, v) in dst.iter_mut().zip(x.band(i)) {
                    *o += w * v;
                }
            }
        }
    });
    out
}

pub fn apply_spectral(op: &SpectralOp, x: &HyperImage) -> Result<HyperImage> {
    if x.bands() != op.in_bands {
        return Err(Error::shape("apply_spectral bands", op.in_bands, x.bands()));
    }
    Ok(mix_bands(&op.response, op.out_bands, op.in_bands, x))
}

pub fn adjoint_spectral(op: &SpectralOp, y: &HyperImage) -> Result<HyperImage> {
    if y.bands() != op.out_bands {
        return Err(Error::shape("adjoint_spectral bands", op.out_bands, y.bands()));
    }
    let mut transposed = vec![0.0; op.response.len()];
    for j in 0..op.out_bands {
        for i in 0..op.in_bands {
            transposed[i * op.out_bands + j] = op.response[j * op.in_bands + i];
        }
    }
    Ok(mix_bands(&transposed, op.in_bands, op.out_bands, y))
}

/// Replace the blur width and perturb the spectral response with Gaussian
/// noise rescaled so that `10 log10(||L||² / ||E||²)` equals `snr_db`
/// exactly. An infinite SNR leaves the response untouched.
pub fn corrupt_operators(
    ops: &DegradationPair,
    blur_sigma: f64,
    snr_db: f64,
    rng: &mut Rng,
) -> Result<DegradationPair> {
    if snr_db.is_nan() {
        return Err(Error::Invalid("snr_db must not be NaN".into()));
    }
    let spatial = SpatialOp::new(blur_sigma, ops.spatial.factor())?;
    let spectral = if snr_db == f64::INFINITY {
        ops.spectral.clone()
    } else {
        let noise: Vec<f64> = (0..ops.spectral.response.len()).map(|_| rng.normal()).collect();
        let noise_sq: f64 = noise.iter().map(|v| v * v).sum();
        let target_sq = ops.spectral.frobenius_sq() / 10f64.powf(snr_db / 10.0);
        let k = (target_sq / noise_sq).sqrt();
        let response = ops
            .spectral
            .response
            .iter()
            .zip(&noise)
            .map(|(l, e)| l + k * e)
            .collect();
        SpectralOp::from_rows(ops.spectral.out_bands, ops.spectral.in_bands, response)?
    };
    Ok(DegradationPair { spatial, spectral })
}

/// Corrupted-operator scenario: a different blur and a noisy spectral response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    pub blur_sigma: f64,
    pub snr_db: f64,
    pub seed: u64,
}

/// Serializable operator descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub blur_sigma: f64,
    pub subsample_factor: usize,
    pub spectral_width: usize,
    #[serde(default)]
    pub kernel_radius: Option<usize>,
    #[serde(default)]
    pub corruption: Option<CorruptionConfig>,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            blur_sigma: 2.35,
            subsample_factor: 4,
            spectral_width: 4,
            kernel_radius: None,
            corruption: None,
        }
    }
}

impl OperatorConfig {
    /// Nominal operators for `bands` latent bands.
    pub fn build(&self, bands: usize) -> Result<DegradationPair> {
        let radius = self.kernel_radius.unwrap_or_else(|| default_radius(self.blur_sigma));
        Ok(DegradationPair {
            spatial: SpatialOp::with_radius(self.blur_sigma, radius, self.subsample_factor)?,
            spectral: SpectralOp::band_average(bands, self.spectral_width)?,
        })
    }

    /// Operators that actually generate the observations: the nominal pair,
    /// corrupted when a corruption block is present.
    pub fn build_actual(&self, bands: usize) -> Result<DegradationPair> {
        let nominal = self.build(bands)?;
        match &self.corruption {
            None => Ok(nominal),
            Some(c) => corrupt_operators(&nominal, c.blur_sigma, c.snr_db, &mut Rng::new(c.seed)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::frobenius_norm;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random(rng: &mut Rng, b: usize, r: usize, c: usize) -> HyperImage {
        HyperImage::from_fn(b, r, c, |_, _, _| rng.normal())
    }

    /// Dense matrix of the single-band blur+decimate map, assembled from the
    /// definition (sum of kernel taps landing on each reflected index).
    fn dense_spatial(op: &SpatialOp, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        let d = op.factor();
        let r = op.kernel_radius() as isize;
        let k = op.kernel();
        let (orows, ocols) = (rows / d, cols / d);
        let mut m = vec![vec![0.0; rows * cols]; orows * ocols];
        for orow in 0..orows {
            for ocol in 0..ocols {
                for (ty, wy) in k.iter().enumerate() {
                    for (tx, wx) in k.iter().enumerate() {
                        let y = reflect((orow * d) as isize + ty as isize - r, rows);
                        let x = reflect((ocol * d) as isize + tx as isize - r, cols);
                        m[orow * ocols + ocol][y * cols + x] += wy * wx;
                    }
                }
            }
        }
        m
    }

    #[test]
    fn plane_operator_is_separable() {
        let op = SpatialOp::new(2.35, 4).unwrap();
        let (rows, cols) = (16, 12);
        let mut rng = Rng::new(31);
        let plane: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
        let mut direct = vec![0.0; rows * cols / 16];
        op.apply_plane(&plane, rows, cols, &mut direct);
        let (dr, dc) = (op.axis_matrix(rows), op.axis_matrix(cols));
        for i in 0..rows / 4 {
            for j in 0..cols / 4 {
                let mut acc = 0.0;
                for a in 0..rows {
                    for b in 0..cols {
                        acc += dr[i * rows + a] * plane[a * cols + b] * dc[j * cols + b];
                    }
                }
                assert!((acc - direct[i * (cols / 4) + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let idx: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        // Radii wider than the signal keep folding.
        assert_eq!(reflect(-9, 4), reflect(-1, 4));
    }

    #[test]
    fn kernel_symmetric_and_normalized() {
        for sigma in [0.5, 1.7, 2.35, 4.0] {
            let k = gaussian_kernel(sigma, default_radius(sigma));
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..k.len() {
                assert_eq!(k[i], k[k.len() - 1 - i]);
            }
        }
        assert_eq!(default_radius(2.35), 10);
    }

    #[test]
    fn full_scale_dims_spatial() {
        let op = SpatialOp::new(2.35, 4).unwrap();
        let x = HyperImage::filled(224, 120, 120, 0.3);
        let y = apply_spatial(&op, &x).unwrap();
        assert_eq!((y.bands(), y.rows(), y.cols()), (224, 30, 30));
        assert_eq!(x.pixels(), 16 * y.pixels());
    }

    #[test]
    fn constant_preserved() {
        let op = SpatialOp::new(2.35, 4).unwrap();
        let y = apply_spatial(&op, &HyperImage::filled(2, 16, 8, 1.7)).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.7).abs() < 1e-12));
    }

    #[test]
    fn non_divisible_names_dimension() {
        let op = SpatialOp::new(1.0, 4).unwrap();
        let err = apply_spatial(&op, &HyperImage::zeros(1, 8, 10)).unwrap_err();
        assert!(err.to_string().contains("cols"), "{err}");
        let err = apply_spatial(&op, &HyperImage::zeros(1, 9, 8)).unwrap_err();
        assert!(err.to_string().contains("rows"), "{err}");
    }

    #[test]
    fn spatial_matches_dense_matrix_on_ramp() {
        let op = SpatialOp::new(1.3, 2).unwrap();
        let x = HyperImage::from_fn(1, 8, 8, |_, r, c| (r * 8 + c) as f64);
        let y = apply_spatial(&op, &x).unwrap();
        let m = dense_spatial(&op, 8, 8);
        for (i, row) in m.iter().enumerate() {
            let expected: f64 = row.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            assert!((y.data()[i] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn spatial_adjoint_matches_dense_transpose() {
        // Radius 10 on a 6x6 grid exercises repeated folding.
        let op = SpatialOp::new(2.35, 2).unwrap();
        let mut rng = Rng::new(5);
        let y = random(&mut rng, 1, 3, 3);
        let xt = adjoint_spatial(&op, &y, 6, 6).unwrap();
        let m = dense_spatial(&op, 6, 6);
        for j in 0..36 {
            let expected: f64 = (0..9).map(|i| m[i][j] * y.data()[i]).sum();
            assert!((xt.data()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn full_scale_dims_spectral() {
        let op = SpectralOp::band_average(224, 4).unwrap();
        assert_eq!(op.out_bands(), 56);
        let y = apply_spectral(&op, &HyperImage::filled(224, 2, 2, 1.0)).unwrap();
        assert_eq!(y.bands(), 56);
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn band_average_drops_remainder() {
        let op = SpectralOp::band_average(10, 4).unwrap();
        assert_eq!(op.out_bands(), 2);
        assert_eq!(op.weight(1, 7), 0.25);
        assert_eq!(op.weight(1, 8), 0.0);
        for j in 0..2 {
            let s: f64 = (0..10).map(|i| op.weight(j, i)).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn spectral_identity() {
        let mut rng = Rng::new(8);
        let x = random(&mut rng, 5, 3, 2);
        let id = SpectralOp::identity(5);
        assert_eq!(apply_spectral(&id, &x).unwrap(), x);
        assert_eq!(adjoint_spectral(&id, &x).unwrap(), x);
    }

    #[test]
    fn spectral_matches_loop_oracle() {
        let mut rng = Rng::new(9);
        let x = random(&mut rng, 6, 2, 2);
        let w: Vec<f64> = (0..12).map(|_| rng.uniform()).collect();
        let op = SpectralOp::from_rows(2, 6, w.clone()).unwrap();
        let y = apply_spectral(&op, &x).unwrap();
        for p in 0..4 {
            for j in 0..2 {
                let mut s = 0.0;
                for i in 0..6 {
                    s += w[j * 6 + i] * x.pixel(p).get(i);
                }
                assert!((y.pixel(p).get(j) - s).abs() < 1e-14);
            }
        }
        assert!(apply_spectral(&op, &HyperImage::zeros(5, 2, 2)).is_err());
    }

    #[test]
    fn adjoint_identities_random() {
        let mut rng = Rng::new(11);
        let sp = SpatialOp::new(2.35, 4).unwrap();
        let spec = SpectralOp::band_average(12, 4).unwrap();
        for _ in 0..10 {
            let x = random(&mut rng, 12, 16, 8);
            let y1 = random(&mut rng, 12, 4, 2);
            let lhs = apply_spatial(&sp, &x).unwrap().dot(&y1).unwrap();
            let rhs = x.dot(&adjoint_spatial(&sp, &y1, 16, 8).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));

            let y2 = random(&mut rng, 3, 16, 8);
            let lhs = apply_spectral(&spec, &x).unwrap().dot(&y2).unwrap();
            let rhs = x.dot(&adjoint_spectral(&spec, &y2).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
        }
    }

    #[test]
    fn corruption_parameters_and_snr() {
        let nominal = OperatorConfig::default().build(224).unwrap();
        let mut rng = Rng::new(3);
        let c = corrupt_operators(&nominal, 1.70, 8.0, &mut rng).unwrap();
        assert_eq!(c.spatial.blur_sigma(), 1.70);
        assert_eq!(c.spatial.factor(), 4);
        let noise_sq: f64 = c
            .spectral
            .response()
            .iter()
            .zip(nominal.spectral.response())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let snr = 10.0 * (nominal.spectral.frobenius_sq() / noise_sq).log10();
        assert!((snr - 8.0).abs() < 1e-9);

        let clean = corrupt_operators(&nominal, 1.70, f64::INFINITY, &mut rng).unwrap();
        assert_eq!(clean.spectral, nominal.spectral);
    }

    #[test]
    fn corruption_snr_monte_carlo() {
        let nominal = OperatorConfig::default().build(32).unwrap();
        for seed in 0..100 {
            let c = corrupt_operators(&nominal, 1.70, 8.0, &mut Rng::new(seed)).unwrap();
            let noise_sq: f64 = c
                .spectral
                .response()
                .iter()
                .zip(nominal.spectral.response())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let snr = 10.0 * (nominal.spectral.frobenius_sq() / noise_sq).log10();
            assert!((snr - 8.0).abs() < 0.5, "seed {seed}: {snr}");
        }
    }

    #[test]
    fn operator_config_parses() {
        let cfg: OperatorConfig = toml::from_str(
            "blur_sigma = 2.35\nsubsample_factor = 4\nspectral_width = 4\n[corruption]\nblur_sigma = 1.7\nsnr_db = 8.0\nseed = 1\n",
        )
        .unwrap();
        assert_eq!(cfg.corruption.as_ref().unwrap().snr_db, 8.0);
        assert!(toml::from_str::<OperatorConfig>("blur_sigma = 1.0\nsubsample_factor = 2\nspectral_width = 2\nbogus = 1\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn spatial_is_linear(seed in any::<u64>(), lambda in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let op = SpatialOp::new(1.5, 2).unwrap();
            let a = random(&mut rng, 2, 8, 6);
            let b = random(&mut rng, 2, 8, 6);
            let lhs = apply_spatial(&op, &a.axpy(lambda, &b).unwrap()).unwrap();
            let rhs = apply_spatial(&op, &a).unwrap().axpy(lambda, &apply_spatial(&op, &b).unwrap()).unwrap();
            let err = frobenius_norm(&lhs.axpy(-1.0, &rhs).unwrap());
            prop_assert!(err <= 1e-9 * frobenius_norm(&lhs).max(1.0));
        }

        #[test]
        fn spatial_commutes_with_band_permutation(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let op = SpatialOp::new(1.0, 2).unwrap();
            let x = random(&mut rng, 3, 4, 4);
            let perm = [2usize, 0, 1];
            let px = HyperImage::from_fn(3, 4, 4, |b, r, c| x.get(perm[b], r, c));
            let y = apply_spatial(&op, &x).unwrap();
            let py = apply_spatial(&op, &px).unwrap();
            for b in 0..3 {
                prop_assert_eq!(py.band(b), y.band(perm[b]));
            }
        }

        #[test]
        fn spectral_commutes_with_pixel_permutation(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let op = SpectralOp::band_average(8, 2).unwrap();
            let x = random(&mut rng, 8, 3, 3);
            let mut perm: Vec<usize> = (0..9).collect();
            rng.shuffle(&mut perm);
            let px = HyperImage::from_fn(8, 3, 3, |b, r, c| x.pixel(perm[r * 3 + c]).get(b));
            let y = apply_spectral(&op, &x).unwrap();
            let py = apply_spectral(&op, &px).unwrap();
            for p in 0..9 {
                prop_assert_eq!(py.pixel(p).to_vec(), y.pixel(perm[p]).to_vec());
            }
        }
    }
}
