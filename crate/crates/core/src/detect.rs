//! Change-map extraction from a change image: pixel energy, optional median
//! regularization, Otsu or manual thresholding.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{pixel_norms, BinaryMap, HyperImage};
use crate::io;
use crate::operators::reflect;

pub const OTSU_BINS: usize = 256;

/// Nonnegative per-pixel change energy.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    rows: usize,
    cols: usize,
    e: Vec<f64>,
}

impl EnergyMap {
    pub fn new(rows: usize, cols: usize, e: Vec<f64>) -> Result<Self> {
        if e.len() != rows * cols {
            return Err(Error::shape("energy map", rows * cols, e.len()));
        }
        if e.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("energy values must be finite and nonnegative".into()));
        }
        Ok(Self { rows, cols, e })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.e
    }

    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }

    /// Stored as a single-band cube.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_cube(path, &HyperImage::from_vec(1, self.rows, self.cols, self.e.clone())?)
    }

    /// Accepts a single-band energy cube or a multi-band change image, whose
    /// energy is computed on load.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = io::read_cube(path)?;
        if img.bands() == 1 {
            Self::new(img.rows(), img.cols(), img.into_vec())
        } else {
            Ok(cva_energy(&img))
        }
    }
}

/// `e_i = ||Δx_i||₂`.
pub fn cva_energy(ci: &HyperImage) -> EnergyMap {
    EnergyMap {
        rows: ci.rows(),
        cols: ci.cols(),
        e: pixel_norms(ci),
    }
}

/// Median filter over a `(2r+1)²` window with symmetric boundaries.
pub fn smooth(e: &EnergyMap, radius: usize) -> EnergyMap {
    if radius == 0 {
        return e.clone();
    }
    let (rows, cols) = (e.rows, e.cols);
    let r = radius as isize;
    let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            window.clear();
            for di in -r..=r {
                let ii = reflect(i as isize + di, rows);
                for dj in -r..=r {
                    window.push(e.e[ii * cols + reflect(j as isize + dj, cols)]);
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
            out[i * cols + j] = *m;
        }
    }
    EnergyMap { rows, cols, e: out }
}

/// Otsu threshold on `OTSU_BINS` uniform bins over `[min, max]`.
///
/// Candidate thresholds are the interior bin edges. Among separate maxima of
/// the between-class variance the smallest edge wins; a run of adjacent edges
/// sharing the maximum (an empty gap between classes) resolves to the middle
/// of the run.
pub fn otsu_threshold(e: &EnergyMap) -> Result<f64> {
    let (lo, hi) = e
        .e
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if e.e.is_empty() || hi <= lo {
        return Err(Error::DegenerateHistogram);
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut hist = [0usize; OTSU_BINS];
    for &v in &e.e {
        hist[(((v - lo) / width) as usize).min(OTSU_BINS - 1)] += 1;
    }
    let centre = |i: usize| lo + (i as f64 + 0.5) * width;
    let total = e.e.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| h as f64 * centre(i)).sum();

    // var[t]: split between bins ..=t and t+1.., i.e. at edge t + 1.
    let (mut w0, mut s0) = (0.0, 0.0);
    let mut var = [f64::NEG_INFINITY; OTSU_BINS - 1];
    for (t, &h) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += h as f64;
        s0 += h as f64 * centre(t);
        let w1 = total - w0;
        if w0 > 0.0 && w1 > 0.0 {
            let (m0, m1) = (s0 / w0, (sum_all - s0) / w1);
            var[t] = w0 * w1 * (m0 - m1).powi(2) / (total * total);
        }
    }
    let best = var.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first = var.iter().position(|&v| v == best).expect("two distinct values give a valid split");
    let last = first + var[first..].iter().take_while(|&&v| v == best).count() - 1;
    Ok(lo + ((first + last) as f64 / 2.0 + 1.0) * width)
}

/// `d_i = 1` iff `e_i > τ`.
pub fn threshold_map(e: &EnergyMap, tau: f64) -> BinaryMap {
    BinaryMap::from_bools(e.rows, e.cols, e.e.iter().map(|&v| v > tau)).expect("sizes agree")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    Otsu,
    Fixed(f64),
}

/// CI → energy → optional smoothing → threshold.
pub fn detect(ci: &HyperImage, mode: ThresholdMode, smooth_radius: usize) -> Result<(BinaryMap, f64)> {
    let e = smooth(&cva_energy(ci), smooth_radius);
    let tau = match mode {
        ThresholdMode::Otsu => otsu_threshold(&e)?,
        ThresholdMode::Fixed(t) => t,
    };
    Ok((threshold_map(&e, tau), tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn emap(rows: usize, cols: usize, e: Vec<f64>) -> EnergyMap {
        EnergyMap::new(rows, cols, e).unwrap()
    }

    #[test]
    fn energy_trivial_and_loop_oracle() {
        assert!(cva_energy(&HyperImage::zeros(3, 4, 4)).values().iter().all(|&v| v == 0.0));
        let mut ci = HyperImage::zeros(2, 1, 1);
        ci.set(0, 0, 0, 3.0);
        ci.set(1, 0, 0, 4.0);
        assert_eq!(cva_energy(&ci).values(), &[5.0]);

        let mut rng = Rng::new(5);
        let ci = HyperImage::from_fn(3, 5, 5, |_, _, _| rng.uniform_range(-1.0, 1.0));
        let e = cva_energy(&ci);
        for r in 0..5 {
            for c in 0..5 {
                let mut s = 0.0;
                for b in 0..3 {
                    s += ci.get(b, r, c) * ci.get(b, r, c);
                }
                assert!((e.values()[r * 5 + c] - s.sqrt()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_energy_iff_zero_column() {
        let mut ci = HyperImage::zeros(3, 2, 2);
        ci.set(2, 1, 1, -1e-200);
        let e = cva_energy(&ci);
        assert_eq!(e.values()[..3], [0.0, 0.0, 0.0]);
        assert!(e.values()[3] > 0.0);
    }

    #[test]
    fn smooth_identity_constant_and_outlier() {
        let e = emap(3, 3, (0..9).map(|v| v as f64).collect());
        assert_eq!(smooth(&e, 0), e);
        let c = emap(4, 5, vec![0.7; 20]);
        assert_eq!(smooth(&c, 2), c);
        let mut vals = vec![0.1, 0.2, 0.3, 0.4, 9.0, 0.5, 0.6, 0.7, 0.8];
        let out = smooth(&emap(3, 3, vals.clone()), 1);
        vals.sort_by(f64::total_cmp);
        assert_eq!(out.values()[4], vals[4]);
    }

    #[test]
    fn smooth_matches_direct_median_with_reflection() {
        let mut rng = Rng::new(2);
        let e = emap(5, 6, (0..30).map(|_| rng.uniform()).collect());
        let out = smooth(&e, 1);
        // Corner (0,0): reflected window rows {0,0,1} × cols {0,0,1}.
        let g = |r: usize, c: usize| e.values()[r * 6 + c];
        let mut w = vec![g(0, 0), g(0, 0), g(0, 1), g(0, 0), g(0, 0), g(0, 1), g(1, 0), g(1, 0), g(1, 1)];
        w.sort_by(f64::total_cmp);
        assert_eq!(out.values()[0], w[4]);
    }

    #[test]
    fn otsu_bimodal() {
        let mut rng = Rng::new(9);
        let e: Vec<f64> = (0..2000)
            .map(|i| (if i % 2 == 0 { 0.1 } else { 0.9 } + 0.02 * rng.normal()).max(0.0))
            .collect();
        let tau = otsu_threshold(&emap(40, 50, e)).unwrap();
        assert!(tau > 0.3 && tau < 0.7, "{tau}");
    }

    #[test]
    fn otsu_two_values() {
        let e = emap(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let tau = otsu_threshold(&e).unwrap();
        assert!(tau > 0.0 && tau < 1.0);
        assert_eq!(threshold_map(&e, tau).data(), &[0, 1, 0, 1]);
    }

    #[test]
    fn otsu_degenerate() {
        assert!(matches!(otsu_threshold(&emap(2, 2, vec![0.3; 4])), Err(Error::DegenerateHistogram)));
    }

    /// Exhaustive search: every edge, class statistics recomputed from the
    /// raw values each time.
    pub(crate) fn brute_force_otsu(e: &[f64]) -> f64 {
        let lo = e.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w = (hi - lo) / 256.0;
        let bin = |v: f64| (((v - lo) / w) as usize).min(255);
        let centre = |v: f64| lo + (bin(v) as f64 + 0.5) * w;
        let n = e.len() as f64;
        let scores: Vec<(usize, f64)> = (1..256)
            .filter_map(|t| {
                let c0: Vec<f64> = e.iter().filter(|&&v| bin(v) < t).map(|&v| centre(v)).collect();
                let c1: Vec<f64> = e.iter().filter(|&&v| bin(v) >= t).map(|&v| centre(v)).collect();
                if c0.is_empty() || c1.is_empty() {
                    return None;
                }
                let m0 = c0.iter().sum::<f64>() / c0.len() as f64;
                let m1 = c1.iter().sum::<f64>() / c1.len() as f64;
                Some((t, (c0.len() as f64 / n) * (c1.len() as f64 / n) * (m0 - m1).powi(2)))
            })
            .collect();
        let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let close = |v: f64| (v - best).abs() <= 1e-12 * best;
        let start = scores.iter().position(|s| close(s.1)).unwrap();
        let mut end = start;
        while end + 1 < scores.len() && scores[end + 1].0 == scores[end].0 + 1 && close(scores[end + 1].1) {
            end += 1;
        }
        lo + (scores[start].0 + scores[end].0) as f64 / 2.0 * w
    }

    #[test]
    fn otsu_matches_brute_force() {
        let mut rng = Rng::new(77);
        for _ in 0..50 {
            let n = 20 + rng.below(300);
            let e: Vec<f64> = (0..n).map(|_| rng.uniform().powi(1 + rng.below(3) as i32) * 3.0).collect();
            let tau = otsu_threshold(&emap(1, n, e.clone())).unwrap();
            let oracle = brute_force_otsu(&e);
            assert!((tau - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{tau} vs {oracle}");
        }
    }

    #[test]
    fn threshold_cases() {
        let e = emap(2, 3, vec![0.0, 0.5, 1.0, 0.5, 0.2, 0.9]);
        assert_eq!(threshold_map(&e, 2.0).count_changed(), 0);
        assert_eq!(threshold_map(&e, -1.0).count_changed(), 6);
        assert_eq!(threshold_map(&e, 0.5).count_changed(), e.values().iter().filter(|&&v| v > 0.5).count());
    }

    proptest! {
        #[test]
        fn threshold_monotone(vals in prop::collection::vec(0.0f64..10.0, 1..60), a in 0.0f64..10.0, b in 0.0f64..10.0) {
            let e = emap(1, vals.len(), vals);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let m_lo = threshold_map(&e, lo);
            let m_hi = threshold_map(&e, hi);
            for p in 0..e.len() {
                prop_assert!(!m_hi.is_changed(p) || m_lo.is_changed(p));
            }
        }

        #[test]
        fn threshold_invariant_under_increasing_transform(vals in prop::collection::vec(0.0f64..10.0, 1..60), tau in 0.0f64..10.0) {
            let e = emap(1, vals.len(), vals.clone());
            let f = |v: f64| (v + 1.0).ln() * 3.0 + v.powi(3);
            let t = emap(1, vals.len(), vals.iter().map(|&v| f(v)).collect());
            prop_assert_eq!(threshold_map(&e, tau), threshold_map(&t, f(tau)));
        }
    }

    #[test]
    fn detect_is_deterministic() {
        let mut rng = Rng::new(3);
        let ci = HyperImage::from_fn(4, 8, 8, |_, r, _| if r < 3 { 1.0 } else { 0.05 * rng.uniform() });
        let (a, ta) = detect(&ci, ThresholdMode::Otsu, 1).unwrap();
        let (b, tb) = detect(&ci, ThresholdMode::Otsu, 1).unwrap();
        assert_eq!((a.clone(), ta), (b, tb));
        assert_eq!(a.count_changed(), 24);
    }
}
