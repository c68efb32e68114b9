//! Synthetic change-detection pairs.
//!
//! A reference latent image is unmixed into endmembers and abundances; one of
//! three change rules edits the abundances inside a region; the original and
//! edited abundances are remixed into a latent pair, which the degradation
//! operators turn into an LRHS / HRLS observation pair.
//!
//! The change rules are this crate's fixed interpretation:
//! * `zero`: remove one endmember inside the region and renormalize,
//! * `same`: overwrite the region with a single abundance vector taken from a
//!   pixel outside it,
//! * `block`: copy the abundances of an equally sized, non-overlapping donor
//!   block.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMap, HyperImage};
use crate::io;
use crate::operators::{apply_spatial, apply_spectral, DegradationPair};
use crate::rng::Rng;

/// `k × n` abundance matrix, row `j` holding endmember `j` over all pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Abundances {
    pub k: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Abundances {
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn get(&self, j: usize, p: usize) -> f64 {
        self.data[j * self.pixels() + p]
    }

    pub fn set(&mut self, j: usize, p: usize, v: f64) {
        let n = self.pixels();
        self.data[j * n + p] = v;
    }

    pub fn column(&self, p: usize) -> Vec<f64> {
        (0..self.k).map(|j| self.get(j, p)).collect()
    }

    pub fn set_column(&mut self, p: usize, col: &[f64]) {
        for (j, v) in col.iter().enumerate() {
            self.set(j, p, *v);
        }
    }
}

/// Endmembers (`m × k`, row-major) and reference abundances.
#[derive(Debug, Clone, PartialEq)]
pub struct UnmixModel {
    pub bands: usize,
    pub k: usize,
    pub endmembers: Vec<f64>,
    pub abundances: Abundances,
}

impl UnmixModel {
    pub fn endmember(&self, j: usize) -> Vec<f64> {
        (0..self.bands).map(|b| self.endmembers[b * self.k + j]).collect()
    }

    /// `M · A` as a latent image.
    pub fn mix(&self, a: &Abundances) -> HyperImage {
        let n = a.pixels();
        let mut out = HyperImage::zeros(self.bands, a.rows, a.cols);
        for b in 0..self.bands {
            let dst = out.band_mut(b);
            for j in 0..self.k {
                let w = self.endmembers[b * self.k + j];
                for (d, s) in dst.iter_mut().zip(&a.data[j * n..(j + 1) * n]) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// `||X − M A||_F / ||X||_F`.
    pub fn residual(&self, x: &HyperImage) -> f64 {
        let rec = self.mix(&self.abundances);
        let err: f64 = rec.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let norm: f64 = x.data().iter().map(|v| v * v).sum();
        (err / norm.max(f64::MIN_POSITIVE)).sqrt()
    }
}

/// Greedy pure-pixel endmember selection followed by per-pixel projected
/// gradient NNLS, each abundance column renormalized to sum to one.
pub fn unmix(x: &HyperImage, k: usize) -> Result<UnmixModel> {
    let (m, n) = (x.bands(), x.pixels());
    if k == 0 || k > m.min(n) {
        return Err(Error::Invalid(format!("endmember count {k} must be in 1..={}", m.min(n))));
    }
    let columns: Vec<Vec<f64>> = (0..n).map(|p| x.pixel(p).to_vec()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    // Residual energy of every pixel after projection onto the selected span.
    let mut resid: Vec<f64> = columns.iter().map(|c| dot(c, c)).collect();
    let scale = resid.iter().cloned().fold(0.0, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let (best, &energy) = resid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        if energy <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::RankDeficient { k });
        }
        let mut q = columns[best].clone();
        for _ in 0..2 {
            for e in &basis {
                let c = dot(&q, e);
                q.iter_mut().zip(e).for_each(|(v, ev)| *v -= c * ev);
            }
        }
        let norm = dot(&q, &q).sqrt();
        if norm <= 1e-9 * scale.sqrt() {
            return Err(Error::RankDeficient { k });
        }
        q.iter_mut().for_each(|v| *v /= norm);
        for (r, c) in resid.iter_mut().zip(&columns) {
            *r = (*r - dot(&q, c).powi(2)).max(0.0);
        }
        resid[best] = 0.0;
        basis.push(q);
        picked.push(best);
    }

    let mut endmembers = vec![0.0; m * k];
    for (j, &p) in picked.iter().enumerate() {
        for b in 0..m {
            endmembers[b * k + j] = columns[p][b];
        }
    }

    // Gram matrix and its largest eigenvalue (power iteration) for the step.
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            gram[i * k + j] = (0..m).map(|b| endmembers[b * k + i] * endmembers[b * k + j]).sum();
        }
    }
    let mut v = vec![1.0; k];
    let mut lipschitz = 0.0;
    for _ in 0..100 {
        let w: Vec<f64> = (0..k).map(|i| (0..k).map(|j| gram[i * k + j] * v[j]).sum()).collect();
        lipschitz = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if lipschitz == 0.0 {
            break;
        }
        v = w.into_iter().map(|x| x / lipschitz).collect();
    }
    let step = 1.0 / lipschitz.max(f64::MIN_POSITIVE);

    let mut abundances = Abundances {
        k,
        rows: x.rows(),
        cols: x.cols(),
        data: vec![0.0; k * n],
    };
    for (p, col) in columns.iter().enumerate() {
        let h: Vec<f64> = (0..k).map(|j| (0..m).map(|b| endmembers[b * k + j] * col[b]).sum()).collect();
        let a = nnls_fista(&gram, &h, k, step, 400);
        let s: f64 = a.iter().sum();
        let a: Vec<f64> = if s > 1e-12 {
            a.iter().map(|v| v / s).collect()
        } else {
            vec![1.0 / k as f64; k]
        };
        abundances.set_column(p, &a);
    }
    Ok(UnmixModel {
        bands: m,
        k,
        endmembers,
        abundances,
    })
}

/// Accelerated projected gradient for `min ½ aᵀGa − hᵀa, a ≥ 0`.
fn nnls_fista(gram: &[f64], h: &[f64], k: usize, step: f64, iters: usize) -> Vec<f64> {
    let mut a = vec![0.0; k];
    let mut z = a.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let grad: Vec<f64> = (0..k).map(|i| (0..k).map(|j| gram[i * k + j] * z[j]).sum::<f64>() - h[i]).collect();
        let next: Vec<f64> = z.iter().zip(&grad).map(|(zi, gi)| (zi - step * gi).max(0.0)).collect();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = (t - 1.0) / t_next;
        z = next.iter().zip(&a).map(|(n, o)| n + mom * (n - o)).collect();
        a = next;
        t = t_next;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeRule {
    #[serde(alias = "R_z", alias = "rz")]
    Zero,
    #[serde(alias = "R_s", alias = "rs")]
    Same,
    #[serde(alias = "R_b", alias = "rb")]
    Block,
}

impl ChangeRule {
    pub const ALL: [ChangeRule; 3] = [ChangeRule::Block, ChangeRule::Same, ChangeRule::Zero];

    pub fn label(&self) -> &'static str {
        match self {
            ChangeRule::Zero => "R_z",
            ChangeRule::Same => "R_s",
            ChangeRule::Block => "R_b",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.row < o.row + o.height && o.row < self.row + self.height && self.col < o.col + o.width && o.col < self.col + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits(&self, rows: usize, cols: usize) -> bool {
        self.row + self.height <= rows && self.col + self.width <= cols
    }

    pub fn pixels(&self, cols: usize) -> impl Iterator<Item = usize> + '_ {
        (self.row..self.row + self.height).flat_map(move |r| (self.col..self.col + self.width).map(move |c| r * cols + c))
    }
}

/// One change injection: a rule applied inside a set of rectangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeSpec {
    pub rule: ChangeRule,
    pub region: Vec<Rect>,
    /// `zero` rule: endmember to remove (default: the dominant one in the region).
    #[serde(default)]
    pub endmember: Option<usize>,
    /// `block` rule: donor rectangle per region rectangle (default: random).
    #[serde(default)]
    pub donors: Option<Vec<Rect>>,
}

impl ChangeSpec {
    fn mask(&self, rows: usize, cols: usize) -> Result<BinaryMap> {
        if self.region.is_empty() {
            return Err(Error::Invalid("change region is empty".into()));
        }
        let mut map = BinaryMap::zeros(rows, cols);
        for r in &self.region {
            if r.area() == 0 || !r.fits(rows, cols) {
                return Err(Error::Invalid(format!("region {r:?} is empty or outside {rows}x{cols}")));
            }
            for p in r.pixels(cols) {
                map.set(p, true);
            }
        }
        if map.count_changed() >= rows * cols {
            return Err(Error::Invalid("change region must be strictly smaller than the image".into()));
        }
        Ok(map)
    }
}

/// Edit the reference abundances inside `spec.region`; returns the edited
/// matrix and the reference change map marking exactly the region.
pub fn apply_change_rule(model: &UnmixModel, spec: &ChangeSpec, rng: &mut Rng) -> Result<(Abundances, BinaryMap)> {
    let a_ref = &model.abundances;
    let (rows, cols, k) = (a_ref.rows, a_ref.cols, a_ref.k);
    let d_ref = spec.mask(rows, cols)?;
    let region = d_ref.changed();
    let mut a = a_ref.clone();
    match spec.rule {
        ChangeRule::Zero => {
            if k < 2 {
                return Err(Error::Invalid("zero-abundance rule needs at least two endmembers".into()));
            }
            let j = match spec.endmember {
                Some(j) if j < k => j,
                Some(j) => return Err(Error::Invalid(format!("endmember {j} out of range (k = {k})"))),
                None => (0..k)
                    .max_by(|&x, &y| {
                        let mx: f64 = region.iter().map(|&p| a_ref.get(x, p)).sum();
                        let my: f64 = region.iter().map(|&p| a_ref.get(y, p)).sum();
                        mx.total_cmp(&my).then(y.cmp(&x))
                    })
                    .unwrap(),
            };
            if region.iter().all(|&p| a_ref.get(j, p) <= 1e-6) {
                return Err(Error::Invalid(format!("endmember {j} is absent from the change region")));
            }
            for &p in &region {
                let mut col = a_ref.column(p);
                col[j] = 0.0;
                let s: f64 = col.iter().sum();
                if s > 1e-12 {
                    col.iter_mut().for_each(|v| *v /= s);
                } else {
                    for (i, v) in col.iter_mut().enumerate() {
                        *v = if i == j { 0.0 } else { 1.0 / (k - 1) as f64 };
                    }
                }
                a.set_column(p, &col);
            }
        }
        ChangeRule::Same => {
            let outside = d_ref.unchanged();
            let mean: Vec<f64> = (0..k)
                .map(|j| region.iter().map(|&p| a_ref.get(j, p)).sum::<f64>() / region.len() as f64)
                .collect();
            // Among a few random outside pixels keep the one least like the region.
            let mut best: Option<(f64, usize)> = None;
            for _ in 0..8 {
                let p = outside[rng.below(outside.len())];
                let dist: f64 = (0..k).map(|j| (a_ref.get(j, p) - mean[j]).abs()).sum();
                if best.is_none_or(|(d, _)| dist > d) {
                    best = Some((dist, p));
                }
            }
            let fill = a_ref.column(best.unwrap().1);
            for &p in &region {
                a.set_column(p, &fill);
            }
        }
        ChangeRule::Block => {
            let donors = match &spec.donors {
                Some(d) => {
                    if d.len() != spec.region.len() {
                        return Err(Error::Invalid("one donor rectangle is required per region rectangle".into()));
                    }
                    d.clone()
                }
                None => spec
                    .region
                    .iter()
                    .map(|r| place_donor(r, &spec.region, rows, cols, rng))
                    .collect::<Result<_>>()?,
            };
            for (target, donor) in spec.region.iter().zip(&donors) {
                if donor.height != target.height || donor.width != target.width || !donor.fits(rows, cols) {
                    return Err(Error::Invalid(format!("donor {donor:?} does not match target {target:?}")));
                }
                if spec.region.iter().any(|t| t.overlaps(donor)) {
                    return Err(Error::Invalid(format!("donor {donor:?} overlaps the change region")));
                }
                for dr in 0..target.height {
                    for dc in 0..target.width {
                        let src = (donor.row + dr) * cols + donor.col + dc;
                        let dst = (target.row + dr) * cols + target.col + dc;
                        a.set_column(dst, &a_ref.column(src));
                    }
                }
            }
        }
    }
    Ok((a, d_ref))
}

fn place_donor(target: &Rect, region: &[Rect], rows: usize, cols: usize, rng: &mut Rng) -> Result<Rect> {
    for _ in 0..1000 {
        let cand = Rect {
            row: rng.below(rows - target.height + 1),
            col: rng.below(cols - target.width + 1),
            height: target.height,
            width: target.width,
        };
        if region.iter().all(|r| !r.overlaps(&cand)) {
            return Ok(cand);
        }
    }
    Err(Error::Invalid(format!("no room for a donor block of size {}x{}", target.height, target.width)))
}

/// Random axis-aligned rectangles covering a fraction of the image drawn
/// from `[min_fraction, max_fraction]`.
pub fn random_region(
    rows: usize,
    cols: usize,
    rects: usize,
    min_fraction: f64,
    max_fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<Rect>> {
    if rects == 0 || !(0.0 < min_fraction && min_fraction <= max_fraction && max_fraction < 0.5) {
        return Err(Error::Invalid("region fractions must satisfy 0 < min <= max < 0.5".into()));
    }
    let n = (rows * cols) as f64;
    let per_rect = rng.uniform_range(min_fraction, max_fraction) * n / rects as f64;
    let mut out: Vec<Rect> = Vec::with_capacity(rects);
    'rect: for _ in 0..rects {
        for _ in 0..1000 {
            let aspect = rng.uniform_range(0.5, 2.0);
            let height = ((per_rect * aspect).sqrt().round() as usize).clamp(1, rows - 1);
            let width = ((per_rect / height as f64).round() as usize).clamp(1, cols - 1);
            let cand = Rect {
                row: rng.below(rows - height + 1),
                col: rng.below(cols - width + 1),
                height,
                width,
            };
            if out.iter().all(|r| !r.overlaps(&cand)) {
                out.push(cand);
                continue 'rect;
            }
        }
        return Err(Error::Invalid("could not place non-overlapping change rectangles".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `X1 = M A_ref`, `X2 = M A_chg`.
    Forward,
    /// `X1 = M A_chg`, `X2 = M A_ref`.
    Reverse,
}

pub fn upmix(model: &UnmixModel, a_chg: &Abundances, direction: Direction) -> Result<(HyperImage, HyperImage)> {
    let a_ref = &model.abundances;
    if (a_chg.k, a_chg.rows, a_chg.cols) != (a_ref.k, a_ref.rows, a_ref.cols) {
        return Err(Error::shape(
            "upmix abundances",
            format!("{}x{}x{}", a_ref.k, a_ref.rows, a_ref.cols),
            format!("{}x{}x{}", a_chg.k, a_chg.rows, a_chg.cols),
        ));
    }
    let x_ref = model.mix(a_ref);
    let x_chg = model.mix(a_chg);
    Ok(match direction {
        Direction::Forward => (x_ref, x_chg),
        Direction::Reverse => (x_chg, x_ref),
    })
}

/// Simulate the two observations: `Y1 = H1(X1)`, `Y2 = H2(X2)`.
pub fn observe(x1: &HyperImage, x2: &HyperImage, ops: &DegradationPair) -> Result<(HyperImage, HyperImage)> {
    Ok((apply_spatial(&ops.spatial, x1)?, apply_spectral(&ops.spectral, x2)?))
}

fn add_noise(img: &mut HyperImage, std: f64, rng: &mut Rng) {
    if std > 0.0 {
        img.data_mut().iter_mut().for_each(|v| *v += std * rng.normal());
    }
}

/// Smooth procedural reference cube: `k` bumpy nonnegative spectra mixed by
/// softmax-normalized low-frequency fields.
pub fn procedural_reference(bands: usize, rows: usize, cols: usize, k: usize, rng: &mut Rng) -> HyperImage {
    let spectra: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let base = rng.uniform_range(0.05, 0.3);
            let bumps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.uniform_range(0.0, bands as f64),
                        rng.uniform_range(bands as f64 / 10.0, bands as f64 / 3.0).max(1.0),
                        rng.uniform_range(0.1, 0.7),
                    )
                })
                .collect();
            (0..bands)
                .map(|b| {
                    let s: f64 = bumps
                        .iter()
                        .map(|(c, w, a)| a * (-(b as f64 - c).powi(2) / (2.0 * w * w)).exp())
                        .sum();
                    (base + s).min(1.0)
                })
                .collect()
        })
        .collect();

    let fields: Vec<Vec<(f64, f64, f64, f64)>> = (0..k)
        .map(|_| {
            (0..4)
                .map(|_| {
                    (
                        rng.uniform_range(-2.0, 2.0),
                        rng.uniform_range(-2.0, 2.0),
                        rng.uniform_range(0.0, std::f64::consts::TAU),
                        rng.uniform_range(0.5, 1.5),
                    )
                })
                .collect()
        })
        .collect();
    let sharpness = 3.0;
    let mut abundances = vec![0.0; k * rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let logits: Vec<f64> = fields
                .iter()
                .map(|waves| {
                    sharpness
                        * waves
                            .iter()
                            .map(|(u, v, phi, amp)| {
                                amp * (std::f64::consts::TAU * (u * r as f64 / rows as f64 + v * c as f64 / cols as f64) + phi).cos()
                            })
                            .sum::<f64>()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..k {
                abundances[j * rows * cols + r * cols + c] = e[j] / s;
            }
        }
    }
    HyperImage::from_fn(bands, rows, cols, |b, r, c| {
        (0..k).map(|j| spectra[j][b] * abundances[j * rows * cols + r * cols + c]).sum()
    })
}

/// Where the reference cubes come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceConfig {
    Procedural {
        count: usize,
        bands: usize,
        rows: usize,
        cols: usize,
        /// Number of materials in the generated scenes.
        materials: usize,
    },
    Files { paths: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub references: ReferenceConfig,
    /// Endmembers extracted per reference.
    pub k: usize,
    #[serde(default = "default_rules")]
    pub rules: Vec<ChangeRule>,
    #[serde(default = "default_directions")]
    pub directions: Vec<Direction>,
    #[serde(default = "default_rects")]
    pub rects_per_pair: usize,
    #[serde(default = "default_min_fraction")]
    pub min_change_fraction: f64,
    #[serde(default = "default_max_fraction")]
    pub max_change_fraction: f64,
    pub test_pairs: usize,
    #[serde(default)]
    pub noise_std: f64,
    pub seed: u64,
}

fn default_rules() -> Vec<ChangeRule> {
    ChangeRule::ALL.to_vec()
}
fn default_directions() -> Vec<Direction> {
    vec![Direction::Forward, Direction::Reverse]
}
fn default_rects() -> usize {
    1
}
fn default_min_fraction() -> f64 {
    0.02
}
fn default_max_fraction() -> f64 {
    0.15
}

impl GenerationConfig {
    pub fn pairs_per_reference(&self) -> usize {
        self.rules.len() * self.directions.len()
    }

    pub fn reference_count(&self) -> usize {
        match &self.references {
            ReferenceConfig::Procedural { count, .. } => *count,
            ReferenceConfig::Files { paths } => paths.len(),
        }
    }

    pub fn total_pairs(&self) -> usize {
        self.reference_count() * self.pairs_per_reference()
    }

    pub fn load_references(&self) -> Result<Vec<HyperImage>> {
        match &self.references {
            ReferenceConfig::Procedural {
                count,
                bands,
                rows,
                cols,
                materials,
            } => {
                let root = Rng::new(self.seed).fork(0x5EED_0001);
                Ok((0..*count)
                    .map(|i| procedural_reference(*bands, *rows, *cols, *materials, &mut root.fork(i as u64)))
                    .collect())
            }
            ReferenceConfig::Files { paths } => paths.iter().map(io::read_cube).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairInfo {
    pub index: usize,
    pub reference: usize,
    pub rule: ChangeRule,
    pub direction: Direction,
    pub seed: u64,
    pub region: Vec<Rect>,
}

/// One simulated acquisition pair with its latent images and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    pub y1: HyperImage,
    pub y2: HyperImage,
    pub x1: HyperImage,
    pub x2: HyperImage,
    pub d_ref: BinaryMap,
    pub info: PairInfo,
}

impl DatasetPair {
    /// The pair that would have been observed without any change (both
    /// observations of `X1`), used to pretrain fusion.
    pub fn no_change(&self, ops: &DegradationPair) -> Result<DatasetPair> {
        let (y1, y2) = observe(&self.x1, &self.x1, ops)?;
        Ok(DatasetPair {
            y1,
            y2,
            x1: self.x1.clone(),
            x2: self.x1.clone(),
            d_ref: BinaryMap::zeros(self.d_ref.rows(), self.d_ref.cols()),
            info: self.info.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<DatasetPair>,
    pub test: Vec<DatasetPair>,
}

/// Generate every (reference, rule, direction) pair and split them with a
/// rule-stratified draw so each rule reaches the test set when possible.
pub fn build_dataset(refs: &[HyperImage], cfg: &GenerationConfig, ops: &DegradationPair, rng: &Rng) -> Result<Dataset> {
    if refs.is_empty() {
        return Err(Error::Config("at least one reference image is required".into()));
    }
    if cfg.rules.is_empty() || cfg.directions.is_empty() {
        return Err(Error::Config("rules and directions must be non-empty".into()));
    }
    let total = refs.len() * cfg.pairs_per_reference();
    if cfg.test_pairs >= total {
        return Err(Error::Config(format!("test_pairs = {} leaves no training pairs out of {total}", cfg.test_pairs)));
    }
    let shape = refs[0].shape();
    if refs.iter().any(|r| r.shape() != shape) {
        return Err(Error::Config("reference images must share one shape".into()));
    }
    if shape.bands != ops.spectral.in_bands() {
        return Err(Error::Config(format!(
            "references have {} bands but the spectral operator expects {}",
            shape.bands,
            ops.spectral.in_bands()
        )));
    }
    ops.spatial.output_dims(shape.rows, shape.cols)?;

    let mut pairs = Vec::with_capacity(total);
    for (ri, reference) in refs.iter().enumerate() {
        let model = unmix(reference, cfg.k)?;
        for (qi, &rule) in cfg.rules.iter().enumerate() {
            let seed = rng.derive_seed((ri * 1000 + qi) as u64);
            let mut prng = Rng::new(seed);
            let (a_chg, d_ref, region) = inject_change(&model, rule, cfg, &mut prng)?;
            for &direction in &cfg.directions {
                let (x1, x2) = upmix(&model, &a_chg, direction)?;
                let (mut y1, mut y2) = observe(&x1, &x2, ops)?;
                let mut nrng = prng.fork(direction as u64);
                add_noise(&mut y1, cfg.noise_std, &mut nrng);
                add_noise(&mut y2, cfg.noise_std, &mut nrng);
                let index = pairs.len();
                pairs.push(DatasetPair {
                    y1,
                    y2,
                    x1,
                    x2,
                    d_ref: d_ref.clone(),
                    info: PairInfo {
                        index,
                        reference: ri,
                        rule,
                        direction,
                        seed,
                        region: region.clone(),
                    },
                });
            }
        }
    }

    let test_idx = stratified_test_indices(&pairs, cfg.test_pairs, &mut rng.fork(0x5917));
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for p in pairs {
        if test_idx.contains(&p.info.index) {
            test.push(p);
        } else {
            train.push(p);
        }
    }
    Ok(Dataset { train, test })
}

/// Share of region pixels a generated change must actually alter.
const MIN_EFFECTIVE_FRACTION: f64 = 0.97;

fn inject_change(
    model: &UnmixModel,
    rule: ChangeRule,
    cfg: &GenerationConfig,
    rng: &mut Rng,
) -> Result<(Abundances, BinaryMap, Vec<Rect>)> {
    let (rows, cols) = (model.abundances.rows, model.abundances.cols);
    // A region may miss the designated material or leave no room for a
    // donor; redraw a few times before giving up.
    let mut last = None;
    for _ in 0..50 {
        let region = random_region(rows, cols, cfg.rects_per_pair, cfg.min_change_fraction, cfg.max_change_fraction, rng)?;
        let spec = ChangeSpec {
            rule,
            region: region.clone(),
            endmember: None,
            donors: None,
        };
        match apply_change_rule(model, &spec, rng) {
            Ok((a, d)) => {
                let region_px = d.changed();
                let moved = region_px
                    .iter()
                    .filter(|&&p| (0..a.k).map(|j| (a.get(j, p) - model.abundances.get(j, p)).abs()).sum::<f64>() > 1e-6)
                    .count();
                if moved as f64 >= MIN_EFFECTIVE_FRACTION * region_px.len() as f64 {
                    return Ok((a, d, region));
                }
                last = Some(Error::Invalid(format!(
                    "{} change altered only {moved} of {} region pixels",
                    rule.label(),
                    region_px.len()
                )));
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap())
}

fn stratified_test_indices(pairs: &[DatasetPair], count: usize, rng: &mut Rng) -> Vec<usize> {
    let mut by_rule: BTreeMap<ChangeRule, Vec<usize>> = BTreeMap::new();
    for p in pairs {
        by_rule.entry(p.info.rule).or_default().push(p.info.index);
    }
    for v in by_rule.values_mut() {
        rng.shuffle(v);
    }
    let mut picked = Vec::with_capacity(count);
    let mut cursor = 0;
    while picked.len() < count {
        let mut any = false;
        for v in by_rule.values() {
            if picked.len() < count && cursor < v.len() {
                picked.push(v[cursor]);
                any = true;
            }
        }
        if !any {
            break;
        }
        cursor += 1;
    }
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub config: GenerationConfig,
    pub pairs: Vec<PairEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PairEntry {
    pub dir: String,
    pub split: String,
    #[serde(flatten)]
    pub info: PairInfo,
}

/// Write `pair_<idx>/{Y1,Y2,X1,X2}.hsc`, `pair_<idx>/dref.cm` and
/// `manifest.json`. Returns every file written.
pub fn write_dataset(dir: &Path, data: &Dataset, cfg: &GenerationConfig) -> Result<Vec<std::path::PathBuf>> {
    let mut all: Vec<(&DatasetPair, &str)> = data.train.iter().map(|p| (p, "train")).collect();
    all.extend(data.test.iter().map(|p| (p, "test")));
    all.sort_by_key(|(p, _)| p.info.index);
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for (p, split) in all {
        let name = format!("pair_{:04}", p.info.index);
        let pd = dir.join(&name);
        for (file, img) in [("Y1.hsc", &p.y1), ("Y2.hsc", &p.y2), ("X1.hsc", &p.x1), ("X2.hsc", &p.x2)] {
            io::write_cube(pd.join(file), img)?;
            written.push(pd.join(file));
        }
        io::write_map(pd.join("dref.cm"), &p.d_ref)?;
        written.push(pd.join("dref.cm"));
        entries.push(PairEntry {
            dir: name,
            split: split.to_string(),
            info: p.info.clone(),
        });
    }
    let manifest = DatasetManifest {
        config: cfg.clone(),
        pairs: entries,
    };
    let path = dir.join("manifest.json");
    io::write_bytes(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes())?;
    written.push(path);
    Ok(written)
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_slice(&io::read_bytes(&path)?).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let mut data = Dataset {
        train: Vec::new(),
        test: Vec::new(),
    };
    for e in &manifest.pairs {
        let pd = dir.join(&e.dir);
        let pair = DatasetPair {
            y1: io::read_cube(pd.join("Y1.hsc"))?,
            y2: io::read_cube(pd.join("Y2.hsc"))?,
            x1: io::read_cube(pd.join("X1.hsc"))?,
            x2: io::read_cube(pd.join("X2.hsc"))?,
            d_ref: io::read_map(pd.join("dref.cm"))?,
            info: e.info.clone(),
        };
        match e.split.as_str() {
            "test" => data.test.push(pair),
            _ => data.train.push(pair),
        }
    }
    Ok((data, manifest))
}
