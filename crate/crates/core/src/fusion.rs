//! Fusion of an LRHS observation with a (corrected) HRLS observation into a
//! HRHS latent estimate.
//!
//! Two interchangeable backends:
//! * model-based Tikhonov fusion, `argmin ||Y1 − H1 X||² + ||Ỹ2 − H2 X||² + λ||X||²`,
//!   solved by conjugate gradient on the normal equations, with gradients
//!   obtained by one more solve against the same symmetric system;
//! * a neural fusion network, pretrained on no-change pairs and frozen.
//!
//! The blur-decimate operator is separable, so its normal matrix is a
//! Kronecker product of two small per-axis matrices; together with the
//! eigenbasis of the spectral normal matrix this diagonalizes the whole
//! Tikhonov system, which the solver uses as its preconditioner.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{frobenius_norm, image_sub, HyperImage};
use crate::nn::{self, kernels::gemm, AdamConfig, ArchConfig, Network, Tape};
use crate::operators::{adjoint_spatial, adjoint_spectral, apply_spatial, apply_spectral, DegradationPair};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TikhonovConfig {
    /// Regularization weight relative to the largest eigenvalue of the data term.
    pub lambda: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    /// Use the exact eigenbasis preconditioner (plain CG otherwise).
    pub preconditioned: bool,
}

impl Default for TikhonovConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            cg_iters: 500,
            cg_tol: 1e-8,
            preconditioned: true,
        }
    }
}

/// Outcome of one conjugate-gradient solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    /// `||b − A x|| / ||b||` of the returned iterate.
    pub rel_residual: f64,
    pub converged: bool,
    /// Relative residual of the returned (best so far) iterate after each
    /// iteration, starting with the zero initial guess.
    pub history: Vec<f64>,
}

/// Symmetric eigendecomposition stored as (row-major eigenvector matrix,
/// eigenvalues), eigenvector `k` in column `k`.
fn sym_eigen(n: usize, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, a));
    let mut u = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            u[i * n + k] = eig.eigenvectors[(i, k)];
        }
    }
    (u, eig.eigenvalues.iter().map(|v| v.max(0.0)).collect())
}

/// `Mᵀ M` for a row-major `r × c` matrix.
fn gram(m: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * c];
    gemm(c, r, c, 1.0, m, true, m, false, 0.0, &mut out);
    out
}

#[derive(Debug, Clone)]
pub struct ModelBasedFusion {
    pub cfg: TikhonovConfig,
    ops: DegradationPair,
    rows: usize,
    cols: usize,
    lambda_eff: f64,
    row_vecs: Vec<f64>,
    row_vals: Vec<f64>,
    col_vecs: Vec<f64>,
    col_vals: Vec<f64>,
    spec_vecs: Vec<f64>,
    spec_vals: Vec<f64>,
}

impl ModelBasedFusion {
    pub fn new(cfg: TikhonovConfig, ops: &DegradationPair, rows: usize, cols: usize) -> Result<Self> {
        if !(cfg.lambda > 0.0 && cfg.lambda.is_finite()) {
            return Err(Error::Config(format!("Tikhonov lambda must be > 0, got {}", cfg.lambda)));
        }
        if cfg.cg_iters == 0 || cfg.cg_tol <= 0.0 {
            return Err(Error::Config("cg_iters and cg_tol must be positive".into()));
        }
        let (orows, ocols) = ops.spatial.output_dims(rows, cols)?;
        let (row_vecs, row_vals) = sym_eigen(rows, &gram(&ops.spatial.axis_matrix(rows), orows, rows));
        let (col_vecs, col_vals) = sym_eigen(cols, &gram(&ops.spatial.axis_matrix(cols), ocols, cols));
        let m = ops.spectral.in_bands();
        let (spec_vecs, spec_vals) = sym_eigen(m, &gram(ops.spectral.response(), ops.spectral.out_bands(), m));
        let top = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
        let scale = top(&row_vals) * top(&col_vals) + top(&spec_vals);
        Ok(Self {
            cfg,
            ops: ops.clone(),
            rows,
            cols,
            lambda_eff: cfg.lambda * scale,
            row_vecs,
            row_vals,
            col_vecs,
            col_vals,
            spec_vecs,
            spec_vals,
        })
    }

    pub fn bands(&self) -> usize {
        self.ops.spectral.in_bands()
    }

    pub fn ops(&self) -> &DegradationPair {
        &self.ops
    }

    /// Absolute regularization weight actually used.
    pub fn lambda_eff(&self) -> f64 {
        self.lambda_eff
    }

    /// `(H1ᵀH1 + H2ᵀH2 + λ I) x`.
    pub fn normal_op(&self, x: &HyperImage) -> Result<HyperImage> {
        let s = adjoint_spatial(&self.ops.spatial, &apply_spatial(&self.ops.spatial, x)?, self.rows, self.cols)?;
        let t = adjoint_spectral(&self.ops.spectral, &apply_spectral(&self.ops.spectral, x)?)?;
        let mut out = s.add(&t)?;
        out.data_mut().iter_mut().zip(x.data()).for_each(|(o, v)| *o += self.lambda_eff * v);
        Ok(out)
    }

    /// `H1ᵀ y1 + H2ᵀ y2`.
    pub fn rhs(&self, y1: &HyperImage, y2: &HyperImage) -> Result<HyperImage> {
        self.check_inputs(y1, y2)?;
        adjoint_spatial(&self.ops.spatial, y1, self.rows, self.cols)?.add(&adjoint_spectral(&self.ops.spectral, y2)?)
    }

    fn check_inputs(&self, y1: &HyperImage, y2: &HyperImage) -> Result<()> {
        let m = self.bands();
        let f = self.ops.spatial.factor();
        if (y1.bands(), y1.rows() * f, y1.cols() * f) != (m, self.rows, self.cols) {
            return Err(Error::shape(
                "fusion LRHS input",
                format!("{m}x{}x{}", self.rows / f, self.cols / f),
                y1.shape(),
            ));
        }
        if (y2.bands(), y2.rows(), y2.cols()) != (self.ops.spectral.out_bands(), self.rows, self.cols) {
            return Err(Error::shape(
                "fusion HRLS input",
                format!("{}x{}x{}", self.ops.spectral.out_bands(), self.rows, self.cols),
                y2.shape(),
            ));
        }
        Ok(())
    }

    /// Exact inverse of the normal matrix in the joint eigenbasis.
    pub fn precondition(&self, r: &HyperImage) -> Result<HyperImage> {
        let (m, rows, cols) = (self.bands(), self.rows, self.cols);
        let n = rows * cols;
        let mut z = vec![0.0; m * n];
        gemm(m, m, n, 1.0, &self.spec_vecs, true, r.data(), false, 0.0, &mut z);
        z.par_chunks_mut(n).enumerate().for_each(|(k, plane)| {
            let mut tmp = vec![0.0; n];
            gemm(rows, rows, cols, 1.0, &self.row_vecs, true, plane, false, 0.0, &mut tmp);
            gemm(rows, cols, cols, 1.0, &tmp, false, &self.col_vecs, false, 0.0, plane);
            let shift = self.spec_vals[k] + self.lambda_eff;
            for i in 0..rows {
                for j in 0..cols {
                    plane[i * cols + j] /= self.row_vals[i] * self.col_vals[j] + shift;
                }
            }
            gemm(rows, rows, cols, 1.0, &self.row_vecs, false, plane, false, 0.0, &mut tmp);
            gemm(rows, cols, cols, 1.0, &tmp, false, &self.col_vecs, true, 0.0, plane);
        });
        let mut out = vec![0.0; m * n];
        gemm(m, m, n, 1.0, &self.spec_vecs, false, &z, false, 0.0, &mut out);
        HyperImage::from_vec(m, rows, cols, out)
    }

    /// Solve the normal equations for right-hand side `b`.
    pub fn solve(&self, b: &HyperImage) -> Result<(HyperImage, CgReport)> {
        let bnorm = frobenius_norm(b);
        if !bnorm.is_finite() {
            return Err(Error::Numeric("fusion right-hand side is not finite".into()));
        }
        let mut x = HyperImage::zeros_like(b);
        if bnorm == 0.0 {
            return Ok((
                x,
                CgReport {
                    iterations: 0,
                    rel_residual: 0.0,
                    converged: true,
                    history: vec![0.0],
                },
            ));
        }
        let pre = |r: &HyperImage| if self.cfg.preconditioned { self.precondition(r) } else { Ok(r.clone()) };
        let mut r = b.clone();
        let mut z = pre(&r)?;
        let mut p = z.clone();
        let mut rz = r.dot(&z)?;
        let mut best = (1.0, x.clone());
        let mut history = vec![1.0];
        let mut converged = false;
        let mut iterations = 0;
        for it in 1..=self.cfg.cg_iters {
            iterations = it;
            let q = self.normal_op(&p)?;
            let pq = p.dot(&q)?;
            if pq <= 0.0 || !pq.is_finite() {
                break;
            }
            let alpha = rz / pq;
            x = x.axpy(alpha, &p)?;
            r = r.axpy(-alpha, &q)?;
            let res = frobenius_norm(&r) / bnorm;
            if res < best.0 {
                best = (res, x.clone());
            }
            history.push(best.0);
            if res <= self.cfg.cg_tol {
                converged = true;
                break;
            }
            z = pre(&r)?;
            let rz_new = r.dot(&z)?;
            p = z.axpy(rz_new / rz, &p)?;
            rz = rz_new;
        }
        if !converged {
            log::warn!(
                "fusion CG stopped after {iterations} iterations at relative residual {:.3e}",
                best.0
            );
        }
        Ok((
            best.1,
            CgReport {
                iterations,
                rel_residual: best.0,
                converged,
                history,
            },
        ))
    }

    /// Unclamped minimizer.
    pub fn solve_raw(&self, y1: &HyperImage, y2: &HyperImage) -> Result<(HyperImage, CgReport)> {
        self.solve(&self.rhs(y1, y2)?)
    }

    /// Gradients with respect to `(y1, y2)` of a loss whose gradient with
    /// respect to the clamped output is `grad`, given the raw solution.
    pub fn backward(&self, raw: &HyperImage, grad: &HyperImage) -> Result<(HyperImage, HyperImage)> {
        grad.ensure_shape(raw.shape(), "fusion backward gradient")?;
        let mut masked = grad.clone();
        masked.data_mut().iter_mut().zip(raw.data()).for_each(|(g, x)| {
            if *x < 0.0 {
                *g = 0.0;
            }
        });
        let (u, _) = self.solve(&masked)?;
        Ok((apply_spatial(&self.ops.spatial, &u)?, apply_spectral(&self.ops.spectral, &u)?))
    }
}

/// Post-hoc nonnegativity clamp; returns the clamped image and the total
/// negative mass removed.
pub fn clamp_nonnegative(x: &HyperImage) -> (HyperImage, f64) {
    let removed: f64 = x.data().iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    (x.map(|v| v.max(0.0)), removed)
}

/// Serializable backend selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum FusionConfig {
    ModelBased {
        #[serde(default)]
        tikhonov: TikhonovConfig,
    },
    Neural {
        #[serde(default)]
        arch: ArchConfig,
        #[serde(default)]
        pretrain: PretrainConfig,
    },
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig::ModelBased {
            tikhonov: TikhonovConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum FusionBackend {
    ModelBased(ModelBasedFusion),
    Neural(Network),
}

/// What the backward pass of a fusion call needs.
#[derive(Debug, Clone)]
pub enum FusionTape {
    ModelBased { raw: HyperImage },
    Neural(Box<Tape>),
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub x: HyperImage,
    /// Solver diagnostics (model-based backend only).
    pub cg: Option<CgReport>,
    pub clamped_mass: f64,
}

impl FusionBackend {
    pub fn name(&self) -> &'static str {
        match self {
            FusionBackend::ModelBased(_) => "model_based",
            FusionBackend::Neural(_) => "neural",
        }
    }

    pub fn fuse(&self, y1: &HyperImage, y2t: &HyperImage) -> Result<FusionOutput> {
        Ok(self.fuse_for_grad(y1, y2t)?.0)
    }

    pub fn fuse_for_grad(&self, y1: &HyperImage, y2t: &HyperImage) -> Result<(FusionOutput, FusionTape)> {
        match self {
            FusionBackend::ModelBased(mb) => {
                let (raw, report) = mb.solve_raw(y1, y2t)?;
                let (x, clamped_mass) = clamp_nonnegative(&raw);
                Ok((
                    FusionOutput {
                        x,
                        cg: Some(report),
                        clamped_mass,
                    },
                    FusionTape::ModelBased { raw },
                ))
            }
            FusionBackend::Neural(net) => {
                let (x, tape) = net.forward(&[y1, y2t])?;
                Ok((
                    FusionOutput {
                        x,
                        cg: None,
                        clamped_mass: 0.0,
                    },
                    FusionTape::Neural(Box::new(tape)),
                ))
            }
        }
    }

    /// Gradients with respect to `(y1, y2t)`; fusion parameters stay frozen.
    pub fn backward(&self, tape: &FusionTape, grad_x: &HyperImage) -> Result<(HyperImage, HyperImage)> {
        match (self, tape) {
            (FusionBackend::ModelBased(mb), FusionTape::ModelBased { raw }) => mb.backward(raw, grad_x),
            (FusionBackend::Neural(net), FusionTape::Neural(t)) => {
                let mut g = net.backward(t, grad_x)?;
                let y2 = g.inputs.pop().unwrap();
                let y1 = g.inputs.pop().unwrap();
                Ok((y1, y2))
            }
            _ => Err(Error::Invalid("fusion tape recorded by a different backend".into())),
        }
    }

    /// Digest of everything that parameterizes the backend.
    pub fn checksum(&self) -> String {
        match self {
            FusionBackend::Neural(net) => net.params.checksum(),
            FusionBackend::ModelBased(mb) => {
                use sha2::{Digest, Sha256};
                let mut h = Sha256::new();
                h.update(mb.lambda_eff.to_le_bytes());
                for v in mb.ops.spatial.kernel().iter().chain(mb.ops.spectral.response()) {
                    h.update(v.to_le_bytes());
                }
                hex::encode(h.finalize())
            }
        }
    }
}

/// Relative consistency `||H1(X̂1) − Y1||_F / ||Y1||_F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consistency {
    pub value: f64,
    /// `true` when `||Y1|| = 0` and `value` is the absolute norm instead.
    pub absolute: bool,
}

pub fn consistency(x_hat: &HyperImage, y1: &HyperImage, ops: &DegradationPair) -> Result<Consistency> {
    let pred = apply_spatial(&ops.spatial, x_hat)?;
    pred.ensure_shape(y1.shape(), "consistency reference")?;
    let err = frobenius_norm(&image_sub(&pred, y1)?);
    let norm = frobenius_norm(y1);
    Ok(if norm == 0.0 {
        Consistency {
            value: err,
            absolute: true,
        }
    } else {
        Consistency {
            value: err / norm,
            absolute: false,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch: 4,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

/// One supervised fusion example.
#[derive(Debug, Clone, Copy)]
pub struct FusionSample<'a> {
    pub y1: &'a HyperImage,
    pub y2: &'a HyperImage,
    pub x: &'a HyperImage,
}

/// Mean squared Frobenius fusion error per epoch (evaluated during the epoch).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Minimize `mean ||net(Y1, Y2) − X||_F²` with Adam.
pub fn pretrain_fusion(net: &mut Network, samples: &[FusionSample], cfg: &PretrainConfig) -> Result<PretrainLog> {
    if cfg.batch == 0 {
        return Err(Error::Config("pretrain batch must be at least 1".into()));
    }
    let mut log = PretrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if samples.is_empty() {
        return Err(Error::Config("fusion pretraining needs at least one sample".into()));
    }
    let root = Rng::new(cfg.seed);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        root.fork(epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut grads = net.params.zero_grads();
            for &i in chunk {
                let s = samples[i];
                let (out, tape) = net.forward(&[s.y1, s.y2])?;
                let diff = image_sub(&out, s.x)?;
                let loss = diff.dot(&diff)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("fusion pretraining loss diverged at epoch {epoch}")));
                }
                total += loss;
                let g = net.backward(&tape, &diff.scale(2.0 / chunk.len() as f64))?;
                nn::accumulate(&mut grads, &g.params, 1.0);
            }
            net.params.adam_step(&grads, &cfg.adam)?;
        }
        let mean = total / samples.len() as f64;
        log::info!("fusion pretrain epoch {} loss {:.6e}", epoch + 1, mean);
        log.epoch_loss.push(mean);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::procedural_reference;
    use crate::operators::{OperatorConfig, SpatialOp, SpectralOp};

    fn tiny_ops() -> DegradationPair {
        DegradationPair {
            spatial: SpatialOp::new(1.2, 2).unwrap(),
            spectral: SpectralOp::band_average(4, 2).unwrap(),
        }
    }

    /// Columns of a linear map obtained by applying it to unit vectors.
    fn dense_of(n_in: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
        let cols: Vec<Vec<f64>> = (0..n_in)
            .map(|j| {
                let mut e = vec![0.0; n_in];
                e[j] = 1.0;
                f(&e)
            })
            .collect();
        DMatrix::from_fn(cols[0].len(), n_in, |i, j| cols[j][i])
    }

    #[test]
    fn cg_matches_dense_direct_solve() {
        let ops = tiny_ops();
        let (m, rows, cols) = (4, 8, 8);
        let n_in = m * rows * cols;
        let h1 = dense_of(n_in, |v| {
            apply_spatial(&ops.spatial, &HyperImage::from_vec(m, rows, cols, v.to_vec()).unwrap())
                .unwrap()
                .into_vec()
        });
        let h2 = dense_of(n_in, |v| {
            apply_spectral(&ops.spectral, &HyperImage::from_vec(m, rows, cols, v.to_vec()).unwrap())
                .unwrap()
                .into_vec()
        });
        let mut rng = Rng::new(3);
        let y1 = HyperImage::from_fn(m, 4, 4, |_, _, _| rng.uniform());
        let y2 = HyperImage::from_fn(2, rows, cols, |_, _, _| rng.uniform());
        for preconditioned in [true, false] {
            let cfg = TikhonovConfig {
                lambda: 1e-3,
                cg_tol: 1e-13,
                cg_iters: 2000,
                preconditioned,
            };
            let mb = ModelBasedFusion::new(cfg, &ops, rows, cols).unwrap();
            let lam = mb.lambda_eff();
            let a = h1.transpose() * &h1 + h2.transpose() * &h2 + DMatrix::identity(n_in, n_in) * lam;
            let b = h1.transpose() * nalgebra::DVector::from_column_slice(y1.data())
                + h2.transpose() * nalgebra::DVector::from_column_slice(y2.data());
            let direct = a.cholesky().unwrap().solve(&b);
            let (x, report) = mb.solve_raw(&y1, &y2).unwrap();
            assert!(report.converged);
            let err = x.data().iter().zip(direct.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "preconditioned={preconditioned}: {err}");
            if preconditioned {
                assert!(report.iterations <= 3, "{}", report.iterations);
            }
        }
    }

    #[test]
    fn residual_history_is_monotone() {
        let ops = tiny_ops();
        let mut rng = Rng::new(8);
        let y1 = HyperImage::from_fn(4, 8, 8, |_, _, _| rng.uniform());
        let y2 = HyperImage::from_fn(2, 16, 16, |_, _, _| rng.uniform());
        for preconditioned in [true, false] {
            let cfg = TikhonovConfig { preconditioned, ..TikhonovConfig::default() };
            let mb = ModelBasedFusion::new(cfg, &ops, 16, 16).unwrap();
            let (_, rep) = mb.solve_raw(&y1, &y2).unwrap();
            assert!(rep.history.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(rep.history.len(), rep.iterations + 1);
        }
    }

    #[test]
    fn iteration_cap_flags_non_convergence() {
        let ops = tiny_ops();
        let mut rng = Rng::new(8);
        let y1 = HyperImage::from_fn(4, 8, 8, |_, _, _| rng.uniform());
        let y2 = HyperImage::from_fn(2, 16, 16, |_, _, _| rng.uniform());
        let cfg = TikhonovConfig { preconditioned: false, cg_iters: 2, cg_tol: 1e-14, ..TikhonovConfig::default() };
        let backend = FusionBackend::ModelBased(ModelBasedFusion::new(cfg, &ops, 16, 16).unwrap());
        let out = backend.fuse(&y1, &y2).unwrap();
        let cg = out.cg.unwrap();
        assert!(!cg.converged);
        assert_eq!(cg.iterations, 2);
    }

    #[test]
    fn zero_inputs_give_zero() {
        let ops = tiny_ops();
        let backend = FusionBackend::ModelBased(ModelBasedFusion::new(TikhonovConfig::default(), &ops, 8, 8).unwrap());
        let out = backend.fuse(&HyperImage::zeros(4, 4, 4), &HyperImage::zeros(2, 8, 8)).unwrap();
        assert!(out.x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let ops = tiny_ops();
        let bad = TikhonovConfig { lambda: 0.0, ..TikhonovConfig::default() };
        assert!(ModelBasedFusion::new(bad, &ops, 8, 8).is_err());
        let mb = ModelBasedFusion::new(TikhonovConfig::default(), &ops, 8, 8).unwrap();
        assert!(mb.solve_raw(&HyperImage::zeros(4, 8, 8), &HyperImage::zeros(2, 8, 8)).is_err());
        assert!(mb.solve_raw(&HyperImage::zeros(4, 4, 4), &HyperImage::zeros(3, 8, 8)).is_err());
    }

    #[test]
    fn desk_scale_no_change_reconstruction() {
        let ops = OperatorConfig::default().build(32).unwrap();
        let cfg = TikhonovConfig { lambda: 1e-6, ..TikhonovConfig::default() };
        let mb = ModelBasedFusion::new(cfg, &ops, 64, 64).unwrap();
        let backend = FusionBackend::ModelBased(mb);
        for seed in 0..3 {
            let x1 = procedural_reference(32, 64, 64, 5, &mut Rng::new(seed));
            let y1 = apply_spatial(&ops.spatial, &x1).unwrap();
            let y2 = apply_spectral(&ops.spectral, &x1).unwrap();
            let out = backend.fuse(&y1, &y2).unwrap();
            assert!(out.cg.as_ref().unwrap().converged);
            assert!(out.x.is_nonnegative());
            let rel = frobenius_norm(&image_sub(&out.x, &x1).unwrap()) / frobenius_norm(&x1);
            assert!(rel <= 0.1, "seed {seed}: {rel}");
            assert!(consistency(&out.x, &y1, &ops).unwrap().value <= 0.05);
        }
    }

    #[test]
    fn implicit_gradient_is_the_adjoint_of_the_solve() {
        let ops = tiny_ops();
        let cfg = TikhonovConfig { cg_tol: 1e-14, ..TikhonovConfig::default() };
        let mb = ModelBasedFusion::new(cfg, &ops, 8, 8).unwrap();
        let mut rng = Rng::new(21);
        let y1 = HyperImage::from_fn(4, 4, 4, |_, _, _| rng.normal());
        let y2 = HyperImage::from_fn(2, 8, 8, |_, _, _| rng.normal());
        let g = HyperImage::from_fn(4, 8, 8, |_, _, _| rng.normal());
        let (raw, _) = mb.solve_raw(&y1, &y2).unwrap();
        // With an all-positive mask the map (y1, y2) -> raw is linear.
        let positive = raw.map(|_| 1.0);
        let (g1, g2) = mb.backward(&positive, &g).unwrap();
        let lhs = g.dot(&raw).unwrap();
        let rhs = g1.dot(&y1).unwrap() + g2.dot(&y2).unwrap();
        assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn implicit_gradient_matches_finite_differences() {
        let ops = tiny_ops();
        let cfg = TikhonovConfig { cg_tol: 1e-14, ..TikhonovConfig::default() };
        let backend = FusionBackend::ModelBased(ModelBasedFusion::new(cfg, &ops, 8, 8).unwrap());
        let mut rng = Rng::new(5);
        let x = HyperImage::from_fn(4, 8, 8, |_, _, _| rng.uniform_range(0.2, 1.0));
        let y1 = apply_spatial(&ops.spatial, &x).unwrap();
        let y2 = apply_spectral(&ops.spectral, &x).unwrap();
        let w = HyperImage::from_fn(4, 8, 8, |_, _, _| rng.normal());
        let loss = |a: &HyperImage, b: &HyperImage| {
            let out = backend.fuse(a, b).unwrap().x;
            out.data().iter().zip(w.data()).map(|(o, w)| w * o * o).sum::<f64>()
        };
        let (out, tape) = backend.fuse_for_grad(&y1, &y2).unwrap();
        let grad = HyperImage::from_vec(4, 8, 8, out.x.data().iter().zip(w.data()).map(|(o, w)| 2.0 * w * o).collect()).unwrap();
        let (g1, g2) = backend.backward(&tape, &grad).unwrap();
        let eps = 1e-6;
        for idx in [0usize, 7, 33, 63] {
            let mut p = y1.clone();
            p.data_mut()[idx] += eps;
            let mut q = y1.clone();
            q.data_mut()[idx] -= eps;
            let fd = (loss(&p, &y2) - loss(&q, &y2)) / (2.0 * eps);
            assert!(nn::relative_error(g1.data()[idx], fd) < 1e-5, "y1[{idx}]");
        }
        for idx in [0usize, 50, 100, 127] {
            let mut p = y2.clone();
            p.data_mut()[idx] += eps;
            let mut q = y2.clone();
            q.data_mut()[idx] -= eps;
            let fd = (loss(&y1, &p) - loss(&y1, &q)) / (2.0 * eps);
            assert!(nn::relative_error(g2.data()[idx], fd) < 1e-5, "y2[{idx}]");
        }
    }

    #[test]
    fn consistency_cases() {
        let ops = tiny_ops();
        let mut rng = Rng::new(2);
        let x = HyperImage::from_fn(4, 8, 8, |_, _, _| rng.uniform());
        let y1 = apply_spatial(&ops.spatial, &x).unwrap();
        assert_eq!(consistency(&x, &y1, &ops).unwrap().value, 0.0);
        let z = consistency(&HyperImage::zeros(4, 8, 8), &y1, &ops).unwrap();
        assert!((z.value - 1.0).abs() < 1e-15 && !z.absolute);

        let e = HyperImage::from_fn(4, 8, 8, |_, _, _| 0.1 * rng.normal());
        let xp = x.add(&e).unwrap();
        let pred = apply_spatial(&ops.spatial, &xp).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for (p, y) in pred.data().iter().zip(y1.data()) {
            num += (p - y) * (p - y);
            den += y * y;
        }
        let want = (num / den).sqrt();
        assert!((consistency(&xp, &y1, &ops).unwrap().value - want).abs() < 1e-14);

        let c = consistency(&x, &HyperImage::zeros(4, 4, 4), &ops).unwrap();
        assert!(c.absolute);
        assert!((c.value - frobenius_norm(&y1)).abs() < 1e-14);
    }

    fn tiny_neural(seed: u64) -> Network {
        let spec = nn::fusion_net(4, 2, 4, 2, &ArchConfig { feature_width: 4, trunk_width: 6, disc_width: 4, leaky_slope: 0.2 }).unwrap();
        Network::init(spec, &mut Rng::new(seed))
    }

    #[test]
    fn neural_backend_is_nonnegative_and_differentiable() {
        let backend = FusionBackend::Neural(tiny_neural(1));
        let mut rng = Rng::new(4);
        let y1 = HyperImage::from_fn(4, 4, 4, |_, _, _| rng.normal());
        let y2 = HyperImage::from_fn(2, 8, 8, |_, _, _| rng.normal());
        let (out, tape) = backend.fuse_for_grad(&y1, &y2).unwrap();
        assert!(out.x.is_nonnegative());
        assert_eq!(out.x.shape(), crate::image::Shape::new(4, 8, 8));
        let (g1, g2) = backend.backward(&tape, &out.x).unwrap();
        assert_eq!((g1.shape(), g2.shape()), (y1.shape(), y2.shape()));
    }

    #[test]
    fn mismatched_tape_is_rejected() {
        let ops = tiny_ops();
        let mb = FusionBackend::ModelBased(ModelBasedFusion::new(TikhonovConfig::default(), &ops, 8, 8).unwrap());
        let neural = FusionBackend::Neural(tiny_neural(1));
        let y1 = HyperImage::zeros(4, 4, 4);
        let y2 = HyperImage::zeros(2, 8, 8);
        let (_, tape) = mb.fuse_for_grad(&y1, &y2).unwrap();
        assert!(neural.backward(&tape, &HyperImage::zeros(4, 8, 8)).is_err());
    }

    fn pretrain_samples(count: usize) -> (Vec<(HyperImage, HyperImage, HyperImage)>, DegradationPair) {
        let ops = tiny_ops();
        let data = (0..count)
            .map(|i| {
                let x = procedural_reference(4, 8, 8, 3, &mut Rng::new(100 + i as u64));
                let y1 = apply_spatial(&ops.spatial, &x).unwrap();
                let y2 = apply_spectral(&ops.spectral, &x).unwrap();
                (y1, y2, x)
            })
            .collect();
        (data, ops)
    }

    #[test]
    fn zero_epochs_leave_network_unchanged() {
        let (data, _) = pretrain_samples(2);
        let samples: Vec<FusionSample> = data.iter().map(|(a, b, c)| FusionSample { y1: a, y2: b, x: c }).collect();
        let mut net = tiny_neural(3);
        let before = net.params.checksum();
        let cfg = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
        let log = pretrain_fusion(&mut net, &samples, &cfg).unwrap();
        assert!(log.epoch_loss.is_empty());
        assert_eq!(net.params.checksum(), before);
    }

    #[test]
    fn pretraining_loss_decreases() {
        let (data, _) = pretrain_samples(8);
        let samples: Vec<FusionSample> = data.iter().map(|(a, b, c)| FusionSample { y1: a, y2: b, x: c }).collect();
        let mut net = tiny_neural(3);
        let cfg = PretrainConfig { epochs: 3, batch: 2, seed: 11, ..PretrainConfig::default() };
        let log = pretrain_fusion(&mut net, &samples, &cfg).unwrap();
        assert_eq!(log.epoch_loss.len(), 3);
        assert!(log.epoch_loss.windows(2).all(|w| w[1] < w[0]), "{:?}", log.epoch_loss);
    }
}
