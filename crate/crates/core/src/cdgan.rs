//! The adversarial change-detection model.
//!
//! The generator chains CI inference `C`, correction of the HRLS observation,
//! frozen fusion `F` and re-degradation:
//! `Ŷ1 = H1(F(Y1, Y2 − H2(C(Y1, Y2))))`. The discriminator `D` scores how much
//! an LRHS image looks like a real observation. `C` is trained with an
//! adversarial term, a prediction term `α ||Y1 − Ŷ1||²` and a group sparsity
//! term `β ||ΔX̂||₂,₁`.

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetPair;
use crate::detect::{cva_energy, smooth};
use crate::error::{Error, Result};
use crate::eval;
use crate::fusion::{FusionBackend, FusionTape};
use crate::image::{group21_norm, image_sub, HyperImage};
use crate::nn::{self, AdamConfig, Network, ParamGrads, Tape};
use crate::operators::{adjoint_spatial, adjoint_spectral, apply_spatial, apply_spectral, DegradationPair};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Clamp for discriminator scores inside the logarithms.
    pub eps_d: f64,
    /// Use `log(1 − D(Ŷ1))` for C instead of the non-saturating `−log D(Ŷ1)`.
    pub saturating: bool,
    /// Include the adversarial term (disabled for pure prediction fitting).
    pub adversarial: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e-3,
            lr: 2e-4,
            epochs: 15,
            batch: 4,
            seed: 0,
            eps_d: 1e-6,
            saturating: false,
            adversarial: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config(format!("alpha and beta must be >= 0 (got {}, {})", self.alpha, self.beta)));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::Config("lr must be > 0 and batch >= 1".into()));
        }
        if !(self.eps_d > 0.0 && self.eps_d < 0.5) {
            return Err(Error::Config("eps_d must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// CI network, frozen fusion backend and the assumed degradation operators.
#[derive(Debug, Clone)]
pub struct GeneratorState {
    pub ci_net: Network,
    pub fusion: FusionBackend,
    pub ops: DegradationPair,
}

/// Intermediate products of one generator pass.
#[derive(Debug, Clone)]
pub struct Generated {
    pub ci: HyperImage,
    pub y2_corrected: HyperImage,
    pub x1_hat: HyperImage,
    pub y1_hat: HyperImage,
}

pub struct GeneratorTape {
    ci: Tape,
    fusion: FusionTape,
}

/// `Ỹ2 = Y2 − H2(ΔX̂)`.
pub fn correct(y2: &HyperImage, ci: &HyperImage, ops: &DegradationPair) -> Result<HyperImage> {
    let shift = apply_spectral(&ops.spectral, ci)?;
    shift.ensure_shape(y2.shape(), "correction")?;
    image_sub(y2, &shift)
}

impl GeneratorState {
    pub fn infer_ci(&self, y1: &HyperImage, y2: &HyperImage) -> Result<HyperImage> {
        self.ci_net.predict(&[y1, y2])
    }

    pub fn generate(&self, y1: &HyperImage, y2: &HyperImage) -> Result<Generated> {
        Ok(self.generate_for_grad(y1, y2)?.0)
    }

    pub fn generate_for_grad(&self, y1: &HyperImage, y2: &HyperImage) -> Result<(Generated, GeneratorTape)> {
        let (ci, ci_tape) = self.ci_net.forward(&[y1, y2])?;
        let y2_corrected = correct(y2, &ci, &self.ops)?;
        let (fused, fusion_tape) = self.fusion.fuse_for_grad(y1, &y2_corrected)?;
        let y1_hat = apply_spatial(&self.ops.spatial, &fused.x)?;
        Ok((
            Generated {
                ci,
                y2_corrected,
                x1_hat: fused.x,
                y1_hat,
            },
            GeneratorTape {
                ci: ci_tape,
                fusion: fusion_tape,
            },
        ))
    }

    /// Parameter gradients of C given `∂L/∂Ŷ1` and an extra direct term
    /// `∂L/∂ΔX̂`.
    pub fn backward(&self, tape: &GeneratorTape, g_y1_hat: &HyperImage, g_ci_direct: &HyperImage) -> Result<ParamGrads> {
        let rows = self.fusion_rows(g_ci_direct);
        let g_x = adjoint_spatial(&self.ops.spatial, g_y1_hat, rows.0, rows.1)?;
        let (_, g_y2t) = self.fusion.backward(&tape.fusion, &g_x)?;
        let g_ci = g_ci_direct.axpy(-1.0, &adjoint_spectral(&self.ops.spectral, &g_y2t)?)?;
        Ok(self.ci_net.backward(&tape.ci, &g_ci)?.params)
    }

    fn fusion_rows(&self, ci: &HyperImage) -> (usize, usize) {
        (ci.rows(), ci.cols())
    }
}

/// Mean of the discriminator's sigmoid map.
pub fn discriminate(d_net: &Network, image: &HyperImage) -> Result<f64> {
    Ok(discriminate_for_grad(d_net, image)?.0)
}

fn discriminate_for_grad(d_net: &Network, image: &HyperImage) -> Result<(f64, Tape)> {
    let (map, tape) = d_net.forward(&[image])?;
    let score = map.data().iter().sum::<f64>() / map.data().len() as f64;
    Ok((score, tape))
}

/// Gradients of `k · score`.
fn discriminator_backward(d_net: &Network, tape: &Tape, k: f64) -> Result<nn::Gradients> {
    let map = tape.output(&d_net.spec);
    let g = HyperImage::filled(map.bands(), map.rows(), map.cols(), k / map.data().len() as f64);
    d_net.backward(tape, &g)
}

fn clamp_score(s: f64, eps: f64) -> (f64, bool) {
    if s < eps {
        (eps, true)
    } else if s > 1.0 - eps {
        (1.0 - eps, true)
    } else {
        (s, false)
    }
}

/// Loss terms over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub l_adv: f64,
    pub l_pre: f64,
    pub l_spa: f64,
    pub total_c: f64,
    pub total_d: f64,
}

/// Adversarial part of C's objective for one clamped fake score.
fn c_adv_term(s_fake: f64, cfg: &TrainConfig) -> f64 {
    if cfg.saturating {
        (1.0 - s_fake).ln()
    } else {
        -s_fake.ln()
    }
}

/// Evaluate all loss terms (no gradients).
pub fn losses(state: &GeneratorState, d_net: &Network, batch: &[&DatasetPair], cfg: &TrainConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let b = batch.len() as f64;
    let mut out = LossBreakdown::default();
    let (mut real_log, mut fake_log, mut c_adv) = (0.0, 0.0, 0.0);
    for p in batch {
        let g = state.generate(&p.y1, &p.y2)?;
        let (sr, _) = clamp_score(discriminate(d_net, &p.y1)?, cfg.eps_d);
        let (sf, _) = clamp_score(discriminate(d_net, &g.y1_hat)?, cfg.eps_d);
        real_log += sr.ln();
        fake_log += (1.0 - sf).ln();
        c_adv += c_adv_term(sf, cfg);
        let diff = image_sub(&p.y1, &g.y1_hat)?;
        out.l_pre += diff.dot(&diff)?;
        out.l_spa += group21_norm(&g.ci);
    }
    out.l_adv = (real_log + fake_log) / b;
    out.l_pre /= b;
    out.l_spa /= b;
    let adv_weight = if cfg.adversarial { 1.0 } else { 0.0 };
    out.total_c = adv_weight * c_adv / b + cfg.alpha * out.l_pre + cfg.beta * out.l_spa;
    out.total_d = -out.l_adv;
    Ok(out)
}

/// `∂ ||ΔX̂||₂,₁ / ∂ΔX̂`: each nonzero column normalized, zero columns zero.
pub fn group21_grad(ci: &HyperImage) -> HyperImage {
    let norms = crate::image::pixel_norms(ci);
    let n = ci.pixels();
    let mut g = ci.clone();
    for b in 0..ci.bands() {
        for (v, nrm) in g.data_mut()[b * n..(b + 1) * n].iter_mut().zip(&norms) {
            *v = if *nrm > 0.0 { *v / nrm } else { 0.0 };
        }
    }
    g
}

/// Gradient of C's total objective over a batch, with the loss terms.
pub fn c_gradients(
    state: &GeneratorState,
    d_net: &Network,
    batch: &[&DatasetPair],
    cfg: &TrainConfig,
) -> Result<(ParamGrads, LossBreakdown)> {
    let b = batch.len() as f64;
    let mut grads = state.ci_net.params.zero_grads();
    let mut out = LossBreakdown::default();
    let (mut real_log, mut fake_log, mut c_adv) = (0.0, 0.0, 0.0);
    for p in batch {
        let (g, tape) = state.generate_for_grad(&p.y1, &p.y2)?;
        let (sr, _) = clamp_score(discriminate(d_net, &p.y1)?, cfg.eps_d);
        let diff = image_sub(&p.y1, &g.y1_hat)?;
        out.l_pre += diff.dot(&diff)?;
        out.l_spa += group21_norm(&g.ci);
        real_log += sr.ln();

        // ∂/∂Ŷ1 of α||Y1 − Ŷ1||² / B
        let mut g_y1_hat = diff.scale(-2.0 * cfg.alpha / b);
        let (raw_f, d_tape) = discriminate_for_grad(d_net, &g.y1_hat)?;
        let (sf, clamped) = clamp_score(raw_f, cfg.eps_d);
        fake_log += (1.0 - sf).ln();
        c_adv += c_adv_term(sf, cfg);
        if cfg.adversarial && !clamped {
            let dscore = if cfg.saturating { -1.0 / (1.0 - sf) } else { -1.0 / sf } / b;
            let gd = discriminator_backward(d_net, &d_tape, dscore)?;
            g_y1_hat = g_y1_hat.add(&gd.inputs[0])?;
        }
        let g_ci = group21_grad(&g.ci).scale(cfg.beta / b);
        let pg = state.backward(&tape, &g_y1_hat, &g_ci)?;
        nn::accumulate(&mut grads, &pg, 1.0);
    }
    out.l_adv = (real_log + fake_log) / b;
    out.l_pre /= b;
    out.l_spa /= b;
    let adv_weight = if cfg.adversarial { 1.0 } else { 0.0 };
    out.total_c = adv_weight * c_adv / b + cfg.alpha * out.l_pre + cfg.beta * out.l_spa;
    out.total_d = -out.l_adv;
    Ok((grads, out))
}

/// Scores seen during a discriminator step.
#[derive(Debug, Clone, Copy, Default)]
pub struct DStepStats {
    pub real_mean: f64,
    pub fake_mean: f64,
    /// Every score in the batch was clamped.
    pub saturated: bool,
}

/// Gradient of `total_D = −L_adv` with respect to D's parameters, given the
/// generator outputs `fakes`.
pub fn d_gradients(
    d_net: &Network,
    reals: &[&HyperImage],
    fakes: &[&HyperImage],
    cfg: &TrainConfig,
) -> Result<(ParamGrads, DStepStats)> {
    let mut grads = d_net.params.zero_grads();
    let mut stats = DStepStats {
        saturated: true,
        ..DStepStats::default()
    };
    let br = reals.len() as f64;
    let bf = fakes.len() as f64;
    for img in reals {
        let (raw, tape) = discriminate_for_grad(d_net, img)?;
        let (s, clamped) = clamp_score(raw, cfg.eps_d);
        stats.real_mean += raw / br;
        stats.saturated &= clamped;
        if !clamped {
            let g = discriminator_backward(d_net, &tape, -1.0 / (s * br))?;
            nn::accumulate(&mut grads, &g.params, 1.0);
        }
    }
    for img in fakes {
        let (raw, tape) = discriminate_for_grad(d_net, img)?;
        let (s, clamped) = clamp_score(raw, cfg.eps_d);
        stats.fake_mean += raw / bf;
        stats.saturated &= clamped;
        if !clamped {
            let g = discriminator_backward(d_net, &tape, 1.0 / ((1.0 - s) * bf))?;
            nn::accumulate(&mut grads, &g.params, 1.0);
        }
    }
    Ok((grads, stats))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_adv: f64,
    pub l_pre: f64,
    pub l_spa: f64,
    pub total_c: f64,
    pub val_auc: Option<f64>,
    pub d_real: f64,
    pub d_fake: f64,
    pub d_saturated: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,L_adv,L_pre,L_spa,total_C,val_AUC,D_real,D_fake,D_saturated\n");
        for e in &self.epochs {
            let auc = e.val_auc.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.epoch, e.l_adv, e.l_pre, e.l_spa, e.total_c, auc, e.d_real, e.d_fake, e.d_saturated
            ));
        }
        s
    }
}

/// Held-out pairs scored after every epoch (diagnostic only).
pub struct Validation<'a> {
    pub pairs: &'a [DatasetPair],
    pub smooth_radius: usize,
}

/// Mean AUC of the sCVA energy of the inferred CI over `pairs`.
pub fn mean_auc(state: &GeneratorState, pairs: &[DatasetPair], smooth_radius: usize) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let ci = state.infer_ci(&p.y1, &p.y2)?;
        let e = smooth(&cva_energy(&ci), smooth_radius);
        total += eval::auc(&eval::roc(&e, &p.d_ref)?);
    }
    Ok(total / pairs.len() as f64)
}

/// Alternating training: per minibatch one D ascent step, then one C descent
/// step with the fusion backend frozen.
///
/// On a non-finite loss both networks are restored to their state at the end
/// of the last complete epoch and an error is returned.
pub fn train(
    state: &mut GeneratorState,
    d_net: &mut Network,
    train_pairs: &[DatasetPair],
    validation: Option<&Validation>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    let fusion_sum = state.fusion.checksum();
    let adam = cfg.adam();
    let root = Rng::new(cfg.seed).fork(0x7A11);
    let mut log = TrainLog::default();
    let mut last_good = (state.ci_net.params.clone(), d_net.params.clone());

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        root.fork(epoch as u64).shuffle(&mut order);
        let mut acc = LossBreakdown::default();
        let (mut d_real, mut d_fake) = (0.0, 0.0);
        let mut saturated = true;
        let batches = order.chunks(cfg.batch).count() as f64;

        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&DatasetPair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let step = (|| -> Result<LossBreakdown> {
                if cfg.adversarial {
                    let fakes: Vec<HyperImage> = batch
                        .iter()
                        .map(|p| state.generate(&p.y1, &p.y2).map(|g| g.y1_hat))
                        .collect::<Result<_>>()?;
                    let reals: Vec<&HyperImage> = batch.iter().map(|p| &p.y1).collect();
                    let fake_refs: Vec<&HyperImage> = fakes.iter().collect();
                    let (dg, stats) = d_gradients(d_net, &reals, &fake_refs, cfg)?;
                    d_net.params.adam_step(&dg, &adam)?;
                    d_real += stats.real_mean / batches;
                    d_fake += stats.fake_mean / batches;
                    saturated &= stats.saturated;
                }
                let (cg, losses) = c_gradients(state, d_net, &batch, cfg)?;
                if ![losses.l_adv, losses.l_pre, losses.l_spa, losses.total_c].iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}: {losses:?}")));
                }
                state.ci_net.params.adam_step(&cg, &adam)?;
                Ok(losses)
            })();
            match step {
                Ok(l) => {
                    acc.l_adv += l.l_adv / batches;
                    acc.l_pre += l.l_pre / batches;
                    acc.l_spa += l.l_spa / batches;
                    acc.total_c += l.total_c / batches;
                }
                Err(e) => {
                    state.ci_net.params = last_good.0;
                    d_net.params = last_good.1;
                    let e = match e {
                        Error::Layer { .. } | Error::Numeric(_) => {
                            Error::Numeric(format!("training aborted, networks restored to the end of epoch {}: {e}", epoch - 1))
                        }
                        other => other,
                    };
                    return Err(e);
                }
            }
        }
        let saturated = cfg.adversarial && saturated;
        if saturated {
            log::warn!("epoch {epoch}: discriminator saturated on every batch (scores beyond eps_d)");
        }
        let val_auc = match validation {
            Some(v) if !v.pairs.is_empty() => Some(mean_auc(state, v.pairs, v.smooth_radius)?),
            _ => None,
        };
        let row = EpochLog {
            epoch,
            l_adv: acc.l_adv,
            l_pre: acc.l_pre,
            l_spa: acc.l_spa,
            total_c: acc.total_c,
            val_auc,
            d_real,
            d_fake,
            d_saturated: saturated,
        };
        log::info!(
            "epoch {epoch}: L_adv {:.4} L_pre {:.4e} L_spa {:.4e} val_AUC {}",
            row.l_adv,
            row.l_pre,
            row.l_spa,
            val_auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
        );
        on_epoch(&row);
        log.epochs.push(row);
        last_good = (state.ci_net.params.clone(), d_net.params.clone());
    }
    if state.fusion.checksum() != fusion_sum {
        return Err(Error::Invalid("fusion parameters changed during training".into()));
    }
    Ok(log)
}


/// Central differences of `total_C` with respect to C's parameters, against
/// the analytic gradient.
pub fn check_total_c_gradient(
    state: &GeneratorState,
    d_net: &Network,
    batch: &[&DatasetPair],
    cfg: &TrainConfig,
    per_tensor: usize,
) -> Result<nn::gradcheck::GradCheckReport> {
    let (g, _) = c_gradients(state, d_net, batch, cfg)?;
    let eps = 1e-5;
    let mut report = nn::gradcheck::GradCheckReport::default();
    let mut probe = state.clone();
    for ti in 0..state.ci_net.params.tensors.len() {
        for idx in nn::gradcheck::probe_indices(state.ci_net.params.tensors[ti].len(), per_tensor) {
            let orig = probe.ci_net.params.tensors[ti].data[idx];
            probe.ci_net.params.tensors[ti].data[idx] = orig + eps;
            let plus = losses(&probe, d_net, batch, cfg)?.total_c;
            probe.ci_net.params.tensors[ti].data[idx] = orig - eps;
            let minus = losses(&probe, d_net, batch, cfg)?.total_c;
            probe.ci_net.params.tensors[ti].data[idx] = orig;
            report.record(ti, idx, g[ti][idx], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Toy-sized building blocks (8×8 latents, 4 bands, ratio 2) for gradient
/// checks and tests.
pub mod toy {
    use super::*;
    use crate::datagen::{procedural_reference, ChangeRule, Direction, PairInfo};
    use crate::fusion::{ModelBasedFusion, TikhonovConfig};
    use crate::image::BinaryMap;
    use crate::nn::{ci_net, discriminator, fusion_net, gradcheck, ArchConfig};
    use crate::operators::{SpatialOp, SpectralOp};

    pub fn arch() -> ArchConfig {
        ArchConfig {
            feature_width: 3,
            trunk_width: 4,
            disc_width: 3,
            leaky_slope: 0.2,
        }
    }

    pub fn ops() -> DegradationPair {
        DegradationPair {
            spatial: SpatialOp::new(1.0, 2).expect("valid toy blur"),
            spectral: SpectralOp::band_average(4, 2).expect("valid toy grouping"),
        }
    }

    pub fn model_based(ops: &DegradationPair) -> FusionBackend {
        let cfg = TikhonovConfig {
            cg_tol: 1e-13,
            ..TikhonovConfig::default()
        };
        FusionBackend::ModelBased(ModelBasedFusion::new(cfg, ops, 8, 8).expect("valid toy fusion"))
    }

    pub fn neural(seed: u64) -> FusionBackend {
        let spec = fusion_net(4, 2, 4, 2, &arch()).expect("valid toy fusion net");
        FusionBackend::Neural(Network::init(spec, &mut Rng::new(seed)))
    }

    pub fn state(fusion: FusionBackend, seed: u64) -> GeneratorState {
        let spec = ci_net(4, 2, 4, 2, &arch()).expect("valid toy ci net");
        GeneratorState {
            ci_net: Network::init(spec, &mut Rng::new(seed)),
            fusion,
            ops: ops(),
        }
    }

    pub fn discriminator_net(seed: u64) -> Network {
        Network::init(discriminator(4, &arch()), &mut Rng::new(seed))
    }

    /// A procedural scene with a 3×3 block replaced by a flat spectrum.
    pub fn pair(seed: u64, ops: &DegradationPair) -> DatasetPair {
        let x1 = procedural_reference(4, 8, 8, 3, &mut Rng::new(seed));
        let mut x2 = x1.clone();
        for b in 0..4 {
            for r in 2..5 {
                for c in 3..6 {
                    x2.set(b, r, c, 0.9 - 0.15 * b as f64);
                }
            }
        }
        let d_ref = BinaryMap::from_bools(8, 8, (0..64).map(|p| (2..5).contains(&(p / 8)) && (3..6).contains(&(p % 8))))
            .expect("8x8 map");
        DatasetPair {
            y1: apply_spatial(&ops.spatial, &x1).expect("toy shapes"),
            y2: apply_spectral(&ops.spectral, &x2).expect("toy shapes"),
            x1,
            x2,
            d_ref,
            info: PairInfo {
                index: 0,
                reference: 0,
                rule: ChangeRule::Block,
                direction: Direction::Forward,
                seed,
                region: vec![],
            },
        }
    }

    /// Finite-difference checks of the C, F and D graphs and of the full
    /// `total_C` objective through correction, neural fusion and prediction.
    pub fn gradcheck_suite(seed: u64) -> Result<Vec<(&'static str, gradcheck::GradCheckReport)>> {
        let ops = ops();
        let p = pair(seed, &ops);
        let st = state(neural(seed + 1), seed + 2);
        let d = discriminator_net(seed + 3);
        let FusionBackend::Neural(f) = &st.fusion else { unreachable!() };
        let cfg = TrainConfig {
            beta: 0.05,
            ..TrainConfig::default()
        };
        Ok(vec![
            ("ci_net", gradcheck::check_network(&st.ci_net, &[&p.y1, &p.y2], seed, 1e-6, 6)?),
            ("fusion_net", gradcheck::check_network(f, &[&p.y1, &p.y2], seed, 1e-6, 6)?),
            ("discriminator", gradcheck::check_network(&d, &[&p.y1], seed, 1e-6, 6)?),
            ("total_c", check_total_c_gradient(&st, &d, &[&p], &cfg, 4)?),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::toy::{arch as tiny_arch, model_based, ops as tiny_ops, pair, state};
    use crate::fusion::consistency;
    use crate::image::Shape;
    use crate::nn::{ci_net, discriminator, fusion_net, ArchConfig};

    #[test]
    fn ci_shape_at_full_scale_dims() {
        let spec = ci_net(224, 56, 224, 4, &ArchConfig::default()).unwrap();
        assert_eq!(spec.output_shape(&[(224, 30, 30), (56, 120, 120)]).unwrap(), (224, 120, 120));
    }

    #[test]
    fn zero_weight_ci_and_correction() {
        let ops = tiny_ops();
        let mut st = state(model_based(&ops), 1);
        st.ci_net.params = st.ci_net.spec.zero_params();
        let p = pair(3, &ops);
        let ci = st.infer_ci(&p.y1, &p.y2).unwrap();
        assert!(ci.data().iter().all(|&v| v == 0.0));
        assert_eq!(correct(&p.y2, &ci, &ops).unwrap(), p.y2);
    }

    #[test]
    fn exact_ci_corrects_to_first_latent() {
        let ops = tiny_ops();
        let p = pair(4, &ops);
        let dx = image_sub(&p.x2, &p.x1).unwrap();
        let y2t = correct(&p.y2, &dx, &ops).unwrap();
        let want = apply_spectral(&ops.spectral, &p.x1).unwrap();
        assert!(y2t.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-14));
        let y2t2 = correct(&p.y2, &dx.scale(2.0), &ops).unwrap();
        let d1 = image_sub(&p.y2, &y2t).unwrap();
        let d2 = image_sub(&p.y2, &y2t2).unwrap();
        assert!(d2.data().iter().zip(d1.data()).all(|(a, b)| (a - 2.0 * b).abs() < 1e-14));
    }

    #[test]
    fn generate_is_the_manual_composition() {
        let ops = tiny_ops();
        let st = state(model_based(&ops), 2);
        let p = pair(5, &ops);
        let g = st.generate(&p.y1, &p.y2).unwrap();
        let ci = st.ci_net.predict(&[&p.y1, &p.y2]).unwrap();
        let y2t = image_sub(&p.y2, &apply_spectral(&ops.spectral, &ci).unwrap()).unwrap();
        let x = st.fusion.fuse(&p.y1, &y2t).unwrap().x;
        let y1_hat = apply_spatial(&ops.spatial, &x).unwrap();
        assert_eq!(g.ci, ci);
        assert_eq!(g.y1_hat, y1_hat);
        assert_eq!(g.y1_hat.shape(), p.y1.shape());
        assert_eq!(st.generate(&p.y1, &p.y2).unwrap().ci, g.ci);
    }

    #[test]
    fn zero_ci_on_no_change_pair_is_consistent() {
        let ops = tiny_ops();
        let mut st = state(model_based(&ops), 2);
        st.ci_net.params = st.ci_net.spec.zero_params();
        let mut p = pair(6, &ops);
        p.y2 = apply_spectral(&ops.spectral, &p.x1).unwrap();
        let g = st.generate(&p.y1, &p.y2).unwrap();
        assert!(consistency(&g.x1_hat, &p.y1, &ops).unwrap().value <= 0.1);
    }

    #[test]
    fn discriminator_scores() {
        let spec = discriminator(4, &tiny_arch());
        let zero = Network::new(spec.clone(), spec.zero_params()).unwrap();
        let img = HyperImage::filled(4, 16, 16, 0.3);
        assert_eq!(discriminate(&zero, &img).unwrap(), 0.5);
        let d = Network::init(spec, &mut Rng::new(9));
        let mut rng = Rng::new(1);
        for _ in 0..5 {
            let x = HyperImage::from_fn(4, 16, 16, |_, _, _| 10.0 * rng.normal());
            let s = discriminate(&d, &x).unwrap();
            assert!(s > 0.0 && s < 1.0);
        }
        assert!(discriminate(&d, &HyperImage::zeros(3, 16, 16)).is_err());
    }

    #[test]
    fn discriminator_score_gradient_matches_finite_differences() {
        let d = Network::init(discriminator(2, &tiny_arch()), &mut Rng::new(4));
        let mut rng = Rng::new(2);
        let img = HyperImage::from_fn(2, 8, 8, |_, _, _| rng.normal());
        let (_, tape) = discriminate_for_grad(&d, &img).unwrap();
        let g = discriminator_backward(&d, &tape, 1.0).unwrap();
        let eps = 1e-6;
        let mut checked = 0;
        for (ti, t) in d.params.tensors.iter().enumerate() {
            for idx in nn::gradcheck::probe_indices(t.len(), 3) {
                let mut p = d.clone();
                p.params.tensors[ti].data[idx] += eps;
                let mut q = d.clone();
                q.params.tensors[ti].data[idx] -= eps;
                let fd = (discriminate(&p, &img).unwrap() - discriminate(&q, &img).unwrap()) / (2.0 * eps);
                assert!(nn::relative_error(g.params[ti][idx], fd) <= 1e-4, "tensor {ti}[{idx}]");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn loss_closed_forms() {
        let ops = tiny_ops();
        let mut st = state(model_based(&ops), 2);
        st.ci_net.params = st.ci_net.spec.zero_params();
        let dspec = discriminator(4, &tiny_arch());
        let d0 = Network::new(dspec.clone(), dspec.zero_params()).unwrap();
        let mut p = pair(7, &ops);
        p.y2 = apply_spectral(&ops.spectral, &p.x1).unwrap();
        let l = losses(&st, &d0, &[&p], &TrainConfig::default()).unwrap();
        assert!((l.l_adv - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(l.l_spa, 0.0);
        assert!(l.l_pre < 1e-3 * p.y1.dot(&p.y1).unwrap());
    }

    #[test]
    fn batch_of_one_totals_match_recomputation() {
        let ops = tiny_ops();
        let st = state(model_based(&ops), 3);
        let d = Network::init(discriminator(4, &tiny_arch()), &mut Rng::new(5));
        let p = pair(8, &ops);
        let cfg = TrainConfig { alpha: 0.7, beta: 0.3, ..TrainConfig::default() };
        let l = losses(&st, &d, &[&p], &cfg).unwrap();
        let g = st.generate(&p.y1, &p.y2).unwrap();
        let sr = discriminate(&d, &p.y1).unwrap();
        let sf = discriminate(&d, &g.y1_hat).unwrap();
        let pre: f64 = p.y1.data().iter().zip(g.y1_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let mut spa = 0.0;
        for px in 0..64 {
            spa += (0..4).map(|b| g.ci.data()[b * 64 + px].powi(2)).sum::<f64>().sqrt();
        }
        assert!((l.l_adv - (sr.ln() + (1.0 - sf).ln())).abs() < 1e-14);
        assert!((l.l_pre - pre).abs() < 1e-14 * pre.max(1.0));
        assert!((l.l_spa - spa).abs() < 1e-12);
        let total = -sf.ln() + 0.7 * pre + 0.3 * spa;
        assert!((l.total_c - total).abs() < 1e-12);
        let (_, lg) = c_gradients(&st, &d, &[&p], &cfg).unwrap();
        assert!((lg.total_c - l.total_c).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradient_with_neural_fusion() {
        let ops = tiny_ops();
        let fnet = Network::init(fusion_net(4, 2, 4, 2, &tiny_arch()).unwrap(), &mut Rng::new(11));
        let st = state(FusionBackend::Neural(fnet), 12);
        let d = Network::init(discriminator(4, &tiny_arch()), &mut Rng::new(13));
        let p = pair(9, &ops);
        let cfg = TrainConfig { beta: 0.05, ..TrainConfig::default() };
        let report = check_total_c_gradient(&st, &d, &[&p], &cfg, 3).unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn end_to_end_gradient_with_model_based_fusion() {
        let ops = tiny_ops();
        let st = state(model_based(&ops), 14);
        let d = Network::init(discriminator(4, &tiny_arch()), &mut Rng::new(15));
        let p = pair(10, &ops);
        let q = pair(11, &ops);
        let cfg = TrainConfig { beta: 0.05, ..TrainConfig::default() };
        let report = check_total_c_gradient(&st, &d, &[&p, &q], &cfg, 3).unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn d_gradient_matches_finite_differences() {
        let d = Network::init(discriminator(4, &tiny_arch()), &mut Rng::new(16));
        let mut rng = Rng::new(3);
        let real = HyperImage::from_fn(4, 4, 4, |_, _, _| rng.uniform());
        let fake = HyperImage::from_fn(4, 4, 4, |_, _, _| rng.uniform());
        let cfg = TrainConfig::default();
        let (g, _) = d_gradients(&d, &[&real], &[&fake], &cfg).unwrap();
        let total_d = |net: &Network| -(discriminate(net, &real).unwrap().ln() + (1.0 - discriminate(net, &fake).unwrap()).ln());
        let eps = 1e-6;
        for (ti, t) in d.params.tensors.iter().enumerate() {
            for idx in nn::gradcheck::probe_indices(t.len(), 2) {
                let mut p = d.clone();
                p.params.tensors[ti].data[idx] += eps;
                let mut q = d.clone();
                q.params.tensors[ti].data[idx] -= eps;
                let fd = (total_d(&p) - total_d(&q)) / (2.0 * eps);
                assert!(nn::relative_error(g[ti][idx], fd) <= 1e-4);
            }
        }
    }

    #[test]
    fn training_keeps_fusion_frozen_and_is_reproducible() {
        let ops = tiny_ops();
        let fnet = Network::init(fusion_net(4, 2, 4, 2, &tiny_arch()).unwrap(), &mut Rng::new(21));
        let pairs: Vec<DatasetPair> = (0..4).map(|i| pair(30 + i, &ops)).collect();
        let cfg = TrainConfig { epochs: 2, batch: 2, lr: 1e-3, ..TrainConfig::default() };
        let run = || {
            let mut st = state(FusionBackend::Neural(fnet.clone()), 22);
            let mut d = Network::init(discriminator(4, &tiny_arch()), &mut Rng::new(23));
            let before = st.fusion.checksum();
            let val = Validation { pairs: &pairs[..1], smooth_radius: 1 };
            let log = train(&mut st, &mut d, &pairs, Some(&val), &cfg, |_| {}).unwrap();
            assert_eq!(st.fusion.checksum(), before);
            (log, st.ci_net.params.checksum(), d.params.checksum())
        };
        let (a, ca, da) = run();
        let (b, cb, db) = run();
        assert_eq!(a, b);
        assert_eq!((ca, da), (cb, db));
        assert_eq!(a.epochs.len(), 2);
        assert!(a.epochs.iter().all(|e| e.val_auc.is_some()));
        assert!(a.to_csv().starts_with("epoch,L_adv,L_pre,L_spa,total_C,val_AUC"));
    }

    #[test]
    fn beta_zero_run_completes() {
        let ops = tiny_ops();
        let pairs: Vec<DatasetPair> = (0..2).map(|i| pair(40 + i, &ops)).collect();
        let mut st = state(model_based(&ops), 5);
        let mut d = Network::init(discriminator(4, &tiny_arch()), &mut Rng::new(6));
        let cfg = TrainConfig { beta: 0.0, epochs: 1, batch: 2, ..TrainConfig::default() };
        let log = train(&mut st, &mut d, &pairs, None, &cfg, |_| {}).unwrap();
        assert_eq!(log.epochs.len(), 1);
        assert!(mean_auc(&st, &pairs, 0).unwrap().is_finite());
    }

    #[test]
    fn prediction_only_overfits_one_pair() {
        let ops = tiny_ops();
        let p = pair(50, &ops);
        let mut st = state(model_based(&ops), 7);
        let mut d = Network::init(discriminator(4, &tiny_arch()), &mut Rng::new(8));
        let cfg = TrainConfig { alpha: 1e6, beta: 0.0, adversarial: false, lr: 1e-3, ..TrainConfig::default() };
        let initial = losses(&st, &d, &[&p], &cfg).unwrap().l_pre;
        let pairs = [p];
        for _ in 0..500 {
            let (g, _) = c_gradients(&st, &d, &[&pairs[0]], &cfg).unwrap();
            st.ci_net.params.adam_step(&g, &cfg.adam()).unwrap();
        }
        let fin = losses(&st, &d, &[&pairs[0]], &cfg).unwrap().l_pre;
        assert!(fin * 100.0 <= initial, "{initial} -> {fin}");
        // The discriminator is untouched when the adversarial term is off.
        let mut d2 = d.clone();
        let log = train(&mut st, &mut d2, &pairs, None, &TrainConfig { epochs: 1, ..cfg }, |_| {}).unwrap();
        assert_eq!(d2.params, d.params);
        assert!(!log.epochs[0].d_saturated);
        d = d2;
        let _ = d;
    }

    #[test]
    fn toy_suite_passes() {
        for (name, r) in toy::gradcheck_suite(1).unwrap() {
            let tol = if name == "total_c" { 1e-3 } else { 1e-4 };
            assert!(r.passes(tol), "{name}: {r:?}");
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = TrainConfig { alpha: -1.0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig { batch: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn non_finite_input_aborts_and_restores() {
        let ops = tiny_ops();
        let mut p = pair(60, &ops);
        p.y1.data_mut()[0] = 1e308;
        p.y1.data_mut()[1] = 1e308;
        let mut st = state(model_based(&ops), 9);
        let mut d = Network::init(discriminator(4, &tiny_arch()), &mut Rng::new(10));
        let before = st.ci_net.params.clone();
        let cfg = TrainConfig { epochs: 1, batch: 1, ..TrainConfig::default() };
        let err = train(&mut st, &mut d, &[p], None, &cfg, |_| {});
        assert!(matches!(err, Err(Error::Numeric(_))), "{err:?}");
        assert_eq!(st.ci_net.params, before);
        let _ = Shape::new(1, 1, 1);
    }
}
