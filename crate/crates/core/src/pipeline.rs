//! End-to-end experiment driver: generate → pretrain fusion (neural backend
//! only) → train → detect → eval, with a manifest recording the config hash,
//! seeds, every file written and the final metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cdgan::{self, GeneratorState, TrainLog, Validation};
use crate::config::ExperimentConfig;
use crate::datagen::{self, ChangeRule, Dataset, DatasetPair, Direction};
use crate::detect::{self, cva_energy, smooth, EnergyMap};
use crate::error::{Error, Result};
use crate::eval;
use crate::fusion::{pretrain_fusion, FusionBackend, FusionConfig, FusionSample, ModelBasedFusion};
use crate::image::BinaryMap;
use crate::io;
use crate::nn::{checkpoint, ci_net, discriminator, fusion_net, Network};
use crate::operators::{apply_spectral, DegradationPair};
use crate::rng::Rng;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gen,
    PretrainFusion,
    Train,
    Detect,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::PretrainFusion => "pretrain-fusion",
            Stage::Train => "train",
            Stage::Detect => "detect",
            Stage::Eval => "eval",
        }
    }
}

/// Stages the config requires, in execution order.
pub fn plan(cfg: &ExperimentConfig) -> Vec<Stage> {
    let mut stages = vec![Stage::Gen];
    if matches!(cfg.fusion, FusionConfig::Neural { .. }) {
        stages.push(Stage::PretrainFusion);
    }
    stages.extend([Stage::Train, Stage::Detect, Stage::Eval]);
    stages
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Re-run every stage even if the manifest marks it complete.
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub train: u64,
    pub fusion_pretrain: Option<u64>,
    pub corruption: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed: bool,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub stages: BTreeMap<Stage, StageRecord>,
    pub report: Option<Report>,
}

impl Manifest {
    fn new(cfg: &ExperimentConfig) -> Self {
        let fusion_pretrain = match &cfg.fusion {
            FusionConfig::Neural { pretrain, .. } => Some(pretrain.seed),
            FusionConfig::ModelBased { .. } => None,
        };
        Self {
            name: cfg.name.clone(),
            config_hash: cfg.hash(),
            seeds: Seeds {
                data: cfg.data.seed,
                train: cfg.train.seed,
                fusion_pretrain,
                corruption: cfg.operators.corruption.as_ref().map(|c| c.seed),
            },
            stages: BTreeMap::new(),
            report: None,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        serde_json::from_slice(&io::read_bytes(&path)?).map_err(|e| Error::Format {
            path,
            message: e.to_string(),
        })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        io::write_bytes(
            &dir.join(MANIFEST),
            serde_json::to_string_pretty(self).expect("manifest serializes").as_bytes(),
        )
    }

    fn is_done(&self, stage: Stage, dir: &Path) -> bool {
        self.stages
            .get(&stage)
            .is_some_and(|r| r.completed && r.outputs.iter().all(|o| dir.join(o).exists()))
    }

    /// Every file recorded by any stage, plus the manifest and config copy.
    pub fn declared_files(&self) -> Vec<String> {
        let mut all: Vec<String> = self.stages.values().flat_map(|r| r.outputs.iter().cloned()).collect();
        all.push(MANIFEST.to_string());
        all.sort();
        all
    }
}

/// Metrics for one test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub index: usize,
    pub rule: ChangeRule,
    pub direction: Direction,
    pub auc: f64,
    pub dist: f64,
    pub threshold: f64,
    pub pfa: f64,
    pub pd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSummary {
    pub rule: ChangeRule,
    pub pairs: usize,
    pub auc: f64,
    pub dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub pairs: Vec<PairMetrics>,
    pub rules: Vec<RuleSummary>,
    pub mean_auc: f64,
    pub mean_dist: f64,
}

impl Report {
    pub fn from_pairs(name: &str, pairs: Vec<PairMetrics>) -> Self {
        let mut by_rule: BTreeMap<ChangeRule, Vec<&PairMetrics>> = BTreeMap::new();
        for p in &pairs {
            by_rule.entry(p.rule).or_default().push(p);
        }
        let rules = by_rule
            .into_iter()
            .map(|(rule, ps)| RuleSummary {
                rule,
                pairs: ps.len(),
                auc: ps.iter().map(|p| p.auc).sum::<f64>() / ps.len() as f64,
                dist: ps.iter().map(|p| p.dist).sum::<f64>() / ps.len() as f64,
            })
            .collect();
        let n = pairs.len().max(1) as f64;
        Self {
            name: name.to_string(),
            mean_auc: pairs.iter().map(|p| p.auc).sum::<f64>() / n,
            mean_dist: pairs.iter().map(|p| p.dist).sum::<f64>() / n,
            pairs,
            rules,
        }
    }

    pub fn rule(&self, rule: ChangeRule) -> Option<&RuleSummary> {
        self.rules.iter().find(|r| r.rule == rule)
    }

    pub fn pairs_csv(&self) -> String {
        let mut s = String::from("index,rule,direction,auc,dist,threshold,pfa,pd\n");
        for p in &self.pairs {
            s.push_str(&format!(
                "{},{},{:?},{},{},{},{},{}\n",
                p.index,
                p.rule.label(),
                p.direction,
                p.auc,
                p.dist,
                p.threshold,
                p.pfa,
                p.pd
            ));
        }
        s
    }

    /// Per-rule table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<8} {:>5} {:>8} {:>8}\n", "rule", "pairs", "auc", "dist");
        for r in &self.rules {
            s.push_str(&format!("{:<8} {:>5} {:>8.4} {:>8.4}\n", r.rule.label(), r.pairs, r.auc, r.dist));
        }
        s.push_str(&format!("{:<8} {:>5} {:>8.4} {:>8.4}\n", "all", self.pairs.len(), self.mean_auc, self.mean_dist));
        s
    }
}

/// Operators the model assumes, and the ones that produced the data.
pub fn operators(cfg: &ExperimentConfig, bands: usize) -> Result<(DegradationPair, DegradationPair)> {
    Ok((cfg.operators.build(bands)?, cfg.operators.build_actual(bands)?))
}

/// Build the dataset in memory (no files).
pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    let refs = cfg.data.load_references()?;
    let bands = refs.first().map(|r| r.bands()).ok_or_else(|| Error::Config("no references".into()))?;
    let (_, actual) = operators(cfg, bands)?;
    datagen::build_dataset(&refs, &cfg.data, &actual, &Rng::new(cfg.data.seed))
}

/// Pretrain the fusion network on no-change triplets `(Y1, H2(X1), X1)`.
pub fn pretrain_on_pairs(
    net: &mut Network,
    pairs: &[DatasetPair],
    actual: &DegradationPair,
    cfg: &crate::fusion::PretrainConfig,
) -> Result<crate::fusion::PretrainLog> {
    let y2s: Vec<_> = pairs
        .iter()
        .map(|p| apply_spectral(&actual.spectral, &p.x1))
        .collect::<Result<_>>()?;
    let samples: Vec<FusionSample> = pairs
        .iter()
        .zip(&y2s)
        .map(|(p, y2)| FusionSample { y1: &p.y1, y2, x: &p.x1 })
        .collect();
    pretrain_fusion(net, &samples, cfg)
}

fn dims(data: &Dataset) -> Result<(usize, usize, usize, usize, usize)> {
    let p = data
        .train
        .first()
        .or_else(|| data.test.first())
        .ok_or_else(|| Error::Config("empty dataset".into()))?;
    Ok((p.x1.bands(), p.y1.bands(), p.y2.bands(), p.x1.rows(), p.x1.cols()))
}

/// Untrained neural fusion network or the model-based backend.
pub fn fusion_backend(cfg: &ExperimentConfig, data: &Dataset, ops: &DegradationPair) -> Result<FusionBackend> {
    let (m, m1, m2, rows, cols) = dims(data)?;
    match &cfg.fusion {
        FusionConfig::ModelBased { tikhonov } => Ok(FusionBackend::ModelBased(ModelBasedFusion::new(
            *tikhonov,
            ops,
            rows,
            cols,
        )?)),
        FusionConfig::Neural { arch, pretrain } => {
            let spec = fusion_net(m1, m2, m, ops.spatial.factor(), arch)?;
            let params = spec.init_he(arch.leaky_slope, &mut Rng::new(pretrain.seed).fork(3));
            Ok(FusionBackend::Neural(Network::new(spec, params)?))
        }
    }
}

/// Fresh CI and discriminator networks seeded from the training seed.
pub fn init_networks(cfg: &ExperimentConfig, data: &Dataset, factor: usize) -> Result<(Network, Network)> {
    let (m, m1, m2, _, _) = dims(data)?;
    let root = Rng::new(cfg.train.seed);
    let spec = ci_net(m1, m2, m, factor, &cfg.arch)?;
    let params = spec.init_he(cfg.arch.leaky_slope, &mut root.fork(1));
    let mut c = Network::new(spec, params)?;
    c.zero_output_layer();
    let d = Network::init(discriminator(m1, &cfg.arch), &mut root.fork(2));
    Ok((c, d))
}

/// Smoothed CVA energy, binary map and threshold for one pair.
pub fn detect_pair(state: &GeneratorState, pair: &DatasetPair, cfg: &ExperimentConfig) -> Result<(EnergyMap, BinaryMap, f64)> {
    let ci = state.infer_ci(&pair.y1, &pair.y2)?;
    let e = smooth(&cva_energy(&ci), cfg.detect.smooth_radius);
    let tau = match cfg.detect.threshold.into() {
        detect::ThresholdMode::Otsu => detect::otsu_threshold(&e)?,
        detect::ThresholdMode::Fixed(t) => t,
    };
    let map = detect::threshold_map(&e, tau);
    Ok((e, map, tau))
}

/// Metrics of one pair from its energy map and detection.
pub fn score_pair(pair: &DatasetPair, e: &EnergyMap, map: &BinaryMap, tau: f64) -> Result<PairMetrics> {
    let curve = eval::roc(e, &pair.d_ref)?;
    let (mut fa, mut hit) = (0usize, 0usize);
    for i in 0..map.len() {
        if map.is_changed(i) {
            if pair.d_ref.is_changed(i) {
                hit += 1;
            } else {
                fa += 1;
            }
        }
    }
    let changed = pair.d_ref.count_changed();
    Ok(PairMetrics {
        index: pair.info.index,
        rule: pair.info.rule,
        direction: pair.info.direction,
        auc: eval::auc(&curve),
        dist: eval::dist(&curve),
        threshold: tau,
        pfa: fa as f64 / (map.len() - changed) as f64,
        pd: hit as f64 / changed as f64,
    })
}

fn rel(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned()
}

/// A run directory and its manifest.
struct Run {
    dir: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn stage<T>(&mut self, stage: Stage, f: impl FnOnce(&Path) -> Result<(T, Vec<PathBuf>)>) -> Result<T> {
        log::info!("stage {}", stage.name());
        let (value, outputs) = f(&self.dir).map_err(|e| Error::Stage {
            stage: stage.name(),
            source: Box::new(e),
        })?;
        self.manifest.stages.insert(
            stage,
            StageRecord {
                completed: true,
                outputs: outputs.iter().map(|p| rel(&self.dir, p)).collect(),
            },
        );
        self.manifest.save(&self.dir)?;
        Ok(value)
    }

    fn done(&self, stage: Stage) -> bool {
        self.manifest.is_done(stage, &self.dir)
    }
}

fn wrap<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: stage.name(),
        source: Box::new(e),
    })
}

/// Run (or resume) the whole pipeline in `cfg.eval.output_dir`.
///
/// A stage is skipped when the manifest in the run directory has the same
/// config hash, marks the stage complete and all its outputs still exist.
pub fn run_pipeline(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Report> {
    cfg.validate()?;
    let dir = cfg.eval.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let manifest = match Manifest::load(&dir) {
        Ok(m) if !opts.force && m.config_hash == cfg.hash() => m,
        _ => Manifest::new(cfg),
    };
    let mut run = Run { dir, manifest };
    let config_path = run.dir.join("config.toml");
    io::write_bytes(&config_path, cfg.to_toml().as_bytes())?;

    // gen
    let data_dir = run.dir.join("data");
    if !run.done(Stage::Gen) {
        run.stage(Stage::Gen, |_| {
            let data = generate(cfg)?;
            let mut files = datagen::write_dataset(&data_dir, &data, &cfg.data)?;
            files.push(config_path.clone());
            Ok(((), files))
        })?;
    }
    let (data, _) = wrap(Stage::Gen, datagen::read_dataset(&data_dir))?;
    let (m, ..) = wrap(Stage::Gen, dims(&data))?;
    let (nominal, actual) = wrap(Stage::Gen, operators(cfg, m))?;

    // pretrain-fusion
    let fusion = match &cfg.fusion {
        FusionConfig::ModelBased { .. } => wrap(Stage::Train, fusion_backend(cfg, &data, &nominal))?,
        FusionConfig::Neural { pretrain, .. } => {
            let path = run.dir.join("fusion.nnw");
            if run.done(Stage::PretrainFusion) {
                FusionBackend::Neural(wrap(Stage::PretrainFusion, checkpoint::load(&path))?)
            } else {
                run.stage(Stage::PretrainFusion, |dir| {
                    let FusionBackend::Neural(mut net) = fusion_backend(cfg, &data, &nominal)? else {
                        unreachable!("neural config builds a neural backend")
                    };
                    let log = pretrain_on_pairs(&mut net, &data.train, &actual, pretrain)?;
                    checkpoint::save(&path, &net)?;
                    let log_path = dir.join("fusion_pretrain.csv");
                    let mut csv = String::from("epoch,loss\n");
                    for (i, l) in log.epoch_loss.iter().enumerate() {
                        csv.push_str(&format!("{},{}\n", i + 1, l));
                    }
                    io::write_bytes(&log_path, csv.as_bytes())?;
                    Ok((FusionBackend::Neural(net), vec![path.clone(), log_path]))
                })?
            }
        }
    };

    // train
    let ci_path = run.dir.join("ci.nnw");
    let disc_path = run.dir.join("disc.nnw");
    let state = if run.done(Stage::Train) {
        GeneratorState {
            ci_net: wrap(Stage::Train, checkpoint::load(&ci_path))?,
            fusion,
            ops: nominal.clone(),
        }
    } else {
        run.stage(Stage::Train, |dir| {
            let (c, mut d) = init_networks(cfg, &data, nominal.spatial.factor())?;
            let mut state = GeneratorState {
                ci_net: c,
                fusion,
                ops: nominal.clone(),
            };
            let log_path = dir.join("train_log.csv");
            let val = Validation {
                pairs: &data.test,
                smooth_radius: cfg.detect.smooth_radius,
            };
            let mut partial = TrainLog::default();
            let result = cdgan::train(&mut state, &mut d, &data.train, Some(&val), &cfg.train, |row| {
                partial.epochs.push(row.clone());
                let _ = io::write_bytes(&log_path, partial.to_csv().as_bytes());
            });
            // Keep the last good networks on disk whether or not training finished.
            checkpoint::save(&ci_path, &state.ci_net)?;
            checkpoint::save(&disc_path, &d)?;
            let log = result?;
            io::write_bytes(&log_path, log.to_csv().as_bytes())?;
            Ok((state, vec![ci_path.clone(), disc_path.clone(), log_path]))
        })?
    };

    // detect
    let det_dir = run.dir.join("detect");
    let mut detections = Vec::new();
    if run.done(Stage::Detect) {
        for p in &data.test {
            let base = det_dir.join(format!("pair_{:04}", p.info.index));
            let e = wrap(Stage::Detect, EnergyMap::load(base.with_extension("energy.hsc")))?;
            let map = wrap(Stage::Detect, io::read_map(base.with_extension("cm")))?;
            detections.push((e, map, f64::NAN));
        }
        let taus = wrap(Stage::Detect, read_thresholds(&det_dir.join("thresholds.csv")))?;
        for (d, t) in detections.iter_mut().zip(taus) {
            d.2 = t;
        }
    } else {
        detections = run.stage(Stage::Detect, |_| {
            let mut files = Vec::new();
            let mut out = Vec::new();
            let mut taus = String::from("index,threshold\n");
            for p in &data.test {
                let (e, map, tau) = detect_pair(&state, p, cfg)?;
                let base = det_dir.join(format!("pair_{:04}", p.info.index));
                let (ep, mp) = (base.with_extension("energy.hsc"), base.with_extension("cm"));
                e.save(&ep)?;
                io::write_map(&mp, &map)?;
                files.extend([ep, mp]);
                taus.push_str(&format!("{},{:e}\n", p.info.index, tau));
                out.push((e, map, tau));
            }
            let tp = det_dir.join("thresholds.csv");
            io::write_bytes(&tp, taus.as_bytes())?;
            files.push(tp);
            Ok((out, files))
        })?;
    }

    // eval
    let eval_dir = run.dir.join("eval");
    let report = run.stage(Stage::Eval, |dir| {
        let mut files = Vec::new();
        let mut metrics = Vec::new();
        for (p, (e, map, tau)) in data.test.iter().zip(&detections) {
            let curve = eval::roc(e, &p.d_ref)?;
            let rp = eval_dir.join(format!("pair_{:04}_roc.csv", p.info.index));
            eval::write_roc_csv(&rp, &curve)?;
            files.push(rp);
            metrics.push(score_pair(p, e, map, *tau)?);
        }
        let report = Report::from_pairs(&cfg.name, metrics);
        let mp = dir.join("metrics.csv");
        io::write_bytes(&mp, report.pairs_csv().as_bytes())?;
        let tp = dir.join("report.txt");
        io::write_bytes(&tp, report.table().as_bytes())?;
        files.extend([mp, tp]);
        Ok((report, files))
    })?;
    run.manifest.report = Some(report.clone());
    run.manifest.save(&run.dir)?;
    Ok(report)
}

fn read_thresholds(path: &Path) -> Result<Vec<f64>> {
    let text = String::from_utf8(io::read_bytes(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    message: format!("bad threshold line {l:?}"),
                })
        })
        .collect()
}

/// Human-readable stage plan for `--dry-run`.
pub fn describe_plan(cfg: &ExperimentConfig) -> String {
    let mut s = format!(
        "experiment {} (config {})\noutput: {}\npairs: {} ({} test)\n",
        cfg.name,
        &cfg.hash()[..12],
        cfg.eval.output_dir.display(),
        cfg.data.total_pairs(),
        cfg.data.test_pairs
    );
    for (i, st) in plan(cfg).iter().enumerate() {
        s.push_str(&format!("{}. {}\n", i + 1, st.name()));
    }
    if let Some(a) = &cfg.ablation {
        s.push_str(&format!("ablation over beta: {:?}\n", a.betas));
    }
    s
}

/// One pipeline run per β in the ablation grid, each in
/// `<output_dir>/beta_<β>`.
pub fn run_ablation(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Vec<(f64, Report)>> {
    let betas = cfg
        .ablation
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [ablation] block".into()))?
        .betas
        .clone();
    let mut out = Vec::new();
    for beta in betas {
        let mut c = cfg.clone();
        c.train.beta = beta;
        c.ablation = None;
        c.eval.output_dir = cfg.eval.output_dir.join(format!("beta_{beta:e}"));
        out.push((beta, run_pipeline(&c, opts)?));
    }
    let path = cfg.eval.output_dir.join("ablation.csv");
    io::write_bytes(&path, ablation_csv(&out).as_bytes())?;
    Ok(out)
}

/// Rows per (rule, metric), one column per β.
pub fn ablation_csv(results: &[(f64, Report)]) -> String {
    let mut s = String::from("rule,metric");
    for (b, _) in results {
        s.push_str(&format!(",beta={b:e}"));
    }
    s.push('\n');
    let mut rules: Vec<ChangeRule> = results.iter().flat_map(|(_, r)| r.rules.iter().map(|x| x.rule)).collect();
    rules.sort();
    rules.dedup();
    for rule in rules {
        for metric in ["auc", "dist"] {
            s.push_str(&format!("{},{}", rule.label(), metric));
            for (_, r) in results {
                let v = r.rule(rule).map(|x| if metric == "auc" { x.auc } else { x.dist });
                s.push_str(&format!(",{}", v.map(|v| v.to_string()).unwrap_or_default()));
            }
            s.push('\n');
        }
    }
    s
}
