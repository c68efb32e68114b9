use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use cdgan_core::cdgan::{self, GeneratorState, Validation};
use cdgan_core::config::{ExperimentConfig, ThresholdSetting};
use cdgan_core::datagen::{self, Dataset};
use cdgan_core::detect::{self, cva_energy, smooth, EnergyMap, ThresholdMode};
use cdgan_core::eval;
use cdgan_core::fusion::{FusionBackend, FusionConfig, ModelBasedFusion, TikhonovConfig};
use cdgan_core::nn::checkpoint;
use cdgan_core::pipeline::{self, Manifest, RunOptions};
use cdgan_core::{io, Error};

#[derive(Parser)]
#[command(name = "cdgan", version, about = "Fusion-based adversarial change detection")]
struct Cli {
    /// Worker threads (1 = bit-reproducible reference mode). Defaults to
    /// $CDGAN_THREADS, then to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: <output_dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the neural fusion network on no-change triplets.
    PretrainFusion {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory written by `gen` (generated in memory otherwise).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the CI network and discriminator.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Fusion checkpoint, or `model_based`.
        #[arg(long)]
        fusion: String,
        /// CI network checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Discriminator checkpoint to write.
        #[arg(long)]
        disc_out: Option<PathBuf>,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fuse an LRHS and an HRLS cube.
    Fuse {
        #[arg(long)]
        config: PathBuf,
        /// Fusion checkpoint, or `model_based`.
        #[arg(long)]
        fusion: String,
        #[arg(long)]
        y1: PathBuf,
        #[arg(long)]
        y2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Threshold the energy of a change image into a binary change map.
    Detect {
        /// Change image cube.
        #[arg(long, conflicts_with = "model")]
        ci: Option<PathBuf>,
        /// CI network checkpoint (with --y1 and --y2).
        #[arg(long, requires_all = ["y1", "y2"])]
        model: Option<PathBuf>,
        #[arg(long)]
        y1: Option<PathBuf>,
        #[arg(long)]
        y2: Option<PathBuf>,
        /// `otsu` or a fixed threshold.
        #[arg(long, default_value = "otsu")]
        threshold: String,
        /// Median filter radius on the energy map.
        #[arg(long, default_value_t = 1)]
        radius: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the (smoothed) energy map.
        #[arg(long)]
        energy_out: Option<PathBuf>,
    },
    /// ROC, AUC and dist of an energy map against a reference change map.
    Eval {
        #[arg(long)]
        energy: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// ROC curve CSV.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Print the per-rule table of a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run the whole pipeline (or the ablation grid).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Re-run stages already marked complete.
        #[arg(long)]
        force: bool,
        /// Validate the config and print the stage plan only.
        #[arg(long)]
        dry_run: bool,
        /// Run the config's [ablation] beta grid.
        #[arg(long)]
        ablation: bool,
    },
    /// Finite-difference gradient checks on toy-sized networks.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::exit_code).unwrap_or(3);
            ExitCode::from(code as u8)
        }
    }
}

fn threads(flag: Option<usize>) -> anyhow::Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("CDGAN_THREADS") {
        Ok(v) => Ok(Some(v.parse().map_err(|_| Error::Config(format!("CDGAN_THREADS={v:?} is not a count")))?)),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = threads(cli.threads)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.eval.output_dir.join("data"));
            let data = pipeline::generate(&cfg)?;
            let files = datagen::write_dataset(&out, &data, &cfg.data)?;
            println!(
                "wrote {} train / {} test pairs ({} files) to {}",
                data.train.len(),
                data.test.len(),
                files.len(),
                out.display()
            );
        }
        Command::PretrainFusion { config, out, data } => {
            let cfg = ExperimentConfig::load(&config)?;
            let FusionConfig::Neural { pretrain, .. } = &cfg.fusion else {
                bail!(Error::Config("pretrain-fusion needs a neural fusion backend in the config".into()));
            };
            let data = load_data(&cfg, data.as_deref())?;
            let (nominal, actual) = pipeline::operators(&cfg, data.train[0].x1.bands())?;
            let FusionBackend::Neural(mut net) = pipeline::fusion_backend(&cfg, &data, &nominal)? else {
                unreachable!("neural config builds a neural backend")
            };
            let log = pipeline::pretrain_on_pairs(&mut net, &data.train, &actual, pretrain)?;
            checkpoint::save(&out, &net)?;
            for (i, l) in log.epoch_loss.iter().enumerate() {
                println!("epoch {} loss {l:.6e}", i + 1);
            }
        }
        Command::Train {
            config,
            fusion,
            out,
            data,
            disc_out,
            log,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = load_data(&cfg, data.as_deref())?;
            let (nominal, _) = pipeline::operators(&cfg, data.train[0].x1.bands())?;
            let p = &data.train[0];
            let fusion = load_fusion(&cfg, &fusion, &nominal, p.x1.rows(), p.x1.cols())?;
            let (c, mut d) = pipeline::init_networks(&cfg, &data, nominal.spatial.factor())?;
            let mut state = GeneratorState {
                ci_net: c,
                fusion,
                ops: nominal,
            };
            let val = Validation {
                pairs: &data.test,
                smooth_radius: cfg.detect.smooth_radius,
            };
            let result = cdgan::train(&mut state, &mut d, &data.train, Some(&val), &cfg.train, |e| {
                println!(
                    "epoch {:>3}  L_adv {:.4}  L_pre {:.4e}  L_spa {:.4e}  val_AUC {}",
                    e.epoch,
                    e.l_adv,
                    e.l_pre,
                    e.l_spa,
                    e.val_auc.map(|a| format!("{a:.4}")).unwrap_or_default()
                )
            });
            checkpoint::save(&out, &state.ci_net)?;
            if let Some(p) = &disc_out {
                checkpoint::save(p, &d)?;
            }
            let train_log = result.with_context(|| format!("last good networks saved to {}", out.display()))?;
            if let Some(p) = &log {
                io::write_bytes(p, train_log.to_csv().as_bytes())?;
            }
        }
        Command::Fuse {
            config,
            fusion,
            y1,
            y2,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (y1, y2) = (io::read_cube(&y1)?, io::read_cube(&y2)?);
            let (nominal, _) = pipeline::operators(&cfg, y1.bands())?;
            let backend = load_fusion(&cfg, &fusion, &nominal, y2.rows(), y2.cols())?;
            let fused = backend.fuse(&y1, &y2)?;
            io::write_cube(&out, &fused.x)?;
            if let Some(cg) = fused.cg {
                println!(
                    "cg iterations {} relative residual {:.3e}{}",
                    cg.iterations,
                    cg.rel_residual,
                    if cg.converged { "" } else { " (not converged)" }
                );
            }
        }
        Command::Detect {
            ci,
            model,
            y1,
            y2,
            threshold,
            radius,
            out,
            energy_out,
        } => {
            let ci = match (ci, model) {
                (Some(path), None) => io::read_cube(&path)?,
                (None, Some(model)) => {
                    let net = checkpoint::load(&model)?;
                    let (y1, y2) = (io::read_cube(y1.unwrap())?, io::read_cube(y2.unwrap())?);
                    net.predict(&[&y1, &y2])?
                }
                _ => bail!(Error::Config("give either --ci or --model with --y1/--y2".into())),
            };
            let mode = parse_threshold(&threshold)?;
            let e = smooth(&cva_energy(&ci), radius);
            let tau = match mode {
                ThresholdMode::Otsu => detect::otsu_threshold(&e)?,
                ThresholdMode::Fixed(t) => t,
            };
            let map = detect::threshold_map(&e, tau);
            io::write_map(&out, &map)?;
            if let Some(p) = energy_out {
                e.save(p)?;
            }
            println!("threshold {tau:.6e}  changed {} of {}", map.count_changed(), map.len());
        }
        Command::Eval { energy, reference, roc } => {
            let e = EnergyMap::load(&energy)?;
            let d_ref = io::read_map(&reference)?;
            let curve = eval::roc(&e, &d_ref)?;
            if let Some(p) = roc {
                eval::write_roc_csv(p, &curve)?;
            }
            println!("auc={:.6} dist={:.6}", eval::auc(&curve), eval::dist(&curve));
        }
        Command::Report { run } => {
            let m = Manifest::load(&run)?;
            let report = m
                .report
                .ok_or_else(|| Error::Invalid(format!("run in {} has not finished its eval stage", run.display())))?;
            println!("{} (config {})", m.name, &m.config_hash[..12]);
            print!("{}", report.table());
        }
        Command::Run {
            config,
            force,
            dry_run,
            ablation,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            if dry_run {
                print!("{}", pipeline::describe_plan(&cfg));
                return Ok(());
            }
            let opts = RunOptions { force };
            if ablation {
                let results = pipeline::run_ablation(&cfg, opts)?;
                print!("{}", pipeline::ablation_csv(&results));
            } else {
                let report = pipeline::run_pipeline(&cfg, opts)?;
                print!("{}", report.table());
            }
        }
        Command::Gradcheck { seed } => {
            let mut ok = true;
            for (name, r) in cdgan::toy::gradcheck_suite(seed)? {
                let tol = if name == "total_c" { 1e-3 } else { 1e-4 };
                let pass = r.passes(tol);
                ok &= pass;
                println!(
                    "{name:<14} checked {:>4}  max rel error {:.3e}  {}",
                    r.checked,
                    r.max_rel_error,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if !ok {
                bail!(Error::Numeric("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn load_data(cfg: &ExperimentConfig, dir: Option<&Path>) -> anyhow::Result<Dataset> {
    let data = match dir {
        Some(d) => datagen::read_dataset(d)?.0,
        None => pipeline::generate(cfg)?,
    };
    if data.train.is_empty() {
        bail!(Error::Config("dataset has no training pairs".into()));
    }
    Ok(data)
}

fn load_fusion(
    cfg: &ExperimentConfig,
    spec: &str,
    ops: &cdgan_core::DegradationPair,
    rows: usize,
    cols: usize,
) -> anyhow::Result<FusionBackend> {
    if spec == "model_based" {
        let tikhonov = match &cfg.fusion {
            FusionConfig::ModelBased { tikhonov } => *tikhonov,
            FusionConfig::Neural { .. } => TikhonovConfig::default(),
        };
        Ok(FusionBackend::ModelBased(ModelBasedFusion::new(tikhonov, ops, rows, cols)?))
    } else {
        Ok(FusionBackend::Neural(checkpoint::load(spec)?))
    }
}

fn parse_threshold(s: &str) -> anyhow::Result<ThresholdMode> {
    if s == "otsu" {
        return Ok(ThresholdSetting::Otsu.into());
    }
    let t: f64 = s
        .parse()
        .map_err(|_| Error::Config(format!("threshold must be `otsu` or a number, got {s:?}")))?;
    Ok(ThresholdMode::Fixed(t))
}
