use afl_core::loss::{evaluate, AblationFlags, AlphaMode, LossKind, LossSpec};
use afl_core::params::gamma_adaptive;
use afl_lab::dataset::{make_dataset, DatasetSpec, Mix};
use afl_lab::error::{LabError, Result};
use afl_lab::harness::{self, ExperimentConfig};
use afl_lab::trainer::{self, TrainConfig};
use afl_lab::{eval, volio};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "afl", version, about = "Adaptive focal loss experiments on synthetic 3D phantoms")]
struct Cli {
    /// Seed overriding the one from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlphaModeArg {
    ClassWeighted,
    Uniform,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom dataset.
    Gen {
        #[arg(long, default_value_t = 60)]
        n: usize,
        /// Extent as nz,ny,nx.
        #[arg(long, default_value = "32,32,32")]
        dims: String,
        /// Nine bin weights, volume-major (large/medium/small x good/medium/poor).
        #[arg(long)]
        mix: Option<String>,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Print the adaptive parameters of a mask.
    Params { mask: PathBuf },
    /// Evaluate one loss on a prediction/mask pair.
    Loss {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Enabled adaptive terms, e.g. `a,gv,gm` or `none`.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long, allow_hyphen_values = true)]
        gamma_offset: Option<f64>,
        #[arg(long, value_enum)]
        alpha_mode: Option<AlphaModeArg>,
        /// Write d(loss)/d(pred) as an image volume.
        #[arg(long)]
        grad_out: Option<PathBuf>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score saved predictions against masks.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        mask_dir: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Run the six-row ablation grid.
    Ablate,
    /// Run one arm per loss kind.
    Compare,
    /// Per-bin DSC of two arms.
    Bins {
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        candidate: Option<String>,
    },
    /// Regenerate every report from completed runs.
    Report,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| LabError::Config("--out is required".into()))
}

/// `%.12g`-style formatting.
fn sig12(x: f64) -> String {
    let rounded: f64 = format!("{x:.11e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

fn parse_dims(s: &str) -> Result<[usize; 3]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| LabError::Config(format!("dims `{s}`: {e}")))?;
    v.try_into().map_err(|_| LabError::Config(format!("dims `{s}` needs three values")))
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn experiment_for_reports(cli: &Cli, root: &Path) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => ExperimentConfig::load(p),
        None => harness::load_experiment(root),
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Gen { n, dims, mix, noise_sigma } => {
            let mut spec = DatasetSpec { n: *n, dims: parse_dims(dims)?, ..DatasetSpec::default() };
            if let Some(m) = mix {
                spec.mix = Mix::parse(m)?;
            }
            if let Some(s) = noise_sigma {
                spec.noise_sigma = *s;
            }
            let m = make_dataset(require_out(cli)?, &spec, cli.seed.unwrap_or(0))?;
            log::info!("wrote {} samples", m.samples.len());
        }
        Cmd::Params { mask } => {
            let p = gamma_adaptive(&volio::read_mask(mask)?)?;
            println!(
                "{} {} {} {} {} {}",
                p.counts.p_fg,
                p.counts.p_bg,
                sig12(p.alpha_va),
                sig12(p.gamma_va),
                sig12(p.gamma_msa),
                sig12(p.gamma_adaptive)
            );
        }
        Cmd::Loss { kind, pred, mask, ablation, gamma_offset, alpha_mode, grad_out } => {
            let mut spec: LossSpec = match &cli.config {
                Some(p) => read_json(p)?,
                None => LossSpec::default(),
            };
            spec.kind = kind.parse::<LossKind>().map_err(|e| LabError::Config(e.to_string()))?;
            if let Some(a) = ablation {
                spec.ablation = a.parse::<AblationFlags>().map_err(|e| LabError::Config(e.to_string()))?;
            }
            if let Some(g) = gamma_offset {
                spec.gamma_offset = *g;
            }
            if let Some(m) = alpha_mode {
                spec.alpha_mode = match m {
                    AlphaModeArg::ClassWeighted => AlphaMode::ClassWeighted,
                    AlphaModeArg::Uniform => AlphaMode::Uniform,
                };
            }
            spec.validate().map_err(|e| LabError::Config(e.to_string()))?;
            let pred = volio::read_image(pred)?;
            let mask = volio::read_mask(mask)?;
            let value = evaluate(&pred, &mask, &spec, None)?;
            if !value.value.is_finite() {
                return Err(LabError::Numerical("loss is not finite".into()));
            }
            println!("{}", value.value);
            if let Some(path) = grad_out {
                volio::write_image(&value.grad, path)?;
            }
        }
        Cmd::Train { data } => {
            let mut cfg: TrainConfig = match &cli.config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let outcome = trainer::train(data, &cfg, require_out(cli)?)?;
            if let Some(last) = outcome.history.last() {
                println!("final val dsc {:.4} iou {:.4}", last.val_dsc, last.val_iou);
            }
        }
        Cmd::Eval { pred_dir, mask_dir, threshold } => {
            let rows = eval::with_mean(eval::eval_dirs(pred_dir, mask_dir, *threshold)?);
            match &cli.out {
                Some(path) => trainer::write_csv(path, &rows)?,
                None => {
                    let mut w = csv::Writer::from_writer(std::io::stdout());
                    for r in &rows {
                        w.serialize(r).map_err(|e| LabError::Data(e.to_string()))?;
                    }
                    w.flush().map_err(|e| LabError::io("<stdout>", e))?;
                }
            }
        }
        Cmd::Ablate => {
            let root = require_out(cli)?;
            let cfg = experiment(cli)?;
            harness::ablate(root, &cfg)?;
            print_report(&root.join(&cfg.outputs.ablation).with_extension("md"));
        }
        Cmd::Compare => {
            let root = require_out(cli)?;
            let cfg = experiment(cli)?;
            harness::compare(root, &cfg)?;
            print_report(&root.join(&cfg.outputs.comparison).with_extension("md"));
        }
        Cmd::Bins { baseline, candidate } => {
            let root = require_out(cli)?;
            let cfg = experiment_for_reports(cli, root)?;
            let (b, c) = match (baseline, candidate) {
                (Some(b), Some(c)) => (b.clone(), c.clone()),
                _ => {
                    let (db, dc) = harness::default_bin_arms(root, &cfg)
                        .ok_or_else(|| LabError::Data("no completed baseline/candidate arms".into()))?;
                    (baseline.clone().unwrap_or(db), candidate.clone().unwrap_or(dc))
                }
            };
            harness::bin_report(root, &cfg, &b, &c)?;
            print_report(&root.join(&cfg.outputs.bins).with_extension("md"));
        }
        Cmd::Report => {
            let root = require_out(cli)?;
            let cfg = experiment_for_reports(cli, root)?;
            let done = harness::report(root, &cfg)?;
            log::info!("regenerated: ablation {} comparison {} bins {}", done.ablation, done.comparison, done.bins);
        }
    }
    Ok(())
}

fn print_report(path: &Path) {
    if let Ok(text) = fs::read_to_string(path) {
        print!("{text}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { log::LevelFilter::Error } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
