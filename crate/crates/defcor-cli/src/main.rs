//! `defcor`: synthesize datasets, train the corrector, correct single
//! frames, evaluate runs, visualize flows and fit palpation traces.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use defcor::calib::{fit_global_stiffness, read_trace_csv};
use defcor::checkpoint::load_checkpoint;
use defcor::config::RunConfig;
use defcor::dataset::{generate_dataset, DatasetManifest, Split};
use defcor::eval::{evaluate_run, EvalModel};
use defcor::flow::{flow_to_color, FlowField};
use defcor::image::Image;
use defcor::net::correct;
use defcor::train::train_loop;

#[derive(Parser)]
#[command(
    name = "defcor",
    about = "Force-aware correction of pressure-induced ultrasound deformation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; omit to use built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed (env fallback: DEFCOR_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

impl ConfigArg {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let env_seed = std::env::var("DEFCOR_SEED")
            .ok()
            .and_then(|s| s.parse::<u64>().ok());
        if let Some(seed) = self.seed.or(env_seed) {
            cfg.synth.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(jobs) = self.jobs {
            cfg.io.jobs = jobs;
            cfg.train.jobs = jobs;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images, flows, masks, interfaces,
    /// palpation traces, manifest).
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the corrector on a generated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints and metrics.csv.
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/model_latest.ckpt`.
        #[arg(long)]
        resume: bool,
        /// Overrides the configured number of optimizer steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Correct one deformed frame given the contact force and a palpation
    /// trace for the subject.
    Correct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_name = "NEWTONS")]
        force_n: f64,
        /// Palpation trace CSV (t_s,lambda_z_mm,force_n) to fit K_g from.
        #[arg(long, conflicts_with = "k_g")]
        palpation: Option<PathBuf>,
        /// Directly supplied global stiffness, N/mm.
        #[arg(long)]
        k_g: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the predicted field.
        #[arg(long)]
        flow_out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or baseline on one dataset split.
    Eval {
        #[arg(long, conflicts_with = "baseline")]
        ckpt: Option<PathBuf>,
        /// One of: linear, identity, oracle.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Render a flow file as a color image (hue = direction, saturation =
    /// magnitude, white = no motion).
    Flowviz {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Normalize by this magnitude instead of the field's own maximum.
        #[arg(long)]
        max_magnitude: Option<f64>,
    },
    /// Fit the global stiffness line to a palpation trace.
    Calib {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Synth { config, out, force } => cmd_synth(&config, &out, force),
        Command::Train {
            config,
            data,
            out,
            resume,
            steps,
        } => cmd_train(&config, &data, &out, resume, steps),
        Command::Correct {
            ckpt,
            image,
            force_n,
            palpation,
            k_g,
            out,
            flow_out,
        } => cmd_correct(&ckpt, &image, force_n, palpation, k_g, &out, flow_out),
        Command::Eval {
            ckpt,
            baseline,
            data,
            split,
            out,
            config,
        } => cmd_eval(ckpt, baseline, &data, &split, &out, &config),
        Command::Flowviz {
            flow,
            out,
            max_magnitude,
        } => {
            let field = FlowField::read_dff(&flow)?;
            flow_to_color(&field, max_magnitude).write_ppm(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Calib { trace } => {
            let fit = fit_global_stiffness(&read_trace_csv(&trace)?)?;
            println!(
                "K_g (c2 slope) = {:.6} N/mm\nc1 intercept   = {:.6} N\nR^2            = {:.6}",
                fit.c2_slope, fit.c1_intercept, fit.r_squared
            );
            Ok(())
        }
    }
}

fn cmd_synth(config: &ConfigArg, out: &Path, force: bool) -> anyhow::Result<()> {
    let cfg = config.load()?;
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            bail!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            );
        }
        std::fs::remove_dir_all(out).with_context(|| format!("clearing {}", out.display()))?;
    }
    std::fs::create_dir_all(out)?;
    let manifest = with_pool(cfg.io.jobs, || generate_dataset(&cfg.synth, out))?;
    let count = |s: Split| manifest.split(s).count();
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        manifest.records.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
    );
    Ok(())
}

fn cmd_train(
    config: &ConfigArg,
    data: &Path,
    out: &Path,
    resume: bool,
    steps: Option<u64>,
) -> anyhow::Result<()> {
    let mut cfg = config.load()?;
    if let Some(steps) = steps {
        cfg.train.steps = steps;
    }
    let manifest = DatasetManifest::read(data)?;
    let resume_state = if resume {
        let path = out.join("model_latest.ckpt");
        let (params, training) = load_checkpoint(&path)
            .with_context(|| format!("resuming from {}", path.display()))?;
        let training =
            training.with_context(|| format!("{} has no optimizer state", path.display()))?;
        Some((params, training))
    } else {
        None
    };
    let start = Instant::now();
    let report = train_loop(
        data,
        &manifest,
        cfg.net.clone(),
        &cfg.train,
        &cfg.loss,
        out,
        resume_state,
    )?;
    println!(
        "trained {} steps in {:.1} s: final loss {:.4}, val EPE best {:.3} px / final {:.3} px",
        report.steps_run,
        start.elapsed().as_secs_f64(),
        report.final_train_loss,
        report.best_val_epe,
        report.final_val_epe,
    );
    println!("best checkpoint: {}", report.best_checkpoint.display());
    Ok(())
}

fn cmd_correct(
    ckpt: &Path,
    image_path: &Path,
    force_n: f64,
    palpation: Option<PathBuf>,
    k_g: Option<f64>,
    out: &Path,
    flow_out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let (params, _) = load_checkpoint(ckpt)?;
    let image = Image::read_pgm(image_path)?;
    let k_g = match (palpation, k_g) {
        (Some(trace), None) => fit_global_stiffness(&read_trace_csv(&trace)?)?.c2_slope,
        (None, Some(k)) => k,
        _ => bail!("provide exactly one of --palpation or --k-g"),
    };
    let start = Instant::now();
    let (corrected, flow) = correct(&image, force_n, k_g, &params)?;
    let elapsed = start.elapsed();
    corrected.quantize().write_pgm(out)?;
    if let Some(flow_path) = flow_out {
        flow.write_dff(&flow_path)?;
    }
    println!(
        "corrected {}x{} frame in {:.1} ms (K_g {:.3} N/mm, force {:.2} N)",
        image.width(),
        image.height(),
        elapsed.as_secs_f64() * 1e3,
        k_g,
        force_n
    );
    Ok(())
}

fn cmd_eval(
    ckpt: Option<PathBuf>,
    baseline: Option<String>,
    data: &Path,
    split: &str,
    out: &Path,
    config: &ConfigArg,
) -> anyhow::Result<()> {
    let cfg = config.load()?;
    let manifest = DatasetManifest::read(data)?;
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split {other:?} (train|val|test)"),
    };
    let loaded_params;
    let model = match (&ckpt, baseline.as_deref()) {
        (Some(path), None) => {
            loaded_params = load_checkpoint(path)?.0;
            EvalModel::Trained(&loaded_params)
        }
        (None, Some("linear")) => EvalModel::LinearScaling,
        (None, Some("identity")) => EvalModel::Identity,
        (None, Some("oracle")) => EvalModel::Oracle,
        (None, Some(other)) => bail!("unknown baseline {other:?} (linear|identity|oracle)"),
        _ => bail!("provide exactly one of --ckpt or --baseline"),
    };
    let maps_dir = cfg.eval.write_error_maps.then_some(out);
    let report = with_pool(cfg.io.jobs, || {
        evaluate_run(data, &manifest, split, &model, maps_dir)
    })?;
    std::fs::create_dir_all(out)?;
    report.write_csv(&out.join("report.csv"))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("model: {}", report.model);
    for row in &report.rows {
        if row.force_bin == "all" {
            println!("{:>16}: {:.4} +/- {:.4} (n={})", row.metric, row.mean, row.sd, row.n);
        }
    }
    println!("report: {}", out.join("report.csv").display());
    Ok(())
}

fn with_pool<T>(
    jobs: usize,
    f: impl FnOnce() -> defcor::Result<T> + Send,
) -> anyhow::Result<T>
where
    T: Send,
{
    if jobs == 0 {
        return Ok(f()?);
    }
    let pool = rayon_pool(jobs)?;
    Ok(pool.install(f)?)
}

fn rayon_pool(jobs: usize) -> anyhow::Result<defcor::rayon::ThreadPool> {
    Ok(defcor::rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()?)
}
