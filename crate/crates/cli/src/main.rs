//! Command-line front end: data generation, training, evaluation and
//! single-image generation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lira::attr_eval::{build_probes, load_probes, save_probes};
use lira::conformance::{check_streams, scripted_streams};
use lira::gradcheck::GradCheckOptions;
use lira::synth::{make_split, Split, SplitOptions};
use lira::training::{evaluate_attr, evaluate_refseg, grad_check_suite, run_training};
use lira::{generate, GenerateOptions, ImageBuffer, Lira, ParamStore, RunConfig, Task, Vocab};

#[derive(Parser)]
#[command(name = "lira", version, about = "Toy referring segmentation with region-level description")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/eval split.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 512)]
        train: usize,
        #[arg(long, default_value_t = 64)]
        eval: usize,
        #[arg(long, default_value_t = 1)]
        min_objects: usize,
        #[arg(long, default_value_t = 3)]
        max_objects: usize,
        #[arg(long, default_value_t = 0.1)]
        no_ilvc_fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        gcg_fraction: f64,
    },
    /// Run one training stage.
    Train(RunArgs),
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        task: EvalTask,
        #[arg(long)]
        out: PathBuf,
        /// Per-sample IoU CSV (refseg only).
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Probe file for `attr`; built from the eval split when absent.
        #[arg(long)]
        probes: Option<PathBuf>,
    },
    /// Generate for one image, writing the trace and masks.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "refseg")]
        task: Task,
        #[arg(long, default_value = "")]
        query: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference check of full-loss gradients on toy configs.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates checked per parameter tensor (all when absent).
        #[arg(long)]
        max_coords: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build attribute probes from a split's object records.
    AttrBuild {
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score attribute probes with a checkpoint.
    AttrScore {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        probes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EvalTask {
    Refseg,
    Attr,
    Gradcheck,
    Conformance,
}

/// Run configuration: a JSON file, then flag overrides.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stage: Option<u8>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    no_ilvc: bool,
    #[arg(long)]
    max_generation_steps: Option<usize>,
    #[arg(long)]
    parallel_eval: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = self.stage {
            cfg.stage = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = v.clone();
        }
        if self.steps.is_some() {
            cfg.steps = self.steps;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = &self.checkpoint {
            cfg.checkpoint = v.clone();
        }
        if let Some(v) = &self.init_checkpoint {
            cfg.init_checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.log {
            cfg.log = Some(v.clone());
        }
        if let Some(v) = self.max_generation_steps {
            cfg.max_generation_steps = v;
        }
        cfg.ilvc_enabled &= !self.no_ilvc;
        cfg.parallel_eval |= self.parallel_eval;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_checkpoint(cfg: &RunConfig) -> Result<ParamStore> {
    let store = ParamStore::load(&cfg.checkpoint).with_context(|| format!("loading {}", cfg.checkpoint.display()))?;
    let mut shape_check = lira::training::init_model(&cfg.model, 0);
    shape_check
        .load_values_from(&store)
        .context("checkpoint does not match the model configuration")?;
    Ok(store)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Returns whether the run ended without a protocol error.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            train,
            eval,
            min_objects,
            max_objects,
            no_ilvc_fraction,
            gcg_fraction,
        } => {
            let opts = SplitOptions {
                min_objects,
                max_objects,
                no_ilvc_fraction,
                gcg_fraction,
                ..SplitOptions::default()
            };
            make_split(&out, seed, train, eval, &opts)?;
            log::info!("wrote {train} train and {eval} eval scenes to {}", out.display());
            Ok(true)
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = run_training(&cfg)?;
            if let Some(last) = out.log.last() {
                log::info!("final loss {:.4}", last.loss.total);
            }
            Ok(true)
        }
        Command::Eval {
            run,
            task,
            out,
            csv,
            probes,
        } => {
            let cfg = run.resolve()?;
            match task {
                EvalTask::Refseg => {
                    let store = load_checkpoint(&cfg)?;
                    let vocab = Vocab::load(&cfg.data_dir.join("vocab.txt"))?;
                    let split = Split::load(&cfg.data_dir.join("eval"))?;
                    let report = evaluate_refseg(&store, &cfg, &vocab, &split)?;
                    write_json(&out, &report)?;
                    if let Some(p) = csv {
                        report.metrics.save_csv(&p)?;
                    }
                    Ok(report.protocol_errors == 0)
                }
                EvalTask::Attr => {
                    let store = load_checkpoint(&cfg)?;
                    let vocab = Vocab::load(&cfg.data_dir.join("vocab.txt"))?;
                    let split_dir = cfg.data_dir.join("eval");
                    let probes = match probes {
                        Some(p) => load_probes(&p)?,
                        None => build_probes(&Split::load(&split_dir)?.records, cfg.seed)?,
                    };
                    write_json(&out, &evaluate_attr(&store, &cfg, &vocab, &probes, &split_dir)?)?;
                    Ok(true)
                }
                EvalTask::Gradcheck => {
                    let opts = GradCheckOptions {
                        max_coords: Some(32),
                        ..Default::default()
                    };
                    let report = grad_check_suite(20, cfg.seed, &opts)?;
                    write_json(&out, &report)?;
                    Ok(report.passed)
                }
                EvalTask::Conformance => {
                    let report = check_streams(&scripted_streams(64, cfg.seed))?;
                    write_json(&out, &report)?;
                    Ok(report.passed)
                }
            }
        }
        Command::Generate {
            run,
            image,
            task,
            query,
            out_dir,
        } => {
            let cfg = run.resolve()?;
            let store = load_checkpoint(&cfg)?;
            let vocab = Vocab::load(&cfg.data_dir.join("vocab.txt"))?;
            let img = ImageBuffer::load_ppm(&image)?;
            let instr = lira::generation::instruction(&vocab, task, cfg.ilvc_enabled, &query)?;
            let opts = GenerateOptions {
                ilvc_enabled: cfg.ilvc_enabled,
                max_steps: cfg.max_generation_steps,
                ..Default::default()
            };
            let res = generate(&Lira::new(&store, &cfg.model), &img, &instr, &opts)?;
            std::fs::create_dir_all(&out_dir)?;
            for (i, m) in res.binary_masks.iter().enumerate() {
                m.save_pgm(&out_dir.join(format!("mask_{}.pgm", i + 1)))?;
            }
            res.save_trace(&out_dir.join("trace.jsonl"), "mask_")?;
            println!("{}", vocab.decode(&res.tokens));
            if let Some(e) = &res.protocol_error {
                log::error!("protocol error: {e}");
            }
            Ok(res.protocol_error.is_none())
        }
        Command::GradCheck {
            configs,
            seed,
            max_coords,
            out,
        } => {
            let opts = GradCheckOptions {
                max_coords,
                ..Default::default()
            };
            let report = grad_check_suite(configs, seed, &opts)?;
            log::info!("max relative error {:.3e} over {} coordinates", report.max_rel_err, report.checked);
            write_json(&out, &report)?;
            Ok(report.passed)
        }
        Command::AttrBuild { split, seed, out } => {
            let probes = build_probes(&Split::load(&split)?.records, seed)?;
            save_probes(&probes, &out)?;
            log::info!("{} probes", probes.len());
            Ok(true)
        }
        Command::AttrScore { run, probes, out } => {
            let cfg = run.resolve()?;
            let store = load_checkpoint(&cfg)?;
            let vocab = Vocab::load(&cfg.data_dir.join("vocab.txt"))?;
            let probes = load_probes(&probes)?;
            if probes.is_empty() {
                bail!("probe file is empty");
            }
            write_json(&out, &evaluate_attr(&store, &cfg, &vocab, &probes, &cfg.data_dir.join("eval"))?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
