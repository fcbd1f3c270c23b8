//! Command-line front end. `run` returns the process exit code: 0 on success,
//! 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::denoiser::{ArchitectureConfig, DenoiserParams, TrainStrategy};
use crate::diffusion::{self, DatasetKind, OptimizerKind};
use crate::error::{Error, Result};
use crate::flops::{self, Scale};
use crate::frechet;
use crate::rng::{self, Stream};
use crate::schedule::{NoiseSchedule, ScheduleKind, VarianceMode};
use crate::proxy::{ProposalBackend, SearchMemory};
use crate::search::{self, NamedStrategy, PilotBench, SearchRun};

#[derive(Debug, Parser)]
#[command(name = "diffnas", version, about = "Budgeted UNet architecture search for diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV, one signal per row.
    GenData {
        #[arg(long, default_value = "sine_mixture")]
        kind: DatasetKind,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 16)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one architecture and save a checkpoint.
    Train(TrainArgs),
    /// Draw signals from a checkpoint with the ancestral sampler.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        sample_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Frechet distance between two sample CSV files.
    EvalFid {
        a: PathBuf,
        b: PathBuf,
    },
    /// Estimate multiply-accumulates of an architecture.
    Flops {
        #[arg(long)]
        arch: ArchitectureConfig,
        #[arg(long, default_value = "desk")]
        scale: Scale,
        /// Signal length for the desk estimator.
        #[arg(long, default_value_t = 16)]
        length: usize,
        #[arg(long)]
        csv: bool,
    },
    /// Run (or resume) the budgeted architecture search.
    Search {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `runs/<config file stem>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Pick the training strategy whose truncated ranking best matches full training.
    SearchStrategy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ranking accuracy of the full and search strategies at several budgets.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the CSV and SVG reports of a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    arch: ArchitectureConfig,
    /// Training data CSV; a default sine_mixture set is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 100)]
    diffusion_steps: usize,
    #[arg(long, default_value = "linear", value_parser = parse_schedule)]
    schedule: ScheduleKind,
    #[arg(long, default_value = "marginal", value_parser = parse_variance)]
    variance: VarianceMode,
    #[arg(long, default_value = "adam", value_parser = parse_optimizer)]
    optimizer: OptimizerKind,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_schedule(s: &str) -> std::result::Result<ScheduleKind, String> {
    parse_enum(s)
}

fn parse_variance(s: &str) -> std::result::Result<VarianceMode, String> {
    parse_enum(s)
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    parse_enum(s)
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    arch: ArchitectureConfig,
    data_length: usize,
    schedule: ScheduleKind,
    variance: VarianceMode,
    diffusion_steps: usize,
    values: Vec<f64>,
}

impl Checkpoint {
    fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::build(self.schedule, self.diffusion_steps)?.with_variance(self.variance))
    }

    fn params(&self) -> Result<DenoiserParams> {
        let mut p = DenoiserParams::build(&self.arch, self.data_length, 0)?;
        if p.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                expected: p.len(),
                got: self.values.len(),
            });
        }
        p.values_mut().copy_from_slice(&self.values);
        Ok(p)
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // A bare invocation prints help but is still a usage error.
            let missing = e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand;
            if missing {
                eprint!("{}", e.render());
            } else {
                let _ = e.print();
            }
            return if missing || e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            kind,
            samples,
            length,
            seed,
            out,
        } => {
            let d = diffusion::gen_dataset(kind, samples, length, seed)?;
            write(&out, &d.to_csv())?;
            println!("wrote {samples} signals of length {length} to {}", out.display());
        }
        Command::Train(a) => train(a)?,
        Command::Sample {
            model,
            n,
            sample_steps,
            seed,
            out,
        } => {
            let ck: Checkpoint = serde_json::from_str(&read(&model)?)?;
            let params = ck.params()?;
            let samples = diffusion::sample(&params, ck.data_length, &ck.schedule()?, n, sample_steps, seed)?;
            write(&out, &diffusion::samples_to_csv(&samples))?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::EvalFid { a, b } => {
            let xa = diffusion::samples_from_csv(&read(&a)?)?;
            let xb = diffusion::samples_from_csv(&read(&b)?)?;
            println!("{:?}", frechet::fid_between(&xa, &xb)?);
        }
        Command::Flops {
            arch,
            scale,
            length,
            csv,
        } => {
            let r = flops::estimate(&arch, scale, length)?;
            if csv {
                print!("{}", r.to_csv(&arch, scale));
            } else {
                print!("{}", r.to_text(&arch, scale));
            }
        }
        Command::Search {
            config,
            run_dir,
            resume,
        } => search_cmd(config, run_dir, resume)?,
        Command::SearchStrategy { config, out } => {
            let cfg = search::load_config(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let dataset = cfg.dataset.generate()?;
            let pilots = cfg.pilot_archs()?;
            let mut backend = match cfg.backend {
                search::BackendKind::Mutation => None,
                _ => Some(cfg.backend(base)?),
            };
            let (candidates, source) =
                search::strategy_candidates(&cfg.strategy_space, cfg.eval_budget, backend.as_mut().map(|b| b.as_mut() as &mut dyn ProposalBackend))?;
            let mut bench = PilotBench::new(&pilots, &dataset, cfg.protocol())?;
            let mut report = search::search_strategy(&mut bench, &cfg.full_strategy, &candidates, cfg.eval_budget, cfg.seed)?;
            report.source = source;
            emit(out.as_deref(), &report.to_csv())?;
            eprintln!(
                "best strategy ({:?} candidates): {} ({} training steps)",
                report.source,
                report.best.to_block().replace('\n', " "),
                report.steps
            );
        }
        Command::Ablation { config, seeds, out } => {
            let cfg = search::load_config(&config)?;
            let dataset = cfg.dataset.generate()?;
            let pilots = cfg.pilot_archs()?;
            let mut bench = PilotBench::new(&pilots, &dataset, cfg.protocol())?;
            let e = cfg.eval_budget;
            let strategies = [
                NamedStrategy {
                    name: "standard".into(),
                    strategy: cfg.full_strategy,
                },
                NamedStrategy {
                    name: "rapid".into(),
                    strategy: cfg.strategy,
                },
            ];
            let budgets: Vec<u64> = [e / 4, e / 2, e].into_iter().filter(|&b| b > 0).collect();
            let seeds: Vec<u64> = (0..seeds).map(|i| rng::derive_seed(cfg.seed, Stream::Train, i)).collect();
            let report = search::ablation_report(
                &mut bench,
                &cfg.full_strategy,
                search::FULL_TRAINING_FACTOR * e,
                &strategies,
                &budgets,
                &seeds,
            )?;
            emit(out.as_deref(), &report.to_csv())?;
        }
        Command::Report { run_dir } => {
            let (_, memory) = search::load_run(&run_dir)?;
            search::write_reports(&run_dir, &memory)?;
            print_best(&memory);
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let data = match &a.data {
        Some(p) => diffusion::samples_from_csv(&read(p)?)?,
        None => diffusion::gen_dataset(DatasetKind::SineMixture, 2000, 16, 0)?.samples,
    };
    let length = data.first().map_or(0, Vec::len);
    let strategy = TrainStrategy::new(a.lr, a.dropout, a.diffusion_steps);
    strategy.validate()?;
    let schedule = NoiseSchedule::build(a.schedule, a.diffusion_steps)?.with_variance(a.variance);
    let mut params = DenoiserParams::build(&a.arch, length, rng::derive_seed(a.seed, Stream::Init, 0))?;
    let mut r = rng::stream_rng(a.seed, Stream::Train, 0);
    let trace = diffusion::train(&mut params, &data, &schedule, &strategy, a.optimizer, a.steps, a.batch_size, &mut r)?;
    let ck = Checkpoint {
        arch: a.arch,
        data_length: length,
        schedule: a.schedule,
        variance: a.variance,
        diffusion_steps: a.diffusion_steps,
        values: params.values().to_vec(),
    };
    write(&a.out, &serde_json::to_string(&ck)?)?;
    if let Some(p) = &a.loss_csv {
        write(p, &diffusion::loss_trace_csv(&trace))?;
    }
    println!(
        "trained {} for {} steps, final loss {:.6}",
        a.arch,
        a.steps,
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn search_cmd(config: Option<PathBuf>, run_dir: Option<PathBuf>, resume: bool) -> Result<()> {
    let dir = match (&run_dir, &config) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => Path::new("runs").join(c.file_stem().unwrap_or_default()),
        (None, None) => return Err(Error::Config("search needs --config or --run-dir".into())),
    };
    let run = if resume {
        SearchRun::open(&dir, None, true, None)?
    } else {
        let path = config.ok_or_else(|| Error::Config("a new search needs --config".into()))?;
        let mut cfg = search::load_config(&path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        // The snapshot must still find the fixture when resumed from elsewhere.
        if let Some(f) = cfg.fixture.take() {
            let joined = base.join(f);
            cfg.fixture = Some(joined.canonicalize().map_err(|e| Error::io(format!("resolving {}", joined.display()), e))?);
        }
        let backend = cfg.backend(base)?;
        SearchRun::open(&dir, Some(cfg), false, Some(backend))?
    };
    let outcome = run.finish()?;
    print_best(&outcome.memory);
    eprintln!("{} training steps in total; run directory {}", outcome.steps, dir.display());
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn print_best(memory: &SearchMemory) {
    match memory.best() {
        Some(r) => println!("best: {}", memory.describe_record(r)),
        None => println!("best: none ({} records, none accepted)", memory.len()),
    }
}
