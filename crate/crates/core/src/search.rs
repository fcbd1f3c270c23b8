//! The search orchestrator: truncated-training evaluation, the budget-gated
//! proposal loop, final selection, the training-strategy search and the
//! ranking ablation.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::denoiser::{ArchitectureConfig, DenoiserParams, TrainStrategy};
use crate::diffusion::{self, Dataset, DatasetKind, OptimizerKind, RunSettings};
use crate::error::{Error, Result};
use crate::flops::{self, Scale};
use crate::frechet;
use crate::proxy::{
    propose, MemoryLog, MutationBackend, Proposal, ProposalBackend, ProposalRequest, ProxyExchange, RejectionReason,
    RemoteBackend, RequestKind, ScriptedBackend, SearchMemory, SearchRecord, SearchSpace, StrategySpace,
};
use crate::rankcorr::{self, RankingAccuracy};
use crate::rng::{self, Stream};
use crate::schedule::{NoiseSchedule, ScheduleKind, VarianceMode};

/// Shared settings of every RFID evaluation in one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// `steps` is replaced by each strategy's `diffusion_steps`.
    pub settings: RunSettings,
    pub eval_samples: usize,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `f64::INFINITY` when training or sampling failed.
    pub rfid: f64,
    /// Gradient updates actually performed.
    pub steps: u64,
    pub losses: Vec<f64>,
    pub failure: Option<String>,
}

impl Evaluation {
    fn failed(steps: u64, losses: Vec<f64>, err: &Error) -> Self {
        Self {
            rfid: f64::INFINITY,
            steps,
            losses,
            failure: Some(err.to_string()),
        }
    }
}

/// Trains `arch` for exactly `budget` steps with `strategy` and returns the
/// Fréchet distance between `eval_samples` generated signals and `dataset`.
/// Weight init, minibatch order and sampling noise all derive from `seed`,
/// so candidates evaluated under one seed share their random numbers.
pub fn rfid_evaluate(
    arch: &ArchitectureConfig,
    strategy: &TrainStrategy,
    budget: u64,
    dataset: &Dataset,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<Evaluation> {
    let mut v = rfid_trajectory(arch, strategy, &[budget], dataset, protocol, seed)?;
    Ok(v.pop().expect("one checkpoint"))
}

/// One training run evaluated at every checkpoint in `budgets` (ascending).
/// Entry `i` equals `rfid_evaluate` at `budgets[i]`: truncating a run is the
/// same as stopping it early.
pub fn rfid_trajectory(
    arch: &ArchitectureConfig,
    strategy: &TrainStrategy,
    budgets: &[u64],
    dataset: &Dataset,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<Vec<Evaluation>> {
    strategy.validate()?;
    if protocol.settings.batch_size == 0 || protocol.settings.sample_steps == 0 {
        return Err(Error::InvalidRange("batch_size and sample_steps must be positive".into()));
    }
    if protocol.eval_samples < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: protocol.eval_samples,
        });
    }
    if budgets.is_empty() || budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Precondition("checkpoints must be non-empty and ascending".into()));
    }
    let schedule = NoiseSchedule::build(protocol.settings.schedule_kind, strategy.diffusion_steps)?
        .with_variance(protocol.settings.variance_mode);
    let sample_steps = protocol.settings.sample_steps.min(strategy.diffusion_steps);
    let mut params = DenoiserParams::build(arch, dataset.length, rng::derive_seed(seed, Stream::Init, 0))?;
    let mut train_rng = rng::stream_rng(seed, Stream::Train, 0);
    let mut opt = diffusion::Optimizer::new(protocol.optimizer, params.len());
    let last = *budgets.last().expect("non-empty");
    let mut losses = Vec::with_capacity(last as usize);
    let mut batch: Vec<&[f64]> = Vec::with_capacity(protocol.settings.batch_size);
    let mut out = Vec::with_capacity(budgets.len());
    let mut pending = budgets.iter().copied().peekable();
    let sample_seed = rng::derive_seed(seed, Stream::Sampling, 0);
    use rand::Rng as _;
    for step in 0..=last {
        while pending.peek() == Some(&step) {
            pending.next();
            out.push(evaluate_now(&params, &schedule, sample_steps, dataset, protocol, sample_seed, &losses)?);
        }
        if step == last {
            break;
        }
        batch.clear();
        for _ in 0..protocol.settings.batch_size {
            batch.push(&dataset.samples[train_rng.random_range(0..dataset.len())]);
        }
        match opt.step(&mut params, &batch, &schedule, strategy, &mut train_rng) {
            Ok(loss) => losses.push(loss),
            Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteActivation(_))) => {
                // Every later checkpoint inherits the failure.
                let failed = Evaluation::failed(opt.steps(), losses, &e);
                out.extend(pending.map(|_| failed.clone()));
                return Ok(out);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn evaluate_now(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    sample_steps: usize,
    dataset: &Dataset,
    protocol: &EvalProtocol,
    sample_seed: u64,
    losses: &[f64],
) -> Result<Evaluation> {
    let steps = losses.len() as u64;
    let generated = match diffusion::sample(
        params,
        dataset.length,
        schedule,
        protocol.eval_samples,
        sample_steps,
        sample_seed,
    ) {
        Ok(g) => g,
        Err(e @ Error::SamplingFailure(_)) => return Ok(Evaluation::failed(steps, losses.to_vec(), &e)),
        Err(e) => return Err(e),
    };
    let rfid = match frechet::fid_between(&generated, &dataset.samples) {
        Ok(d) if d.is_finite() => d,
        Ok(_) => f64::INFINITY,
        Err(e @ Error::NotPsd(_)) => return Ok(Evaluation::failed(steps, losses.to_vec(), &e)),
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        rfid,
        steps,
        losses: losses.to_vec(),
        failure: None,
    })
}

/// Everything one search run needs, as read from the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub seed: u64,
    pub rounds: u64,
    /// FLOPs budget in MACs per sample.
    pub budget: u64,
    pub scale: Scale,
    /// Training steps per RFID evaluation.
    pub eval_budget: u64,
    pub eval_samples: usize,
    pub sample_steps: usize,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
    pub variance: VarianceMode,
    pub optimizer: OptimizerKind,
    pub backend: BackendKind,
    /// Response file for the scripted backend.
    pub fixture: Option<PathBuf>,
    /// Remote request timeout in seconds.
    pub timeout_secs: u64,
    /// Strategy of every RFID evaluation in the search.
    pub strategy: TrainStrategy,
    /// Ground-truth strategy of the strategy search and ablation.
    pub full_strategy: TrainStrategy,
    /// Pilot architectures of the strategy search and ablation, in compact form.
    pub pilots: Vec<String>,
    pub dataset: DatasetConfig,
    pub space: SearchSpace,
    pub strategy_space: StrategySpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mutation,
    Scripted,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub samples: usize,
    pub length: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::SineMixture,
            samples: 2000,
            length: 16,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn generate(&self) -> Result<Dataset> {
        diffusion::gen_dataset(self.kind, self.samples, self.length, self.seed)
    }
}

/// Default desk budget in MACs. About a fifth of the desk space fits, including
/// `base_channel=16,num_blocks=1,mult=1:2:2:2,attn=0:1:0:0`.
pub const DESK_DEFAULT_BUDGET: u64 = 500_000;

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 10,
            budget: DESK_DEFAULT_BUDGET,
            scale: Scale::Desk,
            eval_budget: 400,
            eval_samples: 500,
            sample_steps: 20,
            batch_size: 32,
            schedule: ScheduleKind::Linear,
            variance: VarianceMode::Marginal,
            optimizer: OptimizerKind::Adam,
            backend: BackendKind::Mutation,
            fixture: None,
            timeout_secs: 60,
            strategy: TrainStrategy::new(1e-3, 0.1, 100),
            full_strategy: TrainStrategy::new(5e-4, 0.3, 1000),
            pilots: DEFAULT_PILOTS.iter().map(|s| s.to_string()).collect(),
            dataset: DatasetConfig::default(),
            space: SearchSpace::desk(),
            strategy_space: StrategySpace::default(),
        }
    }
}

/// Eight desk architectures spanning the capacity range of the desk space.
pub const DEFAULT_PILOTS: [&str; 8] = [
    "base_channel=8,num_blocks=1,mult=1:1:1:1,attn=0:0:0:0",
    "base_channel=8,num_blocks=1,mult=1:2:2:2,attn=0:1:0:0",
    "base_channel=12,num_blocks=1,mult=1:2:2:2,attn=0:0:0:0",
    "base_channel=16,num_blocks=1,mult=1:1:2:2,attn=0:0:0:0",
    "base_channel=16,num_blocks=2,mult=1:2:2:2,attn=0:0:1:0",
    "base_channel=20,num_blocks=1,mult=1:2:3:3,attn=0:0:0:0",
    "base_channel=24,num_blocks=1,mult=1:2:2:2,attn=0:1:0:0",
    "base_channel=8,num_blocks=2,mult=2:2:2:2,attn=0:0:0:0",
];

impl SearchConfig {
    pub fn pilot_archs(&self) -> Result<Vec<ArchitectureConfig>> {
        self.pilots
            .iter()
            .map(|s| s.parse().map_err(|e| Error::Config(format!("pilot {s:?}: {e}"))))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.budget == 0 {
            return bad("budget must be positive");
        }
        if self.eval_budget == 0 {
            return bad("eval_budget must be at least 1");
        }
        if self.eval_samples < 2 {
            return bad("eval_samples must be at least 2");
        }
        if self.sample_steps == 0 || self.batch_size == 0 {
            return bad("sample_steps and batch_size must be positive");
        }
        if self.backend == BackendKind::Scripted && self.fixture.is_none() {
            return bad("the scripted backend needs a fixture path");
        }
        self.strategy.validate().map_err(|e| Error::Config(format!("strategy: {e}")))?;
        self.full_strategy
            .validate()
            .map_err(|e| Error::Config(format!("full_strategy: {e}")))?;
        self.pilot_archs()?;
        crate::denoiser::check_length(self.dataset.length).map_err(|e| Error::Config(format!("dataset: {e}")))?;
        if self.dataset.samples < 2 {
            return bad("dataset.samples must be at least 2");
        }
        self.space.validate()?;
        self.strategy_space.validate()
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            settings: RunSettings {
                schedule_kind: self.schedule,
                steps: self.strategy.diffusion_steps,
                sample_steps: self.sample_steps,
                batch_size: self.batch_size,
                variance_mode: self.variance,
            },
            eval_samples: self.eval_samples,
            optimizer: self.optimizer,
        }
    }

    /// Builds the configured backend. Relative fixture paths resolve against `base`.
    pub fn backend(&self, base: &Path) -> Result<Box<dyn ProposalBackend>> {
        Ok(match self.backend {
            BackendKind::Mutation => Box::new(MutationBackend::new(self.seed)),
            BackendKind::Scripted => {
                let p = self.fixture.as_ref().ok_or_else(|| Error::Config("missing fixture".into()))?;
                Box::new(ScriptedBackend::from_file(&base.join(p))?)
            }
            BackendKind::Remote => Box::new(RemoteBackend::from_env(Duration::from_secs(self.timeout_secs))?),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }
}

/// Fixed inputs of the proposal loop.
#[derive(Debug, Clone)]
pub struct SearchContext {
    pub config: SearchConfig,
    pub dataset: Dataset,
}

impl SearchContext {
    pub fn new(config: SearchConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.dataset.generate()?;
        Ok(Self { config, dataset })
    }

    fn flops_of(&self, arch: &ArchitectureConfig) -> Result<u64> {
        Ok(flops::estimate(arch, self.config.scale, self.dataset.length)?.total)
    }
}

/// The result of one round: the record to append and what produced it.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub record: SearchRecord,
    pub exchange: Option<ProxyExchange>,
    pub evaluation: Option<Evaluation>,
    /// Training steps spent this round.
    pub steps: u64,
}

/// Runs one propose, gate, evaluate cycle against `memory` without mutating it.
/// Every candidate is evaluated under the run seed so candidates share init,
/// minibatch and sampling noise.
pub fn next_round(
    memory: &SearchMemory,
    ctx: &SearchContext,
    backend: &mut dyn ProposalBackend,
) -> Result<RoundOutcome> {
    let round = memory.next_round();
    if round >= ctx.config.rounds {
        return Err(Error::Precondition(format!(
            "all {} rounds are complete",
            ctx.config.rounds
        )));
    }
    let settings = ctx.config.protocol().settings;
    let request = ProposalRequest {
        kind: RequestKind::Architecture {
            space: &ctx.config.space,
            settings: &settings,
            memory,
            data_length: ctx.dataset.length,
        },
        round,
    };
    let rejected = |arch, flops, reason| RoundOutcome {
        record: SearchRecord::rejected(round, arch, flops, reason),
        exchange: None,
        evaluation: None,
        steps: 0,
    };
    let exchange = match propose(backend, &request) {
        Ok(x) => x,
        Err(Error::BackendUnavailable(_) | Error::FixtureExhausted(_)) => {
            return Ok(rejected(None, None, RejectionReason::ParseFailure))
        }
        Err(e) => return Err(e),
    };
    let Some(Proposal::Architecture(arch)) = exchange.parsed else {
        return Ok(RoundOutcome {
            exchange: Some(exchange),
            ..rejected(None, None, RejectionReason::ParseFailure)
        });
    };
    let flops = ctx.flops_of(&arch)?;
    if flops > ctx.config.budget {
        return Ok(RoundOutcome {
            exchange: Some(exchange),
            ..rejected(Some(arch), Some(flops), RejectionReason::OverBudget)
        });
    }
    let eval = rfid_evaluate(
        &arch,
        &ctx.config.strategy,
        ctx.config.eval_budget,
        &ctx.dataset,
        &ctx.config.protocol(),
        ctx.config.seed,
    )?;
    let record = if eval.rfid.is_finite() {
        SearchRecord::accepted(round, arch, flops, eval.rfid)
    } else {
        SearchRecord::rejected(round, Some(arch), Some(flops), RejectionReason::TrainingDiverged)
    };
    Ok(RoundOutcome {
        record,
        exchange: Some(exchange),
        steps: eval.steps,
        evaluation: Some(eval),
    })
}

/// Runs one round and appends its record to `memory`.
pub fn search_round(
    memory: &mut SearchMemory,
    ctx: &SearchContext,
    backend: &mut dyn ProposalBackend,
) -> Result<RoundOutcome> {
    let outcome = next_round(memory, ctx, backend)?;
    memory.push(outcome.record.clone())?;
    Ok(outcome)
}

pub fn select_best(memory: &SearchMemory) -> Result<(ArchitectureConfig, f64)> {
    memory
        .best()
        .and_then(|r| r.arch.map(|a| (a, r.rfid)))
        .ok_or(Error::NoAcceptedCandidates)
}

/// Lowest accepted RFID up to and including each record.
pub fn best_so_far(records: &[SearchRecord]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    records
        .iter()
        .map(|r| {
            if r.accepted {
                best = best.min(r.rfid);
            }
            best
        })
        .collect()
}

/// Files of a run directory.
pub const CONFIG_FILE: &str = "config.toml";
pub const MEMORY_FILE: &str = "memory.jsonl";
pub const EXCHANGE_FILE: &str = "exchanges.jsonl";
pub const LOCK_FILE: &str = "run.lock";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const TREND_SVG: &str = "rfid_trend.svg";
pub const LOSS_DIR: &str = "losses";

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(format!("creating {}", path.display()), e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// What one backend exchange looked like, kept next to the memory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeEntry {
    pub round: u64,
    pub backend_id: String,
    pub retry_count: u32,
    /// Backend calls made, including failed attempts.
    pub calls: u32,
    pub errors: Vec<String>,
    pub prompt: String,
    pub raw_response: String,
}

/// A resumable search bound to a run directory.
pub struct SearchRun {
    ctx: SearchContext,
    dir: PathBuf,
    log: MemoryLog,
    backend: Box<dyn ProposalBackend>,
    steps: u64,
    _lock: RunLock,
}

impl std::fmt::Debug for SearchRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SearchRun")
            .field("dir", &self.dir)
            .field("rounds_done", &self.log.memory().len())
            .field("steps", &self.steps)
            .finish()
    }
}

impl SearchRun {
    /// Starts a fresh run in `dir` (which must not hold a memory log) or,
    /// with `resume`, continues the one already there using its config snapshot.
    pub fn open(
        dir: &Path,
        config: Option<SearchConfig>,
        resume: bool,
        backend: Option<Box<dyn ProposalBackend>>,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let lock = RunLock::acquire(dir)?;
        let snapshot = dir.join(CONFIG_FILE);
        let memory_path = dir.join(MEMORY_FILE);
        let config = if resume {
            load_config(&snapshot)?
        } else {
            let config = config.ok_or_else(|| Error::Config("a new run needs a config".into()))?;
            if memory_path.exists() {
                return Err(Error::Config(format!(
                    "{} already holds a run; pass --resume to continue it",
                    dir.display()
                )));
            }
            config.validate()?;
            write_file(&snapshot, &config.to_toml())?;
            config
        };
        let ctx = SearchContext::new(config)?;
        let log = MemoryLog::open(&memory_path, ctx.config.budget, ctx.config.scale)?;
        let mut backend = match backend {
            Some(b) => b,
            None => ctx.config.backend(dir)?,
        };
        let exchanges = read_exchanges(&dir.join(EXCHANGE_FILE))?;
        let consumed: u32 = exchanges
            .iter()
            .filter(|x| x.round < log.memory().next_round())
            .map(|x| x.calls)
            .sum();
        backend.resume_after(consumed as usize);
        let steps = log
            .memory()
            .records()
            .iter()
            .filter(|r| r.accepted || r.rejection_reason == Some(RejectionReason::TrainingDiverged))
            .count() as u64
            * ctx.config.eval_budget;
        Ok(Self {
            ctx,
            dir: dir.to_path_buf(),
            log,
            backend,
            steps,
            _lock: lock,
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.ctx.config
    }

    pub fn memory(&self) -> &SearchMemory {
        self.log.memory()
    }

    pub fn is_done(&self) -> bool {
        self.memory().next_round() >= self.ctx.config.rounds
    }

    /// Upper bound on training steps spent so far (diverged rounds count in full).
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Runs the next round and persists it. Returns `None` once all rounds are done.
    pub fn step(&mut self) -> Result<Option<SearchRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let outcome = next_round(self.log.memory(), &self.ctx, self.backend.as_mut())?;
        let round = outcome.record.round;
        if let Some(eval) = &outcome.evaluation {
            let dir = self.dir.join(LOSS_DIR);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            write_file(
                &dir.join(format!("round_{round:03}.csv")),
                &diffusion::loss_trace_csv(&eval.losses),
            )?;
        }
        if let Some(x) = &outcome.exchange {
            let entry = ExchangeEntry {
                round,
                backend_id: x.backend_id.clone(),
                retry_count: x.retry_count,
                calls: x.errors.len() as u32 + u32::from(x.parsed.is_some()),
                errors: x.errors.clone(),
                prompt: x.prompt.clone(),
                raw_response: x.raw_response.clone(),
            };
            append_line(&self.dir.join(EXCHANGE_FILE), &serde_json::to_string(&entry)?)?;
        }
        self.log.append(outcome.record.clone())?;
        self.steps += outcome.steps;
        Ok(Some(outcome.record))
    }

    /// Runs the remaining rounds, writes the reports and selects the winner.
    pub fn finish(mut self) -> Result<SearchOutcome> {
        while self.step()?.is_some() {}
        write_reports(&self.dir, self.memory())?;
        let best = select_best(self.memory());
        Ok(SearchOutcome {
            best: best.as_ref().ok().copied(),
            memory: self.memory().clone(),
            steps: self.steps,
            error: best.err(),
        })
    }
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub best: Option<(ArchitectureConfig, f64)>,
    pub memory: SearchMemory,
    pub steps: u64,
    /// `NoAcceptedCandidates` when every round was rejected.
    pub error: Option<Error>,
}

/// [`SearchRun::open`] then [`SearchRun::finish`].
pub fn run_search(dir: &Path, config: SearchConfig, resume: bool) -> Result<SearchOutcome> {
    let run = SearchRun::open(dir, if resume { None } else { Some(config) }, resume, None)?;
    run.finish()
}

pub fn load_config(path: &Path) -> Result<SearchConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Parses TOML run configuration; errors name the line and the offending key.
pub fn parse_config(text: &str) -> Result<SearchConfig> {
    let config: SearchConfig = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .map_or_else(String::new, |l| format!("line {l}: "));
        Error::Config(format!("{line}{}", e.message()))
    })?;
    config.validate()?;
    Ok(config)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let ctx = || format!("appending to {}", path.display());
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(ctx(), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(ctx(), e))?;
    f.sync_data().map_err(|e| Error::io(ctx(), e))
}

fn read_exchanges(path: &Path) -> Result<Vec<ExchangeEntry>> {
    match std::fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(Error::io(format!("reading {}", path.display()), e)),
    }
}

pub fn rounds_csv(memory: &SearchMemory) -> String {
    let mut s = String::from("round,arch,flops,rfid,accepted,rejection_reason,best_so_far\n");
    let best = best_so_far(memory.records());
    for (r, b) in memory.records().iter().zip(best) {
        let num = |v: f64| if v.is_finite() { format!("{v:?}") } else { "inf".into() };
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round,
            r.arch.map_or_else(String::new, |a| a.to_string()),
            r.flops.map_or_else(String::new, |f| f.to_string()),
            num(r.rfid),
            r.accepted,
            r.rejection_reason.map_or("", |x| x.as_str()),
            num(b),
        ));
    }
    s
}

/// Line chart of per-round RFID (points) and the best-so-far curve.
pub fn trend_svg(memory: &SearchMemory) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 48.0;
    let recs = memory.records();
    let finite: Vec<(u64, f64)> = recs.iter().filter(|r| r.rfid.is_finite()).map(|r| (r.round, r.rfid)).collect();
    let best: Vec<(u64, f64)> = recs
        .iter()
        .zip(best_so_far(recs))
        .filter(|(_, b)| b.is_finite())
        .map(|(r, b)| (r.round, b))
        .collect();
    let max_round = recs.last().map_or(1, |r| r.round.max(1)) as f64;
    let (lo, hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, v)| (lo.min(v), hi.max(v)));
    let (lo, hi) = if finite.is_empty() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let x = |r: u64| M + (W - 2.0 * M) * r as f64 / max_round;
    let y = |v: f64| H - M - (H - 2.0 * M) * (v - lo) / (hi - lo);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"12\">round</text>\n\
         <text x=\"12\" y=\"{cy}\" font-size=\"12\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">RFID</text>\n\
         <text x=\"{lx}\" y=\"{b}\" font-size=\"10\" text-anchor=\"end\">{lo:.3}</text>\n\
         <text x=\"{lx}\" y=\"{M}\" font-size=\"10\" text-anchor=\"end\">{hi:.3}</text>\n",
        b = H - M,
        r = W - M,
        cx = W / 2.0,
        ty = H - 12.0,
        cy = H / 2.0,
        lx = M - 4.0,
    );
    if !best.is_empty() {
        let pts: Vec<String> = best.iter().map(|&(r, v)| format!("{:.1},{:.1}", x(r), y(v))).collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }
    for &(r, v) in &finite {
        s.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"darkorange\"/>\n",
            x(r),
            y(v)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Regenerates every derived report in `dir` from `memory`.
pub fn write_reports(dir: &Path, memory: &SearchMemory) -> Result<()> {
    write_file(&dir.join(ROUNDS_CSV), &rounds_csv(memory))?;
    write_file(&dir.join(TREND_SVG), &trend_svg(memory))
}

/// Reloads a run directory's config snapshot and memory log.
pub fn load_run(dir: &Path) -> Result<(SearchConfig, SearchMemory)> {
    let config = load_config(&dir.join(CONFIG_FILE))?;
    let path = dir.join(MEMORY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let memory = SearchMemory::from_jsonl(&text, config.budget, config.scale)?;
    Ok((config, memory))
}

/// Ranking quality of one strategy at one truncation budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyScore {
    pub strategy: TrainStrategy,
    pub budget: u64,
    pub rfids: Vec<f64>,
    /// `None` when any pilot failed or the ranking was degenerate.
    pub accuracy: Option<RankingAccuracy>,
    pub failure: Option<String>,
}

impl StrategyScore {
    pub fn objective(&self) -> f64 {
        self.accuracy.map_or(f64::NEG_INFINITY, |a| a.objective())
    }
}

/// Scores `rfids` against the ground-truth `truth`.
pub fn score_ranking(rfids: &[f64], truth: &[f64]) -> Result<RankingAccuracy> {
    if let Some(i) = rfids.iter().chain(truth).position(|v| !v.is_finite()) {
        return Err(Error::SamplingFailure(format!("pilot evaluation {i} did not finish")));
    }
    rankcorr::ranking_accuracy(rfids, truth)
}

/// Cost-accounted evaluator shared by the strategy search and the ablation.
#[derive(Debug)]
pub struct PilotBench<'a> {
    pub pilots: &'a [ArchitectureConfig],
    pub dataset: &'a Dataset,
    pub protocol: EvalProtocol,
    /// Gradient updates performed so far.
    pub steps: u64,
}

impl<'a> PilotBench<'a> {
    pub fn new(pilots: &'a [ArchitectureConfig], dataset: &'a Dataset, protocol: EvalProtocol) -> Result<Self> {
        if pilots.len() < 4 {
            return Err(Error::Precondition(format!(
                "need at least 4 pilot architectures, got {}",
                pilots.len()
            )));
        }
        Ok(Self {
            pilots,
            dataset,
            protocol,
            steps: 0,
        })
    }

    /// RFID of every pilot under one strategy, budget and seed.
    pub fn rfids(&mut self, strategy: &TrainStrategy, budget: u64, seed: u64) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.pilots.len());
        for p in self.pilots {
            let e = rfid_evaluate(p, strategy, budget, self.dataset, &self.protocol, seed)?;
            self.steps += e.steps;
            out.push(e.rfid);
        }
        Ok(out)
    }

    /// RFID of every pilot at each checkpoint of one run per pilot; steps
    /// are charged once per run, up to the last checkpoint.
    pub fn trajectories(&mut self, strategy: &TrainStrategy, checkpoints: &[u64], seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.pilots.len());
        for p in self.pilots {
            let t = rfid_trajectory(p, strategy, checkpoints, self.dataset, &self.protocol, seed)?;
            self.steps += t.last().map_or(0, |e| e.steps);
            out.push(t.into_iter().map(|e| e.rfid).collect());
        }
        Ok(out)
    }

    pub fn score(&mut self, strategy: &TrainStrategy, budget: u64, seed: u64, truth: &[f64]) -> Result<StrategyScore> {
        let rfids = self.rfids(strategy, budget, seed)?;
        let (accuracy, failure) = match score_ranking(&rfids, truth) {
            Ok(a) => (Some(a), None),
            Err(e @ (Error::DegenerateVariance(_) | Error::SamplingFailure(_))) => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        Ok(StrategyScore {
            strategy: *strategy,
            budget,
            rfids,
            accuracy,
            failure,
        })
    }
}

/// Where the candidate strategies came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Backend,
    /// No backend, or the backend gave no usable proposal.
    Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyReport {
    pub best: TrainStrategy,
    pub truth: Vec<f64>,
    pub scores: Vec<StrategyScore>,
    pub source: CandidateSource,
    pub steps: u64,
}

impl StrategyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("learning_rate,dropout,diffusion_steps,budget,spearman,pearson,kendall\n");
        for sc in &self.scores {
            let (sp, pe, ke) = sc
                .accuracy
                .map_or(("".into(), "".into(), "".into()), |a| (fmt4(a.spearman), fmt4(a.pearson), fmt4(a.kendall)));
            s.push_str(&format!(
                "{:e},{},{},{},{sp},{pe},{ke}\n",
                sc.strategy.learning_rate, sc.strategy.dropout, sc.strategy.diffusion_steps, sc.budget
            ));
        }
        s
    }
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Candidate strategies: the backend's proposal when it yields one inside the
/// space, else the 3×3×3 grid.
pub fn strategy_candidates(
    space: &StrategySpace,
    budget: u64,
    backend: Option<&mut dyn ProposalBackend>,
) -> Result<(Vec<TrainStrategy>, CandidateSource)> {
    if let Some(b) = backend {
        let request = ProposalRequest {
            kind: RequestKind::Strategy { space, budget },
            round: 0,
        };
        match propose(b, &request) {
            Ok(ProxyExchange {
                parsed: Some(Proposal::Strategies(s)),
                ..
            }) => return Ok((s, CandidateSource::Backend)),
            Ok(_) | Err(Error::BackendUnavailable(_) | Error::FixtureExhausted(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((space.grid(), CandidateSource::Grid))
}

/// Ground truth under `full_strategy` at `10 × budget` steps, then every
/// candidate at `budget` steps; returns the Spearman-maximizing candidate.
pub fn search_strategy(
    bench: &mut PilotBench<'_>,
    full_strategy: &TrainStrategy,
    candidates: &[TrainStrategy],
    budget: u64,
    seed: u64,
) -> Result<StrategyReport> {
    let truth = bench.rfids(full_strategy, FULL_TRAINING_FACTOR * budget, seed)?;
    rank_strategies(bench, &truth, candidates, budget, seed)
}

/// Ratio of the ground-truth training length to the truncated budget.
pub const FULL_TRAINING_FACTOR: u64 = 10;

/// Candidate scoring against a given ground truth.
pub fn rank_strategies(
    bench: &mut PilotBench<'_>,
    truth: &[f64],
    candidates: &[TrainStrategy],
    budget: u64,
    seed: u64,
) -> Result<StrategyReport> {
    if candidates.is_empty() {
        return Err(Error::Precondition("no candidate strategies".into()));
    }
    if truth.len() != bench.pilots.len() {
        return Err(Error::ShapeMismatch {
            expected: bench.pilots.len(),
            got: truth.len(),
        });
    }
    let start = bench.steps;
    let mut scores = Vec::with_capacity(candidates.len());
    for c in candidates {
        scores.push(bench.score(c, budget, seed, truth)?);
    }
    // First maximum wins, so ties keep candidate order.
    let best = scores
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, s)| match acc {
            Some((_, v)) if v >= s.objective() => acc,
            _ => Some((i, s.objective())),
        })
        .map(|(i, _)| scores[i].strategy)
        .expect("candidates is non-empty");
    Ok(StrategyReport {
        best,
        truth: truth.to_vec(),
        scores,
        source: CandidateSource::Grid,
        steps: bench.steps - start,
    })
}

/// One named strategy of an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedStrategy {
    pub name: String,
    pub strategy: TrainStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: String,
    pub budget: u64,
    /// Medians over seeds of each coefficient.
    pub spearman: f64,
    pub pearson: f64,
    pub kendall: f64,
    /// Per-seed Spearman values, in seed order.
    pub spearman_by_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// Ground-truth pilot FIDs under each seed.
    pub truths: Vec<Vec<f64>>,
    pub rows: Vec<AblationRow>,
    pub steps: u64,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,budget,spearman,pearson,kendall\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.strategy,
                r.budget,
                fmt4(r.spearman),
                fmt4(r.pearson),
                fmt4(r.kendall)
            ));
        }
        s
    }

    pub fn row(&self, strategy: &str, budget: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.budget == budget)
    }
}

/// Median of finite values; failed evaluations count as the worst score (-1).
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| if x.is_nan() { -1.0 } else { *x }).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ranking accuracy of every (strategy, budget) pair, summarized as medians
/// over `seeds`. Under each seed the ground truth is `full_strategy` trained
/// for `full_budget` steps, and every evaluation of `full_strategy` at a
/// smaller budget is an early stop of that same run.
pub fn ablation_report(
    bench: &mut PilotBench<'_>,
    full_strategy: &TrainStrategy,
    full_budget: u64,
    strategies: &[NamedStrategy],
    budgets: &[u64],
    seeds: &[u64],
) -> Result<AblationReport> {
    if strategies.is_empty() || budgets.is_empty() || seeds.is_empty() {
        return Err(Error::Precondition("need at least one strategy, budget and seed".into()));
    }
    if budgets.iter().any(|&b| b > full_budget) {
        return Err(Error::Precondition("budgets may not exceed the full-training budget".into()));
    }
    let start = bench.steps;
    let mut sorted: Vec<u64> = budgets.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let nan = RankingAccuracy {
        spearman: f64::NAN,
        pearson: f64::NAN,
        kendall: f64::NAN,
    };
    // acc[strategy][budget][seed]
    let mut acc = vec![vec![Vec::with_capacity(seeds.len()); budgets.len()]; strategies.len()];
    let mut truths = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut checkpoints = sorted.clone();
        checkpoints.push(full_budget);
        let full = bench.trajectories(full_strategy, &checkpoints, seed)?;
        let truth: Vec<f64> = full.iter().map(|t| *t.last().expect("non-empty")).collect();
        for (si, s) in strategies.iter().enumerate() {
            let traj = if s.strategy == *full_strategy {
                full.clone()
            } else {
                bench.trajectories(&s.strategy, &sorted, seed)?
            };
            for (bi, b) in budgets.iter().enumerate() {
                let k = sorted.binary_search(b).expect("budget is a checkpoint");
                let rfids: Vec<f64> = traj.iter().map(|t| t[k]).collect();
                acc[si][bi].push(match score_ranking(&rfids, &truth) {
                    Ok(a) => a,
                    Err(Error::DegenerateVariance(_) | Error::SamplingFailure(_)) => nan,
                    Err(e) => return Err(e),
                });
            }
        }
        truths.push(truth);
    }
    let mut rows = Vec::new();
    for (si, s) in strategies.iter().enumerate() {
        for (bi, &b) in budgets.iter().enumerate() {
            let col = |f: fn(&RankingAccuracy) -> f64| acc[si][bi].iter().map(f).collect::<Vec<_>>();
            rows.push(AblationRow {
                strategy: s.name.clone(),
                budget: b,
                spearman: median(&col(|a| a.spearman)),
                pearson: median(&col(|a| a.pearson)),
                kendall: median(&col(|a| a.kendall)),
                spearman_by_seed: col(|a| a.spearman),
            });
        }
    }
    Ok(AblationReport {
        truths,
        rows,
        steps: bench.steps - start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proxy::FIXTURE_DELIMITER;
    use rand::seq::SliceRandom as _;
    use rand::Rng as _;

    fn arch(base: u32) -> ArchitectureConfig {
        ArchitectureConfig::new(base, 1, [1, 2, 2, 2], [false, true, false, false])
    }

    fn tiny_config() -> SearchConfig {
        SearchConfig {
            rounds: 3,
            eval_budget: 5,
            eval_samples: 40,
            sample_steps: 4,
            batch_size: 8,
            strategy: TrainStrategy::new(1e-3, 0.1, 20),
            dataset: DatasetConfig {
                samples: 64,
                ..DatasetConfig::default()
            },
            ..SearchConfig::default()
        }
    }

    fn tiny_protocol() -> EvalProtocol {
        tiny_config().protocol()
    }

    #[test]
    fn selection_rules() {
        let mut m = SearchMemory::new(100, Scale::Desk);
        assert!(matches!(select_best(&m), Err(Error::NoAcceptedCandidates)));
        m.push(SearchRecord::accepted(0, arch(16), 80, 0.5)).unwrap();
        assert_eq!(select_best(&m).unwrap(), (arch(16), 0.5));
        m.push(SearchRecord::accepted(1, arch(8), 40, 0.5)).unwrap();
        m.push(SearchRecord::accepted(2, arch(12), 40, 0.5)).unwrap();
        assert_eq!(select_best(&m).unwrap().0, arch(8));
    }

    #[test]
    fn selection_matches_linear_scan() {
        let mut r = rng::seeded(3);
        let mut m = SearchMemory::new(1000, Scale::Desk);
        for round in 0..50 {
            // Coarse values so ties actually occur.
            let rfid = f64::from(r.random_range(0..10u32)) / 4.0;
            let flops = r.random_range(1..20u64) * 50;
            let rec = match r.random_range(0..4) {
                0 => SearchRecord::rejected(round, Some(arch(8)), Some(2000), RejectionReason::OverBudget),
                _ => SearchRecord::accepted(round, arch(8 + 4 * (round as u32 % 7)), flops, rfid),
            };
            m.push(rec).unwrap();
        }
        let mut best: Option<&SearchRecord> = None;
        for rec in m.records().iter().filter(|r| r.accepted) {
            let better = match best {
                None => true,
                Some(b) => rec.rfid < b.rfid || (rec.rfid == b.rfid && rec.flops < b.flops),
            };
            if better {
                best = Some(rec);
            }
        }
        let best = best.unwrap();
        assert_eq!(select_best(&m).unwrap(), (best.arch.unwrap(), best.rfid));
        assert_eq!(m.best().unwrap().round, best.round);
    }

    #[test]
    fn selection_ignores_record_order() {
        let mut r = rng::seeded(9);
        let mut recs: Vec<(ArchitectureConfig, u64, f64)> =
            (0..20).map(|i| (arch(8 + 4 * (i % 7)), 10 + i as u64, r.random::<f64>())).collect();
        let expected = {
            let mut m = SearchMemory::new(1000, Scale::Desk);
            for (i, &(a, f, v)) in recs.iter().enumerate() {
                m.push(SearchRecord::accepted(i as u64, a, f, v)).unwrap();
            }
            select_best(&m).unwrap()
        };
        for _ in 0..5 {
            recs.shuffle(&mut r);
            let mut m = SearchMemory::new(1000, Scale::Desk);
            for (i, &(a, f, v)) in recs.iter().enumerate() {
                m.push(SearchRecord::accepted(i as u64, a, f, v)).unwrap();
            }
            assert_eq!(select_best(&m).unwrap(), expected);
        }
    }

    #[test]
    fn best_so_far_is_running_minimum() {
        let mut m = SearchMemory::new(100, Scale::Desk);
        m.push(SearchRecord::rejected(0, None, None, RejectionReason::ParseFailure)).unwrap();
        m.push(SearchRecord::accepted(1, arch(8), 10, 0.7)).unwrap();
        m.push(SearchRecord::accepted(2, arch(8), 10, 0.9)).unwrap();
        m.push(SearchRecord::accepted(3, arch(8), 10, 0.2)).unwrap();
        assert_eq!(best_so_far(m.records()), vec![f64::INFINITY, 0.7, 0.7, 0.2]);
        let csv = rounds_csv(&m);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().ends_with(",inf,false,parse_failure,inf"));
        let svg = trend_svg(&m);
        assert!(svg.starts_with("<svg") && svg.matches("<circle").count() == 3);
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("seed = 7\n").unwrap();
        assert_eq!(
            c,
            SearchConfig {
                seed: 7,
                ..SearchConfig::default()
            }
        );
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let err = parse_config("seed = 1\n\n[space]\nbase_chanel_min = 8\n").unwrap_err().to_string();
        assert!(err.contains("base_chanel_min"), "{err}");
        assert!(err.contains("line 4"), "{err}");
        let err = parse_config("seed = \"x\"\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = SearchConfig::default();
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
        let mut c = tiny_config();
        c.backend = BackendKind::Scripted;
        c.fixture = Some("responses.txt".into());
        assert_eq!(parse_config(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn invalid_configs_fail_validation() {
        for text in ["rounds = 0", "eval_budget = 0", "eval_samples = 1", "backend = \"scripted\""] {
            assert!(matches!(parse_config(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn default_budget_matches_reference_arch() {
        let reference: ArchitectureConfig = "base_channel=16,num_blocks=1,mult=1:2:2:2,attn=0:1:0:0".parse().unwrap();
        let f = flops::flops_desk(&reference, 16).unwrap().total;
        assert!(f <= DESK_DEFAULT_BUDGET, "{f}");
        let over = ArchitectureConfig::new(32, 2, [1, 2, 2, 2], [false; 4]);
        assert!(flops::flops_desk(&over, 16).unwrap().total > DESK_DEFAULT_BUDGET);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let data = DatasetConfig {
            samples: 64,
            ..DatasetConfig::default()
        }
        .generate()
        .unwrap();
        let s = TrainStrategy::new(1e-3, 0.1, 20);
        let a = rfid_evaluate(&arch(8), &s, 5, &data, &tiny_protocol(), 1).unwrap();
        let b = rfid_evaluate(&arch(8), &s, 5, &data, &tiny_protocol(), 1).unwrap();
        assert_eq!(a, b);
        assert!(a.rfid.is_finite() && a.steps == 5 && a.losses.len() == 5);
    }

    #[test]
    fn trajectory_checkpoints_equal_separate_runs() {
        let data = tiny_config().dataset.generate().unwrap();
        let s = TrainStrategy::new(1e-3, 0.1, 20);
        let traj = rfid_trajectory(&arch(8), &s, &[0, 3, 3, 7], &data, &tiny_protocol(), 2).unwrap();
        assert_eq!(traj.len(), 4);
        assert_eq!(traj[1], traj[2]);
        for (e, b) in traj.iter().zip([0, 3, 3, 7]) {
            assert_eq!(e, &rfid_evaluate(&arch(8), &s, b, &data, &tiny_protocol(), 2).unwrap());
        }
        assert!(rfid_trajectory(&arch(8), &s, &[5, 1], &data, &tiny_protocol(), 2).is_err());
    }

    #[test]
    fn divergence_maps_to_sentinel() {
        let data = DatasetConfig {
            samples: 64,
            ..DatasetConfig::default()
        }
        .generate()
        .unwrap();
        let mut p = tiny_protocol();
        p.optimizer = OptimizerKind::Sgd;
        let e = rfid_evaluate(&arch(8), &TrainStrategy::new(1e6, 0.0, 20), 50, &data, &p, 0).unwrap();
        assert_eq!(e.rfid, f64::INFINITY);
        assert!(e.failure.is_some() && e.steps < 50);
    }

    struct Fixed(Vec<String>);

    impl ProposalBackend for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }

        fn complete(&mut self, _: &ProposalRequest<'_>, _: &str, _: u32) -> Result<String> {
            Ok(self.0.remove(0))
        }
    }

    fn block(a: &ArchitectureConfig) -> String {
        format!("```arch\n{}```\n", a.to_block())
    }

    #[test]
    fn over_budget_round_spends_nothing() {
        let mut config = tiny_config();
        config.budget = 1000;
        let ctx = SearchContext::new(config).unwrap();
        let mut m = SearchMemory::new(ctx.config.budget, ctx.config.scale);
        let mut b = Fixed(vec![block(&arch(32))]);
        let out = search_round(&mut m, &ctx, &mut b).unwrap();
        assert_eq!(out.steps, 0);
        assert!(out.evaluation.is_none());
        let r = &m.records()[0];
        assert!(!r.accepted && r.rfid.is_infinite());
        assert_eq!(r.rejection_reason, Some(RejectionReason::OverBudget));
        assert!(r.flops.unwrap() > 1000);
    }

    #[test]
    fn valid_round_is_accepted() {
        let ctx = SearchContext::new(tiny_config()).unwrap();
        let mut m = SearchMemory::new(ctx.config.budget, ctx.config.scale);
        let mut b = Fixed(vec!["nonsense".into(), block(&arch(8))]);
        let out = search_round(&mut m, &ctx, &mut b).unwrap();
        assert_eq!(out.steps, ctx.config.eval_budget);
        assert_eq!(out.exchange.unwrap().retry_count, 1);
        let r = &m.records()[0];
        assert!(r.accepted && r.rfid.is_finite() && r.flops.unwrap() <= ctx.config.budget);
    }

    #[test]
    fn exhausted_backend_logs_parse_failure_and_continues() {
        let ctx = SearchContext::new(tiny_config()).unwrap();
        let mut m = SearchMemory::new(ctx.config.budget, ctx.config.scale);
        let mut b = ScriptedBackend::new(vec![]);
        search_round(&mut m, &ctx, &mut b).unwrap();
        search_round(&mut m, &ctx, &mut b).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.records().iter().all(|r| r.rejection_reason == Some(RejectionReason::ParseFailure)));
    }

    #[test]
    fn all_over_budget_run_fails_with_full_log() {
        let dir = tempfile::tempdir().unwrap();
        let fixture = dir.path().join("big.txt");
        let text: Vec<String> = (0..10).map(|_| block(&arch(32))).collect();
        std::fs::write(&fixture, text.join(&format!("{FIXTURE_DELIMITER}\n"))).unwrap();
        let config = SearchConfig {
            rounds: 10,
            budget: 1000,
            backend: BackendKind::Scripted,
            fixture: Some(fixture),
            ..tiny_config()
        };
        let run_dir = dir.path().join("run");
        let out = run_search(&run_dir, config, false).unwrap();
        assert!(matches!(out.error, Some(Error::NoAcceptedCandidates)));
        assert_eq!(out.steps, 0);
        let (_, memory) = load_run(&run_dir).unwrap();
        assert_eq!(memory.len(), 10);
        assert!(memory.records().iter().all(|r| r.rejection_reason == Some(RejectionReason::OverBudget)));
    }

    #[test]
    fn run_directory_is_locked() {
        let dir = tempfile::tempdir().unwrap();
        let run = SearchRun::open(dir.path(), Some(tiny_config()), false, None).unwrap();
        assert!(matches!(
            SearchRun::open(dir.path(), None, true, None),
            Err(Error::Locked(_))
        ));
        drop(run);
        let resumed = SearchRun::open(dir.path(), None, true, None).unwrap();
        assert_eq!(resumed.config(), &tiny_config());
    }

    #[test]
    fn existing_run_needs_resume() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = SearchRun::open(dir.path(), Some(tiny_config()), false, None).unwrap();
        run.step().unwrap();
        drop(run);
        assert!(matches!(
            SearchRun::open(dir.path(), Some(tiny_config()), false, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scripted_resume_skips_consumed_responses() {
        let dir = tempfile::tempdir().unwrap();
        let fixture = dir.path().join("f.txt");
        let responses = ["junk".to_string(), block(&arch(8)), block(&arch(12)), block(&arch(16))];
        std::fs::write(&fixture, responses.join(&format!("{FIXTURE_DELIMITER}\n"))).unwrap();
        let config = SearchConfig {
            backend: BackendKind::Scripted,
            fixture: Some(fixture),
            ..tiny_config()
        };
        let straight = run_search(&dir.path().join("a"), config.clone(), false).unwrap();
        let mut run = SearchRun::open(&dir.path().join("b"), Some(config), false, None).unwrap();
        run.step().unwrap();
        drop(run);
        let resumed = run_search(&dir.path().join("b"), SearchConfig::default(), true).unwrap();
        assert_eq!(resumed.memory, straight.memory);
        let archs: Vec<_> = straight.memory.records().iter().map(|r| r.arch.unwrap().base_channel).collect();
        assert_eq!(archs, vec![8, 12, 16]);
    }

    #[test]
    fn strategy_candidates_fall_back_to_grid() {
        let space = StrategySpace::default();
        let (c, src) = strategy_candidates(&space, 100, None).unwrap();
        assert_eq!((c.len(), src), (27, CandidateSource::Grid));
        let mut m = MutationBackend::new(0);
        let (_, src) = strategy_candidates(&space, 100, Some(&mut m)).unwrap();
        assert_eq!(src, CandidateSource::Grid);
        let mut s = ScriptedBackend::new(vec![
            "```strategy\nlearning_rate = 1e-3\ndropout = 0.1\ndiffusion_steps = 100\n```\n".into(),
        ]);
        let (c, src) = strategy_candidates(&space, 100, Some(&mut s)).unwrap();
        assert_eq!((c, src), (vec![TrainStrategy::new(1e-3, 0.1, 100)], CandidateSource::Backend));
    }

    fn pilots() -> Vec<ArchitectureConfig> {
        [8, 12, 16, 20].map(|b| ArchitectureConfig::new(b, 1, [1, 1, 2, 2], [false; 4])).to_vec()
    }

    #[test]
    fn ground_truth_protocol_ranks_itself_perfectly() {
        let data = tiny_config().dataset.generate().unwrap();
        let pilots = pilots();
        let mut bench = PilotBench::new(&pilots, &data, tiny_protocol()).unwrap();
        let full = TrainStrategy::new(1e-3, 0.1, 20);
        let truth = bench.rfids(&full, 30, 4).unwrap();
        let other = TrainStrategy::new(2.5e-4, 0.3, 20);
        let before = bench.steps;
        let report = rank_strategies(&mut bench, &truth, &[other, full], 30, 4).unwrap();
        assert_eq!(bench.steps - before, 2 * 30 * pilots.len() as u64);
        assert_eq!(report.steps, 2 * 30 * pilots.len() as u64);
        let a = report.scores[1].accuracy.unwrap();
        assert_eq!((a.spearman, a.kendall), (1.0, 1.0));
        assert!((a.pearson - 1.0).abs() < 1e-12);
        assert_eq!(report.best, full);
    }

    #[test]
    fn choice_is_invariant_to_monotone_truth_transform() {
        let data = tiny_config().dataset.generate().unwrap();
        let pilots = pilots();
        let mut bench = PilotBench::new(&pilots, &data, tiny_protocol()).unwrap();
        let cands = [
            TrainStrategy::new(1e-3, 0.1, 20),
            TrainStrategy::new(5e-4, 0.2, 20),
            TrainStrategy::new(2.5e-4, 0.3, 20),
        ];
        let truth = bench.rfids(&TrainStrategy::new(1e-3, 0.1, 20), 30, 0).unwrap();
        let warped: Vec<f64> = truth.iter().map(|v| 5.0 * v.ln_1p() + v * v).collect();
        let a = rank_strategies(&mut bench, &truth, &cands, 10, 1).unwrap();
        let b = rank_strategies(&mut bench, &warped, &cands, 10, 1).unwrap();
        assert_eq!(a.best, b.best);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert_eq!(x.accuracy.map(|v| v.spearman), y.accuracy.map(|v| v.spearman));
        }
    }

    #[test]
    fn bench_needs_four_pilots() {
        let data = tiny_config().dataset.generate().unwrap();
        let three = &pilots()[..3];
        assert!(matches!(
            PilotBench::new(three, &data, tiny_protocol()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn ablation_at_full_budget_is_exact() {
        let data = tiny_config().dataset.generate().unwrap();
        let pilots = pilots();
        let mut bench = PilotBench::new(&pilots, &data, tiny_protocol()).unwrap();
        let full = TrainStrategy::new(1e-3, 0.1, 20);
        let named = [NamedStrategy {
            name: "standard".into(),
            strategy: full,
        }];
        let report = ablation_report(&mut bench, &full, 30, &named, &[10, 30], &[5]).unwrap();
        assert_eq!(report.steps, 30 * pilots.len() as u64);
        let row = report.row("standard", 30).unwrap();
        assert_eq!((row.spearman, row.kendall), (1.0, 1.0));
        assert!((row.pearson - 1.0).abs() < 1e-12);
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "strategy,budget,spearman,pearson,kendall");
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("standard,30,1.0000,1.0000,1.0000"));
    }

    #[test]
    fn median_counts_failures_as_worst() {
        assert_eq!(median(&[0.5, f64::NAN, 0.9]), 0.5);
        assert_eq!(median(&[0.1, 0.3]), 0.2);
    }
}
