//! Proposal engine: search spaces, the persistent search memory, prompt
//! assembly, response parsing and the interchangeable proposal backends.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::IndexedRandom as _;
use rand::Rng as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::denoiser::{ArchitectureConfig, TrainStrategy, STAGES};
use crate::diffusion::RunSettings;
use crate::error::{Error, Result};
use crate::flops::{self, Scale};
use crate::rng::{self, Stream};

/// Bounds of the ten searchable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub base_channel_min: u32,
    pub base_channel_max: u32,
    pub base_channel_step: u32,
    pub num_blocks_min: u32,
    pub num_blocks_max: u32,
    pub channel_mult_min: u32,
    pub channel_mult_max: u32,
}

impl SearchSpace {
    pub fn desk() -> Self {
        Self {
            base_channel_min: 8,
            base_channel_max: 32,
            base_channel_step: 4,
            num_blocks_min: 1,
            num_blocks_max: 2,
            channel_mult_min: 1,
            channel_mult_max: 3,
        }
    }

    pub fn cifar() -> Self {
        Self {
            base_channel_min: 64,
            base_channel_max: 256,
            base_channel_step: 32,
            num_blocks_min: 1,
            num_blocks_max: 4,
            channel_mult_min: 1,
            channel_mult_max: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probe = ArchitectureConfig::new(
            self.base_channel_min,
            self.num_blocks_min,
            [self.channel_mult_min; STAGES],
            [false; STAGES],
        );
        let top = ArchitectureConfig::new(
            self.base_channel_max,
            self.num_blocks_max,
            [self.channel_mult_max; STAGES],
            [false; STAGES],
        );
        probe.validate().and(top.validate()).map_err(|e| Error::Config(format!("search space: {e}")))?;
        if self.base_channel_step == 0 || (self.base_channel_max - self.base_channel_min) % self.base_channel_step != 0 {
            return Err(Error::Config(
                "search space: base_channel_step must divide the base_channel range".into(),
            ));
        }
        if self.base_channel_min > self.base_channel_max
            || self.num_blocks_min > self.num_blocks_max
            || self.channel_mult_min > self.channel_mult_max
        {
            return Err(Error::Config("search space: a minimum exceeds its maximum".into()));
        }
        Ok(())
    }

    /// Range-checks a syntactically valid proposal.
    pub fn check(&self, arch: &ArchitectureConfig) -> Result<()> {
        let bc = arch.base_channel;
        if bc < self.base_channel_min || bc > self.base_channel_max || (bc - self.base_channel_min) % self.base_channel_step != 0 {
            return Err(Error::RangeViolation(format!(
                "base_channel {bc} is not in {}..={} step {}",
                self.base_channel_min, self.base_channel_max, self.base_channel_step
            )));
        }
        if arch.num_blocks < self.num_blocks_min || arch.num_blocks > self.num_blocks_max {
            return Err(Error::RangeViolation(format!(
                "num_blocks {} is not in {}..={}",
                arch.num_blocks, self.num_blocks_min, self.num_blocks_max
            )));
        }
        for (i, &m) in arch.channel_mult.iter().enumerate() {
            if m < self.channel_mult_min || m > self.channel_mult_max {
                return Err(Error::RangeViolation(format!(
                    "channel_mult_{i} {m} is not in {}..={}",
                    self.channel_mult_min, self.channel_mult_max
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, arch: &ArchitectureConfig) -> bool {
        self.check(arch).is_ok()
    }

    pub fn random(&self, rng: &mut rng::Rng) -> ArchitectureConfig {
        let steps = (self.base_channel_max - self.base_channel_min) / self.base_channel_step;
        let base = self.base_channel_min + self.base_channel_step * rng.random_range(0..=steps);
        let blocks = rng.random_range(self.num_blocks_min..=self.num_blocks_max);
        let mult = std::array::from_fn(|_| rng.random_range(self.channel_mult_min..=self.channel_mult_max));
        let attn = std::array::from_fn(|_| rng.random_bool(0.5));
        ArchitectureConfig::new(base, blocks, mult, attn)
    }

    /// Every in-space configuration differing from `arch` in exactly one field by one step.
    pub fn neighbors(&self, arch: &ArchitectureConfig) -> Vec<ArchitectureConfig> {
        let mut out = Vec::new();
        let mut push = |a: ArchitectureConfig| {
            if self.contains(&a) {
                out.push(a);
            }
        };
        for delta in [-1i64, 1] {
            let mut a = *arch;
            let bc = arch.base_channel as i64 + delta * self.base_channel_step as i64;
            if bc > 0 {
                a.base_channel = bc as u32;
                push(a);
            }
            let mut a = *arch;
            let nb = arch.num_blocks as i64 + delta;
            if nb > 0 {
                a.num_blocks = nb as u32;
                push(a);
            }
            for i in 0..STAGES {
                let mut a = *arch;
                let m = arch.channel_mult[i] as i64 + delta;
                if m > 0 {
                    a.channel_mult[i] = m as u32;
                    push(a);
                }
            }
        }
        for i in 0..STAGES {
            let mut a = *arch;
            a.attn[i] = !a.attn[i];
            push(a);
        }
        out
    }

    pub fn describe(&self) -> String {
        format!(
            "  base_channel: integer in [{}, {}], multiple of {} above {}\n\
             \x20 num_blocks: integer in [{}, {}]\n\
             \x20 channel_mult_0 .. channel_mult_3: integers in [{}, {}]\n\
             \x20 attn_0 .. attn_3: 0 or 1 (self-attention after each block of that stage)\n",
            self.base_channel_min,
            self.base_channel_max,
            self.base_channel_step,
            self.base_channel_min,
            self.num_blocks_min,
            self.num_blocks_max,
            self.channel_mult_min,
            self.channel_mult_max,
        )
    }
}

/// Bounds of the three searchable training-strategy fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpace {
    pub learning_rate_min: f64,
    pub learning_rate_max: f64,
    pub dropout_min: f64,
    pub dropout_max: f64,
    pub diffusion_steps_min: usize,
    pub diffusion_steps_max: usize,
}

impl Default for StrategySpace {
    fn default() -> Self {
        Self {
            learning_rate_min: 2.5e-4,
            learning_rate_max: 1e-3,
            dropout_min: 0.1,
            dropout_max: 0.3,
            diffusion_steps_min: 100,
            diffusion_steps_max: 1000,
        }
    }
}

impl StrategySpace {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate_min > 0.0
            && self.learning_rate_min <= self.learning_rate_max
            && self.learning_rate_max.is_finite()
            && (0.0..1.0).contains(&self.dropout_min)
            && (0.0..1.0).contains(&self.dropout_max)
            && self.dropout_min <= self.dropout_max
            && self.diffusion_steps_min >= 1
            && self.diffusion_steps_min <= self.diffusion_steps_max;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("strategy space: inconsistent bounds".into()))
        }
    }

    pub fn check(&self, s: &TrainStrategy) -> Result<()> {
        if !(self.learning_rate_min..=self.learning_rate_max).contains(&s.learning_rate)
            || !(self.dropout_min..=self.dropout_max).contains(&s.dropout)
            || !(self.diffusion_steps_min..=self.diffusion_steps_max).contains(&s.diffusion_steps)
        {
            return Err(Error::RangeViolation(format!(
                "strategy lr={} dropout={} steps={} is outside the strategy space",
                s.learning_rate, s.dropout, s.diffusion_steps
            )));
        }
        Ok(())
    }

    /// Three values per field (learning rate and steps geometric, dropout
    /// linear), crossed into 27 strategies.
    pub fn grid(&self) -> Vec<TrainStrategy> {
        let geo = |a: f64, b: f64| [a, (a * b).sqrt(), b];
        let lrs = geo(self.learning_rate_min, self.learning_rate_max);
        let drops = [
            self.dropout_min,
            0.5 * (self.dropout_min + self.dropout_max),
            self.dropout_max,
        ];
        let steps = geo(self.diffusion_steps_min as f64, self.diffusion_steps_max as f64).map(|v| v.round() as usize);
        let mut out = Vec::with_capacity(27);
        for &lr in &lrs {
            for &d in &drops {
                for &t in &steps {
                    out.push(TrainStrategy::new(lr, d, t));
                }
            }
        }
        out
    }

    pub fn describe(&self) -> String {
        format!(
            "  learning_rate: real in [{:e}, {:e}]\n\
             \x20 dropout: real in [{}, {}]\n\
             \x20 diffusion_steps: integer in [{}, {}]\n",
            self.learning_rate_min,
            self.learning_rate_max,
            self.dropout_min,
            self.dropout_max,
            self.diffusion_steps_min,
            self.diffusion_steps_max,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    OverBudget,
    ParseFailure,
    TrainingDiverged,
}

impl RejectionReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::OverBudget => "over_budget",
            Self::ParseFailure => "parse_failure",
            Self::TrainingDiverged => "training_diverged",
        }
    }
}

/// `+∞` is written as JSON `null`.
mod rfid_serde {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// One evaluated (or rejected) proposal. `arch` and `flops` are absent only
/// when no proposal could be parsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRecord {
    pub round: u64,
    pub arch: Option<ArchitectureConfig>,
    pub flops: Option<u64>,
    #[serde(with = "rfid_serde")]
    pub rfid: f64,
    pub accepted: bool,
    pub rejection_reason: Option<RejectionReason>,
}

impl SearchRecord {
    pub fn accepted(round: u64, arch: ArchitectureConfig, flops: u64, rfid: f64) -> Self {
        Self {
            round,
            arch: Some(arch),
            flops: Some(flops),
            rfid,
            accepted: true,
            rejection_reason: None,
        }
    }

    pub fn rejected(round: u64, arch: Option<ArchitectureConfig>, flops: Option<u64>, reason: RejectionReason) -> Self {
        Self {
            round,
            arch,
            flops,
            rfid: f64::INFINITY,
            accepted: false,
            rejection_reason: Some(reason),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

/// The ordered, append-only record list fed back to the proposer.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchMemory {
    pub budget: u64,
    pub scale: Scale,
    records: Vec<SearchRecord>,
}

impl SearchMemory {
    pub fn new(budget: u64, scale: Scale) -> Self {
        Self {
            budget,
            scale,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[SearchRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index of the next round to run.
    pub fn next_round(&self) -> u64 {
        self.records.last().map_or(0, |r| r.round + 1)
    }

    pub fn push(&mut self, record: SearchRecord) -> Result<()> {
        if !self.records.is_empty() && record.round < self.next_round() {
            return Err(Error::Precondition(format!(
                "record round {} does not follow round {}",
                record.round,
                self.next_round() - 1
            )));
        }
        if record.accepted && !(record.rfid.is_finite() && record.flops.is_some_and(|f| f <= self.budget)) {
            return Err(Error::Precondition(
                "an accepted record needs a finite rfid and flops within budget".into(),
            ));
        }
        self.records.push(record);
        Ok(())
    }

    /// The lowest-RFID accepted record; ties go to fewer FLOPs, then the earlier round.
    pub fn best(&self) -> Option<&SearchRecord> {
        self.records
            .iter()
            .filter(|r| r.accepted && r.rfid.is_finite())
            .min_by(|a, b| {
                a.rfid
                    .total_cmp(&b.rfid)
                    .then(a.flops.cmp(&b.flops))
                    .then(a.round.cmp(&b.round))
            })
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| r.to_json_line() + "\n").collect()
    }

    pub fn from_jsonl(text: &str, budget: u64, scale: Scale) -> Result<Self> {
        let mut m = Self::new(budget, scale);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SearchRecord = serde_json::from_str(line)
                .map_err(|e| Error::Parse(format!("memory log line {}: {e}", i + 1)))?;
            m.push(rec)?;
        }
        Ok(m)
    }

    /// Returns the feedback line shown to the proposer for one record.
    pub fn describe_record(&self, r: &SearchRecord) -> String {
        let arch = r.arch.map_or_else(|| "no valid proposal".to_string(), |a| a.to_string());
        let flops = r.flops.map_or_else(|| "-".to_string(), |f| f.to_string());
        match r.rejection_reason {
            None => format!("round {}: {arch} | flops {flops} | rfid {:.6} | accepted", r.round, r.rfid),
            Some(RejectionReason::OverBudget) => {
                let note = match (r.arch, r.flops) {
                    (Some(a), Some(f)) => flops_violation_feedback(&a, self.budget, f).unwrap_or_default(),
                    _ => String::new(),
                };
                format!("round {}: {arch} | flops {flops} | rejected: over_budget | {note}", r.round)
            }
            Some(reason) => format!("round {}: {arch} | flops {flops} | rejected: {}", r.round, reason.as_str()),
        }
    }
}

/// File-backed memory: every append is one JSON line followed by an fsync.
#[derive(Debug)]
pub struct MemoryLog {
    path: PathBuf,
    file: File,
    memory: SearchMemory,
}

impl MemoryLog {
    /// Opens (creating if needed) the log at `path` and replays existing records.
    pub fn open(path: &Path, budget: u64, scale: Scale) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
        };
        let memory = SearchMemory::from_jsonl(&text, budget, scale)?;
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(Error::Parse(format!("{} ends with a partial line", path.display())));
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            memory,
        })
    }

    pub fn memory(&self) -> &SearchMemory {
        &self.memory
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: SearchRecord) -> Result<()> {
        let line = record.to_json_line() + "\n";
        self.memory.push(record)?;
        let ctx = || format!("appending to {}", self.path.display());
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(ctx(), e))?;
        self.file.sync_data().map_err(|e| Error::io(ctx(), e))?;
        Ok(())
    }
}

/// Message for a proposal whose estimate exceeds the budget.
pub fn flops_violation_feedback(arch: &ArchitectureConfig, budget: u64, estimate: u64) -> Result<String> {
    if estimate <= budget {
        return Err(Error::Precondition(format!(
            "estimate {estimate} is within the budget {budget}"
        )));
    }
    Ok(format!(
        "{arch} needs {estimate} MACs, above the budget of {budget} MACs; propose a smaller configuration"
    ))
}

const ARCH_FENCE: &str = "arch";
const STRATEGY_FENCE: &str = "strategy";

pub fn build_arch_prompt(space: &SearchSpace, settings: &RunSettings, memory: &SearchMemory) -> String {
    let mut p = String::new();
    p.push_str("You are designing the UNet noise predictor of a denoising diffusion model.\n");
    p.push_str("Propose one architecture from this space of ten parameters:\n");
    p.push_str(&space.describe());
    p.push_str(&format!(
        "FLOPs budget: {} MACs per sample ({} estimator). Proposals above the budget are rejected without training.\n",
        memory.budget, memory.scale
    ));
    p.push_str(&format!(
        "Diffusion settings: {:?} schedule, {} training steps, {} sampling steps, batch size {}.\n",
        settings.schedule_kind, settings.steps, settings.sample_steps, settings.batch_size
    ));
    p.push_str("Candidates are ranked by RFID, the Frechet distance after a short fixed training run; lower is better.\n");
    if !memory.is_empty() {
        p.push_str("\nHistory:\n");
        for r in memory.records() {
            p.push_str("  ");
            p.push_str(&memory.describe_record(r));
            p.push('\n');
        }
        if let Some(best) = memory.best() {
            p.push_str(&format!("Best so far: {}\n", memory.describe_record(best)));
        }
    }
    p.push_str(&format!(
        "\nAnswer with exactly one fenced block in this format:\n```{ARCH_FENCE}\n{}```\n",
        ArchitectureConfig::new(space.base_channel_min, space.num_blocks_min, [space.channel_mult_min; STAGES], [false; STAGES])
            .to_block()
            .lines()
            .map(|l| l.split(" = ").next().unwrap_or(l).to_string() + " = <value>\n")
            .collect::<String>()
    ));
    p
}

pub fn build_strategy_prompt(space: &StrategySpace, budget: u64) -> Result<String> {
    if budget == 0 {
        return Err(Error::Precondition("strategy cost budget must be positive".into()));
    }
    let mut p = String::new();
    p.push_str("You are choosing the training strategy used to rank diffusion-model architectures by truncated training.\n");
    p.push_str("A good strategy makes the ranking after a short run agree with the ranking after full training.\n");
    p.push_str("Searchable fields:\n");
    p.push_str(&space.describe());
    p.push_str(&format!("Cost budget: {budget} training steps per architecture.\n"));
    p.push_str(&format!(
        "\nAnswer with one or more fenced blocks in this format:\n```{STRATEGY_FENCE}\nlearning_rate = <value>\ndropout = <value>\ndiffusion_steps = <value>\n```\n"
    ));
    Ok(p)
}

/// Bodies of every fenced block, in order of appearance.
pub fn fenced_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        if line.trim_start().starts_with("```") {
            match current.take() {
                Some(body) => blocks.push(body),
                None => current = Some(String::new()),
            }
        } else if let Some(body) = current.as_mut() {
            body.push_str(line);
            body.push('\n');
        }
    }
    blocks
}

pub fn parse_arch_response(text: &str, space: &SearchSpace) -> Result<ArchitectureConfig> {
    let blocks = fenced_blocks(text);
    let last = blocks
        .last()
        .ok_or_else(|| Error::Parse("response contains no fenced block".into()))?;
    let arch = ArchitectureConfig::from_block(last)?;
    space.check(&arch)?;
    Ok(arch)
}

/// Every fenced block must hold a strategy inside the space.
pub fn parse_strategy_response(text: &str, space: &StrategySpace) -> Result<Vec<TrainStrategy>> {
    let blocks = fenced_blocks(text);
    if blocks.is_empty() {
        return Err(Error::Parse("response contains no fenced block".into()));
    }
    blocks
        .iter()
        .map(|b| {
            let s = TrainStrategy::from_block(b)?;
            s.validate().map_err(|e| Error::RangeViolation(e.to_string()))?;
            space.check(&s)?;
            Ok(s)
        })
        .collect()
}

/// What a backend is asked to produce.
#[derive(Debug, Clone, Copy)]
pub enum RequestKind<'a> {
    Architecture {
        space: &'a SearchSpace,
        settings: &'a RunSettings,
        memory: &'a SearchMemory,
        data_length: usize,
    },
    Strategy {
        space: &'a StrategySpace,
        budget: u64,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ProposalRequest<'a> {
    pub kind: RequestKind<'a>,
    pub round: u64,
}

impl ProposalRequest<'_> {
    pub fn prompt(&self) -> Result<String> {
        match self.kind {
            RequestKind::Architecture { space, settings, memory, .. } => Ok(build_arch_prompt(space, settings, memory)),
            RequestKind::Strategy { space, budget } => build_strategy_prompt(space, budget),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Architecture(ArchitectureConfig),
    Strategies(Vec<TrainStrategy>),
}

/// A completed proposal attempt sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyExchange {
    /// The prompt of the final attempt.
    pub prompt: String,
    pub raw_response: String,
    pub parsed: Option<Proposal>,
    pub backend_id: String,
    pub retry_count: u32,
    pub errors: Vec<String>,
}

pub trait ProposalBackend {
    fn id(&self) -> &str;

    /// Returns raw response text for `prompt`. `attempt` counts from 0.
    fn complete(&mut self, request: &ProposalRequest<'_>, prompt: &str, attempt: u32) -> Result<String>;

    /// Called on resume with the number of calls an earlier process already made.
    fn resume_after(&mut self, _calls: usize) {}
}

pub const MAX_ATTEMPTS: u32 = 3;

/// Asks `backend` for a proposal, re-prompting with the parse error up to
/// [`MAX_ATTEMPTS`] times. Backend failures are returned as errors.
pub fn propose(backend: &mut dyn ProposalBackend, request: &ProposalRequest<'_>) -> Result<ProxyExchange> {
    let base = request.prompt()?;
    let mut prompt = base.clone();
    let mut errors = Vec::new();
    let mut raw = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        raw = backend.complete(request, &prompt, attempt)?;
        let parsed = match request.kind {
            RequestKind::Architecture { space, .. } => parse_arch_response(&raw, space).map(Proposal::Architecture),
            RequestKind::Strategy { space, .. } => parse_strategy_response(&raw, space).map(Proposal::Strategies),
        };
        match parsed {
            Ok(p) => {
                return Ok(ProxyExchange {
                    prompt,
                    raw_response: raw,
                    parsed: Some(p),
                    backend_id: backend.id().to_string(),
                    retry_count: attempt,
                    errors,
                })
            }
            Err(e) => {
                errors.push(e.to_string());
                prompt = format!(
                    "{base}\nYour previous answer was rejected: {e}\nReply again with one valid fenced block.\n"
                );
            }
        }
    }
    Ok(ProxyExchange {
        prompt,
        raw_response: raw,
        parsed: None,
        backend_id: backend.id().to_string(),
        retry_count: MAX_ATTEMPTS - 1,
        errors,
    })
}

fn fence(tag: &str, body: &str) -> String {
    format!("```{tag}\n{body}```\n")
}

/// Offline proposer: one-step mutations of the best record so far.
#[derive(Debug, Clone)]
pub struct MutationBackend {
    seed: u64,
}

/// Rejection-sampling attempts for a feasible starting point.
const FEASIBLE_DRAWS: usize = 100_000;

impl MutationBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng_for(&self, round: u64, attempt: u32) -> rng::Rng {
        rng::stream_rng(
            rng::derive_seed(self.seed, Stream::Proposal, round),
            Stream::Proposal,
            attempt as u64,
        )
    }

    /// The configuration this backend would propose.
    pub fn propose_arch(
        &self,
        space: &SearchSpace,
        memory: &SearchMemory,
        data_length: usize,
        round: u64,
        attempt: u32,
    ) -> Result<ArchitectureConfig> {
        let mut r = self.rng_for(round, attempt);
        let feasible = |a: &ArchitectureConfig| {
            flops::estimate(a, memory.scale, data_length).is_ok_and(|f| f.total <= memory.budget)
        };
        let Some(parent) = memory.best().and_then(|b| b.arch) else {
            for _ in 0..FEASIBLE_DRAWS {
                let a = space.random(&mut r);
                if feasible(&a) {
                    return Ok(a);
                }
            }
            return Err(Error::BackendUnavailable(
                "no configuration in the space fits the budget".into(),
            ));
        };
        let neighbors = space.neighbors(&parent);
        let seen = |a: &ArchitectureConfig| memory.records().iter().any(|rec| rec.arch.as_ref() == Some(a));
        // Prefer unexplored, feasible neighbors; fall back to any neighbor.
        let fresh: Vec<_> = neighbors.iter().copied().filter(|a| feasible(a) && !seen(a)).collect();
        let pool = if !fresh.is_empty() {
            fresh
        } else {
            let ok: Vec<_> = neighbors.iter().copied().filter(feasible).collect();
            if ok.is_empty() {
                neighbors
            } else {
                ok
            }
        };
        pool.choose(&mut r)
            .copied()
            .ok_or_else(|| Error::BackendUnavailable("configuration has no neighbors in the space".into()))
    }
}

impl ProposalBackend for MutationBackend {
    fn id(&self) -> &str {
        "mutation"
    }

    fn complete(&mut self, request: &ProposalRequest<'_>, _prompt: &str, attempt: u32) -> Result<String> {
        match request.kind {
            RequestKind::Architecture {
                space,
                memory,
                data_length,
                ..
            } => {
                let arch = self.propose_arch(space, memory, data_length, request.round, attempt)?;
                Ok(fence(ARCH_FENCE, &arch.to_block()))
            }
            RequestKind::Strategy { .. } => Err(Error::BackendUnavailable(
                "the mutation backend proposes architectures only".into(),
            )),
        }
    }
}

/// Separates responses in a scripted fixture file.
pub const FIXTURE_DELIMITER: &str = "---8<---";

/// Replays canned responses in order, one per call.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    responses: Vec<String>,
    next: usize,
}

impl ScriptedBackend {
    pub fn new(responses: Vec<String>) -> Self {
        Self { responses, next: 0 }
    }

    /// Splits `text` on lines equal to [`FIXTURE_DELIMITER`].
    pub fn parse_fixture(text: &str) -> Self {
        let mut responses = vec![String::new()];
        for line in text.lines() {
            if line.trim() == FIXTURE_DELIMITER {
                responses.push(String::new());
            } else {
                let cur = responses.last_mut().expect("never empty");
                cur.push_str(line);
                cur.push('\n');
            }
        }
        responses.retain(|r| !r.trim().is_empty());
        Self::new(responses)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading fixture {}", path.display()), e))?;
        Ok(Self::parse_fixture(&text))
    }

    pub fn remaining(&self) -> usize {
        self.responses.len() - self.next
    }

    /// Number of responses consumed so far.
    pub fn position(&self) -> usize {
        self.next
    }

    pub fn skip(&mut self, n: usize) {
        self.next = (self.next + n).min(self.responses.len());
    }
}

impl ProposalBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&mut self, _request: &ProposalRequest<'_>, _prompt: &str, _attempt: u32) -> Result<String> {
        let r = self
            .responses
            .get(self.next)
            .cloned()
            .ok_or(Error::FixtureExhausted(self.responses.len()))?;
        self.next += 1;
        Ok(r)
    }

    fn resume_after(&mut self, calls: usize) {
        self.skip(calls);
    }
}

pub const ENV_URL: &str = "DIFFNAS_LLM_URL";
pub const ENV_KEY: &str = "DIFFNAS_LLM_KEY";
pub const ENV_MODEL: &str = "DIFFNAS_LLM_MODEL";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
const DEFAULT_MODEL: &str = "gpt-4";

/// Chat-completion client. Sends the prompt as a single user message.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    url: String,
    key: String,
    model: String,
    timeout: Duration,
}

impl RemoteBackend {
    pub fn new(url: String, key: String, model: String, timeout: Duration) -> Self {
        Self {
            url,
            key,
            model,
            timeout,
        }
    }

    /// Reads the endpoint, credential and optional model name from the environment.
    pub fn from_env(timeout: Duration) -> Result<Self> {
        let var = |k: &str| {
            std::env::var(k)
                .ok()
                .filter(|v| !v.is_empty())
                .ok_or_else(|| Error::BackendUnavailable(format!("{k} is not set")))
        };
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| DEFAULT_MODEL.to_string());
        Ok(Self::new(var(ENV_URL)?, var(ENV_KEY)?, model, timeout))
    }

    fn request_once(&self, prompt: &str) -> std::result::Result<String, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut resp = agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.key))
            .send_json(&body)
            .map_err(|e| e.to_string())?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

impl ProposalBackend for RemoteBackend {
    fn id(&self) -> &str {
        "remote"
    }

    fn complete(&mut self, _request: &ProposalRequest<'_>, prompt: &str, _attempt: u32) -> Result<String> {
        // One reconnection attempt after a failed request.
        self.request_once(prompt)
            .or_else(|_| self.request_once(prompt))
            .map_err(Error::BackendUnavailable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{ScheduleKind, VarianceMode};
    use proptest::prelude::*;

    fn settings() -> RunSettings {
        RunSettings {
            schedule_kind: ScheduleKind::Linear,
            steps: 1000,
            sample_steps: 20,
            batch_size: 32,
            variance_mode: VarianceMode::Marginal,
        }
    }

    fn arch(base: u32) -> ArchitectureConfig {
        ArchitectureConfig::new(base, 1, [1, 2, 2, 2], [false, true, false, false])
    }

    fn arch_request<'a>(
        space: &'a SearchSpace,
        settings: &'a RunSettings,
        memory: &'a SearchMemory,
        round: u64,
    ) -> ProposalRequest<'a> {
        ProposalRequest {
            kind: RequestKind::Architecture {
                space,
                settings,
                memory,
                data_length: 16,
            },
            round,
        }
    }

    #[test]
    fn zero_shot_prompt_has_no_history() {
        let m = SearchMemory::new(500_000, Scale::Desk);
        let p = build_arch_prompt(&SearchSpace::desk(), &settings(), &m);
        assert!(p.contains("500000 MACs"));
        assert!(p.contains("base_channel: integer in [8, 32]"));
        assert!(!p.contains("History"));
        assert_eq!(p, build_arch_prompt(&SearchSpace::desk(), &settings(), &m));
    }

    #[test]
    fn prompt_reports_over_budget_records() {
        let mut m = SearchMemory::new(100, Scale::Desk);
        m.push(SearchRecord::rejected(0, Some(arch(16)), Some(250), RejectionReason::OverBudget))
            .unwrap();
        let p = build_arch_prompt(&SearchSpace::desk(), &settings(), &m);
        assert!(p.contains("History"));
        assert!(p.contains(&flops_violation_feedback(&arch(16), 100, 250).unwrap()));
    }

    #[test]
    fn strategy_prompt_states_budget_and_ranges() {
        let space = StrategySpace::default();
        let p = build_strategy_prompt(&space, 1234).unwrap();
        assert_eq!(p, build_strategy_prompt(&space, 1234).unwrap());
        assert!(p.contains("1234 training steps"));
        assert!(build_strategy_prompt(&space, 0).is_err());
        // Read the bounds back out of the rendered text.
        let bounds = |key: &str| -> (f64, f64) {
            let line = p.lines().find(|l| l.trim_start().starts_with(key)).unwrap();
            let inner = &line[line.find('[').unwrap() + 1..line.find(']').unwrap()];
            let (a, b) = inner.split_once(',').unwrap();
            (a.trim().parse().unwrap(), b.trim().parse().unwrap())
        };
        assert_eq!(bounds("learning_rate"), (space.learning_rate_min, space.learning_rate_max));
        assert_eq!(bounds("dropout"), (space.dropout_min, space.dropout_max));
        assert_eq!(
            bounds("diffusion_steps"),
            (space.diffusion_steps_min as f64, space.diffusion_steps_max as f64)
        );
    }

    #[test]
    fn parse_happy_path_and_errors() {
        let space = SearchSpace::desk();
        let a = arch(12);
        let text = format!("sure\n{}", fence("arch", &a.to_block()));
        assert_eq!(parse_arch_response(&text, &space).unwrap(), a);
        let huge = text.replace("base_channel = 12", "base_channel = 100000");
        assert!(matches!(parse_arch_response(&huge, &space), Err(Error::RangeViolation(_))));
        assert!(matches!(parse_arch_response("no block here", &space), Err(Error::Parse(_))));
        let missing = text.replace("num_blocks = 1\n", "");
        assert!(matches!(parse_arch_response(&missing, &space), Err(Error::Parse(_))));
        let not_int = text.replace("num_blocks = 1", "num_blocks = two");
        assert!(matches!(parse_arch_response(&not_int, &space), Err(Error::Parse(_))));
    }

    #[test]
    fn last_block_wins() {
        let space = SearchSpace::desk();
        let text = format!(
            "first idea\n{}on reflection\n{}",
            fence("arch", &arch(8).to_block()),
            fence("arch", &arch(20).to_block())
        );
        assert_eq!(parse_arch_response(&text, &space).unwrap().base_channel, 20);
    }

    #[test]
    fn strategy_parsing() {
        let space = StrategySpace::default();
        let text = "```strategy\nlearning_rate = 5e-4\ndropout = 0.2\ndiffusion_steps = 300\n```\n";
        assert_eq!(parse_strategy_response(text, &space).unwrap(), vec![TrainStrategy::new(5e-4, 0.2, 300)]);
        let bad = text.replace("0.2", "0.9");
        assert!(matches!(parse_strategy_response(&bad, &space), Err(Error::RangeViolation(_))));
        assert_eq!(space.grid().len(), 27);
        assert!(space.grid().iter().all(|s| space.check(s).is_ok()));
    }

    #[test]
    fn feedback_contract() {
        let a = ArchitectureConfig::new(128, 2, [1, 2, 2, 2], [false, true, false, false]);
        let msg = flops_violation_feedback(&a, 6_060_000_000, 7_000_000_000).unwrap();
        assert!(msg.contains("7000000000") && msg.contains("6060000000"));
        assert!(matches!(flops_violation_feedback(&a, 10, 10), Err(Error::Precondition(_))));
    }

    #[test]
    fn feedback_survives_serialization() {
        let mut m = SearchMemory::new(100, Scale::Desk);
        m.push(SearchRecord::rejected(0, Some(arch(16)), Some(250), RejectionReason::OverBudget))
            .unwrap();
        m.push(SearchRecord::accepted(1, arch(8), 90, 0.25)).unwrap();
        m.push(SearchRecord::rejected(2, None, None, RejectionReason::ParseFailure))
            .unwrap();
        let reloaded = SearchMemory::from_jsonl(&m.to_jsonl(), 100, Scale::Desk).unwrap();
        assert_eq!(reloaded, m);
        for (a, b) in m.records().iter().zip(reloaded.records()) {
            assert_eq!(m.describe_record(a), reloaded.describe_record(b));
        }
        assert!(m.to_jsonl().lines().next().unwrap().contains("\"rfid\":null"));
    }

    #[test]
    fn memory_is_append_only() {
        let mut m = SearchMemory::new(100, Scale::Desk);
        m.push(SearchRecord::accepted(0, arch(8), 90, 0.5)).unwrap();
        assert!(m.push(SearchRecord::accepted(0, arch(8), 90, 0.5)).is_err());
        assert!(m.push(SearchRecord::accepted(1, arch(8), 190, 0.5)).is_err());
        assert!(m.push(SearchRecord::accepted(1, arch(8), 90, f64::INFINITY)).is_err());
        assert_eq!(m.next_round(), 1);
    }

    #[test]
    fn memory_log_appends_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.jsonl");
        let mut log = MemoryLog::open(&path, 100, Scale::Desk).unwrap();
        log.append(SearchRecord::accepted(0, arch(8), 90, 0.5)).unwrap();
        let first = std::fs::read_to_string(&path).unwrap();
        log.append(SearchRecord::rejected(1, Some(arch(32)), Some(900), RejectionReason::OverBudget))
            .unwrap();
        let second = std::fs::read_to_string(&path).unwrap();
        assert!(second.starts_with(&first) && second.len() > first.len());
        drop(log);
        let log = MemoryLog::open(&path, 100, Scale::Desk).unwrap();
        assert_eq!(log.memory().len(), 2);
        std::fs::write(&path, "{\"round\":0").unwrap();
        assert!(MemoryLog::open(&path, 100, Scale::Desk).is_err());
    }

    #[test]
    fn scripted_backend_runs_out() {
        let fixture = format!("a\n{FIXTURE_DELIMITER}\nb\n{FIXTURE_DELIMITER}\nc\n");
        let mut b = ScriptedBackend::parse_fixture(&fixture);
        let space = SearchSpace::desk();
        let s = settings();
        let m = SearchMemory::new(1, Scale::Desk);
        let req = arch_request(&space, &s, &m, 0);
        for expected in ["a\n", "b\n", "c\n"] {
            assert_eq!(b.complete(&req, "", 0).unwrap(), expected);
        }
        assert!(matches!(b.complete(&req, "", 0), Err(Error::FixtureExhausted(3))));
    }

    #[test]
    fn propose_retries_with_error_feedback() {
        let space = SearchSpace::desk();
        let s = settings();
        let m = SearchMemory::new(1, Scale::Desk);
        let req = arch_request(&space, &s, &m, 0);
        let good = fence("arch", &arch(8).to_block());
        let mut b = ScriptedBackend::new(vec!["garbage".into(), good.clone()]);
        let ex = propose(&mut b, &req).unwrap();
        assert_eq!(ex.parsed, Some(Proposal::Architecture(arch(8))));
        assert_eq!(ex.retry_count, 1);
        assert!(ex.prompt.contains("rejected: "));
        assert_eq!(ex.backend_id, "scripted");

        let mut b = ScriptedBackend::new(vec!["x".into(), "y".into(), "z".into(), good]);
        let ex = propose(&mut b, &req).unwrap();
        assert!(ex.parsed.is_none());
        assert_eq!((ex.errors.len(), b.remaining()), (3, 1));
    }

    fn budget_for(a: &ArchitectureConfig) -> u64 {
        flops::flops_desk(a, 16).unwrap().total
    }

    #[test]
    fn mutation_is_deterministic_and_single_step() {
        let space = SearchSpace::desk();
        let parent = arch(16);
        let mut m = SearchMemory::new(10 * budget_for(&parent), Scale::Desk);
        m.push(SearchRecord::accepted(0, parent, budget_for(&parent), 0.3)).unwrap();
        let b = MutationBackend::new(7);
        let a = b.propose_arch(&space, &m, 16, 1, 0).unwrap();
        assert_eq!(a, b.propose_arch(&space, &m, 16, 1, 0).unwrap());
        assert!(space.neighbors(&parent).contains(&a));
    }

    #[test]
    fn mutation_starts_inside_budget() {
        let space = SearchSpace::desk();
        let budget = budget_for(&ArchitectureConfig::new(12, 1, [1, 1, 2, 2], [false; 4]));
        let m = SearchMemory::new(budget, Scale::Desk);
        for round in 0..20 {
            let a = MutationBackend::new(round).propose_arch(&space, &m, 16, 0, 0).unwrap();
            assert!(space.contains(&a) && budget_for(&a) <= budget);
        }
        let m = SearchMemory::new(1, Scale::Desk);
        assert!(matches!(
            MutationBackend::new(0).propose_arch(&space, &m, 16, 0, 0),
            Err(Error::BackendUnavailable(_))
        ));
    }

    fn differing_fields(a: &ArchitectureConfig, b: &ArchitectureConfig) -> usize {
        usize::from(a.base_channel != b.base_channel)
            + usize::from(a.num_blocks != b.num_blocks)
            + (0..STAGES).filter(|&i| a.channel_mult[i] != b.channel_mult[i]).count()
            + (0..STAGES).filter(|&i| a.attn[i] != b.attn[i]).count()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn mutations_change_one_field_within_space(seed in any::<u64>(), round in 0u64..50) {
            let space = SearchSpace::desk();
            let parent = space.random(&mut rng::seeded(seed));
            let mut m = SearchMemory::new(u64::MAX, Scale::Desk);
            m.push(SearchRecord::accepted(0, parent, budget_for(&parent), 1.0)).unwrap();
            let child = MutationBackend::new(seed).propose_arch(&space, &m, 16, round, 0).unwrap();
            prop_assert!(space.contains(&child));
            prop_assert_eq!(differing_fields(&parent, &child), 1);
            let step_ok = child.base_channel.abs_diff(parent.base_channel) % space.base_channel_step == 0
                && child.base_channel.abs_diff(parent.base_channel) <= space.base_channel_step
                && child.num_blocks.abs_diff(parent.num_blocks) <= 1
                && (0..STAGES).all(|i| child.channel_mult[i].abs_diff(parent.channel_mult[i]) <= 1);
            prop_assert!(step_ok);
        }
    }

    #[test]
    fn remote_backend_needs_environment() {
        if std::env::var(ENV_URL).is_err() {
            assert!(matches!(
                RemoteBackend::from_env(DEFAULT_TIMEOUT),
                Err(Error::BackendUnavailable(_))
            ));
        }
    }
}
