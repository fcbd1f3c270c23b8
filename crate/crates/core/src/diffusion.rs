//! Training and sampling engine: forward noising, the ε-prediction update,
//! the ancestral reverse step, and synthetic 1-D datasets.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, TrainStrategy};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::schedule::{NoiseSchedule, ScheduleKind, VarianceMode};

/// The non-searched diffusion settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub schedule_kind: ScheduleKind,
    pub steps: usize,
    pub sample_steps: usize,
    pub batch_size: usize,
    pub variance_mode: VarianceMode,
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.sample_steps == 0 || self.sample_steps > self.steps {
            return Err(Error::InvalidRange(format!(
                "need 1 <= sample_steps ({}) <= steps ({})",
                self.sample_steps, self.steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidRange("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::build(self.schedule_kind, self.steps)?.with_variance(self.variance_mode))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SineMixture,
    GaussianMixture,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine_mixture" => Ok(Self::SineMixture),
            "gaussian_mixture" => Ok(Self::GaussianMixture),
            other => Err(Error::Parse(format!(
                "unknown dataset kind {other:?} (sine_mixture|gaussian_mixture)"
            ))),
        }
    }
}

/// Standard deviation of each gaussian_mixture component.
pub const MIXTURE_STD: f64 = 0.2;

/// Mean of gaussian_mixture component `k ∈ {0, 1}`: `±cos(2πp/L)`.
pub fn mixture_mean(component: usize, length: usize) -> Vec<f64> {
    let sign = if component == 0 { 1.0 } else { -1.0 };
    (0..length)
        .map(|p| sign * (TAU * p as f64 / length as f64).cos())
        .collect()
}

/// Single-channel signals sharing one length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub seed: u64,
    pub length: usize,
    pub samples: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_csv(&self) -> String {
        samples_to_csv(&self.samples)
    }
}

pub fn samples_to_csv(samples: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for s in samples {
        let row: Vec<String> = s.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn samples_from_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: bad number {v:?}", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first().map(|r: &Vec<f64>| r.len()) {
            if first != row.len() {
                return Err(Error::ShapeMismatch {
                    expected: first,
                    got: row.len(),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn gen_dataset(kind: DatasetKind, n: usize, length: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: n });
    }
    crate::denoiser::check_length(length)?;
    let mut r = rng::stream_rng(seed, rng::Stream::Dataset, 0);
    let samples = match kind {
        DatasetKind::SineMixture => (0..n)
            .map(|_| {
                let freq = r.random_range(1..=3) as f64;
                let phase = r.random_range(0.0..TAU);
                let amp = r.random_range(0.5..1.5);
                (0..length)
                    .map(|p| amp * (TAU * freq * p as f64 / length as f64 + phase).sin())
                    .collect()
            })
            .collect(),
        DatasetKind::GaussianMixture => {
            let means = [mixture_mean(0, length), mixture_mean(1, length)];
            (0..n)
                .map(|_| {
                    let k = usize::from(r.random_bool(0.5));
                    means[k]
                        .iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(&mut r);
                            m + MIXTURE_STD * z
                        })
                        .collect()
                })
                .collect()
        }
    };
    Ok(Dataset {
        kind,
        seed,
        length,
        samples,
    })
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·ε`.
pub fn forward_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            expected: x0.len(),
            got: eps.len(),
        });
    }
    let ab = schedule.alpha_bar_at(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Accumulates the batch-mean ε-prediction loss gradient into `params` and returns the loss.
fn accumulate_batch<S: AsRef<[f64]>>(
    params: &mut DenoiserParams,
    batch: &[S],
    schedule: &NoiseSchedule,
    dropout: f64,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientSamples { need: 1, got: 0 });
    }
    params.zero_grads();
    let steps = schedule.len();
    let n = batch.len();
    let mut xt = Vec::new();
    let mut noise = Vec::new();
    let mut ts = Vec::with_capacity(n);
    for x0 in batch {
        let x0 = x0.as_ref();
        let t = rng.random_range(1..=steps);
        let eps = rng::normal_vec(rng, x0.len());
        xt.extend(forward_sample(x0, t, &eps, schedule)?);
        noise.extend(eps);
        ts.push(schedule.model_timestep(t)?);
    }
    let pass = params.forward_batch(&xt, &ts, schedule.train_steps(), true, dropout, rng)?;
    let scale = 2.0 / n as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = pass
        .output
        .iter()
        .zip(&noise)
        .map(|(u, e)| {
            let r = u - e;
            loss += r * r;
            scale * r
        })
        .collect();
    params.backward(&pass, &grad)?;
    Ok(loss / n as f64)
}

/// One plain gradient-descent update `θ ← θ − λ∇θ loss`.
pub fn training_step<S: AsRef<[f64]>>(
    params: &mut DenoiserParams,
    batch: &[S],
    schedule: &NoiseSchedule,
    strategy: &TrainStrategy,
    rng: &mut Rng,
) -> Result<f64> {
    let mut opt = Optimizer::new(OptimizerKind::Sgd, params.len());
    opt.step(params, batch, schedule, strategy, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Gradient-descent driver holding any per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { len } else { 0 };
        Self {
            kind,
            first: vec![0.0; state],
            second: vec![0.0; state],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<S: AsRef<[f64]>>(
        &mut self,
        params: &mut DenoiserParams,
        batch: &[S],
        schedule: &NoiseSchedule,
        strategy: &TrainStrategy,
        rng: &mut Rng,
    ) -> Result<f64> {
        if !(strategy.learning_rate >= 0.0 && strategy.learning_rate.is_finite()) {
            return Err(Error::InvalidRange(format!(
                "learning rate must be non-negative, got {}",
                strategy.learning_rate
            )));
        }
        let loss = accumulate_batch(params, batch, schedule, strategy.dropout, rng)?;
        self.steps += 1;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.steps });
        }
        let lr = strategy.learning_rate;
        if lr == 0.0 {
            return Ok(loss);
        }
        match self.kind {
            OptimizerKind::Sgd => params.update_with(|v, g| {
                for (p, d) in v.iter_mut().zip(g) {
                    *p -= lr * d;
                }
            }),
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let (m, s) = (&mut self.first, &mut self.second);
                params.update_with(|v, g| {
                    for i in 0..v.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        s[i] = ADAM_BETA2 * s[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        v[i] -= lr * (m[i] / c1) / ((s[i] / c2).sqrt() + ADAM_EPS);
                    }
                });
            }
        }
        Ok(loss)
    }
}

/// Trains for `steps` updates on uniformly drawn minibatches; returns the loss trace.
#[allow(clippy::too_many_arguments)]
pub fn train(
    params: &mut DenoiserParams,
    data: &[Vec<f64>],
    schedule: &NoiseSchedule,
    strategy: &TrainStrategy,
    optimizer: OptimizerKind,
    steps: u64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InsufficientSamples { need: 1, got: 0 });
    }
    let mut opt = Optimizer::new(optimizer, params.len());
    let mut trace = Vec::with_capacity(steps as usize);
    let mut batch: Vec<&[f64]> = Vec::with_capacity(batch_size);
    for _ in 0..steps {
        batch.clear();
        for _ in 0..batch_size {
            batch.push(&data[rng.random_range(0..data.len())]);
        }
        trace.push(opt.step(params, &batch, schedule, strategy, rng)?);
    }
    Ok(trace)
}

pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{},{l:?}\n", i + 1));
    }
    s
}

/// Anything that predicts noise for a batch of samples sharing one layout.
pub trait NoisePredictor {
    /// `xs` holds `ts.len()` samples back to back; `ts` are training timesteps.
    fn predict_noise(&self, xs: &[f64], ts: &[usize], train_steps: usize) -> Result<Vec<f64>>;
}

impl NoisePredictor for DenoiserParams {
    fn predict_noise(&self, xs: &[f64], ts: &[usize], train_steps: usize) -> Result<Vec<f64>> {
        self.predict_batch(xs, ts, train_steps)
    }
}

/// `x_{t−1} = (x_t − (1−α_t)/sqrt(1−ᾱ_t)·U(x_t, t)) / sqrt(α_t) + σ_t ε`,
/// with the noise term dropped at `t = 1`.
pub fn sample_step<P: NoisePredictor + ?Sized>(
    x_t: &[f64],
    t: usize,
    model: &P,
    schedule: &NoiseSchedule,
    eps: &[f64],
) -> Result<Vec<f64>> {
    sample_step_batch(x_t, 1, t, model, schedule, eps)
}

/// [`sample_step`] over `n` samples stored back to back, all at step `t`.
pub fn sample_step_batch<P: NoisePredictor + ?Sized>(
    x_t: &[f64],
    n: usize,
    t: usize,
    model: &P,
    schedule: &NoiseSchedule,
    eps: &[f64],
) -> Result<Vec<f64>> {
    if x_t.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            expected: x_t.len(),
            got: eps.len(),
        });
    }
    let alpha = schedule.alpha_at(t)?;
    let ab = schedule.alpha_bar_at(t)?;
    let sigma = if t == 1 { 0.0 } else { schedule.sigma_at(t)? };
    let ts = vec![schedule.model_timestep(t)?; n];
    let pred = model.predict_noise(x_t, &ts, schedule.train_steps())?;
    if pred.len() != x_t.len() {
        return Err(Error::ShapeMismatch {
            expected: x_t.len(),
            got: pred.len(),
        });
    }
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    Ok(x_t
        .iter()
        .zip(&pred)
        .zip(eps)
        .map(|((x, u), e)| inv * (x - coef * u) + sigma * e)
        .collect())
}

/// Samples per batched reverse chain.
const SAMPLE_CHUNK: usize = 256;

/// Runs the reverse chain from `x_T ~ N(0, I)` over `respace(schedule, sample_steps)`.
/// Sample `i` draws all of its noise from its own stream, so outputs do not
/// depend on how samples are grouped.
pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    length: usize,
    schedule: &NoiseSchedule,
    n: usize,
    sample_steps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let spaced = schedule.respace(sample_steps)?;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(SAMPLE_CHUNK) {
        let count = SAMPLE_CHUNK.min(n - start);
        let mut streams: Vec<Rng> = (start..start + count)
            .map(|i| rng::stream_rng(seed, rng::Stream::Sampling, i as u64))
            .collect();
        let mut x: Vec<f64> = streams.iter_mut().flat_map(|r| rng::normal_vec(r, length)).collect();
        for t in (1..=spaced.len()).rev() {
            let eps: Vec<f64> = if t > 1 {
                streams.iter_mut().flat_map(|r| rng::normal_vec(r, length)).collect()
            } else {
                vec![0.0; x.len()]
            };
            x = sample_step_batch(&x, count, t, model, &spaced, &eps).map_err(|e| match e {
                Error::NonFiniteActivation(what) => Error::SamplingFailure(format!("{what} at t={t}")),
                other => other,
            })?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::SamplingFailure(format!("non-finite sample at t={t}")));
            }
        }
        out.extend(x.chunks_exact(length.max(1)).map(<[f64]>::to_vec));
    }
    Ok(out)
}
