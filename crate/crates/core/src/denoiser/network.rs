//! The realized 1-D UNet: parameter layout, forward pass with a replay tape,
//! and exact reverse-mode gradients.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::arch::{ArchitectureConfig, STAGES};
use super::layers::{self, Act, Attention, AttentionCache, Conv, Dense};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    TimeEmbedding,
    Conv,
    TimeProjection,
    Skip,
    Attention,
    Head,
}

/// A contiguous run of parameters sharing one initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub kind: LayerKind,
    pub offset: usize,
    pub len: usize,
    pub fan_in: usize,
    pub is_bias: bool,
    /// Starts at zero so the enclosing residual branch is the identity at init.
    pub zero_init: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ResBlock {
    pub conv1: Conv,
    pub time: Dense,
    pub conv2: Conv,
    pub skip: Option<Conv>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct StageLayout {
    pub width: usize,
    pub len: usize,
    pub blocks: Vec<(ResBlock, Option<Attention>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub features: usize,
    pub time1: Dense,
    pub time2: Dense,
    pub stem: Conv,
    pub encoder: Vec<StageLayout>,
    /// Indexed by stage; executed from the deepest stage upward.
    pub decoder: Vec<StageLayout>,
    pub head: Conv,
}

struct Allocator {
    next: usize,
    groups: Vec<ParamGroup>,
}

impl Allocator {
    fn take(&mut self, name: String, kind: LayerKind, len: usize, fan_in: usize, is_bias: bool) -> usize {
        let offset = self.next;
        self.next += len;
        self.groups.push(ParamGroup {
            name,
            kind,
            offset,
            len,
            fan_in,
            is_bias,
            zero_init: is_bias || kind == LayerKind::Head,
        });
        offset
    }

    fn zero_last_weight(&mut self) {
        let g = self.groups.iter_mut().rev().find(|g| !g.is_bias).expect("a weight group");
        g.zero_init = true;
    }

    fn conv(&mut self, name: &str, kind: LayerKind, cin: usize, cout: usize, kernel: usize) -> Conv {
        let weight = self.take(format!("{name}.weight"), kind, cout * cin * kernel, cin * kernel, false);
        let bias = self.take(format!("{name}.bias"), kind, cout, cin * kernel, true);
        Conv {
            weight,
            bias,
            cin,
            cout,
            kernel,
        }
    }

    fn dense(&mut self, name: &str, kind: LayerKind, input: usize, output: usize) -> Dense {
        let weight = self.take(format!("{name}.weight"), kind, output * input, input, false);
        let bias = self.take(format!("{name}.bias"), kind, output, input, true);
        Dense {
            weight,
            bias,
            input,
            output,
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, embed: usize) -> ResBlock {
        let conv1 = self.conv(&format!("{name}.conv1"), LayerKind::Conv, cin, cout, 3);
        let time = self.dense(&format!("{name}.time"), LayerKind::TimeProjection, embed, cout);
        let conv2 = self.conv(&format!("{name}.conv2"), LayerKind::Conv, cout, cout, 3);
        self.zero_last_weight();
        ResBlock {
            conv1,
            time,
            conv2,
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), LayerKind::Skip, cin, cout, 1)),
        }
    }

    fn attention(&mut self, name: &str, width: usize) -> Attention {
        let mut proj = |p: &str| self.conv(&format!("{name}.{p}"), LayerKind::Attention, width, width, 1);
        let (query, key, value, out) = (proj("query"), proj("key"), proj("value"), proj("out"));
        self.zero_last_weight();
        Attention {
            query,
            key,
            value,
            out,
            width,
        }
    }
}

impl Layout {
    pub(crate) fn new(arch: &ArchitectureConfig, data_length: usize) -> (Self, Vec<ParamGroup>, usize) {
        let mut alloc = Allocator {
            next: 0,
            groups: Vec::new(),
        };
        let features = arch.base_channel as usize;
        let embed = arch.embed_dim();
        let time1 = alloc.dense("time.fc1", LayerKind::TimeEmbedding, features, embed);
        let time2 = alloc.dense("time.fc2", LayerKind::TimeEmbedding, embed, embed);
        let w0 = arch.stage_width(0);
        let stem = alloc.conv("stem", LayerKind::Conv, 1, w0, 3);

        let mut encoder = Vec::with_capacity(STAGES);
        let mut width = w0;
        for stage in 0..STAGES {
            let out = arch.stage_width(stage);
            let mut blocks = Vec::new();
            for b in 0..arch.num_blocks as usize {
                let name = format!("enc{stage}.block{b}");
                let res = alloc.res_block(&name, width, out, embed);
                width = out;
                let attn = arch.attn[stage].then(|| alloc.attention(&format!("{name}.attn"), out));
                blocks.push((res, attn));
            }
            encoder.push(StageLayout {
                width: out,
                len: data_length >> stage,
                blocks,
            });
        }

        let mut decoder: Vec<Option<StageLayout>> = vec![None; STAGES];
        let mut incoming = arch.stage_width(STAGES - 1);
        for stage in (0..STAGES).rev() {
            let out = arch.stage_width(stage);
            let mut blocks = Vec::new();
            for b in 0..arch.num_blocks as usize {
                let cin = if b == 0 { incoming + out } else { out };
                let name = format!("dec{stage}.block{b}");
                let res = alloc.res_block(&name, cin, out, embed);
                let attn = arch.attn[stage].then(|| alloc.attention(&format!("{name}.attn"), out));
                blocks.push((res, attn));
            }
            decoder[stage] = Some(StageLayout {
                width: out,
                len: data_length >> stage,
                blocks,
            });
            incoming = out;
        }
        let head = alloc.conv("head", LayerKind::Head, w0, 1, 3);
        let layout = Self {
            features,
            time1,
            time2,
            stem,
            encoder,
            decoder: decoder.into_iter().map(|s| s.expect("every stage built")).collect(),
            head,
        };
        (layout, alloc.groups, alloc.next)
    }
}

/// Intermediates of one residual block needed to replay it backwards.
#[derive(Debug, Clone)]
struct ResCache {
    input: Act,
    pre_act: Act,
    mask: Option<Vec<f64>>,
    mid: Act,
}

#[derive(Debug, Clone)]
struct BlockTape {
    res: ResCache,
    attn: Option<AttentionCache>,
}

/// Replay record of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    /// Time-path vectors are stored feature-major, `features × batch`.
    features: Vec<f64>,
    time_pre: Vec<f64>,
    time_act: Vec<f64>,
    embedding: Vec<f64>,
    stem_input: Act,
    encoder: Vec<Vec<BlockTape>>,
    decoder: Vec<Vec<BlockTape>>,
    decoder_incoming: Vec<usize>,
    head_input: Act,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Vec<f64>,
    pub batch: usize,
    /// Multiply-accumulates executed per sample.
    pub macs: u64,
    tape: Option<Tape>,
}

impl ForwardPass {
    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    /// Softmax weights of every attention layer in execution order, one
    /// `len × len` block per sample.
    pub fn attention_weights(&self) -> Vec<&[f64]> {
        let Some(tape) = &self.tape else {
            return Vec::new();
        };
        let mut order: Vec<&BlockTape> = tape.encoder.iter().flatten().collect();
        for stage in (0..STAGES).rev() {
            order.extend(tape.decoder[stage].iter());
        }
        order
            .into_iter()
            .filter_map(|b| b.attn.as_ref().map(|a| a.weights.as_slice()))
            .collect()
    }
}

/// Sinusoidal features of the timestep, `sin` half then `cos` half.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

/// The full weight inventory of one realized UNet with paired gradient storage.
#[derive(Debug, Clone)]
pub struct DenoiserParams {
    arch: ArchitectureConfig,
    data_length: usize,
    layout: Layout,
    groups: Vec<ParamGroup>,
    values: Vec<f64>,
    grads: Vec<f64>,
    version: u64,
}

pub fn check_length(data_length: usize) -> Result<()> {
    if data_length == 0 || data_length % 8 != 0 {
        return Err(Error::InvalidShape(format!(
            "data length must be a positive multiple of 8, got {data_length}"
        )));
    }
    Ok(())
}

impl DenoiserParams {
    /// He-initialized weights, zero biases, and zeros for the output head and
    /// for the last projection of every residual branch.
    pub fn build(arch: &ArchitectureConfig, data_length: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        check_length(data_length)?;
        let (layout, groups, total) = Layout::new(arch, data_length);
        for stage in 0..STAGES {
            let incoming = match stage + 1 {
                STAGES => layout.encoder[stage].width,
                next => layout.decoder[next].width,
            };
            let cin = layout.decoder[stage].blocks[0].0.conv1.cin;
            if cin != incoming + layout.encoder[stage].width {
                return Err(Error::InvalidShape(format!(
                    "decoder stage {stage} input width {cin} != {incoming} + skip {}",
                    layout.encoder[stage].width
                )));
            }
        }
        let mut values = vec![0.0; total];
        let mut rng = crate::rng::seeded(seed);
        for g in &groups {
            if g.zero_init {
                continue;
            }
            let std = (2.0 / g.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut values[g.offset..g.offset + g.len] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(Self {
            arch: *arch,
            data_length,
            layout,
            groups,
            grads: vec![0.0; total],
            values,
            version: 0,
        })
    }

    pub fn arch(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn data_length(&self) -> usize {
        self.data_length
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access invalidates every outstanding tape.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill(0.0);
    }

    /// Applies `update(values, grads)` and invalidates outstanding tapes.
    pub fn update_with(&mut self, update: impl FnOnce(&mut [f64], &[f64])) {
        self.version += 1;
        update(&mut self.values, &self.grads);
    }

    /// Evaluates the noise prediction for one sample. In training mode dropout
    /// is active (inverted, so inference needs no rescaling) and a backward
    /// tape is kept.
    pub fn forward(
        &self,
        x: &[f64],
        t: usize,
        schedule_steps: usize,
        training: bool,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<ForwardPass> {
        self.forward_batch(x, &[t], schedule_steps, training, dropout, rng)
    }

    /// Batched form of [`Self::forward`]: `xs` holds `ts.len()` samples back
    /// to back and the output uses the same layout. `macs` stays per sample.
    pub fn forward_batch(
        &self,
        xs: &[f64],
        ts: &[usize],
        schedule_steps: usize,
        training: bool,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<ForwardPass> {
        let batch = ts.len();
        if batch == 0 || xs.len() != batch * self.data_length {
            return Err(Error::ShapeMismatch {
                expected: batch.max(1) * self.data_length,
                got: xs.len(),
            });
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > schedule_steps) {
            return Err(Error::TimestepOutOfRange { t, max: schedule_steps });
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidRange(format!("dropout {dropout} outside [0, 1)")));
        }
        let p = &self.values;
        let l = &self.layout;
        let mut macs = 0u64;
        let drop = if training { dropout } else { 0.0 };

        // Feature-major `features × batch`.
        let mut features = vec![0.0; l.features * batch];
        for (b, &t) in ts.iter().enumerate() {
            for (k, v) in timestep_features(t, l.features).into_iter().enumerate() {
                features[k * batch + b] = v;
            }
        }
        let time_pre = l.time1.forward(p, &features, batch, &mut macs);
        let time_act: Vec<f64> = time_pre.iter().map(|&v| layers::silu(v)).collect();
        let embedding = l.time2.forward(p, &time_act, batch, &mut macs);

        let stem_input = Act::from_vec(1, batch, self.data_length, xs.to_vec());
        let mut h = l.stem.forward(p, &stem_input, &mut macs);

        let mut encoder = Vec::with_capacity(STAGES);
        let mut skips = Vec::with_capacity(STAGES);
        for (stage, sl) in l.encoder.iter().enumerate() {
            let mut tapes = Vec::with_capacity(sl.blocks.len());
            for (res, attn) in &sl.blocks {
                let (out, tape) = run_block(p, res, attn.as_ref(), h, &embedding, drop, rng, &mut macs);
                h = out;
                tapes.push(tape);
            }
            encoder.push(tapes);
            skips.push(h.clone());
            if stage + 1 < STAGES {
                h = layers::avg_pool2(&h);
            }
        }

        let mut decoder: Vec<Vec<BlockTape>> = vec![Vec::new(); STAGES];
        let mut decoder_incoming = vec![0; STAGES];
        for stage in (0..STAGES).rev() {
            let sl = &l.decoder[stage];
            decoder_incoming[stage] = h.channels;
            h = h.concat(&skips[stage]);
            let mut tapes = Vec::with_capacity(sl.blocks.len());
            for (res, attn) in &sl.blocks {
                let (out, tape) = run_block(p, res, attn.as_ref(), h, &embedding, drop, rng, &mut macs);
                h = out;
                tapes.push(tape);
            }
            decoder[stage] = tapes;
            if stage > 0 {
                h = layers::upsample2(&h);
            }
        }
        let out = l.head.forward(p, &h, &mut macs);
        if !out.is_finite() {
            return Err(Error::NonFiniteActivation("denoiser output"));
        }
        let tape = training.then(|| Tape {
            version: self.version,
            features,
            time_pre,
            time_act,
            embedding,
            stem_input,
            encoder,
            decoder,
            decoder_incoming,
            head_input: h,
        });
        Ok(ForwardPass {
            output: out.data,
            batch,
            macs,
            tape,
        })
    }

    /// Deterministic inference-mode prediction.
    pub fn predict(&self, x: &[f64], t: usize, schedule_steps: usize) -> Result<Vec<f64>> {
        self.predict_batch(x, &[t], schedule_steps)
    }

    pub fn predict_batch(&self, xs: &[f64], ts: &[usize], schedule_steps: usize) -> Result<Vec<f64>> {
        let mut rng = crate::rng::seeded(0);
        Ok(self.forward_batch(xs, ts, schedule_steps, false, 0.0, &mut rng)?.output)
    }

    /// Accumulates `∂(grad_output · output)/∂θ` into the gradient buffers.
    pub fn backward(&mut self, pass: &ForwardPass, grad_output: &[f64]) -> Result<()> {
        let tape = pass.tape.as_ref().ok_or(Error::StaleCache)?;
        if tape.version != self.version {
            return Err(Error::StaleCache);
        }
        let batch = pass.batch;
        if grad_output.len() != batch * self.data_length {
            return Err(Error::ShapeMismatch {
                expected: batch * self.data_length,
                got: grad_output.len(),
            });
        }
        let p = &self.values;
        let g = &mut self.grads;
        let l = &self.layout;
        let mut g_embed = vec![0.0; l.time2.output * batch];

        let gy = Act::from_vec(1, batch, self.data_length, grad_output.to_vec());
        let mut gh = l
            .head
            .backward(p, g, &tape.head_input, &gy, true)
            .expect("input gradient requested");

        let mut g_skips: Vec<Option<Act>> = vec![None; STAGES];
        for stage in 0..STAGES {
            if stage > 0 {
                gh = layers::upsample2_backward(&gh);
            }
            let sl = &l.decoder[stage];
            for ((res, attn), bt) in sl.blocks.iter().zip(&tape.decoder[stage]).rev() {
                gh = replay_block(p, g, res, attn.as_ref(), bt, gh, &tape.embedding, &mut g_embed);
            }
            let (g_in, g_skip) = gh.split(tape.decoder_incoming[stage]);
            g_skips[stage] = Some(g_skip);
            gh = g_in;
        }
        // `gh` now holds the gradient flowing into the deepest encoder output.
        for stage in (0..STAGES).rev() {
            if stage + 1 < STAGES {
                gh = layers::avg_pool2_backward(&gh);
            }
            gh.add_assign(g_skips[stage].as_ref().expect("filled above"));
            let sl = &l.encoder[stage];
            for ((res, attn), bt) in sl.blocks.iter().zip(&tape.encoder[stage]).rev() {
                gh = replay_block(p, g, res, attn.as_ref(), bt, gh, &tape.embedding, &mut g_embed);
            }
        }
        l.stem.backward(p, g, &tape.stem_input, &gh, false);

        let g_act = l.time2.backward(p, g, &tape.time_act, &g_embed, batch);
        let g_pre: Vec<f64> = g_act
            .iter()
            .zip(&tape.time_pre)
            .map(|(ga, &x)| ga * layers::silu_grad(x))
            .collect();
        l.time1.backward(p, g, &tape.features, &g_pre, batch);
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn run_block(
    p: &[f64],
    res: &ResBlock,
    attn: Option<&Attention>,
    x: Act,
    embedding: &[f64],
    dropout: f64,
    rng: &mut Rng,
    macs: &mut u64,
) -> (Act, BlockTape) {
    let (batch, len) = (x.batch, x.len);
    let pre_act = res.conv1.forward(p, &x, macs);
    let shift = res.time.forward(p, embedding, batch, macs);
    let mut mid = pre_act.clone();
    for c in 0..mid.channels {
        let row = mid.row_mut(c);
        for b in 0..batch {
            let s = shift[c * batch + b];
            for v in &mut row[b * len..(b + 1) * len] {
                *v = layers::silu(*v) + s;
            }
        }
    }
    let mask = (dropout > 0.0).then(|| {
        let keep = 1.0 / (1.0 - dropout);
        let mask: Vec<f64> = (0..mid.data.len())
            .map(|_| if rng.random::<f64>() < dropout { 0.0 } else { keep })
            .collect();
        for (v, m) in mid.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        mask
    });
    let mut out = res.conv2.forward(p, &mid, macs);
    match &res.skip {
        Some(skip) => out.add_assign(&skip.forward(p, &x, macs)),
        None => out.add_assign(&x),
    }
    let res_cache = ResCache {
        input: x,
        pre_act,
        mask,
        mid,
    };
    let (out, attn_cache) = match attn {
        Some(a) => {
            let (y, cache) = a.forward(p, &out, macs);
            (y, Some(cache))
        }
        None => (out, None),
    };
    (
        out,
        BlockTape {
            res: res_cache,
            attn: attn_cache,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn replay_block(
    p: &[f64],
    g: &mut [f64],
    res: &ResBlock,
    attn: Option<&Attention>,
    tape: &BlockTape,
    gy: Act,
    embedding: &[f64],
    g_embed: &mut [f64],
) -> Act {
    let gy = match (attn, &tape.attn) {
        (Some(a), Some(cache)) => a.backward(p, g, cache, &gy),
        _ => gy,
    };
    let cache = &tape.res;
    let mut g_mid = res
        .conv2
        .backward(p, g, &cache.mid, &gy, true)
        .expect("input gradient requested");
    if let Some(mask) = &cache.mask {
        for (v, m) in g_mid.data.iter_mut().zip(mask) {
            *v *= m;
        }
    }
    let (batch, len) = (g_mid.batch, g_mid.len);
    let mut g_shift = vec![0.0; g_mid.channels * batch];
    for c in 0..g_mid.channels {
        let row = g_mid.row(c);
        for b in 0..batch {
            g_shift[c * batch + b] = row[b * len..(b + 1) * len].iter().sum();
        }
    }
    let ge = res.time.backward(p, g, embedding, &g_shift, batch);
    for (a, b) in g_embed.iter_mut().zip(&ge) {
        *a += b;
    }
    for (v, &x) in g_mid.data.iter_mut().zip(&cache.pre_act.data) {
        *v *= layers::silu_grad(x);
    }
    let mut gx = res
        .conv1
        .backward(p, g, &cache.input, &g_mid, true)
        .expect("input gradient requested");
    match &res.skip {
        Some(skip) => {
            let part = skip
                .backward(p, g, &cache.input, &gy, true)
                .expect("input gradient requested");
            gx.add_assign(&part);
        }
        None => gx.add_assign(&gy),
    }
    gx
}
