//! Desk-scale UNet denoiser realizing any point of the ten-parameter space.
//!
//! Four stages at lengths `L, L/2, L/4, L/8`; each stage has `num_blocks`
//! residual blocks per side, optional self-attention after each block, average
//! pooling on the way down and nearest-neighbour upsampling on the way up.
//! Decoder stage `i` concatenates the encoder stage `i` output channel-wise.

mod arch;
mod layers;
mod network;

use serde::{Deserialize, Serialize};

pub use arch::{
    ArchitectureConfig, BASE_CHANNEL_RANGE, CHANNEL_MULT_RANGE, NUM_BLOCKS_RANGE, STAGES,
};
pub use layers::{silu, silu_grad, softmax_in_place, Act};
pub use network::{timestep_features, DenoiserParams, ForwardPass, LayerKind, ParamGroup, Tape};

pub use network::check_length;

use crate::error::{Error, Result};

/// The training-strategy triple searched separately from the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStrategy {
    pub learning_rate: f64,
    pub dropout: f64,
    pub diffusion_steps: usize,
}

impl TrainStrategy {
    pub fn new(learning_rate: f64, dropout: f64, diffusion_steps: usize) -> Self {
        Self {
            learning_rate,
            dropout,
            diffusion_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidRange(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidRange(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::InvalidRange("diffusion_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn to_block(&self) -> String {
        format!(
            "learning_rate = {:e}\ndropout = {}\ndiffusion_steps = {}\n",
            self.learning_rate, self.dropout, self.diffusion_steps
        )
    }

    pub fn from_block(text: &str) -> Result<Self> {
        let mut lr = None;
        let mut dropout = None;
        let mut steps = None;
        for line in text.lines() {
            let Some((k, v)) = line.split_once(['=', ':']) else {
                continue;
            };
            let (k, v) = (k.trim(), v.trim().trim_end_matches(','));
            let real = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("{k}: expected a number, got {v:?}")))
            };
            match k {
                "learning_rate" => lr = Some(real(v)?),
                "dropout" => dropout = Some(real(v)?),
                "diffusion_steps" => {
                    steps = Some(v.parse::<usize>().map_err(|_| {
                        Error::Parse(format!("diffusion_steps: expected an integer, got {v:?}"))
                    })?)
                }
                _ => {}
            }
        }
        Ok(Self {
            learning_rate: lr.ok_or_else(|| Error::Parse("missing key learning_rate".into()))?,
            dropout: dropout.ok_or_else(|| Error::Parse("missing key dropout".into()))?,
            diffusion_steps: steps.ok_or_else(|| Error::Parse("missing key diffusion_steps".into()))?,
        })
    }
}

fn conv_params(cin: usize, cout: usize, kernel: usize) -> usize {
    cout * cin * kernel + cout
}

fn res_block_params(cin: usize, cout: usize, embed: usize) -> usize {
    let skip = if cin != cout { conv_params(cin, cout, 1) } else { 0 };
    conv_params(cin, cout, 3) + (embed * cout + cout) + conv_params(cout, cout, 3) + skip
}

fn attention_params(width: usize) -> usize {
    4 * conv_params(width, width, 1)
}

/// Closed-form parameter count of the network [`DenoiserParams::build`] realizes.
pub fn count_params(arch: &ArchitectureConfig, data_length: usize) -> Result<usize> {
    arch.validate()?;
    check_length(data_length)?;
    let c = arch.base_channel as usize;
    let embed = arch.embed_dim();
    let width = |i: usize| arch.stage_width(i);
    let blocks = arch.num_blocks as usize;
    let mut total = (c * embed + embed) + (embed * embed + embed);
    total += conv_params(1, width(0), 3);
    for stage in 0..STAGES {
        let attn = if arch.attn[stage] { attention_params(width(stage)) } else { 0 };
        let enc_in = if stage == 0 { width(0) } else { width(stage - 1) };
        let dec_in = if stage + 1 == STAGES { width(stage) } else { width(stage + 1) } + width(stage);
        total += res_block_params(enc_in, width(stage), embed);
        total += res_block_params(dec_in, width(stage), embed);
        total += (blocks - 1) * 2 * res_block_params(width(stage), width(stage), embed);
        total += 2 * blocks * attn;
    }
    total += conv_params(width(0), 1, 3);
    Ok(total)
}
