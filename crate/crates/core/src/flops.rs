//! Analytic multiply-accumulate counts. One MAC is counted as one FLOP.

use serde::{Deserialize, Serialize};

use crate::denoiser::{check_length, count_params, ArchitectureConfig, STAGES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Cifar,
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scale::Desk => "desk",
            Scale::Cifar => "cifar",
        })
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "cifar" => Ok(Scale::Cifar),
            other => Err(Error::Parse(format!("unknown scale {other:?} (desk|cifar)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub total: u64,
    /// Encoder plus decoder work of each resolution stage.
    pub per_stage: [u64; STAGES],
    /// Time embedding, input/output convolutions and (CIFAR template) the middle block.
    pub stem_head: u64,
    pub params: u64,
}

const DESK_KERNEL: u64 = 3;

fn desk_res_block(cin: u64, cout: u64, embed: u64, len: u64) -> u64 {
    let skip = if cin != cout { cin * cout * len } else { 0 };
    cout * cin * DESK_KERNEL * len + embed * cout + cout * cout * DESK_KERNEL * len + skip
}

fn desk_attention(width: u64, len: u64) -> u64 {
    4 * width * width * len + 2 * len * len * width
}

/// Exact MAC count of the desk network [`crate::denoiser::DenoiserParams`] executes.
pub fn flops_desk(arch: &ArchitectureConfig, data_length: usize) -> Result<FlopsReport> {
    arch.validate()?;
    check_length(data_length)?;
    let c = arch.base_channel as u64;
    let embed = arch.embed_dim() as u64;
    let width = |i: usize| arch.stage_width(i) as u64;
    let blocks = arch.num_blocks as u64;
    let length = data_length as u64;

    let mut per_stage = [0u64; STAGES];
    for (stage, slot) in per_stage.iter_mut().enumerate() {
        let len = length >> stage;
        let w = width(stage);
        let enc_in = if stage == 0 { w } else { width(stage - 1) };
        let dec_in = if stage + 1 == STAGES { w } else { width(stage + 1) } + w;
        let mut m = desk_res_block(enc_in, w, embed, len) + desk_res_block(dec_in, w, embed, len);
        m += 2 * (blocks - 1) * desk_res_block(w, w, embed, len);
        if arch.attn[stage] {
            m += 2 * blocks * desk_attention(w, len);
        }
        *slot = m;
    }
    let time = c * embed + embed * embed;
    let stem = width(0) * DESK_KERNEL * length;
    let head = width(0) * DESK_KERNEL * length;
    let stem_head = time + stem + head;
    Ok(FlopsReport {
        total: per_stage.iter().sum::<u64>() + stem_head,
        per_stage,
        stem_head,
        params: count_params(arch, data_length)? as u64,
    })
}

/// Running tally for the 2-D template.
#[derive(Default)]
struct Tally {
    macs: u64,
    params: u64,
}

impl Tally {
    fn conv(&mut self, cin: u64, cout: u64, kernel: u64, res: u64) {
        self.macs += cin * cout * kernel * kernel * res * res;
        self.params += cin * cout * kernel * kernel + cout;
    }

    fn linear(&mut self, input: u64, output: u64) {
        self.macs += input * output;
        self.params += input * output + output;
    }

    fn res_block(&mut self, cin: u64, cout: u64, embed: u64, res: u64) {
        self.conv(cin, cout, 3, res);
        self.linear(embed, cout);
        self.conv(cout, cout, 3, res);
        if cin != cout {
            self.conv(cin, cout, 1, res);
        }
    }

    /// QKV and output 1×1 projections; the score/value products are not
    /// counted, matching layer-hook profilers.
    fn attention(&mut self, width: u64, res: u64) {
        self.conv(width, 3 * width, 1, res);
        self.conv(width, width, 1, res);
    }
}

pub const CIFAR_RESOLUTION: usize = 32;
const CIFAR_CHANNELS: u64 = 3;

/// MAC count of a reference 2-D diffusion UNet on `resolution²` RGB inputs:
/// 3×3 residual blocks with time projections, attention at flagged stages,
/// per-block skip concatenation, strided-conv downsampling, nearest+conv
/// upsampling, `num_blocks + 1` decoder blocks per stage and a
/// resblock–attention–resblock middle.
pub fn flops_cifar_unet(arch: &ArchitectureConfig, resolution: usize) -> Result<FlopsReport> {
    arch.validate()?;
    if resolution == 0 || resolution % 8 != 0 {
        return Err(Error::InvalidShape(format!(
            "resolution must be a positive multiple of 8, got {resolution}"
        )));
    }
    let ch = arch.base_channel as u64;
    let embed = 4 * ch;
    let width = |i: usize| arch.stage_width(i) as u64;
    let blocks = arch.num_blocks as usize;

    let mut other = Tally::default();
    other.linear(ch, embed);
    other.linear(embed, embed);
    let mut res = resolution as u64;
    other.conv(CIFAR_CHANNELS, ch, 3, res);

    let mut stages: [Tally; STAGES] = Default::default();
    let mut skips = vec![ch];
    let mut c = ch;
    for stage in 0..STAGES {
        let t = &mut stages[stage];
        for _ in 0..blocks {
            let out = width(stage);
            t.res_block(c, out, embed, res);
            c = out;
            if arch.attn[stage] {
                t.attention(c, res);
            }
            skips.push(c);
        }
        if stage + 1 < STAGES {
            res /= 2;
            t.conv(c, c, 3, res);
            skips.push(c);
        }
    }
    other.res_block(c, c, embed, res);
    other.attention(c, res);
    other.res_block(c, c, embed, res);
    for stage in (0..STAGES).rev() {
        let t = &mut stages[stage];
        for j in 0..=blocks {
            let skip = skips.pop().expect("one skip per decoder block");
            let out = width(stage);
            t.res_block(c + skip, out, embed, res);
            c = out;
            if arch.attn[stage] {
                t.attention(c, res);
            }
            if stage > 0 && j == blocks {
                res *= 2;
                t.conv(c, c, 3, res);
            }
        }
    }
    other.conv(c, CIFAR_CHANNELS, 3, res);

    let per_stage = [0, 1, 2, 3].map(|i| stages[i].macs);
    Ok(FlopsReport {
        total: per_stage.iter().sum::<u64>() + other.macs,
        per_stage,
        stem_head: other.macs,
        params: stages.iter().map(|t| t.params).sum::<u64>() + other.params,
    })
}

pub fn estimate(arch: &ArchitectureConfig, scale: Scale, data_length: usize) -> Result<FlopsReport> {
    match scale {
        Scale::Desk => flops_desk(arch, data_length),
        Scale::Cifar => flops_cifar_unet(arch, CIFAR_RESOLUTION),
    }
}

/// Inclusive budget gate `FLOPs(arch) ≤ budget`.
pub fn within_budget(arch: &ArchitectureConfig, budget: u64, scale: Scale, data_length: usize) -> Result<bool> {
    if budget == 0 {
        return Err(Error::Precondition("FLOPs budget must be positive".into()));
    }
    Ok(estimate(arch, scale, data_length)?.total <= budget)
}

impl FlopsReport {
    pub fn to_text(&self, arch: &ArchitectureConfig, scale: Scale) -> String {
        let mut s = format!("arch      {arch}\nscale     {scale}\n");
        for (i, m) in self.per_stage.iter().enumerate() {
            s.push_str(&format!("stage {}   {:>16}\n", i + 1, m));
        }
        s.push_str(&format!("stem/head {:>16}\n", self.stem_head));
        s.push_str(&format!("total     {:>16}  ({:.3}G)\n", self.total, self.total as f64 / 1e9));
        s.push_str(&format!("params    {:>16}\n", self.params));
        s
    }

    pub fn to_csv(&self, arch: &ArchitectureConfig, scale: Scale) -> String {
        let p = self.per_stage;
        format!(
            "arch,scale,stage1,stage2,stage3,stage4,stem_head,total,params\n\"{arch}\",{scale},{},{},{},{},{},{},{}\n",
            p[0], p[1], p[2], p[3], self.stem_head, self.total, self.params
        )
    }
}
