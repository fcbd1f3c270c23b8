use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STAGES: usize = 4;
pub const BASE_CHANNEL_RANGE: (u32, u32) = (8, 256);
pub const NUM_BLOCKS_RANGE: (u32, u32) = (1, 4);
pub const CHANNEL_MULT_RANGE: (u32, u32) = (1, 4);

/// The ten searchable UNet parameters. Stage `i` (0-based here, stage `i+1`
/// in 1-based prose) runs at width `base_channel * channel_mult[i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub base_channel: u32,
    pub num_blocks: u32,
    pub channel_mult: [u32; STAGES],
    pub attn: [bool; STAGES],
}

impl ArchitectureConfig {
    pub fn new(base_channel: u32, num_blocks: u32, channel_mult: [u32; 4], attn: [bool; 4]) -> Self {
        Self {
            base_channel,
            num_blocks,
            channel_mult,
            attn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: u32, (lo, hi): (u32, u32)| v >= lo && v <= hi;
        if !in_range(self.base_channel, BASE_CHANNEL_RANGE) {
            return Err(Error::RangeViolation(format!(
                "base_channel {} outside {:?}",
                self.base_channel, BASE_CHANNEL_RANGE
            )));
        }
        if !in_range(self.num_blocks, NUM_BLOCKS_RANGE) {
            return Err(Error::RangeViolation(format!(
                "num_blocks {} outside {:?}",
                self.num_blocks, NUM_BLOCKS_RANGE
            )));
        }
        for (i, &m) in self.channel_mult.iter().enumerate() {
            if !in_range(m, CHANNEL_MULT_RANGE) {
                return Err(Error::RangeViolation(format!(
                    "channel_mult_{i} {m} outside {CHANNEL_MULT_RANGE:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        (self.base_channel * self.channel_mult[stage]) as usize
    }

    pub fn embed_dim(&self) -> usize {
        4 * self.base_channel as usize
    }

    /// Flat `key = value` block, one of the ten keys per line.
    pub fn to_block(&self) -> String {
        let mut s = format!(
            "base_channel = {}\nnum_blocks = {}\n",
            self.base_channel, self.num_blocks
        );
        for (i, m) in self.channel_mult.iter().enumerate() {
            s.push_str(&format!("channel_mult_{i} = {m}\n"));
        }
        for (i, a) in self.attn.iter().enumerate() {
            s.push_str(&format!("attn_{i} = {}\n", u8::from(*a)));
        }
        s
    }

    /// Parses a key-value block. Unknown keys are ignored; all ten keys are required.
    /// Values are not range-checked; callers validate against their space.
    pub fn from_block(text: &str) -> Result<Self> {
        let mut base = None;
        let mut blocks = None;
        let mut mult = [None; STAGES];
        let mut attn = [None; STAGES];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once(['=', ':']) else {
                continue;
            };
            let key = key.trim().trim_matches(|c| c == '"' || c == '\'');
            let value = value.trim().trim_end_matches(',').trim();
            match key {
                "base_channel" => base = Some(parse_uint(key, value)?),
                "num_blocks" => blocks = Some(parse_uint(key, value)?),
                _ => {
                    if let Some(i) = stage_suffix(key, "channel_mult_") {
                        mult[i] = Some(parse_uint(key, value)?);
                    } else if let Some(i) = stage_suffix(key, "attn_") {
                        attn[i] = Some(parse_flag(key, value)?);
                    }
                }
            }
        }
        let missing = |k: &str| Error::Parse(format!("missing key {k}"));
        let mut channel_mult = [0; STAGES];
        let mut attn_flags = [false; STAGES];
        for i in 0..STAGES {
            channel_mult[i] = mult[i].ok_or_else(|| missing(&format!("channel_mult_{i}")))?;
            attn_flags[i] = attn[i].ok_or_else(|| missing(&format!("attn_{i}")))?;
        }
        Ok(Self {
            base_channel: base.ok_or_else(|| missing("base_channel"))?,
            num_blocks: blocks.ok_or_else(|| missing("num_blocks"))?,
            channel_mult,
            attn: attn_flags,
        })
    }
}

fn stage_suffix(key: &str, prefix: &str) -> Option<usize> {
    key.strip_prefix(prefix)
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&i| i < STAGES)
}

fn parse_uint(key: &str, value: &str) -> Result<u32> {
    value
        .parse::<u32>()
        .map_err(|_| Error::Parse(format!("{key}: expected a non-negative integer, got {value:?}")))
}

fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        _ => Err(Error::Parse(format!("{key}: expected 0/1, got {value:?}"))),
    }
}

fn parse_list<T>(key: &str, value: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<[T; STAGES]>
where
    T: Copy + Default,
{
    let parts: Vec<&str> = value.split(':').collect();
    if parts.len() != STAGES {
        return Err(Error::Parse(format!(
            "{key}: expected {STAGES} colon-separated values, got {value:?}"
        )));
    }
    let mut out = [T::default(); STAGES];
    for (slot, p) in out.iter_mut().zip(parts) {
        *slot = item(key, p.trim())?;
    }
    Ok(out)
}

/// Compact command-line form:
/// `base_channel=128,num_blocks=2,mult=1:2:2:2,attn=0:1:0:0`.
impl fmt::Display for ArchitectureConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.channel_mult;
        let a = self.attn.map(u8::from);
        write!(
            f,
            "base_channel={},num_blocks={},mult={}:{}:{}:{},attn={}:{}:{}:{}",
            self.base_channel, self.num_blocks, m[0], m[1], m[2], m[3], a[0], a[1], a[2], a[3]
        )
    }
}

impl FromStr for ArchitectureConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut base = None;
        let mut blocks = None;
        let mut mult = None;
        let mut attn = None;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got {part:?}")))?;
            match key.trim() {
                "base_channel" => base = Some(parse_uint(key, value.trim())?),
                "num_blocks" => blocks = Some(parse_uint(key, value.trim())?),
                "mult" | "channel_mult" => mult = Some(parse_list(key, value, parse_uint)?),
                "attn" => attn = Some(parse_list(key, value, parse_flag)?),
                other => return Err(Error::Parse(format!("unknown architecture key {other:?}"))),
            }
        }
        let arch = Self {
            base_channel: base.ok_or_else(|| Error::Parse("missing base_channel".into()))?,
            num_blocks: blocks.ok_or_else(|| Error::Parse("missing num_blocks".into()))?,
            channel_mult: mult.ok_or_else(|| Error::Parse("missing mult".into()))?,
            attn: attn.ok_or_else(|| Error::Parse("missing attn".into()))?,
        };
        Ok(arch)
    }
}
