//! Residual network topology and its key-value text form.
//!
//! ```text
//! # resnet50
//! block = bottleneck
//! stem = out:64 kernel:7 stride:2 pad:3
//! stage1 = blocks:3 in:64 mid:64 out:256 stride:1
//! stage2 = blocks:4 in:256 mid:128 out:512 stride:2
//! ```

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3×3 convolutions; `mid` is ignored.
    Basic,
    /// 1×1 reduce, 3×3 (carrying the stride), 1×1 expand.
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub name: String,
    pub block: BlockKind,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
}

/// Convolution layer as declared by a config: name prefix and geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvDecl {
    pub prefix: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDecl {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }
}

/// Batch-norm layer as declared by a config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BnDecl {
    pub prefix: String,
    pub channels: usize,
}

pub const BN_FIELDS: [&str; 4] = ["gamma", "beta", "mean", "var"];

/// Stem max-pool geometry shared by the residual family.
pub const STEM_POOL: (usize, usize, usize) = (3, 2, 1);

impl BackboneConfig {
    /// The ImageNet ResNet-50 topology (stride on the 3×3 of each bottleneck).
    pub fn resnet50() -> Self {
        let stage = |blocks, in_channels, mid_channels, out_channels, stride| StageSpec {
            blocks,
            in_channels,
            mid_channels,
            out_channels,
            stride,
        };
        Self {
            name: "resnet50".into(),
            block: BlockKind::Bottleneck,
            stem: StemSpec {
                out_channels: 64,
                kernel: 7,
                stride: 2,
                pad: 3,
            },
            stages: vec![
                stage(3, 64, 64, 256, 1),
                stage(4, 256, 128, 512, 2),
                stage(6, 512, 256, 1024, 2),
                stage(3, 1024, 512, 2048, 2),
            ],
        }
    }

    /// Small test network: 3→8 stem, one basic block at 8 channels, one
    /// downsampling basic block to 16 channels. Total stride 8.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            block: BlockKind::Basic,
            stem: StemSpec {
                out_channels: 8,
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            stages: vec![
                StageSpec {
                    blocks: 1,
                    in_channels: 8,
                    mid_channels: 8,
                    out_channels: 8,
                    stride: 1,
                },
                StageSpec {
                    blocks: 1,
                    in_channels: 8,
                    mid_channels: 16,
                    out_channels: 16,
                    stride: 2,
                },
            ],
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "resnet50" => Some(Self::resnet50()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn output_channels(&self) -> usize {
        self.stages
            .last()
            .map_or(self.stem.out_channels, |s| s.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stem;
        if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
            return Err(Error::Config("stem fields must be positive".into()));
        }
        let mut channels = s.out_channels;
        for (i, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 || st.stride == 0 || st.out_channels == 0 || st.mid_channels == 0 {
                return Err(Error::Config(format!("stage{} fields must be positive", i + 1)));
            }
            if st.in_channels != channels {
                return Err(Error::Config(format!(
                    "stage{} input channels {} do not chain from {channels}",
                    i + 1,
                    st.in_channels
                )));
            }
            channels = st.out_channels;
        }
        Ok(())
    }

    /// Spatial size of the final stage for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        use super::ops::conv_output_size as out;
        let s = &self.stem;
        let (k, st, p) = STEM_POOL;
        let mut hw = (out(h, s.kernel, s.stride, s.pad)?, out(w, s.kernel, s.stride, s.pad)?);
        hw = (out(hw.0, k, st, p)?, out(hw.1, k, st, p)?);
        for stage in &self.stages {
            // Every strided conv in a block is 3×3 pad 1 (or 1×1 pad 0 on the
            // shortcut), both of which give ⌊(n − 1)/s⌋ + 1.
            hw = (out(hw.0, 3, stage.stride, 1)?, out(hw.1, 3, stage.stride, 1)?);
        }
        (hw.0 > 0 && hw.1 > 0).then_some(hw)
    }

    pub fn stem_conv(&self) -> ConvDecl {
        ConvDecl {
            prefix: "stem.conv".into(),
            out_channels: self.stem.out_channels,
            in_channels: 3,
            kernel: self.stem.kernel,
            stride: self.stem.stride,
            pad: self.stem.pad,
        }
    }

    /// Convs of one block, in evaluation order, plus the projection shortcut if any.
    pub fn block_layers(&self, stage: usize, block: usize) -> (Vec<(ConvDecl, BnDecl)>, Option<(ConvDecl, BnDecl)>) {
        let st = &self.stages[stage];
        let prefix = format!("stage{}.block{}", stage + 1, block);
        let in_ch = if block == 0 { st.in_channels } else { st.out_channels };
        let stride = if block == 0 { st.stride } else { 1 };
        let layer = |k: usize, out_channels, in_channels, kernel, stride| {
            (
                ConvDecl {
                    prefix: format!("{prefix}.conv{k}"),
                    out_channels,
                    in_channels,
                    kernel,
                    stride,
                    pad: kernel / 2,
                },
                BnDecl {
                    prefix: format!("{prefix}.bn{k}"),
                    channels: out_channels,
                },
            )
        };
        let main = match self.block {
            BlockKind::Basic => vec![
                layer(1, st.out_channels, in_ch, 3, stride),
                layer(2, st.out_channels, st.out_channels, 3, 1),
            ],
            BlockKind::Bottleneck => vec![
                layer(1, st.mid_channels, in_ch, 1, 1),
                layer(2, st.mid_channels, st.mid_channels, 3, stride),
                layer(3, st.out_channels, st.mid_channels, 1, 1),
            ],
        };
        let shortcut = (stride != 1 || in_ch != st.out_channels).then(|| {
            (
                ConvDecl {
                    prefix: format!("{prefix}.downsample.conv"),
                    out_channels: st.out_channels,
                    in_channels: in_ch,
                    kernel: 1,
                    stride,
                    pad: 0,
                },
                BnDecl {
                    prefix: format!("{prefix}.downsample.bn"),
                    channels: st.out_channels,
                },
            )
        });
        (main, shortcut)
    }

    /// Every tensor name the config requires, with its dims, in evaluation order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut push = |conv: &ConvDecl, bn: &BnDecl| {
            specs.push((conv.weight_name(), conv.dims()));
            for f in BN_FIELDS {
                specs.push((format!("{}.{f}", bn.prefix), vec![bn.channels]));
            }
        };
        push(
            &self.stem_conv(),
            &BnDecl {
                prefix: "stem.bn".into(),
                channels: self.stem.out_channels,
            },
        );
        for (si, st) in self.stages.iter().enumerate() {
            for b in 0..st.blocks {
                let (main, shortcut) = self.block_layers(si, b);
                for (c, n) in &main {
                    push(c, n);
                }
                if let Some((c, n)) = &shortcut {
                    push(c, n);
                }
            }
        }
        specs
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "name = {}", self.name).unwrap();
        let block = match self.block {
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        };
        writeln!(s, "block = {block}").unwrap();
        let st = &self.stem;
        writeln!(
            s,
            "stem = out:{} kernel:{} stride:{} pad:{}",
            st.out_channels, st.kernel, st.stride, st.pad
        )
        .unwrap();
        for (i, g) in self.stages.iter().enumerate() {
            writeln!(
                s,
                "stage{} = blocks:{} in:{} mid:{} out:{} stride:{}",
                i + 1,
                g.blocks,
                g.in_channels,
                g.mid_channels,
                g.out_channels,
                g.stride
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut name = "custom".to_string();
        let mut block = None;
        let mut stem = None;
        let mut stages = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("backbone config line {}: expected key = value", i + 1)))?;
            match key {
                "name" => name = value.to_string(),
                "block" => {
                    block = Some(match value {
                        "basic" => BlockKind::Basic,
                        "bottleneck" => BlockKind::Bottleneck,
                        other => return Err(Error::Config(format!("unknown block kind {other:?}"))),
                    })
                }
                "stem" => {
                    let f = fields(value, &["out", "kernel", "stride", "pad"])?;
                    stem = Some(StemSpec {
                        out_channels: f["out"],
                        kernel: f["kernel"],
                        stride: f["stride"],
                        pad: f["pad"],
                    });
                }
                k if k.starts_with("stage") => {
                    let idx: usize = k[5..]
                        .parse()
                        .map_err(|_| Error::Config(format!("bad stage key {k:?}")))?;
                    let f = fields(value, &["blocks", "in", "mid", "out", "stride"])?;
                    stages.insert(
                        idx,
                        StageSpec {
                            blocks: f["blocks"],
                            in_channels: f["in"],
                            mid_channels: f["mid"],
                            out_channels: f["out"],
                            stride: f["stride"],
                        },
                    );
                }
                other => return Err(Error::Config(format!("unknown backbone key {other:?}"))),
            }
        }
        if stages.keys().copied().ne(1..=stages.len()) {
            return Err(Error::Config("stages must be numbered stage1..stageN".into()));
        }
        let cfg = Self {
            name,
            block: block.ok_or_else(|| Error::Config("missing `block`".into()))?,
            stem: stem.ok_or_else(|| Error::Config("missing `stem`".into()))?,
            stages: stages.into_values().collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fields(value: &str, required: &[&str]) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for tok in value.split_whitespace() {
        let (k, v) = tok
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected field:value, got {tok:?}")))?;
        let v: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("field {k:?} is not a non-negative integer")))?;
        out.insert(k.to_string(), v);
    }
    for r in required {
        if !out.contains_key(*r) {
            return Err(Error::Config(format!("missing field {r:?} in {value:?}")));
        }
    }
    Ok(out)
}
