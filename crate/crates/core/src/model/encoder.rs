use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::{DepthwiseKernel, Mamba2dBlock};
use super::layers::Conv;
use super::params::{Bound, Init};
use crate::autodiff::{ScanSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Input extents must be divisible by this: the stem reduces by 4 and the
/// three downsamples by another 8.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub base_channels: usize,
    pub state_dim: usize,
    pub stage_depths: [usize; 4],
    pub conv_kernel: usize,
    pub depthwise: DepthwiseKernel,
    pub expansion: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            state_dim: 8,
            stage_depths: [1, 1, 2, 1],
            conv_kernel: 3,
            depthwise: DepthwiseKernel::Square,
            expansion: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.state_dim == 0 || self.expansion == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv_kernel must be odd, got {}", self.conv_kernel)));
        }
        Ok(())
    }

    /// Channel count of stage `s` (0-based).
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }
}

/// Two stride-2 `3×3` convolutions with SiLU between them: `3×H×W → C×H/4×W/4`.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl Stem {
    pub fn new<T: Float, R: Rng>(init: &mut Init<'_, T, R>, channels: usize) -> Self {
        init.scope("stem", |init| Stem {
            conv1: Conv::new(init, "conv1", 3, channels, 3, 2, true),
            conv2: Conv::new(init, "conv2", channels, channels, 3, 2, true),
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.silu(h);
        self.conv2.forward(tape, p, h)
    }
}

/// `N` blocks whose outputs are summed and linearly projected.
#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<Mamba2dBlock>,
    pub aggregator: Conv,
}

impl Stage {
    fn new<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &EncoderConfig, s: usize, scan: ScanSpec) -> Self {
        let c = cfg.stage_channels(s);
        let depth = cfg.stage_depths[s];
        init.scope(&format!("stage{}", s + 1), |init| {
            let blocks = (0..depth)
                .map(|b| {
                    Mamba2dBlock::new(
                        init,
                        &format!("block{b}"),
                        c,
                        cfg.expansion,
                        cfg.state_dim,
                        cfg.conv_kernel,
                        cfg.depthwise,
                        scan,
                    )
                })
                .collect();
            let aggregator = init.scope("aggregator", |init| {
                // starts as the mean of the block outputs
                let inv = T::lit(1.0 / depth as f64);
                let eye = Tensor::from_fn([c, c, 1, 1], |i| if i / c == i % c { inv } else { T::zero() });
                Conv {
                    weight: init.tensor("weight", eye),
                    bias: Some(init.zeros("bias", &[c])),
                    stride: 1,
                    padding: (0, 0),
                    groups: 1,
                }
            });
            Stage { blocks, aggregator }
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let mut sum: Option<Var> = None;
        for block in &self.blocks {
            h = block.forward(tape, p, h)?;
            sum = Some(match sum {
                Some(s) => tape.add(s, h)?,
                None => h,
            });
        }
        self.aggregator.forward(tape, p, sum.expect("stage has blocks"))
    }
}

/// Stem, four stages and the three `2×2` stride-2 downsamples between them.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub downsamples: Vec<Conv>,
}

impl Encoder {
    pub fn new<T: Float, R: Rng>(init: &mut Init<'_, T, R>, cfg: &EncoderConfig, scan: ScanSpec) -> Self {
        init.scope("encoder", |init| {
            let stem = Stem::new(init, cfg.base_channels);
            let mut stages = Vec::new();
            let mut downsamples = Vec::new();
            for s in 0..4 {
                stages.push(Stage::new(init, cfg, s, scan));
                if s < 3 {
                    let c = cfg.stage_channels(s);
                    downsamples.push(Conv::patch(init, &format!("down{}", s + 1), c, 2 * c, 2));
                }
            }
            Encoder {
                stem,
                stages,
                downsamples,
            }
        })
    }

    /// Multi-level features, captured after each stage's aggregator and before
    /// the following downsample.
    pub fn encode<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<[Var; 4]> {
        let s = tape.shape(image);
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!("encoder expects a 3×H×W image, got {s:?}")));
        }
        if !s[1].is_multiple_of(INPUT_MULTIPLE) || !s[2].is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::shape(format!(
                "image extents {}×{} are not divisible by {INPUT_MULTIPLE}",
                s[1], s[2]
            )));
        }
        let mut h = self.stem.forward(tape, p, image)?;
        let mut feats = [h; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(tape, p, h)?;
            feats[i] = h;
            if i < self.downsamples.len() {
                h = self.downsample(tape, p, i, h)?;
            }
        }
        Ok(feats)
    }

    /// The `i`-th `2×2` stride-2 downsample: `C×H×W → 2C×H/2×W/2`.
    pub fn downsample<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, i: usize, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::shape(format!("downsample needs even extents, got {s:?}")));
        }
        self.downsamples[i].forward(tape, p, x)
    }
}
