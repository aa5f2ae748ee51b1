//! Flow-guided top-down decoder and the two-class head.

use rand::Rng;

use super::layers::Conv;
use super::params::{Bound, Init};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

/// Factor between the finest decoder level and the input image.
pub const HEAD_UPSAMPLE: usize = 4;

/// `p ↦ p/2` bilinear upsampling of a `C×H×W` map to `C×2H×2W`: a warp by an
/// all-zero flow.
pub fn upsample2<T: Float>(tape: &mut Tape<T>, coarse: Var) -> Result<Var> {
    let s = tape.shape(coarse).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("upsample needs C×H×W, got {s:?}")));
    }
    let zero = tape.constant([2, 2 * s[1], 2 * s[2]], vec![T::zero(); 8 * s[1] * s[2]])?;
    tape.warp(coarse, zero)
}

fn check_pair<T: Float>(tape: &Tape<T>, coarse: Var, fine: Var) -> Result<()> {
    let (c, f) = (tape.shape(coarse), tape.shape(fine));
    if c.len() != 3 || f.len() != 3 || c[0] != f[0] || f[1] != 2 * c[1] || f[2] != 2 * c[2] {
        return Err(Error::shape(format!(
            "fine map {f:?} must have the channels of and twice the extents of coarse {c:?}"
        )));
    }
    Ok(())
}

/// Predicts a `2×2H×2W` flow (dx, dy) from the upsampled coarse map and the
/// fine map: `conv3×3 → ReLU → conv3×3`, the last layer zero-initialized.
#[derive(Clone, Debug)]
pub struct FlowMake {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl FlowMake {
    pub fn new<T: Float, R: Rng>(init: &mut Init<'_, T, R>, channels: usize) -> Self {
        init.scope("flow_make", |init| {
            let conv1 = Conv::new(init, "conv1", 2 * channels, channels, 3, 1, true);
            let conv2 = init.scope("conv2", |init| Conv {
                weight: init.zeros("weight", &[2, channels, 3, 3]),
                bias: Some(init.zeros("bias", &[2])),
                stride: 1,
                padding: (1, 1),
                groups: 1,
            });
            FlowMake { conv1, conv2 }
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, coarse: Var, fine: Var) -> Result<Var> {
        check_pair(tape, coarse, fine)?;
        let up = upsample2(tape, coarse)?;
        let cat = tape.concat(&[up, fine])?;
        let h = self.conv1.forward(tape, p, cat)?;
        let h = tape.relu(h);
        self.conv2.forward(tape, p, h)
    }
}

/// One top-down step: warp the coarse map onto the fine grid (by a learned
/// flow, or by zero flow when `flow` is absent), add the fine map, `3×3` conv.
#[derive(Clone, Debug)]
pub struct CfgLevel {
    pub flow: Option<FlowMake>,
    pub fuse: Conv,
}

impl CfgLevel {
    pub fn new<T: Float, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize, use_flow: bool) -> Self {
        init.scope(name, |init| CfgLevel {
            flow: use_flow.then(|| FlowMake::new(init, channels)),
            fuse: Conv::new(init, "fuse", channels, channels, 3, 1, true),
        })
    }

    /// Returns the merged fine map and the flow, if one was predicted.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, coarse: Var, fine: Var) -> Result<(Var, Option<Var>)> {
        check_pair(tape, coarse, fine)?;
        let (warped, flow) = match &self.flow {
            Some(fm) => {
                let flow = fm.forward(tape, p, coarse, fine)?;
                (tape.warp(coarse, flow)?, Some(flow))
            }
            None => (upsample2(tape, coarse)?, None),
        };
        let merged = tape.add(warped, fine)?;
        Ok((self.fuse.forward(tape, p, merged)?, flow))
    }
}

/// Output of [`Decoder::forward`].
#[derive(Clone, Debug)]
pub struct Decoded {
    /// `2×H₀×W₀` log-probabilities, class 1 = change.
    pub log_probs: Var,
    /// One flow per top-down step, coarsest first.
    pub flows: Vec<Var>,
}

/// Three top-down steps from the stage-4 level to the stage-1 level, then a
/// `1×1` head to two logits, ×4 bilinear resize and log-softmax.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub levels: Vec<CfgLevel>,
    pub head: Conv,
}

impl Decoder {
    pub fn new<T: Float, R: Rng>(init: &mut Init<'_, T, R>, channels: usize, use_flow: bool) -> Self {
        init.scope("decoder", |init| Decoder {
            levels: (1..=3)
                .rev()
                .map(|s| CfgLevel::new(init, &format!("cfg{s}"), channels, use_flow))
                .collect(),
            head: Conv::new(init, "head", channels, 2, 1, 1, true),
        })
    }

    /// `levels` are the four fused level features, finest first.
    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, levels: &[Var; 4]) -> Result<Decoded> {
        let mut current = levels[3];
        let mut flows = Vec::new();
        for (step, level) in self.levels.iter().enumerate() {
            let (next, flow) = level.forward(tape, p, current, levels[2 - step])?;
            current = next;
            flows.extend(flow);
        }
        // the 1×1 head commutes with bilinear resizing, so it runs at the
        // lower resolution
        let logits = self.head.forward(tape, p, current)?;
        let logits = tape.resize_bilinear(logits, HEAD_UPSAMPLE)?;
        let log_probs = tape.log_softmax_channels(logits)?;
        Ok(Decoded { log_probs, flows })
    }
}
