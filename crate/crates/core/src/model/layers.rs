use rand::Rng;

use super::params::{Bound, Init, ParamId};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Float;

/// A 2D convolution with its own weight and optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv {
    /// Square `k×k` kernel padded by `k/2`, which preserves extents at stride 1
    /// for odd `k` and halves even extents at stride 2.
    pub fn new<T: Float, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        Self::rect(init, name, c_in, c_out, (k, k), stride, 1, bias)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn rect<T: Float, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in / groups * kh * kw;
        init.scope(name, |init| Conv {
            weight: init.uniform("weight", &[c_out, c_in / groups, kh, kw], fan_in),
            bias: bias.then(|| init.uniform("bias", &[c_out], fan_in)),
            stride,
            padding: (kh / 2, kw / 2),
            groups,
        })
    }

    /// Stride-`k` patchify convolution with no padding (`k×k`, stride `k`).
    pub fn patch<T: Float, R: Rng>(init: &mut Init<'_, T, R>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let mut conv = Self::new(init, name, c_in, c_out, k, k, true);
        conv.padding = (0, 0);
        conv
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            p.var(self.weight),
            self.bias.map(|b| p.var(b)),
            self.stride,
            self.padding,
            self.groups,
        )
    }
}

/// Layer normalization across channels with a learned per-channel affine.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl ChannelNorm {
    pub fn new<T: Float, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize) -> Self {
        init.scope(name, |init| ChannelNorm {
            gamma: init.ones("gamma", &[channels]),
            beta: init.zeros("beta", &[channels]),
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm_channels(x, p.var(self.gamma), p.var(self.beta), T::lit(NORM_EPS))
    }
}
