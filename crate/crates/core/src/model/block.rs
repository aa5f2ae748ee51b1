use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{ChannelNorm, Conv};
use super::params::{Bound, Init, ParamId};
use crate::autodiff::{ScanSpec, Tape, Var};
use crate::error::Result;
use crate::scan1d::a_log_init;
use crate::tensor::{Float, Tensor};

/// Spatial mixer applied before the scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthwiseKernel {
    /// `k×k` depthwise 2D convolution.
    #[default]
    Square,
    /// `1×k` depthwise convolution along rows only.
    Row,
}

/// Step-size range used to initialize the Δ bias, sampled log-uniformly.
const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

/// The 2D-Mamba block.
///
/// ```text
///   n = LN(x)
///   u = SiLU(dwconv(W_in n))        z = W_z n
///   Δ = softplus(W_Δ u + b_Δ)       B = W_B u       C = W_C u
///   y = LN(scan(u; Δ, A, B, C))     summed over four orientations
///   out = x + W_out (y ⊙ SiLU(z))
/// ```
#[derive(Clone, Debug)]
pub struct Mamba2dBlock {
    pub norm: ChannelNorm,
    pub in_proj: Conv,
    pub gate_proj: Conv,
    pub dwconv: Conv,
    pub delta_proj: Conv,
    pub b_proj: Conv,
    pub c_proj: Conv,
    pub log_a: ParamId,
    pub out_norm: ChannelNorm,
    pub out_proj: Conv,
    pub scan: ScanSpec,
}

impl Mamba2dBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        expansion: usize,
        state_dim: usize,
        kernel: usize,
        dw: DepthwiseKernel,
        scan: ScanSpec,
    ) -> Self {
        let d = channels * expansion;
        init.scope(name, |init| {
            let norm = ChannelNorm::new(init, "norm", channels);
            let in_proj = Conv::new(init, "in_proj", channels, d, 1, 1, false);
            let gate_proj = Conv::new(init, "gate_proj", channels, d, 1, 1, false);
            let kh = match dw {
                DepthwiseKernel::Square => kernel,
                DepthwiseKernel::Row => 1,
            };
            let dwconv = Conv::rect(init, "dwconv", d, d, (kh, kernel), 1, d, true);
            let delta_proj = init.scope("delta_proj", |init| {
                let weight = init.uniform("weight", &[d, d, 1, 1], d);
                let bias: Vec<T> = (0..d)
                    .map(|_| {
                        let u: f64 = init.rng.random();
                        let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp();
                        // inverse softplus
                        T::lit(dt + (-(-dt).exp_m1()).ln())
                    })
                    .collect();
                let bias = init.tensor("bias", Tensor::new([d], bias).expect("length d"));
                Conv {
                    weight,
                    bias: Some(bias),
                    stride: 1,
                    padding: (0, 0),
                    groups: 1,
                }
            });
            let b_proj = Conv::new(init, "b_proj", d, state_dim, 1, 1, false);
            let c_proj = Conv::new(init, "c_proj", d, state_dim, 1, 1, false);
            let log_a = init.tensor(
                "log_a",
                Tensor::new([d, state_dim], a_log_init(d, state_dim)).expect("length d·N"),
            );
            let out_norm = ChannelNorm::new(init, "out_norm", d);
            let out_proj = Conv::new(init, "out_proj", d, channels, 1, 1, false);
            Mamba2dBlock {
                norm,
                in_proj,
                gate_proj,
                dwconv,
                delta_proj,
                b_proj,
                c_proj,
                log_a,
                out_norm,
                out_proj,
                scan,
            }
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = self.norm.forward(tape, p, x)?;
        let u = self.in_proj.forward(tape, p, n)?;
        let u = self.dwconv.forward(tape, p, u)?;
        let u = tape.silu(u);
        let z = self.gate_proj.forward(tape, p, n)?;
        let z = tape.silu(z);

        let delta = self.delta_proj.forward(tape, p, u)?;
        let delta = tape.softplus(delta);
        let b = self.b_proj.forward(tape, p, u)?;
        let c = self.c_proj.forward(tape, p, u)?;
        let a = tape.exp(p.var(self.log_a));
        let a = tape.neg(a);
        let y = tape.selective_scan(u, delta, a, b, c, self.scan)?;
        let y = self.out_norm.forward(tape, p, y)?;

        let gated = tape.mul(y, z)?;
        let out = self.out_proj.forward(tape, p, gated)?;
        tape.add(x, out)
    }
}
