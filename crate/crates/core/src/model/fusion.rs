//! Bi-temporal fusion: channel concatenation, spatial interleaving and the
//! change block that scans the interleaved map.

use rand::Rng;

use super::block::Mamba2dBlock;
use super::encoder::EncoderConfig;
use super::layers::Conv;
use super::params::{Bound, Init};
use crate::autodiff::{ScanSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

/// Phase order used when splitting an interleaved map.
pub const PHASES: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

fn same_extents<T: Float>(tape: &Tape<T>, f1: Var, f2: Var) -> Result<()> {
    let (a, b) = (tape.shape(f1), tape.shape(f2));
    if a.len() != 3 || a != b {
        return Err(Error::shape(format!("fusion needs equal C×H×W maps, got {a:?} and {b:?}")));
    }
    Ok(())
}

/// Channel concatenation, T1 first: `2C×H×W`.
pub fn ccf<T: Float>(tape: &mut Tape<T>, f1: Var, f2: Var) -> Result<Var> {
    same_extents(tape, f1, f2)?;
    tape.concat(&[f1, f2])
}

/// Spatial interleave onto `C×2H×2W`: T1 where the row and column parities
/// differ, T2 where they agree.
pub fn srf<T: Float>(tape: &mut Tape<T>, f1: Var, f2: Var) -> Result<Var> {
    same_extents(tape, f1, f2)?;
    tape.interleave(f1, f2)
}

/// The four phase sub-grids in [`PHASES`] order. For an [`srf`] map these are
/// `T2, T1, T1, T2`.
pub fn deinterleave<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<[Var; 4]> {
    let mut out = [x; 4];
    for (slot, &(r, c)) in out.iter_mut().zip(&PHASES) {
        *slot = tape.phase(x, r, c)?;
    }
    Ok(out)
}

/// Interleave, scan with 2D-Mamba blocks at `2H×2W`, split the phases back out
/// and merge them with a `1×1` convolution `4C → C`.
#[derive(Clone, Debug)]
pub struct StcBlock {
    pub blocks: Vec<Mamba2dBlock>,
    pub merge: Conv,
}

impl StcBlock {
    pub fn new<T: Float, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        depth: usize,
        cfg: &EncoderConfig,
        scan: ScanSpec,
    ) -> Self {
        init.scope(name, |init| {
            let blocks = (0..depth)
                .map(|b| {
                    Mamba2dBlock::new(
                        init,
                        &format!("block{b}"),
                        channels,
                        cfg.expansion,
                        cfg.state_dim,
                        cfg.conv_kernel,
                        cfg.depthwise,
                        scan,
                    )
                })
                .collect();
            let merge = Conv::new(init, "merge", 4 * channels, channels, 1, 1, true);
            StcBlock { blocks, merge }
        })
    }

    /// The concatenated phases `4C×H×W` before the merge convolution.
    pub fn phases<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, f1: Var, f2: Var) -> Result<Var> {
        let mut h = srf(tape, f1, f2)?;
        for block in &self.blocks {
            h = block.forward(tape, p, h)?;
        }
        let parts = deinterleave(tape, h)?;
        tape.concat(&parts)
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, f1: Var, f2: Var) -> Result<Var> {
        let cat = self.phases(tape, p, f1, f2)?;
        self.merge.forward(tape, p, cat)
    }
}

/// Per-stage fusion producing one decoder-width level feature
/// `L = W_stc · STC(f1, f2) + W_ccf · CCF(f1, f2)`.
#[derive(Clone, Debug)]
pub struct StageFusion {
    pub stc: StcBlock,
    pub stc_compress: Conv,
    pub ccf_compress: Conv,
}

impl StageFusion {
    pub fn new<T: Float, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        decoder_channels: usize,
        stc_depth: usize,
        cfg: &EncoderConfig,
        scan: ScanSpec,
    ) -> Self {
        init.scope(name, |init| StageFusion {
            stc: StcBlock::new(init, "stc", channels, stc_depth, cfg, scan),
            stc_compress: Conv::new(init, "stc_compress", channels, decoder_channels, 1, 1, true),
            ccf_compress: Conv::new(init, "ccf_compress", 2 * channels, decoder_channels, 1, 1, true),
        })
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, p: &Bound, f1: Var, f2: Var) -> Result<Var> {
        let change = self.stc.forward(tape, p, f1, f2)?;
        let change = self.stc_compress.forward(tape, p, change)?;
        let fused = ccf(tape, f1, f2)?;
        let lateral = self.ccf_compress.forward(tape, p, fused)?;
        tape.add(change, lateral)
    }
}
