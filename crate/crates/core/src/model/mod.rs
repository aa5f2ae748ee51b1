//! The Siamese change-detection network.

mod block;
mod decoder;
mod encoder;
mod fusion;
mod layers;
mod params;

pub use block::{DepthwiseKernel, Mamba2dBlock};
pub use decoder::{upsample2, CfgLevel, Decoded, Decoder, FlowMake, HEAD_UPSAMPLE};
pub use encoder::{Encoder, EncoderConfig, Stage, Stem, INPUT_MULTIPLE};
pub use fusion::{ccf, deinterleave, srf, StageFusion, StcBlock, PHASES};
pub use layers::{ChannelNorm, Conv, NORM_EPS};
pub use params::{Bound, Init, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Directions, ScanMode, ScanSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Common channel width of the decoder levels.
    pub decoder_channels: usize,
    /// 2D-Mamba blocks inside each change block.
    pub stc_blocks: usize,
    /// Learned flow in the decoder; otherwise plain bilinear upsampling.
    pub use_flow: bool,
    /// Two-pass 2D scan; otherwise a row-major flattened 1D scan.
    pub use_2ds: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder_channels: 16,
            stc_blocks: 1,
            use_flow: true,
            use_2ds: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_channels == 0 || self.stc_blocks == 0 {
            return Err(Error::Config("decoder_channels and stc_blocks must be positive".into()));
        }
        Ok(())
    }

    pub fn scan_spec(&self) -> ScanSpec {
        ScanSpec {
            mode: if self.use_2ds { ScanMode::TwoD } else { ScanMode::Flattened },
            directions: Directions::Four,
        }
    }
}

/// Parameter-free wiring of the network; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub encoder: Encoder,
    pub fusions: Vec<StageFusion>,
    pub decoder: Decoder,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward {
    pub features_t1: [Var; 4],
    pub features_t2: [Var; 4],
    pub levels: [Var; 4],
    pub log_probs: Var,
    pub flows: Vec<Var>,
}

/// Result of [`ChangeDetector::predict`].
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// `2×H×W` class probabilities.
    pub probs: Tensor<T>,
    /// Row-major `H×W` argmax, 1 = change.
    pub mask: Vec<u8>,
    /// Learned flows, coarsest first, each `2×H'×W'`.
    pub flows: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ChangeDetector<T> {
    pub config: ModelConfig,
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Float> ChangeDetector<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, &mut rng);
        let scan = config.scan_spec();
        let enc = &config.encoder;
        let encoder = Encoder::new(&mut init, enc, scan);
        let fusions = (0..4)
            .map(|s| {
                StageFusion::new(
                    &mut init,
                    &format!("fusion{}", s + 1),
                    enc.stage_channels(s),
                    config.decoder_channels,
                    config.stc_blocks,
                    enc,
                    scan,
                )
            })
            .collect();
        let decoder = Decoder::new(&mut init, config.decoder_channels, config.use_flow);
        Ok(Self {
            config,
            net: Network {
                encoder,
                fusions,
                decoder,
            },
            params,
        })
    }

    /// Same wiring and values at another precision.
    pub fn cast<U: Float>(&self) -> ChangeDetector<U> {
        ChangeDetector {
            config: self.config.clone(),
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Records the whole network on `tape`. Both images go through the one
    /// encoder with the same bound parameters.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, t1: Var, t2: Var) -> Result<Forward> {
        if tape.shape(t1) != tape.shape(t2) {
            return Err(Error::shape(format!(
                "image pair extents differ: {:?} vs {:?}",
                tape.shape(t1),
                tape.shape(t2)
            )));
        }
        let features_t1 = self.net.encoder.encode(tape, p, t1)?;
        let features_t2 = self.net.encoder.encode(tape, p, t2)?;
        let mut levels = features_t1;
        for (s, fusion) in self.net.fusions.iter().enumerate() {
            levels[s] = fusion.forward(tape, p, features_t1[s], features_t2[s])?;
        }
        let Decoded { log_probs, flows } = self.net.decoder.forward(tape, p, &levels)?;
        Ok(Forward {
            features_t1,
            features_t2,
            levels,
            log_probs,
            flows,
        })
    }

    /// Inference on one `3×H×W` pair without recording gradients.
    pub fn predict(&self, t1: &Tensor<T>, t2: &Tensor<T>) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let (v1, v2) = (tape.leaf(t1), tape.leaf(t2));
        let out = self.forward(&mut tape, &p, v1, v2)?;
        let lp = tape.value(out.log_probs);
        let plane = lp.len() / 2;
        let probs: Vec<T> = lp.iter().map(|v| v.exp()).collect();
        let mask = (0..plane).map(|q| u8::from(lp[plane + q] > lp[q])).collect();
        Ok(Prediction {
            probs: Tensor::new(tape.shape(out.log_probs).to_vec(), probs)?,
            mask,
            flows: out.flows.iter().map(|&f| tape.tensor(f)).collect(),
        })
    }
}
