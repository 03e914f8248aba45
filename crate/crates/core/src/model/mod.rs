//! Convolutional autoencoder: configuration, latent-shape arithmetic and the network.
//!
//! Each encoder stage is a stride-2 convolution that doubles the channel
//! count followed by residual blocks. Each decoder stage is a 2x bilinear
//! upsample, a padded convolution that halves the channel count, and the
//! same number of residual blocks. A final padded convolution with a sigmoid
//! maps back to the input channels.

mod checkpoint;
mod network;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use network::{build_model, AutoencoderModel, Conv, DecoderStage, EncoderStage, ResidualBlock};

/// Smallest side length allowed for the latent grid when solving for a target size.
pub const MIN_LATENT_SIDE: usize = 4;
/// Smallest number of latent grid cells (`h * w`) allowed when solving for a target size.
pub const MIN_LATENT_CELLS: usize = 32;

/// Which activation of the last encoder layer is exported as the latent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentTap {
    #[default]
    PostActivation,
    PreActivation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    /// `(channels, height, width)` of every input sample.
    pub input_shape: (usize, usize, usize),
    pub kernel_size: usize,
    /// Number of downsampling (and upsampling) stages.
    pub depth: usize,
    /// Channels after the first encoder stage.
    pub base_channels: usize,
    pub residual_blocks_per_stage: usize,
    /// When set, `depth` and `base_channels` must reproduce this many latent neurons.
    #[serde(default)]
    pub target_latent_size: Option<usize>,
    #[serde(default)]
    pub latent_tap: LatentTap,
}

impl AutoencoderConfig {
    pub fn new(input_shape: (usize, usize, usize), depth: usize, base_channels: usize) -> Self {
        Self {
            input_shape,
            kernel_size: 3,
            depth,
            base_channels,
            residual_blocks_per_stage: 2,
            target_latent_size: None,
            latent_tap: LatentTap::PostActivation,
        }
    }

    /// Solves `depth` and `base_channels` so the latent has exactly `target` neurons.
    ///
    /// Picks the largest depth whose latent grid keeps both sides at least
    /// [`MIN_LATENT_SIDE`] and at least [`MIN_LATENT_CELLS`] cells, and for
    /// which an integer channel count exists.
    pub fn for_latent_size(input_shape: (usize, usize, usize), target: usize) -> Result<Self> {
        let (depth, base_channels) = solve_depth(input_shape, target)?;
        Ok(Self {
            target_latent_size: Some(target),
            ..Self::new(input_shape, depth, base_channels)
        })
    }

    /// Fills in `depth`/`base_channels` from `target_latent_size` if they do not already match it.
    pub fn resolve(&self) -> Result<Self> {
        let Some(target) = self.target_latent_size else {
            self.validate()?;
            return Ok(self.clone());
        };
        if self.depth >= 1 && self.base_channels >= 1 && self.spatial_ok() {
            if let Ok(size) = self.latent_size() {
                if size == target {
                    return Ok(self.clone());
                }
            }
        }
        let (depth, base_channels) = solve_depth(self.input_shape, target)?;
        let resolved = Self {
            depth,
            base_channels,
            ..self.clone()
        };
        resolved.validate()?;
        Ok(resolved)
    }

    fn spatial_ok(&self) -> bool {
        let (_, h, w) = self.input_shape;
        self.depth < usize::BITS as usize && h % (1 << self.depth) == 0 && w % (1 << self.depth) == 0
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("empty input shape {:?}", self.input_shape)));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd and >= 1, got {}",
                self.kernel_size
            )));
        }
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("depth and base_channels must be >= 1".into()));
        }
        if !self.spatial_ok() {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by 2^{} = {}",
                self.depth,
                1usize.checked_shl(self.depth as u32).unwrap_or(0)
            )));
        }
        if let Some(target) = self.target_latent_size {
            let size = self.latent_size()?;
            if size != target {
                return Err(Error::Config(format!(
                    "depth {} / base_channels {} give {size} latent neurons, expected {target}",
                    self.depth, self.base_channels
                )));
            }
        }
        Ok(())
    }

    /// Channel count after encoder stage `stage` (0-based).
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn latent_size(&self) -> Result<usize> {
        let (c, h, w) = infer_latent_shape(self)?;
        Ok(c * h * w)
    }

    /// Closed-form number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let conv = |cin: usize, cout: usize| cout * cin * k2 + cout;
        let blocks = |ch: usize| self.residual_blocks_per_stage * 2 * conv(ch, ch);
        let mut total = 0;
        for s in 0..self.depth {
            let cin = if s == 0 { self.input_shape.0 } else { self.stage_channels(s - 1) };
            let cout = self.stage_channels(s);
            total += conv(cin, cout) + blocks(cout);
        }
        for s in (0..self.depth).rev() {
            let cin = self.stage_channels(s);
            let cout = self.decoder_out_channels(s);
            total += conv(cin, cout) + blocks(cout);
        }
        total + conv(self.base_channels, self.input_shape.0)
    }

    /// Output channels of the decoder stage that mirrors encoder stage `stage`.
    pub(crate) fn decoder_out_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.base_channels
        } else {
            self.stage_channels(stage - 1)
        }
    }
}

/// `(channels, h, w)` of the encoder output.
pub fn infer_latent_shape(config: &AutoencoderConfig) -> Result<(usize, usize, usize)> {
    let (_, h, w) = config.input_shape;
    if config.depth == 0 || config.base_channels == 0 {
        return Err(Error::Config("depth and base_channels must be >= 1".into()));
    }
    if !config.spatial_ok() {
        return Err(Error::Config(format!(
            "input {h}x{w} is not divisible by 2^{}",
            config.depth
        )));
    }
    let f = 1usize << config.depth;
    Ok((config.stage_channels(config.depth - 1), h / f, w / f))
}

/// Depths admissible for an input, deepest first, each with the latent size step
/// (the latent size when `base_channels == 1`).
pub fn feasible_depths(input_shape: (usize, usize, usize)) -> Vec<(usize, usize)> {
    let (_, h, w) = input_shape;
    let mut out = Vec::new();
    let mut depth = 1;
    while depth < 32 && h % (1 << depth) == 0 && w % (1 << depth) == 0 {
        let (lh, lw) = (h >> depth, w >> depth);
        if lh >= MIN_LATENT_SIDE && lw >= MIN_LATENT_SIDE && lh * lw >= MIN_LATENT_CELLS {
            out.push((depth, (1usize << (depth - 1)) * lh * lw));
        }
        depth += 1;
    }
    out.reverse();
    out
}

fn solve_depth(input_shape: (usize, usize, usize), target: usize) -> Result<(usize, usize)> {
    let options = feasible_depths(input_shape);
    if target > 0 {
        for &(depth, step) in &options {
            if target.is_multiple_of(step) {
                return Ok((depth, target / step));
            }
        }
    }
    let listing = options
        .iter()
        .map(|(d, step)| format!("depth {d}: multiples of {step}"))
        .collect::<Vec<_>>()
        .join(", ");
    Err(Error::Config(format!(
        "no depth/base_channels for latent size {target} on input {}x{}; feasible latent sizes are {}",
        input_shape.1,
        input_shape.2,
        if listing.is_empty() { "none".to_string() } else { listing }
    )))
}
