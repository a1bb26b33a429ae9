//! Scale profiles and experiment configuration.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Network sizes that every module derives its shapes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleProfile {
    pub name: String,
    pub generator_resolution: usize,
    pub style_layer_count: usize,
    pub style_dim: usize,
    pub input_latent_spatial: usize,
    pub input_latent_channels: usize,
    /// Blocks in the identity encoder and IFBlocks in the main encoder.
    pub encoder_block_count: usize,
    /// Side length of every encoder input and of all image losses.
    pub contour_input_resolution: usize,
    /// Side length of low-resolution contours before upsampling.
    pub lr_contour_resolution: usize,
    pub identity_widths: Vec<usize>,
    pub main_widths: Vec<usize>,
    pub bottlenecks_per_block: usize,
    pub fcn_hidden: usize,
    /// Synthesis channels per resolution, 4x4 first.
    pub generator_channels: Vec<usize>,
    pub mapping_layers: usize,
    pub embedding_dim: usize,
    pub perceptual_widths: Vec<usize>,
}

pub fn log2_exact(n: usize) -> Option<u32> {
    (n.is_power_of_two()).then(|| n.trailing_zeros())
}

/// 1024x1024 output, 18x512 style code, 4x4x512 input latent.
pub fn full_profile() -> ScaleProfile {
    ScaleProfile {
        name: "full".into(),
        generator_resolution: 1024,
        style_layer_count: 18,
        style_dim: 512,
        input_latent_spatial: 4,
        input_latent_channels: 512,
        encoder_block_count: 4,
        contour_input_resolution: 256,
        lr_contour_resolution: 32,
        identity_widths: vec![64, 128, 256, 512],
        main_widths: vec![64, 128, 256, 512],
        bottlenecks_per_block: 2,
        fcn_hidden: 128,
        generator_channels: vec![512, 512, 256, 128, 64, 32, 16, 8, 4],
        mapping_layers: 4,
        embedding_dim: 128,
        perceptual_widths: vec![16, 32, 64, 64, 64],
    }
}

/// Desk-scale stand-in: 64x64 output, 10x64 style code, 4x4x64 input latent.
pub fn toy_profile() -> ScaleProfile {
    ScaleProfile {
        name: "toy".into(),
        generator_resolution: 64,
        style_layer_count: 10,
        style_dim: 64,
        input_latent_spatial: 4,
        input_latent_channels: 64,
        encoder_block_count: 4,
        contour_input_resolution: 64,
        lr_contour_resolution: 8,
        identity_widths: vec![32, 64, 128, 256],
        main_widths: vec![32, 48, 64, 64],
        bottlenecks_per_block: 2,
        fcn_hidden: 16,
        generator_channels: vec![64, 64, 32, 24, 12],
        mapping_layers: 4,
        embedding_dim: 64,
        perceptual_widths: vec![8, 16, 24, 32, 32],
    }
}

pub fn profile_by_name(name: &str) -> Option<ScaleProfile> {
    match name {
        "full" => Some(full_profile()),
        "toy" => Some(toy_profile()),
        _ => None,
    }
}

impl ScaleProfile {
    /// Number of stride-2 convolutions in the main encoder's head.
    pub fn head_downsamples(&self) -> usize {
        let head_out = self.input_latent_spatial << (self.encoder_block_count - 1);
        (self.contour_input_resolution / head_out).trailing_zeros() as usize
    }

    pub fn main_block_spatial(&self, block: usize) -> usize {
        let n = self.encoder_block_count;
        if block + 2 >= n {
            self.input_latent_spatial
        } else {
            self.input_latent_spatial << (n - 2 - block)
        }
    }

    /// Spatial side of identity pyramid level `i`: stem stride 4, then /2.
    pub fn identity_level_spatial(&self, level: usize) -> usize {
        (self.contour_input_resolution / 4) >> level
    }

    pub fn validate(&self) -> Result<()> {
        let res = self.generator_resolution;
        let log = log2_exact(res).ok_or_else(|| Error::validation("generator_resolution", "must be a power of two"))?
            as usize;
        if self.style_layer_count != 2 * log - 2 {
            return Err(Error::validation(
                "style_layer_count",
                alloc::format!("must equal 2*log2({res})-2 = {}", 2 * log - 2),
            ));
        }
        if res < 2 * self.input_latent_spatial {
            return Err(Error::validation(
                "generator_resolution",
                "must be at least twice input_latent_spatial",
            ));
        }
        if self.input_latent_spatial != 4 {
            return Err(Error::validation(
                "input_latent_spatial",
                "the synthesis network starts at 4x4",
            ));
        }
        let n = self.encoder_block_count;
        if n < 2 {
            return Err(Error::validation("encoder_block_count", "must be at least 2"));
        }
        if self.identity_widths.len() != n {
            return Err(Error::validation("identity_widths", "need one width per block"));
        }
        if self.main_widths.len() != n {
            return Err(Error::validation("main_widths", "need one width per block"));
        }
        if self.generator_channels.len() != log - 1 {
            return Err(Error::validation(
                "generator_channels",
                "need one entry per resolution from 4 up to generator_resolution",
            ));
        }
        let cin = self.contour_input_resolution;
        let head_out = self.input_latent_spatial << (n - 1);
        if log2_exact(cin).is_none() || cin < head_out {
            return Err(Error::validation(
                "contour_input_resolution",
                alloc::format!("must be a power of two >= {head_out}"),
            ));
        }
        if (cin / 4) >> (n - 1) == 0 {
            return Err(Error::validation(
                "contour_input_resolution",
                "too small for the identity encoder stride plan",
            ));
        }
        if self.lr_contour_resolution == 0 || self.lr_contour_resolution > cin {
            return Err(Error::validation(
                "lr_contour_resolution",
                "must be in 1..=contour_input_resolution",
            ));
        }
        if cin > res {
            return Err(Error::validation(
                "contour_input_resolution",
                "must not exceed generator_resolution",
            ));
        }
        if self.perceptual_widths.is_empty() {
            return Err(Error::validation("perceptual_widths", "must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    LowRes,
    Sketch,
    Mask,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::LowRes => "lr",
            Modality::Sketch => "sketch",
            Modality::Mask => "mask",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(Modality::LowRes),
            "sketch" => Ok(Modality::Sketch),
            "mask" => Ok(Modality::Mask),
            _ => Err(Error::validation("modality", "expected lr, sketch or mask")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AblationFlags {
    pub use_ifblock: bool,
    pub use_input_latent: bool,
    pub load_pretrained_id: bool,
}

impl AblationFlags {
    pub const BASELINE: Self = Self::new(false, false, false);
    pub const IFBLOCK: Self = Self::new(true, false, false);
    pub const INPUT_LATENT: Self = Self::new(true, true, false);
    pub const FULL: Self = Self::new(true, true, true);

    pub const fn new(use_ifblock: bool, use_input_latent: bool, load_pretrained_id: bool) -> Self {
        AblationFlags {
            use_ifblock,
            use_input_latent,
            load_pretrained_id,
        }
    }

    /// Row label in the ablation table.
    pub fn label(self) -> &'static str {
        match (self.use_ifblock, self.use_input_latent, self.load_pretrained_id) {
            (false, false, false) => "baseline",
            (true, false, false) => "+IFBlock",
            (true, true, false) => "+Input Latent",
            (true, true, true) => "Ours",
            _ => "custom",
        }
    }
}

/// Where training faces come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    /// Procedurally rendered faces keyed by identity label.
    Procedural { identities: usize, per_identity: usize },
    /// Directory of square images, or a `label<TAB>path` manifest file.
    Path(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scale: ScaleProfile,
    /// Weights of (pixel L2, perceptual, identity, W-normalization).
    pub lambdas: [f64; 4],
    pub learning_rate: f64,
    pub batch_size: usize,
    pub refinement_steps: usize,
    pub ablation: AblationFlags,
    pub seed: u64,
    pub modality: Modality,
    pub mask_classes: usize,
    /// Identity images paired with every contour.
    pub per_contour: usize,
    pub train_steps: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Element-count normalization of the L2 and W-norm losses.
    pub normalized_losses: bool,
    /// Supervise only the last refinement iteration.
    pub final_only_loss: bool,
    pub average_code_samples: usize,
    pub dataset: DatasetSource,
    /// Limit the paired training set to its first `n` samples (0 = all).
    pub max_train_pairs: usize,
    pub generator_pretrain_steps: usize,
    pub embedder_pretrain_steps: usize,
    pub identity_pretrain_steps: usize,
}

pub const PAPER_LAMBDAS: [f64; 4] = [0.1, 1.0, 0.5, 0.003];

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scale: toy_profile(),
            lambdas: PAPER_LAMBDAS,
            learning_rate: 1e-4,
            batch_size: 8,
            refinement_steps: 5,
            ablation: AblationFlags::FULL,
            seed: 0,
            modality: Modality::LowRes,
            mask_classes: 4,
            per_contour: 10,
            train_steps: 1000,
            checkpoint_every: 500,
            log_every: 1,
            normalized_losses: true,
            final_only_loss: false,
            average_code_samples: 10_000,
            dataset: DatasetSource::Procedural {
                identities: 8,
                per_identity: 8,
            },
            max_train_pairs: 0,
            generator_pretrain_steps: 600,
            embedder_pretrain_steps: 300,
            identity_pretrain_steps: 300,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        for (i, &l) in self.lambdas.iter().enumerate() {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::validation(
                    alloc::format!("lambda{}", i + 1),
                    "loss weights must be finite and non-negative",
                ));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if self.refinement_steps == 0 {
            return Err(Error::validation("refinement_steps", "must be at least 1"));
        }
        if self.mask_classes < 2 {
            return Err(Error::validation("mask_classes", "must be at least 2"));
        }
        if self.per_contour == 0 {
            return Err(Error::validation("per_contour", "must be at least 1"));
        }
        if self.average_code_samples == 0 {
            return Err(Error::validation("average_code_samples", "must be at least 1"));
        }
        if let DatasetSource::Procedural {
            identities,
            per_identity,
        } = self.dataset
        {
            if identities == 0 || per_identity == 0 {
                return Err(Error::validation("dataset", "procedural dataset is empty"));
            }
        }
        Ok(())
    }

    /// Channels of the contour image fed to the main encoder.
    pub fn contour_channels(&self) -> usize {
        match self.modality {
            Modality::LowRes => 3,
            Modality::Sketch => 1,
            Modality::Mask => self.mask_classes,
        }
    }
}
