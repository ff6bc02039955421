use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Kernel widths of the seven waveform convolutions.
pub const EXTRACTOR_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];
/// Strides of the seven waveform convolutions; their product is 320.
pub const EXTRACTOR_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];
/// Frames per second of extractor output at 16 kHz input.
pub const FRAME_RATE: u32 = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneStyle {
    /// Masked frames replaced by a learned embedding, full-length encoder.
    Standard,
    /// Encoder sees visible frames only; a convolutional decoder fills the
    /// masked positions from Gaussian noise.
    MaeDecoder,
}

impl FromStr for BackboneStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "mae_decoder" => Ok(Self::MaeDecoder),
            other => Err(Error::Config(format!("unknown backbone_style `{other}`"))),
        }
    }
}

impl fmt::Display for BackboneStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::MaeDecoder => "mae_decoder",
        })
    }
}

/// Normalisation applied to each teacher block output before the top-k
/// average.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetNorm {
    None,
    /// Per channel over time. Makes every target's time-mean exactly zero.
    Instance,
    /// Per frame over channels, without affine parameters.
    Layer,
}

impl FromStr for TargetNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "instance" => Ok(Self::Instance),
            "layer" => Ok(Self::Layer),
            other => Err(Error::Config(format!("unknown target_norm `{other}`"))),
        }
    }
}

impl fmt::Display for TargetNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Instance => "instance",
            Self::Layer => "layer",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub backbone_style: BackboneStyle,
    pub n_utt_tokens: usize,
    pub top_k: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_kernel: usize,
    pub pos_conv_layers: usize,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    pub target_norm: TargetNorm,
    /// Standard deviation of the noise that fills masked frames in the
    /// decoder style.
    pub decoder_noise_std: f64,
}

impl ModelConfig {
    /// Workstation-sized defaults.
    pub fn desk() -> Self {
        Self {
            d_feat: 32,
            d_model: 48,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 96,
            backbone_style: BackboneStyle::Standard,
            n_utt_tokens: 8,
            top_k: 3,
            decoder_dim: 24,
            decoder_layers: 4,
            decoder_kernel: 7,
            pos_conv_layers: 5,
            pos_conv_kernel: 19,
            pos_conv_groups: 16,
            target_norm: TargetNorm::Layer,
            decoder_noise_std: 1.0,
        }
    }

    /// Base-size widths of the original recipe.
    pub fn base() -> Self {
        Self {
            d_feat: 512,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ffn: 3072,
            top_k: 8,
            decoder_dim: 384,
            ..Self::desk()
        }
    }

    /// Smallest useful network, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_feat: 4,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 12,
            backbone_style: BackboneStyle::Standard,
            n_utt_tokens: 2,
            top_k: 2,
            decoder_dim: 6,
            decoder_layers: 2,
            decoder_kernel: 3,
            pos_conv_layers: 2,
            pos_conv_kernel: 3,
            pos_conv_groups: 2,
            target_norm: TargetNorm::Layer,
            decoder_noise_std: 1.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "base" => Ok(Self::base()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_feat == 0 || self.d_model == 0 || self.d_ffn == 0 || self.n_layers == 0 {
            return fail("dimensions and depth must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.top_k == 0 || self.top_k > self.n_layers {
            return fail(format!("top_k must be in [1, {}], got {}", self.n_layers, self.top_k));
        }
        if self.pos_conv_groups == 0 || self.d_model % self.pos_conv_groups != 0 {
            return fail(format!(
                "pos_conv_groups ({}) must divide d_model ({})",
                self.pos_conv_groups, self.d_model
            ));
        }
        if self.pos_conv_kernel == 0 {
            return fail("pos_conv_kernel must be positive".into());
        }
        if self.backbone_style == BackboneStyle::MaeDecoder
            && (self.decoder_dim == 0 || self.decoder_layers == 0 || self.decoder_kernel == 0)
        {
            return fail("decoder dimensions must be positive".into());
        }
        if !(self.decoder_noise_std >= 0.0 && self.decoder_noise_std.is_finite()) {
            return fail("decoder_noise_std must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Flat `key = value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_feat", self.d_feat.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ffn", self.d_ffn.to_string()),
            ("backbone_style", self.backbone_style.to_string()),
            ("n_utt_tokens", self.n_utt_tokens.to_string()),
            ("top_k", self.top_k.to_string()),
            ("decoder_dim", self.decoder_dim.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("decoder_kernel", self.decoder_kernel.to_string()),
            ("pos_conv_layers", self.pos_conv_layers.to_string()),
            ("pos_conv_kernel", self.pos_conv_kernel.to_string()),
            ("pos_conv_groups", self.pos_conv_groups.to_string()),
            ("target_norm", self.target_norm.to_string()),
            ("decoder_noise_std", self.decoder_noise_std.to_string()),
        ]
    }

    /// Sets one key; returns `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "d_feat" => self.d_feat = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "d_ffn" => self.d_ffn = num(key, value)?,
            "backbone_style" => self.backbone_style = value.trim().parse()?,
            "n_utt_tokens" => self.n_utt_tokens = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "decoder_dim" => self.decoder_dim = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "decoder_kernel" => self.decoder_kernel = num(key, value)?,
            "pos_conv_layers" => self.pos_conv_layers = num(key, value)?,
            "pos_conv_kernel" => self.pos_conv_kernel = num(key, value)?,
            "pos_conv_groups" => self.pos_conv_groups = num(key, value)?,
            "target_norm" => self.target_norm = value.trim().parse()?,
            "decoder_noise_std" => self.decoder_noise_std = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
            if !cfg.set(k.trim(), v.trim())? {
                return Err(Error::Config(format!("unknown model key `{}`", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Frames produced from `n_samples` raw samples.
    pub fn n_frames(n_samples: usize) -> usize {
        EXTRACTOR_KERNELS
            .iter()
            .zip(EXTRACTOR_STRIDES)
            .fold(n_samples, |len, (&k, s)| if len < k { 0 } else { (len - k) / s + 1 })
    }

    /// Shortest input that yields at least one frame.
    pub fn min_samples() -> usize {
        EXTRACTOR_KERNELS
            .iter()
            .zip(EXTRACTOR_STRIDES)
            .rev()
            .fold(1, |need, (&k, s)| (need - 1) * s + k)
    }

    /// Raw samples needed for exactly `n_frames` frames.
    pub fn samples_for_frames(n_frames: usize) -> usize {
        Self::min_samples() + (n_frames.max(1) - 1) * 320
    }
}
