//! Named parameter arrays for one network (student or teacher).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{BackboneStyle, ModelConfig, EXTRACTOR_KERNELS, EXTRACTOR_STRIDES};
use super::nn::ConvGeom;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    fn init(n_in: usize, n_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Tensor::normal(&[n_out, n_in], std, rng),
            bias: Tensor::zeros(&[n_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    fn init(dim: usize) -> Self {
        Self {
            gain: Tensor::filled(&[dim], 1.0),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn affine(&self) -> Option<(&[f64], &[f64])> {
        Some((&self.gain.data, &self.bias.data))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[kernel, out, in / groups]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn init(g: &ConvGeom, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Tensor::normal(&[g.kernel, g.out_ch, g.in_ch / g.groups], std, rng),
            bias: Tensor::zeros(&[g.out_ch]),
        }
    }
}

/// Convolution followed by a channel norm and GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNormParams {
    pub conv: ConvParams,
    pub norm: NormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub qkv: LinearParams,
    pub attn_out: LinearParams,
    pub norm1: NormParams,
    pub ffn_in: LinearParams,
    pub ffn_out: LinearParams,
    pub norm2: NormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub layers: Vec<ConvNormParams>,
    pub proj: LinearParams,
}

/// Which update rule a parameter array follows under the teacher EMA.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Waveform convolutions and the frame projection: copied verbatim.
    Extractor,
    /// Everything downstream of the extractor: exponential moving average.
    Backbone,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub extractor: Vec<ConvNormParams>,
    pub feature_norm: NormParams,
    pub feature_proj: LinearParams,
    pub mask_embedding: Tensor,
    pub pos_conv: Vec<ConvParams>,
    pub encoder_norm: NormParams,
    /// `[n_utt_tokens, d_model]`
    pub utt_tokens: Tensor,
    pub blocks: Vec<BlockParams>,
    pub head: LinearParams,
    pub decoder: Option<DecoderParams>,
}

/// Geometry of extractor layer `i`.
pub fn extractor_geom(cfg: &ModelConfig, i: usize) -> ConvGeom {
    let in_ch = if i == 0 { 1 } else { cfg.d_feat };
    ConvGeom::valid(in_ch, cfg.d_feat, EXTRACTOR_KERNELS[i], EXTRACTOR_STRIDES[i])
}

pub fn pos_conv_geom(cfg: &ModelConfig) -> ConvGeom {
    ConvGeom::same(cfg.d_model, cfg.d_model, cfg.pos_conv_kernel, cfg.pos_conv_groups)
}

pub fn decoder_geom(cfg: &ModelConfig, i: usize) -> ConvGeom {
    let in_ch = if i == 0 { cfg.d_model } else { cfg.decoder_dim };
    ConvGeom::same(in_ch, cfg.decoder_dim, cfg.decoder_kernel, 1)
}

/// Standard deviation of transformer and projection weights.
const LINEAR_STD: f64 = 0.02;

impl Parameters {
    /// Deterministic initialisation from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;

        let extractor = (0..EXTRACTOR_KERNELS.len())
            .map(|i| {
                let g = extractor_geom(cfg, i);
                let fan_in = (g.kernel * g.in_ch) as f64;
                ConvNormParams {
                    conv: ConvParams::init(&g, (2.0 / fan_in).sqrt(), &mut rng),
                    norm: NormParams::init(cfg.d_feat),
                }
            })
            .collect();
        let feature_norm = NormParams::init(cfg.d_feat);
        let feature_proj = LinearParams::init(cfg.d_feat, d, 1.0 / (cfg.d_feat as f64).sqrt(), &mut rng);
        let mask_embedding = Tensor::normal(&[d], 1.0, &mut rng);

        let pg = pos_conv_geom(cfg);
        let pos_std = (4.0 / (cfg.pos_conv_kernel * d) as f64).sqrt();
        let pos_conv = (0..cfg.pos_conv_layers)
            .map(|_| ConvParams::init(&pg, pos_std, &mut rng))
            .collect();
        let encoder_norm = NormParams::init(d);
        let utt_tokens = Tensor::normal(&[cfg.n_utt_tokens, d], LINEAR_STD, &mut rng);

        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                qkv: LinearParams::init(d, 3 * d, LINEAR_STD, &mut rng),
                attn_out: LinearParams::init(d, d, LINEAR_STD, &mut rng),
                norm1: NormParams::init(d),
                ffn_in: LinearParams::init(d, cfg.d_ffn, LINEAR_STD, &mut rng),
                ffn_out: LinearParams::init(cfg.d_ffn, d, LINEAR_STD, &mut rng),
                norm2: NormParams::init(d),
            })
            .collect();
        let head = LinearParams::init(d, d, LINEAR_STD, &mut rng);

        let decoder = match cfg.backbone_style {
            BackboneStyle::Standard => None,
            BackboneStyle::MaeDecoder => Some(DecoderParams {
                layers: (0..cfg.decoder_layers)
                    .map(|i| {
                        let g = decoder_geom(cfg, i);
                        ConvNormParams {
                            conv: ConvParams::init(&g, (1.0 / (g.kernel * g.in_ch) as f64).sqrt(), &mut rng),
                            norm: NormParams::init(cfg.decoder_dim),
                        }
                    })
                    .collect(),
                proj: LinearParams::init(cfg.decoder_dim, d, LINEAR_STD, &mut rng),
            }),
        };

        Ok(Self {
            extractor,
            feature_norm,
            feature_proj,
            mask_embedding,
            pos_conv,
            encoder_norm,
            utt_tokens,
            blocks,
            head,
            decoder,
        })
    }

    /// Zero-valued arrays of the same shapes, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, _, t| t.data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Visits every array in a fixed order with its dotted name and group.
    pub fn for_each(&self, mut f: impl FnMut(&str, ParamGroup, &Tensor)) {
        for (name, group, t) in self.named() {
            f(&name, group, t);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, ParamGroup, &mut Tensor)) {
        for (name, group, t) in self.named_mut() {
            f(&name, group, t);
        }
    }

    /// Pairs every array of `self` with the same-named array of `other`.
    pub fn zip_mut(
        &mut self,
        other: &Parameters,
        mut f: impl FnMut(&str, ParamGroup, &mut Tensor, &Tensor),
    ) -> Result<()> {
        let theirs = other.named();
        let mine = self.named_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "parameter sets have {} and {} arrays",
                mine.len(),
                theirs.len()
            )));
        }
        for ((name, _, a), (other_name, _, b)) in mine.iter().zip(&theirs) {
            if name != other_name || a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "`{name}` {:?} vs `{other_name}` {:?}",
                    a.shape, b.shape
                )));
            }
        }
        for ((name, group, a), (_, _, b)) in mine.into_iter().zip(theirs) {
            f(&name, group, a, b);
        }
        Ok(())
    }

    pub fn n_values(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, t| n += t.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, _, t| ok &= t.data.iter().all(|v| v.is_finite()));
        ok
    }

    /// FNV-1a over the bit patterns of every value, in visiting order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        self.for_each(|_, _, t| {
            for v in &t.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        });
        h
    }

    pub fn named(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        use ParamGroup::*;
        let mut out: Vec<(String, ParamGroup, &Tensor)> = Vec::new();
        for (i, l) in self.extractor.iter().enumerate() {
            out.push((format!("extractor.{i}.conv.weight"), Extractor, &l.conv.weight));
            out.push((format!("extractor.{i}.conv.bias"), Extractor, &l.conv.bias));
            out.push((format!("extractor.{i}.norm.gain"), Extractor, &l.norm.gain));
            out.push((format!("extractor.{i}.norm.bias"), Extractor, &l.norm.bias));
        }
        out.push(("feature_norm.gain".into(), Extractor, &self.feature_norm.gain));
        out.push(("feature_norm.bias".into(), Extractor, &self.feature_norm.bias));
        out.push(("feature_proj.weight".into(), Extractor, &self.feature_proj.weight));
        out.push(("feature_proj.bias".into(), Extractor, &self.feature_proj.bias));
        out.push(("mask_embedding".into(), Backbone, &self.mask_embedding));
        for (i, c) in self.pos_conv.iter().enumerate() {
            out.push((format!("pos_conv.{i}.weight"), Backbone, &c.weight));
            out.push((format!("pos_conv.{i}.bias"), Backbone, &c.bias));
        }
        out.push(("encoder_norm.gain".into(), Backbone, &self.encoder_norm.gain));
        out.push(("encoder_norm.bias".into(), Backbone, &self.encoder_norm.bias));
        out.push(("utt_tokens".into(), Backbone, &self.utt_tokens));
        for (i, b) in self.blocks.iter().enumerate() {
            for (part, lin) in [("qkv", &b.qkv), ("attn_out", &b.attn_out), ("ffn_in", &b.ffn_in), ("ffn_out", &b.ffn_out)] {
                out.push((format!("blocks.{i}.{part}.weight"), Backbone, &lin.weight));
                out.push((format!("blocks.{i}.{part}.bias"), Backbone, &lin.bias));
            }
            for (part, n) in [("norm1", &b.norm1), ("norm2", &b.norm2)] {
                out.push((format!("blocks.{i}.{part}.gain"), Backbone, &n.gain));
                out.push((format!("blocks.{i}.{part}.bias"), Backbone, &n.bias));
            }
        }
        out.push(("head.weight".into(), Backbone, &self.head.weight));
        out.push(("head.bias".into(), Backbone, &self.head.bias));
        if let Some(dec) = &self.decoder {
            for (i, l) in dec.layers.iter().enumerate() {
                out.push((format!("decoder.{i}.conv.weight"), Backbone, &l.conv.weight));
                out.push((format!("decoder.{i}.conv.bias"), Backbone, &l.conv.bias));
                out.push((format!("decoder.{i}.norm.gain"), Backbone, &l.norm.gain));
                out.push((format!("decoder.{i}.norm.bias"), Backbone, &l.norm.bias));
            }
            out.push(("decoder.proj.weight".into(), Backbone, &dec.proj.weight));
            out.push(("decoder.proj.bias".into(), Backbone, &dec.proj.bias));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ParamGroup, &mut Tensor)> {
        use ParamGroup::*;
        let mut out: Vec<(String, ParamGroup, &mut Tensor)> = Vec::new();
        for (i, l) in self.extractor.iter_mut().enumerate() {
            out.push((format!("extractor.{i}.conv.weight"), Extractor, &mut l.conv.weight));
            out.push((format!("extractor.{i}.conv.bias"), Extractor, &mut l.conv.bias));
            out.push((format!("extractor.{i}.norm.gain"), Extractor, &mut l.norm.gain));
            out.push((format!("extractor.{i}.norm.bias"), Extractor, &mut l.norm.bias));
        }
        out.push(("feature_norm.gain".into(), Extractor, &mut self.feature_norm.gain));
        out.push(("feature_norm.bias".into(), Extractor, &mut self.feature_norm.bias));
        out.push(("feature_proj.weight".into(), Extractor, &mut self.feature_proj.weight));
        out.push(("feature_proj.bias".into(), Extractor, &mut self.feature_proj.bias));
        out.push(("mask_embedding".into(), Backbone, &mut self.mask_embedding));
        for (i, c) in self.pos_conv.iter_mut().enumerate() {
            out.push((format!("pos_conv.{i}.weight"), Backbone, &mut c.weight));
            out.push((format!("pos_conv.{i}.bias"), Backbone, &mut c.bias));
        }
        out.push(("encoder_norm.gain".into(), Backbone, &mut self.encoder_norm.gain));
        out.push(("encoder_norm.bias".into(), Backbone, &mut self.encoder_norm.bias));
        out.push(("utt_tokens".into(), Backbone, &mut self.utt_tokens));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let BlockParams {
                qkv,
                attn_out,
                norm1,
                ffn_in,
                ffn_out,
                norm2,
            } = b;
            for (part, lin) in [("qkv", qkv), ("attn_out", attn_out), ("ffn_in", ffn_in), ("ffn_out", ffn_out)] {
                out.push((format!("blocks.{i}.{part}.weight"), Backbone, &mut lin.weight));
                out.push((format!("blocks.{i}.{part}.bias"), Backbone, &mut lin.bias));
            }
            for (part, n) in [("norm1", norm1), ("norm2", norm2)] {
                out.push((format!("blocks.{i}.{part}.gain"), Backbone, &mut n.gain));
                out.push((format!("blocks.{i}.{part}.bias"), Backbone, &mut n.bias));
            }
        }
        out.push(("head.weight".into(), Backbone, &mut self.head.weight));
        out.push(("head.bias".into(), Backbone, &mut self.head.bias));
        if let Some(dec) = &mut self.decoder {
            for (i, l) in dec.layers.iter_mut().enumerate() {
                out.push((format!("decoder.{i}.conv.weight"), Backbone, &mut l.conv.weight));
                out.push((format!("decoder.{i}.conv.bias"), Backbone, &mut l.conv.bias));
                out.push((format!("decoder.{i}.norm.gain"), Backbone, &mut l.norm.gain));
                out.push((format!("decoder.{i}.norm.bias"), Backbone, &mut l.norm.bias));
            }
            out.push(("decoder.proj.weight".into(), Backbone, &mut dec.proj.weight));
            out.push(("decoder.proj.bias".into(), Backbone, &mut dec.proj.bias));
        }
        out
    }

    /// Checks that array shapes agree with `cfg`.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Parameters::init(cfg, 0)?;
        let mut got = Vec::new();
        self.for_each(|n, _, t| got.push((n.to_string(), t.shape.clone())));
        let mut want = Vec::new();
        expected.for_each(|n, _, t| want.push((n.to_string(), t.shape.clone())));
        if got != want {
            let diff = got
                .iter()
                .zip(&want)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("`{}` {:?} vs expected `{}` {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("{} arrays vs expected {}", got.len(), want.len()));
            return Err(Error::Config(format!("parameters do not match model config: {diff}")));
        }
        Ok(())
    }
}
