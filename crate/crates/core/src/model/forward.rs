//! Forward and backward passes of the extractor, backbone and student/teacher
//! heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{BackboneStyle, ModelConfig, TargetNorm, FRAME_RATE};
use super::nn::{self, AttnCache, Mat, NormCache};
use super::params::{
    decoder_geom, extractor_geom, pos_conv_geom, BlockParams, ConvNormParams, Parameters,
};
use crate::corpus::Waveform;
use crate::distill::mask::MaskSpec;
use crate::error::{Error, Result};

/// Downsampled frames `[n_frames, d_model]` at 50 Hz.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Mat,
    pub frame_rate: u32,
}

impl FrameSequence {
    pub fn new(frames: Mat) -> Self {
        Self {
            frames,
            frame_rate: FRAME_RATE,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentOutput {
    /// `[n_utt_tokens, d_model]`
    pub utt_embeddings: Mat,
    /// `[n_frames, d_model]`
    pub frame_embeddings: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    /// `[n_frames, d_model]`
    pub targets: Mat,
}

// ------------------------------------------------------------- extractor

#[derive(Clone, Debug)]
struct ConvNormTrace {
    input: Mat,
    norm: NormCache,
    normed: Mat,
}

fn conv_norm_gelu(
    x: &Mat,
    p: &ConvNormParams,
    g: &nn::ConvGeom,
) -> (Mat, ConvNormTrace) {
    let c = nn::conv1d(x, &p.conv.weight.data, &p.conv.bias.data, g);
    let (normed, norm) = nn::layer_norm(&c, p.norm.affine());
    let out = nn::gelu(&normed);
    (
        out,
        ConvNormTrace {
            input: x.clone(),
            norm,
            normed,
        },
    )
}

fn conv_norm_gelu_backward(
    t: &ConvNormTrace,
    p: &ConvNormParams,
    grad: &mut ConvNormParams,
    g: &nn::ConvGeom,
    dy: &Mat,
) -> Mat {
    let dn = nn::gelu_backward(&t.normed, dy);
    let dc = nn::layer_norm_backward(
        &t.norm,
        &dn,
        Some((&p.norm.gain.data, &mut grad.norm.gain.data, &mut grad.norm.bias.data)),
    );
    nn::conv1d_backward(
        &t.input,
        &p.conv.weight.data,
        g,
        &dc,
        &mut grad.conv.weight.data,
        &mut grad.conv.bias.data,
    )
}

#[derive(Clone, Debug)]
pub struct ExtractorTrace {
    layers: Vec<ConvNormTrace>,
    feature_norm: NormCache,
    normed: Mat,
}

pub fn extractor_forward(
    samples: &[f32],
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<(FrameSequence, ExtractorTrace)> {
    if ModelConfig::n_frames(samples.len()) == 0 {
        return Err(Error::TooShort {
            n_samples: samples.len(),
        });
    }
    let mut x = Mat::from_vec(samples.len(), 1, samples.iter().map(|&s| s as f64).collect());
    let mut layers = Vec::with_capacity(params.extractor.len());
    for (i, p) in params.extractor.iter().enumerate() {
        let (y, t) = conv_norm_gelu(&x, p, &extractor_geom(cfg, i));
        layers.push(t);
        x = y;
    }
    let (normed, feature_norm) = nn::layer_norm(&x, params.feature_norm.affine());
    let z = nn::linear(&normed, &params.feature_proj.weight.data, &params.feature_proj.bias.data);
    Ok((
        FrameSequence::new(z),
        ExtractorTrace {
            layers,
            feature_norm,
            normed,
        },
    ))
}

pub fn extractor_backward(
    trace: &ExtractorTrace,
    params: &Parameters,
    grads: &mut Parameters,
    cfg: &ModelConfig,
    dz: &Mat,
) {
    let dn = nn::linear_backward(
        &trace.normed,
        &params.feature_proj.weight.data,
        dz,
        &mut grads.feature_proj.weight.data,
        &mut grads.feature_proj.bias.data,
    );
    let mut dx = nn::layer_norm_backward(
        &trace.feature_norm,
        &dn,
        Some((
            &params.feature_norm.gain.data,
            &mut grads.feature_norm.gain.data,
            &mut grads.feature_norm.bias.data,
        )),
    );
    for i in (0..trace.layers.len()).rev() {
        let g = extractor_geom(cfg, i);
        dx = conv_norm_gelu_backward(&trace.layers[i], &params.extractor[i], &mut grads.extractor[i], &g, &dx);
    }
}

/// Waveform to projected frames `[n_frames, d_model]`.
pub fn extract_features(
    waveform: &Waveform,
    params: &Parameters,
    cfg: &ModelConfig,
) -> Result<FrameSequence> {
    extractor_forward(&waveform.samples, params, cfg).map(|(z, _)| z)
}

// ---------------------------------------------------- positional prefix

#[derive(Clone, Debug)]
struct PrefixTrace {
    /// Input and pre-activation of every positional conv layer.
    inputs: Vec<Mat>,
    pre_act: Vec<Mat>,
    norm: NormCache,
}

/// Convolutional positional encoding (residual) followed by the encoder norm.
fn prefix_forward(x: &Mat, params: &Parameters, cfg: &ModelConfig) -> (Mat, PrefixTrace) {
    let g = pos_conv_geom(cfg);
    let mut h = x.clone();
    let mut inputs = Vec::with_capacity(params.pos_conv.len());
    let mut pre_act = Vec::with_capacity(params.pos_conv.len());
    for c in &params.pos_conv {
        let pre = nn::conv1d(&h, &c.weight.data, &c.bias.data, &g);
        inputs.push(std::mem::replace(&mut h, nn::gelu(&pre)));
        pre_act.push(pre);
    }
    let mut sum = x.clone();
    if !params.pos_conv.is_empty() {
        sum.add_assign(&h);
    }
    let (out, norm) = nn::layer_norm(&sum, params.encoder_norm.affine());
    (
        out,
        PrefixTrace {
            inputs,
            pre_act,
            norm,
        },
    )
}

fn prefix_backward(
    trace: &PrefixTrace,
    params: &Parameters,
    grads: &mut Parameters,
    cfg: &ModelConfig,
    dy: &Mat,
) -> Mat {
    let g = pos_conv_geom(cfg);
    let dsum = nn::layer_norm_backward(
        &trace.norm,
        dy,
        Some((
            &params.encoder_norm.gain.data,
            &mut grads.encoder_norm.gain.data,
            &mut grads.encoder_norm.bias.data,
        )),
    );
    let mut dx = dsum.clone();
    let mut dh = dsum;
    for i in (0..params.pos_conv.len()).rev() {
        let dpre = nn::gelu_backward(&trace.pre_act[i], &dh);
        let c = &params.pos_conv[i];
        let gc = &mut grads.pos_conv[i];
        dh = nn::conv1d_backward(
            &trace.inputs[i],
            &c.weight.data,
            &g,
            &dpre,
            &mut gc.weight.data,
            &mut gc.bias.data,
        );
    }
    if !params.pos_conv.is_empty() {
        dx.add_assign(&dh);
    }
    dx
}

// ---------------------------------------------------------------- blocks

#[derive(Clone, Debug)]
pub struct BlockTrace {
    attn: AttnCache,
    norm1: NormCache,
    h1: Mat,
    ffn_pre: Mat,
    ffn_act: Mat,
    norm2: NormCache,
}

/// Post-norm transformer block.
fn block_forward(x: &Mat, p: &BlockParams, n_heads: usize) -> (Mat, BlockTrace) {
    let (a, attn) = nn::self_attention(
        x,
        &p.qkv.weight.data,
        &p.qkv.bias.data,
        &p.attn_out.weight.data,
        &p.attn_out.bias.data,
        n_heads,
    );
    let mut r1 = x.clone();
    r1.add_assign(&a);
    let (h1, norm1) = nn::layer_norm(&r1, p.norm1.affine());
    let ffn_pre = nn::linear(&h1, &p.ffn_in.weight.data, &p.ffn_in.bias.data);
    let ffn_act = nn::gelu(&ffn_pre);
    let f = nn::linear(&ffn_act, &p.ffn_out.weight.data, &p.ffn_out.bias.data);
    let mut r2 = h1.clone();
    r2.add_assign(&f);
    let (out, norm2) = nn::layer_norm(&r2, p.norm2.affine());
    (
        out,
        BlockTrace {
            attn,
            norm1,
            h1,
            ffn_pre,
            ffn_act,
            norm2,
        },
    )
}

fn block_backward(t: &BlockTrace, p: &BlockParams, g: &mut BlockParams, n_heads: usize, dy: &Mat) -> Mat {
    let dr2 = nn::layer_norm_backward(
        &t.norm2,
        dy,
        Some((&p.norm2.gain.data, &mut g.norm2.gain.data, &mut g.norm2.bias.data)),
    );
    let dact = nn::linear_backward(
        &t.ffn_act,
        &p.ffn_out.weight.data,
        &dr2,
        &mut g.ffn_out.weight.data,
        &mut g.ffn_out.bias.data,
    );
    let dpre = nn::gelu_backward(&t.ffn_pre, &dact);
    let mut dh1 = nn::linear_backward(
        &t.h1,
        &p.ffn_in.weight.data,
        &dpre,
        &mut g.ffn_in.weight.data,
        &mut g.ffn_in.bias.data,
    );
    dh1.add_assign(&dr2);
    let dr1 = nn::layer_norm_backward(
        &t.norm1,
        &dh1,
        Some((&p.norm1.gain.data, &mut g.norm1.gain.data, &mut g.norm1.bias.data)),
    );
    let mut dx = nn::self_attention_backward(
        &t.attn,
        &p.qkv.weight.data,
        &p.attn_out.weight.data,
        n_heads,
        &dr1,
        &mut g.qkv.weight.data,
        &mut g.qkv.bias.data,
        &mut g.attn_out.weight.data,
        &mut g.attn_out.bias.data,
    );
    dx.add_assign(&dr1);
    dx
}

/// Runs every block; returns each block's output and the traces.
fn blocks_forward(x0: &Mat, params: &Parameters, cfg: &ModelConfig) -> (Vec<Mat>, Vec<BlockTrace>) {
    let mut outs = Vec::with_capacity(params.blocks.len());
    let mut traces = Vec::with_capacity(params.blocks.len());
    let mut x = x0.clone();
    for b in &params.blocks {
        let (y, t) = block_forward(&x, b, cfg.n_heads);
        traces.push(t);
        outs.push(y.clone());
        x = y;
    }
    (outs, traces)
}

fn blocks_backward(
    traces: &[BlockTrace],
    params: &Parameters,
    grads: &mut Parameters,
    cfg: &ModelConfig,
    dy: &Mat,
) -> Mat {
    let mut d = dy.clone();
    for i in (0..traces.len()).rev() {
        d = block_backward(&traces[i], &params.blocks[i], &mut grads.blocks[i], cfg.n_heads, &d);
    }
    d
}

/// Block outputs for unmasked frames, optionally with the utterance tokens
/// prepended (their rows are stripped from the result).
pub fn encoder_layers(
    z: &FrameSequence,
    params: &Parameters,
    cfg: &ModelConfig,
    with_tokens: bool,
) -> Vec<Mat> {
    let (e, _) = prefix_forward(&z.frames, params, cfg);
    let n_tok = if with_tokens { params.utt_tokens.shape[0] } else { 0 };
    let x0 = if n_tok > 0 {
        Mat::vstack(&utt_token_mat(params), &e)
    } else {
        e
    };
    let (outs, _) = blocks_forward(&x0, params, cfg);
    outs.into_iter()
        .map(|o| if n_tok > 0 { o.rows_range(n_tok, o.rows) } else { o })
        .collect()
}

fn utt_token_mat(params: &Parameters) -> Mat {
    Mat::from_vec(
        params.utt_tokens.shape[0],
        params.utt_tokens.shape[1],
        params.utt_tokens.data.clone(),
    )
}

// --------------------------------------------------------------- teacher

/// Mean of the top-`k` block outputs, each normalised per `cfg.target_norm`.
pub fn encode_teacher(
    z: &FrameSequence,
    params: &Parameters,
    cfg: &ModelConfig,
    k: usize,
) -> Result<TeacherTargets> {
    let layers = encoder_layers(z, params, cfg, false);
    teacher_targets_from_layers(&layers, k, cfg.target_norm).map(|targets| TeacherTargets { targets })
}

pub fn teacher_targets_from_layers(layers: &[Mat], k: usize, norm: TargetNorm) -> Result<Mat> {
    if k == 0 || k > layers.len() {
        return Err(Error::Config(format!(
            "top_k must be in [1, {}], got {k}",
            layers.len()
        )));
    }
    let top = &layers[layers.len() - k..];
    let mut acc = Mat::zeros(top[0].rows, top[0].cols);
    for l in top {
        acc.add_assign(&normalize_target(l, norm));
    }
    let inv = 1.0 / k as f64;
    acc.data.iter_mut().for_each(|v| *v *= inv);
    Ok(acc)
}

pub fn normalize_target(x: &Mat, norm: TargetNorm) -> Mat {
    match norm {
        TargetNorm::None => x.clone(),
        TargetNorm::Layer => nn::layer_norm(x, None).0,
        TargetNorm::Instance => {
            let mut y = x.clone();
            if x.rows == 0 {
                return y;
            }
            let n = x.rows as f64;
            for c in 0..x.cols {
                let mean = (0..x.rows).map(|t| x.row(t)[c]).sum::<f64>() / n;
                let var = (0..x.rows).map(|t| (x.row(t)[c] - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + nn::NORM_EPS).sqrt();
                for t in 0..x.rows {
                    y.row_mut(t)[c] = (x.row(t)[c] - mean) * inv;
                }
            }
            y
        }
    }
}

// --------------------------------------------------------------- student

/// Frames after mask filling: masked rows replaced by the mask embedding.
pub fn masked_input(z: &FrameSequence, mask: &MaskSpec, params: &Parameters) -> Result<Mat> {
    check_mask(mask, z.n_frames())?;
    let mut x = z.frames.clone();
    for &i in &mask.masked_indices {
        x.row_mut(i).copy_from_slice(&params.mask_embedding.data);
    }
    Ok(x)
}

fn check_mask(mask: &MaskSpec, n_frames: usize) -> Result<()> {
    match mask.masked_indices.iter().find(|&&i| i >= n_frames) {
        Some(&index) => Err(Error::MaskIndex {
            index,
            len: n_frames,
        }),
        None => Ok(()),
    }
}

#[derive(Clone, Debug)]
struct DecoderTrace {
    layers: Vec<ConvNormTrace>,
    out: Mat,
}

#[derive(Clone, Debug)]
pub struct StudentTrace {
    style: BackboneStyle,
    n_tok: usize,
    n_frames: usize,
    masked: Vec<usize>,
    visible: Vec<usize>,
    prefix: PrefixTrace,
    blocks: Vec<BlockTrace>,
    /// Input of the shared head (all rows for standard, token rows for mae).
    head_in: Mat,
    decoder: Option<DecoderTrace>,
}

/// Student forward. `noise_seed` drives the Gaussian fill of the decoder
/// style and is ignored by the standard style.
pub fn encode_student(
    z: &FrameSequence,
    mask: &MaskSpec,
    params: &Parameters,
    cfg: &ModelConfig,
    noise_seed: u64,
) -> Result<StudentOutput> {
    student_forward(z, mask, params, cfg, noise_seed).map(|(o, _)| o)
}

pub fn student_forward(
    z: &FrameSequence,
    mask: &MaskSpec,
    params: &Parameters,
    cfg: &ModelConfig,
    noise_seed: u64,
) -> Result<(StudentOutput, StudentTrace)> {
    check_mask(mask, z.n_frames())?;
    let n = z.n_frames();
    let n_tok = params.utt_tokens.shape[0];
    let tokens = utt_token_mat(params);
    match cfg.backbone_style {
        BackboneStyle::Standard => {
            let x = masked_input(z, mask, params)?;
            let (e, prefix) = prefix_forward(&x, params, cfg);
            let x0 = Mat::vstack(&tokens, &e);
            let (outs, blocks) = blocks_forward(&x0, params, cfg);
            let last = outs.into_iter().last().expect("at least one block");
            let projected = nn::linear(&last, &params.head.weight.data, &params.head.bias.data);
            let out = StudentOutput {
                utt_embeddings: projected.rows_range(0, n_tok),
                frame_embeddings: projected.rows_range(n_tok, n_tok + n),
            };
            Ok((
                out,
                StudentTrace {
                    style: BackboneStyle::Standard,
                    n_tok,
                    n_frames: n,
                    masked: mask.masked_indices.clone(),
                    visible: Vec::new(),
                    prefix,
                    blocks,
                    head_in: last,
                    decoder: None,
                },
            ))
        }
        BackboneStyle::MaeDecoder => {
            let dec = params
                .decoder
                .as_ref()
                .ok_or_else(|| Error::Config("decoder style without decoder parameters".into()))?;
            let (e, prefix) = prefix_forward(&z.frames, params, cfg);
            let is_masked = mask_flags(&mask.masked_indices, n);
            let visible: Vec<usize> = (0..n).filter(|&i| !is_masked[i]).collect();
            let mut vis = Mat::zeros(visible.len(), cfg.d_model);
            for (r, &i) in visible.iter().enumerate() {
                vis.row_mut(r).copy_from_slice(e.row(i));
            }
            let x0 = Mat::vstack(&tokens, &vis);
            let (outs, blocks) = blocks_forward(&x0, params, cfg);
            let last = outs.into_iter().last().expect("at least one block");

            let mut filled = Mat::zeros(n, cfg.d_model);
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let noise = Normal::new(0.0, cfg.decoder_noise_std).expect("validated std");
            for i in 0..n {
                if is_masked[i] {
                    filled.row_mut(i).iter_mut().for_each(|v| *v = noise.sample(&mut rng));
                }
            }
            for (r, &i) in visible.iter().enumerate() {
                filled.row_mut(i).copy_from_slice(last.row(n_tok + r));
            }
            let mut h = filled;
            let mut dlayers = Vec::with_capacity(dec.layers.len());
            for (i, l) in dec.layers.iter().enumerate() {
                let (y, t) = conv_norm_gelu(&h, l, &decoder_geom(cfg, i));
                dlayers.push(t);
                h = if i == 0 {
                    y
                } else {
                    let mut s = y;
                    s.add_assign(&h);
                    s
                };
            }
            let frames = nn::linear(&h, &dec.proj.weight.data, &dec.proj.bias.data);
            let tok_rows = last.rows_range(0, n_tok);
            let utt = nn::linear(&tok_rows, &params.head.weight.data, &params.head.bias.data);
            Ok((
                StudentOutput {
                    utt_embeddings: utt,
                    frame_embeddings: frames,
                },
                StudentTrace {
                    style: BackboneStyle::MaeDecoder,
                    n_tok,
                    n_frames: n,
                    masked: mask.masked_indices.clone(),
                    visible,
                    prefix,
                    blocks,
                    head_in: tok_rows,
                    decoder: Some(DecoderTrace { layers: dlayers, out: h }),
                },
            ))
        }
    }
}

fn mask_flags(masked: &[usize], n: usize) -> Vec<bool> {
    let mut flags = vec![false; n];
    for &i in masked {
        flags[i] = true;
    }
    flags
}

/// Backpropagates output gradients to every student parameter; returns the
/// gradient with respect to the extractor output `z`.
pub fn student_backward(
    trace: &StudentTrace,
    params: &Parameters,
    grads: &mut Parameters,
    cfg: &ModelConfig,
    d_utt: &Mat,
    d_frames: &Mat,
) -> Mat {
    let d = cfg.d_model;
    match trace.style {
        BackboneStyle::Standard => {
            let dproj = Mat::vstack(d_utt, d_frames);
            let dlast = nn::linear_backward(
                &trace.head_in,
                &params.head.weight.data,
                &dproj,
                &mut grads.head.weight.data,
                &mut grads.head.bias.data,
            );
            let dx0 = blocks_backward(&trace.blocks, params, grads, cfg, &dlast);
            add_token_grad(grads, &dx0, trace.n_tok);
            let de = dx0.rows_range(trace.n_tok, dx0.rows);
            let mut dx = prefix_backward(&trace.prefix, params, grads, cfg, &de);
            for &i in &trace.masked {
                let row = dx.row_mut(i);
                nn::axpy(1.0, row, &mut grads.mask_embedding.data);
                row.iter_mut().for_each(|v| *v = 0.0);
            }
            dx
        }
        BackboneStyle::MaeDecoder => {
            let dec = params.decoder.as_ref().expect("decoder style");
            let dt = trace.decoder.as_ref().expect("decoder trace");
            let gdec = grads.decoder.as_mut().expect("decoder grads");
            let mut dh = nn::linear_backward(
                &dt.out,
                &dec.proj.weight.data,
                d_frames,
                &mut gdec.proj.weight.data,
                &mut gdec.proj.bias.data,
            );
            for i in (0..dec.layers.len()).rev() {
                let dprev = conv_norm_gelu_backward(
                    &dt.layers[i],
                    &dec.layers[i],
                    &mut gdec.layers[i],
                    &decoder_geom(cfg, i),
                    &dh,
                );
                dh = if i == 0 {
                    dprev
                } else {
                    let mut s = dprev;
                    s.add_assign(&dh);
                    s
                };
            }
            // dh: gradient w.r.t. the filled decoder input; noise rows are constants.
            let n_vis = trace.visible.len();
            let mut dlast = Mat::zeros(trace.n_tok + n_vis, d);
            let dtok = nn::linear_backward(
                &trace.head_in,
                &params.head.weight.data,
                d_utt,
                &mut grads.head.weight.data,
                &mut grads.head.bias.data,
            );
            dlast.data[..trace.n_tok * d].copy_from_slice(&dtok.data);
            for (r, &i) in trace.visible.iter().enumerate() {
                dlast.row_mut(trace.n_tok + r).copy_from_slice(dh.row(i));
            }
            let dx0 = blocks_backward(&trace.blocks, params, grads, cfg, &dlast);
            add_token_grad(grads, &dx0, trace.n_tok);
            let mut de = Mat::zeros(trace.n_frames, d);
            for (r, &i) in trace.visible.iter().enumerate() {
                de.row_mut(i).copy_from_slice(dx0.row(trace.n_tok + r));
            }
            prefix_backward(&trace.prefix, params, grads, cfg, &de)
        }
    }
}

fn add_token_grad(grads: &mut Parameters, dx0: &Mat, n_tok: usize) {
    let d = dx0.cols;
    nn::axpy(1.0, &dx0.data[..n_tok * d], &mut grads.utt_tokens.data);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::Parameters;

    fn toy_wave(n: usize, phase: f64) -> Vec<f32> {
        (0..n)
            .map(|t| (0.3 * ((t as f64) * 0.05 + phase).sin() + 0.1 * ((t as f64) * 0.31).cos()) as f32)
            .collect()
    }

    #[test]
    fn sixteen_thousand_samples_give_49_frames() {
        let cfg = ModelConfig::tiny();
        let p = Parameters::init(&cfg, 0).unwrap();
        let (z, _) = extractor_forward(&toy_wave(16_000, 0.0), &p, &cfg).unwrap();
        assert_eq!(z.n_frames(), 49);
        assert_eq!(z.frames.cols, cfg.d_model);
        assert!(matches!(
            extractor_forward(&toy_wave(100, 0.0), &p, &cfg),
            Err(Error::TooShort { n_samples: 100 })
        ));
    }

    #[test]
    fn teacher_k1_is_normalized_last_layer() {
        let cfg = ModelConfig::tiny();
        let p = Parameters::init(&cfg, 1).unwrap();
        let (z, _) = extractor_forward(&toy_wave(3000, 0.2), &p, &cfg).unwrap();
        let layers = encoder_layers(&z, &p, &cfg, false);
        let t = encode_teacher(&z, &p, &cfg, 1).unwrap();
        assert_eq!(t.targets, normalize_target(layers.last().unwrap(), cfg.target_norm));
        assert!(encode_teacher(&z, &p, &cfg, 0).is_err());
        assert!(encode_teacher(&z, &p, &cfg, 3).is_err());
    }

    #[test]
    fn teacher_k2_is_mean_of_recorded_layers() {
        let mut cfg = ModelConfig::tiny();
        cfg.target_norm = TargetNorm::None;
        let p = Parameters::init(&cfg, 2).unwrap();
        let (z, _) = extractor_forward(&toy_wave(4000, 0.7), &p, &cfg).unwrap();
        let layers = encoder_layers(&z, &p, &cfg, false);
        let t = encode_teacher(&z, &p, &cfg, 2).unwrap();
        for (i, v) in t.targets.data.iter().enumerate() {
            let expected = 0.5 * layers[0].data[i] + 0.5 * layers[1].data[i];
            assert!((v - expected).abs() < 1e-12);
        }
        let again = encode_teacher(&z, &p, &cfg, 2).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn identical_layers_average_to_themselves() {
        let m = Mat::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]);
        let layers = vec![m.clone(), m.clone(), m.clone()];
        let t = teacher_targets_from_layers(&layers, 3, TargetNorm::None).unwrap();
        assert_eq!(t, m);
    }

    #[test]
    fn instance_norm_targets_have_zero_time_mean() {
        let m = Mat::from_vec(4, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0, 0.0, 7.0]);
        let y = normalize_target(&m, TargetNorm::Instance);
        for v in y.mean_rows() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn student_shapes_and_mask_errors() {
        for style in [BackboneStyle::Standard, BackboneStyle::MaeDecoder] {
            let mut cfg = ModelConfig::tiny();
            cfg.backbone_style = style;
            cfg.n_utt_tokens = 4;
            let p = Parameters::init(&cfg, 3).unwrap();
            let (z, _) = extractor_forward(&toy_wave(5000, 0.1), &p, &cfg).unwrap();
            let n = z.n_frames();
            let mask = MaskSpec::from_indices(vec![1, 2, 3], n, 0.5, 5).unwrap();
            let out = encode_student(&z, &mask, &p, &cfg, 9).unwrap();
            assert_eq!(out.utt_embeddings.rows, 4);
            assert_eq!(out.frame_embeddings.rows, n);
            assert_eq!(out.frame_embeddings.cols, cfg.d_model);
            let bad = MaskSpec {
                masked_indices: vec![n],
                p: 0.5,
                l: 5,
            };
            assert!(matches!(
                encode_student(&z, &bad, &p, &cfg, 9),
                Err(Error::MaskIndex { .. })
            ));
        }
    }

    #[test]
    fn empty_mask_is_plain_forward() {
        let cfg = ModelConfig::tiny();
        let p = Parameters::init(&cfg, 4).unwrap();
        let (z, _) = extractor_forward(&toy_wave(3000, 0.0), &p, &cfg).unwrap();
        let empty = MaskSpec::empty(0.5, 5);
        assert_eq!(masked_input(&z, &empty, &p).unwrap(), z.frames);
        let all = MaskSpec::from_indices((0..z.n_frames()).collect(), z.n_frames(), 0.5, 5).unwrap();
        let x = masked_input(&z, &all, &p).unwrap();
        for i in 0..x.rows {
            assert_eq!(x.row(i), &p.mask_embedding.data[..]);
        }
        // Fully masked decoder-style input still runs.
        let mut mcfg = cfg.clone();
        mcfg.backbone_style = BackboneStyle::MaeDecoder;
        let mp = Parameters::init(&mcfg, 4).unwrap();
        let out = encode_student(&z, &all, &mp, &mcfg, 1).unwrap();
        assert!(out.frame_embeddings.is_finite());
    }
}
