//! Frozen-upstream features and their on-disk dump.
//!
//! A dump is a directory holding `meta.txt` (`key = value` lines: version,
//! layer_agg, source, d_model, count), `index.tsv` (`id<TAB>file<TAB>n_frames`)
//! and one `.feat` file per utterance. A `.feat` file is little-endian:
//!
//! ```text
//! magic    8 bytes "E2VFEAT\0"
//! version  u32 (1)
//! n_frames u64
//! d_model  u64
//! frames   f64[n_frames * d_model]  row-major
//! pooled   f64[d_model]             time-mean of frames
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{self, Manifest};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::forward::extractor_forward;
use crate::model::{encoder_layers, Mat, ModelConfig, Parameters};

pub const FEATURE_VERSION: u32 = 1;
const FEAT_MAGIC: &[u8; 8] = b"E2VFEAT\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerAgg {
    Last,
    /// Mean of the top `top_k` blocks of the model config.
    TopKMean,
    /// Mean of the last four blocks (all of them if fewer).
    Last4Mean,
}

impl LayerAgg {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerAgg::Last => "last",
            LayerAgg::TopKMean => "top_k_mean",
            LayerAgg::Last4Mean => "last4_mean",
        }
    }
}

impl FromStr for LayerAgg {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(LayerAgg::Last),
            "top_k_mean" => Ok(LayerAgg::TopKMean),
            "last4_mean" => Ok(LayerAgg::Last4Mean),
            _ => Err(Error::Config(format!(
                "unknown layer aggregation `{s}` (last, top_k_mean, last4_mean)"
            ))),
        }
    }
}

impl fmt::Display for LayerAgg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceFeatures {
    pub id: String,
    /// `[n_frames, d_model]`
    pub frames: Mat,
    /// Time-mean of `frames`.
    pub pooled: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDump {
    pub layer_agg: LayerAgg,
    /// Identifies the upstream parameters the features came from.
    pub source: String,
    pub d_model: usize,
    pub items: Vec<UtteranceFeatures>,
}

impl FeatureDump {
    pub fn index(&self) -> HashMap<&str, usize> {
        self.items.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect()
    }
}

/// Mean of the last `n` layers.
fn mean_of_last(layers: &[Mat], n: usize) -> Mat {
    let n = n.clamp(1, layers.len());
    let top = &layers[layers.len() - n..];
    let mut acc = top[0].clone();
    for l in &top[1..] {
        acc.add_assign(l);
    }
    if n > 1 {
        let inv = 1.0 / n as f64;
        acc.data.iter_mut().for_each(|v| *v *= inv);
    }
    acc
}

pub fn aggregate_layers(layers: &[Mat], agg: LayerAgg, top_k: usize) -> Result<Mat> {
    if layers.is_empty() {
        return Err(Error::Shape("no layers to aggregate".into()));
    }
    Ok(match agg {
        LayerAgg::Last => layers[layers.len() - 1].clone(),
        LayerAgg::TopKMean => mean_of_last(layers, top_k),
        LayerAgg::Last4Mean => mean_of_last(layers, 4),
    })
}

/// Student forward without mask or utterance tokens, aggregated per `agg`.
pub fn utterance_features(
    samples: &[f32],
    params: &Parameters,
    cfg: &ModelConfig,
    agg: LayerAgg,
) -> Result<Mat> {
    let z = extractor_forward(samples, params, cfg)?.0;
    let layers = encoder_layers(&z, params, cfg, false);
    aggregate_layers(&layers, agg, cfg.top_k)
}

pub fn extract_with_params(
    params: &Parameters,
    cfg: &ModelConfig,
    manifest: &Manifest,
    agg: LayerAgg,
    source: &str,
) -> Result<FeatureDump> {
    params.check_config(cfg)?;
    let mut items = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let wave = corpus::read_waveform(r)?;
        let frames = utterance_features(&wave.samples, params, cfg, agg)?;
        if !frames.is_finite() {
            return Err(Error::Features {
                path: r.audio_path.clone(),
                reason: format!("non-finite features for `{}`", r.id),
            });
        }
        let pooled = frames.mean_rows();
        items.push(UtteranceFeatures {
            id: r.id.clone(),
            frames,
            pooled,
        });
    }
    Ok(FeatureDump {
        layer_agg: agg,
        source: source.to_string(),
        d_model: cfg.d_model,
        items,
    })
}

/// Loads the checkpoint's student and extracts features for every manifest
/// utterance.
pub fn extract_frozen_features(checkpoint: &Path, manifest: &Path, agg: LayerAgg) -> Result<FeatureDump> {
    let ck = Checkpoint::load(checkpoint)?;
    let manifest = corpus::load_manifest(manifest)?;
    let source = format!(
        "{}#step{}#{:016x}",
        checkpoint.file_name().map(|s| s.to_string_lossy()).unwrap_or_default(),
        ck.step,
        ck.student.checksum()
    );
    extract_with_params(&ck.student, &ck.model, &manifest, agg, &source)
}

fn feat_bytes(u: &UtteranceFeatures) -> Vec<u8> {
    let mut b = Vec::with_capacity(28 + 8 * (u.frames.data.len() + u.pooled.len()));
    b.extend_from_slice(FEAT_MAGIC);
    b.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    b.extend_from_slice(&(u.frames.rows as u64).to_le_bytes());
    b.extend_from_slice(&(u.frames.cols as u64).to_le_bytes());
    for v in u.frames.data.iter().chain(&u.pooled) {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

fn parse_feat(id: &str, bytes: &[u8]) -> std::result::Result<UtteranceFeatures, String> {
    if bytes.len() < 28 || &bytes[..8] != FEAT_MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(8);
    if version != FEATURE_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let (rows, cols) = (u64_at(12) as usize, u64_at(20) as usize);
    let n = rows * cols + cols;
    if bytes.len() != 28 + 8 * n {
        return Err(format!("expected {} bytes, found {}", 28 + 8 * n, bytes.len()));
    }
    let vals: Vec<f64> = bytes[28..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(UtteranceFeatures {
        id: id.to_string(),
        frames: Mat::from_vec(rows, cols, vals[..rows * cols].to_vec()),
        pooled: vals[rows * cols..].to_vec(),
    })
}

fn file_name_for(i: usize) -> String {
    format!("{i:06}.feat")
}

impl FeatureDump {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = format!(
            "version = {FEATURE_VERSION}\nlayer_agg = {}\nsource = {}\nd_model = {}\ncount = {}\n",
            self.layer_agg,
            self.source,
            self.d_model,
            self.items.len()
        );
        let meta_path = dir.join("meta.txt");
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
        let mut index = String::from("id\tfile\tn_frames\n");
        for (i, u) in self.items.iter().enumerate() {
            let name = file_name_for(i);
            let path = dir.join(&name);
            fs::write(&path, feat_bytes(u)).map_err(|e| Error::io(&path, e))?;
            index.push_str(&format!("{}\t{name}\t{}\n", u.id, u.frames.rows));
        }
        let index_path = dir.join("index.tsv");
        fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.txt");
        let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let bad = |path: &Path, reason: String| Error::Features {
            path: path.to_path_buf(),
            reason,
        };
        let mut kv = HashMap::new();
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(&meta_path, format!("malformed line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| bad(&meta_path, format!("missing `{k}`")))
        };
        if get("version")? != FEATURE_VERSION.to_string() {
            return Err(bad(&meta_path, format!("unsupported version {}", get("version")?)));
        }
        let layer_agg: LayerAgg = get("layer_agg")?.parse()?;
        let d_model: usize = get("d_model")?
            .parse()
            .map_err(|_| bad(&meta_path, "bad d_model".into()))?;
        let index_path = dir.join("index.tsv");
        let index = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut items = Vec::new();
        for line in index.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(&index_path, format!("malformed row `{line}`")));
            }
            let path = dir.join(cols[1]);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let u = parse_feat(cols[0], &bytes).map_err(|r| bad(&path, r))?;
            if u.frames.cols != d_model {
                return Err(bad(&path, format!("width {} but d_model {d_model}", u.frames.cols)));
            }
            items.push(u);
        }
        Ok(Self {
            layer_agg,
            source: get("source")?,
            d_model,
            items,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: f64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|i| v + i as f64).collect())
    }

    #[test]
    fn aggregation_degenerate_cases() {
        let one = vec![m(3, 2, 0.0)];
        assert_eq!(aggregate_layers(&one, LayerAgg::Last, 1).unwrap(), one[0]);
        assert_eq!(aggregate_layers(&one, LayerAgg::Last4Mean, 1).unwrap(), one[0]);
        let four: Vec<Mat> = (0..4).map(|i| m(3, 2, i as f64)).collect();
        let mean = aggregate_layers(&four, LayerAgg::Last4Mean, 2).unwrap();
        assert_eq!(mean, m(3, 2, 1.5));
        let top2 = aggregate_layers(&four, LayerAgg::TopKMean, 2).unwrap();
        assert_eq!(top2, m(3, 2, 2.5));
    }

    #[test]
    fn pooled_constant_sequence_is_the_frame() {
        let frames = Mat::from_vec(4, 3, [1.0, -2.0, 0.5].repeat(4));
        assert_eq!(frames.mean_rows(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dump = FeatureDump {
            layer_agg: LayerAgg::Last4Mean,
            source: "ck.bin#step3#00ff".into(),
            d_model: 2,
            items: vec![
                UtteranceFeatures {
                    id: "a".into(),
                    frames: m(3, 2, 0.25),
                    pooled: vec![2.25, 3.25],
                },
                UtteranceFeatures {
                    id: "b".into(),
                    frames: m(1, 2, -1.0),
                    pooled: vec![-1.0, 0.0],
                },
            ],
        };
        dump.save(dir.path()).unwrap();
        assert_eq!(FeatureDump::load(dir.path()).unwrap(), dump);
        fs::write(dir.path().join("000001.feat"), b"junk").unwrap();
        assert!(matches!(FeatureDump::load(dir.path()), Err(Error::Features { .. })));
    }
}
