//! Audio ingestion: manifests, WAV reading, synthetic corpora and
//! token-budget batching.
//!
//! Manifest format (UTF-8, tab separated, one header line):
//!
//! ```text
//! id  audio  n_samples  label  speaker  session  lang
//! ```
//!
//! `label` is `-` for unlabeled rows. Relative `audio` paths are resolved
//! against the manifest's directory.

use std::collections::{BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const SAMPLE_RATE: u32 = 16_000;
pub const MANIFEST_HEADER: &str = "id\taudio\tn_samples\tlabel\tspeaker\tsession\tlang";
pub const SYNTH_PARAMS_FILE: &str = "synth_params.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio_path: PathBuf,
    pub n_samples: usize,
    pub label: Option<String>,
    pub speaker: String,
    pub session: String,
    pub language: String,
}

/// Parsed manifest with its inferred label set (sorted, deduplicated).
#[derive(Clone, Debug)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<UtteranceRecord>,
    pub labels: Vec<String>,
}

impl Manifest {
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Label ids for every record; errors if any record is unlabeled.
    pub fn label_ids(&self) -> Result<Vec<usize>> {
        self.records
            .iter()
            .map(|r| {
                r.label
                    .as_deref()
                    .and_then(|l| self.label_index(l))
                    .ok_or_else(|| Error::Probe(format!("utterance `{}` has no label", r.id)))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A group of utterances whose total sample count fits the token budget.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Indices into the record list passed to [`make_batches`].
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
    pub total_samples: usize,
    pub token_budget: usize,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let bad = |line: usize, reason: String| Error::ManifestLine {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end_matches('\r') == MANIFEST_HEADER => {}
        Some((_, header)) => return Err(bad(1, format!("unexpected header `{header}`"))),
        None => return Err(bad(1, "missing header".into())),
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut labels = BTreeSet::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(bad(line_no, format!("expected 7 columns, found {}", cols.len())));
        }
        let id = cols[0];
        if id.is_empty() {
            return Err(bad(line_no, "empty id".into()));
        }
        let n_samples: usize = cols[2]
            .parse()
            .map_err(|_| bad(line_no, format!("n_samples `{}` is not an integer", cols[2])))?;
        if n_samples == 0 {
            return Err(bad(line_no, "n_samples must be positive".into()));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        let label = match cols[3] {
            "-" | "" => None,
            l => {
                labels.insert(l.to_string());
                Some(l.to_string())
            }
        };
        let audio = PathBuf::from(cols[1]);
        let audio_path = if audio.is_absolute() {
            audio
        } else {
            root.join(audio)
        };
        records.push(UtteranceRecord {
            id: id.to_string(),
            audio_path,
            n_samples,
            label,
            speaker: cols[4].to_string(),
            session: cols[5].to_string(),
            language: cols[6].to_string(),
        });
    }

    Ok(Manifest {
        path: path.to_path_buf(),
        records,
        labels: labels.into_iter().collect(),
    })
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in records {
        let audio = r.audio_path.strip_prefix(&root).unwrap_or(&r.audio_path);
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id,
            audio.display(),
            r.n_samples,
            r.label.as_deref().unwrap_or("-"),
            r.speaker,
            r.session,
            r.language
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a PCM WAV file as mono 16 kHz samples in [-1, 1]. No resampling.
pub fn read_waveform(record: &UtteranceRecord) -> Result<Waveform> {
    read_wav(&record.audio_path)
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let audio_err = |reason: String| Error::Audio {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => audio_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Channels {
            path: path.to_path_buf(),
            found: spec.channels,
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate {
            path: path.to_path_buf(),
            found: spec.sample_rate,
        });
    }
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f32 / scale).clamp(-1.0, 1.0)))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| audio_err(e.to_string()))?
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| audio_err(e.to_string()))?,
    };
    if samples.is_empty() {
        return Err(audio_err("no samples".into()));
    }
    Ok(Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    })
}

/// Writes mono 16 kHz PCM16.
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_audio_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_audio_err)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(v).map_err(to_audio_err)?;
    }
    writer.finalize().map_err(to_audio_err)
}

/// Knobs of the synthetic generator. Class identity is carried by a
/// fundamental-frequency band and an amplitude-modulation rate; speakers
/// shift pitch and every utterance gets random phase, jitter and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub min_seconds: f64,
    pub max_seconds: f64,
    /// Lowest class band centre in Hz; band `c` is centred at `f0_base * f0_ratio^c`.
    pub f0_base: f64,
    pub f0_ratio: f64,
    /// Relative half-width of the per-utterance F0 draw inside a band.
    pub f0_jitter: f64,
    /// Relative spread of per-speaker pitch offsets.
    pub speaker_pitch_spread: f64,
    /// AM rate of class `c` in Hz is `am_base + am_step * c`.
    pub am_base: f64,
    pub am_step: f64,
    pub am_depth: f64,
    /// Relative depth of a pitch modulation at the same class rate.
    pub fm_depth: f64,
    pub noise_std: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            min_seconds: 0.5,
            max_seconds: 3.0,
            f0_base: 110.0,
            f0_ratio: 1.22,
            f0_jitter: 0.04,
            speaker_pitch_spread: 0.03,
            am_base: 2.0,
            am_step: 2.5,
            am_depth: 0.8,
            fm_depth: 0.0,
            noise_std: 0.05,
        }
    }
}

/// Generating attributes of one synthetic utterance, written alongside the
/// manifest so the labels can be checked against their source.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthAttributes {
    pub id: String,
    pub class: usize,
    pub f0: f64,
    pub am_rate: f64,
}

pub const EMOTION_NAMES: [&str; 8] = ["ang", "hap", "neu", "sad", "fea", "dis", "sur", "cal"];

/// Writes `n_utts` WAV files plus `manifest.tsv` and `synth_params.tsv` into
/// `out_dir`. Output is a pure function of the arguments.
pub fn synthesize_corpus(
    n_utts: usize,
    n_classes: usize,
    n_speakers: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    synthesize_corpus_with(n_utts, n_classes, n_speakers, seed, out_dir, &SynthParams::default())
}

pub fn synthesize_corpus_with(
    n_utts: usize,
    n_classes: usize,
    n_speakers: usize,
    seed: u64,
    out_dir: &Path,
    params: &SynthParams,
) -> Result<PathBuf> {
    if !(2..=8).contains(&n_classes) {
        return Err(Error::Config(format!("n_classes must be in [2, 8], got {n_classes}")));
    }
    if n_utts < n_classes * 10 {
        return Err(Error::Config(format!(
            "n_utts must be at least 10 per class ({}), got {n_utts}",
            n_classes * 10
        )));
    }
    if n_speakers == 0 {
        return Err(Error::Config("n_speakers must be positive".into()));
    }
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let mut speaker_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth/speakers"));
    let speaker_shift: Vec<f64> = (0..n_speakers)
        .map(|_| 1.0 + params.speaker_pitch_spread * (2.0 * speaker_rng.gen::<f64>() - 1.0))
        .collect();

    let mut records = Vec::with_capacity(n_utts);
    let mut attrs = Vec::with_capacity(n_utts);
    for i in 0..n_utts {
        let class = i % n_classes;
        let speaker = (i / n_classes) % n_speakers;
        let id = format!("utt{i:05}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("synth/utt/{i}")));
        let (samples, f0, am_rate) = render_utterance(class, speaker_shift[speaker], params, &mut rng);
        let path = wav_dir.join(format!("{id}.wav"));
        write_wav(&path, &samples)?;
        records.push(UtteranceRecord {
            id: id.clone(),
            audio_path: path,
            n_samples: samples.len(),
            label: Some(EMOTION_NAMES[class].to_string()),
            speaker: format!("spk{speaker:02}"),
            session: format!("ses{:02}", speaker / 2),
            language: "synth".to_string(),
        });
        attrs.push(SynthAttributes {
            id,
            class,
            f0,
            am_rate,
        });
    }

    let manifest = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &records)?;
    write_synth_attributes(&out_dir.join(SYNTH_PARAMS_FILE), &attrs)?;
    Ok(manifest)
}

fn render_utterance(
    class: usize,
    speaker_shift: f64,
    p: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, f64, f64) {
    let seconds = rng.gen_range(p.min_seconds..=p.max_seconds);
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let centre = p.f0_base * p.f0_ratio.powi(class as i32) * speaker_shift;
    let f0 = centre * (1.0 + p.f0_jitter * (2.0 * rng.gen::<f64>() - 1.0));
    let am_rate = p.am_base + p.am_step * class as f64;
    let am_phase = rng.gen::<f64>() * 2.0 * PI;
    let harmonic_phase: [f64; 4] = std::array::from_fn(|_| rng.gen::<f64>() * 2.0 * PI);
    let fm_phase = rng.gen::<f64>() * 2.0 * PI;
    let noise = Normal::new(0.0, p.noise_std).expect("finite noise std");
    let sr = SAMPLE_RATE as f64;

    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let time = t as f64 / sr;
        let env = 1.0 - p.am_depth * 0.5 * (1.0 + (2.0 * PI * am_rate * time + am_phase).sin());
        // integral of f0 * (1 + fm_depth * sin(2 pi r t + phase))
        let carrier = 2.0 * PI * f0 * time
            - f0 * p.fm_depth / am_rate * ((2.0 * PI * am_rate * time + fm_phase).cos() - fm_phase.cos());
        let mut tone = 0.0;
        for (h, phase) in harmonic_phase.iter().enumerate() {
            let k = (h + 1) as f64;
            tone += (k * carrier + phase).sin() / k;
        }
        let v = 0.3 * env * tone + noise.sample(rng);
        out.push(v as f32);
    }
    (out, f0, am_rate)
}

fn write_synth_attributes(path: &Path, attrs: &[SynthAttributes]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "id\tclass\tf0\tam_rate").map_err(io)?;
    for a in attrs {
        writeln!(w, "{}\t{}\t{}\t{}", a.id, a.class, a.f0, a.am_rate).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_synth_attributes(path: &Path) -> Result<Vec<SynthAttributes>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, reason: &str| Error::ManifestLine {
        path: path.to_path_buf(),
        line,
        reason: reason.to_string(),
    };
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(i + 1, "expected 4 columns"));
            }
            Ok(SynthAttributes {
                id: cols[0].to_string(),
                class: cols[1].parse().map_err(|_| bad(i + 1, "bad class"))?,
                f0: cols[2].parse().map_err(|_| bad(i + 1, "bad f0"))?,
                am_rate: cols[3].parse().map_err(|_| bad(i + 1, "bad am_rate"))?,
            })
        })
        .collect()
}

/// Greedy first-fit packing of the records, visited in a seeded shuffled
/// order. Every record lands in exactly one batch.
pub fn make_batches(
    records: &[UtteranceRecord],
    token_budget: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    if let Some(r) = records.iter().find(|r| r.n_samples > token_budget) {
        return Err(Error::OverBudget {
            id: r.id.clone(),
            n_samples: r.n_samples,
            budget: token_budget,
        });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

    let mut batches: Vec<Batch> = Vec::new();
    for idx in order {
        let r = &records[idx];
        let slot = batches
            .iter_mut()
            .find(|b| b.total_samples + r.n_samples <= token_budget);
        match slot {
            Some(b) => {
                b.indices.push(idx);
                b.ids.push(r.id.clone());
                b.total_samples += r.n_samples;
            }
            None => batches.push(Batch {
                indices: vec![idx],
                ids: vec![r.id.clone()],
                total_samples: r.n_samples,
                token_budget,
            }),
        }
    }
    Ok(batches)
}
