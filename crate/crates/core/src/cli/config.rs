//! Flat `key = value` run configuration shared by every subcommand.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::SynthParams;
use crate::distill::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::probe::{HeadKind, LayerAgg, ProbeConfig, SplitScheme};

/// Groups of keys; each subcommand consumes some of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Model,
    Train,
    Synth,
    Extract,
    Probe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub n_utts: usize,
    pub n_classes: usize,
    pub n_speakers: usize,
    pub params: SynthParams,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            n_utts: 400,
            n_classes: 4,
            n_speakers: 10,
            params: SynthParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    /// Its `seed` is the master seed of the run.
    pub train: TrainConfig,
    pub synth: SynthSettings,
    pub layer_agg: LayerAgg,
    pub split_scheme: SplitScheme,
    /// 0 selects the scheme's default fold count.
    pub split_k: usize,
    /// Its `seed` is ignored; probes use the derived probe seed.
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            synth: SynthSettings::default(),
            layer_agg: LayerAgg::Last4Mean,
            split_scheme: SplitScheme::Speaker10Fold,
            split_k: 0,
            probe: ProbeConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl RunConfig {
    pub fn master_seed(&self) -> u64 {
        self.train.seed
    }

    pub fn fold_count(&self) -> usize {
        if self.split_k == 0 {
            self.split_scheme.default_k()
        } else {
            self.split_k
        }
    }

    /// Replaces model and training settings with a named preset.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let (model, train) = match name {
            "desk" => (ModelConfig::desk(), TrainConfig::desk()),
            "base" => (ModelConfig::base(), TrainConfig::base()),
            other => return Err(Error::Config(format!("unknown preset `{other}` (desk, base)"))),
        };
        self.preset = name.to_string();
        self.model = model;
        self.train = train;
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if key == "preset" {
            return self.apply_preset(v);
        }
        if self.model.set(key, v)? || self.train.set(key, v)? {
            return Ok(());
        }
        let sp = &mut self.synth.params;
        match key {
            "synth.n_utts" => self.synth.n_utts = parse(key, v)?,
            "synth.n_classes" => self.synth.n_classes = parse(key, v)?,
            "synth.n_speakers" => self.synth.n_speakers = parse(key, v)?,
            "synth.min_seconds" => sp.min_seconds = parse(key, v)?,
            "synth.max_seconds" => sp.max_seconds = parse(key, v)?,
            "synth.f0_base" => sp.f0_base = parse(key, v)?,
            "synth.f0_ratio" => sp.f0_ratio = parse(key, v)?,
            "synth.f0_jitter" => sp.f0_jitter = parse(key, v)?,
            "synth.speaker_pitch_spread" => sp.speaker_pitch_spread = parse(key, v)?,
            "synth.am_base" => sp.am_base = parse(key, v)?,
            "synth.am_step" => sp.am_step = parse(key, v)?,
            "synth.am_depth" => sp.am_depth = parse(key, v)?,
            "synth.fm_depth" => sp.fm_depth = parse(key, v)?,
            "synth.noise_std" => sp.noise_std = parse(key, v)?,
            "layer_agg" => self.layer_agg = v.parse()?,
            "split.scheme" => self.split_scheme = v.parse()?,
            "split.k" => self.split_k = parse(key, v)?,
            "probe.head" => self.probe.head = v.parse::<HeadKind>()?,
            "probe.hidden" => self.probe.hidden = parse(key, v)?,
            "probe.gru_layers" => self.probe.gru_layers = parse(key, v)?,
            "probe.epochs" => self.probe.epochs = parse(key, v)?,
            "probe.patience" => self.probe.patience = parse(key, v)?,
            "probe.lr" => self.probe.lr = parse(key, v)?,
            "probe.batch_size" => self.probe.batch_size = parse(key, v)?,
            "probe.val_is_test" => self.probe.val_is_test = parse(key, v)?,
            "probe.standardize" => self.probe.standardize = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment. A `preset` line is
    /// applied first wherever it appears.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_pairs(&pairs)
    }

    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the config file, then `--set KEY=VALUE` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        let pairs = overrides
            .iter()
            .map(|o| {
                o.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        cfg.apply_pairs(&pairs)?;
        Ok(cfg)
    }

    /// Effective values of the keys in `sections`, each exactly once, in a
    /// fixed order.
    pub fn pairs(&self, sections: &[Section]) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        if sections.contains(&Section::Model) || sections.contains(&Section::Train) {
            push("preset", self.preset.clone());
        }
        if sections.contains(&Section::Model) {
            for (k, v) in self.model.to_pairs() {
                push(k, v);
            }
        }
        if sections.contains(&Section::Train) {
            for (k, v) in self.train.to_pairs() {
                push(k, v);
            }
        } else if sections.contains(&Section::Synth) || sections.contains(&Section::Probe) {
            push("seed", self.train.seed.to_string());
        }
        if sections.contains(&Section::Synth) {
            let s = &self.synth;
            let p = &s.params;
            push("synth.n_utts", s.n_utts.to_string());
            push("synth.n_classes", s.n_classes.to_string());
            push("synth.n_speakers", s.n_speakers.to_string());
            push("synth.min_seconds", p.min_seconds.to_string());
            push("synth.max_seconds", p.max_seconds.to_string());
            push("synth.f0_base", p.f0_base.to_string());
            push("synth.f0_ratio", p.f0_ratio.to_string());
            push("synth.f0_jitter", p.f0_jitter.to_string());
            push("synth.speaker_pitch_spread", p.speaker_pitch_spread.to_string());
            push("synth.am_base", p.am_base.to_string());
            push("synth.am_step", p.am_step.to_string());
            push("synth.am_depth", p.am_depth.to_string());
            push("synth.fm_depth", p.fm_depth.to_string());
            push("synth.noise_std", p.noise_std.to_string());
        }
        if sections.contains(&Section::Extract) {
            push("layer_agg", self.layer_agg.to_string());
        }
        if sections.contains(&Section::Probe) {
            let p = &self.probe;
            push("split.scheme", self.split_scheme.to_string());
            push("split.k", self.fold_count().to_string());
            push("probe.head", p.head.to_string());
            push("probe.hidden", p.hidden.to_string());
            push("probe.gru_layers", p.gru_layers.to_string());
            push("probe.epochs", p.epochs.to_string());
            push("probe.patience", p.patience.to_string());
            push("probe.lr", p.lr.to_string());
            push("probe.batch_size", p.batch_size.to_string());
            push("probe.val_is_test", p.val_is_test.to_string());
            push("probe.standardize", p.standardize.to_string());
        }
        out
    }

    pub fn to_text(&self, sections: &[Section]) -> String {
        self.pairs(sections)
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [Section; 5] = [Section::Model, Section::Train, Section::Synth, Section::Extract, Section::Probe];

    #[test]
    fn text_round_trip_over_all_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("alpha = 0.25\nprobe.hidden = 16 # comment\nsynth.fm_depth=0.1\nlayer_agg = last\n", "t")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(&ALL), "t").unwrap();
        assert_eq!(back.pairs(&ALL), cfg.pairs(&ALL));
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.synth, cfg.synth);
        assert_eq!(back.fold_count(), cfg.fold_count());
    }

    #[test]
    fn each_key_echoed_once() {
        let pairs = RunConfig::default().pairs(&ALL);
        let mut keys: Vec<&str> = pairs.iter().map(|(k, _)| k.as_str()).collect();
        let n = keys.len();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), n);
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let cfg = RunConfig::load(None, &["d_model=64".into(), "preset=base".into()]).unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.model.n_layers, 12);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::load(None, &["probe.hiden=3".into()]).unwrap_err();
        assert!(err.to_string().contains("probe.hiden"));
        assert!(RunConfig::load(None, &["novalue".into()]).is_err());
    }
}
