//! Pre-training loop: per-utterance teacher and student passes, AdamW on the
//! student, EMA teacher update, periodic checkpoints and a per-step loss log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ema::ema_update;
use super::loss::{loss_and_grads, total_loss, FrameLoss, LossBreakdown, LossWeights, UttVariant};
use super::mask::{sample_mask, MaskSpec};
use super::optim::{clip_grad_norm, AdamW};
use super::schedule::{lr_at_step, tau_at_step, EmaSchedule};
use crate::corpus::{self, load_manifest, make_batches, Batch, UtteranceRecord};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, OptimizerState};
use crate::model::forward::{
    extractor_backward, extractor_forward, student_backward, student_forward,
    teacher_targets_from_layers,
};
use crate::model::{encoder_layers, ModelConfig, ParamGroup, Parameters, TeacherTargets};
use crate::seed::{derive_seed, SeedPlan};

pub const LOSS_LOG: &str = "loss.tsv";
pub const LOSS_LOG_HEADER: &str = "step\tl_frm\tl_utt\ttotal\ttau\tlr";
pub const LATEST_CHECKPOINT: &str = "checkpoint.bin";
pub const FINAL_CHECKPOINT: &str = "final.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub utt_variant: UttVariant,
    pub alpha: f64,
    /// Include the masked frame loss; off for the utterance-only ablation.
    pub frame_loss: bool,
    pub mask_p: f64,
    pub mask_len: usize,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    /// Master seed; data, init, mask and probe seeds derive from it.
    pub seed: u64,
    /// Maximum raw samples per batch.
    pub token_budget: usize,
    /// Batches accumulated per optimizer step.
    pub update_freq: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Optimizer steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Hyperparameters of the base-size recipe.
    pub fn base() -> Self {
        Self {
            utt_variant: UttVariant::Chunk,
            alpha: 1.0,
            frame_loss: true,
            mask_p: 0.5,
            mask_len: 5,
            lr_peak: 7.5e-5,
            weight_decay: 1e-2,
            warmup_frac: 0.05,
            epochs: 100,
            seed: 0,
            token_budget: 1_400_000,
            update_freq: 4,
            tau_start: 0.999,
            tau_end: 0.99999,
            max_grad_norm: 0.0,
            checkpoint_every: 1000,
        }
    }

    /// Workstation run on the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            lr_peak: 2e-3,
            epochs: 4,
            token_budget: 224_000,
            update_freq: 1,
            max_grad_norm: 1.0,
            checkpoint_every: 50,
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "base" => Ok(Self::base()),
            other => Err(Error::Config(format!("unknown training preset `{other}`"))),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            variant: self.utt_variant,
            alpha: self.alpha,
            frame_loss: self.frame_loss,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.utt_variant.check_tokens(model.n_utt_tokens)?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.mask_p) {
            return fail(format!("mask_p must be in [0, 1], got {}", self.mask_p));
        }
        if self.mask_len == 0 {
            return fail("mask_len must be at least 1".into());
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return fail(format!("warmup_frac must be in (0, 1), got {}", self.warmup_frac));
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return fail(format!("lr_peak must be finite and non-negative, got {}", self.lr_peak));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be finite and non-negative".into());
        }
        if self.update_freq == 0 {
            return fail("update_freq must be at least 1".into());
        }
        if self.token_budget < ModelConfig::min_samples() {
            return fail(format!(
                "token_budget must be at least {} samples",
                ModelConfig::min_samples()
            ));
        }
        if !(self.max_grad_norm >= 0.0) {
            return fail("max_grad_norm must be non-negative".into());
        }
        EmaSchedule::new(self.tau_start, self.tau_end, 0)?;
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("utt_variant", self.utt_variant.to_string()),
            ("alpha", self.alpha.to_string()),
            ("frame_loss", self.frame_loss.to_string()),
            ("mask_p", self.mask_p.to_string()),
            ("mask_len", self.mask_len.to_string()),
            ("lr_peak", self.lr_peak.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("token_budget", self.token_budget.to_string()),
            ("update_freq", self.update_freq.to_string()),
            ("tau_start", self.tau_start.to_string()),
            ("tau_end", self.tau_end.to_string()),
            ("max_grad_norm", self.max_grad_norm.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    /// Sets one key; returns `Ok(false)` if the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "utt_variant" => self.utt_variant = value.trim().parse()?,
            "alpha" => self.alpha = num(key, value)?,
            "frame_loss" => self.frame_loss = num(key, value)?,
            "mask_p" => self.mask_p = num(key, value)?,
            "mask_len" => self.mask_len = num(key, value)?,
            "lr_peak" => self.lr_peak = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "warmup_frac" => self.warmup_frac = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "token_budget" => self.token_budget = num(key, value)?,
            "update_freq" => self.update_freq = num(key, value)?,
            "tau_start" => self.tau_start = num(key, value)?,
            "tau_end" => self.tau_end = num(key, value)?,
            "max_grad_norm" => self.max_grad_norm = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
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
                return Err(Error::Config(format!("unknown training key `{}`", k.trim())));
            }
        }
        Ok(cfg)
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Optimizer steps completed, counting this one.
    pub step: u64,
    pub losses: LossBreakdown,
    pub tau: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.losses.l_frm, self.losses.l_utt, self.losses.total, self.tau, self.lr
        )
    }
}

/// One utterance handed to [`Trainer::train_step`].
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a> {
    pub id: &'a str,
    pub samples: &'a [f32],
}

/// Teacher targets for one utterance. `shared` supplies the student's
/// extractor output when both extractors hold identical values.
pub fn teacher_targets(
    samples: &[f32],
    teacher: &Parameters,
    model: &ModelConfig,
    shared: Option<&crate::model::FrameSequence>,
) -> Result<TeacherTargets> {
    let owned;
    let z = match shared {
        Some(z) => z,
        None => {
            owned = extractor_forward(samples, teacher, model)?.0;
            &owned
        }
    };
    let layers = encoder_layers(z, teacher, model, false);
    let targets = teacher_targets_from_layers(&layers, model.top_k, model.target_norm)?;
    Ok(TeacherTargets { targets })
}

/// Distillation loss of one utterance under a fixed mask. When `grads` is
/// given, `scale` times the gradient of `total` with respect to every student
/// parameter is added into it. The teacher is never differentiated.
#[allow(clippy::too_many_arguments)]
pub fn utterance_objective(
    samples: &[f32],
    student: &Parameters,
    teacher: &Parameters,
    model: &ModelConfig,
    weights: LossWeights,
    mask: &MaskSpec,
    noise_seed: u64,
    share_extractor: bool,
    grads: Option<(&mut Parameters, f64)>,
) -> Result<(LossBreakdown, FrameLoss)> {
    let (z, ext_trace) = extractor_forward(samples, student, model)?;
    let targets = teacher_targets(samples, teacher, model, share_extractor.then_some(&z))?;
    let (out, trace) = student_forward(&z, mask, student, model, noise_seed)?;
    let (losses, frame, mut g) = loss_and_grads(&out, &targets, mask, weights)?;
    if let Some((grads, scale)) = grads {
        if scale != 1.0 {
            g.d_utt.data.iter_mut().for_each(|v| *v *= scale);
            g.d_frames.data.iter_mut().for_each(|v| *v *= scale);
        }
        let dz = student_backward(&trace, student, grads, model, &g.d_utt, &g.d_frames);
        extractor_backward(&ext_trace, student, grads, model, &dz);
    }
    Ok((losses, frame))
}

fn extractors_equal(a: &Parameters, b: &Parameters) -> bool {
    let (x, y) = (a.named(), b.named());
    x.iter().zip(&y).all(|((_, g, s), (_, _, t))| {
        *g != ParamGroup::Extractor
            || s.data.iter().zip(&t.data).all(|(p, q)| p.to_bits() == q.to_bits())
    })
}

/// Optimizer steps of a run: every epoch's batches, grouped by `update_freq`.
pub fn plan_steps(records: &[UtteranceRecord], cfg: &TrainConfig) -> Result<Vec<Vec<Batch>>> {
    let seeds = SeedPlan::new(cfg.seed);
    let mut steps = Vec::new();
    for epoch in 0..cfg.epochs {
        let batches = make_batches(
            records,
            cfg.token_budget,
            derive_seed(seeds.data, &format!("epoch/{epoch}")),
        )?;
        for chunk in batches.chunks(cfg.update_freq.max(1)) {
            steps.push(chunk.to_vec());
        }
    }
    Ok(steps)
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub seeds: SeedPlan,
    pub student: Parameters,
    pub teacher: Parameters,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub total_steps: u64,
}

impl Trainer {
    /// Fresh student from the init sub-seed; the teacher starts as its copy.
    pub fn new(model: &ModelConfig, config: &TrainConfig, total_steps: u64) -> Result<Self> {
        model.validate()?;
        config.validate(model)?;
        let seeds = SeedPlan::new(config.seed);
        let (student, teacher) = crate::model::init_parameters(model, seeds.init)?;
        let optimizer = AdamW::init_state(&student);
        Ok(Self {
            model: model.clone(),
            config: config.clone(),
            seeds,
            student,
            teacher,
            optimizer,
            step: 0,
            total_steps,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, config: &TrainConfig) -> Result<Self> {
        config.validate(&ck.model)?;
        let optimizer = match ck.optimizer {
            Some(o) => o,
            None => AdamW::init_state(&ck.student),
        };
        Ok(Self {
            model: ck.model,
            config: config.clone(),
            seeds: SeedPlan::new(config.seed),
            student: ck.student,
            teacher: ck.teacher,
            optimizer,
            step: ck.step,
            total_steps: ck.total_steps,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            run_config: self.config.to_text(),
            step: self.step,
            total_steps: self.total_steps,
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn schedule(&self) -> EmaSchedule {
        EmaSchedule {
            tau_start: self.config.tau_start,
            tau_end: self.config.tau_end,
            total_steps: self.total_steps,
        }
    }

    /// Seed of the mask (and decoder noise) for utterance `pos` of micro-batch
    /// `micro` in the current step.
    fn utterance_seed(&self, micro: usize, pos: usize) -> u64 {
        derive_seed(self.seeds.mask, &format!("{}/{micro}/{pos}", self.step))
    }

    /// One optimizer step over `micro_batches` (accumulated). Losses are
    /// averaged per utterance within each micro-batch, then across
    /// micro-batches. `lr_override` replaces the scheduled learning rate.
    pub fn train_step_with_lr(
        &mut self,
        micro_batches: &[Vec<StepInput<'_>>],
        lr_override: Option<f64>,
    ) -> Result<StepRecord> {
        let n_micro = micro_batches.iter().filter(|b| !b.is_empty()).count();
        if n_micro == 0 {
            return Err(Error::Config("training step without utterances".into()));
        }
        let weights = self.config.loss_weights();
        let share = extractors_equal(&self.student, &self.teacher);
        let mut grads = self.student.zeros_like();
        let (mut l_frm, mut l_utt) = (0.0, 0.0);
        for (mb, batch) in micro_batches.iter().filter(|b| !b.is_empty()).enumerate() {
            let w = 1.0 / (batch.len() * n_micro) as f64;
            for (pos, item) in batch.iter().enumerate() {
                let seed = self.utterance_seed(mb, pos);
                let n_frames = ModelConfig::n_frames(item.samples.len());
                if n_frames == 0 {
                    return Err(Error::TooShort {
                        n_samples: item.samples.len(),
                    });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mask = sample_mask(n_frames, self.config.mask_p, self.config.mask_len, &mut rng);
                let (losses, _) = utterance_objective(
                    item.samples,
                    &self.student,
                    &self.teacher,
                    &self.model,
                    weights,
                    &mask,
                    derive_seed(seed, "noise"),
                    share,
                    Some((&mut grads, w)),
                )?;
                if !losses.is_finite() {
                    return Err(Error::NonFinite {
                        step: self.step + 1,
                        id: item.id.to_string(),
                    });
                }
                l_frm += w * losses.l_frm;
                l_utt += w * losses.l_utt;
            }
        }
        if self.config.max_grad_norm > 0.0 {
            clip_grad_norm(&mut grads, self.config.max_grad_norm);
        }
        let lr = lr_override.unwrap_or_else(|| {
            lr_at_step(self.step, self.total_steps, self.config.lr_peak, self.config.warmup_frac)
        });
        let tau = tau_at_step(&self.schedule(), self.step);
        AdamW::new(self.config.weight_decay).step(&mut self.student, &grads, &mut self.optimizer, lr)?;
        ema_update(&mut self.teacher, &self.student, tau)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            losses: total_loss(l_frm, l_utt, self.config.alpha),
            tau,
            lr,
        })
    }

    pub fn train_step(&mut self, micro_batches: &[Vec<StepInput<'_>>]) -> Result<StepRecord> {
        self.train_step_with_lr(micro_batches, None)
    }
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Continue from `out_dir/checkpoint.bin` when it exists.
    pub resume: bool,
    /// Stop (as if interrupted) once this many optimizer steps are done;
    /// the latest checkpoint is written but no final one.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Final checkpoint, or the latest one when stopped early.
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub completed: bool,
    pub total_steps: u64,
    /// Steps run by this invocation.
    pub records: Vec<StepRecord>,
}

fn truncate_log(path: &Path, upto: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split('\t')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= upto);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Reads the loss log back.
pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Config(format!("{}:{line}: malformed loss log row", path.display()));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let c: Vec<&str> = line.split('\t').collect();
            if c.len() != 6 {
                return Err(bad(i + 1));
            }
            let f = |j: usize| c[j].parse::<f64>().map_err(|_| bad(i + 1));
            Ok(StepRecord {
                step: c[0].parse().map_err(|_| bad(i + 1))?,
                losses: LossBreakdown {
                    l_frm: f(1)?,
                    l_utt: f(2)?,
                    alpha: 0.0,
                    total: f(3)?,
                },
                tau: f(4)?,
                lr: f(5)?,
            })
        })
        .collect()
}

/// Runs `epochs` passes over the manifest, writing `loss.tsv`,
/// `checkpoint.bin` (periodic) and `final.bin` under `out_dir`.
pub fn pretrain(
    manifest: &Path,
    model: &ModelConfig,
    config: &TrainConfig,
    out_dir: &Path,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    let manifest = load_manifest(manifest)?;
    model.validate()?;
    config.validate(model)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let plan = plan_steps(&manifest.records, config)?;
    let total_steps = plan.len() as u64;

    let latest = out_dir.join(LATEST_CHECKPOINT);
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    let log_path = out_dir.join(LOSS_LOG);

    let mut trainer = if opts.resume && latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        if ck.model != *model || ck.run_config != config.to_text() || ck.total_steps != total_steps {
            return Err(Error::Config(format!(
                "{}: checkpoint was written by a different configuration",
                latest.display()
            )));
        }
        let t = Trainer::from_checkpoint(ck, config)?;
        truncate_log(&log_path, t.step)?;
        t
    } else {
        fs::write(&log_path, format!("{LOSS_LOG_HEADER}\n")).map_err(|e| Error::io(&log_path, e))?;
        Trainer::new(model, config, total_steps)?
    };

    let waves = manifest
        .records
        .iter()
        .map(corpus::read_waveform)
        .collect::<Result<Vec<_>>>()?;
    let file = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut records = Vec::new();

    let save = |t: &Trainer, log: &mut BufWriter<File>, path: &Path| -> Result<()> {
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        t.to_checkpoint().save(path)
    };

    while (trainer.step as usize) < plan.len() {
        if opts.stop_after.is_some_and(|s| trainer.step >= s) {
            save(&trainer, &mut log, &latest)?;
            return Ok(PretrainOutcome {
                checkpoint: latest,
                loss_log: log_path,
                completed: false,
                total_steps,
                records,
            });
        }
        let micro: Vec<Vec<StepInput<'_>>> = plan[trainer.step as usize]
            .iter()
            .map(|b| {
                b.indices
                    .iter()
                    .map(|&i| StepInput {
                        id: &manifest.records[i].id,
                        samples: &waves[i].samples,
                    })
                    .collect()
            })
            .collect();
        let rec = trainer.train_step(&micro)?;
        writeln!(log, "{}", rec.to_tsv()).map_err(|e| Error::io(&log_path, e))?;
        records.push(rec);
        if config.checkpoint_every > 0 && trainer.step % config.checkpoint_every == 0 {
            save(&trainer, &mut log, &latest)?;
        }
    }
    save(&trainer, &mut log, &latest)?;
    trainer.to_checkpoint().save(&final_path)?;
    Ok(PretrainOutcome {
        checkpoint: final_path,
        loss_log: log_path,
        completed: true,
        total_steps,
        records,
    })
}
