//! Command-line entry point: `synth`, `pretrain`, `extract`, `probe`,
//! `evaluate` and `ablate`, each writing into its own run directory.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::corpus::{self, load_manifest, Manifest};
use crate::distill::loss::UttVariant;
use crate::distill::{pretrain, PretrainOptions};
use crate::error::{Error, Result};
use crate::model::init_parameters;
use crate::probe::{
    evaluate_report, extract_frozen_features, extract_with_params, make_split, train_probe, FeatureDump, FoldResult,
    LabelMap, MetricsReport, ReportTable,
};
use crate::seed::{derive_seed, SeedPlan};

pub use config::{RunConfig, Section};

pub const RUN_LOG: &str = "run.log";
pub const INPUTS: &str = "inputs.tsv";
pub const CONFIG_ECHO: &str = "config.txt";
pub const FOLDS: &str = "folds.tsv";
pub const FOLDS_HEADER: &str = "fold\twa\tua\twf1\tn_test\tabsent\tbest_epoch\tepochs_run";
pub const METRICS_TSV: &str = "metrics.tsv";
pub const METRICS_TXT: &str = "metrics.txt";
pub const ABLATION_TSV: &str = "ablation.tsv";
pub const ABLATION_TXT: &str = "ablation.txt";

#[derive(Parser, Debug)]
#[command(
    name = "emovec",
    version,
    about = "Self-supervised online distillation for speech emotion features",
    after_help = "Configuration is a flat `key = value` file; --set overrides single keys.\n\
                  Every run writes run.log, config.txt and inputs.tsv into <runs-dir>/<timestamp>-<hash>.\n\
                  Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Parent directory of run directories.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    runs_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train student and teacher on a manifest.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "TSV")]
        manifest: PathBuf,
        /// Continue an interrupted pretrain run directory.
        #[arg(long, value_name = "RUN_DIR")]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps, keeping the checkpoint.
        #[arg(long, value_name = "STEPS")]
        stop_after: Option<u64>,
    },
    /// Dump frozen student features for a manifest.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "TSV")]
        manifest: PathBuf,
    },
    /// Train downstream heads per fold on frozen features.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        features: PathBuf,
        #[arg(long, value_name = "TSV")]
        manifest: PathBuf,
    },
    /// Aggregate per-fold probe results into a metrics table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// `folds.tsv` written by `probe`.
        #[arg(long, value_name = "TSV")]
        folds: PathBuf,
    },
    /// Run one ablation axis end to end and tabulate the arms.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Corpus to use; a synthetic one is generated when absent.
        #[arg(long, value_name = "TSV")]
        manifest: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "loss_combination")]
    LossCombination,
    #[value(name = "utt_variant")]
    UttVariant,
    #[value(name = "alpha")]
    Alpha,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::LossCombination => "loss_combination",
            Axis::UttVariant => "utt_variant",
            Axis::Alpha => "alpha",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        <Axis as ValueEnum>::from_str(s, false).map_err(|_| Error::Config(format!("unknown ablation axis `{s}`")))
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Failures print one `error[<category>]: ...` line.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{}", e.render());
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        2
                    } else {
                        0
                    }
                }
                _ => {
                    let text = e.render().to_string();
                    let first = text.lines().next().unwrap_or("invalid arguments");
                    let _ = writeln!(err, "error[usage]: {}", first.trim_start_matches("error: "));
                    2
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "error[{}]: {msg}", cat.as_str());
            cat.exit_code()
        }
    }
}

fn emit(out: &mut dyn Write, line: String) {
    let _ = writeln!(out, "{line}");
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth { common } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let mut run = RunDir::create(&common.runs_dir, "synth", &cfg, &[Section::Synth])?;
            let manifest = synth(&cfg, &run.path.join("corpus"))?;
            run.input("output_manifest", &manifest)?;
            emit(out, format!("manifest\t{}", manifest.display()));
            run.finish(out)
        }
        Command::Pretrain {
            common,
            manifest,
            resume,
            stop_after,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let sections = [Section::Model, Section::Train];
            let mut run = match &resume {
                Some(dir) => RunDir::reopen(dir, "pretrain", &cfg, &sections)?,
                None => RunDir::create(&common.runs_dir, "pretrain", &cfg, &sections)?,
            };
            run.input("manifest", &manifest)?;
            let opts = PretrainOptions {
                resume: resume.is_some(),
                stop_after,
            };
            let outcome = pretrain(&manifest, &cfg.model, &cfg.train, &run.path, &opts)?;
            run.line(&format!(
                "pretrain\tsteps_run\t{}\ttotal_steps\t{}\tcompleted\t{}",
                outcome.records.len(),
                outcome.total_steps,
                outcome.completed
            ))?;
            if let Some(last) = outcome.records.last() {
                run.line(&format!("final_loss\t{}", last.to_tsv()))?;
            }
            emit(out, format!("checkpoint\t{}", outcome.checkpoint.display()));
            run.finish(out)
        }
        Command::Extract {
            common,
            checkpoint,
            manifest,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let mut run = RunDir::create(&common.runs_dir, "extract", &cfg, &[Section::Extract])?;
            run.input("checkpoint", &checkpoint)?;
            run.input("manifest", &manifest)?;
            let dump = extract_frozen_features(&checkpoint, &manifest, cfg.layer_agg)?;
            let dir = run.path.join("features");
            dump.save(&dir)?;
            run.line(&format!("features\t{}\tsource\t{}", dump.items.len(), dump.source))?;
            emit(out, format!("features\t{}", dir.display()));
            run.finish(out)
        }
        Command::Probe {
            common,
            features,
            manifest,
        } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let mut run = RunDir::create(&common.runs_dir, "probe", &cfg, &[Section::Probe])?;
            run.input("features_index", &features.join("index.tsv"))?;
            run.input("manifest", &manifest)?;
            let dump = FeatureDump::load(&features)?;
            let manifest = load_manifest(&manifest)?;
            let folds = probe_dump(&cfg, &dump, &manifest)?;
            let path = run.path.join(FOLDS);
            write_folds(&path, &folds)?;
            let table = fold_table(&folds)?;
            run.line(&format!("probe\tmean_wa\t{}\tstd_wa\t{}", table.mean.wa, table.std.wa))?;
            emit(out, format!("folds\t{}", path.display()));
            run.finish(out)
        }
        Command::Evaluate { common, folds } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let mut run = RunDir::create(&common.runs_dir, "evaluate", &cfg, &[])?;
            run.input("folds", &folds)?;
            let reports = read_folds(&folds)?;
            let table = evaluate_report(&reports).ok_or_else(|| Error::Metrics(format!("{}: no folds", folds.display())))?;
            write_file(&run.path.join(METRICS_TSV), &table.to_tsv())?;
            write_file(&run.path.join(METRICS_TXT), &table.to_text())?;
            let _ = write!(out, "{}", table.to_text());
            emit(out, format!("metrics\t{}", run.path.join(METRICS_TSV).display()));
            run.finish(out)
        }
        Command::Ablate { common, axis, manifest } => {
            let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
            let mut sections = vec![Section::Model, Section::Train, Section::Extract, Section::Probe];
            if manifest.is_none() {
                sections.push(Section::Synth);
            }
            let mut run = RunDir::create(&common.runs_dir, &format!("ablate-{axis}"), &cfg, &sections)?;
            let manifest = match manifest {
                Some(m) => m,
                None => synth(&cfg, &run.path.join("corpus"))?,
            };
            run.input("manifest", &manifest)?;
            let table = ablate(&cfg, axis, &manifest, &run.path.join("arms"), &mut |line| run.line(line))?;
            write_file(&run.path.join(ABLATION_TSV), &table.to_tsv())?;
            write_file(&run.path.join(ABLATION_TXT), &table.to_text())?;
            let _ = write!(out, "{}", table.to_text());
            emit(out, format!("ablation\t{}", run.path.join(ABLATION_TSV).display()));
            run.finish(out)
        }
    }
}

// ------------------------------------------------------------ run directory

/// `<runs_dir>/<timestamp>-<hash8>` holding `run.log`, `config.txt` and
/// `inputs.tsv`.
pub struct RunDir {
    pub path: PathBuf,
    log: File,
}

pub fn config_hash(command: &str, config_text: &str) -> String {
    let digest = Sha256::digest(format!("command = {command}\n{config_text}").as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_sha256(path: &Path) -> Result<(u64, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok((bytes.len() as u64, digest.iter().map(|b| format!("{b:02x}")).collect()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl RunDir {
    pub fn create(runs_dir: &Path, command: &str, cfg: &RunConfig, sections: &[Section]) -> Result<Self> {
        let text = cfg.to_text(sections);
        let hash = config_hash(command, &text);
        let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
        let base = format!("{stamp}-{}", &hash[..8]);
        let mut path = runs_dir.join(&base);
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = runs_dir.join(format!("{base}-{n}"));
        }
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        write_file(&path.join(INPUTS), "role\tpath\tbytes\tsha256\n")?;
        Self::open(path, command, cfg, sections, &hash)
    }

    /// Appends to an existing run directory; its config must match.
    pub fn reopen(dir: &Path, command: &str, cfg: &RunConfig, sections: &[Section]) -> Result<Self> {
        let text = cfg.to_text(sections);
        let echo = dir.join(CONFIG_ECHO);
        let old = fs::read_to_string(&echo).map_err(|e| Error::io(&echo, e))?;
        if old != text {
            return Err(Error::Config(format!(
                "{}: resume configuration differs from the original run",
                dir.display()
            )));
        }
        let hash = config_hash(command, &text);
        Self::open(dir.to_path_buf(), command, cfg, sections, &hash)
    }

    fn open(path: PathBuf, command: &str, cfg: &RunConfig, sections: &[Section], hash: &str) -> Result<Self> {
        let log_path = path.join(RUN_LOG);
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut run = Self { path, log };
        write_file(&run.path.join(CONFIG_ECHO), &cfg.to_text(sections))?;
        run.line(&format!("command\t{command}"))?;
        run.line(&format!("started\t{}", chrono::Local::now().to_rfc3339()))?;
        run.line(&format!("config_hash\t{hash}"))?;
        for (k, v) in cfg.pairs(sections) {
            run.line(&format!("config\t{k}\t{v}"))?;
        }
        if !sections.is_empty() {
            let s = SeedPlan::new(cfg.master_seed());
            for (name, v) in [("master", s.master), ("data", s.data), ("init", s.init), ("mask", s.mask), ("probe", s.probe)] {
                run.line(&format!("seed\t{name}\t{v}"))?;
            }
        }
        Ok(run)
    }

    pub fn line(&mut self, text: &str) -> Result<()> {
        let path = self.path.join(RUN_LOG);
        writeln!(self.log, "{text}").map_err(|e| Error::io(path, e))
    }

    /// Records an input file with its size and SHA-256.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let (bytes, sha) = file_sha256(path)?;
        let row = format!("{role}\t{}\t{bytes}\t{sha}", path.display());
        let inputs = self.path.join(INPUTS);
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&inputs)
            .map_err(|e| Error::io(&inputs, e))?;
        writeln!(f, "{row}").map_err(|e| Error::io(&inputs, e))?;
        self.line(&format!("input\t{row}"))
    }

    fn finish(mut self, out: &mut dyn Write) -> Result<()> {
        self.line("status\tok")?;
        emit(out, format!("run_dir\t{}", self.path.display()));
        Ok(())
    }
}

// ------------------------------------------------------------ orchestration

/// Writes the synthetic corpus described by `cfg` into `dir`.
pub fn synth(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let s = &cfg.synth;
    corpus::synthesize_corpus_with(
        s.n_utts,
        s.n_classes,
        s.n_speakers,
        SeedPlan::new(cfg.master_seed()).data,
        dir,
        &s.params,
    )
}

/// Split and head seeds both derive from the probe sub-seed.
pub fn probe_dump(cfg: &RunConfig, dump: &FeatureDump, manifest: &Manifest) -> Result<Vec<FoldResult>> {
    let seed = SeedPlan::new(cfg.master_seed()).probe;
    let labels = LabelMap::from_manifest(manifest);
    let split = make_split(&manifest.records, cfg.split_scheme, cfg.fold_count(), derive_seed(seed, "split"))?;
    let mut pcfg = cfg.probe.clone();
    pcfg.seed = derive_seed(seed, "heads");
    train_probe(dump, &labels, &split, &pcfg)
}

pub fn fold_table(folds: &[FoldResult]) -> Result<ReportTable> {
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    evaluate_report(&reports).ok_or_else(|| Error::Probe("no folds".into()))
}

pub fn write_folds(path: &Path, folds: &[FoldResult]) -> Result<()> {
    let mut text = format!("{FOLDS_HEADER}\n");
    for f in folds {
        let r = &f.report;
        let absent = if r.absent_classes.is_empty() {
            "-".to_string()
        } else {
            r.absent_classes.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        };
        text += &format!(
            "{}\t{}\t{}\t{}\t{}\t{absent}\t{}\t{}\n",
            f.fold, r.wa, r.ua, r.wf1, r.n_test, f.best_epoch, f.epochs_run
        );
    }
    write_file(path, &text)
}

/// Reads `folds.tsv` back as reports carrying the scalar metrics (the
/// confusion matrix is not stored there and comes back empty).
pub fn read_folds(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(FOLDS_HEADER) {
        return Err(Error::Metrics(format!("{}: not a folds table", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Metrics(format!("{}:{}: malformed row", path.display(), i + 2));
            let c: Vec<&str> = line.split('\t').collect();
            if c.len() != 8 {
                return Err(bad());
            }
            let f = |j: usize| c[j].parse::<f64>().map_err(|_| bad());
            let absent = if c[5] == "-" {
                Vec::new()
            } else {
                c[5].split(',').map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?
            };
            Ok(MetricsReport {
                wa: f(1)?,
                ua: f(2)?,
                wf1: f(3)?,
                confusion: Vec::new(),
                n_test: c[4].parse().map_err(|_| bad())?,
                labels: Vec::new(),
                absent_classes: absent,
            })
        })
        .collect()
}

/// Outcome of one pretrain, extract and probe pass.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub name: String,
    pub table: ReportTable,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// Pre-trains on `manifest` into `dir`, then probes the frozen student.
pub fn run_arm(name: &str, cfg: &RunConfig, manifest_path: &Path, dir: &Path) -> Result<ArmResult> {
    let outcome = pretrain(manifest_path, &cfg.model, &cfg.train, dir, &PretrainOptions::default())?;
    let dump = extract_frozen_features(&outcome.checkpoint, manifest_path, cfg.layer_agg)?;
    let manifest = load_manifest(manifest_path)?;
    let folds = probe_dump(cfg, &dump, &manifest)?;
    write_folds(&dir.join(FOLDS), &folds)?;
    Ok(ArmResult {
        name: name.to_string(),
        table: fold_table(&folds)?,
        checkpoint: outcome.checkpoint,
        loss_log: outcome.loss_log,
    })
}

/// Probe table of the untrained student that pretraining starts from.
pub fn random_init_table(cfg: &RunConfig, manifest_path: &Path) -> Result<ReportTable> {
    let manifest = load_manifest(manifest_path)?;
    let (student, _) = init_parameters(&cfg.model, SeedPlan::new(cfg.master_seed()).init)?;
    let dump = extract_with_params(&student, &cfg.model, &manifest, cfg.layer_agg, "random-init")?;
    fold_table(&probe_dump(cfg, &dump, &manifest)?)
}

/// The named configurations of one ablation axis, in table order.
pub fn ablation_arms(axis: Axis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        Axis::LossCombination => vec![
            ("utt-only".into(), with(&|c| c.train.frame_loss = false)),
            ("frm-only".into(), with(&|c| c.train.alpha = 0.0)),
            ("utt+frm".into(), base.clone()),
        ],
        Axis::UttVariant => UttVariant::ALL
            .iter()
            .map(|&v| {
                let chunk = base.model.n_utt_tokens.max(2);
                let name = match v {
                    UttVariant::Token => "Token",
                    UttVariant::Chunk => "Chunk",
                    UttVariant::Global => "Global",
                };
                (
                    name.to_string(),
                    with(&|c| {
                        c.train.utt_variant = v;
                        c.model.n_utt_tokens = v.default_tokens(chunk);
                    }),
                )
            })
            .collect(),
        Axis::Alpha => [0.0, 0.1, 1.0, 10.0]
            .iter()
            .map(|&a| (a.to_string(), with(&|c| c.train.alpha = a)))
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<ArmResult>,
    pub random_init: ReportTable,
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# ablation v1; axis {}; probe metrics are fold means with population std\narm\twa\twa_std\tua\tua_std\twf1\twf1_std\n",
            self.axis
        );
        for r in &self.rows {
            let (m, d) = (&r.table.mean, &r.table.std);
            s += &format!(
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                r.name, m.wa, d.wa, m.ua, d.ua, m.wf1, d.wf1
            );
        }
        s + &format!("# random-init reference wa {:.4}\n", self.random_init.mean.wa)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("ablation: {}\n{:<10} {:>14} {:>8} {:>8}\n", self.axis, "arm", "WA", "UA", "WF1");
        for r in &self.rows {
            let (m, d) = (&r.table.mean, &r.table.std);
            s += &format!(
                "{:<10} {:>7.2} ± {:<4.2} {:>8.2} {:>8.2}\n",
                r.name, m.wa, d.wa, m.ua, m.wf1
            );
        }
        s + &format!("random-init reference WA {:.2}\n", self.random_init.mean.wa)
    }
}

/// Runs every arm of `axis` under `dir/<arm>`; `log` receives one line per
/// finished arm.
pub fn ablate(
    base: &RunConfig,
    axis: Axis,
    manifest: &Path,
    dir: &Path,
    log: &mut dyn FnMut(&str) -> Result<()>,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_arms(axis, base) {
        let arm_dir = dir.join(name.replace('+', "_"));
        let row = run_arm(&name, &cfg, manifest, &arm_dir)?;
        log(&format!("arm\t{name}\twa\t{}\tdir\t{}", row.table.mean.wa, arm_dir.display()))?;
        rows.push(row);
    }
    let random_init = random_init_table(base, manifest)?;
    log(&format!("arm\trandom-init\twa\t{}", random_init.mean.wa))?;
    Ok(AblationTable {
        axis,
        rows,
        random_init,
    })
}

/// Entry point of the binary.
pub fn main_with_args() -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
