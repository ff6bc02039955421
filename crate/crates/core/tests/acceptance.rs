//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL ...` line (visible with `--nocapture` and on
//! failure).

mod common;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{grad_case, relative_errors, worst};
use emovec::cli::{self, ArmResult, Axis, RunConfig};
use emovec::corpus::{load_manifest, UtteranceRecord};
use emovec::distill::loss::{loss_frame, UttVariant};
use emovec::distill::schedule::EmaSchedule;
use emovec::distill::{ema_update, pretrain, sample_mask, tau_at_step, MaskSpec, PretrainOptions};
use emovec::model::forward::extractor_forward;
use emovec::model::{BackboneStyle, Mat, ModelConfig, Parameters};
use emovec::probe::{compute_metrics, make_split, SplitScheme};

fn report(n: usize, ok: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

// ------------------------------------------------------------------ 1

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut worst_all = (String::new(), 0.0);
    for style in [BackboneStyle::Standard, BackboneStyle::MaeDecoder] {
        for variant in UttVariant::ALL {
            let case = grad_case(style, variant);
            let (name, err) = worst(&relative_errors(&case.analytic(), &case.numeric(1e-6)));
            if err > worst_all.1 {
                worst_all = (format!("{style}/{variant}/{name}"), err);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        worst_all.1 <= 1e-4 && secs < 120.0,
        &format!("worst relative error {:.2e} at {} (tol 1e-4), {secs:.1}s (limit 120s)", worst_all.1, worst_all.0),
    );
}

// ------------------------------------------------------------------ 2

fn scalar_params(v: f64) -> Parameters {
    let mut p = Parameters::init(&ModelConfig::tiny(), 0).unwrap();
    p.for_each_mut(|_, _, t| t.data.iter_mut().for_each(|x| *x = v));
    p
}

fn backbone_values(p: &Parameters) -> Vec<f64> {
    p.named()
        .into_iter()
        .filter(|(name, _, _)| !name.starts_with("extractor") && !name.starts_with("feature_"))
        .flat_map(|(_, _, t)| t.data.clone())
        .collect()
}

#[test]
fn criterion_2_ema_and_tau_suite() {
    let sched = EmaSchedule::new(0.999, 0.99999, 1000).unwrap();
    let endpoints = tau_at_step(&sched, 0) == 0.999 && tau_at_step(&sched, 1000) == 0.99999;

    let student = scalar_params(4.0);
    let mut fixed = scalar_params(2.0);
    ema_update(&mut fixed, &student, 1.0).unwrap();
    let fixed_point = backbone_values(&fixed).iter().all(|&v| v == 2.0);
    let mut collapse = scalar_params(2.0);
    ema_update(&mut collapse, &student, 0.0).unwrap();
    let collapsed = backbone_values(&collapse).iter().all(|&v| v == 4.0);
    let mut half = scalar_params(2.0);
    ema_update(&mut half, &student, 0.5).unwrap();
    let oracle = backbone_values(&half).iter().all(|&v| v == 3.0);

    let mut runner = TestRunner::new(PropConfig {
        cases: 64,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let contraction = runner
        .run(&(any::<u64>(), any::<u64>(), 0.0f64..=1.0), |(s1, s2, tau)| {
            let cfg = ModelConfig::tiny();
            let s = Parameters::init(&cfg, s1).unwrap();
            let mut t = Parameters::init(&cfg, s2).unwrap();
            let before = backbone_values(&t);
            let target = backbone_values(&s);
            ema_update(&mut t, &s, tau).unwrap();
            for ((a, b), x) in backbone_values(&t).iter().zip(&before).zip(&target) {
                let slack = 4.0 * f64::EPSILON * (b.abs() + x.abs());
                prop_assert!((a - x).abs() <= tau * (b - x).abs() + slack);
            }
            Ok(())
        })
        .is_ok();
    report(
        2,
        endpoints && fixed_point && collapsed && oracle && contraction,
        &format!(
            "endpoints {endpoints}, fixed point {fixed_point}, collapse {collapsed}, tau=0.5 oracle {oracle}, contraction {contraction}"
        ),
    );
}

// ------------------------------------------------------------------ 3

/// Frame `j` is masked when a span starts in any of the `min(j + 1, l)`
/// positions that reach it.
fn closed_form_fraction(n: usize, p: f64, l: usize) -> f64 {
    (0..n).map(|j| 1.0 - (1.0 - p).powi((j + 1).min(l) as i32)).sum::<f64>() / n as f64
}

#[test]
fn criterion_3_mask_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let degenerate = sample_mask(40, 0.0, 5, &mut rng).is_empty()
        && sample_mask(40, 1.0, 5, &mut rng).masked_indices == (0..40).collect::<Vec<_>>();

    let mut worst_dev: f64 = 0.0;
    for &(n, p, l) in &[(49usize, 0.5, 5usize), (49, 0.065, 10), (20, 0.2, 5), (7, 0.3, 10)] {
        let trials = 10_000;
        let total: usize = (0..trials).map(|_| sample_mask(n, p, l, &mut rng).count()).sum();
        let mc = total as f64 / (trials * n) as f64;
        worst_dev = worst_dev.max((mc - closed_form_fraction(n, p, l)).abs());
    }

    let mut local = true;
    for trial in 0..200 {
        let (rows, cols) = (12, 5);
        let ys = Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let yt = Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let mask = if trial == 0 {
            MaskSpec::empty(0.5, 5)
        } else {
            sample_mask(rows, 0.4, 3, &mut rng)
        };
        let base = loss_frame(&ys, &yt, &mask).unwrap().value;
        let mut perturbed = ys.clone();
        for r in (0..rows).filter(|r| !mask.masked_indices.contains(r)) {
            perturbed.row_mut(r).iter_mut().for_each(|v| *v += rng.gen_range(-100.0..100.0));
        }
        local &= loss_frame(&perturbed, &yt, &mask).unwrap().value.to_bits() == base.to_bits();
    }
    report(
        3,
        degenerate && worst_dev <= 0.02 && local,
        &format!("degenerate p {degenerate}, worst Monte-Carlo deviation {worst_dev:.4} (tol 0.02), locality {local}"),
    );
}

// ------------------------------------------------------------------ 4

/// Explicit per-class loops, independent of the library implementation.
fn brute_force(t: &[usize], p: &[usize], c: usize) -> (f64, f64, f64) {
    let n = t.len() as f64;
    let wa = 100.0 * t.iter().zip(p).filter(|(a, b)| a == b).count() as f64 / n;
    let (mut recall_sum, mut present, mut wf1) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let mut tp = 0.0;
        let mut support = 0.0;
        let mut predicted = 0.0;
        for i in 0..t.len() {
            if t[i] == k {
                support += 1.0;
                if p[i] == k {
                    tp += 1.0;
                }
            }
            if p[i] == k {
                predicted += 1.0;
            }
        }
        if support == 0.0 {
            continue;
        }
        let recall = tp / support;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let f1 = if tp > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        recall_sum += recall;
        present += 1.0;
        wf1 += support * f1;
    }
    (wa, 100.0 * recall_sum / present, 100.0 * wf1 / n)
}

#[test]
fn criterion_4_metric_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_dev: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.gen_range(2..=8);
        let n = rng.gen_range(1..120);
        let t: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let labels: Vec<String> = (0..c).map(|k| format!("c{k}")).collect();
        let m = compute_metrics(&t, &p, &labels).unwrap();
        let (wa, ua, wf1) = brute_force(&t, &p, c);
        worst_dev = worst_dev.max((m.wa - wa).abs()).max((m.ua - ua).abs()).max((m.wf1 - wf1).abs());
    }
    let ex = compute_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], &["a".into(), "b".into()]).unwrap();
    let example = (ex.wa - 75.0).abs() < 1e-9 && (ex.ua - 75.0).abs() < 1e-9 && (ex.wf1 - 73.33).abs() <= 0.01;
    report(
        4,
        worst_dev <= 1e-9 && example,
        &format!(
            "worst deviation from oracle {worst_dev:.1e} over 1000 instances (tol 1e-9); example WA {:.2} UA {:.2} WF1 {:.2}",
            ex.wa, ex.ua, ex.wf1
        ),
    );
}

// ------------------------------------------------------------------ 5

fn record(i: usize, speaker: usize, session: usize) -> UtteranceRecord {
    UtteranceRecord {
        id: format!("u{i:04}"),
        audio_path: PathBuf::from("unused.wav"),
        n_samples: 16000,
        label: Some("neu".into()),
        speaker: format!("spk{speaker:02}"),
        session: format!("ses{session}"),
        language: "en".into(),
    }
}

/// Disjoint roles within each fold, full coverage, each id tested once.
fn sound(plan: &emovec::probe::SplitPlan, records: &[UtteranceRecord]) -> bool {
    let mut tested: HashMap<&str, usize> = HashMap::new();
    for f in &plan.folds {
        let mut role: HashMap<&str, usize> = HashMap::new();
        for id in f.train.iter().chain(&f.val).chain(&f.test) {
            *role.entry(id.as_str()).or_default() += 1;
        }
        if role.len() != records.len() || role.values().any(|&c| c != 1) || f.test.is_empty() || f.val.is_empty() {
            return false;
        }
        for id in &f.test {
            *tested.entry(id.as_str()).or_default() += 1;
        }
    }
    tested.len() == records.len() && tested.values().all(|&c| c == 1)
}

#[test]
fn criterion_5_splitter_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    let mut all_sound = true;
    for trial in 0..150 {
        let n = rng.gen_range(30..200);
        let (n_spk, n_ses) = (rng.gen_range(10..20), rng.gen_range(5..10));
        let records: Vec<_> = (0..n).map(|i| record(i, rng.gen_range(0..n_spk), rng.gen_range(0..n_ses))).collect();
        for scheme in [SplitScheme::Session5Fold, SplitScheme::Speaker10Fold, SplitScheme::RandomKFold] {
            if let Ok(plan) = make_split(&records, scheme, scheme.default_k(), trial) {
                checked += 1;
                all_sound &= plan.folds.len() == scheme.default_k() && sound(&plan, &records);
            }
        }
    }
    let by_id = |records: &[UtteranceRecord]| -> HashMap<String, UtteranceRecord> {
        records.iter().map(|r| (r.id.clone(), r.clone())).collect()
    };
    let five: Vec<_> = (0..100).map(|i| record(i, i % 10, i % 5)).collect();
    let m5 = by_id(&five);
    let plan5 = make_split(&five, SplitScheme::Session5Fold, 5, 1).unwrap();
    let sessions_ok = sound(&plan5, &five)
        && plan5.folds.iter().all(|f| {
            let s: std::collections::BTreeSet<_> = f.test.iter().map(|id| &m5[id].session).collect();
            s.len() == 1
        });
    let plan10 = make_split(&five, SplitScheme::Speaker10Fold, 10, 1).unwrap();
    let count = |ids: &[String]| ids.iter().map(|id| &m5[id].speaker).collect::<std::collections::BTreeSet<_>>().len();
    let speakers_ok = sound(&plan10, &five)
        && plan10
            .folds
            .iter()
            .all(|f| (count(&f.train), count(&f.val), count(&f.test)) == (8, 1, 1));
    report(
        5,
        all_sound && checked > 300 && sessions_ok && speakers_ok,
        &format!("{checked} random plans sound {all_sound}; 5-session folds {sessions_ok}; 10-speaker 8/1/1 folds {speakers_ok}"),
    );
}

// ------------------------------------------------------------------ 6

/// Output length of the strided convolution stack, by the textbook formula.
fn conv_chain(n: usize) -> usize {
    let layers = [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)];
    layers.iter().fold(n, |len, &(k, s)| if len < k { 0 } else { (len - k) / s + 1 })
}

#[test]
fn criterion_6_architecture_arithmetic() {
    let cfg = ModelConfig::tiny();
    let params = Parameters::init(&cfg, 6).unwrap();
    let second = vec![0.01f32; 16000];
    let frames_1s = extractor_forward(&second, &params, &cfg).unwrap().0.frames.rows;
    let stride: usize = emovec::model::config::EXTRACTOR_STRIDES.iter().product();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut closure = true;
    for _ in 0..40 {
        let n = rng.gen_range(400..24000);
        let wave: Vec<f32> = (0..n).map(|i| ((i as f32) * 0.01).sin() * 0.3).collect();
        let rows = extractor_forward(&wave, &params, &cfg).unwrap().0.frames.rows;
        closure &= rows == conv_chain(n) && rows == ModelConfig::n_frames(n) && rows >= 1;
    }
    let too_short = extractor_forward(&[0.0; 399], &params, &cfg).is_err();
    report(
        6,
        frames_1s == 49 && stride == 320 && closure && too_short,
        &format!("16000 samples -> {frames_1s} frames (want 49), total stride {stride}, shape closure {closure}, 399 samples rejected {too_short}"),
    );
}

// ------------------------------------------------------------------ 7, 8

/// Desk preset on a 400-utterance, 4-class synthetic corpus. Utterances are
/// kept at 0.5-1.5 s to bound the total runtime of the seven arms.
fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.n_utts = 400;
    cfg.synth.n_classes = 4;
    cfg.synth.params.max_seconds = 1.5;
    cfg
}

struct DeskRuns {
    root: PathBuf,
    manifest: PathBuf,
    random_init_wa: f64,
    arms: Mutex<HashMap<String, ArmResult>>,
}

impl DeskRuns {
    /// Pre-trains and probes `cfg` once; identical configs share a result.
    fn arm(&self, name: &str, cfg: &RunConfig) -> ArmResult {
        let key = cfg.to_text(&[cli::Section::Model, cli::Section::Train]);
        if let Some(r) = self.arms.lock().unwrap().get(&key) {
            return ArmResult {
                name: name.to_string(),
                ..r.clone()
            };
        }
        let dir = self.root.join(format!("arm{}", self.arms.lock().unwrap().len()));
        let r = cli::run_arm(name, cfg, &self.manifest, &dir).unwrap();
        self.arms.lock().unwrap().insert(key, r.clone());
        r
    }
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
        let _ = fs::remove_dir_all(&root);
        let cfg = desk_config();
        let manifest = cli::synth(&cfg, &root.join("corpus")).unwrap();
        let random_init_wa = cli::random_init_table(&cfg, &manifest).unwrap().mean.wa;
        DeskRuns {
            root,
            manifest,
            random_init_wa,
            arms: Mutex::new(HashMap::new()),
        }
    })
}

#[test]
fn criterion_7_end_to_end_desk_run() {
    let runs = desk_runs();
    let cfg = desk_config();
    let start = Instant::now();
    let base = runs.arm("utt+frm", &cfg);
    let secs = start.elapsed().as_secs_f64();
    let pre = base.table.mean.wa;
    let rand_wa = runs.random_init_wa;
    report(
        7,
        pre >= rand_wa + 15.0 && pre >= 25.0 + 25.0 && secs <= 1800.0,
        &format!(
            "pre-trained WA {pre:.2} vs random-init WA {rand_wa:.2} (need +15 and >= 50), pretrain+probe {secs:.0}s (limit 1800s)"
        ),
    );
}

#[test]
fn criterion_8_ablation_orderings() {
    let runs = desk_runs();
    let base = desk_config();
    let row = |axis: Axis| -> Vec<ArmResult> {
        cli::ablation_arms(axis, &base)
            .into_iter()
            .map(|(name, cfg)| runs.arm(&name, &cfg))
            .collect()
    };
    let loss = row(Axis::LossCombination);
    let wa = |rows: &[ArmResult], name: &str| rows.iter().find(|r| r.name == name).unwrap().table.mean.wa;
    let (utt, frm, both) = (wa(&loss, "utt-only"), wa(&loss, "frm-only"), wa(&loss, "utt+frm"));
    let alpha = row(Axis::Alpha);
    let variant = row(Axis::UttVariant);
    let names = |rows: &[ArmResult]| rows.iter().map(|r| r.name.clone()).collect::<Vec<_>>();
    let complete = names(&alpha) == ["0", "0.1", "1", "10"] && names(&variant) == ["Token", "Chunk", "Global"];
    let fmt_rows = |rows: &[ArmResult]| {
        rows.iter()
            .map(|r| format!("{}={:.2}", r.name, r.table.mean.wa))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("alpha axis WA: {}", fmt_rows(&alpha));
    println!("variant axis WA: {}", fmt_rows(&variant));
    report(
        8,
        (utt - 25.0).abs() <= 10.0 && frm >= utt + 20.0 && both >= utt + 20.0 && complete,
        &format!(
            "utt-only {utt:.2} (need 25±10), frm-only {frm:.2}, utt+frm {both:.2} (need >= utt-only + 20), tables complete {complete}; alpha [{}]; variant [{}]",
            fmt_rows(&alpha),
            fmt_rows(&variant)
        ),
    );
}

// ------------------------------------------------------------------ 9

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.n_utts = 60;
    cfg.synth.params.max_seconds = 1.0;
    cfg.train.epochs = 2;
    cfg.train.token_budget = 48_000;
    cfg.train.checkpoint_every = 3;
    cfg.probe.epochs = 20;
    cfg
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn criterion_9_determinism_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let manifest = cli::synth(&cfg, &dir.path().join("corpus")).unwrap();
    let a = cli::run_arm("a", &cfg, &manifest, &dir.path().join("a")).unwrap();
    let b = cli::run_arm("b", &cfg, &manifest, &dir.path().join("b")).unwrap();
    let logs_equal = bytes(&a.loss_log) == bytes(&b.loss_log);
    let metrics_equal = bytes(&dir.path().join("a").join(cli::FOLDS)) == bytes(&dir.path().join("b").join(cli::FOLDS))
        && a.table == b.table;

    let c = dir.path().join("c");
    let stop = PretrainOptions {
        resume: false,
        stop_after: Some(5),
    };
    let first = pretrain(&manifest, &cfg.model, &cfg.train, &c, &stop).unwrap();
    let resumed = pretrain(
        &manifest,
        &cfg.model,
        &cfg.train,
        &c,
        &PretrainOptions {
            resume: true,
            stop_after: None,
        },
    )
    .unwrap();
    let resume_ok = !first.completed
        && resumed.completed
        && bytes(&resumed.loss_log) == bytes(&a.loss_log)
        && bytes(&resumed.checkpoint) == bytes(&a.checkpoint);
    let n_steps = load_manifest(&manifest).map(|m| m.records.len()).unwrap_or(0);
    report(
        9,
        logs_equal && metrics_equal && resume_ok,
        &format!(
            "loss logs identical {logs_equal}, metrics identical {metrics_equal}, resumed at step 5 of {} matches {resume_ok} ({n_steps} utterances)",
            resumed.total_steps
        ),
    );
}
