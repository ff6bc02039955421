use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::model::Mat;
use crate::probe::features::FeatureDump;
use crate::probe::heads::{argmax, GruHead, Head, MlpHead};
use crate::probe::metrics::{compute_metrics, MetricsReport};
use crate::probe::split::{Fold, SplitPlan};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Two linear layers with a ReLU, on time-pooled features.
    Linear,
    /// Stacked GRU over the frame sequence.
    Gru,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::Gru => "gru",
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "gru" => Ok(HeadKind::Gru),
            _ => Err(Error::Config(format!("unknown probe head `{s}` (linear, gru)"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub head: HeadKind,
    pub hidden: usize,
    pub gru_layers: usize,
    pub epochs: usize,
    /// Epochs without a validation WA improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Train on train + val and select the epoch on the test fold.
    pub val_is_test: bool,
    /// Standardise inputs with train-fold mean and std per dimension.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            head: HeadKind::Linear,
            hidden: 32,
            gru_layers: 2,
            epochs: 100,
            patience: 10,
            lr: 1e-3,
            batch_size: 32,
            val_is_test: false,
            standardize: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("probe: {m}")));
        if self.hidden == 0 || self.gru_layers == 0 {
            return bad("hidden and gru_layers must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

/// Label set plus the label index of each labeled utterance id.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub label_set: Vec<String>,
    pub by_id: HashMap<String, usize>,
}

impl LabelMap {
    pub fn from_manifest(manifest: &Manifest) -> Self {
        let by_id = manifest
            .records
            .iter()
            .filter_map(|r| {
                let l = r.label.as_deref()?;
                Some((r.id.clone(), manifest.label_index(l)?))
            })
            .collect();
        Self {
            label_set: manifest.labels.clone(),
            by_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub report: MetricsReport,
    /// Epoch (1-based) whose parameters produced the test report.
    pub best_epoch: usize,
    pub best_val_wa: f64,
    pub epochs_run: usize,
}

struct FoldData {
    inputs: Vec<Mat>,
    labels: Vec<usize>,
}

fn gather(ids: &[String], dump: &FeatureDump, index: &HashMap<&str, usize>, labels: &LabelMap, head: HeadKind) -> Result<FoldData> {
    let mut inputs = Vec::with_capacity(ids.len());
    let mut ys = Vec::with_capacity(ids.len());
    for id in ids {
        let &i = index
            .get(id.as_str())
            .ok_or_else(|| Error::Probe(format!("no features for utterance `{id}`")))?;
        let &y = labels
            .by_id
            .get(id)
            .ok_or_else(|| Error::Probe(format!("utterance `{id}` has no label")))?;
        let item = &dump.items[i];
        inputs.push(match head {
            HeadKind::Linear => Mat::from_vec(1, item.pooled.len(), item.pooled.clone()),
            HeadKind::Gru => item.frames.clone(),
        });
        ys.push(y);
    }
    Ok(FoldData { inputs, labels: ys })
}

/// Per-dimension mean and std over every row of the training inputs.
fn fit_standardizer(inputs: &[Mat], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut n = 0usize;
    for x in inputs {
        for r in 0..x.rows {
            crate::model::nn::axpy(1.0, x.row(r), &mut mean);
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for x in inputs {
        for r in 0..x.rows {
            for (v, (a, m)) in var.iter_mut().zip(x.row(r).iter().zip(&mean)) {
                *v += (a - m) * (a - m);
            }
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt().max(1e-8)).collect();
    (mean, std)
}

fn apply_standardizer(data: &mut FoldData, mean: &[f64], std: &[f64]) {
    for x in &mut data.inputs {
        for r in 0..x.rows {
            for ((a, m), s) in x.row_mut(r).iter_mut().zip(mean).zip(std) {
                *a = (*a - m) / s;
            }
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

fn predict(head: &dyn Head, data: &FoldData) -> Vec<usize> {
    data.inputs.iter().map(|x| argmax(&head.logits(x))).collect()
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    100.0 * hits as f64 / truth.len() as f64
}

/// Trains one head on fold `fold_idx` and reports test metrics of the epoch
/// with the best validation WA (earliest on ties).
pub fn train_fold(
    dump: &FeatureDump,
    labels: &LabelMap,
    fold: &Fold,
    fold_idx: usize,
    cfg: &ProbeConfig,
) -> Result<FoldResult> {
    cfg.validate()?;
    let index = dump.index();
    let (train_ids, val_ids): (Vec<String>, &[String]) = if cfg.val_is_test {
        (fold.train.iter().chain(&fold.val).cloned().collect(), &fold.test)
    } else {
        (fold.train.clone(), &fold.val)
    };
    for (role, ids) in [("train", &train_ids[..]), ("validation", val_ids), ("test", &fold.test[..])] {
        if ids.is_empty() {
            return Err(Error::Probe(format!("fold {fold_idx} has an empty {role} set")));
        }
    }
    let mut train = gather(&train_ids, dump, &index, labels, cfg.head)?;
    let mut val = gather(val_ids, dump, &index, labels, cfg.head)?;
    let mut test = gather(&fold.test, dump, &index, labels, cfg.head)?;
    if cfg.standardize {
        let (mean, std) = fit_standardizer(&train.inputs, dump.d_model);
        for d in [&mut train, &mut val, &mut test] {
            apply_standardizer(d, &mean, &std);
        }
    }

    let n_classes = labels.label_set.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("fold/{fold_idx}")));
    let mut head: Box<dyn Head> = match cfg.head {
        HeadKind::Linear => Box::new(MlpHead::new(dump.d_model, cfg.hidden, n_classes, &mut rng)),
        HeadKind::Gru => Box::new(GruHead::new(dump.d_model, cfg.hidden, cfg.gru_layers, n_classes, &mut rng)),
    };
    let n_params = head.params().len();
    let mut adam = Adam::new(n_params);
    let mut grad = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..train.inputs.len()).collect();

    let mut best_theta = head.params().to_vec();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in chunk {
                loss += head.loss_grad(&train.inputs[i], train.labels[i], &mut grad);
            }
            if !loss.is_finite() {
                return Err(Error::Probe(format!("non-finite probe loss in fold {fold_idx}, epoch {epoch}")));
            }
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(head.params_mut(), &grad, cfg.lr);
        }
        epochs_run = epoch;
        let wa = accuracy(&predict(head.as_ref(), &val), &val.labels);
        if wa > best_val {
            best_val = wa;
            best_epoch = epoch;
            best_theta.copy_from_slice(head.params());
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    head.params_mut().copy_from_slice(&best_theta);
    let report = compute_metrics(&test.labels, &predict(head.as_ref(), &test), &labels.label_set)?;
    Ok(FoldResult {
        fold: fold_idx,
        report,
        best_epoch,
        best_val_wa: best_val,
        epochs_run,
    })
}

/// One [`FoldResult`] per fold of `split`, in fold order.
pub fn train_probe(dump: &FeatureDump, labels: &LabelMap, split: &SplitPlan, cfg: &ProbeConfig) -> Result<Vec<FoldResult>> {
    if split.folds.is_empty() {
        return Err(Error::Probe("split has no folds".into()));
    }
    split
        .folds
        .iter()
        .enumerate()
        .map(|(i, f)| train_fold(dump, labels, f, i, cfg))
        .collect()
}
