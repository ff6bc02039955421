//! Downstream classifier heads over frozen features. Parameters live in one
//! flat vector so a single optimizer routine serves both heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::model::nn::{self, dot, Mat};

/// Softmax cross-entropy of `logits` against `label`; writes
/// `softmax - onehot` into `dlogits`.
pub fn cross_entropy(logits: &[f64], label: usize, dlogits: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    for (d, l) in dlogits.iter_mut().zip(logits) {
        *d = (l - log_z).exp();
    }
    dlogits[label] -= 1.0;
    log_z - logits[label]
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub trait Head {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Class scores for one input (`[1, d]` pooled vector or `[T, d]` frames).
    fn logits(&self, x: &Mat) -> Vec<f64>;
    /// Cross-entropy loss; adds its parameter gradient into `grad`.
    fn loss_grad(&self, x: &Mat, label: usize, grad: &mut [f64]) -> f64;
}

fn normal_fill<R: Rng>(out: &mut [f64], std: f64, rng: &mut R) {
    let n = Normal::new(0.0, std).expect("finite std");
    out.iter_mut().for_each(|v| *v = n.sample(rng));
}

/// Linear, ReLU, linear on a pooled vector.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub d_in: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub theta: Vec<f64>,
}

impl MlpHead {
    pub fn new<R: Rng>(d_in: usize, hidden: usize, n_classes: usize, rng: &mut R) -> Self {
        let mut theta = vec![0.0; hidden * d_in + hidden + n_classes * hidden + n_classes];
        normal_fill(&mut theta[..hidden * d_in], (2.0 / d_in as f64).sqrt(), rng);
        let o = hidden * d_in + hidden;
        normal_fill(&mut theta[o..o + n_classes * hidden], (1.0 / hidden as f64).sqrt(), rng);
        Self {
            d_in,
            hidden,
            n_classes,
            theta,
        }
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.theta.split_at(self.hidden * self.d_in);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.n_classes * self.hidden);
        (w1, b1, w2, b2)
    }

    fn forward(&self, x: &Mat) -> (Mat, Mat, Mat) {
        let (w1, b1, w2, b2) = self.split();
        let a = nn::linear(x, w1, b1);
        let r = nn::relu(&a);
        let logits = nn::linear(&r, w2, b2);
        (a, r, logits)
    }
}

impl Head for MlpHead {
    fn params(&self) -> &[f64] {
        &self.theta
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }
    fn logits(&self, x: &Mat) -> Vec<f64> {
        self.forward(x).2.data
    }
    fn loss_grad(&self, x: &Mat, label: usize, grad: &mut [f64]) -> f64 {
        let (a, r, logits) = self.forward(x);
        let mut dl = Mat::zeros(1, self.n_classes);
        let loss = cross_entropy(&logits.data, label, &mut dl.data);
        let (_, _, w2, _) = self.split();
        let (w1, _, _, _) = self.split();
        let (gw1, rest) = grad.split_at_mut(self.hidden * self.d_in);
        let (gb1, rest) = rest.split_at_mut(self.hidden);
        let (gw2, gb2) = rest.split_at_mut(self.n_classes * self.hidden);
        let dr = nn::linear_backward(&r, w2, &dl, gw2, gb2);
        let da = nn::relu_backward(&a, &dr);
        nn::linear_backward(x, w1, &da, gw1, gb1);
        loss
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Offsets of one GRU layer inside the flat parameter vector. Gate order
/// within the `3 * hidden` rows is reset, update, candidate.
#[derive(Clone, Copy, Debug)]
struct GruLayout {
    d_in: usize,
    w_i: usize,
    w_h: usize,
    b_i: usize,
    b_h: usize,
}

struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    /// Hidden-side candidate pre-activation `W_hn h + b_hn`.
    hn: Vec<f64>,
}

/// Stacked GRU over the frame sequence; the last hidden state of the top
/// layer feeds a linear classifier.
#[derive(Clone, Debug)]
pub struct GruHead {
    pub d_in: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub theta: Vec<f64>,
    layers: Vec<GruLayout>,
    out_w: usize,
    out_b: usize,
}

impl GruHead {
    pub fn new<R: Rng>(d_in: usize, hidden: usize, n_layers: usize, n_classes: usize, rng: &mut R) -> Self {
        let h3 = 3 * hidden;
        let mut layers = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            let din = if l == 0 { d_in } else { hidden };
            let lay = GruLayout {
                d_in: din,
                w_i: off,
                w_h: off + h3 * din,
                b_i: off + h3 * din + h3 * hidden,
                b_h: off + h3 * din + h3 * hidden + h3,
            };
            off = lay.b_h + h3;
            layers.push(lay);
        }
        let out_w = off;
        let out_b = out_w + n_classes * hidden;
        let mut theta = vec![0.0; out_b + n_classes];
        let std = (1.0 / hidden as f64).sqrt();
        for lay in &layers {
            normal_fill(&mut theta[lay.w_i..lay.b_i], std, rng);
        }
        normal_fill(&mut theta[out_w..out_b], std, rng);
        Self {
            d_in,
            hidden,
            n_layers,
            n_classes,
            theta,
            layers,
            out_w,
            out_b,
        }
    }

    fn layer_forward(&self, lay: &GruLayout, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<StepCache>) {
        let hd = self.hidden;
        let th = &self.theta;
        let mut h = vec![0.0; hd];
        let mut outs = Vec::with_capacity(xs.len());
        let mut caches = Vec::with_capacity(xs.len());
        for x in xs {
            let (mut r, mut z, mut n, mut hn) = (vec![0.0; hd], vec![0.0; hd], vec![0.0; hd], vec![0.0; hd]);
            let mut h_new = vec![0.0; hd];
            for j in 0..hd {
                let gi = |g: usize| {
                    let row = g * hd + j;
                    th[lay.b_i + row] + dot(&th[lay.w_i + row * lay.d_in..lay.w_i + (row + 1) * lay.d_in], x)
                };
                let gh = |g: usize| {
                    let row = g * hd + j;
                    th[lay.b_h + row] + dot(&th[lay.w_h + row * hd..lay.w_h + (row + 1) * hd], &h)
                };
                r[j] = sigmoid(gi(0) + gh(0));
                z[j] = sigmoid(gi(1) + gh(1));
                hn[j] = gh(2);
                n[j] = (gi(2) + r[j] * hn[j]).tanh();
                h_new[j] = (1.0 - z[j]) * n[j] + z[j] * h[j];
            }
            caches.push(StepCache {
                x: x.clone(),
                h_prev: std::mem::replace(&mut h, h_new.clone()),
                r,
                z,
                n,
                hn,
            });
            outs.push(h_new);
        }
        (outs, caches)
    }

    /// Backpropagates `dh_out[t]` (gradient on each step's output) through
    /// one layer; returns the gradient on each step's input.
    fn layer_backward(
        &self,
        lay: &GruLayout,
        caches: &[StepCache],
        dh_out: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Vec<Vec<f64>> {
        let hd = self.hidden;
        let th = &self.theta;
        let mut dxs = vec![vec![0.0; lay.d_in]; caches.len()];
        let mut dh_next = vec![0.0; hd];
        let mut d_pre_i = vec![0.0; 3 * hd];
        let mut d_pre_h = vec![0.0; 3 * hd];
        for t in (0..caches.len()).rev() {
            let c = &caches[t];
            let mut dh_prev = vec![0.0; hd];
            for j in 0..hd {
                let dh = dh_next[j] + dh_out[t][j];
                let dn = dh * (1.0 - c.z[j]);
                let dz = dh * (c.h_prev[j] - c.n[j]);
                dh_prev[j] = dh * c.z[j];
                let dn_pre = dn * (1.0 - c.n[j] * c.n[j]);
                let dz_pre = dz * c.z[j] * (1.0 - c.z[j]);
                let dr_pre = dn_pre * c.hn[j] * c.r[j] * (1.0 - c.r[j]);
                d_pre_i[j] = dr_pre;
                d_pre_i[hd + j] = dz_pre;
                d_pre_i[2 * hd + j] = dn_pre;
                d_pre_h[j] = dr_pre;
                d_pre_h[hd + j] = dz_pre;
                d_pre_h[2 * hd + j] = dn_pre * c.r[j];
            }
            for row in 0..3 * hd {
                let (gi, gh) = (d_pre_i[row], d_pre_h[row]);
                grad[lay.b_i + row] += gi;
                grad[lay.b_h + row] += gh;
                let wi = lay.w_i + row * lay.d_in;
                nn::axpy(gi, &c.x, &mut grad[wi..wi + lay.d_in]);
                nn::axpy(gi, &th[wi..wi + lay.d_in], &mut dxs[t]);
                let wh = lay.w_h + row * hd;
                nn::axpy(gh, &c.h_prev, &mut grad[wh..wh + hd]);
                nn::axpy(gh, &th[wh..wh + hd], &mut dh_prev);
            }
            dh_next = dh_prev;
        }
        dxs
    }

    fn forward(&self, x: &Mat) -> (Vec<Vec<StepCache>>, Vec<f64>, Vec<f64>) {
        let mut seq: Vec<Vec<f64>> = (0..x.rows).map(|t| x.row(t).to_vec()).collect();
        let mut caches = Vec::with_capacity(self.n_layers);
        for lay in &self.layers {
            let (outs, c) = self.layer_forward(lay, &seq);
            caches.push(c);
            seq = outs;
        }
        let last = seq.pop().unwrap_or_else(|| vec![0.0; self.hidden]);
        let logits = (0..self.n_classes)
            .map(|k| {
                self.theta[self.out_b + k]
                    + dot(&self.theta[self.out_w + k * self.hidden..self.out_w + (k + 1) * self.hidden], &last)
            })
            .collect();
        (caches, last, logits)
    }
}

impl Head for GruHead {
    fn params(&self) -> &[f64] {
        &self.theta
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }
    fn logits(&self, x: &Mat) -> Vec<f64> {
        self.forward(x).2
    }
    fn loss_grad(&self, x: &Mat, label: usize, grad: &mut [f64]) -> f64 {
        let (caches, last, logits) = self.forward(x);
        let mut dl = vec![0.0; self.n_classes];
        let loss = cross_entropy(&logits, label, &mut dl);
        let t_len = x.rows;
        if t_len == 0 {
            return loss;
        }
        let hd = self.hidden;
        let mut dh_top = vec![0.0; hd];
        for (k, &d) in dl.iter().enumerate() {
            grad[self.out_b + k] += d;
            let w = self.out_w + k * hd;
            nn::axpy(d, &last, &mut grad[w..w + hd]);
            nn::axpy(d, &self.theta[w..w + hd], &mut dh_top);
        }
        let mut dh_out = vec![vec![0.0; hd]; t_len];
        dh_out[t_len - 1] = dh_top;
        for l in (0..self.n_layers).rev() {
            let dxs = self.layer_backward(&self.layers[l], &caches[l], &dh_out, grad);
            dh_out = dxs;
        }
        loss
    }
}
