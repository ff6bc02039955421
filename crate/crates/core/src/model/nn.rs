//! Dense primitives with hand-written backward passes.
//!
//! Activations are row-major `[time, channels]` matrices in f64. Each
//! forward function returns whatever its backward needs; backward functions
//! accumulate parameter gradients into caller-owned buffers (`+=`).

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec size mismatch");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_range(&self, start: usize, end: usize) -> Mat {
        Mat::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    pub fn vstack(top: &Mat, bottom: &Mat) -> Mat {
        assert_eq!(top.cols, bottom.cols);
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Mat::from_vec(top.rows + bottom.rows, top.cols, data)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Column means over rows. Zero vector for an empty matrix.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        if self.rows == 0 {
            return out;
        }
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

// ---------------------------------------------------------------- linear

/// `y = x W^T + b`, with `w` stored `[out, in]`.
pub fn linear(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    let n_out = b.len();
    let n_in = x.cols;
    debug_assert_eq!(w.len(), n_out * n_in);
    let mut y = Mat::zeros(x.rows, n_out);
    for t in 0..x.rows {
        let xr = x.row(t);
        let yr = y.row_mut(t);
        for o in 0..n_out {
            yr[o] = b[o] + dot(&w[o * n_in..(o + 1) * n_in], xr);
        }
    }
    y
}

/// Returns `dx`; accumulates into `dw`, `db`.
pub fn linear_backward(x: &Mat, w: &[f64], dy: &Mat, dw: &mut [f64], db: &mut [f64]) -> Mat {
    let n_out = dy.cols;
    let n_in = x.cols;
    let mut dx = Mat::zeros(x.rows, n_in);
    for t in 0..x.rows {
        let dyr = dy.row(t);
        let xr = x.row(t);
        let dxr = dx.row_mut(t);
        for o in 0..n_out {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            axpy(g, &w[o * n_in..(o + 1) * n_in], dxr);
            axpy(g, xr, &mut dw[o * n_in..(o + 1) * n_in]);
        }
    }
    dx
}

// ------------------------------------------------------------ layer norm

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
}

/// Normalises each row over its columns; `affine = Some((gain, bias))`.
pub fn layer_norm(x: &Mat, affine: Option<(&[f64], &[f64])>) -> (Mat, NormCache) {
    let c = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for t in 0..x.rows {
        let xr = x.row(t);
        let mean = xr.iter().sum::<f64>() / c;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(is);
        for (h, v) in xhat.row_mut(t).iter_mut().zip(xr) {
            *h = (v - mean) * is;
        }
    }
    let y = match affine {
        Some((g, b)) => {
            let mut y = xhat.clone();
            for t in 0..y.rows {
                for ((v, gi), bi) in y.row_mut(t).iter_mut().zip(g).zip(b) {
                    *v = *v * gi + bi;
                }
            }
            y
        }
        None => xhat.clone(),
    };
    (y, NormCache { xhat, inv_std })
}

/// `affine = Some((gain, dgain, dbias))`.
pub fn layer_norm_backward(
    cache: &NormCache,
    dy: &Mat,
    affine: Option<(&[f64], &mut [f64], &mut [f64])>,
) -> Mat {
    let c = dy.cols as f64;
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    let mut dxhat = vec![0.0; dy.cols];
    let mut affine = affine;
    for t in 0..dy.rows {
        let dyr = dy.row(t);
        let xh = cache.xhat.row(t);
        match affine.as_mut() {
            Some((g, dg, db)) => {
                for j in 0..dy.cols {
                    dxhat[j] = dyr[j] * g[j];
                    dg[j] += dyr[j] * xh[j];
                    db[j] += dyr[j];
                }
            }
            None => dxhat.copy_from_slice(dyr),
        }
        let m1 = dxhat.iter().sum::<f64>() / c;
        let m2 = dot(&dxhat, xh) / c;
        let is = cache.inv_std[t];
        for ((d, dh), x) in dx.row_mut(t).iter_mut().zip(&dxhat).zip(xh) {
            *d = is * (dh - m1 - x * m2);
        }
    }
    dx
}

// ------------------------------------------------------------------ gelu

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu(x: &Mat) -> Mat {
    Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&v| gelu_scalar(v)).collect())
}

/// `x` is the pre-activation input.
pub fn gelu_backward(x: &Mat, dy: &Mat) -> Mat {
    Mat::from_vec(
        x.rows,
        x.cols,
        x.data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| g * gelu_grad_scalar(v))
            .collect(),
    )
}

pub fn relu(x: &Mat) -> Mat {
    Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&v| v.max(0.0)).collect())
}

pub fn relu_backward(x: &Mat, dy: &Mat) -> Mat {
    Mat::from_vec(
        x.rows,
        x.cols,
        x.data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

// ------------------------------------------------------------------ conv

/// Geometry of a 1-D convolution over `[time, channels]` input. Weights are
/// stored `[kernel, out, in / groups]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn valid(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad_left: 0,
            pad_right: 0,
            groups: 1,
        }
    }

    /// Stride 1, output length equal to input length.
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize, groups: usize) -> Self {
        let pad_left = (kernel - 1) / 2;
        Self {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad_left,
            pad_right: kernel - 1 - pad_left,
            groups,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        let padded = len + self.pad_left + self.pad_right;
        if padded < self.kernel {
            0
        } else {
            (padded - self.kernel) / self.stride + 1
        }
    }

    pub fn weight_len(&self) -> usize {
        self.kernel * self.out_ch * (self.in_ch / self.groups)
    }
}

/// Weights `[kernel, out, in]` of an ungrouped conv rearranged to
/// `[out, kernel * in]`, so each output is one dot with a contiguous patch.
fn weights_by_output(w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.kernel * g.in_ch;
    let mut out = vec![0.0; g.out_ch * patch];
    for k in 0..g.kernel {
        for o in 0..g.out_ch {
            let src = &w[(k * g.out_ch + o) * g.in_ch..(k * g.out_ch + o + 1) * g.in_ch];
            out[o * patch + k * g.in_ch..o * patch + (k + 1) * g.in_ch].copy_from_slice(src);
        }
    }
    out
}

/// Input patch of output step `t`, zero-filled outside the sequence.
fn gather_patch<'a>(x: &'a Mat, g: &ConvGeom, t: usize, buf: &'a mut Vec<f64>) -> &'a [f64] {
    let start = (t * g.stride) as isize - g.pad_left as isize;
    let end = start + g.kernel as isize;
    if start >= 0 && end as usize <= x.rows {
        let s = start as usize * x.cols;
        return &x.data[s..s + g.kernel * x.cols];
    }
    buf.clear();
    buf.resize(g.kernel * x.cols, 0.0);
    for k in 0..g.kernel {
        let pos = start + k as isize;
        if pos >= 0 && (pos as usize) < x.rows {
            buf[k * x.cols..(k + 1) * x.cols].copy_from_slice(x.row(pos as usize));
        }
    }
    buf
}

pub fn conv1d(x: &Mat, w: &[f64], b: &[f64], g: &ConvGeom) -> Mat {
    debug_assert_eq!(x.cols, g.in_ch);
    let l_out = g.out_len(x.rows);
    let mut y = Mat::zeros(l_out, g.out_ch);
    if g.groups == 1 {
        let wt = weights_by_output(w, g);
        let patch_len = g.kernel * g.in_ch;
        let mut buf = Vec::new();
        for t in 0..l_out {
            let patch = gather_patch(x, g, t, &mut buf);
            let yr = &mut y.data[t * g.out_ch..(t + 1) * g.out_ch];
            for (o, v) in yr.iter_mut().enumerate() {
                *v = b[o] + dot(&wt[o * patch_len..(o + 1) * patch_len], patch);
            }
        }
        return y;
    }
    let cin_g = g.in_ch / g.groups;
    let cout_g = g.out_ch / g.groups;
    for t in 0..l_out {
        let yr = y.row_mut(t);
        yr.copy_from_slice(b);
        for k in 0..g.kernel {
            let pos = (t * g.stride + k) as isize - g.pad_left as isize;
            if pos < 0 || pos as usize >= x.rows {
                continue;
            }
            let xr = x.row(pos as usize);
            let wk = &w[k * g.out_ch * cin_g..(k + 1) * g.out_ch * cin_g];
            for o in 0..g.out_ch {
                let grp = o / cout_g;
                yr[o] += dot(&wk[o * cin_g..(o + 1) * cin_g], &xr[grp * cin_g..(grp + 1) * cin_g]);
            }
        }
    }
    y
}

pub fn conv1d_backward(
    x: &Mat,
    w: &[f64],
    g: &ConvGeom,
    dy: &Mat,
    dw: &mut [f64],
    db: &mut [f64],
) -> Mat {
    let mut dx = Mat::zeros(x.rows, x.cols);
    if g.groups == 1 {
        let wt = weights_by_output(w, g);
        let patch_len = g.kernel * g.in_ch;
        let mut dwt = vec![0.0; wt.len()];
        let mut dpatch = vec![0.0; patch_len];
        let mut buf = Vec::new();
        for t in 0..dy.rows {
            let dyr = dy.row(t);
            let patch = gather_patch(x, g, t, &mut buf);
            dpatch.iter_mut().for_each(|v| *v = 0.0);
            for (o, &d) in dyr.iter().enumerate() {
                db[o] += d;
                if d == 0.0 {
                    continue;
                }
                axpy(d, &wt[o * patch_len..(o + 1) * patch_len], &mut dpatch);
                axpy(d, patch, &mut dwt[o * patch_len..(o + 1) * patch_len]);
            }
            let start = (t * g.stride) as isize - g.pad_left as isize;
            for k in 0..g.kernel {
                let pos = start + k as isize;
                if pos >= 0 && (pos as usize) < x.rows {
                    let row = dx.row_mut(pos as usize);
                    for (r, v) in row.iter_mut().zip(&dpatch[k * g.in_ch..(k + 1) * g.in_ch]) {
                        *r += v;
                    }
                }
            }
        }
        for k in 0..g.kernel {
            for o in 0..g.out_ch {
                let dst = &mut dw[(k * g.out_ch + o) * g.in_ch..(k * g.out_ch + o + 1) * g.in_ch];
                let src = &dwt[o * patch_len + k * g.in_ch..o * patch_len + (k + 1) * g.in_ch];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        return dx;
    }
    let cin_g = g.in_ch / g.groups;
    let cout_g = g.out_ch / g.groups;
    for t in 0..dy.rows {
        let dyr = dy.row(t);
        for (o, d) in dyr.iter().enumerate() {
            db[o] += d;
        }
        for k in 0..g.kernel {
            let pos = (t * g.stride + k) as isize - g.pad_left as isize;
            if pos < 0 || pos as usize >= x.rows {
                continue;
            }
            let pos = pos as usize;
            let base = k * g.out_ch * cin_g;
            for o in 0..g.out_ch {
                let d = dyr[o];
                if d == 0.0 {
                    continue;
                }
                let grp = o / cout_g;
                let span = grp * cin_g..(grp + 1) * cin_g;
                let wo = base + o * cin_g..base + (o + 1) * cin_g;
                axpy(d, &w[wo.clone()], &mut dx.row_mut(pos)[span.clone()]);
                axpy(d, &x.row(pos)[span], &mut dw[wo]);
            }
        }
    }
    dx
}

// ------------------------------------------------------------- attention

#[derive(Clone, Debug)]
pub struct AttnCache {
    pub x: Mat,
    pub qkv: Mat,
    /// Per-head attention probabilities `[T, T]`.
    pub probs: Vec<Mat>,
    pub context: Mat,
}

/// Multi-head scaled dot-product self-attention with a fused QKV
/// projection `[3d, d]` and an output projection `[d, d]`.
pub fn self_attention(
    x: &Mat,
    w_qkv: &[f64],
    b_qkv: &[f64],
    w_out: &[f64],
    b_out: &[f64],
    n_heads: usize,
) -> (Mat, AttnCache) {
    let d = x.cols;
    let t_len = x.rows;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = linear(x, w_qkv, b_qkv);
    let mut context = Mat::zeros(t_len, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        let mut a = Mat::zeros(t_len, t_len);
        for i in 0..t_len {
            let q = &qkv.row(i)[qo..qo + dh];
            let ar = a.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..t_len {
                let s = dot(q, &qkv.row(j)[ko..ko + dh]) * scale;
                ar[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for v in ar.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            ar.iter_mut().for_each(|v| *v *= inv);
        }
        for i in 0..t_len {
            let ar = a.row(i);
            let cr = &mut context.row_mut(i)[qo..qo + dh];
            for j in 0..t_len {
                axpy(ar[j], &qkv.row(j)[vo..vo + dh], cr);
            }
        }
        probs.push(a);
    }
    let out = linear(&context, w_out, b_out);
    (
        out,
        AttnCache {
            x: x.clone(),
            qkv,
            probs,
            context,
        },
    )
}

#[allow(clippy::too_many_arguments)]
pub fn self_attention_backward(
    cache: &AttnCache,
    w_qkv: &[f64],
    w_out: &[f64],
    n_heads: usize,
    dy: &Mat,
    dw_qkv: &mut [f64],
    db_qkv: &mut [f64],
    dw_out: &mut [f64],
    db_out: &mut [f64],
) -> Mat {
    let d = cache.x.cols;
    let t_len = cache.x.rows;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dctx = linear_backward(&cache.context, w_out, dy, dw_out, db_out);
    let qkv = &cache.qkv;
    let mut dqkv = Mat::zeros(t_len, 3 * d);
    let mut da = vec![0.0; t_len];
    let split = |off: usize| {
        let mut m = Mat::zeros(t_len, dh);
        for i in 0..t_len {
            m.row_mut(i).copy_from_slice(&qkv.row(i)[off..off + dh]);
        }
        m
    };
    for h in 0..n_heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        let (q, k, v) = (split(qo), split(ko), split(vo));
        let mut dq = Mat::zeros(t_len, dh);
        let mut dk = Mat::zeros(t_len, dh);
        let mut dv = Mat::zeros(t_len, dh);
        let a = &cache.probs[h];
        for i in 0..t_len {
            let dc = &dctx.row(i)[qo..qo + dh];
            let ar = a.row(i);
            // dA[i, j] = dC_i . V_j ; dV_j += A[i, j] dC_i
            for j in 0..t_len {
                da[j] = dot(dc, v.row(j));
                axpy(ar[j], dc, dv.row_mut(j));
            }
            let inner = dot(&da, ar);
            for j in 0..t_len {
                let ds = ar[j] * (da[j] - inner) * scale;
                // dQ_i += ds K_j ; dK_j += ds Q_i
                axpy(ds, k.row(j), dq.row_mut(i));
                axpy(ds, q.row(i), dk.row_mut(j));
            }
        }
        for i in 0..t_len {
            let row = dqkv.row_mut(i);
            row[qo..qo + dh].copy_from_slice(dq.row(i));
            row[ko..ko + dh].copy_from_slice(dk.row(i));
            row[vo..vo + dh].copy_from_slice(dv.row(i));
        }
    }
    linear_backward(&cache.x, w_qkv, &dqkv, dw_qkv, db_qkv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central-difference check of `f` against its analytic gradient `g`.
    fn check(f: impl Fn(&[f64]) -> f64, x0: &[f64], analytic: &[f64]) {
        let h = 1e-5;
        let mut x = x0.to_vec();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let fp = f(&x);
            x[i] = orig - h;
            let fm = f(&x);
            x[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let err = (num - analytic[i]).abs() / (1e-4 + num.abs().max(analytic[i].abs()));
            assert!(err < 1e-5, "index {i}: numeric {num} analytic {}", analytic[i]);
        }
    }

    fn weighted_sum(m: &Mat, weights: &[f64]) -> f64 {
        dot(&m.data, weights)
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::valid(1, 4, 10, 5);
        assert_eq!(g.out_len(16000), 3199);
        assert_eq!(g.out_len(9), 0);
        let s = ConvGeom::same(6, 6, 5, 3);
        assert_eq!(s.out_len(11), 11);
        assert_eq!(ConvGeom::same(4, 4, 4, 1).out_len(7), 7);
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in [
            ConvGeom::valid(2, 3, 3, 2),
            ConvGeom::valid(1, 3, 4, 3),
            ConvGeom::same(4, 4, 5, 2),
            ConvGeom::same(3, 2, 4, 1),
        ] {
            let x = Mat::from_vec(9, g.in_ch, rand_vec(&mut rng, 9 * g.in_ch));
            let w = rand_vec(&mut rng, g.weight_len());
            let b = rand_vec(&mut rng, g.out_ch);
            let l_out = g.out_len(9);
            let r = rand_vec(&mut rng, l_out * g.out_ch);
            let dy = Mat::from_vec(l_out, g.out_ch, r.clone());
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; b.len()];
            let dx = conv1d_backward(&x, &w, &g, &dy, &mut dw, &mut db);
            check(|xs| weighted_sum(&conv1d(&Mat::from_vec(9, g.in_ch, xs.to_vec()), &w, &b, &g), &r), &x.data, &dx.data);
            check(|ws| weighted_sum(&conv1d(&x, ws, &b, &g), &r), &w, &dw);
            check(|bs| weighted_sum(&conv1d(&x, &w, bs, &g), &r), &b, &db);
        }
    }

    /// Direct transcription of the convolution sum.
    fn conv_reference(x: &Mat, w: &[f64], b: &[f64], g: &ConvGeom) -> Mat {
        let cin_g = g.in_ch / g.groups;
        let cout_g = g.out_ch / g.groups;
        let l_out = g.out_len(x.rows);
        let mut y = Mat::zeros(l_out, g.out_ch);
        for t in 0..l_out {
            for o in 0..g.out_ch {
                let grp = o / cout_g;
                let mut acc = b[o];
                for k in 0..g.kernel {
                    let pos = (t * g.stride + k) as isize - g.pad_left as isize;
                    if pos < 0 || pos as usize >= x.rows {
                        continue;
                    }
                    for c in 0..cin_g {
                        acc += w[(k * g.out_ch + o) * cin_g + c] * x.row(pos as usize)[grp * cin_g + c];
                    }
                }
                y.row_mut(t)[o] = acc;
            }
        }
        y
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for g in [
            ConvGeom::valid(1, 4, 10, 5),
            ConvGeom::valid(3, 5, 3, 2),
            ConvGeom::same(4, 6, 7, 1),
            ConvGeom::same(8, 8, 5, 4),
        ] {
            let x = Mat::from_vec(23, g.in_ch, rand_vec(&mut rng, 23 * g.in_ch));
            let w = rand_vec(&mut rng, g.weight_len());
            let b = rand_vec(&mut rng, g.out_ch);
            let (y, r) = (conv1d(&x, &w, &b, &g), conv_reference(&x, &w, &b, &g));
            assert_eq!((y.rows, y.cols), (r.rows, r.cols));
            for (a, e) in y.data.iter().zip(&r.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Mat::from_vec(3, 5, rand_vec(&mut rng, 15));
        let gain = rand_vec(&mut rng, 5);
        let bias = rand_vec(&mut rng, 5);
        let r = rand_vec(&mut rng, 15);
        let (_, cache) = layer_norm(&x, Some((&gain, &bias)));
        let mut dg = vec![0.0; 5];
        let mut dbias = vec![0.0; 5];
        let dy = Mat::from_vec(3, 5, r.clone());
        let dx = layer_norm_backward(&cache, &dy, Some((&gain, &mut dg, &mut dbias)));
        check(
            |xs| weighted_sum(&layer_norm(&Mat::from_vec(3, 5, xs.to_vec()), Some((&gain, &bias))).0, &r),
            &x.data,
            &dx.data,
        );
        check(|g| weighted_sum(&layer_norm(&x, Some((g, &bias))).0, &r), &gain, &dg);
        check(|b| weighted_sum(&layer_norm(&x, Some((&gain, b))).0, &r), &bias, &dbias);
        let (_, plain) = layer_norm(&x, None);
        let dx = layer_norm_backward(&plain, &dy, None);
        check(|xs| weighted_sum(&layer_norm(&Mat::from_vec(3, 5, xs.to_vec()), None).0, &r), &x.data, &dx.data);
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, d, heads) = (5, 6, 2);
        let x = Mat::from_vec(t, d, rand_vec(&mut rng, t * d));
        let wq = rand_vec(&mut rng, 3 * d * d);
        let bq = rand_vec(&mut rng, 3 * d);
        let wo = rand_vec(&mut rng, d * d);
        let bo = rand_vec(&mut rng, d);
        let r = rand_vec(&mut rng, t * d);
        let (_, cache) = self_attention(&x, &wq, &bq, &wo, &bo, heads);
        let (mut dwq, mut dbq, mut dwo, mut dbo) =
            (vec![0.0; wq.len()], vec![0.0; bq.len()], vec![0.0; wo.len()], vec![0.0; bo.len()]);
        let dy = Mat::from_vec(t, d, r.clone());
        let dx = self_attention_backward(&cache, &wq, &wo, heads, &dy, &mut dwq, &mut dbq, &mut dwo, &mut dbo);
        let f = |xs: &Mat, wq: &[f64], bq: &[f64], wo: &[f64], bo: &[f64]| {
            weighted_sum(&self_attention(xs, wq, bq, wo, bo, heads).0, &r)
        };
        check(|xs| f(&Mat::from_vec(t, d, xs.to_vec()), &wq, &bq, &wo, &bo), &x.data, &dx.data);
        check(|w| f(&x, w, &bq, &wo, &bo), &wq, &dwq);
        check(|b| f(&x, &wq, b, &wo, &bo), &bq, &dbq);
        check(|w| f(&x, &wq, &bq, w, &bo), &wo, &dwo);
        check(|b| f(&x, &wq, &bq, &wo, b), &bo, &dbo);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Mat::from_vec(4, 4, rand_vec(&mut rng, 16));
        let (_, cache) = self_attention(&x, &rand_vec(&mut rng, 48), &[0.0; 12], &rand_vec(&mut rng, 16), &[0.0; 4], 2);
        for a in &cache.probs {
            for i in 0..4 {
                assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let num = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((num - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }
}
