use std::fmt;
use std::str::FromStr;

use super::mask::MaskSpec;
use crate::error::{Error, Result};
use crate::model::{Mat, StudentOutput, TeacherTargets};

/// How the student's utterance summary is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UttVariant {
    /// One prepended utterance token.
    Token,
    /// Several prepended tokens, averaged.
    Chunk,
    /// Time-mean of the student frame outputs; no tokens.
    Global,
}

impl UttVariant {
    pub const ALL: [UttVariant; 3] = [UttVariant::Token, UttVariant::Chunk, UttVariant::Global];

    pub fn as_str(self) -> &'static str {
        match self {
            UttVariant::Token => "token",
            UttVariant::Chunk => "chunk",
            UttVariant::Global => "global",
        }
    }

    /// Rejects a token count this variant cannot use.
    pub fn check_tokens(self, n_utt: usize) -> Result<()> {
        let (ok, expected) = match self {
            UttVariant::Token => (n_utt == 1, "exactly 1"),
            UttVariant::Chunk => (n_utt > 1, "more than 1"),
            UttVariant::Global => (n_utt == 0, "0"),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::VariantMismatch {
                variant: self.as_str(),
                expected,
                n_utt,
            })
        }
    }

    /// Default token count for this variant given the configured chunk size.
    pub fn default_tokens(self, chunk: usize) -> usize {
        match self {
            UttVariant::Token => 1,
            UttVariant::Chunk => chunk,
            UttVariant::Global => 0,
        }
    }
}

impl FromStr for UttVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "token" => Ok(UttVariant::Token),
            "chunk" => Ok(UttVariant::Chunk),
            "global" => Ok(UttVariant::Global),
            _ => Err(Error::Config(format!(
                "unknown utterance variant `{s}` (token, chunk, global)"
            ))),
        }
    }
}

impl fmt::Display for UttVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_frm: f64,
    pub l_utt: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_frm.is_finite() && self.l_utt.is_finite() && self.total.is_finite()
    }
}

pub fn total_loss(l_frm: f64, l_utt: f64, alpha: f64) -> LossBreakdown {
    LossBreakdown {
        l_frm,
        l_utt,
        alpha,
        total: l_frm + alpha * l_utt,
    }
}

fn check_shapes(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::Shape(format!(
            "{what}: [{}, {}] vs [{}, {}]",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Returns `(u_s, y_t)`: the pooled student summary and the time-mean of the
/// teacher targets.
pub fn utterance_pool(
    out: &StudentOutput,
    targets: &TeacherTargets,
    variant: UttVariant,
) -> Result<(Vec<f64>, Vec<f64>)> {
    variant.check_tokens(out.utt_embeddings.rows)?;
    check_shapes(&out.frame_embeddings, &targets.targets, "student frames vs teacher targets")?;
    let y_t = targets.targets.mean_rows();
    let u_s = match variant {
        UttVariant::Token | UttVariant::Chunk => out.utt_embeddings.mean_rows(),
        UttVariant::Global => out.frame_embeddings.mean_rows(),
    };
    Ok((u_s, y_t))
}

/// Squared difference averaged over dimensions.
pub fn loss_utterance(u_s: &[f64], y_t: &[f64]) -> Result<f64> {
    if u_s.len() != y_t.len() || u_s.is_empty() {
        return Err(Error::Shape(format!(
            "utterance vectors of length {} and {}",
            u_s.len(),
            y_t.len()
        )));
    }
    let sum: f64 = u_s.iter().zip(y_t).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / u_s.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameLoss {
    pub value: f64,
    /// Set when no frame was masked; `value` is then 0.
    pub empty_mask: bool,
}

/// Squared difference averaged over masked frames and dimensions.
pub fn loss_frame(y_s: &Mat, y_t: &Mat, mask: &MaskSpec) -> Result<FrameLoss> {
    check_shapes(y_s, y_t, "frame loss")?;
    if let Some(&index) = mask.masked_indices.iter().find(|&&i| i >= y_s.rows) {
        return Err(Error::MaskIndex {
            index,
            len: y_s.rows,
        });
    }
    if mask.is_empty() {
        return Ok(FrameLoss {
            value: 0.0,
            empty_mask: true,
        });
    }
    let mut sum = 0.0;
    for &i in &mask.masked_indices {
        sum += y_s.row(i).iter().zip(y_t.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(FrameLoss {
        value: sum / (mask.count() * y_s.cols) as f64,
        empty_mask: false,
    })
}

/// Which loss terms contribute to the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub variant: UttVariant,
    pub alpha: f64,
    /// When false the frame term is dropped and reported as 0.
    pub frame_loss: bool,
}

/// Output gradients of the total loss of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrads {
    pub d_utt: Mat,
    pub d_frames: Mat,
}

/// Losses of one utterance together with the gradients of `total` with
/// respect to the student outputs.
pub fn loss_and_grads(
    out: &StudentOutput,
    targets: &TeacherTargets,
    mask: &MaskSpec,
    w: LossWeights,
) -> Result<(LossBreakdown, FrameLoss, LossGrads)> {
    let (u_s, y_t) = utterance_pool(out, targets, w.variant)?;
    let l_utt = loss_utterance(&u_s, &y_t)?;
    let frame = if w.frame_loss {
        loss_frame(&out.frame_embeddings, &targets.targets, mask)?
    } else {
        FrameLoss {
            value: 0.0,
            empty_mask: mask.is_empty(),
        }
    };
    let losses = total_loss(frame.value, l_utt, w.alpha);

    let d = u_s.len();
    let n = out.frame_embeddings.rows;
    let mut d_utt = Mat::zeros(out.utt_embeddings.rows, d);
    let mut d_frames = Mat::zeros(n, d);

    // d(alpha * l_utt) / d u_s
    let g_u: Vec<f64> = u_s
        .iter()
        .zip(&y_t)
        .map(|(a, b)| w.alpha * 2.0 * (a - b) / d as f64)
        .collect();
    let (rows, m): (&mut Mat, usize) = match w.variant {
        UttVariant::Token | UttVariant::Chunk => {
            let r = d_utt.rows;
            (&mut d_utt, r)
        }
        UttVariant::Global => (&mut d_frames, n),
    };
    if w.alpha != 0.0 && m > 0 {
        let inv = 1.0 / m as f64;
        for r in 0..m {
            rows.row_mut(r).iter_mut().zip(&g_u).for_each(|(g, v)| *g = v * inv);
        }
    }

    if w.frame_loss && !mask.is_empty() {
        let scale = 2.0 / (mask.count() * d) as f64;
        for &i in &mask.masked_indices {
            let ys = out.frame_embeddings.row(i);
            let yt = targets.targets.row(i);
            for ((g, a), b) in d_frames.row_mut(i).iter_mut().zip(ys).zip(yt) {
                *g += scale * (a - b);
            }
        }
    }
    Ok((losses, frame, LossGrads { d_utt, d_frames }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, f: impl FnMut(usize) -> f64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(f).collect())
    }

    #[test]
    fn variant_token_counts() {
        assert!(UttVariant::Token.check_tokens(1).is_ok());
        assert!(UttVariant::Token.check_tokens(2).is_err());
        assert!(UttVariant::Chunk.check_tokens(1).is_err());
        assert!(UttVariant::Chunk.check_tokens(8).is_ok());
        assert!(UttVariant::Global.check_tokens(0).is_ok());
        assert!(matches!(
            UttVariant::Global.check_tokens(3),
            Err(Error::VariantMismatch { n_utt: 3, .. })
        ));
        assert_eq!("Chunk".parse::<UttVariant>().unwrap(), UttVariant::Chunk);
    }

    #[test]
    fn token_pool_is_the_single_row() {
        let out = StudentOutput {
            utt_embeddings: mat(1, 3, |i| i as f64 * 0.3 - 1.0),
            frame_embeddings: mat(4, 3, |i| i as f64),
        };
        let t = TeacherTargets {
            targets: mat(4, 3, |i| (i % 3) as f64),
        };
        let (u, y) = utterance_pool(&out, &t, UttVariant::Token).unwrap();
        assert_eq!(u, out.utt_embeddings.data);
        // constant frames pool to that frame
        assert_eq!(y, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn utterance_loss_examples() {
        let y = [0.5, -1.0, 2.0];
        assert_eq!(loss_utterance(&y, &y).unwrap(), 0.0);
        let c = 0.25;
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        assert!((loss_utterance(&shifted, &y).unwrap() - c * c).abs() < 1e-15);
        let a = [0.1, -0.7, 1.3, 0.0];
        let b = [0.4, 0.2, 1.0, -0.5];
        // (0.09 + 0.81 + 0.09 + 0.25) / 4
        assert!((loss_utterance(&a, &b).unwrap() - 0.31).abs() < 1e-12);
        assert!(loss_utterance(&a, &y).is_err());
    }

    #[test]
    fn frame_loss_reads_masked_rows_only() {
        let ys = mat(4, 2, |i| i as f64);
        let mut yt = ys.clone();
        yt.row_mut(1)[0] = 100.0;
        yt.row_mut(3)[1] = -5.0;
        let mask = MaskSpec::from_indices(vec![0, 2], 4, 0.5, 5).unwrap();
        let l = loss_frame(&ys, &yt, &mask).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(!l.empty_mask);

        let yt2 = mat(4, 2, |i| i as f64 * 0.5);
        // rows 0 and 2: ys = [0,1],[4,5]; yt = [0,0.5],[2,2.5]
        let expected = (0.0 + 0.25 + 4.0 + 6.25) / 4.0;
        assert!((loss_frame(&ys, &yt2, &mask).unwrap().value - expected).abs() < 1e-15);

        let empty = loss_frame(&ys, &yt2, &MaskSpec::empty(0.5, 5)).unwrap();
        assert_eq!(empty, FrameLoss { value: 0.0, empty_mask: true });
        assert!(loss_frame(&ys, &mat(3, 2, |_| 0.0), &mask).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.3, 9.0, 0.0).total, 0.3);
        assert_eq!(total_loss(0.5, 0.25, 1.0).total, 0.75);
        assert_eq!(total_loss(0.0, 0.1, 10.0).total, 1.0);
    }

    proptest! {
        #[test]
        fn total_is_affine_in_utterance_loss(
            l_frm in 0.0f64..10.0, a in 0.0f64..10.0, b in 0.0f64..10.0, alpha in 0.0f64..10.0,
        ) {
            let x = total_loss(l_frm, a, alpha);
            let y = total_loss(l_frm, b, alpha);
            prop_assert_eq!(x.total, l_frm + alpha * a);
            prop_assert!(((x.total - y.total) - alpha * (a - b)).abs() <= 1e-12 * (1.0 + x.total.abs() + y.total.abs()));
        }

        #[test]
        fn chunk_pool_matches_reverse_summation(seed in 0u64..10_000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = 5;
            let utt = mat(8, d, |_| rng.gen_range(-3.0..3.0));
            let out = StudentOutput { utt_embeddings: utt.clone(), frame_embeddings: mat(3, d, |_| 0.0) };
            let t = TeacherTargets { targets: mat(3, d, |_| 0.0) };
            let (u, _) = utterance_pool(&out, &t, UttVariant::Chunk).unwrap();
            for c in 0..d {
                let mut s = 0.0;
                for r in (0..8).rev() {
                    s += utt.row(r)[c];
                }
                let oracle = s / 8.0;
                prop_assert!((u[c] - oracle).abs() <= 1e-6 * oracle.abs().max(1e-12));
            }
        }

        #[test]
        fn frame_loss_ignores_unmasked_perturbations(seed in 0u64..10_000, row in 0usize..6, delta in -5.0f64..5.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ys = mat(6, 3, |_| rng.gen_range(-1.0..1.0));
            let yt = mat(6, 3, |_| rng.gen_range(-1.0..1.0));
            let mask = MaskSpec::from_indices(vec![1, 4], 6, 0.5, 5).unwrap();
            let base = loss_frame(&ys, &yt, &mask).unwrap().value;
            let mut perturbed = yt.clone();
            if !mask.masked_indices.contains(&row) {
                perturbed.row_mut(row).iter_mut().for_each(|v| *v += delta);
                prop_assert_eq!(loss_frame(&ys, &perturbed, &mask).unwrap().value.to_bits(), base.to_bits());
            }
        }
    }
}
