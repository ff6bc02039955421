use rand::Rng;

use crate::error::{Error, Result};

/// Sorted, deduplicated masked frame indices and the span parameters that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub masked_indices: Vec<usize>,
    pub p: f64,
    pub l: usize,
}

impl MaskSpec {
    pub fn empty(p: f64, l: usize) -> Self {
        Self {
            masked_indices: Vec::new(),
            p,
            l,
        }
    }

    /// Builds a mask from arbitrary indices (sorted and deduplicated here).
    pub fn from_indices(mut indices: Vec<usize>, n_frames: usize, p: f64, l: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&index) = indices.iter().find(|&&i| i >= n_frames) {
            return Err(Error::MaskIndex {
                index,
                len: n_frames,
            });
        }
        Ok(Self {
            masked_indices: indices,
            p,
            l,
        })
    }

    /// `M`, the number of masked frames.
    pub fn count(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_indices.is_empty()
    }
}

/// Every frame independently starts a span with probability `p`; a span
/// starting at `i` covers `i .. min(i + l, n_frames)`. Overlapping spans
/// merge.
pub fn sample_mask<R: Rng + ?Sized>(n_frames: usize, p: f64, l: usize, rng: &mut R) -> MaskSpec {
    let mut flags = vec![false; n_frames];
    for i in 0..n_frames {
        if rng.gen::<f64>() < p {
            let end = (i + l).min(n_frames);
            flags[i..end].iter_mut().for_each(|f| *f = true);
        }
    }
    MaskSpec {
        masked_indices: (0..n_frames).filter(|&i| flags[i]).collect(),
        p,
        l,
    }
}

/// Expected masked fraction under [`sample_mask`]: frame `j` is covered
/// unless none of the `min(j + 1, l)` positions that could reach it start a
/// span.
pub fn expected_masked_fraction(n_frames: usize, p: f64, l: usize) -> f64 {
    if n_frames == 0 {
        return 0.0;
    }
    (0..n_frames)
        .map(|j| 1.0 - (1.0 - p).powi((j + 1).min(l) as i32))
        .sum::<f64>()
        / n_frames as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(50, 0.0, 5, &mut rng).is_empty());
        let all = sample_mask(10, 1.0, 5, &mut rng);
        assert_eq!(all.masked_indices, (0..10).collect::<Vec<_>>());
        assert_eq!(all.count(), 10);
    }

    #[test]
    fn from_indices_validates() {
        let m = MaskSpec::from_indices(vec![3, 1, 3], 4, 0.5, 5).unwrap();
        assert_eq!(m.masked_indices, vec![1, 3]);
        assert!(matches!(
            MaskSpec::from_indices(vec![4], 4, 0.5, 5),
            Err(Error::MaskIndex { index: 4, len: 4 })
        ));
    }

    #[test]
    fn closed_form_edges() {
        assert_eq!(expected_masked_fraction(10, 1.0, 5), 1.0);
        assert_eq!(expected_masked_fraction(10, 0.0, 5), 0.0);
        // l = 1: plain Bernoulli
        assert!((expected_masked_fraction(7, 0.3, 1) - 0.3).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mask_is_sorted_unique_and_in_range(n in 1usize..200, p in 0.0f64..1.0, l in 1usize..12, seed: u64) {
            let m = sample_mask(n, p, l, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(m.masked_indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.masked_indices.iter().all(|&i| i < n));
            prop_assert_eq!(m.count(), m.masked_indices.len());
            // any masked run is at least min(l, remaining) long unless truncated by the end
            if let Some(&first) = m.masked_indices.first() {
                let run = m.masked_indices.iter().take_while(|&&i| i < first + l).count();
                prop_assert_eq!(run, l.min(n - first));
            }
        }
    }
}
