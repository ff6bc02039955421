use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::UtteranceRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitScheme {
    /// Leave one session (group of sessions) out; validation is a random
    /// 20% of the remaining utterances.
    Session5Fold,
    /// Leave one speaker (group) out for test, the next one for validation.
    Speaker10Fold,
    /// Random partition into `k` chunks; chunk `i` tests, chunk `i + 1`
    /// validates.
    RandomKFold,
}

impl SplitScheme {
    pub fn default_k(self) -> usize {
        match self {
            SplitScheme::Session5Fold => 5,
            SplitScheme::Speaker10Fold | SplitScheme::RandomKFold => 10,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitScheme::Session5Fold => "session_5fold",
            SplitScheme::Speaker10Fold => "speaker_10fold",
            SplitScheme::RandomKFold => "random_k_fold",
        }
    }
}

impl FromStr for SplitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "session_5fold" | "session" => Ok(SplitScheme::Session5Fold),
            "speaker_10fold" | "speaker" => Ok(SplitScheme::Speaker10Fold),
            "random_k_fold" | "random" => Ok(SplitScheme::RandomKFold),
            _ => Err(Error::Config(format!(
                "unknown split scheme `{s}` (session_5fold, speaker_10fold, random_k_fold)"
            ))),
        }
    }
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub scheme: SplitScheme,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Sorted distinct keys dealt round-robin into `k` groups; returns the group
/// index of every record.
fn group_by_key(records: &[UtteranceRecord], key: impl Fn(&UtteranceRecord) -> &str, k: usize) -> Vec<usize> {
    let keys: Vec<&str> = records.iter().map(&key).collect::<BTreeSet<_>>().into_iter().collect();
    records
        .iter()
        .map(|r| keys.binary_search(&key(r)).expect("key present") % k)
        .collect()
}

fn ids(records: &[UtteranceRecord], pick: impl Fn(usize) -> bool) -> Vec<String> {
    records
        .iter()
        .enumerate()
        .filter(|(i, _)| pick(*i))
        .map(|(_, r)| r.id.clone())
        .collect()
}

pub fn make_split(records: &[UtteranceRecord], scheme: SplitScheme, k: usize, seed: u64) -> Result<SplitPlan> {
    let min_k = if scheme == SplitScheme::Session5Fold { 2 } else { 3 };
    if k < min_k {
        return Err(Error::Split(format!("{scheme} needs k >= {min_k}, got {k}")));
    }
    if records.len() < k {
        return Err(Error::Split(format!(
            "{} records cannot fill {k} folds",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let folds = match scheme {
        SplitScheme::Session5Fold => {
            if records.iter().any(|r| r.session.is_empty() || r.session == "-") {
                return Err(Error::Split("session scheme requires session metadata".into()));
            }
            let n_sessions = records.iter().map(|r| r.session.as_str()).collect::<BTreeSet<_>>().len();
            if n_sessions < k {
                return Err(Error::Split(format!("{n_sessions} sessions, need at least {k}")));
            }
            let group = group_by_key(records, |r| &r.session, k);
            let mut folds = Vec::with_capacity(k);
            for i in 0..k {
                let mut rest: Vec<usize> = (0..records.len()).filter(|&j| group[j] != i).collect();
                if rest.len() < 2 {
                    return Err(Error::Split(format!(
                        "fold {i} leaves {} utterances for training and validation",
                        rest.len()
                    )));
                }
                rest.shuffle(&mut rng);
                let n_val = ((rest.len() as f64 * 0.2).round() as usize).clamp(1, rest.len() - 1);
                let val: BTreeSet<usize> = rest[..n_val].iter().copied().collect();
                folds.push(Fold {
                    train: ids(records, |j| group[j] != i && !val.contains(&j)),
                    val: ids(records, |j| val.contains(&j)),
                    test: ids(records, |j| group[j] == i),
                });
            }
            folds
        }
        SplitScheme::Speaker10Fold => {
            let n_speakers = records.iter().map(|r| r.speaker.as_str()).collect::<BTreeSet<_>>().len();
            if n_speakers < k {
                return Err(Error::Split(format!("{n_speakers} speakers, need at least {k}")));
            }
            let group = group_by_key(records, |r| &r.speaker, k);
            rotate(records, &group, k)
        }
        SplitScheme::RandomKFold => {
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.shuffle(&mut rng);
            let mut group = vec![0; records.len()];
            for (pos, &j) in order.iter().enumerate() {
                group[j] = pos * k / records.len();
            }
            rotate(records, &group, k)
        }
    };
    Ok(SplitPlan {
        scheme,
        k,
        seed,
        folds,
    })
}

/// Fold `i` tests on group `i` and validates on group `(i + 1) % k`.
fn rotate(records: &[UtteranceRecord], group: &[usize], k: usize) -> Vec<Fold> {
    (0..k)
        .map(|i| {
            let v = (i + 1) % k;
            Fold {
                train: ids(records, |j| group[j] != i && group[j] != v),
                val: ids(records, |j| group[j] == v),
                test: ids(records, |j| group[j] == i),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;
    use std::path::PathBuf;

    fn rec(i: usize, speaker: usize, session: usize) -> UtteranceRecord {
        UtteranceRecord {
            id: format!("u{i}"),
            audio_path: PathBuf::from("x.wav"),
            n_samples: 1000,
            label: Some("a".into()),
            speaker: format!("spk{speaker}"),
            session: format!("ses{session}"),
            language: "en".into(),
        }
    }

    fn check_sound(plan: &SplitPlan, records: &[UtteranceRecord], partition: bool) {
        let all: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let mut seen_test = HashSet::new();
        for f in &plan.folds {
            let (tr, va, te): (HashSet<_>, HashSet<_>, HashSet<_>) = (
                f.train.iter().map(String::as_str).collect(),
                f.val.iter().map(String::as_str).collect(),
                f.test.iter().map(String::as_str).collect(),
            );
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            assert_eq!(tr.len() + va.len() + te.len(), all.len());
            assert!(!f.test.is_empty() && !f.val.is_empty());
            for id in &te {
                assert!(seen_test.insert(*id), "{id} tested twice");
            }
        }
        if partition {
            assert_eq!(seen_test.len(), all.len());
        }
    }

    #[test]
    fn five_sessions_hold_out_whole_sessions() {
        let records: Vec<_> = (0..100).map(|i| rec(i, i % 10, i % 5)).collect();
        let plan = make_split(&records, SplitScheme::Session5Fold, 5, 1).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for f in &plan.folds {
            let sessions: BTreeSet<_> = f
                .test
                .iter()
                .map(|id| records.iter().find(|r| &r.id == id).unwrap().session.clone())
                .collect();
            assert_eq!(sessions.len(), 1);
            assert_eq!(f.val.len(), 16);
        }
        check_sound(&plan, &records, true);
    }

    #[test]
    fn ten_speakers_rotate_eight_one_one() {
        let records: Vec<_> = (0..100).map(|i| rec(i, i % 10, i % 5)).collect();
        let plan = make_split(&records, SplitScheme::Speaker10Fold, 10, 1).unwrap();
        let spk = |id: &String| records.iter().find(|r| &r.id == id).unwrap().speaker.clone();
        for f in &plan.folds {
            let count = |ids: &[String]| ids.iter().map(spk).collect::<BTreeSet<_>>().len();
            assert_eq!((count(&f.train), count(&f.val), count(&f.test)), (8, 1, 1));
        }
        check_sound(&plan, &records, true);
    }

    #[test]
    fn random_proportions() {
        let records: Vec<_> = (0..100).map(|i| rec(i, 0, 0)).collect();
        let plan = make_split(&records, SplitScheme::RandomKFold, 10, 3).unwrap();
        for f in &plan.folds {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (80, 10, 10));
        }
        check_sound(&plan, &records, true);
    }

    #[test]
    fn insufficient_groups() {
        let records: Vec<_> = (0..40).map(|i| rec(i, i % 4, i % 2)).collect();
        assert!(matches!(
            make_split(&records, SplitScheme::Speaker10Fold, 10, 0),
            Err(Error::Split(_))
        ));
        assert!(make_split(&records, SplitScheme::Session5Fold, 5, 0).is_err());
        assert!(make_split(&records, SplitScheme::RandomKFold, 2, 0).is_err());
    }

    proptest! {
        #[test]
        fn soundness_on_random_metadata(
            n in 30usize..150, n_spk in 10usize..16, n_ses in 5usize..9, seed: u64,
            scheme in prop::sample::select(vec![SplitScheme::Session5Fold, SplitScheme::Speaker10Fold, SplitScheme::RandomKFold]),
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let records: Vec<_> = (0..n).map(|i| rec(i, rng.gen_range(0..n_spk), rng.gen_range(0..n_ses))).collect();
            let k = scheme.default_k();
            match make_split(&records, scheme, k, seed) {
                Ok(plan) => {
                    prop_assert_eq!(plan.folds.len(), k);
                    check_sound(&plan, &records, true);
                }
                // random draws may leave fewer distinct sessions/speakers than k
                Err(Error::Split(_)) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
