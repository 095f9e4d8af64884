use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Speaker-disjoint train/eval split with one keyword per training speaker.
/// The training speakers' other keywords form the validation set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Training speaker -> its single training keyword.
    pub train: BTreeMap<String, String>,
    pub eval_speakers: BTreeSet<String>,
}

impl SplitSpec {
    pub fn train_keywords(&self) -> Vec<String> {
        self.train.values().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn train_set(&self, ds: &Dataset) -> Dataset {
        ds.filter(|u| self.train.get(&u.speaker).is_some_and(|k| u.keyword.as_ref() == Some(k)))
    }

    pub fn validation_set(&self, ds: &Dataset) -> Dataset {
        ds.filter(|u| self.train.get(&u.speaker).is_some_and(|k| u.keyword.as_ref() != Some(k)))
    }

    pub fn eval_set(&self, ds: &Dataset) -> Dataset {
        ds.filter(|u| self.eval_speakers.contains(&u.speaker))
    }
}

/// Fail with a split error unless every speaker in `ds` has exactly one
/// keyword.
pub fn check_one_keyword_per_speaker(ds: &Dataset) -> Result<()> {
    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for u in &ds.utterances {
        let k = u.keyword.as_deref().ok_or_else(|| Error::Split(format!("utterance {} has no keyword", u.id)))?;
        if let Some(prev) = seen.insert(&u.speaker, k) {
            if prev != k {
                return Err(Error::Split(format!(
                    "training speaker {} has keywords '{prev}' and '{k}'",
                    u.speaker
                )));
            }
        }
    }
    Ok(())
}

/// Seeded split. Training speakers are dealt round-robin over
/// `n_keywords` seeded keywords (all keywords if `None`), so each keyword has
/// an equal share of speakers.
pub fn make_split(
    ds: &Dataset,
    n_train: usize,
    n_eval: usize,
    n_keywords: Option<usize>,
    seed: u64,
) -> Result<SplitSpec> {
    let mut speakers = ds.speakers();
    if n_train == 0 || n_eval == 0 || n_train + n_eval > speakers.len() {
        return Err(Error::Config(format!(
            "cannot split {} speakers into {n_train} training and {n_eval} evaluation speakers",
            speakers.len()
        )));
    }
    let mut kws = ds.keywords();
    let n_kw = n_keywords.unwrap_or(kws.len());
    if n_kw == 0 || n_kw > kws.len() || n_kw > n_train {
        return Err(Error::Config(format!(
            "cannot choose {n_kw} training keywords from {} keywords for {n_train} speakers",
            kws.len()
        )));
    }
    let mut rng = SplitMix64::derive(seed, crate::rng::tag_of("split"));
    rng.shuffle(&mut speakers);
    rng.shuffle(&mut kws);
    kws.truncate(n_kw);
    let have: BTreeSet<(&str, &str)> = ds
        .utterances
        .iter()
        .filter_map(|u| u.keyword.as_deref().map(|k| (u.speaker.as_str(), k)))
        .collect();
    let mut train = BTreeMap::new();
    for (i, s) in speakers[..n_train].iter().enumerate() {
        let k = &kws[i % n_kw];
        if !have.contains(&(s.as_str(), k.as_str())) {
            return Err(Error::Config(format!("speaker {s} has no utterances of keyword {k}")));
        }
        train.insert(s.clone(), k.clone());
    }
    let eval_speakers = speakers[n_train..n_train + n_eval].iter().cloned().collect();
    Ok(SplitSpec { train, eval_speakers })
}
