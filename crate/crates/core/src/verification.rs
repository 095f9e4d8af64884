//! Enrollment, centroid-cosine scoring, threshold decisions, EER and the
//! target-keyword / non-target-keyword evaluation protocol.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::EPS_NORM;
use crate::network::SeNetwork;
use crate::params::ParameterStore;
use crate::rng::{tag_of, SplitMix64};
use crate::tensor::{dot, norm};

/// Reference model: the enrollment vectors and their (unnormalised) mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerModel {
    pub speaker_id: String,
    enrollment: Vec<Vec<f64>>,
    centroid: Vec<f64>,
}

impl SpeakerModel {
    pub fn centroid(&self) -> &[f64] {
        &self.centroid
    }

    pub fn enrollment(&self) -> &[Vec<f64>] {
        &self.enrollment
    }

    pub fn m(&self) -> usize {
        self.enrollment.len()
    }
}

pub fn enroll(embeddings: &[Vec<f64>], speaker_id: impl Into<String>) -> Result<SpeakerModel> {
    let first = embeddings.first().ok_or_else(|| Error::Contract("enrollment needs at least one vector".into()))?;
    let d = first.len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Contract("enrollment vectors must share a non-zero dimension".into()));
    }
    let mut centroid = vec![0.0; d];
    for e in embeddings {
        for (c, v) in centroid.iter_mut().zip(e) {
            *c += v;
        }
    }
    let m = embeddings.len() as f64;
    for c in &mut centroid {
        *c /= m;
    }
    Ok(SpeakerModel { speaker_id: speaker_id.into(), enrollment: embeddings.to_vec(), centroid })
}

/// Cosine similarity between `x` and the model centroid.
pub fn score(model: &SpeakerModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.centroid.len() {
        return Err(Error::Contract(format!(
            "test vector has {} dims, model has {}",
            x.len(),
            model.centroid.len()
        )));
    }
    let nc = norm(&model.centroid);
    if nc <= EPS_NORM {
        return Err(Error::DegenerateModel(model.speaker_id.clone()));
    }
    let nx = norm(x);
    if nx <= EPS_NORM {
        return Err(Error::DegenerateEmbedding("test vector has zero norm".into()));
    }
    Ok(dot(x, &model.centroid) / (nx * nc))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionPolicy {
    pub threshold: f64,
}

impl DecisionPolicy {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("threshold {threshold} outside [-1, 1]")));
        }
        Ok(DecisionPolicy { threshold })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

/// Accept iff `score > threshold`; ties reject.
pub fn decide(score: f64, policy: DecisionPolicy) -> Decision {
    if score > policy.threshold {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    /// Fraction in `[0, 1]`.
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate.
///
/// Candidate thresholds are the midpoints of adjacent distinct scores plus
/// one point below and one above all scores. A trial is accepted when its
/// score is strictly above the threshold. The first candidate where
/// `FRR - FAR` becomes non-negative brackets the crossing, and both rates
/// and the threshold are interpolated linearly from the previous candidate.
pub fn compute_eer(targets: &[f64], impostors: &[f64]) -> Result<Eer> {
    if targets.is_empty() || impostors.is_empty() {
        return Err(Error::Contract("EER needs target and impostor scores".into()));
    }
    if targets.iter().chain(impostors).any(|s| !s.is_finite()) {
        return Err(Error::Contract("non-finite score".into()));
    }
    let mut all: Vec<(f64, bool)> =
        targets.iter().map(|&s| (s, true)).chain(impostors.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nt, ni) = (targets.len() as f64, impostors.len() as f64);

    // State at a threshold below every score.
    let mut tau = all[0].0 - 1.0;
    let mut rejected_targets = 0usize;
    let mut rejected_impostors = 0usize;
    let mut frr = 0.0;
    let mut far = 1.0;
    let mut i = 0;
    loop {
        // Invariant: d < 0 here, starting from -1 below all scores.
        let d = frr - far;
        // Advance past the next group of equal scores.
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                rejected_targets += 1;
            } else {
                rejected_impostors += 1;
            }
            i += 1;
        }
        let next_tau = if i < all.len() { 0.5 * (s + all[i].0) } else { s + 1.0 };
        let next_frr = rejected_targets as f64 / nt;
        let next_far = (ni - rejected_impostors as f64) / ni;
        let next_d = next_frr - next_far;
        if next_d == 0.0 {
            return Ok(Eer { eer: next_frr, threshold: next_tau });
        }
        if next_d > 0.0 {
            let t = -d / (next_d - d);
            return Ok(Eer { eer: frr + t * (next_frr - frr), threshold: tau + t * (next_tau - tau) });
        }
        tau = next_tau;
        frr = next_frr;
        far = next_far;
    }
}

/// Counts of scored trials per partition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialCounts {
    pub tk_target: usize,
    pub tk_impostor: usize,
    pub ntk_target: usize,
    pub ntk_impostor: usize,
}

/// Result of the TK/NTK protocol. EERs are percentages; a partition with no
/// target or no impostor trials has no EER.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer_tk: Option<f64>,
    pub eer_ntk: Option<f64>,
    pub eer_avg: Option<f64>,
    pub eer_all: Option<f64>,
    pub tau_tk: Option<f64>,
    pub tau_ntk: Option<f64>,
    pub tau_all: Option<f64>,
    pub counts: TrialCounts,
    /// Scores are pooled over all models before each EER is computed.
    pub pooling: String,
    pub m: usize,
    pub seed: u64,
    /// Drawn enrollment keyword per evaluated speaker.
    pub enrollment_keywords: BTreeMap<String, String>,
    pub impostor_trials_per_model: BTreeMap<String, usize>,
    pub skipped_speakers: Vec<String>,
    pub keyword_probe_accuracy: Option<f64>,
    pub asr_head_accuracy: Option<f64>,
    pub config_hash: String,
}

/// An embedded, labelled evaluation utterance.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    pub speaker: String,
    pub keyword: String,
    pub embedding: Vec<f64>,
}

/// One scored trial.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredTrial {
    pub model: String,
    pub test: String,
    pub target: bool,
    pub target_keyword: bool,
    pub score: f64,
}

/// The protocol over pre-computed embeddings.
///
/// Per speaker (sorted), one enrollment keyword is drawn among those with at
/// least `m` utterances, and `m` of its utterances are drawn for enrollment.
/// Every other utterance of every enrolled speaker is a test utterance and is
/// scored against every model. Speakers without an eligible keyword are
/// skipped entirely.
pub fn run_protocol_on_embeddings(items: &[EvalItem], m: usize, seed: u64) -> Result<(EvalReport, Vec<ScoredTrial>)> {
    if m == 0 {
        return Err(Error::Config("M must be >= 1".into()));
    }
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_speaker.entry(&it.speaker).or_default().push(i);
    }
    let mut models: Vec<(SpeakerModel, String)> = Vec::new();
    let mut tests: Vec<usize> = Vec::new();
    let mut skipped = Vec::new();
    for (spk, idx) in &by_speaker {
        let mut per_kw: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in idx {
            per_kw.entry(&items[i].keyword).or_default().push(i);
        }
        let eligible: Vec<&str> = per_kw.iter().filter(|(_, v)| v.len() >= m).map(|(k, _)| *k).collect();
        if eligible.is_empty() {
            warn!("speaker {spk}: no keyword with {m} utterances, skipped");
            skipped.push(spk.to_string());
            continue;
        }
        let mut rng = SplitMix64::derive(seed, tag_of(&format!("enroll/{spk}")));
        let kw = eligible[rng.below(eligible.len())];
        let mut pool = per_kw[kw].clone();
        rng.shuffle(&mut pool);
        let chosen = &pool[..m];
        let vecs: Vec<Vec<f64>> = chosen.iter().map(|&i| items[i].embedding.clone()).collect();
        models.push((enroll(&vecs, *spk)?, kw.to_string()));
        tests.extend(idx.iter().filter(|i| !chosen.contains(i)));
    }

    let mut trials = Vec::new();
    let mut counts = TrialCounts::default();
    let mut per_model = BTreeMap::new();
    let (mut tk_t, mut tk_i, mut ntk_t, mut ntk_i) = (vec![], vec![], vec![], vec![]);
    for (model, kw) in &models {
        let mut n_imp = 0;
        for &ti in &tests {
            let it = &items[ti];
            let target = it.speaker == model.speaker_id;
            let tk = &it.keyword == kw;
            let s = score(model, &it.embedding)?;
            match (tk, target) {
                (true, true) => tk_t.push(s),
                (true, false) => tk_i.push(s),
                (false, true) => ntk_t.push(s),
                (false, false) => ntk_i.push(s),
            }
            n_imp += usize::from(!target);
            trials.push(ScoredTrial {
                model: model.speaker_id.clone(),
                test: it.id.clone(),
                target,
                target_keyword: tk,
                score: s,
            });
        }
        per_model.insert(model.speaker_id.clone(), n_imp);
    }
    counts.tk_target = tk_t.len();
    counts.tk_impostor = tk_i.len();
    counts.ntk_target = ntk_t.len();
    counts.ntk_impostor = ntk_i.len();

    let eer_of = |t: &[f64], i: &[f64]| if t.is_empty() || i.is_empty() { None } else { compute_eer(t, i).ok() };
    let tk = eer_of(&tk_t, &tk_i);
    let ntk = eer_of(&ntk_t, &ntk_i);
    let all_t: Vec<f64> = tk_t.iter().chain(&ntk_t).copied().collect();
    let all_i: Vec<f64> = tk_i.iter().chain(&ntk_i).copied().collect();
    let all = eer_of(&all_t, &all_i);
    let pct = |e: Option<Eer>| e.map(|e| 100.0 * e.eer);
    let report = EvalReport {
        eer_tk: pct(tk),
        eer_ntk: pct(ntk),
        eer_avg: match (tk, ntk) {
            (Some(a), Some(b)) => Some(100.0 * (a.eer + b.eer) / 2.0),
            _ => None,
        },
        eer_all: pct(all),
        tau_tk: tk.map(|e| e.threshold),
        tau_ntk: ntk.map(|e| e.threshold),
        tau_all: all.map(|e| e.threshold),
        counts,
        pooling: "pooled".into(),
        m,
        seed,
        enrollment_keywords: models.iter().map(|(md, k)| (md.speaker_id.clone(), k.clone())).collect(),
        impostor_trials_per_model: per_model,
        skipped_speakers: skipped,
        keyword_probe_accuracy: None,
        asr_head_accuracy: None,
        config_hash: String::new(),
    };
    Ok((report, trials))
}

/// Embed `eval` with a frozen network and run the protocol.
pub fn run_tk_ntk_protocol(
    net: &SeNetwork,
    store: &ParameterStore,
    eval: &Dataset,
    m: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<EvalItem>)> {
    let items = embed_dataset(net, store, eval)?;
    let (report, _) = run_protocol_on_embeddings(&items, m, seed)?;
    Ok((report, items))
}

/// Infer-mode embeddings of every keyword-labelled utterance.
pub fn embed_dataset(net: &SeNetwork, store: &ParameterStore, ds: &Dataset) -> Result<Vec<EvalItem>> {
    let utts: Vec<_> = ds.utterances.iter().filter(|u| u.keyword.is_some()).collect();
    if utts.is_empty() {
        return Err(Error::Data("no keyword-labelled utterances to evaluate".into()));
    }
    let slices: Vec<&[f64]> = utts.iter().map(|u| u.wav.samples.as_slice()).collect();
    let embs = net.embed_frozen(store, &slices, 64)?;
    Ok(utts
        .iter()
        .zip(embs)
        .map(|(u, embedding)| EvalItem {
            id: u.id.clone(),
            speaker: u.speaker.clone(),
            keyword: u.keyword.clone().unwrap_or_default(),
            embedding,
        })
        .collect())
}

/// One line of an external trials list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub model_speaker: String,
    pub test_utterance: String,
    pub label: TrialLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Target,
    Impostor,
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialSpec>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Data(format!("{} row {}: {e}", path.display(), i + 1))))
        .collect()
}

/// EER over an explicit trial list.
pub fn evaluate_trials(
    models: &HashMap<String, SpeakerModel>,
    embeddings: &HashMap<String, Vec<f64>>,
    trials: &[TrialSpec],
) -> Result<Eer> {
    let (mut t, mut i) = (Vec::new(), Vec::new());
    for tr in trials {
        let model = models
            .get(&tr.model_speaker)
            .ok_or_else(|| Error::Data(format!("no model for speaker '{}'", tr.model_speaker)))?;
        let x = embeddings
            .get(&tr.test_utterance)
            .ok_or_else(|| Error::Data(format!("unknown test utterance '{}'", tr.test_utterance)))?;
        let s = score(model, x)?;
        match tr.label {
            TrialLabel::Target => t.push(s),
            TrialLabel::Impostor => i.push(s),
        }
    }
    compute_eer(&t, &i)
}
