//! Audio ingestion, segmentation, dataset splits and the synthetic
//! speaker-by-keyword corpus.

mod manifest;
mod segment;
mod split;
mod synth;
mod wav;

use std::collections::BTreeSet;

pub use manifest::{read_manifest, segment_by_manifest, write_manifest, Manifest, ManifestRow, SegmentOutcome};
pub use segment::{fit_length, segment_random};
pub use split::{check_one_keyword_per_speaker, make_split, SplitSpec};
pub use synth::{generate_synthetic, keyword_names, write_truth_table, SynthSpec, TruthRow};
pub use wav::{read_wav, write_wav};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source: String,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform { samples, sample_rate, source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// One labelled segment.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub keyword: Option<String>,
    pub wav: Waveform,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Dataset { utterances }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        self.utterances.iter().map(|u| u.speaker.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Sorted distinct keyword ids.
    pub fn keywords(&self) -> Vec<String> {
        self.utterances
            .iter()
            .filter_map(|u| u.keyword.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn filter(&self, mut keep: impl FnMut(&Utterance) -> bool) -> Dataset {
        Dataset { utterances: self.utterances.iter().filter(|u| keep(u)).cloned().collect() }
    }

    /// Crop or pad every waveform to `len` samples.
    pub fn fit_all(&mut self, len: usize) {
        for u in &mut self.utterances {
            u.wav = fit_length(&u.wav, len);
        }
    }
}

/// Map labels to their position in `vocab`.
pub fn label_indices<S: AsRef<str>>(labels: &[S], vocab: &[String]) -> Result<Vec<usize>> {
    let lookup: std::collections::HashMap<&str, usize> =
        vocab.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    labels
        .iter()
        .map(|l| {
            let l = l.as_ref();
            lookup.get(l).copied().ok_or_else(|| Error::Data(format!("label '{l}' not in vocabulary")))
        })
        .collect()
}
