//! Synthetic speaker-by-keyword corpus.
//!
//! A speaker owns a fundamental frequency and a spectral tilt. A keyword owns
//! an amplitude envelope, a per-harmonic gain pattern and a few fixed-frequency
//! formant tones that do not depend on the speaker. Each utterance combines
//! both plus per-utterance pitch jitter, random phases and white noise.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Utterance, Waveform};
use crate::error::{Error, Result};
use crate::rng::{tag_of, SplitMix64};

const COMMANDS: [&str; 4] = ["bin", "lay", "place", "set"];
const COLORS: [&str; 4] = ["blue", "green", "red", "white"];
/// Gaussian bumps per keyword envelope.
const ENVELOPE_BUMPS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub n_keywords: usize,
    pub utts_per_pair: usize,
    pub segment_len: usize,
    pub sample_rate: u32,
    pub f0_min: f64,
    pub f0_max: f64,
    pub tilt_min: f64,
    pub tilt_max: f64,
    pub n_harmonics: usize,
    /// Lower bound of the per-harmonic keyword gains; the upper bound is 1.
    pub keyword_gain_min: f64,
    /// Keyword tones per keyword. `[formant_min, formant_max]` Hz is cut into
    /// one slot per (keyword, tone) and every keyword gets its own slots.
    pub n_formants: usize,
    pub formant_min: f64,
    pub formant_max: f64,
    /// Formant amplitude relative to the RMS amplitude of the harmonics.
    pub formant_level: f64,
    /// Relative per-utterance pitch deviation.
    pub f0_jitter: f64,
    /// Standard deviation of additive noise, relative to the unit peak.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_speakers: 16,
            n_keywords: 4,
            utts_per_pair: 8,
            segment_len: 1024,
            sample_rate: 16_000,
            f0_min: 300.0,
            f0_max: 1200.0,
            tilt_min: 0.5,
            tilt_max: 2.0,
            n_harmonics: 8,
            keyword_gain_min: 0.1,
            n_formants: 2,
            formant_min: 1500.0,
            formant_max: 6000.0,
            formant_level: 0.5,
            f0_jitter: 0.02,
            noise_level: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_speakers == 0 || self.n_keywords == 0 || self.utts_per_pair == 0 {
            return bad("counts must be positive");
        }
        if self.segment_len == 0 || self.sample_rate == 0 || self.n_harmonics == 0 {
            return bad("segment_len, sample_rate and n_harmonics must be positive");
        }
        if !(self.f0_min > 0.0 && self.f0_max >= self.f0_min && self.f0_max < self.sample_rate as f64 / 2.0) {
            return bad("need 0 < f0_min <= f0_max < sample_rate / 2");
        }
        if !(self.tilt_max >= self.tilt_min && self.tilt_min >= 0.0) {
            return bad("need 0 <= tilt_min <= tilt_max");
        }
        if self.n_formants > 0
            && !(self.formant_min > 0.0
                && self.formant_max >= self.formant_min
                && self.formant_max < self.sample_rate as f64 / 2.0
                && self.formant_level >= 0.0)
        {
            return bad("need 0 < formant_min <= formant_max < sample_rate / 2 and formant_level >= 0");
        }
        if !(self.keyword_gain_min > 0.0 && self.keyword_gain_min <= 1.0) {
            return bad("keyword_gain_min must be in (0, 1]");
        }
        if !(self.f0_jitter >= 0.0 && self.f0_jitter < 1.0 && self.noise_level >= 0.0) {
            return bad("jitter must be in [0, 1) and noise non-negative");
        }
        Ok(())
    }
}

/// Keyword names of the form `command-color`; past 16, `kwNN`.
pub fn keyword_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            if n <= COMMANDS.len() * COLORS.len() {
                format!("{}-{}", COMMANDS[i / COLORS.len()], COLORS[i % COLORS.len()])
            } else {
                format!("kw{i:02}")
            }
        })
        .collect()
}

pub fn speaker_name(i: usize) -> String {
    format!("spk{i:03}")
}

/// Ground-truth factors of one generated utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRow {
    pub utt_id: String,
    pub speaker: String,
    pub keyword: String,
    pub seed: u64,
}

struct SpeakerFactor {
    f0: f64,
    tilt: f64,
}

struct KeywordFactor {
    /// (centre, width, height) in fractions of the segment.
    bumps: Vec<(f64, f64, f64)>,
    gains: Vec<f64>,
    formants: Vec<f64>,
}

impl KeywordFactor {
    fn envelope(&self, x: f64) -> f64 {
        0.1 + self.bumps.iter().map(|&(c, w, h)| h * (-0.5 * ((x - c) / w).powi(2)).exp()).sum::<f64>()
    }
}

fn speaker_factor(spec: &SynthSpec, s: usize) -> SpeakerFactor {
    let mut r = SplitMix64::derive(spec.seed, tag_of(&format!("speaker/{s}")));
    // Log-uniform pitch.
    let f0 = (spec.f0_min.ln() + r.uniform() * (spec.f0_max / spec.f0_min).ln()).exp();
    SpeakerFactor { f0, tilt: r.uniform_range(spec.tilt_min, spec.tilt_max) }
}

/// Formant slot indices per keyword: a seeded permutation of all slots.
fn formant_slots(spec: &SynthSpec) -> Vec<usize> {
    let mut slots: Vec<usize> = (0..spec.n_keywords * spec.n_formants).collect();
    SplitMix64::derive(spec.seed, tag_of("formant-slots")).shuffle(&mut slots);
    slots
}

fn keyword_factor(spec: &SynthSpec, k: usize, slots: &[usize]) -> KeywordFactor {
    let mut r = SplitMix64::derive(spec.seed, tag_of(&format!("keyword/{k}")));
    let bumps = (0..ENVELOPE_BUMPS)
        .map(|_| (r.uniform_range(0.1, 0.9), r.uniform_range(0.05, 0.2), r.uniform_range(0.3, 1.0)))
        .collect();
    let gains = (0..spec.n_harmonics).map(|_| r.uniform_range(spec.keyword_gain_min, 1.0)).collect();
    let width = (spec.formant_max - spec.formant_min) / slots.len().max(1) as f64;
    let formants = slots[k * spec.n_formants..(k + 1) * spec.n_formants]
        .iter()
        .map(|&j| spec.formant_min + width * (j as f64 + r.uniform_range(0.25, 0.75)))
        .collect();
    KeywordFactor { bumps, gains, formants }
}

fn render(spec: &SynthSpec, sp: &SpeakerFactor, kw: &KeywordFactor, seed: u64) -> Vec<f64> {
    let mut r = SplitMix64::new(seed);
    let f0 = sp.f0 * (1.0 + r.uniform_range(-spec.f0_jitter, spec.f0_jitter));
    let nyquist = spec.sample_rate as f64 / 2.0;
    let partials: Vec<(f64, f64, f64)> = (1..=spec.n_harmonics)
        .map(|h| {
            let phase = r.uniform_range(0.0, 2.0 * PI);
            (h as f64 * f0, (h as f64).powf(-sp.tilt) * kw.gains[h - 1], phase)
        })
        .filter(|&(f, _, _)| f < nyquist)
        .collect();
    let rms = (partials.iter().map(|p| p.1 * p.1).sum::<f64>() / 2.0).sqrt();
    let tones: Vec<(f64, f64, f64)> = kw
        .formants
        .iter()
        .map(|&f| (f, spec.formant_level * rms, r.uniform_range(0.0, 2.0 * PI)))
        .collect();
    let n = spec.segment_len;
    let sr = spec.sample_rate as f64;
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 =
                partials.iter().chain(&tones).map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum();
            kw.envelope(i as f64 / n as f64) * tone
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    for v in &mut x {
        *v = 0.5 * *v / peak + spec.noise_level * r.normal();
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        for v in &mut x {
            *v *= 0.99 / peak;
        }
    }
    x
}

/// Generate the full speaker x keyword x utterance grid, speaker-major.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Dataset, Vec<TruthRow>)> {
    spec.validate()?;
    let kw_names = keyword_names(spec.n_keywords);
    let speakers: Vec<SpeakerFactor> = (0..spec.n_speakers).map(|s| speaker_factor(spec, s)).collect();
    let slots = formant_slots(spec);
    let keywords: Vec<KeywordFactor> = (0..spec.n_keywords).map(|k| keyword_factor(spec, k, &slots)).collect();
    let mut utts = Vec::with_capacity(spec.n_speakers * spec.n_keywords * spec.utts_per_pair);
    let mut truth = Vec::with_capacity(utts.capacity());
    for (s, sp) in speakers.iter().enumerate() {
        for (k, kw) in keywords.iter().enumerate() {
            for u in 0..spec.utts_per_pair {
                let seed = SplitMix64::derive(spec.seed, tag_of(&format!("utt/{s}/{k}/{u}"))).next_u64();
                let id = format!("{}_{}_{u:03}", speaker_name(s), kw_names[k]);
                let wav = Waveform::new(render(spec, sp, kw, seed), spec.sample_rate, id.clone())?;
                truth.push(TruthRow {
                    utt_id: id.clone(),
                    speaker: speaker_name(s),
                    keyword: kw_names[k].clone(),
                    seed,
                });
                utts.push(Utterance { id, speaker: speaker_name(s), keyword: Some(kw_names[k].clone()), wav });
            }
        }
    }
    Ok((Dataset::new(utts), truth))
}

pub fn write_truth_table(path: &Path, rows: &[TruthRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
