use log::warn;

use super::Waveform;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Crop the centre `len` samples, or zero-pad at the end.
pub fn fit_length(wav: &Waveform, len: usize) -> Waveform {
    let n = wav.samples.len();
    let samples = if n >= len {
        let start = (n - len) / 2;
        wav.samples[start..start + len].to_vec()
    } else {
        let mut s = wav.samples.clone();
        s.resize(len, 0.0);
        s
    };
    Waveform { samples, sample_rate: wav.sample_rate, source: wav.source.clone() }
}

/// Seeded random segment with a length drawn uniformly from
/// `[min_sec, max_sec]`, clipped to the source. Returns `None` (with a
/// warning) when the source is shorter than `min_sec`.
pub fn segment_random(wav: &Waveform, min_sec: f64, max_sec: f64, seed: u64) -> Result<Option<Waveform>> {
    if !(min_sec > 0.0 && max_sec >= min_sec) {
        return Err(Error::Config(format!("invalid segment range [{min_sec}, {max_sec}]")));
    }
    let sr = wav.sample_rate as f64;
    let lo = (min_sec * sr).round() as usize;
    let hi = (max_sec * sr).round() as usize;
    let n = wav.samples.len();
    if n < lo {
        warn!("{}: {} samples is shorter than {min_sec} s, skipped", wav.source, n);
        return Ok(None);
    }
    let hi = hi.min(n);
    let mut rng = SplitMix64::new(seed);
    let len = lo + rng.below(hi - lo + 1);
    let start = rng.below(n - len + 1);
    Ok(Some(Waveform {
        samples: wav.samples[start..start + len].to_vec(),
        sample_rate: wav.sample_rate,
        source: format!("{}@{start}+{len}", wav.source),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| i as f64 / n as f64).collect(), 16_000, "r").unwrap()
    }

    #[test]
    fn fit_crops_centre_and_pads_tail() {
        let w = Waveform::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], 16_000, "x").unwrap();
        assert_eq!(fit_length(&w, 3).samples, vec![2.0, 3.0, 4.0]);
        assert_eq!(fit_length(&w, 7).samples, vec![1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0]);
        assert_eq!(fit_length(&w, 5).samples, w.samples);
    }

    #[test]
    fn ten_second_file() {
        let w = ramp(160_000);
        for seed in 0..200 {
            let s = segment_random(&w, 1.5, 2.0, seed).unwrap().unwrap();
            assert!((24_000..=32_000).contains(&s.len()));
        }
        let a = segment_random(&w, 1.5, 2.0, 9).unwrap().unwrap();
        let b = segment_random(&w, 1.5, 2.0, 9).unwrap().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_source_skipped() {
        assert!(segment_random(&ramp(1000), 1.5, 2.0, 0).unwrap().is_none());
        assert!(segment_random(&ramp(1000), 2.0, 1.5, 0).is_err());
    }
}
