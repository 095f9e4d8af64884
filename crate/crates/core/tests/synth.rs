use std::f64::consts::PI;

use tisv::data::{generate_synthetic, Dataset, SynthSpec};

/// Magnitude of a naive DFT at `n_bins` evenly spaced bins below Nyquist.
fn spectrum(x: &[f64], n_bins: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (1..=n_bins)
        .map(|b| {
            let k = b as f64 * n / (2.0 * n_bins as f64 + 2.0);
            let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, &v)| {
                let a = 2.0 * PI * k * i as f64 / n;
                (re + v * a.cos(), im - v * a.sin())
            });
            (re * re + im * im).sqrt().ln_1p()
        })
        .collect()
}

/// Frame RMS over `frames` equal frames, scaled to unit peak.
fn envelope(x: &[f64], frames: usize) -> Vec<f64> {
    let len = x.len() / frames;
    let e: Vec<f64> =
        x.chunks(len).take(frames).map(|c| (c.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt()).collect();
    let peak = e.iter().cloned().fold(f64::MIN, f64::max);
    e.iter().map(|v| v / peak).collect()
}

/// Nearest-centroid accuracy; even-indexed items per class fit, odd ones test.
fn nearest_centroid(features: &[Vec<f64>], labels: &[usize], n_classes: usize) -> f64 {
    let d = features[0].len();
    let mut sums = vec![vec![0.0; d]; n_classes];
    let mut counts = vec![0usize; n_classes];
    let mut seen = vec![0usize; n_classes];
    let mut test = Vec::new();
    for (f, &y) in features.iter().zip(labels) {
        if seen[y] % 2 == 0 {
            sums[y].iter_mut().zip(f).for_each(|(s, v)| *s += v);
            counts[y] += 1;
        } else {
            test.push((f, y));
        }
        seen[y] += 1;
    }
    let centroids: Vec<Vec<f64>> =
        sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|v| v / c as f64).collect()).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let hits = test
        .iter()
        .filter(|(f, y)| {
            let best = (0..n_classes).min_by(|&a, &b| dist(f, &centroids[a]).total_cmp(&dist(f, &centroids[b]))).unwrap();
            best == *y
        })
        .count();
    hits as f64 / test.len() as f64
}

fn labels(ds: &Dataset, of: impl Fn(&tisv::data::Utterance) -> String) -> (Vec<usize>, usize) {
    let names: Vec<String> =
        ds.utterances.iter().map(&of).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    (ds.utterances.iter().map(|u| names.iter().position(|n| *n == of(u)).unwrap()).collect(), names.len())
}

fn corpus() -> Dataset {
    let spec = SynthSpec { n_speakers: 8, n_keywords: 4, utts_per_pair: 4, segment_len: 1024, seed: 17, ..SynthSpec::default() };
    generate_synthetic(&spec).unwrap().0
}

#[test]
fn spectral_classifier_separates_speakers() {
    let ds = corpus();
    let feats: Vec<Vec<f64>> = ds.utterances.iter().map(|u| spectrum(&u.wav.samples, 96)).collect();
    let (y, n) = labels(&ds, |u| u.speaker.clone());
    let acc = nearest_centroid(&feats, &y, n);
    assert!(acc > 2.0 / n as f64, "speaker accuracy {acc} with {n} speakers");
}

#[test]
fn envelope_classifier_separates_keywords() {
    let ds = corpus();
    let feats: Vec<Vec<f64>> = ds.utterances.iter().map(|u| envelope(&u.wav.samples, 16)).collect();
    let (y, n) = labels(&ds, |u| u.keyword.clone().unwrap());
    let acc = nearest_centroid(&feats, &y, n);
    assert!(acc > 2.0 / n as f64, "keyword accuracy {acc} with {n} keywords");
}

#[test]
fn samples_stay_in_range_and_metadata_matches() {
    let spec = SynthSpec { n_speakers: 3, n_keywords: 2, utts_per_pair: 2, segment_len: 512, ..SynthSpec::default() };
    let (ds, truth) = generate_synthetic(&spec).unwrap();
    assert_eq!(ds.len(), 12);
    assert_eq!(truth.len(), 12);
    for (u, t) in ds.utterances.iter().zip(&truth) {
        assert_eq!(u.wav.len(), 512);
        assert_eq!(u.wav.sample_rate, spec.sample_rate);
        assert!(u.wav.samples.iter().all(|v| v.abs() < 1.0));
        assert_eq!((&u.id, &u.speaker, u.keyword.as_ref()), (&t.utt_id, &t.speaker, Some(&t.keyword)));
    }
}

#[test]
fn invalid_specs_are_rejected() {
    for bad in [
        SynthSpec { n_speakers: 0, ..SynthSpec::default() },
        SynthSpec { f0_min: 900.0, f0_max: 400.0, ..SynthSpec::default() },
        SynthSpec { keyword_gain_min: 0.0, ..SynthSpec::default() },
        SynthSpec { formant_max: 9000.0, ..SynthSpec::default() },
    ] {
        assert!(matches!(generate_synthetic(&bad), Err(tisv::Error::Config(_))), "{bad:?}");
    }
}
