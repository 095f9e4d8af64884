use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use tisv::asr::{argmax, asr_loss, build_head, AsrHeadConfig};
use tisv::data::{fit_length, make_split, read_wav, segment_random, write_wav, Dataset, Utterance, Waveform};
use tisv::graph::{BnStatistics, Graph};
use tisv::losses::{mine_violating_triplets, Triplet};
use tisv::params::ParameterStore;
use tisv::rng::SplitMix64;
use tisv::tensor::Tensor;
use tisv::trainer::make_pk_batches;
use tisv::verification::{compute_eer, decide, enroll, score, Decision, DecisionPolicy};

mod common;
use common::{cos, eer_oracle, unit};

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..40)
}

/// Scores on a coarse grid, so ties are common.
fn tied_scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-5i32..=5).prop_map(|k| k as f64 / 5.0), 1..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn eer_matches_bruteforce(t in scores(), i in scores()) {
        let e = compute_eer(&t, &i).unwrap();
        let (eer, tau) = eer_oracle(&t, &i);
        prop_assert!((e.eer - eer).abs() <= 1e-12);
        prop_assert!((e.threshold - tau).abs() <= 1e-12);
    }

    #[test]
    fn eer_matches_bruteforce_with_ties(t in tied_scores(), i in tied_scores()) {
        let e = compute_eer(&t, &i).unwrap();
        prop_assert!((e.eer - eer_oracle(&t, &i).0).abs() <= 1e-12);
    }

    #[test]
    fn eer_invariant_under_monotone_transform(t in tied_scores(), i in tied_scores()) {
        let f = |s: &f64| (2.0 * s).exp() + s.powi(3);
        let a = compute_eer(&t, &i).unwrap().eer;
        let ft: Vec<f64> = t.iter().map(f).collect();
        let fi: Vec<f64> = i.iter().map(f).collect();
        prop_assert!((compute_eer(&ft, &fi).unwrap().eer - a).abs() <= 1e-12);
    }

    #[test]
    fn decision_at_eer_threshold_balances_rates(t in scores(), i in scores()) {
        // Continuous scores: every step of the sweep moves one trial.
        let e = compute_eer(&t, &i).unwrap();
        let p = DecisionPolicy { threshold: e.threshold };
        let frr = t.iter().filter(|&&s| decide(s, p) == Decision::Reject).count() as f64 / t.len() as f64;
        let far = i.iter().filter(|&&s| decide(s, p) == Decision::Accept).count() as f64 / i.len() as f64;
        let quantum = (1.0 / t.len() as f64).max(1.0 / i.len() as f64);
        prop_assert!((frr - far).abs() <= quantum + 1e-12);
    }

    #[test]
    fn score_invariant_under_positive_rescaling(
        enr in prop::collection::vec(prop::collection::vec(0.1f64..1.0, 4), 1..6),
        x in prop::collection::vec(-1.0f64..1.0, 4),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let base = score(&enroll(&enr, "s").unwrap(), &x).unwrap();
        let scaled: Vec<Vec<f64>> = enr.iter().map(|e| e.iter().map(|v| v * a).collect()).collect();
        let xs: Vec<f64> = x.iter().map(|v| v * b).collect();
        prop_assert!((score(&enroll(&scaled, "s").unwrap(), &xs).unwrap() - base).abs() <= 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
    }

    #[test]
    fn enroll_is_order_invariant(
        enr in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..6),
        seed in any::<u64>(),
    ) {
        let mut shuffled = enr.clone();
        SplitMix64::new(seed).shuffle(&mut shuffled);
        let a = enroll(&enr, "s").unwrap();
        let b = enroll(&shuffled, "s").unwrap();
        for (x, y) in a.centroid().iter().zip(b.centroid()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn unit_enrollment_equals_averaging_normalised_vectors(
        enr in prop::collection::vec(prop::collection::vec(0.1f64..1.0, 3), 1..6),
        x in prop::collection::vec(0.1f64..1.0, 3),
    ) {
        let units: Vec<Vec<f64>> = enr.iter().map(|v| unit(v)).collect();
        let m = enroll(&units, "s").unwrap();
        let mean: Vec<f64> = (0..3).map(|d| units.iter().map(|u| u[d]).sum::<f64>() / units.len() as f64).collect();
        prop_assert!((score(&m, &x).unwrap() - cos(&mean, &x)).abs() <= 1e-12);
    }

    #[test]
    fn mining_equals_triple_loop(
        spk in prop::collection::vec(0usize..4, 2..=16),
        raw in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 16),
        margin in 0.05f64..1.0,
    ) {
        let emb: Vec<Vec<f64>> = raw[..spk.len()].iter().map(|v| unit(&[v[0] + 1e-3, v[1], v[2]])).collect();
        let mut want = Vec::new();
        for a in 0..spk.len() {
            for p in 0..spk.len() {
                for n in 0..spk.len() {
                    if a != p && spk[a] == spk[p] && spk[n] != spk[a]
                        && cos(&emb[a], &emb[p]) - margin <= cos(&emb[a], &emb[n])
                    {
                        want.push(Triplet { anchor: a, positive: p, negative: n });
                    }
                }
            }
        }
        prop_assert_eq!(mine_violating_triplets(&emb, &spk, margin).unwrap(), want);
    }

    #[test]
    fn triplet_loss_bounds(
        a in prop::collection::vec(-1.0f64..1.0, 3),
        p in prop::collection::vec(-1.0f64..1.0, 3),
        n in prop::collection::vec(-1.0f64..1.0, 3),
        margin in 0.01f64..2.0,
    ) {
        prop_assume!([&a, &p, &n].iter().all(|v| v.iter().any(|x| x.abs() > 1e-2)));
        let ev = |v: &[f64], s: &str| tisv::network::EmbeddingVector {
            values: unit(v), speaker: Some(s.into()), keyword: None, source: String::new(),
        };
        let l = tisv::losses::triplet_loss(&ev(&a, "x"), &ev(&p, "x"), &ev(&n, "y"), margin).unwrap();
        prop_assert!(l >= -margin - 1e-12 && l <= 2.0 + 1e-12);
        let gap = cos(&a, &p) - cos(&a, &n);
        prop_assert_eq!(l == -margin, gap >= margin);
    }

    #[test]
    fn fit_length_is_exact(n in 1usize..300, len in 1usize..300) {
        let w = Waveform::new(vec![0.25; n], 16_000, "w").unwrap();
        prop_assert_eq!(fit_length(&w, len).samples.len(), len);
    }

    #[test]
    fn pk_batches_cover_each_item_at_most_once(
        counts in prop::collection::vec(0usize..9, 2..8),
        p in 2usize..4,
        k in 2usize..4,
        seed in any::<u64>(),
    ) {
        let speaker_of: Vec<usize> = counts.iter().enumerate().flat_map(|(s, &c)| std::iter::repeat_n(s, c)).collect();
        let eligible = counts.iter().filter(|&&c| c >= k).count();
        match make_pk_batches(&speaker_of, p, k, seed) {
            Ok(batches) => {
                prop_assert!(eligible >= p);
                let mut seen = BTreeSet::new();
                for b in &batches {
                    prop_assert_eq!(b.len(), p * k);
                    let spk: BTreeSet<usize> = b.iter().map(|&i| speaker_of[i]).collect();
                    prop_assert_eq!(spk.len(), p);
                    for &i in b {
                        prop_assert!(seen.insert(i));
                    }
                }
            }
            Err(_) => prop_assert!(eligible < p),
        }
    }

    #[test]
    fn split_invariants(n_spk in 4usize..20, n_kw in 1usize..5, seed in any::<u64>()) {
        let mut utts = Vec::new();
        for s in 0..n_spk {
            for k in 0..n_kw {
                utts.push(Utterance {
                    id: format!("s{s}k{k}"),
                    speaker: format!("s{s:02}"),
                    keyword: Some(format!("k{k}")),
                    wav: Waveform::new(vec![0.1; 4], 16_000, "x").unwrap(),
                });
            }
        }
        let ds = Dataset::new(utts);
        let n_train = n_spk / 2;
        let n_eval = n_spk - n_train;
        let use_kw = n_kw.min(n_train);
        let split = make_split(&ds, n_train, n_eval, Some(use_kw), seed).unwrap();
        let train = split.train_set(&ds);
        let eval = split.eval_set(&ds);
        let tr: BTreeSet<String> = train.speakers().into_iter().collect();
        prop_assert!(eval.speakers().iter().all(|s| !tr.contains(s)));
        let mut per: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for u in &train.utterances {
            per.entry(&u.speaker).or_default().insert(u.keyword.as_deref().unwrap());
        }
        prop_assert!(per.values().all(|k| k.len() == 1));
        prop_assert_eq!(split.train_keywords().len(), use_kw);
    }

    #[test]
    fn asr_loss_non_negative(logits in prop::collection::vec(-20.0f64..20.0, 2..6), y in 0usize..6) {
        let y = y % logits.len();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        let p: Vec<f64> = logits.iter().map(|v| (v - m).exp() / z).collect();
        let l = asr_loss(&p, y).unwrap();
        prop_assert!(l.value >= 0.0);
        let shifted: Vec<f64> = logits.iter().map(|v| v + 3.7).collect();
        prop_assert_eq!(argmax(&shifted), argmax(&logits));
    }

    #[test]
    fn keyword_accuracy_permutation_invariant(
        x in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..20),
        labels in prop::collection::vec(0usize..3, 20),
        seed in any::<u64>(),
    ) {
        let (head, store) = build_head(AsrHeadConfig { n_keywords: 3, input_dim: 4 }, 7).unwrap();
        let y = &labels[..x.len()];
        let a = head.keyword_accuracy(&store, &x, y).unwrap();
        let mut idx: Vec<usize> = (0..x.len()).collect();
        SplitMix64::new(seed).shuffle(&mut idx);
        let px: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
        let py: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        prop_assert_eq!(head.keyword_accuracy(&store, &px, &py).unwrap(), a);
    }

    #[test]
    fn batch_norm_train_output_is_standardised(
        data in prop::collection::vec(-5.0f64..5.0, 3 * 2 * 5),
    ) {
        let mut store = ParameterStore::new();
        store.add("g", Tensor::full(vec![2], 1.0)).unwrap();
        store.add("b", Tensor::zeros(vec![2])).unwrap();
        let mut g = Graph::new();
        let bind = g.bind(&store);
        let x = g.input(Tensor::new(vec![3, 2, 5], data.clone()).unwrap());
        let y = g.batch_norm(x, bind.node(store.id("g").unwrap()), bind.node(store.id("b").unwrap()), BnStatistics::Batch).unwrap();
        let out = g.value(y).data();
        for c in 0..2 {
            let xs: Vec<f64> = (0..3).flat_map(|b| (0..5).map(move |t| (b * 2 + c) * 5 + t)).map(|i| data[i]).collect();
            let mean_in = xs.iter().sum::<f64>() / 15.0;
            let var_in = xs.iter().map(|v| (v - mean_in).powi(2)).sum::<f64>() / 15.0;
            prop_assume!(var_in > 1e-2);
            let ys: Vec<f64> = (0..3).flat_map(|b| (0..5).map(move |t| (b * 2 + c) * 5 + t)).map(|i| out[i]).collect();
            let mean = ys.iter().sum::<f64>() / 15.0;
            let var = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 15.0;
            prop_assert!(mean.abs() < 1e-9);
            // Epsilon 1e-5 in the denominator.
            prop_assert!((var - var_in / (var_in + 1e-5)).abs() < 1e-9);
        }
    }
}

#[test]
fn segment_stays_in_bounds_over_many_draws() {
    let n = 40_000;
    let src = Waveform::new((0..n).map(|i| i as f64 / n as f64).collect(), 16_000, "ramp").unwrap();
    for seed in 0..10_000u64 {
        let s = segment_random(&src, 1.5, 2.0, seed).unwrap().unwrap();
        assert!((24_000..=32_000).contains(&s.len()));
        // The ramp encodes the source index, so the segment must be a
        // contiguous in-bounds slice.
        let start = (s.samples[0] * n as f64).round() as usize;
        assert!(start + s.len() <= n);
        assert_eq!(s.samples[s.len() - 1], src.samples[start + s.len() - 1]);
    }
}

#[test]
fn wav_round_trip_within_one_quantum() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SplitMix64::new(3);
    for k in 0..20 {
        let w = Waveform::new((0..500).map(|_| rng.uniform_range(-1.0, 1.0)).collect(), 16_000, "w").unwrap();
        let p = dir.path().join(format!("{k}.wav"));
        write_wav(&p, &w).unwrap();
        let back = read_wav(&p).unwrap();
        let worst = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 32768.0, "round trip error {worst}");
    }
}
