use tisv::checkpoint::{encode, Metadata};
use tisv::data::{generate_synthetic, make_split, Dataset, SynthSpec};
use tisv::experiment::SweepConfig;
use tisv::losses::{AdvConfig, Routing};
use tisv::network::{build_network, SeNetConfig, SeNetwork};
use tisv::optim::SgdConfig;
use tisv::params::ParameterStore;
use tisv::trainer::{finetune_adversarial, pretrain_speaker_softmax, FinetuneConfig, Objective, PretrainConfig};
use tisv::Error;

fn corpus(n_speakers: usize, n_keywords: usize, utts: usize, len: usize, seed: u64) -> Dataset {
    let spec = SynthSpec {
        n_speakers,
        n_keywords,
        utts_per_pair: utts,
        segment_len: len,
        keyword_gain_min: 0.8,
        seed,
        ..SynthSpec::default()
    };
    generate_synthetic(&spec).unwrap().0
}

fn small_net() -> SeNetConfig {
    SeNetConfig { input_len: 256, ..SeNetConfig::tiny() }
}

fn pretrain_cfg(epochs: usize) -> PretrainConfig {
    PretrainConfig { epochs, batch_size: 16, logit_scale: 5.0, sgd: SgdConfig::with_lr(0.03), seed: 11 }
}

fn bytes(store: &ParameterStore) -> Vec<u8> {
    encode(store, &Metadata::new())
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Nearest-centroid speaker accuracy of `test` against centroids of `train`.
fn centroid_accuracy(net: &SeNetwork, store: &ParameterStore, train: &Dataset, test: &Dataset) -> f64 {
    let speakers = train.speakers();
    let embed = |ds: &Dataset| {
        let wavs: Vec<&[f64]> = ds.utterances.iter().map(|u| u.wav.samples.as_slice()).collect();
        net.embed_frozen(store, &wavs, 32).unwrap()
    };
    let (etr, ete) = (embed(train), embed(test));
    let d = etr[0].len();
    let centroids: Vec<Vec<f64>> = speakers
        .iter()
        .map(|s| {
            let mut c = vec![0.0; d];
            for (u, e) in train.utterances.iter().zip(&etr) {
                if &u.speaker == s {
                    c.iter_mut().zip(e).for_each(|(a, b)| *a += b);
                }
            }
            normalize(&mut c);
            c
        })
        .collect();
    let mut hits = 0;
    for (u, e) in test.utterances.iter().zip(&ete) {
        let best = (0..speakers.len())
            .max_by(|&a, &b| {
                let da: f64 = centroids[a].iter().zip(e).map(|(x, y)| x * y).sum();
                let db: f64 = centroids[b].iter().zip(e).map(|(x, y)| x * y).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        hits += usize::from(speakers[best] == u.speaker);
    }
    hits as f64 / test.len() as f64
}

#[test]
fn pretraining_separates_held_out_utterances() {
    let cfg = SweepConfig::default();
    let mut ds = corpus(8, 2, 24, cfg.network.input_len, 3);
    ds.fit_all(cfg.network.input_len);
    let mut seen = std::collections::BTreeMap::<String, usize>::new();
    let mut held = vec![false; ds.len()];
    for (i, u) in ds.utterances.iter().enumerate() {
        let c = seen.entry(format!("{}/{:?}", u.speaker, u.keyword)).or_default();
        held[i] = *c % 4 == 3;
        *c += 1;
    }
    let train = Dataset::new(ds.utterances.iter().zip(&held).filter(|(_, h)| !**h).map(|(u, _)| u.clone()).collect());
    let test = Dataset::new(ds.utterances.iter().zip(&held).filter(|(_, h)| **h).map(|(u, _)| u.clone()).collect());
    let (net, mut store) = build_network(&cfg.network, 1).unwrap();
    // Running statistics without moving the weights, for the untrained baseline.
    let mut untrained = store.clone();
    let frozen = PretrainConfig { sgd: SgdConfig::with_lr(1e-12), ..pretrain_cfg(1) };
    pretrain_speaker_softmax(&net, &mut untrained, &train, &frozen).unwrap();
    let before = centroid_accuracy(&net, &untrained, &train, &test);
    let pcfg = PretrainConfig { epochs: 24, seed: 11, ..PretrainConfig::default() };
    let rec = pretrain_speaker_softmax(&net, &mut store, &train, &pcfg).unwrap();
    let after = centroid_accuracy(&net, &store, &train, &test);
    assert!(rec.epoch_losses.last() < rec.epoch_losses.first(), "{:?}", rec.epoch_losses);
    assert!(after > 0.9, "held-out accuracy {after} (untrained {before})");
}

#[test]
fn one_step_on_one_batch_descends() {
    let mut ds = corpus(4, 2, 2, 256, 6);
    ds.fit_all(256);
    assert_eq!(ds.len(), 16);
    let (net, mut store) = build_network(&small_net(), 3).unwrap();
    let cfg = PretrainConfig { epochs: 2, batch_size: 16, sgd: SgdConfig::with_lr(1e-3), ..pretrain_cfg(2) };
    let rec = pretrain_speaker_softmax(&net, &mut store, &ds, &cfg).unwrap();
    assert_eq!(rec.steps, 2);
    assert!(rec.epoch_losses[1] < rec.epoch_losses[0], "{:?}", rec.epoch_losses);
}

#[test]
fn pretraining_is_deterministic() {
    let mut ds = corpus(4, 2, 3, 256, 5);
    ds.fit_all(256);
    let run = || {
        let (net, mut store) = build_network(&small_net(), 9).unwrap();
        let rec = pretrain_speaker_softmax(&net, &mut store, &ds, &pretrain_cfg(2)).unwrap();
        (bytes(&store), rec.epoch_losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let (net, mut store) = build_network(&small_net(), 9).unwrap();
    pretrain_speaker_softmax(&net, &mut store, &ds, &PretrainConfig { seed: 12, ..pretrain_cfg(2) }).unwrap();
    assert_ne!(bytes(&store), a, "the pretraining seed changes the batch order");
}

#[test]
fn pretraining_needs_two_speakers() {
    let ds = corpus(2, 2, 2, 256, 1).filter(|u| u.speaker == corpus(2, 2, 2, 256, 1).speakers()[0]);
    let (net, mut store) = build_network(&small_net(), 1).unwrap();
    assert!(matches!(pretrain_speaker_softmax(&net, &mut store, &ds, &pretrain_cfg(1)), Err(Error::Config(_))));
}

fn finetune_setup() -> (SeNetwork, ParameterStore, Dataset, Dataset) {
    let mut ds = corpus(10, 2, 6, 256, 7);
    ds.fit_all(256);
    let (net, mut store) = build_network(&small_net(), 2).unwrap();
    pretrain_speaker_softmax(&net, &mut store, &ds, &pretrain_cfg(1)).unwrap();
    let split = make_split(&ds, 6, 4, Some(2), 4).unwrap();
    (net, store, split.train_set(&ds), split.validation_set(&ds))
}

fn ft_cfg(gamma: f64) -> FinetuneConfig {
    FinetuneConfig { epochs: 2, p: 3, k: 2, adv: AdvConfig { gamma }, seed: 21, validation_m: 1, ..FinetuneConfig::default() }
}

#[test]
fn finetune_rejects_multi_keyword_speakers_unless_allowed() {
    let mut ds = corpus(6, 2, 3, 256, 8);
    ds.fit_all(256);
    let (net, mut store) = build_network(&small_net(), 2).unwrap();
    pretrain_speaker_softmax(&net, &mut store, &ds, &pretrain_cfg(1)).unwrap();
    let r = finetune_adversarial(&net, &mut store.clone(), &ds, None, &ft_cfg(0.2), "");
    assert!(matches!(r, Err(Error::Split(_))), "{r:?}");
    let cfg = FinetuneConfig { allow_multi_keyword: true, ..ft_cfg(0.2) };
    finetune_adversarial(&net, &mut store, &ds, None, &cfg, "").unwrap();
}

#[test]
fn finetune_checks_keyword_count() {
    let (net, mut store, train, _) = finetune_setup();
    let cfg = FinetuneConfig { n_keywords: 3, ..ft_cfg(0.2) };
    assert!(matches!(finetune_adversarial(&net, &mut store, &train, None, &cfg, ""), Err(Error::Config(_))));
}

#[test]
fn finetune_record_and_determinism() {
    let (net, base, train, val) = finetune_setup();
    let run = || {
        let mut store = base.clone();
        let (_, head, rec) = finetune_adversarial(&net, &mut store, &train, Some(&val), &ft_cfg(0.2), "h").unwrap();
        (bytes(&store), bytes(&head), rec)
    };
    let (a, ha, ra) = run();
    let (b, hb, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(ra.epochs.len(), 2);
    assert_eq!(ra.config_hash, "h");
    for (x, y) in ra.epochs.iter().zip(&rb.epochs) {
        assert_eq!((x.l_triplet, x.l_asr, x.validation_eer), (y.l_triplet, y.l_asr, y.validation_eer));
        assert!((x.l_se - (x.l_triplet - 0.2 * x.l_asr)).abs() < 1e-12);
        assert!(x.validation_eer.is_some());
        assert!((0.0..=1.0).contains(&x.keyword_accuracy));
    }
    assert_ne!(a, bytes(&base));
}

#[test]
fn zero_gamma_matches_triplet_only_and_routings_agree() {
    let (net, base, train, _) = finetune_setup();
    let run = |gamma: f64, routing: Routing, objective: Objective| {
        let mut store = base.clone();
        let cfg = FinetuneConfig { routing, objective, ..ft_cfg(gamma) };
        let (_, head, _) = finetune_adversarial(&net, &mut store, &train, None, &cfg, "").unwrap();
        (store, head)
    };
    let (adv, adv_head) = run(0.0, Routing::Junction, Objective::Adversarial);
    let (trip, trip_head) = run(0.0, Routing::Junction, Objective::TripletOnly);
    assert_eq!(bytes(&adv), bytes(&trip));
    assert_eq!(bytes(&adv_head), bytes(&trip_head));

    let (j, _) = run(0.4, Routing::Junction, Objective::Adversarial);
    let (t, _) = run(0.4, Routing::TwoPass, Objective::Adversarial);
    let mut worst: f64 = 0.0;
    for (pj, pt) in j.params().iter().zip(t.params()) {
        for (x, y) in pj.value.data().iter().zip(pt.value.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    assert!(worst < 1e-9, "junction and two-pass trajectories differ by {worst}");
    assert_ne!(bytes(&j), bytes(&adv), "gamma > 0 changes the trajectory");
}

#[test]
fn learning_rate_halves_when_validation_stalls() {
    let (net, mut store, train, val) = finetune_setup();
    let cfg = FinetuneConfig { epochs: 6, lr_patience: 1, ..ft_cfg(0.0) };
    let (_, _, rec) = finetune_adversarial(&net, &mut store, &train, Some(&val), &cfg, "").unwrap();
    let lrs: Vec<f64> = rec.epochs.iter().map(|e| e.learning_rate).collect();
    let mut best = f64::INFINITY;
    let mut lr = cfg.sgd.learning_rate;
    for (e, &got) in rec.epochs.iter().zip(&lrs) {
        let v = e.validation_eer.unwrap();
        if v < best {
            best = v;
        } else {
            lr *= 0.5;
        }
        assert_eq!(got, lr, "{lrs:?}");
    }
}

#[test]
fn pk_epochs_differ_in_order_not_coverage() {
    use tisv::trainer::make_pk_batches;
    let speaker_of: Vec<usize> = (0..24).map(|i| i % 6).collect();
    let a = make_pk_batches(&speaker_of, 3, 2, 1).unwrap();
    let b = make_pk_batches(&speaker_of, 3, 2, 2).unwrap();
    assert_ne!(a, b);
    let cover = |bs: &[Vec<usize>]| {
        let mut v: Vec<usize> = bs.concat();
        v.sort_unstable();
        v
    };
    assert_eq!(cover(&a), cover(&b));
    assert_eq!(cover(&a), (0..24).collect::<Vec<_>>());
    assert_eq!(make_pk_batches(&[0, 0, 1, 1], 2, 2, 9).unwrap().len(), 1);
    assert!(matches!(make_pk_batches(&[0, 0, 1], 2, 2, 9), Err(Error::Config(_))));
}
