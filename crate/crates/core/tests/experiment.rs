use tisv::data::SynthSpec;
use tisv::experiment::{run_sweep, SweepConfig};
use tisv::network::SeNetConfig;
use tisv::trainer::{FinetuneConfig, PretrainConfig};

fn tiny_sweep() -> SweepConfig {
    SweepConfig {
        synth: SynthSpec { n_speakers: 10, n_keywords: 3, utts_per_pair: 4, segment_len: 256, ..SynthSpec::default() },
        network: SeNetConfig { input_len: 256, ..SeNetConfig::tiny() },
        n_pretrain_speakers: 4,
        pretrain_keywords_per_speaker: 2,
        n_train_speakers: 4,
        n_eval_speakers: 2,
        pretrain: PretrainConfig { epochs: 1, batch_size: 8, ..PretrainConfig::default() },
        finetune: FinetuneConfig { epochs: 1, p: 2, k: 2, ..FinetuneConfig::default() },
        gammas: vec![0.0, 0.4],
        n_keywords: vec![2, 3],
        m: 2,
        ..SweepConfig::default()
    }
}

#[test]
fn sweep_covers_the_grid_and_is_deterministic() {
    let cfg = tiny_sweep();
    let rows = run_sweep(&cfg, 3).unwrap();
    let grid: Vec<(usize, f64)> = rows.iter().map(|r| (r.n_keywords, r.gamma)).collect();
    assert_eq!(grid, vec![(2, 0.0), (2, 0.4), (3, 0.0), (3, 0.4)]);
    for r in &rows {
        assert_eq!(r.seed, 3);
        assert!(r.keyword_probe_accuracy.is_some_and(|p| (0.0..=1.0).contains(&p)));
        assert!(r.asr_head_accuracy.is_some());
    }
    assert_eq!(rows, run_sweep(&cfg, 3).unwrap());
}

#[test]
fn sweep_needs_enough_speakers() {
    let cfg = SweepConfig { n_eval_speakers: 5, ..tiny_sweep() };
    assert!(matches!(run_sweep(&cfg, 0), Err(tisv::Error::Config(_))));
}
