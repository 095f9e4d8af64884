//! End-to-end evaluation helpers and the synthetic gamma x N sweep.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use serde::{Deserialize, Serialize};

use crate::asr::{train_probe, AsrHead, ProbeConfig};
use crate::data::{generate_synthetic, label_indices, make_split, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::network::{build_network, SeNetConfig, SeNetwork};
use crate::optim::SgdConfig;
use crate::params::ParameterStore;
use crate::rng::{tag_of, SplitMix64};
use crate::trainer::{finetune_adversarial, pretrain_speaker_softmax, stratified_halves, FinetuneConfig, PretrainConfig};
use crate::verification::{embed_dataset, run_protocol_on_embeddings, EvalItem, EvalReport};

/// Keyword-probe accuracy: a fresh classifier is fitted on half of each
/// (speaker, keyword) cell and scored on the other half. Only items whose
/// keyword is in `keywords` take part.
pub fn keyword_probe_accuracy(items: &[EvalItem], keywords: &[String], cfg: &ProbeConfig) -> Result<f64> {
    let kept: Vec<&EvalItem> = items.iter().filter(|i| keywords.contains(&i.keyword)).collect();
    if kept.is_empty() {
        return Err(Error::Data("no evaluation utterance carries a probed keyword".into()));
    }
    let kws: Vec<&str> = kept.iter().map(|i| i.keyword.as_str()).collect();
    let labels = label_indices(&kws, keywords)?;
    let spk_names: Vec<String> = kept.iter().map(|i| i.speaker.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let spk_labels = label_indices(&kept.iter().map(|i| i.speaker.as_str()).collect::<Vec<_>>(), &spk_names)?;
    let cells: Vec<(usize, usize)> = spk_labels.iter().copied().zip(labels.iter().copied()).collect();
    let (fit, test) = stratified_halves(&cells, cfg.seed);
    if fit.is_empty() || test.is_empty() {
        return Err(Error::Data("too few utterances to fit and score a keyword probe".into()));
    }
    let x = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|&i| kept[i].embedding.clone()).collect() };
    let y = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| labels[i]).collect() };
    let (head, store) = train_probe(&x(&fit), &y(&fit), keywords.len(), cfg)?;
    head.keyword_accuracy(&store, &x(&test), &y(&test))
}

/// Accuracy of a trained keyword head on the items whose keyword it knows.
pub fn head_accuracy(items: &[EvalItem], keywords: &[String], head: &AsrHead, store: &ParameterStore) -> Result<f64> {
    let kept: Vec<&EvalItem> = items.iter().filter(|i| keywords.contains(&i.keyword)).collect();
    let labels = label_indices(&kept.iter().map(|i| i.keyword.as_str()).collect::<Vec<_>>(), keywords)?;
    let x: Vec<Vec<f64>> = kept.iter().map(|i| i.embedding.clone()).collect();
    head.keyword_accuracy(store, &x, &labels)
}

/// Protocol report plus probe (and optionally head) accuracy on `keywords`.
pub fn evaluate_model(
    net: &SeNetwork,
    store: &ParameterStore,
    eval: &Dataset,
    keywords: &[String],
    head: Option<(&AsrHead, &ParameterStore)>,
    m: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<EvalReport> {
    let items = embed_dataset(net, store, eval)?;
    let (mut report, _) = run_protocol_on_embeddings(&items, m, seed)?;
    if keywords.len() >= 2 {
        report.keyword_probe_accuracy = Some(keyword_probe_accuracy(&items, keywords, probe)?);
    }
    if let Some((h, s)) = head {
        report.asr_head_accuracy = Some(head_accuracy(&items, keywords, h, s)?);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub synth: SynthSpec,
    pub network: SeNetConfig,
    pub n_pretrain_speakers: usize,
    /// Keywords kept per pretraining speaker, assigned round robin; 0 keeps
    /// all. Fewer keywords make what is said correlate with who says it.
    pub pretrain_keywords_per_speaker: usize,
    pub n_train_speakers: usize,
    pub n_eval_speakers: usize,
    /// Track validation EER during fine-tuning (drives the learning-rate
    /// schedule, but embeds the validation set every epoch).
    pub validate: bool,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub gammas: Vec<f64>,
    pub n_keywords: Vec<usize>,
    pub m: usize,
    pub probe: ProbeConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let network = SeNetConfig {
            input_len: 1024,
            n_convres_units: 3,
            n_tail_resblocks: 1,
            embed_dim: 16,
            channel_schedule: vec![4, 8, 16],
            kernel_size_unit: 5,
            kernel_size_resblock: 3,
            stride_per_unit: 2,
        };
        let synth = SynthSpec {
            n_speakers: 80,
            n_keywords: 4,
            utts_per_pair: 12,
            segment_len: 1024,
            f0_min: 300.0,
            f0_max: 800.0,
            n_harmonics: 4,
            keyword_gain_min: 0.8,
            formant_min: 4500.0,
            formant_max: 7500.0,
            formant_level: 1.0,
            ..SynthSpec::default()
        };
        SweepConfig {
            synth,
            network,
            n_pretrain_speakers: 16,
            pretrain_keywords_per_speaker: 2,
            n_train_speakers: 32,
            n_eval_speakers: 32,
            validate: false,
            pretrain: PretrainConfig { epochs: 30, logit_scale: 5.0, sgd: SgdConfig::with_lr(0.03), ..PretrainConfig::default() },
            finetune: FinetuneConfig {
                epochs: 20,
                sgd: SgdConfig::with_lr(0.003),
                head_learning_rate: Some(0.25),
                ..FinetuneConfig::default()
            },
            gammas: vec![0.0, 0.2, 0.4],
            n_keywords: vec![2, 3, 4],
            m: 5,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub n_keywords: usize,
    pub gamma: f64,
    pub eer_tk: Option<f64>,
    pub eer_ntk: Option<f64>,
    pub eer_avg: Option<f64>,
    pub keyword_probe_accuracy: Option<f64>,
    pub asr_head_accuracy: Option<f64>,
}

/// Pretrain once for `seed`, then fine-tune and evaluate every
/// (n_keywords, gamma) pair from the same base network.
pub fn run_sweep(cfg: &SweepConfig, seed: u64) -> Result<Vec<SweepRow>> {
    let s = |tag: &str| SplitMix64::derive(seed, tag_of(tag)).next_u64();
    let synth = SynthSpec { seed: s("synth"), ..cfg.synth.clone() };
    let needed = cfg.n_pretrain_speakers + cfg.n_train_speakers + cfg.n_eval_speakers;
    if synth.n_speakers < needed {
        return Err(Error::Config(format!("synthetic corpus has {} speakers, sweep needs {needed}", synth.n_speakers)));
    }
    let (mut ds, _) = generate_synthetic(&synth)?;
    ds.fit_all(cfg.network.input_len);

    let mut speakers = ds.speakers();
    SplitMix64::new(s("pretrain-speakers")).shuffle(&mut speakers);
    let pre: BTreeSet<String> = speakers[..cfg.n_pretrain_speakers].iter().cloned().collect();
    let mut pre_ds = ds.filter(|u| pre.contains(&u.speaker));
    let kws = pre_ds.keywords();
    let per = cfg.pretrain_keywords_per_speaker;
    if per > 0 && per < kws.len() {
        let own: BTreeMap<&String, Vec<&String>> = speakers[..cfg.n_pretrain_speakers]
            .iter()
            .enumerate()
            .map(|(i, s)| (s, (0..per).map(|j| &kws[(i + j) % kws.len()]).collect()))
            .collect();
        pre_ds = pre_ds.filter(|u| u.keyword.as_ref().is_some_and(|k| own[&u.speaker].contains(&k)));
    }
    let rest = ds.filter(|u| !pre.contains(&u.speaker));

    let (net, mut base) = build_network(&cfg.network, s("init"))?;
    let pcfg = PretrainConfig { seed: s("pretrain"), ..cfg.pretrain.clone() };
    let rec = pretrain_speaker_softmax(&net, &mut base, &pre_ds, &pcfg)?;
    info!("seed {seed}: pretrain accuracy {:?}", rec.epoch_accuracy.last());

    let mut rows = Vec::new();
    for &n in &cfg.n_keywords {
        let split = make_split(&rest, cfg.n_train_speakers, cfg.n_eval_speakers, Some(n), s("split"))?;
        let train = split.train_set(&rest);
        let validation = split.validation_set(&rest);
        let eval = split.eval_set(&rest);
        let keywords = split.train_keywords();
        let b = evaluate_model(&net, &base, &eval, &keywords, None, cfg.m, &ProbeConfig { seed: s("probe"), ..cfg.probe }, s("eval"))?;
        info!("seed {seed} N={n} base: TK {:?} NTK {:?} probe {:?}", b.eer_tk, b.eer_ntk, b.keyword_probe_accuracy);
        for &gamma in &cfg.gammas {
            let mut store = base.clone();
            let fcfg = FinetuneConfig {
                n_keywords: n,
                adv: crate::losses::AdvConfig { gamma },
                seed: s(&format!("finetune/{n}")),
                ..cfg.finetune.clone()
            };
            let (head, head_store, _) = finetune_adversarial(&net, &mut store, &train, cfg.validate.then_some(&validation), &fcfg, "")?;
            let probe = ProbeConfig { seed: s("probe"), ..cfg.probe };
            let r = evaluate_model(&net, &store, &eval, &keywords, Some((&head, &head_store)), cfg.m, &probe, s("eval"))?;
            info!(
                "seed {seed} N={n} gamma={gamma}: TK {:?} NTK {:?} probe {:?} head {:?}",
                r.eer_tk, r.eer_ntk, r.keyword_probe_accuracy, r.asr_head_accuracy
            );
            rows.push(SweepRow {
                seed,
                n_keywords: n,
                gamma,
                eer_tk: r.eer_tk,
                eer_ntk: r.eer_ntk,
                eer_avg: r.eer_avg,
                keyword_probe_accuracy: r.keyword_probe_accuracy,
                asr_head_accuracy: r.asr_head_accuracy,
            });
        }
    }
    Ok(rows)
}
