//! Speaker-softmax pretraining and triplet + keyword-adversarial fine-tuning.

use std::collections::BTreeMap;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::asr::{argmax, build_head, AsrHead, AsrHeadConfig};
use crate::data::{check_one_keyword_per_speaker, label_indices, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{
    mine_violating_triplets, route_adversarial_gradients, triplet_loss_node, AdvConfig, Routing, Side, TripletConfig,
};
use crate::network::{BnMode, SeNetwork};
use crate::optim::{Sgd, SgdConfig};
use crate::params::ParameterStore;
use crate::rng::{tag_of, SplitMix64};
use crate::tensor::Tensor;
use crate::verification::{embed_dataset, run_protocol_on_embeddings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Embeddings are multiplied by this before the speaker classifier.
    pub logit_scale: f64,
    pub sgd: SgdConfig,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 10, batch_size: 16, logit_scale: 10.0, sgd: SgdConfig::with_lr(0.01), seed: 0 }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("pretrain needs epochs >= 1 and batch_size >= 2".into()));
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::Config("logit_scale must be positive".into()));
        }
        self.sgd.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PretrainRecord {
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    /// Training accuracy per epoch.
    pub epoch_accuracy: Vec<f64>,
    pub speakers: Vec<String>,
    pub steps: u64,
}

fn stack<'a>(ds: &'a Dataset, idx: &[usize]) -> Vec<&'a [f64]> {
    idx.iter().map(|&i| ds.utterances[i].wav.samples.as_slice()).collect()
}

fn check_finite(value: f64, step: u64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingDiverged { step, detail: format!("{what} is {value}") })
    }
}

/// Train `store` as a speaker classifier through a temporary softmax layer,
/// which is discarded afterwards.
pub fn pretrain_speaker_softmax(
    net: &SeNetwork,
    store: &mut ParameterStore,
    ds: &Dataset,
    cfg: &PretrainConfig,
) -> Result<PretrainRecord> {
    cfg.validate()?;
    let speakers = ds.speakers();
    if speakers.len() < 2 {
        return Err(Error::Config(format!("pretraining needs >= 2 speakers, got {}", speakers.len())));
    }
    let spk: Vec<&str> = ds.utterances.iter().map(|u| u.speaker.as_str()).collect();
    let labels = label_indices(&spk, &speakers)?;
    let d = net.config().embed_dim;
    let (head, mut head_store) =
        build_head(AsrHeadConfig { n_keywords: speakers.len(), input_dim: d }, SplitMix64::derive(cfg.seed, tag_of("pretrain/head")).next_u64())?;
    let mut opt = Sgd::new(cfg.sgd)?;
    let mut head_opt = Sgd::new(cfg.sgd)?;
    let mut record = PretrainRecord { speakers: speakers.clone(), ..Default::default() };
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.epochs {
        SplitMix64::derive(cfg.seed, tag_of(&format!("pretrain/epoch/{epoch}"))).shuffle(&mut order);
        let (mut total, mut hits, mut seen, mut nb) = (0.0, 0usize, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size).filter(|b| b.len() >= 2) {
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.input(net.input_tensor(&stack(ds, batch))?);
            let bind = g.bind(store);
            let hbind = g.bind(&head_store);
            let pass = net.forward(&mut g, store, &bind, x, BnMode::Train)?;
            let scaled = g.scale(pass.embeddings, cfg.logit_scale);
            let logits = head.logits(&mut g, &head_store, &hbind, scaled)?;
            let loss = g.softmax_cross_entropy(logits, &y)?;
            let lv = g.value(loss).item();
            check_finite(lv, opt.steps_taken(), "pretraining loss")?;
            let zs = g.value(logits);
            let n_cls = speakers.len();
            for (row, &t) in zs.data().chunks(n_cls).zip(&y) {
                hits += usize::from(argmax(row) == t);
            }
            seen += y.len();
            let grads = g.backward(loss)?;
            bind.accumulate(&grads, store, 1.0);
            hbind.accumulate(&grads, &mut head_store, 1.0);
            opt.step(store)?;
            head_opt.step(&mut head_store)?;
            net.update_running_stats(&g, &pass, store);
            total += lv;
            nb += 1;
        }
        if nb == 0 {
            return Err(Error::Config("no batch of at least 2 utterances".into()));
        }
        record.epoch_losses.push(total / nb as f64);
        record.epoch_accuracy.push(hits as f64 / seen as f64);
        info!("pretrain epoch {epoch}: loss {:.5} acc {:.3}", total / nb as f64, hits as f64 / seen as f64);
    }
    record.steps = opt.steps_taken();
    Ok(record)
}

/// P speakers x K utterances per batch. Every item is used at most once per
/// epoch; speakers with the most unused chunks are drawn first.
pub fn make_pk_batches(speaker_of: &[usize], p: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if p < 2 || k < 2 {
        return Err(Error::Config(format!("P and K must be >= 2, got P={p} K={k}")));
    }
    let mut by_spk: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in speaker_of.iter().enumerate() {
        by_spk.entry(s).or_default().push(i);
    }
    let mut rng = SplitMix64::new(seed);
    let mut chunks: Vec<(usize, Vec<Vec<usize>>)> = Vec::new();
    for (s, mut items) in by_spk {
        rng.shuffle(&mut items);
        let c: Vec<Vec<usize>> = items.chunks_exact(k).map(<[usize]>::to_vec).collect();
        if !c.is_empty() {
            chunks.push((s, c));
        }
    }
    if chunks.len() < p {
        return Err(Error::Config(format!(
            "only {} speakers have >= {k} utterances, need P = {p}",
            chunks.len()
        )));
    }
    let mut batches = Vec::new();
    loop {
        let mut live: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].1.is_empty()).collect();
        if live.len() < p {
            break;
        }
        rng.shuffle(&mut live);
        live.sort_by_key(|&i| std::cmp::Reverse(chunks[i].1.len()));
        let mut batch = Vec::with_capacity(p * k);
        for &i in &live[..p] {
            batch.extend(chunks[i].1.pop().expect("live"));
        }
        batches.push(batch);
    }
    rng.shuffle(&mut batches);
    Ok(batches)
}

/// Which objective drives the embedding network during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Triplet loss minus gamma times the keyword loss.
    Adversarial,
    /// Triplet loss only; the keyword head trains on detached embeddings.
    TripletOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub triplet: TripletConfig,
    pub adv: AdvConfig,
    /// Number of training keywords (classes of the keyword head).
    pub n_keywords: usize,
    pub epochs: usize,
    pub p: usize,
    pub k: usize,
    pub sgd: SgdConfig,
    /// Learning rate of the keyword head; defaults to the network's.
    pub head_learning_rate: Option<f64>,
    pub routing: Routing,
    pub objective: Objective,
    /// Epochs without validation improvement before the rate is halved.
    pub lr_patience: usize,
    /// Enrollment size for validation EER.
    pub validation_m: usize,
    /// Accept training speakers with more than one keyword.
    pub allow_multi_keyword: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            triplet: TripletConfig::default(),
            adv: AdvConfig::default(),
            n_keywords: 2,
            epochs: 10,
            p: 4,
            k: 4,
            sgd: SgdConfig::with_lr(0.001),
            head_learning_rate: None,
            routing: Routing::Junction,
            objective: Objective::Adversarial,
            lr_patience: 3,
            validation_m: 5,
            allow_multi_keyword: false,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.triplet.validate()?;
        self.adv.validate()?;
        self.sgd.validate()?;
        if self.n_keywords < 2 {
            return Err(Error::Config(format!("n_keywords must be >= 2, got {}", self.n_keywords)));
        }
        if self.epochs == 0 || self.validation_m == 0 {
            return Err(Error::Config("epochs and validation_m must be positive".into()));
        }
        if let Some(lr) = self.head_learning_rate {
            SgdConfig { learning_rate: lr, ..self.sgd }.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimiser step count at the end of the epoch.
    pub step: u64,
    pub l_triplet: f64,
    pub l_asr: f64,
    pub l_se: f64,
    pub mean_triplets: f64,
    /// Head accuracy on the epoch's training batches.
    pub keyword_accuracy: f64,
    /// Pooled validation EER in percent, when a validation set was given.
    pub validation_eer: Option<f64>,
    pub learning_rate: f64,
    /// Seconds since the start of the run; the only non-deterministic field.
    pub wall_clock_sec: f64,
}

impl EpochRecord {
    pub const TSV_HEADER: &'static str =
        "epoch\tstep\tl_triplet\tl_asr\tl_se\tmean_triplets\tkeyword_accuracy\tvalidation_eer\tlearning_rate\twall_clock_sec";

    pub fn tsv(&self) -> String {
        let v = self.validation_eer.map(|e| format!("{e:.6}")).unwrap_or_else(|| "-".into());
        format!(
            "{}\t{}\t{:.9}\t{:.9}\t{:.9}\t{:.3}\t{:.6}\t{v}\t{:e}\t{:.3}",
            self.epoch,
            self.step,
            self.l_triplet,
            self.l_asr,
            self.l_se,
            self.mean_triplets,
            self.keyword_accuracy,
            self.learning_rate,
            self.wall_clock_sec
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRunRecord {
    pub config_hash: String,
    pub keywords: Vec<String>,
    pub epochs: Vec<EpochRecord>,
}

/// Fine-tune `store` in place and return the trained keyword head.
pub fn finetune_adversarial(
    net: &SeNetwork,
    store: &mut ParameterStore,
    train: &Dataset,
    validation: Option<&Dataset>,
    cfg: &FinetuneConfig,
    config_hash: &str,
) -> Result<(AsrHead, ParameterStore, TrainingRunRecord)> {
    cfg.validate()?;
    if !cfg.allow_multi_keyword {
        check_one_keyword_per_speaker(train)?;
    }
    let keywords = train.keywords();
    if keywords.len() != cfg.n_keywords {
        return Err(Error::Config(format!(
            "training data has {} keywords, config says n_keywords = {}",
            keywords.len(),
            cfg.n_keywords
        )));
    }
    let kw: Vec<&str> = train.utterances.iter().map(|u| u.keyword.as_deref().unwrap_or("")).collect();
    let kw_labels = label_indices(&kw, &keywords)?;
    let speakers = train.speakers();
    let spk: Vec<&str> = train.utterances.iter().map(|u| u.speaker.as_str()).collect();
    let spk_labels = label_indices(&spk, &speakers)?;

    let head_cfg = AsrHeadConfig { n_keywords: cfg.n_keywords, input_dim: net.config().embed_dim };
    let (head, mut head_store) = build_head(head_cfg, SplitMix64::derive(cfg.seed, tag_of("finetune/head")).next_u64())?;
    let mut opt = Sgd::new(cfg.sgd)?;
    let mut head_opt = Sgd::new(SgdConfig { learning_rate: cfg.head_learning_rate.unwrap_or(cfg.sgd.learning_rate), ..cfg.sgd })?;
    let start = Instant::now();
    let mut record = TrainingRunRecord { config_hash: config_hash.to_string(), keywords: keywords.clone(), epochs: Vec::new() };
    let mut best_val = f64::INFINITY;
    let mut stall = 0;

    for epoch in 0..cfg.epochs {
        let batch_seed = SplitMix64::derive(cfg.seed, tag_of(&format!("finetune/epoch/{epoch}"))).next_u64();
        let batches = make_pk_batches(&spk_labels, cfg.p, cfg.k, batch_seed)?;
        let (mut lt, mut la, mut ntrip, mut hits, mut seen) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for batch in &batches {
            let y_kw: Vec<usize> = batch.iter().map(|&i| kw_labels[i]).collect();
            let y_spk: Vec<usize> = batch.iter().map(|&i| spk_labels[i]).collect();
            let step = opt.steps_taken();
            let mut g = Graph::new();
            let x = g.input(net.input_tensor(&stack(train, batch))?);
            let bind = g.bind(store);
            let hbind = g.bind(&head_store);
            let pass = net.forward(&mut g, store, &bind, x, BnMode::Train)?;
            let emb_t = g.value(pass.embeddings).clone();
            let d = emb_t.dim(1);
            let rows: Vec<Vec<f64>> = emb_t.data().chunks(d).map(<[f64]>::to_vec).collect();
            let triplets = mine_violating_triplets(&rows, &y_spk, cfg.triplet.margin)?;
            let tnode = if triplets.is_empty() {
                None
            } else {
                Some(triplet_loss_node(&mut g, pass.embeddings, &triplets, cfg.triplet.margin)?)
            };
            let mut logits_node = None;
            let (l_trip, l_asr) = match cfg.objective {
                Objective::Adversarial => {
                    let (w, b) = head.param_nodes(&head_store, &hbind)?;
                    let r = route_adversarial_gradients(
                        &mut g,
                        pass.embeddings,
                        tnode,
                        |g, e| {
                            let z = g.affine(e, w, b)?;
                            logits_node = Some(z);
                            g.softmax_cross_entropy(z, &y_kw)
                        },
                        cfg.adv.gamma,
                        cfg.routing,
                        Side { binding: &bind, store },
                        Side { binding: &hbind, store: &mut head_store },
                    )?;
                    (r.l_triplet, r.l_asr)
                }
                Objective::TripletOnly => {
                    let lt = match tnode {
                        Some(t) => {
                            let gr = g.backward(t)?;
                            bind.accumulate(&gr, store, 1.0);
                            g.value(t).item()
                        }
                        None => 0.0,
                    };
                    let detached = g.input(emb_t.clone());
                    let z = head.logits(&mut g, &head_store, &hbind, detached)?;
                    logits_node = Some(z);
                    let loss = g.softmax_cross_entropy(z, &y_kw)?;
                    let gr = g.backward(loss)?;
                    hbind.accumulate(&gr, &mut head_store, 1.0);
                    (lt, g.value(loss).item())
                }
            };
            check_finite(l_trip, step, "triplet loss")?;
            check_finite(l_asr, step, "keyword loss")?;
            if let Some(z) = logits_node {
                let zt = g.value(z);
                for (row, &t) in zt.data().chunks(cfg.n_keywords).zip(&y_kw) {
                    hits += usize::from(argmax(row) == t);
                }
                seen += y_kw.len();
            }
            opt.step(store)?;
            head_opt.step(&mut head_store)?;
            net.update_running_stats(&g, &pass, store);
            lt += l_trip;
            la += l_asr;
            ntrip += triplets.len();
        }
        let nb = batches.len().max(1) as f64;
        let validation_eer = match validation {
            Some(v) if !v.is_empty() => {
                let items = embed_dataset(net, store, v)?;
                let (rep, _) = run_protocol_on_embeddings(&items, cfg.validation_m, cfg.seed)?;
                rep.eer_all
            }
            _ => None,
        };
        if let Some(e) = validation_eer {
            if e < best_val {
                best_val = e;
                stall = 0;
            } else {
                stall += 1;
                if stall >= cfg.lr_patience {
                    opt.config.learning_rate *= 0.5;
                    stall = 0;
                    info!("validation stalled, learning rate now {}", opt.config.learning_rate);
                }
            }
        }
        let rec = EpochRecord {
            epoch,
            step: opt.steps_taken(),
            l_triplet: lt / nb,
            l_asr: la / nb,
            l_se: (lt - cfg.adv.gamma * la) / nb,
            mean_triplets: ntrip as f64 / nb,
            keyword_accuracy: if seen == 0 { 0.0 } else { hits as f64 / seen as f64 },
            validation_eer,
            learning_rate: opt.config.learning_rate,
            wall_clock_sec: start.elapsed().as_secs_f64(),
        };
        info!("{}", rec.tsv());
        record.epochs.push(rec);
    }
    Ok((head, head_store, record))
}

/// Per-row keyword labels from a dataset, against a fixed vocabulary.
pub fn keyword_labels(ds: &Dataset, vocab: &[String]) -> Result<Vec<usize>> {
    let kw: Vec<&str> = ds.utterances.iter().map(|u| u.keyword.as_deref().unwrap_or("")).collect();
    label_indices(&kw, vocab)
}

/// Seeded train/test split of labelled rows, stratified per
/// (speaker, keyword) cell: every other item of each shuffled cell is held
/// out.
pub fn stratified_halves(cells: &[(usize, usize)], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, c) in cells.iter().enumerate() {
        groups.entry(*c).or_default().push(i);
    }
    let mut rng = SplitMix64::new(seed);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (_, mut g) in groups {
        rng.shuffle(&mut g);
        for (j, i) in g.into_iter().enumerate() {
            if j % 2 == 0 {
                a.push(i);
            } else {
                b.push(i);
            }
        }
    }
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// Stack embedding rows into a `[B, D]` tensor.
pub fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map(Vec::len).ok_or_else(|| Error::Contract("no rows".into()))?;
    Tensor::new(vec![rows.len(), d], rows.concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pk_single_batch() {
        let b = make_pk_batches(&[0, 0, 1, 1], 2, 2, 0).unwrap();
        assert_eq!(b.len(), 1);
        let mut items = b[0].clone();
        items.sort_unstable();
        assert_eq!(items, vec![0, 1, 2, 3]);
    }

    #[test]
    fn pk_batches_have_p_distinct_speakers() {
        let spk: Vec<usize> = (0..60).map(|i| i % 5).collect();
        for seed in 0..10 {
            let bs = make_pk_batches(&spk, 3, 4, seed).unwrap();
            let mut used = std::collections::HashSet::new();
            for b in &bs {
                assert_eq!(b.len(), 12);
                let mut s: Vec<usize> = b.iter().map(|&i| spk[i]).collect();
                s.dedup();
                assert_eq!(s.len(), 3);
                assert!(b.iter().all(|i| used.insert(*i)));
            }
        }
    }

    #[test]
    fn pk_insufficient() {
        assert!(matches!(make_pk_batches(&[0, 0, 1], 2, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn halves_are_stratified() {
        let cells: Vec<(usize, usize)> = (0..24).map(|i| (i % 3, (i / 3) % 2)).collect();
        let (a, b) = stratified_halves(&cells, 1);
        assert_eq!(a.len(), 12);
        assert_eq!(b.len(), 12);
        for c in [(0, 0), (1, 1), (2, 0)] {
            assert_eq!(a.iter().filter(|&&i| cells[i] == c).count(), 2);
        }
    }
}
