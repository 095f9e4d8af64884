//! Raw-waveform speaker-embedding network.
//!
//! ```text
//! wav [B, 1, T]
//!   -> n_convres_units x ( conv stride s -> BN -> ReLU -> residual block )
//!   -> n_tail_resblocks x residual block
//!   -> attention: one score per frame, softmax over time, weighted sum
//!   -> L2 normalisation
//! ```
//!
//! A residual block is `x + BN(conv(ReLU(BN(conv(x)))))` with stride-1,
//! length-preserving convolutions.

use serde::{Deserialize, Serialize};

use crate::data::Waveform;
use crate::error::{Error, Result};
use crate::graph::{Binding, BnStatistics, Graph, NodeId, Padding};
use crate::params::ParameterStore;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Running-statistic momentum of every batch-norm layer.
pub const BN_MOMENTUM: f64 = 0.9;

/// Inputs whose peak magnitude is below this are rejected as silent.
const SILENCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Normalise with batch statistics and update the running ones.
    Train,
    /// Normalise with frozen running statistics.
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeNetConfig {
    pub input_len: usize,
    pub n_convres_units: usize,
    pub n_tail_resblocks: usize,
    pub embed_dim: usize,
    pub channel_schedule: Vec<usize>,
    pub kernel_size_unit: usize,
    pub kernel_size_resblock: usize,
    pub stride_per_unit: usize,
}

impl Default for SeNetConfig {
    /// Ten conv-res units doubling 1 -> 128 channels over the first seven,
    /// five tail blocks, 128-dimensional output, 2 s of 16 kHz audio.
    fn default() -> Self {
        SeNetConfig {
            input_len: 32_000,
            n_convres_units: 10,
            n_tail_resblocks: 5,
            embed_dim: 128,
            channel_schedule: vec![2, 4, 8, 16, 32, 64, 128, 128, 128, 128],
            kernel_size_unit: 5,
            kernel_size_resblock: 3,
            stride_per_unit: 2,
        }
    }
}

impl SeNetConfig {
    /// Smallest useful configuration; used by property tests.
    pub fn tiny() -> Self {
        SeNetConfig {
            input_len: 64,
            n_convres_units: 2,
            n_tail_resblocks: 1,
            embed_dim: 8,
            channel_schedule: vec![4, 8],
            kernel_size_unit: 5,
            kernel_size_resblock: 3,
            stride_per_unit: 2,
        }
    }

    /// Channel schedule that doubles from 1 up to `embed_dim` and then stays
    /// flat, for `n_units` units.
    pub fn doubling_schedule(n_units: usize, embed_dim: usize) -> Vec<usize> {
        let mut ch = 1;
        (0..n_units)
            .map(|_| {
                ch = (ch * 2).min(embed_dim);
                ch
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_convres_units == 0 {
            return bad("n_convres_units must be >= 1".into());
        }
        if self.channel_schedule.len() != self.n_convres_units {
            return bad(format!(
                "channel_schedule has {} entries for {} units",
                self.channel_schedule.len(),
                self.n_convres_units
            ));
        }
        if self.channel_schedule.last() != Some(&self.embed_dim) {
            return bad(format!(
                "last channel count {:?} must equal embed_dim {}",
                self.channel_schedule.last(),
                self.embed_dim
            ));
        }
        if self.channel_schedule.contains(&0) || self.embed_dim == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.kernel_size_unit == 0 || self.kernel_size_resblock == 0 || self.stride_per_unit == 0 {
            return bad("kernel sizes and stride must be positive".into());
        }
        let shrink = (self.stride_per_unit as u128).checked_pow(self.n_convres_units as u32);
        if shrink.is_none_or(|s| (self.input_len as u128) < s) {
            return bad(format!(
                "input_len {} does not survive {} stride-{} units",
                self.input_len, self.n_convres_units, self.stride_per_unit
            ));
        }
        Ok(())
    }

    /// Number of time frames entering the attention layer.
    pub fn output_frames(&self) -> usize {
        (0..self.n_convres_units).fold(self.input_len, |t, _| t.div_ceil(self.stride_per_unit))
    }
}

/// Unit-norm speaker representation of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub speaker: Option<String>,
    pub keyword: Option<String>,
    pub source: String,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Graph nodes produced by one forward pass.
pub struct ForwardPass {
    /// `[B, D]` unit-norm rows.
    pub embeddings: NodeId,
    /// `[B, D]` before normalisation.
    pub pooled: NodeId,
    /// `[B, T']` attention weights.
    pub attention: NodeId,
    bn_nodes: Vec<(String, NodeId)>,
}

#[derive(Clone, Debug)]
pub struct SeNetwork {
    cfg: SeNetConfig,
}

fn unit_prefix(i: usize) -> String {
    format!("unit{i}")
}

fn tail_prefix(j: usize) -> String {
    format!("tail{j}")
}

fn fan_in_uniform(rng: &mut SplitMix64, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape, data).expect("shape matches count")
}

/// Build the network and its seeded initial parameters.
pub fn build_network(cfg: &SeNetConfig, seed: u64) -> Result<(SeNetwork, ParameterStore)> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(seed);
    let mut store = ParameterStore::new();
    let add_bn = |store: &mut ParameterStore, name: &str, ch: usize| -> Result<()> {
        store.add(format!("{name}.gamma"), Tensor::full(vec![ch], 1.0))?;
        store.add(format!("{name}.beta"), Tensor::zeros(vec![ch]))?;
        store.add_bn(name, ch);
        Ok(())
    };
    let add_block = |store: &mut ParameterStore, rng: &mut SplitMix64, p: &str, ch: usize| -> Result<()> {
        let k = cfg.kernel_size_resblock;
        store.add(format!("{p}.conv1.weight"), fan_in_uniform(rng, vec![ch, ch, k], ch * k))?;
        add_bn(store, &format!("{p}.bn1"), ch)?;
        store.add(format!("{p}.conv2.weight"), fan_in_uniform(rng, vec![ch, ch, k], ch * k))?;
        add_bn(store, &format!("{p}.bn2"), ch)?;
        Ok(())
    };
    let mut c_in = 1;
    for (i, &c_out) in cfg.channel_schedule.iter().enumerate() {
        let p = unit_prefix(i);
        let k = cfg.kernel_size_unit;
        store.add(format!("{p}.conv.weight"), fan_in_uniform(&mut rng, vec![c_out, c_in, k], c_in * k))?;
        add_bn(&mut store, &format!("{p}.bn"), c_out)?;
        add_block(&mut store, &mut rng, &format!("{p}.res"), c_out)?;
        c_in = c_out;
    }
    for j in 0..cfg.n_tail_resblocks {
        add_block(&mut store, &mut rng, &tail_prefix(j), cfg.embed_dim)?;
    }
    let d = cfg.embed_dim;
    store.add("attn.weight", fan_in_uniform(&mut rng, vec![d], d))?;
    store.add("attn.bias", Tensor::zeros(vec![1]))?;
    Ok((SeNetwork { cfg: cfg.clone() }, store))
}

impl SeNetwork {
    /// Wrap a configuration for use with an existing (e.g. loaded) store.
    pub fn new(cfg: SeNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SeNetwork { cfg })
    }

    pub fn config(&self) -> &SeNetConfig {
        &self.cfg
    }

    /// Stack equal-length waveforms into a `[B, 1, T]` tensor.
    pub fn input_tensor(&self, wavs: &[&[f64]]) -> Result<Tensor> {
        if wavs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let t = self.cfg.input_len;
        let mut data = Vec::with_capacity(wavs.len() * t);
        for (i, w) in wavs.iter().enumerate() {
            if w.len() != t {
                return Err(Error::Contract(format!(
                    "waveform {i} has {} samples, network expects {t}",
                    w.len()
                )));
            }
            if w.iter().all(|s| s.abs() < SILENCE) {
                return Err(Error::DegenerateEmbedding(format!("waveform {i} is silent")));
            }
            data.extend_from_slice(w);
        }
        Tensor::new(vec![wavs.len(), 1, t], data)
    }

    fn bn(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        bind: &Binding,
        x: NodeId,
        name: &str,
        mode: BnMode,
        record: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        let gamma = bind.node(store.id(&format!("{name}.gamma"))?);
        let beta = bind.node(store.id(&format!("{name}.beta"))?);
        let node = match mode {
            BnMode::Train => g.batch_norm(x, gamma, beta, BnStatistics::Batch)?,
            BnMode::Infer => {
                let st = store
                    .bn_stats(name)
                    .filter(|s| s.initialized)
                    .ok_or_else(|| Error::UninitializedStatistics(name.to_string()))?;
                g.batch_norm(x, gamma, beta, BnStatistics::Running { mean: &st.mean, var: &st.var })?
            }
        };
        record.push((name.to_string(), node));
        Ok(node)
    }

    fn residual_block(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        bind: &Binding,
        x: NodeId,
        p: &str,
        mode: BnMode,
        record: &mut Vec<(String, NodeId)>,
    ) -> Result<NodeId> {
        let w1 = bind.node(store.id(&format!("{p}.conv1.weight"))?);
        let w2 = bind.node(store.id(&format!("{p}.conv2.weight"))?);
        let h = g.conv1d(x, w1, 1, Padding::SameHalf)?;
        let h = self.bn(g, store, bind, h, &format!("{p}.bn1"), mode, record)?;
        let h = g.relu(h);
        let h = g.conv1d(h, w2, 1, Padding::SameHalf)?;
        let h = self.bn(g, store, bind, h, &format!("{p}.bn2"), mode, record)?;
        g.add(x, h)
    }

    /// Record the forward pass of a `[B, 1, T]` input node.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        bind: &Binding,
        input: NodeId,
        mode: BnMode,
    ) -> Result<ForwardPass> {
        let mut record = Vec::new();
        let mut x = input;
        for i in 0..self.cfg.n_convres_units {
            let p = unit_prefix(i);
            let w = bind.node(store.id(&format!("{p}.conv.weight"))?);
            x = g.conv1d(x, w, self.cfg.stride_per_unit, Padding::SameHalf)?;
            x = self.bn(g, store, bind, x, &format!("{p}.bn"), mode, &mut record)?;
            x = g.relu(x);
            x = self.residual_block(g, store, bind, x, &format!("{p}.res"), mode, &mut record)?;
        }
        for j in 0..self.cfg.n_tail_resblocks {
            x = self.residual_block(g, store, bind, x, &tail_prefix(j), mode, &mut record)?;
        }
        let aw = bind.node(store.id("attn.weight")?);
        let ab = bind.node(store.id("attn.bias")?);
        let scores = g.frame_scores(x, aw, ab)?;
        let attention = g.softmax(scores);
        let pooled = g.weighted_time_sum(x, attention)?;
        let embeddings = g.l2_normalize(pooled)?;
        Ok(ForwardPass { embeddings, pooled, attention, bn_nodes: record })
    }

    /// Fold the batch statistics of a train-mode pass into the running ones.
    pub fn update_running_stats(&self, g: &Graph, pass: &ForwardPass, store: &mut ParameterStore) {
        for (name, node) in &pass.bn_nodes {
            if let (Some((m, v)), Some(st)) = (g.batch_stats(*node), store.bn_stats_mut(name)) {
                st.update(m, v, BN_MOMENTUM);
            }
        }
    }

    /// Embed raw sample slices. Train mode also updates running statistics.
    pub fn embed_samples(&self, store: &mut ParameterStore, wavs: &[&[f64]], mode: BnMode) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let input = g.input(self.input_tensor(wavs)?);
        let bind = g.bind(store);
        let pass = self.forward(&mut g, store, &bind, input, mode)?;
        if mode == BnMode::Train {
            self.update_running_stats(&g, &pass, store);
        }
        Ok(rows(g.value(pass.embeddings)))
    }

    /// Infer-mode embedding with a frozen store, in chunks of `chunk` items.
    pub fn embed_frozen(&self, store: &ParameterStore, wavs: &[&[f64]], chunk: usize) -> Result<Vec<Vec<f64>>> {
        if wavs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut out = Vec::with_capacity(wavs.len());
        for part in wavs.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let input = g.input(self.input_tensor(part)?);
            let bind = g.bind(store);
            let pass = self.forward(&mut g, store, &bind, input, BnMode::Infer)?;
            out.extend(rows(g.value(pass.embeddings)));
        }
        Ok(out)
    }

    pub fn embed(&self, store: &mut ParameterStore, wav: &Waveform, mode: BnMode) -> Result<EmbeddingVector> {
        let mut v = self.embed_batch(store, std::slice::from_ref(wav), mode)?;
        Ok(v.pop().expect("one item"))
    }

    /// Order-preserving batch embedding. In train mode the batch-norm
    /// statistics couple all items of the batch.
    pub fn embed_batch(&self, store: &mut ParameterStore, wavs: &[Waveform], mode: BnMode) -> Result<Vec<EmbeddingVector>> {
        let slices: Vec<&[f64]> = wavs.iter().map(|w| w.samples.as_slice()).collect();
        let vals = self.embed_samples(store, &slices, mode)?;
        Ok(vals
            .into_iter()
            .zip(wavs)
            .map(|(values, w)| EmbeddingVector { values, speaker: None, keyword: None, source: w.source.clone() })
            .collect())
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.dim(t.rank() - 1);
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav(seed: u64, len: usize) -> Waveform {
        let mut r = SplitMix64::new(seed);
        Waveform::new((0..len).map(|_| r.uniform_range(-1.0, 1.0)).collect(), 16_000, format!("w{seed}")).unwrap()
    }

    #[test]
    fn default_schedule_doubles_then_holds() {
        let cfg = SeNetConfig::default();
        assert_eq!(cfg.channel_schedule, SeNetConfig::doubling_schedule(10, 128));
        for (k, &c) in cfg.channel_schedule.iter().enumerate() {
            let unit = k + 1;
            let expect = if unit <= 7 { 1 << unit } else { 128 };
            assert_eq!(c, expect, "unit {unit}");
        }
        cfg.validate().unwrap();
        // 32000 halved ten times with ceiling division.
        assert_eq!(cfg.output_frames(), 32);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = SeNetConfig::tiny();
        c.channel_schedule = vec![4];
        assert!(matches!(build_network(&c, 0), Err(Error::Config(_))));
        let mut c = SeNetConfig::tiny();
        c.channel_schedule = vec![4, 16];
        assert!(build_network(&c, 0).is_err());
        let mut c = SeNetConfig::tiny();
        c.input_len = 3;
        assert!(build_network(&c, 0).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let (_, a) = build_network(&SeNetConfig::tiny(), 42).unwrap();
        let (_, b) = build_network(&SeNetConfig::tiny(), 42).unwrap();
        let (_, c) = build_network(&SeNetConfig::tiny(), 43).unwrap();
        let bits = |s: &ParameterStore| -> Vec<u64> {
            s.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn tiny_embeds_to_unit_norm() {
        let (net, mut store) = build_network(&SeNetConfig::tiny(), 1).unwrap();
        let wavs: Vec<Waveform> = (0..3).map(|i| wav(i, 64)).collect();
        let embs = net.embed_batch(&mut store, &wavs, BnMode::Train).unwrap();
        for e in &embs {
            assert_eq!(e.dim(), 8);
            assert!((crate::tensor::norm(&e.values) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn infer_before_training_fails() {
        let (net, mut store) = build_network(&SeNetConfig::tiny(), 1).unwrap();
        let r = net.embed(&mut store, &wav(0, 64), BnMode::Infer);
        assert!(matches!(r, Err(Error::UninitializedStatistics(_))));
    }

    #[test]
    fn wrong_length_and_silence_rejected() {
        let (net, mut store) = build_network(&SeNetConfig::tiny(), 1).unwrap();
        assert!(matches!(net.embed(&mut store, &wav(0, 63), BnMode::Train), Err(Error::Contract(_))));
        let silent = Waveform::new(vec![0.0; 64], 16_000, "z").unwrap();
        assert!(matches!(net.embed(&mut store, &silent, BnMode::Train), Err(Error::DegenerateEmbedding(_))));
        assert!(matches!(net.embed_batch(&mut store, &[], BnMode::Train), Err(Error::Contract(_))));
    }
}
