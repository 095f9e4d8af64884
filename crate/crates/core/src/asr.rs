//! Keyword classifier over embedding vectors: a single affine layer with a
//! softmax output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_into, Binding, Graph, NodeId};
use crate::params::ParameterStore;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsrHeadConfig {
    pub n_keywords: usize,
    pub input_dim: usize,
}

impl AsrHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_keywords < 2 {
            return Err(Error::Config(format!("n_keywords must be >= 2, got {}", self.n_keywords)));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordLabel {
    pub index: usize,
    pub name: String,
}

/// Ordered keyword names; the position of a name is its label index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeywordVocab {
    names: Vec<String>,
}

impl KeywordVocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::Data("empty keyword name".into()));
            }
            if !seen.insert(n) {
                return Err(Error::Data(format!("duplicate keyword '{n}'")));
            }
        }
        Ok(KeywordVocab { names })
    }

    /// UTF-8 text, one keyword per line; blank trailing lines are ignored.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::trim_end).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text: String = self.names.iter().map(|n| format!("{n}\n")).collect();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn label(&self, name: &str) -> Option<KeywordLabel> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|index| KeywordLabel { index, name: name.to_string() })
    }
}

#[derive(Clone, Debug)]
pub struct AsrHead {
    cfg: AsrHeadConfig,
}

const WEIGHT: &str = "asr.weight";
const BIAS: &str = "asr.bias";

/// Seeded head parameters: fan-in uniform weights, zero bias.
pub fn build_head(cfg: AsrHeadConfig, seed: u64) -> Result<(AsrHead, ParameterStore)> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(seed);
    let bound = (3.0 / cfg.input_dim as f64).sqrt();
    let n = cfg.n_keywords * cfg.input_dim;
    let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    let mut store = ParameterStore::new();
    store.add(WEIGHT, Tensor::new(vec![cfg.n_keywords, cfg.input_dim], w)?)?;
    store.add(BIAS, Tensor::zeros(vec![cfg.n_keywords]))?;
    Ok((AsrHead { cfg }, store))
}

impl AsrHead {
    pub fn new(cfg: AsrHeadConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AsrHead { cfg })
    }

    pub fn config(&self) -> AsrHeadConfig {
        self.cfg
    }

    /// Logits node for a `[B, D]` embedding node.
    pub fn logits(&self, g: &mut Graph, store: &ParameterStore, bind: &Binding, x: NodeId) -> Result<NodeId> {
        let (w, b) = self.param_nodes(store, bind)?;
        g.affine(x, w, b)
    }

    /// Graph leaves of the weight and bias.
    pub fn param_nodes(&self, store: &ParameterStore, bind: &Binding) -> Result<(NodeId, NodeId)> {
        Ok((bind.node(store.id(WEIGHT)?), bind.node(store.id(BIAS)?)))
    }

    fn raw_logits(&self, store: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cfg.input_dim {
            return Err(Error::Contract(format!(
                "embedding has {} dims, head expects {}",
                x.len(),
                self.cfg.input_dim
            )));
        }
        let w = store.by_name(WEIGHT)?.data();
        let b = store.by_name(BIAS)?.data();
        let d = self.cfg.input_dim;
        Ok((0..self.cfg.n_keywords).map(|k| b[k] + crate::tensor::dot(&w[k * d..][..d], x)).collect())
    }

    /// Keyword posterior for one embedding.
    pub fn classify(&self, store: &ParameterStore, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.raw_logits(store, x)?;
        let mut p = vec![0.0; z.len()];
        softmax_into(&z, &mut p);
        Ok(p)
    }

    /// Argmax keyword; ties go to the lowest index.
    pub fn predict(&self, store: &ParameterStore, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.raw_logits(store, x)?))
    }

    /// Fraction of `embeddings` whose predicted keyword equals the label.
    pub fn keyword_accuracy(&self, store: &ParameterStore, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        if embeddings.is_empty() {
            return Err(Error::Contract("keyword accuracy of an empty set".into()));
        }
        if embeddings.len() != labels.len() {
            return Err(Error::Contract("embeddings and labels differ in length".into()));
        }
        let mut hits = 0usize;
        for (x, &y) in embeddings.iter().zip(labels) {
            if self.predict(store, x)? == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / embeddings.len() as f64)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `-log p[label]`, with `p[label]` clamped at [`PROB_FLOOR`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsrLoss {
    pub value: f64,
    pub clamped: bool,
}

pub fn asr_loss(probs: &[f64], label: usize) -> Result<AsrLoss> {
    let p = *probs
        .get(label)
        .ok_or_else(|| Error::Contract(format!("label {label} out of range for {} classes", probs.len())))?;
    let clamped = p < PROB_FLOOR;
    Ok(AsrLoss { value: -(p.max(PROB_FLOOR)).ln(), clamped })
}

/// Mean loss over a batch and the number of clamped entries.
pub fn batch_asr_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<(f64, usize)> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Contract("batch loss needs equal, non-zero numbers of rows and labels".into()));
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (p, &y) in probs.iter().zip(labels) {
        let l = asr_loss(p, y)?;
        total += l.value;
        clamped += l.clamped as usize;
    }
    Ok((total / probs.len() as f64, clamped))
}

/// Training budget for a keyword probe on frozen embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { steps: 300, learning_rate: 0.5, seed: 0 }
    }
}

/// Fit a fresh head on frozen embeddings by full-batch gradient descent.
pub fn train_probe(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    n_keywords: usize,
    cfg: &ProbeConfig,
) -> Result<(AsrHead, ParameterStore)> {
    let dim = embeddings.first().map(Vec::len).ok_or_else(|| Error::Contract("probe needs data".into()))?;
    let (head, mut store) = build_head(AsrHeadConfig { n_keywords, input_dim: dim }, cfg.seed)?;
    let data: Vec<f64> = embeddings.iter().flatten().copied().collect();
    let x = Tensor::new(vec![embeddings.len(), dim], data)?;
    let mut opt = crate::optim::Sgd::new(crate::optim::SgdConfig {
        learning_rate: cfg.learning_rate,
        momentum: 0.9,
        weight_decay: 0.0,
    })?;
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let bind = g.bind(&store);
        let z = head.logits(&mut g, &store, &bind, xn)?;
        let loss = g.softmax_cross_entropy(z, labels)?;
        let grads = g.backward(loss)?;
        bind.accumulate(&grads, &mut store, 1.0);
        opt.step(&mut store)?;
    }
    Ok((head, store))
}
