//! Cosine triplet loss, violation mining, and the adversarial objective
//! `L_SE = L_triplet - gamma * L_ASR` with its gradient routing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Binding, Graph, NodeId, EPS_NORM};
use crate::network::EmbeddingVector;
use crate::params::ParameterStore;
use crate::tensor::{dot, norm};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    /// Minimum gap between positive and negative cosine similarity.
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { margin: 0.2 }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin <= 2.0) {
            return Err(Error::Config(format!("triplet margin must be in (0, 2], got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvConfig {
    /// Weight of the negated keyword loss.
    pub gamma: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig { gamma: 0.4 }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Batch indices of an (anchor, positive, negative) triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// `a . b / (|a| |b|)`, unclamped.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("cosine of {}- and {}-dim vectors", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= EPS_NORM || nb <= EPS_NORM {
        return Err(Error::DegenerateEmbedding("cosine of a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// `-min(cos(a, p) - cos(a, n), margin)`.
pub fn triplet_loss(
    anchor: &EmbeddingVector,
    positive: &EmbeddingVector,
    negative: &EmbeddingVector,
    margin: f64,
) -> Result<f64> {
    if let (Some(a), Some(p), Some(n)) = (&anchor.speaker, &positive.speaker, &negative.speaker) {
        if a != p {
            return Err(Error::Contract(format!("positive speaker '{p}' differs from anchor '{a}'")));
        }
        if a == n {
            return Err(Error::Contract(format!("negative shares the anchor speaker '{a}'")));
        }
    }
    let ap = cosine(&anchor.values, &positive.values)?;
    let an = cosine(&anchor.values, &negative.values)?;
    Ok(-(ap - an).min(margin))
}

/// All triples in the batch that violate the margin, i.e. with
/// `cos(a, p) - cos(a, n) <= margin`, in ascending (anchor, positive,
/// negative) order.
pub fn mine_violating_triplets(embeddings: &[Vec<f64>], speakers: &[usize], margin: f64) -> Result<Vec<Triplet>> {
    if embeddings.len() != speakers.len() {
        return Err(Error::Contract("embeddings and speaker labels differ in length".into()));
    }
    let n = embeddings.len();
    let mut cos = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let c = cosine(&embeddings[i], &embeddings[j])?;
            cos[i * n + j] = c;
            cos[j * n + i] = c;
        }
    }
    let mut out = Vec::new();
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && speakers[p] == speakers[a]) {
            let ap = cos[a * n + p];
            for neg in (0..n).filter(|&k| speakers[k] != speakers[a]) {
                if ap - cos[a * n + neg] <= margin {
                    out.push(Triplet { anchor: a, positive: p, negative: neg });
                }
            }
        }
    }
    Ok(out)
}

/// Mean triplet loss over `triplets` as a scalar graph node.
pub fn triplet_loss_node(g: &mut Graph, embeddings: NodeId, triplets: &[Triplet], margin: f64) -> Result<NodeId> {
    if triplets.is_empty() {
        return Err(Error::Contract("triplet loss over an empty triplet list".into()));
    }
    let ai: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let pi: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
    let ni: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
    let a = g.gather_rows(embeddings, &ai)?;
    let p = g.gather_rows(embeddings, &pi)?;
    let n = g.gather_rows(embeddings, &ni)?;
    let cap = g.row_cosine(a, p)?;
    let can = g.row_cosine(a, n)?;
    let gap = g.sub(cap, can)?;
    let clipped = g.min_const(gap, margin);
    let neg = g.scale(clipped, -1.0);
    Ok(g.mean(neg))
}

/// Component values of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CombinedLoss {
    pub l_se: f64,
    pub l_triplet: f64,
    pub l_asr: f64,
    /// True when no triplet violated the margin (the triplet term is 0).
    pub no_violations: bool,
}

/// `L_SE = mean triplet loss - gamma * mean keyword loss`.
pub fn combined_loss(triplet_losses: &[f64], asr_losses: &[f64], gamma: f64) -> Result<CombinedLoss> {
    AdvConfig { gamma }.validate()?;
    let no_violations = triplet_losses.is_empty();
    let l_triplet = if no_violations {
        0.0
    } else {
        triplet_losses.iter().sum::<f64>() / triplet_losses.len() as f64
    };
    let l_asr = if asr_losses.is_empty() { 0.0 } else { asr_losses.iter().sum::<f64>() / asr_losses.len() as f64 };
    Ok(CombinedLoss { l_se: l_triplet - gamma * l_asr, l_triplet, l_asr, no_violations })
}

/// How the adversarial gradient reaches the embedding network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Separate backward passes for each loss, combined per parameter group.
    TwoPass,
    /// One backward pass through a sign-flipping node in front of the head.
    Junction,
}

/// Parameters and graph leaves of one network taking part in a step.
pub struct Side<'a> {
    pub binding: &'a Binding,
    pub store: &'a mut ParameterStore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutedLosses {
    pub l_triplet: f64,
    pub l_asr: f64,
}

/// Accumulate gradients for one adversarial step.
///
/// The embedding parameters receive `dL_triplet - gamma * dL_ASR`; the head
/// parameters receive `+dL_ASR`. `asr_loss` builds the keyword loss from the
/// node it is handed: the raw embedding under [`Routing::TwoPass`], the
/// sign-flipping junction under [`Routing::Junction`].
pub fn route_adversarial_gradients<F>(
    g: &mut Graph,
    embeddings: NodeId,
    triplet: Option<NodeId>,
    asr_loss: F,
    gamma: f64,
    routing: Routing,
    se: Side<'_>,
    head: Side<'_>,
) -> Result<RoutedLosses>
where
    F: FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
{
    AdvConfig { gamma }.validate()?;
    let l_triplet = triplet.map(|t| g.value(t).item()).unwrap_or(0.0);
    match routing {
        Routing::TwoPass => {
            let asr = asr_loss(g, embeddings)?;
            if let Some(t) = triplet {
                let gt = g.backward(t)?;
                se.binding.accumulate(&gt, se.store, 1.0);
            }
            let ga = g.backward(asr)?;
            se.binding.accumulate(&ga, se.store, -gamma);
            head.binding.accumulate(&ga, head.store, 1.0);
            Ok(RoutedLosses { l_triplet, l_asr: g.value(asr).item() })
        }
        Routing::Junction => {
            let flipped = g.grad_reverse(embeddings, gamma);
            let asr = asr_loss(g, flipped)?;
            let total = match triplet {
                Some(t) => g.add(t, asr)?,
                None => asr,
            };
            let grads = g.backward(total)?;
            se.binding.accumulate(&grads, se.store, 1.0);
            head.binding.accumulate(&grads, head.store, 1.0);
            Ok(RoutedLosses { l_triplet, l_asr: g.value(asr).item() })
        }
    }
}
