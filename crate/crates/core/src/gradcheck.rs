//! Central finite-difference checks of analytic gradients.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of the backward rules it checks.

use serde::Serialize;

use crate::error::Result;
use crate::graph::{Binding, Graph, NodeId};
use crate::params::ParameterStore;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FdConfig {
    pub eps: f64,
    /// Check at most this many coordinates (sampled without replacement).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: f64,
    /// A coordinate is a kink when its one-sided slopes differ by more than
    /// this fraction of the larger one.
    pub kink_ratio: f64,
    /// A coordinate is also a kink when the central differences at `eps`
    /// and `eps / 2` disagree by more than this fraction (plus rounding
    /// noise). For a smooth function they agree to `O(eps^2)`.
    pub halving_tol: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { eps: 1e-5, max_coords: None, seed: 0, abs_floor: 1e-6, kink_ratio: 0.1, halving_tol: 1e-6 }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates where the function is not differentiable at the probe
    /// point; excluded from `max_rel_err`.
    pub kinks: usize,
    pub worst: Option<String>,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

/// Compare the gradients held in `store`'s grad slots with central
/// differences of `f`.
pub fn finite_diff_check<F>(store: &ParameterStore, mut f: F, cfg: &FdConfig) -> Result<FdReport>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let mut coords: Vec<(usize, usize)> = store
        .params()
        .iter()
        .enumerate()
        .flat_map(|(p, param)| (0..param.value.len()).map(move |j| (p, j)))
        .collect();
    if let Some(limit) = cfg.max_coords {
        if limit < coords.len() {
            SplitMix64::new(cfg.seed).shuffle(&mut coords);
            coords.truncate(limit);
            coords.sort_unstable();
        }
    }
    let mut probe = store.clone();
    let f0 = f(&probe)?;
    let mut report = FdReport::default();
    for (p, j) in coords {
        let id = store.ids().nth(p).expect("index in range");
        let orig = store.value(id).data()[j];
        probe.value_mut(id).data_mut()[j] = orig + cfg.eps;
        let fp = f(&probe)?;
        probe.value_mut(id).data_mut()[j] = orig - cfg.eps;
        let fm = f(&probe)?;
        let h = 0.5 * cfg.eps;
        probe.value_mut(id).data_mut()[j] = orig + h;
        let fph = f(&probe)?;
        probe.value_mut(id).data_mut()[j] = orig - h;
        let fmh = f(&probe)?;
        probe.value_mut(id).data_mut()[j] = orig;

        let fwd = (fp - f0) / cfg.eps;
        let bwd = (f0 - fm) / cfg.eps;
        let scale = fwd.abs().max(bwd.abs());
        let numeric = (fp - fm) / (2.0 * cfg.eps);
        let half = (fph - fmh) / (2.0 * h);
        let noise = 64.0 * f64::EPSILON * f0.abs().max(1.0) / h;
        let one_sided = scale > cfg.abs_floor && (fwd - bwd).abs() > cfg.kink_ratio * scale;
        let halving = (numeric - half).abs() > cfg.halving_tol * numeric.abs().max(half.abs()) + noise;
        if one_sided || halving {
            report.kinks += 1;
            continue;
        }
        let analytic = store.grad(id).data()[j];
        let denom = analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(format!("{}[{j}]: analytic {analytic:e}, numeric {numeric:e}", store.param(id).name));
        }
    }
    Ok(report)
}

/// Check a scalar graph function of the parameters in `store`.
///
/// `build` must construct the same computation every time it is called.
pub fn check_graph_fn<B>(store: &ParameterStore, build: B, cfg: &FdConfig) -> Result<FdReport>
where
    B: Fn(&mut Graph, &Binding, &ParameterStore) -> Result<NodeId>,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut g = Graph::new();
    let bind = g.bind(&analytic);
    let root = build(&mut g, &bind, &analytic)?;
    let grads = g.backward(root)?;
    bind.accumulate(&grads, &mut analytic, 1.0);
    finite_diff_check(
        &analytic,
        |s| {
            let mut g = Graph::new();
            let bind = g.bind(s);
            let root = build(&mut g, &bind, s)?;
            Ok(g.value(root).item())
        },
        cfg,
    )
}

/// One line of the standard gradient-check table.
#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub checked: usize,
    pub kinks: usize,
    pub pass: bool,
    pub worst: Option<String>,
}

/// Relative-error bound for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for the whole network.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn random_store(rng: &mut SplitMix64, shapes: &[Vec<usize>]) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (i, sh) in shapes.iter().enumerate() {
        let n = sh.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        s.add(format!("x{i}"), Tensor::new(sh.clone(), data).expect("valid shape")).expect("unique");
    }
    s
}

type OpFn = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// Reduce a (possibly tensor-valued) op output to a scalar through a fixed
/// random projection, then check it.
fn check_op(store: &ParameterStore, op: &OpFn, proj_seed: u64, cfg: &FdConfig) -> Result<FdReport> {
    let mut probe = Graph::new();
    let b = probe.bind(store);
    let nodes: Vec<NodeId> = store.ids().map(|id| b.node(id)).collect();
    let out = op(&mut probe, &nodes)?;
    let shape = probe.value(out).shape().to_vec();
    let mut r = SplitMix64::new(proj_seed);
    let proj = Tensor::new(shape.clone(), (0..shape.iter().product::<usize>().max(1)).map(|_| r.normal()).collect())
        .unwrap_or_else(|_| Tensor::scalar(r.normal()));
    check_graph_fn(
        store,
        |g, bind, s| {
            let nodes: Vec<NodeId> = s.ids().map(|id| bind.node(id)).collect();
            let out = op(g, &nodes)?;
            if g.value(out).len() == 1 {
                return Ok(out);
            }
            let p = g.input(proj.clone());
            let m = g.mul(out, p)?;
            Ok(g.sum(m))
        },
        cfg,
    )
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    use crate::graph::{BnStatistics, Padding};
    let v = |s: &[usize]| s.to_vec();
    let mut cases: Vec<(&'static str, Vec<Vec<usize>>, OpFn)> = vec![
        ("conv1d valid", vec![v(&[2, 3, 11]), v(&[4, 3, 3])], Box::new(|g, x| g.conv1d(x[0], x[1], 1, Padding::Valid))),
        (
            "conv1d same stride 2",
            vec![v(&[2, 3, 10]), v(&[2, 3, 4])],
            Box::new(|g, x| g.conv1d(x[0], x[1], 2, Padding::SameHalf)),
        ),
        (
            "conv1d same unbatched",
            vec![v(&[2, 9]), v(&[3, 2, 5])],
            Box::new(|g, x| g.conv1d(x[0], x[1], 1, Padding::SameHalf)),
        ),
        (
            "batch_norm batch",
            vec![v(&[3, 2, 5]), v(&[2]), v(&[2])],
            Box::new(|g, x| g.batch_norm(x[0], x[1], x[2], BnStatistics::Batch)),
        ),
        (
            "batch_norm running",
            vec![v(&[3, 2, 5]), v(&[2]), v(&[2])],
            Box::new(|g, x| g.batch_norm(x[0], x[1], x[2], BnStatistics::Running { mean: &[0.3, -0.2], var: &[1.5, 0.7] })),
        ),
        ("relu", vec![v(&[12])], Box::new(|g, x| Ok(g.relu(x[0])))),
        ("add", vec![v(&[3, 4]), v(&[3, 4])], Box::new(|g, x| g.add(x[0], x[1]))),
        ("sub", vec![v(&[3, 4]), v(&[3, 4])], Box::new(|g, x| g.sub(x[0], x[1]))),
        ("mul", vec![v(&[3, 4]), v(&[3, 4])], Box::new(|g, x| g.mul(x[0], x[1]))),
        ("scale", vec![v(&[5])], Box::new(|g, x| Ok(g.scale(x[0], -1.7)))),
        ("sum", vec![v(&[2, 3])], Box::new(|g, x| Ok(g.sum(x[0])))),
        ("mean", vec![v(&[2, 3])], Box::new(|g, x| Ok(g.mean(x[0])))),
        ("min_const", vec![v(&[10])], Box::new(|g, x| Ok(g.min_const(x[0], 0.1)))),
        ("affine", vec![v(&[3, 4]), v(&[5, 4]), v(&[5])], Box::new(|g, x| g.affine(x[0], x[1], x[2]))),
        ("softmax", vec![v(&[3, 5])], Box::new(|g, x| Ok(g.softmax(x[0])))),
        (
            "softmax_cross_entropy",
            vec![v(&[4, 5])],
            Box::new(|g, x| g.softmax_cross_entropy(x[0], &[0, 3, 4, 3])),
        ),
        ("l2_normalize", vec![v(&[3, 4])], Box::new(|g, x| g.l2_normalize(x[0]))),
        ("row_cosine", vec![v(&[3, 4]), v(&[3, 4])], Box::new(|g, x| g.row_cosine(x[0], x[1]))),
        ("gather_rows", vec![v(&[5, 3])], Box::new(|g, x| g.gather_rows(x[0], &[4, 0, 4, 2]))),
        ("frame_scores", vec![v(&[2, 3, 6]), v(&[3]), v(&[1])], Box::new(|g, x| g.frame_scores(x[0], x[1], x[2]))),
        (
            "weighted_time_sum",
            vec![v(&[2, 3, 6]), v(&[2, 6])],
            Box::new(|g, x| g.weighted_time_sum(x[0], x[1])),
        ),
        (
            "attention pooling",
            vec![v(&[2, 3, 6]), v(&[3]), v(&[1])],
            Box::new(|g, x| {
                let s = g.frame_scores(x[0], x[1], x[2])?;
                let a = g.softmax(s);
                g.weighted_time_sum(x[0], a)
            }),
        ),
    ];
    cases.push((
        "triplet loss",
        vec![v(&[6, 4])],
        Box::new(|g, x| {
            let e = g.l2_normalize(x[0])?;
            let t = [(0, 1, 2), (0, 1, 3), (2, 3, 4), (4, 5, 0), (5, 4, 1)]
                .map(|(a, p, n)| crate::losses::Triplet { anchor: a, positive: p, negative: n });
            crate::losses::triplet_loss_node(g, e, &t, 0.2)
        }),
    ));
    cases
}

/// Finite-difference table for every differentiable operation, the gradient
/// reversal junction, and the tiny network end to end. Each row is checked at
/// `points` random points.
pub fn standard_suite(seed: u64, points: usize) -> Result<Vec<CheckRow>> {
    let cfg = FdConfig::default();
    let mut rows = Vec::new();
    let finish = |name: &str, tol: f64, rep: FdReport| CheckRow {
        name: name.to_string(),
        tolerance: tol,
        max_rel_err: rep.max_rel_err,
        checked: rep.checked,
        kinks: rep.kinks,
        pass: rep.max_rel_err < tol && rep.checked > 0,
        worst: rep.worst,
    };
    for (ci, (name, shapes, op)) in op_cases().into_iter().enumerate() {
        let mut rng = SplitMix64::derive(seed, crate::rng::tag_of(name));
        let mut total = FdReport::default();
        for pt in 0..points {
            let store = random_store(&mut rng, &shapes);
            total.merge(check_op(&store, &op, (ci * points + pt) as u64, &cfg)?);
        }
        rows.push(finish(name, OP_TOLERANCE, total));
    }
    rows.push(finish("grad_reverse", OP_TOLERANCE, check_grad_reverse(seed, points, &cfg)?));
    rows.push(finish("network end to end", END_TO_END_TOLERANCE, check_network(seed, points, &cfg)?));
    Ok(rows)
}

/// The junction's gradient, rescaled by `-1/factor`, must match the finite
/// differences of the same graph without it.
fn check_grad_reverse(seed: u64, points: usize, cfg: &FdConfig) -> Result<FdReport> {
    let factor = 0.7;
    let mut rng = SplitMix64::derive(seed, crate::rng::tag_of("grad_reverse"));
    let mut total = FdReport::default();
    for _ in 0..points {
        let mut store = random_store(&mut rng, &[vec![3, 4], vec![2, 4]]);
        let f = |g: &mut Graph, x: NodeId, w: NodeId, b: NodeId| -> Result<NodeId> {
            let z = g.affine(x, w, b)?;
            g.softmax_cross_entropy(z, &[1, 0, 1])
        };
        store.add("bias", Tensor::zeros(vec![2]))?;
        let mut g = Graph::new();
        let bind = g.bind(&store);
        let ids: Vec<_> = store.ids().collect();
        let rev = g.grad_reverse(bind.node(ids[0]), factor);
        let loss = f(&mut g, rev, bind.node(ids[1]), bind.node(ids[2]))?;
        let grads = g.backward(loss)?;
        let mut analytic = store.clone();
        analytic.zero_grads();
        bind.accumulate(&grads, &mut analytic, 1.0);
        // Undo the reversal on the upstream input only.
        let gx: Vec<f64> = analytic.grad(ids[0]).data().iter().map(|v| -v / factor).collect();
        analytic.param_mut(ids[0]).grad.data_mut().copy_from_slice(&gx);
        total.merge(finite_diff_check(
            &analytic,
            |s| {
                let mut g = Graph::new();
                let b = g.bind(s);
                let loss = f(&mut g, b.node(ids[0]), b.node(ids[1]), b.node(ids[2]))?;
                Ok(g.value(loss).item())
            },
            cfg,
        )?);
    }
    Ok(total)
}

/// Tiny network, train-mode batch norm, triplet loss plus a keyword head.
fn check_network(seed: u64, points: usize, cfg: &FdConfig) -> Result<FdReport> {
    use crate::network::{build_network, BnMode, SeNetConfig};
    let net_cfg = SeNetConfig::tiny();
    let mut total = FdReport::default();
    let triplets = [(0, 1, 2), (2, 3, 0), (1, 0, 3)]
        .map(|(a, p, n)| crate::losses::Triplet { anchor: a, positive: p, negative: n });
    for pt in 0..points {
        let pseed = SplitMix64::derive(seed, pt as u64).next_u64();
        let (net, mut store) = build_network(&net_cfg, pseed)?;
        let (head, hs) = crate::asr::build_head(
            crate::asr::AsrHeadConfig { n_keywords: 2, input_dim: net_cfg.embed_dim },
            pseed ^ 1,
        )?;
        for p in hs.params() {
            store.add(p.name.clone(), p.value.clone())?;
        }
        let mut r = SplitMix64::new(pseed ^ 2);
        let wav: Vec<f64> = (0..4 * net_cfg.input_len).map(|_| r.uniform_range(-1.0, 1.0)).collect();
        let input = Tensor::new(vec![4, 1, net_cfg.input_len], wav)?;
        let local = FdConfig { max_coords: Some(20), seed: pseed, ..cfg.clone() };
        let rep = check_graph_fn(
            &store,
            |g, bind, s| {
                let x = g.input(input.clone());
                let pass = net.forward(g, s, bind, x, BnMode::Train)?;
                let lt = crate::losses::triplet_loss_node(g, pass.embeddings, &triplets, 2.0)?;
                let z = head.logits(g, s, bind, pass.embeddings)?;
                let la = g.softmax_cross_entropy(z, &[0, 1, 1, 0])?;
                g.add(lt, la)
            },
            &local,
        )?;
        total.merge(rep);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f = sum(a * x^2) with a fixed, gradient 2 a x.
        let mut s = ParameterStore::new();
        let x = s.add("x", Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let coef = [1.5, -0.5, 2.0];
        let grad: Vec<f64> = s.value(x).data().iter().zip(coef).map(|(v, a)| 2.0 * a * v).collect();
        s.accumulate_grad(x, &grad);
        let rep = finite_diff_check(
            &s,
            |s| Ok(s.value(x).data().iter().zip(coef).map(|(v, a)| a * v * v).sum()),
            &FdConfig::default(),
        )
        .unwrap();
        assert_eq!(rep.checked, 3);
        assert!(rep.max_rel_err < 1e-9, "{rep:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut s = ParameterStore::new();
        let x = s.add("x", Tensor::vector(vec![1.0])).unwrap();
        s.accumulate_grad(x, &[2.5]);
        let rep = finite_diff_check(&s, |s| Ok(s.value(x).data()[0].powi(2)), &FdConfig::default()).unwrap();
        assert!(rep.max_rel_err > 0.1);
    }

    #[test]
    fn kink_is_flagged_not_counted() {
        // |x| at x = 0.
        let mut s = ParameterStore::new();
        let x = s.add("x", Tensor::vector(vec![0.0, 1.0])).unwrap();
        s.accumulate_grad(x, &[0.0, 1.0]);
        let rep = finite_diff_check(&s, |s| Ok(s.value(x).data().iter().map(|v| v.abs()).sum()), &FdConfig::default())
            .unwrap();
        assert_eq!(rep.kinks, 1);
        assert_eq!(rep.checked, 1);
        assert!(rep.max_rel_err < 1e-9);
    }

    #[test]
    fn sampling_limits_coordinates() {
        let mut s = ParameterStore::new();
        s.add("x", Tensor::zeros(vec![50])).unwrap();
        let cfg = FdConfig { max_coords: Some(7), ..FdConfig::default() };
        let rep = finite_diff_check(&s, |_| Ok(1.0), &cfg).unwrap();
        assert_eq!(rep.checked, 7);
    }
}
