//! Oracles shared by the integration tests.

/// Brute force: FRR and FAR counted directly at every candidate threshold.
pub fn eer_oracle(t: &[f64], i: &[f64]) -> (f64, f64) {
    let mut all: Vec<f64> = t.iter().chain(i).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut cands = vec![all[0] - 1.0];
    cands.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cands.push(all[all.len() - 1] + 1.0);
    let rates = |tau: f64| {
        let frr = t.iter().filter(|&&s| s <= tau).count() as f64 / t.len() as f64;
        let far = i.iter().filter(|&&s| s > tau).count() as f64 / i.len() as f64;
        (frr, far)
    };
    let (mut pf, mut pa) = rates(cands[0]);
    for w in cands.windows(2) {
        let (f, a) = rates(w[1]);
        if f - a == 0.0 {
            return (f, w[1]);
        }
        if f - a > 0.0 {
            let (d0, d1) = (pf - pa, f - a);
            let s = -d0 / (d1 - d0);
            return (pf + s * (f - pf), w[0] + s * (w[1] - w[0]));
        }
        pf = f;
        pa = a;
    }
    unreachable!("FRR - FAR is 1 at the top candidate")
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}
