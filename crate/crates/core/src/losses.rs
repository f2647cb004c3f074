//! Training objectives: class-weighted cross-entropy, scene-class affinity
//! and Lovász-softmax, each a fused graph operation over `[C, D, H, W]`
//! volumes with invalid voxels excluded.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::{CeNorm, RefineConfig};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Backward, Graph, Tensor, Var};
use crate::voxio::SemGrid;

/// Smallest ratio admitted inside the affinity logarithms.
pub const SCAL_RATIO_FLOOR: f64 = 1e-7;

/// Per-class cross-entropy weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self { w: vec![1.0; classes] }
    }

    /// `w_c = 1 / ln(n_c + eps)` on raw voxel counts. Classes that never
    /// occur get the largest weight among the observed ones.
    pub fn from_counts(counts: &[u64], eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            invalid!("class weight eps must be > 0, got {eps}");
        }
        if counts.iter().all(|&n| n == 0) {
            invalid!("class counts are all zero");
        }
        let mut w: Vec<f64> = counts
            .iter()
            .map(|&n| if n == 0 { f64::NAN } else { 1.0 / (n as f64 + eps).ln() })
            .collect();
        let max = w.iter().copied().filter(|v| !v.is_nan()).fold(f64::MIN, f64::max);
        for v in &mut w {
            if v.is_nan() {
                *v = max;
            }
        }
        Ok(Self { w })
    }
}

/// Voxel counts per class over the valid voxels of `grids`.
pub fn class_counts<'a>(grids: impl IntoIterator<Item = &'a SemGrid>, classes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; classes];
    for grid in grids {
        for (&l, &v) in grid.labels().iter().zip(grid.valid()) {
            if v {
                let Some(c) = counts.get_mut(l as usize) else {
                    invalid!("label {l} outside {classes} classes");
                };
                *c += 1;
            }
        }
    }
    Ok(counts)
}

/// Valid-voxel targets of `grid` checked against a `[C, D, H, W]` tensor.
fn targets(g: &Graph, x: Var, grid: &SemGrid, what: &str) -> Result<(usize, Vec<Option<usize>>)> {
    let [c, d, h, w] = g.value(x).dims4(what)?;
    if [d, h, w] != grid.dims() {
        shape_err!("{what}: spatial dims {:?} vs target {:?}", [d, h, w], grid.dims());
    }
    let mut any = false;
    let mut out = Vec::with_capacity(grid.len());
    for (&l, &v) in grid.labels().iter().zip(grid.valid()) {
        if v {
            if l as usize >= c {
                invalid!("{what}: target label {l} outside {c} classes");
            }
            any = true;
            out.push(Some(l as usize));
        } else {
            out.push(None);
        }
    }
    if !any {
        invalid!("{what}: target has no valid voxels");
    }
    Ok((c, out))
}

struct WeightedCe {
    classes: usize,
    targets: Vec<Option<usize>>,
    weights: Vec<f64>,
    norm: f64,
}

impl Backward for WeightedCe {
    fn name(&self) -> &'static str {
        "weighted_ce"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0].data();
        let n = self.targets.len();
        let scale = grad.item() * self.norm;
        let mut gx = vec![0.0; x.len()];
        let mut p = vec![0.0; self.classes];
        for (i, t) in self.targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let m = (0..self.classes).map(|k| x[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, pk) in p.iter_mut().enumerate() {
                *pk = (x[k * n + i] - m).exp();
                z += *pk;
            }
            let s = scale * self.weights[t];
            for (k, pk) in p.iter().enumerate() {
                let delta = if k == t { 1.0 } else { 0.0 };
                gx[k * n + i] = s * (pk / z - delta);
            }
        }
        vec![Some(Tensor::new(inputs[0].shape(), gx).expect("same shape"))]
    }
}

/// Class-weighted cross-entropy of `[C, D, H, W]` logits against `target`.
///
/// With [`CeNorm::ClassCount`] the weighted sum over voxels is divided by
/// `C`; with [`CeNorm::VoxelMean`] by the number of valid voxels.
pub fn weighted_ce(g: &mut Graph, logits: Var, target: &SemGrid, weights: &ClassWeights, norm: CeNorm) -> Result<Var> {
    let (c, targets) = targets(g, logits, target, "weighted_ce")?;
    if weights.w.len() != c {
        shape_err!("weighted_ce: {} class weights for {c} logit channels", weights.w.len());
    }
    let n = targets.len();
    let x = g.value(logits).data();
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let m = (0..c).map(|k| x[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..c).map(|k| (x[k * n + i] - m).exp()).sum::<f64>().ln();
        total += weights.w[t] * (lse - x[t * n + i]);
        count += 1;
    }
    let norm = match norm {
        CeNorm::ClassCount => 1.0 / c as f64,
        CeNorm::VoxelMean => 1.0 / count as f64,
    };
    let op = WeightedCe {
        classes: c,
        targets,
        weights: weights.w.clone(),
        norm,
    };
    Ok(g.push(Tensor::scalar(total * norm), &[logits], op))
}

/// Sum of per-scale cross-entropies over every scale present in `logits`.
pub fn multiscale_ce(
    g: &mut Graph,
    logits: &BTreeMap<usize, Var>,
    targets: &BTreeMap<usize, SemGrid>,
    weights: &ClassWeights,
    norm: CeNorm,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (s, &l) in logits {
        let Some(t) = targets.get(s) else {
            invalid!("no target for scale {s}");
        };
        let term = weighted_ce(g, l, t, weights, norm)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => invalid!("no scales to supervise"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalMode {
    /// Every class of the probability volume.
    Semantic,
    /// Empty versus occupied, with `p(occupied) = 1 − p(empty)`.
    Geometric,
}

/// Per-class `(Σ p·y, Σ p, Σ y, Σ (1−p)(1−y), Σ (1−y))` over valid voxels.
fn affinity_sums(q: &[Vec<f64>], y: &[Vec<bool>]) -> Vec<[f64; 5]> {
    q.iter()
        .zip(y)
        .map(|(qc, yc)| {
            let mut s = [0.0; 5];
            for (&p, &t) in qc.iter().zip(yc) {
                let t = if t { 1.0 } else { 0.0 };
                s[0] += p * t;
                s[1] += p;
                s[2] += t;
                s[3] += (1.0 - p) * (1.0 - t);
                s[4] += 1.0 - t;
            }
            s
        })
        .collect()
}

/// Affinity loss and its gradient w.r.t. the per-class probabilities `q`.
fn affinity(q: &[Vec<f64>], y: &[Vec<bool>], want_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let classes = q.len() as f64;
    let sums = affinity_sums(q, y);
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = if want_grad { q.iter().map(|c| vec![0.0; c.len()]).collect() } else { Vec::new() };
    for (c, &[nom, sp, sy, spec, sny]) in sums.iter().enumerate() {
        // (numerator, denominator, dnum/dq for y=1, dnum/dq for y=0, ddenom/dq)
        let terms = [
            (nom, sp, 1.0, 0.0, 1.0),
            (nom, sy, 1.0, 0.0, 0.0),
            (spec, sny, 0.0, -1.0, 0.0),
        ];
        for (num, den, dn1, dn0, dd) in terms {
            if den <= 0.0 {
                continue;
            }
            let r = num / den;
            if r < SCAL_RATIO_FLOOR {
                loss -= SCAL_RATIO_FLOOR.ln() / classes;
                continue;
            }
            loss -= r.ln() / classes;
            if want_grad {
                for (gi, &t) in grads[c].iter_mut().zip(&y[c]) {
                    let dn = if t { dn1 } else { dn0 };
                    *gi -= (dn / num - dd / den) / classes;
                }
            }
        }
    }
    (loss, grads)
}

struct Scal {
    mode: ScalMode,
    valid: Vec<usize>,
    labels: Vec<usize>,
}

impl Scal {
    fn class_probs(&self, p: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
        let c = p.shape()[0];
        let n = p.numel() / c;
        let x = p.data();
        match self.mode {
            ScalMode::Semantic => (
                (0..c).map(|k| self.valid.iter().map(|&i| x[k * n + i]).collect()).collect(),
                (0..c).map(|k| self.labels.iter().map(|&l| l == k).collect()).collect(),
            ),
            ScalMode::Geometric => {
                let empty: Vec<f64> = self.valid.iter().map(|&i| x[i]).collect();
                let occ = empty.iter().map(|p| 1.0 - p).collect();
                (
                    vec![empty, occ],
                    vec![self.labels.iter().map(|&l| l == 0).collect(), self.labels.iter().map(|&l| l != 0).collect()],
                )
            }
        }
    }
}

impl Backward for Scal {
    fn name(&self) -> &'static str {
        "scal"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let p = inputs[0];
        let n = p.numel() / p.shape()[0];
        let (q, y) = self.class_probs(p);
        let (_, dq) = affinity(&q, &y, true);
        let s = grad.item();
        let mut gx = vec![0.0; p.numel()];
        match self.mode {
            ScalMode::Semantic => {
                for (k, dk) in dq.iter().enumerate() {
                    for (&i, &d) in self.valid.iter().zip(dk) {
                        gx[k * n + i] = s * d;
                    }
                }
            }
            ScalMode::Geometric => {
                for (j, &i) in self.valid.iter().enumerate() {
                    gx[i] = s * (dq[0][j] - dq[1][j]);
                }
            }
        }
        vec![Some(Tensor::new(p.shape(), gx).expect("same shape"))]
    }
}

/// Scene-class affinity loss on a `[C, D, H, W]` probability volume.
///
/// Each precision, recall and specificity log-ratio is included only when
/// its denominator is positive; ratios below [`SCAL_RATIO_FLOOR`] are
/// clamped and contribute no gradient.
pub fn scal(g: &mut Graph, probs: Var, target: &SemGrid, mode: ScalMode) -> Result<Var> {
    let (c, t) = targets(g, probs, target, "scal")?;
    if c < 2 {
        shape_err!("scal needs at least two classes, got {c}");
    }
    let (valid, labels): (Vec<usize>, Vec<usize>) = t.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l))).unzip();
    let op = Scal { mode, valid, labels };
    let (q, y) = op.class_probs(g.value(probs));
    let (loss, _) = affinity(&q, &y, false);
    Ok(g.push(Tensor::scalar(loss), &[probs], op))
}

/// Jaccard-loss increments along a descending-error ordering of one class.
fn lovasz_increments(sorted_truth: &[bool]) -> Vec<f64> {
    let positives = sorted_truth.iter().filter(|&&t| t).count() as f64;
    let mut out = Vec::with_capacity(sorted_truth.len());
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut prev = 0.0;
    for &t in sorted_truth {
        if t {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let jac = 1.0 - (positives - tp) / (positives + fp);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

struct LovaszClass {
    class: usize,
    /// Valid voxel indices sorted by decreasing error.
    order: Vec<usize>,
    increments: Vec<f64>,
}

struct Lovasz {
    classes: Vec<LovaszClass>,
    labels: Vec<Option<usize>>,
}

impl Backward for Lovasz {
    fn name(&self) -> &'static str {
        "lovasz_softmax"
    }
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let p = inputs[0];
        let n = self.labels.len();
        let s = grad.item() / self.classes.len() as f64;
        let mut gx = vec![0.0; p.numel()];
        for lc in &self.classes {
            for (&i, &inc) in lc.order.iter().zip(&lc.increments) {
                let sign = if self.labels[i] == Some(lc.class) { -1.0 } else { 1.0 };
                gx[lc.class * n + i] = s * inc * sign;
            }
        }
        vec![Some(Tensor::new(p.shape(), gx).expect("same shape"))]
    }
}

/// Lovász-softmax over `[C, D, H, W]` probabilities, averaged over the
/// classes present among the valid target voxels.
pub fn lovasz_softmax(g: &mut Graph, probs: Var, target: &SemGrid) -> Result<Var> {
    let (c, labels) = targets(g, probs, target, "lovasz_softmax")?;
    let n = labels.len();
    let x = g.value(probs).data();
    let valid: Vec<usize> = (0..n).filter(|&i| labels[i].is_some()).collect();
    let mut classes = Vec::new();
    let mut loss = 0.0;
    for k in 0..c {
        if !valid.iter().any(|&i| labels[i] == Some(k)) {
            continue;
        }
        let err = |i: usize| {
            let y = if labels[i] == Some(k) { 1.0 } else { 0.0 };
            (y - x[k * n + i]).abs()
        };
        let mut order = valid.clone();
        order.sort_by(|&a, &b| err(b).total_cmp(&err(a)).then(a.cmp(&b)));
        let truth: Vec<bool> = order.iter().map(|&i| labels[i] == Some(k)).collect();
        let increments = lovasz_increments(&truth);
        loss += order.iter().zip(&increments).map(|(&i, inc)| err(i) * inc).sum::<f64>();
        classes.push(LovaszClass { class: k, order, increments });
    }
    let value = loss / classes.len() as f64;
    Ok(g.push(Tensor::scalar(value), &[probs], Lovasz { classes, labels }))
}

/// Unweighted values of each objective term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub scal_geo: f64,
    pub scal_sem: f64,
    pub lovasz: f64,
    pub total: f64,
}

fn accumulate(g: &mut Graph, acc: Option<Var>, term: Var) -> Result<Var> {
    match acc {
        Some(a) => g.add(a, term),
        None => Ok(term),
    }
}

/// Weighted sum of the training objectives over every supervised scale.
pub fn total_loss(
    g: &mut Graph,
    logits: &BTreeMap<usize, Var>,
    targets: &BTreeMap<usize, SemGrid>,
    weights: &ClassWeights,
    cfg: &RefineConfig,
) -> Result<(Var, LossBreakdown)> {
    let ce = multiscale_ce(g, logits, targets, weights, cfg.ce_norm)?;
    let (mut geo, mut sem, mut lov) = (None, None, None);
    for (s, &l) in logits {
        let t = &targets[s];
        let p = g.softmax_channels(l);
        let term = scal(g, p, t, ScalMode::Geometric)?;
        geo = Some(accumulate(g, geo, term)?);
        let term = scal(g, p, t, ScalMode::Semantic)?;
        sem = Some(accumulate(g, sem, term)?);
        if cfg.lambda_lovasz > 0.0 {
            let term = lovasz_softmax(g, p, t)?;
            lov = Some(accumulate(g, lov, term)?);
        }
    }
    let mut b = LossBreakdown {
        ce: g.value(ce).item(),
        ..Default::default()
    };
    let mut total = g.scale(ce, cfg.lambda_ce);
    for (term, lambda, slot) in [
        (geo, cfg.lambda_scal_geo, &mut b.scal_geo),
        (sem, cfg.lambda_scal_sem, &mut b.scal_sem),
        (lov, cfg.lambda_lovasz, &mut b.lovasz),
    ] {
        if let Some(v) = term {
            *slot = g.value(v).item();
            let scaled = g.scale(v, lambda);
            total = g.add(total, scaled)?;
        }
    }
    b.total = g.value(total).item();
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::testutil::rng;

    fn grid(dims: [usize; 3], classes: usize, labels: Vec<u16>, valid: Vec<bool>) -> SemGrid {
        SemGrid::new(dims, (classes - 1) as u16, labels, valid).unwrap()
    }

    fn random_case(seed: u64, c: usize, dims: [usize; 3]) -> (Tensor, SemGrid) {
        let mut r = rng(seed);
        let n: usize = dims.iter().product();
        let logits = Tensor::randn(&[c, dims[0], dims[1], dims[2]], 1.5, &mut r);
        let labels = (0..n).map(|_| r.random_range(0..c as u16)).collect();
        let mut valid: Vec<bool> = (0..n).map(|_| r.random_bool(0.75)).collect();
        valid[0] = true;
        (logits, grid(dims, c, labels, valid))
    }

    fn softmax_data(logits: &Tensor) -> Tensor {
        let c = logits.shape()[0];
        let n = logits.numel() / c;
        let mut out = logits.clone();
        for i in 0..n {
            let m = (0..c).map(|k| logits.data()[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (logits.data()[k * n + i] - m).exp()).sum();
            for k in 0..c {
                out.data_mut()[k * n + i] = (logits.data()[k * n + i] - m).exp() / z;
            }
        }
        out
    }

    fn ce_value(logits: &Tensor, t: &SemGrid, w: &ClassWeights, norm: CeNorm) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(logits.clone());
        let l = weighted_ce(&mut g, x, t, w, norm).unwrap();
        g.value(l).item()
    }

    fn scal_value(probs: &Tensor, t: &SemGrid, mode: ScalMode) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(probs.clone());
        let l = scal(&mut g, x, t, mode).unwrap();
        g.value(l).item()
    }

    fn lovasz_value(probs: &Tensor, t: &SemGrid) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(probs.clone());
        let l = lovasz_softmax(&mut g, x, t).unwrap();
        g.value(l).item()
    }

    fn one_hot(t: &SemGrid, c: usize, hot: f64) -> Tensor {
        let [d, h, w] = t.dims();
        let n = t.len();
        let mut out = Tensor::zeros(&[c, d, h, w]);
        for (i, &l) in t.labels().iter().enumerate() {
            out.data_mut()[l as usize * n + i] = hot;
        }
        out
    }

    #[test]
    fn class_weight_examples() {
        let w = ClassWeights::from_counts(&[500, 500], 1e-3).unwrap();
        assert_eq!(w.w[0], w.w[1]);
        let w = ClassWeights::from_counts(&[90, 10], 1e-3).unwrap();
        assert!((w.w[0] - 0.22223107287695115).abs() < 1e-15);
        assert!((w.w[1] - 0.43427562249555907).abs() < 1e-15);
        let w = ClassWeights::from_counts(&[2, 5, 40, 300, 7000], 1e-3).unwrap();
        assert!(w.w.windows(2).all(|p| p[0] > p[1]));
        assert!(w.w.iter().all(|v| v.is_finite() && *v > 0.0));
        let w = ClassWeights::from_counts(&[0, 10, 1000], 1e-3).unwrap();
        assert_eq!(w.w[0], w.w[1]);
        assert!(ClassWeights::from_counts(&[0, 0], 1e-3).is_err());
        assert!(ClassWeights::from_counts(&[1, 2], 0.0).is_err());
    }

    #[test]
    fn ce_limits_and_closed_form() {
        let (_, t) = random_case(1, 4, [2, 3, 2]);
        let w = ClassWeights::uniform(4);
        assert!(ce_value(&one_hot(&t, 4, 60.0), &t, &w, CeNorm::ClassCount) < 1e-6);
        let n_valid = t.valid().iter().filter(|&&v| v).count() as f64;
        let flat = Tensor::zeros(&[4, 2, 3, 2]);
        let want = n_valid / 4.0 * 4f64.ln();
        assert!((ce_value(&flat, &t, &w, CeNorm::ClassCount) - want).abs() < 1e-12);
        assert!((ce_value(&flat, &t, &w, CeNorm::VoxelMean) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_straight_loop() {
        for seed in 0..20 {
            let (logits, t) = random_case(seed, 3, [2, 2, 2]);
            let w = ClassWeights { w: vec![0.5, 1.25, 2.0] };
            let p = softmax_data(&logits);
            let mut sum = 0.0;
            let mut count = 0.0;
            for i in 0..8 {
                if t.valid()[i] {
                    let y = t.labels()[i] as usize;
                    sum -= w.w[y] * p.data()[y * 8 + i].ln();
                    count += 1.0;
                }
            }
            assert!((ce_value(&logits, &t, &w, CeNorm::ClassCount) - sum / 3.0).abs() < 1e-12);
            assert!((ce_value(&logits, &t, &w, CeNorm::VoxelMean) - sum / count).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_rejects_empty_targets_and_bad_weights() {
        let (logits, t) = random_case(2, 3, [2, 2, 2]);
        let none = grid([2, 2, 2], 3, t.labels().to_vec(), vec![false; 8]);
        let mut g = Graph::new();
        let x = g.constant(logits);
        assert!(weighted_ce(&mut g, x, &none, &ClassWeights::uniform(3), CeNorm::ClassCount).is_err());
        assert!(weighted_ce(&mut g, x, &t, &ClassWeights::uniform(2), CeNorm::ClassCount).is_err());
        assert!(scal(&mut g, x, &none, ScalMode::Semantic).is_err());
    }

    #[test]
    fn ce_is_class_permutation_equivariant() {
        let (logits, t) = random_case(3, 4, [3, 2, 2]);
        let w = ClassWeights { w: vec![0.3, 1.0, 2.0, 0.7] };
        let perm = [2usize, 0, 3, 1];
        let n = t.len();
        let mut pl = logits.clone();
        for k in 0..4 {
            pl.data_mut()[perm[k] * n..(perm[k] + 1) * n].copy_from_slice(&logits.data()[k * n..(k + 1) * n]);
        }
        let labels = t.labels().iter().map(|&l| perm[l as usize] as u16).collect();
        let pt = grid(t.dims(), 4, labels, t.valid().to_vec());
        let mut pw = vec![0.0; 4];
        for k in 0..4 {
            pw[perm[k]] = w.w[k];
        }
        let pw = ClassWeights { w: pw };
        for norm in [CeNorm::ClassCount, CeNorm::VoxelMean] {
            assert!((ce_value(&logits, &t, &w, norm) - ce_value(&pl, &pt, &pw, norm)).abs() < 1e-12);
        }
    }

    #[test]
    fn multiscale_sums_scales() {
        let w = ClassWeights::uniform(3);
        let mut g = Graph::new();
        let mut logits = BTreeMap::new();
        let mut targets = BTreeMap::new();
        let mut want = 0.0;
        for (k, s) in [1usize, 2, 4, 8].into_iter().enumerate() {
            let e = 8 / s;
            let (l, t) = random_case(10 + k as u64, 3, [e, e, 2]);
            want += ce_value(&l, &t, &w, CeNorm::ClassCount);
            logits.insert(s, g.constant(l));
            targets.insert(s, t);
        }
        let total = multiscale_ce(&mut g, &logits, &targets, &w, CeNorm::ClassCount).unwrap();
        assert!((g.value(total).item() - want).abs() < 1e-12);

        let (l, t) = random_case(20, 3, [2, 2, 2]);
        let one = ce_value(&l, &t, &w, CeNorm::ClassCount);
        let single = BTreeMap::from([(1, g.constant(l.clone()))]);
        let st = BTreeMap::from([(1, t.clone())]);
        let v = multiscale_ce(&mut g, &single, &st, &w, CeNorm::ClassCount).unwrap();
        assert_eq!(g.value(v).item(), one);
        let twice = BTreeMap::from([(1, g.constant(l.clone())), (2, g.constant(l))]);
        let tt = BTreeMap::from([(1, t.clone()), (2, t)]);
        let v = multiscale_ce(&mut g, &twice, &tt, &w, CeNorm::ClassCount).unwrap();
        assert_eq!(g.value(v).item(), 2.0 * one);
        assert!(multiscale_ce(&mut g, &twice, &st, &w, CeNorm::ClassCount).is_err());
    }

    /// Affinity loss by direct summation over per-class precision, recall
    /// and specificity.
    fn scal_oracle(probs: &Tensor, t: &SemGrid, mode: ScalMode) -> f64 {
        let c = probs.shape()[0];
        let n = t.len();
        let (classes, prob, truth): (usize, Box<dyn Fn(usize, usize) -> f64>, Box<dyn Fn(usize, usize) -> bool>) = match mode {
            ScalMode::Semantic => (c, Box::new(|k, i| probs.data()[k * n + i]), Box::new(|k, i| t.labels()[i] as usize == k)),
            ScalMode::Geometric => (
                2,
                Box::new(|k, i| if k == 0 { probs.data()[i] } else { 1.0 - probs.data()[i] }),
                Box::new(|k, i| (t.labels()[i] == 0) == (k == 0)),
            ),
        };
        let mut loss = 0.0;
        for k in 0..classes {
            let (mut tp, mut sp, mut sy, mut tn, mut sn) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                if !t.valid()[i] {
                    continue;
                }
                let p = prob(k, i);
                let y = if truth(k, i) { 1.0 } else { 0.0 };
                tp += p * y;
                sp += p;
                sy += y;
                tn += (1.0 - p) * (1.0 - y);
                sn += 1.0 - y;
            }
            for (num, den) in [(tp, sp), (tp, sy), (tn, sn)] {
                if den > 0.0 {
                    loss -= (num / den).max(1e-7).ln();
                }
            }
        }
        loss / classes as f64
    }

    #[test]
    fn scal_matches_straight_loop() {
        for seed in 0..100 {
            let (logits, t) = random_case(100 + seed, 3, [2, 2, 2]);
            let p = softmax_data(&logits);
            for mode in [ScalMode::Semantic, ScalMode::Geometric] {
                assert!((scal_value(&p, &t, mode) - scal_oracle(&p, &t, mode)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scal_perfect_and_clamped() {
        let (_, t) = random_case(4, 3, [2, 2, 2]);
        for mode in [ScalMode::Semantic, ScalMode::Geometric] {
            assert!(scal_value(&one_hot(&t, 3, 1.0), &t, mode).abs() < 1e-6);
        }
        let labels = vec![0, 1, 1, 0, 1, 0, 0, 1];
        let t = grid([2, 2, 2], 2, labels.clone(), vec![true; 8]);
        let flipped = grid([2, 2, 2], 2, labels.iter().map(|l| 1 - l).collect(), vec![true; 8]);
        let wrong = one_hot(&flipped, 2, 1.0);
        let clamped = -0.5 * 6.0 * SCAL_RATIO_FLOOR.ln();
        for mode in [ScalMode::Semantic, ScalMode::Geometric] {
            assert!((scal_value(&wrong, &t, mode) - clamped).abs() < 1e-12);
        }
    }

    /// Lovász extension from explicit sets: after sorting errors in
    /// decreasing order, the `i`-th voxel is weighted by the increase of the
    /// Jaccard loss `|M| / |P ∪ M|` when it joins the mispredicted set `M`.
    fn lovasz_oracle(probs: &Tensor, t: &SemGrid) -> f64 {
        let c = probs.shape()[0];
        let n = t.len();
        let valid: Vec<usize> = (0..n).filter(|&i| t.valid()[i]).collect();
        let mut total = 0.0;
        let mut present = 0;
        for k in 0..c {
            let positives: HashSet<usize> = valid.iter().copied().filter(|&i| t.labels()[i] as usize == k).collect();
            if positives.is_empty() {
                continue;
            }
            present += 1;
            let err = |i: usize| {
                let y = if positives.contains(&i) { 1.0 } else { 0.0 };
                (y - probs.data()[k * n + i]).abs()
            };
            let mut order = valid.clone();
            order.sort_by(|&a, &b| err(b).partial_cmp(&err(a)).unwrap().then(a.cmp(&b)));
            let jaccard = |m: &HashSet<usize>| m.len() as f64 / positives.union(m).count() as f64;
            let mut m = HashSet::new();
            let mut prev = 0.0;
            for &i in &order {
                m.insert(i);
                let j = jaccard(&m);
                total += err(i) * (j - prev);
                prev = j;
            }
        }
        total / present as f64
    }

    #[test]
    fn lovasz_matches_set_oracle() {
        for seed in 0..30 {
            let classes = if seed % 2 == 0 { 2 } else { 3 };
            let (logits, t) = random_case(300 + seed, classes, [2, 3, 2]);
            let p = softmax_data(&logits);
            assert!((lovasz_value(&p, &t) - lovasz_oracle(&p, &t)).abs() < 1e-12);
        }
    }

    #[test]
    fn lovasz_examples() {
        let (_, t) = random_case(5, 3, [2, 2, 2]);
        assert!(lovasz_value(&one_hot(&t, 3, 1.0), &t).abs() < 1e-12);
        let t = grid([1, 1, 1], 2, vec![1], vec![true]);
        let wrong = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 0.0]).unwrap();
        assert_eq!(lovasz_value(&wrong, &t), 1.0);
    }

    #[test]
    fn invalid_voxels_are_ignored_bitwise() {
        let (logits, t) = random_case(6, 3, [3, 2, 2]);
        let mut other = logits.clone();
        let n = t.len();
        let mut r = rng(7);
        for i in (0..n).filter(|&i| !t.valid()[i]) {
            for k in 0..3 {
                other.data_mut()[k * n + i] = r.random_range(-5.0..5.0);
            }
        }
        let w = ClassWeights { w: vec![0.4, 1.0, 1.7] };
        assert_eq!(ce_value(&logits, &t, &w, CeNorm::ClassCount), ce_value(&other, &t, &w, CeNorm::ClassCount));
        let (p, q) = (softmax_data(&logits), softmax_data(&other));
        for mode in [ScalMode::Semantic, ScalMode::Geometric] {
            assert_eq!(scal_value(&p, &t, mode), scal_value(&q, &t, mode));
        }
        assert_eq!(lovasz_value(&p, &t), lovasz_value(&q, &t));
    }

    fn total_for(cfg: &RefineConfig, seed: u64) -> (f64, LossBreakdown) {
        let mut g = Graph::new();
        let mut logits = BTreeMap::new();
        let mut targets = BTreeMap::new();
        for (k, s) in [1usize, 2].into_iter().enumerate() {
            let e = 4 / s;
            let (l, t) = random_case(seed + k as u64, 3, [e, e, 2]);
            logits.insert(s, g.constant(l));
            targets.insert(s, t);
        }
        let (v, b) = total_loss(&mut g, &logits, &targets, &ClassWeights::uniform(3), cfg).unwrap();
        (g.value(v).item(), b)
    }

    #[test]
    fn total_combines_terms() {
        let zero = RefineConfig {
            lambda_ce: 0.0,
            lambda_scal_geo: 0.0,
            lambda_scal_sem: 0.0,
            lambda_lovasz: 0.0,
            ..Default::default()
        };
        assert_eq!(total_for(&zero, 1).0, 0.0);
        let ones = RefineConfig {
            lambda_ce: 1.0,
            lambda_scal_geo: 1.0,
            lambda_scal_sem: 1.0,
            lambda_lovasz: 0.0,
            ..Default::default()
        };
        let (v, b) = total_for(&ones, 2);
        assert!((v - (b.ce + b.scal_geo + b.scal_sem)).abs() < 1e-12);
        assert_eq!(b.lovasz, 0.0);
        let mixed = RefineConfig {
            lambda_ce: 0.5,
            lambda_scal_geo: 2.0,
            lambda_scal_sem: 0.25,
            lambda_lovasz: 1.5,
            ..Default::default()
        };
        let (v, b) = total_for(&mixed, 3);
        assert!(b.lovasz > 0.0);
        let sum = 0.5 * b.ce + 2.0 * b.scal_geo + 0.25 * b.scal_sem + 1.5 * b.lovasz;
        assert!((v - sum).abs() < 1e-12);
        assert_eq!(b.total, v);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn losses_are_finite_and_nonnegative(seed in 0u64..10_000, classes in 2usize..5) {
            let (logits, t) = random_case(seed, classes, [2, 2, 3]);
            let p = softmax_data(&logits);
            let w = ClassWeights::uniform(classes);
            let values = [
                ce_value(&logits, &t, &w, CeNorm::ClassCount),
                scal_value(&p, &t, ScalMode::Semantic),
                scal_value(&p, &t, ScalMode::Geometric),
                lovasz_value(&p, &t),
            ];
            for v in values {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
        }
    }
}
