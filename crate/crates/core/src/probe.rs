//! Linear probes as mutual-information approximators.
//!
//! A probe is a multinomial logistic regression from a layer's last-position
//! hidden state to the task label. Its held-out cross-entropy upper-bounds
//! `H(Y|X)`, so `H(Y) − CE` is a probe-estimated MI in bits (a lower-bound
//! style surrogate, not the true mutual information).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EVAL_BATCH;
use crate::exec::Exec;
use crate::model::{LayerMask, TransformerModel};
use crate::ops::softmax_slice;
use crate::task::{entropy_bits, Split, TaskDataset};
use crate::tensor::Tensor;

/// Tolerance on `Σ p(x,y) = 1` for [`exact_mi`].
pub const JOINT_SUM_TOL: f64 = 1e-9;
/// Fraction of the task's train split used to fit probes; the rest scores them.
pub const PROBE_TRAIN_FRACTION: f64 = 0.75;

/// `I(X;Y) = Σ p(x,y) log₂ p(x,y) / (p(x) p(y))` with `0 log 0 = 0`.
pub fn exact_mi(joint: &[Vec<f64>]) -> Result<f64> {
    let rows = joint.len();
    let cols = joint.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || joint.iter().any(|r| r.len() != cols) {
        return Err(Error::Domain("joint must be a nonempty rectangular matrix".into()));
    }
    if joint.iter().flatten().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::Domain("joint entries must be finite and nonnegative".into()));
    }
    let total: f64 = joint.iter().flatten().sum();
    if (total - 1.0).abs() > JOINT_SUM_TOL {
        return Err(Error::Domain(format!("joint sums to {total}, not 1")));
    }
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let py: Vec<f64> = (0..cols).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (px[i] * py[j])).log2();
            }
        }
    }
    // Nonnegative in exact arithmetic; rounding can leave a tiny negative.
    Ok(mi.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// L2 penalty on the (standardized-feature) weights.
    pub reg: f64,
    pub iterations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            reg: 1e-4,
            iterations: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeMeta {
    pub reg: f64,
    pub iterations: usize,
    /// Regularized training loss in nats.
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `[d × K]`, acting on raw features.
    pub weights: Tensor,
    pub bias: Tensor,
    pub meta: ProbeMeta,
}

fn check_features(features: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, d) = match features.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::input(format!("probe features must be [n × d], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "probe",
            lhs: features.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if !features.is_finite() {
        return Err(Error::input("probe features contain non-finite values"));
    }
    Ok((n, d))
}

/// Largest eigenvalue of `AᵀA / n` for `A = [Z | 1]` by power iteration.
fn gram_top_eigenvalue(z: &[f64], n: usize, d: usize) -> f64 {
    let m = d + 1;
    let mut gram = vec![0.0; m * m];
    for row in z.chunks(d) {
        for a in 0..m {
            let va = if a < d { row[a] } else { 1.0 };
            for b in 0..m {
                let vb = if b < d { row[b] } else { 1.0 };
                gram[a * m + b] += va * vb;
            }
        }
    }
    gram.iter_mut().for_each(|g| *g /= n as f64);
    let mut v = vec![1.0 / (m as f64).sqrt(); m];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut w = vec![0.0; m];
        for a in 0..m {
            for b in 0..m {
                w[a] += gram[a * m + b] * v[b];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

/// Mean CE (nats) and gradients at `(w, b)` on standardized features.
fn loss_and_grad(z: &[f64], labels: &[usize], d: usize, k: usize, w: &[f64], b: &[f64], reg: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let n = labels.len();
    let mut gw = vec![0.0; d * k];
    let mut gb = vec![0.0; k];
    let mut loss = 0.0;
    let mut logits = vec![0.0; k];
    for (row, &y) in z.chunks(d).zip(labels) {
        logits.copy_from_slice(b);
        for (j, &x) in row.iter().enumerate() {
            for c in 0..k {
                logits[c] += x * w[j * k + c];
            }
        }
        let p = softmax_slice(&logits);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for c in 0..k {
            let r = p[c] - if c == y { 1.0 } else { 0.0 };
            gb[c] += r;
            for (j, &x) in row.iter().enumerate() {
                gw[j * k + c] += x * r;
            }
        }
    }
    let inv = 1.0 / n as f64;
    let mut l2 = 0.0;
    for (g, &wv) in gw.iter_mut().zip(w) {
        *g = *g * inv + 2.0 * reg * wv;
        l2 += wv * wv;
    }
    gb.iter_mut().for_each(|g| *g *= inv);
    (loss * inv + reg * l2, gw, gb)
}

/// Fits a probe by full-batch accelerated gradient descent from zero, with
/// step size `1 / L` from the loss's smoothness bound. Deterministic.
pub fn train_probe(features: &Tensor, labels: &[usize], n_classes: usize, cfg: ProbeConfig) -> Result<LinearProbe> {
    let (n, d) = check_features(features, labels)?;
    if n_classes < 2 {
        return Err(Error::DegenerateTask("probe needs at least 2 classes".into()));
    }
    if n < 10 * n_classes {
        return Err(Error::Usage(format!(
            "probe needs n >= 10·K = {} examples, got {n}",
            10 * n_classes
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::input(format!("label {bad} out of range for {n_classes} classes")));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::DegenerateTask("all probe labels belong to one class".into()));
    }
    if !(cfg.reg >= 0.0) || !cfg.reg.is_finite() {
        return Err(Error::Config(format!("probe regularization must be >= 0, got {}", cfg.reg)));
    }

    let x = features.data();
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0; d];
    for row in x.chunks(d) {
        for j in 0..d {
            std[j] += (row[j] - mean[j]).powi(2);
        }
    }
    std.iter_mut().for_each(|s| {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    });
    let z: Vec<f64> = x
        .chunks(d)
        .flat_map(|row| (0..d).map(|j| (row[j] - mean[j]) / std[j]).collect::<Vec<_>>())
        .collect();

    let k = n_classes;
    let smooth = 0.5 * gram_top_eigenvalue(&z, n, d) + 2.0 * cfg.reg;
    let lr = 1.0 / smooth.max(1e-12);
    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let mut w_prev = w.clone();
    let mut b_prev = b.clone();
    for t in 0..cfg.iterations {
        let mom = t as f64 / (t as f64 + 3.0);
        let yw: Vec<f64> = w.iter().zip(&w_prev).map(|(c, p)| c + mom * (c - p)).collect();
        let yb: Vec<f64> = b.iter().zip(&b_prev).map(|(c, p)| c + mom * (c - p)).collect();
        let (_, gw, gb) = loss_and_grad(&z, labels, d, k, &yw, &yb, cfg.reg);
        w_prev = std::mem::replace(&mut w, yw.iter().zip(&gw).map(|(y, g)| y - lr * g).collect());
        b_prev = std::mem::replace(&mut b, yb.iter().zip(&gb).map(|(y, g)| y - lr * g).collect());
    }
    let (final_loss, _, _) = loss_and_grad(&z, labels, d, k, &w, &b, cfg.reg);
    if !final_loss.is_finite() {
        return Err(Error::Training("probe loss is not finite".into()));
    }

    // Fold the standardization into raw-feature weights.
    let mut raw_w = vec![0.0; d * k];
    let mut raw_b = b.clone();
    for j in 0..d {
        for c in 0..k {
            raw_w[j * k + c] = w[j * k + c] / std[j];
            raw_b[c] -= mean[j] * w[j * k + c] / std[j];
        }
    }
    Ok(LinearProbe {
        weights: Tensor::new(vec![d, k], raw_w)?,
        bias: Tensor::new(vec![k], raw_b)?,
        meta: ProbeMeta {
            reg: cfg.reg,
            iterations: cfg.iterations,
            final_loss,
        },
    })
}

impl LinearProbe {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    /// Class probabilities, one row per example.
    pub fn predict_proba(&self, features: &Tensor) -> Result<Vec<Vec<f64>>> {
        let d = self.weights.shape()[0];
        if features.cols() != d {
            return Err(Error::Dimension {
                op: "probe",
                lhs: features.shape().to_vec(),
                rhs: self.weights.shape().to_vec(),
            });
        }
        let k = self.n_classes();
        let (w, b) = (self.weights.data(), self.bias.data());
        Ok(features
            .data()
            .chunks(d)
            .map(|row| {
                let mut logits = b.to_vec();
                for (j, &x) in row.iter().enumerate() {
                    for c in 0..k {
                        logits[c] += x * w[j * k + c];
                    }
                }
                softmax_slice(&logits)
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub mi_bits: f64,
    pub h_y_bits: f64,
    /// Mean `−log₂ p(y|x)` on the held-out set.
    pub ce_bits: f64,
    pub accuracy: f64,
}

/// `Î = H(Y) − CE_heldout` in bits, clamped to `[0, H(Y)]`.
pub fn estimate_mi(probe: &LinearProbe, features: &Tensor, labels: &[usize]) -> Result<MiEstimate> {
    let (n, _) = check_features(features, labels)?;
    if n == 0 {
        return Err(Error::Usage("MI estimate on an empty set".into()));
    }
    let k = probe.n_classes();
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::input(format!("label {l} out of range for {k} classes")));
        }
        counts[l] += 1;
    }
    let h_y = entropy_bits(&counts);
    let probs = probe.predict_proba(features)?;
    let mut ce = 0.0;
    let mut correct = 0;
    for (p, &y) in probs.iter().zip(labels) {
        ce -= p[y].max(f64::MIN_POSITIVE).log2();
        if crate::eval::predict(p, 0..k) == y {
            correct += 1;
        }
    }
    let ce = ce / n as f64;
    Ok(MiEstimate {
        mi_bits: (h_y - ce).clamp(0.0, h_y),
        h_y_bits: h_y,
        ce_bits: ce,
        accuracy: correct as f64 / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiEntry {
    /// Position in network order (0 = embedding output).
    pub boundary: usize,
    /// Original layer number; 0 for the embedding.
    pub layer_index: usize,
    pub mi_bits: f64,
    pub probe_val_acc: f64,
}

/// Probe-estimated MI at every surviving layer boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiProfile {
    pub entries: Vec<MiEntry>,
    pub h_y_bits: f64,
    pub mask: LayerMask,
}

impl MiProfile {
    pub fn at_layer(&self, layer: usize) -> Option<&MiEntry> {
        self.entries.iter().find(|e| e.layer_index == layer)
    }
}

/// Probe-train and probe-val halves of the task's train split.
pub fn probe_splits(ds: &TaskDataset) -> (Split, Split) {
    let n = ds.train.len();
    let cut = (n as f64 * PROBE_TRAIN_FRACTION).round() as usize;
    (ds.train.subset(0..cut), ds.train.subset(cut..n))
}

/// Last-position hidden states of every example at every surviving boundary.
pub fn boundary_features(model: &TransformerModel, mask: &LayerMask, split: &Split) -> Result<Vec<(usize, Tensor)>> {
    if split.is_empty() {
        return Err(Error::Usage("feature extraction on an empty split".into()));
    }
    let d = model.config().d_model;
    let mut per: Vec<(usize, Vec<f64>)> = Vec::new();
    for start in (0..split.len()).step_by(EVAL_BATCH) {
        let r = start..(start + EVAL_BATCH).min(split.len());
        let hidden = model.forward_hidden_batch(&split.batch(r), mask)?;
        if per.is_empty() {
            per = hidden.iter().map(|b| (b.layer, Vec::new())).collect();
        }
        for (slot, b) in per.iter_mut().zip(hidden) {
            slot.1.extend_from_slice(b.states.data());
        }
    }
    per.into_iter()
        .map(|(layer, data)| Ok((layer, Tensor::new(vec![data.len() / d, d], data)?)))
        .collect()
}

fn probe_one(
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    n_classes: usize,
    cfg: ProbeConfig,
) -> Result<MiEstimate> {
    let probe = train_probe(train_x, train_y, n_classes, cfg)?;
    estimate_mi(&probe, val_x, val_y)
}

/// Fits one probe per surviving boundary on the probe-train half and scores
/// it on the probe-val half.
pub fn mi_profile(
    model: &TransformerModel,
    mask: &LayerMask,
    ds: &TaskDataset,
    cfg: ProbeConfig,
    exec: Exec,
) -> Result<MiProfile> {
    let (ptrain, pval) = probe_splits(ds);
    let train_f = boundary_features(model, mask, &ptrain)?;
    let val_f = boundary_features(model, mask, &pval)?;
    let k = ds.spec.n_classes;
    let idx: Vec<usize> = (0..train_f.len()).collect();
    let estimates = exec.map(&idx, |&i| {
        probe_one(&train_f[i].1, &ptrain.labels, &val_f[i].1, &pval.labels, k, cfg)
    });
    let mut entries = Vec::with_capacity(idx.len());
    let mut h_y = 0.0;
    for (i, est) in estimates.into_iter().enumerate() {
        let est = est?;
        h_y = est.h_y_bits;
        entries.push(MiEntry {
            boundary: i,
            layer_index: train_f[i].0,
            mi_bits: est.mi_bits,
            probe_val_acc: est.accuracy,
        });
    }
    Ok(MiProfile {
        entries,
        h_y_bits: h_y,
        mask: mask.clone(),
    })
}

/// Probe-estimated MI at the output of `layer` under `mask`.
pub fn mi_at_layer(
    model: &TransformerModel,
    mask: &LayerMask,
    layer: usize,
    ds: &TaskDataset,
    cfg: ProbeConfig,
) -> Result<MiEstimate> {
    if mask.contains(layer) {
        return Err(Error::input(format!("layer {layer} is deleted under mask {mask}")));
    }
    let (ptrain, pval) = probe_splits(ds);
    let pick = |f: Vec<(usize, Tensor)>| {
        f.into_iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Range(format!("no boundary for layer {layer}")))
    };
    let tx = pick(boundary_features(model, mask, &ptrain)?)?;
    let vx = pick(boundary_features(model, mask, &pval)?)?;
    probe_one(&tx, &ptrain.labels, &vx, &pval.labels, ds.spec.n_classes, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiDelta {
    pub layer: usize,
    /// MI at the output of layer `layer + 1` with nothing deleted.
    pub before_bits: f64,
    /// MI at the output of layer `layer + 1` with `layer` deleted.
    pub after_bits: f64,
}

impl MiDelta {
    pub fn delta(&self) -> f64 {
        self.after_bits - self.before_bits
    }
}

/// Compares MI at the next layer's output before and after deleting `layer`.
pub fn deletion_mi_delta(model: &TransformerModel, layer: usize, ds: &TaskDataset, cfg: ProbeConfig) -> Result<MiDelta> {
    let n = model.n_layers();
    if layer == 0 || layer >= n {
        return Err(Error::Range(format!(
            "deletion MI delta needs 1 <= layer < {n}, got {layer}"
        )));
    }
    let before = mi_at_layer(model, &LayerMask::empty(), layer + 1, ds, cfg)?;
    let after = mi_at_layer(model, &LayerMask::new([layer], n)?, layer + 1, ds, cfg)?;
    Ok(MiDelta {
        layer,
        before_bits: before.mi_bits,
        after_bits: after.mi_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_mi_examples() {
        let indep = vec![vec![0.3 * 0.6, 0.3 * 0.4], vec![0.7 * 0.6, 0.7 * 0.4]];
        assert!(exact_mi(&indep).unwrap().abs() < 1e-12);
        let diag = vec![vec![0.5, 0.0], vec![0.0, 0.5]];
        assert!((exact_mi(&diag).unwrap() - 1.0).abs() < 1e-15);
        // 0.8·log2(0.4/0.25) + 0.2·log2(0.1/0.25)
        let j = vec![vec![0.4, 0.1], vec![0.1, 0.4]];
        let direct = 0.8 * (1.6f64).log2() + 0.2 * (0.4f64).log2();
        assert!((exact_mi(&j).unwrap() - direct).abs() < 1e-15);
        assert!((exact_mi(&j).unwrap() - 0.278).abs() < 1e-3);
    }

    #[test]
    fn exact_mi_rejects_invalid() {
        assert!(exact_mi(&[vec![0.5, 0.6]]).is_err());
        assert!(exact_mi(&[vec![-0.5, 1.5]]).is_err());
        assert!(exact_mi(&[]).is_err());
        assert!(exact_mi(&[vec![0.5], vec![0.25, 0.25]]).is_err());
    }

    fn blobs(n: usize, sep: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -sep } else { sep };
            data.push(c + rng.gen_range(-1.0..1.0));
            data.push(rng.gen_range(-1.0..1.0));
            labels.push(y);
        }
        (Tensor::new(vec![n, 2], data).unwrap(), labels)
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let (x, y) = blobs(400, 2.0, 1);
        let p = train_probe(&x, &y, 2, ProbeConfig::default()).unwrap();
        let est = estimate_mi(&p, &x, &y).unwrap();
        assert!(est.accuracy >= 0.99);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4000;
        let x = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let p = train_probe(&x.clone(), &y, 2, ProbeConfig::default()).unwrap();
        let vx = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let vy: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let est = estimate_mi(&p, &vx, &vy).unwrap();
        assert!((est.accuracy - 0.5).abs() <= 0.05, "{}", est.accuracy);
        assert!(est.mi_bits < 0.01);
    }

    #[test]
    fn huge_regularization_gives_uniform_predictions() {
        let (x, y) = blobs(200, 2.0, 2);
        let p = train_probe(&x, &y, 2, ProbeConfig { reg: 1e6, iterations: 200 }).unwrap();
        assert!(p.weights.data().iter().all(|w| w.abs() < 1e-4));
        let est = estimate_mi(&p, &x, &y).unwrap();
        assert!(est.mi_bits < 1e-3);
    }

    #[test]
    fn probe_error_paths() {
        let (x, _) = blobs(40, 1.0, 3);
        assert!(matches!(
            train_probe(&x, &vec![1; 40], 2, ProbeConfig::default()),
            Err(Error::DegenerateTask(_))
        ));
        let (x, y) = blobs(10, 1.0, 3);
        assert!(matches!(train_probe(&x, &y, 2, ProbeConfig::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn perfect_and_uniform_probe_limits() {
        let probe = |w: Vec<f64>| LinearProbe {
            weights: Tensor::new(vec![1, 2], w).unwrap(),
            bias: Tensor::zeros(&[2]),
            meta: ProbeMeta { reg: 0.0, iterations: 0, final_loss: 0.0 },
        };
        let x = Tensor::new(vec![4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let y = [0, 1, 0, 1];
        let sharp = estimate_mi(&probe(vec![-50.0, 50.0]), &x, &y).unwrap();
        assert!((sharp.mi_bits - 1.0).abs() < 1e-9);
        let flat = estimate_mi(&probe(vec![0.0, 0.0]), &x, &y).unwrap();
        assert_eq!(flat.mi_bits, 0.0);
        let wrong = estimate_mi(&probe(vec![5.0, -5.0]), &x, &y).unwrap();
        assert_eq!(wrong.mi_bits, 0.0);
    }
}
