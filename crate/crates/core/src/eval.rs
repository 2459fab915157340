//! Accuracy, speedup and percentage-gain measurement.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{LayerMask, TransformerModel};
use crate::task::{Split, TaskSpec};
use crate::tensor::Tensor;

/// Examples per forward call when scoring a split.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub n_examples: usize,
    pub n_correct: usize,
    /// Seconds per example over the scoring pass.
    pub wall_time: f64,
    pub speedup_measured: f64,
    pub speedup_proxy: f64,
}

impl EvalResult {
    /// Sets the measured speedup against a baseline per-example time.
    pub fn relative_to(mut self, baseline_wall_time: f64) -> Self {
        self.speedup_measured = if self.wall_time > 0.0 {
            baseline_wall_time / self.wall_time
        } else {
            0.0
        };
        self
    }
}

/// `L / (L − #D)`.
pub fn speedup_proxy(n_layers: usize, deleted: usize) -> f64 {
    n_layers as f64 / (n_layers - deleted) as f64
}

/// Argmax over the answer-token logits of one row; ties go to the lowest id.
pub fn predict(logits: &[f64], answers: std::ops::Range<usize>) -> usize {
    let base = answers.start;
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits[answers].iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    debug_assert!(base + best < logits.len());
    best
}

/// Number of rows of `logits` whose predicted label matches.
pub fn count_correct(logits: &Tensor, labels: &[usize], spec: &TaskSpec) -> usize {
    (0..logits.rows())
        .filter(|&r| predict(logits.row(r), spec.answer_tokens()) == labels[r])
        .count()
}

fn chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(EVAL_BATCH)
        .map(|s| s..(s + EVAL_BATCH).min(n))
        .collect()
}

/// Correct-prediction count of `model` under `mask` on `split`.
pub fn correct_count(
    model: &TransformerModel,
    mask: &LayerMask,
    split: &Split,
    spec: &TaskSpec,
    exec: Exec,
) -> Result<usize> {
    let parts = exec.map(&chunks(split.len()), |r| -> Result<usize> {
        let logits = model.forward_last(&split.batch(r.clone()), mask)?;
        Ok(count_correct(&logits, &split.labels[r.clone()], spec))
    });
    parts.into_iter().sum()
}

pub fn accuracy(
    model: &TransformerModel,
    mask: &LayerMask,
    split: &Split,
    spec: &TaskSpec,
    exec: Exec,
) -> Result<EvalResult> {
    if split.is_empty() {
        return Err(Error::Usage("accuracy on an empty split".into()));
    }
    let start = Instant::now();
    let n_correct = correct_count(model, mask, split, spec, exec)?;
    let elapsed = start.elapsed().as_secs_f64();
    let n = split.len();
    Ok(EvalResult {
        accuracy: n_correct as f64 / n as f64,
        n_examples: n,
        n_correct,
        wall_time: elapsed / n as f64,
        speedup_measured: 1.0,
        speedup_proxy: speedup_proxy(model.n_layers(), mask.len()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupMeasurement {
    pub measured: f64,
    pub proxy: f64,
    pub full_median_seconds: f64,
    pub masked_median_seconds: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn timed_pass(model: &TransformerModel, mask: &LayerMask, split: &Split) -> Result<f64> {
    let start = Instant::now();
    for toks in &split.tokens {
        std::hint::black_box(model.forward_last(&[toks.as_slice()], mask)?);
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Median-of-`reps` serial wall time (batch size 1) of the full model
/// divided by that of the masked model.
pub fn speedup(
    model: &TransformerModel,
    mask: &LayerMask,
    split: &Split,
    reps: usize,
    warmup: usize,
) -> Result<SpeedupMeasurement> {
    if reps < 3 || warmup < 1 {
        return Err(Error::Usage(format!(
            "speedup needs reps >= 3 and warmup >= 1, got {reps} and {warmup}"
        )));
    }
    if split.is_empty() {
        return Err(Error::Usage("speedup on an empty split".into()));
    }
    mask.validate(model.n_layers())?;
    let full = LayerMask::empty();
    for _ in 0..warmup {
        timed_pass(model, &full, split)?;
        timed_pass(model, mask, split)?;
    }
    let mut full_t = Vec::with_capacity(reps);
    let mut mask_t = Vec::with_capacity(reps);
    for _ in 0..reps {
        full_t.push(timed_pass(model, &full, split)?);
        mask_t.push(timed_pass(model, mask, split)?);
    }
    let (f, m) = (median(full_t), median(mask_t));
    Ok(SpeedupMeasurement {
        measured: if m > 0.0 { f / m } else { 0.0 },
        proxy: speedup_proxy(model.n_layers(), mask.len()),
        full_median_seconds: f,
        masked_median_seconds: m,
    })
}

/// `(best − baseline) / baseline × 100`.
pub fn percentage_gain(best_acc: f64, baseline_acc: f64) -> Result<f64> {
    if !(baseline_acc > 0.0) || !baseline_acc.is_finite() || !best_acc.is_finite() {
        return Err(Error::Domain(format!(
            "percentage gain undefined for baseline accuracy {baseline_acc}"
        )));
    }
    Ok((best_acc - baseline_acc) / baseline_acc * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::task::{generate, TaskKind};

    fn round2(x: f64) -> f64 {
        (x * 100.0).round() / 100.0
    }

    #[test]
    fn gain_examples() {
        assert_eq!(round2(percentage_gain(90.55, 87.00).unwrap()), 4.08);
        assert_eq!(round2(percentage_gain(37.08, 15.07).unwrap()), 146.05);
        assert_eq!(percentage_gain(0.7, 0.7).unwrap(), 0.0);
        assert!(matches!(percentage_gain(0.5, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn proxy_examples() {
        assert_eq!(speedup_proxy(32, 0), 1.0);
        assert!((speedup_proxy(32, 8) - 32.0 / 24.0).abs() < 1e-15);
        let mut prev = 0.0;
        for d in 0..6 {
            let s = speedup_proxy(6, d);
            assert!(s > prev);
            prev = s;
        }
    }

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict(&[9.0, 1.0, 1.0, 0.5], 1..4), 0);
        assert_eq!(predict(&[0.0, 0.0, 2.0], 0..3), 2);
    }

    fn constant_model(spec: &TaskSpec) -> TransformerModel {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            vocab_size: spec.vocab_size(),
            max_seq_len: spec.seq_len,
            seed: 3,
        };
        let mut m = TransformerModel::init(cfg).unwrap();
        // All logits tie, so every prediction is answer token 0.
        m.weights_mut().w_out = Tensor::zeros(&[8, spec.vocab_size()]);
        m
    }

    #[test]
    fn constant_model_scores_label_zero_fraction() {
        let spec = TaskSpec {
            n_train: 10,
            n_val: 10,
            n_test: 10,
            ..TaskSpec::default_for(TaskKind::CopyLast, 0)
        };
        let ds = generate(&spec).unwrap();
        let mut split = ds.val.clone();
        // force 4 of 10 labels to 0
        for (i, (t, l)) in split.tokens.iter_mut().zip(split.labels.iter_mut()).enumerate() {
            let y = if i < 4 { 0 } else { 1 + i % 7 };
            *t.last_mut().unwrap() = y;
            *l = y;
        }
        let m = constant_model(&spec);
        let r = accuracy(&m, &LayerMask::empty(), &split, &spec, Exec::Sequential).unwrap();
        assert_eq!(r.n_correct, 4);
        assert_eq!(r.accuracy, 0.4);
        assert_eq!(r.speedup_proxy, 1.0);
    }

    #[test]
    fn empty_split_is_usage_error() {
        let spec = TaskSpec::default_for(TaskKind::CopyLast, 0);
        let m = constant_model(&spec);
        let err = accuracy(&m, &LayerMask::empty(), &Split::default(), &spec, Exec::Sequential);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn speedup_rejects_few_reps() {
        let spec = TaskSpec::default_for(TaskKind::CopyLast, 0);
        let m = constant_model(&spec);
        let ds = generate(&TaskSpec { n_train: 5, n_val: 5, n_test: 5, ..spec }).unwrap();
        assert!(speedup(&m, &LayerMask::empty(), &ds.val, 2, 1).is_err());
        assert!(speedup(&m, &LayerMask::empty(), &ds.val, 3, 0).is_err());
    }

    #[test]
    fn eval_result_serializes_six_fields() {
        let r = EvalResult {
            accuracy: 0.5,
            n_examples: 2,
            n_correct: 1,
            wall_time: 0.1,
            speedup_measured: 1.0,
            speedup_proxy: 1.0,
        };
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 6);
    }
}
