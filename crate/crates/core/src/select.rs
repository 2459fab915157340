//! Operating-point selection over a pruning trajectory.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::percentage_gain;
use crate::search::{IterationRecord, PruneTrajectory};

/// Iteration with the highest accuracy; ties go to the fewest deletions.
pub fn best_model(records: &[IterationRecord]) -> Result<usize> {
    let first = records.first().ok_or_else(|| Error::Usage("empty trajectory".into()))?;
    let mut best = 0;
    let mut best_acc = first.accuracy;
    for (i, r) in records.iter().enumerate().skip(1) {
        let fewer = r.mask.len() < records[best].mask.len();
        if r.accuracy > best_acc || (r.accuracy == best_acc && fewer) {
            best = i;
            best_acc = r.accuracy;
        }
    }
    Ok(best)
}

/// Deepest iteration whose accuracy is at least the baseline's.
pub fn bsba(records: &[IterationRecord]) -> Result<usize> {
    let base = records
        .first()
        .ok_or_else(|| Error::Usage("empty trajectory".into()))?
        .accuracy;
    Ok(records
        .iter()
        .rposition(|r| r.accuracy >= base)
        .unwrap_or(0))
}

/// Accuracy–efficiency harmonic mean `(1+λ²)·r·S / (λ²·S + r)`.
///
/// The formula is applied as written; as `λ → ∞` it tends to `r`, as
/// `λ → 0` to `S`.
pub fn aehm(r_a: f64, speedup: f64, lambda: f64) -> Result<f64> {
    for (name, v) in [("r_A", r_a), ("S", speedup), ("lambda", lambda)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("AE-HM requires {name} > 0, got {v}")));
        }
    }
    let l2 = lambda * lambda;
    Ok((1.0 + l2) * r_a * speedup / (l2 * speedup + r_a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpeedupSource {
    #[default]
    Proxy,
    Measured,
}

fn speedup_of(r: &IterationRecord, source: SpeedupSource) -> Result<f64> {
    match source {
        SpeedupSource::Proxy => Ok(r.speedup_proxy),
        SpeedupSource::Measured => r.speedup_measured.ok_or_else(|| {
            Error::input(format!(
                "iteration {} has no measured speedup; prune with speedup measurement enabled",
                r.iteration
            ))
        }),
    }
}

/// `argmax_i AE-HM(acc_i / acc_0, S_i, λ)`, ties to the fewest deletions.
/// Returns the index and its score.
pub fn best_compromise(records: &[IterationRecord], lambda: f64, source: SpeedupSource) -> Result<(usize, f64)> {
    let base = records
        .first()
        .ok_or_else(|| Error::Usage("empty trajectory".into()))?
        .accuracy;
    if !(base > 0.0) {
        return Err(Error::Domain("baseline accuracy is zero; accuracy ratio undefined".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        let ratio = r.accuracy / base;
        // A zero-accuracy point scores zero rather than leaving the domain.
        let score = if ratio > 0.0 {
            aehm(ratio, speedup_of(r, source)?, lambda)?
        } else {
            0.0
        };
        let better = match best {
            None => true,
            Some((j, s)) => score > s || (score == s && r.mask.len() < records[j].mask.len()),
        };
        if better {
            best = Some((i, score));
        }
    }
    Ok(best.expect("nonempty"))
}

/// Layers occurring in at least `⌈fraction · n_tasks⌉` of the deletion sets.
pub fn common_layers(sets: &BTreeMap<String, BTreeSet<usize>>, fraction: f64) -> Result<BTreeSet<usize>> {
    if sets.is_empty() {
        return Err(Error::Usage("common layers of an empty task mapping".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::input(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let need = (fraction * sets.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for set in sets.values() {
        for &l in set {
            *counts.entry(l).or_default() += 1;
        }
    }
    Ok(counts.into_iter().filter(|&(_, c)| c >= need).map(|(l, _)| l).collect())
}

/// One trajectory point as reported to users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub iteration: usize,
    /// Accuracy in percent.
    pub perf: f64,
    pub dropped: usize,
    pub speedup: f64,
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompromisePoint {
    #[serde(flatten)]
    pub point: OperatingPoint,
    pub lambda: f64,
    pub aehm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub dataset: String,
    pub speedup_source: SpeedupSource,
    pub baseline: OperatingPoint,
    pub best: OperatingPoint,
    pub bsba: OperatingPoint,
    pub best_compromise: CompromisePoint,
    pub best_gain_pct: f64,
    pub bsba_gain_pct: f64,
}

pub const SELECTION_CSV_HEADER: &str =
    "dataset,baseline_perf,best_perf,best_drop,best_sp,bsba_perf,bsba_drop,bsba_sp,gain_pct";

impl SelectionReport {
    pub fn build(dataset: &str, traj: &PruneTrajectory, lambda: f64, source: SpeedupSource) -> Result<Self> {
        let recs = &traj.records;
        let point = |i: usize| -> Result<OperatingPoint> {
            let r = &recs[i];
            Ok(OperatingPoint {
                iteration: i,
                perf: r.accuracy * 100.0,
                dropped: r.mask.len(),
                speedup: speedup_of(r, source)?,
                layers: r.mask.iter().collect(),
            })
        };
        let best = best_model(recs)?;
        let bsba_i = bsba(recs)?;
        let (bc, score) = best_compromise(recs, lambda, source)?;
        let base = recs[0].accuracy;
        Ok(SelectionReport {
            dataset: dataset.to_string(),
            speedup_source: source,
            baseline: point(0)?,
            best: point(best)?,
            bsba: point(bsba_i)?,
            best_compromise: CompromisePoint {
                point: point(bc)?,
                lambda,
                aehm: score,
            },
            best_gain_pct: percentage_gain(recs[best].accuracy, base)?,
            bsba_gain_pct: percentage_gain(recs[bsba_i].accuracy, base)?,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.2},{:.2},{},{:.2},{:.2},{},{:.2},{:.2}",
            self.dataset,
            self.baseline.perf,
            self.best.perf,
            self.best.dropped,
            self.best.speedup,
            self.bsba.perf,
            self.bsba.dropped,
            self.bsba.speedup,
            self.best_gain_pct
        )
    }
}
