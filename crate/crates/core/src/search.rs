//! Greedy iterative layer elimination.
//!
//! Each iteration scores every surviving layer's removal on the validation
//! split, takes the best one (ties to the lowest layer number) and keeps it
//! if its accuracy clears the threshold. The full audit trail, including
//! every candidate table, is kept in a [`PruneTrajectory`].

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{correct_count, speedup_proxy};
use crate::exec::Exec;
use crate::model::{LayerMask, TransformerModel};
use crate::task::{Split, TaskSpec};

/// Anything that can score a layer mask.
pub trait MaskScorer: Sync {
    fn n_layers(&self) -> usize;
    fn score(&self, mask: &LayerMask) -> Result<f64>;
}

/// Validation accuracy of a transformer under a mask.
pub struct ModelScorer<'a> {
    pub model: &'a TransformerModel,
    pub split: &'a Split,
    pub spec: &'a TaskSpec,
}

impl MaskScorer for ModelScorer<'_> {
    fn n_layers(&self) -> usize {
        self.model.n_layers()
    }

    fn score(&self, mask: &LayerMask) -> Result<f64> {
        if self.split.is_empty() {
            return Err(Error::Usage("validation split is empty".into()));
        }
        // Candidates already run in parallel; keep each evaluation serial.
        let c = correct_count(self.model, mask, self.split, self.spec, Exec::Sequential)?;
        Ok(c as f64 / self.split.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Accept if `A* ≥ Acc(current model) − ε`.
    #[default]
    RelativeCurrent,
    /// Accept if `A* ≥ Acc(full model) − ε`.
    RelativeBaseline,
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relative_current" => Ok(ThresholdMode::RelativeCurrent),
            "relative_baseline" => Ok(ThresholdMode::RelativeBaseline),
            _ => Err(Error::input(format!("unknown threshold mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ThresholdMode::RelativeCurrent => "relative_current",
            ThresholdMode::RelativeBaseline => "relative_baseline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaleConfig {
    pub epsilon: f64,
    pub mode: ThresholdMode,
}

impl Default for TaleConfig {
    fn default() -> Self {
        TaleConfig {
            epsilon: 0.0,
            mode: ThresholdMode::RelativeCurrent,
        }
    }
}

/// Source of record timestamps (Unix milliseconds).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Clock {
    #[default]
    System,
    Fixed(u64),
}

impl Clock {
    pub fn now_ms(self) -> u64 {
        match self {
            Clock::Fixed(t) => t,
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub exec: Exec,
    pub clock: Clock,
    /// Stop (without terminating the trajectory) after this many new iterations.
    pub max_iterations: Option<usize>,
}

/// Content hashes binding a trajectory to its model and task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Fingerprint {
    pub model_hash: String,
    pub task_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub mask: LayerMask,
    pub selected_layer: Option<usize>,
    pub accuracy: f64,
    /// Original layer number → accuracy with that layer additionally removed.
    pub candidates: BTreeMap<usize, f64>,
    pub speedup_proxy: f64,
    /// Wall-clock speedup vs. the full model, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup_measured: Option<f64>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    NoImprovingCandidate,
    DeletionCap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Termination {
    pub reason: TerminationReason,
    /// The candidate table that failed the threshold; empty at the cap.
    pub rejected_candidates: BTreeMap<usize, f64>,
    pub best_rejected: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneTrajectory {
    pub fingerprint: Fingerprint,
    pub n_layers: usize,
    pub epsilon: f64,
    pub mode: ThresholdMode,
    pub records: Vec<IterationRecord>,
    pub termination: Option<Termination>,
}

impl PruneTrajectory {
    pub fn is_terminated(&self) -> bool {
        self.termination.is_some()
    }

    pub fn baseline(&self) -> &IterationRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("trajectory always holds iteration 0")
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.accuracy).collect()
    }

    /// Copy with every timestamp zeroed, for content comparison.
    pub fn without_timestamps(&self) -> Self {
        let mut t = self.clone();
        t.records.iter_mut().for_each(|r| r.timestamp = 0);
        t
    }

    /// Checks the structural invariants of a recorded trajectory.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Integrity(msg));
        let Some(first) = self.records.first() else {
            return bad("trajectory has no baseline record".into());
        };
        if first.iteration != 0 || !first.mask.is_empty() || first.selected_layer.is_some() {
            return bad("record 0 must be the unpruned baseline".into());
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.iteration != i || r.mask.len() != i {
                return bad(format!("record {i}: iteration/mask size mismatch"));
            }
            if r.mask.validate(self.n_layers).is_err() {
                return bad(format!("record {i}: mask {} invalid for {} layers", r.mask, self.n_layers));
            }
            if i == 0 {
                continue;
            }
            let prev = &self.records[i - 1];
            let Some(sel) = r.selected_layer else {
                return bad(format!("record {i}: missing selected layer"));
            };
            if prev.mask.with(sel) != r.mask {
                return bad(format!("record {i}: mask is not previous mask plus {sel}"));
            }
            let expected: Vec<usize> = prev.mask.surviving(self.n_layers);
            if r.candidates.keys().copied().collect::<Vec<_>>() != expected {
                return bad(format!("record {i}: candidate table does not cover surviving layers"));
            }
            let (best, best_acc) = argmax(&r.candidates).expect("nonempty table");
            if best != sel || best_acc != r.accuracy {
                return bad(format!("record {i}: selected layer is not the table argmax"));
            }
        }
        Ok(())
    }
}

/// Best entry of a candidate table; ties go to the lowest layer number.
pub fn argmax(table: &BTreeMap<usize, f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (&l, &a) in table {
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((l, a));
        }
    }
    best
}

/// Scores `current ∪ {ℓ}` for every surviving layer `ℓ`.
pub fn evaluate_candidates<S: MaskScorer>(
    scorer: &S,
    current: &LayerMask,
    exec: Exec,
) -> Result<BTreeMap<usize, f64>> {
    let n = scorer.n_layers();
    current.validate(n)?;
    if current.len() + 1 >= n {
        return Err(Error::Usage(format!(
            "no candidates: mask {current} already leaves one layer of {n}"
        )));
    }
    let layers = current.surviving(n);
    let scores = exec.map(&layers, |&l| scorer.score(&current.with(l)));
    layers
        .into_iter()
        .zip(scores)
        .map(|(l, s)| s.map(|a| (l, a)))
        .collect()
}

/// Record 0: the unpruned model.
pub fn start<S: MaskScorer>(
    scorer: &S,
    fingerprint: Fingerprint,
    cfg: TaleConfig,
    clock: Clock,
) -> Result<PruneTrajectory> {
    if !(cfg.epsilon >= 0.0) || !cfg.epsilon.is_finite() {
        return Err(Error::input(format!("epsilon must be finite and >= 0, got {}", cfg.epsilon)));
    }
    let n = scorer.n_layers();
    if n < 2 {
        return Err(Error::input(format!("layer elimination needs at least 2 layers, got {n}")));
    }
    let mask = LayerMask::empty();
    let accuracy = scorer.score(&mask)?;
    Ok(PruneTrajectory {
        fingerprint,
        n_layers: n,
        epsilon: cfg.epsilon,
        mode: cfg.mode,
        records: vec![IterationRecord {
            iteration: 0,
            mask,
            selected_layer: None,
            accuracy,
            candidates: BTreeMap::new(),
            speedup_proxy: 1.0,
            speedup_measured: None,
            timestamp: clock.now_ms(),
        }],
        termination: None,
    })
}

/// One greedy iteration. Returns `false` once the trajectory is terminated.
pub fn step<S: MaskScorer>(traj: &mut PruneTrajectory, scorer: &S, opts: &RunOptions) -> Result<bool> {
    if traj.is_terminated() {
        return Ok(false);
    }
    let n = traj.n_layers;
    let last = traj.last().clone();
    if last.mask.len() + 1 >= n {
        traj.termination = Some(Termination {
            reason: TerminationReason::DeletionCap,
            rejected_candidates: BTreeMap::new(),
            best_rejected: None,
        });
        return Ok(false);
    }
    let table = evaluate_candidates(scorer, &last.mask, opts.exec)?;
    let (best, best_acc) = argmax(&table).expect("at least two surviving layers");
    let reference = match traj.mode {
        ThresholdMode::RelativeCurrent => last.accuracy,
        ThresholdMode::RelativeBaseline => traj.baseline().accuracy,
    };
    if best_acc >= reference - traj.epsilon {
        let mask = last.mask.with(best);
        traj.records.push(IterationRecord {
            iteration: last.iteration + 1,
            speedup_proxy: speedup_proxy(n, mask.len()),
            mask,
            selected_layer: Some(best),
            accuracy: best_acc,
            candidates: table,
            speedup_measured: None,
            timestamp: opts.clock.now_ms(),
        });
        if traj.last().mask.len() + 1 >= n {
            traj.termination = Some(Termination {
                reason: TerminationReason::DeletionCap,
                rejected_candidates: BTreeMap::new(),
                best_rejected: None,
            });
        }
        Ok(true)
    } else {
        traj.termination = Some(Termination {
            reason: TerminationReason::NoImprovingCandidate,
            rejected_candidates: table,
            best_rejected: Some(best),
        });
        Ok(false)
    }
}

/// Steps until termination or until `opts.max_iterations` new records,
/// calling `on_record` after each accepted iteration.
pub fn run<S: MaskScorer>(
    traj: &mut PruneTrajectory,
    scorer: &S,
    opts: &RunOptions,
    mut on_record: impl FnMut(&PruneTrajectory) -> Result<()>,
) -> Result<()> {
    let mut done = 0;
    while opts.max_iterations.is_none_or(|m| done < m) {
        let progressed = step(traj, scorer, opts)?;
        on_record(traj)?;
        if !progressed {
            break;
        }
        done += 1;
    }
    Ok(())
}

/// Runs the full greedy search from the unpruned model.
pub fn tale<S: MaskScorer>(
    scorer: &S,
    fingerprint: Fingerprint,
    cfg: TaleConfig,
    opts: &RunOptions,
) -> Result<PruneTrajectory> {
    let mut traj = start(scorer, fingerprint, cfg, opts.clock)?;
    run(&mut traj, scorer, opts, |_| Ok(()))?;
    Ok(traj)
}

/// Continues an interrupted trajectory. The fingerprint must match, and the
/// scorer must have the same layer count.
pub fn resume<S: MaskScorer>(
    mut traj: PruneTrajectory,
    scorer: &S,
    expected: &Fingerprint,
    opts: &RunOptions,
) -> Result<PruneTrajectory> {
    if &traj.fingerprint != expected {
        return Err(Error::Integrity(format!(
            "trajectory fingerprint {:?} does not match model/task {:?}",
            traj.fingerprint, expected
        )));
    }
    if traj.n_layers != scorer.n_layers() {
        return Err(Error::Integrity("trajectory layer count differs from model".into()));
    }
    traj.check_invariants()?;
    run(&mut traj, scorer, opts, |_| Ok(()))?;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Accuracy = fixed value per deleted layer summed; stays in [0,1].
    struct Additive {
        base: f64,
        delta: Vec<f64>,
    }

    impl MaskScorer for Additive {
        fn n_layers(&self) -> usize {
            self.delta.len()
        }
        fn score(&self, mask: &LayerMask) -> Result<f64> {
            Ok(self.base + mask.iter().map(|l| self.delta[l - 1]).sum::<f64>())
        }
    }

    fn opts() -> RunOptions {
        RunOptions {
            clock: Clock::Fixed(0),
            ..Default::default()
        }
    }

    #[test]
    fn all_deletions_hurt_stops_immediately() {
        let s = Additive {
            base: 0.8,
            delta: vec![-0.1, -0.2, -0.05],
        };
        let t = tale(&s, Fingerprint::default(), TaleConfig::default(), &opts()).unwrap();
        assert_eq!(t.records.len(), 1);
        let term = t.termination.unwrap();
        assert_eq!(term.reason, TerminationReason::NoImprovingCandidate);
        assert_eq!(term.best_rejected, Some(3));
    }

    #[test]
    fn deletion_cap_keeps_one_layer() {
        let s = Additive {
            base: 0.5,
            delta: vec![0.01; 4],
        };
        let t = tale(&s, Fingerprint::default(), TaleConfig::default(), &opts()).unwrap();
        assert_eq!(t.records.len(), 4);
        assert_eq!(t.last().mask.len(), 3);
        assert_eq!(t.termination.as_ref().unwrap().reason, TerminationReason::DeletionCap);
        // equal deltas tie: lowest index first
        assert_eq!(t.records[1].selected_layer, Some(1));
        t.check_invariants().unwrap();
    }

    #[test]
    fn candidate_domain_excludes_deleted() {
        let s = Additive {
            base: 0.5,
            delta: vec![0.0; 4],
        };
        let table = evaluate_candidates(&s, &LayerMask::new([2], 4).unwrap(), Exec::Sequential).unwrap();
        assert_eq!(table.keys().copied().collect::<Vec<_>>(), vec![1, 3, 4]);
        assert!(evaluate_candidates(&s, &LayerMask::new([1, 2, 3], 4).unwrap(), Exec::Sequential).is_err());
    }

    #[test]
    fn epsilon_allows_small_drops() {
        let s = Additive {
            base: 0.8,
            delta: vec![-0.01, -0.3, -0.3],
        };
        let cfg = TaleConfig {
            epsilon: 0.02,
            mode: ThresholdMode::RelativeCurrent,
        };
        let t = tale(&s, Fingerprint::default(), cfg, &opts()).unwrap();
        assert_eq!(t.records.len(), 2);
        assert_eq!(t.records[1].selected_layer, Some(1));
    }

    #[test]
    fn rejects_negative_epsilon_and_single_layer() {
        let s = Additive { base: 0.5, delta: vec![0.0; 3] };
        let cfg = TaleConfig { epsilon: -0.1, ..Default::default() };
        assert!(tale(&s, Fingerprint::default(), cfg, &opts()).is_err());
        let one = Additive { base: 0.5, delta: vec![0.0] };
        assert!(tale(&one, Fingerprint::default(), TaleConfig::default(), &opts()).is_err());
    }

    #[test]
    fn resume_checks_fingerprint() {
        let s = Additive { base: 0.5, delta: vec![0.01, 0.02, 0.0, 0.03] };
        let fp = Fingerprint { model_hash: "a".into(), task_hash: "b".into() };
        let full = tale(&s, fp.clone(), TaleConfig::default(), &opts()).unwrap();
        let mut partial = start(&s, fp.clone(), TaleConfig::default(), Clock::Fixed(0)).unwrap();
        run(&mut partial, &s, &RunOptions { max_iterations: Some(1), ..opts() }, |_| Ok(())).unwrap();
        assert!(!partial.is_terminated());
        let resumed = resume(partial.clone(), &s, &fp, &opts()).unwrap();
        assert_eq!(resumed, full);
        let again = resume(resumed.clone(), &s, &fp, &opts()).unwrap();
        assert_eq!(again, resumed);
        let other = Fingerprint { model_hash: "x".into(), ..fp };
        assert!(matches!(resume(partial, &s, &other, &opts()), Err(Error::Integrity(_))));
    }
}
