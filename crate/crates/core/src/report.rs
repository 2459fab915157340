//! CSV renderings of experiment outputs.
//!
//! Numbers are formatted by Rust's own float formatting, so the decimal
//! separator is always '.', and lines end in '\n'.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::eval::{predict, EVAL_BATCH};
use crate::model::TransformerModel;
use crate::ops::softmax_slice;
use crate::probe::MiProfile;
use crate::search::PruneTrajectory;
use crate::select::{SelectionReport, SELECTION_CSV_HEADER};
use crate::task::{Split, TaskSpec};
use crate::train::RegimeReport;

pub fn trajectory_csv(traj: &PruneTrajectory) -> String {
    let mut s = String::from("iteration,selected_layer,accuracy,proxy_speedup\n");
    for r in &traj.records {
        let sel = r.selected_layer.map_or(String::new(), |l| l.to_string());
        writeln!(s, "{},{},{:.6},{:.6}", r.iteration, sel, r.accuracy, r.speedup_proxy).unwrap();
    }
    s
}

/// Task accuracy and mean answer probability when decoding boundary `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LensPoint {
    pub k: usize,
    pub accuracy: f64,
    pub answer_prob: f64,
}

pub fn lens_curve(model: &TransformerModel, split: &Split, spec: &TaskSpec) -> Result<Vec<LensPoint>> {
    if split.is_empty() {
        return Err(Error::Usage("lens curve on an empty split".into()));
    }
    let n_k = model.n_layers() + 1;
    let mut correct = vec![0usize; n_k];
    let mut prob = vec![0.0; n_k];
    for start in (0..split.len()).step_by(EVAL_BATCH) {
        let r = start..(start + EVAL_BATCH).min(split.len());
        let per_k = model.lens_logits_batch(&split.batch(r.clone()))?;
        for (k, logits) in per_k.iter().enumerate() {
            for (row, &y) in r.clone().enumerate().map(|(i, j)| (i, &split.labels[j])) {
                let l = logits.row(row);
                if predict(l, spec.answer_tokens()) == y {
                    correct[k] += 1;
                }
                prob[k] += softmax_slice(l)[spec.answer_token(y)];
            }
        }
    }
    let n = split.len() as f64;
    Ok((0..n_k)
        .map(|k| LensPoint {
            k,
            accuracy: correct[k] as f64 / n,
            answer_prob: prob[k] / n,
        })
        .collect())
}

pub fn lens_csv(points: &[LensPoint]) -> String {
    let mut s = String::from("k,accuracy,answer_prob\n");
    for p in points {
        writeln!(s, "{},{:.6},{:.6}", p.k, p.accuracy, p.answer_prob).unwrap();
    }
    s
}

pub fn mi_csv(profile: &MiProfile) -> String {
    let mut s = format!("# h_y_bits={:.6}\nboundary,layer_index,mi_bits,probe_val_acc\n", profile.h_y_bits);
    for e in &profile.entries {
        writeln!(s, "{},{},{:.6},{:.6}", e.boundary, e.layer_index, e.mi_bits, e.probe_val_acc).unwrap();
    }
    s
}

pub fn regimes_csv(rows: &[RegimeReport]) -> String {
    let mut s = String::from("# prune_selection=best\nregime,perf,dropped,train_seconds\n");
    for r in rows {
        writeln!(s, "{},{:.2},{},{:.3}", r.regime, r.perf, r.dropped, r.train_seconds).unwrap();
    }
    s
}

pub fn selection_csv(reports: &[SelectionReport]) -> String {
    let mut s = format!("{SELECTION_CSV_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::MiEntry;
    use crate::model::LayerMask;

    #[test]
    fn mi_csv_layout() {
        let p = MiProfile {
            entries: vec![MiEntry {
                boundary: 0,
                layer_index: 0,
                mi_bits: 0.5,
                probe_val_acc: 0.75,
            }],
            h_y_bits: 1.0,
            mask: LayerMask::empty(),
        };
        assert_eq!(
            mi_csv(&p),
            "# h_y_bits=1.000000\nboundary,layer_index,mi_bits,probe_val_acc\n0,0,0.500000,0.750000\n"
        );
    }
}
