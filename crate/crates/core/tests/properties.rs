use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tale_core::persist::{model_bytes, model_from_bytes, trajectory_from_str, TrajectoryFile};
use tale_core::probe::exact_mi;
use tale_core::search::{self, Clock, Fingerprint, MaskScorer, RunOptions};
use tale_core::select::{aehm, common_layers};
use tale_core::task::{generate, TaskDataset};
use tale_core::{
    ops, Exec, LayerMask, ModelConfig, Result, TaleConfig, TaskKind, TaskSpec, Tensor, ThresholdMode,
    TransformerModel,
};

fn small_model(n_layers: usize, seed: u64) -> TransformerModel {
    TransformerModel::init(ModelConfig {
        n_layers,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        vocab_size: 7,
        max_seq_len: 6,
        seed,
    })
    .unwrap()
}

fn random_mask(n_layers: usize, bits: u64) -> LayerMask {
    // Never delete everything: keep layer 1 if the bits would remove all.
    let mut layers: Vec<usize> = (1..=n_layers).filter(|l| bits >> (l - 1) & 1 == 1).collect();
    if layers.len() == n_layers {
        layers.retain(|&l| l != 1);
    }
    LayerMask::new(layers, n_layers).unwrap()
}

fn small_dataset(kind: TaskKind, seed: u64) -> TaskDataset {
    generate(&TaskSpec {
        n_train: 40,
        n_val: 24,
        n_test: 24,
        ..TaskSpec::default_for(kind, seed)
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..200.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap();
        let y = ops::softmax(&x, 1).unwrap();
        for r in y.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(rows in 1usize..5, cols in 2usize..9, scale in 0.1f64..200.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap();
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..cols)).collect();
        let ce = ops::cross_entropy(&x, &labels).unwrap();
        prop_assert!(ce.is_finite() && ce >= 0.0);
    }

    #[test]
    fn masked_forward_equals_materialized(n_layers in 2usize..6, bits: u64, seed in 0u64..1000, tokens in proptest::collection::vec(0usize..7, 1..7)) {
        let model = small_model(n_layers, seed);
        let mask = random_mask(n_layers, bits);
        let masked = model.forward(&tokens, &mask).unwrap();
        let pruned = model.materialize_pruned(&mask).unwrap();
        prop_assert_eq!(pruned.n_layers(), n_layers - mask.len());
        let direct = pruned.forward(&tokens, &LayerMask::empty()).unwrap();
        prop_assert!(masked.max_abs_diff(&direct) <= 1e-12);
    }

    #[test]
    fn mask_text_round_trips(n_layers in 1usize..20, bits: u64) {
        let mask = random_mask(n_layers, bits);
        let text = mask.to_string();
        let inner = text.trim_start_matches('{').trim_end_matches('}');
        prop_assert_eq!(LayerMask::parse(inner, n_layers).unwrap(), mask);
    }

    #[test]
    fn exact_mi_bounds_and_symmetry(rows in 1usize..5, cols in 1usize..5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.gen::<f64>()).collect()).collect();
        let total: f64 = raw.iter().flatten().sum();
        let joint: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|p| p / total).collect()).collect();
        let transposed: Vec<Vec<f64>> = (0..cols).map(|j| joint.iter().map(|r| r[j]).collect()).collect();
        let h = |m: Vec<f64>| -m.iter().filter(|&&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>();
        let hx = h(joint.iter().map(|r| r.iter().sum()).collect());
        let hy = h(transposed.iter().map(|c| c.iter().sum()).collect());
        let mi = exact_mi(&joint).unwrap();
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= hx.min(hy) + 1e-9);
        prop_assert!((mi - exact_mi(&transposed).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn independent_joint_has_zero_mi(px in proptest::collection::vec(0.01f64..1.0, 1..5), py in proptest::collection::vec(0.01f64..1.0, 1..5)) {
        let (sx, sy): (f64, f64) = (px.iter().sum(), py.iter().sum());
        let joint: Vec<Vec<f64>> = px.iter().map(|a| py.iter().map(|b| a / sx * b / sy).collect()).collect();
        prop_assert!(exact_mi(&joint).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn aehm_is_monotone(r in 0.0f64..1.0, s in 1.0f64..10.0, dr in 0.001f64..0.5, ds in 0.01f64..5.0, lambda in 0.05f64..5.0) {
        let base = aehm(r, s, lambda).unwrap();
        prop_assert!(aehm(r + dr, s, lambda).unwrap() >= base);
        prop_assert!(aehm(r, s + ds, lambda).unwrap() >= base);
        prop_assert!(base >= r.min(s) - 1e-12 && base <= r.max(s) + 1e-12);
    }

    #[test]
    fn full_fraction_is_strict_intersection(sets in proptest::collection::vec(proptest::collection::btree_set(1usize..12, 0..8), 1..5)) {
        let named: BTreeMap<String, BTreeSet<usize>> = sets.iter().enumerate().map(|(i, s)| (format!("d{i}"), s.clone())).collect();
        let strict = sets.iter().skip(1).fold(sets[0].clone(), |acc, s| acc.intersection(s).copied().collect());
        prop_assert_eq!(common_layers(&named, 1.0).unwrap(), strict);
        // Lower fractions can only widen the set.
        let half = common_layers(&named, 0.5).unwrap();
        prop_assert!(common_layers(&named, 1.0).unwrap().is_subset(&half));
    }

    #[test]
    fn weights_round_trip_bitwise(n_layers in 1usize..4, seed in 0u64..1000) {
        let model = small_model(n_layers, seed);
        let back = model_from_bytes(&model_bytes(&model)).unwrap();
        prop_assert_eq!(back.config(), model.config());
        for ((na, a), (nb, b)) in model.weights().named().into_iter().zip(back.weights().named()) {
            prop_assert_eq!(na, nb);
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupted_weights_never_panic(pos in any::<prop::sample::Index>(), byte: u8, truncate in any::<bool>()) {
        let bytes = model_bytes(&small_model(2, 3));
        let i = pos.index(bytes.len());
        let mut bad = bytes.clone();
        if truncate {
            bad.truncate(i);
            prop_assert!(model_from_bytes(&bad).unwrap_err().is_format());
        } else {
            bad[i] = byte;
            // Either still valid (payload byte) or a format error; never a panic.
            if let Err(e) = model_from_bytes(&bad) {
                prop_assert!(e.is_format() || matches!(e, tale_core::Error::Config(_) | tale_core::Error::Input(_)), "{e}");
            }
        }
    }

    #[test]
    fn task_labels_match_rule(kind_ix in 0usize..5, seed in 0u64..500) {
        let kind = TaskKind::ALL[kind_ix];
        let ds = small_dataset(kind, seed);
        let spec = &ds.spec;
        for split in [&ds.train, &ds.val, &ds.test] {
            for (t, &y) in split.tokens.iter().zip(&split.labels) {
                prop_assert_eq!(t.len(), spec.seq_len);
                prop_assert!(t.iter().all(|&x| x < spec.input_vocab()));
                prop_assert_eq!(spec.label_of(t), Some(y));
            }
        }
        prop_assert_eq!(generate(spec).unwrap(), ds.clone());
        prop_assert_eq!(TaskSpec::from_canonical_text(&spec.to_canonical_text()).unwrap(), spec.clone());
    }
}

/// Accuracy table lookup keyed by mask bits.
struct TableScorer {
    n_layers: usize,
    acc: Vec<f64>,
}

impl MaskScorer for TableScorer {
    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn score(&self, mask: &LayerMask) -> Result<f64> {
        Ok(self.acc[mask.iter().map(|l| 1usize << (l - 1)).sum::<usize>()])
    }
}

fn fingerprint(spec: &TaskSpec) -> Fingerprint {
    Fingerprint {
        model_hash: "0".repeat(64),
        task_hash: spec.fingerprint(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectory_invariants_and_resume(n_layers in 2usize..7, seed: u64, eps in 0.0f64..0.3, current in any::<bool>(), cut in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scorer = TableScorer {
            n_layers,
            acc: (0..1usize << n_layers).map(|_| f64::from(rng.gen_range(0u8..=8)) / 8.0).collect(),
        };
        let spec = TaskSpec::default_for(TaskKind::Parity, seed % 10);
        let cfg = TaleConfig {
            epsilon: eps,
            mode: if current { ThresholdMode::RelativeCurrent } else { ThresholdMode::RelativeBaseline },
        };
        let opts = RunOptions { exec: Exec::Sequential, clock: Clock::Fixed(7), max_iterations: None };
        let full = search::tale(&scorer, fingerprint(&spec), cfg, &opts).unwrap();
        full.check_invariants().unwrap();
        prop_assert!(full.is_terminated());
        prop_assert!(full.last().mask.len() < n_layers);
        let base = full.baseline().accuracy;
        for pair in full.records.windows(2) {
            let reference = if current { pair[0].accuracy } else { base };
            prop_assert!(pair[1].accuracy >= reference - eps);
            prop_assert_eq!(pair[1].mask.len(), pair[0].mask.len() + 1);
        }

        let partial = search::tale(&scorer, fingerprint(&spec), cfg, &RunOptions { max_iterations: Some(cut), ..opts }).unwrap();
        let file = TrajectoryFile::new(&partial, &spec);
        file.validate().unwrap();
        let reloaded = trajectory_from_str(&file.to_json()).unwrap();
        prop_assert_eq!(&reloaded, &file);
        let resumed = search::resume(reloaded.trajectory(), &scorer, &fingerprint(&spec), &opts).unwrap();
        prop_assert_eq!(resumed, full);
    }
}
