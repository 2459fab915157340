//! Toy-model training, the injected-noise fixture and the prune/finetune
//! regime matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::exec::Exec;
use crate::model::{head, sample_block, trunk, LayerMask, ModelConfig, TransformerModel};
use crate::optim::{adam_step, AdamParams, AdamState};
use crate::search::{tale, ModelScorer, RunOptions, TaleConfig, ThresholdMode};
use crate::select::best_model;
use crate::task::{generate, Split, TaskDataset, TaskKind, TaskSpec};

/// Weight scale of the re-drawn block in the noise fixture.
pub const NOISE_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; a linear warmup leads into a cosine decay to zero.
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay on the matrices (norm weights are exempt).
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 3e-3,
            warmup_steps: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 2.0,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate_common(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.grad_clip >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be > 0, grad_clip and weight_decay >= 0".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_common()?;
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `t` of `total`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        if t < self.warmup_steps {
            return self.lr * (t + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let p = (t - self.warmup_steps) as f64 / span as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss (nats) of the last epoch.
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TransformerModel,
    pub report: TrainReport,
}

/// Mean next-token cross-entropy of the answer token at the last position,
/// over the full vocabulary. Leaves gradients in each weight's `grad`.
fn loss_and_grads(model: &mut TransformerModel, batch: &[&[usize]], labels: &[usize], spec: &TaskSpec) -> Result<f64> {
    let cfg = model.config().clone();
    let seq_len = batch[0].len();
    let mut tape = Tape::new();
    let w = model.weights().map(|t| tape.leaf(t));
    let ids = batch.concat();
    let blocks: Vec<usize> = (0..cfg.n_layers).collect();
    let x = trunk(&mut tape, &w, &cfg, &ids, seq_len, &blocks, |_, _, _| Ok(()))?;
    let last: Vec<usize> = (0..batch.len()).map(|b| b * seq_len + seq_len - 1).collect();
    let x = tape.select_rows(&x, &last)?;
    let logits = head(&mut tape, &w, &x)?;
    let targets: Vec<usize> = labels.iter().map(|&l| spec.answer_token(l)).collect();
    let loss = tape.cross_entropy(logits, &targets)?;
    let value = tape.value(&loss).item();
    if !value.is_finite() {
        return Err(Error::Training(format!("loss diverged ({value})")));
    }
    let grads = tape.backward(loss)?;
    let vars: Vec<Var> = w.named().into_iter().map(|(_, v)| *v).collect();
    for (v, t) in vars.into_iter().zip(model.weights_mut().iter_mut()) {
        grads.write_into(v, t)?;
    }
    Ok(value)
}

fn clip_gradients(model: &mut TransformerModel, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let mut params = model.weights_mut().iter_mut();
    let sq: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter().map(|x| x * x))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled = g.iter().map(|x| x * s).collect();
                p.set_grad(scaled).expect("same length");
            }
        }
    }
}

fn check_compat(cfg: &ModelConfig, spec: &TaskSpec) -> Result<()> {
    if cfg.vocab_size != spec.vocab_size() {
        return Err(Error::Config(format!(
            "model vocab {} does not match task vocab {}",
            cfg.vocab_size,
            spec.vocab_size()
        )));
    }
    if cfg.max_seq_len < spec.seq_len {
        return Err(Error::Config(format!(
            "model max_seq_len {} is shorter than task sequences ({})",
            cfg.max_seq_len, spec.seq_len
        )));
    }
    Ok(())
}

fn fit(mut model: TransformerModel, train: &Split, spec: &TaskSpec, tc: &TrainConfig) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Usage("training split is empty".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let per_epoch = train.len().div_ceil(tc.batch_size);
    let total = per_epoch * tc.epochs;
    let mut state = AdamState::new();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut t = 0;
    for _ in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| train.tokens[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            sum += loss_and_grads(&mut model, &batch, &labels, spec)? * chunk.len() as f64;
            clip_gradients(&mut model, tc.grad_clip);
            let hp = AdamParams {
                lr: tc.lr_at(t, total),
                beta1: tc.beta1,
                beta2: tc.beta2,
                eps: tc.eps,
            };
            if tc.weight_decay > 0.0 {
                let shrink = 1.0 - hp.lr * tc.weight_decay;
                for p in model.weights_mut().iter_mut().into_iter().filter(|p| p.shape().len() == 2) {
                    p.data_mut().iter_mut().for_each(|w| *w *= shrink);
                }
            }
            adam_step(&mut model.weights_mut().iter_mut(), &mut state, hp)?;
            t += 1;
        }
        epoch_losses.push(sum / train.len() as f64);
    }
    for p in model.weights_mut().iter_mut() {
        p.clear_grad();
    }
    if !model.weights().named().iter().all(|(_, p)| p.is_finite()) {
        return Err(Error::Training("weights became non-finite".into()));
    }
    Ok(TrainOutcome {
        model,
        report: TrainReport {
            final_loss: *epoch_losses.last().expect("epochs >= 1"),
            epoch_losses,
            steps: t,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Trains a fresh model (initialized from `model_cfg.seed`) on the train split.
pub fn train_toy(model_cfg: ModelConfig, ds: &TaskDataset, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    check_compat(&model_cfg, &ds.spec)?;
    fit(TransformerModel::init(model_cfg)?, &ds.train, &ds.spec, tc)
}

/// Full-parameter finetuning of the materialized pruned model. A zero
/// learning rate is allowed and leaves the weights unchanged.
pub fn finetune(model: &TransformerModel, mask: &LayerMask, ds: &TaskDataset, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate_common()?;
    check_compat(model.config(), &ds.spec)?;
    fit(model.materialize_pruned(mask)?, &ds.train, &ds.spec, tc)
}

/// Mean last-position answer loss on a split, without gradients.
pub fn split_loss(model: &TransformerModel, split: &Split, spec: &TaskSpec) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Usage("loss on an empty split".into()));
    }
    let mut sum = 0.0;
    for start in (0..split.len()).step_by(crate::eval::EVAL_BATCH) {
        let r = start..(start + crate::eval::EVAL_BATCH).min(split.len());
        let logits = model.forward_last(&split.batch(r.clone()), &LayerMask::empty())?;
        let targets: Vec<usize> = split.labels[r.clone()].iter().map(|&l| spec.answer_token(l)).collect();
        sum += crate::ops::cross_entropy(&logits, &targets)? * r.len() as f64;
    }
    Ok(sum / split.len() as f64)
}

/// Re-draws block `layer` at [`NOISE_SCALE`] times the init scale.
pub fn inject_noise_layer(model: &TransformerModel, layer: usize, seed: u64) -> Result<TransformerModel> {
    let mut out = model.clone();
    out.replace_block(layer, sample_block(model.config(), seed, NOISE_SCALE))?;
    Ok(out)
}

/// Model shape used for the toy experiments.
pub fn reference_model_config(spec: &TaskSpec, n_layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: spec.vocab_size(),
        max_seq_len: spec.seq_len,
        seed,
    }
}

/// A trained model and its noise-injected copy.
#[derive(Debug, Clone)]
pub struct NoiseFixture {
    pub dataset: TaskDataset,
    pub clean: TransformerModel,
    pub noisy: TransformerModel,
    pub layer: usize,
    pub train_report: TrainReport,
}

pub const FIXTURE_LAYERS: usize = 6;
pub const FIXTURE_NOISE_LAYER: usize = 3;

/// Trains the 6-layer copy_last model and injects noise at layer 3.
pub fn noise_fixture(seed: u64) -> Result<NoiseFixture> {
    let spec = TaskSpec::default_for(TaskKind::CopyLast, seed);
    let dataset = generate(&spec)?;
    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let out = train_toy(reference_model_config(&spec, FIXTURE_LAYERS, seed), &dataset, &tc)?;
    let noisy = inject_noise_layer(&out.model, FIXTURE_NOISE_LAYER, seed.wrapping_add(1))?;
    Ok(NoiseFixture {
        dataset,
        clean: out.model,
        noisy,
        layer: FIXTURE_NOISE_LAYER,
        train_report: out.report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    Baseline,
    PrunedOnly,
    #[serde(rename = "FT")]
    Ft,
    #[serde(rename = "Prune→FT")]
    PruneFt,
    #[serde(rename = "FT→Prune")]
    FtPrune,
    PruneFTPrune,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::Baseline,
        Regime::PrunedOnly,
        Regime::Ft,
        Regime::PruneFt,
        Regime::FtPrune,
        Regime::PruneFTPrune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Baseline => "Baseline",
            Regime::PrunedOnly => "PrunedOnly",
            Regime::Ft => "FT",
            Regime::PruneFt => "Prune→FT",
            Regime::FtPrune => "FT→Prune",
            Regime::PruneFTPrune => "PruneFTPrune",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::input(format!("unknown regime {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: Regime,
    /// Test accuracy in percent.
    pub perf: f64,
    pub dropped: usize,
    /// Wall time of the finetuning stage; 0 when the regime has none.
    pub train_seconds: f64,
    /// Deleted layers in the base model's numbering.
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct RegimeSettings {
    pub epsilon: f64,
    pub mode: ThresholdMode,
    pub exec: Exec,
}

impl Default for RegimeSettings {
    fn default() -> Self {
        RegimeSettings {
            epsilon: 0.0,
            mode: ThresholdMode::RelativeCurrent,
            exec: Exec::Parallel,
        }
    }
}

/// A model plus the base-model layer numbers its blocks came from.
#[derive(Debug, Clone)]
struct Stage {
    model: TransformerModel,
    origin: Vec<usize>,
    train_seconds: f64,
}

impl Stage {
    fn base(model: &TransformerModel) -> Self {
        Stage {
            origin: (1..=model.n_layers()).collect(),
            model: model.clone(),
            train_seconds: 0.0,
        }
    }

    fn deleted(&self, n_base: usize) -> Vec<usize> {
        (1..=n_base).filter(|l| !self.origin.contains(l)).collect()
    }

    /// TALE on validation accuracy, then the best-accuracy record.
    fn prune(&self, ds: &TaskDataset, s: RegimeSettings) -> Result<Stage> {
        let scorer = ModelScorer {
            model: &self.model,
            split: &ds.val,
            spec: &ds.spec,
        };
        let opts = RunOptions {
            exec: s.exec,
            ..RunOptions::default()
        };
        let cfg = TaleConfig {
            epsilon: s.epsilon,
            mode: s.mode,
        };
        let traj = tale(&scorer, Default::default(), cfg, &opts)?;
        let mask = &traj.records[best_model(&traj.records)?].mask;
        Ok(Stage {
            model: self.model.materialize_pruned(mask)?,
            origin: mask.surviving(self.model.n_layers()).iter().map(|&l| self.origin[l - 1]).collect(),
            train_seconds: self.train_seconds,
        })
    }

    fn finetune(&self, ds: &TaskDataset, tc: &TrainConfig) -> Result<Stage> {
        let out = finetune(&self.model, &LayerMask::empty(), ds, tc)?;
        Ok(Stage {
            model: out.model,
            origin: self.origin.clone(),
            train_seconds: self.train_seconds + out.report.wall_seconds,
        })
    }

    fn report(&self, regime: Regime, ds: &TaskDataset, n_base: usize, s: RegimeSettings) -> Result<RegimeReport> {
        let acc = accuracy(&self.model, &LayerMask::empty(), &ds.test, &ds.spec, s.exec)?;
        let layers = self.deleted(n_base);
        Ok(RegimeReport {
            regime,
            perf: acc.accuracy * 100.0,
            dropped: layers.len(),
            train_seconds: self.train_seconds,
            layers,
        })
    }
}

/// Memoizes shared pipeline prefixes (e.g. the first prune stage is shared
/// by PrunedOnly, Prune→FT and PruneFTPrune).
struct Pipeline<'a> {
    base: &'a TransformerModel,
    ds: &'a TaskDataset,
    tc: &'a TrainConfig,
    s: RegimeSettings,
    memo: BTreeMap<&'static str, Stage>,
}

impl Pipeline<'_> {
    fn stage(&mut self, key: &'static str) -> Result<Stage> {
        if let Some(s) = self.memo.get(key) {
            return Ok(s.clone());
        }
        let st = match key {
            "base" => Stage::base(self.base),
            "P" => self.stage("base")?.prune(self.ds, self.s)?,
            "F" => self.stage("base")?.finetune(self.ds, self.tc)?,
            "PF" => self.stage("P")?.finetune(self.ds, self.tc)?,
            "FP" => self.stage("F")?.prune(self.ds, self.s)?,
            "PFP" => self.stage("PF")?.prune(self.ds, self.s)?,
            _ => unreachable!("unknown stage {key}"),
        };
        self.memo.insert(key, st.clone());
        Ok(st)
    }

    fn run(&mut self, regime: Regime) -> Result<RegimeReport> {
        let key = match regime {
            Regime::Baseline => "base",
            Regime::PrunedOnly => "P",
            Regime::Ft => "F",
            Regime::PruneFt => "PF",
            Regime::FtPrune => "FP",
            Regime::PruneFTPrune => "PFP",
        };
        self.stage(key)?.report(regime, self.ds, self.base.n_layers(), self.s)
    }
}

/// Runs one regime from scratch.
pub fn run_regime(
    regime: Regime,
    base: &TransformerModel,
    ds: &TaskDataset,
    settings: RegimeSettings,
    tc: &TrainConfig,
) -> Result<RegimeReport> {
    check_compat(base.config(), &ds.spec)?;
    Pipeline {
        base,
        ds,
        tc,
        s: settings,
        memo: BTreeMap::new(),
    }
    .run(regime)
}

/// All six regimes, sharing stages between them.
pub fn run_matrix(
    base: &TransformerModel,
    ds: &TaskDataset,
    settings: RegimeSettings,
    tc: &TrainConfig,
) -> Result<Vec<RegimeReport>> {
    check_compat(base.config(), &ds.spec)?;
    let mut p = Pipeline {
        base,
        ds,
        tc,
        s: settings,
        memo: BTreeMap::new(),
    };
    Regime::ALL.iter().map(|&r| p.run(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (TaskDataset, ModelConfig) {
        let spec = TaskSpec {
            n_train: 64,
            n_val: 32,
            n_test: 32,
            ..TaskSpec::default_for(TaskKind::CopyLast, 4)
        };
        let ds = generate(&spec).unwrap();
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: spec.vocab_size(),
            max_seq_len: spec.seq_len,
            seed: 1,
        };
        (ds, cfg)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            warmup_steps: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig { epochs: 0, ..quick() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..quick() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..quick() }.validate_common().is_ok());
        let (ds, cfg) = small();
        assert!(matches!(
            train_toy(cfg, &ds, &TrainConfig { epochs: 0, ..quick() }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn model_gradient_matches_finite_difference() {
        // Tape gradients of the training loss against central differences of
        // the inference path, for a sample of entries in every tensor.
        let (ds, cfg) = small();
        let mut model = TransformerModel::init(cfg).unwrap();
        let split = ds.train.subset(0..6);
        let batch = split.batch(0..split.len());
        let loss = loss_and_grads(&mut model, &batch, &split.labels, &ds.spec).unwrap();
        assert!((loss - split_loss(&model, &split, &ds.spec).unwrap()).abs() < 1e-12);
        let n_tensors = model.weights().named().len();
        let h = 1e-5;
        for ti in 0..n_tensors {
            let len = model.weights_mut().iter_mut()[ti].len();
            for j in (0..len).step_by(len.div_ceil(5)) {
                let analytic = model.weights_mut().iter_mut()[ti].grad().unwrap()[j];
                let at = |delta: f64| {
                    let mut m = model.clone();
                    m.weights_mut().iter_mut()[ti].data_mut()[j] += delta;
                    split_loss(&m, &split, &ds.spec).unwrap()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "tensor {ti} elem {j}: {analytic} vs {fd}");
            }
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let tc = TrainConfig { lr: 1.0, warmup_steps: 4, ..quick() };
        assert_eq!(tc.lr_at(0, 20), 0.25);
        assert_eq!(tc.lr_at(3, 20), 1.0);
        assert_eq!(tc.lr_at(4, 20), 1.0);
        assert!(tc.lr_at(19, 20) < 0.02);
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, cfg) = small();
        let a = train_toy(cfg.clone(), &ds, &quick()).unwrap();
        let b = train_toy(cfg, &ds, &quick()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.report.epoch_losses, b.report.epoch_losses);
    }

    #[test]
    fn zero_lr_finetune_is_identity() {
        let (ds, cfg) = small();
        let m = TransformerModel::init(cfg).unwrap();
        let out = finetune(&m, &LayerMask::empty(), &ds, &TrainConfig { lr: 0.0, ..quick() }).unwrap();
        assert_eq!(out.model, m);
    }

    #[test]
    fn finetune_keeps_pruned_layer_count() {
        let (ds, cfg) = small();
        let m = TransformerModel::init(cfg).unwrap();
        let out = finetune(&m, &LayerMask::new([1], 2).unwrap(), &ds, &quick()).unwrap();
        assert_eq!(out.model.n_layers(), 1);
    }

    #[test]
    fn noise_injection_is_seeded_and_local() {
        let (_, cfg) = small();
        let m = TransformerModel::init(cfg).unwrap();
        let a = inject_noise_layer(&m, 2, 7).unwrap();
        assert_eq!(a, inject_noise_layer(&m, 2, 7).unwrap());
        assert_eq!(a.weights().blocks[0], m.weights().blocks[0]);
        assert_ne!(a.weights().blocks[1], m.weights().blocks[1]);
        assert!(matches!(inject_noise_layer(&m, 3, 7), Err(Error::Range(_))));
        assert!(inject_noise_layer(&m, 0, 7).is_err());
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
    }

    #[test]
    fn baseline_regime_reports_base_accuracy() {
        let (ds, cfg) = small();
        let m = TransformerModel::init(cfg).unwrap();
        let r = run_regime(Regime::Baseline, &m, &ds, RegimeSettings::default(), &quick()).unwrap();
        let acc = accuracy(&m, &LayerMask::empty(), &ds.test, &ds.spec, Exec::Sequential).unwrap();
        assert_eq!(r.dropped, 0);
        assert_eq!(r.perf, acc.accuracy * 100.0);
        assert_eq!(r.train_seconds, 0.0);
    }
}
