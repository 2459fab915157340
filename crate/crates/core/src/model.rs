//! Pre-norm decoder-only transformer with per-call layer masking.
//!
//! Layers are numbered `1..=L` everywhere outside this module. A masked
//! forward skips deleted blocks entirely: the residual stream leaving the
//! last surviving block before a gap feeds the next surviving block.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Eval, Graph};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-6;
/// Standard deviation of token-embedding entries at initialization.
pub const EMBED_INIT_STD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head dim {} must be even for rotary encoding",
                self.head_dim()
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Canonical `key=value` lines in fixed field order.
    pub fn to_canonical_text(&self) -> String {
        format!(
            "n_layers={}\nd_model={}\nn_heads={}\nd_ff={}\nvocab_size={}\nmax_seq_len={}\nseed={}\n",
            self.n_layers, self.d_model, self.n_heads, self.d_ff, self.vocab_size, self.max_seq_len, self.seed
        )
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let kv = crate::kv::parse_canonical(
            text,
            &["n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len", "seed"],
        )?;
        let num = |k: &str| -> Result<usize> {
            kv[k].parse().map_err(|_| Error::Config(format!("{k}: not an integer: {:?}", kv[k])))
        };
        let cfg = ModelConfig {
            n_layers: num("n_layers")?,
            d_model: num("d_model")?,
            n_heads: num("n_heads")?,
            d_ff: num("d_ff")?,
            vocab_size: num("vocab_size")?,
            max_seq_len: num("max_seq_len")?,
            seed: kv["seed"].parse().map_err(|_| Error::Config("seed: not a u64".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Set of deleted layers, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerMask {
    deleted: BTreeSet<usize>,
}

impl LayerMask {
    pub fn empty() -> Self {
        LayerMask::default()
    }

    /// Builds and validates a mask for a model of `n_layers` layers.
    pub fn new<I: IntoIterator<Item = usize>>(layers: I, n_layers: usize) -> Result<Self> {
        let mut deleted = BTreeSet::new();
        for l in layers {
            if !deleted.insert(l) {
                return Err(Error::input(format!("layer {l} listed twice in mask")));
            }
        }
        let mask = LayerMask { deleted };
        mask.validate(n_layers)?;
        Ok(mask)
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if let Some(&bad) = self.deleted.iter().find(|&&l| l == 0 || l > n_layers) {
            return Err(Error::input(format!("mask layer {bad} outside 1..={n_layers}")));
        }
        if self.deleted.len() >= n_layers {
            return Err(Error::input(format!(
                "mask deletes {} of {n_layers} layers; at least one must remain",
                self.deleted.len()
            )));
        }
        Ok(())
    }

    /// This mask plus `layer`, without validation.
    pub fn with(&self, layer: usize) -> Self {
        let mut deleted = self.deleted.clone();
        deleted.insert(layer);
        LayerMask { deleted }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.deleted.contains(&layer)
    }

    pub fn len(&self) -> usize {
        self.deleted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deleted.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.deleted.iter().copied()
    }

    pub fn is_subset(&self, other: &LayerMask) -> bool {
        self.deleted.is_subset(&other.deleted)
    }

    /// Surviving 1-based layer numbers in network order.
    pub fn surviving(&self, n_layers: usize) -> Vec<usize> {
        (1..=n_layers).filter(|l| !self.contains(*l)).collect()
    }

    /// Parses `"3,17"`; empty string is the empty mask.
    pub fn parse(s: &str, n_layers: usize) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(LayerMask::empty());
        }
        let layers = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::input(format!("bad layer index {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        LayerMask::new(layers, n_layers)
    }
}

impl fmt::Display for LayerMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.deleted.iter().map(ToString::to_string).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<P> {
    pub attn_norm: P,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub mlp_norm: P,
    pub w_up: P,
    pub w_down: P,
}

impl<P> Block<P> {
    pub const NAMES: [&'static str; 8] = ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down"];

    pub fn map<'s, Q>(&'s self, mut f: impl FnMut(&'s P) -> Q) -> Block<Q> {
        Block {
            attn_norm: f(&self.attn_norm),
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            mlp_norm: f(&self.mlp_norm),
            w_up: f(&self.w_up),
            w_down: f(&self.w_down),
        }
    }

    pub fn as_array(&self) -> [&P; 8] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub fn as_array_mut(&mut self) -> [&mut P; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// All model parameters; `P` is a tensor, a tape handle, or a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<P> {
    pub embed: P,
    pub blocks: Vec<Block<P>>,
    pub final_norm: P,
    pub w_out: P,
}

impl<P> Weights<P> {
    pub fn map<'s, Q>(&'s self, mut f: impl FnMut(&'s P) -> Q) -> Weights<Q> {
        Weights {
            embed: f(&self.embed),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            final_norm: f(&self.final_norm),
            w_out: f(&self.w_out),
        }
    }

    /// Parameters with stable 1-based names, in storage order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, p) in Block::<P>::NAMES.iter().zip(b.as_array()) {
                out.push((format!("layer.{}.{name}", i + 1), p));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("w_out".into(), &self.w_out));
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.embed];
        for b in &mut self.blocks {
            out.extend(b.as_array_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.w_out);
        out
    }
}

/// Hidden state at one layer boundary (last position).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    /// Original layer number whose output this is; 0 is the embedding.
    pub layer: usize,
    pub vector: Vec<f64>,
}

/// Hidden states of a batch at one layer boundary, `[batch × d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryBatch {
    pub layer: usize,
    pub states: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    weights: Weights<Tensor>,
}

fn fresh_block(cfg: &ModelConfig, rng: &mut ChaCha8Rng, scale: f64) -> Block<Tensor> {
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    let sd = scale / (d as f64).sqrt();
    let sff = scale / (ff as f64).sqrt();
    Block {
        attn_norm: Tensor::filled(&[d], 1.0),
        wq: Tensor::randn(&[d, d], sd, rng),
        wk: Tensor::randn(&[d, d], sd, rng),
        wv: Tensor::randn(&[d, d], sd, rng),
        wo: Tensor::randn(&[d, d], sd, rng),
        mlp_norm: Tensor::filled(&[d], 1.0),
        w_up: Tensor::randn(&[d, ff], sd, rng),
        w_down: Tensor::randn(&[ff, d], sff, rng),
    }
}

/// Draws one block from the initialization distribution with every random
/// matrix's standard deviation multiplied by `scale`. Norm weights are set
/// to their initial value of one.
pub fn sample_block(cfg: &ModelConfig, seed: u64, scale: f64) -> Block<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fresh_block(cfg, &mut rng, scale)
}

pub(crate) fn validate_batch(cfg: &ModelConfig, batch: &[&[usize]]) -> Result<usize> {
    let first = batch.first().ok_or_else(|| Error::input("empty batch"))?;
    let seq_len = first.len();
    if seq_len == 0 {
        return Err(Error::input("token sequence is empty"));
    }
    if seq_len > cfg.max_seq_len {
        return Err(Error::input(format!(
            "sequence length {seq_len} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    for seq in batch {
        if seq.len() != seq_len {
            return Err(Error::input("all sequences in a batch must share one length"));
        }
        if let Some(&bad) = seq.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocab {}",
                cfg.vocab_size
            )));
        }
    }
    Ok(seq_len)
}

/// Runs embedding plus the surviving blocks (0-based `blocks` indices) and
/// returns the final residual stream `[batch·seq × d]`. `observe` sees the
/// residual after the embedding (layer 0) and after each block (its 1-based
/// number).
pub(crate) fn trunk<G: Graph>(
    g: &mut G,
    w: &Weights<G::Node>,
    cfg: &ModelConfig,
    ids: &[usize],
    seq_len: usize,
    blocks: &[usize],
    mut observe: impl FnMut(&G, usize, &G::Node) -> Result<()>,
) -> Result<G::Node> {
    let mut x = g.embedding(&w.embed, ids)?;
    observe(g, 0, &x)?;
    for &bi in blocks {
        let b = &w.blocks[bi];
        let h = g.rms_norm(&x, &b.attn_norm, NORM_EPS)?;
        let q = g.matmul(&h, &b.wq)?;
        let q = g.rope(&q, seq_len, cfg.n_heads)?;
        let k = g.matmul(&h, &b.wk)?;
        let k = g.rope(&k, seq_len, cfg.n_heads)?;
        let v = g.matmul(&h, &b.wv)?;
        let a = g.attention(&q, &k, &v, seq_len, cfg.n_heads)?;
        let o = g.matmul(&a, &b.wo)?;
        x = g.add(&x, &o)?;
        let h = g.rms_norm(&x, &b.mlp_norm, NORM_EPS)?;
        let u = g.matmul(&h, &b.w_up)?;
        let u = g.gelu(&u)?;
        let m = g.matmul(&u, &b.w_down)?;
        x = g.add(&x, &m)?;
        observe(g, bi + 1, &x)?;
    }
    Ok(x)
}

/// Final norm and output projection.
pub(crate) fn head<G: Graph>(g: &mut G, w: &Weights<G::Node>, x: &G::Node) -> Result<G::Node> {
    let h = g.rms_norm(x, &w.final_norm, NORM_EPS)?;
    g.matmul(&h, &w.w_out)
}

fn last_rows(batch: usize, seq_len: usize) -> Vec<usize> {
    (0..batch).map(|b| b * seq_len + seq_len - 1).collect()
}

impl TransformerModel {
    /// Fresh model drawn from the initialization distribution under `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let embed = Tensor::randn(&[config.vocab_size, d], EMBED_INIT_STD, &mut rng);
        let blocks = (0..config.n_layers).map(|_| fresh_block(&config, &mut rng, 1.0)).collect();
        let final_norm = Tensor::filled(&[d], 1.0);
        let w_out = Tensor::randn(&[d, config.vocab_size], 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(TransformerModel {
            config,
            weights: Weights {
                embed,
                blocks,
                final_norm,
                w_out,
            },
        })
    }

    /// Assembles a model from explicit weights, checking every shape.
    pub fn from_weights(config: ModelConfig, weights: Weights<Tensor>) -> Result<Self> {
        config.validate()?;
        let reference = TransformerModel::shapes(&config);
        if weights.blocks.len() != config.n_layers {
            return Err(Error::Config(format!(
                "expected {} blocks, got {}",
                config.n_layers,
                weights.blocks.len()
            )));
        }
        for ((name, t), (_, shape)) in weights.named().into_iter().zip(reference.named()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!("{name}: non-finite weights")));
            }
        }
        Ok(TransformerModel { config, weights })
    }

    /// Shapes of every parameter, derived from the config alone.
    pub fn shapes(cfg: &ModelConfig) -> Weights<Vec<usize>> {
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let block = Block {
            attn_norm: vec![d],
            wq: vec![d, d],
            wk: vec![d, d],
            wv: vec![d, d],
            wo: vec![d, d],
            mlp_norm: vec![d],
            w_up: vec![d, ff],
            w_down: vec![ff, d],
        };
        Weights {
            embed: vec![v, d],
            blocks: vec![block; cfg.n_layers],
            final_norm: vec![d],
            w_out: vec![d, v],
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn weights(&self) -> &Weights<Tensor> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights<Tensor> {
        &mut self.weights
    }

    pub fn into_weights(self) -> Weights<Tensor> {
        self.weights
    }

    fn plan(&self, mask: &LayerMask) -> Result<Vec<usize>> {
        mask.validate(self.config.n_layers)?;
        Ok(mask.surviving(self.config.n_layers).iter().map(|l| l - 1).collect())
    }

    fn borrowed(&self) -> Weights<std::borrow::Cow<'_, Tensor>> {
        self.weights.map(Eval::param)
    }

    /// Logits `[seq × vocab]` for one sequence.
    pub fn forward(&self, tokens: &[usize], mask: &LayerMask) -> Result<Tensor> {
        let seq_len = validate_batch(&self.config, &[tokens])?;
        let blocks = self.plan(mask)?;
        let w = self.borrowed();
        let mut g = Eval::new();
        let x = trunk(&mut g, &w, &self.config, tokens, seq_len, &blocks, |_, _, _| Ok(()))?;
        Ok(head(&mut g, &w, &x)?.into_owned())
    }

    /// Last-position logits `[batch × vocab]` for equal-length sequences.
    pub fn forward_last(&self, batch: &[&[usize]], mask: &LayerMask) -> Result<Tensor> {
        let seq_len = validate_batch(&self.config, batch)?;
        let blocks = self.plan(mask)?;
        let ids = batch.concat();
        let w = self.borrowed();
        let mut g = Eval::new();
        let x = trunk(&mut g, &w, &self.config, &ids, seq_len, &blocks, |_, _, _| Ok(()))?;
        let x = g.select_rows(&x, &last_rows(batch.len(), seq_len))?;
        Ok(head(&mut g, &w, &x)?.into_owned())
    }

    /// Last-position residual stream at the embedding and after every
    /// surviving layer, in network order.
    pub fn forward_hidden(&self, tokens: &[usize], mask: &LayerMask) -> Result<Vec<HiddenState>> {
        Ok(self
            .forward_hidden_batch(&[tokens], mask)?
            .into_iter()
            .map(|b| HiddenState {
                layer: b.layer,
                vector: b.states.into_data(),
            })
            .collect())
    }

    pub fn forward_hidden_batch(&self, batch: &[&[usize]], mask: &LayerMask) -> Result<Vec<BoundaryBatch>> {
        let seq_len = validate_batch(&self.config, batch)?;
        let blocks = self.plan(mask)?;
        let ids = batch.concat();
        let rows = last_rows(batch.len(), seq_len);
        let w = self.borrowed();
        let mut g = Eval::new();
        let mut out = Vec::with_capacity(blocks.len() + 1);
        trunk(&mut g, &w, &self.config, &ids, seq_len, &blocks, |g, layer, x| {
            out.push(BoundaryBatch {
                layer,
                states: ops::select_rows(g.value(x), &rows)?,
            });
            Ok(())
        })?;
        Ok(out)
    }

    /// Decodes hidden states through the final norm and output projection.
    pub fn decode_hidden(&self, states: &Tensor) -> Result<Tensor> {
        let w = self.borrowed();
        let mut g = Eval::new();
        let x = std::borrow::Cow::Borrowed(states);
        Ok(head(&mut g, &w, &x)?.into_owned())
    }

    /// `softmax(W_out · finalnorm(h⁽ᵏ⁾))` at the last position of the full
    /// model; `k = 0` decodes the embedding output.
    pub fn logit_lens(&self, tokens: &[usize], k: usize) -> Result<Vec<f64>> {
        if k > self.config.n_layers {
            return Err(Error::Range(format!(
                "logit lens layer {k} outside 0..={}",
                self.config.n_layers
            )));
        }
        let hidden = self.forward_hidden_batch(&[tokens], &LayerMask::empty())?;
        let logits = self.decode_hidden(&hidden[k].states)?;
        Ok(ops::softmax_slice(logits.row(0)))
    }

    /// Lens logits `[batch × vocab]` at every boundary `k = 0..=L`.
    pub fn lens_logits_batch(&self, batch: &[&[usize]]) -> Result<Vec<Tensor>> {
        self.forward_hidden_batch(batch, &LayerMask::empty())?
            .iter()
            .map(|b| self.decode_hidden(&b.states))
            .collect()
    }

    /// Physically removes the masked blocks.
    pub fn materialize_pruned(&self, mask: &LayerMask) -> Result<Self> {
        let keep = self.plan(mask)?;
        let mut config = self.config.clone();
        config.n_layers = keep.len();
        let weights = Weights {
            embed: self.weights.embed.clone(),
            blocks: keep.iter().map(|&i| self.weights.blocks[i].clone()).collect(),
            final_norm: self.weights.final_norm.clone(),
            w_out: self.weights.w_out.clone(),
        };
        Ok(TransformerModel { config, weights })
    }

    /// Replaces block `layer` (1-based).
    pub fn replace_block(&mut self, layer: usize, block: Block<Tensor>) -> Result<()> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(Error::Range(format!("layer {layer} outside 1..={}", self.config.n_layers)));
        }
        self.weights.blocks[layer - 1] = block;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(n_layers: usize, seed: u64) -> TransformerModel {
        TransformerModel::init(ModelConfig {
            n_layers,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 6,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn config_rejects_bad_heads() {
        let mut cfg = tiny(2, 0).config().clone();
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.n_heads = 1;
        cfg.n_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = tiny(3, 42).config().clone();
        assert_eq!(ModelConfig::from_canonical_text(&cfg.to_canonical_text()).unwrap(), cfg);
    }

    #[test]
    fn mask_invariants() {
        assert!(LayerMask::new([1], 1).is_err());
        assert!(LayerMask::new([0], 3).is_err());
        assert!(LayerMask::new([4], 3).is_err());
        assert!(LayerMask::new([2, 2], 3).is_err());
        let m = LayerMask::new([3, 1], 4).unwrap();
        assert_eq!(m.iter().collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(m.surviving(4), vec![2, 4]);
        assert_eq!(LayerMask::parse("3, 1", 4).unwrap(), m);
        assert_eq!(m.to_string(), "{1,3}");
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = tiny(2, 1);
        assert!(m.forward(&[], &LayerMask::empty()).is_err());
        assert!(m.forward(&[11], &LayerMask::empty()).is_err());
        assert!(m.forward(&[1; 7], &LayerMask::empty()).is_err());
        assert!(m.forward(&[1], &LayerMask::empty().with(1).with(2)).is_err());
    }

    #[test]
    fn empty_mask_on_single_layer_model_only() {
        let m = tiny(1, 2);
        assert!(m.forward(&[1, 2], &LayerMask::empty()).is_ok());
        assert!(LayerMask::new([1], 1).is_err());
    }

    #[test]
    fn hidden_labels_follow_mask() {
        let m = tiny(4, 3);
        let h = m.forward_hidden(&[1, 2, 3], &LayerMask::empty()).unwrap();
        assert_eq!(h.len(), 5);
        let h = m.forward_hidden(&[1, 2, 3], &LayerMask::new([2], 4).unwrap()).unwrap();
        assert_eq!(h.iter().map(|s| s.layer).collect::<Vec<_>>(), vec![0, 1, 3, 4]);
    }

    #[test]
    fn last_hidden_decodes_to_forward_logits() {
        let m = tiny(3, 4);
        let toks = [4, 1, 9, 2];
        let logits = m.forward(&toks, &LayerMask::empty()).unwrap();
        let h = m.forward_hidden(&toks, &LayerMask::empty()).unwrap();
        let last = Tensor::new(vec![1, 8], h.last().unwrap().vector.clone()).unwrap();
        let dec = m.decode_hidden(&last).unwrap();
        let diff = dec
            .data()
            .iter()
            .zip(logits.row(3))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-9);
    }

    #[test]
    fn lens_range_checked() {
        let m = tiny(2, 5);
        assert!(m.logit_lens(&[1], 3).is_err());
        assert_eq!(m.logit_lens(&[1], 0).unwrap().len(), 11);
    }

    #[test]
    fn materialize_empty_is_copy() {
        let m = tiny(3, 6);
        assert_eq!(m.materialize_pruned(&LayerMask::empty()).unwrap(), m);
    }

    #[test]
    fn materialize_composes() {
        let m = tiny(5, 7);
        let (a, b) = (2usize, 4usize);
        let once = m.materialize_pruned(&LayerMask::new([a], 5).unwrap()).unwrap();
        let twice = once.materialize_pruned(&LayerMask::new([b - 1], 4).unwrap()).unwrap();
        let direct = m.materialize_pruned(&LayerMask::new([a, b], 5).unwrap()).unwrap();
        assert_eq!(twice, direct);
    }

    #[test]
    fn causal_prefix_invariance() {
        let m = tiny(2, 8);
        let a = m.forward(&[1, 2, 3, 4], &LayerMask::empty()).unwrap();
        let b = m.forward(&[1, 2, 7, 10], &LayerMask::empty()).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn batch_rows_match_single_forward() {
        let m = tiny(2, 9);
        let s1 = [1usize, 2, 3];
        let s2 = [5usize, 6, 0];
        let batch = m.forward_last(&[&s1, &s2], &LayerMask::empty()).unwrap();
        let rev = m.forward_last(&[&s2, &s1], &LayerMask::empty()).unwrap();
        let f1 = m.forward(&s1, &LayerMask::empty()).unwrap();
        assert_eq!(batch.row(0), f1.row(2));
        assert_eq!(batch.row(0), rev.row(1));
    }
}
