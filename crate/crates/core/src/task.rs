//! Seeded synthetic classification tasks with single-token answers.
//!
//! Vocabulary layout: input tokens occupy `0..input_vocab()`, the `K`
//! answer tokens follow at `input_vocab()..input_vocab() + K`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Bit string; label is the count of ones mod 2.
    Parity,
    /// Symbols `0..K`; label is their sum mod `K`.
    ModularSum,
    /// `k₁ v₁ … kₚ vₚ q`; label is the value bound to query key `q`.
    KvLookup,
    /// Symbols `0..K`; label is the unique most frequent symbol.
    Majority,
    /// Symbols `0..K`; label is the last symbol.
    CopyLast,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Parity,
        TaskKind::ModularSum,
        TaskKind::KvLookup,
        TaskKind::Majority,
        TaskKind::CopyLast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Parity => "parity",
            TaskKind::ModularSum => "modular_sum",
            TaskKind::KvLookup => "kv_lookup",
            TaskKind::Majority => "majority",
            TaskKind::CopyLast => "copy_last",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::input(format!("unknown task kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    /// Input alphabet size: bits for parity, keys for kv_lookup, symbols otherwise.
    pub n_symbols: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Reference configuration for each task kind.
    pub fn default_for(kind: TaskKind, seed: u64) -> Self {
        let (seq_len, n_symbols, n_classes) = match kind {
            TaskKind::Parity => (14, 2, 2),
            TaskKind::ModularSum => (6, 5, 5),
            TaskKind::KvLookup => (7, 6, 4),
            TaskKind::Majority => (9, 3, 3),
            TaskKind::CopyLast => (8, 8, 8),
        };
        TaskSpec {
            kind,
            seq_len,
            n_symbols,
            n_classes,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_classes;
        if k < 2 {
            return Err(Error::Config(format!("n_classes must be >= 2, got {k}")));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be >= 1".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config("every split needs at least one example".into()));
        }
        match self.kind {
            TaskKind::Parity => {
                if self.n_symbols != 2 || k != 2 {
                    return Err(Error::Config("parity takes 2 symbols and 2 classes".into()));
                }
            }
            TaskKind::ModularSum | TaskKind::Majority | TaskKind::CopyLast => {
                if k > self.n_symbols {
                    return Err(Error::Config(format!(
                        "{}: {k} classes exceed the {} available answer symbols",
                        self.kind, self.n_symbols
                    )));
                }
                if self.n_symbols != k {
                    return Err(Error::Config(format!(
                        "{}: n_symbols must equal n_classes",
                        self.kind
                    )));
                }
            }
            TaskKind::KvLookup => {
                if self.seq_len.is_multiple_of(2) || self.seq_len < 3 {
                    return Err(Error::Config("kv_lookup needs odd seq_len >= 3".into()));
                }
                if (self.seq_len - 1) / 2 > self.n_symbols {
                    return Err(Error::Config("kv_lookup needs at least as many keys as pairs".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of non-answer tokens.
    pub fn input_vocab(&self) -> usize {
        match self.kind {
            TaskKind::KvLookup => self.n_symbols + self.n_classes,
            _ => self.n_symbols,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.input_vocab() + self.n_classes
    }

    pub fn answer_token(&self, label: usize) -> usize {
        self.input_vocab() + label
    }

    /// Token ids of the `K` answer tokens, in label order.
    pub fn answer_tokens(&self) -> std::ops::Range<usize> {
        self.input_vocab()..self.input_vocab() + self.n_classes
    }

    pub fn to_canonical_text(&self) -> String {
        format!(
            "kind={}\nseq_len={}\nn_symbols={}\nn_classes={}\nn_train={}\nn_val={}\nn_test={}\nseed={}\n",
            self.kind, self.seq_len, self.n_symbols, self.n_classes, self.n_train, self.n_val, self.n_test, self.seed
        )
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let kv = crate::kv::parse_canonical(
            text,
            &["kind", "seq_len", "n_symbols", "n_classes", "n_train", "n_val", "n_test", "seed"],
        )?;
        let num = |k: &str| -> Result<usize> {
            kv[k].parse().map_err(|_| Error::Config(format!("{k}: not an integer")))
        };
        let spec = TaskSpec {
            kind: kv["kind"].parse()?,
            seq_len: num("seq_len")?,
            n_symbols: num("n_symbols")?,
            n_classes: num("n_classes")?,
            n_train: num("n_train")?,
            n_val: num("n_val")?,
            n_test: num("n_test")?,
            seed: kv["seed"].parse().map_err(|_| Error::Config("seed: not a u64".into()))?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Lowercase hex SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> String {
        crate::persist::sha256_hex(self.to_canonical_text().as_bytes())
    }

    /// Ground-truth label of a sequence, or `None` if it has none (majority ties).
    pub fn label_of(&self, tokens: &[usize]) -> Option<usize> {
        let k = self.n_classes;
        match self.kind {
            TaskKind::Parity => Some(tokens.iter().filter(|&&t| t == 1).count() % 2),
            TaskKind::ModularSum => Some(tokens.iter().sum::<usize>() % k),
            TaskKind::CopyLast => tokens.last().copied(),
            TaskKind::Majority => {
                let mut counts = vec![0usize; k];
                for &t in tokens {
                    counts[t] += 1;
                }
                let max = *counts.iter().max()?;
                let winners: Vec<usize> = (0..k).filter(|&c| counts[c] == max).collect();
                (winners.len() == 1).then(|| winners[0])
            }
            TaskKind::KvLookup => {
                let (query, pairs) = tokens.split_last()?;
                pairs
                    .chunks(2)
                    .find(|p| p[0] == *query)
                    .map(|p| p[1] - self.n_symbols)
            }
        }
    }

    fn sample(&self, label: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let (t, k) = (self.seq_len, self.n_classes);
        match self.kind {
            TaskKind::Parity => {
                let mut bits: Vec<usize> = (0..t).map(|_| rng.gen_range(0..2)).collect();
                if bits.iter().sum::<usize>() % 2 != label {
                    let i = rng.gen_range(0..t);
                    bits[i] ^= 1;
                }
                bits
            }
            TaskKind::ModularSum => {
                let mut xs: Vec<usize> = (0..t).map(|_| rng.gen_range(0..k)).collect();
                let head: usize = xs[..t - 1].iter().sum();
                xs[t - 1] = (label + k * t - head % k) % k;
                xs
            }
            TaskKind::CopyLast => {
                let mut xs: Vec<usize> = (0..t).map(|_| rng.gen_range(0..k)).collect();
                xs[t - 1] = label;
                xs
            }
            TaskKind::Majority => loop {
                let xs: Vec<usize> = (0..t).map(|_| rng.gen_range(0..k)).collect();
                if self.label_of(&xs) == Some(label) {
                    break xs;
                }
            },
            TaskKind::KvLookup => {
                let pairs = (t - 1) / 2;
                let mut keys: Vec<usize> = (0..self.n_symbols).collect();
                keys.shuffle(rng);
                keys.truncate(pairs);
                let mut values: Vec<usize> = (0..pairs).map(|_| rng.gen_range(0..k)).collect();
                let q = rng.gen_range(0..pairs);
                values[q] = label;
                let mut xs = Vec::with_capacity(t);
                for (key, v) in keys.iter().zip(&values) {
                    xs.push(*key);
                    xs.push(self.n_symbols + v);
                }
                xs.push(keys[q]);
                xs
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut c = vec![0; n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Examples `range` as a borrowed batch.
    pub fn batch(&self, range: std::ops::Range<usize>) -> Vec<&[usize]> {
        self.tokens[range].iter().map(Vec::as_slice).collect()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Split {
        Split {
            tokens: self.tokens[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    /// Line-delimited `tokens<TAB>label`, tokens space-separated.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (toks, label) in self.tokens.iter().zip(&self.labels) {
            let t: Vec<String> = toks.iter().map(ToString::to_string).collect();
            out.push_str(&t.join(" "));
            out.push('\t');
            out.push_str(&label.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_records(text: &str) -> Result<Split> {
        let mut split = Split::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::input(format!("record line {}: malformed {line:?}", lineno + 1));
            let (toks, label) = line.split_once('\t').ok_or_else(bad)?;
            let toks = toks
                .split(' ')
                .map(|t| t.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            split.tokens.push(toks);
            split.labels.push(label.parse().map_err(|_| bad())?);
        }
        Ok(split)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

/// Generates the three splits from disjoint seed streams. Labels are
/// assigned round-robin and shuffled, so each split is balanced to within
/// one example per class. No validation or test sequence occurs in an
/// earlier split.
pub fn generate(spec: &TaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let mut earlier: HashSet<Vec<usize>> = HashSet::new();
    let mut splits = Vec::with_capacity(3);
    for (stream, n) in [(0u64, spec.n_train), (1, spec.n_val), (2, spec.n_test)] {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
        labels.shuffle(&mut rng);
        let mut tokens = Vec::with_capacity(n);
        for &label in &labels {
            let mut attempts = 0;
            let seq = loop {
                let s = spec.sample(label, &mut rng);
                if !earlier.contains(&s) {
                    break s;
                }
                attempts += 1;
                if attempts >= MAX_ATTEMPTS {
                    return Err(Error::Config(format!(
                        "{}: sequence space too small for disjoint splits",
                        spec.kind
                    )));
                }
            };
            tokens.push(seq);
        }
        earlier.extend(tokens.iter().cloned());
        splits.push(Split { tokens, labels });
    }
    let mut it = splits.into_iter();
    Ok(TaskDataset {
        spec: spec.clone(),
        train: it.next().expect("train"),
        val: it.next().expect("val"),
        test: it.next().expect("test"),
    })
}

/// Shannon entropy of a label marginal from counts, in bits.
pub fn entropy_bits(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

/// Empirical `H(Y)` of a split's labels, in bits.
pub fn entropy_of_labels(split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Usage("entropy of an empty split".into()));
    }
    let k = split.labels.iter().max().map_or(0, |m| m + 1);
    Ok(entropy_bits(&split.label_counts(k)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
        }
        assert!("qa".parse::<TaskKind>().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TaskSpec::default_for(TaskKind::KvLookup, 9);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.to_records(), b.train.to_records());
    }

    #[test]
    fn parity_definition() {
        let spec = TaskSpec::default_for(TaskKind::Parity, 0);
        assert_eq!(spec.label_of(&[1, 0, 1, 1]), Some(1));
        assert_eq!(spec.label_of(&[1, 0, 1, 0]), Some(0));
    }

    #[test]
    fn majority_matches_brute_force_counter() {
        let spec = TaskSpec::default_for(TaskKind::Majority, 4);
        let ds = generate(&spec).unwrap();
        for (toks, &label) in ds.train.tokens.iter().zip(&ds.train.labels) {
            let mut best = (0, 0usize);
            let mut tie = false;
            for s in 0..spec.n_classes {
                let c = toks.iter().filter(|&&t| t == s).count();
                if c > best.0 {
                    best = (c, s);
                    tie = false;
                } else if c == best.0 {
                    tie = true;
                }
            }
            assert!(!tie);
            assert_eq!(best.1, label);
        }
    }

    #[test]
    fn every_kind_labels_agree_and_balance() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::default_for(kind, 1);
            let ds = generate(&spec).unwrap();
            for split in [&ds.train, &ds.val, &ds.test] {
                for (t, &l) in split.tokens.iter().zip(&split.labels) {
                    assert_eq!(t.len(), spec.seq_len);
                    assert!(t.iter().all(|&x| x < spec.input_vocab()));
                    assert_eq!(spec.label_of(t), Some(l), "{kind}");
                }
                let uniform = 1.0 / spec.n_classes as f64;
                for c in split.label_counts(spec.n_classes) {
                    assert!((c as f64 / split.len() as f64 - uniform).abs() <= 0.05);
                }
            }
            let train: HashSet<_> = ds.train.tokens.iter().collect();
            assert!(ds.val.tokens.iter().all(|t| !train.contains(t)), "{kind}");
            let val: HashSet<_> = ds.val.tokens.iter().collect();
            assert!(ds.test.tokens.iter().all(|t| !train.contains(t) && !val.contains(t)));
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut spec = TaskSpec::default_for(TaskKind::CopyLast, 0);
        spec.n_classes = 9;
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let mut spec = TaskSpec::default_for(TaskKind::Parity, 0);
        spec.n_classes = 3;
        assert!(generate(&spec).is_err());
        let mut spec = TaskSpec::default_for(TaskKind::Parity, 0);
        spec.seq_len = 3;
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy_bits(&[5, 5]) - 1.0).abs() < 1e-15);
        assert!((entropy_bits(&[2, 2, 2, 2]) - 2.0).abs() < 1e-15);
        // -(3/4) log2(3/4) - (1/4) log2(1/4)
        let direct = -(0.75f64 * 0.75f64.log2()) - 0.25 * 0.25f64.log2();
        assert!((entropy_bits(&[3, 1]) - direct).abs() < 1e-15);
        assert!((entropy_bits(&[3, 1]) - 0.8113).abs() < 5e-5);
        assert!(entropy_of_labels(&Split::default()).is_err());
    }

    #[test]
    fn records_and_spec_text_round_trip() {
        let spec = TaskSpec::default_for(TaskKind::ModularSum, 3);
        assert_eq!(TaskSpec::from_canonical_text(&spec.to_canonical_text()).unwrap(), spec);
        let ds = generate(&spec).unwrap();
        assert_eq!(Split::from_records(&ds.val.to_records()).unwrap(), ds.val);
        assert!(Split::from_records("1 2 x\t0\n").is_err());
    }
}
