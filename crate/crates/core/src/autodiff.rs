//! Reverse-mode differentiation on a per-forward tape.
//!
//! [`Graph`] abstracts the op set used by the transformer so the same
//! forward code runs either on plain tensors ([`Eval`]) or recorded on a
//! [`Tape`] for training. Both routes call the kernels in [`crate::ops`],
//! so their forward values are bitwise identical.

use std::borrow::Cow;
use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub trait Graph {
    type Node: Clone;

    fn value<'n>(&'n self, node: &'n Self::Node) -> &'n Tensor;
    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn rms_norm(&mut self, x: &Self::Node, w: &Self::Node, eps: f64) -> Result<Self::Node>;
    fn gelu(&mut self, x: &Self::Node) -> Result<Self::Node>;
    fn rope(&mut self, x: &Self::Node, seq_len: usize, n_heads: usize) -> Result<Self::Node>;
    fn attention(
        &mut self,
        q: &Self::Node,
        k: &Self::Node,
        v: &Self::Node,
        seq_len: usize,
        n_heads: usize,
    ) -> Result<Self::Node>;
    fn embedding(&mut self, table: &Self::Node, ids: &[usize]) -> Result<Self::Node>;
    fn select_rows(&mut self, x: &Self::Node, rows: &[usize]) -> Result<Self::Node>;
}

/// Untracked evaluation: parameters are borrowed, activations owned.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval<'a> {
    _params: PhantomData<&'a Tensor>,
}

impl<'a> Eval<'a> {
    pub fn new() -> Self {
        Eval { _params: PhantomData }
    }

    pub fn param(t: &'a Tensor) -> Cow<'a, Tensor> {
        Cow::Borrowed(t)
    }
}

impl<'a> Graph for Eval<'a> {
    type Node = Cow<'a, Tensor>;

    fn value<'n>(&'n self, node: &'n Self::Node) -> &'n Tensor {
        node
    }
    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        ops::matmul(a, b).map(Cow::Owned)
    }
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        ops::add(a, b).map(Cow::Owned)
    }
    fn rms_norm(&mut self, x: &Self::Node, w: &Self::Node, eps: f64) -> Result<Self::Node> {
        ops::rms_norm(x, w, eps).map(Cow::Owned)
    }
    fn gelu(&mut self, x: &Self::Node) -> Result<Self::Node> {
        Ok(Cow::Owned(ops::gelu(x)))
    }
    fn rope(&mut self, x: &Self::Node, seq_len: usize, n_heads: usize) -> Result<Self::Node> {
        ops::rope(x, seq_len, n_heads).map(Cow::Owned)
    }
    fn attention(
        &mut self,
        q: &Self::Node,
        k: &Self::Node,
        v: &Self::Node,
        seq_len: usize,
        n_heads: usize,
    ) -> Result<Self::Node> {
        ops::causal_attention(q, k, v, seq_len, n_heads).map(|a| Cow::Owned(a.out))
    }
    fn embedding(&mut self, table: &Self::Node, ids: &[usize]) -> Result<Self::Node> {
        ops::embedding(table, ids).map(Cow::Owned)
    }
    fn select_rows(&mut self, x: &Self::Node, rows: &[usize]) -> Result<Self::Node> {
        ops::select_rows(x, rows).map(Cow::Owned)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    RmsNorm { x: usize, w: usize, eps: f64 },
    Gelu(usize),
    Softmax { x: usize, axis: usize },
    Rope { x: usize, seq_len: usize, n_heads: usize },
    Attention { q: usize, k: usize, v: usize, seq_len: usize, n_heads: usize, probs: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    SelectRows { x: usize, rows: Vec<usize> },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    WeightedSum { x: usize, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A single-owner recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar w.r.t. every node reachable from it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `target.grad` (zeros if unreachable).
    pub fn write_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        let g = self.get(v).map_or_else(|| vec![0.0; target.len()], <[f64]>::to_vec);
        target.set_grad(g)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (parameter or input), copying its data.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.clear_grad();
        self.push(value, Op::Leaf)
    }

    pub fn get(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let y = ops::add_bias(self.get(x), self.get(bias))?;
        Ok(self.push(y, Op::AddBias(x.0, bias.0)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.get(x), axis)?;
        Ok(self.push(y, Op::Softmax { x: x.0, axis }))
    }

    /// Mean cross-entropy of `labels` under the rows of `logits`; scalar output.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ce = ops::cross_entropy(self.get(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(ce),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `Σ xᵢ·wᵢ` with constant weights; scalar output.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xv = self.get(x);
        if weights.len() != xv.len() {
            return Err(Error::Dimension {
                op: "weighted_sum",
                lhs: xv.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x: x.0, weights }))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar output, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
            match &mut grads[idx] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (da, db) = ops::matmul_backward(&self.nodes[*a].value, &self.nodes[*b].value, &g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddBias(x, b) => {
                    let c = self.nodes[*b].value.len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(&mut grads, *x, g.clone());
                    acc(&mut grads, *b, db);
                }
                Op::RmsNorm { x, w, eps } => {
                    let (dx, dw) = ops::rms_norm_backward(&self.nodes[*x].value, &self.nodes[*w].value, *eps, &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                }
                Op::Gelu(x) => {
                    let dx = ops::gelu_backward(&self.nodes[*x].value, &g);
                    acc(&mut grads, *x, dx);
                }
                Op::Softmax { x, axis } => {
                    let dx = ops::softmax_backward(&node.value, *axis, &g);
                    acc(&mut grads, *x, dx);
                }
                Op::Rope { x, seq_len, n_heads } => {
                    let gt = Tensor::new(node.value.shape().to_vec(), g.clone())?;
                    let dx = ops::rope_backward(&gt, *seq_len, *n_heads)?;
                    acc(&mut grads, *x, dx.into_data());
                }
                Op::Attention { q, k, v, seq_len, n_heads, probs } => {
                    let (dq, dk, dv) = ops::causal_attention_backward(
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        probs,
                        *seq_len,
                        *n_heads,
                        &g,
                    );
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::Embedding { table, ids } => {
                    let dt = ops::embedding_backward(self.nodes[*table].value.shape(), ids, &g);
                    acc(&mut grads, *table, dt);
                }
                Op::SelectRows { x, rows } => {
                    let dx = ops::select_rows_backward(self.nodes[*x].value.shape(), rows, &g);
                    acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy { logits, labels } => {
                    let dl = ops::cross_entropy_backward(&self.nodes[*logits].value, labels, g[0]);
                    acc(&mut grads, *logits, dl);
                }
                Op::WeightedSum { x, weights } => {
                    let dx = weights.iter().map(|w| w * g[0]).collect();
                    acc(&mut grads, *x, dx);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

impl Graph for Tape {
    type Node = Var;

    fn value<'n>(&'n self, node: &'n Var) -> &'n Tensor {
        self.get(*node)
    }
    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::matmul(self.get(*a), self.get(*b))?;
        Ok(self.push(y, Op::MatMul(a.0, b.0)))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = ops::add(self.get(*a), self.get(*b))?;
        Ok(self.push(y, Op::Add(a.0, b.0)))
    }
    fn rms_norm(&mut self, x: &Var, w: &Var, eps: f64) -> Result<Var> {
        let y = ops::rms_norm(self.get(*x), self.get(*w), eps)?;
        Ok(self.push(y, Op::RmsNorm { x: x.0, w: w.0, eps }))
    }
    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let y = ops::gelu(self.get(*x));
        Ok(self.push(y, Op::Gelu(x.0)))
    }
    fn rope(&mut self, x: &Var, seq_len: usize, n_heads: usize) -> Result<Var> {
        let y = ops::rope(self.get(*x), seq_len, n_heads)?;
        Ok(self.push(y, Op::Rope { x: x.0, seq_len, n_heads }))
    }
    fn attention(&mut self, q: &Var, k: &Var, v: &Var, seq_len: usize, n_heads: usize) -> Result<Var> {
        let a = ops::causal_attention(self.get(*q), self.get(*k), self.get(*v), seq_len, n_heads)?;
        Ok(self.push(
            a.out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                seq_len,
                n_heads,
                probs: a.probs,
            },
        ))
    }
    fn embedding(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let y = ops::embedding(self.get(*table), ids)?;
        Ok(self.push(
            y,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }
    fn select_rows(&mut self, x: &Var, rows: &[usize]) -> Result<Var> {
        let y = ops::select_rows(self.get(*x), rows)?;
        Ok(self.push(
            y,
            Op::SelectRows {
                x: x.0,
                rows: rows.to_vec(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 2]));
        let y = tape.gelu(&x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn cross_entropy_of_zero_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(&[1, 2]));
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(logits).unwrap(), &[-0.5, 0.5]);
    }

    #[test]
    fn shared_node_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = tape.add(&x, &x).unwrap();
        let s = tape.weighted_sum(y, vec![1.0, 3.0]).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 6.0]);
    }

    #[test]
    fn eval_and_tape_agree_bitwise() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let wv = tape.leaf(&w);
        let t = tape.rms_norm(&av, &wv, 1e-6).unwrap();
        let mut e = Eval::new();
        let ev = e.rms_norm(&Eval::param(&a), &Eval::param(&w), 1e-6).unwrap();
        assert_eq!(tape.get(t).data(), ev.data());
    }
}
