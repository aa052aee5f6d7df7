//! A small reverse-mode tape. Nodes are whole-tensor operations recorded in
//! execution order; `backward` walks the tape once in reverse.

use crate::error::{shape_err, LteError, Result};
use crate::numerics::{
    activation, causal_attention, causal_attention_backward, layer_norm, layer_norm_backward, lit,
    matmul, matmul_nt, matmul_tn, sigmoid, softmax_row, Activation, AttentionCache, LayerNormCache,
    Real, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    /// `a · bᵀ`
    MatmulNt(Var, Var),
    Add(Var, Var),
    /// Adds a length-`cols` vector to every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Act(Var, Activation),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        cache: LayerNormCache<T>,
    },
    /// Rows of `table` picked by `ids`.
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        cache: AttentionCache<T>,
    },
    /// `h[t, j] · w[t, j / group]`.
    GroupScale {
        h: Var,
        w: Var,
        group: usize,
    },
    /// Softmax over the kept entries of each row, zero elsewhere.
    MaskedSoftmax {
        logits: Var,
        kept: Vec<Vec<usize>>,
    },
    /// Mean cross-entropy of each row against its target.
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    MeanSquare(Var),
    /// Mean of `1 / max((x − center)², floor)`.
    MeanInvSqDist {
        x: Var,
        center: f64,
        floor: f64,
    },
    SumAll(Var),
    /// `Σ c_i · s_i` over scalar nodes.
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar<T: Real>(v: T) -> Tensor<T> {
    Tensor::full(&[1], v)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatmulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add_row_vector(self.value(b).data())?;
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn act(&mut self, a: Var, kind: Activation) -> Var {
        let v = activation(self.value(a), kind);
        self.push(v, Op::Act(a, kind))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let (v, cache) = layer_norm(self.value(x), self.value(g).data(), self.value(b).data())?;
        Ok(self.push(v, Op::LayerNorm { x, g, b, cache }))
    }

    pub fn embed(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let v = self.value(table).gather_rows(&ids)?;
        Ok(self.push(v, Op::Embed { table, ids }))
    }

    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let (out, cache) = causal_attention(
            self.value(q),
            self.value(k),
            self.value(v),
            batch,
            seq,
            heads,
        )?;
        Ok(self.push(out, Op::Attention { q, k, v, cache }))
    }

    pub fn group_scale(&mut self, h: Var, w: Var, group: usize) -> Result<Var> {
        let (hv, wv) = (self.value(h), self.value(w));
        if hv.rows() != wv.rows() || wv.cols() * group != hv.cols() {
            return Err(shape_err!(
                "group scale of {:?} by {:?} in groups of {group}",
                hv.shape(),
                wv.shape()
            ));
        }
        let c = hv.cols();
        let v = Tensor::from_fn(hv.shape(), |i| hv.data()[i] * wv.at(i / c, (i % c) / group));
        Ok(self.push(v, Op::GroupScale { h, w, group }))
    }

    pub fn masked_softmax(&mut self, logits: Var, kept: Vec<Vec<usize>>) -> Result<Var> {
        let z = self.value(logits);
        if kept.len() != z.rows() {
            return Err(shape_err!(
                "{} kept lists for {} rows",
                kept.len(),
                z.rows()
            ));
        }
        let mut out = Tensor::zeros(z.shape());
        for (t, sel) in kept.iter().enumerate() {
            let mut vals: Vec<T> = sel.iter().map(|&i| z.at(t, i)).collect();
            softmax_row(&mut vals);
            for (&i, w) in sel.iter().zip(vals) {
                out.row_mut(t)[i] = w;
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax { logits, kept }))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != targets.len() {
            return Err(shape_err!(
                "{} logit rows for {} targets",
                z.rows(),
                targets.len()
            ));
        }
        let mut s = T::zero();
        for (t, &y) in targets.iter().enumerate() {
            s -= crate::numerics::log_softmax_row(z.row(t))[y as usize];
        }
        let v = scalar(s / lit(targets.len() as f64));
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.iter().map(|&y| y as usize).collect(),
            },
        ))
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = scalar(xv.data().iter().map(|&a| a * a).sum::<T>() / lit(xv.len() as f64));
        self.push(v, Op::MeanSquare(x))
    }

    pub fn mean_inv_sq_dist(&mut self, x: Var, center: f64, floor: f64) -> Var {
        let xv = self.value(x);
        let (c, f): (T, T) = (lit(center), lit(floor));
        let s: T = xv
            .data()
            .iter()
            .map(|&a| T::one() / ((a - c) * (a - c)).max(f))
            .sum();
        let v = scalar(s / lit(xv.len() as f64));
        self.push(v, Op::MeanInvSqDist { x, center, floor })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let s: T = terms
            .iter()
            .map(|&(v, c)| self.value(v).data()[0] * lit(c))
            .sum();
        self.push(scalar(s), Op::WeightedSum(terms))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    /// Entries for nodes the loss does not depend on are `None`.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            ));
        }
        if !self.value(loss).all_finite() {
            return Err(LteError::Numeric(format!(
                "non-finite loss {}",
                self.scalar_value(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(grads)
    }

    fn backprop_node(
        &self,
        i: usize,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |v: Var, g: Tensor<T>| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        let val = |v: Var| self.value(v);
        let s0 = |dy: &Tensor<T>| dy.data()[0];
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                acc(*a, matmul_nt(dy, val(*b))?)?;
                acc(*b, matmul_tn(val(*a), dy)?)?;
            }
            Op::MatmulNt(a, b) => {
                acc(*a, matmul(dy, val(*b))?)?;
                acc(*b, matmul_tn(dy, val(*a))?)?;
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone())?;
                acc(*b, dy.clone())?;
            }
            Op::AddRow(a, b) => {
                acc(*a, dy.clone())?;
                let mut db = vec![T::zero(); dy.cols()];
                for r in 0..dy.rows() {
                    for (s, &g) in db.iter_mut().zip(dy.row(r)) {
                        *s += g;
                    }
                }
                acc(*b, Tensor::new(val(*b).shape().to_vec(), db)?)?;
            }
            Op::Mul(a, b) => {
                acc(*a, dy.zip_map(val(*b), |g, y| g * y)?)?;
                acc(*b, dy.zip_map(val(*a), |g, x| g * x)?)?;
            }
            Op::Act(a, kind) => {
                let x = val(*a);
                acc(
                    *a,
                    Tensor::from_fn(x.shape(), |j| dy.data()[j] * kind.derivative(x.data()[j])),
                )?;
            }
            Op::Sigmoid(a) => {
                let s = &self.nodes[i].value;
                acc(*a, dy.zip_map(s, |g, s| g * s * (T::one() - s))?)?;
            }
            Op::LayerNorm { x, g, b, cache } => {
                let (dx, dg, db) = layer_norm_backward(dy, cache, val(*g).data());
                acc(*x, dx)?;
                acc(*g, Tensor::new(val(*g).shape().to_vec(), dg)?)?;
                acc(*b, Tensor::new(val(*b).shape().to_vec(), db)?)?;
            }
            Op::Embed { table, ids } => {
                let mut dt = Tensor::zeros(val(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &g) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                acc(*table, dt)?;
            }
            Op::Attention { q, k, v, cache } => {
                let (dq, dk, dv) = causal_attention_backward(dy, val(*q), val(*k), val(*v), cache);
                acc(*q, dq)?;
                acc(*k, dk)?;
                acc(*v, dv)?;
            }
            Op::GroupScale { h, w, group } => {
                let (hv, wv) = (val(*h), val(*w));
                let c = hv.cols();
                acc(
                    *h,
                    Tensor::from_fn(hv.shape(), |j| dy.data()[j] * wv.at(j / c, (j % c) / group)),
                )?;
                let mut dw = Tensor::zeros(wv.shape());
                for t in 0..hv.rows() {
                    let (dr, hr) = (dy.row(t), hv.row(t));
                    for (e, o) in dw.row_mut(t).iter_mut().enumerate() {
                        *o = (e * group..(e + 1) * group).map(|j| dr[j] * hr[j]).sum();
                    }
                }
                acc(*w, dw)?;
            }
            Op::MaskedSoftmax { logits, kept } => {
                let wv = &self.nodes[i].value;
                let mut dz = Tensor::zeros(wv.shape());
                for (t, sel) in kept.iter().enumerate() {
                    let inner: T = sel.iter().map(|&j| wv.at(t, j) * dy.at(t, j)).sum();
                    for &j in sel {
                        dz.row_mut(t)[j] = wv.at(t, j) * (dy.at(t, j) - inner);
                    }
                }
                acc(*logits, dz)?;
            }
            Op::CrossEntropy { logits, targets } => {
                let z = val(*logits);
                let scale = s0(dy) / lit(targets.len() as f64);
                let mut dz = z.clone();
                for (t, &y) in targets.iter().enumerate() {
                    let row = dz.row_mut(t);
                    softmax_row(row);
                    row[y] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(*logits, dz)?;
            }
            Op::MeanSquare(x) => {
                let xv = val(*x);
                let c = s0(dy) * lit(2.0 / xv.len() as f64);
                acc(*x, xv.map(|a| a * c))?;
            }
            Op::MeanInvSqDist { x, center, floor } => {
                let xv = val(*x);
                let (c, f): (T, T) = (lit(*center), lit(*floor));
                let k = s0(dy) / lit(xv.len() as f64);
                acc(
                    *x,
                    xv.map(|a| {
                        let d = a - c;
                        if d * d > f {
                            k * lit::<T>(-2.0) / (d * d * d)
                        } else {
                            T::zero()
                        }
                    }),
                )?;
            }
            Op::SumAll(x) => acc(*x, Tensor::full(val(*x).shape(), s0(dy)))?,
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    acc(v, scalar(s0(dy) * lit(c)))?;
                }
            }
        }
        Ok(())
    }
}
