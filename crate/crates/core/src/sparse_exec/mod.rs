//! Structured-sparse FFN execution.
//!
//! Expert weights are packed so that a selected expert is a handful of
//! contiguous slices: up-projection columns are stored neuron-major (each
//! neuron's `d_model` input weights adjacent, i.e. column-major `W_up`), and
//! down-projection rows stay row-major. Skipped experts are never touched.

mod bench;
mod flops;

use std::collections::BTreeMap;

use crate::error::{invalid, shape_err, LteError, Result};
use crate::model::{Ffn, FfnLayer, FfnParams, GluFfnLayer, NeuronLayout};
use crate::numerics::{axpy, dot, sigmoid, Activation, Real, Tensor};

pub use bench::{bench, BenchConfig, BenchPath, BenchReport, BenchRow, BenchShape};
pub use flops::{flops_per_token, FlopsReport};

#[derive(Debug, Clone, PartialEq)]
pub enum PackedUp<T> {
    TwoMatmul {
        up: Vec<T>,
        bias: Vec<T>,
        activation: Activation,
    },
    Glu {
        gate: Vec<T>,
        up: Vec<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedExpertWeights<T = f32> {
    pub d_model: usize,
    pub d_ffn: usize,
    pub expert_size: usize,
    pub n_experts: usize,
    pub up: PackedUp<T>,
    /// `d_ffn × d_model`, row-major.
    pub down: Vec<T>,
    pub down_bias: Option<Vec<T>>,
}

fn columns_major<T: Real>(w: &Tensor<T>) -> Vec<T> {
    w.transpose().into_data()
}

/// Packs a layer whose neurons are already in expert-contiguous order.
pub fn pack<T: Real>(layer: &Ffn<T>) -> Result<PackedExpertWeights<T>> {
    let NeuronLayout::ExpertContiguous { expert_size } = layer.layout else {
        return Err(LteError::InvalidArgument(
            "layer is not permuted into expert-contiguous order".into(),
        ));
    };
    let (d_model, d_ffn) = (layer.d_model(), layer.d_ffn());
    let (up, down, down_bias) = match &layer.params {
        FfnParams::TwoMatmul(l) => (
            PackedUp::TwoMatmul {
                up: columns_major(&l.w1),
                bias: l.b1.data().to_vec(),
                activation: l.activation,
            },
            l.w2.data().to_vec(),
            Some(l.b2.data().to_vec()),
        ),
        FfnParams::Glu(l) => (
            PackedUp::Glu {
                gate: columns_major(&l.w_gate),
                up: columns_major(&l.w_up),
            },
            l.w_down.data().to_vec(),
            None,
        ),
    };
    Ok(PackedExpertWeights {
        d_model,
        d_ffn,
        expert_size,
        n_experts: d_ffn / expert_size,
        up,
        down,
        down_bias,
    })
}

impl<T: Real> PackedExpertWeights<T> {
    pub fn expert_offset(&self, e: usize) -> usize {
        e * self.d_model * self.expert_size
    }

    /// Input-side weights of expert `e`: `expert_size` columns of `d_model`.
    pub fn up_slice(&self, e: usize) -> &[T] {
        let w = match &self.up {
            PackedUp::TwoMatmul { up, .. } => up,
            PackedUp::Glu { up, .. } => up,
        };
        &w[self.expert_offset(e)..self.expert_offset(e + 1)]
    }

    pub fn down_slice(&self, e: usize) -> &[T] {
        &self.down[self.expert_offset(e)..self.expert_offset(e + 1)]
    }

    pub fn unpack(&self) -> Ffn<T> {
        let (d, f) = (self.d_model, self.d_ffn);
        let from_cols = |c: &[T]| {
            Tensor::matrix(f, d, c.to_vec())
                .expect("packed shape")
                .transpose()
        };
        let down = Tensor::matrix(f, d, self.down.clone()).expect("packed shape");
        let params = match &self.up {
            PackedUp::TwoMatmul {
                up,
                bias,
                activation,
            } => FfnParams::TwoMatmul(FfnLayer {
                w1: from_cols(up),
                b1: Tensor::new(vec![f], bias.clone()).expect("packed shape"),
                w2: down,
                b2: Tensor::new(vec![d], self.down_bias.clone().unwrap_or_default())
                    .expect("packed shape"),
                activation: *activation,
            }),
            PackedUp::Glu { gate, up } => FfnParams::Glu(GluFfnLayer {
                w_gate: from_cols(gate),
                w_up: from_cols(up),
                w_down: down,
            }),
        };
        Ffn {
            params,
            layout: NeuronLayout::ExpertContiguous {
                expert_size: self.expert_size,
            },
        }
    }

    fn check_selection(&self, sel: &[usize]) -> Result<()> {
        for w in sel.windows(2) {
            if w[0] >= w[1] {
                return Err(invalid!(
                    "expert ids must be strictly ascending, got {sel:?}"
                ));
            }
        }
        if let Some(&last) = sel.last() {
            if last >= self.n_experts {
                return Err(invalid!("expert id {last} out of range {}", self.n_experts));
            }
        }
        Ok(())
    }

    /// Adds `weight · E(x)_e` for every token in `group` to `out`.
    fn accumulate_expert(&self, e: usize, weights: &[T], xs: &[&[T]], outs: &mut [Vec<T>]) {
        let d = self.d_model;
        let base = e * self.expert_size;
        for j in base..base + self.expert_size {
            let down_row = &self.down[j * d..(j + 1) * d];
            match &self.up {
                PackedUp::TwoMatmul {
                    up,
                    bias,
                    activation,
                } => {
                    let col = &up[j * d..(j + 1) * d];
                    for ((x, out), &w) in xs.iter().zip(outs.iter_mut()).zip(weights) {
                        let a = activation.apply(dot(x, col) + bias[j]);
                        if a != T::zero() {
                            axpy(a * w, down_row, out);
                        }
                    }
                }
                PackedUp::Glu { gate, up } => {
                    let gcol = &gate[j * d..(j + 1) * d];
                    let ucol = &up[j * d..(j + 1) * d];
                    for ((x, out), &w) in xs.iter().zip(outs.iter_mut()).zip(weights) {
                        let g = dot(x, gcol);
                        let a = g * sigmoid(g) * dot(x, ucol);
                        if a != T::zero() {
                            axpy(a * w, down_row, out);
                        }
                    }
                }
            }
        }
    }
}

/// FFN output computed from the selected experts only. `selections[t]` lists
/// the experts of token `t` in strictly ascending order; an empty list yields
/// the shared bias (zero for SwiGLU).
pub fn sparse_ffn_forward<T: Real>(
    packed: &PackedExpertWeights<T>,
    selections: &[Vec<usize>],
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    sparse_forward_impl(packed, selections, None, x)
}

/// Like [`sparse_ffn_forward`] with expert outputs scaled per token:
/// `Σ_e weights[t][i]·E(x)_e` for `e = selections[t][i]`.
pub fn sparse_ffn_forward_weighted<T: Real>(
    packed: &PackedExpertWeights<T>,
    selections: &[Vec<usize>],
    weights: &[Vec<T>],
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    if weights.len() != selections.len()
        || weights
            .iter()
            .zip(selections)
            .any(|(w, s)| w.len() != s.len())
    {
        return Err(shape_err!("weights must mirror selections"));
    }
    sparse_forward_impl(packed, selections, Some(weights), x)
}

fn sparse_forward_impl<T: Real>(
    packed: &PackedExpertWeights<T>,
    selections: &[Vec<usize>],
    weights: Option<&[Vec<T>]>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    x.expect_cols(packed.d_model, "sparse ffn input")?;
    if selections.len() != x.rows() {
        return Err(shape_err!(
            "{} selections for {} tokens",
            selections.len(),
            x.rows()
        ));
    }
    for s in selections {
        packed.check_selection(s)?;
    }
    let d = packed.d_model;
    let mut out = Tensor::zeros(&[x.rows(), d]);

    if weights.is_none() {
        // Tokens with identical selections share one pass over the gathered slices.
        let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
        for (t, s) in selections.iter().enumerate() {
            groups.entry(s.as_slice()).or_default().push(t);
        }
        for (sel, tokens) in groups {
            let xs: Vec<&[T]> = tokens.iter().map(|&t| x.row(t)).collect();
            let mut outs = vec![vec![T::zero(); d]; tokens.len()];
            let ones = vec![T::one(); tokens.len()];
            for &e in sel {
                packed.accumulate_expert(e, &ones, &xs, &mut outs);
            }
            for (&t, o) in tokens.iter().zip(outs) {
                out.row_mut(t).copy_from_slice(&o);
            }
        }
    } else {
        let weights = weights.expect("checked");
        for t in 0..x.rows() {
            let mut o = vec![vec![T::zero(); d]];
            for (&e, &w) in selections[t].iter().zip(&weights[t]) {
                packed.accumulate_expert(e, &[w], &[x.row(t)], &mut o);
            }
            out.row_mut(t).copy_from_slice(&o[0]);
        }
    }
    if let Some(b) = &packed.down_bias {
        out = out.add_row_vector(b)?;
    }
    Ok(out)
}

/// Expands per-token expert weights to a `T × d_ffn` neuron coefficient matrix
/// for the dense reference computation.
pub fn expert_coefficients<T: Real>(
    selections: &[Vec<usize>],
    weights: Option<&[Vec<T>]>,
    n_experts: usize,
    expert_size: usize,
) -> Tensor<T> {
    let f = n_experts * expert_size;
    let mut c = Tensor::zeros(&[selections.len().max(1), f]);
    for (t, sel) in selections.iter().enumerate() {
        for (i, &e) in sel.iter().enumerate() {
            let w = weights.map_or(T::one(), |w| w[t][i]);
            for v in &mut c.row_mut(t)[e * expert_size..(e + 1) * expert_size] {
                *v = w;
            }
        }
    }
    c
}
