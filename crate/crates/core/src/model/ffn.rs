use crate::error::{shape_err, Result};
use crate::numerics::{activation, matmul, sigmoid, Activation, Real, Tensor};

use super::FfnKind;

/// `σ(xW1 + b1)W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnLayer<T = f32> {
    /// `d_model × d_ffn`
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    /// `d_ffn × d_model`
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub activation: Activation,
}

/// `(silu(xW_gate) ⊙ xW_up)W_down`.
#[derive(Debug, Clone, PartialEq)]
pub struct GluFfnLayer<T = f32> {
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnParams<T = f32> {
    TwoMatmul(FfnLayer<T>),
    Glu(GluFfnLayer<T>),
}

/// Order of the intermediate neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeuronLayout {
    Original,
    /// Expert `e` owns neurons `[e·expert_size, (e+1)·expert_size)`.
    ExpertContiguous {
        expert_size: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ffn<T = f32> {
    pub params: FfnParams<T>,
    pub layout: NeuronLayout,
}

pub fn ffn_forward<T: Real>(layer: &FfnLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let h = matmul(x, &layer.w1)?.add_row_vector(layer.b1.data())?;
    matmul(&activation(&h, layer.activation), &layer.w2)?.add_row_vector(layer.b2.data())
}

pub fn glu_ffn_forward<T: Real>(layer: &GluFfnLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    matmul(&glu_intermediate(layer, x)?, &layer.w_down)
}

fn glu_intermediate<T: Real>(layer: &GluFfnLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let gate = matmul(x, &layer.w_gate)?;
    let up = matmul(x, &layer.w_up)?;
    gate.zip_map(&up, |g, u| g * sigmoid(g) * u)
}

impl<T: Real> Ffn<T> {
    pub fn dense(params: FfnParams<T>) -> Self {
        Self {
            params,
            layout: NeuronLayout::Original,
        }
    }

    pub fn kind(&self) -> FfnKind {
        match self.params {
            FfnParams::TwoMatmul(_) => FfnKind::TwoMatmul,
            FfnParams::Glu(_) => FfnKind::Swiglu,
        }
    }

    pub fn d_model(&self) -> usize {
        self.down_weight().cols()
    }

    pub fn d_ffn(&self) -> usize {
        self.down_weight().rows()
    }

    pub fn down_weight(&self) -> &Tensor<T> {
        match &self.params {
            FfnParams::TwoMatmul(l) => &l.w2,
            FfnParams::Glu(l) => &l.w_down,
        }
    }

    /// The shared down-projection bias, added once after expert outputs are summed.
    pub fn down_bias(&self) -> Option<&[T]> {
        match &self.params {
            FfnParams::TwoMatmul(l) => Some(l.b2.data()),
            FfnParams::Glu(_) => None,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_cols(self.d_model(), "ffn input")?;
        match &self.params {
            FfnParams::TwoMatmul(l) => ffn_forward(l, x),
            FfnParams::Glu(l) => glu_ffn_forward(l, x),
        }
    }

    /// Post-activation intermediate values (`T × d_ffn`), the per-neuron
    /// coefficients of the down-projection rows.
    pub fn intermediate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_cols(self.d_model(), "ffn input")?;
        match &self.params {
            FfnParams::TwoMatmul(l) => {
                let h = matmul(x, &l.w1)?.add_row_vector(l.b1.data())?;
                Ok(activation(&h, l.activation))
            }
            FfnParams::Glu(l) => glu_intermediate(l, x),
        }
    }

    /// Down-projection of intermediate values plus the shared bias.
    pub fn project_down(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let y = matmul(a, self.down_weight())?;
        match self.down_bias() {
            Some(b) => y.add_row_vector(b),
            None => Ok(y),
        }
    }

    /// Dense computation with intermediate neurons scaled by `coef`
    /// (`T × d_ffn`); a 0/1 `coef` is the dense-mask reference.
    pub fn forward_scaled(&self, x: &Tensor<T>, coef: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.intermediate(x)?;
        self.project_down(&a.zip_map(coef, |v, c| v * c)?)
    }

    /// Reorders intermediate neurons: new neuron `i` is old neuron `perm[i]`.
    /// Does not change `layout`.
    pub fn permute_neurons(&self, perm: &[usize]) -> Result<Self> {
        let f = self.d_ffn();
        if perm.len() != f {
            return Err(shape_err!(
                "permutation of length {} for d_ffn {f}",
                perm.len()
            ));
        }
        let cols = |w: &Tensor<T>| -> Result<Tensor<T>> {
            w.transpose().gather_rows(perm).map(|t| t.transpose())
        };
        let vec = |b: &Tensor<T>| -> Result<Tensor<T>> {
            Tensor::new(vec![f], perm.iter().map(|&i| b.data()[i]).collect())
        };
        let params = match &self.params {
            FfnParams::TwoMatmul(l) => FfnParams::TwoMatmul(FfnLayer {
                w1: cols(&l.w1)?,
                b1: vec(&l.b1)?,
                w2: l.w2.gather_rows(perm)?,
                b2: l.b2.clone(),
                activation: l.activation,
            }),
            FfnParams::Glu(l) => FfnParams::Glu(GluFfnLayer {
                w_gate: cols(&l.w_gate)?,
                w_up: cols(&l.w_up)?,
                w_down: l.w_down.gather_rows(perm)?,
            }),
        };
        Ok(Self {
            params,
            layout: self.layout,
        })
    }

    /// Per-neuron clustering features (`d_ffn × d_model`): columns of W1, or
    /// of the gate weight for SwiGLU.
    pub fn neuron_features(&self) -> Tensor<T> {
        match &self.params {
            FfnParams::TwoMatmul(l) => l.w1.transpose(),
            FfnParams::Glu(l) => l.w_gate.transpose(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match &self.params {
            FfnParams::TwoMatmul(l) => {
                vec![("w1", &l.w1), ("b1", &l.b1), ("w2", &l.w2), ("b2", &l.b2)]
            }
            FfnParams::Glu(l) => {
                vec![
                    ("w_gate", &l.w_gate),
                    ("w_up", &l.w_up),
                    ("w_down", &l.w_down),
                ]
            }
        }
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match &mut self.params {
            FfnParams::TwoMatmul(l) => vec![
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
            ],
            FfnParams::Glu(l) => vec![
                ("w_gate", &mut l.w_gate),
                ("w_up", &mut l.w_up),
                ("w_down", &mut l.w_down),
            ],
        }
    }

    pub fn cast<U: Real>(&self) -> Ffn<U> {
        let params = match &self.params {
            FfnParams::TwoMatmul(l) => FfnParams::TwoMatmul(FfnLayer {
                w1: l.w1.cast(),
                b1: l.b1.cast(),
                w2: l.w2.cast(),
                b2: l.b2.cast(),
                activation: l.activation,
            }),
            FfnParams::Glu(l) => FfnParams::Glu(GluFfnLayer {
                w_gate: l.w_gate.cast(),
                w_up: l.w_up.cast(),
                w_down: l.w_down.cast(),
            }),
        };
        Ffn {
            params,
            layout: self.layout,
        }
    }
}
