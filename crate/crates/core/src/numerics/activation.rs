use serde::{Deserialize, Serialize};

use super::{lit, Real, Tensor};

/// √(2/π) as used by the tanh approximation of GeLU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    GeluTanh,
    Silu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::GeluTanh => "gelu_tanh",
            Activation::Silu => "silu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "gelu_tanh" | "gelu" => Some(Activation::GeluTanh),
            "silu" | "swish" => Some(Activation::Silu),
            _ => None,
        }
    }

    #[inline]
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::GeluTanh => {
                let inner = lit::<T>(GELU_SQRT_2_OVER_PI) * (x + lit::<T>(GELU_CUBIC) * x * x * x);
                lit::<T>(0.5) * x * (T::one() + inner.tanh())
            }
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative at `x`; relu uses 0 at the kink.
    #[inline]
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::GeluTanh => {
                let c = lit::<T>(GELU_SQRT_2_OVER_PI);
                let a = lit::<T>(GELU_CUBIC);
                let inner = c * (x + a * x * x * x);
                let th = inner.tanh();
                let half = lit::<T>(0.5);
                half * (T::one() + th)
                    + half * x * (T::one() - th * th) * c * (T::one() + lit::<T>(3.0) * a * x * x)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Real>(h: &Tensor<T>, kind: Activation) -> Tensor<T> {
    h.map(|v| kind.apply(v))
}

pub fn activation_grad<T: Real>(h: &Tensor<T>, kind: Activation) -> Tensor<T> {
    h.map(|v| kind.derivative(v))
}
