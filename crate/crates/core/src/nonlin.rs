use serde::{Deserialize, Serialize};

use crate::tensor::Real;

/// Componentwise non-decreasing activation functions supported by the
/// forward pass, interval propagation, and the dual conjugate solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    Sigmoid,
    Tanh,
}

impl Nonlinearity {
    pub const ALL: [Nonlinearity; 3] = [Self::Relu, Self::Sigmoid, Self::Tanh];

    pub fn name(self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
        }
    }

    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            Self::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Self::Sigmoid => sigmoid(x),
            Self::Tanh => x.tanh(),
        }
    }

    /// Derivative, with `relu'(0) = 0`.
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Self::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Self::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Self::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
        }
    }

    /// Global supremum of `|h'|`.
    pub fn max_slope(self) -> f64 {
        match self {
            Self::Relu | Self::Tanh => 1.0,
            Self::Sigmoid => 0.25,
        }
    }

    /// All registered nonlinearities are non-decreasing, which is what the
    /// endpoint rule of interval propagation relies on.
    pub fn is_monotone(self) -> bool {
        true
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Self::Relu),
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            other => Err(format!("unknown nonlinearity '{other}'")),
        }
    }
}
