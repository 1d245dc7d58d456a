use std::fmt;
use std::str::FromStr;

use super::{NdArray, Scalar};
use crate::error::Error;

/// Elementwise nonlinearities used across the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    /// `max(x, 0)²`, the attention score kernel.
    ReluSquared,
    Silu,
    Sigmoid,
    /// tanh approximation.
    Gelu,
    /// `x·σ(x)`; numerically the same map as SiLU, kept as a separate name for
    /// gate ablations.
    Swish,
    /// Identity. As a gate activation this makes the gate bilinear.
    Identity,
}

impl Activation {
    pub const GATE_CHOICES: [Activation; 5] = [
        Activation::Relu,
        Activation::Gelu,
        Activation::Swish,
        Activation::Identity,
        Activation::Sigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::ReluSquared => "relu_squared",
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
            Activation::Gelu => "gelu",
            Activation::Swish => "swish",
            Activation::Identity => "bilinear",
        }
    }

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::ReluSquared => {
                let r = x.max(T::zero());
                r * r
            }
            Activation::Silu | Activation::Swish => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => {
                let (c, a) = gelu_consts::<T>();
                let inner = c * (x + a * x * x * x);
                T::of(0.5) * x * (T::one() + inner.tanh())
            }
            Activation::Identity => x,
        }
    }

    /// Derivative with respect to the input.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::ReluSquared => T::of(2.0) * x.max(T::zero()),
            Activation::Silu | Activation::Swish => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Gelu => {
                let (c, a) = gelu_consts::<T>();
                let inner = c * (x + a * x * x * x);
                let t = inner.tanh();
                let half = T::of(0.5);
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
            }
            Activation::Identity => T::one(),
        }
    }

    pub fn forward<T: Scalar>(self, x: &NdArray<T>) -> NdArray<T> {
        x.map(|v| self.apply(v))
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    // Branch-free; exp overflow gives inf and the quotient saturates to 0.
    T::one() / (T::one() + (-x).exp())
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "relu" => Activation::Relu,
            "relu_squared" | "relu2" => Activation::ReluSquared,
            "silu" => Activation::Silu,
            "sigmoid" => Activation::Sigmoid,
            "gelu" => Activation::Gelu,
            "swish" => Activation::Swish,
            "bilinear" | "identity" | "linear" => Activation::Identity,
            other => return Err(Error::Config(format!("unknown activation `{other}`"))),
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(Activation::ReluSquared.apply(-2.0f64), 0.0);
        assert_eq!(Activation::ReluSquared.apply(3.0f64), 9.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Identity.apply(-1.5f64), -1.5);
    }

    #[test]
    fn unknown_kind_is_config_error() {
        assert!(matches!(
            "softmax".parse::<Activation>(),
            Err(Error::Config(_))
        ));
        assert_eq!(
            "Bilinear".parse::<Activation>().unwrap(),
            Activation::Identity
        );
    }

    #[test]
    fn derivatives_match_central_differences() {
        let all = [
            Activation::Relu,
            Activation::ReluSquared,
            Activation::Silu,
            Activation::Sigmoid,
            Activation::Gelu,
            Activation::Swish,
            Activation::Identity,
        ];
        let h = 1e-6;
        for act in all {
            for &x in &[-2.3f64, -0.7, 0.4, 1.9, 5.0] {
                let num = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                let ana = act.derivative(x);
                assert!((num - ana).abs() < 1e-7, "{act}: x={x} {num} vs {ana}");
            }
        }
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
    }
}
