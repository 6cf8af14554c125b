use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};

use super::Real;

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Selu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(&self, x: &Array4<T>) -> Array4<T> {
        match self {
            Activation::Identity => x.clone(),
            Activation::Relu => x.mapv(|v| v.max(T::zero())),
            Activation::Selu => {
                let (l, a) = (T::c(SELU_LAMBDA), T::c(SELU_ALPHA));
                x.mapv(|v| if v > T::zero() { l * v } else { l * a * (v.exp() - T::one()) })
            }
            Activation::Tanh => x.mapv(T::tanh),
        }
    }

    /// Gradient w.r.t. the input given the cached input `x` and output `y`.
    pub fn backward<T: Real>(&self, x: &Array4<T>, y: &Array4<T>, gy: &Array4<T>) -> Array4<T> {
        match self {
            Activation::Identity => gy.clone(),
            Activation::Relu => {
                Zip::from(gy).and(x).map_collect(|&g, &v| if v > T::zero() { g } else { T::zero() })
            }
            Activation::Selu => {
                let (l, a) = (T::c(SELU_LAMBDA), T::c(SELU_ALPHA));
                Zip::from(gy)
                    .and(x)
                    .and(y)
                    .map_collect(|&g, &v, &o| if v > T::zero() { g * l } else { g * (o + l * a) })
            }
            Activation::Tanh => Zip::from(gy).and(y).map_collect(|&g, &o| g * (T::one() - o * o)),
        }
    }
}
