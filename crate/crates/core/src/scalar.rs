use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type of the model: `f32` for training and
/// inference, `f64` for gradient checking.
pub trait Scalar:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + Send + Sync + Debug + Display + Default + 'static
{
    fn from_f64c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
