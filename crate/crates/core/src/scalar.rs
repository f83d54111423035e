//! Scalar abstraction: all numeric code is generic over f32/f64.
//!
//! Gradient checks instantiate everything at f64; training runs use f32.

use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64c(v: f64) -> Self;
    fn to_f64c(self) -> f64;
    fn from_f32c(v: f32) -> Self;
    fn to_f32c(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64c(v: f64) -> Self {
        v as f32
    }
    fn to_f64c(self) -> f64 {
        self as f64
    }
    fn from_f32c(v: f32) -> Self {
        v
    }
    fn to_f32c(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64c(v: f64) -> Self {
        v
    }
    fn to_f64c(self) -> f64 {
        self
    }
    fn from_f32c(v: f32) -> Self {
        v as f64
    }
    fn to_f32c(self) -> f32 {
        self as f32
    }
}

/// Shorthand constant conversion, `sc::<S>(0.5)`.
#[inline]
pub fn sc<S: Scalar>(v: f64) -> S {
    S::from_f64c(v)
}
