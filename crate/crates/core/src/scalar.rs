//! Floating-point scalar abstraction.
//!
//! Model math is generic over [`Scalar`] so the same code runs at `f32`
//! (training and shipped inference) and `f64` (tight numeric verification).

use num_traits::{Float, NumAssignOps, NumCast};

pub trait Scalar:
    Float
    + NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Convert a finite `f64` into this scalar type.
    fn cast(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to any scalar")
    }

    fn cast_f32(v: f32) -> Self {
        <Self as NumCast>::from(v).expect("finite f32 converts to any scalar")
    }

    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar converts to f64")
    }

    fn as_f32(self) -> f32 {
        <f32 as NumCast>::from(self).expect("scalar converts to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
