use rand::Rng;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Weight `[out, in / groups, kh, kw]`.
    Conv,
    /// Weight `[in, out]`.
    Linear,
    Bias,
    BatchNormScale,
    BatchNormShift,
}

/// He-uniform for conv/linear weights (`U(-b, b)`, `b = sqrt(6 / fan_in)`),
/// zeros for biases, and the identity affine map for batch norm.
///
/// Values are drawn in `f64` and rounded, so the same seed gives the same
/// parameters for either scalar type up to rounding.
pub fn init_parameters<T: Scalar>(kind: LayerKind, shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    match kind {
        LayerKind::Conv | LayerKind::Linear => {
            let fan_in = match kind {
                LayerKind::Conv => shape[1..].iter().product::<usize>(),
                _ => shape[0],
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
        }
        LayerKind::Bias | LayerKind::BatchNormShift => Tensor::zeros(shape),
        LayerKind::BatchNormScale => Tensor::full(shape, T::one()),
    }
}
