//! Dense tensors, a reverse-mode tape over the handful of primitives the
//! transformer and adapters need, and a finite-difference gradient checker.

mod gradcheck;
mod kernels;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, compare_with_finite_differences, GradReport, FD_STEP};
pub use real::Real;
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

/// Exact (error-function) GELU applied elementwise outside a tape.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape().to_vec(), |i| kernels::gelu(x.data()[i]))
}

/// Operations the tape can differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    BiasAdd,
    Conv1x1,
    Conv3x3,
    LayerNorm,
    Softmax,
    MaskedSoftmax,
    Attention,
    Gelu,
    CrossEntropy,
    MeanSquaredError,
    Add,
    Scale,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::BiasAdd => "bias_add",
            Primitive::Conv1x1 => "conv1x1",
            Primitive::Conv3x3 => "conv3x3",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Softmax => "softmax",
            Primitive::MaskedSoftmax => "masked_softmax",
            Primitive::Attention => "attention",
            Primitive::Gelu => "gelu",
            Primitive::CrossEntropy => "cross_entropy",
            Primitive::MeanSquaredError => "mse",
            Primitive::Add => "add",
            Primitive::Scale => "scale",
        }
    }
}

/// Capability descriptor: every primitive listed here has a reverse-mode rule.
/// A 1×1 convolution over tokens is a matmul plus a bias add.
pub fn primitive_set() -> &'static [Primitive] {
    &[
        Primitive::MatMul,
        Primitive::BiasAdd,
        Primitive::Conv1x1,
        Primitive::Conv3x3,
        Primitive::LayerNorm,
        Primitive::Softmax,
        Primitive::MaskedSoftmax,
        Primitive::Attention,
        Primitive::Gelu,
        Primitive::CrossEntropy,
        Primitive::MeanSquaredError,
        Primitive::Add,
        Primitive::Scale,
    ]
}
