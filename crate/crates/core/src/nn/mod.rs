//! Minimal tensor engine for the face network.
//!
//! Only the operations the embedding network uses are provided: reflection
//! padding, stride-1 convolution, ReLU, 2-d batch normalisation, 2×2 max
//! pooling, flatten and fully connected layers. Gradients are computed by
//! replaying a per-forward trace in reverse (see [`Sequential`]).

mod checkpoint;
pub mod gradcheck;
mod layers;
mod optim;
mod sequential;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use checkpoint::{read_layers, write_layers, CHECKPOINT_MAGIC};
pub use layers::{BatchNorm2d, Conv2d, Layer, LayerKind, Linear, ReflectionPad};
pub use optim::Sgd;
pub use sequential::Sequential;
pub use layers::{batchnorm, conv2d, flatten, linear, maxpool2x2, reflection_pad, relu};
pub use tensor::Tensor;

/// Errors raised by tensor operations.
#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Whether batch normalisation uses batch statistics (and updates its
/// running estimates) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMode {
    Training,
    #[default]
    Evaluation,
}

/// Scalar type of a tensor. Implemented for `f32` (training and inference)
/// and `f64` (gradient checks).
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Row-major `c = alpha * a * b + beta * c` where `a` is `m×k` and `b`
    /// is `k×n`, both possibly read transposed from storage.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits the float type")
    }
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // op(X) is rows×cols; X is stored row-major as rows×cols, or cols×rows when transposed
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_float {
    ($t:ty, $kernel:path) => {
        impl Float for $t {
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(trans_a, m, k);
                let (rsb, csb) = strides(trans_b, k, n);
                // SAFETY: the length checks above bound every index the kernel
                // touches for the given extents and strides.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_float!(f32, matrixmultiply::sgemm);
impl_float!(f64, matrixmultiply::dgemm);
