//! Dense matrix arithmetic, seeded randomness, SGD, and the finite-difference
//! gradient oracle shared by every other module.

mod gradcheck;
mod rng;
mod sgd;
mod tensor;
mod vector;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use rng::Rng;
pub use sgd::{sgd_step, SgdConfig, SgdState};
pub use tensor::{dot, norm2, Tensor2D};
pub use vector::{l2_normalize, neg_cosine, neg_cosine_grad, NORM_EPS};

/// Free-function form of [`Tensor2D::matmul`].
pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> crate::Result<Tensor2D> {
    a.matmul(b)
}
