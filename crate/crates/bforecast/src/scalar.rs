//! Scalar abstraction: all numeric kernels are generic over `Scalar`,
//! instantiated as `f32` for training/inference and `f64` for gradient checks.

use num_traits::{Float, NumAssignOps};

/// Floating-point element type of tensors: `f32` or `f64`.
pub trait Scalar:
    Float + NumAssignOps + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    /// General matrix multiply, `c = alpha * op(a)(m x k) * op(b)(k x n) + beta * c`.
    /// Slices are row-major contiguous; `ta`/`tb` mark an operand as stored transposed
    /// (i.e. the buffer holds the k x m / n x k layout).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: &[Self], ta: bool,
        b: &[Self], tb: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize, k: usize, n: usize,
                alpha: Self,
                a: &[Self], ta: bool,
                b: &[Self], tb: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m, k, n, alpha,
                        a.as_ptr(), rsa, csa,
                        b.as_ptr(), rsb, csb,
                        beta,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
