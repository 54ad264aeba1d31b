//! Raw forward/backward kernels over flat buffers. The autodiff [`Graph`](crate::Graph)
//! wraps these; they are not part of the public surface.

pub(crate) mod attention;
pub mod conv;
pub(crate) mod gemm;
pub(crate) mod norm;
pub(crate) mod spatial;

use core::f64::consts::{FRAC_1_SQRT_2, PI};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * PI);
    cdf + x * pdf
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}
