//! Parameter-free Laplacian frequency split.
//!
//! The low band is a stride-`s` max pool of the input. The high band is
//! `nearest_upsample(low, s) - x`, so the input is recovered as `upsample(low) - high`.

use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::spatial;
use crate::tensor::Tensor;

/// Low/high decomposition of one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyPair {
    /// `(B, H/s, W/s, C)` max-pooled map.
    pub low: Tensor,
    /// `(B, H, W, C)` residual `upsample(low) - x`.
    pub high: Tensor,
    pub stride: usize,
}

impl FrequencyPair {
    /// `upsample(low, s) - high`.
    pub fn reconstruct(&self) -> Tensor {
        let up = nearest_upsample(&self.low, self.stride).expect("low band is rank 4");
        let data = up.data().iter().zip(self.high.data()).map(|(u, h)| u - h).collect();
        Tensor::new(self.high.shape(), data).expect("bands agree in shape")
    }
}

fn check(dims: (usize, usize, usize, usize), s: usize) -> Result<()> {
    if s < 2 {
        return Err(config_err!("pool stride must be at least 2, got {}", s));
    }
    if !dims.1.is_multiple_of(s) || !dims.2.is_multiple_of(s) {
        return Err(Error::Indivisible {
            height: dims.1,
            width: dims.2,
            factor: s,
        });
    }
    Ok(())
}

pub fn laplacian_split(x: &Tensor, s: usize) -> Result<FrequencyPair> {
    let dims = x.dims4()?;
    check(dims, s)?;
    let (low, _) = spatial::max_pool_forward(x.data(), dims, s);
    let low = Tensor::new([dims.0, dims.1 / s, dims.2 / s, dims.3], low)?;
    let up = spatial::upsample_forward(low.data(), (dims.0, dims.1 / s, dims.2 / s, dims.3), s);
    let high = up.iter().zip(x.data()).map(|(u, v)| u - v).collect();
    Ok(FrequencyPair {
        low,
        high: Tensor::new(x.shape(), high)?,
        stride: s,
    })
}

pub fn nearest_upsample(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Tensor::new([b, h * s, w * s, c], spatial::upsample_forward(x.data(), (b, h, w, c), s))
}

/// Differentiable split inside a graph; returns `(low, high)`.
///
/// A stride of 1 is accepted here as the degenerate split `low = x`, `high = x - x = 0`,
/// which the network uses when a stage is too small to pool.
pub fn laplacian_split_graph(g: &mut Graph, x: Var, s: usize) -> Result<(Var, Var)> {
    let dims = g.value(x).dims4()?;
    if s == 1 {
        let high = g.sub(x, x)?;
        return Ok((x, high));
    }
    check(dims, s)?;
    let low = g.max_pool(x, s)?;
    let up = g.upsample(low, s)?;
    let high = g.sub(up, x)?;
    Ok((low, high))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn worked_two_by_two() {
        let x = Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = laplacian_split(&x, 2).unwrap();
        assert_eq!(p.low.data(), &[4.0]);
        assert_eq!(p.high.data(), &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(p.reconstruct(), x);
    }

    #[test]
    fn constant_input_has_no_high_band() {
        let x = Tensor::full([2, 4, 4, 3], 2.5);
        let p = laplacian_split(&x, 2).unwrap();
        assert!(p.low.data().iter().all(|&v| v == 2.5));
        assert!(p.high.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_strides() {
        let x = Tensor::zeros([1, 6, 6, 1]);
        assert!(matches!(laplacian_split(&x, 4), Err(Error::Indivisible { factor: 4, .. })));
        assert!(laplacian_split(&x, 1).is_err());
        assert!(laplacian_split(&Tensor::zeros([1, 1, 1, 2]), 2).is_err());
    }
}
