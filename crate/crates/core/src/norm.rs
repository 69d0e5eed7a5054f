//! Layer normalization.
//!
//! Besides the plain row-wise normalization, the model uses two grouped
//! layouts: per-head normalization of head outputs, and a residual-stream
//! normalization whose statistics may be restricted to an active prefix of
//! every head block. The restriction is what lets a grown model normalize
//! exactly like the model it was grown from (see `scaling`).

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Affine parameters of a normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub eps: f64,
}

impl<F: Real> NormParams<F> {
    pub fn new(gamma: Tensor<F>, beta: Tensor<F>, eps: f64) -> Result<Self> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Contract(format!("norm eps must be positive, got {eps}")));
        }
        if gamma.rows() != 1 || gamma.shape() != beta.shape() {
            return Err(Error::shape("norm params", gamma.shape(), beta.shape()));
        }
        Ok(NormParams { gamma, beta, eps })
    }

    /// gamma = 1, beta = 0.
    pub fn identity(dim: usize) -> Self {
        NormParams {
            gamma: Tensor::full(1, dim, F::one()),
            beta: Tensor::zeros(1, dim),
            eps: DEFAULT_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.cols()
    }
}

/// How the columns of a row are grouped for normalization statistics.
///
/// Columns are split into `blocks` equal blocks. Only the first `active`
/// columns of each block enter the statistics; every column is normalized.
/// With `joint`, one mean/variance is shared by all blocks, otherwise every
/// block has its own.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormLayout {
    pub blocks: usize,
    pub active: usize,
    pub joint: bool,
    pub eps: f64,
}

impl NormLayout {
    /// Ordinary layer norm over `cols` columns.
    pub fn plain(cols: usize, eps: f64) -> Self {
        NormLayout { blocks: 1, active: cols, joint: true, eps }
    }

    fn check(&self, cols: usize) -> Result<usize> {
        if self.blocks == 0 || !cols.is_multiple_of(self.blocks) {
            return Err(Error::Contract(format!("{cols} columns do not split into {} blocks", self.blocks)));
        }
        let width = cols / self.blocks;
        if self.active == 0 || self.active > width {
            return Err(Error::Contract(format!("active width {} outside 1..={width}", self.active)));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Contract("norm eps must be positive".into()));
        }
        Ok(width)
    }

    /// Stat domains as (coverage column ranges, active column ranges).
    fn domains(&self, width: usize) -> Vec<(Vec<Span>, Vec<Span>)> {
        let block = |b: usize| (b * width, (b + 1) * width);
        let act = |b: usize| (b * width, b * width + self.active);
        if self.joint {
            vec![((0..self.blocks).map(block).collect(), (0..self.blocks).map(act).collect())]
        } else {
            (0..self.blocks).map(|b| (vec![block(b)], vec![act(b)])).collect()
        }
    }
}

/// Half-open column range `[start, end)`.
type Span = (usize, usize);

/// Forward kernel.
pub(crate) fn norm_forward<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    layout: &NormLayout,
) -> Result<Tensor<F>> {
    let cols = x.cols();
    let width = layout.check(cols)?;
    if gamma.shape() != (1, cols) || beta.shape() != (1, cols) {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let eps = F::of(layout.eps);
    let domains = layout.domains(width);
    let mut out = Tensor::zeros(x.rows(), cols);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let orow = out.row_mut(r);
        for (cover, active) in &domains {
            let (mean, std) = stats(xr, active, eps);
            for &(c0, c1) in cover {
                for c in c0..c1 {
                    orow[c] = (xr[c] - mean) / std * gamma.data()[c] + beta.data()[c];
                }
            }
        }
    }
    Ok(out)
}

fn stats<F: Real>(xr: &[F], active: &[(usize, usize)], eps: F) -> (F, F) {
    let mut n = 0usize;
    let mut sum = F::zero();
    for &(c0, c1) in active {
        for &v in &xr[c0..c1] {
            sum += v;
        }
        n += c1 - c0;
    }
    let m = F::of(n as f64);
    let mean = sum / m;
    let mut var = F::zero();
    for &(c0, c1) in active {
        for &v in &xr[c0..c1] {
            let d = v - mean;
            var += d * d;
        }
    }
    var /= m;
    (mean, (var + eps).sqrt())
}

/// Backward kernel: returns (dx, dgamma, dbeta).
pub(crate) fn norm_backward<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    layout: &NormLayout,
    grad: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let cols = x.cols();
    let width = cols / layout.blocks;
    let eps = F::of(layout.eps);
    let domains = layout.domains(width);
    let mut dx = Tensor::zeros(x.rows(), cols);
    let mut dgamma = Tensor::zeros(1, cols);
    let mut dbeta = Tensor::zeros(1, cols);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let gr = grad.row(r);
        for (cover, active) in &domains {
            let (mean, std) = stats(xr, active, eps);
            let m = F::of(active.iter().map(|(a, b)| b - a).sum::<usize>() as f64);
            let mut sum_gh = F::zero();
            let mut sum_gh_xhat = F::zero();
            for &(c0, c1) in cover {
                for c in c0..c1 {
                    let xhat = (xr[c] - mean) / std;
                    let gh = gr[c] * gamma.data()[c];
                    dgamma.data_mut()[c] += gr[c] * xhat;
                    dbeta.data_mut()[c] += gr[c];
                    sum_gh += gh;
                    sum_gh_xhat += gh * xhat;
                }
            }
            let dxr = dx.row_mut(r);
            for &(c0, c1) in cover {
                for c in c0..c1 {
                    dxr[c] = gr[c] * gamma.data()[c] / std;
                }
            }
            for &(c0, c1) in active {
                for c in c0..c1 {
                    let xhat = (xr[c] - mean) / std;
                    dxr[c] -= (sum_gh + xhat * sum_gh_xhat) / (m * std);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise layer norm with biased variance: `(x − mean) / sqrt(var + eps) ⊙ gamma + beta`.
pub fn layer_norm<F: Real>(x: &Tensor<F>, p: &NormParams<F>) -> Result<Tensor<F>> {
    if x.cols() != p.dim() {
        return Err(Error::shape("layer_norm", x.shape(), p.gamma.shape()));
    }
    norm_forward(x, &p.gamma, &p.beta, &NormLayout::plain(x.cols(), p.eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_vector_maps_to_beta() {
        let p = NormParams::<f64>::identity(4);
        let y = layer_norm(&Tensor::zeros(1, 4), &p).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);
    }

    #[test]
    fn two_element_hand_case() {
        let p = NormParams::<f64>::identity(2);
        let y = layer_norm(&Tensor::row_vector(vec![1.0, 3.0]), &p).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn positive_scale_invariance() {
        let p = NormParams::<f64>::identity(5);
        let x = Tensor::row_vector(vec![0.3, -1.2, 2.0, 0.0, 0.7]);
        let y = layer_norm(&x, &p).unwrap();
        for c in [0.5, 3.0, 40.0] {
            // eps breaks exact invariance by O(eps / var)
            let yc = layer_norm(&x.scale(c), &p).unwrap();
            assert!(y.max_abs_diff(&yc).unwrap() < 1e-4);
        }
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let g = Tensor::<f64>::full(1, 2, 1.0);
        assert!(NormParams::new(g.clone(), Tensor::zeros(1, 2), 0.0).is_err());
        assert!(NormParams::new(g, Tensor::zeros(1, 2), -1.0).is_err());
    }

    #[test]
    fn full_active_joint_layout_equals_plain() {
        let x = Tensor::<f64>::from_fn(3, 8, |r, c| ((r * 8 + c) as f64 * 0.37).sin());
        let g = Tensor::from_fn(1, 8, |_, c| 1.0 + c as f64 * 0.1);
        let b = Tensor::from_fn(1, 8, |_, c| c as f64 * -0.05);
        let plain = norm_forward(&x, &g, &b, &NormLayout::plain(8, 1e-5)).unwrap();
        let grouped = norm_forward(&x, &g, &b, &NormLayout { blocks: 2, active: 4, joint: true, eps: 1e-5 }).unwrap();
        assert_eq!(plain, grouped);
    }

    #[test]
    fn restricted_support_ignores_inactive_columns() {
        // Two blocks of width 3 with active prefix 2; inactive columns must not move the stats.
        let layout = NormLayout { blocks: 2, active: 2, joint: false, eps: 1e-5 };
        let g = Tensor::<f64>::full(1, 6, 1.0);
        let b = Tensor::zeros(1, 6);
        let x1 = Tensor::row_vector(vec![1.0, 2.0, 0.0, -1.0, 4.0, 0.0]);
        let x2 = Tensor::row_vector(vec![1.0, 2.0, 9.0, -1.0, 4.0, -7.0]);
        let y1 = norm_forward(&x1, &g, &b, &layout).unwrap();
        let y2 = norm_forward(&x2, &g, &b, &layout).unwrap();
        for c in [0, 1, 3, 4] {
            assert_eq!(y1.data()[c], y2.data()[c]);
        }
    }
}
