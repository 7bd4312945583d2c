//! Differentiable operations. Each submodule adds forward methods to
//! [`Tape`](crate::Tape) and supplies the matching backward rule.

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod pool;
pub mod reduce;
pub mod resize;
pub mod shape;

/// (outer, extent, inner) decomposition of `dims` around `axis`.
pub(crate) fn split_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}
