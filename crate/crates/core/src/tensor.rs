//! Dense multi-dimensional arrays of f64 in row-major order.
//!
//! `Tensor` is the universal numeric carrier: parameters, activations,
//! volumes, gradients. It is a plain value type; gradient tracking happens
//! on a [`crate::tape::Tape`], which stores tensors in an arena and hands
//! out [`crate::tape::Var`] handles.
//!
//! Feature volumes use the fixed axis order (channel, depth, height, width),
//! so the innermost (fastest-varying) axis is width.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Build from raw parts. Panics if `shape` and `data` length disagree;
    /// use [`Tensor::try_new`] for a fallible variant.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::try_new(shape, data).expect("tensor shape/data mismatch")
    }

    pub fn try_new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data, new shape. The element count must not change.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor::new(shape.to_vec(), self.data.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of a multi-index (row-major).
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Broadcast result shape under the trailing-dimension rule: shapes are
/// right-aligned and each pair of extents must be equal or one of them 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ea == eb {
            ea
        } else if ea == 1 {
            eb
        } else if eb == 1 {
            ea
        } else {
            return Err(Error::shape("broadcast", a, b));
        };
    }
    Ok(out)
}

/// Strides for reading a tensor of `shape` as if broadcast to `out_shape`
/// (right-aligned; broadcast axes get stride 0).
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let pad = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        out[pad + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}

/// Apply `f` over two tensors broadcast to a common shape.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let numel: usize = out_shape.iter().product();
    // Fast path: identical shapes.
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::new(out_shape, data));
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f(a.data()[off_a], b.data()[off_b]));
        // Odometer increment, updating both offsets in place.
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off_a += sa[ax];
            off_b += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off_a -= sa[ax] * out_shape[ax];
            off_b -= sb[ax] * out_shape[ax];
        }
    }
    Ok(Tensor::new(out_shape, data))
}

/// Sum `grad` (of `grad_shape`) down to `target_shape`, reversing a
/// trailing-rule broadcast. Used by the backward pass of broadcast ops.
pub fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0; target_numel];
    let st = broadcast_strides(target_shape, grad_shape);
    let rank = grad_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off_t = 0usize;
    for &g in grad {
        out[off_t] += g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off_t += st[ax];
            if idx[ax] < grad_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off_t -= st[ax] * grad_shape[ax];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
    }

    #[test]
    fn offset_matches_strides() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(t.offset(&[1, 2, 3]), 12 + 8 + 3);
    }

    #[test]
    fn broadcast_shape_trailing_rule() {
        assert_eq!(broadcast_shape(&[4], &[2, 4]).unwrap(), vec![2, 4]);
        assert_eq!(
            broadcast_shape(&[8, 1, 1, 1], &[8, 2, 3, 4]).unwrap(),
            vec![8, 2, 3, 4]
        );
        assert_eq!(broadcast_shape(&[1], &[3, 5]).unwrap(), vec![3, 5]);
        assert!(broadcast_shape(&[3], &[2, 4]).is_err());
    }

    #[test]
    fn broadcast_zip_against_manual_tiling() {
        // (2,1) * (3) -> (2,3)
        let a = Tensor::new(vec![2, 1], vec![10.0, 20.0]);
        let b = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
        let r = broadcast_zip(&a, &b, |x, y| x * y).unwrap();
        assert_eq!(r.shape(), &[2, 3]);
        assert_eq!(r.data(), &[10.0, 20.0, 30.0, 20.0, 40.0, 60.0]);
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        // grad of shape (2,3) reduced to (1,3) and to (3)
        let g = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[1, 3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[3]), vec![5.0, 7.0, 9.0]);
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[2, 1]), vec![6.0, 15.0]);
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::try_new(vec![2, 0], vec![]).is_err());
    }
}
