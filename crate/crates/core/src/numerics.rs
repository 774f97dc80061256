//! Dense numeric kernels shared by every other module.
//!
//! Everything here is a pure function of its inputs. Vector kernels take
//! slices; [`Tensor`] is the owned carrier for shaped data (latents, keys,
//! queries) and rejects non-finite values at construction.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};

/// Dense row-major `f64` array with a validated shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid_input(format!("shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(invalid_input(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid_input(format!("non-finite element at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor over `data`.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn l1_norm(&self) -> Result<f64> {
        l1_norm(&self.data)
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &Tensor, scale: f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add_scaled(other, -1.0)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|v| v * factor).collect())
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(invalid_input(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Sum of absolute values.
pub fn l1_norm(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(invalid_input("l1_norm of an empty vector"));
    }
    Ok(x.iter().map(|v| v.abs()).sum())
}

/// Numerically stable softmax of a contiguous slice, in place.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Softmax along `axis` of an n-dimensional tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(invalid_input(format!(
            "softmax axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut lane = vec![0.0; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            for (a, slot) in lane.iter_mut().enumerate() {
                *slot = src[base + a * inner];
            }
            softmax_in_place(&mut lane);
            for (a, v) in lane.iter().enumerate() {
                out[base + a * inner] = *v;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Length-preserving 1-D max pooling with an odd kernel.
///
/// Out-of-range window positions are ignored, which is equivalent to
/// padding with negative infinity.
pub fn maxpool1d(x: &[f64], kernel: usize) -> Result<Vec<f64>> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(invalid_input(format!(
            "max-pool kernel must be odd and positive, got {kernel}"
        )));
    }
    let radius = kernel / 2;
    let n = x.len();
    Ok((0..n)
        .map(|j| {
            let lo = j.saturating_sub(radius);
            let hi = (j + radius).min(n.saturating_sub(1));
            x[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Indices of the `k` largest scores in ascending index order.
///
/// Ties go to the lower index, so the selection is fully determined by the
/// input.
pub fn stable_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(invalid_input(format!(
            "top-{k} requested from {} scores",
            scores.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let rank = |a: &usize, b: &usize| -> Ordering {
        scores[*b]
            .total_cmp(&scores[*a])
            .then_with(|| a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, rank);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
