//! Dense row-major `f64` tensors.
//!
//! Images and feature maps are stored channel-first (`C×H×W`) without a batch
//! axis; batches are handled one sample at a time by the callers.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {:?} needs {} elements, got {}", shape, n, data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::Shape(format!("expected C×H×W tensor, got shape {s:?}"))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Channel-wise argmax of a `C×H×W` tensor, one entry per pixel.
    pub fn argmax_channels(&self) -> Result<Vec<usize>> {
        let (c, h, w) = self.dims3()?;
        let hw = h * w;
        Ok((0..hw)
            .map(|p| {
                let mut best = 0;
                for k in 1..c {
                    if self.data[k * hw + p] > self.data[best * hw + p] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Exact spatial sub-window of a `C×H×W` tensor.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        if top + height > h || left + width > w {
            return Err(Error::Shape(format!("crop window {height}×{width} at ({top},{left}) exceeds {h}×{w}")));
        }
        let mut out = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for r in top..top + height {
                let base = ch * h * w + r * w;
                out.extend_from_slice(&self.data[base + left..base + left + width]);
            }
        }
        Ok(Self { shape: vec![c, height, width], data: out })
    }
}
