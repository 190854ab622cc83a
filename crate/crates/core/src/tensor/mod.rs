//! Dense f64 tensors and a tape-based reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain row-major value. Differentiation happens on a
//! [`Tape`]: every forward operation appends a node, and [`Tape::backward`]
//! walks the nodes in reverse. Nodes that do not depend on any trainable
//! leaf never receive a gradient, which is how stop-gradient is expressed.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Element of a rank-3 `[C, H, W]` tensor.
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Replaces every value at or above `threshold` with `1 - value`.
    ///
    /// Only used by the augmentation pipeline, so it lives outside the tape.
    pub fn solarize(&self, threshold: f64) -> Self {
        self.map(|x| if x >= threshold { 1.0 - x } else { x })
    }

    /// Pixel vectors of a `[C, H, W]` map as `H*W` rows of length `C`.
    pub fn pixels(&self) -> Vec<Vec<f64>> {
        let (c, hw) = (self.shape[0], self.shape[1] * self.shape[2]);
        (0..hw)
            .map(|p| (0..c).map(|k| self.data[k * hw + p]).collect())
            .collect()
    }

    /// Inverse of [`Tensor::pixels`].
    pub fn from_pixels(pixels: &[Vec<f64>], h: usize, w: usize) -> Result<Self> {
        if pixels.len() != h * w {
            return Err(Error::InvalidShape {
                op: "from_pixels",
                detail: format!("{} pixels for a {h}x{w} grid", pixels.len()),
            });
        }
        let c = pixels.first().map_or(0, Vec::len);
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        for (p, px) in pixels.iter().enumerate() {
            for (k, &v) in px.iter().enumerate() {
                data[k * hw + p] = v;
            }
        }
        Self::new([c, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_element_count() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new([2, 3], vec![0.0; 5]),
            Err(Error::InvalidShape { .. })
        ));
    }

    #[test]
    fn solarize_inverts_bright_values() {
        let t = Tensor::vector(vec![0.2, 0.5, 0.9]);
        assert_eq!(t.solarize(0.5).data(), &[0.2, 0.5, 0.09999999999999998]);
    }

    #[test]
    fn pixel_roundtrip() {
        let t = Tensor::new([2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let back = Tensor::from_pixels(&t.pixels(), 2, 3).unwrap();
        assert_eq!(t, back);
    }
}
