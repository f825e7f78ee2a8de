//! Saliency and fixation maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `H×W` map of probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    values: Tensor,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_tensor(Tensor::new(vec![height, width], values)?)
    }

    /// Accepts `[H,W]`, or any shape with leading unit dims such as `[1,1,H,W]`.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let shape = t.shape();
        let (h, w) = match shape {
            [.., h, w] if shape[..shape.len() - 2].iter().all(|&d| d == 1) => (*h, *w),
            _ => {
                return Err(Error::Invalid(format!(
                    "saliency map needs shape [H,W], got {shape:?}"
                )))
            }
        };
        if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!(
                "saliency value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            values: t.reshape(vec![h, w])?,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &[f64] {
        self.values.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values.data()[row * self.width() + col]
    }
}

/// Discrete fixation locations `(row, col)` within an `H×W` extent.
/// Duplicates are allowed (several observers on one pixel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixationMap {
    points: Vec<(usize, usize)>,
    height: usize,
    width: usize,
}

impl FixationMap {
    pub fn new(height: usize, width: usize, points: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(&(r, c)) = points.iter().find(|&&(r, c)| r >= height || c >= width) {
            return Err(Error::Invalid(format!(
                "fixation ({r}, {c}) outside {height}x{width} extent"
            )));
        }
        Ok(Self {
            points,
            height,
            width,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            points: Vec::new(),
            height,
            width,
        }
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Row-major pixel indices of the points, with multiplicity.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.points.iter().map(move |&(r, c)| r * self.width + c)
    }

    /// Binary indicator over the extent.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.height * self.width];
        for i in self.indices() {
            m[i] = true;
        }
        m
    }
}
