//! Frame-major sequences: motion latents and audio features.

use std::fmt;
use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Marker for motion latents `[z_pose, z_dyn]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion;

/// Marker for per-frame audio features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Audio;

/// `frames x dim` values, one row per frame.
pub struct Frames<K> {
    data: Tensor,
    _kind: PhantomData<K>,
}

pub type MotionSequence = Frames<Motion>;
pub type AudioFeatureSequence = Frames<Audio>;

impl<K> Clone for Frames<K> {
    fn clone(&self) -> Self {
        Self::wrap(self.data.clone())
    }
}

impl<K> PartialEq for Frames<K> {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

impl<K> fmt::Debug for Frames<K> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Frames[{}x{}]", self.frames(), self.dim())
    }
}

impl<K> Frames<K> {
    fn wrap(data: Tensor) -> Self {
        Self {
            data,
            _kind: PhantomData,
        }
    }

    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 2 {
            return Err(Error::contract(format!(
                "a frame sequence is a matrix, got shape {:?}",
                data.shape()
            )));
        }
        Ok(Self::wrap(data))
    }

    pub fn from_vec(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new([frames, dim], data)?)
    }

    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        self.data.row_mut(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self::wrap(self.data.slice_rows(start, len)?))
    }

    /// The final `len` frames.
    pub fn tail(&self, len: usize) -> Result<Self> {
        let n = self.frames();
        if len > n {
            return Err(Error::contract(format!("tail of {len} frames from {n}")));
        }
        self.slice(n - len, len)
    }

    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &p.data).collect();
        Ok(Self::wrap(Tensor::concat_rows(&tensors)?))
    }

    /// Column `c` across all frames.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.frames()).map(|i| self.frame(i)[c]).collect()
    }

    pub fn reversed(&self) -> Self {
        let (n, d) = (self.frames(), self.dim());
        let mut data = Vec::with_capacity(n * d);
        for i in (0..n).rev() {
            data.extend_from_slice(self.frame(i));
        }
        Self::wrap(Tensor::new([n, d], data).expect("same size"))
    }

    /// One row per frame under a `frame,{prefix}0,{prefix}1,...` header.
    pub fn to_csv(&self, prefix: &str) -> String {
        let mut out = String::from("frame");
        for c in 0..self.dim() {
            out.push_str(&format!(",{prefix}{c}"));
        }
        out.push('\n');
        for i in 0..self.frames() {
            out.push_str(&i.to_string());
            for v in self.frame(i) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}
