//! Dense rank-4 tensors in channels-last layout.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of a rank-4 tensor: batch, height, width, channels.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Shape([batch, height, width, channels])
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Number of (batch, y, x) positions, i.e. the count of channel vectors.
    pub fn positions(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Shape([self.0[0], self.0[1], self.0[2], channels])
    }

    #[inline]
    pub fn index(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        ((b * self.0[1] + y) * self.0[2] + x) * self.0[3] + c
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [b, h, w, c] = self.0;
        write!(f, "{b}x{h}x{w}x{c}")
    }
}

/// Dense tensor with an optional gradient buffer of the same shape.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::new(1, 1, 1, 1), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [bn, hn, wn, cn] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..bn {
            for y in 0..hn {
                for x in 0..wn {
                    for c in 0..cn {
                        data.push(f([b, y, x, c]));
                    }
                }
            }
        }
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, b: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.shape.index(b, y, x, c)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, y: usize, x: usize, c: usize) -> &mut T {
        let i = self.shape.index(b, y, x, c);
        &mut self.data[i]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::DataLength {
                shape: self.shape,
                len: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::DataLength {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Elementwise conversion to another scalar type. The gradient is dropped.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Channel vector at one spatial position.
    pub fn pixel(&self, b: usize, y: usize, x: usize) -> &[T] {
        let c = self.shape.channels();
        let i = self.shape.index(b, y, x, 0);
        &self.data[i..i + c]
    }

    /// Copies out channels `[start, start + len)`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.shape.channels();
        if start + len > c {
            return Err(Error::ChannelRange {
                start,
                len,
                channels: c,
            });
        }
        let mut data = Vec::with_capacity(self.shape.positions() * len);
        for px in self.data.chunks_exact(c) {
            data.extend_from_slice(&px[start..start + len]);
        }
        Ok(Tensor {
            shape: self.shape.with_channels(len),
            data,
            grad: None,
        })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyConcat)?;
        let base = first.shape;
        let mut total = 0;
        for p in parts {
            let s = p.shape;
            if s.0[..3] != base.0[..3] {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: base,
                    right: s,
                });
            }
            total += s.channels();
        }
        let mut data = Vec::with_capacity(base.positions() * total);
        for pos in 0..base.positions() {
            for p in parts {
                let c = p.shape.channels();
                data.extend_from_slice(&p.data[pos * c..(pos + 1) * c]);
            }
        }
        Ok(Tensor {
            shape: base.with_channels(total),
            data,
            grad: None,
        })
    }
}
