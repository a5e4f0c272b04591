//! Dense 4-D `f64` tensors in `(batch, channel, row, col)` layout.
//!
//! Matrices are stored as `1×1×rows×cols` and vectors as `1×1×1×len`, so a
//! single type carries activations, weights and gradients alike.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape::new(1, 1, rows, cols)
    }

    pub const fn vector(len: usize) -> Self {
        Shape::new(1, 1, 1, len)
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_valid(&self) -> bool {
        self.dims().iter().all(|&d| d >= 1)
    }

    /// Spatial extent `h·w`.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if !shape.is_valid() {
            return Err(Error::shape("tensor", format!("zero dimension in {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!("{shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(shape.is_valid(), "zero dimension in {shape}");
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        assert!(shape.is_valid(), "zero dimension in {shape}");
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::matrix(rows, cols), data)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::vector(data.len()), data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    /// `rows×cols` identity, or the rectangular identity when they differ.
    pub fn eye(rows: usize, cols: usize) -> Self {
        Self::from_fn(Shape::matrix(rows, cols), |_, _, r, c| {
            if r == c {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.index(n, c, y, x);
        &mut self.data[i]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape("item", format!("{} is not a scalar", self.shape)))
        }
    }

    /// Same data under a different shape with equal element count.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() || !shape.is_valid() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {shape}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Compensated (Neumaier) sum, so reductions used as check objectives
    /// carry no more than a rounding or two of error.
    pub fn sum(&self) -> f64 {
        let (mut total, mut comp) = (0.0f64, 0.0f64);
        for &v in &self.data {
            let t = total + v;
            if total.abs() >= v.abs() {
                comp += (total - t) + v;
            } else {
                comp += (v - t) + total;
            }
            total = t;
        }
        total + comp
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise `|a - b|`; any NaN makes the result infinite.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (a - b).abs();
                if d.is_nan() {
                    f64::INFINITY
                } else {
                    d
                }
            })
            .fold(0.0, f64::max)
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Contiguous slab of one batch item: `c·h·w` values.
    pub fn batch_item(&self, n: usize) -> &[f64] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    /// Contiguous `h·w` plane of one `(n, c)` pair.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Split along the batch axis into `n` single-item tensors.
    pub fn split_batch(&self) -> Vec<Tensor> {
        let s = self.shape;
        (0..s.n)
            .map(|n| Tensor {
                shape: Shape::new(1, s.c, s.h, s.w),
                data: self.batch_item(n).to_vec(),
            })
            .collect()
    }

    /// Stack tensors of equal `c,h,w` along the batch axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_batch", "no inputs"))?;
        let s = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let ps = p.shape;
            if (ps.c, ps.h, ps.w) != (s.c, s.h, s.w) {
                return Err(Error::shape("concat_batch", format!("{s} vs {ps}")));
            }
            n += ps.n;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(Shape::new(n, s.c, s.h, s.w), data)
    }

    /// Channels `[start, start+len)` as a new tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if len == 0 || start + len > s.c {
            return Err(Error::shape(
                "slice_channels",
                format!("[{start}, {}) out of {} channels", start + len, s.c),
            ));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * len * p);
        for n in 0..s.n {
            let base = (n * s.c + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Tensor::new(Shape::new(s.n, len, s.h, s.w), data)
    }
}
