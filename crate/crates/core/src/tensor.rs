//! Dense row-major tensors and the temporal feature stack built on them.

use crate::error::{Result, SgsError};
use crate::scalar::Scalar;

/// Row-major dense tensor. The first axis is outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(SgsError::Config(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(SgsError::dim("Tensor::new", expected, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Like [`Tensor::new`], additionally rejecting NaN and infinities.
    pub fn new_finite(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.check_finite("tensor data")?;
        Ok(t)
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(SgsError::NonFinite { context, index }),
            None => Ok(()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Contiguous slab at index `i` of the outermost axis.
    pub fn row(&self, i: usize) -> &[S] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[i * stride..(i + 1) * stride]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// `self += alpha * other`, shapes must agree.
    pub fn axpy(&mut self, alpha: S, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(SgsError::dim("Tensor::axpy", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Temporal stack of feature maps, shape `T x C x H x W` with time outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<S = f64> {
    frames: Tensor<S>,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(frames: Tensor<S>) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(SgsError::dim(
                "FeatureSequence",
                "rank 4 (T x C x H x W)",
                frames.shape(),
            ));
        }
        Ok(Self { frames })
    }

    pub fn from_vec(t: usize, c: usize, h: usize, w: usize, data: Vec<S>) -> Result<Self> {
        Self::new(Tensor::new(vec![t, c, h, w], data)?)
    }

    pub fn frames(&self) -> &Tensor<S> {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.frames
    }

    pub fn t(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn h(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn w(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Number of values in one frame, `C * H * W`.
    pub fn frame_len(&self) -> usize {
        self.c() * self.h() * self.w()
    }

    pub fn frame(&self, t: usize) -> &[S] {
        self.frames.row(t)
    }

    /// Keeps the `C x H x W` layout, reorders frames.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.frames.len());
        for &t in order {
            data.extend_from_slice(self.frame(t));
        }
        Self {
            frames: Tensor {
                shape: vec![order.len(), self.c(), self.h(), self.w()],
                data,
            },
        }
    }
}

/// Spatial global average pooling: `T x C x H x W -> T x C`.
pub fn gap_spatial<S: Scalar>(seq: &FeatureSequence<S>) -> Tensor<S> {
    let (t_len, c_len) = (seq.t(), seq.c());
    let hw = seq.h() * seq.w();
    let scale = S::from_count(hw).recip();
    let src = seq.frames().data();
    Tensor::from_fn(vec![t_len, c_len], |i| {
        let start = i * hw;
        src[start..start + hw].iter().copied().sum::<S>() * scale
    })
}

/// Adjoint of [`gap_spatial`]: spreads each pooled gradient uniformly over
/// its `H x W` window.
pub fn gap_spatial_backward<S: Scalar>(grad_pooled: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let (t_len, c_len) = (grad_pooled.shape()[0], grad_pooled.shape()[1]);
    let hw = h * w;
    let scale = S::from_count(hw).recip();
    let g = grad_pooled.data();
    Tensor::from_fn(vec![t_len, c_len, h, w], |i| g[i / hw] * scale)
}
