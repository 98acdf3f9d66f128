//! Similarity embedding: spatial average pooling followed by two pointwise
//! (kernel size 1) temporal convolutions, `C -> C -> L`, with a relu between
//! them. Every time step is embedded independently.

use crate::error::{Result, SgsError};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{gap_spatial, FeatureSequence, Tensor};

/// Learnable weights of the embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityParams<S = f64> {
    /// `C x C`
    pub w1: Tensor<S>,
    /// `C`
    pub b1: Tensor<S>,
    /// `L x C`
    pub w2: Tensor<S>,
    /// `L`
    pub b2: Tensor<S>,
}

impl<S: Scalar> SimilarityParams<S> {
    pub fn new(w1: Tensor<S>, b1: Tensor<S>, w2: Tensor<S>, b2: Tensor<S>) -> Result<Self> {
        let c = w1.shape().first().copied().unwrap_or(0);
        let l = w2.shape().first().copied().unwrap_or(0);
        if w1.shape() != [c, c] {
            return Err(SgsError::dim("SimilarityParams.w1", [c, c], w1.shape()));
        }
        if b1.shape() != [c] {
            return Err(SgsError::dim("SimilarityParams.b1", [c], b1.shape()));
        }
        if w2.shape() != [l, c] {
            return Err(SgsError::dim("SimilarityParams.w2", [l, c], w2.shape()));
        }
        if b2.shape() != [l] {
            return Err(SgsError::dim("SimilarityParams.b2", [l], b2.shape()));
        }
        for t in [&w1, &b1, &w2, &b2] {
            t.check_finite("similarity parameters")?;
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(c: usize, l: usize, rng: &mut SeededRng) -> Self {
        let glorot = |fan_in: usize, fan_out: usize| S::lit((6.0 / (fan_in + fan_out) as f64).sqrt());
        let a1 = glorot(c, c);
        let a2 = glorot(c, l);
        Self {
            w1: rng.uniform_tensor(vec![c, c], -a1, a1),
            b1: Tensor::zeros(vec![c]),
            w2: rng.uniform_tensor(vec![l, c], -a2, a2),
            b2: Tensor::zeros(vec![l]),
        }
    }

    pub fn zeros(c: usize, l: usize) -> Self {
        Self {
            w1: Tensor::zeros(vec![c, c]),
            b1: Tensor::zeros(vec![c]),
            w2: Tensor::zeros(vec![l, c]),
            b2: Tensor::zeros(vec![l]),
        }
    }

    pub fn channels(&self) -> usize {
        self.b1.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.b2.len()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// All parameters in `w1, b1, w2, b2` order.
    pub fn flatten(&self) -> Tensor<S> {
        let mut v = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            v.extend_from_slice(t.data());
        }
        Tensor::from_fn(vec![v.len()], |i| v[i])
    }

    /// Inverse of [`SimilarityParams::flatten`] using `self` for the shapes.
    pub fn unflatten(&self, flat: &[S]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(SgsError::dim("SimilarityParams::unflatten", self.num_params(), flat.len()));
        }
        let mut offset = 0;
        let mut take = |like: &Tensor<S>| {
            let t = Tensor::new(like.shape().to_vec(), flat[offset..offset + like.len()].to_vec());
            offset += like.len();
            t
        };
        Ok(Self {
            w1: take(&self.w1)?,
            b1: take(&self.b1)?,
            w2: take(&self.w2)?,
            b2: take(&self.b2)?,
        })
    }

    pub fn tensors(&self) -> [&Tensor<S>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// `self += alpha * other`; used for gradient steps.
    pub fn axpy(&mut self, alpha: S, other: &Self) -> Result<()> {
        self.w1.axpy(alpha, &other.w1)?;
        self.b1.axpy(alpha, &other.b1)?;
        self.w2.axpy(alpha, &other.w2)?;
        self.b2.axpy(alpha, &other.b2)
    }
}

/// Embedding `Z`, one `L`-vector per time step (`T x L`).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVectors<S = f64> {
    pub z: Tensor<S>,
}

impl<S: Scalar> SimilarityVectors<S> {
    pub fn new(z: Tensor<S>) -> Result<Self> {
        if z.rank() != 2 {
            return Err(SgsError::dim("SimilarityVectors", "rank 2 (T x L)", z.shape()));
        }
        z.check_finite("similarity vectors")?;
        Ok(Self { z })
    }

    pub fn t(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[S] {
        self.z.row(t)
    }
}

/// Activations retained for [`embed_backward`].
#[derive(Debug, Clone)]
pub struct EmbedCache<S = f64> {
    /// `T x C`, spatially pooled input.
    pub pooled: Tensor<S>,
    /// `T x C`, first layer before the relu.
    pub pre: Tensor<S>,
    /// `T x C`, first layer after the relu.
    pub hidden: Tensor<S>,
}

/// Embeds every frame of `seq`.
pub fn embed_forward<S: Scalar>(
    seq: &FeatureSequence<S>,
    params: &SimilarityParams<S>,
) -> Result<(SimilarityVectors<S>, EmbedCache<S>)> {
    if seq.c() != params.channels() {
        return Err(SgsError::dim("embed_forward channels", params.channels(), seq.c()));
    }
    embed_pooled(gap_spatial(seq), params)
}

/// Embedding starting from already pooled `T x C` features.
pub fn embed_pooled<S: Scalar>(
    pooled: Tensor<S>,
    params: &SimilarityParams<S>,
) -> Result<(SimilarityVectors<S>, EmbedCache<S>)> {
    let c = params.channels();
    let l = params.embed_dim();
    if pooled.rank() != 2 || pooled.shape()[1] != c {
        return Err(SgsError::dim("embed_pooled input", ["T", &c.to_string()], pooled.shape()));
    }
    let t_len = pooled.shape()[0];
    let pre = affine_rows(&pooled, &params.w1, &params.b1);
    let hidden = pre.map(|v| v.max(S::zero()));
    let z = affine_rows(&hidden, &params.w2, &params.b2);
    debug_assert_eq!(z.shape(), [t_len, l]);
    let z = SimilarityVectors::new(z)?;
    Ok((z, EmbedCache { pooled, pre, hidden }))
}

/// `out[t] = weight · x[t] + bias` for every row `t`.
fn affine_rows<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Tensor<S> {
    let (t_len, n_in) = (x.shape()[0], x.shape()[1]);
    let n_out = weight.shape()[0];
    let mut out = Tensor::zeros(vec![t_len, n_out]);
    for t in 0..t_len {
        let xr = x.row(t);
        let or = out.row_mut(t);
        for (o, dst) in or.iter_mut().enumerate() {
            let wr = &weight.data()[o * n_in..(o + 1) * n_in];
            *dst = bias.data()[o] + wr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<S>();
        }
    }
    out
}

/// Gradients of a scalar loss given `dLoss/dZ`. Returns the parameter
/// gradients (same layout as the parameters) and `dLoss/dpooled` (`T x C`).
pub fn embed_backward<S: Scalar>(
    grad_z: &Tensor<S>,
    cache: &EmbedCache<S>,
    params: &SimilarityParams<S>,
) -> Result<(SimilarityParams<S>, Tensor<S>)> {
    let c = params.channels();
    let l = params.embed_dim();
    let t_len = cache.pooled.shape()[0];
    if grad_z.shape() != [t_len, l] {
        return Err(SgsError::dim("embed_backward grad_z", [t_len, l], grad_z.shape()));
    }
    if cache.pooled.shape() != [t_len, c] {
        return Err(SgsError::dim("embed_backward cache", [t_len, c], cache.pooled.shape()));
    }

    let mut grads = SimilarityParams::zeros(c, l);
    let mut grad_hidden = Tensor::zeros(vec![t_len, c]);
    for t in 0..t_len {
        let gz = grad_z.row(t);
        let h = cache.hidden.row(t);
        for (li, &g) in gz.iter().enumerate() {
            grads.b2.data_mut()[li] += g;
            let gw = &mut grads.w2.data_mut()[li * c..(li + 1) * c];
            for (dst, &hv) in gw.iter_mut().zip(h) {
                *dst += g * hv;
            }
            let w2r = &params.w2.data()[li * c..(li + 1) * c];
            for (dst, &wv) in grad_hidden.row_mut(t).iter_mut().zip(w2r) {
                *dst += g * wv;
            }
        }
    }

    // relu gate, subgradient 0 at exactly zero
    let mut grad_pre = grad_hidden;
    for (g, &p) in grad_pre.data_mut().iter_mut().zip(cache.pre.data()) {
        if p <= S::zero() {
            *g = S::zero();
        }
    }

    let mut grad_pooled = Tensor::zeros(vec![t_len, c]);
    for t in 0..t_len {
        let gp = grad_pre.row(t);
        let x = cache.pooled.row(t);
        for (i, &g) in gp.iter().enumerate() {
            grads.b1.data_mut()[i] += g;
            let gw = &mut grads.w1.data_mut()[i * c..(i + 1) * c];
            for (dst, &xv) in gw.iter_mut().zip(x) {
                *dst += g * xv;
            }
            let w1r = &params.w1.data()[i * c..(i + 1) * c];
            for (dst, &wv) in grad_pooled.row_mut(t).iter_mut().zip(w1r) {
                *dst += g * wv;
            }
        }
    }
    Ok((grads, grad_pooled))
}
