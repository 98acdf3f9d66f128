//! Differentiable bin sampling.
//!
//! Every frame `I_t` is scattered into the bins whose kernel support contains
//! its bin coordinate, `O_b = Σ_t I_t Π_k Ψ(Δ_t^k, β_b^k)`. With uniform bins
//! of spacing `2γ` and open supports of width `2γ`, a coordinate falls inside
//! at most one support per axis. A frame therefore touches at most one grid
//! bin, and the forward pass only has to probe the candidate cell of each
//! frame. Bins that receive no weight are dropped; the survivors keep
//! ascending (row-major) grid order.
//!
//! The scalar path ([`sample_forward`]) is the one-axis case of the grid path
//! and shares its code.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::binning::{BinGeometry, MagnitudeTrack, MultiDimGeometry};
use crate::error::{Result, SgsError};
use crate::scalar::Scalar;
use crate::tensor::{FeatureSequence, Tensor};

/// Sampling kernel `Ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// Triangle `max(0, 1 - |Δ - β| / γ)`.
    #[default]
    Linear,
    /// Bin membership `|Δ - β| < γ`, outputs averaged over members.
    Kronecker,
}

str_enum!(KernelKind { Linear => "linear", Kronecker => "kronecker" });

/// Un-normalized kernel weight of coordinate `delta` for the bin centred at
/// `beta`. `gamma` must be positive.
#[inline]
pub fn kernel_weight<S: Scalar>(kind: KernelKind, delta: S, beta: S, gamma: S) -> S {
    let r = (delta - beta).abs() / gamma;
    match kind {
        KernelKind::Linear => (S::one() - r).max(S::zero()),
        KernelKind::Kronecker => {
            if r.floor() == S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
    }
}

/// `dΨ/dΔ`. For the linear kernel: `+1/γ` on `(β - γ, β]`, `-1/γ` on
/// `(β, β + γ)`, zero elsewhere. The Kronecker kernel is piecewise constant.
#[inline]
pub fn kernel_slope<S: Scalar>(kind: KernelKind, delta: S, beta: S, gamma: S) -> S {
    match kind {
        KernelKind::Kronecker => S::zero(),
        KernelKind::Linear => {
            if (beta - delta).abs() >= gamma {
                S::zero()
            } else if delta <= beta {
                gamma.recip()
            } else {
                -gamma.recip()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleOptions {
    /// Divide each linear-kernel output by its total weight. Off by default;
    /// the Kronecker kernel is always averaged.
    pub normalize: bool,
}

/// One frame's contribution to one surviving bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Assigned<S = f64> {
    pub frame: usize,
    /// Row of the bin in the sampled output.
    pub slot: usize,
    /// Row-major grid index of the bin (the bin index on a single axis).
    pub bin: usize,
    /// Kernel weight before any normalization (the product of `factors`).
    pub raw: S,
    /// Weight actually applied to the frame in the forward pass.
    pub weight: S,
    /// Per-axis kernel factors.
    pub factors: Vec<S>,
    /// Per-axis `dΨ/dΔ^k`.
    pub slopes: Vec<S>,
}

/// Sparse frame-to-bin assignment, shared by the forward and backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightAssignment<S = f64> {
    /// At most one entry per frame, in frame order.
    pub entries: Vec<Assigned<S>>,
    /// Member count per surviving bin.
    pub counts: Vec<usize>,
    /// Total raw weight per surviving bin.
    pub totals: Vec<S>,
    pub kind: KernelKind,
    /// All frames were averaged into a single bin (degenerate geometry, or no
    /// frame fell inside any support).
    pub averaged: bool,
    pub normalized: bool,
    pub frames: usize,
    pub axes: usize,
}

/// Aggregated output of the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence<S = f64> {
    /// `B' x C x H x W`.
    pub outputs: Tensor<S>,
    /// Grid index of every output row, ascending.
    pub surviving_bins: Vec<usize>,
}

impl<S: Scalar> SampledSequence<S> {
    pub fn b_prime(&self) -> usize {
        self.surviving_bins.len()
    }
}

/// Samples `seq` into the bins of `geom` using the scalar coordinates `delta`.
pub fn sample_forward<S: Scalar>(
    seq: &FeatureSequence<S>,
    delta: &MagnitudeTrack<S>,
    geom: &BinGeometry<S>,
    kind: KernelKind,
    opts: SampleOptions,
) -> Result<(SampledSequence<S>, WeightAssignment<S>)> {
    if delta.delta.len() != seq.t() {
        return Err(SgsError::dim("sample_forward delta", seq.t(), delta.delta.len()));
    }
    let coords = Tensor::new(vec![seq.t(), 1], delta.delta.clone())?;
    sample_grid(seq, &coords, std::slice::from_ref(geom), kind, opts)
}

/// Samples `seq` over the product grid of `geom`, with per-frame coordinates
/// `coords` (`T x K`).
pub fn sample_forward_multidim<S: Scalar>(
    seq: &FeatureSequence<S>,
    coords: &Tensor<S>,
    geom: &MultiDimGeometry<S>,
    kind: KernelKind,
    opts: SampleOptions,
) -> Result<(SampledSequence<S>, WeightAssignment<S>)> {
    sample_grid(seq, coords, &geom.axes, kind, opts)
}

/// Best bin on one axis: the candidate cell and its neighbours, keeping the
/// largest positive weight (lowest index on ties).
fn locate<S: Scalar>(axis: &BinGeometry<S>, kind: KernelKind, x: S) -> Option<(usize, S, S)> {
    if axis.degenerate {
        return Some((0, S::one(), S::zero()));
    }
    let c = axis.candidate(x);
    let lo = c.saturating_sub(1);
    let hi = (c + 1).min(axis.bin_count - 1);
    let mut best: Option<(usize, S, S)> = None;
    for b in lo..=hi {
        let beta = axis.centers[b];
        let w = kernel_weight(kind, x, beta, axis.gamma);
        if w > S::zero() && best.is_none_or(|(_, bw, _)| w > bw) {
            best = Some((b, w, kernel_slope(kind, x, beta, axis.gamma)));
        }
    }
    best
}

fn sample_grid<S: Scalar>(
    seq: &FeatureSequence<S>,
    coords: &Tensor<S>,
    axes: &[BinGeometry<S>],
    kind: KernelKind,
    opts: SampleOptions,
) -> Result<(SampledSequence<S>, WeightAssignment<S>)> {
    let t_len = seq.t();
    let k_len = axes.len();
    if k_len == 0 {
        return Err(SgsError::Config("at least one bin axis is required".into()));
    }
    if coords.shape() != [t_len, k_len] {
        return Err(SgsError::dim("sampler coordinates", [t_len, k_len], coords.shape()));
    }
    coords.check_finite("sampler coordinates")?;
    let mut strides = vec![1usize; k_len];
    for k in (0..k_len - 1).rev() {
        strides[k] = strides[k + 1]
            .checked_mul(axes[k + 1].bin_count)
            .ok_or_else(|| SgsError::Config("bin grid too large".into()))?;
    }
    strides[0]
        .checked_mul(axes[0].bin_count)
        .ok_or_else(|| SgsError::Config("bin grid too large".into()))?;

    let normalized = opts.normalize || kind == KernelKind::Kronecker;
    if axes.iter().all(|a| a.degenerate) {
        return Ok(average_all(seq, kind, normalized, k_len));
    }

    // frame -> (bin, factors, slopes)
    let mut hits: Vec<(usize, usize, Vec<S>, Vec<S>)> = Vec::with_capacity(t_len);
    'frames: for t in 0..t_len {
        let row = coords.row(t);
        let mut bin = 0;
        let mut factors = Vec::with_capacity(k_len);
        let mut slopes = Vec::with_capacity(k_len);
        for (k, axis) in axes.iter().enumerate() {
            match locate(axis, kind, row[k]) {
                Some((b, w, s)) => {
                    bin += b * strides[k];
                    factors.push(w);
                    slopes.push(s);
                }
                None => continue 'frames,
            }
        }
        hits.push((t, bin, factors, slopes));
    }
    if hits.is_empty() {
        return Ok(average_all(seq, kind, normalized, k_len));
    }

    let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
    for h in &hits {
        slots.entry(h.1).or_insert(0);
    }
    for (slot, v) in slots.values_mut().enumerate() {
        *v = slot;
    }
    let b_prime = slots.len();
    let mut counts = vec![0usize; b_prime];
    let mut totals = vec![S::zero(); b_prime];
    let mut entries: Vec<Assigned<S>> = hits
        .into_iter()
        .map(|(frame, bin, factors, slopes)| {
            let slot = slots[&bin];
            let raw = factors.iter().fold(S::one(), |acc, &f| acc * f);
            counts[slot] += 1;
            totals[slot] += raw;
            Assigned {
                frame,
                slot,
                bin,
                raw,
                weight: raw,
                factors,
                slopes,
            }
        })
        .collect();
    if normalized {
        for e in &mut entries {
            e.weight = match kind {
                KernelKind::Kronecker => S::from_count(counts[e.slot]).recip(),
                KernelKind::Linear => e.raw / totals[e.slot],
            };
        }
    }

    let assignment = WeightAssignment {
        entries,
        counts,
        totals,
        kind,
        averaged: false,
        normalized,
        frames: t_len,
        axes: k_len,
    };
    let outputs = aggregate(seq, &assignment, b_prime);
    Ok((
        SampledSequence {
            outputs,
            surviving_bins: slots.into_keys().collect(),
        },
        assignment,
    ))
}

/// Single output holding the plain average of every frame, reported as bin 0.
fn average_all<S: Scalar>(
    seq: &FeatureSequence<S>,
    kind: KernelKind,
    normalized: bool,
    axes: usize,
) -> (SampledSequence<S>, WeightAssignment<S>) {
    let t_len = seq.t();
    let w = S::from_count(t_len).recip();
    let entries = (0..t_len)
        .map(|frame| Assigned {
            frame,
            slot: 0,
            bin: 0,
            raw: S::one(),
            weight: w,
            factors: vec![S::one(); axes],
            slopes: vec![S::zero(); axes],
        })
        .collect();
    let assignment = WeightAssignment {
        entries,
        counts: vec![t_len],
        totals: vec![S::from_count(t_len)],
        kind,
        averaged: true,
        normalized,
        frames: t_len,
        axes,
    };
    let outputs = aggregate(seq, &assignment, 1);
    (
        SampledSequence {
            outputs,
            surviving_bins: vec![0],
        },
        assignment,
    )
}

fn aggregate<S: Scalar>(seq: &FeatureSequence<S>, a: &WeightAssignment<S>, b_prime: usize) -> Tensor<S> {
    let mut out = Tensor::zeros(vec![b_prime, seq.c(), seq.h(), seq.w()]);
    for e in &a.entries {
        let dst = out.row_mut(e.slot);
        for (o, &x) in dst.iter_mut().zip(seq.frame(e.frame)) {
            *o += x * e.weight;
        }
    }
    out
}

/// Gradients of the sampler: `dLoss/dI` (`T x C x H x W`) and `dLoss/dΔ`
/// (`T x K`).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrads<S = f64> {
    pub frames: Tensor<S>,
    pub coords: Tensor<S>,
}

/// Backward pass of [`sample_forward`]. Bin geometry is treated as constant.
pub fn sample_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    assignment: &WeightAssignment<S>,
    seq: &FeatureSequence<S>,
) -> Result<(Tensor<S>, Vec<S>)> {
    if assignment.axes != 1 {
        return Err(SgsError::dim("sample_backward axes", 1, assignment.axes));
    }
    let g = sample_backward_multidim(grad_out, assignment, seq)?;
    Ok((g.frames, g.coords.into_data()))
}

/// Backward pass of [`sample_forward_multidim`].
pub fn sample_backward_multidim<S: Scalar>(
    grad_out: &Tensor<S>,
    assignment: &WeightAssignment<S>,
    seq: &FeatureSequence<S>,
) -> Result<SampleGrads<S>> {
    let b_prime = assignment.counts.len();
    let want = [b_prime, seq.c(), seq.h(), seq.w()];
    if grad_out.shape() != want {
        return Err(SgsError::dim("sample_backward grad_out", want, grad_out.shape()));
    }
    if assignment.frames != seq.t() {
        return Err(SgsError::dim("sample_backward frames", assignment.frames, seq.t()));
    }
    let t_len = seq.t();
    let k_len = assignment.axes;
    let mut frames = Tensor::zeros(seq.frames().shape().to_vec());
    let mut coords = Tensor::zeros(vec![t_len, k_len]);

    // <g_slot, I_t> per entry
    let inner: Vec<S> = assignment
        .entries
        .iter()
        .map(|e| {
            grad_out
                .row(e.slot)
                .iter()
                .zip(seq.frame(e.frame))
                .map(|(&g, &x)| g * x)
                .sum()
        })
        .collect();
    // <g_slot, O_slot>, needed for the normalized linear kernel
    let mut inner_out = vec![S::zero(); b_prime];
    for (e, &ip) in assignment.entries.iter().zip(&inner) {
        inner_out[e.slot] += e.weight * ip;
    }

    for (e, &ip) in assignment.entries.iter().zip(&inner) {
        for (d, &g) in frames.row_mut(e.frame).iter_mut().zip(grad_out.row(e.slot)) {
            *d += g * e.weight;
        }
        if assignment.averaged || assignment.kind == KernelKind::Kronecker {
            continue;
        }
        let dweight = if assignment.normalized {
            (ip - inner_out[e.slot]) / assignment.totals[e.slot]
        } else {
            ip
        };
        let crow = coords.row_mut(e.frame);
        for k in 0..k_len {
            let others = e
                .factors
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .fold(S::one(), |acc, (_, &f)| acc * f);
            crow[k] += dweight * e.slopes[k] * others;
        }
    }
    Ok(SampleGrads { frames, coords })
}
