//! Similarity guided sampling (SGS).
//!
//! SGS is a differentiable operator that embeds each temporal feature map,
//! bins the frames by the magnitude (or spherical coordinates) of their
//! embedding, and aggregates each bin into one output map. Redundant clips
//! collapse to a few bins, diverse clips keep most of their frames, so the
//! temporal resolution `B'` handed to the rest of a network adapts per input.
//!
//! The math is generic over [`Scalar`] (`f32`/`f64`). The aliases at the crate
//! root fix it to `f64`, which is what the gradient checks assume.

#[macro_use]
mod macros;

pub mod binning;
pub mod error;
pub mod flops;
pub mod numdiff;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod sgs;
pub mod similarity;
pub mod tensor;

pub use binning::{
    binned_columns, from_spherical, magnitudes, make_geometry, make_multidim_geometry,
    spherical_backward, to_spherical, BinGeometry, BinMode, CoordKind, MagnitudeTrack, Measure,
    MultiDimGeometry, DEGENERATE_EPS,
};
pub use error::{Result, SgsError};
pub use flops::{layer_flops, report, stack_flops, FlopReport, LayerSpec, LayerStack, Padding};
pub use numdiff::{finite_diff, max_rel_error, FiniteDiffError, Step};
pub use rng::SeededRng;
pub use sampler::{
    kernel_slope, kernel_weight, sample_backward, sample_backward_multidim, sample_forward,
    sample_forward_multidim, Assigned, KernelKind, SampleGrads, SampleOptions, SampledSequence,
    WeightAssignment,
};
pub use scalar::Scalar;
pub use sgs::{
    backprop_coords, sgs_apply, sgs_apply_frozen, sgs_backward, Geometry, SgsCache, SgsConfig,
    SgsGrads,
};
pub use similarity::{
    embed_backward, embed_forward, embed_pooled, EmbedCache, SimilarityParams, SimilarityVectors,
};
pub use tensor::{gap_spatial, gap_spatial_backward, FeatureSequence, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type FeatureSequence32 = FeatureSequence<f32>;
pub type FeatureSequence64 = FeatureSequence<f64>;
pub type SimilarityParams32 = SimilarityParams<f32>;
pub type SimilarityParams64 = SimilarityParams<f64>;
pub type SampledSequence32 = SampledSequence<f32>;
pub type SampledSequence64 = SampledSequence<f64>;
pub type SgsCache64 = SgsCache<f64>;
pub type SgsGrads64 = SgsGrads<f64>;
