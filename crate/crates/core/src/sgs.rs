//! End-to-end similarity guided sampling: embed, measure, bin, sample, and
//! the matching backward pass.
//!
//! Bin geometry (`Δ_max`, `γ`, `β_b`) sits on a stop-gradient path. Passing a
//! frozen geometry to [`sgs_apply_frozen`] makes the forward pass a smooth
//! function of frames and parameters away from kernel kinks, which is what the
//! finite-difference checks compare against.

use serde::{Deserialize, Serialize};

use crate::binning::{
    binned_columns, magnitudes, make_geometry, make_multidim_geometry, spherical_backward,
    to_spherical, BinGeometry, BinMode, CoordKind, MagnitudeTrack, Measure, MultiDimGeometry,
    DEGENERATE_EPS,
};
use crate::error::{Result, SgsError};
use crate::sampler::{
    sample_backward_multidim, sample_forward, sample_forward_multidim, KernelKind,
    SampleOptions, SampledSequence, WeightAssignment,
};
use crate::scalar::Scalar;
use crate::similarity::{embed_backward, embed_forward, EmbedCache, SimilarityParams, SimilarityVectors};
use crate::tensor::{gap_spatial_backward, FeatureSequence, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgsConfig {
    /// Bin count `B` for the magnitude measure, and the per-axis default for
    /// the grid measures.
    pub bins: usize,
    pub mode: BinMode,
    pub kernel: KernelKind,
    pub measure: Measure,
    /// Bins per binned coordinate for the angular and spherical measures.
    pub grid: Option<Vec<usize>>,
    pub normalize: bool,
}

impl Default for SgsConfig {
    fn default() -> Self {
        Self {
            bins: 16,
            mode: BinMode::Strict,
            kernel: KernelKind::Linear,
            measure: Measure::Magnitude,
            grid: None,
            normalize: false,
        }
    }
}

impl SgsConfig {
    pub fn with_bins(bins: usize) -> Self {
        Self {
            bins,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(SgsError::Config("bins must be at least 1".into()));
        }
        if let Some(g) = &self.grid {
            if g.contains(&0) {
                return Err(SgsError::Config("grid bin counts must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// Upper bound on `B'`: `B` for the magnitude measure, the grid size
    /// otherwise.
    pub fn max_bins(&self, embed_dim: usize) -> Result<usize> {
        match self.measure {
            Measure::Magnitude => Ok(self.bins),
            _ => Ok(self
                .axis_bins(binned_columns(self.measure, embed_dim)?.len())?
                .iter()
                .fold(1usize, |a, &b| a.saturating_mul(b))),
        }
    }

    fn axis_bins(&self, k: usize) -> Result<Vec<usize>> {
        match &self.grid {
            Some(g) if g.len() != k => Err(SgsError::Config(format!(
                "{} measure bins {k} coordinates, grid lists {}",
                self.measure,
                g.len()
            ))),
            Some(g) => Ok(g.clone()),
            None => Ok(vec![self.bins; k]),
        }
    }

    fn options(&self) -> SampleOptions {
        SampleOptions {
            normalize: self.normalize,
        }
    }
}

/// Bin geometry of one application, scalar or grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry<S = f64> {
    Scalar(BinGeometry<S>),
    Grid(MultiDimGeometry<S>),
}

impl<S: Scalar> Geometry<S> {
    pub fn axes(&self) -> &[BinGeometry<S>] {
        match self {
            Geometry::Scalar(g) => std::slice::from_ref(g),
            Geometry::Grid(g) => &g.axes,
        }
    }
}

/// Everything [`sgs_backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct SgsCache<S = f64> {
    pub embed: EmbedCache<S>,
    pub z: SimilarityVectors<S>,
    /// Binned coordinates, `T x K`.
    pub coords: Tensor<S>,
    /// Spherical column of every binned coordinate (unused for magnitude).
    pub columns: Vec<usize>,
    pub measure: Measure,
    pub geometry: Geometry<S>,
    pub assignment: WeightAssignment<S>,
}

impl<S: Scalar> SgsCache<S> {
    /// `Δ_t` for the magnitude measure.
    pub fn delta(&self) -> Option<&[S]> {
        (self.measure == Measure::Magnitude).then(|| self.coords.data())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgsGrads<S = f64> {
    /// `T x C x H x W`, through both the sampling and the embedding path.
    pub frames: Tensor<S>,
    pub params: SimilarityParams<S>,
}

/// Applies the operator, fitting the bin geometry to this clip.
pub fn sgs_apply<S: Scalar>(
    seq: &FeatureSequence<S>,
    params: &SimilarityParams<S>,
    config: &SgsConfig,
) -> Result<(SampledSequence<S>, SgsCache<S>)> {
    apply(seq, params, config, None)
}

/// Applies the operator with externally supplied, fixed bin geometry.
pub fn sgs_apply_frozen<S: Scalar>(
    seq: &FeatureSequence<S>,
    params: &SimilarityParams<S>,
    config: &SgsConfig,
    geometry: &Geometry<S>,
) -> Result<(SampledSequence<S>, SgsCache<S>)> {
    apply(seq, params, config, Some(geometry))
}

fn apply<S: Scalar>(
    seq: &FeatureSequence<S>,
    params: &SimilarityParams<S>,
    config: &SgsConfig,
    frozen: Option<&Geometry<S>>,
) -> Result<(SampledSequence<S>, SgsCache<S>)> {
    config.validate()?;
    let eps = S::lit(DEGENERATE_EPS);
    let (z, embed) = embed_forward(seq, params)?;
    let (coords, columns, geometry) = match config.measure {
        Measure::Magnitude => {
            let track = magnitudes(&z);
            let geometry = match frozen {
                Some(g @ Geometry::Scalar(_)) => g.clone(),
                Some(_) => {
                    return Err(SgsError::Config(
                        "magnitude measure needs a scalar geometry".into(),
                    ))
                }
                None => Geometry::Scalar(make_geometry(&track, config.bins, config.mode, eps)?),
            };
            let coords = Tensor::new(vec![seq.t(), 1], track.delta)?;
            (coords, vec![0], geometry)
        }
        measure => {
            let cols = binned_columns(measure, z.dim())?;
            let sph = to_spherical(&z)?;
            let k_len = cols.len();
            let coords = Tensor::from_fn(vec![seq.t(), k_len], |i| {
                sph.data()[(i / k_len) * z.dim() + cols[i % k_len].0]
            });
            let kinds: Vec<CoordKind> = cols.iter().map(|c| c.1).collect();
            let geometry = match frozen {
                Some(g @ Geometry::Grid(md)) if md.dims() == k_len => g.clone(),
                Some(_) => {
                    return Err(SgsError::Config(format!(
                        "{measure} measure needs a {k_len}-axis grid geometry"
                    )))
                }
                None => Geometry::Grid(make_multidim_geometry(
                    &coords,
                    &kinds,
                    &config.axis_bins(k_len)?,
                    config.mode,
                    eps,
                )?),
            };
            (coords, cols.into_iter().map(|c| c.0).collect(), geometry)
        }
    };

    let (sampled, assignment) = match &geometry {
        Geometry::Scalar(g) => {
            let track = MagnitudeTrack::new(coords.data().to_vec());
            sample_forward(seq, &track, g, config.kernel, config.options())?
        }
        Geometry::Grid(g) => {
            sample_forward_multidim(seq, &coords, g, config.kernel, config.options())?
        }
    };
    Ok((
        sampled,
        SgsCache {
            embed,
            z,
            coords,
            columns,
            measure: config.measure,
            geometry,
            assignment,
        },
    ))
}

/// Backward pass of [`sgs_apply`] / [`sgs_apply_frozen`] given `dLoss/dO`
/// (`B' x C x H x W`).
pub fn sgs_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    cache: &SgsCache<S>,
    seq: &FeatureSequence<S>,
    params: &SimilarityParams<S>,
) -> Result<SgsGrads<S>> {
    let g = sample_backward_multidim(grad_out, &cache.assignment, seq)?;
    backprop_coords(g.frames, &g.coords, cache, seq, params)
}

/// Continues the backward pass from the sampler's outputs: pushes
/// `dLoss/dcoords` (`T x K`) through the measure and the embedding network
/// and adds the result to the direct frame gradient.
pub fn backprop_coords<S: Scalar>(
    mut grad_frames: Tensor<S>,
    grad_coords: &Tensor<S>,
    cache: &SgsCache<S>,
    seq: &FeatureSequence<S>,
    params: &SimilarityParams<S>,
) -> Result<SgsGrads<S>> {
    let t_len = seq.t();
    let l = cache.z.dim();
    let k_len = cache.columns.len();
    if grad_coords.shape() != [t_len, k_len] {
        return Err(SgsError::dim("backprop_coords", [t_len, k_len], grad_coords.shape()));
    }
    let grad_z = match cache.measure {
        Measure::Magnitude => {
            // dΔ/dZ = Z / ||Z||, zero at the origin
            let mut gz = Tensor::zeros(vec![t_len, l]);
            for t in 0..t_len {
                let delta = cache.coords.data()[t];
                if delta > S::zero() {
                    let scale = grad_coords.data()[t] / delta;
                    for (d, &zv) in gz.row_mut(t).iter_mut().zip(cache.z.row(t)) {
                        *d = scale * zv;
                    }
                }
            }
            gz
        }
        _ => {
            let mut full = Tensor::zeros(vec![t_len, l]);
            for t in 0..t_len {
                for (k, &col) in cache.columns.iter().enumerate() {
                    full.row_mut(t)[col] += grad_coords.data()[t * k_len + k];
                }
            }
            spherical_backward(&cache.z, &full)?
        }
    };
    let (grad_params, grad_pooled) = embed_backward(&grad_z, &cache.embed, params)?;
    grad_frames.axpy(S::one(), &gap_spatial_backward(&grad_pooled, seq.h(), seq.w()))?;
    Ok(SgsGrads {
        frames: grad_frames,
        params: grad_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn clip(rng: &mut SeededRng, t: usize, c: usize) -> FeatureSequence {
        FeatureSequence::new(rng.normal_tensor(vec![t, c, 2, 2], 1.0)).unwrap()
    }

    #[test]
    fn identical_frames_collapse_to_one_bin() {
        let mut rng = SeededRng::new(4);
        let frame = rng.normal_tensor::<f64>(vec![3, 2, 2], 1.0);
        let data: Vec<f64> = (0..6).flat_map(|_| frame.data().to_vec()).collect();
        let seq = FeatureSequence::from_vec(6, 3, 2, 2, data).unwrap();
        let params = SimilarityParams::init(3, 4, &mut rng);
        for mode in [BinMode::Strict, BinMode::Centered] {
            for kernel in [KernelKind::Linear, KernelKind::Kronecker] {
                let cfg = SgsConfig {
                    bins: 6,
                    mode,
                    kernel,
                    ..SgsConfig::default()
                };
                let (out, _) = sgs_apply(&seq, &params, &cfg).unwrap();
                assert_eq!(out.b_prime(), 1, "{mode} {kernel}");
            }
        }
    }

    #[test]
    fn single_frame_gives_one_bin() {
        let mut rng = SeededRng::new(8);
        let seq = clip(&mut rng, 1, 3);
        let params = SimilarityParams::init(3, 2, &mut rng);
        for bins in [1, 4, 32] {
            let (out, _) = sgs_apply(&seq, &params, &SgsConfig::with_bins(bins)).unwrap();
            assert_eq!(out.b_prime(), 1);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_parameter_gradients() {
        let mut rng = SeededRng::new(13);
        let seq = clip(&mut rng, 8, 3);
        let params = SimilarityParams::init(3, 4, &mut rng);
        let (out, cache) = sgs_apply(&seq, &params, &SgsConfig::with_bins(8)).unwrap();
        let g = Tensor::zeros(out.outputs.shape().to_vec());
        let grads = sgs_backward(&g, &cache, &seq, &params).unwrap();
        assert!(grads.params.flatten().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kronecker_kernel_gives_no_parameter_gradient() {
        let mut rng = SeededRng::new(17);
        let seq = clip(&mut rng, 8, 3);
        let params = SimilarityParams::init(3, 4, &mut rng);
        let cfg = SgsConfig {
            bins: 8,
            kernel: KernelKind::Kronecker,
            ..SgsConfig::default()
        };
        let (out, cache) = sgs_apply(&seq, &params, &cfg).unwrap();
        let g = out.outputs.map(|v| 2.0 * v);
        let grads = sgs_backward(&g, &cache, &seq, &params).unwrap();
        assert!(grads.params.flatten().data().iter().all(|&v| v == 0.0));
        assert!(grads.frames.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn grid_measures_respect_grid_size() {
        let mut rng = SeededRng::new(19);
        let seq = clip(&mut rng, 12, 3);
        let params = SimilarityParams::init(3, 3, &mut rng);
        let cfg = SgsConfig {
            bins: 4,
            measure: Measure::Spherical,
            grid: Some(vec![2, 4, 4]),
            ..SgsConfig::default()
        };
        let (out, cache) = sgs_apply(&seq, &params, &cfg).unwrap();
        assert!(out.b_prime() <= 12);
        assert!(out.surviving_bins.iter().all(|&b| b < 32));
        assert_eq!(cache.coords.shape(), &[12, 3]);

        let angular = SgsConfig {
            measure: Measure::Angular,
            grid: Some(vec![2, 4, 4]),
            ..cfg
        };
        assert!(sgs_apply(&seq, &params, &angular).is_err());
    }

    #[test]
    fn frozen_geometry_kind_must_match_measure() {
        let mut rng = SeededRng::new(23);
        let seq = clip(&mut rng, 4, 2);
        let params = SimilarityParams::init(2, 2, &mut rng);
        let (_, cache) = sgs_apply(&seq, &params, &SgsConfig::with_bins(4)).unwrap();
        let cfg = SgsConfig {
            measure: Measure::Angular,
            ..SgsConfig::with_bins(4)
        };
        assert!(sgs_apply_frozen(&seq, &params, &cfg, &cache.geometry).is_err());
    }
}
