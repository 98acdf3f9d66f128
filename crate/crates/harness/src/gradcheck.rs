//! Finite-difference checks of the full backward pass.
//!
//! Every case draws a clip and similarity parameters, freezes the bin
//! geometry at a maximum slightly past the observed one, and compares the
//! analytic gradient of `sum(O^2)` against central differences for
//!
//! * the similarity parameters,
//! * the input frames,
//! * the bin coordinates (the sampler's own coordinate gradient).
//!
//! Draws with a coordinate within `1e-3 * gamma` of a kernel kink, or a relu
//! input within `1e-5` of zero, are rejected and redrawn.

use serde::{Deserialize, Serialize};
use sgs_core::{
    finite_diff, max_rel_error, sample_backward_multidim, sample_forward_multidim, sgs_apply,
    sgs_apply_frozen, sgs_backward, BinGeometry, BinMode, FeatureSequence, Geometry, KernelKind,
    Measure, MultiDimGeometry, SeededRng, SgsCache, SgsConfig, SgsGrads, SimilarityParams, Step,
    Tensor,
};

use crate::error::{HarnessError, Result};

const KINK_MARGIN: f64 = 1e-3;
const RELU_MARGIN: f64 = 1e-5;
const MAX_DRAWS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub sgs: SgsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub draws: usize,
    pub b_prime: usize,
    pub params_error: f64,
    pub frames_error: f64,
    pub coords_error: f64,
    pub max_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failures(&self) -> Vec<&str> {
        self.cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

/// Twenty cases across measures, modes and kernels, sizes drawn from `seed`.
pub fn default_suite(seed: u64) -> Vec<GradCase> {
    let mut rng = SeededRng::new(seed);
    let mut cases = Vec::with_capacity(20);
    for i in 0..20 {
        let (measure, grid, kernel, normalize) = match i % 10 {
            6 => (Measure::Angular, true, KernelKind::Linear, false),
            7 => (Measure::Spherical, true, KernelKind::Linear, false),
            8 => (Measure::Magnitude, false, KernelKind::Kronecker, false),
            9 => (Measure::Magnitude, false, KernelKind::Linear, true),
            _ => (Measure::Magnitude, false, KernelKind::Linear, false),
        };
        let mode = if i % 2 == 0 { BinMode::Strict } else { BinMode::Centered };
        let t = 2 + rng.below(31);
        let c = 1 + rng.below(16);
        let embed_dim = if grid { 2 + rng.below(2) } else { 1 + rng.below(8) };
        let sgs = SgsConfig {
            bins: 1 + rng.below(32),
            mode,
            kernel,
            measure,
            grid: grid.then(|| {
                let k = if measure == Measure::Angular { embed_dim - 1 } else { embed_dim };
                (0..k).map(|_| 1 + rng.below(4)).collect()
            }),
            normalize,
        };
        cases.push(GradCase {
            name: format!("case{i:02}-{measure}-{mode}-{kernel}{}", if normalize { "-norm" } else { "" }),
            seed: rng.next_u64(),
            t,
            c,
            h: 1 + rng.below(3),
            w: 1 + rng.below(3),
            embed_dim,
            sgs,
        });
    }
    cases
}

fn near_kink(x: f64, axis: &BinGeometry) -> bool {
    let margin = KINK_MARGIN * axis.gamma;
    axis.centers
        .iter()
        .any(|&b| (x - b).abs() < margin || ((x - b).abs() - axis.gamma).abs() < margin)
}

/// Geometry fitted to `cache` with every radial axis stretched by `inflate`,
/// or `None` when the draw lies too close to a kink.
fn frozen_geometry(cache: &SgsCache, inflate: f64) -> Option<Geometry> {
    if cache.embed.pre.data().iter().any(|v| v.abs() < RELU_MARGIN) {
        return None;
    }
    let k_len = cache.columns.len();
    let axis_max = |k: usize| {
        cache.coords.data().iter().skip(k).step_by(k_len).copied().fold(0.0, f64::max)
    };
    let stretch = |k: usize, g: &BinGeometry| {
        BinGeometry::from_max(axis_max(k) * inflate, g.bin_count, g.mode, sgs_core::DEGENERATE_EPS)
    };
    let geometry = match &cache.geometry {
        Geometry::Scalar(g) => Geometry::Scalar(stretch(0, g).ok()?),
        Geometry::Grid(md) => Geometry::Grid(MultiDimGeometry {
            axes: md
                .axes
                .iter()
                .zip(&md.kinds)
                .enumerate()
                .map(|(k, (g, kind))| match kind.fixed_range::<f64>() {
                    Some(_) => Some(g.clone()),
                    None => stretch(k, g).ok(),
                })
                .collect::<Option<Vec<_>>>()?,
            kinds: md.kinds.clone(),
        }),
    };
    let axes = geometry.axes();
    if axes.iter().any(|a| a.degenerate) {
        return None;
    }
    for row in cache.coords.data().chunks(k_len) {
        if row.iter().zip(axes).any(|(&x, a)| near_kink(x, a)) {
            return None;
        }
    }
    Some(geometry)
}

/// Analytic gradient of the whole operator given `dLoss/dO`.
pub type BackwardFn<'a> =
    dyn Fn(&Tensor, &SgsCache, &FeatureSequence, &SimilarityParams) -> sgs_core::Result<SgsGrads> + 'a;

pub fn run_case(case: &GradCase, tol: f64) -> Result<CaseResult> {
    run_case_with(case, tol, &|g, cache, seq, params| sgs_backward(g, cache, seq, params))
}

/// As [`run_case`] with a substitute backward pass.
pub fn run_case_with(case: &GradCase, tol: f64, backward: &BackwardFn) -> Result<CaseResult> {
    case.sgs.validate()?;
    if [case.t, case.c, case.h, case.w, case.embed_dim].contains(&0) {
        return Err(HarnessError::Config(format!("{}: sizes must be positive", case.name)));
    }
    let mut rng = SeededRng::new(case.seed);
    let mut draws = 0;
    let (seq, params, geometry) = loop {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(HarnessError::Check(format!(
                "{}: no kink-free draw in {MAX_DRAWS} attempts",
                case.name
            )));
        }
        let seq = FeatureSequence::new(rng.normal_tensor(vec![case.t, case.c, case.h, case.w], 1.0))?;
        let mut params = SimilarityParams::init(case.c, case.embed_dim, &mut rng);
        params.b1 = rng.normal_tensor(vec![case.c], 0.1);
        params.b2 = rng.normal_tensor(vec![case.embed_dim], 0.5);
        let inflate = rng.uniform(1.02, 1.2);
        let (_, cache) = sgs_apply(&seq, &params, &case.sgs)?;
        if let Some(g) = frozen_geometry(&cache, inflate) {
            break (seq, params, g);
        }
    };

    let (out, cache) = sgs_apply_frozen(&seq, &params, &case.sgs, &geometry)?;
    let grad_out = out.outputs.map(|v| 2.0 * v);
    let grads = backward(&grad_out, &cache, &seq, &params)?;
    let fd = |f: &dyn Fn(&Tensor) -> f64, at: &Tensor| {
        finite_diff(f, at, Step::default()).map_err(|e| HarnessError::Check(format!("{}: {e}", case.name)))
    };

    let num = fd(
        &|flat| {
            let q = params.unflatten(flat.data()).expect("same length");
            loss_frozen(&seq, &q, &case.sgs, &geometry)
        },
        &params.flatten(),
    )?;
    let params_error = max_rel_error(grads.params.flatten().data(), num.data());

    let num = fd(
        &|x| {
            let s = FeatureSequence::new(x.clone()).expect("same shape");
            loss_frozen(&s, &params, &case.sgs, &geometry)
        },
        seq.frames(),
    )?;
    let frames_error = max_rel_error(grads.frames.data(), num.data());

    let grid = match &geometry {
        Geometry::Scalar(g) => MultiDimGeometry {
            axes: vec![g.clone()],
            kinds: vec![sgs_core::CoordKind::Radial],
        },
        Geometry::Grid(md) => md.clone(),
    };
    let opts = sgs_core::SampleOptions {
        normalize: case.sgs.normalize,
    };
    let sampler_grads = sample_backward_multidim(&grad_out, &cache.assignment, &seq)?;
    let num = fd(
        &|coords| {
            sample_forward_multidim(&seq, coords, &grid, case.sgs.kernel, opts)
                .expect("frozen grid")
                .0
                .outputs
                .sum_squares()
        },
        &cache.coords,
    )?;
    let coords_error = max_rel_error(sampler_grads.coords.data(), num.data());

    let max_error = params_error.max(frames_error).max(coords_error);
    Ok(CaseResult {
        name: case.name.clone(),
        draws,
        b_prime: out.b_prime(),
        params_error,
        frames_error,
        coords_error,
        max_error,
        passed: max_error <= tol,
    })
}

fn loss_frozen(seq: &FeatureSequence, params: &SimilarityParams, cfg: &SgsConfig, g: &Geometry) -> f64 {
    sgs_apply_frozen(seq, params, cfg, g)
        .expect("frozen geometry matches the configuration")
        .0
        .outputs
        .sum_squares()
}

pub fn run_suite(cases: &[GradCase], tol: f64) -> Result<GradcheckReport> {
    let cases = cases
        .iter()
        .map(|c| run_case(c, tol))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        tolerance: tol,
        passed: cases.iter().all(|c| c.passed),
        cases,
    })
}
