//! Bin coordinates derived from similarity vectors, and the uniform bin
//! geometry (half-width `gamma`, centers `(2b - 1) * gamma`) laid over them.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgsError};
use crate::scalar::Scalar;
use crate::similarity::SimilarityVectors;
use crate::tensor::Tensor;

/// Magnitudes at or below this are treated as all-zero input.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Which coordinates of the similarity vectors are binned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    /// L2 norm only (one coordinate).
    #[default]
    Magnitude,
    /// The `L - 1` angles of the spherical representation.
    Angular,
    /// Radius and all `L - 1` angles.
    Spherical,
}

/// How bin geometry is fitted to the largest coordinate value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinMode {
    /// `gamma = max / 2B`; the maximum lands on the outer edge of the last bin.
    #[default]
    Strict,
    /// `gamma = max / (2B - 1)`; the maximum lands on the last bin center.
    Centered,
}

str_enum!(Measure { Magnitude => "magnitude", Angular => "angular", Spherical => "spherical" });
str_enum!(BinMode { Strict => "strict", Centered => "centered" });

/// Per-frame scalar bin coordinate `Δ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeTrack<S = f64> {
    pub delta: Vec<S>,
    pub measure: Measure,
}

impl<S: Scalar> MagnitudeTrack<S> {
    pub fn new(delta: Vec<S>) -> Self {
        Self {
            delta,
            measure: Measure::Magnitude,
        }
    }

    pub fn max(&self) -> S {
        self.delta.iter().copied().fold(S::zero(), S::max)
    }
}

/// Uniform bins over `[0, max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinGeometry<S = f64> {
    pub bin_count: usize,
    pub gamma: S,
    pub centers: Vec<S>,
    pub mode: BinMode,
    /// The maximum was below [`DEGENERATE_EPS`]; every frame goes to bin 1.
    pub degenerate: bool,
}

impl<S: Scalar> BinGeometry<S> {
    /// Geometry for a known maximum (observed or a fixed coordinate range).
    pub fn from_max(max: S, bin_count: usize, mode: BinMode, eps_abs: S) -> Result<Self> {
        if bin_count == 0 {
            return Err(SgsError::Config("bin count must be at least 1".into()));
        }
        if !max.is_finite() {
            return Err(SgsError::NonFinite {
                context: "bin geometry maximum",
                index: 0,
            });
        }
        if max <= eps_abs {
            return Ok(Self {
                bin_count,
                gamma: S::zero(),
                centers: vec![S::zero(); bin_count],
                mode,
                degenerate: true,
            });
        }
        let divisor = match mode {
            BinMode::Strict => 2 * bin_count,
            BinMode::Centered => 2 * bin_count - 1,
        };
        let gamma = max / S::from_count(divisor);
        let centers = (1..=bin_count)
            .map(|b| S::from_count(2 * b - 1) * gamma)
            .collect();
        Ok(Self {
            bin_count,
            gamma,
            centers,
            mode,
            degenerate: false,
        })
    }

    /// Zero-based index of the bin whose support tiles the cell containing
    /// `delta`, clamped to the valid range. Only this bin and its two
    /// neighbours can give `delta` a positive kernel weight.
    pub fn candidate(&self, delta: S) -> usize {
        if self.degenerate {
            return 0;
        }
        let cell = (delta / (self.gamma + self.gamma)).floor();
        if !(cell > S::zero()) {
            return 0;
        }
        cell.to_usize().unwrap_or(usize::MAX).min(self.bin_count - 1)
    }
}

/// Kind of a binned coordinate, which fixes how its range is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordKind {
    /// Binned over `[0, observed max]`.
    Radial,
    /// Angle in `[0, π]`.
    Polar,
    /// Last angle, in `[0, 2π)`.
    Azimuth,
}

impl CoordKind {
    pub fn fixed_range<S: Scalar>(self) -> Option<S> {
        match self {
            CoordKind::Radial => None,
            CoordKind::Polar => Some(S::PI()),
            CoordKind::Azimuth => Some(S::TAU()),
        }
    }
}

/// Spherical columns binned under `measure` for embedding dimension `l`,
/// with their kinds. Column 0 of [`to_spherical`] is the radius.
pub fn binned_columns(measure: Measure, l: usize) -> Result<Vec<(usize, CoordKind)>> {
    let angle_kind = |col: usize| if col + 1 == l { CoordKind::Azimuth } else { CoordKind::Polar };
    match measure {
        Measure::Magnitude => Ok(vec![(0, CoordKind::Radial)]),
        _ if l < 2 => Err(SgsError::Config(format!(
            "{measure} measure needs an embedding dimension of at least 2, got {l}"
        ))),
        Measure::Angular => Ok((1..l).map(|c| (c, angle_kind(c))).collect()),
        Measure::Spherical => Ok(std::iter::once((0, CoordKind::Radial))
            .chain((1..l).map(|c| (c, angle_kind(c))))
            .collect()),
    }
}

/// One geometry per binned coordinate; bins form the product grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiDimGeometry<S = f64> {
    pub axes: Vec<BinGeometry<S>>,
    pub kinds: Vec<CoordKind>,
}

impl<S: Scalar> MultiDimGeometry<S> {
    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn grid_shape(&self) -> Vec<usize> {
        self.axes.iter().map(|g| g.bin_count).collect()
    }

    /// Total number of grid bins, saturating.
    pub fn grid_size(&self) -> usize {
        self.axes
            .iter()
            .fold(1usize, |acc, g| acc.saturating_mul(g.bin_count))
    }
}

/// `Δ_t = ||Z_t||_2`.
pub fn magnitudes<S: Scalar>(z: &SimilarityVectors<S>) -> MagnitudeTrack<S> {
    MagnitudeTrack::new((0..z.t()).map(|t| l2(z.row(t))).collect())
}

fn l2<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

/// Cartesian to hyperspherical coordinates, row by row.
///
/// Column 0 is the radius, columns `1..L-1` are polar angles in `[0, π]` and
/// the last column is the azimuth in `[0, 2π)`. Undefined angles (zero tail
/// norm) are reported as 0.
pub fn to_spherical<S: Scalar>(z: &SimilarityVectors<S>) -> Result<Tensor<S>> {
    let l = z.dim();
    if l < 2 {
        return Err(SgsError::Config(format!(
            "spherical coordinates need L >= 2, got {l}"
        )));
    }
    let mut out = Tensor::zeros(vec![z.t(), l]);
    for t in 0..z.t() {
        let x = z.row(t);
        let tails = tail_norms(x);
        let row = out.row_mut(t);
        row[0] = tails[0];
        for k in 0..l - 2 {
            row[k + 1] = if tails[k] > S::zero() {
                (x[k] / tails[k]).max(-S::one()).min(S::one()).acos()
            } else {
                S::zero()
            };
        }
        row[l - 1] = azimuth(x[l - 2], x[l - 1]);
    }
    Ok(out)
}

/// `tails[k] = ||x[k..]||`, with a trailing zero at index `len`.
fn tail_norms<S: Scalar>(x: &[S]) -> Vec<S> {
    let mut sq = vec![S::zero(); x.len() + 1];
    for k in (0..x.len()).rev() {
        sq[k] = sq[k + 1] + x[k] * x[k];
    }
    sq.into_iter().map(S::sqrt).collect()
}

fn azimuth<S: Scalar>(a: S, b: S) -> S {
    if a == S::zero() && b == S::zero() {
        return S::zero();
    }
    let mut phi = b.atan2(a);
    if phi < S::zero() {
        phi += S::TAU();
        if phi >= S::TAU() {
            phi = S::zero();
        }
    }
    phi
}

/// Inverse of [`to_spherical`].
pub fn from_spherical<S: Scalar>(coords: &Tensor<S>) -> Tensor<S> {
    let (t_len, l) = (coords.shape()[0], coords.shape()[1]);
    let mut out = Tensor::zeros(vec![t_len, l]);
    for t in 0..t_len {
        let c = coords.row(t);
        let row = out.row_mut(t);
        let mut sin_prod = c[0];
        for k in 0..l - 1 {
            row[k] = sin_prod * c[k + 1].cos();
            sin_prod *= c[k + 1].sin();
        }
        row[l - 1] = sin_prod;
    }
    out
}

/// Vector-Jacobian product of [`to_spherical`]: maps `dLoss/dcoords`
/// (`T x L`) to `dLoss/dZ`. Singular points (zero radius or zero tail norm)
/// contribute zero.
pub fn spherical_backward<S: Scalar>(z: &SimilarityVectors<S>, grad_coords: &Tensor<S>) -> Result<Tensor<S>> {
    let l = z.dim();
    if grad_coords.shape() != [z.t(), l] {
        return Err(SgsError::dim("spherical_backward", [z.t(), l], grad_coords.shape()));
    }
    let mut out = Tensor::zeros(vec![z.t(), l]);
    for t in 0..z.t() {
        let x = z.row(t);
        let g = grad_coords.row(t);
        let tails = tail_norms(x);
        let gx = out.row_mut(t);
        if tails[0] > S::zero() {
            for (d, &xv) in gx.iter_mut().zip(x) {
                *d += g[0] * xv / tails[0];
            }
        }
        for k in 0..l.saturating_sub(2) {
            let (rk, rk1) = (tails[k], tails[k + 1]);
            if rk1 <= S::zero() {
                continue;
            }
            let gk = g[k + 1];
            let rk2 = rk * rk;
            gx[k] -= gk * rk1 / rk2;
            for j in k + 1..l {
                gx[j] += gk * x[k] * x[j] / (rk1 * rk2);
            }
        }
        let (a, b) = (x[l - 2], x[l - 1]);
        let r2 = a * a + b * b;
        if r2 > S::zero() {
            let gl = g[l - 1];
            gx[l - 2] -= gl * b / r2;
            gx[l - 1] += gl * a / r2;
        }
    }
    Ok(out)
}

/// Geometry for the magnitude track: bins over `[0, max Δ]`.
pub fn make_geometry<S: Scalar>(
    delta: &MagnitudeTrack<S>,
    bin_count: usize,
    mode: BinMode,
    eps_abs: S,
) -> Result<BinGeometry<S>> {
    if delta.delta.is_empty() {
        return Err(SgsError::Config("cannot bin an empty magnitude track".into()));
    }
    if let Some(index) = delta.delta.iter().position(|d| !d.is_finite()) {
        return Err(SgsError::NonFinite {
            context: "magnitude track",
            index,
        });
    }
    BinGeometry::from_max(delta.max(), bin_count, mode, eps_abs)
}

/// Independent geometry per column of `coords` (`T x K`). Radial columns use
/// the observed column maximum, angular columns their full fixed range.
pub fn make_multidim_geometry<S: Scalar>(
    coords: &Tensor<S>,
    kinds: &[CoordKind],
    bins_per_coord: &[usize],
    mode: BinMode,
    eps_abs: S,
) -> Result<MultiDimGeometry<S>> {
    if coords.rank() != 2 || coords.shape()[1] != kinds.len() {
        return Err(SgsError::dim("make_multidim_geometry coords", ["T", "K"], coords.shape()));
    }
    if bins_per_coord.len() != kinds.len() {
        return Err(SgsError::dim(
            "make_multidim_geometry bins",
            kinds.len(),
            bins_per_coord.len(),
        ));
    }
    coords.check_finite("bin coordinates")?;
    let t_len = coords.shape()[0];
    let k_len = kinds.len();
    let axes = kinds
        .iter()
        .zip(bins_per_coord)
        .enumerate()
        .map(|(k, (&kind, &bins))| {
            let max = kind.fixed_range().unwrap_or_else(|| {
                (0..t_len)
                    .map(|t| coords.data()[t * k_len + k])
                    .fold(S::zero(), S::max)
            });
            BinGeometry::from_max(max, bins, mode, eps_abs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiDimGeometry {
        axes,
        kinds: kinds.to_vec(),
    })
}
