//! Seeded synthetic feature clips.

use serde::{Deserialize, Serialize};
use sgs_core::{FeatureSequence, SeededRng, Tensor};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// One base frame repeated, plus `N(0, sigma^2)` noise per element.
    Redundant,
    /// Independent `N(0, 1)` frames.
    Diverse,
    /// Linear interpolation between two random frames.
    Drifting,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Redundant => "redundant",
            Regime::Diverse => "diverse",
            Regime::Drifting => "drifting",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "redundant" => Ok(Regime::Redundant),
            "diverse" => Ok(Regime::Diverse),
            "drifting" => Ok(Regime::Drifting),
            _ => Err(HarnessError::Config(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub regime: Regime,
    pub sigma: f64,
    pub seed: u64,
    /// Constant added to every element after generation.
    #[serde(default)]
    pub offset: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if [self.t, self.c, self.h, self.w].contains(&0) {
            return Err(HarnessError::Config(format!(
                "clip dimensions must be positive, got {}x{}x{}x{}",
                self.t, self.c, self.h, self.w
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(HarnessError::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !self.offset.is_finite() {
            return Err(HarnessError::Config("offset must be finite".into()));
        }
        Ok(())
    }
}

pub fn gen_clip(spec: &SyntheticSpec) -> Result<FeatureSequence> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let n = spec.c * spec.h * spec.w;
    let t_len = spec.t;
    let mut data = Vec::with_capacity(t_len * n);
    match spec.regime {
        Regime::Redundant => {
            let base: Tensor = rng.normal_tensor(vec![n], 1.0);
            for _ in 0..t_len {
                data.extend(base.data().iter().map(|&b| {
                    if spec.sigma > 0.0 {
                        b + spec.sigma * rng.normal::<f64>()
                    } else {
                        b
                    }
                }));
            }
        }
        Regime::Diverse => data.extend(rng.normal_tensor::<f64>(vec![t_len * n], 1.0).into_data()),
        Regime::Drifting => {
            let a: Tensor = rng.normal_tensor(vec![n], 1.0);
            let b: Tensor = rng.normal_tensor(vec![n], 1.0);
            for t in 0..t_len {
                let alpha = if t_len > 1 { t as f64 / (t_len - 1) as f64 } else { 0.0 };
                data.extend(a.data().iter().zip(b.data()).map(|(x, y)| (1.0 - alpha) * x + alpha * y));
            }
        }
    }
    if spec.offset != 0.0 {
        data.iter_mut().for_each(|v| *v += spec.offset);
    }
    Ok(FeatureSequence::from_vec(t_len, spec.c, spec.h, spec.w, data)?)
}

/// Seed for clip `index` of a corpus, shared across regimes so that clip `i`
/// of two corpora is a matched pair.
pub fn clip_seed(corpus_seed: u64, index: usize) -> u64 {
    SeededRng::new(corpus_seed).fork(index as u64 + 1).next_u64()
}
