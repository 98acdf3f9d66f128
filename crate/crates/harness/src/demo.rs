//! Active-bin histograms over synthetic corpora.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sgs_core::{sgs_apply, SeededRng, SgsConfig, SimilarityParams};

use crate::error::{to_json, write_file, HarnessError, Result};
use crate::synth::{clip_seed, gen_clip, Regime, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusRegime {
    Redundant,
    Diverse,
    Drifting,
    /// Cycles redundant, diverse, drifting by clip index.
    Mixed,
}

impl CorpusRegime {
    pub fn for_clip(self, index: usize) -> Regime {
        match self {
            CorpusRegime::Redundant => Regime::Redundant,
            CorpusRegime::Diverse => Regime::Diverse,
            CorpusRegime::Drifting => Regime::Drifting,
            CorpusRegime::Mixed => [Regime::Redundant, Regime::Diverse, Regime::Drifting][index % 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub regime: CorpusRegime,
    pub clips: usize,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub sigma: f64,
    pub embed_dim: usize,
    pub seed: u64,
    pub sgs: SgsConfig,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            regime: CorpusRegime::Mixed,
            clips: 100,
            t: 16,
            c: 8,
            h: 4,
            w: 4,
            sigma: 0.01,
            embed_dim: 8,
            seed: 42,
            sgs: SgsConfig::with_bins(16),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub clip: usize,
    pub regime: Regime,
    pub b_prime: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    /// Largest attainable `B'`: `min(bins, T)`.
    pub max_b_prime: usize,
    /// `counts[i]` clips ended with `B' = i + 1`.
    pub counts: Vec<usize>,
    pub mean_b_prime: f64,
}

impl HistogramReport {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub config: DemoConfig,
    pub histogram: HistogramReport,
    /// Mean `B'` per regime present in the corpus.
    pub mean_b_prime_by_regime: BTreeMap<Regime, f64>,
    pub clips: Vec<ClipResult>,
}

pub fn run_demo(cfg: &DemoConfig) -> Result<DemoReport> {
    cfg.sgs.validate()?;
    if cfg.clips == 0 {
        return Err(HarnessError::Config("corpus needs at least one clip".into()));
    }
    if cfg.embed_dim == 0 {
        return Err(HarnessError::Config("embedding dimension must be positive".into()));
    }
    let max_b_prime = cfg.sgs.max_bins(cfg.embed_dim)?.min(cfg.t);
    let params = SimilarityParams::init(cfg.c, cfg.embed_dim, &mut SeededRng::new(cfg.seed).fork(0));

    let clips = (0..cfg.clips)
        .into_par_iter()
        .map(|clip| {
            let regime = cfg.regime.for_clip(clip);
            let seq = gen_clip(&SyntheticSpec {
                t: cfg.t,
                c: cfg.c,
                h: cfg.h,
                w: cfg.w,
                regime,
                sigma: cfg.sigma,
                seed: clip_seed(cfg.seed, clip),
                offset: 0.0,
            })?;
            let (out, _) = sgs_apply(&seq, &params, &cfg.sgs)?;
            Ok(ClipResult {
                clip,
                regime,
                b_prime: out.b_prime(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut counts = vec![0usize; max_b_prime];
    let mut by_regime: BTreeMap<Regime, (usize, usize)> = BTreeMap::new();
    for c in &clips {
        counts[c.b_prime - 1] += 1;
        let e = by_regime.entry(c.regime).or_default();
        e.0 += c.b_prime;
        e.1 += 1;
    }
    let total: usize = clips.iter().map(|c| c.b_prime).sum();
    Ok(DemoReport {
        config: cfg.clone(),
        histogram: HistogramReport {
            max_b_prime,
            counts,
            mean_b_prime: total as f64 / clips.len() as f64,
        },
        mean_b_prime_by_regime: by_regime
            .into_iter()
            .map(|(r, (sum, n))| (r, sum as f64 / n as f64))
            .collect(),
        clips,
    })
}

/// Writes `report.json`, `histogram.csv` (`b_prime,count`) and `clips.csv`
/// (`clip,regime,b_prime`) into `dir`.
pub fn write_demo(report: &DemoReport, dir: &Path) -> Result<()> {
    write_file(&dir.join("report.json"), &to_json(report))?;

    let mut hist = csv::Writer::from_writer(Vec::new());
    hist.write_record(["b_prime", "count"]).unwrap();
    for (i, n) in report.histogram.counts.iter().enumerate() {
        hist.write_record([(i + 1).to_string(), n.to_string()]).unwrap();
    }
    write_file(&dir.join("histogram.csv"), &hist.into_inner().unwrap())?;

    let mut clips = csv::Writer::from_writer(Vec::new());
    clips.write_record(["clip", "regime", "b_prime"]).unwrap();
    for c in &report.clips {
        clips
            .write_record([c.clip.to_string(), c.regime.name().to_string(), c.b_prime.to_string()])
            .unwrap();
    }
    write_file(&dir.join("clips.csv"), &clips.into_inner().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(regime: CorpusRegime) -> DemoConfig {
        DemoConfig {
            regime,
            clips: 12,
            t: 8,
            c: 3,
            h: 2,
            w: 2,
            sgs: SgsConfig::with_bins(8),
            ..DemoConfig::default()
        }
    }

    #[test]
    fn noiseless_redundant_corpus_has_one_bin_per_clip() {
        let r = run_demo(&DemoConfig {
            sigma: 0.0,
            ..small(CorpusRegime::Redundant)
        })
        .unwrap();
        assert_eq!(r.histogram.counts[0], 12);
        assert_eq!(r.histogram.total(), 12);
    }

    #[test]
    fn mixed_corpus_counts_every_clip() {
        let r = run_demo(&small(CorpusRegime::Mixed)).unwrap();
        assert_eq!(r.histogram.total(), 12);
        assert_eq!(r.mean_b_prime_by_regime.len(), 3);
        assert!(r.clips.iter().all(|c| (1..=8).contains(&c.b_prime)));
        let ids: Vec<usize> = r.clips.iter().map(|c| c.clip).collect();
        assert_eq!(ids, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn report_does_not_depend_on_thread_count() {
        let cfg = small(CorpusRegime::Mixed);
        let parallel = run_demo(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| run_demo(&cfg)).unwrap();
        assert_eq!(to_json(&parallel), to_json(&serial));
    }
}
