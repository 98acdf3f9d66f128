//! End-to-end training of the similarity network through SGS on a small
//! synthetic classification task.
//!
//! Each class is one clip regime. A clip is classified by averaging its bin
//! outputs over `B'`, flattening, and applying one affine layer followed by a
//! softmax. Gradients reach the similarity network through the bin weights.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sgs_core::{
    sgs_apply, sgs_backward, BinMode, FeatureSequence, SeededRng, SgsConfig, SgsError, SimilarityParams,
    Tensor,
};

use crate::error::{to_json, write_file, HarnessError, Result};
use crate::synth::{clip_seed, gen_clip, Regime, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// One class per regime, in label order.
    pub regimes: Vec<Regime>,
    pub clips_per_class: usize,
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub sigma: f64,
    pub offset: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            regimes: vec![Regime::Redundant, Regime::Diverse],
            clips_per_class: 64,
            t: 16,
            c: 4,
            h: 2,
            w: 2,
            sigma: 0.0,
            offset: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub sgs: SgsConfig,
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` falls back to the process default seed.
    pub seed: Option<u64>,
    pub dataset: DatasetConfig,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            sgs: SgsConfig {
                mode: BinMode::Centered,
                ..SgsConfig::with_bins(16)
            },
            embed_dim: 8,
            learning_rate: 0.001,
            epochs: 200,
            batch_size: 8,
            seed: None,
            dataset: DatasetConfig::default(),
        }
    }
}

impl ToyModelConfig {
    pub fn classes(&self) -> usize {
        self.dataset.regimes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.sgs.validate()?;
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.classes() < 2 {
            return bad("at least two classes are required");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.dataset.clips_per_class == 0 {
            return bad("clips_per_class must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        Ok(())
    }
}

/// Affine classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `classes x features`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    /// All-zero head: every class starts at probability `1 / classes`.
    fn zeros(classes: usize, features: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![classes, features]),
            bias: Tensor::zeros(vec![classes]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub similarity: SimilarityParams,
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    /// Mean training loss of each epoch, from the forward passes of that
    /// epoch.
    pub loss_curve: Vec<f64>,
    /// Training accuracy of each epoch, from the same forward passes.
    pub accuracy_curve: Vec<f64>,
    /// Accuracy of the final model on the training set.
    pub accuracy: f64,
    pub final_loss: f64,
    /// Mean `B'` per class under the final model.
    pub mean_b_prime: Vec<f64>,
}

struct Sample {
    clip: FeatureSequence,
    label: usize,
}

fn dataset(cfg: &ToyModelConfig, seed: u64) -> Result<Vec<Sample>> {
    let d = &cfg.dataset;
    let mut out = Vec::with_capacity(cfg.classes() * d.clips_per_class);
    for (label, &regime) in d.regimes.iter().enumerate() {
        for i in 0..d.clips_per_class {
            let clip = gen_clip(&SyntheticSpec {
                t: d.t,
                c: d.c,
                h: d.h,
                w: d.w,
                regime,
                sigma: d.sigma,
                seed: clip_seed(seed, label * d.clips_per_class + i),
                offset: d.offset,
            })?;
            out.push(Sample { clip, label });
        }
    }
    Ok(out)
}

struct Step {
    loss: f64,
    correct: bool,
    b_prime: usize,
}

/// Forward pass for one clip; accumulates gradients into `grads` when given.
fn step(
    model: &ToyModel,
    sgs: &SgsConfig,
    sample: &Sample,
    grads: Option<&mut ToyModel>,
) -> Result<Step> {
    let (out, cache) = sgs_apply(&sample.clip, &model.similarity, sgs)?;
    let bp = out.b_prime();
    let n = sample.clip.frame_len();
    let mut feat = vec![0.0; n];
    for b in 0..bp {
        for (f, &o) in feat.iter_mut().zip(out.outputs.row(b)) {
            *f += o;
        }
    }
    feat.iter_mut().for_each(|f| *f /= bp as f64);

    let classes = model.head.bias.len();
    let logits: Vec<f64> = (0..classes)
        .map(|k| {
            model.head.bias.data()[k]
                + model.head.weight.row(k).iter().zip(&feat).map(|(w, f)| w * f).sum::<f64>()
        })
        .collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + top - logits[sample.label];
    let predicted = (0..classes)
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
        .unwrap();

    if let Some(g) = grads {
        let dlogits: Vec<f64> = (0..classes)
            .map(|k| exps[k] / z - if k == sample.label { 1.0 } else { 0.0 })
            .collect();
        let mut dfeat = vec![0.0; n];
        for (k, &dl) in dlogits.iter().enumerate() {
            g.head.bias.data_mut()[k] += dl;
            let w_row = model.head.weight.row(k);
            for ((gw, &f), (df, &w)) in g.head.weight.row_mut(k).iter_mut().zip(&feat).zip(dfeat.iter_mut().zip(w_row)) {
                *gw += dl * f;
                *df += dl * w;
            }
        }
        let scale = 1.0 / bp as f64;
        let grad_out = Tensor::from_fn(out.outputs.shape().to_vec(), |i| dfeat[i % n] * scale);
        let sg = sgs_backward(&grad_out, &cache, &sample.clip, &model.similarity)?;
        g.similarity.axpy(1.0, &sg.params)?;
    }
    Ok(Step {
        loss,
        correct: predicted == sample.label,
        b_prime: bp,
    })
}

fn zeros_like(model: &ToyModel) -> ToyModel {
    ToyModel {
        similarity: SimilarityParams::zeros(model.similarity.channels(), model.similarity.embed_dim()),
        head: Head::zeros(model.head.bias.len(), model.head.weight.shape()[1]),
    }
}

/// Trains from scratch; returns the report and the final model.
pub fn train_toy(cfg: &ToyModelConfig, default_seed: u64) -> Result<(TrainReport, ToyModel)> {
    cfg.validate()?;
    let seed = cfg.seed.unwrap_or(default_seed);
    let root = SeededRng::new(seed);
    let data = dataset(cfg, seed)?;
    let mut model = ToyModel {
        similarity: SimilarityParams::init(cfg.dataset.c, cfg.embed_dim, &mut root.fork(1)),
        head: Head::zeros(cfg.classes(), cfg.dataset.c * cfg.dataset.h * cfg.dataset.w),
    };
    let mut order_rng = root.fork(3);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut accuracy_curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut losses = vec![0.0; data.len()];
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = zeros_like(&model);
            for &i in batch {
                let diverged = || {
                    HarnessError::Check(format!("training diverged: non-finite loss in epoch {epoch}"))
                };
                let s = match step(&model, &cfg.sgs, &data[i], Some(&mut grads)) {
                    Err(HarnessError::Sgs(SgsError::NonFinite { .. })) => return Err(diverged()),
                    r => r?,
                };
                if !s.loss.is_finite() {
                    return Err(diverged());
                }
                losses[i] = s.loss;
                correct += s.correct as usize;
            }
            let lr = -cfg.learning_rate / batch.len() as f64;
            model.similarity.axpy(lr, &grads.similarity)?;
            model.head.weight.axpy(lr, &grads.head.weight)?;
            model.head.bias.axpy(lr, &grads.head.bias)?;
        }
        // summed in clip order so the value does not depend on the shuffle
        loss_curve.push(losses.iter().sum::<f64>() / data.len() as f64);
        accuracy_curve.push(correct as f64 / data.len() as f64);
    }

    let mut correct = 0usize;
    let mut total_loss = 0.0;
    let mut b_sum = vec![0usize; cfg.classes()];
    for s in &data {
        let r = step(&model, &cfg.sgs, s, None)?;
        correct += r.correct as usize;
        total_loss += r.loss;
        b_sum[s.label] += r.b_prime;
    }
    let report = TrainReport {
        seed,
        loss_curve,
        accuracy_curve,
        accuracy: correct as f64 / data.len() as f64,
        final_loss: total_loss / data.len() as f64,
        mean_b_prime: b_sum
            .iter()
            .map(|&b| b as f64 / cfg.dataset.clips_per_class as f64)
            .collect(),
    };
    Ok((report, model))
}

/// Writes `report.json` and `loss.csv` (`epoch,loss,accuracy`) into `dir`.
pub fn write_train(report: &TrainReport, dir: &Path) -> Result<()> {
    write_file(&dir.join("report.json"), &to_json(report))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "loss", "accuracy"]).unwrap();
    for (e, (l, a)) in report.loss_curve.iter().zip(&report.accuracy_curve).enumerate() {
        w.write_record([e.to_string(), l.to_string(), a.to_string()]).unwrap();
    }
    write_file(&dir.join("loss.csv"), &w.into_inner().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyModelConfig {
        ToyModelConfig {
            sgs: SgsConfig::with_bins(8),
            embed_dim: 4,
            epochs: 5,
            batch_size: 4,
            seed: Some(3),
            dataset: DatasetConfig {
                clips_per_class: 4,
                t: 8,
                c: 3,
                h: 2,
                w: 2,
                ..DatasetConfig::default()
            },
            ..ToyModelConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let cfg = ToyModelConfig {
            learning_rate: 0.0,
            ..tiny()
        };
        let (r, m) = train_toy(&cfg, 42).unwrap();
        assert!(r.loss_curve.windows(2).all(|w| w[0] == w[1]));
        let (_, m0) = train_toy(&ToyModelConfig { epochs: 0, ..cfg }, 42).unwrap();
        assert_eq!(m, m0);
    }

    #[test]
    fn same_seed_same_curve() {
        let a = train_toy(&tiny(), 42).unwrap();
        let b = train_toy(&tiny(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let cfg = tiny();
        let data = dataset(&cfg, 5).unwrap();
        let root = SeededRng::new(5);
        let model = ToyModel {
            similarity: SimilarityParams::init(3, 4, &mut root.fork(1)),
            head: Head {
                weight: root.fork(2).uniform_tensor(vec![2, 12], -0.5, 0.5),
                bias: Tensor::zeros(vec![2]),
            },
        };
        let mut g = zeros_like(&model);
        step(&model, &cfg.sgs, &data[5], Some(&mut g)).unwrap();
        let h = 1e-6;
        for i in [0, 7, 13] {
            let mut p = model.clone();
            p.head.weight.data_mut()[i] += h;
            let up = step(&p, &cfg.sgs, &data[5], None).unwrap().loss;
            p.head.weight.data_mut()[i] -= 2.0 * h;
            let down = step(&p, &cfg.sgs, &data[5], None).unwrap().loss;
            let num = (up - down) / (2.0 * h);
            assert!((num - g.head.weight.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let mut cfg = tiny();
        cfg.dataset.regimes = vec![Regime::Diverse];
        assert!(matches!(train_toy(&cfg, 42), Err(HarnessError::Config(_))));
    }

    #[test]
    fn huge_learning_rate_reports_the_epoch() {
        let cfg = ToyModelConfig {
            learning_rate: 1e300,
            epochs: 10,
            ..tiny()
        };
        match train_toy(&cfg, 42) {
            Err(HarnessError::Check(m)) => assert!(m.contains("epoch"), "{m}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
