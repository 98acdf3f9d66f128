use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sgs_core::{
    report, sgs_apply, BinMode, FeatureSequence, Geometry, KernelKind, LayerStack, Measure,
    SgsConfig, SimilarityParams, Tensor,
};

use crate::demo::{run_demo, write_demo, CorpusRegime, DemoConfig};
use crate::error::{read_file, to_json, write_file, HarnessError, Result};
use crate::gradcheck::{default_suite, run_suite, GradCase};
use crate::io::read_tensor;
use crate::train::{train_toy, write_train, ToyModelConfig};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "sgs", version, about = "Similarity guided sampling harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, env = "SGS_SEED", default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// JSON array of cases replacing the default suite.
        #[arg(long)]
        cases: Option<PathBuf>,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of active bins over a synthetic corpus.
    Demo(DemoArgs),
    /// Train the similarity network end to end on a toy task.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "SGS_SEED", default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// FLOP report for a layer stack given per-clip B'.
    Flops {
        #[arg(long)]
        stack: PathBuf,
        /// CSV with `clip` and `b_prime` columns.
        #[arg(long = "bprime-csv")]
        bprime_csv: PathBuf,
        #[arg(long = "t-full")]
        t_full: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump magnitudes, bin geometry and assignment for one clip.
    Bins {
        /// `T x C x H x W` tensor file.
        #[arg(long)]
        input: PathBuf,
        /// Four tensor files: w1 (C x C), b1 (C), w2 (L x C), b2 (L).
        #[arg(long, num_args = 4, required = true)]
        params: Vec<PathBuf>,
        #[arg(long)]
        bins: usize,
        #[arg(long, default_value = "strict")]
        mode: BinMode,
        #[arg(long, default_value = "linear")]
        kernel: KernelKind,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, value_parser = parse_corpus)]
    regime: CorpusRegime,
    #[arg(long)]
    clips: usize,
    #[arg(long)]
    t: usize,
    #[arg(long)]
    c: usize,
    #[arg(long)]
    h: usize,
    #[arg(long)]
    w: usize,
    #[arg(long)]
    bins: usize,
    #[arg(long, default_value = "linear")]
    kernel: KernelKind,
    #[arg(long, default_value = "strict")]
    mode: BinMode,
    #[arg(long, default_value = "magnitude")]
    measure: Measure,
    /// Noise level of redundant clips.
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long = "embed-dim", default_value_t = 8)]
    embed_dim: usize,
    #[arg(long, env = "SGS_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_corpus(s: &str) -> std::result::Result<CorpusRegime, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("expected redundant, diverse, drifting or mixed, got {s:?}"))
}

/// Runs one subcommand and returns the text for stdout.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Gradcheck { seed, tol, cases, out } => {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(HarnessError::Config(format!("tolerance must be positive, got {tol}")));
            }
            let suite = match cases {
                Some(path) => parse_json::<Vec<GradCase>>(&path)?,
                None => default_suite(seed),
            };
            let report = run_suite(&suite, tol)?;
            let json = to_json(&report);
            if let Some(path) = out {
                write_file(&path, &json)?;
            }
            if !report.passed {
                return Err(HarnessError::Check(format!(
                    "gradient cases above tolerance {tol:e}: {}",
                    report.failures().join(", ")
                )));
            }
            Ok(String::from_utf8(json).unwrap())
        }
        Command::Demo(a) => {
            let cfg = DemoConfig {
                regime: a.regime,
                clips: a.clips,
                t: a.t,
                c: a.c,
                h: a.h,
                w: a.w,
                sigma: a.sigma,
                embed_dim: a.embed_dim,
                seed: a.seed,
                sgs: SgsConfig {
                    bins: a.bins,
                    mode: a.mode,
                    kernel: a.kernel,
                    measure: a.measure,
                    ..SgsConfig::default()
                },
            };
            if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
                return Err(HarnessError::Config(format!("sigma must be >= 0, got {}", cfg.sigma)));
            }
            if [cfg.t, cfg.c, cfg.h, cfg.w].contains(&0) {
                return Err(HarnessError::Config("clip dimensions must be positive".into()));
            }
            let report = run_demo(&cfg)?;
            write_demo(&report, &a.out)?;
            Ok(format!(
                "{} clips, mean B' {:.4}, histogram {:?}\n",
                report.histogram.total(),
                report.histogram.mean_b_prime,
                report.histogram.counts
            ))
        }
        Command::TrainToy { config, out, seed } => {
            let cfg: ToyModelConfig = parse_json(&config)?;
            let (report, _) = train_toy(&cfg, seed)?;
            write_train(&report, &out)?;
            Ok(format!(
                "accuracy {:.4}, final loss {:.6}, mean B' per class {:?}\n",
                report.accuracy, report.final_loss, report.mean_b_prime
            ))
        }
        Command::Flops { stack, bprime_csv, t_full, out } => {
            let text = String::from_utf8(read_file(&stack)?)
                .map_err(|_| HarnessError::format(&stack, "not UTF-8"))?;
            let stack = LayerStack::parse(&text)?;
            let clips = read_bprime_csv(&bprime_csv)?;
            let r = report(&clips, &stack, t_full)?;
            write_file(&out, &to_json(&r))?;
            Ok(format!(
                "average {:.6} GFLOPs, reduction {:.6}\n",
                r.average_gflops, r.reduction_fraction
            ))
        }
        Command::Bins { input, params, bins, mode, kernel, out } => {
            let seq = FeatureSequence::new(read_tensor(&input)?.cast::<f64>())?;
            let p: Vec<Tensor> = params
                .iter()
                .map(|p| read_tensor(p).map(|t| t.cast::<f64>()))
                .collect::<Result<_>>()?;
            let [w1, b1, w2, b2]: [Tensor; 4] = p.try_into().expect("clap enforces four files");
            let params = SimilarityParams::new(w1, b1, w2, b2)?;
            let cfg = SgsConfig {
                bins,
                mode,
                kernel,
                ..SgsConfig::default()
            };
            let csv = bins_csv(&seq, &params, &cfg)?;
            write_file(&out, &csv)?;
            Ok(String::new())
        }
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

/// Reads `(clip, b_prime)` pairs from a CSV with a header naming both
/// columns; other columns are ignored.
pub fn read_bprime_csv(path: &Path) -> Result<Vec<(String, u64)>> {
    let bytes = read_file(path)?;
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    let headers = rd.headers().map_err(|e| HarnessError::format(path, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| HarnessError::format(path, format!("missing column {name:?}")))
    };
    let (ci, bi) = (col("clip")?, col("b_prime")?);
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| HarnessError::format(path, e.to_string()))?;
        let b = rec[bi].trim().parse::<u64>().map_err(|_| {
            HarnessError::format(path, format!("row {}: bad b_prime {:?}", line + 1, &rec[bi]))
        })?;
        out.push((rec[ci].trim().to_string(), b));
    }
    Ok(out)
}

#[derive(Serialize)]
struct BinRow {
    record: &'static str,
    index: usize,
    value: f64,
    bin: Option<usize>,
    weight: Option<f64>,
}

/// CSV rows `record,index,value,bin,weight`: one `gamma` row, one `center`
/// row per bin, and one `frame` row per frame holding its magnitude and, when
/// assigned, its bin and weight.
pub fn bins_csv(seq: &FeatureSequence, params: &SimilarityParams, cfg: &SgsConfig) -> Result<Vec<u8>> {
    let (_, cache) = sgs_apply(seq, params, cfg)?;
    let Geometry::Scalar(g) = &cache.geometry else {
        unreachable!("magnitude measure has a scalar geometry")
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut row = |r: BinRow| w.serialize(r).expect("in-memory csv");
    row(BinRow { record: "gamma", index: 0, value: g.gamma, bin: None, weight: None });
    for (b, &c) in g.centers.iter().enumerate() {
        row(BinRow { record: "center", index: b, value: c, bin: None, weight: None });
    }
    let delta = cache.delta().expect("magnitude measure");
    for (t, &d) in delta.iter().enumerate() {
        let hit = cache.assignment.entries.iter().find(|e| e.frame == t);
        row(BinRow {
            record: "frame",
            index: t,
            value: d,
            bin: hit.map(|e| e.bin),
            weight: hit.map(|e| e.weight),
        });
    }
    Ok(w.into_inner().expect("in-memory csv"))
}
