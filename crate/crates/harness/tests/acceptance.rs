//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use sgs_core::{
    layer_flops, make_geometry, report, sample_backward_multidim, sample_forward,
    sample_forward_multidim, sgs_apply, BinGeometry, BinMode, CoordKind, FeatureSequence,
    KernelKind, LayerSpec, LayerStack, MagnitudeTrack, MultiDimGeometry, Padding, SampleOptions,
    SeededRng, SgsConfig, SimilarityParams, Tensor,
};
use sgs_harness::demo::{run_demo, CorpusRegime, DemoConfig};
use sgs_harness::gradcheck::{default_suite, run_case, run_case_with, run_suite};
use sgs_harness::train::{train_toy, ToyModelConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut cases: Vec<_> = [42, 43]
        .into_iter()
        .flat_map(default_suite)
        .filter(|c| c.sgs.kernel == KernelKind::Linear)
        .collect();
    cases.truncate(24);
    ensure(cases.len() >= 20, || format!("only {} linear cases", cases.len()))?;
    for c in &cases {
        ensure(c.t <= 32 && c.c <= 16 && c.embed_dim <= 8 && c.sgs.bins <= 32, || {
            format!("{} exceeds the size limits", c.name)
        })?;
    }
    let r = run_suite(&cases, 1e-5).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let worst = r.cases.iter().map(|c| c.max_error).fold(0.0, f64::max);
    ensure(r.passed, || format!("failing cases: {:?}", r.failures()))?;
    ensure(elapsed <= 60.0, || format!("took {elapsed:.1}s"))?;

    // a sign-flipped coordinate gradient must be caught
    let mutated = run_case_with(&cases[0], 1e-5, &|g, cache, seq, params| {
        let s = sample_backward_multidim(g, &cache.assignment, seq)?;
        sgs_core::backprop_coords(s.frames, &s.coords.map(|v| -v), cache, seq, params)
    })
    .map_err(|e| e.to_string())?;
    ensure(!mutated.passed, || "negated coordinate gradient went unnoticed".into())?;

    let kron = default_suite(42)
        .into_iter()
        .filter(|c| c.sgs.kernel == KernelKind::Kronecker)
        .map(|c| run_case(&c, 1e-5))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    ensure(kron.iter().all(|c| c.passed && c.coords_error == 0.0), || {
        "kronecker coordinate gradient is not exactly zero".into()
    })?;

    Ok(format!(
        "{} cases, max rel error {worst:.2e}, {elapsed:.1}s; mutation caught (error {:.2e})",
        cases.len(),
        mutated.max_error
    ))
}

/// `(gamma, centers)` from the geometry formulas.
fn oracle_geometry(max: f64, bins: usize, mode: BinMode) -> (f64, Vec<f64>) {
    let gamma = match mode {
        BinMode::Strict => max / (2 * bins) as f64,
        BinMode::Centered => max / (2 * bins - 1) as f64,
    };
    (gamma, (1..=bins).map(|b| (2 * b - 1) as f64 * gamma).collect())
}

fn psi(kind: KernelKind, x: f64, beta: f64, gamma: f64) -> f64 {
    let r = (x - beta).abs() / gamma;
    match kind {
        KernelKind::Linear => (1.0 - r).max(0.0),
        KernelKind::Kronecker => (r.floor() == 0.0) as u8 as f64,
    }
}

/// Dense per-bin outputs by looping over every (bin, frame) pair.
fn oracle_dense(
    seq: &FeatureSequence,
    n_bins: usize,
    kind: KernelKind,
    weight: impl Fn(usize, usize) -> f64,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = seq.frame_len();
    let mut out = vec![vec![0.0; n]; n_bins];
    let mut mass = vec![0.0; n_bins];
    for b in 0..n_bins {
        for t in 0..seq.t() {
            let w = weight(t, b);
            mass[b] += w;
            for (o, &x) in out[b].iter_mut().zip(seq.frame(t)) {
                *o += x * w;
            }
        }
        if kind == KernelKind::Kronecker && mass[b] > 0.0 {
            out[b].iter_mut().for_each(|o| *o /= mass[b]);
        }
    }
    if mass.iter().all(|&m| m == 0.0) {
        let t = seq.t() as f64;
        out[0] = (0..n).map(|i| (0..seq.t()).map(|f| seq.frame(f)[i] / t).sum()).collect();
        mass[0] = 1.0;
    }
    (out, mass)
}

fn compare(outputs: &Tensor, bins: &[usize], dense: &[Vec<f64>], mass: &[f64]) -> Result<f64, String> {
    let expected: Vec<usize> = (0..mass.len()).filter(|&b| mass[b] > 0.0).collect();
    ensure(bins == expected.as_slice(), || format!("surviving bins {bins:?} != {expected:?}"))?;
    let mut worst = 0.0f64;
    for (slot, &b) in bins.iter().enumerate() {
        for (a, e) in outputs.row(slot).iter().zip(&dense[b]) {
            worst = worst.max((a - e).abs());
        }
    }
    Ok(worst)
}

fn coords_with_repeats(rng: &mut SeededRng, n: usize, hi: f64) -> Vec<f64> {
    let pool: Vec<f64> = (0..1 + rng.below(4)).map(|_| rng.uniform(0.0, hi)).collect();
    (0..n)
        .map(|_| if rng.below(10) < 3 { pool[rng.below(pool.len())] } else { rng.uniform(0.0, hi) })
        .collect()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = SeededRng::new(2718);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for kind in [KernelKind::Linear, KernelKind::Kronecker] {
        for mode in [BinMode::Strict, BinMode::Centered] {
            for _ in 0..100 {
                let t = 1 + rng.below(32);
                let c = 1 + rng.below(3);
                let seq = FeatureSequence::new(rng.normal_tensor(vec![t, c, 2, 1], 1.0)).unwrap();

                let bins = 1 + rng.below(32);
                let delta = coords_with_repeats(&mut rng, t, 5.0);
                let (gamma, centers) = oracle_geometry(delta.iter().copied().fold(0.0, f64::max), bins, mode);
                let (dense, mass) = oracle_dense(&seq, bins, kind, |f, b| psi(kind, delta[f], centers[b], gamma));
                let track = MagnitudeTrack::new(delta.clone());
                let g = make_geometry(&track, bins, mode, 1e-12).unwrap();
                let (out, _) = sample_forward(&seq, &track, &g, kind, SampleOptions::default()).unwrap();
                worst = worst.max(compare(&out.outputs, &out.surviving_bins, &dense, &mass)?);

                let k_len = 1 + rng.below(3);
                let grid: Vec<usize> = (0..k_len).map(|_| 1 + rng.below(5)).collect();
                let cols: Vec<Vec<f64>> = (0..k_len).map(|_| coords_with_repeats(&mut rng, t, 3.0)).collect();
                let axes: Vec<(f64, Vec<f64>)> = (0..k_len)
                    .map(|k| oracle_geometry(cols[k].iter().copied().fold(0.0, f64::max), grid[k], mode))
                    .collect();
                let n_bins: usize = grid.iter().product();
                let (dense, mass) = oracle_dense(&seq, n_bins, kind, |f, b| {
                    let mut rest = b;
                    let mut w = 1.0;
                    for k in (0..k_len).rev() {
                        let (gamma, centers) = &axes[k];
                        w *= psi(kind, cols[k][f], centers[rest % grid[k]], *gamma);
                        rest /= grid[k];
                    }
                    w
                });
                let coords = Tensor::from_fn(vec![t, k_len], |i| cols[i % k_len][i / k_len]);
                let md = sgs_core::make_multidim_geometry(&coords, &vec![CoordKind::Radial; k_len], &grid, mode, 1e-12)
                    .unwrap();
                let (out, _) = sample_forward_multidim(&seq, &coords, &md, kind, SampleOptions::default()).unwrap();
                worst = worst.max(compare(&out.outputs, &out.surviving_bins, &dense, &mass)?);
                instances += 2;
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max abs diff {worst:e}"))?;
    Ok(format!("{instances} instances (100 per kernel x mode, scalar and grid), max abs diff {worst:.1e}"))
}

fn hand_examples() -> Outcome {
    let seq = FeatureSequence::from_vec(3, 1, 1, 1, vec![10.0, 20.0, 30.0]).unwrap();
    let track = MagnitudeTrack::new(vec![1.0, 1.0, 3.0]);
    let cases: [(BinMode, KernelKind, Vec<f64>); 3] = [
        (BinMode::Centered, KernelKind::Linear, vec![30.0, 30.0]),
        (BinMode::Strict, KernelKind::Linear, vec![20.0]),
        (BinMode::Centered, KernelKind::Kronecker, vec![15.0, 30.0]),
    ];
    for (mode, kind, want) in cases {
        let g = make_geometry(&track, 2, mode, 1e-12).unwrap();
        let (out, _) = sample_forward(&seq, &track, &g, kind, SampleOptions::default()).unwrap();
        ensure(out.b_prime() == want.len(), || format!("{mode}/{kind}: B' {}", out.b_prime()))?;
        let err = out.outputs.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err <= 1e-12, || format!("{mode}/{kind}: {:?} != {want:?}", out.outputs.data()))?;
    }
    let g = make_geometry(&MagnitudeTrack::new(vec![1.0_f64, 2.0, 3.0, 4.0]), 4, BinMode::Strict, 1e-12).unwrap();
    ensure((g.gamma - 0.5).abs() <= 1e-12, || format!("gamma {}", g.gamma))?;
    let want = [0.5_f64, 1.5, 2.5, 3.5];
    ensure(g.centers.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-12), || {
        format!("centers {:?}", g.centers)
    })?;
    Ok("[30,30] B'=2, [20] B'=1, [15,30], gamma 0.5 with centers [0.5,1.5,2.5,3.5]".into())
}

fn corpus(regime: CorpusRegime, sigma: f64) -> DemoConfig {
    DemoConfig {
        regime,
        clips: 100,
        t: 16,
        sigma,
        sgs: SgsConfig::with_bins(16),
        ..DemoConfig::default()
    }
}

fn adaptivity() -> Outcome {
    let red = run_demo(&corpus(CorpusRegime::Redundant, 0.01)).map_err(|e| e.to_string())?;
    let div = run_demo(&corpus(CorpusRegime::Diverse, 0.01)).map_err(|e| e.to_string())?;
    let flat = run_demo(&corpus(CorpusRegime::Redundant, 0.0)).map_err(|e| e.to_string())?;
    let (mr, md) = (red.histogram.mean_b_prime, div.histogram.mean_b_prime);
    ensure(md - mr >= 2.0, || format!("gap {:.3} (redundant {mr:.3}, diverse {md:.3})", md - mr))?;
    ensure(flat.clips.iter().all(|c| c.b_prime == 1), || "sigma=0 clip with B' > 1".into())?;
    Ok(format!(
        "mean B' redundant {mr:.2}, diverse {md:.2}, gap {:.2}; sigma=0: all 100 clips at B'=1",
        md - mr
    ))
}

fn flop_linearity() -> Outcome {
    let conv = LayerSpec::Conv3d {
        c_in: 8,
        c_out: 16,
        kernel: [1, 3, 3],
        stride: [1, 1, 1],
        padding: Padding::Same,
    };
    let worked = layer_flops(&conv, 4, 14, 14).map_err(|e| e.to_string())?;
    ensure(worked == 1_806_336, || format!("worked example gives {worked}"))?;

    // temporal stride 1 and same padding keep T; a pool would not
    let stack = LayerStack::parse(
        "input 14 14\nconv3d 8 16 1 3 3 1 1 1 pad=same\nconv3d 16 16 3 3 3 1 2 2 pad=same\n",
    )
    .map_err(|e| e.to_string())?;
    let demo = run_demo(&corpus(CorpusRegime::Mixed, 0.01)).map_err(|e| e.to_string())?;
    let clips: Vec<(String, u64)> = demo.clips.iter().map(|c| (c.clip.to_string(), c.b_prime as u64)).collect();
    let r = report(&clips, &stack, 16).map_err(|e| e.to_string())?;
    let mean = clips.iter().map(|c| c.1 as f64).sum::<f64>() / clips.len() as f64;
    let want = 1.0 - mean / 16.0;
    let err = (r.reduction_fraction - want).abs();
    ensure(err <= 1e-12, || format!("reduction {} vs {want}", r.reduction_fraction))?;
    Ok(format!(
        "worked conv = 1806336; reduction {:.6} vs 1 - E[B']/T {:.6} (diff {err:.1e})",
        r.reduction_fraction, want
    ))
}

fn trainability() -> Outcome {
    let cfg = ToyModelConfig {
        epochs: 500,
        seed: Some(42),
        ..ToyModelConfig::default()
    };
    let (a, ma) = train_toy(&cfg, 42).map_err(|e| e.to_string())?;
    let (b, mb) = train_toy(&cfg, 42).map_err(|e| e.to_string())?;
    ensure(a.accuracy >= 0.9, || format!("accuracy {}", a.accuracy))?;
    let first = a.accuracy_curve.iter().position(|&x| x >= 0.9).unwrap_or(usize::MAX);
    ensure(a == b && ma == mb, || "repeat run differs".into())?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(bits(&a.loss_curve) == bits(&b.loss_curve), || "loss curves differ".into())?;

    let mut kron = cfg.clone();
    kron.sgs.kernel = KernelKind::Kronecker;
    kron.epochs = 50;
    let (_, trained) = train_toy(&kron, 42).map_err(|e| e.to_string())?;
    let (_, init) = train_toy(&ToyModelConfig { epochs: 0, ..kron }, 42).map_err(|e| e.to_string())?;
    let fs_bits = |p: &SimilarityParams| bits(p.flatten().data());
    ensure(fs_bits(&trained.similarity) == fs_bits(&init.similarity), || {
        "kronecker training moved the similarity network".into()
    })?;
    ensure(trained.head != init.head, || "kronecker head did not train".into())?;
    Ok(format!(
        "accuracy {:.3} (>= 0.9 from epoch {first}), mean B' per class {:?}; repeat run bit-identical; kronecker leaves f_s bit-identical",
        a.accuracy, a.mean_b_prime
    ))
}

fn structural_invariants() -> Outcome {
    let cases = 256;
    let mut runner = TestRunner::new_with_rng(
        Config { cases, failure_persistence: None, ..Config::default() },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let kinds = prop_oneof![Just(KernelKind::Linear), Just(KernelKind::Kronecker)];
    let modes = prop_oneof![Just(BinMode::Strict), Just(BinMode::Centered)];
    let strategy = (any::<u64>(), 1usize..=32, 1usize..=32, kinds, modes);
    runner
        .run(&strategy, |(seed, t, bins, kind, mode)| {
            let mut rng = SeededRng::new(seed);
            let seq = FeatureSequence::new(rng.normal_tensor(vec![t, 3, 2, 2], 1.0)).unwrap();
            let params = SimilarityParams::init(3, 4, &mut rng);
            let cfg = SgsConfig { bins, kernel: kind, mode, ..SgsConfig::default() };
            let (out, cache) = sgs_apply(&seq, &params, &cfg).unwrap();
            let a = &cache.assignment;

            prop_assert!(out.b_prime() >= 1 && out.b_prime() <= bins.min(t));
            let mut seen = vec![false; t];
            for e in &a.entries {
                prop_assert!(!seen[e.frame], "frame {} in two bins", e.frame);
                seen[e.frame] = true;
                if kind == KernelKind::Kronecker {
                    prop_assert!((e.weight * a.counts[e.slot] as f64 - 1.0).abs() <= 1e-15);
                }
            }

            let mut order: Vec<usize> = (0..t).collect();
            rng.shuffle(&mut order);
            let delta = cache.delta().unwrap();
            let g = match &cache.geometry {
                sgs_core::Geometry::Scalar(g) => g.clone(),
                _ => unreachable!(),
            };
            let track_p = MagnitudeTrack::new(order.iter().map(|&i| delta[i]).collect());
            let (p, pa) = sample_forward(&seq.permuted(&order), &track_p, &g, kind, SampleOptions::default()).unwrap();
            prop_assert_eq!(&p.surviving_bins, &out.surviving_bins);
            prop_assert!(p.outputs.max_abs_diff(&out.outputs) <= 1e-12);
            let mut moved: Vec<(usize, usize)> = pa.entries.iter().map(|e| (order[e.frame], e.bin)).collect();
            moved.sort_unstable();
            let orig: Vec<(usize, usize)> = a.entries.iter().map(|e| (e.frame, e.bin)).collect();
            prop_assert_eq!(moved, orig);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    // the sampler alone, on magnitudes with exact ties and a second geometry
    let mut rng = SeededRng::new(31);
    for _ in 0..cases {
        let t = 1 + rng.below(32);
        let bins = 1 + rng.below(32);
        let seq = FeatureSequence::new(rng.normal_tensor(vec![t, 1, 1, 1], 1.0)).unwrap();
        let delta = coords_with_repeats(&mut rng, t, 2.0);
        let g = BinGeometry::from_max(2.5, bins, BinMode::Strict, 1e-12).unwrap();
        let md = MultiDimGeometry { axes: vec![g.clone()], kinds: vec![CoordKind::Radial] };
        let track = MagnitudeTrack::new(delta.clone());
        let (out, a) = sample_forward(&seq, &track, &g, KernelKind::Linear, SampleOptions::default()).unwrap();
        let coords = Tensor::new(vec![t, 1], delta).unwrap();
        let (out2, _) = sample_forward_multidim(&seq, &coords, &md, KernelKind::Linear, SampleOptions::default()).unwrap();
        ensure(out == out2, || "one-axis grid differs from scalar path".into())?;
        ensure(out.b_prime() <= bins.min(t), || format!("B' {} > min({bins}, {t})", out.b_prime()))?;
        let mut frames: Vec<usize> = a.entries.iter().map(|e| e.frame).collect();
        frames.dedup();
        ensure(frames.len() == a.entries.len(), || "frame assigned twice".into())?;
    }
    Ok(format!("{cases} randomized operator cases + {cases} sampler cases"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("exact hand examples", hand_examples),
        ("adaptivity", adaptivity),
        ("FLOP linearity", flop_linearity),
        ("end-to-end trainability", trainability),
        ("structural invariants", structural_invariants),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()))));
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
