//! Analytic FLOP accounting for a downstream layer stack as a function of the
//! temporal length it receives.
//!
//! Convention: one multiply-accumulate counts as 2 FLOPs; pooling,
//! activations and biases are free.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgsError};

pub const CONVENTION: &str = "1 MAC = 2 FLOPs; pooling, activation and bias cost 0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output size `ceil(in / stride)`.
    Same,
    /// Output size `floor((in - k) / stride) + 1`.
    Valid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv3d {
        c_in: u64,
        c_out: u64,
        /// `k_t, k_h, k_w`
        kernel: [u64; 3],
        /// `s_t, s_h, s_w`
        stride: [u64; 3],
        padding: Padding,
    },
    /// Global average pool over time and space; keeps channels.
    Pool,
    Fc { c_in: u64, c_out: u64 },
}

/// Activation extent flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub channels: Option<u64>,
    pub t: u64,
    pub h: u64,
    pub w: u64,
}

fn out_len(input: u64, k: u64, s: u64, padding: Padding) -> Option<u64> {
    match padding {
        Padding::Same => Some(input.div_ceil(s)),
        Padding::Valid if k <= input => Some((input - k) / s + 1),
        Padding::Valid => None,
    }
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv3d {
                c_in,
                c_out,
                kernel,
                stride,
                ..
            } => {
                if *c_in == 0 || *c_out == 0 || kernel.contains(&0) {
                    return Err(SgsError::Config("conv3d dimensions must be positive".into()));
                }
                if stride.contains(&0) {
                    return Err(SgsError::Config("conv3d stride must be at least 1".into()));
                }
                Ok(())
            }
            LayerSpec::Fc { c_in, c_out } if *c_in == 0 || *c_out == 0 => {
                Err(SgsError::Config("fc dimensions must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Cost of this layer on `input`, and the extent it produces.
    pub fn apply(&self, input: Extent) -> Result<(u64, Extent)> {
        self.validate()?;
        match *self {
            LayerSpec::Conv3d {
                c_in,
                c_out,
                kernel,
                stride,
                padding,
            } => {
                if let Some(c) = input.channels {
                    if c != c_in {
                        return Err(SgsError::Config(format!(
                            "conv3d expects {c_in} input channels, stack provides {c}"
                        )));
                    }
                }
                let dims = [input.t, input.h, input.w];
                let mut out = [0u64; 3];
                for i in 0..3 {
                    out[i] = out_len(dims[i], kernel[i], stride[i], padding).ok_or_else(|| {
                        SgsError::Config(format!(
                            "kernel {kernel:?} larger than input {dims:?} with valid padding"
                        ))
                    })?;
                }
                let flops = [2, c_in, c_out, kernel[0], kernel[1], kernel[2], out[0], out[1], out[2]]
                    .iter()
                    .try_fold(1u64, |acc, &v| acc.checked_mul(v))
                    .ok_or_else(|| SgsError::Config("FLOP count overflows u64".into()))?;
                Ok((
                    flops,
                    Extent {
                        channels: Some(c_out),
                        t: out[0],
                        h: out[1],
                        w: out[2],
                    },
                ))
            }
            LayerSpec::Pool => Ok((
                0,
                Extent {
                    channels: input.channels,
                    t: 1,
                    h: 1,
                    w: 1,
                },
            )),
            LayerSpec::Fc { c_in, c_out } => {
                if let Some(c) = input.channels {
                    let flat = c * input.t * input.h * input.w;
                    if flat != c_in {
                        return Err(SgsError::Config(format!(
                            "fc expects {c_in} inputs, stack provides {flat}"
                        )));
                    }
                }
                Ok((
                    2 * c_in * c_out,
                    Extent {
                        channels: Some(c_out),
                        t: 1,
                        h: 1,
                        w: 1,
                    },
                ))
            }
        }
    }
}

/// FLOPs of `layer` on an input of `t_len x h x w`.
pub fn layer_flops(layer: &LayerSpec, t_len: u64, h: u64, w: u64) -> Result<u64> {
    if t_len == 0 {
        return Err(SgsError::Config("temporal length must be at least 1".into()));
    }
    Ok(layer
        .apply(Extent {
            channels: None,
            t: t_len,
            h,
            w,
        })?
        .0)
}

/// A layer stack and the spatial size of its input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStack {
    pub input_hw: (u64, u64),
    pub layers: Vec<LayerSpec>,
}

impl LayerStack {
    /// Parses the line-oriented stack format:
    ///
    /// ```text
    /// input 14 14
    /// conv3d 8 16 1 3 3 1 1 1 pad=same
    /// pool
    /// fc 16 10
    /// ```
    ///
    /// `#` starts a comment. `input H W` must precede the first layer when
    /// the stack contains a convolution; it defaults to `1 1` otherwise.
    pub fn parse(text: &str) -> Result<Self> {
        let mut input_hw = None;
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| SgsError::Config(format!("stack line {}: {msg}: '{line}'", lineno + 1));
            let toks: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<u64>().map_err(|_| err("expected a non-negative integer"));
            match toks[0] {
                "input" => {
                    if toks.len() != 3 {
                        return Err(err("expected 'input H W'"));
                    }
                    if !layers.is_empty() {
                        return Err(err("'input' must precede all layers"));
                    }
                    input_hw = Some((num(toks[1])?, num(toks[2])?));
                }
                "conv3d" => {
                    if toks.len() != 10 {
                        return Err(err("expected 'conv3d c_in c_out kt kh kw st sh sw pad=same|valid'"));
                    }
                    let v = toks[1..9].iter().map(|t| num(t)).collect::<Result<Vec<_>>>()?;
                    let padding = match toks[9] {
                        "pad=same" => Padding::Same,
                        "pad=valid" => Padding::Valid,
                        _ => return Err(err("padding must be pad=same or pad=valid")),
                    };
                    if input_hw.is_none() {
                        return Err(err("'input H W' is required before conv3d"));
                    }
                    layers.push(LayerSpec::Conv3d {
                        c_in: v[0],
                        c_out: v[1],
                        kernel: [v[2], v[3], v[4]],
                        stride: [v[5], v[6], v[7]],
                        padding,
                    });
                }
                "fc" => {
                    if toks.len() != 3 {
                        return Err(err("expected 'fc c_in c_out'"));
                    }
                    layers.push(LayerSpec::Fc {
                        c_in: num(toks[1])?,
                        c_out: num(toks[2])?,
                    });
                }
                "pool" => {
                    if toks.len() != 1 {
                        return Err(err("'pool' takes no arguments"));
                    }
                    layers.push(LayerSpec::Pool);
                }
                _ => return Err(err("unknown layer kind")),
            }
            if let Some(l) = layers.last() {
                l.validate().map_err(|e| err(&e.to_string()))?;
            }
        }
        let input_hw = input_hw.unwrap_or((1, 1));
        if input_hw.0 == 0 || input_hw.1 == 0 {
            return Err(SgsError::Config("input spatial size must be positive".into()));
        }
        Ok(Self { input_hw, layers })
    }
}

/// Total FLOPs of `stack` when fed `t_len` temporal steps.
pub fn stack_flops(stack: &LayerStack, t_len: u64) -> Result<u64> {
    if t_len == 0 {
        return Err(SgsError::Config("temporal length must be at least 1".into()));
    }
    let mut extent = Extent {
        channels: None,
        t: t_len,
        h: stack.input_hw.0,
        w: stack.input_hw.1,
    };
    let mut total = 0u64;
    for layer in &stack.layers {
        let (f, next) = layer.apply(extent)?;
        total = total
            .checked_add(f)
            .ok_or_else(|| SgsError::Config("FLOP count overflows u64".into()))?;
        extent = next;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFlops {
    pub clip: String,
    pub b_prime: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub convention: String,
    pub t_full: u64,
    pub per_clip: Vec<ClipFlops>,
    pub average_flops: f64,
    pub average_gflops: f64,
    pub baseline_flops: f64,
    pub reduction_fraction: f64,
}

/// Per-clip costs at their adaptive length `B'`, their average, and the
/// reduction against the same stack at `t_full`.
pub fn report(results: &[(String, u64)], stack: &LayerStack, t_full: u64) -> Result<FlopReport> {
    if let Some((clip, b)) = results.iter().find(|(_, b)| *b > t_full || *b == 0) {
        return Err(SgsError::Config(format!(
            "clip {clip}: B' = {b} outside 1..={t_full}"
        )));
    }
    let baseline = stack_flops(stack, t_full)?;
    let per_clip = results
        .iter()
        .map(|(clip, b)| {
            Ok(ClipFlops {
                clip: clip.clone(),
                b_prime: *b,
                flops: stack_flops(stack, *b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let average = if per_clip.is_empty() {
        0.0
    } else {
        let total: u128 = per_clip.iter().map(|c| c.flops as u128).sum();
        total as f64 / per_clip.len() as f64
    };
    let baseline_f = baseline as f64;
    let reduction = if baseline == 0 { 0.0 } else { 1.0 - average / baseline_f };
    Ok(FlopReport {
        convention: CONVENTION.to_string(),
        t_full,
        per_clip,
        average_flops: average,
        average_gflops: average / 1e9,
        baseline_flops: baseline_f,
        reduction_fraction: reduction,
    })
}
