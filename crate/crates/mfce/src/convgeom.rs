//! Pure arithmetic over architecture specs: receptive field in time,
//! per-layer reductions, output counts, and utterance padding. No tensor
//! math lives here, so every fact is cheap to cross-check against a real
//! forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a fully convolutional classifier. Convolutions always use
/// time stride 1 and time padding 0; only the time dilation varies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel_t: usize,
        kernel_f: usize,
        #[serde(default = "one")]
        dilation_t: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride_f: usize,
        #[serde(default)]
        pad_f: usize,
    },
    /// Fully connected layer applied per time step; collapses the frequency
    /// axis when `collapse_freq` is set.
    Pointwise {
        out_channels: usize,
        #[serde(default)]
        collapse_freq: bool,
    },
    Relu,
    /// Max pool over frequency, ceil mode; never pools in time.
    FreqPool {
        window: usize,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    /// Frames of time extent this layer consumes: (k_t - 1) * dilation.
    pub fn time_reduction(&self) -> usize {
        match self {
            LayerSpec::Conv {
                kernel_t,
                dilation_t,
                ..
            } => (kernel_t - 1) * dilation_t,
            _ => 0,
        }
    }
}

/// Declarative network description from which all geometry derives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub mel_bins: usize,
    pub num_targets: usize,
    pub layers: Vec<LayerSpec>,
}

/// Channel and extent bookkeeping for one layer, as computed by [`geometry`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGeometry {
    pub index: usize,
    pub label: &'static str,
    pub in_channels: usize,
    pub out_channels: usize,
    pub freq_in: usize,
    pub freq_out: usize,
    pub time_reduction: usize,
    pub cumulative_reduction: usize,
    pub dilation_t: usize,
}

/// Walks the stack once, tracking channels and frequency extents, and
/// reports every structural inconsistency a forward pass would hit.
pub fn geometry(spec: &ModelSpec) -> Result<Vec<LayerGeometry>> {
    if spec.input_channels == 0 || spec.mel_bins == 0 || spec.num_targets == 0 {
        return Err(Error::Spec(
            "channels, mel bins and targets must be >= 1".into(),
        ));
    }
    let mut rows = Vec::with_capacity(spec.layers.len());
    let mut channels = spec.input_channels;
    let mut freq = spec.mel_bins;
    let mut cumulative = 0usize;
    for (index, layer) in spec.layers.iter().enumerate() {
        let (label, out_channels, freq_out, dilation_t) = match layer {
            LayerSpec::Conv {
                kernel_t,
                kernel_f,
                dilation_t,
                out_channels,
                stride_f,
                pad_f,
            } => {
                if *kernel_t == 0 || *kernel_f == 0 || *dilation_t == 0 || *stride_f == 0 {
                    return Err(Error::Spec(format!(
                        "layer {index}: kernel, dilation and stride must be >= 1"
                    )));
                }
                if *out_channels == 0 {
                    return Err(Error::Spec(format!("layer {index}: zero output channels")));
                }
                if freq + 2 * pad_f < *kernel_f {
                    return Err(Error::Spec(format!(
                        "layer {index}: frequency extent {freq} (+2*{pad_f} pad) \
                         smaller than kernel_f {kernel_f}"
                    )));
                }
                let f_out = (freq + 2 * pad_f - kernel_f) / stride_f + 1;
                ("conv", *out_channels, f_out, *dilation_t)
            }
            LayerSpec::Pointwise {
                out_channels,
                collapse_freq,
            } => {
                if *out_channels == 0 {
                    return Err(Error::Spec(format!("layer {index}: zero output channels")));
                }
                (
                    "pointwise",
                    *out_channels,
                    if *collapse_freq { 1 } else { freq },
                    1,
                )
            }
            LayerSpec::Relu => ("relu", channels, freq, 1),
            LayerSpec::FreqPool { window } => {
                if *window == 0 {
                    return Err(Error::Spec(format!("layer {index}: zero pool window")));
                }
                ("freq_pool", channels, freq.div_ceil(*window), 1)
            }
        };
        cumulative += layer.time_reduction();
        rows.push(LayerGeometry {
            index,
            label,
            in_channels: channels,
            out_channels,
            freq_in: freq,
            freq_out,
            time_reduction: layer.time_reduction(),
            cumulative_reduction: cumulative,
            dilation_t,
        });
        channels = out_channels;
        freq = freq_out;
    }
    Ok(rows)
}

/// Full structural validation: geometry plus the classifier-shape rules.
pub fn validate(spec: &ModelSpec) -> Result<Vec<LayerGeometry>> {
    let rows = geometry(spec)?;
    if !spec
        .layers
        .iter()
        .any(|l| matches!(l, LayerSpec::Conv { .. }))
    {
        return Err(Error::Spec("at least one conv layer is required".into()));
    }
    let last = rows
        .last()
        .ok_or_else(|| Error::Spec("empty layer list".into()))?;
    if !matches!(
        spec.layers[last.index],
        LayerSpec::Conv { .. } | LayerSpec::Pointwise { .. }
    ) {
        return Err(Error::Spec(
            "last layer must produce the target channels".into(),
        ));
    }
    if last.out_channels != spec.num_targets {
        return Err(Error::Spec(format!(
            "last layer emits {} channels, spec declares {} targets",
            last.out_channels, spec.num_targets
        )));
    }
    if last.freq_out != 1 {
        return Err(Error::Spec(format!(
            "network must collapse the frequency axis before the output \
             (final extent is {})",
            last.freq_out
        )));
    }
    Ok(rows)
}

/// Frames consumed to produce a single prediction: the receptive field in
/// time, 1 + sum over conv layers of (kernel_t - 1) * dilation_t.
pub fn intrinsic_length(spec: &ModelSpec) -> usize {
    1 + spec
        .layers
        .iter()
        .map(LayerSpec::time_reduction)
        .sum::<usize>()
}

/// Number of predictions a window of `l_i` frames yields.
pub fn output_count(spec: &ModelSpec, l_i: usize) -> Result<usize> {
    let l_m = intrinsic_length(spec);
    if l_i < l_m {
        return Err(Error::WindowTooShort {
            needed: l_m,
            got: l_i,
        });
    }
    Ok(l_i - l_m + 1)
}

/// Zero-frame padding so a full utterance of `l_u` frames yields exactly
/// `l_u` predictions; the extra frame for even `l_m - 1` goes on the right.
pub fn utterance_padding(spec: &ModelSpec, l_u: usize) -> (usize, usize) {
    debug_assert!(l_u >= 1);
    let _ = l_u;
    let l_m = intrinsic_length(spec);
    ((l_m - 1) / 2, l_m / 2)
}
