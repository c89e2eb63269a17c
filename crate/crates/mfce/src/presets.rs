//! Canonical architecture fixtures used by tests, docs and the config file.

use crate::convgeom::{LayerSpec, ModelSpec};

fn conv(kernel: usize, dilation_t: usize, out_channels: usize) -> LayerSpec {
    LayerSpec::Conv {
        kernel_t: kernel,
        kernel_f: kernel,
        dilation_t,
        out_channels,
        stride_f: 1,
        pad_f: kernel / 2,
    }
}

/// Small three-conv stack with a receptive field of 7 frames.
pub fn toy_spec(mel_bins: usize, num_targets: usize, width: usize) -> ModelSpec {
    let mut layers = Vec::new();
    for _ in 0..3 {
        layers.push(conv(3, 1, width));
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Pointwise {
        out_channels: 2 * width,
        collapse_freq: true,
    });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Pointwise {
        out_channels: num_targets,
        collapse_freq: false,
    });
    ModelSpec {
        input_channels: 3,
        mel_bins,
        num_targets,
        layers,
    }
}

/// The deep acoustic stack: an initial 5x5 convolution, then twelve 3x3
/// convolutions whose time dilations grow in groups (six at 1, three at 2,
/// three at 4), for a receptive field of 53 frames. `freq_pool` interleaves
/// frequency-halving max pools after every second convolution, VGG style;
/// widths are flat at desk scale.
pub fn acoustic_spec(
    mel_bins: usize,
    num_targets: usize,
    width: usize,
    freq_pool: bool,
) -> ModelSpec {
    const DILATIONS: [usize; 12] = [1, 1, 1, 1, 1, 1, 2, 2, 2, 4, 4, 4];
    let mut layers = vec![conv(5, 1, width), LayerSpec::Relu];
    for (j, &d) in DILATIONS.iter().enumerate() {
        layers.push(conv(3, d, width));
        layers.push(LayerSpec::Relu);
        if freq_pool && j % 2 == 0 {
            layers.push(LayerSpec::FreqPool { window: 2 });
        }
    }
    layers.push(LayerSpec::Pointwise {
        out_channels: 2 * width,
        collapse_freq: true,
    });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Pointwise {
        out_channels: num_targets,
        collapse_freq: false,
    });
    ModelSpec {
        input_channels: 3,
        mel_bins,
        num_targets,
        layers,
    }
}
