//! Arithmetic cost of dense forward passes. The analytic model counts
//! multiply-add FLOPs layer by layer (activations and pooling count as
//! zero), and the measured model times real forward passes. Both exist to
//! quantify how cheaply an extended window amortizes its extra labels.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::convgeom::{geometry, intrinsic_length, output_count, LayerSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::rng::{stream_rng, STREAM_COST};
use crate::tensor::Tensor;

/// FLOPs of one layer in a dense pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub label: String,
    pub flops: u64,
}

/// Cost of one dense forward pass over a window of l_i frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostEstimate {
    pub window_len: usize,
    pub outputs: usize,
    pub per_layer: Vec<LayerCost>,
    pub total_flops: u64,
    pub flops_per_label: f64,
}

/// Counts 2 * C_out * C_in * k_t * k_f FLOPs per convolution output element
/// and 2 * C_out * columns per pointwise output element.
pub fn window_cost(spec: &ModelSpec, window_len: usize) -> Result<CostEstimate> {
    let outputs = output_count(spec, window_len)?;
    let layers = geometry(spec)?;
    let mut t = window_len as u64;
    let mut per_layer = Vec::with_capacity(layers.len());
    for (layer, geo) in spec.layers.iter().zip(&layers) {
        let flops = match layer {
            LayerSpec::Conv {
                kernel_t, kernel_f, ..
            } => {
                t -= geo.time_reduction as u64;
                2 * geo.out_channels as u64
                    * geo.in_channels as u64
                    * *kernel_t as u64
                    * *kernel_f as u64
                    * t
                    * geo.freq_out as u64
            }
            LayerSpec::Pointwise { collapse_freq, .. } => {
                let cols = if *collapse_freq {
                    geo.in_channels * geo.freq_in
                } else {
                    geo.in_channels
                };
                2 * geo.out_channels as u64 * cols as u64 * t * geo.freq_out as u64
            }
            LayerSpec::Relu | LayerSpec::FreqPool { .. } => 0,
        };
        per_layer.push(LayerCost {
            index: geo.index,
            label: geo.label.to_string(),
            flops,
        });
    }
    let total_flops: u64 = per_layer.iter().map(|l| l.flops).sum();
    Ok(CostEstimate {
        window_len,
        outputs,
        per_layer,
        total_flops,
        flops_per_label: total_flops as f64 / outputs as f64,
    })
}

/// Median wall seconds of one dense forward pass over a random window,
/// after one untimed warm-up pass. Needs at least 3 repetitions.
pub fn measured_cost(net: &Network, window_len: usize, repetitions: usize) -> Result<f64> {
    if repetitions < 3 {
        return Err(Error::Config("need at least 3 timing repetitions".into()));
    }
    let spec = net.spec();
    let mut rng = stream_rng(0, STREAM_COST, window_len as u64);
    let shape = vec![spec.input_channels, window_len, spec.mel_bins];
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let window = Tensor::new(shape, data)?;

    net.forward(&window)?;
    let mut seconds = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let out = net.forward(&window)?;
        let elapsed = start.elapsed().as_secs_f64();
        assert!(out.rows() > 0);
        seconds.push(elapsed);
    }
    seconds.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let mid = repetitions / 2;
    Ok(if repetitions % 2 == 1 {
        seconds[mid]
    } else {
        0.5 * (seconds[mid - 1] + seconds[mid])
    })
}

/// How an extended window compares against per-frame inference: the ratio
/// of one extended dense pass to one minimal pass (analytic and measured),
/// and the label throughput gained over running 1 + delta minimal passes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub l_m: usize,
    pub delta: usize,
    pub analytic_ratio: f64,
    pub measured_ratio: f64,
    pub sharing_factor: f64,
}

pub fn cost_report(spec: &ModelSpec, delta: usize, repetitions: usize) -> Result<CostReport> {
    let l_m = intrinsic_length(spec);
    let base = window_cost(spec, l_m)?;
    let extended = window_cost(spec, l_m + delta)?;
    let analytic_ratio = extended.total_flops as f64 / base.total_flops as f64;

    let net = Network::build(spec, 0)?;
    let measured_base = measured_cost(&net, l_m, repetitions)?;
    let measured_extended = measured_cost(&net, l_m + delta, repetitions)?;

    Ok(CostReport {
        l_m,
        delta,
        analytic_ratio,
        measured_ratio: measured_extended / measured_base,
        sharing_factor: (1 + delta) as f64 / analytic_ratio,
    })
}
