//! Network construction and execution: deterministic initialization from a
//! seed, graph binding for training, dense forward passes over windows and
//! whole utterances, and the checkpoint file format.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::convgeom::{
    geometry, intrinsic_length, utterance_padding, validate, LayerSpec, ModelSpec,
};
use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_INIT};
use crate::tensor::{Graph, NodeId, Tensor};

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// A fully convolutional classifier: the architecture description plus its
/// parameter values.
#[derive(Debug, Clone)]
pub struct Network {
    spec: ModelSpec,
    params: Vec<Param>,
    l_m: usize,
}

/// Log posteriors for a run of consecutive frames: row r is the distribution
/// for frame `start_frame + r` of the input it was computed from.
#[derive(Debug, Clone)]
pub struct PosteriorSequence {
    pub log_probs: Tensor,
    pub start_frame: usize,
}

impl PosteriorSequence {
    pub fn rows(&self) -> usize {
        self.log_probs.shape()[0]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let s = self.log_probs.shape()[1];
        &self.log_probs.data()[r * s..(r + 1) * s]
    }
}

/// Parameter leaves registered in a graph, in `Network::params` order.
pub struct GraphBinding {
    pub param_ids: Vec<NodeId>,
}

impl Network {
    /// Builds a validated network with uniform(-a, a) weights and zero
    /// biases, deterministic per seed. Hidden layers use a = sqrt(6 /
    /// fan_in) (Var(w) = 2 / fan_in keeps activation scale steady through
    /// deep rectified stacks); the terminal layer uses the smaller a =
    /// sqrt(1/4 / fan_in) so untrained posteriors start near uniform.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Network> {
        let layers = validate(spec)?;
        let last = spec.layers.len() - 1;
        let mut rng = stream_rng(seed, STREAM_INIT, 0);
        let mut params = Vec::new();
        let mut init = |shape: Vec<usize>, fan_in: usize, terminal: bool| {
            let gain = if terminal { 0.25 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            Tensor::new(shape, data).expect("init shape")
        };
        for (i, (layer, geo)) in spec.layers.iter().zip(&layers).enumerate() {
            match layer {
                LayerSpec::Conv {
                    kernel_t,
                    kernel_f,
                    out_channels,
                    ..
                } => {
                    let fan_in = geo.in_channels * kernel_t * kernel_f;
                    params.push(Param {
                        name: format!("layer{i}.kernel"),
                        value: init(
                            vec![*out_channels, geo.in_channels, *kernel_t, *kernel_f],
                            fan_in,
                            i == last,
                        ),
                    });
                    params.push(Param {
                        name: format!("layer{i}.bias"),
                        value: Tensor::zeros(vec![*out_channels]),
                    });
                }
                LayerSpec::Pointwise {
                    out_channels,
                    collapse_freq,
                } => {
                    let cols = if *collapse_freq {
                        geo.in_channels * geo.freq_in
                    } else {
                        geo.in_channels
                    };
                    params.push(Param {
                        name: format!("layer{i}.weight"),
                        value: init(vec![*out_channels, cols], cols, i == last),
                    });
                    params.push(Param {
                        name: format!("layer{i}.bias"),
                        value: Tensor::zeros(vec![*out_channels]),
                    });
                }
                LayerSpec::Relu | LayerSpec::FreqPool { .. } => {}
            }
        }
        Ok(Network {
            spec: spec.clone(),
            params,
            l_m: intrinsic_length(spec),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn intrinsic_length(&self) -> usize {
        self.l_m
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> GraphBinding {
        GraphBinding {
            param_ids: self
                .params
                .iter()
                .map(|p| g.leaf(p.value.clone().with_requires_grad()))
                .collect(),
        }
    }

    fn bind_frozen(&self, g: &mut Graph) -> GraphBinding {
        GraphBinding {
            param_ids: self
                .params
                .iter()
                .map(|p| g.constant(p.value.clone()))
                .collect(),
        }
    }

    /// Runs the network on a bound [3, T, D] window node and returns the
    /// [T - l_m + 1, num_targets] log-posterior node.
    pub fn forward_bound(
        &self,
        g: &mut Graph,
        binding: &GraphBinding,
        window: NodeId,
    ) -> Result<NodeId> {
        let mut next_param = binding.param_ids.iter().copied();
        let mut take = |what: &str| {
            next_param
                .next()
                .ok_or_else(|| Error::Spec(format!("binding is missing a {what} parameter")))
        };
        let mut x = window;
        for layer in &self.spec.layers {
            x = match layer {
                LayerSpec::Conv {
                    dilation_t,
                    stride_f,
                    pad_f,
                    ..
                } => {
                    let kernel = take("kernel")?;
                    let bias = take("bias")?;
                    let y = g.conv2d(x, kernel, *dilation_t, *stride_f, *pad_f)?;
                    g.bias_add(y, bias)?
                }
                LayerSpec::Pointwise { collapse_freq, .. } => {
                    let weight = take("weight")?;
                    let bias = take("bias")?;
                    let y = g.pointwise(x, weight, *collapse_freq)?;
                    g.bias_add(y, bias)?
                }
                LayerSpec::Relu => g.relu(x),
                LayerSpec::FreqPool { window } => g.freq_max_pool(x, *window)?,
            };
        }
        let rows = g.time_major(x)?;
        g.log_softmax(rows, 1)
    }

    /// Dense forward pass over a window of at least l_m frames. Row r of the
    /// result is the posterior for window frame `start_frame + r`.
    pub fn forward(&self, window: &Tensor) -> Result<PosteriorSequence> {
        let mut g = Graph::new();
        let binding = self.bind_frozen(&mut g);
        let input = g.constant(window.clone());
        let out = self.forward_bound(&mut g, &binding, input)?;
        Ok(PosteriorSequence {
            log_probs: Tensor::new(g.shape(out).to_vec(), g.data(out).to_vec())?,
            start_frame: (self.l_m - 1) / 2,
        })
    }

    /// Forward pass over a whole utterance, zero-padded so that every frame
    /// receives a posterior: the result has exactly one row per input frame.
    pub fn forward_utterance(&self, features: &FeatureSequence) -> Result<PosteriorSequence> {
        let t = features.len();
        if t == 0 {
            return Err(Error::Shape("cannot run an empty utterance".into()));
        }
        let shape = features.frames.shape();
        let (c, d) = (shape[0], shape[2]);
        let (left, right) = utterance_padding(&self.spec, t);
        let padded_t = left + t + right;
        let mut data = vec![0.0; c * padded_t * d];
        let src = features.frames.data();
        for ch in 0..c {
            let dst = ((ch * padded_t) + left) * d;
            let from = ch * t * d;
            data[dst..dst + t * d].copy_from_slice(&src[from..from + t * d]);
        }
        let padded = Tensor::new(vec![c, padded_t, d], data)?;
        let out = self.forward(&padded)?;
        if out.rows() != t {
            return Err(Error::Shape(format!(
                "padded utterance produced {} rows for {t} frames",
                out.rows()
            )));
        }
        Ok(PosteriorSequence {
            log_probs: out.log_probs,
            start_frame: 0,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    params: Vec<CheckpointParam>,
}

/// Writes a checkpoint: little-endian u64 header length, a JSON header with
/// the architecture and parameter manifest, then the raw little-endian f64
/// parameter blobs. Loading restores the values bitwise.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut manifest = Vec::with_capacity(net.params.len());
    let mut offset = 0u64;
    for p in &net.params {
        manifest.push(CheckpointParam {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += (p.value.numel() * 8) as u64;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        spec: net.spec.clone(),
        params: manifest,
    })?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for p in &net.params {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.len() < 8 {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(raw[..8].try_into().unwrap()) as usize;
    if raw.len() < 8 + header_len {
        return Err(Error::Checkpoint(format!(
            "{} is truncated",
            path.display()
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&raw[8..8 + header_len])?;
    let payload = &raw[8 + header_len..];

    // A freshly built network defines the names and shapes the file must
    // match, so a checkpoint can never smuggle in an inconsistent manifest.
    let reference = Network::build(&header.spec, 0)?;
    if header.params.len() != reference.params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, file lists {}",
            reference.params.len(),
            header.params.len()
        )));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for (entry, expected) in header.params.iter().zip(&reference.params) {
        if entry.name != expected.name || entry.shape != expected.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} does not match the architecture",
                entry.name
            )));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        if payload.len() < start + count * 8 {
            return Err(Error::Checkpoint(format!(
                "{} is truncated",
                path.display()
            )));
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let bytes: [u8; 8] = payload[start + i * 8..start + (i + 1) * 8]
                .try_into()
                .unwrap();
            let v = f64::from_le_bytes(bytes);
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "non-finite value in {}",
                    entry.name
                )));
            }
            data.push(v);
        }
        params.push(Param {
            name: entry.name.clone(),
            value: Tensor::new(entry.shape.clone(), data)?,
        });
    }
    let l_m = intrinsic_length(&header.spec);
    let _ = geometry(&header.spec)?;
    Ok(Network {
        spec: header.spec,
        params,
        l_m,
    })
}
