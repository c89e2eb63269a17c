//! The training loop: Nesterov momentum SGD with weight decay, global-norm
//! gradient clipping, a geometric learning-rate anneal (optionally started
//! earlier when extended windows raise the labels seen per epoch), heldout
//! evaluation over whole utterances, metrics CSV emission, and per-epoch
//! checkpoints.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{batch, epoch_windows, AlignedUtterance, Corpus};
use crate::error::{Error, Result};
use crate::loss::mfce_loss_node;
use crate::model::{save_checkpoint, Network, PosteriorSequence};
use crate::tensor::Graph;

/// Optimization hyperparameters. The defaults are the laboratory's standard
/// recipe; only `delta`, `batch_size`, and `seed` are experiment-specific.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
    #[serde(default = "default_anneal_start")]
    pub anneal_start_epoch: u32,
    #[serde(default = "default_anneal_factor")]
    pub anneal_factor: f64,
    pub delta: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub schedule_speedup: bool,
}

fn default_lr0() -> f64 {
    0.01
}

fn default_momentum() -> f64 {
    0.99
}

fn default_weight_decay() -> f64 {
    1e-6
}

fn default_clip_norm() -> f64 {
    10.0
}

fn default_epochs() -> u32 {
    16
}

fn default_anneal_start() -> u32 {
    10
}

fn default_anneal_factor() -> f64 {
    std::f64::consts::FRAC_1_SQRT_2
}

impl TrainConfig {
    pub fn with_defaults(delta: usize, batch_size: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr0: default_lr0(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            clip_norm: default_clip_norm(),
            epochs: default_epochs(),
            anneal_start_epoch: default_anneal_start(),
            anneal_factor: default_anneal_factor(),
            delta,
            batch_size,
            seed,
            schedule_speedup: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.anneal_factor.is_finite()
            && self.anneal_factor > 0.0
            && self.anneal_factor <= 1.0)
        {
            return Err(Error::Config("anneal_factor must be in (0, 1]".into()));
        }
        if self.anneal_start_epoch == 0 {
            return Err(Error::Config("anneal_start_epoch is 1-based".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// The 1-based epoch at which the geometric anneal begins. With
/// `schedule_speedup` the start moves earlier to match the label budget:
/// a plain run reaches (A0 - 1) * L / l_m labels before annealing, an
/// extended-window run gathers (1 + delta) * L / (l_m + delta) labels per
/// epoch, and the start is the first whole epoch past the same budget.
pub fn effective_anneal_start(cfg: &TrainConfig, intrinsic_len: usize) -> u32 {
    if !cfg.schedule_speedup || cfg.delta == 0 {
        return cfg.anneal_start_epoch;
    }
    let a0 = cfg.anneal_start_epoch as u64;
    let num = (a0 - 1) * (intrinsic_len + cfg.delta) as u64;
    let den = (intrinsic_len * (1 + cfg.delta)) as u64;
    1 + num.div_ceil(den) as u32
}

/// Learning rate of a 1-based epoch: lr0 until the anneal starts, then
/// lr0 * factor^(epoch - start + 1).
pub fn lr_at(cfg: &TrainConfig, intrinsic_len: usize, epoch: u32) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside the 1..={} schedule",
            cfg.epochs
        )));
    }
    let start = effective_anneal_start(cfg, intrinsic_len);
    if epoch < start {
        Ok(cfg.lr0)
    } else {
        Ok(cfg.lr0 * cfg.anneal_factor.powi((epoch - start + 1) as i32))
    }
}

/// Scales all gradients by clip/norm when their concatenated Euclidean norm
/// exceeds `clip_norm`; a plain scalar multiply, so direction is preserved
/// exactly. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Vec<f64>], clip_norm: f64) -> Result<f64> {
    let squared: f64 = grads.iter().flatten().map(|g| g * g).sum();
    let norm = squared.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
    }
    Ok(norm)
}

/// One optimizer step: weight decay folds into the gradient, the global
/// norm is clipped, then Nesterov momentum applies
/// v <- mu v - lr g, theta <- theta + mu v - lr g.
pub fn sgd_step(
    net: &mut Network,
    mut grads: Vec<Vec<f64>>,
    velocity: &mut [Vec<f64>],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != net.params().len() || velocity.len() != grads.len() {
        return Err(Error::Shape(
            "gradient and velocity lists must mirror the parameters".into(),
        ));
    }
    if cfg.weight_decay != 0.0 {
        for (g, p) in grads.iter_mut().zip(net.params()) {
            for (gi, ti) in g.iter_mut().zip(p.value.data()) {
                *gi += cfg.weight_decay * ti;
            }
        }
    }
    clip_gradients(&mut grads, cfg.clip_norm)?;
    for ((g, v), p) in grads.iter().zip(velocity.iter_mut()).zip(net.params_mut()) {
        let theta = p.value.data_mut();
        for i in 0..theta.len() {
            v[i] = cfg.momentum * v[i] - lr * g[i];
            theta[i] += cfg.momentum * v[i] - lr * g[i];
        }
    }
    Ok(())
}

/// Frame-level scores of a posterior sequence against aligned labels:
/// row r is scored against labels[start_frame + r].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub total_nll: f64,
    pub errors: usize,
    pub frames: usize,
}

pub fn frame_metrics(posteriors: &PosteriorSequence, labels: &[usize]) -> Result<FrameMetrics> {
    let rows = posteriors.rows();
    if posteriors.start_frame + rows > labels.len() {
        return Err(Error::Shape(format!(
            "{rows} rows starting at frame {} cannot be scored with {} labels",
            posteriors.start_frame,
            labels.len()
        )));
    }
    let mut total_nll = 0.0;
    let mut errors = 0usize;
    for r in 0..rows {
        let row = posteriors.row(r);
        let label = labels[posteriors.start_frame + r];
        if label >= row.len() {
            return Err(Error::LabelOutOfRange {
                label,
                num_targets: row.len(),
            });
        }
        total_nll += -row[label];
        let mut best = 0usize;
        for (s, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = s;
            }
        }
        if best != label {
            errors += 1;
        }
    }
    Ok(FrameMetrics {
        total_nll,
        errors,
        frames: rows,
    })
}

/// Heldout quality: mean per-frame negative log likelihood and frame error
/// rate over every frame of every utterance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub nll: f64,
    pub fer: f64,
    pub frames: usize,
}

pub fn evaluate(net: &Network, utterances: &[AlignedUtterance]) -> Result<EvalReport> {
    if utterances.is_empty() {
        return Err(Error::Corpus("nothing to evaluate".into()));
    }
    let mut total_nll = 0.0;
    let mut errors = 0usize;
    let mut frames = 0usize;
    for utt in utterances {
        let posteriors = net.forward_utterance(&utt.features)?;
        let m = frame_metrics(&posteriors, &utt.labels)?;
        total_nll += m.total_nll;
        errors += m.errors;
        frames += m.frames;
    }
    if !total_nll.is_finite() {
        return Err(Error::NonFinite("heldout log likelihood".into()));
    }
    Ok(EvalReport {
        nll: total_nll / frames as f64,
        fer: errors as f64 / frames as f64,
        frames,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub train_nll: f64,
    pub heldout_nll: f64,
    pub heldout_fer: f64,
    pub labels_processed: usize,
    pub wall_seconds: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,train_nll,heldout_nll,heldout_fer,labels_processed,wall_seconds,lr";

fn metrics_row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{},{},{:.3},{}",
        m.epoch,
        m.train_nll,
        m.heldout_nll,
        m.heldout_fer,
        m.labels_processed,
        m.wall_seconds,
        m.lr
    )
}

/// Trains the network in place. When `out_dir` is given, the initial state
/// is saved as ckpt_epoch0, each epoch appends a metrics.csv row and saves
/// ckpt_epoch{N}. Fully deterministic per (network, corpus, config) apart
/// from the wall_seconds column.
pub fn train(
    net: &mut Network,
    corpus: &Corpus,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let spec = net.spec();
    if spec.num_targets != corpus.num_states {
        return Err(Error::Config(format!(
            "network predicts {} classes but the corpus has {} states",
            spec.num_targets, corpus.num_states
        )));
    }
    if spec.mel_bins != corpus.mel_bins {
        return Err(Error::Config(format!(
            "network expects {} mel bins but the corpus has {}",
            spec.mel_bins, corpus.mel_bins
        )));
    }
    let l_m = net.intrinsic_length();

    let mut csv = match out_dir {
        Some(dir) => {
            save_checkpoint(net, &dir.join("ckpt_epoch0"))?;
            let mut f = File::create(dir.join("metrics.csv"))?;
            writeln!(f, "{METRICS_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    let mut velocity: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| vec![0.0; p.value.numel()])
        .collect();
    let mut history = Vec::with_capacity(cfg.epochs as usize);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(cfg, l_m, epoch)?;
        let stream = epoch_windows(&corpus.train, l_m, cfg.delta, cfg.seed, epoch)?;
        if stream.windows.is_empty() {
            return Err(Error::Corpus(format!(
                "no training utterance is at least {} frames long",
                l_m + cfg.delta
            )));
        }
        let window_labels = 1 + cfg.delta;
        let labels_processed = stream.windows.len() * window_labels;
        let mut epoch_nll = 0.0;

        for b in batch(stream.windows, cfg.batch_size)? {
            let mut g = Graph::new();
            let binding = net.bind(&mut g);
            let mut window_means = Vec::with_capacity(b.len());
            for w in 0..b.len() {
                let input = g.constant(b.inputs.index_axis0(w)?);
                let out = net.forward_bound(&mut g, &binding, input)?;
                let nodes = mfce_loss_node(&mut g, out, &b.labels[w])?;
                epoch_nll += g.data(nodes.frame_nlls).iter().sum::<f64>();
                window_means.push(nodes.mean);
            }
            let batch_loss = g.mean_many(&window_means)?;
            g.backward(batch_loss)?;
            let grads: Vec<Vec<f64>> = binding
                .param_ids
                .iter()
                .map(|&id| g.grad(id).map(<[f64]>::to_vec))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Shape("a parameter received no gradient".into()))?;
            sgd_step(net, grads, &mut velocity, cfg, lr)?;
        }

        let train_nll = epoch_nll / labels_processed as f64;
        if !train_nll.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let eval = evaluate(net, &corpus.heldout)?;
        let metrics = EpochMetrics {
            epoch,
            train_nll,
            heldout_nll: eval.nll,
            heldout_fer: eval.fer,
            labels_processed,
            wall_seconds: started.elapsed().as_secs_f64(),
            lr,
        };
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", metrics_row(&metrics))?;
            f.flush()?;
        }
        if let Some(dir) = out_dir {
            save_checkpoint(net, &dir.join(format!("ckpt_epoch{epoch}")))?;
        }
        history.push(metrics);
    }
    Ok(history)
}
