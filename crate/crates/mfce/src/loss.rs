//! Multi-frame cross-entropy: one dense forward pass over an extended
//! window yields 1 + delta posterior rows, and the loss is the mean
//! negative log likelihood of the matching labels. At delta = 0 this is
//! ordinary per-frame cross-entropy, bit for bit.

use crate::error::{Error, Result};
use crate::model::PosteriorSequence;
use crate::tensor::{Graph, NodeId};

/// Value-level summary of a loss over some labeled frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Mean negative log likelihood over the frames: the objective value.
    pub total: f64,
    /// One negative log likelihood per labeled frame.
    pub per_frame: Vec<f64>,
    pub label_count: usize,
}

fn frame_nll(row: &[f64], label: usize) -> Result<f64> {
    if label >= row.len() {
        return Err(Error::LabelOutOfRange {
            label,
            num_targets: row.len(),
        });
    }
    Ok(-row[label])
}

/// Cross-entropy of a single-row posterior sequence against its label.
pub fn ce_loss(posteriors: &PosteriorSequence, label: usize) -> Result<LossReport> {
    if posteriors.rows() != 1 {
        return Err(Error::Shape(format!(
            "single-frame cross-entropy expects one posterior row, got {}",
            posteriors.rows()
        )));
    }
    mfce_loss(posteriors, &[label])
}

/// Multi-frame cross-entropy over a posterior sequence: the mean
/// cross-entropy of row r against labels[r]. The caller aligns labels to
/// rows, so labels[r] belongs to frame `start_frame + r`.
pub fn mfce_loss(posteriors: &PosteriorSequence, labels: &[usize]) -> Result<LossReport> {
    if posteriors.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} posterior rows cannot score {} labels",
            posteriors.rows(),
            labels.len()
        )));
    }
    let mut per_frame = Vec::with_capacity(labels.len());
    for (r, &label) in labels.iter().enumerate() {
        per_frame.push(frame_nll(posteriors.row(r), label)?);
    }
    let total = per_frame.iter().sum::<f64>() / labels.len() as f64;
    Ok(LossReport {
        total,
        per_frame,
        label_count: labels.len(),
    })
}

/// The loss subgraph of one training window.
pub struct LossNodes {
    /// [rows] vector of per-frame negative log likelihoods.
    pub frame_nlls: NodeId,
    /// Scalar mean over the rows: the training objective.
    pub mean: NodeId,
}

/// Appends the multi-frame cross-entropy of a [rows, S] log-posterior node
/// against `labels` to the graph.
pub fn mfce_loss_node(g: &mut Graph, log_probs: NodeId, labels: &[usize]) -> Result<LossNodes> {
    let frame_nlls = g.nll_rows(log_probs, labels)?;
    let mean = g.mean(frame_nlls);
    Ok(LossNodes { frame_nlls, mean })
}
