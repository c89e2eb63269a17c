//! Synthetic forced-alignment corpus: a left-to-right Markov chain over S
//! states with Gaussian emissions stands in for real speech plus an HMM
//! alignment. Also: the epoch/label accounting, per-epoch window
//! partitioning, minibatch assembly, and the corpus file format.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_EPOCH, STREAM_MEANS, STREAM_UTTERANCE};
use crate::tensor::Tensor;

/// Feature frames of one utterance: base logmel-like channel plus first and
/// second temporal differences, laid out [3, T, D].
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub frames: Tensor,
    pub utterance_id: usize,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Features plus the per-frame target labels that generated them.
#[derive(Debug, Clone)]
pub struct AlignedUtterance {
    pub features: FeatureSequence,
    pub labels: Vec<usize>,
}

/// A generated corpus with its train/heldout split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub num_states: usize,
    pub mel_bins: usize,
    pub train: Vec<AlignedUtterance>,
    pub heldout: Vec<AlignedUtterance>,
}

impl Corpus {
    pub fn train_frames(&self) -> usize {
        self.train.iter().map(|u| u.features.len()).sum()
    }
}

/// Generation parameters. Emission means are spread enough relative to the
/// noise that frames are classifiable, while self-loops give adjacent frames
/// the label correlation real alignments have.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub num_states: usize,
    pub mel_bins: usize,
    pub num_utterances: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    #[serde(default = "default_self_loop")]
    pub self_loop_prob: f64,
    #[serde(default = "default_noise")]
    pub emission_noise: f64,
}

fn default_self_loop() -> f64 {
    0.9
}

fn default_noise() -> f64 {
    0.5
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_states < 2 {
            return Err(Error::Config("num_states must be >= 2".into()));
        }
        if self.mel_bins == 0 {
            return Err(Error::Config("mel_bins must be >= 1".into()));
        }
        if self.num_utterances < 2 {
            return Err(Error::Config(
                "need at least 2 utterances for a heldout split".into(),
            ));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "invalid frame range [{}, {}]",
                self.min_frames, self.max_frames
            )));
        }
        if !(0.0..=1.0).contains(&self.self_loop_prob) {
            return Err(Error::Config("self_loop_prob must be in [0, 1]".into()));
        }
        if !self.emission_noise.is_finite() || self.emission_noise < 0.0 {
            return Err(Error::Config(
                "emission_noise must be a finite non-negative value".into(),
            ));
        }
        Ok(())
    }
}

/// Generates the synthetic corpus. Deterministic per seed: state means and
/// each utterance draw from independent derived streams, and the last
/// max(1, n/10) utterances form the heldout split.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let s = config.num_states;
    let d = config.mel_bins;

    let mut means_rng = stream_rng(config.seed, STREAM_MEANS, 0);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let means: Vec<Vec<f64>> = (0..s)
        .map(|_| (0..d).map(|_| unit.sample(&mut means_rng)).collect())
        .collect();

    let mut utterances = Vec::with_capacity(config.num_utterances);
    for id in 0..config.num_utterances {
        let mut rng = stream_rng(config.seed, STREAM_UTTERANCE, id as u64);
        let frames = rng.gen_range(config.min_frames..=config.max_frames);

        let mut state = rng.gen_range(0..s);
        let mut labels = Vec::with_capacity(frames);
        for _ in 0..frames {
            labels.push(state);
            if rng.gen::<f64>() >= config.self_loop_prob {
                state = (state + 1) % s;
            }
        }

        let mut base = vec![0.0; frames * d];
        for (t, &label) in labels.iter().enumerate() {
            for dim in 0..d {
                base[t * d + dim] =
                    means[label][dim] + config.emission_noise * unit.sample(&mut rng);
            }
        }
        let mut data = vec![0.0; 3 * frames * d];
        data[..frames * d].copy_from_slice(&base);
        for t in 1..frames {
            for dim in 0..d {
                let delta = base[t * d + dim] - base[(t - 1) * d + dim];
                data[frames * d + t * d + dim] = delta;
            }
        }
        for t in 1..frames {
            for dim in 0..d {
                let dd = data[frames * d + t * d + dim] - data[frames * d + (t - 1) * d + dim];
                data[2 * frames * d + t * d + dim] = dd;
            }
        }
        utterances.push(AlignedUtterance {
            features: FeatureSequence {
                frames: Tensor::new(vec![3, frames, d], data)?,
                utterance_id: id,
            },
            labels,
        });
    }

    let heldout_count = (config.num_utterances / 10).max(1);
    let heldout = utterances.split_off(config.num_utterances - heldout_count);
    Ok(Corpus {
        num_states: s,
        mel_bins: d,
        train: utterances,
        heldout,
    })
}

/// The bookkeeping of one training epoch over L frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochAccounting {
    pub total_frames: usize,
    pub intrinsic_len: usize,
    pub delta: usize,
    pub window_len: usize,
    pub samples_per_epoch: usize,
    pub labels_per_epoch: usize,
}

/// N = floor(L / l_i) non-overlapping windows, each carrying 1+delta labels.
pub fn epoch_accounting(
    total_frames: usize,
    intrinsic_len: usize,
    delta: usize,
) -> Result<EpochAccounting> {
    if intrinsic_len == 0 {
        return Err(Error::Corpus("intrinsic length must be >= 1".into()));
    }
    let window_len = intrinsic_len + delta;
    if total_frames < window_len {
        return Err(Error::Corpus(format!(
            "{total_frames} frames cannot fill a single window of {window_len}"
        )));
    }
    let samples = total_frames / window_len;
    Ok(EpochAccounting {
        total_frames,
        intrinsic_len,
        delta,
        window_len,
        samples_per_epoch: samples,
        labels_per_epoch: (1 + delta) * samples,
    })
}

/// One training window: l_i = l_m + delta frames plus the 1+delta labels of
/// its predicted center frames.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub utterance_id: usize,
    pub start: usize,
    pub window: Tensor,
    pub center_labels: Vec<usize>,
}

/// The window stream of one epoch plus what was left out of it.
#[derive(Debug)]
pub struct EpochWindows {
    pub windows: Vec<WindowSample>,
    pub skipped_utterances: usize,
    pub dropped_frames: usize,
}

/// Partitions every utterance into non-overlapping windows of length
/// l_m + delta starting at a per-epoch random offset in [0, l_i), then
/// shuffles globally. (seed, epoch) fully determine the stream; utterances
/// shorter than one window are skipped and counted.
pub fn epoch_windows(
    utterances: &[AlignedUtterance],
    intrinsic_len: usize,
    delta: usize,
    seed: u64,
    epoch: u32,
) -> Result<EpochWindows> {
    if utterances.is_empty() {
        return Err(Error::Corpus("empty corpus".into()));
    }
    let l_i = intrinsic_len + delta;
    let center = (intrinsic_len - 1) / 2;
    let mut rng = stream_rng(seed, STREAM_EPOCH, epoch as u64);
    let mut windows = Vec::new();
    let mut skipped = 0usize;
    let mut dropped = 0usize;
    for utt in utterances {
        let frames = utt.features.len();
        if frames < l_i {
            skipped += 1;
            dropped += frames;
            continue;
        }
        let offset = rng.gen_range(0..l_i);
        let count = (frames - offset) / l_i;
        dropped += frames - count * l_i;
        for w in 0..count {
            let start = offset + w * l_i;
            windows.push(WindowSample {
                utterance_id: utt.features.utterance_id,
                start,
                window: slice_time(&utt.features.frames, start, l_i)?,
                center_labels: utt.labels[start + center..start + center + delta + 1].to_vec(),
            });
        }
    }
    windows.shuffle(&mut rng);
    Ok(EpochWindows {
        windows,
        skipped_utterances: skipped,
        dropped_frames: dropped,
    })
}

/// Copies frames [start, start+len) out of a [C, T, D] tensor.
pub fn slice_time(frames: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let shape = frames.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "expected [C, T, D] frames, got {shape:?}"
        )));
    }
    let (c, t, d) = (shape[0], shape[1], shape[2]);
    if start + len > t {
        return Err(Error::Shape(format!(
            "slice [{start}, {}) out of range for {t} frames",
            start + len
        )));
    }
    let src = frames.data();
    let mut data = Vec::with_capacity(c * len * d);
    for ch in 0..c {
        let base = (ch * t + start) * d;
        data.extend_from_slice(&src[base..base + len * d]);
    }
    Tensor::new(vec![c, len, d], data)
}

/// A stacked minibatch: inputs [B, 3, l_i, D] and a B x (1+delta) label
/// matrix, kept row-per-window.
#[derive(Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Chunks a window stream into stacked batches; the final partial batch is
/// emitted as-is.
pub fn batch(windows: Vec<WindowSample>, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(windows.len().div_ceil(batch_size));
    let mut chunk: Vec<WindowSample> = Vec::with_capacity(batch_size);
    let flush = |chunk: &mut Vec<WindowSample>, out: &mut Vec<Batch>| -> Result<()> {
        if chunk.is_empty() {
            return Ok(());
        }
        let tensors: Vec<Tensor> = chunk.iter().map(|w| w.window.clone()).collect();
        let labels = chunk.drain(..).map(|w| w.center_labels).collect();
        out.push(Batch {
            inputs: Tensor::stack(&tensors)?,
            labels,
        });
        Ok(())
    };
    for w in windows {
        chunk.push(w);
        if chunk.len() == batch_size {
            flush(&mut chunk, &mut out)?;
        }
    }
    flush(&mut chunk, &mut out)?;
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct FileUtterance {
    id: usize,
    frames: usize,
    split: String,
    feature_offset: u64,
    label_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    num_states: usize,
    mel_bins: usize,
    utterances: Vec<FileUtterance>,
}

/// Writes a corpus as one file: little-endian u64 header length, JSON
/// header, then per-utterance little-endian f64 feature blobs and u32
/// label arrays at the offsets the header records.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (split, utts) in [("train", &corpus.train), ("heldout", &corpus.heldout)] {
        for utt in utts.iter() {
            let frames = utt.features.len();
            let feature_offset = offset;
            offset += (utt.features.frames.numel() * 8) as u64;
            let label_offset = offset;
            offset += (frames * 4) as u64;
            entries.push(FileUtterance {
                id: utt.features.utterance_id,
                frames,
                split: split.to_string(),
                feature_offset,
                label_offset,
            });
        }
    }
    let header = serde_json::to_vec(&FileHeader {
        num_states: corpus.num_states,
        mel_bins: corpus.mel_bins,
        utterances: entries,
    })?;

    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for utt in corpus.train.iter().chain(&corpus.heldout) {
        for v in utt.features.frames.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &label in &utt.labels {
            w.write_all(&(label as u32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Corpus(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.len() < 8 {
        return Err(Error::Corpus(format!(
            "{} is not a corpus file",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(raw[..8].try_into().unwrap()) as usize;
    if raw.len() < 8 + header_len {
        return Err(Error::Corpus(format!("{} is truncated", path.display())));
    }
    let header: FileHeader = serde_json::from_slice(&raw[8..8 + header_len])?;
    let payload = &raw[8 + header_len..];

    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for entry in header.utterances {
        let d = header.mel_bins;
        let count = 3 * entry.frames * d;
        let fstart = entry.feature_offset as usize;
        let lstart = entry.label_offset as usize;
        if payload.len() < fstart + count * 8 || payload.len() < lstart + entry.frames * 4 {
            return Err(Error::Corpus(format!("{} is truncated", path.display())));
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let bytes: [u8; 8] = payload[fstart + i * 8..fstart + (i + 1) * 8]
                .try_into()
                .unwrap();
            let v = f64::from_le_bytes(bytes);
            if !v.is_finite() {
                return Err(Error::Corpus(format!(
                    "non-finite feature in utterance {}",
                    entry.id
                )));
            }
            data.push(v);
        }
        let mut labels = Vec::with_capacity(entry.frames);
        for i in 0..entry.frames {
            let bytes: [u8; 4] = payload[lstart + i * 4..lstart + (i + 1) * 4]
                .try_into()
                .unwrap();
            let label = u32::from_le_bytes(bytes) as usize;
            if label >= header.num_states {
                return Err(Error::Corpus(format!(
                    "label {label} out of range in utterance {}",
                    entry.id
                )));
            }
            labels.push(label);
        }
        let utt = AlignedUtterance {
            features: FeatureSequence {
                frames: Tensor::new(vec![3, entry.frames, d], data)?,
                utterance_id: entry.id,
            },
            labels,
        };
        match entry.split.as_str() {
            "train" => train.push(utt),
            "heldout" => heldout.push(utt),
            other => return Err(Error::Corpus(format!("unknown split {other:?}"))),
        }
    }
    Ok(Corpus {
        num_states: header.num_states,
        mel_bins: header.mel_bins,
        train,
        heldout,
    })
}
