//! The joint detection/completion network: configuration, parameter
//! initialization, per-sample inputs and the loss of one training sample.
//!
//! Detection runs first and is complete before the decoder touches the
//! graph: [`detect`] returns the encoder pyramid and the proxy-head logits,
//! [`complete`] consumes them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::decoder::{completion_loss, decoder_forward, init_decoder, joint_loss, DecoderConfig, DecoderOutput, Mode};
use crate::dsrecon::{build_existence_pyramid, DenseFrame};
use crate::encoder::{detection_logits, encoder_forward, init_detector_head, init_encoder, proxy_labels, BoxLabel, EncoderConfig, LevelFeatures};
use crate::error::{Error, Result};
use crate::sim::SceneSequence;
use crate::voxel::{voxelize, ExistencePyramid, GridConfig, SparseVoxelTensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.encoder.validate(&self.grid)?;
        if self.encoder.num_levels() != self.grid.num_levels() {
            return Err(Error::Config(format!(
                "encoder has {} levels, grid has {}",
                self.encoder.num_levels(),
                self.grid.num_levels()
            )));
        }
        self.decoder.validate(self.grid.num_levels())
    }

    pub fn num_levels(&self) -> usize {
        self.grid.num_levels()
    }
}

/// Fresh parameters for encoder, proxy head and decoder, deterministic in
/// `seed`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_encoder(&mut store, &cfg.encoder, &mut rng)?;
    init_detector_head(&mut store, &cfg.encoder, &mut rng)?;
    init_decoder(&mut store, &cfg.decoder, &cfg.grid, &cfg.encoder.channels, &mut rng)?;
    Ok(store)
}

/// One network input with its supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Level-1 voxels with averaged `(x, y, z, intensity, timestamp)`.
    pub input: SparseVoxelTensor,
    pub boxes: Vec<BoxLabel>,
    pub pyramid: ExistencePyramid,
}

/// Builds the sample for frame `t`: the sparse frame as input, the dense
/// frame's existence pyramid as completion labels.
pub fn prepare_sample(seq: &SceneSequence, t: usize, dense: &DenseFrame, grid: &GridConfig) -> Result<Sample> {
    let frame = seq.frames.get(t).ok_or_else(|| Error::Invalid(format!("frame {t} out of range")))?;
    if dense.t != t {
        return Err(Error::Invalid(format!("dense frame {} does not match frame {t}", dense.t)));
    }
    let features: Vec<f64> = frame.points.iter().flatten().copied().collect();
    let input = voxelize(&frame.positions(), &features, 5, &grid.level(1))?.tensor;
    let boxes = seq.tracks.iter().map(|tr| BoxLabel { pose: tr.poses[t], extent: tr.extent }).collect();
    let pyramid = build_existence_pyramid(&dense.points, grid)?;
    Ok(Sample { input, boxes, pyramid })
}

#[derive(Clone, Debug)]
pub struct DetectionStage {
    pub levels: Vec<LevelFeatures>,
    /// Proxy-head logits over the top-level sites, `[n]`.
    pub logits: NodeId,
}

pub fn detect(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, input: &SparseVoxelTensor) -> Result<DetectionStage> {
    let levels = encoder_forward(g, store, &cfg.encoder, input)?;
    let logits = detection_logits(g, store, levels.last().unwrap())?;
    Ok(DetectionStage { levels, logits })
}

pub fn complete<R: rand::Rng>(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, det: &DetectionStage, mode: Mode<'_, R>) -> Result<DecoderOutput> {
    decoder_forward(g, store, &cfg.decoder, &cfg.grid, &det.levels, mode)
}

/// Proxy labels of the top-level sites of `det`.
pub fn detection_labels(cfg: &ModelConfig, det: &DetectionStage, boxes: &[BoxLabel]) -> Vec<f64> {
    let top = det.levels.last().unwrap();
    proxy_labels(&top.set, &cfg.grid.level(cfg.num_levels()), boxes)
}

#[derive(Clone, Debug)]
pub struct SampleLosses {
    pub total: NodeId,
    pub detection: NodeId,
    pub completion: NodeId,
    pub decoder: DecoderOutput,
}

/// Joint loss of one sample in training mode.
pub fn training_losses(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<SampleLosses> {
    let det = detect(g, store, cfg, &sample.input)?;
    let labels = detection_labels(cfg, &det, &sample.boxes);
    let detection = g.bce_with_logits(det.logits, &labels)?;
    let decoder = complete(g, store, cfg, &det, Mode::Training { labels: &sample.pyramid, rng })?;
    let completion = completion_loss(g, &decoder, cfg.num_levels(), cfg.decoder.smooth_l1_delta)?;
    let total = joint_loss(g, detection, completion, cfg.decoder.alpha)?;
    Ok(SampleLosses { total, detection, completion, decoder })
}
