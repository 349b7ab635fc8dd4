//! Sparse-convolution pyramid encoder and the proxy detection head.
//!
//! Level 1 holds the voxelized input. Each later level is produced by a
//! strided sparse convolution followed by submanifold convolutions, every
//! convolution followed by per-voxel layer normalization and a ReLU.

mod conv;
pub mod rulebook;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use conv::{sparse_conv, SparseConvOp};
pub use rulebook::Rulebook;

use crate::autodiff::{DenseArray, Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::voxel::{ActiveSet, GridConfig, LevelGrid, SparseVoxelTensor, DEFAULT_KERNELS};

/// Active set plus the graph node holding its `[n, c]` features.
#[derive(Clone, Debug)]
pub struct LevelFeatures {
    pub set: Arc<ActiveSet>,
    pub node: NodeId,
}

impl LevelFeatures {
    pub fn level(&self) -> usize {
        self.set.level()
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Feature channels of levels 1..=N.
    pub channels: Vec<usize>,
    /// Downsampling stride between consecutive levels; must equal the grid's
    /// pooling kernels.
    pub strides: Vec<[u32; 3]>,
    /// Kernel of each strided convolution. Defaults per axis to the stride,
    /// or 3 where the stride is 1.
    pub down_kernels: Option<Vec<[u32; 3]>>,
    pub subm_kernel: [u32; 3],
    /// Submanifold convolutions per stage.
    pub subm_depth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 5,
            channels: vec![16, 32, 64, 64, 128],
            strides: DEFAULT_KERNELS.to_vec(),
            down_kernels: None,
            subm_kernel: [3, 3, 3],
            subm_depth: 1,
        }
    }
}

impl EncoderConfig {
    pub fn num_levels(&self) -> usize {
        self.channels.len()
    }

    pub fn down_kernel(&self, stage: usize) -> [u32; 3] {
        match &self.down_kernels {
            Some(k) => k[stage],
            None => self.strides[stage].map(|s| if s == 1 { 3 } else { s }),
        }
    }

    pub fn validate(&self, grid: &GridConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.channels.len() < 2 || self.channels.iter().chain([&self.in_channels]).any(|&c| c == 0) {
            return bad("need at least two levels and positive channel counts".into());
        }
        if self.strides.len() != self.channels.len() - 1 {
            return bad(format!("{} strides for {} levels", self.strides.len(), self.channels.len()));
        }
        if self.strides != grid.kernels {
            return bad(format!("strides {:?} differ from grid kernels {:?}", self.strides, grid.kernels));
        }
        if let Some(k) = &self.down_kernels {
            if k.len() != self.strides.len() {
                return bad("down_kernels must have one entry per stride".into());
            }
        }
        for (i, s) in self.strides.iter().enumerate() {
            let k = self.down_kernel(i);
            if (0..3).any(|a| s[a] == 0 || k[a] < s[a] || (k[a] - s[a]) % 2 != 0) {
                return bad(format!("down kernel {k:?} incompatible with stride {s:?}"));
            }
        }
        if self.subm_kernel.iter().any(|&k| k % 2 == 0) {
            return bad("submanifold kernel must be odd per axis".into());
        }
        Ok(())
    }
}

fn volume(k: [u32; 3]) -> usize {
    k.iter().map(|&v| v as usize).product()
}

fn insert_conv<R: Rng>(store: &mut ParamStore, prefix: &str, kernel: [u32; 3], c_in: usize, c_out: usize, rng: &mut R) -> Result<()> {
    let k = volume(kernel);
    store.insert_xavier(format!("{prefix}.w"), &[k, c_in, c_out], k * c_in, k * c_out, rng)?;
    store.insert(format!("{prefix}.b"), DenseArray::zeros(&[c_out]))
}

pub(crate) fn insert_norm(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), DenseArray::filled(&[c], 1.0))?;
    store.insert(format!("{prefix}.bias"), DenseArray::zeros(&[c]))
}

pub(crate) fn insert_linear<R: Rng>(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, rng: &mut R) -> Result<()> {
    store.insert_xavier(format!("{prefix}.w"), &[c_in, c_out], c_in, c_out, rng)?;
    store.insert(format!("{prefix}.b"), DenseArray::zeros(&[c_out]))
}

/// Registers encoder parameters under `encoder.*`.
pub fn init_encoder<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    let c = &cfg.channels;
    insert_conv(store, "encoder.input.conv", cfg.subm_kernel, cfg.in_channels, c[0], rng)?;
    insert_norm(store, "encoder.input.norm", c[0])?;
    for stage in 0..cfg.strides.len() {
        let p = format!("encoder.level{}", stage + 2);
        insert_conv(store, &format!("{p}.down"), cfg.down_kernel(stage), c[stage], c[stage + 1], rng)?;
        insert_norm(store, &format!("{p}.down_norm"), c[stage + 1])?;
        for j in 0..cfg.subm_depth {
            insert_conv(store, &format!("{p}.subm{j}"), cfg.subm_kernel, c[stage + 1], c[stage + 1], rng)?;
            insert_norm(store, &format!("{p}.subm{j}_norm"), c[stage + 1])?;
        }
    }
    Ok(())
}

/// Registers the proxy head `detector.head` mapping level-N features to one
/// logit per voxel.
pub fn init_detector_head<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    insert_linear(store, "detector.head", *cfg.channels.last().unwrap(), 1, rng)
}

fn conv_block(g: &mut Graph, store: &ParamStore, x: NodeId, rb: Rulebook, conv: &str, norm: &str) -> Result<NodeId> {
    let y = sparse_conv(g, store, x, Arc::new(rb), conv)?;
    let y = g.layer_norm(store, y, 1, norm)?;
    Ok(g.relu(y))
}

/// Runs the encoder on a level-1 input tensor and returns `f_D^1..f_D^N`.
pub fn encoder_forward(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, input: &SparseVoxelTensor) -> Result<Vec<LevelFeatures>> {
    if input.level() != 1 {
        return Err(Error::LevelMismatch(input.level(), 1));
    }
    if input.channels() != cfg.in_channels {
        return Err(Error::shape("encoder input", format!("{} channels", cfg.in_channels), input.channels()));
    }
    let x = g.constant(input.features.clone());
    let (rb, set) = rulebook::submanifold(&input.set, cfg.subm_kernel)?;
    let x = conv_block(g, store, x, rb, "encoder.input.conv", "encoder.input.norm")?;
    let mut levels = vec![LevelFeatures { set, node: x }];
    for stage in 0..cfg.strides.len() {
        let p = format!("encoder.level{}", stage + 2);
        let prev = levels.last().unwrap();
        let (rb, set) = rulebook::strided(&prev.set, cfg.down_kernel(stage), cfg.strides[stage])?;
        let mut x = conv_block(g, store, prev.node, rb, &format!("{p}.down"), &format!("{p}.down_norm"))?;
        if cfg.subm_depth > 0 {
            let (rb, _) = rulebook::submanifold(&set, cfg.subm_kernel)?;
            let rb = Arc::new(rb);
            for j in 0..cfg.subm_depth {
                let y = sparse_conv(g, store, x, rb.clone(), &format!("{p}.subm{j}"))?;
                let y = g.layer_norm(store, y, 1, &format!("{p}.subm{j}_norm"))?;
                x = g.relu(y);
            }
        }
        levels.push(LevelFeatures { set, node: x });
    }
    Ok(levels)
}

/// Annotated box in the frame's sensor coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxLabel {
    pub pose: RigidTransform,
    pub extent: [f64; 3],
}

/// Foreground label per voxel: 1 when the voxel's horizontal center lies in
/// a box footprint and its vertical span overlaps the box's.
pub fn proxy_labels(set: &ActiveSet, grid: &LevelGrid, boxes: &[BoxLabel]) -> Vec<f64> {
    let inv: Vec<RigidTransform> = boxes.iter().map(|b| b.pose.inverse()).collect();
    set.iter()
        .map(|c| {
            let center = grid.center(c);
            let (z0, z1) = (center[2] - 0.5 * grid.voxel_size[2], center[2] + 0.5 * grid.voxel_size[2]);
            let hit = boxes.iter().zip(&inv).any(|(b, inv)| {
                let bz = b.pose.translation.z;
                let q = inv.apply([center[0], center[1], bz]);
                q[0].abs() <= 0.5 * b.extent[0]
                    && q[1].abs() <= 0.5 * b.extent[1]
                    && z0 <= bz + 0.5 * b.extent[2]
                    && z1 >= bz - 0.5 * b.extent[2]
            });
            f64::from(u8::from(hit))
        })
        .collect()
}

/// Logits of the proxy head, `[n]`.
pub fn detection_logits(g: &mut Graph, store: &ParamStore, top: &LevelFeatures) -> Result<NodeId> {
    let z = g.linear(store, top.node, "detector.head")?;
    g.reshape(z, vec![top.len()])
}

/// Mean binary cross-entropy of the proxy head over level-N sites.
pub fn proxy_detection_loss(g: &mut Graph, store: &ParamStore, top: &LevelFeatures, labels: &[f64]) -> Result<NodeId> {
    if labels.len() != top.len() {
        return Err(Error::shape("proxy_detection_loss", format!("{} labels", top.len()), labels.len()));
    }
    let z = detection_logits(g, store, top)?;
    g.bce_with_logits(z, labels)
}
