use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::ActiveSet;

/// Occupancy agreement of predicted and labeled voxels at one level, summed
/// over scenes before the ratios are taken.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: usize,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
}

impl LevelMetrics {
    pub fn new(level: usize) -> Self {
        Self { level, ..Default::default() }
    }

    pub fn accumulate(&mut self, predicted: &ActiveSet, labels: &ActiveSet) {
        let tp = predicted.iter().filter(|&c| labels.contains(c)).count() as u64;
        self.true_positives += tp;
        self.false_positives += predicted.len() as u64 - tp;
        self.false_negatives += labels.len() as u64 - tp;
        self.finish();
    }

    /// Recomputes the ratios. A ratio with an empty denominator is 1 when
    /// the other error count is also zero and 0 otherwise.
    pub fn finish(&mut self) {
        let (tp, fp, fn_) = (self.true_positives as f64, self.false_positives as f64, self.false_negatives as f64);
        let ratio = |num: f64, den: f64, other: f64| {
            if den > 0.0 {
                num / den
            } else if other == 0.0 {
                1.0
            } else {
                0.0
            }
        };
        self.precision = ratio(tp, tp + fp, fn_);
        self.recall = ratio(tp, tp + fn_, fp);
        self.iou = ratio(tp, tp + fp + fn_, 0.0);
    }
}

/// Per-step mean losses over the samples of a batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub total: Vec<f64>,
    pub detection: Vec<f64>,
    pub completion: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdsReport {
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
    pub nds: f64,
}

impl NdsReport {
    pub fn new(map: f64, tp: [f64; 5]) -> Result<Self> {
        let nds = nds_score(map, tp)?;
        let [mate, mase, maoe, mave, maae] = tp;
        Ok(Self { map, mate, mase, maoe, mave, maae, nds })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Levels ordered fine to coarse.
    pub levels: Vec<LevelMetrics>,
    /// Mean proxy detection loss over the evaluated scenes.
    pub detection_loss: f64,
    pub scenes: usize,
    pub curves: LossCurves,
    pub nds: Option<NdsReport>,
}

impl MetricsReport {
    pub fn level(&self, level: usize) -> Option<&LevelMetrics> {
        self.levels.iter().find(|m| m.level == level)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// nuScenes detection score from mAP and the five true-positive errors
/// (translation, scale, orientation, velocity, attribute).
pub fn nds_score(map: f64, tp: [f64; 5]) -> Result<f64> {
    if !(0.0..=1.0).contains(&map) {
        return Err(Error::Invalid(format!("mAP must lie in [0, 1], got {map}")));
    }
    if let Some(bad) = tp.iter().find(|&&e| !(e >= 0.0 && e.is_finite())) {
        return Err(Error::Invalid(format!("TP metrics must be finite and non-negative, got {bad}")));
    }
    let tp_term: f64 = tp.iter().map(|&e| 1.0 - e.min(1.0)).sum();
    Ok((5.0 * map + tp_term) / 10.0)
}
