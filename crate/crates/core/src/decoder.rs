//! Completion decoder: up-sampling and interpreting bridges, sparsity
//! concatenation, existence scoring and pruning, and the completion and
//! joint losses.
//!
//! Level `N` is a per-voxel linear bridge on the top encoder level and is not
//! pruned. Every lower level `i` expands the surviving level `i + 1` voxels
//! into their children, merges them with the encoder's level-`i` features,
//! scores every merged voxel and keeps a subset for level `i - 1`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{smooth_l1_value, DenseArray, Graph, NodeId, ParamStore};
use crate::encoder::{insert_linear, insert_norm, LevelFeatures};
use crate::error::{Error, Result};
use crate::voxel::{align_union, expand_children, ActiveSet, ExistencePyramid, GridConfig, LevelGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Completion channels from level N down to level 1.
    pub channels: Vec<usize>,
    /// Inference keeps voxels with score strictly above `beta`.
    pub beta: f64,
    /// Weight of the completion loss in the joint loss.
    pub alpha: f64,
    /// Upper bound on the fraction of empty voxels among supervised ones.
    pub empty_ratio_cap: f64,
    /// Transition point of the smooth L1 loss.
    pub smooth_l1_delta: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![128, 160, 64, 32, 16],
            beta: 0.7,
            alpha: 3.0,
            empty_ratio_cap: 0.75,
            smooth_l1_delta: 1.0,
        }
    }
}

impl DecoderConfig {
    pub fn num_levels(&self) -> usize {
        self.channels.len()
    }

    /// Completion channels at `level` (1-based).
    pub fn channel(&self, level: usize) -> usize {
        self.channels[self.channels.len() - level]
    }

    pub fn validate(&self, num_levels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("decoder: {m}")));
        if self.channels.len() != num_levels {
            return bad(format!("{} channel entries for {num_levels} levels", self.channels.len()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return bad("channels must be positive".into());
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !(self.empty_ratio_cap > 0.0 && self.empty_ratio_cap < 1.0) {
            return bad(format!("empty_ratio_cap must lie in (0, 1), got {}", self.empty_ratio_cap));
        }
        if !(self.smooth_l1_delta > 0.0) {
            return bad("smooth_l1_delta must be positive".into());
        }
        Ok(())
    }
}

fn volume(k: [u32; 3]) -> usize {
    k.iter().map(|&v| v as usize).product()
}

fn level_prefix(level: usize) -> String {
    format!("decoder.level{level}")
}

/// Registers decoder parameters. `det_channels` are the encoder channels of
/// levels 1..=N.
pub fn init_decoder<R: Rng>(store: &mut ParamStore, cfg: &DecoderConfig, grid: &GridConfig, det_channels: &[usize], rng: &mut R) -> Result<()> {
    let n = cfg.num_levels();
    insert_linear(store, &format!("{}.bridge", level_prefix(n)), det_channels[n - 1], cfg.channel(n), rng)?;
    for level in (1..n).rev() {
        let p = level_prefix(level);
        let (c2, c_up, c_det) = (cfg.channel(level), cfg.channel(level + 1), det_channels[level - 1]);
        let s = volume(grid.kernel(level));
        insert_linear(store, &format!("{p}.ub.expand"), c_up, s * c2, rng)?;
        for h in 0..s {
            insert_linear(store, &format!("{p}.ub.head{h}"), c2, c2, rng)?;
        }
        insert_linear(store, &format!("{p}.ub.out"), c2, c2, rng)?;
        insert_norm(store, &format!("{p}.ub.norm"), c2)?;
        if c_det != c2 {
            insert_linear(store, &format!("{p}.ib.proj"), c_det, c2, rng)?;
        }
        for part in ["q", "k", "v", "out"] {
            insert_linear(store, &format!("{p}.ib.{part}"), c2, c2, rng)?;
        }
        insert_norm(store, &format!("{p}.ib.norm"), c2)?;
        insert_linear(store, &format!("{p}.concat"), 2 * c2, c2, rng)?;
        // untrained scores sit at 0.5, below any useful threshold
        store.insert(format!("{p}.scm.w"), DenseArray::zeros(&[c2, 1]))?;
        store.insert(format!("{p}.scm.b"), DenseArray::zeros(&[1]))?;
    }
    Ok(())
}

/// Per-voxel linear map `decoder.levelN.bridge` on the top encoder level.
pub fn level_n_bridge(g: &mut Graph, store: &ParamStore, top: &LevelFeatures, level: usize) -> Result<LevelFeatures> {
    let node = g.linear(store, top.node, &format!("{}.bridge", level_prefix(level)))?;
    Ok(LevelFeatures { set: top.set.clone(), node })
}

/// `LN(linear(x) + x)`.
fn residual(g: &mut Graph, store: &ParamStore, x: NodeId, linear: &str, norm: &str) -> Result<NodeId> {
    let y = g.linear(store, x, linear)?;
    let y = g.add(y, x)?;
    g.layer_norm(store, y, 1, norm)
}

/// Output of the up-sampling bridge.
#[derive(Clone, Debug)]
pub struct UbOutput {
    pub features: LevelFeatures,
    /// Per head, `[P, S, c2]` attention over the token axis.
    pub attention: Vec<NodeId>,
}

/// Splits each parent into `S` children. A parent feature is mapped to `S`
/// tokens of width `c2`; head `h` scores every token per channel, normalizes
/// over tokens, and the weighted token sum becomes child `h`. Children outside
/// `child_grid` are dropped and rows are ordered by coordinate.
pub fn ub_forward(
    g: &mut Graph,
    store: &ParamStore,
    level: usize,
    parent: &LevelFeatures,
    kernel: [u32; 3],
    child_grid: &LevelGrid,
    c2: usize,
) -> Result<UbOutput> {
    let p = level_prefix(level);
    let s = volume(kernel);
    let n_parent = parent.len();
    let u = g.linear(store, parent.node, &format!("{p}.ub.expand"))?;
    let tokens = g.reshape(u, vec![n_parent, s, c2])?;
    let mut heads = Vec::with_capacity(s);
    let mut attention = Vec::with_capacity(s);
    for h in 0..s {
        let score = g.linear(store, tokens, &format!("{p}.ub.head{h}"))?;
        let a = g.softmax(score, 1)?;
        let weighted = g.mul(a, tokens)?;
        heads.push(g.sum_axis(weighted, 1)?);
        attention.push(a);
    }
    let stacked = g.concat(&heads)?;
    let rows = g.reshape(stacked, vec![n_parent * s, c2])?;

    let children = expand_children(&parent.set, kernel, child_grid);
    let mut order: Vec<usize> = (0..children.len()).collect();
    order.sort_unstable_by_key(|&j| children.coords[j]);
    let coords = order.iter().map(|&j| children.coords[j]).collect();
    let src: Arc<[usize]> = order.iter().map(|&j| children.parent[j] * s + children.slot[j]).collect();
    let set = Arc::new(ActiveSet::new(level, coords)?);
    let out = g.gather_rows(rows, src)?;
    let node = residual(g, store, out, &format!("{p}.ub.out"), &format!("{p}.ub.norm"))?;
    Ok(UbOutput { features: LevelFeatures { set, node }, attention })
}

/// Channel-to-channel attention on the encoder features of one level:
/// `B = softmax_rows(q k^T)` per voxel, output `B v`, then a residual
/// linear and layer normalization. Inputs whose width differs from `c2` are
/// first projected with `ib.proj`.
pub fn ib_forward(g: &mut Graph, store: &ParamStore, level: usize, det: &LevelFeatures, c2: usize) -> Result<LevelFeatures> {
    let p = level_prefix(level);
    let d = if g.dims(det.node)[1] != c2 { g.linear(store, det.node, &format!("{p}.ib.proj"))? } else { det.node };
    let q = g.linear(store, d, &format!("{p}.ib.q"))?;
    let k = g.linear(store, d, &format!("{p}.ib.k"))?;
    let v = g.linear(store, d, &format!("{p}.ib.v"))?;
    let scores = g.outer(q, k)?;
    let b = g.softmax(scores, 2)?;
    let out = g.matvec(b, v)?;
    let node = residual(g, store, out, &format!("{p}.ib.out"), &format!("{p}.ib.norm"))?;
    Ok(LevelFeatures { set: det.set.clone(), node })
}

/// Aligns both inputs on the union of their sites (zero rows where a side is
/// absent), concatenates channels and merges them with `concat`.
pub fn sparsity_concat(g: &mut Graph, store: &ParamStore, level: usize, fu: &LevelFeatures, fi: &LevelFeatures) -> Result<LevelFeatures> {
    let u = align_union(&fu.set, &fi.set)?;
    let n = u.set.len();
    let a = g.scatter_rows(fu.node, u.a_rows.into(), n)?;
    let b = g.scatter_rows(fi.node, u.b_rows.into(), n)?;
    let cat = g.concat(&[a, b])?;
    let node = g.linear(store, cat, &format!("{}.concat", level_prefix(level)))?;
    Ok(LevelFeatures { set: Arc::new(u.set), node })
}

/// Existence scores `sigmoid(linear(f))` as an `[n, 1]` node.
pub fn scm_scores(g: &mut Graph, store: &ParamStore, level: usize, f: &LevelFeatures) -> Result<NodeId> {
    let z = g.linear(store, f.node, &format!("{}.scm", level_prefix(level)))?;
    Ok(g.sigmoid(z))
}

/// Rows with score strictly above `beta`.
pub fn keep_above(scores: &[f64], beta: f64) -> Vec<usize> {
    scores.iter().enumerate().filter(|(_, &e)| e > beta).map(|(i, _)| i).collect()
}

/// Supervised rows after negative subsampling: all positives plus at most
/// enough negatives to keep `negatives / total <= cap`. Levels without
/// positives are left unsupervised.
pub fn subsample_negatives<R: Rng>(labels: &[bool], cap: f64, rng: &mut R) -> Vec<usize> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    if pos.is_empty() {
        return Vec::new();
    }
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let max_neg = ((pos.len() as f64) * cap / (1.0 - cap) + 1e-9).floor() as usize;
    let mut rows = pos;
    if neg.len() <= max_neg {
        rows.extend(neg);
    } else {
        rows.extend(rand::seq::index::sample(rng, neg.len(), max_neg).into_iter().map(|j| neg[j]));
    }
    rows.sort_unstable();
    rows
}

pub enum Mode<'a, R: Rng> {
    /// Prune with the ground-truth pyramid and subsample negatives.
    Training { labels: &'a ExistencePyramid, rng: &'a mut R },
    Inference { beta: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub generated: usize,
    pub positives: usize,
    pub supervised: usize,
    pub kept: usize,
}

impl LevelStats {
    /// Fraction of supervised voxels that are empty; 0 when none.
    pub fn empty_ratio(&self) -> f64 {
        if self.supervised == 0 {
            0.0
        } else {
            (self.supervised - self.positives.min(self.supervised)) as f64 / self.supervised as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub level: usize,
    /// `f_T` over every generated site.
    pub features: LevelFeatures,
    /// `[n, 1]` scores; absent at level N.
    pub scores: Option<NodeId>,
    pub score_values: Vec<f64>,
    /// Generated rows passed on to the next level.
    pub kept_rows: Vec<usize>,
    pub kept: Arc<ActiveSet>,
    /// Training only: supervised rows and their 0/1 targets.
    pub supervised_rows: Vec<usize>,
    pub targets: Vec<f64>,
    pub stats: LevelStats,
}

/// Levels ordered N down to 1.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub levels: Vec<LevelOutput>,
}

impl DecoderOutput {
    pub fn level(&self, level: usize) -> &LevelOutput {
        self.levels.iter().find(|l| l.level == level).expect("level present")
    }
}

/// Runs the decoder over encoder levels `f_D^1..f_D^N`.
pub fn decoder_forward<R: Rng>(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &DecoderConfig,
    grid: &GridConfig,
    det: &[LevelFeatures],
    mut mode: Mode<'_, R>,
) -> Result<DecoderOutput> {
    let n = cfg.num_levels();
    if det.len() != n || grid.num_levels() != n {
        return Err(Error::shape("decoder_forward", format!("{n} levels"), format!("{} encoder / {} grid levels", det.len(), grid.num_levels())));
    }
    if let Mode::Training { labels, .. } = &mode {
        if labels.num_levels() != n {
            return Err(Error::shape("decoder labels", format!("{n} levels"), labels.num_levels()));
        }
    }
    let top = level_n_bridge(g, store, &det[n - 1], n)?;
    let all: Vec<usize> = (0..top.len()).collect();
    let mut levels = vec![LevelOutput {
        level: n,
        kept: top.set.clone(),
        stats: LevelStats { generated: top.len(), kept: top.len(), ..Default::default() },
        features: top,
        scores: None,
        score_values: Vec::new(),
        kept_rows: all,
        supervised_rows: Vec::new(),
        targets: Vec::new(),
    }];
    let mut parent = levels[0].features.clone();
    for level in (1..n).rev() {
        let c2 = cfg.channel(level);
        let ub = ub_forward(g, store, level, &parent, grid.kernel(level), &grid.level(level), c2)?;
        let ib = ib_forward(g, store, level, &det[level - 1], c2)?;
        let f_t = sparsity_concat(g, store, level, &ub.features, &ib)?;
        let scores = scm_scores(g, store, level, &f_t)?;
        let score_values = g.value(scores).data().to_vec();
        let mut stats = LevelStats { generated: f_t.len(), ..Default::default() };
        let (kept_rows, supervised_rows, targets) = match &mut mode {
            Mode::Inference { beta } => (keep_above(&score_values, *beta), Vec::new(), Vec::new()),
            Mode::Training { labels, rng } => {
                let truth = labels.level(level);
                let occupied: Vec<bool> = f_t.set.iter().map(|c| truth.contains(c)).collect();
                let kept: Vec<usize> = (0..occupied.len()).filter(|&i| occupied[i]).collect();
                let sup = subsample_negatives(&occupied, cfg.empty_ratio_cap, &mut **rng);
                let targets = sup.iter().map(|&i| f64::from(u8::from(occupied[i]))).collect();
                stats.positives = kept.len();
                stats.supervised = sup.len();
                (kept, sup, targets)
            }
        };
        stats.kept = kept_rows.len();
        let kept_set = Arc::new(ActiveSet::new(level, kept_rows.iter().map(|&r| f_t.set.coords()[r]).collect())?);
        let kept_node = g.gather_rows(f_t.node, kept_rows.clone().into())?;
        parent = LevelFeatures { set: kept_set.clone(), node: kept_node };
        levels.push(LevelOutput {
            level,
            features: f_t,
            scores: Some(scores),
            score_values,
            kept_rows,
            kept: kept_set,
            supervised_rows,
            targets,
            stats,
        });
    }
    Ok(DecoderOutput { levels })
}

/// `L_T = 1/(N-1) * sum_i mean_smooth_l1(e_i, e_hat_i)` over the supervised
/// voxels of levels 1..N-1. A level without supervised voxels contributes 0.
pub fn completion_loss(g: &mut Graph, out: &DecoderOutput, num_levels: usize, delta: f64) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for lv in out.levels.iter().filter(|l| l.scores.is_some()) {
        let e = g.gather_rows(lv.scores.unwrap(), lv.supervised_rows.clone().into())?;
        let target = DenseArray::new(vec![lv.targets.len(), 1], lv.targets.clone())?;
        let term = g.smooth_l1(e, &target, delta)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(DenseArray::scalar(0.0)),
    };
    Ok(g.scale(total, 1.0 / (num_levels - 1) as f64))
}

/// Scalar reference for [`completion_loss`]: `levels` holds per-level
/// `(scores, labels)` for levels 1..N-1.
pub fn completion_loss_value(levels: &[(Vec<f64>, Vec<f64>)], num_levels: usize, delta: f64) -> Result<f64> {
    let mut total = 0.0;
    for (e, t) in levels {
        if e.len() != t.len() {
            return Err(Error::shape("completion_loss", format!("{} labels", e.len()), t.len()));
        }
        if !e.is_empty() {
            total += e.iter().zip(t).map(|(a, b)| smooth_l1_value(a - b, delta)).sum::<f64>() / e.len() as f64;
        }
    }
    Ok(total / (num_levels - 1) as f64)
}

/// `L = L_D + alpha * L_T`. With `alpha == 0` the completion term is left out
/// of the graph entirely, so no gradient reaches the decoder.
pub fn joint_loss(g: &mut Graph, l_d: NodeId, l_t: NodeId, alpha: f64) -> Result<NodeId> {
    if alpha == 0.0 {
        return Ok(l_d);
    }
    let weighted = g.scale(l_t, alpha);
    g.add(l_d, weighted)
}

pub fn joint_loss_value(l_d: f64, l_t: f64, alpha: f64) -> Result<f64> {
    if !(l_d.is_finite() && l_t.is_finite()) {
        return Err(Error::Invalid(format!("losses must be finite, got L_D={l_d}, L_T={l_t}")));
    }
    Ok(l_d + alpha * l_t)
}
