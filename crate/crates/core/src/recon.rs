//! Stage-one reconstruction objective: sparse depth L1, dense pseudo-depth
//! L1 and semantic cross-entropy, weighted `1.0 / 0.05 / 1.0` by default.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::{DepthImage, SemanticImage};

/// Per-pixel class ids with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
    pub valid: Vec<bool>,
}

/// Supervision for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconTargets {
    /// LiDAR analog: a sparse subset of pixels carries depth.
    pub sparse_depth: DepthImage,
    /// Pseudo-depth analog: dense.
    pub dense_depth: DepthImage,
    pub labels: LabelImage,
}

impl ReconTargets {
    pub fn width(&self) -> usize {
        self.dense_depth.width
    }

    pub fn height(&self) -> usize {
        self.dense_depth.height
    }

    pub fn check_shape(&self, width: usize, height: usize) -> Result<()> {
        let dims = [
            (self.sparse_depth.width, self.sparse_depth.height),
            (self.dense_depth.width, self.dense_depth.height),
            (self.labels.width, self.labels.height),
        ];
        if dims.iter().any(|&d| d != (width, height)) {
            return Err(Error::invalid(format!(
                "targets {dims:?} do not match a {width}x{height} view"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub depth: f64,
    pub pseudo_depth: f64,
    pub semantic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            depth: 1.0,
            pseudo_depth: 0.05,
            semantic: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 3] {
        [self.depth, self.pseudo_depth, self.semantic]
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights {
            depth: self.depth * k,
            pseudo_depth: self.pseudo_depth * k,
            semantic: self.semantic * k,
        }
    }
}

/// A masked mean together with the number of pixels it averaged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedMean {
    pub value: f64,
    pub count: usize,
}

impl MaskedMean {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage1Loss {
    pub total: f64,
    pub depth: f64,
    pub pseudo_depth: f64,
    pub semantic: f64,
}

impl Stage1Loss {
    pub fn from_parts(depth: f64, pseudo_depth: f64, semantic: f64, w: &LossWeights) -> Self {
        Stage1Loss {
            total: w.depth * depth + w.pseudo_depth * pseudo_depth + w.semantic * semantic,
            depth,
            pseudo_depth,
            semantic,
        }
    }

    pub fn accumulate(&mut self, other: &Stage1Loss) {
        self.total += other.total;
        self.depth += other.depth;
        self.pseudo_depth += other.pseudo_depth;
        self.semantic += other.semantic;
    }
}

/// Pairwise summation; fixed order regardless of thread count.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Mean |pred − target| over pixels in `mask` where the prediction is valid.
pub fn masked_l1(pred: &DepthImage, target: &DepthImage, mask: &[bool]) -> Result<MaskedMean> {
    let n = pred.width * pred.height;
    if (pred.width, pred.height) != (target.width, target.height) || mask.len() != n {
        return Err(Error::invalid(format!(
            "masked_l1 shape mismatch: pred {}x{}, target {}x{}, mask {}",
            pred.width,
            pred.height,
            target.width,
            target.height,
            mask.len()
        )));
    }
    let terms: Vec<f64> = (0..n)
        .filter(|&i| mask[i] && pred.valid[i])
        .map(|i| (pred.depth[i] - target.depth[i]).abs())
        .collect();
    Ok(mean_of(&terms))
}

fn mean_of(terms: &[f64]) -> MaskedMean {
    if terms.is_empty() {
        MaskedMean { value: 0.0, count: 0 }
    } else {
        MaskedMean {
            value: pairwise_sum(terms) / terms.len() as f64,
            count: terms.len(),
        }
    }
}

pub(crate) fn log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[label] - lse
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean `−log softmax(logits)[label]` over labelled pixels the renderer
/// marks valid.
pub fn masked_cross_entropy(pred: &SemanticImage, labels: &LabelImage) -> Result<MaskedMean> {
    let n = pred.width * pred.height;
    if (pred.width, pred.height) != (labels.width, labels.height) {
        return Err(Error::invalid(format!(
            "cross-entropy shape mismatch: pred {}x{}, labels {}x{}",
            pred.width, pred.height, labels.width, labels.height
        )));
    }
    let mut terms = Vec::new();
    for i in 0..n {
        if !labels.valid[i] {
            continue;
        }
        let label = labels.labels[i];
        if label >= pred.class_count {
            return Err(Error::invalid(format!(
                "label {label} out of range for {} classes",
                pred.class_count
            )));
        }
        if pred.is_valid(i) {
            terms.push(-log_softmax_at(pred.pixel(i), label));
        }
    }
    Ok(mean_of(&terms))
}

/// `ω₁ L_d + ω₂ L_pd + ω₃ L_sem` on one rendered view.
pub fn stage1_loss(
    depth: &DepthImage,
    sem: &SemanticImage,
    targets: &ReconTargets,
    weights: &LossWeights,
) -> Result<Stage1Loss> {
    targets.check_shape(depth.width, depth.height)?;
    let ld = masked_l1(depth, &targets.sparse_depth, &targets.sparse_depth.valid)?;
    let lpd = masked_l1(depth, &targets.dense_depth, &targets.dense_depth.valid)?;
    let lsem = masked_cross_entropy(sem, &targets.labels)?;
    Ok(Stage1Loss::from_parts(ld.value, lpd.value, lsem.value, weights))
}

/// Per-pixel gradient of [`stage1_loss`] w.r.t. rendered depth and logits.
pub(crate) struct Upstream {
    pub depth: Vec<f64>,
    pub logits: Vec<f64>,
}

pub(crate) fn stage1_upstream(
    depth: &DepthImage,
    sem: &SemanticImage,
    targets: &ReconTargets,
    weights: &LossWeights,
) -> Upstream {
    let n = depth.width * depth.height;
    let c = sem.class_count;
    let count = |t: &DepthImage| (0..n).filter(|&i| t.valid[i] && depth.valid[i]).count();
    let nd = count(&targets.sparse_depth);
    let npd = count(&targets.dense_depth);
    let nsem = (0..n)
        .filter(|&i| targets.labels.valid[i] && sem.is_valid(i))
        .count();
    let mut up = Upstream {
        depth: vec![0.0; n],
        logits: vec![0.0; n * c],
    };
    for i in 0..n {
        if !depth.valid[i] {
            continue;
        }
        let mut g = 0.0;
        if targets.sparse_depth.valid[i] {
            g += weights.depth * sign(depth.depth[i] - targets.sparse_depth.depth[i]) / nd as f64;
        }
        if targets.dense_depth.valid[i] {
            g += weights.pseudo_depth * sign(depth.depth[i] - targets.dense_depth.depth[i])
                / npd as f64;
        }
        up.depth[i] = g;
    }
    for i in 0..n {
        if !(targets.labels.valid[i] && sem.is_valid(i)) {
            continue;
        }
        let p = softmax(sem.pixel(i));
        let label = targets.labels.labels[i];
        for (k, pk) in p.iter().enumerate() {
            let onehot = if k == label { 1.0 } else { 0.0 };
            up.logits[i * c + k] = weights.semantic * (pk - onehot) / nsem as f64;
        }
    }
    up
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
