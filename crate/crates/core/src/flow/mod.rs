//! Gaussian-flow world model.
//!
//! A small MLP maps each Gaussian's feature to a displacement; the displaced
//! set is carried into the next ego frame and rasterized to BEV. Training
//! renders the propagated set in the next frame and compares its BEV against
//! a frozen reference.

mod io;

pub use io::{read_flwh, write_flwh};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::{bev_l2_gradient, bev_l2_loss, rasterize_bev, rasterize_bev_mean_gradients, BevGrid, BevSpec};
use crate::error::{Error, Result};
use crate::geometry::{transform_gaussian_set, GaussianSet, Pose};
use crate::occupancy::Refiner;
use crate::optim::{adam_update, scene_views, AdamConfig, OptimState, View};
use crate::recon::{LossWeights, Stage1Loss};
use crate::splat::render_with_gradients;
use crate::synth::{next_from_current, oracle_gaussians, PerceptionOptions, SceneSpec};

pub const DEFAULT_HIDDEN: usize = 32;

/// Two affine layers with a ReLU between, `D → H → 3`. Parameters are stored
/// flat as `w1 (H×D, row-major), b1 (H), w2 (3×H), b2 (3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowHead {
    input_dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

impl FlowHead {
    pub fn param_count(input_dim: usize, hidden: usize) -> usize {
        hidden * input_dim + hidden + 3 * hidden + 3
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        FlowHead { input_dim, hidden, params: vec![0.0; Self::param_count(input_dim, hidden)] }
    }

    /// Weights drawn from N(0, 1/fan_in), zero biases.
    pub fn random(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut head = Self::zeros(input_dim, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("positive sd");
        let n2 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("positive sd");
        let (w1, _, w2, _) = head.split_mut();
        w1.iter_mut().for_each(|w| *w = n1.sample(&mut rng));
        w2.iter_mut().for_each(|w| *w = n2.sample(&mut rng));
        head
    }

    pub fn from_params(input_dim: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != Self::param_count(input_dim, hidden) {
            return Err(Error::invalid(format!(
                "flow head {input_dim}→{hidden}→3 needs {} parameters, got {}",
                Self::param_count(input_dim, hidden),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("flow head parameters must be finite"));
        }
        Ok(FlowHead { input_dim, hidden, params })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.params.split_at(self.hidden * self.input_dim);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(3 * self.hidden);
        (w1, b1, w2, b2)
    }

    pub fn split_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64], &mut [f64]) {
        let (w1, rest) = self.params.split_at_mut(self.hidden * self.input_dim);
        let (b1, rest) = rest.split_at_mut(self.hidden);
        let (w2, b2) = rest.split_at_mut(3 * self.hidden);
        (w1, b1, w2, b2)
    }

    /// Hidden pre-activations and output for one feature vector.
    fn forward_cached(&self, f: &[f64]) -> (Vec<f64>, Vector3<f64>) {
        let (w1, b1, w2, b2) = self.split();
        let d = self.input_dim;
        let pre: Vec<f64> =
            (0..self.hidden).map(|j| b1[j] + (0..d).map(|i| w1[j * d + i] * f[i]).sum::<f64>()).collect();
        let mut out = Vector3::from_column_slice(b2);
        for r in 0..3 {
            for j in 0..self.hidden {
                out[r] += w2[r * self.hidden + j] * pre[j].max(0.0);
            }
        }
        (pre, out)
    }

    pub fn forward(&self, f: &[f64]) -> Result<Vector3<f64>> {
        if f.len() != self.input_dim {
            return Err(Error::invalid(format!("flow head expects width {}, got {}", self.input_dim, f.len())));
        }
        Ok(self.forward_cached(f).1)
    }

    /// Adds the parameter gradient for upstream `g` at input `f` to `acc`.
    fn backward_into(&self, f: &[f64], g: &Vector3<f64>, acc: &mut [f64]) {
        let (pre, _) = self.forward_cached(f);
        let (h, d) = (self.hidden, self.input_dim);
        let (_, _, w2, _) = self.split();
        let (o_w1, o_b1, o_w2, o_b2) = (0, h * d, h * d + h, h * d + h + 3 * h);
        for r in 0..3 {
            acc[o_b2 + r] += g[r];
            for j in 0..h {
                acc[o_w2 + r * h + j] += g[r] * pre[j].max(0.0);
            }
        }
        for j in 0..h {
            if pre[j] <= 0.0 {
                continue;
            }
            let gz = (0..3).map(|r| w2[r * h + j] * g[r]).sum::<f64>();
            acc[o_b1 + j] += gz;
            for i in 0..d {
                acc[o_w1 + j * d + i] += gz * f[i];
            }
        }
    }

    /// Which hidden units are active for each Gaussian; the ReLU kinks.
    pub fn activation_pattern(&self, set: &GaussianSet) -> Vec<bool> {
        set.iter().flat_map(|g| self.forward_cached(&g.feature).0.into_iter().map(|p| p > 0.0)).collect()
    }
}

/// Per-Gaussian displacement, aligned with set order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(pub Vec<Vector3<f64>>);

impl FlowField {
    pub fn zeros(n: usize) -> Self {
        FlowField(vec![Vector3::zeros(); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn predict_flow(head: &FlowHead, set: &GaussianSet) -> Result<FlowField> {
    if set.feature_dim() != head.input_dim {
        return Err(Error::invalid(format!(
            "flow head expects feature width {}, set has {}",
            head.input_dim,
            set.feature_dim()
        )));
    }
    Ok(FlowField(set.gaussians().par_iter().map(|g| head.forward_cached(&g.feature).1).collect()))
}

/// Adds each displacement to its Gaussian's mean.
pub fn apply_flow(set: &GaussianSet, flow: &FlowField) -> Result<GaussianSet> {
    if flow.len() != set.len() {
        return Err(Error::invalid(format!("flow has {} entries for {} Gaussians", flow.len(), set.len())));
    }
    let mut out = set.clone();
    for (g, d) in out.gaussians_mut().iter_mut().zip(&flow.0) {
        g.mean += d;
    }
    Ok(out)
}

/// `μ' = T(μ + Δμ)`; rotations compose with `T`, everything else is kept.
pub fn propagate_gaussians(set: &GaussianSet, flow: &FlowField, next_from_current: &Pose) -> Result<GaussianSet> {
    Ok(transform_gaussian_set(&apply_flow(set, flow)?, next_from_current))
}

pub fn predict_future_latent(
    set: &GaussianSet,
    head: &FlowHead,
    next_from_current: &Pose,
    spec: &BevSpec,
) -> Result<BevGrid> {
    let flow = predict_flow(head, set)?;
    rasterize_bev(&propagate_gaussians(set, &flow, next_from_current)?, spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Weights {
    pub recon: LossWeights,
    pub bev: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Stage2Weights { recon: LossWeights::default(), bev: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage2Loss {
    pub total: f64,
    pub render: Stage1Loss,
    pub bev: f64,
}

/// One training example: a set at `t`, the motion into `t+1`, views of
/// `t+1` posed in its ego frame, and the frozen reference BEV of `t+1`.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub set: GaussianSet,
    pub next_from_current: Pose,
    pub views: Vec<View>,
    pub target_bev: BevGrid,
}

fn stage2_parts(
    propagated: &GaussianSet,
    sample: &FlowSample,
    weights: &Stage2Weights,
) -> Result<(Stage2Loss, Vec<Vector3<f64>>)> {
    let mut render = Stage1Loss::default();
    let mut g_mean = vec![Vector3::zeros(); propagated.len()];
    for v in &sample.views {
        let (l, g) = render_with_gradients(propagated, &v.camera, &v.targets, &weights.recon)?;
        render.accumulate(&l);
        for (a, b) in g_mean.iter_mut().zip(&g.mean) {
            *a += b;
        }
    }
    let grid = rasterize_bev(propagated, &sample.target_bev.spec)?;
    let bev = bev_l2_loss(&grid, &sample.target_bev)?;
    if weights.bev != 0.0 {
        let up: Vec<f64> = bev_l2_gradient(&grid, &sample.target_bev)?.iter().map(|g| g * weights.bev).collect();
        for (a, b) in g_mean.iter_mut().zip(rasterize_bev_mean_gradients(propagated, &grid, &up)?) {
            *a += b;
        }
    }
    Ok((Stage2Loss { total: render.total + weights.bev * bev, render, bev }, g_mean))
}

/// Stage-two loss for a given flow: render loss of the propagated set in the
/// next frame plus `λ_bev` times the BEV error against the reference.
pub fn flow_stage2_loss_with_flow(sample: &FlowSample, flow: &FlowField, weights: &Stage2Weights) -> Result<Stage2Loss> {
    let propagated = propagate_gaussians(&sample.set, flow, &sample.next_from_current)?;
    Ok(stage2_parts(&propagated, sample, weights)?.0)
}

pub fn flow_stage2_loss(sample: &FlowSample, head: &FlowHead, weights: &Stage2Weights) -> Result<Stage2Loss> {
    flow_stage2_loss_with_flow(sample, &predict_flow(head, &sample.set)?, weights)
}

/// Loss and its gradient w.r.t. the flow head parameters.
pub fn flow_stage2_gradients(
    sample: &FlowSample,
    head: &FlowHead,
    weights: &Stage2Weights,
) -> Result<(Stage2Loss, Vec<f64>)> {
    let flow = predict_flow(head, &sample.set)?;
    let propagated = propagate_gaussians(&sample.set, &flow, &sample.next_from_current)?;
    let (loss, g_mean) = stage2_parts(&propagated, sample, weights)?;
    let rt = sample.next_from_current.rotation().transpose();
    let mut grad = vec![0.0; head.params.len()];
    for (g, gm) in sample.set.iter().zip(&g_mean) {
        head.backward_into(&g.feature, &(rt * gm), &mut grad);
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrainOptions {
    pub steps: usize,
    pub adam: AdamConfig,
    pub weights: Stage2Weights,
}

impl Default for FlowTrainOptions {
    fn default() -> Self {
        FlowTrainOptions { steps: 100, adam: AdamConfig::default(), weights: Stage2Weights::default() }
    }
}

/// Adam on the head over the summed loss of all samples; returns the trained
/// head and the loss before every step.
pub fn train_flow_head(head: &FlowHead, samples: &[FlowSample], opts: &FlowTrainOptions) -> Result<(FlowHead, Vec<Stage2Loss>)> {
    let mut head = head.clone();
    let mut state = OptimState::new(head.params.len(), opts.adam);
    let mut trace = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let mut total = Stage2Loss::default();
        let mut grad = vec![0.0; head.params.len()];
        for s in samples {
            let (l, g) = flow_stage2_gradients(s, &head, &opts.weights)?;
            total.total += l.total;
            total.bev += l.bev;
            total.render.accumulate(&l.render);
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        trace.push(total);
        adam_update(&mut head.params, &grad, &mut state)?;
    }
    Ok((head, trace))
}

/// Samples for frames `t` in `frames` (each needs `t+1`): oracle perception
/// at `t`, oracle views at `t+1` and the reference BEV of the oracle set at
/// `t+1`.
pub fn flow_samples(
    scene: &SceneSpec,
    frames: &[usize],
    perception: &PerceptionOptions,
    spec: &BevSpec,
    sparse_rate: f64,
) -> Result<Vec<FlowSample>> {
    frames
        .iter()
        .map(|&t| {
            let set = oracle_gaussians(scene, t, perception)?.set;
            let next = oracle_gaussians(scene, t + 1, perception)?.set;
            Ok(FlowSample {
                set,
                next_from_current: next_from_current(scene, t)?,
                views: scene_views(scene, &[t + 1], sparse_rate)?,
                target_bev: rasterize_bev(&next, spec)?,
            })
        })
        .collect()
}

/// Uses a flow head as an occupancy-forecast refiner: every mean moves by
/// the head's prediction.
#[derive(Clone, Debug)]
pub struct FlowRefiner(pub FlowHead);

impl Refiner for FlowRefiner {
    fn refine(&self, set: &mut GaussianSet) -> Result<()> {
        let flow = predict_flow(&self.0, set)?;
        *set = apply_flow(set, &flow)?;
        Ok(())
    }
}
