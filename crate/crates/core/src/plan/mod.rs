//! Ego-planning world model.
//!
//! Scene queries are pooled from BEV patches and refined by self-attention;
//! learned waypoint queries cross-attend to them and an affine head emits
//! the trajectory. The trajectory conditions the scene queries through a
//! motion-aware layer norm, a second self-attention stack predicts the next
//! queries, and these are fused back into the current BEV as a residual.

mod io;

pub use io::{read_plnw, write_plnw};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GroupedResidual, Mat, Tape, Var};
use crate::bev::{bev_l2_loss, rasterize_bev, BevGrid, BevSpec};
use crate::error::{Error, Result};
use crate::metrics::{l2_error, Trajectory};
use crate::optim::{adam_update, AdamConfig, OptimState};
use crate::synth::{ego_waypoints, generate_scene, oracle_gaussians, PerceptionOptions, SceneKnobs, SceneSpec};

pub const LN_EPS: f64 = 1e-5;
/// Scale of the initial waypoint-query draw.
pub const WAYPOINT_INIT_SCALE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub query_dim: usize,
    pub patches_per_side: usize,
    pub horizon: usize,
    pub ff_hidden: usize,
    pub scene_layers: usize,
    pub waypoint_layers: usize,
    pub future_layers: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            query_dim: 32,
            patches_per_side: 4,
            horizon: 6,
            ff_hidden: 64,
            scene_layers: 2,
            waypoint_layers: 2,
            future_layers: 2,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_dim == 0 || self.patches_per_side == 0 || self.horizon == 0 || self.ff_hidden == 0 {
            return Err(Error::invalid("planner widths, patch count and horizon must be positive"));
        }
        Ok(())
    }
}

/// `N_q × D_q` queries, each tied to the BEV patch whose lowest cell is
/// `patch_origins[i]` and which spans `patch_size` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub queries: Mat,
    pub patch_origins: Vec<(usize, usize)>,
    pub patch_size: (usize, usize),
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.queries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.nrows() == 0
    }

    fn with_queries(&self, queries: Mat) -> QuerySet {
        QuerySet { queries, patch_origins: self.patch_origins.clone(), patch_size: self.patch_size }
    }
}

/// `y = x·W + b` on row vectors; `W` is `in × out`, `b` is `1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T = Mat> {
    pub weight: T,
    pub bias: T,
}

/// Pre-norm single-head attention followed by a ReLU feed-forward, both
/// residual. The same norm is applied to queries and context.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock<T = Mat> {
    pub norm1_gain: T,
    pub norm1_bias: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub norm2_gain: T,
    pub norm2_bias: T,
    pub ff1: Affine<T>,
    pub ff2: Affine<T>,
}

/// Motion-aware layer norm: trajectory-conditioned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Mln<T = Mat> {
    pub gamma: Affine<T>,
    pub beta: Affine<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Planner<T = Mat> {
    pub config: PlannerConfig,
    pub input_dim: usize,
    pub proj: Affine<T>,
    pub scene_blocks: Vec<AttentionBlock<T>>,
    pub waypoints: T,
    pub waypoint_blocks: Vec<AttentionBlock<T>>,
    pub head: Affine<T>,
    pub mln: Mln<T>,
    pub future_blocks: Vec<AttentionBlock<T>>,
    pub unproj: Affine<T>,
}

type Visit<'a, T, U> = dyn FnMut(String, &T) -> U + 'a;

impl<T> Affine<T> {
    fn map<U>(&self, name: &str, f: &mut Visit<T, U>) -> Affine<U> {
        Affine { weight: f(format!("{name}.weight"), &self.weight), bias: f(format!("{name}.bias"), &self.bias) }
    }
}

impl<T> AttentionBlock<T> {
    fn map<U>(&self, name: &str, f: &mut Visit<T, U>) -> AttentionBlock<U> {
        AttentionBlock {
            norm1_gain: f(format!("{name}.norm1.gain"), &self.norm1_gain),
            norm1_bias: f(format!("{name}.norm1.bias"), &self.norm1_bias),
            wq: f(format!("{name}.wq"), &self.wq),
            wk: f(format!("{name}.wk"), &self.wk),
            wv: f(format!("{name}.wv"), &self.wv),
            wo: f(format!("{name}.wo"), &self.wo),
            norm2_gain: f(format!("{name}.norm2.gain"), &self.norm2_gain),
            norm2_bias: f(format!("{name}.norm2.bias"), &self.norm2_bias),
            ff1: self.ff1.map(&format!("{name}.ff1"), f),
            ff2: self.ff2.map(&format!("{name}.ff2"), f),
        }
    }
}

impl<T> Mln<T> {
    fn map<U>(&self, name: &str, f: &mut Visit<T, U>) -> Mln<U> {
        Mln { gamma: self.gamma.map(&format!("{name}.gamma"), f), beta: self.beta.map(&format!("{name}.beta"), f) }
    }
}

impl<T> Planner<T> {
    /// Applies `f` to every tensor in a fixed order.
    pub fn map<U>(&self, f: &mut Visit<T, U>) -> Planner<U> {
        let blocks = |bs: &[AttentionBlock<T>], name: &str, f: &mut Visit<T, U>| {
            bs.iter().enumerate().map(|(i, b)| b.map(&format!("{name}.{i}"), f)).collect()
        };
        Planner {
            config: self.config,
            input_dim: self.input_dim,
            proj: self.proj.map("proj", f),
            scene_blocks: blocks(&self.scene_blocks, "scene", f),
            waypoints: f("waypoints".into(), &self.waypoints),
            waypoint_blocks: blocks(&self.waypoint_blocks, "waypoint", f),
            head: self.head.map("head", f),
            mln: self.mln.map("mln", f),
            future_blocks: blocks(&self.future_blocks, "future", f),
            unproj: self.unproj.map("unproj", f),
        }
    }
}

fn normal(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| { let z: f64 = StandardNormal.sample(rng); sd * z })
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Affine { weight: Mat::zeros(input, output), bias: Mat::zeros(1, output) }
    }

    /// Weights from N(0, 1/fan_in), zero bias.
    pub fn random(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Affine { weight: normal(input, output, 1.0 / (input as f64).sqrt(), rng), bias: Mat::zeros(1, output) }
    }

    fn check(&self, input: usize, what: &str) -> Result<()> {
        if self.weight.nrows() != input || self.bias.shape() != (1, self.weight.ncols()) {
            return Err(Error::invalid(format!(
                "{what}: affine map is {}→{} with bias {:?}, input width is {input}",
                self.weight.nrows(),
                self.weight.ncols(),
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

impl AttentionBlock {
    pub fn random(dim: usize, ff_hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let sd = 1.0 / (dim as f64).sqrt();
        AttentionBlock {
            norm1_gain: Mat::from_element(1, dim, 1.0),
            norm1_bias: Mat::zeros(1, dim),
            wq: normal(dim, dim, sd, rng),
            wk: normal(dim, dim, sd, rng),
            wv: normal(dim, dim, sd, rng),
            wo: normal(dim, dim, sd, rng),
            norm2_gain: Mat::from_element(1, dim, 1.0),
            norm2_bias: Mat::zeros(1, dim),
            ff1: Affine::random(dim, ff_hidden, rng),
            ff2: Affine::random(ff_hidden, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    fn check(&self, dim: usize) -> Result<()> {
        let d = self.dim();
        let square = [&self.wq, &self.wk, &self.wv, &self.wo].iter().all(|w| w.shape() == (d, d));
        let rows = [&self.norm1_gain, &self.norm1_bias, &self.norm2_gain, &self.norm2_bias].iter().all(|r| r.shape() == (1, d));
        if !square || !rows || d != dim {
            return Err(Error::invalid(format!("attention block of width {d} applied to width {dim}")));
        }
        self.ff1.check(d, "feed-forward")?;
        self.ff2.check(self.ff1.weight.ncols(), "feed-forward")?;
        if self.ff2.weight.ncols() != d {
            return Err(Error::invalid("feed-forward output width differs from block width"));
        }
        Ok(())
    }
}

impl Planner {
    pub fn new(config: PlannerConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::invalid("planner input width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.query_dim;
        let blocks = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| AttentionBlock::random(d, config.ff_hidden, rng)).collect();
        let proj = Affine::random(input_dim, d, &mut rng);
        let scene_blocks = blocks(config.scene_layers, &mut rng);
        let waypoints = normal(config.horizon, d, WAYPOINT_INIT_SCALE, &mut rng);
        let waypoint_blocks = blocks(config.waypoint_layers, &mut rng);
        let head = Affine::random(d, 2, &mut rng);
        let mln = Mln { gamma: Affine::random(2 * config.horizon, d, &mut rng), beta: Affine::random(2 * config.horizon, d, &mut rng) };
        let future_blocks = blocks(config.future_layers, &mut rng);
        let unproj = Affine::random(d, input_dim, &mut rng);
        Ok(Planner { config, input_dim, proj, scene_blocks, waypoints, waypoint_blocks, head, mln, future_blocks, unproj })
    }

    /// Every tensor with its name, in serialization order.
    pub fn tensors(&self) -> Vec<(String, Mat)> {
        let mut out = Vec::new();
        self.map(&mut |name, m: &Mat| out.push((name, m.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, m: &Mat| n += m.len());
        n
    }

    /// All parameters concatenated, each tensor column-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.map(&mut |_, m: &Mat| out.extend_from_slice(m.as_slice()));
        out
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Planner> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(format!("planner needs {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut off = 0;
        Ok(self.map(&mut |_, m: &Mat| {
            let out = Mat::from_column_slice(m.nrows(), m.ncols(), &flat[off..off + m.len()]);
            off += m.len();
            out
        }))
    }

    fn leaves(&self, t: &mut Tape) -> Planner<Var> {
        self.map(&mut |_, m: &Mat| t.leaf(m.clone()))
    }

    /// Runs the full model on a BEV grid.
    pub fn forward(&self, bev: &BevGrid) -> Result<PlanOutput> {
        let input = PlanInput::new(bev, self.config.patches_per_side)?;
        self.check_input(&input)?;
        let mut t = Tape::new();
        let p = self.leaves(&mut t);
        let g = graph(&mut t, &p, &input);
        let queries = QuerySet {
            queries: t.value(g.next_queries).clone(),
            patch_origins: input.origins.clone(),
            patch_size: input.patch_size,
        };
        let u = t.value(g.residual);
        let mut future_bev = bev.clone();
        let ch = bev.channels();
        for (cell, p) in input.cell_patch.iter().enumerate() {
            if let Some(q) = *p {
                for c in 0..ch {
                    future_bev.features[cell * ch + c] += u[(q, c)];
                }
            }
        }
        Ok(PlanOutput { trajectory: to_trajectory(t.value(g.traj)), next_queries: queries, future_bev })
    }

    fn check_input(&self, input: &PlanInput) -> Result<()> {
        if input.pooled.ncols() != self.input_dim {
            return Err(Error::invalid(format!(
                "planner expects {} BEV channels, grid has {}",
                self.input_dim,
                input.pooled.ncols()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanOutput {
    pub trajectory: Trajectory,
    pub next_queries: QuerySet,
    pub future_bev: BevGrid,
}

fn to_trajectory(m: &Mat) -> Trajectory {
    Trajectory::new(m.row_iter().map(|r| [r[0], r[1]]).collect())
}

fn trajectory_matrix(traj: &Trajectory) -> Mat {
    Mat::from_fn(traj.len(), 2, |r, c| traj.waypoints[r][c])
}

fn affine_var(t: &mut Tape, x: Var, a: &Affine<Var>) -> Var {
    let y = t.matmul(x, a.weight);
    t.add_row(y, a.bias)
}

fn norm_var(t: &mut Tape, x: Var, gain: Var, bias: Var) -> Var {
    let n = t.layer_norm_rows(x, LN_EPS);
    let s = t.mul_row(n, gain);
    t.add_row(s, bias)
}

/// Attention weights and block output; `ctx = None` is self-attention.
fn block_var(t: &mut Tape, b: &AttentionBlock<Var>, x: Var, ctx: Option<Var>) -> (Var, Var) {
    let xn = norm_var(t, x, b.norm1_gain, b.norm1_bias);
    let cn = match ctx {
        Some(c) => norm_var(t, c, b.norm1_gain, b.norm1_bias),
        None => xn,
    };
    let d = t.value(b.wq).nrows() as f64;
    let q = t.matmul(xn, b.wq);
    let k = t.matmul(cn, b.wk);
    let v = t.matmul(cn, b.wv);
    let s = t.matmul_t(q, k);
    let s = t.scale(s, 1.0 / d.sqrt());
    let a = t.softmax_rows(s);
    let h = t.matmul(a, v);
    let h = t.matmul(h, b.wo);
    let x1 = t.add(x, h);
    let n2 = norm_var(t, x1, b.norm2_gain, b.norm2_bias);
    let f = affine_var(t, n2, &b.ff1);
    let f = t.relu(f);
    let f = affine_var(t, f, &b.ff2);
    (a, t.add(x1, f))
}

fn mln_var(t: &mut Tape, m: &Mln<Var>, queries: Var, traj: Var) -> Var {
    let flat = t.flatten(traj);
    let gamma = affine_var(t, flat, &m.gamma);
    let beta = affine_var(t, flat, &m.beta);
    let n = t.layer_norm_rows(queries, LN_EPS);
    let scaled = t.mul_row(n, gamma);
    let y = t.add(n, scaled);
    t.add_row(y, beta)
}

/// BEV pooled per patch, with the patch of every cell.
#[derive(Clone, Debug)]
struct PlanInput {
    pooled: Mat,
    origins: Vec<(usize, usize)>,
    patch_size: (usize, usize),
    cell_patch: Vec<Option<usize>>,
}

impl PlanInput {
    fn new(bev: &BevGrid, n: usize) -> Result<Self> {
        let (pooled, origins, patch_size) = pool_patches(bev, n)?;
        let cell_patch = cell_patches(&bev.spec, &origins, patch_size)?;
        Ok(PlanInput { pooled, origins, patch_size, cell_patch })
    }
}

struct Graph {
    traj: Var,
    next_queries: Var,
    /// Per-query BEV residual, `N_q × channels`.
    residual: Var,
}

fn graph(t: &mut Tape, p: &Planner<Var>, input: &PlanInput) -> Graph {
    let pooled = t.leaf(input.pooled.clone());
    let mut q = affine_var(t, pooled, &p.proj);
    for b in &p.scene_blocks {
        q = block_var(t, b, q, None).1;
    }
    let mut w = p.waypoints;
    for b in &p.waypoint_blocks {
        w = block_var(t, b, w, Some(q)).1;
    }
    let traj = affine_var(t, w, &p.head);
    let mut c = mln_var(t, &p.mln, q, traj);
    for b in &p.future_blocks {
        c = block_var(t, b, c, None).1;
    }
    let residual = affine_var(t, c, &p.unproj);
    Graph { traj, next_queries: c, residual }
}

/// Mean feature of each patch, patches in row-major order (`py·n + px`).
pub fn pool_patches(bev: &BevGrid, n: usize) -> Result<(Mat, Vec<(usize, usize)>, (usize, usize))> {
    let spec = &bev.spec;
    if n == 0 || spec.nx % n != 0 || spec.ny % n != 0 {
        return Err(Error::invalid(format!("a {}×{} grid does not split into {n}×{n} patches", spec.nx, spec.ny)));
    }
    let (sx, sy) = (spec.nx / n, spec.ny / n);
    let ch = bev.channels();
    let mut pooled = Mat::zeros(n * n, ch);
    let mut origins = Vec::with_capacity(n * n);
    for py in 0..n {
        for px in 0..n {
            let row = py * n + px;
            for iy in py * sy..(py + 1) * sy {
                for ix in px * sx..(px + 1) * sx {
                    for (c, f) in bev.cell(ix, iy).iter().enumerate() {
                        pooled[(row, c)] += f;
                    }
                }
            }
            origins.push((px * sx, py * sy));
        }
    }
    pooled /= (sx * sy) as f64;
    Ok((pooled, origins, (sx, sy)))
}

fn cell_patches(spec: &BevSpec, origins: &[(usize, usize)], size: (usize, usize)) -> Result<Vec<Option<usize>>> {
    let mut out = vec![None; spec.cell_count()];
    for (q, &(ox, oy)) in origins.iter().enumerate() {
        if ox + size.0 > spec.nx || oy + size.1 > spec.ny || size.0 == 0 || size.1 == 0 {
            return Err(Error::invalid(format!("patch at ({ox}, {oy}) of size {size:?} leaves the grid")));
        }
        for iy in oy..oy + size.1 {
            for ix in ox..ox + size.0 {
                out[iy * spec.nx + ix] = Some(q);
            }
        }
    }
    Ok(out)
}

/// Scene queries: the affine projection of each patch's mean feature.
pub fn extract_scene_queries(bev: &BevGrid, patches_per_side: usize, proj: &Affine) -> Result<QuerySet> {
    let (pooled, patch_origins, patch_size) = pool_patches(bev, patches_per_side)?;
    proj.check(pooled.ncols(), "query projection")?;
    let mut t = Tape::new();
    let x = t.leaf(pooled);
    let a = proj.map("", &mut |_, m: &Mat| t.leaf(m.clone()));
    let y = affine_var(&mut t, x, &a);
    Ok(QuerySet { queries: t.value(y).clone(), patch_origins, patch_size })
}

fn check_rows(m: &Mat, dim: usize, what: &str) -> Result<()> {
    if m.ncols() != dim || m.nrows() == 0 {
        return Err(Error::invalid(format!("{what} is {}×{}, expected width {dim}", m.nrows(), m.ncols())));
    }
    Ok(())
}

fn run_block(block: &AttentionBlock, queries: &Mat, context: &Mat) -> Result<(Mat, Mat)> {
    block.check(queries.ncols())?;
    check_rows(queries, block.dim(), "queries")?;
    check_rows(context, block.dim(), "context")?;
    let mut t = Tape::new();
    let b = block.map("", &mut |_, m: &Mat| t.leaf(m.clone()));
    let x = t.leaf(queries.clone());
    let c = t.leaf(context.clone());
    let (a, y) = block_var(&mut t, &b, x, Some(c));
    Ok((t.value(a).clone(), t.value(y).clone()))
}

/// One attention block; self-attention is `context == queries`.
pub fn attention_block(block: &AttentionBlock, queries: &Mat, context: &Mat) -> Result<Mat> {
    Ok(run_block(block, queries, context)?.1)
}

/// The `N_queries × N_context` softmax weights of a block.
pub fn attention_weights(block: &AttentionBlock, queries: &Mat, context: &Mat) -> Result<Mat> {
    Ok(run_block(block, queries, context)?.0)
}

/// Waypoint queries cross-attend to the scene through `blocks`; each row
/// then maps through `head` to one waypoint.
pub fn predict_trajectory(waypoints: &Mat, scene: &QuerySet, blocks: &[AttentionBlock], head: &Affine) -> Result<Trajectory> {
    let mut w = waypoints.clone();
    for b in blocks {
        w = attention_block(b, &w, &scene.queries)?;
    }
    head.check(w.ncols(), "trajectory head")?;
    if head.weight.ncols() != 2 {
        return Err(Error::invalid("trajectory head must output 2 values"));
    }
    Ok(to_trajectory(&(w * &head.weight + Mat::from_fn(waypoints.nrows(), 2, |_, c| head.bias[(0, c)]))))
}

/// `LN(q)·(1 + γ(traj)) + β(traj)` per query, with the trajectory flattened
/// as `x0, y0, x1, y1, …`.
pub fn mln_condition(scene: &QuerySet, traj: &Trajectory, mln: &Mln) -> Result<QuerySet> {
    let flat_len = 2 * traj.len();
    mln.gamma.check(flat_len, "MLN scale")?;
    mln.beta.check(flat_len, "MLN shift")?;
    for a in [&mln.gamma, &mln.beta] {
        if a.weight.ncols() != scene.queries.ncols() {
            return Err(Error::invalid("MLN output width differs from query width"));
        }
    }
    let mut t = Tape::new();
    let m = mln.map("", &mut |_, x: &Mat| t.leaf(x.clone()));
    let q = t.leaf(scene.queries.clone());
    let tr = t.leaf(trajectory_matrix(traj));
    let y = mln_var(&mut t, &m, q, tr);
    Ok(scene.with_queries(t.value(y).clone()))
}

pub fn predict_next_queries(scene: &QuerySet, traj: &Trajectory, mln: &Mln, blocks: &[AttentionBlock]) -> Result<QuerySet> {
    let mut q = mln_condition(scene, traj, mln)?.queries;
    for b in blocks {
        q = attention_block(b, &q, &q)?;
    }
    Ok(scene.with_queries(q))
}

/// Residual fusion: every cell of a query's patch gains `unproj(query)`;
/// weights are copied from the current grid.
pub fn fuse_future_bev(next: &QuerySet, current: &BevGrid, unproj: &Affine) -> Result<BevGrid> {
    unproj.check(next.queries.ncols(), "fusion map")?;
    let ch = current.channels();
    if unproj.weight.ncols() != ch {
        return Err(Error::invalid(format!("fusion map outputs {} channels, grid has {ch}", unproj.weight.ncols())));
    }
    if next.patch_origins.len() != next.len() {
        return Err(Error::invalid("one patch origin per query required"));
    }
    let patches = cell_patches(&current.spec, &next.patch_origins, next.patch_size)?;
    let u = &next.queries * &unproj.weight;
    let mut out = current.clone();
    for (cell, p) in patches.iter().enumerate() {
        if let Some(q) = *p {
            for c in 0..ch {
                out.features[cell * ch + c] += u[(q, c)] + unproj.bias[(0, c)];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PlanLoss {
    pub total: f64,
    pub reg: f64,
    pub bev: f64,
}

/// `L_reg` is the mean absolute waypoint error per coordinate, `L_bev` the
/// BEV mean squared error; the total is their unweighted sum.
pub fn plan_loss(pred: &Trajectory, gt: &Trajectory, bev_pred: &BevGrid, bev_target: &BevGrid) -> Result<PlanLoss> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(format!("trajectory lengths differ or are zero: {} vs {}", pred.len(), gt.len())));
    }
    let reg = pred.waypoints.iter().zip(&gt.waypoints).map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs()).sum::<f64>()
        / (2 * pred.len()) as f64;
    let bev = bev_l2_loss(bev_pred, bev_target)?;
    Ok(PlanLoss { total: reg + bev, reg, bev })
}

/// One training example: the BEV at `t`, the reference BEV at `t+1` and the
/// ground-truth ego waypoints.
#[derive(Clone, Debug)]
pub struct PlanSample {
    pub bev: BevGrid,
    pub target_bev: BevGrid,
    pub gt: Trajectory,
}

pub fn plan_samples(
    scenes: &[SceneSpec],
    t: usize,
    horizon: usize,
    perception: &PerceptionOptions,
    spec: &BevSpec,
) -> Result<Vec<PlanSample>> {
    scenes
        .iter()
        .map(|s| {
            Ok(PlanSample {
                bev: rasterize_bev(&oracle_gaussians(s, t, perception)?.set, spec)?,
                target_bev: rasterize_bev(&oracle_gaussians(s, t + 1, perception)?.set, spec)?,
                gt: Trajectory::new(ego_waypoints(s, t, horizon)?),
            })
        })
        .collect()
}

/// `n` generated scenes with straight constant-speed ego motion, speeds
/// spread evenly over `[min_speed, max_speed]`, each long enough for one
/// planning horizon after frame 0 plus one.
pub fn constant_velocity_scenes(n: usize, seed: u64, horizon: usize, min_speed: f64, max_speed: f64) -> Result<Vec<SceneSpec>> {
    (0..n)
        .map(|i| {
            let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let knobs = SceneKnobs {
                ego_speed: min_speed + f * (max_speed - min_speed),
                ego_yaw_rate: 0.0,
                frames: horizon + 2,
                ..SceneKnobs::default()
            };
            generate_scene(seed.wrapping_add(i as u64), &knobs)
        })
        .collect()
}

/// Precomputed inputs for the training graph.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    input: PlanInput,
    /// Statistics of `current − target` grouped by patch.
    bev_stats: GroupedResidual,
    gt: Mat,
}

impl PreparedSample {
    pub fn new(sample: &PlanSample, config: &PlannerConfig) -> Result<Self> {
        if !sample.bev.spec.compatible(&sample.target_bev.spec) || sample.bev.channels() != sample.target_bev.channels() {
            return Err(Error::invalid("current and target BEV grids differ in layout"));
        }
        if sample.gt.len() != config.horizon {
            return Err(Error::invalid(format!("ground truth has {} waypoints, horizon is {}", sample.gt.len(), config.horizon)));
        }
        let (cur, tgt) = (&sample.bev, &sample.target_bev);
        let input = PlanInput::new(cur, config.patches_per_side)?;
        let diff: Vec<f64> = cur.features.iter().zip(&tgt.features).map(|(a, b)| a - b).collect();
        let diff = Mat::from_row_slice(cur.spec.cell_count(), cur.channels(), &diff);
        let bev_stats = GroupedResidual::new(&diff, &input.cell_patch, input.origins.len());
        Ok(PreparedSample { input, bev_stats, gt: trajectory_matrix(&sample.gt) })
    }
}

/// Loss on one sample, the tape signature and optionally the flat gradient.
fn loss_graph(planner: &Planner, sample: &PreparedSample, want_grad: bool) -> Result<(PlanLoss, u64, Option<Vec<f64>>)> {
    planner.check_input(&sample.input)?;
    let mut t = Tape::new();
    let p = planner.leaves(&mut t);
    let g = graph(&mut t, &p, &sample.input);
    let reg = t.l1_mean(g.traj, sample.gt.clone());
    let bev = t.grouped_mse(g.residual, sample.bev_stats.clone());
    let total = t.add(reg, bev);
    let loss = PlanLoss { total: t.scalar(total), reg: t.scalar(reg), bev: t.scalar(bev) };
    let grad = want_grad.then(|| {
        let grads = t.backward(total);
        let mut flat = Vec::with_capacity(planner.param_count());
        p.map(&mut |_, v: &Var| match &grads[v.index()] {
            Some(g) => flat.extend_from_slice(g.as_slice()),
            None => flat.extend(std::iter::repeat_n(0.0, t.value(*v).len())),
        });
        flat
    });
    Ok((loss, t.signature(), grad))
}

pub fn plan_sample_loss(planner: &Planner, sample: &PreparedSample) -> Result<(PlanLoss, u64)> {
    let (l, s, _) = loss_graph(planner, sample, false)?;
    Ok((l, s))
}

/// Loss and gradient w.r.t. all parameters, laid out as [`Planner::to_flat`].
pub fn plan_loss_and_gradients(planner: &Planner, sample: &PreparedSample) -> Result<(PlanLoss, Vec<f64>)> {
    let (l, _, g) = loss_graph(planner, sample, true)?;
    Ok((l, g.expect("gradient requested")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanTrainOptions {
    pub steps: usize,
    pub adam: AdamConfig,
}

impl Default for PlanTrainOptions {
    fn default() -> Self {
        PlanTrainOptions { steps: 2000, adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() } }
    }
}

/// Adam over the mean loss of all samples; the trace holds the loss before
/// every step.
pub fn train_planner(planner: &Planner, samples: &[PlanSample], opts: &PlanTrainOptions) -> Result<(Planner, Vec<PlanLoss>)> {
    if samples.is_empty() {
        return Err(Error::invalid("planner training needs at least one sample"));
    }
    let prepared = samples.iter().map(|s| PreparedSample::new(s, &planner.config)).collect::<Result<Vec<_>>>()?;
    let mut params = planner.to_flat();
    let mut state = OptimState::new(params.len(), opts.adam);
    let mut trace = Vec::with_capacity(opts.steps);
    let k = 1.0 / prepared.len() as f64;
    let mut current = planner.clone();
    for _ in 0..opts.steps {
        let mut loss = PlanLoss::default();
        let mut grad = vec![0.0; params.len()];
        // Per-sample passes in parallel; the sum runs in sample order.
        let per_sample = prepared.par_iter().map(|s| plan_loss_and_gradients(&current, s)).collect::<Result<Vec<_>>>()?;
        for (l, g) in per_sample {
            loss.total += k * l.total;
            loss.reg += k * l.reg;
            loss.bev += k * l.bev;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += k * b);
        }
        trace.push(loss);
        adam_update(&mut params, &grad, &mut state)?;
        current = current.from_flat(&params)?;
    }
    Ok((current, trace))
}

/// Mean waypoint L2 error over samples.
pub fn average_l2(planner: &Planner, samples: &[PlanSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let mut sum = 0.0;
    for s in samples {
        sum += l2_error(&planner.forward(&s.bev)?.trajectory, &s.gt)?;
    }
    Ok(sum / samples.len() as f64)
}

#[cfg(test)]
mod tests;
