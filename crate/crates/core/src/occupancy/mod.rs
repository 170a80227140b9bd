//! Gaussian-to-occupancy splatting and autoregressive forecasting.
//!
//! A voxel centre `x` gets density `ρ(x) = Σ α_k G_k(x)` and class scores
//! `L(x) = Σ α_k G_k(x) c_k`, where `G_k` is the unnormalised Gaussian
//! truncated at 3σ. The voxel takes `argmax L` when `ρ ≥ τ` and is empty
//! otherwise.

mod io;

pub use io::{read_occ3, write_occ3, write_topdown_ppm};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{transform_gaussian_set, Gaussian, GaussianSet, Pose, Quaternion};

/// Label of an unoccupied voxel.
pub const EMPTY: u8 = 0;
pub const DEFAULT_TAU: f64 = 0.2;
const CUTOFF_M2: f64 = 9.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OccSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Number of labels including [`EMPTY`].
    pub class_count: usize,
}

impl Default for OccSpec {
    fn default() -> Self {
        OccSpec {
            x_min: -16.0,
            x_max: 16.0,
            y_min: -16.0,
            y_max: 16.0,
            z_min: -1.0,
            z_max: 5.4,
            nx: 32,
            ny: 32,
            nz: 8,
            class_count: 4,
        }
    }
}

impl OccSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = self.x_min < self.x_max && self.y_min < self.y_max && self.z_min < self.z_max;
        if !ordered || self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::invalid(format!("invalid occupancy spec {self:?}")));
        }
        if self.class_count == 0 || self.class_count > 256 {
            return Err(Error::invalid("occupancy class count must be in 1..=256"));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn voxel_size(&self) -> Vector3<f64> {
        Vector3::new(
            (self.x_max - self.x_min) / self.nx as f64,
            (self.y_max - self.y_min) / self.ny as f64,
            (self.z_max - self.z_min) / self.nz as f64,
        )
    }

    /// `x` slowest, `z` fastest.
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.ny + iy) * self.nz + iz
    }

    pub fn unravel(&self, i: usize) -> (usize, usize, usize) {
        (i / (self.ny * self.nz), (i / self.nz) % self.ny, i % self.nz)
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let s = self.voxel_size();
        Vector3::new(
            self.x_min + (ix as f64 + 0.5) * s.x,
            self.y_min + (iy as f64 + 0.5) * s.y,
            self.z_min + (iz as f64 + 0.5) * s.z,
        )
    }

    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<(usize, usize, usize)> {
        let s = self.voxel_size();
        let f = [
            ((p.x - self.x_min) / s.x).floor(),
            ((p.y - self.y_min) / s.y).floor(),
            ((p.z - self.z_min) / s.z).floor(),
        ];
        let n = [self.nx, self.ny, self.nz];
        if (0..3).any(|a| f[a] < 0.0 || f[a] >= n[a] as f64) {
            return None;
        }
        Some((f[0] as usize, f[1] as usize, f[2] as usize))
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (self.x_min..=self.x_max).contains(&p.x)
            && (self.y_min..=self.y_max).contains(&p.y)
            && (self.z_min..=self.z_max).contains(&p.z)
    }

    pub fn extent(&self) -> Vector3<f64> {
        Vector3::new(self.x_max - self.x_min, self.y_max - self.y_min, self.z_max - self.z_min)
    }

    pub fn volume(&self) -> f64 {
        self.extent().product()
    }

    /// Equal up to f32 storage precision.
    pub fn compatible(&self, other: &OccSpec) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + a.abs());
        self.nx == other.nx
            && self.ny == other.ny
            && self.nz == other.nz
            && self.class_count == other.class_count
            && close(self.x_min, other.x_min)
            && close(self.x_max, other.x_max)
            && close(self.y_min, other.y_min)
            && close(self.y_max, other.y_max)
            && close(self.z_min, other.z_min)
            && close(self.z_max, other.z_max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub spec: OccSpec,
    pub labels: Vec<u8>,
}

impl OccupancyGrid {
    pub fn empty(spec: OccSpec) -> Self {
        OccupancyGrid { labels: vec![EMPTY; spec.voxel_count()], spec }
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> u8 {
        self.labels[self.spec.index(ix, iy, iz)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, label: u8) {
        let i = self.spec.index(ix, iy, iz);
        self.labels[i] = label;
    }

    pub fn occupied_count(&self) -> usize {
        self.labels.iter().filter(|l| **l != EMPTY).count()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.labels.len() != self.spec.voxel_count() {
            return Err(Error::invalid("label count does not match occupancy spec"));
        }
        if self.labels.iter().any(|l| *l as usize >= self.spec.class_count) {
            return Err(Error::invalid("occupancy label out of range"));
        }
        Ok(())
    }
}

struct Kernel {
    mean: Vector3<f64>,
    inv: Matrix3<f64>,
    alpha: f64,
}

impl Kernel {
    fn new(g: &Gaussian) -> Self {
        let r = g.rotation().to_rotation_matrix();
        let s = g.scale();
        let inv_s2 = Matrix3::from_diagonal(&s.map(|v| 1.0 / (v * v)));
        Kernel { mean: g.mean, inv: r * inv_s2 * r.transpose(), alpha: g.opacity() }
    }

    fn weight(&self, x: &Vector3<f64>) -> Option<f64> {
        let d = x - self.mean;
        let m2 = d.dot(&(self.inv * d));
        (m2 <= CUTOFF_M2).then(|| self.alpha * (-0.5 * m2).exp())
    }
}

/// Voxel ranges a Gaussian's 3σ box can reach.
fn voxel_range(g: &Gaussian, spec: &OccSpec) -> Option<[(usize, usize); 3]> {
    let cov = g.covariance();
    let s = spec.voxel_size();
    let mins = [spec.x_min, spec.y_min, spec.z_min];
    let n = [spec.nx, spec.ny, spec.nz];
    let mut out = [(0, 0); 3];
    for a in 0..3 {
        let r = 3.0 * cov[(a, a)].sqrt();
        let lo = ((g.mean[a] - r - mins[a]) / s[a] - 0.5).ceil().max(0.0);
        let hi = ((g.mean[a] + r - mins[a]) / s[a] - 0.5).floor().min(n[a] as f64 - 1.0);
        if !(lo <= hi) {
            return None;
        }
        out[a] = (lo as usize, hi as usize);
    }
    Some(out)
}

/// Per-voxel density and class scores, accumulated in canonical Gaussian
/// order so the result does not depend on set order.
pub fn occupancy_fields(set: &GaussianSet, spec: &OccSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    let c = set.class_count();
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); spec.voxel_count()];
    let order = set.canonical_order();
    for &k in &order {
        let Some([rx, ry, rz]) = voxel_range(&set.gaussians()[k], spec) else { continue };
        for ix in rx.0..=rx.1 {
            for iy in ry.0..=ry.1 {
                for iz in rz.0..=rz.1 {
                    lists[spec.index(ix, iy, iz)].push(k as u32);
                }
            }
        }
    }
    let kernels: Vec<Kernel> = set.iter().map(Kernel::new).collect();
    let per_voxel: Vec<(f64, Vec<f64>)> = lists
        .par_iter()
        .enumerate()
        .map(|(i, list)| {
            let (ix, iy, iz) = spec.unravel(i);
            let x = spec.voxel_center(ix, iy, iz);
            let mut rho = 0.0;
            let mut scores = vec![0.0; c];
            for &k in list {
                if let Some(w) = kernels[k as usize].weight(&x) {
                    rho += w;
                    for (s, l) in scores.iter_mut().zip(&set.gaussians()[k as usize].logits) {
                        *s += w * l;
                    }
                }
            }
            (rho, scores)
        })
        .collect();
    let mut density = Vec::with_capacity(per_voxel.len());
    let mut scores = Vec::with_capacity(per_voxel.len() * c);
    for (r, s) in per_voxel {
        density.push(r);
        scores.extend(s);
    }
    Ok((density, scores))
}

pub fn splat_to_occupancy(set: &GaussianSet, spec: &OccSpec, tau: f64) -> Result<OccupancyGrid> {
    if set.class_count() > spec.class_count {
        return Err(Error::invalid(format!(
            "set has {} classes but occupancy spec allows {}",
            set.class_count(),
            spec.class_count
        )));
    }
    let (density, scores) = occupancy_fields(set, spec)?;
    let c = set.class_count();
    let mut grid = OccupancyGrid::empty(*spec);
    for (i, rho) in density.iter().enumerate() {
        if *rho >= tau && c > 0 {
            grid.labels[i] = crate::splat::argmax(&scores[i * c..(i + 1) * c]) as u8;
        }
    }
    Ok(grid)
}

/// Post-alignment correction applied to every Gaussian of a forecast step.
pub trait Refiner: Sync {
    fn refine(&self, set: &mut GaussianSet) -> Result<()>;
}

/// Leaves the set untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn refine(&self, _set: &mut GaussianSet) -> Result<()> {
        Ok(())
    }
}

/// Random Gaussians used to fill newly observed space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionParams {
    /// Gaussians per cubic metre.
    pub density: f64,
    pub opacity: f64,
    pub scale: f64,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams { density: 1.0 / 8.0, opacity: 0.05, scale: 0.5 }
    }
}

pub struct Completer {
    pub params: CompletionParams,
    rng: ChaCha8Rng,
}

impl Completer {
    pub fn new(params: CompletionParams, seed: u64) -> Self {
        Completer { params, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

const QUADRATURE: usize = 64;

/// Volume of the part of the extents at `t+1` that lay outside them at `t`,
/// where `next_from_current` maps frame `t` into frame `t+1`. Exact for pure
/// translations, midpoint quadrature otherwise.
pub fn new_region_volume(spec: &OccSpec, next_from_current: &Pose) -> f64 {
    let ext = spec.extent();
    if next_from_current.rotation() == &Matrix3::identity() {
        let t = next_from_current.translation();
        let overlap: f64 = (0..3).map(|a| (ext[a] - t[a].abs()).max(0.0)).product();
        return ext.product() - overlap;
    }
    let back = next_from_current.inverse();
    let n = QUADRATURE;
    let mut outside = 0usize;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let p = Vector3::new(
                    spec.x_min + (i as f64 + 0.5) / n as f64 * ext.x,
                    spec.y_min + (j as f64 + 0.5) / n as f64 * ext.y,
                    spec.z_min + (k as f64 + 0.5) / n as f64 * ext.z,
                );
                if !spec.contains(&back.apply(&p)) {
                    outside += 1;
                }
            }
        }
    }
    ext.product() * outside as f64 / (n * n * n) as f64
}

/// One forecast step: align to the next ego frame, drop Gaussians that left
/// the extents, fill newly entered space with random Gaussians and refine.
pub fn forecast_step(
    set: &GaussianSet,
    next_from_current: &Pose,
    spec: &OccSpec,
    completer: &mut Completer,
    refiner: &dyn Refiner,
) -> Result<GaussianSet> {
    spec.validate()?;
    let moved = transform_gaussian_set(set, next_from_current);
    let mut kept = GaussianSet::new(set.class_count(), set.feature_dim())?;
    for (before, after) in set.iter().zip(moved.iter()) {
        if spec.contains(&before.mean) && !spec.contains(&after.mean) {
            continue;
        }
        kept.push(after.clone())?;
    }
    if !next_from_current.is_identity() {
        let volume = new_region_volume(spec, next_from_current);
        let count = (volume * completer.params.density).round() as usize;
        let back = next_from_current.inverse();
        let p = completer.params;
        let mut placed = 0;
        let mut attempts = 0usize;
        while placed < count && attempts < 10_000_000 {
            attempts += 1;
            let x = Vector3::new(
                completer.rng.random_range(spec.x_min..spec.x_max),
                completer.rng.random_range(spec.y_min..spec.y_max),
                completer.rng.random_range(spec.z_min..spec.z_max),
            );
            if spec.contains(&back.apply(&x)) {
                continue;
            }
            kept.push(Gaussian::new(
                x,
                Vector3::repeat(p.scale),
                Quaternion::IDENTITY,
                p.opacity,
                vec![0.0; set.class_count()],
                vec![0.0; set.feature_dim()],
            )?)?;
            placed += 1;
        }
    }
    refiner.refine(&mut kept)?;
    Ok(kept)
}

/// Options for [`forecast_rollout`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForecastOptions {
    pub tau: f64,
    pub completion: CompletionParams,
    pub seed: u64,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        ForecastOptions { tau: DEFAULT_TAU, completion: CompletionParams::default(), seed: 0 }
    }
}

/// Applies [`forecast_step`] for each relative pose in turn and splats every
/// intermediate set.
pub fn forecast_rollout(
    set: &GaussianSet,
    poses: &[Pose],
    spec: &OccSpec,
    options: &ForecastOptions,
    refiner: &dyn Refiner,
) -> Result<Vec<OccupancyGrid>> {
    if poses.is_empty() {
        return Err(Error::invalid("forecast needs at least one pose"));
    }
    let mut completer = Completer::new(options.completion, options.seed);
    let mut current = set.clone();
    let mut grids = Vec::with_capacity(poses.len());
    for pose in poses {
        current = forecast_step(&current, pose, spec, &mut completer, refiner)?;
        grids.push(splat_to_occupancy(&current, spec, options.tau)?);
    }
    Ok(grids)
}
