//! Bird's-eye-view latent rasterization.
//!
//! Each Gaussian splats its feature vector into the cells covered by the 3σ
//! footprint of its xy-marginal. The weight at a cell centre is
//! `α · exp(-½ dᵀ Σxy⁻¹ d)`; the feature is split over height bins by the
//! Gaussian's 1D z-mass in each bin. Cells store the weight-normalised mean
//! `Σ w f / (Σ w + ε)`.

mod io;

pub use io::{read_bevg, write_bevg};

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::geometry::{Gaussian, GaussianSet};

pub const BEV_EPS: f64 = 1e-8;
const FOOTPRINT_SIGMA: f64 = 3.0;
/// Gaussians per partial grid; fixed so results do not depend on threads.
const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub nx: usize,
    pub ny: usize,
    pub z_bins: usize,
}

impl Default for BevSpec {
    fn default() -> Self {
        BevSpec {
            x_min: -25.6,
            x_max: 25.6,
            y_min: -25.6,
            y_max: 25.6,
            z_min: -1.0,
            z_max: 5.4,
            nx: 64,
            ny: 64,
            z_bins: 4,
        }
    }
}

impl BevSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = self.x_min < self.x_max && self.y_min < self.y_max && self.z_min < self.z_max;
        if !ordered || self.nx == 0 || self.ny == 0 || self.z_bins == 0 {
            return Err(Error::invalid(format!("invalid BEV spec {self:?}")));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> Vector2<f64> {
        Vector2::new(
            (self.x_max - self.x_min) / self.nx as f64,
            (self.y_max - self.y_min) / self.ny as f64,
        )
    }

    pub fn bin_height(&self) -> f64 {
        (self.z_max - self.z_min) / self.z_bins as f64
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Vector2<f64> {
        let c = self.cell_size();
        Vector2::new(
            self.x_min + (ix as f64 + 0.5) * c.x,
            self.y_min + (iy as f64 + 0.5) * c.y,
        )
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = self.cell_size();
        let fx = ((x - self.x_min) / c.x).floor();
        let fy = ((y - self.y_min) / c.y).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    pub fn cell_count(&self) -> usize {
        self.nx * self.ny
    }

    /// Equal up to f32 storage precision.
    pub fn compatible(&self, other: &BevSpec) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + a.abs());
        self.nx == other.nx
            && self.ny == other.ny
            && self.z_bins == other.z_bins
            && close(self.x_min, other.x_min)
            && close(self.x_max, other.x_max)
            && close(self.y_min, other.y_min)
            && close(self.y_max, other.y_max)
            && close(self.z_min, other.z_min)
            && close(self.z_max, other.z_max)
    }

    fn bin_edges(&self) -> Vec<f64> {
        let h = self.bin_height();
        (0..=self.z_bins)
            .map(|b| if b == self.z_bins { self.z_max } else { self.z_min + b as f64 * h })
            .collect()
    }
}

/// Dense BEV latent. Cell `(ix, iy)` lives at index `iy * nx + ix`; its
/// channels are bin-major, channel `b * D + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub spec: BevSpec,
    pub feature_dim: usize,
    pub features: Vec<f64>,
    pub weights: Vec<f64>,
}

impl BevGrid {
    pub fn zeros(spec: BevSpec, feature_dim: usize) -> Self {
        let n = spec.cell_count();
        BevGrid {
            spec,
            feature_dim,
            features: vec![0.0; n * feature_dim * spec.z_bins],
            weights: vec![0.0; n],
        }
    }

    pub fn channels(&self) -> usize {
        self.feature_dim * self.spec.z_bins
    }

    pub fn cell_index(&self, ix: usize, iy: usize) -> usize {
        iy * self.spec.nx + ix
    }

    pub fn cell(&self, ix: usize, iy: usize) -> &[f64] {
        let c = self.channels();
        let i = self.cell_index(ix, iy);
        &self.features[i * c..(i + 1) * c]
    }

    /// Height-bin slice `b` of a cell.
    pub fn bin(&self, ix: usize, iy: usize, b: usize) -> &[f64] {
        let d = self.feature_dim;
        &self.cell(ix, iy)[b * d..(b + 1) * d]
    }

    /// Cell with the largest accumulated weight (first on ties).
    pub fn argmax_cell(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        (best % self.spec.nx, best / self.spec.nx)
    }
}

/// Standard normal CDF.
fn phi_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Footprint geometry shared by the forward and backward passes.
struct Splat {
    mean: Vector2<f64>,
    inv: Matrix2<f64>,
    alpha: f64,
    x_range: (usize, usize),
    y_range: (usize, usize),
    /// z-mass per bin.
    mass: Vec<f64>,
    /// Standardised bin edges.
    edges_std: Vec<f64>,
    sigma_z: f64,
}

impl Splat {
    fn new(g: &Gaussian, spec: &BevSpec, edges: &[f64]) -> Option<Splat> {
        let cov = g.covariance();
        let cxy = Matrix2::new(cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]);
        let inv = cxy.try_inverse()?;
        let sigma_z = cov[(2, 2)].sqrt();
        let edges_std: Vec<f64> = edges.iter().map(|e| (e - g.mean.z) / sigma_z).collect();
        let mass = edges_std.windows(2).map(|w| phi_cdf(w[1]) - phi_cdf(w[0])).collect();
        let rx = FOOTPRINT_SIGMA * cxy[(0, 0)].sqrt();
        let ry = FOOTPRINT_SIGMA * cxy[(1, 1)].sqrt();
        let cs = spec.cell_size();
        // Cells whose centres can fall inside the bounding box.
        let lo = |m: f64, r: f64, min: f64, c: f64| ((m - r - min) / c - 0.5).ceil();
        let hi = |m: f64, r: f64, min: f64, c: f64| ((m + r - min) / c - 0.5).floor();
        let x0 = lo(g.mean.x, rx, spec.x_min, cs.x).max(0.0);
        let x1 = hi(g.mean.x, rx, spec.x_min, cs.x).min(spec.nx as f64 - 1.0);
        let y0 = lo(g.mean.y, ry, spec.y_min, cs.y).max(0.0);
        let y1 = hi(g.mean.y, ry, spec.y_min, cs.y).min(spec.ny as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            return None;
        }
        Some(Splat {
            mean: Vector2::new(g.mean.x, g.mean.y),
            inv,
            alpha: g.opacity(),
            x_range: (x0 as usize, x1 as usize),
            y_range: (y0 as usize, y1 as usize),
            mass,
            edges_std,
            sigma_z,
        })
    }

    /// `(cell index, weight, offset)` for every covered cell.
    fn cells(&self, spec: &BevSpec) -> Vec<(usize, f64, Vector2<f64>)> {
        let mut out = Vec::new();
        for iy in self.y_range.0..=self.y_range.1 {
            for ix in self.x_range.0..=self.x_range.1 {
                let d = spec.cell_center(ix, iy) - self.mean;
                let m2 = (d.transpose() * self.inv * d)[(0, 0)];
                if m2 > FOOTPRINT_SIGMA * FOOTPRINT_SIGMA {
                    continue;
                }
                out.push((iy * spec.nx + ix, self.alpha * (-0.5 * m2).exp(), d));
            }
        }
        out
    }
}

/// Rasterizes the set's features into a BEV grid. Members are visited in
/// canonical order, so the result is independent of set order.
pub fn rasterize_bev(set: &GaussianSet, spec: &BevSpec) -> Result<BevGrid> {
    spec.validate()?;
    let d = set.feature_dim();
    let channels = d * spec.z_bins;
    let n = spec.cell_count();
    let edges = spec.bin_edges();
    let order = set.canonical_order();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = order
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut num = vec![0.0; n * channels];
            let mut wsum = vec![0.0; n];
            for &k in chunk {
                let g = &set.gaussians()[k];
                let Some(splat) = Splat::new(g, spec, &edges) else { continue };
                for (cell, w, _) in splat.cells(spec) {
                    wsum[cell] += w;
                    let row = &mut num[cell * channels..(cell + 1) * channels];
                    for (b, m) in splat.mass.iter().enumerate() {
                        for (j, f) in g.feature.iter().enumerate() {
                            row[b * d + j] += w * m * f;
                        }
                    }
                }
            }
            (num, wsum)
        })
        .collect();
    let mut grid = BevGrid::zeros(*spec, d);
    let mut num = vec![0.0; n * channels];
    for (pn, pw) in &partials {
        for (a, b) in num.iter_mut().zip(pn) {
            *a += b;
        }
        for (a, b) in grid.weights.iter_mut().zip(pw) {
            *a += b;
        }
    }
    for cell in 0..n {
        let denom = grid.weights[cell] + BEV_EPS;
        for ch in 0..channels {
            grid.features[cell * channels + ch] = num[cell * channels + ch] / denom;
        }
    }
    Ok(grid)
}

/// Gradient of a scalar loss w.r.t. every Gaussian mean, given the loss
/// gradient `upstream` w.r.t. the features of `grid = rasterize_bev(set, spec)`.
pub fn rasterize_bev_mean_gradients(
    set: &GaussianSet,
    grid: &BevGrid,
    upstream: &[f64],
) -> Result<Vec<Vector3<f64>>> {
    let spec = &grid.spec;
    let channels = grid.channels();
    if upstream.len() != grid.features.len() {
        return Err(Error::invalid("upstream gradient does not match BEV grid"));
    }
    let d = set.feature_dim();
    let n = spec.cell_count();
    let edges = spec.bin_edges();
    let mut g_num = vec![0.0; n * channels];
    let mut g_w = vec![0.0; n];
    for cell in 0..n {
        let denom = grid.weights[cell] + BEV_EPS;
        let mut acc = 0.0;
        for ch in 0..channels {
            let i = cell * channels + ch;
            g_num[i] = upstream[i] / denom;
            acc += upstream[i] * grid.features[i];
        }
        g_w[cell] = -acc / denom;
    }
    let grads = set
        .gaussians()
        .par_iter()
        .map(|g| {
            let Some(splat) = Splat::new(g, spec, &edges) else {
                return Vector3::zeros();
            };
            let mut g_mass = vec![0.0; spec.z_bins];
            let mut g_xy = Vector2::zeros();
            for (cell, w, off) in splat.cells(spec) {
                let row = &g_num[cell * channels..(cell + 1) * channels];
                let mut g_weight = g_w[cell];
                for (b, m) in splat.mass.iter().enumerate() {
                    for (j, f) in g.feature.iter().enumerate() {
                        let gn = row[b * d + j];
                        g_weight += gn * m * f;
                        g_mass[b] += gn * w * f;
                    }
                }
                // w = α exp(-½ dᵀ A d), d = centre - mean
                g_xy += g_weight * w * (splat.inv * off);
            }
            let mut g_z = 0.0;
            for b in 0..spec.z_bins {
                let (lo, hi) = (splat.edges_std[b], splat.edges_std[b + 1]);
                g_z += g_mass[b] * (phi_pdf(lo) - phi_pdf(hi)) / splat.sigma_z;
            }
            Vector3::new(g_xy.x, g_xy.y, g_z)
        })
        .collect();
    Ok(grads)
}

/// Hash of which cells each Gaussian's footprint covers.
pub fn bev_signature(set: &GaussianSet, spec: &BevSpec) -> u64 {
    let edges = spec.bin_edges();
    let mut h = DefaultHasher::new();
    for g in set.iter() {
        match Splat::new(g, spec, &edges) {
            None => u64::MAX.hash(&mut h),
            Some(s) => {
                for (cell, _, _) in s.cells(spec) {
                    cell.hash(&mut h);
                }
                usize::MAX.hash(&mut h);
            }
        }
    }
    h.finish()
}

/// Mean squared error over every cell and channel.
pub fn bev_l2_loss(pred: &BevGrid, target: &BevGrid) -> Result<f64> {
    check_match(pred, target)?;
    let n = pred.features.len() as f64;
    let sq: Vec<f64> = pred
        .features
        .iter()
        .zip(&target.features)
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Ok(crate::recon::pairwise_sum(&sq) / n)
}

/// Gradient of [`bev_l2_loss`] w.r.t. `pred.features`.
pub fn bev_l2_gradient(pred: &BevGrid, target: &BevGrid) -> Result<Vec<f64>> {
    check_match(pred, target)?;
    let n = pred.features.len() as f64;
    Ok(pred
        .features
        .iter()
        .zip(&target.features)
        .map(|(a, b)| 2.0 * (a - b) / n)
        .collect())
}

fn check_match(a: &BevGrid, b: &BevGrid) -> Result<()> {
    if !a.spec.compatible(&b.spec) || a.feature_dim != b.feature_dim {
        return Err(Error::invalid(format!(
            "BEV grids differ: {:?}/{} vs {:?}/{}",
            a.spec, a.feature_dim, b.spec, b.feature_dim
        )));
    }
    Ok(())
}
