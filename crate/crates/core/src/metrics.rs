//! Occupancy IoU / mIoU, trajectory L2 and collision rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occupancy::{OccupancyGrid, EMPTY};

/// Planned ego positions `(x, y)` in metres, in the ego frame of the
/// planning time, ordered by time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<[f64; 2]>) -> Self {
        Trajectory { waypoints }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Heading of each waypoint from the next one; the last waypoint keeps
    /// the previous heading. A single waypoint faces away from the origin.
    pub fn headings(&self) -> Vec<f64> {
        let w = &self.waypoints;
        let dir = |a: [f64; 2], b: [f64; 2], fallback: f64| {
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            if dx == 0.0 && dy == 0.0 {
                fallback
            } else {
                dy.atan2(dx)
            }
        };
        let mut out = Vec::with_capacity(w.len());
        let mut prev = if w.len() == 1 { dir([0.0, 0.0], w[0], 0.0) } else { 0.0 };
        for i in 0..w.len() {
            if i + 1 < w.len() {
                prev = dir(w[i], w[i + 1], prev);
            }
            out.push(prev);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Tally {
    pub fn iou(&self) -> Option<f64> {
        let d = self.tp + self.fp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionTally {
    /// Indexed by label; entry 0 (empty) is unused.
    pub classes: Vec<Tally>,
    /// Occupied-vs-empty aggregate.
    pub occupied: Tally,
}

fn check_pair(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<()> {
    if !pred.spec.compatible(&gt.spec) || pred.labels.len() != gt.labels.len() {
        return Err(Error::invalid("prediction and ground-truth grids have different specs"));
    }
    pred.validate()?;
    gt.validate()
}

pub fn confusion(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<ConfusionTally> {
    check_pair(pred, gt)?;
    let mut t = ConfusionTally { classes: vec![Tally::default(); gt.spec.class_count], occupied: Tally::default() };
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if p == g {
            if p != EMPTY {
                t.classes[p as usize].tp += 1;
            }
        } else {
            if p != EMPTY {
                t.classes[p as usize].fp += 1;
            }
            if g != EMPTY {
                t.classes[g as usize].fn_ += 1;
            }
        }
        match (p != EMPTY, g != EMPTY) {
            (true, true) => t.occupied.tp += 1,
            (true, false) => t.occupied.fp += 1,
            (false, true) => t.occupied.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub miou: f64,
    pub iou: f64,
    /// Per label; `None` for the empty label and for classes absent from both grids.
    pub per_class: Vec<Option<f64>>,
}

/// mIoU over the non-empty classes present in either grid, and IoU of the
/// occupied-vs-empty binarisation. Two empty grids agree perfectly (1, 1).
pub fn semantic_iou(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<IouReport> {
    let t = confusion(pred, gt)?;
    let per_class: Vec<Option<f64>> =
        t.classes.iter().enumerate().map(|(c, tally)| if c == EMPTY as usize { None } else { tally.iou() }).collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(IouReport { miou, iou: t.occupied.iou().unwrap_or(1.0), per_class })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub miou: f64,
    pub iou: f64,
    pub steps: Vec<IouReport>,
}

/// Per-step IoU and its average over steps.
pub fn forecast_metrics(preds: &[OccupancyGrid], gts: &[OccupancyGrid]) -> Result<ForecastReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::invalid(format!("need equal non-empty lists, got {} and {}", preds.len(), gts.len())));
    }
    let steps: Vec<IouReport> = preds.iter().zip(gts).map(|(p, g)| semantic_iou(p, g)).collect::<Result<_>>()?;
    let n = steps.len() as f64;
    Ok(ForecastReport {
        miou: steps.iter().map(|s| s.miou).sum::<f64>() / n,
        iou: steps.iter().map(|s| s.iou).sum::<f64>() / n,
        steps,
    })
}

/// Mean Euclidean distance between corresponding waypoints.
pub fn l2_error(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(format!("trajectory lengths differ or are zero: {} vs {}", pred.len(), gt.len())));
    }
    let sum: f64 = pred.waypoints.iter().zip(&gt.waypoints).map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1])).sum();
    Ok(sum / pred.len() as f64)
}

/// Ego vehicle box: `length` along the heading, `width` across it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoFootprint {
    pub length: f64,
    pub width: f64,
}

impl Default for EgoFootprint {
    fn default() -> Self {
        EgoFootprint { length: 4.0, width: 1.8 }
    }
}

impl EgoFootprint {
    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0) {
            return Err(Error::invalid("ego footprint dimensions must be positive"));
        }
        Ok(())
    }

    /// `(x, y, yaw)` of the box at every waypoint.
    pub fn poses(&self, traj: &Trajectory) -> Vec<(f64, f64, f64)> {
        traj.waypoints.iter().zip(traj.headings()).map(|(w, h)| (w[0], w[1], h)).collect()
    }
}

/// Closed overlap test between a rotated rectangle and an axis-aligned one.
pub fn box_overlaps_cell(centre: (f64, f64), yaw: f64, half: (f64, f64), cell: [f64; 4]) -> bool {
    let (s, c) = yaw.sin_cos();
    let axes = [(1.0, 0.0), (0.0, 1.0), (c, s), (-s, c)];
    let corners = [(cell[0], cell[2]), (cell[1], cell[2]), (cell[1], cell[3]), (cell[0], cell[3])];
    for (ax, ay) in axes {
        let centre_p = centre.0 * ax + centre.1 * ay;
        let r = half.0 * (c * ax + s * ay).abs() + half.1 * (-s * ax + c * ay).abs();
        let (lo, hi) = corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, y)| {
            let p = x * ax + y * ay;
            (lo.min(p), hi.max(p))
        });
        if centre_p + r < lo || hi < centre_p - r {
            return false;
        }
    }
    true
}

/// xy squares of every voxel column holding an obstacle (occupied, not `ground`).
pub fn obstacle_cells(grid: &OccupancyGrid, ground: Option<u8>) -> Vec<[f64; 4]> {
    let s = &grid.spec;
    let size = s.voxel_size();
    let mut out = Vec::new();
    for ix in 0..s.nx {
        for iy in 0..s.ny {
            let blocked = (0..s.nz).any(|iz| {
                let l = grid.get(ix, iy, iz);
                l != EMPTY && Some(l) != ground
            });
            if blocked {
                let x0 = s.x_min + ix as f64 * size.x;
                let y0 = s.y_min + iy as f64 * size.y;
                out.push([x0, x0 + size.x, y0, y0 + size.y]);
            }
        }
    }
    out
}

/// Whether the ego box touches an obstacle at any waypoint.
pub fn collides(traj: &Trajectory, ego: &EgoFootprint, grid: &OccupancyGrid, ground: Option<u8>) -> bool {
    let cells = obstacle_cells(grid, ground);
    let half = (0.5 * ego.length, 0.5 * ego.width);
    ego.poses(traj)
        .iter()
        .any(|&(x, y, yaw)| cells.iter().any(|cell| box_overlaps_cell((x, y), yaw, half, *cell)))
}

/// Percentage of scenes whose plan collides with a ground-truth obstacle.
pub fn collision_rate(plans: &[(Trajectory, EgoFootprint)], gts: &[OccupancyGrid], ground: Option<u8>) -> Result<f64> {
    if plans.is_empty() || plans.len() != gts.len() {
        return Err(Error::invalid(format!("need equal non-empty scene lists, got {} and {}", plans.len(), gts.len())));
    }
    for (_, ego) in plans {
        ego.validate()?;
    }
    let hits = plans.iter().zip(gts).filter(|((t, e), g)| collides(t, e, g, ground)).count();
    Ok(100.0 * hits as f64 / plans.len() as f64)
}
