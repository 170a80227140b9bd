//! `OCC3` grid: `"OCC3"`, u32 version (=1), f32 `x_min x_max y_min y_max
//! z_min z_max`, u32 `nx ny nz class_count`, then one u8 label per voxel
//! (`x` slowest, `z` fastest).

use std::io::{Read, Write};

use super::{OccSpec, OccupancyGrid, EMPTY};
use crate::binio::{count, read_f32, read_magic, read_u32, write_f32, write_magic, write_u32};
use crate::error::{Error, Result};
use crate::splat::PALETTE;

const MAGIC: &[u8; 4] = b"OCC3";

pub fn write_occ3<W: Write>(w: &mut W, grid: &OccupancyGrid) -> Result<()> {
    write_magic(w, MAGIC, 1)?;
    let s = &grid.spec;
    for v in [s.x_min, s.x_max, s.y_min, s.y_max, s.z_min, s.z_max] {
        write_f32(w, v)?;
    }
    for v in [s.nx, s.ny, s.nz, s.class_count] {
        write_u32(w, v as u32)?;
    }
    w.write_all(&grid.labels)?;
    Ok(())
}

pub fn read_occ3<R: Read>(r: &mut R) -> Result<OccupancyGrid> {
    let version = read_magic(r, MAGIC, "OCC3")?;
    if version != 1 {
        return Err(Error::format("OCC3", format!("unsupported version {version}")));
    }
    let mut ext = [0.0; 6];
    for v in ext.iter_mut() {
        *v = read_f32(r)?;
    }
    let spec = OccSpec {
        x_min: ext[0],
        x_max: ext[1],
        y_min: ext[2],
        y_max: ext[3],
        z_min: ext[4],
        z_max: ext[5],
        nx: count(read_u32(r)?, "nx", "OCC3")?,
        ny: count(read_u32(r)?, "ny", "OCC3")?,
        nz: count(read_u32(r)?, "nz", "OCC3")?,
        class_count: count(read_u32(r)?, "class_count", "OCC3")?,
    };
    let mut grid = OccupancyGrid::empty(spec);
    spec.validate().map_err(|e| Error::format("OCC3", e.to_string()))?;
    r.read_exact(&mut grid.labels)?;
    grid.validate().map_err(|e| Error::format("OCC3", e.to_string()))?;
    Ok(grid)
}

/// Top-down view: each pixel shows the highest occupied voxel of its column.
/// Image rows run from `x_max` down to `x_min`, columns from `y_max` to `y_min`.
pub fn write_topdown_ppm<W: Write>(w: &mut W, grid: &OccupancyGrid) -> Result<()> {
    let s = &grid.spec;
    write!(w, "P6\n{} {}\n255\n", s.ny, s.nx)?;
    let mut px = Vec::with_capacity(s.nx * s.ny * 3);
    for ix in (0..s.nx).rev() {
        for iy in (0..s.ny).rev() {
            let top = (0..s.nz).rev().map(|iz| grid.get(ix, iy, iz)).find(|l| *l != EMPTY);
            let rgb = match top {
                Some(l) => PALETTE[l as usize % PALETTE.len()],
                None => [0, 0, 0],
            };
            px.extend_from_slice(&rgb);
        }
    }
    w.write_all(&px)?;
    Ok(())
}
