//! `BEVG` dump: `"BEVG"`, u32 version (=1), f32 `x_min x_max y_min y_max
//! z_min z_max`, u32 `nx ny z_bins feature_dim`, then f32 features
//! (cell-major, `iy * nx + ix`, bin-major channels) and f32 weights.

use std::io::{Read, Write};

use super::{BevGrid, BevSpec};
use crate::binio::{count, read_f32, read_magic, read_u32, write_f32, write_magic, write_u32};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BEVG";

pub fn write_bevg<W: Write>(w: &mut W, grid: &BevGrid) -> Result<()> {
    write_magic(w, MAGIC, 1)?;
    let s = &grid.spec;
    for v in [s.x_min, s.x_max, s.y_min, s.y_max, s.z_min, s.z_max] {
        write_f32(w, v)?;
    }
    for v in [s.nx, s.ny, s.z_bins, grid.feature_dim] {
        write_u32(w, v as u32)?;
    }
    for v in grid.features.iter().chain(&grid.weights) {
        write_f32(w, *v)?;
    }
    Ok(())
}

pub fn read_bevg<R: Read>(r: &mut R) -> Result<BevGrid> {
    let version = read_magic(r, MAGIC, "BEVG")?;
    if version != 1 {
        return Err(Error::format("BEVG", format!("unsupported version {version}")));
    }
    let mut ext = [0.0; 6];
    for v in ext.iter_mut() {
        *v = read_f32(r)?;
    }
    let nx = count(read_u32(r)?, "nx", "BEVG")?;
    let ny = count(read_u32(r)?, "ny", "BEVG")?;
    let z_bins = count(read_u32(r)?, "z_bins", "BEVG")?;
    let feature_dim = count(read_u32(r)?, "feature_dim", "BEVG")?;
    let spec = BevSpec {
        x_min: ext[0],
        x_max: ext[1],
        y_min: ext[2],
        y_max: ext[3],
        z_min: ext[4],
        z_max: ext[5],
        nx,
        ny,
        z_bins,
    };
    spec.validate().map_err(|e| Error::format("BEVG", e.to_string()))?;
    let mut grid = BevGrid::zeros(spec, feature_dim);
    for v in grid.features.iter_mut().chain(grid.weights.iter_mut()) {
        *v = read_f32(r)?;
    }
    Ok(grid)
}
