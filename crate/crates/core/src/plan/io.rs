//! `PLNW` checkpoint: `"PLNW"`, u32 version (=1), the configuration as
//! u32s (query_dim, patches_per_side, horizon, ff_hidden, scene_layers,
//! waypoint_layers, future_layers, input_dim), u32 tensor count, a manifest
//! of (u32 name length, UTF-8 name, u32 rows, u32 cols) per tensor, then all
//! tensors as row-major f64 in manifest order.

use std::io::{Read, Write};

use super::{Planner, PlannerConfig};
use crate::autodiff::Mat;
use crate::binio::{count, read_f64, read_magic, read_u32, write_f64, write_magic, write_u32};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PLNW";

pub fn write_plnw<W: Write>(w: &mut W, planner: &Planner) -> Result<()> {
    write_magic(w, MAGIC, 1)?;
    let c = &planner.config;
    for v in [c.query_dim, c.patches_per_side, c.horizon, c.ff_hidden, c.scene_layers, c.waypoint_layers, c.future_layers, planner.input_dim] {
        write_u32(w, v as u32)?;
    }
    let tensors = planner.tensors();
    write_u32(w, tensors.len() as u32)?;
    for (name, m) in &tensors {
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(w, m.nrows() as u32)?;
        write_u32(w, m.ncols() as u32)?;
    }
    for (_, m) in &tensors {
        for v in m.transpose().iter() {
            write_f64(w, *v)?;
        }
    }
    Ok(())
}

pub fn read_plnw<R: Read>(r: &mut R) -> Result<Planner> {
    let version = read_magic(r, MAGIC, "PLNW")?;
    if version != 1 {
        return Err(Error::format("PLNW", format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 8];
    for d in dims.iter_mut() {
        *d = count(read_u32(r)?, "dimension", "PLNW")?;
    }
    let config = PlannerConfig {
        query_dim: dims[0],
        patches_per_side: dims[1],
        horizon: dims[2],
        ff_hidden: dims[3],
        scene_layers: dims[4],
        waypoint_layers: dims[5],
        future_layers: dims[6],
    };
    let template = Planner::new(config, dims[7], 0).map_err(|e| Error::format("PLNW", e.to_string()))?;
    let expected = template.tensors();
    let n = count(read_u32(r)?, "tensor count", "PLNW")?;
    if n != expected.len() {
        return Err(Error::format("PLNW", format!("{n} tensors, configuration implies {}", expected.len())));
    }
    for (name, m) in &expected {
        let len = count(read_u32(r)?, "name length", "PLNW")?;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        if buf != name.as_bytes() || (rows, cols) != m.shape() {
            return Err(Error::format(
                "PLNW",
                format!("manifest entry {:?} {rows}×{cols} does not match {name} {:?}", String::from_utf8_lossy(&buf), m.shape()),
            ));
        }
    }
    let mut data = Vec::with_capacity(expected.len());
    for (_, m) in &expected {
        let vals = (0..m.len()).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("PLNW", "non-finite parameter"));
        }
        data.push(Mat::from_row_slice(m.nrows(), m.ncols(), &vals));
    }
    let mut it = data.into_iter();
    Ok(template.map(&mut |_, _: &Mat| it.next().expect("one tensor per manifest entry")))
}
