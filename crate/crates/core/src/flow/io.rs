//! `FLWH` checkpoint: `"FLWH"`, u32 version (=1), u32 input width, u32
//! hidden width, then the flat parameters as f64.

use std::io::{Read, Write};

use super::FlowHead;
use crate::binio::{count, read_f64, read_magic, read_u32, write_f64, write_magic, write_u32};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FLWH";

pub fn write_flwh<W: Write>(w: &mut W, head: &FlowHead) -> Result<()> {
    write_magic(w, MAGIC, 1)?;
    write_u32(w, head.input_dim() as u32)?;
    write_u32(w, head.hidden() as u32)?;
    for p in head.params() {
        write_f64(w, *p)?;
    }
    Ok(())
}

pub fn read_flwh<R: Read>(r: &mut R) -> Result<FlowHead> {
    let version = read_magic(r, MAGIC, "FLWH")?;
    if version != 1 {
        return Err(Error::format("FLWH", format!("unsupported version {version}")));
    }
    let d = count(read_u32(r)?, "input width", "FLWH")?;
    let h = count(read_u32(r)?, "hidden width", "FLWH")?;
    let params = (0..FlowHead::param_count(d, h)).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
    FlowHead::from_params(d, h, params).map_err(|e| Error::format("FLWH", e.to_string()))
}
