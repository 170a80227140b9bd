//! Inspection images (PGM/PPM) and a raw f32 grid dump.

use std::io::{Read, Write};

use super::{DepthImage, SemanticImage};
use crate::binio::{count, read_f32, read_magic, read_u32, write_f32, write_magic, write_u32};
use crate::error::{Error, Result};

/// RGB per class id; ids past the end wrap around.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [128, 64, 128],
    [70, 130, 180],
    [220, 20, 60],
    [250, 170, 30],
    [107, 142, 35],
    [152, 251, 152],
    [255, 255, 255],
];

/// 16-bit binary PGM; depth in millimetres, 0 for invalid pixels.
pub fn write_depth_pgm<W: Write>(w: &mut W, depth: &DepthImage) -> Result<()> {
    write!(w, "P5\n{} {}\n65535\n", depth.width, depth.height)?;
    for (d, valid) in depth.depth.iter().zip(&depth.valid) {
        let mm = if *valid {
            (d * 1000.0).round().clamp(1.0, 65535.0) as u16
        } else {
            0
        };
        w.write_all(&mm.to_be_bytes())?;
    }
    Ok(())
}

/// Binary PPM of the per-pixel argmax class; invalid pixels are black.
pub fn write_semantic_ppm<W: Write>(w: &mut W, sem: &SemanticImage) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", sem.width, sem.height)?;
    for i in 0..sem.width * sem.height {
        let rgb = if sem.is_valid(i) {
            PALETTE[sem.argmax(i) % PALETTE.len()]
        } else {
            [0, 0, 0]
        };
        w.write_all(&rgb)?;
    }
    Ok(())
}

const GRID_MAGIC: &[u8; 4] = b"F32G";

/// Flat grid dump: `"F32G"`, u32 version, u32 width, u32 height,
/// u32 channels, then row-major f32 values.
pub fn write_f32_grid<W: Write>(
    w: &mut W,
    width: usize,
    height: usize,
    channels: usize,
    values: &[f64],
) -> Result<()> {
    if values.len() != width * height * channels {
        return Err(Error::invalid("grid value count does not match dimensions"));
    }
    write_magic(w, GRID_MAGIC, 1)?;
    for d in [width, height, channels] {
        write_u32(w, d as u32)?;
    }
    for v in values {
        write_f32(w, *v)?;
    }
    Ok(())
}

/// Returns `(width, height, channels, values)`.
pub fn read_f32_grid<R: Read>(r: &mut R) -> Result<(usize, usize, usize, Vec<f64>)> {
    let version = read_magic(r, GRID_MAGIC, "F32G")?;
    if version != 1 {
        return Err(Error::format("F32G", format!("unsupported version {version}")));
    }
    let width = count(read_u32(r)?, "width", "F32G")?;
    let height = count(read_u32(r)?, "height", "F32G")?;
    let channels = count(read_u32(r)?, "channels", "F32G")?;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::format("F32G", "dimensions overflow"))?;
    let values = (0..n).map(|_| read_f32(r)).collect::<Result<Vec<_>>>()?;
    Ok((width, height, channels, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_encodes_millimetres() {
        let d = DepthImage {
            width: 2,
            height: 1,
            depth: vec![1.5, 7.0],
            valid: vec![true, false],
        };
        let mut buf = Vec::new();
        write_depth_pgm(&mut buf, &d).unwrap();
        let header = b"P5\n2 1\n65535\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(&buf[header.len()..], &[0x05, 0xDC, 0, 0]);
    }

    #[test]
    fn grid_round_trip() {
        let vals = vec![0.5, -1.25, 3.0, 4.0, 5.0, 6.0];
        let mut buf = Vec::new();
        write_f32_grid(&mut buf, 3, 1, 2, &vals).unwrap();
        let (w, h, c, back) = read_f32_grid(&mut buf.as_slice()).unwrap();
        assert_eq!((w, h, c), (3, 1, 2));
        assert_eq!(back, vals);
    }
}
