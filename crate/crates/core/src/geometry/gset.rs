//! `GSET` binary format and its JSON mirror.
//!
//! Layout (little-endian): `"GSET"`, u32 version (=1), u32 K, u32 C, u32 D,
//! then K records of f32 `mean[3] scale[3] rotation[4] (w,x,y,z) opacity
//! logits[C] feature[D]`.

use std::io::{Read, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Gaussian, GaussianSet, Quaternion};
use crate::binio::{count, read_f32, read_magic, read_u32, write_f32, write_magic, write_u32};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GSET";
const VERSION: u32 = 1;

pub fn write_gset<W: Write>(w: &mut W, set: &GaussianSet) -> Result<()> {
    write_magic(w, MAGIC, VERSION)?;
    write_u32(w, set.len() as u32)?;
    write_u32(w, set.class_count() as u32)?;
    write_u32(w, set.feature_dim() as u32)?;
    for g in set.iter() {
        for v in g.mean.iter() {
            write_f32(w, *v)?;
        }
        for v in g.scale().iter() {
            write_f32(w, *v)?;
        }
        for v in g.rotation().to_array() {
            write_f32(w, v)?;
        }
        write_f32(w, g.opacity())?;
        for v in g.logits.iter().chain(g.feature.iter()) {
            write_f32(w, *v)?;
        }
    }
    Ok(())
}

pub fn read_gset<R: Read>(r: &mut R) -> Result<GaussianSet> {
    let version = read_magic(r, MAGIC, "GSET")?;
    if version != VERSION {
        return Err(Error::format("GSET", format!("unsupported version {version}")));
    }
    let k = count(read_u32(r)?, "K", "GSET")?;
    let c = count(read_u32(r)?, "C", "GSET")?;
    let d = count(read_u32(r)?, "D", "GSET")?;
    let mut set = GaussianSet::new(c, d)?;
    for _ in 0..k {
        let mut vals = vec![0.0; 11 + c + d];
        for v in vals.iter_mut() {
            *v = read_f32(r)?;
        }
        let record = GaussianRecord {
            mean: [vals[0], vals[1], vals[2]],
            scale: [vals[3], vals[4], vals[5]],
            rotation: [vals[6], vals[7], vals[8], vals[9]],
            opacity: vals[10],
            logits: vals[11..11 + c].to_vec(),
            feature: vals[11 + c..].to_vec(),
        };
        set.push(record.into_gaussian().map_err(|e| Error::format("GSET", e.to_string()))?)?;
    }
    Ok(set)
}

/// Human-readable mirror of the binary format holding the same f32 values,
/// so conversion in either direction is lossless.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSetJson {
    pub version: u32,
    pub class_count: usize,
    pub feature_dim: usize,
    pub gaussians: Vec<GaussianRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianRecord {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub logits: Vec<f64>,
    pub feature: Vec<f64>,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

impl GaussianRecord {
    fn from_gaussian(g: &Gaussian) -> Self {
        let s = g.scale();
        GaussianRecord {
            mean: [f32_round(g.mean.x), f32_round(g.mean.y), f32_round(g.mean.z)],
            scale: [f32_round(s.x), f32_round(s.y), f32_round(s.z)],
            rotation: g.rotation().to_array().map(f32_round),
            opacity: f32_round(g.opacity()),
            logits: g.logits.iter().copied().map(f32_round).collect(),
            feature: g.feature.iter().copied().map(f32_round).collect(),
        }
    }

    fn into_gaussian(self) -> Result<Gaussian> {
        let [w, x, y, z] = self.rotation;
        Gaussian::new(
            Vector3::from(self.mean),
            Vector3::from(self.scale),
            Quaternion::from_stored(w, x, y, z)?,
            self.opacity,
            self.logits,
            self.feature,
        )
    }
}

impl GaussianSetJson {
    pub fn from_set(set: &GaussianSet) -> Self {
        GaussianSetJson {
            version: VERSION,
            class_count: set.class_count(),
            feature_dim: set.feature_dim(),
            gaussians: set.iter().map(GaussianRecord::from_gaussian).collect(),
        }
    }

    pub fn into_set(self) -> Result<GaussianSet> {
        if self.version != VERSION {
            return Err(Error::format("GSET json", format!("unsupported version {}", self.version)));
        }
        let gaussians = self
            .gaussians
            .into_iter()
            .map(GaussianRecord::into_gaussian)
            .collect::<Result<Vec<_>>>()?;
        GaussianSet::from_gaussians(self.class_count, self.feature_dim, gaussians)
    }
}
