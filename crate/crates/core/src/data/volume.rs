use std::path::Path;

use crate::binio::{put_string, Reader};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"HWAV";
pub const VOLUME_VERSION: u32 = 1;

/// A single-modality scan: `D × H × W` voxels in raster order (depth
/// outermost) with spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    pub label: String,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], label: impl Into<String>, voxels: Vec<f32>) -> Result<Self> {
        let v = Volume { extents, spacing, label: label.into(), voxels };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(extents: [usize; 3], spacing: [f32; 3], label: impl Into<String>) -> Self {
        let n = extents.iter().product();
        Volume { extents, spacing, label: label.into(), voxels: vec![0.0; n] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Spacing(self.spacing));
        }
        let n: usize = self.extents.iter().product();
        if n == 0 || n != self.voxels.len() {
            return Err(Error::Data(format!(
                "volume extents {:?} do not match {} voxels",
                self.extents,
                self.voxels.len()
            )));
        }
        Ok(())
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    v.validate()?;
    let mut out = Vec::with_capacity(34 + v.label.len() + 4 * v.voxels.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for &e in &v.extents {
        let e = u32::try_from(e).map_err(|_| Error::Data(format!("extent {e} too large")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    put_string(&mut out, &v.label)?;
    for &x in &v.voxels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(bytes, "volume");
    r.magic(VOLUME_MAGIC)?;
    let version = r.u32()?;
    if version != VOLUME_VERSION {
        return Err(Error::Version(version));
    }
    let extents = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let mut spacing = [0.0f32; 3];
    for s in &mut spacing {
        *s = f32::from_le_bytes(r.array()?);
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Spacing(spacing));
    }
    let label = r.string()?;
    let n: usize = extents.iter().product();
    if n == 0 {
        return Err(Error::Data(format!("volume has a zero extent {extents:?}")));
    }
    let payload = r.bytes(n * 4)?;
    if r.remaining() != 0 {
        return Err(Error::Data(format!("volume: {} trailing bytes", r.remaining())));
    }
    let voxels = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Volume { extents, spacing, label, voxels })
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    std::fs::write(path, encode_volume(v)?)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&std::fs::read(path)?)
}
