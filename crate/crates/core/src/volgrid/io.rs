//! `.g3d` volume files.
//!
//! Layout (little-endian): magic `G3DV`, `u32` version (1), `u32` dims[3],
//! `f32` spacing[3], `f32` origin[3], `u8` dtype (0 = f32 scalar, 1 = u8 label),
//! then the raw x-fastest payload.

use std::fs;
use std::path::Path;

use super::{GridGeometry, LabelGrid, VoxelGrid};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"G3DV";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;
const HEADER_LEN: usize = 4 + 4 + 12 + 12 + 12 + 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Scalar(VoxelGrid),
    Label(LabelGrid),
}

impl Volume {
    pub fn geometry(&self) -> &GridGeometry {
        match self {
            Volume::Scalar(g) => &g.geometry,
            Volume::Label(g) => &g.geometry,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Volume::Scalar(_) => "f32 scalar",
            Volume::Label(_) => "u8 label",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let g = self.geometry();
        let mut out = Vec::with_capacity(HEADER_LEN + g.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in g.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for s in g.spacing_mm {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for o in g.origin_mm {
            out.extend_from_slice(&o.to_le_bytes());
        }
        match self {
            Volume::Scalar(v) => {
                out.push(DTYPE_F32);
                for x in &v.values {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Volume::Label(l) => {
                out.push(DTYPE_U8);
                out.extend_from_slice(&l.labels);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedHeader(bytes.len()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedHeader(bytes.len()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let spacing_mm = [f32_at(20), f32_at(24), f32_at(28)];
        let origin_mm = [f32_at(32), f32_at(36), f32_at(40)];
        let geometry = GridGeometry::new(dims, spacing_mm, origin_mm)?;
        let dtype = bytes[44];
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_U8 => 1,
            other => return Err(Error::UnknownDtype(other)),
        };
        let payload = &bytes[HEADER_LEN..];
        let expected = geometry.len() * width;
        if payload.len() < expected {
            return Err(Error::TruncatedPayload { expected, found: payload.len() });
        }
        if payload.len() > expected {
            return Err(Error::PayloadSizeMismatch { expected, found: payload.len() });
        }
        Ok(match dtype {
            DTYPE_F32 => {
                let values = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Volume::Scalar(VoxelGrid::new(geometry, values)?)
            }
            _ => Volume::Label(LabelGrid::new(geometry, payload.to_vec())?),
        })
    }
}

impl From<VoxelGrid> for Volume {
    fn from(g: VoxelGrid) -> Self {
        Volume::Scalar(g)
    }
}

impl From<LabelGrid> for Volume {
    fn from(g: LabelGrid) -> Self {
        Volume::Label(g)
    }
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    fs::write(path, volume.to_bytes())?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    Volume::from_bytes(&fs::read(path)?)
}

pub fn read_voxel_grid(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    match read_volume(path)? {
        Volume::Scalar(g) => Ok(g),
        v => Err(Error::DtypeMismatch { expected: "f32 scalar", found: v.kind() }),
    }
}

pub fn read_label_grid(path: impl AsRef<Path>) -> Result<LabelGrid> {
    match read_volume(path)? {
        Volume::Label(g) => Ok(g),
        v => Err(Error::DtypeMismatch { expected: "u8 label", found: v.kind() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let g = GridGeometry::new([3, 2, 2], [0.5, 0.5, 0.75], [-1.0, 2.0, 0.25]).unwrap();
        Volume::Scalar(VoxelGrid::new(g, (0..12).map(|i| i as f32 * 0.37 - 1.0).collect()).unwrap())
    }

    #[test]
    fn header_is_45_bytes() {
        let bytes = sample().to_bytes();
        assert_eq!(bytes.len(), 45 + 12 * 4);
        assert_eq!(&bytes[..4], b"G3DV");
        assert_eq!(bytes[44], DTYPE_F32);
    }

    #[test]
    fn distinct_errors_for_corrupt_files() {
        let good = sample().to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Volume::from_bytes(&bad), Err(Error::BadMagic { .. })));

        assert!(matches!(Volume::from_bytes(&good[..20]), Err(Error::TruncatedHeader(20))));

        assert!(matches!(
            Volume::from_bytes(&good[..good.len() - 3]),
            Err(Error::TruncatedPayload { .. })
        ));

        let mut long = good.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(Volume::from_bytes(&long), Err(Error::PayloadSizeMismatch { .. })));

        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(Volume::from_bytes(&v2), Err(Error::UnsupportedVersion(2))));

        let mut dt = good;
        dt[44] = 9;
        assert!(matches!(Volume::from_bytes(&dt), Err(Error::UnknownDtype(9))));
    }

    #[test]
    fn label_payload_is_validated() {
        let g = GridGeometry::with_dims([2, 1, 1]);
        let mut bytes = Volume::Label(LabelGrid::new(g, vec![1, 26]).unwrap()).to_bytes();
        *bytes.last_mut().unwrap() = 200;
        assert!(matches!(Volume::from_bytes(&bytes), Err(Error::InvalidLabel(200))));
    }
}
