//! Stride decomposition: an exact partition of a grid with even dims into the
//! eight interleaved half-resolution grids obtained with a step of two voxels.

use crate::error::{Error, Result};
use crate::par;
use crate::volgrid::{Grid, GridGeometry};

/// The eight offsets in lexicographic order `(0,0,0), (0,0,1), .., (1,1,1)`,
/// written as `[a, b, c]` for the x, y and z axes.
pub const OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [0, 0, 1],
    [0, 1, 0],
    [0, 1, 1],
    [1, 0, 0],
    [1, 0, 1],
    [1, 1, 0],
    [1, 1, 1],
];

#[derive(Clone, Debug, PartialEq)]
pub struct StrideStack<G> {
    pub source_geometry: GridGeometry,
    /// Subvolume `i` holds the voxels at `2 * p + OFFSETS[i]`.
    pub subvolumes: Vec<G>,
}

impl<G: Grid> StrideStack<G> {
    pub fn offsets(&self) -> &'static [[usize; 3]; 8] {
        &OFFSETS
    }
}

fn sub_geometry(source: &GridGeometry, offset: [usize; 3]) -> GridGeometry {
    let mut g = *source;
    for a in 0..3 {
        g.dims[a] = source.dims[a] / 2;
        g.origin_mm[a] = source.origin_mm[a] + offset[a] as f32 * source.spacing_mm[a];
        g.spacing_mm[a] = source.spacing_mm[a] * 2.0;
    }
    g
}

pub fn stride_decompose<G: Grid + Send>(grid: &G) -> Result<StrideStack<G>> {
    let src = grid.geometry();
    if src.dims.iter().any(|d| d % 2 != 0) {
        return Err(Error::OddDimension(src.dims));
    }
    let data = grid.data();
    let subvolumes = par::map_indices(8, |k| {
        let off = OFFSETS[k];
        let geometry = sub_geometry(src, off);
        let [nx, ny, nz] = geometry.dims;
        let mut out = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.push(data[src.index(2 * x + off[0], 2 * y + off[1], 2 * z + off[2])]);
                }
            }
        }
        G::from_parts(geometry, out)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(StrideStack { source_geometry: *src, subvolumes })
}

pub fn stride_recompose<G: Grid>(stack: &StrideStack<G>) -> Result<G> {
    if stack.subvolumes.len() != 8 {
        return Err(Error::InconsistentStack(format!("{} subvolumes, expected 8", stack.subvolumes.len())));
    }
    let src = stack.source_geometry;
    src.validate()?;
    if src.dims.iter().any(|d| d % 2 != 0) {
        return Err(Error::OddDimension(src.dims));
    }
    let half = [src.dims[0] / 2, src.dims[1] / 2, src.dims[2] / 2];
    for (k, s) in stack.subvolumes.iter().enumerate() {
        if s.geometry().dims != half {
            return Err(Error::InconsistentStack(format!(
                "subvolume {k} has dims {:?}, expected {half:?}",
                s.geometry().dims
            )));
        }
    }
    let mut out = vec![stack.subvolumes[0].data()[0]; src.len()];
    for (k, s) in stack.subvolumes.iter().enumerate() {
        let off = OFFSETS[k];
        let data = s.data();
        let mut i = 0;
        for z in 0..half[2] {
            for y in 0..half[1] {
                for x in 0..half[0] {
                    out[src.index(2 * x + off[0], 2 * y + off[1], 2 * z + off[2])] = data[i];
                    i += 1;
                }
            }
        }
    }
    G::from_parts(src, out)
}
