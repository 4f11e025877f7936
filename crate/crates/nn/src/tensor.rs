use lobeseg_core::volgrid::{GridGeometry, VoxelGrid};

use crate::error::{NnError, Result};
use crate::real::Real;

/// Multi-channel volume, channel-major with x-fastest voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if channels == 0 || dims.iter().any(|&d| d == 0) {
            return Err(NnError::ShapeMismatch(format!("empty feature map {channels} x {dims:?}")));
        }
        let expected = channels * dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(NnError::ShapeMismatch(format!("{} values for {channels} x {dims:?}", data.len())));
        }
        Ok(Self { channels, dims, data })
    }

    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self { channels, dims, data: vec![T::zero(); channels * dims.iter().product::<usize>()] }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, voxel: usize) -> T {
        self.data[c * self.voxels() + voxel]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(NnError::NonFinite(i)),
            None => Ok(()),
        }
    }

    /// Stacks single-channel grids that share a geometry.
    pub fn from_grids(grids: &[VoxelGrid]) -> Result<Self> {
        let first = grids.first().ok_or_else(|| NnError::ShapeMismatch("no input channels".into()))?;
        let mut data = Vec::with_capacity(grids.len() * first.len());
        for g in grids {
            first.geometry.ensure_same(&g.geometry, "input channels")?;
            data.extend(g.values.iter().map(|&v| T::of(v as f64)));
        }
        Self::new(grids.len(), first.dims(), data)
    }

    pub fn to_grid(&self, c: usize, geometry: GridGeometry) -> Result<VoxelGrid> {
        if geometry.dims != self.dims {
            return Err(NnError::ShapeMismatch(format!("grid {:?} vs map {:?}", geometry.dims, self.dims)));
        }
        let values = self.channel(c).iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        Ok(VoxelGrid::new(geometry, values)?)
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap { channels: self.channels, dims: self.dims, data: self.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect() }
    }

    /// Voxel-wise argmax over channels; ties go to the smaller channel.
    pub fn argmax(&self) -> Vec<usize> {
        let n = self.voxels();
        (0..n)
            .map(|v| {
                let mut best = 0;
                for c in 1..self.channels {
                    if self.data[c * n + v] > self.data[best * n + v] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        let m = FeatureMap::<f32>::new(3, [2, 1, 1], vec![0.2, 0.5, 0.4, 0.5, 0.4, 0.0]).unwrap();
        assert_eq!(m.argmax(), vec![1, 0]);
    }

    #[test]
    fn shape_is_checked() {
        assert!(FeatureMap::<f32>::new(2, [2, 2, 2], vec![0.0; 15]).is_err());
        assert!(FeatureMap::<f32>::new(0, [2, 2, 2], vec![]).is_err());
    }
}
