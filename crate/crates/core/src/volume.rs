//! Dense 3D scalar grids.
//!
//! A [`Volume`] is an immutable-by-convention box of `f64` samples with an
//! x-fastest linear layout: `index = x + nx * (y + ny * z)`. Spacing is
//! carried in millimeters per voxel but all distances in this crate are
//! measured in voxel units; spacing only travels along for reporting.

use crate::error::{Error, Result};

/// Dense 3D scalar grid, 64-bit throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        Self::with_spacing(dims, (1.0, 1.0, 1.0), data)
    }

    pub fn with_spacing(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        data: Vec<f64>,
    ) -> Result<Self> {
        if dims.0 < 1 || dims.1 < 1 || dims.2 < 1 {
            return Err(Error::InvalidVolume(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let n = dims.0 * dims.1 * dims.2;
        if data.len() != n {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Volume::filled(dims, 0.0)
    }

    pub fn filled(dims: (usize, usize, usize), value: f64) -> Self {
        let n = dims.0.max(1) * dims.1.max(1) * dims.2.max(1);
        Volume {
            dims,
            spacing: (1.0, 1.0, 1.0),
            data: vec![value; n],
        }
    }

    /// Single-voxel volume holding `value`; the scalar shape used by tape ops.
    pub fn scalar(value: f64) -> Self {
        Volume::filled((1, 1, 1), value)
    }

    pub fn from_fn(
        dims: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(dims.0 * dims.1 * dims.2);
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume {
            dims,
            spacing: (1.0, 1.0, 1.0),
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn set_spacing(&mut self, spacing: (f64, f64, f64)) -> Result<()> {
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(Error::InvalidVolume(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        self.spacing = spacing;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.dims.0;
        let y = (idx / self.dims.0) % self.dims.1;
        let z = idx / (self.dims.0 * self.dims.1);
        (x, y, z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.idx(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.idx(x, y, z);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.dims == other.dims
    }

    pub fn check_same_shape(&self, other: &Volume) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(self.dims, other.dims))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// True when every sample is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Extract the box starting at `origin` with shape `shape` (must fit).
    pub fn crop(&self, origin: (usize, usize, usize), shape: (usize, usize, usize)) -> Result<Volume> {
        if origin.0 + shape.0 > self.dims.0
            || origin.1 + shape.1 > self.dims.1
            || origin.2 + shape.2 > self.dims.2
        {
            return Err(Error::InvalidVolume(format!(
                "crop {shape:?} at {origin:?} exceeds dims {:?}",
                self.dims
            )));
        }
        let mut out = Volume::zeros(shape);
        out.spacing = self.spacing;
        for z in 0..shape.2 {
            for y in 0..shape.1 {
                let src = self.idx(origin.0, origin.1 + y, origin.2 + z);
                let dst = out.idx(0, y, z);
                out.data[dst..dst + shape.0].copy_from_slice(&self.data[src..src + shape.0]);
            }
        }
        Ok(out)
    }
}

/// Constant 3D filter with odd extents; taps are addressed by signed offsets
/// from the center anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel3 {
    size: (usize, usize, usize),
    weights: Vec<f64>,
}

impl Kernel3 {
    pub fn new(size: (usize, usize, usize), weights: Vec<f64>) -> Result<Self> {
        if size.0 % 2 == 0 || size.1 % 2 == 0 || size.2 % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "kernel size components must be odd, got {size:?}"
            )));
        }
        if weights.len() != size.0 * size.1 * size.2 {
            return Err(Error::InvalidParam(format!(
                "kernel weights length {} does not match size {:?}",
                weights.len(),
                size
            )));
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(Error::InvalidParam("kernel weights must be finite".into()));
        }
        Ok(Kernel3 { size, weights })
    }

    /// Identity kernel: center tap 1, everything else 0.
    pub fn delta(size: (usize, usize, usize)) -> Result<Self> {
        let mut weights = vec![0.0; size.0 * size.1 * size.2];
        let center = (size.0 / 2) + size.0 * ((size.1 / 2) + size.1 * (size.2 / 2));
        if !weights.is_empty() {
            weights[center] = 1.0;
        }
        Kernel3::new(size, weights)
    }

    pub fn size(&self) -> (usize, usize, usize) {
        self.size
    }

    pub fn radius(&self) -> (usize, usize, usize) {
        (self.size.0 / 2, self.size.1 / 2, self.size.2 / 2)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Tap value at signed offset from the anchor.
    pub fn at(&self, dx: isize, dy: isize, dz: isize) -> f64 {
        let (rx, ry, rz) = self.radius();
        let ix = (dx + rx as isize) as usize;
        let iy = (dy + ry as isize) as usize;
        let iz = (dz + rz as isize) as usize;
        self.weights[ix + self.size.0 * (iy + self.size.1 * iz)]
    }

    /// Kernel as a volume (used to lift constant kernels onto the tape).
    pub fn to_volume(&self) -> Volume {
        Volume::new(self.size, self.weights.clone()).expect("kernel shape is validated")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_x_fastest() {
        let v = Volume::from_fn((3, 2, 2), |x, y, z| (x + 10 * y + 100 * z) as f64);
        assert_eq!(v.data()[0], 0.0);
        assert_eq!(v.data()[1], 1.0);
        assert_eq!(v.data()[3], 10.0);
        assert_eq!(v.idx(2, 1, 1), 2 + 3 * (1 + 2 * 1));
        assert_eq!(v.coords(v.idx(2, 1, 1)), (2, 1, 1));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Volume::new((2, 2, 2), vec![0.0; 7]).is_err());
        assert!(Volume::with_spacing((2, 2, 2), (0.0, 1.0, 1.0), vec![0.0; 8]).is_err());
        assert!(Kernel3::new((2, 3, 3), vec![0.0; 18]).is_err());
    }

    #[test]
    fn delta_kernel_center_tap() {
        let k = Kernel3::delta((3, 3, 3)).unwrap();
        assert_eq!(k.at(0, 0, 0), 1.0);
        assert_eq!(k.at(1, 0, -1), 0.0);
        assert_eq!(k.weights().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn crop_extracts_box() {
        let v = Volume::from_fn((4, 4, 4), |x, y, z| (x + 4 * y + 16 * z) as f64);
        let c = v.crop((1, 2, 3), (2, 1, 1)).unwrap();
        assert_eq!(c.data(), &[v.get(1, 2, 3), v.get(2, 2, 3)]);
        assert!(v.crop((3, 3, 3), (2, 2, 2)).is_err());
    }
}
