//! Scalar and label volumes with physical geometry, MetaImage I/O,
//! resampling and intensity transforms.
//!
//! Voxels are stored x-fastest, then y, then z. The physical position of index
//! `i` along axis `a` is `origin[a] + i * spacing[a]` (voxel centers).

mod metaimage;
mod resample;

pub use metaimage::{read_volume, write_volume, AnyVolume, ElementType};
pub use resample::{resample_nearest, resample_nearest_to, resample_trilinear, resample_trilinear_to, resampled_geometry};

use crate::error::{invalid, CoreError, Result};

/// Number of segmentation classes: background plus seven cardiac structures.
pub const NUM_CLASSES: usize = 8;

/// Cardiac structure label IDs.
pub mod class {
    pub const BACKGROUND: u8 = 0;
    pub const LV_MYOCARDIUM: u8 = 1;
    pub const LV_BLOOD: u8 = 2;
    pub const RV_BLOOD: u8 = 3;
    pub const LEFT_ATRIUM: u8 = 4;
    pub const RIGHT_ATRIUM: u8 = 5;
    pub const AORTA: u8 = 6;
    pub const PULMONARY_ARTERY: u8 = 7;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    /// Voxel counts `(nx, ny, nz)`.
    pub dims: [usize; 3],
    /// Millimetres per voxel.
    pub spacing: [f64; 3],
    /// Millimetre position of voxel `(0, 0, 0)`.
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return invalid(format!("dimensions must be >= 1, got {:?}", dims));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return invalid(format!("spacing must be positive and finite, got {:?}", spacing));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return invalid(format!("origin must be finite, got {:?}", origin));
        }
        Ok(Self { dims, spacing, origin })
    }

    pub fn isotropic(dims: [usize; 3], spacing: f64) -> Result<Self> {
        Self::new(dims, [spacing; 3], [0.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let r = index / self.dims[0];
        [x, r % self.dims[1], r / self.dims[1]]
    }

    /// Physical (mm) position of a voxel center.
    pub fn position(&self, c: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + c[a] as f64 * self.spacing[a])
    }

    pub fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self != other {
            return Err(CoreError::Geometry(format!("{}: {:?} vs {:?}", what, self, other)));
        }
        Ok(())
    }
}

/// A 3D grid of voxels of type `V` with physical geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<V> {
    geometry: Geometry,
    voxels: Vec<V>,
}

/// CT image in Hounsfield units.
pub type Volume3D = Volume<f64>;
/// Per-voxel class IDs in `0..NUM_CLASSES`.
pub type LabelVolume = Volume<u8>;
/// Window-normalized intensities in `[0, 1]`.
pub type NormalizedVolume = Volume<f32>;

impl<V: Copy> Volume<V> {
    pub fn new(geometry: Geometry, voxels: Vec<V>) -> Result<Self> {
        if voxels.len() != geometry.len() {
            return invalid(format!(
                "geometry {:?} needs {} voxels, got {}",
                geometry.dims,
                geometry.len(),
                voxels.len()
            ));
        }
        Ok(Self { geometry, voxels })
    }

    pub fn filled(geometry: Geometry, value: V) -> Self {
        Self { voxels: vec![value; geometry.len()], geometry }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn voxels(&self) -> &[V] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [V] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<V> {
        self.voxels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> V {
        self.voxels[self.geometry.index(x, y, z)]
    }

    pub fn map<W: Copy>(&self, f: impl Fn(V) -> W) -> Volume<W> {
        Volume { geometry: self.geometry, voxels: self.voxels.iter().map(|&v| f(v)).collect() }
    }

    /// Axis-aligned sub-block starting at `corner` with extent `size`.
    pub fn crop(&self, corner: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if size[a] == 0 || corner[a] + size[a] > self.geometry.dims[a] {
                return invalid(format!(
                    "crop {:?}+{:?} exceeds dims {:?}",
                    corner, size, self.geometry.dims
                ));
            }
        }
        let mut voxels = Vec::with_capacity(size.iter().product());
        for z in corner[2]..corner[2] + size[2] {
            for y in corner[1]..corner[1] + size[1] {
                let start = self.geometry.index(corner[0], y, z);
                voxels.extend_from_slice(&self.voxels[start..start + size[0]]);
            }
        }
        let origin = self.geometry.position(corner);
        Ok(Self { geometry: Geometry { dims: size, spacing: self.geometry.spacing, origin }, voxels })
    }
}

impl LabelVolume {
    /// Checks that every label is a valid class ID.
    pub fn validate_labels(&self) -> Result<()> {
        match self.voxels.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            Some(v) => invalid(format!("label {} outside 0..{}", v, NUM_CLASSES)),
            None => Ok(()),
        }
    }
}

/// Linear window mapping `lo -> 0` and `hi -> 1`, clamped to `[0, 1]`.
pub fn normalize_window(v: &Volume3D, lo: f64, hi: f64) -> Result<NormalizedVolume> {
    if !(lo < hi) {
        return invalid(format!("window needs lo < hi, got [{}, {}]", lo, hi));
    }
    let width = hi - lo;
    Ok(v.map(|x| ((x - lo) / width).clamp(0.0, 1.0) as f32))
}

/// The CT window used throughout: [-1024, 3071] HU.
pub const WINDOW_LO: f64 = -1024.0;
pub const WINDOW_HI: f64 = 3071.0;

/// Multiplies every voxel by `factor`; geometry unchanged, no clamping.
pub fn scale_hu(v: &Volume3D, factor: f64) -> Result<Volume3D> {
    if !(factor > 0.0) || !factor.is_finite() {
        return invalid(format!("scale factor must be positive, got {}", factor));
    }
    Ok(v.map(|x| x * factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(vals: &[f64]) -> Volume3D {
        Volume::new(Geometry::isotropic([vals.len(), 1, 1], 1.0).unwrap(), vals.to_vec()).unwrap()
    }

    #[test]
    fn geometry_invariants() {
        assert!(Geometry::isotropic([0, 1, 1], 1.0).is_err());
        assert!(Geometry::isotropic([1, 1, 1], 0.0).is_err());
        assert!(Volume::new(Geometry::isotropic([2, 2, 2], 1.0).unwrap(), vec![0u8; 7]).is_err());
        let g = Geometry::new([3, 4, 5], [0.5, 1.0, 2.0], [10.0, 0.0, -4.0]).unwrap();
        let i = g.index(2, 3, 4);
        assert_eq!(g.coords(i), [2, 3, 4]);
        assert_eq!(g.position([2, 3, 4]), [11.0, 3.0, 4.0]);
    }

    #[test]
    fn window_endpoints_midpoint_and_clamp() {
        let n = normalize_window(&vol(&[-1024.0, 3071.0, 1023.5, 4000.0, -3000.0]), WINDOW_LO, WINDOW_HI).unwrap();
        assert_eq!(n.voxels(), &[0.0, 1.0, 0.5, 1.0, 0.0]);
        assert!(normalize_window(&vol(&[0.0]), 5.0, 5.0).is_err());
    }

    #[test]
    fn scale_definition() {
        let v = vol(&[300.0, -1000.0]);
        assert_eq!(scale_hu(&v, 1.0).unwrap(), v);
        assert_eq!(scale_hu(&v, 2.0).unwrap().voxels()[0], 600.0);
        assert_eq!(scale_hu(&v, 0.5).unwrap().voxels()[1], -500.0);
        assert!(scale_hu(&v, 0.0).is_err());
    }

    #[test]
    fn crop_keeps_physical_position() {
        let g = Geometry::new([4, 3, 2], [1.0, 2.0, 3.0], [1.0, 1.0, 1.0]).unwrap();
        let v = Volume::new(g, (0..24).collect::<Vec<u32>>()).unwrap();
        let c = v.crop([1, 1, 1], [2, 2, 1]).unwrap();
        assert_eq!(c.voxels(), &[17, 18, 21, 22]);
        assert_eq!(c.geometry().origin, [2.0, 3.0, 4.0]);
        assert!(v.crop([3, 0, 0], [2, 1, 1]).is_err());
    }
}
