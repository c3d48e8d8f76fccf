use super::{Geometry, LabelVolume, Volume, Volume3D};
use crate::error::{invalid, Result};

/// Geometry covering the same physical extent at `spacing`: same origin,
/// `ceil(n * s / t)` voxels per axis.
pub fn resampled_geometry(g: &Geometry, spacing: [f64; 3]) -> Result<Geometry> {
    if spacing.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return invalid(format!("target spacing must be positive, got {:?}", spacing));
    }
    let dims = std::array::from_fn(|a| {
        let exact = g.dims[a] as f64 * g.spacing[a] / spacing[a];
        // Absorb rounding noise so equal spacings keep the voxel count.
        ((exact - 1e-9 * exact.max(1.0)).ceil() as usize).max(1)
    });
    Geometry::new(dims, spacing, g.origin)
}

/// Continuous source index for target index `j` on axis `a`, clamped to the
/// source grid.
#[inline]
fn source_coord(src: &Geometry, dst: &Geometry, a: usize, j: usize) -> f64 {
    let u = j as f64 * (dst.spacing[a] / src.spacing[a]) + (dst.origin[a] - src.origin[a]) / src.spacing[a];
    u.clamp(0.0, (src.dims[a] - 1) as f64)
}

/// Per-axis lower index and fractional weight for every target index.
fn linear_taps(src: &Geometry, dst: &Geometry, a: usize) -> Vec<(usize, usize, f64)> {
    (0..dst.dims[a])
        .map(|j| {
            let u = source_coord(src, dst, a, j);
            let i0 = (u.floor() as usize).min(src.dims[a] - 1);
            let i1 = (i0 + 1).min(src.dims[a] - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect()
}

/// Trilinear interpolation of `data` (on `src`) at every voxel center of `dst`.
/// Positions outside the source grid clamp to the border.
pub fn resample_trilinear_to<V>(src: &Volume<V>, dst: &Geometry) -> Volume<V>
where
    V: Copy + Into<f64> + FromF64,
{
    let g = src.geometry();
    let tx = linear_taps(g, dst, 0);
    let ty = linear_taps(g, dst, 1);
    let tz = linear_taps(g, dst, 2);
    let v = src.voxels();
    let at = |x: usize, y: usize, z: usize| -> f64 { v[g.index(x, y, z)].into() };
    let lerp = |a: f64, b: f64, f: f64| if f == 0.0 { a } else { a + (b - a) * f };
    let mut out = Vec::with_capacity(dst.len());
    for &(z0, z1, fz) in &tz {
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
                let c0 = lerp(c00, c10, fy);
                let c1 = lerp(c01, c11, fy);
                out.push(V::from_f64(lerp(c0, c1, fz)));
            }
        }
    }
    Volume::new(*dst, out).expect("output sized from geometry")
}

/// Resamples an HU image to `spacing` (see [`resampled_geometry`]).
pub fn resample_trilinear(v: &Volume3D, spacing: [f64; 3]) -> Result<Volume3D> {
    let dst = resampled_geometry(v.geometry(), spacing)?;
    Ok(resample_trilinear_to(v, &dst))
}

/// Nearest-voxel-center label transfer onto `dst`; ties go to the smaller
/// index.
pub fn resample_nearest_to(src: &LabelVolume, dst: &Geometry) -> LabelVolume {
    let g = src.geometry();
    let nearest = |a: usize| -> Vec<usize> {
        (0..dst.dims[a])
            .map(|j| {
                let u = source_coord(g, dst, a, j);
                ((u - 0.5).ceil().max(0.0) as usize).min(g.dims[a] - 1)
            })
            .collect()
    };
    let (nx, ny, nz) = (nearest(0), nearest(1), nearest(2));
    let v = src.voxels();
    let mut out = Vec::with_capacity(dst.len());
    for &z in &nz {
        for &y in &ny {
            for &x in &nx {
                out.push(v[g.index(x, y, z)]);
            }
        }
    }
    Volume::new(*dst, out).expect("output sized from geometry")
}

pub fn resample_nearest(l: &LabelVolume, spacing: [f64; 3]) -> Result<LabelVolume> {
    let dst = resampled_geometry(l.geometry(), spacing)?;
    Ok(resample_nearest_to(l, &dst))
}

/// Conversion back from the interpolation type.
pub trait FromF64 {
    fn from_f64(x: f64) -> Self;
}

impl FromF64 for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
}

impl FromF64 for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(vals: &[f64], s: f64) -> Volume3D {
        Volume::new(Geometry::isotropic([vals.len(), 1, 1], s).unwrap(), vals.to_vec()).unwrap()
    }

    #[test]
    fn ramp_upsampled_matches_hand_evaluation() {
        let v = line(&[0.0, 10.0, 20.0, 30.0], 1.0);
        let r = resample_trilinear(&v, [0.5, 1.0, 1.0]).unwrap();
        assert_eq!(r.dims(), [8, 1, 1]);
        // centers at 0, 0.5, ..., 3.5 mm; 3.5 clamps to the last sample
        assert_eq!(r.voxels(), &[0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 30.0]);
    }

    #[test]
    fn constant_and_identity() {
        let g = Geometry::new([5, 4, 3], [0.7, 0.9, 1.3], [2.0, -1.0, 0.5]).unwrap();
        let c = Volume::filled(g, 250.0);
        for t in [[0.8, 0.8, 0.8], [0.33, 2.0, 1.0]] {
            assert!(resample_trilinear(&c, t).unwrap().voxels().iter().all(|&x| x == 250.0));
        }
        let v = Volume::new(g, (0..60).map(|i| (i * 7 % 11) as f64).collect()).unwrap();
        assert_eq!(resample_trilinear(&v, g.spacing).unwrap(), v);
        let l = v.map(|x| x as u8 % 8);
        assert_eq!(resample_nearest(&l, g.spacing).unwrap(), l);
    }

    #[test]
    fn nearest_ties_go_to_smaller_index() {
        let g = Geometry::isotropic([2, 1, 1], 1.0).unwrap();
        let l = Volume::new(g, vec![1u8, 2]).unwrap();
        let r = resample_nearest(&l, [0.5, 1.0, 1.0]).unwrap();
        assert_eq!(r.voxels(), &[1, 1, 2, 2]);
    }

    #[test]
    fn output_dims_use_ceil() {
        let g = Geometry::new([10, 7, 3], [0.45, 0.43, 0.9], [0.0; 3]).unwrap();
        let r = resampled_geometry(&g, [0.8; 3]).unwrap();
        assert_eq!(r.dims, [6, 4, 4]);
        assert!(resampled_geometry(&g, [0.8, 0.0, 0.8]).is_err());
    }
}
