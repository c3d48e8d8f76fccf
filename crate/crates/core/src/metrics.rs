//! Overlap and surface-distance metrics for binary masks.

use std::collections::VecDeque;

use crate::error::{CoreError, Result};
use crate::phantom::mean_region_hu;
use crate::volume::{class, Geometry, LabelVolume, Volume, Volume3D};

pub type BinaryMask = Volume<bool>;

/// Voxels equal to `class_id`.
pub fn class_mask(labels: &LabelVolume, class_id: u8) -> BinaryMask {
    labels.map(|l| l == class_id)
}

fn count(m: &BinaryMask) -> usize {
    m.voxels().iter().filter(|&&v| v).count()
}

/// `2|A∩B| / (|A| + |B|)`; 1 when both are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.geometry().ensure_same(b.geometry(), "dice operands")?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.voxels().iter().zip(b.voxels()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Face6,
    Full26,
}

fn neighbour_offsets(c: Connectivity) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let n = dx.abs() + dy.abs() + dz.abs();
                if n == 0 || (c == Connectivity::Face6 && n > 1) {
                    continue;
                }
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

#[inline]
fn step(g: &Geometry, p: [usize; 3], d: [isize; 3]) -> Option<[usize; 3]> {
    let mut q = [0usize; 3];
    for a in 0..3 {
        let v = p[a] as isize + d[a];
        if v < 0 || v >= g.dims[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some(q)
}

/// The component with the most voxels; ties go to the component containing
/// the smallest linear index.
pub fn largest_cc(a: &BinaryMask, connectivity: Connectivity) -> BinaryMask {
    let g = *a.geometry();
    let offsets = neighbour_offsets(connectivity);
    let mut comp = vec![0u32; g.len()];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..g.len() {
        if !a.voxels()[start] || comp[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let p = g.coords(i);
            for &d in &offsets {
                if let Some(q) = step(&g, p, d) {
                    let j = g.index(q[0], q[1], q[2]);
                    if a.voxels()[j] && comp[j] == 0 {
                        comp[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    let best = (1..sizes.len()).fold(0, |b, i| if b == 0 || sizes[i] > sizes[b] { i } else { b }) as u32;
    Volume::new(g, comp.into_iter().map(|c| best != 0 && c == best).collect()).expect("same geometry")
}

fn is_surface(m: &BinaryMask, p: [usize; 3]) -> bool {
    let g = m.geometry();
    neighbour_offsets(Connectivity::Face6)
        .into_iter()
        .any(|d| step(g, p, d).is_none_or(|q| !m.get(q[0], q[1], q[2])))
}

fn surface_indices(m: &BinaryMask) -> Vec<usize> {
    let g = m.geometry();
    (0..g.len()).filter(|&i| m.voxels()[i] && is_surface(m, g.coords(i))).collect()
}

/// Centres (mm) of foreground voxels with a background or out-of-bounds
/// face neighbour.
pub fn surface_voxels(m: &BinaryMask) -> Vec<[f64; 3]> {
    let g = m.geometry();
    surface_indices(m).into_iter().map(|i| g.position(g.coords(i))).collect()
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// seed voxel. Separable lower-envelope-of-parabolas transform.
pub fn squared_distance_transform(g: &Geometry, seeds: &[usize]) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; g.len()];
    for &i in seeds {
        d[i] = 0.0;
    }
    let [nx, ny, nz] = g.dims;
    let n_max = nx.max(ny).max(nz);
    let mut f = vec![0.0; n_max];
    let mut out = vec![0.0; n_max];
    let mut v = vec![0usize; n_max];
    let mut z = vec![0.0; n_max + 1];
    for (axis, n, stride) in [(0, nx, 1), (1, ny, nx), (2, nz, nx * ny)] {
        let s = g.spacing[axis];
        let lines = g.len() / n;
        for line in 0..lines {
            let base = (line / stride) * stride * n + line % stride;
            for k in 0..n {
                f[k] = d[base + k * stride];
            }
            envelope_1d(&f[..n], s, &mut out[..n], &mut v, &mut z);
            for k in 0..n {
                d[base + k * stride] = out[k];
            }
        }
    }
    d
}

/// 1D transform `out[q] = min_i f[i] + (s (q - i))²`.
fn envelope_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let s2 = s * s;
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.fill(f64::INFINITY);
        return;
    };
    let mut k = 0;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf))
    };
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut x = inter(q, v[k]);
        while x <= z[k] {
            k -= 1;
            x = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = x;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = s * (q as f64 - v[k] as f64);
        *o = d * d + f[v[k]];
    }
}

/// Average symmetric surface distance in mm. Errors when either mask is
/// empty.
pub fn assd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.geometry().ensure_same(b.geometry(), "assd operands")?;
    let (sa, sb) = (surface_indices(a), surface_indices(b));
    if sa.is_empty() || sb.is_empty() {
        return Err(CoreError::InvalidArgument("assd of an empty mask".into()));
    }
    let g = a.geometry();
    let da = squared_distance_transform(g, &sa);
    let db = squared_distance_transform(g, &sb);
    let total: f64 = sa.iter().map(|&i| db[i].sqrt()).sum::<f64>() + sb.iter().map(|&i| da[i].sqrt()).sum::<f64>();
    Ok(total / (sa.len() + sb.len()) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    /// DSC of the raw predicted mask.
    pub dsc: f64,
    /// DSC after keeping only the largest predicted component.
    pub dsc_lcc: f64,
    /// `None` when the prediction is empty.
    pub assd_mm: Option<f64>,
    pub bloodpool_mean_hu: f64,
}

/// DSC on the raw prediction, ASSD between the largest predicted component
/// and the reference, blood-pool HU from the reference LV cavity.
pub fn evaluate_case(
    case_id: &str,
    pred: &LabelVolume,
    reference: &LabelVolume,
    image: &Volume3D,
    class_id: u8,
) -> Result<CaseMetrics> {
    pred.geometry().ensure_same(reference.geometry(), "prediction vs reference")?;
    let r = class_mask(reference, class_id);
    if count(&r) == 0 {
        return Err(CoreError::InvalidArgument(format!("class {} absent from the reference", class_id)));
    }
    let p = class_mask(pred, class_id);
    let lcc = largest_cc(&p, Connectivity::Full26);
    let assd_mm = if count(&lcc) == 0 { None } else { Some(assd(&lcc, &r)?) };
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dsc: dice(&p, &r)?,
        dsc_lcc: dice(&lcc, &r)?,
        assd_mm,
        bloodpool_mean_hu: mean_region_hu(image, reference, class::LV_BLOOD)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> BinaryMask {
        let g = Geometry::isotropic(dims, 1.0).unwrap();
        let mut m = Volume::filled(g, false);
        for p in on {
            let i = g.index(p[0], p[1], p[2]);
            m.voxels_mut()[i] = true;
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = mask([4, 2, 1], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let b = mask([4, 2, 1], &[[2, 0, 0], [3, 0, 0], [0, 1, 0], [1, 1, 0]]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let e = mask([4, 2, 1], &[]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask([4, 2, 1], &[[0, 1, 0]])).unwrap(), 0.0);
    }

    #[test]
    fn components() {
        let diag = mask([3, 3, 3], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(largest_cc(&diag, Connectivity::Full26), diag);
        let only_first = largest_cc(&diag, Connectivity::Face6);
        assert_eq!(only_first, mask([3, 3, 3], &[[0, 0, 0]]));
        let blobs = mask([9, 1, 1], &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [4, 0, 0], [5, 0, 0], [6, 0, 0], [7, 0, 0], [8, 0, 0]]);
        assert_eq!(largest_cc(&blobs, Connectivity::Full26), mask([9, 1, 1], &[[4, 0, 0], [5, 0, 0], [6, 0, 0], [7, 0, 0], [8, 0, 0]]));
        let e = mask([2, 2, 2], &[]);
        assert_eq!(largest_cc(&e, Connectivity::Full26), e);
    }

    #[test]
    fn surfaces() {
        let cube: Vec<[usize; 3]> = (0..27).map(|i| [1 + i % 3, 1 + (i / 3) % 3, 1 + i / 9]).collect();
        assert_eq!(surface_voxels(&mask([5, 5, 5], &cube)).len(), 26);
        let full = Volume::filled(Geometry::isotropic([4, 4, 4], 1.0).unwrap(), true);
        assert_eq!(surface_voxels(&full).len(), 64 - 8);
        let g = Geometry::new([3, 3, 3], [0.5, 2.0, 1.0], [10.0, 0.0, 0.0]).unwrap();
        let mut one = Volume::filled(g, false);
        one.voxels_mut()[g.index(1, 2, 0)] = true;
        assert_eq!(surface_voxels(&one), vec![[10.5, 4.0, 0.0]]);
    }

    #[test]
    fn assd_examples() {
        let a = mask([4, 1, 1], &[[0, 0, 0]]);
        let b = mask([4, 1, 1], &[[3, 0, 0]]);
        assert_eq!(assd(&a, &b).unwrap(), 3.0);
        assert_eq!(assd(&a, &a).unwrap(), 0.0);
        assert!(assd(&a, &mask([4, 1, 1], &[])).is_err());
    }

    #[test]
    fn distance_transform_anisotropic() {
        let g = Geometry::new([5, 4, 3], [0.5, 1.5, 2.0], [0.0; 3]).unwrap();
        let seeds = [g.index(1, 0, 2), g.index(4, 3, 0)];
        let d = squared_distance_transform(&g, &seeds);
        for i in 0..g.len() {
            let p = g.position(g.coords(i));
            let want = seeds
                .iter()
                .map(|&s| {
                    let q = g.position(g.coords(s));
                    (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((d[i] - want).abs() < 1e-12, "{} {} {}", i, d[i], want);
        }
    }

    #[test]
    fn case_evaluation_with_speckle() {
        let g = Geometry::isotropic([12, 12, 12], 1.0).unwrap();
        let mut reference = Volume::filled(g, 0u8);
        for z in 2..6 {
            for y in 2..6 {
                for x in 2..6 {
                    reference.voxels_mut()[g.index(x, y, z)] = 1;
                }
            }
        }
        reference.voxels_mut()[g.index(8, 8, 8)] = 2;
        let image = Volume::filled(g, 340.0);
        let same = evaluate_case("c", &reference, &reference, &image, 1).unwrap();
        assert_eq!((same.dsc, same.assd_mm, same.bloodpool_mean_hu), (1.0, Some(0.0), 340.0));
        let mut speckled = reference.clone();
        speckled.voxels_mut()[g.index(11, 11, 11)] = 1;
        let m = evaluate_case("c", &speckled, &reference, &image, 1).unwrap();
        assert_eq!(m.assd_mm, Some(0.0));
        assert!(m.dsc < 1.0 && m.dsc > 0.98);
        let empty = evaluate_case("c", &Volume::filled(g, 0u8), &reference, &image, 1).unwrap();
        assert_eq!((empty.dsc, empty.assd_mm), (0.0, None));
        assert!(evaluate_case("c", &reference, &reference, &image, 5).is_err());
    }
}
