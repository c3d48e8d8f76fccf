//! Full-volume prediction, argmax labelling and map averaging.

use myoseg_tensor::checkpoint::Checkpoint;
use myoseg_tensor::model::Model;
use myoseg_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::volume::{
    normalize_window, resample_trilinear, resample_trilinear_to, Geometry, LabelVolume, Volume, Volume3D,
    WINDOW_HI, WINDOW_LO,
};

/// Per-voxel class probabilities, stored as one plane per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    geometry: Geometry,
    num_classes: usize,
    data: Vec<f32>,
}

impl ProbabilityMap {
    /// `data` holds `num_classes` planes of `geometry.len()` voxels each.
    pub fn new(geometry: Geometry, num_classes: usize, data: Vec<f32>) -> Result<Self> {
        if num_classes < 1 || data.len() != num_classes * geometry.len() {
            return Err(CoreError::InvalidArgument(format!(
                "{} values for {} classes over {} voxels",
                data.len(),
                num_classes,
                geometry.len()
            )));
        }
        Ok(Self { geometry, num_classes, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.geometry.len();
        &self.data[c * n..(c + 1) * n]
    }

    /// One class as a scalar volume.
    pub fn channel(&self, c: usize) -> Volume<f32> {
        Volume::new(self.geometry, self.plane(c).to_vec()).expect("plane length")
    }

    /// Probability vector of voxel `i`.
    pub fn voxel(&self, i: usize) -> Vec<f32> {
        (0..self.num_classes).map(|c| self.data[c * self.geometry.len() + i]).collect()
    }

    /// Rescales every voxel's vector to sum to one.
    fn renormalize(&mut self) {
        let n = self.geometry.len();
        let mut sums = vec![0.0f64; n];
        for c in 0..self.num_classes {
            for (s, &p) in sums.iter_mut().zip(&self.data[c * n..(c + 1) * n]) {
                *s += p as f64;
            }
        }
        for c in 0..self.num_classes {
            for (p, &s) in self.data[c * n..(c + 1) * n].iter_mut().zip(&sums) {
                *p = if s > 0.0 { (*p as f64 / s) as f32 } else { 1.0 / self.num_classes as f32 };
            }
        }
    }
}

/// Symmetric zero padding that brings each dim up to a multiple of `m`.
pub fn symmetric_pad(dims: [usize; 3], m: usize) -> [(usize, usize); 3] {
    dims.map(|d| {
        let extra = (m - d % m) % m;
        (extra / 2, extra - extra / 2)
    })
}

/// Resample to `target_spacing`, window, pad, run the network in inference
/// mode, crop and resample the probabilities back onto `image`'s geometry.
pub fn predict(model: &Model<f32>, image: &Volume3D, target_spacing: f64) -> Result<ProbabilityMap> {
    let work = normalize_window(&resample_trilinear(image, [target_spacing; 3])?, WINDOW_LO, WINDOW_HI)?;
    let g = *work.geometry();
    let pad = symmetric_pad(g.dims, model.arch.size_multiple());
    let [px, py, pz] = std::array::from_fn(|a| g.dims[a] + pad[a].0 + pad[a].1);
    let mut input = vec![0.0f32; px * py * pz];
    for z in 0..g.dims[2] {
        for y in 0..g.dims[1] {
            let dst = (z + pad[2].0) * py * px + (y + pad[1].0) * px + pad[0].0;
            let src = g.index(0, y, z);
            input[dst..dst + g.dims[0]].copy_from_slice(&work.voxels()[src..src + g.dims[0]]);
        }
    }
    let probs = model.predict(&Tensor::from_vec(&[1, 1, pz, py, px], input)?)?;
    let c = model.arch.num_classes;
    let pd = probs.data();
    let mut data = Vec::with_capacity(c * image.geometry().len());
    let same = g == *image.geometry();
    for ch in 0..c {
        let plane = &pd[ch * px * py * pz..(ch + 1) * px * py * pz];
        let mut cropped = Vec::with_capacity(g.len());
        for z in 0..g.dims[2] {
            for y in 0..g.dims[1] {
                let s = (z + pad[2].0) * py * px + (y + pad[1].0) * px + pad[0].0;
                cropped.extend_from_slice(&plane[s..s + g.dims[0]]);
            }
        }
        if same {
            data.extend(cropped);
        } else {
            let vol = Volume::new(g, cropped)?;
            data.extend(resample_trilinear_to(&vol, image.geometry()).into_voxels());
        }
    }
    let mut map = ProbabilityMap::new(*image.geometry(), c, data)?;
    map.renormalize();
    Ok(map)
}

pub fn predict_checkpoint(checkpoint: &Checkpoint, image: &Volume3D, target_spacing: f64) -> Result<ProbabilityMap> {
    predict(&checkpoint.to_model()?, image, target_spacing)
}

/// Most probable class per voxel; ties go to the smaller class index.
pub fn argmax_labels(p: &ProbabilityMap) -> LabelVolume {
    let n = p.geometry.len();
    let mut best = vec![0u8; n];
    let mut best_p: Vec<f32> = p.plane(0).to_vec();
    for c in 1..p.num_classes {
        for ((b, bp), &v) in best.iter_mut().zip(best_p.iter_mut()).zip(p.plane(c)) {
            if v > *bp {
                *bp = v;
                *b = c as u8;
            }
        }
    }
    Volume::new(p.geometry, best).expect("plane length")
}

/// Voxelwise mean of two or more maps on the same geometry.
pub fn combine(maps: &[&ProbabilityMap]) -> Result<ProbabilityMap> {
    let first = maps.first().ok_or_else(|| CoreError::InvalidArgument("combine needs at least two maps".into()))?;
    if maps.len() < 2 {
        return Err(CoreError::InvalidArgument("combine needs at least two maps".into()));
    }
    for m in &maps[1..] {
        first.geometry.ensure_same(&m.geometry, "combined maps")?;
        if m.num_classes != first.num_classes {
            return Err(CoreError::Geometry(format!("{} vs {} classes", first.num_classes, m.num_classes)));
        }
    }
    let k = maps.len() as f64;
    let data = (0..first.data.len())
        .map(|i| (maps.iter().map(|m| m.data[i] as f64).sum::<f64>() / k) as f32)
        .collect();
    ProbabilityMap::new(first.geometry, first.num_classes, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(vals: &[&[f32]]) -> ProbabilityMap {
        let g = Geometry::isotropic([vals.len(), 1, 1], 1.0).unwrap();
        let c = vals[0].len();
        let data = (0..c).flat_map(|ch| vals.iter().map(move |v| v[ch])).collect();
        ProbabilityMap::new(g, c, data).unwrap()
    }

    #[test]
    fn argmax_rules() {
        let m = map(&[&[0.1, 0.7, 0.2], &[0.4, 0.2, 0.4], &[0.0, 0.0, 1.0]]);
        assert_eq!(argmax_labels(&m).voxels(), &[1, 0, 2]);
        let mut tie = vec![0.0; 8];
        tie[2] = 0.5;
        tie[5] = 0.5;
        assert_eq!(argmax_labels(&map(&[&tie])).voxels(), &[2]);
    }

    #[test]
    fn combine_rules() {
        let a = map(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        let b = map(&[&[0.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 0.0, 0.0]]);
        assert_eq!(combine(&[&a, &a]).unwrap(), a);
        let ab = combine(&[&a, &b]).unwrap();
        assert_eq!(ab, combine(&[&b, &a]).unwrap());
        assert_eq!(ab.voxel(0), vec![0.5, 0.0, 0.0, 0.5]);
        assert_eq!(argmax_labels(&ab).voxels(), &[0, 1]);
        assert!(combine(&[&a]).is_err());
        assert!(combine(&[&a, &map(&[&[1.0, 0.0, 0.0, 0.0]])]).is_err());
    }

    #[test]
    fn padding_is_symmetric() {
        assert_eq!(symmetric_pad([8, 9, 10], 4), [(0, 0), (1, 2), (1, 1)]);
    }
}
