//! Synthetic cardiac CT phantoms built from analytic solids.
//!
//! A phantom is a body ellipsoid containing the LV blood pool, the LV
//! myocardium (a shell around it), the RV, both atria and two great vessels.
//! Labels depend only on the geometry seed, dims and spacing; intensities
//! follow `tissue + compartment_factor * enhancement * contrast_level` per
//! class, then an optional 3x3x3 mean filter and Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, CoreError, Result};
use crate::volume::{class, Geometry, LabelVolume, Volume, Volume3D, NUM_CLASSES};

const MAX_ATTEMPTS: usize = 100;
/// Heart size relative to the smallest half-extent of the volume.
const HEART_SCALE: f64 = 1.15;
/// Minimum voxel count per structure for a draw to be accepted.
const MIN_STRUCTURE_VOXELS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub geometry_seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// HU added to fully enhanced blood.
    pub contrast_level: f64,
    pub noise_sigma: f64,
    /// Non-enhanced HU per class inside the body.
    pub tissue_hu: [f64; NUM_CLASSES],
    /// HU outside the body ellipsoid.
    pub air_hu: f64,
    /// Fraction of `contrast_level` added per class.
    pub enhancement_fraction: [f64; NUM_CLASSES],
    /// Multiplier on the enhancement term only.
    pub compartment_factor: f64,
    pub smooth: bool,
}

impl PhantomSpec {
    pub const DEFAULT_TISSUE_HU: [f64; NUM_CLASSES] = [40.0, 100.0, 40.0, 40.0, 40.0, 40.0, 40.0, 40.0];
    pub const DEFAULT_ENHANCEMENT: [f64; NUM_CLASSES] = [0.0, 0.1, 1.0, 0.9, 1.0, 0.9, 1.0, 0.85];

    /// Default 96³ phantom at 1 mm with the given seed and contrast.
    pub fn new(geometry_seed: u64, contrast_level: f64) -> Self {
        Self {
            geometry_seed,
            dims: [96; 3],
            spacing: [1.0; 3],
            contrast_level,
            noise_sigma: 20.0,
            tissue_hu: Self::DEFAULT_TISSUE_HU,
            air_hu: -1000.0,
            enhancement_fraction: Self::DEFAULT_ENHANCEMENT,
            compartment_factor: 1.0,
            smooth: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.contrast_level > 0.0) || !self.contrast_level.is_finite() {
            return invalid(format!("contrast_level must be > 0, got {}", self.contrast_level));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.compartment_factor > 0.0) || !self.compartment_factor.is_finite() {
            return invalid(format!("compartment_factor must be > 0, got {}", self.compartment_factor));
        }
        if let Some(f) = self.enhancement_fraction.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return invalid(format!("enhancement fractions must lie in [0, 1], got {}", f));
        }
        if self.tissue_hu.iter().chain([&self.air_hu]).any(|h| !h.is_finite()) {
            return invalid("tissue HU values must be finite");
        }
        Geometry::isotropic(self.dims, 1.0)?;
        Geometry::new(self.dims, self.spacing, [0.0; 3])?;
        Ok(())
    }

    /// Noiseless, unsmoothed HU of a voxel of class `c` inside the body.
    pub fn class_hu(&self, c: u8) -> f64 {
        let c = c as usize;
        self.tissue_hu[c] + self.compartment_factor * self.enhancement_fraction[c] * self.contrast_level
    }

    fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing, [0.0; 3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub image: Volume3D,
    pub labels: LabelVolume,
    pub spec: PhantomSpec,
    pub noise_seed: u64,
}

/// Same spec with only the compartment factor replaced.
pub fn contrast_variant(spec: &PhantomSpec, compartment_factor: f64) -> Result<PhantomSpec> {
    if !(compartment_factor > 0.0) || !compartment_factor.is_finite() {
        return invalid(format!("compartment factor must be > 0, got {}", compartment_factor));
    }
    Ok(PhantomSpec { compartment_factor, ..spec.clone() })
}

pub fn generate(spec: &PhantomSpec, noise_seed: u64) -> Result<PhantomCase> {
    spec.validate()?;
    let geometry = spec.geometry()?;
    let layout = Layout::draw(spec, &geometry)?;
    let hu: Vec<f64> = (0..NUM_CLASSES as u8).map(|c| spec.class_hu(c)).collect();
    let mut image: Vec<f64> = layout
        .labels
        .iter()
        .zip(&layout.body)
        .map(|(&l, &inside)| if inside { hu[l as usize] } else { spec.air_hu })
        .collect();
    if spec.smooth {
        image = mean_filter3(&geometry, &image);
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| CoreError::Phantom(e.to_string()))?;
        for v in &mut image {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(PhantomCase {
        image: Volume::new(geometry, image)?,
        labels: Volume::new(geometry, layout.labels)?,
        spec: spec.clone(),
        noise_seed,
    })
}

/// Mean HU over voxels labelled `class_id`.
pub fn mean_region_hu(image: &Volume3D, labels: &LabelVolume, class_id: u8) -> Result<f64> {
    image.geometry().ensure_same(labels.geometry(), "image vs labels")?;
    let (sum, n) = image
        .voxels()
        .iter()
        .zip(labels.voxels())
        .filter(|(_, &l)| l == class_id)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
    if n == 0 {
        return invalid(format!("class {} absent from the label map", class_id));
    }
    Ok(sum / n as f64)
}

/// 3x3x3 box filter with edge replication.
fn mean_filter3(g: &Geometry, v: &[f64]) -> Vec<f64> {
    let [nx, ny, nz] = g.dims;
    // Separable: three 1D passes of width 3.
    let pass = |src: &[f64], axis: usize| -> Vec<f64> {
        let (n, stride) = match axis {
            0 => (nx, 1),
            1 => (ny, nx),
            _ => (nz, nx * ny),
        };
        let mut out = vec![0.0; src.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let k = (i / stride) % n;
            let lo = if k == 0 { i } else { i - stride };
            let hi = if k + 1 == n { i } else { i + stride };
            *o = (src[lo] + src[i] + src[hi]) / 3.0;
        }
        out
    };
    pass(&pass(&pass(v, 0), 1), 2)
}

type Vec3 = [f64; 3];

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalized(a: Vec3) -> Vec3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: Vec3,
    axes: [Vec3; 3],
    radii: Vec3,
}

impl Ellipsoid {
    fn value(&self, p: Vec3) -> f64 {
        let d = sub(p, self.center);
        (0..3).map(|i| (dot(d, self.axes[i]) / self.radii[i]).powi(2)).sum()
    }

    fn contains(&self, p: Vec3) -> bool {
        self.value(p) <= 1.0
    }

    fn grown(&self, t: f64) -> Self {
        Self { radii: self.radii.map(|r| r + t), ..*self }
    }

    /// Points spread over the surface (Fibonacci lattice).
    fn surface_samples(&self, n: usize) -> impl Iterator<Item = Vec3> + '_ {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n).map(move |i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let unit = [r * phi.cos(), r * phi.sin(), z];
            (0..3).fold(self.center, |p, k| add(p, scale(self.axes[k], unit[k] * self.radii[k])))
        })
    }
}

/// Half-infinite cylinder starting at `start` along unit `dir`.
#[derive(Debug, Clone, Copy)]
struct Cylinder {
    start: Vec3,
    dir: Vec3,
    radius: f64,
}

impl Cylinder {
    fn contains(&self, p: Vec3) -> bool {
        let d = sub(p, self.start);
        let t = dot(d, self.dir);
        if t < 0.0 {
            return false;
        }
        let r = sub(d, scale(self.dir, t));
        dot(r, r) <= self.radius * self.radius
    }
}

fn rotation(rng: &mut ChaCha8Rng) -> [Vec3; 3] {
    let a: f64 = rng.random_range(-0.35..0.35);
    let b: f64 = rng.random_range(-0.35..0.35);
    let c: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let rx = |v: Vec3| [v[0], a.cos() * v[1] - a.sin() * v[2], a.sin() * v[1] + a.cos() * v[2]];
    let ry = |v: Vec3| [b.cos() * v[0] + b.sin() * v[2], v[1], -b.sin() * v[0] + b.cos() * v[2]];
    let rz = |v: Vec3| [c.cos() * v[0] - c.sin() * v[1], c.sin() * v[0] + c.cos() * v[1], v[2]];
    let r = |v: Vec3| rz(ry(rx(v)));
    // (lateral, anterior, long axis); the long axis points roughly superior.
    [r([1.0, 0.0, 0.0]), r([0.0, 1.0, 0.0]), r([0.0, 0.0, 1.0])]
}

struct Solids {
    body: Ellipsoid,
    lv: Ellipsoid,
    myo_outer: Ellipsoid,
    rv: Ellipsoid,
    la: Ellipsoid,
    ra: Ellipsoid,
    aorta: Cylinder,
    pa: Cylinder,
}

impl Solids {
    fn draw(rng: &mut ChaCha8Rng, g: &Geometry) -> Self {
        let half: Vec3 = std::array::from_fn(|a| g.dims[a] as f64 * g.spacing[a] / 2.0);
        let center: Vec3 = std::array::from_fn(|a| g.origin[a] + (g.dims[a] as f64 - 1.0) * g.spacing[a] / 2.0);
        let s = half.iter().cloned().fold(f64::INFINITY, f64::min);
        let world = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let body = Ellipsoid {
            center,
            axes: world,
            radii: std::array::from_fn(|a| half[a] * rng.random_range(0.90..0.97)),
        };
        let [v, w, u] = rotation(rng);
        let body_s = s;
        let s = HEART_SCALE * s;
        let mut heart = center;
        for (a, h) in heart.iter_mut().enumerate() {
            *h += rng.random_range(-0.05..0.05) * body_s;
            if a == 2 {
                *h -= 0.16 * body_s;
            }
        }
        let long = rng.random_range(0.34..0.40) * s;
        let short = rng.random_range(0.18..0.22) * s;
        let thick = rng.random_range(0.12..0.15) * s;
        let frame = [v, w, u];
        let lv = Ellipsoid { center: heart, axes: frame, radii: [short, short * rng.random_range(0.9..1.1), long] };
        let myo_outer = lv.grown(thick);
        let rv_center = add(add(heart, scale(v, short + thick + 0.10 * s)), scale(u, -0.04 * s));
        let rv = Ellipsoid {
            center: rv_center,
            axes: frame,
            radii: [rng.random_range(0.15..0.19) * s, rng.random_range(0.24..0.28) * s, rng.random_range(0.28..0.33) * s],
        };
        let la = Ellipsoid {
            center: add(add(heart, scale(u, long + 0.14 * s)), scale(v, -0.10 * s)),
            axes: frame,
            radii: [rng.random_range(0.15..0.19) * s, rng.random_range(0.13..0.16) * s, rng.random_range(0.13..0.16) * s],
        };
        let ra = Ellipsoid {
            center: add(add(heart, scale(u, long + 0.06 * s)), scale(v, short + thick + 0.20 * s)),
            axes: frame,
            radii: [rng.random_range(0.14..0.17) * s, rng.random_range(0.13..0.16) * s, rng.random_range(0.15..0.18) * s],
        };
        let up = [0.0, 0.0, 1.0];
        let aorta = Cylinder {
            start: add(add(heart, scale(u, 0.6 * long)), scale(w, 0.12 * s)),
            dir: normalized(add(u, up)),
            radius: rng.random_range(0.10..0.12) * s,
        };
        let pa = Cylinder {
            start: add(rv_center, scale(w, 0.14 * s)),
            dir: normalized(add(add(u, up), scale(v, 0.3))),
            radius: rng.random_range(0.09..0.11) * s,
        };
        Self { body, lv, myo_outer, rv, la, ra, aorta, pa }
    }

    /// Chambers lie inside the body and at least one voxel away from the
    /// volume faces.
    fn contained(&self, g: &Geometry) -> bool {
        let inner = Ellipsoid { radii: self.body.radii.map(|r| r * 0.98), ..self.body };
        [&self.myo_outer, &self.rv, &self.la, &self.ra].iter().all(|e| {
            e.surface_samples(400).all(|p| {
                inner.contains(p)
                    && (0..3).all(|a| {
                        let lo = g.origin[a] + g.spacing[a];
                        let hi = g.origin[a] + (g.dims[a] as f64 - 2.0) * g.spacing[a];
                        (lo..=hi).contains(&p[a])
                    })
            })
        })
    }

    fn label(&self, p: Vec3) -> (u8, bool) {
        if !self.body.contains(p) {
            return (class::BACKGROUND, false);
        }
        let l = if self.myo_outer.contains(p) {
            if self.lv.contains(p) {
                class::LV_BLOOD
            } else {
                class::LV_MYOCARDIUM
            }
        } else if self.rv.contains(p) {
            class::RV_BLOOD
        } else if self.la.contains(p) {
            class::LEFT_ATRIUM
        } else if self.ra.contains(p) {
            class::RIGHT_ATRIUM
        } else if self.aorta.contains(p) {
            class::AORTA
        } else if self.pa.contains(p) {
            class::PULMONARY_ARTERY
        } else {
            class::BACKGROUND
        };
        (l, true)
    }
}

struct Layout {
    labels: Vec<u8>,
    body: Vec<bool>,
}

impl Layout {
    fn draw(spec: &PhantomSpec, g: &Geometry) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.geometry_seed);
        for _ in 0..MAX_ATTEMPTS {
            let solids = Solids::draw(&mut rng, g);
            if !solids.contained(g) {
                continue;
            }
            let mut labels = Vec::with_capacity(g.len());
            let mut body = Vec::with_capacity(g.len());
            let mut counts = [0usize; NUM_CLASSES];
            for z in 0..g.dims[2] {
                for y in 0..g.dims[1] {
                    for x in 0..g.dims[0] {
                        let (l, inside) = solids.label(g.position([x, y, z]));
                        counts[l as usize] += 1;
                        labels.push(l);
                        body.push(inside);
                    }
                }
            }
            if counts[1..].iter().all(|&c| c >= MIN_STRUCTURE_VOXELS) {
                return Ok(Self { labels, body });
            }
        }
        Err(CoreError::Phantom(format!(
            "no valid layout for dims {:?} at spacing {:?} after {} attempts",
            g.dims, g.spacing, MAX_ATTEMPTS
        )))
    }
}
