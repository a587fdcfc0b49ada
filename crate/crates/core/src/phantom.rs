//! Synthetic chest CT phantoms with paired ground truth.
//!
//! A phantom is an air-filled cube holding a soft-tissue body ellipsoid with
//! two lung ellipsoids inside. Lungs carry smooth parenchymal noise and a few
//! bright vessel tubes. Infected phantoms add superellipsoid lesions with soft
//! edges at ground-glass intensities; the lesion-free twin is kept as an
//! oracle for testing the post-processing in isolation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imgvol::{
    write_manifest, write_mask, write_slice, write_volume, BinaryMask, CtVolume, Grid,
    ManifestEntry, SliceLabel, Unit,
};
use crate::pipeline::{preprocess, PreprocessConfig};

pub const AIR_HU: f64 = -1000.0;

/// Vessel tube intensity range.
pub const VESSEL_HU: [f64; 2] = [-200.0, 0.0];

/// Width of the soft lesion edge, in units of the normalized superellipsoid radius.
pub const LESION_EDGE: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// Voxels per side (1 mm isotropic).
    pub size: usize,
    pub seed: u64,
    pub lung_hu: [f64; 2],
    pub body_hu: [f64; 2],
    /// Vessel segments per lung.
    pub vessels_per_lung: usize,
    pub lesion_count: [usize; 2],
    pub lesion_hu: [f64; 2],
    /// Semi-axis range in voxels.
    pub lesion_radius: [f64; 2],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 64,
            seed: 0,
            lung_hu: [-850.0, -700.0],
            body_hu: [0.0, 60.0],
            vessels_per_lung: 3,
            lesion_count: [1, 3],
            lesion_hu: [-600.0, -300.0],
            lesion_radius: [3.0, 7.0],
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(&self, seed: u64) -> PhantomSpec {
        PhantomSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.size < 16 {
            return Err(invalid!("phantom size must be >= 16, got {}", self.size));
        }
        for (name, r) in [
            ("lung_hu", self.lung_hu),
            ("body_hu", self.body_hu),
            ("lesion_hu", self.lesion_hu),
            ("lesion_radius", self.lesion_radius),
        ] {
            if !ordered(r) {
                return Err(invalid!("{name} must be an ordered finite range, got {r:?}"));
            }
        }
        if self.lesion_count[0] > self.lesion_count[1] {
            return Err(invalid!("lesion_count range is empty: {:?}", self.lesion_count));
        }
        if self.lesion_hu[0] < self.lung_hu[1] + 50.0 {
            return Err(invalid!(
                "lesion_hu {:?} must start at least 50 HU above the lung range {:?}",
                self.lesion_hu,
                self.lung_hu
            ));
        }
        if self.lesion_hu[1] > 100.0 || self.lung_hu[0] < -1000.0 {
            return Err(invalid!("lung and lesion intensities must lie within [-1000, 100] HU"));
        }
        if self.lesion_radius[0] < 1.0 {
            return Err(invalid!("lesion radius must be >= 1 voxel"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid {
            dims: [self.size; 3],
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }
}

/// Smooth noise in [0, 1]: trilinear interpolation of a coarse random lattice.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = cells + 1;
        ValueNoise {
            cells,
            lattice: (0..n * n * n).map(|_| rng.random::<f64>()).collect(),
        }
    }

    /// `p` in [0, 1]^3.
    fn at(&self, p: [f64; 3]) -> f64 {
        let n = self.cells + 1;
        let mut i = [0usize; 3];
        let mut f = [0.0; 3];
        for a in 0..3 {
            let u = (p[a] * self.cells as f64).clamp(0.0, self.cells as f64 - 1e-9);
            i[a] = u.floor() as usize;
            f[a] = u - i[a] as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                w *= if hi { f[a] } else { 1.0 - f[a] };
                idx[a] = i[a] + hi as usize;
            }
            acc += w * self.lattice[idx[0] + n * (idx[1] + n * idx[2])];
        }
        acc
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2)).sum()
    }
}

/// Normalized coordinates in [-1, 1] of voxel `(x, y, z)`.
fn unit_coords(size: usize, x: usize, y: usize, z: usize) -> [f64; 3] {
    let u = |i: usize| (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
    [u(x), u(y), u(z)]
}

fn lerp(r: [f64; 2], t: f64) -> f64 {
    r[0] + (r[1] - r[0]) * t
}

/// Distance from `p` to segment `ab`.
fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: Vec<f64> = (0..3).map(|i| b[i] - a[i]).collect();
    let ap: Vec<f64> = (0..3).map(|i| p[i] - a[i]).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug)]
pub struct Healthy {
    pub volume: CtVolume,
    pub lung: BinaryMask,
}

fn healthy_with_rng(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Healthy> {
    spec.validate()?;
    let n = spec.size;
    let grid = spec.grid();
    let jitter = |rng: &mut ChaCha8Rng, s: f64| 1.0 + rng.random_range(-s..=s);
    let body = Ellipsoid {
        center: [0.0; 3],
        axes: [0.92 * jitter(rng, 0.02), 0.76 * jitter(rng, 0.02), 0.96],
    };
    let lungs: Vec<Ellipsoid> = [-1.0, 1.0]
        .iter()
        .map(|&side| Ellipsoid {
            center: [side * 0.41 * jitter(rng, 0.04), 0.02 * rng.random_range(-1.0..=1.0), 0.0],
            axes: [
                0.34 * jitter(rng, 0.05),
                0.52 * jitter(rng, 0.05),
                0.74 * jitter(rng, 0.05),
            ],
        })
        .collect();
    let body_noise = ValueNoise::new(4, rng);
    let lung_noise = ValueNoise::new(8, rng);

    let mut vessels = Vec::new();
    for lung in &lungs {
        for _ in 0..spec.vessels_per_lung {
            let pick = |rng: &mut ChaCha8Rng| -> [f64; 3] {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = lung.center[a] + 0.8 * lung.axes[a] * rng.random_range(-1.0..=1.0) / 3f64.sqrt();
                }
                p
            };
            let a = pick(rng);
            let b = pick(rng);
            let radius = rng.random_range(0.6..=1.2) * 2.0 / n as f64;
            let hu = lerp(VESSEL_HU, rng.random::<f64>());
            vessels.push((a, b, radius, hu));
        }
    }

    let mut data = vec![0f32; n * n * n];
    let mut lung_mask = vec![0u8; n * n * n];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = unit_coords(n, x, y, z);
                let q = [(p[0] + 1.0) / 2.0, (p[1] + 1.0) / 2.0, (p[2] + 1.0) / 2.0];
                let i = grid.index(x, y, z);
                let hu = if body.level(p) > 1.0 {
                    AIR_HU
                } else if lungs.iter().any(|l| l.level(p) <= 1.0) {
                    lung_mask[i] = 1;
                    let mut v = lerp(spec.lung_hu, lung_noise.at(q));
                    for &(a, b, r, vh) in &vessels {
                        if segment_distance(p, a, b) <= r {
                            v = v.max(vh);
                        }
                    }
                    v
                } else {
                    lerp(spec.body_hu, body_noise.at(q))
                };
                data[i] = hu as f32;
            }
        }
    }
    Ok(Healthy {
        volume: CtVolume::new(grid.clone(), Unit::Hounsfield, data)?,
        lung: BinaryMask::new(grid, lung_mask)?,
    })
}

pub fn gen_healthy(spec: &PhantomSpec) -> Result<Healthy> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    healthy_with_rng(spec, &mut rng)
}

/// One placed lesion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Voxel coordinates.
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub exponent: f64,
    pub hu: f64,
}

impl Lesion {
    /// Normalized superellipsoid radius of voxel `(x, y, z)`; 1 on the boundary.
    pub fn rho(&self, x: usize, y: usize, z: usize) -> f64 {
        let p = [x as f64, y as f64, z as f64];
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).abs().powf(self.exponent))
            .sum::<f64>()
            .powf(1.0 / self.exponent)
    }

    /// Blend weight: 1 inside, smooth falloff to 0 across the edge band.
    pub fn weight(&self, x: usize, y: usize, z: usize) -> f64 {
        let rho = self.rho(x, y, z);
        if rho <= 1.0 {
            1.0
        } else if rho >= 1.0 + LESION_EDGE {
            0.0
        } else {
            let t = (rho - 1.0) / LESION_EDGE;
            1.0 - t * t * (3.0 - 2.0 * t)
        }
    }

    /// Inclusive voxel bounding box of the blended support.
    fn support(&self, n: usize) -> [(usize, usize); 3] {
        let mut out = [(0, 0); 3];
        for a in 0..3 {
            let r = self.radii[a] * (1.0 + LESION_EDGE) + 1.0;
            let lo = (self.center[a] - r).floor().max(0.0) as usize;
            let hi = ((self.center[a] + r).ceil() as usize).min(n - 1);
            out[a] = (lo, hi);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Infected {
    pub volume: CtVolume,
    pub lung: BinaryMask,
    pub lesion: BinaryMask,
    /// The lesion-free twin. For oracle tests only; never a training input.
    pub healthy: CtVolume,
    pub lesions: Vec<Lesion>,
    pub requested: usize,
}

impl Infected {
    /// True when fewer lesions than requested could be placed.
    pub fn placement_shortfall(&self) -> bool {
        self.lesions.len() < self.requested
    }
}

const PLACEMENT_TRIES: usize = 200;

pub fn gen_infected(spec: &PhantomSpec) -> Result<Infected> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let Healthy { volume: healthy, lung } = healthy_with_rng(spec, &mut rng)?;
    let n = spec.size;
    let grid = spec.grid();
    let requested = rng.random_range(spec.lesion_count[0]..=spec.lesion_count[1]);
    let lung_voxels: Vec<usize> = (0..grid.len()).filter(|&i| lung.data()[i] != 0).collect();

    let mut lesions = Vec::new();
    let mut lesion = vec![0u8; grid.len()];
    for _ in 0..requested {
        for _ in 0..PLACEMENT_TRIES {
            let i = lung_voxels[rng.random_range(0..lung_voxels.len())];
            let (x, y, z) = (i % n, (i / n) % n, i / (n * n));
            let mut radii = [0.0; 3];
            for r in &mut radii {
                *r = lerp(spec.lesion_radius, rng.random::<f64>());
            }
            let cand = Lesion {
                center: [
                    x as f64 + rng.random_range(-0.5..0.5),
                    y as f64 + rng.random_range(-0.5..0.5),
                    z as f64 + rng.random_range(-0.5..0.5),
                ],
                radii,
                exponent: rng.random_range(2.0..=3.0),
                hu: lerp(spec.lesion_hu, rng.random::<f64>()),
            };
            let [(x0, x1), (y0, y1), (z0, z1)] = cand.support(n);
            let mut fits = true;
            'scan: for zz in z0..=z1 {
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        if cand.rho(xx, yy, zz) <= 1.0 && !lung.get(xx, yy, zz) {
                            fits = false;
                            break 'scan;
                        }
                    }
                }
            }
            if fits {
                for zz in z0..=z1 {
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            if cand.rho(xx, yy, zz) <= 1.0 {
                                lesion[grid.index(xx, yy, zz)] = 1;
                            }
                        }
                    }
                }
                lesions.push(cand);
                break;
            }
        }
    }

    let mut data = healthy.data().to_vec();
    for les in &lesions {
        let [(x0, x1), (y0, y1), (z0, z1)] = les.support(n);
        for zz in z0..=z1 {
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if !lung.get(xx, yy, zz) {
                        continue;
                    }
                    let w = les.weight(xx, yy, zz);
                    if w > 0.0 {
                        let i = grid.index(xx, yy, zz);
                        let base = data[i] as f64;
                        data[i] = (base + w * (les.hu - base).max(0.0)) as f32;
                    }
                }
            }
        }
    }
    if lesions.len() < requested {
        log::warn!(
            "phantom seed {}: placed {} of {requested} lesions",
            spec.seed,
            lesions.len()
        );
    }
    Ok(Infected {
        volume: CtVolume::new(grid.clone(), Unit::Hounsfield, data)?,
        lesion: BinaryMask::new(grid, lesion)?,
        lung,
        healthy,
        lesions,
        requested,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TrainHealthy,
    TrainInfected,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumePlan {
    pub id: String,
    pub seed: u64,
    pub role: Role,
}

/// Per-volume seed: stream `index` of a ChaCha generator keyed by `master`.
pub fn volume_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index + 1);
    rng.random()
}

/// Volume ids, roles and seeds of a dataset; counts are volumes.
pub fn plan_dataset(master: u64, n_train_healthy: usize, n_train_infected: usize, n_test: usize) -> Result<Vec<VolumePlan>> {
    if n_train_healthy == 0 || n_train_infected == 0 || n_test == 0 {
        return Err(invalid!("dataset counts must all be >= 1"));
    }
    let roles = std::iter::repeat_n(Role::TrainHealthy, n_train_healthy)
        .chain(std::iter::repeat_n(Role::TrainInfected, n_train_infected))
        .chain(std::iter::repeat_n(Role::Test, n_test));
    let mut per_role = [0usize; 3];
    Ok(roles
        .enumerate()
        .map(|(i, role)| {
            let (prefix, k) = match role {
                Role::TrainHealthy => ("train_h", 0),
                Role::TrainInfected => ("train_i", 1),
                Role::Test => ("test", 2),
            };
            let id = format!("{prefix}{:03}", per_role[k]);
            per_role[k] += 1;
            VolumePlan {
                id,
                seed: volume_seed(master, i as u64),
                role,
            }
        })
        .collect())
}

/// Files of one generated volume, relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub id: String,
    pub seed: u64,
    pub role: Role,
    pub volume: Option<String>,
    pub lung: Option<String>,
    pub lesion: Option<String>,
    /// Lesion-free twin of a test volume.
    pub healthy: Option<String>,
    pub lesions_placed: usize,
    pub lesions_requested: usize,
    pub healthy_slices: usize,
    pub infected_slices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub spec: PhantomSpec,
    pub preprocess: PreprocessConfig,
    /// Slice manifests, relative to the dataset root.
    pub healthy_manifest: String,
    pub infected_manifest: String,
    pub healthy_slices: usize,
    pub infected_slices: usize,
    pub volumes: Vec<VolumeRecord>,
}

impl DatasetManifest {
    pub fn tests(&self) -> impl Iterator<Item = &VolumeRecord> {
        self.volumes.iter().filter(|v| v.role == Role::Test)
    }
}

pub const DATASET_FILE: &str = "dataset.json";

/// Generate a phantom dataset under `dir`.
///
/// Counts are volumes. Healthy training volumes contribute every lung slice
/// to the healthy pool. Infected training volumes contribute slices that
/// intersect the lesion mask to the infected pool and slices untouched by any
/// lesion to the healthy pool; slices reached only by a soft lesion edge are
/// left out of both. Test volumes are written whole together with their
/// lesion mask and lesion-free twin.
pub fn gen_dataset(
    spec: &PhantomSpec,
    master_seed: u64,
    n_train_healthy: usize,
    n_train_infected: usize,
    n_test: usize,
    prep: &PreprocessConfig,
    dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    prep.validate()?;
    let plan = plan_dataset(master_seed, n_train_healthy, n_train_infected, n_test)?;
    let mut healthy_entries = Vec::new();
    let mut infected_entries = Vec::new();
    let mut volumes = Vec::new();
    for vp in plan {
        let vspec = spec.with_seed(vp.seed);
        let mut rec = VolumeRecord {
            id: vp.id.clone(),
            seed: vp.seed,
            role: vp.role,
            volume: None,
            lung: None,
            lesion: None,
            healthy: None,
            lesions_placed: 0,
            lesions_requested: 0,
            healthy_slices: 0,
            infected_slices: 0,
        };
        match vp.role {
            Role::TrainHealthy => {
                let h = gen_healthy(&vspec)?;
                let prepared = preprocess(&h.volume, &h.lung, prep, &vp.id)?;
                for s in prepared.slices()? {
                    let rel = format!("slices/{}_z{:03}.json", vp.id, s.provenance.slice_index);
                    write_slice(&s, dir.join("train").join(&rel))?;
                    healthy_entries.push(ManifestEntry {
                        path: rel,
                        slice_index: s.provenance.slice_index,
                        label: SliceLabel::Healthy,
                    });
                    rec.healthy_slices += 1;
                }
            }
            Role::TrainInfected => {
                let inf = gen_infected(&vspec)?;
                rec.lesions_placed = inf.lesions.len();
                rec.lesions_requested = inf.requested;
                let prepared = preprocess(&inf.volume, &inf.lung, prep, &vp.id)?;
                let plane = spec.size * spec.size;
                for s in prepared.slices()? {
                    let z = s.provenance.slice_index;
                    let planes = z * plane..(z + 1) * plane;
                    let has_lesion = inf.lesion.data()[planes.clone()].iter().any(|&v| v != 0);
                    let touched = inf.volume.data()[planes.clone()] != inf.healthy.data()[planes];
                    let label = match (has_lesion, touched) {
                        (true, _) => SliceLabel::Infected,
                        (false, false) => SliceLabel::Healthy,
                        (false, true) => continue,
                    };
                    let rel = format!("slices/{}_z{z:03}.json", vp.id);
                    write_slice(&s, dir.join("train").join(&rel))?;
                    let entry = ManifestEntry {
                        path: rel,
                        slice_index: z,
                        label,
                    };
                    if label == SliceLabel::Infected {
                        infected_entries.push(entry);
                        rec.infected_slices += 1;
                    } else {
                        healthy_entries.push(entry);
                        rec.healthy_slices += 1;
                    }
                }
            }
            Role::Test => {
                let inf = gen_infected(&vspec)?;
                rec.lesions_placed = inf.lesions.len();
                rec.lesions_requested = inf.requested;
                let stem = format!("test/{}", vp.id);
                let paths = [
                    format!("{stem}_volume.json"),
                    format!("{stem}_lung.json"),
                    format!("{stem}_lesion.json"),
                    format!("{stem}_healthy.json"),
                ];
                write_volume(&inf.volume, dir.join(&paths[0]))?;
                write_mask(&inf.lung, dir.join(&paths[1]))?;
                write_mask(&inf.lesion, dir.join(&paths[2]))?;
                write_volume(&inf.healthy, dir.join(&paths[3]))?;
                let [v, l, m, h] = paths;
                rec.volume = Some(v);
                rec.lung = Some(l);
                rec.lesion = Some(m);
                rec.healthy = Some(h);
            }
        }
        volumes.push(rec);
    }
    write_manifest(&healthy_entries, dir.join("train/healthy.json"))?;
    write_manifest(&infected_entries, dir.join("train/infected.json"))?;
    let manifest = DatasetManifest {
        master_seed,
        spec: spec.clone(),
        preprocess: prep.clone(),
        healthy_manifest: "train/healthy.json".into(),
        infected_manifest: "train/infected.json".into(),
        healthy_slices: healthy_entries.len(),
        infected_slices: infected_entries.len(),
        volumes,
    };
    let path = dir.join(DATASET_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_noise_stays_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = ValueNoise::new(5, &mut rng);
        for i in 0..1000 {
            let t = i as f64 / 999.0;
            let v = noise.at([t, 1.0 - t, (t * 7.0).fract()]);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn lesion_weight_profile() {
        let l = Lesion {
            center: [10.0, 10.0, 10.0],
            radii: [4.0, 4.0, 4.0],
            exponent: 2.0,
            hu: -400.0,
        };
        assert_eq!(l.weight(10, 10, 10), 1.0);
        assert_eq!(l.weight(14, 10, 10), 1.0);
        assert!(l.weight(15, 10, 10) > 0.0 && l.weight(15, 10, 10) < 1.0);
        assert_eq!(l.weight(16, 10, 10), 0.0);
    }

    #[test]
    fn seeds_differ_per_volume() {
        let plan = plan_dataset(7, 2, 2, 2).unwrap();
        let mut seeds: Vec<u64> = plan.iter().map(|p| p.seed).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 6);
    }
}
