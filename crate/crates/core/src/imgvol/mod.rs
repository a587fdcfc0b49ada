//! Volume and slice data model plus CT preprocessing.
//!
//! Voxel data is stored x-fastest: `index = x + nx * (y + ny * z)`. Axial
//! slices are planes of constant `z`; within a slice rows run along `y` and
//! columns along `x`.

pub(crate) mod io;

pub use io::{
    read_manifest, read_mask, read_slice, read_volume, write_manifest, write_mask,
    write_overlay_png, write_slice, write_slice_png, write_volume, ManifestEntry,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Voxel lattice shared by a volume and its masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    /// mm per voxel along x, y, z.
    pub spacing: [f64; 3],
    /// Physical position (mm) of the center of voxel (0, 0, 0).
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let grid = Grid {
            dims,
            spacing,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(invalid!("grid dims must be >= 1, got {:?}", self.dims));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid!("grid spacing must be > 0, got {:?}", self.spacing));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(invalid!("grid origin must be finite, got {:?}", self.origin));
        }
        Ok(())
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

    /// Number of voxels in one axial slice.
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "dims {:?} / {:?}, spacing {:?} / {:?}, origin {:?} / {:?}",
                self.dims, other.dims, self.spacing, other.spacing, self.origin, other.origin
            )));
        }
        Ok(())
    }
}

/// Intensity unit of a [`CtVolume`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    #[default]
    Hounsfield,
    /// Windowed intensities in [-1, 1].
    Normalized,
}

/// 3-D scalar field, Hounsfield units unless windowed.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    grid: Grid,
    unit: Unit,
    data: Vec<f32>,
}

impl CtVolume {
    pub fn new(grid: Grid, unit: Unit, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "volume data has {} values, grid {:?} needs {}",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume voxel {i}")));
        }
        Ok(CtVolume { grid, unit, data })
    }

    pub fn filled(grid: Grid, unit: Unit, value: f32) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, unit, vec![value; n])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// {0,1} field on the grid of a paired volume.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    grid: Grid,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "mask data has {} values, grid {:?} needs {}",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(invalid!("mask voxel {i} has value {}, expected 0 or 1", data[i]));
        }
        Ok(BinaryMask { grid, data })
    }

    pub fn zeros(grid: Grid) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![0; n])
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        grid.validate()?;
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z) as u8);
                }
            }
        }
        Ok(BinaryMask { grid, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.grid.index(x, y, z)] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.grid.index(x, y, z);
        self.data[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Inclusive voxel bounding box `(min, max)` of the set voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let [nx, ny, nz] = self.grid.dims;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for z in 0..nz {
            for y in 0..ny {
                let row = self.grid.index(0, y, z);
                for x in 0..nx {
                    if self.data[row + x] != 0 {
                        any = true;
                        for (a, c) in [x, y, z].into_iter().enumerate() {
                            lo[a] = lo[a].min(c);
                            hi[a] = hi[a].max(c);
                        }
                    }
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Whether every set voxel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.grid == other.grid
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a == 0 || b != 0)
    }
}

/// Clinical label carried by a slice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceLabel {
    Healthy,
    Infected,
    #[default]
    Unknown,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub volume_id: String,
    pub slice_index: usize,
}

/// Axial slice of normalized intensities in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SliceImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub label: SliceLabel,
    pub provenance: Provenance,
}

impl SliceImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "slice data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(-1.0..=1.0).contains(v)) {
            return Err(invalid!("slice pixel {i} = {} outside [-1, 1]", data[i]));
        }
        Ok(SliceImage {
            height,
            width,
            data,
            label: SliceLabel::Unknown,
            provenance: Provenance::default(),
        })
    }

    pub fn with_label(mut self, label: SliceLabel) -> Self {
        self.label = label;
        self
    }

    pub fn with_provenance(mut self, volume_id: impl Into<String>, slice_index: usize) -> Self {
        self.provenance = Provenance {
            volume_id: volume_id.into(),
            slice_index,
        };
        self
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

/// 2-D {0,1} raster; used for lung and lesion masks of a single slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl SliceMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        SliceMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        SliceMask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        SliceMask {
            height,
            width,
            data,
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(invalid!("mask values must be 0 or 1"));
        }
        Ok(SliceMask {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Pixelwise AND.
    pub fn intersect(&self, other: &SliceMask) -> SliceMask {
        SliceMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a & b)
                .collect(),
        }
    }

    pub fn is_subset_of(&self, other: &SliceMask) -> bool {
        self.height == other.height
            && self.width == other.width
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a == 0 || b != 0)
    }
}

/// Per-axis sampling plan for resampling: `(lower index, upper index, weight of upper)`.
fn axis_plan(n: usize, spacing: f64, target: f64) -> (usize, Vec<(usize, usize, f64)>) {
    let out = ((n as f64 * spacing / target).round() as usize).max(1);
    let plan = (0..out)
        .map(|i| {
            let u = ((i as f64 + 0.5) * target / spacing - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect();
    (out, plan)
}

fn resampled_grid(grid: &Grid, target: f64, dims: [usize; 3]) -> Grid {
    let mut origin = grid.origin;
    for a in 0..3 {
        origin[a] += 0.5 * (target - grid.spacing[a]);
    }
    Grid {
        dims,
        spacing: [target; 3],
        origin,
    }
}

/// Trilinear resampling to an isotropic `target` mm grid.
///
/// Voxel centers of the output are mapped back into input index space with
/// the extents aligned; samples beyond the outermost input centers clamp to
/// the edge voxel.
pub fn resample_isotropic(vol: &CtVolume, target: f64) -> Result<CtVolume> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(invalid!("target spacing must be > 0, got {target}"));
    }
    let grid = vol.grid();
    if grid.spacing.iter().all(|&s| s == target) {
        return Ok(vol.clone());
    }
    for a in 0..3 {
        if grid.spacing[a] != target && grid.dims[a] < 2 {
            return Err(Error::Degenerate(format!(
                "axis {a} has {} voxel(s) but needs interpolation",
                grid.dims[a]
            )));
        }
    }
    let [nx, ny, nz] = grid.dims;
    let (ox, px) = axis_plan(nx, grid.spacing[0], target);
    let (oy, py) = axis_plan(ny, grid.spacing[1], target);
    let (oz, pz) = axis_plan(nz, grid.spacing[2], target);

    let src = vol.data();
    let at = |x: usize, y: usize, z: usize| src[x + nx * (y + ny * z)] as f64;
    let mut data = Vec::with_capacity(ox * oy * oz);
    for &(z0, z1, wz) in &pz {
        for &(y0, y1, wy) in &py {
            for &(x0, x1, wx) in &px {
                let lerp = |a: f64, b: f64, w: f64| if w == 0.0 { a } else { a + (b - a) * w };
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), wx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), wx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), wx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), wx);
                let c0 = lerp(c00, c10, wy);
                let c1 = lerp(c01, c11, wy);
                data.push(lerp(c0, c1, wz) as f32);
            }
        }
    }
    CtVolume::new(resampled_grid(grid, target, [ox, oy, oz]), vol.unit(), data)
}

/// Nearest-neighbour resampling of a mask onto the grid `resample_isotropic` produces.
pub fn resample_mask_isotropic(mask: &BinaryMask, target: f64) -> Result<BinaryMask> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(invalid!("target spacing must be > 0, got {target}"));
    }
    let grid = mask.grid();
    if grid.spacing.iter().all(|&s| s == target) {
        return Ok(mask.clone());
    }
    let [nx, ny, _] = grid.dims;
    let nearest = |(i0, i1, w): (usize, usize, f64)| if w > 0.5 { i1 } else { i0 };
    let plans: Vec<(usize, Vec<usize>)> = (0..3)
        .map(|a| {
            let (n, plan) = axis_plan(grid.dims[a], grid.spacing[a], target);
            (n, plan.into_iter().map(nearest).collect())
        })
        .collect();
    let mut data = Vec::with_capacity(plans.iter().map(|p| p.0).product());
    for &z in &plans[2].1 {
        for &y in &plans[1].1 {
            for &x in &plans[0].1 {
                data.push(mask.data()[x + nx * (y + ny * z)]);
            }
        }
    }
    let dims = [plans[0].0, plans[1].0, plans[2].0];
    BinaryMask::new(resampled_grid(grid, target, dims), data)
}

/// Clamp-and-rescale of a HU window onto [-1, 1].
pub fn window_normalize(vol: &CtVolume, lo: f64, hi: f64) -> Result<CtVolume> {
    if !(lo < hi) {
        return Err(invalid!("window requires lo < hi, got [{lo}, {hi}]"));
    }
    let data = vol
        .data()
        .iter()
        .map(|&v| normalize_hu(v as f64, lo, hi) as f32)
        .collect();
    CtVolume::new(vol.grid().clone(), Unit::Normalized, data)
}

#[inline]
pub fn normalize_hu(v: f64, lo: f64, hi: f64) -> f64 {
    (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
}

/// Zero every voxel outside the mask; voxels inside are kept as-is.
pub fn apply_mask_zero_background(norm: &CtVolume, mask: &BinaryMask) -> Result<CtVolume> {
    norm.grid().ensure_same(mask.grid())?;
    let data = norm
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| if m != 0 { v } else { 0.0 })
        .collect();
    CtVolume::new(norm.grid().clone(), norm.unit(), data)
}

/// Square axial crop window centered on the lung bounding box of one volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropWindow {
    /// Column (x) of the window's first pixel; may be negative (padded).
    pub x0: isize,
    /// Row (y) of the window's first pixel; may be negative (padded).
    pub y0: isize,
    pub side: usize,
    /// Inclusive axial range of slices intersecting the mask.
    pub z_first: usize,
    pub z_last: usize,
}

impl CropWindow {
    /// `None` when the mask is empty.
    pub fn around(mask: &BinaryMask, side: usize) -> Result<Option<CropWindow>> {
        if side == 0 {
            return Err(invalid!("crop side must be >= 1"));
        }
        let Some((lo, hi)) = mask.bounding_box() else {
            return Ok(None);
        };
        let extent = (hi[0] - lo[0] + 1).max(hi[1] - lo[1] + 1);
        if extent > side {
            return Err(Error::CropOverflow { extent, side });
        }
        // floor((lo + hi + 1 - side) / 2) centers the window on the box.
        let start = |lo: usize, hi: usize| (lo as isize + hi as isize + 1 - side as isize).div_euclid(2);
        Ok(Some(CropWindow {
            x0: start(lo[0], hi[0]),
            y0: start(lo[1], hi[1]),
            side,
            z_first: lo[2],
            z_last: hi[2],
        }))
    }

    pub fn slices(&self) -> std::ops::RangeInclusive<usize> {
        self.z_first..=self.z_last
    }

    /// Volume coordinate under window pixel `(row, col)`, if inside the grid.
    #[inline]
    pub fn source(&self, grid: &Grid, row: usize, col: usize) -> Option<(usize, usize)> {
        let x = self.x0 + col as isize;
        let y = self.y0 + row as isize;
        (x >= 0 && y >= 0 && (x as usize) < grid.dims[0] && (y as usize) < grid.dims[1])
            .then_some((x as usize, y as usize))
    }

    /// Crop one slice of a normalized volume; pixels outside `mask` or the grid are 0.
    pub fn crop_image(&self, norm: &CtVolume, mask: &BinaryMask, z: usize) -> Result<SliceImage> {
        let grid = norm.grid();
        let mut data = vec![0f32; self.side * self.side];
        for row in 0..self.side {
            for col in 0..self.side {
                if let Some((x, y)) = self.source(grid, row, col) {
                    if mask.get(x, y, z) {
                        data[row * self.side + col] = norm.at(x, y, z);
                    }
                }
            }
        }
        SliceImage::new(self.side, self.side, data)
    }

    pub fn crop_mask(&self, mask: &BinaryMask, z: usize) -> SliceMask {
        let grid = mask.grid();
        SliceMask::from_fn(self.side, self.side, |row, col| {
            self.source(grid, row, col)
                .is_some_and(|(x, y)| mask.get(x, y, z))
        })
    }

    /// Crop a raw (unmasked) slice of any volume, padding with `pad`.
    pub fn crop_raw(&self, vol: &CtVolume, z: usize, pad: f32) -> Vec<f32> {
        let grid = vol.grid();
        let mut data = vec![pad; self.side * self.side];
        for row in 0..self.side {
            for col in 0..self.side {
                if let Some((x, y)) = self.source(grid, row, col) {
                    data[row * self.side + col] = vol.at(x, y, z);
                }
            }
        }
        data
    }

    /// Write a cropped slice mask back into a full-grid mask at slice `z`.
    pub fn paste_mask(&self, target: &mut BinaryMask, z: usize, slice: &SliceMask) -> Result<()> {
        if slice.height != self.side || slice.width != self.side {
            return Err(Error::Shape(format!(
                "slice mask {}x{} does not match crop side {}",
                slice.height, slice.width, self.side
            )));
        }
        let grid = target.grid().clone();
        if z >= grid.dims[2] {
            return Err(invalid!("slice index {z} outside volume depth {}", grid.dims[2]));
        }
        for row in 0..self.side {
            for col in 0..self.side {
                if let Some((x, y)) = self.source(&grid, row, col) {
                    target.set(x, y, z, slice.get(row, col));
                }
            }
        }
        Ok(())
    }
}

/// One labeled axial slice per mask-intersecting slice, cropped around the lung box.
pub fn extract_slices(
    norm: &CtVolume,
    mask: &BinaryMask,
    side: usize,
    volume_id: &str,
) -> Result<Vec<SliceImage>> {
    norm.grid().ensure_same(mask.grid())?;
    let Some(window) = CropWindow::around(mask, side)? else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for z in window.slices() {
        let plane = &mask.data()[z * mask.grid().slice_len()..(z + 1) * mask.grid().slice_len()];
        if plane.iter().all(|&m| m == 0) {
            continue;
        }
        out.push(window.crop_image(norm, mask, z)?.with_provenance(volume_id, z));
    }
    Ok(out)
}
