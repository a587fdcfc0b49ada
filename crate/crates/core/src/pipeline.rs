//! Volume-level glue: preprocessing into training slices and lesion
//! segmentation of a whole volume slice by slice.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imgvol::{
    apply_mask_zero_background, resample_isotropic, resample_mask_isotropic, window_normalize,
    BinaryMask, CropWindow, CtVolume, SliceImage, SliceMask,
};
use crate::postproc::{postprocess_pipeline, PostprocConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Intensity window in HU, mapped onto [-1, 1].
    pub window: [f64; 2],
    /// Isotropic target spacing in mm.
    pub spacing: f64,
    pub crop_side: usize,
}

impl PreprocessConfig {
    pub fn paper() -> Self {
        PreprocessConfig {
            window: [-800.0, 100.0],
            spacing: 1.0,
            crop_side: 256,
        }
    }

    pub fn phantom() -> Self {
        PreprocessConfig {
            crop_side: 64,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window[0] < self.window[1]) || !self.window.iter().all(|v| v.is_finite()) {
            return Err(invalid!("window must satisfy lo < hi, got {:?}", self.window));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(invalid!("spacing must be positive, got {}", self.spacing));
        }
        if self.crop_side == 0 {
            return Err(invalid!("crop_side must be >= 1"));
        }
        Ok(())
    }
}

/// A volume after resampling, windowing and background masking.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub normalized: CtVolume,
    pub lung: BinaryMask,
    /// `None` when the lung mask is empty.
    pub window: Option<CropWindow>,
}

impl Prepared {
    /// Cropped lung-bearing slices in axial order.
    pub fn slices(&self) -> Result<Vec<SliceImage>> {
        let Some(w) = &self.window else {
            return Ok(Vec::new());
        };
        w.slices()
            .filter(|&z| self.has_lung(z))
            .map(|z| Ok(w.crop_image(&self.normalized, &self.lung, z)?.with_provenance(self.id.as_str(), z)))
            .collect()
    }

    pub fn has_lung(&self, z: usize) -> bool {
        let n = self.lung.grid().slice_len();
        self.lung.data()[z * n..(z + 1) * n].iter().any(|&v| v != 0)
    }

    /// Crop slice `z` of another volume on the same grid through this lung mask.
    pub fn crop_companion(&self, normalized: &CtVolume, z: usize) -> Result<SliceImage> {
        let w = self
            .window
            .as_ref()
            .ok_or_else(|| invalid!("volume {} has an empty lung mask", self.id))?;
        Ok(w.crop_image(normalized, &self.lung, z)?.with_provenance(self.id.as_str(), z))
    }

    pub fn lung_slice(&self, z: usize) -> Option<SliceMask> {
        self.window.as_ref().map(|w| w.crop_mask(&self.lung, z))
    }
}

fn resampled(vol: &CtVolume, lung: &BinaryMask, spacing: f64) -> Result<(CtVolume, BinaryMask)> {
    vol.grid().ensure_same(lung.grid())?;
    if vol.grid().spacing == [spacing; 3] {
        return Ok((vol.clone(), lung.clone()));
    }
    Ok((resample_isotropic(vol, spacing)?, resample_mask_isotropic(lung, spacing)?))
}

/// Resample, window to [-1, 1], zero the background and place the crop window.
pub fn preprocess(vol: &CtVolume, lung: &BinaryMask, cfg: &PreprocessConfig, id: &str) -> Result<Prepared> {
    cfg.validate()?;
    let (vol, lung) = resampled(vol, lung, cfg.spacing)?;
    let norm = window_normalize(&vol, cfg.window[0], cfg.window[1])?;
    let normalized = apply_mask_zero_background(&norm, &lung)?;
    let window = CropWindow::around(&lung, cfg.crop_side)?;
    Ok(Prepared {
        id: id.to_string(),
        normalized,
        lung,
        window,
    })
}

/// Windowed companion volume (e.g. a healthy twin) on the prepared grid.
pub fn prepare_companion(vol: &CtVolume, lung: &BinaryMask, cfg: &PreprocessConfig) -> Result<CtVolume> {
    let (vol, lung) = resampled(vol, lung, cfg.spacing)?;
    let norm = window_normalize(&vol, cfg.window[0], cfg.window[1])?;
    apply_mask_zero_background(&norm, &lung)
}

/// Segment every lung slice and stack the results on the prepared grid.
///
/// `synthesize` maps a cropped infected slice to its healthy counterpart.
pub fn segment_volume(
    prep: &Prepared,
    mut synthesize: impl FnMut(&SliceImage) -> Result<SliceImage>,
    cfg: &PostprocConfig,
) -> Result<BinaryMask> {
    cfg.validate()?;
    let mut out = BinaryMask::zeros(prep.lung.grid().clone())?;
    let Some(window) = &prep.window else {
        return Ok(out);
    };
    for z in window.slices() {
        if !prep.has_lung(z) {
            continue;
        }
        let infected = window.crop_image(&prep.normalized, &prep.lung, z)?.with_provenance(prep.id.as_str(), z);
        let lung = window.crop_mask(&prep.lung, z);
        let synthetic = synthesize(&infected)?;
        let lesion = postprocess_pipeline(&infected, &synthetic, &lung, cfg)?;
        window.paste_mask(&mut out, z, &lesion)?;
    }
    Ok(out)
}

/// Segmentation with a known healthy volume standing in for the generator.
pub fn segment_with_oracle(prep: &Prepared, healthy_normalized: &CtVolume, cfg: &PostprocConfig) -> Result<BinaryMask> {
    segment_volume(prep, |s| prep.crop_companion(healthy_normalized, s.provenance.slice_index), cfg)
}
