//! Volumetric overlap metrics and the twelve-region lesion diagnosis.
//!
//! All counts are integers; percentages are formed with a single final
//! division so brute-force recounting reproduces them exactly.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imgvol::BinaryMask;

/// Which metrics fell back to an empty-mask convention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmptyFlags {
    /// Both masks empty; every metric reported as 100.
    pub both_empty: bool,
    /// Prediction empty, so precision is undefined (reported as 0).
    pub psc_undefined: bool,
    /// Ground truth empty, so sensitivity is undefined (reported as 0).
    pub sen_undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub dsc: f64,
    pub psc: f64,
    pub sen: f64,
    pub n_pred: usize,
    pub n_gt: usize,
    pub n_overlap: usize,
    pub flags: EmptyFlags,
}

fn percent(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

impl OverlapReport {
    pub fn from_counts(n_pred: usize, n_gt: usize, n_overlap: usize) -> Self {
        let mut flags = EmptyFlags::default();
        if n_pred == 0 && n_gt == 0 {
            flags.both_empty = true;
            return OverlapReport {
                dsc: 100.0,
                psc: 100.0,
                sen: 100.0,
                n_pred,
                n_gt,
                n_overlap,
                flags,
            };
        }
        flags.psc_undefined = n_pred == 0;
        flags.sen_undefined = n_gt == 0;
        OverlapReport {
            dsc: percent(2 * n_overlap, n_pred + n_gt),
            psc: if n_pred == 0 { 0.0 } else { percent(n_overlap, n_pred) },
            sen: if n_gt == 0 { 0.0 } else { percent(n_overlap, n_gt) },
            n_pred,
            n_gt,
            n_overlap,
            flags,
        }
    }
}

/// `(|pred|, |gt|, |pred ∩ gt|)` over two equally sized {0,1} rasters.
pub fn overlap_counts(pred: &[u8], gt: &[u8]) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("masks have {} and {} voxels", pred.len(), gt.len())));
    }
    let (mut p, mut g, mut o) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a != 0, b != 0);
        p += a as usize;
        g += b as usize;
        o += (a && b) as usize;
    }
    Ok((p, g, o))
}

fn same_grid(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.grid() != b.grid() {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", a.grid(), b.grid())));
    }
    Ok(())
}

pub fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<OverlapReport> {
    same_grid(pred, gt)?;
    let (p, g, o) = overlap_counts(pred.data(), gt.data())?;
    Ok(OverlapReport::from_counts(p, g, o))
}

pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(overlap(pred, gt)?.dsc)
}

pub fn psc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(overlap(pred, gt)?.psc)
}

pub fn sen(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(overlap(pred, gt)?.sen)
}

/// Number of equal bands along z (superior-inferior), y (anterior-posterior)
/// and x (left-right).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionAxes {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Default for RegionAxes {
    fn default() -> Self {
        RegionAxes { z: 3, y: 2, x: 2 }
    }
}

impl RegionAxes {
    pub fn count(&self) -> usize {
        self.z * self.y * self.x
    }

    pub fn validate(&self) -> Result<()> {
        if self.z == 0 || self.y == 0 || self.x == 0 || self.count() > 255 {
            return Err(invalid!("region axes must be >= 1 with at most 255 regions, got {self:?}"));
        }
        Ok(())
    }
}

/// Per-voxel region label: 0 outside the lung, 1..=count inside.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionLabels {
    pub dims: [usize; 3],
    pub labels: Vec<u8>,
    pub count: usize,
}

impl RegionLabels {
    pub fn voxel_counts(&self) -> Vec<usize> {
        let mut n = vec![0; self.count];
        for &l in &self.labels {
            if l > 0 {
                n[l as usize - 1] += 1;
            }
        }
        n
    }

    /// Which regions hold at least `min_voxels` voxels of `mask`.
    pub fn positive(&self, mask: &[u8], min_voxels: usize) -> Result<Vec<bool>> {
        if mask.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "mask has {} voxels, regions {}",
                mask.len(),
                self.labels.len()
            )));
        }
        let mut n = vec![0usize; self.count];
        for (&l, &m) in self.labels.iter().zip(mask) {
            if l > 0 && m != 0 {
                n[l as usize - 1] += 1;
            }
        }
        Ok(n.into_iter().map(|c| c >= min_voxels.max(1)).collect())
    }
}

/// Band of coordinate `c` when `[lo, lo + extent)` is cut into `parts`.
pub fn band(c: usize, lo: usize, extent: usize, parts: usize) -> usize {
    ((c - lo) * parts) / extent
}

/// Split the lung bounding box into equal boxes and label lung voxels.
pub fn divide_regions(lung: &BinaryMask, axes: RegionAxes) -> Result<RegionLabels> {
    axes.validate()?;
    let Some((lo, hi)) = lung.bounding_box() else {
        return Err(Error::Degenerate("cannot divide an empty lung mask".into()));
    };
    let [nx, ny, nz] = lung.dims();
    let ext = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let mut labels = vec![0u8; nx * ny * nz];
    for z in lo[2]..=hi[2] {
        let bz = band(z, lo[2], ext[2], axes.z);
        for y in lo[1]..=hi[1] {
            let by = band(y, lo[1], ext[1], axes.y);
            for x in lo[0]..=hi[0] {
                if lung.get(x, y, z) {
                    let bx = band(x, lo[0], ext[0], axes.x);
                    labels[x + nx * (y + ny * z)] = (1 + bz * axes.y * axes.x + by * axes.x + bx) as u8;
                }
            }
        }
    }
    Ok(RegionLabels {
        dims: [nx, ny, nz],
        labels,
        count: axes.count(),
    })
}

/// A rate with its defining denominator; `defined == false` means the
/// denominator was zero and `value` holds the empty convention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub defined: bool,
}

impl Rate {
    fn of(num: usize, den: usize, empty: f64) -> Self {
        if den == 0 {
            Rate {
                value: empty,
                defined: false,
            }
        } else {
            Rate {
                value: num as f64 / den as f64,
                defined: true,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Rate {
        Rate::of(self.tp + self.tn, self.total(), 1.0)
    }

    /// With no positive predictions and no positive truth the precision is
    /// reported as 1 and flagged; with positive truth only it is 0.
    pub fn precision(&self) -> Rate {
        let empty = if self.fn_ == 0 { 1.0 } else { 0.0 };
        Rate::of(self.tp, self.tp + self.fp, empty)
    }

    pub fn sensitivity(&self) -> Rate {
        let empty = if self.fp == 0 { 1.0 } else { 0.0 };
        Rate::of(self.tp, self.tp + self.fn_, empty)
    }
}

/// Per-region positivity of one patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionDiagnosis {
    pub predicted: Vec<bool>,
    pub truth: Vec<bool>,
    pub confusion: Confusion,
}

pub fn region_diagnosis(
    pred: &BinaryMask,
    gt: &BinaryMask,
    regions: &RegionLabels,
    min_voxels: usize,
) -> Result<RegionDiagnosis> {
    same_grid(pred, gt)?;
    if pred.dims() != regions.dims {
        return Err(Error::GridMismatch(format!(
            "mask dims {:?} vs region dims {:?}",
            pred.dims(),
            regions.dims
        )));
    }
    let predicted = regions.positive(pred.data(), min_voxels)?;
    let truth = regions.positive(gt.data(), min_voxels)?;
    let mut confusion = Confusion::default();
    for (&p, &t) in predicted.iter().zip(&truth) {
        confusion.add(p, t);
    }
    Ok(RegionDiagnosis {
        predicted,
        truth,
        confusion,
    })
}

/// Aggregate accuracy / precision / sensitivity over patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub patients: usize,
    pub confusion: Confusion,
    pub accuracy: Rate,
    pub precision: Rate,
    pub sensitivity: Rate,
}

pub fn summarize_regions(cases: &[RegionDiagnosis]) -> RegionSummary {
    let mut confusion = Confusion::default();
    for c in cases {
        confusion.merge(&c.confusion);
    }
    RegionSummary {
        patients: cases.len(),
        confusion,
        accuracy: confusion.accuracy(),
        precision: confusion.precision(),
        sensitivity: confusion.sensitivity(),
    }
}

pub const TABLE_HEADER: &str = "DSC(%) PSC(%) SEN(%)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    #[serde(flatten)]
    pub report: OverlapReport,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

pub fn mean_sd(values: &[f64]) -> MeanSd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanSd { mean, sd: var.sqrt() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub cases: Vec<CaseMetrics>,
    pub dsc: MeanSd,
    pub psc: MeanSd,
    pub sen: MeanSd,
}

pub fn evaluate_cohort(cases: &[(String, &BinaryMask, &BinaryMask)]) -> Result<CohortReport> {
    if cases.is_empty() {
        return Err(invalid!("cohort evaluation needs at least one case"));
    }
    let cases = cases
        .iter()
        .map(|(name, pred, gt)| {
            Ok(CaseMetrics {
                case: name.clone(),
                report: overlap(pred, gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CohortReport::from_cases(cases))
}

impl CohortReport {
    pub fn from_cases(cases: Vec<CaseMetrics>) -> Self {
        let col = |f: fn(&OverlapReport) -> f64| mean_sd(&cases.iter().map(|c| f(&c.report)).collect::<Vec<_>>());
        CohortReport {
            dsc: col(|r| r.dsc),
            psc: col(|r| r.psc),
            sen: col(|r| r.sen),
            cases,
        }
    }

    /// One row per case, then `mean` and `sd` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case,DSC(%),PSC(%),SEN(%),n_pred,n_gt,n_overlap,flags\n");
        for c in &self.cases {
            let r = &c.report;
            let mut flags = Vec::new();
            if r.flags.both_empty {
                flags.push("both_empty");
            }
            if r.flags.psc_undefined {
                flags.push("psc_undefined");
            }
            if r.flags.sen_undefined {
                flags.push("sen_undefined");
            }
            out += &format!(
                "{},{},{},{},{},{},{},{}\n",
                c.case,
                r.dsc,
                r.psc,
                r.sen,
                r.n_pred,
                r.n_gt,
                r.n_overlap,
                flags.join(";")
            );
        }
        out += &format!("mean,{},{},{},,,,\n", self.dsc.mean, self.psc.mean, self.sen.mean);
        out += &format!("sd,{},{},{},,,,\n", self.dsc.sd, self.psc.sd, self.sen.sd);
        out
    }

    /// Plain-text table in `mean±sd` form.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16} {TABLE_HEADER}\n", "case");
        for c in &self.cases {
            out += &format!(
                "{:<16} {:>6.1} {:>6.1} {:>6.1}\n",
                c.case, c.report.dsc, c.report.psc, c.report.sen
            );
        }
        let cell = |m: MeanSd| format!("{:.1}±{:.1}", m.mean, m.sd);
        out += &format!("{:<16} {} {} {}\n", "mean±sd", cell(self.dsc), cell(self.psc), cell(self.sen));
        out
    }
}
