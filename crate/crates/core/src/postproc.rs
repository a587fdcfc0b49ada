//! Lesion mask extraction from an (infected, synthetic healthy) slice pair.
//!
//! The chain is subtraction, median filter, binarization (k-means or Otsu),
//! Gaussian smoothing of the binary mask, hole filling, erosion and dilation.
//! Every stage is intersected with the lung mask so the result never leaves
//! the lung.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imgvol::{SliceImage, SliceMask};

/// Non-negative residual `infected - synthetic` restricted to the lung.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub lung: SliceMask,
}

impl DifferenceMap {
    /// Values of in-lung pixels that are not exactly zero.
    pub fn foreground_values(&self) -> Vec<f64> {
        self.data
            .iter()
            .zip(&self.lung.data)
            .filter(|&(&v, &l)| l != 0 && v != 0.0)
            .map(|(&v, _)| v)
            .collect()
    }

    /// Median-filter the map and re-zero everything outside the lung.
    pub fn median(&self, window: usize) -> Result<DifferenceMap> {
        let mut data = median_filter(self.height, self.width, &self.data, window)?;
        for (v, &l) in data.iter_mut().zip(&self.lung.data) {
            if l == 0 {
                *v = 0.0;
            }
        }
        Ok(DifferenceMap {
            data,
            lung: self.lung.clone(),
            ..*self
        })
    }
}

pub fn subtract(infected: &SliceImage, synthetic: &SliceImage, lung: &SliceMask) -> Result<DifferenceMap> {
    let (h, w) = (infected.height, infected.width);
    if (synthetic.height, synthetic.width) != (h, w) || (lung.height, lung.width) != (h, w) {
        return Err(Error::Shape(format!(
            "subtract: infected {h}x{w}, synthetic {}x{}, lung {}x{}",
            synthetic.height, synthetic.width, lung.height, lung.width
        )));
    }
    let data = infected
        .data
        .iter()
        .zip(&synthetic.data)
        .zip(&lung.data)
        .map(|((&a, &b), &l)| if l == 0 { 0.0 } else { (a as f64 - b as f64).max(0.0) })
        .collect();
    Ok(DifferenceMap {
        height: h,
        width: w,
        data,
        lung: lung.clone(),
    })
}

/// Median over a `window`×`window` neighborhood with replicated borders.
pub fn median_filter(height: usize, width: usize, data: &[f64], window: usize) -> Result<Vec<f64>> {
    if window < 3 || window % 2 == 0 {
        return Err(invalid!("median window must be odd and >= 3, got {window}"));
    }
    if data.len() != height * width {
        return Err(Error::Shape(format!("median_filter: {} values for {height}x{width}", data.len())));
    }
    let r = (window / 2) as isize;
    let mut buf = Vec::with_capacity(window * window);
    let mut out = Vec::with_capacity(data.len());
    for row in 0..height as isize {
        for col in 0..width as isize {
            buf.clear();
            for dr in -r..=r {
                let rr = (row + dr).clamp(0, height as isize - 1) as usize;
                for dc in -r..=r {
                    let cc = (col + dc).clamp(0, width as isize - 1) as usize;
                    buf.push(data[rr * width + cc]);
                }
            }
            let mid = buf.len() / 2;
            let (_, m, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
            out.push(*m);
        }
    }
    Ok(out)
}

/// Result of a binarization stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Binarized {
    pub mask: SliceMask,
    /// Smallest value assigned to the lesion class.
    pub threshold: Option<f64>,
    /// Set when the input had too few distinct values to split.
    pub degenerate: bool,
}

impl Binarized {
    fn empty(height: usize, width: usize) -> Self {
        Binarized {
            mask: SliceMask::zeros(height, width),
            threshold: None,
            degenerate: true,
        }
    }

    fn above(diff: &DifferenceMap, threshold: f64) -> Self {
        let mask = SliceMask {
            height: diff.height,
            width: diff.width,
            data: diff
                .data
                .iter()
                .zip(&diff.lung.data)
                .map(|(&v, &l)| (l != 0 && v != 0.0 && v >= threshold) as u8)
                .collect(),
        };
        Binarized {
            mask,
            threshold: Some(threshold),
            degenerate: false,
        }
    }
}

/// Converged 1-D k-means partition.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Ascending.
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub sse: f64,
}

fn distinct_count(sorted: &[f64]) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    1 + sorted.windows(2).filter(|w| w[0] != w[1]).count()
}

fn nearest(v: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    for (j, &c) in centroids.iter().enumerate().skip(1) {
        if (v - c).abs() < (v - centroids[best]).abs() {
            best = j;
        }
    }
    best
}

fn sse_of(values: &[f64], labels: &[usize], k: usize) -> (Vec<f64>, f64) {
    let mut sum = vec![0.0; k];
    let mut n = vec![0usize; k];
    for (&v, &l) in values.iter().zip(labels) {
        sum[l] += v;
        n[l] += 1;
    }
    let means: Vec<f64> = sum.iter().zip(&n).map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect();
    let sse = values.iter().zip(labels).map(|(&v, &l)| (v - means[l]).powi(2)).sum();
    (means, sse)
}

/// Lloyd iterations from the given centroids until assignments stop changing.
fn lloyd(values: &[f64], mut centroids: Vec<f64>) -> KMeans {
    centroids.sort_by(f64::total_cmp);
    let k = centroids.len();
    let mut labels: Vec<usize> = values.iter().map(|&v| nearest(v, &centroids)).collect();
    for _ in 0..300 {
        let (means, _) = sse_of(values, &labels, k);
        for (c, m) in centroids.iter_mut().zip(&means) {
            if m.is_finite() {
                *c = *m;
            }
        }
        centroids.sort_by(f64::total_cmp);
        let next: Vec<usize> = values.iter().map(|&v| nearest(v, &centroids)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let (_, sse) = sse_of(values, &labels, k);
    KMeans { centroids, labels, sse }
}

fn kmeans_pp(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = vec![values[rng.random_range(0..values.len())]];
    while centroids.len() < k {
        let d2: Vec<f64> = values
            .iter()
            .map(|&v| centroids.iter().map(|&c| (v - c).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = values.len() - 1;
        for (i, &d) in d2.iter().enumerate() {
            if u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        centroids.push(values[pick]);
    }
    centroids
}

/// Optimal two-cluster split of 1-D data: index `c` into the sorted values
/// such that `sorted[..c]` and `sorted[c..]` minimize the summed SSE. Cuts
/// only fall between distinct values; ties go to the lower cut.
pub fn best_split(sorted: &[f64]) -> Option<usize> {
    let n = sorted.len();
    let shift = sorted.iter().sum::<f64>() / n.max(1) as f64;
    let (mut s, mut q) = (0.0, 0.0);
    let (ts, tq) = sorted
        .iter()
        .fold((0.0, 0.0), |(a, b), &v| (a + (v - shift), b + (v - shift).powi(2)));
    let mut best: Option<(usize, f64)> = None;
    for c in 1..n {
        let v = sorted[c - 1] - shift;
        s += v;
        q += v * v;
        if sorted[c - 1] == sorted[c] {
            continue;
        }
        let (nl, nr) = (c as f64, (n - c) as f64);
        let sse = (q - s * s / nl) + ((tq - q) - (ts - s).powi(2) / nr);
        if best.is_none_or(|(_, b)| sse < b) {
            best = Some((c, sse));
        }
    }
    best.map(|(c, _)| c)
}

/// Best of `restarts` Lloyd runs from k-means++ seeds, ranked by SSE.
///
/// For `k == 2` the optimal contiguous split is added as one more starting
/// partition; it is a Lloyd fixed point, so the result is the global optimum
/// rather than whichever local minimum the random seeds reach.
pub fn kmeans_1d(values: &[f64], k: usize, restarts: usize, seed: u64) -> Result<Option<KMeans>> {
    if k < 2 {
        return Err(invalid!("k-means needs k >= 2, got {k}"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if distinct_count(&sorted) < k {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs: Vec<KMeans> = (0..restarts.max(1))
        .map(|_| {
            let init = kmeans_pp(values, k, &mut rng);
            lloyd(values, init)
        })
        .collect();
    if k == 2 {
        if let Some(c) = best_split(&sorted) {
            let lo = sorted[..c].iter().sum::<f64>() / c as f64;
            let hi = sorted[c..].iter().sum::<f64>() / (sorted.len() - c) as f64;
            runs.push(lloyd(values, vec![lo, hi]));
        }
    }
    let lesion_floor = |r: &KMeans| {
        values
            .iter()
            .zip(&r.labels)
            .filter(|&(_, &l)| l == k - 1)
            .map(|(&v, _)| v)
            .fold(f64::INFINITY, f64::min)
    };
    let best = runs
        .into_iter()
        .filter(|r| r.centroids.len() == k)
        .reduce(|a, b| {
            if b.sse < a.sse || (b.sse == a.sse && lesion_floor(&b) < lesion_floor(&a)) {
                b
            } else {
                a
            }
        });
    Ok(best)
}

/// Lesion = in-lung nonzero pixels in the cluster with the highest centroid.
pub fn kmeans_binarize(diff: &DifferenceMap, k: usize, restarts: usize, seed: u64) -> Result<Binarized> {
    let values = diff.foreground_values();
    let Some(km) = kmeans_1d(&values, k, restarts, seed)? else {
        return Ok(Binarized::empty(diff.height, diff.width));
    };
    let threshold = values
        .iter()
        .zip(&km.labels)
        .filter(|&(_, &l)| l == k - 1)
        .map(|(&v, _)| v)
        .fold(f64::INFINITY, f64::min);
    if !threshold.is_finite() {
        return Ok(Binarized::empty(diff.height, diff.width));
    }
    Ok(Binarized::above(diff, threshold))
}

pub const OTSU_BINS: usize = 256;

/// Histogram bin of `v` over `[min, max]`; the maximum lands in the last bin.
pub fn otsu_bin(v: f64, min: f64, max: f64) -> usize {
    (((v - min) / (max - min) * OTSU_BINS as f64).floor() as usize).min(OTSU_BINS - 1)
}

/// Otsu split over a 256-bin histogram of the given values.
///
/// Returns the last bin of the background class. Class means use the actual
/// values in each bin; the first maximizing bin wins ties.
pub fn otsu_split(values: &[f64]) -> Option<usize> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || min >= max {
        return None;
    }
    let mut count = [0usize; OTSU_BINS];
    let mut sum = [0.0f64; OTSU_BINS];
    for &v in values {
        let b = otsu_bin(v, min, max);
        count[b] += 1;
        sum[b] += v;
    }
    let n = values.len();
    let total: f64 = sum.iter().sum();
    let (mut n0, mut s0) = (0usize, 0.0f64);
    let mut best: Option<(usize, f64)> = None;
    for t in 0..OTSU_BINS - 1 {
        n0 += count[t];
        s0 += sum[t];
        if n0 == 0 || n0 == n {
            continue;
        }
        let n1 = n - n0;
        let (w0, w1) = (n0 as f64 / n as f64, n1 as f64 / n as f64);
        let (m0, m1) = (s0 / n0 as f64, (total - s0) / n1 as f64);
        let between = w0 * w1 * (m0 - m1).powi(2);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t, between));
        }
    }
    best.map(|(t, _)| t)
}

pub fn otsu_binarize(diff: &DifferenceMap) -> Result<Binarized> {
    let values = diff.foreground_values();
    let Some(t) = otsu_split(&values) else {
        return Ok(Binarized::empty(diff.height, diff.width));
    };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = values
        .iter()
        .copied()
        .filter(|&v| otsu_bin(v, min, max) > t)
        .fold(f64::INFINITY, f64::min);
    Ok(Binarized::above(diff, threshold))
}

/// Normalized `side`×`side` Gaussian kernel, row-major.
pub fn gaussian_kernel(side: usize, sigma: f64) -> Vec<f64> {
    let r = (side / 2) as f64;
    let raw: Vec<f64> = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64 - r, (i % side) as f64 - r);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Convolve a binary mask with a normalized 5×5 Gaussian (replicated border)
/// and keep pixels whose smoothed value is at least 0.5.
pub fn gaussian_smooth_mask(mask: &SliceMask, sigma: f64) -> Result<SliceMask> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid!("gaussian sigma must be positive, got {sigma}"));
    }
    const SIDE: usize = 5;
    let kernel = gaussian_kernel(SIDE, sigma);
    let (h, w) = (mask.height as isize, mask.width as isize);
    let r = (SIDE / 2) as isize;
    Ok(SliceMask::from_fn(mask.height, mask.width, |row, col| {
        let mut acc = 0.0;
        for dr in -r..=r {
            let rr = (row as isize + dr).clamp(0, h - 1) as usize;
            for dc in -r..=r {
                let cc = (col as isize + dc).clamp(0, w - 1) as usize;
                if mask.get(rr, cc) {
                    acc += kernel[((dr + r) as usize) * SIDE + (dc + r) as usize];
                }
            }
        }
        acc >= 0.5
    }))
}

/// Set every background pixel not 4-connected to the border.
pub fn fill_holes(mask: &SliceMask) -> SliceMask {
    let (h, w) = (mask.height, mask.width);
    let mut outside = vec![false; h * w];
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r + 1 == h || c + 1 == w) && !mask.get(r, c) {
                outside[r * w + c] = true;
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        let mut visit = |rr: usize, cc: usize| {
            let i = rr * w + cc;
            if !outside[i] && mask.data[i] == 0 {
                outside[i] = true;
                stack.push((rr, cc));
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < h {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < w {
            visit(r, c + 1);
        }
    }
    SliceMask {
        height: h,
        width: w,
        data: outside.iter().map(|&o| !o as u8).collect(),
    }
}

const CROSS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbors(mask: &SliceMask, row: usize, col: usize) -> impl Iterator<Item = bool> + '_ {
    CROSS.iter().filter_map(move |&(dr, dc)| {
        let (r, c) = (row as isize + dr, col as isize + dc);
        (r >= 0 && c >= 0 && r < mask.height as isize && c < mask.width as isize)
            .then(|| mask.get(r as usize, c as usize))
    })
}

/// Erosion by the radius-1 cross. Pixels outside the raster do not constrain
/// the result.
pub fn erode(mask: &SliceMask) -> SliceMask {
    SliceMask::from_fn(mask.height, mask.width, |r, c| neighbors(mask, r, c).all(|v| v))
}

/// Dilation by the radius-1 cross.
pub fn dilate(mask: &SliceMask) -> SliceMask {
    SliceMask::from_fn(mask.height, mask.width, |r, c| neighbors(mask, r, c).any(|v| v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kmeans,
    Otsu,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Method::Kmeans),
            "otsu" => Ok(Method::Otsu),
            other => Err(invalid!("unknown binarization method {other:?} (kmeans|otsu)")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Kmeans => "kmeans",
            Method::Otsu => "otsu",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocConfig {
    pub method: Method,
    pub median_window: usize,
    pub sigma: f64,
    pub k: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Pixels whose filtered difference is below this are never lesion
    /// (0.2 is 90 HU under the default window).
    /// Keeps lesion-free slices from splitting reconstruction noise into two
    /// clusters. 0 disables the gate.
    pub min_contrast: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        PostprocConfig {
            method: Method::Kmeans,
            median_window: 5,
            sigma: 1.0,
            k: 2,
            restarts: 10,
            seed: 0,
            min_contrast: 0.2,
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.median_window < 3 || self.median_window % 2 == 0 {
            return Err(invalid!("median_window must be odd and >= 3, got {}", self.median_window));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid!("sigma must be positive, got {}", self.sigma));
        }
        if self.k < 2 {
            return Err(invalid!("k must be >= 2, got {}", self.k));
        }
        if self.restarts == 0 {
            return Err(invalid!("restarts must be >= 1"));
        }
        if !(self.min_contrast >= 0.0 && self.min_contrast.is_finite()) {
            return Err(invalid!("min_contrast must be >= 0, got {}", self.min_contrast));
        }
        Ok(())
    }
}

/// Intermediate products of [`postprocess_stages`], one per stage.
#[derive(Clone, Debug)]
pub struct Stages {
    pub difference: DifferenceMap,
    pub filtered: DifferenceMap,
    pub binary: Binarized,
    pub smoothed: SliceMask,
    pub filled: SliceMask,
    pub eroded: SliceMask,
    pub lesion: SliceMask,
}

pub fn postprocess_stages(
    infected: &SliceImage,
    synthetic: &SliceImage,
    lung: &SliceMask,
    cfg: &PostprocConfig,
) -> Result<Stages> {
    cfg.validate()?;
    let difference = subtract(infected, synthetic, lung)?;
    let filtered = difference.median(cfg.median_window)?;
    let mut binary = match cfg.method {
        Method::Kmeans => kmeans_binarize(&filtered, cfg.k, cfg.restarts, cfg.seed)?,
        Method::Otsu => otsu_binarize(&filtered)?,
    };
    if cfg.min_contrast > 0.0 {
        for (m, &v) in binary.mask.data.iter_mut().zip(&filtered.data) {
            if v < cfg.min_contrast {
                *m = 0;
            }
        }
    }
    let smoothed = gaussian_smooth_mask(&binary.mask, cfg.sigma)?.intersect(lung);
    let filled = fill_holes(&smoothed).intersect(lung);
    let eroded = erode(&filled).intersect(lung);
    let lesion = dilate(&eroded).intersect(lung);
    Ok(Stages {
        difference,
        filtered,
        binary,
        smoothed,
        filled,
        eroded,
        lesion,
    })
}

pub fn postprocess_pipeline(
    infected: &SliceImage,
    synthetic: &SliceImage,
    lung: &SliceMask,
    cfg: &PostprocConfig,
) -> Result<SliceMask> {
    Ok(postprocess_stages(infected, synthetic, lung, cfg)?.lesion)
}
