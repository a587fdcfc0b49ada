//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod gradsuite;

use ctlesion::imgvol::{BinaryMask, Grid, SliceMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_slice_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> SliceMask {
    SliceMask::from_fn(h, w, |_, _| rng.random_bool(p))
}

/// Union of a few random axis-aligned rectangles and discs.
pub fn blobby_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SliceMask {
    let shapes: Vec<(f64, f64, f64, bool)> = (0..rng.random_range(1..6))
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(1.0..6.0),
                rng.random_bool(0.5),
            )
        })
        .collect();
    let mut m = SliceMask::from_fn(h, w, |r, c| {
        shapes.iter().any(|&(cr, cc, rad, disc)| {
            let (dr, dc) = (r as f64 - cr, c as f64 - cc);
            if disc {
                dr * dr + dc * dc <= rad * rad
            } else {
                dr.abs() <= rad && dc.abs() <= rad * 0.6
            }
        })
    });
    for _ in 0..rng.random_range(0..8) {
        let (r, c) = (rng.random_range(0..h), rng.random_range(0..w));
        let on = !m.get(r, c);
        m.set(r, c, on);
    }
    m
}

/// Positive samples from a mixture of one to four narrow modes.
pub fn mixture(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let modes: Vec<(f64, f64)> = (0..r.random_range(1..=4))
        .map(|_| (r.random_range(0.0..1.0), r.random_range(0.005..0.2)))
        .collect();
    (0..n)
        .map(|_| {
            let (m, s) = modes[r.random_range(0..modes.len())];
            let u: f64 = r.random_range(-1.0..1.0) + r.random_range(-1.0..1.0);
            (m + s * u).abs() + 1e-3
        })
        .collect()
}

pub fn median_oracle(h: usize, w: usize, data: &[f64], window: usize) -> Vec<f64> {
    let r = (window / 2) as isize;
    let mut out = Vec::new();
    for row in 0..h as isize {
        for col in 0..w as isize {
            let mut v = Vec::new();
            for dr in -r..=r {
                for dc in -r..=r {
                    let rr = (row + dr).max(0).min(h as isize - 1) as usize;
                    let cc = (col + dc).max(0).min(w as isize - 1) as usize;
                    v.push(data[rr * w + cc]);
                }
            }
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.push(v[v.len() / 2]);
        }
    }
    out
}

fn sse(values: &[f64]) -> f64 {
    let m = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - m) * (v - m)).sum()
}

/// Smallest lesion value of the SSE-optimal two-way split of 1-D data,
/// searching every cut between distinct sorted values; ties keep the lower cut.
pub fn kmeans_split_oracle(values: &[f64]) -> Option<f64> {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<(f64, f64)> = None;
    for c in 1..s.len() {
        if s[c - 1] == s[c] {
            continue;
        }
        let cost = sse(&s[..c]) + sse(&s[c..]);
        if best.is_none() || cost < best.unwrap().0 {
            best = Some((cost, s[c]));
        }
    }
    best.map(|b| b.1)
}

/// Last background bin of the Otsu split, recomputing both classes from the
/// raw values for every candidate bin.
pub fn otsu_oracle(values: &[f64]) -> Option<usize> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(min < max) {
        return None;
    }
    let bin = |v: f64| (((v - min) / (max - min) * 256.0).floor() as usize).min(255);
    let mut best: Option<(usize, f64)> = None;
    for t in 0..255 {
        let lo: Vec<f64> = values.iter().cloned().filter(|&v| bin(v) <= t).collect();
        let hi: Vec<f64> = values.iter().cloned().filter(|&v| bin(v) > t).collect();
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let n = values.len() as f64;
        let (w0, w1) = (lo.len() as f64 / n, hi.len() as f64 / n);
        let m0 = lo.iter().sum::<f64>() / lo.len() as f64;
        let m1 = hi.iter().sum::<f64>() / hi.len() as f64;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none() || between > best.unwrap().1 {
            best = Some((t, between));
        }
    }
    best.map(|b| b.0)
}

/// Hole filling by repeated relaxation: a background pixel is outside if it
/// lies on the border or touches an outside pixel; iterate to a fixed point.
pub fn fill_oracle(m: &SliceMask) -> SliceMask {
    let (h, w) = (m.height, m.width);
    let mut outside = vec![vec![false; w]; h];
    loop {
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                if m.get(r, c) || outside[r][c] {
                    continue;
                }
                let border = r == 0 || c == 0 || r == h - 1 || c == w - 1;
                let near = (r > 0 && outside[r - 1][c])
                    || (r + 1 < h && outside[r + 1][c])
                    || (c > 0 && outside[r][c - 1])
                    || (c + 1 < w && outside[r][c + 1]);
                if border || near {
                    outside[r][c] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    SliceMask::from_fn(h, w, |r, c| !outside[r][c])
}

const CROSS: [(i64, i64); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];

fn members(m: &SliceMask) -> std::collections::HashSet<(i64, i64)> {
    (0..m.height)
        .flat_map(|r| (0..m.width).map(move |c| (r, c)))
        .filter(|&(r, c)| m.get(r, c))
        .map(|(r, c)| (r as i64, c as i64))
        .collect()
}

/// Minkowski sum with the cross, clipped to the raster.
pub fn dilate_oracle(m: &SliceMask) -> SliceMask {
    let set = members(m);
    let mut grown = std::collections::HashSet::new();
    for &(r, c) in &set {
        for (dr, dc) in CROSS {
            grown.insert((r + dr, c + dc));
        }
    }
    SliceMask::from_fn(m.height, m.width, |r, c| grown.contains(&(r as i64, c as i64)))
}

/// Points whose cross lies in the set, treating off-raster points as members.
pub fn erode_oracle(m: &SliceMask) -> SliceMask {
    let set = members(m);
    let (h, w) = (m.height as i64, m.width as i64);
    SliceMask::from_fn(m.height, m.width, |r, c| {
        CROSS.iter().all(|&(dr, dc)| {
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            rr < 0 || cc < 0 || rr >= h || cc >= w || set.contains(&(rr, cc))
        })
    })
}

pub fn grid(n: [usize; 3]) -> Grid {
    Grid::new(n, [1.0; 3], [0.0; 3]).unwrap()
}

pub fn random_volume_mask(rng: &mut ChaCha8Rng, n: [usize; 3], p: f64) -> BinaryMask {
    BinaryMask::from_fn(grid(n), |_, _, _| rng.random_bool(p)).unwrap()
}

/// `(|a|, |b|, |a ∩ b|)` by walking coordinates.
pub fn count_oracle(a: &BinaryMask, b: &BinaryMask) -> (usize, usize, usize) {
    let [nx, ny, nz] = a.dims();
    let (mut p, mut g, mut o) = (0, 0, 0);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (u, v) = (a.get(x, y, z), b.get(x, y, z));
                p += u as usize;
                g += v as usize;
                o += (u && v) as usize;
            }
        }
    }
    (p, g, o)
}

/// Region label from integer box boundaries: band `k` covers offsets
/// `[ceil(k·E/P), ceil((k+1)·E/P))`.
pub fn region_oracle(offset: [usize; 3], extent: [usize; 3], parts: [usize; 3]) -> usize {
    let band = |o: usize, e: usize, p: usize| (0..p).find(|&k| o < ((k + 1) * e).div_ceil(p)).unwrap();
    let bz = band(offset[2], extent[2], parts[2]);
    let by = band(offset[1], extent[1], parts[1]);
    let bx = band(offset[0], extent[0], parts[0]);
    1 + bz * parts[1] * parts[0] + by * parts[0] + bx
}
