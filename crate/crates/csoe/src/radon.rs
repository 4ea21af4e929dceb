//! Radon-domain encoding of point sets and the reverse decoding path.
//!
//! A point map over an `h × w` frame projects onto `n = ceil(sqrt(h² + w²))`
//! detector bins per angle. Each point deposits unit mass per angle, split by
//! linear interpolation between the two nearest bins, so sinogram columns sum
//! to the point count. Decoding goes through ramp-filtered backprojection
//! followed by greedy peak extraction.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::exec;

/// Sub-pixel head locations within an image frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    /// `(row, col)` pairs in pixels.
    pub points: Vec<(f64, f64)>,
    /// `(h, w)` frame dimensions in pixels.
    pub frame: (usize, usize),
}

impl PointSet {
    /// Build a point set, checking that every point lies inside the frame.
    pub fn new(points: Vec<(f64, f64)>, frame: (usize, usize)) -> Result<Self> {
        if frame.0 == 0 || frame.1 == 0 {
            return Err(Error::Domain(format!("frame must be positive, got {frame:?}")));
        }
        for &(row, col) in &points {
            if !(row.is_finite() && col.is_finite()) || row < 0.0 || col < 0.0
                || row >= frame.0 as f64 || col >= frame.1 as f64
            {
                return Err(Error::Domain(format!(
                    "point ({row}, {col}) outside frame {frame:?}"
                )));
            }
        }
        Ok(PointSet { points, frame })
    }

    pub fn empty(frame: (usize, usize)) -> Self {
        PointSet { points: Vec::new(), frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Radon projections of a point map: one column per angle, `n` detector bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    /// `n × r` projection values.
    pub values: Array2<f64>,
    /// Projection angles in degrees, strictly increasing within `[0, 179]`.
    pub angles: Vec<f64>,
    /// Source frame `(h, w)`.
    pub frame: (usize, usize),
}

impl Sinogram {
    /// Detector bin count.
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Angle count.
    pub fn r(&self) -> usize {
        self.values.ncols()
    }
}

/// Detector bin count for a frame: `ceil(sqrt(h² + w²))`.
pub fn detector_bins(frame: (usize, usize)) -> usize {
    let (h, w) = (frame.0 as f64, frame.1 as f64);
    (h * h + w * w).sqrt().ceil() as usize
}

/// Index of the detector bin a zero-offset point maps to.
pub fn center_bin(n: usize) -> usize {
    (n - 1) / 2
}

/// `r` angles uniformly spaced over `[0, 179]` degrees, endpoints included.
pub fn default_angles(r: usize) -> Vec<f64> {
    if r == 1 {
        return vec![0.0];
    }
    (0..r).map(|j| 179.0 * j as f64 / (r - 1) as f64).collect()
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90 so that
/// axis-aligned projections depend on exactly one coordinate.
fn sincos_deg(deg: f64) -> (f64, f64) {
    let rem = deg.rem_euclid(360.0);
    if rem == 0.0 {
        (0.0, 1.0)
    } else if rem == 90.0 {
        (1.0, 0.0)
    } else if rem == 180.0 {
        (0.0, -1.0)
    } else if rem == 270.0 {
        (-1.0, 0.0)
    } else {
        deg.to_radians().sin_cos()
    }
}

fn check_angles(angles: &[f64]) -> Result<()> {
    if angles.is_empty() {
        return Err(Error::Domain("angle list is empty".into()));
    }
    for &a in angles {
        if !a.is_finite() || !(0.0..=179.0).contains(&a) {
            return Err(Error::Domain(format!("angle {a} outside [0, 179] degrees")));
        }
    }
    Ok(())
}

/// Project a point set onto detector bins, one column per angle.
///
/// A point at `(row, col)` lands at signed offset
/// `(col − cx)·cosθ + (row − cy)·sinθ` from the center bin, with
/// `(cy, cx) = ((h−1)/2, (w−1)/2)`. Its unit mass splits linearly between the
/// two bins bracketing that position; mass falling outside the detector
/// (possible only for extreme corner points) clamps to the edge bin so that
/// column sums stay exact.
pub fn radon_forward(points: &PointSet, angles: &[f64]) -> Result<Sinogram> {
    check_angles(angles)?;
    let (h, w) = points.frame;
    if h == 0 || w == 0 {
        return Err(Error::Domain("frame must have positive dims".into()));
    }
    for &(row, col) in &points.points {
        if row < 0.0 || col < 0.0 || row >= h as f64 || col >= w as f64 {
            return Err(Error::Domain(format!(
                "point ({row}, {col}) outside frame ({h}, {w})"
            )));
        }
    }

    let n = detector_bins(points.frame);
    let c0 = center_bin(n) as f64;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;

    let mut values = Array2::<f64>::zeros((n, angles.len()));
    for (j, &angle) in angles.iter().enumerate() {
        let (sin, cos) = sincos_deg(angle);
        let mut column = values.column_mut(j);
        for &(row, col) in &points.points {
            let offset = (col - cx) * cos + (row - cy) * sin;
            let pos = c0 + offset;
            let lo = pos.floor();
            let frac = pos - lo;
            let lo_idx = (lo as isize).clamp(0, n as isize - 1) as usize;
            let hi_idx = (lo as isize + 1).clamp(0, n as isize - 1) as usize;
            column[lo_idx] += 1.0 - frac;
            column[hi_idx] += frac;
        }
    }

    Ok(Sinogram {
        values,
        angles: angles.to_vec(),
        frame: points.frame,
    })
}

/// Frequency-domain ramp filter built from the band-limited spatial kernel
/// (value `1/4` at lag 0, `−1/(πk)²` at odd lags, `0` at even lags). Taking
/// the DFT of the spatial kernel instead of sampling `|f|` directly avoids
/// the DC bias of the naive ramp.
fn ramp_filter(size: usize) -> Vec<f64> {
    let mut kernel = vec![0.0f64; size];
    kernel[0] = 0.25;
    let mut k = 1usize;
    while k < size / 2 + 1 {
        let v = -1.0 / (std::f64::consts::PI * k as f64).powi(2);
        kernel[k] = v;
        kernel[size - k] = v;
        k += 2;
    }
    let mut buf: Vec<Complex<f64>> = kernel.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let fft = FftPlanner::new().plan_fft_forward(size);
    fft.process(&mut buf);
    buf.iter().map(|c| 2.0 * c.re).collect()
}

/// Filtered backprojection of a sinogram back to an `h × w` map.
///
/// Each column is ramp-filtered (Ram-Lak, no apodization) in the frequency
/// domain, then backprojected with linear interpolation and scaled by
/// `π / (2r)`.
pub fn fbp_inverse(sino: &Sinogram) -> Result<Array2<f64>> {
    let r = sino.r();
    if r < 2 {
        return Err(Error::Domain(format!(
            "degenerate reconstruction: {r} angle(s), need at least 2"
        )));
    }
    if sino.angles.len() != r {
        return Err(Error::Domain("angle list does not match sinogram width".into()));
    }
    let n = sino.n();
    let (h, w) = sino.frame;

    let size = (2 * n).max(64).next_power_of_two();
    let filter = ramp_filter(size);
    let fwd = FftPlanner::new().plan_fft_forward(size);
    let inv = FftPlanner::new().plan_fft_inverse(size);

    // Filter every angle column independently.
    let filtered: Vec<Vec<f64>> = exec::map_collect(r, |j| {
        let mut buf = vec![Complex::new(0.0, 0.0); size];
        for (i, v) in sino.values.column(j).iter().enumerate() {
            buf[i] = Complex::new(*v, 0.0);
        }
        fwd.process(&mut buf);
        for (b, f) in buf.iter_mut().zip(&filter) {
            *b *= *f;
        }
        inv.process(&mut buf);
        buf[..n].iter().map(|c| c.re / size as f64).collect()
    });

    let c0 = center_bin(n) as f64;
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let trig: Vec<(f64, f64)> = sino.angles.iter().map(|&a| sincos_deg(a)).collect();
    let scale = std::f64::consts::PI / (2.0 * r as f64);

    let mut out = vec![0.0f64; h * w];
    exec::for_each_chunk_mut(&mut out, w, |i, row_buf| {
        let row = i as f64 - cy;
        for (j, cell) in row_buf.iter_mut().enumerate() {
            let col = j as f64 - cx;
            let mut sum = 0.0;
            for (q, &(sin, cos)) in trig.iter().enumerate() {
                let pos = c0 + col * cos + row * sin;
                let lo = pos.floor();
                let frac = pos - lo;
                let lo = lo as isize;
                let col_vals = &filtered[q];
                if lo >= 0 && (lo as usize) < n {
                    sum += col_vals[lo as usize] * (1.0 - frac);
                }
                if lo + 1 >= 0 && ((lo + 1) as usize) < n {
                    sum += col_vals[(lo + 1) as usize] * frac;
                }
            }
            *cell = sum * scale;
        }
    });

    Array2::from_shape_vec((h, w), out)
        .map_err(|e| Error::Domain(format!("output shape: {e}")))
}

/// Local maxima of a map, greedily accepted in descending value order.
///
/// Candidates are pixels that are ≥ all 8 neighbours and reach
/// `rel_threshold · max`. An accepted peak suppresses later candidates closer
/// than `min_distance` (Euclidean). Ties in value break by ascending
/// `(row, col)`. An all-zero (or all-nonpositive) map yields an empty set.
pub fn extract_peaks(
    map: &Array2<f64>,
    rel_threshold: f64,
    min_distance: f64,
) -> Result<PointSet> {
    if !(0.0 < rel_threshold && rel_threshold <= 1.0) {
        return Err(Error::Domain(format!(
            "rel_threshold {rel_threshold} outside (0, 1]"
        )));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("map contains non-finite values".into()));
    }
    let (h, w) = map.dim();
    let frame = (h, w);
    let global_max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if global_max <= 0.0 {
        return Ok(PointSet::empty(frame));
    }
    let cutoff = rel_threshold * global_max;
    let accepted = greedy_peaks(map, cutoff, min_distance, usize::MAX);
    Ok(PointSet { points: accepted, frame })
}

/// The `count` strongest local maxima after suppression.
///
/// Same candidate set and greedy acceptance as [`extract_peaks`] but with no
/// height cutoff: selection stops once `count` peaks survive, so an external
/// count estimate (e.g. recovered sinogram mass) drives extraction instead of
/// a relative threshold. Returns fewer than `count` points only when the map
/// has too few strictly positive local maxima.
pub fn extract_peaks_counted(
    map: &Array2<f64>,
    count: usize,
    min_distance: f64,
) -> Result<PointSet> {
    if map.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("map contains non-finite values".into()));
    }
    let frame = map.dim();
    if count == 0 || map.iter().cloned().fold(f64::NEG_INFINITY, f64::max) <= 0.0 {
        return Ok(PointSet::empty(frame));
    }
    let accepted = greedy_peaks(map, 0.0, min_distance, count);
    Ok(PointSet { points: accepted, frame })
}

/// Strictly positive 8-neighbourhood maxima ≥ `cutoff`, accepted in
/// descending value order (ties by ascending row, col) until `limit`; each
/// acceptance suppresses later candidates within `min_distance`.
fn greedy_peaks(
    map: &Array2<f64>,
    cutoff: f64,
    min_distance: f64,
    limit: usize,
) -> Vec<(f64, f64)> {
    let (h, w) = map.dim();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let v = map[(i, j)];
            if v < cutoff || v <= 0.0 {
                continue;
            }
            let mut is_max = true;
            'nb: for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                        continue;
                    }
                    if map[(ni as usize, nj as usize)] > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                candidates.push((v, i, j));
            }
        }
    }

    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut accepted: Vec<(f64, f64)> = Vec::new();
    for (_, i, j) in candidates {
        if accepted.len() == limit {
            break;
        }
        let (pi, pj) = (i as f64, j as f64);
        let clear = accepted
            .iter()
            .all(|&(ai, aj)| ((ai - pi).powi(2) + (aj - pj).powi(2)).sqrt() >= min_distance);
        if clear {
            accepted.push((pi, pj));
        }
    }
    accepted
}
