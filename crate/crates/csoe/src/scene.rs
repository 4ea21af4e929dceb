//! Synthetic crowd-scene generation: head positions rejection-sampled with a
//! minimum separation, rendered as unit-peak Gaussian blobs whose width grows
//! linearly with row (perspective), plus the paired projection sinogram and
//! compressed code that supervise training.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::radon::{radon_forward, PointSet, Sinogram};
use crate::sensing::{encode, SensingMatrix};

/// Keep heads at least this far from the frame border so peaks have a full
/// neighborhood and projection mass never clamps at detector edges.
const BORDER_MARGIN: f64 = 1.0;

/// Draw attempts per point before giving up on the separation constraint.
const MAX_POINT_TRIES: usize = 1000;

/// One training/evaluation sample.
///
/// Invariants: `sinogram == radon_forward(truth)`, `code == encode(D,
/// sinogram)` for the generating sensing matrix, `image` is the unit-peak
/// blob rendering of `truth`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `h × w` grayscale rendering.
    pub image: Array2<f64>,
    pub truth: PointSet,
    pub sinogram: Sinogram,
    /// `m × r` compressed code, one column per angle.
    pub code: Array2<f64>,
}

/// Mix a base seed with a stream index into an independent child seed
/// (splitmix64 finalizer), so batch elements get decorrelated generators.
pub fn derive_seed(base: u64, idx: u64) -> u64 {
    let mut z = base
        .wrapping_add(idx.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Blob width for a head at `row`: linear ramp from `sigma_range.0` at the
/// top of the frame to `sigma_range.1` at the bottom, modelling perspective
/// (nearer heads image lower and larger).
pub fn point_sigma(sigma_range: (f64, f64), frame: (usize, usize), row: f64) -> f64 {
    let h = frame.0 as f64;
    let frac = if h > 1.0 { (row / (h - 1.0)).clamp(0.0, 1.0) } else { 0.0 };
    sigma_range.0 + (sigma_range.1 - sigma_range.0) * frac
}

fn validate_params(frame: (usize, usize), k: usize, sigma_range: (f64, f64), min_sep: f64) -> Result<()> {
    let (lo, hi) = sigma_range;
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo) {
        return Err(Error::Config(format!(
            "sigma range must satisfy 0 < lo ≤ hi, got ({lo}, {hi})"
        )));
    }
    if !(min_sep.is_finite() && min_sep >= 0.0) {
        return Err(Error::Config(format!("min separation {min_sep} must be ≥ 0")));
    }
    if k > 0 {
        let (h, w) = (frame.0 as f64, frame.1 as f64);
        if h - 1.0 - 2.0 * BORDER_MARGIN < 0.0 || w - 1.0 - 2.0 * BORDER_MARGIN < 0.0 {
            return Err(Error::Config(format!("frame {frame:?} too small for head placement")));
        }
    }
    Ok(())
}

/// Sample `k` head positions with pairwise separation ≥ `min_sep` and render
/// them as unit-peak Gaussians. Separate from [`synth_scene`] so callers that
/// only need imagery (e.g. direct-regression baselines) skip the projection.
pub fn synth_points(
    seed: u64,
    frame: (usize, usize),
    k: usize,
    sigma_range: (f64, f64),
    min_sep: f64,
) -> Result<(Array2<f64>, PointSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth_points_rng(&mut rng, frame, k, sigma_range, min_sep)
}

fn synth_points_rng(
    rng: &mut ChaCha8Rng,
    frame: (usize, usize),
    k: usize,
    sigma_range: (f64, f64),
    min_sep: f64,
) -> Result<(Array2<f64>, PointSet)> {
    validate_params(frame, k, sigma_range, min_sep)?;
    let (h, w) = frame;
    let (row_lo, row_hi) = (BORDER_MARGIN, h as f64 - 1.0 - BORDER_MARGIN);
    let (col_lo, col_hi) = (BORDER_MARGIN, w as f64 - 1.0 - BORDER_MARGIN);
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut placed = false;
        for _ in 0..MAX_POINT_TRIES {
            let r = rng.random_range(row_lo..=row_hi);
            let c = rng.random_range(col_lo..=col_hi);
            let sep_ok = points
                .iter()
                .all(|&(pr, pc)| ((pr - r).powi(2) + (pc - c).powi(2)).sqrt() >= min_sep);
            if sep_ok {
                points.push((r, c));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place {k} points with separation {min_sep} in frame {frame:?} \
                 ({} placed after {MAX_POINT_TRIES} tries each)",
                points.len()
            )));
        }
    }
    let mut image = Array2::zeros((h, w));
    for &(r0, c0) in &points {
        let sigma = point_sigma(sigma_range, frame, r0);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 - r0).powi(2) + (j as f64 - c0).powi(2);
                image[(i, j)] += (-d2 * inv).exp();
            }
        }
    }
    Ok((image, PointSet::new(points, frame)?))
}

/// Full sample: positions and image from [`synth_points`], then the
/// projection sinogram of the truth and its compressed code.
pub fn synth_scene(
    sensing: &SensingMatrix,
    angles: &[f64],
    seed: u64,
    frame: (usize, usize),
    k: usize,
    sigma_range: (f64, f64),
    min_sep: f64,
) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth_scene_rng(sensing, angles, &mut rng, frame, k, sigma_range, min_sep)
}

fn synth_scene_rng(
    sensing: &SensingMatrix,
    angles: &[f64],
    rng: &mut ChaCha8Rng,
    frame: (usize, usize),
    k: usize,
    sigma_range: (f64, f64),
    min_sep: f64,
) -> Result<Scene> {
    let (image, truth) = synth_points_rng(rng, frame, k, sigma_range, min_sep)?;
    let sinogram = radon_forward(&truth, angles)?;
    let code = encode(sensing, sinogram.values.view())?;
    Ok(Scene { image, truth, sinogram, code })
}

/// Generate `count` scenes with per-scene head counts drawn uniformly from
/// `k_range` (inclusive). Scene `i` derives its own seed from `(base_seed,
/// i)`, so the batch is order-independent and reproducible element-wise.
pub fn synth_batch(
    sensing: &SensingMatrix,
    angles: &[f64],
    base_seed: u64,
    count: usize,
    frame: (usize, usize),
    k_range: (usize, usize),
    sigma_range: (f64, f64),
    min_sep: f64,
) -> Result<Vec<Scene>> {
    if k_range.1 < k_range.0 {
        return Err(Error::Config(format!("invalid head-count range {k_range:?}")));
    }
    let results = crate::exec::map_collect(count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, i as u64));
        let k = rng.random_range(k_range.0..=k_range.1);
        synth_scene_rng(sensing, angles, &mut rng, frame, k, sigma_range, min_sep)
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radon::{default_angles, detector_bins};
    use crate::sensing::make_sensing_matrix;

    const FRAME: (usize, usize) = (32, 32);
    const SIGMAS: (f64, f64) = (0.8, 1.6);

    fn test_sensing() -> SensingMatrix {
        make_sensing_matrix(20, detector_bins(FRAME), 7).unwrap()
    }

    #[test]
    fn zero_heads_give_zero_image_and_empty_truth() {
        let (image, truth) = synth_points(3, FRAME, 0, SIGMAS, 2.0).unwrap();
        assert!(truth.is_empty());
        assert!(image.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_head_peaks_at_its_position() {
        for seed in 0..10 {
            let (image, truth) = synth_points(seed, FRAME, 1, SIGMAS, 0.0).unwrap();
            let (r0, c0) = truth.points[0];
            let (mut best, mut best_v) = ((0, 0), f64::NEG_INFINITY);
            for ((i, j), &v) in image.indexed_iter() {
                if v > best_v {
                    best = (i, j);
                    best_v = v;
                }
            }
            assert_eq!(best, (r0.round() as usize, c0.round() as usize));
            assert!(best_v <= 1.0 + 1e-12);
            assert!(best_v > 0.5, "peak sample {best_v} too weak");
        }
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let s = test_sensing();
        let angles = default_angles(12);
        let a = synth_scene(&s, &angles, 42, FRAME, 9, SIGMAS, 2.0).unwrap();
        let b = synth_scene(&s, &angles, 42, FRAME, 9, SIGMAS, 2.0).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(&s, &angles, 43, FRAME, 9, SIGMAS, 2.0).unwrap();
        assert_ne!(a.truth.points, c.truth.points);
    }

    #[test]
    fn infeasible_separation_errors_out() {
        let err = synth_points(1, FRAME, 40, SIGMAS, 20.0).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
    }

    #[test]
    fn sigma_grows_with_row() {
        assert_eq!(point_sigma(SIGMAS, FRAME, 0.0), SIGMAS.0);
        assert_eq!(point_sigma(SIGMAS, FRAME, 31.0), SIGMAS.1);
        let mid = point_sigma(SIGMAS, FRAME, 15.5);
        assert!(SIGMAS.0 < mid && mid < SIGMAS.1);
        assert!(point_sigma(SIGMAS, FRAME, 10.0) < point_sigma(SIGMAS, FRAME, 20.0));
    }

    #[test]
    fn batch_scenes_satisfy_all_invariants() {
        let s = test_sensing();
        let angles = default_angles(12);
        let scenes = synth_batch(&s, &angles, 99, 100, FRAME, (1, 30), SIGMAS, 2.0).unwrap();
        assert_eq!(scenes.len(), 100);
        let mut counts = std::collections::HashSet::new();
        for scene in &scenes {
            let k = scene.truth.len();
            counts.insert(k);
            assert!((1..=30).contains(&k));
            // Pairwise separation.
            for (i, &p) in scene.truth.points.iter().enumerate() {
                for &q in &scene.truth.points[..i] {
                    let d = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
                    assert!(d >= 2.0, "separation {d} below minimum");
                }
            }
            // Image bounds: nonnegative, no sample above the blob-sum peak.
            assert!(scene.image.iter().all(|&v| (0.0..=k as f64 + 1e-9).contains(&v)));
            // Sinogram matches an independent projection of the truth.
            let reproj = radon_forward(&scene.truth, &angles).unwrap();
            assert_eq!(scene.sinogram, reproj);
            // Interior points deposit exactly unit mass per angle column.
            for j in 0..scene.sinogram.r() {
                let col_sum: f64 = scene.sinogram.values.column(j).sum();
                assert!((col_sum - k as f64).abs() < 1e-9);
            }
            // Code matches an independent encode of the sinogram.
            let recode = encode(&s, scene.sinogram.values.view()).unwrap();
            assert_eq!(scene.code, recode);
            assert_eq!(scene.code.dim(), (20, 12));
        }
        // The batch actually varies in density.
        assert!(counts.len() > 10, "only {} distinct head counts", counts.len());
    }

    #[test]
    fn derived_seeds_decorrelate_consecutive_indices() {
        let a = derive_seed(123, 0);
        let b = derive_seed(123, 1);
        assert_ne!(a, b);
        assert_ne!(a ^ b, 0);
        // Same inputs, same child seed.
        assert_eq!(derive_seed(123, 7), derive_seed(123, 7));
    }

    #[test]
    fn parameter_validation_rejects_bad_ranges() {
        assert!(matches!(synth_points(0, FRAME, 1, (0.0, 1.0), 0.0), Err(Error::Config(_))));
        assert!(matches!(synth_points(0, FRAME, 1, (2.0, 1.0), 0.0), Err(Error::Config(_))));
        assert!(matches!(synth_points(0, FRAME, 1, SIGMAS, -1.0), Err(Error::Config(_))));
        assert!(matches!(synth_points(0, (2, 2), 1, SIGMAS, 0.0), Err(Error::Config(_))));
        // Zero heads never need placement space.
        assert!(synth_points(0, (2, 2), 0, SIGMAS, 0.0).is_ok());
    }
}
