//! Finite-difference verification of every hand-written gradient rule.
//!
//! The recovery-stage checks differentiate a scalar loss *through the
//! smoothed solver*: a linear loss `L = Σ_{i∈p} g_i·a_i` is attached to the
//! support coordinates of a base solution, and the analytic transfer rules
//! are compared against central differences of `L` under perturbations of
//! `x` or of single `D` entries (re-solving each time, warm-started from
//! the base solution).
//!
//! Fixtures are built as *exact stationary points* instead of being solved
//! from scratch: given a support `p` with large coefficients, the residual
//! `w = D_p(D_pᵀD_p)⁻¹·λg_p` satisfies the support stationarity conditions,
//! the off-support correlations `c_q = D_qᵀw/λ` are computed directly, and
//! draws are rejected until every `|c_q| ≤ 0.9`. Setting the off-support
//! coordinates to their closed-form values `ε·c/√(1−c²)` and defining
//! `x = Da* + w` makes `a*` the exact smoothed minimizer. Rejection keeps
//! every coordinate stiffly pinned, so warm-started FD solves converge in a
//! couple of Newton steps and the finite-smoothing bias stays orders of
//! magnitude below the pass thresholds.
//!
//! Observation-network checks re-run each block's backward against central
//! differences at sampled coordinates. The whole suite is deterministic
//! given its seed and is shared by the library tests and the `gradcheck`
//! CLI command.

use std::fmt;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::Cholesky;
use crate::obsnet::{
    arfw_backward, arfw_forward, center_pool, center_pool_backward, dilated_conv,
    dilated_conv_backward, mdcb_backward, mdcb_forward, obsnet_backward, obsnet_forward,
    FeatureMap, ObsConfig, ObsParams,
};
use crate::recon_grad::{
    backprop_approx, backprop_exact_dd, backprop_exact_dx, support_set, SupportSplit,
};
use crate::recovery::exact_solve_smoothed_from;
use crate::sensing::make_sensing_matrix;

/// Outcome of one rule's verification run.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    /// Worst observed statistic: max relative error, or min cosine when
    /// `higher_is_better`.
    pub observed: f64,
    pub threshold: f64,
    pub higher_is_better: bool,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.observed.is_finite()
            && if self.higher_is_better {
                self.observed >= self.threshold
            } else {
                self.observed < self.threshold
            }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, rel) = if self.higher_is_better {
            ("min cosine ", ">=")
        } else {
            ("max rel err", "< ")
        };
        write!(
            f,
            "{:<24} {kind} {:>10.4e} over {:>3} instances (require {rel} {:.1e})  {}",
            self.name,
            self.observed,
            self.instances,
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Suite parameters. Defaults match the documented verification setup:
/// 20×50 sensing matrices, 4-sparse codes, smoothing 1e-3, FD step 1e-5.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Instances for the exact-rule checks.
    pub instances: usize,
    /// Instances for the approx-vs-exact cosine statistic.
    pub cosine_instances: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Sparsity penalty weight used when solving fixtures. Large relative to
    /// the smoothing width so support coordinates dwarf the rest.
    pub lambda: f64,
    /// Smoothing width ε of the surrogate `Σ√(a² + ε²)`.
    pub eps: f64,
    /// Central-difference step.
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 1234,
            instances: 50,
            cosine_instances: 100,
            m: 20,
            n: 50,
            k: 4,
            lambda: 500.0,
            eps: 1e-3,
            step: 1e-5,
        }
    }
}

/// Convergence target for the warm-started FD solves: tight enough that
/// solver noise stays far below the FD signal `2·step·‖∂L‖`, loose enough
/// to sit above the f64 cancellation floor of the gradient evaluation
/// (~1e-12 at the fixture's data scale).
const SOLVER_TOL: f64 = 1e-10;
const SOLVER_ITERS: usize = 200;

/// Off-support correlations `|D_qᵀw|/λ` above this bound leave coordinates
/// weakly pinned (stiffness `(λ/ε)(1−c²)^{3/2}`); such draws are rejected.
const MAX_OFF_SUPPORT_CORR: f64 = 0.9;

struct Fixture {
    d: Array2<f64>,
    x: Array1<f64>,
    a: Array1<f64>,
    split: SupportSplit,
    /// Loss weights; nonzero only on the support.
    delta_a: Array1<f64>,
}

fn max_abs(a: &Array1<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Relative error between two vectors at vector level.
fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(fd.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Build one seeded instance as an exact stationary point of the smoothed
/// objective: `k` support coefficients of magnitude `[5λ, 10λ]`, residual
/// `w = D_p(D_pᵀD_p)⁻¹·λg_p`, off-support coordinates at their closed-form
/// values, `x = Da* + w`. Draws whose off-support correlations exceed
/// [`MAX_OFF_SUPPORT_CORR`] or whose support Gram condition exceeds
/// `max_cond` are rejected and redrawn deterministically.
fn fixture(cfg: &GradcheckConfig, idx: u64, max_cond: f64) -> Result<Fixture> {
    for attempt in 0..4000u64 {
        let seed = cfg
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(idx.wrapping_mul(0x2545_F491_4F6C_DD1D))
            .wrapping_add(attempt.wrapping_mul(0x9E37_79B9));
        let sm = make_sensing_matrix(cfg.m, cfg.n, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66);
        let mut support: Vec<usize> = Vec::with_capacity(cfg.k);
        while support.len() < cfg.k {
            let i = rng.random_range(0..cfg.n);
            if !support.contains(&i) {
                support.push(i);
            }
        }
        support.sort_unstable();
        let mut a = Array1::<f64>::zeros(cfg.n);
        for &i in &support {
            let mag = cfg.lambda * (5.0 + 5.0 * rng.random::<f64>());
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            a[i] = sign * mag;
        }

        let mut d_p = Array2::<f64>::zeros((cfg.m, cfg.k));
        for (j, &col) in support.iter().enumerate() {
            d_p.column_mut(j).assign(&sm.d.column(col));
        }
        let gram_pp = d_p.t().dot(&d_p);
        let chol = match Cholesky::new(&gram_pp) {
            Ok(c) => c,
            Err(_) => continue,
        };
        if chol.condition_estimate(&gram_pp) > max_cond {
            continue;
        }
        // Support stationarity: D_pᵀw = λ·g_p with g_i = a_i/√(a_i²+ε²).
        let g_p = Array1::from_iter(
            support
                .iter()
                .map(|&i| cfg.lambda * a[i] / (a[i] * a[i] + cfg.eps * cfg.eps).sqrt()),
        );
        let w = d_p.dot(&chol.solve(g_p.view()));
        // Off-support stationarity: a_q = ε·c/√(1−c²) with c = D_qᵀw/λ.
        let mut rejected = false;
        for col in 0..cfg.n {
            if support.contains(&col) {
                continue;
            }
            let c = sm.d.column(col).dot(&w) / cfg.lambda;
            if c.abs() > MAX_OFF_SUPPORT_CORR {
                rejected = true;
                break;
            }
            a[col] = cfg.eps * c / (1.0 - c * c).sqrt();
        }
        if rejected {
            continue;
        }
        let x = sm.d.dot(&a) + &w;
        let split = support_set(a.view(), 1e-3 * max_abs(&a))?;
        debug_assert_eq!(split.p, support);
        let mut delta_a = Array1::<f64>::zeros(cfg.n);
        for &i in &split.p {
            let z: f64 = StandardNormal.sample(&mut rng);
            delta_a[i] = z;
        }
        return Ok(Fixture { d: sm.d, x, a, split, delta_a });
    }
    Err(Error::Numeric(format!(
        "could not draw a well-conditioned verification instance for index {idx}"
    )))
}

/// `L = Σ_{i∈p} δa_i · a_i` evaluated at the warm-started smoothed solution.
fn loss_through_solver(
    d: &Array2<f64>,
    x: &Array1<f64>,
    cfg: &GradcheckConfig,
    warm: &Array1<f64>,
    delta_a: &Array1<f64>,
    p: &[usize],
) -> Result<f64> {
    let a = exact_solve_smoothed_from(
        d.view(),
        x.view(),
        cfg.lambda,
        cfg.eps,
        warm.clone(),
        SOLVER_TOL,
        SOLVER_ITERS,
    )?;
    Ok(p.iter().map(|&i| delta_a[i] * a[i]).sum())
}

fn fold_max(results: Vec<Result<f64>>) -> Result<f64> {
    let mut worst = 0.0f64;
    for r in results {
        worst = worst.max(r?);
    }
    Ok(worst)
}

/// Exact measurement-gradient rule vs central differences through the
/// smoothed solver, one FD solve pair per measurement coordinate.
pub fn check_exact_dx(cfg: &GradcheckConfig) -> Result<CheckReport> {
    let per_instance = exec::map_collect(cfg.instances, |i| -> Result<f64> {
        let fx = fixture(cfg, i as u64, 1e3)?;
        let analytic = backprop_exact_dx(fx.d.view(), fx.a.view(), fx.delta_a.view(), &fx.split)?;
        let mut fd = vec![0.0; cfg.m];
        for j in 0..cfg.m {
            let mut xp = fx.x.clone();
            xp[j] += cfg.step;
            let mut xm = fx.x.clone();
            xm[j] -= cfg.step;
            let lp = loss_through_solver(&fx.d, &xp, cfg, &fx.a, &fx.delta_a, &fx.split.p)?;
            let lm = loss_through_solver(&fx.d, &xm, cfg, &fx.a, &fx.delta_a, &fx.split.p)?;
            fd[j] = (lp - lm) / (2.0 * cfg.step);
        }
        Ok(rel_err(analytic.as_slice().expect("layout"), &fd))
    });
    Ok(CheckReport {
        name: "exact-dx".into(),
        instances: cfg.instances,
        observed: fold_max(per_instance)?,
        threshold: 1e-4,
        higher_is_better: false,
    })
}

/// Exact dictionary-gradient rule vs central differences: every support
/// column entry plus a seeded sample of off-support entries (whose analytic
/// gradient must be exactly zero).
pub fn check_exact_dd(cfg: &GradcheckConfig) -> Result<CheckReport> {
    let per_instance = exec::map_collect(cfg.instances, |i| -> Result<f64> {
        let fx = fixture(cfg, i as u64, 1e3)?;
        let analytic = backprop_exact_dd(
            fx.d.view(),
            fx.a.view(),
            fx.x.view(),
            fx.delta_a.view(),
            &fx.split,
        )?;
        for &col in &fx.split.q {
            for r in 0..cfg.m {
                if analytic[(r, col)] != 0.0 {
                    return Err(Error::Numeric(format!(
                        "off-support dictionary gradient is not exactly zero at ({r},{col})"
                    )));
                }
            }
        }
        let mut entries: Vec<(usize, usize)> = Vec::new();
        for &col in &fx.split.p {
            for r in 0..cfg.m {
                entries.push((r, col));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xD0 + i as u64));
        for _ in 0..40 {
            let col = fx.split.q[rng.random_range(0..fx.split.q.len())];
            entries.push((rng.random_range(0..cfg.m), col));
        }
        let mut an = Vec::with_capacity(entries.len());
        let mut fd = Vec::with_capacity(entries.len());
        for &(r, c) in &entries {
            let mut dp = fx.d.clone();
            dp[(r, c)] += cfg.step;
            let mut dm = fx.d.clone();
            dm[(r, c)] -= cfg.step;
            let lp = loss_through_solver(&dp, &fx.x, cfg, &fx.a, &fx.delta_a, &fx.split.p)?;
            let lm = loss_through_solver(&dm, &fx.x, cfg, &fx.a, &fx.delta_a, &fx.split.p)?;
            an.push(analytic[(r, c)]);
            fd.push((lp - lm) / (2.0 * cfg.step));
        }
        Ok(rel_err(&an, &fd))
    });
    Ok(CheckReport {
        name: "exact-dD".into(),
        instances: cfg.instances,
        observed: fold_max(per_instance)?,
        threshold: 1e-4,
        higher_is_better: false,
    })
}

/// Identity-Gram approximation vs the exact rule: cosine similarity of the
/// two measurement gradients, minimum over seeded instances.
pub fn check_approx_cosine(cfg: &GradcheckConfig) -> Result<CheckReport> {
    let per_instance = exec::map_collect(cfg.cosine_instances, |i| -> Result<f64> {
        // Gram condition ≤ 2.2 keeps the Kantorovich cosine bound
        // 2√κ/(1+κ) above 0.92 for any gradient direction.
        let fx = fixture(cfg, 10_000 + i as u64, 2.2)?;
        let exact = backprop_exact_dx(fx.d.view(), fx.a.view(), fx.delta_a.view(), &fx.split)?;
        let x_hat = fx.d.dot(&fx.a);
        let (approx, _) = backprop_approx(
            fx.d.view(),
            fx.a.view(),
            x_hat.view(),
            fx.delta_a.view(),
            &fx.split,
        )?;
        Ok(cosine(&approx, &exact))
    });
    let mut worst = f64::INFINITY;
    for r in per_instance {
        worst = worst.min(r?);
    }
    Ok(CheckReport {
        name: "approx-vs-exact".into(),
        instances: cfg.cosine_instances,
        observed: worst,
        threshold: 0.9,
        higher_is_better: true,
    })
}

fn randn(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_fm(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    Array3::from_shape_vec((c, h, w), randn(rng, c * h * w)).expect("shape")
}

const BLOCK_FD_STEP: f64 = 1e-6;

fn coord_rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-7)
}

/// Worst coordinate-level relative error of `analytic` against central
/// differences of `loss` under single-coordinate perturbations of a flat
/// parameter vector accessed through `perturb`.
fn fd_scan(
    len: usize,
    sample: usize,
    rng: &mut ChaCha8Rng,
    analytic: &dyn Fn(usize) -> f64,
    loss_with_offset: &mut dyn FnMut(usize, f64) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    let picks: Vec<usize> = if sample >= len {
        (0..len).collect()
    } else {
        (0..sample).map(|_| rng.random_range(0..len)).collect()
    };
    for i in picks {
        let lp = loss_with_offset(i, BLOCK_FD_STEP);
        let lm = loss_with_offset(i, -BLOCK_FD_STEP);
        let fd = (lp - lm) / (2.0 * BLOCK_FD_STEP);
        worst = worst.max(coord_rel_err(analytic(i), fd));
    }
    worst
}

/// Dilated-convolution backward (kernel and input paths) vs central
/// differences at sampled coordinates, dilations 1..3.
pub fn check_conv_backward(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC011);
    let fm = random_fm(&mut rng, 2, 7, 8);
    let kernel =
        Array4::from_shape_vec((3, 2, 3, 3), randn(&mut rng, 3 * 2 * 9)).expect("shape");
    let weights = random_fm(&mut rng, 3, 7, 8);
    let mut worst = 0.0f64;
    for dil in 1..=3usize {
        let (dk, dfm) = dilated_conv_backward(&fm, &kernel, dil, &weights)?;
        let dk_flat = dk.as_slice().expect("layout").to_vec();
        let dfm_flat = dfm.as_slice().expect("layout").to_vec();
        let mut loss_k = |i: usize, off: f64| -> f64 {
            let mut k2 = kernel.clone();
            k2.as_slice_mut().expect("layout")[i] += off;
            dilated_conv(&fm, &k2, dil)
                .expect("dims fixed")
                .iter()
                .zip(weights.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        worst = worst.max(fd_scan(dk_flat.len(), 16, &mut rng, &|i| dk_flat[i], &mut loss_k));
        let mut loss_fm = |i: usize, off: f64| -> f64 {
            let mut f2 = fm.clone();
            f2.as_slice_mut().expect("layout")[i] += off;
            dilated_conv(&f2, &kernel, dil)
                .expect("dims fixed")
                .iter()
                .zip(weights.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        worst = worst.max(fd_scan(dfm_flat.len(), 16, &mut rng, &|i| dfm_flat[i], &mut loss_fm));
    }
    Ok(CheckReport {
        name: "conv-backward".into(),
        instances: 3,
        observed: worst,
        threshold: 1e-4,
        higher_is_better: false,
    })
}

/// Shared multi-dilation kernel gradient vs central differences.
pub fn check_mdcb_backward(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3DCB);
    let fm = random_fm(&mut rng, 3, 8, 8);
    let kernel =
        Array4::from_shape_vec((3, 3, 3, 3), randn(&mut rng, 81)).expect("shape");
    let dilations = [1usize, 2, 3];
    let weights = random_fm(&mut rng, 9, 8, 8);
    let (dk, _) = mdcb_backward(&fm, &kernel, &dilations, &weights)?;
    let dk_flat = dk.as_slice().expect("layout").to_vec();
    let mut loss = |i: usize, off: f64| -> f64 {
        let mut k2 = kernel.clone();
        k2.as_slice_mut().expect("layout")[i] += off;
        mdcb_forward(&fm, &k2, &dilations)
            .expect("dims fixed")
            .iter()
            .zip(weights.iter())
            .map(|(a, b)| a * b)
            .sum()
    };
    let worst = fd_scan(dk_flat.len(), dk_flat.len(), &mut rng, &|i| dk_flat[i], &mut loss);
    Ok(CheckReport {
        name: "mdcb-shared-kernel".into(),
        instances: 1,
        observed: worst,
        threshold: 1e-4,
        higher_is_better: false,
    })
}

/// Gating-block backward (both gate matrices and the input) vs central
/// differences.
pub fn check_arfw_backward(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAF3);
    let fm = random_fm(&mut rng, 6, 5, 6);
    let w1 = Array2::from_shape_vec((3, 6), randn(&mut rng, 18)).expect("shape");
    let w2 = Array2::from_shape_vec((6, 3), randn(&mut rng, 18)).expect("shape");
    let weights = random_fm(&mut rng, 6, 5, 6);
    let (_, cache) = arfw_forward(&fm, &w1, &w2)?;
    let (dw1, dw2, dfm) = arfw_backward(&fm, &w1, &w2, &cache, &weights)?;
    let project = |fm: &FeatureMap, w1: &Array2<f64>, w2: &Array2<f64>| -> f64 {
        arfw_forward(fm, w1, w2)
            .expect("dims fixed")
            .0
            .iter()
            .zip(weights.iter())
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut worst = 0.0f64;
    let dw1_flat = dw1.as_slice().expect("layout").to_vec();
    let mut loss_w1 = |i: usize, off: f64| -> f64 {
        let mut p = w1.clone();
        p.as_slice_mut().expect("layout")[i] += off;
        project(&fm, &p, &w2)
    };
    worst = worst.max(fd_scan(dw1_flat.len(), dw1_flat.len(), &mut rng, &|i| dw1_flat[i], &mut loss_w1));
    let dw2_flat = dw2.as_slice().expect("layout").to_vec();
    let mut loss_w2 = |i: usize, off: f64| -> f64 {
        let mut p = w2.clone();
        p.as_slice_mut().expect("layout")[i] += off;
        project(&fm, &w1, &p)
    };
    worst = worst.max(fd_scan(dw2_flat.len(), dw2_flat.len(), &mut rng, &|i| dw2_flat[i], &mut loss_w2));
    let dfm_flat = dfm.as_slice().expect("layout").to_vec();
    let mut loss_fm = |i: usize, off: f64| -> f64 {
        let mut p = fm.clone();
        p.as_slice_mut().expect("layout")[i] += off;
        project(&p, &w1, &w2)
    };
    worst = worst.max(fd_scan(dfm_flat.len(), 24, &mut rng, &|i| dfm_flat[i], &mut loss_fm));
    Ok(CheckReport {
        name: "arfw-backward".into(),
        instances: 1,
        observed: worst,
        threshold: 1e-4,
        higher_is_better: false,
    })
}

/// Center-pool backward vs central differences. Random inputs have distinct
/// entries, so the argmax routing is stable under the FD step.
pub fn check_center_pool_backward(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCB00);
    let fm = random_fm(&mut rng, 2, 6, 6);
    let weights = random_fm(&mut rng, 2, 6, 6);
    let dfm = center_pool_backward(&fm, &weights)?;
    let dfm_flat = dfm.as_slice().expect("layout").to_vec();
    let mut loss = |i: usize, off: f64| -> f64 {
        let mut p = fm.clone();
        p.as_slice_mut().expect("layout")[i] += off;
        center_pool(&p).iter().zip(weights.iter()).map(|(a, b)| a * b).sum()
    };
    let worst = fd_scan(dfm_flat.len(), dfm_flat.len(), &mut rng, &|i| dfm_flat[i], &mut loss);
    Ok(CheckReport {
        name: "center-pool-backward".into(),
        instances: 1,
        observed: worst,
        threshold: 1e-4,
        higher_is_better: false,
    })
}

/// All per-block observation-network checks.
pub fn check_obsnet_blocks(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_conv_backward(seed)?,
        check_mdcb_backward(seed)?,
        check_arfw_backward(seed)?,
        check_center_pool_backward(seed)?,
    ])
}

/// Whole-network backward vs central differences at 10 random parameter
/// coordinates spread across the fields.
pub fn check_obsnet_end_to_end(seed: u64) -> Result<CheckReport> {
    let cfg = ObsConfig {
        frame: (12, 12),
        c_b: 4,
        dilations: vec![1, 2, 3],
        ratio: 4,
        head_channels: 4,
        out_rows: 6,
        out_cols: 5,
        use_mdcb: true,
        use_arfw: true,
        use_center_pool: true,
    };
    let params = ObsParams::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
    let image = Array2::from_shape_vec((12, 12), randn(&mut rng, 144)).expect("shape");
    let target = Array2::from_shape_vec(
        (cfg.out_rows, cfg.out_cols),
        randn(&mut rng, cfg.out_rows * cfg.out_cols),
    )
    .expect("shape");
    let loss = |p: &ObsParams| -> Result<f64> {
        let (out, _) = obsnet_forward(&cfg, p, &image)?;
        let e = &out - &target;
        Ok(0.5 * e.iter().map(|v| v * v).sum::<f64>())
    };
    let (out, cache) = obsnet_forward(&cfg, &params, &image)?;
    let delta = &out - &target;
    let grads = obsnet_backward(&cfg, &params, &cache, &delta)?;
    let analytic: Vec<Vec<f64>> = grads.flat().into_iter().map(|s| s.to_vec()).collect();
    let n_fields = analytic.len();

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for pick in 0..10 {
        let field = pick % n_fields;
        let len = analytic[field].len();
        if len == 0 {
            continue;
        }
        let i = rng.random_range(0..len);
        let orig = work.flat_mut()[field][i];
        work.flat_mut()[field][i] = orig + BLOCK_FD_STEP;
        let lp = loss(&work)?;
        work.flat_mut()[field][i] = orig - BLOCK_FD_STEP;
        let lm = loss(&work)?;
        work.flat_mut()[field][i] = orig;
        let fd = (lp - lm) / (2.0 * BLOCK_FD_STEP);
        worst = worst.max(coord_rel_err(analytic[field][i], fd));
    }
    Ok(CheckReport {
        name: "obsnet-end-to-end".into(),
        instances: 10,
        observed: worst,
        threshold: 1e-3,
        higher_is_better: false,
    })
}

/// Run the complete suite in a fixed order. Any instance-construction or
/// solver failure surfaces as an error rather than a silent skip.
pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<CheckReport>> {
    let mut out = vec![
        check_exact_dx(cfg)?,
        check_exact_dd(cfg)?,
        check_approx_cosine(cfg)?,
    ];
    out.extend(check_obsnet_blocks(cfg.seed)?);
    out.push(check_obsnet_end_to_end(cfg.seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small-count smoke run of the solver-based checks plus full block
    /// checks; the acceptance suite runs the full instance counts.
    #[test]
    fn suite_passes_on_reduced_instance_counts() {
        let cfg = GradcheckConfig {
            instances: 4,
            cosine_instances: 10,
            ..GradcheckConfig::default()
        };
        let reports = run_all(&cfg).unwrap();
        assert_eq!(reports.len(), 8);
        for r in &reports {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn report_formatting_and_pass_logic() {
        let r = CheckReport {
            name: "demo".into(),
            instances: 5,
            observed: 2e-5,
            threshold: 1e-4,
            higher_is_better: false,
        };
        assert!(r.passed());
        assert!(format!("{r}").contains("PASS"));
        let f = CheckReport { observed: 0.5, threshold: 0.9, higher_is_better: true, ..r };
        assert!(!f.passed());
        assert!(format!("{f}").contains("FAIL"));
    }

    /// The dictionary rule's off-support columns stay exactly zero while the
    /// sampled off-support FD values are tiny but nonzero — the comparison
    /// must still clear the threshold at vector level.
    #[test]
    fn off_support_bias_stays_below_threshold() {
        let cfg = GradcheckConfig { instances: 2, ..GradcheckConfig::default() };
        let report = check_exact_dd(&cfg).unwrap();
        assert!(report.passed(), "{report}");
    }

    /// Constructed fixtures are stationary points of the smoothed objective
    /// to machine precision, so warm FD solves start at the answer.
    #[test]
    fn fixtures_are_exact_stationary_points() {
        let cfg = GradcheckConfig::default();
        for idx in 0..5 {
            let fx = fixture(&cfg, idx, 1e3).unwrap();
            let grad = fx.d.t().dot(&(&fx.d.dot(&fx.a) - &fx.x))
                + fx.a.mapv(|v| cfg.lambda * v / (v * v + cfg.eps * cfg.eps).sqrt());
            let gnorm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            // Data scale is ~1e3, so 1e-10 is ~1e-13 relative.
            assert!(gnorm < 1e-10, "instance {idx}: ‖∇‖∞ = {gnorm:.3e}");
            assert_eq!(fx.split.p.len(), cfg.k);
        }
    }
}
