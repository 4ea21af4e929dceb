//! Backpropagation through the sparse reconstruction layer.
//!
//! The recovered code `â` is (in the limit) a minimizer of
//! `½‖Da − x‖² + λ‖a‖₁`, so gradients with respect to the layer's inputs
//! follow from implicit differentiation restricted to the support of `â`.
//! Two rule sets are provided: the exact ones, which invert the support
//! Gram block `DᵀD(p,p)`, and cheap approximations that replace that inverse
//! with the identity. Off-support columns of `δD` are exactly zero in both.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;

/// Partition of code indices into support `p` (`|a_i| > tol`) and rest `q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSplit {
    pub p: Vec<usize>,
    pub q: Vec<usize>,
}

impl SupportSplit {
    pub fn len(&self) -> usize {
        self.p.len() + self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Split indices by `|a_i| > tol`. Thresholded solver outputs contain exact
/// zeros, so `tol = 0` is meaningful; smoothed solutions need a small
/// positive tol to shed their near-zero tails.
pub fn support_set(a: ArrayView1<f64>, tol: f64) -> Result<SupportSplit> {
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(Error::Config(format!("support tol {tol} must be ≥ 0")));
    }
    let mut p = Vec::new();
    let mut q = Vec::new();
    for (i, &v) in a.iter().enumerate() {
        if v.abs() > tol {
            p.push(i);
        } else {
            q.push(i);
        }
    }
    Ok(SupportSplit { p, q })
}

/// Gradient and diagonal Hessian of `f(a) = Σ_i sqrt(a_i² + ε²)`, the smooth
/// stand-in for `‖a‖₁`.
pub fn smoothed_l1_grad_hess(
    a: ArrayView1<f64>,
    epsilon: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon {epsilon} must be positive")));
    }
    let grad = a.mapv(|v| v / (v * v + epsilon * epsilon).sqrt());
    let hess = a.mapv(|v| {
        let s2 = v * v + epsilon * epsilon;
        1.0 / s2.sqrt() - v * v / (s2 * s2.sqrt())
    });
    Ok((grad, hess))
}

/// `m × |p|` matrix of the support columns of `D`.
fn gather_columns(d: ArrayView2<f64>, p: &[usize]) -> Array2<f64> {
    let m = d.nrows();
    let mut out = Array2::<f64>::zeros((m, p.len()));
    for (j, &col) in p.iter().enumerate() {
        out.column_mut(j).assign(&d.column(col));
    }
    out
}

fn check_dims(
    d: ArrayView2<f64>,
    a: ArrayView1<f64>,
    delta_a: ArrayView1<f64>,
    split: &SupportSplit,
) -> Result<()> {
    let n = d.ncols();
    if a.len() != n || delta_a.len() != n {
        return Err(Error::Domain(format!(
            "code length {} / gradient length {} do not match D columns {n}",
            a.len(),
            delta_a.len()
        )));
    }
    if split.len() != n {
        return Err(Error::Domain(format!(
            "support split covers {} indices, D has {n} columns",
            split.len()
        )));
    }
    if let Some(&i) = split.p.iter().chain(&split.q).find(|&&i| i >= n) {
        return Err(Error::Domain(format!("support index {i} out of range")));
    }
    Ok(())
}

const COND_LIMIT: f64 = 1e12;

/// Factor the support Gram block `DᵀD(p,p)`. If the plain factorization is
/// too ill-conditioned, retries once with ridge `1e-10·trace/|p|`; a block
/// that stays beyond the condition limit is reported as a singular support
/// so callers can fall back to the approximate rules.
fn factor_support_gram(d: ArrayView2<f64>, p: &[usize]) -> Result<(Array2<f64>, Cholesky)> {
    if p.len() > d.nrows() {
        return Err(Error::SingularSupport(format!(
            "support size {} exceeds measurement count {}",
            p.len(),
            d.nrows()
        )));
    }
    let d_p = gather_columns(d, p);
    let gram = d_p.t().dot(&d_p);
    let trace: f64 = gram.diag().sum();

    let attempt = |g: &Array2<f64>| -> Option<(Cholesky, f64)> {
        let chol = Cholesky::new(g).ok()?;
        let cond = chol.condition_estimate(g);
        Some((chol, cond))
    };

    if let Some((chol, cond)) = attempt(&gram) {
        if cond <= COND_LIMIT {
            return Ok((d_p, chol));
        }
    }
    let ridge = 1e-10 * trace / p.len() as f64;
    let mut ridged = gram;
    for i in 0..p.len() {
        ridged[(i, i)] += ridge;
    }
    match attempt(&ridged) {
        Some((chol, cond)) if cond <= COND_LIMIT => Ok((d_p, chol)),
        _ => Err(Error::SingularSupport(format!(
            "support Gram block of size {} is numerically singular",
            p.len()
        ))),
    }
}

/// Exact gradient transfer onto the measurement vector:
/// `δx = D(:,p)·[DᵀD(p,p)]⁻¹·δa(p)`.
pub fn backprop_exact_dx(
    d: ArrayView2<f64>,
    a: ArrayView1<f64>,
    delta_a: ArrayView1<f64>,
    split: &SupportSplit,
) -> Result<Array1<f64>> {
    check_dims(d, a, delta_a, split)?;
    if split.p.is_empty() {
        return Ok(Array1::zeros(d.nrows()));
    }
    let (d_p, chol) = factor_support_gram(d, &split.p)?;
    let da_p = Array1::from_iter(split.p.iter().map(|&i| delta_a[i]));
    let u = chol.solve(da_p.view());
    Ok(d_p.dot(&u))
}

/// Exact gradient transfer onto the dictionary. Support columns get
/// `(x − Da)·u ᵀ − (D(:,p)·u)·a(p)ᵀ` with `u = [DᵀD(p,p)]⁻¹·δa(p)`; all
/// other columns are exactly zero.
pub fn backprop_exact_dd(
    d: ArrayView2<f64>,
    a: ArrayView1<f64>,
    x: ArrayView1<f64>,
    delta_a: ArrayView1<f64>,
    split: &SupportSplit,
) -> Result<Array2<f64>> {
    check_dims(d, a, delta_a, split)?;
    let (m, n) = d.dim();
    if x.len() != m {
        return Err(Error::Domain(format!(
            "measurement length {} does not match D rows {m}",
            x.len()
        )));
    }
    let mut out = Array2::<f64>::zeros((m, n));
    if split.p.is_empty() {
        return Ok(out);
    }
    let (d_p, chol) = factor_support_gram(d, &split.p)?;
    let da_p = Array1::from_iter(split.p.iter().map(|&i| delta_a[i]));
    let u = chol.solve(da_p.view());
    let residual = &x.to_owned() - &d.dot(&a);
    let v = d_p.dot(&u);
    for (j, &col) in split.p.iter().enumerate() {
        let mut target = out.column_mut(col);
        for i in 0..m {
            target[i] = residual[i] * u[j] - v[i] * a[col];
        }
    }
    Ok(out)
}

/// Batch-stable approximation of both rules: the support Gram inverse is
/// replaced by the identity, so no factorization is needed.
/// `δx̂ = D(:,p)·δâ(p)`; `δD(:,p) = (x̂ − Dâ)·δâ(p)ᵀ − δx̂·â(p)ᵀ`; `δD(:,q) = 0`.
pub fn backprop_approx(
    d: ArrayView2<f64>,
    a_hat: ArrayView1<f64>,
    x_hat: ArrayView1<f64>,
    delta_a: ArrayView1<f64>,
    split: &SupportSplit,
) -> Result<(Array1<f64>, Array2<f64>)> {
    check_dims(d, a_hat, delta_a, split)?;
    let (m, n) = d.dim();
    if x_hat.len() != m {
        return Err(Error::Domain(format!(
            "measurement length {} does not match D rows {m}",
            x_hat.len()
        )));
    }
    let mut delta_d = Array2::<f64>::zeros((m, n));
    if split.p.is_empty() {
        return Ok((Array1::zeros(m), delta_d));
    }
    let d_p = gather_columns(d, &split.p);
    let u = Array1::from_iter(split.p.iter().map(|&i| delta_a[i]));
    let delta_x = d_p.dot(&u);
    let residual = &x_hat.to_owned() - &d.dot(&a_hat);
    for (j, &col) in split.p.iter().enumerate() {
        let mut target = delta_d.column_mut(col);
        for i in 0..m {
            target[i] = residual[i] * u[j] - delta_x[i] * a_hat[col];
        }
    }
    Ok((delta_x, delta_d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::make_sensing_matrix;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn support_set_examples() {
        let z = Array1::<f64>::zeros(4);
        let s = support_set(z.view(), 0.0).unwrap();
        assert!(s.p.is_empty());
        assert_eq!(s.q, vec![0, 1, 2, 3]);

        let a = array![0.0, 3.0, 0.0, -2.0];
        let s = support_set(a.view(), 1e-6).unwrap();
        assert_eq!(s.p, vec![1, 3]);
        assert_eq!(s.q, vec![0, 2]);

        assert!(support_set(a.view(), -1.0).is_err());
    }

    #[test]
    fn smoothed_l1_closed_forms() {
        let eps = 1e-3;
        let a = array![0.0, 5.0, -5.0];
        let (g, h) = smoothed_l1_grad_hess(a.view(), eps).unwrap();
        assert_eq!(g[0], 0.0);
        assert!((h[0] - 1.0 / eps).abs() < 1e-9);
        assert!((g[1] - 1.0).abs() < 1e-6 && (g[2] + 1.0).abs() < 1e-6);
        assert!(h[1] < 1e-8 && h[2] < 1e-8);
        // The quoted two-term Hessian equals its compact form ε²/(a²+ε²)^{3/2}.
        for (&ai, &hi) in a.iter().zip(h.iter()) {
            let s2 = ai * ai + eps * eps;
            let compact = eps * eps / (s2 * s2.sqrt());
            assert!((hi - compact).abs() <= 1e-15 * compact.max(1.0));
        }
    }

    #[test]
    fn smoothed_l1_matches_finite_differences() {
        // Sampled at |a| ≲ 30ε: beyond that the Hessian decays like ε²/|a|³
        // and central differences of the O(1) gradient are pure cancellation
        // noise — no step size verifies a 1e-6 relative tolerance there.
        let eps = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut a = Array1::from_shape_fn(12, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            10.0 * eps * z
        });
        a[0] = 5e-4; // stress the high-curvature region near ±ε
        a[1] = -2e-3;
        a[2] = 0.0;
        let f = |a: &Array1<f64>| -> f64 {
            a.iter().map(|v| (v * v + eps * eps).sqrt()).sum()
        };
        let (g, hd) = smoothed_l1_grad_hess(a.view(), eps).unwrap();
        let h = 1e-7;
        for i in 0..a.len() {
            let mut ap = a.clone();
            ap[i] += h;
            let mut am = a.clone();
            am[i] -= h;
            let fd_g = (f(&ap) - f(&am)) / (2.0 * h);
            let rel = (g[i] - fd_g).abs() / g[i].abs().max(fd_g.abs()).max(1e-9);
            assert!(rel < 1e-6, "grad[{i}]: {} vs {fd_g}", g[i]);

            let (gp, _) = smoothed_l1_grad_hess(ap.view(), eps).unwrap();
            let (gm, _) = smoothed_l1_grad_hess(am.view(), eps).unwrap();
            let fd_h = (gp[i] - gm[i]) / (2.0 * h);
            let rel = (hd[i] - fd_h).abs() / hd[i].abs().max(fd_h.abs()).max(1e-9);
            assert!(rel < 1e-6, "hess[{i}]: {} vs {fd_h}", hd[i]);
        }
    }

    fn random_instance(seed: u64) -> (Array2<f64>, Array1<f64>, Array1<f64>, SupportSplit) {
        let s = make_sensing_matrix(20, 50, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let mut a = Array1::<f64>::zeros(50);
        for &i in &[4usize, 11, 23, 42] {
            let z: f64 = StandardNormal.sample(&mut rng);
            a[i] = z + z.signum();
        }
        let delta_a = Array1::from_shape_fn(50, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let split = support_set(a.view(), 0.0).unwrap();
        (s.d, a, delta_a, split)
    }

    #[test]
    fn zero_gradient_maps_to_zero() {
        let (d, a, _, split) = random_instance(3);
        let zero = Array1::<f64>::zeros(50);
        let dx = backprop_exact_dx(d.view(), a.view(), zero.view(), &split).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        let x = d.dot(&a);
        let dd = backprop_exact_dd(d.view(), a.view(), x.view(), zero.view(), &split).unwrap();
        assert!(dd.iter().all(|&v| v == 0.0));
        let (ax, ad) = backprop_approx(d.view(), a.view(), x.view(), zero.view(), &split).unwrap();
        assert!(ax.iter().all(|&v| v == 0.0) && ad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn off_support_columns_are_exactly_zero() {
        for seed in 0..10u64 {
            let (d, a, da, split) = random_instance(seed);
            let x = d.dot(&a) + 0.3;
            let dd = backprop_exact_dd(d.view(), a.view(), x.view(), da.view(), &split).unwrap();
            let (_, add) = backprop_approx(d.view(), a.view(), x.view(), da.view(), &split).unwrap();
            for &col in &split.q {
                assert!(dd.column(col).iter().all(|&v| v == 0.0));
                assert!(add.column(col).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_residual_kills_first_term() {
        let (d, a, da, split) = random_instance(17);
        let x = d.dot(&a); // perfect reconstruction
        let dd = backprop_exact_dd(d.view(), a.view(), x.view(), da.view(), &split).unwrap();
        // remaining term: −D(:,p)·u·a(p)ᵀ
        let (d_p, chol) = factor_support_gram(d.view(), &split.p).unwrap();
        let da_p = Array1::from_iter(split.p.iter().map(|&i| da[i]));
        let v = d_p.dot(&chol.solve(da_p.view()));
        for (j, &col) in split.p.iter().enumerate() {
            let _ = j;
            for i in 0..20 {
                let expect = -v[i] * a[col];
                assert!((dd[(i, col)] - expect).abs() < 1e-10);
            }
        }
    }

    /// D whose support columns are orthonormal (standard basis vectors), so
    /// the support Gram block is exactly the identity.
    fn orthonormal_support_instance() -> (Array2<f64>, Array1<f64>, Array1<f64>, Array1<f64>, SupportSplit) {
        let s = make_sensing_matrix(20, 50, 99).unwrap();
        let mut d = s.d;
        let support = [4usize, 11, 23, 42];
        for (row, &col) in support.iter().enumerate() {
            let mut c = d.column_mut(col);
            c.fill(0.0);
            c[row] = 1.0;
        }
        let mut a = Array1::<f64>::zeros(50);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for &i in &support {
            let z: f64 = StandardNormal.sample(&mut rng);
            a[i] = z + z.signum() * 0.5;
        }
        let x = Array1::from_shape_fn(20, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let da = Array1::from_shape_fn(50, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let split = support_set(a.view(), 0.0).unwrap();
        (d, a, x, da, split)
    }

    #[test]
    fn approx_equals_exact_bitwise_on_orthonormal_support() {
        let (d, a, x, da, split) = orthonormal_support_instance();
        let ex = backprop_exact_dx(d.view(), a.view(), da.view(), &split).unwrap();
        let ed = backprop_exact_dd(d.view(), a.view(), x.view(), da.view(), &split).unwrap();
        let (ax, ad) = backprop_approx(d.view(), a.view(), x.view(), da.view(), &split).unwrap();
        assert_eq!(ex, ax, "δx must be bit-identical");
        assert_eq!(ed, ad, "δD must be bit-identical");
    }

    #[test]
    fn oversized_support_is_rejected() {
        let s = make_sensing_matrix(5, 20, 1).unwrap();
        let a = Array1::from_elem(20, 1.0); // support size 20 > m = 5
        let da = Array1::from_elem(20, 1.0);
        let split = support_set(a.view(), 0.0).unwrap();
        let err = backprop_exact_dx(s.d.view(), a.view(), da.view(), &split).unwrap_err();
        assert!(matches!(err, Error::SingularSupport(_)));
    }

    #[test]
    fn duplicate_column_support_is_rescued_by_ridge() {
        let s = make_sensing_matrix(20, 50, 55).unwrap();
        let mut d = s.d;
        let dup = d.column(4).to_owned();
        d.column_mut(11).assign(&dup); // exact repeat → singular Gram block
        let mut a = Array1::<f64>::zeros(50);
        a[4] = 1.0;
        a[11] = 1.0;
        let da = Array1::from_elem(50, 1.0);
        let split = support_set(a.view(), 0.0).unwrap();
        // The plain block is singular; the ridge retry keeps the rule total.
        let dx = backprop_exact_dx(d.view(), a.view(), da.view(), &split).unwrap();
        assert!(dx.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn exact_dx_is_linear_in_delta_a() {
        let (d, a, da1, split) = random_instance(23);
        let (_, _, da2, _) = random_instance(29);
        let dx1 = backprop_exact_dx(d.view(), a.view(), da1.view(), &split).unwrap();
        let dx2 = backprop_exact_dx(d.view(), a.view(), da2.view(), &split).unwrap();
        let combo = &da1 + &(&da2 * 2.0);
        let dx = backprop_exact_dx(d.view(), a.view(), combo.view(), &split).unwrap();
        for i in 0..20 {
            let expect = dx1[i] + 2.0 * dx2[i];
            assert!((dx[i] - expect).abs() < 1e-10 * expect.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn support_partitions_all_indices(values in proptest::collection::vec(-10.0f64..10.0, 1..40), tol in 0.0f64..1.0) {
            let a = Array1::from_vec(values);
            let s = support_set(a.view(), tol).unwrap();
            prop_assert_eq!(s.len(), a.len());
            let mut seen = vec![false; a.len()];
            for &i in s.p.iter().chain(&s.q) {
                prop_assert!(!seen[i], "index {} appears twice", i);
                seen[i] = true;
            }
            let mut sorted = s.p.clone();
            sorted.sort_unstable();
            prop_assert_eq!(&sorted, &s.p, "p must be ascending");
            for &i in &s.p { prop_assert!(a[i].abs() > tol); }
            for &i in &s.q { prop_assert!(a[i].abs() <= tol); }
        }

        #[test]
        fn smoothed_hessian_is_positive(values in proptest::collection::vec(-100.0f64..100.0, 1..20), eps in 1e-6f64..1.0) {
            let a = Array1::from_vec(values);
            let (g, h) = smoothed_l1_grad_hess(a.view(), eps).unwrap();
            for &gi in &g { prop_assert!(gi.abs() < 1.0 + 1e-12); }
            for &hi in &h { prop_assert!(hi > 0.0); }
        }
    }
}
