//! Sparse recovery of sinogram columns from compressed measurements.
//!
//! Three solvers for `min_a ½‖Da − x‖² + λ‖a‖₁`:
//!
//! * [`ista_solve`] — classic proximal gradient with step `1/L`;
//! * LISTA — a `T`-step unrolled network ([`lista_init`] starts it exactly at
//!   ISTA; [`lista_backward`] trains `W`, `S` and per-step thresholds);
//! * [`exact_solve_smoothed`] — damped Newton on the ε-smoothed objective,
//!   used as a high-precision reference when checking gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{gram_spectral_max, Cholesky};

/// Largest eigenvalue of `DᵀD` — the gradient Lipschitz constant of
/// `½‖Da − x‖²`.
pub fn lipschitz(d: ArrayView2<f64>) -> Result<f64> {
    gram_spectral_max(d, 1e-10)
}

/// `sign(v) · max(|v| − θ, 0)`.
pub fn soft_threshold(v: f64, theta: f64) -> f64 {
    if v > theta {
        v - theta
    } else if v < -theta {
        v + theta
    } else {
        0.0
    }
}

/// `iters` proximal-gradient steps from `a = 0` with step size `1/l`.
pub fn ista_solve(
    d: ArrayView2<f64>,
    x: ArrayView1<f64>,
    lambda: f64,
    iters: usize,
    l: f64,
) -> Result<Array1<f64>> {
    if x.len() != d.nrows() {
        return Err(Error::Domain(format!(
            "measurement length {} does not match D rows {}",
            x.len(),
            d.nrows()
        )));
    }
    if !(l.is_finite() && l > 0.0) {
        return Err(Error::Numeric(format!("step scale L={l} must be positive")));
    }
    let theta = lambda / l;
    let mut a = Array1::<f64>::zeros(d.ncols());
    for _ in 0..iters {
        let residual = &x.to_owned() - &d.dot(&a);
        let grad_step = d.t().dot(&residual) / l;
        a = (&a + &grad_step).mapv(|v| soft_threshold(v, theta));
    }
    Ok(a)
}

/// Learned ISTA parameters: `a_t = soft(W·x + S·a_{t−1}, θ_t)` for
/// `t = 1..=T`, starting from `a_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ListaParams {
    /// `n × m` input map, `Dᵀ/L` at init.
    pub w: Array2<f64>,
    /// `n × n` recurrence, `I − DᵀD/L` at init.
    pub s: Array2<f64>,
    /// Per-step thresholds, all `λ/L` at init.
    pub theta: Array1<f64>,
}

impl ListaParams {
    pub fn steps(&self) -> usize {
        self.theta.len()
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn m(&self) -> usize {
        self.w.ncols()
    }
}

/// Gradients for every LISTA parameter, same shapes as [`ListaParams`].
#[derive(Debug, Clone)]
pub struct ListaGrads {
    pub w: Array2<f64>,
    pub s: Array2<f64>,
    pub theta: Array1<f64>,
}

impl ListaGrads {
    pub fn zeros(p: &ListaParams) -> Self {
        ListaGrads {
            w: Array2::zeros(p.w.dim()),
            s: Array2::zeros(p.s.dim()),
            theta: Array1::zeros(p.theta.len()),
        }
    }

    pub fn scale(&mut self, f: f64) {
        self.w.mapv_inplace(|v| v * f);
        self.s.mapv_inplace(|v| v * f);
        self.theta.mapv_inplace(|v| v * f);
    }

    pub fn add(&mut self, other: &ListaGrads) {
        self.w += &other.w;
        self.s += &other.s;
        self.theta += &other.theta;
    }
}

/// Intermediates from one forward pass, consumed by [`lista_backward`].
#[derive(Debug, Clone)]
pub struct ListaCache {
    /// Input measurement vector.
    pub x: Array1<f64>,
    /// Pre-activation `W·x + S·a_{t−1}` for each step.
    pub pre: Vec<Array1<f64>>,
    /// Post-threshold state `a_t` for each step.
    pub post: Vec<Array1<f64>>,
}

/// Initialize a `t_steps`-step LISTA so its forward pass reproduces ISTA.
pub fn lista_init(d: ArrayView2<f64>, lambda: f64, t_steps: usize) -> Result<ListaParams> {
    if t_steps == 0 {
        return Err(Error::Config("LISTA needs at least one step".into()));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("lambda {lambda} must be nonnegative")));
    }
    let l = lipschitz(d)?;
    let n = d.ncols();
    let w = d.t().to_owned() / l;
    let s = Array2::<f64>::eye(n) - d.t().dot(&d) / l;
    let theta = Array1::from_elem(t_steps, lambda / l);
    Ok(ListaParams { w, s, theta })
}

/// Run LISTA and keep all intermediates for backpropagation.
pub fn lista_forward_cached(p: &ListaParams, x: ArrayView1<f64>) -> Result<(Array1<f64>, ListaCache)> {
    if x.len() != p.m() {
        return Err(Error::Domain(format!(
            "input length {} does not match W width {}",
            x.len(),
            p.m()
        )));
    }
    let b = p.w.dot(&x);
    let t_steps = p.steps();
    let mut pre = Vec::with_capacity(t_steps);
    let mut post = Vec::with_capacity(t_steps);
    let mut a = Array1::<f64>::zeros(p.n());
    for t in 0..t_steps {
        let z = if t == 0 { b.clone() } else { &b + &p.s.dot(&a) };
        let theta = p.theta[t];
        a = z.mapv(|v| soft_threshold(v, theta));
        pre.push(z);
        post.push(a.clone());
    }
    let cache = ListaCache { x: x.to_owned(), pre, post };
    Ok((a, cache))
}

/// Run LISTA, discarding intermediates.
pub fn lista_forward(p: &ListaParams, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    Ok(lista_forward_cached(p, x)?.0)
}

/// Backpropagate `grad_out = ∂loss/∂a_T` through every unrolled step.
///
/// The threshold derivative uses the almost-everywhere rule
/// `∂soft(z, θ)/∂z = 1{|z| > θ}` and `∂soft(z, θ)/∂θ = −sign(z)·1{|z| > θ}`.
/// Also returns `∂loss/∂x` for callers that need to keep propagating.
pub fn lista_backward(
    p: &ListaParams,
    cache: &ListaCache,
    grad_out: ArrayView1<f64>,
) -> Result<(ListaGrads, Array1<f64>)> {
    let t_steps = p.steps();
    if cache.pre.len() != t_steps || cache.post.len() != t_steps {
        return Err(Error::Domain("cache depth does not match parameter steps".into()));
    }
    if grad_out.len() != p.n() {
        return Err(Error::Domain(format!(
            "gradient length {} does not match state size {}",
            grad_out.len(),
            p.n()
        )));
    }
    let mut grads = ListaGrads::zeros(p);
    let mut grad_x = Array1::<f64>::zeros(p.m());
    let mut g = grad_out.to_owned();
    for t in (0..t_steps).rev() {
        let z = &cache.pre[t];
        let theta = p.theta[t];
        let mut d_pre = Array1::<f64>::zeros(p.n());
        let mut d_theta = 0.0;
        for i in 0..p.n() {
            if z[i].abs() > theta {
                d_pre[i] = g[i];
                d_theta -= g[i] * z[i].signum();
            }
        }
        grads.theta[t] += d_theta;
        // z_t = W·x + S·a_{t−1}
        for i in 0..p.n() {
            if d_pre[i] == 0.0 {
                continue;
            }
            for (j, &xv) in cache.x.iter().enumerate() {
                grads.w[(i, j)] += d_pre[i] * xv;
            }
        }
        grad_x += &p.w.t().dot(&d_pre);
        if t > 0 {
            let prev = &cache.post[t - 1];
            for i in 0..p.n() {
                if d_pre[i] == 0.0 {
                    continue;
                }
                for (j, &av) in prev.iter().enumerate() {
                    grads.s[(i, j)] += d_pre[i] * av;
                }
            }
            g = p.s.t().dot(&d_pre);
        }
    }
    Ok((grads, grad_x))
}

/// One gradient step on LISTA parameters; thresholds clamp at zero.
pub fn lista_apply_grads(p: &mut ListaParams, grads: &ListaGrads, lr: f64) {
    p.w.scaled_add(-lr, &grads.w);
    p.s.scaled_add(-lr, &grads.s);
    p.theta.scaled_add(-lr, &grads.theta);
    p.theta.mapv_inplace(|v| v.max(0.0));
}

/// A synthetic sparse-coding instance: measurements plus a reference code.
#[derive(Debug, Clone)]
pub struct SparseProblem {
    pub x: Array1<f64>,
    pub a_ref: Array1<f64>,
}

/// Sample `count` `k`-sparse problems for a fixed dictionary. Reference codes
/// come from running ISTA to near-convergence (`ref_iters` steps).
pub fn synth_sparse_problems(
    d: ArrayView2<f64>,
    k: usize,
    count: usize,
    lambda: f64,
    ref_iters: usize,
    seed: u64,
) -> Result<Vec<SparseProblem>> {
    let n = d.ncols();
    if k == 0 || k > n {
        return Err(Error::Config(format!("sparsity k={k} outside [1, {n}]")));
    }
    let l = lipschitz(d)?;
    let supports: Vec<(Vec<usize>, Vec<f64>)> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut idx: Vec<usize> = Vec::with_capacity(k);
                while idx.len() < k {
                    let cand = rng.random_range(0..n);
                    if !idx.contains(&cand) {
                        idx.push(cand);
                    }
                }
                let coeffs = (0..k)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z + z.signum() * 0.5
                    })
                    .collect();
                (idx, coeffs)
            })
            .collect()
    };
    let problems = exec::map_slice(&supports, |(idx, coeffs)| {
        let mut a = Array1::<f64>::zeros(n);
        for (&i, &c) in idx.iter().zip(coeffs) {
            a[i] = c;
        }
        let x = d.dot(&a);
        let a_ref = ista_solve(d, x.view(), lambda, ref_iters, l).expect("checked dims");
        SparseProblem { x, a_ref }
    });
    Ok(problems)
}

/// One full-batch gradient step regressing LISTA outputs onto reference
/// codes; returns the mean squared error before the step.
pub fn lista_train_step(p: &mut ListaParams, batch: &[SparseProblem], lr: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let per: Vec<(f64, ListaGrads)> = exec::map_slice(batch, |prob| {
        let (a, cache) = lista_forward_cached(p, prob.x.view()).expect("checked dims");
        let err = &a - &prob.a_ref;
        let loss = 0.5 * err.iter().map(|v| v * v).sum::<f64>();
        let (grads, _) = lista_backward(p, &cache, err.view()).expect("checked dims");
        (loss, grads)
    });
    let mut total = ListaGrads::zeros(p);
    let mut loss_sum = 0.0;
    for (loss, g) in &per {
        loss_sum += loss;
        total.add(g);
    }
    total.scale(1.0 / batch.len() as f64);
    lista_apply_grads(p, &total, lr);
    Ok(loss_sum / batch.len() as f64)
}

/// Minimize `½‖Da − x‖² + λ·Σ√(a_i² + ε²)` by damped Newton from `a = 0`.
///
/// Cold starts use continuation on the smoothing width: ε starts at the
/// data scale `‖Dᵀx‖∞/λ` and shrinks 100× per stage, each stage warm-started
/// from the previous one. Plain Newton from zero crawls when the coefficient
/// scale dwarfs ε (the Hessian is near-singular off the support); each
/// continuation stage stays strongly convex and takes a handful of steps.
pub fn exact_solve_smoothed(
    d: ArrayView2<f64>,
    x: ArrayView1<f64>,
    lambda: f64,
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Array1<f64>> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Config(format!("smoothing eps {eps} must be positive")));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::Config(format!("penalty weight {lambda} must be positive")));
    }
    let mut a = Array1::<f64>::zeros(d.ncols());
    let dtx = d.t().dot(&x);
    let scale = dtx.iter().fold(0.0f64, |m, v| m.max(v.abs())) / lambda;
    let mut eps_k = scale;
    let stage_tol = tol.max(1e-2 * lambda);
    while eps_k > eps {
        a = exact_solve_smoothed_from(d, x, lambda, eps_k, a, stage_tol, max_iter)?;
        eps_k = (eps_k / 100.0).max(eps);
    }
    exact_solve_smoothed_from(d, x, lambda, eps, a, tol, max_iter)
}

/// [`exact_solve_smoothed`] warm-started at `a0` — the cheap path when
/// solving a cluster of nearby problems.
pub fn exact_solve_smoothed_from(
    d: ArrayView2<f64>,
    x: ArrayView1<f64>,
    lambda: f64,
    eps: f64,
    a0: Array1<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<Array1<f64>> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Config(format!("smoothing eps {eps} must be positive")));
    }
    if x.len() != d.nrows() || a0.len() != d.ncols() {
        return Err(Error::Domain("solver dimensions do not match D".into()));
    }
    let n = d.ncols();
    let gram = d.t().dot(&d);
    let dtx = d.t().dot(&x);

    let objective = |a: &Array1<f64>| -> f64 {
        let r = &d.dot(a) - &x.to_owned();
        0.5 * r.iter().map(|v| v * v).sum::<f64>()
            + lambda * a.iter().map(|v| (v * v + eps * eps).sqrt()).sum::<f64>()
    };

    let mut a = a0;
    for _ in 0..max_iter {
        let grad = &gram.dot(&a) - &dtx
            + &a.mapv(|v| lambda * v / (v * v + eps * eps).sqrt());
        let gnorm = grad.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if gnorm <= tol {
            return Ok(a);
        }
        let mut h = gram.clone();
        for i in 0..n {
            let s2 = a[i] * a[i] + eps * eps;
            h[(i, i)] += lambda * eps * eps / (s2 * s2.sqrt());
        }
        let chol = Cholesky::new(&h)?;
        let step = chol.solve(grad.view());
        let f0 = objective(&a);
        let slope: f64 = grad.iter().zip(step.iter()).map(|(g, p)| g * p).sum();
        // Near the optimum the true per-step decrease drops below the f64
        // rounding noise of the objective itself; Armijo can no longer see
        // descent there, so take the undamped Newton step (locally
        // quadratically convergent) instead of line-searching noise.
        let obj_noise = 8.0 * f64::EPSILON * f0.abs() + f64::MIN_POSITIVE;
        if 1e-4 * slope <= obj_noise {
            a = &a - &step;
            continue;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &a - &(&step * t);
            if objective(&trial) <= f0 - 1e-4 * t * slope {
                a = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::Numeric(
                "line search stalled in smoothed solver".into(),
            ));
        }
    }
    Err(Error::Numeric(format!(
        "smoothed solver did not reach tol {tol} in {max_iter} iterations"
    )))
}
