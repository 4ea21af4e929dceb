//! End-to-end training. The observation network regresses each scene's
//! compressed code `x̂`; unrolled recovery layers reconstruct the sinogram
//! `â` column by column; the joint loss `½‖x̂ − x‖² + α‖â − a‖₁` trains all
//! three parameter groups — network weights, recovery-layer weights, and the
//! dictionary — in one backward pass.
//!
//! Two backward routes exist through the reconstruction layer. The default
//! route pairs the unrolled recovery forward with the batch-stable
//! approximate transfer rules for `δx̂`/`δD` and the unrolled pass for the
//! layer weights. The oracle route replaces the forward with a
//! high-precision smoothed solve and uses the exact support-based rules; it
//! is slower but finite-difference faithful, which is what the gradient
//! acceptance tests exercise.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::io::{read_container, write_container, NamedSection};
use crate::obsnet::{obsnet_backward, obsnet_forward, ObsConfig, ObsGrads, ObsParams};
use crate::radon::{
    default_angles, detector_bins, extract_peaks, extract_peaks_counted, fbp_inverse, PointSet,
    Sinogram,
};
use crate::recon_grad::{backprop_approx, backprop_exact_dd, backprop_exact_dx, support_set};
use crate::recovery::{
    exact_solve_smoothed, lista_backward, lista_forward_cached, lista_init, ListaGrads,
    ListaParams,
};
use crate::scene::{derive_seed, Scene};
use crate::sensing::SensingMatrix;

/// Smoothing width for oracle-mode reconstruction solves.
const ORACLE_EPS: f64 = 1e-6;
/// Gradient tolerance for oracle-mode solves.
const ORACLE_TOL: f64 = 1e-10;
/// Newton iteration budget per oracle-mode solve.
const ORACLE_ITERS: usize = 400;
/// Oracle-mode support cut, relative to the largest coefficient: smoothed
/// solutions carry `O(ε)` tails that must not count as support.
const ORACLE_SUPPORT_REL: f64 = 1e-3;

/// Scalar hyperparameters stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Sparsity weight of the recovery problem; sets the initial layer
    /// thresholds and the oracle solves.
    pub lambda: f64,
    /// Weight of the sinogram L1 term in the joint loss.
    pub alpha: f64,
    /// Unrolled recovery depth.
    pub t_steps: usize,
}

/// The complete trainable model plus its immutable geometry. Projection
/// angles are the uniform default for `obs_cfg.out_cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub obs_cfg: ObsConfig,
    pub obs: ObsParams,
    pub lista: ListaParams,
    pub sensing: SensingMatrix,
    pub hyper: Hyper,
}

impl ModelParams {
    /// Fresh model: seeded network init, recovery layers tied to the
    /// dictionary. Validates that network output, sensing dims, and frame
    /// geometry agree.
    pub fn init(obs_cfg: ObsConfig, sensing: SensingMatrix, hyper: Hyper, seed: u64) -> Result<Self> {
        let obs = ObsParams::init(&obs_cfg, seed)?;
        let lista = lista_init(sensing.d.view(), hyper.lambda, hyper.t_steps)?;
        let model = ModelParams { obs_cfg, obs, lista, sensing, hyper };
        model.validate()?;
        Ok(model)
    }

    /// Dimensional consistency across all groups.
    pub fn validate(&self) -> Result<()> {
        self.obs_cfg.validate()?;
        let (m, n) = (self.sensing.m(), self.sensing.n());
        if self.obs_cfg.out_rows != m {
            return Err(Error::Config(format!(
                "network emits {} code rows but sensing has {m} measurements",
                self.obs_cfg.out_rows
            )));
        }
        let bins = detector_bins(self.obs_cfg.frame);
        if n != bins {
            return Err(Error::Config(format!(
                "sensing width {n} does not match the {bins} detector bins of frame {:?}",
                self.obs_cfg.frame
            )));
        }
        if self.lista.n() != n || self.lista.m() != m {
            return Err(Error::Config(format!(
                "recovery layers are {}×{}, sensing is {m}×{n}",
                self.lista.n(),
                self.lista.m()
            )));
        }
        if self.lista.steps() != self.hyper.t_steps {
            return Err(Error::Config(format!(
                "recovery depth {} does not match hyperparameter {}",
                self.lista.steps(),
                self.hyper.t_steps
            )));
        }
        if !(self.hyper.lambda > 0.0) || !(self.hyper.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "need lambda > 0 and alpha ≥ 0, got {} and {}",
                self.hyper.lambda, self.hyper.alpha
            )));
        }
        Ok(())
    }

    /// Projection angles implied by the output geometry.
    pub fn angles(&self) -> Vec<f64> {
        default_angles(self.obs_cfg.out_cols)
    }
}

/// Joint loss value, its components, and the output gradients.
/// `total = l2 + alpha·l1` exactly; `l1` is the raw `Σ|â − a|`.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub total: f64,
    pub l2: f64,
    pub l1: f64,
    /// `∂loss/∂x̂ = x̂ − x`.
    pub dx_hat: Array2<f64>,
    /// `∂loss/∂â = α·sign(â − a)`, zero at ties.
    pub da_hat: Array2<f64>,
}

/// `½‖x̂ − x‖² + α‖â − a‖₁` over all entries, with its output gradients.
pub fn joint_loss(
    x_hat: &Array2<f64>,
    x: &Array2<f64>,
    a_hat: &Array2<f64>,
    a: &Array2<f64>,
    alpha: f64,
) -> Result<JointLoss> {
    if x_hat.dim() != x.dim() || a_hat.dim() != a.dim() {
        return Err(Error::Domain(format!(
            "loss shapes disagree: x̂ {:?} vs x {:?}, â {:?} vs a {:?}",
            x_hat.dim(),
            x.dim(),
            a_hat.dim(),
            a.dim()
        )));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Config(format!("loss weight alpha {alpha} must be ≥ 0")));
    }
    let dx_hat = x_hat - x;
    let l2 = 0.5 * dx_hat.iter().map(|v| v * v).sum::<f64>();
    let diff = a_hat - a;
    let l1 = diff.iter().map(|v| v.abs()).sum::<f64>();
    let da_hat = diff.mapv(|v| if v == 0.0 { 0.0 } else { alpha * v.signum() });
    Ok(JointLoss { total: l2 + alpha * l1, l2, l1, dx_hat, da_hat })
}

/// Which reconstruction forward/backward pair a step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconMode {
    /// Unrolled layers forward, approximate transfer rules backward
    /// (training default).
    Lista,
    /// High-precision smoothed solve forward, exact support-based rules
    /// backward; recovery-layer weights receive no gradient.
    Oracle,
}

/// Per-step policy knobs.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub mode: ReconMode,
    /// Keep the dictionary fixed while still training everything else.
    pub freeze_d: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { mode: ReconMode::Lista, freeze_d: false }
    }
}

/// Gradients for every parameter group, shaped like the model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub obs: ObsGrads,
    pub lista: ListaGrads,
    pub d: Array2<f64>,
}

impl ModelGrads {
    pub fn zeros(model: &ModelParams) -> Self {
        ModelGrads {
            obs: ObsParams::zeros_like(&model.obs),
            lista: ListaGrads::zeros(&model.lista),
            d: Array2::zeros(model.sensing.d.dim()),
        }
    }

    pub fn add(&mut self, other: &ModelGrads) {
        self.obs.add_scaled(&other.obs, 1.0);
        self.lista.add(&other.lista);
        self.d += &other.d;
    }

    pub fn scale(&mut self, f: f64) {
        self.obs.scale(f);
        self.lista.scale(f);
        self.d.mapv_inplace(|v| v * f);
    }

    /// Euclidean norms per group `(obs, lista, d)`.
    pub fn norms(&self) -> (f64, f64, f64) {
        let obs = self.obs.group_norms_sq().iter().sum::<f64>().sqrt();
        let lista = (self.lista.w.iter().map(|v| v * v).sum::<f64>()
            + self.lista.s.iter().map(|v| v * v).sum::<f64>()
            + self.lista.theta.iter().map(|v| v * v).sum::<f64>())
        .sqrt();
        let d = self.d.iter().map(|v| v * v).sum::<f64>().sqrt();
        (obs, lista, d)
    }
}

/// Loss components and gradient norms reported for one step (batch means).
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub total: f64,
    pub l2: f64,
    pub l1: f64,
    pub grad_obs: f64,
    pub grad_lista: f64,
    pub grad_d: f64,
}

struct SampleOutcome {
    grads: ModelGrads,
    total: f64,
    l2: f64,
    l1: f64,
}

/// Forward + backward for one scene. `δx̂` sums the direct L2 term and the
/// L1 term transferred through the reconstruction layer; `δD` comes from the
/// transfer rules; recovery-layer weights get the unrolled pass.
fn sample_grads(model: &ModelParams, scene: &Scene, options: &TrainOptions) -> Result<SampleOutcome> {
    let (x_hat, obs_cache) = obsnet_forward(&model.obs_cfg, &model.obs, &scene.image)?;
    let (m, r) = x_hat.dim();
    let n = model.sensing.n();
    let d = model.sensing.d.view();

    let mut a_hat = Array2::<f64>::zeros((n, r));
    let mut caches = Vec::with_capacity(r);
    for j in 0..r {
        let col = x_hat.column(j);
        match options.mode {
            ReconMode::Lista => {
                let (a, cache) = lista_forward_cached(&model.lista, col)?;
                a_hat.column_mut(j).assign(&a);
                caches.push(Some(cache));
            }
            ReconMode::Oracle => {
                let a = exact_solve_smoothed(
                    d,
                    col,
                    model.hyper.lambda,
                    ORACLE_EPS,
                    ORACLE_TOL,
                    ORACLE_ITERS,
                )?;
                a_hat.column_mut(j).assign(&a);
                caches.push(None);
            }
        }
    }

    let jl = joint_loss(&x_hat, &scene.code, &a_hat, &scene.sinogram.values, model.hyper.alpha)?;
    if !jl.total.is_finite() {
        let max_xhat = x_hat.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let max_ahat = a_hat.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        return Err(Error::Numeric(format!(
            "non-finite loss (l2 {:.3e}, l1 {:.3e}, max|x̂| {max_xhat:.3e}, max|â| {max_ahat:.3e})",
            jl.l2, jl.l1
        )));
    }

    let mut delta_x = jl.dx_hat.clone();
    let mut d_grad = Array2::<f64>::zeros((m, n));
    let mut lista_grads = ListaGrads::zeros(&model.lista);
    for j in 0..r {
        let da_j = jl.da_hat.column(j);
        if da_j.iter().all(|&v| v == 0.0) {
            continue;
        }
        let a_j = a_hat.column(j);
        let x_j = x_hat.column(j);
        match options.mode {
            ReconMode::Lista => {
                // Thresholded outputs hold exact zeros, so the support cut
                // is exact at tol 0.
                let split = support_set(a_j, 0.0)?;
                let (dx_l1, dd_j) = backprop_approx(d, a_j, x_j, da_j, &split)?;
                delta_x.column_mut(j).scaled_add(1.0, &dx_l1);
                d_grad += &dd_j;
                let cache = caches[j].as_ref().expect("lista mode caches every column");
                let (lg, _) = lista_backward(&model.lista, cache, da_j)?;
                lista_grads.add(&lg);
            }
            ReconMode::Oracle => {
                let max = a_j.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
                let split = support_set(a_j, ORACLE_SUPPORT_REL * max)?;
                let dx_l1 = match backprop_exact_dx(d, a_j, da_j, &split) {
                    Ok(v) => v,
                    Err(Error::SingularSupport(_)) => backprop_approx(d, a_j, x_j, da_j, &split)?.0,
                    Err(e) => return Err(e),
                };
                let dd_j = match backprop_exact_dd(d, a_j, x_j, da_j, &split) {
                    Ok(v) => v,
                    Err(Error::SingularSupport(_)) => backprop_approx(d, a_j, x_j, da_j, &split)?.1,
                    Err(e) => return Err(e),
                };
                delta_x.column_mut(j).scaled_add(1.0, &dx_l1);
                d_grad += &dd_j;
            }
        }
    }

    let obs_grads = obsnet_backward(&model.obs_cfg, &model.obs, &obs_cache, &delta_x)?;
    Ok(SampleOutcome {
        grads: ModelGrads { obs: obs_grads, lista: lista_grads, d: d_grad },
        total: jl.total,
        l2: jl.l2,
        l1: jl.l1,
    })
}

/// Batch-mean gradients and loss stats. Samples run in parallel; the
/// reduction folds in sample order, so results are bitwise identical to the
/// sequential path.
pub fn compute_grads(
    model: &ModelParams,
    batch: &[&Scene],
    options: &TrainOptions,
) -> Result<(ModelGrads, StepStats)> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let outcomes = crate::exec::map_slice(batch, |scene| sample_grads(model, scene, options));
    let mut grads = ModelGrads::zeros(model);
    let (mut total, mut l2, mut l1) = (0.0, 0.0, 0.0);
    for outcome in outcomes {
        let o = outcome?;
        grads.add(&o.grads);
        total += o.total;
        l2 += o.l2;
        l1 += o.l1;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    let (grad_obs, grad_lista, grad_d) = grads.norms();
    Ok((
        grads,
        StepStats {
            step: 0,
            total: total * inv,
            l2: l2 * inv,
            l1: l1 * inv,
            grad_obs,
            grad_lista,
            grad_d,
        },
    ))
}

#[derive(Clone, Copy)]
struct AdamConsts {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
}

/// Elementwise moment update; `Zip` walks logical order, so mixed memory
/// layouts (the recovery weights start life transposed) stay aligned.
fn adam_field<D: ndarray::Dimension>(
    p: &mut ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    k: AdamConsts,
) {
    ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, g| {
        *m = k.b1 * *m + (1.0 - k.b1) * g;
        *v = k.b2 * *v + (1.0 - k.b2) * g * g;
        *p -= k.lr * (*m / k.bc1) / ((*v / k.bc2).sqrt() + k.eps);
    });
}

/// Parameter update policy. Plain gradient descent is the default;
/// adaptive moments are optional.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        moments: Option<Box<(ModelGrads, ModelGrads)>>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: None }
    }

    /// Retarget the step size mid-run (decay schedules); Adam moments and the
    /// step counter survive the change.
    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr = new_lr,
        }
    }

    /// Apply one update. Thresholds clamp at zero afterwards, matching the
    /// recovery layer's own update rule.
    pub fn apply(&mut self, model: &mut ModelParams, grads: &ModelGrads, freeze_d: bool) {
        match self {
            Optimizer::Sgd { lr } => {
                let lr = *lr;
                model.obs.add_scaled(&grads.obs, -lr);
                model.lista.w.scaled_add(-lr, &grads.lista.w);
                model.lista.s.scaled_add(-lr, &grads.lista.s);
                model.lista.theta.scaled_add(-lr, &grads.lista.theta);
                if !freeze_d {
                    model.sensing.d.scaled_add(-lr, &grads.d);
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, t, moments } => {
                let (lr, b1, b2, eps) = (*lr, *beta1, *beta2, *eps);
                let (m_buf, v_buf) = &mut **moments.get_or_insert_with(|| {
                    Box::new((ModelGrads::zeros(model), ModelGrads::zeros(model)))
                });
                *t += 1;
                let bc1 = 1.0 - b1.powi(*t as i32);
                let bc2 = 1.0 - b2.powi(*t as i32);
                let k = AdamConsts { lr, b1, b2, eps, bc1, bc2 };
                adam_field(&mut model.obs.stem1, &mut m_buf.obs.stem1, &mut v_buf.obs.stem1, &grads.obs.stem1, k);
                adam_field(&mut model.obs.stem2, &mut m_buf.obs.stem2, &mut v_buf.obs.stem2, &grads.obs.stem2, k);
                adam_field(&mut model.obs.branch, &mut m_buf.obs.branch, &mut v_buf.obs.branch, &grads.obs.branch, k);
                adam_field(&mut model.obs.w1, &mut m_buf.obs.w1, &mut v_buf.obs.w1, &grads.obs.w1, k);
                adam_field(&mut model.obs.w2, &mut m_buf.obs.w2, &mut v_buf.obs.w2, &grads.obs.w2, k);
                adam_field(&mut model.obs.head_conv, &mut m_buf.obs.head_conv, &mut v_buf.obs.head_conv, &grads.obs.head_conv, k);
                adam_field(&mut model.obs.fc_w, &mut m_buf.obs.fc_w, &mut v_buf.obs.fc_w, &grads.obs.fc_w, k);
                adam_field(&mut model.obs.fc_b, &mut m_buf.obs.fc_b, &mut v_buf.obs.fc_b, &grads.obs.fc_b, k);
                adam_field(&mut model.lista.w, &mut m_buf.lista.w, &mut v_buf.lista.w, &grads.lista.w, k);
                adam_field(&mut model.lista.s, &mut m_buf.lista.s, &mut v_buf.lista.s, &grads.lista.s, k);
                adam_field(&mut model.lista.theta, &mut m_buf.lista.theta, &mut v_buf.lista.theta, &grads.lista.theta, k);
                if !freeze_d {
                    adam_field(&mut model.sensing.d, &mut m_buf.d, &mut v_buf.d, &grads.d, k);
                }
            }
        }
        model.lista.theta.mapv_inplace(|v| v.max(0.0));
    }
}

/// One optimization step: batch gradients, then an in-place update.
pub fn train_step(
    model: &mut ModelParams,
    batch: &[&Scene],
    opt: &mut Optimizer,
    options: &TrainOptions,
) -> Result<StepStats> {
    let (grads, stats) = compute_grads(model, batch, options)?;
    opt.apply(model, &grads, options.freeze_d);
    Ok(stats)
}

/// Loop policy: step budget, batch sampling seed, optional CSV log and
/// periodic checkpoint targets.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Seed for per-step batch index sampling.
    pub seed: u64,
    /// Steps between checkpoint writes; 0 disables checkpointing.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Provenance merged into every checkpoint manifest (config hash,
    /// seeds, ...).
    pub manifest_extra: Map<String, Value>,
    pub options: TrainOptions,
}

/// Render step stats as the CSV training log.
pub fn stats_to_csv(rows: &[StepStats]) -> String {
    let mut out = String::from("step,total,l2,l1,grad_obs,grad_lista,grad_d\n");
    for s in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.step, s.total, s.l2, s.l1, s.grad_obs, s.grad_lista, s.grad_d
        ));
    }
    out
}

/// Run steps `start_step..config.steps`. Batch indices for step `s` derive
/// from `(config.seed, s)`, so an interrupted run resumed from a checkpoint
/// sees the same batches it would have seen uninterrupted. Returns the stats
/// of the steps it ran; any non-finite loss aborts with diagnostics.
pub fn train_loop(
    model: &mut ModelParams,
    scenes: &[Scene],
    opt: &mut Optimizer,
    config: &TrainConfig,
    start_step: usize,
) -> Result<Vec<StepStats>> {
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rows = Vec::with_capacity(config.steps.saturating_sub(start_step));
    for step in start_step..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, step as u64));
        let batch: Vec<&Scene> = (0..config.batch_size)
            .map(|_| &scenes[rng.random_range(0..scenes.len())])
            .collect();
        let mut stats = train_step(model, &batch, opt, &config.options)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        stats.step = step;
        rows.push(stats);
        let due = config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0;
        if due || step + 1 == config.steps {
            if let Some(path) = &config.checkpoint_path {
                let mut extra = config.manifest_extra.clone();
                extra.insert("step".into(), json!(step + 1));
                save_model(path, model, &extra)?;
            }
            if let Some(path) = &config.log_path {
                write_log(path, &config.manifest_extra, &rows)?;
            }
        }
    }
    if let Some(path) = &config.log_path {
        write_log(path, &config.manifest_extra, &rows)?;
    }
    Ok(rows)
}

fn write_log(path: &Path, extra: &Map<String, Value>, rows: &[StepStats]) -> Result<()> {
    let text = format!("{}{}", crate::io::provenance_comment(extra), stats_to_csv(rows));
    crate::io::atomic_write(path, text.as_bytes())
}

fn section_from4(name: &str, arr: &ndarray::Array4<f64>) -> NamedSection {
    NamedSection::new(name, arr.shape().to_vec(), arr.iter().copied().collect())
}

fn section_from2(name: &str, arr: &Array2<f64>) -> NamedSection {
    NamedSection::new(name, arr.shape().to_vec(), arr.iter().copied().collect())
}

fn section_from1(name: &str, arr: &Array1<f64>) -> NamedSection {
    NamedSection::new(name, arr.shape().to_vec(), arr.iter().copied().collect())
}

/// Persist the model as a single container file: JSON manifest
/// (architecture, hyperparameters, sensing seed, plus caller extras) and one
/// named binary section per parameter tensor.
pub fn save_model(path: &Path, model: &ModelParams, extra: &Map<String, Value>) -> Result<()> {
    let mut manifest = extra.clone();
    manifest.insert("obs_cfg".into(), serde_json::to_value(&model.obs_cfg).expect("serializes"));
    manifest.insert("hyper".into(), serde_json::to_value(&model.hyper).expect("serializes"));
    manifest.insert("sensing_seed".into(), json!(model.sensing.seed));
    let sections = vec![
        section_from4("obs.stem1", &model.obs.stem1),
        section_from4("obs.stem2", &model.obs.stem2),
        section_from4("obs.branch", &model.obs.branch),
        section_from2("obs.w1", &model.obs.w1),
        section_from2("obs.w2", &model.obs.w2),
        section_from4("obs.head_conv", &model.obs.head_conv),
        section_from2("obs.fc_w", &model.obs.fc_w),
        section_from1("obs.fc_b", &model.obs.fc_b),
        section_from2("lista.w", &model.lista.w),
        section_from2("lista.s", &model.lista.s),
        section_from1("lista.theta", &model.lista.theta),
        section_from2("sensing.d", &model.sensing.d),
    ];
    write_container(path, "csoe-model", &Value::Object(manifest), &sections)
}

fn find_section<'a>(path: &Path, sections: &'a [NamedSection], name: &str) -> Result<&'a NamedSection> {
    sections.iter().find(|s| s.name == name).ok_or_else(|| {
        Error::parse(path.display().to_string(), format!("missing section {name:?}"))
    })
}

fn take4(path: &Path, sections: &[NamedSection], name: &str, dim: (usize, usize, usize, usize)) -> Result<ndarray::Array4<f64>> {
    let s = find_section(path, sections, name)?;
    if s.shape != [dim.0, dim.1, dim.2, dim.3] {
        return Err(Error::parse(
            path.display().to_string(),
            format!("section {name:?} shape {:?} does not match expected {dim:?}", s.shape),
        ));
    }
    Ok(ndarray::Array4::from_shape_vec(dim, s.values.clone()).expect("shape checked"))
}

fn take2(path: &Path, sections: &[NamedSection], name: &str, dim: (usize, usize)) -> Result<Array2<f64>> {
    let s = find_section(path, sections, name)?;
    if s.shape != [dim.0, dim.1] {
        return Err(Error::parse(
            path.display().to_string(),
            format!("section {name:?} shape {:?} does not match expected {dim:?}", s.shape),
        ));
    }
    Ok(Array2::from_shape_vec(dim, s.values.clone()).expect("shape checked"))
}

fn take1(path: &Path, sections: &[NamedSection], name: &str, len: usize) -> Result<Array1<f64>> {
    let s = find_section(path, sections, name)?;
    if s.shape != [len] {
        return Err(Error::parse(
            path.display().to_string(),
            format!("section {name:?} shape {:?} does not match expected [{len}]", s.shape),
        ));
    }
    Ok(Array1::from_vec(s.values.clone()))
}

/// Load a model container; returns the model and its full manifest (which
/// carries any caller extras such as the checkpoint step).
pub fn load_model(path: &Path) -> Result<(ModelParams, Value)> {
    let (manifest, sections) = read_container(path, "csoe-model")?;
    let p = path.display().to_string();
    let obs_cfg: ObsConfig = manifest
        .get("obs_cfg")
        .cloned()
        .ok_or_else(|| Error::parse(p.clone(), "manifest missing obs_cfg".to_string()))
        .and_then(|v| {
            serde_json::from_value(v).map_err(|e| Error::parse(p.clone(), format!("obs_cfg: {e}")))
        })?;
    let hyper: Hyper = manifest
        .get("hyper")
        .cloned()
        .ok_or_else(|| Error::parse(p.clone(), "manifest missing hyper".to_string()))
        .and_then(|v| {
            serde_json::from_value(v).map_err(|e| Error::parse(p.clone(), format!("hyper: {e}")))
        })?;
    let sensing_seed = manifest
        .get("sensing_seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::parse(p.clone(), "manifest missing sensing_seed".to_string()))?;

    // Shape template from a zero-seed init; values are overwritten below.
    let template = ObsParams::init(&obs_cfg, 0)?;
    let obs = ObsParams {
        stem1: take4(path, &sections, "obs.stem1", dim4(&template.stem1))?,
        stem2: take4(path, &sections, "obs.stem2", dim4(&template.stem2))?,
        branch: take4(path, &sections, "obs.branch", dim4(&template.branch))?,
        w1: take2(path, &sections, "obs.w1", template.w1.dim())?,
        w2: take2(path, &sections, "obs.w2", template.w2.dim())?,
        head_conv: take4(path, &sections, "obs.head_conv", dim4(&template.head_conv))?,
        fc_w: take2(path, &sections, "obs.fc_w", template.fc_w.dim())?,
        fc_b: take1(path, &sections, "obs.fc_b", template.fc_b.len())?,
    };
    let m = obs_cfg.out_rows;
    let n = detector_bins(obs_cfg.frame);
    let lista = ListaParams {
        w: take2(path, &sections, "lista.w", (n, m))?,
        s: take2(path, &sections, "lista.s", (n, n))?,
        theta: take1(path, &sections, "lista.theta", hyper.t_steps)?,
    };
    let sensing = SensingMatrix { d: take2(path, &sections, "sensing.d", (m, n))?, seed: sensing_seed };
    let model = ModelParams { obs_cfg, obs, lista, sensing, hyper };
    model.validate()?;
    Ok((model, manifest))
}

fn dim4(a: &ndarray::Array4<f64>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

/// Peak-extraction knobs for decoding.
#[derive(Debug, Clone, Copy)]
pub struct PeakParams {
    pub rel_threshold: f64,
    pub min_distance: f64,
}

impl Default for PeakParams {
    fn default() -> Self {
        PeakParams { rel_threshold: 0.5, min_distance: 2.0 }
    }
}

/// Full decode output: predicted heads plus every intermediate worth
/// inspecting or writing to disk.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub points: PointSet,
    pub count: usize,
    /// Regressed code `x̂`.
    pub code: Array2<f64>,
    /// Recovered sinogram `â`.
    pub sinogram: Sinogram,
    /// Backprojected localization map.
    pub map: Array2<f64>,
}

/// Image → code → sinogram → backprojection → peaks.
pub fn decode(model: &ModelParams, image: &Array2<f64>, peaks: &PeakParams) -> Result<Decoded> {
    let (x_hat, _) = obsnet_forward(&model.obs_cfg, &model.obs, image)?;
    let r = x_hat.ncols();
    let n = model.sensing.n();
    let mut a_hat = Array2::<f64>::zeros((n, r));
    let columns = crate::exec::map_collect(r, |j| {
        crate::recovery::lista_forward(&model.lista, x_hat.column(j))
    });
    for (j, col) in columns.into_iter().enumerate() {
        a_hat.column_mut(j).assign(&col?);
    }
    let sinogram = Sinogram { values: a_hat, angles: model.angles(), frame: model.obs_cfg.frame };
    let map = fbp_inverse(&sinogram)?;
    let points = extract_peaks(&map, peaks.rel_threshold, peaks.min_distance)?;
    let count = points.len();
    Ok(Decoded { points, count, code: x_hat, sinogram, map })
}

/// Decode taking exactly the estimated head count's strongest peaks.
///
/// Every head deposits unit mass per recovered-sinogram column, so the mean
/// column sum estimates the count without needing separable peaks; selecting
/// that many maxima keeps weak-but-real heads a relative height cutoff would
/// drop and trims spurious ones it would keep.
pub fn decode_counted(
    model: &ModelParams,
    image: &Array2<f64>,
    min_distance: f64,
) -> Result<Decoded> {
    let mut out = decode(model, image, &PeakParams::default())?;
    let est = count_estimate(&out.sinogram.values).round().max(0.0) as usize;
    out.points = extract_peaks_counted(&out.map, est, min_distance)?;
    out.count = out.points.len();
    Ok(out)
}

/// Count estimate that bypasses peak extraction: every head deposits unit
/// mass per sinogram column, so the mean column sum estimates the count.
pub fn count_estimate(a_hat: &Array2<f64>) -> f64 {
    let r = a_hat.ncols();
    if r == 0 {
        return 0.0;
    }
    (0..r).map(|j| a_hat.column(j).sum()).sum::<f64>() / r as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::synth_scene;
    use crate::sensing::make_sensing_matrix;
    use ndarray::array;

    /// Tiny geometry: 12×12 frame → 17 detector bins, 8 measurements,
    /// 5 angles.
    fn tiny_cfg() -> ObsConfig {
        ObsConfig {
            frame: (12, 12),
            c_b: 4,
            dilations: vec![1, 2],
            ratio: 2,
            head_channels: 4,
            out_rows: 8,
            out_cols: 5,
            use_mdcb: true,
            use_arfw: true,
            use_center_pool: true,
        }
    }

    fn tiny_model(seed: u64) -> ModelParams {
        let cfg = tiny_cfg();
        let sensing = make_sensing_matrix(cfg.out_rows, detector_bins(cfg.frame), 11).unwrap();
        let hyper = Hyper { lambda: 0.05, alpha: 1.65 / cfg.out_rows as f64, t_steps: 8 };
        ModelParams::init(cfg, sensing, hyper, seed).unwrap()
    }

    fn tiny_scene(model: &ModelParams, seed: u64, k: usize) -> Scene {
        synth_scene(
            &model.sensing,
            &model.angles(),
            seed,
            model.obs_cfg.frame,
            k,
            (0.7, 1.2),
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn joint_loss_cases() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let a = array![[0.5, -0.5], [0.0, 2.0], [1.0, 1.0]];

        // Perfect reconstruction → zero loss, zero gradients.
        let jl = joint_loss(&x, &x, &a, &a, 0.5).unwrap();
        assert_eq!(jl.total, 0.0);
        assert!(jl.dx_hat.iter().all(|&v| v == 0.0));
        assert!(jl.da_hat.iter().all(|&v| v == 0.0));

        // Pure L2 when sinograms agree: ½‖e‖².
        let mut x_hat = x.clone();
        x_hat[(0, 1)] += 3.0;
        let jl = joint_loss(&x_hat, &x, &a, &a, 0.5).unwrap();
        assert!((jl.total - 4.5).abs() < 1e-15);
        assert_eq!(jl.dx_hat[(0, 1)], 3.0);

        // L1 gradient is α·sign, zero at ties.
        let mut a_hat = a.clone();
        a_hat[(1, 0)] += 2.0;
        a_hat[(2, 1)] -= 1.0;
        let jl = joint_loss(&x, &x, &a_hat, &a, 0.5).unwrap();
        assert!((jl.l1 - 3.0).abs() < 1e-15);
        assert!((jl.total - 1.5).abs() < 1e-15);
        assert_eq!(jl.da_hat[(1, 0)], 0.5);
        assert_eq!(jl.da_hat[(2, 1)], -0.5);
        assert_eq!(jl.da_hat[(0, 0)], 0.0);

        // Decomposition identity.
        assert!((jl.total - (jl.l2 + 0.5 * jl.l1)).abs() < 1e-12);

        assert!(joint_loss(&x, &x, &a, &a, -1.0).is_err());
        let wide = Array2::<f64>::zeros((2, 3));
        assert!(joint_loss(&wide, &x, &a, &a, 0.5).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_model_bitwise_unchanged() {
        let mut model = tiny_model(1);
        let before = model.clone();
        let scene = tiny_scene(&model, 5, 2);
        let mut opt = Optimizer::sgd(0.0);
        let stats = train_step(&mut model, &[&scene], &mut opt, &TrainOptions::default()).unwrap();
        assert_eq!(model, before);
        assert!(stats.total.is_finite() && stats.total > 0.0);
    }

    #[test]
    fn every_parameter_group_gets_gradient_and_moves() {
        let mut model = tiny_model(2);
        let init = model.clone();
        let scene = tiny_scene(&model, 6, 3);
        let (_, stats) = compute_grads(&model, &[&scene], &TrainOptions::default()).unwrap();
        assert!(stats.grad_obs > 0.0, "obs grad norm {}", stats.grad_obs);
        assert!(stats.grad_lista > 0.0, "lista grad norm {}", stats.grad_lista);
        assert!(stats.grad_d > 0.0, "dictionary grad norm {}", stats.grad_d);

        let mut opt = Optimizer::sgd(1e-3);
        for _ in 0..3 {
            train_step(&mut model, &[&scene], &mut opt, &TrainOptions::default()).unwrap();
        }
        assert_ne!(model.obs, init.obs);
        assert_ne!(model.lista, init.lista);
        assert_ne!(model.sensing.d, init.sensing.d);

        // Freeze flag pins the dictionary while everything else trains.
        let mut frozen = init.clone();
        let options = TrainOptions { freeze_d: true, ..Default::default() };
        let mut opt = Optimizer::sgd(1e-3);
        train_step(&mut frozen, &[&scene], &mut opt, &options).unwrap();
        assert_eq!(frozen.sensing.d, init.sensing.d);
        assert_ne!(frozen.obs, init.obs);
    }

    #[test]
    fn single_scene_loss_decreases_on_moving_average() {
        let mut model = tiny_model(3);
        let scene = tiny_scene(&model, 7, 2);
        let mut opt = Optimizer::sgd(5e-4);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let stats =
                train_step(&mut model, &[&scene], &mut opt, &TrainOptions::default()).unwrap();
            losses.push(stats.total);
        }
        let ma: Vec<f64> =
            losses.windows(20).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
        for (i, pair) in ma.windows(2).enumerate() {
            assert!(
                pair[1] < pair[0],
                "moving average rose at window {i}: {} → {}",
                pair[0],
                pair[1]
            );
        }
        assert!(ma.last().unwrap() < &(0.7 * ma[0]), "insufficient decrease: {ma:?}");
    }

    #[test]
    fn adam_also_reduces_loss() {
        let mut model = tiny_model(4);
        let scene = tiny_scene(&model, 8, 2);
        let mut opt = Optimizer::adam(2e-3);
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for i in 0..40 {
            let stats =
                train_step(&mut model, &[&scene], &mut opt, &TrainOptions::default()).unwrap();
            if i == 0 {
                first = stats.total;
            }
            last = stats.total;
        }
        assert!(last < first, "Adam failed to reduce loss: {first} → {last}");
    }

    #[test]
    fn dictionary_gradient_matches_finite_differences_in_oracle_mode() {
        let mut model = tiny_model(9);
        let scene = tiny_scene(&model, 10, 2);
        // Size λ against the regressed code so recovered supports are
        // non-trivial regardless of the random init's output scale.
        let (x_hat, _) = obsnet_forward(&model.obs_cfg, &model.obs, &scene.image).unwrap();
        let corr = model.sensing.d.t().dot(&x_hat);
        let cmax = corr.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        model.hyper.lambda = 0.2 * cmax;

        let options = TrainOptions { mode: ReconMode::Oracle, ..Default::default() };
        let (grads, _) = compute_grads(&model, &[&scene], &options).unwrap();
        let gmax = grads.d.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        assert!(gmax > 0.0, "oracle mode produced a zero dictionary gradient");

        // Three largest-gradient entries, central differences through the
        // full forward (obsnet + smoothed solves + joint loss).
        let mut ranked: Vec<((usize, usize), f64)> =
            grads.d.indexed_iter().map(|(ij, &v)| (ij, v.abs())).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let h = 1e-4;
        for &((i, j), _) in ranked.iter().take(3) {
            let loss_at = |delta: f64| -> f64 {
                let mut pert = model.clone();
                pert.sensing.d[(i, j)] += delta;
                let (_, stats) = compute_grads(&pert, &[&scene], &options).unwrap();
                stats.total
            };
            let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            let analytic = grads.d[(i, j)];
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
            assert!(
                rel < 1e-3,
                "D({i},{j}): analytic {analytic:.6e} vs fd {fd:.6e} (rel {rel:.2e})"
            );
        }
    }

    #[test]
    fn training_is_deterministic_and_parallel_invariant() {
        let config = TrainConfig {
            steps: 4,
            batch_size: 2,
            seed: 77,
            checkpoint_every: 0,
            checkpoint_path: None,
            log_path: None,
            manifest_extra: Map::new(),
            options: TrainOptions::default(),
        };
        let run = || {
            let mut model = tiny_model(5);
            let scenes: Vec<Scene> =
                (0..4).map(|i| tiny_scene(&model, 100 + i, 1 + i as usize % 3)).collect();
            let mut opt = Optimizer::sgd(1e-3);
            let rows = train_loop(&mut model, &scenes, &mut opt, &config, 0).unwrap();
            (model, rows)
        };
        let (model_a, rows_a) = run();
        let (model_b, rows_b) = run();
        assert_eq!(model_a, model_b);
        assert_eq!(rows_a, rows_b);
        let (model_c, rows_c) = crate::exec::run_sequential(run);
        assert_eq!(model_a, model_c);
        assert_eq!(rows_a, rows_c);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("model.ckpt");
        let base = TrainConfig {
            steps: 6,
            batch_size: 1,
            seed: 13,
            checkpoint_every: 3,
            checkpoint_path: Some(ckpt.clone()),
            log_path: Some(dir.path().join("log.csv")),
            manifest_extra: Map::new(),
            options: TrainOptions::default(),
        };
        let scenes: Vec<Scene> = {
            let model = tiny_model(6);
            (0..3).map(|i| tiny_scene(&model, 200 + i, 2)).collect()
        };

        // Uninterrupted run.
        let mut full = tiny_model(6);
        let mut opt = Optimizer::sgd(1e-3);
        train_loop(&mut full, &scenes, &mut opt, &base, 0).unwrap();

        // Interrupted at step 3, resumed from the checkpoint.
        let mut half = tiny_model(6);
        let mut opt = Optimizer::sgd(1e-3);
        let first_half = TrainConfig { steps: 3, ..base.clone() };
        train_loop(&mut half, &scenes, &mut opt, &first_half, 0).unwrap();
        let (mut resumed, manifest) = load_model(&ckpt).unwrap();
        assert_eq!(resumed, half);
        assert_eq!(manifest["step"], json!(3));
        let mut opt = Optimizer::sgd(1e-3);
        train_loop(&mut resumed, &scenes, &mut opt, &base, 3).unwrap();
        assert_eq!(resumed, full);

        // Log exists and has header + rows.
        let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert!(log.starts_with("step,total,l2,l1,grad_obs,grad_lista,grad_d\n"));
    }

    #[test]
    fn model_container_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut model = tiny_model(8);
        // Make the state non-trivial before saving.
        let scene = tiny_scene(&model, 300, 2);
        let mut opt = Optimizer::sgd(1e-3);
        train_step(&mut model, &[&scene], &mut opt, &TrainOptions::default()).unwrap();

        let mut extra = Map::new();
        extra.insert("config_sha256".into(), json!("cafe"));
        save_model(&path, &model, &extra).unwrap();
        let (back, manifest) = load_model(&path).unwrap();
        assert_eq!(model, back);
        assert_eq!(manifest["config_sha256"], json!("cafe"));

        // Decode agrees bitwise between original and reloaded model.
        let a = decode(&model, &scene.image, &PeakParams::default()).unwrap();
        let b = decode(&back, &scene.image, &PeakParams::default()).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.code, b.code);
    }

    #[test]
    fn decode_is_total_on_untrained_models() {
        let model = tiny_model(10);
        let scene = tiny_scene(&model, 400, 3);
        let out = decode(&model, &scene.image, &PeakParams::default()).unwrap();
        assert_eq!(out.count, out.points.len());
        assert_eq!(out.code.dim(), (8, 5));
        assert_eq!(out.sinogram.values.dim(), (17, 5));

        let zero = Array2::zeros(model.obs_cfg.frame);
        let out = decode(&model, &zero, &PeakParams::default()).unwrap();
        assert_eq!(out.count, out.points.len());
    }

    #[test]
    fn counted_decode_takes_the_mass_estimate() {
        let model = tiny_model(10);
        let scene = tiny_scene(&model, 400, 3);
        let out = decode_counted(&model, &scene.image, 2.0).unwrap();
        assert_eq!(out.count, out.points.len());
        let est = count_estimate(&out.sinogram.values).round().max(0.0) as usize;
        // Fewer points than the estimate only if the map lacks maxima.
        assert!(out.count <= est);

        let zero = Array2::zeros(model.obs_cfg.frame);
        let out = decode_counted(&model, &zero, 2.0).unwrap();
        assert_eq!(out.count, out.points.len());
    }

    #[test]
    fn column_sums_of_true_sinogram_estimate_count() {
        let model = tiny_model(11);
        for k in [0usize, 1, 4, 7] {
            let scene = tiny_scene(&model, 500 + k as u64, k);
            let est = count_estimate(&scene.sinogram.values);
            assert!(
                (est - k as f64).abs() < 1e-9,
                "count estimate {est} for k={k}"
            );
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut model = tiny_model(12);
        model.obs.fc_b.fill(f64::MAX);
        let scene = tiny_scene(&model, 600, 2);
        let mut opt = Optimizer::sgd(1e-3);
        let err =
            train_step(&mut model, &[&scene], &mut opt, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "got {err}");
        assert!(err.to_string().contains("non-finite"), "got {err}");
    }

    #[test]
    fn validation_catches_mismatched_geometry() {
        let model = tiny_model(13);
        let mut bad = model.clone();
        bad.obs_cfg.out_rows = 9;
        assert!(bad.validate().is_err());
        let mut bad = model.clone();
        bad.hyper.t_steps = 3;
        assert!(bad.validate().is_err());
        let mut bad = model;
        bad.obs_cfg.frame = (14, 14);
        assert!(bad.validate().is_err());
    }
}
