//! Component ablation harness. Each run toggles a subset of
//! {code encoding, multi-dilation trunk, gating, center pooling}, trains a
//! fresh model under an identical budget, and reports localization and
//! counting metrics on a shared held-out split.
//!
//! Disabling the code encoding ("direct" rows) removes the sensing and
//! recovery layers entirely: the network regresses the sinogram itself and
//! decoding goes straight to backprojection + peaks. Gating requires the
//! multi-dilation trunk — a gate over a single branch has nothing to
//! reweight — so that combination is rejected up front.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{mae_rmse, match_points, precision_recall_f1};
use crate::obsnet::{obsnet_backward, obsnet_forward, ObsConfig, ObsParams};
use crate::radon::{detector_bins, extract_peaks, fbp_inverse, PointSet, Sinogram};
use crate::scene::{derive_seed, Scene};
use crate::sensing::{encode, SensingMatrix};
use crate::training::{
    train_loop, Hyper, ModelParams, Optimizer, PeakParams, TrainConfig, TrainOptions,
};

/// One ablation variant: which components stay enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationToggles {
    /// Compressed-sensing output encoding (sensing + recovery layers).
    pub csoe: bool,
    /// Multi-dilation branches in the trunk.
    pub mdcb: bool,
    /// Channel gating over the branch concat.
    pub arfw: bool,
    /// Center pooling before the head.
    pub center_pool: bool,
}

impl AblationToggles {
    /// Everything on.
    pub fn full() -> Self {
        AblationToggles { csoe: true, mdcb: true, arfw: true, center_pool: true }
    }

    /// Gating needs the multi-branch trunk underneath it.
    pub fn validate(&self) -> Result<()> {
        if self.arfw && !self.mdcb {
            return Err(Error::Config(
                "gating requires the multi-dilation trunk; enable mdcb or disable arfw".into(),
            ));
        }
        Ok(())
    }

    /// Stable row label, e.g. `csoe+mdcb+arfw+cp` or `direct+cp`.
    pub fn label(&self) -> String {
        let mut parts = vec![if self.csoe { "csoe" } else { "direct" }];
        if self.mdcb {
            parts.push("mdcb");
        }
        if self.arfw {
            parts.push("arfw");
        }
        if self.center_pool {
            parts.push("cp");
        }
        parts.join("+")
    }

    /// Every valid combination (16 subsets minus the four gate-without-trunk
    /// ones), in a fixed order with the full configuration first.
    pub fn all_valid() -> Vec<Self> {
        let mut out = Vec::new();
        for csoe in [true, false] {
            for mdcb in [true, false] {
                for arfw in [true, false] {
                    for cp in [true, false] {
                        let t = AblationToggles { csoe, mdcb, arfw, center_pool: cp };
                        if t.validate().is_ok() {
                            out.push(t);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Shared experiment parameters: every row trains the same trunk geometry
/// under the same budget, seeds, and evaluation protocol.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    pub frame: (usize, usize),
    /// Angle count (network output columns).
    pub r: usize,
    /// Sensing matrix shared by all code-encoding rows; scenes must have
    /// been generated with it.
    pub sensing: SensingMatrix,
    pub c_b: usize,
    pub dilations: Vec<usize>,
    pub ratio: usize,
    pub head_channels: usize,
    pub hyper: Hyper,
    pub model_seed: u64,
    pub train_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Matching threshold in pixels for the F1 columns.
    pub threshold: f64,
    pub peaks: PeakParams,
}

impl AblationSetup {
    fn obs_config(&self, toggles: &AblationToggles) -> ObsConfig {
        let out_rows = if toggles.csoe { self.sensing.m() } else { detector_bins(self.frame) };
        ObsConfig {
            frame: self.frame,
            c_b: self.c_b,
            dilations: self.dilations.clone(),
            ratio: self.ratio,
            head_channels: self.head_channels,
            out_rows,
            out_cols: self.r,
            use_mdcb: toggles.mdcb,
            use_arfw: toggles.arfw,
            use_center_pool: toggles.center_pool,
        }
    }
}

/// Metrics for one trained variant. Precision/recall/F1 are micro-averaged
/// over the evaluation split (counts summed, then ratios); MAE/RMSE compare
/// per-image head counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub toggles: AblationToggles,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Mean training loss over the final 10 steps, for convergence checks.
    pub final_loss: f64,
}

/// Render rows as the ablation table CSV.
pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("label,csoe,mdcb,arfw,center_pool,precision,recall,f1,mae,rmse,final_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.toggles.csoe,
            r.toggles.mdcb,
            r.toggles.arfw,
            r.toggles.center_pool,
            r.precision,
            r.recall,
            r.f1,
            r.mae,
            r.rmse,
            r.final_loss
        ));
    }
    out
}

/// Direct-regression variant: the same trunk, but the head emits the
/// sinogram itself and trains on plain squared error.
struct DirectModel {
    cfg: ObsConfig,
    obs: ObsParams,
}

fn direct_train(
    setup: &AblationSetup,
    toggles: &AblationToggles,
    scenes: &[Scene],
) -> Result<(DirectModel, f64)> {
    let cfg = setup.obs_config(toggles);
    let mut obs = ObsParams::init(&cfg, setup.model_seed)?;
    let mut recent = Vec::new();
    for step in 0..setup.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.train_seed, step as u64));
        let batch: Vec<&Scene> =
            (0..setup.batch_size).map(|_| &scenes[rng.random_range(0..scenes.len())]).collect();
        let outcomes = crate::exec::map_slice(&batch, |scene| -> Result<(ObsParams, f64)> {
            let (out, cache) = obsnet_forward(&cfg, &obs, &scene.image)?;
            let resid = &out - &scene.sinogram.values;
            let loss = 0.5 * resid.iter().map(|v| v * v).sum::<f64>();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite direct loss {loss}")));
            }
            let grads = obsnet_backward(&cfg, &obs, &cache, &resid)?;
            Ok((grads, loss))
        });
        let mut grads = ObsParams::zeros_like(&obs);
        let mut loss_sum = 0.0;
        for o in outcomes {
            let (g, l) = o.map_err(|e| Error::Numeric(format!("direct step {step}: {e}")))?;
            grads.add_scaled(&g, 1.0);
            loss_sum += l;
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        obs.add_scaled(&grads, -setup.lr);
        recent.push(loss_sum * inv);
    }
    let tail = recent.iter().rev().take(10).sum::<f64>() / recent.len().min(10).max(1) as f64;
    Ok((DirectModel { cfg, obs }, tail))
}

fn direct_decode(model: &DirectModel, scene: &Scene, peaks: &PeakParams) -> Result<PointSet> {
    let (out, _) = obsnet_forward(&model.cfg, &model.obs, &scene.image)?;
    let sino = Sinogram {
        values: out,
        angles: scene.sinogram.angles.clone(),
        frame: model.cfg.frame,
    };
    let map = fbp_inverse(&sino)?;
    extract_peaks(&map, peaks.rel_threshold, peaks.min_distance)
}

fn evaluate(
    setup: &AblationSetup,
    eval_scenes: &[Scene],
    predict: impl Fn(&Scene) -> Result<PointSet> + Sync + Send,
) -> Result<(f64, f64, f64, f64, f64)> {
    let per_scene = crate::exec::map_slice(eval_scenes, |scene| -> Result<_> {
        let pred = predict(scene)?;
        let mr = match_points(&pred, &scene.truth, setup.threshold)?;
        Ok((mr.tp, mr.fp, mr.missed, pred.len() as f64, scene.truth.len() as f64))
    });
    let (mut tp, mut fp, mut missed) = (0usize, 0usize, 0usize);
    let mut pred_counts = Vec::with_capacity(eval_scenes.len());
    let mut gt_counts = Vec::with_capacity(eval_scenes.len());
    for r in per_scene {
        let (t, f, m, pc, gc) = r?;
        tp += t;
        fp += f;
        missed += m;
        pred_counts.push(pc);
        gt_counts.push(gc);
    }
    let pooled = crate::metrics::MatchResult { tp, fp, missed, pairs: Vec::new() };
    // `pairs` is only a per-image artifact; pooled ratios need the counts.
    let (p, r, f1) = precision_recall_f1(&pooled);
    let (mae, rmse) = mae_rmse(&gt_counts, &pred_counts)?;
    Ok((p, r, f1, mae, rmse))
}

fn scenes_match_geometry(setup: &AblationSetup, scenes: &[Scene], split: &str) -> Result<()> {
    let n = detector_bins(setup.frame);
    for (i, s) in scenes.iter().enumerate() {
        if s.image.dim() != setup.frame
            || s.sinogram.values.dim() != (n, setup.r)
            || s.code.nrows() != setup.sensing.m()
        {
            return Err(Error::Config(format!(
                "{split} scene {i} geometry {:?}/{:?}/{:?} does not match setup",
                s.image.dim(),
                s.sinogram.values.dim(),
                s.code.dim()
            )));
        }
        let recode = encode(&setup.sensing, s.sinogram.values.view())?;
        if recode != s.code {
            return Err(Error::Config(format!(
                "{split} scene {i} was not encoded with the supplied sensing matrix"
            )));
        }
    }
    Ok(())
}

/// Train and evaluate one model per toggle set under a shared budget.
/// Invalid toggle sets fail the whole run before any training starts.
pub fn ablation_run(
    setup: &AblationSetup,
    toggles_list: &[AblationToggles],
    train_scenes: &[Scene],
    eval_scenes: &[Scene],
) -> Result<Vec<AblationRow>> {
    for t in toggles_list {
        t.validate()?;
    }
    if train_scenes.is_empty() || eval_scenes.is_empty() {
        return Err(Error::Config("ablation needs non-empty train and eval splits".into()));
    }
    scenes_match_geometry(setup, train_scenes, "train")?;
    scenes_match_geometry(setup, eval_scenes, "eval")?;

    let mut rows = Vec::with_capacity(toggles_list.len());
    for toggles in toggles_list {
        let (precision, recall, f1, mae, rmse, final_loss) = if toggles.csoe {
            let model = {
                let cfg = setup.obs_config(toggles);
                let mut model = ModelParams::init(
                    cfg,
                    setup.sensing.clone(),
                    setup.hyper.clone(),
                    setup.model_seed,
                )?;
                let tcfg = TrainConfig {
                    steps: setup.steps,
                    batch_size: setup.batch_size,
                    seed: setup.train_seed,
                    checkpoint_every: 0,
                    checkpoint_path: None,
                    log_path: None,
                    manifest_extra: serde_json::Map::new(),
                    options: TrainOptions::default(),
                };
                let mut opt = Optimizer::sgd(setup.lr);
                let stats = train_loop(&mut model, train_scenes, &mut opt, &tcfg, 0)?;
                let tail = stats.iter().rev().take(10).map(|s| s.total).sum::<f64>()
                    / stats.len().min(10).max(1) as f64;
                (model, tail)
            };
            let (model, tail) = model;
            let (p, r, f1, mae, rmse) = evaluate(setup, eval_scenes, |scene| {
                crate::training::decode(&model, &scene.image, &setup.peaks).map(|d| d.points)
            })?;
            (p, r, f1, mae, rmse, tail)
        } else {
            let (model, tail) = direct_train(setup, toggles, train_scenes)?;
            let (p, r, f1, mae, rmse) =
                evaluate(setup, eval_scenes, |scene| direct_decode(&model, scene, &setup.peaks))?;
            (p, r, f1, mae, rmse, tail)
        };
        rows.push(AblationRow {
            label: toggles.label(),
            toggles: *toggles,
            precision,
            recall,
            f1,
            mae,
            rmse,
            final_loss,
        });
    }
    Ok(rows)
}
