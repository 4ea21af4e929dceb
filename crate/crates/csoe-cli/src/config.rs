//! Experiment configuration: one flat key-value TOML file covering every
//! tunable of the pipeline. Unknown keys are rejected so typos fail loudly;
//! omitted keys take the defaults that `csoe print-config` prints. The
//! SHA-256 of the canonical rendering, together with the four seeds, is
//! embedded in every artifact a command writes.

use std::path::Path;

use csoe::io::sha256_hex;
use csoe::obsnet::ObsConfig;
use csoe::radon::{default_angles, detector_bins};
use csoe::sensing::{make_sensing_matrix, required_measurements, SensingMatrix};
use csoe::training::{Hyper, Optimizer, PeakParams};
use csoe::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    // Scene geometry and synthesis.
    pub frame_h: usize,
    pub frame_w: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub min_sep: f64,
    // Encoding. `measurements = 0` derives the code height from the
    // sparsity bound at `k_max`; `c_m` is that bound's constant.
    pub angles: usize,
    pub measurements: usize,
    pub c_m: f64,
    // Recovery and loss. `alpha = 0` derives the sparsity weight as
    // 1.65 / measurements; `ista_iters` drives the oracle decoder.
    pub lambda: f64,
    pub alpha: f64,
    pub t_steps: usize,
    pub ista_iters: usize,
    // Observation network. Dilations are comma-separated to keep the file
    // flat, e.g. "1,2,3".
    pub c_b: usize,
    pub dilations: String,
    pub ratio: usize,
    pub head_channels: usize,
    pub use_mdcb: bool,
    pub use_arfw: bool,
    pub use_center_pool: bool,
    // Seeds; each command draws only from these.
    pub data_seed: u64,
    pub model_seed: u64,
    pub sensing_seed: u64,
    pub train_seed: u64,
    // Optimization.
    pub optimizer: String,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub freeze_dictionary: bool,
    // Evaluation and decoding.
    pub eval_threshold: f64,
    pub peak_rel_threshold: f64,
    pub peak_min_distance: f64,
    // Worker threads; 0 keeps the library default.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            frame_h: 32,
            frame_w: 32,
            k_min: 1,
            k_max: 5,
            sigma_min: 0.8,
            sigma_max: 1.6,
            min_sep: 4.0,
            angles: 24,
            measurements: 0,
            c_m: 2.0,
            lambda: 0.05,
            alpha: 0.0,
            t_steps: 16,
            ista_iters: 400,
            c_b: 8,
            dilations: "1,2,3".into(),
            ratio: 4,
            head_channels: 8,
            use_mdcb: true,
            use_arfw: true,
            use_center_pool: true,
            data_seed: 1,
            model_seed: 2,
            sensing_seed: 3,
            train_seed: 4,
            optimizer: "adam".into(),
            learning_rate: 1e-3,
            steps: 2000,
            batch_size: 8,
            checkpoint_every: 0,
            freeze_dictionary: false,
            eval_threshold: 4.0,
            peak_rel_threshold: 0.5,
            peak_min_distance: 2.0,
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    /// Defaults when `path` is `None`, otherwise the parsed and validated
    /// file. Unknown keys and malformed values are configuration errors.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => ExperimentConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Io { path: p.display().to_string(), source: e })?;
                toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.frame_h == 0 || self.frame_w == 0 {
            return bad(format!("frame {}x{} must be positive", self.frame_h, self.frame_w));
        }
        if self.k_max < self.k_min {
            return bad(format!("k_min {} exceeds k_max {}", self.k_min, self.k_max));
        }
        if !(self.sigma_min > 0.0) || self.sigma_max < self.sigma_min {
            return bad(format!(
                "head widths must satisfy 0 < sigma_min <= sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            ));
        }
        if !(self.min_sep >= 0.0) {
            return bad(format!("min_sep {} must be non-negative", self.min_sep));
        }
        if self.angles < 2 {
            return bad(format!("{} projection angles cannot be inverted; need >= 2", self.angles));
        }
        if !(self.c_m > 0.0) {
            return bad(format!("measurement constant c_m {} must be positive", self.c_m));
        }
        if !(self.lambda > 0.0) || !(self.alpha >= 0.0) {
            return bad(format!(
                "need lambda > 0 and alpha >= 0, got {} and {}",
                self.lambda, self.alpha
            ));
        }
        if self.t_steps == 0 || self.ista_iters == 0 {
            return bad("recovery iteration counts must be positive".into());
        }
        if self.use_arfw && !self.use_mdcb {
            return bad(
                "use_arfw requires the multi-dilation trunk; enable use_mdcb or disable use_arfw"
                    .into(),
            );
        }
        if self.optimizer != "sgd" && self.optimizer != "adam" {
            return bad(format!("unknown optimizer {:?}; expected \"sgd\" or \"adam\"", self.optimizer));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if !(self.eval_threshold > 0.0) {
            return bad(format!("eval_threshold {} must be positive", self.eval_threshold));
        }
        if !(self.peak_rel_threshold > 0.0 && self.peak_rel_threshold <= 1.0) {
            return bad(format!(
                "peak_rel_threshold {} must lie in (0, 1]",
                self.peak_rel_threshold
            ));
        }
        if !(self.peak_min_distance >= 0.0) {
            return bad(format!("peak_min_distance {} must be non-negative", self.peak_min_distance));
        }
        self.dilation_list()?;
        Ok(())
    }

    pub fn frame(&self) -> (usize, usize) {
        (self.frame_h, self.frame_w)
    }

    /// Detector bins of the frame diagonal; the sinogram row count.
    pub fn bins(&self) -> usize {
        detector_bins(self.frame())
    }

    pub fn dilation_list(&self) -> Result<Vec<usize>> {
        let list: Vec<usize> = self
            .dilations
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("bad dilation {:?}: {e}", t.trim())))
            })
            .collect::<Result<_>>()?;
        if list.is_empty() {
            return Err(Error::Config("dilation list is empty".into()));
        }
        Ok(list)
    }

    /// Code height: the configured value, or the sparsity bound at `k_max`.
    pub fn resolved_measurements(&self) -> Result<usize> {
        if self.measurements > 0 {
            Ok(self.measurements)
        } else {
            required_measurements(self.k_max.max(1), self.bins(), self.c_m)
        }
    }

    /// Sparsity weight: the configured value, or 1.65 / measurements.
    pub fn resolved_alpha(&self, m: usize) -> f64 {
        if self.alpha > 0.0 {
            self.alpha
        } else {
            1.65 / m as f64
        }
    }

    pub fn hyper(&self, m: usize) -> Hyper {
        Hyper { lambda: self.lambda, alpha: self.resolved_alpha(m), t_steps: self.t_steps }
    }

    pub fn obs_config(&self, out_rows: usize) -> Result<ObsConfig> {
        Ok(ObsConfig {
            frame: self.frame(),
            c_b: self.c_b,
            dilations: self.dilation_list()?,
            ratio: self.ratio,
            head_channels: self.head_channels,
            out_rows,
            out_cols: self.angles,
            use_mdcb: self.use_mdcb,
            use_arfw: self.use_arfw,
            use_center_pool: self.use_center_pool,
        })
    }

    pub fn angle_list(&self) -> Vec<f64> {
        default_angles(self.angles)
    }

    pub fn sensing(&self) -> Result<SensingMatrix> {
        make_sensing_matrix(self.resolved_measurements()?, self.bins(), self.sensing_seed)
    }

    pub fn peaks(&self) -> PeakParams {
        PeakParams { rel_threshold: self.peak_rel_threshold, min_distance: self.peak_min_distance }
    }

    pub fn optimizer(&self) -> Result<Optimizer> {
        match self.optimizer.as_str() {
            "sgd" => Ok(Optimizer::sgd(self.learning_rate)),
            "adam" => Ok(Optimizer::adam(self.learning_rate)),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }

    /// Canonical TOML rendering; field order is fixed by the struct, so the
    /// hash below is stable across runs and platforms.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_toml().as_bytes())
    }

    /// Provenance block embedded in every output artifact.
    pub fn provenance(&self) -> Map<String, Value> {
        let mut meta = Map::new();
        meta.insert("config_sha256".into(), json!(self.hash()));
        meta.insert("data_seed".into(), json!(self.data_seed));
        meta.insert("model_seed".into(), json!(self.model_seed));
        meta.insert("sensing_seed".into(), json!(self.sensing_seed));
        meta.insert("train_seed".into(), json!(self.train_seed));
        meta
    }
}
