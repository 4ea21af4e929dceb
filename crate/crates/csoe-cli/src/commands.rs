//! Subcommand implementations. Every command is a pure function of the
//! experiment config and its seeds: reruns produce byte-identical artifacts,
//! and each artifact embeds the config hash plus seeds for provenance.

use std::fs;
use std::path::{Path, PathBuf};

use csoe::ablation::{ablation_run, rows_to_csv, AblationSetup, AblationToggles};
use csoe::gradcheck::{run_all, GradcheckConfig};
use csoe::io::{
    self, provenance_comment, read_annotations, read_array2, read_sensing, write_annotations,
    write_array2, write_json, write_sensing, write_sinogram,
};
use csoe::metrics::{density_group_analysis, match_points, precision_recall_f1, MatchResult};
use csoe::radon::{extract_peaks, fbp_inverse, radon_forward, PointSet, Sinogram};
use csoe::recovery::{ista_solve, lipschitz};
use csoe::scene::{derive_seed, synth_batch, Scene};
use csoe::sensing::encode;
use csoe::training::{
    count_estimate, decode, load_model, save_model, stats_to_csv, train_loop, ModelParams,
    ReconMode, StepStats, TrainConfig, TrainOptions,
};
use csoe::{Error, Result};
use ndarray::Array2;
use serde_json::{json, Map, Value};

use crate::config::ExperimentConfig;

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source: e }
}

fn parse_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), detail: detail.into() }
}

// ---------------------------------------------------------------------------
// print-config

pub fn cmd_print_config(cfg: &ExperimentConfig) -> Result<()> {
    print!("{}", cfg.canonical_toml());
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data

/// Synthesize `count` scenes into `out`: one binary image and one `x,y`
/// annotation file per scene, indexed by `manifest.json`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, count: usize, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let sensing = cfg.sensing()?;
    let angles = cfg.angle_list();
    let scenes = synth_batch(
        &sensing,
        &angles,
        cfg.data_seed,
        count,
        cfg.frame(),
        (cfg.k_min, cfg.k_max),
        (cfg.sigma_min, cfg.sigma_max),
        cfg.min_sep,
    )?;
    let meta = cfg.provenance();
    let mut entries = Vec::with_capacity(count);
    for (i, scene) in scenes.iter().enumerate() {
        let image = format!("scene_{i:04}.bin");
        let annotations = format!("scene_{i:04}.csv");
        write_array2(&out.join(&image), &scene.image, &meta)?;
        write_annotations(&out.join(&annotations), &scene.truth)?;
        entries.push(json!({
            "image": image,
            "annotations": annotations,
            "k": scene.truth.len(),
        }));
    }
    let manifest = json!({
        "frame": [cfg.frame_h, cfg.frame_w],
        "count": count,
        "entries": entries,
        "provenance": meta,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {count} scene(s) to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// data-directory loading shared by encode / train / eval

pub struct LoadedScene {
    /// File stem, e.g. `scene_0003`.
    pub name: String,
    pub image: Array2<f64>,
    pub truth: PointSet,
}

fn manifest_frame(path: &Path, manifest: &Value) -> Result<(usize, usize)> {
    let arr = manifest
        .get("frame")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| parse_err(path, "missing frame [h, w]"))?;
    let h = arr[0].as_u64().ok_or_else(|| parse_err(path, "frame height is not an integer"))?;
    let w = arr[1].as_u64().ok_or_else(|| parse_err(path, "frame width is not an integer"))?;
    Ok((h as usize, w as usize))
}

/// Read an image in either format: the native binary array, or an 8-bit
/// grayscale PNG mapped linearly onto `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Array2<f64>> {
    let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let img = image::open(path)
            .map_err(|e| parse_err(path, format!("png decode: {e}")))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Array2::from_shape_fn((h, w), |(r, c)| {
            img.get_pixel(c as u32, r as u32).0[0] as f64 / 255.0
        }))
    } else {
        read_array2(path).map(|(arr, _)| arr)
    }
}

/// Load every scene listed in a data directory's `manifest.json`.
pub fn load_data_dir(dir: &Path) -> Result<(Vec<LoadedScene>, (usize, usize))> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Value = io::read_json(&manifest_path)?;
    let frame = manifest_frame(&manifest_path, &manifest)?;
    let entries = manifest
        .get("entries")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(&manifest_path, "missing entries array"))?;
    let mut scenes = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let field = |key: &str| {
            entry
                .get(key)
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| parse_err(&manifest_path, format!("entry {i} lacks {key:?}")))
        };
        let image_name = field("image")?;
        let image_path = dir.join(&image_name);
        let image = read_image(&image_path)?;
        if image.dim() != frame {
            return Err(parse_err(
                &image_path,
                format!("image is {:?}, manifest frame is {frame:?}", image.dim()),
            ));
        }
        let truth = read_annotations(&dir.join(field("annotations")?), frame)?;
        let name = Path::new(&image_name)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(&image_name)
            .to_owned();
        scenes.push(LoadedScene { name, image, truth });
    }
    Ok((scenes, frame))
}

fn check_frame(cfg: &ExperimentConfig, frame: (usize, usize)) -> Result<()> {
    if frame != cfg.frame() {
        return Err(Error::Config(format!(
            "data frame {frame:?} does not match configured frame {:?}",
            cfg.frame()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// encode

/// Project each scene's annotations to a sinogram and compress it with the
/// seeded sensing matrix. Writes `sensing.bin`, per-scene `.sino` / `.codes`
/// files, and `encode_manifest.json`.
pub fn cmd_encode(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let (scenes, frame) = load_data_dir(data)?;
    check_frame(cfg, frame)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let sensing = cfg.sensing()?;
    let angles = cfg.angle_list();
    let meta = cfg.provenance();
    write_sensing(&out.join("sensing.bin"), &sensing, &meta)?;
    let mut code_meta = meta.clone();
    code_meta.insert("angles".into(), json!(angles));
    code_meta.insert("frame".into(), json!([frame.0, frame.1]));
    let mut entries = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let sino = radon_forward(&s.truth, &angles)?;
        let codes = encode(&sensing, sino.values.view())?;
        let sino_name = format!("{}.sino", s.name);
        let codes_name = format!("{}.codes", s.name);
        write_sinogram(&out.join(&sino_name), &sino, &meta)?;
        write_array2(&out.join(&codes_name), &codes, &code_meta)?;
        entries.push(json!({
            "sinogram": sino_name,
            "codes": codes_name,
            "k": s.truth.len(),
        }));
    }
    let manifest = json!({
        "frame": [frame.0, frame.1],
        "sensing": "sensing.bin",
        "count": scenes.len(),
        "entries": entries,
        "provenance": meta,
    });
    write_json(&out.join("encode_manifest.json"), &manifest)?;
    println!("encoded {} scene(s) to {}", scenes.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// decode

pub struct DecodeArgs {
    pub model: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub codes: Option<PathBuf>,
    pub sensing: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Points as `[x, y]` pairs (column, row) for the output JSON.
fn points_xy(points: &PointSet) -> Vec<Value> {
    points.points.iter().map(|&(r, c)| json!([c, r])).collect()
}

/// Recover head positions either from an image through a trained model, or
/// from stored codes through the iterative oracle solver.
pub fn cmd_decode(cfg: &ExperimentConfig, args: &DecodeArgs) -> Result<()> {
    let (points, estimate, frame) = match (&args.model, &args.image, &args.codes, &args.sensing) {
        (Some(model_path), Some(image_path), None, None) => {
            let (model, _) = load_model(model_path)?;
            let image = read_image(image_path)?;
            if image.dim() != model.obs_cfg.frame {
                return Err(Error::Domain(format!(
                    "image is {:?}, model expects {:?}",
                    image.dim(),
                    model.obs_cfg.frame
                )));
            }
            let decoded = decode(&model, &image, &cfg.peaks())?;
            let estimate = count_estimate(&decoded.sinogram.values);
            (decoded.points, estimate, model.obs_cfg.frame)
        }
        (None, None, Some(codes_path), Some(sensing_path)) => {
            let (codes, header) = read_array2(codes_path)?;
            let angles: Vec<f64> = header
                .get("angles")
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .ok_or_else(|| parse_err(codes_path, "missing angle list"))?;
            let frame = manifest_frame(codes_path, &header)?;
            let (sensing, _) = read_sensing(sensing_path)?;
            if codes.nrows() != sensing.m() || codes.ncols() != angles.len() {
                return Err(Error::Domain(format!(
                    "codes are {:?}, sensing matrix gives {} rows and header {} angles",
                    codes.dim(),
                    sensing.m(),
                    angles.len()
                )));
            }
            let l = lipschitz(sensing.d.view())?;
            let mut a_hat = Array2::<f64>::zeros((sensing.n(), codes.ncols()));
            for (j, mut col) in a_hat.columns_mut().into_iter().enumerate() {
                let rec =
                    ista_solve(sensing.d.view(), codes.column(j), cfg.lambda, cfg.ista_iters, l)?;
                col.assign(&rec);
            }
            let estimate = count_estimate(&a_hat);
            let sino = Sinogram { values: a_hat, angles, frame };
            let map = fbp_inverse(&sino)?;
            let peaks = cfg.peaks();
            let points = extract_peaks(&map, peaks.rel_threshold, peaks.min_distance)?;
            (points, estimate, frame)
        }
        _ => {
            return Err(Error::Config(
                "decode takes either --model with --image, or --codes with --sensing".into(),
            ))
        }
    };
    let payload = json!({
        "frame": [frame.0, frame.1],
        "count": points.len(),
        "count_estimate": estimate,
        "points": points_xy(&points),
        "provenance": cfg.provenance(),
    });
    match &args.out {
        Some(path) => write_json(path, &payload)?,
        None => println!("{payload:#}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

/// Rebuild full training scenes from stored images and annotations.
fn rebuild_scenes(
    loaded: &[LoadedScene],
    sensing: &csoe::sensing::SensingMatrix,
    angles: &[f64],
) -> Result<Vec<Scene>> {
    loaded
        .iter()
        .map(|s| {
            let sinogram = radon_forward(&s.truth, angles)?;
            let code = encode(sensing, sinogram.values.view())?;
            Ok(Scene { image: s.image.clone(), truth: s.truth.clone(), sinogram, code })
        })
        .collect()
}

/// Rows already logged by the run a checkpoint came from; `#` comments and
/// the header are skipped, rows at or past `before` are dropped.
fn read_log_rows(path: &Path, before: usize) -> Result<Vec<StepStats>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("step,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(parse_err(path, format!("line {}: expected 7 fields", i + 1)));
        }
        let num = |idx: usize| {
            fields[idx]
                .parse::<f64>()
                .map_err(|e| parse_err(path, format!("line {}: {e}", i + 1)))
        };
        let step = fields[0]
            .parse::<usize>()
            .map_err(|e| parse_err(path, format!("line {}: {e}", i + 1)))?;
        if step >= before {
            continue;
        }
        rows.push(StepStats {
            step,
            total: num(1)?,
            l2: num(2)?,
            l1: num(3)?,
            grad_obs: num(4)?,
            grad_lista: num(5)?,
            grad_d: num(6)?,
        });
    }
    Ok(rows)
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    data: &Path,
    model_out: &Path,
    log: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let (loaded, frame) = load_data_dir(data)?;
    check_frame(cfg, frame)?;
    if loaded.is_empty() {
        return Err(Error::Config(format!("{} holds no scenes", data.display())));
    }
    let sensing = cfg.sensing()?;
    let m = sensing.m();
    let angles = cfg.angle_list();
    let scenes = rebuild_scenes(&loaded, &sensing, &angles)?;
    let (mut model, start_step, mut rows) = match resume {
        None => {
            let model = ModelParams::init(cfg.obs_config(m)?, sensing, cfg.hyper(m), cfg.model_seed)?;
            (model, 0, Vec::new())
        }
        Some(ckpt) => {
            let (model, manifest) = load_model(ckpt)?;
            if model.obs_cfg != cfg.obs_config(m)? {
                return Err(Error::Config(format!(
                    "checkpoint {} was built for a different architecture than the config",
                    ckpt.display()
                )));
            }
            let step = manifest
                .get("step")
                .and_then(Value::as_u64)
                .ok_or_else(|| parse_err(ckpt, "manifest lacks a step count"))?
                as usize;
            if step > cfg.steps {
                return Err(Error::Config(format!(
                    "checkpoint is at step {step}, past the configured {} steps",
                    cfg.steps
                )));
            }
            let rows = read_log_rows(log, step)?;
            (model, step, rows)
        }
    };
    let mut opt = cfg.optimizer()?;
    let train_cfg = TrainConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        seed: cfg.train_seed,
        checkpoint_every: cfg.checkpoint_every,
        checkpoint_path: Some(model_out.to_path_buf()),
        log_path: None,
        manifest_extra: cfg.provenance(),
        options: TrainOptions { mode: ReconMode::Lista, freeze_d: cfg.freeze_dictionary },
    };
    rows.extend(train_loop(&mut model, &scenes, &mut opt, &train_cfg, start_step)?);
    let mut extra = cfg.provenance();
    extra.insert("step".into(), json!(cfg.steps));
    save_model(model_out, &model, &extra)?;
    let text = format!("{}{}", provenance_comment(&cfg.provenance()), stats_to_csv(&rows));
    io::atomic_write(log, text.as_bytes())?;
    let last = rows.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "trained steps {start_step}..{}; final loss {last:.6}; model -> {}, log -> {}",
        cfg.steps,
        model_out.display(),
        log.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

struct EvalRow {
    name: String,
    gt: usize,
    pred: usize,
    estimate: f64,
    mr: MatchResult,
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    model_path: &Path,
    data: &Path,
    out_prefix: &Path,
    density_groups: Option<usize>,
) -> Result<()> {
    let (model, _) = load_model(model_path)?;
    let (loaded, frame) = load_data_dir(data)?;
    if frame != model.obs_cfg.frame {
        return Err(Error::Config(format!(
            "data frame {frame:?} does not match model frame {:?}",
            model.obs_cfg.frame
        )));
    }
    if loaded.is_empty() {
        return Err(Error::Config(format!("{} holds no scenes", data.display())));
    }
    let peaks = cfg.peaks();
    let threshold = cfg.eval_threshold;
    let mut rows = Vec::with_capacity(loaded.len());
    let mut pairs = Vec::with_capacity(loaded.len());
    for s in &loaded {
        let decoded = decode(&model, &s.image, &peaks)?;
        let mr = match_points(&decoded.points, &s.truth, threshold)?;
        rows.push(EvalRow {
            name: s.name.clone(),
            gt: s.truth.len(),
            pred: decoded.points.len(),
            estimate: count_estimate(&decoded.sinogram.values),
            mr,
        });
        pairs.push((s.truth.clone(), decoded.points));
    }

    let mut csv = provenance_comment(&cfg.provenance());
    csv.push_str("image,gt,pred,count_estimate,tp,fp,missed,precision,recall,f1\n");
    let mut micro = MatchResult { tp: 0, fp: 0, missed: 0, pairs: Vec::new() };
    let (mut macro_p, mut macro_r, mut macro_f1) = (0.0, 0.0, 0.0);
    for row in &rows {
        let (p, r, f1) = precision_recall_f1(&row.mr);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.name, row.gt, row.pred, row.estimate, row.mr.tp, row.mr.fp, row.mr.missed, p, r, f1
        ));
        micro.tp += row.mr.tp;
        micro.fp += row.mr.fp;
        micro.missed += row.mr.missed;
        macro_p += p;
        macro_r += r;
        macro_f1 += f1;
    }
    let count = rows.len() as f64;
    let (micro_p, micro_r, micro_f1) = precision_recall_f1(&micro);
    let gt_counts: Vec<f64> = rows.iter().map(|r| r.gt as f64).collect();
    let pred_counts: Vec<f64> = rows.iter().map(|r| r.pred as f64).collect();
    let estimates: Vec<f64> = rows.iter().map(|r| r.estimate).collect();
    let (mae, rmse) = csoe::metrics::mae_rmse(&gt_counts, &pred_counts)?;
    let (mae_integral, rmse_integral) = csoe::metrics::mae_rmse(&gt_counts, &estimates)?;

    let csv_path = out_prefix.with_extension("csv");
    let json_path = out_prefix.with_extension("json");
    io::atomic_write(&csv_path, csv.as_bytes())?;
    let summary = json!({
        "threshold": threshold,
        "images": rows.len(),
        "micro": { "precision": micro_p, "recall": micro_r, "f1": micro_f1,
                   "tp": micro.tp, "fp": micro.fp, "missed": micro.missed },
        "macro": { "precision": macro_p / count, "recall": macro_r / count, "f1": macro_f1 / count },
        "mae": mae,
        "rmse": rmse,
        "mae_integral": mae_integral,
        "rmse_integral": rmse_integral,
        "provenance": cfg.provenance(),
    });
    write_json(&json_path, &summary)?;

    if let Some(groups) = density_groups {
        let table = density_group_analysis(&pairs, groups, threshold)?;
        let mut csv = provenance_comment(&cfg.provenance());
        csv.push_str("group,size,mean_count,mean_f1\n");
        for (g, row) in table.iter().enumerate() {
            csv.push_str(&format!("{g},{},{},{}\n", row.len, row.mean_count, row.mean_f1));
        }
        let density_path = out_prefix.with_extension("density.csv");
        io::atomic_write(&density_path, csv.as_bytes())?;
    }
    println!(
        "evaluated {} image(s) at threshold {threshold}: micro F1 {micro_f1:.4}, MAE {mae:.4}, RMSE {rmse:.4}",
        rows.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

/// Run the gradient verification suite, print one line per rule, and fail
/// with a numeric error when any rule is out of tolerance.
pub fn cmd_gradcheck(quick: bool) -> Result<()> {
    let mut gc = GradcheckConfig::default();
    if quick {
        gc.instances = 10;
        gc.cosine_instances = 20;
    }
    let reports = run_all(&gc)?;
    let mut failed = 0;
    for report in &reports {
        println!("{report}");
        if !report.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        Err(Error::Numeric(format!("{failed} gradient rule(s) out of tolerance")))
    } else {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// ablate

/// Parse a toggle set such as "csoe,mdcb,cp"; "none" disables everything.
fn parse_toggles(spec: &str) -> Result<AblationToggles> {
    let mut t = AblationToggles { csoe: false, mdcb: false, arfw: false, center_pool: false };
    if spec.trim() == "none" {
        return Ok(t);
    }
    for token in spec.split(',') {
        match token.trim() {
            "csoe" => t.csoe = true,
            "mdcb" => t.mdcb = true,
            "arfw" => t.arfw = true,
            "cp" | "center-pool" => t.center_pool = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown toggle {other:?}; expected csoe, mdcb, arfw, cp, or none"
                )))
            }
        }
    }
    Ok(t)
}

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    train_count: usize,
    eval_count: usize,
    out: &Path,
    toggle_specs: &[String],
) -> Result<()> {
    let toggles = if toggle_specs.is_empty() {
        AblationToggles::all_valid()
    } else {
        toggle_specs.iter().map(|s| parse_toggles(s)).collect::<Result<_>>()?
    };
    let sensing = cfg.sensing()?;
    let m = sensing.m();
    let setup = AblationSetup {
        frame: cfg.frame(),
        r: cfg.angles,
        sensing: sensing.clone(),
        c_b: cfg.c_b,
        dilations: cfg.dilation_list()?,
        ratio: cfg.ratio,
        head_channels: cfg.head_channels,
        hyper: cfg.hyper(m),
        model_seed: cfg.model_seed,
        train_seed: cfg.train_seed,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.learning_rate,
        threshold: cfg.eval_threshold,
        peaks: cfg.peaks(),
    };
    let angles = cfg.angle_list();
    let synth = |stream: u64, count: usize| {
        synth_batch(
            &sensing,
            &angles,
            derive_seed(cfg.data_seed, stream),
            count,
            cfg.frame(),
            (cfg.k_min, cfg.k_max),
            (cfg.sigma_min, cfg.sigma_max),
            cfg.min_sep,
        )
    };
    let train_scenes = synth(0, train_count)?;
    let eval_scenes = synth(1, eval_count)?;
    let rows = ablation_run(&setup, &toggles, &train_scenes, &eval_scenes)?;
    let table = rows_to_csv(&rows);
    let text = format!("{}{}", provenance_comment(&cfg.provenance()), table);
    io::atomic_write(out, text.as_bytes())?;
    print!("{table}");
    println!("wrote {} row(s) to {}", rows.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

/// Merge CSV artifacts into one JSON summary: per-file row counts and
/// mean/min/max for every numeric column. `#` comment lines are skipped.
pub fn cmd_report(cfg: &ExperimentConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one --inputs file".into()));
    }
    let mut tables = Map::new();
    for path in inputs {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| parse_err(path, e.to_string()))?
            .clone();
        let mut stats: Vec<Option<(f64, f64, f64, usize)>> = vec![None; headers.len()];
        let mut rows = 0usize;
        for record in reader.records() {
            let record = record.map_err(|e| parse_err(path, e.to_string()))?;
            rows += 1;
            for (i, field) in record.iter().enumerate() {
                if let Ok(v) = field.parse::<f64>() {
                    let entry = stats[i].get_or_insert((0.0, f64::INFINITY, f64::NEG_INFINITY, 0));
                    entry.0 += v;
                    entry.1 = entry.1.min(v);
                    entry.2 = entry.2.max(v);
                    entry.3 += 1;
                }
            }
        }
        let mut columns = Map::new();
        for (name, stat) in headers.iter().zip(&stats) {
            if let Some((sum, min, max, n)) = stat {
                columns.insert(
                    name.to_string(),
                    json!({ "mean": sum / *n as f64, "min": min, "max": max, "count": n }),
                );
            }
        }
        let file_name = path
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("input")
            .to_string();
        tables.insert(file_name, json!({ "rows": rows, "columns": columns }));
    }
    let names: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
    let summary = json!({
        "inputs": names,
        "tables": tables,
        "provenance": cfg.provenance(),
    });
    write_json(out, &summary)?;
    println!("merged {} file(s) into {}", inputs.len(), out.display());
    Ok(())
}
