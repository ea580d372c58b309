use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use tpis::datasets::{load_index, make_contour_target, synthetic_dataset, DatasetIndex, SampleRecord, Split};
use tpis::evalmetrics::{evaluate, EvalOptions, EvalReport, ImagePredictions, PredictedInstance};
use tpis::imgcore::{load_and_standardize, Raster};
use tpis::instancing::{extract_instances, Detection, InstancingConfig, LabelMap};
use tpis::neuralseg::gradcheck::Perturbation;
use tpis::neuralseg::{
    desk_reference, mean_dice, predict, predict_batch, read_model, train_with, write_model, EpochStats, Model,
    ModelMetadata, NetSpec, TrainSample,
};
use tpis::selftest::{run_selftest, SelftestReport};
use tpis::tenpool::{multiscale_tensor, read_cached, read_sidecar, write_cached, MultiScaleTensor, TensorPoolConfig};

use crate::config::RunConfig;
use crate::overlay::draw_overlay;
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn with_id(id: &str) -> impl Fn(tpis::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("sample {id}: {e}"))
}

pub fn load_manifest(path: &Path) -> Result<DatasetIndex, CliError> {
    let index = load_index(path)?;
    for rec in &index.records {
        if rec.id.is_empty() || rec.id.contains(['/', '\\']) || rec.id == "." || rec.id == ".." {
            return Err(CliError::Input(format!("sample id '{}' cannot name a file", rec.id)));
        }
    }
    Ok(index)
}

/// Cached map and sidecar locations for one sample.
pub fn cache_paths(cache_dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (cache_dir.join(format!("{id}.png")), cache_dir.join(format!("{id}.json")))
}

fn cache_is_current(cache_dir: &Path, id: &str, cfg: &TensorPoolConfig, frame: (usize, usize)) -> bool {
    let (png, side) = cache_paths(cache_dir, id);
    png.is_file()
        && read_sidecar(&side).is_ok_and(|s| s.config == *cfg && (s.height, s.width) == frame)
}

/// Rounds a map to the 16-bit precision of the cache so that fresh and
/// cached inference see identical inputs.
pub fn quantize_map(map: &Raster) -> Raster {
    map.map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PrepSummary {
    pub computed: usize,
    pub skipped: usize,
}

/// Computes and caches the tensor map of every sample; samples whose cache
/// already matches `cfg` are skipped.
pub fn cmd_prep(index: &DatasetIndex, out_dir: &Path, cfg: &TensorPoolConfig) -> Result<PrepSummary, CliError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let frame = index.frame;
    let done: Vec<bool> = index
        .records
        .par_iter()
        .map(|rec| -> Result<bool, CliError> {
            if cache_is_current(out_dir, &rec.id, cfg, frame) {
                return Ok(false);
            }
            let scan = load_and_standardize(&index.resolve(&rec.path), frame.0, frame.1).map_err(with_id(&rec.id))?;
            let mst = multiscale_tensor(&scan, cfg).map_err(with_id(&rec.id))?;
            let (png, side) = cache_paths(out_dir, &rec.id);
            write_cached(&mst, &png, &side).map_err(with_id(&rec.id))?;
            Ok(true)
        })
        .collect::<Result<_, _>>()?;
    let computed = done.iter().filter(|&&d| d).count();
    Ok(PrepSummary {
        computed,
        skipped: done.len() - computed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub model: PathBuf,
    pub history: PathBuf,
    pub epochs: usize,
    pub final_train_loss: Option<f64>,
    /// Mean Dice of predicted contours on the samples used for updates.
    pub train_dice: f64,
    pub trained_ids: Vec<String>,
    pub holdout_ids: Vec<String>,
}

fn load_spec(cfg: &RunConfig, index: &DatasetIndex) -> Result<NetSpec, CliError> {
    let (h, w) = index.frame;
    let n_cat = index.categories.len();
    match &cfg.network.spec {
        None => Ok(desk_reference(n_cat, h, w, cfg.network.widths)?),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let spec: NetSpec =
                serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            if spec.categories != n_cat {
                return Err(CliError::Input(format!(
                    "{}: spec has {} categories, manifest has {n_cat}",
                    p.display(),
                    spec.categories
                )));
            }
            spec.infer_shapes(h, w)?;
            Ok(spec)
        }
    }
}

/// History CSV written beside a model file.
pub fn history_path(model_out: &Path) -> PathBuf {
    model_out.with_extension("history.csv")
}

fn write_history(path: &Path, history: &[EpochStats]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| CliError::Input(format!("{}: {e}", path.display()));
    w.write_record(["epoch", "train_loss", "validation_loss"]).map_err(fail)?;
    for s in history {
        let val = s.validation_loss.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([s.epoch.to_string(), s.train_loss.to_string(), val]).map_err(fail)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Trains on the cached maps of the train split and writes the model and
/// its loss history.
pub fn cmd_train(index: &DatasetIndex, cache_dir: &Path, model_out: &Path, cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let pool_cfg = cfg.tensor_pool();
    let records: Vec<&SampleRecord> = index.split(Split::Train).collect();
    if records.is_empty() {
        return Err(CliError::Input("manifest has no train records".into()));
    }
    let missing: Vec<&str> = records
        .iter()
        .filter(|r| !cache_is_current(cache_dir, &r.id, &pool_cfg, index.frame))
        .map(|r| r.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Input(format!(
            "no current cache entry in {} for: {}; run `tpis prep` with the same tensor settings",
            cache_dir.display(),
            missing.join(", ")
        )));
    }
    let samples: Vec<TrainSample> = records
        .par_iter()
        .map(|rec| {
            let (png, side) = cache_paths(cache_dir, &rec.id);
            let mst = read_cached(&png, &side).map_err(with_id(&rec.id))?;
            let target = make_contour_target(index, rec, cfg.train.contour_thickness).map_err(with_id(&rec.id))?;
            Ok(TrainSample { input: mst.map, target })
        })
        .collect::<Result<_, CliError>>()?;

    let spec = load_spec(cfg, index)?;
    let tc = cfg.train_config();
    let mut diverged = false;
    let outcome = train_with(&spec, &samples, &tc, |s, _| {
        log::info!("epoch {}: train loss {:.6} validation loss {:?}", s.epoch, s.train_loss, s.validation_loss);
        diverged = !s.train_loss.is_finite();
        !diverged
    })?;
    if diverged {
        return Err(CliError::Check("training loss became non-finite".into()));
    }

    let trained_maps: Vec<Raster> = outcome.trained.iter().map(|&i| samples[i].input.clone()).collect();
    let preds = predict_batch(&spec, &outcome.params, &trained_maps)?;
    let truth: Vec<LabelMap> = outcome.trained.iter().map(|&i| samples[i].target.clone()).collect();
    let train_dice = mean_dice(&preds, &truth, index.categories.len())?;

    let model = Model {
        spec,
        params: outcome.params,
        metadata: ModelMetadata {
            seed: tc.seed,
            epochs: outcome.history.len(),
            train: tc,
            tensor_pool: pool_cfg,
            frame: [index.frame.0, index.frame.1],
            categories: (1..=index.categories.len() as u16)
                .map(|c| index.categories.name(c).unwrap_or_default().to_string())
                .collect(),
        },
    };
    if let Some(dir) = model_out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    write_model(&model, model_out)?;
    let hist = history_path(model_out);
    write_history(&hist, &outcome.history)?;
    Ok(TrainSummary {
        model: model_out.to_path_buf(),
        history: hist,
        epochs: outcome.history.len(),
        final_train_loss: outcome.history.last().map(|s| s.train_loss),
        train_dice,
        trained_ids: outcome.trained.iter().map(|&i| records[i].id.clone()).collect(),
        holdout_ids: outcome.holdout.iter().map(|&i| records[i].id.clone()).collect(),
    })
}

/// What `infer` runs on.
#[derive(Debug, Clone)]
pub enum InferSource {
    Manifest {
        index: DatasetIndex,
        /// `None` selects every record.
        split: Option<Split>,
        cache: Option<PathBuf>,
    },
    Images(Vec<PathBuf>),
}

#[derive(Debug, Clone, Default)]
pub struct InferOptions {
    /// Write one PNG per detection mask next to the predictions file.
    pub masks: bool,
    /// Directory for overlay renderings.
    pub overlays: Option<PathBuf>,
}

struct InferItem {
    id: String,
    image: PathBuf,
    cached: Option<(PathBuf, PathBuf)>,
}

fn detect(model: &Model, map: &Raster, cfg: &InstancingConfig) -> Result<Vec<Detection>, CliError> {
    // A map without any structure carries no contours to label.
    if map.data().iter().all(|&v| v == 0.0) {
        return Ok(Vec::new());
    }
    let lm = predict(&model.spec, &model.params, map)?;
    Ok(extract_instances(&lm, cfg))
}

/// Runs scans through the model and instance extraction; writes the
/// predictions JSON to `out` and returns it.
pub fn cmd_infer(
    model_path: &Path,
    source: &InferSource,
    out: &Path,
    inst: &InstancingConfig,
    opts: &InferOptions,
) -> Result<Vec<ImagePredictions>, CliError> {
    inst.validate()?;
    let model = read_model(model_path).map_err(|e| CliError::Input(format!("{}: {e}", model_path.display())))?;
    let pool_cfg = model.metadata.tensor_pool;
    let [fh, fw] = model.metadata.frame;
    let items: Vec<InferItem> = match source {
        InferSource::Manifest { index, split, cache } => {
            if index.frame != (fh, fw) {
                return Err(CliError::Input(format!(
                    "manifest frame {:?} differs from the model's {fh}x{fw}",
                    index.frame
                )));
            }
            index
                .records
                .iter()
                .filter(|r| split.is_none_or(|s| r.split == s))
                .map(|r| InferItem {
                    id: r.id.clone(),
                    image: index.resolve(&r.path),
                    cached: cache
                        .as_ref()
                        .filter(|dir| cache_is_current(dir, &r.id, &pool_cfg, (fh, fw)))
                        .map(|dir| cache_paths(dir, &r.id)),
                })
                .collect()
        }
        InferSource::Images(paths) => paths
            .iter()
            .map(|p| InferItem {
                id: p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                image: p.clone(),
                cached: None,
            })
            .collect(),
    };

    let out_dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "predictions".into());
    let mask_rel = PathBuf::from(format!("{stem}_masks"));
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    if opts.masks {
        fs::create_dir_all(out_dir.join(&mask_rel)).map_err(|e| io_err(&out_dir, e))?;
    }
    if let Some(dir) = &opts.overlays {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }

    let preds: Vec<ImagePredictions> = items
        .par_iter()
        .map(|item| {
            let ctx = with_id(&item.id);
            let map = match &item.cached {
                Some((png, side)) => read_cached(png, side).map_err(&ctx)?.map,
                None => {
                    let scan = load_and_standardize(&item.image, fh, fw).map_err(&ctx)?;
                    let MultiScaleTensor { map, .. } = multiscale_tensor(&scan, &pool_cfg).map_err(&ctx)?;
                    quantize_map(&map)
                }
            };
            let dets = detect(&model, &map, inst)?;
            let mut listed = Vec::with_capacity(dets.len());
            for (k, d) in dets.iter().enumerate() {
                let mask_png = if opts.masks {
                    let rel = mask_rel.join(format!("{}_{k}.png", item.id));
                    tpis::datasets::save_mask(&d.mask.mask, &out_dir.join(&rel)).map_err(&ctx)?;
                    Some(rel)
                } else {
                    None
                };
                listed.push(PredictedInstance {
                    category: model
                        .metadata
                        .categories
                        .get(usize::from(d.category) - 1)
                        .cloned()
                        .unwrap_or_else(|| d.category.to_string()),
                    score: d.score,
                    bbox: d.bbox.to_array(),
                    mask_png,
                });
            }
            if let Some(dir) = &opts.overlays {
                let scan = load_and_standardize(&item.image, fh, fw).map_err(&ctx)?;
                let path = dir.join(format!("{}.png", item.id));
                draw_overlay(&scan, &dets)
                    .save(&path)
                    .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            }
            Ok(ImagePredictions {
                id: item.id.clone(),
                detections: listed,
            })
        })
        .collect::<Result<_, CliError>>()?;

    let json = serde_json::to_string_pretty(&preds).expect("predictions serialize");
    fs::write(out, json + "\n").map_err(|e| io_err(out, e))?;
    Ok(preds)
}

pub fn read_predictions(path: &Path) -> Result<Vec<ImagePredictions>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// JSON and text-table report paths derived from `out`.
pub fn report_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.with_extension("json"), out.with_extension("txt"))
}

/// Scores a predictions file against the manifest and writes the report
/// as JSON and as a text table.
pub fn cmd_eval(predictions: &Path, index: &DatasetIndex, out: &Path, opts: &EvalOptions) -> Result<EvalReport, CliError> {
    let preds = read_predictions(predictions)?;
    let root = predictions.parent().unwrap_or(Path::new("."));
    let report = evaluate(&preds, index, root, opts)?;
    let (json_path, table_path) = report_paths(out);
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&json_path, json + "\n").map_err(|e| io_err(&json_path, e))?;
    fs::write(&table_path, report.to_table()).map_err(|e| io_err(&table_path, e))?;
    Ok(report)
}

pub fn cmd_selftest(perturb: Perturbation) -> SelftestReport {
    run_selftest(perturb)
}

/// Writes a synthetic corpus and returns its manifest path.
pub fn cmd_synth(out: &Path, seed: u64, count: usize, dims: (usize, usize), categories: usize) -> Result<PathBuf, CliError> {
    synthetic_dataset(seed, count, dims, categories, out)?;
    Ok(out.join("manifest.jsonl"))
}
