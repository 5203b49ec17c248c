//! Command implementations behind the `sclnet` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sclnet_core::data::{generate_synthetic, scale_variation_stats_by, Dataset};
use sclnet_core::detector::{feature_maps, infer, Detection, LossBreakdown, ModelConfig, Trainer};
use sclnet_core::eval::{evaluate, MetricReport};
use sclnet_core::params::ModelParams;
use sclnet_core::Tensor;

use crate::checkpoint;
use crate::coco::{self, annotation_path};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::image;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const DETECTIONS_FILE: &str = "detections.json";

/// Creates `dir`, refusing a non-empty one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> CliResult<()> {
    if let Ok(mut it) = fs::read_dir(dir) {
        if it.next().is_some() && !force {
            return Err(CliError::Config(format!("output directory {} is not empty (use --force)", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> CliResult<Dataset> {
    let ds = generate_synthetic(&cfg.synth(), cfg.seed)?;
    prepare_out_dir(out, force)?;
    coco::save_dataset(out, &ds)?;
    cfg.echo(out)?;
    log::info!("wrote {} images to {}", ds.samples.len(), out.display());
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub grouping: String,
    pub images: usize,
    pub counted_images: usize,
    pub fraction_gt_2x: f64,
    pub per_image_ratio: Vec<f64>,
}

pub fn stats(cfg: &RunConfig, data: &Path) -> CliResult<StatsReport> {
    let ds = coco::load_annotations(&annotation_path(data), false)?;
    let st = scale_variation_stats_by(&ds, cfg.grouping()?);
    Ok(StatsReport {
        grouping: cfg.stats_grouping.clone(),
        images: ds.samples.len(),
        counted_images: st.per_image_ratio.len(),
        fraction_gt_2x: st.fraction_gt_2x,
        per_image_ratio: st.per_image_ratio,
    })
}

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_contra_feat: f64,
    pub l_contra_label: f64,
    pub l_comple: f64,
    pub l_detect: f64,
    pub l_total: f64,
}

impl LogRecord {
    fn new(step: usize, lr: f64, b: &LossBreakdown) -> LogRecord {
        LogRecord {
            step,
            lr,
            l_cls: b.l_cls,
            l_reg: b.l_reg,
            l_contra_feat: b.l_contra_feat,
            l_contra_label: b.l_contra_label,
            l_comple: b.l_comple,
            l_detect: b.l_detect,
            l_total: b.l_total,
        }
    }
}

/// Checkpoint metadata: the run config plus the resolved class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub num_classes: usize,
    pub steps_done: usize,
    pub config: RunConfig,
}

fn check_trainable(ds: &Dataset) -> CliResult<()> {
    let first = ds.samples.first().ok_or_else(|| CliError::Runtime("dataset has no images".into()))?;
    if let Some(s) = ds.samples.iter().find(|s| (s.width, s.height) != (first.width, first.height)) {
        return Err(CliError::Runtime(format!(
            "image {} is {}x{}, expected {}x{} like the first image",
            s.id, s.width, s.height, first.width, first.height
        )));
    }
    sclnet_core::encoder::check_input_dims(first.height, first.width)?;
    Ok(())
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub model: ModelConfig,
    pub log: Vec<LogRecord>,
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> CliResult<TrainOutcome> {
    let ds = coco::load_annotations(&annotation_path(data), true)?;
    ds.validate()?;
    check_trainable(&ds)?;
    let model = cfg.model(ds.num_categories())?;
    let tcfg = cfg.train()?;
    prepare_out_dir(out, force)?;
    cfg.echo(out)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let f = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut w = BufWriter::new(f);
    let mut trainer = Trainer::new(model.clone(), tcfg.clone())?;
    let mut log = Vec::with_capacity(tcfg.steps);
    let mut io_err = None;
    let res = trainer.fit(&ds, |step, b| {
        let rec = LogRecord::new(step, tcfg.lr_at(step), b);
        let line = serde_json::to_string(&rec).expect("record serialises");
        if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
            io_err.get_or_insert(e);
        }
        if step % 50 == 0 || step + 1 == tcfg.steps {
            log::info!("step {step}: l_total {:.4}", b.l_total);
        }
        log.push(rec);
    });
    if let Some(e) = io_err {
        return Err(CliError::io(&log_path, e));
    }
    res?;
    let meta = CheckpointMeta { num_classes: model.num_classes, steps_done: trainer.step, config: cfg.clone() };
    let meta = serde_json::to_value(&meta).expect("meta serialises");
    checkpoint::save(&out.join(CHECKPOINT_FILE), &trainer.params, meta)?;
    Ok(TrainOutcome { params: trainer.params, model, log })
}

/// Parameters and model config of a checkpoint written by [`train`].
pub fn load_model(path: &Path) -> CliResult<(ModelParams<f32>, ModelConfig)> {
    let (params, meta) = checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| CliError::Runtime(format!("{}: checkpoint metadata: {e}", path.display())))?;
    let model = meta.config.model(meta.num_classes)?;
    let expected = sclnet_core::detector::init_params::<f32>(&model, 0)?;
    expected.check_compatible(&params)?;
    Ok((params, model))
}

/// Per-image detections of a checkpoint over a dataset with pixels.
pub fn detect_all(ds: &Dataset, params: &ModelParams<f32>, model: &ModelConfig, cfg: &RunConfig) -> CliResult<Vec<Vec<Detection>>> {
    let icfg = cfg.infer();
    ds.samples.iter().map(|s| infer(&s.pixels, params, model, &icfg).map_err(CliError::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ar_s: f64,
    pub ar_m: f64,
    pub ar_l: f64,
    pub false_alarm_rate: f64,
    /// Keyed by the category id of the annotation file.
    pub per_category_ap: BTreeMap<String, f64>,
}

pub fn report_json(r: &MetricReport, ds: &Dataset) -> ReportJson {
    ReportJson {
        ap: r.ap,
        ap50: r.ap50,
        ap75: r.ap75,
        ap_s: r.ap_s,
        ap_m: r.ap_m,
        ap_l: r.ap_l,
        ar_s: r.ar_s,
        ar_m: r.ar_m,
        ar_l: r.ar_l,
        false_alarm_rate: r.false_alarm_rate,
        per_category_ap: r.per_category_ap.iter().map(|(&k, &v)| (ds.categories[k].id.to_string(), v)).collect(),
    }
}

pub enum DetectionSource<'a> {
    Checkpoint(&'a Path),
    File(&'a Path),
}

pub fn eval(cfg: &RunConfig, data: &Path, source: DetectionSource<'_>, out: &Path, force: bool) -> CliResult<ReportJson> {
    let with_pixels = matches!(source, DetectionSource::Checkpoint(_));
    let ds = coco::load_annotations(&annotation_path(data), with_pixels)?;
    let opts = cfg.eval()?;
    let dets = match source {
        DetectionSource::File(p) => coco::load_detections(p, &ds)?,
        DetectionSource::Checkpoint(p) => {
            let (params, model) = load_model(p)?;
            detect_all(&ds, &params, &model, cfg)?
        }
    };
    prepare_out_dir(out, force)?;
    cfg.echo(out)?;
    let gts: Vec<_> = ds.samples.iter().map(|s| s.annotations.clone()).collect();
    let report = report_json(&evaluate(&dets, &gts, &opts), &ds);
    coco::write_json(&out.join(DETECTIONS_FILE), &coco::detections_to_coco(&dets, &ds))?;
    coco::write_json(&out.join(METRICS_FILE), &report)?;
    Ok(report)
}

/// Channel mean of `|x|` for a `[C, H, W]` map.
pub fn activation_heatmap(level: &Tensor<f32>) -> Vec<f32> {
    let (c, hw) = (level.dim(0), level.dim(1) * level.dim(2));
    let mut out = vec![0.0f32; hw];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&level.data()[ch * hw..(ch + 1) * hw]) {
            *o += v.abs();
        }
    }
    out.iter_mut().for_each(|v| *v /= c as f32);
    out
}

/// Maps values to 8-bit with a shared `[0, max]` range and upsamples each
/// cell to `stride × stride` pixels.
fn to_gray(map: &[f32], w: usize, h: usize, max: f32, stride: usize) -> Vec<u8> {
    let (ow, oh) = (w * stride, h * stride);
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            let v = map[(y / stride) * w + x / stride];
            out.push(if max > 0.0 { image::quantize(v / max) } else { 0 });
        }
    }
    out
}

/// Writes `level{i}_raw.png` and `level{i}_fused.png` per pyramid level for
/// image `index` of the dataset; returns the written paths.
pub fn visualize(cfg: &RunConfig, data: &Path, checkpoint: &Path, index: usize, out: &Path, force: bool) -> CliResult<Vec<PathBuf>> {
    let ds = coco::load_annotations(&annotation_path(data), true)?;
    let sample = ds
        .samples
        .get(index)
        .ok_or_else(|| CliError::Config(format!("image index {index} outside a dataset of {}", ds.samples.len())))?;
    let (params, model) = load_model(checkpoint)?;
    let maps = feature_maps(&sample.pixels, &params, &model)?;
    prepare_out_dir(out, force)?;
    cfg.echo(out)?;
    let mut written = Vec::new();
    for (i, (raw, fused)) in maps.raw.levels.iter().zip(&maps.fused.levels).enumerate() {
        let (h, w) = (raw.dim(1), raw.dim(2));
        let (a, b) = (activation_heatmap(raw), activation_heatmap(fused));
        // Shared range so raw and fused maps of a level compare directly.
        let max = a.iter().chain(&b).fold(0.0f32, |m, &v| m.max(v));
        let stride = maps.raw.strides[i];
        for (tag, m) in [("raw", &a), ("fused", &b)] {
            let p = out.join(format!("level{i}_{tag}.png"));
            image::write_gray(&p, w * stride, h * stride, &to_gray(m, w, h, max, stride))?;
            written.push(p);
        }
    }
    Ok(written)
}
