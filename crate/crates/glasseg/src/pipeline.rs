//! Training loop, prediction, evaluation, and the flat key=value config
//! format backing the CLI.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{
    self, AugmentConfig, SamplePair, MASK_GLASS_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::losses::{overall_loss, LossConfig, LossReport};
use crate::metrics::{self, MetricReport};
use crate::network::{GlassNet, NetConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.001,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 2,
            max_epochs: 10,
            seed: 0,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.power <= 0.0 {
            return Err(Error::Config("base_lr and power must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "momentum must be in [0, 1), weight_decay nonnegative".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size and max_epochs must be at least 1".into(),
            ));
        }
        if self.augment.base_size < 32 || !self.augment.base_size.is_multiple_of(32) {
            return Err(Error::Config(
                "train_size must be a positive multiple of 32".into(),
            ));
        }
        if self.augment.scales.is_empty() || !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return Err(Error::Config("bad augmentation settings".into()));
        }
        Ok(())
    }
}

/// base_lr * (1 - iter/max_iter)^power.
pub fn poly_lr(iter: u64, max_iter: u64, cfg: &TrainConfig) -> Result<f64> {
    if max_iter == 0 || iter > max_iter {
        return Err(Error::Config(format!(
            "poly schedule needs 0 <= iter <= max_iter, got {iter}/{max_iter}"
        )));
    }
    let frac = 1.0 - iter as f64 / max_iter as f64;
    Ok(cfg.base_lr * frac.powf(cfg.power))
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: LossReport,
}

pub struct TrainResult {
    pub log: Vec<StepLog>,
    pub iterations: u64,
    pub checkpoint_path: PathBuf,
}

/// Batch tensors at a common side, masks kept at ground-truth resolution.
fn batch_tensors(samples: &[SamplePair]) -> (ArrayD<f32>, ArrayD<f32>) {
    let (h, w) = samples[0].spatial();
    let b = samples.len();
    let mut images = ArrayD::<f32>::zeros(IxDyn(&[b, 3, h, w]));
    let mut masks = ArrayD::<f32>::zeros(IxDyn(&[b, 1, h, w]));
    for (n, s) in samples.iter().enumerate() {
        for ((c, i, j), &v) in s.image.indexed_iter() {
            images[[n, c, i, j]] = v as f32;
        }
        for ((i, j), &g) in s.mask.indexed_iter() {
            masks[[n, 0, i, j]] = g as u8 as f32;
        }
    }
    (images, masks)
}

fn write_train_log(log: &[StepLog], path: &Path) -> Result<()> {
    let mut csv = String::from(
        "step,lr,total,bce1,iou1,hybrid1,bce2,iou2,hybrid2,bce3,iou3,hybrid3\n",
    );
    for row in log {
        let l = &row.loss.per_level;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.step,
            row.lr,
            row.loss.total,
            l[0].bce,
            l[0].iou,
            l[0].hybrid,
            l[1].bce,
            l[1].iou,
            l[1].hybrid,
            l[2].bce,
            l[2].iou,
            l[2].hybrid,
        ));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

/// Single-worker training: epochs of shuffled minibatches, one scale drawn
/// per batch, per-sample flips, poly-scheduled SGD. Reproducible from the
/// seed. A non-finite loss aborts with a diagnostic snapshot next to the log.
pub fn train(
    corpus: &[SamplePair],
    net_cfg: NetConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainResult> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut net = GlassNet::<f32>::new(net_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size) as u64;
    let max_iter = cfg.max_epochs as u64 * steps_per_epoch;

    let mut log = Vec::with_capacity(max_iter as usize);
    let mut iter = 0u64;
    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    for _epoch in 0..cfg.max_epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let side = cfg.augment.draw_side(&mut rng);
            let batch: Vec<SamplePair> = chunk
                .iter()
                .map(|&i| {
                    let s = &corpus[i];
                    let flipped;
                    let src = if rng.gen_bool(cfg.augment.flip_prob) {
                        flipped = data::flip_horizontal(s);
                        &flipped
                    } else {
                        s
                    };
                    data::resize_pair(src, side)
                })
                .collect();
            let (images, masks) = batch_tensors(&batch);

            let mut fp = net.run(&images, true)?;
            let gt = fp.tape.constant(masks);
            let probs: Vec<_> = fp
                .output
                .level_logits
                .iter()
                .map(|&logit| {
                    let up = fp.tape.upsample_bilinear(logit, side, side);
                    fp.tape.sigmoid(up)
                })
                .collect();
            let loss = overall_loss(&mut fp.tape, &probs, gt, &cfg.loss)?;
            let report = loss.report(&fp.tape);

            if !report.total.is_finite() {
                let snapshot = serde_json::json!({
                    "step": iter,
                    "side": side,
                    "sample_ids": batch.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
                    "loss": report,
                });
                let snap_path = out_dir.join("diagnostic_snapshot.json");
                std::fs::write(&snap_path, snapshot.to_string())?;
                write_train_log(&log, &out_dir.join("train_log.csv"))?;
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {iter}; snapshot at {}",
                    snap_path.display()
                )));
            }

            let lr = poly_lr(iter, max_iter, cfg)?;
            let grads = fp.tape.backward(loss.total);
            let param_grads = fp.param_grads(&grads);
            net.store.sgd_step(
                &param_grads,
                lr as f32,
                cfg.momentum as f32,
                cfg.weight_decay as f32,
            );
            log.push(StepLog {
                step: iter,
                lr,
                loss: report,
            });
            iter += 1;
        }
    }

    write_train_log(&log, &out_dir.join("train_log.csv"))?;
    let checkpoint_path = out_dir.join("checkpoint.bin");
    checkpoint::save(&checkpoint_path, &net, cfg, iter)?;
    Ok(TrainResult {
        log,
        iterations: iter,
        checkpoint_path,
    })
}

/// Eval-mode probability map for one image at its original size.
pub fn predict_image(
    net: &mut GlassNet<f32>,
    image: &ndarray::Array3<f64>,
    side: usize,
) -> Result<Array2<f64>> {
    let (square, restore) = data::prepare_inference(image, side)?;
    let mut input = ArrayD::<f32>::zeros(IxDyn(&[1, 3, side, side]));
    for ((c, i, j), &v) in square.indexed_iter() {
        input[[0, c, i, j]] = v as f32;
    }
    let prob = net.predict(&input)?;
    let flat = Array2::from_shape_fn((side, side), |(i, j)| prob[[0, 0, i, j]] as f64);
    Ok(restore.restore(&flat))
}

/// Write one probability PNG per input image into `out_dir`, named by stem.
pub fn predict(ckpt: &Path, images: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let loaded = checkpoint::load::<f32>(ckpt)?;
    let mut net = loaded.net;
    let side = loaded.train.augment.base_size;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(images.len());
    for path in images {
        let img = data::decode_image(path)?;
        let pred = predict_image(&mut net, &img, side)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("bad file name {}", path.display())))?;
        let out = out_dir.join(format!("{stem}.png"));
        data::probability_to_gray8(&pred).save(&out)?;
        written.push(out);
    }
    Ok(written)
}

/// Image files (png/jpg/jpeg) directly under `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no images under {}", dir.display())));
    }
    Ok(files)
}

fn load_gray_pred(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0
    }))
}

fn load_gray_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0] >= MASK_GLASS_THRESHOLD
    }))
}

/// Score a directory of prediction PNGs against name-matched masks; emits
/// `<out_prefix>.csv` and `<out_prefix>.json`. File order on disk does not
/// matter: pairs are matched and processed sorted by stem.
pub fn eval_command(pred_dir: &Path, gt_dir: &Path, out_prefix: &Path) -> Result<MetricReport> {
    let pred_files = list_images(pred_dir)?;
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for pf in &pred_files {
        let stem = pf
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("bad file name {}", pf.display())))?;
        let gt_path = gt_dir.join(format!("{stem}.png"));
        if !gt_path.is_file() {
            return Err(Error::MissingCounterpart(pf.clone()));
        }
        ids.push(stem.to_string());
        preds.push(load_gray_pred(pf)?);
        gts.push(load_gray_mask(&gt_path)?);
    }
    let report = metrics::evaluate_dataset(&preds, &gts)?;
    write_report(&report, &ids, out_prefix)?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "excluded".into())
}

pub fn write_report(report: &MetricReport, ids: &[String], out_prefix: &Path) -> Result<()> {
    if let Some(parent) = out_prefix.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut csv = String::from("id,iou,wf,mae,ber\n");
    for (id, m) in ids.iter().zip(report.per_image.iter()) {
        csv.push_str(&format!(
            "{id},{},{},{},{}\n",
            m.iou,
            fmt_opt(m.wf),
            m.mae,
            fmt_opt(m.ber)
        ));
    }
    csv.push_str(&format!(
        "mean,{},{},{},{}\n",
        report.mean_iou,
        fmt_opt(report.mean_wf),
        report.mean_mae,
        fmt_opt(report.mean_ber)
    ));
    std::fs::write(out_prefix.with_extension("csv"), csv)?;

    let json = serde_json::json!({
        "ids": ids,
        "report": report,
    });
    std::fs::write(
        out_prefix.with_extension("json"),
        serde_json::to_string_pretty(&json)
            .map_err(|e| Error::Data(format!("report serialization: {e}")))?,
    )?;
    Ok(())
}

/// Flat key=value config text: one pair per line, `#` comments, keys from
/// the documented schema. Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<(NetConfig, TrainConfig)> {
    let mut net = NetConfig::tiny();
    let mut train = TrainConfig::default();

    fn enum_value<T: serde::de::DeserializeOwned>(key: &str, v: &str) -> Result<T> {
        serde_json::from_value(serde_json::Value::String(v.to_string()))
            .map_err(|_| Error::Config(format!("bad value for {key}: {v}")))
    }
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::Config(format!("bad value for {key}: {v}")))
    }
    fn boolean(key: &str, v: &str) -> Result<bool> {
        match v {
            "true" | "1" | "on" => Ok(true),
            "false" | "0" | "off" => Ok(false),
            _ => Err(Error::Config(format!("bad value for {key}: {v}"))),
        }
    }
    fn list4(key: &str, v: &str) -> Result<[usize; 4]> {
        let parts: Vec<usize> = v
            .split(',')
            .map(|p| num(key, p.trim()))
            .collect::<Result<_>>()?;
        parts
            .try_into()
            .map_err(|_| Error::Config(format!("{key} needs 4 comma-separated values")))
    }

    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let (key, v) = (key.trim(), value.trim());
        match key {
            "stage_channels" => {
                net.backbone.stage_channels = list4(key, v)?;
                net.de_out_channels = net.backbone.stage_channels;
            }
            "de_out_channels" => net.de_out_channels = list4(key, v)?,
            "de_branches" => net.de_branches = num(key, v)?,
            "de_variant" => net.de_variant = enum_value(key, v)?,
            "fusion" => net.fusion = enum_value(key, v)?,
            "attention" => net.attention = enum_value(key, v)?,
            "use_channel_recalibration" => net.use_channel_recalibration = boolean(key, v)?,
            "use_interbranch_flow" => net.use_interbranch_flow = boolean(key, v)?,
            "init_seed" => net.init_seed = num(key, v)?,
            "base_lr" => train.base_lr = num(key, v)?,
            "power" => train.power = num(key, v)?,
            "momentum" => train.momentum = num(key, v)?,
            "weight_decay" => train.weight_decay = num(key, v)?,
            "batch_size" => train.batch_size = num(key, v)?,
            "max_epochs" => train.max_epochs = num(key, v)?,
            "seed" => train.seed = num(key, v)?,
            "gamma" => train.loss.gamma = num(key, v)?,
            "lambda" => train.loss.lambda = num(key, v)?,
            "use_iou" => train.loss.use_iou = boolean(key, v)?,
            "train_size" => train.augment.base_size = num(key, v)?,
            "multiscale" => train.augment.multiscale = boolean(key, v)?,
            "flip_prob" => train.augment.flip_prob = num(key, v)?,
            "scales" => {
                train.augment.scales = v
                    .split(',')
                    .map(|p| num(key, p.trim()))
                    .collect::<Result<_>>()?;
            }
            _ => return Err(Error::Config(format!("unknown config key: {key}"))),
        }
    }
    net.validate()?;
    train.validate()?;
    Ok((net, train))
}
