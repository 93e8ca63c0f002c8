//! Image-quality metrics, reports, paired-fraction sweeps and image dumps.

mod images;
mod metrics;

pub use images::{error_map, GrayImage, DIFFICULTY_SCALE, ERROR_MAP_SCALE};
pub use metrics::{
    gaussian_kernel, mse, mse_masked, psnr, ssim, ssim_map, ssim_masked, ssim_window_size, Psnr, DYNAMIC_RANGE,
    SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};

use crate::difficulty::compute_difficulty_map;
use crate::error::{invalid, Result};
use crate::nets::NetBundle;
use crate::phantom_data::{DatasetSplit, MultimodalSample};
use crate::trainer::{predict_samples, train_stage1, train_stage2, Batch, TrainConfig};
use autograd::Graph;
use ndarray::{Array2, Axis, Ix2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Restrict MSE/PSNR to foreground pixels and SSIM to windows centred on
    /// foreground.
    pub foreground_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub patient_id: u32,
    pub slice_id: u32,
    pub ssim: f64,
    pub psnr: Psnr,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub checkpoint_id: String,
    pub split_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub mean_ssim: f64,
    /// Mean over finite values; `Identical` only when every sample is.
    pub mean_psnr: Psnr,
    pub mean_mse: f64,
    pub identical_count: usize,
    pub meta: ReportMeta,
}

/// Scores predictions against the targets of `samples`.
pub fn evaluate_predictions(
    predictions: &[Array2<f32>],
    samples: &[MultimodalSample],
    meta: ReportMeta,
    opts: EvalOptions,
) -> Result<MetricReport> {
    if samples.is_empty() || predictions.len() != samples.len() {
        return Err(invalid(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    let per: Vec<SampleMetrics> = predictions
        .par_iter()
        .zip(samples)
        .map(|(p, s)| {
            let y = s.target.as_ref().ok_or_else(|| invalid("evaluation samples need targets"))?;
            let (ssim_v, mse_v) = if opts.foreground_only {
                (
                    ssim_masked(y.view(), p.view(), &s.foreground_mask)?,
                    mse_masked(y.view(), p.view(), &s.foreground_mask)?,
                )
            } else {
                (ssim(y.view(), p.view())?, mse(y.view(), p.view())?)
            };
            Ok(SampleMetrics {
                patient_id: s.patient_id,
                slice_id: s.slice_id,
                ssim: ssim_v,
                psnr: Psnr::from_mse(mse_v),
                mse: mse_v,
            })
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let finite: Vec<f64> = per.iter().filter_map(|m| m.psnr.finite()).collect();
    Ok(MetricReport {
        mean_ssim: per.iter().map(|m| m.ssim).sum::<f64>() / n,
        mean_mse: per.iter().map(|m| m.mse).sum::<f64>() / n,
        mean_psnr: if finite.is_empty() {
            Psnr::Identical
        } else {
            Psnr::Finite(finite.iter().sum::<f64>() / finite.len() as f64)
        },
        identical_count: per.len() - finite.len(),
        samples: per,
        meta,
    })
}

pub fn evaluate(
    model: &NetBundle<f32>,
    samples: &[MultimodalSample],
    meta: ReportMeta,
    opts: EvalOptions,
) -> Result<MetricReport> {
    evaluate_predictions(&predict_samples(model, samples)?, samples, meta, opts)
}

impl MetricReport {
    /// Per-sample rows; the PSNR column holds a number or `identical`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["patient_id", "slice_id", "ssim", "psnr", "mse"])?;
        for s in &self.samples {
            w.write_record([
                s.patient_id.to_string(),
                s.slice_id.to_string(),
                s.ssim.to_string(),
                s.psnr.to_string(),
                s.mse.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes one error-map PNG per sample into `dir`.
pub fn export_error_maps(predictions: &[Array2<f32>], samples: &[MultimodalSample], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    predictions
        .iter()
        .zip(samples)
        .enumerate()
        .map(|(i, (p, s))| {
            let y = s.target.as_ref().ok_or_else(|| invalid("error maps need targets"))?;
            let path = dir.join(format!("error_{i:05}_p{}_s{}.png", s.patient_id, s.slice_id));
            error_map(y.view(), p.view(), ERROR_MAP_SCALE)?.write_png(&path)?;
            Ok(path)
        })
        .collect()
}

/// Difficulty maps of the model's own predictions, scored by its
/// discriminator, written as PNGs at [`DIFFICULTY_SCALE`].
pub fn dump_difficulty(
    model: &NetBundle<f32>,
    samples: &[MultimodalSample],
    clamp_max: f64,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(8).enumerate() {
        let batch = Batch::<f32>::from_samples(&chunk.iter().collect::<Vec<_>>())?;
        let g = Graph::inference();
        let x = g.constant(batch.sources.clone());
        let fake = model.generator.forward(&g, x, &[])?.image.expect("full pass");
        let scores = g.value(model.discriminator.forward(&g, fake)?);
        for (i, s) in chunk.iter().enumerate() {
            let per_image = scores.index_axis(Axis(0), i);
            let grid = per_image
                .index_axis(Axis(0), 0)
                .into_dimensionality::<Ix2>()
                .map_err(|e| invalid(e.to_string()))?;
            let map = compute_difficulty_map(grid, &s.foreground_mask, clamp_max)?;
            let k = c * 8 + i;
            let path = dir.join(format!("difficulty_{k:05}_p{}_s{}.png", s.patient_id, s.slice_id));
            GrayImage::quantize(map.full.view(), DIFFICULTY_SCALE).write_png(&path)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub paired_fraction: f64,
    pub variant: String,
    pub seed: u64,
    pub split_hash: String,
    pub ssim: f64,
    pub psnr: Psnr,
    pub mse: f64,
}

/// Label of the semi-supervised row when the unpaired set is empty.
pub const SEMI_AS_PAIRED_ONLY: &str = "semi=paired_only";

/// For each fraction: one shared stage-1 teacher, then a paired-only and a
/// semi-supervised stage 2 on the same split, both scored on the test set.
pub fn run_sweep(base: &TrainConfig, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    if fractions.is_empty() {
        return Err(invalid("sweep needs at least one paired fraction"));
    }
    let mut rows = Vec::new();
    for &f in fractions {
        let mut cfg = base.clone();
        cfg.data.paired_fraction = f;
        let split = cfg.data.build()?;
        rows.extend(sweep_one(&cfg, &split)?);
    }
    Ok(rows)
}

fn sweep_one(cfg: &TrainConfig, split: &DatasetSplit) -> Result<Vec<SweepRow>> {
    let stage1 = train_stage1(cfg, split)?;
    let offset = stage1.log.len();
    let mut po_cfg = cfg.clone();
    po_cfg.toggles.paired_only = true;
    let po = train_stage2(&po_cfg, split, &stage1.teacher, offset)?;
    let row = |variant: &str, model: &NetBundle<f32>| -> Result<SweepRow> {
        let r = evaluate(model, &split.test, ReportMeta::default(), EvalOptions::default())?;
        Ok(SweepRow {
            paired_fraction: cfg.data.paired_fraction,
            variant: variant.into(),
            seed: cfg.seed,
            split_hash: split.meta.hash.clone(),
            ssim: r.mean_ssim,
            psnr: r.mean_psnr,
            mse: r.mean_mse,
        })
    };
    let mut rows = vec![row("paired_only", &po.student)?];
    if split.unpaired.is_empty() {
        rows.push(row(SEMI_AS_PAIRED_ONLY, &po.student)?);
    } else {
        let mut semi_cfg = cfg.clone();
        semi_cfg.toggles.paired_only = false;
        let semi = train_stage2(&semi_cfg, split, &stage1.teacher, offset)?;
        rows.push(row("semi", &semi.student)?);
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["paired_fraction", "variant", "seed", "split_hash", "ssim", "psnr", "mse"])?;
    for r in rows {
        w.write_record([
            r.paired_fraction.to_string(),
            r.variant.clone(),
            r.seed.to_string(),
            r.split_hash.clone(),
            r.ssim.to_string(),
            r.psnr.to_string(),
            r.mse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text table of sweep rows.
pub fn format_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{:>8}  {:<18} {:>6}  {:>8}  {:>9}  {:>10}\n",
        "fraction", "variant", "seed", "ssim", "psnr", "mse"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>8.3}  {:<18} {:>6}  {:>8.4}  {:>9}  {:>10.6}\n",
            r.paired_fraction, r.variant, r.seed, r.ssim, r.psnr.to_string(), r.mse
        ));
    }
    out
}
