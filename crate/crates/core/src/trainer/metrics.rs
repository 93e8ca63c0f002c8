use crate::error::Result;
use crate::losses::LossBundle;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One CSV row per optimisation step. The first eleven columns are the
/// core schema; the rest add the epoch, the student's adversarial terms,
/// every optimizer's learning rate and the batch composition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: u8,
    pub pid: f64,
    pub pad: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub id: f64,
    pub fd: f64,
    pub total_teacher: f64,
    pub total_student: f64,
    pub schedule_weight: f64,
    pub epoch: usize,
    pub pad_s: f64,
    pub gan_g_s: f64,
    pub gan_d_s: f64,
    pub lr_g_teacher: f64,
    pub lr_mlp_teacher: f64,
    pub lr_d_teacher: f64,
    pub lr_g_student: f64,
    pub lr_mlp_student: f64,
    pub lr_d_student: f64,
    pub paired_samples: usize,
    pub unpaired_samples: usize,
}

/// Learning rates in force for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepRates {
    pub g_teacher: f64,
    pub mlp_teacher: f64,
    pub d_teacher: f64,
    pub g_student: f64,
    pub mlp_student: f64,
    pub d_student: f64,
}

impl MetricsRow {
    pub fn new(step: usize, stage: u8, epoch: usize, counts: (usize, usize), b: &LossBundle, lr: &StepRates) -> Self {
        Self {
            step,
            stage,
            pid: b.pid,
            pad: b.pad,
            gan_g: b.gan_g,
            gan_d: b.gan_d,
            id: b.id,
            fd: b.fd,
            total_teacher: b.total_teacher,
            total_student: b.total_student,
            schedule_weight: b.schedule_weight,
            epoch,
            pad_s: b.student_pad,
            gan_g_s: b.student_gan_g,
            gan_d_s: b.student_gan_d,
            lr_g_teacher: lr.g_teacher,
            lr_mlp_teacher: lr.mlp_teacher,
            lr_d_teacher: lr.d_teacher,
            lr_g_student: lr.g_student,
            lr_mlp_student: lr.mlp_student,
            lr_d_student: lr.d_student,
            paired_samples: counts.0,
            unpaired_samples: counts.1,
        }
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    write_metrics_csv(rows, std::fs::File::create(path)?)
}

pub fn metrics_csv_string(rows: &[MetricsRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_metrics_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
