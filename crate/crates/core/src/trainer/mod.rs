//! Two-stage schedule. Stage 1 pre-trains the teacher on paired data with
//! uniform loss weights. Stage 2 continues the teacher at attenuated rates
//! with difficulty maps and trains a student, initialised from the teacher,
//! on unpaired data through image and feature distillation.

mod metrics;
mod objective;

pub use metrics::{metrics_csv_string, read_metrics_csv, save_metrics_csv, write_metrics_csv, MetricsRow, StepRates};
pub use objective::{
    discriminator_objective, generator_forward, infer, student_losses, student_objective, teacher_guidance,
    teacher_losses, teacher_objective, Batch, GeneratorForward, GeneratorPass, Guidance, MapMode, ObjectiveSpec,
};

use crate::error::{invalid, Error, Result};
use crate::losses::{schedule_weight, LossBundle, LossWeights, PatchSamplingPlan};
use crate::nets::{Discriminator, DiscriminatorSpec, GeneratorSpec, NetBundle, EMBED_DIM};
use crate::phantom_data::{build_split_with, mix, DatasetSplit, MultimodalSample};
use autograd::{AdamW, AdamWConfig, Graph};
use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const INIT: u64 = 1;
const STAGE1_ORDER: u64 = 2;
const STAGE1_PATCHES: u64 = 3;
const PAIRED_ORDER: u64 = 4;
const UNPAIRED_ORDER: u64 = 5;
const TEACHER_PATCHES: u64 = 6;
const STUDENT_PATCHES: u64 = 7;

/// Phantom dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub paired_fraction: f64,
    pub canvas_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_patients: 40,
            slices_per_patient: 8,
            paired_fraction: 0.05,
            canvas_size: 64,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn build(&self) -> Result<DatasetSplit> {
        build_split_with(
            self.n_patients,
            self.slices_per_patient,
            self.paired_fraction,
            self.seed,
            self.canvas_size,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Stage-2 maps are uniform 1 instead of discriminator-derived.
    pub disable_map: bool,
    pub disable_fd: bool,
    pub disable_id: bool,
    /// Stage 2 leaves the teacher untouched.
    pub freeze_teacher: bool,
    /// Stage 2 trains only the teacher on paired data; the returned student
    /// is a copy of the final teacher.
    pub paired_only: bool,
}

/// Plateau rule on the stage-1 validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceRule {
    /// An epoch improves when it beats the best value by this fraction.
    pub min_rel_improvement: f64,
    /// Consecutive non-improving epochs that mark convergence.
    pub patience: usize,
    /// The returned checkpoint is this many epochs before convergence.
    pub rollback: usize,
}

impl Default for ConvergenceRule {
    fn default() -> Self {
        Self {
            min_rel_improvement: 0.005,
            patience: 3,
            rollback: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub embed_dim: usize,
    pub weights: LossWeights,
    pub patches_per_tap: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_mlp: f64,
    pub lr_d: f64,
    /// Stage-2 teacher rates are the stage-1 rates times this factor.
    pub teacher_attenuation: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    pub clamp_max: f64,
    pub convergence: ConvergenceRule,
    /// Fixed number of steps per epoch instead of one pass over the larger
    /// training subset.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub toggles: Toggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            embed_dim: EMBED_DIM,
            weights: LossWeights::default(),
            patches_per_tap: 64,
            stage1_epochs: 10,
            stage2_epochs: 100,
            batch_size: 6,
            lr_g: 6e-4,
            lr_mlp: 6e-4,
            lr_d: 3e-4,
            teacher_attenuation: 0.2,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            weight_decay: 0.01,
            clamp_max: crate::difficulty::DEFAULT_CLAMP_MAX,
            convergence: ConvergenceRule::default(),
            steps_per_epoch: None,
            seed: 0,
            toggles: Toggles::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale configuration used by the trend checks: 40 patients of 8
    /// slices at 64×64, 5% paired, 10 + 30 epochs.
    pub fn smoke(seed: u64) -> Self {
        Self {
            data: DataConfig {
                seed,
                ..DataConfig::default()
            },
            stage1_epochs: 10,
            stage2_epochs: 30,
            steps_per_epoch: Some(SMOKE_STEPS_PER_EPOCH),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.weights.validate()?;
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(invalid(format!("batch size must be even and at least 2, got {}", self.batch_size)));
        }
        if [self.lr_g, self.lr_mlp, self.lr_d].iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(invalid("learning rates must be positive"));
        }
        if !(self.teacher_attenuation > 0.0 && self.teacher_attenuation <= 1.0) {
            return Err(invalid("teacher attenuation must lie in (0, 1]"));
        }
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return Err(invalid("both stages need at least one epoch"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(invalid("steps_per_epoch must be positive"));
        }
        if self.patches_per_tap < 2 || self.embed_dim == 0 {
            return Err(invalid("need at least two patches per tap and a positive embedding size"));
        }
        if !(self.clamp_max > 0.0) {
            return Err(invalid("clamp_max must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Loss weights with the ablation toggles applied.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.toggles.disable_id {
            w.id = 0.0;
        }
        if self.toggles.disable_fd {
            w.fd = 0.0;
        }
        w
    }

    fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    fn plan(&self, seed_tag: u64) -> PatchSamplingPlan {
        PatchSamplingPlan {
            count: self.patches_per_tap,
            seed: mix(self.seed, seed_tag),
        }
    }

    /// Objective used by stage 1: uniform difficulty maps.
    pub fn stage1_objective(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            weights: self.effective_weights(),
            plan: self.plan(STAGE1_PATCHES),
            map: MapMode::Uniform,
        }
    }

    /// Teacher and student objectives used by stage 2.
    pub fn stage2_objectives(&self) -> (ObjectiveSpec, ObjectiveSpec) {
        let map = if self.toggles.disable_map {
            MapMode::Uniform
        } else {
            MapMode::FromDiscriminator {
                clamp_max: self.clamp_max,
            }
        };
        let teacher = ObjectiveSpec {
            weights: self.effective_weights(),
            plan: self.plan(TEACHER_PATCHES),
            map,
        };
        let student = ObjectiveSpec {
            plan: self.plan(STUDENT_PATCHES),
            ..teacher.clone()
        };
        (teacher, student)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }
}

/// Steps per epoch of [`TrainConfig::smoke`].
pub const SMOKE_STEPS_PER_EPOCH: usize = 16;

/// Endless shuffled pass over `0..n`, reshuffled at every wrap.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

struct Optimizers {
    g: AdamW<f32>,
    h: AdamW<f32>,
    d: AdamW<f32>,
}

impl Optimizers {
    fn new(nets: &NetBundle<f32>, cfg: AdamWConfig) -> Self {
        Self {
            g: AdamW::new(&nets.generator.params, cfg),
            h: AdamW::new(&nets.heads.params, cfg),
            d: AdamW::new(&nets.discriminator.params, cfg),
        }
    }
}

fn finite(name: &str, v: f64, stage: u8, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} at stage {stage}, step {step}: {v}")))
    }
}

fn d_step(
    disc: &mut Discriminator<f32>,
    opt: &mut AdamW<f32>,
    real: &ArrayD<f32>,
    fake: &ArrayD<f32>,
    lr: f64,
    at: (u8, usize),
) -> Result<f64> {
    let g = Graph::new();
    let loss = discriminator_objective(&g, disc, real, fake)?;
    let v = finite("gan_d", g.scalar(loss) as f64, at.0, at.1)?;
    let grads = g.backward(loss)?;
    opt.step(&mut disc.params, &grads, lr);
    Ok(v)
}

/// One teacher update on a paired batch: discriminator first, then the
/// generator and heads against the updated discriminator.
fn teacher_step(
    nets: &mut NetBundle<f32>,
    opts: &mut Optimizers,
    batch: &Batch<f32>,
    spec: &ObjectiveSpec,
    rates: (f64, f64, f64),
    rng: &mut ChaCha8Rng,
    at: (u8, usize),
) -> Result<[f64; 4]> {
    let g = Graph::new();
    let fwd = generator_forward(&g, nets, batch, false)?;
    let fake = (*g.value(fwd.fake)).clone();
    let real = batch.targets.as_ref().expect("paired batch");
    let gan_d = d_step(&mut nets.discriminator, &mut opts.d, real, &fake, rates.2, at)?;
    let pass = teacher_losses(&g, nets, fwd, batch, spec, rng)?;
    let p = pass.teacher.expect("teacher parts");
    let pid = finite("pid", g.scalar(p.pid) as f64, at.0, at.1)?;
    let pad = finite("pad", g.scalar(p.pad) as f64, at.0, at.1)?;
    let gan_g = finite("gan_g", g.scalar(p.gan) as f64, at.0, at.1)?;
    let grads = g.backward(pass.total)?;
    opts.g.step(&mut nets.generator.params, &grads, rates.0);
    opts.h.step(&mut nets.heads.params, &grads, rates.1);
    Ok([pid, pad, gan_g, gan_d])
}

fn gather<'a>(samples: &'a [MultimodalSample], idx: &[usize]) -> Vec<&'a MultimodalSample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

/// Mean absolute error of the generator over `samples` (uniform weights).
pub fn validation_pid(nets: &NetBundle<f32>, samples: &[MultimodalSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("validation set is empty"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(8) {
        let batch = Batch::<f32>::from_samples(&chunk.iter().collect::<Vec<_>>())?;
        let targets = batch.targets.as_ref().ok_or_else(|| invalid("validation samples need targets"))?;
        let pred = infer(nets, &batch.sources)?;
        total += ndarray::Zip::from(&pred)
            .and(targets)
            .fold(0.0f64, |acc, &p, &t| acc + (p - t).abs() as f64);
        count += pred.len();
    }
    Ok(total / count as f64)
}

struct Plateau {
    rule: ConvergenceRule,
    best: f64,
    stale: usize,
}

impl Plateau {
    fn new(rule: ConvergenceRule) -> Self {
        Self {
            rule,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feeds one epoch's value; true once the plateau is reached.
    fn update(&mut self, v: f64) -> bool {
        if v < self.best * (1.0 - self.rule.min_rel_improvement) || self.best.is_infinite() {
            self.best = v;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.rule.patience
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Result {
    pub teacher: NetBundle<f32>,
    /// 1-based epoch whose end-of-epoch weights were returned.
    pub checkpoint_epoch: usize,
    /// 1-based epoch at which the plateau rule fired, if it did.
    pub convergence_epoch: Option<usize>,
    /// Validation loss after each completed epoch.
    pub val_pid: Vec<f64>,
    pub log: Vec<MetricsRow>,
}

pub fn train_stage1(cfg: &TrainConfig, split: &DatasetSplit) -> Result<Stage1Result> {
    cfg.validate()?;
    if split.paired.is_empty() {
        return Err(invalid("stage 1 needs a non-empty paired set"));
    }
    let mut teacher = NetBundle::<f32>::new(
        cfg.generator.clone(),
        cfg.discriminator.clone(),
        cfg.embed_dim,
        mix(cfg.seed, INIT),
    )?;
    let mut opts = Optimizers::new(&teacher, cfg.adam());
    let mut order = Cycler::new(split.paired.len(), mix(cfg.seed, STAGE1_ORDER));
    let mut patch_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, STAGE1_PATCHES));
    let weights = cfg.effective_weights();
    let spec = cfg.stage1_objective();
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| split.paired.len().div_ceil(cfg.batch_size));
    let mut plateau = Plateau::new(cfg.convergence);
    let mut snapshots = Vec::new();
    let mut val = Vec::new();
    let mut log = Vec::new();
    let mut convergence_epoch = None;
    for epoch in 0..cfg.stage1_epochs {
        let decay = 1.0 - epoch as f64 / cfg.stage1_epochs as f64;
        let rates = StepRates {
            g_teacher: cfg.lr_g * decay,
            mlp_teacher: cfg.lr_mlp * decay,
            d_teacher: cfg.lr_d * decay,
            ..StepRates::default()
        };
        for _ in 0..steps {
            let step = log.len();
            let batch = Batch::from_samples(&gather(&split.paired, &order.take(cfg.batch_size)))?;
            let [pid, pad, gan_g, gan_d] = teacher_step(
                &mut teacher,
                &mut opts,
                &batch,
                &spec,
                (rates.g_teacher, rates.mlp_teacher, rates.d_teacher),
                &mut patch_rng,
                (1, step),
            )?;
            let bundle = LossBundle {
                pid,
                pad,
                gan_g,
                gan_d,
                schedule_weight: 1.0,
                ..LossBundle::default()
            }
            .with_totals(&weights);
            log.push(MetricsRow::new(step, 1, epoch, (batch.len(), 0), &bundle, &rates));
        }
        let v = validation_pid(&teacher, &split.val)?;
        val.push(v);
        snapshots.push(teacher.clone());
        if plateau.update(v) {
            convergence_epoch = Some(epoch + 1);
            break;
        }
    }
    let end = convergence_epoch.unwrap_or(snapshots.len());
    let checkpoint_epoch = end.saturating_sub(cfg.convergence.rollback).max(1);
    Ok(Stage1Result {
        teacher: snapshots.swap_remove(checkpoint_epoch - 1),
        checkpoint_epoch,
        convergence_epoch,
        val_pid: val,
        log,
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Result {
    pub teacher: NetBundle<f32>,
    pub student: NetBundle<f32>,
    /// Parameter hash of the student before its first update.
    pub student_init_hash: String,
    /// Parameter hash of the teacher handed to stage 2.
    pub teacher_init_hash: String,
    pub log: Vec<MetricsRow>,
}

/// Stage 2 starting from `teacher`. Step numbers in the log continue from
/// `step_offset`.
pub fn train_stage2(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    teacher: &NetBundle<f32>,
    step_offset: usize,
) -> Result<Stage2Result> {
    cfg.validate()?;
    let paired_only = cfg.toggles.paired_only;
    if split.paired.is_empty() {
        return Err(invalid("stage 2 needs a non-empty paired set"));
    }
    if !paired_only && split.unpaired.is_empty() {
        return Err(invalid("unpaired set is empty; enable paired_only"));
    }
    let teacher_init_hash = teacher.params_hash();
    let mut teacher = teacher.clone();
    let mut student = teacher.clone();
    let student_init_hash = student.params_hash();
    if student_init_hash != teacher_init_hash {
        return Err(invalid("student initialisation differs from the teacher"));
    }

    let half = cfg.batch_size / 2;
    let mut t_opts = Optimizers::new(&teacher, cfg.adam());
    let mut s_opts = Optimizers::new(&student, cfg.adam());
    let mut paired_order = Cycler::new(split.paired.len(), mix(cfg.seed, PAIRED_ORDER));
    let mut unpaired_order = Cycler::new(split.unpaired.len(), mix(cfg.seed, UNPAIRED_ORDER));
    let mut t_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, TEACHER_PATCHES));
    let mut s_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, STUDENT_PATCHES));
    let weights = cfg.effective_weights();
    let (t_spec, s_spec) = cfg.stage2_objectives();
    let larger = if paired_only {
        split.paired.len()
    } else {
        split.paired.len().max(split.unpaired.len())
    };
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| larger.div_ceil(half));
    let total = cfg.stage2_epochs;
    let mut log = Vec::new();

    for epoch in 0..total {
        let w = schedule_weight(epoch, total)?;
        let rates = StepRates {
            g_teacher: cfg.lr_g * cfg.teacher_attenuation * w,
            mlp_teacher: cfg.lr_mlp * cfg.teacher_attenuation * w,
            d_teacher: cfg.lr_d * cfg.teacher_attenuation * w,
            g_student: if paired_only { 0.0 } else { cfg.lr_g * w },
            mlp_student: if paired_only { 0.0 } else { cfg.lr_mlp * w },
            d_student: if paired_only { 0.0 } else { cfg.lr_d * w },
        };
        for _ in 0..steps {
            let step = step_offset + log.len();
            let at = (2, step);
            let p_batch = Batch::from_samples(&gather(&split.paired, &paired_order.take(half)))?;
            let mut counts = (p_batch.len(), 0);
            let mut bundle = LossBundle {
                schedule_weight: w,
                ..LossBundle::default()
            };
            if !cfg.toggles.freeze_teacher {
                let [pid, pad, gan_g, gan_d] = teacher_step(
                    &mut teacher,
                    &mut t_opts,
                    &p_batch,
                    &t_spec,
                    (rates.g_teacher, rates.mlp_teacher, rates.d_teacher),
                    &mut t_rng,
                    at,
                )?;
                bundle.pid = pid;
                bundle.pad = pad;
                bundle.gan_g = gan_g;
                bundle.gan_d = gan_d;
            }
            if !paired_only {
                let u_batch = Batch::from_samples(&gather(&split.unpaired, &unpaired_order.take(half)))?;
                counts.1 = u_batch.len();
                let guidance = teacher_guidance(&teacher, &u_batch.sources)?;
                let g = Graph::new();
                let fwd = generator_forward(&g, &student, &u_batch, true)?;
                let fake = (*g.value(fwd.fake)).clone();
                let real = p_batch.targets.as_ref().expect("paired batch");
                bundle.student_gan_d = d_step(&mut student.discriminator, &mut s_opts.d, real, &fake, rates.d_student, at)?;
                let pass = student_losses(&g, &student, fwd, &u_batch, &guidance, &s_spec, &mut s_rng)?;
                let p = pass.student.expect("student parts");
                bundle.id = finite("id", g.scalar(p.id) as f64, 2, step)?;
                bundle.fd = finite("fd", g.scalar(p.fd) as f64, 2, step)?;
                bundle.student_pad = finite("pad_s", g.scalar(p.pad) as f64, 2, step)?;
                bundle.student_gan_g = finite("gan_g_s", g.scalar(p.gan) as f64, 2, step)?;
                let root = g.scale(pass.total, w as f32);
                let grads = g.backward(root)?;
                s_opts.g.step(&mut student.generator.params, &grads, rates.g_student);
                s_opts.h.step(&mut student.heads.params, &grads, rates.mlp_student);
            }
            let bundle = bundle.with_totals(&weights);
            bundle.check(&weights, 1e-9)?;
            log.push(MetricsRow::new(step, 2, epoch, counts, &bundle, &rates));
        }
    }
    if paired_only {
        student.copy_weights_from(&teacher)?;
    }
    Ok(Stage2Result {
        teacher,
        student,
        student_init_hash,
        teacher_init_hash,
        log,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stage1: Stage1Result,
    pub stage2: Stage2Result,
}

impl TrainOutcome {
    /// Stage-1 rows followed by stage-2 rows.
    pub fn log(&self) -> Vec<MetricsRow> {
        self.stage1.log.iter().chain(&self.stage2.log).copied().collect()
    }
}

pub fn train(cfg: &TrainConfig, split: &DatasetSplit) -> Result<TrainOutcome> {
    let stage1 = train_stage1(cfg, split)?;
    let stage2 = train_stage2(cfg, split, &stage1.teacher, stage1.log.len())?;
    Ok(TrainOutcome { stage1, stage2 })
}

/// Summary written next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub split_hash: String,
    pub stage1_checkpoint_epoch: usize,
    pub stage1_convergence_epoch: Option<usize>,
    pub stage1_val_pid: Vec<f64>,
    pub teacher_hash: String,
    pub student_hash: String,
    pub steps: usize,
}

/// Trains and writes `config.json`, `stage1_teacher.safetensors`,
/// `final_teacher.safetensors`, `final_student.safetensors`, `metrics.csv`
/// and `summary.json` into `out_dir`.
pub fn train_to_dir(cfg: &TrainConfig, split: &DatasetSplit, out_dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    let outcome = train(cfg, split)?;
    let meta = |role: &str| {
        BTreeMap::from([
            ("role".to_string(), role.to_string()),
            ("config_hash".to_string(), cfg.hash()),
            ("split_hash".to_string(), split.meta.hash.clone()),
        ])
    };
    outcome
        .stage1
        .teacher
        .save(&out_dir.join("stage1_teacher.safetensors"), &meta("stage1_teacher"))?;
    outcome
        .stage2
        .teacher
        .save(&out_dir.join("final_teacher.safetensors"), &meta("final_teacher"))?;
    outcome
        .stage2
        .student
        .save(&out_dir.join("final_student.safetensors"), &meta("final_student"))?;
    save_metrics_csv(&outcome.log(), &out_dir.join("metrics.csv"))?;
    let summary = RunSummary {
        config_hash: cfg.hash(),
        split_hash: split.meta.hash.clone(),
        stage1_checkpoint_epoch: outcome.stage1.checkpoint_epoch,
        stage1_convergence_epoch: outcome.stage1.convergence_epoch,
        stage1_val_pid: outcome.stage1.val_pid.clone(),
        teacher_hash: outcome.stage2.teacher.params_hash(),
        student_hash: outcome.stage2.student.params_hash(),
        steps: outcome.stage1.log.len() + outcome.stage2.log.len(),
    };
    std::fs::write(out_dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(outcome)
}

/// Student prediction for one `[3, H, W]` input.
pub fn predict(student: &NetBundle<f32>, sources: &Array3<f32>) -> Result<Array2<f32>> {
    let x = sources.clone().insert_axis(Axis(0)).into_dyn();
    let y = infer(student, &x)?;
    let (h, w) = (y.shape()[2], y.shape()[3]);
    y.into_shape_with_order((h, w)).map_err(|e| invalid(e.to_string()))
}

/// Predictions for a list of samples, evaluated in small batches.
pub fn predict_samples(student: &NetBundle<f32>, samples: &[MultimodalSample]) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let batch = Batch::<f32>::from_samples(&chunk.iter().collect::<Vec<_>>())?;
        let y = infer(student, &batch.sources)?;
        for i in 0..chunk.len() {
            let img = y.index_axis(Axis(0), i).index_axis(Axis(0), 0).to_owned();
            out.push(img.into_dimensionality().map_err(|e| invalid(e.to_string()))?);
        }
    }
    Ok(out)
}
