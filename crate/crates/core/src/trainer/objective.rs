use crate::difficulty::{compute_difficulty_map, stack_full, stack_level, DifficultyMap};
use crate::error::{invalid, Result};
use crate::losses::{
    feature_distill, image_distill, lsgan_d, lsgan_g, patch_difficulty_infonce, pixelwise_difficulty_l1,
    student_total_graph, teacher_total_graph, LossWeights, PatchSamplingPlan, StudentParts, TeacherParts,
};
use crate::nets::{Discriminator, FeatureTapSet, NetBundle, NetRole};
use crate::phantom_data::MultimodalSample;
use autograd::{Graph, Real, Var};
use ndarray::{Array2, ArrayD, Axis};
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};

/// A stack of samples as network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Real> {
    /// `[B, 3, H, W]`.
    pub sources: ArrayD<T>,
    /// `[B, 1, H, W]` when every sample is paired.
    pub targets: Option<ArrayD<T>>,
    pub masks: Vec<Array2<bool>>,
}

impl<T: Real> Batch<T> {
    pub fn from_samples(samples: &[&MultimodalSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| invalid("empty batch"))?;
        let (c, h, w) = first.sources.dim();
        if samples.iter().any(|s| s.sources.dim() != (c, h, w)) {
            return Err(invalid("batch samples differ in shape"));
        }
        let cast = |v: &f32| T::from_f64_lossy(*v as f64);
        let sources = ndarray::stack(
            Axis(0),
            &samples.iter().map(|s| s.sources.view()).collect::<Vec<_>>(),
        )
        .map_err(|e| invalid(e.to_string()))?
        .map(cast)
        .into_dyn();
        let targets = if samples.iter().all(|s| s.target.is_some()) {
            let views: Vec<_> = samples.iter().map(|s| s.target.as_ref().unwrap().view()).collect();
            Some(
                ndarray::stack(Axis(0), &views)
                    .map_err(|e| invalid(e.to_string()))?
                    .map(cast)
                    .insert_axis(Axis(1))
                    .into_dyn(),
            )
        } else {
            None
        };
        Ok(Self {
            sources,
            targets,
            masks: samples.iter().map(|s| s.foreground_mask.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.sources.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.sources.shape()[2], self.sources.shape()[3])
    }
}

/// Where the loss weights of a step come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapMode {
    /// Every weight is 1.
    Uniform,
    /// Difficulty maps from the current discriminator scores of the fake.
    FromDiscriminator { clamp_max: f64 },
}

/// Static pieces of a generator objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub weights: LossWeights,
    pub plan: PatchSamplingPlan,
    pub map: MapMode,
}

/// Recorded result of a teacher or student objective.
#[derive(Debug, Clone)]
pub struct GeneratorPass<T: Real> {
    pub total: Var,
    pub fake: Var,
    pub teacher: Option<TeacherParts<Var>>,
    pub student: Option<StudentParts<Var>>,
    pub maps: Vec<DifficultyMap<T>>,
    pub taps: FeatureTapSet,
}

/// Teacher outputs on unpaired inputs, used as constants by the student.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance<T: Real> {
    pub pseudo: ArrayD<T>,
    pub features: BTreeMap<usize, ArrayD<T>>,
}

fn tap_shapes(taps: &FeatureTapSet, indices: impl IntoIterator<Item = usize>) -> Result<BTreeMap<usize, (usize, usize)>> {
    indices.into_iter().map(|t| Ok((t, taps.grid(t)?))).collect()
}

fn difficulty_maps<T: Real>(
    g: &Graph<T>,
    mode: MapMode,
    scores: Var,
    masks: &[Array2<bool>],
    shapes: &BTreeMap<usize, (usize, usize)>,
    hw: (usize, usize),
) -> Result<Vec<DifficultyMap<T>>> {
    match mode {
        MapMode::Uniform => Ok(masks
            .iter()
            .map(|_| DifficultyMap::uniform(hw.0, hw.1, 1.0, shapes))
            .collect()),
        MapMode::FromDiscriminator { clamp_max } => {
            let s = g.value(scores);
            masks
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let grid = s.index_axis(Axis(0), i);
                    let grid = grid.index_axis(Axis(0), 0);
                    let grid = grid.into_dimensionality::<ndarray::Ix2>().map_err(|e| invalid(e.to_string()))?;
                    compute_difficulty_map(grid, m, clamp_max)?.with_pyramid(shapes)
                })
                .collect()
        }
    }
}

fn stacked_levels<T: Real>(maps: &[DifficultyMap<T>], indices: &[usize]) -> Result<BTreeMap<usize, ArrayD<T>>> {
    indices.iter().map(|&k| Ok((k, stack_level(maps, k)?))).collect()
}

/// Contrastive loss between the input-stream taps and a re-encoding of the
/// synthesized image replicated across every encoder.
fn contrastive<T: Real>(
    g: &Graph<T>,
    nets: &NetBundle<T>,
    anchor: &FeatureTapSet,
    fake: Var,
    maps: &[DifficultyMap<T>],
    spec: &ObjectiveSpec,
    rng: &mut impl Rng,
) -> Result<Var> {
    let taps = &nets.generator.spec().tap_indices;
    let stop = *taps.last().ok_or_else(|| invalid("no contrastive taps"))?;
    let copies = vec![fake; nets.generator.spec().n_encoders];
    let replicated = g.concat(&copies, 1)?;
    let positive = nets.generator.forward_until(g, replicated, taps, stop)?.taps;
    let locations = spec.plan.sample_taps(maps.len(), anchor, taps, rng)?;
    let pyramid = stacked_levels(maps, taps)?;
    patch_difficulty_infonce(g, anchor, &positive, &nets.heads, &locations, &pyramid, spec.weights.tau)
}

/// First half of a generator objective: the forward pass that yields the
/// fake image and the input-stream taps. Splitting here lets the trainer
/// update the discriminator on the fake before scoring it.
#[derive(Debug, Clone)]
pub struct GeneratorForward {
    pub fake: Var,
    pub taps: FeatureTapSet,
}

pub fn generator_forward<T: Real>(
    g: &Graph<T>,
    nets: &NetBundle<T>,
    batch: &Batch<T>,
    student: bool,
) -> Result<GeneratorForward> {
    let gs = nets.generator.spec();
    let taps: Vec<usize> = if student {
        gs.tap_indices
            .iter()
            .chain(&gs.distill_tap_indices)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    } else {
        gs.tap_indices.clone()
    };
    let x = g.constant(batch.sources.clone());
    let out = nets.generator.forward(g, x, &taps)?;
    Ok(GeneratorForward {
        fake: out.image.expect("full pass yields an image"),
        taps: out.taps,
    })
}

/// Teacher objective on a paired batch: weighted L1 to the target,
/// contrastive term and generator LSGAN term through `nets.discriminator`.
pub fn teacher_objective<T: Real>(
    g: &Graph<T>,
    nets: &NetBundle<T>,
    batch: &Batch<T>,
    spec: &ObjectiveSpec,
    rng: &mut impl Rng,
) -> Result<GeneratorPass<T>> {
    let fwd = generator_forward(g, nets, batch, false)?;
    teacher_losses(g, nets, fwd, batch, spec, rng)
}

pub fn teacher_losses<T: Real>(
    g: &Graph<T>,
    nets: &NetBundle<T>,
    fwd: GeneratorForward,
    batch: &Batch<T>,
    spec: &ObjectiveSpec,
    rng: &mut impl Rng,
) -> Result<GeneratorPass<T>> {
    let targets = batch
        .targets
        .as_ref()
        .ok_or_else(|| invalid("teacher objective needs paired samples"))?;
    let gs = nets.generator.spec();
    let GeneratorForward { fake, taps } = fwd;
    let scores = nets.discriminator.forward(g, fake)?;
    let shapes = tap_shapes(&taps, gs.tap_indices.iter().copied())?;
    let maps = difficulty_maps(g, spec.map, scores, &batch.masks, &shapes, batch.hw())?;
    let y = g.constant(targets.clone());
    let pid = pixelwise_difficulty_l1(g, &stack_full(&maps)?, y, fake)?;
    let pad = contrastive(g, nets, &taps, fake, &maps, spec, rng)?;
    let gan = lsgan_g(g, scores)?;
    let parts = TeacherParts { pid, pad, gan };
    Ok(GeneratorPass {
        total: teacher_total_graph(g, &parts, &spec.weights)?,
        fake,
        teacher: Some(parts),
        student: None,
        maps,
        taps: taps.with_source(NetRole::Teacher),
    })
}

/// Teacher image and distillation features on `sources`, computed without
/// recording gradients.
pub fn teacher_guidance<T: Real>(teacher: &NetBundle<T>, sources: &ArrayD<T>) -> Result<Guidance<T>> {
    let g = Graph::inference();
    let x = g.constant(sources.clone());
    let out = teacher
        .generator
        .forward(&g, x, &teacher.generator.spec().distill_tap_indices)?;
    let features = out
        .taps
        .indices()
        .map(|k| Ok((k, (*g.value(out.taps.get(k)?)).clone())))
        .collect::<Result<_>>()?;
    Ok(Guidance {
        pseudo: (*g.value(out.image.expect("full pass"))).clone(),
        features,
    })
}

/// Student objective on an unpaired batch: image and feature distillation
/// against the teacher guidance, contrastive and LSGAN terms, all weighted
/// by the student's own difficulty maps.
pub fn student_objective<T: Real>(
    g: &Graph<T>,
    nets: &NetBundle<T>,
    batch: &Batch<T>,
    guidance: &Guidance<T>,
    spec: &ObjectiveSpec,
    rng: &mut impl Rng,
) -> Result<GeneratorPass<T>> {
    let fwd = generator_forward(g, nets, batch, true)?;
    student_losses(g, nets, fwd, batch, guidance, spec, rng)
}

pub fn student_losses<T: Real>(
    g: &Graph<T>,
    nets: &NetBundle<T>,
    fwd: GeneratorForward,
    batch: &Batch<T>,
    guidance: &Guidance<T>,
    spec: &ObjectiveSpec,
    rng: &mut impl Rng,
) -> Result<GeneratorPass<T>> {
    let gs = nets.generator.spec();
    let GeneratorForward { fake, taps } = fwd;
    let scores = nets.discriminator.forward(g, fake)?;
    let indices: BTreeSet<usize> = gs.tap_indices.iter().chain(&gs.distill_tap_indices).copied().collect();
    let shapes = tap_shapes(&taps, indices)?;
    let maps = difficulty_maps(g, spec.map, scores, &batch.masks, &shapes, batch.hw())?;

    let pseudo = g.constant(guidance.pseudo.clone());
    let id = image_distill(g, &stack_full(&maps)?, pseudo, fake)?;
    let mut teacher_taps = FeatureTapSet::new(batch.hw()).with_source(NetRole::Teacher);
    let table = gs.layer_table();
    for &k in &gs.distill_tap_indices {
        let f = guidance
            .features
            .get(&k)
            .ok_or(crate::error::Error::MissingTap(k))?;
        teacher_taps.insert(k, g.constant(f.clone()), (&table[k]).into(), g)?;
    }
    let fd = feature_distill(
        g,
        &stacked_levels(&maps, &gs.distill_tap_indices)?,
        &teacher_taps,
        &taps,
        &gs.distill_tap_indices,
    )?;
    let pad = contrastive(g, nets, &taps, fake, &maps, spec, rng)?;
    let gan = lsgan_g(g, scores)?;
    let parts = StudentParts { id, fd, pad, gan };
    Ok(GeneratorPass {
        total: student_total_graph(g, &parts, &spec.weights)?,
        fake,
        teacher: None,
        student: Some(parts),
        maps,
        taps: taps.with_source(NetRole::Student),
    })
}

/// LSGAN discriminator loss on constant real and fake images.
pub fn discriminator_objective<T: Real>(
    g: &Graph<T>,
    disc: &Discriminator<T>,
    real: &ArrayD<T>,
    fake: &ArrayD<T>,
) -> Result<Var> {
    let r = disc.forward(g, g.constant(real.clone()))?;
    let f = disc.forward(g, g.constant(fake.clone()))?;
    lsgan_d(g, r, f)
}

/// Generator output for `sources` without recording gradients.
pub fn infer<T: Real>(nets: &NetBundle<T>, sources: &ArrayD<T>) -> Result<ArrayD<T>> {
    let g = Graph::inference();
    let x = g.constant(sources.clone());
    let out = nets.generator.forward(&g, x, &[])?;
    Ok((*g.value(out.image.expect("full pass"))).clone())
}
