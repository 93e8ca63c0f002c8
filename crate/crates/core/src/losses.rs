//! Objective terms. Every spatial reduction is a mean, and every difficulty
//! weight enters as a constant array.

use crate::error::{invalid, Error, Result};
use crate::nets::{FeatureTapSet, GridPos, ProjectionHeads};
use autograd::{Graph, Real, Var};
use ndarray::{Array1, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pid: f64,
    pub pad: f64,
    pub gan: f64,
    pub id: f64,
    pub fd: f64,
    pub student_pad: f64,
    pub student_gan: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pid: 100.0,
            pad: 1.0,
            gan: 1.0,
            id: 100.0,
            fd: 1.0,
            student_pad: 1.0,
            student_gan: 1.0,
            tau: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pid, self.pad, self.gan, self.id, self.fd, self.student_pad, self.student_gan];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid("temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherParts<V> {
    pub pid: V,
    pub pad: V,
    pub gan: V,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentParts<V> {
    pub id: V,
    pub fd: V,
    pub pad: V,
    pub gan: V,
}

pub fn teacher_total(p: &TeacherParts<f64>, w: &LossWeights) -> f64 {
    w.pid * p.pid + w.pad * p.pad + w.gan * p.gan
}

pub fn student_total(p: &StudentParts<f64>, w: &LossWeights) -> f64 {
    w.id * p.id + w.fd * p.fd + w.student_pad * p.pad + w.student_gan * p.gan
}

fn weighted_sum<T: Real>(g: &Graph<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let t = g.scale(v, T::from_f64_lossy(w));
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    acc.ok_or_else(|| invalid("empty weighted sum"))
}

pub fn teacher_total_graph<T: Real>(g: &Graph<T>, p: &TeacherParts<Var>, w: &LossWeights) -> Result<Var> {
    weighted_sum(g, &[(p.pid, w.pid), (p.pad, w.pad), (p.gan, w.gan)])
}

pub fn student_total_graph<T: Real>(g: &Graph<T>, p: &StudentParts<Var>, w: &LossWeights) -> Result<Var> {
    weighted_sum(
        g,
        &[(p.id, w.id), (p.fd, w.fd), (p.pad, w.student_pad), (p.gan, w.student_gan)],
    )
}

/// Weight `1 − t/T` of the student objective at epoch `t`.
pub fn schedule_weight(t: usize, total: usize) -> Result<f64> {
    if t >= total {
        return Err(invalid(format!("epoch {t} outside [0, {total})")));
    }
    Ok(1.0 - t as f64 / total as f64)
}

/// `L_T + (1 − t/T) · L_S` together with the schedule weight.
pub fn combined_objective(teacher: f64, student: f64, t: usize, total: usize) -> Result<(f64, f64)> {
    let w = schedule_weight(t, total)?;
    Ok((teacher + w * student, w))
}

pub fn combined_objective_graph<T: Real>(
    g: &Graph<T>,
    teacher: Var,
    student: Var,
    t: usize,
    total: usize,
) -> Result<Var> {
    let w = schedule_weight(t, total)?;
    Ok(g.add(teacher, g.scale(student, T::from_f64_lossy(w)))?)
}

/// Itemised losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub pid: f64,
    pub pad: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub id: f64,
    pub fd: f64,
    pub student_pad: f64,
    pub student_gan_g: f64,
    pub student_gan_d: f64,
    pub total_teacher: f64,
    pub total_student: f64,
    pub schedule_weight: f64,
}

impl LossBundle {
    pub fn teacher_parts(&self) -> TeacherParts<f64> {
        TeacherParts {
            pid: self.pid,
            pad: self.pad,
            gan: self.gan_g,
        }
    }

    pub fn student_parts(&self) -> StudentParts<f64> {
        StudentParts {
            id: self.id,
            fd: self.fd,
            pad: self.student_pad,
            gan: self.student_gan_g,
        }
    }

    /// Fills both totals from the parts.
    pub fn with_totals(mut self, w: &LossWeights) -> Self {
        self.total_teacher = teacher_total(&self.teacher_parts(), w);
        self.total_student = student_total(&self.student_parts(), w);
        self
    }

    pub fn combined(&self) -> f64 {
        self.total_teacher + self.schedule_weight * self.total_student
    }

    /// Every entry finite and totals consistent with the parts to `rel`.
    pub fn check(&self, w: &LossWeights, rel: f64) -> Result<()> {
        let fields = [
            ("pid", self.pid),
            ("pad", self.pad),
            ("gan_g", self.gan_g),
            ("gan_d", self.gan_d),
            ("id", self.id),
            ("fd", self.fd),
            ("student_pad", self.student_pad),
            ("student_gan_g", self.student_gan_g),
            ("student_gan_d", self.student_gan_d),
            ("total_teacher", self.total_teacher),
            ("total_student", self.total_student),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("loss {name}")));
        }
        let close = |a: f64, b: f64| (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12);
        if !close(self.total_teacher, teacher_total(&self.teacher_parts(), w))
            || !close(self.total_student, student_total(&self.student_parts(), w))
        {
            return Err(invalid("loss totals disagree with their parts"));
        }
        Ok(())
    }
}

fn same_shape<T: Real>(g: &Graph<T>, ctx: &str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Shape {
            context: ctx.into(),
            lhs: sa,
            rhs: sb,
        });
    }
    Ok(())
}

fn weighted_l1<T: Real>(g: &Graph<T>, ctx: &str, map: &ArrayD<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, ctx, a, b)?;
    let diff = g.abs(g.sub(a, b)?);
    g.weighted_mean(diff, map.clone()).map_err(|_| Error::Shape {
        context: format!("{ctx} weight"),
        lhs: g.shape(diff),
        rhs: map.shape().to_vec(),
    })
}

/// `mean(map ⊙ |y − ŷ|)`; `map` broadcasts against the images.
pub fn pixelwise_difficulty_l1<T: Real>(g: &Graph<T>, map: &ArrayD<T>, y: Var, y_hat: Var) -> Result<Var> {
    weighted_l1(g, "pixelwise l1", map, y, y_hat)
}

/// `mean(map ⊙ |teacher − student|)` with the teacher image cut from the
/// graph, so only the student receives gradient.
pub fn image_distill<T: Real>(g: &Graph<T>, map: &ArrayD<T>, teacher_out: Var, student_out: Var) -> Result<Var> {
    let t = g.detach(teacher_out);
    weighted_l1(g, "image distillation", map, t, student_out)
}

/// `(1/K) Σ_k mean(m_k ⊙ |f_k^T − f_k^S|)` over `indices`, teacher features
/// detached. `pyramid[k]` is `[N, 1, h_k, w_k]` and broadcasts over
/// channels.
pub fn feature_distill<T: Real>(
    g: &Graph<T>,
    pyramid: &BTreeMap<usize, ArrayD<T>>,
    teacher: &FeatureTapSet,
    student: &FeatureTapSet,
    indices: &[usize],
) -> Result<Var> {
    if indices.is_empty() {
        return Err(invalid("no distillation taps"));
    }
    let mut terms = Vec::with_capacity(indices.len());
    for &k in indices {
        let ft = g.detach(teacher.get(k)?);
        let fs = student.get(k)?;
        let m = pyramid.get(&k).ok_or(Error::MissingTap(k))?;
        terms.push((weighted_l1(g, &format!("feature distillation tap {k}"), m, ft, fs)?, 1.0 / indices.len() as f64));
    }
    weighted_sum(g, &terms)
}

/// `½·mean((real − 1)²) + ½·mean(fake²)`.
pub fn lsgan_d<T: Real>(g: &Graph<T>, real: Var, fake: Var) -> Result<Var> {
    let r = g.mean(g.square(g.add_scalar(real, -T::one())));
    let f = g.mean(g.square(fake));
    let half = T::from_f64_lossy(0.5);
    Ok(g.add(g.scale(r, half), g.scale(f, half))?)
}

/// `mean((fake − 1)²)`.
pub fn lsgan_g<T: Real>(g: &Graph<T>, fake: Var) -> Result<Var> {
    Ok(g.mean(g.square(g.add_scalar(fake, -T::one()))))
}

/// How many grid locations each contrastive tap samples per image; the
/// other `count − 1` locations serve as negatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSamplingPlan {
    pub count: usize,
    pub seed: u64,
}

impl Default for PatchSamplingPlan {
    fn default() -> Self {
        Self { count: 64, seed: 0 }
    }
}

impl PatchSamplingPlan {
    /// Distinct uniformly chosen cells of an `h × w` grid for each of `n`
    /// images.
    pub fn sample(&self, n: usize, grid: (usize, usize), rng: &mut impl Rng) -> Result<Vec<Vec<GridPos>>> {
        let cells = grid.0 * grid.1;
        if self.count < 2 {
            return Err(invalid("sampling plan needs at least two locations"));
        }
        if self.count > cells {
            return Err(invalid(format!(
                "cannot sample {} locations from a {}x{} grid",
                self.count, grid.0, grid.1
            )));
        }
        Ok((0..n)
            .map(|img| {
                rand::seq::index::sample(rng, cells, self.count)
                    .into_iter()
                    .map(|c| (img, c / grid.1, c % grid.1))
                    .collect()
            })
            .collect())
    }

    /// Locations for every tap in `taps`, drawn in ascending tap order.
    pub fn sample_taps(
        &self,
        n: usize,
        taps: &FeatureTapSet,
        indices: &[usize],
        rng: &mut impl Rng,
    ) -> Result<BTreeMap<usize, Vec<Vec<GridPos>>>> {
        indices
            .iter()
            .map(|&t| Ok((t, self.sample(n, taps.grid(t)?, rng)?)))
            .collect()
    }
}

/// Weighted InfoNCE over one image: row `i` of `anchors` should match row
/// `i` of `positives` against every other positive row. Returns
/// `mean_i(w_i · CE_i)`.
pub fn infonce_from_embeddings<T: Real>(
    g: &Graph<T>,
    anchors: Var,
    positives: Var,
    weights: &[T],
    tau: f64,
) -> Result<Var> {
    same_shape(g, "infonce embeddings", anchors, positives)?;
    let s = g.shape(anchors)[0];
    if weights.len() != s {
        return Err(invalid(format!("{} weights for {s} locations", weights.len())));
    }
    let logits = g.scale(g.matmul_t(anchors, positives)?, T::from_f64_lossy(1.0 / tau));
    let targets: Vec<usize> = (0..s).collect();
    let ce = g.cross_entropy_rows(logits, &targets)?;
    Ok(g.weighted_mean(ce, Array1::from_vec(weights.to_vec()).into_dyn())?)
}

/// Patchwise contrastive loss between the input stream (`anchor`) and the
/// synthesized-image stream (`positive`). For each tap the per-location
/// terms are weighted by the tap's difficulty level (`[N, 1, h, w]`),
/// averaged over all sampled locations of all images, then summed over taps.
pub fn patch_difficulty_infonce<T: Real>(
    g: &Graph<T>,
    anchor: &FeatureTapSet,
    positive: &FeatureTapSet,
    heads: &ProjectionHeads<T>,
    locations: &BTreeMap<usize, Vec<Vec<GridPos>>>,
    pyramid: &BTreeMap<usize, ArrayD<T>>,
    tau: f64,
) -> Result<Var> {
    let mut per_tap = Vec::with_capacity(locations.len());
    for (&tap, images) in locations {
        let level = pyramid.get(&tap).ok_or(Error::MissingTap(tap))?;
        let n_images = images.len();
        let mut terms = Vec::with_capacity(n_images);
        for locs in images {
            let za = heads.embed(g, anchor, tap, locs)?;
            let zp = heads.embed(g, positive, tap, locs)?;
            let w: Vec<T> = locs
                .iter()
                .map(|&(n, y, x)| {
                    level
                        .get([n, 0, y, x])
                        .copied()
                        .ok_or_else(|| invalid(format!("difficulty level for tap {tap} lacks cell {:?}", (n, y, x))))
                })
                .collect::<Result<_>>()?;
            terms.push((infonce_from_embeddings(g, za, zp, &w, tau)?, 1.0 / n_images as f64));
        }
        per_tap.push((weighted_sum(g, &terms)?, 1.0));
    }
    weighted_sum(g, &per_tap)
}
