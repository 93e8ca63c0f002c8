//! Per-pixel difficulty weights derived from patch discriminator scores.
//!
//! A cell the discriminator scores as confidently real (score 1) gets
//! weight 0; cells it rejects get weights up to `clamp_max`. Background
//! pixels always get [`BACKGROUND`]. Maps are plain arrays that enter loss
//! graphs as constants, so no gradient ever reaches the discriminator
//! through them.

use crate::error::{invalid, Error, Result};
use autograd::{adaptive_avg_pool2d, bilinear_resize2d, Real};
use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};
use std::collections::BTreeMap;

pub const BACKGROUND: f64 = 0.2;
pub const DEFAULT_CLAMP_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyMap<T: Real> {
    pub full: Array2<T>,
    /// Downsampled copies of `full`, keyed by tap index.
    pub pyramid: BTreeMap<usize, Array2<T>>,
    pub background_value: f64,
    /// Always true: maps are constants for every consumer.
    pub stop_gradient: bool,
}

/// `|1 − score|` per cell, before any resampling.
pub fn cell_difficulty<T: Real>(scores: ArrayView2<T>) -> Result<Array2<T>> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discriminator scores".into()));
    }
    Ok(scores.mapv(|s| (T::one() - s).abs()))
}

fn as4<T: Real>(a: ArrayView2<T>) -> ArrayD<T> {
    a.to_owned().into_dyn().insert_axis(Axis(0)).insert_axis(Axis(0))
}

fn from4<T: Real>(a: ArrayD<T>) -> Array2<T> {
    let (h, w) = (a.shape()[2], a.shape()[3]);
    a.into_shape_with_order(IxDyn(&[h, w]))
        .expect("single-plane array")
        .into_dimensionality()
        .expect("rank 2")
}

/// Bilinearly upsamples cell difficulties to the mask size, clamps them to
/// `[0, clamp_max]` and pins background pixels to [`BACKGROUND`]. The
/// pyramid starts empty.
pub fn compute_difficulty_map<T: Real>(
    scores: ArrayView2<T>,
    foreground: &Array2<bool>,
    clamp_max: f64,
) -> Result<DifficultyMap<T>> {
    if !(clamp_max > 0.0) {
        return Err(invalid(format!("clamp_max must be positive, got {clamp_max}")));
    }
    if scores.is_empty() || foreground.is_empty() {
        return Err(invalid("empty score grid or mask"));
    }
    let cells = cell_difficulty(scores)?;
    let (h, w) = foreground.dim();
    let up = from4(bilinear_resize2d(&as4(cells.view()), h, w)?);
    let hi = T::from_f64_lossy(clamp_max);
    let bg = T::from_f64_lossy(BACKGROUND);
    let mut full = up.mapv(|v| v.max(T::zero()).min(hi));
    ndarray::Zip::from(&mut full)
        .and(foreground)
        .for_each(|v, &fg| {
            if !fg {
                *v = bg;
            }
        });
    Ok(DifficultyMap {
        full,
        pyramid: BTreeMap::new(),
        background_value: BACKGROUND,
        stop_gradient: true,
    })
}

/// Average-pools `full` to each requested `(h, w)`.
pub fn build_pyramid<T: Real>(
    full: &Array2<T>,
    tap_shapes: &BTreeMap<usize, (usize, usize)>,
) -> Result<BTreeMap<usize, Array2<T>>> {
    let (h, w) = full.dim();
    let full4 = as4(full.view());
    tap_shapes
        .iter()
        .map(|(&tap, &(th, tw))| {
            if th > h || tw > w {
                return Err(invalid(format!(
                    "tap {tap} grid {th}x{tw} is larger than the {h}x{w} map"
                )));
            }
            Ok((tap, from4(adaptive_avg_pool2d(&full4, th, tw)?)))
        })
        .collect()
}

impl<T: Real> DifficultyMap<T> {
    /// Map with every pixel and pyramid level equal to `value`; stage 1
    /// trains with `value = 1`.
    pub fn uniform(h: usize, w: usize, value: f64, tap_shapes: &BTreeMap<usize, (usize, usize)>) -> Self {
        let v = T::from_f64_lossy(value);
        Self {
            full: Array2::from_elem((h, w), v),
            pyramid: tap_shapes
                .iter()
                .map(|(&k, &(th, tw))| (k, Array2::from_elem((th, tw), v)))
                .collect(),
            background_value: BACKGROUND,
            stop_gradient: true,
        }
    }

    pub fn with_pyramid(mut self, tap_shapes: &BTreeMap<usize, (usize, usize)>) -> Result<Self> {
        self.pyramid = build_pyramid(&self.full, tap_shapes)?;
        Ok(self)
    }

    pub fn level(&self, tap: usize) -> Result<&Array2<T>> {
        self.pyramid.get(&tap).ok_or(Error::MissingTap(tap))
    }
}

/// `[N, 1, H, W]` stack of the full-resolution maps.
pub fn stack_full<T: Real>(maps: &[DifficultyMap<T>]) -> Result<ArrayD<T>> {
    stack(maps.iter().map(|m| m.full.view()).collect())
}

/// `[N, 1, h, w]` stack of one pyramid level.
pub fn stack_level<T: Real>(maps: &[DifficultyMap<T>], tap: usize) -> Result<ArrayD<T>> {
    stack(maps.iter().map(|m| m.level(tap).map(|l| l.view())).collect::<Result<_>>()?)
}

fn stack<T: Real>(views: Vec<ArrayView2<T>>) -> Result<ArrayD<T>> {
    if views.is_empty() {
        return Err(invalid("no maps to stack"));
    }
    let s = ndarray::stack(Axis(0), &views).map_err(|e| invalid(e.to_string()))?;
    Ok(s.insert_axis(Axis(1)).into_dyn())
}
