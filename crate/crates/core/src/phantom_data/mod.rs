//! Procedural multimodal phantoms standing in for tumour-bearing brain MRI
//! slices, and patient-level dataset splits built from them.
//!
//! A [`Phantom`] is pure geometry: a brain ellipse, an irregular tumour blob
//! and an optional nested core blob, plus a texture seed. [`render_modalities`]
//! turns that geometry into three source contrasts and one target contrast
//! through fixed per-region transfer curves (see [`TRANSFER`]).

mod io;
mod render;
mod split;

pub use io::{export_split, import_split, read_sample, write_sample, SampleHeader};
pub use render::{render_modalities, Region, Transfer, MODALITIES, TRANSFER};
pub use split::{build_split, build_split_with, render_slice, DatasetSplit, SplitMeta, SplitPart};

use crate::error::{invalid, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Number of source modalities every sample carries.
pub const SOURCE_CHANNELS: usize = 3;

pub const MIN_CANVAS: usize = 16;

/// Rotated ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Normalised radial coordinate and polar angle of `(x, y)` in the
    /// ellipse frame; the boundary is at radius 1.
    fn polar(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        ((u * u + v * v).sqrt(), v.atan2(u))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.polar(x, y).0 <= 1.0
    }
}

/// Ellipse with a wobbly boundary. `irregularity` in `[0, 1]` scales the
/// radial perturbation, at most ±30% of the nominal radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub shape: Ellipse,
    pub irregularity: f64,
    pub phases: [f64; 3],
}

impl Blob {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (r, theta) = self.shape.polar(x, y);
        let wobble = self
            .phases
            .iter()
            .enumerate()
            .map(|(k, p)| ((k as f64 + 2.0) * theta + p).cos())
            .sum::<f64>()
            / 3.0;
        r <= 1.0 + 0.3 * self.irregularity * wobble
    }
}

/// Geometry of one synthetic slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub canvas_size: usize,
    pub brain: Ellipse,
    pub tumor: Blob,
    pub core: Option<Blob>,
    pub texture_seed: u64,
}

/// Rasterised region memberships. Tumour is clipped to brain and core to
/// tumour, so `core ⊆ tumor ⊆ brain` holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub brain: Array2<bool>,
    pub tumor: Array2<bool>,
    pub core: Array2<bool>,
}

impl Phantom {
    pub fn masks(&self) -> RegionMasks {
        let n = self.canvas_size;
        let centre = |i: usize| i as f64 + 0.5;
        let brain = Array2::from_shape_fn((n, n), |(y, x)| self.brain.contains(centre(x), centre(y)));
        let tumor = Array2::from_shape_fn((n, n), |(y, x)| {
            brain[[y, x]] && self.tumor.contains(centre(x), centre(y))
        });
        let core = Array2::from_shape_fn((n, n), |(y, x)| {
            tumor[[y, x]]
                && self
                    .core
                    .as_ref()
                    .is_some_and(|c| c.contains(centre(x), centre(y)))
        });
        RegionMasks { brain, tumor, core }
    }

    /// Fraction of canvas pixels inside the brain.
    pub fn brain_fraction(&self) -> f64 {
        let m = self.masks();
        m.brain.iter().filter(|&&b| b).count() as f64 / (self.canvas_size * self.canvas_size) as f64
    }
}

/// Draws phantom geometry; a pure function of `(seed, canvas_size)`.
///
/// Brain radii are drawn so the ellipse covers roughly 40–60% of the
/// canvas. The tumour sits inside the inner half of the brain and about 60%
/// of phantoms get a core blob.
pub fn generate_phantom(seed: u64, canvas_size: usize) -> Result<Phantom> {
    if canvas_size < MIN_CANVAS {
        return Err(invalid(format!(
            "canvas size {canvas_size} is below the minimum of {MIN_CANVAS} pixels"
        )));
    }
    let s = canvas_size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, canvas_size as u64));
    let brain = Ellipse {
        cx: s * (0.5 + rng.random_range(-0.04..0.04)),
        cy: s * (0.5 + rng.random_range(-0.04..0.04)),
        rx: s * rng.random_range(0.34..0.42),
        ry: s * rng.random_range(0.38..0.46),
        angle: rng.random_range(-0.3..0.3),
    };

    // tumour centre in the brain's own frame, inner half
    let rho = 0.45 * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    let (sa, ca) = brain.angle.sin_cos();
    let (u, v) = (rho * phi.cos() * brain.rx, rho * phi.sin() * brain.ry);
    let tumor_shape = Ellipse {
        cx: brain.cx + ca * u - sa * v,
        cy: brain.cy + sa * u + ca * v,
        rx: s * rng.random_range(0.10..0.18),
        ry: s * rng.random_range(0.10..0.18),
        angle: rng.random_range(0.0..PI),
    };
    let tumor = Blob {
        shape: tumor_shape,
        irregularity: rng.random::<f64>(),
        phases: [
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        ],
    };

    let has_core = rng.random::<f64>() < 0.6;
    let core_draw = Blob {
        shape: Ellipse {
            cx: tumor_shape.cx + rng.random_range(-0.2..0.2) * tumor_shape.rx,
            cy: tumor_shape.cy + rng.random_range(-0.2..0.2) * tumor_shape.ry,
            rx: tumor_shape.rx * rng.random_range(0.35..0.6),
            ry: tumor_shape.ry * rng.random_range(0.35..0.6),
            angle: rng.random_range(0.0..PI),
        },
        irregularity: rng.random::<f64>(),
        phases: [
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        ],
    };
    Ok(Phantom {
        canvas_size,
        brain,
        tumor,
        core: has_core.then_some(core_draw),
        texture_seed: rng.random(),
    })
}

/// One training item.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    /// `[3, H, W]`, intensities in `[0, 1]`.
    pub sources: Array3<f32>,
    pub target: Option<Array2<f32>>,
    pub foreground_mask: Array2<bool>,
    pub patient_id: u32,
    pub slice_id: u32,
    pub has_core: bool,
}

impl MultimodalSample {
    pub fn height(&self) -> usize {
        self.sources.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.sources.shape()[2]
    }

    /// Copy without the target image, as stored in the unpaired subset.
    pub fn without_target(&self) -> Self {
        Self {
            target: None,
            ..self.clone()
        }
    }
}

/// `mask[p] = any_c sources[c][p] > 0`.
pub fn foreground_mask(sources: &Array3<f32>) -> Array2<bool> {
    let (h, w) = (sources.shape()[1], sources.shape()[2]);
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..sources.shape()[0]).any(|c| sources[[c, y, x]] > 0.0)
    })
}

/// SplitMix64 finaliser applied to a pair; used to derive independent
/// per-sample seeds.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
