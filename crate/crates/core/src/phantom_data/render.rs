use super::{foreground_mask, Phantom, MultimodalSample, SOURCE_CHANNELS};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Channel names in storage order: three sources, then the target.
pub const MODALITIES: [&str; 4] = ["t1", "t2", "flair", "t1ce"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Brain,
    Tumor,
    Core,
}

/// Piecewise-linear, non-decreasing map from texture value `t ∈ [0, 1]` to
/// intensity, with knots at `t = 0, 0.5, 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transfer(pub [f32; 3]);

impl Transfer {
    pub fn apply(&self, t: f32) -> f32 {
        let t = t.clamp(0.0, 1.0);
        let [a, b, c] = self.0;
        if t <= 0.5 {
            a + (b - a) * (t * 2.0)
        } else {
            b + (c - b) * ((t - 0.5) * 2.0)
        }
    }
}

/// Transfer curves indexed `[region][modality]`, regions ordered brain,
/// tumour, core and modalities as in [`MODALITIES`]. Background is 0 in
/// every channel.
pub const TRANSFER: [[Transfer; 4]; 3] = [
    [
        Transfer([0.50, 0.60, 0.70]),
        Transfer([0.30, 0.38, 0.50]),
        Transfer([0.35, 0.42, 0.48]),
        Transfer([0.45, 0.55, 0.62]),
    ],
    [
        Transfer([0.35, 0.40, 0.48]),
        Transfer([0.70, 0.80, 0.86]),
        Transfer([0.80, 0.88, 0.95]),
        Transfer([0.40, 0.46, 0.52]),
    ],
    [
        Transfer([0.30, 0.34, 0.40]),
        Transfer([0.55, 0.62, 0.70]),
        Transfer([0.58, 0.64, 0.70]),
        Transfer([0.85, 0.92, 0.98]),
    ],
];

impl Region {
    pub fn transfer(self, modality: usize) -> Transfer {
        TRANSFER[self as usize][modality]
    }
}

/// Smooth value noise in `[0, 1]`: two octaves of uniform lattice values
/// (5×5 and 9×9), bilinearly interpolated over the canvas.
pub(crate) fn texture(seed: u64, size: usize) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse = Array2::from_shape_simple_fn((5, 5), || rng.random::<f32>());
    let fine = Array2::from_shape_simple_fn((9, 9), || rng.random::<f32>());
    let sample = |grid: &Array2<f32>, y: usize, x: usize| {
        let g = grid.nrows() - 1;
        let scale = g as f32 / (size - 1) as f32;
        let (fy, fx) = (y as f32 * scale, x as f32 * scale);
        let (y0, x0) = ((fy as usize).min(g - 1), (fx as usize).min(g - 1));
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let top = grid[[y0, x0]] * (1.0 - tx) + grid[[y0, x0 + 1]] * tx;
        let bot = grid[[y0 + 1, x0]] * (1.0 - tx) + grid[[y0 + 1, x0 + 1]] * tx;
        top * (1.0 - ty) + bot * ty
    };
    Array2::from_shape_fn((size, size), |(y, x)| {
        (0.6 * sample(&coarse, y, x) + 0.4 * sample(&fine, y, x)).clamp(0.0, 1.0)
    })
}

/// Renders the three source contrasts and the target contrast of a phantom.
/// Identity fields are zero; the dataset builder assigns them.
pub fn render_modalities(phantom: &Phantom) -> MultimodalSample {
    let n = phantom.canvas_size;
    let masks = phantom.masks();
    let tex = texture(phantom.texture_seed, n);
    let region = |y: usize, x: usize| {
        if masks.core[[y, x]] {
            Some(Region::Core)
        } else if masks.tumor[[y, x]] {
            Some(Region::Tumor)
        } else if masks.brain[[y, x]] {
            Some(Region::Brain)
        } else {
            None
        }
    };
    let mut all = Array3::<f32>::zeros((SOURCE_CHANNELS + 1, n, n));
    for y in 0..n {
        for x in 0..n {
            if let Some(r) = region(y, x) {
                for m in 0..=SOURCE_CHANNELS {
                    all[[m, y, x]] = r.transfer(m).apply(tex[[y, x]]);
                }
            }
        }
    }
    let sources = all.slice(ndarray::s![..SOURCE_CHANNELS, .., ..]).to_owned();
    let target = all.index_axis(ndarray::Axis(0), SOURCE_CHANNELS).to_owned();
    MultimodalSample {
        foreground_mask: foreground_mask(&sources),
        sources,
        target: Some(target),
        patient_id: 0,
        slice_id: 0,
        has_core: masks.core.iter().any(|&c| c),
    }
}
