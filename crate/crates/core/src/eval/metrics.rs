use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const DYNAMIC_RANGE: f64 = 1.0;

fn same_shape(ctx: &str, a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            context: ctx.into(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument(format!("{ctx}: empty image")));
    }
    Ok(())
}

/// Side of the SSIM window used for an `h × w` image: 11, or the largest
/// odd size that fits.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    let k = SSIM_WINDOW.min(h).min(w);
    if k.is_multiple_of(2) {
        k - 1
    } else {
        k
    }
}

/// Normalised 1-D Gaussian of length `k`.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Array1<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let g = Array1::from_shape_fn(k, |i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp());
    let s = g.sum();
    g / s
}

/// Valid-mode separable filtering.
fn filter(x: &Array2<f64>, g: &Array1<f64>) -> Array2<f64> {
    let k = g.len();
    let (h, w) = x.dim();
    let rows = Array2::from_shape_fn((h, w - k + 1), |(y, c)| (0..k).map(|i| g[i] * x[[y, c + i]]).sum::<f64>());
    Array2::from_shape_fn((h - k + 1, w - k + 1), |(r, c)| (0..k).map(|i| g[i] * rows[[r + i, c]]).sum::<f64>())
}

/// Per-window SSIM over every fully contained window (valid mode).
pub fn ssim_map(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<Array2<f64>> {
    same_shape("ssim", a, b)?;
    let (h, w) = a.dim();
    let k = ssim_window_size(h, w);
    let g = gaussian_kernel(k, SSIM_SIGMA);
    let a = a.mapv(f64::from);
    let b = b.mapv(f64::from);
    let mu_a = filter(&a, &g);
    let mu_b = filter(&b, &g);
    let aa = filter(&(&a * &a), &g);
    let bb = filter(&(&b * &b), &g);
    let ab = filter(&(&a * &b), &g);
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    Ok(Array2::from_shape_fn(mu_a.dim(), |p| {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let va = aa[p] - ma * ma;
        let vb = bb[p] - mb * mb;
        let cov = ab[p] - ma * mb;
        ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    }))
}

/// Mean single-scale SSIM (Gaussian window σ = 1.5, K1 = 0.01, K2 = 0.03,
/// dynamic range 1).
pub fn ssim(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<f64> {
    let m = ssim_map(a, b)?;
    Ok(m.sum() / m.len() as f64)
}

/// SSIM averaged over windows whose centre lies in `mask`; falls back to the
/// whole-image mean when no centre does.
pub fn ssim_masked(a: ArrayView2<f32>, b: ArrayView2<f32>, mask: &Array2<bool>) -> Result<f64> {
    let m = ssim_map(a, b)?;
    let off = ssim_window_size(a.nrows(), a.ncols()) / 2;
    let (mut acc, mut n) = (0.0, 0usize);
    for ((y, x), &v) in m.indexed_iter() {
        if mask[[y + off, x + off]] {
            acc += v;
            n += 1;
        }
    }
    Ok(if n == 0 { m.sum() / m.len() as f64 } else { acc / n as f64 })
}

pub fn mse(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<f64> {
    same_shape("mse", a, b)?;
    Ok(ndarray::Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &x, &y| acc + (x as f64 - y as f64).powi(2))
        / a.len() as f64)
}

pub fn mse_masked(a: ArrayView2<f32>, b: ArrayView2<f32>, mask: &Array2<bool>) -> Result<f64> {
    same_shape("mse", a, b)?;
    let (mut acc, mut n) = (0.0, 0usize);
    ndarray::Zip::from(a).and(b).and(mask).for_each(|&x, &y, &m| {
        if m {
            acc += (x as f64 - y as f64).powi(2);
            n += 1;
        }
    });
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

/// Peak signal-to-noise ratio; identical images are flagged instead of
/// reported as infinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Psnr {
    Finite(f64),
    Identical,
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Self {
        if mse == 0.0 {
            Psnr::Identical
        } else {
            Psnr::Finite(10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10())
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Identical => None,
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.4}"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

pub fn psnr(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b)?))
}
