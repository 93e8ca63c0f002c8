//! Raw numeric kernels shared by the forward and backward passes.

use crate::{GraphError, Real, Result};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array4, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

/// Upper bound on the number of elements in one im2col block. Keeps the
/// column buffer resident in L2 while the gemm streams over it.
const COL_BLOCK: usize = 1 << 17;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(GraphError::Rank {
                op: "conv2d",
                expected: 4,
                got: x.to_vec(),
            });
        }
        if wt.len() != 4 {
            return Err(GraphError::Rank {
                op: "conv2d weight",
                expected: 4,
                got: wt.to_vec(),
            });
        }
        if x[1] != wt[1] {
            return Err(GraphError::ShapeMismatch {
                op: "conv2d channels",
                lhs: x.to_vec(),
                rhs: wt.to_vec(),
            });
        }
        if stride == 0 {
            return Err(GraphError::Invalid {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (h, w, kh, kw) = (x[2], x[3], wt[2], wt[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(GraphError::Invalid {
                op: "conv2d",
                msg: format!("input {h}x{w} (pad {pad}) smaller than kernel {kh}x{kw}"),
            });
        }
        Ok(Self {
            n: x[0],
            ci: x[1],
            h,
            w,
            co: wt[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn block(&self) -> usize {
        (COL_BLOCK / self.k().max(1))
            .max(self.wo)
            .min(self.out_pixels())
            .max(1)
    }
}

/// Walks the output pixels `p0..p1` of one kernel tap, yielding
/// `(offset_in_block, Some(input_index))` or `None` for padding.
#[inline]
fn for_each_tap<F: FnMut(usize, Option<usize>)>(
    g: &ConvGeom,
    ki: usize,
    kj: usize,
    p0: usize,
    p1: usize,
    mut f: F,
) {
    let mut q = p0;
    let mut idx = 0;
    while q < p1 {
        let oh = q / g.wo;
        let ow0 = q % g.wo;
        let ow1 = g.wo.min(ow0 + (p1 - q));
        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
        if ih < 0 || ih >= g.h as isize {
            for _ in ow0..ow1 {
                f(idx, None);
                idx += 1;
            }
        } else {
            let row = ih as usize * g.w;
            for ow in ow0..ow1 {
                let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                if iw < 0 || iw >= g.w as isize {
                    f(idx, None);
                } else {
                    f(idx, Some(row + iw as usize));
                }
                idx += 1;
            }
        }
        q += ow1 - ow0;
    }
}

fn im2col<T: Real>(g: &ConvGeom, x_n: &[T], p0: usize, p1: usize, cols: &mut [T]) {
    let len = p1 - p0;
    let plane = g.h * g.w;
    for c in 0..g.ci {
        let xc = &x_n[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * len..(row + 1) * len];
                for_each_tap(g, ki, kj, p0, p1, |i, src| {
                    dst[i] = match src {
                        Some(s) => xc[s],
                        None => T::zero(),
                    };
                });
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], p0: usize, p1: usize, dx_n: &mut [T]) {
    let len = p1 - p0;
    let plane = g.h * g.w;
    for c in 0..g.ci {
        let dxc = &mut dx_n[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * len..(row + 1) * len];
                for_each_tap(g, ki, kj, p0, p1, |i, dst| {
                    if let Some(d) = dst {
                        dxc[d] += src[i];
                    }
                });
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    b: Option<&ArrayD<T>>,
) -> ArrayD<T> {
    let x = x.as_standard_layout();
    let w = w.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let w2 = ArrayView2::from_shape((g.co, g.k()), w.as_slice().expect("standard layout"))
        .expect("weight reshape");
    let npix = g.out_pixels();
    let mut out = vec![T::zero(); g.n * g.co * npix];
    let block = g.block();
    let mut cols = vec![T::zero(); g.k() * block];
    let in_sz = g.ci * g.h * g.w;
    for n in 0..g.n {
        let x_n = &xs[n * in_sz..(n + 1) * in_sz];
        let out_n = &mut out[n * g.co * npix..(n + 1) * g.co * npix];
        let mut out2 = ArrayViewMut2::from_shape((g.co, npix), out_n).expect("out reshape");
        let mut p0 = 0;
        while p0 < npix {
            let p1 = (p0 + block).min(npix);
            let len = p1 - p0;
            im2col(g, x_n, p0, p1, &mut cols[..g.k() * len]);
            let cview = ArrayView2::from_shape((g.k(), len), &cols[..g.k() * len]).unwrap();
            let mut dst = out2.slice_mut(s![.., p0..p1]);
            general_mat_mul(T::one(), &w2, &cview, T::zero(), &mut dst);
            p0 = p1;
        }
        if let Some(b) = b {
            for (co, &bv) in b.iter().enumerate() {
                out2.row_mut(co).mapv_inplace(|v| v + bv);
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[g.n, g.co, g.ho, g.wo]), out).expect("conv output shape")
}

/// Returns `(dx, dw, db)`; `dx` only when `need_dx`.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    dy: &ArrayD<T>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<ArrayD<T>>, ArrayD<T>, ArrayD<T>) {
    let x = x.as_standard_layout();
    let w = w.as_standard_layout();
    let dy = dy.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let dys = dy.as_slice().unwrap();
    let w2 = ArrayView2::from_shape((g.co, g.k()), w.as_slice().unwrap()).unwrap();
    let npix = g.out_pixels();
    let in_sz = g.ci * g.h * g.w;
    let block = g.block();
    let mut cols = vec![T::zero(); g.k() * block];
    let mut dcols = vec![T::zero(); g.k() * block];
    let mut dw = ndarray::Array2::<T>::zeros((g.co, g.k()));
    let mut db = ndarray::Array1::<T>::zeros(g.co);
    let mut dx = if need_dx {
        Some(vec![T::zero(); g.n * in_sz])
    } else {
        None
    };
    for n in 0..g.n {
        let x_n = &xs[n * in_sz..(n + 1) * in_sz];
        let dy_n = ArrayView2::from_shape((g.co, npix), &dys[n * g.co * npix..(n + 1) * g.co * npix])
            .unwrap();
        for co in 0..g.co {
            db[co] += dy_n.row(co).sum();
        }
        let mut p0 = 0;
        while p0 < npix {
            let p1 = (p0 + block).min(npix);
            let len = p1 - p0;
            let dyb = dy_n.slice(s![.., p0..p1]);
            if need_dw {
                im2col(g, x_n, p0, p1, &mut cols[..g.k() * len]);
                let cview = ArrayView2::from_shape((g.k(), len), &cols[..g.k() * len]).unwrap();
                general_mat_mul(T::one(), &dyb, &cview.t(), T::one(), &mut dw);
            }
            if let Some(dx) = dx.as_mut() {
                let mut dc =
                    ArrayViewMut2::from_shape((g.k(), len), &mut dcols[..g.k() * len]).unwrap();
                general_mat_mul(T::one(), &w2.t(), &dyb, T::zero(), &mut dc);
                col2im(
                    g,
                    &dcols[..g.k() * len],
                    p0,
                    p1,
                    &mut dx[n * in_sz..(n + 1) * in_sz],
                );
            }
            p0 = p1;
        }
    }
    let dx = dx.map(|v| ArrayD::from_shape_vec(IxDyn(&[g.n, g.ci, g.h, g.w]), v).unwrap());
    let dw = dw
        .into_shape_with_order(IxDyn(&[g.co, g.ci, g.kh, g.kw]))
        .unwrap();
    (dx, dw, db.into_dyn())
}

/// Per-(sample, channel) normalisation. Returns the normalised tensor and
/// the reciprocal standard deviation of every plane.
pub(crate) fn instance_norm_forward<T: Real>(x: &ArrayD<T>, eps: f64) -> (ArrayD<T>, Vec<T>) {
    let shape = x.shape().to_vec();
    let plane = shape[2] * shape[3];
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = vec![T::zero(); xs.len()];
    let planes = shape[0] * shape[1];
    let mut inv = Vec::with_capacity(planes);
    let np = T::from_f64_lossy(plane as f64);
    let eps = T::from_f64_lossy(eps);
    for p in 0..planes {
        let src = &xs[p * plane..(p + 1) * plane];
        let mean = src.iter().copied().sum::<T>() / np;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / np;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(src) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap(), inv)
}

pub(crate) fn instance_norm_backward<T: Real>(y: &ArrayD<T>, inv: &[T], dy: &ArrayD<T>) -> ArrayD<T> {
    let shape = y.shape().to_vec();
    let plane = shape[2] * shape[3];
    let y = y.as_standard_layout();
    let dy = dy.as_standard_layout();
    let ys = y.as_slice().unwrap();
    let dys = dy.as_slice().unwrap();
    let mut dx = vec![T::zero(); ys.len()];
    let np = T::from_f64_lossy(plane as f64);
    for (p, &is) in inv.iter().enumerate() {
        let r = p * plane..(p + 1) * plane;
        let yp = &ys[r.clone()];
        let dp = &dys[r.clone()];
        let mean_dy = dp.iter().copied().sum::<T>() / np;
        let mean_dyy = dp.iter().zip(yp).map(|(&d, &v)| d * v).sum::<T>() / np;
        for ((o, &d), &v) in dx[r].iter_mut().zip(dp).zip(yp) {
            *o = is * (d - mean_dy - v * mean_dyy);
        }
    }
    ArrayD::from_shape_vec(IxDyn(&shape), dx).unwrap()
}

pub(crate) fn upsample_nearest2x<T: Real>(x: &ArrayD<T>) -> ArrayD<T> {
    let sh = x.shape();
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(i, j, y, xx)| x4[[i, j, y / 2, xx / 2]]).into_dyn()
}

pub(crate) fn upsample_nearest2x_backward<T: Real>(dy: &ArrayD<T>) -> ArrayD<T> {
    let sh = dy.shape();
    let (n, c, h, w) = (sh[0], sh[1], sh[2] / 2, sh[3] / 2);
    let dy4 = dy.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let out = Array4::from_shape_fn((n, c, h, w), |(i, j, y, x)| {
        dy4[[i, j, 2 * y, 2 * x]]
            + dy4[[i, j, 2 * y + 1, 2 * x]]
            + dy4[[i, j, 2 * y, 2 * x + 1]]
            + dy4[[i, j, 2 * y + 1, 2 * x + 1]]
    });
    out.into_dyn()
}

/// Adaptive average pooling of an `[N, C, H, W]` array to `[N, C, oh, ow]`.
/// Cell `i` averages input rows `floor(i*H/oh) .. ceil((i+1)*H/oh)`, so
/// integer factors reduce to plain block averaging.
pub fn adaptive_avg_pool2d<T: Real>(x: &ArrayD<T>, oh: usize, ow: usize) -> Result<ArrayD<T>> {
    if x.ndim() != 4 {
        return Err(GraphError::Rank {
            op: "adaptive_avg_pool2d",
            expected: 4,
            got: x.shape().to_vec(),
        });
    }
    let sh = x.shape();
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if oh == 0 || ow == 0 || oh > h || ow > w {
        return Err(GraphError::Invalid {
            op: "adaptive_avg_pool2d",
            msg: format!("cannot pool {h}x{w} to {oh}x{ow}"),
        });
    }
    let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let out = Array4::from_shape_fn((n, c, oh, ow), |(i, j, y, xx)| {
        let y0 = y * h / oh;
        let y1 = ((y + 1) * h).div_ceil(oh);
        let x0 = xx * w / ow;
        let x1 = ((xx + 1) * w).div_ceil(ow);
        let mut acc = T::zero();
        for yy in y0..y1 {
            for xi in x0..x1 {
                acc += x4[[i, j, yy, xi]];
            }
        }
        acc / T::from_f64_lossy(((y1 - y0) * (x1 - x0)) as f64)
    });
    Ok(out.into_dyn())
}

/// Bilinear resampling of an `[N, C, h, w]` array to `[N, C, oh, ow]` with
/// half-pixel centres (sample `i` sits at source coordinate
/// `(i + 0.5) * h / oh - 0.5`, clamped to the border).
pub fn bilinear_resize2d<T: Real>(x: &ArrayD<T>, oh: usize, ow: usize) -> Result<ArrayD<T>> {
    if x.ndim() != 4 {
        return Err(GraphError::Rank {
            op: "bilinear_resize2d",
            expected: 4,
            got: x.shape().to_vec(),
        });
    }
    let sh = x.shape();
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(GraphError::Invalid {
            op: "bilinear_resize2d",
            msg: "empty grid".into(),
        });
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = if i0 + 1 < inp { i0 + 1 } else { i0 };
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(oh, h);
    let xs = axis(ow, w);
    let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let out = Array4::from_shape_fn((n, c, oh, ow), |(i, j, y, xx)| {
        let (y0, y1, ly) = ys[y];
        let (x0, x1, lx) = xs[xx];
        let ly = T::from_f64_lossy(ly);
        let lx = T::from_f64_lossy(lx);
        let one = T::one();
        (one - ly) * ((one - lx) * x4[[i, j, y0, x0]] + lx * x4[[i, j, y0, x1]])
            + ly * ((one - lx) * x4[[i, j, y1, x0]] + lx * x4[[i, j, y1, x1]])
    });
    Ok(out.into_dyn())
}
