use crate::error::Result;
use autograd::{init, Graph, ParamStore, Real, Var};
use rand::Rng;

/// Weight standard deviation for every freshly built layer.
pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const NORM_EPS: f64 = 1e-5;

/// 2-D convolution. Holds store positions rather than [`autograd::ParamId`]s
/// so a cloned store keeps working with the same layer description.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv {
    w: usize,
    b: Option<usize>,
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
}

pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// `bias` is the initial bias value, or `None` for a bias-free layer.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        s: ConvShape,
        bias: Option<f64>,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            init::normal(&[s.cout, s.cin, s.kernel, s.kernel], INIT_STD, rng),
        );
        let b = bias.map(|v| store.add(format!("{name}.bias"), init::constant(&[s.cout], v)).index());
        Self {
            w: w.index(),
            b,
            stride: s.stride,
            pad: s.pad,
            kernel: s.kernel,
            cin: s.cin,
            cout: s.cout,
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, store.id_at(self.w));
        let b = self.b.map(|i| g.param(store, store.id_at(i)));
        Ok(g.conv2d(x, w, b, self.stride, self.pad)?)
    }

    /// Multiply-accumulates for one sample at the given output size.
    pub fn macs(&self, out_hw: usize) -> usize {
        self.cin * self.cout * self.kernel * self.kernel * out_hw
    }
}

/// Fully connected layer `x · wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) -> Self {
        let w = store.add(format!("{name}.weight"), init::normal(&[cout, cin], INIT_STD, rng));
        let b = store.add(format!("{name}.bias"), init::zeros(&[cout]));
        Self {
            w: w.index(),
            b: b.index(),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, store.id_at(self.w));
        let b = g.param(store, store.id_at(self.b));
        Ok(g.linear(x, w, Some(b))?)
    }
}

/// Conv → instance norm → optional ReLU.
pub(crate) fn conv_norm<T: Real>(
    g: &Graph<T>,
    store: &ParamStore<T>,
    conv: &Conv,
    x: Var,
    relu: bool,
) -> Result<Var> {
    let y = g.instance_norm(conv.forward(g, store, x)?, NORM_EPS)?;
    Ok(if relu { g.relu(y) } else { y })
}
