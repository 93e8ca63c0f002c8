use super::layers::{Conv, ConvShape};
use crate::error::{invalid, Result};
use autograd::{Graph, ParamStore, Real, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

const SLOPE: f64 = 0.2;

/// Unconditional PatchGAN over single-channel images. `n_layers` stride-2
/// 4×4 convolutions are followed by two stride-1 convolutions of size
/// `tail_kernel`; no normalisation layers, so scores are translation
/// covariant away from the zero-padded border.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub n_layers: usize,
    pub base_width: usize,
    pub tail_kernel: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            n_layers: 3,
            base_width: 16,
            tail_kernel: 3,
        }
    }
}

impl DiscriminatorSpec {
    /// 4×4 tails and 64 base channels: a 70-pixel receptive field.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 3,
            base_width: 64,
            tail_kernel: 4,
        }
    }

    fn layers(&self) -> Vec<ConvShape> {
        let width = |i: usize| self.base_width << i.min(3);
        let mut out = Vec::new();
        let mut cin = 1;
        for i in 0..self.n_layers {
            out.push(ConvShape {
                cin,
                cout: width(i),
                kernel: 4,
                stride: 2,
                pad: 1,
            });
            cin = width(i);
        }
        out.push(ConvShape {
            cin,
            cout: width(self.n_layers),
            kernel: self.tail_kernel,
            stride: 1,
            pad: 1,
        });
        out.push(ConvShape {
            cin: width(self.n_layers),
            cout: 1,
            kernel: self.tail_kernel,
            stride: 1,
            pad: 1,
        });
        out
    }

    /// Side of the input square that influences one score.
    pub fn receptive_field(&self) -> usize {
        self.layers().iter().rev().fold(1, |r, l| (r - 1) * l.stride + l.kernel)
    }

    /// Product of all strides.
    pub fn stride(&self) -> usize {
        1 << self.n_layers
    }

    /// Score grid for an `h × w` input.
    pub fn output_grid(&self, h: usize, w: usize) -> (usize, usize) {
        let step = |n: usize| {
            self.layers()
                .iter()
                .fold(n, |n, l| (n + 2 * l.pad - l.kernel) / l.stride + 1)
        };
        (step(h), step(w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 || self.base_width == 0 || !(3..=4).contains(&self.tail_kernel) {
            return Err(invalid(
                "discriminator needs at least 2 downsampling layers, a positive width and tail kernel 3 or 4",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T: Real> {
    spec: DiscriminatorSpec,
    pub params: ParamStore<T>,
    convs: Vec<Conv>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let convs = spec
            .layers()
            .into_iter()
            .enumerate()
            .map(|(i, s)| Conv::new(&mut params, rng, &format!("layer{i}"), s, Some(0.0)))
            .collect();
        Ok(Self { spec, params, convs })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    /// Raw scores `[N, 1, h, w]` for images `[N, 1, H, W]`.
    pub fn forward(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        let rf = self.spec.receptive_field();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(invalid(format!("discriminator input must be [N, 1, H, W], got {shape:?}")));
        }
        if shape[2] < rf || shape[3] < rf {
            return Err(invalid(format!(
                "input {}x{} is smaller than the {rf}-pixel receptive field",
                shape[2], shape[3]
            )));
        }
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, &self.params, h)?;
            if i < last {
                h = g.leaky_relu(h, T::from_f64_lossy(SLOPE));
            }
        }
        Ok(h)
    }
}
