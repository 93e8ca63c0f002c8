use super::layers::{conv_norm, Conv, ConvShape, Dense};
use super::taps::{FeatureTapSet, TapInfo};
use crate::error::{invalid, Error, Result};
use autograd::{Graph, ParamStore, Real, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Number of stride-2 stages in each encoder (and upsampling stages in the
/// decoder).
pub const DOWNSAMPLINGS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    /// Hard clip to `[0, 1]`; the output bias starts at 0.5.
    Clamp,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_encoders: usize,
    pub base_width: usize,
    pub n_res_blocks: usize,
    /// Upper bound on any level's channel count; `None` doubles freely.
    #[serde(default)]
    pub max_width: Option<usize>,
    pub tap_indices: Vec<usize>,
    pub distill_tap_indices: Vec<usize>,
    /// Bottleneck ratio of the fusion perceptrons.
    pub fusion_reduction: usize,
    pub output_activation: OutputActivation,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_encoders: 3,
            base_width: 16,
            n_res_blocks: 3,
            max_width: None,
            tap_indices: vec![0, 4, 8, 12, 16],
            distill_tap_indices: vec![4, 8, 12, 16, 21],
            fusion_reduction: 4,
            output_activation: OutputActivation::Clamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Stem,
    Downsample,
    BlockConvA,
    BlockConvB,
    BlockOutput,
    Fusion,
    Upsample,
    Output,
}

/// One row of the generator's layer enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub index: usize,
    pub name: String,
    pub kind: LayerKind,
    /// Channels of the tapped activation. Encoder-side layers report the
    /// channel concatenation of all encoders.
    pub channels: usize,
    /// Total downsampling factor relative to the input.
    pub stride: usize,
}

impl GeneratorSpec {
    /// Nine residual blocks per encoder at 64 base channels.
    pub fn full_scale() -> Self {
        Self {
            base_width: 64,
            n_res_blocks: 9,
            ..Self::default()
        }
    }

    pub fn width(&self, level: usize) -> usize {
        let w = self.base_width << level;
        self.max_width.map_or(w, |m| w.min(m))
    }

    pub fn fusion_index(&self) -> usize {
        1 + DOWNSAMPLINGS + 3 * self.n_res_blocks
    }

    pub fn output_index(&self) -> usize {
        self.fusion_index() + 3 * self.n_res_blocks + DOWNSAMPLINGS + 1
    }

    /// Number of enumerated layers.
    pub fn depth(&self) -> usize {
        self.output_index() + 1
    }

    /// Atomic layers in forward order. Index 0 is the stem; each residual
    /// block contributes its two convolutions and its output.
    pub fn layer_table(&self) -> Vec<LayerInfo> {
        let e = self.n_encoders;
        let deep = self.width(DOWNSAMPLINGS);
        let mut rows = Vec::with_capacity(self.depth());
        let mut push = |name: String, kind, channels, stride| {
            let index = rows.len();
            rows.push(LayerInfo {
                index,
                name,
                kind,
                channels,
                stride,
            })
        };
        push("encoder stem".into(), LayerKind::Stem, e * self.width(0), 1);
        for d in 0..DOWNSAMPLINGS {
            push(
                format!("encoder downsample {}", d + 1),
                LayerKind::Downsample,
                e * self.width(d + 1),
                2 << d,
            );
        }
        let s = 1 << DOWNSAMPLINGS;
        for (side, mult) in [("encoder", e), ("decoder", 1)] {
            if side == "decoder" {
                push("fusion".into(), LayerKind::Fusion, deep, s);
            }
            for b in 0..self.n_res_blocks {
                push(format!("{side} block {} conv a", b + 1), LayerKind::BlockConvA, mult * deep, s);
                push(format!("{side} block {} conv b", b + 1), LayerKind::BlockConvB, mult * deep, s);
                push(format!("{side} block {} output", b + 1), LayerKind::BlockOutput, mult * deep, s);
            }
        }
        for u in 0..DOWNSAMPLINGS {
            let level = DOWNSAMPLINGS - 1 - u;
            push(format!("decoder upsample {}", u + 1), LayerKind::Upsample, self.width(level), 1 << level);
        }
        push("output".into(), LayerKind::Output, 1, 1);
        rows
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_encoders == 0 || self.base_width == 0 || self.fusion_reduction == 0 {
            return Err(invalid("encoder count, width and fusion reduction must be positive"));
        }
        if self.max_width == Some(0) {
            return Err(invalid("max_width must be positive"));
        }
        if self.width(DOWNSAMPLINGS) < self.fusion_reduction {
            return Err(invalid("fusion bottleneck would have zero units"));
        }
        check_taps(&self.tap_indices, self.depth())?;
        check_taps(&self.distill_tap_indices, self.depth())
    }
}

fn check_taps(taps: &[usize], depth: usize) -> Result<()> {
    for w in taps.windows(2) {
        if w[0] >= w[1] {
            return Err(invalid(format!("tap indices must be strictly increasing: {taps:?}")));
        }
    }
    match taps.iter().find(|&&t| t >= depth) {
        Some(&index) => Err(Error::TapOutOfRange { index, depth }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, c: usize) -> Self {
        let shape = || ConvShape {
            cin: c,
            cout: c,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        Self {
            a: Conv::new(store, rng, &format!("{name}.conv_a"), shape(), None),
            b: Conv::new(store, rng, &format!("{name}.conv_b"), shape(), None),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Encoder {
    stem: Conv,
    downs: Vec<Conv>,
    blocks: Vec<ResBlock>,
}

/// Channel-attention fusion of equally shaped encoder streams: each branch
/// squeezes its stream to per-channel logits; a softmax across branches turns
/// them into convex per-channel weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    branches: Vec<(Dense, Dense)>,
}

impl Fusion {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, n: usize, c: usize, reduction: usize) -> Self {
        let hidden = c / reduction;
        let branches = (0..n)
            .map(|b| {
                (
                    Dense::new(store, rng, &format!("fusion.branch{b}.fc1"), c, hidden),
                    Dense::new(store, rng, &format!("fusion.branch{b}.fc2"), hidden, c),
                )
            })
            .collect();
        Self { branches }
    }

    /// Returns the fused grid `[N, C, H, W]` and the gates `[N, branches, C]`.
    pub fn forward<T: Real>(&self, g: &Graph<T>, store: &ParamStore<T>, feats: &[Var]) -> Result<(Var, Var)> {
        if feats.len() != self.branches.len() {
            return Err(invalid(format!(
                "fusion expects {} streams, got {}",
                self.branches.len(),
                feats.len()
            )));
        }
        let shape = g.shape(feats[0]);
        for &f in &feats[1..] {
            if g.shape(f) != shape {
                return Err(Error::Shape {
                    context: "fusion streams".into(),
                    lhs: shape,
                    rhs: g.shape(f),
                });
            }
        }
        let logits = feats
            .iter()
            .zip(&self.branches)
            .map(|(&f, (fc1, fc2))| {
                let squeezed = g.global_avg_pool(f)?;
                let hidden = g.relu(fc1.forward(g, store, squeezed)?);
                fc2.forward(g, store, hidden)
            })
            .collect::<Result<Vec<_>>>()?;
        let gates = g.softmax(g.stack(&logits, 1)?, 1)?;
        let mut out = None;
        for (b, &f) in feats.iter().enumerate() {
            let term = g.mul_channel(f, g.select(gates, 1, b)?)?;
            out = Some(match out {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        Ok((out.expect("at least one branch"), gates))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Decoder {
    blocks: Vec<ResBlock>,
    ups: Vec<Conv>,
    out: Conv,
}

/// Multi-encoder, single-decoder image generator with enumerated feature
/// taps (see [`GeneratorSpec::layer_table`]).
#[derive(Debug, Clone)]
pub struct Generator<T: Real> {
    spec: GeneratorSpec,
    pub params: ParamStore<T>,
    encoders: Vec<Encoder>,
    fusion: Fusion,
    decoder: Decoder,
}

/// Result of a generator pass. `image` is `None` when the pass stopped
/// before the output layer.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub image: Option<Var>,
    pub taps: FeatureTapSet,
    pub gates: Option<Var>,
}

struct Recorder<'a> {
    want: &'a BTreeSet<usize>,
    stop: usize,
    taps: FeatureTapSet,
}

impl<T: Real> Generator<T> {
    pub fn new(spec: GeneratorSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let c3 = |cin, cout, stride| ConvShape {
            cin,
            cout,
            kernel: 3,
            stride,
            pad: 1,
        };
        let deep = spec.width(DOWNSAMPLINGS);
        let encoders = (0..spec.n_encoders)
            .map(|e| {
                let p = format!("enc{e}");
                let stem = Conv::new(
                    &mut store,
                    rng,
                    &format!("{p}.stem"),
                    ConvShape {
                        cin: 1,
                        cout: spec.width(0),
                        kernel: 7,
                        stride: 1,
                        pad: 3,
                    },
                    None,
                );
                let downs = (0..DOWNSAMPLINGS)
                    .map(|d| {
                        Conv::new(
                            &mut store,
                            rng,
                            &format!("{p}.down{d}"),
                            c3(spec.width(d), spec.width(d + 1), 2),
                            None,
                        )
                    })
                    .collect();
                let blocks = (0..spec.n_res_blocks)
                    .map(|b| ResBlock::new(&mut store, rng, &format!("{p}.block{b}"), deep))
                    .collect();
                Encoder { stem, downs, blocks }
            })
            .collect();
        let fusion = Fusion::new(&mut store, rng, spec.n_encoders, deep, spec.fusion_reduction);
        let blocks = (0..spec.n_res_blocks)
            .map(|b| ResBlock::new(&mut store, rng, &format!("dec.block{b}"), deep))
            .collect();
        let ups = (0..DOWNSAMPLINGS)
            .map(|u| {
                let level = DOWNSAMPLINGS - 1 - u;
                Conv::new(
                    &mut store,
                    rng,
                    &format!("dec.up{u}"),
                    c3(spec.width(level + 1), spec.width(level), 1),
                    None,
                )
            })
            .collect();
        let out_bias = match spec.output_activation {
            OutputActivation::Clamp => 0.5,
            OutputActivation::Sigmoid => 0.0,
        };
        let out = Conv::new(
            &mut store,
            rng,
            "dec.out",
            ConvShape {
                cin: spec.width(0),
                cout: 1,
                kernel: 7,
                stride: 1,
                pad: 3,
            },
            Some(out_bias),
        );
        Ok(Self {
            spec,
            params: store,
            encoders,
            fusion,
            decoder: Decoder { blocks, ups, out },
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    /// Multiply-accumulates of one forward pass over a single `h × w` input.
    pub fn forward_macs(&self, h: usize, w: usize) -> usize {
        let hw = |s: usize| (h / s) * (w / s);
        let deep = hw(1 << DOWNSAMPLINGS);
        let enc: usize = self
            .encoders
            .iter()
            .map(|e| {
                e.stem.macs(hw(1))
                    + e.downs.iter().enumerate().map(|(d, c)| c.macs(hw(2 << d))).sum::<usize>()
                    + e.blocks.iter().map(|b| b.a.macs(deep) + b.b.macs(deep)).sum::<usize>()
            })
            .sum();
        let dec = self.decoder.blocks.iter().map(|b| b.a.macs(deep) + b.b.macs(deep)).sum::<usize>()
            + self
                .decoder
                .ups
                .iter()
                .enumerate()
                .map(|(u, c)| c.macs(hw(1 << (DOWNSAMPLINGS - 1 - u))))
                .sum::<usize>()
            + self.decoder.out.macs(hw(1));
        enc + dec
    }

    /// Full pass producing the image and the requested taps.
    pub fn forward(&self, g: &Graph<T>, x: Var, taps: &[usize]) -> Result<GeneratorOutput> {
        self.run(g, x, taps, None)
    }

    /// Pass that stops right after layer `stop_after`; the image is only
    /// produced when that is the output layer.
    pub fn forward_until(&self, g: &Graph<T>, x: Var, taps: &[usize], stop_after: usize) -> Result<GeneratorOutput> {
        self.run(g, x, taps, Some(stop_after))
    }

    fn run(&self, g: &Graph<T>, x: Var, taps: &[usize], stop_after: Option<usize>) -> Result<GeneratorOutput> {
        let depth = self.spec.depth();
        check_taps(taps, depth)?;
        let stop = stop_after.unwrap_or(depth - 1);
        if stop >= depth {
            return Err(Error::TapOutOfRange { index: stop, depth });
        }
        if let Some(&t) = taps.iter().find(|&&t| t > stop) {
            return Err(invalid(format!("tap {t} lies beyond the stopping layer {stop}")));
        }
        let shape = g.shape(x);
        let factor = 1 << DOWNSAMPLINGS;
        if shape.len() != 4
            || shape[1] != self.spec.n_encoders
            || !shape[2].is_multiple_of(factor)
            || !shape[3].is_multiple_of(factor)
            || shape[2] == 0
            || shape[3] == 0
        {
            return Err(invalid(format!(
                "generator input must be [N, {}, H, W] with H, W positive multiples of {factor}, got {shape:?}",
                self.spec.n_encoders
            )));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let want: BTreeSet<usize> = taps.iter().copied().collect();
        let mut rec = Recorder {
            want: &want,
            stop,
            taps: FeatureTapSet::new((h, w)),
        };
        let table = self.spec.layer_table();
        let p = &self.params;

        let mut streams = (0..self.spec.n_encoders)
            .map(|e| Ok(g.reshape(g.select(x, 1, e)?, &[n, 1, h, w])?))
            .collect::<Result<Vec<_>>>()?;
        let mut idx = 0;
        let mut fused_gates: Option<Var> = None;

        macro_rules! emit {
            ($vals:expr) => {{
                let vals: &[Var] = $vals;
                if rec.want.contains(&idx) {
                    let v = g.concat(vals, 1)?;
                    rec.taps.insert(idx, v, TapInfo::from(&table[idx]), g)?;
                }
                let done = idx == rec.stop;
                idx += 1;
                if done {
                    return Ok(GeneratorOutput {
                        image: None,
                        taps: rec.taps,
                        gates: fused_gates,
                    });
                }
            }};
        }

        streams = streams
            .iter()
            .zip(&self.encoders)
            .map(|(&s, e)| conv_norm(g, p, &e.stem, s, true))
            .collect::<Result<_>>()?;
        emit!(&streams);
        for d in 0..DOWNSAMPLINGS {
            streams = streams
                .iter()
                .zip(&self.encoders)
                .map(|(&s, e)| conv_norm(g, p, &e.downs[d], s, true))
                .collect::<Result<_>>()?;
            emit!(&streams);
        }
        for b in 0..self.spec.n_res_blocks {
            let a: Vec<Var> = streams
                .iter()
                .zip(&self.encoders)
                .map(|(&s, e)| conv_norm(g, p, &e.blocks[b].a, s, true))
                .collect::<Result<_>>()?;
            emit!(&a);
            let bb: Vec<Var> = a
                .iter()
                .zip(&self.encoders)
                .map(|(&s, e)| conv_norm(g, p, &e.blocks[b].b, s, false))
                .collect::<Result<_>>()?;
            emit!(&bb);
            streams = streams
                .iter()
                .zip(&bb)
                .map(|(&s, &r)| Ok(g.add(s, r)?))
                .collect::<Result<_>>()?;
            emit!(&streams);
        }

        let (mut y, gates) = self.fusion.forward(g, p, &streams)?;
        fused_gates = Some(gates);
        emit!(&[y]);
        for blk in &self.decoder.blocks {
            let a = conv_norm(g, p, &blk.a, y, true)?;
            emit!(&[a]);
            let r = conv_norm(g, p, &blk.b, a, false)?;
            emit!(&[r]);
            y = g.add(y, r)?;
            emit!(&[y]);
        }
        for up in &self.decoder.ups {
            y = conv_norm(g, p, up, g.upsample_nearest2x(y)?, true)?;
            emit!(&[y]);
        }
        let raw = self.decoder.out.forward(g, p, y)?;
        let image = match self.spec.output_activation {
            OutputActivation::Clamp => g.clamp(raw, T::zero(), T::one()),
            OutputActivation::Sigmoid => g.sigmoid(raw),
        };
        if rec.want.contains(&idx) {
            rec.taps.insert(idx, image, TapInfo::from(&table[idx]), g)?;
        }
        Ok(GeneratorOutput {
            image: Some(image),
            taps: rec.taps,
            gates: fused_gates,
        })
    }
}
