use super::generator::LayerInfo;
use crate::error::{Error, Result};
use autograd::{Graph, Real, Var};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetRole {
    Teacher,
    Student,
}

/// Declared geometry of one tapped activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapInfo {
    pub channels: usize,
    pub stride: usize,
}

impl From<&LayerInfo> for TapInfo {
    fn from(l: &LayerInfo) -> Self {
        Self {
            channels: l.channels,
            stride: l.stride,
        }
    }
}

/// Intermediate generator activations keyed by layer index. Every entry is
/// shape-checked against its declared channels and stride on insertion.
#[derive(Debug, Clone)]
pub struct FeatureTapSet {
    input_hw: (usize, usize),
    taps: BTreeMap<usize, (Var, TapInfo)>,
    pub source: Option<NetRole>,
}

impl FeatureTapSet {
    pub fn new(input_hw: (usize, usize)) -> Self {
        Self {
            input_hw,
            taps: BTreeMap::new(),
            source: None,
        }
    }

    pub fn with_source(mut self, role: NetRole) -> Self {
        self.source = Some(role);
        self
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn insert<T: Real>(&mut self, index: usize, v: Var, info: TapInfo, g: &Graph<T>) -> Result<()> {
        let shape = g.shape(v);
        let (h, w) = self.input_hw;
        let expected = [info.channels, h / info.stride, w / info.stride];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::Shape {
                context: format!("tap {index}"),
                lhs: shape,
                rhs: expected.to_vec(),
            });
        }
        self.taps.insert(index, (v, info));
        Ok(())
    }

    pub fn get(&self, index: usize) -> Result<Var> {
        self.taps.get(&index).map(|t| t.0).ok_or(Error::MissingTap(index))
    }

    pub fn info(&self, index: usize) -> Result<TapInfo> {
        self.taps.get(&index).map(|t| t.1).ok_or(Error::MissingTap(index))
    }

    /// Spatial size of a tap's grid.
    pub fn grid(&self, index: usize) -> Result<(usize, usize)> {
        let s = self.info(index)?.stride;
        Ok((self.input_hw.0 / s, self.input_hw.1 / s))
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.taps.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Re-registers every tap of `from` as a constant on `to`. Used to hand
    /// features computed in an inference graph to a training graph.
    pub fn transplant<T: Real>(&self, from: &Graph<T>, to: &Graph<T>) -> FeatureTapSet {
        FeatureTapSet {
            input_hw: self.input_hw,
            taps: self
                .taps
                .iter()
                .map(|(&k, &(v, info))| (k, (to.constant((*from.value(v)).clone()), info)))
                .collect(),
            source: self.source,
        }
    }

    /// Same taps cut from the graph.
    pub fn detached<T: Real>(&self, g: &Graph<T>) -> FeatureTapSet {
        self.transplant(g, g)
    }
}
