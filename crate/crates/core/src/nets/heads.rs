use super::generator::GeneratorSpec;
use super::layers::Dense;
use super::taps::FeatureTapSet;
use crate::error::{invalid, Error, Result};
use autograd::{Graph, ParamStore, Real, Var};
use rand::Rng;
use std::collections::BTreeMap;

pub const EMBED_DIM: usize = 128;
const NORM_EPS: f64 = 1e-7;

/// `(sample, row, column)` on a tap grid.
pub type GridPos = (usize, usize, usize);

/// One two-layer perceptron per contrastive tap, mapping a channel vector
/// to a unit-norm embedding.
#[derive(Debug, Clone)]
pub struct ProjectionHeads<T: Real> {
    pub params: ParamStore<T>,
    heads: BTreeMap<usize, (Dense, Dense)>,
    dim: usize,
}

impl<T: Real> ProjectionHeads<T> {
    /// Heads for every entry of `spec.tap_indices`.
    pub fn new(spec: &GeneratorSpec, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        if dim == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        let table = spec.layer_table();
        let mut params = ParamStore::new();
        let heads = spec
            .tap_indices
            .iter()
            .map(|&t| {
                let c = table[t].channels;
                let fc1 = Dense::new(&mut params, rng, &format!("tap{t}.fc1"), c, dim);
                let fc2 = Dense::new(&mut params, rng, &format!("tap{t}.fc2"), dim, dim);
                (t, (fc1, fc2))
            })
            .collect();
        Ok(Self { params, heads, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn taps(&self) -> impl Iterator<Item = usize> + '_ {
        self.heads.keys().copied()
    }

    /// Embeddings `[P, dim]` of the channel vectors at `positions` on `tap`.
    pub fn embed(&self, g: &Graph<T>, taps: &FeatureTapSet, tap: usize, positions: &[GridPos]) -> Result<Var> {
        let (fc1, fc2) = self
            .heads
            .get(&tap)
            .ok_or_else(|| invalid(format!("no projection head for tap {tap}")))?;
        let (gh, gw) = taps.grid(tap)?;
        let v = taps.get(tap)?;
        let n = g.shape(v)[0];
        if let Some(p) = positions.iter().find(|p| p.0 >= n || p.1 >= gh || p.2 >= gw) {
            return Err(Error::InvalidArgument(format!(
                "location {p:?} outside the {n}x{gh}x{gw} grid of tap {tap}"
            )));
        }
        let rows = g.gather_positions(v, positions)?;
        let hidden = g.relu(fc1.forward(g, &self.params, rows)?);
        let z = fc2.forward(g, &self.params, hidden)?;
        Ok(g.l2_normalize_rows(z, NORM_EPS)?)
    }
}

/// Embeds every listed location of every listed tap.
pub fn extract_patch_embeddings<T: Real>(
    g: &Graph<T>,
    taps: &FeatureTapSet,
    heads: &ProjectionHeads<T>,
    locations: &BTreeMap<usize, Vec<GridPos>>,
) -> Result<BTreeMap<usize, Var>> {
    locations
        .iter()
        .map(|(&t, locs)| Ok((t, heads.embed(g, taps, t, locs)?)))
        .collect()
}
