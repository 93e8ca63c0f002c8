//! Generator, discriminator and projection heads.
//!
//! Generator layers are enumerated in forward order; tap indices refer to
//! this enumeration. With `R` residual blocks per side:
//!
//! | index            | layer                                   | stride |
//! |------------------|-----------------------------------------|--------|
//! | 0                | encoder stem (7×7 conv, IN, ReLU)       | 1      |
//! | 1, 2             | encoder downsampling (3×3/2, IN, ReLU)  | 2, 4   |
//! | 3 .. 3+3R        | encoder blocks: conv a, conv b, output  | 4      |
//! | 3+3R             | fusion                                  | 4      |
//! | 4+3R .. 4+6R     | decoder blocks: conv a, conv b, output  | 4      |
//! | 4+6R, 5+6R       | upsampling (nearest ×2, 3×3, IN, ReLU)  | 2, 1   |
//! | 6+6R             | output (7×7 conv, range limit to [0,1]) | 1      |
//!
//! For `R = 3` that is stem 0, downsampling 1–2, encoder blocks 3–11,
//! fusion 12, decoder blocks 13–21, upsampling 22–23 and output 24.
//! Encoder-side taps are the channel concatenation of all encoders.

mod checkpoint;
mod discriminator;
mod generator;
mod heads;
mod layers;
mod taps;

pub use checkpoint::{load_stores, params_hash, read_metadata, save_stores};
pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use generator::{
    Fusion, Generator, GeneratorOutput, GeneratorSpec, LayerInfo, LayerKind, OutputActivation, DOWNSAMPLINGS,
};
pub use heads::{extract_patch_embeddings, GridPos, ProjectionHeads, EMBED_DIM};
pub use taps::{FeatureTapSet, NetRole, TapInfo};

use crate::error::{Error, Result};
use autograd::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// One generator with its discriminator and projection heads: the unit that
/// is trained, checkpointed and copied from teacher to student.
#[derive(Debug, Clone)]
pub struct NetBundle<T: Real> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub heads: ProjectionHeads<T>,
}

pub fn build_generator<T: Real>(spec: GeneratorSpec, seed: u64) -> Result<Generator<T>> {
    Generator::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn build_discriminator<T: Real>(spec: DiscriminatorSpec, seed: u64) -> Result<Discriminator<T>> {
    Discriminator::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl<T: Real> NetBundle<T> {
    pub fn new(gen: GeneratorSpec, disc: DiscriminatorSpec, embed_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = ProjectionHeads::new(&gen, embed_dim, &mut rng)?;
        Ok(Self {
            generator: Generator::new(gen, &mut rng)?,
            discriminator: Discriminator::new(disc, &mut rng)?,
            heads,
        })
    }

    /// Copies every weight from `other`, which must share all specs.
    pub fn copy_weights_from(&mut self, other: &NetBundle<T>) -> Result<()> {
        if self.generator.spec() != other.generator.spec() || self.discriminator.spec() != other.discriminator.spec() {
            return Err(Error::InvalidArgument("network specs differ".into()));
        }
        self.generator.params.copy_from(&other.generator.params)?;
        self.discriminator.params.copy_from(&other.discriminator.params)?;
        self.heads.params.copy_from(&other.heads.params)?;
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.generator.params.numel() + self.discriminator.params.numel() + self.heads.params.numel()
    }
}

const GEN_KEY: &str = "generator_spec";
const DISC_KEY: &str = "discriminator_spec";
const DIM_KEY: &str = "embed_dim";

impl NetBundle<f32> {
    fn groups(&self) -> [(&str, &autograd::ParamStore<f32>); 3] {
        [
            ("generator", &self.generator.params),
            ("heads", &self.heads.params),
            ("discriminator", &self.discriminator.params),
        ]
    }

    /// Hash over every weight; equal hashes mean bitwise-equal networks.
    pub fn params_hash(&self) -> String {
        params_hash(&self.groups())
    }

    /// Hash over the generator weights only.
    pub fn generator_hash(&self) -> String {
        params_hash(&[("generator", &self.generator.params)])
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert(GEN_KEY.into(), serde_json::to_string(self.generator.spec())?);
        meta.insert(DISC_KEY.into(), serde_json::to_string(self.discriminator.spec())?);
        meta.insert(DIM_KEY.into(), self.heads.dim().to_string());
        save_stores(path, &self.groups(), &meta)
    }

    /// Rebuilds the networks from the specs stored in the archive and loads
    /// their weights. Returns the archive metadata alongside.
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let meta = read_metadata(path)?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("metadata key {k} missing")))
        };
        let gen: GeneratorSpec = serde_json::from_str(field(GEN_KEY)?)?;
        let disc: DiscriminatorSpec = serde_json::from_str(field(DISC_KEY)?)?;
        let dim: usize = field(DIM_KEY)?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("{DIM_KEY}: {e}")))?;
        let mut bundle = Self::new(gen, disc, dim, 0)?;
        let meta = load_stores(
            path,
            &mut [
                ("generator", &mut bundle.generator.params),
                ("heads", &mut bundle.heads.params),
                ("discriminator", &mut bundle.discriminator.params),
            ],
        )?;
        Ok((bundle, meta))
    }
}
