#![allow(dead_code)]

use ds3net::nets::{DiscriminatorSpec, GeneratorSpec, NetBundle};
use ds3net::phantom_data::{build_split, DatasetSplit};
use ds3net::trainer::{Batch, DataConfig, TrainConfig};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One residual block per side, width 4: layers 0..=12, fusion 6. Taps 2,
/// 4 and 6 all have stride 4.
pub fn tiny_generator() -> GeneratorSpec {
    GeneratorSpec {
        base_width: 4,
        n_res_blocks: 1,
        tap_indices: vec![2, 4, 6],
        distill_tap_indices: vec![4, 9],
        fusion_reduction: 2,
        ..GeneratorSpec::default()
    }
}

pub fn tiny_discriminator() -> DiscriminatorSpec {
    DiscriminatorSpec {
        base_width: 4,
        ..DiscriminatorSpec::default()
    }
}

pub fn tiny_nets<T: autograd::Real>(seed: u64) -> NetBundle<T> {
    NetBundle::new(tiny_generator(), tiny_discriminator(), 8, seed).unwrap()
}

/// Ten patients of two 64×64 slices with two paired training patients;
/// two epochs of two steps per stage.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        data: DataConfig {
            n_patients: 10,
            slices_per_patient: 2,
            paired_fraction: 0.3,
            canvas_size: 64,
            seed,
        },
        generator: tiny_generator(),
        discriminator: tiny_discriminator(),
        embed_dim: 8,
        patches_per_tap: 4,
        stage1_epochs: 2,
        stage2_epochs: 2,
        batch_size: 2,
        steps_per_epoch: Some(2),
        seed,
        ..TrainConfig::default()
    }
}

pub fn tiny_split(seed: u64) -> DatasetSplit {
    build_split(10, 2, 0.3, seed).unwrap()
}

pub fn batch<T: autograd::Real>(split: &DatasetSplit, paired: bool, n: usize) -> Batch<T> {
    let pool = if paired { &split.paired } else { &split.unpaired };
    Batch::from_samples(&pool.iter().take(n).collect::<Vec<_>>()).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(lo..hi))
}
