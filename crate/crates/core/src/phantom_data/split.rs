use super::{generate_phantom, mix, render_modalities, MultimodalSample};
use crate::error::{invalid, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const PATIENT_SHUFFLE: u64 = 0x5041_5449_454e_5453;
const BALANCE: u64 = 0x0042_414c_414e_4345;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Paired,
    Unpaired,
    Val,
    Test,
}

impl SplitPart {
    pub const ALL: [SplitPart; 4] = [Self::Paired, Self::Unpaired, Self::Val, Self::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Paired => "paired",
            Self::Unpaired => "unpaired",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

/// How a split was produced, plus which patients landed where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub paired_fraction: f64,
    pub seed: u64,
    pub canvas_size: usize,
    pub paired_patients: Vec<u32>,
    pub unpaired_patients: Vec<u32>,
    pub val_patients: Vec<u32>,
    pub test_patients: Vec<u32>,
    /// SHA-256 over the identity and pixel content of every sample.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub paired: Vec<MultimodalSample>,
    pub unpaired: Vec<MultimodalSample>,
    pub val: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
    pub meta: SplitMeta,
}

impl DatasetSplit {
    pub fn part(&self, part: SplitPart) -> &[MultimodalSample] {
        match part {
            SplitPart::Paired => &self.paired,
            SplitPart::Unpaired => &self.unpaired,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }

    pub(crate) fn content_hash(parts: [&[MultimodalSample]; 4]) -> String {
        let mut h = Sha256::new();
        for (part, samples) in SplitPart::ALL.iter().zip(parts) {
            h.update(part.name().as_bytes());
            h.update((samples.len() as u64).to_le_bytes());
            for s in samples {
                h.update(s.patient_id.to_le_bytes());
                h.update(s.slice_id.to_le_bytes());
                h.update([s.has_core as u8, s.target.is_some() as u8]);
                for v in s.sources.iter().chain(s.target.iter().flatten()) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Renders one slice; a pure function of `(seed, patient, slice, canvas)`.
pub fn render_slice(seed: u64, patient_id: u32, slice_id: u32, canvas_size: usize) -> Result<MultimodalSample> {
    let phantom = generate_phantom(mix(mix(seed, patient_id as u64), slice_id as u64), canvas_size)?;
    let mut s = render_modalities(&phantom);
    s.patient_id = patient_id;
    s.slice_id = slice_id;
    Ok(s)
}

/// [`build_split_with`] on the default 64×64 canvas.
pub fn build_split(
    n_patients: usize,
    slices_per_patient: usize,
    paired_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    build_split_with(n_patients, slices_per_patient, paired_fraction, seed, 64)
}

/// Patient-level 7:1:2 train/val/test split. The first
/// `⌈paired_fraction · n_train⌉` shuffled training patients keep their
/// targets; the rest lose them. Paired and unpaired subsets are then each
/// balanced on `has_core` by oversampling the minority class with
/// replacement (no-op when a subset holds only one class).
pub fn build_split_with(
    n_patients: usize,
    slices_per_patient: usize,
    paired_fraction: f64,
    seed: u64,
    canvas_size: usize,
) -> Result<DatasetSplit> {
    if n_patients < 10 {
        return Err(invalid(format!("need at least 10 patients, got {n_patients}")));
    }
    if slices_per_patient == 0 {
        return Err(invalid("slices_per_patient must be positive"));
    }
    if !(paired_fraction > 0.0 && paired_fraction <= 1.0) {
        return Err(invalid(format!("paired_fraction {paired_fraction} outside (0, 1]")));
    }

    let mut ids: Vec<u32> = (0..n_patients as u32).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, PATIENT_SHUFFLE)));
    let n_train = (0.7 * n_patients as f64).round() as usize;
    let n_val = (0.1 * n_patients as f64).round() as usize;
    let n_paired = ((paired_fraction * n_train as f64 - 1e-9).ceil() as usize).clamp(1, n_train);
    let (train, rest) = ids.split_at(n_train);
    let (val_ids, test_ids) = rest.split_at(n_val);
    let (paired_ids, unpaired_ids) = train.split_at(n_paired);

    let render = |patients: &[u32], keep_target: bool| -> Result<Vec<MultimodalSample>> {
        let mut sorted = patients.to_vec();
        sorted.sort_unstable();
        let jobs: Vec<(u32, u32)> = sorted
            .iter()
            .flat_map(|&p| (0..slices_per_patient as u32).map(move |s| (p, s)))
            .collect();
        jobs.par_iter()
            .map(|&(p, s)| {
                let sample = render_slice(seed, p, s, canvas_size)?;
                Ok(if keep_target { sample } else { sample.without_target() })
            })
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, BALANCE));
    let paired = balance_core(render(paired_ids, true)?, &mut rng);
    let unpaired = balance_core(render(unpaired_ids, false)?, &mut rng);
    let val = render(val_ids, true)?;
    let test = render(test_ids, true)?;

    let sorted = |s: &[u32]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let hash = DatasetSplit::content_hash([&paired, &unpaired, &val, &test]);
    Ok(DatasetSplit {
        meta: SplitMeta {
            n_patients,
            slices_per_patient,
            paired_fraction,
            seed,
            canvas_size,
            paired_patients: sorted(paired_ids),
            unpaired_patients: sorted(unpaired_ids),
            val_patients: sorted(val_ids),
            test_patients: sorted(test_ids),
            hash,
        },
        paired,
        unpaired,
        val,
        test,
    })
}

/// Appends random duplicates of the minority `has_core` class until both
/// classes are equally frequent.
pub(crate) fn balance_core(mut samples: Vec<MultimodalSample>, rng: &mut impl Rng) -> Vec<MultimodalSample> {
    let (with, without): (Vec<usize>, Vec<usize>) = (0..samples.len()).partition(|&i| samples[i].has_core);
    if with.is_empty() || without.is_empty() {
        return samples;
    }
    let deficit = with.len().abs_diff(without.len());
    let minority = if with.len() < without.len() { with } else { without };
    for _ in 0..deficit {
        let pick = minority[rng.random_range(0..minority.len())];
        samples.push(samples[pick].clone());
    }
    samples
}
