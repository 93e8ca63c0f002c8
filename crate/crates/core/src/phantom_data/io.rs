use super::{foreground_mask, DatasetSplit, MultimodalSample, SplitMeta, SplitPart, SOURCE_CHANNELS};
use crate::error::{Error, Result};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Sidecar JSON written next to each `NNNNN.bin` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleHeader {
    /// `[height, width]`.
    pub shape: [usize; 2],
    pub channels: usize,
    pub patient_id: u32,
    pub slice_id: u32,
    pub has_core: bool,
    pub has_target: bool,
}

/// Writes `stem.bin` (little-endian f32, channel-major, sources then target)
/// and `stem.json`.
pub fn write_sample(dir: &Path, stem: &str, sample: &MultimodalSample) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let header = SampleHeader {
        shape: [h, w],
        channels: SOURCE_CHANNELS + sample.target.is_some() as usize,
        patient_id: sample.patient_id,
        slice_id: sample.slice_id,
        has_core: sample.has_core,
        has_target: sample.target.is_some(),
    };
    let mut bytes = Vec::with_capacity(header.channels * h * w * 4);
    for v in sample.sources.iter().chain(sample.target.iter().flatten()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

pub fn read_sample(dir: &Path, stem: &str) -> Result<MultimodalSample> {
    let header: SampleHeader = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    let [h, w] = header.shape;
    let expected_channels = SOURCE_CHANNELS + header.has_target as usize;
    if header.channels != expected_channels {
        return Err(Error::Format(format!(
            "{stem}: {} channels but has_target={}",
            header.channels, header.has_target
        )));
    }
    if bytes.len() != header.channels * h * w * 4 {
        return Err(Error::Format(format!(
            "{stem}: payload has {} bytes, header implies {}",
            bytes.len(),
            header.channels * h * w * 4
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let all = Array3::from_shape_vec((header.channels, h, w), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    let sources = all.slice(s![..SOURCE_CHANNELS, .., ..]).to_owned();
    let target: Option<Array2<f32>> = header
        .has_target
        .then(|| all.index_axis(ndarray::Axis(0), SOURCE_CHANNELS).to_owned());
    Ok(MultimodalSample {
        foreground_mask: foreground_mask(&sources),
        sources,
        target,
        patient_id: header.patient_id,
        slice_id: header.slice_id,
        has_core: header.has_core,
    })
}

/// Writes every part to `root/<part>/NNNNN.{bin,json}` plus
/// `root/manifest.json` holding the [`SplitMeta`].
pub fn export_split(split: &DatasetSplit, root: &Path) -> Result<()> {
    for part in SplitPart::ALL {
        let dir = root.join(part.name());
        fs::create_dir_all(&dir)?;
        for (i, sample) in split.part(part).iter().enumerate() {
            write_sample(&dir, &format!("{i:05}"), sample)?;
        }
    }
    fs::write(root.join("manifest.json"), serde_json::to_vec_pretty(&split.meta)?)?;
    Ok(())
}

pub fn import_split(root: &Path) -> Result<DatasetSplit> {
    let meta: SplitMeta = serde_json::from_slice(&fs::read(root.join("manifest.json"))?)?;
    let load = |part: SplitPart| -> Result<Vec<MultimodalSample>> {
        let dir = root.join(part.name());
        let mut stems: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".json").map(str::to_owned)
            })
            .collect();
        stems.sort();
        stems.iter().map(|s| read_sample(&dir, s)).collect()
    };
    let split = DatasetSplit {
        paired: load(SplitPart::Paired)?,
        unpaired: load(SplitPart::Unpaired)?,
        val: load(SplitPart::Val)?,
        test: load(SplitPart::Test)?,
        meta,
    };
    let hash = DatasetSplit::content_hash([&split.paired, &split.unpaired, &split.val, &split.test]);
    if hash != split.meta.hash {
        return Err(Error::Format(format!(
            "content hash {hash} does not match manifest {}",
            split.meta.hash
        )));
    }
    Ok(split)
}
