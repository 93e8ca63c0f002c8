use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

/// Error maps store `|y − ŷ| · 255`.
pub const ERROR_MAP_SCALE: f64 = 255.0;
/// Difficulty dumps store `value · 127.5`, so the clamp ceiling 2 maps to 255.
pub const DIFFICULTY_SCALE: f64 = 127.5;
const SCALE_KEY: &str = "scale";

/// 8-bit grayscale image holding `round(value · scale)` clipped to 0–255.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub pixels: Array2<u8>,
    pub scale: f64,
}

impl GrayImage {
    pub fn quantize(values: ArrayView2<f32>, scale: f64) -> Self {
        Self {
            pixels: values.mapv(|v| (v as f64 * scale).round().clamp(0.0, 255.0) as u8),
            scale,
        }
    }

    /// Values recovered from the pixels.
    pub fn values(&self) -> Array2<f64> {
        self.pixels.mapv(|p| p as f64 / self.scale)
    }

    /// Writes a grayscale PNG with the scale in a text chunk.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.pixels.dim();
        let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.add_text_chunk(SCALE_KEY.into(), self.scale.to_string())
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        let data: Vec<u8> = self.pixels.iter().copied().collect();
        writer
            .write_image_data(&data)
            .map_err(|e| Error::Format(e.to_string()))?;
        writer.finish().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let fmt = |e: png::DecodingError| Error::Format(e.to_string());
        let mut reader = png::Decoder::new(BufReader::new(File::open(path)?))
            .read_info()
            .map_err(fmt)?;
        let scale = reader
            .info()
            .uncompressed_latin1_text
            .iter()
            .find(|c| c.keyword == SCALE_KEY)
            .and_then(|c| c.text.parse().ok())
            .ok_or_else(|| Error::Format("png lacks a scale text chunk".into()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format("png too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(fmt)?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format("expected 8-bit grayscale".into()));
        }
        buf.truncate(info.buffer_size());
        let pixels = Array2::from_shape_vec((info.height as usize, info.width as usize), buf)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { pixels, scale })
    }
}

/// `|y − ŷ|` quantised at `scale`.
pub fn error_map(y: ArrayView2<f32>, y_hat: ArrayView2<f32>, scale: f64) -> Result<GrayImage> {
    if y.dim() != y_hat.dim() {
        return Err(Error::Shape {
            context: "error map".into(),
            lhs: y.shape().to_vec(),
            rhs: y_hat.shape().to_vec(),
        });
    }
    let diff = ndarray::Zip::from(y).and(y_hat).map_collect(|&a, &b| (a - b).abs());
    Ok(GrayImage::quantize(diff.view(), scale))
}
