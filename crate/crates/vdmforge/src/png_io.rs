//! PNG rasters for painted initialization layers, masks and debug renders.
//! Samples map to [0, 1] as value / 255 or value / 65535.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use png::{BitDepth, ColorType, Transformations};
use thiserror::Error;
use vdmforge_core::vdm::{VdmError, VdmImage};

#[derive(Debug, Error)]
pub enum PngError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error(transparent)]
    Vdm(#[from] VdmError),
}

/// Single-channel raster in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Decodes the first channel (gray or red) of any PNG.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage, PngError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => unreachable!("EXPAND removes palettes"),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut values = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        for x in 0..w {
            let v = match info.bit_depth {
                BitDepth::Sixteen => {
                    let i = x * channels * 2;
                    u16::from_be_bytes([row[i], row[i + 1]]) as f64 / 65535.0
                }
                _ => row[x * channels] as f64 / 255.0,
            };
            values.push(v);
        }
    }
    Ok(GrayImage { width: w, height: h, values })
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage, PngError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| PngError::Io { path: path.into(), source })?;
    decode_gray(&bytes)
}

/// A painted heightfield becomes a Z-only VDM.
pub fn gray_to_vdm(img: &GrayImage) -> Result<VdmImage, PngError> {
    let z: Vec<f32> = img.values.iter().map(|&v| v as f32).collect();
    Ok(VdmImage::from_heights(img.width, img.height, &z)?)
}

pub fn encode_gray16(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>, PngError> {
    let bytes: Vec<u8> =
        values.iter().flat_map(|v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes()).collect();
    encode(width, height, ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}

pub fn encode_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>, PngError> {
    encode(width, height, ColorType::Rgb, BitDepth::Eight, rgb)
}

fn encode(width: usize, height: usize, color: ColorType, depth: BitDepth, data: &[u8]) -> Result<Vec<u8>, PngError> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), PngError> {
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|source| PngError::Io { path: path.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray16_roundtrip_within_quantum() {
        let values: Vec<f64> = (0..35).map(|i| i as f64 / 34.0).collect();
        let back = decode_gray(&encode_gray16(7, 5, &values).unwrap()).unwrap();
        assert_eq!((back.width, back.height), (7, 5));
        for (a, b) in back.values.iter().zip(&values) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn rgb8_reads_red_channel() {
        let rgb: Vec<u8> = (0..4).flat_map(|i| [i * 85, 7, 9]).collect();
        let img = decode_gray(&encode_rgb8(2, 2, &rgb).unwrap()).unwrap();
        assert_eq!(img.values, [0.0, 85.0 / 255.0, 170.0 / 255.0, 1.0]);
    }

    #[test]
    fn gray_layer_becomes_z_only_vdm() {
        let img = GrayImage { width: 2, height: 2, values: vec![0.0, 0.25, 0.5, 1.0] };
        let v = gray_to_vdm(&img).unwrap();
        assert_eq!(v.pixel(1, 1), [0.0, 0.0, 1.0]);
        assert_eq!(v.pixel(1, 0), [0.0, 0.0, 0.25]);
    }
}
