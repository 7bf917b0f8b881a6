//! VDM rasters as single-part scanline EXR files: 32-bit float channels
//! R, G, B holding the X, Y, Z displacement in VDM units, ZIP compressed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Seek, Write};
use std::path::{Path, PathBuf};

use exr::prelude::*;
use std::result::Result;
use thiserror::Error;
use vdmforge_core::vdm::{VdmError, VdmImage};

#[derive(Debug, Error)]
pub enum ExrError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("exr: {0}")]
    Format(#[from] exr::error::Error),
    #[error("expected float channels R, G, B; found {found:?}")]
    ChannelCount { found: Vec<String> },
    #[error("channel {channel} holds {kind} samples, expected float")]
    ChannelType { channel: String, kind: &'static str },
    #[error(transparent)]
    Vdm(#[from] VdmError),
}

fn encoding() -> Encoding {
    Encoding { compression: Compression::ZIP16, blocks: Blocks::ScanLines, line_order: LineOrder::Increasing }
}

pub fn write_exr<W: Write + Seek>(vdm: &VdmImage, out: W) -> Result<(), ExrError> {
    let (w, data) = (vdm.width(), vdm.data());
    let channels = SpecificChannels::rgb(|Vec2(x, y): Vec2<usize>| {
        let i = (y * w + x) * 3;
        (data[i], data[i + 1], data[i + 2])
    });
    let image = Image::from_encoded_channels((vdm.width(), vdm.height()), encoding(), channels);
    image.write().non_parallel().to_buffered(out)?;
    Ok(())
}

pub fn save_exr(vdm: &VdmImage, path: impl AsRef<Path>) -> Result<(), ExrError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| ExrError::Io { path: path.into(), source })?;
    write_exr(vdm, BufWriter::new(file))
}

pub fn exr_bytes(vdm: &VdmImage) -> Result<Vec<u8>, ExrError> {
    let mut buf = Cursor::new(Vec::new());
    write_exr(vdm, &mut buf)?;
    Ok(buf.into_inner())
}

pub fn read_exr<R: Read + Seek>(input: R) -> Result<VdmImage, ExrError> {
    let image = read()
        .no_deep_data()
        .largest_resolution_level()
        .all_channels()
        .first_valid_layer()
        .all_attributes()
        .non_parallel()
        .from_buffered(input)?;
    let layer = image.layer_data;
    let (w, h) = (layer.size.width(), layer.size.height());
    let list = &layer.channel_data.list;
    let names: Vec<String> = list.iter().map(|c| c.name.to_string()).collect();
    let find = |name: &str| list.iter().find(|c| c.name.eq_case_insensitive(name));
    let (Some(r), Some(g), Some(b)) = (find("R"), find("G"), find("B")) else {
        return Err(ExrError::ChannelCount { found: names });
    };
    if list.len() > 3 {
        log::warn!("ignoring extra EXR channels beyond R, G, B: {names:?}");
    }

    let mut data = vec![0.0f32; w * h * 3];
    for (c, ch) in [r, g, b].into_iter().enumerate() {
        let values: Vec<f32> = match &ch.sample_data {
            FlatSamples::F32(v) => v.clone(),
            FlatSamples::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            FlatSamples::U32(_) => {
                return Err(ExrError::ChannelType { channel: ch.name.to_string(), kind: "u32" });
            }
        };
        for (i, v) in values.into_iter().enumerate() {
            data[i * 3 + c] = v;
        }
    }
    Ok(VdmImage::new(w, h, data)?)
}

pub fn load_exr(path: impl AsRef<Path>) -> Result<VdmImage, ExrError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| ExrError::Io { path: path.into(), source })?;
    read_exr(BufReader::new(file))
}
