//! Binary graymap files for pixels (16-bit), masks and heatmaps (8-bit).

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{GraymapHeader, PnmEncoder, SampleEncoding};
use image::{DynamicImage, ImageBuffer, ImageReader, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn encoder(path: &Path, h: usize, w: usize, maxwhite: u32) -> Result<PnmEncoder<BufWriter<File>>> {
    let file = BufWriter::new(File::create(path)?);
    let header = GraymapHeader {
        encoding: SampleEncoding::Binary,
        height: h as u32,
        width: w as u32,
        maxwhite,
    };
    Ok(PnmEncoder::new(file).with_header(header.into()))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::file(path, other.to_string()),
    }
}

/// Writes values in `[0,1]` quantized to `round(v·65535)`.
pub fn write_gray16(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = dims(img)?;
    let data: Vec<u16> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("length matches dims");
    DynamicImage::ImageLuma16(buf)
        .write_with_encoder(encoder(path, h, w, 65535)?)
        .map_err(|e| image_err(path, e))
}

/// Writes raw 8-bit levels.
pub fn write_gray8(path: impl AsRef<Path>, h: usize, w: usize, levels: Vec<u8>) -> Result<()> {
    let path = path.as_ref();
    let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, levels)
        .ok_or_else(|| Error::Contract(format!("{h}x{w} image needs {} levels", h * w)))?;
    DynamicImage::ImageLuma8(buf)
        .write_with_encoder(encoder(path, h, w, 255)?)
        .map_err(|e| image_err(path, e))
}

/// Writes a map in `[0,1]` as `round(255·v)`.
pub fn write_heatmap(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let (h, w) = dims(map)?;
    write_gray8(path, h, w, map.data().iter().map(|&v| quantize8(v)).collect())
}

pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(Error::file(path, "missing file"));
    }
    ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| image_err(path, e))
}

/// Reads a graymap of either depth into `[0,1]`.
pub fn read_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = open(path.as_ref())?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| f64::from(v) / 65535.0)
        .collect();
    Tensor::new([h as usize, w as usize], data)
}

/// Reads an 8-bit mask whose levels must be 0 or 255.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for v in img.into_raw() {
        data.push(match v {
            0 => 0.0,
            255 => 1.0,
            other => return Err(Error::file(path, format!("mask level {other} is not 0 or 255"))),
        });
    }
    Tensor::new([h as usize, w as usize], data)
}

fn dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        ref s => Err(Error::dim("graymap", s, &[2])),
    }
}
