//! Decoding to and encoding from [`ImageBuffer`].
//!
//! Any format the `image` crate can read is accepted and converted to 8-bit
//! RGB. Output is always PNG.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use thiserror::Error;

use crate::hist::ImageBuffer;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("invalid image {path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("cannot encode image: {0}")]
    Encode(image::ImageError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub fn decode_bytes(bytes: &[u8], path: &Path) -> Result<ImageBuffer, ImageIoError> {
    let decoded = image::load_from_memory(bytes).map_err(|source| ImageIoError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = decoded.into_rgb8();
    let (w, h) = rgb.dimensions();
    ImageBuffer::from_interleaved(w, h, rgb.as_raw()).map_err(|e| ImageIoError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_image(path: &Path) -> Result<ImageBuffer, ImageIoError> {
    let bytes = fs::read(path).map_err(|source| ImageIoError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    decode_bytes(&bytes, path)
}

/// PNG bytes for an 8-bit image.
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>, ImageIoError> {
    let rgb = RgbImage::from_raw(img.width(), img.height(), img.to_interleaved())
        .expect("interleaved buffer sized from image dimensions");
    let mut out = Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png)
        .map_err(ImageIoError::Encode)?;
    Ok(out.into_inner())
}

/// Writes `img` as PNG, creating parent directories.
pub fn save_png(img: &ImageBuffer, path: &Path) -> Result<(), ImageIoError> {
    let bytes = encode_png(img)?;
    write_file(path, &bytes)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ImageIoError> {
    let werr = |source| ImageIoError::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(werr)?;
    }
    fs::write(path, bytes).map_err(werr)
}
