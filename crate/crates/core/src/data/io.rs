use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::tensor::Tensor;

/// Read an 8-bit PNG or binary PNM as RGB in `[0, 1]` (`v / 255`). Gray
/// images are expanded to three channels and alpha is dropped.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let reader = ImageReader::open(path)?
        .with_guessed_format()
        .map_err(|e| corrupt(e.to_string()))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Pnm) => {}
        Some(other) => return Err(Error::UnsupportedFormat(format!("{other:?}"))),
        None => return Err(corrupt("unrecognized image format".into())),
    }
    let img = reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(u) => Error::UnsupportedFormat(u.to_string()),
        other => corrupt(other.to_string()),
    })?;
    let rgb: RgbImage = match img {
        DynamicImage::ImageRgb8(i) => i,
        i @ (DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgba8(_)) => i.to_rgb8(),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{:?} (only 8-bit images are supported)",
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::EmptyImage);
    }
    let data = rgb.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    let pixels = Tensor::new(vec![h as usize, w as usize, 3], data)?;
    Ok(ImageBuffer::new(pixels)?.with_source(path))
}

/// Quantize with round-half-up and write PNG or binary PPM depending on the
/// extension.
pub fn save_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    let format = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => ImageFormat::Png,
        Some("ppm" | "pnm") => ImageFormat::Pnm,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "cannot write extension {other:?}; use .png or .ppm"
            )))
        }
    };
    let bytes: Vec<u8> = img
        .pixels()
        .data()
        .iter()
        .map(|v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("buffer sized from the image");
    buf.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::CorruptFile {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}
