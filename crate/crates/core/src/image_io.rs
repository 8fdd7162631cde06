use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor};

/// Reads any supported image as RGB with values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> ImageTensor {
    let (w, h) = img.dimensions();
    Tensor::from_fn(3, h as usize, w as usize, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn to_rgb8(t: &ImageTensor) -> RgbImage {
    let (_, h, w) = t.shape();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| quantize_u8(t.at(c, y as usize, x as usize));
        Rgb([px(0), px(1), px(2)])
    })
}

#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds every value to the nearest 8-bit level.
pub fn quantize8(t: &ImageTensor) -> ImageTensor {
    t.map(|v| quantize_u8(v) as f32 / 255.0)
}

pub fn save_png(path: &Path, t: &ImageTensor) -> Result<()> {
    t.ensure_channels(3, "save_png")?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_rgb8(t)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_image_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let t = quantize8(&Tensor::from_fn(3, 7, 5, |c, y, x| {
            ((c * 31 + y * 7 + x * 13) % 256) as f32 / 255.0
        }));
        save_png(&p, &t).unwrap();
        assert_eq!(load_image(&p).unwrap(), t);
    }

    #[test]
    fn corrupt_file_is_image_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
    }
}
