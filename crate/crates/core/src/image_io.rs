//! PNG/JPEG loading and saving, reflect padding and cropping.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, TensorError};
use crate::tensor::{reflect_index, Tensor};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image { path: path.to_path_buf(), msg: e.to_string() }
}

fn read_rgb(path: &Path) -> Result<RgbImage, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| image_err(path, e))?;
    Ok(img.to_rgb8())
}

/// `3 × H × W` tensor in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// `round(v·255)` clamped to `[0, 255]`.
pub fn quantize(v: f32) -> u8 {
    (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage, Error> {
    let (c, h, w) = t.chw()?;
    if c != 3 && c != 1 {
        return Err(Error::Invalid(format!("cannot write a {c}-channel image")));
    }
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let px = |ch: usize| quantize(d[if c == 1 { p } else { ch * h * w + p }]);
        Rgb([px(0), px(1), px(2)])
    }))
}

/// Loads an 8-bit PNG or JPEG as a `3 × H × W` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor, Error> {
    Ok(rgb_to_tensor(&read_rgb(path)?))
}

/// Loads an image, center-crops it to a square and resizes it to `size × size`.
pub fn load_square(path: &Path, size: usize) -> Result<Tensor, Error> {
    let img = read_rgb(path)?;
    let side = img.width().min(img.height());
    let (x, y) = ((img.width() - side) / 2, (img.height() - side) / 2);
    let cropped = imageops::crop_imm(&img, x, y, side, side).to_image();
    let resized = if side as usize == size {
        cropped
    } else {
        imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(rgb_to_tensor(&resized))
}

/// Writes an 8-bit RGB PNG; single-channel tensors are written as gray.
pub fn save_png(t: &Tensor, path: &Path) -> Result<(), Error> {
    let img = tensor_to_rgb(t)?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Reflect-pads the bottom and right edges so both sides are multiples of `multiple`.
pub fn pad_to_multiple(t: &Tensor, multiple: usize) -> Result<Tensor, TensorError> {
    let (c, h, w) = t.chw()?;
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let d = t.data();
    Ok(Tensor::from_fn(&[c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        let (sy, sx) = (reflect_index(y as isize, h), reflect_index(x as isize, w));
        d[ch * h * w + sy * w + sx]
    }))
}

/// Top-left `height × width` window.
pub fn crop(t: &Tensor, height: usize, width: usize) -> Result<Tensor, TensorError> {
    let (c, h, w) = t.chw()?;
    if height > h || width > w {
        return Err(TensorError::ShapeMismatch { op: "crop", lhs: t.shape().to_vec(), rhs: vec![c, height, width] });
    }
    let d = t.data();
    Ok(Tensor::from_fn(&[c, height, width], |i| {
        let (ch, y, x) = (i / (height * width), (i / width) % height, i % width);
        d[ch * h * w + y * w + x]
    }))
}
