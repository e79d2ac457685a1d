//! PNG load/save helpers shared by the dataset, content, and preview code.
//! Images travel as f64 arrays in [0,1]; files are 8-bit.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::IxDyn;

use crate::autodiff::Arr;
use crate::error::{Error, Result};

pub fn load_rgb(path: &Path) -> Result<Arr> {
    let img = image::open(path).map_err(|e| {
        Error::data(format!("cannot read image {}: {}", path.display(), e))
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Arr::zeros(IxDyn(&[3, h as usize, w as usize]));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn load_gray(path: &Path) -> Result<Arr> {
    let img = image::open(path).map_err(|e| {
        Error::data(format!("cannot read image {}: {}", path.display(), e))
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let mut out = Arr::zeros(IxDyn(&[h as usize, w as usize]));
    for (x, y, px) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = px.0[0] as f64 / 255.0;
    }
    Ok(out)
}

pub fn save_rgb(path: &Path, image: &Arr) -> Result<()> {
    if image.ndim() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape(format!(
            "save_rgb expects 3xHxW, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image[[c, y, x]].clamp(0.0, 1.0);
                buf[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized to dimensions");
    img.save(path)
        .map_err(|e| Error::data(format!("cannot write {}: {}", path.display(), e)))
}

pub fn save_gray(path: &Path, image: &Arr) -> Result<()> {
    if image.ndim() != 2 {
        return Err(Error::shape(format!(
            "save_gray expects HxW, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut buf = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            buf[y * w + x] = (image[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let img = GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized to dimensions");
    img.save(path)
        .map_err(|e| Error::data(format!("cannot write {}: {}", path.display(), e)))
}
