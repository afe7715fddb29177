//! PNG encoding for images and label maps. 8-bit values map to floats as `v / 255`.

use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::Result;
use crate::image::{Image, LabelMap};

pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::srgb(h as usize, w as usize, pixels)
}

pub fn write_rgb_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let raw = img
        .pixels()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
        .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

pub fn read_label_png(path: impl AsRef<Path>, num_classes: u8, ignore_index: u8) -> Result<LabelMap> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    LabelMap::new(h as usize, w as usize, num_classes, ignore_index, img.into_raw())
}

pub fn write_label_png(label: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let buf = GrayImage::from_raw(
        label.width() as u32,
        label.height() as u32,
        label.classes().to_vec(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::srgb(2, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 0.7])
            .unwrap();
        let p = dir.path().join("a.png");
        write_rgb_png(&img, &p).unwrap();
        let back = read_rgb_png(&p).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let lbl = LabelMap::new(2, 2, 4, 255, vec![0, 3, 255, 1]).unwrap();
        let p = dir.path().join("l.png");
        write_label_png(&lbl, &p).unwrap();
        assert_eq!(read_label_png(&p, 4, 255).unwrap(), lbl);
    }
}
