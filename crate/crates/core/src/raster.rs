//! Pixel-level helpers shared by tiling, synthesis and inference.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::geo::PatchExtent;

/// Row-major boolean mask; `true` marks nodata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    /// A pixel is nodata iff every channel equals `sentinel`.
    pub fn nodata_from_image(img: &RgbImage, sentinel: u8) -> Self {
        let bits = img.pixels().map(|p| p.0.iter().all(|&c| c == sentinel)).collect();
        Mask {
            width: img.width(),
            height: img.height(),
            bits,
        }
    }

    /// Fraction of nodata pixels inside `extent`, clipped to the mask.
    pub fn fraction_in(&self, extent: &PatchExtent) -> f64 {
        let x1 = (extent.x0 + extent.width).min(self.width);
        let y1 = (extent.y0 + extent.height).min(self.height);
        if extent.x0 >= x1 || extent.y0 >= y1 {
            return 0.0;
        }
        let mut n = 0usize;
        for y in extent.y0..y1 {
            let row = &self.bits[y as usize * self.width as usize..][..self.width as usize];
            n += row[extent.x0 as usize..x1 as usize].iter().filter(|&&b| b).count();
        }
        n as f64 / ((x1 - extent.x0) as f64 * (y1 - extent.y0) as f64)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Grey image with 255 for valid pixels and 0 for nodata.
    pub fn to_validity_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 0 } else { 255 }])
        })
    }

    pub fn from_validity_image(img: &GrayImage) -> Self {
        Mask {
            width: img.width(),
            height: img.height(),
            bits: img.pixels().map(|p| p.0[0] == 0).collect(),
        }
    }
}

fn reflect(i: i64, n: i64) -> u32 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as u32
}

/// Copies a `size × size` window at `origin`; pixels beyond the image are
/// reflected (without repeating the edge pixel).
pub fn extract_patch(img: &RgbImage, origin: (u32, u32), size: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let inside = origin.0 + size <= w && origin.1 + size <= h;
    if inside {
        return image::imageops::crop_imm(img, origin.0, origin.1, size, size).to_image();
    }
    RgbImage::from_fn(size, size, |x, y| {
        let sx = reflect(i64::from(origin.0) + i64::from(x), i64::from(w));
        let sy = reflect(i64::from(origin.1) + i64::from(y), i64::from(h));
        *img.get_pixel(sx, sy)
    })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn nodata_requires_all_channels() {
        let mut img = RgbImage::from_pixel(4, 1, Rgb([9, 9, 9]));
        img.put_pixel(0, 0, Rgb([0, 0, 0]));
        img.put_pixel(1, 0, Rgb([0, 5, 0]));
        let m = Mask::nodata_from_image(&img, 0);
        assert!(m.get(0, 0));
        assert!(!m.get(1, 0));
        assert_eq!(m.count(), 1);
        let ext = PatchExtent {
            x0: 0,
            y0: 0,
            width: 4,
            height: 1,
        };
        assert_eq!(m.fraction_in(&ext), 0.25);
        assert_eq!(Mask::from_validity_image(&m.to_validity_image()), m);
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let img = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8, y as u8, 0]));
        let p = extract_patch(&img, (0, 0), 5);
        let row: Vec<u8> = (0..5).map(|x| p.get_pixel(x, 0).0[0]).collect();
        assert_eq!(row, vec![0, 1, 2, 1, 0]);
        let col: Vec<u8> = (0..5).map(|y| p.get_pixel(0, y).0[1]).collect();
        assert_eq!(col, vec![0, 1, 0, 1, 0]);
        let inner = extract_patch(&img, (1, 0), 2);
        assert_eq!(inner.get_pixel(0, 1).0, [1, 1, 0]);
    }
}
