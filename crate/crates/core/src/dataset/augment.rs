use image::{imageops, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geo::PointAnnotation;

/// Which transforms may be sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flips: bool,
    pub rotations: bool,
    /// Maximum relative brightness change (0.2 = ±20%).
    pub brightness: f32,
    /// Maximum relative contrast change.
    pub contrast: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flips: true,
            rotations: true,
            brightness: 0.2,
            contrast: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flips: false,
            rotations: false,
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

/// A concrete augmentation: flips, then `rot90_cw` clockwise quarter turns,
/// then photometric jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90_cw: u8,
    pub brightness: f32,
    pub contrast: f32,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation {
            hflip: false,
            vflip: false,
            rot90_cw: 0,
            brightness: 1.0,
            contrast: 1.0,
        }
    }

    pub fn sample<R: Rng>(rng: &mut R, cfg: &AugmentConfig) -> Self {
        let jitter = |rng: &mut R, amp: f32| {
            if amp > 0.0 {
                rng.gen_range(1.0 - amp..=1.0 + amp)
            } else {
                1.0
            }
        };
        Augmentation {
            hflip: cfg.flips && rng.gen_bool(0.5),
            vflip: cfg.flips && rng.gen_bool(0.5),
            rot90_cw: if cfg.rotations { rng.gen_range(0..4) } else { 0 },
            brightness: jitter(rng, cfg.brightness),
            contrast: jitter(rng, cfg.contrast),
        }
    }

    pub fn is_geometric_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.rot90_cw % 4 == 0
    }

    /// Maps a point in a `w × h` patch. Pixel-index convention: column `x`
    /// flips to `w - 1 - x`. Results are clamped into the output extent.
    pub fn apply_point(&self, x: f64, y: f64, w: u32, h: u32) -> (f64, f64) {
        let (mut x, mut y) = (x, y);
        let (mut w, mut h) = (f64::from(w), f64::from(h));
        if self.hflip {
            x = w - 1.0 - x;
        }
        if self.vflip {
            y = h - 1.0 - y;
        }
        for _ in 0..self.rot90_cw % 4 {
            (x, y) = (h - 1.0 - y, x);
            (w, h) = (h, w);
        }
        (x.clamp(0.0, w - 1.0), y.clamp(0.0, h - 1.0))
    }

    pub fn apply_image(&self, img: &RgbImage) -> RgbImage {
        let mut out = img.clone();
        if self.hflip {
            imageops::flip_horizontal_in_place(&mut out);
        }
        if self.vflip {
            imageops::flip_vertical_in_place(&mut out);
        }
        for _ in 0..self.rot90_cw % 4 {
            out = imageops::rotate90(&out);
        }
        if self.brightness != 1.0 || self.contrast != 1.0 {
            let n = out.as_raw().len().max(1) as f64;
            let mean = (out.as_raw().iter().map(|&v| f64::from(v)).sum::<f64>() / n) as f32;
            for v in out.iter_mut() {
                let f = ((f32::from(*v) - mean) * self.contrast + mean) * self.brightness;
                *v = f.round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    pub fn apply_points(&self, points: &[PointAnnotation], w: u32, h: u32) -> Vec<PointAnnotation> {
        points
            .iter()
            .map(|p| {
                let (x, y) = self.apply_point(p.x, p.y, w, h);
                PointAnnotation { x, y, ..p.clone() }
            })
            .collect()
    }
}

/// Samples an augmentation from `seed` and applies it to a patch and its
/// local points.
pub fn augment(
    img: &RgbImage,
    points: &[PointAnnotation],
    cfg: &AugmentConfig,
    seed: u64,
) -> (RgbImage, Vec<PointAnnotation>, Augmentation) {
    let mut rng = crate::seed::rng(seed);
    let aug = Augmentation::sample(&mut rng, cfg);
    (
        aug.apply_image(img),
        aug.apply_points(points, img.width(), img.height()),
        aug,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn one_hot(w: u32, h: u32, x: u32, y: u32) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        img.put_pixel(x, y, Rgb([255, 255, 255]));
        img
    }

    fn hot_pixels(img: &RgbImage) -> Vec<(u32, u32)> {
        img.enumerate_pixels()
            .filter(|(_, _, p)| p.0[0] > 0)
            .map(|(x, y, _)| (x, y))
            .collect()
    }

    #[test]
    fn horizontal_flip() {
        let a = Augmentation {
            hflip: true,
            ..Augmentation::identity()
        };
        assert_eq!(a.apply_point(10.0, 20.0, 512, 512), (501.0, 20.0));
    }

    #[test]
    fn clockwise_quarter_turn_matches_rendered_pixel() {
        let a = Augmentation {
            rot90_cw: 1,
            ..Augmentation::identity()
        };
        assert_eq!(a.apply_point(10.0, 20.0, 512, 512), (491.0, 10.0));
        let rotated = a.apply_image(&one_hot(512, 512, 10, 20));
        assert_eq!(hot_pixels(&rotated), vec![(491, 10)]);
    }

    #[test]
    fn identity_is_noop() {
        let img = RgbImage::from_fn(8, 6, |x, y| Rgb([x as u8, y as u8, 7]));
        let pts = vec![PointAnnotation::new("a", 3.5, 2.0)];
        let id = Augmentation::identity();
        assert_eq!(id.apply_image(&img), img);
        assert_eq!(id.apply_points(&pts, 8, 6), pts);
    }

    #[test]
    fn photometric_leaves_points() {
        let a = Augmentation {
            brightness: 1.2,
            contrast: 0.8,
            ..Augmentation::identity()
        };
        let img = RgbImage::from_fn(4, 4, |x, _| Rgb([50 * x as u8, 0, 0]));
        let out = a.apply_image(&img);
        assert_ne!(out, img);
        assert_eq!(a.apply_point(1.0, 2.0, 4, 4), (1.0, 2.0));
    }

    #[test]
    fn same_seed_same_result() {
        let img = RgbImage::from_fn(16, 16, |x, y| Rgb([x as u8 * 9, y as u8 * 7, 3]));
        let pts = vec![PointAnnotation::new("a", 2.0, 9.0)];
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&img, &pts, &cfg, 4), augment(&img, &pts, &cfg, 4));
    }

    proptest! {
        #[test]
        fn geometry_matches_rendered_mask(
            w in 2u32..40, h in 2u32..40, fx in 0.0f64..1.0, fy in 0.0f64..1.0,
            hflip: bool, vflip: bool, rot in 0u8..4,
        ) {
            let (x, y) = ((fx * f64::from(w)) as u32, (fy * f64::from(h)) as u32);
            let a = Augmentation { hflip, vflip, rot90_cw: rot, ..Augmentation::identity() };
            let img = a.apply_image(&one_hot(w, h, x, y));
            let (px, py) = a.apply_point(f64::from(x), f64::from(y), w, h);
            prop_assert_eq!(hot_pixels(&img), vec![(px as u32, py as u32)]);
            prop_assert!(px >= 0.0 && px < f64::from(img.width()) && py >= 0.0 && py < f64::from(img.height()));
        }
    }
}
