use herdcount_core::geo::{PatchLabel, PatchRecord};
use herdcount_core::raster::extract_patch;
use image::RgbImage;
use sha2::{Digest, Sha256};

/// A training or evaluation patch held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub patch_id: String,
    pub image: RgbImage,
    /// Patch-local point coordinates.
    pub points: Vec<(f64, f64)>,
}

impl PatchSample {
    pub fn new(patch_id: impl Into<String>, image: RgbImage, points: Vec<(f64, f64)>) -> Self {
        PatchSample {
            patch_id: patch_id.into(),
            image,
            points,
        }
    }

    /// Cuts the patch described by `record` out of its source image.
    pub fn from_record(record: &PatchRecord, source: &RgbImage) -> Self {
        PatchSample {
            patch_id: record.patch_id.clone(),
            image: extract_patch(source, record.origin, record.size.0.max(record.size.1)),
            points: record.points.iter().map(|p| (p.x, p.y)).collect(),
        }
    }

    pub fn label(&self) -> PatchLabel {
        if self.points.is_empty() {
            PatchLabel::Empty
        } else {
            PatchLabel::NonEmpty
        }
    }

    pub fn is_positive(&self) -> bool {
        !self.points.is_empty()
    }
}

/// Hex SHA-256 over ids, points and pixels, in order.
pub fn fingerprint(samples: &[PatchSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.patch_id.as_bytes());
        h.update([0u8]);
        h.update(s.image.width().to_le_bytes());
        h.update(s.image.height().to_le_bytes());
        for &(x, y) in &s.points {
            h.update(x.to_le_bytes());
            h.update(y.to_le_bytes());
        }
        h.update(s.image.as_raw());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_sees_pixels_and_points() {
        let a = PatchSample::new("p", RgbImage::new(4, 4), vec![(1.0, 2.0)]);
        let mut b = a.clone();
        assert_eq!(fingerprint(&[a.clone()]), fingerprint(&[b.clone()]));
        b.image.put_pixel(0, 0, image::Rgb([1, 0, 0]));
        assert_ne!(fingerprint(&[a.clone()]), fingerprint(&[b]));
        let mut c = a.clone();
        c.points[0].0 = 1.5;
        assert_ne!(fingerprint(&[a]), fingerprint(&[c]));
    }
}
