//! Samples, the synthetic lesion generator, ISIC-layout I/O and the
//! geometric transforms used for preprocessing and augmentation.

mod isic;
mod synth;
mod transform;

pub use isic::{load_isic, write_isic, LoadReport};
pub use synth::{generate_synthetic, lesion_shape, LesionShape, SynthConfig};
pub use transform::{augment, preprocess, resize_image, resize_mask, AugmentParams, Preprocessed};

use image::RgbImage;

use crate::error::{shape_err, Error, Result};
use crate::morphology::BinaryMask;
use crate::tensor::Tensor;

/// Longest image side after preprocessing.
pub const DEFAULT_MAX_EXTENT: usize = 512;

/// One supervised pair: `[3,H,W]` image in `[0,1]`, lesion mask, class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: BinaryMask,
    /// 0 non-melanoma, 1 melanoma.
    pub label: usize,
    pub id: String,
}

impl Sample {
    pub fn new(image: Tensor, mask: BinaryMask, label: usize, id: impl Into<String>) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_err!("image must be [3,H,W], got {:?}", s));
        }
        if (s[1], s[2]) != (mask.height(), mask.width()) {
            return Err(shape_err!(
                "image is {}×{} but mask is {}×{}",
                s[1],
                s[2],
                mask.height(),
                mask.width()
            ));
        }
        if label > 1 {
            return Err(Error::Value(format!("label must be 0 or 1, got {label}")));
        }
        Ok(Sample {
            image,
            mask,
            label,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// Image as a `[1,3,H,W]` batch of one.
    pub fn batch(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.image.shape());
        self.image.reshaped(&shape).expect("same element count")
    }
}

/// Quantizes a `[3,H,W]` tensor to 8-bit RGB.
pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(shape_err!("image must be [3,H,W], got {:?}", s));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    }))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            d[c * h * w + i] = p[c] as f64 / 255.0;
        }
    }
    t
}
