//! Binary masks and disk-shaped morphology.
//!
//! Pixels outside the image always count as background: erosion therefore
//! peels a band off masks that touch the frame.

use std::path::Path;

use image::GrayImage;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "BinaryMask {}×{} ({} set)", self.height, self.width, self.count())?;
        for row in self.bits.chunks(self.width.max(1)) {
            let line: String = row.iter().map(|&b| if b { '#' } else { '.' }).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(shape_err!(
                "mask {}×{} needs {} bits, got {}",
                height,
                width,
                height * width,
                bits.len()
            ));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        BinaryMask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    /// Membership with out-of-frame coordinates reading as background.
    pub fn get_signed(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.bits[y as usize * self.width + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Row-major indices of set pixels.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    fn check_same_size(&self, other: &BinaryMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(shape_err!(
                "mask sizes differ: {}×{} vs {}×{}",
                self.height,
                self.width,
                other.height,
                other.width
            ));
        }
        Ok(())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a || b)
    }

    /// Set difference `self \ other`.
    pub fn minus(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    fn zip(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        self.check_same_size(other)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// 8-bit single-channel image, 0 = background, 255 = lesion.
    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Binarizes a gray image: pixels `≥ 128` are lesion.
    pub fn from_gray_image(img: &GrayImage) -> Self {
        BinaryMask::from_fn(img.height() as usize, img.width() as usize, |y, x| {
            img.get_pixel(x as u32, y as u32)[0] >= 128
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_gray_image().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_gray_image(&img.to_luma8()))
    }
}

/// Disk of offsets `(dy, dx)` with `dy² + dx² ≤ radius²`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    radius: usize,
    offsets: Vec<(isize, isize)>,
}

impl StructuringElement {
    pub fn disk(radius: usize) -> Self {
        let r = radius as isize;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx <= r * r {
                    offsets.push((dy, dx));
                }
            }
        }
        StructuringElement { radius, offsets }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }
}

/// Disk sized to 1/16 of the mask height, at least one pixel.
pub fn disk_element(mask_height: usize) -> StructuringElement {
    let radius = ((mask_height as f64 / 16.0).round() as usize).max(1);
    StructuringElement::disk(radius)
}

/// Lesion mask from per-pixel lesion probabilities: set iff `p > 0.5`.
pub fn threshold_mask(height: usize, width: usize, probs: &[f64]) -> Result<BinaryMask> {
    if probs.len() != height * width {
        return Err(shape_err!(
            "probability map has {} values for a {}×{} mask",
            probs.len(),
            height,
            width
        ));
    }
    if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Value(format!("probability {bad} outside [0, 1]")));
    }
    BinaryMask::new(height, width, probs.iter().map(|&p| p > 0.5).collect())
}

pub fn dilate(mask: &BinaryMask, element: &StructuringElement) -> BinaryMask {
    // p ∈ M ⊕ E  iff  some p − o ∈ M; the disk is symmetric, so scan p + o
    BinaryMask::from_fn(mask.height, mask.width, |y, x| {
        element
            .offsets
            .iter()
            .any(|&(dy, dx)| mask.get_signed(y as isize - dy, x as isize - dx))
    })
}

pub fn erode(mask: &BinaryMask, element: &StructuringElement) -> BinaryMask {
    BinaryMask::from_fn(mask.height, mask.width, |y, x| {
        mask.get(y, x)
            && element
                .offsets
                .iter()
                .all(|&(dy, dx)| mask.get_signed(y as isize + dy, x as isize + dx))
    })
}

/// Lesion center `M ⊖ E` and periphery `(M ⊕ E) \ (M ⊖ E)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPair {
    pub center: BinaryMask,
    pub periphery: BinaryMask,
    pub n_center: usize,
    pub n_periphery: usize,
}

pub fn lesion_regions(mask: &BinaryMask, element: &StructuringElement) -> RegionPair {
    let center = erode(mask, element);
    let periphery = dilate(mask, element)
        .minus(&center)
        .expect("dilation and erosion preserve size");
    RegionPair {
        n_center: center.count(),
        n_periphery: periphery.count(),
        center,
        periphery,
    }
}
