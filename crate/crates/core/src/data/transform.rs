//! Resizing, padding and random geometric augmentation.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use rand::Rng;

use super::Sample;
use crate::morphology::BinaryMask;
use crate::tensor::Tensor;

/// A preprocessed sample and the geometry needed to map predictions back.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub sample: Sample,
    pub original: (usize, usize),
    /// Size after scaling, before padding.
    pub resized: (usize, usize),
}

impl Preprocessed {
    /// Crops the padding off a mask at the padded size and resizes it back
    /// to the original resolution.
    pub fn restore_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (rh, rw) = self.resized;
        let cropped = BinaryMask::from_fn(rh, rw, |y, x| mask.get(y, x));
        resize_mask(&cropped, self.original.0, self.original.1)
    }
}

fn nearest_index(o: usize, from: usize, to: usize) -> usize {
    (((o as f64 + 0.5) * from as f64 / to as f64) as usize).min(from - 1)
}

pub fn resize_mask(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(height, width, |y, x| {
        mask.get(nearest_index(y, h, height), nearest_index(x, w, width))
    })
}

/// Bilinear (triangle filter) resize of a `[3,H,W]` image.
pub fn resize_image(image: &Tensor, height: usize, width: usize) -> Tensor {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    if (h, w) == (height, width) {
        return image.clone();
    }
    let d = image.data();
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([d[i] as f32, d[h * w + i] as f32, d[2 * h * w + i] as f32])
    });
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    let mut t = Tensor::zeros(&[3, height, width]);
    let td = t.data_mut();
    for (x, y, p) in out.enumerate_pixels() {
        let i = y as usize * width + x as usize;
        for c in 0..3 {
            td[c * height * width + i] = (p[c] as f64).clamp(0.0, 1.0);
        }
    }
    t
}

fn pad_to(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Scales the longest side down to `max_extent` (never up) and zero-pads
/// bottom and right to multiples of 32.
pub fn preprocess(sample: &Sample, max_extent: usize) -> Preprocessed {
    let (h, w) = (sample.height(), sample.width());
    let longest = h.max(w);
    let (rh, rw) = if longest > max_extent {
        let f = max_extent as f64 / longest as f64;
        (
            ((h as f64 * f).round() as usize).max(1),
            ((w as f64 * f).round() as usize).max(1),
        )
    } else {
        (h, w)
    };
    let image = resize_image(&sample.image, rh, rw);
    let mask = resize_mask(&sample.mask, rh, rw);
    let (ph, pw) = (pad_to(rh, 32), pad_to(rw, 32));
    let mut padded = Tensor::zeros(&[3, ph, pw]);
    for c in 0..3 {
        for y in 0..rh {
            let src = &image.data()[(c * rh + y) * rw..][..rw];
            padded.data_mut()[(c * ph + y) * pw..][..rw].copy_from_slice(src);
        }
    }
    let mask = BinaryMask::from_fn(ph, pw, |y, x| y < rh && x < rw && mask.get(y, x));
    Preprocessed {
        sample: Sample {
            image: padded,
            mask,
            label: sample.label,
            id: sample.id.clone(),
        },
        original: (h, w),
        resized: (rh, rw),
    }
}

/// One draw of the random geometric transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    /// Zoom factor; values above 1 crop, below 1 pad with zeros.
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        hflip: false,
        vflip: false,
        scale: 1.0,
    };

    pub fn draw(rng: &mut impl Rng) -> Self {
        AugmentParams {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            scale: rng.gen_range(0.8..=1.2),
        }
    }

    /// Source coordinate sampled by output pixel `(y, x)`.
    pub fn source(&self, y: usize, x: usize, height: usize, width: usize) -> (f64, f64) {
        let back = |o: usize, n: usize, flip: bool| {
            let half = n as f64 / 2.0;
            let s = (o as f64 + 0.5 - half) / self.scale + half - 0.5;
            if flip {
                (n - 1) as f64 - s
            } else {
                s
            }
        };
        (back(y, height, self.vflip), back(x, width, self.hflip))
    }

    /// Applies the transform: bilinear for the image, nearest for the mask,
    /// zeros / background outside the source frame.
    pub fn apply(&self, sample: &Sample) -> Sample {
        let (h, w) = (sample.height(), sample.width());
        let src = sample.image.data();
        let mut image = Tensor::zeros(&[3, h, w]);
        let mut mask = BinaryMask::empty(h, w);
        let out = image.data_mut();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x, h, w);
                let (ny, nx) = ((sy + 0.5).floor(), (sx + 0.5).floor());
                if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                    mask.set(y, x, sample.mask.get(ny as usize, nx as usize));
                }
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                        let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
                        let wt = wy * wx;
                        if wt == 0.0 || yy < 0 || xx < 0 || yy as usize >= h || xx as usize >= w {
                            continue;
                        }
                        let i = yy as usize * w + xx as usize;
                        for c in 0..3 {
                            out[(c * h + y) * w + x] += wt * src[c * h * w + i];
                        }
                    }
                }
            }
        }
        Sample {
            image,
            mask,
            label: sample.label,
            id: sample.id.clone(),
        }
    }
}

/// Independent flips with probability ½ and a uniform scale in `[0.8, 1.2]`
/// followed by a center crop or pad back to the original size.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    AugmentParams::draw(rng).apply(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> Sample {
        let image = Tensor::from_fn(&[3, h, w], |i| ((i * 37) % 101) as f64 / 100.0);
        let mask = BinaryMask::from_fn(h, w, |y, x| y * 3 + x < h + w);
        Sample::new(image, mask, 1, "s").unwrap()
    }

    #[test]
    fn preprocess_is_noop_on_small_aligned_input() {
        let s = sample(64, 64);
        let p = preprocess(&s, 512);
        assert_eq!(p.sample, s);
        assert_eq!(p.resized, (64, 64));
    }

    #[test]
    fn preprocess_pads_to_multiple_of_32_and_restores() {
        let s = sample(40, 70);
        let p = preprocess(&s, 512);
        assert_eq!(p.sample.image.shape(), &[3, 64, 96]);
        assert!(!p.sample.mask.get(50, 10));
        assert_eq!(p.sample.image.data()[50 * 96 + 10], 0.0);
        assert_eq!(p.restore_mask(&p.sample.mask), s.mask);
    }

    #[test]
    fn identity_and_double_flip() {
        let s = sample(32, 32);
        assert_eq!(AugmentParams::IDENTITY.apply(&s), s);
        let h = AugmentParams {
            hflip: true,
            ..AugmentParams::IDENTITY
        };
        assert_eq!(h.apply(&h.apply(&s)), s);
        let v = AugmentParams {
            vflip: true,
            ..AugmentParams::IDENTITY
        };
        assert_eq!(v.apply(&v.apply(&s)), s);
    }
}
