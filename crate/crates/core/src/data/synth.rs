//! Procedural dermoscopy-like images.
//!
//! Each lesion is a star-convex blob in a rotated, anisotropically scaled
//! frame:
//!
//! ```text
//! r(θ) = r₀ · (1 + Σ_{m=1..M} a_m · cos(mθ + φ_m))
//! ```
//!
//! Melanoma draws its total amplitude `Σ a_m` from a range strictly above
//! the benign one and gets stronger color variance: darker and lighter
//! blotches in the interior plus radial streaks near the border. Lesion base
//! color is drawn from the same distribution for both classes, so the mean
//! image color carries little label information.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::morphology::BinaryMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count_per_class: usize,
    /// Side length of the square frame; a multiple of 32.
    pub image_size: usize,
    /// Range of the total harmonic amplitude `Σ a_m` for benign lesions.
    pub benign_irregularity: [f64; 2],
    pub melanoma_irregularity: [f64; 2],
    /// Strength of interior blotches and border streaks.
    pub benign_color_variance: [f64; 2],
    pub melanoma_color_variance: [f64; 2],
    /// Chance that a sample carries hair-like strokes.
    pub hair_probability: f64,
    pub seed: u64,
    /// Independent sample stream; the CLI uses 0 for train and 1 for test.
    pub stream: u64,
    pub harmonics: usize,
    /// Mean radius as a fraction of the frame side.
    pub radius_range: [f64; 2],
    /// Ratio of the two ellipse axes.
    pub aspect_range: [f64; 2],
    /// Maximum center offset as a fraction of the frame side.
    pub center_jitter: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count_per_class: 100,
            image_size: 64,
            benign_irregularity: [0.0, 0.08],
            melanoma_irregularity: [0.15, 0.35],
            benign_color_variance: [0.0, 0.05],
            melanoma_color_variance: [0.10, 0.22],
            hair_probability: 0.3,
            seed: 42,
            stream: 0,
            harmonics: 6,
            radius_range: [0.17, 0.28],
            aspect_range: [0.85, 1.18],
            center_jitter: 0.06,
            noise_std: 0.015,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && 0.0 <= r[0] && r[0] <= r[1]) {
        return Err(Error::Config(format!("{name} must satisfy 0 ≤ lo ≤ hi, got {r:?}")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if self.count_per_class == 0 {
            return Err(Error::Config("count_per_class must be at least 1".into()));
        }
        if self.harmonics == 0 {
            return Err(Error::Config("harmonics must be at least 1".into()));
        }
        check_range("benign_irregularity", self.benign_irregularity)?;
        check_range("melanoma_irregularity", self.melanoma_irregularity)?;
        check_range("benign_color_variance", self.benign_color_variance)?;
        check_range("melanoma_color_variance", self.melanoma_color_variance)?;
        check_range("radius_range", self.radius_range)?;
        check_range("aspect_range", self.aspect_range)?;
        if self.melanoma_irregularity[0] <= self.benign_irregularity[1] {
            return Err(Error::Config(format!(
                "melanoma irregularity {:?} must lie strictly above benign {:?}",
                self.melanoma_irregularity, self.benign_irregularity
            )));
        }
        if self.melanoma_irregularity[1] >= 1.0 {
            return Err(Error::Config("irregularity must stay below 1 to keep the radius positive".into()));
        }
        if self.radius_range[0] <= 0.0 || self.aspect_range[0] <= 0.0 {
            return Err(Error::Config("radius and aspect ranges must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hair_probability) {
            return Err(Error::Config(format!(
                "hair_probability must lie in [0,1], got {}",
                self.hair_probability
            )));
        }
        if !(self.center_jitter >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::Config("center_jitter and noise_std must be non-negative".into()));
        }
        let reach = self.radius_range[1] * self.aspect_range[1].max(1.0 / self.aspect_range[0]).sqrt()
            * (1.0 + self.melanoma_irregularity[1])
            + self.center_jitter;
        let limit = 0.5 - 1.0 / self.image_size as f64;
        if reach > limit {
            return Err(Error::Config(format!(
                "largest blob reaches {reach:.3} of the frame from its center, limit is {limit:.3}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        2 * self.count_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.count_per_class == 0
    }
}

/// Geometry of one lesion in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionShape {
    pub center_x: f64,
    pub center_y: f64,
    /// Semi-axes of the base ellipse.
    pub radius_x: f64,
    pub radius_y: f64,
    pub rotation: f64,
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
}

impl LesionShape {
    /// Normalized radius and angle of pixel `(y, x)` (sampled at its center).
    pub fn polar(&self, y: usize, x: usize) -> (f64, f64) {
        let dx = x as f64 + 0.5 - self.center_x;
        let dy = y as f64 + 0.5 - self.center_y;
        let (s, c) = self.rotation.sin_cos();
        let u = (dx * c + dy * s) / self.radius_x;
        let v = (-dx * s + dy * c) / self.radius_y;
        (u.hypot(v), v.atan2(u))
    }

    /// `1 + Σ a_m cos(mθ + φ_m)`.
    pub fn boundary(&self, theta: f64) -> f64 {
        1.0 + self
            .amplitudes
            .iter()
            .zip(&self.phases)
            .enumerate()
            .map(|(m, (a, p))| a * ((m + 1) as f64 * theta + p).cos())
            .sum::<f64>()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (rho, theta) = self.polar(y, x);
        rho <= self.boundary(theta)
    }

    /// Approximate signed distance to the border in pixels, positive inside.
    fn depth(&self, y: usize, x: usize) -> f64 {
        let (rho, theta) = self.polar(y, x);
        (self.boundary(theta) - rho) * (self.radius_x * self.radius_y).sqrt()
    }

    pub fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| self.contains(y, x))
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn sample_rng(config: &SynthConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream((config.stream << 40) | index as u64);
    rng
}

fn label_of(index: usize) -> usize {
    index % 2
}

fn draw_shape(config: &SynthConfig, label: usize, rng: &mut impl Rng) -> LesionShape {
    let size = config.image_size as f64;
    let r0 = uniform(rng, config.radius_range) * size;
    let aspect = uniform(rng, config.aspect_range).sqrt();
    let jitter = config.center_jitter * size;
    let mut offset = || if jitter > 0.0 { rng.gen_range(-jitter..jitter) } else { 0.0 };
    let (center_x, center_y) = (size / 2.0 + offset(), size / 2.0 + offset());
    let rotation = rng.gen_range(0.0..PI);
    let total = uniform(
        rng,
        if label == 1 {
            config.melanoma_irregularity
        } else {
            config.benign_irregularity
        },
    );
    let weights: Vec<f64> = (0..config.harmonics).map(|_| rng.gen_range(0.05..1.0)).collect();
    let norm: f64 = weights.iter().sum();
    let amplitudes = weights.iter().map(|w| total * w / norm).collect();
    let phases = (0..config.harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    LesionShape {
        center_x,
        center_y,
        radius_x: r0 * aspect,
        radius_y: r0 / aspect,
        rotation,
        amplitudes,
        phases,
    }
}

/// Shape of sample `index` without rendering the image.
pub fn lesion_shape(config: &SynthConfig, index: usize) -> LesionShape {
    draw_shape(config, label_of(index), &mut sample_rng(config, index))
}

const TONES: [[f64; 3]; 3] = [[-1.0, -1.0, -0.8], [-0.6, -0.3, 0.3], [0.9, 0.8, 0.7]];

struct Blotch {
    y: f64,
    x: f64,
    sigma: f64,
    tone: [f64; 3],
}

fn render(config: &SynthConfig, index: usize) -> Sample {
    let label = label_of(index);
    let mut rng = sample_rng(config, index);
    let shape = draw_shape(config, label, &mut rng);
    let n = config.image_size;
    let size = n as f64;

    let skin = [rng.gen_range(0.76..0.92), rng.gen_range(0.56..0.72), rng.gen_range(0.46..0.62)];
    let light_dir = rng.gen_range(0.0..2.0 * PI);
    let light = rng.gen_range(-0.06..0.06);
    let base = [rng.gen_range(0.40..0.62), rng.gen_range(0.24..0.40), rng.gen_range(0.16..0.30)];
    let core_shade = rng.gen_range(0.0..0.15);
    let variance = uniform(
        &mut rng,
        if label == 1 {
            config.melanoma_color_variance
        } else {
            config.benign_color_variance
        },
    );

    let r_eff = (shape.radius_x * shape.radius_y).sqrt();
    let first_tone = rng.gen_range(0..TONES.len());
    let blotches: Vec<Blotch> = (0..rng.gen_range(3..8))
        .map(|i| {
            let a = rng.gen_range(0.0..2.0 * PI);
            let d = rng.gen_range(0.0..0.7) * r_eff;
            Blotch {
                y: shape.center_y + d * a.sin(),
                x: shape.center_x + d * a.cos(),
                sigma: rng.gen_range(0.15..0.35) * r_eff,
                tone: TONES[(first_tone + i) % TONES.len()],
            }
        })
        .collect();
    let blotch_gain = 2.5 * variance;
    let streak_freq = rng.gen_range(7..14) as f64;
    let streak_phase = rng.gen_range(0.0..2.0 * PI);

    let mut img = vec![[0.0f64; 3]; n * n];
    for y in 0..n {
        for x in 0..n {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let shade = light * ((px / size - 0.5) * light_dir.cos() + (py / size - 0.5) * light_dir.sin());
            let mut color = [skin[0] + shade, skin[1] + shade, skin[2] + shade];

            let alpha = (shape.depth(y, x) / 1.2 + 0.5).clamp(0.0, 1.0);
            if alpha > 0.0 {
                let (rho, theta) = shape.polar(y, x);
                let t = (rho / shape.boundary(theta)).min(1.0);
                let mut lesion = base.map(|b| b * (1.0 - core_shade * (1.0 - t)));
                for b in &blotches {
                    let w = (-((py - b.y).powi(2) + (px - b.x).powi(2)) / (2.0 * b.sigma * b.sigma)).exp();
                    for c in 0..3 {
                        lesion[c] += blotch_gain * w * b.tone[c];
                    }
                }
                let rim = ((t - 0.65) / 0.35).clamp(0.0, 1.0);
                let streak = 0.5 + 0.5 * (streak_freq * theta + streak_phase).cos();
                for c in lesion.iter_mut() {
                    *c -= 1.5 * variance * rim * streak;
                }
                for c in 0..3 {
                    color[c] = alpha * lesion[c] + (1.0 - alpha) * color[c];
                }
            }
            img[y * n + x] = color;
        }
    }

    if rng.gen_bool(config.hair_probability) {
        for _ in 0..rng.gen_range(1..4) {
            draw_hair(&mut img, n, &mut rng);
        }
    }

    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut image = Tensor::zeros(&[3, n, n]);
    let d = image.data_mut();
    for (i, px) in img.iter().enumerate() {
        for c in 0..3 {
            let v = if config.noise_std > 0.0 {
                px[c] + noise.sample(&mut rng)
            } else {
                px[c]
            };
            // Quantized so that a PNG round trip is lossless.
            d[c * n * n + i] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    let mask = shape.rasterize(n, n);
    let id = format!("SYN_{:02}{:05}", config.stream % 100, index);
    Sample::new(image, mask, label, id).expect("generator output is consistent")
}

/// Dark quadratic Bézier stroke across the frame.
fn draw_hair(img: &mut [[f64; 3]], n: usize, rng: &mut impl Rng) {
    let size = n as f64;
    let mut point = || (rng.gen_range(0.0..size), rng.gen_range(0.0..size));
    let (p0, p1, p2) = (point(), point(), point());
    let width = rng.gen_range(0.5..1.0);
    let darkness = rng.gen_range(0.5..0.85);
    let hair = [0.14, 0.10, 0.08];
    let mut cover = vec![0.0f64; n * n];
    let steps = 6 * n;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let u = 1.0 - t;
        let hy = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
        let hx = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
        let (y0, x0) = ((hy - 2.0).floor().max(0.0) as usize, (hx - 2.0).floor().max(0.0) as usize);
        for y in y0..(y0 + 5).min(n) {
            for x in x0..(x0 + 5).min(n) {
                let dist = (y as f64 + 0.5 - hy).hypot(x as f64 + 0.5 - hx);
                let c = (width - dist + 0.5).clamp(0.0, 1.0);
                let slot = &mut cover[y * n + x];
                *slot = slot.max(c);
            }
        }
    }
    for (px, &c) in img.iter_mut().zip(&cover) {
        let a = c * darkness;
        for ch in 0..3 {
            px[ch] = a * hair[ch] + (1.0 - a) * px[ch];
        }
    }
}

/// Renders `2 · count_per_class` samples with alternating labels, starting
/// with non-melanoma. Each sample depends only on `(seed, stream, index)`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    Ok((0..config.len()).map(|i| render(config, i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            count_per_class: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        SynthConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_overlapping_irregularity_ranges() {
        let c = SynthConfig {
            melanoma_irregularity: [0.05, 0.3],
            ..SynthConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_blob_larger_than_frame() {
        let c = SynthConfig {
            radius_range: [0.3, 0.45],
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&c), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_size_not_multiple_of_32() {
        let c = SynthConfig {
            image_size: 48,
            ..SynthConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn labels_alternate_and_ids_are_unique() {
        let s = generate_synthetic(&small()).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s.iter().map(|s| s.label).collect::<Vec<_>>(), [0, 1, 0, 1, 0, 1, 0, 1]);
        assert_eq!(s[1].id, "SYN_0000001");
        let mut ids: Vec<_> = s.iter().map(|s| &s.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn streams_differ_and_shape_matches_render() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&SynthConfig { stream: 1, ..small() }).unwrap();
        assert_ne!(a[0].image, b[0].image);
        assert_eq!(lesion_shape(&small(), 3).rasterize(64, 64), a[3].mask);
    }

    #[test]
    fn values_are_quantized() {
        let s = generate_synthetic(&small()).unwrap();
        for &v in s[0].image.data() {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }
}
