//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Everything here is plain Rust over byte buffers so it can be tested
//! natively; the page does the canvas work.

use lesioncascade::data::{generate_synthetic, Sample, SynthConfig};
use lesioncascade::metrics::roc_auc;
use lesioncascade::morphology::{disk_element, lesion_regions, RegionPair, StructuringElement};
use wasm_bindgen::prelude::*;

const CENTER_TINT: [f64; 3] = [0.15, 0.85, 0.35];
const PERIPHERY_TINT: [f64; 3] = [0.95, 0.2, 0.75];
const TINT: f64 = 0.55;

/// One synthetic dermoscopy image with its lesion mask.
#[wasm_bindgen]
pub struct Lesion {
    sample: Sample,
}

#[wasm_bindgen]
impl Lesion {
    /// Sample `index` of the training stream for `seed`. Even indices are
    /// benign, odd ones melanoma.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, index: u32, size: u32) -> Result<Lesion, JsError> {
        let index = index as usize;
        let config = SynthConfig {
            count_per_class: index / 2 + 1,
            image_size: size as usize,
            seed: seed as u64,
            ..SynthConfig::default()
        };
        let sample = generate_synthetic(&config)
            .map_err(|e| JsError::new(&e.to_string()))?
            .swap_remove(index);
        Ok(Lesion { sample })
    }

    pub fn size(&self) -> u32 {
        self.sample.height() as u32
    }

    pub fn id(&self) -> String {
        self.sample.id.clone()
    }

    pub fn melanoma(&self) -> bool {
        self.sample.label == 1
    }

    /// Radius the model would use for this mask height.
    pub fn default_radius(&self) -> u32 {
        disk_element(self.sample.height()).radius() as u32
    }

    /// Row-major RGBA pixels of the image.
    pub fn image_rgba(&self) -> Vec<u8> {
        self.shade(|_| None)
    }

    /// The image with the lesion center and periphery tinted, using a disk
    /// of `radius` pixels.
    pub fn regions_rgba(&self, radius: u32) -> Vec<u8> {
        let r = self.regions(radius);
        self.shade(|i| {
            if r.center.bits()[i] {
                Some(CENTER_TINT)
            } else if r.periphery.bits()[i] {
                Some(PERIPHERY_TINT)
            } else {
                None
            }
        })
    }

    /// `[lesion, center, periphery]` pixel counts.
    pub fn region_counts(&self, radius: u32) -> Vec<u32> {
        let r = self.regions(radius);
        vec![self.sample.mask.count() as u32, r.n_center as u32, r.n_periphery as u32]
    }
}

impl Lesion {
    pub fn sample(&self) -> &Sample {
        &self.sample
    }

    fn regions(&self, radius: u32) -> RegionPair {
        lesion_regions(&self.sample.mask, &StructuringElement::disk(radius.max(1) as usize))
    }

    fn shade(&self, tint: impl Fn(usize) -> Option<[f64; 3]>) -> Vec<u8> {
        let n = self.sample.height() * self.sample.width();
        let d = self.sample.image.data();
        let mut out = Vec::with_capacity(4 * n);
        for i in 0..n {
            let t = tint(i);
            for c in 0..3 {
                let v = match t {
                    Some(t) => (1.0 - TINT) * d[c * n + i] + TINT * t[c],
                    None => d[c * n + i],
                };
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
        out
    }
}

/// ROC curve of scored cases.
#[wasm_bindgen]
pub struct Roc {
    auc: f64,
    points: Vec<f64>,
    cases: usize,
}

#[wasm_bindgen]
impl Roc {
    pub fn auc(&self) -> f64 {
        self.auc
    }

    /// Flattened `(fpr, tpr)` pairs from the strictest threshold on.
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    pub fn cases(&self) -> u32 {
        self.cases as u32
    }
}

/// Parses one `score,label` pair per line (label 0 or 1; blank lines and
/// `#` comments skipped).
pub fn parse_cases(text: &str) -> Result<(Vec<f64>, Vec<usize>), String> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split([',', ' ', '\t']).filter(|f| !f.is_empty());
        let (Some(s), Some(l), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(format!("line {}: expected `score,label`", n + 1));
        };
        let score: f64 = s.parse().map_err(|_| format!("line {}: bad score {s:?}", n + 1))?;
        if !score.is_finite() {
            return Err(format!("line {}: score must be finite", n + 1));
        }
        let label = match l {
            "0" => 0,
            "1" => 1,
            _ => return Err(format!("line {}: label must be 0 or 1, got {l:?}", n + 1)),
        };
        scores.push(score);
        labels.push(label);
    }
    Ok((scores, labels))
}

#[wasm_bindgen]
pub fn roc_from_text(text: &str) -> Result<Roc, JsError> {
    let (scores, labels) = parse_cases(text).map_err(|e| JsError::new(&e))?;
    let curve = roc_auc(&scores, &labels).map_err(|e| JsError::new(&e.to_string()))?;
    Ok(Roc {
        auc: curve.auc,
        points: curve.points.iter().flat_map(|&(f, t)| [f, t]).collect(),
        cases: scores.len(),
    })
}
