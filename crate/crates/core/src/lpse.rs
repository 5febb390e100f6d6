//! Lesion-based pooling and shape extraction.
//!
//! Features are pooled separately over the lesion center and its periphery
//! band (see [`morphology::lesion_regions`]), giving four statistics per
//! channel that feed a softmax classifier.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::morphology::{self, BinaryMask, RegionPair, StructuringElement};
use crate::params::{he_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Class index of melanoma in every diagnosis vector.
pub const MELANOMA: usize = 1;

/// Which fallback (if any) produced the pooling regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionFallback {
    None,
    /// Erosion removed the whole lesion; the mask itself serves as center.
    MaskAsCenter,
    /// No lesion pixels; both regions span the frame (global pooling).
    FullFrame,
}

/// Pixel index sets actually pooled over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolingRegions {
    pub center: Vec<usize>,
    pub periphery: Vec<usize>,
    pub fallback: RegionFallback,
    pub height: usize,
    pub width: usize,
}

impl PoolingRegions {
    pub fn from_mask(mask: &BinaryMask, element: &StructuringElement) -> Self {
        let (h, w) = (mask.height(), mask.width());
        if mask.is_empty() {
            let all: Vec<usize> = (0..h * w).collect();
            return PoolingRegions {
                center: all.clone(),
                periphery: all,
                fallback: RegionFallback::FullFrame,
                height: h,
                width: w,
            };
        }
        let pair = morphology::lesion_regions(mask, element);
        if pair.n_center == 0 {
            PoolingRegions {
                center: mask.indices(),
                periphery: pair.periphery.indices(),
                fallback: RegionFallback::MaskAsCenter,
                height: h,
                width: w,
            }
        } else {
            Self::from_pair(&pair)
        }
    }

    /// Uses the pair as given; an empty region is replaced by the full frame.
    pub fn from_pair(pair: &RegionPair) -> Self {
        let (h, w) = (pair.center.height(), pair.center.width());
        let all = || (0..h * w).collect::<Vec<_>>();
        let center = pair.center.indices();
        let periphery = pair.periphery.indices();
        let fallback = if center.is_empty() || periphery.is_empty() {
            RegionFallback::FullFrame
        } else {
            RegionFallback::None
        };
        PoolingRegions {
            center: if center.is_empty() { all() } else { center },
            periphery: if periphery.is_empty() { all() } else { periphery },
            fallback,
            height: h,
            width: w,
        }
    }
}

/// `[K,4]` statistics per channel: center mean, periphery mean, center std,
/// periphery std (population normalization). Differentiable in `features`;
/// region membership is constant.
pub fn region_statistics<'t>(features: Var<'t>, regions: &PoolingRegions) -> Result<Var<'t>> {
    let s = features.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if (h, w) != (regions.height, regions.width) {
        return Err(shape_err!(
            "features are {}×{} but regions are {}×{}",
            h,
            w,
            regions.height,
            regions.width
        ));
    }
    features.region_stats(&regions.center, &regions.periphery)
}

/// Linear softmax classifier over the flattened descriptor.
#[derive(Debug, Clone)]
pub struct DescriptorClassifier {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub classes: usize,
}

impl DescriptorClassifier {
    pub fn new(store: &mut ParamStore, prefix: &str, in_features: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.add(
            format!("{prefix}.weight"),
            he_uniform(&[classes, in_features], in_features, rng),
        )?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[classes]))?;
        Ok(DescriptorClassifier {
            weight,
            bias,
            in_features,
            classes,
        })
    }

    /// `softmax(W · flatten(z) + b)` as a `[1,C]` probability row.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, descriptor: Var<'t>) -> Result<Var<'t>> {
        let n: usize = descriptor.shape().iter().product();
        if n != self.in_features {
            return Err(shape_err!(
                "classifier expects {} inputs, descriptor has {}",
                self.in_features,
                n
            ));
        }
        let flat = descriptor.reshape(&[1, n])?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        flat.linear(w, Some(b))?.softmax(1)
    }
}

pub struct LpseOutput<'t> {
    /// `[1,C]` diagnosis probabilities, class order `[non-melanoma, melanoma]`.
    pub diagnosis: Var<'t>,
    /// `[K,4]` lesion descriptor.
    pub descriptor: Var<'t>,
    pub mask: BinaryMask,
    pub regions: PoolingRegions,
}

/// Threshold → disk regions → region statistics → classifier.
///
/// `features` is `[1,K,H,W]`; `lesion_probs` holds `H·W` lesion probabilities.
pub fn lpse_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    classifier: &DescriptorClassifier,
    features: Var<'t>,
    lesion_probs: &[f64],
) -> Result<LpseOutput<'t>> {
    let s = features.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mask = morphology::threshold_mask(h, w, lesion_probs)?;
    let element = morphology::disk_element(h);
    let regions = PoolingRegions::from_mask(&mask, &element);
    let descriptor = region_statistics(features, &regions)?;
    let diagnosis = classifier.forward(tape, store, descriptor)?;
    Ok(LpseOutput {
        diagnosis,
        descriptor,
        mask,
        regions,
    })
}

/// Descriptor as CSV, one row per channel.
pub fn descriptor_csv(descriptor: &Tensor) -> String {
    let mut out = String::from("channel,center_mean,periphery_mean,center_std,periphery_std\n");
    for (k, row) in descriptor.data().chunks(4).enumerate() {
        out.push_str(&format!("{k},{},{},{},{}\n", row[0], row[1], row[2], row[3]));
    }
    out
}
