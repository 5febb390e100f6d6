//! Network assembly: backbone, skip fusion, and the cascade of
//! segmentation/diagnosis stages.
//!
//! Each stage reads features `F_in`, predicts a lesion map from them, pools
//! `F_in` over the predicted lesion (or globally) to diagnose, gates the
//! features with that diagnosis, and re-predicts segmentation from the gated
//! features `F''`, which also become the next stage's input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Alignment, Tape, Var};
use crate::dgff::{self, DgffParams};
use crate::error::{shape_err, Error, Result};
use crate::kernels::Precision;
use crate::lpse::{self, DescriptorClassifier, RegionFallback, MELANOMA};
use crate::morphology::BinaryMask;
use crate::params::{he_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Image-level pooling that feeds the diagnosis classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Center/periphery statistics over the predicted lesion.
    Lpse,
    /// Global average pooling.
    Gap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Supervision {
    AllStages,
    FinalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub block_channels: Vec<usize>,
    pub num_classes_seg: usize,
    pub num_classes_cls: usize,
    pub stages: usize,
    pub beta: f64,
    pub precision: Precision,
    pub pooling: Pooling,
    pub dgff: bool,
    pub share_stages: bool,
    pub per_channel_mix: bool,
    pub supervision: Supervision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 3,
            block_channels: vec![16, 32, 64, 128, 256],
            num_classes_seg: 2,
            num_classes_cls: 2,
            stages: 3,
            beta: 0.3,
            precision: Precision::F64,
            pooling: Pooling::Lpse,
            dgff: true,
            share_stages: false,
            per_channel_mix: false,
            supervision: Supervision::AllStages,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.len() != 5 {
            return Err(Error::Config(format!(
                "block_channels needs 5 widths, got {}",
                self.block_channels.len()
            )));
        }
        if self.block_channels.iter().any(|&c| c == 0) || self.input_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.stages == 0 {
            return Err(Error::Config("stages must be ≥ 1".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be ≥ 0, got {}", self.beta)));
        }
        if self.num_classes_seg != 2 {
            return Err(Error::Config("segmentation is lesion vs background (2 classes)".into()));
        }
        if self.num_classes_cls < 2 {
            return Err(Error::Config("diagnosis needs at least 2 classes".into()));
        }
        Ok(())
    }

    /// Width `K` of the cascade features (the Block-3 width).
    pub fn feature_channels(&self) -> usize {
        self.block_channels[2]
    }

    /// The plain baseline: global pooling, no fusion, one stage.
    pub fn baseline() -> Self {
        ModelConfig {
            stages: 1,
            pooling: Pooling::Gap,
            dgff: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan_in = c_in * k * k;
        Ok(ConvParams {
            weight: store.add(format!("{name}.weight"), he_uniform(&[c_out, c_in, k, k], fan_in, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
        })
    }

    fn apply<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        x.conv2d(w, Some(b), stride, padding)
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub entry: ConvParams,
    pub body: ConvParams,
}

/// Diagnosis head for one stage.
#[derive(Debug, Clone)]
pub enum Classifier {
    Lpse(DescriptorClassifier),
    Gap { weight: ParamId, bias: ParamId },
}

#[derive(Debug, Clone)]
pub struct StageParams {
    /// Per-pixel linear classifier `K → 2` (1×1 convolution).
    pub seg_head: ConvParams,
    pub classifier: Classifier,
    pub dgff: Option<DgffParams>,
}

/// Parameter handles of the whole network.
#[derive(Debug, Clone)]
pub struct LesionNet {
    pub config: ModelConfig,
    pub blocks: Vec<BlockParams>,
    pub proj3: ConvParams,
    pub proj4: ConvParams,
    pub proj5: ConvParams,
    pub stages: Vec<StageParams>,
}

pub struct BackboneFeatures<'t> {
    pub blocks: Vec<Var<'t>>,
}

/// Outputs of one cascade stage.
pub struct StageOutputs<'t> {
    /// `[1,2,h,w]` scores at feature resolution (from `F''`).
    pub seg_scores: Var<'t>,
    /// `[1,2,H,W]` class probabilities at input resolution.
    pub seg_probs_full: Var<'t>,
    /// `[1,C]` diagnosis probabilities.
    pub diagnosis: Var<'t>,
    /// `[K,4]` lesion descriptor when pooling is LPSE.
    pub descriptor: Option<Var<'t>>,
    /// `F''`, `[1,K,h,w]`.
    pub features_out: Var<'t>,
    /// Mask that drove the pooling, at feature resolution.
    pub pooling_mask: BinaryMask,
    pub fallback: RegionFallback,
}

impl StageOutputs<'_> {
    pub fn melanoma_probability(&self) -> f64 {
        self.diagnosis.value().data()[MELANOMA]
    }

    pub fn diagnosis_probs(&self) -> Vec<f64> {
        self.diagnosis.value().data().to_vec()
    }

    /// Lesion probability per input pixel.
    pub fn lesion_probs(&self) -> Vec<f64> {
        let p = self.seg_probs_full.value();
        let hw = p.numel() / 2;
        p.data()[hw..].to_vec()
    }

    /// Final segmentation at input resolution (`p_lesion > 0.5`).
    pub fn predicted_mask(&self) -> BinaryMask {
        let s = self.seg_probs_full.shape();
        BinaryMask::new(s[2], s[3], self.lesion_probs().iter().map(|&p| p > 0.5).collect())
            .expect("shape consistent")
    }
}

impl LesionNet {
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let ch = &config.block_channels;
        let mut blocks = Vec::with_capacity(5);
        let mut c_in = config.input_channels;
        for (i, &c) in ch.iter().enumerate() {
            blocks.push(BlockParams {
                entry: ConvParams::new(store, &format!("block{}.entry", i + 1), c_in, c, 3, rng)?,
                body: ConvParams::new(store, &format!("block{}.body", i + 1), c, c, 3, rng)?,
            });
            c_in = c;
        }
        let k = config.feature_channels();
        let proj3 = ConvParams::new(store, "fuse.proj3", ch[2], k, 1, rng)?;
        let proj4 = ConvParams::new(store, "fuse.proj4", ch[3], k, 1, rng)?;
        let proj5 = ConvParams::new(store, "fuse.proj5", ch[4], k, 1, rng)?;
        let distinct = if config.share_stages { 1 } else { config.stages };
        let mut unique = Vec::with_capacity(distinct);
        for s in 0..distinct {
            unique.push(Self::new_stage(&config, store, &format!("stage{}", s + 1), rng)?);
        }
        let stages = (0..config.stages).map(|s| unique[s.min(distinct - 1)].clone()).collect();
        Ok(LesionNet {
            config,
            blocks,
            proj3,
            proj4,
            proj5,
            stages,
        })
    }

    fn new_stage(config: &ModelConfig, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<StageParams> {
        let k = config.feature_channels();
        let c = config.num_classes_cls;
        let seg_head = ConvParams::new(store, &format!("{prefix}.seg_head"), k, 2, 1, rng)?;
        let classifier = match config.pooling {
            Pooling::Lpse => Classifier::Lpse(DescriptorClassifier::new(store, &format!("{prefix}.cls"), 4 * k, c, rng)?),
            Pooling::Gap => Classifier::Gap {
                weight: store.add(format!("{prefix}.cls.weight"), he_uniform(&[c, k], k, rng))?,
                bias: store.add(format!("{prefix}.cls.bias"), Tensor::zeros(&[c]))?,
            },
        };
        let dgff = if config.dgff {
            Some(DgffParams::new(store, &format!("{prefix}.dgff"), k, c, config.per_channel_mix, rng)?)
        } else {
            None
        };
        Ok(StageParams {
            seg_head,
            classifier,
            dgff,
        })
    }

    /// Five stride-2 blocks; block `i` has spatial size `(H/2^i, W/2^i)`.
    pub fn backbone_forward<'t>(&self, tape: &'t Tape, store: &ParamStore, image: Var<'t>) -> Result<BackboneFeatures<'t>> {
        let s = image.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != self.config.input_channels {
            return Err(shape_err!(
                "backbone expects [1,{},H,W], got {:?}",
                self.config.input_channels,
                s
            ));
        }
        if s[2] % 32 != 0 || s[3] % 32 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Config(format!(
                "input {}×{} is not a positive multiple of 32",
                s[2], s[3]
            )));
        }
        let mut x = image;
        let mut blocks = Vec::with_capacity(5);
        for b in &self.blocks {
            x = b.entry.apply(tape, store, x, 2, 1)?.relu()?;
            x = b.body.apply(tape, store, x, 1, 1)?.relu()?;
            blocks.push(x);
        }
        Ok(BackboneFeatures { blocks })
    }

    /// `relu(P3·B3 + up(P4·B4) + up(P5·B5))` at Block-3 resolution.
    pub fn fuse_fcn8s<'t>(&self, tape: &'t Tape, store: &ParamStore, b3: Var<'t>, b4: Var<'t>, b5: Var<'t>) -> Result<Var<'t>> {
        let s3 = b3.shape();
        if s3.len() != 4 {
            return Err(shape_err!("fuse expects 4-d block features, got {:?}", s3));
        }
        let (h, w) = (s3[2], s3[3]);
        let p3 = self.proj3.apply(tape, store, b3, 1, 0)?;
        let p4 = self.proj4.apply(tape, store, b4, 1, 0)?.resize_bilinear(h, w, Alignment::Strided)?;
        let p5 = self.proj5.apply(tape, store, b5, 1, 0)?.resize_bilinear(h, w, Alignment::Strided)?;
        p3.add(p4)?.add(p5)?.relu()
    }

    /// Scores at feature resolution and renormalized probabilities at `target`.
    pub fn seg_head<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        stage: &StageParams,
        features: Var<'t>,
        target_h: usize,
        target_w: usize,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let scores = stage.seg_head.apply(tape, store, features, 1, 0)?;
        let probs = scores.softmax(1)?;
        let full = probs.resize_bilinear(target_h, target_w, Alignment::Strided)?.normalize(1)?;
        Ok((scores, probs, full))
    }

    pub fn stage_forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        stage: &StageParams,
        features_in: Var<'t>,
        target_h: usize,
        target_w: usize,
    ) -> Result<StageOutputs<'t>> {
        let fs = features_in.shape();
        let (h, w) = (fs[2], fs[3]);
        let (scores_in, probs_in, full_in) = self.seg_head(tape, store, stage, features_in, target_h, target_w)?;
        let lesion_plane = probs_in.value().data()[h * w..2 * h * w].to_vec();

        let (diagnosis, descriptor, pooling_mask, fallback) = match &stage.classifier {
            Classifier::Lpse(cls) => {
                let out = lpse::lpse_forward(tape, store, cls, features_in, &lesion_plane)?;
                (out.diagnosis, Some(out.descriptor), out.mask, out.regions.fallback)
            }
            Classifier::Gap { weight, bias } => {
                let gap = features_in.channel_mean()?;
                let g = gap
                    .linear(tape.param(store, *weight), Some(tape.param(store, *bias)))?
                    .softmax(1)?;
                let mask = crate::morphology::threshold_mask(h, w, &lesion_plane)?;
                (g, None, mask, RegionFallback::FullFrame)
            }
        };

        let (seg_scores, seg_probs_full, features_out) = match &stage.dgff {
            Some(p) => {
                let refined = dgff::dgff_forward(tape, store, p, features_in, diagnosis)?;
                let (scores, _, full) = self.seg_head(tape, store, stage, refined, target_h, target_w)?;
                (scores, full, refined)
            }
            None => (scores_in, full_in, features_in),
        };
        Ok(StageOutputs {
            seg_scores,
            seg_probs_full,
            diagnosis,
            descriptor,
            features_out,
            pooling_mask,
            fallback,
        })
    }

    /// Runs the whole cascade on one `[3,H,W]` (or `[1,3,H,W]`) image.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, image: &Tensor) -> Result<Vec<StageOutputs<'t>>> {
        let s = image.shape();
        let image = match s.len() {
            3 => image.reshaped(&[1, s[0], s[1], s[2]])?,
            4 => image.clone(),
            _ => return Err(shape_err!("image must be [C,H,W], got {:?}", s)),
        };
        let (h, w) = (image.shape()[2], image.shape()[3]);
        let x = tape.constant(image);
        let feats = self.backbone_forward(tape, store, x)?;
        let mut f = self.fuse_fcn8s(tape, store, feats.blocks[2], feats.blocks[3], feats.blocks[4])?;
        let mut outputs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let out = self.stage_forward(tape, store, stage, f, h, w)?;
            f = out.features_out;
            outputs.push(out);
        }
        Ok(outputs)
    }
}

/// Segmentation cross-entropy of one stage against per-pixel labels (0/1).
pub fn seg_loss<'t>(out: &StageOutputs<'t>, seg_gt: &[usize]) -> Result<Var<'t>> {
    let s = out.seg_probs_full.shape();
    if seg_gt.len() != s[2] * s[3] {
        return Err(shape_err!(
            "ground truth has {} pixels, prediction is {}×{}",
            seg_gt.len(),
            s[2],
            s[3]
        ));
    }
    out.seg_probs_full.nll(seg_gt, 1)
}

pub fn cls_loss<'t>(out: &StageOutputs<'t>, cls_gt: usize) -> Result<Var<'t>> {
    out.diagnosis.nll(&[cls_gt], 1)
}

/// `Σ_stages [L_seg + β · L_cls]` over the supervised stages.
pub fn total_loss<'t>(
    outputs: &[StageOutputs<'t>],
    seg_gt: &[usize],
    cls_gt: usize,
    beta: f64,
    supervision: Supervision,
) -> Result<Var<'t>> {
    let supervised = match supervision {
        Supervision::AllStages => outputs,
        Supervision::FinalOnly => &outputs[outputs.len().saturating_sub(1)..],
    };
    let mut total: Option<Var<'t>> = None;
    for out in supervised {
        let mut term = seg_loss(out, seg_gt)?;
        if beta != 0.0 {
            term = term.add(cls_loss(out, cls_gt)?.scale(beta)?)?;
        }
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("no stage outputs to supervise".into()))
}

/// Mask as per-pixel class labels (1 = lesion).
pub fn mask_labels(mask: &BinaryMask) -> Vec<usize> {
    mask.bits().iter().map(|&b| usize::from(b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            block_channels: vec![4, 4, 6, 6, 8],
            ..ModelConfig::default()
        }
    }

    fn build(config: ModelConfig) -> (ParamStore, LesionNet) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let net = LesionNet::new(config, &mut store, &mut rng).unwrap();
        (store, net)
    }

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| ((i * 37) % 101) as f64 / 100.0)
    }

    #[test]
    fn block_shapes() {
        let (store, net) = build(small_config());
        let tape = Tape::new();
        let x = tape.constant(image(64, 64).reshaped(&[1, 3, 64, 64]).unwrap());
        let f = net.backbone_forward(&tape, &store, x).unwrap();
        let sizes: Vec<_> = f.blocks.iter().map(|b| b.shape()[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
        assert_eq!(f.blocks[4].shape()[1], 8);
    }

    #[test]
    fn indivisible_input_is_config_error() {
        let (store, net) = build(small_config());
        let tape = Tape::new();
        assert!(matches!(net.forward(&tape, &store, &image(48, 64)), Err(Error::Config(_))));
    }

    #[test]
    fn stage_count_and_identity_cascade_at_init() {
        for n in 1..=5 {
            let (store, net) = build(ModelConfig { stages: n, ..small_config() });
            let tape = Tape::new();
            let outs = net.forward(&tape, &store, &image(32, 32)).unwrap();
            assert_eq!(outs.len(), n);
            for o in &outs[1..] {
                assert_eq!(*o.features_out.value(), *outs[0].features_out.value());
            }
        }
    }

    #[test]
    fn probability_maps_are_distributions() {
        let (store, net) = build(small_config());
        let tape = Tape::new();
        let outs = net.forward(&tape, &store, &image(32, 64)).unwrap();
        for o in &outs {
            let p = o.seg_probs_full.value();
            assert_eq!(p.shape(), &[1, 2, 32, 64]);
            let hw = 32 * 64;
            for i in 0..hw {
                assert!((p.data()[i] + p.data()[hw + i] - 1.0).abs() < 1e-12);
            }
            assert!((o.diagnosis.value().sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_prediction_loss() {
        let (mut store, net) = build(ModelConfig { stages: 1, ..small_config() });
        let st = &net.stages[0];
        store.set_value(st.seg_head.weight, Tensor::zeros(&[2, 6, 1, 1])).unwrap();
        if let Classifier::Lpse(c) = &st.classifier {
            store.set_value(c.weight, Tensor::zeros(&[2, 24])).unwrap();
        }
        let tape = Tape::new();
        let outs = net.forward(&tape, &store, &image(32, 32)).unwrap();
        let gt = vec![1usize; 32 * 32];
        let l = total_loss(&outs, &gt, 1, 0.3, Supervision::AllStages).unwrap();
        let want = 2f64.ln() * 1.3;
        assert!((l.value().item().unwrap() - want).abs() < 1e-12);
        assert!((want - 0.9011).abs() < 1e-4);
        let l0 = total_loss(&outs, &gt, 1, 0.0, Supervision::AllStages).unwrap();
        assert!((l0.value().item().unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(total_loss(&outs, &gt[1..], 1, 0.3, Supervision::AllStages).is_err());
    }

    #[test]
    fn shared_stages_reuse_parameters() {
        let (store_shared, _) = build(ModelConfig { share_stages: true, ..small_config() });
        let (store_indep, _) = build(small_config());
        assert!(store_shared.len() < store_indep.len());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { stages: 0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { beta: -1.0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { block_channels: vec![1, 2, 3], ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
