//! Two-phase SGD training and dataset evaluation.
//!
//! Iterations below `warmup_iters` train segmentation only (`β = 0`); the
//! rest optimize the joint loss. The learning rate follows the poly schedule
//! over the whole run.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment, preprocess, Sample, DEFAULT_MAX_EXTENT};
use crate::error::{Error, Result};
use crate::metrics::{confusion_masks, roc_auc, seg_metrics, MetricReport, RocCurve, SegMetrics};
use crate::model::{mask_labels, total_loss, LesionNet, ModelConfig};
use crate::morphology::BinaryMask;
use crate::optim::{poly_lr, Sgd};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub max_iters: usize,
    /// Segmentation-only iterations at the start of the run.
    pub warmup_iters: usize,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations between history rows.
    pub eval_interval: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            base_lr: 1e-3,
            max_iters: 1500,
            warmup_iters: 300,
            seed: 42,
            momentum: 0.9,
            weight_decay: 0.0,
            eval_interval: 100,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_iters == 0 || self.eval_interval == 0 {
            return Err(Error::Config(
                "batch_size, max_iters and eval_interval must be positive".into(),
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must lie in [0,1) and weight_decay be non-negative".into()));
        }
        Ok(())
    }
}

/// Builds a network with parameters drawn from `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<(LesionNet, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut store = ParamStore::new();
    let net = LesionNet::new(config.clone(), &mut store, &mut rng)?;
    Ok((net, store))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    /// Number of completed iterations.
    pub iteration: usize,
    pub lr: f64,
    /// Mean loss over the iterations since the previous row.
    pub loss: f64,
    pub seg_ja: Option<f64>,
    pub cls_auc: Option<f64>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let na = |v: Option<f64>| v.map_or_else(|| "NA".into(), |v| format!("{v:.6}"));
    let mut s = String::from("iteration,lr,loss,seg_JA,cls_AUC\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6e},{:.6},{},{}\n",
            r.iteration,
            r.lr,
            r.loss,
            na(r.seg_ja),
            na(r.cls_auc)
        ));
    }
    s
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    /// Mean batch loss of every iteration.
    pub losses: Vec<f64>,
    pub history: Vec<HistoryRow>,
}

fn aug_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(2 + index as u64);
    rng
}

/// Runs `max_iters` SGD steps over `data`. When `eval_data` is given, each
/// history row also carries final-stage JA and AUC on it.
pub fn train(
    net: &LesionNet,
    store: &mut ParamStore,
    data: &[Sample],
    eval_data: Option<&[Sample]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Value("training set is empty".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut order_rng);
    let (mut epoch, mut cursor) = (0usize, 0usize);

    let mut sgd = Sgd::new(config.momentum, config.weight_decay);
    let mut outcome = TrainOutcome::default();
    let mut window = Vec::new();
    for iteration in 0..config.max_iters {
        let lr = poly_lr(iteration, config.max_iters, config.base_lr);
        let beta = if iteration < config.warmup_iters { 0.0 } else { net.config.beta };
        store.zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                epoch += 1;
                cursor = 0;
            }
            let index = order[cursor];
            cursor += 1;
            let augmented;
            let sample = if config.augment {
                augmented = augment(&data[index], &mut aug_rng(config.seed, epoch, index));
                &augmented
            } else {
                &data[index]
            };
            let loss = sample_loss(net, store, sample, beta).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NanLoss { iteration },
                e => e,
            })?;
            batch_loss += loss;
        }
        store.scale_grads(1.0 / config.batch_size as f64);
        batch_loss /= config.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::NanLoss { iteration });
        }
        sgd.step(store, lr);
        outcome.losses.push(batch_loss);
        window.push(batch_loss);

        let done = iteration + 1;
        if done % config.eval_interval == 0 || done == config.max_iters {
            let (seg_ja, cls_auc) = match eval_data {
                Some(eval) if !eval.is_empty() => {
                    let e = evaluate(net, store, eval, DEFAULT_MAX_EXTENT)?;
                    (Some(e.report.seg.ja), e.report.auc)
                }
                _ => (None, None),
            };
            let loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            log::info!(
                "iter {done}/{} lr {lr:.3e} loss {loss:.4} JA {} AUC {}",
                config.max_iters,
                seg_ja.map_or("NA".into(), |v| format!("{v:.4}")),
                cls_auc.map_or("NA".into(), |v| format!("{v:.4}"))
            );
            outcome.history.push(HistoryRow {
                iteration: done,
                lr,
                loss,
                seg_ja,
                cls_auc,
            });
        }
    }
    Ok(outcome)
}

/// Forward, loss and gradient accumulation for one sample.
fn sample_loss(net: &LesionNet, store: &mut ParamStore, sample: &Sample, beta: f64) -> Result<f64> {
    let tape = Tape::with_precision(net.config.precision);
    let outputs = net.forward(&tape, store, &sample.image)?;
    let loss = total_loss(
        &outputs,
        &mask_labels(&sample.mask),
        sample.label,
        beta,
        net.config.supervision,
    )?;
    let value = loss.value().item()?;
    tape.gradients(loss)?.accumulate_into(store);
    Ok(value)
}

/// Final-stage prediction for one image, at the image's own resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub mask: BinaryMask,
    pub melanoma_probability: f64,
    /// Diagnosis probabilities of every stage, first stage first.
    pub stage_diagnoses: Vec<Vec<f64>>,
    /// Final-stage `[K,4]` lesion descriptor (LPSE pooling only).
    pub descriptor: Option<Tensor>,
}

/// Preprocesses with `max_extent`, runs the cascade and maps the final mask
/// back to the input size.
pub fn predict(net: &LesionNet, store: &ParamStore, sample: &Sample, max_extent: usize) -> Result<Prediction> {
    let pre = preprocess(sample, max_extent);
    let tape = Tape::with_precision(net.config.precision);
    let outputs = net.forward(&tape, store, &pre.sample.image)?;
    let last = outputs.last().ok_or_else(|| Error::Config("model has no stages".into()))?;
    Ok(Prediction {
        id: sample.id.clone(),
        mask: pre.restore_mask(&last.predicted_mask()),
        melanoma_probability: last.melanoma_probability(),
        stage_diagnoses: outputs.iter().map(|o| o.diagnosis_probs()).collect(),
        descriptor: last.descriptor.map(|d| (*d.value()).clone()),
    })
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    /// `None` when the set holds a single class.
    pub roc: Option<RocCurve>,
    pub predictions: Vec<Prediction>,
    pub per_image: Vec<SegMetrics>,
}

/// Predicts every sample and scores the final stage. Images are labeled
/// melanoma when the melanoma probability reaches 0.5.
pub fn evaluate(net: &LesionNet, store: &ParamStore, samples: &[Sample], max_extent: usize) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(samples.len());
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let p = predict(net, store, s, max_extent)?;
        per_image.push(seg_metrics(&confusion_masks(&p.mask, &s.mask)?));
        predictions.push(p);
    }
    let scores: Vec<f64> = predictions.iter().map(|p| p.melanoma_probability).collect();
    let predicted: Vec<usize> = scores.iter().map(|&p| usize::from(p >= 0.5)).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let report = MetricReport::from_predictions(&per_image, &scores, &predicted, &labels)?;
    let roc = match roc_auc(&scores, &labels) {
        Ok(r) => Some(r),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        report,
        roc,
        predictions,
        per_image,
    })
}
