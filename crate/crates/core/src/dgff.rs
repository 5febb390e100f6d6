//! Diagnosis guided feature fusion.
//!
//! Channel means of the segmentation features are concatenated with the
//! diagnosis probabilities, mapped back to `K` channels through a `tanh`
//! gate, and used to reweight the features:
//!
//! ```text
//! F'  = α · (gate ⊗ F) + λ · F
//! F'' = conv3×3(relu(conv3×3(F')))
//! ```
//!
//! With `α = 0`, `λ = 1` and identity refinement kernels the block passes
//! non-negative features through unchanged, which is how it is initialized.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{he_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DgffParams {
    pub channels: usize,
    pub classes: usize,
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
    /// Weight of the gated branch (`[1]`, or `[K]` when per-channel).
    pub alpha: ParamId,
    /// Weight of the identity branch.
    pub lambda: ParamId,
    pub conv1_weight: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_weight: ParamId,
    pub conv2_bias: ParamId,
    pub per_channel: bool,
}

/// `[K,K,3,3]` kernel that copies each channel.
pub fn identity_kernel(channels: usize) -> Tensor {
    let mut t = Tensor::zeros(&[channels, channels, 3, 3]);
    for c in 0..channels {
        t.data_mut()[((c * channels + c) * 3 + 1) * 3 + 1] = 1.0;
    }
    t
}

impl DgffParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        classes: usize,
        per_channel: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mix_shape = if per_channel { vec![channels] } else { vec![1] };
        let fan_in = channels + classes;
        Ok(DgffParams {
            channels,
            classes,
            gate_weight: store.add(
                format!("{prefix}.gate.weight"),
                he_uniform(&[channels, fan_in], fan_in, rng),
            )?,
            gate_bias: store.add(format!("{prefix}.gate.bias"), Tensor::zeros(&[channels]))?,
            alpha: store.add(format!("{prefix}.alpha"), Tensor::zeros(&mix_shape))?,
            lambda: store.add(format!("{prefix}.lambda"), Tensor::ones(&mix_shape))?,
            conv1_weight: store.add(format!("{prefix}.conv1.weight"), identity_kernel(channels))?,
            conv1_bias: store.add(format!("{prefix}.conv1.bias"), Tensor::zeros(&[channels]))?,
            conv2_weight: store.add(format!("{prefix}.conv2.weight"), identity_kernel(channels))?,
            conv2_bias: store.add(format!("{prefix}.conv2.bias"), Tensor::zeros(&[channels]))?,
            per_channel,
        })
    }
}

/// Spatial mean of each channel: `[1,K,H,W] → [1,K]`.
pub fn channel_gap<'t>(features: Var<'t>) -> Result<Var<'t>> {
    features.channel_mean()
}

/// `tanh(W · [h, g] + b)`, channel summary first, diagnosis second.
pub fn diagnosis_gate<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &DgffParams,
    channel_means: Var<'t>,
    diagnosis: Var<'t>,
) -> Result<Var<'t>> {
    let (hs, gs) = (channel_means.shape(), diagnosis.shape());
    if hs != [1, params.channels] || gs != [1, params.classes] {
        return Err(shape_err!(
            "gate expects [1,{}] and [1,{}], got {:?} and {:?}",
            params.channels,
            params.classes,
            hs,
            gs
        ));
    }
    let mu = channel_means.concat(diagnosis)?;
    let w = tape.param(store, params.gate_weight);
    let b = tape.param(store, params.gate_bias);
    mu.linear(w, Some(b))?.tanh()
}

/// Gated residual recalibration followed by the two refinement convolutions.
pub fn recalibrate<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &DgffParams,
    features: Var<'t>,
    gate: Var<'t>,
) -> Result<Var<'t>> {
    let fs = features.shape();
    if fs.len() != 4 || fs[0] != 1 || fs[1] != params.channels {
        return Err(shape_err!(
            "recalibrate expects [1,{},H,W], got {:?}",
            params.channels,
            fs
        ));
    }
    if gate.shape().iter().product::<usize>() != params.channels {
        return Err(shape_err!("gate has shape {:?}, expected {} entries", gate.shape(), params.channels));
    }
    let alpha = tape.param(store, params.alpha);
    let lambda = tape.param(store, params.lambda);
    let gated = features.channel_scale(gate)?;
    let mixed = if params.per_channel {
        gated.channel_scale(alpha)?.add(features.channel_scale(lambda)?)?
    } else {
        gated.scale_by(alpha)?.add(features.scale_by(lambda)?)?
    };
    let w1 = tape.param(store, params.conv1_weight);
    let b1 = tape.param(store, params.conv1_bias);
    let w2 = tape.param(store, params.conv2_weight);
    let b2 = tape.param(store, params.conv2_bias);
    mixed.conv2d(w1, Some(b1), 1, 1)?.relu()?.conv2d(w2, Some(b2), 1, 1)
}

/// Full fusion block: `recalibrate(F, diagnosis_gate(channel_gap(F), g))`.
pub fn dgff_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    params: &DgffParams,
    features: Var<'t>,
    diagnosis: Var<'t>,
) -> Result<Var<'t>> {
    let h = channel_gap(features)?;
    let gate = diagnosis_gate(tape, store, params, h, diagnosis)?;
    recalibrate(tape, store, params, features, gate)
}
