//! Shared test oracles.
#![allow(dead_code)]

pub mod suites;

use lesioncascade::autodiff::{Tape, Var};
use lesioncascade::morphology::BinaryMask;
use lesioncascade::tensor::Tensor;
use lesioncascade::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Uniform values kept at least `gap` away from zero, for kinked operations.
pub fn random_tensor_off_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(gap..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output element contributes a distinct gradient.
pub fn weighted_sum<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut r = rng(seed ^ 0x5eed);
    let w = random_tensor(&mut r, &out.shape());
    out.mul(out.tape().constant(w))?.sum()
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every element of every input.
pub fn gradient_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&tape, &vars).expect("forward");
    let grads = tape.gradients(loss).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").value().item().expect("scalar")
    };
    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            values[i].data_mut()[j] = x + FD_STEP;
            let up = eval(&values);
            values[i].data_mut()[j] = x - FD_STEP;
            let down = eval(&values);
            values[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Brute-force masked mean and population standard deviation.
pub fn masked_mean_std(values: &[f64], members: &[usize]) -> (f64, f64) {
    let n = members.len() as f64;
    let mean = members.iter().map(|&i| values[i]).sum::<f64>() / n;
    let var = members.iter().map(|&i| (values[i] - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Area under the ROC curve as the Mann-Whitney U statistic: the fraction
/// of (positive, negative) pairs ranked correctly, ties counting one half.
pub fn mann_whitney_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Set-definition dilation: `p` is set iff some element offset lands `p - d`
/// on a set pixel.
pub fn brute_dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let r = radius as isize;
    BinaryMask::from_fn(mask.height(), mask.width(), |y, x| {
        (-r..=r).any(|dy| {
            (-r..=r).any(|dx| dy * dy + dx * dx <= r * r && mask.get_signed(y as isize - dy, x as isize - dx))
        })
    })
}

/// Set-definition erosion with out-of-frame pixels treated as background.
pub fn brute_erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let r = radius as isize;
    BinaryMask::from_fn(mask.height(), mask.width(), |y, x| {
        (-r..=r).all(|dy| {
            (-r..=r).all(|dx| dy * dy + dx * dx > r * r || mask.get_signed(y as isize + dy, x as isize + dx))
        })
    })
}
