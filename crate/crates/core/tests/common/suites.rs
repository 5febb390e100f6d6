//! Oracle suites shared by the focused test files and the acceptance run.

use lesioncascade::autodiff::{Alignment, Tape, Var};
use lesioncascade::dgff::{dgff_forward, identity_kernel, recalibrate, DgffParams};
use lesioncascade::lpse::{region_statistics, PoolingRegions};
use lesioncascade::metrics::{roc_auc, seg_metrics, ConfusionCounts};
use lesioncascade::model::{mask_labels, total_loss, LesionNet, ModelConfig, Supervision};
use lesioncascade::morphology::{dilate, erode, lesion_regions, BinaryMask, StructuringElement};
use lesioncascade::params::ParamStore;
use lesioncascade::tensor::Tensor;
use lesioncascade::Result;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub const SEEDS: u64 = 20;

fn over_seeds<F>(make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    (0..SEEDS)
        .map(|seed| gradient_error(&make(&mut rng(seed)), &f))
        .fold(0.0, f64::max)
}

/// Worst relative finite-difference error of each operation over all seeds.
pub fn operation_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut out = vec![
        (
            "conv2d stride 1",
            over_seeds(
                |r| vec![random_tensor(r, &[2, 3, 5, 5]), random_tensor(r, &[4, 3, 3, 3]), random_tensor(r, &[4])],
                |_, v| weighted_sum(v[0].conv2d(v[1], Some(v[2]), 1, 1)?, 1),
            ),
        ),
        (
            "conv2d stride 2",
            over_seeds(
                |r| vec![random_tensor(r, &[1, 2, 6, 6]), random_tensor(r, &[3, 2, 3, 3])],
                |_, v| weighted_sum(v[0].conv2d(v[1], None, 2, 1)?, 2),
            ),
        ),
        (
            "conv2d 1x1",
            over_seeds(
                |r| vec![random_tensor(r, &[1, 4, 3, 5]), random_tensor(r, &[2, 4, 1, 1]), random_tensor(r, &[2])],
                |_, v| weighted_sum(v[0].conv2d(v[1], Some(v[2]), 1, 0)?, 3),
            ),
        ),
        (
            "linear",
            over_seeds(
                |r| vec![random_tensor(r, &[2, 5]), random_tensor(r, &[3, 5]), random_tensor(r, &[3])],
                |_, v| weighted_sum(v[0].linear(v[1], Some(v[2]))?, 4),
            ),
        ),
        (
            "relu",
            over_seeds(
                |r| vec![random_tensor_off_zero(r, &[3, 7], 1e-3)],
                |_, v| weighted_sum(v[0].relu()?, 5),
            ),
        ),
        (
            "tanh",
            over_seeds(|r| vec![random_tensor(r, &[21])], |_, v| weighted_sum(v[0].scale(2.0)?.tanh()?, 6)),
        ),
        (
            "softmax",
            over_seeds(
                |r| vec![random_tensor(r, &[2, 3, 2, 2])],
                |_, v| weighted_sum(v[0].scale(3.0)?.softmax(1)?, 7),
            ),
        ),
        (
            "normalize",
            over_seeds(
                |r| vec![Tensor::from_fn(&[2, 3, 2], |_| r.gen_range(0.1..1.0))],
                |_, v| weighted_sum(v[0].normalize(1)?, 8),
            ),
        ),
        (
            "upsample_bilinear",
            over_seeds(
                |r| vec![random_tensor(r, &[1, 2, 3, 3])],
                |_, v| weighted_sum(v[0].upsample_bilinear(7, 5)?, 9),
            ),
        ),
        (
            "upsample_bilinear from 1x1",
            over_seeds(
                |r| vec![random_tensor(r, &[1, 1, 1, 1])],
                |_, v| weighted_sum(v[0].upsample_bilinear(4, 4)?, 10),
            ),
        ),
        (
            "resize_bilinear strided",
            over_seeds(
                |r| vec![random_tensor(r, &[1, 2, 3, 2])],
                |_, v| weighted_sum(v[0].resize_bilinear(12, 8, Alignment::Strided)?, 11),
            ),
        ),
        (
            "add/sub/mul/scale/scale_by",
            over_seeds(
                |r| vec![random_tensor(r, &[2, 3]), random_tensor(r, &[2, 3]), random_tensor(r, &[1])],
                |_, v| {
                    let a = v[0].mul(v[1])?.add(v[0])?.sub(v[1].scale(0.7)?)?;
                    weighted_sum(a.scale_by(v[2])?, 11)
                },
            ),
        ),
        (
            "channel_scale",
            over_seeds(
                |r| vec![random_tensor(r, &[1, 3, 4, 4]), random_tensor(r, &[1, 3])],
                |_, v| weighted_sum(v[0].channel_scale(v[1])?, 12),
            ),
        ),
        (
            "channel_mean",
            over_seeds(
                |r| vec![random_tensor(r, &[1, 3, 4, 5])],
                |_, v| weighted_sum(v[0].channel_mean()?, 13),
            ),
        ),
        (
            "concat",
            over_seeds(
                |r| vec![random_tensor(r, &[1, 3]), random_tensor(r, &[1, 2])],
                |_, v| weighted_sum(v[0].concat(v[1])?.tanh()?, 14),
            ),
        ),
        (
            "reshape/sum/mean",
            over_seeds(
                |r| vec![random_tensor(r, &[2, 3, 2])],
                |_, v| {
                    let sq = v[0].mul(v[0])?;
                    sq.reshape(&[3, 4])?.sum()?.add(v[0].mean()?.scale(3.0)?)
                },
            ),
        ),
    ];

    let (mut nll, mut ce, mut stats, mut fusion) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let pixel_targets: Vec<usize> = (0..9).map(|_| r.gen_range(0..2)).collect();
        let row_targets: Vec<usize> = (0..3).map(|_| r.gen_range(0..4)).collect();
        let maps = vec![random_tensor(&mut r, &[1, 2, 3, 3])];
        nll = nll.max(gradient_error(&maps, |_, v| v[0].softmax(1)?.nll(&pixel_targets, 1)));
        let logits = vec![random_tensor(&mut r, &[3, 4])];
        ce = ce.max(gradient_error(&logits, |_, v| {
            v[0].scale(2.0)?.cross_entropy_logits(&row_targets, 1)
        }));

        let mut pixels: Vec<usize> = (0..36).collect();
        pixels.shuffle(&mut r);
        let (nc, np) = (r.gen_range(2..12), r.gen_range(2..12));
        let (center, periphery) = (pixels[..nc].to_vec(), pixels[nc..nc + np].to_vec());
        let features = vec![random_tensor(&mut r, &[1, 3, 6, 6])];
        stats = stats.max(gradient_error(&features, |_, v| {
            weighted_sum(v[0].region_stats(&center, &periphery)?, 15)
        }));

        let mut store = ParamStore::new();
        let p = DgffParams::new(&mut store, "dgff", 3, 2, seed % 2 == 1, &mut r).unwrap();
        for id in [p.alpha, p.conv1_weight, p.conv2_weight, p.conv1_bias] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, random_tensor(&mut r, &shape)).unwrap();
        }
        let inputs = vec![
            random_tensor(&mut r, &[1, 3, 4, 4]),
            Tensor::new(&[1, 2], vec![0.3, 0.7]).unwrap(),
        ];
        fusion = fusion.max(gradient_error(&inputs, |t, v| {
            weighted_sum(dgff_forward(t, &store, &p, v[0], v[1])?, 16)
        }));
    }
    out.push(("nll of softmax", nll));
    out.push(("cross_entropy_logits", ce));
    out.push(("region_stats", stats));
    out.push(("dgff block", fusion));
    out
}

fn model_loss(net: &LesionNet, store: &ParamStore, image: &Tensor, gt: &BinaryMask, label: usize) -> (f64, BinaryMask) {
    let tape = Tape::new();
    let outputs = net.forward(&tape, store, image).unwrap();
    let loss = total_loss(&outputs, &mask_labels(gt), label, 0.3, Supervision::AllStages).unwrap();
    (loss.value().item().unwrap(), outputs[0].pooling_mask.clone())
}

/// Worst relative error over two random entries of every parameter tensor
/// of a small one-stage model at 32×32, for each seed.
///
/// Fresh parameters sit on non-differentiable points: zero biases leave
/// all-zero receptive fields exactly on the relu kink (and score exactly 0.5
/// in the seg head), and the DGFF convolutions are identities over relu
/// features. So biases, DGFF kernels and the seg head get a random nudge
/// first. Probes that flip a pixel of the stop-gradient pooling mask, or
/// whose stencil straddles a kink (estimates at `h` and `h/2` disagree),
/// are redrawn.
pub fn model_gradient_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let config = ModelConfig {
            block_channels: vec![4, 4, 6, 6, 8],
            stages: 1,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let net = LesionNet::new(config, &mut store, &mut r).unwrap();
        let dgff = net.stages[0].dgff.as_ref().unwrap();
        store.set_value(dgff.alpha, Tensor::new(&[1], vec![0.4]).unwrap()).unwrap();
        let mut nudges = vec![(dgff.conv1_weight, 0.1), (dgff.conv2_weight, 0.1), (net.stages[0].seg_head.weight, 1.0)];
        nudges.extend(store.iter().filter(|(_, p)| p.name.ends_with("bias")).map(|(id, _)| (id, 0.1)));
        for (id, size) in nudges {
            let mut t = store.value(id).clone();
            t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-size..size));
            store.set_value(id, t).unwrap();
        }
        let image = Tensor::from_fn(&[3, 32, 32], |_| r.gen_range(0.0..1.0));
        let (cy, cx, rad) = (r.gen_range(12.0..20.0), r.gen_range(12.0..20.0), r.gen_range(5.0f64..9.0));
        let gt = BinaryMask::from_fn(32, 32, |y, x| {
            (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= rad * rad
        });
        let label = (seed % 2) as usize;

        let tape = Tape::new();
        let outputs = net.forward(&tape, &store, &image).unwrap();
        let pooling_mask = outputs[0].pooling_mask.clone();
        let loss = total_loss(&outputs, &mask_labels(&gt), label, 0.3, Supervision::AllStages).unwrap();
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();

        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let n = store.value(id).numel();
            let mut checked = 0;
            for _ in 0..10 {
                if checked == 2 {
                    break;
                }
                let j = r.gen_range(0..n);
                let analytic = store.grad(id).data()[j];
                let base = store.value(id).clone();
                let mut probe = |delta: f64| {
                    let mut t = base.clone();
                    t.data_mut()[j] += delta;
                    store.set_value(id, t).unwrap();
                    model_loss(&net, &store, &image, &gt, label)
                };
                let mut stable = true;
                let mut central = |h: f64| {
                    let (plus, mask_plus) = probe(h);
                    let (minus, mask_minus) = probe(-h);
                    stable &= mask_plus == pooling_mask && mask_minus == pooling_mask;
                    (plus - minus) / (2.0 * h)
                };
                let numeric = central(FD_STEP);
                let half = central(FD_STEP / 2.0);
                store.set_value(id, base).unwrap();
                if !stable || relative_error(numeric, half) > FD_TOLERANCE / 10.0 {
                    continue;
                }
                checked += 1;
                worst = worst.max(relative_error(analytic, numeric));
            }
            assert_eq!(checked, 2, "no smooth probe found for {}", store.get(id).name);
        }
    }
    worst
}

fn random_lesion_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    match r.gen_range(0..3) {
        0 => {
            let density = r.gen_range(0.05..0.95);
            random_mask(r, h, w, density)
        }
        1 => {
            let (cy, cx) = (r.gen_range(0.0..h as f64), r.gen_range(0.0..w as f64));
            let (ry, rx) = (r.gen_range(1.0..h as f64 / 2.0), r.gen_range(1.0..w as f64 / 2.0));
            BinaryMask::from_fn(h, w, |y, x| {
                ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0
            })
        }
        _ => {
            let blobs: Vec<(f64, f64, f64)> = (0..r.gen_range(1..5))
                .map(|_| (r.gen_range(0.0..h as f64), r.gen_range(0.0..w as f64), r.gen_range(1.0..8.0)))
                .collect();
            BinaryMask::from_fn(h, w, |y, x| {
                blobs
                    .iter()
                    .any(|&(cy, cx, rad)| (y as f64 - cy).hypot(x as f64 - cx) <= rad)
            })
        }
    }
}

/// Morphology against the set definitions on `cases` random 32×32 masks.
pub fn morphology_oracle(cases: u64) -> std::result::Result<(), String> {
    for case in 0..cases {
        let mut r = rng(1000 + case);
        let mask = random_lesion_mask(&mut r, 32, 32);
        let radius = 1 + (case % 3) as usize;
        let element = StructuringElement::disk(radius);
        let d = dilate(&mask, &element);
        let e = erode(&mask, &element);
        if d != brute_dilate(&mask, radius) {
            return Err(format!("case {case}: dilation differs from the set definition"));
        }
        if e != brute_erode(&mask, radius) {
            return Err(format!("case {case}: erosion differs from the set definition"));
        }
        let pair = lesion_regions(&mask, &element);
        if pair.center != e || pair.periphery != d.minus(&e).unwrap() {
            return Err(format!("case {case}: regions are not (erosion, dilation \\ erosion)"));
        }
        if !pair.center.and(&pair.periphery).unwrap().is_empty() {
            return Err(format!("case {case}: center and periphery overlap"));
        }
        if pair.center.or(&pair.periphery).unwrap() != d {
            return Err(format!("case {case}: center ∪ periphery is not the dilation"));
        }
        if !(e.is_subset_of(&mask) && mask.is_subset_of(&d)) {
            return Err(format!("case {case}: erosion ⊆ mask ⊆ dilation violated"));
        }
        if (pair.n_center, pair.n_periphery) != (e.count(), d.count() - e.count()) {
            return Err(format!("case {case}: region counts are wrong"));
        }
    }
    Ok(())
}

/// Region statistics against masked mean/std, plus insensitivity to pixels
/// outside both regions.
pub fn lpse_oracle(cases: u64) -> std::result::Result<f64, String> {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut r = rng(2000 + case);
        let (h, w) = (r.gen_range(8..24), r.gen_range(8..24));
        let k = r.gen_range(1..5);
        let mask = random_lesion_mask(&mut r, h, w);
        let regions = PoolingRegions::from_mask(&mask, &StructuringElement::disk(r.gen_range(1..3)));
        let features = Tensor::from_fn(&[1, k, h, w], |_| r.gen_range(-3.0..3.0));

        let tape = Tape::new();
        let z = region_statistics(tape.constant(features.clone()), &regions)
            .map_err(|e| e.to_string())?
            .value();
        for c in 0..k {
            let plane = &features.data()[c * h * w..(c + 1) * h * w];
            let (mc, sc) = masked_mean_std(plane, &regions.center);
            let (mp, sp) = masked_mean_std(plane, &regions.periphery);
            for (got, want) in z.data()[c * 4..c * 4 + 4].iter().zip([mc, mp, sc, sp]) {
                worst = worst.max((got - want).abs());
            }
        }

        let mut inside = vec![false; h * w];
        for &i in regions.center.iter().chain(&regions.periphery) {
            inside[i] = true;
        }
        let mut perturbed = features.clone();
        for c in 0..k {
            for (i, &keep) in inside.iter().enumerate() {
                if !keep {
                    perturbed.data_mut()[c * h * w + i] += r.gen_range(-5.0..5.0);
                }
            }
        }
        let tape = Tape::new();
        let z2 = region_statistics(tape.constant(perturbed), &regions)
            .map_err(|e| e.to_string())?
            .value();
        if *z2 != *z {
            return Err(format!("case {case}: pixels outside both regions changed the descriptor"));
        }
    }
    Ok(worst)
}

/// Identity at initialization (bit-exact) and channel selectivity.
pub fn dgff_properties(cases: u64) -> std::result::Result<(), String> {
    for case in 0..cases {
        let mut r = rng(3000 + case);
        let k = r.gen_range(1..6);
        let (h, w) = (r.gen_range(1..9), r.gen_range(1..9));
        let mut store = ParamStore::new();
        let p = DgffParams::new(&mut store, "dgff", k, 2, false, &mut r).unwrap();
        let features = Tensor::from_fn(&[1, k, h, w], |_| r.gen_range(0.0..4.0));
        let diagnosis = Tensor::new(&[1, 2], vec![0.2, 0.8]).unwrap();
        let tape = Tape::new();
        let f = tape.constant(features.clone());
        let out = dgff_forward(&tape, &store, &p, f, tape.constant(diagnosis)).map_err(|e| e.to_string())?;
        if *out.value() != features {
            return Err(format!("case {case}: fusion at initialization is not the identity"));
        }

        store.set_value(p.alpha, Tensor::scalar(1.0).reshaped(&[1]).unwrap()).unwrap();
        store.set_value(p.lambda, Tensor::zeros(&[1])).unwrap();
        assert_eq!(*store.value(p.conv1_weight), identity_kernel(k));
        let zeroed = r.gen_range(0..k);
        let gate = Tensor::from_fn(&[1, k], |c| if c == zeroed { 0.0 } else { 1.0 });
        let tape = Tape::new();
        let out = recalibrate(&tape, &store, &p, tape.constant(features.clone()), tape.constant(gate))
            .map_err(|e| e.to_string())?
            .value();
        for c in 0..k {
            let got = &out.data()[c * h * w..(c + 1) * h * w];
            let src = &features.data()[c * h * w..(c + 1) * h * w];
            let ok = if c == zeroed {
                got.iter().all(|&v| v == 0.0)
            } else {
                got == src
            };
            if !ok {
                return Err(format!("case {case}: gating channel {zeroed} affected channel {c} wrongly"));
            }
        }
    }
    Ok(())
}

/// Hand case of the segmentation metrics and ROC area against Mann-Whitney.
pub fn metric_oracle(cases: u64) -> std::result::Result<f64, String> {
    let m = seg_metrics(&ConfusionCounts {
        tp: 2,
        fp: 1,
        fn_: 1,
        tn: 12,
    });
    let gm = (2.0 / 3.0 + 12.0 / 13.0) / 2.0;
    let mut worst = [
        (m.ja - 0.5).abs(),
        (m.di - 2.0 / 3.0).abs(),
        (m.ac - 0.875).abs(),
        (m.gm - gm).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    if (gm - 0.7949).abs() > 1e-4 {
        return Err("hand GM value is off".into());
    }
    for case in 0..cases {
        let mut r = rng(4000 + case);
        let n = r.gen_range(4..60);
        let levels = r.gen_range(2..12);
        let mut labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / levels as f64).collect();
        let auc = roc_auc(&scores, &labels).map_err(|e| e.to_string())?.auc;
        worst = worst.max((auc - mann_whitney_auc(&scores, &labels)).abs());
    }
    Ok(worst)
}
