//! The toy network against a naive scalar forward pass and central finite
//! differences of the composite loss.

use anoseg::compositor::TrainingSample;
use anoseg::imageops::ImageRgb;
use anoseg::labels::{LabelMap, IGNORE_ID, OUTLIER_ID};
use anoseg::losses::{composite_loss, LossPreset};
use anoseg::model::{ModelDims, ToyModel, TENSOR_NAMES};
use anoseg::trainer::sample_gradient;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageRgb {
    ImageRgb::new(w, h, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap()
}

/// Direct transcription of the architecture with explicit index arithmetic.
fn scalar_forward(m: &ToyModel, img: &ImageRgb) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (img.height, img.width);
    let k = m.dims.width;
    let nc = m.dims.num_classes;
    let p = &m.params;
    let x = |r: usize, c: usize, ch: usize| img.data[(r * w + c) * 3 + ch] as f64 / 127.5 - 1.0;
    let conv = |input: &dyn Fn(usize, usize, usize) -> f64, cin: usize, wt: &[f64], b: &[f64]| {
        let mut out = vec![0.0; h * w * k];
        for r in 0..h {
            for c in 0..w {
                for o in 0..k {
                    let mut acc = b[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let rr = r as i64 + ky as i64 - 1;
                            let cc = c as i64 + kx as i64 - 1;
                            if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                                continue;
                            }
                            for i in 0..cin {
                                acc += input(rr as usize, cc as usize, i) * wt[((ky * 3 + kx) * cin + i) * k + o];
                            }
                        }
                    }
                    out[(r * w + c) * k + o] = acc.max(0.0);
                }
            }
        }
        out
    };
    let h1 = conv(&x, 3, &p.conv1_w, &p.conv1_b);
    let h1f = |r: usize, c: usize, i: usize| h1[(r * w + c) * k + i];
    let h2 = conv(&h1f, k, &p.conv2_w, &p.conv2_b);
    let mut logits = vec![0.0; h * w * nc];
    let mut ood = vec![0.0; h * w];
    for px in 0..h * w {
        for j in 0..nc {
            let mut acc = p.seg_b[j];
            for i in 0..k {
                acc += h2[px * k + i] * p.seg_w[i * nc + j];
            }
            logits[px * nc + j] = acc;
        }
        let mut acc = p.ood_b[0];
        for i in 0..k {
            acc += h2[px * k + i] * p.ood_w[i];
        }
        ood[px] = acc;
    }
    (logits, ood)
}

#[test]
fn forward_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..5 {
        let dims = ModelDims {
            width: 3 + trial,
            num_classes: 2 + trial % 3,
        };
        let model = ToyModel::init(dims, trial as u64).unwrap();
        let img = random_image(&mut rng, 8 + trial, 10);
        let (vol, ood) = model.forward(&img).unwrap();
        let (logits, z) = scalar_forward(&model, &img);
        for (a, b) in vol.values.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in ood.values.iter().zip(&z) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

fn labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> LabelMap {
    let mut ids: Vec<u8> = (0..h * w)
        .map(|_| match rng.random_range(0..10) {
            0 => IGNORE_ID,
            1 | 2 => OUTLIER_ID,
            _ => rng.random_range(0..k as u8),
        })
        .collect();
    ids[0] = 0;
    ids[1] = OUTLIER_ID;
    ids[2] = IGNORE_ID;
    LabelMap::new(h, w, ids).unwrap()
}

#[test]
fn backprop_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (8, 9);
    let dims = ModelDims {
        width: 5,
        num_classes: 3,
    };
    for preset in [LossPreset::Dh, LossPreset::Dh2, LossPreset::Sd] {
        // bias the first layer so most ReLUs are active and kinks are rare
        let mut model = ToyModel::init(dims.clone(), 17).unwrap();
        for b in model.params.conv1_b.iter_mut().chain(model.params.conv2_b.iter_mut()) {
            *b += 0.5;
        }
        let sample = TrainingSample::new(random_image(&mut rng, h, w), labels(&mut rng, h, w, 3)).unwrap();
        let (weights, stop) = (preset.weights(), preset.stop_ood_grad());
        let (_, grad) = sample_gradient(&model, &sample, weights, stop).unwrap();
        let loss = |m: &ToyModel| {
            let (v, o) = m.forward(&sample.image).unwrap();
            let rep = composite_loss(&v, &o, &sample.labels, weights, stop).unwrap();
            if stop {
                // the stopped head receives no gradient by construction
                rep.total - weights.beta3 * rep.l_ood
            } else {
                rep.total
            }
        };
        let eps = 1e-5;
        for t in 0..TENSOR_NAMES.len() {
            let len = grad.tensors()[t].len();
            for _ in 0..10 {
                let i = rng.random_range(0..len);
                let mut plus = model.clone();
                plus.params.tensors_mut()[t][i] += eps;
                let mut minus = model.clone();
                minus.params.tensors_mut()[t][i] -= eps;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let an = grad.tensors()[t][i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-3, "{:?} {} [{i}]: analytic {an} vs fd {fd}", preset, TENSOR_NAMES[t]);
            }
        }
    }
}

#[test]
fn stopped_head_gets_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = ToyModel::init(
        ModelDims {
            width: 4,
            num_classes: 3,
        },
        2,
    )
    .unwrap();
    let sample = TrainingSample::new(random_image(&mut rng, 8, 8), labels(&mut rng, 8, 8, 3)).unwrap();
    let (_, grad) = sample_gradient(&model, &sample, LossPreset::Sd.weights(), true).unwrap();
    assert!(grad.ood_w.iter().chain(&grad.ood_b).all(|&g| g == 0.0));
}
