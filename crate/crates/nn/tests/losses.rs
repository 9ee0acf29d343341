use bevcvt_nn::losses::{focal_loss, l1_loss, LossConfig, LossKind};
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: (usize, usize, usize, usize) = (2, 3, 3, 2);
const STEP: f64 = 1e-5;

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = SHAPE.0 * SHAPE.1 * SHAPE.2 * SHAPE.3;
    let logits = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
    let targets = (0..n).map(|_| f64::from(rng.random_bool(0.4))).collect();
    (logits, targets)
}

fn eval(cfg: &LossConfig, logits: &[f64], targets: &Tensor) -> f64 {
    let x = Tensor::from_vec(logits.to_vec(), SHAPE, &Device::Cpu).unwrap();
    cfg.compute(&x, targets).unwrap().to_scalar::<f64>().unwrap()
}

/// Backprop gradient against central differences on 100 random instances.
fn check_gradients(cfg: &LossConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (logits, targets) = random_instance(&mut rng);
        let y = Tensor::from_vec(targets, SHAPE, &Device::Cpu).unwrap();
        let x = Var::from_tensor(&Tensor::from_vec(logits.clone(), SHAPE, &Device::Cpu).unwrap()).unwrap();
        let grads = cfg.compute(x.as_tensor(), &y).unwrap().backward().unwrap();
        let analytic = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let numeric: Vec<f64> = (0..logits.len())
            .map(|i| {
                let mut hi = logits.clone();
                let mut lo = logits.clone();
                hi[i] += STEP;
                lo[i] -= STEP;
                (eval(cfg, &hi, &y) - eval(cfg, &lo, &y)) / (2.0 * STEP)
            })
            .collect();
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        worst = worst.max(diff / scale);
    }
    assert!(worst < 1e-4, "{:?}: worst relative gradient error {worst:e}", cfg.kind);
}

#[test]
fn focal_gradient_matches_finite_differences() {
    check_gradients(&LossConfig::default(), 1);
    check_gradients(&LossConfig { gamma: 0.5, alpha: 0.7, channel_weights: vec![1.0, 2.0, 0.5], ..LossConfig::default() }, 2);
}

#[test]
fn l1_gradient_matches_finite_differences() {
    check_gradients(&LossConfig::l1(), 3);
    check_gradients(&LossConfig { balance: false, ..LossConfig::l1() }, 7);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn unmodulated_balanced_focal_is_half_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (logits, targets) = random_instance(&mut rng);
        let bce = logits
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| -(y * sigmoid(x).ln() + (1.0 - y) * (1.0 - sigmoid(x)).ln()))
            .sum::<f64>()
            / logits.len() as f64;
        let x = Tensor::from_vec(logits, SHAPE, &Device::Cpu).unwrap();
        let y = Tensor::from_vec(targets, SHAPE, &Device::Cpu).unwrap();
        let focal = focal_loss(&x, &y, 0.0, 0.5).unwrap().to_scalar::<f64>().unwrap();
        assert!((focal - 0.5 * bce).abs() < 1e-9, "{focal} vs {}", 0.5 * bce);
    }
}

#[test]
fn l1_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (logits, targets) = random_instance(&mut rng);
        let mut expected = 0.0;
        for i in 0..logits.len() {
            expected += (sigmoid(logits[i]) - targets[i]).abs();
        }
        expected /= logits.len() as f64;
        let x = Tensor::from_vec(logits, SHAPE, &Device::Cpu).unwrap();
        let y = Tensor::from_vec(targets, SHAPE, &Device::Cpu).unwrap();
        let got = l1_loss(&x, &y).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - expected).abs() < 1e-9);
    }
}

/// Per channel: half the mean error over positives plus half the mean
/// error over negatives, then averaged over channels.
fn balanced_l1_oracle(logits: &[f64], targets: &[f64]) -> f64 {
    let (b, c, h, w) = SHAPE;
    let mut total = 0.0;
    for ch in 0..c {
        let (mut pos, mut n_pos, mut neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
        for bi in 0..b {
            for i in 0..h * w {
                let k = (bi * c + ch) * h * w + i;
                let e = (sigmoid(logits[k]) - targets[k]).abs();
                if targets[k] == 1.0 {
                    pos += e;
                    n_pos += 1;
                } else {
                    neg += e;
                    n_neg += 1;
                }
            }
        }
        total += 0.5 * pos / n_pos.max(1) as f64 + 0.5 * neg / n_neg.max(1) as f64;
    }
    total / c as f64
}

#[test]
fn balanced_l1_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for round in 0..20 {
        let (logits, mut targets) = random_instance(&mut rng);
        if round == 0 {
            // a channel without positives keeps only its negative half
            let (_, c, h, w) = SHAPE;
            for bi in 0..SHAPE.0 {
                for i in 0..h * w {
                    targets[(bi * c + 1) * h * w + i] = 0.0;
                }
            }
        }
        let expected = balanced_l1_oracle(&logits, &targets);
        let x = Tensor::from_vec(logits, SHAPE, &Device::Cpu).unwrap();
        let y = Tensor::from_vec(targets, SHAPE, &Device::Cpu).unwrap();
        let got = LossConfig::l1().compute(&x, &y).unwrap().to_scalar::<f64>().unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }
}

#[test]
fn balanced_l1_does_not_reward_predicting_nothing() {
    // 10% positives: plain L1 prefers the empty map over a coin flip, the
    // balanced form does not
    let targets: Vec<f64> = (0..100).map(|i| f64::from(i % 10 == 0)).collect();
    let y = Tensor::from_vec(targets, (1, 1, 10, 10), &Device::Cpu).unwrap();
    let empty = Tensor::full(-20.0f64, (1, 1, 10, 10), &Device::Cpu).unwrap();
    let even = Tensor::zeros((1, 1, 10, 10), DType::F64, &Device::Cpu).unwrap();
    let loss = |cfg: &LossConfig, x: &Tensor| cfg.compute(x, &y).unwrap().to_scalar::<f64>().unwrap();
    let plain = LossConfig { balance: false, ..LossConfig::l1() };
    assert!(loss(&plain, &empty) < loss(&plain, &even));
    assert!(loss(&LossConfig::l1(), &empty) >= loss(&LossConfig::l1(), &even) - 1e-9);
}

#[test]
fn focal_decreases_as_the_true_class_gets_likelier() {
    let pts: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    for y in [0.0, 1.0] {
        // p_t is the probability of the true class
        let logits: Vec<f64> = pts.iter().map(|&pt| if y == 1.0 { (pt / (1.0 - pt)).ln() } else { ((1.0 - pt) / pt).ln() }).collect();
        let x = Tensor::from_vec(logits, (1, 1, 1, pts.len()), &Device::Cpu).unwrap();
        let t = Tensor::full(y, (1, 1, 1, pts.len()), &Device::Cpu).unwrap();
        let cfg = LossConfig::default();
        let per = bevcvt_nn::losses::focal_elementwise(&x, &t, cfg.gamma, cfg.alpha).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, w) in per.windows(2).enumerate() {
            assert!(w[1] < w[0], "not decreasing at p_t = {}", pts[i + 1]);
        }
        // the modulating factor makes confident hits nearly free
        let ce_last = -pts[pts.len() - 1].ln();
        assert!(per[per.len() - 1] < 1e-3 * ce_last);
    }
}

#[test]
fn f32_and_f64_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (logits, targets) = random_instance(&mut rng);
    for kind in [LossKind::Focal, LossKind::L1] {
        let cfg = LossConfig { kind, ..LossConfig::default() };
        let y = Tensor::from_vec(targets.clone(), SHAPE, &Device::Cpu).unwrap();
        let x = Tensor::from_vec(logits.clone(), SHAPE, &Device::Cpu).unwrap();
        let a = cfg.compute(&x, &y).unwrap().to_scalar::<f64>().unwrap();
        let b = cfg
            .compute(&x.to_dtype(DType::F32).unwrap(), &y.to_dtype(DType::F32).unwrap())
            .unwrap()
            .to_scalar::<f32>()
            .unwrap() as f64;
        assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
    }
}
