use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ribscan::classifier::*;
use ribscan::tactsim::{SignalWindow, TraceLabel};

fn tiny_arch() -> Architecture {
    Architecture {
        in_ch: 1,
        conv: vec![(5, 4), (3, 4)],
        gru: vec![6],
        classes: N_CLASSES,
        padding: Padding::Zero,
    }
}

fn random_params(arch: &Architecture, seed: u64, scale: f64) -> NetworkParams {
    let mut p = NetworkParams::zeros(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.param_count();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    p.set_flat(&v).unwrap();
    p
}

fn random_signal(len: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = (0..len).map(|_| rng.random_range(0..4u8)).collect();
    (x, y)
}

fn loss_at(p: &NetworkParams, x: &[f64], y: &[u8], w: &[f64; 4]) -> f64 {
    weighted_loss(&forward_signal(x, p).unwrap(), y, w).unwrap().value
}

fn max_relative_error(p: &NetworkParams, x: &[f64], y: &[u8], w: &[f64; 4]) -> f64 {
    let g = gradients_weighted(p, x, y, w, &LayerMask::none()).unwrap().grads.flat();
    let base = p.flat();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut q = p.clone();
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + eps;
        q.set_flat(&v).unwrap();
        let lp = loss_at(&q, x, y, w);
        v[i] = base[i] - eps;
        q.set_flat(&v).unwrap();
        let lm = loss_at(&q, x, y, w);
        let num = (lp - lm) / (2.0 * eps);
        let den = g[i].abs().max(num.abs()).max(1e-6);
        worst = worst.max((g[i] - num).abs() / den);
    }
    worst
}

#[test]
fn finite_difference_gradient_check() {
    let arch = tiny_arch();
    let p = random_params(&arch, 11, 0.5);
    assert!(p.param_count() <= 500);
    let (x, y) = random_signal(120, 12);
    let err = max_relative_error(&p, &x, &y, &[1.0, 1.0, 4.0, 4.0]);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn gradient_check_circular_padding() {
    let arch = Architecture {
        padding: Padding::Circular,
        ..tiny_arch()
    };
    let p = random_params(&arch, 21, 0.5);
    let (x, y) = random_signal(80, 22);
    let err = max_relative_error(&p, &x, &y, &[1.0; 4]);
    assert!(err < 1e-4, "max relative error {err:e}");
}

#[test]
fn gradient_check_stacked_gru() {
    let arch = Architecture {
        conv: vec![(3, 3)],
        gru: vec![4, 3],
        ..tiny_arch()
    };
    let p = random_params(&arch, 31, 0.6);
    let (x, y) = random_signal(60, 32);
    let err = max_relative_error(&p, &x, &y, &[1.0; 4]);
    assert!(err < 1e-4, "max relative error {err:e}");
}

/// Step-by-step evaluation of a 1-conv (k=3, 2 channels) + 1-GRU (h=2) net,
/// written directly from the layer equations.
fn reference_forward(p: &NetworkParams, x: &[f64]) -> Vec<[f64; 4]> {
    let c = &p.conv[0];
    let t_len = x.len();
    let feat: Vec<[f64; 2]> = (0..t_len)
        .map(|t| {
            let mut f = [0.0; 2];
            for (o, fo) in f.iter_mut().enumerate() {
                let mut s = c.bias[o];
                for k in 0..3 {
                    let src = t as isize + k as isize - 1;
                    if src >= 0 && (src as usize) < t_len {
                        s += c.weight_at(k, 0, o) * x[src as usize];
                    }
                }
                *fo = if s > 0.0 { s } else { 0.0 };
            }
            f
        })
        .collect();
    let g = &p.gru[0];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut h = [0.0f64; 2];
    let mut out = Vec::new();
    for f in &feat {
        let lin = |m: &Vec<f64>, v: &[f64; 2], j: usize| m[j * 2] * v[0] + m[j * 2 + 1] * v[1];
        let z: Vec<f64> = (0..2).map(|j| sig(lin(&g.w[0], f, j) + lin(&g.u[0], &h, j) + g.b[0][j])).collect();
        let r: Vec<f64> = (0..2).map(|j| sig(lin(&g.w[1], f, j) + lin(&g.u[1], &h, j) + g.b[1][j])).collect();
        let rh = [r[0] * h[0], r[1] * h[1]];
        let n: Vec<f64> = (0..2)
            .map(|j| (lin(&g.w[2], f, j) + lin(&g.u[2], &rh, j) + g.b[2][j]).tanh())
            .collect();
        h = [(1.0 - z[0]) * n[0] + z[0] * h[0], (1.0 - z[1]) * n[1] + z[1] * h[1]];
        let logits: Vec<f64> = (0..4)
            .map(|k| p.fc.bias[k] + p.fc.weight[k * 2] * h[0] + p.fc.weight[k * 2 + 1] * h[1])
            .collect();
        let e: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let s: f64 = e.iter().sum();
        out.push([e[0] / s, e[1] / s, e[2] / s, e[3] / s]);
    }
    out
}

#[test]
fn matches_hand_rolled_forward() {
    let arch = Architecture {
        conv: vec![(3, 2)],
        gru: vec![2],
        ..tiny_arch()
    };
    let p = random_params(&arch, 41, 0.8);
    let (x, _) = random_signal(400, 42);
    let probs = forward_signal(&x, &p).unwrap();
    let expect = reference_forward(&p, &x);
    for (t, e) in expect.iter().enumerate() {
        for c in 0..4 {
            assert!((probs.row(t)[c] - e[c]).abs() < 1e-12, "frame {t} class {c}");
        }
    }
}

#[test]
fn random_case_loss_matches_formula() {
    let arch = tiny_arch();
    let p = random_params(&arch, 51, 0.7);
    let (x, y) = random_signal(400, 52);
    let probs = forward_signal(&x, &p).unwrap();
    let direct: f64 = y
        .iter()
        .enumerate()
        .map(|(t, &l)| -probs.row(t)[l as usize].ln())
        .sum::<f64>()
        / 400.0;
    assert!((loss(&probs, &y).unwrap().value - direct).abs() < 1e-12);
}

#[test]
fn saturated_correct_prediction_has_tiny_gradient() {
    // FC bias alone drives a confident, correct bone prediction
    let mut p = NetworkParams::zeros(&tiny_arch());
    p.fc.bias = vec![40.0, 0.0, 0.0, 0.0];
    let w = SignalWindow::new(vec![0.3; 400], vec![0; 400], 0, 0.0, 399.0).unwrap();
    let g = gradients(&p, &w, &LayerMask::none()).unwrap();
    let norm: f64 = g.grads.flat().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-8, "gradient norm {norm:e}");
}

#[test]
fn conv_stack_is_shift_equivariant_with_circular_padding() {
    let arch = Architecture {
        padding: Padding::Circular,
        ..Architecture::default()
    };
    let p = NetworkParams::init(&arch, 3);
    let (x, _) = random_signal(400, 4);
    let shift = 37;
    let mut xs = x.clone();
    xs.rotate_right(shift);
    let a = conv_features(&x, &p).unwrap();
    let b = conv_features(&xs, &p).unwrap();
    let ch = 16;
    for t in 0..400 {
        for c in 0..ch {
            let ts = (t + shift) % 400;
            assert!((a[t * ch + c] - b[ts * ch + c]).abs() < 1e-12);
        }
    }
}

fn toy_window(seed: u64) -> SignalWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; 400];
    let mut bone = vec![false; 400];
    let period = 80 + (seed % 20) as usize;
    for t in 0..400 {
        bone[t] = (t % period) >= period / 2;
        values[t] = if bone[t] { 1.0 } else { -1.0 } + rng.random_range(-0.1..0.1);
    }
    let labels = ribscan::tactsim::label_transitions(&bone)
        .iter()
        .map(|l| l.class_id().unwrap())
        .collect();
    SignalWindow::new(values, labels, seed as usize, 0.0, 399.0).unwrap()
}

#[test]
fn overfits_single_sample() {
    let data = vec![toy_window(1)];
    let arch = Architecture {
        conv: vec![(5, 4)],
        gru: vec![8],
        ..Architecture::default()
    };
    let cfg = TrainConfig {
        learning_rate: 0.02,
        batch_size: 1,
        epochs: 300,
        class_weights: [1.0; 4],
        ..TrainConfig::default()
    };
    let out = train_from(NetworkParams::init(&arch, 2), &data, &cfg).unwrap();
    let probs = forward(&data[0], &out.params).unwrap();
    let l = loss(&probs, &data[0].labels).unwrap().value;
    assert!(l < 0.05, "final loss {l}");
    assert!(out.log.last().unwrap().loss < out.log[0].loss);
}

#[test]
fn training_is_deterministic() {
    let data: Vec<SignalWindow> = (0..3).map(toy_window).collect();
    let arch = Architecture {
        conv: vec![(3, 2)],
        gru: vec![4],
        ..Architecture::default()
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed: 8,
        ..TrainConfig::default()
    };
    let a = train_from(NetworkParams::init(&arch, 1), &data, &cfg).unwrap();
    let b = train_from(NetworkParams::init(&arch, 1), &data, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
}

#[test]
fn optimizers_reduce_loss() {
    let data: Vec<SignalWindow> = (0..2).map(toy_window).collect();
    let arch = Architecture {
        conv: vec![(3, 2)],
        gru: vec![4],
        ..Architecture::default()
    };
    for (opt, lr) in [
        (Optimizer::Sgd, 0.5),
        (Optimizer::Momentum { beta: 0.9 }, 0.05),
        (Optimizer::adam(), 0.01),
    ] {
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 2,
            learning_rate: lr,
            optimizer: opt,
            ..TrainConfig::default()
        };
        let out = train_from(NetworkParams::init(&arch, 4), &data, &cfg).unwrap();
        assert!(
            out.log.last().unwrap().loss < out.log[0].loss,
            "{} did not reduce the loss",
            opt.name()
        );
    }
}

#[test]
fn empty_dataset_rejected() {
    assert!(train(&[], &TrainConfig::default()).is_err());
}

#[test]
fn alternating_probabilities_segment_alternately() {
    let data: Vec<f64> = (0..6)
        .flat_map(|t| if t % 2 == 0 { [0.95, 0.05, 0.0, 0.0] } else { [0.1, 0.9, 0.0, 0.0] })
        .collect();
    let s = segment(&ClassProbs { frames: 6, data });
    for (t, l) in s.iter().enumerate() {
        assert_eq!(l.is_bone(), t % 2 == 0);
    }
    assert_eq!(s[2], TraceLabel::Entrance);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), scale in 0.01f64..5.0) {
        let p = random_params(&tiny_arch(), seed, scale);
        let (x, _) = random_signal(400, seed ^ 7);
        let probs = forward_signal(&x, &p).unwrap();
        for t in 0..400 {
            let r = probs.row(t);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn model_file_round_trips(seed in any::<u64>()) {
        let p = random_params(&tiny_arch(), seed, 3.0);
        let mut buf = Vec::new();
        write_model(&mut buf, &p).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        prop_assert_eq!(back.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        p.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn segment_is_monotone(base in proptest::collection::vec(0.0f64..1.0, 50), bump in 0.0f64..1.0, idx in 0usize..50) {
        let mk = |pb: &[f64]| ClassProbs {
            frames: pb.len(),
            data: pb.iter().flat_map(|&b| [b, 1.0 - b, 0.0, 0.0]).collect(),
        };
        let mut raised = base.clone();
        raised[idx] = (raised[idx] + bump).min(1.0);
        let a = segment(&mk(&base));
        let b = segment(&mk(&raised));
        for t in 0..50 {
            prop_assert!(!a[t].is_bone() || b[t].is_bone());
        }
    }
}
