use super::*;
use crate::facsplit::Partition;
use crate::numerics::{derive_rng_stream, dot, DenseMatrix, RngStream};

fn one_hidden(d: usize, m: usize, loss: LossKind) -> ModelConfig {
    ModelConfig::single_hidden(d, m, loss)
}

fn params_with_split(d: usize, m: usize, m1: usize, seed: u64, loss: LossKind) -> SplitParams {
    let mut rng = derive_rng_stream(seed, &[("init", 0)]);
    let mut p = init_params(&one_hidden(d, m, loss), &[0], &mut rng).unwrap();
    let zeta = (0..m).map(|j| j >= m1).collect();
    p.set_partition(Partition::from_zeta(0, zeta)).unwrap();
    p
}

fn random_data(n: usize, d: usize, rng: &mut RngStream) -> (DenseMatrix, Vec<f64>) {
    let x = DenseMatrix::from_fn(n, d, |_, _| rng.normal());
    let y = (0..n).map(|_| rng.normal()).collect();
    (x, y)
}

/// Unit-by-unit evaluation written independently of the batched network code.
fn reference_output(p: &SplitParams, x: &[f64]) -> f64 {
    let part = p.partitions[0].as_ref().unwrap();
    let (m1, m2) = (part.n_personal() as f64, part.n_shared() as f64);
    let w = &p.hidden[0];
    let mut personal = 0.0;
    let mut shared = 0.0;
    for j in 0..w.rows() {
        let z: f64 = w.row(j).iter().zip(x).map(|(a, b)| a * b).sum();
        let act = if z > 0.0 { z } else { 0.0 };
        if part.zeta[j] {
            shared += p.head[j] * act;
        } else {
            personal += p.head[j] * act;
        }
    }
    let sp = if m1 > 0.0 { personal / m1.sqrt() } else { 0.0 };
    let ss = if m2 > 0.0 { shared / m2.sqrt() } else { 0.0 };
    sp + ss
}

/// Closed-form quadratic-loss gradient of a one-hidden-layer split network.
fn closed_form_gradient(p: &SplitParams, x: &DenseMatrix, y: &[f64]) -> DenseMatrix {
    let part = p.partitions[0].as_ref().unwrap();
    let n = y.len() as f64;
    let m1 = part.n_personal() as f64;
    let m2 = part.n_shared() as f64;
    let w = &p.hidden[0];
    let h: Vec<f64> = (0..x.rows()).map(|i| reference_output(p, x.row(i))).collect();
    DenseMatrix::from_fn(w.rows(), w.cols(), |j, k| {
        let group = if part.zeta[j] { m2 } else { m1 };
        let mut s = 0.0;
        for i in 0..x.rows() {
            let xi = x.row(i);
            if dot(w.row(j), xi) >= 0.0 {
                s += (h[i] - y[i]) * p.head[j] * xi[k];
            }
        }
        s / (n * group.sqrt())
    })
}

#[test]
fn zero_input_gives_zero_output() {
    let p = params_with_split(5, 6, 3, 1, LossKind::Quadratic);
    assert_eq!(p.forward(&[0.0; 5]).unwrap(), 0.0);
}

#[test]
fn hand_computed_single_unit() {
    let cfg = ModelConfig {
        layer_widths: vec![2, 1, 1],
        loss: LossKind::Quadratic,
        scale_by_sqrt_width: false,
        train_output_weights: false,
        init_scale: 1.0,
    };
    let mut rng = derive_rng_stream(0, &[]);
    let mut p = init_params(&cfg, &[0], &mut rng).unwrap();
    p.hidden[0] = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    p.head = vec![1.0];
    assert_eq!(p.forward(&[1.0, 1.0]).unwrap(), 1.0);
}

#[test]
fn batched_forward_matches_reference() {
    let mut rng = derive_rng_stream(2, &[("data", 0)]);
    for seed in 0..20 {
        let p = params_with_split(7, 10, (seed % 11) as usize, seed, LossKind::Quadratic);
        let (x, _) = random_data(15, 7, &mut rng);
        let h = p.predict_raw(&x).unwrap();
        for i in 0..15 {
            assert!((h[i] - reference_output(&p, x.row(i))).abs() < 1e-12);
        }
    }
}

#[test]
fn dimension_mismatch_rejected() {
    let p = params_with_split(4, 3, 1, 0, LossKind::Quadratic);
    assert!(p.forward(&[1.0; 3]).is_err());
}

#[test]
fn loss_values() {
    let p = params_with_split(3, 4, 2, 0, LossKind::Quadratic);
    let x = DenseMatrix::zeros(1, 3);
    assert!((p.loss(&x, &[1.0]).unwrap() - 0.5).abs() < 1e-15);
    assert!((p.loss(&x, &[0.0]).unwrap()).abs() < 1e-15);

    let p = params_with_split(3, 4, 2, 0, LossKind::BinaryCrossEntropy);
    for y in [0.0, 1.0] {
        assert!((p.loss(&x, &[y]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }
    assert!(p.loss(&DenseMatrix::zeros(0, 3), &[]).is_err());
}

#[test]
fn bce_is_finite_for_saturated_outputs() {
    assert!(mean_loss(LossKind::BinaryCrossEntropy, &[800.0], &[0.0]).is_finite());
    assert!(mean_loss(LossKind::BinaryCrossEntropy, &[-800.0], &[1.0]).is_finite());
}

#[test]
fn perfect_fit_has_zero_gradient() {
    let p = params_with_split(4, 6, 3, 5, LossKind::Quadratic);
    let mut rng = derive_rng_stream(5, &[("data", 0)]);
    let (x, _) = random_data(9, 4, &mut rng);
    let y = p.predict_raw(&x).unwrap();
    let (loss, g) = p.gradients(&x, &y).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn backprop_matches_closed_form() {
    let mut rng = derive_rng_stream(8, &[("data", 0)]);
    for seed in 0..25 {
        let m1 = 1 + (seed % 6) as usize;
        let p = params_with_split(6, 8, m1, seed, LossKind::Quadratic);
        let (x, y) = random_data(12, 6, &mut rng);
        let (_, g) = p.gradients(&x, &y).unwrap();
        let oracle = closed_form_gradient(&p, &x, &y);
        assert!(g.hidden[0].sub(&oracle).unwrap().max_abs() < 1e-12);
    }
}

fn finite_difference_check(p: &SplitParams, x: &DenseMatrix, y: &[f64]) {
    let (_, g) = p.gradients(x, y).unwrap();
    let step = 1e-5;
    for l in 0..p.num_hidden() {
        let (rows, cols) = p.hidden[l].shape();
        for j in 0..rows {
            for k in 0..cols {
                let mut plus = p.clone();
                plus.hidden[l][(j, k)] += step;
                let mut minus = p.clone();
                minus.hidden[l][(j, k)] -= step;
                let fd = (plus.loss(x, y).unwrap() - minus.loss(x, y).unwrap()) / (2.0 * step);
                let an = g.hidden[l][(j, k)];
                let scale = an.abs().max(fd.abs()).max(1e-8);
                assert!((an - fd).abs() / scale <= 1e-5, "layer {l} ({j},{k}): {an} vs {fd}");
            }
        }
    }
}

/// True when any pre-activation in the network lies within `eps` of a ReLU kink.
fn near_kink(p: &SplitParams, x: &DenseMatrix, eps: f64) -> bool {
    let cache = p.forward_batch(x).unwrap();
    cache.pre.iter().any(|z| z.values().iter().any(|v| v.abs() < eps))
}

#[test]
fn backprop_matches_finite_differences_deep() {
    let cfg = ModelConfig {
        layer_widths: vec![4, 6, 5, 1],
        loss: LossKind::BinaryCrossEntropy,
        scale_by_sqrt_width: true,
        train_output_weights: true,
        init_scale: 1.0,
    };
    let mut checked = 0;
    for seed in 0..40 {
        let mut rng = derive_rng_stream(seed, &[("deep", 0)]);
        let mut p = init_params(&cfg, &[1], &mut rng).unwrap();
        p.set_partition(Partition::from_zeta(1, vec![true, false, true, false, false])).unwrap();
        let (x, y) = random_data(7, 4, &mut rng);
        let y: Vec<f64> = y.iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
        if near_kink(&p, &x, 1e-3) {
            continue;
        }
        finite_difference_check(&p, &x, &y);
        // head gradient
        let (_, g) = p.gradients(&x, &y).unwrap();
        for j in 0..p.head.len() {
            let mut plus = p.clone();
            plus.head[j] += 1e-5;
            let mut minus = p.clone();
            minus.head[j] -= 1e-5;
            let fd = (plus.loss(&x, &y).unwrap() - minus.loss(&x, &y).unwrap()) / 2e-5;
            assert!((g.head[j] - fd).abs() <= 1e-5 * g.head[j].abs().max(fd.abs()).max(1e-8));
        }
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} draws away from kinks");
}

#[test]
fn frozen_head_has_zero_head_gradient() {
    let p = params_with_split(3, 4, 2, 3, LossKind::Quadratic);
    let mut rng = derive_rng_stream(3, &[("data", 0)]);
    let (x, y) = random_data(5, 3, &mut rng);
    let (_, g) = p.gradients(&x, &y).unwrap();
    assert!(g.head.iter().all(|&v| v == 0.0));
}

#[test]
fn positive_homogeneity_in_first_layer() {
    let mut rng = derive_rng_stream(4, &[("data", 0)]);
    let p = params_with_split(5, 8, 4, 4, LossKind::Quadratic);
    let (x, _) = random_data(10, 5, &mut rng);
    let h = p.predict_raw(&x).unwrap();
    for c in [0.5, 2.0, 7.3] {
        let mut q = p.clone();
        q.hidden[0].scale(c);
        let hc = q.predict_raw(&x).unwrap();
        for i in 0..10 {
            assert!((hc[i] - c * h[i]).abs() <= 1e-12 * h[i].abs().max(1.0));
        }
    }
}

#[test]
fn init_properties() {
    let mut cfg = one_hidden(20, 5000, LossKind::Quadratic);
    cfg.init_scale = 0.0;
    let mut rng = derive_rng_stream(0, &[]);
    let p = init_params(&cfg, &[0], &mut rng).unwrap();
    assert_eq!(p.hidden[0].max_abs(), 0.0);
    assert!(p.head.iter().all(|&a| a == 1.0 || a == -1.0));

    cfg.init_scale = 0.7;
    let a = init_params(&cfg, &[0], &mut derive_rng_stream(9, &[])).unwrap();
    let b = init_params(&cfg, &[0], &mut derive_rng_stream(9, &[])).unwrap();
    assert_eq!(a, b);
    // 10⁵ entries
    let v = a.hidden[0].values();
    let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    assert!((var / 0.49 - 1.0).abs() < 0.05, "variance {var}");
}

#[test]
fn output_layer_cannot_be_split() {
    let cfg = one_hidden(3, 4, LossKind::Quadratic);
    let mut rng = derive_rng_stream(0, &[]);
    assert!(init_params(&cfg, &[1], &mut rng).is_err());
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let p = params_with_split(4, 6, 3, 2, LossKind::Quadratic);
    let mut rng = derive_rng_stream(2, &[("data", 0)]);
    let (x, y) = random_data(10, 4, &mut rng);
    let opts = LocalTraining { epochs: 3, batch_size: 4, lr: 0.0 };
    let u = run_local_epochs(&p, &x, &y, &opts, Freeze::Nothing, &mut rng).unwrap();
    assert_eq!(u.params, p);
    assert_eq!(u.delta.max_abs(), 0.0);
}

#[test]
fn single_full_batch_step_is_gradient_step() {
    let p = params_with_split(4, 6, 3, 6, LossKind::Quadratic);
    let mut rng = derive_rng_stream(6, &[("data", 0)]);
    let (x, y) = random_data(10, 4, &mut rng);
    let lr = 0.3;
    let opts = LocalTraining { epochs: 1, batch_size: 10, lr };
    let u = run_local_epochs(&p, &x, &y, &opts, Freeze::Nothing, &mut rng).unwrap();
    let (_, g) = p.gradients(&x, &y).unwrap();
    for (d, gl) in u.delta.hidden.iter().zip(&g.hidden) {
        for (a, b) in d.values().iter().zip(gl.values()) {
            assert_eq!(*a, -lr * b);
        }
    }
}

#[test]
fn three_full_batch_epochs_match_hand_iteration() {
    let p = params_with_split(3, 4, 2, 7, LossKind::Quadratic);
    let mut rng = derive_rng_stream(7, &[("data", 0)]);
    let (x, y) = random_data(6, 3, &mut rng);
    let lr = 0.1;
    let opts = LocalTraining { epochs: 3, batch_size: 6, lr };
    let u = run_local_epochs(&p, &x, &y, &opts, Freeze::Nothing, &mut rng).unwrap();

    let mut w = p.clone();
    for _ in 0..3 {
        let g = closed_form_gradient(&w, &x, &y);
        w.hidden[0].axpy(-lr, &g).unwrap();
    }
    assert!(u.params.hidden[0].sub(&w.hidden[0]).unwrap().max_abs() < 1e-12);
    let expected_delta = w.hidden[0].sub(&p.hidden[0]).unwrap();
    assert!(u.delta.hidden[0].sub(&expected_delta).unwrap().max_abs() < 1e-12);
}

#[test]
fn frozen_shared_rows_do_not_move() {
    let p = params_with_split(4, 6, 3, 8, LossKind::BinaryCrossEntropy);
    let mut rng = derive_rng_stream(8, &[("data", 0)]);
    let (x, y) = random_data(10, 4, &mut rng);
    let y: Vec<f64> = y.iter().map(|v| (*v > 0.0) as u8 as f64).collect();
    let opts = LocalTraining { epochs: 4, batch_size: 3, lr: 0.5 };
    let u = run_local_epochs(&p, &x, &y, &opts, Freeze::Shared, &mut rng).unwrap();
    for j in 3..6 {
        assert_eq!(u.params.hidden[0].row(j), p.hidden[0].row(j));
    }
    assert!((0..3).any(|j| u.params.hidden[0].row(j) != p.hidden[0].row(j)));
}

#[test]
fn delta_split_follows_partition() {
    let p = params_with_split(3, 5, 2, 9, LossKind::Quadratic);
    let mut rng = derive_rng_stream(9, &[("data", 0)]);
    let (x, y) = random_data(8, 3, &mut rng);
    let opts = LocalTraining { epochs: 1, batch_size: 8, lr: 0.1 };
    let u = run_local_epochs(&p, &x, &y, &opts, Freeze::Nothing, &mut rng).unwrap();
    let (s, q) = split_delta(&u.delta, &p);
    assert_eq!(s.blocks[0].rows, vec![2, 3, 4]);
    assert_eq!(q.blocks[0].rows, vec![0, 1]);
    assert_eq!(s.blocks[0].values.row(0), u.delta.hidden[0].row(2));
    assert_eq!(q.blocks[0].values.row(1), u.delta.hidden[0].row(1));
}

#[test]
fn checkpoint_round_trip() {
    let p = params_with_split(3, 5, 2, 10, LossKind::BinaryCrossEntropy);
    let text = checkpoint::to_json(&p).unwrap();
    assert!(text.contains("fedsplit-checkpoint/1"));
    assert_eq!(checkpoint::from_json(&text).unwrap(), p);
    assert!(checkpoint::from_json(&text.replace("checkpoint/1", "checkpoint/9")).is_err());
}

fn unit_rows(n: usize, d: usize, rng: &mut RngStream) -> DenseMatrix {
    normalize_rows(&DenseMatrix::from_fn(n, d, |_, _| rng.normal()))
}

#[test]
fn gram_diagonal_is_active_fraction() {
    let mut rng = derive_rng_stream(11, &[]);
    let x = unit_rows(6, 4, &mut rng);
    let w = DenseMatrix::from_fn(50, 4, |_, _| rng.normal());
    let zeta: Vec<bool> = (0..50).map(|j| j % 2 == 0).collect();
    let sets = vec![vec![0, 1, 2], vec![3, 4, 5]];
    let g = gram_matrices(&x, &sets, &[&w, &w], &zeta).unwrap();
    for i in 0..6 {
        let active = (0..50).filter(|&j| zeta[j] && dot(w.row(j), x.row(i)) >= 0.0).count();
        assert!((g.h_shared[(i, i)] - active as f64 / 25.0).abs() < 1e-12);
        assert!(g.h_shared[(i, i)] <= 1.0 + 1e-12);
    }
    for i in 0..6 {
        for j in 0..6 {
            if (i < 3) != (j < 3) {
                assert_eq!(g.h_personal[(i, j)], 0.0);
            }
        }
    }
}

#[test]
fn orthogonal_inputs_have_zero_kernel() {
    let x = DenseMatrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    let sets = vec![vec![0, 1]];
    let mut rng = derive_rng_stream(12, &[]);
    let w = DenseMatrix::from_fn(10, 3, |_, _| rng.normal());
    let g = gram_matrices(&x, &sets, &[&w], &[true; 10]).unwrap();
    assert_eq!(g.h_shared[(0, 1)], 0.0);
    let l = ntk_limit_estimate(&x, &sets, 2000, &mut rng).unwrap();
    assert_eq!(l.h_shared[(0, 1)], 0.0);
}

#[test]
fn no_personal_units_gives_zero_personal_gram() {
    let mut rng = derive_rng_stream(13, &[]);
    let x = unit_rows(4, 3, &mut rng);
    let w = DenseMatrix::from_fn(5, 3, |_, _| rng.normal());
    let g = gram_matrices(&x, &[vec![0, 1], vec![2, 3]], &[&w, &w], &[true; 5]).unwrap();
    assert_eq!(g.h_personal.max_abs(), 0.0);
}

/// Closed-form arc-cosine kernel of degree 0 times the inner product.
fn arccos_entry(xi: &[f64], xj: &[f64]) -> f64 {
    let c: f64 = xi.iter().zip(xj).map(|(a, b)| a * b).sum();
    let theta = c.clamp(-1.0, 1.0).acos();
    c * (std::f64::consts::PI - theta) / (2.0 * std::f64::consts::PI)
}

#[test]
fn ntk_limit_matches_arccos_kernel() {
    let mut rng = derive_rng_stream(14, &[]);
    let x = unit_rows(5, 3, &mut rng);
    let mc = 20_000;
    let est = ntk_limit_estimate(&x, &[vec![0, 1, 2, 3, 4]], mc, &mut rng).unwrap();
    for i in 0..5 {
        // diagonal → 1/2
        let sd_diag = (0.25f64 / mc as f64).sqrt();
        assert!((est.h_shared[(i, i)] - 0.5).abs() <= 3.0 * sd_diag);
        for j in 0..5 {
            let c = dot(x.row(i), x.row(j));
            let exact = arccos_entry(x.row(i), x.row(j));
            let p = exact / c;
            let sd = c.abs() * (p * (1.0 - p) / mc as f64).sqrt();
            assert!((est.h_shared[(i, j)] - exact).abs() <= 3.0 * sd + 1e-15, "({i},{j})");
        }
    }
}

#[test]
fn ntk_needs_enough_samples() {
    let x = DenseMatrix::identity(2);
    let mut rng = derive_rng_stream(0, &[]);
    assert!(ntk_limit_estimate(&x, &[vec![0, 1]], 999, &mut rng).is_err());
}


