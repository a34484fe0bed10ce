use fedsplit::datagen::{generate_synthetic_federation, SynthConfig};
use fedsplit::facsplit::*;
use fedsplit::model::{init_params, run_local_epochs, Freeze, LocalTraining, LossKind, ModelConfig};
use fedsplit::numerics::*;

/// Random `p × 2` loadings whose rows have squared norm `1 − uniqueness`.
fn planted_loadings(p: usize, uniqueness: f64, rng: &mut RngStream) -> DenseMatrix {
    let mut a = DenseMatrix::from_fn(p, 2, |_, _| rng.normal());
    for j in 0..p {
        let row = a.row_mut(j);
        let norm = (row[0] * row[0] + row[1] * row[1]).sqrt();
        let s = (1.0 - uniqueness).sqrt() / norm;
        row[0] *= s;
        row[1] *= s;
    }
    a
}

fn planted_correlation(a: &DenseMatrix, uniqueness: f64) -> DenseMatrix {
    let mut r = a.matmul(&a.transpose()).unwrap();
    for j in 0..r.rows() {
        r[(j, j)] += uniqueness;
    }
    r
}

#[test]
fn planted_two_factor_model_is_recovered() {
    let mut converged = 0;
    for instance in 0..100 {
        let mut rng = derive_rng_stream(instance, &[("planted", 0)]);
        let p = 8 + (instance as usize % 13);
        let a = planted_loadings(p, 0.1, &mut rng);
        let r = planted_correlation(&a, 0.1);
        let fit = estimate_loadings(&r, 2, LoadingOptions::default()).unwrap();
        let est = fit.loadings.matmul(&fit.loadings.transpose()).unwrap();
        let truth = a.matmul(&a.transpose()).unwrap();
        let err = est.sub(&truth).unwrap().frobenius();
        assert!(err <= 1e-2, "instance {instance}: ‖ÂÂᵀ − AAᵀ‖_F = {err}");
        if fit.converged && fit.iterations <= 100 {
            converged += 1;
        }
    }
    assert!(converged >= 95, "{converged}/100 converged");
}

#[test]
fn off_diagonal_residual_shrinks_on_planted_models() {
    for instance in 0..20 {
        let mut rng = derive_rng_stream(instance, &[("residual", 0)]);
        let a = planted_loadings(10, 0.1, &mut rng);
        let fit = estimate_loadings(&planted_correlation(&a, 0.1), 2, LoadingOptions::default()).unwrap();
        let h = &fit.residual_history;
        for w in h.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "instance {instance}: {h:?}");
        }
    }
}

/// Dominant eigenpair by power iteration.
fn power_iteration(m: &DenseMatrix, seed: u64) -> (f64, Vec<f64>) {
    let mut rng = derive_rng_stream(seed, &[("power", 0)]);
    let mut v = rng.normal_vec(m.rows(), 1.0);
    let mut lambda = 0.0;
    for _ in 0..20_000 {
        let w = m.matvec(&v).unwrap();
        let n = norm2(&w);
        v = w.iter().map(|x| x / n).collect();
        let next = dot(&v, &m.matvec(&v).unwrap());
        if (next - lambda).abs() < 1e-15 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    (lambda, v)
}

#[test]
fn eigensolver_matches_power_iteration_with_deflation() {
    let mut rng = derive_rng_stream(21, &[]);
    let b = DenseMatrix::from_fn(20, 20, |_, _| rng.normal());
    let m = b.gram();
    let eig = sym_eig(&m).unwrap();
    let mut deflated = m.clone();
    for k in 0..4usize {
        let (lambda, v) = power_iteration(&deflated, k as u64);
        assert!((lambda - eig.eigenvalues[k]).abs() <= 1e-8 * lambda.abs(), "pair {k}");
        let cos = dot(&v, &eig.vector(k)).abs();
        assert!((cos - 1.0).abs() < 1e-6, "pair {k}: |cos| = {cos}");
        for i in 0..20 {
            for j in 0..20 {
                deflated[(i, j)] -= lambda * v[i] * v[j];
            }
        }
    }
    for w in eig.eigenvalues.windows(2) {
        assert!(w[0] >= w[1]);
    }
    assert!(eig.reconstruct().sub(&m).unwrap().max_abs() < 1e-10 * m.max_abs());
    let vtv = eig.eigenvectors.gram();
    assert!(vtv.sub(&DenseMatrix::identity(20)).unwrap().max_abs() < 1e-12);
}

/// Textbook two-pass Pearson coefficient.
fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[test]
fn correlation_matches_pearson() {
    let mut rng = derive_rng_stream(22, &[]);
    let mut z = DenseMatrix::from_fn(50, 6, |_, _| rng.normal());
    for i in 0..50 {
        z[(i, 1)] = 0.7 * z[(i, 0)] + 0.3 * z[(i, 1)] + 4.0;
        z[(i, 5)] *= 100.0;
    }
    let (zn, mask) = column_standardize(&z).unwrap();
    assert!(mask.iter().all(|m| !m));
    let r = correlation_matrix(&zn).unwrap();
    for a in 0..6 {
        for b in 0..6 {
            let oracle = pearson(&z.column(a), &z.column(b));
            assert!((r[(a, b)] - oracle).abs() < 1e-12, "({a},{b})");
        }
    }
}

#[test]
fn standardized_columns_have_zero_mean_unit_variance() {
    let mut rng = derive_rng_stream(23, &[]);
    let z = DenseMatrix::from_fn(100, 8, |_, j| 3.0 * j as f64 + (j + 1) as f64 * rng.normal());
    let (zn, _) = column_standardize(&z).unwrap();
    for j in 0..8 {
        let col = zn.column(j);
        assert!(mean(&col).abs() < 1e-12);
        assert!((sample_variance(&col) - 1.0).abs() < 1e-12);
    }
}

/// Units load on a few common factors; client perturbations are small.
fn factor_structured_weights(clients: usize, units: usize, inputs: usize, seed: u64) -> Vec<DenseMatrix> {
    let mut rng = derive_rng_stream(seed, &[("structured", 0)]);
    let factors: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(clients * inputs, 1.0)).collect();
    let loadings = DenseMatrix::from_fn(units, 3, |_, _| rng.normal());
    (0..clients)
        .map(|c| {
            DenseMatrix::from_fn(units, inputs, |j, k| {
                let common: f64 = (0..3).map(|f| loadings[(j, f)] * factors[f][c * inputs + k]).sum();
                common + 0.2 * rng.normal()
            })
        })
        .collect()
}

#[test]
fn noise_unit_falls_below_median_communality() {
    for seed in 0..5 {
        let mut w = factor_structured_weights(12, 10, 6, seed);
        let mut rng = derive_rng_stream(seed, &[("noise", 0)]);
        for wc in w.iter_mut() {
            let fresh = rng.normal_vec(6, 1.0);
            wc.set_row(4, &fresh);
        }
        let refs: Vec<&DenseMatrix> = w.iter().collect();
        let d = decompose(0, &refs, &FactorConfig::default()).unwrap();
        let nu = &d.partition.nu;
        assert!(nu[4] < quantile(nu, 0.5), "seed {seed}: {nu:?}");
        assert!(!d.partition.is_shared(4));
    }
}

#[test]
fn partition_is_invariant_to_client_order() {
    let w = factor_structured_weights(8, 9, 5, 31);
    let mut rng = derive_rng_stream(31, &[("perm", 0)]);
    let base = decompose(0, &w.iter().collect::<Vec<_>>(), &FactorConfig::default()).unwrap();
    for _ in 0..5 {
        let order = rng.permutation(w.len());
        let permuted: Vec<&DenseMatrix> = order.iter().map(|&c| &w[c]).collect();
        let d = decompose(0, &permuted, &FactorConfig::default()).unwrap();
        assert_eq!(d.partition.zeta, base.partition.zeta);
        for (a, b) in d.partition.nu.iter().zip(&base.partition.nu) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn briefly_trained_planted_clients_recover_true_split() {
    let mut agreement = 0.0;
    for seed in 0..3 {
        let cfg = SynthConfig {
            clients: 20,
            input_dim: 100,
            hidden: 200,
            n_train: 100,
            n_test: 10,
            seed,
            ..SynthConfig::default()
        };
        let (data, truth) = generate_synthetic_federation(&cfg).unwrap();
        let mcfg = ModelConfig::single_hidden(cfg.input_dim, cfg.hidden, LossKind::BinaryCrossEntropy);
        let opts = LocalTraining { epochs: 1, batch_size: 20, lr: 0.1 };
        let trained: Vec<DenseMatrix> = data
            .iter()
            .map(|client| {
                let mut rng = derive_rng_stream(seed, &[("planted-train", client.client_id as u64)]);
                let mut p = init_params(&mcfg, &[0], &mut rng).unwrap();
                p.hidden[0] = truth.client_weights(client.client_id);
                let u = run_local_epochs(&p, &client.x_train, &client.y_train, &opts, Freeze::Nothing, &mut rng)
                    .unwrap();
                u.params.hidden[0].clone()
            })
            .collect();
        let d = decompose(0, &trained.iter().collect::<Vec<_>>(), &FactorConfig::default()).unwrap();
        let hits = d.partition.zeta.iter().zip(truth.true_zeta()).filter(|(a, b)| **a == *b).count();
        agreement += hits as f64 / cfg.hidden as f64 / 3.0;
    }
    assert!(agreement >= 0.9, "agreement {agreement}");
}

#[test]
fn extreme_thresholds() {
    let w = factor_structured_weights(6, 7, 4, 40);
    let refs: Vec<&DenseMatrix> = w.iter().collect();
    let all_p = decompose(0, &refs, &FactorConfig { tau: TauSpec::Infinity, ..FactorConfig::default() }).unwrap();
    assert_eq!(all_p.partition.n_shared(), 0);
    let all_s = decompose(0, &refs, &FactorConfig { tau: TauSpec::NegInfinity, ..FactorConfig::default() }).unwrap();
    assert_eq!(all_s.partition.n_personal(), 0);
}
