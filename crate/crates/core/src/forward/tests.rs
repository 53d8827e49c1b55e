use super::*;
use crate::model::tests::{corpus, spec_1d};
use crate::model::{load_model, FastDrift, LevyMeasure, ModelSpec};
use crate::util::{mean, mean_se};

fn zero_noise(spec: &ModelSpec, grid: &GridSpec) -> NoisePath {
    let d = spec.dims();
    NoisePath {
        dw1: DMatrix::zeros(d.d_x, grid.n_steps),
        dw2: DMatrix::zeros(d.d_w, grid.n_steps),
        jumps1: Vec::new(),
        jumps2: Vec::new(),
        counts1: DMatrix::zeros(d.m1, grid.n_steps),
        counts2: DMatrix::zeros(d.m2, grid.n_steps),
        slow_seed: 0,
        fast_seed: 0,
    }
}

fn with_levy2(spec: &ModelSpec, mark: f64, lam: f64) -> ModelSpec {
    let mut config = spec.config().clone();
    config.levy2 = LevyMeasure {
        marks: vec![DVector::from_element(1, mark)],
        intensities: vec![lam],
    };
    ModelSpec::new(config).unwrap()
}

#[test]
fn compound_poisson_zero_rate_is_empty() {
    let nu = LevyMeasure::empty();
    assert!(sample_compound_poisson(&nu, 1.0, 1.0, 7, 1).is_empty());
}

#[test]
fn compound_poisson_mean_count_matches_rate() {
    // Poisson mean λT with λ = 2, T = 1 over 10⁵ replicas.
    let nu = LevyMeasure {
        marks: vec![DVector::from_element(1, 1.0)],
        intensities: vec![2.0],
    };
    let n = 100_000;
    let total: usize = (0..n)
        .map(|s| sample_compound_poisson(&nu, 1.0, 1.0, s as u64, 1).len())
        .sum();
    let mean_count = total as f64 / n as f64;
    assert!(
        (mean_count - 2.0).abs() < 0.02,
        "mean count = {mean_count}"
    );
}

#[test]
fn compound_poisson_mark_thinning() {
    // Mark 2 carries rate 3 of total 4: fraction 0.75 ± 0.01.
    let nu = LevyMeasure {
        marks: vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
        intensities: vec![1.0, 3.0],
    };
    let mut total = 0usize;
    let mut second = 0usize;
    let mut s = 0u64;
    while total < 100_000 {
        for j in sample_compound_poisson(&nu, 1.0, 1.0, s, 1) {
            total += 1;
            if j.mark_index == 1 {
                second += 1;
            }
        }
        s += 1;
    }
    let frac = second as f64 / total as f64;
    assert!((frac - 0.75).abs() < 0.01, "fraction = {frac}");
}

#[test]
fn compound_poisson_compensation() {
    // MC mean of Σ w − (Σ λ_i w_i) T vanishes within 3·SE.
    let nu = LevyMeasure {
        marks: vec![DVector::from_element(1, 0.7)],
        intensities: vec![1.5],
    };
    let vals: Vec<f64> = (0..20_000)
        .map(|s| {
            let jumps = sample_compound_poisson(&nu, 1.0, 1.0, s as u64, 1);
            jumps.len() as f64 * 0.7 - 1.5 * 0.7
        })
        .collect();
    let (m, se) = mean_se(&vals);
    assert!(m.abs() <= 3.0 * se, "mean = {m}, se = {se}");
}

#[test]
fn slow_without_noise_stays_at_x0() {
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.operators.a = DMatrix::from_element(1, 1, 0.0);
    config.initial.x0 = DVector::from_element(1, 0.7);
    let spec = ModelSpec::new(config).unwrap();
    let grid = GridSpec::new(100, 1.0);
    let x = simulate_slow(&spec, &grid, &zero_noise(&spec, &grid)).unwrap();
    for k in 0..=100 {
        assert_eq!(x[(0, k)], 0.7);
    }
}

#[test]
fn slow_linear_decay_is_exact() {
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.initial.x0 = DVector::from_element(1, 1.0);
    let spec = ModelSpec::new(config).unwrap();
    let grid = GridSpec::new(10_000, 1.0);
    let x = simulate_slow(&spec, &grid, &zero_noise(&spec, &grid)).unwrap();
    assert!(
        (x[(0, grid.n_steps)] - (-1.0f64).exp()).abs() < 1e-6,
        "X1 = {}",
        x[(0, grid.n_steps)]
    );
}

#[test]
fn slow_ou_variance_matches_closed_form() {
    // Var X₁ = (1 − e⁻²)/2 for dX = −X dt + dW, X₀ = 0.
    let spec = spec_1d(-1.0, FastDrift::Zero);
    let grid = GridSpec::new(500, 1.0);
    let stepper = SlowStepper::new(&spec, &grid);
    let n = 40_000;
    let terminal: Vec<f64> = (0..n)
        .map(|p| {
            let noise = sample_noise(&spec, &grid, derive_seed(3, Stream::SlowNoise, p as u64), 1);
            stepper.simulate(spec.x0(), &noise).unwrap()[(0, grid.n_steps)]
        })
        .collect();
    let m = mean(&terminal);
    let var = terminal.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    let exact = (1.0 - (-2.0f64).exp()) / 2.0;
    let se_var = var * (2.0 / n as f64).sqrt();
    assert!(
        (var - exact).abs() <= 3.0 * se_var + 2.0 * exact * grid.dt(),
        "var = {var}, exact = {exact}"
    );
}

#[test]
fn fast_linear_decay() {
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.operators.g = DMatrix::from_element(1, 1, 0.0);
    config.initial.q0 = DVector::from_element(1, 1.0);
    let spec = ModelSpec::new(config).unwrap();
    let grid = GridSpec::new(1000, 1.0);
    let noise = zero_noise(&spec, &grid);
    let x = simulate_slow(&spec, &grid, &noise).unwrap();
    let q = simulate_fast(&spec, &grid, &noise, &x).unwrap();
    assert!((q[(0, grid.n_steps)] - (-1.0f64).exp()).abs() < 1e-9);
}

#[test]
fn fast_ou_stationary_variance() {
    // Stationary Var Q = g²/2 for dQ = −Q dt + g dW at ε = 1.
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.operators.g = DMatrix::from_element(1, 1, 0.8);
    config.scales.horizon = 8.0;
    let spec = ModelSpec::new(config).unwrap();
    let grid = GridSpec::new(800, 8.0);
    let stepper = FastStepper::new(&spec, &grid, DEFAULT_STIFFNESS_BOUND).unwrap();
    let n = 20_000;
    let sq: Vec<f64> = (0..n)
        .map(|p| {
            let noise = sample_noise(&spec, &grid, 1, derive_seed(5, Stream::FastNoise, p as u64));
            let x0 = spec.x0().clone();
            let q = stepper
                .simulate(&spec, spec.q0(), move |_| x0.clone(), &noise)
                .unwrap();
            let v = q[(0, grid.n_steps)];
            v * v
        })
        .collect();
    let (m, se) = mean_se(&sq);
    let exact = 0.8 * 0.8 / 2.0;
    assert!(
        (m - exact).abs() <= 3.0 * se + exact * grid.dt(),
        "E[Q²] = {m}, exact = {exact}"
    );
}

#[test]
fn fast_jump_second_moment() {
    // Itô balance 2 E[Q²] = λ₂ w² for the compensated pure-jump flow.
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.operators.g = DMatrix::from_element(1, 1, 0.0);
    config.scales.horizon = 8.0;
    let spec = with_levy2(&ModelSpec::new(config).unwrap(), 0.5, 2.0);
    let grid = GridSpec::new(800, 8.0);
    let stepper = FastStepper::new(&spec, &grid, DEFAULT_STIFFNESS_BOUND).unwrap();
    let n = 20_000;
    let sq: Vec<f64> = (0..n)
        .map(|p| {
            let noise = sample_noise(&spec, &grid, 1, derive_seed(9, Stream::FastNoise, p as u64));
            let x0 = spec.x0().clone();
            let q = stepper
                .simulate(&spec, spec.q0(), move |_| x0.clone(), &noise)
                .unwrap();
            let v = q[(0, grid.n_steps)];
            v * v
        })
        .collect();
    let (m, se) = mean_se(&sq);
    let exact = 2.0 * 0.5 * 0.5 / 2.0;
    assert!(
        (m - exact).abs() <= 3.0 * se + exact * 2.0 * grid.dt(),
        "E[Q²] = {m}, exact = {exact}"
    );
}

#[test]
fn frozen_fast_is_fast_at_unit_epsilon() {
    let spec = with_levy2(&spec_1d(-1.0, FastDrift::Zero), 0.4, 1.0);
    let grid = GridSpec::new(200, 1.0);
    let x_star = DVector::from_element(1, 0.3);
    let (frozen, noise_f) = simulate_frozen_fast(&spec, &x_star, spec.q0(), &grid, 42).unwrap();
    let noise = sample_noise_with_eps(&spec, &grid, 42, 42, 1.0);
    assert_eq!(noise_f, noise);
    let stepper = FastStepper::with_eps(&spec, &grid, 1.0, DEFAULT_STIFFNESS_BOUND).unwrap();
    let xs = x_star.clone();
    let direct = stepper
        .simulate(&spec, spec.q0(), move |_| xs.clone(), &noise)
        .unwrap();
    assert_eq!(frozen, direct);
}

#[test]
fn frozen_fast_relaxes_to_fixed_point() {
    // F(x, q) = x, B = −1: Q̇ = x − Q, so Q̂_t → x.
    let mut config = spec_1d(
        -1.0,
        FastDrift::Linear {
            on_x: Some(DMatrix::from_element(1, 1, 1.0)),
            on_q: None,
        },
    )
    .config()
    .clone();
    config.operators.g = DMatrix::from_element(1, 1, 0.0);
    config.scales.horizon = 20.0;
    let spec = ModelSpec::new(config).unwrap();
    let grid = GridSpec::new(2000, 20.0);
    let x_star = DVector::from_element(1, 1.7);
    let stepper = FastStepper::with_eps(&spec, &grid, 1.0, DEFAULT_STIFFNESS_BOUND).unwrap();
    let xs = x_star.clone();
    let q = stepper
        .simulate(&spec, spec.q0(), move |_| xs.clone(), &zero_noise(&spec, &grid))
        .unwrap();
    assert!((q[(0, grid.n_steps)] - 1.7).abs() < 1e-6);
}

#[test]
fn time_change_consistency_of_second_moments() {
    // Second moments of Q^ε_{εt} match those of Q̂_t (common step size, so
    // the discrete chains agree in law; only MC noise remains).
    let eps = 0.25;
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.operators.g = DMatrix::from_element(1, 1, 0.6);
    config.scales.epsilon = eps;
    config.initial.q0 = DVector::from_element(1, 1.0);
    let spec = with_levy2(&ModelSpec::new(config).unwrap(), 0.3, 1.0);
    let n_paths = 5000;

    let grid_eps = GridSpec::new(800, 1.0);
    let stepper_eps = FastStepper::new(&spec, &grid_eps, DEFAULT_STIFFNESS_BOUND).unwrap();
    let grid_hat = GridSpec::new(800, 1.0 / eps);
    let stepper_hat = FastStepper::with_eps(&spec, &grid_hat, 1.0, DEFAULT_STIFFNESS_BOUND).unwrap();
    assert!((grid_eps.dt() / eps - grid_hat.dt()).abs() < 1e-12);

    let x_star = spec.x0().clone();
    let checkpoints = [200usize, 400, 800];
    let mut sq_eps = vec![Vec::with_capacity(n_paths); checkpoints.len()];
    let mut sq_hat = vec![Vec::with_capacity(n_paths); checkpoints.len()];
    for p in 0..n_paths {
        let noise_e = sample_noise(
            &spec,
            &grid_eps,
            1,
            derive_seed(11, Stream::FastNoise, p as u64),
        );
        let xs = x_star.clone();
        let q_eps = stepper_eps
            .simulate(&spec, spec.q0(), move |_| xs.clone(), &noise_e)
            .unwrap();
        let noise_h = sample_noise_with_eps(
            &spec,
            &grid_hat,
            1,
            derive_seed(12, Stream::FastNoise, p as u64),
            1.0,
        );
        let xs = x_star.clone();
        let q_hat = stepper_hat
            .simulate(&spec, spec.q0(), move |_| xs.clone(), &noise_h)
            .unwrap();
        for (i, &k) in checkpoints.iter().enumerate() {
            sq_eps[i].push(q_eps[(0, k)] * q_eps[(0, k)]);
            sq_hat[i].push(q_hat[(0, k)] * q_hat[(0, k)]);
        }
    }
    for i in 0..checkpoints.len() {
        let (me, se_e) = mean_se(&sq_eps[i]);
        let (mh, se_h) = mean_se(&sq_hat[i]);
        let se = (se_e * se_e + se_h * se_h).sqrt();
        assert!(
            (me - mh).abs() <= 3.0 * se,
            "checkpoint {i}: {me} vs {mh} (se {se})"
        );
    }
}

#[test]
fn contraction_is_exact_for_linear_flow() {
    let spec = with_levy2(&spec_1d(-1.0, FastDrift::Zero), 0.4, 1.0);
    let grid = GridSpec::new(500, 5.0);
    for s in 0..50 {
        let q = DVector::from_element(1, 1.0 + s as f64 * 0.1);
        let qp = DVector::from_element(1, -0.5);
        let ratio =
            contraction_check(&spec, &q, &qp, spec.x0(), &grid, s as u64, 1.0).unwrap();
        assert!((ratio - 1.0).abs() <= 1e-9, "ratio = {ratio}");
    }
}

#[test]
fn contraction_sin_flow_respects_bound() {
    let spec = with_levy2(
        &spec_1d(
            -1.0,
            FastDrift::SinQ {
                amp: 0.5,
                freq: 1.0,
            },
        ),
        0.4,
        1.0,
    );
    let grid = GridSpec::new(2000, 5.0);
    for s in 0..50 {
        let q = DVector::from_element(1, 2.0);
        let qp = DVector::from_element(1, -1.0);
        let ratio =
            contraction_check(&spec, &q, &qp, spec.x0(), &grid, s as u64, 0.5).unwrap();
        assert!(ratio <= 1.0 + 1e-6, "ratio = {ratio}");
    }
}

#[test]
fn contraction_identical_starts() {
    let spec = spec_1d(-1.0, FastDrift::Zero);
    let grid = GridSpec::new(100, 1.0);
    let q = DVector::from_element(1, 0.8);
    let ratio = contraction_check(&spec, &q, &q, spec.x0(), &grid, 5, 1.0).unwrap();
    assert_eq!(ratio, 0.0);
}

#[test]
fn kappa_zero_for_equal_inputs() {
    let spec = spec_1d(
        -1.0,
        FastDrift::Linear {
            on_x: Some(DMatrix::from_element(1, 1, 1.0)),
            on_q: None,
        },
    );
    let grid = GridSpec::new(200, 2.0);
    let gamma = DMatrix::from_element(1, grid.n_steps + 1, 0.7);
    let k = estimate_kappa(&spec, &gamma, &gamma, &grid, 3, 1.0).unwrap();
    assert_eq!(k, 0.0);
}

#[test]
fn kappa_is_one_for_linear_coupling() {
    // F(x, q) = x with B = −1 and constant input gap: the discrete
    // variation-of-constants sums match the bound exactly.
    let spec = spec_1d(
        -1.0,
        FastDrift::Linear {
            on_x: Some(DMatrix::from_element(1, 1, 1.0)),
            on_q: None,
        },
    );
    let grid = GridSpec::new(400, 2.0);
    let gamma = DMatrix::from_element(1, grid.n_steps + 1, 1.0);
    let gamma_p = DMatrix::from_element(1, grid.n_steps + 1, 0.4);
    let k = estimate_kappa(&spec, &gamma, &gamma_p, &grid, 3, 1.0).unwrap();
    assert!((k - 1.0).abs() < 1e-10, "kappa = {k}");
}

#[test]
fn kappa_zero_without_x_coupling() {
    let spec = spec_1d(-1.0, FastDrift::Zero);
    let grid = GridSpec::new(200, 2.0);
    let gamma = DMatrix::from_element(1, grid.n_steps + 1, 1.0);
    let gamma_p = DMatrix::from_element(1, grid.n_steps + 1, -1.0);
    let k = estimate_kappa(&spec, &gamma, &gamma_p, &grid, 3, 1.0).unwrap();
    assert_eq!(k, 0.0);
}

#[test]
fn ensembles_are_deterministic() {
    let spec = load_model(&corpus("ou-jump.toml")).unwrap();
    let grid = GridSpec::new(50, 1.0);
    let a = simulate_ensemble(&spec, &grid, 77, 0, 64, true, 0, 0.25).unwrap();
    let b = simulate_ensemble(&spec, &grid, 77, 0, 64, true, 0, 0.25).unwrap();
    assert_eq!(a.x.as_ref().unwrap(), b.x.as_ref().unwrap());
    assert_eq!(a.q.as_ref().unwrap(), b.q.as_ref().unwrap());
    assert_eq!(a.dw1.as_ref().unwrap(), b.dw1.as_ref().unwrap());
    assert_eq!(a.n2.as_ref().unwrap(), b.n2.as_ref().unwrap());
}

#[test]
fn slow_noise_is_shared_across_eps_tags() {
    let spec = load_model(&corpus("ou-jump.toml")).unwrap();
    let grid = GridSpec::new(50, 1.0);
    let a = simulate_ensemble(&spec, &grid, 77, 0, 32, true, 1, 0.25).unwrap();
    let b = simulate_ensemble(&spec, &grid, 77, 0, 32, true, 2, 0.25).unwrap();
    assert_eq!(a.dw1.as_ref().unwrap(), b.dw1.as_ref().unwrap());
    assert_eq!(a.n1.as_ref().unwrap(), b.n1.as_ref().unwrap());
    assert_ne!(a.dw2.as_ref().unwrap(), b.dw2.as_ref().unwrap());
}

#[test]
fn moment_bound_slope_in_initial_condition() {
    // sup_t E|X_t|² against |x₀|² has bounded slope for the mean-reverting
    // slow flow.
    let base = load_model(&corpus("dyadic.toml")).unwrap();
    let grid = GridSpec::new(100, 1.0);
    let mut pts = Vec::new();
    for (i, x0) in [0.0f64, 1.0, 2.0, 3.0].iter().enumerate() {
        let spec = base
            .with_initial(DVector::from_element(1, *x0), base.q0().clone())
            .unwrap();
        let ens = simulate_ensemble(&spec, &grid, 100 + i as u64, 0, 2000, false, 0, 0.25).unwrap();
        let xs = ens.x.as_ref().unwrap();
        let sup = (0..=grid.n_steps)
            .map(|k| {
                (0..ens.n_paths)
                    .map(|p| xs[k][(0, p)] * xs[k][(0, p)])
                    .sum::<f64>()
                    / ens.n_paths as f64
            })
            .fold(0.0f64, f64::max);
        pts.push((x0 * x0, sup));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
    let intercept = my - slope * mx;
    assert!(slope > 0.5 && slope < 1.1, "slope = {slope}");
    assert!(intercept >= 0.0, "intercept = {intercept}");
}

#[test]
fn fast_uniform_bound_with_calibrated_constant() {
    // Fit k on a calibration problem, then require the bound with the same k
    // (25% margin) on two other members of the family.
    let family = [(1.0f64, 1.0f64), (0.5, 2.0), (2.0, 0.5)];
    let mut k_fit = 0.0f64;
    for (i, (g, q0)) in family.iter().enumerate() {
        let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
        config.operators.g = DMatrix::from_element(1, 1, *g);
        config.initial.q0 = DVector::from_element(1, *q0);
        config.scales.horizon = 4.0;
        let spec = ModelSpec::new(config).unwrap();
        let grid = GridSpec::new(400, 4.0);
        let ens = simulate_ensemble(&spec, &grid, 31 + i as u64, 0, 2000, true, 0, 0.25).unwrap();
        let qs = ens.q.as_ref().unwrap();
        let xs = ens.x.as_ref().unwrap();
        let sup_q = (0..=grid.n_steps)
            .map(|k| {
                (0..ens.n_paths)
                    .map(|p| qs[k][(0, p)] * qs[k][(0, p)])
                    .sum::<f64>()
                    / ens.n_paths as f64
            })
            .fold(0.0f64, f64::max);
        let sup_x = (0..=grid.n_steps)
            .map(|k| {
                (0..ens.n_paths)
                    .map(|p| xs[k][(0, p)] * xs[k][(0, p)])
                    .sum::<f64>()
                    / ens.n_paths as f64
            })
            .fold(0.0f64, f64::max);
        let budget = 1.0 + q0 * q0 + sup_x + g * g;
        if i == 0 {
            k_fit = 1.25 * sup_q / budget;
        } else {
            assert!(
                sup_q <= k_fit * budget,
                "problem {i}: sup E|Q|² = {sup_q}, budget = {budget}, k = {k_fit}"
            );
        }
    }
}

#[test]
fn slow_strong_self_convergence_is_monotone() {
    // Coarse runs against a common fine reference (nested increments): the
    // RMS gap decreases monotonically as dt halves.
    let spec = load_model(&corpus("dyadic.toml")).unwrap();
    let fine_n = 3200usize;
    let grid_fine = GridSpec::new(fine_n, 1.0);
    let levels = [100usize, 400, 1600];
    let n_paths = 2000;
    let mut rms = vec![0.0f64; levels.len()];
    for p in 0..n_paths {
        let noise = sample_noise(
            &spec,
            &grid_fine,
            derive_seed(55, Stream::SlowNoise, p as u64),
            derive_seed(55, Stream::FastNoise, p as u64),
        );
        let x_fine = simulate_slow(&spec, &grid_fine, &noise).unwrap();
        for (li, &n) in levels.iter().enumerate() {
            let grid = GridSpec::new(n, 1.0);
            let factor = fine_n / n;
            let mut coarse = NoisePath {
                dw1: DMatrix::zeros(1, n),
                dw2: DMatrix::zeros(1, n),
                jumps1: noise.jumps1.clone(),
                jumps2: Vec::new(),
                counts1: DMatrix::zeros(1, n),
                counts2: DMatrix::zeros(0, n),
                slow_seed: 0,
                fast_seed: 0,
            };
            for k in 0..n {
                for j in 0..factor {
                    coarse.dw1[(0, k)] += noise.dw1[(0, k * factor + j)];
                    coarse.counts1[(0, k)] += noise.counts1[(0, k * factor + j)];
                }
            }
            let x = simulate_slow(&spec, &grid, &coarse).unwrap();
            let gap = x[(0, n)] - x_fine[(0, fine_n)];
            rms[li] += gap * gap;
        }
    }
    for v in rms.iter_mut() {
        *v = (*v / n_paths as f64).sqrt();
    }
    assert!(
        rms[0] > rms[1] && rms[1] > rms[2],
        "self-convergence RMS not monotone: {rms:?}"
    );
}
