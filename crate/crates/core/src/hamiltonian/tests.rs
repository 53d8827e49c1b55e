use super::*;
use crate::model::tests::{corpus, spec_1d};
use crate::model::{load_model, ControlDrift, FastDrift, IntensityFactor, RunningCost};
use nalgebra::DMatrix;

fn controlled_spec() -> crate::model::ModelSpec {
    load_model(&corpus("controlled.toml")).unwrap()
}

#[test]
fn singleton_control_set_returns_the_bracket() {
    let spec = load_model(&corpus("controlled-singleton.toml")).unwrap();
    let mut input = DriverInput::zeros(&spec);
    input.z[0] = 2.0;
    input.u[0] = 0.5;
    let (value, idx) = eval_control_hamiltonian(&spec, &input);
    // l + z·R⁻¹b + u(r − 1)λ = 0.4 + 2·0.3 + 0.5·0.2·1.
    assert!((value - (0.4 + 0.6 + 0.1)).abs() < 1e-12);
    assert_eq!(idx, 0);
}

#[test]
fn vanishing_terms_give_zero_driver() {
    let spec = spec_1d(-1.0, FastDrift::Zero);
    let input = DriverInput::zeros(&spec);
    let (value, idx) = eval_control_hamiltonian(&spec, &input);
    assert_eq!(value, 0.0);
    assert_eq!(idx, 0);
}

#[test]
fn two_point_minimum_over_running_cost() {
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.coefficients.control_set = vec![
        nalgebra::DVector::from_element(1, 0.0),
        nalgebra::DVector::from_element(1, 1.0),
    ];
    config.coefficients.l = RunningCost::PerControl {
        values: vec![1.0, 2.0],
    };
    let spec = crate::model::ModelSpec::new(config).unwrap();
    let input = DriverInput::zeros(&spec);
    let (value, idx) = eval_control_hamiltonian(&spec, &input);
    assert_eq!(value, 1.0);
    assert_eq!(idx, 0);
}

#[test]
fn tie_break_picks_lowest_index() {
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.coefficients.control_set = vec![
        nalgebra::DVector::from_element(1, 0.0),
        nalgebra::DVector::from_element(1, 1.0),
    ];
    config.coefficients.l = RunningCost::PerControl {
        values: vec![1.5, 1.5],
    };
    let spec = crate::model::ModelSpec::new(config).unwrap();
    let (_, idx) = eval_control_hamiltonian(&spec, &DriverInput::zeros(&spec));
    assert_eq!(idx, 0);
}

#[test]
fn selectors_vanish_for_unit_intensity() {
    let spec = load_model(&corpus("ou-jump.toml")).unwrap();
    let input = DriverInput::zeros(&spec);
    let (g1, g2) = gamma_selectors(
        &spec,
        &input,
        &nalgebra::DVector::zeros(1),
        &nalgebra::DVector::zeros(1),
    );
    assert_eq!(g1[0], 0.0);
    assert_eq!(g2[0], 0.0);
}

#[test]
fn selector_takes_sup_on_the_upper_branch() {
    // r ∈ {1.2, 1.5} over two controls: sup(r − 1) = 0.5 where u ≥ u′.
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.levy1 = crate::model::LevyMeasure {
        marks: vec![nalgebra::DVector::from_element(1, 0.5)],
        intensities: vec![1.0],
    };
    config.coefficients.control_set = vec![
        nalgebra::DVector::from_element(1, 0.0),
        nalgebra::DVector::from_element(1, 1.0),
    ];
    config.coefficients.r_intensity = IntensityFactor::PerControl {
        values: vec![1.2, 1.5],
    };
    let spec = crate::model::ModelSpec::new(config).unwrap();
    let mut input = DriverInput::zeros(&spec);
    input.u[0] = 1.0;
    let (g1, _) = gamma_selectors(
        &spec,
        &input,
        &nalgebra::DVector::zeros(1),
        &nalgebra::DVector::zeros(1),
    );
    assert!((g1[0] - 0.5).abs() < 1e-15);
    // Below the branch point the inf branch applies.
    input.u[0] = -1.0;
    let (g1, _) = gamma_selectors(
        &spec,
        &input,
        &nalgebra::DVector::zeros(1),
        &nalgebra::DVector::zeros(1),
    );
    assert!((g1[0] - 0.2).abs() < 1e-15);
}

#[test]
fn selector_inequality_holds_on_random_draws() {
    // ψ(…, u, θ) − ψ(…, u′, θ) ≤ Σ (u − u′) γ₁ λ with slack ≥ −1e-12,
    // and the selector bands stay in (−1, ∞).
    let spec = controlled_spec();
    let mut rng = crate::rng::stream_rng(17, crate::rng::Stream::Checker, 0);
    use rand::Rng;
    for _ in 0..1000 {
        let mut input = DriverInput::zeros(&spec);
        input.x[0] = rng.gen_range(-2.0..2.0);
        input.q[0] = rng.gen_range(-2.0..2.0);
        input.z[0] = rng.gen_range(-2.0..2.0);
        input.zeta[0] = rng.gen_range(-2.0..2.0);
        input.u[0] = rng.gen_range(-2.0..2.0);
        input.theta[0] = rng.gen_range(-2.0..2.0);
        let u_prime = nalgebra::DVector::from_element(1, rng.gen_range(-2.0..2.0));
        let theta_prime = nalgebra::DVector::from_element(1, rng.gen_range(-2.0..2.0));
        let (g1, g2) = gamma_selectors(&spec, &input, &u_prime, &theta_prime);
        assert!(g1.iter().all(|&g| g > -1.0));
        assert!(g2.iter().all(|&g| g > -1.0));

        let psi = eval_control_hamiltonian(&spec, &input).0;
        let mut swapped = input.clone();
        swapped.u = u_prime.clone();
        let psi_prime = eval_control_hamiltonian(&spec, &swapped).0;
        let rhs: f64 = (0..1)
            .map(|i| (input.u[i] - u_prime[i]) * g1[i] * spec.nu1().intensities[i])
            .sum();
        assert!(psi - psi_prime <= rhs + 1e-12);

        let mut swapped_theta = input.clone();
        swapped_theta.theta = theta_prime.clone();
        let psi_theta = eval_control_hamiltonian(&spec, &swapped_theta).0;
        let rhs2: f64 = (0..1)
            .map(|j| (input.theta[j] - theta_prime[j]) * g2[j] * spec.nu2().intensities[j])
            .sum();
        assert!(psi - psi_theta <= rhs2 + 1e-12);
    }
}

#[test]
fn hamiltonian_is_concave_in_the_linear_arguments() {
    let spec = controlled_spec();
    let mut rng = crate::rng::stream_rng(23, crate::rng::Stream::Checker, 1);
    use rand::Rng;
    for _ in 0..1000 {
        let mut a = DriverInput::zeros(&spec);
        let mut b = DriverInput::zeros(&spec);
        a.x[0] = rng.gen_range(-1.5..1.5);
        a.q[0] = rng.gen_range(-1.5..1.5);
        b.x.copy_from(&a.x);
        b.q.copy_from(&a.q);
        for input in [&mut a, &mut b] {
            input.z[0] = rng.gen_range(-2.0..2.0);
            input.zeta[0] = rng.gen_range(-2.0..2.0);
            input.u[0] = rng.gen_range(-2.0..2.0);
            input.theta[0] = rng.gen_range(-2.0..2.0);
        }
        let t: f64 = rng.gen_range(0.0..1.0);
        let mut mix = a.clone();
        mix.z = &a.z * t + &b.z * (1.0 - t);
        mix.zeta = &a.zeta * t + &b.zeta * (1.0 - t);
        mix.u = &a.u * t + &b.u * (1.0 - t);
        mix.theta = &a.theta * t + &b.theta * (1.0 - t);
        let va = eval_control_hamiltonian(&spec, &a).0;
        let vb = eval_control_hamiltonian(&spec, &b).0;
        let vm = eval_control_hamiltonian(&spec, &mix).0;
        assert!(vm >= t * va + (1.0 - t) * vb - 1e-12);
    }
}

#[test]
fn argmin_is_invariant_under_positive_scaling() {
    // Scaling l and the other terms by c > 0 scales the bracket uniformly.
    let spec = controlled_spec();
    let mut scaled_config = spec.config().clone();
    let c = 3.5;
    scaled_config.coefficients.l = RunningCost::PerControl {
        values: vec![0.3 * c, 0.35 * c, 0.45 * c, 0.5 * c, 0.6 * c],
    };
    scaled_config.coefficients.b_drift = ControlDrift::PerControl {
        values: vec![
            nalgebra::DVector::from_element(1, 0.4 * c),
            nalgebra::DVector::from_element(1, 0.3 * c),
            nalgebra::DVector::from_element(1, 0.2 * c),
            nalgebra::DVector::from_element(1, 0.1 * c),
            nalgebra::DVector::from_element(1, 0.0),
        ],
    };
    scaled_config.coefficients.r_intensity = IntensityFactor::PerControl {
        values: vec![
            1.0 + 0.3 * c,
            1.0 + 0.2 * c,
            1.0 + 0.15 * c,
            1.0 + 0.1 * c,
            1.0,
        ],
    };
    scaled_config.coefficients.bounds.c_r = 1.0 + 0.3 * c + 0.1;
    scaled_config.coefficients.bounds.m_prime = 2.0;
    let scaled = crate::model::ModelSpec::new(scaled_config).unwrap();

    let mut rng = crate::rng::stream_rng(29, crate::rng::Stream::Checker, 2);
    use rand::Rng;
    for _ in 0..200 {
        let mut input = DriverInput::zeros(&spec);
        input.x[0] = rng.gen_range(-1.0..1.0);
        input.z[0] = rng.gen_range(-2.0..2.0);
        input.u[0] = rng.gen_range(-2.0..2.0);
        let (_, i) = eval_control_hamiltonian(&spec, &input);
        let (_, j) = eval_control_hamiltonian(&scaled, &input);
        assert_eq!(i, j);
    }
}

#[test]
fn certify_zero_driver() {
    let spec = spec_1d(-1.0, FastDrift::Zero);
    let driver = Driver::Affine(AffineDriver::default());
    let cert = certify_driver(&spec, &driver, 64, 3);
    assert_eq!(cert.m_psi, 0.0);
    for v in [cert.l_x, cert.l_q, cert.l_z, cert.l_zeta, cert.l_u, cert.l_theta] {
        assert!(v.abs() < 1e-9, "{cert:?}");
    }
}

#[test]
fn certify_constant_slow_drift_gives_exact_lz() {
    // b ≡ 1 with R = I: ψ is linear in z with gradient R⁻¹b.
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.coefficients.b_drift = ControlDrift::Constant {
        value: nalgebra::DVector::from_element(1, 1.0),
    };
    config.coefficients.bounds.m_prime = 2.0;
    let spec = crate::model::ModelSpec::new(config).unwrap();
    let cert = certify_driver(&spec, &Driver::Hamiltonian, 64, 5);
    assert!((cert.l_z - 1.0).abs() < 1e-6, "l_z = {}", cert.l_z);
}

#[test]
fn certify_cost_only_driver_has_no_linear_sensitivity() {
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.coefficients.l = RunningCost::Constant { value: 0.7 };
    let spec = crate::model::ModelSpec::new(config).unwrap();
    let cert = certify_driver(&spec, &Driver::Hamiltonian, 64, 5);
    assert!((cert.m_psi - 0.7).abs() < 1e-12);
    for v in [cert.l_z, cert.l_zeta, cert.l_u, cert.l_theta] {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn certify_hamiltonian_of_the_controlled_corpus() {
    let spec = controlled_spec();
    let cert = certify_driver(&spec, &Driver::Hamiltonian, 128, 7);
    // L_z = max |R⁻¹ b| over controls; L_u = max |(r − 1)| √λ.
    assert!((cert.l_z - 0.4).abs() < 1e-6, "l_z = {}", cert.l_z);
    assert!((cert.l_u - 0.3).abs() < 1e-6, "l_u = {}", cert.l_u);
    assert!(cert.c2 > 0.0 && cert.c1 <= 0.0 && cert.c1 > -1.0);
    assert!(cert.weighted_form_ok);
}

#[test]
fn driver_usage_flags() {
    let spec = load_model(&corpus("qsq-averaging.toml")).unwrap();
    let q_sq = Driver::Affine(AffineDriver {
        q_sq: 1.0,
        ..Default::default()
    });
    assert!(q_sq.uses_q(&spec));
    assert!(!q_sq.uses_zeta_theta(&spec));
    let with_zeta = Driver::Affine(AffineDriver {
        zeta_coef: vec![1.0],
        ..Default::default()
    });
    assert!(with_zeta.uses_zeta_theta(&spec));
    let ctl = load_model(&corpus("controlled.toml")).unwrap();
    assert!(!Driver::Hamiltonian.uses_zeta_theta(&ctl));
    let _ = DMatrix::<f64>::zeros(1, 1);
}
