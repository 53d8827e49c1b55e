use super::*;

pub(crate) fn corpus(name: &str) -> String {
    let path = format!("{}/../../configs/{}", env!("CARGO_MANIFEST_DIR"), name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {path}: {e}"))
}

pub(crate) const CORPUS: [&str; 8] = [
    "minimal.toml",
    "ou-jump.toml",
    "qsq-averaging.toml",
    "concave.toml",
    "linear-driver.toml",
    "controlled.toml",
    "controlled-singleton.toml",
    "dyadic.toml",
];

pub(crate) fn spec_1d(b: f64, f: FastDrift) -> ModelSpec {
    let config = ModelConfig {
        operators: OperatorSpec {
            a: DMatrix::from_element(1, 1, -1.0),
            b: DMatrix::from_element(1, 1, b),
            r: DMatrix::from_element(1, 1, 1.0),
            g: DMatrix::from_element(1, 1, 1.0),
        },
        coefficients: CoefficientSpec {
            f,
            b_drift: ControlDrift::Zero,
            rho: ControlShift::Zero,
            r_intensity: IntensityFactor::One,
            gamma_intensity: IntensityFactor::One,
            l: RunningCost::Zero,
            h: TerminalCost::Zero,
            control_set: vec![DVector::from_element(1, 0.0)],
            bounds: DeclaredBounds::default(),
        },
        levy1: LevyMeasure::empty(),
        levy2: LevyMeasure::empty(),
        initial: Initial {
            x0: DVector::from_element(1, 0.0),
            q0: DVector::from_element(1, 0.0),
        },
        scales: Scales {
            epsilon: 1.0,
            horizon: 1.0,
        },
    };
    ModelSpec::new(config).expect("valid 1-D spec")
}

#[test]
fn minimal_config_loads() {
    let spec = load_model(&corpus("minimal.toml")).unwrap();
    let d = spec.dims();
    assert_eq!((d.d_x, d.d_q, d.d_w), (1, 1, 1));
    assert_eq!((d.m1, d.m2, d.n_controls), (0, 0, 1));
}

#[test]
fn singular_r_is_rejected() {
    let text = corpus("minimal.toml").replace("r = [[1.0]]", "r = [[0.0]]");
    match load_model(&text) {
        Err(CoreError::SingularR) => {}
        other => panic!("expected SingularR, got {other:?}"),
    }
}

#[test]
fn nonpositive_intensity_is_rejected() {
    let text = corpus("minimal.toml").replace(
        "[levy2]\nmarks = []\nintensities = []",
        "[levy2]\nmarks = [[1.0]]\nintensities = [-1.0]",
    );
    match load_model(&text) {
        Err(CoreError::NonpositiveIntensity) => {}
        other => panic!("expected NonpositiveIntensity, got {other:?}"),
    }
}

#[test]
fn dissipativity_linear_flow_is_exact() {
    let spec = spec_1d(-1.0, FastDrift::Zero);
    let report = check_dissipativity(&spec, 500, 7);
    assert!(
        (report.mu_hat - 1.0).abs() < 1e-12,
        "mu_hat = {}",
        report.mu_hat
    );
    assert_eq!(report.bound_violations, 0);
}

#[test]
fn dissipativity_sin_flow_matches_dense_scan() {
    // F = 0.5 sin(q): the derivative bound gives ratios in [0.5, 1.5] with
    // infimum 0.5, approached as the pair collapses near q = 0.
    let spec = spec_1d(
        -1.0,
        FastDrift::SinQ {
            amp: 0.5,
            freq: 1.0,
        },
    );
    let report = check_dissipativity(&spec, 2000, 11);
    assert!(
        report.mu_hat >= 0.5 && report.mu_hat <= 1.0,
        "mu_hat = {}",
        report.mu_hat
    );
    assert_eq!(report.bound_violations, 0);
    let scan = dissipativity_scan_1d(&spec, -6.0, 6.0, 400);
    assert!(scan >= 0.5 - 1e-9 && scan <= 1.0, "scan = {scan}");
    assert!(report.mu_hat >= scan - 1e-9);
}

#[test]
fn dissipativity_expansive_flow_violates() {
    let spec = spec_1d(1.0, FastDrift::Zero);
    let report = check_dissipativity(&spec, 300, 3);
    assert!((report.mu_hat + 1.0).abs() < 1e-12);
    assert_eq!(report.bound_violations, 300);
}

#[test]
fn dissipativity_is_seed_invariant_for_linear_f() {
    let spec = spec_1d(
        -1.0,
        FastDrift::Linear {
            on_x: None,
            on_q: Some(DMatrix::from_element(1, 1, 0.25)),
        },
    );
    let a = check_dissipativity(&spec, 400, 1).mu_hat;
    let b = check_dissipativity(&spec, 400, 999).mu_hat;
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    assert!((a - 0.75).abs() < 1e-12);
}

#[test]
fn lipschitz_zero_coefficients_pass() {
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.coefficients.bounds = DeclaredBounds {
        lip_f: 1.0,
        lip_b: 1.0,
        lip_r: 1.0,
        lip_l: 1.0,
        lip_h: 1.0,
        m_prime: 1.0,
        m_l: 1.0,
        m_h: 1.0,
        eta: 0.5,
        c_r: 1.5,
        eta_prime: 0.5,
        c_gamma: 1.5,
    };
    let spec = ModelSpec::new(config).unwrap();
    let report = check_lipschitz_bounds(&spec, 400, 5);
    assert_eq!(report.lipschitz_violations, 0);
    assert_eq!(report.bound_violations, 0);
}

#[test]
fn lipschitz_steep_terminal_cost_violates() {
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.coefficients.h = TerminalCost::Linear { coef: vec![2.0] };
    config.coefficients.bounds.lip_h = 1.0;
    let spec = ModelSpec::new(config).unwrap();
    let report = check_lipschitz_bounds(&spec, 300, 5);
    assert!(report.lipschitz_violations > 0);
}

#[test]
fn lipschitz_constant_r_inside_band_passes() {
    let mut config = spec_1d(-1.0, FastDrift::Zero).config().clone();
    config.levy1 = LevyMeasure {
        marks: vec![DVector::from_element(1, 0.5)],
        intensities: vec![1.0],
    };
    config.coefficients.r_intensity = IntensityFactor::Constant { value: 1.5 };
    config.coefficients.bounds.eta = 1.0;
    config.coefficients.bounds.c_r = 2.0;
    let spec = ModelSpec::new(config).unwrap();
    let report = check_lipschitz_bounds(&spec, 300, 5);
    assert_eq!(report.lipschitz_violations, 0);
    assert_eq!(report.bound_violations, 0);
}

#[test]
fn serialize_round_trips_every_corpus_config() {
    for name in CORPUS {
        let spec = load_model(&corpus(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        let text = serialize_model(&spec);
        let back = load_model(&text).unwrap_or_else(|e| panic!("{name} round trip: {e}"));
        assert_eq!(&spec, &back, "round trip of {name}");
    }
}

#[test]
fn corpus_respects_declared_bounds() {
    for name in CORPUS {
        let spec = load_model(&corpus(name)).unwrap();
        let report = check_lipschitz_bounds(&spec, 500, 23);
        assert_eq!(
            (report.lipschitz_violations, report.bound_violations),
            (0, 0),
            "{name}"
        );
    }
}

#[test]
fn with_epsilon_validates_range() {
    let spec = spec_1d(-1.0, FastDrift::Zero);
    assert!(spec.with_epsilon(0.5).is_ok());
    assert!(spec.with_epsilon(0.0).is_err());
    assert!(spec.with_epsilon(1.5).is_err());
}

#[test]
fn lab_config_sections_parse() {
    let lab = crate::labconfig::load_lab_config(&corpus("ou-jump.toml")).unwrap();
    assert!(lab.driver.is_some());
    assert_eq!(lab.solver.n_paths, 10_000);
    assert_eq!(lab.sweep.epsilons, vec![1.0, 0.5, 0.25, 0.1]);
    let spec = lab.spec().unwrap();
    assert_eq!(spec.dims().m1, 1);
}
