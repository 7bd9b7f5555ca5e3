use affpc::fpca::Curve;
use affpc::funcdata::{FunctionalDataset, Interval, SubjectRecord};
use affpc::inference::{bootstrap_variance, conditional_variance, omega, BootstrapConfig};
use affpc::model::{
    assemble_penalty, build_design, fit, FitOptions, LambdaSpec, PreparedCovariate, TrainingData,
};
use affpc::sim::{gen_covariate, simulate, Kernel, SimConfig};
use affpc::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::{PI, SQRT_2};

fn small_sample(n: usize, seed: u64) -> affpc::sim::SimSample {
    let config = SimConfig {
        n,
        n_test: 3,
        kernel: Kernel::F2,
        seed,
        ..SimConfig::default()
    };
    simulate(&config, 0).unwrap()
}

fn targets(data: &TrainingData, ds: &FunctionalDataset) -> Vec<PreparedCovariate> {
    ds.subjects()
        .iter()
        .map(|s| {
            let c = s.covariate();
            data.prepare(Curve::new(c.grid, c.values), c.scalars).unwrap()
        })
        .collect()
}

/// Responses `m(t) + scale * (ξ_i √2 sin 2πt + small white noise)` over
/// random covariates.
fn one_component_data(n: usize, scale: f64, seed: u64) -> FunctionalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s_grid = Interval::unit().linspace(41);
    let t_grid = Interval::unit().linspace(51);
    let covs = gen_covariate(&mut rng, &vec![s_grid.clone(); n], 0.3);
    let subjects = covs
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let xi: f64 = rng.sample::<f64, _>(StandardNormal) + 0.8 * c.draw.a[0];
            let y = t_grid
                .iter()
                .map(|&t| {
                    let e: f64 = rng.sample(StandardNormal);
                    t + scale * (xi * SQRT_2 * (2.0 * PI * t).sin() + 0.01 * e)
                })
                .collect();
            SubjectRecord::new(format!("s{i}"), s_grid.clone(), c.observed, t_grid.clone(), y)
        })
        .collect();
    FunctionalDataset::new(subjects, Interval::unit(), Interval::unit()).unwrap()
}

#[test]
fn zero_score_covariance_gives_zero_variance() {
    let s = small_sample(40, 3);
    let mut model = fit(&s.train, &FitOptions::default()).unwrap();
    let k = model.k();
    model.score_cov = DMatrix::zeros(k, k);
    let t = Interval::unit().linspace(11);
    let x0 = &s.test.subjects()[0];
    let curve = Curve::new(x0.s_grid.clone(), x0.x_values.clone());
    let p = model.predict_curve(&curve, None, &t).unwrap();
    let v = conditional_variance(&model, &p.z, &t).unwrap();
    assert!(v.iter().all(|&x| x == 0.0));
}

#[test]
fn negative_definite_score_covariance_is_rejected() {
    let s = small_sample(40, 4);
    let mut model = fit(&s.train, &FitOptions::default()).unwrap();
    model.score_cov[(0, 0)] = -1.0;
    let z = DVector::from_element(model.design_dim(), 0.1);
    assert!(matches!(
        conditional_variance(&model, &z, &[0.5]),
        Err(Error::InvalidScoreCov(_))
    ));
}

#[test]
fn single_component_variance_matches_direct_algebra() {
    let ds = one_component_data(60, 1.0, 11);
    let options = FitOptions {
        lambda: LambdaSpec::Fixed { x: 1.0, s: 1.0 },
        ..FitOptions::default()
    };
    let model = fit(&ds, &options).unwrap();
    assert_eq!(model.k(), 1);

    let design = build_design(&model, &ds).unwrap();
    let data = TrainingData::new(&ds, &model.options).unwrap();
    let basis_x = model.basis_x().unwrap();
    let px = basis_x.second_derivative_penalty().matrix;
    let ps = model.basis_s().second_derivative_penalty().matrix;
    let penalty = assemble_penalty(&px, &ps, model.lambda.lambda_x, model.lambda.lambda_s, model.n_aug()).unwrap();
    let gram = design.rows.transpose() * &design.rows;
    let a = &gram + &penalty;
    let h = a.clone().pseudo_inverse(1e-12 * a.norm()).unwrap();

    let t = Interval::unit().linspace(9);
    for x0 in targets(&data, &ds).iter().take(5) {
        let (z0, _) = model.design_row(x0).unwrap();
        let hz = &h * &z0;
        let om = hz.dot(&(&gram * &hz));
        assert!((omega(&model, &z0) - om).abs() <= 1e-8 * om.abs().max(1e-12));
        let v = conditional_variance(&model, &z0, &t).unwrap();
        for (g, &tv) in t.iter().enumerate() {
            let phi = model.response.phi_at(tv)[0];
            let expected = om * model.score_cov[(0, 0)] * phi * phi;
            assert!((v[g] - expected).abs() <= 1e-8 * expected.abs().max(1e-12), "t={tv}");
        }
    }
}

#[test]
fn dense_score_covariance_is_nearly_diagonal() {
    let s = small_sample(200, 5);
    let model = fit(&s.train, &FitOptions::default()).unwrap();
    let nu = &model.score_cov;
    for a in 0..nu.nrows() {
        for b in 0..nu.ncols() {
            if a != b {
                let scale = (nu[(a, a)] * nu[(b, b)]).sqrt();
                assert!(nu[(a, b)].abs() < 1e-3 * scale, "({a},{b})");
            }
        }
    }
}

#[test]
fn bootstrap_is_reproducible_and_thread_independent() {
    let s = small_sample(30, 6);
    let options = FitOptions::default();
    let data = TrainingData::new(&s.train, &options).unwrap();
    let xs = targets(&data, &s.test);
    let t = Interval::unit().linspace(11);
    let config = BootstrapConfig {
        replicates: 2,
        seed: 99,
        ..BootstrapConfig::default()
    };
    let a = bootstrap_variance(&data, &options, &xs, &t, &config).unwrap();
    let b = bootstrap_variance(&data, &options, &xs, &t, &config).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = pool.install(|| bootstrap_variance(&data, &options, &xs, &t, &config).unwrap());
    assert_eq!(a.targets, b.targets);
    assert_eq!(a.targets, c.targets);

    let other = BootstrapConfig { seed: 100, ..config };
    let d = bootstrap_variance(&data, &options, &xs, &t, &other).unwrap();
    assert_ne!(a.targets, d.targets);
}

#[test]
fn eigen_variance_vanishes_as_subjects_become_identical() {
    let t = Interval::unit().linspace(11);
    let options = FitOptions::default();
    let config = BootstrapConfig {
        replicates: 20,
        seed: 3,
        ..BootstrapConfig::default()
    };
    let max_eigen = |scale: f64| {
        let ds = one_component_data(40, scale, 12);
        let data = TrainingData::new(&ds, &options).unwrap();
        let xs: Vec<PreparedCovariate> = targets(&data, &ds).into_iter().take(3).collect();
        let out = bootstrap_variance(&data, &options, &xs, &t, &config).unwrap();
        out.targets
            .iter()
            .flat_map(|tv| tv.var_eigen.iter().copied())
            .fold(0.0, f64::max)
    };
    let wide = max_eigen(1.0);
    let narrow = max_eigen(1e-2);
    assert!(wide > 0.0);
    assert!(narrow < 1e-4 * wide, "{narrow} vs {wide}");
}
