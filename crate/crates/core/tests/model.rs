use affpc::funcdata::{FunctionalDataset, Interval, SubjectRecord};
use affpc::model::{
    build_design, fit, fit_flm, CovariateSmoothing, FitOptions, LambdaSpec, TrainingData,
};
use affpc::sim::{gen_covariate, gen_error, rmspe, simulate, ErrorKind, Kernel, SimConfig, SimSample};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample(n: usize, kernel: Kernel, seed: u64) -> SimSample {
    let config = SimConfig {
        n,
        kernel,
        seed,
        ..SimConfig::default()
    };
    simulate(&config, 0).unwrap()
}

fn in_and_out(model: &affpc::model::AffpcFit, s: &SimSample) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let t = s.train.subjects()[0].t_grid.clone();
    let pin = model.predict_dataset(&s.train, Some(&t)).unwrap();
    let pout = model.predict_dataset(&s.test, Some(&t)).unwrap();
    (
        pin.into_iter().map(|p| p.y_hat).collect(),
        pout.into_iter().map(|p| p.y_hat).collect(),
    )
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn linear_x_basis_matches_linear_baseline() {
    let s = sample(100, Kernel::F1, 21);
    let options = FitOptions {
        kx: 2,
        degree_x: 1,
        standardize: false,
        covariate_smoothing: CovariateSmoothing::Curve,
        lambda: LambdaSpec::Fixed { x: 0.0, s: 0.0 },
        ..FitOptions::default()
    };
    let additive = fit(&s.train, &options).unwrap();
    let linear = fit_flm(&s.train, &options).unwrap();
    let (ain, aout) = in_and_out(&additive, &s);
    let (lin, lout) = in_and_out(&linear, &s);
    assert!(max_abs_diff(&ain, &lin) < 1e-6);
    assert!(max_abs_diff(&aout, &lout) < 1e-6);

    // the x-slope of the additive surface is the linear slope surface
    for &sv in &[0.05, 0.3, 0.5, 0.8] {
        for &tv in &[0.0, 0.4, 1.0] {
            let slope = additive.evaluate_surface(1.0, sv, tv) - additive.evaluate_surface(0.0, sv, tv);
            assert!((slope - linear.beta(sv, tv)).abs() < 1e-6, "s={sv} t={tv}");
        }
    }
}

fn zero_slope_sup(n: usize, noise_sd: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s_grid = Interval::unit().linspace(81);
    let t_grid = Interval::unit().linspace(101);
    let covs = gen_covariate(&mut rng, &vec![s_grid.clone(); n], 0.5f64.sqrt());
    let subjects: Vec<SubjectRecord> = covs
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let e = gen_error(&mut rng, ErrorKind::E2, &t_grid);
            let y = t_grid
                .iter()
                .zip(e)
                .map(|(&t, e)| (2.0 * std::f64::consts::PI * t).sin() + noise_sd / 0.5 * e)
                .collect();
            SubjectRecord::new(format!("s{i}"), s_grid.clone(), c.observed, t_grid.clone(), y)
        })
        .collect();
    let ds = FunctionalDataset::new(subjects, Interval::unit(), Interval::unit()).unwrap();
    let model = fit_flm(&ds, &FitOptions::default()).unwrap();
    let grid = Interval::unit().linspace(41);
    grid.iter()
        .flat_map(|&s| grid.iter().map(move |&t| (s, t)))
        .map(|(s, t)| model.beta(s, t).abs())
        .fold(0.0, f64::max)
}

#[test]
fn zero_slope_estimate_shrinks_with_n() {
    let mean_sup = |n: usize| (0..4).map(|seed| zero_slope_sup(n, 0.5, seed)).sum::<f64>() / 4.0;
    let (small, large) = (mean_sup(300), mean_sup(1200));
    assert!(large < 0.65 * small, "n=300: {small}, n=1200: {large}");
    assert!(large < 0.25, "n=1200: {large}");
}

#[test]
fn additive_matches_baseline_under_linear_truth() {
    let mut ratios = Vec::new();
    for seed in [31, 32, 33] {
        let s = sample(300, Kernel::F1, seed);
        let options = FitOptions::default();
        let (_, aout) = in_and_out(&fit(&s.train, &options).unwrap(), &s);
        let (_, lout) = in_and_out(&fit_flm(&s.train, &options).unwrap(), &s);
        let truth: Vec<Vec<f64>> = s.test.subjects().iter().map(|r| r.y_values.clone()).collect();
        ratios.push(rmspe(&aout, &truth).unwrap() / rmspe(&lout, &truth).unwrap());
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((0.93..=1.08).contains(&mean), "ratios {ratios:?}");
}

#[test]
fn single_constant_s_function_is_scalar_regression() {
    let s = sample(60, Kernel::F2, 8);
    let options = FitOptions {
        ks: 1,
        degree_s: 0,
        standardize: false,
        covariate_smoothing: CovariateSmoothing::None,
        ..FitOptions::default()
    }
    .linear();
    let model = fit(&s.train, &options).unwrap();
    let design = build_design(&model, &s.train).unwrap();
    assert_eq!(design.dim(), 2);
    for (i, subj) in s.train.subjects().iter().enumerate() {
        let integral: f64 = subj
            .s_grid
            .windows(2)
            .zip(subj.x_values.windows(2))
            .map(|(g, x)| 0.5 * (g[1] - g[0]) * (x[0] + x[1]))
            .sum();
        assert!((design.rows[(i, 0)] - 1.0).abs() < 1e-12);
        assert!((design.rows[(i, 1)] - integral).abs() < 1e-10);
    }
    let data = TrainingData::new(&s.train, &options).unwrap();
    let scores = data.response().fit(options.pve).unwrap().scores.scores;
    let z = &design.rows;
    let ztz = z.transpose() * z;
    let ols: DMatrix<f64> = ztz.try_inverse().unwrap() * z.transpose() * &scores;
    assert!((&ols - &model.theta).abs().max() < 1e-8 * (1.0 + ols.abs().max()));
}

#[test]
fn one_active_coefficient_gives_a_product_surface() {
    let s = sample(40, Kernel::F2, 9);
    let mut model = fit(&s.train, &FitOptions::default()).unwrap();
    model.theta.fill(0.0);
    let n_aug = model.n_aug();
    model.theta[(n_aug, 0)] = 1.0;
    let bx = model.basis_x().unwrap().clone();
    let bs = model.basis_s().clone();
    for &(x, sv, t) in &[(0.3, 0.2, 0.1), (-1.0, 0.7, 0.5), (1.2, 0.95, 0.9)] {
        let expected = bx.values(x).unwrap()[0] * bs.values(sv).unwrap()[0] * model.response.phi_at(t)[0];
        assert!((model.evaluate_surface(x, sv, t) - expected).abs() < 1e-12);
    }
}
