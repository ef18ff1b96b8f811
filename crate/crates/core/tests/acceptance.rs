//! Acceptance gate. Each check prints one PASS/FAIL line; the process exits
//! nonzero if any check fails.
//!
//! `ACCEPTANCE_ONLY=<substring>` restricts the run to matching checks.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use nsmra::covariance::{cov_matrix, FnField, KernelSpec, LocalParams, ParamProvider, StationaryMaternParams};
use nsmra::data::Observation;
use nsmra::dist::{make_plan, run_loopback_cluster, DistOptions};
use nsmra::evalx::{coverage_curve, gaussian_scores, make_gaps, run_gap_experiment, GapExperimentConfig};
use nsmra::geo::{GeoBox, GeoIndex, LonLat, OceanMask};
use nsmra::linalg::Cholesky;
use nsmra::mra::{dense_conditional, dense_gp_oracle, dense_log_likelihood, posterior_pass, predict, PredictOptions, Prior};
use nsmra::paramfield::{
    format_estimates, grid_point_seed, local_estimate_grid, sample_local_design, select_smoothing_cv, smooth_field,
    LocalFitConfig,
};
use nsmra::partition::{export_partition, kd_bisect, KnotRule};
use nsmra::pipeline::{FixedKernelPipeline, StationaryMlePipeline, TreeConfig};
use nsmra::trend::fit_trend_cv;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn scatter(n: usize, bx: &GeoBox, rng: &mut ChaCha8Rng) -> Vec<LonLat> {
    (0..n)
        .map(|_| LonLat {
            lon: rng.random_range(bx.lon_min()..bx.lon_max()),
            lat: rng.random_range(bx.lat_min..bx.lat_max),
        })
        .collect()
}

fn normals(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draws from N(0, k) by Cholesky.
fn dense_draw(k: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let l = Cholesky::new(k, "simulation").expect("positive definite");
    (l.l() * normals(k.nrows(), rng)).as_slice().to_vec()
}

/// A smooth positive parameter field with random coefficients.
fn random_field(rng: &mut ChaCha8Rng, exponential: bool) -> Arc<dyn ParamProvider> {
    let c: [f64; 9] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let nu = if exponential { 0.5 } else { rng.random_range(0.4..1.6) };
    Arc::new(FnField(move |p: LonLat| {
        let (x, y) = (p.lon.to_radians() * 8.0, p.lat.to_radians() * 8.0);
        LocalParams {
            sigma2: (0.5 * c[0] * x.sin() + 0.4 * c[1] * y.cos() + 0.2 * c[2]).exp(),
            beta: 500.0 * (0.5 * c[3] * (x + y).cos() + 0.3 * c[4] * x.sin() + 0.3 * c[5]).exp(),
            tau2: 0.1 * (0.5 * c[6] * y.sin() + 0.3 * c[7] * x.cos() + 0.2 * c[8]).exp(),
            nu,
        }
    }))
}

fn random_spec(rng: &mut ChaCha8Rng, nonstationary: bool) -> KernelSpec {
    if nonstationary {
        let exponential = rng.random_bool(0.5);
        KernelSpec::nonstationary(random_field(rng, exponential), exponential, false)
    } else {
        let nu = [0.5, 1.5, rng.random_range(0.3..2.0)][rng.random_range(0..3)];
        let p = StationaryMaternParams::new(
            rng.random_range(0.5..2.0),
            rng.random_range(200.0..900.0),
            nu,
            rng.random_range(0.05..0.3),
        )
        .unwrap();
        KernelSpec::stationary(p, false).unwrap()
    }
}

fn square() -> GeoBox {
    GeoBox::new(-10.0, 10.0, -10.0, 10.0).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// M-RA posterior against Gaussian conditioning on the implied covariance.
fn oracle_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let configs = 24;
    for c in 0..configs {
        let n = rng.random_range(100..=2000);
        let depth = rng.random_range(1..=4);
        let r = rng.random_range(4..=32);
        let spec = random_spec(&mut rng, c % 2 == 1);
        let obs = scatter(n, &square(), &mut rng);
        let targets = scatter(100, &square(), &mut rng);
        let y: Vec<f64> = normals(n, &mut rng).as_slice().to_vec();
        let tree = Arc::new(kd_bisect(&obs, square(), depth, r, KnotRule::FromObservations, c as u64).unwrap());
        let prior = Prior::build(tree, &spec, None).unwrap();
        let post = posterior_pass(&prior, &y).unwrap();
        let got = predict(&prior, &post, &targets, PredictOptions { include_nugget: true, joint: false }).unwrap();

        let mut k_oo = prior.implied_cov_matrix(&obs, &obs).unwrap();
        for (i, s) in spec.sites(&obs).unwrap().iter().enumerate() {
            k_oo[(i, i)] += spec.nugget(s);
        }
        let k_to = prior.implied_cov_matrix(&targets, &obs).unwrap();
        let mut k_tt = prior.implied_cov_matrix(&targets, &targets).unwrap();
        for (i, s) in spec.sites(&targets).unwrap().iter().enumerate() {
            k_tt[(i, i)] += spec.nugget(s);
        }
        let (mean, cov) = dense_conditional(&k_oo, &DVector::from_vec(y), &k_to, &k_tt).unwrap();
        let sd: Vec<f64> = (0..targets.len()).map(|i| cov[(i, i)].sqrt()).collect();
        worst = worst.max(max_abs_diff(&got.mean, mean.as_slice())).max(max_abs_diff(&got.sd, &sd));
    }
    verdict(worst < 1e-8, format!("{configs} configurations, max |mean/sd error| {worst:.2e} (tol 1e-8)"))
}

/// One level with every observation as a knot is exact kriging.
fn exactness_limit() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut pred_err, mut ll_err) = (0.0f64, 0.0f64);
    for c in 0..8 {
        let n = rng.random_range(50..=500);
        let spec = random_spec(&mut rng, c % 2 == 0);
        let obs = scatter(n, &square(), &mut rng);
        let targets = scatter(50, &square(), &mut rng);
        let y: Vec<f64> = normals(n, &mut rng).as_slice().to_vec();
        let tree = Arc::new(kd_bisect(&obs, square(), 1, 0, KnotRule::FromObservations, 0).unwrap());
        let prior = Prior::build(tree, &spec, None).unwrap();
        let post = posterior_pass(&prior, &y).unwrap();
        let got = predict(&prior, &post, &targets, PredictOptions::default()).unwrap();
        let (mean, cov) = dense_gp_oracle(&obs, &y, &targets, &spec).unwrap();
        let sd: Vec<f64> = (0..targets.len()).map(|i| cov[(i, i)].sqrt()).collect();
        pred_err = pred_err.max(max_abs_diff(&got.mean, mean.as_slice())).max(max_abs_diff(&got.sd, &sd));
        let k = cov_matrix(&obs, &obs, &spec.with_nugget(true)).unwrap();
        let dense_ll = dense_log_likelihood(&k, &DVector::from_vec(y)).unwrap();
        ll_err = ll_err.max((post.log_likelihood.unwrap() - dense_ll).abs());
    }
    verdict(
        pred_err < 1e-8 && ll_err < 1e-6,
        format!("prediction error {pred_err:.2e} (tol 1e-8), log-likelihood error {ll_err:.2e} (tol 1e-6)"),
    )
}

/// Gram matrices of the nonstationary kernel are positive semidefinite and
/// reduce to the stationary exponential under equal ranges.
fn covariance_validity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_ratio = f64::INFINITY;
    for k in 0..100 {
        let pts = scatter(50, &square(), &mut rng);
        let spec = KernelSpec::nonstationary(random_field(&mut rng, k % 2 == 0), k % 2 == 0, false);
        let g = cov_matrix(&pts, &pts, &spec).unwrap();
        let max_diag = (0..50).map(|i| g[(i, i)]).fold(0.0, f64::max);
        let min_eig = SymmetricEigen::new(g).eigenvalues.min();
        worst_ratio = worst_ratio.min(min_eig / max_diag);
    }
    let pts = scatter(60, &square(), &mut rng);
    let (sigma2, beta, tau2) = (1.7, 420.0, 0.0);
    let field: Arc<dyn ParamProvider> = Arc::new(FnField(move |_| LocalParams { sigma2, beta, tau2, nu: 0.5 }));
    let ns = cov_matrix(&pts, &pts, &KernelSpec::nonstationary(field, true, false)).unwrap();
    let st_spec = KernelSpec::stationary(StationaryMaternParams::exponential(sigma2, beta, tau2).unwrap(), false).unwrap();
    let st = cov_matrix(&pts, &pts, &st_spec).unwrap();
    let reduction = (ns - st).amax();
    verdict(
        worst_ratio >= -1e-8 && reduction < 1e-12,
        format!("min eigenvalue / max diagonal {worst_ratio:.2e} (tol -1e-8), equal-range gap {reduction:.2e} (tol 1e-12)"),
    )
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// ∫ (F(t) − 1{t ≥ y})² dt by composite Simpson rule.
fn crps_quadrature(y: f64, mean: f64, sd: f64) -> f64 {
    let simpson = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
        (f(a) + f(b) + inner) * h / 3.0
    };
    let lo = y.min(mean) - 12.0 * sd;
    let hi = y.max(mean) + 12.0 * sd;
    simpson(lo, y, &|t| normal_cdf((t - mean) / sd).powi(2)) + simpson(y, hi, &|t| (1.0 - normal_cdf((t - mean) / sd)).powi(2))
}

fn scoring_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mean = rng.random_range(-5.0..5.0);
        let sd = rng.random_range(0.1..4.0);
        let y = mean + sd * rng.random_range(-5.0..5.0);
        worst = worst.max((gaussian_scores(y, mean, sd).unwrap().crps - crps_quadrature(y, mean, sd)).abs());
    }
    let unit = gaussian_scores(0.0, 0.0, 1.0).unwrap();
    let scaled = gaussian_scores(2.0, 2.0, 3.0).unwrap();
    let z0 = (unit.log_score - 0.918939).abs().max((unit.crps - 0.233694).abs()).max((scaled.crps / 3.0 - 0.233694).abs());
    verdict(worst < 1e-6 && z0 < 1e-6, format!("CRPS vs quadrature {worst:.2e} (tol 1e-6), z=0 values off by {z0:.2e} (tol 1e-6)"))
}

fn relative_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1e-300)).fold(0.0, f64::max)
}

/// Loopback clusters against the serial pass.
fn distributed_equals_serial() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let spec = KernelSpec::stationary(StationaryMaternParams::exponential(1.0, 500.0, 0.1).unwrap(), false).unwrap();
    let mut worst = 0.0f64;
    let mut messages_ok = true;
    for (n, depth, nodes) in [(240usize, 4usize, vec![3usize]), (5000, 5, vec![1, 2, 4])] {
        let obs = scatter(n, &square(), &mut rng);
        let y: Vec<f64> = normals(n, &mut rng).as_slice().to_vec();
        let targets = scatter(200, &square(), &mut rng);
        let tree = Arc::new(kd_bisect(&obs, square(), depth, 16, KnotRule::FromObservations, 5).unwrap());
        let prior = Prior::build(tree.clone(), &spec, None).unwrap();
        let serial = posterior_pass(&prior, &y).unwrap();
        let want = predict(&prior, &serial, &targets, PredictOptions::default()).unwrap();
        for k in nodes {
            let run = run_loopback_cluster(tree.clone(), &spec, &y, &targets, k, DistOptions::default()).unwrap();
            let ll = run.root.posterior.log_likelihood.unwrap();
            worst = worst
                .max(relative_gap(&[ll], &[serial.log_likelihood.unwrap()]))
                .max(relative_gap(&run.field.mean, &want.mean))
                .max(relative_gap(&run.field.sd, &want.sd));
            messages_ok &= run.messages_sent == make_plan(&tree, k).unwrap().sync_pairs().len();
        }
    }
    verdict(
        worst < 1e-12 && messages_ok,
        format!("max relative gap {worst:.2e} (tol 1e-12), message counts match plan: {messages_ok}"),
    )
}

/// Range of the simulated nonstationary field: 100 km in the west rising to
/// 300 km in the east through a smooth step at the centre.
fn step_range(lon: f64) -> f64 {
    let s = 1.0 / (1.0 + (-(lon - 10.0)).exp());
    100.0 * 3f64.powf(s)
}

/// Nonstationary pipeline against stationary MLE on gap hold-outs.
fn table_direction() -> Verdict {
    let domain = GeoBox::new(0.0, 20.0, -5.0, 5.0).unwrap();
    let mask = OceanMask::all_ocean();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let n = 50_000;
    let locs = scatter(n, &domain, &mut rng);
    let truth: Arc<dyn ParamProvider> =
        Arc::new(FnField(|p: LonLat| LocalParams { sigma2: 1.0, beta: step_range(p.lon), tau2: 0.1, nu: 0.5 }));
    let sim_tree = TreeConfig { domain, leaf_size: 400, knots: 64 }.build(&locs, 1).unwrap();
    let sim_prior = Prior::build(Arc::new(sim_tree), &KernelSpec::nonstationary(truth.clone(), true, false), None).unwrap();
    let reference = sim_prior.simulate(n, 2).unwrap();
    let values = sim_prior.simulate(n, 3).unwrap();

    let fit_cfg = LocalFitConfig {
        grid_step_deg: 2.0,
        b1_half_deg: 1.5,
        b2_half_deg: 5.0,
        n_short: 400,
        n_long: 100,
        min_obs_b1: 400,
        seed: 4,
    };
    let estimates = local_estimate_grid(&locs, &reference, &fit_cfg, &mask, &domain, Some(0.5)).unwrap();
    let centers: Vec<Vec<LonLat>> = [(5usize, 3usize), (9, 5)]
        .iter()
        .map(|&(nx, ny)| {
            (0..nx * ny)
                .map(|k| LonLat {
                    lon: 20.0 * (k % nx) as f64 / (nx - 1) as f64,
                    lat: -5.0 + 10.0 * (k / nx) as f64 / (ny - 1) as f64,
                })
                .collect()
        })
        .collect();
    let (best, _) = select_smoothing_cv(&estimates, &centers, &[400.0, 700.0, 1100.0], &[0.0, 1e-3, 1e-2], 10, 5).unwrap();
    let field = smooth_field(&estimates, centers[best.center_set].clone(), best.ell_km, best.lambda).unwrap();

    let tree = TreeConfig { domain, leaf_size: 250, knots: 48 };
    let stationary_fit = StationaryMlePipeline { name: "stationary".into(), tree: tree.clone(), nu: 0.5, mle_subsample: 5000, max_evals: 150 }
        .fit(&locs, &reference, 6)
        .unwrap();
    let stationary = FixedKernelPipeline {
        name: "stationary".into(),
        tree: tree.clone(),
        spec: KernelSpec::stationary(stationary_fit.params, false).unwrap(),
    };
    let nonstationary = FixedKernelPipeline::nonstationary("nonstationary", tree.clone(), Arc::new(field));
    // reported only: how far the true field itself gets on this design
    let oracle = FixedKernelPipeline { name: "true-field".into(), tree, spec: KernelSpec::nonstationary(truth, true, false) };

    // a 10%-area box kept inside the domain
    let (gw, gh) = (20.0 * 0.1f64.sqrt(), 10.0 * 0.1f64.sqrt());
    let centres = GeoBox::new(gw / 2.0, 20.0 - gw / 2.0, -5.0 + gh / 2.0, 5.0 - gh / 2.0).unwrap();
    let gap_cfg = GapExperimentConfig {
        gap_lon_deg: gw,
        gap_lat_deg: gh,
        min_obs_in_gap: 2000,
        test_size: 2000,
        replicates: 20,
        seed: 7,
        center_res_deg: 0.1,
    };
    let gaps = make_gaps(&locs, &mask, &centres, &gap_cfg).unwrap();
    let exp = run_gap_experiment(&locs, &values, gaps, &[&stationary, &nonstationary, &oracle], 8).unwrap();
    let summary = exp.summary().unwrap();
    let (st, ns, truth_row) = (&summary[0], &summary[1], &summary[2]);
    let [_, log_wins, crps_wins] = ns.better_than_first;
    let i95 = 3;
    let closer = (ns.coverage[i95] - 0.95).abs() < (st.coverage[i95] - 0.95).abs();
    verdict(
        exp.successes().len() == 20 && log_wins >= 15 && crps_wins >= 15 && closer,
        format!(
            "log-score wins {log_wins}/20, CRPS wins {crps_wins}/20 (need 15); mean log-score {:.4} vs {:.4}, CRPS {:.4} vs {:.4}; \
             95% coverage {:.4} vs stationary {:.4}; stationary fit {:?}; true field wins {:?}, log-score {:.4}, CRPS {:.4}",
            ns.log_score,
            st.log_score,
            ns.crps,
            st.crps,
            ns.coverage[i95],
            st.coverage[i95],
            stationary_fit.params,
            truth_row.better_than_first,
            truth_row.log_score,
            truth_row.crps
        ),
    )
}

/// Swath-like layout: points spread along latitude tracks with a gentle wiggle.
fn swath_points(bx: &GeoBox, tracks: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<LonLat> {
    (0..n)
        .map(|_| {
            let t = rng.random_range(0..tracks);
            let lon = rng.random_range(bx.lon_min()..bx.lon_max());
            let lat = bx.lat_min + bx.lat_span() * (t as f64 + 0.5) / tracks as f64 + 0.5 * lon.sin();
            LonLat { lon, lat }
        })
        .collect()
}

/// Local fits on exact simulations with constant parameters.
fn local_fit_recovery() -> Verdict {
    let (sigma2, beta, tau2) = (1.0, 500.0, 0.1);
    let spec = KernelSpec::stationary(StationaryMaternParams::exponential(sigma2, beta, tau2).unwrap(), false).unwrap();
    // three grid points on the equator
    let grid_box = GeoBox::new(8.0, 12.0, 0.0, 0.0001).unwrap();
    let data_box = GeoBox::new(-12.0, 36.0, -21.0, 21.0).unwrap();
    let mask = OceanMask::all_ocean();
    let (mut hits, mut total) = (0usize, 0usize);
    let mut misses = [0usize; 3];
    let mut ratio_hits = 0usize;
    for rep in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + rep);
        let locs = swath_points(&data_box, 32, 150_000, &mut rng);
        let cfg = LocalFitConfig { seed: 70 + rep, ..LocalFitConfig::default() };
        let grid = nsmra::geo::make_grid(&grid_box, cfg.grid_step_deg, &mask).unwrap();
        let index = GeoIndex::new(&locs, 1.0);
        let used: BTreeSet<usize> = grid
            .iter()
            .enumerate()
            .flat_map(|(g, &c)| {
                let d = sample_local_design(c, &locs, &index, &cfg, grid_point_seed(&cfg, g as u64));
                d.indices().collect::<Vec<_>>()
            })
            .collect();
        let used: Vec<usize> = used.into_iter().collect();
        let pts: Vec<LonLat> = used.iter().map(|&i| locs[i]).collect();
        let draw = dense_draw(&cov_matrix(&pts, &pts, &spec.with_nugget(true)).unwrap(), &mut rng);
        let mut values = vec![f64::NAN; locs.len()];
        for (k, &i) in used.iter().enumerate() {
            values[i] = draw[k];
        }
        for e in local_estimate_grid(&locs, &values, &cfg, &mask, &grid_box, Some(0.5)).unwrap() {
            total += 1;
            let within = [e.sigma2 / sigma2, e.beta / beta, e.tau2 / tau2].map(|r| e.is_usable() && (r - 1.0).abs() < 0.25);
            for (m, w) in misses.iter_mut().zip(within) {
                *m += !w as usize;
            }
            hits += within.iter().all(|w| *w) as usize;
            ratio_hits += (e.is_usable() && ((e.sigma2 / e.beta) / (sigma2 / beta) - 1.0).abs() < 0.25) as usize;
        }
    }
    let rate = hits as f64 / total as f64;
    verdict(rate >= 0.8, format!(
            "{hits}/{total} grid points within 25% on all of (sigma2, beta, tau2): {rate:.3} (need 0.80); misses per parameter {misses:?}; sigma2/beta within 25% at {ratio_hits}/{total}"
        ))
}

/// Interval coverage when the data follow the model used for prediction.
fn calibration() -> Verdict {
    let levels = [0.5, 0.8, 0.9, 0.95, 0.99];
    let bx = GeoBox::new(0.0, 10.0, 0.0, 10.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (mut y, mut mean, mut sd) = (Vec::new(), Vec::new(), Vec::new());
    let (blocks, n_train, n_test) = (200, 500, 500);
    for b in 0..blocks {
        let field = random_field(&mut rng, true);
        let spec = KernelSpec::nonstationary(field, true, false);
        let train = scatter(n_train, &bx, &mut rng);
        let test = scatter(n_test, &bx, &mut rng);
        let all: Vec<LonLat> = train.iter().chain(&test).copied().collect();
        let draw = dense_draw(&cov_matrix(&all, &all, &spec.with_nugget(true)).unwrap(), &mut rng);
        let tree = Arc::new(kd_bisect(&train, bx, 3, 32, KnotRule::FromObservations, b).unwrap());
        let prior = Prior::build(tree, &spec, None).unwrap();
        let post = posterior_pass(&prior, &draw[..n_train]).unwrap();
        let p = predict(&prior, &post, &test, PredictOptions { include_nugget: true, joint: false }).unwrap();
        y.extend_from_slice(&draw[n_train..]);
        mean.extend(p.mean);
        sd.extend(p.sd);
    }
    let cov = coverage_curve(&y, &mean, &sd, &levels).unwrap();
    let worst = levels.iter().zip(&cov).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
    let shown: Vec<String> = cov.iter().map(|c| format!("{c:.4}")).collect();
    verdict(worst < 0.02, format!("{} test points, coverage [{}], max deviation {worst:.4} (tol 0.02)", y.len(), shown.join(", ")))
}

/// Text outputs of every stage, produced inside the current rayon pool.
fn stage_outputs() -> Vec<(&'static str, String)> {
    let domain = GeoBox::new(0.0, 12.0, -6.0, 6.0).unwrap();
    let mask = OceanMask::all_ocean();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let locs = scatter(4000, &domain, &mut rng);
    let spec = KernelSpec::stationary(StationaryMaternParams::exponential(1.0, 250.0, 0.1).unwrap(), false).unwrap();
    let tree_cfg = TreeConfig { domain, leaf_size: 200, knots: 24 };
    let sim = Prior::build(Arc::new(tree_cfg.build(&locs, 1).unwrap()), &spec, None).unwrap();
    let resid = sim.simulate(locs.len(), 2).unwrap();
    let obs: Vec<Observation> = locs
        .iter()
        .zip(&resid)
        .map(|(p, r)| Observation { loc: *p, value: 290.0 + 0.3 * p.lat + r, quality: 5 })
        .collect();
    let mut out = Vec::new();

    let trend = fit_trend_cv(&obs, &[4, 5, 6], 5, 180, 3).unwrap();
    out.push(("trend", trend.to_text()));
    let values: Vec<f64> = nsmra::trend::detrend(&obs, &trend);

    let cfg = LocalFitConfig {
        grid_step_deg: 4.0,
        b1_half_deg: 2.0,
        b2_half_deg: 5.0,
        n_short: 150,
        n_long: 50,
        min_obs_b1: 150,
        seed: 4,
    };
    let est = local_estimate_grid(&locs, &values, &cfg, &mask, &domain, Some(0.5)).unwrap();
    out.push(("local estimates", format_estimates(&est)));
    let centers = vec![vec![
        LonLat { lon: 0.0, lat: -6.0 },
        LonLat { lon: 12.0, lat: -6.0 },
        LonLat { lon: 0.0, lat: 6.0 },
        LonLat { lon: 12.0, lat: 6.0 },
        LonLat { lon: 6.0, lat: 0.0 },
    ]];
    let (best, table) = select_smoothing_cv(&est, &centers, &[800.0, 1500.0], &[0.0, 1e-2], 4, 5).unwrap();
    let field = smooth_field(&est, centers[0].clone(), best.ell_km, best.lambda).unwrap();
    out.push(("smoothing", format!("{table:?}\n{}", field.to_text())));

    let tree = tree_cfg.build(&locs, 6).unwrap();
    out.push(("partition", export_partition(&tree)));
    let st = StationaryMlePipeline { name: "stationary".into(), tree: tree_cfg.clone(), nu: 0.5, mle_subsample: 1500, max_evals: 40 };
    let fit = st.fit(&locs, &values, 7).unwrap();
    out.push(("stationary fit", format!("{:?}", fit)));

    let targets = scatter(300, &domain, &mut rng);
    let ns_spec = KernelSpec::nonstationary(Arc::new(field.clone()), true, false);
    let prior = Prior::build(Arc::new(tree), &ns_spec, None).unwrap();
    let post = posterior_pass(&prior, &values).unwrap();
    let pred = predict(&prior, &post, &targets, PredictOptions { include_nugget: true, joint: false }).unwrap();
    out.push(("predict", format!("{:?}", (pred.mean, pred.sd))));
    let run = run_loopback_cluster(prior.tree_arc(), &ns_spec, &values, &targets, 3, DistOptions::default()).unwrap();
    out.push(("distributed predict", format!("{:?}", (run.field.mean, run.field.sd))));

    let gap_cfg = GapExperimentConfig {
        gap_lon_deg: 3.0,
        gap_lat_deg: 3.0,
        min_obs_in_gap: 100,
        test_size: 100,
        replicates: 3,
        seed: 8,
        center_res_deg: 0.5,
    };
    let gaps = make_gaps(&locs, &mask, &domain, &gap_cfg).unwrap();
    let ns = FixedKernelPipeline::nonstationary("nonstationary", tree_cfg, Arc::new(field));
    let exp = run_gap_experiment(&locs, &values, gaps, &[&st, &ns], 9).unwrap();
    out.push(("gap experiment", format!("{}{}{}", exp.scores_text(0), exp.scores_text(1), exp.summary_text().unwrap())));
    out
}

fn determinism() -> Verdict {
    let in_pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(stage_outputs)
    };
    let max_threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).max(8);
    let serial = in_pool(1);
    let parallel = in_pool(max_threads);
    let again = in_pool(max_threads);
    let differing: Vec<&str> = serial
        .iter()
        .zip(&parallel)
        .zip(&again)
        .filter(|((a, b), c)| a.1 != b.1 || a.1 != c.1)
        .map(|((a, _), _)| a.0)
        .collect();
    verdict(
        differing.is_empty(),
        format!("{} stages compared across 1 and {max_threads} threads; differing: {differing:?}", serial.len()),
    )
}

fn main() {
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    let checks: [(&str, fn() -> Verdict); 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("exactness limit", exactness_limit),
        ("nonstationary covariance validity", covariance_validity),
        ("scoring correctness", scoring_correctness),
        ("distributed equals serial", distributed_equals_serial),
        ("nonstationary beats stationary on gaps", table_direction),
        ("local-fit recovery", local_fit_recovery),
        ("calibration", calibration),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let start = Instant::now();
        let v = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        println!("{} {name}: {} [{secs:.1} s]", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += !v.pass as usize;
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
