use super::*;
use crate::covariance::{KernelSpec, StationaryMaternParams};
use crate::geo::GeoBox;
use crate::partition::{kd_bisect, KnotRule};
use proptest::prelude::*;
use rand::Rng;

fn scatter(n: usize, bx: &GeoBox, seed: u64) -> Vec<LonLat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| LonLat {
            lon: bx.lon_min() + rng.random::<f64>() * bx.lon_span(),
            lat: bx.lat_min + rng.random::<f64>() * bx.lat_span(),
        })
        .collect()
}

fn domain() -> GeoBox {
    GeoBox::new(-10.0, 10.0, -10.0, 10.0).unwrap()
}

fn spec(tau2: f64) -> KernelSpec {
    KernelSpec::stationary(StationaryMaternParams::exponential(2.0, 600.0, tau2).unwrap(), false).unwrap()
}

fn noise_field(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Unwhitened recursion on explicit inverses, independent of the basis code:
/// `w_j(s, t) = w_{j-1}(s, t) - w_{j-1}(s, Q) w_{j-1}(Q, Q)⁻¹ w_{j-1}(Q, t)`.
fn oracle_implied(tree: &RegionTree, spec: &KernelSpec, rows: &[LonLat], cols: &[LonLat]) -> DMatrix<f64> {
    let w = |chain: &[RegionId], a: &[LonLat], b: &[LonLat]| -> DMatrix<f64> {
        fn rec(tree: &RegionTree, spec: &KernelSpec, chain: &[RegionId], a: &[LonLat], b: &[LonLat]) -> DMatrix<f64> {
            let base = cov_latent(spec, a, b);
            match chain.split_last() {
                None => base,
                Some((last, up)) => {
                    let q = &tree.region(*last).knots;
                    if q.is_empty() {
                        return rec(tree, spec, up, a, b);
                    }
                    let waq = rec(tree, spec, up, a, q);
                    let wqq = rec(tree, spec, up, q, q);
                    let wqb = rec(tree, spec, up, q, b);
                    rec(tree, spec, up, a, b) - waq * wqq.try_inverse().unwrap() * wqb
                }
            }
        }
        rec(tree, spec, chain, a, b)
    };
    let mut out = DMatrix::zeros(rows.len(), cols.len());
    for (i, s) in rows.iter().enumerate() {
        for (j, t) in cols.iter().enumerate() {
            let ls = tree.route(*s).unwrap();
            let lt = tree.route(*t).unwrap();
            let cs = tree.ancestors(ls);
            let ct = tree.ancestors(lt);
            let common = common_prefix(&cs, &ct);
            let mut c = 0.0;
            for k in 0..common {
                let q = &tree.region(cs[k]).knots;
                if q.is_empty() {
                    continue;
                }
                let up = &cs[..k];
                let a = w(up, &[*s], q);
                let b = w(up, q, &[*t]);
                c += (a * w(up, q, q).try_inverse().unwrap() * b)[(0, 0)];
            }
            if ls == lt {
                c += w(&cs, &[*s], &[*t])[(0, 0)];
            }
            out[(i, j)] = c;
        }
    }
    out
}

fn cov_latent(spec: &KernelSpec, a: &[LonLat], b: &[LonLat]) -> DMatrix<f64> {
    spec.latent_matrix(&spec.sites(a).unwrap(), &spec.sites(b).unwrap())
}

fn tree_for(obs: &[LonLat], depth: usize, r: usize, rule: KnotRule) -> Arc<RegionTree> {
    Arc::new(kd_bisect(obs, domain(), depth, r, rule, 11).unwrap())
}

/// Dense posterior under the implied covariance.
fn dense_mra(prior: &Prior, obs: &[LonLat], y: &[f64], targets: &[LonLat], nugget_at_targets: bool) -> (DVector<f64>, DMatrix<f64>, f64) {
    let spec = prior.spec();
    let mut k_oo = prior.implied_cov_matrix(obs, obs).unwrap();
    for (i, s) in spec.sites(obs).unwrap().iter().enumerate() {
        k_oo[(i, i)] += spec.nugget(s);
    }
    let k_to = prior.implied_cov_matrix(targets, obs).unwrap();
    let mut k_tt = prior.implied_cov_matrix(targets, targets).unwrap();
    if nugget_at_targets {
        for (i, s) in spec.sites(targets).unwrap().iter().enumerate() {
            k_tt[(i, i)] += spec.nugget(s);
        }
    }
    let yv = DVector::from_column_slice(y);
    let (m, c) = dense_conditional(&k_oo, &yv, &k_to, &k_tt).unwrap();
    let ll = dense_log_likelihood(&k_oo, &yv).unwrap();
    (m, c, ll)
}

fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol * (1.0 + b.abs()), "{what}: {a} vs {b}");
}

#[test]
fn single_level_is_exact_kriging() {
    let obs = scatter(120, &domain(), 1);
    let targets = scatter(15, &domain(), 2);
    let y = noise_field(obs.len(), 3);
    let sp = spec(0.1);
    let tree = tree_for(&obs, 1, 0, KnotRule::Lattice);
    let prior = Prior::build(tree, &sp, None).unwrap();
    let post = posterior_pass(&prior, &y).unwrap();
    let pred = predict(&prior, &post, &targets, PredictOptions::default()).unwrap();
    let (m, c) = dense_gp_oracle(&obs, &y, &targets, &sp).unwrap();
    for i in 0..targets.len() {
        assert_close(pred.mean[i], m[i], 1e-9, "mean");
        assert_close(pred.sd[i], c[(i, i)].sqrt(), 1e-8, "sd");
    }
    let mut k = cov_latent(&sp, &obs, &obs);
    for i in 0..obs.len() {
        k[(i, i)] += 0.1;
    }
    let ll = dense_log_likelihood(&k, &DVector::from_column_slice(&y)).unwrap();
    assert_close(post.log_likelihood.unwrap(), ll, 1e-10, "loglik");
}

#[test]
fn implied_covariance_matches_recursion() {
    let obs = scatter(300, &domain(), 4);
    for (depth, rule) in [(2, KnotRule::Lattice), (3, KnotRule::FromObservations)] {
        let sp = spec(0.0);
        let tree = tree_for(&obs, depth, 16, rule);
        let prior = Prior::build(tree.clone(), &sp, None).unwrap();
        let pts: Vec<LonLat> = scatter(25, &domain(), 5).into_iter().chain(obs[..10].iter().copied()).collect();
        let got = prior.implied_cov_matrix(&pts, &pts).unwrap();
        let want = oracle_implied(&tree, &sp, &pts, &pts);
        for (a, b) in got.iter().zip(want.iter()) {
            assert_close(*a, *b, 1e-8, "implied covariance");
        }
        for (i, p) in pts.iter().enumerate() {
            assert_close(prior.implied_cov(*p, *p).unwrap(), 2.0, 1e-10, "diagonal");
            assert_close(got[(i, i)], 2.0, 1e-10, "matrix diagonal");
        }
        assert!(crate::linalg::min_eigenvalue(&got) > -1e-8);
    }
}

#[test]
fn posterior_matches_dense_implied_model() {
    let obs = scatter(400, &domain(), 6);
    let y = noise_field(obs.len(), 7);
    let targets: Vec<LonLat> = scatter(30, &domain(), 8).into_iter().chain(obs[..5].iter().copied()).collect();
    for tau2 in [1e-3, 0.3] {
        let sp = spec(tau2).with_nugget(tau2 > 0.01);
        let tree = tree_for(&obs, 3, 20, KnotRule::FromObservations);
        let prior = Prior::build(tree, &sp, None).unwrap();
        let post = posterior_pass(&prior, &y).unwrap();
        let opts = PredictOptions { include_nugget: tau2 > 0.01, joint: true };
        let pred = predict(&prior, &post, &targets, opts).unwrap();
        let (m, c, ll) = dense_mra(&prior, &obs, &y, &targets, opts.include_nugget);
        assert_close(post.log_likelihood.unwrap(), ll, 1e-8, "loglik");
        let joint = pred.joint.as_ref().unwrap();
        for i in 0..targets.len() {
            assert_close(pred.mean[i], m[i], 1e-7, "mean");
            assert_close(pred.sd[i], c[(i, i)].max(0.0).sqrt(), 1e-5, "sd");
            for j in 0..targets.len() {
                assert!((joint[(i, j)] - c[(i, j)]).abs() < 1e-7, "joint {i},{j}");
            }
        }
    }
}

#[test]
fn noise_free_interpolates_observations() {
    let obs = scatter(200, &domain(), 9);
    let y = noise_field(obs.len(), 10);
    let sp = spec(0.0);
    let prior = Prior::build(tree_for(&obs, 3, 12, KnotRule::FromObservations), &sp, None).unwrap();
    let post = posterior_pass(&prior, &y).unwrap();
    let pred = predict(&prior, &post, &obs[..20], PredictOptions::default()).unwrap();
    for i in 0..20 {
        assert!((pred.mean[i] - y[i]).abs() < 1e-6, "{} vs {}", pred.mean[i], y[i]);
        assert!(pred.sd[i] < 1e-4);
    }
}

#[test]
fn without_data_prediction_is_the_prior() {
    let obs = scatter(100, &domain(), 12);
    let tree = tree_for(&obs, 2, 9, KnotRule::Lattice);
    let mut empty = (*tree).clone();
    empty.attach_observations(&[]);
    let prior = Prior::build(Arc::new(empty), &spec(0.2), None).unwrap();
    let post = posterior_pass(&prior, &[]).unwrap();
    assert_eq!(post.log_likelihood.unwrap(), 0.0);
    let targets = scatter(10, &domain(), 13);
    let pred = predict(&prior, &post, &targets, PredictOptions::default()).unwrap();
    for i in 0..10 {
        assert!(pred.mean[i].abs() < 1e-12);
        assert_close(pred.sd[i], 2f64.sqrt(), 1e-9, "prior sd");
    }
}

#[test]
fn huge_noise_recovers_the_prior() {
    let obs = scatter(150, &domain(), 14);
    let y = noise_field(obs.len(), 15);
    let prior = Prior::build(tree_for(&obs, 2, 9, KnotRule::Lattice), &spec(1e9), None).unwrap();
    let post = posterior_pass(&prior, &y).unwrap();
    let pred = predict(&prior, &post, &scatter(5, &domain(), 16), PredictOptions::default()).unwrap();
    for i in 0..5 {
        assert!(pred.mean[i].abs() < 1e-5);
        assert_close(pred.sd[i], 2f64.sqrt(), 1e-6, "sd");
    }
}

#[test]
fn three_point_kriging_by_hand() {
    // Three noise-free points on the equator, 100 km apart; exponential kernel.
    let step = 100.0 / EARTH_KM_PER_DEG;
    let obs = vec![
        LonLat { lon: 0.0, lat: 0.0 },
        LonLat { lon: step, lat: 0.0 },
        LonLat { lon: 2.0 * step, lat: 0.0 },
    ];
    let y = [1.0, -0.5, 2.0];
    let sp = KernelSpec::stationary(StationaryMaternParams::exponential(1.0, 200.0, 0.0).unwrap(), false).unwrap();
    let tree = Arc::new(kd_bisect(&obs, GeoBox::new(-1.0, 3.0, -1.0, 1.0).unwrap(), 1, 0, KnotRule::Lattice, 0).unwrap());
    let prior = Prior::build(tree, &sp, None).unwrap();
    let post = posterior_pass(&prior, &y).unwrap();
    let target = LonLat { lon: 0.5 * step, lat: 0.0 };
    let pred = predict(&prior, &post, &[target], PredictOptions::default()).unwrap();
    // The exponential kernel in 1D is Markov: the predictor between two
    // neighbours only uses those two, with weights from the 2x2 system.
    let chord = |deg: f64| 2.0 * crate::geo::EARTH_RADIUS_KM * (deg.to_radians() / 2.0).sin();
    let rho = |deg: f64| (-chord(deg) / 200.0).exp();
    let (a, b, c) = (rho(0.5 * step), rho(0.5 * step), rho(step));
    let det = 1.0 - c * c;
    let w0 = (a - c * b) / det;
    let w1 = (b - c * a) / det;
    let mean = w0 * y[0] + w1 * y[1];
    let var = 1.0 - (w0 * a + w1 * b);
    assert_close(pred.mean[0], mean, 1e-6, "mean");
    assert_close(pred.sd[0], var.sqrt(), 1e-5, "sd");
}

const EARTH_KM_PER_DEG: f64 = crate::geo::EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;

#[test]
fn nested_knots_shrink_the_remainder() {
    let obs = scatter(500, &domain(), 17);
    let sp = spec(0.0);
    let coarse = Prior::build(tree_for(&obs, 2, 25, KnotRule::FromObservations), &sp, None).unwrap();
    let fine = Prior::build(tree_for(&obs, 4, 25, KnotRule::FromObservations), &sp, None).unwrap();
    let pts = scatter(40, &domain(), 18);
    let mean = |p: &Prior| pts.iter().map(|x| p.remainder_variance(*x).unwrap()).sum::<f64>() / pts.len() as f64;
    let (rc, rf) = (mean(&coarse), mean(&fine));
    assert!(rf < rc, "remainder {rf} not below {rc}");
    for x in &pts {
        let v = fine.remainder_variance(*x).unwrap();
        assert!((-1e-9..=2.0 + 1e-9).contains(&v));
    }
}

#[test]
fn different_subtrees_are_independent_without_root_knots() {
    let obs = scatter(200, &domain(), 19);
    let mut tree = kd_bisect(&obs, domain(), 3, 10, KnotRule::Lattice, 1).unwrap();
    tree.region_mut(RegionId::ROOT).knots.clear();
    let tree = Arc::new(tree);
    let prior = Prior::build(tree.clone(), &spec(0.0), None).unwrap();
    let left: Vec<LonLat> = obs.iter().copied().filter(|p| tree.route_chain(*p).unwrap()[1].index == 0).take(3).collect();
    let right: Vec<LonLat> = obs.iter().copied().filter(|p| tree.route_chain(*p).unwrap()[1].index == 1).take(3).collect();
    let c = prior.implied_cov_matrix(&left, &right).unwrap();
    assert!(c.iter().all(|v| *v == 0.0));
}

#[test]
fn basis_has_one_block_per_ancestor() {
    // Four levels, binary splits, one knot per region.
    let obs = scatter(64, &domain(), 20);
    let tree = tree_for(&obs, 4, 1, KnotRule::Lattice);
    assert_eq!(tree.n_regions(), 15);
    let prior = Prior::build(tree.clone(), &spec(0.05), None).unwrap();
    let b = prior.basis(obs[0]).unwrap();
    assert_eq!(b.len(), 3);
    assert!(b.iter().all(|(_, v)| v.len() == 1));
    let pts = &obs[..12];
    let got = prior.implied_cov_matrix(pts, pts).unwrap();
    let want = oracle_implied(&tree, prior.spec(), pts, pts);
    for (a, w) in got.iter().zip(want.iter()) {
        assert_close(*a, *w, 1e-9, "implied");
    }
}

#[test]
fn partial_prior_matches_full() {
    let obs = scatter(200, &domain(), 21);
    let tree = tree_for(&obs, 3, 8, KnotRule::FromObservations);
    let full = Prior::build(tree.clone(), &spec(0.1), None).unwrap();
    let leaf = tree.leaves_dfs()[2];
    let part = Prior::build(tree.clone(), &spec(0.1), Some(&[leaf])).unwrap();
    assert!(part.get(tree.leaves_dfs()[0]).is_none());
    assert_eq!(part.get(leaf).unwrap().basis, full.get(leaf).unwrap().basis);
    let mut e = Encoder::new();
    full.encode_region(leaf, &mut e).unwrap();
    let buf = e.finish();
    let mut other = Prior::build(tree.clone(), &spec(0.1), Some(&[])).unwrap();
    other.decode_region(&mut Decoder::new(&buf)).unwrap();
    assert_eq!(other.get(leaf).unwrap().z, full.get(leaf).unwrap().z);
}

#[test]
fn simulation_has_the_implied_variance() {
    let obs = scatter(60, &domain(), 22);
    let tree = tree_for(&obs, 3, 6, KnotRule::Lattice);
    let prior = Prior::build(tree, &spec(0.5), None).unwrap();
    let reps = 3000;
    let mut sum2 = vec![0.0; obs.len()];
    for s in 0..reps {
        for (a, y) in sum2.iter_mut().zip(prior.simulate(obs.len(), s).unwrap()) {
            *a += y * y;
        }
    }
    let avg = sum2.iter().sum::<f64>() / (reps as f64 * obs.len() as f64);
    assert!((avg - 2.5).abs() < 0.1, "empirical variance {avg}");
}

#[test]
fn profiled_mle_improves_likelihood() {
    let obs = scatter(250, &domain(), 23);
    let truth = StationaryMaternParams::exponential(1.5, 400.0, 0.2).unwrap();
    let tree = tree_for(&obs, 3, 16, KnotRule::FromObservations);
    let prior = Prior::build(tree.clone(), &KernelSpec::stationary(truth, false).unwrap(), None).unwrap();
    let y = prior.simulate(obs.len(), 5).unwrap();
    let init = StationaryMaternParams::exponential(1.0, 1000.0, 0.5).unwrap();
    let fit = stationary_mle_mra(&tree, &y, init, MleOptions::default()).unwrap();
    assert!(fit.log_likelihood > fit.initial_log_likelihood);
    let direct = mra_log_likelihood(&tree, &y, &fit.params).unwrap();
    assert_close(fit.log_likelihood, direct, 1e-8, "profiled loglik");
    assert!(fit.params.beta > 100.0 && fit.params.beta < 2000.0);
}

#[test]
fn summary_round_trip() {
    let s = Summary {
        r: DMatrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64),
        omega: DVector::from_vec(vec![1.0, 2.0, 3.0]),
        logdet: -4.5,
        quad: 7.0,
        n: 12,
    };
    let mut e = Encoder::new();
    s.encode(&mut e);
    let buf = e.finish();
    let mut d = Decoder::new(&buf);
    assert_eq!(Summary::decode(&mut d).unwrap(), s);
    d.expect_done().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn observation_order_does_not_matter(seed in 0u64..1000) {
        let obs = scatter(80, &domain(), seed);
        let y = noise_field(80, seed + 1);
        let mut perm: Vec<usize> = (0..80).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        for i in (1..80).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let obs2: Vec<LonLat> = perm.iter().map(|&i| obs[i]).collect();
        let y2: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let sp = spec(0.1);
        let t = LonLat { lon: 1.0, lat: 2.0 };
        let run = |o: &[LonLat], v: &[f64]| {
            let tree = Arc::new(kd_bisect(o, domain(), 3, 6, KnotRule::Lattice, 0).unwrap());
            let prior = Prior::build(tree, &sp, None).unwrap();
            let post = posterior_pass(&prior, v).unwrap();
            let p = predict(&prior, &post, &[t], PredictOptions::default()).unwrap();
            (p.mean[0], p.sd[0], post.log_likelihood.unwrap())
        };
        let (m1, s1, l1) = run(&obs, &y);
        let (m2, s2, l2) = run(&obs2, &y2);
        prop_assert!((m1 - m2).abs() < 1e-9 && (s1 - s2).abs() < 1e-9 && (l1 - l2).abs() < 1e-8);
    }

    #[test]
    fn implied_matrix_is_symmetric_psd(seed in 0u64..1000, depth in 1usize..4) {
        let obs = scatter(60, &domain(), seed);
        let prior = Prior::build(tree_for(&obs, depth, 5, KnotRule::FromObservations), &spec(0.0), None).unwrap();
        let pts = scatter(30, &domain(), seed + 7);
        let c = prior.implied_cov_matrix(&pts, &pts).unwrap();
        prop_assert!((&c - c.transpose()).amax() < 1e-12);
        prop_assert!(crate::linalg::min_eigenvalue(&c) > -1e-8);
    }
}

