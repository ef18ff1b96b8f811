//! Local stationary likelihood fits on a lattice and their smoothing into a
//! spatially varying parameter field on compactly supported Wendland bases.

use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::covariance::{matern_correlation, wendland, LocalParams, ParamProvider};
use crate::error::{Error, Result};
use crate::geo::{make_grid, GeoBox, GeoIndex, LonLat, OceanMask, Point3};
use crate::linalg::Cholesky;
use crate::optim::{multistart, NelderMeadOptions};
use crate::seeds;

/// Smallest sample a local likelihood is fitted on.
pub const MIN_LOCAL_SAMPLE: usize = 30;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Lattice and sampling settings for the local fits.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFitConfig {
    pub grid_step_deg: f64,
    /// Half-width of the short-range box around a lattice point.
    pub b1_half_deg: f64,
    /// Half-width of the long-range box; strictly larger than `b1_half_deg`.
    pub b2_half_deg: f64,
    pub n_short: usize,
    pub n_long: usize,
    pub min_obs_b1: usize,
    pub seed: u64,
}

impl Default for LocalFitConfig {
    fn default() -> Self {
        LocalFitConfig {
            grid_step_deg: 2.0,
            b1_half_deg: 2.0,
            b2_half_deg: 20.0,
            n_short: 800,
            n_long: 100,
            min_obs_b1: 800,
            seed: 0,
        }
    }
}

impl LocalFitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_step_deg > 0.0 && self.b1_half_deg > 0.0) {
            return Err(Error::invalid("grid step and box half-widths must be positive"));
        }
        if !(self.b2_half_deg > self.b1_half_deg) {
            return Err(Error::invalid(format!(
                "long-range box half-width {} must exceed the short-range one {}",
                self.b2_half_deg, self.b1_half_deg
            )));
        }
        if self.n_short == 0 || self.n_long == 0 || self.min_obs_b1 == 0 {
            return Err(Error::invalid("sample sizes and the minimum box count must be positive"));
        }
        Ok(())
    }

    pub fn short_box(&self, c: LonLat) -> GeoBox {
        GeoBox::centered(c, self.b1_half_deg, self.b1_half_deg)
    }

    pub fn long_box(&self, c: LonLat) -> GeoBox {
        GeoBox::centered(c, self.b2_half_deg, self.b2_half_deg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FitStatus {
    Ok,
    /// Too few observations near the lattice point; carries no numbers.
    Skipped,
    /// The optimiser did not converge or the sample was unusable.
    Failed,
}

impl fmt::Display for FitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitStatus::Ok => "ok",
            FitStatus::Skipped => "skipped",
            FitStatus::Failed => "failed",
        })
    }
}

impl FromStr for FitStatus {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ok" => Ok(FitStatus::Ok),
            "skipped" => Ok(FitStatus::Skipped),
            "failed" => Ok(FitStatus::Failed),
            other => Err(format!("unknown status `{other}`")),
        }
    }
}

/// Result of the local fit at one lattice point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalEstimate {
    pub center: LonLat,
    pub sigma2: f64,
    pub beta: f64,
    pub nu: f64,
    pub tau2: f64,
    pub loglik: f64,
    pub n_short: usize,
    pub n_long: usize,
    pub status: FitStatus,
}

impl LocalEstimate {
    fn without_fit(center: LonLat, n_short: usize, n_long: usize, status: FitStatus) -> Self {
        LocalEstimate {
            center,
            sigma2: f64::NAN,
            beta: f64::NAN,
            nu: f64::NAN,
            tau2: f64::NAN,
            loglik: f64::NAN,
            n_short,
            n_long,
            status,
        }
    }

    pub fn is_usable(&self) -> bool {
        self.status == FitStatus::Ok
    }
}

/// Indices of the observations drawn around one lattice point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalDesign {
    pub short: Vec<usize>,
    pub long: Vec<usize>,
    /// Observations available in the short-range box.
    pub available_short: usize,
}

impl LocalDesign {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.short.iter().chain(&self.long).copied()
    }
}

fn draw(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() <= k {
        return pool.to_vec();
    }
    let mut chosen: Vec<usize> = sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    chosen.sort_unstable();
    chosen
}

/// Uniform draws without replacement: up to `n_short` from the short-range
/// box and up to `n_long` from the long-range box minus the short-range box.
pub fn sample_local_design(center: LonLat, points: &[LonLat], index: &GeoIndex, cfg: &LocalFitConfig, seed: u64) -> LocalDesign {
    let b1 = cfg.short_box(center);
    let in_b1 = index.query(points, &b1);
    let annulus: Vec<usize> = index
        .query(points, &cfg.long_box(center))
        .into_iter()
        .filter(|&i| !b1.contains(points[i]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let short = draw(&in_b1, cfg.n_short, &mut rng);
    let long = draw(&annulus, cfg.n_long, &mut rng);
    LocalDesign { short, long, available_short: in_b1.len() }
}

/// Maximum-likelihood Matérn parameters of one local sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalFit {
    pub sigma2: f64,
    pub beta: f64,
    pub nu: f64,
    pub tau2: f64,
    pub loglik: f64,
    pub converged: bool,
}

/// Search bounds on the log scale.
const LN_BETA_MAX: f64 = 10.2;
const LN_KAPPA_RANGE: (f64, f64) = (-13.8, 6.9);
const LN_NU_RANGE: (f64, f64) = (-3.0, 1.4);

/// Profile likelihood of a zero-mean stationary Matérn sample. σ² is
/// profiled out and the search runs over (log β, log τ²/σ², [log ν]) from
/// three starts: the moment start with τ²/σ² = 1/4 and β = `start_beta_km`,
/// then two random perturbations of it. The range is bounded below by the
/// median nearest-neighbour distance of the sample.
pub fn fit_local_matern(locs: &[LonLat], values: &[f64], fixed_nu: Option<f64>, start_beta_km: f64, seed: u64) -> Result<LocalFit> {
    let n = locs.len();
    if n != values.len() {
        return Err(Error::invalid("location and value counts differ"));
    }
    if n < MIN_LOCAL_SAMPLE {
        return Err(Error::invalid(format!("local sample of {n} is below the minimum {MIN_LOCAL_SAMPLE}")));
    }
    let mut seen = HashSet::with_capacity(n);
    for p in locs {
        if !seen.insert((p.lon.to_bits(), p.lat.to_bits())) {
            return Err(Error::invalid(format!("duplicate location {p} in local sample")));
        }
    }
    if let Some(nu) = fixed_nu {
        if !(nu > 0.0) {
            return Err(Error::domain(format!("smoothness must be positive, got {nu}")));
        }
    }
    let pts: Vec<Point3> = locs.iter().map(|p| p.to_earth()).collect();
    let mut dist = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in j + 1..n {
            let d = pts[i].dist(&pts[j]);
            dist[(i, j)] = d;
            dist[(j, i)] = d;
        }
    }
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| dist[(i, j)]).fold(f64::INFINITY, f64::min))
        .collect();
    nearest.sort_by(f64::total_cmp);
    let beta_range = (nearest[n / 2].ln(), LN_BETA_MAX);
    let y = DVector::from_column_slice(values);
    let nf = n as f64;
    // (σ² estimate, log det of the unit-sill matrix) at a point in the search space
    let profile = |x: &[f64]| -> Option<(f64, f64, f64, f64, f64)> {
        let in_range = |v: f64, r: (f64, f64)| v >= r.0 && v <= r.1;
        if !in_range(x[0], beta_range) || !in_range(x[1], LN_KAPPA_RANGE) {
            return None;
        }
        let nu = match fixed_nu {
            Some(nu) => nu,
            None if in_range(x[2], LN_NU_RANGE) => x[2].exp(),
            None => return None,
        };
        let (beta, kappa) = (x[0].exp(), x[1].exp());
        let mut r = DMatrix::zeros(n, n);
        for j in 0..n {
            r[(j, j)] = 1.0 + kappa;
            for i in j + 1..n {
                let c = matern_correlation(dist[(i, j)] / beta, nu);
                r[(i, j)] = c;
                r[(j, i)] = c;
            }
        }
        let chol = Cholesky::exact(&r)?;
        let z = chol.solve_l_vec(&y);
        let sigma2 = z.norm_squared() / nf;
        (sigma2 > 0.0).then_some((sigma2, chol.log_det(), beta, kappa, nu))
    };
    let objective = |x: &[f64]| match profile(x) {
        Some((sigma2, logdet, ..)) => 0.5 * (nf * sigma2.ln() + logdet),
        None => f64::INFINITY,
    };
    let mut x0 = vec![start_beta_km.ln().clamp(beta_range.0, beta_range.1), 0.25f64.ln()];
    if fixed_nu.is_none() {
        x0.push(0.5f64.ln());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![x0.clone()];
    for _ in 0..2 {
        starts.push(x0.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect());
    }
    let opts = NelderMeadOptions { max_evals: 400, f_tol: 1e-6, x_tol: 1e-3, initial_step: 0.5 };
    let best = multistart(objective, &starts, &opts).expect("at least one start");
    let (sigma2, logdet, beta, kappa, nu) = profile(&best.x)
        .ok_or_else(|| Error::Fit("no start gave a finite local likelihood".into()))?;
    Ok(LocalFit {
        sigma2,
        beta,
        nu,
        tau2: kappa * sigma2,
        loglik: -0.5 * (nf * (LN_2PI + sigma2.ln() + 1.0) + logdet),
        converged: best.converged,
    })
}

/// Fits every ocean lattice point of `domain`. Each point draws from its own
/// random stream, so the output does not depend on scheduling.
pub fn local_estimate_grid(
    points: &[LonLat],
    values: &[f64],
    cfg: &LocalFitConfig,
    mask: &OceanMask,
    domain: &GeoBox,
    fixed_nu: Option<f64>,
) -> Result<Vec<LocalEstimate>> {
    cfg.validate()?;
    if points.len() != values.len() {
        return Err(Error::invalid("location and value counts differ"));
    }
    let grid = make_grid(domain, cfg.grid_step_deg, mask)?;
    let index = GeoIndex::new(points, cfg.b1_half_deg.clamp(0.25, 5.0));
    Ok(grid
        .par_iter()
        .enumerate()
        .map(|(g, &c)| estimate_at(c, g as u64, points, values, &index, cfg, fixed_nu))
        .collect())
}

/// Seed of the random stream used at lattice point `g`.
pub fn grid_point_seed(cfg: &LocalFitConfig, g: u64) -> u64 {
    seeds::derive(cfg.seed, g)
}

fn estimate_at(
    c: LonLat,
    g: u64,
    points: &[LonLat],
    values: &[f64],
    index: &GeoIndex,
    cfg: &LocalFitConfig,
    fixed_nu: Option<f64>,
) -> LocalEstimate {
    let seed = grid_point_seed(cfg, g);
    let design = sample_local_design(c, points, index, cfg, seed);
    let (ns, nl) = (design.short.len(), design.long.len());
    if design.available_short < cfg.min_obs_b1 || ns + nl < MIN_LOCAL_SAMPLE {
        return LocalEstimate::without_fit(c, ns, nl, FitStatus::Skipped);
    }
    let locs: Vec<LonLat> = design.indices().map(|i| points[i]).collect();
    let vals: Vec<f64> = design.indices().map(|i| values[i]).collect();
    let start_beta = cfg.short_box(c).diagonal_km() / 5.0;
    match fit_local_matern(&locs, &vals, fixed_nu, start_beta, seeds::derive(seed, 1)) {
        Ok(fit) => LocalEstimate {
            center: c,
            sigma2: fit.sigma2,
            beta: fit.beta,
            nu: fit.nu,
            tau2: fit.tau2,
            loglik: fit.loglik,
            n_short: ns,
            n_long: nl,
            status: if fit.converged { FitStatus::Ok } else { FitStatus::Failed },
        },
        Err(e) => {
            log::warn!("local fit at {c} failed: {e}");
            LocalEstimate::without_fit(c, ns, nl, FitStatus::Failed)
        }
    }
}

/// Both passes of the lattice fit: free smoothness first, then all other
/// parameters refitted with the smoothness held at `final_nu`.
#[derive(Clone, Debug)]
pub struct TwoPassEstimates {
    pub free_nu: Vec<LocalEstimate>,
    pub fixed_nu: Vec<LocalEstimate>,
}

impl TwoPassEstimates {
    /// Quartiles of the free-pass smoothness estimates.
    pub fn nu_quartiles(&self) -> Option<[f64; 3]> {
        let mut v: Vec<f64> = self.free_nu.iter().filter(|e| e.is_usable()).map(|e| e.nu).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
        Some([q(0.25), q(0.5), q(0.75)])
    }
}

pub fn estimate_two_pass(
    points: &[LonLat],
    values: &[f64],
    cfg: &LocalFitConfig,
    mask: &OceanMask,
    domain: &GeoBox,
    final_nu: f64,
) -> Result<TwoPassEstimates> {
    let free_nu = local_estimate_grid(points, values, cfg, mask, domain, None)?;
    let fixed_nu = local_estimate_grid(points, values, cfg, mask, domain, Some(final_nu))?;
    Ok(TwoPassEstimates { free_nu, fixed_nu })
}

pub const ESTIMATE_HEADER: &str = "lon lat sigma2 beta nu tau2 loglik n_short n_long status";

pub fn format_estimates(est: &[LocalEstimate]) -> String {
    let mut s = String::with_capacity(64 * (est.len() + 1));
    s.push_str(ESTIMATE_HEADER);
    s.push('\n');
    for e in est {
        let _ = writeln!(
            s,
            "{} {} {:e} {:e} {:e} {:e} {:e} {} {} {}",
            e.center.lon, e.center.lat, e.sigma2, e.beta, e.nu, e.tau2, e.loglik, e.n_short, e.n_long, e.status
        );
    }
    s
}

pub fn parse_estimates(text: &str, path: &Path) -> Result<Vec<LocalEstimate>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == ESTIMATE_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 10 {
            return Err(Error::parse(path, ln, format!("expected 10 columns, found {}", f.len())));
        }
        let num = |k: usize| -> Result<f64> {
            f[k].parse::<f64>().map_err(|_| Error::parse(path, ln, format!("bad number `{}`", f[k])))
        };
        let count = |k: usize| -> Result<usize> {
            f[k].parse::<usize>().map_err(|_| Error::parse(path, ln, format!("bad count `{}`", f[k])))
        };
        out.push(LocalEstimate {
            center: LonLat { lon: num(0)?, lat: num(1)? },
            sigma2: num(2)?,
            beta: num(3)?,
            nu: num(4)?,
            tau2: num(5)?,
            loglik: num(6)?,
            n_short: count(7)?,
            n_long: count(8)?,
            status: f[9].parse().map_err(|e: String| Error::parse(path, ln, e))?,
        });
    }
    Ok(out)
}

pub fn read_estimates(path: &Path) -> Result<Vec<LocalEstimate>> {
    parse_estimates(&std::fs::read_to_string(path)?, path)
}

/// Lasso solution on the original feature scale.
#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

const LASSO_TOL: f64 = 1e-8;
const LASSO_MAX_SWEEPS: usize = 20_000;

struct Standardized {
    x: DMatrix<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    y_mean: f64,
}

fn standardize(x: &DMatrix<f64>, y: &[f64]) -> Standardized {
    let n = x.nrows() as f64;
    let mut xs = x.clone();
    let mut mean = vec![0.0; x.ncols()];
    let mut scale = vec![0.0; x.ncols()];
    for j in 0..x.ncols() {
        let m = x.column(j).sum() / n;
        let sd = (x.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        mean[j] = m;
        scale[j] = sd;
        for v in xs.column_mut(j).iter_mut() {
            *v = if sd > 0.0 { (*v - m) / sd } else { 0.0 };
        }
    }
    Standardized { x: xs, mean, scale, y_mean: y.iter().sum::<f64>() / n }
}

/// Cyclic coordinate descent on `(1/2n)‖y − b₀ − Xb‖² + λ‖b‖₁` with
/// standardized columns; constant columns get zero weight. Stops when no
/// standardized coefficient moves by more than 1e-8 in a sweep.
pub fn lasso(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<LassoFit> {
    lasso_path(x, y, &[lambda]).map(|mut v| v.remove(0))
}

/// Lasso fits for each λ, warm-started in decreasing λ order; results are
/// returned in input order. λ = 0 is solved directly as minimum-norm least
/// squares.
pub fn lasso_path(x: &DMatrix<f64>, y: &[f64], lambdas: &[f64]) -> Result<Vec<LassoFit>> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::invalid("lasso needs a nonempty response matching the design rows"));
    }
    if lambdas.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::domain("lasso penalty must be non-negative"));
    }
    let st = standardize(x, y);
    let n = x.nrows() as f64;
    let p = x.ncols();
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - st.y_mean));
    // coordinate descent on the Gram form: grad_j = (Xᵀy)_j/n - Σ_k G_jk b_k
    let gram = st.x.tr_mul(&st.x) / n;
    let xty = st.x.tr_mul(&yc) / n;
    let to_fit = |b: &[f64], sweeps: usize, converged: bool| {
        let coef: Vec<f64> = (0..p).map(|j| if st.scale[j] > 0.0 { b[j] / st.scale[j] } else { 0.0 }).collect();
        let intercept = st.y_mean - coef.iter().zip(&st.mean).map(|(c, m)| c * m).sum::<f64>();
        LassoFit { intercept, coef, sweeps, converged }
    };
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    let mut b = vec![0.0; p];
    let mut grad = xty.clone();
    let mut out: Vec<Option<LassoFit>> = vec![None; lambdas.len()];
    for &li in &order {
        let lambda = lambdas[li];
        if lambda == 0.0 {
            let b0 = st
                .x
                .clone()
                .svd(true, true)
                .solve(&yc, 1e-12)
                .map_err(|e| Error::Fit(format!("least-squares solve failed: {e}")))?;
            out[li] = Some(to_fit(b0.as_slice(), 0, true));
            continue;
        }
        let mut sweeps = 0;
        let mut converged = false;
        let update = |j: usize, b: &mut [f64], grad: &mut DVector<f64>| -> f64 {
            let gjj = gram[(j, j)];
            if gjj == 0.0 {
                return 0.0;
            }
            let new = soft_threshold(grad[j] + gjj * b[j], lambda) / gjj;
            let delta = new - b[j];
            if delta != 0.0 {
                grad.axpy(-delta, &gram.column(j), 1.0);
                b[j] = new;
            }
            delta.abs()
        };
        // full sweeps alternate with sweeps over the nonzero set until a
        // full sweep moves nothing
        while sweeps < LASSO_MAX_SWEEPS {
            sweeps += 1;
            let full = (0..p).map(|j| update(j, &mut b, &mut grad)).fold(0.0, f64::max);
            if full < LASSO_TOL {
                converged = true;
                break;
            }
            let active: Vec<usize> = (0..p).filter(|&j| b[j] != 0.0).collect();
            while sweeps < LASSO_MAX_SWEEPS {
                sweeps += 1;
                let moved = active.iter().map(|&j| update(j, &mut b, &mut grad)).fold(0.0, f64::max);
                if moved < LASSO_TOL {
                    break;
                }
            }
        }
        if !converged {
            log::warn!("lasso with lambda {lambda} stopped after {sweeps} sweeps");
        }
        out[li] = Some(to_fit(&b, sweeps, converged));
    }
    Ok(out.into_iter().map(|f| f.expect("every lambda fitted")).collect())
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Log-scale expansion of one parameter: `intercept + Σ coef·WL(s; centre)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogExpansion {
    pub intercept: f64,
    /// Nonzero coefficients as (centre index, value), ascending by index.
    pub coef: Vec<(u32, f64)>,
}

impl LogExpansion {
    fn from_dense(fit: &LassoFit) -> Self {
        LogExpansion {
            intercept: fit.intercept,
            coef: fit
                .coef
                .iter()
                .enumerate()
                .filter(|(_, c)| **c != 0.0)
                .map(|(j, c)| (j as u32, *c))
                .collect(),
        }
    }

    pub fn nonzero(&self) -> usize {
        self.coef.len()
    }
}

/// Spatially varying covariance parameters, positive by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamField {
    pub centers: Vec<LonLat>,
    pub ell_km: f64,
    pub nu: f64,
    pub sigma2: LogExpansion,
    pub beta: LogExpansion,
    pub tau2: LogExpansion,
    center_points: Vec<Point3>,
}

impl ParamField {
    pub fn new(centers: Vec<LonLat>, ell_km: f64, nu: f64, sigma2: LogExpansion, beta: LogExpansion, tau2: LogExpansion) -> Result<Self> {
        if !(ell_km > 0.0) || !(nu > 0.0) {
            return Err(Error::domain("support length and smoothness must be positive"));
        }
        for e in [&sigma2, &beta, &tau2] {
            if e.coef.iter().any(|(j, _)| *j as usize >= centers.len()) {
                return Err(Error::invalid("coefficient index beyond the centre list"));
            }
            if !e.intercept.is_finite() || e.coef.iter().any(|(_, c)| !c.is_finite()) {
                return Err(Error::invalid("non-finite field coefficient"));
            }
        }
        let center_points = centers.iter().map(|c| c.to_earth()).collect();
        Ok(ParamField { centers, ell_km, nu, sigma2, beta, tau2, center_points })
    }

    /// Constant field `exp(intercepts)`.
    pub fn constant(log_sigma2: f64, log_beta: f64, log_tau2: f64, nu: f64) -> Result<Self> {
        let e = |v| LogExpansion { intercept: v, coef: Vec::new() };
        ParamField::new(Vec::new(), 1.0, nu, e(log_sigma2), e(log_beta), e(log_tau2))
    }

    fn expand(&self, e: &LogExpansion, s: Point3) -> f64 {
        let mut v = e.intercept;
        for &(j, c) in &e.coef {
            let w = wendland(s.dist(&self.center_points[j as usize]), self.ell_km);
            v += c * w;
        }
        v
    }

    /// θ(s) with the global smoothness attached.
    pub fn eval_theta(&self, s: LonLat) -> LocalParams {
        let p = s.to_earth();
        LocalParams {
            sigma2: self.expand(&self.sigma2, p).exp(),
            beta: self.expand(&self.beta, p).exp(),
            tau2: self.expand(&self.tau2, p).exp(),
            nu: self.nu,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("nsmra-paramfield 1\n");
        let _ = writeln!(s, "ell_km {:e}", self.ell_km);
        let _ = writeln!(s, "nu {:e}", self.nu);
        let _ = writeln!(s, "centers {}", self.centers.len());
        for c in &self.centers {
            let _ = writeln!(s, "{:e} {:e}", c.lon, c.lat);
        }
        for (name, e) in [("sigma2", &self.sigma2), ("beta", &self.beta), ("tau2", &self.tau2)] {
            let _ = writeln!(s, "param {name} {:e} {}", e.intercept, e.coef.len());
            for (j, c) in &e.coef {
                let _ = writeln!(s, "{j} {c:e}");
            }
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |what: &str| -> Result<(usize, Vec<&str>)> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l.split_whitespace().collect()))
                .ok_or_else(|| Error::parse(path, 0, format!("unexpected end of file, expected {what}")))
        };
        let (ln, head) = next("header")?;
        if head != ["nsmra-paramfield", "1"] {
            return Err(Error::parse(path, ln, "expected header `nsmra-paramfield 1`"));
        }
        let keyed = |(ln, f): (usize, Vec<&str>), key: &str| -> Result<f64> {
            if f.len() != 2 || f[0] != key {
                return Err(Error::parse(path, ln, format!("expected `{key} <value>`")));
            }
            f[1].parse().map_err(|_| Error::parse(path, ln, format!("bad value for `{key}`")))
        };
        let ell_km = keyed(next("ell_km")?, "ell_km")?;
        let nu = keyed(next("nu")?, "nu")?;
        let n_centers = keyed(next("centers")?, "centers")? as usize;
        let mut centers = Vec::with_capacity(n_centers);
        for _ in 0..n_centers {
            let (ln, f) = next("centre")?;
            let v: Vec<f64> = f.iter().filter_map(|x| x.parse().ok()).collect();
            if f.len() != 2 || v.len() != 2 {
                return Err(Error::parse(path, ln, "centre rows hold `lon lat`"));
            }
            centers.push(LonLat { lon: v[0], lat: v[1] });
        }
        let mut params = Vec::new();
        for name in ["sigma2", "beta", "tau2"] {
            let (ln, f) = next(name)?;
            if f.len() != 4 || f[0] != "param" || f[1] != name {
                return Err(Error::parse(path, ln, format!("expected `param {name} <intercept> <count>`")));
            }
            let intercept: f64 = f[2].parse().map_err(|_| Error::parse(path, ln, "bad intercept"))?;
            let count: usize = f[3].parse().map_err(|_| Error::parse(path, ln, "bad coefficient count"))?;
            let mut coef = Vec::with_capacity(count);
            for _ in 0..count {
                let (ln, f) = next("coefficient")?;
                let parsed = (f.len() == 2).then(|| (f[0].parse::<u32>().ok(), f[1].parse::<f64>().ok()));
                match parsed {
                    Some((Some(j), Some(c))) => coef.push((j, c)),
                    _ => return Err(Error::parse(path, ln, "coefficient rows hold `index value`")),
                }
            }
            params.push(LogExpansion { intercept, coef });
        }
        let tau2 = params.pop().expect("three params");
        let beta = params.pop().expect("three params");
        let sigma2 = params.pop().expect("three params");
        ParamField::new(centers, ell_km, nu, sigma2, beta, tau2)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

impl ParamProvider for ParamField {
    fn params_at(&self, p: LonLat) -> Result<LocalParams> {
        Ok(self.eval_theta(p))
    }
}

/// Wendland features of `locs` against `centers`.
pub fn wendland_features(locs: &[LonLat], centers: &[LonLat], ell_km: f64) -> DMatrix<f64> {
    let cp: Vec<Point3> = centers.iter().map(|c| c.to_earth()).collect();
    let mut x = DMatrix::zeros(locs.len(), centers.len());
    for (i, s) in locs.iter().enumerate() {
        let p = s.to_earth();
        for (j, c) in cp.iter().enumerate() {
            x[(i, j)] = wendland(p.dist(c), ell_km);
        }
    }
    x
}

/// Stacked log-responses of the usable estimates.
struct LogTargets {
    locs: Vec<LonLat>,
    /// log σ², log β, log τ² per row.
    y: [Vec<f64>; 3],
    nu: f64,
}

fn log_targets(estimates: &[LocalEstimate]) -> Result<LogTargets> {
    let usable: Vec<&LocalEstimate> = estimates
        .iter()
        .filter(|e| e.is_usable() && e.sigma2 > 0.0 && e.beta > 0.0 && e.tau2 > 0.0)
        .collect();
    if usable.is_empty() {
        return Err(Error::invalid("no usable local estimates to smooth"));
    }
    let mut nus: Vec<f64> = usable.iter().map(|e| e.nu).collect();
    nus.sort_by(f64::total_cmp);
    Ok(LogTargets {
        locs: usable.iter().map(|e| e.center).collect(),
        y: [
            usable.iter().map(|e| e.sigma2.ln()).collect(),
            usable.iter().map(|e| e.beta.ln()).collect(),
            usable.iter().map(|e| e.tau2.ln()).collect(),
        ],
        nu: nus[nus.len() / 2],
    })
}

/// Lasso-regularised Wendland regression of the stacked log estimates.
/// The smoothness of the field is the median of the estimates' ν.
pub fn smooth_field(estimates: &[LocalEstimate], centers: Vec<LonLat>, ell_km: f64, lambda: f64) -> Result<ParamField> {
    if centers.is_empty() {
        return Err(Error::invalid("no Wendland centres"));
    }
    let t = log_targets(estimates)?;
    let x = wendland_features(&t.locs, &centers, ell_km);
    let fits: Vec<LassoFit> = t.y.par_iter().map(|y| lasso(&x, y, lambda)).collect::<Result<_>>()?;
    if fits.iter().all(|f| f.coef.iter().all(|c| *c == 0.0)) {
        log::warn!("lasso penalty {lambda} removed every basis function; the field is constant");
    }
    let [s, b, t2] = [0, 1, 2].map(|k| LogExpansion::from_dense(&fits[k]));
    ParamField::new(centers, ell_km, t.nu, s, b, t2)
}

/// One cross-validated smoothing configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingCv {
    /// Index into the candidate centre sets.
    pub center_set: usize,
    pub n_centers: usize,
    pub ell_km: f64,
    pub lambda: f64,
    /// Mean squared prediction error of the held-out log estimates,
    /// averaged over the three parameters.
    pub mspe: f64,
}

/// k-fold cross-validation over (centre set, support, penalty). Estimates at
/// the same lattice point share a fold. Ties keep the earliest candidate.
pub fn select_smoothing_cv(
    estimates: &[LocalEstimate],
    center_sets: &[Vec<LonLat>],
    ells_km: &[f64],
    lambdas: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(SmoothingCv, Vec<SmoothingCv>)> {
    let t = log_targets(estimates)?;
    let n = t.locs.len();
    if folds < 2 || n < folds {
        return Err(Error::invalid(format!("{n} usable estimates cannot form {folds} folds")));
    }
    if center_sets.is_empty() || ells_km.is_empty() || lambdas.is_empty() || center_sets.iter().any(|c| c.is_empty()) {
        return Err(Error::invalid("empty smoothing candidate list"));
    }
    let fold: Vec<usize> = t
        .locs
        .iter()
        .map(|p| (seeds::hash_words(seed, &[p.lon.to_bits(), p.lat.to_bits()]) % folds as u64) as usize)
        .collect();
    let combos: Vec<(usize, f64)> = (0..center_sets.len())
        .flat_map(|c| ells_km.iter().map(move |&e| (c, e)))
        .collect();
    let table: Vec<Vec<SmoothingCv>> = combos
        .par_iter()
        .map(|&(c, ell)| -> Result<Vec<SmoothingCv>> {
            let x = wendland_features(&t.locs, &center_sets[c], ell);
            let mut sse = vec![0.0; lambdas.len()];
            for f in 0..folds {
                let train: Vec<usize> = (0..n).filter(|&i| fold[i] != f).collect();
                let test: Vec<usize> = (0..n).filter(|&i| fold[i] == f).collect();
                if test.is_empty() {
                    continue;
                }
                let xt = x.select_rows(&train);
                for y in &t.y {
                    let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                    for (l, fit) in lasso_path(&xt, &yt, lambdas)?.iter().enumerate() {
                        for &i in &test {
                            let pred = fit.intercept + x.row(i).iter().zip(&fit.coef).map(|(a, b)| a * b).sum::<f64>();
                            sse[l] += (y[i] - pred).powi(2);
                        }
                    }
                }
            }
            Ok(lambdas
                .iter()
                .zip(sse)
                .map(|(&lambda, s)| SmoothingCv {
                    center_set: c,
                    n_centers: center_sets[c].len(),
                    ell_km: ell,
                    lambda,
                    mspe: s / (3 * n) as f64,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let table: Vec<SmoothingCv> = table.into_iter().flatten().collect();
    let best = table
        .iter()
        .fold(None::<&SmoothingCv>, |b, r| match b {
            Some(b) if b.mspe <= r.mspe || r.mspe.is_nan() => Some(b),
            _ => Some(r),
        })
        .expect("nonempty table")
        .clone();
    Ok((best, table))
}
