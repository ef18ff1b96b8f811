//! Latitudinal mean structure: binned means and cubic B-spline regression.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::seeds;

/// Equal-width latitude bins over [-90, 90].
#[derive(Clone, Debug, PartialEq)]
pub struct LatBins {
    pub mean: Vec<f64>,
    pub count: Vec<usize>,
}

impl LatBins {
    pub fn n_bins(&self) -> usize {
        self.count.len()
    }

    pub fn width(&self) -> f64 {
        180.0 / self.n_bins() as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.n_bins()).map(|i| -90.0 + i as f64 * self.width()).collect()
    }

    pub fn center(&self, i: usize) -> f64 {
        -90.0 + (i as f64 + 0.5) * self.width()
    }

    /// Bin of `lat`; the top edge belongs to the last bin.
    pub fn index(&self, lat: f64) -> usize {
        bin_index(lat, self.n_bins())
    }

    pub fn nonempty(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_bins()).filter(|&i| self.count[i] > 0)
    }
}

fn bin_index(lat: f64, n: usize) -> usize {
    (((lat + 90.0) / 180.0 * n as f64).floor().max(0.0) as usize).min(n - 1)
}

/// Unweighted arithmetic mean of the values falling in each bin.
pub fn bin_by_latitude(obs: &[Observation], n_bins: usize) -> Result<LatBins> {
    bin_values(obs.iter().map(|o| (o.loc.lat, o.value)), n_bins)
}

fn bin_values(vals: impl Iterator<Item = (f64, f64)>, n_bins: usize) -> Result<LatBins> {
    if n_bins < 2 {
        return Err(Error::invalid("at least 2 latitude bins are required"));
    }
    let mut sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for (lat, v) in vals {
        let i = bin_index(lat, n_bins);
        sum[i] += v;
        count[i] += 1;
    }
    if count.iter().all(|c| *c == 0) {
        return Err(Error::invalid("no observations to bin"));
    }
    let mean = sum
        .iter()
        .zip(&count)
        .map(|(s, c)| if *c > 0 { s / *c as f64 } else { f64::NAN })
        .collect();
    Ok(LatBins { mean, count })
}

/// Clamped cubic B-spline basis on `[lo, hi]` with `k` functions.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicBasis {
    pub lo: f64,
    pub hi: f64,
    /// Full knot vector, boundary knots repeated four times.
    pub knots: Vec<f64>,
}

impl CubicBasis {
    pub fn new(lo: f64, hi: f64, k: usize) -> Result<Self> {
        if k < 4 {
            return Err(Error::invalid(format!("a cubic spline needs at least 4 basis functions, got {k}")));
        }
        if !(hi > lo) {
            return Err(Error::invalid(format!("spline range [{lo}, {hi}] is empty")));
        }
        let interior = k - 4;
        let mut knots = vec![lo; 4];
        for i in 1..=interior {
            knots.push(lo + (hi - lo) * i as f64 / (interior + 1) as f64);
        }
        knots.extend([hi; 4]);
        Ok(CubicBasis { lo, hi, knots })
    }

    pub fn len(&self) -> usize {
        self.knots.len() - 4
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Basis values at `x`, clamped into the range.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        let x = x.clamp(self.lo, self.hi);
        let t = &self.knots;
        let k = self.len();
        // span with t[s] <= x < t[s+1]; the right end uses the last nonempty span
        let mut s = 3;
        while s + 1 < k && x >= t[s + 1] {
            s += 1;
        }
        let mut n = [0.0f64; 4];
        n[0] = 1.0;
        let mut left = [0.0; 4];
        let mut right = [0.0; 4];
        for j in 1..=3 {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let tmp = if denom > 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        let mut out = vec![0.0; k];
        for (j, v) in n.iter().enumerate() {
            out[s - 3 + j] = *v;
        }
        out
    }
}

/// One row of a cross-validation table.
#[derive(Clone, Debug, PartialEq)]
pub struct CvRow {
    pub k: usize,
    pub mse: f64,
    /// Held-out points predicted outside the fitted latitude range, where
    /// the spline value of the nearest nonempty bin is used.
    pub clamped: usize,
    /// Folds whose fit failed.
    pub failed_folds: usize,
}

/// Fitted latitudinal trend.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendModel {
    pub basis: CubicBasis,
    pub coef: Vec<f64>,
    pub cv: Vec<CvRow>,
}

impl TrendModel {
    pub fn k(&self) -> usize {
        self.coef.len()
    }

    /// μ(lat); latitudes outside the fitted range take the boundary value.
    pub fn eval(&self, lat: f64) -> f64 {
        self.basis.eval(lat).iter().zip(&self.coef).map(|(b, c)| b * c).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("nsmra-trend 1\n");
        let _ = writeln!(s, "k {}", self.k());
        let _ = writeln!(s, "range {} {}", self.basis.lo, self.basis.hi);
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "knots {}", join(&self.basis.knots));
        let _ = writeln!(s, "coef {}", join(&self.coef));
        for r in &self.cv {
            let _ = writeln!(s, "cv {} {:e} {} {}", r.k, r.mse, r.clamped, r.failed_folds);
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "nsmra-trend 1")) => {}
            _ => return Err(Error::parse(path, 1, "expected header `nsmra-trend 1`")),
        }
        let (mut k, mut range, mut knots, mut coef, mut cv) = (None, None, None, None, Vec::new());
        for (i, line) in lines {
            let ln = i + 1;
            let mut it = line.split_whitespace();
            let Some(key) = it.next() else { continue };
            let rest: Vec<&str> = it.collect();
            let floats = |v: &[&str]| -> Result<Vec<f64>> {
                v.iter()
                    .map(|x| x.parse::<f64>().map_err(|_| Error::parse(path, ln, format!("bad number `{x}`"))))
                    .collect()
            };
            match key {
                "k" => k = Some(rest.first().and_then(|x| x.parse::<usize>().ok()).ok_or_else(|| Error::parse(path, ln, "bad k"))?),
                "range" => {
                    let v = floats(&rest)?;
                    if v.len() != 2 {
                        return Err(Error::parse(path, ln, "range needs two numbers"));
                    }
                    range = Some((v[0], v[1]));
                }
                "knots" => knots = Some(floats(&rest)?),
                "coef" => coef = Some(floats(&rest)?),
                "cv" => {
                    if rest.len() != 4 {
                        return Err(Error::parse(path, ln, "cv rows hold k mse clamped failed"));
                    }
                    let p = |x: &str| x.parse::<usize>().map_err(|_| Error::parse(path, ln, format!("bad count `{x}`")));
                    cv.push(CvRow {
                        k: p(rest[0])?,
                        mse: floats(&rest[1..2])?[0],
                        clamped: p(rest[2])?,
                        failed_folds: p(rest[3])?,
                    });
                }
                other => return Err(Error::parse(path, ln, format!("unknown key `{other}`"))),
            }
        }
        let missing = |what: &str| Error::parse(path, 0, format!("missing `{what}`"));
        let k = k.ok_or_else(|| missing("k"))?;
        let (lo, hi) = range.ok_or_else(|| missing("range"))?;
        let knots = knots.ok_or_else(|| missing("knots"))?;
        let coef = coef.ok_or_else(|| missing("coef"))?;
        if coef.len() != k || knots.len() != k + 4 {
            return Err(Error::parse(path, 0, "knot or coefficient count disagrees with k"));
        }
        Ok(TrendModel {
            basis: CubicBasis { lo, hi, knots },
            coef,
            cv,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

/// Least-squares fit of the nonempty bin means on `k` cubic B-splines
/// spanning the nonempty bin centres.
pub fn fit_trend(bins: &LatBins, k: usize) -> Result<TrendModel> {
    let rows: Vec<usize> = bins.nonempty().collect();
    if rows.len() < k {
        return Err(Error::invalid(format!(
            "{} nonempty bins cannot support {k} basis functions",
            rows.len()
        )));
    }
    let lo = bins.center(rows[0]);
    let hi = bins.center(*rows.last().expect("nonempty"));
    let basis = CubicBasis::new(lo, hi, k)?;
    let mut x = DMatrix::zeros(rows.len(), k);
    for (r, &i) in rows.iter().enumerate() {
        for (j, v) in basis.eval(bins.center(i)).into_iter().enumerate() {
            x[(r, j)] = v;
        }
    }
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| bins.mean[i]));
    let coef = least_squares(&x, &y)?;
    Ok(TrendModel {
        basis,
        coef: coef.iter().copied().collect(),
        cv: Vec::new(),
    })
}

/// Minimum-residual solution via QR; a numerically zero pivot names the
/// offending columns.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let k = x.ncols();
    let col_norm: Vec<f64> = (0..k).map(|j| x.column(j).norm()).collect();
    let dead: Vec<usize> = (0..k).filter(|&j| col_norm[j] == 0.0).collect();
    if !dead.is_empty() {
        return Err(Error::invalid(format!("rank-deficient spline design: basis columns {dead:?} have no data")));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = col_norm.iter().cloned().fold(0.0, f64::max);
    let weak: Vec<usize> = (0..k).filter(|&j| r[(j, j)].abs() <= 1e-10 * scale).collect();
    if !weak.is_empty() {
        return Err(Error::invalid(format!("rank-deficient spline design: basis columns {weak:?} are dependent")));
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| Error::invalid("rank-deficient spline design"))
}

/// Fold of an observation, a function of its content and the seed only.
fn fold_of(o: &Observation, seed: u64, folds: usize) -> usize {
    let h = seeds::hash_words(seed, &[o.loc.lon.to_bits(), o.loc.lat.to_bits(), o.value.to_bits()]);
    (h % folds as u64) as usize
}

/// Selects the number of basis functions by `folds`-fold cross-validation
/// on held-out observations. Ties within 1e-12 go to the smaller k.
pub fn select_k_cv(obs: &[Observation], ks: &[usize], folds: usize, n_bins: usize, seed: u64) -> Result<(usize, Vec<CvRow>)> {
    if folds < 2 || obs.len() < folds {
        return Err(Error::invalid(format!("{} observations cannot form {folds} folds", obs.len())));
    }
    if ks.is_empty() {
        return Err(Error::invalid("empty range of basis sizes"));
    }
    let fold: Vec<usize> = obs.iter().map(|o| fold_of(o, seed, folds)).collect();
    let table: Vec<CvRow> = ks
        .par_iter()
        .map(|&k| {
            let per_fold: Vec<Option<(f64, usize, usize)>> = (0..folds)
                .map(|f| {
                    let train = obs.iter().zip(&fold).filter(|(_, g)| **g != f).map(|(o, _)| (o.loc.lat, o.value));
                    let bins = bin_values(train, n_bins).ok()?;
                    let model = fit_trend(&bins, k).ok()?;
                    let (mut sse, mut n, mut clamped) = (0.0, 0, 0);
                    for (o, g) in obs.iter().zip(&fold) {
                        if *g == f {
                            let e = o.value - model.eval(o.loc.lat);
                            sse += e * e;
                            n += 1;
                            if o.loc.lat < model.basis.lo || o.loc.lat > model.basis.hi {
                                clamped += 1;
                            }
                        }
                    }
                    Some((sse, n, clamped))
                })
                .collect();
            let failed = per_fold.iter().filter(|r| r.is_none()).count();
            let (sse, n, clamped) = per_fold
                .iter()
                .flatten()
                .fold((0.0, 0, 0), |a, r| (a.0 + r.0, a.1 + r.1, a.2 + r.2));
            let mse = if failed > 0 || n == 0 { f64::INFINITY } else { sse / n as f64 };
            CvRow { k, mse, clamped, failed_folds: failed }
        })
        .collect();
    let min = table.iter().map(|r| r.mse).fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::invalid("every candidate basis size failed in cross-validation"));
    }
    let best = table
        .iter()
        .filter(|r| r.mse <= min + 1e-12)
        .min_by_key(|r| r.k)
        .expect("the minimum is attained");
    Ok((best.k, table))
}

/// Fits the trend with the CV-selected k on all observations.
pub fn fit_trend_cv(obs: &[Observation], ks: &[usize], folds: usize, n_bins: usize, seed: u64) -> Result<TrendModel> {
    let (k, table) = select_k_cv(obs, ks, folds, n_bins, seed)?;
    let mut model = fit_trend(&bin_by_latitude(obs, n_bins)?, k)?;
    model.cv = table;
    Ok(model)
}

/// Residuals `z - μ(lat)`.
pub fn detrend(obs: &[Observation], model: &TrendModel) -> Vec<f64> {
    obs.iter().map(|o| o.value - model.eval(o.loc.lat)).collect()
}

/// Adds μ(lat) back to residual-scale values.
pub fn retrend(lats: impl Iterator<Item = f64>, resid: &[f64], model: &TrendModel) -> Vec<f64> {
    lats.zip(resid).map(|(lat, r)| r + model.eval(lat)).collect()
}
