//! Matérn and nonstationary covariance kernels, Wendland weights, and
//! covariance-matrix assembly.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geo::{LonLat, Point3};

/// Parameters of a stationary Matérn model with nugget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StationaryMaternParams {
    /// Partial sill.
    pub sigma2: f64,
    /// Range in km.
    pub beta: f64,
    /// Smoothness.
    pub nu: f64,
    /// Nugget.
    pub tau2: f64,
}

impl StationaryMaternParams {
    pub fn new(sigma2: f64, beta: f64, nu: f64, tau2: f64) -> Result<Self> {
        let p = StationaryMaternParams {
            sigma2,
            beta,
            nu,
            tau2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn exponential(sigma2: f64, beta: f64, tau2: f64) -> Result<Self> {
        Self::new(sigma2, beta, 0.5, tau2)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma2 > 0.0
            && self.beta > 0.0
            && self.nu > 0.0
            && self.tau2 >= 0.0
            && [self.sigma2, self.beta, self.nu, self.tau2]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid Matérn parameters {self:?}")))
        }
    }

    pub fn local(&self) -> LocalParams {
        LocalParams {
            sigma2: self.sigma2,
            beta: self.beta,
            tau2: self.tau2,
            nu: self.nu,
        }
    }
}

/// Covariance parameters evaluated at one location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalParams {
    pub sigma2: f64,
    pub beta: f64,
    pub tau2: f64,
    pub nu: f64,
}

impl LocalParams {
    pub fn validate(&self) -> Result<()> {
        if self.sigma2 > 0.0
            && self.beta > 0.0
            && self.tau2 >= 0.0
            && self.nu > 0.0
            && self.sigma2.is_finite()
            && self.beta.is_finite()
            && self.tau2.is_finite()
            && self.nu.is_finite()
        {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid local parameters {self:?}")))
        }
    }
}

/// Anything that yields covariance parameters at a location.
pub trait ParamProvider: Send + Sync {
    fn params_at(&self, p: LonLat) -> Result<LocalParams>;
}

impl ParamProvider for StationaryMaternParams {
    fn params_at(&self, _p: LonLat) -> Result<LocalParams> {
        Ok(self.local())
    }
}

/// Parameter field given by a closure.
pub struct FnField<F>(pub F);

impl<F: Fn(LonLat) -> LocalParams + Send + Sync> ParamProvider for FnField<F> {
    fn params_at(&self, p: LonLat) -> Result<LocalParams> {
        Ok((self.0)(p))
    }
}

/// `e^x K_ν(x)` for x > 0, by trapezoidal quadrature of
/// `∫₀^∞ exp(-x (cosh t - 1)) cosh(ν t) dt`.
///
/// The integrand is smooth and decays double-exponentially, so the trapezoid
/// rule converges geometrically in the step.
pub fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let nu = nu.abs();
    let h = 0.1f64.min(0.5 / x.max(nu).sqrt());
    let integrand = |t: f64| {
        // cosh(t) - 1 = 2 sinh²(t/2) avoids cancellation near 0
        let s = (t / 2.0).sinh();
        (-x * 2.0 * s * s).exp() * (nu * t).cosh()
    };
    let mut sum = 0.5 * integrand(0.0);
    let mut prev = sum * 2.0;
    let mut k = 1usize;
    loop {
        let t = k as f64 * h;
        let f = integrand(t);
        sum += f;
        if (f <= prev && f <= 1e-17 * sum) || !f.is_finite() || k > 200_000 {
            break;
        }
        prev = f;
        k += 1;
    }
    sum * h
}

/// Modified Bessel function of the second kind.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    bessel_k_scaled(nu, x) * (-x).exp()
}

/// Matérn correlation `M_ν(d)` with unit range: `2^{1-ν}/Γ(ν) (√(2ν) d)^ν K_ν(√(2ν) d)`.
pub fn matern_correlation(d: f64, nu: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    if nu == 0.5 {
        return (-d).exp();
    }
    if nu == 1.5 {
        let a = 3f64.sqrt() * d;
        return (1.0 + a) * (-a).exp();
    }
    if nu == 2.5 {
        let a = 5f64.sqrt() * d;
        return (1.0 + a + a * a / 3.0) * (-a).exp();
    }
    let x = (2.0 * nu).sqrt() * d;
    let log_scaled = bessel_k_scaled(nu, x).ln();
    let log_c = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * x.ln() - x + log_scaled;
    log_c.exp().min(1.0)
}

/// Stationary Matérn covariance at lag `h`, plus τ² when `same_location`.
pub fn matern(h: f64, p: &StationaryMaternParams, same_location: bool) -> Result<f64> {
    if !h.is_finite() || h < 0.0 {
        return Err(Error::domain(format!("lag must be finite and non-negative, got {h}")));
    }
    let mut c = p.sigma2 * matern_correlation(h / p.beta, p.nu);
    if same_location {
        c += p.tau2;
    }
    Ok(c)
}

/// `(2 β_s β_t / (β_s² + β_t²))^{3/2}`; lies in (0, 1].
pub fn range_prefactor(beta_s: f64, beta_t: f64) -> f64 {
    let r = 2.0 * beta_s * beta_t / (beta_s * beta_s + beta_t * beta_t);
    r * r.sqrt()
}

/// Latent part of the nonstationary kernel (no nugget).
fn nonstationary_latent(dist: f64, ps: &LocalParams, pt: &LocalParams, nu: f64) -> f64 {
    let bs2 = ps.beta * ps.beta;
    let bt2 = pt.beta * pt.beta;
    let scale = ((bs2 + bt2) / 2.0).sqrt();
    (ps.sigma2 * pt.sigma2).sqrt()
        * range_prefactor(ps.beta, pt.beta)
        * matern_correlation(dist / scale, nu)
}

/// Nonstationary kernel between embedded points `s` and `t`. The smoothness
/// is taken from `ps.nu`; the nugget `τ²(s)` is added iff `s == t` exactly.
pub fn nonstationary_cov(s: Point3, t: Point3, ps: &LocalParams, pt: &LocalParams) -> Result<f64> {
    if !(ps.beta > 0.0) || !(pt.beta > 0.0) {
        return Err(Error::domain("range parameter must be positive"));
    }
    ps.validate()?;
    pt.validate()?;
    let d = s.dist(&t);
    let mut c = nonstationary_latent(d, ps, pt, ps.nu);
    if s == t {
        c += ps.tau2;
    }
    Ok(c)
}

/// Compactly supported Wendland weight with support `ell`.
pub fn wendland(d: f64, ell: f64) -> f64 {
    if d >= ell {
        return 0.0;
    }
    let q = d / ell;
    let one_minus = 1.0 - q;
    let p2 = one_minus * one_minus;
    let p6 = p2 * p2 * p2;
    p6 * (35.0 * q * q + 18.0 * q + 3.0) / 3.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelKind {
    StationaryMatern,
    StationaryExponential,
    NonstationaryExponential,
    NonstationaryMatern,
}

impl KernelKind {
    pub fn is_nonstationary(self) -> bool {
        matches!(
            self,
            KernelKind::NonstationaryExponential | KernelKind::NonstationaryMatern
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::StationaryMatern => "stationary_matern",
            KernelKind::StationaryExponential => "stationary_exponential",
            KernelKind::NonstationaryExponential => "nonstationary_exponential",
            KernelKind::NonstationaryMatern => "nonstationary_matern",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "stationary_matern" => KernelKind::StationaryMatern,
            "stationary_exponential" => KernelKind::StationaryExponential,
            "nonstationary_exponential" => KernelKind::NonstationaryExponential,
            "nonstationary_matern" => KernelKind::NonstationaryMatern,
            _ => return Err(Error::invalid(format!("unknown kernel kind `{s}`"))),
        })
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone)]
pub enum ParamSource {
    Fixed(StationaryMaternParams),
    Field(Arc<dyn ParamProvider>),
}

impl fmt::Debug for ParamSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamSource::Fixed(p) => f.debug_tuple("Fixed").field(p).finish(),
            ParamSource::Field(_) => f.write_str("Field(..)"),
        }
    }
}

/// A location with its embedding and resolved kernel parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Site {
    pub lonlat: LonLat,
    pub point: Point3,
    pub params: LocalParams,
}

impl Site {
    pub fn coincides(&self, other: &Site) -> bool {
        self.lonlat == other.lonlat
    }
}

/// A kernel kind together with its parameter source.
#[derive(Clone, Debug)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub source: ParamSource,
    pub include_nugget: bool,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, source: ParamSource, include_nugget: bool) -> Result<Self> {
        match (&source, kind.is_nonstationary()) {
            (ParamSource::Fixed(p), false) => p.validate()?,
            (ParamSource::Field(_), true) => {}
            (ParamSource::Fixed(_), true) => {
                return Err(Error::invalid(format!("{kind} requires a parameter field")))
            }
            (ParamSource::Field(_), false) => {
                return Err(Error::invalid(format!("{kind} requires fixed parameters")))
            }
        }
        Ok(KernelSpec {
            kind,
            source,
            include_nugget,
        })
    }

    /// Stationary Matérn (or exponential when ν = 0.5) with fixed parameters.
    pub fn stationary(p: StationaryMaternParams, include_nugget: bool) -> Result<Self> {
        let kind = if p.nu == 0.5 {
            KernelKind::StationaryExponential
        } else {
            KernelKind::StationaryMatern
        };
        Self::new(kind, ParamSource::Fixed(p), include_nugget)
    }

    pub fn nonstationary(field: Arc<dyn ParamProvider>, exponential: bool, include_nugget: bool) -> Self {
        KernelSpec {
            kind: if exponential {
                KernelKind::NonstationaryExponential
            } else {
                KernelKind::NonstationaryMatern
            },
            source: ParamSource::Field(field),
            include_nugget,
        }
    }

    pub fn with_nugget(&self, include_nugget: bool) -> Self {
        KernelSpec {
            include_nugget,
            ..self.clone()
        }
    }

    pub fn params_at(&self, p: LonLat) -> Result<LocalParams> {
        let mut lp = match &self.source {
            ParamSource::Fixed(s) => s.local(),
            ParamSource::Field(f) => f.params_at(p).map_err(|e| {
                Error::invalid(format!("parameter field evaluation failed at {p}: {e}"))
            })?,
        };
        if matches!(
            self.kind,
            KernelKind::StationaryExponential | KernelKind::NonstationaryExponential
        ) {
            lp.nu = 0.5;
        }
        lp.validate()
            .map_err(|e| Error::invalid(format!("at {p}: {e}")))?;
        Ok(lp)
    }

    pub fn site(&self, p: LonLat) -> Result<Site> {
        Ok(Site {
            lonlat: p,
            point: p.to_earth(),
            params: self.params_at(p)?,
        })
    }

    pub fn sites(&self, pts: &[LonLat]) -> Result<Vec<Site>> {
        pts.par_iter().map(|p| self.site(*p)).collect()
    }

    /// Covariance of the latent process (no nugget).
    #[inline]
    pub fn latent(&self, a: &Site, b: &Site) -> f64 {
        let d = a.point.dist(&b.point);
        match self.kind {
            KernelKind::StationaryMatern | KernelKind::StationaryExponential => {
                a.params.sigma2 * matern_correlation(d / a.params.beta, a.params.nu)
            }
            KernelKind::NonstationaryExponential | KernelKind::NonstationaryMatern => {
                nonstationary_latent(d, &a.params, &b.params, a.params.nu)
            }
        }
    }

    /// Measurement-noise variance at a site.
    #[inline]
    pub fn nugget(&self, a: &Site) -> f64 {
        a.params.tau2
    }

    /// Full kernel: latent plus nugget on coincidence when enabled.
    #[inline]
    pub fn eval(&self, a: &Site, b: &Site) -> f64 {
        let mut c = self.latent(a, b);
        if self.include_nugget && a.coincides(b) {
            c += self.nugget(a);
        }
        c
    }

    /// Latent covariance block between two site lists, assembled column-parallel.
    pub fn latent_matrix(&self, rows: &[Site], cols: &[Site]) -> DMatrix<f64> {
        self.assemble(rows, cols, false)
    }

    /// Kernel matrix honouring `include_nugget`.
    pub fn matrix(&self, rows: &[Site], cols: &[Site]) -> DMatrix<f64> {
        self.assemble(rows, cols, self.include_nugget)
    }

    fn assemble(&self, rows: &[Site], cols: &[Site], nugget: bool) -> DMatrix<f64> {
        let nr = rows.len();
        let mut m = DMatrix::zeros(nr, cols.len());
        if nr == 0 {
            return m;
        }
        let fill = |(j, col): (usize, &mut [f64])| {
            let b = &cols[j];
            for (i, out) in col.iter_mut().enumerate() {
                let a = &rows[i];
                let mut c = self.latent(a, b);
                if nugget && a.coincides(b) {
                    c += self.nugget(a);
                }
                *out = c;
            }
        };
        let work = nr * cols.len();
        if work > 4096 {
            m.as_mut_slice().par_chunks_mut(nr).enumerate().for_each(fill);
        } else {
            m.as_mut_slice().chunks_mut(nr).enumerate().for_each(fill);
        }
        m
    }
}

/// Kernel matrix between two lists of locations.
pub fn cov_matrix(rows: &[LonLat], cols: &[LonLat], spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let r = spec.sites(rows)?;
    let c = spec.sites(cols)?;
    Ok(spec.matrix(&r, &c))
}
