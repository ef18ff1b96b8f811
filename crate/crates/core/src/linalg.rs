//! Dense Cholesky factorisation with jitter escalation and triangular solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const BLOCK: usize = 64;

/// Jitter multipliers of the mean diagonal, tried in order.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Lower Cholesky factor `L` with `A + jitter I = L Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cholesky {
    l: DMatrix<f64>,
    jitter: f64,
}

/// Right-looking blocked factorisation; the update runs through gemm.
fn blocked_cholesky(mut a: DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut k = 0;
    while k < n {
        let b = BLOCK.min(n - k);
        let a11 = a.view((k, k), (b, b)).clone_owned();
        let l11 = a11.cholesky()?.unpack();
        a.view_mut((k, k), (b, b)).copy_from(&l11);
        let m = n - k - b;
        if m > 0 {
            let mut xt = a.view((k + b, k), (m, b)).transpose();
            if !l11.solve_lower_triangular_mut(&mut xt) {
                return None;
            }
            let x = xt.transpose();
            a.view_mut((k + b, k), (m, b)).copy_from(&x);
            let mut a22 = a.view_mut((k + b, k + b), (m, m));
            a22.gemm(-1.0, &x, &xt, 1.0);
        }
        k += b;
    }
    a.fill_upper_triangle(0.0, 1);
    if a.iter().all(|v| v.is_finite()) {
        Some(a)
    } else {
        None
    }
}

impl Cholesky {
    /// Factorises a symmetric matrix, escalating jitter along [`JITTER_LADDER`].
    pub fn new(a: &DMatrix<f64>, context: &str) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::invalid(format!(
                "Cholesky of non-square {}x{} matrix ({context})",
                n,
                a.ncols()
            )));
        }
        if n == 0 {
            return Ok(Cholesky {
                l: DMatrix::zeros(0, 0),
                jitter: 0.0,
            });
        }
        let mean_diag = a.diagonal().mean().abs();
        for (step, &mult) in JITTER_LADDER.iter().enumerate() {
            let jitter = mult * mean_diag;
            let mut m = a.clone();
            if jitter > 0.0 {
                for i in 0..n {
                    m[(i, i)] += jitter;
                }
            }
            if let Some(l) = blocked_cholesky(m) {
                if step > 0 {
                    log::debug!("Cholesky ({context}) needed jitter {jitter:e}");
                }
                return Ok(Cholesky { l, jitter });
            }
        }
        Err(Error::NotPositiveDefinite {
            context: context.to_string(),
        })
    }

    /// Factorisation without any jitter; `None` if not positive definite.
    pub fn exact(a: &DMatrix<f64>) -> Option<Self> {
        blocked_cholesky(a.clone()).map(|l| Cholesky { l, jitter: 0.0 })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn into_l(self) -> DMatrix<f64> {
        self.l
    }

    pub fn from_l(l: DMatrix<f64>) -> Self {
        Cholesky { l, jitter: 0.0 }
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// log det(A + jitter I).
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L⁻¹ B`.
    pub fn solve_l(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        solve_lower(&self.l, b)
    }

    /// `L⁻ᵀ B`.
    pub fn solve_lt(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        solve_lower_transpose(&self.l, b)
    }

    pub fn solve_l_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        if self.dim() > 0 {
            self.l.solve_lower_triangular_mut(&mut x);
        }
        x
    }

    pub fn solve_lt_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        if self.dim() > 0 {
            self.l.tr_solve_lower_triangular_mut(&mut x);
        }
        x
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.solve_lt(&self.solve_l(b))
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_lt_vec(&self.solve_l_vec(b))
    }
}

/// `L⁻¹ B` for lower-triangular `L`, blocked over rows so the bulk is gemm.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    assert_eq!(n, b.nrows(), "solve_lower dimension mismatch");
    let mut x = b.clone();
    if n == 0 || b.ncols() == 0 {
        return x;
    }
    let mut k = 0;
    while k < n {
        let nb = BLOCK.min(n - k);
        let lkk = l.view((k, k), (nb, nb));
        {
            let mut xk = x.rows_mut(k, nb);
            lkk.solve_lower_triangular_mut(&mut xk);
        }
        let rest = n - k - nb;
        if rest > 0 {
            let xk = x.rows(k, nb).clone_owned();
            let lrk = l.view((k + nb, k), (rest, nb));
            let mut xr = x.rows_mut(k + nb, rest);
            xr.gemm(-1.0, &lrk, &xk, 1.0);
        }
        k += nb;
    }
    x
}

/// `L⁻ᵀ B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    assert_eq!(n, b.nrows(), "solve_lower_transpose dimension mismatch");
    let mut x = b.clone();
    if n == 0 || b.ncols() == 0 {
        return x;
    }
    // Blocks are processed bottom-up.
    let mut end = n;
    while end > 0 {
        let nb = BLOCK.min(end);
        let k = end - nb;
        {
            let lkk = l.view((k, k), (nb, nb));
            let mut xk = x.rows_mut(k, nb);
            lkk.tr_solve_lower_triangular_mut(&mut xk);
        }
        if k > 0 {
            let xk = x.rows(k, nb).clone_owned();
            // rows k..end of L, columns 0..k: Lᵀ block above is (L[k..end, 0..k])ᵀ
            let lkr = l.view((k, 0), (nb, k));
            let mut xr = x.rows_mut(0, k);
            xr.gemm_tr(-1.0, &lkr, &xk, 1.0);
        }
        end = k;
    }
    x
}

/// Symmetrises in place by averaging with the transpose.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
