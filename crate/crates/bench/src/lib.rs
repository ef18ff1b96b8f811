//! Deterministic fixtures shared by the benchmarks.

use nalgebra::DMatrix;
use nsmra::geo::{GeoBox, LonLat};

/// `n` points on a low-discrepancy sequence over `bx`.
pub fn scatter(n: usize, bx: &GeoBox) -> Vec<LonLat> {
    (0..n)
        .map(|k| {
            let (u, v) = ((k as f64 * 0.618_033_988_7) % 1.0, (k as f64 * 0.754_877_666) % 1.0);
            LonLat { lon: bx.lon_min() + bx.lon_span() * u, lat: bx.lat_min + bx.lat_span() * v }
        })
        .collect()
}

/// Smooth response over `locs` with no randomness.
pub fn response(locs: &[LonLat]) -> Vec<f64> {
    locs.iter().map(|p| (p.lon / 3.0).sin() + (p.lat / 2.0).cos() + 0.1 * ((p.lon * 37.0).sin())).collect()
}

/// Design matrix with `p` columns of trigonometric features and a response
/// that uses the first few of them.
pub fn regression(n: usize, p: usize) -> (DMatrix<f64>, Vec<f64>) {
    let x = DMatrix::from_fn(n, p, |i, j| ((i * (j + 1)) as f64 * 0.37).sin() + 0.01 * j as f64);
    let y = (0..n).map(|i| 2.0 * x[(i, 0)] - x[(i, 1)] + 0.5 * x[(i, 2)] + 0.05 * (i as f64 * 1.3).cos()).collect();
    (x, y)
}
