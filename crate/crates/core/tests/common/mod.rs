#![allow(dead_code)]

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub mod gradcheck;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_RTOL: f64 = 1e-4;
/// Absolute floor so components that are exactly zero analytically do not
/// compare against finite-difference round-off.
pub const GRAD_ATOL: f64 = 1e-8;

pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= GRAD_RTOL * analytic.abs().max(numeric.abs()) + GRAD_ATOL
}

/// Central-difference gradient of `f` at `x` for the coordinates in `coords`.
pub fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize]) -> Vec<f64> {
    let mut xp = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = xp[i];
            xp[i] = orig + FD_STEP;
            let up = f(&xp);
            xp[i] = orig - FD_STEP;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Compares analytic and numeric gradients on `coords`; returns the first mismatch.
pub fn check_grad(
    label: &str,
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
) -> Result<(), String> {
    let numeric = numeric_grad(f, x, coords);
    for (&i, n) in coords.iter().zip(numeric) {
        if !grad_close(analytic[i], n) {
            return Err(format!(
                "{label}: coordinate {i}: analytic {} vs numeric {n}",
                analytic[i]
            ));
        }
    }
    Ok(())
}

pub fn random_map(shape: (usize, usize, usize), lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn random_vec(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Up to `k` distinct coordinates in `0..n`, always all of them when `n <= k`.
pub fn sample_coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}
