#![allow(dead_code)]

use gllod::forms::{FormSet, Params, Potential};
use gllod::mesh::Mesh;
use num_complex::Complex64;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::sync::Arc;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Entries uniform in the unit square of the complex plane, shifted by `-0.5 - 0.5i`.
pub fn random_vec(rng: &mut StdRng, len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
        .collect()
}

pub fn forms(n: usize, kappa: f64, potential: Potential) -> FormSet {
    FormSet::new(Arc::new(Mesh::build_uniform(n).unwrap()), Params::new(kappa, potential).unwrap())
}

pub fn real_dot(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

pub fn axpy(x: &[Complex64], t: f64, d: &[Complex64]) -> Vec<Complex64> {
    x.iter().zip(d).map(|(a, b)| a + b * t).collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(pts: &[(f64, f64)]) -> f64 {
    let m = pts.len() as f64;
    let lx: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}
