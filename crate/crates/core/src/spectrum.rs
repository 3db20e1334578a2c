//! Bottom of the spectrum of `E''(u)` on a discrete space.
//!
//! Solves `H v = lambda M v` with the compressed Hessian `H` and L2 mass `M`
//! by shift-invert Lanczos. Because `E''(u) >= -M` for the declared
//! quadratures, a first run shifted below `-1` locates the smallest
//! eigenvalue; a second run shifted just below it resolves the bottom of the
//! spectrum with good separation.

use faer::{Mat, Side};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::Space;
use crate::sparse::{axpy, norm2, real_dot, Factorization, SymmetricOperator};

/// Minimum alignment of the lowest eigenvector with `iu` for a gauge mode.
pub const ALIGNMENT_MIN: f64 = 0.99;
/// Minimum second eigenvalue for a quasi-isolated minimizer.
pub const GAP_MIN: f64 = 1e-6;
/// Zero-mode tolerance relative to the diagonal scale of `M^{-1} H`.
pub const ZERO_REL: f64 = 1e-8;
/// Residual bound `|H v - lambda M v| <= RESIDUAL_TOL |v|` for returned pairs.
pub const RESIDUAL_TOL: f64 = 1e-8;

const SHIFT_BELOW: f64 = -1.05;
const MAX_STEPS: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    QuasiIsolatedMinimizer,
    SaddleOrNegative,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Smallest eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// `|(v_1, iu)| / (|v_1| |u|)` in L2.
    pub zero_mode_alignment: f64,
    /// `lambda_2 - max(lambda_1, 0)`
    pub gap: f64,
    pub classification: Classification,
    pub tol_zero: f64,
    /// Alignment with `iu` of every returned eigenvector.
    pub alignments: Vec<f64>,
    /// `|H v - lambda M v| / |v|` per eigenpair.
    pub residuals: Vec<f64>,
    #[serde(skip)]
    pub eigenvectors: Vec<Vec<Complex64>>,
}

impl SpectrumReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Eigenpair of the generalized problem with its residual `|H v - lambda M v|`.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<Complex64>,
    pub residual: f64,
}

fn pseudo_random(n: usize, seed: u64) -> Vec<Complex64> {
    let mut s = seed ^ 0xD1B5_4A32_D192_ED03;
    let mut next = || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    };
    (0..n).map(|_| Complex64::new(next(), next())).collect()
}

fn times_i(v: &[Complex64]) -> Vec<Complex64> {
    v.iter().map(|z| z * Complex64::new(0.0, 1.0)).collect()
}

struct Lanczos<'a> {
    h: &'a SymmetricOperator,
    m: &'a SymmetricOperator,
    sigma: f64,
    factor: Factorization,
    complex_linear: bool,
}

impl<'a> Lanczos<'a> {
    fn new(h: &'a SymmetricOperator, m: &'a SymmetricOperator, sigma: f64) -> Result<Self> {
        let shifted = h.add_scaled(-sigma, m)?;
        let factor = Factorization::cholesky(&shifted)?;
        Ok(Self {
            h,
            m,
            sigma,
            factor,
            complex_linear: h.is_complex_linear() && m.is_complex_linear(),
        })
    }

    /// The `want` eigenpairs nearest the shift. Stops when all residuals are below
    /// `tol |v|`, or (with `tol = None`) after the Ritz values settle.
    fn run(&self, want: usize, tol: Option<f64>) -> Result<Vec<EigenPair>> {
        let nb = self.h.num_blocks();
        let n_real = 2 * nb;
        let distinct = if self.complex_linear { want.div_ceil(2) } else { want };
        let cap = if self.complex_linear { n_real / 2 } else { n_real }.min(MAX_STEPS);
        let mut basis: Vec<Vec<Complex64>> = Vec::new();
        let mut m_basis: Vec<Vec<Complex64>> = Vec::new();
        let mut alpha: Vec<f64> = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut seed = 1u64;
        let mut q = pseudo_random(nb, seed);
        let mut last_ritz: Option<Vec<f64>> = None;
        let mut best: Option<Vec<EigenPair>> = None;

        let orthogonalize = |w: &mut Vec<Complex64>, basis: &[Vec<Complex64>], m_basis: &[Vec<Complex64>]| {
            for _ in 0..2 {
                for (qi, mqi) in basis.iter().zip(m_basis) {
                    let c = real_dot(mqi, w);
                    axpy(w, -c, qi);
                    if self.complex_linear {
                        let iq = times_i(qi);
                        let c = real_dot(&times_i(mqi), w);
                        axpy(w, -c, &iq);
                    }
                }
            }
        };

        orthogonalize(&mut q, &basis, &m_basis);
        let mut mq = self.m.apply(&q);
        let qn = real_dot(&mq, &q).sqrt();
        q.iter_mut().for_each(|z| *z /= qn);
        mq.iter_mut().for_each(|z| *z /= qn);

        for step in 0..cap {
            let mut w = self.factor.solve(&mq);
            let a = real_dot(&mq, &w);
            axpy(&mut w, -a, &q);
            if let Some(&b) = beta.last() {
                if let Some(prev) = basis.last() {
                    axpy(&mut w, -b, prev);
                }
            }
            basis.push(q);
            m_basis.push(mq);
            alpha.push(a);
            orthogonalize(&mut w, &basis, &m_basis);
            let mut mw = self.m.apply(&w);
            let mut b = real_dot(&mw, &w).max(0.0).sqrt();
            let m_steps = basis.len();
            let breakdown = !(b > 1e-13 * a.abs().max(f64::MIN_POSITIVE));
            let check = m_steps >= distinct && (m_steps.is_multiple_of(8) || breakdown || step + 1 == cap);
            if check {
                let pairs = self.ritz(&basis, &alpha, &beta, distinct, want)?;
                let values: Vec<f64> = pairs.iter().map(|p| p.value).collect();
                let done = match tol {
                    Some(t) => pairs.len() >= want.min(n_real) && pairs.iter().all(|p| p.residual <= t * norm2(&p.vector)),
                    None => last_ritz.as_ref().is_some_and(|old| {
                        old.len() == values.len()
                            && old.iter().zip(&values).all(|(x, y)| (x - y).abs() <= 1e-10 * (1.0 + y.abs()))
                    }),
                };
                best = Some(pairs);
                if done {
                    return Ok(best.unwrap());
                }
                last_ritz = Some(values);
            }
            if breakdown {
                // invariant subspace: continue with a fresh direction
                seed += 1;
                w = pseudo_random(nb, seed);
                orthogonalize(&mut w, &basis, &m_basis);
                mw = self.m.apply(&w);
                b = real_dot(&mw, &w).max(0.0).sqrt();
                if !(b > 0.0) {
                    break;
                }
                beta.push(0.0);
            } else {
                beta.push(b);
            }
            q = w.into_iter().map(|z| z / b).collect();
            mq = mw.into_iter().map(|z| z / b).collect();
        }
        match (tol, best) {
            (None, Some(p)) => Ok(p),
            (_, Some(p)) => {
                if p.len() >= want.min(n_real) && tol.is_some_and(|t| p.iter().all(|e| e.residual <= t * norm2(&e.vector))) {
                    Ok(p)
                } else {
                    let res: Vec<String> = p.iter().map(|e| format!("{:.2e}", e.residual / norm2(&e.vector))).collect();
                    Err(Error::Eigen(format!(
                        "shift-invert Lanczos at shift {} reached {} steps; relative residuals [{}]",
                        self.sigma,
                        basis.len(),
                        res.join(", ")
                    )))
                }
            }
            (_, None) => Err(Error::Eigen("Lanczos produced no Ritz pairs".into())),
        }
    }

    fn ritz(
        &self,
        basis: &[Vec<Complex64>],
        alpha: &[f64],
        beta: &[f64],
        distinct: usize,
        want: usize,
    ) -> Result<Vec<EigenPair>> {
        let j = alpha.len();
        let t = Mat::<f64>::from_fn(j, j, |r, c| {
            if r == c {
                alpha[r]
            } else if r == c + 1 {
                beta[c]
            } else if c == r + 1 {
                beta[r]
            } else {
                0.0
            }
        });
        let evd = t
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Eigen(format!("tridiagonal eigensolver failed: {e:?}")))?;
        let s = evd.S().column_vector();
        let u = evd.U();
        // theta = 1 / (lambda - sigma) > 0; the largest theta are nearest the shift
        let mut order: Vec<usize> = (0..j).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        let mut pairs = Vec::new();
        for &col in order.iter().take(distinct) {
            let theta = s[col];
            if !(theta > 0.0) {
                continue;
            }
            let lambda = self.sigma + 1.0 / theta;
            let mut v = vec![Complex64::new(0.0, 0.0); basis[0].len()];
            for (r, qr) in basis.iter().enumerate() {
                axpy(&mut v, u[(r, col)], qr);
            }
            let mut vs = vec![v];
            if self.complex_linear {
                let iv = times_i(&vs[0]);
                vs.push(iv);
            }
            for v in vs {
                let mut r = self.h.apply(&v);
                axpy(&mut r, -lambda, &self.m.apply(&v));
                pairs.push(EigenPair {
                    value: lambda,
                    residual: norm2(&r),
                    vector: v,
                });
            }
        }
        pairs.sort_by(|a, b| a.value.total_cmp(&b.value));
        pairs.truncate(want);
        Ok(pairs)
    }
}

/// The `k` smallest eigenpairs of `H v = lambda M v`, for `H >= -M` and `M` positive definite.
pub fn smallest_eigenpairs(h: &SymmetricOperator, m: &SymmetricOperator, k: usize) -> Result<Vec<EigenPair>> {
    if h.num_blocks() != m.num_blocks() {
        return Err(Error::Dimension("Hessian and mass sizes differ".into()));
    }
    let k = k.min(h.dim());
    let probe = Lanczos::new(h, m, SHIFT_BELOW)?.run(1, None)?;
    let lowest = probe[0].value;
    let mut offset = 1e-4 * lowest.abs().max(1.0);
    for _ in 0..6 {
        match Lanczos::new(h, m, lowest - offset) {
            Ok(l) => return l.run(k, Some(RESIDUAL_TOL)),
            Err(Error::Factorization(_)) => offset *= 10.0,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Eigen(format!("no admissible shift below {lowest}")))
}

/// `|(v, iu)| / (|v| |u|)` in the L2 inner product given by `mass`; 0 when `u = 0`.
pub fn gauge_alignment(mass: &SymmetricOperator, u: &[Complex64], v: &[Complex64]) -> f64 {
    let iu = times_i(u);
    let nu = mass.quadratic(&iu).max(0.0).sqrt();
    let nv = mass.quadratic(v).max(0.0).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (mass.form(v, &iu).abs() / (nu * nv)).min(1.0)
}

pub fn classify(eigenvalues: &[f64], alignment: f64, tol_zero: f64) -> Classification {
    let l1 = eigenvalues.first().copied().unwrap_or(f64::NAN);
    let l2 = eigenvalues.get(1).copied().unwrap_or(f64::INFINITY);
    if l1 < -tol_zero {
        Classification::SaddleOrNegative
    } else if l1.abs() <= tol_zero && l2 >= GAP_MIN && alignment >= ALIGNMENT_MIN {
        Classification::QuasiIsolatedMinimizer
    } else if l2 <= tol_zero {
        Classification::SaddleOrNegative
    } else {
        Classification::Inconclusive
    }
}

/// Spectrum of the compressed `E''(u)` with respect to the compressed L2 mass.
pub fn hessian_spectrum(space: &Space, u: &[Complex64], k: usize) -> Result<SpectrumReport> {
    if k < 2 {
        return Err(Error::InvalidInput("at least two eigenvalues are needed".into()));
    }
    if u.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::InvalidInput("iterate contains non-finite values".into()));
    }
    let h = space.hessian(u)?;
    let m = space.mass();
    let pairs = smallest_eigenpairs(&h, m, k)?;
    let scale = h
        .diagonal()
        .iter()
        .zip(m.diagonal())
        .flat_map(|(hb, mb)| [hb[0] / mb[0], hb[3] / mb[3]])
        .fold(0.0f64, |a, b| a.max(b.abs()));
    let tol_zero = ZERO_REL * scale;
    let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.value).collect();
    let alignments: Vec<f64> = pairs.iter().map(|p| gauge_alignment(m, u, &p.vector)).collect();
    let zero_mode_alignment = alignments[0];
    let gap = eigenvalues.get(1).copied().unwrap_or(f64::NAN) - eigenvalues[0].max(0.0);
    Ok(SpectrumReport {
        classification: classify(&eigenvalues, zero_mode_alignment, tol_zero),
        eigenvalues,
        zero_mode_alignment,
        gap,
        tol_zero,
        alignments,
        residuals: pairs.iter().map(|p| p.residual / norm2(&p.vector)).collect(),
        eigenvectors: pairs.into_iter().map(|p| p.vector).collect(),
    })
}

/// The second eigenvalue of a quasi-isolated minimizer, standing in for the coercivity constant.
pub fn coercivity_proxy(report: &SpectrumReport) -> Result<f64> {
    if report.classification != Classification::QuasiIsolatedMinimizer {
        return Err(Error::Refused(format!(
            "coercivity proxy needs a quasi-isolated minimizer, spectrum is {:?}",
            report.classification
        )));
    }
    Ok(report.eigenvalues[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{scalar_block, Block};

    fn report(eigenvalues: Vec<f64>, classification: Classification) -> SpectrumReport {
        SpectrumReport {
            zero_mode_alignment: 1.0,
            gap: eigenvalues[1] - eigenvalues[0].max(0.0),
            classification,
            tol_zero: 1e-8,
            alignments: vec![1.0; eigenvalues.len()],
            residuals: vec![0.0; eigenvalues.len()],
            eigenvectors: Vec::new(),
            eigenvalues,
        }
    }

    #[test]
    fn proxy_examples() {
        let r = report(vec![1e-12, 3e-5, 1.0], Classification::QuasiIsolatedMinimizer);
        assert_eq!(coercivity_proxy(&r).unwrap(), 3e-5);
        let s = report(vec![-0.5, 3e-5, 1.0], Classification::SaddleOrNegative);
        assert!(coercivity_proxy(&s).is_err());
    }

    #[test]
    fn classification_rules() {
        assert_eq!(classify(&[1e-10, 1e-3], 0.999, 1e-8), Classification::QuasiIsolatedMinimizer);
        assert_eq!(classify(&[1e-10, 1e-3], 0.5, 1e-8), Classification::Inconclusive);
        assert_eq!(classify(&[1e-10, 1e-7], 0.999, 1e-8), Classification::Inconclusive);
        assert_eq!(classify(&[-1e-3, 1e-3], 0.999, 1e-8), Classification::SaddleOrNegative);
        assert_eq!(classify(&[0.0, -1e-6], 0.999, 1e-8), Classification::SaddleOrNegative);
    }

    /// Dense generalized eigenvalues through `M = L L^T`, as an oracle.
    fn dense_generalized(h: &SymmetricOperator, m: &SymmetricOperator) -> Vec<f64> {
        let n = h.dim();
        let hd = h.to_dense();
        let md = m.to_dense();
        let mm = Mat::<f64>::from_fn(n, n, |i, j| md[i][j]);
        let l = mm.llt(Side::Lower).unwrap();
        let hm = Mat::<f64>::from_fn(n, n, |i, j| hd[i][j]);
        // C = L^{-1} H L^{-T}
        let mut linv_t = Mat::<f64>::identity(n, n);
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(l.L(), linv_t.as_mut(), faer::Par::Seq);
        let c = &linv_t * &hm * linv_t.transpose();
        let mut ev = c.self_adjoint_eigenvalues(Side::Lower).unwrap();
        ev.sort_by(f64::total_cmp);
        ev
    }

    fn random_problem(nb: usize) -> (SymmetricOperator, SymmetricOperator) {
        let mut th = Vec::new();
        let mut tm = Vec::new();
        for i in 0..nb {
            let d = (i as f64 * 0.37).sin();
            th.push((i, i, [2.0 + d, 0.3 * d, 0.3 * d, 1.5 - d] as Block));
            tm.push((i, i, scalar_block(1.0 + 0.1 * (i % 3) as f64)));
            if i + 1 < nb {
                let b: Block = [-1.0, 0.2, -0.1, -0.8];
                th.push((i, i + 1, b));
                th.push((i + 1, i, crate::sparse::block_transpose(&b)));
                tm.push((i, i + 1, scalar_block(0.2)));
                tm.push((i + 1, i, scalar_block(0.2)));
            }
        }
        (SymmetricOperator::from_triplets(nb, th), SymmetricOperator::from_triplets(nb, tm))
    }

    #[test]
    fn lanczos_matches_dense_oracle() {
        let (h, m) = random_problem(40);
        let dense = dense_generalized(&h, &m);
        assert!(dense[0] > -1.0);
        let pairs = smallest_eigenpairs(&h, &m, 6).unwrap();
        for (p, d) in pairs.iter().zip(&dense) {
            assert!((p.value - d).abs() < 1e-9 * (1.0 + d.abs()), "{} vs {}", p.value, d);
            assert!(p.residual <= RESIDUAL_TOL * norm2(&p.vector));
            let rq = h.quadratic(&p.vector) / m.quadratic(&p.vector);
            assert!((rq - p.value).abs() <= 1e-8 * (1.0 + p.value.abs()));
        }
    }
}
