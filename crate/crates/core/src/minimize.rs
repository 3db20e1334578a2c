//! Nonlinear conjugate Sobolev gradient descent.
//!
//! At the iterate `u` the metric is
//! `(v, w)_{X,u} = a(v, w) + ((|u|^2 + |A|^2) v, w)`. The Sobolev gradient is
//! `g = u - delta` where `(delta, w)_{X,u} = ((1 + |A|^2) u, w)`, which makes
//! `(g, w)_{X,u} = <E'(u), w>`. Directions follow
//! `d = -g + beta d_prev` with the Polak-Ribiere parameter, and the step size
//! minimizes the quartic `t -> E(u + t d)` by golden-section search.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forms::{eval_quartic, QuarticLine};
use crate::space::Space;
use crate::spectrum::{Classification, SpectrumReport};
use crate::sparse::{axpy, norm2, real_dot, Factorization, SymmetricOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    StalledAtLowerBound,
    MaxIterations,
    ZeroDirection,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::StalledAtLowerBound => "stalled_at_lower_bound",
            Termination::MaxIterations => "max_iterations",
            Termination::ZeroDirection => "zero_direction",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsgOptions {
    /// Stop once the energy decrease of a step drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Step-size search interval.
    pub interval: (f64, f64),
    /// Golden-section tolerance relative to the interval width.
    pub tau_tol_rel: f64,
    /// Directions with metric norm at most this end the run.
    pub zero_direction: f64,
}

impl Default for CsgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-15,
            max_iter: 20_000,
            interval: (0.1, 30.0),
            tau_tol_rel: 1e-6,
            zero_direction: 1e-14,
        }
    }
}

/// Metric operator at `z` and its Cholesky factor.
#[derive(Debug)]
pub struct Metric {
    pub operator: SymmetricOperator,
    pub factor: Factorization,
}

/// Assembles and factors the metric at `z`. Fails when the metric is not positive definite.
pub fn metric_operator(space: &Space, z: &[Complex64]) -> Result<Metric> {
    let operator = space.metric(z)?;
    let factor = factor_metric(&operator, None)?;
    Ok(Metric { operator, factor })
}

/// Cholesky factor of a metric, reusing `previous` when its pattern matches.
///
/// Rounding can let Cholesky pass on a singular semidefinite matrix, so the
/// smallest eigenvalue is estimated by two inverse-iteration steps and
/// compared with the largest diagonal entry.
fn factor_metric(op: &SymmetricOperator, previous: Option<Factorization>) -> Result<Factorization> {
    let indefinite = |e: String| Error::Factorization(format!("metric is not positive definite: {e}"));
    let factor = match previous {
        Some(mut f) => {
            f.refactor_cholesky(op).map_err(|e| indefinite(e.to_string()))?;
            f
        }
        None => Factorization::cholesky(op).map_err(|e| indefinite(e.to_string()))?,
    };
    let max_diag = op.diagonal().iter().map(|b| b[0].max(b[3])).fold(0.0, f64::max);
    let mut x: Vec<Complex64> = (0..op.num_blocks())
        .map(|k| Complex64::new(1.0 + 0.1 * (k as f64).sin(), 0.5 + 0.1 * (k as f64).cos()))
        .collect();
    for _ in 0..2 {
        let nx = norm2(&x);
        x.iter_mut().for_each(|z| *z /= nx);
        x = factor.solve(&x);
    }
    let lambda = op.quadratic(&x) / real_dot(&x, &x);
    if !(lambda > 1e-12 * max_diag) {
        return Err(indefinite(format!("smallest eigenvalue estimate {lambda:e} against diagonal {max_diag:e}")));
    }
    Ok(factor)
}

#[derive(Debug, Clone)]
pub struct SobolevGradient {
    pub g: Vec<Complex64>,
    pub delta: Vec<Complex64>,
    /// `G_u g`, the covector of `E'(u)` on the space.
    pub covector: Vec<Complex64>,
    /// `(g, g)_{X,u}`
    pub norm_sq: f64,
}

/// Sobolev gradient of `E` at `u` with respect to the metric `(., .)_{X,u}`.
pub fn sobolev_gradient(space: &Space, u: &[Complex64], metric: &Metric) -> Result<SobolevGradient> {
    let rhs = space.rhs_operator().apply(u);
    let delta = metric.factor.solve(&rhs);
    let check = metric.operator.apply(&delta);
    let defect: f64 = check.iter().zip(&rhs).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    if !(defect <= 1e-8 * norm2(&rhs).max(f64::MIN_POSITIVE)) && defect > 1e-300 {
        return Err(Error::LinearSolve(format!("metric solve residual {defect:e}")));
    }
    let g: Vec<Complex64> = u.iter().zip(&delta).map(|(a, b)| a - b).collect();
    let covector = metric.operator.apply(&g);
    let norm_sq = real_dot(&covector, &g);
    Ok(SobolevGradient {
        g,
        delta,
        covector,
        norm_sq,
    })
}

/// Polak-Ribiere parameter `max(0, (g, g - g_prev)_n / (g_prev, g_prev)_{n-1})`.
///
/// `c` is the metric covector of `g` at the current iterate; `prev_norm_sq` is
/// `(g_prev, g_prev)` in the previous metric. Returns `None` for a vanishing denominator.
pub fn polak_ribiere(c: &[Complex64], g: &[Complex64], g_prev: &[Complex64], prev_norm_sq: f64) -> Option<f64> {
    if !(prev_norm_sq > 0.0) {
        return None;
    }
    let num = real_dot(c, g) - real_dot(c, g_prev);
    Some((num / prev_norm_sq).max(0.0))
}

/// Golden-section minimization of the quartic `phi` on `[lo, hi]`.
///
/// The bracket is chosen around the best of a uniform sample so that the
/// search settles in the lowest valley. Returns the step and whether it sits
/// at the lower bound.
pub fn golden_section(phi: &QuarticLine, lo: f64, hi: f64, tol: f64) -> (f64, bool) {
    const SAMPLES: usize = 64;
    let h = (hi - lo) / SAMPLES as f64;
    let (mut best, mut best_val) = (0usize, f64::INFINITY);
    for k in 0..=SAMPLES {
        let v = eval_quartic(phi, lo + k as f64 * h);
        if v < best_val {
            best_val = v;
            best = k;
        }
    }
    let mut a = lo + best.saturating_sub(1) as f64 * h;
    let mut b = (lo + (best + 1) as f64 * h).min(hi);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (eval_quartic(phi, x1), eval_quartic(phi, x2));
    while b - a > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = eval_quartic(phi, x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = eval_quartic(phi, x2);
        }
    }
    let mut tau = 0.5 * (a + b);
    // the interval ends are candidates too
    for end in [lo, hi] {
        if eval_quartic(phi, end) < eval_quartic(phi, tau) {
            tau = end;
        }
    }
    (tau, tau - lo <= tol)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinimizeRun {
    /// Coefficients in the space.
    #[serde(skip)]
    pub coefficients: Vec<Complex64>,
    /// Fine representation of the final iterate.
    #[serde(skip)]
    pub field: Vec<Complex64>,
    pub iterations: usize,
    pub termination: Termination,
    pub final_energy: f64,
    pub energy_trace: Vec<f64>,
    pub step_trace: Vec<f64>,
    pub beta_trace: Vec<f64>,
    pub gradient_norm_trace: Vec<f64>,
}

/// Flags runs whose steps keep landing on the lower step bound while the energy increases.
#[derive(Debug, Clone, Default)]
pub struct StallDetector {
    consecutive: usize,
}

impl StallDetector {
    /// Consecutive lower-bound steps with increasing energy that count as a stall.
    pub const LIMIT: usize = 2;

    /// Records one step with energy change `decrease = E_old - E_new`; true once stalled.
    pub fn record(&mut self, at_lower: bool, decrease: f64) -> bool {
        if at_lower && decrease < 0.0 {
            self.consecutive += 1;
        } else {
            self.consecutive = 0;
        }
        self.consecutive >= Self::LIMIT
    }
}

/// Runs the conjugate Sobolev gradient method from the coefficients `u0`.
/// When `log` is given, one tab-separated line `n E tau beta |g|` is written per step.
pub fn csg_minimize(
    space: &Space,
    u0: &[Complex64],
    opts: &CsgOptions,
    mut log: Option<&mut dyn Write>,
) -> Result<MinimizeRun> {
    if u0.len() != space.dim() {
        return Err(Error::Dimension(format!(
            "initial value has {} coefficients, space has {}",
            u0.len(),
            space.dim()
        )));
    }
    if u0.iter().all(|z| *z == Complex64::new(0.0, 0.0)) {
        return Err(Error::InvalidInput("the initial value must not vanish".into()));
    }
    let mut u = u0.to_vec();
    let mut energy = space.energy(&u);
    let mut run = MinimizeRun {
        coefficients: Vec::new(),
        field: Vec::new(),
        iterations: 0,
        termination: Termination::MaxIterations,
        final_energy: energy,
        energy_trace: vec![energy],
        step_trace: Vec::new(),
        beta_trace: Vec::new(),
        gradient_norm_trace: Vec::new(),
    };
    let mut prev: Option<(Vec<Complex64>, Vec<Complex64>, f64)> = None; // (g, d, |g|^2)
    let mut stall = StallDetector::default();
    let mut metric: Option<Metric> = None;
    let (lo, hi) = opts.interval;
    let tau_tol = opts.tau_tol_rel * (hi - lo);

    while run.iterations < opts.max_iter {
        let op = space.metric(&u)?;
        let factor = factor_metric(&op, metric.take().map(|m| m.factor))?;
        let m = Metric { operator: op, factor };
        let sg = sobolev_gradient(space, &u, &m)?;
        let mut beta = match &prev {
            None => 0.0,
            Some((g_prev, _, n_prev)) => match polak_ribiere(&sg.covector, &sg.g, g_prev, *n_prev) {
                Some(b) => b,
                None => {
                    run.termination = Termination::ZeroDirection;
                    break;
                }
            },
        };
        let mut d: Vec<Complex64> = sg.g.iter().map(|z| -z).collect();
        if let Some((_, d_prev, _)) = &prev {
            axpy(&mut d, beta, d_prev);
            if real_dot(&sg.covector, &d) >= 0.0 {
                // not a descent direction: restart with steepest descent
                beta = 0.0;
                d = sg.g.iter().map(|z| -z).collect();
            }
        }
        let d_norm = m.operator.quadratic(&d).max(0.0).sqrt();
        if d_norm <= opts.zero_direction {
            run.termination = Termination::ZeroDirection;
            break;
        }
        let phi = space.quartic_line(&u, &d);
        let (tau, at_lower) = golden_section(&phi, lo, hi, tau_tol);
        axpy(&mut u, tau, &d);
        let new_energy = space.energy(&u);
        let decrease = energy - new_energy;
        run.iterations += 1;
        run.energy_trace.push(new_energy);
        run.step_trace.push(tau);
        run.beta_trace.push(beta);
        run.gradient_norm_trace.push(sg.norm_sq.max(0.0).sqrt());
        if let Some(w) = log.as_deref_mut() {
            writeln!(
                w,
                "{}\t{:.15e}\t{:.6e}\t{:.6e}\t{:.6e}",
                run.iterations,
                new_energy,
                tau,
                beta,
                sg.norm_sq.max(0.0).sqrt()
            )
            .map_err(|e| Error::io("iteration log", e))?;
        }
        energy = new_energy;
        prev = Some((sg.g, d, sg.norm_sq));
        metric = Some(m);
        if stall.record(at_lower, decrease) || !new_energy.is_finite() {
            run.termination = Termination::StalledAtLowerBound;
            break;
        }
        if decrease < opts.tol && decrease >= -1e-12 * (1.0 + energy.abs()) {
            run.termination = Termination::Converged;
            break;
        }
    }
    run.final_energy = energy;
    run.field = space.prolong(&u);
    run.coefficients = u;
    Ok(run)
}

/// Relative size of the perturbation used by [`restart_with_perturbation`].
pub const RESTART_SCALE: f64 = 1e-2;

/// Perturbs `u` along the lowest non-gauge eigenvector with a nonpositive eigenvalue.
///
/// The direction is made L2-orthogonal to `iu`, normalized in the metric at `u`,
/// and scaled to `RESTART_SCALE` times the metric norm of `u`. Refuses when the
/// report does not show such an eigenvalue.
pub fn restart_with_perturbation(space: &Space, u: &[Complex64], report: &SpectrumReport) -> Result<Vec<Complex64>> {
    if report.classification != Classification::SaddleOrNegative {
        return Err(Error::Refused(format!(
            "spectrum is classified {:?}; no restart needed",
            report.classification
        )));
    }
    let idx = (0..report.eigenvalues.len())
        .find(|&k| report.eigenvalues[k] <= report.tol_zero && report.alignments[k] < crate::spectrum::ALIGNMENT_MIN)
        .ok_or_else(|| Error::Refused("no nonpositive eigenvalue beyond the gauge mode".into()))?;
    let mut v = report.eigenvectors[idx].clone();
    let iu: Vec<Complex64> = u.iter().map(|z| z * Complex64::new(0.0, 1.0)).collect();
    let mass = space.mass();
    let iu_sq = mass.quadratic(&iu);
    if iu_sq > 0.0 {
        let c = mass.form(&v, &iu) / iu_sq;
        axpy(&mut v, -c, &iu);
    }
    let metric = space.metric(u)?;
    let vn = metric.quadratic(&v).max(0.0).sqrt();
    if !(vn > 0.0) {
        return Err(Error::Refused("restart direction vanishes after removing the gauge mode".into()));
    }
    let un = metric.quadratic(u).max(0.0).sqrt();
    let eps = if un > 0.0 { RESTART_SCALE * un } else { RESTART_SCALE };
    let mut out = u.to_vec();
    axpy(&mut out, eps / vn, &v);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_section_interior_minimum() {
        // phi(t) = (t - 2)^2 (t + 1)^2 / 10 + 0.3 has its minimum on [0.1, 30] at t = 2
        let c: QuarticLine = [0.4 + 0.3, 0.4, -0.3, -0.2, 0.1];
        let check = |t: f64| (t - 2.0).powi(2) * (t + 1.0).powi(2) / 10.0 + 0.3;
        assert!((eval_quartic(&c, 1.3) - check(1.3)).abs() < 1e-12);
        let tol = 1e-6 * 29.9;
        let (tau, at_lower) = golden_section(&c, 0.1, 30.0, tol);
        assert!(!at_lower);
        assert!((tau - 2.0).abs() <= tol);
        let grid_best = (0..=100_000)
            .map(|k| 0.1 + 29.9 * k as f64 / 100_000.0)
            .min_by(|a, b| check(*a).total_cmp(&check(*b)))
            .unwrap();
        assert!((tau - grid_best).abs() <= 29.9 / 100_000.0);
    }

    #[test]
    fn golden_section_increasing_flags_lower_bound() {
        let c: QuarticLine = [1.0, 2.0, 0.5, 0.0, 0.01];
        let (tau, at_lower) = golden_section(&c, 0.1, 30.0, 1e-6 * 29.9);
        assert_eq!(tau, 0.1);
        assert!(at_lower);
    }

    #[test]
    fn stall_detector_needs_consecutive_increases() {
        let mut s = StallDetector::default();
        assert!(!s.record(true, -1e-3));
        assert!(!s.record(false, -1e-3));
        assert!(!s.record(true, -1e-3));
        assert!(s.record(true, -1e-3));
        let mut s = StallDetector::default();
        assert!(!s.record(true, 1e-3));
        assert!(!s.record(true, 1e-3));
    }

    #[test]
    fn polak_ribiere_examples() {
        let g = vec![Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.0)];
        // identity metric: covector = g
        let n = real_dot(&g, &g);
        assert_eq!(polak_ribiere(&g, &g, &g, n), Some(0.0));
        let g2: Vec<Complex64> = g.iter().map(|z| z * 2.0).collect();
        assert_eq!(polak_ribiere(&g, &g, &g2, 4.0 * n), Some(0.0));
        assert_eq!(polak_ribiere(&g, &g, &g, 0.0), None);
        let gp = vec![Complex64::new(0.2, -1.0), Complex64::new(0.1, 0.3)];
        let np = real_dot(&gp, &gp);
        let want = ((real_dot(&g, &g) - real_dot(&g, &gp)) / np).max(0.0);
        assert!((polak_ribiere(&g, &g, &gp, np).unwrap() - want).abs() < 1e-15);
    }
}
