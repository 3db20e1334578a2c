//! P1 assembly of the Ginzburg-Landau forms over complex nodal fields.
//!
//! The reduced energy is
//! `E(v) = 1/2 a(v,v) + 1/4 int (1 - |v|^2)^2` with the magnetic form
//! `a(v,w) = Re int (i/kappa grad v + A v) . conj(i/kappa grad w + A w)`.
//! Derivatives are returned as covectors (assembled load vectors) and are
//! paired with test fields through [`real_dot`].

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::sparse::{complex_block, real_dot, scalar_block, Block, SymmetricOperator};

const C0: Complex64 = Complex64::new(0.0, 0.0);

/// Magnetic vector potential.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Potential {
    Zero,
    /// `sqrt(2) (sin(pi x) cos(pi y), -cos(pi x) sin(pi y))`: divergence free,
    /// tangential on the boundary, with `int |A|^2 = 1`.
    #[default]
    SinCos,
}

impl Potential {
    #[inline]
    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        match self {
            Potential::Zero => [0.0, 0.0],
            Potential::SinCos => {
                let (sx, cx) = (std::f64::consts::PI * p[0]).sin_cos();
                let (sy, cy) = (std::f64::consts::PI * p[1]).sin_cos();
                let s = std::f64::consts::SQRT_2;
                [s * sx * cy, -s * cx * sy]
            }
        }
    }

    #[inline]
    pub fn norm_sq(&self, p: [f64; 2]) -> f64 {
        let a = self.eval(p);
        a[0] * a[0] + a[1] * a[1]
    }
}

/// Symmetric quadrature rules on triangles (barycentric points, weights summing to 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadRule {
    /// Edge midpoints, exact for degree 2.
    EdgeMidpoint,
    /// Six-point rule, exact for degree 4.
    Degree4,
}

const EDGE_MIDPOINT: [([f64; 3], f64); 3] = [
    ([0.5, 0.5, 0.0], 1.0 / 3.0),
    ([0.0, 0.5, 0.5], 1.0 / 3.0),
    ([0.5, 0.0, 0.5], 1.0 / 3.0),
];

const D4_A: f64 = 0.445_948_490_915_964_9;
const D4_WA: f64 = 0.223_381_589_678_011_47;
const D4_B: f64 = 0.091_576_213_509_770_74;
const D4_WB: f64 = 0.109_951_743_655_321_87;

const DEGREE4: [([f64; 3], f64); 6] = [
    ([1.0 - 2.0 * D4_A, D4_A, D4_A], D4_WA),
    ([D4_A, 1.0 - 2.0 * D4_A, D4_A], D4_WA),
    ([D4_A, D4_A, 1.0 - 2.0 * D4_A], D4_WA),
    ([1.0 - 2.0 * D4_B, D4_B, D4_B], D4_WB),
    ([D4_B, 1.0 - 2.0 * D4_B, D4_B], D4_WB),
    ([D4_B, D4_B, 1.0 - 2.0 * D4_B], D4_WB),
];

impl QuadRule {
    pub fn points(&self) -> &'static [([f64; 3], f64)] {
        match self {
            QuadRule::EdgeMidpoint => &EDGE_MIDPOINT,
            QuadRule::Degree4 => &DEGREE4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub kappa: f64,
    pub potential: Potential,
    pub quad_linear: QuadRule,
    pub quad_quartic: QuadRule,
}

impl Params {
    pub fn new(kappa: f64, potential: Potential) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::Config(format!("kappa must be positive and finite, got {kappa}")));
        }
        Ok(Self {
            kappa,
            potential,
            quad_linear: QuadRule::EdgeMidpoint,
            quad_quartic: QuadRule::Degree4,
        })
    }
}

/// Complex nodal values on a uniform mesh with `n` subdivisions.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    n: usize,
    values: Vec<Complex64>,
}

impl Field {
    pub fn new(mesh: &Mesh, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != mesh.num_vertices() {
            return Err(Error::Dimension(format!(
                "field has {} values, mesh has {} vertices",
                values.len(),
                mesh.num_vertices()
            )));
        }
        if values.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput("field contains non-finite values".into()));
        }
        Ok(Self { n: mesh.n(), values })
    }

    pub fn zeros(mesh: &Mesh) -> Self {
        Self {
            n: mesh.n(),
            values: vec![C0; mesh.num_vertices()],
        }
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(mesh: &Mesh, f: impl Fn(f64, f64) -> Complex64) -> Result<Self> {
        Self::new(mesh, mesh.vertices().iter().map(|p| f(p[0], p[1])).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }
}

/// Geometry of one P1 element.
#[derive(Debug, Clone, Copy)]
pub struct Element {
    pub vertices: [usize; 3],
    pub points: [[f64; 2]; 3],
    pub area: f64,
    pub grads: [[f64; 2]; 3],
}

impl Element {
    pub fn new(mesh: &Mesh, t: usize) -> Self {
        let vertices = mesh.triangles()[t];
        let points = vertices.map(|v| mesh.vertices()[v]);
        let [p0, p1, p2] = points;
        let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
        let grads = [
            [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det],
            [(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det],
            [(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det],
        ];
        Self {
            vertices,
            points,
            area: 0.5 * det.abs(),
            grads,
        }
    }

    #[inline]
    pub fn point(&self, bary: &[f64; 3]) -> [f64; 2] {
        let mut p = [0.0; 2];
        for k in 0..3 {
            p[0] += bary[k] * self.points[k][0];
            p[1] += bary[k] * self.points[k][1];
        }
        p
    }

    #[inline]
    pub fn value(&self, v: &[Complex64], bary: &[f64; 3]) -> Complex64 {
        bary[0] * v[self.vertices[0]] + bary[1] * v[self.vertices[1]] + bary[2] * v[self.vertices[2]]
    }
}

fn elements(mesh: &Mesh) -> impl Iterator<Item = Element> + '_ {
    (0..mesh.num_triangles()).map(move |t| Element::new(mesh, t))
}

fn mesh_operator(mesh: &Mesh) -> SymmetricOperator {
    let pattern: Vec<Vec<usize>> = mesh
        .vertex_neighbors()
        .into_iter()
        .enumerate()
        .map(|(i, mut row)| {
            let k = row.partition_point(|&j| j < i);
            row.insert(k, i);
            row
        })
        .collect();
    SymmetricOperator::with_pattern(&pattern)
}

/// Magnetic form `a(.,.)`: exact stiffness plus quadrature for the `A` terms.
pub fn assemble_magnetic(mesh: &Mesh, params: &Params) -> SymmetricOperator {
    let mut op = mesh_operator(mesh);
    let k2 = 1.0 / (params.kappa * params.kappa);
    let quad = params.quad_linear.points();
    for el in elements(mesh) {
        let mut local = [[Complex64::new(0.0, 0.0); 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                let g = el.grads[a][0] * el.grads[b][0] + el.grads[a][1] * el.grads[b][1];
                local[b][a].re += k2 * g * el.area;
            }
        }
        if params.potential != Potential::Zero {
            for (bary, w) in quad {
                let aq = params.potential.eval(el.point(bary));
                let wq = w * el.area;
                let a2 = aq[0] * aq[0] + aq[1] * aq[1];
                for a in 0..3 {
                    let adg_a = aq[0] * el.grads[a][0] + aq[1] * el.grads[a][1];
                    for b in 0..3 {
                        let adg_b = aq[0] * el.grads[b][0] + aq[1] * el.grads[b][1];
                        // entry b(phi_a, phi_b) with trial a, test b
                        let cross = (bary[b] * adg_a - bary[a] * adg_b) / params.kappa;
                        local[b][a] += Complex64::new(a2 * bary[a] * bary[b], cross) * wq;
                    }
                }
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                op.add_block(el.vertices[b], el.vertices[a], &complex_block(local[b][a]));
            }
        }
    }
    op
}

/// Exact P1 mass matrix.
pub fn assemble_mass(mesh: &Mesh) -> SymmetricOperator {
    let mut op = mesh_operator(mesh);
    for el in elements(mesh) {
        for a in 0..3 {
            for b in 0..3 {
                let m = if a == b { el.area / 6.0 } else { el.area / 12.0 };
                op.add_block(el.vertices[b], el.vertices[a], &scalar_block(m));
            }
        }
    }
    op
}

/// Exact P1 stiffness matrix `int grad v . grad w`.
pub fn assemble_stiffness(mesh: &Mesh) -> SymmetricOperator {
    let mut op = mesh_operator(mesh);
    for el in elements(mesh) {
        for a in 0..3 {
            for b in 0..3 {
                let g = el.grads[a][0] * el.grads[b][0] + el.grads[a][1] * el.grads[b][1];
                op.add_block(el.vertices[b], el.vertices[a], &scalar_block(g * el.area));
            }
        }
    }
    op
}

/// Mass matrix weighted by `weight(triangle, barycentric, point)` at the points of `rule`.
pub fn assemble_weighted_mass(
    mesh: &Mesh,
    rule: QuadRule,
    weight: impl Fn(usize, &[f64; 3], [f64; 2]) -> f64,
) -> Result<SymmetricOperator> {
    let mut op = mesh_operator(mesh);
    let quad = rule.points();
    for t in 0..mesh.num_triangles() {
        let el = Element::new(mesh, t);
        let mut local = [[0.0; 3]; 3];
        for (bary, w) in quad {
            let p = el.point(bary);
            let rho = weight(t, bary, p);
            if !(rho >= 0.0) || !rho.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "weight {rho} at ({:.6}, {:.6}) is negative or not finite",
                    p[0], p[1]
                )));
            }
            for a in 0..3 {
                for b in 0..3 {
                    local[b][a] += w * el.area * rho * bary[a] * bary[b];
                }
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                op.add_block(el.vertices[b], el.vertices[a], &scalar_block(local[b][a]));
            }
        }
    }
    Ok(op)
}

/// Mass matrix weighted by `|A|^2`, integrated with the rule used for the `A` terms.
pub fn assemble_potential_mass(mesh: &Mesh, params: &Params) -> SymmetricOperator {
    let pot = params.potential;
    assemble_weighted_mass(mesh, params.quad_linear, |_, _, p| pot.norm_sq(p))
        .expect("|A|^2 is nonnegative")
}

/// Mass matrix weighted by `|z|^2` of the P1 field `z`, with the quartic rule.
pub fn assemble_modulus_mass(mesh: &Mesh, params: &Params, z: &[Complex64]) -> Result<SymmetricOperator> {
    if z.len() != mesh.num_vertices() {
        return Err(Error::Dimension("weight field does not match mesh".into()));
    }
    let tris = mesh.triangles();
    assemble_weighted_mass(mesh, params.quad_quartic, |t, bary, _| {
        let v = tris[t];
        (bary[0] * z[v[0]] + bary[1] * z[v[1]] + bary[2] * z[v[2]]).norm_sqr()
    })
}

/// Coefficients `c[0] + c[1] t + ... + c[4] t^4` of `E(u + t d)`.
pub type QuarticLine = [f64; 5];

pub fn eval_quartic(c: &QuarticLine, t: f64) -> f64 {
    (((c[4] * t + c[3]) * t + c[2]) * t + c[1]) * t + c[0]
}

/// Assembled forms for one mesh and parameter set.
#[derive(Debug, Clone)]
pub struct FormSet {
    mesh: Arc<Mesh>,
    params: Params,
    magnetic: SymmetricOperator,
    mass: SymmetricOperator,
    stiffness: SymmetricOperator,
    potential_mass: SymmetricOperator,
}

impl FormSet {
    pub fn new(mesh: Arc<Mesh>, params: Params) -> Self {
        let magnetic = assemble_magnetic(&mesh, &params);
        let mass = assemble_mass(&mesh);
        let stiffness = assemble_stiffness(&mesh);
        let potential_mass = assemble_potential_mass(&mesh, &params);
        Self {
            mesh,
            params,
            magnetic,
            mass,
            stiffness,
            potential_mass,
        }
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn magnetic(&self) -> &SymmetricOperator {
        &self.magnetic
    }

    pub fn mass(&self) -> &SymmetricOperator {
        &self.mass
    }

    pub fn stiffness(&self) -> &SymmetricOperator {
        &self.stiffness
    }

    pub fn potential_mass(&self) -> &SymmetricOperator {
        &self.potential_mass
    }

    fn check(&self, v: &[Complex64]) {
        assert_eq!(v.len(), self.mesh.num_vertices(), "field does not live on this mesh");
    }

    /// `1/4 int (1 - |v|^2)^2`
    pub fn quartic_energy(&self, v: &[Complex64]) -> f64 {
        self.check(v);
        let quad = self.params.quad_quartic.points();
        let mut total = 0.0;
        for el in elements(&self.mesh) {
            let mut s = 0.0;
            for (bary, w) in quad {
                let q = 1.0 - el.value(v, bary).norm_sqr();
                s += w * q * q;
            }
            total += el.area * s;
        }
        0.25 * total
    }

    pub fn energy(&self, v: &[Complex64]) -> f64 {
        0.5 * self.magnetic.quadratic(v) + self.quartic_energy(v)
    }

    /// Covector of `E'(v)`.
    pub fn gradient(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut g = self.magnetic.apply(v);
        let quad = self.params.quad_quartic.points();
        for el in elements(&self.mesh) {
            for (bary, w) in quad {
                let vq = el.value(v, bary);
                let s = (vq.norm_sqr() - 1.0) * w * el.area;
                for k in 0..3 {
                    g[el.vertices[k]] += vq * (s * bary[k]);
                }
            }
        }
        g
    }

    /// Covector of `E''(u) v`.
    pub fn hessian_apply(&self, u: &[Complex64], v: &[Complex64]) -> Vec<Complex64> {
        self.check(u);
        let mut out = self.magnetic.apply(v);
        let quad = self.params.quad_quartic.points();
        for el in elements(&self.mesh) {
            for (bary, w) in quad {
                let uq = el.value(u, bary);
                let vq = el.value(v, bary);
                let proj = uq.re * vq.re + uq.im * vq.im;
                let r = (uq.norm_sqr() - 1.0) * vq + 2.0 * proj * uq;
                for k in 0..3 {
                    out[el.vertices[k]] += r * (w * el.area * bary[k]);
                }
            }
        }
        out
    }

    /// Nonlinear part of `E''(u)` as an operator.
    pub fn hessian_nonlinear(&self, u: &[Complex64]) -> SymmetricOperator {
        self.check(u);
        let mut op = mesh_operator(&self.mesh);
        let quad = self.params.quad_quartic.points();
        for el in elements(&self.mesh) {
            let mut local = [[[0.0; 4]; 3]; 3];
            for (bary, w) in quad {
                let uq = el.value(u, bary);
                let d = uq.norm_sqr() - 1.0;
                let m: Block = [
                    d + 2.0 * uq.re * uq.re,
                    2.0 * uq.re * uq.im,
                    2.0 * uq.re * uq.im,
                    d + 2.0 * uq.im * uq.im,
                ];
                for a in 0..3 {
                    for b in 0..3 {
                        let s = w * el.area * bary[a] * bary[b];
                        for k in 0..4 {
                            local[b][a][k] += s * m[k];
                        }
                    }
                }
            }
            for a in 0..3 {
                for b in 0..3 {
                    op.add_block(el.vertices[b], el.vertices[a], &local[b][a]);
                }
            }
        }
        op
    }

    /// `E''(u)` as an operator.
    pub fn hessian_operator(&self, u: &[Complex64]) -> SymmetricOperator {
        self.magnetic
            .add_scaled(1.0, &self.hessian_nonlinear(u))
            .expect("same mesh")
    }

    pub fn l2_norm(&self, v: &[Complex64]) -> f64 {
        self.mass.quadratic(v).max(0.0).sqrt()
    }

    pub fn h1kappa_norm(&self, v: &[Complex64]) -> f64 {
        let k2 = 1.0 / (self.params.kappa * self.params.kappa);
        (k2 * self.stiffness.quadratic(v) + self.mass.quadratic(v)).max(0.0).sqrt()
    }

    /// Exact polynomial `t -> E(u + t d)` under the declared quadratures.
    pub fn quartic_line(&self, u: &[Complex64], d: &[Complex64]) -> QuarticLine {
        self.check(u);
        self.check(d);
        let ku = self.magnetic.apply(u);
        let kd = self.magnetic.apply(d);
        let mut c = [
            0.5 * real_dot(&ku, u),
            real_dot(&kd, u),
            0.5 * real_dot(&kd, d),
            0.0,
            0.0,
        ];
        let quad = self.params.quad_quartic.points();
        let mut q = [0.0; 5];
        for el in elements(&self.mesh) {
            for (bary, w) in quad {
                let uq = el.value(u, bary);
                let dq = el.value(d, bary);
                let q0 = 1.0 - uq.norm_sqr();
                let p1 = 2.0 * (uq.re * dq.re + uq.im * dq.im);
                let p2 = dq.norm_sqr();
                let s = w * el.area;
                q[0] += s * q0 * q0;
                q[1] += s * (-2.0 * q0 * p1);
                q[2] += s * (p1 * p1 - 2.0 * q0 * p2);
                q[3] += s * (2.0 * p1 * p2);
                q[4] += s * p2 * p2;
            }
        }
        for k in 0..5 {
            c[k] += 0.25 * q[k];
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::norm2;

    fn forms(n: usize, kappa: f64, potential: Potential) -> FormSet {
        let mesh = Arc::new(Mesh::build_uniform(n).unwrap());
        FormSet::new(mesh, Params::new(kappa, potential).unwrap())
    }

    fn interp(f: &FormSet, g: impl Fn(f64, f64) -> Complex64) -> Vec<Complex64> {
        Field::interpolate(f.mesh(), g).unwrap().into_values()
    }

    fn pseudo_random(n: usize, seed: u64) -> Vec<Complex64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        (0..n).map(|_| Complex64::new(next(), next())).collect()
    }

    #[test]
    fn quadrature_exactness() {
        // int over the reference triangle of l1^a l2^b l3^c = 2 a! b! c! / (a+b+c+2)! |T|
        let fact = |k: u32| (1..=k).product::<u32>().max(1) as f64;
        for rule in [QuadRule::EdgeMidpoint, QuadRule::Degree4] {
            let deg = if rule == QuadRule::EdgeMidpoint { 2 } else { 4 };
            let wsum: f64 = rule.points().iter().map(|p| p.1).sum();
            assert!((wsum - 1.0).abs() < 1e-15);
            for a in 0..=deg {
                for b in 0..=(deg - a) {
                    let c = deg - a - b;
                    let q: f64 = rule
                        .points()
                        .iter()
                        .map(|(l, w)| w * l[0].powi(a as i32) * l[1].powi(b as i32) * l[2].powi(c as i32))
                        .sum();
                    let exact = 2.0 * fact(a) * fact(b) * fact(c) / fact(a + b + c + 2);
                    assert!((q - exact).abs() < 1e-15, "{rule:?} {a} {b} {c}: {q} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn magnetic_examples() {
        let f = forms(4, 3.0, Potential::Zero);
        let one = interp(&f, |_, _| Complex64::new(1.0, 0.0));
        assert!(f.magnetic().quadratic(&one).abs() < 1e-14);
        let x = interp(&f, |x, _| Complex64::new(x, 0.0));
        assert!((f.magnetic().quadratic(&x) - 1.0 / 9.0).abs() < 1e-14);
        for n in [2, 4, 8] {
            let f = forms(n, 3.0, Potential::SinCos);
            let one = interp(&f, |_, _| Complex64::new(1.0, 0.0));
            assert!((f.magnetic().quadratic(&one) - 1.0).abs() < 1e-13, "n = {n}");
            assert!((f.potential_mass().quadratic(&one) - 1.0).abs() < 1e-13);
            assert!((f.energy(&one) - 0.5).abs() < 1e-13);
        }
    }

    #[test]
    fn magnetic_symmetric_and_semidefinite() {
        let f = forms(5, 2.0, Potential::SinCos);
        assert_eq!(f.magnetic().max_asymmetry(), 0.0);
        for seed in 0..20 {
            let v = pseudo_random(f.mesh().num_vertices(), seed);
            assert!(f.magnetic().quadratic(&v) >= -1e-12 * real_dot(&v, &v));
        }
    }

    #[test]
    fn mass_examples() {
        let f = forms(4, 1.0, Potential::Zero);
        let one = interp(&f, |_, _| Complex64::new(1.0, 0.0));
        let i = interp(&f, |_, _| Complex64::new(0.0, 1.0));
        assert!((f.mass().quadratic(&one) - 1.0).abs() < 1e-14);
        assert!((f.mass().quadratic(&i) - 1.0).abs() < 1e-14);
        // hat at an interior vertex: six incident triangles of area h^2/2, int hat^2 = |T|/6 each
        let mut hat = vec![C0; f.mesh().num_vertices()];
        hat[f.mesh().vertex_index(2, 2)] = Complex64::new(1.0, 0.0);
        let h = 0.25;
        assert!((f.mass().quadratic(&hat) - 6.0 * (h * h / 2.0) / 6.0).abs() < 1e-15);
        let w1 = assemble_weighted_mass(f.mesh(), QuadRule::Degree4, |_, _, _| 1.0).unwrap();
        let v = pseudo_random(f.mesh().num_vertices(), 3);
        assert!((w1.quadratic(&v) - f.mass().quadratic(&v)).abs() < 1e-13);
        let w0 = assemble_weighted_mass(f.mesh(), QuadRule::Degree4, |_, _, _| 0.0).unwrap();
        assert_eq!(w0.max_abs(), 0.0);
        assert!(assemble_weighted_mass(f.mesh(), QuadRule::Degree4, |_, _, _| -1.0).is_err());
    }

    #[test]
    fn energy_examples() {
        let f = forms(4, 2.0, Potential::SinCos);
        let zero = vec![C0; f.mesh().num_vertices()];
        assert!((f.energy(&zero) - 0.25).abs() < 1e-15);
        assert!(norm2(&f.gradient(&zero)) == 0.0);
        let g = forms(4, 2.0, Potential::Zero);
        let one = interp(&g, |_, _| Complex64::new(1.0, 0.0));
        assert!(g.energy(&one).abs() < 1e-15);
        assert!(norm2(&g.gradient(&one)) < 1e-15);
        let zero = vec![C0; g.mesh().num_vertices()];
        assert!((g.hessian_apply(&zero, &one).iter().zip(&one).map(|(a, b)| a.re * b.re).sum::<f64>() + 1.0).abs() < 1e-14);
    }

    #[test]
    fn norms() {
        let f = forms(4, 3.0, Potential::SinCos);
        let one = interp(&f, |_, _| Complex64::new(1.0, 0.0));
        assert!((f.h1kappa_norm(&one) - 1.0).abs() < 1e-14);
        assert!((f.l2_norm(&one) - 1.0).abs() < 1e-14);
        // nodal interpolant of x is x itself, so both integrals are exact
        let x = interp(&f, |x, _| Complex64::new(x, 0.0));
        assert!((f.h1kappa_norm(&x).powi(2) - (1.0 / 9.0 + 1.0 / 3.0)).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let f = forms(4, 2.5, Potential::SinCos);
        let nv = f.mesh().num_vertices();
        let v = pseudo_random(nv, 11);
        let w = pseudo_random(nv, 12);
        let exact = real_dot(&f.gradient(&v), &w);
        let defect = |eps: f64| {
            let vp: Vec<_> = v.iter().zip(&w).map(|(a, b)| a + b * eps).collect();
            let vm: Vec<_> = v.iter().zip(&w).map(|(a, b)| a - b * eps).collect();
            ((f.energy(&vp) - f.energy(&vm)) / (2.0 * eps) - exact).abs()
        };
        let d = [defect(1e-2), defect(1e-3)];
        let order = (d[0] / d[1]).log10();
        assert!(order >= 1.8, "observed order {order} from {d:?}");
    }

    #[test]
    fn hessian_symmetric_and_consistent() {
        let f = forms(4, 2.5, Potential::SinCos);
        let nv = f.mesh().num_vertices();
        let u = pseudo_random(nv, 21);
        let v = pseudo_random(nv, 22);
        let w = pseudo_random(nv, 23);
        let hvw = real_dot(&f.hessian_apply(&u, &v), &w);
        let hwv = real_dot(&f.hessian_apply(&u, &w), &v);
        assert!((hvw - hwv).abs() < 1e-12 * (1.0 + hvw.abs()));
        let op = f.hessian_operator(&u);
        assert!(op.max_asymmetry() < 1e-15);
        assert!((op.form(&v, &w) - hvw).abs() < 1e-12 * (1.0 + hvw.abs()));
        let eps = 1e-4;
        let up: Vec<_> = u.iter().zip(&v).map(|(a, b)| a + b * eps).collect();
        let um: Vec<_> = u.iter().zip(&v).map(|(a, b)| a - b * eps).collect();
        let fd = (real_dot(&f.gradient(&up), &w) - real_dot(&f.gradient(&um), &w)) / (2.0 * eps);
        assert!((fd - hvw).abs() < 1e-6 * (1.0 + hvw.abs()));
    }

    #[test]
    fn quartic_line_is_exact() {
        let f = forms(4, 2.0, Potential::SinCos);
        let nv = f.mesh().num_vertices();
        let u = pseudo_random(nv, 31);
        let d = pseudo_random(nv, 32);
        let c = f.quartic_line(&u, &d);
        for t in [-1.3, 0.0, 0.4, 2.0] {
            let ut: Vec<_> = u.iter().zip(&d).map(|(a, b)| a + b * t).collect();
            let e = f.energy(&ut);
            assert!((eval_quartic(&c, t) - e).abs() < 1e-11 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn gauge_invariance() {
        let f = forms(5, 2.0, Potential::SinCos);
        let v = pseudo_random(f.mesh().num_vertices(), 41);
        let e = f.energy(&v);
        for k in 0..16 {
            let rot = Complex64::from_polar(1.0, k as f64 * std::f64::consts::TAU / 16.0);
            let vr: Vec<_> = v.iter().map(|z| z * rot).collect();
            assert!((f.energy(&vr) - e).abs() <= 1e-12 * (1.0 + e.abs()));
        }
    }
}
