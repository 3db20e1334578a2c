//! Localized orthogonal decomposition spaces.
//!
//! Each coarse hat `lambda_j` gets a corrector `q_j` in the detail space
//! `W = ker P_h` (fine functions with vanishing coarse L2 projection),
//! localized to a layered element patch. The LOD basis function is
//! `b_j = lambda_j - q_j`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use faer::sparse::{SparseColMat, Triplet};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forms::{assemble_magnetic, assemble_mass, Params, Potential};
use crate::mesh::{vertex_patch, Hierarchy, Patch};
use crate::sparse::{amd_order, as_real_mut, norm2, Block, Factorization, SymmetricOperator};

const C0: Complex64 = Complex64::new(0.0, 0.0);

/// Coarse L2 projection `P_h`: solves `M_H x = P^T M_h v`.
#[derive(Debug)]
pub struct CoarseProjector {
    hierarchy: Arc<Hierarchy>,
    fine_mass: SymmetricOperator,
    coarse_mass: SymmetricOperator,
    factor: Factorization,
}

impl CoarseProjector {
    pub fn new(hierarchy: Arc<Hierarchy>) -> Result<Self> {
        let fine_mass = assemble_mass(hierarchy.fine());
        let coarse_mass = assemble_mass(hierarchy.coarse());
        let factor = Factorization::cholesky(&coarse_mass)?;
        Ok(Self {
            hierarchy,
            fine_mass,
            coarse_mass,
            factor,
        })
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn fine_mass(&self) -> &SymmetricOperator {
        &self.fine_mass
    }

    /// `M_Hh v`: the coarse hats tested against a fine field.
    pub fn mixed_mass(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.hierarchy.restrict(&self.fine_mass.apply(v))
    }

    pub fn project(&self, v: &[Complex64]) -> Result<Vec<Complex64>> {
        if v.len() != self.hierarchy.fine().num_vertices() {
            return Err(Error::Dimension(format!(
                "field has {} values, fine mesh has {} vertices",
                v.len(),
                self.hierarchy.fine().num_vertices()
            )));
        }
        let rhs = self.mixed_mass(v);
        let x = self.factor.solve(&rhs);
        let res = self.coarse_mass.apply(&x);
        let defect: f64 = res.iter().zip(&rhs).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        let scale = rhs.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if defect > 1e-12 * scale.max(f64::MIN_POSITIVE) && defect > 1e-14 {
            return Err(Error::LinearSolve(format!("coarse mass solve residual {defect:e}")));
        }
        Ok(x)
    }

    /// Fine representation of `v - prolong(P_h v)`, an element of `W`.
    pub fn detail_part(&self, v: &[Complex64]) -> Result<Vec<Complex64>> {
        let coarse = self.project(v)?;
        let p = self.hierarchy.prolongate(&coarse);
        Ok(v.iter().zip(&p).map(|(a, b)| a - b).collect())
    }
}

/// Coarse L2 projection of the fine field `v`.
pub fn l2_project(hierarchy: &Arc<Hierarchy>, v: &[Complex64]) -> Result<Vec<Complex64>> {
    CoarseProjector::new(hierarchy.clone())?.project(v)
}

/// Fine vertices in the support of each prolongated coarse hat, with weights.
fn hat_columns(hierarchy: &Hierarchy) -> Vec<Vec<(usize, f64)>> {
    let mut cols = vec![Vec::new(); hierarchy.coarse().num_vertices()];
    for (g, row) in hierarchy.prolongation().iter().enumerate() {
        for &(c, w) in row {
            cols[c].push((g, w));
        }
    }
    cols
}

/// Localized corrector problem for one coarse degree of freedom.
#[derive(Debug, Clone)]
pub struct CorrectorProblem {
    pub dof: usize,
    pub patch: Patch,
    /// Fine vertices carrying corrector unknowns (patch vertices off the patch boundary).
    pub free: Vec<usize>,
    /// Coarse vertices whose L2 moments of the corrector are constrained to vanish.
    pub constraints: Vec<usize>,
    /// `a(lambda_j, phi_f)` for the free fine hats `phi_f`.
    pub rhs: Vec<Complex64>,
}

impl CorrectorProblem {
    pub fn new(hierarchy: &Hierarchy, dof: usize, layers: usize, magnetic: &SymmetricOperator) -> Result<Self> {
        if dof >= hierarchy.coarse().num_vertices() {
            return Err(Error::InvalidInput(format!("coarse dof {dof} out of range")));
        }
        let patch = vertex_patch(hierarchy, dof, layers)?;
        let hat: Vec<Complex64> = hierarchy
            .prolongation()
            .iter()
            .map(|row| {
                let w = row.iter().find(|e| e.0 == dof).map_or(0.0, |e| e.1);
                Complex64::new(w, 0.0)
            })
            .collect();
        let load = magnetic.apply(&hat);
        Ok(Self::with_load(hierarchy, dof, patch, &load))
    }

    fn with_load(hierarchy: &Hierarchy, dof: usize, patch: Patch, load: &[Complex64]) -> Self {
        let (free, constraints) = patch_unknowns(hierarchy, &patch);
        let rhs = free.iter().map(|&f| load[f]).collect();
        Self {
            dof,
            patch,
            free,
            constraints,
            rhs,
        }
    }
}

/// Free fine vertices (off the patch boundary) and constrained coarse vertices of a patch.
fn patch_unknowns(hierarchy: &Hierarchy, patch: &Patch) -> (Vec<usize>, Vec<usize>) {
    let free = patch
        .fine_vertices
        .iter()
        .zip(&patch.boundary_flags)
        .filter(|(_, &b)| !b)
        .map(|(&v, _)| v)
        .collect();
    (free, patch.coarse_vertices(hierarchy.coarse()))
}

/// Basis fill (nonzeros over `columns x fine vertices`) above which `compress` goes dense.
const DENSE_COMPRESS_FILL: f64 = 0.25;

/// Fine vertices per dense product in `compress_dense`.
const COMPRESS_CHUNK: usize = 512;

/// Patches with at least this many constrained coarse vertices are solved through
/// the Schur complement: coupled LDLT fills in every multiplier row.
const SCHUR_MIN_CONSTRAINTS: usize = 256;

/// Right-hand sides per block solve when forming the Schur complement.
const SCHUR_BATCH: usize = 64;

enum SaddleFactor {
    /// LDLT of the full saddle matrix, multipliers eliminated last.
    Coupled(Factorization),
    /// Cholesky of the stiffness and dense Cholesky of `S = C K^-1 C^T`.
    Schur {
        stiffness: Factorization,
        schur: faer::linalg::solvers::Llt<f64>,
    },
}

/// Factorized patch saddle-point system, shared by all correctors on the same patch.
struct SaddleSystem {
    free: Vec<usize>,
    constraints: Vec<usize>,
    stiffness: SymmetricOperator,
    /// Constraint rows: coarse local index -> (free local index, weight).
    c_rows: Vec<Vec<(usize, f64)>>,
    factor: SaddleFactor,
}

impl SaddleSystem {
    fn new(
        hierarchy: &Hierarchy,
        magnetic: &SymmetricOperator,
        fine_mass: &SymmetricOperator,
        free: Vec<usize>,
        constraints: Vec<usize>,
    ) -> Result<Self> {
        Self::with_schur_min(hierarchy, magnetic, fine_mass, free, constraints, SCHUR_MIN_CONSTRAINTS)
    }

    fn with_schur_min(
        hierarchy: &Hierarchy,
        magnetic: &SymmetricOperator,
        fine_mass: &SymmetricOperator,
        free: Vec<usize>,
        constraints: Vec<usize>,
        schur_min: usize,
    ) -> Result<Self> {
        let nf = free.len();
        let mut coarse_local = vec![usize::MAX; hierarchy.coarse().num_vertices()];
        for (l, &k) in constraints.iter().enumerate() {
            coarse_local[k] = l;
        }
        let mut c_map: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); constraints.len()];
        for (fl, &f) in free.iter().enumerate() {
            for (g, b) in fine_mass.row(f) {
                for &(k, w) in &hierarchy.prolongation()[g] {
                    let kl = coarse_local[k];
                    if kl != usize::MAX {
                        *c_map[kl].entry(fl).or_insert(0.0) += w * b[0];
                    }
                }
            }
        }
        let c_rows: Vec<Vec<(usize, f64)>> = c_map.into_iter().map(|m| m.into_iter().collect()).collect();
        let stiffness = magnetic.principal_submatrix(&free);
        let schur = if constraints.len() >= schur_min {
            // falls back to the coupled system when the stiffness alone is singular
            Factorization::cholesky(&stiffness)
                .ok()
                .and_then(|k| schur_factor(k, &c_rows, nf).ok())
        } else {
            None
        };
        let factor = match schur {
            Some(f) => f,
            None => SaddleFactor::Coupled(coupled_factor(&stiffness, &c_rows, nf)?),
        };
        Ok(Self {
            free,
            constraints,
            stiffness,
            c_rows,
            factor,
        })
    }

    /// Applies `C^T` to multipliers, as free-vertex values.
    fn constraint_transpose(&self, mu: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![C0; self.free.len()];
        for (kl, row) in self.c_rows.iter().enumerate() {
            for &(fl, c) in row {
                out[fl] += mu[kl] * c;
            }
        }
        out
    }

    fn constraint_apply(&self, q: &[Complex64]) -> Vec<Complex64> {
        self.c_rows
            .iter()
            .map(|row| row.iter().map(|&(fl, c)| q[fl] * c).sum())
            .collect()
    }

    fn solve_raw(&self, rhs: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let nf = self.free.len();
        match &self.factor {
            SaddleFactor::Coupled(factor) => {
                let mut x = Vec::with_capacity(nf + self.constraints.len());
                x.extend_from_slice(rhs);
                x.resize(nf + self.constraints.len(), C0);
                factor.solve_in_place(as_real_mut(&mut x));
                let mu = x.split_off(nf);
                (x, mu)
            }
            SaddleFactor::Schur { stiffness, schur } => {
                use faer::linalg::solvers::SolveCore;
                let y = stiffness.solve(rhs);
                let mut mu = self.constraint_apply(&y);
                let m = 2 * mu.len();
                schur.solve_in_place_with_conj(
                    faer::Conj::No,
                    faer::MatMut::from_column_major_slice_mut(as_real_mut(&mut mu), m, 1),
                );
                let z = stiffness.solve(&self.constraint_transpose(&mu));
                let q = y.iter().zip(&z).map(|(a, b)| a - b).collect();
                (q, mu)
            }
        }
    }

    /// Returns the corrector values on the free vertices and the relative residual.
    fn solve(&self, rhs: &[Complex64]) -> (Vec<Complex64>, f64, f64) {
        let (q, mu) = self.solve_raw(rhs);
        // residual of the first block row: K q + C^T mu - rhs
        let mut r1 = self.stiffness.apply(&q);
        for ((r, t), b) in r1.iter_mut().zip(self.constraint_transpose(&mu)).zip(rhs) {
            *r += t - b;
        }
        let cq = self.constraint_apply(&q);
        let scale = norm2(rhs) + self.stiffness.max_abs() * norm2(&q);
        let rel = if scale > 0.0 { norm2(&r1) / scale } else { norm2(&r1) };
        let cscale = self
            .c_rows
            .iter()
            .flat_map(|r| r.iter().map(|e| e.1.abs()))
            .fold(0.0, f64::max)
            * norm2(&q);
        let crel = if cscale > 0.0 { norm2(&cq) / cscale } else { 0.0 };
        (q, rel, crel)
    }
}

/// LDLT of `[K C^T; C 0]` with AMD on the primal block and the multipliers last.
fn coupled_factor(stiffness: &SymmetricOperator, c_rows: &[Vec<(usize, f64)>], nf: usize) -> Result<Factorization> {
    let mut trip: Vec<Triplet<usize, usize, f64>> = Vec::new();
    stiffness.lower_triplets(0, &mut trip);
    let primal = SparseColMat::try_new_from_triplets(2 * nf, 2 * nf, &trip)
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
    let mut order = amd_order(&primal)?;
    let n = 2 * nf + 2 * c_rows.len();
    order.extend(2 * nf..n);
    for (kl, row) in c_rows.iter().enumerate() {
        for &(fl, c) in row {
            for s in 0..2 {
                trip.push(Triplet::new(2 * nf + 2 * kl + s, 2 * fl + s, c));
            }
        }
    }
    // Explicit zero diagonal keeps the multiplier block in the symbolic pattern.
    for r in 2 * nf..n {
        trip.push(Triplet::new(r, r, 0.0));
    }
    let full =
        SparseColMat::try_new_from_triplets(n, n, &trip).map_err(|e| Error::Factorization(format!("{e:?}")))?;
    Factorization::ldlt_lower(&full, Some(&order))
}

/// Forms and factors `S = C K^-1 C^T` in the real encoding, in batches of right-hand sides.
fn schur_factor(stiffness: Factorization, c_rows: &[Vec<(usize, f64)>], nf: usize) -> Result<SaddleFactor> {
    let m = 2 * c_rows.len();
    let mut s = faer::Mat::<f64>::zeros(m, m);
    let mut buf = Vec::new();
    for start in (0..m).step_by(SCHUR_BATCH) {
        let cols = SCHUR_BATCH.min(m - start);
        buf.clear();
        buf.resize(2 * nf * cols, 0.0);
        for c in 0..cols {
            let (kl, part) = ((start + c) / 2, (start + c) % 2);
            for &(fl, w) in &c_rows[kl] {
                buf[c * 2 * nf + 2 * fl + part] = w;
            }
        }
        stiffness.solve_columns_in_place(&mut buf, cols);
        for c in 0..cols {
            let y = &buf[c * 2 * nf..(c + 1) * 2 * nf];
            for (kl, row) in c_rows.iter().enumerate() {
                for part in 0..2 {
                    s[(2 * kl + part, start + c)] = row.iter().map(|&(fl, w)| w * y[2 * fl + part]).sum();
                }
            }
        }
    }
    // exact symmetry for the dense factorization
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    let schur = s
        .llt(faer::Side::Lower)
        .map_err(|e| Error::Factorization(format!("constraint Schur complement is not definite ({e:?})")))?;
    Ok(SaddleFactor::Schur { stiffness, schur })
}

/// Solves one localized corrector problem; returns `q` as sparse fine values.
pub fn solve_corrector(
    hierarchy: &Hierarchy,
    problem: &CorrectorProblem,
    magnetic: &SymmetricOperator,
    fine_mass: &SymmetricOperator,
) -> Result<Vec<(usize, Complex64)>> {
    let fail = |reason: String| Error::Corrector {
        dof: problem.dof,
        seed: problem.patch.seed,
        layers: problem.patch.layers,
        reason,
    };
    let system = SaddleSystem::new(
        hierarchy,
        magnetic,
        fine_mass,
        problem.free.clone(),
        problem.constraints.clone(),
    )
    .map_err(|e| fail(e.to_string()))?;
    solve_on_system(&system, &problem.rhs).map_err(fail)
}

const SOLVE_TOL: f64 = 1e-9;

fn solve_on_system(
    system: &SaddleSystem,
    rhs: &[Complex64],
) -> std::result::Result<Vec<(usize, Complex64)>, String> {
    let (q, rel, crel) = system.solve(rhs);
    if !(rel <= SOLVE_TOL && crel <= SOLVE_TOL) {
        return Err(format!(
            "saddle residual {rel:e}, constraint residual {crel:e} (resolution condition h*kappa small may be violated)"
        ));
    }
    Ok(system.free.iter().copied().zip(q).collect())
}

/// Basis of the LOD space: column `j` is the fine representation of `(Id - C) lambda_j`.
#[derive(Debug, Clone)]
pub struct LodBasis {
    hierarchy: Arc<Hierarchy>,
    layers: usize,
    kappa: f64,
    potential: Potential,
    columns: Vec<SparseColumn>,
    /// Transposed storage: fine vertex -> (coarse dof, value).
    rows: RowStore,
}

/// Sparse complex vector with 32-bit indices; saturated bases are dense.
#[derive(Debug, Clone, Default)]
struct SparseColumn {
    idx: Vec<u32>,
    val: Vec<Complex64>,
}

impl SparseColumn {
    fn from_pairs(pairs: impl IntoIterator<Item = (usize, Complex64)>) -> Self {
        let (idx, val) = pairs.into_iter().map(|(i, v)| (i as u32, v)).unzip();
        Self { idx, val }
    }

    fn iter(&self) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        self.idx.iter().zip(&self.val).map(|(&i, &v)| (i as usize, v))
    }
}

/// Compressed row storage of the basis.
#[derive(Debug, Clone)]
struct RowStore {
    ptr: Vec<usize>,
    idx: Vec<u32>,
    val: Vec<Complex64>,
}

impl RowStore {
    fn transpose(columns: &[SparseColumn], nrows: usize) -> Self {
        let mut ptr = vec![0usize; nrows + 1];
        for col in columns {
            for &f in &col.idx {
                ptr[f as usize + 1] += 1;
            }
        }
        for r in 0..nrows {
            ptr[r + 1] += ptr[r];
        }
        let mut next = ptr[..nrows].to_vec();
        let mut idx = vec![0u32; ptr[nrows]];
        let mut val = vec![C0; ptr[nrows]];
        for (j, col) in columns.iter().enumerate() {
            for (f, v) in col.iter() {
                idx[next[f]] = j as u32;
                val[next[f]] = v;
                next[f] += 1;
            }
        }
        Self { ptr, idx, val }
    }

    fn len(&self) -> usize {
        self.ptr.len() - 1
    }

    fn row(&self, f: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        let r = self.ptr[f]..self.ptr[f + 1];
        self.idx[r.clone()].iter().zip(&self.val[r]).map(|(&j, &v)| (j as usize, v))
    }
}

/// Builds all correctors and the resulting LOD basis.
pub fn build_lod_basis(hierarchy: Arc<Hierarchy>, params: &Params, layers: usize) -> Result<LodBasis> {
    let hats = hat_columns(&hierarchy);
    if hierarchy.ratio() == 1 {
        // no detail space: the correctors vanish
        let columns = hats
            .iter()
            .map(|h| h.iter().map(|&(g, w)| (g, Complex64::new(w, 0.0))).collect())
            .collect();
        return Ok(LodBasis::from_columns(hierarchy, layers, params.kappa, params.potential, columns));
    }
    let magnetic = assemble_magnetic(hierarchy.fine(), params);
    let fine_mass = assemble_mass(hierarchy.fine());
    let nc = hierarchy.coarse().num_vertices();

    // Coarse dofs whose patches coincide share one factorization.
    let mut groups: BTreeMap<Vec<usize>, (Patch, Vec<usize>)> = BTreeMap::new();
    for dof in 0..nc {
        let patch = vertex_patch(&hierarchy, dof, layers)?;
        match groups.get_mut(&patch.elements) {
            Some((_, dofs)) => dofs.push(dof),
            None => {
                groups.insert(patch.elements.clone(), (patch, vec![dof]));
            }
        }
    }
    let jobs: Vec<(Patch, Vec<usize>)> = groups.into_values().collect();

    // Right-hand sides are formed per solve: saturated patches make them dense.
    let results: Vec<Result<Vec<(usize, SparseColumn)>>> = jobs
        .par_iter()
        .map(|(patch, dofs)| {
            let fail = |dof: usize, reason: String| Error::Corrector {
                dof,
                seed: patch.seed,
                layers,
                reason,
            };
            let (free, constraints) = patch_unknowns(&hierarchy, patch);
            let system = SaddleSystem::new(&hierarchy, &magnetic, &fine_mass, free, constraints)
                .map_err(|e| fail(dofs[0], e.to_string()))?;
            dofs.iter()
                .map(|&dof| {
                    let load = sparse_apply(&magnetic, &hats[dof]);
                    let rhs: Vec<Complex64> = system.free.iter().map(|&f| load[f]).collect();
                    let q = solve_on_system(&system, &rhs).map_err(|r| fail(dof, r))?;
                    Ok((dof, basis_column(&hats[dof], &q)))
                })
                .collect()
        })
        .collect();

    let mut columns = vec![SparseColumn::default(); nc];
    for group in results {
        for (dof, col) in group? {
            columns[dof] = col;
        }
    }
    Ok(LodBasis::from_sparse(hierarchy, layers, params.kappa, params.potential, columns))
}

/// `op * hat` for a sparse real hat, as a dense fine vector.
fn sparse_apply(op: &SymmetricOperator, hat: &[(usize, f64)]) -> Vec<Complex64> {
    let mut out = vec![C0; op.num_blocks()];
    for &(g, w) in hat {
        for (f, b) in op.row(g) {
            // op(f, g) = op(g, f)^T acting on (w, 0)
            out[f] += Complex64::new(b[0] * w, b[1] * w);
        }
    }
    out
}

fn basis_column(hat: &[(usize, f64)], q: &[(usize, Complex64)]) -> SparseColumn {
    let mut merged: BTreeMap<usize, Complex64> = hat.iter().map(|&(g, w)| (g, Complex64::new(w, 0.0))).collect();
    for &(f, v) in q {
        *merged.entry(f).or_insert(C0) -= v;
    }
    SparseColumn::from_pairs(merged.into_iter().filter(|(_, v)| *v != C0))
}

impl LodBasis {
    pub fn from_columns(
        hierarchy: Arc<Hierarchy>,
        layers: usize,
        kappa: f64,
        potential: Potential,
        columns: Vec<Vec<(usize, Complex64)>>,
    ) -> Self {
        let columns = columns.into_iter().map(SparseColumn::from_pairs).collect();
        Self::from_sparse(hierarchy, layers, kappa, potential, columns)
    }

    fn from_sparse(
        hierarchy: Arc<Hierarchy>,
        layers: usize,
        kappa: f64,
        potential: Potential,
        columns: Vec<SparseColumn>,
    ) -> Self {
        let rows = RowStore::transpose(&columns, hierarchy.fine().num_vertices());
        Self {
            hierarchy,
            layers,
            kappa,
            potential,
            columns,
            rows,
        }
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn hierarchy_arc(&self) -> &Arc<Hierarchy> {
        &self.hierarchy
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn potential(&self) -> Potential {
        self.potential
    }

    /// Number of basis functions (coarse vertices).
    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn num_fine(&self) -> usize {
        self.rows.len()
    }

    /// Nonzero entries `(fine vertex, value)` of column `j`.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        self.columns[j].iter()
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(|c| c.idx.len()).sum()
    }

    /// Dense fine representation of column `j`.
    pub fn column_dense(&self, j: usize) -> Vec<Complex64> {
        let mut v = vec![C0; self.num_fine()];
        for (f, z) in self.column(j) {
            v[f] = z;
        }
        v
    }

    /// `sum_j x_j b_j`.
    pub fn prolong(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.num_columns());
        (0..self.rows.len())
            .map(|f| self.rows.row(f).map(|(j, b)| b * x[j]).sum())
            .collect()
    }

    /// Adjoint of [`LodBasis::prolong`] for the real pairing: `(B^H g)_j = sum_f conj(b_jf) g_f`.
    pub fn restrict(&self, g: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(g.len(), self.num_fine());
        self.columns
            .iter()
            .map(|col| col.iter().map(|(f, b)| b.conj() * g[f]).sum())
            .collect()
    }

    /// Galerkin restriction: the operator with `x . R x = (B x) . op (B x)`.
    pub fn compress(&self, op: &SymmetricOperator) -> Result<SymmetricOperator> {
        if op.num_blocks() != self.num_fine() {
            return Err(Error::Dimension(format!(
                "operator acts on {} unknowns, basis lives on {} fine vertices",
                op.num_blocks(),
                self.num_fine()
            )));
        }
        if self.nnz() as f64 > DENSE_COMPRESS_FILL * (self.num_columns() * self.num_fine()) as f64 {
            Ok(self.compress_dense(op))
        } else {
            Ok(self.compress_sparse(op))
        }
    }

    /// `compress` by sparse column products, for localized bases.
    fn compress_sparse(&self, op: &SymmetricOperator) -> SymmetricOperator {
        let nc = self.num_columns();
        let nf = self.num_fine();
        let complex_linear = op.is_complex_linear();
        let cols: Vec<Vec<(usize, Block)>> = (0..nc)
            .into_par_iter()
            .map_init(
                || CompressScratch::new(nf, nc),
                |scratch, j| scratch.column(self, op, j, complex_linear),
            )
            .collect();
        // cols[j] holds blocks (i, R_ij); symmetrize to make storage exactly symmetric.
        let mut lookup: Vec<BTreeMap<usize, Block>> = vec![BTreeMap::new(); nc];
        for (j, col) in cols.iter().enumerate() {
            for &(i, b) in col {
                lookup[i].insert(j, b);
            }
        }
        let rows = (0..nc)
            .map(|i| {
                lookup[i]
                    .iter()
                    .map(|(&j, b)| {
                        let t = lookup[j].get(&i).copied().unwrap_or([0.0; 4]);
                        let s = [
                            0.5 * (b[0] + t[0]),
                            0.5 * (b[1] + t[2]),
                            0.5 * (b[2] + t[1]),
                            0.5 * (b[3] + t[3]),
                        ];
                        (j, s)
                    })
                    .collect()
            })
            .collect();
        SymmetricOperator::from_rows(rows)
    }

    /// `compress` for nearly dense bases: `B^H (Op B)` accumulated over chunks of
    /// fine vertices with dense products. A real-linear block acts as
    /// `x -> p x + q conj(x)`, so `R = B^H P B` and `Q = B^H Q conj(B)` give every block.
    fn compress_dense(&self, op: &SymmetricOperator) -> SymmetricOperator {
        use faer::{Accum, Mat, Par};
        let nc = self.num_columns();
        let nf = self.num_fine();
        let complex_linear = op.is_complex_linear();
        let chunk = COMPRESS_CHUNK.min(nf);
        let mut linear = Mat::<Complex64>::zeros(nc, nc);
        let mut anti = Mat::<Complex64>::zeros(if complex_linear { 0 } else { nc }, nc);
        // column r of each buffer is one fine vertex of the chunk
        let mut bt = Mat::<Complex64>::zeros(nc, chunk);
        let mut wp = Mat::<Complex64>::zeros(nc, chunk);
        let mut wq = Mat::<Complex64>::zeros(if complex_linear { 0 } else { nc }, chunk);
        for f0 in (0..nf).step_by(chunk) {
            let rows = chunk.min(nf - f0);
            for r in 0..rows {
                let f = f0 + r;
                let b = bt.col_as_slice_mut(r);
                b.fill(C0);
                for (j, v) in self.rows.row(f) {
                    b[j] = v;
                }
                let w = wp.col_as_slice_mut(r);
                w.fill(C0);
                for (g, blk) in op.row(f) {
                    let p = Complex64::new(0.5 * (blk[0] + blk[3]), 0.5 * (blk[2] - blk[1]));
                    for (j, v) in self.rows.row(g) {
                        w[j] += p * v;
                    }
                }
                if !complex_linear {
                    let w = wq.col_as_slice_mut(r);
                    w.fill(C0);
                    for (g, blk) in op.row(f) {
                        let q = Complex64::new(0.5 * (blk[0] - blk[3]), 0.5 * (blk[2] + blk[1]));
                        for (j, v) in self.rows.row(g) {
                            w[j] += q * v.conj();
                        }
                    }
                }
            }
            let lhs = bt.as_ref().subcols(0, rows).conjugate();
            let one = Complex64::new(1.0, 0.0);
            faer::linalg::matmul::matmul(
                linear.as_mut(),
                Accum::Add,
                lhs,
                wp.as_ref().subcols(0, rows).transpose(),
                one,
                Par::Seq,
            );
            if !complex_linear {
                faer::linalg::matmul::matmul(
                    anti.as_mut(),
                    Accum::Add,
                    lhs,
                    wq.as_ref().subcols(0, rows).transpose(),
                    one,
                    Par::Seq,
                );
            }
        }
        // block (i, j) maps x_j to the i-th row: s = R + Q for x = 1, si = i (R - Q) for x = i
        let block = |i: usize, j: usize| -> Block {
            let r = linear[(i, j)];
            let q = if complex_linear { C0 } else { anti[(i, j)] };
            let (s, si) = (r + q, Complex64::new(0.0, 1.0) * (r - q));
            [s.re, si.re, s.im, si.im]
        };
        let rows = (0..nc)
            .map(|i| {
                (0..nc)
                    .map(|j| {
                        let (b, t) = (block(i, j), block(j, i));
                        (j, [0.5 * (b[0] + t[0]), 0.5 * (b[1] + t[2]), 0.5 * (b[2] + t[1]), 0.5 * (b[3] + t[3])])
                    })
                    .collect()
            })
            .collect();
        SymmetricOperator::from_rows(rows)
    }

    /// Fine representation of `P_h^LOD v = (Id - C) P_h v`.
    pub fn decompose(&self, projector: &CoarseProjector, v: &[Complex64]) -> Result<Vec<Complex64>> {
        Ok(self.prolong(&projector.project(v)?))
    }

    /// Writes the basis to `path` (text header line, then little-endian column data).
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", self.cache_key().header()).map_err(io)?;
        for (j, col) in self.columns.iter().enumerate() {
            w.write_all(&(j as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&(col.idx.len() as u32).to_le_bytes()).map_err(io)?;
            for (f, z) in col.iter() {
                w.write_all(&(f as u32).to_le_bytes()).map_err(io)?;
                w.write_all(&z.re.to_le_bytes()).map_err(io)?;
                w.write_all(&z.im.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn cache_key(&self) -> CacheKey {
        CacheKey {
            coarse_n: self.hierarchy.coarse().n(),
            fine_n: self.hierarchy.fine().n(),
            layers: self.layers,
            kappa: self.kappa,
        }
    }

    /// Loads a cached basis, verifying that its header matches `hierarchy`, `layers` and `params`.
    pub fn read_cache(path: &Path, hierarchy: Arc<Hierarchy>, layers: usize, params: &Params) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut header = String::new();
        r.read_line(&mut header).map_err(|e| Error::io(path, e))?;
        let found = CacheKey::parse(header.trim_end())?;
        let expected = CacheKey {
            coarse_n: hierarchy.coarse().n(),
            fine_n: hierarchy.fine().n(),
            layers,
            kappa: params.kappa,
        };
        if found != expected {
            return Err(Error::InvalidInput(format!(
                "basis cache {} holds `{}`, expected `{}`",
                path.display(),
                found.header(),
                expected.header()
            )));
        }
        let nc = hierarchy.coarse().num_vertices();
        let nf = hierarchy.fine().num_vertices();
        let corrupt = |what: &str| Error::InvalidInput(format!("basis cache {}: {what}", path.display()));
        let mut read = |k: usize| -> Result<[u8; 8]> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b[..k]).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => corrupt("truncated"),
                _ => Error::io(path, e),
            })?;
            Ok(b)
        };
        let index = |b: [u8; 8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        let mut columns = Vec::with_capacity(nc);
        for j in 0..nc {
            if index(read(4)?) != j {
                return Err(corrupt("columns out of order"));
            }
            let len = index(read(4)?);
            let mut col = SparseColumn { idx: Vec::with_capacity(len), val: Vec::with_capacity(len) };
            for _ in 0..len {
                let f = index(read(4)?);
                let re = f64::from_le_bytes(read(8)?);
                let im = f64::from_le_bytes(read(8)?);
                if f >= nf || !re.is_finite() || !im.is_finite() {
                    return Err(corrupt("invalid entry"));
                }
                col.idx.push(f as u32);
                col.val.push(Complex64::new(re, im));
            }
            columns.push(col);
        }
        if read(1).is_ok() {
            return Err(corrupt("trailing data"));
        }
        Ok(Self::from_sparse(hierarchy, layers, params.kappa, params.potential, columns))
    }
}

/// Identifying fields of a cached basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheKey {
    pub coarse_n: usize,
    pub fine_n: usize,
    pub layers: usize,
    pub kappa: f64,
}

impl CacheKey {
    pub fn header(&self) -> String {
        format!("GLLOD v1 {} {} {} {:?}", self.coarse_n, self.fine_n, self.layers, self.kappa)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("not a basis cache header: `{line}`"));
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 || parts[0] != "GLLOD" || parts[1] != "v1" {
            return Err(bad());
        }
        Ok(Self {
            coarse_n: parts[2].parse().map_err(|_| bad())?,
            fine_n: parts[3].parse().map_err(|_| bad())?,
            layers: parts[4].parse().map_err(|_| bad())?,
            kappa: parts[5].parse().map_err(|_| bad())?,
        })
    }
}

struct CompressScratch {
    z: Vec<Complex64>,
    zi: Vec<Complex64>,
    touched: Vec<usize>,
    mark: Vec<bool>,
    s: Vec<Complex64>,
    si: Vec<Complex64>,
    hit: Vec<usize>,
    seen: Vec<bool>,
}

impl CompressScratch {
    fn new(nf: usize, nc: usize) -> Self {
        Self {
            z: vec![C0; nf],
            zi: vec![C0; nf],
            touched: Vec::new(),
            mark: vec![false; nf],
            s: vec![C0; nc],
            si: vec![C0; nc],
            hit: Vec::new(),
            seen: vec![false; nc],
        }
    }

    /// Blocks `(i, R_ij)` of compressed column `j`.
    fn column(
        &mut self,
        basis: &LodBasis,
        op: &SymmetricOperator,
        j: usize,
        complex_linear: bool,
    ) -> Vec<(usize, Block)> {
        let i_unit = Complex64::new(0.0, 1.0);
        for (g, b) in basis.column(j) {
            let bi = b * i_unit;
            for (f, blk) in op.row(g) {
                // op(f, g) = op(g, f)^T
                let t = crate::sparse::block_transpose(blk);
                self.z[f] += crate::sparse::block_apply(&t, b);
                if !complex_linear {
                    self.zi[f] += crate::sparse::block_apply(&t, bi);
                }
                if !self.mark[f] {
                    self.mark[f] = true;
                    self.touched.push(f);
                }
            }
        }
        for &f in &self.touched {
            let (z, zi) = (self.z[f], self.zi[f]);
            for (i, b) in basis.rows.row(f) {
                let c = b.conj();
                self.s[i] += c * z;
                if !complex_linear {
                    self.si[i] += c * zi;
                }
                if !self.seen[i] {
                    self.seen[i] = true;
                    self.hit.push(i);
                }
            }
        }
        self.hit.sort_unstable();
        let out = self
            .hit
            .iter()
            .map(|&i| {
                let s = self.s[i];
                let si = if complex_linear { s * i_unit } else { self.si[i] };
                (i, [s.re, si.re, s.im, si.im])
            })
            .collect();
        for &f in &self.touched {
            self.z[f] = C0;
            self.zi[f] = C0;
            self.mark[f] = false;
        }
        self.touched.clear();
        for &i in &self.hit {
            self.s[i] = C0;
            self.si[i] = C0;
            self.seen[i] = false;
        }
        self.hit.clear();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::{assemble_stiffness, FormSet};
    use crate::sparse::real_dot;

    fn pseudo_random(n: usize, seed: u64) -> Vec<Complex64> {
        let mut s = seed ^ 0x9E37_79B9_7F4A_7C15;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        (0..n).map(|_| Complex64::new(next(), next())).collect()
    }

    fn setup(nc: usize, nf: usize, kappa: f64) -> (Arc<Hierarchy>, Params) {
        (
            Arc::new(Hierarchy::from_sizes(nc, nf).unwrap()),
            Params::new(kappa, Potential::SinCos).unwrap(),
        )
    }

    #[test]
    fn dense_and_sparse_compression_agree() {
        let (h, params) = setup(4, 16, 3.0);
        let basis = build_lod_basis(h.clone(), &params, 2).unwrap();
        let forms = FormSet::new(Arc::new(h.fine().clone()), params);
        let u = pseudo_random(h.fine().num_vertices(), 5);
        let hessian = forms.hessian_operator(&u);
        assert!(!hessian.is_complex_linear());
        for op in [forms.mass(), forms.magnetic(), &hessian] {
            let (a, b) = (basis.compress_sparse(op), basis.compress_dense(op));
            let scale = a.max_abs();
            for i in 0..basis.num_columns() {
                for j in 0..basis.num_columns() {
                    let x = a.get(i, j).unwrap_or([0.0; 4]);
                    let y = b.get(i, j).unwrap_or([0.0; 4]);
                    for k in 0..4 {
                        assert!((x[k] - y[k]).abs() <= 1e-13 * scale, "({i}, {j}) {x:?} vs {y:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn schur_and_coupled_solves_agree() {
        let (h, params) = setup(4, 16, 5.0);
        let magnetic = assemble_magnetic(h.fine(), &params);
        let mass = assemble_mass(h.fine());
        for (dof, layers) in [(12, 1), (0, 8)] {
            let p = CorrectorProblem::new(&h, dof, layers, &magnetic).unwrap();
            let build = |min| {
                SaddleSystem::with_schur_min(&h, &magnetic, &mass, p.free.clone(), p.constraints.clone(), min).unwrap()
            };
            let (schur, coupled) = (build(0), build(usize::MAX));
            assert!(matches!(schur.factor, SaddleFactor::Schur { .. }));
            assert!(matches!(coupled.factor, SaddleFactor::Coupled(_)));
            let (a, ra, ca) = schur.solve(&p.rhs);
            let (b, rb, cb) = coupled.solve(&p.rhs);
            assert!(ra.max(ca).max(rb).max(cb) <= 1e-12, "{ra} {ca} {rb} {cb}");
            let diff: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            assert!(norm2(&diff) <= 1e-10 * norm2(&b));
        }
        // without a potential the whole-domain stiffness has the constants in its kernel
        let free_params = Params::new(5.0, Potential::Zero).unwrap();
        let magnetic = assemble_magnetic(h.fine(), &free_params);
        let p = CorrectorProblem::new(&h, 0, 8, &magnetic).unwrap();
        let system = SaddleSystem::with_schur_min(&h, &magnetic, &mass, p.free.clone(), p.constraints.clone(), 0).unwrap();
        assert!(matches!(system.factor, SaddleFactor::Coupled(_)));
    }

    fn max_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn projection_examples() {
        let (h, _) = setup(4, 16, 1.0);
        let proj = CoarseProjector::new(h.clone()).unwrap();
        let w = pseudo_random(h.coarse().num_vertices(), 1);
        let back = proj.project(&h.prolongate(&w)).unwrap();
        assert!(max_diff(&back, &w) < 1e-12);
        let c = Complex64::new(0.3, -2.0);
        let constant = vec![c; h.fine().num_vertices()];
        let pc = proj.project(&constant).unwrap();
        assert!(pc.iter().all(|z| (z - c).norm() < 1e-12));
        let v = pseudo_random(h.fine().num_vertices(), 2);
        let p1 = proj.project(&v).unwrap();
        let p2 = proj.project(&h.prolongate(&p1)).unwrap();
        assert!(max_diff(&p1, &p2) < 1e-12);
        let d = proj.detail_part(&v).unwrap();
        assert!(proj.project(&d).unwrap().iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn zero_rhs_gives_zero_corrector() {
        let (h, params) = setup(4, 16, 2.0);
        let magnetic = assemble_magnetic(h.fine(), &params);
        let mass = assemble_mass(h.fine());
        let mut problem = CorrectorProblem::new(&h, 7, 1, &magnetic).unwrap();
        problem.rhs.iter_mut().for_each(|z| *z = C0);
        let q = solve_corrector(&h, &problem, &magnetic, &mass).unwrap();
        assert!(q.iter().all(|(_, z)| z.norm() == 0.0));
    }

    #[test]
    fn correctors_lie_in_detail_space() {
        let (h, params) = setup(4, 16, 2.0);
        let magnetic = assemble_magnetic(h.fine(), &params);
        let mass = assemble_mass(h.fine());
        let proj = CoarseProjector::new(h.clone()).unwrap();
        for dof in [0, 7, 12, 24] {
            let problem = CorrectorProblem::new(&h, dof, 1, &magnetic).unwrap();
            let q = solve_corrector(&h, &problem, &magnetic, &mass).unwrap();
            let mut dense = vec![C0; h.fine().num_vertices()];
            for (f, z) in q {
                dense[f] = z;
            }
            let pq = proj.project(&dense).unwrap();
            assert!(norm2(&pq) <= 1e-10, "dof {dof}: {}", norm2(&pq));
        }
    }

    /// Worst `|a(b_j, w)| / (|b_j| |w|)` over random detail vectors `w` and `i w`.
    fn orthogonality_defect(basis: &LodBasis, forms: &FormSet, proj: &CoarseProjector, samples: u64) -> f64 {
        let nf = basis.num_fine();
        let mut worst: f64 = 0.0;
        let cols: Vec<Vec<Complex64>> = (0..basis.num_columns()).map(|j| basis.column_dense(j)).collect();
        for s in 0..samples {
            let w = proj.detail_part(&pseudo_random(nf, 100 + s)).unwrap();
            let kw = forms.magnetic().apply(&w);
            let ikw: Vec<Complex64> = kw.iter().map(|z| z * Complex64::new(0.0, 1.0)).collect();
            let wn = forms.h1kappa_norm(&w);
            for b in &cols {
                let bn = forms.h1kappa_norm(b);
                let a = real_dot(&kw, b).abs().max(real_dot(&ikw, b).abs());
                worst = worst.max(a / (bn * wn));
            }
        }
        worst
    }

    #[test]
    fn saturated_basis_is_a_orthogonal_to_details() {
        let (h, params) = setup(4, 16, 2.0);
        let basis = build_lod_basis(h.clone(), &params, 8).unwrap();
        let forms = FormSet::new(Arc::new(h.fine().clone()), params);
        let proj = CoarseProjector::new(h.clone()).unwrap();
        assert_eq!(basis.num_columns(), h.coarse().num_vertices());
        assert!(orthogonality_defect(&basis, &forms, &proj, 50) <= 1e-8);
        for j in 0..basis.num_columns() {
            let pj = proj.project(&basis.column_dense(j)).unwrap();
            for (k, z) in pj.iter().enumerate() {
                let e = if k == j { 1.0 } else { 0.0 };
                assert!((z - e).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn local_columns_stay_in_patch() {
        let (h, params) = setup(8, 32, 2.0);
        let basis = build_lod_basis(h.clone(), &params, 1).unwrap();
        for j in 0..basis.num_columns() {
            let patch = vertex_patch(&h, j, 1).unwrap();
            // hat support of j plus patch vertices
            let mut allowed = vec![false; h.fine().num_vertices()];
            for &v in &patch.fine_vertices {
                allowed[v] = true;
            }
            for (g, row) in h.prolongation().iter().enumerate() {
                if row.iter().any(|e| e.0 == j) {
                    allowed[g] = true;
                }
            }
            let mut col = basis.column(j);
            assert!(col.all(|(f, _)| allowed[f]), "column {j}");
        }
    }

    #[test]
    fn galerkin_solution_equals_decomposed_fine_solution() {
        let (h, params) = setup(4, 16, 1.0);
        let basis = build_lod_basis(h.clone(), &params, 8).unwrap();
        let forms = FormSet::new(Arc::new(h.fine().clone()), params);
        let proj = CoarseProjector::new(h.clone()).unwrap();
        let one = vec![Complex64::new(1.0, 0.0); h.fine().num_vertices()];
        let load = forms.mass().apply(&one);
        let fine = Factorization::cholesky(forms.magnetic()).unwrap().solve(&load);
        let coarse_op = basis.compress(forms.magnetic()).unwrap();
        let x = Factorization::cholesky(&coarse_op).unwrap().solve(&basis.restrict(&load));
        let lod = basis.prolong(&x);
        let expected = basis.decompose(&proj, &fine).unwrap();
        assert!(max_diff(&lod, &expected) < 1e-9, "{}", max_diff(&lod, &expected));
    }

    #[test]
    fn decompose_is_a_projection_onto_the_basis() {
        let (h, params) = setup(4, 16, 2.0);
        let basis = build_lod_basis(h.clone(), &params, 2).unwrap();
        let proj = CoarseProjector::new(h.clone()).unwrap();
        for j in [0, 6, 12] {
            let b = basis.column_dense(j);
            assert!(max_diff(&basis.decompose(&proj, &b).unwrap(), &b) < 1e-10);
        }
        let nf = h.fine().num_vertices();
        let (v, w) = (pseudo_random(nf, 5), pseudo_random(nf, 6));
        let c = Complex64::new(0.7, -1.1);
        let sum: Vec<Complex64> = v.iter().zip(&w).map(|(a, b)| a + c * b).collect();
        let lhs = basis.decompose(&proj, &sum).unwrap();
        let (dv, dw) = (basis.decompose(&proj, &v).unwrap(), basis.decompose(&proj, &w).unwrap());
        let rhs: Vec<Complex64> = dv.iter().zip(&dw).map(|(a, b)| a + c * b).collect();
        assert!(max_diff(&lhs, &rhs) < 1e-10);
    }

    #[test]
    fn compress_matches_quadratic_form() {
        let (h, params) = setup(4, 16, 2.0);
        let basis = build_lod_basis(h.clone(), &params, 1).unwrap();
        let forms = FormSet::new(Arc::new(h.fine().clone()), params);
        let u = pseudo_random(h.fine().num_vertices(), 9);
        for op in [forms.magnetic().clone(), assemble_stiffness(h.fine()), forms.hessian_operator(&u)] {
            let r = basis.compress(&op).unwrap();
            assert_eq!(r.max_asymmetry(), 0.0);
            for s in 0..5 {
                let x = pseudo_random(basis.num_columns(), 20 + s);
                let y = pseudo_random(basis.num_columns(), 40 + s);
                let (bx, by) = (basis.prolong(&x), basis.prolong(&y));
                let want = op.form(&bx, &by);
                assert!((r.form(&x, &y) - want).abs() < 1e-10 * (1.0 + want.abs()));
            }
        }
        let m = basis.compress(forms.mass()).unwrap();
        assert!(m.diagonal().iter().all(|b| b[0] > 0.0 && b[3] > 0.0));
        let bad = SymmetricOperator::with_pattern(&[vec![0]]);
        assert!(basis.compress(&bad).is_err());
    }

    #[test]
    fn restrict_is_adjoint_of_prolong() {
        let (h, params) = setup(4, 16, 2.0);
        let basis = build_lod_basis(h.clone(), &params, 1).unwrap();
        let x = pseudo_random(basis.num_columns(), 1);
        let g = pseudo_random(basis.num_fine(), 2);
        let lhs = real_dot(&g, &basis.prolong(&x));
        let rhs = real_dot(&basis.restrict(&g), &x);
        assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn cache_roundtrip_and_validation() {
        let (h, params) = setup(4, 16, 2.0);
        let basis = build_lod_basis(h.clone(), &params, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("basis.gllod");
        basis.write_cache(&path).unwrap();
        let head = std::fs::read(&path).unwrap();
        assert!(head.starts_with(b"GLLOD v1 4 16 1 2.0\n"));
        let back = LodBasis::read_cache(&path, h.clone(), 1, &params).unwrap();
        for j in 0..basis.num_columns() {
            assert!(back.column(j).eq(basis.column(j)));
        }
        assert!(LodBasis::read_cache(&path, h.clone(), 2, &params).is_err());
        let other = Params::new(3.0, Potential::SinCos).unwrap();
        assert!(LodBasis::read_cache(&path, h.clone(), 1, &other).is_err());
        let h2 = Arc::new(Hierarchy::from_sizes(4, 32).unwrap());
        assert!(LodBasis::read_cache(&path, h2, 1, &params).is_err());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(LodBasis::read_cache(&path, h, 1, &params).is_err());
    }

    #[test]
    fn header_parse() {
        let key = CacheKey { coarse_n: 8, fine_n: 64, layers: 3, kappa: 10.0 };
        assert_eq!(key.header(), "GLLOD v1 8 64 3 10.0");
        assert_eq!(CacheKey::parse(&key.header()).unwrap(), key);
        assert!(CacheKey::parse("GLLOD v2 8 64 3 10.0").is_err());
        assert!(CacheKey::parse("GLLOD v1 8 64 3").is_err());
    }

    #[test]
    fn unrefined_hierarchy_gives_hats() {
        let (h, params) = setup(4, 4, 2.0);
        let basis = build_lod_basis(h, &params, 1).unwrap();
        for j in 0..basis.num_columns() {
            assert_eq!(basis.column(j).collect::<Vec<_>>(), [(j, Complex64::new(1.0, 0.0))]);
        }
    }
}
