//! Sparse symmetric operators over complex nodal unknowns.
//!
//! Every complex unknown contributes two interleaved real degrees of freedom
//! `(re, im)`, so operators are stored as block-CSR matrices with real 2x2
//! blocks. A block `[b0, b1, b2, b3]` acts on `(re, im)` as
//! `[[b0, b1], [b2, b3]]`. Vectors are `Complex64` slices and the pairing is
//! the real inner product `sum Re(x * conj(y))`.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::linalg::cholesky::llt::factor::LltRegularization;
use faer::sparse::linalg::amd;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, LdltRef, LltRef, SymbolicCholesky, SymmetricOrdering,
};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, MatMut, Par, Side};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Block = [f64; 4];

pub const ZERO_BLOCK: Block = [0.0; 4];

/// Block of multiplication by the complex number `c`.
#[inline]
pub fn complex_block(c: Complex64) -> Block {
    [c.re, -c.im, c.im, c.re]
}

#[inline]
pub fn scalar_block(s: f64) -> Block {
    [s, 0.0, 0.0, s]
}

#[inline]
pub fn block_apply(b: &Block, x: Complex64) -> Complex64 {
    Complex64::new(b[0] * x.re + b[1] * x.im, b[2] * x.re + b[3] * x.im)
}

#[inline]
pub fn block_transpose(b: &Block) -> Block {
    [b[0], b[2], b[1], b[3]]
}

#[inline]
fn block_axpy(acc: &mut Block, alpha: f64, b: &Block) {
    for k in 0..4 {
        acc[k] += alpha * b[k];
    }
}

/// `sum Re(a_k * conj(b_k))`.
pub fn real_dot(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

pub fn norm2(a: &[Complex64]) -> f64 {
    real_dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(y: &mut [Complex64], alpha: f64, x: &[Complex64]) {
    assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi * alpha;
    }
}

/// Views complex values as interleaved `(re, im)` reals.
pub fn as_real(x: &[Complex64]) -> &[f64] {
    // SAFETY: `Complex<f64>` is `#[repr(C)]` with fields `re, im`.
    unsafe { std::slice::from_raw_parts(x.as_ptr() as *const f64, 2 * x.len()) }
}

pub fn as_real_mut(x: &mut [Complex64]) -> &mut [f64] {
    // SAFETY: see `as_real`.
    unsafe { std::slice::from_raw_parts_mut(x.as_mut_ptr() as *mut f64, 2 * x.len()) }
}

/// Real symmetric operator in 2x2 block-CSR storage (both triangles stored).
#[derive(Debug, Clone)]
pub struct SymmetricOperator {
    nb: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Block>,
}

impl SymmetricOperator {
    /// Zero operator whose block pattern is `pattern[i]` (sorted, deduplicated) per row.
    pub fn with_pattern(pattern: &[Vec<usize>]) -> Self {
        let mut row_ptr = Vec::with_capacity(pattern.len() + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        for row in pattern {
            debug_assert!(row.windows(2).all(|w| w[0] < w[1]));
            cols.extend_from_slice(row);
            row_ptr.push(cols.len());
        }
        let vals = vec![ZERO_BLOCK; cols.len()];
        Self {
            nb: pattern.len(),
            row_ptr,
            cols,
            vals,
        }
    }

    /// Sums duplicate entries. The caller supplies both triangles.
    pub fn from_triplets(nb: usize, mut entries: Vec<(usize, usize, Block)>) -> Self {
        entries.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; nb + 1];
        let mut cols: Vec<usize> = Vec::with_capacity(entries.len());
        let mut vals: Vec<Block> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, b) in entries {
            assert!(i < nb && j < nb, "triplet ({i}, {j}) out of range {nb}");
            if last == Some((i, j)) {
                block_axpy(vals.last_mut().unwrap(), 1.0, &b);
            } else {
                cols.push(j);
                vals.push(b);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..nb {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            nb,
            row_ptr,
            cols,
            vals,
        }
    }

    /// Assembles from per-row `(column, block)` lists (each row sorted by column).
    pub fn from_rows(rows: Vec<Vec<(usize, Block)>>) -> Self {
        let nb = rows.len();
        let mut row_ptr = Vec::with_capacity(nb + 1);
        row_ptr.push(0);
        let total = rows.iter().map(Vec::len).sum();
        let mut cols = Vec::with_capacity(total);
        let mut vals = Vec::with_capacity(total);
        for row in rows {
            for (j, b) in row {
                cols.push(j);
                vals.push(b);
            }
            row_ptr.push(cols.len());
        }
        Self {
            nb,
            row_ptr,
            cols,
            vals,
        }
    }

    /// Number of complex unknowns.
    pub fn num_blocks(&self) -> usize {
        self.nb
    }

    /// Number of real degrees of freedom.
    pub fn dim(&self) -> usize {
        2 * self.nb
    }

    pub fn nnz_blocks(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, &Block)> {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(&self.vals[r])
    }

    pub fn get(&self, i: usize, j: usize) -> Option<Block> {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .binary_search(&j)
            .ok()
            .map(|k| self.vals[r.start + k])
    }

    /// Adds `b` to block `(i, j)`; the block must be in the pattern.
    #[inline]
    pub fn add_block(&mut self, i: usize, j: usize, b: &Block) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        let k = self.cols[r.clone()]
            .binary_search(&j)
            .unwrap_or_else(|_| panic!("block ({i}, {j}) not in pattern"));
        block_axpy(&mut self.vals[r.start + k], 1.0, b);
    }

    pub fn same_pattern(&self, other: &Self) -> bool {
        self.nb == other.nb && self.row_ptr == other.row_ptr && self.cols == other.cols
    }

    /// `self + alpha * other`, merging patterns when they differ.
    pub fn add_scaled(&self, alpha: f64, other: &Self) -> Result<Self> {
        if self.nb != other.nb {
            return Err(Error::Dimension(format!(
                "operator sizes differ: {} vs {}",
                self.nb, other.nb
            )));
        }
        if self.same_pattern(other) {
            let mut out = self.clone();
            for (v, w) in out.vals.iter_mut().zip(&other.vals) {
                block_axpy(v, alpha, w);
            }
            return Ok(out);
        }
        let rows = (0..self.nb)
            .map(|i| {
                let mut merged: Vec<(usize, Block)> = self.row(i).map(|(j, b)| (j, *b)).collect();
                for (j, b) in other.row(i) {
                    match merged.binary_search_by_key(&j, |e| e.0) {
                        Ok(k) => block_axpy(&mut merged[k].1, alpha, b),
                        Err(k) => {
                            let mut nb = ZERO_BLOCK;
                            block_axpy(&mut nb, alpha, b);
                            merged.insert(k, (j, nb));
                        }
                    }
                }
                merged
            })
            .collect();
        Ok(Self::from_rows(rows))
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.vals {
            for x in v.iter_mut() {
                *x *= alpha;
            }
        }
    }

    pub fn apply_into(&self, x: &[Complex64], y: &mut [Complex64]) {
        assert_eq!(x.len(), self.nb);
        assert_eq!(y.len(), self.nb);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += block_apply(&self.vals[k], x[self.cols[k]]);
            }
            *yi = acc;
        }
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::new(0.0, 0.0); self.nb];
        self.apply_into(x, &mut y);
        y
    }

    /// Bilinear form `y . (A x)`.
    pub fn form(&self, x: &[Complex64], y: &[Complex64]) -> f64 {
        real_dot(&self.apply(x), y)
    }

    pub fn quadratic(&self, x: &[Complex64]) -> f64 {
        self.form(x, x)
    }

    pub fn diagonal(&self) -> Vec<Block> {
        (0..self.nb)
            .map(|i| self.get(i, i).unwrap_or(ZERO_BLOCK))
            .collect()
    }

    /// Largest `|A_ij - A_ji|` over stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.nb {
            for (j, b) in self.row(i) {
                let bt = self.get(j, i).map(|t| block_transpose(&t)).unwrap_or(ZERO_BLOCK);
                for k in 0..4 {
                    worst = worst.max((b[k] - bt[k]).abs());
                }
            }
        }
        worst
    }

    /// True when every block has the form `[[a, -b], [b, a]]`, so the operator commutes with `i`.
    pub fn is_complex_linear(&self) -> bool {
        self.vals.iter().all(|b| b[0] == b[3] && b[1] == -b[2])
    }

    pub fn max_abs(&self) -> f64 {
        self.vals
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Restriction to the unknowns `idx` (in the given order).
    pub fn principal_submatrix(&self, idx: &[usize]) -> Self {
        let mut local = vec![usize::MAX; self.nb];
        for (l, &g) in idx.iter().enumerate() {
            local[g] = l;
        }
        let rows = idx
            .iter()
            .map(|&g| {
                let mut row: Vec<(usize, Block)> = self
                    .row(g)
                    .filter(|(j, _)| local[*j] != usize::MAX)
                    .map(|(j, b)| (local[j], *b))
                    .collect();
                row.sort_unstable_by_key(|e| e.0);
                row
            })
            .collect();
        Self::from_rows(rows)
    }

    /// Lower triangle as scalar triplets (row >= col), offset by `shift` scalar rows/cols.
    pub fn lower_triplets(&self, shift: usize, out: &mut Vec<Triplet<usize, usize, f64>>) {
        for i in 0..self.nb {
            for (j, b) in self.row(i) {
                if j > i {
                    continue;
                }
                for s in 0..2 {
                    for t in 0..2 {
                        let (r, c) = (2 * i + s, 2 * j + t);
                        if r >= c {
                            out.push(Triplet::new(r + shift, c + shift, b[2 * s + t]));
                        }
                    }
                }
            }
        }
    }

    pub fn to_faer_lower(&self) -> SparseColMat<usize, f64> {
        let mut trip = Vec::with_capacity(2 * self.nnz_blocks() + 2 * self.nb);
        self.lower_triplets(0, &mut trip);
        SparseColMat::try_new_from_triplets(self.dim(), self.dim(), &trip)
            .expect("valid triplets")
    }

    /// Dense real matrix (row-major), for small problems and tests.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..self.nb {
            for (j, b) in self.row(i) {
                d[2 * i][2 * j] = b[0];
                d[2 * i][2 * j + 1] = b[1];
                d[2 * i + 1][2 * j] = b[2];
                d[2 * i + 1][2 * j + 1] = b[3];
            }
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FactorKind {
    Llt,
    Ldlt,
}

/// Sparse `LL^T` or `LDL^T` factorization of a real symmetric matrix.
pub struct Factorization {
    symbolic: SymbolicCholesky<usize>,
    values: Vec<f64>,
    kind: FactorKind,
    pattern: (Vec<usize>, Vec<usize>),
}

fn pattern_of(lower: &SparseColMat<usize, f64>) -> (Vec<usize>, Vec<usize>) {
    let s = lower.symbolic();
    (s.col_ptr().to_vec(), s.row_idx().to_vec())
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization")
            .field("dim", &self.symbolic.nrows())
            .field("kind", &self.kind)
            .field("len_val", &self.values.len())
            .finish()
    }
}

fn mem_buffer(req: faer::dyn_stack::StackReq) -> Result<MemBuffer> {
    MemBuffer::try_new(req).map_err(|_| Error::Factorization("out of memory".into()))
}

impl Factorization {
    /// Cholesky factorization; fails unless the operator is numerically positive definite.
    pub fn cholesky(op: &SymmetricOperator) -> Result<Self> {
        Self::cholesky_lower(&op.to_faer_lower())
    }

    pub fn cholesky_lower(lower: &SparseColMat<usize, f64>) -> Result<Self> {
        let symbolic = factorize_symbolic_cholesky(
            lower.symbolic(),
            Side::Lower,
            SymmetricOrdering::Amd,
            Default::default(),
        )
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        let mut out = Self {
            values: vec![0.0; symbolic.len_val()],
            symbolic,
            kind: FactorKind::Llt,
            pattern: pattern_of(lower),
        };
        out.numeric_llt(lower)?;
        Ok(out)
    }

    fn numeric_llt(&mut self, lower: &SparseColMat<usize, f64>) -> Result<()> {
        let mut mem = mem_buffer(
            self.symbolic
                .factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default()),
        )?;
        self.symbolic
            .factorize_numeric_llt::<f64>(
                &mut self.values,
                lower.as_ref(),
                Side::Lower,
                LltRegularization::default(),
                Par::Seq,
                MemStack::new(&mut mem),
                Default::default(),
            )
            .map_err(|e| Error::Factorization(format!("matrix is not positive definite ({e:?})")))?;
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Factorization("non-finite factor entries".into()));
        }
        Ok(())
    }

    /// Cholesky factorization of a matrix with the same sparsity pattern,
    /// reusing the symbolic analysis.
    pub fn refactor_cholesky(&mut self, op: &SymmetricOperator) -> Result<()> {
        let lower = op.to_faer_lower();
        if self.kind != FactorKind::Llt || pattern_of(&lower) != self.pattern {
            *self = Self::cholesky_lower(&lower)?;
            return Ok(());
        }
        self.numeric_llt(&lower)
    }

    /// `LDL^T` factorization without pivoting under the elimination order
    /// `order` (new position -> old index), or AMD when `None`.
    pub fn ldlt_lower(lower: &SparseColMat<usize, f64>, order: Option<&[usize]>) -> Result<Self> {
        let n = lower.nrows();
        let inverse: Option<Vec<usize>> = order.map(|fwd| {
            let mut inv = vec![0; n];
            for (new, &old) in fwd.iter().enumerate() {
                inv[old] = new;
            }
            inv
        });
        let ordering = match (order, &inverse) {
            (Some(fwd), Some(inv)) => SymmetricOrdering::Custom(faer::perm::PermRef::new_checked(fwd, inv, n)),
            _ => SymmetricOrdering::Amd,
        };
        let symbolic =
            factorize_symbolic_cholesky(lower.symbolic(), Side::Lower, ordering, Default::default())
                .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        let mut values = vec![0.0; symbolic.len_val()];
        let mut mem =
            mem_buffer(symbolic.factorize_numeric_ldlt_scratch::<f64>(Par::Seq, Default::default()))?;
        symbolic
            .factorize_numeric_ldlt::<f64>(
                &mut values,
                lower.as_ref(),
                Side::Lower,
                LdltRegularization::default(),
                Par::Seq,
                MemStack::new(&mut mem),
                Default::default(),
            )
            .map_err(|e| Error::Factorization(format!("singular pivot ({e:?})")))?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Factorization("non-finite factor entries".into()));
        }
        Ok(Self {
            symbolic,
            values,
            kind: FactorKind::Ldlt,
            pattern: pattern_of(lower),
        })
    }

    pub fn dim(&self) -> usize {
        self.symbolic.nrows()
    }

    /// Solves `A X = B` in place for a column-major block of right-hand sides.
    pub fn solve_columns_in_place(&self, rhs: &mut [f64], ncols: usize) {
        let n = self.dim();
        assert_eq!(rhs.len(), n * ncols);
        let req = self.symbolic.solve_in_place_scratch::<f64>(ncols, Par::Seq);
        let mut mem = MemBuffer::new(req);
        let stack = MemStack::new(&mut mem);
        let mat = MatMut::from_column_major_slice_mut(rhs, n, ncols);
        match self.kind {
            FactorKind::Llt => LltRef::new(&self.symbolic, &self.values)
                .solve_in_place_with_conj(Conj::No, mat, Par::Seq, stack),
            FactorKind::Ldlt => LdltRef::new(&self.symbolic, &self.values)
                .solve_in_place_with_conj(Conj::No, mat, Par::Seq, stack),
        }
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        self.solve_columns_in_place(rhs, 1);
    }

    /// Solves for complex-encoded unknowns.
    pub fn solve(&self, rhs: &[Complex64]) -> Vec<Complex64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(as_real_mut(&mut x));
        x
    }
}

/// Approximate-minimum-degree order of the scalar matrix with lower triangle `lower`.
pub fn amd_order(lower: &SparseColMat<usize, f64>) -> Result<Vec<usize>> {
    let n = lower.nrows();
    let mut perm = vec![0usize; n];
    let mut perm_inv = vec![0usize; n];
    let nnz = lower.compute_nnz();
    let mut mem = mem_buffer(amd::order_scratch::<usize>(n, nnz))?;
    amd::order(
        &mut perm,
        &mut perm_inv,
        lower.symbolic(),
        amd::Control::default(),
        MemStack::new(&mut mem),
    )
    .map_err(|e| Error::Factorization(format!("ordering failed: {e:?}")))?;
    Ok(perm)
}
