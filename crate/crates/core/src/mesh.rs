//! Structured triangulations of the unit square.
//!
//! Vertex `(i, j)` sits at `(i/n, j/n)` and has index `j * (n + 1) + i`.
//! Cell `(i, j)` is split along its lower-left to upper-right diagonal into
//! the triangles `2 * (j * n + i)` (below the diagonal) and
//! `2 * (j * n + i) + 1` (above it), both counterclockwise.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Uniform triangulation of `(0,1)^2` with `n` cells per side.
#[derive(Debug, Clone)]
pub struct Mesh {
    n: usize,
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    vertex_adjacency: Vec<Vec<usize>>,
}

impl Mesh {
    pub fn build_uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("mesh needs at least one subdivision".into()));
        }
        let h = 1.0 / n as f64;
        let side = n + 1;
        let mut vertices = Vec::with_capacity(side * side);
        for j in 0..side {
            for i in 0..side {
                vertices.push([i as f64 * h, j as f64 * h]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let v00 = j * side + i;
                let v10 = v00 + 1;
                let v01 = v00 + side;
                let v11 = v01 + 1;
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        let mut vertex_adjacency = vec![Vec::new(); vertices.len()];
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                vertex_adjacency[v].push(t);
            }
        }
        Ok(Self {
            n,
            vertices,
            triangles,
            vertex_adjacency,
        })
    }

    /// Subdivisions per side.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Triangles incident to vertex `v`, in ascending order.
    pub fn incident_triangles(&self, v: usize) -> &[usize] {
        &self.vertex_adjacency[v]
    }

    /// Signed area of triangle `t` (positive for counterclockwise orientation).
    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    pub fn vertex_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    pub fn on_boundary(&self, v: usize) -> bool {
        let side = self.n + 1;
        let (i, j) = (v % side, v / side);
        i == 0 || j == 0 || i == self.n || j == self.n
    }

    /// Index of the triangle containing `p` (ties resolved towards the lower cell).
    pub fn locate(&self, p: [f64; 2]) -> usize {
        let n = self.n as f64;
        let i = ((p[0] * n).floor().max(0.0) as usize).min(self.n - 1);
        let j = ((p[1] * n).floor().max(0.0) as usize).min(self.n - 1);
        let fx = p[0] * n - i as f64;
        let fy = p[1] * n - j as f64;
        let cell = j * self.n + i;
        if fy <= fx {
            2 * cell
        } else {
            2 * cell + 1
        }
    }

    /// Barycentric coordinates of `p` with respect to triangle `t`.
    pub fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        let det = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
        let l1 = ((p[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (p[1] - pa[1])) / det;
        let l2 = ((pb[0] - pa[0]) * (p[1] - pa[1]) - (p[0] - pa[0]) * (pb[1] - pa[1])) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    /// Vertex-to-vertex graph along triangle edges (sorted, without self loops).
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nbrs: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.num_vertices()];
        for tri in &self.triangles {
            for &a in tri {
                for &b in tri {
                    if a != b {
                        nbrs[a].insert(b);
                    }
                }
            }
        }
        nbrs.into_iter().map(|s| s.into_iter().collect()).collect()
    }
}

/// Nested pair of meshes obtained by dyadic refinement.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    coarse: Mesh,
    fine: Mesh,
    /// Fine vertex -> list of (coarse vertex, weight).
    prolongation: Vec<Vec<(usize, f64)>>,
    /// Fine triangle -> coarse triangle containing it.
    parent: Vec<usize>,
    /// Coarse triangle -> fine triangles inside it.
    children: Vec<Vec<usize>>,
}

impl Hierarchy {
    /// Refines `mesh` `levels` times (each level halves the mesh size).
    pub fn refine(mesh: &Mesh, levels: u32) -> Result<Self> {
        let factor = 1usize
            .checked_shl(levels)
            .filter(|f| f.checked_mul(mesh.n()).is_some())
            .ok_or_else(|| Error::Config(format!("refinement by {levels} levels overflows")))?;
        Self::with_fine(mesh.clone(), Mesh::build_uniform(mesh.n() * factor)?)
    }

    /// Builds the hierarchy between two uniform meshes with `fine_n` a multiple of `coarse_n`.
    pub fn from_sizes(coarse_n: usize, fine_n: usize) -> Result<Self> {
        if coarse_n == 0 || fine_n == 0 || !fine_n.is_multiple_of(coarse_n) {
            return Err(Error::Config(format!(
                "fine resolution {fine_n} must be a positive multiple of coarse resolution {coarse_n}"
            )));
        }
        Self::with_fine(Mesh::build_uniform(coarse_n)?, Mesh::build_uniform(fine_n)?)
    }

    fn with_fine(coarse: Mesh, fine: Mesh) -> Result<Self> {
        if !fine.n().is_multiple_of(coarse.n()) {
            return Err(Error::Config("fine mesh does not nest the coarse mesh".into()));
        }
        let r = fine.n() / coarse.n();
        let (nc, side_f) = (coarse.n(), fine.n() + 1);
        let prolongation = (0..fine.num_vertices())
            .map(|v| {
                let (fi, fj) = (v % side_f, v / side_f);
                let (i, j) = ((fi / r).min(nc - 1), (fj / r).min(nc - 1));
                let fx = (fi - i * r) as f64 / r as f64;
                let fy = (fj - j * r) as f64 / r as f64;
                let v00 = coarse.vertex_index(i, j);
                let (v10, v01, v11) = (v00 + 1, v00 + nc + 1, v00 + nc + 2);
                let weights = if fy <= fx {
                    [(v00, 1.0 - fx), (v10, fx - fy), (v11, fy)]
                } else {
                    [(v00, 1.0 - fy), (v11, fx), (v01, fy - fx)]
                };
                weights.into_iter().filter(|&(_, w)| w != 0.0).collect()
            })
            .collect();
        let mut children = vec![Vec::new(); coarse.num_triangles()];
        let parent = (0..fine.num_triangles())
            .map(|t| {
                let cell = t / 2;
                let (fi, fj) = (cell % fine.n(), cell / fine.n());
                let (i, j) = (fi / r, fj / r);
                let (li, lj) = (fi - i * r, fj - j * r);
                // Fine cells strictly below the coarse diagonal, plus the lower half of diagonal cells.
                let lower = lj < li || (lj == li && t % 2 == 0);
                let pt = 2 * (j * nc + i) + usize::from(!lower);
                children[pt].push(t);
                pt
            })
            .collect();
        Ok(Self {
            coarse,
            fine,
            prolongation,
            parent,
            children,
        })
    }

    pub fn coarse(&self) -> &Mesh {
        &self.coarse
    }

    pub fn fine(&self) -> &Mesh {
        &self.fine
    }

    pub fn ratio(&self) -> usize {
        self.fine.n() / self.coarse.n()
    }

    /// Sparse prolongation rows: fine vertex -> (coarse vertex, weight).
    pub fn prolongation(&self) -> &[Vec<(usize, f64)>] {
        &self.prolongation
    }

    pub fn parent(&self, fine_triangle: usize) -> usize {
        self.parent[fine_triangle]
    }

    pub fn children(&self, coarse_triangle: usize) -> &[usize] {
        &self.children[coarse_triangle]
    }

    /// Evaluates the piecewise-linear coarse function with nodal `values` at the fine vertices.
    pub fn prolongate<T>(&self, values: &[T]) -> Vec<T>
    where
        T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
    {
        assert_eq!(values.len(), self.coarse.num_vertices());
        self.prolongation
            .iter()
            .map(|row| {
                row.iter()
                    .fold(T::default(), |acc, &(c, w)| acc + values[c] * w)
            })
            .collect()
    }

    /// Transpose of [`Hierarchy::prolongate`].
    pub fn restrict<T>(&self, values: &[T]) -> Vec<T>
    where
        T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
    {
        assert_eq!(values.len(), self.fine.num_vertices());
        let mut out = vec![T::default(); self.coarse.num_vertices()];
        for (row, &v) in self.prolongation.iter().zip(values) {
            for &(c, w) in row {
                out[c] = out[c] + v * w;
            }
        }
        out
    }
}

/// Layered element patch around a coarse seed element.
#[derive(Debug, Clone)]
pub struct Patch {
    pub seed: usize,
    pub layers: usize,
    /// Coarse elements, ascending.
    pub elements: Vec<usize>,
    /// Fine elements inside the coarse elements, ascending.
    pub fine_elements: Vec<usize>,
    /// Fine vertices of the patch, ascending.
    pub fine_vertices: Vec<usize>,
    /// Parallel to `fine_vertices`: true where the vertex lies on the patch
    /// boundary inside the domain (homogeneous Dirichlet for correctors).
    pub boundary_flags: Vec<bool>,
}

impl Patch {
    /// True when the patch covers the whole coarse mesh.
    pub fn is_saturated(&self, mesh: &Mesh) -> bool {
        self.elements.len() == mesh.num_triangles()
    }

    /// Coarse vertices of the patch elements, ascending.
    pub fn coarse_vertices(&self, mesh: &Mesh) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .elements
            .iter()
            .flat_map(|&t| mesh.triangles()[t])
            .collect();
        set.into_iter().collect()
    }
}

/// `layers`-fold vertex-neighbourhood closure of `{seed}` on `mesh`.
pub fn element_patch_coarse(mesh: &Mesh, seed: usize, layers: usize) -> Result<Vec<usize>> {
    closure(mesh, &[seed], layers)
}

/// `layers`-fold vertex-neighbourhood closure of the element set `seeds`.
pub fn closure(mesh: &Mesh, seeds: &[usize], layers: usize) -> Result<Vec<usize>> {
    let mut inside = vec![false; mesh.num_triangles()];
    let mut current = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        if seed >= mesh.num_triangles() {
            return Err(Error::Config(format!(
                "seed element {seed} out of range (mesh has {} triangles)",
                mesh.num_triangles()
            )));
        }
        if !inside[seed] {
            inside[seed] = true;
            current.push(seed);
        }
    }
    for _ in 0..layers {
        let verts: BTreeSet<usize> = current.iter().flat_map(|&t| mesh.triangles()[t]).collect();
        let mut grown = false;
        for v in verts {
            for &t in mesh.incident_triangles(v) {
                if !inside[t] {
                    inside[t] = true;
                    current.push(t);
                    grown = true;
                }
            }
        }
        if !grown {
            break;
        }
    }
    current.sort_unstable();
    Ok(current)
}

/// Builds the patch of `layers` layers around coarse element `seed`, with its fine-mesh data.
pub fn element_patch(hierarchy: &Hierarchy, seed: usize, layers: usize) -> Result<Patch> {
    let elements = element_patch_coarse(hierarchy.coarse(), seed, layers)?;
    Ok(with_fine_data(hierarchy, seed, layers, elements))
}

/// Patch of `layers` layers around the support of the coarse hat at `vertex`.
/// Its seed is the lowest-index element containing the vertex.
pub fn vertex_patch(hierarchy: &Hierarchy, vertex: usize, layers: usize) -> Result<Patch> {
    let coarse = hierarchy.coarse();
    if vertex >= coarse.num_vertices() {
        return Err(Error::Config(format!(
            "vertex {vertex} out of range (mesh has {} vertices)",
            coarse.num_vertices()
        )));
    }
    let star = coarse.incident_triangles(vertex);
    let elements = closure(coarse, star, layers)?;
    let seed = *star.iter().min().expect("every vertex has an incident triangle");
    Ok(with_fine_data(hierarchy, seed, layers, elements))
}

fn with_fine_data(hierarchy: &Hierarchy, seed: usize, layers: usize, elements: Vec<usize>) -> Patch {
    let fine = hierarchy.fine();
    let mut fine_elements: Vec<usize> = elements
        .iter()
        .flat_map(|&t| hierarchy.children(t).iter().copied())
        .collect();
    fine_elements.sort_unstable();
    let mut in_patch = vec![false; fine.num_triangles()];
    for &t in &fine_elements {
        in_patch[t] = true;
    }
    let verts: BTreeSet<usize> = fine_elements.iter().flat_map(|&t| fine.triangles()[t]).collect();
    let fine_vertices: Vec<usize> = verts.into_iter().collect();
    let boundary_flags = fine_vertices
        .iter()
        .map(|&v| fine.incident_triangles(v).iter().any(|&t| !in_patch[t]))
        .collect();
    Patch {
        seed,
        layers,
        elements,
        fine_elements,
        fine_vertices,
        boundary_flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    #[test]
    fn counts() {
        for (n, nv, nt) in [(1, 4, 2), (2, 9, 8), (128, 16641, 32768)] {
            let m = Mesh::build_uniform(n).unwrap();
            assert_eq!(m.num_vertices(), nv);
            assert_eq!(m.num_triangles(), nt);
        }
        assert!(Mesh::build_uniform(0).is_err());
    }

    #[test]
    fn areas_positive_and_tile_the_square() {
        let m = Mesh::build_uniform(7).unwrap();
        let h = m.h();
        let mut total = 0.0;
        for t in 0..m.num_triangles() {
            let a = m.signed_area(t);
            assert!((a - 0.5 * h * h).abs() < 1e-15);
            total += a;
        }
        assert!((total - 1.0).abs() < 1e-13);
    }

    #[test]
    fn locate_finds_containing_triangle() {
        let m = Mesh::build_uniform(5).unwrap();
        for &p in &[[0.13, 0.71], [0.99, 0.01], [0.5, 0.5], [0.0, 1.0], [0.31, 0.3]] {
            let t = m.locate(p);
            let lam = m.barycentric(t, p);
            assert!(lam.iter().all(|&l| l > -1e-12), "{p:?} -> {lam:?}");
        }
    }

    #[test]
    fn refine_levels() {
        let m = Mesh::build_uniform(2).unwrap();
        let h0 = Hierarchy::refine(&m, 0).unwrap();
        assert_eq!(h0.fine().n(), 2);
        for (f, row) in h0.prolongation().iter().enumerate() {
            assert_eq!(row.as_slice(), &[(f, 1.0)]);
        }
        let h3 = Hierarchy::refine(&m, 3).unwrap();
        assert_eq!(h3.fine().num_triangles(), 512);
        for t in 0..h3.coarse().num_triangles() {
            assert_eq!(h3.children(t).len(), 64);
        }
    }

    #[test]
    fn prolongated_hat_matches_analytic_hat() {
        let h = Hierarchy::from_sizes(4, 16).unwrap();
        let coarse = h.coarse();
        let center = coarse.vertex_index(2, 1);
        let mut hat = vec![0.0; coarse.num_vertices()];
        hat[center] = 1.0;
        let fine_vals = h.prolongate(&hat);
        let [cx, cy] = coarse.vertices()[center];
        let hc = coarse.h();
        for (v, p) in h.fine().vertices().iter().enumerate() {
            // Hat on the LL->UR diagonal mesh: 1 - max(|dx|, |dy|, |dx - dy|) / h.
            let dx = (p[0] - cx) / hc;
            let dy = (p[1] - cy) / hc;
            let expected = (1.0 - dx.abs().max(dy.abs()).max((dx - dy).abs())).max(0.0);
            assert!((fine_vals[v] - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn prolongation_preserves_coarse_values_and_constants() {
        let h = Hierarchy::from_sizes(3, 12).unwrap();
        let coarse_vals: Vec<f64> = (0..h.coarse().num_vertices()).map(|i| (i as f64).sin()).collect();
        let fine_vals = h.prolongate(&coarse_vals);
        for j in 0..=3 {
            for i in 0..=3 {
                let c = h.coarse().vertex_index(i, j);
                let f = h.fine().vertex_index(4 * i, 4 * j);
                assert_eq!(fine_vals[f], coarse_vals[c]);
            }
        }
        let ones = h.prolongate(&vec![1.0; h.coarse().num_vertices()]);
        assert!(ones.iter().all(|&x| (x - 1.0).abs() < 1e-14));
    }

    fn bfs_layers(mesh: &Mesh, seed: usize, layers: usize) -> BTreeSet<usize> {
        // Distance in the element graph where elements sharing a vertex are adjacent.
        let nt = mesh.num_triangles();
        let mut dist = vec![usize::MAX; nt];
        dist[seed] = 0;
        let mut queue = VecDeque::from([seed]);
        while let Some(t) = queue.pop_front() {
            for other in 0..nt {
                if dist[other] == usize::MAX
                    && mesh.triangles()[t]
                        .iter()
                        .any(|v| mesh.triangles()[other].contains(v))
                {
                    dist[other] = dist[t] + 1;
                    queue.push_back(other);
                }
            }
        }
        (0..nt).filter(|&t| dist[t] <= layers).collect()
    }

    #[test]
    fn patch_matches_bfs_oracle() {
        let m = Mesh::build_uniform(8).unwrap();
        let seed = 2 * (3 * 8 + 4);
        for layers in 0..4 {
            let got: BTreeSet<usize> = element_patch_coarse(&m, seed, layers).unwrap().into_iter().collect();
            assert_eq!(got, bfs_layers(&m, seed, layers));
        }
        assert_eq!(element_patch_coarse(&m, seed, 0).unwrap(), vec![seed]);
        assert_eq!(element_patch_coarse(&m, seed, 16).unwrap().len(), 128);
        assert!(element_patch_coarse(&m, 128, 1).is_err());
    }

    #[test]
    fn vertex_patch_between_seed_layers() {
        let h = Hierarchy::from_sizes(6, 12).unwrap();
        let m = h.coarse();
        for v in 0..m.num_vertices() {
            let star: BTreeSet<usize> = m.incident_triangles(v).iter().copied().collect();
            let p0: BTreeSet<usize> = vertex_patch(&h, v, 0).unwrap().elements.into_iter().collect();
            assert_eq!(p0, star);
            for layers in 0..4 {
                let p = vertex_patch(&h, v, layers).unwrap();
                let inner: BTreeSet<usize> = element_patch_coarse(m, p.seed, layers).unwrap().into_iter().collect();
                let outer: BTreeSet<usize> = element_patch_coarse(m, p.seed, layers + 1).unwrap().into_iter().collect();
                let got: BTreeSet<usize> = p.elements.iter().copied().collect();
                assert!(inner.is_subset(&got) && got.is_subset(&outer));
            }
        }
        assert!(vertex_patch(&h, m.num_vertices(), 1).is_err());
    }

    #[test]
    fn patch_monotone_for_all_seeds() {
        for n in [1, 3, 6] {
            let m = Mesh::build_uniform(n).unwrap();
            for seed in 0..m.num_triangles() {
                let mut prev: BTreeSet<usize> = BTreeSet::new();
                for layers in 0..=2 * n {
                    let cur: BTreeSet<usize> =
                        element_patch_coarse(&m, seed, layers).unwrap().into_iter().collect();
                    assert!(prev.is_subset(&cur));
                    prev = cur;
                }
                assert_eq!(prev.len(), m.num_triangles());
            }
        }
    }

    #[test]
    fn patch_fine_data() {
        let h = Hierarchy::from_sizes(4, 16).unwrap();
        let p = element_patch(&h, 0, 0).unwrap();
        assert_eq!(p.fine_elements.len(), 16);
        // Lower-right triangle of the corner cell: only its bottom edge is on the domain
        // boundary; the vertical edge and the diagonal carry 5 + 5 - 1 fine vertices.
        let flagged = p.boundary_flags.iter().filter(|&&b| b).count();
        assert_eq!(flagged, 9);
        let full = element_patch(&h, 0, 10).unwrap();
        assert!(full.is_saturated(h.coarse()));
        assert!(full.boundary_flags.iter().all(|&b| !b));
    }
}
