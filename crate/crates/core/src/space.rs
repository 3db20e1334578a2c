//! Discrete spaces for the minimization: standard P1 on a mesh, or an LOD space.
//!
//! Iterates are coefficient vectors. For the P1 space these are nodal values;
//! for an LOD space they multiply the basis columns. Energies and derivatives
//! are always evaluated on the fine representation.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forms::{assemble_modulus_mass, Field, FormSet, Params, QuarticLine};
use crate::lod::{CoarseProjector, LodBasis};
use crate::mesh::Mesh;
use crate::sparse::SymmetricOperator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceKind {
    #[serde(rename = "lod")]
    Lod,
    #[serde(rename = "standard_p1", alias = "p1")]
    P1,
}

impl std::fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpaceKind::Lod => "lod",
            SpaceKind::P1 => "standard_p1",
        })
    }
}

impl std::str::FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lod" => Ok(SpaceKind::Lod),
            "standard_p1" | "p1" => Ok(SpaceKind::P1),
            _ => Err(Error::Config(format!("unknown space `{s}` (expected `lod` or `standard_p1`)"))),
        }
    }
}

#[derive(Debug)]
pub struct Space {
    forms: FormSet,
    lod: Option<(LodBasis, CoarseProjector)>,
    /// `a + (|A|^2 ., .)`, the iterate-independent part of the metric.
    fixed_metric: SymmetricOperator,
    /// `((1 + |A|^2) ., .)`, the right-hand side operator of the metric solve.
    rhs_operator: SymmetricOperator,
    mass: SymmetricOperator,
}

impl Space {
    /// Standard P1 space on `mesh`.
    pub fn p1(mesh: Arc<Mesh>, params: Params) -> Self {
        let forms = FormSet::new(mesh, params);
        let fixed_metric = forms.magnetic().add_scaled(1.0, forms.potential_mass()).expect("same mesh");
        let rhs_operator = forms.mass().add_scaled(1.0, forms.potential_mass()).expect("same mesh");
        let mass = forms.mass().clone();
        Self {
            forms,
            lod: None,
            fixed_metric,
            rhs_operator,
            mass,
        }
    }

    /// LOD space spanned by `basis`, which must have been built for `params`.
    pub fn lod(basis: LodBasis, params: Params) -> Result<Self> {
        if basis.kappa() != params.kappa || basis.potential() != params.potential {
            return Err(Error::Config(format!(
                "basis was built for kappa = {} ({:?}), requested kappa = {} ({:?})",
                basis.kappa(),
                basis.potential(),
                params.kappa,
                params.potential
            )));
        }
        let hierarchy = basis.hierarchy_arc().clone();
        let forms = FormSet::new(Arc::new(hierarchy.fine().clone()), params);
        let projector = CoarseProjector::new(hierarchy)?;
        let fixed = forms.magnetic().add_scaled(1.0, forms.potential_mass())?;
        let rhs = forms.mass().add_scaled(1.0, forms.potential_mass())?;
        let fixed_metric = basis.compress(&fixed)?;
        let rhs_operator = basis.compress(&rhs)?;
        let mass = basis.compress(forms.mass())?;
        Ok(Self {
            forms,
            lod: Some((basis, projector)),
            fixed_metric,
            rhs_operator,
            mass,
        })
    }

    pub fn kind(&self) -> SpaceKind {
        if self.lod.is_some() {
            SpaceKind::Lod
        } else {
            SpaceKind::P1
        }
    }

    /// Number of complex coefficients.
    pub fn dim(&self) -> usize {
        self.mass.num_blocks()
    }

    /// Forms on the mesh carrying the fine representation.
    pub fn forms(&self) -> &FormSet {
        &self.forms
    }

    pub fn params(&self) -> &Params {
        self.forms.params()
    }

    /// Mesh carrying the fine representation.
    pub fn mesh(&self) -> &Mesh {
        self.forms.mesh()
    }

    pub fn basis(&self) -> Option<&LodBasis> {
        self.lod.as_ref().map(|(b, _)| b)
    }

    /// Compressed L2 mass.
    pub fn mass(&self) -> &SymmetricOperator {
        &self.mass
    }

    pub fn rhs_operator(&self) -> &SymmetricOperator {
        &self.rhs_operator
    }

    pub fn fixed_metric(&self) -> &SymmetricOperator {
        &self.fixed_metric
    }

    fn check(&self, x: &[Complex64]) {
        assert_eq!(x.len(), self.dim(), "coefficient vector does not match the space");
    }

    pub fn prolong(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.check(x);
        match &self.lod {
            Some((b, _)) => b.prolong(x),
            None => x.to_vec(),
        }
    }

    /// Adjoint of [`Space::prolong`] for the real pairing.
    pub fn restrict(&self, g: &[Complex64]) -> Vec<Complex64> {
        match &self.lod {
            Some((b, _)) => b.restrict(g),
            None => g.to_vec(),
        }
    }

    /// Galerkin restriction of a fine operator to the space.
    pub fn compress(&self, op: &SymmetricOperator) -> Result<SymmetricOperator> {
        match &self.lod {
            Some((b, _)) => b.compress(op),
            None => {
                if op.num_blocks() != self.dim() {
                    return Err(Error::Dimension("operator does not match the mesh".into()));
                }
                Ok(op.clone())
            }
        }
    }

    pub fn energy(&self, x: &[Complex64]) -> f64 {
        self.forms.energy(&self.prolong(x))
    }

    /// Covector of `E'` restricted to the space.
    pub fn gradient(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.restrict(&self.forms.gradient(&self.prolong(x)))
    }

    /// Compressed `E''(x)`.
    pub fn hessian(&self, x: &[Complex64]) -> Result<SymmetricOperator> {
        self.compress(&self.forms.hessian_operator(&self.prolong(x)))
    }

    /// Compressed metric `a + ((|z|^2 + |A|^2) ., .)`.
    pub fn metric(&self, z: &[Complex64]) -> Result<SymmetricOperator> {
        let zf = self.prolong(z);
        let weighted = assemble_modulus_mass(self.forms.mesh(), self.forms.params(), &zf)?;
        self.fixed_metric.add_scaled(1.0, &self.compress(&weighted)?)
    }

    pub fn quartic_line(&self, x: &[Complex64], d: &[Complex64]) -> QuarticLine {
        self.forms.quartic_line(&self.prolong(x), &self.prolong(d))
    }

    pub fn l2_norm(&self, x: &[Complex64]) -> f64 {
        self.mass.quadratic(x).max(0.0).sqrt()
    }

    /// Coefficients of a fine field: the nodal values for P1, and the
    /// coarse L2 projection (giving `P_h^LOD v`) for LOD.
    pub fn project_fine(&self, v: &[Complex64]) -> Result<Vec<Complex64>> {
        if v.len() != self.forms.mesh().num_vertices() {
            return Err(Error::Dimension(format!(
                "field has {} values, the space's mesh has {} vertices",
                v.len(),
                self.forms.mesh().num_vertices()
            )));
        }
        match &self.lod {
            Some((_, p)) => p.project(v),
            None => Ok(v.to_vec()),
        }
    }

    /// Coefficients of the nodal interpolant of `f` (projected into the space).
    pub fn project_fn(&self, f: impl Fn(f64, f64) -> Complex64) -> Result<Vec<Complex64>> {
        let field = Field::interpolate(self.forms.mesh(), f)?;
        self.project_fine(field.values())
    }
}
