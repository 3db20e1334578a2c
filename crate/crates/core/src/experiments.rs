//! Experiment harness: initial data, configurations, energy tables, phase
//! aligned errors, convergence-rate studies and field I/O.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forms::{Field, FormSet, Params, Potential};
use crate::lod::{build_lod_basis, LodBasis};
use crate::mesh::{Hierarchy, Mesh};
use crate::minimize::{csg_minimize, CsgOptions, MinimizeRun, Termination};
use crate::space::{Space, SpaceKind};

/// `(1 + i) / sqrt(2)`
pub const ALPHA: Complex64 = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2);

/// Reference energy levels of the two local minimizers reached at `kappa = 10`.
pub const KAPPA10_LEVELS: [f64; 2] = [0.104595899, 0.118299561];

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Initial profile `psi_j` on `(-1, 1)^2`.
pub fn psi(j: usize, x: f64, y: f64) -> Result<Complex64> {
    let r2 = x * x + y * y;
    let z = Complex64::new(x, y);
    let osc = (-10.0 * I * r2).exp();
    Ok(match j {
        1 => ALPHA * (-r2).exp(),
        2 => ALPHA * z * (-r2).exp(),
        3 => 1.0 - ALPHA * (-5.0 * r2).exp(),
        4 => (2.0 / 3.0 * z + 0.5) * (-r2).exp() / std::f64::consts::PI.sqrt(),
        5 => ALPHA * osc,
        6 => ALPHA * z * osc,
        7 => {
            let s = (4.0 * std::f64::consts::PI * x).sin() * (4.0 * std::f64::consts::PI * y).sin();
            1.0 - ALPHA * s * s
        }
        8 => return psi(6, x - 0.5, y - 0.5),
        9 => ALPHA * Complex64::new(x - 0.5, 1.0),
        10 => ALPHA,
        _ => return Err(Error::Config(format!("initial value index {j} is not in 1..=10"))),
    })
}

/// `phi_j = psi_j o chi` with `chi(x, y) = (2x - 1, 2y - 1)`.
pub fn phi(j: usize, x: f64, y: f64) -> Result<Complex64> {
    psi(j, 2.0 * x - 1.0, 2.0 * y - 1.0)
}

/// Nodal interpolant of `phi_j` on `mesh`.
pub fn initial_value(j: usize, mesh: &Mesh) -> Result<Field> {
    phi(j, 0.5, 0.5)?;
    Field::interpolate(mesh, |x, y| phi(j, x, y).expect("index checked"))
}

/// Initial value: one of the built-in profiles, or a field CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Initial {
    Index(usize),
    File(PathBuf),
}

impl std::str::FromStr for Initial {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.parse::<usize>() {
            Ok(j) => Initial::Index(j),
            Err(_) => Initial::File(PathBuf::from(s)),
        })
    }
}

impl std::fmt::Display for Initial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Initial::Index(j) => write!(f, "phi{j}"),
            Initial::File(p) => write!(f, "{}", p.display()),
        }
    }
}

fn default_space() -> SpaceKind {
    SpaceKind::Lod
}

/// Run configuration. Defaults are the desk-scale setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kappa: f64,
    pub coarse_n: usize,
    pub fine_n: usize,
    pub layers: usize,
    #[serde(default = "default_space")]
    pub space: SpaceKind,
    pub initial: Initial,
    pub tol: f64,
    pub max_iter: usize,
    /// Table runs: the kappa values of the columns (defaults to `kappa`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappas: Option<Vec<f64>>,
    /// Table runs: the initial values of the rows (defaults to `initial`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initials: Option<Vec<usize>>,
    /// Rate studies: coarse resolutions of the ladder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse_levels: Option<Vec<usize>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kappa: 10.0,
            coarse_n: 32,
            fine_n: 256,
            layers: 4,
            space: SpaceKind::Lod,
            initial: Initial::Index(10),
            tol: 1e-15,
            max_iter: 20_000,
            kappas: None,
            initials: None,
            coarse_levels: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read configuration {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for &k in self.kappas.as_deref().unwrap_or(&[self.kappa]) {
            if !(k.is_finite() && k > 0.0) {
                return bad(format!("kappa must be positive, got {k}"));
            }
        }
        if self.fine_n == 0 || (self.space == SpaceKind::Lod && self.coarse_n == 0) {
            return bad("mesh resolutions must be positive".into());
        }
        if self.space == SpaceKind::Lod && !self.fine_n.is_multiple_of(self.coarse_n) {
            return bad(format!(
                "fine_n = {} must be a multiple of coarse_n = {}",
                self.fine_n, self.coarse_n
            ));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive".into());
        }
        let mut initials: Vec<usize> = self.initials.clone().unwrap_or_default();
        if let Initial::Index(j) = self.initial {
            initials.push(j);
        }
        if let Some(j) = initials.iter().find(|j| !(1..=10).contains(*j)) {
            return bad(format!("initial value index {j} is not in 1..=10"));
        }
        if let Some(levels) = &self.coarse_levels {
            if levels.is_empty() || levels.iter().any(|&n| n == 0 || !self.fine_n.is_multiple_of(n)) {
                return bad(format!("coarse levels {levels:?} must divide fine_n = {}", self.fine_n));
            }
        }
        Ok(())
    }

    pub fn params(&self, kappa: f64) -> Result<Params> {
        Params::new(kappa, Potential::SinCos)
    }

    pub fn options(&self) -> CsgOptions {
        CsgOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            ..CsgOptions::default()
        }
    }

    /// Stable 64-bit FNV-1a hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in serde_json::to_string(self).expect("config serializes").bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Builds an LOD basis, reusing `cache_dir/basis_*.gllod` when present and valid.
pub fn lod_basis_cached(
    hierarchy: Arc<Hierarchy>,
    params: &Params,
    layers: usize,
    cache_dir: Option<&Path>,
) -> Result<LodBasis> {
    let file = cache_dir.map(|d| {
        d.join(format!(
            "basis_{}_{}_{}_{}.gllod",
            hierarchy.coarse().n(),
            hierarchy.fine().n(),
            layers,
            params.kappa
        ))
    });
    if let Some(f) = &file {
        if f.exists() {
            if let Ok(b) = LodBasis::read_cache(f, hierarchy.clone(), layers, params) {
                return Ok(b);
            }
        }
    }
    let basis = build_lod_basis(hierarchy, params, layers)?;
    if let (Some(d), Some(f)) = (cache_dir, &file) {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        basis.write_cache(f)?;
    }
    Ok(basis)
}

/// Discrete space described by `config` at parameter `kappa`.
pub fn build_space(config: &ExperimentConfig, kappa: f64, cache_dir: Option<&Path>) -> Result<Space> {
    let params = config.params(kappa)?;
    match config.space {
        SpaceKind::P1 => Ok(Space::p1(Arc::new(Mesh::build_uniform(config.fine_n)?), params)),
        SpaceKind::Lod => {
            let hierarchy = Arc::new(Hierarchy::from_sizes(config.coarse_n, config.fine_n)?);
            let basis = lod_basis_cached(hierarchy, &params, config.layers, cache_dir)?;
            Space::lod(basis, params)
        }
    }
}

/// Coefficients of the initial value in `space`.
pub fn initial_coefficients(space: &Space, initial: &Initial) -> Result<Vec<Complex64>> {
    match initial {
        Initial::Index(j) => {
            let field = initial_value(*j, space.mesh())?;
            space.project_fine(field.values())
        }
        Initial::File(path) => {
            let (n, values) = read_field_csv(path)?;
            if n != space.mesh().n() {
                return Err(Error::Config(format!(
                    "{} holds a field on a {n}x{n} mesh, the space needs {}",
                    path.display(),
                    space.mesh().n()
                )));
            }
            space.project_fine(&values)
        }
    }
}

/// One minimization as described by `config`.
pub fn run_single(
    config: &ExperimentConfig,
    cache_dir: Option<&Path>,
    log: Option<&mut dyn Write>,
) -> Result<(Space, MinimizeRun)> {
    config.validate()?;
    let space = build_space(config, config.kappa, cache_dir)?;
    let u0 = initial_coefficients(&space, &config.initial)?;
    let run = csg_minimize(&space, &u0, &config.options(), log)?;
    Ok((space, run))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub initial: usize,
    pub kappa: f64,
    pub energy: f64,
    pub iterations: usize,
    /// Termination flag, or `error` when the run failed.
    pub termination: String,
}

/// Energy table over `initials x kappas`, in that fixed order. Failed runs are recorded, not raised.
pub fn run_table(config: &ExperimentConfig, cache_dir: Option<&Path>, jobs: usize) -> Result<Vec<TableRow>> {
    config.validate()?;
    let kappas = config.kappas.clone().unwrap_or_else(|| vec![config.kappa]);
    let initials = config.initials.clone().unwrap_or_else(|| match config.initial {
        Initial::Index(j) => vec![j],
        Initial::File(_) => vec![],
    });
    if initials.is_empty() {
        return Err(Error::Config("table runs need built-in initial values".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| {
        let spaces: Vec<Result<Space>> = kappas.iter().map(|&k| build_space(config, k, cache_dir)).collect();
        let cells: Vec<(usize, usize)> = initials
            .iter()
            .flat_map(|&j| (0..kappas.len()).map(move |k| (j, k)))
            .collect();
        let rows = cells
            .par_iter()
            .map(|&(j, k)| {
                let failed = |_: &Error| TableRow {
                    initial: j,
                    kappa: kappas[k],
                    energy: f64::NAN,
                    iterations: 0,
                    termination: "error".into(),
                };
                let space = match &spaces[k] {
                    Ok(s) => s,
                    Err(e) => return failed(e),
                };
                let result = initial_coefficients(space, &Initial::Index(j))
                    .and_then(|u0| csg_minimize(space, &u0, &config.options(), None));
                match result {
                    Ok(run) => TableRow {
                        initial: j,
                        kappa: kappas[k],
                        energy: run.final_energy,
                        iterations: run.iterations,
                        termination: run.termination.to_string(),
                    },
                    Err(e) => failed(&e),
                }
            })
            .collect();
        Ok(rows)
    })
}

pub fn write_table_csv(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut text = String::from("initial,kappa,energy,iterations,termination\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{:.12},{},{}\n",
            r.initial, r.kappa, r.energy, r.iterations, r.termination
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Complex L2 pairing `int u conj(v)` for a real mass matrix `mass`.
fn complex_pairing(mass: &crate::sparse::SymmetricOperator, u: &[Complex64], v: &[Complex64]) -> Complex64 {
    let mv = mass.apply(v);
    u.iter().zip(&mv).map(|(a, b)| a * b.conj()).sum()
}

/// Phase `theta in [0, 2 pi)` minimizing `|u - e^{i theta} v|_{L2}`: the argument of `int u conj(v)`.
/// The flag is set when the pairing vanishes (then `theta = 0`).
pub fn align_phase(forms: &FormSet, u: &[Complex64], v: &[Complex64]) -> (f64, bool) {
    let p = complex_pairing(forms.mass(), u, v);
    let scale = forms.l2_norm(u) * forms.l2_norm(v);
    if !(p.norm() > 1e-14 * scale) {
        return (0.0, true);
    }
    (p.arg().rem_euclid(std::f64::consts::TAU), false)
}

/// `(|u - e^{i theta} v|_{H1k}, |u - e^{i theta} v|_{L2})` after phase alignment.
pub fn aligned_errors(forms: &FormSet, u: &[Complex64], v: &[Complex64]) -> (f64, f64) {
    let (theta, _) = align_phase(forms, u, v);
    let rot = Complex64::from_polar(1.0, theta);
    let diff: Vec<Complex64> = u.iter().zip(v).map(|(a, b)| a - rot * b).collect();
    (forms.h1kappa_norm(&diff), forms.l2_norm(&diff))
}

/// Number of connected vertex sets with `|u| < threshold` that avoid the boundary.
pub fn count_vortices(mesh: &Mesh, u: &[Complex64], threshold: f64) -> usize {
    let nbrs = mesh.vertex_neighbors();
    let low: Vec<bool> = u.iter().map(|z| z.norm() < threshold).collect();
    let mut seen = vec![false; u.len()];
    let mut count = 0;
    for start in 0..u.len() {
        if !low[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut touches_boundary = false;
        while let Some(v) = stack.pop() {
            touches_boundary |= mesh.on_boundary(v);
            for &w in &nbrs[v] {
                if low[w] && !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        if !touches_boundary {
            count += 1;
        }
    }
    count
}

/// Writes `x,y,re,im`, one row per vertex in index order.
pub fn write_field_csv(path: &Path, mesh: &Mesh, values: &[Complex64]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "x,y,re,im").map_err(io)?;
    for (p, z) in mesh.vertices().iter().zip(values) {
        writeln!(w, "{:?},{:?},{:?},{:?}", p[0], p[1], z.re, z.im).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a field written by [`write_field_csv`]; returns the mesh resolution and values.
pub fn read_field_csv(path: &Path) -> Result<(usize, Vec<Complex64>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::Config(format!("cannot read field {}: {e}", path.display())))?;
    let bad = |m: String| Error::Config(format!("{}: {m}", path.display()));
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().transpose().map_err(|e| Error::io(path, e))?.unwrap_or_default();
    if header.trim() != "x,y,re,im" {
        return Err(bad(format!("expected header `x,y,re,im`, found `{header}`")));
    }
    let mut points = Vec::new();
    let mut values = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let nums: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {e}", k + 2)))?;
        if nums.len() != 4 {
            return Err(bad(format!("line {} has {} columns", k + 2, nums.len())));
        }
        points.push([nums[0], nums[1]]);
        values.push(Complex64::new(nums[2], nums[3]));
    }
    let side = (values.len() as f64).sqrt().round() as usize;
    if side < 2 || side * side != values.len() {
        return Err(bad(format!("{} rows do not form a square vertex grid", values.len())));
    }
    let mesh = Mesh::build_uniform(side - 1)?;
    for (p, q) in points.iter().zip(mesh.vertices()) {
        if (p[0] - q[0]).abs() > 1e-9 || (p[1] - q[1]).abs() > 1e-9 {
            return Err(bad("vertex coordinates do not match a uniform mesh in index order".into()));
        }
    }
    Ok((side - 1, values))
}

/// Errors and energy of one level of a rate study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelResult {
    pub coarse_n: usize,
    pub layers: Option<usize>,
    pub energy: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub h1k_error: f64,
    pub l2_error: f64,
    /// `E(level) - E(reference)`
    pub energy_gap: f64,
    /// Set when the level minimizer is not in the reference basin.
    pub excluded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Slopes {
    pub lod_h1k: f64,
    pub lod_l2: f64,
    pub lod_energy_gap: f64,
    pub p1_h1k: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateStudy {
    pub kappa: f64,
    pub fine_n: usize,
    pub reference_energy: f64,
    pub reference_iterations: usize,
    pub lod: Vec<LevelResult>,
    pub p1: Vec<LevelResult>,
    pub slopes: Slopes,
    /// Energy-gap levels below `-1e-10`, indicating an unconverged reference.
    pub negative_gaps: Vec<usize>,
}

/// Least-squares slope of `log(err)` against `log(1/n)` over the finest three usable levels.
pub fn fit_slope(levels: &[(usize, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = levels
        .iter()
        .filter(|(_, e)| *e > 0.0 && e.is_finite())
        .map(|&(n, e)| ((1.0 / n as f64).ln(), e.ln()))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.truncate(3);
    if pts.len() < 2 {
        return f64::NAN;
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (sx / m, sy / m);
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    num / den
}

/// Localization used at coarse level `n` in rate studies: saturated when `2n <= cap`.
pub fn study_layers(n: usize, cap: usize) -> usize {
    (2 * n).min(cap)
}

/// Convergence study against a fine P1 reference minimizer from the same initial value.
///
/// The LOD ladder uses `study_layers(n, config.layers)`; the P1 ladder
/// minimizes on each coarse mesh and prolongs to the fine mesh. LOD levels
/// whose energy is farther than `basin_tol` from the reference are excluded.
pub fn rate_study(config: &ExperimentConfig, cache_dir: Option<&Path>, basin_tol: f64, include_p1: bool) -> Result<RateStudy> {
    config.validate()?;
    let levels = config.coarse_levels.clone().unwrap_or_else(|| vec![4, 8, 16, 32]);
    let params = config.params(config.kappa)?;
    let fine_mesh = Arc::new(Mesh::build_uniform(config.fine_n)?);
    let reference_space = Space::p1(fine_mesh.clone(), params);
    let u0 = initial_coefficients(&reference_space, &config.initial)?;
    let reference = csg_minimize(&reference_space, &u0, &config.options(), None)?;
    if reference.termination != Termination::Converged {
        return Err(Error::Refused(format!("reference run ended with {}", reference.termination)));
    }
    let forms = reference_space.forms();
    let mut lod = Vec::new();
    for &n in &levels {
        let layers = study_layers(n, config.layers);
        let cfg = ExperimentConfig {
            coarse_n: n,
            layers,
            space: SpaceKind::Lod,
            ..config.clone()
        };
        let space = build_space(&cfg, config.kappa, cache_dir)?;
        let u0 = initial_coefficients(&space, &config.initial)?;
        let run = csg_minimize(&space, &u0, &config.options(), None)?;
        let (h1k, l2) = aligned_errors(forms, &reference.field, &run.field);
        let gap = run.final_energy - reference.final_energy;
        lod.push(LevelResult {
            coarse_n: n,
            layers: Some(layers),
            energy: run.final_energy,
            iterations: run.iterations,
            termination: run.termination,
            h1k_error: h1k,
            l2_error: l2,
            energy_gap: gap,
            excluded: gap.abs() > basin_tol || run.termination != Termination::Converged,
        });
    }
    let mut p1 = Vec::new();
    if include_p1 {
        for &n in &levels {
            let hierarchy = Hierarchy::from_sizes(n, config.fine_n)?;
            let space = Space::p1(Arc::new(hierarchy.coarse().clone()), params);
            let u0 = initial_coefficients(&space, &config.initial)?;
            let run = csg_minimize(&space, &u0, &config.options(), None)?;
            let fine = hierarchy.prolongate(&run.field);
            let (h1k, l2) = aligned_errors(forms, &reference.field, &fine);
            p1.push(LevelResult {
                coarse_n: n,
                layers: None,
                energy: run.final_energy,
                iterations: run.iterations,
                termination: run.termination,
                h1k_error: h1k,
                l2_error: l2,
                energy_gap: run.final_energy - reference.final_energy,
                excluded: run.termination != Termination::Converged,
            });
        }
    }
    let usable = |v: &[LevelResult], f: fn(&LevelResult) -> f64| -> Vec<(usize, f64)> {
        v.iter().filter(|l| !l.excluded).map(|l| (l.coarse_n, f(l))).collect()
    };
    let slopes = Slopes {
        lod_h1k: fit_slope(&usable(&lod, |l| l.h1k_error)),
        lod_l2: fit_slope(&usable(&lod, |l| l.l2_error)),
        lod_energy_gap: fit_slope(&usable(&lod, |l| l.energy_gap)),
        p1_h1k: fit_slope(&usable(&p1, |l| l.h1k_error)),
    };
    let negative_gaps = lod.iter().filter(|l| l.energy_gap < -1e-10).map(|l| l.coarse_n).collect();
    Ok(RateStudy {
        kappa: config.kappa,
        fine_n: config.fine_n,
        reference_energy: reference.final_energy,
        reference_iterations: reference.iterations,
        lod,
        p1,
        slopes,
        negative_gaps,
    })
}
