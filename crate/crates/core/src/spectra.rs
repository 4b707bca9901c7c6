//! Schrodinger matrices `phi(L) + diag(V)` with Dirichlet, Neumann and
//! obstacle boundary behaviour, their spectra, and normalized Laplace
//! transforms of the eigenvalue counting measures.

use faer::Mat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gasket::GasketMesh;
use crate::operators::{eigvalsh, KernelPair, OperatorError, SubordinatorSpec};
use crate::potentials::{
    obstacle_mask, obstacle_sznitman, periodize_sznitman, potential_on_mesh, PoissonCloud, PotentialError,
    PotentialVector, ProfileSpec,
};

#[derive(Debug, Error)]
pub enum SpectraError {
    #[error("assembly: {0}")]
    Assembly(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryCondition {
    /// Killed on leaving `G_M`: principal block of the ambient generator.
    Dirichlet,
    /// Reflected: the quotient generator on `G_M`.
    Neumann,
    /// Dirichlet block with obstacle vertices removed as well.
    ObstacleDirichlet,
    /// Quotient generator with obstacle vertices removed.
    ObstacleNeumann,
}

impl BoundaryCondition {
    pub fn tag(self) -> &'static str {
        match self {
            BoundaryCondition::Dirichlet => "D",
            BoundaryCondition::Neumann => "N",
            BoundaryCondition::ObstacleDirichlet => "OD",
            BoundaryCondition::ObstacleNeumann => "ON",
        }
    }
}

/// `H = base|_kept + diag(V|_kept)`.
#[derive(Debug, Clone)]
pub struct SchrodingerOperator {
    pub bc: BoundaryCondition,
    pub level: u32,
    /// Base-mesh indices of the rows of `matrix`.
    pub kept: Vec<usize>,
    pub matrix: Mat<f64>,
}

/// Assembles a Schrodinger matrix.
///
/// `base` is a symmetrized generator indexed by the `G_M` mesh, `candidates`
/// the vertices allowed by the boundary condition, and vertices with an
/// infinite potential are removed (killing obstacles).
pub fn assemble(
    base: &Mat<f64>,
    potential: &[f64],
    candidates: &[usize],
    bc: BoundaryCondition,
    level: u32,
) -> Result<SchrodingerOperator, SpectraError> {
    if base.nrows() != base.ncols() || base.nrows() != potential.len() {
        return Err(SpectraError::Assembly(format!(
            "generator is {}x{}, potential has {} entries",
            base.nrows(),
            base.ncols(),
            potential.len()
        )));
    }
    if let Some(&bad) = candidates.iter().find(|&&k| k >= potential.len()) {
        return Err(SpectraError::Assembly(format!("vertex {bad} out of range")));
    }
    if let Some(v) = potential.iter().find(|v| v.is_nan() || **v < 0.0) {
        return Err(SpectraError::Assembly(format!("potential value {v} is not allowed")));
    }
    let kept: Vec<usize> = candidates.iter().copied().filter(|&k| potential[k].is_finite()).collect();
    let n = kept.len();
    let matrix = Mat::<f64>::from_fn(n, n, |a, b| {
        let v = base[(kept[a], kept[b])];
        if a == b {
            v + potential[kept[a]]
        } else {
            v
        }
    });
    Ok(SchrodingerOperator {
        bc,
        level,
        kept,
        matrix,
    })
}

fn asymmetry(m: &Mat<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Full ascending spectrum of a symmetric matrix.
pub fn eigenvalues(h: &Mat<f64>) -> Result<Vec<f64>, SpectraError> {
    if h.nrows() == 0 {
        return Ok(Vec::new());
    }
    let scale = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(1.0, f64::max);
    let asym = asymmetry(h);
    if asym > 1e-10 * scale {
        return Err(SpectraError::NotSymmetric(asym));
    }
    Ok(eigvalsh(h)?)
}

/// Atomic measure `3^-M sum_n delta_{lambda_n}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralMeasure {
    pub atoms: Vec<f64>,
    pub level: u32,
    pub bc: BoundaryCondition,
    pub seed: u64,
}

impl SpectralMeasure {
    pub fn new(mut atoms: Vec<f64>, level: u32, bc: BoundaryCondition, seed: u64) -> Self {
        atoms.sort_by(f64::total_cmp);
        Self { atoms, level, bc, seed }
    }

    pub fn of(op: &SchrodingerOperator, seed: u64) -> Result<Self, SpectraError> {
        Ok(Self::new(eigenvalues(&op.matrix)?, op.level, op.bc, seed))
    }

    pub fn weight(&self) -> f64 {
        3f64.powi(-(self.level as i32))
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.len() as f64 * self.weight()
    }

    /// `3^-M sum_n e^{-t lambda_n}`.
    pub fn laplace_transform(&self, t: f64) -> f64 {
        self.weight() * self.atoms.iter().map(|&l| (-t * l).exp()).sum::<f64>()
    }

    /// `3^-M #{n : lambda_n <= lambda}`.
    pub fn ids_counting(&self, lambda: f64) -> f64 {
        self.weight() * self.atoms.partition_point(|&l| l <= lambda) as f64
    }

    /// Distinct atoms with multiplicities, using a relative tie tolerance.
    pub fn multiplicities(&self, tol: f64) -> Vec<(f64, usize)> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for &a in &self.atoms {
            match out.last_mut() {
                Some((v, m)) if (a - *v).abs() <= tol * (1.0 + v.abs()) => *m += 1,
                _ => out.push((a, 1)),
            }
        }
        out
    }
}

/// `3^-M tr e^{-tH}` computed from an eigendecomposition of `H`.
pub fn heat_trace(h: &Mat<f64>, level: u32, t: f64) -> Result<f64, SpectraError> {
    let values = eigenvalues(h)?;
    Ok(3f64.powi(-(level as i32)) * values.iter().map(|&l| (-t * l).exp()).sum::<f64>())
}

/// Shared, cloud independent data for one level `M`.
pub struct SuiteContext {
    pub level: u32,
    pub refinement: u32,
    pub shells: u32,
    pub base: GasketMesh,
    /// `phi(L_amb)` restricted to the `G_M` vertices (base ordering).
    pub dirichlet_block: Mat<f64>,
    /// `phi(L^M)` on the `G_M` mesh.
    pub neumann_matrix: Mat<f64>,
    /// Base indices kept by the Dirichlet condition (all but the two outer corners).
    pub interior: Vec<usize>,
    pub all: Vec<usize>,
}

impl SuiteContext {
    pub fn build(level: u32, refinement: u32, shells: u32, spec: &SubordinatorSpec) -> Result<Self, SpectraError> {
        spec.validate()?;
        let pair = KernelPair::build(level, refinement, shells)?;
        Ok(Self::from_pair(&pair, spec))
    }

    pub fn from_pair(pair: &KernelPair, spec: &SubordinatorSpec) -> Self {
        let rows = &pair.embed;
        let amb_rows = pair.ambient_decomp.apply_rows(rows, |l| spec.phi(l));
        let n = rows.len();
        let mut dirichlet_block = Mat::<f64>::from_fn(n, n, |a, b| amb_rows[(a, rows[b])]);
        for a in 0..n {
            for b in 0..a {
                let v = 0.5 * (dirichlet_block[(a, b)] + dirichlet_block[(b, a)]);
                dirichlet_block[(a, b)] = v;
                dirichlet_block[(b, a)] = v;
            }
        }
        let neumann_matrix = pair.quotient_decomp.apply(|l| spec.phi(l));
        let corners = pair.base.corner_indices();
        let interior = (0..n).filter(|k| *k != corners[1] && *k != corners[2]).collect();
        Self {
            level: pair.base.level(),
            refinement: pair.base.refinement(),
            shells: pair.ambient.level() - pair.base.level(),
            base: pair.base.clone(),
            dirichlet_block,
            neumann_matrix,
            interior,
            all: (0..n).collect(),
        }
    }

    pub fn dirichlet(&self, potential: &[f64], obstacle: bool) -> Result<SchrodingerOperator, SpectraError> {
        let bc = if obstacle {
            BoundaryCondition::ObstacleDirichlet
        } else {
            BoundaryCondition::Dirichlet
        };
        assemble(&self.dirichlet_block, potential, &self.interior, bc, self.level)
    }

    pub fn neumann(&self, potential: &[f64], obstacle: bool) -> Result<SchrodingerOperator, SpectraError> {
        let bc = if obstacle {
            BoundaryCondition::ObstacleNeumann
        } else {
            BoundaryCondition::Neumann
        };
        assemble(&self.neumann_matrix, potential, &self.all, bc, self.level)
    }
}

/// How a cloud acts on the walk.
#[derive(Debug, Clone)]
pub enum Perturbation {
    /// Soft potential with profile `W`.
    Potential(ProfileSpec),
    /// Killing obstacles of radius `a`.
    Obstacles { radius: f64 },
}

/// The four transforms for one cloud and level, one entry per `t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteResult {
    pub level: u32,
    pub seed: u64,
    pub t: Vec<f64>,
    pub l_d: Vec<f64>,
    pub l_n: Vec<f64>,
    pub l_dstar: Vec<f64>,
    pub l_nstar: Vec<f64>,
    /// Dimensions of the D, N, D*, N* operators.
    pub dims: [usize; 4],
}

/// The unstarred and Sznitman potentials (or masks) on the `G_M` mesh.
pub fn suite_potentials(
    ctx: &SuiteContext,
    cloud: &PoissonCloud,
    perturbation: &Perturbation,
) -> Result<(PotentialVector, PotentialVector), SpectraError> {
    let m = ctx.level;
    Ok(match perturbation {
        Perturbation::Potential(profile) => (
            potential_on_mesh(cloud, profile, &ctx.base)?,
            periodize_sznitman(cloud, profile, m, 1, &ctx.base)?,
        ),
        Perturbation::Obstacles { radius } => (
            obstacle_mask(cloud, *radius, &ctx.base),
            obstacle_sznitman(cloud, *radius, m, 1, &ctx.base)?,
        ),
    })
}

/// `L_D, L_N, L_D*, L_N*` for one cloud.
///
/// The ambient potential of the Dirichlet operators is the fiber-constant
/// extension of the `G_M` values, so only those values enter the block.
pub fn four_transform_suite(
    ctx: &SuiteContext,
    cloud: &PoissonCloud,
    perturbation: &Perturbation,
    ts: &[f64],
) -> Result<SuiteResult, SpectraError> {
    let (v, vstar) = suite_potentials(ctx, cloud, perturbation)?;
    let obstacle = matches!(perturbation, Perturbation::Obstacles { .. });
    let ops = [
        ctx.dirichlet(&v.values, obstacle)?,
        ctx.neumann(&v.values, obstacle)?,
        ctx.dirichlet(&vstar.values, obstacle)?,
        ctx.neumann(&vstar.values, obstacle)?,
    ];
    let measures = ops
        .iter()
        .map(|op| SpectralMeasure::of(op, cloud.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let lt = |k: usize| ts.iter().map(|&t| measures[k].laplace_transform(t)).collect::<Vec<_>>();
    Ok(SuiteResult {
        level: ctx.level,
        seed: cloud.seed,
        t: ts.to_vec(),
        l_d: lt(0),
        l_n: lt(1),
        l_dstar: lt(2),
        l_nstar: lt(3),
        dims: [ops[0].kept.len(), ops[1].kept.len(), ops[2].kept.len(), ops[3].kept.len()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_spectra() {
        let one = Mat::<f64>::from_fn(1, 1, |_, _| 2.5);
        assert_eq!(eigenvalues(&one).unwrap(), vec![2.5]);
        let d = Mat::<f64>::from_fn(3, 3, |i, j| if i == j { [3.0, 1.0, 2.0][i] } else { 0.0 });
        let v = eigenvalues(&d).unwrap();
        for (a, b) in v.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-14);
        }
        let skew = Mat::<f64>::from_fn(2, 2, |i, j| (i as f64) - (j as f64));
        assert!(matches!(eigenvalues(&skew), Err(SpectraError::NotSymmetric(_))));
    }

    #[test]
    fn measure_evaluators() {
        let m = SpectralMeasure::new(vec![0.0], 0, BoundaryCondition::Neumann, 0);
        assert_eq!(m.laplace_transform(1.0), 1.0);
        let m = SpectralMeasure::new(vec![2.0, 0.0, 0.0, 5.0], 1, BoundaryCondition::Neumann, 0);
        assert!((m.laplace_transform(1e6) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.ids_counting(-1.0), 0.0);
        assert!((m.ids_counting(10.0) - 4.0 / 3.0).abs() < 1e-15);
        assert!((m.total_mass() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.multiplicities(1e-12), vec![(0.0, 2), (2.0, 1), (5.0, 1)]);
    }

    #[test]
    fn assembly_errors_and_shift() {
        let base = Mat::<f64>::from_fn(2, 2, |i, j| if i == j { 1.0 } else { -1.0 });
        assert!(assemble(&base, &[0.0], &[0, 1], BoundaryCondition::Neumann, 0).is_err());
        let h0 = assemble(&base, &[0.0, 0.0], &[0, 1], BoundaryCondition::Neumann, 0).unwrap();
        let h1 = assemble(&base, &[0.7, 0.7], &[0, 1], BoundaryCondition::Neumann, 0).unwrap();
        let (a, b) = (eigenvalues(&h0.matrix).unwrap(), eigenvalues(&h1.matrix).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - 0.7).abs() < 1e-14);
        }
        let blocked = assemble(&base, &[f64::INFINITY, 0.0], &[0, 1], BoundaryCondition::ObstacleNeumann, 0).unwrap();
        assert_eq!(blocked.kept, vec![1]);
    }
}
