//! Graph Laplacians on gasket meshes, the reflected (quotient) chain, and
//! Bernstein-function spectral calculus.
//!
//! Generators act on functions as `L f = 2 * 5^n (f - P f)` where `P` is the
//! simple random walk. The factor 2 makes the single triangle come out with
//! spectrum `{0, 3, 3}`. All matrices are stored in the basis symmetrized by
//! the vertex masses, `L_sym = D^{1/2} L D^{-1/2}`.

use std::fmt;
use std::sync::Arc;

use faer::{Mat, Side};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gasket::{fiber, project, GasketError, GasketMesh, LatticePoint};

/// Hausdorff dimension `log 3 / log 2`.
pub const D_F: f64 = 1.584_962_500_721_156_3;
/// Walk dimension `log 5 / log 2`.
pub const D_W: f64 = 2.321_928_094_887_362_3;
/// Half the spectral dimension, `log 3 / log 5`.
pub const D_S_HALF: f64 = 0.682_606_194_485_985_3;

/// Tolerance for the well-definedness check of the quotient chain.
pub const QUOTIENT_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("invalid subordinator: {0}")]
    InvalidSpec(String),
    #[error("quotient chain is not well defined at {point}: representatives {first} and {second} differ by {gap:e}")]
    NotLumpable {
        point: LatticePoint,
        first: LatticePoint,
        second: LatticePoint,
        gap: f64,
    },
    #[error("integral diverges: {0}")]
    Divergent(String),
    #[error("eigendecomposition failed: {0}")]
    Eigen(String),
    #[error(transparent)]
    Gasket(#[from] GasketError),
}

/// User supplied Bernstein function. Not serializable.
#[derive(Clone)]
pub struct CustomBernstein {
    pub name: String,
    pub phi: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for CustomBernstein {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomBernstein({})", self.name)
    }
}

/// Laplace exponent of a subordinator. `alpha` is the stability index in
/// `(0, d_w]`; the Bernstein exponent is `gamma = alpha / d_w`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum SubordinatorSpec {
    /// `S_t = t`, so `phi(l) = l`.
    Identity,
    Stable {
        alpha: f64,
    },
    StableMixture {
        alphas: Vec<f64>,
    },
    StableWithDrift {
        alpha: f64,
        drift: f64,
    },
    Relativistic {
        alpha: f64,
        mass: f64,
    },
    LogStable {
        alpha: f64,
        beta: f64,
    },
    #[serde(skip)]
    Custom(CustomBernstein),
}

fn check_alpha(alpha: f64, closed: bool) -> Result<(), OperatorError> {
    let ok = alpha > 0.0 && (alpha < D_W || (closed && (alpha - D_W).abs() < 1e-12));
    if ok {
        Ok(())
    } else {
        Err(OperatorError::InvalidSpec(format!(
            "alpha = {alpha} outside (0, d_w{}",
            if closed { "]" } else { ")" }
        )))
    }
}

impl SubordinatorSpec {
    pub fn stable_gamma(gamma: f64) -> Self {
        SubordinatorSpec::Stable { alpha: gamma * D_W }
    }

    pub fn custom(name: &str, phi: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        SubordinatorSpec::Custom(CustomBernstein {
            name: name.to_string(),
            phi: Arc::new(phi),
        })
    }

    pub fn validate(&self) -> Result<(), OperatorError> {
        match self {
            SubordinatorSpec::Identity => Ok(()),
            SubordinatorSpec::Stable { alpha } => check_alpha(*alpha, true),
            SubordinatorSpec::StableMixture { alphas } => {
                if alphas.is_empty() {
                    return Err(OperatorError::InvalidSpec("empty mixture".into()));
                }
                alphas.iter().try_for_each(|a| check_alpha(*a, false))
            }
            SubordinatorSpec::StableWithDrift { alpha, drift } => {
                check_alpha(*alpha, false)?;
                if *drift > 0.0 {
                    Ok(())
                } else {
                    Err(OperatorError::InvalidSpec(format!("drift {drift} must be positive")))
                }
            }
            SubordinatorSpec::Relativistic { alpha, mass } => {
                check_alpha(*alpha, false)?;
                if *mass > 0.0 && mass.is_finite() {
                    Ok(())
                } else {
                    Err(OperatorError::InvalidSpec(format!("mass {mass} must be positive")))
                }
            }
            SubordinatorSpec::LogStable { alpha, beta } => {
                check_alpha(*alpha, false)?;
                let ok = (*beta > -alpha && *beta < 0.0) || (*beta > 0.0 && *beta < D_W - alpha);
                if ok {
                    Ok(())
                } else {
                    Err(OperatorError::InvalidSpec(format!(
                        "beta = {beta} outside (-alpha, 0) U (0, d_w - alpha)"
                    )))
                }
            }
            SubordinatorSpec::Custom(c) => bernstein_sanity(&*c.phi)
                .map_err(|e| OperatorError::InvalidSpec(format!("{}: {e}", c.name))),
        }
    }

    /// `phi(lambda)` without validation. Negative round-off is clamped to 0.
    pub fn phi(&self, lambda: f64) -> f64 {
        let l = lambda.max(0.0);
        match self {
            SubordinatorSpec::Identity => l,
            SubordinatorSpec::Stable { alpha } => l.powf(alpha / D_W),
            SubordinatorSpec::StableMixture { alphas } => alphas.iter().map(|a| l.powf(a / D_W)).sum(),
            SubordinatorSpec::StableWithDrift { alpha, drift } => drift * l + l.powf(alpha / D_W),
            SubordinatorSpec::Relativistic { alpha, mass } => {
                let g = alpha / D_W;
                let m = mass.powf(1.0 / g);
                // (l + m)^g - m^g, written to avoid cancellation for small l
                let base = m.powf(g);
                base * ((l / m).ln_1p() * g).exp_m1()
            }
            SubordinatorSpec::LogStable { alpha, beta } => {
                if l == 0.0 {
                    0.0
                } else {
                    l.powf(alpha / D_W) * l.ln_1p().powf(beta / D_W)
                }
            }
            SubordinatorSpec::Custom(c) => (c.phi)(l),
        }
    }

    /// True when the family is `phi(l) = l`.
    pub fn is_identity(&self) -> bool {
        match self {
            SubordinatorSpec::Identity => true,
            SubordinatorSpec::Stable { alpha } => (alpha - D_W).abs() < 1e-12,
            _ => false,
        }
    }
}

/// Numeric sanity for a candidate Bernstein function on a log grid.
fn bernstein_sanity(phi: &dyn Fn(f64) -> f64) -> Result<(), String> {
    if phi(0.0).abs() > 1e-12 {
        return Err(format!("phi(0) = {} is not 0", phi(0.0)));
    }
    let grid: Vec<f64> = (0..1000).map(|k| 10f64.powf(-6.0 + 12.0 * k as f64 / 999.0)).collect();
    let vals: Vec<f64> = grid.iter().map(|&l| phi(l)).collect();
    for k in 1..grid.len() {
        if !vals[k].is_finite() || vals[k] < 0.0 {
            return Err(format!("phi({}) = {} is not a nonnegative number", grid[k], vals[k]));
        }
        if vals[k] < vals[k - 1] * (1.0 - 1e-12) {
            return Err(format!("phi decreases near {}", grid[k]));
        }
    }
    for k in 1..grid.len() - 1 {
        // secant slopes must not increase
        let left = (vals[k] - vals[k - 1]) / (grid[k] - grid[k - 1]);
        let right = (vals[k + 1] - vals[k]) / (grid[k + 1] - grid[k]);
        if right > left * (1.0 + 1e-9) + 1e-14 {
            return Err(format!("phi is not concave near {}", grid[k]));
        }
    }
    Ok(())
}

/// Checked evaluation of `phi`.
pub fn bernstein_eval(spec: &SubordinatorSpec, lambda: f64) -> Result<f64, OperatorError> {
    spec.validate()?;
    if !(lambda >= 0.0) {
        return Err(OperatorError::InvalidSpec(format!("lambda = {lambda} must be nonnegative")));
    }
    Ok(spec.phi(lambda))
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// `int_0^1 phi(l) / l dl`, computed as `int_0^inf phi(e^-s) ds` over unit
/// intervals until the geometric tail is negligible.
pub fn phi_over_lambda_integral(spec: &SubordinatorSpec) -> Result<f64, OperatorError> {
    spec.validate()?;
    let f = |s: f64| spec.phi((-s).exp());
    let mut total = 0.0;
    let mut prev = f64::NAN;
    // e^-s underflows near s = 745; a convergent integrand has decayed well before
    for k in 0..700u32 {
        let piece = adaptive_simpson(&f, k as f64, k as f64 + 1.0, 1e-14);
        total += piece;
        if k > 2 && piece > 0.0 && prev > 0.0 {
            let ratio = piece / prev;
            if ratio < 1.0 {
                let tail = piece * ratio / (1.0 - ratio);
                if tail <= 1e-12 * total {
                    return Ok(total + tail);
                }
            }
        }
        if piece == 0.0 && k > 2 {
            return Ok(total);
        }
        prev = piece;
    }
    if prev < 1e-12 * total {
        return Ok(total);
    }
    Err(OperatorError::Divergent("phi(l)/l is not integrable at 0".into()))
}

/// Upper bound `t int_0^1 phi(l)/l dl + e^-1`.
pub fn verlog_bound(spec: &SubordinatorSpec, t: f64) -> Result<f64, OperatorError> {
    if !(t >= 0.0) {
        return Err(OperatorError::InvalidSpec(format!("t = {t} must be nonnegative")));
    }
    Ok(t * phi_over_lambda_integral(spec)? + (-1f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// Simple random walk on the whole mesh, reflected at its outer corners.
    Ambient,
    /// Projection of an ambient walk onto `G_M`.
    Quotient,
}

/// Symmetrized generator together with the vertex measure it is reversible for.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub kind: GeneratorKind,
    pub level: u32,
    pub refinement: u32,
    /// Time scale `2 * 5^n`.
    pub time_scale: f64,
    /// Stationary measure, normalized to total mass `3^M`.
    pub weights: Vec<f64>,
    pub matrix: Mat<f64>,
}

impl GeneratorMatrix {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Unsymmetrized generator entry `L(x, y)`.
    pub fn generator_entry(&self, x: usize, y: usize) -> f64 {
        self.matrix[(x, y)] * (self.weights[y] / self.weights[x]).sqrt()
    }
}

/// `2 * 5^n`.
pub fn time_scale(refinement: u32) -> f64 {
    2.0 * 5f64.powi(refinement as i32)
}

fn symmetrize(transition: &[Vec<(usize, f64)>], weights: &[f64], scale: f64) -> Mat<f64> {
    let n = weights.len();
    let mut m = Mat::<f64>::zeros(n, n);
    for (x, row) in transition.iter().enumerate() {
        m[(x, x)] += scale;
        for &(y, p) in row {
            m[(x, y)] -= scale * p * (weights[x] / weights[y]).sqrt();
        }
    }
    // exact symmetry, entries agree to round-off already
    for x in 0..n {
        for y in 0..x {
            let v = 0.5 * (m[(x, y)] + m[(y, x)]);
            m[(x, y)] = v;
            m[(y, x)] = v;
        }
    }
    m
}

/// Generator of the simple random walk on `mesh`.
pub fn laplacian_ambient(mesh: &GasketMesh) -> GeneratorMatrix {
    let transition: Vec<Vec<(usize, f64)>> = (0..mesh.vertex_count())
        .map(|x| {
            let nb = mesh.neighbors(x);
            nb.iter().map(|&y| (y, 1.0 / nb.len() as f64)).collect()
        })
        .collect();
    let weights = mesh.vertex_weights();
    let scale = time_scale(mesh.refinement());
    GeneratorMatrix {
        kind: GeneratorKind::Ambient,
        level: mesh.level(),
        refinement: mesh.refinement(),
        time_scale: scale,
        matrix: symmetrize(&transition, &weights, scale),
        weights,
    }
}

/// Pushforward of the simple random walk on `G_{M+K}` onto `G_M`.
///
/// Every fiber representative of every vertex is checked to give the same
/// projected step distribution.
pub fn laplacian_reflected(level: u32, refinement: u32, shells: u32) -> Result<GeneratorMatrix, OperatorError> {
    let ambient = GasketMesh::build(level + shells, refinement)?;
    let base = GasketMesh::build(level, refinement)?;
    laplacian_reflected_from(&ambient, &base)
}

/// Same as [`laplacian_reflected`] with prebuilt meshes.
pub fn laplacian_reflected_from(ambient: &GasketMesh, base: &GasketMesh) -> Result<GeneratorMatrix, OperatorError> {
    let level = base.level();
    let shells = ambient.level() - level;
    let nv = base.vertex_count();
    let amb_weights = ambient.vertex_weights();
    let mut transition = Vec::with_capacity(nv);
    let mut weights = vec![0.0; nv];
    for x in 0..nv {
        let p = base.vertex(x);
        let mut reference: Option<(LatticePoint, Vec<f64>)> = None;
        for fp in fiber(&p, level, shells)?.points {
            let a = ambient.index_of(&fp.point).ok_or(GasketError::NotInMesh(fp.point))?;
            weights[x] += amb_weights[a];
            let nb = ambient.neighbors(a);
            let mut row = vec![0.0; nv];
            for &b in nb {
                let image = project(&ambient.vertex(b), level)?;
                let k = base.index_of(&image).ok_or(GasketError::NotInMesh(image))?;
                row[k] += 1.0 / nb.len() as f64;
            }
            match &reference {
                None => reference = Some((fp.point, row)),
                Some((first, r0)) => {
                    let gap = r0.iter().zip(&row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    if gap > QUOTIENT_TOL {
                        return Err(OperatorError::NotLumpable {
                            point: p,
                            first: *first,
                            second: fp.point,
                            gap,
                        });
                    }
                }
            }
        }
        let (_, row) = reference.expect("fibers are nonempty");
        transition.push(row.into_iter().enumerate().filter(|(_, v)| *v != 0.0).collect::<Vec<_>>());
    }
    let norm = 3f64.powi(shells as i32);
    weights.iter_mut().for_each(|w| *w /= norm);
    let scale = time_scale(base.refinement());
    Ok(GeneratorMatrix {
        kind: GeneratorKind::Quotient,
        level,
        refinement: base.refinement(),
        time_scale: scale,
        matrix: symmetrize(&transition, &weights, scale),
        weights,
    })
}

/// Orthonormal eigenpairs of a symmetric matrix, ascending, plus the vertex
/// measure used to map between symmetrized and transition forms.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: Mat<f64>,
    pub weights: Vec<f64>,
}

/// Symmetric eigensolve of `matrix`; the lower triangle is used.
pub fn eigh(matrix: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>), OperatorError> {
    let e = matrix
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| OperatorError::Eigen(format!("{e:?}")))?;
    let s = e.S();
    let values: Vec<f64> = (0..matrix.nrows()).map(|k| s[k]).collect();
    Ok((values, e.U().to_owned()))
}

/// Eigenvalues only, ascending.
pub fn eigvalsh(matrix: &Mat<f64>) -> Result<Vec<f64>, OperatorError> {
    let mut v = matrix
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| OperatorError::Eigen(format!("{e:?}")))?;
    v.sort_by(f64::total_cmp);
    Ok(v)
}

impl EigenDecomposition {
    pub fn of(generator: &GeneratorMatrix) -> Result<Self, OperatorError> {
        let (mut values, vectors) = eigh(&generator.matrix)?;
        // generators are PSD; round-off zeros would be blown up by phi(l) = l^gamma
        let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for v in values.iter_mut() {
            if v.abs() <= 1e-12 * scale {
                *v = 0.0;
            }
        }
        Ok(Self {
            values,
            vectors,
            weights: generator.weights.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `U f(Lambda) U^T`.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> Mat<f64> {
        let n = self.dim();
        let fv: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let scaled = Mat::<f64>::from_fn(n, n, |i, k| self.vectors[(i, k)] * fv[k]);
        let mut out = &scaled * self.vectors.transpose();
        for x in 0..n {
            for y in 0..x {
                let v = 0.5 * (out[(x, y)] + out[(y, x)]);
                out[(x, y)] = v;
                out[(y, x)] = v;
            }
        }
        out
    }

    /// Rows `rows` of `U f(Lambda) U^T`, as a `rows.len() x dim` matrix.
    pub fn apply_rows(&self, rows: &[usize], f: impl Fn(f64) -> f64) -> Mat<f64> {
        let n = self.dim();
        let fv: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let left = Mat::<f64>::from_fn(rows.len(), n, |r, k| self.vectors[(rows[r], k)] * fv[k]);
        &left * self.vectors.transpose()
    }

    /// Symmetrized heat semigroup `e^{-tL}`.
    pub fn heat(&self, t: f64) -> Mat<f64> {
        self.apply(|l| (-t * l).exp())
    }

    /// Converts a symmetrized kernel entry into a transition probability.
    pub fn to_transition(&self, sym: f64, x: usize, y: usize) -> f64 {
        sym * (self.weights[y] / self.weights[x]).sqrt()
    }

    /// Converts a symmetrized kernel entry into a density against the vertex measure.
    pub fn to_density(&self, sym: f64, x: usize, y: usize) -> f64 {
        sym / (self.weights[x] * self.weights[y]).sqrt()
    }

    /// Decomposition of `phi(L)`; eigenvectors are shared.
    pub fn subordinate(&self, spec: &SubordinatorSpec) -> EigenDecomposition {
        EigenDecomposition {
            values: self.values.iter().map(|&l| spec.phi(l)).collect(),
            vectors: self.vectors.clone(),
            weights: self.weights.clone(),
        }
    }
}

/// `A = U phi(Lambda) U^T`, symmetrized basis.
pub fn subordinate_generator(decomp: &EigenDecomposition, spec: &SubordinatorSpec) -> Mat<f64> {
    decomp.apply(|l| spec.phi(l))
}

/// `U e^{-t Lambda} U^T`, symmetrized basis.
pub fn heat_matrix(decomp: &EigenDecomposition, t: f64) -> Mat<f64> {
    decomp.heat(t)
}

/// Two-column CSV of eigenvalues.
pub fn eigenvalues_csv(values: &[f64]) -> String {
    let mut s = String::from("index,eigenvalue\n");
    for (k, v) in values.iter().enumerate() {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}

/// Diagnostics comparing the ambient and reflected subordinate kernels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelReport {
    pub level: u32,
    pub refinement: u32,
    pub shells: u32,
    pub t: f64,
    /// `max_{x,y} sum_{y' in fiber(y), y' outside G_{M+1}} p(t, x, y')`.
    pub c_tail: f64,
    /// `3^-M sum_x m(x) |p(t,x,x) - p^M(t,x,x)|`.
    pub diag_gap: f64,
    /// Largest violation of `P^M_t(pi x, z) = sum_{z' in fiber(z)} P_t(x, z')`.
    pub rotation_residual: f64,
}

/// Ambient and quotient data for one `(M, n, K)` triple.
pub struct KernelPair {
    pub ambient: GasketMesh,
    pub base: GasketMesh,
    pub ambient_decomp: EigenDecomposition,
    pub quotient_decomp: EigenDecomposition,
    /// Ambient index of each base vertex.
    pub embed: Vec<usize>,
    /// Base index of the projection of each ambient vertex.
    pub projection: Vec<usize>,
    /// Ambient indices of each base vertex's fiber.
    pub fibers: Vec<Vec<usize>>,
}

impl KernelPair {
    pub fn build(level: u32, refinement: u32, shells: u32) -> Result<Self, OperatorError> {
        let ambient = GasketMesh::build(level + shells, refinement)?;
        let base = GasketMesh::build(level, refinement)?;
        let quotient = laplacian_reflected_from(&ambient, &base)?;
        let amb = laplacian_ambient(&ambient);
        let ambient_decomp = EigenDecomposition::of(&amb)?;
        let quotient_decomp = EigenDecomposition::of(&quotient)?;
        Self::assemble(ambient, base, ambient_decomp, quotient_decomp)
    }

    pub fn assemble(
        ambient: GasketMesh,
        base: GasketMesh,
        ambient_decomp: EigenDecomposition,
        quotient_decomp: EigenDecomposition,
    ) -> Result<Self, OperatorError> {
        let level = base.level();
        let shells = ambient.level() - level;
        let embed = base
            .vertices()
            .iter()
            .map(|p| ambient.index_of(p).ok_or(GasketError::NotInMesh(*p)))
            .collect::<Result<Vec<_>, _>>()?;
        let projection = ambient
            .vertices()
            .iter()
            .map(|p| {
                let q = project(p, level)?;
                base.index_of(&q).ok_or(GasketError::NotInMesh(q))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let fibers = base
            .vertices()
            .iter()
            .map(|p| {
                fiber(p, level, shells)?
                    .points
                    .iter()
                    .map(|fp| ambient.index_of(&fp.point).ok_or(GasketError::NotInMesh(fp.point)))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            ambient,
            base,
            ambient_decomp,
            quotient_decomp,
            embed,
            projection,
            fibers,
        })
    }

    /// Max over ambient `x`, base `z` of `|P^M_t(pi x, z) - sum_fiber P_t(x, z')|`.
    pub fn rotation_residual(&self, spec: &SubordinatorSpec, t: f64) -> f64 {
        let amb = self.ambient_decomp.apply(|l| (-t * spec.phi(l)).exp());
        let quo = self.quotient_decomp.apply(|l| (-t * spec.phi(l)).exp());
        let mut worst = 0.0f64;
        for x in 0..self.ambient.vertex_count() {
            let px = self.projection[x];
            for (z, fib) in self.fibers.iter().enumerate() {
                let lumped: f64 = fib.iter().map(|&y| self.ambient_decomp.to_transition(amb[(x, y)], x, y)).sum();
                let direct = self.quotient_decomp.to_transition(quo[(px, z)], px, z);
                worst = worst.max((lumped - direct).abs());
            }
        }
        worst
    }

    /// Max over base `z` and fiber-equivalent ambient pairs of the fiber-sum difference.
    pub fn fiber_sum_residual(&self, spec: &SubordinatorSpec, t: f64) -> f64 {
        let amb = self.ambient_decomp.apply(|l| (-t * spec.phi(l)).exp());
        let mut worst = 0.0f64;
        for (z, fib) in self.fibers.iter().enumerate() {
            let _ = z;
            let sums: Vec<f64> = (0..self.ambient.vertex_count())
                .map(|x| fib.iter().map(|&y| self.ambient_decomp.to_transition(amb[(x, y)], x, y)).sum())
                .collect();
            for (xs, reps) in self.fibers.iter().enumerate() {
                let _ = xs;
                let lo = reps.iter().map(|&x| sums[x]).fold(f64::INFINITY, f64::min);
                let hi = reps.iter().map(|&x| sums[x]).fold(f64::NEG_INFINITY, f64::max);
                worst = worst.max(hi - lo);
            }
        }
        worst
    }

    pub fn report(&self, spec: &SubordinatorSpec, t: f64) -> KernelReport {
        let level = self.base.level();
        let rows = &self.embed;
        let amb = self.ambient_decomp.apply_rows(rows, |l| (-t * spec.phi(l)).exp());
        let quo = self.quotient_decomp.apply(|l| (-t * spec.phi(l)).exp());
        let inner_reach = 1u64 << (level + 1 + self.base.refinement());
        let mut c_tail = 0.0f64;
        for (r, &x) in rows.iter().enumerate() {
            for fib in &self.fibers {
                let s: f64 = fib
                    .iter()
                    .filter(|&&y| {
                        let p = self.ambient.vertex(y);
                        p.i + p.j > inner_reach
                    })
                    .map(|&y| self.ambient_decomp.to_density(amb[(r, y)], x, y))
                    .sum();
                c_tail = c_tail.max(s);
            }
        }
        let mut gap = 0.0;
        for (r, &x) in rows.iter().enumerate() {
            let free = self.ambient_decomp.to_density(amb[(r, x)], x, x);
            let refl = self.quotient_decomp.to_density(quo[(r, r)], r, r);
            gap += self.base.vertex_weight(r) * (free - refl).abs();
        }
        let diag_gap = gap / 3f64.powi(level as i32);
        KernelReport {
            level,
            refinement: self.base.refinement(),
            shells: self.ambient.level() - level,
            t,
            c_tail,
            diag_gap,
            rotation_residual: self.rotation_residual(spec, t),
        }
    }
}

/// Builds the ambient/quotient pair and evaluates the three diagnostics.
pub fn kernel_comparison_report(
    level: u32,
    refinement: u32,
    shells: u32,
    spec: &SubordinatorSpec,
    t: f64,
) -> Result<KernelReport, OperatorError> {
    spec.validate()?;
    if shells < 2 {
        return Err(OperatorError::InvalidSpec("tail diagnostics need K >= 2".into()));
    }
    Ok(KernelPair::build(level, refinement, shells)?.report(spec, t))
}
