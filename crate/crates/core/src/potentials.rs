//! Poisson clouds, profile functions `W`, Poissonian potentials and their
//! periodizations, killing obstacles, and numerical checks of (W1)-(W3).
//!
//! Poisson points are snapped to the finest cells of the sampling window. A
//! point in cell `(I, J)` of level `n` is stored as the midpoint of the cell's
//! bottom edge, `(2I + 1, 2J)` at level `n + 1`. Such a point lies in exactly
//! one cell of every size and is never a vertex of any `V_M`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gasket::{fiber, gasket_distance, project, GasketError, GasketMesh, LatticePoint};
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum PotentialError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid intensity {0}")]
    InvalidIntensity(f64),
    #[error("mesh mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Gasket(#[from] GasketError),
}

/// Shape of a radial profile on `[0, R]`; zero beyond `R`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum RadialShape {
    Constant { height: f64 },
    /// `height * (1 - s / R)`.
    Tent { height: f64 },
    /// Piecewise linear through `(s, value)` knots, first knot at `s = 0`.
    Table { knots: Vec<[f64; 2]> },
}

/// Geometric continuation `a_n = scale * ratio^n` of a shell sequence.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GeometricTail {
    pub scale: f64,
    pub ratio: f64,
}

/// User supplied profile. `range` and `bound` are needed for truncated fiber sums.
#[derive(Clone)]
pub struct CustomProfile {
    pub name: String,
    pub w: Arc<dyn Fn(&LatticePoint, &LatticePoint) -> f64 + Send + Sync>,
    pub range: Option<f64>,
    pub bound: f64,
}

impl fmt::Debug for CustomProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomProfile({})", self.name)
    }
}

/// Profile function `W(x, y)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ProfileSpec {
    /// `psi(pi_{M0}(y))` when `x` and `y` share a cell of size `2^{M0}`.
    /// `psi` is piecewise constant on the cells of `G_{M0}` of side `2^-resolution`,
    /// listed in the mesh cell order.
    Cellwise {
        m0: u32,
        #[serde(default)]
        resolution: u32,
        psi: Vec<f64>,
    },
    /// `phi(d(x, y))` with `phi = 0` beyond `range`.
    Radial { range: f64, profile: RadialShape },
    /// `a_n` when `y` is in `Delta_n(x)` but not `Delta_{n-1}(x)`; zero on `V_0`.
    Shellwise {
        coefficients: Vec<f64>,
        #[serde(default)]
        tail: Option<GeometricTail>,
    },
    #[serde(skip)]
    Custom(CustomProfile),
}

/// Cells of side `2^k` (unit coordinates, any `k`) containing `p`: one, or two at a shared corner.
fn containing_cells(p: &LatticePoint, k: u32) -> Vec<(u64, u64)> {
    let s = 1u64 << (k + p.n);
    let (ci, cj) = (p.i / s, p.j / s);
    let (u, v) = (p.i % s, p.j % s);
    let mut out = Vec::with_capacity(2);
    if (ci & cj) == 0 && u + v <= s {
        out.push((ci, cj));
    }
    if u == 0 && v == 0 {
        if ci > 0 && ((ci - 1) & cj) == 0 {
            out.push((ci - 1, cj));
        }
        if cj > 0 && (ci & (cj - 1)) == 0 {
            out.push((ci, cj - 1));
        }
    }
    out
}

fn cell_contains(cell: (u64, u64), k: u32, p: &LatticePoint) -> bool {
    let s = 1u64 << (k + p.n);
    let (x0, y0) = (cell.0 * s, cell.1 * s);
    p.i >= x0 && p.j >= y0 && (p.i - x0) + (p.j - y0) <= s
}

fn is_unit_vertex(p: &LatticePoint) -> bool {
    let s = 1u64 << p.n;
    p.i % s == 0 && p.j % s == 0
}

fn distance_f64(x: &LatticePoint, y: &LatticePoint) -> f64 {
    let d = gasket_distance(x, y);
    *d.numer() as f64 / *d.denom() as f64
}

impl RadialShape {
    pub fn eval(&self, s: f64, range: f64) -> f64 {
        if s > range {
            return 0.0;
        }
        match self {
            RadialShape::Constant { height } => *height,
            RadialShape::Tent { height } => height * (1.0 - s / range).max(0.0),
            RadialShape::Table { knots } => {
                if knots.is_empty() {
                    return 0.0;
                }
                for w in knots.windows(2) {
                    let ([s0, v0], [s1, v1]) = (w[0], w[1]);
                    if s >= s0 && s <= s1 {
                        return if s1 > s0 { v0 + (v1 - v0) * (s - s0) / (s1 - s0) } else { v1 };
                    }
                }
                knots.last().map(|k| k[1]).unwrap_or(0.0)
            }
        }
    }

    fn sup(&self) -> f64 {
        match self {
            RadialShape::Constant { height } | RadialShape::Tent { height } => *height,
            RadialShape::Table { knots } => knots.iter().map(|k| k[1]).fold(0.0, f64::max),
        }
    }
}

impl ProfileSpec {
    pub fn custom(
        name: &str,
        range: Option<f64>,
        bound: f64,
        w: impl Fn(&LatticePoint, &LatticePoint) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ProfileSpec::Custom(CustomProfile {
            name: name.into(),
            w: Arc::new(w),
            range,
            bound,
        })
    }

    /// Counterexample to (W3): `e^{-d(x,0)} 1{d(x,y) <= 1}`.
    pub fn w3_counterexample() -> Self {
        Self::custom("decaying-indicator", Some(1.0), 1.0, |x, y| {
            if distance_f64(x, y) <= 1.0 {
                (-distance_f64(x, &LatticePoint::ORIGIN)).exp()
            } else {
                0.0
            }
        })
    }

    pub fn validate(&self) -> Result<(), PotentialError> {
        let bad = |m: String| Err(PotentialError::InvalidProfile(m));
        match self {
            ProfileSpec::Cellwise { m0, resolution, psi } => {
                let need = 3usize.pow(m0 + resolution);
                if psi.len() != need {
                    return bad(format!("cellwise psi needs {need} values, got {}", psi.len()));
                }
                if psi.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return bad("psi must be finite and nonnegative".into());
                }
                Ok(())
            }
            ProfileSpec::Radial { range, profile } => {
                if !(range.is_finite() && *range > 0.0) {
                    return bad(format!("range {range} must be positive"));
                }
                if let RadialShape::Table { knots } = profile {
                    if knots.first().map(|k| k[0]) != Some(0.0) {
                        return bad("table must start at s = 0".into());
                    }
                    if knots.windows(2).any(|w| w[1][0] < w[0][0]) {
                        return bad("table knots must be sorted".into());
                    }
                }
                let sup = profile.sup();
                let min = match profile {
                    RadialShape::Table { knots } => knots.iter().map(|k| k[1]).fold(f64::INFINITY, f64::min),
                    _ => sup,
                };
                if !(sup.is_finite() && min >= 0.0) {
                    return bad("profile values must be finite and nonnegative".into());
                }
                Ok(())
            }
            ProfileSpec::Shellwise { coefficients, tail } => {
                if coefficients.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                    return bad("shell coefficients must be finite and nonnegative".into());
                }
                if let Some(t) = tail {
                    if !(t.scale >= 0.0 && t.ratio >= 0.0 && t.ratio < 1.0 / 3.0) {
                        return bad(format!(
                            "geometric tail ratio {} must lie in [0, 1/3) for sum 3^n a_n < inf",
                            t.ratio
                        ));
                    }
                }
                Ok(())
            }
            ProfileSpec::Custom(c) => {
                if c.bound.is_finite() && c.bound >= 0.0 {
                    Ok(())
                } else {
                    bad(format!("custom profile {} needs a finite bound", c.name))
                }
            }
        }
    }

    /// Shell coefficient `a_n` (shellwise only).
    pub fn shell_coefficient(&self, n: u32) -> f64 {
        match self {
            ProfileSpec::Shellwise { coefficients, tail } => match coefficients.get(n as usize) {
                Some(a) => *a,
                None => tail.map(|t| t.scale * t.ratio.powi(n as i32)).unwrap_or(0.0),
            },
            _ => 0.0,
        }
    }

    /// `sum_{n >= k} 2 * 3^{n-1} a_n`, the mass-weighted shell tail beyond `Delta_{k-1}`.
    pub fn shell_mass_tail(&self, k: u32) -> f64 {
        let ProfileSpec::Shellwise { coefficients, tail } = self else {
            return 0.0;
        };
        let shell_mass = |n: u32| if n == 0 { 1.0 } else { 2.0 * 3f64.powi(n as i32 - 1) };
        let listed = coefficients.len() as u32;
        let mut s: f64 = (k..listed).map(|n| shell_mass(n) * coefficients[n as usize]).sum();
        if let Some(t) = tail {
            let start = k.max(listed);
            // sum_{n >= start} 2 3^{n-1} c r^n = (2/3) c (3r)^start / (1 - 3r)
            let q = 3.0 * t.ratio;
            let first = if start == 0 {
                t.scale + (2.0 / 3.0) * t.scale * q / (1.0 - q)
            } else {
                (2.0 / 3.0) * t.scale * q.powi(start as i32) / (1.0 - q)
            };
            s += first;
        }
        s
    }

    /// `sup_{n >= k} a_n`.
    fn shell_sup_from(&self, k: u32) -> f64 {
        let ProfileSpec::Shellwise { coefficients, tail } = self else {
            return 0.0;
        };
        let listed = coefficients.iter().skip(k as usize).copied().fold(0.0, f64::max);
        let t = tail
            .map(|t| t.scale * t.ratio.powi(k.max(coefficients.len() as u32) as i32))
            .unwrap_or(0.0);
        listed.max(t)
    }

    /// Largest `d(x, y)` with `W(x, y) > 0`, if finite.
    pub fn interaction_range(&self) -> Option<f64> {
        match self {
            ProfileSpec::Cellwise { m0, .. } => Some(2f64.powi(*m0 as i32 + 1)),
            ProfileSpec::Radial { range, .. } => Some(*range),
            ProfileSpec::Shellwise { coefficients, tail } => {
                let tail_zero = tail.map(|t| t.scale == 0.0).unwrap_or(true);
                if tail_zero {
                    let last = coefficients.iter().rposition(|a| *a > 0.0);
                    Some(last.map(|n| 2f64.powi(n as i32 + 1)).unwrap_or(0.0))
                } else {
                    None
                }
            }
            ProfileSpec::Custom(c) => c.range,
        }
    }

    /// Declared (W1) dominating function `h(y)`.
    pub fn w1_bound(&self, y: &LatticePoint) -> f64 {
        let dy = distance_f64(y, &LatticePoint::ORIGIN);
        match self {
            ProfileSpec::Cellwise { m0, psi, .. } => {
                if dy <= 2f64.powi(*m0 as i32 + 1) {
                    psi.iter().copied().fold(0.0, f64::max)
                } else {
                    0.0
                }
            }
            ProfileSpec::Radial { range, profile } => {
                if dy <= 2.0 * range {
                    profile.sup()
                } else {
                    0.0
                }
            }
            ProfileSpec::Shellwise { .. } => {
                let k = if dy <= 1.0 { 0 } else { (dy.log2().ceil() as u32).saturating_sub(1) };
                self.shell_sup_from(k)
            }
            ProfileSpec::Custom(c) => match c.range {
                Some(r) if dy > 2.0 * r => 0.0,
                _ => c.bound,
            },
        }
    }
}

/// `W(x, y)`.
pub fn profile_eval(spec: &ProfileSpec, x: &LatticePoint, y: &LatticePoint) -> f64 {
    match spec {
        ProfileSpec::Cellwise { m0, resolution, psi } => {
            let shared = containing_cells(x, *m0).into_iter().any(|c| cell_contains(c, *m0, y));
            if !shared {
                return 0.0;
            }
            let Ok(py) = project(y, *m0) else { return 0.0 };
            let Some((ci, cj)) = locate_psi_cell(&py, *resolution) else {
                return 0.0;
            };
            psi_index(*m0, *resolution, ci, cj).map(|k| psi[k]).unwrap_or(0.0)
        }
        ProfileSpec::Radial { range, profile } => {
            let d = distance_f64(x, y);
            profile.eval(d, *range)
        }
        ProfileSpec::Shellwise { .. } => {
            if is_unit_vertex(x) || is_unit_vertex(y) {
                return 0.0;
            }
            let mut k = 0u32;
            loop {
                let cell = containing_cells(x, k)[0];
                if cell_contains(cell, k, y) {
                    return spec.shell_coefficient(k);
                }
                k += 1;
            }
        }
        ProfileSpec::Custom(c) => (c.w)(x, y),
    }
}

/// Cell of side `2^-resolution` containing `p`, at a shared corner the lower-left candidate.
fn locate_psi_cell(p: &LatticePoint, resolution: u32) -> Option<(u64, u64)> {
    let q = p.at_level(p.n.max(resolution))?;
    let s = 1u64 << (q.n - resolution);
    let (mut ci, mut cj) = (q.i / s, q.j / s);
    let (u, v) = (q.i % s, q.j % s);
    if (ci & cj) != 0 && u == 0 && v == 0 {
        if ci > 0 && ((ci - 1) & cj) == 0 {
            ci -= 1;
        } else if cj > 0 {
            cj -= 1;
        }
    }
    Some((ci, cj))
}

fn psi_index(m0: u32, resolution: u32, ci: u64, cj: u64) -> Option<usize> {
    let side = 1u64 << (m0 + resolution);
    let (ci, cj) = if ci + cj >= side {
        // corners of G_{M0} sit on the outer boundary; use the adjacent cell
        if cj == 0 {
            (side - 1, 0)
        } else {
            (ci, side - 1 - ci)
        }
    } else {
        (ci, cj)
    };
    if (ci & cj) != 0 {
        return None;
    }
    // mesh cell order: lexicographic over gasket cells
    let mut k = 0usize;
    for i in 0..side {
        for j in 0..side - i {
            if (i & j) == 0 {
                if (i, j) == (ci, cj) {
                    return Some(k);
                }
                k += 1;
            }
        }
    }
    None
}

/// A sampled Poisson configuration with intensity `intensity * m`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonCloud {
    pub seed: u64,
    pub intensity: f64,
    pub window_level: u32,
    pub refinement: u32,
    pub points: Vec<LatticePoint>,
}

#[derive(Serialize, Deserialize)]
struct CloudJson {
    seed: u64,
    intensity: f64,
    #[serde(rename = "M")]
    window_level: u32,
    n: u32,
    points: Vec<[u64; 3]>,
}

impl PoissonCloud {
    pub fn empty(intensity: f64, window_level: u32, refinement: u32) -> Self {
        Self {
            seed: 0,
            intensity,
            window_level,
            refinement,
            points: Vec::new(),
        }
    }

    /// Points lying in `G_M`.
    pub fn restrict(&self, level: u32) -> PoissonCloud {
        let reach = 1u64 << (level + self.refinement + 1);
        PoissonCloud {
            window_level: level.min(self.window_level),
            points: self.points.iter().copied().filter(|p| p.i + p.j <= reach).collect(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        let j = CloudJson {
            seed: self.seed,
            intensity: self.intensity,
            window_level: self.window_level,
            n: self.refinement,
            points: self.points.iter().map(|p| [p.i, p.j, p.n as u64]).collect(),
        };
        serde_json::to_string(&j).expect("plain data serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let j: CloudJson = serde_json::from_str(s)?;
        Ok(Self {
            seed: j.seed,
            intensity: j.intensity,
            window_level: j.window_level,
            refinement: j.n,
            points: j.points.iter().map(|p| LatticePoint::new(p[0], p[1], p[2] as u32)).collect(),
        })
    }
}

/// Representative point of level-`n` cell `(I, J)`.
pub fn cell_point(cell: (u64, u64), refinement: u32) -> LatticePoint {
    LatticePoint::new(2 * cell.0 + 1, 2 * cell.1, refinement + 1)
}

/// Samples a Poisson cloud on `window` from its own RNG stream.
pub fn sample_cloud(intensity: f64, window: &GasketMesh, seed: u64) -> Result<PoissonCloud, PotentialError> {
    sample_cloud_with(intensity, window, seed, &mut stream_rng(seed, 0))
}

pub fn sample_cloud_with(
    intensity: f64,
    window: &GasketMesh,
    seed: u64,
    rng: &mut impl Rng,
) -> Result<PoissonCloud, PotentialError> {
    if !(intensity >= 0.0 && intensity.is_finite()) {
        return Err(PotentialError::InvalidIntensity(intensity));
    }
    let mass = 3f64.powi(window.level() as i32);
    let mean = intensity * mass;
    let count = if mean > 0.0 {
        Poisson::new(mean).map_err(|_| PotentialError::InvalidIntensity(intensity))?.sample(rng) as usize
    } else {
        0
    };
    let cells = window.cells();
    let points = (0..count)
        .map(|_| cell_point(cells[rng.random_range(0..cells.len())], window.refinement()))
        .collect();
    Ok(PoissonCloud {
        seed,
        intensity,
        window_level: window.level(),
        refinement: window.refinement(),
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PotentialKind {
    Raw,
    Periodized,
    Sznitman,
    ObstacleMask,
}

/// Per-vertex potential values. Obstacle masks use `+inf` for blocked vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialVector {
    pub values: Vec<f64>,
    pub kind: PotentialKind,
    /// Upper bound on the contribution dropped by truncation, per vertex.
    pub truncation_bound: f64,
}

impl PotentialVector {
    pub fn zeros(n: usize, kind: PotentialKind) -> Self {
        Self {
            values: vec![0.0; n],
            kind,
            truncation_bound: 0.0,
        }
    }

    pub fn is_blocked(&self, k: usize) -> bool {
        self.values[k].is_infinite()
    }

    pub fn blocked_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_infinite()).count()
    }
}

/// `V(x) = sum_i W(x, y_i)` on every mesh vertex.
///
/// For infinite-range profiles the bound on the mass of shells outside the
/// cloud window is reported in `truncation_bound` (in units of `intensity`).
pub fn potential_on_mesh(
    cloud: &PoissonCloud,
    spec: &ProfileSpec,
    mesh: &GasketMesh,
) -> Result<PotentialVector, PotentialError> {
    spec.validate()?;
    let values = mesh
        .vertices()
        .iter()
        .map(|x| cloud.points.iter().map(|y| profile_eval(spec, x, y)).sum())
        .collect();
    let truncation_bound = match spec.interaction_range() {
        Some(r) if (mesh.level() as f64).exp2() + r <= (cloud.window_level as f64).exp2() => 0.0,
        Some(_) | None => match spec {
            ProfileSpec::Shellwise { .. } => cloud.intensity * spec.shell_mass_tail(cloud.window_level + 1),
            _ => cloud.intensity * spec.w1_bound(&LatticePoint::ORIGIN) * 3f64.powi(cloud.window_level as i32 + 2),
        },
    };
    Ok(PotentialVector {
        values,
        kind: PotentialKind::Raw,
        truncation_bound,
    })
}

/// `V_M(x) = V(pi_M(x))` for every vertex of `target`.
pub fn periodize_usual(
    v: &PotentialVector,
    base: &GasketMesh,
    target: &GasketMesh,
) -> Result<PotentialVector, PotentialError> {
    if v.values.len() != base.vertex_count() || base.refinement() != target.refinement() {
        return Err(PotentialError::Mismatch("potential is not defined on the base mesh".into()));
    }
    let values = target
        .vertices()
        .iter()
        .map(|x| {
            let q = project(x, base.level())?;
            let k = base.index_of(&q).ok_or(GasketError::NotInMesh(q))?;
            Ok(v.values[k])
        })
        .collect::<Result<Vec<_>, GasketError>>()?;
    Ok(PotentialVector {
        values,
        kind: if v.kind == PotentialKind::ObstacleMask { v.kind } else { PotentialKind::Periodized },
        truncation_bound: v.truncation_bound,
    })
}

/// Fiber copies, inside `G_{M+K}`, of the cloud points lying in `G_M`.
pub fn fiber_copies(cloud: &PoissonCloud, level: u32, shells: u32) -> Result<Vec<LatticePoint>, PotentialError> {
    let inside = cloud.restrict(level);
    let mut out = Vec::new();
    for y in &inside.points {
        out.extend(fiber(y, level, shells)?.points.iter().map(|f| f.point));
    }
    Ok(out)
}

/// Bound on `sum` of `W(x, y')` over fiber copies beyond `G_{M+K}`, per cloud point.
pub fn sznitman_tail_bound(spec: &ProfileSpec, level: u32, shells: u32) -> Result<f64, PotentialError> {
    let gap = 2f64.powi((level + shells) as i32) - 2f64.powi(level as i32);
    match spec {
        ProfileSpec::Radial { range, profile } => {
            if *range <= gap {
                Ok(0.0)
            } else {
                // copies in shell j sit at distance >= 2^{M+j} - 2^M
                let mut total = 0.0;
                let mut j = shells;
                while 2f64.powi((level + j) as i32) - 2f64.powi(level as i32) < *range {
                    total += 2.0 * 3f64.powi(j as i32) * profile.sup();
                    j += 1;
                }
                Ok(total)
            }
        }
        ProfileSpec::Cellwise { m0, psi, .. } => {
            let reach = (*m0).max(level + 1);
            if level + shells >= reach {
                Ok(0.0)
            } else {
                Ok(psi.iter().copied().fold(0.0, f64::max) * 3f64.powi((reach - level) as i32))
            }
        }
        ProfileSpec::Shellwise { .. } => {
            // a copy in shell j (G_{M+j+1} minus G_{M+j}) sees x in G_M at shell index M+j+1
            let mut total = 0.0;
            let mut j = shells;
            loop {
                let term = 2.0 * 3f64.powi(j as i32) * spec.shell_coefficient(level + j + 1);
                total += term;
                if term <= 1e-300 || j > shells + 200 {
                    break;
                }
                // geometric tails converge; stop once terms are negligible
                if term < 1e-16 * total && j > shells + 8 {
                    break;
                }
                j += 1;
            }
            Ok(total)
        }
        ProfileSpec::Custom(c) => match c.range {
            Some(r) if r <= gap => Ok(0.0),
            Some(r) => {
                let mut total = 0.0;
                let mut j = shells;
                while 2f64.powi((level + j) as i32) - 2f64.powi(level as i32) < r {
                    total += 2.0 * 3f64.powi(j as i32) * c.bound;
                    j += 1;
                }
                Ok(total)
            }
            None => Err(PotentialError::InvalidProfile(format!(
                "custom profile {} declares no range, the fiber tail cannot be bounded",
                c.name
            ))),
        },
    }
}

/// Sznitman periodization evaluated at the vertices of `mesh`:
/// `sum_{y_i in G_M} sum_{y' in fiber(y_i, M, K)} W(x, y')`.
pub fn periodize_sznitman(
    cloud: &PoissonCloud,
    spec: &ProfileSpec,
    level: u32,
    shells: u32,
    mesh: &GasketMesh,
) -> Result<PotentialVector, PotentialError> {
    spec.validate()?;
    if shells < 1 {
        return Err(PotentialError::InvalidProfile("K_trunc must be at least 1".into()));
    }
    let copies = fiber_copies(cloud, level, shells)?;
    let per_point = sznitman_tail_bound(spec, level, shells)?;
    let values = mesh
        .vertices()
        .iter()
        .map(|x| copies.iter().map(|y| profile_eval(spec, x, y)).sum())
        .collect();
    Ok(PotentialVector {
        values,
        kind: PotentialKind::Sznitman,
        truncation_bound: per_point * cloud.restrict(level).points.len() as f64,
    })
}

fn mask_from(mesh: &GasketMesh, centers: &[LatticePoint], radius: f64) -> PotentialVector {
    let values = mesh
        .vertices()
        .iter()
        .map(|x| {
            if centers.iter().any(|y| distance_f64(x, y) <= radius) {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect();
    PotentialVector {
        values,
        kind: PotentialKind::ObstacleMask,
        truncation_bound: 0.0,
    }
}

/// Vertices within distance `a` of some cloud point.
pub fn obstacle_mask(cloud: &PoissonCloud, radius: f64, mesh: &GasketMesh) -> PotentialVector {
    mask_from(mesh, &cloud.points, radius)
}

/// `O_M`: vertices of `target` whose projection onto `G_M` is blocked.
pub fn obstacle_periodized(
    cloud: &PoissonCloud,
    radius: f64,
    base: &GasketMesh,
    target: &GasketMesh,
) -> Result<PotentialVector, PotentialError> {
    periodize_usual(&obstacle_mask(cloud, radius, base), base, target)
}

/// `O_M^*`: balls around every fiber copy (inside `G_{M+K}`) of the points in `G_M`.
pub fn obstacle_sznitman(
    cloud: &PoissonCloud,
    radius: f64,
    level: u32,
    shells: u32,
    mesh: &GasketMesh,
) -> Result<PotentialVector, PotentialError> {
    let copies = fiber_copies(cloud, level, shells)?;
    Ok(mask_from(mesh, &copies, radius))
}

/// A violation of (W3).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct W3Witness {
    pub x: LatticePoint,
    pub y: LatticePoint,
    pub level: u32,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct W3Report {
    pub holds: bool,
    pub pairs_checked: usize,
    pub witnesses: Vec<W3Witness>,
}

/// Checks `sum_{y'} W(pi_M x, y') <= sum_{y'} W(pi_{M+1} x, y')` over fibers of
/// `pi_M(y)` truncated to `G_{M+K}`, for `x` in the `G_{M+2}` mesh and `y` the
/// cell points of `G_M`.
pub fn check_w3(spec: &ProfileSpec, levels: &[u32], refinement: u32, shells: u32) -> Result<W3Report, PotentialError> {
    spec.validate()?;
    let mut pairs = 0usize;
    for &level in levels {
        let xs = GasketMesh::build(level + 2, refinement)?;
        let base = GasketMesh::build(level, refinement)?;
        let fibers: Vec<(LatticePoint, Vec<LatticePoint>)> = base
            .cells()
            .iter()
            .map(|&c| {
                let y = cell_point(c, refinement);
                fiber(&y, level, shells).map(|f| (y, f.points.iter().map(|p| p.point).collect()))
            })
            .collect::<Result<_, _>>()?;
        for x in xs.vertices() {
            let px = project(x, level)?;
            let px1 = project(x, level + 1)?;
            for (y, fib) in &fibers {
                pairs += 1;
                let lhs: f64 = fib.iter().map(|yp| profile_eval(spec, &px, yp)).sum();
                let rhs: f64 = fib.iter().map(|yp| profile_eval(spec, &px1, yp)).sum();
                if lhs > rhs + 1e-12 * (1.0 + rhs.abs()) {
                    return Ok(W3Report {
                        holds: false,
                        pairs_checked: pairs,
                        witnesses: vec![W3Witness {
                            x: *x,
                            y: *y,
                            level,
                            lhs,
                            rhs,
                        }],
                    });
                }
            }
        }
    }
    Ok(W3Report {
        holds: true,
        pairs_checked: pairs,
        witnesses: Vec::new(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct W2Report {
    /// `term_M = sup_x int_{B(x, 2^{M/4})^c} W(x, y) dm(y)` for `M = 1..=M_max`.
    pub terms: Vec<f64>,
    pub partial_sums: Vec<f64>,
    /// Mean ratio of consecutive nonzero terms, if at least two are nonzero.
    pub decay_ratio: Option<f64>,
    pub convergent_trend: bool,
}

/// Terms of the (W2) series. Compact families use vertex quadrature on
/// `window`; shellwise profiles use the exact shell-mass bound.
pub fn check_w2(spec: &ProfileSpec, max_level: u32, window: &GasketMesh) -> Result<W2Report, PotentialError> {
    spec.validate()?;
    let mut terms = Vec::new();
    let dists: Vec<Vec<u64>> = match spec {
        ProfileSpec::Shellwise { .. } => Vec::new(),
        _ => (0..window.vertex_count()).map(|x| window.hop_distances(x)).collect(),
    };
    let unit = 1.0 / (window.refinement() as f64).exp2();
    for m in 1..=max_level {
        let radius = (m as f64 / 4.0).exp2();
        let term = match spec {
            ProfileSpec::Shellwise { .. } => spec.shell_mass_tail(m / 4 + 1),
            _ => {
                let mut sup = 0.0f64;
                for (x, row) in dists.iter().enumerate() {
                    let px = window.vertex(x);
                    let s: f64 = row
                        .iter()
                        .enumerate()
                        .filter(|(_, &h)| h as f64 * unit > radius)
                        .map(|(y, _)| profile_eval(spec, &px, &window.vertex(y)) * window.vertex_weight(y))
                        .sum();
                    sup = sup.max(s);
                }
                sup
            }
        };
        terms.push(term);
    }
    let partial_sums = terms
        .iter()
        .scan(0.0, |acc, t| {
            *acc += t;
            Some(*acc)
        })
        .collect();
    let nz: Vec<f64> = terms.iter().copied().filter(|t| *t > 0.0).collect();
    let decay_ratio = (nz.len() >= 2).then(|| {
        let r: Vec<f64> = nz.windows(2).map(|w| w[1] / w[0]).collect();
        r.iter().sum::<f64>() / r.len() as f64
    });
    let convergent_trend = match decay_ratio {
        Some(r) => r < 1.0,
        None => true,
    };
    Ok(W2Report {
        terms,
        partial_sums,
        decay_ratio,
        convergent_trend,
    })
}

/// Largest violation of `W(x, y) <= h(y)` over mesh pairs with `d(y,0) >= 2 d(x,0)`.
pub fn check_w1(spec: &ProfileSpec, mesh: &GasketMesh) -> f64 {
    let mut worst = 0.0f64;
    for x in mesh.vertices() {
        let dx = distance_f64(x, &LatticePoint::ORIGIN);
        for y in mesh.vertices() {
            if distance_f64(y, &LatticePoint::ORIGIN) >= 2.0 * dx {
                worst = worst.max(profile_eval(spec, x, y) - spec.w1_bound(y));
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tent() -> ProfileSpec {
        ProfileSpec::Radial {
            range: 1.0,
            profile: RadialShape::Tent { height: 1.0 },
        }
    }

    #[test]
    fn radial_profile_vanishes_beyond_range() {
        let x = LatticePoint::new(0, 0, 0);
        assert_eq!(profile_eval(&tent(), &x, &LatticePoint::new(2, 0, 0)), 0.0);
        assert!((profile_eval(&tent(), &x, &LatticePoint::new(1, 0, 1)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shellwise_inner_shell() {
        let spec = ProfileSpec::Shellwise {
            coefficients: vec![5.0, 2.0, 1.0],
            tail: None,
        };
        let x = LatticePoint::new(1, 0, 2);
        let y = LatticePoint::new(0, 1, 2);
        assert_eq!(profile_eval(&spec, &x, &y), 5.0);
        let far = LatticePoint::new(5, 0, 2);
        assert_eq!(profile_eval(&spec, &x, &far), 2.0);
        assert_eq!(profile_eval(&spec, &LatticePoint::ORIGIN, &y), 0.0);
    }

    #[test]
    fn cellwise_needs_shared_cell() {
        let spec = ProfileSpec::Cellwise {
            m0: 0,
            resolution: 0,
            psi: vec![3.0],
        };
        let x = LatticePoint::new(1, 1, 2);
        assert_eq!(profile_eval(&spec, &x, &LatticePoint::new(1, 0, 2)), 3.0);
        assert_eq!(profile_eval(&spec, &x, &LatticePoint::new(5, 1, 2)), 0.0);
        // the shared corner (1, 0) sees both unit cells
        assert_eq!(profile_eval(&spec, &LatticePoint::new(1, 0, 0), &LatticePoint::new(5, 1, 2)), 3.0);
    }

    #[test]
    fn psi_table_lookup() {
        let spec = ProfileSpec::Cellwise {
            m0: 1,
            resolution: 0,
            psi: vec![1.0, 2.0, 3.0],
        };
        // cells of G_1 in order (0,0), (0,1), (1,0)
        let x = LatticePoint::new(3, 0, 2);
        assert_eq!(profile_eval(&spec, &x, &LatticePoint::new(5, 0, 2)), 3.0);
        assert_eq!(profile_eval(&spec, &x, &LatticePoint::new(1, 5, 2)), 2.0);
        assert_eq!(profile_eval(&spec, &x, &LatticePoint::new(1, 1, 2)), 1.0);
    }

    #[test]
    fn clouds_are_reproducible() {
        let w = GasketMesh::build(1, 2).unwrap();
        let a = sample_cloud(1.0, &w, 7).unwrap();
        let b = sample_cloud(1.0, &w, 7).unwrap();
        assert_eq!(a, b);
        let back = PoissonCloud::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        for p in &a.points {
            assert!(p.on_gasket());
        }
        assert!(sample_cloud(-1.0, &w, 7).is_err());
    }

    #[test]
    fn potential_linear_in_cloud() {
        let mesh = GasketMesh::build(1, 2).unwrap();
        let y = cell_point((1, 0), 2);
        let one = PoissonCloud {
            points: vec![y],
            ..PoissonCloud::empty(1.0, 1, 2)
        };
        let two = PoissonCloud {
            points: vec![y, y],
            ..one.clone()
        };
        let v1 = potential_on_mesh(&one, &tent(), &mesh).unwrap();
        let v2 = potential_on_mesh(&two, &tent(), &mesh).unwrap();
        for (a, b) in v1.values.iter().zip(&v2.values) {
            assert_eq!(2.0 * a, *b);
        }
        let v0 = potential_on_mesh(&PoissonCloud::empty(1.0, 1, 2), &tent(), &mesh).unwrap();
        assert!(v0.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn radial_sznitman_tail_vanishes_for_short_range() {
        assert_eq!(sznitman_tail_bound(&tent(), 1, 1).unwrap(), 0.0);
        let wide = ProfileSpec::Radial {
            range: 3.0,
            profile: RadialShape::Constant { height: 1.0 },
        };
        assert!(sznitman_tail_bound(&wide, 1, 1).unwrap() > 0.0);
        let bad = ProfileSpec::custom("unbounded", None, 1.0, |_, _| 1.0);
        assert!(sznitman_tail_bound(&bad, 1, 1).is_err());
    }

    #[test]
    fn shell_tail_closed_form() {
        let spec = ProfileSpec::Shellwise {
            coefficients: vec![],
            tail: Some(GeometricTail { scale: 1.0, ratio: 0.25 }),
        };
        for k in 0..6u32 {
            let brute: f64 = (k..200)
                .map(|n| if n == 0 { 1.0 } else { 2.0 * 3f64.powi(n as i32 - 1) * 0.25f64.powi(n as i32) })
                .sum();
            assert!((spec.shell_mass_tail(k) - brute).abs() < 1e-12, "k={k}");
        }
        let bad = ProfileSpec::Shellwise {
            coefficients: vec![],
            tail: Some(GeometricTail { scale: 1.0, ratio: 0.5 }),
        };
        assert!(bad.validate().is_err());
    }
}
