//! Path-level simulation: subordinator samplers, the continuous-time walk
//! on a mesh, displacement tails, exit times, and cloud averages.

use std::f64::consts::PI;

use faer::linalg::solvers::Solve;
use faer::Mat;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gasket::{GasketMesh, LatticePoint};
use crate::operators::{time_scale, SubordinatorSpec, D_W};
use crate::potentials::{profile_eval, sample_cloud_with, PoissonCloud, PotentialError, ProfileSpec};
use crate::rng::stream_rng;
use crate::spectra::{four_transform_suite, Perturbation, SpectraError, SuiteContext, SuiteResult};

#[derive(Debug, Error)]
pub enum MonteCarloError {
    #[error("no path sampler for the {0} family (use the spectral route)")]
    Unsupported(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("radius {r} is below the mesh resolution {unit}")]
    Resolution { r: f64, unit: f64 },
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    Spectra(#[from] SpectraError),
}

/// Running mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanVar {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl MeanVar {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Chan's pairwise merge.
    pub fn merge(&mut self, other: &MeanVar) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / n;
        self.m2 += other.m2 + d * d * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for MeanVar {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = MeanVar::default();
        for x in iter {
            acc.push(x);
        }
        acc
    }
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

// ---------------------------------------------------------------------------
// subordinators

/// One draw with `E exp(-l S) = exp(-l^gamma)` (Kanter's representation).
pub fn positive_stable(gamma: f64, rng: &mut impl Rng) -> f64 {
    if gamma >= 1.0 {
        return 1.0;
    }
    let u: f64 = rng.random::<f64>() * PI;
    let e: f64 = Exp1.sample(rng);
    let a = (gamma * u).sin() / u.sin().powf(1.0 / gamma);
    let b = ((1.0 - gamma) * u).sin() / e;
    a * b.powf((1.0 - gamma) / gamma)
}

/// Acceptance probability of the rejection step for a relativistic
/// increment of length `dt`, which is `E exp(-m S_dt) = exp(-mass dt)`.
pub fn relativistic_acceptance(mass: f64, dt: f64) -> f64 {
    (-mass * dt).exp()
}

/// Increment `S_{s+dt} - S_s`.
pub fn subordinator_increment(spec: &SubordinatorSpec, dt: f64, rng: &mut impl Rng) -> Result<f64, MonteCarloError> {
    if dt <= 0.0 {
        return Ok(0.0);
    }
    let mut stable = |alpha: f64| {
        let g = alpha / D_W;
        dt.powf(1.0 / g) * positive_stable(g, rng)
    };
    Ok(match spec {
        SubordinatorSpec::Identity => dt,
        SubordinatorSpec::Stable { alpha } => stable(*alpha),
        SubordinatorSpec::StableMixture { alphas } => alphas.iter().map(|&a| stable(a)).sum(),
        SubordinatorSpec::StableWithDrift { alpha, drift } => drift * dt + stable(*alpha),
        SubordinatorSpec::Relativistic { alpha, mass } => {
            // exp(-m s) tilt of the stable law, m = mass^{1/gamma}; pieces
            // keep the per-piece acceptance exp(-mass * h) at least 1/e
            let g = alpha / D_W;
            let m = mass.powf(1.0 / g);
            let pieces = (mass * dt).ceil().max(1.0) as usize;
            let h = dt / pieces as f64;
            let mut total = 0.0;
            for _ in 0..pieces {
                loop {
                    let s = h.powf(1.0 / g) * positive_stable(g, rng);
                    if rng.random::<f64>() < (-m * s).exp() {
                        total += s;
                        break;
                    }
                }
            }
            total
        }
        SubordinatorSpec::LogStable { .. } => return Err(MonteCarloError::Unsupported("log-stable".into())),
        SubordinatorSpec::Custom(c) => return Err(MonteCarloError::Unsupported(c.name.clone())),
    })
}

/// `S` at the grid times, from independent increments.
pub fn sample_subordinator_path(spec: &SubordinatorSpec, grid: &[f64], seed: u64) -> Result<Vec<f64>, MonteCarloError> {
    sample_subordinator_path_with(spec, grid, &mut stream_rng(seed, 0))
}

pub fn sample_subordinator_path_with(
    spec: &SubordinatorSpec,
    grid: &[f64],
    rng: &mut impl Rng,
) -> Result<Vec<f64>, MonteCarloError> {
    if grid.first() != Some(&0.0) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MonteCarloError::Invalid("grid must increase from 0".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    let mut s = 0.0;
    out.push(0.0);
    for w in grid.windows(2) {
        s += subordinator_increment(spec, w[1] - w[0], rng)?;
        out.push(s);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// walks

/// Continuous-time simple random walk path. `states[k]` is occupied on
/// `[times[k], times[k+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkPath {
    pub times: Vec<f64>,
    /// Mesh indices.
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl WalkPath {
    pub fn start(x0: usize) -> Self {
        Self {
            times: vec![0.0],
            states: vec![x0],
            horizon: 0.0,
        }
    }

    /// Simulates further until `horizon` (no-op if already there).
    pub fn extend(&mut self, mesh: &GasketMesh, horizon: f64, rng: &mut impl Rng) {
        if horizon <= self.horizon {
            return;
        }
        let rate = time_scale(mesh.refinement());
        let mut t = *self.times.last().expect("nonempty path");
        let mut x = *self.states.last().expect("nonempty path");
        // the pending jump time is redrawn; holding times are memoryless
        t = t.max(self.horizon);
        loop {
            let hold: f64 = Exp1.sample(rng);
            t += hold / rate;
            if t > horizon {
                break;
            }
            let nb = mesh.neighbors(x);
            x = nb[rng.random_range(0..nb.len())];
            self.times.push(t);
            self.states.push(x);
        }
        self.horizon = horizon;
    }

    /// State at time `s <= horizon`.
    pub fn at(&self, s: f64) -> usize {
        let k = self.times.partition_point(|&u| u <= s);
        self.states[k.max(1) - 1]
    }

    /// `int_0^t g(X_s) ds` for the piecewise constant path.
    pub fn integrate(&self, t: f64, mut g: impl FnMut(usize) -> f64) -> f64 {
        let mut total = 0.0;
        for k in 0..self.states.len() {
            let a = self.times[k];
            if a >= t {
                break;
            }
            let b = self.times.get(k + 1).copied().unwrap_or(f64::INFINITY).min(t);
            total += (b - a) * g(self.states[k]);
        }
        total
    }
}

/// Walk with generator `time_scale(n) (I - P)` started at mesh vertex `x0`.
pub fn simulate_walk(mesh: &GasketMesh, x0: usize, horizon: f64, seed: u64) -> WalkPath {
    let mut path = WalkPath::start(x0);
    path.extend(mesh, horizon, &mut stream_rng(seed, 0));
    path
}

/// `X_t = Z_{S_t}` on a time grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubordinatePath {
    pub grid_times: Vec<f64>,
    pub positions: Vec<usize>,
    pub subordinator_values: Vec<f64>,
}

pub fn subordinate_path(
    mesh: &GasketMesh,
    x0: usize,
    spec: &SubordinatorSpec,
    grid: &[f64],
    rng: &mut impl Rng,
) -> Result<SubordinatePath, MonteCarloError> {
    let s = sample_subordinator_path_with(spec, grid, rng)?;
    let mut walk = WalkPath::start(x0);
    walk.extend(mesh, *s.last().expect("grid nonempty"), rng);
    Ok(SubordinatePath {
        grid_times: grid.to_vec(),
        positions: s.iter().map(|&u| walk.at(u)).collect(),
        subordinator_values: s,
    })
}

// ---------------------------------------------------------------------------
// Lemma-type checks

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailRow {
    pub level: u32,
    pub threshold: f64,
    pub hits: u64,
    pub trials: u64,
    pub probability: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Empirical `P[sup_{s<=t} d(X_s, x0) > 2^M]` for `x0` the origin.
///
/// The walk lives on `G_L` with `L = max M + 2`, started at the origin, and
/// `X` is read on a grid of `steps` equal steps of `[0, t]`. A trial stops
/// once the largest threshold is exceeded. With `steps == 0` the identity
/// subordinator is assumed and the exact running supremum of the walk is used.
pub fn sup_displacement_tail(
    levels: &[u32],
    refinement: u32,
    t: f64,
    spec: &SubordinatorSpec,
    trials: u64,
    steps: usize,
    seed: u64,
) -> Result<Vec<TailRow>, MonteCarloError> {
    let top = *levels.iter().max().ok_or_else(|| MonteCarloError::Invalid("no levels".into()))?;
    if steps == 0 && !spec.is_identity() {
        return Err(MonteCarloError::Invalid("exact supremum needs the identity subordinator".into()));
    }
    let mesh = GasketMesh::build(top + 2, refinement).map_err(PotentialError::from)?;
    let origin = mesh.corner_indices()[0];
    let unit = 0.5f64.powi(refinement as i32);
    let dist: Vec<f64> = mesh.hop_distances(origin).iter().map(|&h| h as f64 * unit).collect();
    let cap = 2f64.powi(top as i32);
    let grid: Vec<f64> = (0..=steps).map(|k| t * k as f64 / steps.max(1) as f64).collect();
    let sups = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream_rng(seed, trial);
            let mut walk = WalkPath::start(origin);
            let mut sup = 0.0f64;
            if steps == 0 {
                // jump by jump, stopping past the cap
                let rate = time_scale(refinement);
                let mut clock = 0.0;
                let mut x = origin;
                loop {
                    let hold: f64 = Exp1.sample(&mut rng);
                    clock += hold / rate;
                    if clock > t || sup > cap {
                        break;
                    }
                    let nb = mesh.neighbors(x);
                    x = nb[rng.random_range(0..nb.len())];
                    sup = sup.max(dist[x]);
                }
                return Ok(sup);
            }
            let mut s = 0.0;
            for w in grid.windows(2) {
                s += subordinator_increment(spec, w[1] - w[0], &mut rng)?;
                walk.extend(&mesh, s, &mut rng);
                sup = sup.max(dist[walk.at(s)]);
                if sup > cap {
                    break;
                }
            }
            Ok(sup)
        })
        .collect::<Result<Vec<f64>, MonteCarloError>>()?;
    Ok(levels
        .iter()
        .map(|&m| {
            let threshold = 2f64.powi(m as i32);
            let hits = sups.iter().filter(|&&s| s > threshold).count() as u64;
            let (lower, upper) = wilson_interval(hits, trials, 1.96);
            TailRow {
                level: m,
                threshold,
                hits,
                trials,
                probability: hits as f64 / trials as f64,
                lower,
                upper,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExitTimeRow {
    pub r: f64,
    pub start: LatticePoint,
    pub mean: f64,
    pub stderr: f64,
    pub trials: u64,
    /// Expected exit time from the linear solve.
    pub oracle: f64,
}

fn ball(mesh: &GasketMesh, x: usize, r: f64) -> (Vec<usize>, Vec<f64>) {
    let unit = 0.5f64.powi(mesh.refinement() as i32);
    let d: Vec<f64> = mesh.hop_distances(x).iter().map(|&h| h as f64 * unit).collect();
    ((0..mesh.vertex_count()).filter(|&k| d[k] < r).collect(), d)
}

/// Expected exit time from the open ball `B(x, r)` solving `L u = 1` inside.
pub fn exit_time_oracle(mesh: &GasketMesh, x: usize, r: f64) -> f64 {
    let (inside, _) = ball(mesh, x, r);
    let pos: std::collections::HashMap<usize, usize> = inside.iter().enumerate().map(|(a, &k)| (k, a)).collect();
    let rate = time_scale(mesh.refinement());
    let n = inside.len();
    let mut l = Mat::<f64>::zeros(n, n);
    for (a, &k) in inside.iter().enumerate() {
        l[(a, a)] = rate;
        let nb = mesh.neighbors(k);
        for w in nb {
            if let Some(&b) = pos.get(w) {
                l[(a, b)] -= rate / nb.len() as f64;
            }
        }
    }
    let rhs = Mat::<f64>::from_fn(n, 1, |_, _| 1.0);
    let u = l.partial_piv_lu().solve(&rhs);
    u[(pos[&x], 0)]
}

/// Mean exit time of the walk from `B(x, r)` for each start and radius.
pub fn mean_exit_time(
    mesh: &GasketMesh,
    starts: &[usize],
    radii: &[f64],
    trials: u64,
    seed: u64,
) -> Result<Vec<ExitTimeRow>, MonteCarloError> {
    let unit = 0.5f64.powi(mesh.refinement() as i32);
    if let Some(&r) = radii.iter().find(|&&r| r < unit) {
        return Err(MonteCarloError::Resolution { r, unit });
    }
    let rate = time_scale(mesh.refinement());
    let mut rows = Vec::new();
    for (ri, &r) in radii.iter().enumerate() {
        for (si, &x) in starts.iter().enumerate() {
            let (_, d) = ball(mesh, x, r);
            let stream = ((ri as u64) << 48) | ((si as u64) << 32);
            let acc: MeanVar = (0..trials)
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream_rng(seed, stream | k);
                    let mut clock = 0.0;
                    let mut y = x;
                    while d[y] < r {
                        let hold: f64 = Exp1.sample(&mut rng);
                        clock += hold / rate;
                        let nb = mesh.neighbors(y);
                        y = nb[rng.random_range(0..nb.len())];
                    }
                    clock
                })
                .collect::<Vec<f64>>()
                .into_iter()
                .collect();
            rows.push(ExitTimeRow {
                r,
                start: mesh.vertex(x),
                mean: acc.mean,
                stderr: acc.stderr(),
                trials,
                oracle: exit_time_oracle(mesh, x, r),
            });
        }
    }
    Ok(rows)
}

/// Largest mean over starts for each radius, in input radius order.
pub fn sup_over_starts(rows: &[ExitTimeRow]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for row in rows {
        match out.iter_mut().find(|(r, _)| *r == row.r) {
            Some((_, m)) => *m = m.max(row.mean),
            None => out.push((row.r, row.mean)),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// exponential formula

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpFormulaCheck {
    pub mean: f64,
    pub stderr: f64,
    pub closed_form: f64,
    pub clouds: u64,
}

impl ExpFormulaCheck {
    pub fn z_score(&self) -> f64 {
        if self.stderr == 0.0 {
            if (self.mean - self.closed_form).abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - self.closed_form) / self.stderr
        }
    }
}

/// `E exp(-sum_i f(y_i))` over clouds on `window` against
/// `exp(-nu sum_cells 3^-n (1 - e^{-f}))`, `f` read at cell points.
pub fn exponential_formula_check(
    window: &GasketMesh,
    intensity: f64,
    f: &(dyn Fn(&LatticePoint) -> f64 + Sync),
    clouds: u64,
    seed: u64,
) -> Result<ExpFormulaCheck, MonteCarloError> {
    let cell_mass = 3f64.powi(-(window.refinement() as i32));
    let exponent: f64 = window
        .cells()
        .iter()
        .map(|&c| cell_mass * -(-f(&crate::potentials::cell_point(c, window.refinement()))).exp_m1())
        .sum();
    let samples = (0..clouds)
        .into_par_iter()
        .map(|k| {
            let cloud = sample_cloud_with(intensity, window, k, &mut stream_rng(seed, k))?;
            Ok((-cloud.points.iter().map(f).sum::<f64>()).exp())
        })
        .collect::<Result<Vec<f64>, MonteCarloError>>()?;
    let acc: MeanVar = samples.into_iter().collect();
    Ok(ExpFormulaCheck {
        mean: acc.mean,
        stderr: acc.stderr(),
        closed_form: (-intensity * exponent).exp(),
        clouds,
    })
}

/// `y -> int_0^t W(X_s, y) ds` along a walk path.
pub fn path_profile_functional<'a>(
    path: &'a WalkPath,
    mesh: &'a GasketMesh,
    profile: &'a ProfileSpec,
    t: f64,
) -> impl Fn(&LatticePoint) -> f64 + Sync + 'a {
    move |y| path.integrate(t, |k| profile_eval(profile, &mesh.vertex(k), y))
}

// ---------------------------------------------------------------------------
// annealed estimates

pub const TRANSFORMS: [&str; 4] = ["L_D", "L_N", "L_Dstar", "L_Nstar"];

/// Four-transform results for `clouds` clouds at several levels, with common
/// random numbers: cloud `r` is sampled once on the largest `G_M` and
/// restricted to each level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnealedRun {
    pub levels: Vec<u32>,
    pub ts: Vec<f64>,
    pub intensity: f64,
    pub seed: u64,
    /// `results[r][k]` is cloud `r` at `levels[k]`.
    pub results: Vec<Vec<SuiteResult>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Estimate {
    pub level: u32,
    pub t: f64,
    pub estimator: String,
    pub mean: f64,
    pub stderr: f64,
    pub trials: u64,
    pub seed: u64,
}

pub fn annealed_suite(
    ctxs: &[SuiteContext],
    intensity: f64,
    perturbation: &Perturbation,
    ts: &[f64],
    clouds: u64,
    seed: u64,
) -> Result<AnnealedRun, MonteCarloError> {
    let window = ctxs
        .iter()
        .max_by_key(|c| c.level)
        .map(|c| &c.base)
        .ok_or_else(|| MonteCarloError::Invalid("no levels".into()))?;
    let results = (0..clouds)
        .into_par_iter()
        .map(|r| {
            let cloud = sample_cloud_with(intensity, window, r, &mut stream_rng(seed, r))?;
            ctxs.iter()
                .map(|ctx| Ok(four_transform_suite(ctx, &cloud.restrict(ctx.level), perturbation, ts)?))
                .collect::<Result<Vec<_>, MonteCarloError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AnnealedRun {
        levels: ctxs.iter().map(|c| c.level).collect(),
        ts: ts.to_vec(),
        intensity,
        seed,
        results,
    })
}

/// The suite on a given list of clouds (no sampling).
pub fn suite_on_clouds(
    ctx: &SuiteContext,
    clouds: &[PoissonCloud],
    perturbation: &Perturbation,
    ts: &[f64],
) -> Result<Vec<SuiteResult>, MonteCarloError> {
    clouds
        .par_iter()
        .map(|c| Ok(four_transform_suite(ctx, &c.restrict(ctx.level), perturbation, ts)?))
        .collect()
}

impl AnnealedRun {
    /// Samples of transform `which` (index into [`TRANSFORMS`]) at level
    /// index `k` and time index `ti`.
    pub fn samples(&self, which: usize, k: usize, ti: usize) -> Vec<f64> {
        self.results
            .iter()
            .map(|row| {
                let r = &row[k];
                [&r.l_d, &r.l_n, &r.l_dstar, &r.l_nstar][which][ti]
            })
            .collect()
    }

    pub fn estimates(&self) -> Vec<Estimate> {
        let mut out = Vec::new();
        for (k, &level) in self.levels.iter().enumerate() {
            for (ti, &t) in self.ts.iter().enumerate() {
                for (w, name) in TRANSFORMS.iter().enumerate() {
                    let acc: MeanVar = self.samples(w, k, ti).into_iter().collect();
                    out.push(Estimate {
                        level,
                        t,
                        estimator: name.to_string(),
                        mean: acc.mean,
                        stderr: acc.stderr(),
                        trials: acc.count,
                        seed: self.seed,
                    });
                }
            }
        }
        out
    }

    /// Smallest `L_N - L_D` and `L_N* - L_D*` over all clouds, levels and times.
    pub fn min_nd_gap(&self) -> (f64, f64) {
        let mut gap = (f64::INFINITY, f64::INFINITY);
        for r in self.results.iter().flatten() {
            for ti in 0..r.t.len() {
                gap.0 = gap.0.min(r.l_n[ti] - r.l_d[ti]);
                gap.1 = gap.1.min(r.l_nstar[ti] - r.l_dstar[ti]);
            }
        }
        gap
    }

    /// Mean `|L_N - L_D|` per level at time index `ti`.
    pub fn mean_abs_nd(&self, ti: usize) -> Vec<f64> {
        (0..self.levels.len())
            .map(|k| {
                let d = self.samples(0, k, ti);
                let n = self.samples(1, k, ti);
                n.iter().zip(&d).map(|(a, b)| (a - b).abs()).sum::<f64>() / d.len().max(1) as f64
            })
            .collect()
    }

    /// Paired differences `L(M_{k+1}) - L(M_k)` as (mean, stderr).
    pub fn paired_steps(&self, which: usize, ti: usize) -> Vec<(f64, f64)> {
        (0..self.levels.len().saturating_sub(1))
            .map(|k| {
                let a = self.samples(which, k, ti);
                let b = self.samples(which, k + 1, ti);
                let acc: MeanVar = a.iter().zip(&b).map(|(x, y)| y - x).collect();
                (acc.mean, acc.stderr())
            })
            .collect()
    }

    /// Nonincreasing within `band` standard errors of the paired steps.
    pub fn nonincreasing(&self, which: usize, ti: usize, band: f64) -> bool {
        self.paired_steps(which, ti).iter().all(|&(m, se)| m <= band * se)
    }

    /// `Var L(M_{k+1}) / Var L(M_k)`.
    pub fn variance_ratios(&self, which: usize, ti: usize) -> Vec<f64> {
        let vars: Vec<f64> = (0..self.levels.len())
            .map(|k| self.samples(which, k, ti).into_iter().collect::<MeanVar>().variance())
            .collect();
        vars.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_var_merge_matches_sequential() {
        let xs: Vec<f64> = (0..50).map(|k| ((k * 37) % 11) as f64 * 0.3).collect();
        let all: MeanVar = xs.iter().copied().collect();
        let mut a: MeanVar = xs[..17].iter().copied().collect();
        let b: MeanVar = xs[17..].iter().copied().collect();
        a.merge(&b);
        assert_eq!(a.count, all.count);
        assert!((a.mean - all.mean).abs() < 1e-12);
        assert!((a.variance() - all.variance()).abs() < 1e-12);
    }

    #[test]
    fn wilson_contains_estimate() {
        let (lo, hi) = wilson_interval(30, 100, 1.96);
        assert!(lo < 0.3 && 0.3 < hi);
        assert_eq!(wilson_interval(0, 100, 1.96).0, 0.0);
    }

    #[test]
    fn identity_subordinator_is_deterministic_clock() {
        let grid = [0.0, 0.5, 1.25, 3.0];
        let s = sample_subordinator_path(&SubordinatorSpec::Identity, &grid, 9).unwrap();
        assert_eq!(s, grid.to_vec());
    }

    #[test]
    fn custom_family_is_unsupported() {
        let spec = SubordinatorSpec::custom("sqrt", |l| l.sqrt());
        let err = sample_subordinator_path(&spec, &[0.0, 1.0], 1).unwrap_err();
        assert!(matches!(err, MonteCarloError::Unsupported(_)));
    }

    #[test]
    fn zero_horizon_walk() {
        let mesh = GasketMesh::build(0, 2).unwrap();
        let p = simulate_walk(&mesh, 3, 0.0, 1);
        assert_eq!(p.states, vec![3]);
    }

    #[test]
    fn unit_ball_exit_is_one_holding_time() {
        let mesh = GasketMesh::build(1, 2).unwrap();
        let x = mesh.index_of(&LatticePoint::new(2, 1, 2)).unwrap();
        let rate = time_scale(2);
        assert!((exit_time_oracle(&mesh, x, 0.25) - 1.0 / rate).abs() < 1e-14);
        let rows = mean_exit_time(&mesh, &[x], &[0.25], 20_000, 3).unwrap();
        assert!((rows[0].mean - 1.0 / rate).abs() < 4.0 * rows[0].stderr);
        assert!(mean_exit_time(&mesh, &[x], &[0.1], 10, 3).is_err());
    }
}
