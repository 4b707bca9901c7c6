//! Exact integer geometry of the one-sided infinite Sierpinski gasket.
//!
//! Points are stored in skew lattice coordinates: a point `(i, j)` at level
//! `n` is `i * 2^-n * a2 + j * 2^-n * a3` with `a2 = (1, 0)` and
//! `a3 = (1/2, sqrt(3)/2)`. Upward cells of side `2^k` (in units of the
//! point level) have lower-left corners on the `2^k` lattice, and the cell
//! `(I, J)` belongs to the gasket iff `I & J == 0`.
//!
//! Everything here is integer or rational arithmetic, so projections and
//! fibers are exact.

use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use num_rational::Ratio;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact rational used for distances and masses.
pub type Rational = Ratio<i128>;

/// Largest `M + n` accepted by [`GasketMesh::build`].
pub const DEFAULT_MESH_CAP: u32 = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GasketError {
    #[error("point {0} is not on the gasket")]
    NotOnGasket(LatticePoint),
    #[error("point {point} is not a vertex of the level-{level} lattice")]
    NotOnLattice { point: LatticePoint, level: u32 },
    #[error("point {point} is outside G_{level}")]
    OutsideBlowUp { point: LatticePoint, level: u32 },
    #[error("mesh M={level} n={refinement} exceeds the size cap M+n <= {cap}")]
    MeshTooLarge {
        level: u32,
        refinement: u32,
        cap: u32,
    },
    #[error("point {0} is not a vertex of this mesh")]
    NotInMesh(LatticePoint),
    #[error("domain error: {0}")]
    Domain(String),
}

/// A lattice point `i * 2^-n * a2 + j * 2^-n * a3`.
///
/// Equality and hashing use the reduced representation, so `(2, 0, 1)` and
/// `(1, 0, 0)` are the same point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatticePoint {
    pub i: u64,
    pub j: u64,
    pub n: u32,
}

impl LatticePoint {
    pub const ORIGIN: LatticePoint = LatticePoint { i: 0, j: 0, n: 0 };

    pub fn new(i: u64, j: u64, n: u32) -> Self {
        Self { i, j, n }
    }

    /// Coarsest representation of the same point.
    pub fn reduced(&self) -> Self {
        let mut p = *self;
        while p.n > 0 && p.i % 2 == 0 && p.j % 2 == 0 {
            p.i /= 2;
            p.j /= 2;
            p.n -= 1;
        }
        p
    }

    /// Same point expressed at level `n`, if it is representable there.
    pub fn at_level(&self, n: u32) -> Option<Self> {
        if n >= self.n {
            let f = 1u64 << (n - self.n);
            Some(Self::new(self.i * f, self.j * f, n))
        } else {
            let f = 1u64 << (self.n - n);
            (self.i % f == 0 && self.j % f == 0).then(|| Self::new(self.i / f, self.j / f, n))
        }
    }

    /// True iff the point is a vertex of some gasket cell of its own level.
    pub fn on_gasket(&self) -> bool {
        let (i, j) = (self.i, self.j);
        cell_is_in_gasket(i, j)
            || (i > 0 && cell_is_in_gasket(i - 1, j))
            || (j > 0 && cell_is_in_gasket(i, j - 1))
    }

    /// Geodesic distance to the origin, `(i + j) * 2^-n`.
    pub fn distance_to_origin(&self) -> Rational {
        Rational::new((self.i + self.j) as i128, 1i128 << self.n)
    }

    /// Euclidean coordinates, for export and plotting only.
    pub fn to_cartesian(&self) -> (f64, f64) {
        let h = (self.n as f64).exp2();
        let (i, j) = (self.i as f64 / h, self.j as f64 / h);
        (i + 0.5 * j, j * 3f64.sqrt() / 2.0)
    }
}

impl PartialEq for LatticePoint {
    fn eq(&self, other: &Self) -> bool {
        let (a, b) = (self.reduced(), other.reduced());
        a.i == b.i && a.j == b.j && a.n == b.n
    }
}

impl Eq for LatticePoint {}

impl Hash for LatticePoint {
    fn hash<H: Hasher>(&self, state: &mut H) {
        let r = self.reduced();
        (r.i, r.j, r.n).hash(state);
    }
}

impl fmt::Display for LatticePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})/2^{}", self.i, self.j, self.n)
    }
}

/// Vertex label in `{A, B, C}`; canonical indices 0, 1, 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
    C,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::A, Label::B, Label::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Label {
        Self::ALL[k % 3]
    }

    /// The three-cycle `A -> B -> C -> A`.
    pub fn p1(self) -> Label {
        Self::from_index(self.index() + 1)
    }

    /// The three-cycle `A -> C -> B -> A`.
    pub fn p2(self) -> Label {
        Self::from_index(self.index() + 2)
    }
}

/// Membership of the upward cell `(I, J)` in the infinite gasket.
pub fn cell_is_in_gasket(i: u64, j: u64) -> bool {
    i & j == 0
}

/// Label of an integer lattice point given in unit coordinates.
fn unit_label(i: u64, j: u64) -> Label {
    Label::from_index(((i % 3) + 3 - (j % 3)) as usize)
}

/// Label of a point of `V_M`, i.e. a corner of some size-`2^M` cell.
pub fn vertex_label(p: &LatticePoint, level: u32) -> Result<Label, GasketError> {
    let s = 1u64
        .checked_shl(level + p.n)
        .ok_or_else(|| GasketError::Domain("scale overflow".into()))?;
    if p.i % s != 0 || p.j % s != 0 {
        return Err(GasketError::NotOnLattice { point: *p, level });
    }
    if !cell_is_in_gasket(p.i / s, p.j / s)
        && !(p.i >= s && cell_is_in_gasket(p.i / s - 1, p.j / s))
        && !(p.j >= s && cell_is_in_gasket(p.i / s, p.j / s - 1))
    {
        return Err(GasketError::NotOnGasket(*p));
    }
    let unit = 1u64 << p.n;
    Ok(unit_label(p.i / unit, p.j / unit))
}

/// Offset (in units of the cell side) of the corner of `G_M` carrying `label`.
fn blowup_corner_offset(level: u32, label: Label) -> (u64, u64) {
    let side = 1u64 << level;
    for (off, (i, j)) in [(0, 0), (1, 0), (0, 1)].into_iter().zip([(0, 0), (side, 0), (0, side)]) {
        if unit_label(i, j) == label {
            return off;
        }
    }
    unreachable!("corners of G_M carry three distinct labels")
}

/// Labels of the corners (lower-left, right, top) of the size-`2^M` cell `(I, J)`.
fn cell_corner_labels(level: u32, ci: u64, cj: u64) -> [Label; 3] {
    let side = 1u64 << level;
    [
        unit_label(ci * side, cj * side),
        unit_label((ci + 1) * side, cj * side),
        unit_label(ci * side, (cj + 1) * side),
    ]
}

/// Projection onto `G_M` by label-matching barycentric transfer.
///
/// The output lives at the same level as the input. Points of `V_M` go to the
/// corner of `G_M` with the same label.
pub fn project(p: &LatticePoint, level: u32) -> Result<LatticePoint, GasketError> {
    let s = 1u64
        .checked_shl(level + p.n)
        .ok_or_else(|| GasketError::Domain("scale overflow".into()))?;
    let (mut ci, mut cj) = (p.i / s, p.j / s);
    let (mut u, mut v) = (p.i % s, p.j % s);
    if u == 0 && v == 0 && !cell_is_in_gasket(ci, cj) {
        // a corner of V_M whose lower-left cell is a hole: use a cell it tops or ends
        if ci > 0 && cell_is_in_gasket(ci - 1, cj) {
            (ci, u) = (ci - 1, s);
        } else if cj > 0 && cell_is_in_gasket(ci, cj - 1) {
            (cj, v) = (cj - 1, s);
        }
    }
    if !cell_is_in_gasket(ci, cj) || u + v > s || !p.on_gasket() {
        return Err(GasketError::NotOnGasket(*p));
    }
    let labels = cell_corner_labels(level, ci, cj);
    let weights = [s - u - v, u, v];
    let (mut x, mut y) = (0u64, 0u64);
    for (w, l) in weights.into_iter().zip(labels) {
        let (ox, oy) = blowup_corner_offset(level, l);
        x += w * ox;
        y += w * oy;
    }
    Ok(LatticePoint::new(x, y, p.n))
}

/// One element of a fiber with the number of size-`2^M` cells that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiberPoint {
    pub point: LatticePoint,
    pub multiplicity: u32,
}

/// Preimages of a point of `G_M` inside `G_{M+K}`.
#[derive(Debug, Clone, Serialize)]
pub struct Fiber {
    pub base: LatticePoint,
    pub level: u32,
    pub shells: u32,
    pub points: Vec<FiberPoint>,
}

impl Fiber {
    /// Sum of multiplicities; always `3^K`.
    pub fn total_multiplicity(&self) -> u64 {
        self.points.iter().map(|f| f.multiplicity as u64).sum()
    }

    /// True iff the base is a corner of `G_M`, so preimages may be shared.
    pub fn is_vertex_fiber(&self) -> bool {
        let s = 1u64 << (self.level + self.base.n);
        self.base.i % s == 0 && self.base.j % s == 0
    }
}

/// Size-`2^level` gasket cells inside `G_{level+shells}` in enumeration order.
pub fn blowup_cells(shells: u32) -> impl Iterator<Item = (u64, u64)> {
    let side = 1u64 << shells;
    (0..side).flat_map(move |i| (0..side - i).filter(move |&j| cell_is_in_gasket(i, j)).map(move |j| (i, j)))
}

/// All preimages of `q` under `project(., M)` lying in `G_{M+K}`.
///
/// Each size-`2^M` cell contributes exactly one preimage; shared corners are
/// merged and carry their multiplicity.
pub fn fiber(q: &LatticePoint, level: u32, shells: u32) -> Result<Fiber, GasketError> {
    let s = 1u64 << (level + q.n);
    if q.i + q.j > s {
        return Err(GasketError::OutsideBlowUp { point: *q, level });
    }
    if !q.on_gasket() {
        return Err(GasketError::NotOnGasket(*q));
    }
    let weights = [s - q.i - q.j, q.i, q.j];
    let base_labels = cell_corner_labels(level, 0, 0);
    let mut points: Vec<FiberPoint> = Vec::new();
    let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
    for (ci, cj) in blowup_cells(shells) {
        let labels = cell_corner_labels(level, ci, cj);
        let offsets = [(0u64, 0u64), (1, 0), (0, 1)];
        let (mut x, mut y) = (ci * s, cj * s);
        for (w, bl) in weights.iter().zip(base_labels) {
            let k = labels.iter().position(|&l| l == bl).expect("labels are a permutation");
            x += w * offsets[k].0;
            y += w * offsets[k].1;
        }
        match seen.get(&(x, y)) {
            Some(&idx) => points[idx].multiplicity += 1,
            None => {
                seen.insert((x, y), points.len());
                points.push(FiberPoint {
                    point: LatticePoint::new(x, y, q.n),
                    multiplicity: 1,
                });
            }
        }
    }
    Ok(Fiber {
        base: *q,
        level,
        shells,
        points,
    })
}

// Level-1 subdivision graph of a cell: 0,1,2 corners, 3 = m01, 4 = m02, 5 = m12.
// Entries are hop counts with edges of half the cell side.
const SUBDIVISION_DIST: [[u64; 6]; 6] = [
    [0, 2, 2, 1, 1, 2],
    [2, 0, 2, 1, 2, 1],
    [2, 2, 0, 2, 1, 1],
    [1, 1, 2, 0, 1, 1],
    [1, 2, 1, 1, 0, 1],
    [2, 1, 1, 1, 1, 0],
];
const CHILD_CORNERS: [[usize; 3]; 3] = [[0, 3, 4], [3, 1, 5], [4, 5, 2]];

fn child_of(u: u64, v: u64, half: u64) -> (usize, u64, u64) {
    if u >= half {
        (1, u - half, v)
    } else if v >= half {
        (2, u, v - half)
    } else {
        (0, u, v)
    }
}

/// Distances from local offset `(u, v)` to the three corners of a cell of side `s`.
fn corner_distances(u: u64, v: u64, s: u64) -> [u64; 3] {
    if s == 1 {
        return match (u, v) {
            (0, 0) => [0, 1, 1],
            (1, 0) => [1, 0, 1],
            (0, 1) => [1, 1, 0],
            _ => unreachable!("unit cell offsets are corners"),
        };
    }
    let half = s / 2;
    let (c, cu, cv) = child_of(u, v, half);
    let inner = corner_distances(cu, cv, half);
    let mut out = [u64::MAX; 3];
    for (target, slot) in out.iter_mut().enumerate() {
        for (k, d) in inner.iter().enumerate() {
            *slot = (*slot).min(d + half * SUBDIVISION_DIST[CHILD_CORNERS[c][k]][target]);
        }
    }
    out
}

fn pair_distance(a: (u64, u64), b: (u64, u64), s: u64) -> u64 {
    if a == b {
        return 0;
    }
    if s == 1 {
        return 1;
    }
    let half = s / 2;
    let (ca, au, av) = child_of(a.0, a.1, half);
    let (cb, bu, bv) = child_of(b.0, b.1, half);
    if ca == cb {
        return pair_distance((au, av), (bu, bv), half);
    }
    let da = corner_distances(au, av, half);
    let db = corner_distances(bu, bv, half);
    let mut best = u64::MAX;
    for (ka, x) in da.iter().enumerate() {
        for (kb, y) in db.iter().enumerate() {
            let mid = half * SUBDIVISION_DIST[CHILD_CORNERS[ca][ka]][CHILD_CORNERS[cb][kb]];
            best = best.min(x + mid + y);
        }
    }
    best
}

/// Exact intrinsic geodesic distance between two gasket lattice points.
///
/// Recurses down the cell hierarchy; a shortest path between points of
/// different children leaves and enters through child corners.
pub fn gasket_distance(p: &LatticePoint, q: &LatticePoint) -> Rational {
    let n = p.n.max(q.n);
    let a = p.at_level(n).expect("refinement is exact");
    let b = q.at_level(n).expect("refinement is exact");
    let reach = (a.i + a.j).max(b.i + b.j).max(1);
    let s = reach.next_power_of_two();
    Rational::new(pair_distance((a.i, a.j), (b.i, b.j), s) as i128, 1i128 << n)
}

/// Level-`n` graph approximation of `G_M`.
#[derive(Debug, Clone)]
pub struct GasketMesh {
    level: u32,
    refinement: u32,
    vertices: Vec<LatticePoint>,
    index: HashMap<(u64, u64), usize>,
    adjacency: Vec<Vec<usize>>,
    cells: Vec<(u64, u64)>,
    incidence: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct MeshExport {
    #[serde(rename = "M")]
    pub level: u32,
    pub n: u32,
    pub vertices: Vec<[u64; 2]>,
    pub edges: Vec<[usize; 2]>,
    pub weights: Vec<f64>,
}

impl GasketMesh {
    pub fn build(level: u32, refinement: u32) -> Result<Self, GasketError> {
        Self::build_with_cap(level, refinement, DEFAULT_MESH_CAP)
    }

    pub fn build_with_cap(level: u32, refinement: u32, cap: u32) -> Result<Self, GasketError> {
        if level + refinement > cap {
            return Err(GasketError::MeshTooLarge {
                level,
                refinement,
                cap,
            });
        }
        let depth = level + refinement;
        let side = 1u64 << depth;
        let mut cells = Vec::with_capacity(3usize.pow(depth));
        for ci in 0..side {
            for cj in 0..side - ci {
                if cell_is_in_gasket(ci, cj) {
                    cells.push((ci, cj));
                }
            }
        }
        let mut corners: Vec<(u64, u64)> = cells
            .iter()
            .flat_map(|&(ci, cj)| [(ci, cj), (ci + 1, cj), (ci, cj + 1)])
            .collect();
        corners.sort_unstable();
        corners.dedup();
        let index: HashMap<(u64, u64), usize> = corners.iter().enumerate().map(|(k, &c)| (c, k)).collect();
        let mut adjacency = vec![Vec::with_capacity(4); corners.len()];
        let mut incidence = vec![0u32; corners.len()];
        for &(ci, cj) in &cells {
            let tri = [index[&(ci, cj)], index[&(ci + 1, cj)], index[&(ci, cj + 1)]];
            for a in 0..3 {
                incidence[tri[a]] += 1;
                for b in 0..3 {
                    if a != b {
                        adjacency[tri[a]].push(tri[b]);
                    }
                }
            }
        }
        for nb in adjacency.iter_mut() {
            nb.sort_unstable();
            nb.dedup();
        }
        let vertices = corners.iter().map(|&(i, j)| LatticePoint::new(i, j, refinement)).collect();
        Ok(Self {
            level,
            refinement,
            vertices,
            index,
            adjacency,
            cells,
            incidence,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn refinement(&self) -> u32 {
        self.refinement
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn vertices(&self) -> &[LatticePoint] {
        &self.vertices
    }

    pub fn vertex(&self, k: usize) -> LatticePoint {
        self.vertices[k]
    }

    pub fn cells(&self) -> &[(u64, u64)] {
        &self.cells
    }

    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.adjacency[k]
    }

    pub fn degree(&self, k: usize) -> usize {
        self.adjacency[k].len()
    }

    /// Number of level-`n` cells incident to vertex `k` (1 or 2).
    pub fn incidence(&self, k: usize) -> u32 {
        self.incidence[k]
    }

    /// Side of `G_M` in mesh units.
    pub fn side(&self) -> u64 {
        1u64 << (self.level + self.refinement)
    }

    /// Index of a point, at any level, if it is a mesh vertex.
    pub fn index_of(&self, p: &LatticePoint) -> Option<usize> {
        let q = p.at_level(self.refinement)?;
        self.index.get(&(q.i, q.j)).copied()
    }

    pub fn contains(&self, p: &LatticePoint) -> bool {
        self.index_of(p).is_some()
    }

    /// Lumped Hausdorff mass: `incidence / 3 * 3^-n`.
    pub fn vertex_weight(&self, k: usize) -> f64 {
        self.incidence[k] as f64 / 3.0 / 3f64.powi(self.refinement as i32)
    }

    pub fn vertex_weight_exact(&self, k: usize) -> Rational {
        Rational::new(self.incidence[k] as i128, 3 * 3i128.pow(self.refinement))
    }

    pub fn vertex_weights(&self) -> Vec<f64> {
        (0..self.vertex_count()).map(|k| self.vertex_weight(k)).collect()
    }

    pub fn total_mass_exact(&self) -> Rational {
        (0..self.vertex_count())
            .map(|k| self.vertex_weight_exact(k))
            .fold(Rational::zero(), |a, b| a + b)
    }

    /// Indices of the corners `0`, `2^M a2`, `2^M a3`.
    pub fn corner_indices(&self) -> [usize; 3] {
        let s = self.side();
        [self.index[&(0, 0)], self.index[&(s, 0)], self.index[&(0, s)]]
    }

    /// Mesh vertices that are points of `V_M`.
    pub fn is_blowup_vertex(&self, k: usize) -> bool {
        let s = self.side();
        let p = self.vertices[k];
        p.i % s == 0 && p.j % s == 0
    }

    /// Hop distances from `source` by breadth-first search.
    pub fn hop_distances(&self, source: usize) -> Vec<u64> {
        let mut dist = vec![u64::MAX; self.vertex_count()];
        let mut queue = std::collections::VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(v) = queue.pop_front() {
            for &w in &self.adjacency[v] {
                if dist[w] == u64::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut edges = Vec::new();
        for (u, nb) in self.adjacency.iter().enumerate() {
            for &v in nb {
                if u < v {
                    edges.push([u, v]);
                }
            }
        }
        edges
    }

    pub fn export(&self) -> MeshExport {
        MeshExport {
            level: self.level,
            n: self.refinement,
            vertices: self.vertices.iter().map(|p| [p.i, p.j]).collect(),
            edges: self.edges(),
            weights: self.vertex_weights(),
        }
    }
}

/// Shortest-path distance on the mesh graph, in gasket units.
pub fn geodesic_distance(u: &LatticePoint, v: &LatticePoint, mesh: &GasketMesh) -> Result<Rational, GasketError> {
    let a = mesh.index_of(u).ok_or(GasketError::NotInMesh(*u))?;
    let b = mesh.index_of(v).ok_or(GasketError::NotInMesh(*v))?;
    let hops = mesh.hop_distances(a)[b];
    Ok(Rational::new(hops as i128, 1i128 << mesh.refinement()))
}

fn is_dyadic(r: &Rational) -> bool {
    let d = *r.denom();
    d > 0 && d & (d - 1) == 0
}

/// Number of cells of a depth-`depth` gasket triangle whose index sum is at least `threshold`.
fn cells_beyond(depth: u32, threshold: i128) -> i128 {
    if threshold <= 0 {
        return 3i128.pow(depth);
    }
    if threshold >= 1i128 << depth {
        return 0;
    }
    let half = 1i128 << (depth - 1);
    cells_beyond(depth - 1, threshold) + 2 * cells_beyond(depth - 1, threshold - half)
}

/// Mass fraction of `G_0` at distance at least `c` from the origin.
///
/// Follows the doubling map on the binary expansion of `c`; the orbit of a
/// rational is eventually periodic, which closes the affine recursion.
pub fn far_mass_fraction(c: Rational) -> Rational {
    let one = Rational::one();
    let two_thirds = Rational::new(2, 3);
    if c <= Rational::zero() {
        return one;
    }
    if c >= one {
        return Rational::zero();
    }
    // f(c_0) = offset + slope * f(c_k)
    let mut offset = Rational::zero();
    let mut slope = one;
    let mut visited: Vec<(Rational, Rational, Rational)> = Vec::new();
    let mut state = c;
    loop {
        if state.is_zero() {
            return offset + slope;
        }
        if let Some(&(_, o, s)) = visited.iter().find(|(st, _, _)| *st == state) {
            // both o + s f(x) and offset + slope f(x) equal f(c)
            let fx = (offset - o) / (s - slope);
            return o + s * fx;
        }
        visited.push((state, offset, slope));
        let twice = state * Rational::from_integer(2);
        if state < Rational::new(1, 2) {
            offset += slope * two_thirds;
            slope *= Rational::new(1, 3);
            state = twice;
        } else {
            slope *= two_thirds;
            state = twice - one;
        }
    }
}

/// Mass of the collar `B(0, 2^M) \ B(0, 2^M - r)`.
///
/// Dyadic `r` is resolved by exact cell counting at the level of `r`; other
/// rationals go through the periodic doubling recursion.
pub fn collar_measure(level: u32, r: Rational) -> Result<Rational, GasketError> {
    let outer = Rational::from_integer(1i128 << level);
    if r <= Rational::zero() || r >= outer {
        return Err(GasketError::Domain(format!("collar width {r} outside (0, 2^{level})")));
    }
    if is_dyadic(&r) {
        let k = r.denom().trailing_zeros();
        let depth = level + k;
        let threshold = ((outer - r) * Rational::from_integer(1i128 << k)).to_integer();
        let count = cells_beyond(depth, threshold);
        return Ok(Rational::new(count, 3i128.pow(k)));
    }
    let c = (outer - r) / outer;
    Ok(Rational::from_integer(3i128.pow(level)) * far_mass_fraction(c))
}
