//! Random-walk primitives: step laws, paths with absolute vertices,
//! local times, concatenation, and exhaustive enumeration used as the
//! oracle behind the exact tests.

use crate::numeric::{FastMap, fast_map};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lattice site with up to four coordinates; unused coordinates stay 0.
/// Fixed width keeps sites `Copy` and cheap to hash during enumeration.
pub type Site = [i32; 4];

pub const ORIGIN: Site = [0; 4];

pub fn site_add(a: Site, b: Site) -> Site {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

pub fn site_sub(a: Site, b: Site) -> Site {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
}

pub fn site_neg(a: Site) -> Site {
    [-a[0], -a[1], -a[2], -a[3]]
}

pub fn site_dot(a: Site, h: &[f64; 4]) -> f64 {
    a[0] as f64 * h[0] + a[1] as f64 * h[1] + a[2] as f64 * h[2] + a[3] as f64 * h[3]
}

pub fn site_norm_sup(a: Site) -> i32 {
    a.iter().map(|c| c.abs()).max().unwrap()
}

pub fn site_norm_l2(a: Site) -> f64 {
    (a.iter().map(|&c| (c as f64) * (c as f64)).sum::<f64>()).sqrt()
}

pub fn site_f64(a: Site) -> [f64; 4] {
    [a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64]
}

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("step support is empty")]
    EmptySupport,
    #[error("negative weight on step {0:?}")]
    NegativeWeight(Vec<i32>),
    #[error("mean step is not zero (|mean| = {0:.3e})")]
    NonZeroMean(f64),
    #[error("unit steps ±e_{0} missing from support")]
    MissingUnitSteps(usize),
    #[error("step {0:?} does not match dimension {1}")]
    DimensionMismatch(Vec<i32>, usize),
    #[error("enumeration cap exceeded: {needed} path-steps > cap {cap}")]
    EnumerationCapExceeded { needed: u64, cap: u64 },
}

/// Finite-range zero-mean step law of the underlying walk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepDistribution {
    support: Vec<(Site, f64)>,
    dimension: usize,
    range: i32,
}

impl StepDistribution {
    pub fn support(&self) -> &[(Site, f64)] {
        &self.support
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn range(&self) -> i32 {
        self.range
    }

    /// log E e^{h·X} for a single step; finite for all h.
    pub fn log_mgf(&self, h: &[f64; 4]) -> f64 {
        self.support
            .iter()
            .map(|&(s, p)| p * site_dot(s, h).exp())
            .sum::<f64>()
            .ln()
    }
}

/// Validates and normalizes a raw step list into a `StepDistribution`.
pub fn validate_step_distribution(
    dimension: usize,
    raw: &[(Vec<i32>, f64)],
) -> Result<StepDistribution, LatticeError> {
    if raw.is_empty() {
        return Err(LatticeError::EmptySupport);
    }
    assert!((1..=4).contains(&dimension), "dimension must be 1..=4");
    let mut support: Vec<(Site, f64)> = Vec::with_capacity(raw.len());
    let mut total = 0.0;
    for (vec, w) in raw {
        if *w < 0.0 {
            return Err(LatticeError::NegativeWeight(vec.clone()));
        }
        if vec.len() != dimension || vec.iter().skip(dimension).any(|&c| c != 0) {
            return Err(LatticeError::DimensionMismatch(vec.clone(), dimension));
        }
        if *w == 0.0 {
            continue;
        }
        let mut site = ORIGIN;
        site[..dimension].copy_from_slice(vec);
        support.push((site, *w));
        total += *w;
    }
    if support.is_empty() || total <= 0.0 {
        return Err(LatticeError::EmptySupport);
    }
    for (_, w) in &mut support {
        *w /= total;
    }
    let mut mean = [0.0f64; 4];
    for &(s, p) in &support {
        for k in 0..dimension {
            mean[k] += s[k] as f64 * p;
        }
    }
    let mean_norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    if mean_norm > 1e-12 {
        return Err(LatticeError::NonZeroMean(mean_norm));
    }
    for k in 0..dimension {
        let mut plus = false;
        let mut minus = false;
        for &(s, _) in &support {
            let unit_k = (0..dimension).all(|j| if j == k { s[j].abs() == 1 } else { s[j] == 0 });
            if unit_k {
                if s[k] == 1 {
                    plus = true;
                } else {
                    minus = true;
                }
            }
        }
        if !plus || !minus {
            return Err(LatticeError::MissingUnitSteps(k));
        }
    }
    let range = support.iter().map(|&(s, _)| site_norm_sup(s)).max().unwrap();
    Ok(StepDistribution { support, dimension, range })
}

/// Symmetric simple random walk preset.
pub fn simple_walk(dimension: usize) -> StepDistribution {
    let mut raw = Vec::new();
    let p = 1.0 / (2 * dimension) as f64;
    for k in 0..dimension {
        for sign in [1, -1] {
            let mut v = vec![0; dimension];
            v[k] = sign;
            raw.push((v, p));
        }
    }
    validate_step_distribution(dimension, &raw).expect("SRW preset is valid")
}

/// Finite path on Z^d stored as absolute vertices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatticePath {
    vertices: Vec<Site>,
}

impl LatticePath {
    pub fn from_vertices(vertices: Vec<Site>) -> Self {
        assert!(!vertices.is_empty(), "a path has at least its starting vertex");
        LatticePath { vertices }
    }

    pub fn from_steps(start: Site, steps: &[Site]) -> Self {
        let mut vertices = Vec::with_capacity(steps.len() + 1);
        vertices.push(start);
        let mut cur = start;
        for &s in steps {
            cur = site_add(cur, s);
            vertices.push(cur);
        }
        LatticePath { vertices }
    }

    pub fn vertices(&self) -> &[Site] {
        &self.vertices
    }

    /// Number of steps |γ|.
    pub fn len(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn start(&self) -> Site {
        self.vertices[0]
    }

    pub fn end(&self) -> Site {
        *self.vertices.last().unwrap()
    }

    /// Displacement X(γ) = γ_n − γ_0.
    pub fn displacement(&self) -> Site {
        site_sub(self.end(), self.start())
    }

    pub fn increments(&self) -> impl Iterator<Item = Site> + '_ {
        self.vertices.windows(2).map(|w| site_sub(w[1], w[0]))
    }

    pub fn is_admissible(&self, steps: &StepDistribution) -> bool {
        self.increments()
            .all(|inc| steps.support().iter().any(|&(s, _)| s == inc))
    }

    /// Sub-path over vertex indices `[from, to]`, vertices kept absolute.
    pub fn segment(&self, from: usize, to: usize) -> LatticePath {
        LatticePath::from_vertices(self.vertices[from..=to].to_vec())
    }

    pub fn translate(&self, by: Site) -> LatticePath {
        LatticePath::from_vertices(self.vertices.iter().map(|&v| site_add(v, by)).collect())
    }
}

/// Concatenation γ∘η: η is translated to start at γ's endpoint.
pub fn concatenate(left: &LatticePath, right: &LatticePath) -> LatticePath {
    let shift = site_sub(left.end(), right.start());
    let mut vertices = left.vertices.clone();
    vertices.extend(right.vertices.iter().skip(1).map(|&v| site_add(v, shift)));
    LatticePath::from_vertices(vertices)
}

/// Visit counts ℓ_γ(x) over indices 1..n; the starting vertex at index 0
/// is not counted, which is what makes local times additive under
/// concatenation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalTimeProfile {
    counts: FastMap<Site, u32>,
}

impl LocalTimeProfile {
    pub fn count(&self, site: Site) -> u32 {
        self.counts.get(&site).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &FastMap<Site, u32> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.values().map(|&c| c as u64).sum()
    }
}

pub fn local_time_profile(path: &LatticePath) -> LocalTimeProfile {
    let mut counts = fast_map();
    for &v in path.vertices().iter().skip(1) {
        *counts.entry(v).or_insert(0) += 1;
    }
    LocalTimeProfile { counts }
}

/// Exhaustively enumerates all n-step paths from `start` with their walk
/// probabilities. Total work is counted in path-steps (|support|^n · n)
/// against `cap`; overrunning is an error, never a silent truncation.
pub fn enumerate_paths(
    steps: &StepDistribution,
    n: usize,
    start: Site,
    cap: u64,
) -> Result<Vec<(LatticePath, f64)>, LatticeError> {
    let b = steps.support().len() as u64;
    let mut needed: u64 = 0;
    let mut pow: u64 = 1;
    for _ in 0..n {
        pow = pow.saturating_mul(b);
        needed = needed.saturating_add(pow);
    }
    if needed > cap {
        return Err(LatticeError::EnumerationCapExceeded { needed, cap });
    }
    let mut out = Vec::new();
    let mut stack_sites = vec![start];
    let mut stack_probs = vec![1.0f64];
    enumerate_rec(steps, n, &mut stack_sites, &mut stack_probs, &mut out);
    Ok(out)
}

fn enumerate_rec(
    steps: &StepDistribution,
    n: usize,
    sites: &mut Vec<Site>,
    probs: &mut Vec<f64>,
    out: &mut Vec<(LatticePath, f64)>,
) {
    if sites.len() == n + 1 {
        out.push((LatticePath::from_vertices(sites.clone()), *probs.last().unwrap()));
        return;
    }
    let cur = *sites.last().unwrap();
    let p_cur = *probs.last().unwrap();
    for &(s, p) in steps.support() {
        sites.push(site_add(cur, s));
        probs.push(p_cur * p);
        enumerate_rec(steps, n, sites, probs, out);
        sites.pop();
        probs.pop();
    }
}

/// Streaming depth-first walk over all paths up to `n_max` steps.
/// `enter` sees each non-root node (the path prefix ending at `site`,
/// of length `depth`) and may prune the subtree by returning false.
/// Engines keep incremental state and undo it in `leave`.
pub trait PathVisitor {
    fn enter(&mut self, depth: usize, site: Site, step_index: usize) -> bool;
    fn leave(&mut self, depth: usize, site: Site);
}

pub fn walk_paths<V: PathVisitor>(steps: &StepDistribution, n_max: usize, start: Site, visitor: &mut V) {
    if n_max > 0 {
        walk_rec(steps, n_max, start, 1, visitor);
    }
}

fn walk_rec<V: PathVisitor>(
    steps: &StepDistribution,
    n_max: usize,
    cur: Site,
    depth: usize,
    visitor: &mut V,
) {
    for (idx, &(s, _)) in steps.support().iter().enumerate() {
        let next = site_add(cur, s);
        if visitor.enter(depth, next, idx) {
            if depth < n_max {
                walk_rec(steps, n_max, next, depth + 1, visitor);
            }
            visitor.leave(depth, next);
        }
    }
}

/// Rectangular box of sites with a linear index, shared by environment
/// storage and DP tables.
#[derive(Clone, Debug)]
pub struct BoxRegion {
    lo: Site,
    hi: Site,
    dimension: usize,
    strides: [usize; 4],
    len: usize,
}

impl BoxRegion {
    pub fn new(dimension: usize, lo: Site, hi: Site) -> Self {
        assert!((1..=4).contains(&dimension));
        let mut strides = [0usize; 4];
        let mut len = 1usize;
        for k in 0..dimension {
            assert!(lo[k] <= hi[k], "empty box along axis {k}");
            strides[k] = len;
            len *= (hi[k] - lo[k] + 1) as usize;
        }
        BoxRegion { lo, hi, dimension, strides, len }
    }

    /// Box {|x − center|_∞ ≤ radius} in the first `dimension` coordinates.
    pub fn cube(dimension: usize, center: Site, radius: i32) -> Self {
        let mut lo = ORIGIN;
        let mut hi = ORIGIN;
        for k in 0..dimension {
            lo[k] = center[k] - radius;
            hi[k] = center[k] + radius;
        }
        BoxRegion::new(dimension, lo, hi)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn lo(&self) -> Site {
        self.lo
    }

    pub fn hi(&self) -> Site {
        self.hi
    }

    pub fn contains(&self, site: Site) -> bool {
        (0..self.dimension).all(|k| self.lo[k] <= site[k] && site[k] <= self.hi[k])
            && site[self.dimension..].iter().all(|&c| c == 0)
    }

    pub fn contains_box(&self, other: &BoxRegion) -> bool {
        self.contains(other.lo) && self.contains(other.hi)
    }

    pub fn index(&self, site: Site) -> Option<usize> {
        if !self.contains(site) {
            return None;
        }
        let mut idx = 0usize;
        for k in 0..self.dimension {
            idx += (site[k] - self.lo[k]) as usize * self.strides[k];
        }
        Some(idx)
    }

    pub fn site_at(&self, mut idx: usize) -> Site {
        let mut site = ORIGIN;
        for k in (0..self.dimension).rev() {
            site[k] = self.lo[k] + (idx / self.strides[k]) as i32;
            idx %= self.strides[k];
        }
        site
    }

    pub fn iter_sites(&self) -> impl Iterator<Item = Site> + '_ {
        (0..self.len).map(|i| self.site_at(i))
    }
}
