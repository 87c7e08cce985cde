//! Surcharge geometry, skeleton coarse-graining, cone points, irreducible
//! decomposition of cone-confined paths, empirical irreducible-step kernels,
//! and the forest-count bound used in coarse-graining estimates.
//!
//! The central objects are a positive cone `Y` built from the surcharge
//! function s_h(x) = tau_lambda(x) - h.x and the splitting of a path at its
//! cone points. Pieces between consecutive cone points are irreducible and
//! feed an empirical renewal kernel f(x, n).

use crate::environment::{phi_beta, PotentialLaw};
use crate::lattice::{
    site_dot, site_neg, site_norm_l2, site_sub, walk_paths, BoxRegion, LatticePath,
    PathVisitor, Site, StepDistribution, ORIGIN,
};
use crate::numeric::{fast_map, linear_fit, FastMap, KahanSum};
use crate::partition::{annealed_log_ladder, annealed_log_weight, AnnealedTables, PartitionError, PolymerModel};
use crate::renewal::{RenewalError, RenewalKernel};
use thiserror::Error;

/// Relative tolerance for cone membership and surcharge clamping.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DecompositionError {
    #[error("tau evaluator has no data for the requested dimension {0}")]
    DirectionNotTabulated(usize),
    #[error("coarse-graining scale {k} below the minimum r_lambda = {r_lambda}")]
    ScaleTooSmall { k: f64, r_lambda: f64 },
    #[error("only {found} irreducible pieces collected, need at least {needed}")]
    InsufficientConePoints { found: usize, needed: usize },
    #[error("cone construction failed: {0}")]
    BadCone(String),
    #[error("operation only implemented in dimension 2, got {0}")]
    DimensionUnsupported(usize),
    #[error("estimated lambda(h) = {0} is not positive")]
    LambdaNonpositive(f64),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Renewal(#[from] RenewalError),
}

// ---------------------------------------------------------------------------
// Surcharge geometry.

/// Evaluator for the inverse correlation length tau_lambda. Closed forms
/// serve the test models; polymer models inject an angular direction table
/// (dimension 2) built from the boundary of K_lambda.
#[derive(Clone, Debug)]
pub enum TauEvaluator {
    Euclidean { scale: f64 },
    WeightedL2 { weights: [f64; 4] },
    /// Values tau(u_k) on unit directions u_k at angles 2 pi k / len,
    /// interpolated linearly in the angle. Dimension 2 only.
    DirectionTable { values: Vec<f64> },
}

impl TauEvaluator {
    pub fn tau(&self, x: [f64; 4]) -> f64 {
        match self {
            TauEvaluator::Euclidean { scale } => {
                scale * x.iter().map(|c| c * c).sum::<f64>().sqrt()
            }
            TauEvaluator::WeightedL2 { weights } => x
                .iter()
                .zip(weights)
                .map(|(c, w)| w * c * c)
                .sum::<f64>()
                .sqrt(),
            TauEvaluator::DirectionTable { values } => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                if r == 0.0 {
                    return 0.0;
                }
                let m = values.len();
                let theta = x[1].atan2(x[0]).rem_euclid(std::f64::consts::TAU);
                let pos = theta / std::f64::consts::TAU * m as f64;
                let k = (pos.floor() as usize) % m;
                let frac = pos - pos.floor();
                r * (values[k] * (1.0 - frac) + values[(k + 1) % m] * frac)
            }
        }
    }

    /// Largest tau over the Euclidean unit sphere; the literal reading of
    /// r_lambda = min { s : B_1 is contained in U_s }.
    pub fn max_on_sphere(&self) -> f64 {
        match self {
            TauEvaluator::Euclidean { scale } => *scale,
            TauEvaluator::WeightedL2 { weights } => weights
                .iter()
                .fold(0.0f64, |a, &w| a.max(w))
                .sqrt(),
            TauEvaluator::DirectionTable { values } => {
                values.iter().fold(0.0f64, |a, &v| a.max(v))
            }
        }
    }
}

/// Drift on the boundary of K_lambda together with the tau_lambda metric and
/// the three nested surcharge cones Y_1, Y_2, Y_3 (deltas increasing).
#[derive(Clone, Debug)]
pub struct SurchargeGeometry {
    pub lambda: f64,
    pub h: [f64; 4],
    pub tau: TauEvaluator,
    pub deltas: [f64; 3],
    pub dimension: usize,
}

pub const DEFAULT_DELTAS: [f64; 3] = [0.1, 0.2, 0.3];

impl SurchargeGeometry {
    pub fn new(
        lambda: f64,
        h: [f64; 4],
        tau: TauEvaluator,
        deltas: [f64; 3],
        dimension: usize,
    ) -> Result<Self, DecompositionError> {
        if !(lambda > 0.0) {
            return Err(DecompositionError::LambdaNonpositive(lambda));
        }
        if !(0.0 < deltas[0] && deltas[0] < deltas[1] && deltas[1] < deltas[2] && deltas[2] < 1.0)
        {
            return Err(DecompositionError::BadCone(
                "cone parameters must satisfy 0 < d1 < d2 < d3 < 1".into(),
            ));
        }
        if dimension == 0 || dimension > 4 {
            return Err(DecompositionError::DimensionUnsupported(dimension));
        }
        if matches!(tau, TauEvaluator::DirectionTable { .. }) && dimension != 2 {
            return Err(DecompositionError::DirectionNotTabulated(dimension));
        }
        if let TauEvaluator::DirectionTable { ref values } = tau {
            if values.len() < 64 || values.iter().any(|v| !(*v > 0.0)) {
                return Err(DecompositionError::BadCone(
                    "direction table needs >= 64 positive entries".into(),
                ));
            }
        }
        Ok(SurchargeGeometry { lambda, h, tau, deltas, dimension })
    }

    pub fn tau_of(&self, x: [f64; 4]) -> f64 {
        self.tau.tau(x)
    }

    pub fn tau_site(&self, x: Site) -> f64 {
        self.tau.tau([x[0] as f64, x[1] as f64, x[2] as f64, x[3] as f64])
    }

    /// Surcharge s_h(x) = tau(x) - h.x, clamped to 0 within tolerance.
    pub fn surcharge(&self, x: Site) -> f64 {
        self.surcharge_f([x[0] as f64, x[1] as f64, x[2] as f64, x[3] as f64])
    }

    pub fn surcharge_f(&self, x: [f64; 4]) -> f64 {
        let tau = self.tau.tau(x);
        let s = tau - x.iter().zip(&self.h).map(|(a, b)| a * b).sum::<f64>();
        if s < 0.0 && s >= -MEMBERSHIP_TOL * tau.max(1.0) {
            0.0
        } else {
            s
        }
    }

    /// Membership in Y_i = { x : s_h(x) <= delta_i tau(x) }, i in 1..=3.
    /// The apex 0 belongs to every cone.
    pub fn in_cone(&self, i: usize, x: Site) -> bool {
        self.in_cone_f(i, [x[0] as f64, x[1] as f64, x[2] as f64, x[3] as f64])
    }

    pub fn in_cone_f(&self, i: usize, x: [f64; 4]) -> bool {
        assert!((1..=3).contains(&i), "cone index must be 1, 2, or 3");
        let tau = self.tau.tau(x);
        if tau == 0.0 {
            return true;
        }
        let s = tau - x.iter().zip(&self.h).map(|(a, b)| a * b).sum::<f64>();
        s <= self.deltas[i - 1] * tau + MEMBERSHIP_TOL * tau.max(1.0)
    }

    /// min { s : the Euclidean unit ball is contained in U_s }. Depends on
    /// the resolution of the tau table when one is injected.
    pub fn r_lambda(&self) -> f64 {
        self.tau.max_on_sphere()
    }

    /// Sweep check of the cone axioms: surcharge nonnegativity on all probed
    /// directions, a lattice direction +-e_k strictly inside Y_1, and (in
    /// dimension 2) an opening of Y_3 strictly below pi. Nesting of the
    /// closures is structural here since the three cones share one surcharge
    /// function and the deltas increase.
    pub fn cone_report(&self, sweep: usize) -> ConeReport {
        let mut min_surcharge = f64::INFINITY;
        let mut opening = 0.0;
        if self.dimension == 2 {
            for k in 0..sweep {
                let th = std::f64::consts::TAU * k as f64 / sweep as f64;
                let u = [th.cos(), th.sin(), 0.0, 0.0];
                min_surcharge = min_surcharge.min(self.surcharge_f(u));
            }
            if let Ok((lo, hi)) = self.sector(3) {
                opening = hi - lo;
            } else {
                opening = std::f64::consts::TAU;
            }
        } else {
            // probe lattice directions and their integer combinations
            for x in lattice_probe(self.dimension) {
                min_surcharge = min_surcharge.min(self.surcharge(x));
            }
        }
        let axis = (0..self.dimension).find_map(|k| {
            for sign in [1, -1] {
                let mut e = ORIGIN;
                e[k] = sign;
                let tau = self.tau_site(e);
                let s = tau - site_dot(e, &self.h);
                if s < self.deltas[0] * tau {
                    return Some(e);
                }
            }
            None
        });
        ConeReport {
            min_surcharge,
            axis_in_interior: axis,
            opening,
            positive: self.dimension != 2 || opening < std::f64::consts::PI,
        }
    }

    /// Boundary angles (lo, hi) of the arc Y_i in dimension 2, with
    /// hi - lo < pi and the arc containing the drift direction. The
    /// endpoints are refined by bisection and widened by 1e-9 radians so
    /// the half-plane test is inclusive at the resolution of the sweep.
    pub fn sector(&self, i: usize) -> Result<(f64, f64), DecompositionError> {
        if self.dimension != 2 {
            return Err(DecompositionError::DimensionUnsupported(self.dimension));
        }
        let member = |th: f64| {
            let u = [th.cos(), th.sin(), 0.0, 0.0];
            let tau = self.tau.tau(u);
            tau - (u[0] * self.h[0] + u[1] * self.h[1]) <= self.deltas[i - 1] * tau
        };
        let center = self.h[1].atan2(self.h[0]);
        if !member(center) {
            return Err(DecompositionError::BadCone(
                "drift direction is not in its own cone; check tau and h".into(),
            ));
        }
        let m = 4096usize;
        let step = std::f64::consts::TAU / m as f64;
        let refine = |mut inside: f64, mut outside: f64| {
            for _ in 0..60 {
                let mid = 0.5 * (inside + outside);
                if member(mid) {
                    inside = mid;
                } else {
                    outside = mid;
                }
            }
            inside
        };
        let mut hi = None;
        for k in 1..m {
            let th = center + k as f64 * step;
            if !member(th) {
                hi = Some(refine(th - step, th));
                break;
            }
        }
        let mut lo = None;
        for k in 1..m {
            let th = center - k as f64 * step;
            if !member(th) {
                lo = Some(refine(th + step, th));
                break;
            }
        }
        let (lo, hi) = match (lo, hi) {
            (Some(lo), Some(hi)) => (lo - 1e-9, hi + 1e-9),
            _ => {
                return Err(DecompositionError::BadCone(
                    "cone covers the whole circle".into(),
                ))
            }
        };
        if hi - lo >= std::f64::consts::PI {
            return Err(DecompositionError::BadCone(format!(
                "cone opening {:.4} rad is not positive (>= pi)",
                hi - lo
            )));
        }
        Ok((lo, hi))
    }
}

fn lattice_probe(dimension: usize) -> Vec<Site> {
    let mut out = Vec::new();
    let lo = -2i32;
    let hi = 2i32;
    let mut cur = [0i32; 4];
    fn rec(d: usize, dim: usize, lo: i32, hi: i32, cur: &mut Site, out: &mut Vec<Site>) {
        if d == dim {
            if *cur != ORIGIN {
                out.push(*cur);
            }
            return;
        }
        for v in lo..=hi {
            cur[d] = v;
            rec(d + 1, dim, lo, hi, cur, out);
        }
        cur[d] = 0;
    }
    rec(0, dimension, lo, hi, &mut cur, &mut out);
    out
}

#[derive(Clone, Debug)]
pub struct ConeReport {
    pub min_surcharge: f64,
    pub axis_in_interior: Option<Site>,
    /// Opening angle of Y_3 in dimension 2 (0 when not computed).
    pub opening: f64,
    pub positive: bool,
}

// ---------------------------------------------------------------------------
// Skeletons.

/// Coarse-grained image of a path: trunk vertices u_0..u_N spaced K apart in
/// the tau metric, exit points v_1..v_N, and per-gap hair vertices from the
/// backtracking segments.
#[derive(Clone, Debug)]
pub struct Skeleton {
    pub trunk: Vec<Site>,
    pub trunk_indices: Vec<usize>,
    pub exits: Vec<Site>,
    pub exit_indices: Vec<usize>,
    /// hairs[l] lists the hair vertices w_1, w_2, ... grown from trunk
    /// vertex u_{l+1} back along the segment between v_{l+1} and u_{l+1}.
    pub hairs: Vec<Vec<Site>>,
    pub k: f64,
    pub r_lambda: f64,
}

/// Two stopping-time passes. The trunk pass walks forward: sigma_{l+1} is
/// the first exit from the radius-K tau-ball around u_l and tau_{l+1} is one
/// past the last visit to the radius-(K + r_lambda) ball; it stops as soon
/// as the remaining suffix fits in the radius-K ball. The hair pass walks
/// each backtracking segment in reverse with the same exit rule at radius K.
pub fn build_skeleton(
    geom: &SurchargeGeometry,
    path: &LatticePath,
    k: f64,
) -> Result<Skeleton, DecompositionError> {
    let r = geom.r_lambda();
    if k < r {
        return Err(DecompositionError::ScaleTooSmall { k, r_lambda: r });
    }
    let verts = path.vertices();
    let n = path.len();
    let tol = MEMBERSHIP_TOL * k.max(1.0);
    let in_ball = |center: Site, x: Site, radius: f64| {
        geom.tau_site(site_sub(x, center)) <= radius + tol
    };
    let mut trunk = vec![verts[0]];
    let mut trunk_indices = vec![0usize];
    let mut exits = Vec::new();
    let mut exit_indices = Vec::new();
    loop {
        let u = *trunk.last().unwrap();
        let from = *trunk_indices.last().unwrap();
        if (from..=n).all(|i| in_ball(u, verts[i], k)) {
            break;
        }
        let sigma = (from + 1..=n)
            .find(|&i| !in_ball(u, verts[i], k))
            .expect("exit exists when the suffix leaves the ball");
        let last_big = (from + 1..=n)
            .filter(|&i| in_ball(u, verts[i], k + r))
            .max()
            .unwrap_or(sigma);
        let next = (last_big + 1).min(n);
        exits.push(verts[sigma]);
        exit_indices.push(sigma);
        trunk.push(verts[next]);
        trunk_indices.push(next);
        if next == n {
            break;
        }
    }
    let mut hairs = vec![Vec::new()];
    for l in 1..trunk.len() {
        let a = exit_indices[l - 1];
        let b = trunk_indices[l];
        let rev: Vec<Site> = (a..=b).rev().map(|i| verts[i]).collect();
        let m = rev.len() - 1;
        let mut w = rev[0];
        let mut t = 0usize;
        let mut hair = Vec::new();
        loop {
            if (t..=m).all(|j| in_ball(w, rev[j], k)) {
                break;
            }
            let t_next = (t + 1..=m)
                .find(|&j| !in_ball(w, rev[j], k))
                .expect("exit exists when the reversed suffix leaves the ball");
            w = rev[t_next];
            hair.push(w);
            t = t_next;
        }
        hairs.push(hair);
    }
    Ok(Skeleton { trunk, trunk_indices, exits, exit_indices, hairs, k, r_lambda: r })
}

#[derive(Clone, Debug)]
pub struct SkeletonProperties {
    /// Trunk pieces gamma_l are pairwise vertex-disjoint.
    pub pieces_disjoint: bool,
    /// Each exit point v_{l+1} is visited exactly once by its trunk piece.
    pub exits_visited_once: bool,
    /// tau(v_{l+1} - u_l) lies in [K, K + r_lambda] for every gap.
    pub trunk_radii_ok: bool,
    /// Consecutive hair vertices are at tau-distance >= K.
    pub hair_lengths_ok: bool,
}

impl SkeletonProperties {
    pub fn all_ok(&self) -> bool {
        self.pieces_disjoint && self.exits_visited_once && self.trunk_radii_ok && self.hair_lengths_ok
    }
}

/// Exact set checks of the construction invariants on a finished skeleton.
pub fn skeleton_properties(
    geom: &SurchargeGeometry,
    path: &LatticePath,
    skel: &Skeleton,
) -> SkeletonProperties {
    let verts = path.vertices();
    let n = path.len();
    let tol = MEMBERSHIP_TOL * skel.k.max(1.0);
    // trunk pieces gamma_l run from tau_l to sigma_{l+1} (last one to n)
    let mut spans = Vec::new();
    for l in 0..skel.trunk.len() {
        let from = skel.trunk_indices[l];
        let to = if l < skel.exit_indices.len() { skel.exit_indices[l] } else { n };
        spans.push((from, to));
    }
    let mut owner: FastMap<Site, usize> = fast_map();
    let mut pieces_disjoint = true;
    for (l, &(from, to)) in spans.iter().enumerate() {
        if from == to {
            // a path ending at the moment of exit leaves a single-vertex
            // final piece; it carries no step and does not count
            continue;
        }
        for i in from..=to {
            match owner.get(&verts[i]) {
                Some(&o) if o != l => pieces_disjoint = false,
                _ => {
                    owner.insert(verts[i], l);
                }
            }
        }
    }
    let mut exits_visited_once = true;
    for (l, &sigma) in skel.exit_indices.iter().enumerate() {
        let (from, to) = spans[l];
        let count = (from..=to).filter(|&i| verts[i] == verts[sigma]).count();
        if count != 1 {
            exits_visited_once = false;
        }
    }
    let mut trunk_radii_ok = true;
    for l in 0..skel.exits.len() {
        let t = geom.tau_site(site_sub(skel.exits[l], skel.trunk[l]));
        if t < skel.k - tol || t > skel.k + skel.r_lambda + tol {
            trunk_radii_ok = false;
        }
    }
    let mut hair_lengths_ok = true;
    for (l, hair) in skel.hairs.iter().enumerate() {
        let mut prev = if l < skel.trunk.len() { skel.trunk[l] } else { continue };
        for &w in hair {
            if geom.tau_site(site_sub(w, prev)) < skel.k - tol {
                hair_lengths_ok = false;
            }
            prev = w;
        }
    }
    SkeletonProperties { pieces_disjoint, exits_visited_once, trunk_radii_ok, hair_lengths_ok }
}

// ---------------------------------------------------------------------------
// Cone points.

/// Reference scan: index l (0 < l < n) is a cone point of the path when
/// every vertex lies in (u_l - Y_3) union (u_l + Y_3).
pub fn cone_points(geom: &SurchargeGeometry, path: &LatticePath) -> Vec<usize> {
    let verts = path.vertices();
    let n = path.len();
    (1..n)
        .filter(|&l| {
            verts.iter().all(|&x| {
                let d = site_sub(x, verts[l]);
                geom.in_cone(3, d) || geom.in_cone(3, site_neg(d))
            })
        })
        .collect()
}

struct Fenwick {
    tree: Vec<u32>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick { tree: vec![0; n + 1] }
    }

    fn add(&mut self, i: usize) {
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] += 1;
            j += j & j.wrapping_neg();
        }
    }

    /// Number of inserted ranks <= i.
    fn prefix(&self, i: usize) -> u32 {
        let mut j = i + 1;
        let mut s = 0;
        while j > 0 {
            s += self.tree[j];
            j -= j & j.wrapping_neg();
        }
        s
    }
}

/// Sorted-sweep cone-point scan in dimension 2, O(n log n). Vertices map to
/// the pair of half-plane coordinates (P, Q) of the sector of Y_3; l is a
/// cone point exactly when every vertex is comparable to vertex l in the
/// coordinatewise order, so the scan counts dominance inversions with a
/// Fenwick tree. Validated against the quadratic reference.
pub fn cone_points_fast(
    geom: &SurchargeGeometry,
    path: &LatticePath,
) -> Result<Vec<usize>, DecompositionError> {
    let (lo, hi) = geom.sector(3)?;
    let da = [lo.cos(), lo.sin()];
    let db = [hi.cos(), hi.sin()];
    let verts = path.vertices();
    let n = path.len();
    let pts: Vec<(f64, f64)> = verts
        .iter()
        .map(|&v| {
            let x = v[0] as f64;
            let y = v[1] as f64;
            (da[0] * y - da[1] * x, x * db[1] - y * db[0])
        })
        .collect();
    let mut qs: Vec<f64> = pts.iter().map(|p| p.1).collect();
    qs.sort_by(f64::total_cmp);
    qs.dedup();
    let rank = |q: f64| qs.binary_search_by(|v| v.total_cmp(&q)).unwrap();
    let mut order: Vec<usize> = (0..=n).collect();
    order.sort_by(|&i, &j| pts[i].0.total_cmp(&pts[j].0));
    let mut bad = vec![0u32; n + 1];
    // pass 1: vertices strictly below in P and strictly above in Q
    let mut fw = Fenwick::new(qs.len());
    let mut added = 0u32;
    let mut g = 0;
    while g <= n {
        let mut e = g;
        while e <= n && pts[order[e]].0 == pts[order[g]].0 {
            e += 1;
        }
        for &i in &order[g..e] {
            bad[i] += added - fw.prefix(rank(pts[i].1));
        }
        for &i in &order[g..e] {
            fw.add(rank(pts[i].1));
            added += 1;
        }
        g = e;
    }
    // pass 2: strictly above in P and strictly below in Q
    let mut fw = Fenwick::new(qs.len());
    let mut g = n + 1;
    while g > 0 {
        let mut s = g;
        while s > 0 && pts[order[s - 1]].0 == pts[order[g - 1]].0 {
            s -= 1;
        }
        for &i in &order[s..g] {
            let r = rank(pts[i].1);
            if r > 0 {
                bad[i] += fw.prefix(r - 1);
            }
        }
        for &i in &order[s..g] {
            fw.add(rank(pts[i].1));
        }
        g = s;
    }
    Ok((1..n).filter(|&l| bad[l] == 0).collect())
}

// ---------------------------------------------------------------------------
// Irreducible decomposition.

#[derive(Clone, Debug)]
pub struct PieceClass {
    /// Every vertex x of the piece satisfies x - start in Y_3.
    pub head_confined: bool,
    /// Every vertex x satisfies end - x in Y_3.
    pub tail_confined: bool,
    /// Cone points of the piece taken on its own.
    pub interior_cone_points: usize,
    /// Member of the irreducible alphabet F: confined to its diamond and
    /// with no interior cone points.
    pub in_f: bool,
}

/// Splitting of a path at all of its Y_3 cone points. Segment 0 is the
/// left-boundary piece, the last segment the right-boundary piece; the
/// middle segments are candidates for the alphabet F. Boundary pieces of an
/// undecomposable path are kept and flagged, not discarded.
#[derive(Clone, Debug)]
pub struct IrreducibleDecomposition {
    pub junctions: Vec<usize>,
    pub segments: Vec<LatticePath>,
    pub classes: Vec<PieceClass>,
    pub wholly_irreducible: bool,
    /// Segments visit pairwise disjoint site sets (junctions counted for
    /// the incoming segment only, since a segment's start carries no local
    /// time); exactly the condition for the weight factorization to be an
    /// equality.
    pub junction_disjoint: bool,
}

impl IrreducibleDecomposition {
    pub fn prefix(&self) -> &LatticePath {
        &self.segments[0]
    }

    pub fn suffix(&self) -> &LatticePath {
        self.segments.last().unwrap()
    }

    pub fn reconcatenate(&self) -> LatticePath {
        let mut verts: Vec<Site> = self.segments[0].vertices().to_vec();
        for seg in &self.segments[1..] {
            verts.extend_from_slice(&seg.vertices()[1..]);
        }
        LatticePath::from_vertices(verts)
    }

    pub fn to_json(&self) -> String {
        let pieces: Vec<serde_json::Value> = self
            .segments
            .iter()
            .zip(&self.classes)
            .enumerate()
            .map(|(i, (seg, class))| {
                let role = if i == 0 {
                    "left"
                } else if i + 1 == self.segments.len() {
                    "right"
                } else {
                    "middle"
                };
                serde_json::json!({
                    "role": role,
                    "len": seg.len(),
                    "start": seg.start()[..2].to_vec(),
                    "end": seg.end()[..2].to_vec(),
                    "head_confined": class.head_confined,
                    "tail_confined": class.tail_confined,
                    "interior_cone_points": class.interior_cone_points,
                    "in_f": class.in_f,
                })
            })
            .collect();
        serde_json::json!({
            "junctions": self.junctions,
            "wholly_irreducible": self.wholly_irreducible,
            "junction_disjoint": self.junction_disjoint,
            "pieces": pieces,
        })
        .to_string()
    }
}

fn classify(geom: &SurchargeGeometry, seg: &LatticePath) -> PieceClass {
    let start = seg.start();
    let end = seg.end();
    let head_confined = seg
        .vertices()
        .iter()
        .all(|&x| geom.in_cone(3, site_sub(x, start)));
    let tail_confined = seg
        .vertices()
        .iter()
        .all(|&x| geom.in_cone(3, site_sub(end, x)));
    let interior = cone_points(geom, seg).len();
    PieceClass {
        head_confined,
        tail_confined,
        interior_cone_points: interior,
        in_f: head_confined && tail_confined && interior == 0,
    }
}

/// Splits at every cone point and classifies the pieces. A path with no
/// cone points comes back as a single flagged segment rather than an error.
pub fn irreducible_split(
    geom: &SurchargeGeometry,
    path: &LatticePath,
) -> IrreducibleDecomposition {
    let junctions = cone_points(geom, path);
    let mut cuts = vec![0usize];
    cuts.extend_from_slice(&junctions);
    cuts.push(path.len());
    let segments: Vec<LatticePath> = cuts
        .windows(2)
        .map(|w| path.segment(w[0], w[1]))
        .collect();
    let classes: Vec<PieceClass> = segments.iter().map(|s| classify(geom, s)).collect();
    // ownership scan: each positive-local-time site must belong to one segment
    let mut owner: FastMap<Site, usize> = fast_map();
    let mut junction_disjoint = true;
    for (i, seg) in segments.iter().enumerate() {
        for &v in seg.vertices().iter().skip(1) {
            match owner.get(&v) {
                Some(&o) if o != i => junction_disjoint = false,
                _ => {
                    owner.insert(v, i);
                }
            }
        }
    }
    IrreducibleDecomposition {
        wholly_irreducible: junctions.is_empty(),
        junctions,
        segments,
        classes,
        junction_disjoint,
    }
}

/// Log-domain factorization defect: the whole path's annealed log-weight
/// minus the sum over the pieces'. Nonnegative because the attractive
/// interaction is subadditive in the local times, so merging the pieces'
/// visits can only lower the total cost; zero exactly when the
/// decomposition is junction-disjoint (drift, killing, and
/// step-probability terms telescope in any case).
pub fn factorization_gap(
    model: &PolymerModel,
    decomp: &IrreducibleDecomposition,
    path: &LatticePath,
) -> Result<f64, DecompositionError> {
    let whole = annealed_log_weight(model, path)?;
    let mut parts = 0.0;
    for seg in &decomp.segments {
        if seg.len() > 0 {
            parts += annealed_log_weight(model, seg)?;
        }
    }
    Ok(whole - parts)
}

// ---------------------------------------------------------------------------
// Empirical irreducible kernel.

#[derive(Clone, Debug)]
pub struct KernelEstimateOptions {
    /// Increasing truncation lengths; the mass deficit is reported per entry
    /// and the kernel is built at the largest.
    pub n_list: Vec<usize>,
    pub deltas: [f64; 3],
    /// Which cone bounds the pieces (1..=3).
    pub cone_index: usize,
    /// Rays used for the boundary of K_lambda and the tau table.
    pub directions: usize,
    pub cap: u64,
}

impl Default for KernelEstimateOptions {
    fn default() -> Self {
        KernelEstimateOptions {
            n_list: vec![10, 12, 14],
            deltas: DEFAULT_DELTAS,
            cone_index: 3,
            directions: 256,
            cap: 1 << 30,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KernelDiagnostics {
    pub lambda: f64,
    /// (n_max, accumulated mass of pieces with length <= n_max).
    pub masses: Vec<(usize, f64)>,
    pub raw_mass: f64,
    /// Fitted time-decay rate of the kernel's duration marginal.
    pub chi: f64,
    /// Fitted spatial decay rate against Euclidean distance.
    pub nu: f64,
    pub velocity_kernel: [f64; 4],
    pub velocity_direct: [f64; 4],
}

/// tau_lambda direction table from the support function of
/// K_lambda = { xi : lambda_a(xi) <= lambda }, where lambda_a(xi) is the
/// annealed free energy read off as a forward difference of log Z_n(xi)
/// at the largest available n. Dimension 2.
pub fn annealed_tau_table(
    tables: &AnnealedTables,
    lambda: f64,
    directions: usize,
) -> Result<Vec<f64>, DecompositionError> {
    if tables.dimension != 2 {
        return Err(DecompositionError::DimensionUnsupported(tables.dimension));
    }
    let n = tables.n_max;
    let rate = |xi: [f64; 4]| tables.log_z(n, &xi) - tables.log_z(n - 1, &xi);
    if rate([0.0; 4]) >= lambda {
        return Err(DecompositionError::BadCone(
            "lambda is at or below the annealed rate at zero tilt".into(),
        ));
    }
    let mut boundary = Vec::with_capacity(directions);
    for k in 0..directions {
        let th = std::f64::consts::TAU * k as f64 / directions as f64;
        let u = [th.cos(), th.sin()];
        let at = |rho: f64| rate([rho * u[0], rho * u[1], 0.0, 0.0]);
        let mut hi = 1.0;
        let mut guard = 0;
        while at(hi) < lambda {
            hi *= 2.0;
            guard += 1;
            if guard > 60 {
                return Err(DecompositionError::BadCone(
                    "annealed rate never reaches lambda along a ray".into(),
                ));
            }
        }
        let mut lo = 0.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if at(mid) < lambda {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        boundary.push([lo * u[0], lo * u[1]]);
    }
    let values: Vec<f64> = (0..directions)
        .map(|k| {
            let th = std::f64::consts::TAU * k as f64 / directions as f64;
            let (c, s) = (th.cos(), th.sin());
            boundary
                .iter()
                .map(|b| b[0] * c + b[1] * s)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(DecompositionError::BadCone(
            "support table of K_lambda is not positive".into(),
        ));
    }
    Ok(values)
}

struct FPieceCollector<'a> {
    grid: BoxRegion,
    counts: Vec<u32>,
    wstack: Vec<f64>,
    step_factors: Vec<f64>,
    visit_factor: Vec<f64>,
    da: [f64; 2],
    db: [f64; 2],
    pq: Vec<(f64, f64)>,
    maxp: Vec<f64>,
    maxq: Vec<f64>,
    cands: Vec<usize>,
    undo: Vec<(Vec<usize>, bool)>,
    acc: &'a mut FastMap<(Site, u32), f64>,
}

impl<'a> FPieceCollector<'a> {
    fn forms(&self, site: Site) -> (f64, f64) {
        let x = site[0] as f64;
        let y = site[1] as f64;
        (self.da[0] * y - self.da[1] * x, x * self.db[1] - y * self.db[0])
    }
}

impl<'a> PathVisitor for FPieceCollector<'a> {
    fn enter(&mut self, depth: usize, site: Site, step_index: usize) -> bool {
        let (p, q) = self.forms(site);
        let eps = MEMBERSHIP_TOL * (1.0 + site_norm_l2(site));
        // confinement to the forward cone from the start; prune otherwise
        if p < -eps || q < -eps {
            return false;
        }
        let idx = self.grid.index(site).expect("grid covers the reach");
        self.counts[idx] += 1;
        let c = self.counts[idx] as usize;
        let w = self.wstack[depth - 1] * self.step_factors[step_index] * self.visit_factor[c];
        if w <= 0.0 {
            self.counts[idx] -= 1;
            return false;
        }
        self.wstack[depth] = w;
        // drop cone-point candidates incomparable with the new vertex
        let mut removed = Vec::new();
        self.cands.retain(|&l| {
            let (pl, ql) = self.pq[l];
            let incomp = (pl > p && ql < q) || (pl < p && ql > q);
            if incomp {
                removed.push(l);
            }
            !incomp
        });
        // the new vertex is a candidate when comparable with the whole prefix
        let all_comp = (0..depth).all(|j| {
            let (pj, qj) = self.pq[j];
            !((pj > p && qj < q) || (pj < p && qj > q))
        });
        if all_comp {
            self.cands.push(depth);
        }
        self.pq[depth] = (p, q);
        self.maxp[depth] = self.maxp[depth - 1].max(p);
        self.maxq[depth] = self.maxq[depth - 1].max(q);
        self.undo[depth] = (removed, all_comp);
        // emit when the piece is confined to its diamond and irreducible
        let end_confined = p >= self.maxp[depth] - eps && q >= self.maxq[depth] - eps;
        let irreducible = self.cands.iter().all(|&l| l >= depth);
        if end_confined && irreducible {
            *self.acc.entry((site, depth as u32)).or_insert(0.0) += w;
        }
        true
    }

    fn leave(&mut self, depth: usize, site: Site) {
        let idx = self.grid.index(site).unwrap();
        self.counts[idx] -= 1;
        let (removed, pushed) = std::mem::take(&mut self.undo[depth]);
        if pushed {
            self.cands.pop();
        }
        if !removed.is_empty() {
            self.cands.extend(removed);
            self.cands.sort_unstable();
        }
    }
}

/// Accumulates the normalized weights of irreducible cone-confined pieces
/// into an empirical kernel f(x, n), n up to the largest entry of `n_list`.
/// The enumeration is a depth-first walk pruned to the forward cone, so it
/// touches far fewer nodes than the full tree. Diagnostics report the mass
/// deficit per truncation, exponential tail fits, and a velocity
/// cross-check against the tilted ensemble.
pub fn estimate_irreducible_kernel(
    steps: &StepDistribution,
    law: &PotentialLaw,
    h: [f64; 4],
    opts: &KernelEstimateOptions,
) -> Result<(RenewalKernel, KernelDiagnostics), DecompositionError> {
    if steps.dimension() != 2 {
        return Err(DecompositionError::DimensionUnsupported(steps.dimension()));
    }
    let n_top = *opts.n_list.iter().max().expect("n_list nonempty");
    let ladder = annealed_log_ladder(steps, law, &h, n_top, opts.cap)?;
    let lambda = ladder[n_top] - ladder[n_top - 1];
    if !(lambda > 0.0) {
        return Err(DecompositionError::LambdaNonpositive(lambda));
    }
    let tables = AnnealedTables::build(steps, law, n_top, opts.cap)?;
    let values = annealed_tau_table(&tables, lambda, opts.directions)?;
    let geom = SurchargeGeometry::new(
        lambda,
        h,
        TauEvaluator::DirectionTable { values },
        opts.deltas,
        2,
    )?;
    let (lo, hi) = geom.sector(opts.cone_index)?;
    let mut acc: FastMap<(Site, u32), f64> = fast_map();
    let grid = BoxRegion::cube(2, ORIGIN, n_top as i32 * steps.range());
    let mut collector = FPieceCollector {
        counts: vec![0; grid.len()],
        grid,
        wstack: {
            let mut w = vec![0.0; n_top + 1];
            w[0] = 1.0;
            w
        },
        step_factors: steps
            .support()
            .iter()
            .map(|&(s, p)| p * (site_dot(s, &h) - lambda).exp())
            .collect(),
        visit_factor: {
            let mut fac = vec![1.0; n_top + 2];
            let mut prev = 0.0;
            for l in 1..=(n_top + 1) {
                let cur = phi_beta(law, l as u32);
                fac[l] = if cur.is_infinite() { 0.0 } else { (-(cur - prev)).exp() };
                prev = cur;
            }
            fac
        },
        da: [lo.cos(), lo.sin()],
        db: [hi.cos(), hi.sin()],
        pq: vec![(0.0, 0.0); n_top + 1],
        maxp: vec![0.0; n_top + 1],
        maxq: vec![0.0; n_top + 1],
        cands: Vec::new(),
        undo: vec![(Vec::new(), false); n_top + 1],
        acc: &mut acc,
    };
    walk_paths(steps, n_top, ORIGIN, &mut collector);
    if acc.len() < 2 {
        return Err(DecompositionError::InsufficientConePoints { found: acc.len(), needed: 2 });
    }
    let masses: Vec<(usize, f64)> = opts
        .n_list
        .iter()
        .map(|&m| {
            let mut s = KahanSum::default();
            for (&(_, n), &w) in acc.iter() {
                if n as usize <= m {
                    s.add(w);
                }
            }
            (m, s.value())
        })
        .collect();
    let raw_mass: f64 = {
        let mut s = KahanSum::default();
        for &w in acc.values() {
            s.add(w);
        }
        s.value()
    };
    let scale = if raw_mass > 1.0 { 1.0 / raw_mass } else { 1.0 };
    let kernel = RenewalKernel::new(
        2,
        acc.iter().map(|(&(x, n), &w)| (x, n, w * scale)),
    )?;
    // tail fits over the upper half of the range
    let marginal = kernel.time_marginal(n_top as u32);
    let pts: Vec<(f64, f64)> = (n_top / 2..=n_top)
        .filter(|&n| marginal[n] > 0.0)
        .map(|n| (n as f64, marginal[n].ln()))
        .collect();
    let chi = if pts.len() >= 2 {
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        -linear_fit(&xs, &ys).1
    } else {
        f64::NAN
    };
    let mut spatial: FastMap<Site, f64> = fast_map();
    for (&(x, _), &w) in acc.iter() {
        *spatial.entry(x).or_insert(0.0) += w;
    }
    let rmax = spatial.keys().map(|&x| site_norm_l2(x)).fold(0.0f64, f64::max);
    let spts: Vec<(f64, f64)> = spatial
        .iter()
        .filter(|(&x, &w)| w > 0.0 && site_norm_l2(x) >= 0.5 * rmax)
        .map(|(&x, &w)| (site_norm_l2(x), w.ln()))
        .collect();
    let nu = if spts.len() >= 2 {
        let xs: Vec<f64> = spts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = spts.iter().map(|p| p.1).collect();
        -linear_fit(&xs, &ys).1
    } else {
        f64::NAN
    };
    let mean_x = kernel.mean_displacement();
    let mean_t = kernel.mean_time();
    let mut velocity_kernel = [0.0; 4];
    for k in 0..2 {
        velocity_kernel[k] = mean_x[k] / mean_t;
    }
    // direct route: endpoint mean of the tilted ensemble at n_top
    let mut den = 0.0;
    let mut num = [0.0f64; 4];
    for (&x, &w) in tables.z[n_top].iter() {
        let t = w * site_dot(x, &h).exp();
        den += t;
        for k in 0..2 {
            num[k] += t * x[k] as f64;
        }
    }
    let mut velocity_direct = [0.0; 4];
    for k in 0..2 {
        velocity_direct[k] = num[k] / (den * n_top as f64);
    }
    let diagnostics = KernelDiagnostics {
        lambda,
        masses,
        raw_mass,
        chi,
        nu,
        velocity_kernel,
        velocity_direct,
    };
    Ok((kernel, diagnostics))
}

// ---------------------------------------------------------------------------
// Forest-count bound.

/// Upper bound exp(M log b + (N + M) b / (b - 1)) on the number of forests
/// with M marked vertices grafted on N trunk vertices at branching number b.
pub fn kesten_forest_bound(m: u64, n: u64, b: u64) -> f64 {
    assert!(n >= 1 && b >= 2, "need N >= 1 and b >= 2");
    let bf = b as f64;
    (m as f64 * bf.ln() + (n + m) as f64 * bf / (bf - 1.0)).exp()
}

// ---------------------------------------------------------------------------
// Ornstein-Zernike two-point check.

#[derive(Clone, Debug)]
pub struct OzReport {
    pub lambda: f64,
    /// Decay rate per unit Euclidean length from fitting
    /// log G + p log r = c - tau r along the ray, with p pinned to the
    /// reference power (d - 1) / 2.
    pub tau_fit: f64,
    /// Same rate from the support function of K_lambda.
    pub tau_support: f64,
    /// Power from the log-log fit of e^{tau r} G with tau pinned to the
    /// support-function route; the prediction is (d - 1) / 2.
    pub power: f64,
    /// Relative spread of e^{tau r} G(r) r^{(d-1)/2} using tau_support.
    pub flatness: f64,
    /// |tau_fit - tau_support| / tau_support.
    pub consistency: f64,
}

/// Fits the two-point function along a ray against the product of a pure
/// exponential and a power-law prefactor. Desk scale: the check is about
/// flatness and the sign of the power, not the limiting constant.
pub fn oz_two_point_check(
    steps: &StepDistribution,
    law: &PotentialLaw,
    h: [f64; 4],
    direction: Site,
    r_list: &[i32],
    n_top: usize,
    cap: u64,
) -> Result<OzReport, DecompositionError> {
    let d = steps.dimension();
    let ladder = annealed_log_ladder(steps, law, &h, n_top, cap)?;
    let lambda = ladder[n_top] - ladder[n_top - 1];
    if !(lambda > 0.0) {
        return Err(DecompositionError::LambdaNonpositive(lambda));
    }
    let tables = AnnealedTables::build(steps, law, n_top, cap)?;
    let unit = site_norm_l2(direction);
    let mut radii = Vec::new();
    let mut logs = Vec::new();
    for &r in r_list {
        let x = [direction[0] * r, direction[1] * r, direction[2] * r, direction[3] * r];
        let g = tables.g_lambda(x, lambda);
        if g <= 0.0 {
            continue;
        }
        let rho = unit * r as f64;
        radii.push(rho);
        logs.push(g.ln());
    }
    if radii.len() < 4 {
        return Err(DecompositionError::BadCone(
            "too few positive two-point values along the ray".into(),
        ));
    }
    let tau_support = if d == 2 {
        let table = annealed_tau_table(&tables, lambda, 256)?;
        let tau = TauEvaluator::DirectionTable { values: table };
        let u = [
            direction[0] as f64 / unit,
            direction[1] as f64 / unit,
            0.0,
            0.0,
        ];
        tau.tau(u)
    } else {
        // dimension 1: the boundary of K_lambda along the ray is the tilt
        // with forward-difference rate lambda
        let n = tables.n_max;
        let sgn = if direction[0] >= 0 { 1.0 } else { -1.0 };
        let rate = |xi: f64| {
            let v = [sgn * xi, 0.0, 0.0, 0.0];
            tables.log_z(n, &v) - tables.log_z(n - 1, &v)
        };
        let mut hi = 1.0;
        while rate(hi) < lambda {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if rate(mid) < lambda {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let pw = (d as f64 - 1.0) / 2.0;
    // the pure exponential and the power are nearly collinear on a short
    // ray, so each is fitted with the other pinned to its reference value
    let (tau_fit, power) = {
        let with_power: Vec<f64> = radii
            .iter()
            .zip(&logs)
            .map(|(&rho, &lg)| lg + pw * rho.ln())
            .collect();
        let tau_fit = -linear_fit(&radii, &with_power).1;
        let log_radii: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
        let with_tau: Vec<f64> = radii
            .iter()
            .zip(&logs)
            .map(|(&rho, &lg)| lg + tau_support * rho)
            .collect();
        let power = -linear_fit(&log_radii, &with_tau).1;
        (tau_fit, power)
    };
    let vals: Vec<f64> = radii
        .iter()
        .zip(&logs)
        .map(|(&rho, &lg)| (lg + tau_support * rho + pw * rho.ln()).exp())
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let flatness = vals
        .iter()
        .map(|v| (v - mean).abs() / mean)
        .fold(0.0f64, f64::max);
    Ok(OzReport {
        lambda,
        tau_fit,
        tau_support,
        power,
        flatness,
        consistency: (tau_fit - tau_support).abs() / tau_support,
    })
}
