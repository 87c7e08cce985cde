//! Quenched experiments around the irreducible-kernel picture: cone and
//! diamond restricted basic partition functions with their random renewal
//! identity, a per-step ledger that splits t^omega(n) into a running
//! martingale-like sum plus correction terms, slab-conditioned second-moment
//! diagnostics, fractional-moment decay tests in two dimensions, and direct
//! quenched/annealed ratio statistics.
//!
//! Renewal marks are taken in the split form: a vertex u of a path is a mark
//! when every earlier vertex lies in u - Y and every later vertex in u + Y.
//! With a convex pointed cone Y this makes the first-mark (and last-mark)
//! decompositions exact bijections, so the identities below hold to machine
//! precision rather than up to boundary corrections.

use crate::decomposition::{
    annealed_tau_table, DecompositionError, SurchargeGeometry, TauEvaluator,
};
use crate::environment::{
    phi_beta, sample_environment, EnvironmentError, EnvironmentField, PotentialKind, PotentialLaw,
};
use crate::lattice::{
    site_add, site_dot, site_sub, walk_paths, BoxRegion, PathVisitor, Site, StepDistribution,
    ORIGIN,
};
use crate::numeric::{fast_map, linear_fit, mean_and_stderr, splitmix64, FastMap, KahanSum};
use crate::partition::{AnnealedTables, PartitionError, PolymerModel};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DisorderError {
    #[error("cone restriction infeasible: {0}")]
    ConeRestrictionInfeasible(String),
    #[error("truncated kernel mass {0} cannot be calibrated to a probability")]
    KernelMismatch(f64),
    #[error("tilting parameter {delta} outside the admissible window [{lo}, {hi}]")]
    WindowViolation { delta: f64, lo: f64, hi: f64 },
    #[error("need at least {needed} seeds, got {got}")]
    InsufficientSeeds { got: usize, needed: usize },
    #[error("table stamp does not match the kernel: {0}")]
    StampMismatch(String),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
}

// ---------------------------------------------------------------------------
// Cone-piece walker.
//
// A single depth-first pass over the paths started at `base` and confined to
// base + Y, accumulating end-confined sums t(x, n) and their irreducible
// restriction f(x, n). Works in any dimension the geometry supports, with
// per-vertex mark bookkeeping costing O(depth) per node; the trees here are
// short (kernel caps and small horizons), so this is never the bottleneck.

enum PieceWeights<'a> {
    /// Per-step quenched factors e^{-beta V}; traps prune the branch.
    Quenched { env: &'a EnvironmentField, beta: f64 },
    /// Local-time visit factors e^{-(phi(l) - phi(l-1))} on a counts grid.
    Annealed { grid: BoxRegion, counts: Vec<u32>, visit_factor: Vec<f64> },
}

struct PieceWalker<'a> {
    geom: &'a SurchargeGeometry,
    cone_index: usize,
    base: Site,
    step_factors: Vec<f64>,
    weights: PieceWeights<'a>,
    wstack: Vec<f64>,
    rel: Vec<Site>,
    /// Ascending chain of alive mark candidates (indices into the path).
    cands: Vec<usize>,
    undo: Vec<(Vec<usize>, bool)>,
    collect_t: bool,
    t_acc: FastMap<(Site, u32), f64>,
    f_acc: FastMap<(Site, u32), f64>,
}

impl<'a> PathVisitor for PieceWalker<'a> {
    fn enter(&mut self, depth: usize, site: Site, step_index: usize) -> bool {
        let rel = site_sub(site, self.base);
        if !self.geom.in_cone(self.cone_index, rel) {
            return false;
        }
        let mut w = self.wstack[depth - 1] * self.step_factors[step_index];
        match &mut self.weights {
            PieceWeights::Quenched { env, beta } => {
                let Ok(v) = env.value(site) else { return false };
                if v.is_infinite() {
                    return false;
                }
                w *= (-*beta * v).exp();
            }
            PieceWeights::Annealed { grid, counts, visit_factor } => {
                let idx = grid.index(site).expect("walker grid covers the reach");
                counts[idx] += 1;
                w *= visit_factor[counts[idx] as usize];
                if w <= 0.0 {
                    counts[idx] -= 1;
                    return false;
                }
            }
        }
        if w <= 0.0 {
            return false;
        }
        // Candidates form a chain in the cone order, so violations are
        // always a suffix of the stack.
        let mut removed = Vec::new();
        while let Some(&c) = self.cands.last() {
            if self.geom.in_cone(self.cone_index, site_sub(rel, self.rel[c])) {
                break;
            }
            removed.push(self.cands.pop().unwrap());
        }
        let dominates_prefix = (0..depth)
            .all(|j| self.geom.in_cone(self.cone_index, site_sub(rel, self.rel[j])));
        if dominates_prefix {
            self.cands.push(depth);
        }
        self.rel[depth] = rel;
        self.wstack[depth] = w;
        self.undo[depth] = (removed, dominates_prefix);
        // The endpoint dominating its whole prefix is exactly diamond
        // confinement; an alive interior candidate would be a mark.
        if dominates_prefix {
            if self.collect_t {
                *self.t_acc.entry((rel, depth as u32)).or_insert(0.0) += w;
            }
            if self.cands.len() == 1 {
                *self.f_acc.entry((rel, depth as u32)).or_insert(0.0) += w;
            }
        }
        true
    }

    fn leave(&mut self, depth: usize, site: Site) {
        if let PieceWeights::Annealed { grid, counts, .. } = &mut self.weights {
            let idx = grid.index(site).unwrap();
            counts[idx] -= 1;
        }
        let (removed, pushed) = std::mem::take(&mut self.undo[depth]);
        if pushed {
            self.cands.pop();
        }
        self.cands.extend(removed.into_iter().rev());
    }
}

fn visit_factors(law: &PotentialLaw, n_max: usize) -> Vec<f64> {
    let mut fac = vec![1.0; n_max + 2];
    let mut prev = 0.0;
    for l in 1..=(n_max + 1) {
        let cur = phi_beta(law, l as u32);
        fac[l] = if cur.is_infinite() { 0.0 } else { (-(cur - prev)).exp() };
        prev = cur;
    }
    fac
}

#[allow(clippy::too_many_arguments)]
fn collect_pieces(
    steps: &StepDistribution,
    geom: &SurchargeGeometry,
    cone_index: usize,
    h: &[f64; 4],
    lambda: f64,
    base: Site,
    n_max: usize,
    weights: PieceWeights<'_>,
    collect_t: bool,
) -> (FastMap<(Site, u32), f64>, FastMap<(Site, u32), f64>) {
    let mut walker = PieceWalker {
        geom,
        cone_index,
        base,
        step_factors: steps
            .support()
            .iter()
            .map(|&(s, p)| p * (site_dot(s, h) - lambda).exp())
            .collect(),
        weights,
        wstack: {
            let mut w = vec![0.0; n_max + 1];
            w[0] = 1.0;
            w
        },
        rel: vec![ORIGIN; n_max + 1],
        cands: Vec::new(),
        undo: vec![(Vec::new(), false); n_max + 1],
        collect_t,
        t_acc: fast_map(),
        f_acc: fast_map(),
    };
    walk_paths(steps, n_max, base, &mut walker);
    (walker.t_acc, walker.f_acc)
}

fn by_length(acc: FastMap<(Site, u32), f64>, n_max: usize) -> Vec<FastMap<Site, f64>> {
    let mut out: Vec<FastMap<Site, f64>> = (0..=n_max).map(|_| fast_map()).collect();
    for ((x, n), w) in acc {
        *out[n as usize].entry(x).or_insert(0.0) += w;
    }
    out
}

fn check_reach(
    env: &EnvironmentField,
    dimension: usize,
    center: Site,
    radius: i32,
) -> Result<(), DisorderError> {
    let reach = BoxRegion::cube(dimension, center, radius);
    if !env.region().contains_box(&reach) {
        return Err(PartitionError::EnvironmentCoverage(radius).into());
    }
    Ok(())
}

fn check_cone(geom: &SurchargeGeometry, cone_index: usize) -> Result<(), DisorderError> {
    if !(1..=3).contains(&cone_index) {
        return Err(DisorderError::ConeRestrictionInfeasible(format!(
            "cone index {cone_index} out of range"
        )));
    }
    let report = geom.cone_report(512);
    if !report.positive {
        return Err(DisorderError::ConeRestrictionInfeasible(
            "cone is not positive (opening >= pi)".into(),
        ));
    }
    if report.axis_in_interior.is_none() {
        return Err(DisorderError::ConeRestrictionInfeasible(
            "no lattice direction in the cone interior".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Basic quenched and annealed tables.

/// Diamond-confined partition sums for one environment: t(x, n) over paths
/// staying in D(0, x), and the irreducible restriction f(x, n). Both come
/// from the same exact depth-first sweep, so f is exact through `n_max`;
/// `f_exact_to` records that horizon for tables derived by composition.
#[derive(Clone, Debug)]
pub struct BasicQuenchedTable {
    pub h: [f64; 4],
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
    pub n_max: usize,
    pub t: Vec<FastMap<Site, f64>>,
    pub f: Vec<FastMap<Site, f64>>,
    pub f_exact_to: usize,
}

impl BasicQuenchedTable {
    /// t(n) = sum over x.
    pub fn t_total(&self, n: usize) -> f64 {
        self.t[n].values().sum()
    }

    pub fn f_total(&self, n: usize) -> f64 {
        self.f[n].values().sum()
    }
}

/// Annealed counterpart of [`BasicQuenchedTable`], with whole-path local
/// time weights; by construction it is the exact environment average of the
/// quenched table, path by path.
#[derive(Clone, Debug)]
pub struct BasicAnnealedTable {
    pub h: [f64; 4],
    pub lambda: f64,
    pub n_max: usize,
    pub t: Vec<FastMap<Site, f64>>,
    pub f: Vec<FastMap<Site, f64>>,
}

impl BasicAnnealedTable {
    pub fn t_total(&self, n: usize) -> f64 {
        self.t[n].values().sum()
    }
}

pub fn basic_quenched(
    model: &PolymerModel,
    env: &EnvironmentField,
    geom: &SurchargeGeometry,
    cone_index: usize,
    n_max: usize,
) -> Result<BasicQuenchedTable, DisorderError> {
    check_cone(geom, cone_index)?;
    if geom.h != model.h {
        return Err(DisorderError::ConeRestrictionInfeasible(
            "geometry drift differs from the model drift".into(),
        ));
    }
    if !(model.lambda > 0.0) {
        return Err(PartitionError::LambdaNonpositive(model.lambda).into());
    }
    check_reach(env, model.dimension(), ORIGIN, n_max as i32 * model.steps.range())?;
    let (t_acc, f_acc) = collect_pieces(
        &model.steps,
        geom,
        cone_index,
        &model.h,
        model.lambda,
        ORIGIN,
        n_max,
        PieceWeights::Quenched { env, beta: model.law.beta },
        true,
    );
    let mut t = by_length(t_acc, n_max);
    t[0].insert(ORIGIN, 1.0);
    Ok(BasicQuenchedTable {
        h: model.h,
        lambda: model.lambda,
        beta: model.law.beta,
        seed: env.seed(),
        n_max,
        t,
        f: by_length(f_acc, n_max),
        f_exact_to: n_max,
    })
}

pub fn basic_annealed(
    model: &PolymerModel,
    geom: &SurchargeGeometry,
    cone_index: usize,
    n_max: usize,
) -> Result<BasicAnnealedTable, DisorderError> {
    check_cone(geom, cone_index)?;
    if !(model.lambda > 0.0) {
        return Err(PartitionError::LambdaNonpositive(model.lambda).into());
    }
    let grid =
        BoxRegion::cube(model.dimension(), ORIGIN, n_max.max(1) as i32 * model.steps.range());
    let counts = vec![0; grid.len()];
    let (t_acc, f_acc) = collect_pieces(
        &model.steps,
        geom,
        cone_index,
        &model.h,
        model.lambda,
        ORIGIN,
        n_max,
        PieceWeights::Annealed { grid, counts, visit_factor: visit_factors(&model.law, n_max) },
        true,
    );
    let mut t = by_length(t_acc, n_max);
    t[0].insert(ORIGIN, 1.0);
    Ok(BasicAnnealedTable { h: model.h, lambda: model.lambda, n_max, t, f: by_length(f_acc, n_max) })
}

/// Convenience builder for the two-dimensional geometry: reads the free
/// energy off the exact ladder as a forward difference and turns the
/// boundary of K_lambda into a direction table for tau.
pub fn weak_disorder_geometry(
    steps: &StepDistribution,
    law: &PotentialLaw,
    h: [f64; 4],
    n_ref: usize,
    directions: usize,
    deltas: [f64; 3],
    cap: u64,
) -> Result<SurchargeGeometry, DisorderError> {
    let tables = AnnealedTables::build(steps, law, n_ref, cap)?;
    let lambda = tables.log_z(n_ref, &h) - tables.log_z(n_ref - 1, &h);
    if !(lambda > 0.0) {
        return Err(PartitionError::LambdaNonpositive(lambda).into());
    }
    let values = annealed_tau_table(&tables, lambda, directions)?;
    Ok(SurchargeGeometry::new(lambda, h, TauEvaluator::DirectionTable { values }, deltas, 2)?)
}

// ---------------------------------------------------------------------------
// Calibrated truncated kernel.

/// Annealed irreducible kernel truncated at `m_cap` steps, with the killing
/// rate calibrated by bisection so that the truncated mass is exactly 1 (to
/// the resolution of f64 bisection). All quenched kernels downstream reuse
/// this rate, which keeps every identity below an identity of probability
/// kernels rather than of defective ones.
#[derive(Clone, Debug)]
pub struct CalibratedKernel {
    pub steps: StepDistribution,
    pub law: PotentialLaw,
    pub geom: SurchargeGeometry,
    pub cone_index: usize,
    pub m_cap: usize,
    /// Calibrated killing rate; the cone itself stays frozen at the
    /// free-energy estimate baked into `geom`.
    pub lambda: f64,
    /// f(x, m) for m = 1..=m_cap.
    pub f: Vec<FastMap<Site, f64>>,
    pub mass: f64,
    /// Mean duration of an irreducible step.
    pub mu: f64,
    /// Mean displacement of an irreducible step.
    pub step_mean: [f64; 4],
    /// Spatial velocity per lattice step, step_mean / mu.
    pub velocity: [f64; 4],
}

impl CalibratedKernel {
    pub fn f_time_marginal(&self) -> Vec<f64> {
        (0..=self.m_cap).map(|m| self.f[m].values().sum()).collect()
    }

    /// t(n) generated by the scalar renewal recursion of the kernel.
    pub fn annealed_t(&self, n_max: usize) -> Vec<f64> {
        let fm = self.f_time_marginal();
        let mut t = vec![0.0; n_max + 1];
        t[0] = 1.0;
        for n in 1..=n_max {
            t[n] = (1..=n.min(self.m_cap)).map(|m| fm[m] * t[n - m]).sum();
        }
        t
    }

    /// Spatial kernel summed over durations.
    pub fn spatial(&self) -> FastMap<Site, f64> {
        let mut out: FastMap<Site, f64> = fast_map();
        for m in 1..=self.m_cap {
            for (&x, &w) in &self.f[m] {
                *out.entry(x).or_insert(0.0) += w;
            }
        }
        out
    }

    /// N-fold composition of the spatial kernel.
    pub fn annealed_composition(&self, n_steps: usize) -> FastMap<Site, f64> {
        let sp = self.spatial();
        let mut r: FastMap<Site, f64> = fast_map();
        r.insert(ORIGIN, 1.0);
        for _ in 0..n_steps {
            let mut next: FastMap<Site, f64> = fast_map();
            for (&y, &w) in &r {
                for (&z, &kw) in &sp {
                    *next.entry(site_add(y, z)).or_insert(0.0) += w * kw;
                }
            }
            r = next;
        }
        r
    }
}

pub fn calibrate_weak_disorder_kernel(
    steps: &StepDistribution,
    law: &PotentialLaw,
    geom: &SurchargeGeometry,
    cone_index: usize,
    m_cap: usize,
) -> Result<CalibratedKernel, DisorderError> {
    check_cone(geom, cone_index)?;
    assert!(m_cap >= 1);
    let grid = BoxRegion::cube(steps.dimension(), ORIGIN, m_cap as i32 * steps.range());
    let counts = vec![0; grid.len()];
    // one sweep at zero killing; the rate enters as e^{-lambda m} afterwards
    let (_, raw) = collect_pieces(
        steps,
        geom,
        cone_index,
        &geom.h,
        0.0,
        ORIGIN,
        m_cap,
        PieceWeights::Annealed { grid, counts, visit_factor: visit_factors(law, m_cap) },
        false,
    );
    let mass_at = |lambda: f64| -> f64 {
        let mut s = KahanSum::default();
        for (&(_, m), &w) in &raw {
            s.add(w * (-lambda * m as f64).exp());
        }
        s.value()
    };
    if !(mass_at(0.0) > 1.0) {
        return Err(DisorderError::KernelMismatch(mass_at(0.0)));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut guard = 0;
    while mass_at(hi) > 1.0 {
        hi *= 2.0;
        guard += 1;
        if guard > 60 {
            return Err(DisorderError::KernelMismatch(mass_at(hi)));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mass_at(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    let mut f: Vec<FastMap<Site, f64>> = (0..=m_cap).map(|_| fast_map()).collect();
    for (&(x, m), &w) in &raw {
        *f[m as usize].entry(x).or_insert(0.0) += w * (-lambda * m as f64).exp();
    }
    let mass = mass_at(lambda);
    let mut mu = 0.0;
    let mut step_mean = [0.0f64; 4];
    for (m, slice) in f.iter().enumerate() {
        for (&x, &w) in slice {
            mu += m as f64 * w;
            for k in 0..4 {
                step_mean[k] += x[k] as f64 * w;
            }
        }
    }
    let mut velocity = [0.0f64; 4];
    for k in 0..4 {
        velocity[k] = step_mean[k] / mu;
    }
    Ok(CalibratedKernel {
        steps: steps.clone(),
        law: law.clone(),
        geom: geom.clone(),
        cone_index,
        m_cap,
        lambda,
        f,
        mass,
        mu,
        step_mean,
        velocity,
    })
}

// ---------------------------------------------------------------------------
// Quenched renewal engine.

/// Per-base quenched kernels (duration totals and spatial slices), cached
/// across the scatter recursion for one environment view.
struct KernelCache<'a> {
    kernel: &'a CalibratedKernel,
    env: &'a EnvironmentField,
    cache: FastMap<Site, (Vec<f64>, Vec<Vec<(Site, f64)>>)>,
}

impl<'a> KernelCache<'a> {
    fn new(kernel: &'a CalibratedKernel, env: &'a EnvironmentField) -> Self {
        KernelCache { kernel, env, cache: fast_map() }
    }

    fn get(&mut self, base: Site) -> &(Vec<f64>, Vec<Vec<(Site, f64)>>) {
        if !self.cache.contains_key(&base) {
            let k = self.kernel;
            let (_, f_acc) = collect_pieces(
                &k.steps,
                &k.geom,
                k.cone_index,
                &k.geom.h,
                k.lambda,
                base,
                k.m_cap,
                PieceWeights::Quenched { env: self.env, beta: k.law.beta },
                false,
            );
            let mut totals = vec![0.0; k.m_cap + 1];
            let mut spatial: Vec<Vec<(Site, f64)>> = vec![Vec::new(); k.m_cap + 1];
            for ((x, m), w) in f_acc {
                totals[m as usize] += w;
                spatial[m as usize].push((x, w));
            }
            self.cache.insert(base, (totals, spatial));
        }
        self.cache.get(&base).unwrap()
    }
}

struct QuenchedRenewal {
    /// t(x, n) generated by last-mark scatter from the quenched kernels.
    t: Vec<FastMap<Site, f64>>,
    /// y[l] = sum_x t(x, l) (f_x - 1), the per-step ledger increments.
    y: Vec<f64>,
    /// d[l][m] = sum_x t(x, l) (f_x(m) - f(m)).
    d: Vec<Vec<f64>>,
}

fn run_quenched_renewal(
    kernel: &CalibratedKernel,
    env: &EnvironmentField,
    n_max: usize,
) -> Result<QuenchedRenewal, DisorderError> {
    let dim = kernel.steps.dimension();
    let radius = (n_max + kernel.m_cap) as i32 * kernel.steps.range();
    check_reach(env, dim, ORIGIN, radius)?;
    let fm = kernel.f_time_marginal();
    let mut cache = KernelCache::new(kernel, env);
    let mut t: Vec<FastMap<Site, f64>> = (0..=n_max).map(|_| fast_map()).collect();
    t[0].insert(ORIGIN, 1.0);
    let mut y = vec![0.0; n_max + 1];
    let mut d = vec![vec![0.0; kernel.m_cap + 1]; n_max + 1];
    for ell in 0..=n_max {
        let slice: Vec<(Site, f64)> = t[ell].iter().map(|(&x, &w)| (x, w)).collect();
        for (base, w) in slice {
            let (totals, spatial) = cache.get(base);
            let total: f64 = totals.iter().sum();
            y[ell] += w * (total - 1.0);
            for m in 1..=kernel.m_cap {
                d[ell][m] += w * (totals[m] - fm[m]);
            }
            if ell < n_max {
                let scatter: Vec<(usize, Site, f64)> = spatial
                    .iter()
                    .enumerate()
                    .filter(|(m, _)| ell + m <= n_max)
                    .flat_map(|(m, v)| v.iter().map(move |&(z, kw)| (m, z, kw)))
                    .collect();
                for (m, z, kw) in scatter {
                    *t[ell + m].entry(site_add(base, z)).or_insert(0.0) += w * kw;
                }
            }
        }
    }
    Ok(QuenchedRenewal { t, y, d })
}

// ---------------------------------------------------------------------------
// The per-n ledger.

/// Exact split of the quenched renewal mass t^omega(n) into
/// s^omega(n)/mu + eps1 - eps2 + (t(n) - 1/mu), where s^omega is the
/// running sum of the increments y[l] and the eps terms carry the
/// finite-horizon corrections. All quantities live on the truncated,
/// calibrated kernel, which is what makes the identity exact per seed and
/// per n.
#[derive(Clone, Debug)]
pub struct SinaiLedger {
    pub seed: u64,
    pub lambda: f64,
    pub mu: f64,
    pub n_max: usize,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub eps1: Vec<f64>,
    pub eps2: Vec<f64>,
    pub t_quenched: Vec<f64>,
    pub t_annealed: Vec<f64>,
    /// Relative residual of the ledger identity per n.
    pub residuals: Vec<f64>,
    /// Direct diamond sums from the input table, for cross-checks at small n.
    pub t_direct: Vec<f64>,
}

impl SinaiLedger {
    /// Coefficients multiplying (f_x(m) - f(m)) in the two correction
    /// terms: the first entry applies when l + m <= n, the second beyond.
    pub fn a_coefficient(&self, n: usize, l: usize, m: usize) -> (f64, f64) {
        if l + m <= n {
            (self.t_annealed[n - l - m] - 1.0 / self.mu, 0.0)
        } else {
            (0.0, -1.0)
        }
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,t_quenched,t_annealed,s,eps1,eps2,residual\n");
        for n in 0..=self.n_max {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                n,
                self.t_quenched[n],
                self.t_annealed[n],
                self.s[n],
                self.eps1[n],
                self.eps2[n],
                self.residuals[n]
            ));
        }
        out
    }
}

pub fn sinai_ledger(
    table: &BasicQuenchedTable,
    kernel: &CalibratedKernel,
    env: &EnvironmentField,
    n_max: usize,
) -> Result<SinaiLedger, DisorderError> {
    if (kernel.mass - 1.0).abs() > 1e-9 {
        return Err(DisorderError::KernelMismatch(kernel.mass));
    }
    if (table.lambda - kernel.lambda).abs() > 1e-9 {
        return Err(DisorderError::StampMismatch(format!(
            "table lambda {} vs kernel lambda {}",
            table.lambda, kernel.lambda
        )));
    }
    if table.h != kernel.geom.h || (table.beta - kernel.law.beta).abs() > 0.0 {
        return Err(DisorderError::StampMismatch("drift or beta differ".into()));
    }
    if table.seed != env.seed() {
        return Err(DisorderError::StampMismatch("environment seed differs".into()));
    }
    let rec = run_quenched_renewal(kernel, env, n_max)?;
    let mu = kernel.mu;
    let t_annealed = kernel.annealed_t(n_max);
    let t_quenched: Vec<f64> = (0..=n_max).map(|n| rec.t[n].values().sum()).collect();
    let mut s = vec![0.0; n_max + 1];
    let mut acc = 1.0;
    for n in 0..=n_max {
        acc += rec.y[n];
        s[n] = acc;
    }
    let mut eps1 = vec![0.0; n_max + 1];
    let mut eps2 = vec![0.0; n_max + 1];
    for n in 0..=n_max {
        for l in 0..=n {
            for m in 1..=kernel.m_cap {
                if l + m <= n {
                    eps1[n] += rec.d[l][m] * (t_annealed[n - l - m] - 1.0 / mu);
                } else {
                    eps2[n] += rec.d[l][m] / mu;
                }
            }
        }
    }
    let residuals: Vec<f64> = (0..=n_max)
        .map(|n| {
            let rhs = s[n] / mu + eps1[n] - eps2[n] + (t_annealed[n] - 1.0 / mu);
            (t_quenched[n] - rhs).abs() / t_quenched[n].abs().max(1.0)
        })
        .collect();
    let t_direct: Vec<f64> =
        (0..=table.n_max.min(n_max)).map(|n| table.t_total(n)).collect();
    Ok(SinaiLedger {
        seed: table.seed,
        lambda: kernel.lambda,
        mu,
        n_max,
        y: rec.y,
        s,
        eps1,
        eps2,
        t_quenched,
        t_annealed,
        residuals,
        t_direct,
    })
}

// ---------------------------------------------------------------------------
// Slab-conditioned second-moment diagnostics.

#[derive(Clone, Debug)]
pub struct MixingaleOptions {
    pub n_max: usize,
    pub seeds: usize,
    pub base_seed: u64,
    /// Lags k of the conditioning slab.
    pub k_list: Vec<usize>,
    /// Ledger times l at which conditional moments are probed.
    pub ell_probes: Vec<usize>,
    /// Monte Carlo resamples per conditioning; 0 skips the conditional part.
    pub resamples: usize,
    pub epsilon: f64,
}

impl Default for MixingaleOptions {
    fn default() -> Self {
        MixingaleOptions {
            n_max: 12,
            seeds: 100,
            base_seed: 2024,
            k_list: vec![0, 1, 2, 4],
            ell_probes: vec![6, 10],
            resamples: 64,
            epsilon: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MixingaleReport {
    /// (l, E y_l^2) over seeds.
    pub second_moments: Vec<(usize, f64)>,
    /// Fitted slope of log E y_l^2 against log l.
    pub ell_exponent: f64,
    /// Reference slope -(d - 1)/2 from the annealed local limit picture.
    pub reference_exponent: f64,
    /// (l, k, E[ E(y_l | slab at l - k)^2 ]).
    pub conditional: Vec<(usize, usize, f64)>,
    /// Fitted decay of the conditional moments in log(1 + k), when probed.
    pub k_exponent: Option<f64>,
    /// Whether the fitted l-profile is summable (slope < -1). Advisory
    /// only; low dimensions report the number without a verdict.
    pub summable_hint: bool,
}

/// Estimates the conditional second moments E[E(y_l | A_{l-k})^2], where
/// A_m keeps the environment on the half-space x . v <= m |v|^2 and the
/// conditional expectation is a Monte Carlo average over environments
/// resampled strictly beyond the slab. Resample streams are split off the
/// per-seed stream by hashing (seed, l, k, replica), so any worker count
/// reproduces the same numbers.
pub fn mixingale_diagnostics(
    kernel: &CalibratedKernel,
    opts: &MixingaleOptions,
) -> Result<MixingaleReport, DisorderError> {
    if opts.seeds < 8 {
        return Err(DisorderError::InsufficientSeeds { got: opts.seeds, needed: 8 });
    }
    let dim = kernel.steps.dimension();
    let radius = (opts.n_max + kernel.m_cap) as i32 * kernel.steps.range();
    let region = BoxRegion::cube(dim, ORIGIN, radius);
    let vnorm2: f64 = kernel.velocity.iter().map(|v| v * v).sum();
    let pairs: Vec<(usize, usize)> = if opts.resamples > 0 {
        opts.ell_probes
            .iter()
            .flat_map(|&l| opts.k_list.iter().map(move |&k| (l, k)))
            .collect()
    } else {
        Vec::new()
    };
    struct SeedOut {
        y_sq: Vec<f64>,
        cond_sq: Vec<f64>,
    }
    let per_seed: Vec<Result<SeedOut, DisorderError>> = (0..opts.seeds)
        .into_par_iter()
        .map(|s| {
            let env_seed = splitmix64(opts.base_seed ^ (s as u64).wrapping_mul(0x9e37));
            let env = sample_environment(&kernel.law, region.clone(), env_seed)?;
            let rec = run_quenched_renewal(kernel, &env, opts.n_max)?;
            let y_sq: Vec<f64> = rec.y.iter().map(|v| v * v).collect();
            let mut cond_sq = Vec::with_capacity(pairs.len());
            for &(l, k) in &pairs {
                let level = (l as f64 - k as f64) * vnorm2;
                let mut mean = 0.0;
                for r in 0..opts.resamples {
                    let rs = splitmix64(
                        env_seed ^ ((l as u64) << 40) ^ ((k as u64) << 24) ^ r as u64,
                    );
                    let view = env.resampled_beyond(kernel.velocity, level, rs);
                    let rr = run_quenched_renewal(kernel, &view, l)?;
                    mean += rr.y[l];
                }
                mean /= opts.resamples as f64;
                cond_sq.push(mean * mean);
            }
            Ok(SeedOut { y_sq, cond_sq })
        })
        .collect();
    let mut y_sq_mean = vec![0.0; opts.n_max + 1];
    let mut cond_mean = vec![0.0; pairs.len()];
    for out in per_seed {
        let out = out?;
        for (acc, v) in y_sq_mean.iter_mut().zip(&out.y_sq) {
            *acc += v / opts.seeds as f64;
        }
        for (acc, v) in cond_mean.iter_mut().zip(&out.cond_sq) {
            *acc += v / opts.seeds as f64;
        }
    }
    let second_moments: Vec<(usize, f64)> =
        (0..=opts.n_max).map(|l| (l, y_sq_mean[l])).collect();
    let fit_pts: Vec<(f64, f64)> = second_moments
        .iter()
        .filter(|&&(l, v)| l >= 2 && v > 0.0)
        .map(|&(l, v)| ((l as f64).ln(), v.ln()))
        .collect();
    let ell_exponent = if fit_pts.len() >= 3 {
        let xs: Vec<f64> = fit_pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = fit_pts.iter().map(|p| p.1).collect();
        linear_fit(&xs, &ys).1
    } else {
        f64::NAN
    };
    let conditional: Vec<(usize, usize, f64)> = pairs
        .iter()
        .zip(&cond_mean)
        .map(|(&(l, k), &v)| (l, k, v))
        .collect();
    let k_exponent = if opts.resamples > 0 && opts.k_list.len() >= 2 {
        let mut by_k: FastMap<usize, (f64, usize)> = fast_map();
        for &(_, k, v) in &conditional {
            let e = by_k.entry(k).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        let mut pts: Vec<(f64, f64)> = by_k
            .into_iter()
            .filter(|&(_, (sum, _))| sum > 0.0)
            .map(|(k, (sum, cnt))| ((1.0 + k as f64).ln(), (sum / cnt as f64).ln()))
            .collect();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if pts.len() >= 2 {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            Some(linear_fit(&xs, &ys).1)
        } else {
            None
        }
    } else {
        None
    };
    Ok(MixingaleReport {
        second_moments,
        ell_exponent,
        reference_exponent: -((dim as f64 - 1.0) / 2.0),
        conditional,
        k_exponent,
        summable_hint: ell_exponent < -1.0,
    })
}

// ---------------------------------------------------------------------------
// Environment tilting.

/// Exponential tilt of the potential law by e^{delta psi(V) - g(delta)}
/// with psi(v) = min(v, 1); on trap sites psi is 1 by the same formula.
#[derive(Clone, Debug)]
pub struct TiltedEnvTools {
    pub delta: f64,
    /// g(delta) = log E e^{delta psi(V)}.
    pub g: f64,
    law: PotentialLaw,
}

fn psi(v: f64) -> f64 {
    v.min(1.0)
}

/// E e^{a psi(V)} for any real a; closed forms per law.
fn psi_mgf(law: &PotentialLaw, a: f64) -> f64 {
    match &law.kind {
        PotentialKind::BernoulliTrap { p_inf } => (1.0 - p_inf) + p_inf * a.exp(),
        PotentialKind::TwoPoint { v0, v1, p } => {
            (1.0 - p) * (a * psi(*v0)).exp() + p * (a * psi(*v1)).exp()
        }
        PotentialKind::Exponential { rate } => {
            // integral over [0, 1] of e^{a v} r e^{-r v}, plus the tail v > 1
            let r = *rate;
            let body = if (a - r).abs() < 1e-12 {
                r
            } else {
                r * (((a - r).exp() - 1.0) / (a - r))
            };
            body + (a - r).exp()
        }
        PotentialKind::BoundedDiscrete { atoms } => {
            atoms.iter().map(|&(v, p)| p * (a * psi(v)).exp()).sum()
        }
    }
}

/// E e^{-s V} e^{a psi(V)}, the tilted Laplace transform; s > 0.
fn tilted_laplace(law: &PotentialLaw, s: f64, a: f64) -> f64 {
    match &law.kind {
        PotentialKind::BernoulliTrap { p_inf } => 1.0 - p_inf,
        PotentialKind::TwoPoint { v0, v1, p } => {
            (1.0 - p) * (-s * v0 + a * psi(*v0)).exp() + p * (-s * v1 + a * psi(*v1)).exp()
        }
        PotentialKind::Exponential { rate } => {
            // split the integral at v = 1, where psi saturates
            let r = *rate;
            let c = a - s - r;
            let body = if c.abs() < 1e-12 { r } else { r * ((c.exp() - 1.0) / c) };
            body + a.exp() * (r / (s + r)) * (-(s + r)).exp()
        }
        PotentialKind::BoundedDiscrete { atoms } => atoms
            .iter()
            .map(|&(v, p)| if v.is_finite() { p * (-s * v + a * psi(v)).exp() } else { 0.0 })
            .sum(),
    }
}

impl TiltedEnvTools {
    /// Importance weight dQ_delta/dQ at a potential value.
    pub fn weight(&self, v: f64) -> f64 {
        (self.delta * psi(v) - self.g).exp()
    }

    /// Tilted annealed potential -log E_delta e^{-beta l V}.
    pub fn phi_delta(&self, ell: u32) -> f64 {
        assert!(ell >= 1);
        let lap = tilted_laplace(&self.law, self.law.beta * ell as f64, self.delta);
        -(lap.ln() - self.g)
    }

    /// The tilted law itself, when the support is discrete; used to sample
    /// environments under Q_delta directly.
    pub fn tilted_law(&self) -> Option<PotentialLaw> {
        let kind = match &self.law.kind {
            PotentialKind::BernoulliTrap { p_inf } => {
                let z = (1.0 - p_inf) + p_inf * self.delta.exp();
                PotentialKind::BernoulliTrap { p_inf: p_inf * self.delta.exp() / z }
            }
            PotentialKind::TwoPoint { v0, v1, p } => {
                let w0 = (1.0 - p) * (self.delta * psi(*v0)).exp();
                let w1 = p * (self.delta * psi(*v1)).exp();
                PotentialKind::TwoPoint { v0: *v0, v1: *v1, p: w1 / (w0 + w1) }
            }
            PotentialKind::BoundedDiscrete { atoms } => {
                let z: f64 =
                    atoms.iter().map(|&(v, p)| p * (self.delta * psi(v)).exp()).sum();
                PotentialKind::BoundedDiscrete {
                    atoms: atoms
                        .iter()
                        .map(|&(v, p)| (v, p * (self.delta * psi(v)).exp() / z))
                        .collect(),
                }
            }
            PotentialKind::Exponential { .. } => return None,
        };
        PotentialLaw::new(kind, self.law.beta).ok()
    }
}

pub fn tilted_env_tools(law: &PotentialLaw, delta: f64) -> TiltedEnvTools {
    assert!(delta >= 0.0);
    TiltedEnvTools { delta, g: psi_mgf(law, delta).ln(), law: law.clone() }
}

/// Central-difference estimate of the first derivative at delta = 0 of
/// log E e^{(alpha/(1-alpha)) (g(delta) - delta psi(V))}. The two first
/// order contributions cancel exactly, so the returned value is a pure
/// discretization error.
pub fn quadratic_cancellation_probe(law: &PotentialLaw, alpha: f64, delta: f64) -> f64 {
    assert!((0.0..1.0).contains(&alpha) && delta > 0.0);
    let c = alpha / (1.0 - alpha);
    // E e^{c(g(d) - d psi)} = e^{c g(d)} E e^{-c d psi} reduces everything
    // to the psi moment generating function.
    let big_g = |d: f64| c * psi_mgf(law, d).ln() + psi_mgf(law, -c * d).ln();
    ((big_g(delta) - big_g(-delta)) / (2.0 * delta)).abs()
}

/// Central-difference slope of the tilted one-site potential at delta = 0;
/// positive association makes it strictly positive for non-trivial laws.
pub fn phi_tilt_slope(law: &PotentialLaw, ell: u32, delta: f64) -> f64 {
    let at = |d: f64| {
        let tools = tilted_env_tools(law, d.max(0.0));
        if d >= 0.0 {
            tools.phi_delta(ell)
        } else {
            // extend by the same closed forms; g and the Laplace transform
            // are entire in delta
            let lap = tilted_laplace(law, law.beta * ell as f64, d);
            -(lap.ln() - psi_mgf(law, d).ln())
        }
    };
    (at(delta) - at(-delta)) / (2.0 * delta)
}

// ---------------------------------------------------------------------------
// Fractional moments.

#[derive(Clone, Debug)]
pub struct FractionalMomentOptions {
    pub alpha: f64,
    /// Number of irreducible steps N.
    pub n_steps: usize,
    /// Tilting parameter; defaults to N^{-0.55}.
    pub delta: Option<f64>,
    pub epsilon: f64,
    pub seeds: usize,
    pub base_seed: u64,
    /// Sample environments under the tilted law and report the one-step
    /// tilted kernel mass alongside the fractional moments.
    pub tilted: bool,
    /// Tube restriction: junctions confined to 0 <= x . u <= K N |m| and
    /// lateral distance <= N^{1/2 + epsilon}, with m the kernel step mean.
    pub tube_k: Option<f64>,
}

impl Default for FractionalMomentOptions {
    fn default() -> Self {
        FractionalMomentOptions {
            alpha: 0.5,
            n_steps: 6,
            delta: None,
            epsilon: 0.05,
            seeds: 400,
            base_seed: 7,
            tilted: false,
            tube_k: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TiltSummary {
    pub g: f64,
    /// Seed-averaged mass of the one-step quenched kernel under Q_delta.
    pub one_step_mass: f64,
    pub one_step_stderr: f64,
}

#[derive(Clone, Debug)]
pub struct FractionalMomentRun {
    pub alpha: f64,
    pub n_steps: usize,
    pub delta: f64,
    pub window: (f64, f64),
    /// Per-seed sum over x of r^omega(x, N)^alpha.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    /// mean^{1/N}.
    pub per_step_factor: f64,
    /// One-sided 95% upper bound on the per-step factor.
    pub per_step_upper95: f64,
    pub decays: bool,
    /// Annealed sum over x of r(x, N) from the calibrated kernel.
    pub annealed_reference: f64,
    pub tilt: Option<TiltSummary>,
}

impl FractionalMomentRun {
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "alpha": self.alpha,
            "n_steps": self.n_steps,
            "delta": self.delta,
            "window": [self.window.0, self.window.1],
            "mean": self.mean,
            "stderr": self.stderr,
            "per_step_factor": self.per_step_factor,
            "per_step_upper95": self.per_step_upper95,
            "decays": self.decays,
            "annealed_reference": self.annealed_reference,
            "seeds": self.per_seed.len(),
        })
        .to_string()
    }
}

fn tube_ok(x: Site, step_mean: &[f64; 4], n_steps: usize, k: f64, epsilon: f64) -> bool {
    let norm: f64 = step_mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let along = site_dot(x, step_mean) / norm;
    if along < -1e-9 || along > k * n_steps as f64 * norm {
        return false;
    }
    let xx: f64 = (0..4).map(|i| (x[i] as f64).powi(2)).sum();
    let lateral = (xx - along * along).max(0.0).sqrt();
    lateral <= (n_steps as f64).powf(0.5 + epsilon)
}

/// Composes N quenched irreducible kernels and reports the seed average of
/// sum_x r^omega(x, N)^alpha together with its per-step factor. The window
/// check on delta enforces log N / N <= delta <= N^{-1/2 - epsilon}.
pub fn fractional_moment_experiment(
    kernel: &CalibratedKernel,
    opts: &FractionalMomentOptions,
) -> Result<FractionalMomentRun, DisorderError> {
    if kernel.steps.dimension() != 2 {
        return Err(DisorderError::ConeRestrictionInfeasible(
            "fractional moment experiment is two-dimensional".into(),
        ));
    }
    if !(opts.alpha > 0.0 && opts.alpha <= 1.0) {
        return Err(DisorderError::ConeRestrictionInfeasible(format!(
            "alpha {} outside (0, 1]",
            opts.alpha
        )));
    }
    let n = opts.n_steps;
    let delta = opts.delta.unwrap_or((n as f64).powf(-0.55));
    let lo = (n as f64).ln() / n as f64;
    let hi = (n as f64).powf(-0.5 - opts.epsilon);
    if delta < lo || delta > hi {
        return Err(DisorderError::WindowViolation { delta, lo, hi });
    }
    let radius = (n * kernel.m_cap) as i32 * kernel.steps.range();
    let region = BoxRegion::cube(2, ORIGIN, radius);
    let tools = tilted_env_tools(&kernel.law, delta);
    let sample_law = if opts.tilted {
        tools.tilted_law().ok_or_else(|| {
            DisorderError::ConeRestrictionInfeasible(
                "tilted sampling needs a discrete potential law".into(),
            )
        })?
    } else {
        kernel.law.clone()
    };
    let results: Vec<Result<(f64, f64), DisorderError>> = (0..opts.seeds)
        .into_par_iter()
        .map(|s| {
            let env_seed = splitmix64(opts.base_seed ^ (s as u64).wrapping_mul(0x51ab));
            let env = sample_environment(&sample_law, region.clone(), env_seed)?;
            let mut cache = KernelCache::new(kernel, &env);
            let mut r: FastMap<Site, f64> = fast_map();
            r.insert(ORIGIN, 1.0);
            let mut one_step_mass = 0.0;
            for step in 0..n {
                let mut next: FastMap<Site, f64> = fast_map();
                let slice: Vec<(Site, f64)> = r.iter().map(|(&x, &w)| (x, w)).collect();
                for (base, w) in slice {
                    let (totals, spatial) = cache.get(base);
                    if step == 0 {
                        one_step_mass = totals.iter().sum();
                    }
                    let scatter: Vec<(Site, f64)> = spatial
                        .iter()
                        .flat_map(|v| v.iter().copied())
                        .collect();
                    for (z, kw) in scatter {
                        let x = site_add(base, z);
                        if let Some(k) = opts.tube_k {
                            if !tube_ok(x, &kernel.step_mean, n, k, opts.epsilon) {
                                continue;
                            }
                        }
                        *next.entry(x).or_insert(0.0) += w * kw;
                    }
                }
                r = next;
            }
            let value: f64 = r.values().map(|&w| w.powf(opts.alpha)).sum();
            Ok((value, one_step_mass))
        })
        .collect();
    let mut per_seed = Vec::with_capacity(opts.seeds);
    let mut masses = Vec::with_capacity(opts.seeds);
    for r in results {
        let (v, m) = r?;
        per_seed.push(v);
        masses.push(m);
    }
    let (mean, stderr) = mean_and_stderr(&per_seed);
    let per_step_factor = mean.powf(1.0 / n as f64);
    let per_step_upper95 = (mean + 1.645 * stderr).max(0.0).powf(1.0 / n as f64);
    let annealed_reference: f64 = kernel.annealed_composition(n).values().sum();
    let tilt = if opts.tilted {
        let (m, se) = mean_and_stderr(&masses);
        Some(TiltSummary { g: tools.g, one_step_mass: m, one_step_stderr: se })
    } else {
        None
    };
    Ok(FractionalMomentRun {
        alpha: opts.alpha,
        n_steps: n,
        delta,
        window: (lo, hi),
        per_seed,
        mean,
        stderr,
        per_step_factor,
        per_step_upper95,
        decays: per_step_upper95 < 1.0,
        annealed_reference,
        tilt,
    })
}

// ---------------------------------------------------------------------------
// Direct quenched/annealed ratio statistics.

#[derive(Clone, Debug)]
pub struct StrongDisorderOptions {
    pub ladder: Vec<usize>,
    pub seeds: usize,
    pub base_seed: u64,
    pub cap: u64,
}

impl Default for StrongDisorderOptions {
    fn default() -> Self {
        StrongDisorderOptions { ladder: vec![4, 8, 12], seeds: 1000, base_seed: 99, cap: 1 << 26 }
    }
}

#[derive(Clone, Debug)]
pub struct StrongDisorderRow {
    pub n: usize,
    /// 5/25/50/75/95 percent order statistics of (1/n) log(Z^omega / Z).
    pub quantiles: [f64; 5],
    pub negative_fraction: f64,
    /// Sign test: median < 0 at 99% confidence.
    pub median_negative_99: bool,
    /// Mean of Z^omega / Z with its standard error (equals 1 in
    /// expectation, exactly).
    pub ratio_mean: f64,
    pub ratio_stderr: f64,
}

#[derive(Clone, Debug)]
pub struct StrongDisorderReport {
    pub rows: Vec<StrongDisorderRow>,
}

impl StrongDisorderReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("n,q05,q25,q50,q75,q95,negative_fraction,ratio_mean,ratio_stderr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.n,
                r.quantiles[0],
                r.quantiles[1],
                r.quantiles[2],
                r.quantiles[3],
                r.quantiles[4],
                r.negative_fraction,
                r.ratio_mean,
                r.ratio_stderr
            ));
        }
        out
    }
}

/// Order statistic by nearest rank; tolerates -inf entries from seeds whose
/// environment disconnects the origin.
fn order_stat(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Per-n distribution of (1/n) log(Z_n^omega / Z_n) over environment seeds,
/// with a sign test on the median. Dead environments contribute -inf to the
/// quantiles and 0 to the ratio mean.
pub fn strong_disorder_ratio(
    model: &PolymerModel,
    opts: &StrongDisorderOptions,
) -> Result<StrongDisorderReport, DisorderError> {
    assert!(!opts.ladder.is_empty() && opts.ladder.windows(2).all(|w| w[0] < w[1]));
    if opts.seeds < 8 {
        return Err(DisorderError::InsufficientSeeds { got: opts.seeds, needed: 8 });
    }
    let n_top = *opts.ladder.last().unwrap();
    let annealed = crate::partition::annealed_log_ladder(
        &model.steps,
        &model.law,
        &model.h,
        n_top,
        opts.cap,
    )?;
    let radius = n_top as i32 * model.steps.range();
    let region = BoxRegion::cube(model.dimension(), ORIGIN, radius);
    let ladders: Vec<Result<Vec<f64>, DisorderError>> = (0..opts.seeds)
        .into_par_iter()
        .map(|s| {
            let env_seed = splitmix64(opts.base_seed ^ (s as u64).wrapping_mul(0xc2b2));
            let env = sample_environment(&model.law, region.clone(), env_seed)?;
            let q = crate::partition::quenched_partition(model, &env, n_top)?;
            Ok(q.log_ladder)
        })
        .collect();
    let mut per_seed: Vec<Vec<f64>> = Vec::with_capacity(opts.seeds);
    for l in ladders {
        per_seed.push(l?);
    }
    let z99 = 2.326;
    let rows = opts
        .ladder
        .iter()
        .map(|&n| {
            let mut vals: Vec<f64> = per_seed
                .iter()
                .map(|lad| (lad[n] - annealed[n]) / n as f64)
                .collect();
            let ratios: Vec<f64> =
                vals.iter().map(|&v| if v.is_finite() { (v * n as f64).exp() } else { 0.0 }).collect();
            let (ratio_mean, ratio_stderr) = mean_and_stderr(&ratios);
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // roundoff floor so that a disorder-free run does not register
            // spurious sign flips
            let negatives = vals.iter().filter(|&&v| v < -1e-12).count();
            let s = opts.seeds as f64;
            let median_negative_99 = negatives as f64 >= s / 2.0 + z99 * s.sqrt() / 2.0;
            StrongDisorderRow {
                n,
                quantiles: [
                    order_stat(&vals, 0.05),
                    order_stat(&vals, 0.25),
                    order_stat(&vals, 0.50),
                    order_stat(&vals, 0.75),
                    order_stat(&vals, 0.95),
                ],
                negative_fraction: negatives as f64 / s,
                median_negative_99,
                ratio_mean,
                ratio_stderr,
            }
        })
        .collect();
    Ok(StrongDisorderReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::simple_walk;
    use crate::numeric::NEG_INF;

    fn traps(p_inf: f64) -> PotentialLaw {
        PotentialLaw::new(PotentialKind::BernoulliTrap { p_inf }, 1.0).unwrap()
    }

    fn euclid_geom(h: [f64; 4], dimension: usize) -> SurchargeGeometry {
        let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        SurchargeGeometry::new(
            0.5,
            h,
            TauEvaluator::Euclidean { scale: norm },
            crate::decomposition::DEFAULT_DELTAS,
            dimension,
        )
        .unwrap()
    }

    fn model(
        steps: StepDistribution,
        law: PotentialLaw,
        h: [f64; 4],
        lambda: f64,
    ) -> PolymerModel {
        PolymerModel::new(steps, law, h, lambda).unwrap()
    }

    fn env_for(law: &PotentialLaw, dim: usize, radius: i32, seed: u64) -> EnvironmentField {
        sample_environment(law, BoxRegion::cube(dim, ORIGIN, radius), seed).unwrap()
    }

    #[test]
    fn free_law_quenched_equals_annealed_exactly() {
        let h = [1.3, 0.6, 0.0, 0.0];
        let geom = euclid_geom(h, 2);
        let law = traps(0.0);
        let m = model(simple_walk(2), law.clone(), h, 0.4);
        let env = env_for(&law, 2, 10, 3);
        let quenched = basic_quenched(&m, &env, &geom, 3, 8).unwrap();
        let annealed = basic_annealed(&m, &geom, 3, 8).unwrap();
        for n in 0..=8 {
            assert_eq!(quenched.t[n].len(), annealed.t[n].len());
            for (x, w) in &annealed.t[n] {
                assert_eq!(quenched.t[n][x].to_bits(), w.to_bits(), "t at n={n} x={x:?}");
            }
            for (x, w) in &annealed.f[n] {
                assert_eq!(quenched.f[n][x].to_bits(), w.to_bits());
            }
        }
    }

    #[test]
    fn all_trap_environment_kills_everything() {
        let h = [1.0, 0.0, 0.0, 0.0];
        let geom = euclid_geom(h, 2);
        let m = model(simple_walk(2), traps(1.0), h, 0.3);
        let env = env_for(&traps(1.0), 2, 8, 0);
        let table = basic_quenched(&m, &env, &geom, 3, 6).unwrap();
        for n in 1..=6 {
            assert!(table.t[n].is_empty());
            assert!(table.f[n].is_empty());
        }
        assert_eq!(table.t_total(0), 1.0);
    }

    #[test]
    fn random_renewal_identity_is_exact() {
        let h = [1.3, 0.6, 0.0, 0.0];
        let geom = euclid_geom(h, 2);
        let law = traps(0.25);
        let m = model(simple_walk(2), law.clone(), h, 0.4);
        let n_max = 8;
        let mut checked = 0;
        for seed in [11u64, 12, 13] {
        let env = env_for(&law, 2, 24, seed);
        let table = basic_quenched(&m, &env, &geom, 3, n_max).unwrap();
        // shifted diamond tables per kernel base
        let mut shifted: FastMap<Site, Vec<FastMap<Site, f64>>> = fast_map();
        for slice in &table.f {
            for &y in slice.keys() {
                if shifted.contains_key(&y) {
                    continue;
                }
                let (t_acc, _) = collect_pieces(
                    &m.steps,
                    &geom,
                    3,
                    &m.h,
                    m.lambda,
                    y,
                    n_max,
                    PieceWeights::Quenched { env: &env, beta: m.law.beta },
                    true,
                );
                let mut t = by_length(t_acc, n_max);
                t[0].insert(ORIGIN, 1.0);
                shifted.insert(y, t);
            }
        }
        for n in 1..=n_max {
            for (&x, &tw) in &table.t[n] {
                let mut rhs = KahanSum::default();
                for mm in 1..=n {
                    for (&y, &fw) in &table.f[mm] {
                        if let Some(ty) = shifted.get(&y) {
                            if let Some(&w) = ty[n - mm].get(&site_sub(x, y)) {
                                rhs.add(fw * w);
                            }
                        }
                    }
                }
                let rel = (tw - rhs.value()).abs() / tw.abs().max(1e-300);
                assert!(rel < 1e-11, "n={n} x={x:?} lhs={tw} rhs={}", rhs.value());
                checked += 1;
            }
        }
        }
        assert!(checked > 25, "only {checked} table entries checked");
    }

    #[test]
    fn seed_averaged_table_matches_annealed() {
        let h = [1.3, 0.6, 0.0, 0.0];
        let geom = euclid_geom(h, 2);
        let law = traps(0.2);
        let m = model(simple_walk(2), law.clone(), h, 0.3);
        let n_max = 10;
        let seeds = 1000usize;
        let totals: Vec<Vec<f64>> = (0..seeds)
            .into_par_iter()
            .map(|s| {
                let env = env_for(&law, 2, 10, splitmix64(4000 + s as u64));
                let table = basic_quenched(&m, &env, &geom, 3, n_max).unwrap();
                (0..=n_max).map(|n| table.t_total(n)).collect()
            })
            .collect();
        let annealed = basic_annealed(&m, &geom, 3, n_max).unwrap();
        for n in [4usize, 7, 10] {
            let vals: Vec<f64> = totals.iter().map(|t| t[n]).collect();
            let (mean, se) = mean_and_stderr(&vals);
            let target = annealed.t_total(n);
            assert!(
                (mean - target).abs() < 4.0 * se.max(1e-12),
                "n={n} mean={mean} annealed={target} se={se}"
            );
        }
    }

    #[test]
    fn calibration_reaches_unit_mass() {
        let steps = simple_walk(2);
        let law = traps(0.05);
        let h = [2.0, 0.0, 0.0, 0.0];
        let geom = weak_disorder_geometry(&steps, &law, h, 8, 128,
            crate::decomposition::DEFAULT_DELTAS, 1 << 20)
        .unwrap();
        let kernel = calibrate_weak_disorder_kernel(&steps, &law, &geom, 3, 6).unwrap();
        assert!((kernel.mass - 1.0).abs() < 1e-12, "mass {}", kernel.mass);
        assert!(kernel.mu > 1.0 && kernel.mu < 6.0);
        assert!(kernel.velocity[0] > 0.5 && kernel.velocity[0] <= 1.0);
        // t(n) from the unit-mass kernel converges to 1/mu
        let t = kernel.annealed_t(40);
        assert!((t[40] - 1.0 / kernel.mu).abs() < 1e-3);
    }

    fn d2_preset() -> (PolymerModel, SurchargeGeometry, CalibratedKernel) {
        let steps = simple_walk(2);
        let law = traps(0.05);
        let h = [2.0, 0.0, 0.0, 0.0];
        let geom = weak_disorder_geometry(&steps, &law, h, 8, 128,
            crate::decomposition::DEFAULT_DELTAS, 1 << 20)
        .unwrap();
        let kernel = calibrate_weak_disorder_kernel(&steps, &law, &geom, 3, 6).unwrap();
        let m = model(steps, law, h, kernel.lambda);
        (m, geom, kernel)
    }

    #[test]
    fn ledger_is_trivial_without_disorder() {
        let steps = simple_walk(2);
        let law = traps(0.0);
        let h = [1.6, 0.0, 0.0, 0.0];
        let geom = euclid_geom(h, 2);
        let kernel = calibrate_weak_disorder_kernel(&steps, &law, &geom, 3, 5).unwrap();
        let m = model(steps, law.clone(), h, kernel.lambda);
        let env = env_for(&law, 2, 30, 5);
        let table = basic_quenched(&m, &env, &geom, 3, 6).unwrap();
        let ledger = sinai_ledger(&table, &kernel, &env, 25).unwrap();
        for n in 0..=25 {
            assert!(ledger.y[n].abs() < 1e-12);
            assert!((ledger.s[n] - 1.0).abs() < 1e-12);
            assert!(ledger.eps1[n].abs() < 1e-12);
            assert!(ledger.eps2[n].abs() < 1e-12);
            assert!(ledger.residuals[n] < 1e-12);
        }
    }

    #[test]
    fn ledger_identity_residual_small() {
        let (m, geom, kernel) = d2_preset();
        let n_max = 20;
        let radius = (n_max + kernel.m_cap) as i32;
        let max_res: Vec<f64> = (0..20u64)
            .into_par_iter()
            .map(|s| {
                let env = env_for(&m.law, 2, radius, splitmix64(777 ^ s));
                let table = basic_quenched(&m, &env, &geom, 3, kernel.m_cap).unwrap();
                let ledger = sinai_ledger(&table, &kernel, &env, n_max).unwrap();
                // direct diamond sums agree with the recursion through m_cap
                for n in 0..=kernel.m_cap {
                    let rel = (ledger.t_direct[n] - ledger.t_quenched[n]).abs()
                        / ledger.t_quenched[n].abs().max(1.0);
                    assert!(rel < 1e-12, "n={n}");
                }
                // the telescoped form of the running sum
                let n = n_max;
                let mut with_kernel = 0.0;
                let mut without = 0.0;
                let mut cache = KernelCache::new(&kernel, &env);
                let rec = run_quenched_renewal(&kernel, &env, n).unwrap();
                for (ell, slice) in rec.t.iter().enumerate() {
                    for (&x, &w) in slice {
                        let (totals, _) = cache.get(x);
                        with_kernel += w * totals.iter().sum::<f64>();
                        if !(ell == 0 && x == ORIGIN) {
                            without += w;
                        }
                    }
                }
                let telescoped = with_kernel - without;
                assert!((ledger.s[n] - telescoped).abs() < 1e-10);
                ledger.max_residual()
            })
            .collect();
        for r in max_res {
            assert!(r < 1e-10, "residual {r}");
        }
    }

    #[test]
    fn ledger_increments_have_zero_mean() {
        let (m, _geom, kernel) = d2_preset();
        let n_max = 10;
        let radius = (n_max + kernel.m_cap) as i32;
        let ys: Vec<Vec<f64>> = (0..400u64)
            .into_par_iter()
            .map(|s| {
                let env = env_for(&m.law, 2, radius, splitmix64(31_000 ^ s * 7919));
                let _ = &m;
                let rec = run_quenched_renewal(&kernel, &env, n_max).unwrap();
                rec.y
            })
            .collect();
        for ell in [2usize, 5, 8] {
            let vals: Vec<f64> = ys.iter().map(|y| y[ell]).collect();
            let (mean, se) = mean_and_stderr(&vals);
            assert!(mean.abs() < 4.0 * se.max(1e-12), "ell={ell} mean={mean} se={se}");
        }
    }

    #[test]
    fn disjoint_diamonds_have_small_covariance() {
        let (m, _geom, kernel) = d2_preset();
        let far = [0, 12, 0, 0];
        let pairs: Vec<(f64, f64)> = (0..1000u64)
            .into_par_iter()
            .map(|s| {
                let env = sample_environment(
                    &m.law,
                    BoxRegion::cube(2, ORIGIN, 24),
                    splitmix64(90_000 ^ s * 104_729),
                )
                .unwrap();
                let mut cache = KernelCache::new(&kernel, &env);
                let a: f64 = cache.get(ORIGIN).0.iter().sum();
                let b: f64 = cache.get(far).0.iter().sum();
                (a, b)
            })
            .collect();
        let n = pairs.len() as f64;
        let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let cov = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / (n - 1.0);
        let va = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / (n - 1.0);
        let vb = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(cov.abs() < 3.0 * (va * vb / n).sqrt(), "cov={cov}");
    }

    #[test]
    fn mixingale_without_disorder_vanishes() {
        let steps = simple_walk(2);
        let law = traps(0.0);
        let h = [1.6, 0.0, 0.0, 0.0];
        let geom = euclid_geom(h, 2);
        let kernel = calibrate_weak_disorder_kernel(&steps, &law, &geom, 3, 5).unwrap();
        let opts = MixingaleOptions {
            n_max: 8,
            seeds: 10,
            resamples: 4,
            ell_probes: vec![4],
            k_list: vec![0, 2],
            ..MixingaleOptions::default()
        };
        let report = mixingale_diagnostics(&kernel, &opts).unwrap();
        for &(_, v) in &report.second_moments {
            assert!(v < 1e-20);
        }
        for &(_, _, v) in &report.conditional {
            assert!(v < 1e-20);
        }
    }

    #[test]
    fn mixingale_d2_reports_profile() {
        let (_, _, kernel) = d2_preset();
        let opts = MixingaleOptions {
            n_max: 10,
            seeds: 40,
            base_seed: 12,
            k_list: vec![0, 1, 3],
            ell_probes: vec![4, 7],
            resamples: 8,
            epsilon: 0.1,
        };
        let report = mixingale_diagnostics(&kernel, &opts).unwrap();
        assert!(report.ell_exponent.is_finite());
        assert!((report.reference_exponent + 0.5).abs() < 1e-12);
        assert_eq!(report.conditional.len(), 6);
        assert!(report.conditional.iter().all(|&(_, _, v)| v >= 0.0 && v.is_finite()));
        assert!(report.k_exponent.is_some());
    }

    #[test]
    fn mixingale_d4_profile_is_summable() {
        let steps = simple_walk(4);
        let law = traps(0.02);
        let h = [1.8, 0.0, 0.0, 0.0];
        let geom = euclid_geom(h, 4);
        let kernel = calibrate_weak_disorder_kernel(&steps, &law, &geom, 3, 3).unwrap();
        assert!((kernel.mass - 1.0).abs() < 1e-12);
        let opts = MixingaleOptions {
            n_max: 12,
            seeds: 200,
            base_seed: 5,
            k_list: vec![],
            ell_probes: vec![],
            resamples: 0,
            epsilon: 0.1,
        };
        let report = mixingale_diagnostics(&kernel, &opts).unwrap();
        assert!(
            report.ell_exponent < -1.0,
            "fitted exponent {} (low power, but should be well below -1)",
            report.ell_exponent
        );
        assert!(report.summable_hint);
        assert!(report.k_exponent.is_none());
    }

    #[test]
    fn tilt_tools_closed_forms() {
        let law = traps(0.3);
        let t0 = tilted_env_tools(&law, 0.0);
        assert_eq!(t0.g, 0.0);
        assert_eq!(t0.weight(0.0), 1.0);
        assert_eq!(t0.weight(f64::INFINITY), 1.0);
        let delta = 0.37;
        let t = tilted_env_tools(&law, delta);
        let expected = (0.7 + 0.3 * delta.exp()).ln();
        assert!((t.g - expected).abs() < 1e-14);
        // trap model: tilting shifts phi by g only
        let phi0 = phi_beta(&law, 1);
        assert!((t.phi_delta(1) - (phi0 + t.g)).abs() < 1e-12);
        // tilted trap probability
        let tl = t.tilted_law().unwrap();
        if let PotentialKind::BernoulliTrap { p_inf } = tl.kind {
            let z = 0.7 + 0.3 * delta.exp();
            assert!((p_inf - 0.3 * delta.exp() / z).abs() < 1e-14);
        } else {
            panic!("tilted trap law changed kind");
        }
    }

    #[test]
    fn tilt_derivative_checks() {
        let laws = [
            traps(0.3),
            PotentialLaw::new(PotentialKind::TwoPoint { v0: 0.0, v1: 1.5, p: 0.4 }, 1.0).unwrap(),
            PotentialLaw::new(PotentialKind::Exponential { rate: 2.0 }, 0.7).unwrap(),
        ];
        for law in &laws {
            for ell in [1u32, 2, 4] {
                assert!(phi_tilt_slope(law, ell, 1e-4) > 0.0, "{law:?} ell={ell}");
            }
            for alpha in [0.3, 0.5, 0.7] {
                assert!(
                    quadratic_cancellation_probe(law, alpha, 1e-4) < 1e-8,
                    "{law:?} alpha={alpha}"
                );
            }
        }
    }

    fn fm_preset() -> CalibratedKernel {
        let steps = simple_walk(2);
        let law = traps(0.3);
        let h = [2.0, 0.0, 0.0, 0.0];
        let geom = weak_disorder_geometry(&steps, &law, h, 8, 128,
            crate::decomposition::DEFAULT_DELTAS, 1 << 20)
        .unwrap();
        calibrate_weak_disorder_kernel(&steps, &law, &geom, 3, 5).unwrap()
    }

    #[test]
    fn fractional_moment_alpha_one_is_annealed() {
        let kernel = fm_preset();
        let opts = FractionalMomentOptions {
            alpha: 1.0,
            n_steps: 4,
            seeds: 600,
            base_seed: 21,
            ..FractionalMomentOptions::default()
        };
        let run = fractional_moment_experiment(&kernel, &opts).unwrap();
        assert!(
            (run.mean - run.annealed_reference).abs() < 4.0 * run.stderr,
            "mean={} annealed={} stderr={}",
            run.mean,
            run.annealed_reference,
            run.stderr
        );
        assert!((run.annealed_reference - kernel.mass.powi(4)).abs() < 1e-10);
    }

    #[test]
    fn fractional_moment_no_disorder_is_deterministic() {
        let steps = simple_walk(2);
        let law = traps(0.0);
        let h = [1.6, 0.0, 0.0, 0.0];
        let geom = euclid_geom(h, 2);
        let kernel = calibrate_weak_disorder_kernel(&steps, &law, &geom, 3, 4).unwrap();
        let opts = FractionalMomentOptions {
            alpha: 0.5,
            n_steps: 4,
            seeds: 16,
            ..FractionalMomentOptions::default()
        };
        let run = fractional_moment_experiment(&kernel, &opts).unwrap();
        let first = run.per_seed[0];
        for &v in &run.per_seed {
            assert_eq!(v.to_bits(), first.to_bits());
        }
        let expected: f64 =
            kernel.annealed_composition(4).values().map(|&w| w.powf(0.5)).sum();
        assert!((first - expected).abs() < 1e-12);
    }

    #[test]
    fn fractional_moment_decays_with_strong_traps() {
        let kernel = fm_preset();
        let opts = FractionalMomentOptions {
            alpha: 0.5,
            n_steps: 6,
            seeds: 300,
            base_seed: 8,
            ..FractionalMomentOptions::default()
        };
        let run = fractional_moment_experiment(&kernel, &opts).unwrap();
        assert!(run.per_step_upper95 < 1.0, "per-step upper {}", run.per_step_upper95);
        assert!(run.decays);
        let parsed: serde_json::Value = serde_json::from_str(&run.to_json()).unwrap();
        assert_eq!(parsed["n_steps"], 6);
    }

    #[test]
    fn fractional_moment_window_and_tilt() {
        let kernel = fm_preset();
        let bad = FractionalMomentOptions {
            delta: Some(0.9),
            n_steps: 6,
            ..FractionalMomentOptions::default()
        };
        assert!(matches!(
            fractional_moment_experiment(&kernel, &bad),
            Err(DisorderError::WindowViolation { .. })
        ));
        let opts = FractionalMomentOptions {
            alpha: 0.5,
            n_steps: 6,
            seeds: 600,
            tilted: true,
            tube_k: Some(4.0),
            base_seed: 33,
            ..FractionalMomentOptions::default()
        };
        let run = fractional_moment_experiment(&kernel, &opts).unwrap();
        let tilt = run.tilt.unwrap();
        assert!(tilt.g > 0.0);
        // the tilt thickens traps, so the one-step quenched mass drops
        // strictly below the calibrated unit mass
        assert!(
            tilt.one_step_mass + 4.0 * tilt.one_step_stderr < 1.0,
            "tilted mass {}",
            tilt.one_step_mass
        );
    }

    #[test]
    fn ratio_is_one_without_disorder() {
        let m = model(simple_walk(2), traps(0.0), [0.8, 0.0, 0.0, 0.0], 0.0);
        let opts = StrongDisorderOptions {
            ladder: vec![3, 5],
            seeds: 16,
            ..StrongDisorderOptions::default()
        };
        let report = strong_disorder_ratio(&m, &opts).unwrap();
        for row in &report.rows {
            assert!(row.quantiles.iter().all(|&q| q.abs() < 1e-12));
            assert!((row.ratio_mean - 1.0).abs() < 1e-12);
            assert!(!row.median_negative_99);
        }
    }

    #[test]
    fn ratio_mean_is_one_in_expectation() {
        let m = model(simple_walk(2), traps(0.2), [1.0, 0.0, 0.0, 0.0], 0.0);
        let opts = StrongDisorderOptions {
            ladder: vec![3, 6],
            seeds: 2000,
            base_seed: 4,
            cap: 1 << 22,
        };
        let report = strong_disorder_ratio(&m, &opts).unwrap();
        for row in &report.rows {
            assert!(
                (row.ratio_mean - 1.0).abs() < 4.0 * row.ratio_stderr,
                "n={} mean={} se={}",
                row.n,
                row.ratio_mean,
                row.ratio_stderr
            );
        }
    }

    #[test]
    fn two_dimensional_traps_show_strong_disorder() {
        let m = model(simple_walk(2), traps(0.4), [2.0, 0.0, 0.0, 0.0], 0.0);
        let opts = StrongDisorderOptions {
            ladder: vec![6, 12],
            seeds: 1000,
            base_seed: 17,
            cap: 1 << 26,
        };
        let report = strong_disorder_ratio(&m, &opts).unwrap();
        let at6 = &report.rows[0];
        let at12 = &report.rows[1];
        assert!(at12.median_negative_99, "fraction {}", at12.negative_fraction);
        assert!(at12.quantiles[2] < 0.0);
        assert!(at12.quantiles[2] <= at6.quantiles[2] + 1e-12);
        let csv = report.to_csv();
        assert!(csv.lines().count() == 3);
    }

    #[test]
    fn guards_fire() {
        let (m, geom, kernel) = d2_preset();
        let env = env_for(&m.law, 2, 26, 1);
        // wrong seed stamp
        let env_other = env_for(&m.law, 2, 26, 2);
        let table = basic_quenched(&m, &env_other, &geom, 3, kernel.m_cap).unwrap();
        assert!(matches!(
            sinai_ledger(&table, &kernel, &env, 10),
            Err(DisorderError::StampMismatch(_))
        ));
        // defective mass
        let mut bad = kernel.clone();
        bad.mass = 0.9;
        let table = basic_quenched(&m, &env, &geom, 3, kernel.m_cap).unwrap();
        assert!(matches!(
            sinai_ledger(&table, &bad, &env, 10),
            Err(DisorderError::KernelMismatch(_))
        ));
        // drift mismatch between geometry and model
        let other = model(simple_walk(2), m.law.clone(), [1.0, 0.2, 0.0, 0.0], 0.5);
        assert!(matches!(
            basic_quenched(&other, &env, &geom, 3, 4),
            Err(DisorderError::ConeRestrictionInfeasible(_))
        ));
        // too few seeds
        assert!(matches!(
            mixingale_diagnostics(
                &kernel,
                &MixingaleOptions { seeds: 2, ..MixingaleOptions::default() }
            ),
            Err(DisorderError::InsufficientSeeds { .. })
        ));
        let _ = NEG_INF;
    }
}
