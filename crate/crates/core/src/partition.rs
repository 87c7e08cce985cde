//! Quenched and annealed partition functions, two-point functions, free
//! energies via sub-additivity, and point-to-hyperplane decay estimates.
//!
//! Quenched weights are per-step products, so quenched quantities go
//! through forward dynamic programming in the log domain. Annealed
//! weights interact through local times and are computed by exhaustive
//! enumeration (with an incremental depth-first walker) or by sequential
//! importance sampling beyond the enumeration cap.

use crate::environment::{phi_beta, EnvironmentError, EnvironmentField, PotentialLaw};
use crate::lattice::{
    site_add, site_dot, walk_paths, BoxRegion, LatticeError, LatticePath, PathVisitor, Site,
    StepDistribution, ORIGIN,
};
use crate::numeric::{fast_map, log_add_exp, FastMap, KahanSum, NEG_INF};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("environment region does not cover the reachable box |x|_inf <= {0}")]
    EnvironmentCoverage(i32),
    #[error("killing rate must be positive for certified truncation (lambda = {0})")]
    LambdaNonpositive(f64),
    #[error("effective sample size {ess:.1} below floor {floor:.1}")]
    DegenerateWeights { ess: f64, floor: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
}

/// Polymer model: walk, potential law (with its beta), external drift h,
/// and killing rate lambda.
#[derive(Clone, Debug)]
pub struct PolymerModel {
    pub steps: StepDistribution,
    pub law: PotentialLaw,
    pub h: [f64; 4],
    pub lambda: f64,
}

impl PolymerModel {
    pub fn new(
        steps: StepDistribution,
        law: PotentialLaw,
        h: [f64; 4],
        lambda: f64,
    ) -> Result<Self, PartitionError> {
        law.validate()?;
        if h.iter().any(|x| !x.is_finite()) {
            return Err(PartitionError::InvalidModel("drift must be finite".into()));
        }
        if !(lambda >= 0.0) {
            return Err(PartitionError::InvalidModel("lambda must be >= 0".into()));
        }
        Ok(PolymerModel { steps, law, h, lambda })
    }

    pub fn dimension(&self) -> usize {
        self.steps.dimension()
    }
}

// ---------------------------------------------------------------------------
// Quenched partition functions (forward DP, log domain).

#[derive(Clone, Debug)]
pub struct QuenchedPartition {
    /// log Z_k for k = 0..=n.
    pub log_ladder: Vec<f64>,
    /// Endpoint table log Z_n(x | h) of the final slice.
    pub endpoint: FastMap<Site, f64>,
}

impl QuenchedPartition {
    pub fn log_z(&self) -> f64 {
        *self.log_ladder.last().unwrap()
    }
}

/// Exact quenched partition function by forward DP over (site, step index).
pub fn quenched_partition(
    model: &PolymerModel,
    env: &EnvironmentField,
    n: usize,
) -> Result<QuenchedPartition, PartitionError> {
    quenched_partition_from(model, env, ORIGIN, n)
}

pub fn quenched_partition_from(
    model: &PolymerModel,
    env: &EnvironmentField,
    start: Site,
    n: usize,
) -> Result<QuenchedPartition, PartitionError> {
    let radius = n as i32 * model.steps.range();
    let reach = BoxRegion::cube(model.dimension(), start, radius);
    if !env.region().contains_box(&reach) {
        return Err(PartitionError::EnvironmentCoverage(radius));
    }
    let beta = model.law.beta;
    let mut slice: FastMap<Site, f64> = fast_map();
    slice.insert(start, 0.0);
    let mut log_ladder = vec![0.0];
    for _ in 0..n {
        let mut next: FastMap<Site, f64> = fast_map();
        for (&site, &lw) in &slice {
            for &(s, p) in model.steps.support() {
                let y = site_add(site, s);
                let v = env.value(y)?;
                if v.is_infinite() {
                    continue; // trap absorbs all weight
                }
                let contrib = lw + p.ln() + site_dot(s, &model.h) - beta * v;
                next.entry(y)
                    .and_modify(|acc| *acc = log_add_exp(*acc, contrib))
                    .or_insert(contrib);
            }
        }
        let total = {
            let vals: Vec<f64> = next.values().copied().collect();
            crate::numeric::log_sum_exp(&vals)
        };
        log_ladder.push(total);
        slice = next;
    }
    Ok(QuenchedPartition { log_ladder, endpoint: slice })
}

/// log of e^{h X(path) - lambda |path|} W^omega(path) for a single path.
pub fn quenched_log_weight(
    model: &PolymerModel,
    env: &EnvironmentField,
    path: &LatticePath,
) -> Result<f64, PartitionError> {
    let mut lw = -model.lambda * path.len() as f64
        + site_dot(path.displacement(), &model.h);
    for inc in path.increments() {
        let p = model
            .steps
            .support()
            .iter()
            .find(|&&(s, _)| s == inc)
            .map(|&(_, p)| p)
            .ok_or_else(|| PartitionError::InvalidModel("path not admissible".into()))?;
        lw += p.ln();
    }
    for &v in path.vertices().iter().skip(1) {
        let pot = env.value(v)?;
        if pot.is_infinite() {
            return Ok(NEG_INF);
        }
        lw -= model.law.beta * pot;
    }
    Ok(lw)
}

/// log of e^{h X - lambda |path|} W_d(path) with the annealed interaction
/// Phi_beta(path) = sum_x phi_beta(l_path(x)).
pub fn annealed_log_weight(model: &PolymerModel, path: &LatticePath) -> Result<f64, PartitionError> {
    let mut lw = -model.lambda * path.len() as f64
        + site_dot(path.displacement(), &model.h);
    for inc in path.increments() {
        let p = model
            .steps
            .support()
            .iter()
            .find(|&&(s, _)| s == inc)
            .map(|&(_, p)| p)
            .ok_or_else(|| PartitionError::InvalidModel("path not admissible".into()))?;
        lw += p.ln();
    }
    let profile = crate::lattice::local_time_profile(path);
    for (_, &count) in profile.counts() {
        lw -= phi_beta(&model.law, count);
    }
    Ok(lw)
}

// ---------------------------------------------------------------------------
// Annealed enumeration walker.

/// Depth-first walker carrying the annealed weight e^{-Phi} P incrementally:
/// visiting a site for the l-th time multiplies by e^{-(phi(l) - phi(l-1))}.
/// `on_node` sees every path prefix with its weight and the visit count of
/// its endpoint.
struct AnnealedWalker<'a, F: FnMut(usize, Site, f64, u32)> {
    grid: &'a BoxRegion,
    counts: Vec<u32>,
    weights: Vec<f64>,
    step_factors: Vec<f64>,
    visit_factor: Vec<f64>,
    on_node: F,
}

impl<'a, F: FnMut(usize, Site, f64, u32)> PathVisitor for AnnealedWalker<'a, F> {
    fn enter(&mut self, depth: usize, site: Site, step_index: usize) -> bool {
        let idx = self.grid.index(site).expect("walker grid covers reach");
        self.counts[idx] += 1;
        let c = self.counts[idx];
        let w = self.weights[depth - 1] * self.step_factors[step_index] * self.visit_factor[c as usize];
        if w <= 0.0 {
            self.counts[idx] -= 1;
            return false;
        }
        self.weights[depth] = w;
        (self.on_node)(depth, site, w, c);
        true
    }

    fn leave(&mut self, _depth: usize, site: Site) {
        let idx = self.grid.index(site).unwrap();
        self.counts[idx] -= 1;
    }
}

fn check_cap(steps: &StepDistribution, n_max: usize, cap: u64) -> Result<(), PartitionError> {
    let b = steps.support().len() as u64;
    let mut needed: u64 = 0;
    let mut pow: u64 = 1;
    for _ in 0..n_max {
        pow = pow.saturating_mul(b);
        needed = needed.saturating_add(pow);
    }
    if needed > cap {
        return Err(LatticeError::EnumerationCapExceeded { needed, cap }.into());
    }
    Ok(())
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

/// Runs the annealed walker over all paths of length <= n_max from `start`.
fn run_annealed_walk<F: FnMut(usize, Site, f64, u32)>(
    steps: &StepDistribution,
    law: &PotentialLaw,
    h: &[f64; 4],
    n_max: usize,
    start: Site,
    on_node: F,
) {
    let grid = BoxRegion::cube(steps.dimension(), start, (n_max.max(1)) as i32 * steps.range());
    let step_factors: Vec<f64> = steps
        .support()
        .iter()
        .map(|&(s, p)| p * site_dot(s, h).exp())
        .collect();
    let mut walker = AnnealedWalker {
        grid: &grid,
        counts: vec![0; grid.len()],
        weights: {
            let mut w = vec![0.0; n_max + 1];
            w[0] = 1.0;
            w
        },
        step_factors,
        visit_factor: visit_factors(law, n_max),
        on_node,
    };
    walk_paths(steps, n_max, start, &mut walker);
}

/// Exact annealed ladder log Z_k(h) for k = 0..=n_max by enumeration.
pub fn annealed_log_ladder(
    steps: &StepDistribution,
    law: &PotentialLaw,
    h: &[f64; 4],
    n_max: usize,
    cap: u64,
) -> Result<Vec<f64>, PartitionError> {
    check_cap(steps, n_max, cap)?;
    let mut acc: Vec<KahanSum> = vec![KahanSum::default(); n_max + 1];
    run_annealed_walk(steps, law, h, n_max, ORIGIN, |depth, _site, w, _c| {
        acc[depth].add(w);
    });
    let mut out = vec![0.0];
    out.extend(acc[1..].iter().map(|k| k.value().ln()));
    Ok(out)
}

pub fn annealed_partition_exact(
    model: &PolymerModel,
    n: usize,
    cap: u64,
) -> Result<f64, PartitionError> {
    Ok(*annealed_log_ladder(&model.steps, &model.law, &model.h, n, cap)?
        .last()
        .unwrap())
}

// ---------------------------------------------------------------------------
// Annealed endpoint tables and two-point functions.

/// Endpoint-resolved annealed sums, built in one enumeration pass:
/// z[n][x]     = sum over n-step paths ending at x of W_d(path),
/// first[n][x] = same restricted to paths with l_path(x) = 1.
/// Drift and killing are applied afterwards, so a single build serves
/// ladders, G/H two-point functions, and inverse-correlation tables.
pub struct AnnealedTables {
    pub dimension: usize,
    pub n_max: usize,
    pub z: Vec<FastMap<Site, f64>>,
    pub first: Vec<FastMap<Site, f64>>,
}

impl AnnealedTables {
    pub fn build(
        steps: &StepDistribution,
        law: &PotentialLaw,
        n_max: usize,
        cap: u64,
    ) -> Result<Self, PartitionError> {
        check_cap(steps, n_max, cap)?;
        let mut z: Vec<FastMap<Site, f64>> = (0..=n_max).map(|_| fast_map()).collect();
        let mut first: Vec<FastMap<Site, f64>> = (0..=n_max).map(|_| fast_map()).collect();
        z[0].insert(ORIGIN, 1.0);
        run_annealed_walk(steps, law, &[0.0; 4], n_max, ORIGIN, |depth, site, w, c| {
            *z[depth].entry(site).or_insert(0.0) += w;
            if c == 1 {
                *first[depth].entry(site).or_insert(0.0) += w;
            }
        });
        Ok(AnnealedTables { dimension: steps.dimension(), n_max, z, first })
    }

    pub fn log_z(&self, n: usize, h: &[f64; 4]) -> f64 {
        let sum: f64 = self.z[n]
            .iter()
            .map(|(&x, &w)| w * site_dot(x, h).exp())
            .sum();
        sum.ln()
    }

    /// Truncated G_lambda(x) = sum_{n <= n_max} e^{-lambda n} Z_n(x | 0);
    /// includes the n = 0 term 1{x = 0}.
    pub fn g_lambda(&self, x: Site, lambda: f64) -> f64 {
        (0..=self.n_max)
            .map(|n| (-lambda * n as f64).exp() * self.z[n].get(&x).copied().unwrap_or(0.0))
            .sum()
    }

    /// Truncated H_lambda(x): restriction to paths visiting x exactly once.
    pub fn h_lambda(&self, x: Site, lambda: f64) -> f64 {
        (1..=self.n_max)
            .map(|n| (-lambda * n as f64).exp() * self.first[n].get(&x).copied().unwrap_or(0.0))
            .sum()
    }

    /// First-hitting-at-time-n partition function Zhat_n(x).
    pub fn zhat(&self, x: Site, n: usize) -> f64 {
        self.first[n].get(&x).copied().unwrap_or(0.0)
    }

    /// Provable bound on the truncation tail of G/H, using Z_n(0) <= 1.
    pub fn truncation_bound(&self, lambda: f64) -> Result<f64, PartitionError> {
        if !(lambda > 0.0) {
            return Err(PartitionError::LambdaNonpositive(lambda));
        }
        let q = (-lambda).exp();
        Ok(q.powi(self.n_max as i32 + 1) / (1.0 - q))
    }
}

#[derive(Clone, Debug)]
pub struct TwoPointValues {
    pub g: f64,
    pub h_first: f64,
    /// Zhat_n(x) for n = 0..=n_max.
    pub zhat: Vec<f64>,
    pub truncation_bound: f64,
}

pub fn two_point_functions(
    steps: &StepDistribution,
    law: &PotentialLaw,
    lambda: f64,
    x: Site,
    n_max: usize,
    cap: u64,
) -> Result<TwoPointValues, PartitionError> {
    if !(lambda > 0.0) {
        return Err(PartitionError::LambdaNonpositive(lambda));
    }
    let tables = AnnealedTables::build(steps, law, n_max, cap)?;
    Ok(two_point_from_tables(&tables, lambda, x)?)
}

pub fn two_point_from_tables(
    tables: &AnnealedTables,
    lambda: f64,
    x: Site,
) -> Result<TwoPointValues, PartitionError> {
    let truncation_bound = tables.truncation_bound(lambda)?;
    Ok(TwoPointValues {
        g: tables.g_lambda(x, lambda),
        h_first: tables.h_lambda(x, lambda),
        zhat: (0..=tables.n_max).map(|n| tables.zhat(x, n)).collect(),
        truncation_bound,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo annealed estimator (sequential importance sampling).

#[derive(Clone, Debug)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub effective_sample_size: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct McOptions {
    /// Systematic-resampling (enrichment) interval; `None` disables it.
    /// Resampling keeps the population mean unbiased: every resample event
    /// replaces weights by their population mean.
    pub resample_every: Option<usize>,
    pub ess_floor: f64,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { resample_every: None, ess_floor: 16.0 }
    }
}

/// Unbiased estimator of Z_n(h): grow chains from the walk law and weight
/// by e^{h·step} e^{-(phi increment at the newly visited site)}.
pub fn annealed_partition_mc(
    model: &PolymerModel,
    n: usize,
    chains: usize,
    seed: u64,
    options: McOptions,
) -> Result<McEstimate, PartitionError> {
    assert!(n >= 1 && chains >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cum: Vec<(Site, f64)> = {
        let mut acc = 0.0;
        model
            .steps
            .support()
            .iter()
            .map(|&(s, p)| {
                acc += p;
                (s, acc)
            })
            .collect()
    };
    let visit_fac = visit_factors(&model.law, n);
    let mut positions: Vec<Site> = vec![ORIGIN; chains];
    let mut weights: Vec<f64> = vec![1.0; chains];
    let mut visits: Vec<FastMap<Site, u32>> = (0..chains).map(|_| fast_map()).collect();
    for step_idx in 0..n {
        for c in 0..chains {
            let u: f64 = rng.gen();
            let &(s, _) = cum
                .iter()
                .find(|&&(_, edge)| u < edge)
                .unwrap_or(&cum[cum.len() - 1]);
            let site = site_add(positions[c], s);
            positions[c] = site;
            let count = visits[c].entry(site).or_insert(0);
            *count += 1;
            weights[c] *= site_dot(s, &model.h).exp() * visit_fac[*count as usize];
        }
        if let Some(every) = options.resample_every {
            if (step_idx + 1) % every == 0 && step_idx + 1 < n {
                systematic_resample(&mut rng, &mut positions, &mut weights, &mut visits);
            }
        }
    }
    let total: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    let ess = if sq > 0.0 { total * total / sq } else { 0.0 };
    if ess < options.ess_floor {
        return Err(PartitionError::DegenerateWeights { ess, floor: options.ess_floor });
    }
    let mean = total / chains as f64;
    let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / (chains as f64 - 1.0);
    Ok(McEstimate {
        estimate: mean,
        stderr: (var / chains as f64).sqrt(),
        effective_sample_size: ess,
    })
}

fn systematic_resample(
    rng: &mut ChaCha8Rng,
    positions: &mut [Site],
    weights: &mut [f64],
    visits: &mut [FastMap<Site, u32>],
) {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return;
    }
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &w in weights.iter() {
        acc += w;
        cumulative.push(acc);
    }
    let offset: f64 = rng.gen::<f64>();
    let mut picks = Vec::with_capacity(n);
    let mut j = 0usize;
    for i in 0..n {
        let target = (i as f64 + offset) / n as f64 * total;
        while j + 1 < n && cumulative[j] < target {
            j += 1;
        }
        picks.push(j);
    }
    let old_positions = positions.to_vec();
    let old_visits: Vec<FastMap<Site, u32>> = visits.to_vec();
    let mean = total / n as f64;
    for (i, &src) in picks.iter().enumerate() {
        positions[i] = old_positions[src];
        visits[i] = old_visits[src].clone();
        weights[i] = mean;
    }
}

// ---------------------------------------------------------------------------
// Free energies.

#[derive(Clone, Debug)]
pub struct FreeEnergySample {
    pub n: usize,
    pub value: f64,
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FreeEnergyEstimate {
    pub samples: Vec<FreeEnergySample>,
    /// Lower bracket for lambda(h); certified in annealed mode by
    /// superadditivity of log Z_n(h).
    pub lower: f64,
    /// Upper bracket: log E e^{h·X} per step (Phi_beta >= 0).
    pub upper: f64,
    pub certified: bool,
}

pub enum FreeEnergyMode {
    AnnealedExact { cap: u64 },
    /// Independent environments per ladder entry by default; `fixed_omega`
    /// reuses one realization across the whole ladder.
    Quenched { seeds: usize, base_seed: u64, fixed_omega: bool },
}

pub fn free_energy(
    model: &PolymerModel,
    ladder: &[usize],
    mode: FreeEnergyMode,
) -> Result<FreeEnergyEstimate, PartitionError> {
    assert!(ladder.windows(2).all(|w| w[0] < w[1]), "ladder must increase");
    let upper = model.steps.log_mgf(&model.h);
    match mode {
        FreeEnergyMode::AnnealedExact { cap } => {
            let n_top = *ladder.last().unwrap();
            let logs = annealed_log_ladder(&model.steps, &model.law, &model.h, n_top, cap)?;
            let samples: Vec<FreeEnergySample> = ladder
                .iter()
                .map(|&n| FreeEnergySample { n, value: logs[n] / n as f64, stderr: None })
                .collect();
            let lower = samples.iter().map(|s| s.value).fold(NEG_INF, f64::max);
            Ok(FreeEnergyEstimate { samples, lower, upper, certified: true })
        }
        FreeEnergyMode::Quenched { seeds, base_seed, fixed_omega } => {
            let mut samples = Vec::new();
            for (slot, &n) in ladder.iter().enumerate() {
                let mut values = Vec::with_capacity(seeds);
                for s in 0..seeds {
                    let env_seed = if fixed_omega {
                        crate::numeric::splitmix64(base_seed ^ s as u64)
                    } else {
                        crate::numeric::splitmix64(base_seed ^ ((slot as u64) << 32) ^ s as u64)
                    };
                    let region =
                        BoxRegion::cube(model.dimension(), ORIGIN, n as i32 * model.steps.range());
                    let env = crate::environment::sample_environment(&model.law, region, env_seed)?;
                    let z = quenched_partition(model, &env, n)?;
                    values.push(z.log_z() / n as f64);
                }
                let (mean, stderr) = crate::numeric::mean_and_stderr(&values);
                samples.push(FreeEnergySample { n, value: mean, stderr: Some(stderr) });
            }
            let last = samples.last().unwrap();
            let band = 2.0 * last.stderr.unwrap_or(0.0);
            Ok(FreeEnergyEstimate {
                lower: last.value - band,
                upper: (last.value + band).min(upper),
                samples,
                certified: false,
            })
        }
    }
}

/// Sub-additivity bracket: for a_{n+m} <= a_n + a_m + b_{n+m} with b
/// nondecreasing and sum b_k / k(k+1) finite, the limit xi of a_n/n obeys
/// xi <= a_n/n - b_n/n + 4 sum_{k >= 2n} b_k / (k(k+1)). The b-tail beyond
/// the data is extended by its last value.
pub fn hammersley_upper_bounds(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    let len = a.len();
    let tail_from = |start: usize| -> f64 {
        let mut s = 0.0;
        for k in start..=len {
            let bk = b[k.min(len) - 1];
            s += bk / (k as f64 * (k + 1) as f64);
        }
        // constant extension of b beyond the data: sum_{k > len} 1/(k(k+1)) = 1/(len+1)
        s + b[len - 1] / (len as f64 + 1.0)
    };
    (1..=len)
        .map(|n| {
            let an = a[n - 1] / n as f64;
            let bn = b[n - 1] / n as f64;
            let tail = if 2 * n <= len { tail_from(2 * n) } else { b[len - 1] / (2.0 * n as f64 - 1.0) };
            an - bn + 4.0 * tail
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Point-to-hyperplane decay.

#[derive(Clone, Debug)]
pub struct HyperplaneDecay {
    /// (t, log D(t)) pairs.
    pub table: Vec<(f64, f64)>,
    /// Fitted decay rate: -log D(t) ~ rate * t + intercept.
    pub rate: f64,
    pub intercept: f64,
    pub max_residual: f64,
}

/// D(t): killed paths stopped at first entry into {x · h >= t}; the t = 0
/// value is 1 by convention (the origin already lies in the half-space).
pub fn point_to_hyperplane(
    model: &PolymerModel,
    env: &EnvironmentField,
    t_ladder: &[f64],
    n_cap: usize,
) -> Result<HyperplaneDecay, PartitionError> {
    if !(model.lambda > 0.0) {
        return Err(PartitionError::LambdaNonpositive(model.lambda));
    }
    if model.h.iter().all(|&x| x == 0.0) {
        return Err(PartitionError::InvalidModel("hyperplane normal h must be nonzero".into()));
    }
    let mut table = Vec::new();
    for &t in t_ladder {
        let log_d = if t <= 0.0 {
            0.0
        } else {
            hyperplane_dp(model, env, t, n_cap)?
        };
        table.push((t, log_d));
    }
    let fit_points: Vec<(f64, f64)> = table.iter().filter(|&&(t, _)| t > 0.0).cloned().collect();
    let (intercept, rate, max_residual) = if fit_points.len() >= 2 {
        let xs: Vec<f64> = fit_points.iter().map(|&(t, _)| t).collect();
        let ys: Vec<f64> = fit_points.iter().map(|&(_, d)| -d).collect();
        crate::numeric::linear_fit(&xs, &ys)
    } else {
        (0.0, f64::NAN, f64::NAN)
    };
    Ok(HyperplaneDecay { table, rate, intercept, max_residual })
}

fn hyperplane_dp(
    model: &PolymerModel,
    env: &EnvironmentField,
    t: f64,
    n_cap: usize,
) -> Result<f64, PartitionError> {
    let reach = BoxRegion::cube(model.dimension(), ORIGIN, n_cap as i32 * model.steps.range());
    if !env.region().contains_box(&reach) {
        return Err(PartitionError::EnvironmentCoverage(n_cap as i32 * model.steps.range()));
    }
    let beta = model.law.beta;
    let kill = (-model.lambda).exp();
    let mut active: FastMap<Site, f64> = fast_map();
    active.insert(ORIGIN, 1.0);
    let mut d = 0.0f64;
    for _ in 0..n_cap {
        let mut next: FastMap<Site, f64> = fast_map();
        for (&site, &w) in &active {
            for &(s, p) in model.steps.support() {
                let y = site_add(site, s);
                if !reach.contains(y) {
                    continue;
                }
                let v = env.value(y)?;
                if v.is_infinite() {
                    continue;
                }
                let contrib = w * kill * p * (-beta * v).exp();
                if site_dot(y, &model.h) >= t {
                    d += contrib;
                } else {
                    *next.entry(y).or_insert(0.0) += contrib;
                }
            }
        }
        active = next;
        let remaining: f64 = active.values().sum();
        // each future path pays at least e^{-lambda} per extra step
        if remaining * kill / (1.0 - kill) < 1e-14 * d.max(1e-300) {
            break;
        }
    }
    if d <= 0.0 {
        Ok(NEG_INF)
    } else {
        Ok(d.ln())
    }
}
