//! Random environment {V_x}: potential-law presets, reproducible
//! counter-based sampling over boxes, the annealed one-site potential
//! phi_beta, and its attractivity checks.

use crate::lattice::{BoxRegion, Site};
use crate::numeric::{splitmix64, unit_uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel for trap sites: e^{-beta * INF} is treated as exactly 0 in
/// all weight arithmetic.
pub const TRAP: f64 = f64::INFINITY;

#[derive(Debug, Error, PartialEq)]
pub enum EnvironmentError {
    #[error("region of {0} sites exceeds the materialization cap {1}")]
    RegionTooLarge(usize, usize),
    #[error("site {0:?} is outside the sampled region")]
    OutsideRegion(Vec<i32>),
    #[error("law has no closed-form Laplace transform")]
    UnsupportedLaw,
    #[error("invalid potential law: {0}")]
    InvalidLaw(String),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialKind {
    /// V = +inf with probability `p_inf`, otherwise 0. Covers the pure-trap
    /// model at any beta, since e^{-beta V} is 1 or 0 regardless.
    BernoulliTrap { p_inf: f64 },
    TwoPoint { v0: f64, v1: f64, p: f64 },
    Exponential { rate: f64 },
    BoundedDiscrete { atoms: Vec<(f64, f64)> },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PotentialLaw {
    pub kind: PotentialKind,
    /// Inverse temperature; must be positive and finite.
    pub beta: f64,
}

/// Site-percolation thresholds p_c(Z^d) used by the advisory (A2) check.
/// Standard numerical estimates, external to this crate's own computations.
pub const SITE_PERCOLATION_PC: [(usize, f64); 4] =
    [(1, 1.0), (2, 0.592746), (3, 0.311608), (4, 0.196886)];

#[derive(Clone, Debug)]
pub struct LawReport {
    /// (A1): law is non-trivial and 0 is in its support.
    pub a1_ok: bool,
    /// Q(V < infinity).
    pub finite_prob: f64,
    /// (A2) advisory: finite_prob vs. the percolation threshold for d.
    pub a2_supercritical: Option<bool>,
}

impl PotentialLaw {
    pub fn new(kind: PotentialKind, beta: f64) -> Result<Self, EnvironmentError> {
        let law = PotentialLaw { kind, beta };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<(), EnvironmentError> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(EnvironmentError::InvalidLaw("beta must be in (0, inf)".into()));
        }
        let bad = |msg: &str| Err(EnvironmentError::InvalidLaw(msg.into()));
        match &self.kind {
            PotentialKind::BernoulliTrap { p_inf } => {
                if !(0.0..=1.0).contains(p_inf) {
                    return bad("p_inf must lie in [0, 1]");
                }
            }
            PotentialKind::TwoPoint { v0, v1, p } => {
                if *v0 < 0.0 || *v1 < 0.0 || !v0.is_finite() || !v1.is_finite() {
                    return bad("two-point values must be finite and nonnegative");
                }
                if !(0.0..=1.0).contains(p) {
                    return bad("two-point probability must lie in [0, 1]");
                }
            }
            PotentialKind::Exponential { rate } => {
                if !(*rate > 0.0) {
                    return bad("exponential rate must be positive");
                }
            }
            PotentialKind::BoundedDiscrete { atoms } => {
                if atoms.is_empty() {
                    return bad("discrete law needs at least one atom");
                }
                let mut total = 0.0;
                for &(v, p) in atoms {
                    if v < 0.0 || p < 0.0 {
                        return bad("atoms must have nonnegative value and probability");
                    }
                    total += p;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return bad("atom probabilities must sum to 1");
                }
            }
        }
        Ok(())
    }

    pub fn report(&self, dimension: Option<usize>) -> LawReport {
        let finite_prob = match &self.kind {
            PotentialKind::BernoulliTrap { p_inf } => 1.0 - p_inf,
            PotentialKind::TwoPoint { .. } | PotentialKind::Exponential { .. } => 1.0,
            PotentialKind::BoundedDiscrete { atoms } => {
                atoms.iter().filter(|(v, _)| v.is_finite()).map(|&(_, p)| p).sum()
            }
        };
        let zero_mass = match &self.kind {
            PotentialKind::BernoulliTrap { p_inf } => 1.0 - p_inf,
            PotentialKind::TwoPoint { v0, v1, p } => {
                (if *v0 == 0.0 { 1.0 - p } else { 0.0 }) + (if *v1 == 0.0 { *p } else { 0.0 })
            }
            PotentialKind::Exponential { .. } => 1.0, // 0 in the closure of the support
            PotentialKind::BoundedDiscrete { atoms } => {
                atoms.iter().filter(|(v, _)| *v == 0.0).map(|&(_, p)| p).sum()
            }
        };
        let non_trivial = match &self.kind {
            PotentialKind::BernoulliTrap { p_inf } => *p_inf > 0.0 && *p_inf < 1.0,
            PotentialKind::TwoPoint { v0, v1, p } => v0 != v1 && *p > 0.0 && *p < 1.0,
            PotentialKind::Exponential { .. } => true,
            PotentialKind::BoundedDiscrete { atoms } => {
                atoms.iter().filter(|(_, p)| *p > 0.0).count() > 1
            }
        };
        let a2_supercritical = dimension.and_then(|d| {
            SITE_PERCOLATION_PC
                .iter()
                .find(|&&(dd, _)| dd == d)
                .map(|&(_, pc)| finite_prob > pc)
        });
        LawReport { a1_ok: non_trivial && zero_mass > 0.0, finite_prob, a2_supercritical }
    }

    /// E e^{-s V} with the trap convention e^{-s * inf} = 0 for s > 0.
    pub fn laplace(&self, s: f64) -> f64 {
        assert!(s > 0.0, "Laplace transform needed only for s > 0");
        match &self.kind {
            PotentialKind::BernoulliTrap { p_inf } => 1.0 - p_inf,
            PotentialKind::TwoPoint { v0, v1, p } => {
                (1.0 - p) * (-s * v0).exp() + p * (-s * v1).exp()
            }
            PotentialKind::Exponential { rate } => rate / (rate + s),
            PotentialKind::BoundedDiscrete { atoms } => atoms
                .iter()
                .map(|&(v, p)| if v.is_finite() { p * (-s * v).exp() } else { 0.0 })
                .sum(),
        }
    }

    /// Inverse-CDF draw from a single uniform; the only sampling primitive,
    /// so that per-site counter-based draws stay reproducible.
    pub fn quantile(&self, u: f64) -> f64 {
        match &self.kind {
            PotentialKind::BernoulliTrap { p_inf } => {
                if u < *p_inf {
                    TRAP
                } else {
                    0.0
                }
            }
            PotentialKind::TwoPoint { v0, v1, p } => {
                if u < *p {
                    *v1
                } else {
                    *v0
                }
            }
            PotentialKind::Exponential { rate } => -(-u).ln_1p() / rate,
            PotentialKind::BoundedDiscrete { atoms } => {
                let mut acc = 0.0;
                for &(v, p) in atoms {
                    acc += p;
                    if u < acc {
                        return v;
                    }
                }
                atoms.last().unwrap().0
            }
        }
    }
}

/// phi_beta(l) = -log E e^{-beta l V}; +inf only for an a.s.-infinite law.
pub fn phi_beta(law: &PotentialLaw, ell: u32) -> f64 {
    assert!(ell >= 1, "phi_beta is defined for l >= 1");
    let lap = law.laplace(law.beta * ell as f64);
    if lap <= 0.0 {
        f64::INFINITY
    } else {
        -lap.ln()
    }
}

/// Per-site increments phi(l) - phi(l-1) for l = 1..=l_max, used by the
/// incremental annealed weight bookkeeping.
pub fn phi_increments(law: &PotentialLaw, l_max: u32) -> Vec<f64> {
    let mut prev = 0.0;
    (1..=l_max)
        .map(|l| {
            let cur = phi_beta(law, l);
            let inc = cur - prev;
            prev = cur;
            inc
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct AttractivityReport {
    pub violations: Vec<String>,
    pub phi: Vec<f64>,
}

impl AttractivityReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks phi(l+m) <= phi(l) + phi(m), monotonicity, phi(1) minimality,
/// and that phi(l)/l is nonincreasing, for all l+m <= l_max.
pub fn check_attractivity(law: &PotentialLaw, l_max: u32) -> AttractivityReport {
    assert!(l_max >= 2);
    let phi: Vec<f64> = (1..=l_max).map(|l| phi_beta(law, l)).collect();
    let get = |l: u32| phi[(l - 1) as usize];
    let mut violations = Vec::new();
    let tol = 1e-12;
    for l in 1..l_max {
        for m in 1..=(l_max - l) {
            if get(l + m) > get(l) + get(m) + tol {
                violations.push(format!("subadditivity fails at l={l}, m={m}"));
            }
        }
    }
    for l in 1..l_max {
        if get(l + 1) + tol < get(l) {
            violations.push(format!("phi decreases from l={l} to {}", l + 1));
        }
        let ratio_l = get(l) / l as f64;
        let ratio_next = get(l + 1) / (l + 1) as f64;
        if ratio_next > ratio_l + tol {
            violations.push(format!("phi(l)/l increases from l={l}"));
        }
    }
    if phi.iter().any(|&p| p + tol < get(1)) {
        violations.push("phi(1) is not minimal".into());
    }
    AttractivityReport { violations, phi }
}

const MATERIALIZE_CAP: usize = 1 << 26;

enum Backing {
    Materialized(Vec<f64>),
    /// Values derived on demand from (seed, site); used when the region
    /// exceeds the memory cap (long thin tubes and similar).
    Hashed,
    /// Base values inside the half-space {x · normal <= level}, alternative
    /// values strictly beyond; the conditional-resampling oracle.
    Split {
        base: Box<EnvironmentField>,
        alt: Box<EnvironmentField>,
        normal: [f64; 4],
        level: f64,
    },
}

/// A realization of the i.i.d. potential field over a finite box.
pub struct EnvironmentField {
    law: PotentialLaw,
    region: BoxRegion,
    seed: u64,
    backing: Backing,
}

fn site_draw(law: &PotentialLaw, seed: u64, site: Site) -> f64 {
    let mut state = splitmix64(seed ^ 0x7c15_9a63_55aa_10f1);
    for &c in &site {
        state = splitmix64(state ^ (c as i64 as u64));
    }
    law.quantile(unit_uniform(splitmix64(state)))
}

impl EnvironmentField {
    pub fn law(&self) -> &PotentialLaw {
        &self.law
    }

    pub fn region(&self) -> &BoxRegion {
        &self.region
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn value(&self, site: Site) -> Result<f64, EnvironmentError> {
        if !self.region.contains(site) {
            return Err(EnvironmentError::OutsideRegion(site.to_vec()));
        }
        Ok(self.value_unchecked(site))
    }

    fn value_unchecked(&self, site: Site) -> f64 {
        match &self.backing {
            Backing::Materialized(values) => values[self.region.index(site).unwrap()],
            Backing::Hashed => site_draw(&self.law, self.seed, site),
            Backing::Split { base, alt, normal, level } => {
                let proj: f64 = (0..4).map(|k| site[k] as f64 * normal[k]).sum();
                if proj <= *level {
                    base.value_unchecked(site)
                } else {
                    alt.value_unchecked(site)
                }
            }
        }
    }

    /// e^{-beta V(site)}; exactly 0 on traps.
    pub fn step_factor(&self, site: Site) -> Result<f64, EnvironmentError> {
        let v = self.value(site)?;
        Ok(if v.is_infinite() { 0.0 } else { (-self.law.beta * v).exp() })
    }

    /// Conditional-resampling view: values in {x · normal <= level} come from
    /// `self`, values beyond from a field drawn with `resample_seed`.
    pub fn resampled_beyond(&self, normal: [f64; 4], level: f64, resample_seed: u64) -> EnvironmentField {
        let alt = EnvironmentField {
            law: self.law.clone(),
            region: self.region.clone(),
            seed: resample_seed,
            backing: Backing::Hashed,
        };
        let base = EnvironmentField {
            law: self.law.clone(),
            region: self.region.clone(),
            seed: self.seed,
            backing: match &self.backing {
                Backing::Materialized(v) => Backing::Materialized(v.clone()),
                _ => Backing::Hashed,
            },
        };
        EnvironmentField {
            law: self.law.clone(),
            region: self.region.clone(),
            seed: self.seed,
            backing: Backing::Split { base: Box::new(base), alt: Box::new(alt), normal, level },
        }
    }

    pub fn dump_csv(&self) -> String {
        let mut out = String::from("site,value\n");
        for site in self.region.iter_sites() {
            let v = self.value_unchecked(site);
            let coords: Vec<String> = site[..self.region.dimension()].iter().map(|c| c.to_string()).collect();
            let val = if v.is_infinite() { "inf".to_string() } else { format!("{v}") };
            out.push_str(&format!("{},{}\n", coords.join(" "), val));
        }
        out
    }
}

/// Draws the field over `region`. Per-site values are a pure function of
/// (law, seed, site), so re-sampling is bit-identical and disjoint
/// sub-regions can be filled independently by parallel workers.
pub fn sample_environment(
    law: &PotentialLaw,
    region: BoxRegion,
    seed: u64,
) -> Result<EnvironmentField, EnvironmentError> {
    law.validate()?;
    let backing = if region.len() <= MATERIALIZE_CAP {
        let values = region.iter_sites().map(|s| site_draw(law, seed, s)).collect();
        Backing::Materialized(values)
    } else {
        Backing::Hashed
    };
    Ok(EnvironmentField { law: law.clone(), region, seed, backing })
}
