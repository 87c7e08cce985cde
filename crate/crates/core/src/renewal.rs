//! Renewal engine: one-dimensional and space-time renewal recursions,
//! exponential convergence of t(n) to 1/mu, complex-plane checks on the
//! kernel transform, the shape equation F(xi, lambda) = 0 with analytic
//! gradient and Hessian, exponential tilting, local limit theorems, and
//! local large deviations.
//!
//! Kernels are sparse laws f(x, n) of one irreducible step (displacement,
//! duration); they can be synthetic or estimated from polymer ensembles.

use crate::lattice::{site_dot, site_sub, Site, ORIGIN};
use crate::numeric::{fast_map, solve_dense, symmetric_eigen, FastMap, KahanSum};
use num_complex::Complex64;
use thiserror::Error;

pub const CIRCLE_POINTS: usize = 4096;
const DEGENERATE_DET: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum RenewalError {
    #[error("kernel has no mass")]
    ZeroMass,
    #[error("kernel entry at n = 0 (steps must take time)")]
    ZeroDuration,
    #[error("negative kernel entry f({0:?}, {1}) = {2}")]
    NegativeEntry(Vec<i32>, u32, f64),
    #[error("kernel mass {0} exceeds 1")]
    MassExceedsOne(f64),
    #[error("renewal array would need {0} entries (cap {1})")]
    MemoryCap(usize, usize),
    #[error("tail rate {nu} too heavy for radius 1 + {eps}")]
    TailTooHeavy { nu: f64, eps: f64 },
    #[error("shape solver did not converge (residual {0:.3e})")]
    NewtonDivergence(f64),
    #[error("tilt |xi| = {0:.3} outside the tail-certified domain (nu = {1:.3})")]
    DomainExceeded(f64, f64),
    #[error("velocity {0:?} outside the local-limit domain")]
    OutsideLocalDomain(Vec<f64>),
    #[error("kernel is degenerate (det Xi = {0:.3e}); no local limit claim")]
    Degenerate(f64),
    #[error("bad kernel line {0}: {1}")]
    Parse(usize, String),
}

/// Asserted exponential tail f(x, n) <= c e^{-nu (|x| + n)}.
#[derive(Clone, Copy, Debug)]
pub struct TailBound {
    pub nu: f64,
    pub c: f64,
}

/// Sparse nonnegative law of one renewal step on Z^d x N (n >= 1).
#[derive(Clone, Debug)]
pub struct RenewalKernel {
    entries: Vec<(Site, u32, f64)>,
    dimension: usize,
    tail: Option<TailBound>,
}

impl RenewalKernel {
    pub fn new(
        dimension: usize,
        raw: impl IntoIterator<Item = (Site, u32, f64)>,
    ) -> Result<Self, RenewalError> {
        let mut merged: FastMap<(Site, u32), f64> = fast_map();
        for (x, n, w) in raw {
            if w < 0.0 {
                return Err(RenewalError::NegativeEntry(x.to_vec(), n, w));
            }
            if w == 0.0 {
                continue;
            }
            if n == 0 {
                return Err(RenewalError::ZeroDuration);
            }
            *merged.entry((x, n)).or_insert(0.0) += w;
        }
        let mut entries: Vec<(Site, u32, f64)> =
            merged.into_iter().map(|((x, n), w)| (x, n, w)).collect();
        entries.sort_by_key(|&(x, n, _)| (n, x));
        let kernel = RenewalKernel { entries, dimension, tail: None };
        let mass = kernel.total_mass();
        if mass <= 0.0 {
            return Err(RenewalError::ZeroMass);
        }
        if mass > 1.0 + 1e-9 {
            return Err(RenewalError::MassExceedsOne(mass));
        }
        Ok(kernel)
    }

    pub fn with_tail(mut self, tail: TailBound) -> Self {
        self.tail = Some(tail);
        self
    }

    pub fn tail(&self) -> Option<TailBound> {
        self.tail
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self) -> &[(Site, u32, f64)] {
        &self.entries
    }

    pub fn total_mass(&self) -> f64 {
        let mut acc = KahanSum::default();
        for &(_, _, w) in &self.entries {
            acc.add(w);
        }
        acc.value()
    }

    pub fn is_probability(&self) -> bool {
        (self.total_mass() - 1.0).abs() <= 1e-9
    }

    pub fn n_max(&self) -> u32 {
        self.entries.iter().map(|&(_, n, _)| n).max().unwrap_or(0)
    }

    /// mu = E T = sum n f(x, n) (for probability kernels).
    pub fn mean_time(&self) -> f64 {
        self.entries.iter().map(|&(_, n, w)| n as f64 * w).sum()
    }

    pub fn mean_displacement(&self) -> [f64; 4] {
        let mut m = [0.0; 4];
        for &(x, _, w) in &self.entries {
            for k in 0..self.dimension {
                m[k] += x[k] as f64 * w;
            }
        }
        m
    }

    /// Time marginal f(n) = sum_x f(x, n), for n = 0..=n_top.
    pub fn time_marginal(&self, n_top: u32) -> Vec<f64> {
        let mut f = vec![0.0; n_top as usize + 1];
        for &(_, n, w) in &self.entries {
            if n <= n_top {
                f[n as usize] += w;
            }
        }
        f
    }

    /// Aperiodicity of the duration support: gcd{n : f(., n) > 0} = 1.
    pub fn aperiodic_in_time(&self) -> bool {
        let mut g = 0u32;
        for &(_, n, _) in &self.entries {
            g = gcd(g, n);
        }
        g == 1
    }

    /// Drops entries below `rel` times their time-slice maximum; returns the
    /// trimmed kernel together with the dropped mass.
    pub fn truncate(&self, rel: f64) -> (RenewalKernel, f64) {
        let mut slice_max: FastMap<u32, f64> = fast_map();
        for &(_, n, w) in &self.entries {
            let m = slice_max.entry(n).or_insert(0.0);
            if w > *m {
                *m = w;
            }
        }
        let mut kept = Vec::new();
        let mut dropped = KahanSum::default();
        for &(x, n, w) in &self.entries {
            if w >= rel * slice_max[&n] {
                kept.push((x, n, w));
            } else {
                dropped.add(w);
            }
        }
        let mut out = RenewalKernel { entries: kept, dimension: self.dimension, tail: self.tail };
        out.entries.sort_by_key(|&(x, n, _)| (n, x));
        (out, dropped.value())
    }

    /// Transform fhat(theta, z) = sum f(x, n) e^{i theta . x} z^n.
    pub fn transform(&self, theta: &[f64; 4], z: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for &(x, n, w) in &self.entries {
            let phase = Complex64::from_polar(1.0, site_dot(x, theta));
            acc += w * phase * z.powi(n as i32);
        }
        acc
    }

    /// Sparse text format, one entry per line: "x_1 ... x_d n value".
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &(x, n, w) in &self.entries {
            for k in 0..self.dimension {
                out.push_str(&format!("{} ", x[k]));
            }
            out.push_str(&format!("{n} {w:.17e}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, RenewalError> {
        let mut raw = Vec::new();
        let mut dimension = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() < 3 || tokens.len() > 6 {
                return Err(RenewalError::Parse(lineno + 1, "expected x_1 .. x_d n value".into()));
            }
            let d = tokens.len() - 2;
            if *dimension.get_or_insert(d) != d {
                return Err(RenewalError::Parse(lineno + 1, "inconsistent dimension".into()));
            }
            let mut x = ORIGIN;
            for k in 0..d {
                x[k] = tokens[k]
                    .parse()
                    .map_err(|_| RenewalError::Parse(lineno + 1, "bad coordinate".into()))?;
            }
            let n: u32 = tokens[d]
                .parse()
                .map_err(|_| RenewalError::Parse(lineno + 1, "bad duration".into()))?;
            let w: f64 = tokens[d + 1]
                .parse()
                .map_err(|_| RenewalError::Parse(lineno + 1, "bad value".into()))?;
            raw.push((x, n, w));
        }
        RenewalKernel::new(dimension.ok_or(RenewalError::ZeroMass)?, raw)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// ---------------------------------------------------------------------------
// Renewal recursions.

/// t(0) = 1, t(n) = sum_{m=1}^{n} f(m) t(n - m). `f[i]` is the mass of
/// duration i + 1.
pub fn renewal_1d(f: &[f64], n_max: usize) -> Vec<f64> {
    let mut t = vec![0.0; n_max + 1];
    t[0] = 1.0;
    for n in 1..=n_max {
        let mut acc = KahanSum::default();
        for m in 1..=n.min(f.len()) {
            acc.add(f[m - 1] * t[n - m]);
        }
        t[n] = acc.value();
    }
    t
}

/// Space-time renewal array t(x, n), stored per time slice.
#[derive(Clone, Debug)]
pub struct RenewalArray {
    pub dimension: usize,
    pub slices: Vec<FastMap<Site, f64>>,
}

pub const ARRAY_ENTRY_CAP: usize = 1 << 27;

impl RenewalArray {
    pub fn n_max(&self) -> usize {
        self.slices.len() - 1
    }

    pub fn t(&self, x: Site, n: usize) -> f64 {
        self.slices[n].get(&x).copied().unwrap_or(0.0)
    }

    /// Time marginal t(n) = sum_x t(x, n).
    pub fn marginal(&self) -> Vec<f64> {
        self.slices
            .iter()
            .map(|s| {
                let mut acc = KahanSum::default();
                for &w in s.values() {
                    acc.add(w);
                }
                acc.value()
            })
            .collect()
    }

    /// Empirical mean of the conditional law Q_n.
    pub fn slice_mean(&self, n: usize) -> Result<[f64; 4], RenewalError> {
        let total: f64 = self.slices[n].values().sum();
        if total <= 0.0 {
            return Err(RenewalError::ZeroMass);
        }
        let mut m = [0.0; 4];
        for (&x, &w) in &self.slices[n] {
            for k in 0..self.dimension {
                m[k] += x[k] as f64 * w;
            }
        }
        for v in &mut m {
            *v /= total;
        }
        Ok(m)
    }

    /// Max relative residual of the defining recursion
    /// t(x, n) = sum f(z, m) t(x - z, n - m) over all computed slices.
    pub fn recursion_residual(&self, kernel: &RenewalKernel) -> f64 {
        let mut worst = 0.0f64;
        for n in 1..=self.n_max() {
            let mut expect: FastMap<Site, KahanSum> = fast_map();
            for &(z, m, w) in kernel.entries() {
                let m = m as usize;
                if m > n {
                    continue;
                }
                for (&y, &t) in &self.slices[n - m] {
                    expect
                        .entry(crate::lattice::site_add(y, z))
                        .or_default()
                        .add(w * t);
                }
            }
            for (&x, &t) in &self.slices[n] {
                let e = expect.get(&x).map(|k| k.value()).unwrap_or(0.0);
                worst = worst.max((t - e).abs() / t.abs().max(1.0));
            }
            for (&x, acc) in &expect {
                if !self.slices[n].contains_key(&x) {
                    worst = worst.max(acc.value().abs());
                }
            }
        }
        worst
    }
}

pub fn renewal_multid(kernel: &RenewalKernel, n_max: usize) -> Result<RenewalArray, RenewalError> {
    let mut slices: Vec<FastMap<Site, f64>> = Vec::with_capacity(n_max + 1);
    let mut origin_slice = fast_map();
    origin_slice.insert(ORIGIN, 1.0);
    slices.push(origin_slice);
    let mut total_entries = 1usize;
    for n in 1..=n_max {
        let mut slice: FastMap<Site, f64> = fast_map();
        for &(z, m, w) in kernel.entries() {
            let m = m as usize;
            if m > n {
                continue;
            }
            for (&y, &t) in &slices[n - m] {
                *slice.entry(crate::lattice::site_add(y, z)).or_insert(0.0) += w * t;
            }
        }
        total_entries += slice.len();
        if total_entries > ARRAY_ENTRY_CAP {
            return Err(RenewalError::MemoryCap(total_entries, ARRAY_ENTRY_CAP));
        }
        slices.push(slice);
    }
    Ok(RenewalArray { dimension: kernel.dimension(), slices })
}

/// Conditional law Q_n(x) = t(x, n) / t(n).
pub fn conditional_law(array: &RenewalArray, n: usize) -> Result<Vec<(Site, f64)>, RenewalError> {
    let total: f64 = array.slices[n].values().sum();
    if total <= 0.0 {
        return Err(RenewalError::ZeroMass);
    }
    let mut law: Vec<(Site, f64)> =
        array.slices[n].iter().map(|(&x, &w)| (x, w / total)).collect();
    law.sort_by_key(|&(x, _)| x);
    Ok(law)
}

// ---------------------------------------------------------------------------
// Exponential convergence t(n) -> 1/mu.

#[derive(Clone, Debug)]
pub struct LimitRateReport {
    pub limit: f64,
    /// |t(n) - 1/mu| for every n.
    pub deviations: Vec<f64>,
    /// sup of deviations over the second half of the data.
    pub sup_late_deviation: f64,
    /// Slope of log|deviation| against n, when enough nonzero residuals exist.
    pub fitted_rate: Option<f64>,
    pub fit_residual: f64,
    pub exponential: bool,
}

pub fn renewal_limit_rate(t: &[f64], mu: f64) -> LimitRateReport {
    let limit = 1.0 / mu;
    let deviations: Vec<f64> = t.iter().skip(1).map(|&v| (v - limit).abs()).collect();
    let n0 = deviations.len() / 2;
    let sup_late_deviation = deviations[n0..].iter().cloned().fold(0.0, f64::max);
    let pts: Vec<(f64, f64)> = deviations
        .iter()
        .enumerate()
        .skip(deviations.len() / 4)
        .filter(|&(_, &d)| d > 1e-14)
        .map(|(i, &d)| ((i + 1) as f64, d.ln()))
        .collect();
    let (fitted_rate, fit_residual) = if pts.len() >= 4 {
        let xs: Vec<f64> = pts.iter().map(|&(x, _)| x).collect();
        let ys: Vec<f64> = pts.iter().map(|&(_, y)| y).collect();
        let (_, slope, resid) = crate::numeric::linear_fit(&xs, &ys);
        (Some(-slope), resid)
    } else {
        // residuals already at machine noise: convergence faster than any fit
        (None, 0.0)
    };
    let exponential = match fitted_rate {
        Some(rate) => rate > 0.0 && fit_residual < 2.0,
        None => true,
    };
    LimitRateReport { limit, deviations, sup_late_deviation, fitted_rate, fit_residual, exponential }
}

// ---------------------------------------------------------------------------
// Complex-plane checks on the transform.

#[derive(Clone, Debug)]
pub struct ComplexReport {
    /// Winding number of 1 - fhat on the circle |z| = 1 + eps: the number of
    /// zeros inside, which must be exactly the simple zero at z = 1.
    pub zeros_in_disk: i32,
    /// Zeros localized inside |z - 1| <= eps / 2 by the argument principle.
    pub zeros_near_one: i32,
    /// min |1 - fhat(z)| on |z| = 1 + eps away from the arc |z - 1| < eps/2.
    pub min_away_from_one: f64,
    /// fhat'(1) = mu for a probability kernel.
    pub derivative_at_one: f64,
    /// Per requested twist theta: kappa = min over sampled circles of radius
    /// <= 1 + eps of |1 - fhat_theta(z)|.
    pub kappa: Vec<([f64; 4], f64)>,
}

pub fn check_complex_assumptions(
    kernel: &RenewalKernel,
    eps: f64,
    thetas: &[[f64; 4]],
) -> Result<ComplexReport, RenewalError> {
    if let Some(tail) = kernel.tail() {
        if tail.nu <= (1.0 + eps).ln() {
            return Err(RenewalError::TailTooHeavy { nu: tail.nu, eps });
        }
    }
    let zero_theta = [0.0; 4];
    let circle = |center: Complex64, radius: f64, theta: &[f64; 4]| -> Vec<Complex64> {
        (0..CIRCLE_POINTS)
            .map(|k| {
                let ang = 2.0 * std::f64::consts::PI * k as f64 / CIRCLE_POINTS as f64;
                let z = center + Complex64::from_polar(radius, ang);
                Complex64::new(1.0, 0.0) - kernel.transform(theta, z)
            })
            .collect()
    };
    let winding = |values: &[Complex64]| -> i32 {
        let mut total = 0.0;
        for k in 0..values.len() {
            let a = values[k];
            let b = values[(k + 1) % values.len()];
            total += (b / a).arg();
        }
        (total / (2.0 * std::f64::consts::PI)).round() as i32
    };
    let outer = circle(Complex64::new(0.0, 0.0), 1.0 + eps, &zero_theta);
    let zeros_in_disk = winding(&outer);
    let near = circle(Complex64::new(1.0, 0.0), eps / 2.0, &zero_theta);
    let zeros_near_one = winding(&near);
    let min_away_from_one = (0..CIRCLE_POINTS)
        .filter(|&k| {
            let ang = 2.0 * std::f64::consts::PI * k as f64 / CIRCLE_POINTS as f64;
            let z = Complex64::from_polar(1.0 + eps, ang);
            (z - Complex64::new(1.0, 0.0)).norm() >= eps / 2.0
        })
        .map(|k| {
            let ang = 2.0 * std::f64::consts::PI * k as f64 / CIRCLE_POINTS as f64;
            let z = Complex64::from_polar(1.0 + eps, ang);
            (Complex64::new(1.0, 0.0) - kernel.transform(&zero_theta, z)).norm()
        })
        .fold(f64::INFINITY, f64::min);
    let derivative_at_one = kernel.mean_time();
    let kappa = thetas
        .iter()
        .map(|theta| {
            let mut min = f64::INFINITY;
            let mut radii: Vec<f64> = (1..=16).map(|j| (1.0 + eps) * j as f64 / 16.0).collect();
            radii.push(1.0); // the unit circle carries the untwisted zero
            for r in radii {
                for v in circle(Complex64::new(0.0, 0.0), r, theta) {
                    min = min.min(v.norm());
                }
            }
            (*theta, min)
        })
        .collect();
    Ok(ComplexReport { zeros_in_disk, zeros_near_one, min_away_from_one, derivative_at_one, kappa })
}

/// Characteristic-function decay of the conditional laws: fits c in
/// |E_{Q_n} e^{i theta . X}| <= e^{-c n}.
pub fn characteristic_decay(array: &RenewalArray, theta: &[f64; 4], n_from: usize) -> (f64, f64) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for n in n_from..=array.n_max() {
        let total: f64 = array.slices[n].values().sum();
        if total <= 0.0 {
            continue;
        }
        let mut phi = Complex64::new(0.0, 0.0);
        for (&x, &w) in &array.slices[n] {
            phi += w * Complex64::from_polar(1.0, site_dot(x, theta));
        }
        let modulus = phi.norm() / total;
        // keep the fit well above cancellation noise in the complex sums
        if modulus > 1e-10 {
            xs.push(n as f64);
            ys.push(modulus.ln());
        }
    }
    if xs.len() < 4 {
        return (f64::INFINITY, 0.0);
    }
    let (_, slope, resid) = crate::numeric::linear_fit(&xs, &ys);
    (-slope, resid)
}

// ---------------------------------------------------------------------------
// Shape equation F(xi, lambda) = 0.

#[derive(Clone, Debug)]
pub struct ShapePoint {
    pub xi: [f64; 4],
    pub lambda: f64,
    /// grad lambda(xi) = E_xi X / E_xi T.
    pub grad: [f64; 4],
    /// Hess lambda(xi): d x d matrix
    /// Xi_ij = E_xi[(X_i - v_i T)(X_j - v_j T)] / E_xi T.
    pub hessian: Vec<Vec<f64>>,
    /// mu(xi) = E_xi T.
    pub mu: f64,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct ShapeSolution {
    pub points: Vec<ShapePoint>,
}

/// Solves log sum f(x, n) e^{xi . x - lambda n} = 0 for each xi, warm-started
/// along the grid. Newton in lambda (F is strictly decreasing and convex in
/// lambda) with a safeguarding bracket.
pub fn solve_shape(kernel: &RenewalKernel, xis: &[[f64; 4]]) -> Result<ShapeSolution, RenewalError> {
    let mut points = Vec::with_capacity(xis.len());
    let mut warm = 0.0;
    for xi in xis {
        let p = solve_shape_at(kernel, xi, warm)?;
        warm = p.lambda;
        points.push(p);
    }
    Ok(ShapeSolution { points })
}

pub fn solve_shape_at(
    kernel: &RenewalKernel,
    xi: &[f64; 4],
    warm: f64,
) -> Result<ShapePoint, RenewalError> {
    if let Some(tail) = kernel.tail() {
        let norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= tail.nu {
            return Err(RenewalError::DomainExceeded(norm, tail.nu));
        }
    }
    let d = kernel.dimension();
    // F(lambda) and -F'(lambda) = E[n] under the (unnormalized) tilt.
    let eval = |lambda: f64| -> (f64, f64) {
        let mut mass = KahanSum::default();
        let mut en = KahanSum::default();
        for &(x, n, w) in kernel.entries() {
            let t = w * (site_dot(x, xi) - lambda * n as f64).exp();
            mass.add(t);
            en.add(n as f64 * t);
        }
        (mass.value().ln(), en.value() / mass.value())
    };
    // bracket the root
    let (mut lo, mut hi) = (warm, warm);
    let (mut flo, _) = eval(lo);
    if flo > 0.0 {
        loop {
            hi = if hi == lo { lo + 1.0 } else { lo + 2.0 * (hi - lo) };
            if eval(hi).0 < 0.0 {
                break;
            }
            lo = hi;
            if hi > 1e6 {
                return Err(RenewalError::NewtonDivergence(flo));
            }
        }
    } else {
        loop {
            lo = if lo == hi { hi - 1.0 } else { hi - 2.0 * (hi - lo) };
            flo = eval(lo).0;
            if flo > 0.0 {
                break;
            }
            hi = lo;
            if lo < -1e6 {
                return Err(RenewalError::NewtonDivergence(flo));
            }
        }
    }
    let mut lambda = 0.5 * (lo + hi);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..200 {
        iterations = it + 1;
        let (f, en) = eval(lambda);
        residual = f.abs();
        if residual <= 1e-12 {
            break;
        }
        if f > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        let newton = lambda + f / en;
        lambda = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    if residual > 1e-9 {
        return Err(RenewalError::NewtonDivergence(residual));
    }
    // tilted moments at the solution
    let mut mass = 0.0;
    let mut ex = [0.0f64; 4];
    let mut en = 0.0;
    for &(x, n, w) in kernel.entries() {
        let t = w * (site_dot(x, xi) - lambda * n as f64).exp();
        mass += t;
        en += n as f64 * t;
        for k in 0..d {
            ex[k] += x[k] as f64 * t;
        }
    }
    en /= mass;
    for v in ex.iter_mut() {
        *v /= mass;
    }
    let mut grad = [0.0f64; 4];
    for k in 0..d {
        grad[k] = ex[k] / en;
    }
    let mut hessian = vec![vec![0.0; d]; d];
    for &(x, n, w) in kernel.entries() {
        let t = w * (site_dot(x, xi) - lambda * n as f64).exp() / mass;
        for i in 0..d {
            let ci = x[i] as f64 - grad[i] * n as f64;
            for j in 0..d {
                let cj = x[j] as f64 - grad[j] * n as f64;
                hessian[i][j] += t * ci * cj;
            }
        }
    }
    for row in &mut hessian {
        for v in row.iter_mut() {
            *v /= en;
        }
    }
    Ok(ShapePoint { xi: *xi, lambda, grad, hessian, mu: en, iterations, residual })
}

/// f_xi(x, n) = f(x, n) e^{xi . x - lambda(xi) n}; a probability kernel.
pub fn tilt_kernel(kernel: &RenewalKernel, xi: &[f64; 4]) -> Result<RenewalKernel, RenewalError> {
    let shape = solve_shape_at(kernel, xi, 0.0)?;
    let entries: Vec<(Site, u32, f64)> = kernel
        .entries()
        .iter()
        .map(|&(x, n, w)| (x, n, w * (site_dot(x, xi) - shape.lambda * n as f64).exp()))
        .collect();
    let mut out = RenewalKernel::new(kernel.dimension(), entries)?;
    out.tail = kernel.tail;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Local limit theorems.

/// Index sublattice of a slice support: per-axis gcd of coordinate
/// differences from a reference point. Its covolume is the factor by which
/// point masses exceed the plain Gaussian density (2 for the +-1 walk's
/// parity lattice, 1 for aperiodic supports).
pub fn slice_covolume(slice: &FastMap<Site, f64>, dimension: usize) -> f64 {
    let mut iter = slice.keys();
    let Some(&reference) = iter.next() else { return 1.0 };
    let mut g = [0u32; 4];
    for &x in slice.keys() {
        let diff = site_sub(x, reference);
        for k in 0..dimension {
            g[k] = gcd(g[k], diff[k].unsigned_abs());
        }
    }
    (0..dimension).map(|k| g[k].max(1) as f64).product()
}

#[derive(Clone, Debug)]
pub struct LocalCltRow {
    pub n: usize,
    pub window_points: usize,
    pub max_relative_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct LocalCltReport {
    pub rows: Vec<LocalCltRow>,
    pub covolume: f64,
    pub det_xi: f64,
}

/// Compares Q_n(x) against the local Gaussian prediction
///   covol * (2 pi n)^{-d/2} (det Xi)^{-1/2}
///        * exp(-(x - mean_n) Xi^{-1} (x - mean_n) / 2n)
/// over the window |x - mean_n| <= radius sqrt(n). The covolume factor
/// accounts for the support sublattice, and the Gaussian factor keeps the
/// comparison honest up to the window edge; without both, a parity kernel
/// such as the +-1 walk misses the bare (2 pi n)^{-d/2} normalization by a
/// factor of 2 at the center and e^{-radius^2/2} at the edge.
pub fn verify_local_clt(
    array: &RenewalArray,
    xi_matrix: &[Vec<f64>],
    n_list: &[usize],
    radius: f64,
) -> Result<LocalCltReport, RenewalError> {
    let d = array.dimension;
    let det: f64 = symmetric_eigen(xi_matrix).0.iter().product();
    if det < DEGENERATE_DET {
        return Err(RenewalError::Degenerate(det));
    }
    let mut rows = Vec::new();
    let mut covolume = 1.0;
    for &n in n_list {
        let law = conditional_law(array, n)?;
        let mean = array.slice_mean(n)?;
        covolume = slice_covolume(&array.slices[n], d);
        let norm = covolume * (2.0 * std::f64::consts::PI * n as f64).powf(-(d as f64) / 2.0)
            / det.sqrt();
        let mut max_dev = 0.0f64;
        let mut window_points = 0usize;
        for &(x, q) in &law {
            let delta: Vec<f64> = (0..d).map(|k| x[k] as f64 - mean[k]).collect();
            let dist = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if dist > radius * (n as f64).sqrt() {
                continue;
            }
            // quadratic form delta . Xi^{-1} delta via a dense solve
            let mut a: Vec<Vec<f64>> = xi_matrix.to_vec();
            let mut rhs = delta.clone();
            solve_dense(&mut a, &mut rhs);
            let quad: f64 = delta.iter().zip(&rhs).map(|(a, b)| a * b).sum();
            let prediction = norm * (-quad / (2.0 * n as f64)).exp();
            window_points += 1;
            max_dev = max_dev.max((q / prediction - 1.0).abs());
        }
        rows.push(LocalCltRow { n, window_points, max_relative_deviation: max_dev });
    }
    Ok(LocalCltReport { rows, covolume, det_xi: det })
}

#[derive(Clone, Debug)]
pub struct LocalLdRow {
    pub n: usize,
    pub x: Site,
    pub q: f64,
    pub prediction: f64,
}

#[derive(Clone, Debug)]
pub struct LocalLdReport {
    /// J(u) = xi_u . u - lambda(xi_u) at the requested velocity.
    pub rate: f64,
    pub xi: [f64; 4],
    pub rows: Vec<LocalLdRow>,
    /// Cross-check of J through sup_lambda { tau_lambda(u) - lambda }, with
    /// tau_lambda(u) = sup { xi . u : lambda(xi) <= lambda } evaluated along
    /// the Lagrange family grad lambda(xi_rho) = u / rho.
    pub dual_rate: f64,
}

/// Finds xi with grad lambda(xi) = u by damped Newton using the analytic
/// Hessian, then checks Q_n(floor(n u)) against the tilted local limit
///   covol * (mu(0)/mu(xi_n)) (2 pi n)^{-d/2} (det Xi(xi_n))^{-1/2} e^{-n J(u_n)}
/// with u_n = floor(n u)/n and grad lambda(xi_n) = u_n.
pub fn local_ld(
    kernel: &RenewalKernel,
    array: &RenewalArray,
    u: &[f64; 4],
    n_list: &[usize],
) -> Result<LocalLdReport, RenewalError> {
    let d = kernel.dimension();
    let mu0 = solve_shape_at(kernel, &[0.0; 4], 0.0)?.mu;
    let at = |target: &[f64; 4], start: [f64; 4]| -> Result<(ShapePoint, [f64; 4]), RenewalError> {
        let mut xi = start;
        for _ in 0..200 {
            let p = solve_shape_at(kernel, &xi, 0.0)?;
            let gap: Vec<f64> = (0..d).map(|k| target[k] - p.grad[k]).collect();
            let err = gap.iter().map(|g| g * g).sum::<f64>().sqrt();
            if err < 1e-12 {
                return Ok((p, xi));
            }
            let mut a = p.hessian.clone();
            let mut step = gap;
            solve_dense(&mut a, &mut step);
            let norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
            let damp = if norm > 1.0 { 1.0 / norm } else { 1.0 };
            for k in 0..d {
                xi[k] += damp * step[k];
            }
            if xi.iter().map(|v| v * v).sum::<f64>().sqrt() > 50.0 {
                return Err(RenewalError::OutsideLocalDomain(target[..d].to_vec()));
            }
        }
        Err(RenewalError::OutsideLocalDomain(target[..d].to_vec()))
    };
    let (shape_u, xi_u) = at(u, [0.0; 4])?;
    let rate = (0..d).map(|k| xi_u[k] * u[k]).sum::<f64>() - shape_u.lambda;
    // dual check along the Lagrange family
    let mut dual_rate = f64::NEG_INFINITY;
    for rho_exp in -8..=8 {
        let rho = (0.1 * rho_exp as f64).exp();
        let mut target = [0.0; 4];
        for k in 0..d {
            target[k] = u[k] / rho;
        }
        if let Ok((p, xi)) = at(&target, xi_u) {
            let tau: f64 = (0..d).map(|k| xi[k] * u[k]).sum();
            dual_rate = dual_rate.max(tau - p.lambda);
        }
    }
    let mut rows = Vec::new();
    for &n in n_list {
        let mut x = ORIGIN;
        let mut u_n = [0.0; 4];
        for k in 0..d {
            x[k] = (n as f64 * u[k]).floor() as i32;
            u_n[k] = x[k] as f64 / n as f64;
        }
        let (p, xi_n) = at(&u_n, xi_u)?;
        let j_n: f64 = (0..d).map(|k| xi_n[k] * u_n[k]).sum::<f64>() - p.lambda;
        let det: f64 = symmetric_eigen(&p.hessian).0.iter().product();
        if det < DEGENERATE_DET {
            return Err(RenewalError::Degenerate(det));
        }
        let covol = slice_covolume(&array.slices[n], d);
        let prediction = covol
            * (mu0 / p.mu)
            * (2.0 * std::f64::consts::PI * n as f64).powf(-(d as f64) / 2.0)
            / det.sqrt()
            * (-(n as f64) * j_n).exp();
        let t_n: f64 = array.slices[n].values().sum();
        let q = array.t(x, n) / t_n;
        rows.push(LocalLdRow { n, x, q, prediction });
    }
    Ok(LocalLdReport { rate, xi: xi_u, rows, dual_rate })
}
