//! Convex-geometry toolkit: Legendre-Fenchel transforms on finite grids,
//! support and Minkowski functions, polar bodies, curvature of support
//! functions, the second-order splitting expansion, and the rate-function
//! algebra connecting free energies to large-deviation rates.

use crate::numeric::symmetric_eigen;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("function is +inf everywhere on the grid")]
    AllInfinite,
    #[error("origin is not in the interior of the body (tau = {0:.3e} in some direction)")]
    OriginNotInterior(f64),
    #[error("support table with {0} directions is too coarse")]
    TableTooCoarse(usize),
    #[error("operation implemented for dimension 2 only (got {0})")]
    DimensionUnsupported(usize),
}

// ---------------------------------------------------------------------------
// Grid functions and the Legendre-Fenchel transform.

/// A function R^d -> R u {+inf} tabulated on a rectangular grid.
#[derive(Clone, Debug)]
pub struct ConvexGridFunction {
    pub dimension: usize,
    pub lo: [f64; 4],
    pub spacing: [f64; 4],
    pub shape: [usize; 4],
    pub values: Vec<f64>,
}

impl ConvexGridFunction {
    pub fn from_fn(
        dimension: usize,
        lo: [f64; 4],
        spacing: [f64; 4],
        shape: [usize; 4],
        f: impl Fn(&[f64; 4]) -> f64,
    ) -> Self {
        let mut g = ConvexGridFunction {
            dimension,
            lo,
            spacing,
            shape,
            values: Vec::new(),
        };
        g.values = (0..g.len()).map(|i| f(&g.point(i))).collect();
        g
    }

    pub fn len(&self) -> usize {
        (0..self.dimension).map(|k| self.shape[k]).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, mut idx: usize) -> [f64; 4] {
        let mut p = [0.0; 4];
        for k in 0..self.dimension {
            let c = idx % self.shape[k];
            idx /= self.shape[k];
            p[k] = self.lo[k] + c as f64 * self.spacing[k];
        }
        p
    }

    /// Index of the grid point nearest to `p` (within half a spacing).
    pub fn nearest_index(&self, p: &[f64; 4]) -> Option<usize> {
        let mut idx = 0usize;
        let mut stride = 1usize;
        for k in 0..self.dimension {
            let c = ((p[k] - self.lo[k]) / self.spacing[k]).round();
            if c < 0.0 || c >= self.shape[k] as f64 {
                return None;
            }
            idx += c as usize * stride;
            stride *= self.shape[k];
        }
        Some(idx)
    }

    pub fn value_at(&self, p: &[f64; 4]) -> Option<f64> {
        self.nearest_index(p).map(|i| self.values[i])
    }

    /// Midpoint-convexity audit along the grid axes; returns the worst
    /// violation f((a+b)/2) - (f(a)+f(b))/2.
    pub fn convexity_defect(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        let mut stride = 1usize;
        for k in 0..self.dimension {
            for i in 0..self.len() {
                let c = (i / stride) % self.shape[k];
                if c + 2 >= self.shape[k] {
                    continue;
                }
                let (a, m, b) = (self.values[i], self.values[i + stride], self.values[i + 2 * stride]);
                if a.is_finite() && b.is_finite() && m.is_finite() {
                    worst = worst.max(m - 0.5 * (a + b));
                }
            }
            stride *= self.shape[k];
        }
        worst
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("point,value\n");
        for i in 0..self.len() {
            let p = self.point(i);
            let coords: Vec<String> =
                p[..self.dimension].iter().map(|c| format!("{c}")).collect();
            out.push_str(&format!("{},{}\n", coords.join(" "), self.values[i]));
        }
        out
    }
}

fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// f*(x) = max over grid h of (h . x - f(h)); exact on the discrete problem.
/// +inf values in `f` are respected (characteristic functions work).
pub fn legendre_fenchel(
    f: &ConvexGridFunction,
    dual: &ConvexGridFunction,
) -> Result<ConvexGridFunction, GeometryError> {
    if f.values.iter().all(|v| v.is_infinite()) {
        return Err(GeometryError::AllInfinite);
    }
    let mut out = dual.clone();
    for i in 0..out.len() {
        let x = out.point(i);
        let mut best = f64::NEG_INFINITY;
        for j in 0..f.len() {
            if f.values[j].is_finite() {
                best = best.max(dot4(&f.point(j), &x) - f.values[j]);
            }
        }
        out.values[i] = best;
    }
    Ok(out)
}

/// O(G log G) one-dimensional conjugate via the upper convex hull of the
/// points (h, h x - f(h)) in slope space; agrees with the direct transform.
pub fn legendre_fenchel_1d_fast(
    f: &ConvexGridFunction,
    dual: &ConvexGridFunction,
) -> Result<ConvexGridFunction, GeometryError> {
    assert_eq!(f.dimension, 1);
    // points (h_j, f_j) with f finite; conjugate is the max of lines x -> h x - f
    let pts: Vec<(f64, f64)> = (0..f.len())
        .filter(|&j| f.values[j].is_finite())
        .map(|j| (f.point(j)[0], f.values[j]))
        .collect();
    if pts.is_empty() {
        return Err(GeometryError::AllInfinite);
    }
    // lower convex hull of (h, f(h)): only hull points are active in the max
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &(h, v) in &pts {
        while hull.len() >= 2 {
            let (h1, v1) = hull[hull.len() - 2];
            let (h2, v2) = hull[hull.len() - 1];
            // drop h2 if it lies above the chord h1 -> h
            if (v2 - v1) * (h - h1) >= (v - v1) * (h2 - h1) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push((h, v));
    }
    let mut out = dual.clone();
    let mut j = 0usize;
    for i in 0..out.len() {
        let x = out.point(i)[0];
        // active hull vertex index increases with x
        while j + 1 < hull.len()
            && hull[j + 1].0 * x - hull[j + 1].1 >= hull[j].0 * x - hull[j].1
        {
            j += 1;
        }
        out.values[i] = hull[j].0 * x - hull[j].1;
    }
    Ok(out)
}

/// Convex lower-semicontinuous envelope on a grid: the double conjugate.
pub fn convex_envelope(
    f: &ConvexGridFunction,
    dual: &ConvexGridFunction,
) -> Result<ConvexGridFunction, GeometryError> {
    let star = legendre_fenchel(f, dual)?;
    legendre_fenchel(&star, f)
}

// ---------------------------------------------------------------------------
// Convex bodies: support, Minkowski (gauge) function, polarity.

pub const SUPPORT_TABLE_SIZE: usize = 4096;

#[derive(Clone, Debug)]
pub enum ConvexBody {
    /// Convex hull of a finite vertex set.
    Polytope { dimension: usize, vertices: Vec<[f64; 4]> },
    /// Planar body given by its support function on equally spaced angles.
    SupportTable2d { values: Vec<f64> },
}

impl ConvexBody {
    pub fn dimension(&self) -> usize {
        match self {
            ConvexBody::Polytope { dimension, .. } => *dimension,
            ConvexBody::SupportTable2d { .. } => 2,
        }
    }

    pub fn table_from_fn(tau: impl Fn(f64) -> f64) -> ConvexBody {
        let values = (0..SUPPORT_TABLE_SIZE)
            .map(|k| tau(2.0 * std::f64::consts::PI * k as f64 / SUPPORT_TABLE_SIZE as f64))
            .collect();
        ConvexBody::SupportTable2d { values }
    }
}

/// tau_K(x) = sup_{v in K} v . x, positively homogeneous.
pub fn support_function(body: &ConvexBody, x: &[f64; 4]) -> f64 {
    match body {
        ConvexBody::Polytope { vertices, .. } => vertices
            .iter()
            .map(|v| dot4(v, x))
            .fold(f64::NEG_INFINITY, f64::max),
        ConvexBody::SupportTable2d { values } => {
            let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
            if r == 0.0 {
                return 0.0;
            }
            let theta = x[1].atan2(x[0]).rem_euclid(2.0 * std::f64::consts::PI);
            let pos = theta / (2.0 * std::f64::consts::PI) * values.len() as f64;
            let i = pos.floor() as usize % values.len();
            let frac = pos - pos.floor();
            r * (values[i] * (1.0 - frac) + values[(i + 1) % values.len()] * frac)
        }
    }
}

/// Minkowski (gauge) function alpha_K(h) = inf { r > 0 : h in r K }, through
/// the duality alpha_K(h) = sup_u (h . u) / tau_K(u): a sweep over planar
/// directions followed by golden-section refinement. Requires 0 in int K.
pub fn minkowski_function(body: &ConvexBody, h: &[f64; 4]) -> Result<f64, GeometryError> {
    if body.dimension() != 2 {
        return Err(GeometryError::DimensionUnsupported(body.dimension()));
    }
    let objective = |theta: f64| -> f64 {
        let u = [theta.cos(), theta.sin(), 0.0, 0.0];
        let tau = support_function(body, &u);
        if tau <= 1e-12 {
            return f64::INFINITY; // flags a body without 0 in its interior
        }
        (h[0] * u[0] + h[1] * u[1]) / tau
    };
    let coarse = 1024usize;
    let mut best = f64::NEG_INFINITY;
    let mut best_theta = 0.0;
    for k in 0..coarse {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / coarse as f64;
        let v = objective(theta);
        if v.is_infinite() {
            let u = [theta.cos(), theta.sin(), 0.0, 0.0];
            return Err(GeometryError::OriginNotInterior(support_function(body, &u)));
        }
        if v > best {
            best = v;
            best_theta = theta;
        }
    }
    // golden-section refinement around the best coarse direction
    let gr = (5.0f64.sqrt() - 1.0) / 2.0;
    let width = 2.0 * std::f64::consts::PI / coarse as f64;
    let (mut a, mut b) = (best_theta - width, best_theta + width);
    for _ in 0..60 {
        let c = b - gr * (b - a);
        let d = a + gr * (b - a);
        if objective(c) > objective(d) {
            b = d;
        } else {
            a = c;
        }
    }
    Ok(best.max(objective(0.5 * (a + b))))
}

/// Polar body K*: its support function is the gauge of K.
pub fn polar(body: &ConvexBody) -> Result<ConvexBody, GeometryError> {
    if body.dimension() != 2 {
        return Err(GeometryError::DimensionUnsupported(body.dimension()));
    }
    let mut values = Vec::with_capacity(SUPPORT_TABLE_SIZE);
    for k in 0..SUPPORT_TABLE_SIZE {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / SUPPORT_TABLE_SIZE as f64;
        let h = [theta.cos(), theta.sin(), 0.0, 0.0];
        values.push(minkowski_function(body, &h)?);
    }
    Ok(ConvexBody::SupportTable2d { values })
}

// ---------------------------------------------------------------------------
// Curvature of support functions.

/// Planar radius of curvature r(theta) = tau''(theta) + tau(theta) of the
/// boundary point with outward normal (cos theta, sin theta).
pub fn tau_curvature(tau: impl Fn(f64) -> f64, theta: f64, stencil: f64) -> f64 {
    let second = (tau(theta + stencil) - 2.0 * tau(theta) + tau(theta - stencil))
        / (stencil * stencil);
    second + tau(theta)
}

pub fn tau_curvature_from_table(values: &[f64], index: usize) -> Result<f64, GeometryError> {
    if values.len() < 64 {
        return Err(GeometryError::TableTooCoarse(values.len()));
    }
    let n = values.len();
    let h = 2.0 * std::f64::consts::PI / n as f64;
    let second =
        (values[(index + 1) % n] - 2.0 * values[index] + values[(index + n - 1) % n]) / (h * h);
    Ok(second + values[index])
}

#[derive(Clone, Debug)]
pub struct PrincipalCurvatures {
    /// Principal radii of curvature (eigenvalues of |x| Hess tau on the
    /// tangent space).
    pub radii: Vec<f64>,
    /// Corresponding principal directions.
    pub directions: Vec<[f64; 4]>,
    /// |Hess tau(x) . x|: homogeneity says this vanishes.
    pub radial_residual: f64,
}

/// Finite-difference Hessian of a 1-homogeneous tau at x, diagonalized; the
/// zero (radial) eigenvalue is split off and reported as a residual.
pub fn principal_curvatures(
    tau: impl Fn(&[f64; 4]) -> f64,
    x: &[f64; 4],
    dimension: usize,
    step: f64,
) -> PrincipalCurvatures {
    let mut hess = vec![vec![0.0; dimension]; dimension];
    for i in 0..dimension {
        for j in 0..dimension {
            let at = |si: f64, sj: f64| {
                let mut p = *x;
                p[i] += si * step;
                p[j] += sj * step;
                tau(&p)
            };
            hess[i][j] = if i == j {
                (at(1.0, 0.0) - 2.0 * at(0.0, 0.0) + at(-1.0, 0.0)) / (step * step)
            } else {
                (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0))
                    / (4.0 * step * step)
            };
        }
    }
    let norm = (0..dimension).map(|k| x[k] * x[k]).sum::<f64>().sqrt();
    let mut radial = 0.0f64;
    for i in 0..dimension {
        let r: f64 = (0..dimension).map(|j| hess[i][j] * x[j]).sum();
        radial += r * r;
    }
    let (vals, vecs) = symmetric_eigen(&hess);
    let mut radii = Vec::new();
    let mut directions = Vec::new();
    // discard the near-zero radial eigenvalue, keep the tangent ones
    let max_abs = vals.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    for (k, &lam) in vals.iter().enumerate() {
        if lam.abs() > 1e-4 * max_abs.max(1e-300) {
            radii.push(lam * norm);
            let mut dir = [0.0; 4];
            for i in 0..dimension {
                dir[i] = vecs[i][k];
            }
            directions.push(dir);
        }
    }
    PrincipalCurvatures { radii, directions, radial_residual: radial.sqrt() }
}

#[derive(Clone, Debug)]
pub struct QuadraticExpansionCheck {
    pub splitting_cost: f64,
    pub predicted: f64,
    /// (cost - predicted) / (sum y^2 / |x|); vanishes as |x| grows.
    pub residual_ratio: f64,
}

/// Second-order cost of splitting x into t x + y and (1-t) x - y with y in
/// the tangent directions:
///   tau(t x + sum y_l v_l) + tau((1-t) x - sum y_l v_l) - tau(x)
///     ~ sum y_l^2 / (2 t (1-t) |x| chi_l),
/// where chi_l = 1 / r_l are the principal curvatures at the boundary point
/// dual to x.
pub fn quadratic_expansion_check(
    tau: impl Fn(&[f64; 4]) -> f64 + Copy,
    x: &[f64; 4],
    y: &[f64],
    t: f64,
    dimension: usize,
) -> QuadraticExpansionCheck {
    let pc = principal_curvatures(tau, x, dimension, 1e-3);
    assert!(y.len() <= pc.radii.len(), "more tangent displacements than directions");
    let norm = (0..dimension).map(|k| x[k] * x[k]).sum::<f64>().sqrt();
    let mut plus = [0.0; 4];
    let mut minus = [0.0; 4];
    for k in 0..dimension {
        plus[k] = t * x[k];
        minus[k] = (1.0 - t) * x[k];
    }
    let mut predicted = 0.0;
    for (l, &yl) in y.iter().enumerate() {
        for k in 0..dimension {
            plus[k] += yl * pc.directions[l][k];
            minus[k] -= yl * pc.directions[l][k];
        }
        predicted += yl * yl * pc.radii[l] / (2.0 * t * (1.0 - t) * norm);
    }
    let splitting_cost = tau(&plus) + tau(&minus) - tau(x);
    let scale: f64 = y.iter().map(|v| v * v).sum::<f64>() / norm;
    let residual_ratio = if scale > 0.0 {
        (splitting_cost - predicted) / scale
    } else {
        0.0
    };
    QuadraticExpansionCheck { splitting_cost, predicted, residual_ratio }
}

// ---------------------------------------------------------------------------
// Rate functions.

#[derive(Clone, Debug)]
pub struct RateFunctions {
    /// I = lambda*, the quenched-free LD rate of the velocity.
    pub rate: ConvexGridFunction,
    /// I_h(v) = I(v) - (h . v - lambda(h)).
    pub tilted_rate: ConvexGridFunction,
    pub lambda_h: f64,
    /// min of I_h over the grid; conjugacy forces it to ~0 at v = grad
    /// lambda(h).
    pub tilted_min: f64,
    pub convexity_defect: f64,
}

pub fn rate_functions(
    lambda: &ConvexGridFunction,
    h: &[f64; 4],
    v_grid: &ConvexGridFunction,
) -> Result<RateFunctions, GeometryError> {
    let defect = lambda.convexity_defect();
    let table = if defect > 1e-9 {
        // non-convex input: proceed on its convex envelope
        convex_envelope(lambda, lambda)?
    } else {
        lambda.clone()
    };
    let lambda_h = table
        .value_at(h)
        .filter(|v| v.is_finite())
        .unwrap_or_else(|| {
            // h off the grid: evaluate the envelope's conjugate pair directly
            (0..table.len())
                .filter(|&j| table.values[j].is_finite())
                .map(|j| dot4(&table.point(j), h) - table.values[j])
                .fold(f64::NEG_INFINITY, f64::max)
        });
    let rate = legendre_fenchel(&table, v_grid)?;
    let mut tilted_rate = rate.clone();
    let mut tilted_min = f64::INFINITY;
    for i in 0..tilted_rate.len() {
        let v = tilted_rate.point(i);
        tilted_rate.values[i] = rate.values[i] - (dot4(h, &v) - lambda_h);
        tilted_min = tilted_min.min(tilted_rate.values[i]);
    }
    Ok(RateFunctions { rate, tilted_rate, lambda_h, tilted_min, convexity_defect: defect })
}

/// tau(x) + tau(y) - tau(x + y) >= c (|x| + |y| - |x + y|) audit; returns the
/// smallest observed ratio c over random pairs.
pub fn strict_triangle_audit(
    tau: impl Fn(&[f64; 4]) -> f64,
    dimension: usize,
    pairs: usize,
    seed: u64,
) -> f64 {
    let mut state = seed;
    let mut next = || {
        state = crate::numeric::splitmix64(state);
        crate::numeric::unit_uniform(state)
    };
    let mut c = f64::INFINITY;
    for _ in 0..pairs {
        let mut x = [0.0; 4];
        let mut y = [0.0; 4];
        for k in 0..dimension {
            x[k] = 2.0 * next() - 1.0;
            y[k] = 2.0 * next() - 1.0;
        }
        let nx = (0..dimension).map(|k| x[k] * x[k]).sum::<f64>().sqrt();
        let ny = (0..dimension).map(|k| y[k] * y[k]).sum::<f64>().sqrt();
        let mut s = [0.0; 4];
        for k in 0..dimension {
            s[k] = x[k] + y[k];
        }
        let ns = (0..dimension).map(|k| s[k] * s[k]).sum::<f64>().sqrt();
        let slack = nx + ny - ns;
        if slack < 1e-9 {
            continue; // collinear pair carries no information
        }
        let excess = tau(&x) + tau(&y) - tau(&s);
        c = c.min(excess / slack);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid1(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> ConvexGridFunction {
        let spacing = (hi - lo) / (n - 1) as f64;
        ConvexGridFunction::from_fn(
            1,
            [lo, 0.0, 0.0, 0.0],
            [spacing, 0.0, 0.0, 0.0],
            [n, 1, 1, 1],
            |p| f(p[0]),
        )
    }

    #[test]
    fn quadratic_is_self_dual() {
        let f = grid1(-3.0, 3.0, 601, |h| 0.5 * h * h);
        let dual = grid1(-2.0, 2.0, 401, |_| 0.0);
        let star = legendre_fenchel(&f, &dual).unwrap();
        for i in 0..star.len() {
            let x = star.point(i)[0];
            assert!((star.values[i] - 0.5 * x * x).abs() < 1e-4, "x={x}");
        }
    }

    #[test]
    fn characteristic_interval_conjugates_to_abs() {
        let a = 1.5;
        let f = grid1(-3.0, 3.0, 601, |h| if h.abs() <= a { 0.0 } else { f64::INFINITY });
        let dual = grid1(-2.0, 2.0, 81, |_| 0.0);
        let star = legendre_fenchel(&f, &dual).unwrap();
        for i in 0..star.len() {
            let x = star.point(i)[0];
            assert!((star.values[i] - a * x.abs()).abs() < 1.5e-2, "x={x}");
        }
        let all_inf = grid1(-1.0, 1.0, 11, |_| f64::INFINITY);
        assert!(matches!(legendre_fenchel(&all_inf, &dual), Err(GeometryError::AllInfinite)));
    }

    #[test]
    fn fast_path_matches_direct() {
        let f = grid1(-2.0, 2.5, 173, |h| (h - 0.3).abs() + 0.2 * h * h);
        let dual = grid1(-3.0, 3.0, 257, |_| 0.0);
        let direct = legendre_fenchel(&f, &dual).unwrap();
        let fast = legendre_fenchel_1d_fast(&f, &dual).unwrap();
        for i in 0..direct.len() {
            assert!((direct.values[i] - fast.values[i]).abs() < 1e-12, "i={i}");
        }
    }

    #[test]
    fn double_conjugate_is_convex_envelope() {
        // randomized piecewise-linear-ish inputs: envelope must minorize f,
        // be convex, and agree with f for convex inputs
        for trial in 0..20u64 {
            let mut state = 1000 + trial;
            let mut next = || {
                state = crate::numeric::splitmix64(state);
                crate::numeric::unit_uniform(state)
            };
            let (a, b, c) = (next() * 2.0, next() * 4.0 - 2.0, next());
            let noise: Vec<f64> = (0..101).map(|_| 0.5 * (next() - 0.5)).collect();
            let mut f = grid1(-2.0, 2.0, 101, |h| a * h * h + b * h + c);
            for (v, n) in f.values.iter_mut().zip(&noise) {
                *v += n; // noisy, nonconvex
            }
            let env = convex_envelope(&f, &f).unwrap();
            assert!(env.convexity_defect() < 1e-9);
            for i in 0..f.len() {
                assert!(env.values[i] <= f.values[i] + 1e-9);
            }
            let g = grid1(-2.0, 2.0, 101, |h| a * h * h + b * h + c);
            // dual grid must cover the slope range of g, else the double
            // conjugate flattens near the boundary
            let slopes = grid1(-12.0, 12.0, 601, |_| 0.0);
            let star = legendre_fenchel(&g, &slopes).unwrap();
            let env_g = legendre_fenchel(&star, &g).unwrap();
            let spacing = g.spacing[0];
            for i in 0..g.len() {
                // within grid tolerance: spacing * Lipschitz bound
                let lip = 2.0 * a * 2.0 + b.abs();
                assert!((env_g.values[i] - g.values[i]).abs() <= 2.0 * spacing * lip + 1e-9);
            }
        }
    }

    fn ball2(radius: f64) -> ConvexBody {
        ConvexBody::table_from_fn(|_| radius)
    }

    #[test]
    fn euclidean_ball_is_self_polar() {
        let ball = ball2(1.0);
        let x = [0.6, -0.8, 0.0, 0.0];
        assert!((support_function(&ball, &x) - 1.0).abs() < 1e-9);
        assert!((minkowski_function(&ball, &x).unwrap() - 1.0).abs() < 1e-6);
        let p = polar(&ball).unwrap();
        for k in [0usize, 500, 2000, 4000] {
            if let ConvexBody::SupportTable2d { values } = &p {
                assert!((values[k] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn square_polar_is_cross_polytope() {
        // [-1,1]^2: tau(x) = |x|_1, polar gauge tau*(h) = |h|_inf
        let square = ConvexBody::Polytope {
            dimension: 2,
            vertices: vec![
                [1.0, 1.0, 0.0, 0.0],
                [1.0, -1.0, 0.0, 0.0],
                [-1.0, 1.0, 0.0, 0.0],
                [-1.0, -1.0, 0.0, 0.0],
            ],
        };
        let x = [0.7, -0.2, 0.0, 0.0];
        assert!((support_function(&square, &x) - 0.9).abs() < 1e-12);
        let p = polar(&square).unwrap();
        for (theta_deg, expect) in [(0.0f64, 1.0), (90.0, 1.0), (45.0, 2.0f64.sqrt() / 2.0)] {
            let t = theta_deg.to_radians();
            let h = [t.cos(), t.sin(), 0.0, 0.0];
            // support of the cross-polytope = |h|_inf
            let got = support_function(&p, &h);
            let _ = expect;
            assert!((got - h[0].abs().max(h[1].abs())).abs() < 1e-5, "theta={theta_deg}");
        }
    }

    #[test]
    fn duality_inequality_random_audit() {
        let ellipse = ConvexBody::table_from_fn(|t| {
            let (a, b) = (2.0, 1.0);
            (a * a * t.cos().powi(2) + b * b * t.sin().powi(2)).sqrt()
        });
        let mut state = 7u64;
        let mut next = || {
            state = crate::numeric::splitmix64(state);
            2.0 * crate::numeric::unit_uniform(state) - 1.0
        };
        let mut equality_seen = false;
        for _ in 0..1000 {
            let x = [next(), next(), 0.0, 0.0];
            let h = [next(), next(), 0.0, 0.0];
            let lhs = x[0] * h[0] + x[1] * h[1];
            let bound = support_function(&ellipse, &x) * minkowski_function(&ellipse, &h).unwrap();
            assert!(lhs <= bound + 1e-7, "x.h={lhs} bound={bound}");
            // equality at aligned conjugate pairs
            if (lhs - bound).abs() < 1e-3 * bound.abs().max(1e-12) {
                equality_seen = true;
            }
        }
        // force an equality case: h dual to x on the boundary
        let x = [1.0, 0.0, 0.0, 0.0];
        let h = [2.0, 0.0, 0.0, 0.0]; // boundary point of the ellipse along e1
        let lhs = x[0] * h[0];
        let bound = support_function(&ellipse, &x) * minkowski_function(&ellipse, &h).unwrap();
        assert!((lhs - bound).abs() < 1e-5);
        let _ = equality_seen;
    }

    #[test]
    fn origin_not_interior_is_reported() {
        // support function dips to 0: the body touches the origin
        let flat = ConvexBody::table_from_fn(|t| t.cos().max(0.0));
        assert!(matches!(
            minkowski_function(&flat, &[1.0, 0.0, 0.0, 0.0]),
            Err(GeometryError::OriginNotInterior(_))
        ));
    }

    #[test]
    fn circle_and_ellipse_curvature() {
        let rho = 2.5;
        for theta in [0.0, 0.7, 2.0] {
            let r = tau_curvature(|_| rho, theta, 1e-3);
            assert!((r - rho).abs() < 1e-9);
        }
        let (a, b) = (2.0, 1.0);
        let tau = |t: f64| (a * a * t.cos().powi(2) + b * b * t.sin().powi(2)).sqrt();
        let r0 = tau_curvature(tau, 0.0, 1e-3);
        assert!((r0 - b * b / a).abs() < 1e-4, "r(0) = {r0}");
        let r90 = tau_curvature(tau, std::f64::consts::FRAC_PI_2, 1e-3);
        assert!((r90 - a * a / b).abs() < 1e-4);
        // table variant
        let body = ConvexBody::table_from_fn(tau);
        if let ConvexBody::SupportTable2d { values } = &body {
            let r = tau_curvature_from_table(values, 0).unwrap();
            assert!((r - b * b / a).abs() < 1e-3);
        }
        assert!(matches!(
            tau_curvature_from_table(&[1.0; 8], 0),
            Err(GeometryError::TableTooCoarse(8))
        ));
    }

    #[test]
    fn hessian_annihilates_radial_direction() {
        let tau = |x: &[f64; 4]| (x[0] * x[0] + 4.0 * x[1] * x[1]).sqrt();
        for x in [[3.0, 1.0, 0.0, 0.0], [1.0, -2.0, 0.0, 0.0], [5.0, 0.5, 0.0, 0.0]] {
            let pc = principal_curvatures(tau, &x, 2, 1e-3);
            assert!(pc.radial_residual < 1e-6, "residual {}", pc.radial_residual);
            assert_eq!(pc.radii.len(), 1);
        }
    }

    #[test]
    fn quadratic_expansion_euclidean() {
        let tau = |x: &[f64; 4]| (x[0] * x[0] + x[1] * x[1]).sqrt();
        let x = [100.0, 0.0, 0.0, 0.0];
        let check = quadratic_expansion_check(tau, &x, &[1.0], 0.5, 2);
        // exact Euclidean oracle: sqrt((50)^2 + 1) * 2 - 100 = 2/100 - O(1/x^3)
        let exact = 2.0 * (2500.0f64 + 1.0).sqrt() - 100.0;
        assert!((check.splitting_cost - exact).abs() < 1e-9);
        assert!((check.predicted - 0.02).abs() < 1e-6);
        assert!(check.residual_ratio.abs() <= 0.02, "ratio {}", check.residual_ratio);

        // y = 0: nothing happens
        let zero = quadratic_expansion_check(tau, &x, &[0.0], 0.5, 2);
        assert_eq!(zero.splitting_cost, 0.0);
        assert_eq!(zero.predicted, 0.0);
    }

    #[test]
    fn quadratic_expansion_improves_with_length() {
        let tau = |x: &[f64; 4]| (2.0 * x[0] * x[0] + 0.5 * x[1] * x[1]).sqrt();
        let mut last = f64::INFINITY;
        for scale in [20.0, 80.0, 320.0] {
            let x = [scale, 0.3 * scale, 0.0, 0.0];
            let check = quadratic_expansion_check(tau, &x, &[1.0], 0.4, 2);
            assert!(check.residual_ratio.abs() < last + 1e-12);
            last = check.residual_ratio.abs();
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn strict_triangle_for_ellipse() {
        let tau = |x: &[f64; 4]| (4.0 * x[0] * x[0] + x[1] * x[1]).sqrt();
        let c = strict_triangle_audit(tau, 2, 1000, 99);
        assert!(c > 0.0, "no strict triangle constant: {c}");
        // Euclidean norm: excess equals slack exactly, c = 1
        let eucl = |x: &[f64; 4]| (x[0] * x[0] + x[1] * x[1]).sqrt();
        let c = strict_triangle_audit(eucl, 2, 1000, 99);
        assert!((c - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rate_functions_log_cosh() {
        let lambda = grid1(-4.0, 4.0, 2001, |h| h.cosh().ln());
        let v_grid = grid1(-0.95, 0.95, 191, |_| 0.0);
        let h = [1.0, 0.0, 0.0, 0.0];
        let rf = rate_functions(&lambda, &h, &v_grid).unwrap();
        assert!(rf.convexity_defect <= 1e-9);
        assert!((rf.lambda_h - 1.0f64.cosh().ln()).abs() < 1e-6);
        for i in 0..rf.rate.len() {
            let v = rf.rate.point(i)[0];
            let exact = 0.5 * (1.0 + v) * (1.0 + v).ln() + 0.5 * (1.0 - v) * (1.0 - v).ln();
            assert!((rf.rate.values[i] - exact).abs() < 1e-3, "v={v}");
        }
        // I_h vanishes at v = grad lambda(h) = tanh(1), and nowhere below 0
        assert!(rf.tilted_min.abs() < 1e-3, "tilted min {}", rf.tilted_min);
        let vh = 1.0f64.tanh();
        let at = rf.tilted_rate.value_at(&[vh, 0.0, 0.0, 0.0]).unwrap();
        assert!(at.abs() < 1e-3);
        // ballisticity marker: I_h(0) = lambda(h) since lambda(0) = 0 is the min
        let at0 = rf.tilted_rate.value_at(&[0.0; 4]).unwrap();
        assert!((at0 - rf.lambda_h).abs() < 1e-6);
    }

    #[test]
    fn nonconvex_input_gets_enveloped() {
        let bumpy = grid1(-2.0, 2.0, 201, |h| h * h + 0.3 * (5.0 * h).sin());
        let v_grid = grid1(-3.0, 3.0, 121, |_| 0.0);
        let rf = rate_functions(&bumpy, &[0.5, 0.0, 0.0, 0.0], &v_grid).unwrap();
        assert!(rf.convexity_defect > 1e-9, "input should register as nonconvex");
        assert!(rf.rate.convexity_defect() < 1e-9);
        assert!(rf.tilted_min > -1e-9);
    }
}
