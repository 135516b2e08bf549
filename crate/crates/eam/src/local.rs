//! Local optimizers: Nelder–Mead, projected gradient ascent, and an augmented-Lagrangian
//! multistart solver for problems whose constraint is cheap.

use rand::Rng;

use crate::design::latin_hypercube;
use crate::Bounds;

/// Minimizes `cost` with Nelder–Mead, clamping every vertex to `bounds`.
/// Returns the best vertex and its value.
pub fn nelder_mead<F>(
    mut cost: F,
    start: &[f64],
    step: f64,
    bounds: &Bounds,
    max_evals: usize,
    ftol: f64,
) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    let p = start.len();
    let clamp = |x: &mut Vec<f64>| bounds.project(x);
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(p + 1);
    let mut x0 = start.to_vec();
    clamp(&mut x0);
    simplex.push(x0.clone());
    for k in 0..p {
        let mut v = x0.clone();
        v[k] += if v[k] + step <= bounds.upper[k] { step } else { -step };
        clamp(&mut v);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| cost(v)).collect();
    let mut evals = p + 1;

    while evals < max_evals {
        let mut order: Vec<usize> = (0..=p).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if (values[p] - values[0]).abs() <= ftol * (1.0 + values[0].abs()) {
            break;
        }
        let mut centroid = vec![0.0; p];
        for v in &simplex[..p] {
            for (c, &x) in centroid.iter_mut().zip(v) {
                *c += x / p as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut v: Vec<f64> =
                centroid.iter().zip(&simplex[p]).map(|(&c, &w)| c + t * (w - c)).collect();
            bounds.project(&mut v);
            v
        };
        let xr = along(-1.0);
        let fr = cost(&xr);
        evals += 1;
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = cost(&xe);
            evals += 1;
            if fe < fr {
                simplex[p] = xe;
                values[p] = fe;
            } else {
                simplex[p] = xr;
                values[p] = fr;
            }
        } else if fr < values[p - 1] {
            simplex[p] = xr;
            values[p] = fr;
        } else {
            let (xc, fc) = if fr < values[p] {
                let xc = along(-0.5);
                let fc = cost(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = cost(&xc);
                (xc, fc)
            };
            evals += 1;
            if fc < values[p].min(fr) {
                simplex[p] = xc;
                values[p] = fc;
            } else {
                for i in 1..=p {
                    let v: Vec<f64> = simplex[0]
                        .iter()
                        .zip(&simplex[i])
                        .map(|(&b, &w)| b + 0.5 * (w - b))
                        .collect();
                    values[i] = cost(&v);
                    simplex[i] = v;
                }
                evals += p;
            }
        }
    }
    let best = (0..=p).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    (simplex[best].clone(), values[best])
}

/// Projected gradient ascent with Armijo backtracking along the projection arc.
/// `objective` returns the value and gradient; non-finite values count as rejected steps.
pub fn projected_ascent<F>(mut objective: F, start: &[f64], bounds: &Bounds, max_iter: usize) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let p = start.len();
    let mut x = start.to_vec();
    bounds.project(&mut x);
    let (mut value, mut grad) = objective(&x);
    if !value.is_finite() {
        return (x, value);
    }
    let scale = (0..p).map(|k| bounds.width(k)).fold(0.0, f64::max);
    let mut step = 0.05 * scale / (norm(&grad) + 1e-300);
    for _ in 0..max_iter {
        let gnorm = norm(&grad);
        if gnorm == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&grad).map(|(&a, &g)| a + step * g).collect();
            bounds.project(&mut trial);
            let moved: f64 = trial.iter().zip(&x).zip(&grad).map(|((&t, &a), &g)| (t - a) * g).sum();
            if moved <= 0.0 {
                break;
            }
            let (tv, tg) = objective(&trial);
            if tv.is_finite() && tv >= value + 1e-4 * moved {
                let dx: f64 = trial.iter().zip(&x).map(|(&t, &a)| (t - a).abs()).fold(0.0, f64::max);
                x = trial;
                value = tv;
                grad = tg;
                step *= 2.0;
                accepted = true;
                if dx <= 1e-10 * scale {
                    return (x, value);
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (x, value)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct CheapConstrainedOptions {
    pub starts: usize,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Constraint violation accepted before feasibility restoration.
    pub feasibility_tol: f64,
}

impl Default for CheapConstrainedOptions {
    fn default() -> Self {
        CheapConstrainedOptions { starts: 16, outer_iterations: 40, inner_iterations: 400, feasibility_tol: 1e-9 }
    }
}

#[derive(Debug, Clone)]
pub struct CheapConstrainedResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub feasible: bool,
    pub starts_converged: usize,
}

/// One augmented-Lagrangian solve of `max f` s.t. `h <= 0` from `start`.
pub fn augmented_lagrangian<F, H>(
    f: &F,
    h: &H,
    start: &[f64],
    bounds: &Bounds,
    opts: &CheapConstrainedOptions,
) -> Vec<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
    H: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = start.to_vec();
    bounds.project(&mut x);
    let mut lambda = 0.0;
    let mut rho = 10.0;
    let mut last_violation = f64::INFINITY;
    for _ in 0..opts.outer_iterations {
        let (lam, r) = (lambda, rho);
        let merit = |y: &[f64]| -> (f64, Vec<f64>) {
            let (fv, fg) = f(y);
            let (hv, hg) = h(y);
            let shifted = (lam + r * hv).max(0.0);
            let value = fv - (shifted * shifted - lam * lam) / (2.0 * r);
            let grad = fg.iter().zip(&hg).map(|(&a, &b)| a - shifted * b).collect();
            (value, grad)
        };
        let (next, _) = projected_ascent(merit, &x, bounds, opts.inner_iterations);
        x = next;
        let (hv, _) = h(&x);
        lambda = (lambda + rho * hv).max(0.0);
        let violation = hv.max(0.0);
        if violation <= opts.feasibility_tol && (lambda * hv).abs() <= 1e-8 {
            break;
        }
        if violation > 0.25 * last_violation {
            rho *= 10.0;
        }
        last_violation = violation;
        if rho > 1e12 {
            break;
        }
    }
    x
}

/// Pulls an infeasible `x` back toward a feasible `anchor` by bisection, returning the
/// feasible point on the segment closest to `x`.
pub fn restore_feasibility<H>(h: &H, x: &[f64], anchor: &[f64]) -> Vec<f64>
where
    H: Fn(&[f64]) -> f64,
{
    if h(x) <= 0.0 {
        return x.to_vec();
    }
    let point = |t: f64| -> Vec<f64> { anchor.iter().zip(x).map(|(&a, &b)| a + t * (b - a)).collect() };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if h(&point(mid)) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    point(lo)
}

/// Multistart augmented-Lagrangian solver for `max f(x)` s.t. `h(x) <= 0` on a box.
/// Starts are `anchor` (if any) followed by Latin-hypercube points. Infeasible end points are
/// restored toward `anchor` when it is feasible.
pub fn maximize_cheap_constrained<F, H, R>(
    f: F,
    h: H,
    bounds: &Bounds,
    anchor: Option<&[f64]>,
    opts: &CheapConstrainedOptions,
    rng: &mut R,
) -> Option<CheapConstrainedResult>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
    H: Fn(&[f64]) -> (f64, Vec<f64>),
    R: Rng + ?Sized,
{
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(a) = anchor {
        starts.push(a.to_vec());
    }
    let extra = opts.starts.saturating_sub(starts.len());
    starts.extend(latin_hypercube(bounds, extra, rng));
    let feasible_anchor = anchor.filter(|a| h(a).0 <= 0.0);

    let mut best: Option<CheapConstrainedResult> = None;
    let mut converged = 0;
    for s in &starts {
        let mut x = augmented_lagrangian(&f, &h, s, bounds, opts);
        if h(&x).0 > 0.0 {
            match feasible_anchor {
                Some(a) => x = restore_feasibility(&|y: &[f64]| h(y).0, &x, a),
                None => continue,
            }
        }
        converged += 1;
        let value = f(&x).0;
        if best.as_ref().is_none_or(|b| value > b.value) {
            best = Some(CheapConstrainedResult { x, value, feasible: true, starts_converged: 0 });
        }
    }
    best.map(|mut b| {
        b.starts_converged = converged;
        b
    })
}
