//! Evaluation–approximation–maximization loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::design::{latin_hypercube, shifted_halton, uniform_point};
use crate::ei::{log_ei, log_ei_with_gradient};
use crate::gp::{GpFitOptions, GpModel};
use crate::local::{augmented_lagrangian, projected_ascent, restore_feasibility, CheapConstrainedOptions};
use crate::{Bounds, ConstrainedObjective, EamError};

/// Smallest distance, in unit-box coordinates, between a proposal and an evaluated site.
pub const MIN_SEPARATION: f64 = 1e-3;
/// Design thinning radius used when the full design cannot be interpolated.
pub const THINNING_RADIUS: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct EamOptions {
    /// Size of the initial design; `None` means `max(10, 2p)`.
    pub initial_points: Option<usize>,
    pub max_iterations: usize,
    pub epsilon: f64,
    /// Relative stagnation tolerance on the incumbent, scaled by `1 + |y*|`.
    pub tolerance: f64,
    pub stagnation_window: usize,
    pub probes: usize,
    pub multistarts: usize,
    /// Hyperparameters are re-optimized every iteration up to here, then every `refit_every`.
    pub full_refit_until: usize,
    pub refit_every: usize,
    /// Stop as soon as the incumbent reaches this value.
    pub target: Option<f64>,
    /// With a target, improvements below this fraction of the remaining gap count as stagnation.
    pub target_gap_fraction: f64,
    pub seed: u64,
}

impl Default for EamOptions {
    fn default() -> Self {
        EamOptions {
            initial_points: None,
            max_iterations: 60,
            epsilon: 0.1,
            tolerance: 1e-4,
            stagnation_window: 3,
            probes: 256,
            multistarts: 8,
            full_refit_until: 40,
            refit_every: 5,
            target: None,
            target_gap_fraction: 0.01,
            seed: 0,
        }
    }
}

impl EamOptions {
    pub fn initial_size(&self, p: usize) -> usize {
        self.initial_points.unwrap_or_else(|| (2 * p).max(10))
    }
}

/// One evaluation of the expensive function.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub x: Vec<f64>,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EamRecord {
    /// 0 for the initial design.
    pub iteration: usize,
    pub x: Vec<f64>,
    pub c: f64,
    pub f: f64,
    pub g: f64,
    pub y_star: f64,
    /// Expected improvement at the chosen site (NaN for design and exploration points).
    pub ei: f64,
    pub explored: bool,
}

#[derive(Debug, Clone)]
pub struct EamOutcome {
    pub x_best: Vec<f64>,
    pub y_best: f64,
    /// False when no evaluated point satisfied the constraint; `x_best` is then the least
    /// infeasible point.
    pub feasible: bool,
    pub converged: bool,
    pub box_hit: bool,
    pub iterations: usize,
    /// Calls to the expensive function made by this run.
    pub new_evaluations: usize,
    /// Every evaluation known to the run, prior ones first.
    pub evaluations: Vec<Evaluation>,
    pub trace: Vec<EamRecord>,
}

impl EamOutcome {
    pub fn trace_csv(&self) -> String {
        let p = self.x_best.len();
        let mut out = String::from("iteration");
        for k in 0..p {
            out.push_str(&format!(",x{}", k + 1));
        }
        out.push_str(",c,f,g,incumbent,ei,explored\n");
        for r in &self.trace {
            out.push_str(&r.iteration.to_string());
            for v in &r.x {
                out.push_str(&format!(",{v:e}"));
            }
            out.push_str(&format!(",{:e},{:e},{:e},{:e},{:e},{}\n", r.c, r.f, r.g, r.y_star, r.ei, r.explored));
        }
        out
    }

    /// Incumbent values in iteration order.
    pub fn incumbent_path(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.y_star).collect()
    }
}

struct State<'a, P: ConstrainedObjective> {
    problem: &'a P,
    bounds: &'a Bounds,
    evals: Vec<Evaluation>,
    f_vals: Vec<f64>,
    g_vals: Vec<f64>,
    best: Option<usize>,
}

impl<P: ConstrainedObjective> State<'_, P> {
    fn push(&mut self, x: Vec<f64>, c: f64) -> bool {
        let f = self.problem.f(&x);
        let g = self.problem.g(&x);
        self.evals.push(Evaluation { x, c });
        self.f_vals.push(f);
        self.g_vals.push(g);
        let i = self.evals.len() - 1;
        let feasible = c.is_finite() && g <= c;
        if feasible && self.best.is_none_or(|b| f > self.f_vals[b]) {
            self.best = Some(i);
        }
        feasible
    }

    fn y_star(&self) -> f64 {
        self.best.map_or(f64::NEG_INFINITY, |b| self.f_vals[b])
    }

    fn scaled_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).enumerate().map(|(k, (u, v))| ((u - v) / self.bounds.width(k)).powi(2)).sum::<f64>().sqrt()
    }

    /// Prior evaluations only need to be distinct; proposals must keep `MIN_SEPARATION`.
    fn is_new(&self, x: &[f64]) -> bool {
        self.evals.iter().all(|e| self.scaled_distance(&e.x, x) > 1e-9)
    }

    fn is_separated(&self, x: &[f64]) -> bool {
        self.evals.iter().all(|e| self.scaled_distance(&e.x, x) > MIN_SEPARATION)
    }

    fn training_set(&self, radius: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut xs: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for e in &self.evals {
            if !e.c.is_finite() {
                continue;
            }
            let close = xs.iter().any(|x| {
                x.iter().zip(&e.x).all(|(a, b)| (a - b).abs() <= 1e-10) || self.scaled_distance(x, &e.x) <= radius
            });
            if !close {
                xs.push(e.x.clone());
                ys.push(e.c);
            }
        }
        (xs, ys)
    }

    /// Fits on every finite evaluation; if that cannot interpolate, refits on a design thinned
    /// to `THINNING_RADIUS`.
    fn fit(&self, warm: Option<&[f64]>, optimize: bool, evals_per_start: usize) -> Result<GpModel, EamError> {
        let opts = GpFitOptions {
            scale_box: Some(self.bounds.clone()),
            warm_start: warm.map(|w| w.to_vec()),
            max_evals_per_start: evals_per_start,
            optimize,
        };
        let (xs, ys) = self.training_set(0.0);
        match GpModel::fit_with(&xs, &ys, &opts) {
            Err(EamError::IllConditioned) => {
                let (xs, ys) = self.training_set(THINNING_RADIUS);
                GpModel::fit_with(&xs, &ys, &opts)
            }
            other => other,
        }
    }
}

/// Maximizes `problem.f` subject to `problem.g(x) <= critical(x)` on `bounds`.
///
/// `prior` evaluations (for instance from a companion run over the same `critical`) count toward
/// the initial design and are not re-evaluated.
pub fn eam_maximize<P, C>(
    problem: &P,
    mut critical: C,
    bounds: &Bounds,
    opts: &EamOptions,
    prior: &[Evaluation],
) -> Result<EamOutcome, EamError>
where
    P: ConstrainedObjective,
    C: FnMut(&[f64]) -> f64,
{
    let p = bounds.dim();
    if problem.dim() != p {
        return Err(EamError::InvalidOptions(format!("problem dimension {} vs box {p}", problem.dim())));
    }
    if !(0.0..=1.0).contains(&opts.epsilon) {
        return Err(EamError::InvalidOptions(format!("epsilon {} outside [0, 1]", opts.epsilon)));
    }
    let k = opts.initial_size(p);
    if k < p + 2 {
        return Err(EamError::InvalidOptions(format!("initial design {k} smaller than p + 2 = {}", p + 2)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut state = State { problem, bounds, evals: Vec::new(), f_vals: Vec::new(), g_vals: Vec::new(), best: None };
    for e in prior.iter().filter(|e| bounds.contains(&e.x) && e.x.len() == p) {
        if state.is_new(&e.x) {
            state.push(e.x.clone(), e.c);
        }
    }
    let mut trace = Vec::new();
    let mut new_evaluations = 0;
    let needed = k.saturating_sub(state.evals.len());
    for x in latin_hypercube(bounds, needed, &mut rng) {
        let c = critical(&x);
        new_evaluations += 1;
        state.push(x.clone(), c);
        let last = state.evals.len() - 1;
        trace.push(EamRecord {
            iteration: 0,
            x,
            c,
            f: state.f_vals[last],
            g: state.g_vals[last],
            y_star: state.y_star(),
            ei: f64::NAN,
            explored: false,
        });
    }

    let mut ln_beta: Option<Vec<f64>> = None;
    let mut stagnant = 0;
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=opts.max_iterations {
        if opts.target.is_some_and(|t| state.y_star() >= t) {
            converged = true;
            break;
        }
        iterations = iter;
        let y_before = state.y_star();
        let refit = ln_beta.is_none() || iter <= opts.full_refit_until || iter % opts.refit_every.max(1) == 0;
        let model = match &ln_beta {
            None => state.fit(None, true, 250),
            Some(w) if refit => state.fit(Some(w), true, 30 * (p + 1)),
            Some(w) => state.fit(Some(w), false, 0),
        };
        let model = match model {
            Ok(m) => {
                ln_beta = Some(m.ln_lengthscales().to_vec());
                Some(m)
            }
            Err(_) => None,
        };

        let explore = rng.random::<f64>() < opts.epsilon;
        let mut chosen: Option<(Vec<f64>, f64)> = None;
        if let (false, Some(m)) = (explore, &model) {
            chosen = m_step(&state, m, opts, &mut rng);
        }
        let explored = chosen.is_none();
        // Expected gain used by the stopping rule: zero when the surrogate proposes nothing new.
        let mut gain = if explore || model.is_none() { f64::NAN } else { 0.0 };
        let (x, ei) = match chosen {
            Some((x, v)) if state.is_separated(&x) => {
                gain = v.exp();
                (x, v.exp())
            }
            _ => (uniform_point(bounds, &mut rng), f64::NAN),
        };
        let c = critical(&x);
        new_evaluations += 1;
        state.push(x.clone(), c);
        let last = state.evals.len() - 1;
        trace.push(EamRecord {
            iteration: iter,
            x,
            c,
            f: state.f_vals[last],
            g: state.g_vals[last],
            y_star: state.y_star(),
            ei,
            explored: explored || ei.is_nan(),
        });

        // Stagnation counts only surrogate-driven steps whose own expected gain is negligible.
        let y_after = state.y_star();
        let mut tol = opts.tolerance * (1.0 + y_after.abs());
        if let Some(t) = opts.target {
            tol = tol.max(opts.target_gap_fraction * (t - y_after));
        }
        if !(y_after.is_finite() && y_before.is_finite()) || y_after - y_before >= tol {
            stagnant = 0;
        } else if gain.is_finite() && gain < tol {
            stagnant += 1;
        }
        if stagnant >= opts.stagnation_window {
            converged = true;
            break;
        }
    }
    if opts.target.is_some_and(|t| state.y_star() >= t) {
        converged = true;
    }

    let (best_index, feasible) = match state.best {
        Some(b) => (b, true),
        None => {
            let least = (0..state.evals.len())
                .filter(|&i| state.evals[i].c.is_finite())
                .min_by(|&a, &b| {
                    let va = state.g_vals[a] - state.evals[a].c;
                    let vb = state.g_vals[b] - state.evals[b].c;
                    va.total_cmp(&vb)
                })
                .unwrap_or(0);
            (least, false)
        }
    };
    let x_best = state.evals[best_index].x.clone();
    Ok(EamOutcome {
        box_hit: bounds.touches_face(&x_best, 1e-6),
        y_best: state.f_vals[best_index],
        x_best,
        feasible,
        converged,
        iterations,
        new_evaluations,
        evaluations: state.evals,
        trace,
    })
}

/// Maximizes log EI over the box; returns the site and its log EI, or `None` when EI vanishes
/// on every candidate.
fn m_step<P: ConstrainedObjective, R: Rng>(
    state: &State<'_, P>,
    model: &GpModel,
    opts: &EamOptions,
    rng: &mut R,
) -> Option<(Vec<f64>, f64)> {
    let problem = state.problem;
    let bounds = state.bounds;
    let y_star = state.y_star();
    let objective = |x: &[f64]| -> (f64, Vec<f64>) {
        log_ei_with_gradient(model, x, problem.f(x), &problem.grad_f(x), problem.g(x), &problem.grad_g(x), y_star)
    };

    let mut scored: Vec<(f64, Vec<f64>)> = shifted_halton(bounds, opts.probes, rng)
        .into_iter()
        .map(|x| (log_ei(model, &x, problem.f(&x), problem.g(&x), y_star), x))
        .filter(|(v, _)| v.is_finite())
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut starts: Vec<Vec<f64>> = scored.into_iter().take(opts.multistarts).map(|(_, x)| x).collect();

    // The surrogate-constrained optimum started from the incumbent is always a candidate.
    if let Some(b) = state.best {
        let anchor = &state.evals[b].x;
        let f = |x: &[f64]| (problem.f(x), problem.grad_f(x));
        let h = |x: &[f64]| {
            let pr = model.predict_with_gradient(x);
            let grad: Vec<f64> = problem.grad_g(x).iter().zip(&pr.grad_mean).map(|(a, b)| a - b).collect();
            (problem.g(x) - pr.mean, grad)
        };
        let al = CheapConstrainedOptions { outer_iterations: 25, inner_iterations: 200, ..Default::default() };
        let x = augmented_lagrangian(&f, &h, anchor, bounds, &al);
        let x = if h(anchor).0 <= 0.0 { restore_feasibility(&|y: &[f64]| h(y).0, &x, anchor) } else { x };
        starts.push(x);
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in starts {
        let (v0, _) = objective(&s);
        let (x, v) = if v0.is_finite() { projected_ascent(&objective, &s, bounds, 200) } else { (s, v0) };
        if v.is_finite() && best.as_ref().is_none_or(|b| v > b.1) {
            best = Some((x, v));
        }
    }
    best
}
