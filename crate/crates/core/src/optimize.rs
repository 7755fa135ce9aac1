//! Co-design driver: projected L-BFGS over scaled (control, model)
//! parameters with finite-difference gradients, the periodic tugboat
//! update, restarts and trajectory logging.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::reduced_coupling;
use crate::entangler::{tugboat_gate, tugboat_seed, weyl_coordinates, TugboatParams, WeylMap};
use crate::error::{Error, Result};
use crate::hilbert::{overlap_fidelity, ComplexMatrix};
use crate::objective::{combined_goal, nearest_unitary, Evaluation, GoalKind, Problem};

/// Result of a finite-difference gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub grad: Vec<f64>,
    /// Coordinates where a one-sided difference was used.
    pub one_sided: Vec<bool>,
    /// Coordinates where a probe returned a non-finite value.
    pub flagged: Vec<bool>,
}

/// Central differences with step `step` on every coordinate, falling back to
/// a one-sided difference at a bound or when a probe is non-finite. Probes
/// run in parallel; the result does not depend on scheduling.
pub fn fd_gradient<F>(f: &F, x: &[f64], fx: f64, bounds: &[(f64, f64)], step: f64) -> FdGradient
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let n = x.len();
    let probes: Vec<(usize, f64)> = (0..n).flat_map(|i| [(i, step), (i, -step)]).collect();
    let values: Vec<Option<f64>> = probes
        .par_iter()
        .map(|&(i, h)| {
            let xi = x[i] + h;
            if xi < bounds[i].0 || xi > bounds[i].1 {
                return None;
            }
            let mut p = x.to_vec();
            p[i] = xi;
            Some(f(&p))
        })
        .collect();
    let mut grad = vec![0.0; n];
    let mut one_sided = vec![false; n];
    let mut flagged = vec![false; n];
    for i in 0..n {
        let plus = values[2 * i];
        let minus = values[2 * i + 1];
        if plus.is_some_and(|v| !v.is_finite()) || minus.is_some_and(|v| !v.is_finite()) {
            flagged[i] = true;
        }
        let plus = plus.filter(|v| v.is_finite());
        let minus = minus.filter(|v| v.is_finite());
        grad[i] = match (plus, minus) {
            (Some(p), Some(m)) => (p - m) / (2.0 * step),
            (Some(p), None) => {
                one_sided[i] = true;
                (p - fx) / step
            }
            (None, Some(m)) => {
                one_sided[i] = true;
                (fx - m) / step
            }
            (None, None) => {
                flagged[i] = true;
                0.0
            }
        };
    }
    FdGradient {
        grad,
        one_sided,
        flagged,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project(x: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    x.iter().zip(bounds).map(|(&v, &(lo, hi))| v.clamp(lo, hi)).collect()
}

/// Infinity norm of the projected gradient step `P(x - g) - x`.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: &[(f64, f64)]) -> f64 {
    x.iter()
        .zip(g)
        .zip(bounds)
        .map(|((&xi, &gi), &(lo, hi))| ((xi - gi).clamp(lo, hi) - xi).abs())
        .fold(0.0, f64::max)
}

/// Coordinates pinned at a bound with the gradient pointing outwards.
pub fn active_set(x: &[f64], g: &[f64], bounds: &[(f64, f64)]) -> Vec<bool> {
    x.iter()
        .zip(g)
        .zip(bounds)
        .map(|((&xi, &gi), &(lo, hi))| {
            let tol = 1e-12 * (1.0 + xi.abs());
            (xi <= lo + tol && gi > 0.0) || (xi >= hi - tol && gi < 0.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the projected gradient falls below this (inf-norm).
    pub tol_grad: f64,
    /// Stop when a step moves every coordinate less than this.
    pub tol_x: f64,
    pub c1: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 200,
            tol_grad: 1e-10,
            tol_x: 1e-14,
            c1: 1e-4,
            max_line_search: 30,
        }
    }
}

/// Limited-memory inverse-Hessian model on box-constrained variables.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    memory: usize,
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl Lbfgs {
    pub fn new(memory: usize) -> Self {
        Self {
            memory: memory.max(1),
            pairs: VecDeque::new(),
        }
    }

    pub fn reset_memory(&mut self) {
        self.pairs.clear();
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Stores a curvature pair if `s . y` is safely positive.
    pub fn update(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        if !(sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt()) || !sy.is_finite() {
            return false;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y));
        true
    }

    /// Quasi-Newton descent direction restricted to the free variables.
    pub fn direction(&self, x: &[f64], g: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
        let fixed = active_set(x, g, bounds);
        let mask = |v: &[f64]| -> Vec<f64> {
            v.iter().zip(&fixed).map(|(&a, &f)| if f { 0.0 } else { a }).collect()
        };
        let mut q = mask(g);
        let masked: Vec<(Vec<f64>, Vec<f64>)> = self.pairs.iter().map(|(s, y)| (mask(s), mask(y))).collect();
        let mut alphas = Vec::with_capacity(masked.len());
        for (s, y) in masked.iter().rev() {
            let sy = dot(s, y);
            if sy <= 0.0 {
                alphas.push(0.0);
                continue;
            }
            let a = dot(s, &q) / sy;
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = masked
            .last()
            .map(|(s, y)| {
                let yy = dot(y, y);
                let sy = dot(s, y);
                if yy > 0.0 && sy > 0.0 {
                    sy / yy
                } else {
                    1.0
                }
            })
            .unwrap_or(1.0);
        let mut r: Vec<f64> = q.iter().map(|v| gamma * v).collect();
        for ((s, y), a) in masked.iter().zip(alphas.iter().rev()) {
            let sy = dot(s, y);
            if sy <= 0.0 {
                continue;
            }
            let b = dot(y, &r) / sy;
            r.iter_mut().zip(s).for_each(|(ri, si)| *ri += si * (a - b));
        }
        r.iter().map(|v| -v).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub alpha: f64,
    pub evaluations: usize,
}

/// Backtracking Armijo search along the projected path `P(x + alpha d)`,
/// with a quadratic-interpolation refinement of accepted unclipped steps.
#[allow(clippy::too_many_arguments)]
pub fn line_search<F>(
    f: &F,
    x: &[f64],
    fx: f64,
    g: &[f64],
    d: &[f64],
    bounds: &[(f64, f64)],
    alpha0: f64,
    config: &LbfgsConfig,
) -> Option<LineSearchOutcome>
where
    F: Fn(&[f64]) -> f64,
{
    let slope = dot(g, d);
    if !(slope < 0.0) {
        return None;
    }
    let mut alpha = alpha0;
    let mut evals = 0;
    while evals < config.max_line_search {
        let raw: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect();
        let xa = project(&raw, bounds);
        let dx: Vec<f64> = xa.iter().zip(x).map(|(a, b)| a - b).collect();
        if dx.iter().all(|v| *v == 0.0) {
            return None;
        }
        let decrease = dot(g, &dx);
        let fa = f(&xa);
        evals += 1;
        if fa.is_finite() && fa <= fx + config.c1 * decrease.min(0.0) && decrease < 0.0 {
            let mut best = LineSearchOutcome {
                x: xa,
                f: fa,
                alpha,
                evaluations: evals,
            };
            let clipped = raw != best.x;
            let curvature = (fa - fx - slope * alpha) / (alpha * alpha);
            if !clipped && curvature > 0.0 {
                let star = -slope / (2.0 * curvature);
                if star > 0.0 && star <= 4.0 * alpha && (star - alpha).abs() > 1e-3 * alpha {
                    let raw_s: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + star * di).collect();
                    let xs = project(&raw_s, bounds);
                    let fs = f(&xs);
                    best.evaluations += 1;
                    if fs.is_finite() && fs < best.f {
                        best = LineSearchOutcome {
                            x: xs,
                            f: fs,
                            alpha: star,
                            evaluations: best.evaluations,
                        };
                    }
                }
            } else if !clipped {
                // no curvature seen along the path: expand while it keeps paying off
                let mut trial = alpha;
                while best.evaluations < config.max_line_search {
                    trial *= 2.0;
                    let raw_t: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + trial * di).collect();
                    let xt = project(&raw_t, bounds);
                    let ft = f(&xt);
                    best.evaluations += 1;
                    if !(ft.is_finite() && ft < best.f) {
                        break;
                    }
                    let clipped_t = raw_t != xt;
                    best = LineSearchOutcome {
                        x: xt,
                        f: ft,
                        alpha: trial,
                        evaluations: best.evaluations,
                    };
                    if clipped_t {
                        break;
                    }
                }
            }
            return Some(best);
        }
        alpha = if fa.is_finite() {
            let denom = 2.0 * (fa - fx - slope * alpha);
            let interp = if denom > 0.0 { -slope * alpha * alpha / denom } else { 0.5 * alpha };
            interp.clamp(0.1 * alpha, 0.5 * alpha)
        } else {
            0.5 * alpha
        };
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    GoalReached,
    SmallStep,
    MaxIterations,
    LineSearchFailed,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub history: Vec<f64>,
    pub status: Termination,
    /// Coordinates held at a bound at the solution.
    pub active: Vec<bool>,
}

/// Stand-alone box-constrained L-BFGS.
pub fn lbfgs_minimize<F, G>(f: F, grad: G, x0: &[f64], bounds: &[(f64, f64)], config: &LbfgsConfig) -> Result<LbfgsOutcome>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if x0.len() != bounds.len() {
        return Err(Error::InvalidArgument("bounds and start differ in length".into()));
    }
    for (i, (&v, &(lo, hi))) in x0.iter().zip(bounds).enumerate() {
        if !(lo <= v && v <= hi) {
            return Err(Error::OutOfBounds {
                name: format!("x[{i}]"),
                value: v,
                lo,
                hi,
            });
        }
    }
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::Optimization("objective is not finite at the start".into()));
    }
    let mut g = grad(&x);
    let mut model = Lbfgs::new(config.memory);
    let mut history = vec![fx];
    let mut evaluations = 1;
    let mut status = Termination::MaxIterations;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        if projected_gradient_norm(&x, &g, bounds) <= config.tol_grad {
            status = Termination::Converged;
            break;
        }
        let step = match lbfgs_step(&f, &x, fx, &g, bounds, &mut model, config) {
            Some(s) => s,
            None => {
                status = Termination::LineSearchFailed;
                break;
            }
        };
        evaluations += step.evaluations;
        iterations += 1;
        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let g_new = grad(&step.x);
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        if !model.update(s.clone(), y) {
            model.reset_memory();
        }
        let small = s.iter().all(|v| v.abs() <= config.tol_x);
        x = step.x;
        fx = step.f;
        g = g_new;
        history.push(fx);
        if small {
            status = Termination::SmallStep;
            break;
        }
    }
    let active = active_set(&x, &g, bounds);
    Ok(LbfgsOutcome {
        x,
        f: fx,
        iterations,
        evaluations,
        history,
        status,
        active,
    })
}

/// One quasi-Newton step; resets the memory once and retries with steepest
/// descent if the search fails.
fn lbfgs_step<F>(
    f: &F,
    x: &[f64],
    fx: f64,
    g: &[f64],
    bounds: &[(f64, f64)],
    model: &mut Lbfgs,
    config: &LbfgsConfig,
) -> Option<LineSearchOutcome>
where
    F: Fn(&[f64]) -> f64,
{
    for attempt in 0..2 {
        let mut d = model.direction(x, g, bounds);
        if !(dot(&d, g) < 0.0) {
            model.reset_memory();
            d = model.direction(x, g, bounds);
        }
        let alpha0 = if model.is_empty() {
            let gmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gmax > 0.0 {
                (1.0 / gmax).min(1.0)
            } else {
                1.0
            }
        } else {
            1.0
        };
        if let Some(out) = line_search(f, x, fx, g, &d, bounds, alpha0, config) {
            return Some(out);
        }
        if attempt == 0 && !model.is_empty() {
            model.reset_memory();
        } else {
            break;
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerConfig {
    /// Objective evaluations allowed per tugboat update.
    pub budget: usize,
    pub fd_step: f64,
    /// Bound on each local angle (rad).
    pub angle_bound: f64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            budget: 4000,
            fd_step: 1e-7,
            angle_bound: 4.0 * std::f64::consts::PI,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerResult {
    pub params: TugboatParams,
    pub eps: f64,
    pub start_eps: f64,
    pub evaluations: usize,
    pub budget_exhausted: bool,
}

fn tugboat_bounds(map: WeylMap, angle_bound: f64) -> Vec<(f64, f64)> {
    let mut b: Vec<(f64, f64)> = map.bounds().to_vec();
    b.extend(std::iter::repeat_n((-angle_bound, angle_bound), 12));
    b
}

fn tugboat_error(u: &ComplexMatrix, x: &[f64], map: WeylMap) -> f64 {
    match TugboatParams::from_slice(x).and_then(|p| tugboat_gate(&p, map)) {
        Ok(v) => 1.0 - overlap_fidelity(&v, u).unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    }
}

/// Bounded local minimization of `1 - F(V(b, gamma), U)` over all fifteen
/// tugboat parameters, started from `start` and from a Cartan-decomposition
/// seed of `U`. Never returns a worse point than `start`.
pub fn inner_tugboat_min(u: &ComplexMatrix, start: &TugboatParams, map: WeylMap, config: &InnerConfig) -> Result<InnerResult> {
    let bounds = tugboat_bounds(map, config.angle_bound);
    let x0 = project(&start.to_vec(), &bounds);
    let start_eps = tugboat_error(u, &start.to_vec(), map);
    if !start_eps.is_finite() {
        return Err(Error::OutOfBounds {
            name: "tugboat".into(),
            value: start.volume[0],
            lo: bounds[0].0,
            hi: bounds[0].1,
        });
    }
    let mut starts = vec![x0];
    if let Ok(seed) = tugboat_seed(&nearest_unitary(u), map) {
        starts.push(project(&seed.to_vec(), &bounds));
    }
    let counter = std::sync::atomic::AtomicUsize::new(0);
    let objective = |x: &[f64]| {
        counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        tugboat_error(u, x, map)
    };
    let per_iteration = 2 * 15 + 3;
    let mut best = (start.to_vec(), start_eps);
    let mut exhausted = false;
    for s in starts {
        let used = counter.load(std::sync::atomic::Ordering::Relaxed);
        if used >= config.budget {
            exhausted = true;
            break;
        }
        let remaining = config.budget - used;
        let lcfg = LbfgsConfig {
            memory: 15,
            max_iterations: (remaining / per_iteration).max(1),
            tol_grad: 1e-12,
            tol_x: 1e-15,
            ..LbfgsConfig::default()
        };
        let grad = |x: &[f64]| {
            let fx = objective(x);
            fd_gradient_serial(&objective, x, fx, &bounds, config.fd_step)
        };
        let out = lbfgs_minimize(objective, grad, &s, &bounds, &lcfg)?;
        if out.status == Termination::MaxIterations {
            exhausted = true;
        }
        if out.f < best.1 {
            best = (out.x, out.f);
        }
        if best.1 < 1e-14 {
            break;
        }
    }
    Ok(InnerResult {
        params: TugboatParams::from_slice(&best.0)?,
        eps: best.1,
        start_eps,
        evaluations: counter.into_inner(),
        budget_exhausted: exhausted,
    })
}

fn fd_gradient_serial<F>(f: &F, x: &[f64], fx: f64, bounds: &[(f64, f64)], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let up = x[i] + step;
            let down = x[i] - step;
            let eval = |p: &mut Vec<f64>, v: f64| {
                p[i] = v;
                let r = f(p);
                p[i] = x[i];
                r
            };
            match (up <= bounds[i].1, down >= bounds[i].0) {
                (true, true) => (eval(&mut p, up) - eval(&mut p, down)) / (2.0 * step),
                (true, false) => (eval(&mut p, up) - fx) / step,
                (false, true) => (fx - eval(&mut p, down)) / step,
                (false, false) => 0.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestartPolicy {
    pub max_restarts: usize,
    /// Iterations without improvement of the best goal before restarting.
    pub patience: usize,
    /// Gaussian perturbation in units of each parameter's scale.
    pub perturbation: f64,
}

impl Default for RestartPolicy {
    fn default() -> Self {
        Self {
            max_restarts: 3,
            patience: 25,
            perturbation: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub lbfgs_memory: usize,
    /// Finite-difference step on the scaled parameters.
    pub fd_step: f64,
    /// Outer iterations between tugboat updates.
    pub tugboat_update_period: usize,
    /// Goal change on a tugboat update above which the memory is cleared.
    pub refresh_threshold: f64,
    pub tol_goal: f64,
    pub tol_grad: f64,
    pub tol_x: f64,
    pub restart: RestartPolicy,
    pub inner: InnerConfig,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            lbfgs_memory: 10,
            fd_step: 1e-6,
            tugboat_update_period: 4,
            refresh_threshold: 1e-4,
            tol_goal: 1e-6,
            tol_grad: 1e-9,
            tol_x: 1e-10,
            restart: RestartPolicy::default(),
            inner: InnerConfig::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tugboat_update_period == 0 {
            return Err(Error::Configuration("tugboat_update_period must be >= 1".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Configuration("fd_step must be positive".into()));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::Configuration("lbfgs_memory must be >= 1".into()));
        }
        Ok(())
    }
}

/// One logged outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub eps_single: Option<f64>,
    pub eps_entangler: Option<f64>,
    pub leakage: f64,
    pub goal: f64,
    pub best_goal: f64,
    pub chi: f64,
    pub parameters: BTreeMap<String, f64>,
    pub tugboat: TugboatParams,
    /// Weyl point of the entangling gate (or the first gate).
    pub weyl: Option<[f64; 3]>,
    pub restart: bool,
    pub tugboat_updated: bool,
    pub memory_reset: bool,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub records: Vec<IterationRecord>,
}

pub const CSV_HEADER: &str = "iter,eps_I,eps_II,leakage,goal,chi,c1,c2,c3,restart";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl IterationRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn csv_row(&self) -> String {
        let [c1, c2, c3] = match self.weyl {
            Some(w) => w.map(|v| format!("{v:e}")),
            None => [String::new(), String::new(), String::new()],
        };
        format!(
            "{},{},{},{:e},{:e},{:e},{c1},{c2},{c3},{}",
            self.iteration,
            opt_field(self.eps_single),
            opt_field(self.eps_entangler),
            self.leakage,
            self.goal,
            self.chi,
            u8::from(self.restart)
        )
    }
}

impl TrajectoryLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_json_line());
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

/// Appends every record to a JSON-lines file as it is produced.
pub struct JsonlWriter<W: Write> {
    inner: W,
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn write(&mut self, record: &IterationRecord) -> Result<()> {
        writeln!(self.inner, "{}", record.to_json_line())?;
        self.inner.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodesignResult {
    pub log: TrajectoryLog,
    pub best_parameters: BTreeMap<String, f64>,
    pub best: Evaluation,
    pub tugboat: TugboatParams,
    pub status: Termination,
    pub restarts: usize,
    pub evaluations: usize,
    pub iterations: usize,
}

/// Tugboat start: the configured volume coordinates with local angles drawn
/// uniformly from `[-1e-3, 1e-3]`.
pub fn initial_tugboat(volume: [f64; 3], rng: &mut impl Rng) -> TugboatParams {
    let mut p = TugboatParams::new(volume);
    for a in p.local_angles.iter_mut() {
        *a = rng.random_range(-1e-3..=1e-3);
    }
    p
}

struct Outer<'a> {
    problem: &'a Problem,
    cv: crate::controls::ControlVector,
    bounds: Vec<(f64, f64)>,
    config: OptimizerConfig,
    evaluations: std::sync::atomic::AtomicUsize,
}

impl Outer<'_> {
    fn values(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.cv.values_from_scaled(x)
    }

    fn goal(&self, x: &[f64], tugboat: &TugboatParams) -> f64 {
        self.evaluations.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.values(x)
            .and_then(|v| self.problem.evaluate(&v, tugboat))
            .map(|e| e.goal)
            .unwrap_or(f64::NAN)
    }

    fn gradient(&self, x: &[f64], fx: f64, tugboat: &TugboatParams) -> Vec<f64> {
        let f = |p: &[f64]| self.goal(p, tugboat);
        fd_gradient(&f, x, fx, &self.bounds, self.config.fd_step).grad
    }

    fn record(
        &self,
        iteration: usize,
        x: &[f64],
        tugboat: &TugboatParams,
        best_goal: f64,
        flags: (bool, bool, bool),
    ) -> Result<IterationRecord> {
        let values = self.values(x)?;
        let eval = self.problem.evaluate(&values, tugboat)?;
        let (device, _) = self.problem.instantiate(&values)?;
        let chi = reduced_coupling(&device).unwrap_or(f64::NAN);
        let outcomes = self.problem.outcomes(&values)?;
        let gate_idx = self
            .problem
            .goal()
            .gates
            .iter()
            .position(|g| !g.target.is_local())
            .unwrap_or(0);
        let weyl = weyl_coordinates(&nearest_unitary(&outcomes[gate_idx].measured))
            .ok()
            .map(|w| w.as_array());
        let goal = combined_goal(
            self.problem.goal().kind,
            eval.eps_single.unwrap_or(0.0),
            eval.eps_entangler.unwrap_or(0.0),
            eval.leakage,
            self.problem.goal().leakage_weight,
        );
        Ok(IterationRecord {
            iteration,
            eps_single: eval.eps_single,
            eps_entangler: eval.eps_entangler,
            leakage: eval.leakage,
            goal,
            best_goal: best_goal.min(goal),
            chi,
            parameters: self.cv.names().iter().cloned().zip(values).collect(),
            tugboat: *tugboat,
            weyl,
            restart: flags.0,
            tugboat_updated: flags.1,
            memory_reset: flags.2,
            evaluations: self.evaluations.load(std::sync::atomic::Ordering::Relaxed),
        })
    }
}

/// Runs the co-design loop. `observer` sees every record as it is logged.
pub fn run_codesign(
    problem: &Problem,
    config: &OptimizerConfig,
    seed: u64,
    mut observer: impl FnMut(&IterationRecord) -> Result<()>,
) -> Result<CodesignResult> {
    config.validate()?;
    let cv = problem.initial_vector()?;
    let bounds = cv.scaled_bounds();
    let outer = Outer {
        problem,
        cv: cv.clone(),
        bounds: bounds.clone(),
        config: *config,
        evaluations: std::sync::atomic::AtomicUsize::new(0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = problem.goal().weyl_map;
    let mut tugboat = initial_tugboat(problem.goal().tugboat.volume, &mut rng);
    let has_entangler = problem.goal().kind != GoalKind::SingleQubit;

    let mut x = cv.scaled();
    let mut fx = outer.goal(&x, &tugboat);
    if !fx.is_finite() {
        let values = outer.values(&x)?;
        problem.evaluate(&values, &tugboat)?;
        return Err(Error::Optimization("goal is not finite at the start".into()));
    }
    let mut g = outer.gradient(&x, fx, &tugboat);
    let mut model = Lbfgs::new(config.lbfgs_memory);
    let lcfg = LbfgsConfig {
        memory: config.lbfgs_memory,
        tol_grad: config.tol_grad,
        tol_x: config.tol_x,
        ..LbfgsConfig::default()
    };

    let mut log = TrajectoryLog::default();
    let mut best = (x.clone(), fx, tugboat);
    let mut since_improvement = 0usize;
    let mut restarts = 0usize;
    let mut status = Termination::MaxIterations;
    let mut pending_restart = false;

    let first = outer.record(0, &x, &tugboat, fx, (false, false, false))?;
    observer(&first)?;
    log.records.push(first);

    let mut iteration = 0usize;
    while iteration < config.max_iterations {
        let mut restarted = false;
        if pending_restart {
            pending_restart = false;
            restarts += 1;
            restarted = true;
            let perturbed: Vec<f64> = best
                .0
                .iter()
                .map(|&v| v + config.restart.perturbation * rng.sample::<f64, _>(StandardNormal))
                .collect();
            x = project(&perturbed, &bounds);
            tugboat = best.2;
            fx = outer.goal(&x, &tugboat);
            if !fx.is_finite() {
                x = best.0.clone();
                fx = best.1;
            }
            model.reset_memory();
            g = outer.gradient(&x, fx, &tugboat);
            since_improvement = 0;
        }

        let mut updated = false;
        let mut reset = false;
        if has_entangler && iteration.is_multiple_of(config.tugboat_update_period) {
            let values = outer.values(&x)?;
            if let Some(u) = problem.entangler_gate(&values)? {
                let inner = inner_tugboat_min(&u, &tugboat, map, &config.inner)?;
                if inner.eps < inner.start_eps {
                    let new_tug = inner.params;
                    let f_new = outer.goal(&x, &new_tug);
                    if f_new.is_finite() {
                        if (f_new - fx).abs() > config.refresh_threshold {
                            model.reset_memory();
                            reset = true;
                        }
                        tugboat = new_tug;
                        fx = f_new;
                        g = outer.gradient(&x, fx, &tugboat);
                        updated = true;
                        if fx < best.1 {
                            best = (x.clone(), fx, tugboat);
                        }
                    }
                }
            }
        }

        if fx < config.tol_goal {
            status = Termination::GoalReached;
            break;
        }

        let mut early = None;
        if projected_gradient_norm(&x, &g, &bounds) <= config.tol_grad {
            early = Some(Termination::Converged);
        } else {
            let had_memory = !model.is_empty();
            let f = |p: &[f64]| outer.goal(p, &tugboat);
            match lbfgs_step(&f, &x, fx, &g, &bounds, &mut model, &lcfg) {
                Some(step) => {
                    if had_memory && model.is_empty() {
                        reset = true;
                    }
                    let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let g_new = outer.gradient(&step.x, step.f, &tugboat);
                    let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                    if !model.update(s.clone(), y) {
                        model.reset_memory();
                        reset = true;
                    }
                    x = step.x;
                    fx = step.f;
                    g = g_new;
                    if s.iter().all(|v| v.abs() <= config.tol_x) {
                        early = Some(Termination::SmallStep);
                    }
                }
                None => early = Some(Termination::LineSearchFailed),
            }
        }

        iteration += 1;
        if fx < best.1 - 1e-12 * best.1.abs().max(1e-300) {
            best = (x.clone(), fx, tugboat);
            since_improvement = 0;
        } else {
            since_improvement += 1;
        }
        let rec = outer.record(iteration, &x, &tugboat, best.1, (restarted, updated, reset))?;
        observer(&rec)?;
        log.records.push(rec);

        let stalled = since_improvement >= config.restart.patience;
        if let Some(reason) = early.or(if stalled { Some(Termination::SmallStep) } else { None }) {
            if fx < config.tol_goal {
                status = Termination::GoalReached;
                break;
            }
            if restarts < config.restart.max_restarts {
                pending_restart = true;
            } else {
                status = reason;
                break;
            }
        }
    }

    let best_values = outer.values(&best.0)?;
    let best_eval = problem.evaluate(&best_values, &best.2)?;
    Ok(CodesignResult {
        log,
        best_parameters: cv.names().iter().cloned().zip(best_values).collect(),
        best: best_eval,
        tugboat: best.2,
        status,
        restarts,
        evaluations: outer.evaluations.load(std::sync::atomic::Ordering::Relaxed),
        iterations: iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entangler::{gates, weyl_from_b, WeylPoint};
    use crate::hilbert::random_unitary;
    use std::f64::consts::PI;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    fn rosenbrock_grad(x: &[f64]) -> Vec<f64> {
        vec![
            -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
            200.0 * (x[1] - x[0] * x[0]),
        ]
    }

    #[test]
    fn fd_matches_analytic_gradient() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1].powi(3) + x[2];
        let x = [0.3, -1.2, 2.0];
        let bounds = vec![(-10.0, 10.0); 3];
        let fd = fd_gradient(&f, &x, f(&x), &bounds, 1e-6);
        let exact = [6.0 * x[0] - 2.0 * x[1], -2.0 * x[0] + 1.5 * x[1] * x[1], 1.0];
        for i in 0..3 {
            assert!((fd.grad[i] - exact[i]).abs() < 1e-6 * exact[i].abs().max(1.0));
            assert!(!fd.one_sided[i] && !fd.flagged[i]);
        }
        // boundary coordinate uses a one-sided difference
        let xb = [10.0, -1.2, 2.0];
        let fdb = fd_gradient(&f, &xb, f(&xb), &bounds, 1e-6);
        assert!(fdb.one_sided[0] && !fdb.one_sided[1]);
        assert!((fdb.grad[0] - (60.0 + 2.4)).abs() < 1e-4);
        // non-finite probe is flagged and falls back to the other side
        let g = |x: &[f64]| if x[0] > 0.3 { f64::NAN } else { x[0] * x[0] };
        let fdn = fd_gradient(&g, &[0.3], 0.09, &[(-1.0, 1.0)], 1e-6);
        assert!(fdn.flagged[0] && fdn.one_sided[0]);
        assert!((fdn.grad[0] - 0.6).abs() < 1e-5);
    }

    #[test]
    fn fd_is_linear_in_the_objective() {
        let f1 = |x: &[f64]| (x[0] * 1.3).sin() + x[1] * x[1];
        let f2 = |x: &[f64]| (x[0] - x[1]).exp();
        let sum = |x: &[f64]| f1(x) + f2(x);
        let x = [0.4, 0.2];
        let b = vec![(-5.0, 5.0); 2];
        let g1 = fd_gradient(&f1, &x, f1(&x), &b, 1e-6).grad;
        let g2 = fd_gradient(&f2, &x, f2(&x), &b, 1e-6).grad;
        let gs = fd_gradient(&sum, &x, sum(&x), &b, 1e-6).grad;
        for i in 0..2 {
            assert!((gs[i] - g1[i] - g2[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn rosenbrock_converges() {
        let bounds = vec![(-5.0, 5.0); 2];
        let cfg = LbfgsConfig {
            max_iterations: 500,
            ..LbfgsConfig::default()
        };
        let out = lbfgs_minimize(rosenbrock, rosenbrock_grad, &[-1.2, 1.0], &bounds, &cfg).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6, "{out:?}");
        for w in out.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn quadratic_bowl_finishes_quickly() {
        let diag = [1.0, 4.0, 9.0, 0.5, 2.5, 7.0];
        let center = [0.3, -0.2, 0.1, 1.0, -1.0, 0.5];
        // rotate the bowl so the problem is not separable
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q: Vec<Vec<f64>> = {
            let m = nalgebra::DMatrix::<f64>::from_fn(6, 6, |_, _| rng.sample(StandardNormal));
            let qr = m.qr().q();
            (0..6).map(|r| (0..6).map(|c| qr[(r, c)]).collect()).collect()
        };
        let hess: Vec<Vec<f64>> = (0..6)
            .map(|i| (0..6).map(|j| (0..6).map(|k| q[i][k] * diag[k] * q[j][k]).sum()).collect())
            .collect();
        let f = |x: &[f64]| {
            let d: Vec<f64> = x.iter().zip(&center).map(|(a, b)| a - b).collect();
            0.5 * (0..6).map(|i| (0..6).map(|j| d[i] * hess[i][j] * d[j]).sum::<f64>()).sum::<f64>()
        };
        let grad = |x: &[f64]| {
            let d: Vec<f64> = x.iter().zip(&center).map(|(a, b)| a - b).collect();
            (0..6).map(|i| (0..6).map(|j| hess[i][j] * d[j]).sum()).collect::<Vec<f64>>()
        };
        let bounds = vec![(-10.0, 10.0); 6];
        let cfg = LbfgsConfig {
            tol_grad: 1e-8,
            ..LbfgsConfig::default()
        };
        let out = lbfgs_minimize(f, grad, &[0.0; 6], &bounds, &cfg).unwrap();
        assert_eq!(out.status, Termination::Converged);
        assert!(out.iterations <= 6 + 2, "took {} iterations", out.iterations);
        for i in 0..6 {
            assert!((out.x[i] - center[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn bound_constrained_minimum_is_flagged() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + (x[1] + 0.5).powi(2);
        let grad = |x: &[f64]| vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 0.5)];
        let bounds = vec![(-1.0, 1.0), (-1.0, 1.0)];
        let out = lbfgs_minimize(f, grad, &[0.0, 0.0], &bounds, &LbfgsConfig::default()).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-12);
        assert!((out.x[1] + 0.5).abs() < 1e-7);
        assert_eq!(out.active, vec![true, false]);
        assert!(lbfgs_minimize(f, grad, &[2.0, 0.0], &bounds, &LbfgsConfig::default()).is_err());
    }

    #[test]
    fn reset_clears_memory() {
        let mut m = Lbfgs::new(3);
        assert!(m.update(vec![1.0, 0.0], vec![2.0, 0.0]));
        assert!(!m.update(vec![1.0, 0.0], vec![-2.0, 0.0]));
        assert_eq!(m.len(), 1);
        m.reset_memory();
        assert!(m.is_empty());
        let d = m.direction(&[0.0, 0.0], &[1.0, -2.0], &[(-1.0, 1.0), (-1.0, 1.0)]);
        assert_eq!(d, vec![-1.0, 2.0]);
    }

    #[test]
    fn inner_min_recovers_synthetic_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = WeylMap::Rescaled;
        let bounds = map.bounds();
        for _ in 0..5 {
            let mut p = TugboatParams::new([
                rng.random_range(bounds[0].0 + 0.05..bounds[0].1 - 0.05),
                rng.random_range(bounds[1].0 + 0.05..bounds[1].1 - 0.05),
                rng.random_range(0.1..0.9),
            ]);
            for a in p.local_angles.iter_mut() {
                *a = rng.random_range(-2.0..2.0);
            }
            let u = tugboat_gate(&p, map).unwrap();
            let start = TugboatParams::new([3.0 * PI / 8.0, PI / 8.0, 0.2]);
            let r = inner_tugboat_min(&u, &start, map, &InnerConfig::default()).unwrap();
            assert!(r.eps < 1e-8, "{}", r.eps);
            assert!(r.eps <= r.start_eps);
        }
    }

    #[test]
    fn inner_min_cnot_lands_on_boundary() {
        let map = WeylMap::Rescaled;
        let start = TugboatParams::new([3.0 * PI / 8.0, PI / 8.0, 0.2]);
        let r = inner_tugboat_min(&gates::cnot(), &start, map, &InnerConfig::default()).unwrap();
        assert!(r.eps < 1e-6);
        let c = weyl_from_b(r.params.volume, map).unwrap();
        let w = weyl_coordinates(&tugboat_gate(&r.params, map).unwrap()).unwrap();
        assert!(w.distance(&WeylPoint::CNOT) < 1e-3, "{c:?} {w:?}");
    }

    #[test]
    fn inner_min_identity_matches_grid_oracle() {
        let map = WeylMap::Rescaled;
        let start = TugboatParams::new([3.0 * PI / 8.0, PI / 8.0, 0.2]);
        let r = inner_tugboat_min(&ComplexMatrix::identity(4), &start, map, &InnerConfig::default()).unwrap();
        // |Tr A(c)| / 4 = |prod cos(c_k/2) + i prod sin(c_k/2)|; best over the volume
        let n = 60;
        let b = map.bounds();
        let mut best = 0.0f64;
        for i in 0..=n {
            for j in 0..=n {
                for k in 0..=n {
                    let v = [
                        b[0].0 + (b[0].1 - b[0].0) * i as f64 / n as f64,
                        b[1].0 + (b[1].1 - b[1].0) * j as f64 / n as f64,
                        b[2].0 + (b[2].1 - b[2].0) * k as f64 / n as f64,
                    ];
                    let c = weyl_from_b(v, map).unwrap();
                    let re = (c.c1 / 2.0).cos() * (c.c2 / 2.0).cos() * (c.c3 / 2.0).cos();
                    let im = (c.c1 / 2.0).sin() * (c.c2 / 2.0).sin() * (c.c3 / 2.0).sin();
                    best = best.max(re * re + im * im);
                }
            }
        }
        assert!((r.eps - (1.0 - best)).abs() < 1e-3, "{} vs {}", r.eps, 1.0 - best);
    }

    #[test]
    fn inner_min_never_worsens() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let u = random_unitary(4, &mut rng).scale_real(0.97);
            let start = initial_tugboat([3.0 * PI / 8.0, PI / 8.0, 0.2], &mut rng);
            let cfg = InnerConfig {
                budget: 300,
                ..InnerConfig::default()
            };
            let r = inner_tugboat_min(&u, &start, WeylMap::Rescaled, &cfg).unwrap();
            assert!(r.eps <= r.start_eps);
            // leaky gate: fidelity can never exceed 0.97^2
            assert!(r.eps >= 1.0 - 0.97f64.powi(2) - 1e-12);
        }
    }

    #[test]
    fn csv_and_jsonl_formats() {
        let rec = IterationRecord {
            iteration: 3,
            eps_single: Some(0.01),
            eps_entangler: None,
            leakage: 0.0,
            goal: 0.01,
            best_goal: 0.01,
            chi: 0.1,
            parameters: BTreeMap::from([("device.g".to_string(), 0.3)]),
            tugboat: TugboatParams::new([1.0, 0.2, 0.1]),
            weyl: Some([0.1, 0.0, 0.0]),
            restart: true,
            tugboat_updated: false,
            memory_reset: false,
            evaluations: 10,
        };
        let log = TrajectoryLog { records: vec![rec.clone()] };
        let csv = log.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), 10);
        assert!(lines[1].ends_with(",1"));
        let back: IterationRecord = serde_json::from_str(log.to_jsonl().trim()).unwrap();
        assert_eq!(back, rec);
    }
}
