//! Hyperparameter selection: the EM-style LOO loop for EP, evidence
//! maximization, the least-squares LOO baseline and the two-step bias tuning.

use crate::criteria::{self, CriterionKind};
use crate::ep::{
    cavity_from_marginals, ep_fit, ep_fit_from, evidence_with, predict, Cavity, EpOptions, EpState, Prediction,
    SiteParams, SiteSystem,
};
use crate::error::{Error, Result};
use crate::evaluation::{confusion, true_fmeasure};
use crate::kernel::{kernel_grads, kernel_matrix, Hyperparams};
use crate::loo::{cavity_derivatives_with, loo_predictive, predictive_jacobian, LooPredictive};
use crate::ls_cv::{ls_loo, ls_loo_derivatives, ls_predict, ridge_grad};
use crate::parallel::Parallelism;
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    EpMl,
    EpCvNlp,
    EpCvFm,
    EpCvWer,
    EpCvAuc,
    LsCvNlp,
    NlpFmBias,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::EpMl,
        Method::EpCvNlp,
        Method::EpCvFm,
        Method::EpCvWer,
        Method::EpCvAuc,
        Method::LsCvNlp,
        Method::NlpFmBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::EpMl => "EP_ML",
            Method::EpCvNlp => "EP_CV_NLP",
            Method::EpCvFm => "EP_CV_FM",
            Method::EpCvWer => "EP_CV_WER",
            Method::EpCvAuc => "EP_CV_AUC",
            Method::LsCvNlp => "LS_CV_NLP",
            Method::NlpFmBias => "NLP_FM_BIAS",
        }
    }

    /// Criterion optimized by the EP LOO methods (the final stage for the
    /// two-step method).
    pub fn criterion(self) -> Option<CriterionKind> {
        match self {
            Method::EpCvNlp | Method::LsCvNlp => Some(CriterionKind::Nlp),
            Method::EpCvFm | Method::NlpFmBias => Some(CriterionKind::SmoothedF),
            Method::EpCvWer => Some(CriterionKind::SmoothedWer),
            Method::EpCvAuc => Some(CriterionKind::SmoothedAuc),
            Method::EpMl => None,
        }
    }

    pub fn uses_ridge(self) -> bool {
        self == Method::LsCvNlp
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
            .collect();
        let key = key.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_");
        match key.as_str() {
            "EP_ML" | "ML" => Ok(Method::EpMl),
            "EP_CV_NLP" | "NLP" => Ok(Method::EpCvNlp),
            "EP_CV_FM" | "EP_CV_F" | "FM" => Ok(Method::EpCvFm),
            "EP_CV_WER" | "WER" => Ok(Method::EpCvWer),
            "EP_CV_AUC" | "AUC" => Ok(Method::EpCvAuc),
            "LS_CV_NLP" | "LS_CV" | "LS" => Ok(Method::LsCvNlp),
            "NLP_FM_BIAS" | "TWO_STEP" => Ok(Method::NlpFmBias),
            _ => Err(Error::Input(format!("unknown method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOptions {
    pub ep: EpOptions,
    /// F-measure weight ζ.
    pub zeta: f64,
    /// WER cost ratio τ.
    pub tau: f64,
    /// Relative change of the objective between outer iterations that
    /// counts as converged.
    pub obj_tol: f64,
    pub max_outer: usize,
    pub grad_tol: f64,
    pub armijo_c1: f64,
    pub shrink: f64,
    pub max_trials: usize,
    /// Smallest step length (in parameter norm) tried before giving up.
    pub min_step: f64,
    /// Length of the first M-step, in parameter norm.
    pub initial_step: f64,
    /// Cap on the M-step length, in parameter norm.
    pub max_step: f64,
    /// Times an M-step is halved when the refitted objective got worse.
    pub refit_halvings: usize,
    /// Central-difference step for the evidence gradient.
    pub fd_step: f64,
    /// Upper bound λ ≤ ridge_cap · β₀ for the least-squares baseline.
    pub ridge_cap: f64,
    pub max_bfgs_iters: usize,
    /// `false` entries freeze the matching coordinate of the flat parameter
    /// vector.
    pub mask: Option<Vec<bool>>,
    pub parallelism: Parallelism,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            ep: EpOptions::default(),
            zeta: 0.5,
            tau: 1.0,
            obj_tol: 1e-5,
            max_outer: 50,
            grad_tol: 1e-4,
            armijo_c1: 1e-4,
            shrink: 0.5,
            max_trials: 20,
            min_step: 1e-8,
            initial_step: 0.5,
            max_step: 2.0,
            refit_halvings: 4,
            fd_step: 1e-4,
            ridge_cap: 0.1,
            max_bfgs_iters: 200,
            mask: None,
            parallelism: Parallelism::available(),
        }
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    /// 1 for single-stage methods; 2 marks the bias-only stage of the
    /// two-step method.
    pub stage: usize,
    pub theta: Vec<f64>,
    /// Criterion value (log evidence for EP_ML) at the start of the
    /// iteration, sites fitted at `theta`.
    pub objective: f64,
    pub grad_norm: f64,
    /// Smoothed counterpart of `true_loo_metric`: the criterion itself for
    /// F/WER/AUC, the smoothed F-measure otherwise.
    pub smoothed_metric: f64,
    /// Hard-threshold LOO metric: F-measure, WER or AUC.
    pub true_loo_metric: f64,
    pub ep_sweeps: usize,
    /// Objective at the start and at the accepted point of the line search,
    /// sites frozen. One entry when no step was taken.
    pub line_search: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptTrace {
    pub records: Vec<TraceRecord>,
}

impl OptTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub method: Method,
    pub best_theta: Hyperparams,
    /// Objective at `best_theta` in its natural sign.
    pub final_value: f64,
    pub trace: OptTrace,
    pub converged: bool,
    /// EP fit at `best_theta`; `None` for the least-squares baseline.
    pub ep_state: Option<EpState>,
}

impl SelectionResult {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

/// Value and gradient of an objective at θ with the sites held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEval {
    pub value: f64,
    /// Over the full flat parameter vector; empty when not requested.
    pub gradient: Vec<f64>,
    pub smoothed_metric: f64,
    pub true_loo_metric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Objective {
    Criterion(CriterionKind),
    Evidence,
}

impl Objective {
    fn maximize(self) -> bool {
        match self {
            Objective::Criterion(kind) => kind.maximize(),
            Objective::Evidence => true,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_data(x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::Input(format!("{} rows for {} labels", x.nrows(), y.len())));
    }
    Ok(())
}

fn free_mask(opts: &SelectionOptions, len: usize) -> Result<Vec<bool>> {
    match &opts.mask {
        None => Ok(vec![true; len]),
        Some(m) if m.len() == len => Ok(m.clone()),
        Some(m) => Err(Error::Input(format!("mask has {} entries for {} parameters", m.len(), len))),
    }
}

/// Smoothed and hard LOO metrics reported in the trace.
fn loo_metrics(objective: Objective, value: f64, loo: &LooPredictive, y: &[f64], opts: &SelectionOptions) -> (f64, f64) {
    let hard = confusion(&loo.prob_pos, y, 0.5);
    match objective {
        Objective::Criterion(kind @ (CriterionKind::SmoothedWer | CriterionKind::SmoothedAuc)) => {
            let n_pos = y.iter().filter(|v| **v > 0.0).count() as f64;
            let n_neg = y.len() as f64 - n_pos;
            let metric = hard.map_or(f64::NAN, |cc| {
                let tp = cc.a as f64 / n_pos;
                let fp = cc.c as f64 / n_neg;
                if kind == CriterionKind::SmoothedWer {
                    (cc.b as f64 + opts.tau * cc.c as f64) / (n_pos + opts.tau * n_neg)
                } else {
                    0.5 * (1.0 + tp - fp)
                }
            });
            (value, metric)
        }
        _ => {
            let smoothed = match objective {
                Objective::Criterion(CriterionKind::SmoothedF) => value,
                _ => criteria::smoothed_fmeasure(loo, y, opts.zeta).map_or(f64::NAN, |v| v.value),
            };
            let hard_f = hard.ok().and_then(|cc| true_fmeasure(&cc, opts.zeta).ok()).unwrap_or(f64::NAN);
            (smoothed, hard_f)
        }
    }
}

struct EpProblem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    template: Hyperparams,
    objective: Objective,
    mask: Vec<bool>,
    opts: &'a SelectionOptions,
}

impl EpProblem<'_> {
    fn hyper(&self, theta: &[f64]) -> Result<Hyperparams> {
        self.template.with_values(theta)
    }

    fn fit(&self, theta: &[f64], warm: Option<&SiteParams>) -> Result<EpState> {
        let h = self.hyper(theta)?;
        let k = kernel_matrix(self.x, &h)?;
        match warm {
            Some(sites) => ep_fit_from(&k, self.y, h.bias, sites.clone(), &self.opts.ep)
                .or_else(|_| ep_fit(&k, self.y, h.bias, &self.opts.ep)),
            None => ep_fit(&k, self.y, h.bias, &self.opts.ep),
        }
    }

    fn eval(&self, theta: &[f64], sites: &SiteParams, with_grad: bool) -> Result<FrozenEval> {
        let h = self.hyper(theta)?;
        let k = kernel_matrix(self.x, &h)?;
        let kj = k.jittered();
        let system = SiteSystem::new(&kj, sites)?;
        let (mean, var) = system.marginals(&kj, sites);
        let cavity = cavity_from_marginals(&mean, &var, sites)?;
        let mut loo = loo_predictive(&cavity, self.y, h.bias)?;
        let (value, gradient) = match self.objective {
            Objective::Criterion(kind) => {
                if with_grad {
                    let dk = kernel_grads(self.x, &h, &k);
                    let derivs =
                        cavity_derivatives_with(&system, &kj, &dk, sites, &mean, &var, self.opts.parallelism)?;
                    let (jl, jp) = predictive_jacobian(&cavity, &derivs, self.y, h.bias, h.bias_index())?;
                    loo = loo.with_jacobian(jl, jp)?;
                }
                let cv = criteria::evaluate(kind, &loo, self.y, self.opts.zeta, self.opts.tau)?;
                (cv.value, cv.gradient)
            }
            Objective::Evidence => {
                let value = evidence_with(&system, sites, &mean, &cavity, self.y, h.bias)?;
                let gradient = if with_grad { self.evidence_gradient(theta, sites)? } else { Vec::new() };
                (value, gradient)
            }
        };
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite objective".into()));
        }
        let (smoothed_metric, true_loo_metric) = loo_metrics(self.objective, value, &loo, self.y, self.opts);
        Ok(FrozenEval { value, gradient, smoothed_metric, true_loo_metric })
    }

    /// Central differences of the frozen-site evidence. At an EP fixed point
    /// the site dependence drops out of the total derivative, so this equals
    /// the gradient of the fitted evidence.
    fn evidence_gradient(&self, theta: &[f64], sites: &SiteParams) -> Result<Vec<f64>> {
        let step = self.opts.fd_step;
        let parts = self.opts.parallelism.map_range(theta.len(), |j| -> Result<f64> {
            if !self.mask[j] {
                return Ok(0.0);
            }
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[j] += step;
            minus[j] -= step;
            let fp = self.eval(&plus, sites, false)?.value;
            let fm = self.eval(&minus, sites, false)?.value;
            Ok((fp - fm) / (2.0 * step))
        });
        parts.into_iter().collect()
    }
}

struct LineSearchResult {
    theta: Vec<f64>,
    value: f64,
    step: f64,
}

/// Backtracking search along `dir` for the sufficient-decrease condition on
/// the minimized objective `eval`.
fn line_search(
    eval: impl Fn(&[f64]) -> Result<f64>,
    theta: &[f64],
    f0: f64,
    dir: &[f64],
    slope: f64,
    t0: f64,
    opts: &SelectionOptions,
) -> Option<LineSearchResult> {
    let dir_norm = norm(dir);
    let mut t = t0;
    let mut trials = 0;
    loop {
        trials += 1;
        let cand: Vec<f64> = theta.iter().zip(dir).map(|(a, d)| a + t * d).collect();
        if let Ok(v) = eval(&cand) {
            if v.is_finite() && v <= f0 + opts.armijo_c1 * t * slope {
                return Some(LineSearchResult { theta: cand, value: v, step: t });
            }
        }
        if trials >= opts.max_trials && t * dir_norm < opts.min_step {
            return None;
        }
        t *= opts.shrink;
        if t * dir_norm < opts.min_step * opts.shrink {
            return None;
        }
    }
}

struct EmOutcome {
    theta: Vec<f64>,
    state: EpState,
    value: f64,
    records: Vec<TraceRecord>,
    converged: bool,
}

fn em_loop(
    problem: &EpProblem,
    init: Vec<f64>,
    stage: usize,
    first_iter: usize,
    refit: bool,
    start: Option<EpState>,
) -> Result<EmOutcome> {
    let opts = problem.opts;
    let sign = if problem.objective.maximize() { -1.0 } else { 1.0 };
    let mut theta = init;
    let mut state = match start {
        Some(st) => st,
        None => problem.fit(&theta, None)?,
    };
    let mut cur = problem.eval(&theta, &state.sites, true)?;
    let mut step_norm = opts.initial_step;
    let mut prev: Option<f64> = None;
    let mut records = Vec::new();
    let mut converged = false;

    for iter in 0..opts.max_outer {
        let f0 = sign * cur.value;
        let g: Vec<f64> = cur
            .gradient
            .iter()
            .zip(&problem.mask)
            .map(|(v, free)| if *free { sign * v } else { 0.0 })
            .collect();
        let gnorm = norm(&g);
        let mut rec = TraceRecord {
            iter: first_iter + iter,
            stage,
            theta: theta.clone(),
            objective: cur.value,
            grad_norm: gnorm,
            smoothed_metric: cur.smoothed_metric,
            true_loo_metric: cur.true_loo_metric,
            ep_sweeps: state.sweeps_used,
            line_search: vec![cur.value],
        };
        if gnorm < opts.grad_tol {
            records.push(rec);
            converged = true;
            break;
        }
        if let Some(p) = prev {
            if (f0 - p).abs() < opts.obj_tol * p.abs().max(1e-3) {
                records.push(rec);
                converged = true;
                break;
            }
        }
        // M-step: one line search with the sites frozen
        let dir: Vec<f64> = g.iter().map(|v| -v).collect();
        let sites = state.sites.clone();
        let frozen = |th: &[f64]| problem.eval(th, &sites, false).map(|e| sign * e.value);
        let Some(ls) = line_search(frozen, &theta, f0, &dir, -gnorm * gnorm, step_norm / gnorm, opts) else {
            records.push(rec);
            break;
        };
        if !refit {
            rec.line_search.push(sign * ls.value);
            records.push(rec);
            step_norm = (2.0 * ls.step * gnorm).min(opts.max_step);
            prev = Some(f0);
            cur = problem.eval(&ls.theta, &state.sites, true)?;
            theta = ls.theta;
            continue;
        }
        // E-step at the new point; shorten the step if the refit undoes the gain
        let mut t = ls.step;
        let mut accepted = None;
        for attempt in 0..=opts.refit_halvings {
            let cand: Vec<f64> = if attempt == 0 {
                ls.theta.clone()
            } else {
                theta.iter().zip(&dir).map(|(a, d)| a + t * d).collect()
            };
            if let Ok(st) = problem.fit(&cand, Some(&sites)) {
                if let Ok(e) = problem.eval(&cand, &st.sites, true) {
                    if sign * e.value <= f0 + 1e-12 * f0.abs().max(1.0) {
                        accepted = Some((cand, st, e, attempt));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((cand, st, e, attempt)) = accepted else {
            records.push(rec);
            break;
        };
        let frozen_end = if attempt == 0 { ls.value } else { frozen(&cand).unwrap_or(f64::NAN) };
        rec.line_search.push(sign * frozen_end);
        records.push(rec);
        step_norm = (2.0 * t * gnorm).min(opts.max_step);
        prev = Some(f0);
        theta = cand;
        state = st;
        cur = e;
    }
    Ok(EmOutcome { theta, state, value: cur.value, records, converged })
}

fn ep_template(init: &Hyperparams) -> Hyperparams {
    Hyperparams { log_ridge: None, ..init.clone() }
}

fn run_em(
    method: Method,
    objective: Objective,
    x: &DMatrix<f64>,
    y: &[f64],
    init: &Hyperparams,
    opts: &SelectionOptions,
) -> Result<SelectionResult> {
    check_data(x, y)?;
    let template = ep_template(init);
    template.check_dim(x.ncols())?;
    let mask = free_mask(opts, template.len())?;
    let problem = EpProblem { x, y, template: template.clone(), objective, mask, opts };
    let out = em_loop(&problem, template.to_vec(), 1, 0, true, None)?;
    Ok(SelectionResult {
        method,
        best_theta: template.with_values(&out.theta)?,
        final_value: out.value,
        trace: OptTrace { records: out.records },
        converged: out.converged,
        ep_state: Some(out.state),
    })
}

/// EM-style LOO optimization of `kind` with EP site refits.
pub fn ep_cv_optimize(
    x: &DMatrix<f64>,
    y: &[f64],
    kind: CriterionKind,
    init: &Hyperparams,
    opts: &SelectionOptions,
) -> Result<SelectionResult> {
    let method = match kind {
        CriterionKind::Nlp => Method::EpCvNlp,
        CriterionKind::SmoothedF => Method::EpCvFm,
        CriterionKind::SmoothedWer => Method::EpCvWer,
        CriterionKind::SmoothedAuc => Method::EpCvAuc,
    };
    run_em(method, Objective::Criterion(kind), x, y, init, opts)
}

/// Maximize the EP evidence with the same refit/line-search skeleton.
pub fn ml_optimize(x: &DMatrix<f64>, y: &[f64], init: &Hyperparams, opts: &SelectionOptions) -> Result<SelectionResult> {
    run_em(Method::EpMl, Objective::Evidence, x, y, init, opts)
}

/// Full NLP selection followed by F-measure tuning of the bias alone.
pub fn two_step_bias(x: &DMatrix<f64>, y: &[f64], init: &Hyperparams, opts: &SelectionOptions) -> Result<SelectionResult> {
    check_data(x, y)?;
    let first = ep_cv_optimize(x, y, CriterionKind::Nlp, init, opts)?;
    let template = first.best_theta.clone();
    let mut mask = vec![false; template.len()];
    mask[template.bias_index()] = true;
    let problem = EpProblem {
        x,
        y,
        template: template.clone(),
        objective: Objective::Criterion(CriterionKind::SmoothedF),
        mask,
        opts,
    };
    // the step-1 sites stay fixed: refitting at a new bias shifts the sites
    // back and cancels the move
    let second = em_loop(&problem, template.to_vec(), 2, first.trace.len(), false, first.ep_state)?;
    let mut records = first.trace.records;
    records.extend(second.records);
    Ok(SelectionResult {
        method: Method::NlpFmBias,
        best_theta: template.with_values(&second.theta)?,
        final_value: second.value,
        trace: OptTrace { records },
        converged: second.converged,
        ep_state: Some(second.state),
    })
}

/// Value and gradient of a LOO criterion with the sites fixed, the quantity
/// each M-step line search works with.
pub fn frozen_criterion(
    x: &DMatrix<f64>,
    y: &[f64],
    h: &Hyperparams,
    sites: &SiteParams,
    kind: CriterionKind,
    opts: &SelectionOptions,
) -> Result<FrozenEval> {
    let template = ep_template(h);
    let problem = EpProblem {
        x,
        y,
        mask: vec![true; template.len()],
        template,
        objective: Objective::Criterion(kind),
        opts,
    };
    problem.eval(&problem.template.to_vec(), sites, true)
}

/// The frozen-site evidence and its finite-difference gradient.
pub fn frozen_evidence(
    x: &DMatrix<f64>,
    y: &[f64],
    h: &Hyperparams,
    sites: &SiteParams,
    opts: &SelectionOptions,
) -> Result<FrozenEval> {
    let template = ep_template(h);
    let problem = EpProblem {
        x,
        y,
        mask: vec![true; template.len()],
        template,
        objective: Objective::Evidence,
        opts,
    };
    problem.eval(&problem.template.to_vec(), sites, true)
}

struct LsProblem<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    template: Hyperparams,
    mask: Vec<bool>,
    opts: &'a SelectionOptions,
}

impl LsProblem<'_> {
    fn eval(&self, theta: &[f64], with_grad: bool) -> Result<FrozenEval> {
        let h = self.template.with_values(theta)?;
        let ridge = h.ridge().ok_or_else(|| Error::Input("missing ridge".into()))?;
        let k = kernel_matrix(self.x, &h)?;
        let state = ls_loo(&k, self.y, ridge)?;
        let cavity = Cavity { mean: state.loo_mean.clone(), variance: state.loo_var.clone() };
        let mut loo = loo_predictive(&cavity, self.y, h.bias)?;
        if with_grad {
            let mut dk = kernel_grads(self.x, &h, &k);
            dk.push(ridge_grad(k.n(), ridge));
            let derivs = ls_loo_derivatives(&dk, &state, self.opts.parallelism)?;
            let (jl, jp) = predictive_jacobian(&cavity, &derivs, self.y, h.bias, h.bias_index())?;
            loo = loo.with_jacobian(jl, jp)?;
        }
        let cv = criteria::nlp(&loo)?;
        let (smoothed_metric, true_loo_metric) =
            loo_metrics(Objective::Criterion(CriterionKind::Nlp), cv.value, &loo, self.y, self.opts);
        Ok(FrozenEval { value: cv.value, gradient: cv.gradient, smoothed_metric, true_loo_metric })
    }

    /// Indices (ridge, signal variance) of the constraint
    /// log λ − log β₀ ≤ log(ridge_cap).
    fn constraint(&self) -> (usize, usize, f64) {
        (self.template.ridge_index().unwrap_or(0), 0, self.opts.ridge_cap.ln())
    }

    fn project(&self, theta: &mut [f64]) {
        let (r, s, cap) = self.constraint();
        let excess = theta[r] - theta[s] - cap;
        if excess > 0.0 {
            match (self.mask[r], self.mask[s]) {
                (true, true) => {
                    theta[r] -= 0.5 * excess;
                    theta[s] += 0.5 * excess;
                }
                (true, false) => theta[r] -= excess,
                (false, true) => theta[s] += excess,
                (false, false) => {}
            }
        }
    }

    /// Gradient with the outward normal component removed on the boundary.
    fn projected_grad(&self, theta: &[f64], g: &[f64]) -> Vec<f64> {
        let (r, s, cap) = self.constraint();
        let mut out: Vec<f64> = g.iter().zip(&self.mask).map(|(v, f)| if *f { *v } else { 0.0 }).collect();
        let active = theta[r] - theta[s] - cap > -1e-10;
        let mut normal = vec![0.0; g.len()];
        if self.mask[r] {
            normal[r] = 1.0;
        }
        if self.mask[s] {
            normal[s] = -1.0;
        }
        let nn: f64 = normal.iter().map(|v| v * v).sum();
        let along: f64 = out.iter().zip(&normal).map(|(a, b)| a * b).sum();
        if active && nn > 0.0 && along < 0.0 {
            for (o, nv) in out.iter_mut().zip(&normal) {
                *o -= along / nn * nv;
            }
        }
        out
    }
}

/// Least-squares LOO NLP and its gradient over the full parameter vector.
pub fn ls_criterion(x: &DMatrix<f64>, y: &[f64], h: &Hyperparams, opts: &SelectionOptions) -> Result<FrozenEval> {
    if h.log_ridge.is_none() {
        return Err(Error::Input("least-squares criterion needs a ridge parameter".into()));
    }
    h.check_dim(x.ncols())?;
    let problem = LsProblem { x, y, template: h.clone(), mask: vec![true; h.len()], opts };
    problem.eval(&h.to_vec(), true)
}

/// Minimize the least-squares LOO NLP with projected BFGS.
pub fn ls_cv_optimize(x: &DMatrix<f64>, y: &[f64], init: &Hyperparams, opts: &SelectionOptions) -> Result<SelectionResult> {
    check_data(x, y)?;
    let mut template = init.clone();
    if template.log_ridge.is_none() {
        template.log_ridge = Some(template.log_signal_variance + 0.01f64.ln());
    }
    template.check_dim(x.ncols())?;
    let mask = free_mask(opts, template.len())?;
    let problem = LsProblem { x, y, template: template.clone(), mask, opts };
    let p = template.len();
    let mut theta = template.to_vec();
    problem.project(&mut theta);
    let mut cur = problem.eval(&theta, true)?;
    let mut hinv = DMatrix::<f64>::identity(p, p);
    let mut prev: Option<f64> = None;
    let mut records = Vec::new();
    let mut converged = false;

    for iter in 0..opts.max_bfgs_iters {
        let g: Vec<f64> = cur.gradient.iter().zip(&problem.mask).map(|(v, f)| if *f { *v } else { 0.0 }).collect();
        let gp = problem.projected_grad(&theta, &g);
        let gnorm = norm(&gp);
        let mut rec = TraceRecord {
            iter,
            stage: 1,
            theta: theta.clone(),
            objective: cur.value,
            grad_norm: gnorm,
            smoothed_metric: cur.smoothed_metric,
            true_loo_metric: cur.true_loo_metric,
            ep_sweeps: 0,
            line_search: vec![cur.value],
        };
        if gnorm <= opts.grad_tol {
            records.push(rec);
            converged = true;
            break;
        }
        if let Some(pv) = prev {
            if (cur.value - pv).abs() < 1e-3 * opts.obj_tol * pv.abs().max(1e-3) {
                records.push(rec);
                break;
            }
        }
        let gv = DVector::from_column_slice(&gp);
        let mut d = -(&hinv * &gv);
        for (j, free) in problem.mask.iter().enumerate() {
            if !free {
                d[j] = 0.0;
            }
        }
        if d.dot(&gv) >= 0.0 {
            hinv = DMatrix::identity(p, p);
            d = -gv.clone();
        }
        let mut t = if iter == 0 { (1.0 / d.norm()).min(1.0) } else { 1.0 };
        let mut next = None;
        let mut trials = 0;
        while t * d.norm() >= opts.min_step * opts.shrink {
            trials += 1;
            let mut cand: Vec<f64> = theta.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            problem.project(&mut cand);
            let decrease: f64 = cand.iter().zip(&theta).zip(&g).map(|((c, a), gi)| gi * (c - a)).sum();
            if decrease < 0.0 {
                if let Ok(e) = problem.eval(&cand, true) {
                    if e.value <= cur.value + opts.armijo_c1 * decrease {
                        next = Some((cand, e));
                        break;
                    }
                }
            }
            if trials >= opts.max_trials && t * d.norm() < opts.min_step {
                break;
            }
            t *= opts.shrink;
        }
        let Some((cand, e)) = next else {
            records.push(rec);
            break;
        };
        rec.line_search.push(e.value);
        records.push(rec);
        let s = DVector::from_iterator(p, cand.iter().zip(&theta).map(|(a, b)| a - b));
        let g_new: Vec<f64> = e.gradient.iter().zip(&problem.mask).map(|(v, f)| if *f { *v } else { 0.0 }).collect();
        let yv = DVector::from_iterator(p, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-10 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let left = DMatrix::identity(p, p) - rho * &s * yv.transpose();
            hinv = &left * &hinv * left.transpose() + rho * &s * s.transpose();
        }
        prev = Some(cur.value);
        theta = cand;
        cur = e;
    }
    Ok(SelectionResult {
        method: Method::LsCvNlp,
        best_theta: template.with_values(&theta)?,
        final_value: cur.value,
        trace: OptTrace { records },
        converged,
        ep_state: None,
    })
}

/// Run `method` from `init`.
pub fn select(
    method: Method,
    x: &DMatrix<f64>,
    y: &[f64],
    init: &Hyperparams,
    opts: &SelectionOptions,
) -> Result<SelectionResult> {
    match method {
        Method::EpMl => ml_optimize(x, y, init, opts),
        Method::LsCvNlp => ls_cv_optimize(x, y, init, opts),
        Method::NlpFmBias => two_step_bias(x, y, init, opts),
        m => ep_cv_optimize(x, y, m.criterion().expect("EP LOO method"), init, opts),
    }
}

/// Test-set predictions with the selected hyperparameters.
pub fn predict_test(
    result: &SelectionResult,
    x_train: &DMatrix<f64>,
    y_train: &[f64],
    x_test: &DMatrix<f64>,
    opts: &SelectionOptions,
) -> Result<Vec<Prediction>> {
    if result.method == Method::LsCvNlp {
        return ls_predict(x_train, y_train, &result.best_theta, x_test);
    }
    match &result.ep_state {
        Some(state) => predict(x_train, state, &result.best_theta, x_test),
        None => {
            let k = kernel_matrix(x_train, &result.best_theta)?;
            let state = ep_fit(&k, y_train, result.best_theta.bias, &opts.ep)?;
            predict(x_train, &state, &result.best_theta, x_test)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::KernelMode;
    use crate::normal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clusters(seed: u64, per_class: usize, spread: f64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * per_class;
        let y: Vec<f64> = (0..n).map(|i| if i < per_class { -1.0 } else { 1.0 }).collect();
        let x = DMatrix::from_fn(n, 2, |i, j| {
            let centre = if j == 0 { 2.0 * y[i] } else { 0.0 };
            centre + spread * rng.random_range(-1.0..1.0)
        });
        (x, y)
    }

    fn noisy(seed: u64, n: usize) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = (0..n)
            .map(|i| if x[(i, 0)] + 0.5 * x[(i, 1)] + 0.8 * rng.random_range(-1.0..1.0) > 0.0 { 1.0 } else { -1.0 })
            .collect();
        (x, y)
    }

    fn sequential() -> SelectionOptions {
        SelectionOptions { parallelism: Parallelism::Sequential, ..SelectionOptions::default() }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("ep-cv-fm".parse::<Method>().unwrap(), Method::EpCvFm);
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn separable_clusters_reach_full_smoothed_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..50).map(|i| if i < 25 { -1.0 } else { 1.0 }).collect();
        let x = DMatrix::from_fn(50, 1, |i, _| 2.0 * y[i] + 0.2 * rng.random_range(-1.0..1.0));
        let init = Hyperparams::initial(1, KernelMode::Ard, false);
        let r = ep_cv_optimize(&x, &y, CriterionKind::SmoothedF, &init, &sequential()).unwrap();
        assert!(r.final_value >= 0.99, "{}", r.final_value);
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let (x, y) = noisy(1, 12);
        let init = Hyperparams::initial(2, KernelMode::Ard, false);
        let opts = SelectionOptions { grad_tol: 1e6, ..sequential() };
        let r = ep_cv_optimize(&x, &y, CriterionKind::Nlp, &init, &opts).unwrap();
        assert_eq!(r.iterations(), 1);
        assert!(r.converged);
        assert_eq!(r.best_theta, init);
    }

    #[test]
    fn line_searches_never_lose_ground() {
        let (x, y) = noisy(2, 30);
        let init = Hyperparams::initial(2, KernelMode::Ard, false);
        for kind in [CriterionKind::Nlp, CriterionKind::SmoothedF] {
            let r = ep_cv_optimize(&x, &y, kind, &init, &sequential()).unwrap();
            let sign = if kind.maximize() { 1.0 } else { -1.0 };
            for w in r.trace.records.windows(2) {
                assert!(w[1].iter > w[0].iter);
                assert!(sign * (w[1].objective - w[0].objective) >= -1e-12);
            }
            for rec in &r.trace.records {
                if let [start, end] = rec.line_search[..] {
                    assert!(sign * (end - start) >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn trace_records_reproduce_from_theta() {
        let (x, y) = noisy(4, 20);
        let init = Hyperparams::initial(2, KernelMode::Ard, false);
        let opts = SelectionOptions { max_outer: 4, ..sequential() };
        let r = ep_cv_optimize(&x, &y, CriterionKind::SmoothedF, &init, &opts).unwrap();
        for rec in &r.trace.records {
            let h = init.with_values(&rec.theta).unwrap();
            let k = kernel_matrix(&x, &h).unwrap();
            let st = ep_fit(&k, &y, h.bias, &opts.ep).unwrap();
            let e = frozen_criterion(&x, &y, &h, &st.sites, CriterionKind::SmoothedF, &opts).unwrap();
            assert!((e.value - rec.objective).abs() < 1e-6, "iter {}", rec.iter);
        }
    }

    #[test]
    fn evidence_never_drops_below_the_start() {
        let (x, y) = noisy(5, 15);
        let init = Hyperparams::initial(2, KernelMode::Ard, false);
        let opts = sequential();
        let r = ml_optimize(&x, &y, &init, &opts).unwrap();
        let k = kernel_matrix(&x, &init).unwrap();
        let start = ep_fit(&k, &y, init.bias, &opts.ep).unwrap().log_ml;
        assert!(r.final_value >= start - 1e-10);
    }

    #[test]
    fn single_point_evidence_matches_a_grid_search() {
        // bias frozen below zero: the evidence Φ(γ/√(1+β₀)) rises with β₀
        let x = DMatrix::from_row_slice(1, 1, &[0.4]);
        let y = [1.0];
        let mut init = Hyperparams::initial(1, KernelMode::Shared, false);
        init.bias = -0.5;
        let opts = SelectionOptions { mask: Some(vec![true, false, false]), ..sequential() };
        let r = ml_optimize(&x, &y, &init, &opts).unwrap();
        let evidence = |log_b0: f64| normal::log_cdf(-0.5 / (1.0 + log_b0.exp()).sqrt());
        let hi = r.best_theta.log_signal_variance.max(0.0);
        let grid_best = (0..=((hi + 3.0) * 100.0).round() as usize)
            .map(|i| evidence(-3.0 + 0.01 * i as f64))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((r.final_value - evidence(r.best_theta.log_signal_variance)).abs() < 1e-6);
        assert!(r.final_value >= grid_best - 1e-2);
        assert!(r.best_theta.log_signal_variance > 0.0);
    }

    #[test]
    fn duplicated_data_keeps_the_evidence_ranking() {
        let x = DMatrix::from_row_slice(4, 1, &[-0.5, -0.5, 0.7, 0.7]);
        let y = [-1.0, -1.0, 1.0, 1.0];
        let opts = sequential();
        let candidates: Vec<Hyperparams> = [0.0, 1.5]
            .iter()
            .map(|&lb| Hyperparams { log_signal_variance: lb, ..Hyperparams::initial(1, KernelMode::Shared, false) })
            .collect();
        // dense quadrature over the two distinct latents, each likelihood squared
        let oracle = |h: &Hyperparams| {
            let base = DMatrix::from_row_slice(2, 1, &[-0.5, 0.7]);
            let k = kernel_matrix(&base, h).unwrap();
            let l = k.matrix().clone().cholesky().unwrap().l();
            let (half, nodes) = (9.0, 801);
            let step = 2.0 * half / (nodes - 1) as f64;
            let mut z = 0.0;
            for a in 0..nodes {
                for b in 0..nodes {
                    let (za, zb) = (-half + step * a as f64, -half + step * b as f64);
                    let f1 = l[(0, 0)] * za;
                    let f2 = l[(1, 0)] * za + l[(1, 1)] * zb;
                    z += normal::pdf(za) * normal::pdf(zb) * (normal::cdf(-f1) * normal::cdf(f2)).powi(2);
                }
            }
            (z * step * step).ln()
        };
        let ep_value = |h: &Hyperparams| {
            let k = kernel_matrix(&x, h).unwrap();
            ep_fit(&k, &y, h.bias, &opts.ep).unwrap().log_ml
        };
        let (e0, e1) = (ep_value(&candidates[0]), ep_value(&candidates[1]));
        let (q0, q1) = (oracle(&candidates[0]), oracle(&candidates[1]));
        assert_eq!(e0 < e1, q0 < q1);
        assert!((q0 - q1).abs() > 1e-2);
    }

    #[test]
    fn least_squares_beats_chance_on_separable_data() {
        let (x, y) = clusters(7, 6, 0.4);
        let init = Hyperparams::initial(2, KernelMode::Ard, true);
        let r = ls_cv_optimize(&x, &y, &init, &sequential()).unwrap();
        assert!(r.final_value < 2f64.ln());
        let h = &r.best_theta;
        assert!(h.log_ridge.unwrap() - h.log_signal_variance <= 0.1f64.ln() + 1e-9);
    }

    #[test]
    fn least_squares_converged_means_small_gradient() {
        for seed in 0..3 {
            let (x, y) = noisy(10 + seed, 25);
            let init = Hyperparams::initial(2, KernelMode::Ard, true);
            let opts = sequential();
            let r = ls_cv_optimize(&x, &y, &init, &opts).unwrap();
            if r.converged {
                assert!(r.trace.records.last().unwrap().grad_norm <= opts.grad_tol);
            }
        }
    }

    #[test]
    fn least_squares_handles_duplicated_inputs_with_fixed_ridge() {
        let x = DMatrix::from_row_slice(6, 1, &[0.1, 0.1, 0.1, 0.9, 0.9, 0.9]);
        let y = [-1.0, -1.0, 1.0, 1.0, 1.0, -1.0];
        let mut init = Hyperparams::initial(1, KernelMode::Shared, true);
        init.log_ridge = Some(0.1f64.ln());
        let opts = SelectionOptions { mask: Some(vec![true, true, true, false]), ..sequential() };
        let r = ls_cv_optimize(&x, &y, &init, &opts).unwrap();
        assert!(r.final_value.is_finite());
        assert_eq!(r.best_theta.log_ridge, init.log_ridge.map(|v| v.min(r.best_theta.log_signal_variance + 0.1f64.ln())));
    }

    #[test]
    fn two_step_only_moves_the_bias() {
        let (x, y) = noisy(6, 30);
        let init = Hyperparams::initial(2, KernelMode::Ard, false);
        let opts = sequential();
        let first = ep_cv_optimize(&x, &y, CriterionKind::Nlp, &init, &opts).unwrap();
        let r = two_step_bias(&x, &y, &init, &opts).unwrap();
        assert_eq!(r.best_theta.log_signal_variance, first.best_theta.log_signal_variance);
        assert_eq!(r.best_theta.log_lengthscales, first.best_theta.log_lengthscales);
        let start = r.trace.records.iter().find(|t| t.stage == 2).unwrap();
        assert_eq!(start.theta, first.best_theta.to_vec());
        assert!(r.final_value >= start.objective - 1e-12);
    }

    #[test]
    fn runs_are_deterministic() {
        let (x, y) = noisy(8, 20);
        let init = Hyperparams::initial(2, KernelMode::Ard, false);
        let a = ep_cv_optimize(&x, &y, CriterionKind::SmoothedF, &init, &sequential()).unwrap();
        let rayon = SelectionOptions { parallelism: Parallelism::Rayon, ..SelectionOptions::default() };
        let b = ep_cv_optimize(&x, &y, CriterionKind::SmoothedF, &init, &rayon).unwrap();
        assert_eq!(a, b);
    }
}
