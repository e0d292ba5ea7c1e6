//! Limited-memory BFGS with an Armijo backtracking line search.
//!
//! The search direction comes from the standard two-loop recursion over the
//! last `memory` curvature pairs `(s, y)`; pairs with `s.y <= 0` are skipped
//! so the implicit inverse Hessian stays positive definite. The initial
//! inverse Hessian is `I` on the first iteration (with a unit-length first
//! step) and `(s.y / y.y) I` afterwards.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor applied per backtrack.
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 5,
            max_iters: 100,
            grad_tol: 1e-8,
            c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 50,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::param("L-BFGS memory must be positive"));
        }
        if !(self.c1 > 0.0 && self.c1 < 1.0) {
            return Err(Error::param("Armijo constant must lie in (0, 1)"));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::param("backtrack factor must lie in (0, 1)"));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::param("gradient tolerance must be non-negative"));
        }
        Ok(())
    }
}

/// Why the minimiser stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Gradient norm fell to `grad_tol`.
    Converged,
    /// `max_iters` accepted steps were taken.
    MaxIterations,
    /// The line search could not find sufficient decrease.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    pub value: f64,
    /// Objective at the start point followed by one entry per accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

impl LbfgsReport {
    pub fn stalled(&self) -> bool {
        self.termination == Termination::Stalled
    }
}

/// Minimises `objective`, which writes the gradient at `x` into its second
/// argument and returns the value.
pub fn lbfgs_minimize<F>(mut objective: F, x0: &[f64], config: &LbfgsConfig) -> Result<LbfgsReport>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    config.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; n];
    let mut value = objective(&x, &mut grad);
    let mut evaluations = 1;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::input("objective is not finite at the start point"));
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(config.memory);
    let mut trace = vec![value];
    let mut termination = Termination::MaxIterations;
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut iterations = 0;

    while iterations < config.max_iters {
        let grad_norm = norm(&grad);
        if grad_norm <= config.grad_tol {
            termination = Termination::Converged;
            break;
        }

        let mut direction = two_loop(&grad, &history);
        let mut slope = dot(&grad, &direction);
        if !(slope < 0.0) {
            history.clear();
            direction = grad.iter().map(|g| -g).collect();
            slope = -grad_norm * grad_norm;
        }
        let mut step = if history.is_empty() {
            (1.0 / norm(&direction)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = false;
        for _ in 0..=config.max_backtracks {
            for ((t, xi), di) in trial.iter_mut().zip(&x).zip(&direction) {
                *t = xi + step * di;
            }
            let trial_value = objective(&trial, &mut trial_grad);
            evaluations += 1;
            let finite = trial_value.is_finite() && trial_grad.iter().all(|g| g.is_finite());
            if finite && trial_value <= value + config.c1 * step * slope && trial_value < value {
                accepted = true;
                let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > f64::EPSILON * norm(&s) * norm(&y) {
                    if history.len() == config.memory {
                        history.pop_front();
                    }
                    history.push_back((s, y, 1.0 / sy));
                }
                std::mem::swap(&mut x, &mut trial);
                std::mem::swap(&mut grad, &mut trial_grad);
                value = trial_value;
                break;
            }
            step *= config.backtrack;
        }
        if !accepted {
            termination = Termination::Stalled;
            break;
        }
        iterations += 1;
        trace.push(value);
    }
    if termination == Termination::MaxIterations && norm(&grad) <= config.grad_tol {
        termination = Termination::Converged;
    }

    Ok(LbfgsReport {
        x,
        value,
        trace,
        iterations,
        evaluations,
        termination,
    })
}

/// `-H g` for the implicit inverse Hessian `H` of `history`.
fn two_loop(grad: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        axpy(-a, y, &mut q);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let scale = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= scale);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        axpy(a - b, s, &mut q);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
