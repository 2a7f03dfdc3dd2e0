//! The client-level proximal subproblem
//!
//! ```text
//! H(theta) = loss(theta) + gamma1 * phi_rho(theta) + lambda1/2 * ||theta - center||^2
//! ```
//!
//! solved by Nesterov's accelerated gradient method, plus the closed-form
//! local edge model that interpolates between a personalized model and the
//! edge model.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::math::{add_penalty_grad, penalty_unchecked, ParamVector};
use crate::models::{loss_and_grad, Batch, ModelSpec};

/// A differentiable local loss.
pub trait LocalLoss {
    fn dim(&self) -> usize;
    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;
}

/// Model loss on a fixed batch.
pub struct BatchLoss<'a> {
    pub spec: &'a ModelSpec,
    pub batch: &'a Batch,
}

impl LocalLoss for BatchLoss<'_> {
    fn dim(&self) -> usize {
        crate::models::param_count(self.spec)
    }

    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        loss_and_grad(self.spec, params, self.batch)
    }
}

/// `1/2 ||theta - target||^2`.
pub struct QuadraticLoss<'a> {
    pub target: &'a ParamVector,
}

impl LocalLoss for QuadraticLoss<'_> {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        check_dim(self.target.dim(), params.dim())?;
        let grad: Vec<f64> = params
            .as_slice()
            .iter()
            .zip(self.target.as_slice())
            .map(|(p, t)| p - t)
            .collect();
        let value = 0.5 * grad.iter().map(|g| g * g).sum::<f64>();
        Ok((value, ParamVector::from_vec_unchecked(grad)))
    }
}

/// Identically zero loss.
pub struct ZeroLoss {
    pub dim: usize,
}

impl LocalLoss for ZeroLoss {
    fn dim(&self) -> usize {
        self.dim
    }

    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        check_dim(self.dim, params.dim())?;
        Ok((0.0, ParamVector::zeros(self.dim)))
    }
}

/// Penalty and proximal weights of `H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxTerms {
    pub lambda1: f64,
    pub gamma1: f64,
    pub rho: f64,
}

pub fn objective_h(
    theta: &ParamVector,
    prox_center: &ParamVector,
    loss: &dyn LocalLoss,
    terms: ProxTerms,
) -> Result<(f64, ParamVector)> {
    check_dim(loss.dim(), theta.dim())?;
    check_dim(theta.dim(), prox_center.dim())?;
    let (mut value, mut grad) = loss.loss_and_grad(theta)?;
    let t = theta.as_slice();
    if terms.gamma1 != 0.0 {
        value += terms.gamma1 * penalty_unchecked(t, terms.rho);
        add_penalty_grad(grad.as_mut_slice(), t, terms.gamma1, terms.rho);
    }
    let mut prox = 0.0;
    for ((g, &x), &c) in grad.as_mut_slice().iter_mut().zip(t).zip(prox_center.as_slice()) {
        let diff = x - c;
        prox += diff * diff;
        *g += terms.lambda1 * diff;
    }
    value += 0.5 * terms.lambda1 * prox;
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerSolveConfig {
    /// Iteration cap `K`.
    pub max_iters: usize,
    /// Stop once `||grad H||^2 <= tolerance`.
    pub tolerance: f64,
    pub step_size: f64,
}

impl Default for InnerSolveConfig {
    fn default() -> Self {
        InnerSolveConfig {
            max_iters: 5,
            tolerance: 1e-6,
            step_size: 0.05,
        }
    }
}

impl InnerSolveConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.max_iters == 0 {
            problems.push("inner max_iters must be at least 1".to_string());
        }
        if !(self.tolerance > 0.0) {
            problems.push(format!("inner tolerance must be positive, got {}", self.tolerance));
        }
        if !(self.step_size > 0.0) {
            problems.push(format!("inner step size must be positive, got {}", self.step_size));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub theta: ParamVector,
    /// `H` at the returned point.
    pub final_value: f64,
    /// `H` at the warm start.
    pub initial_value: f64,
    pub final_grad_norm_sq: f64,
    pub iters_used: usize,
    pub converged: bool,
}

/// Nesterov AGD on `H` from `warm_start`. Returns the last iterate, either the
/// first point whose squared gradient norm is within tolerance or the iterate
/// after `max_iters` steps.
pub fn solve_personalized(
    prox_center: &ParamVector,
    loss: &dyn LocalLoss,
    terms: ProxTerms,
    cfg: &InnerSolveConfig,
    warm_start: &ParamVector,
) -> Result<SolveReport> {
    check_dim(prox_center.dim(), warm_start.dim())?;
    let eval = |point: &ParamVector, k: usize| -> Result<(f64, ParamVector)> {
        let (value, grad) = objective_h(point, prox_center, loss, terms).map_err(|e| e.context(format!("iterate {k}")))?;
        if !value.is_finite() || grad.first_non_finite().is_some() {
            return Err(Error::Divergence(format!("non-finite objective at iterate {k} (H = {value})")));
        }
        Ok((value, grad))
    };

    let mut x = warm_start.clone();
    let mut y = warm_start.clone();
    let mut t = 1.0f64;
    let mut initial_value = f64::NAN;
    for k in 0..cfg.max_iters {
        let (value, grad) = eval(&y, k)?;
        if k == 0 {
            initial_value = value;
        }
        let gnorm = grad.norm_sq();
        if gnorm <= cfg.tolerance {
            return Ok(SolveReport {
                theta: y,
                final_value: value,
                initial_value,
                final_grad_norm_sq: gnorm,
                iters_used: k,
                converged: true,
            });
        }
        let mut x_next = y;
        x_next.axpy(-cfg.step_size, &grad);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        let mut y_next = x_next.clone();
        for ((yv, &xn), &xo) in y_next.as_mut_slice().iter_mut().zip(x_next.as_slice()).zip(x.as_slice()) {
            *yv = xn + momentum * (xn - xo);
        }
        x = x_next;
        y = y_next;
        t = t_next;
    }
    let (value, grad) = eval(&x, cfg.max_iters)?;
    let gnorm = grad.norm_sq();
    Ok(SolveReport {
        theta: x,
        final_value: value,
        initial_value,
        final_grad_norm_sq: gnorm,
        iters_used: cfg.max_iters,
        converged: gnorm <= cfg.tolerance,
    })
}

/// `(lambda1 * theta + lambda2 * w_edge) / (lambda1 + lambda2)`.
pub fn closed_form_edge_model(theta: &ParamVector, w_edge: &ParamVector, lambda1: f64, lambda2: f64) -> Result<ParamVector> {
    check_dim(theta.dim(), w_edge.dim())?;
    let total = lambda1 + lambda2;
    if !(total > 0.0) {
        return Err(Error::invalid(format!("lambda1 + lambda2 must be positive, got {total}")));
    }
    Ok(ParamVector::from_vec_unchecked(
        theta
            .as_slice()
            .iter()
            .zip(w_edge.as_slice())
            .map(|(t, w)| (lambda1 * t + lambda2 * w) / total)
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    const NO_PENALTY: ProxTerms = ProxTerms {
        lambda1: 25.0,
        gamma1: 0.0,
        rho: 1.0,
    };

    #[test]
    fn h_at_center_of_zero_loss() {
        let c = pv(&[0.3, -1.0]);
        let (v, g) = objective_h(&c, &c, &ZeroLoss { dim: 2 }, NO_PENALTY).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn h_gradient_by_hand() {
        let a = pv(&[1.0, 2.0]);
        let c = pv(&[0.5, 0.0]);
        let theta = pv(&[2.0, -1.0]);
        let (_, g) = objective_h(&theta, &c, &QuadraticLoss { target: &a }, NO_PENALTY).unwrap();
        // (theta - a) + 25 (theta - c)
        assert_eq!(g.as_slice(), &[1.0 + 25.0 * 1.5, -3.0 + 25.0 * -1.0]);
    }

    #[test]
    fn quadratic_minimizer_matches_closed_form() {
        let a = pv(&[1.0, 0.0]);
        let c = pv(&[0.0, 0.0]);
        let cfg = InnerSolveConfig {
            max_iters: 100,
            tolerance: 1e-12,
            step_size: 0.05,
        };
        let rep = solve_personalized(&c, &QuadraticLoss { target: &a }, NO_PENALTY, &cfg, &c).unwrap();
        let dist = rep.theta.dist_sq(&pv(&[1.0 / 26.0, 0.0])).unwrap().sqrt();
        assert!(dist <= 1e-4, "distance {dist}");
        assert!(rep.converged);
        assert_eq!(rep.converged, rep.final_grad_norm_sq <= cfg.tolerance);
    }

    #[test]
    fn zero_loss_returns_center() {
        let c = pv(&[0.25, -3.5, 7.0]);
        let rep = solve_personalized(&c, &ZeroLoss { dim: 3 }, NO_PENALTY, &InnerSolveConfig::default(), &c).unwrap();
        assert_eq!(rep.theta, c);
        assert!(rep.converged);
        assert_eq!(rep.iters_used, 0);
    }

    #[test]
    fn iteration_cap_reports_not_converged() {
        let a = pv(&[10.0, -10.0]);
        let c = pv(&[0.0, 0.0]);
        let cfg = InnerSolveConfig {
            max_iters: 1,
            tolerance: 1e-30,
            step_size: 0.01,
        };
        let rep = solve_personalized(&c, &QuadraticLoss { target: &a }, NO_PENALTY, &cfg, &c).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iters_used, 1);
        assert!(rep.final_value < rep.initial_value);
    }

    #[test]
    fn divergence_names_iterate() {
        let a = pv(&[1e200]);
        let c = pv(&[0.0]);
        let cfg = InnerSolveConfig {
            max_iters: 50,
            tolerance: 1e-12,
            step_size: 10.0,
        };
        let err = solve_personalized(&c, &QuadraticLoss { target: &a }, NO_PENALTY, &cfg, &c).unwrap_err();
        match err {
            Error::Divergence(msg) => assert!(msg.contains("iterate"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn edge_model_examples() {
        let theta = pv(&[1.0, 0.0]);
        let w = pv(&[0.0, 1.0]);
        assert_eq!(closed_form_edge_model(&theta, &w, 5.0, 15.0).unwrap().as_slice(), &[0.25, 0.75]);
        assert_eq!(closed_form_edge_model(&theta, &w, 25.0, 25.0).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(closed_form_edge_model(&theta, &theta, 3.0, 7.0).unwrap(), theta);
        assert!(closed_form_edge_model(&theta, &pv(&[1.0]), 1.0, 1.0).is_err());
        assert!(closed_form_edge_model(&theta, &w, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn edge_model_first_order_identity(
            theta in prop::collection::vec(-10.0f64..10.0, 6),
            w in prop::collection::vec(-10.0f64..10.0, 6),
            l1 in 0.1f64..50.0, l2 in 0.1f64..50.0,
        ) {
            let (theta, w) = (pv(&theta), pv(&w));
            let phi = closed_form_edge_model(&theta, &w, l1, l2).unwrap();
            for n in 0..6 {
                let r = l1 * (phi[n] - theta[n]) + l2 * (phi[n] - w[n]);
                prop_assert!(r.abs() < 1e-10, "residual {r}");
                let (lo, hi) = (theta[n].min(w[n]), theta[n].max(w[n]));
                prop_assert!(phi[n] >= lo - 1e-12 && phi[n] <= hi + 1e-12);
            }
        }
    }
}
