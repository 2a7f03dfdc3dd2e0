//! Numeric checks of the envelope smoothness constants, the first-order
//! identities of the client/edge updates, and estimates of the sampling and
//! heterogeneity terms that appear in the convergence bounds.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::QuadraticFamily;
use crate::error::{Error, Result};
use crate::federation::{FederationState, HyperParams, MetricsLog};
use crate::math::{log_cosh, sparsity_ratio, ParamVector};
use crate::rng::{stream, Purpose};
use crate::solver::{objective_h, solve_personalized, LocalLoss, ProxTerms};

/// Second-difference step used for curvature probes.
pub const CURVATURE_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub l_f: f64,
    pub mu_f: f64,
    pub lambda_bar: f64,
    pub lambda_eff: f64,
    pub eta_check: f64,
    pub delta_sq_est: Option<f64>,
    pub sigma_ell_sq_est: Option<f64>,
    pub gamma_ell_sq_est: Option<f64>,
    pub d_s: Option<usize>,
}

/// Closed-form constants for local losses that are `mu`-strongly convex
/// (`mu = 0` for the general case).
pub fn smoothness_constants(hp: &HyperParams, mu: f64) -> Result<TheoryConstants> {
    if !(hp.rho > 0.0) {
        return Err(Error::invalid(format!("rho must be positive, got {}", hp.rho)));
    }
    if !(mu >= 0.0) {
        return Err(Error::invalid(format!("mu must be nonnegative, got {mu}")));
    }
    let (l1, l2) = (hp.lambda1, hp.lambda2);
    Ok(TheoryConstants {
        l_f: l2 + hp.gamma2 / hp.rho,
        mu_f: l1 * l2 * mu / (l1 * mu + l2 * mu + l1 * l2),
        lambda_bar: l1 * l2 / (l1 + l2),
        lambda_eff: l1 * l2 / (l1 * l1 + l2 * l2).sqrt(),
        eta_check: hp.eta1 * hp.beta * hp.edge_rounds as f64,
        delta_sq_est: None,
        sigma_ell_sq_est: None,
        gamma_ell_sq_est: None,
        d_s: None,
    })
}

/// Exact two-level envelope of `1/2 ||theta - a||^2`:
/// `min_{theta, phi} 1/2||theta - a||^2 + lambda1/2 ||theta - phi||^2 + lambda2/2 ||phi - w||^2 + gamma2 phi_rho(w)`,
/// solved coordinate-wise as a 2x2 linear system.
pub fn quadratic_envelope(target: &ParamVector, w: &[f64], lambda1: f64, lambda2: f64, gamma2: f64, rho: f64) -> f64 {
    // [1 + l1, -l1; -l1, l1 + l2] [theta; phi] = [a; l2 w]
    let (a11, a12, a22) = (1.0 + lambda1, -lambda1, lambda1 + lambda2);
    let det = a11 * a22 - a12 * a12;
    let mut value = 0.0;
    for (&a, &wv) in target.as_slice().iter().zip(w) {
        let b2 = lambda2 * wv;
        let theta = (a22 * a - a12 * b2) / det;
        let phi = (a11 * b2 - a12 * a) / det;
        value += 0.5 * (theta - a) * (theta - a) + 0.5 * lambda1 * (theta - phi) * (theta - phi) + 0.5 * lambda2 * (phi - wv) * (phi - wv);
    }
    if gamma2 != 0.0 {
        value += gamma2 * rho * w.iter().map(|&v| log_cosh(v / rho)).sum::<f64>();
    }
    value
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureRange {
    pub min: f64,
    pub max: f64,
    pub probes: usize,
}

/// Central second differences of each client's envelope along random unit
/// directions at random points around the optimum, with step `h`.
pub fn measure_envelope_curvature_with_step(
    family: &QuadraticFamily,
    hp: &HyperParams,
    probes: usize,
    seed: u64,
    h: f64,
) -> Result<CurvatureRange> {
    if probes == 0 {
        return Err(Error::invalid("at least one probe is required"));
    }
    if !(h > 0.0) {
        return Err(Error::invalid(format!("probe step must be positive, got {h}")));
    }
    let d = family.dim();
    let mut rng = stream(seed, Purpose::Curvature, 0, 0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let env = |k: usize, w: &[f64]| quadratic_envelope(&family.targets[k], w, hp.lambda1, hp.lambda2, hp.gamma2, hp.rho);
    for p in 0..probes {
        let k = p % family.targets.len();
        let w: Vec<f64> = family
            .optimum
            .as_slice()
            .iter()
            .map(|&c| c + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let plus: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a - h * b).collect();
        let curv = (env(k, &plus) - 2.0 * env(k, &w) + env(k, &minus)) / (h * h);
        if !curv.is_finite() {
            return Err(Error::Divergence(format!("curvature probe {p} is not finite")));
        }
        lo = lo.min(curv);
        hi = hi.max(curv);
    }
    Ok(CurvatureRange {
        min: lo,
        max: hi,
        probes,
    })
}

pub fn measure_envelope_curvature(family: &QuadraticFamily, hp: &HyperParams, probes: usize, seed: u64) -> Result<CurvatureRange> {
    measure_envelope_curvature_with_step(family, hp, probes, seed, CURVATURE_STEP)
}

/// Largest relative spread of the measured extremes across steps `1e-3, 1e-4, 1e-5`.
pub fn curvature_step_spread(family: &QuadraticFamily, hp: &HyperParams, probes: usize, seed: u64) -> Result<f64> {
    let ranges = [1e-3, 1e-4, 1e-5]
        .iter()
        .map(|&h| measure_envelope_curvature_with_step(family, hp, probes, seed, h))
        .collect::<Result<Vec<_>>>()?;
    let spread = |f: fn(&CurvatureRange) -> f64| {
        let vals: Vec<f64> = ranges.iter().map(f).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) / hi.abs().max(f64::MIN_POSITIVE)
    };
    Ok(spread(|r| r.min).max(spread(|r| r.max)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResidual {
    pub gid: usize,
    /// `||lambda1 (phi - theta) + lambda2 (phi - w_edge)||`
    pub r1: f64,
    /// `||grad H(theta)||^2` at the stored solve.
    pub r2: f64,
    pub converged: bool,
}

/// Optimality residuals of every client's most recent solve. Clients that
/// never ran a personalized solve are skipped.
pub fn first_order_residuals(state: &FederationState, hp: &HyperParams) -> Result<Vec<ClientResidual>> {
    let mut out = Vec::new();
    for client in state.clients() {
        let Some(last) = &client.last_solve else { continue };
        client.phi_local.ensure_dim(client.theta.dim())?;
        last.w_edge.ensure_dim(client.theta.dim())?;
        let r1 = client
            .phi_local
            .as_slice()
            .iter()
            .zip(client.theta.as_slice())
            .zip(last.w_edge.as_slice())
            .map(|((&phi, &theta), &w)| {
                let v = hp.lambda1 * (phi - theta) + hp.lambda2 * (phi - w);
                v * v
            })
            .sum::<f64>()
            .sqrt();
        let loss = client.task.loss_at(Some(&last.batch_positions))?;
        let terms = ProxTerms {
            lambda1: hp.lambda1,
            gamma1: last.gamma1,
            rho: hp.rho,
        };
        let (_, grad) = objective_h(&client.theta, &last.prox_center, &loss, terms)?;
        out.push(ClientResidual {
            gid: client.gid,
            r1,
            r2: grad.norm_sq(),
            converged: last.converged,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimates {
    /// Spread of solved personalized models across independent mini-batches.
    pub delta_sq: f64,
    /// Mini-batch gradient variance around the full-shard gradient.
    pub gamma_ell_sq: f64,
    /// Spread of per-client full gradients around their mean.
    pub sigma_ell_sq: f64,
}

/// Noise terms at the current global model. Each entry of `draw_seeds` is one
/// repeat; repeat `r` for client `g` draws from `stream(draw_seeds[r], Diagnostics, g)`.
pub fn estimate_noise_terms(
    state: &FederationState,
    hp: &HyperParams,
    gamma1: f64,
    draw_seeds: &[u64],
) -> Result<NoiseEstimates> {
    if draw_seeds.len() < 2 {
        return Err(Error::invalid("noise estimates need at least two repeats"));
    }
    let w = state.global();
    let clients = state.clients();
    let terms = ProxTerms {
        lambda1: hp.lambda1,
        gamma1,
        rho: hp.rho,
    };
    let cfg = hp.inner_config();
    let reps = draw_seeds.len() as f64;
    let (mut delta, mut gamma_ell) = (0.0, 0.0);
    let mut full_grads = Vec::with_capacity(clients.len());
    for c in &clients {
        let (_, full) = c.task.loss_at(None)?.loss_and_grad(w)?;
        let mut thetas = Vec::with_capacity(draw_seeds.len());
        let mut batch_var = 0.0;
        for &s in draw_seeds {
            let mut rng = stream(s, Purpose::Diagnostics, c.gid as u64, 0);
            let (_, loss) = c.task.draw(hp.batch_size, &mut rng)?;
            let (_, g) = loss.loss_and_grad(w)?;
            batch_var += g.dist_sq(&full)?;
            thetas.push(solve_personalized(w, &loss, terms, &cfg, w)?.theta);
        }
        let mean = crate::math::mean_of(&thetas);
        let mut spread = 0.0;
        for t in &thetas {
            spread += t.dist_sq(&mean)?;
        }
        delta += spread / reps;
        gamma_ell += batch_var / reps;
        full_grads.push(full);
    }
    let n = clients.len() as f64;
    let mean_grad = crate::math::mean_of(&full_grads);
    let mut sigma = 0.0;
    for g in &full_grads {
        sigma += g.dist_sq(&mean_grad)?;
    }
    Ok(NoiseEstimates {
        delta_sq: delta / n,
        gamma_ell_sq: gamma_ell / n,
        sigma_ell_sq: sigma / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaritySummary {
    pub window: usize,
    /// Running mean of the gradient-norm estimate over each trailing window.
    pub running_grad: Vec<f64>,
    pub first_grad_avg: f64,
    pub final_grad_avg: f64,
    /// `final / first`; 1 for a constant series.
    pub grad_ratio: f64,
    pub first_drift_avg: f64,
    pub final_drift_avg: f64,
    pub drift_ratio: f64,
    pub decreasing: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

/// Windowed averages of `||grad F(w)||^2` and of the mean personalized drift.
pub fn stationarity_series(log: &MetricsLog, window: usize) -> Result<StationaritySummary> {
    let n = log.records.len();
    if window == 0 || window > n {
        return Err(Error::invalid(format!("window {window} does not fit a log of {n} records")));
    }
    let grads: Vec<f64> = log.records.iter().map(|r| r.grad_norm_sq_est).collect();
    let drifts: Vec<f64> = log.records.iter().map(|r| r.personal_drift_sq).collect();
    let running_grad = grads.windows(window).map(mean).collect();
    let (first_grad_avg, final_grad_avg) = (mean(&grads[..window]), mean(&grads[n - window..]));
    let (first_drift_avg, final_drift_avg) = (mean(&drifts[..window]), mean(&drifts[n - window..]));
    Ok(StationaritySummary {
        window,
        running_grad,
        first_grad_avg,
        final_grad_avg,
        grad_ratio: ratio(final_grad_avg, first_grad_avg),
        first_drift_avg,
        final_drift_avg,
        drift_ratio: ratio(final_drift_avg, first_drift_avg),
        decreasing: final_grad_avg < first_grad_avg,
    })
}

/// Largest number of increases `x[k+1] > x[k]` inside any `window` consecutive values.
pub fn max_increases_per_window(values: &[f64], window: usize) -> usize {
    if values.len() < 2 || window < 2 {
        return 0;
    }
    let ups: Vec<usize> = values.windows(2).map(|p| usize::from(p[1] > p[0])).collect();
    let span = (window - 1).min(ups.len());
    ups.windows(span).map(|w| w.iter().sum()).max().unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyGradCheck {
    pub norm_sq: f64,
    pub dim: usize,
    pub nonzero: usize,
    /// Norm after zeroing entries below the threshold.
    pub thresholded_norm_sq: f64,
    pub within_dim: bool,
    pub within_nonzero_sq: bool,
}

/// `||tanh(w / rho)||^2 <= d`, and `<= d_s^2` once small entries are zeroed.
pub fn penalty_grad_bound(w: &ParamVector, rho: f64, eps_zero: f64) -> Result<PenaltyGradCheck> {
    let nonzero = sparsity_ratio(w.as_slice(), eps_zero)?.nonzero;
    let mut full = 0.0;
    let mut kept = 0.0;
    for &v in w.as_slice() {
        let g = (v / rho).tanh();
        full += g * g;
        if v.abs() >= eps_zero {
            kept += g * g;
        }
    }
    let d = w.dim();
    Ok(PenaltyGradCheck {
        norm_sq: full,
        dim: d,
        nonzero,
        thresholded_norm_sq: kept,
        within_dim: full <= d as f64,
        within_nonzero_sq: kept <= (nonzero * nonzero) as f64,
    })
}

/// Bound terms evaluated on a synthetic quadratic family, where the optimum is
/// known. Only defined without the global penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBounds {
    pub delta0: f64,
    pub delta_f: f64,
    pub sigma_f1_sq: f64,
    /// Needs `lambda > 4 (L + gamma1 / rho)`.
    pub sigma_f2_sq: Option<f64>,
    pub m1: f64,
    pub m2: f64,
    pub g1: f64,
    pub g2: Option<f64>,
    pub d1: f64,
    pub d2: Option<f64>,
}

/// Bound terms for the quadratic family started from `w0`, with sampling noise
/// `delta_sq` and `d_s` nonzero entries.
pub fn synthetic_bounds(
    family: &QuadraticFamily,
    hp: &HyperParams,
    w0: &ParamVector,
    delta_sq: f64,
    d_s: usize,
) -> Result<Option<SyntheticBounds>> {
    if hp.gamma2 != 0.0 {
        return Ok(None);
    }
    let c = smoothness_constants(hp, 1.0)?;
    let curv = c.lambda_bar / (1.0 + c.lambda_bar);
    let w_star = &family.optimum;
    let f = |w: &ParamVector| -> Result<f64> {
        let mut total = 0.0;
        for a in &family.targets {
            total += 0.5 * curv * w.dist_sq(a)?;
        }
        Ok(total / family.targets.len() as f64)
    };
    let k = family.targets.len() as f64;
    let mut sigma_f1_sq = 0.0;
    let mut sigma_ell_sq = 0.0;
    for a in &family.targets {
        let d = w_star.dist_sq(a)?;
        sigma_f1_sq += curv * curv * d;
        sigma_ell_sq += d;
    }
    sigma_f1_sq /= k;
    sigma_ell_sq /= k;
    let lam = c.lambda_eff;
    let l_inner = 1.0 + hp.gamma1 / hp.rho;
    let denom = lam * lam - 16.0 * l_inner * l_inner;
    let sigma_f2_sq = (denom > 0.0).then(|| lam * lam / denom * sigma_ell_sq);
    let lb2 = c.lambda_bar * c.lambda_bar;
    let (l_f, mu_f, beta, r) = (c.l_f, c.mu_f, hp.beta, hp.edge_rounds as f64);
    let sparse_cost = hp.gamma2 * hp.gamma2 * (d_s * d_s) as f64 / lb2;
    Ok(Some(SyntheticBounds {
        delta0: w0.dist_sq(w_star)?,
        delta_f: f(w0)? - f(w_star)?,
        sigma_f1_sq,
        sigma_f2_sq,
        m1: 8.0 * delta_sq * lb2 / mu_f,
        m2: 6.0 * (1.0 + 64.0 * l_f / (mu_f * beta)) * sigma_f1_sq + 128.0 * l_f * delta_sq * lb2 / (mu_f * beta),
        g1: 3.0 * beta * lb2 * delta_sq,
        g2: sigma_f2_sq.map(|s| 3.0 * l_f * (49.0 * r * s + 16.0 * delta_sq * lb2) / r),
        d1: sigma_f1_sq / (lam * lam) + sparse_cost + delta_sq,
        d2: sigma_f2_sq.map(|s| s / (lam * lam) + sparse_cost + delta_sq),
    }))
}

/// Everything written to `theory_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub constants: TheoryConstants,
    pub residuals: Option<ResidualSummary>,
    pub noise: Option<NoiseEstimates>,
    pub stationarity: Option<StationaritySummary>,
    pub penalty_grad: Option<PenaltyGradCheck>,
    pub curvature: Option<CurvatureRange>,
    pub synthetic_bounds: Option<SyntheticBounds>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub clients: usize,
    pub max_r1: f64,
    pub max_r2_converged: Option<f64>,
    pub max_r2_capped: Option<f64>,
    pub capped: usize,
}

impl ResidualSummary {
    pub fn from_residuals(res: &[ClientResidual]) -> Option<Self> {
        if res.is_empty() {
            return None;
        }
        let fold = |it: &mut dyn Iterator<Item = f64>| it.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        Some(ResidualSummary {
            clients: res.len(),
            max_r1: res.iter().map(|r| r.r1).fold(0.0, f64::max),
            max_r2_converged: fold(&mut res.iter().filter(|r| r.converged).map(|r| r.r2)),
            max_r2_capped: fold(&mut res.iter().filter(|r| !r.converged).map(|r| r.r2)),
            capped: res.iter().filter(|r| !r.converged).count(),
        })
    }
}
