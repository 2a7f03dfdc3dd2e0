//! The orchestration loop: rounds, the sparsity schedule, upload accounting
//! and per-round metrics.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::{baseline_round, Algorithm, ClientState, ClientTask, FederationState, Gammas, HyperParams, ProxCenter, RoundContext};
use super::exec::Execution;
use crate::comms::{threshold_for_transmission, CommsAccount, GammaSchedule};
use crate::error::{Error, Result};
use crate::math::{sparsity_ratio, ParamVector, DEFAULT_EPS_ZERO};
use crate::solver::{solve_personalized, InnerSolveConfig, ProxTerms};

pub const METRICS_HEADER: &str =
    "round,global_test_acc,mean_personal_acc,objective_est,grad_norm_sq_est,sparsity_w,cumulative_bits,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub algorithm: Algorithm,
    pub hp: HyperParams,
    /// When set, overrides `hp.gamma1`/`hp.gamma2` round by round.
    #[serde(default)]
    pub gamma_schedule: Option<GammaSchedule>,
    pub seed: u64,
    #[serde(default = "default_eps_zero")]
    pub eps_zero: f64,
    /// Charge uploads with the zero/nonzero coding instead of dense floats.
    #[serde(default)]
    pub sparse_coding: bool,
    /// Also zero small entries of the aggregated global model, not just the sent copy.
    #[serde(default)]
    pub threshold_state: bool,
    /// Update all edges and then sample, instead of sampling first.
    #[serde(default)]
    pub faithful_sampling: bool,
    #[serde(default)]
    pub prox_center: ProxCenter,
    #[serde(default = "one")]
    pub workers: usize,
    /// Metrics every this many rounds; `None` means every round for `T <= 200`, else every 5.
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Inner iterations for the objective estimate; 0 skips it.
    #[serde(default = "default_objective_iters")]
    pub objective_iters: usize,
    #[serde(default = "default_objective_step")]
    pub objective_step: f64,
    /// Record real elapsed time; otherwise `wall_ms` is 0 so logs are byte-stable.
    #[serde(default)]
    pub wall_clock: bool,
    /// Also charge client-to-edge uploads (dense) to the bit count.
    #[serde(default)]
    pub client_edge_accounting: bool,
}

fn default_eps_zero() -> f64 {
    DEFAULT_EPS_ZERO
}

fn one() -> usize {
    1
}

fn default_objective_iters() -> usize {
    30
}

fn default_objective_step() -> f64 {
    0.02
}

impl TrainingConfig {
    pub fn new(algorithm: Algorithm, hp: HyperParams, seed: u64) -> Self {
        TrainingConfig {
            algorithm,
            hp,
            gamma_schedule: None,
            seed,
            eps_zero: DEFAULT_EPS_ZERO,
            sparse_coding: false,
            threshold_state: false,
            faithful_sampling: false,
            prox_center: ProxCenter::Edge,
            workers: 1,
            eval_every: None,
            objective_iters: default_objective_iters(),
            objective_step: default_objective_step(),
            wall_clock: false,
            client_edge_accounting: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = match self.hp.validate() {
            Ok(()) => Vec::new(),
            Err(Error::Config(p)) => p,
            Err(e) => return Err(e),
        };
        if !(self.eps_zero > 0.0) {
            problems.push(format!("eps_zero must be positive, got {}", self.eps_zero));
        }
        if self.workers == 0 {
            problems.push("workers must be at least 1".into());
        }
        if self.eval_every == Some(0) {
            problems.push("eval_every must be at least 1".into());
        }
        if self.objective_iters > 0 && !(self.objective_step > 0.0) {
            problems.push(format!("objective_step must be positive, got {}", self.objective_step));
        }
        if let Some(s) = &self.gamma_schedule {
            for (name, v) in [("gamma_init", s.gamma_init), ("gamma_tiny", s.gamma_tiny)] {
                if !(v >= 0.0 && v.is_finite()) {
                    problems.push(format!("gamma schedule {name} must be nonnegative, got {v}"));
                }
            }
            if !(0.0..=1.0).contains(&s.sparsity_target) {
                problems.push(format!("sparsity_target must be in [0, 1], got {}", s.sparsity_target));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn eval_interval(&self) -> usize {
        self.eval_every.unwrap_or(if self.hp.rounds <= 200 { 1 } else { 5 })
    }

    pub fn execution(&self) -> Execution {
        Execution::for_workers(self.workers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Completed global rounds.
    pub round: usize,
    pub global_test_acc: f64,
    pub mean_personal_acc: f64,
    pub objective_est: f64,
    pub grad_norm_sq_est: f64,
    /// Nonzero fraction of the global model.
    pub sparsity_w: f64,
    pub cumulative_bits: u64,
    pub wall_ms: u64,
    /// Mean `||theta - w||^2` over clients; kept out of the CSV.
    #[serde(skip, default = "nan")]
    pub personal_drift_sq: f64,
}

fn nan() -> f64 {
    f64::NAN
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(METRICS_HEADER.split(','))?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != METRICS_HEADER {
            return Err(Error::Schema(format!("unexpected metrics header '{}'", header.join(","))));
        }
        let records = rdr.deserialize().collect::<std::result::Result<Vec<MetricsRecord>, _>>()?;
        Ok(MetricsLog { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::read_csv(file).map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub log: MetricsLog,
    pub state: FederationState,
    /// Bits charged in each round, in round order.
    pub bits_per_round: Vec<u64>,
    /// Round at which the sparsity schedule switched to its tiny value.
    pub gamma_switched_at: Option<usize>,
    pub comms: CommsAccount,
}

/// Trains from `init` and returns the metrics log and final state.
pub fn run_training(cfg: &TrainingConfig, tasks: &[Arc<ClientTask>], init: &ParamVector) -> Result<TrainingOutcome> {
    run_training_with(cfg, tasks, init, |_| Ok(()))
}

/// [`run_training`] calling `observe` on each record as it is produced.
pub fn run_training_with(
    cfg: &TrainingConfig,
    tasks: &[Arc<ClientTask>],
    init: &ParamVector,
    mut observe: impl FnMut(&MetricsRecord) -> Result<()> + Send,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let mut state = FederationState::build(cfg.algorithm, tasks, init, &cfg.hp)?;
    let mut schedule = cfg.gamma_schedule.clone();
    let mut comms = CommsAccount::default();
    let mut log = MetricsLog::default();
    let mut bits_per_round = Vec::with_capacity(cfg.hp.rounds);
    let exec = cfg.execution();
    let every = cfg.eval_interval();
    let start = Instant::now();

    super::exec::with_workers(cfg.workers, || -> Result<()> {
        for t in 0..cfg.hp.rounds {
            let gammas = match schedule.as_mut() {
                Some(s) => {
                    let ratio = sparsity_ratio(state.global().as_slice(), cfg.eps_zero)?.ratio;
                    let (gamma1, gamma2) = s.gamma_step(ratio, t);
                    Gammas { gamma1, gamma2 }
                }
                None => Gammas {
                    gamma1: cfg.hp.gamma1,
                    gamma2: cfg.hp.gamma2,
                },
            };
            let ctx = RoundContext {
                hp: &cfg.hp,
                gammas,
                seed: cfg.seed,
                prox_center: cfg.prox_center,
                faithful_sampling: cfg.faithful_sampling,
                exec,
                upload_threshold: cfg.sparse_coding.then_some(cfg.eps_zero),
            };
            let out = baseline_round(cfg.algorithm, &mut state, &ctx).map_err(|e| e.context(format!("round {t}")))?;

            let before = comms.cumulative_bits;
            for u in &out.uploads {
                comms.account_upload(u, cfg.eps_zero, cfg.sparse_coding);
            }
            if cfg.client_edge_accounting {
                let dim = init.dim();
                comms.cumulative_bits += out.client_uploads as u64 * comms.upload_bits(dim, dim, false);
            }
            bits_per_round.push(comms.cumulative_bits - before);

            if cfg.threshold_state {
                let w = threshold_for_transmission(state.global(), cfg.eps_zero);
                state.set_global(w);
            }

            let done = t + 1;
            if done % every == 0 || done == cfg.hp.rounds {
                let wall_ms = if cfg.wall_clock {
                    start.elapsed().as_millis() as u64
                } else {
                    0
                };
                let mut record = evaluate(&state, cfg, gammas, exec)?;
                record.round = done;
                record.cumulative_bits = comms.cumulative_bits;
                record.wall_ms = wall_ms;
                debug!(
                    "round {done}: acc {:.4} personal {:.4} F {:.6} nnz {:.3}",
                    record.global_test_acc, record.mean_personal_acc, record.objective_est, record.sparsity_w
                );
                observe(&record)?;
                log.records.push(record);
            }
        }
        Ok(())
    })?;
    if let Some(last) = log.records.last() {
        info!(
            "{} finished {} rounds: global acc {:.4}, sparsity {:.3}",
            cfg.algorithm.name(),
            last.round,
            last.global_test_acc,
            last.sparsity_w
        );
    }
    Ok(TrainingOutcome {
        log,
        state,
        bits_per_round,
        gamma_switched_at: schedule.and_then(|s| s.switched_at),
        comms,
    })
}

struct ClientEval {
    global: Option<(usize, usize)>,
    personal: Option<(usize, usize)>,
    envelope: Option<(f64, ParamVector)>,
    drift_sq: f64,
}

fn eval_client(client: &ClientState, w: &ParamVector, cfg: &TrainingConfig, gammas: Gammas) -> Result<ClientEval> {
    let global = client.task.test_counts(w)?;
    let personal = client.task.test_counts(&client.theta)?;
    let envelope = if cfg.objective_iters > 0 {
        let loss = client.task.loss_at(None)?;
        let terms = ProxTerms {
            lambda1: cfg.hp.lambda_bar(),
            gamma1: gammas.gamma1,
            rho: cfg.hp.rho,
        };
        let solve_cfg = InnerSolveConfig {
            max_iters: cfg.objective_iters,
            tolerance: cfg.hp.nu,
            step_size: cfg.objective_step,
        };
        let report = solve_personalized(w, &loss, terms, &solve_cfg, w)?;
        let mut grad = w.clone();
        grad.axpy(-1.0, &report.theta);
        grad.scale(terms.lambda1);
        Some((report.final_value, grad))
    } else {
        None
    };
    Ok(ClientEval {
        global,
        personal,
        envelope,
        drift_sq: client.theta.dist_sq(w)?,
    })
}

/// Metrics for the current global model (round, bits and wall time left at 0).
///
/// The objective is the per-client envelope
/// `min_theta loss + gamma1 * phi(theta) + lambda_bar/2 ||theta - w||^2`
/// averaged over clients, plus `gamma2 * phi(w)`, with its gradient
/// `lambda_bar (w - theta_hat) + gamma2 tanh(w / rho)`.
pub fn evaluate(state: &FederationState, cfg: &TrainingConfig, gammas: Gammas, exec: Execution) -> Result<MetricsRecord> {
    let w = state.global();
    let clients = state.clients();
    let evals = exec.map_ref(&clients, |_, c| eval_client(c, w, cfg, gammas));
    let evals = evals.into_iter().collect::<Result<Vec<_>>>()?;
    let n = evals.len() as f64;

    let (mut correct, mut total) = (0usize, 0usize);
    let mut personal_sum = 0.0;
    let mut have_acc = true;
    for e in &evals {
        match (e.global, e.personal) {
            (Some((c, t)), Some((pc, pt))) if t > 0 => {
                correct += c;
                total += t;
                personal_sum += pc as f64 / pt as f64;
            }
            _ => have_acc = false,
        }
    }
    let (global_test_acc, mean_personal_acc) = if have_acc && total > 0 {
        (correct as f64 / total as f64, personal_sum / n)
    } else {
        (f64::NAN, f64::NAN)
    };

    let (objective_est, grad_norm_sq_est) = if cfg.objective_iters > 0 {
        let mut value = 0.0;
        let mut grad = vec![0.0; w.dim()];
        for e in &evals {
            let (v, g) = e.envelope.as_ref().expect("envelope computed");
            value += v;
            for (a, b) in grad.iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        value /= n;
        for a in &mut grad {
            *a /= n;
        }
        if gammas.gamma2 != 0.0 {
            value += gammas.gamma2 * crate::math::penalty_unchecked(w.as_slice(), cfg.hp.rho);
            crate::math::add_penalty_grad(&mut grad, w.as_slice(), gammas.gamma2, cfg.hp.rho);
        }
        (value, grad.iter().map(|g| g * g).sum())
    } else {
        (f64::NAN, f64::NAN)
    };

    Ok(MetricsRecord {
        round: state.round(),
        global_test_acc,
        mean_personal_acc,
        objective_est,
        grad_norm_sq_est,
        sparsity_w: sparsity_ratio(w.as_slice(), cfg.eps_zero)?.ratio,
        cumulative_bits: 0,
        wall_ms: 0,
        personal_drift_sq: evals.iter().map(|e| e.drift_sq).sum::<f64>() / n,
    })
}

impl FederationState {
    pub(crate) fn set_global(&mut self, w: ParamVector) {
        match self {
            FederationState::Hierarchical(c) => c.w = w,
            FederationState::Flat(f) => f.w = w,
        }
    }
}
