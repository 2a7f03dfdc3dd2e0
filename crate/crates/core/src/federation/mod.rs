//! Client-edge-cloud training: the sparse hierarchical personalized rounds,
//! the baselines they are compared against, and the orchestration loop.

mod baselines;
pub mod exec;
mod sfedhp;
mod training;

use std::sync::Arc;

use log::warn;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_positions, Shard};
use crate::error::{Error, Result};
use crate::math::ParamVector;
use crate::models::{correct_count, Batch, ModelSpec};
use crate::solver::{BatchLoss, InnerSolveConfig, LocalLoss, QuadraticLoss};

pub use baselines::{baseline_round, fedavg_local, hierfavg_round, pfedme_round};
pub use exec::{with_workers, Execution};
pub use sfedhp::{aggregate, cloud_round, edge_update, sample_edges};
pub use training::{evaluate, run_training, run_training_with, MetricsLog, MetricsRecord, TrainingConfig, TrainingOutcome, METRICS_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sfedhp,
    Pfedme,
    Fedavg,
    Hierfavg,
    Fedprox,
}

impl Algorithm {
    pub fn is_hierarchical(self) -> bool {
        matches!(self, Algorithm::Sfedhp | Algorithm::Hierfavg)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sfedhp => "sfedhp",
            Algorithm::Pfedme => "pfedme",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Hierfavg => "hierfavg",
            Algorithm::Fedprox => "fedprox",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sfedhp" => Ok(Algorithm::Sfedhp),
            "pfedme" => Ok(Algorithm::Pfedme),
            "fedavg" => Ok(Algorithm::Fedavg),
            "hierfavg" => Ok(Algorithm::Hierfavg),
            "fedprox" => Ok(Algorithm::Fedprox),
            other => Err(Error::config(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Which model anchors each client's proximal subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxCenter {
    /// The edge personalized model (mean of the clients' local edge models).
    #[default]
    Edge,
    /// The client's own local edge model.
    Client,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub rho: f64,
    pub beta: f64,
    pub eta1: f64,
    /// Carried through configs for bookkeeping; no update rule reads it.
    pub eta2: f64,
    /// Global rounds `T`.
    pub rounds: usize,
    /// Edge rounds `R` per global round.
    pub edge_rounds: usize,
    /// Inner iterations `K`.
    pub inner_iters: usize,
    /// Inner tolerance `nu` on the squared gradient norm.
    pub nu: f64,
    pub batch_size: usize,
    /// Edges sampled per round, `S`.
    pub edges_sampled: usize,
    /// Edge count `N`.
    pub edges: usize,
    /// Clients per edge `J`.
    pub clients_per_edge: usize,
    /// Inner solver step; defaults to `eta1`.
    #[serde(default)]
    pub inner_step: Option<f64>,
    /// Proximal weight of the FedProx baseline.
    #[serde(default)]
    pub fedprox_mu: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda1: 25.0,
            lambda2: 25.0,
            gamma1: 0.0,
            gamma2: 0.0,
            rho: 6e-5,
            beta: 1.0,
            eta1: 0.05,
            eta2: 0.05,
            rounds: 800,
            edge_rounds: 20,
            inner_iters: 5,
            nu: 1e-6,
            batch_size: 20,
            edges_sampled: 4,
            edges: 4,
            clients_per_edge: 5,
            inner_step: None,
            fedprox_mu: 0.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let mut positive = |name: &str, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                p.push(format!("{name} must be positive, got {v}"));
            }
        };
        positive("lambda1", self.lambda1);
        positive("lambda2", self.lambda2);
        positive("rho", self.rho);
        positive("eta1", self.eta1);
        positive("eta2", self.eta2);
        positive("nu", self.nu);
        if let Some(step) = self.inner_step {
            positive("inner_step", step);
        }
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("fedprox_mu", self.fedprox_mu)] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) && self.beta != 0.0 {
            p.push(format!("beta must be in (0, 1], got {}", self.beta));
        }
        for (name, v) in [
            ("edge_rounds", self.edge_rounds),
            ("inner_iters", self.inner_iters),
            ("batch_size", self.batch_size),
            ("edges", self.edges),
            ("clients_per_edge", self.clients_per_edge),
        ] {
            if v == 0 {
                p.push(format!("{name} must be at least 1"));
            }
        }
        if self.edges_sampled == 0 || self.edges_sampled > self.edges {
            p.push(format!(
                "edges_sampled must be in 1..={}, got {}",
                self.edges, self.edges_sampled
            ));
        }
        if !p.is_empty() {
            return Err(Error::Config(p));
        }
        if self.beta == 0.0 {
            warn!("beta = 0 freezes the global model");
        }
        Ok(())
    }

    pub fn inner_config(&self) -> InnerSolveConfig {
        InnerSolveConfig {
            max_iters: self.inner_iters,
            tolerance: self.nu,
            step_size: self.inner_step.unwrap_or(self.eta1),
        }
    }

    pub fn total_clients(&self) -> usize {
        self.edges * self.clients_per_edge
    }

    /// `lambda1 * lambda2 / (lambda1 + lambda2)`.
    pub fn lambda_bar(&self) -> f64 {
        self.lambda1 * self.lambda2 / (self.lambda1 + self.lambda2)
    }
}

/// Penalty weights in force for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gammas {
    pub gamma1: f64,
    pub gamma2: f64,
}

/// A client's local learning problem.
#[derive(Debug, Clone)]
pub enum ClientTask {
    Supervised {
        spec: Arc<ModelSpec>,
        train: Shard,
        test: Shard,
    },
    /// `1/2 ||theta - target||^2`; no data, no sampling noise.
    Quadratic { target: ParamVector },
}

/// A loss drawn for one solve: either a sampled batch or a quadratic.
pub enum DrawnLoss {
    Batch { spec: Arc<ModelSpec>, batch: Batch },
    Quadratic { target: ParamVector },
}

impl LocalLoss for DrawnLoss {
    fn dim(&self) -> usize {
        match self {
            DrawnLoss::Batch { spec, .. } => crate::models::param_count(spec),
            DrawnLoss::Quadratic { target } => target.dim(),
        }
    }

    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        match self {
            DrawnLoss::Batch { spec, batch } => BatchLoss { spec, batch }.loss_and_grad(params),
            DrawnLoss::Quadratic { target } => QuadraticLoss { target }.loss_and_grad(params),
        }
    }
}

impl ClientTask {
    /// Mini-batch loss plus the shard positions that were drawn.
    pub fn draw<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<(Vec<usize>, DrawnLoss)> {
        match self {
            ClientTask::Supervised { spec, train, .. } => {
                let positions = sample_positions(train.len(), batch_size, rng)?;
                let batch = train.batch_at(&positions)?;
                Ok((
                    positions,
                    DrawnLoss::Batch {
                        spec: Arc::clone(spec),
                        batch,
                    },
                ))
            }
            ClientTask::Quadratic { target } => Ok((Vec::new(), DrawnLoss::Quadratic { target: target.clone() })),
        }
    }

    /// Loss at given shard positions (the full shard when `positions` is `None`).
    pub fn loss_at(&self, positions: Option<&[usize]>) -> Result<DrawnLoss> {
        match self {
            ClientTask::Supervised { spec, train, .. } => {
                let batch = match positions {
                    Some(p) => train.batch_at(p)?,
                    None => train.full_batch()?,
                };
                Ok(DrawnLoss::Batch {
                    spec: Arc::clone(spec),
                    batch,
                })
            }
            ClientTask::Quadratic { target } => Ok(DrawnLoss::Quadratic { target: target.clone() }),
        }
    }

    pub fn train_len(&self) -> usize {
        match self {
            ClientTask::Supervised { train, .. } => train.len(),
            ClientTask::Quadratic { .. } => 1,
        }
    }

    /// `(correct, total)` on the client's test shard.
    pub fn test_counts(&self, params: &ParamVector) -> Result<Option<(usize, usize)>> {
        match self {
            ClientTask::Supervised { spec, test, .. } => {
                // chunked so large shards never materialize at once
                let mut correct = 0;
                for chunk in test.indices.chunks(1024) {
                    let batch = test.data.batch(chunk)?;
                    correct += correct_count(spec, params, &batch)?;
                }
                Ok(Some((correct, test.len())))
            }
            ClientTask::Quadratic { .. } => Ok(None),
        }
    }
}

/// What a client's last inner solve saw; enough to recheck its optimality conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct LastSolve {
    pub prox_center: ParamVector,
    /// Edge model the local edge model was interpolated against.
    pub w_edge: ParamVector,
    pub batch_positions: Vec<usize>,
    pub gamma1: f64,
    pub converged: bool,
    pub grad_norm_sq: f64,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    /// Position in the global client order.
    pub gid: usize,
    pub task: Arc<ClientTask>,
    /// Personalized model (the local model for non-personalized baselines).
    pub theta: ParamVector,
    /// Local edge model.
    pub phi_local: ParamVector,
    pub last_solve: Option<LastSolve>,
}

impl ClientState {
    pub fn new(gid: usize, task: Arc<ClientTask>, init: &ParamVector) -> Self {
        ClientState {
            gid,
            task,
            theta: init.clone(),
            phi_local: init.clone(),
            last_solve: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EdgeState {
    pub w_edge: ParamVector,
    pub phi_edge: ParamVector,
    pub clients: Vec<ClientState>,
}

#[derive(Debug, Clone)]
pub struct CloudState {
    pub w: ParamVector,
    pub edges: Vec<EdgeState>,
    pub round: usize,
}

/// Client-cloud topology used by the flat baselines.
#[derive(Debug, Clone)]
pub struct FlatState {
    pub w: ParamVector,
    pub clients: Vec<ClientState>,
    pub round: usize,
}

#[derive(Debug, Clone)]
pub enum FederationState {
    Hierarchical(CloudState),
    Flat(FlatState),
}

impl FederationState {
    /// Builds the topology an algorithm expects from clients in global order.
    pub fn build(algorithm: Algorithm, tasks: &[Arc<ClientTask>], init: &ParamVector, hp: &HyperParams) -> Result<Self> {
        if tasks.len() != hp.total_clients() {
            return Err(Error::config(format!(
                "{} client tasks for {} edges x {} clients",
                tasks.len(),
                hp.edges,
                hp.clients_per_edge
            )));
        }
        let clients = tasks
            .iter()
            .enumerate()
            .map(|(gid, t)| ClientState::new(gid, Arc::clone(t), init));
        if algorithm.is_hierarchical() {
            let mut clients = clients.collect::<Vec<_>>().into_iter();
            let edges = (0..hp.edges)
                .map(|_| EdgeState {
                    w_edge: init.clone(),
                    phi_edge: init.clone(),
                    clients: clients.by_ref().take(hp.clients_per_edge).collect(),
                })
                .collect();
            Ok(FederationState::Hierarchical(CloudState {
                w: init.clone(),
                edges,
                round: 0,
            }))
        } else {
            Ok(FederationState::Flat(FlatState {
                w: init.clone(),
                clients: clients.collect(),
                round: 0,
            }))
        }
    }

    pub fn global(&self) -> &ParamVector {
        match self {
            FederationState::Hierarchical(c) => &c.w,
            FederationState::Flat(f) => &f.w,
        }
    }

    pub fn round(&self) -> usize {
        match self {
            FederationState::Hierarchical(c) => c.round,
            FederationState::Flat(f) => f.round,
        }
    }

    /// All clients in global order.
    pub fn clients(&self) -> Vec<&ClientState> {
        match self {
            FederationState::Hierarchical(c) => c.edges.iter().flat_map(|e| &e.clients).collect(),
            FederationState::Flat(f) => f.clients.iter().collect(),
        }
    }
}

/// Sorted sample of `k` distinct indices out of `n`.
pub(crate) fn sample_sorted<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Everything one round needs besides the state itself.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub hp: &'a HyperParams,
    pub gammas: Gammas,
    pub seed: u64,
    pub prox_center: ProxCenter,
    pub faithful_sampling: bool,
    pub exec: Execution,
    /// With sparse coding, entries below this magnitude never leave the
    /// sender, so the receiver aggregates zeros in their place.
    pub upload_threshold: Option<f64>,
}

impl RoundContext<'_> {
    pub(crate) fn transmit(&self, model: ParamVector) -> ParamVector {
        match self.upload_threshold {
            Some(eps) => crate::comms::threshold_for_transmission(&model, eps),
            None => model,
        }
    }
}

/// What left the edges (or flat clients) this round.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub sampled: Vec<usize>,
    pub uploads: Vec<ParamVector>,
    /// Client-to-edge uploads of local edge models this round.
    pub client_uploads: usize,
}
