//! Reference algorithms: pFedMe and FedAvg/FedProx on a client-cloud topology,
//! and HierFAVG on the client-edge-cloud topology.

use rand_chacha::ChaCha8Rng;

use super::sfedhp::{aggregate, hierarchical_round, sample_edges};
use super::{Algorithm, ClientState, ClientTask, EdgeState, FederationState, FlatState, RoundContext, RoundOutput};
use crate::error::{Error, Result};
use crate::math::{mean_of, ParamVector};
use crate::rng::{stream, Purpose};
use crate::solver::{closed_form_edge_model, solve_personalized, LocalLoss, ProxTerms};

/// `steps` plain mini-batch SGD steps from `start`. With `anchor = Some((w, mu))`
/// the gradient gains the FedProx term `mu * (x - w)`.
fn local_sgd(
    task: &ClientTask,
    start: &ParamVector,
    anchor: Option<(&ParamVector, f64)>,
    steps: usize,
    eta: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParamVector> {
    let mut x = start.clone();
    for step in 0..steps {
        let (_, loss) = task.draw(batch_size, rng)?;
        let (_, mut g) = loss.loss_and_grad(&x)?;
        if let Some((w, mu)) = anchor {
            for ((gv, &xv), &wv) in g.as_mut_slice().iter_mut().zip(x.as_slice()).zip(w.as_slice()) {
                *gv += mu * (xv - wv);
            }
        }
        x.axpy(-eta, &g);
        if let Some(n) = x.first_non_finite() {
            return Err(Error::Divergence(format!("local step {step}: entry {n} is not finite")));
        }
    }
    Ok(x)
}

/// FedAvg (or FedProx when `mu` is given) local training: `R * K` SGD steps
/// from the global model. The result becomes the client's local model.
pub fn fedavg_local(client: &mut ClientState, w: &ParamVector, ctx: &RoundContext<'_>, round: usize, mu: Option<f64>) -> Result<ParamVector> {
    let hp = ctx.hp;
    let mut rng = stream(ctx.seed, Purpose::Minibatch, round as u64, client.gid as u64);
    let anchor = mu.map(|m| (w, m));
    let x = local_sgd(
        &client.task,
        w,
        anchor,
        hp.edge_rounds * hp.inner_iters,
        hp.eta1,
        hp.batch_size,
        &mut rng,
    )?;
    client.theta = x.clone();
    client.phi_local = x.clone();
    Ok(x)
}

/// pFedMe local rounds: the sparse hierarchical client/edge update with the
/// edge tier collapsed onto one client and both penalties off.
fn pfedme_local(client: &mut ClientState, w: &ParamVector, ctx: &RoundContext<'_>, round: usize) -> Result<ParamVector> {
    let hp = ctx.hp;
    let cfg = hp.inner_config();
    let terms = ProxTerms {
        lambda1: hp.lambda1,
        gamma1: 0.0,
        rho: hp.rho,
    };
    let mut rng = stream(ctx.seed, Purpose::Minibatch, round as u64, client.gid as u64);
    let mut w_loc = w.clone();
    let mut center = w.clone();
    for r in 0..hp.edge_rounds {
        let (_, loss) = client.task.draw(hp.batch_size, &mut rng)?;
        let report = solve_personalized(&center, &loss, terms, &cfg, &client.theta)
            .map_err(|e| e.context(format!("local round {r}")))?;
        client.phi_local = closed_form_edge_model(&report.theta, &w_loc, hp.lambda1, hp.lambda2)?;
        client.theta = report.theta;
        center = client.phi_local.clone();
        for (x, &c) in w_loc.as_mut_slice().iter_mut().zip(center.as_slice()) {
            *x -= hp.eta1 * (hp.lambda2 * (*x - c));
        }
        if let Some(n) = w_loc.first_non_finite() {
            return Err(Error::Divergence(format!("local round {r}: entry {n} is not finite")));
        }
    }
    Ok(w_loc)
}

fn flat_round<F>(state: &mut FlatState, ctx: &RoundContext<'_>, local: F) -> Result<RoundOutput>
where
    F: Fn(&mut ClientState, &ParamVector, usize) -> Result<ParamVector> + Sync + Send,
{
    let hp = ctx.hp;
    let t = state.round;
    let sampled = sample_edges(ctx.seed, t, state.clients.len(), hp.edges_sampled * hp.clients_per_edge)?;
    let w = state.w.clone();
    let mut active: Vec<(usize, &mut ClientState)> = state
        .clients
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| ctx.faithful_sampling || sampled.binary_search(i).is_ok())
        .collect();
    let results = ctx.exec.map_mut(&mut active, |_, (_, c)| local(c, &w, t));
    let mut uploads = Vec::with_capacity(sampled.len());
    for ((i, _), res) in active.iter().zip(results) {
        let x = res.map_err(|e| e.context(format!("client {i}")))?;
        if sampled.binary_search(i).is_ok() {
            uploads.push(ctx.transmit(x));
        }
    }
    state.w = aggregate(&state.w, &uploads, hp.beta)?;
    state.round += 1;
    Ok(RoundOutput {
        sampled,
        uploads,
        client_uploads: 0,
    })
}

pub fn pfedme_round(state: &mut FlatState, ctx: &RoundContext<'_>) -> Result<RoundOutput> {
    flat_round(state, ctx, |c, w, t| pfedme_local(c, w, ctx, t))
}

fn hierfavg_edge(edge: &mut EdgeState, edge_index: usize, w: &ParamVector, ctx: &RoundContext<'_>, round: usize) -> Result<ParamVector> {
    let hp = ctx.hp;
    let mut workers: Vec<(&mut ClientState, ChaCha8Rng)> = edge
        .clients
        .iter_mut()
        .map(|c| {
            let rng = stream(ctx.seed, Purpose::Minibatch, round as u64, c.gid as u64);
            (c, rng)
        })
        .collect();
    let mut w_e = w.clone();
    for r in 0..hp.edge_rounds {
        let results = ctx.exec.map_mut(&mut workers, |_, (client, rng)| -> Result<()> {
            let x = local_sgd(&client.task, &w_e, None, hp.inner_iters, hp.eta1, hp.batch_size, rng)?;
            client.theta = x.clone();
            client.phi_local = x;
            Ok(())
        });
        for (j, res) in results.into_iter().enumerate() {
            res.map_err(|e| e.context(format!("edge {edge_index}, edge round {r}, client {j}")))?;
        }
        w_e = mean_of(workers.iter().map(|(c, _)| &c.theta));
    }
    edge.w_edge = w_e.clone();
    edge.phi_edge = w_e.clone();
    Ok(w_e)
}

/// HierFAVG: each edge runs `R` aggregations of `K` local SGD steps per client.
pub fn hierfavg_round(cloud: &mut super::CloudState, ctx: &RoundContext<'_>) -> Result<RoundOutput> {
    hierarchical_round(cloud, ctx, hierfavg_edge)
}

/// Dispatches one round of any algorithm on a matching topology.
pub fn baseline_round(algorithm: Algorithm, state: &mut FederationState, ctx: &RoundContext<'_>) -> Result<RoundOutput> {
    match (algorithm, state) {
        (Algorithm::Sfedhp, FederationState::Hierarchical(c)) => super::cloud_round(c, ctx),
        (Algorithm::Hierfavg, FederationState::Hierarchical(c)) => hierfavg_round(c, ctx),
        (Algorithm::Pfedme, FederationState::Flat(f)) => pfedme_round(f, ctx),
        (Algorithm::Fedavg, FederationState::Flat(f)) => flat_round(f, ctx, |c, w, t| fedavg_local(c, w, ctx, t, None)),
        (Algorithm::Fedprox, FederationState::Flat(f)) => {
            let mu = ctx.hp.fedprox_mu;
            flat_round(f, ctx, |c, w, t| fedavg_local(c, w, ctx, t, Some(mu)))
        }
        (algorithm, _) => Err(Error::config(format!(
            "{} does not run on this topology",
            algorithm.name()
        ))),
    }
}
