use rand_chacha::ChaCha8Rng;

use super::{sample_sorted, CloudState, ClientState, EdgeState, LastSolve, ProxCenter, RoundContext, RoundOutput};
use crate::error::{Error, Result};
use crate::math::{mean_of, ParamVector};
use crate::rng::{stream, Purpose};
use crate::solver::{closed_form_edge_model, solve_personalized, ProxTerms};

/// `S` distinct edge indices in ascending order, drawn from the round's sampling stream.
pub fn sample_edges(seed: u64, round: usize, n: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || s > n {
        return Err(Error::config(format!("cannot sample {s} of {n} edges")));
    }
    let mut rng = stream(seed, Purpose::EdgeSampling, round as u64, 0);
    Ok(sample_sorted(n, s, &mut rng))
}

/// `(1 - beta) * w + beta / S * sum(uploads)`, summing uploads in the given order.
pub fn aggregate(w: &ParamVector, uploads: &[ParamVector], beta: f64) -> Result<ParamVector> {
    let Some(first) = uploads.first() else {
        return Err(Error::invalid("aggregate of zero uploads"));
    };
    let mut sum = vec![0.0; first.dim()];
    for u in uploads {
        u.ensure_dim(w.dim())?;
        for (s, v) in sum.iter_mut().zip(u.as_slice()) {
            *s += v;
        }
    }
    let keep = 1.0 - beta;
    let scale = beta / uploads.len() as f64;
    let out = ParamVector::from_vec_unchecked(
        w.as_slice()
            .iter()
            .zip(&sum)
            .map(|(wv, sv)| keep * wv + scale * sv)
            .collect(),
    );
    if let Some(n) = out.first_non_finite() {
        return Err(Error::Divergence(format!("aggregated global model entry {n} is not finite")));
    }
    Ok(out)
}

/// One edge's `R` rounds with its clients, starting from the global model.
/// Updates the clients' personalized and local edge models in place and
/// returns the edge model to upload.
pub fn edge_update(
    edge: &mut EdgeState,
    edge_index: usize,
    w_global: &ParamVector,
    ctx: &RoundContext<'_>,
    round: usize,
) -> Result<ParamVector> {
    let hp = ctx.hp;
    let cfg = hp.inner_config();
    let terms = ProxTerms {
        lambda1: hp.lambda1,
        gamma1: ctx.gammas.gamma1,
        rho: hp.rho,
    };
    let (lambda2, gamma2, eta1) = (hp.lambda2, ctx.gammas.gamma2, hp.eta1);
    let inv_rho = 1.0 / hp.rho;

    let mut w_i = w_global.clone();
    let mut phi_i = w_global.clone();
    let mut workers: Vec<(&mut ClientState, ChaCha8Rng)> = edge
        .clients
        .iter_mut()
        .map(|c| {
            c.phi_local = w_global.clone();
            let rng = stream(ctx.seed, Purpose::Minibatch, round as u64, c.gid as u64);
            (c, rng)
        })
        .collect();

    for r in 0..hp.edge_rounds {
        let last = r + 1 == hp.edge_rounds;
        let results = ctx.exec.map_mut(&mut workers, |_, (client, rng)| -> Result<()> {
            let (positions, loss) = client.task.draw(hp.batch_size, rng)?;
            let own_center;
            let center = match ctx.prox_center {
                ProxCenter::Edge => &phi_i,
                ProxCenter::Client => {
                    own_center = client.phi_local.clone();
                    &own_center
                }
            };
            let report = solve_personalized(center, &loss, terms, &cfg, &client.theta)?;
            client.phi_local = closed_form_edge_model(&report.theta, &w_i, hp.lambda1, lambda2)?;
            if last {
                client.last_solve = Some(LastSolve {
                    prox_center: center.clone(),
                    w_edge: w_i.clone(),
                    batch_positions: positions,
                    gamma1: terms.gamma1,
                    converged: report.converged,
                    grad_norm_sq: report.final_grad_norm_sq,
                });
            }
            client.theta = report.theta;
            Ok(())
        });
        for (j, res) in results.into_iter().enumerate() {
            res.map_err(|e| e.context(format!("edge {edge_index}, edge round {r}, client {j}")))?;
        }

        phi_i = mean_of(workers.iter().map(|(c, _)| &c.phi_local));
        for (w, &phi) in w_i.as_mut_slice().iter_mut().zip(phi_i.as_slice()) {
            let mut step = lambda2 * (*w - phi);
            if gamma2 != 0.0 {
                step += gamma2 * (*w * inv_rho).tanh();
            }
            *w -= eta1 * step;
        }
        if let Some(n) = w_i.first_non_finite() {
            return Err(Error::Divergence(format!(
                "edge {edge_index}, edge round {r}: edge model entry {n} is not finite"
            )));
        }
    }
    edge.w_edge = w_i.clone();
    edge.phi_edge = phi_i;
    Ok(w_i)
}

/// One global round: sample edges, run their updates, mix the uploads into `w`.
pub fn cloud_round(cloud: &mut CloudState, ctx: &RoundContext<'_>) -> Result<RoundOutput> {
    hierarchical_round(cloud, ctx, edge_update)
}

pub(super) fn hierarchical_round<F>(cloud: &mut CloudState, ctx: &RoundContext<'_>, edge_fn: F) -> Result<RoundOutput>
where
    F: Fn(&mut EdgeState, usize, &ParamVector, &RoundContext<'_>, usize) -> Result<ParamVector> + Sync + Send,
{
    let hp = ctx.hp;
    let t = cloud.round;
    let sampled = sample_edges(ctx.seed, t, cloud.edges.len(), hp.edges_sampled)?;
    let w = cloud.w.clone();
    let mut active: Vec<(usize, &mut EdgeState)> = cloud
        .edges
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| ctx.faithful_sampling || sampled.binary_search(i).is_ok())
        .collect();
    let client_uploads: usize = active.iter().map(|(_, e)| e.clients.len() * hp.edge_rounds).sum();
    let results = ctx.exec.map_mut(&mut active, |_, (i, edge)| edge_fn(edge, *i, &w, ctx, t));

    let mut uploads = Vec::with_capacity(sampled.len());
    for ((i, _), res) in active.iter().zip(results) {
        let w_i = res?;
        if sampled.binary_search(i).is_ok() {
            uploads.push(ctx.transmit(w_i));
        }
    }
    cloud.w = aggregate(&cloud.w, &uploads, hp.beta)?;
    cloud.round += 1;
    Ok(RoundOutput {
        sampled,
        uploads,
        client_uploads,
    })
}
