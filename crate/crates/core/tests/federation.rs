mod common;

use std::sync::Arc;

use common::{bits, blob_tasks, glorot, quadratic_tasks, small_hp};
use fedhier_core::federation::{
    aggregate, baseline_round, cloud_round, edge_update, run_training, sample_edges, Algorithm, ClientState, ClientTask,
    EdgeState, Execution, FederationState, Gammas, HyperParams, ProxCenter, RoundContext, TrainingConfig,
};
use fedhier_core::models::ModelSpec;
use fedhier_core::solver::{LocalLoss, QuadraticLoss};
use fedhier_core::theory::first_order_residuals;
use fedhier_core::{Error, ParamVector};

fn ctx(hp: &HyperParams, gammas: Gammas, seed: u64) -> RoundContext<'_> {
    RoundContext {
        hp,
        gammas,
        seed,
        prox_center: ProxCenter::Edge,
        faithful_sampling: false,
        exec: Execution::Sequential,
        upload_threshold: None,
    }
}

const NO_GAMMA: Gammas = Gammas { gamma1: 0.0, gamma2: 0.0 };

fn pv(v: &[f64]) -> ParamVector {
    ParamVector::new(v.to_vec()).unwrap()
}

fn quad_edge(targets: &[&[f64]], init: &ParamVector) -> EdgeState {
    EdgeState {
        w_edge: init.clone(),
        phi_edge: init.clone(),
        clients: targets
            .iter()
            .enumerate()
            .map(|(gid, t)| ClientState::new(gid, Arc::new(ClientTask::Quadratic { target: pv(t) }), init))
            .collect(),
    }
}

#[test]
fn edge_update_matches_straight_line_oracle() {
    let (l1, l2, eta) = (25.0, 25.0, 0.05);
    let hp = HyperParams {
        lambda1: l1,
        lambda2: l2,
        eta1: eta,
        edge_rounds: 1,
        inner_iters: 500,
        nu: 1e-24,
        inner_step: Some(0.03),
        edges: 1,
        clients_per_edge: 1,
        edges_sampled: 1,
        ..HyperParams::default()
    };
    let a = [1.0, -2.0, 0.5];
    let w = pv(&[0.2, 0.4, -0.6]);
    let mut edge = quad_edge(&[&a], &w);
    let got = edge_update(&mut edge, 0, &w, &ctx(&hp, NO_GAMMA, 1), 0).unwrap();

    for n in 0..3 {
        // theta = argmin 1/2 (t - a)^2 + l1/2 (t - w)^2 with the prox center at w
        let theta = (a[n] + l1 * w[n]) / (1.0 + l1);
        let phi = (l1 * theta + l2 * w[n]) / (l1 + l2);
        let expect = w[n] - eta * l2 * (w[n] - phi);
        assert!((got[n] - expect).abs() < 1e-10, "coordinate {n}: {} vs {expect}", got[n]);
    }
}

#[test]
fn vanishing_lambda2_leaves_edge_model_unchanged() {
    let hp = HyperParams {
        lambda2: 1e-300,
        edge_rounds: 4,
        edges: 1,
        clients_per_edge: 2,
        edges_sampled: 1,
        ..HyperParams::default()
    };
    let w = pv(&[0.3, -0.1]);
    let mut edge = quad_edge(&[&[1.0, 1.0], &[-2.0, 0.0]], &w);
    let got = edge_update(&mut edge, 0, &w, &ctx(&hp, NO_GAMMA, 3), 0).unwrap();
    assert_eq!(bits(&got), bits(&w));
}

#[test]
fn identical_clients_share_local_edge_models() {
    let spec = ModelSpec::mlr(6, 4, 0.0);
    let task = blob_tasks(2, &spec, 4).remove(0);
    let init = glorot(&spec, 1);
    let hp = small_hp(1, 3, 1);
    // full batches so differing per-client streams still see the same data
    let hp = HyperParams {
        batch_size: task.train_len(),
        ..hp
    };
    let mut edge = EdgeState {
        w_edge: init.clone(),
        phi_edge: init.clone(),
        clients: (0..3).map(|_| ClientState::new(0, Arc::clone(&task), &init)).collect(),
    };
    edge_update(&mut edge, 0, &init, &ctx(&hp, NO_GAMMA, 9), 0).unwrap();
    let first = bits(&edge.clients[0].phi_local);
    for c in &edge.clients {
        assert_eq!(bits(&c.phi_local), first);
    }
    // the mean of identical vectors can differ from them in the last bit
    for (m, x) in edge.phi_edge.as_slice().iter().zip(edge.clients[0].phi_local.as_slice()) {
        assert!((m - x).abs() <= 4.0 * f64::EPSILON * x.abs());
    }
}

#[test]
fn cloud_aggregation_cases() {
    let w = pv(&[1.0, 2.0]);
    let u = pv(&[3.0, -1.0]);
    let v = pv(&[5.0, 0.0]);
    assert_eq!(aggregate(&w, &[u.clone()], 1.0).unwrap(), u);
    assert_eq!(aggregate(&w, &[u.clone(), v.clone()], 0.0).unwrap(), w);
    assert_eq!(aggregate(&w, &[u, v], 1.0).unwrap(), pv(&[4.0, -0.5]));
    assert!(aggregate(&w, &[], 1.0).is_err());
}

#[test]
fn single_edge_full_mix_takes_edge_model() {
    let hp = HyperParams {
        edges: 1,
        clients_per_edge: 2,
        edges_sampled: 1,
        edge_rounds: 2,
        ..HyperParams::default()
    };
    let tasks = quadratic_tasks(3, 2, 5);
    let init = ParamVector::zeros(3);
    let FederationState::Hierarchical(mut cloud) = FederationState::build(Algorithm::Sfedhp, &tasks, &init, &hp).unwrap() else {
        panic!("hierarchical expected")
    };
    cloud_round(&mut cloud, &ctx(&hp, NO_GAMMA, 2)).unwrap();
    assert_eq!(cloud.w, cloud.edges[0].w_edge);
    assert_eq!(cloud.round, 1);
}

#[test]
fn oversampling_is_a_config_error() {
    assert!(matches!(sample_edges(0, 0, 3, 4), Err(Error::Config(_))));
    assert!(matches!(sample_edges(0, 0, 3, 0), Err(Error::Config(_))));
}

#[test]
fn edge_sampling_is_unbiased() {
    let n = 5;
    // edge models that differ by a few percent, as after a round from a shared start
    let outputs: Vec<ParamVector> = (0..n)
        .map(|i| pv(&[1.0 + 0.05 * i as f64, -2.0 + 0.03 * (i * i) as f64]))
        .collect();
    let w = ParamVector::zeros(2);
    let full = aggregate(&w, &outputs, 1.0).unwrap();
    let mut acc = [0.0; 2];
    let mut hits = vec![0usize; n];
    let draws = 10_000;
    for t in 0..draws {
        let s = sample_edges(17, t, n, 2).unwrap();
        assert!(s.windows(2).all(|p| p[0] < p[1]));
        for &i in &s {
            hits[i] += 1;
        }
        let picked: Vec<ParamVector> = s.iter().map(|&i| outputs[i].clone()).collect();
        let agg = aggregate(&w, &picked, 1.0).unwrap();
        acc[0] += agg[0] / draws as f64;
        acc[1] += agg[1] / draws as f64;
    }
    for k in 0..2 {
        let rel = (acc[k] - full[k]).abs() / full[k].abs();
        assert!(rel < 1e-3, "coordinate {k}: {} vs {} (rel {rel})", acc[k], full[k]);
    }
    // every edge is picked with probability S / N
    for h in hits {
        assert!((h as f64 / draws as f64 - 0.4).abs() < 0.02, "{h}");
    }
}

#[test]
fn pfedme_is_degenerate_sfedhp_bit_for_bit() {
    let spec = ModelSpec::mlp(6, vec![5], 4);
    let tasks = blob_tasks(6, &spec, 11);
    let init = glorot(&spec, 2);
    let hp = small_hp(6, 1, 3);
    let mut hier = FederationState::build(Algorithm::Sfedhp, &tasks, &init, &hp).unwrap();
    let mut flat = FederationState::build(Algorithm::Pfedme, &tasks, &init, &hp).unwrap();
    let c = ctx(&hp, NO_GAMMA, 21);
    for t in 0..15 {
        baseline_round(Algorithm::Sfedhp, &mut hier, &c).unwrap();
        baseline_round(Algorithm::Pfedme, &mut flat, &c).unwrap();
        assert_eq!(bits(hier.global()), bits(flat.global()), "round {t}");
    }
}

#[test]
fn fedavg_single_client_full_batch_is_centralized_gd() {
    let spec = ModelSpec::mlr(6, 4, 1e-3);
    let task = blob_tasks(2, &spec, 6).remove(0);
    let init = glorot(&spec, 3);
    let hp = HyperParams {
        batch_size: task.train_len(),
        ..small_hp(1, 1, 1)
    };
    let mut state = FederationState::build(Algorithm::Fedavg, &[Arc::clone(&task)], &init, &hp).unwrap();
    let full = task.loss_at(None).unwrap();
    let mut x = init.clone();
    let c = ctx(&hp, NO_GAMMA, 4);
    for _ in 0..5 {
        baseline_round(Algorithm::Fedavg, &mut state, &c).unwrap();
        for _ in 0..hp.edge_rounds * hp.inner_iters {
            let (_, g) = full.loss_and_grad(&x).unwrap();
            x = ParamVector::new(x.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a - hp.eta1 * b).collect()).unwrap();
        }
        let gap = state.global().dist_sq(&x).unwrap().sqrt();
        assert!(gap < 1e-12, "gap {gap}");
    }
}

#[test]
fn fedprox_without_pull_is_fedavg() {
    let spec = ModelSpec::mlr(6, 4, 0.0);
    let tasks = blob_tasks(4, &spec, 8);
    let init = glorot(&spec, 4);
    let hp = small_hp(2, 2, 1);
    assert_eq!(hp.fedprox_mu, 0.0);
    let mut a = FederationState::build(Algorithm::Fedavg, &tasks, &init, &hp).unwrap();
    let mut b = FederationState::build(Algorithm::Fedprox, &tasks, &init, &hp).unwrap();
    let c = ctx(&hp, NO_GAMMA, 5);
    for _ in 0..6 {
        baseline_round(Algorithm::Fedavg, &mut a, &c).unwrap();
        baseline_round(Algorithm::Fedprox, &mut b, &c).unwrap();
        assert_eq!(bits(a.global()), bits(b.global()));
    }
}

#[test]
fn topology_mismatch_is_rejected() {
    let tasks = quadratic_tasks(2, 4, 1);
    let hp = small_hp(2, 2, 1);
    let init = ParamVector::zeros(2);
    let mut flat = FederationState::build(Algorithm::Fedavg, &tasks, &init, &hp).unwrap();
    let mut hier = FederationState::build(Algorithm::Hierfavg, &tasks, &init, &hp).unwrap();
    let c = ctx(&hp, NO_GAMMA, 0);
    assert!(matches!(baseline_round(Algorithm::Hierfavg, &mut flat, &c), Err(Error::Config(_))));
    assert!(matches!(baseline_round(Algorithm::Pfedme, &mut hier, &c), Err(Error::Config(_))));
    assert!(FederationState::build(Algorithm::Sfedhp, &tasks[..3], &init, &hp).is_err());
}

#[test]
fn local_edge_models_satisfy_their_identity_every_round() {
    let spec = ModelSpec::mlp(6, vec![5], 4);
    let tasks = blob_tasks(6, &spec, 12);
    let init = glorot(&spec, 5);
    let hp = small_hp(3, 2, 3);
    let mut state = FederationState::build(Algorithm::Sfedhp, &tasks, &init, &hp).unwrap();
    let c = ctx(&hp, Gammas { gamma1: 1e-3, gamma2: 1e-3 }, 6);
    for _ in 0..5 {
        baseline_round(Algorithm::Sfedhp, &mut state, &c).unwrap();
        let res = first_order_residuals(&state, &hp).unwrap();
        assert_eq!(res.len(), 6);
        for r in res {
            assert!(r.r1 <= 1e-10 * init.dim() as f64, "client {}: r1 = {:e}", r.gid, r.r1);
            if r.converged {
                assert!(r.r2 <= hp.nu);
            }
        }
    }
}

#[test]
fn client_prox_center_changes_the_trajectory() {
    let tasks = quadratic_tasks(3, 4, 2);
    let init = ParamVector::zeros(3);
    let hp = small_hp(2, 2, 2);
    let mut a = FederationState::build(Algorithm::Sfedhp, &tasks, &init, &hp).unwrap();
    let mut b = a.clone();
    let ca = ctx(&hp, NO_GAMMA, 1);
    let cb = RoundContext {
        prox_center: ProxCenter::Client,
        ..ca
    };
    baseline_round(Algorithm::Sfedhp, &mut a, &ca).unwrap();
    baseline_round(Algorithm::Sfedhp, &mut b, &cb).unwrap();
    assert_ne!(bits(a.global()), bits(b.global()));
}

#[test]
fn faithful_sampling_agrees_on_the_first_round() {
    let spec = ModelSpec::mlr(6, 4, 0.0);
    let tasks = blob_tasks(6, &spec, 13);
    let init = glorot(&spec, 6);
    let hp = small_hp(3, 2, 1);
    let mut a = FederationState::build(Algorithm::Sfedhp, &tasks, &init, &hp).unwrap();
    let mut b = a.clone();
    let ca = ctx(&hp, NO_GAMMA, 7);
    let cb = RoundContext {
        faithful_sampling: true,
        ..ca
    };
    let oa = baseline_round(Algorithm::Sfedhp, &mut a, &ca).unwrap();
    let ob = baseline_round(Algorithm::Sfedhp, &mut b, &cb).unwrap();
    assert_eq!(oa.sampled, ob.sampled);
    assert_eq!(bits(a.global()), bits(b.global()));
    assert_eq!(ob.client_uploads, 3 * 2 * hp.edge_rounds);
}

#[test]
fn worker_count_does_not_change_results() {
    let spec = ModelSpec::mlp(6, vec![5], 4);
    let tasks = blob_tasks(6, &spec, 14);
    let init = glorot(&spec, 7);
    for algo in [Algorithm::Sfedhp, Algorithm::Hierfavg, Algorithm::Pfedme, Algorithm::Fedavg] {
        let mut cfg = TrainingConfig::new(algo, small_hp(3, 2, 2), 8);
        cfg.hp.rounds = 4;
        let one = run_training(&cfg, &tasks, &init).unwrap();
        cfg.workers = 4;
        let four = run_training(&cfg, &tasks, &init).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        one.log.write_csv(&mut a).unwrap();
        four.log.write_csv(&mut b).unwrap();
        assert_eq!(a, b, "{}", algo.name());
        assert_eq!(bits(one.state.global()), bits(four.state.global()));
    }
}

#[test]
fn divergence_reports_where_it_happened() {
    let hp = HyperParams {
        edges: 1,
        clients_per_edge: 1,
        edges_sampled: 1,
        eta1: 1e3,
        inner_step: Some(10.0),
        inner_iters: 50,
        nu: 1e-300,
        rounds: 50,
        ..HyperParams::default()
    };
    let tasks = quadratic_tasks(2, 1, 3);
    let mut cfg = TrainingConfig::new(Algorithm::Sfedhp, hp, 1);
    cfg.objective_iters = 0;
    match run_training(&cfg, &tasks, &ParamVector::zeros(2)) {
        Err(Error::Divergence(msg)) => assert!(msg.starts_with("round 0"), "{msg}"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn quadratic_loss_helper_is_consistent() {
    let t = pv(&[1.0, 2.0]);
    let (v, g) = QuadraticLoss { target: &t }.loss_and_grad(&pv(&[0.0, 0.0])).unwrap();
    assert_eq!(v, 2.5);
    assert_eq!(g.as_slice(), &[-1.0, -2.0]);
}
