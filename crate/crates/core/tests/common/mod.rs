#![allow(dead_code)]

use std::sync::Arc;

use fedhier_core::data::{partition_noniid, synthetic_blobs, synthetic_strongly_convex, PartitionSpec};
use fedhier_core::federation::{ClientTask, HyperParams};
use fedhier_core::models::{init_params, InitScheme, ModelSpec};
use fedhier_core::ParamVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Small labeled problem: `clients` two-label shards of 4-class blobs.
pub fn blob_tasks(clients: usize, spec: &ModelSpec, seed: u64) -> Vec<Arc<ClientTask>> {
    let data = Arc::new(synthetic_blobs(spec.input_dim, spec.num_classes, 200, 0.15, seed).unwrap());
    let part = PartitionSpec {
        num_clients: clients,
        labels_per_client: 2,
        train_per_class: 15,
        test_per_class: 10,
        size_jitter: 0.2,
        seed,
    };
    let shared = Arc::new(spec.clone());
    partition_noniid(&data, &part)
        .unwrap()
        .into_iter()
        .map(|s| {
            Arc::new(ClientTask::Supervised {
                spec: Arc::clone(&shared),
                train: s.train,
                test: s.test,
            })
        })
        .collect()
}

pub fn quadratic_tasks(dim: usize, clients: usize, seed: u64) -> Vec<Arc<ClientTask>> {
    synthetic_strongly_convex(dim, clients, 1.0, seed)
        .unwrap()
        .targets
        .into_iter()
        .map(|target| Arc::new(ClientTask::Quadratic { target }))
        .collect()
}

pub fn glorot(spec: &ModelSpec, seed: u64) -> ParamVector {
    init_params(spec, InitScheme::GlorotUniform, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn small_hp(edges: usize, clients_per_edge: usize, edges_sampled: usize) -> HyperParams {
    HyperParams {
        edges,
        clients_per_edge,
        edges_sampled,
        rounds: 10,
        edge_rounds: 3,
        inner_iters: 5,
        batch_size: 8,
        ..HyperParams::default()
    }
}

pub fn bits(w: &ParamVector) -> Vec<u64> {
    w.as_slice().iter().map(|v| v.to_bits()).collect()
}
