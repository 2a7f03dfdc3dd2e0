//! Datasets, IDX files, label-shard partitioning and mini-batch sampling.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IdxError, Result};
use crate::math::ParamVector;
use crate::models::Batch;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Features scaled to `[0, 1]`, stored row-major in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, features: Array2<f32>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(LabeledDataset {
            name: name.into(),
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows of `other` appended after rows of `self`.
    pub fn concat(&self, other: &LabeledDataset, name: impl Into<String>) -> Result<Self> {
        if self.input_dim() != other.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: other.input_dim(),
            });
        }
        let features = ndarray::concatenate(ndarray::Axis(0), &[self.features.view(), other.features.view()])
            .expect("matching column counts");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        LabeledDataset::new(name, features, labels)
    }

    /// Materializes the given rows as a double-precision batch.
    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        let dim = self.input_dim();
        let mut feats = Array2::<f64>::zeros((rows.len(), dim));
        for (dst, &r) in feats.outer_iter_mut().zip(rows) {
            let src = self.features.row(r);
            for (d, s) in dst.into_iter().zip(src) {
                *d = f64::from(*s);
            }
        }
        Batch::new(feats, rows.iter().map(|&r| self.labels[r]).collect())
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn idx_err(path: &Path, kind: IdxError) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        kind,
    }
}

fn parse_header(path: &Path, bytes: &[u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, usize)> {
    let header_len = 4 + 4 * ndims;
    let found = read_u32(bytes, 0).ok_or_else(|| {
        idx_err(
            path,
            IdxError::Truncated {
                declared: header_len,
                found: bytes.len(),
            },
        )
    })?;
    if found != magic {
        return Err(idx_err(path, IdxError::BadMagic { expected: magic, found }));
    }
    let dims: Option<Vec<usize>> = (0..ndims).map(|k| read_u32(bytes, 4 + 4 * k).map(|v| v as usize)).collect();
    let dims = dims.ok_or_else(|| {
        idx_err(
            path,
            IdxError::Truncated {
                declared: header_len,
                found: bytes.len(),
            },
        )
    })?;
    let declared: usize = dims.iter().product();
    let payload = bytes.len() - header_len;
    if payload < declared {
        return Err(idx_err(path, IdxError::Truncated { declared, found: payload }));
    }
    Ok((dims, header_len))
}

/// Reads an IDX image file (`n x rows x cols` unsigned bytes) and its label file.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;

    let (idims, ioff) = parse_header(images_path, &images, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, loff) = parse_header(labels_path, &labels, IDX_LABELS_MAGIC, 1)?;
    let (n, dim) = (idims[0], idims[1] * idims[2]);
    if ldims[0] != n {
        return Err(idx_err(
            labels_path,
            IdxError::CountMismatch {
                images: n,
                labels: ldims[0],
            },
        ));
    }
    let pixels = &images[ioff..ioff + n * dim];
    let features = Array2::from_shape_vec((n, dim), pixels.iter().map(|&p| f32::from(p) / 255.0).collect())
        .expect("sized from header");
    let labels = labels[loff..loff + n].iter().map(|&l| l as usize).collect();
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |f| f.to_string_lossy().into_owned());
    LabeledDataset::new(name, features, labels)
}

/// Writes a dataset as IDX; pixels are `round(255 * x)`.
pub fn write_idx(data: &LabeledDataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let n = data.len();
    let dim = data.input_dim();
    let side = (dim as f64).sqrt() as usize;
    let (rows, cols) = if side * side == dim { (side, side) } else { (1, dim) };

    let mut img = Vec::with_capacity(16 + n * dim);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(data.features.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8));

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &data.labels {
        let byte = u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit in a byte")))?;
        lab.push(byte);
    }
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}

/// A subset of a shared dataset.
#[derive(Debug, Clone)]
pub struct Shard {
    pub data: Arc<LabeledDataset>,
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Every sample, in shard order.
    pub fn full_batch(&self) -> Result<Batch> {
        self.data.batch(&self.indices)
    }

    /// Samples at the given positions within the shard.
    pub fn batch_at(&self, positions: &[usize]) -> Result<Batch> {
        let rows: Vec<usize> = positions.iter().map(|&p| self.indices[p]).collect();
        self.data.batch(&rows)
    }

    pub fn distinct_labels(&self) -> Vec<usize> {
        let mut labels: Vec<usize> = self.indices.iter().map(|&i| self.data.labels[i]).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub labels_per_client: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Relative spread of per-client sample counts; 0 gives every client the same budget.
    #[serde(default = "default_jitter")]
    pub size_jitter: f64,
    pub seed: u64,
}

fn default_jitter() -> f64 {
    0.25
}

impl PartitionSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_clients == 0 {
            problems.push("num_clients must be positive".to_string());
        }
        if self.labels_per_client == 0 || self.labels_per_client > num_classes {
            problems.push(format!(
                "labels_per_client must be in 1..={num_classes}, got {}",
                self.labels_per_client
            ));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            problems.push("per-class train and test counts must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            problems.push(format!("size_jitter must be in [0, 1), got {}", self.size_jitter));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Stable digest of the spec, used to key partition caches.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let hash = Sha256::digest(&json);
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ClientShards {
    pub labels: Vec<usize>,
    pub train: Shard,
    pub test: Shard,
}

/// Index sets of a partition, as stored in the cache file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionIndices {
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Label-skewed split: every client sees `labels_per_client` classes.
///
/// Labels are dealt to clients cyclically from a seeded permutation, so each
/// class is used either floor or ceil of `clients * labels_per_client / C`
/// times. Samples are drawn without replacement from per-class pools, which
/// keeps every shard disjoint from every other.
pub fn partition_noniid(data: &Arc<LabeledDataset>, spec: &PartitionSpec) -> Result<Vec<ClientShards>> {
    let indices = partition_indices(data, spec)?;
    Ok(attach(data, indices))
}

fn attach(data: &Arc<LabeledDataset>, indices: Vec<PartitionIndices>) -> Vec<ClientShards> {
    indices
        .into_iter()
        .map(|p| ClientShards {
            labels: p.labels,
            train: Shard {
                data: Arc::clone(data),
                indices: p.train,
            },
            test: Shard {
                data: Arc::clone(data),
                indices: p.test,
            },
        })
        .collect()
}

pub fn partition_indices(data: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<PartitionIndices>> {
    let classes = data.num_classes;
    spec.validate(classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng);
    let client_labels: Vec<Vec<usize>> = (0..spec.num_clients)
        .map(|c| {
            (0..spec.labels_per_client)
                .map(|k| order[(c * spec.labels_per_client + k) % classes])
                .collect()
        })
        .collect();

    let scale = |base: usize, f: f64| ((base as f64 * f).round() as usize).max(1);
    let budgets: Vec<(usize, usize)> = (0..spec.num_clients)
        .map(|_| {
            if spec.size_jitter > 0.0 {
                let f = 1.0 + rng.gen_range(-spec.size_jitter..=spec.size_jitter);
                (scale(spec.train_per_class, f), scale(spec.test_per_class, f))
            } else {
                (spec.train_per_class, spec.test_per_class)
            }
        })
        .collect();

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in data.labels.iter().enumerate() {
        pools[y].push(i);
    }
    let mut demand = vec![0usize; classes];
    for (labels, &(tr, te)) in client_labels.iter().zip(&budgets) {
        for &y in labels {
            demand[y] += tr + te;
        }
    }
    for y in 0..classes {
        if demand[y] > pools[y].len() {
            return Err(Error::Capacity {
                class: y,
                needed: demand[y],
                available: pools[y].len(),
            });
        }
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let mut cursor = vec![0usize; classes];
    let mut take = |y: usize, k: usize| {
        let start = cursor[y];
        cursor[y] += k;
        pools[y][start..start + k].to_vec()
    };
    Ok(client_labels
        .into_iter()
        .zip(budgets)
        .map(|(labels, (tr, te))| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for &y in &labels {
                train.extend(take(y, tr));
                test.extend(take(y, te));
            }
            PartitionIndices { labels, train, test }
        })
        .collect())
}

/// Partition with an on-disk JSON cache keyed by dataset name and spec digest.
pub fn partition_cached(data: &Arc<LabeledDataset>, spec: &PartitionSpec, cache_dir: &Path) -> Result<Vec<ClientShards>> {
    let path = partition_cache_path(cache_dir, &data.name, spec);
    if let Ok(bytes) = fs::read(&path) {
        let indices: Vec<PartitionIndices> = serde_json::from_slice(&bytes)?;
        return Ok(attach(data, indices));
    }
    let indices = partition_indices(data, spec)?;
    fs::create_dir_all(cache_dir)?;
    fs::write(&path, serde_json::to_vec(&indices)?)?;
    Ok(attach(data, indices))
}

pub fn partition_cache_path(cache_dir: &Path, dataset: &str, spec: &PartitionSpec) -> PathBuf {
    cache_dir.join(format!("{dataset}-{}-seed{}.json", spec.digest(), spec.seed))
}

/// Positions drawn uniformly without replacement (with replacement when the
/// request exceeds the population).
pub fn sample_positions<R: Rng>(population: usize, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if population == 0 {
        return Err(Error::invalid("cannot sample from an empty shard"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if batch_size > population {
        warn!("batch size {batch_size} exceeds shard size {population}; sampling with replacement");
        return Ok((0..batch_size).map(|_| rng.gen_range(0..population)).collect());
    }
    Ok(rand::seq::index::sample(rng, population, batch_size).into_vec())
}

pub fn minibatch<R: Rng>(shard: &Shard, batch_size: usize, rng: &mut R) -> Result<Batch> {
    let positions = sample_positions(shard.len(), batch_size, rng)?;
    shard.batch_at(&positions)
}

/// Clients with losses `1/2 ||theta - a_k||^2`, so `mu = L = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFamily {
    pub targets: Vec<ParamVector>,
    /// Minimizer of the average loss.
    pub optimum: ParamVector,
}

impl QuadraticFamily {
    pub fn from_targets(targets: Vec<ParamVector>) -> Result<Self> {
        let first = targets.first().ok_or_else(|| Error::invalid("no targets"))?;
        for t in &targets {
            t.ensure_dim(first.dim())?;
        }
        let optimum = crate::math::mean_of(&targets);
        Ok(QuadraticFamily { targets, optimum })
    }

    pub fn dim(&self) -> usize {
        self.optimum.dim()
    }
}

/// Targets `a_k` scattered around a random center with `||a_k - center|| <= heterogeneity`
/// and mean exactly at the center.
pub fn synthetic_strongly_convex(dim: usize, clients: usize, heterogeneity: f64, seed: u64) -> Result<QuadraticFamily> {
    if dim == 0 || clients == 0 {
        return Err(Error::invalid("dimension and client count must be positive"));
    }
    if !(heterogeneity >= 0.0) {
        return Err(Error::invalid("heterogeneity must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut offsets: Vec<Vec<f64>> = (0..clients)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut mean = vec![0.0; dim];
    for o in &offsets {
        for (m, v) in mean.iter_mut().zip(o) {
            *m += v / clients as f64;
        }
    }
    let mut widest: f64 = 0.0;
    for o in &mut offsets {
        for (v, m) in o.iter_mut().zip(&mean) {
            *v -= m;
        }
        widest = widest.max(o.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let scale = if widest > 0.0 { heterogeneity / widest } else { 0.0 };
    let targets = offsets
        .iter()
        .map(|o| ParamVector::new(center.iter().zip(o).map(|(c, v)| c + scale * v).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuadraticFamily {
        targets,
        optimum: ParamVector::new(center)?,
    })
}

/// Gaussian class clusters clamped to `[0, 1]`; a small stand-in for image data.
pub fn synthetic_blobs(input_dim: usize, classes: usize, per_class: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if input_dim == 0 || classes == 0 || per_class == 0 {
        return Err(Error::invalid("synthetic blobs need positive sizes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..input_dim).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect();
    let n = classes * per_class;
    let mut features = Array2::<f32>::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    for (row, mut dst) in features.outer_iter_mut().enumerate() {
        let y = row % classes;
        for (d, c) in dst.iter_mut().zip(&centers[y]) {
            let z: f64 = rng.sample(StandardNormal);
            *d = (c + noise * z).clamp(0.0, 1.0) as f32;
        }
        labels.push(y);
    }
    LabeledDataset::new(format!("blobs-{input_dim}x{classes}-s{seed}"), features, labels)
}
