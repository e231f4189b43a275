use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingTable, InteractionDataset, UserRecord};
use crate::{rng, Error, Matrix, Result};

/// Cluster-to-cluster transition structure of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Transition {
    /// Rows drawn from a symmetric Dirichlet with this concentration.
    Dirichlet { concentration: f64 },
    Identity,
    /// A random permutation: each cluster always moves to one fixed cluster.
    Permutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub seq_len: usize,
    pub n_clusters: usize,
    /// Standard deviation of the per-item jitter around its cluster centroid.
    pub noise: f64,
    pub dim: usize,
    pub transition: Transition,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 64,
            seq_len: 8,
            n_clusters: 8,
            noise: 0.1,
            dim: 16,
            transition: Transition::Dirichlet { concentration: 0.5 },
            seed: 0,
        }
    }
}

pub struct SyntheticData {
    pub dataset: InteractionDataset,
    pub embeddings: EmbeddingTable<f64>,
    /// `true_conditionals[(prev, next)] = P(next item | previous item)`.
    pub true_conditionals: Matrix<f64>,
    pub cluster_of: Vec<usize>,
    pub transition: Matrix<f64>,
}

/// Items in latent clusters; sequences follow a first-order Markov chain over
/// clusters with the next item uniform inside its cluster. The exact
/// next-item conditional is returned alongside the data.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.n_items == 0 || cfg.n_clusters == 0 || cfg.n_users == 0 || cfg.dim == 0 {
        return Err(Error::invalid("synthetic config needs users, items, clusters and dim > 0"));
    }
    if cfg.n_clusters > cfg.n_items {
        return Err(Error::invalid(format!(
            "{} clusters cannot be populated by {} items",
            cfg.n_clusters, cfg.n_items
        )));
    }
    let (n, k) = (cfg.n_items, cfg.n_clusters);
    let mut rng = rng::stream(cfg.seed, &[0x5359_4e54]);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cluster_of = vec![0usize; n];
    for (j, &item) in order.iter().enumerate() {
        cluster_of[item] = j % k;
    }
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); k];
    for (item, &c) in cluster_of.iter().enumerate() {
        members[c].push(item as u32);
    }

    let mut transition = Matrix::zeros(k, k);
    match cfg.transition {
        Transition::Dirichlet { concentration } => {
            let gamma = Gamma::new(concentration, 1.0)
                .map_err(|e| Error::invalid(format!("dirichlet concentration: {e}")))?;
            for r in 0..k {
                let mut row: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
                let s: f64 = row.iter().sum();
                if s <= 0.0 {
                    row = vec![1.0; k];
                }
                let s: f64 = row.iter().sum();
                for (c, v) in row.into_iter().enumerate() {
                    transition.set(r, c, v / s);
                }
            }
        }
        Transition::Identity => {
            for r in 0..k {
                transition.set(r, r, 1.0);
            }
        }
        Transition::Permutation => {
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            for (r, &c) in perm.iter().enumerate() {
                transition.set(r, c, 1.0);
            }
        }
    }

    let mut centroids = Matrix::<f64>::zeros(k, cfg.dim);
    for x in centroids.data_mut() {
        *x = rng.sample(StandardNormal);
    }
    let mut vectors = Matrix::zeros(n, cfg.dim);
    for (item, &c) in cluster_of.iter().enumerate() {
        for d in 0..cfg.dim {
            let jitter: f64 = rng.sample(StandardNormal);
            vectors.set(item, d, centroids.get(c, d) + cfg.noise * jitter);
        }
    }

    let mut true_conditionals = Matrix::zeros(n, n);
    for (prev, &from) in cluster_of.iter().enumerate() {
        for (next, &to) in cluster_of.iter().enumerate() {
            true_conditionals.set(prev, next, transition.get(from, to) / members[to].len() as f64);
        }
    }

    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut items = Vec::with_capacity(cfg.seq_len);
        if cfg.seq_len > 0 {
            let mut cur = rng.random_range(0..n) as u32;
            items.push(cur);
            for _ in 1..cfg.seq_len {
                let from = cluster_of[cur as usize];
                let draw: f64 = rng.random();
                let mut acc = 0.0;
                let mut to = k - 1;
                for c in 0..k {
                    acc += transition.get(from, c);
                    if draw < acc {
                        to = c;
                        break;
                    }
                }
                let pool = &members[to];
                cur = pool[rng.random_range(0..pool.len())];
                items.push(cur);
            }
        }
        users.push(UserRecord { user: u as u32, items });
    }

    Ok(SyntheticData {
        dataset: InteractionDataset {
            users,
            item_count: n,
            max_len: None,
        },
        embeddings: EmbeddingTable::new(vectors)?,
        true_conditionals,
        cluster_of,
        transition,
    })
}
