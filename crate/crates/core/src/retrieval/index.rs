use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const KMEANS_ITERATIONS: usize = 20;
pub const NORM_TOLERANCE: f32 = 1e-4;

/// Coarse quantizer: centroids and the row indices assigned to each.
#[derive(Clone, Debug, PartialEq)]
pub struct Clusters {
    pub centroids: Vec<Vec<f32>>,
    pub members: Vec<Vec<usize>>,
}

/// Immutable id -> unit-vector table with exact and clustered search.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<u32>,
    dim: usize,
    vectors: Vec<f32>,
    clusters: Option<Clusters>,
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn by_score(a: &(u32, f32), b: &(u32, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `k` best of `scored`, descending score then ascending id.
fn top_k(mut scored: Vec<(u32, f32)>, k: usize) -> Vec<(u32, f32)> {
    if k < scored.len() {
        scored.select_nth_unstable_by(k, by_score);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_score);
    scored
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<u32>, rows: &[Vec<f32>]) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::Invalid(format!("{} ids for {} vectors", ids.len(), rows.len())));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut seen = HashSet::with_capacity(ids.len());
        let mut vectors = Vec::with_capacity(ids.len() * dim);
        for (id, r) in ids.iter().zip(rows) {
            if !seen.insert(*id) {
                return Err(Error::Invalid(format!("duplicate id {id} in index")));
            }
            if r.len() != dim {
                return Err(Error::Shape {
                    op: "index row",
                    lhs: vec![r.len()],
                    rhs: vec![dim],
                });
            }
            let n = dot(r, r).sqrt();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Invalid(format!("vector for id {id} has norm {n}")));
            }
            vectors.extend_from_slice(r);
        }
        Ok(EmbeddingIndex {
            ids,
            dim,
            vectors,
            clusters: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn clusters(&self) -> Option<&Clusters> {
        self.clusters.as_ref()
    }

    fn check_query(&self, query: &[f32], k: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Invalid("search on an empty index".into()));
        }
        if query.len() != self.dim {
            return Err(Error::Shape {
                op: "index query",
                lhs: vec![query.len()],
                rhs: vec![self.dim],
            });
        }
        if k > self.len() {
            return Err(Error::Invalid(format!("k = {k} exceeds index size {}", self.len())));
        }
        Ok(())
    }

    /// Ids and cosine scores of the `k` nearest vectors, best first, ties by
    /// ascending id.
    pub fn exact_topk(&self, query: &[f32], k: usize) -> Result<Vec<(u32, f32)>> {
        self.check_query(query, k)?;
        let scored = (0..self.len()).map(|r| (self.ids[r], dot(self.vector(r), query))).collect();
        Ok(top_k(scored, k))
    }

    /// Plain k-means with `clusters` centroids initialised from distinct
    /// rows; runs a fixed number of Lloyd iterations.
    pub fn build_clusters(&mut self, clusters: usize, seed: u64) -> Result<()> {
        if clusters == 0 || clusters > self.len() {
            return Err(Error::config(
                "retrieval.clusters",
                format!("must be in 1..={}", self.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim;
        let mut centroids: Vec<Vec<f32>> = sample(&mut rng, self.len(), clusters)
            .into_iter()
            .map(|r| self.vector(r).to_vec())
            .collect();
        let mut assign = vec![0usize; self.len()];
        for _ in 0..KMEANS_ITERATIONS {
            for (r, a) in assign.iter_mut().enumerate() {
                *a = nearest(&centroids, self.vector(r));
            }
            let mut sums = vec![vec![0f64; d]; clusters];
            let mut counts = vec![0usize; clusters];
            for (r, &a) in assign.iter().enumerate() {
                counts[a] += 1;
                for (s, v) in sums[a].iter_mut().zip(self.vector(r)) {
                    *s += *v as f64;
                }
            }
            for c in 0..clusters {
                if counts[c] > 0 {
                    centroids[c] = sums[c].iter().map(|s| (*s / counts[c] as f64) as f32).collect();
                }
            }
        }
        for (r, a) in assign.iter_mut().enumerate() {
            *a = nearest(&centroids, self.vector(r));
        }
        let mut members = vec![Vec::new(); clusters];
        for (r, &a) in assign.iter().enumerate() {
            members[a].push(r);
        }
        self.clusters = Some(Clusters { centroids, members });
        Ok(())
    }

    /// Scans only the `probes` clusters whose centroids are closest to the
    /// query; returns up to `k` results ranked as in [`exact_topk`](Self::exact_topk).
    pub fn approx_topk(&self, query: &[f32], k: usize, probes: usize) -> Result<Vec<(u32, f32)>> {
        self.check_query(query, k)?;
        let cl = self
            .clusters
            .as_ref()
            .ok_or_else(|| Error::Invalid("index has no clusters; build them or use exact_topk".into()))?;
        if probes == 0 || probes > cl.centroids.len() {
            return Err(Error::config(
                "retrieval.probes",
                format!("must be in 1..={}", cl.centroids.len()),
            ));
        }
        let mut order: Vec<(usize, f32)> = cl
            .centroids
            .iter()
            .enumerate()
            .map(|(c, v)| (c, sq_dist(v, query)))
            .collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let scored: Vec<(u32, f32)> = order[..probes]
            .iter()
            .flat_map(|(c, _)| cl.members[*c].iter())
            .map(|&r| (self.ids[r], dot(self.vector(r), query)))
            .collect();
        Ok(top_k(scored, k))
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f32>], v: &[f32]) -> usize {
    let mut best = (0, f32::INFINITY);
    for (c, cv) in centroids.iter().enumerate() {
        let d = sq_dist(cv, v);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}
