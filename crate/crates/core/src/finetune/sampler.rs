use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synth::ClickEvent;

/// A clicked (query, product) pair; the fine-tuning unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrainPair {
    pub query_id: u32,
    pub product_id: u32,
}

/// Distinct clicked pairs, ascending.
pub fn training_pairs(clicks: &[ClickEvent]) -> Vec<TrainPair> {
    let set: BTreeSet<TrainPair> = clicks
        .iter()
        .map(|c| TrainPair {
            query_id: c.query_id,
            product_id: c.product_id,
        })
        .collect();
    set.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub id: usize,
    /// Members grouped by product category.
    pub clusters: BTreeMap<usize, Vec<TrainPair>>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.clusters.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn members(&self) -> impl Iterator<Item = &TrainPair> {
        self.clusters.values().flatten()
    }

    pub fn distinct_queries(&self) -> usize {
        self.members().map(|p| p.query_id).collect::<HashSet<_>>().len()
    }
}

/// Splits the pairs into `p` equal-size partitions (sizes differ by at most
/// one). Categories are visited in a random order with their members
/// shuffled, and consecutive runs of that sequence form the partitions, so a
/// partition covers about `categories / p` categories: more partitions means
/// fewer categories per batch and more same-category negatives.
pub fn partition_dataset(
    pairs: &[TrainPair],
    category_of: impl Fn(u32) -> usize,
    p: usize,
    seed: u64,
) -> Result<Vec<Partition>> {
    if p == 0 {
        return Err(Error::config("finetune.partitions", "must be at least 1"));
    }
    if p > pairs.len() {
        return Err(Error::config(
            "finetune.partitions",
            format!("{p} partitions for only {} training pairs", pairs.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_cat: BTreeMap<usize, Vec<TrainPair>> = BTreeMap::new();
    for pair in pairs {
        by_cat.entry(category_of(pair.product_id)).or_default().push(*pair);
    }
    let mut cats: Vec<Vec<TrainPair>> = by_cat.into_values().collect();
    cats.shuffle(&mut rng);
    let mut order = Vec::with_capacity(pairs.len());
    for mut c in cats {
        c.shuffle(&mut rng);
        order.extend(c);
    }
    let n = order.len();
    let mut out = Vec::with_capacity(p);
    for id in 0..p {
        let (lo, hi) = (id * n / p, (id + 1) * n / p);
        let mut clusters: BTreeMap<usize, Vec<TrainPair>> = BTreeMap::new();
        for pair in &order[lo..hi] {
            clusters.entry(category_of(pair.product_id)).or_default().push(*pair);
        }
        out.push(Partition { id, clusters });
    }
    Ok(out)
}

/// Draws `w` pairs with distinct queries, uniformly from one partition chosen
/// uniformly among those able to fill a batch.
pub fn sample_batch(partitions: &[Partition], w: usize, rng: &mut impl Rng) -> Result<Vec<TrainPair>> {
    let eligible: Vec<&Partition> = partitions.iter().filter(|p| p.distinct_queries() >= w).collect();
    if eligible.is_empty() || w == 0 {
        return Err(Error::Invalid(format!(
            "no partition holds {w} distinct queries; use a smaller batch size or fewer partitions"
        )));
    }
    let part = eligible[rng.random_range(0..eligible.len())];
    let mut members: Vec<&TrainPair> = part.members().collect();
    members.shuffle(rng);
    let mut seen = HashSet::with_capacity(w);
    let mut batch = Vec::with_capacity(w);
    for m in members {
        if seen.insert(m.query_id) {
            batch.push(*m);
            if batch.len() == w {
                break;
            }
        }
    }
    Ok(batch)
}

/// Fraction of in-batch negatives (ordered pairs `i != j`) whose product
/// shares the positive's category.
pub fn hard_negative_fraction(batch: &[TrainPair], category_of: impl Fn(u32) -> usize) -> f64 {
    let w = batch.len();
    if w < 2 {
        return 0.0;
    }
    let cats: Vec<usize> = batch.iter().map(|p| category_of(p.product_id)).collect();
    let mut hard = 0usize;
    for i in 0..w {
        for j in 0..w {
            if i != j && cats[i] == cats[j] {
                hard += 1;
            }
        }
    }
    hard as f64 / (w * (w - 1)) as f64
}
