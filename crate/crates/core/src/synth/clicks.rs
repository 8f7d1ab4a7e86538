use std::collections::HashSet;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::ProductRecord;
use super::vocab::Vocab;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: u32,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub query_id: u32,
    pub product_id: u32,
    pub timestamp: u64,
    pub click_count: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClickConfig {
    pub queries: usize,
    pub events: usize,
    pub noise_rate: f64,
    /// Exponent of the Zipf law over query popularity.
    pub query_skew: f64,
    /// Exponent of the Zipf law over each query's preferred products.
    pub product_skew: f64,
    /// Length of the simulated log in seconds.
    pub span_secs: u64,
}

impl Default for ClickConfig {
    fn default() -> Self {
        ClickConfig {
            queries: 500,
            events: 20_000,
            noise_rate: 0.1,
            query_skew: 1.0,
            product_skew: 1.0,
            span_secs: 30 * 86_400,
        }
    }
}

/// Products whose true attributes contain every query token.
pub fn relevant_products(catalog: &[ProductRecord], tokens: &[u32], vocab: &Vocab) -> Vec<u32> {
    catalog
        .iter()
        .filter(|p| {
            let attrs = p.attributes.query_tokens(vocab);
            tokens.iter().all(|t| attrs.contains(t))
        })
        .map(|p| p.product_id)
        .collect()
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(s)).collect()
}

/// Distinct 1-3 token queries, each a subset of some product's category,
/// colour, shape and size words.
fn gen_queries(catalog: &[ProductRecord], n: usize, vocab: &Vocab, rng: &mut impl Rng) -> Vec<QueryRecord> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < n * 200 {
        attempts += 1;
        let p = catalog.choose(rng).expect("nonempty catalog");
        let k = *[1usize, 2, 2, 3, 3].choose(rng).expect("nonempty");
        let mut slots = [0usize, 1, 2, 3];
        slots.shuffle(rng);
        let mut chosen = slots[..k].to_vec();
        chosen.sort_unstable();
        let all = p.attributes.query_tokens(vocab);
        let tokens: Vec<u32> = chosen.iter().map(|s| all[*s]).collect();
        if seen.insert(tokens.clone()) {
            out.push(QueryRecord {
                query_id: out.len() as u32,
                tokens,
            });
        }
    }
    if out.len() < n {
        warn!("only {} distinct queries available, {} requested", out.len(), n);
    }
    out
}

/// Queries and a time-ordered click log. Query popularity is Zipf; each click
/// goes to a relevant product under a per-query Zipf preference, except that
/// with probability `noise_rate` it is redirected to a uniform random product.
pub fn gen_click_log(
    catalog: &[ProductRecord],
    cfg: &ClickConfig,
    seed: u64,
) -> Result<(Vec<QueryRecord>, Vec<ClickEvent>)> {
    if catalog.is_empty() {
        return Err(Error::Invalid("click simulation needs a nonempty catalog".into()));
    }
    if !(0.0..0.5).contains(&cfg.noise_rate) {
        return Err(Error::config("data.clicks.noise_rate", "must be in [0, 0.5)"));
    }
    if cfg.queries == 0 {
        return Err(Error::config("data.clicks.queries", "must be positive"));
    }
    let vocab = Vocab::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries = gen_queries(catalog, cfg.queries, &vocab, &mut rng);

    let mut popularity: Vec<usize> = (0..queries.len()).collect();
    popularity.shuffle(&mut rng);
    let query_dist = WeightedIndex::new(zipf_weights(queries.len(), cfg.query_skew)).expect("positive weights");

    let preferences: Vec<(Vec<u32>, WeightedIndex<f64>)> = queries
        .iter()
        .map(|q| {
            let mut rel = relevant_products(catalog, &q.tokens, &vocab);
            rel.shuffle(&mut rng);
            let dist = WeightedIndex::new(zipf_weights(rel.len(), cfg.product_skew)).expect("nonempty relevant set");
            (rel, dist)
        })
        .collect();

    let mut events: Vec<ClickEvent> = (0..cfg.events)
        .map(|_| {
            let qi = popularity[query_dist.sample(&mut rng)];
            let (rel, dist) = &preferences[qi];
            let product_id = if rng.random_bool(cfg.noise_rate) {
                rng.random_range(0..catalog.len()) as u32
            } else {
                rel[dist.sample(&mut rng)]
            };
            let click_count = match rng.random_range(0..10) {
                0 => 3,
                1 | 2 => 2,
                _ => 1,
            };
            ClickEvent {
                query_id: queries[qi].query_id,
                product_id,
                timestamp: rng.random_range(0..cfg.span_secs.max(1)),
                click_count,
            }
        })
        .collect();
    events.sort_by_key(|e| (e.timestamp, e.query_id, e.product_id));
    Ok((queries, events))
}

/// Splits a time-ordered log at the `train_fraction` quantile of events.
pub fn split_by_time(events: &[ClickEvent], train_fraction: f64) -> (Vec<ClickEvent>, Vec<ClickEvent>) {
    let mut sorted = events.to_vec();
    sorted.sort_by_key(|e| (e.timestamp, e.query_id, e.product_id));
    let cut = ((sorted.len() as f64) * train_fraction.clamp(0.0, 1.0)).round() as usize;
    let test = sorted.split_off(cut);
    (sorted, test)
}
