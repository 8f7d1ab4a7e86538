use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::index::EmbeddingIndex;
use super::metrics::{gauc, recall_at_k};
use crate::error::{Error, Result};
use crate::synth::ClickEvent;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalQuery {
    pub query_id: u32,
    /// Clicked products.
    pub targets: HashSet<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalSpec {
    pub queries: Vec<EvalQuery>,
}

impl EvalSpec {
    /// One entry per query clicked in `clicks`, targets restricted to
    /// indexed ids; queries left without targets are dropped.
    pub fn from_clicks(clicks: &[ClickEvent], indexed: &[u32]) -> Self {
        let indexed: HashSet<u32> = indexed.iter().copied().collect();
        let mut by_query: BTreeMap<u32, HashSet<u32>> = BTreeMap::new();
        for c in clicks {
            if indexed.contains(&c.product_id) {
                by_query.entry(c.query_id).or_default().insert(c.product_id);
            }
        }
        EvalSpec {
            queries: by_query
                .into_iter()
                .map(|(query_id, targets)| EvalQuery { query_id, targets })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Unclicked products sampled per query as GAUC impressions.
    pub gauc_negatives: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![10, 50, 100],
            gauc_negatives: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub queries: usize,
    pub records: Vec<MetricRecord>,
}

impl EvalReport {
    fn find(&self, metric: &str, k: Option<usize>) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.metric == metric && r.k == k)
            .map(|r| r.value)
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.find("recall", Some(k))
    }

    /// Expected recall of a uniformly random ranking.
    pub fn random_recall(&self, k: usize) -> Option<f64> {
        self.find("random_recall", Some(k))
    }

    pub fn gauc(&self) -> Option<f64> {
        self.find("gauc", None)
    }

    /// One JSON object per line: `metric`, optional `k`, `value`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            writeln!(w, "{}", serde_json::to_string(r)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{} evaluated queries\n{:<14} {:>5} {:>10}\n", self.queries, "metric", "k", "value");
        for r in &self.records {
            let k = r.k.map_or("-".to_string(), |k| k.to_string());
            let _ = writeln!(s, "{:<14} {:>5} {:>10.4}", r.metric, k, r.value);
        }
        s
    }
}

/// Recall@K for every configured K (mean over queries), the random-ranking
/// baseline `K / N` and GAUC over clicked targets plus sampled unclicked
/// impressions. `embed_query` maps a query id to its unit embedding.
pub fn evaluate(
    index: &EmbeddingIndex,
    spec: &EvalSpec,
    cfg: &EvalConfig,
    mut embed_query: impl FnMut(u32) -> Result<Vec<f32>>,
) -> Result<EvalReport> {
    if spec.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one query with targets".into()));
    }
    let max_k = cfg.ks.iter().copied().max().unwrap_or(0);
    if max_k == 0 || max_k > index.len() {
        return Err(Error::config("eval.ks", format!("values must be in 1..={}", index.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sums = vec![0.0; cfg.ks.len()];
    let mut groups = Vec::with_capacity(spec.len());
    let row_of: std::collections::HashMap<u32, usize> =
        index.ids().iter().enumerate().map(|(r, id)| (*id, r)).collect();
    for q in &spec.queries {
        let emb = embed_query(q.query_id)?;
        let ranked: Vec<u32> = index.exact_topk(&emb, max_k)?.into_iter().map(|(id, _)| id).collect();
        for (s, &k) in sums.iter_mut().zip(&cfg.ks) {
            *s += recall_at_k(&ranked[..k], &q.targets)?;
        }
        let score = |id: u32| -> f64 {
            let v = index.vector(row_of[&id]);
            v.iter().zip(&emb).map(|(a, b)| (*a * *b) as f64).sum()
        };
        let mut targets: Vec<u32> = q.targets.iter().copied().collect();
        targets.sort_unstable();
        let mut group: Vec<(f64, bool)> = targets.iter().map(|&id| (score(id), true)).collect();
        if q.targets.len() < index.len() {
            let mut drawn = 0;
            while drawn < cfg.gauc_negatives {
                let id = index.ids()[rng.random_range(0..index.len())];
                if !q.targets.contains(&id) {
                    group.push((score(id), false));
                    drawn += 1;
                }
            }
        }
        groups.push(group);
    }
    let n = spec.len() as f64;
    let mut records = Vec::new();
    for (s, &k) in sums.iter().zip(&cfg.ks) {
        records.push(MetricRecord {
            metric: "recall".into(),
            k: Some(k),
            value: s / n,
        });
    }
    for &k in &cfg.ks {
        records.push(MetricRecord {
            metric: "random_recall".into(),
            k: Some(k),
            value: k as f64 / index.len() as f64,
        });
    }
    records.push(MetricRecord {
        metric: "gauc".into(),
        k: None,
        value: gauc(&groups)?,
    });
    Ok(EvalReport {
        queries: spec.len(),
        records,
    })
}
