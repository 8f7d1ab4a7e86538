use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::synth::{ClickEvent, QueryRecord};

pub const HOT_LIMIT: usize = 10;

/// Per product, its most clicked query ids in descending click count (ties by
/// ascending query id).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HotQueryTable {
    lists: HashMap<u32, Vec<u32>>,
}

impl HotQueryTable {
    /// Query ids for `product_id`; empty if it was never clicked.
    pub fn get(&self, product_id: u32) -> &[u32] {
        self.lists.get(&product_id).map_or(&[], Vec::as_slice)
    }

    /// Token sequences of the product's hot queries, in table order.
    pub fn tokens(&self, product_id: u32, queries: &[QueryRecord]) -> Vec<Vec<u32>> {
        self.get(product_id)
            .iter()
            .map(|q| queries[*q as usize].tokens.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// All distinct query ids appearing anywhere in the table, ascending.
    pub fn query_ids(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.lists.values().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// One line per clicked product: `product_id<TAB>q1,q2,...`, ascending id.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let mut ids: Vec<&u32> = self.lists.keys().collect();
        ids.sort_unstable();
        for p in ids {
            let qs: Vec<String> = self.lists[p].iter().map(u32::to_string).collect();
            writeln!(w, "{p}\t{}", qs.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn compute_hot_queries(clicks: &[ClickEvent], limit: usize) -> HotQueryTable {
    let mut counts: HashMap<u32, HashMap<u32, u64>> = HashMap::new();
    for c in clicks {
        *counts.entry(c.product_id).or_default().entry(c.query_id).or_default() += c.click_count as u64;
    }
    let lists = counts
        .into_iter()
        .map(|(p, per_query)| {
            let mut v: Vec<(u32, u64)> = per_query.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            v.truncate(limit);
            (p, v.into_iter().map(|(q, _)| q).collect())
        })
        .collect();
    HotQueryTable { lists }
}
