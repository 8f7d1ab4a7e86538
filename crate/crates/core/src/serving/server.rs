use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::cache::EmbeddingCache;
use crate::assembly::SequenceBuilder;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::retrieval::EmbeddingIndex;
use crate::synth::Vocab;

/// Whitespace-collapsed lowercase form used for cache keys.
pub fn normalize_query(text: &str) -> String {
    text.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// First eight bytes of the SHA-256 of the normalized text.
pub fn query_hash(text: &str) -> u64 {
    let d = Sha256::digest(normalize_query(text).as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

/// Precomputed embeddings of head queries, keyed by text hash.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HotQueryCache {
    map: HashMap<u64, Vec<f32>>,
}

impl HotQueryCache {
    pub fn build(model: &Model, builder: &SequenceBuilder, vocab: &Vocab, texts: &[String]) -> Result<Self> {
        let mut map = HashMap::with_capacity(texts.len());
        for t in texts {
            let seq = builder.query(&vocab.encode(t))?;
            map.insert(query_hash(t), model.embed(&seq)?);
        }
        Ok(HotQueryCache { map })
    }

    pub fn get(&self, text: &str) -> Option<&[f32]> {
        self.map.get(&query_hash(text)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Stored in the embedding cache format with the text hash as id,
    /// ascending.
    pub fn to_cache(&self) -> Result<EmbeddingCache> {
        let dim = self.map.values().next().map_or(1, Vec::len);
        let mut keys: Vec<&u64> = self.map.keys().collect();
        keys.sort_unstable();
        let mut c = EmbeddingCache::new(dim);
        for k in keys {
            c.push(*k, &self.map[k])?;
        }
        Ok(c)
    }

    pub fn from_cache(cache: &EmbeddingCache) -> Self {
        let map = cache
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, cache.row(i).to_vec()))
            .collect();
        HotQueryCache { map }
    }
}

/// Query-side lookup: hot cache first, otherwise one online encode with the
/// query encoder, then top-k search.
pub struct Server {
    pub index: EmbeddingIndex,
    pub hot: HotQueryCache,
    pub encoder: Model,
    pub builder: SequenceBuilder,
    pub vocab: Vocab,
    /// Probe count for clustered search; exact search when `None`.
    pub probes: Option<usize>,
    encodes: AtomicU64,
}

impl Server {
    pub fn new(
        index: EmbeddingIndex,
        hot: HotQueryCache,
        encoder: Model,
        builder: SequenceBuilder,
        vocab: Vocab,
        probes: Option<usize>,
    ) -> Self {
        Server {
            index,
            hot,
            encoder,
            builder,
            vocab,
            probes,
            encodes: AtomicU64::new(0),
        }
    }

    /// Number of online encoder invocations so far.
    pub fn encode_count(&self) -> u64 {
        self.encodes.load(Ordering::Relaxed)
    }

    /// Embedding used for `text`, from the cache or a fresh encode.
    pub fn query_embedding(&self, text: &str) -> Result<Vec<f32>> {
        if normalize_query(text).is_empty() {
            return Err(Error::Invalid("empty query text".into()));
        }
        if let Some(v) = self.hot.get(text) {
            return Ok(v.to_vec());
        }
        let seq = self.builder.query(&self.vocab.encode(text))?;
        self.encodes.fetch_add(1, Ordering::Relaxed);
        self.encoder.embed(&seq)
    }

    pub fn serve_query(&self, text: &str, k: usize) -> Result<Vec<(u32, f32)>> {
        let emb = self.query_embedding(text)?;
        let k = k.min(self.index.len());
        match self.probes {
            Some(p) => self.index.approx_topk(&emb, k, p),
            None => self.index.exact_topk(&emb, k),
        }
    }
}
