//! End-to-end wiring shared by the command line and the examples.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use log::info;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assembly::{FeatureBank, Modalities, SequenceBuilder};
use crate::config::RunConfig;
use crate::encoder::{InputSequence, Model};
use crate::error::Result;
use crate::finetune::{
    compute_hot_queries, embed_all, finetune, product_sequence, query_sequence, training_pairs, FinetuneData,
    FinetuneReport, HotQueryTable, TrainPair,
};
use crate::pretrain::{pretrain, PretrainData, PretrainLosses};
use crate::retrieval::{evaluate, EmbeddingIndex, EvalReport, EvalSpec};
use crate::serving::{distill_query_encoder, EmbeddingCache, HotQueryCache, Server};
use crate::synth::{split_by_time, ClickEvent, Corpus, Vocab};
use crate::vision::FrontEnd;

/// Corpus plus everything derived from it that training and evaluation share.
pub struct Prepared {
    pub corpus: Corpus,
    pub bank: FeatureBank,
    pub train_clicks: Vec<ClickEvent>,
    pub test_clicks: Vec<ClickEvent>,
    /// Hot queries from the training clicks only.
    pub hot: HotQueryTable,
    pub pairs: Vec<TrainPair>,
}

impl Prepared {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let corpus = Corpus::generate(&cfg.data, cfg.seed_for("data"))?;
        Self::from_corpus(cfg, corpus)
    }

    pub fn from_corpus(cfg: &RunConfig, corpus: Corpus) -> Result<Self> {
        let front = FrontEnd::new(cfg.vision.clone())?;
        let bank = FeatureBank::build(&corpus, &front)?;
        let (train_clicks, test_clicks) = split_by_time(&corpus.clicks, cfg.train_fraction);
        let hot = compute_hot_queries(&train_clicks, cfg.finetune.hot_limit);
        let pairs = training_pairs(&train_clicks);
        info!(
            "prepared {} products, {} queries, {} train / {} test clicks, {} training pairs",
            corpus.products.len(),
            corpus.queries.len(),
            train_clicks.len(),
            test_clicks.len(),
            pairs.len()
        );
        Ok(Prepared {
            corpus,
            bank,
            train_clicks,
            test_clicks,
            hot,
            pairs,
        })
    }

    pub fn product_ids(&self) -> Vec<u32> {
        self.corpus.products.iter().map(|p| p.product_id).collect()
    }
}

pub fn builder(cfg: &RunConfig, modalities: Modalities) -> SequenceBuilder {
    SequenceBuilder::new(cfg.sequence.clone(), modalities, cfg.encoder.max_positions)
}

/// Fresh encoder pretrained on the full multimodal input.
pub fn run_pretrain(cfg: &RunConfig, data: &Prepared, log: &mut dyn Write) -> Result<(Model, Vec<PretrainLosses>)> {
    let mut model = Model::new(cfg.encoder.clone(), cfg.seed_for("init"))?;
    if cfg.pretrain.steps == 0 {
        return Ok((model, Vec::new()));
    }
    let seed = cfg.seed_for("pretrain");
    let mut stream = PretrainData::new(&data.corpus, &data.bank, builder(cfg, Modalities::default()), seed)?;
    let history = pretrain(&mut model, &mut stream, &cfg.pretrain, seed, log)?;
    Ok((model, history))
}

/// Fine-tunes `model` in place under the config's modalities and
/// adversarial switch.
pub fn run_finetune(cfg: &RunConfig, data: &Prepared, model: &mut Model, log: &mut dyn Write) -> Result<FinetuneReport> {
    let seed = cfg.seed_for("finetune");
    let mut stream = FinetuneData::new(
        &data.corpus,
        &data.bank,
        &data.hot,
        builder(cfg, cfg.modalities),
        &data.pairs,
        cfg.finetune.partitions,
        seed,
    )?;
    finetune(model, &mut stream, &cfg.finetune, seed, log)
}

pub fn product_sequences(cfg: &RunConfig, data: &Prepared) -> Result<Vec<InputSequence>> {
    let b = builder(cfg, cfg.modalities);
    data.product_ids()
        .into_iter()
        .map(|id| product_sequence(&b, &data.corpus, &data.bank, &data.hot, id))
        .collect()
}

/// Embeddings of every product, in catalog order.
pub fn export_embeddings(cfg: &RunConfig, data: &Prepared, model: &Model) -> Result<EmbeddingCache> {
    let rows = embed_all(model, &product_sequences(cfg, data)?)?;
    let mut cache = EmbeddingCache::new(model.config.retrieval_dim);
    for (id, r) in data.product_ids().into_iter().zip(&rows) {
        cache.push(id as u64, r)?;
    }
    Ok(cache)
}

pub fn index_from_cache(cache: &EmbeddingCache) -> Result<EmbeddingIndex> {
    EmbeddingIndex::new(cache.ids.iter().map(|i| *i as u32).collect(), &cache.rows())
}

pub fn build_index(cfg: &RunConfig, data: &Prepared, model: &Model) -> Result<EmbeddingIndex> {
    index_from_cache(&export_embeddings(cfg, data, model)?)
}

/// Metrics on the held-out (later) clicks.
pub fn run_eval(cfg: &RunConfig, data: &Prepared, model: &Model) -> Result<EvalReport> {
    let index = build_index(cfg, data, model)?;
    let spec = EvalSpec::from_clicks(&data.test_clicks, index.ids());
    let b = builder(cfg, cfg.modalities);
    evaluate(&index, &spec, &cfg.eval, |q| model.embed(&query_sequence(&b, &data.corpus, q)?))
}

/// Query embeddings and product embeddings for the domain probe.
pub fn domain_embeddings(cfg: &RunConfig, data: &Prepared, model: &Model) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let b = builder(cfg, cfg.modalities);
    let queries = data
        .corpus
        .queries
        .iter()
        .map(|q| b.query(&q.tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok((embed_all(model, &queries)?, embed_all(model, &product_sequences(cfg, data)?)?))
}

/// Random attribute queries (1-3 distinct words from category, colour, shape
/// and size) for distillation, excluding any text in `exclude`.
pub fn synthetic_queries(vocab: &Vocab, n: usize, exclude: &HashSet<Vec<u32>>, seed: u64) -> Vec<Vec<u32>> {
    use crate::synth::vocab::{CATEGORIES, COLORS, SHAPES, SIZES};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: [Vec<u32>; 4] = [
        (0..CATEGORIES.len()).map(|i| vocab.category(i)).collect(),
        (0..COLORS.len()).map(|i| vocab.color(i)).collect(),
        (0..SHAPES.len()).map(|i| vocab.shape(i)).collect(),
        (0..SIZES.len()).map(|i| vocab.size(i)).collect(),
    ];
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < n * 50 {
        attempts += 1;
        let k = *[1usize, 2, 2, 3, 3].choose(&mut rng).expect("nonempty");
        let mut slots: Vec<usize> = (0..4).collect();
        use rand::seq::SliceRandom;
        slots.shuffle(&mut rng);
        let mut chosen = slots[..k].to_vec();
        chosen.sort_unstable();
        let q: Vec<u32> = chosen
            .iter()
            .map(|g| *groups[*g].choose(&mut rng).expect("nonempty group"))
            .collect();
        if !exclude.contains(&q) {
            out.push(q);
        }
    }
    out
}

/// Distils a shallow query encoder on synthetic queries disjoint from the
/// corpus queries, which serve as the held-out set.
pub fn run_distill(cfg: &RunConfig, data: &Prepared, teacher: &Model) -> Result<(Model, Vec<f32>)> {
    let b = builder(cfg, cfg.modalities);
    let held: HashSet<Vec<u32>> = data.corpus.queries.iter().map(|q| q.tokens.clone()).collect();
    let texts = synthetic_queries(
        &data.corpus.vocab,
        cfg.serving.distill_queries,
        &held,
        cfg.seed_for("distill-corpus"),
    );
    let seqs = texts.iter().map(|t| b.query(t)).collect::<Result<Vec<_>>>()?;
    distill_query_encoder(teacher, &seqs, &cfg.serving, cfg.seed_for("distill"))
}

/// Texts of the `n` training queries with the most clicks, most clicked
/// first.
pub fn head_queries(data: &Prepared, n: usize) -> Vec<String> {
    let mut volume: HashMap<u32, u64> = HashMap::new();
    for c in &data.train_clicks {
        *volume.entry(c.query_id).or_default() += c.click_count as u64;
    }
    let mut ranked: Vec<(u32, u64)> = volume.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
        .into_iter()
        .take(n)
        .filter_map(|(q, _)| data.corpus.query(q))
        .map(|q| data.corpus.vocab.decode(&q.tokens))
        .collect()
}

/// Hot-query cache filled by `encoder` for the configured head queries.
pub fn build_hot_cache(cfg: &RunConfig, data: &Prepared, encoder: &Model) -> Result<HotQueryCache> {
    let texts = head_queries(data, cfg.serving.hot_queries);
    HotQueryCache::build(encoder, &builder(cfg, cfg.modalities), &data.corpus.vocab, &texts)
}

/// Serving stack over exported product embeddings: clustered search when
/// `serving.clusters > 0`, exact search otherwise.
pub fn build_server(cfg: &RunConfig, products: &EmbeddingCache, hot: HotQueryCache, encoder: Model) -> Result<Server> {
    let mut index = index_from_cache(products)?;
    let probes = if cfg.serving.clusters > 0 {
        index.build_clusters(cfg.serving.clusters.min(index.len()), cfg.seed_for("clusters"))?;
        Some(cfg.serving.probes.min(cfg.serving.clusters))
    } else {
        None
    };
    Ok(Server::new(
        index,
        hot,
        encoder,
        builder(cfg, cfg.modalities),
        Vocab::default(),
        probes,
    ))
}
