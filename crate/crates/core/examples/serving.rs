//! Export product embeddings, precompute head queries, distil a shallow
//! query encoder for the tail and serve through the clustered index.

use acebert::config::RunConfig;
use acebert::pipeline::{self, Prepared};
use acebert::serving::EmbeddingCache;

fn main() -> acebert::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = RunConfig::from_toml(include_str!("small.toml"))?;
    let data = Prepared::generate(&cfg)?;
    let (mut teacher, _) = pipeline::run_pretrain(&cfg, &data, &mut std::io::sink())?;
    pipeline::run_finetune(&cfg, &data, &mut teacher, &mut std::io::sink())?;

    let dir = std::env::temp_dir().join("acebert-serving");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("products.aceb");
    pipeline::export_embeddings(&cfg, &data, &teacher)?.save(&path)?;
    let products = EmbeddingCache::load(&path)?;
    println!("{} product vectors of dim {} in {}", products.len(), products.dim, path.display());

    let (student, losses) = pipeline::run_distill(&cfg, &data, &teacher)?;
    println!(
        "student: {} layer(s), distillation loss {:.4} -> {:.4}, cost per 8-token query {} vs teacher {}",
        student.config.layers,
        losses.first().copied().unwrap_or(f32::NAN),
        losses.last().copied().unwrap_or(f32::NAN),
        student.forward_cost(8),
        teacher.forward_cost(8)
    );

    let hot = pipeline::build_hot_cache(&cfg, &data, &teacher)?;
    let head = pipeline::head_queries(&data, cfg.serving.hot_queries);
    let server = pipeline::build_server(&cfg, &products, hot, student)?;
    let tail: Vec<String> = data
        .corpus
        .queries
        .iter()
        .map(|q| data.corpus.vocab.decode(&q.tokens))
        .filter(|t| !head.contains(t))
        .take(3)
        .collect();
    for text in head.iter().take(3).chain(&tail) {
        let before = server.encode_count();
        let hits = server.serve_query(text, 5)?;
        let path = if server.encode_count() == before { "hot" } else { "encoded" };
        let ids: Vec<u32> = hits.iter().map(|h| h.0).collect();
        println!("{text:<32} {path:<8} {ids:?}");
    }
    Ok(())
}
