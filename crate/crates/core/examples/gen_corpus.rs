//! Generate a synthetic catalog with queries and a click log, write it to a
//! directory and read it back.
//!
//!     cargo run --example gen_corpus -- /tmp/corpus

use std::path::PathBuf;

use acebert::synth::{ClickConfig, Corpus, DataConfig};

fn main() -> acebert::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("acebert-corpus"));
    let cfg = DataConfig {
        products: 200,
        categories: 4,
        clicks: ClickConfig {
            queries: 60,
            events: 2000,
            ..ClickConfig::default()
        },
        ..DataConfig::default()
    };
    let corpus = Corpus::generate(&cfg, 7)?;
    corpus.save(&out)?;
    println!(
        "{} products, {} queries, {} click events -> {}",
        corpus.products.len(),
        corpus.queries.len(),
        corpus.clicks.len(),
        out.display()
    );

    for p in corpus.products.iter().take(3) {
        let b = &p.truth_box;
        println!(
            "product {:>3}  category {}  box {:?}  {}",
            p.product_id,
            p.category,
            (b.top, b.left, b.bottom, b.right),
            corpus.vocab.decode(&p.title)
        );
    }
    for q in corpus.queries.iter().take(3) {
        println!("query   {:>3}  {}", q.query_id, corpus.vocab.decode(&q.tokens));
    }

    let back = Corpus::load(&out)?;
    assert_eq!(back.products.len(), corpus.products.len());
    assert_eq!(back.clicks, corpus.clicks);
    println!("reloaded ok");
    Ok(())
}
