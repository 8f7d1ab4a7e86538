//! Assemble query and product sequences and embed them with an untrained
//! encoder.

use acebert::config::RunConfig;
use acebert::encoder::{segment, Model};
use acebert::pipeline::{self, Prepared};

fn main() -> acebert::Result<()> {
    let cfg = RunConfig::from_toml(include_str!("small.toml"))?;
    let data = Prepared::generate(&cfg)?;
    let model = Model::new(cfg.encoder.clone(), 1)?;
    let builder = pipeline::builder(&cfg, cfg.modalities);

    let q = &data.corpus.queries[0];
    let pid = data.test_clicks.iter().find(|c| c.query_id == q.query_id).map_or(0, |c| c.product_id);
    let query = builder.query(&q.tokens)?;
    let product = acebert::finetune::product_sequence(&builder, &data.corpus, &data.bank, &data.hot, pid)?;

    let count = |s: &acebert::encoder::InputSequence, seg: u8| s.segment_ids.iter().filter(|&&x| x == seg).count();
    println!("query   \"{}\": {} positions", data.corpus.vocab.decode(&q.tokens), query.len());
    println!(
        "product {pid}: {} positions by segment: text {}, hot query {}, RoI patch {}, pixel patch {}",
        product.len(),
        count(&product, segment::TEXT),
        count(&product, segment::HOT_QUERY),
        count(&product, segment::PATCH),
        count(&product, segment::PIXEL)
    );

    let eq = model.embed(&query)?;
    let ep = model.embed(&product)?;
    let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
    let cos: f32 = eq.iter().zip(&ep).map(|(a, b)| a * b).sum();
    println!("embedding dim {}, norms {:.4} / {:.4}, cosine {cos:.4}", eq.len(), norm(&eq), norm(&ep));
    println!("forward cost of the product: {} multiply-adds", model.forward_cost(product.len()));
    Ok(())
}
