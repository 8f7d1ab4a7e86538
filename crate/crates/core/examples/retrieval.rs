//! Exact and clustered search over unit vectors, with Recall@K and GAUC.

use std::collections::HashSet;

use acebert::retrieval::{gauc, recall_at_k, EmbeddingIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng, center: &[f32], spread: f32) -> Vec<f32> {
    let v: Vec<f32> = center.iter().map(|c| c + spread * rng.random_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn main() -> acebert::Result<()> {
    let (n, d, topics) = (5000, 32, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers: Vec<Vec<f32>> = (0..topics).map(|_| unit(&mut rng, &vec![0.0; d], 1.0)).collect();
    let rows: Vec<Vec<f32>> = (0..n).map(|i| unit(&mut rng, &centers[i % topics], 0.3)).collect();
    let mut index = EmbeddingIndex::new((0..n as u32).collect(), &rows)?;
    index.build_clusters(topics, 1)?;

    let queries: Vec<Vec<f32>> = (0..200).map(|i| unit(&mut rng, &centers[i % topics], 0.3)).collect();
    for probes in [1, 2, 4, 8] {
        let mut overlap = 0.0;
        for q in &queries {
            let exact: HashSet<u32> = index.exact_topk(q, 10)?.into_iter().map(|r| r.0).collect();
            let approx: Vec<u32> = index.approx_topk(q, 10, probes)?.into_iter().map(|r| r.0).collect();
            overlap += recall_at_k(&approx, &exact)?;
        }
        println!("{probes} probe(s): top-10 agreement with exact search {:.3}", overlap / queries.len() as f64);
    }

    // Items from the query's own topic are the relevant ones.
    let mut recall = 0.0;
    let mut groups = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        let topic = i % topics;
        let relevant: HashSet<u32> = (0..n as u32).filter(|&j| j as usize % topics == topic).collect();
        let ranked = index.exact_topk(q, 100)?;
        recall += recall_at_k(&ranked.iter().map(|r| r.0).collect::<Vec<_>>(), &relevant)?;
        groups.push(ranked.iter().map(|&(id, s)| (s as f64, relevant.contains(&id))).collect::<Vec<_>>());
    }
    println!("Recall@100 of topic members {:.3}", recall / queries.len() as f64);
    println!("GAUC over the top-100 impressions {:.3}", gauc(&groups)?);
    Ok(())
}
