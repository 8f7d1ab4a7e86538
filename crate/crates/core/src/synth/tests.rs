use std::collections::HashMap;

use super::*;
use crate::vision::detect_roi;

fn small_data() -> DataConfig {
    DataConfig {
        products: 120,
        categories: 4,
        image_size: 64,
        clicks: ClickConfig {
            queries: 60,
            events: 2000,
            ..ClickConfig::default()
        },
    }
}

#[test]
fn catalog_is_reproducible() {
    let a = gen_catalog(50, 4, 64, 9).unwrap();
    let b = gen_catalog(50, 4, 64, 9).unwrap();
    assert_eq!(a, b);
    let c = gen_catalog(50, 4, 64, 10).unwrap();
    assert_ne!(a, c);
}

#[test]
fn categories_are_exactly_balanced() {
    let cat = gen_catalog(1000, 8, 32, 1).unwrap();
    let mut counts = [0usize; 8];
    for p in &cat {
        counts[p.category] += 1;
    }
    assert_eq!(counts, [125; 8]);
}

#[test]
fn titles_use_attribute_words_only() {
    let v = Vocab::default();
    for p in gen_catalog(300, 8, 32, 2).unwrap() {
        assert!(!p.title.is_empty());
        assert!(p.title.iter().all(|t| *t >= v.first_word() && (*t as usize) < v.len()));
        assert!(p.title.contains(&v.category(p.category)));
    }
}

#[test]
fn truth_box_covers_drawn_pixels() {
    for p in gen_catalog(64, 8, 64, 3).unwrap() {
        let b = p.truth_box;
        assert!(b.top < b.bottom && b.left < b.right && b.bottom <= 64 && b.right <= 64);
        let bg = [p.image.get(0, 0, 0), p.image.get(0, 0, 1), p.image.get(0, 0, 2)];
        for y in 0..64 {
            for x in 0..64 {
                let px = [p.image.get(y, x, 0), p.image.get(y, x, 1), p.image.get(y, x, 2)];
                let inside = y >= b.top && y < b.bottom && x >= b.left && x < b.right;
                if !inside {
                    assert_eq!(px, bg);
                }
            }
        }
    }
}

#[test]
fn detection_matches_generated_boxes() {
    let cat = gen_catalog(200, 8, 64, 4).unwrap();
    let hits = cat
        .iter()
        .filter(|p| detect_roi(&p.image, 90.0, 0.05).iou(&p.truth_box) >= 0.5)
        .count();
    assert!(hits as f64 >= 0.9 * cat.len() as f64, "{hits}/200");
}

#[test]
fn noiseless_clicks_share_query_attributes() {
    let cat = gen_catalog(200, 8, 32, 5).unwrap();
    let cfg = ClickConfig {
        queries: 80,
        events: 3000,
        noise_rate: 0.0,
        ..ClickConfig::default()
    };
    let (queries, clicks) = gen_click_log(&cat, &cfg, 6).unwrap();
    let v = Vocab::default();
    for c in &clicks {
        let q = &queries[c.query_id as usize];
        let attrs = cat[c.product_id as usize].attributes.query_tokens(&v);
        assert!(q.tokens.iter().any(|t| attrs.contains(t)));
        assert!(q.tokens.iter().all(|t| attrs.contains(t)));
        assert!(c.click_count >= 1);
    }
}

#[test]
fn every_query_matches_a_product() {
    let cat = gen_catalog(200, 8, 32, 7).unwrap();
    let (queries, _) = gen_click_log(&cat, &ClickConfig { events: 10, ..ClickConfig::default() }, 8).unwrap();
    let v = Vocab::default();
    assert_eq!(queries.len(), 500);
    for q in &queries {
        assert!((1..=3).contains(&q.tokens.len()));
        assert!(!relevant_products(&cat, &q.tokens, &v).is_empty());
    }
}

#[test]
fn click_head_is_heavy() {
    let cat = gen_catalog(2000, 8, 16, 11).unwrap();
    let (queries, clicks) = gen_click_log(&cat, &ClickConfig::default(), 12).unwrap();
    let mut per_query: HashMap<u32, u64> = HashMap::new();
    for c in &clicks {
        *per_query.entry(c.query_id).or_default() += c.click_count as u64;
    }
    let mut counts: Vec<u64> = per_query.values().copied().collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let total: u64 = counts.iter().sum();
    let head = (queries.len() as f64 * 0.13).round() as usize;
    let head_clicks: u64 = counts.iter().take(head).sum();
    assert!(head_clicks as f64 >= 0.6 * total as f64, "{head_clicks}/{total}");
}

#[test]
fn click_log_is_reproducible_and_ordered() {
    let cat = gen_catalog(100, 4, 16, 13).unwrap();
    let cfg = ClickConfig {
        queries: 40,
        events: 500,
        ..ClickConfig::default()
    };
    let a = gen_click_log(&cat, &cfg, 1).unwrap();
    let b = gen_click_log(&cat, &cfg, 1).unwrap();
    assert_eq!(a, b);
    assert!(a.1.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    let (train, test) = split_by_time(&a.1, 0.8);
    assert_eq!(train.len(), 400);
    assert_eq!(test.len(), 100);
    assert!(train.last().unwrap().timestamp <= test[0].timestamp);
}

#[test]
fn invalid_generation_requests_are_config_errors() {
    use crate::error::Error;
    assert!(matches!(gen_catalog(3, 8, 64, 0), Err(Error::Config { .. })));
    assert!(matches!(gen_catalog(10, 0, 64, 0), Err(Error::Config { .. })));
    let cat = gen_catalog(10, 2, 16, 0).unwrap();
    let cfg = ClickConfig {
        noise_rate: 0.5,
        ..ClickConfig::default()
    };
    assert!(matches!(gen_click_log(&cat, &cfg, 0), Err(Error::Config { .. })));
}

#[test]
fn corpus_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Corpus::generate(&small_data(), 21).unwrap();
    corpus.save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.products, corpus.products);
    assert_eq!(back.queries, corpus.queries);
    assert_eq!(back.clicks, corpus.clicks);
    assert_eq!(back.vocab.words(), corpus.vocab.words());
}

#[test]
fn vocab_encodes_and_decodes() {
    let v = Vocab::default();
    let ids = v.encode("Red  circle zebra");
    assert_eq!(ids, vec![v.id("red").unwrap(), v.id("circle").unwrap(), vocab::UNK]);
    assert_eq!(v.decode(&ids[..2]), "red circle");
    assert!(v.len() <= 256);
}
