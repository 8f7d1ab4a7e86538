//! Builds encoder inputs from products, queries and vision features.
//!
//! Product layout:
//!
//! ```text
//! [CLS] title [SEP] hot queries [SEP] patches [SEP] pixels [SEP]
//!   0     0     0        1        1      2      2     3      3     <- segment
//! ```
//!
//! The patch and pixel groups (each with its closing `[SEP]`) are dropped when
//! their modality is switched off. Positions count up through the whole
//! sequence, image tokens included.

use serde::{Deserialize, Serialize};

use crate::encoder::{segment, ImageTokens, InputSequence};
use crate::error::{Error, Result};
use crate::synth::vocab::{CLS, SEP};
use crate::synth::Corpus;
use crate::tensor::Tensor;
use crate::vision::{FrontEnd, VisionFeatures};

/// Which inputs the product tower sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Modalities {
    pub use_roi: bool,
    pub use_pixel: bool,
    pub use_hot_query: bool,
}

impl Default for Modalities {
    fn default() -> Self {
        Modalities {
            use_roi: true,
            use_pixel: true,
            use_hot_query: true,
        }
    }
}

impl Modalities {
    pub fn text_only() -> Self {
        Modalities {
            use_roi: false,
            use_pixel: false,
            use_hot_query: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    /// Maximum title (and query) length in tokens.
    pub max_text: usize,
    /// Maximum number of hot-query tokens appended to a product.
    pub hot_budget: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            max_text: 32,
            hot_budget: 24,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SequenceBuilder {
    pub config: SequenceConfig,
    pub modalities: Modalities,
    pub max_positions: usize,
}

impl SequenceBuilder {
    pub fn new(config: SequenceConfig, modalities: Modalities, max_positions: usize) -> Self {
        SequenceBuilder {
            config,
            modalities,
            max_positions,
        }
    }

    /// `[CLS] query [SEP]`, all segment 0.
    pub fn query(&self, tokens: &[u32]) -> Result<InputSequence> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty query".into()));
        }
        let keep = tokens.len().min(self.config.max_text).min(self.max_positions.saturating_sub(2));
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(CLS);
        ids.extend_from_slice(&tokens[..keep]);
        ids.push(SEP);
        Ok(InputSequence::from_tokens(&ids, &vec![segment::TEXT; ids.len()]))
    }

    /// Product sequence. Hot queries are taken in the given order; whole
    /// queries beyond the hot budget are dropped. If the result is still too
    /// long, hot queries are dropped first and then the title tail.
    pub fn product(&self, title: &[u32], hot: &[Vec<u32>], vision: Option<&VisionFeatures>) -> Result<InputSequence> {
        let m = self.modalities;
        let patches = vision.filter(|_| m.use_roi).map(|v| &v.patch_features);
        let pixels = vision.filter(|_| m.use_pixel).map(|v| &v.pixel_vectors);
        let image_len = patches.map_or(0, |p| p.rows() + 1) + pixels.map_or(0, |p| p.rows() + 1);

        let mut title = &title[..title.len().min(self.config.max_text)];
        let mut hot_tokens: Vec<&[u32]> = Vec::new();
        if m.use_hot_query {
            let mut used = 0;
            for q in hot {
                if used + q.len() > self.config.hot_budget {
                    break;
                }
                used += q.len();
                hot_tokens.push(q);
            }
        }
        let fixed = 3 + image_len;
        let hot_len = |h: &[&[u32]]| h.iter().map(|q| q.len()).sum::<usize>();
        while fixed + title.len() + hot_len(&hot_tokens) > self.max_positions && !hot_tokens.is_empty() {
            hot_tokens.pop();
        }
        let overflow = (fixed + title.len()).saturating_sub(self.max_positions);
        if overflow > 0 {
            if overflow >= title.len() {
                return Err(Error::config(
                    "encoder.max_positions",
                    format!(
                        "{} positions cannot hold a product with {image_len} image tokens",
                        self.max_positions
                    ),
                ));
            }
            title = &title[..title.len() - overflow];
        }

        let mut tokens: Vec<i32> = Vec::with_capacity(self.max_positions);
        let mut segments = Vec::with_capacity(self.max_positions);
        let mut push = |t: i32, s: u8, tokens: &mut Vec<i32>| {
            tokens.push(t);
            segments.push(s);
        };
        push(CLS as i32, segment::TEXT, &mut tokens);
        for t in title {
            push(*t as i32, segment::TEXT, &mut tokens);
        }
        push(SEP as i32, segment::TEXT, &mut tokens);
        for q in &hot_tokens {
            for t in q.iter() {
                push(*t as i32, segment::HOT_QUERY, &mut tokens);
            }
        }
        push(SEP as i32, segment::HOT_QUERY, &mut tokens);

        let mut image = None;
        if let (Some(v), true) = (vision, patches.is_some() || pixels.is_some()) {
            let mut img = ImageTokens::empty(v.patch_features.cols(), v.pixel_vectors.cols());
            if let Some(p) = patches {
                for _ in 0..p.rows() {
                    img.patch_positions.push(tokens.len());
                    push(-1, segment::PATCH, &mut tokens);
                }
                push(SEP as i32, segment::PATCH, &mut tokens);
                img.patch_features = p.clone();
            }
            if let Some(p) = pixels {
                for _ in 0..p.rows() {
                    img.pixel_positions.push(tokens.len());
                    push(-1, segment::PIXEL, &mut tokens);
                }
                push(SEP as i32, segment::PIXEL, &mut tokens);
                img.pixel_vectors = p.clone();
            }
            image = Some(img);
        }
        let n = tokens.len();
        let seq = InputSequence {
            token_ids: tokens,
            segment_ids: segments,
            position_ids: (0..n).collect(),
            attention_mask: vec![1; n],
            image,
        };
        seq.validate()?;
        Ok(seq)
    }
}

/// Vision features of every catalog product, indexed by product id.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    features: Vec<VisionFeatures>,
}

impl FeatureBank {
    pub fn build(corpus: &Corpus, front: &FrontEnd) -> Result<Self> {
        let features = corpus
            .products
            .iter()
            .map(|p| front.process(&p.image))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureBank { features })
    }

    pub fn get(&self, product_id: u32) -> &VisionFeatures {
        &self.features[product_id as usize]
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Copy of `features` with the rows in `rows` set to zero.
pub fn zero_rows(features: &Tensor<f32>, rows: &[usize]) -> Tensor<f32> {
    let mut t = features.clone();
    for &r in rows {
        t.row_mut(r).fill(0.0);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::segment;
    use crate::testutil::fixture;

    #[test]
    fn product_layout_and_segments() {
        let fx = fixture(1);
        let p = &fx.corpus.products[0];
        let v = fx.bank.get(0);
        let hot = vec![vec![10, 11], vec![12]];
        let seq = fx.builder.product(&p.title, &hot, Some(v)).unwrap();
        let t = p.title.len();
        let (np, nx) = (v.patch_features.rows(), v.pixel_vectors.rows());
        assert_eq!(seq.len(), 1 + t + 1 + 3 + 1 + np + 1 + nx + 1);
        assert_eq!(seq.token_ids[0], CLS as i32);
        assert_eq!(seq.token_ids[t + 1], SEP as i32);
        assert_eq!(&seq.token_ids[t + 2..t + 5], &[10, 11, 12]);
        assert_eq!(seq.token_ids[t + 5], SEP as i32);
        let expected: Vec<u8> = std::iter::repeat_n(segment::TEXT, t + 2)
            .chain(std::iter::repeat_n(segment::HOT_QUERY, 4))
            .chain(std::iter::repeat_n(segment::PATCH, np + 1))
            .chain(std::iter::repeat_n(segment::PIXEL, nx + 1))
            .collect();
        assert_eq!(seq.segment_ids, expected);
        assert_eq!(seq.position_ids, (0..seq.len()).collect::<Vec<_>>());
        let img = seq.image.as_ref().unwrap();
        assert_eq!(img.patch_positions, (t + 6..t + 6 + np).collect::<Vec<_>>());
        assert_eq!(img.pixel_positions[0], t + 7 + np);
    }

    #[test]
    fn empty_hot_list_leaves_two_adjacent_separators() {
        let fx = fixture(1);
        let p = &fx.corpus.products[1];
        let seq = fx.builder.product(&p.title, &[], Some(fx.bank.get(1))).unwrap();
        let t = p.title.len();
        assert_eq!(seq.token_ids[t + 1], SEP as i32);
        assert_eq!(seq.token_ids[t + 2], SEP as i32);
        assert_eq!(seq.segment_ids[t + 2], segment::HOT_QUERY);
    }

    #[test]
    fn hot_queries_follow_the_given_order_and_budget() {
        let fx = fixture(1);
        let title = vec![20, 21];
        let a = fx.builder.product(&title, &[vec![30], vec![31, 32]], None).unwrap();
        let b = fx.builder.product(&title, &[vec![31, 32], vec![30]], None).unwrap();
        assert_eq!(&a.token_ids[4..7], &[30, 31, 32]);
        assert_eq!(&b.token_ids[4..7], &[31, 32, 30]);
        let budget = fx.builder.config.hot_budget;
        let many: Vec<Vec<u32>> = (0..budget).map(|i| vec![40 + i as u32, 41]).collect();
        let c = fx.builder.product(&title, &many, None).unwrap();
        let hot = c.segment_ids.iter().filter(|s| **s == segment::HOT_QUERY).count() - 1;
        assert_eq!(hot, budget / 2 * 2);
    }

    #[test]
    fn truncation_drops_hot_queries_before_title() {
        let fx = fixture(1);
        let v = fx.bank.get(0);
        let img = v.patch_features.rows() + v.pixel_vectors.rows() + 2;
        let tight = SequenceBuilder::new(fx.builder.config.clone(), Modalities::default(), 3 + img + 6);
        let title: Vec<u32> = (20..26).collect();
        let seq = tight.product(&title, &[vec![30, 31]], Some(v)).unwrap();
        assert_eq!(&seq.token_ids[1..7], &[20, 21, 22, 23, 24, 25]);
        assert!(seq.segment_ids.iter().filter(|s| **s == segment::HOT_QUERY).count() == 1);

        let tighter = SequenceBuilder::new(fx.builder.config.clone(), Modalities::default(), 3 + img + 4);
        let seq = tighter.product(&title, &[vec![30]], Some(v)).unwrap();
        assert_eq!(&seq.token_ids[1..5], &[20, 21, 22, 23]);
        assert_eq!(seq.image.as_ref().unwrap().patch_positions.len(), v.patch_features.rows());

        let impossible = SequenceBuilder::new(fx.builder.config.clone(), Modalities::default(), 3 + img);
        assert!(matches!(impossible.product(&title, &[], Some(v)), Err(Error::Config { .. })));
    }

    #[test]
    fn switched_off_modalities_drop_their_groups() {
        let fx = fixture(1);
        let p = &fx.corpus.products[2];
        let v = fx.bank.get(2);
        let hot = vec![vec![30]];
        let build = |m: Modalities| {
            SequenceBuilder::new(fx.builder.config.clone(), m, 64)
                .product(&p.title, &hot, Some(v))
                .unwrap()
        };
        let text = build(Modalities::text_only());
        assert!(text.image.is_none());
        assert_eq!(text.len(), p.title.len() + 3);
        let roi = build(Modalities {
            use_roi: true,
            use_pixel: false,
            use_hot_query: false,
        });
        assert!(!roi.segment_ids.contains(&segment::PIXEL));
        assert_eq!(roi.image.as_ref().unwrap().pixel_positions.len(), 0);
        let pix = build(Modalities {
            use_roi: false,
            use_pixel: true,
            use_hot_query: true,
        });
        assert!(!pix.segment_ids.contains(&segment::PATCH));
        assert!(pix.token_ids.contains(&30));
    }

    #[test]
    fn query_sequence_is_text_only() {
        let fx = fixture(1);
        let q = fx.builder.query(&[7, 8, 9]).unwrap();
        assert_eq!(q.token_ids, vec![1, 7, 8, 9, 2]);
        assert!(q.segment_ids.iter().all(|s| *s == segment::TEXT));
        assert!(fx.builder.query(&[]).is_err());
    }
}
