use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Segment ids of the four input regions.
pub mod segment {
    pub const TEXT: u8 = 0;
    pub const HOT_QUERY: u8 = 1;
    pub const PATCH: u8 = 2;
    pub const PIXEL: u8 = 3;
}

/// Image-derived inputs for the dense (non-token) positions of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokens {
    /// Sequence positions of the RoI patch tokens, ascending.
    pub patch_positions: Vec<usize>,
    /// Frozen patch features, `patches x D1`, already masked where applicable.
    pub patch_features: Tensor<f32>,
    /// Sequence positions of the pixel tokens, ascending.
    pub pixel_positions: Vec<usize>,
    /// Flattened pixel patches, `patches x (h*w*C)`.
    pub pixel_vectors: Tensor<f32>,
}

impl ImageTokens {
    pub fn empty(patch_dim: usize, pixel_dim: usize) -> Self {
        ImageTokens {
            patch_positions: vec![],
            patch_features: Tensor::zeros([0, patch_dim]),
            pixel_positions: vec![],
            pixel_vectors: Tensor::zeros([0, pixel_dim]),
        }
    }

    /// Positions of all dense rows, in the row order used by the projections.
    pub fn dense_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.patch_positions.iter().chain(&self.pixel_positions).copied()
    }
}

/// A fully assembled encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSequence {
    /// Token id per position, `-1` at image positions.
    pub token_ids: Vec<i32>,
    pub segment_ids: Vec<u8>,
    pub position_ids: Vec<usize>,
    /// 1 on real positions, 0 on padding.
    pub attention_mask: Vec<u8>,
    pub image: Option<ImageTokens>,
}

impl InputSequence {
    /// Text-only sequence with contiguous positions and a full mask.
    pub fn from_tokens(tokens: &[u32], segments: &[u8]) -> Self {
        let n = tokens.len();
        InputSequence {
            token_ids: tokens.iter().map(|t| *t as i32).collect(),
            segment_ids: segments.to_vec(),
            position_ids: (0..n).collect(),
            attention_mask: vec![1; n],
            image: None,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn text_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.token_ids
            .iter()
            .enumerate()
            .filter(|(_, t)| **t >= 0)
            .map(|(i, _)| i)
    }

    /// Appends padding up to `len` (token 0, mask 0).
    pub fn pad_to(&mut self, len: usize) {
        while self.token_ids.len() < len {
            let p = self.token_ids.len();
            self.token_ids.push(0);
            self.segment_ids.push(0);
            self.position_ids.push(p);
            self.attention_mask.push(0);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.token_ids.len();
        if n == 0 {
            return Err(Error::Invalid("empty input sequence".into()));
        }
        if self.segment_ids.len() != n || self.position_ids.len() != n || self.attention_mask.len() != n {
            return Err(Error::Invalid(format!(
                "sequence id lists differ in length: tokens {n}, segments {}, positions {}, mask {}",
                self.segment_ids.len(),
                self.position_ids.len(),
                self.attention_mask.len()
            )));
        }
        let mut dense = vec![false; n];
        if let Some(img) = &self.image {
            if img.patch_features.rows() != img.patch_positions.len()
                || img.pixel_vectors.rows() != img.pixel_positions.len()
            {
                return Err(Error::Invalid("image rows do not match their positions".into()));
            }
            for p in img.dense_positions() {
                if p >= n || dense[p] {
                    return Err(Error::Index {
                        what: "image position",
                        index: p as i64,
                        size: n,
                    });
                }
                dense[p] = true;
            }
        }
        for (i, t) in self.token_ids.iter().enumerate() {
            if (*t >= 0) == dense[i] {
                return Err(Error::Invalid(format!(
                    "position {i} must carry exactly one of a token id or a dense input"
                )));
            }
        }
        if self.attention_mask.iter().any(|m| *m > 1) {
            return Err(Error::Invalid("attention mask must be 0/1".into()));
        }
        Ok(())
    }
}
