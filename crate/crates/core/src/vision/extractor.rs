use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Image;
use crate::encoder::{Checkpoint, SectionTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 3x3, stride 2, zero padding 1, followed by relu.
#[derive(Clone, Debug, PartialEq)]
struct Conv {
    in_ch: usize,
    out_ch: usize,
    /// `[out, in, 3, 3]`
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv {
    fn forward(&self, x: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0f32; oh * ow * self.out_ch];
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = &mut out[(oy * ow + ox) * self.out_ch..(oy * ow + ox + 1) * self.out_ch];
                dst.copy_from_slice(&self.bias);
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = &x[(iy as usize * w + ix as usize) * self.in_ch..][..self.in_ch];
                        for (o, d) in dst.iter_mut().enumerate() {
                            let wrow = &self.weight[(o * self.in_ch) * 9..];
                            let mut acc = 0.0f32;
                            for (i, v) in src.iter().enumerate() {
                                acc += wrow[i * 9 + ky * 3 + kx] * v;
                            }
                            *d += acc;
                        }
                    }
                }
                for d in dst.iter_mut() {
                    *d = d.max(0.0);
                }
            }
        }
        (out, oh, ow)
    }
}

/// Frozen strided convolutional network with fixed random weights,
/// global-average-pooled to a feature vector per patch. It is never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    convs: Vec<Conv>,
}

impl FeatureExtractor {
    /// Three blocks `channels -> 32 -> 64 -> feature_dim`.
    pub fn new(channels: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [channels, 32, 64, feature_dim];
        let convs = widths
            .windows(2)
            .map(|p| {
                let (in_ch, out_ch) = (p[0], p[1]);
                let std = (2.0 / (in_ch * 9) as f32).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                Conv {
                    in_ch,
                    out_ch,
                    weight: (0..out_ch * in_ch * 9).map(|_| normal.sample(&mut rng)).collect(),
                    bias: (0..out_ch).map(|_| rng.random_range(-0.1..0.1)).collect(),
                }
            })
            .collect();
        FeatureExtractor { convs }
    }

    pub fn feature_dim(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_ch)
    }

    pub fn in_channels(&self) -> usize {
        self.convs.first().map_or(0, |c| c.in_ch)
    }

    /// `N x feature_dim` features of equally sized patches.
    pub fn extract(&self, patches: &[Image]) -> Result<Tensor<f32>> {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(patches.len() * d);
        let Some(first) = patches.first() else {
            return Ok(Tensor::zeros([0, d]));
        };
        for p in patches {
            if p.channels() != self.in_channels() || p.height() != first.height() || p.width() != first.width() {
                return Err(Error::Shape {
                    op: "extract_patch_features",
                    lhs: vec![first.height(), first.width(), self.in_channels()],
                    rhs: vec![p.height(), p.width(), p.channels()],
                });
            }
            let (mut x, mut h, mut w) = (p.pixels().to_vec(), p.height(), p.width());
            for conv in &self.convs {
                (x, h, w) = conv.forward(&x, h, w);
            }
            let cells = (h * w) as f32;
            for c in 0..d {
                data.push((0..h * w).map(|i| x[i * d + c]).sum::<f32>() / cells);
            }
        }
        Tensor::new([patches.len(), d], data)
    }

    pub fn write_sections(&self, ck: &mut Checkpoint) {
        for (i, c) in self.convs.iter().enumerate() {
            let w = Tensor::new([c.out_ch, c.in_ch, 3, 3], c.weight.clone()).expect("conv shape");
            ck.push(SectionTag::Extractor, format!("extractor.conv{i}.weight"), w);
            ck.push(SectionTag::Extractor, format!("extractor.conv{i}.bias"), Tensor::vector(c.bias.clone()));
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut convs = Vec::new();
        for i in 0.. {
            let Some(w) = ck.section(SectionTag::Extractor, &format!("extractor.conv{i}.weight")) else {
                break;
            };
            let b = ck
                .section(SectionTag::Extractor, &format!("extractor.conv{i}.bias"))
                .ok_or_else(|| Error::format("checkpoint", format!("extractor conv{i} has no bias")))?;
            let s = w.shape();
            if s.len() != 4 || s[2] != 3 || s[3] != 3 || b.shape() != [s[0]] {
                return Err(Error::format("checkpoint", format!("bad extractor conv{i} shape {s:?}")));
            }
            if let Some(prev) = convs.last().map(|c: &Conv| c.out_ch) {
                if prev != s[1] {
                    return Err(Error::format("checkpoint", format!("extractor conv{i} expects {} inputs", s[1])));
                }
            }
            convs.push(Conv {
                in_ch: s[1],
                out_ch: s[0],
                weight: w.data().to_vec(),
                bias: b.data().to_vec(),
            });
        }
        if convs.is_empty() {
            return Err(Error::format("checkpoint", "no extractor weights"));
        }
        Ok(FeatureExtractor { convs })
    }
}
