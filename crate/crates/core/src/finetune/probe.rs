use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Logistic-regression classifier on standardized features, fit by full-batch
/// gradient descent.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    weights: Vec<f64>,
    bias: f64,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

const PROBE_EPOCHS: usize = 400;
const PROBE_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-4;

impl LinearProbe {
    pub fn fit(x: &[Vec<f32>], y: &[bool]) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Invalid("probe needs one label per nonempty row".into()));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += *v as f64 / n;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for k in 0..d {
                scale[k] += (row[k] as f64 - mean[k]).powi(2) / n;
            }
        }
        let scale: Vec<f64> = scale.into_iter().map(|v| 1.0 / v.sqrt().max(1e-6)).collect();
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| (0..d).map(|k| (r[k] as f64 - mean[k]) * scale[k]).collect())
            .collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..PROBE_EPOCHS {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (row, &label) in z.iter().zip(y) {
                let s: f64 = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let err = 1.0 / (1.0 + (-s).exp()) - if label { 1.0 } else { 0.0 };
                gb += err;
                for k in 0..d {
                    gw[k] += err * row[k];
                }
            }
            for k in 0..d {
                w[k] -= PROBE_LR * (gw[k] / n + PROBE_L2 * w[k]);
            }
            b -= PROBE_LR * gb / n;
        }
        Ok(LinearProbe {
            weights: w,
            bias: b,
            mean,
            scale,
        })
    }

    pub fn predict(&self, row: &[f32]) -> bool {
        let s: f64 = self.bias
            + row
                .iter()
                .enumerate()
                .map(|(k, v)| (*v as f64 - self.mean[k]) * self.scale[k] * self.weights[k])
                .sum::<f64>();
        s > 0.0
    }

    pub fn accuracy(&self, x: &[Vec<f32>], y: &[bool]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, l)| self.predict(r) == **l).count();
        hits as f64 / x.len().max(1) as f64
    }
}

/// Held-out accuracy of a fresh linear probe separating query embeddings
/// from product embeddings. Classes are balanced by truncation and split in
/// half for fitting and scoring.
pub fn domain_probe_accuracy(queries: &[Vec<f32>], products: &[Vec<f32>], seed: u64) -> Result<f64> {
    let n = queries.len().min(products.len());
    if n < 4 {
        return Err(Error::Invalid("domain probe needs at least 4 embeddings per side".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |src: &[Vec<f32>]| {
        let mut idx: Vec<usize> = (0..src.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.into_iter().map(|i| src[i].clone()).collect::<Vec<_>>()
    };
    let (q, p) = (pick(queries), pick(products));
    let half = n / 2;
    let split = |lo: usize, hi: usize| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in lo..hi {
            x.push(q[i].clone());
            y.push(true);
            x.push(p[i].clone());
            y.push(false);
        }
        (x, y)
    };
    let (tx, ty) = split(0, half);
    let (hx, hy) = split(half, n);
    let probe = LinearProbe::fit(&tx, &ty)?;
    Ok(probe.accuracy(&hx, &hy))
}
