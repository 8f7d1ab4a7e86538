use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{bce_loss, mlm_loss, mpm_loss};
use super::masking::{apply_masks, plan_masks, MaskedInstance};
use crate::assembly::{FeatureBank, SequenceBuilder};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::synth::vocab::SPECIALS;
use crate::synth::Corpus;
use crate::tensor::{clip_global_norm, Adam, Axis, Element, LrSchedule, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_fraction: f32,
    pub clip_norm: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("pretrain.warmup_fraction", "must be in [0, 1]"));
        }
        Ok(())
    }
}

/// One text-image pair for the TIP task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TipPair {
    pub title_of: u32,
    pub image_of: u32,
    pub label: bool,
}

/// One epoch of TIP pairs: every product's own image (label 1) plus three
/// images of uniformly drawn other products (label 0), shuffled.
pub fn sample_tip_pairs(n_products: usize, seed: u64) -> Result<Vec<TipPair>> {
    if n_products < 2 {
        return Err(Error::Invalid(
            "text-image pairs need at least two products to draw negatives from".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_products * 4);
    for p in 0..n_products as u32 {
        out.push(TipPair {
            title_of: p,
            image_of: p,
            label: true,
        });
        for _ in 0..3 {
            let mut other = rng.random_range(0..n_products as u32 - 1);
            if other >= p {
                other += 1;
            }
            out.push(TipPair {
                title_of: p,
                image_of: other,
                label: false,
            });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct PretrainInstance {
    pub masked: MaskedInstance,
    pub label: bool,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainBatch {
    pub instances: Vec<PretrainInstance>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainLosses {
    pub mlm: f32,
    pub mpm: f32,
    pub tip: f32,
}

impl PretrainLosses {
    pub fn total(&self) -> f32 {
        self.mlm + self.mpm + self.tip
    }
}

fn tag(component: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("pretrain {component} ({op})"),
        },
        e => e,
    }
}

fn check(v: f32, component: &str) -> Result<f32> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            op: format!("pretrain {component} loss"),
        })
    }
}

/// Forward pass of the three pretraining objectives; returns the unit-weight
/// total and the components.
pub fn pretrain_losses<T: Element>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    batch: &PretrainBatch,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Var, [Var; 3])> {
    let mut mlm_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    let mut mpm_rows = Vec::new();
    let mut mpm_targets: Vec<f32> = Vec::new();
    let mut cls_rows = Vec::new();
    let mut labels = Vec::new();
    for inst in &batch.instances {
        let m = &inst.masked;
        let enc = model.encode(tape, &m.seq, dropout.as_deref_mut()).map_err(tag("encoder"))?;
        if !m.mlm_positions.is_empty() {
            mlm_rows.push(tape.gather_rows(enc.hidden, &m.mlm_positions)?);
            mlm_targets.extend_from_slice(&m.mlm_targets);
        }
        if !m.mpm_positions.is_empty() {
            mpm_rows.push(tape.gather_rows(enc.hidden, &m.mpm_positions)?);
            mpm_targets.extend_from_slice(m.mpm_targets.data());
        }
        cls_rows.push(tape.slice(enc.hidden, Axis::Rows, 0, 1)?);
        labels.push(if inst.label { 1.0 } else { 0.0 });
    }
    let ids = &model.ids;
    let stack = |tape: &mut Tape<'_, T>, rows: &[Var]| -> Result<Option<Var>> {
        match rows.len() {
            0 => Ok(None),
            1 => Ok(Some(rows[0])),
            _ => tape.concat(rows, Axis::Rows).map(Some),
        }
    };
    let mlm = match stack(tape, &mlm_rows)? {
        Some(h) => {
            let logits = ids.mlm_head.forward(tape, h).map_err(tag("MLM"))?;
            mlm_loss(tape, logits, &mlm_targets).map_err(tag("MLM"))?
        }
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    let mpm = match stack(tape, &mpm_rows)? {
        Some(h) => {
            let pred = ids.mpm_head.forward(tape, h).map_err(tag("MPM"))?;
            let d = model.config.patch_feature_dim;
            let raw = Tensor::new([mpm_targets.len() / d, d], mpm_targets)?.cast();
            mpm_loss(tape, pred, &raw).map_err(tag("MPM"))?
        }
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    let tip = match stack(tape, &cls_rows)? {
        Some(h) => {
            let logit = ids.tip_head.forward(tape, h).map_err(tag("TIP"))?;
            let score = tape.sigmoid(logit).map_err(tag("TIP"))?;
            bce_loss(tape, score, &labels).map_err(tag("TIP"))?
        }
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    let total = tape.add(mlm, mpm)?;
    let total = tape.add(total, tip)?;
    Ok((total, [mlm, mpm, tip]))
}

/// One joint update: a single backward pass of `L_MLM + L_MPM + L_TIP` and
/// one optimizer step. The frozen vision extractor is outside the model and
/// never touched.
pub fn pretrain_step(
    model: &mut Model,
    optimizer: &mut Adam,
    batch: &PretrainBatch,
    lr: f32,
    clip_norm: f64,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<PretrainLosses> {
    let (grads, losses) = {
        let mut tape = Tape::with_params(&model.store);
        let (total, [mlm, mpm, tip]) = pretrain_losses(model, &mut tape, batch, dropout)?;
        let losses = PretrainLosses {
            mlm: check(tape.scalar(mlm), "MLM")?,
            mpm: check(tape.scalar(mpm), "MPM")?,
            tip: check(tape.scalar(tip), "TIP")?,
        };
        tape.backward(total)?;
        (tape.param_grads(), losses)
    };
    let mut grads = grads;
    if clip_norm > 0.0 {
        clip_global_norm(&mut grads, clip_norm);
    }
    optimizer.step(&mut model.store, &grads, lr);
    Ok(losses)
}

/// Streams masked TIP instances over the catalog, epoch after epoch.
pub struct PretrainData<'a> {
    corpus: &'a Corpus,
    bank: &'a FeatureBank,
    builder: SequenceBuilder,
    seed: u64,
    epoch: u64,
    pairs: Vec<TipPair>,
    cursor: usize,
    drawn: u64,
}

impl<'a> PretrainData<'a> {
    pub fn new(corpus: &'a Corpus, bank: &'a FeatureBank, builder: SequenceBuilder, seed: u64) -> Result<Self> {
        let pairs = sample_tip_pairs(corpus.products.len(), seed)?;
        Ok(PretrainData {
            corpus,
            bank,
            builder,
            seed,
            epoch: 0,
            pairs,
            cursor: 0,
            drawn: 0,
        })
    }

    pub fn next_batch(&mut self, size: usize) -> Result<PretrainBatch> {
        let words = SPECIALS.len() as u32..self.corpus.vocab.len() as u32;
        let mut instances = Vec::with_capacity(size);
        while instances.len() < size {
            if self.cursor == self.pairs.len() {
                self.epoch += 1;
                self.pairs = sample_tip_pairs(self.corpus.products.len(), self.seed.wrapping_add(self.epoch))?;
                self.cursor = 0;
            }
            let pair = self.pairs[self.cursor];
            self.cursor += 1;
            let title = &self.corpus.products[pair.title_of as usize].title;
            let seq = self.builder.product(title, &[], Some(self.bank.get(pair.image_of)))?;
            let plan = plan_masks(&seq, self.seed ^ self.drawn.wrapping_mul(0x2545_F491_4F6C_DD1D), words.clone());
            self.drawn += 1;
            instances.push(PretrainInstance {
                masked: apply_masks(&seq, &plan),
                label: pair.label,
            });
        }
        Ok(PretrainBatch { instances })
    }
}

/// Runs `cfg.steps` pretraining steps, writing one TSV line per step
/// (`step, mlm, mpm, tip, lr`) to `log`.
pub fn pretrain(
    model: &mut Model,
    data: &mut PretrainData<'_>,
    cfg: &PretrainConfig,
    seed: u64,
    log: &mut dyn Write,
) -> Result<Vec<PretrainLosses>> {
    cfg.validate()?;
    let mut group = model.encoder_params();
    group.extend(model.head_params());
    let mut opt = Adam::new(group, &model.store);
    let schedule = LrSchedule::new(cfg.lr, cfg.warmup_fraction, cfg.steps);
    let mut dropout = ChaCha8Rng::seed_from_u64(seed);
    writeln!(log, "step\tmlm\tmpm\ttip\tlr")?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = data.next_batch(cfg.batch_size)?;
        let lr = schedule.at(step);
        let l = pretrain_step(model, &mut opt, &batch, lr, cfg.clip_norm, Some(&mut dropout))?;
        writeln!(log, "{step}\t{:.6}\t{:.6}\t{:.6}\t{lr:.3e}", l.mlm, l.mpm, l.tip)?;
        if step % 50 == 0 || step + 1 == cfg.steps {
            info!(
                "pretrain step {step}: mlm {:.4} mpm {:.4} tip {:.4} lr {lr:.2e}",
                l.mlm, l.mpm, l.tip
            );
        }
        history.push(l);
    }
    Ok(history)
}
