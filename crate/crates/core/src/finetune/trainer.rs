use std::fmt;
use std::io::Write;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::hot::{HotQueryTable, HOT_LIMIT};
use super::losses::{adversarial_loss, confusion_loss, semantic_matching_loss};
use super::sampler::{partition_dataset, sample_batch, Partition, TrainPair};
use crate::assembly::{FeatureBank, SequenceBuilder};
use crate::encoder::{InputSequence, Model};
use crate::error::{Error, Result};
use crate::synth::Corpus;
use crate::tensor::{clip_global_norm, lit, Adam, Axis, Element, LrSchedule, ParamId, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Encoder steps.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub discriminator_lr: f32,
    pub warmup_fraction: f32,
    /// Smoothing factor on cosine similarities.
    pub gamma: f64,
    /// Encoder steps per discriminator step.
    pub k: usize,
    pub partitions: usize,
    pub use_adversarial: bool,
    /// Weight of the adversarial term in the encoder phase.
    pub adversarial_weight: f64,
    pub adversarial_mode: AdversarialMode,
    pub clip_norm: f64,
    pub hot_limit: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            discriminator_lr: 1e-2,
            warmup_fraction: 0.1,
            gamma: 20.0,
            k: 5,
            partitions: 4,
            use_adversarial: true,
            adversarial_weight: 0.3,
            adversarial_mode: AdversarialMode::Reverse,
            clip_norm: 1.0,
            hot_limit: HOT_LIMIT,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("finetune.batch_size", "needs at least 2 pairs for in-batch negatives"));
        }
        if !(self.lr > 0.0) || !(self.discriminator_lr > 0.0) {
            return Err(Error::config("finetune.lr", "learning rates must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("finetune.warmup_fraction", "must be in [0, 1]"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("finetune.gamma", "must be positive"));
        }
        if self.k == 0 {
            return Err(Error::config("finetune.k", "must be at least 1"));
        }
        if self.partitions == 0 {
            return Err(Error::config("finetune.partitions", "must be at least 1"));
        }
        if !(self.adversarial_weight >= 0.0) {
            return Err(Error::config("finetune.adversarial_weight", "must be non-negative"));
        }
        Ok(())
    }
}

/// What the encoder does with the discriminator in its phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdversarialMode {
    /// Descend `L_main - w * L_adv`: push the discriminator's loss up.
    Reverse,
    /// Descend `L_main + w * C`, where `C` is the cross-entropy of the
    /// discriminator's outputs against 1/2 on both domains.
    Confusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Encoder,
    Discriminator,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Encoder => "encoder",
            Phase::Discriminator => "discriminator",
        })
    }
}

/// Assembled query and product sequences for `W` pairs.
#[derive(Clone, Debug)]
pub struct FinetuneBatch {
    pub pairs: Vec<TrainPair>,
    pub queries: Vec<InputSequence>,
    pub products: Vec<InputSequence>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub main: f32,
    /// Adversarial loss; zero when adversarial training is off.
    pub adversarial: f32,
}

/// The two optimizer groups of minimax training.
pub struct Optimizers {
    pub encoder: Adam,
    pub discriminator: Adam,
}

impl Optimizers {
    pub fn new(model: &Model) -> Self {
        Optimizers {
            encoder: Adam::new(model.encoder_params(), &model.store),
            discriminator: Adam::new(model.discriminator_params(), &model.store),
        }
    }
}

/// Product sequence with the product's hot queries (in table order).
pub fn product_sequence(
    builder: &SequenceBuilder,
    corpus: &Corpus,
    bank: &FeatureBank,
    hot: &HotQueryTable,
    product_id: u32,
) -> Result<InputSequence> {
    let p = corpus
        .product(product_id)
        .ok_or_else(|| Error::Invalid(format!("unknown product {product_id}")))?;
    let hot_tokens = if builder.modalities.use_hot_query {
        hot.tokens(product_id, &corpus.queries)
    } else {
        Vec::new()
    };
    builder.product(&p.title, &hot_tokens, Some(bank.get(product_id)))
}

pub fn query_sequence(builder: &SequenceBuilder, corpus: &Corpus, query_id: u32) -> Result<InputSequence> {
    let q = corpus
        .query(query_id)
        .ok_or_else(|| Error::Invalid(format!("unknown query {query_id}")))?;
    builder.query(&q.tokens)
}

/// Stacked embeddings of `seqs` on `tape`.
pub fn encode_stack<T: Element>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    seqs: &[InputSequence],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(seqs.len());
    for s in seqs {
        rows.push(model.encode(tape, s, dropout.as_deref_mut())?.embedding);
    }
    tape.concat(&rows, Axis::Rows)
}

/// Inference embeddings, one row per sequence.
pub fn embed_all(model: &Model, seqs: &[InputSequence]) -> Result<Vec<Vec<f32>>> {
    seqs.iter().map(|s| model.embed(s)).collect()
}

fn tag(phase: Phase) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{phase} phase ({op})"),
        },
        e => e,
    }
}

fn finite(v: f32, phase: Phase, what: &str) -> Result<f32> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            op: format!("{phase} phase {what} loss"),
        })
    }
}

/// Encoder-phase objective `L_main - weight * L_adv` (just `L_main` when
/// `adversarial` is off); returns the objective and both components.
pub fn encoder_objective<T: Element>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    batch: &FinetuneBatch,
    gamma: f64,
    adversarial: Option<(f64, AdversarialMode)>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var, Option<Var>)> {
    let q = encode_stack(model, tape, &batch.queries, dropout.as_deref_mut())?;
    let a = encode_stack(model, tape, &batch.products, dropout.as_deref_mut())?;
    let main = semantic_matching_loss(tape, q, a, gamma)?;
    match adversarial {
        Some((w, mode)) => {
            let dq = model.discriminate(tape, q)?;
            let da = model.discriminate(tape, a)?;
            let adv = adversarial_loss(tape, dq, da)?;
            let total = match mode {
                AdversarialMode::Reverse => {
                    let scaled = tape.scale(adv, lit(w))?;
                    tape.sub(main, scaled)?
                }
                AdversarialMode::Confusion => {
                    let c = confusion_loss(tape, dq, da)?;
                    let scaled = tape.scale(c, lit(w))?;
                    tape.add(main, scaled)?
                }
            };
            Ok((total, main, Some(adv)))
        }
        None => Ok((main, main, None)),
    }
}

/// Discriminator loss on fixed embeddings.
pub fn discriminator_objective<T: Element>(
    model: &Model<T>,
    tape: &mut Tape<'_, T>,
    query_embs: &Tensor<T>,
    product_embs: &Tensor<T>,
) -> Result<Var> {
    let q = tape.constant(query_embs.clone());
    let a = tape.constant(product_embs.clone());
    let dq = model.discriminate(tape, q)?;
    let da = model.discriminate(tape, a)?;
    adversarial_loss(tape, dq, da)
}

fn rows_tensor(rows: &[Vec<f32>]) -> Result<Tensor<f32>> {
    Tensor::from_rows(rows)
}

/// One minimax update. The encoder phase descends `L_main - w * L_adv` over
/// the encoder group only; the discriminator phase descends `L_adv` over the
/// discriminator only, on embeddings from the current (frozen) encoder.
pub fn minimax_step(
    model: &mut Model,
    opts: &mut Optimizers,
    batch: &FinetuneBatch,
    phase: Phase,
    cfg: &FinetuneConfig,
    lr: f32,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<StepLosses> {
    match phase {
        Phase::Encoder => {
            let adv_weight = cfg.use_adversarial.then_some((cfg.adversarial_weight, cfg.adversarial_mode));
            let (grads, losses) = {
                let mut tape = Tape::with_params(&model.store);
                let (total, main, adv) =
                    encoder_objective(model, &mut tape, batch, cfg.gamma, adv_weight, dropout).map_err(tag(phase))?;
                let losses = StepLosses {
                    main: finite(tape.scalar(main), phase, "semantic matching")?,
                    adversarial: match adv {
                        Some(a) => finite(tape.scalar(a), phase, "adversarial")?,
                        None => 0.0,
                    },
                };
                tape.backward(total).map_err(tag(phase))?;
                (tape.param_grads().restricted(opts.encoder.group()), losses)
            };
            step_group(&mut opts.encoder, model, grads, lr, cfg.clip_norm);
            Ok(losses)
        }
        Phase::Discriminator => {
            let q = rows_tensor(&embed_all(model, &batch.queries)?)?;
            let a = rows_tensor(&embed_all(model, &batch.products)?)?;
            let (grads, adv) = {
                let mut tape = Tape::with_params(&model.store);
                let adv = discriminator_objective(model, &mut tape, &q, &a).map_err(tag(phase))?;
                let value = finite(tape.scalar(adv), phase, "adversarial")?;
                tape.backward(adv).map_err(tag(phase))?;
                (tape.param_grads().restricted(opts.discriminator.group()), value)
            };
            step_group(&mut opts.discriminator, model, grads, lr, cfg.clip_norm);
            Ok(StepLosses {
                main: f32::NAN,
                adversarial: adv,
            })
        }
    }
}

fn step_group(opt: &mut Adam, model: &mut Model, mut grads: crate::tensor::Gradients<f32>, lr: f32, clip: f64) {
    if clip > 0.0 {
        clip_global_norm(&mut grads, clip);
    }
    opt.step(&mut model.store, &grads, lr);
}

/// Batch source: partitions of the clicked pairs plus everything needed to
/// assemble sequences.
pub struct FinetuneData<'a> {
    pub corpus: &'a Corpus,
    pub bank: &'a FeatureBank,
    pub hot: &'a HotQueryTable,
    pub builder: SequenceBuilder,
    pub partitions: Vec<Partition>,
    rng: ChaCha8Rng,
}

impl<'a> FinetuneData<'a> {
    pub fn new(
        corpus: &'a Corpus,
        bank: &'a FeatureBank,
        hot: &'a HotQueryTable,
        builder: SequenceBuilder,
        pairs: &[TrainPair],
        partitions: usize,
        seed: u64,
    ) -> Result<Self> {
        let parts = partition_dataset(pairs, |p| corpus.products[p as usize].category, partitions, seed)?;
        Ok(FinetuneData {
            corpus,
            bank,
            hot,
            builder,
            partitions: parts,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
        })
    }

    pub fn assemble(&self, pairs: Vec<TrainPair>) -> Result<FinetuneBatch> {
        let queries = pairs
            .iter()
            .map(|p| query_sequence(&self.builder, self.corpus, p.query_id))
            .collect::<Result<Vec<_>>>()?;
        let products = pairs
            .iter()
            .map(|p| product_sequence(&self.builder, self.corpus, self.bank, self.hot, p.product_id))
            .collect::<Result<Vec<_>>>()?;
        Ok(FinetuneBatch {
            pairs,
            queries,
            products,
        })
    }

    pub fn next_batch(&mut self, w: usize) -> Result<FinetuneBatch> {
        let pairs = sample_batch(&self.partitions, w, &mut self.rng)?;
        self.assemble(pairs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub losses: StepLosses,
    pub lr: f32,
}

#[derive(Clone, Debug, Default)]
pub struct FinetuneReport {
    pub history: Vec<StepRecord>,
    /// Phases whose freeze contract was verified by parameter hashing.
    pub freeze_checks: usize,
}

impl FinetuneReport {
    pub fn encoder_steps(&self) -> impl DoubleEndedIterator<Item = &StepRecord> {
        self.history.iter().filter(|r| r.phase == Phase::Encoder)
    }
}

fn frozen_ids(model: &Model, phase: Phase) -> Vec<ParamId> {
    match phase {
        Phase::Encoder => model.discriminator_params(),
        Phase::Discriminator => model.encoder_params(),
    }
}

/// Alternating training: `k` encoder steps, then one discriminator step when
/// adversarial training is on. Every phase's frozen group is hashed before
/// and after the update; any change aborts the run. Writes a TSV line per
/// phase (`step, phase, main, adversarial, lr`) to `log`.
pub fn finetune(
    model: &mut Model,
    data: &mut FinetuneData<'_>,
    cfg: &FinetuneConfig,
    seed: u64,
    log: &mut dyn Write,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    let mut opts = Optimizers::new(model);
    let schedule = LrSchedule::new(cfg.lr, cfg.warmup_fraction, cfg.steps);
    let mut dropout = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FinetuneReport::default();
    writeln!(log, "step\tphase\tmain\tadversarial\tlr")?;
    let mut run_phase = |model: &mut Model,
                         opts: &mut Optimizers,
                         phase: Phase,
                         step: usize,
                         lr: f32,
                         data: &mut FinetuneData<'_>,
                         report: &mut FinetuneReport|
     -> Result<()> {
        let batch = data.next_batch(cfg.batch_size)?;
        let frozen = frozen_ids(model, phase);
        let before = model.store.fingerprint(&frozen);
        let rng = (phase == Phase::Encoder).then_some(&mut dropout);
        let losses = minimax_step(model, opts, &batch, phase, cfg, lr, rng)?;
        if model.store.fingerprint(&frozen) != before {
            return Err(Error::Invalid(format!("frozen parameters changed during the {phase} phase")));
        }
        report.freeze_checks += 1;
        writeln!(log, "{step}\t{phase}\t{:.6}\t{:.6}\t{lr:.3e}", losses.main, losses.adversarial)?;
        report.history.push(StepRecord {
            step,
            phase,
            losses,
            lr,
        });
        Ok(())
    };
    for step in 0..cfg.steps {
        let lr = schedule.at(step);
        run_phase(model, &mut opts, Phase::Encoder, step, lr, data, &mut report)?;
        if cfg.use_adversarial && (step + 1) % cfg.k == 0 {
            run_phase(model, &mut opts, Phase::Discriminator, step, cfg.discriminator_lr, data, &mut report)?;
        }
        if step % 100 == 0 || step + 1 == cfg.steps {
            let r = report.encoder_steps().last().expect("encoder step recorded");
            info!(
                "finetune step {step}: main {:.4} adv {:.4} lr {lr:.2e}",
                r.losses.main, r.losses.adversarial
            );
        }
    }
    Ok(report)
}
