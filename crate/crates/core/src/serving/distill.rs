use log::info;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ServingConfig;
use crate::encoder::{InputSequence, Model};
use crate::error::{Error, Result};
use crate::finetune::{embed_all, encode_stack};
use crate::tensor::{clip_global_norm, Adam, LrSchedule, Tape, Tensor};

/// Mean cosine between student and teacher embeddings of `seqs`.
pub fn mean_cosine(student: &Model, teacher: &Model, seqs: &[InputSequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Invalid("mean cosine over no sequences".into()));
    }
    let s = embed_all(student, seqs)?;
    let t = embed_all(teacher, seqs)?;
    let total: f64 = s
        .iter()
        .zip(&t)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (*x * *y) as f64).sum::<f64>())
        .sum();
    Ok(total / seqs.len() as f64)
}

/// Trains `student` to match the teacher's unit query embeddings under
/// `distill_weight * (1 - cos)`. The teacher is read only. Returns the
/// per-step `1 - cos`.
pub fn distill(
    student: &mut Model,
    teacher: &Model,
    corpus: &[InputSequence],
    cfg: &ServingConfig,
    seed: u64,
) -> Result<Vec<f32>> {
    if corpus.is_empty() {
        return Err(Error::Invalid("distillation needs a nonempty query corpus".into()));
    }
    let targets = embed_all(teacher, corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(student.encoder_params(), &student.store);
    let schedule = LrSchedule::new(cfg.distill_lr, 0.05, cfg.distill_steps);
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(cfg.distill_steps);
    for step in 0..cfg.distill_steps {
        let pick: Vec<usize> = idx
            .choose_multiple(&mut rng, cfg.distill_batch.min(corpus.len()))
            .copied()
            .collect();
        let seqs: Vec<InputSequence> = pick.iter().map(|i| corpus[*i].clone()).collect();
        let rows: Vec<Vec<f32>> = pick.iter().map(|i| targets[*i].clone()).collect();
        let (mut grads, loss) = {
            let mut tape = Tape::with_params(&student.store);
            let s = encode_stack(student, &mut tape, &seqs, None)?;
            let t = tape.constant(Tensor::from_rows(&rows)?);
            let prod = tape.mul(s, t)?;
            let cos = tape.sum(prod)?;
            let mean = tape.scale(cos, -1.0 / seqs.len() as f32)?;
            let loss = tape.add_scalar(mean, 1.0)?;
            let v = tape.scalar(loss);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    op: "distillation loss".into(),
                });
            }
            let weighted = tape.scale(loss, cfg.distill_weight)?;
            tape.backward(weighted)?;
            (tape.param_grads().restricted(opt.group()), v)
        };
        clip_global_norm(&mut grads, 1.0);
        opt.step(&mut student.store, &grads, schedule.at(step));
        if step % 100 == 0 {
            info!("distill step {step}: 1 - cos {loss:.5}");
        }
        history.push(loss);
    }
    Ok(history)
}

/// Shallower query encoder initialised from the teacher's lower layers and
/// distilled on `corpus`.
pub fn distill_query_encoder(
    teacher: &Model,
    corpus: &[InputSequence],
    cfg: &ServingConfig,
    seed: u64,
) -> Result<(Model, Vec<f32>)> {
    cfg.validate(&teacher.config)?;
    let mut student = teacher.truncated(cfg.student_layers)?;
    student.config.dropout = 0.0;
    let history = distill(&mut student, teacher, corpus, cfg, seed)?;
    Ok((student, history))
}
