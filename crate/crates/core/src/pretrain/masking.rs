use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::zero_rows;
use crate::encoder::InputSequence;
use crate::synth::vocab::MASK;
use crate::tensor::Tensor;

pub const MASK_RATIO: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    /// Replace with `[MASK]`.
    Mask,
    /// Replace with the given random word.
    Random(u32),
    /// Leave the token unchanged (still predicted).
    Keep,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sequence positions of the selected text tokens, ascending.
    pub text_positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    /// Indices into the sequence's patch rows whose features are zeroed.
    pub patch_rows: Vec<usize>,
}

/// Selection size for `n` candidates: 15% rounded, at least one when `n > 0`.
pub fn mask_count(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        ((n as f64 * MASK_RATIO).round() as usize).max(1)
    }
}

/// BERT-style plan: 15% of the real word tokens (80% `[MASK]`, 10% random word
/// from `words`, 10% unchanged) and 15% of the patch rows. Special tokens,
/// padding and pixel tokens are never selected.
pub fn plan_masks(seq: &InputSequence, seed: u64, words: std::ops::Range<u32>) -> MaskPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<usize> = (0..seq.len())
        .filter(|&i| seq.attention_mask[i] == 1 && seq.token_ids[i] >= words.start as i32)
        .collect();
    let k = mask_count(candidates.len());
    let mut text_positions: Vec<usize> = sample(&mut rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    text_positions.sort_unstable();
    let actions = text_positions
        .iter()
        .map(|_| match rng.random_range(0..10) {
            0 => MaskAction::Random(rng.random_range(words.clone())),
            1 => MaskAction::Keep,
            _ => MaskAction::Mask,
        })
        .collect();
    let n_patch = seq.image.as_ref().map_or(0, |img| img.patch_positions.len());
    let mut patch_rows = sample(&mut rng, n_patch, mask_count(n_patch)).into_vec();
    patch_rows.sort_unstable();
    MaskPlan {
        text_positions,
        actions,
        patch_rows,
    }
}

/// A masked input with its prediction targets.
#[derive(Clone, Debug)]
pub struct MaskedInstance {
    pub seq: InputSequence,
    pub mlm_positions: Vec<usize>,
    pub mlm_targets: Vec<usize>,
    /// Sequence positions of the masked patches.
    pub mpm_positions: Vec<usize>,
    /// Original features of the masked patches, one row each.
    pub mpm_targets: Tensor<f32>,
}

pub fn apply_masks(seq: &InputSequence, plan: &MaskPlan) -> MaskedInstance {
    let mut out = seq.clone();
    let mut mlm_targets = Vec::with_capacity(plan.text_positions.len());
    for (&p, a) in plan.text_positions.iter().zip(&plan.actions) {
        mlm_targets.push(seq.token_ids[p] as usize);
        match a {
            MaskAction::Mask => out.token_ids[p] = MASK as i32,
            MaskAction::Random(t) => out.token_ids[p] = *t as i32,
            MaskAction::Keep => {}
        }
    }
    let (mpm_positions, mpm_targets) = match (&mut out.image, plan.patch_rows.is_empty()) {
        (Some(img), false) => {
            let d = img.patch_features.cols();
            let mut targets = Vec::with_capacity(plan.patch_rows.len() * d);
            for &r in &plan.patch_rows {
                targets.extend_from_slice(img.patch_features.row(r));
            }
            let positions = plan.patch_rows.iter().map(|r| img.patch_positions[*r]).collect();
            img.patch_features = zero_rows(&img.patch_features, &plan.patch_rows);
            (
                positions,
                Tensor::new([plan.patch_rows.len(), d], targets).expect("target shape"),
            )
        }
        (img, _) => (
            vec![],
            Tensor::zeros([0, img.as_ref().map_or(0, |i| i.patch_features.cols())]),
        ),
    };
    MaskedInstance {
        seq: out,
        mlm_positions: plan.text_positions.clone(),
        mlm_targets,
        mpm_positions,
        mpm_targets,
    }
}
