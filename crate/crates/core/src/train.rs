//! Pure pieces of the training loop: deterministic batch schedule, one optimizer step and
//! micro-averaged evaluation. File IO and checkpointing live in the companion crate.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{apply_flips, FlipSet, Sample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::network::SegmentationModel;
use crate::objectives::{confusion_counts, ConfusionCounts, MetricsReport};
use crate::optim::AdamW;
use crate::tensor::Tensor;

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> u64 {
    samples.div_ceil(batch_size.max(1)) as u64
}

/// Sample order of `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, samples: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, epoch, 0x5348_5546));
    order.shuffle(&mut rng);
    order
}

/// Dataset indices of global step `step`. The final batch of an epoch may be short.
pub fn batch_indices(seed: u64, step: u64, samples: usize, batch_size: usize) -> Vec<usize> {
    let per_epoch = steps_per_epoch(samples, batch_size);
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize * batch_size;
    let order = epoch_order(seed, epoch, samples);
    order[pos..(pos + batch_size).min(samples)].to_vec()
}

/// Independent fair coin per flip for batch slot `slot` of step `step`.
pub fn flips_for(seed: u64, step: u64, slot: usize) -> FlipSet {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, step, slot as u64 + 1));
    FlipSet {
        horizontal: rng.gen_bool(0.5),
        vertical: rng.gen_bool(0.5),
        diagonal: rng.gen_bool(0.5),
    }
}

/// Stacks the samples of step `step`, flipping each one when `augment` is set. Diagonal flips
/// are skipped for non-square samples.
pub fn assemble_batch(samples: &[Sample], indices: &[usize], augment: bool, seed: u64, step: u64) -> Result<(Tensor, Tensor)> {
    let mut owned = Vec::with_capacity(indices.len());
    for (slot, &i) in indices.iter().enumerate() {
        let s = &samples[i];
        if augment {
            let mut flips = flips_for(seed, step, slot);
            flips.diagonal &= s.height() == s.width();
            owned.push(apply_flips(s, flips)?);
        } else {
            owned.push(s.clone());
        }
    }
    let refs: Vec<&Sample> = owned.iter().collect();
    Sample::batch(&refs)
}

/// Loss and per-parameter gradients (in store order) for one batch.
pub fn loss_and_grads<M: SegmentationModel + ?Sized>(
    model: &M,
    images: &Tensor,
    masks: &Tensor,
    dice_eps: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new(model.params());
    let x = g.input(images.clone());
    let logits = model.logits(&mut g, x)?;
    let loss = g.bce_dice_loss(logits, masks, dice_eps)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, grads.for_store(model.params())))
}

/// One AdamW update. A non-finite loss or gradient aborts before touching the parameters.
pub fn train_step<M: SegmentationModel + ?Sized>(
    model: &mut M,
    opt: &mut AdamW,
    images: &Tensor,
    masks: &Tensor,
    dice_eps: f64,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, images, masks, dice_eps)?;
    if !loss.is_finite() || !grads.iter().all(Tensor::is_finite) {
        return Err(Error::Divergence { step: opt.step + 1, loss });
    }
    opt.step(model.params_mut(), &grads)?;
    Ok(loss)
}

/// Micro-averaged metrics over `samples`, one forward pass per sample.
pub fn evaluate<M: SegmentationModel + ?Sized>(model: &M, samples: &[Sample], threshold: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = ConfusionCounts::default();
    for s in samples {
        let out = model.predict(&s.image)?;
        counts += confusion_counts(&out.probabilities, &s.mask.to_tensor(), threshold)?;
    }
    Ok(MetricsReport::new(counts, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_covers_every_sample_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..steps_per_epoch(n, 4)).flat_map(|s| batch_indices(7, s, n, 4)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn schedule_is_a_pure_function() {
        assert_eq!(batch_indices(3, 17, 9, 2), batch_indices(3, 17, 9, 2));
        assert_eq!(flips_for(3, 17, 1), flips_for(3, 17, 1));
        assert_ne!(epoch_order(3, 0, 50), epoch_order(3, 1, 50));
    }
}
