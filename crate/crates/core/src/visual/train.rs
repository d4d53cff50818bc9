use rand::seq::SliceRandom;

use super::{encoder_forward, pick_image, stack_images, EncoderConfig, EncoderParams};
use crate::dataset::DatasetBundle;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::similarity::{Modality, Triplet};
use crate::tensor::{adam_step, AdamConfig, AdamState, Float, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct VisualTraining<T> {
    pub params: EncoderParams<T>,
    /// Mean triplet loss per epoch.
    pub history: Vec<f64>,
}

/// Mean triplet loss over a `[3B, d]` stack of anchor, positive and
/// negative embeddings (in that block order).
pub fn batch_triplet_loss<T: Float>(tape: &mut Tape<T>, emb: Var, margin: f64) -> Result<Var> {
    let rows = tape.shape(emb)[0];
    if !rows.is_multiple_of(3) || rows == 0 {
        return Err(Error::dim("batch_triplet_loss", tape.shape(emb), &[3]));
    }
    let b = rows / 3;
    let idx = |k: usize| (k * b..(k + 1) * b).collect::<Vec<_>>();
    let a = tape.gather_rows(emb, &idx(0))?;
    let p = tape.gather_rows(emb, &idx(1))?;
    let n = tape.gather_rows(emb, &idx(2))?;
    let sim_pos = tape.cosine_rows(a, p)?;
    let sim_neg = tape.cosine_rows(a, n)?;
    let gap = tape.sub(sim_neg, sim_pos)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

fn check_triplets(bundle: &DatasetBundle, triplets: &[Triplet], modality: Modality) -> Result<()> {
    if triplets.is_empty() {
        return Err(Error::contract("train_visual_encoder needs at least one triplet"));
    }
    for t in triplets {
        if t.modality != modality {
            return Err(Error::contract(format!(
                "{} triplet given to the {} encoder",
                t.modality.name(),
                modality.name()
            )));
        }
        if t.anchor.max(t.positive).max(t.negative) >= bundle.len() {
            return Err(Error::contract("triplet references a region outside the bundle"));
        }
    }
    Ok(())
}

fn diverged<T: Float>(what: &str, batch: &[&Triplet], bundle: &DatasetBundle, params: &EncoderParams<T>) -> Error {
    let ids: Vec<u32> = batch.iter().map(|t| bundle.regions[t.anchor].region_id).collect();
    let norms: Vec<String> = params
        .params
        .norms()
        .into_iter()
        .map(|(k, v)| format!("{k}={v:.4e}"))
        .collect();
    Error::Diverged(format!(
        "{what}; batch anchor ids {ids:?}; parameter norms [{}]",
        norms.join(", ")
    ))
}

/// Adam over shuffled triplet batches. Every batch stacks its anchor,
/// positive and negative images into one forward pass; street-view slots
/// draw one of the region's images at random each time.
pub fn train_visual_encoder<T: Float>(
    bundle: &DatasetBundle,
    triplets: &[Triplet],
    modality: Modality,
    config: &EncoderConfig,
    exec: Exec,
) -> Result<VisualTraining<T>> {
    config.validate()?;
    if config.input != bundle.image_dims {
        return Err(Error::dim("encoder input", &config.input.shape(), &bundle.image_dims.shape()));
    }
    check_triplets(bundle, triplets, modality)?;

    let mut params = EncoderParams::<T>::init(config, rng::derive_seed(config.seed, "init"))?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..triplets.len()).collect();

    for epoch in 0..config.epochs {
        let mut r = rng::stream_rng(config.seed, epoch as u64);
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Triplet> = chunk.iter().map(|&i| &triplets[i]).collect();
            let mut images = Vec::with_capacity(3 * batch.len());
            for slot in 0..3 {
                for t in &batch {
                    let region = [t.anchor, t.positive, t.negative][slot];
                    images.push(pick_image(&bundle.regions[region], modality, &mut r));
                }
            }
            let x: Tensor<T> = stack_images(&images, config.input)?;

            let mut tape = Tape::with_exec(exec);
            let bound = params.params.bind(&mut tape);
            let xv = tape.constant(x);
            let emb = encoder_forward(&mut tape, &bound, xv, config)?;
            let loss = batch_triplet_loss(&mut tape, emb, config.margin)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(diverged("non-finite triplet loss", &batch, bundle, &params));
            }
            let mut grads = tape.backward(loss)?;
            let grads = bound.grads(&mut grads);
            if grads.values().any(|g| !g.all_finite()) {
                return Err(diverged("non-finite gradient", &batch, bundle, &params));
            }
            adam_step(&mut params.params, &grads, &mut adam)?;
            total += value * batch.len() as f64;
        }
        history.push(total / triplets.len() as f64);
    }
    Ok(VisualTraining { params, history })
}
