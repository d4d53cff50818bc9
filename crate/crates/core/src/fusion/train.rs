use rand::seq::SliceRandom;

use super::{fuse_tables, fuse_tape, infonce_tape, text_side_tape, FusionParams};
use crate::dataset::DatasetBundle;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::tensor::{adam_step, AdamConfig, AdamState, Float, Tape, Var};
use crate::similarity::Modality;
use crate::visual::{embed_regions, encoder_forward, stack_images, EncoderParams};

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentConfig {
    pub batch_size: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Hidden width of the attention MLP; `None` uses the embedding dim.
    pub hidden_dim: Option<usize>,
    /// Keep the visual encoders fixed during alignment.
    pub freeze_encoders: bool,
    /// Add the text-to-image InfoNCE direction.
    pub symmetric: bool,
    /// Learn a linear map from the text space to the image space.
    pub text_adapter: bool,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            temperature: 1.0,
            epochs: 100,
            lr: 5e-4,
            hidden_dim: None,
            freeze_encoders: true,
            symmetric: false,
            text_adapter: true,
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("alignment batch_size must be at least 2".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("alignment lr must be positive, got {}", self.lr)));
        }
        if self.hidden_dim == Some(0) {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Where the image embeddings come from during alignment.
pub enum ImageInputs<'a, T> {
    /// Precomputed region embeddings; encoders stay untouched.
    Frozen {
        sv: &'a EmbeddingTable<T>,
        rv: &'a EmbeddingTable<T>,
    },
    /// Encoders run inside every batch and are updated with the fusion.
    Joint {
        bundle: &'a DatasetBundle,
        sv: &'a EncoderParams<T>,
        rv: &'a EncoderParams<T>,
    },
}

pub struct FusionData<'a, T> {
    pub region_ids: &'a [u32],
    pub images: ImageInputs<'a, T>,
    pub poi: &'a EmbeddingTable<T>,
    /// Region positions used for the alignment batches.
    pub train: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct FusionTraining<T> {
    pub params: FusionParams<T>,
    /// Parameters at initialization, before any alignment step.
    pub initial: FusionParams<T>,
    /// Mean InfoNCE per epoch.
    pub history: Vec<f64>,
    /// Post-alignment fused embedding of every region.
    pub embeddings: EmbeddingTable<T>,
    pub betas: Vec<(T, T)>,
    /// Updated encoders when trained jointly.
    pub encoders: Option<(EncoderParams<T>, EncoderParams<T>)>,
}

fn check_cover<T: Float>(name: &str, table: &EmbeddingTable<T>, ids: &[u32]) -> Result<()> {
    if table.len() < ids.len() {
        return Err(Error::contract(format!(
            "{name} embeddings missing for region {} (table has {} rows, {} regions)",
            ids[table.len()],
            table.len(),
            ids.len()
        )));
    }
    if table.len() > ids.len() {
        return Err(Error::contract(format!("{name} embeddings have {} rows for {} regions", table.len(), ids.len())));
    }
    Ok(())
}

/// Batches of training positions; a trailing singleton joins the previous
/// batch since InfoNCE needs at least two rows.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().map(Vec::len) == Some(1) {
        let last = out.pop().expect("len > 1");
        out.last_mut().expect("len > 0").extend(last);
    }
    out
}

/// Region-level SV and RV embeddings for `batch` computed on the tape.
fn joint_images<T: Float>(
    tape: &mut Tape<T>,
    bundle: &DatasetBundle,
    enc: [(&EncoderParams<T>, &crate::tensor::Bound); 2],
    batch: &[usize],
) -> Result<(Var, Var)> {
    let (sv_p, sv_b) = enc[0];
    let (rv_p, rv_b) = enc[1];
    let sv_imgs: Vec<_> = batch.iter().flat_map(|&i| bundle.regions[i].sv_images.iter()).collect();
    let lengths: Vec<usize> = batch.iter().map(|&i| bundle.regions[i].sv_images.len()).collect();
    let x = tape.constant(stack_images(&sv_imgs, sv_p.config.input)?);
    let per_image = encoder_forward(tape, sv_b, x, &sv_p.config)?;
    let mean = tape.segment_mean(per_image, &lengths)?;
    let sv = tape.l2_normalize(mean);
    let rv_imgs: Vec<_> = batch.iter().map(|&i| &bundle.regions[i].rv_image).collect();
    let x = tape.constant(stack_images(&rv_imgs, rv_p.config.input)?);
    let rv = encoder_forward(tape, rv_b, x, &rv_p.config)?;
    Ok((sv, rv))
}

/// Optimizes InfoNCE between fused image embeddings and (adapted) POI
/// embeddings over shuffled batches of the training regions.
pub fn train_fusion<T: Float>(data: FusionData<'_, T>, config: &AlignmentConfig, exec: Exec) -> Result<FusionTraining<T>> {
    config.validate()?;
    let ids = data.region_ids;
    check_cover("POI", data.poi, ids)?;
    let dim = match &data.images {
        ImageInputs::Frozen { sv, rv } => {
            check_cover("SV", sv, ids)?;
            check_cover("RV", rv, ids)?;
            if sv.dim() != rv.dim() {
                return Err(Error::dim("fusion inputs", &[sv.dim()], &[rv.dim()]));
            }
            sv.dim()
        }
        ImageInputs::Joint { bundle, sv, rv } => {
            if bundle.len() != ids.len() {
                return Err(Error::contract("bundle and region ids differ in length"));
            }
            if sv.config.embedding_dim != rv.config.embedding_dim {
                return Err(Error::dim("fusion inputs", &[sv.config.embedding_dim], &[rv.config.embedding_dim]));
            }
            sv.config.embedding_dim
        }
    };
    if data.train.len() < 2 || data.train.iter().any(|&i| i >= ids.len()) {
        return Err(Error::contract("alignment needs at least two valid training regions"));
    }
    let text_dim = data.poi.dim();
    if !config.text_adapter && text_dim != dim {
        return Err(Error::dim("text embeddings without adapter", &[dim], &[text_dim]));
    }

    let mut params = FusionParams::<T>::init(
        dim,
        config.hidden_dim.unwrap_or(dim),
        config.text_adapter.then_some(text_dim),
        rng::derive_seed(config.seed, "fusion-init"),
    )?;
    let initial = params.clone();
    let adam_cfg = AdamConfig::with_lr(config.lr);
    let mut adam = AdamState::new(adam_cfg);
    let mut encoders = match &data.images {
        ImageInputs::Joint { sv, rv, .. } => Some(((*sv).clone(), (*rv).clone(), AdamState::new(adam_cfg), AdamState::new(adam_cfg))),
        ImageInputs::Frozen { .. } => None,
    };

    let mut order = data.train.to_vec();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut r = rng::stream_rng(config.seed, epoch as u64);
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in batches(&order, config.batch_size) {
            let mut tape = Tape::with_exec(exec);
            let bound = params.params.bind(&mut tape);
            let enc_bound = encoders.as_ref().map(|(s, v, _, _)| (s.params.bind(&mut tape), v.params.bind(&mut tape)));
            let (sv, rv) = match (&data.images, &encoders, &enc_bound) {
                (ImageInputs::Frozen { sv, rv }, _, _) => (tape.constant(sv.gather(&batch)?), tape.constant(rv.gather(&batch)?)),
                (ImageInputs::Joint { bundle, .. }, Some((sp, rp, _, _)), Some((sb, rb))) => {
                    joint_images(&mut tape, bundle, [(sp, sb), (rp, rb)], &batch)?
                }
                _ => unreachable!("joint inputs always carry encoders"),
            };
            let text = tape.constant(data.poi.gather(&batch)?);
            let (img, _) = fuse_tape(&mut tape, &bound, sv, rv)?;
            let text = text_side_tape(&mut tape, &params, &bound, text)?;
            let loss = infonce_tape(&mut tape, img, text, config.temperature, config.symmetric)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                let batch_ids: Vec<u32> = batch.iter().map(|&i| ids[i]).collect();
                return Err(Error::Diverged(format!("non-finite InfoNCE on regions {batch_ids:?}")));
            }
            let mut grads = tape.backward(loss)?;
            adam_step(&mut params.params, &bound.grads(&mut grads), &mut adam)?;
            if let (Some((sp, rp, sa, ra)), Some((sb, rb))) = (encoders.as_mut(), enc_bound.as_ref()) {
                adam_step(&mut sp.params, &sb.grads(&mut grads), sa)?;
                adam_step(&mut rp.params, &rb.grads(&mut grads), ra)?;
            }
            total += value * batch.len() as f64;
        }
        history.push(total / order.len() as f64);
    }

    let (embeddings, betas, encoders) = match (&data.images, encoders) {
        (ImageInputs::Frozen { sv, rv }, _) => {
            let (e, b) = fuse_tables(&params, sv, rv)?;
            (e, b, None)
        }
        (ImageInputs::Joint { bundle, .. }, Some((sp, rp, _, _))) => {
            let sv = embed_regions(&sp, bundle, Modality::Sv, exec)?;
            let rv = embed_regions(&rp, bundle, Modality::Rv, exec)?;
            let (e, b) = fuse_tables(&params, &sv, &rv)?;
            (e, b, Some((sp, rp)))
        }
        _ => unreachable!("joint inputs always carry encoders"),
    };
    Ok(FusionTraining {
        params,
        initial,
        history,
        embeddings,
        betas,
        encoders,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_world, ImageDims, SyntheticWorldConfig};
    use crate::visual::EncoderConfig;

    fn table(n: usize, d: usize, seed: u64) -> EmbeddingTable<f64> {
        let mut r = rng::rng(seed);
        let data = (0..n * d).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        EmbeddingTable::new(d, data).unwrap()
    }

    #[test]
    fn batching_keeps_every_region() {
        let order: Vec<usize> = (0..65).collect();
        let b = batches(&order, 32);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [32, 33]);
        assert_eq!(batches(&order[..3], 32), [vec![0, 1, 2]]);
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let n = 40;
        let ids: Vec<u32> = (0..n as u32).collect();
        let (sv, rv, poi) = (table(n, 6, 1), table(n, 6, 2), table(n, 5, 3));
        let train: Vec<usize> = (0..30).collect();
        let cfg = AlignmentConfig {
            batch_size: 10,
            epochs: 40,
            lr: 1e-2,
            ..Default::default()
        };
        let run = |exec| {
            let data = FusionData {
                region_ids: &ids,
                images: ImageInputs::Frozen { sv: &sv, rv: &rv },
                poi: &poi,
                train: &train,
            };
            train_fusion(data, &cfg, exec).unwrap()
        };
        let a = run(Exec::Sequential);
        let b = run(Exec::Parallel);
        assert_eq!(a.history, b.history);
        assert_eq!(a.embeddings, b.embeddings);
        assert!(a.history.last().unwrap() < &a.history[0]);
        assert_eq!(a.embeddings.len(), n);
        for (bs, br) in &a.betas {
            assert!((bs + br - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_region_is_named() {
        let ids: Vec<u32> = vec![10, 11, 12, 13];
        let (sv, rv, poi) = (table(4, 3, 1), table(4, 3, 2), table(3, 3, 3));
        let data = FusionData {
            region_ids: &ids,
            images: ImageInputs::Frozen { sv: &sv, rv: &rv },
            poi: &poi,
            train: &[0, 1],
        };
        let err = train_fusion(data, &AlignmentConfig::default(), Exec::Sequential).unwrap_err();
        assert!(err.to_string().contains("13"), "{err}");
    }

    #[test]
    fn joint_training_moves_encoders() {
        let dims = ImageDims {
            channels: 1,
            height: 4,
            width: 4,
        };
        let bundle = generate_world(&SyntheticWorldConfig {
            n_regions: 6,
            n_clusters: 2,
            image: dims,
            ..Default::default()
        })
        .unwrap();
        let cfg = EncoderConfig {
            input: dims,
            channels: vec![2],
            embedding_dim: 3,
            ..Default::default()
        };
        let sv = EncoderParams::<f64>::init(&cfg, 1).unwrap();
        let rv = EncoderParams::<f64>::init(&cfg, 2).unwrap();
        let ids: Vec<u32> = bundle.regions.iter().map(|r| r.region_id).collect();
        let poi = table(6, 4, 5);
        let train = [0, 1, 2, 3];
        let data = FusionData {
            region_ids: &ids,
            images: ImageInputs::Joint {
                bundle: &bundle,
                sv: &sv,
                rv: &rv,
            },
            poi: &poi,
            train: &train,
        };
        let cfg = AlignmentConfig {
            epochs: 2,
            freeze_encoders: false,
            ..Default::default()
        };
        let out = train_fusion(data, &cfg, Exec::Sequential).unwrap();
        let (sv2, rv2) = out.encoders.unwrap();
        assert_ne!(sv2.params, sv.params);
        assert_ne!(rv2.params, rv.params);
    }
}
