//! Convolutional image encoders trained with a cosine triplet loss.

mod train;

pub use train::{batch_triplet_loss, train_visual_encoder, VisualTraining};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::dataset::{DatasetBundle, ImageDims, RegionRecord};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;
use crate::similarity::Modality;
use crate::tensor::{cosine_similarity, l2_normalize, Bound, Float, ParamSet, Tape, Tensor, Var};

/// Images per tape when encoding without gradients.
const ENCODE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input: ImageDims,
    /// Output channels of each conv layer; a max-pool sits between layers.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: usize,
    pub embedding_dim: usize,
    pub margin: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input: ImageDims {
                channels: 3,
                height: 32,
                width: 32,
            },
            channels: vec![8, 16],
            kernel: 3,
            stride: 1,
            padding: 1,
            pool: 2,
            embedding_dim: 32,
            margin: 0.2,
            batch_size: 32,
            lr: 5e-4,
            epochs: 5,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embedding_dim < 2 {
            return bad(format!("embedding_dim must be at least 2, got {}", self.embedding_dim));
        }
        // a zero margin is allowed so the objective can be probed at its
        // trivial fixed point
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be non-negative, got {}", self.margin));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channel plan needs at least one non-empty layer".into());
        }
        if self.kernel == 0 || self.stride == 0 || self.pool == 0 || self.batch_size == 0 {
            return bad("kernel, stride, pool and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        let (mut h, mut w) = (self.input.height, self.input.width);
        for i in 0..self.channels.len() {
            if i > 0 {
                if h < self.pool || w < self.pool {
                    return bad(format!("image too small for pooling before conv layer {i}"));
                }
                h /= self.pool;
                w /= self.pool;
            }
            let next = (
                crate::tensor::conv_out_len(self.kernel, h, self.stride, self.padding),
                crate::tensor::conv_out_len(self.kernel, w, self.stride, self.padding),
            );
            match next {
                (Some(a), Some(b)) => (h, w) = (a, b),
                _ => return bad(format!("image too small for conv layer {i}")),
            }
        }
        Ok(())
    }

    fn conv_shape(&self, layer: usize) -> [usize; 4] {
        let c_in = if layer == 0 {
            self.input.channels
        } else {
            self.channels[layer - 1]
        };
        [self.channels[layer], c_in, self.kernel, self.kernel]
    }
}

/// Conv kernels/biases and the final projection of one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
}

fn conv_w(i: usize) -> String {
    format!("conv{i}.weight")
}

fn conv_b(i: usize) -> String {
    format!("conv{i}.bias")
}

const PROJ_W: &str = "proj.weight";
const PROJ_B: &str = "proj.bias";

impl<T: Float> EncoderParams<T> {
    /// He-normal kernels, zero biases.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed);
        let mut params = ParamSet::new();
        let mut normal = |shape: &[usize], fan_in: usize| {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| T::cast(dist.sample(&mut r))).collect();
            Tensor::new(shape.to_vec(), data).expect("finite init")
        };
        for i in 0..config.channels.len() {
            let s = config.conv_shape(i);
            params.insert(conv_w(i), normal(&s, s[1] * s[2] * s[3]));
            params.insert(conv_b(i), Tensor::zeros(&[s[0]]));
        }
        let last = *config.channels.last().expect("validated");
        params.insert(PROJ_W, normal(&[last, config.embedding_dim], last));
        params.insert(PROJ_B, Tensor::zeros(&[config.embedding_dim]));
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Rebuilds from a parameter set, checking every shape.
    pub fn from_params(config: &EncoderConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
        for i in 0..config.channels.len() {
            let s = config.conv_shape(i);
            expected.push((conv_w(i), s.to_vec()));
            expected.push((conv_b(i), vec![s[0]]));
        }
        let last = *config.channels.last().expect("validated");
        expected.push((PROJ_W.into(), vec![last, config.embedding_dim]));
        expected.push((PROJ_B.into(), vec![config.embedding_dim]));
        if params.len() != expected.len() {
            return Err(Error::contract(format!(
                "encoder expects {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("encoder parameter", shape, t.shape()));
            }
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn cast<U: Float>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// Encoder forward pass on a tape: `x` is `[N, C, H, W]`, the result is the
/// row-normalized `[N, d]` embedding.
pub fn encoder_forward<T: Float>(tape: &mut Tape<T>, bound: &Bound, x: Var, config: &EncoderConfig) -> Result<Var> {
    let mut h = x;
    for i in 0..config.channels.len() {
        if i > 0 {
            h = tape.max_pool2d(h, config.pool)?;
        }
        h = tape.conv2d(h, bound.var(&conv_w(i)), config.stride, config.padding)?;
        h = tape.channel_bias(h, bound.var(&conv_b(i)))?;
        h = tape.relu(h);
    }
    let pooled = tape.global_avg_pool(h)?;
    let z = tape.affine(pooled, bound.var(PROJ_W), bound.var(PROJ_B))?;
    Ok(tape.l2_normalize(z))
}

/// Stacks images into one `[N, C, H, W]` tensor of element type `T`.
pub(crate) fn stack_images<T: Float>(images: &[&Tensor<f32>], dims: ImageDims) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * dims.numel());
    for img in images {
        if img.shape() != dims.shape().as_slice() {
            return Err(Error::dim("encoder input", &dims.shape(), img.shape()));
        }
        data.extend(img.data().iter().map(|&v| T::cast(v as f64)));
    }
    let mut shape = vec![images.len()];
    shape.extend(dims.shape());
    Tensor::new(shape, data)
}

/// Encodes one `C×H×W` image; the flag marks a zero (degenerate) embedding.
pub fn encode_image<T: Float>(params: &EncoderParams<T>, image: &Tensor<f32>) -> Result<(Vec<T>, bool)> {
    let table = encode_images(params, &[image], Exec::Sequential)?;
    Ok((table.row(0).to_vec(), table.degenerate[0]))
}

/// Encodes images without recording gradients. Chunks of images run through
/// `exec`; outputs keep input order.
pub fn encode_images<T: Float>(
    params: &EncoderParams<T>,
    images: &[&Tensor<f32>],
    exec: Exec,
) -> Result<EmbeddingTable<T>> {
    let d = params.config.embedding_dim;
    if images.is_empty() {
        return Err(Error::contract("encode_images with no images"));
    }
    let chunks: Vec<&[&Tensor<f32>]> = images.chunks(ENCODE_CHUNK).collect();
    let parts = exec.map(chunks.len(), |c| -> Result<(Vec<T>, Vec<bool>)> {
        let mut tape = Tape::with_exec(Exec::Sequential);
        let bound = params.params.bind_frozen(&mut tape);
        let x = tape.constant(stack_images(chunks[c], params.config.input)?);
        let out = encoder_forward(&mut tape, &bound, x, &params.config)?;
        let flags = tape.degenerate_rows(out).map(<[bool]>::to_vec).unwrap_or_default();
        Ok((tape.value(out).data().to_vec(), flags))
    });
    let mut data = Vec::with_capacity(images.len() * d);
    let mut degenerate = Vec::with_capacity(images.len());
    for part in parts {
        let (v, f) = part?;
        data.extend(v);
        degenerate.extend(f);
    }
    let mut table = EmbeddingTable::new(d, data)?;
    table.degenerate = degenerate;
    Ok(table)
}

fn mean_then_normalize<T: Float>(rows: &[&[T]]) -> (Vec<T>, bool) {
    let d = rows[0].len();
    let mut acc = vec![T::zero(); d];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r.iter()) {
            *a += v;
        }
    }
    let n = T::cast(rows.len() as f64);
    for a in &mut acc {
        *a /= n;
    }
    l2_normalize(&acc)
}

/// Region-level embedding: the renormalized mean over street-view images,
/// or the single remote-sensing image.
pub fn region_visual_embedding<T: Float>(
    params: &EncoderParams<T>,
    region: &RegionRecord,
    modality: Modality,
) -> Result<(Vec<T>, bool)> {
    match modality {
        Modality::Rv => encode_image(params, &region.rv_image),
        Modality::Sv => {
            let imgs: Vec<&Tensor<f32>> = region.sv_images.iter().collect();
            let table = encode_images(params, &imgs, Exec::Sequential)?;
            let rows: Vec<&[T]> = (0..table.len()).map(|i| table.row(i)).collect();
            Ok(mean_then_normalize(&rows))
        }
    }
}

/// [`region_visual_embedding`] for every region, batching all images.
pub fn embed_regions<T: Float>(
    params: &EncoderParams<T>,
    bundle: &DatasetBundle,
    modality: Modality,
    exec: Exec,
) -> Result<EmbeddingTable<T>> {
    let (images, counts): (Vec<&Tensor<f32>>, Vec<usize>) = match modality {
        Modality::Rv => (bundle.regions.iter().map(|r| &r.rv_image).collect(), vec![1; bundle.len()]),
        Modality::Sv => (
            bundle.regions.iter().flat_map(|r| r.sv_images.iter()).collect(),
            bundle.regions.iter().map(|r| r.sv_images.len()).collect(),
        ),
    };
    let table = encode_images(params, &images, exec)?;
    let mut rows = Vec::with_capacity(bundle.len());
    let mut flags = Vec::with_capacity(bundle.len());
    let mut at = 0;
    for c in counts {
        let slice: Vec<&[T]> = (at..at + c).map(|i| table.row(i)).collect();
        at += c;
        let (v, deg) = if c == 1 {
            (slice[0].to_vec(), table.degenerate[at - 1])
        } else {
            mean_then_normalize(&slice)
        };
        rows.push(v);
        flags.push(deg);
    }
    let mut out = EmbeddingTable::from_rows(rows)?;
    out.degenerate = flags;
    Ok(out)
}

/// `max(0, a + sim(x, z) - sim(x, y))` with cosine similarity: zero once the
/// anchor is at least `a` more similar to the positive than the negative.
pub fn triplet_loss<T: Float>(x: &[T], y: &[T], z: &[T], margin: f64) -> Result<T> {
    let pos = cosine_similarity(x, y)?.value;
    let neg = cosine_similarity(x, z)?.value;
    Ok(((neg - pos) + T::cast(margin)).max(T::zero()))
}

/// Picks the image a triplet slot uses: a uniformly drawn street view, or
/// the remote-sensing tile.
pub(crate) fn pick_image<'a>(region: &'a RegionRecord, modality: Modality, r: &mut rng::Rng) -> &'a Tensor<f32> {
    match modality {
        Modality::Rv => &region.rv_image,
        Modality::Sv => &region.sv_images[r.random_range(0..region.sv_images.len())],
    }
}
