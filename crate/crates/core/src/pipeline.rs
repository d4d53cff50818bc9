//! End-to-end stages over in-memory values. The CLI persists the output of
//! each stage; tests and benches call these directly.

use crate::config::PipelineConfig;
use crate::dataset::{generate_world, split_regions, DatasetBundle, SplitAssignment};
use crate::embedding::EmbeddingTable;
use crate::error::Result;
use crate::eval::{ablation_suite, cluster_report, random_embeddings, AblationReport, ClusterReport};
use crate::exec::Exec;
use crate::fusion::{train_fusion, variant_embeddings, FusionData, FusionParams, FusionTraining, ImageInputs, Variant, VariantInputs};
use crate::rng::derive_seed;
use crate::similarity::{mine_triplets, similarity_matrix, MinedTriplets, Modality, SimilarityKind};
use crate::tensor::{Float, Tensor};
use crate::text::{build_huffman, build_vocab, bundle_corpus, embed_regions_poi, skipgram_train, SkipGramParams, Vocab};
use crate::visual::{embed_regions, train_visual_encoder, EncoderConfig, EncoderParams, VisualTraining};

/// Name of the random-embedding control in evaluation reports.
pub const CONTROL: &str = "random";

pub fn generate(cfg: &PipelineConfig) -> Result<DatasetBundle> {
    generate_world(&cfg.world_config())
}

pub fn splits(cfg: &PipelineConfig, bundle: &DatasetBundle) -> Result<SplitAssignment> {
    split_regions(bundle.len(), cfg.split, cfg.split_seed())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinedSets {
    /// Street-view triplets from mobility similarity.
    pub sv: MinedTriplets,
    /// Remote-sensing triplets from POI similarity.
    pub rv: MinedTriplets,
}

pub fn mine(cfg: &PipelineConfig, bundle: &DatasetBundle, exec: Exec) -> Result<MinedSets> {
    let policy = cfg.mining_policy();
    let mobility = similarity_matrix(bundle, SimilarityKind::Mobility, cfg.similarity, exec)?;
    let poi = similarity_matrix(bundle, SimilarityKind::Poi, cfg.similarity, exec)?;
    Ok(MinedSets {
        sv: mine_triplets(&mobility, &policy, Modality::Sv, exec)?,
        rv: mine_triplets(&poi, &policy, Modality::Rv, exec)?,
    })
}

/// Encoder settings for one modality; each gets its own seed.
pub fn encoder_config(cfg: &PipelineConfig, modality: Modality) -> EncoderConfig {
    let base = cfg.visual_config();
    EncoderConfig {
        seed: derive_seed(base.seed, modality.name()),
        ..base
    }
}

#[derive(Clone, Debug)]
pub struct VisualModels<T> {
    pub sv: VisualTraining<T>,
    pub rv: VisualTraining<T>,
}

pub fn train_visual<T: Float>(
    cfg: &PipelineConfig,
    bundle: &DatasetBundle,
    mined: &MinedSets,
    exec: Exec,
) -> Result<VisualModels<T>> {
    let sv = train_visual_encoder(bundle, &mined.sv.triplets, Modality::Sv, &encoder_config(cfg, Modality::Sv), exec)?;
    let rv = train_visual_encoder(bundle, &mined.rv.triplets, Modality::Rv, &encoder_config(cfg, Modality::Rv), exec)?;
    Ok(VisualModels { sv, rv })
}

#[derive(Clone, Debug)]
pub struct TextModel<T> {
    pub vocab: Vocab,
    pub params: SkipGramParams<T>,
}

pub fn train_text<T: Float>(cfg: &PipelineConfig, bundle: &DatasetBundle) -> Result<TextModel<T>> {
    let text = cfg.text_config();
    let corpus = bundle_corpus(bundle);
    let vocab = build_vocab(&corpus, text.min_count)?;
    let tree = build_huffman(&vocab)?;
    let params = skipgram_train(&corpus, &vocab, &tree, &text)?;
    Ok(TextModel { vocab, params })
}

/// Per-region embeddings of each modality.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionTables<T> {
    pub sv: EmbeddingTable<T>,
    pub rv: EmbeddingTable<T>,
    pub poi: EmbeddingTable<T>,
}

pub fn region_tables<T: Float>(
    bundle: &DatasetBundle,
    sv: &EncoderParams<T>,
    rv: &EncoderParams<T>,
    word_vectors: &Tensor<T>,
    vocab: &Vocab,
    exec: Exec,
) -> Result<RegionTables<T>> {
    Ok(RegionTables {
        sv: embed_regions(sv, bundle, Modality::Sv, exec)?,
        rv: embed_regions(rv, bundle, Modality::Rv, exec)?,
        poi: embed_regions_poi(word_vectors, vocab, bundle)?,
    })
}

/// Alignment over every region. Only the self-supervised InfoNCE signal is
/// used, so no indicator leaks from the evaluation splits.
pub fn fuse<T: Float>(
    cfg: &PipelineConfig,
    bundle: &DatasetBundle,
    tables: &RegionTables<T>,
    encoders: (&EncoderParams<T>, &EncoderParams<T>),
    exec: Exec,
) -> Result<FusionTraining<T>> {
    let align = cfg.fusion_config();
    let ids: Vec<u32> = bundle.regions.iter().map(|r| r.region_id).collect();
    let all: Vec<usize> = (0..bundle.len()).collect();
    let images = if align.freeze_encoders {
        ImageInputs::Frozen {
            sv: &tables.sv,
            rv: &tables.rv,
        }
    } else {
        ImageInputs::Joint {
            bundle,
            sv: encoders.0,
            rv: encoders.1,
        }
    };
    train_fusion(
        FusionData {
            region_ids: &ids,
            images,
            poi: &tables.poi,
            train: &all,
        },
        &align,
        exec,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// The seven variants over every indicator and regression seed.
    pub ablation: AblationReport,
    /// Random embeddings of the full variant's dimension, same seeds.
    pub control: AblationReport,
    /// PCA + k-means on the full embeddings.
    pub clusters: ClusterReport,
}

pub fn variant_tables<T: Float>(
    tables: &RegionTables<T>,
    untrained: &FusionParams<T>,
    full: &EmbeddingTable<T>,
) -> Result<Vec<(String, EmbeddingTable<T>)>> {
    let inputs = VariantInputs {
        sv: &tables.sv,
        rv: &tables.rv,
        poi: &tables.poi,
        untrained,
        full,
    };
    Variant::ALL
        .iter()
        .map(|&v| Ok((v.name().to_string(), variant_embeddings(v, &inputs)?)))
        .collect()
}

pub fn evaluate<T: Float>(
    cfg: &PipelineConfig,
    bundle: &DatasetBundle,
    tables: &RegionTables<T>,
    untrained: &FusionParams<T>,
    full: &EmbeddingTable<T>,
    exec: Exec,
) -> Result<Evaluation> {
    let splits = splits(cfg, bundle)?;
    let seeds = cfg.eval_seed_list();
    let variants = variant_tables(tables, untrained, full)?;
    let ablation = ablation_suite(&variants, bundle, &splits, &cfg.mlp, &seeds, exec)?;
    let control_table = random_embeddings(bundle.len(), full.dim(), cfg.control_seed())?;
    let control = ablation_suite(&[(CONTROL.to_string(), control_table)], bundle, &splits, &cfg.mlp, &seeds, exec)?;
    let truth = bundle.latent_labels();
    let clusters = cluster_report(full, cfg.clusters, cfg.cluster_seed(), truth.as_deref())?;
    Ok(Evaluation {
        ablation,
        control,
        clusters,
    })
}

#[derive(Clone, Debug)]
pub struct Outcome<T> {
    pub bundle: DatasetBundle,
    pub mined: MinedSets,
    pub visual: VisualModels<T>,
    pub text: TextModel<T>,
    /// Region tables from the encoders used by the final embeddings.
    pub tables: RegionTables<T>,
    pub fusion: FusionTraining<T>,
    pub evaluation: Evaluation,
}

pub fn run<T: Float>(cfg: &PipelineConfig, exec: Exec) -> Result<Outcome<T>> {
    cfg.validate()?;
    let bundle = generate(cfg)?;
    let mined = mine(cfg, &bundle, exec)?;
    let visual = train_visual::<T>(cfg, &bundle, &mined, exec)?;
    let text = train_text::<T>(cfg, &bundle)?;
    let mut tables = region_tables(&bundle, &visual.sv.params, &visual.rv.params, &text.params.w, &text.vocab, exec)?;
    let fusion = fuse(cfg, &bundle, &tables, (&visual.sv.params, &visual.rv.params), exec)?;
    if let Some((sv, rv)) = &fusion.encoders {
        tables = region_tables(&bundle, sv, rv, &text.params.w, &text.vocab, exec)?;
    }
    let evaluation = evaluate(cfg, &bundle, &tables, &fusion.initial, &fusion.embeddings, exec)?;
    Ok(Outcome {
        bundle,
        mined,
        visual,
        text,
        tables,
        fusion,
        evaluation,
    })
}
