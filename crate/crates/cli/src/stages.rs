use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use regcl_core::config::PipelineConfig;
use regcl_core::dataset::{read_bundle, write_bundle, DatasetBundle, BUNDLE_VERSION, IMAGES_FILE, MANIFEST_FILE, REGIONS_FILE};
use regcl_core::embedding::EmbeddingTable;
use regcl_core::eval::write_clusters_csv;
use regcl_core::fusion::FusionParams;
use regcl_core::gradsuite::{gradient_suite, TOLERANCE};
use regcl_core::pipeline::{self, RegionTables, CONTROL};
use regcl_core::similarity::{read_triplets_csv, write_triplets_csv, Modality};
use regcl_core::tensor::{mscl, ParamSet};
use regcl_core::text::Vocab;
use regcl_core::visual::{train_visual_encoder, EncoderParams};
use regcl_core::{Exec, Float, Tensor};

use crate::manifest::{self, sha256_bytes, sha256_file, DirLock, RunManifest};

pub const GENERATE: &str = "generate";
pub const MINE: &str = "mine";
pub const TRAIN_VISUAL: &str = "train-visual";
pub const TRAIN_TEXT: &str = "train-text";
pub const FUSE: &str = "fuse";
pub const EVALUATE: &str = "evaluate";
pub const GRADCHECK: &str = "gradcheck";

const BUNDLE_DIR: &str = "bundle";
const TRIPLETS: &str = "triplets.csv";
const VISUAL: &str = "visual.mscl";
const TEXT: &str = "text.mscl";
const VOCAB: &str = "vocab.tsv";
const FUSION: &str = "fusion.mscl";
const EMBEDDINGS: &str = "embeddings.csv";

pub struct Ctx {
    pub out: PathBuf,
    pub cfg: PipelineConfig,
    pub exec: Exec,
}

/// Bookkeeping for one stage: holds the directory lock, collects the
/// hashes of what was read and written, and writes the manifest.
struct StageRun<'a> {
    ctx: &'a Ctx,
    stage: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    formats: BTreeMap<String, u32>,
    start: Instant,
    _lock: DirLock,
}

impl<'a> StageRun<'a> {
    fn start(ctx: &'a Ctx, stage: &'static str) -> Result<Self> {
        let lock = DirLock::acquire(&ctx.out)?;
        Ok(Self {
            ctx,
            stage,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            formats: BTreeMap::new(),
            start: Instant::now(),
            _lock: lock,
        })
    }

    /// Verifies an upstream stage and records the artifacts this stage reads.
    fn depend(&mut self, upstream: &str, files: &[&str]) -> Result<()> {
        let m = manifest::require(&self.ctx.out, upstream, self.stage)?;
        for f in files {
            let Some(hash) = m.outputs.get(*f) else {
                bail!("`{}` needs {f}, which `{upstream}` did not record", self.stage);
            };
            self.inputs.insert(f.to_string(), hash.clone());
        }
        Ok(())
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.ctx.out.join(rel)
    }

    fn output(&mut self, rel: &str) -> PathBuf {
        self.outputs.push(rel.to_string());
        self.path(rel)
    }

    fn write_text(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.output(rel);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn finish(mut self) -> Result<RunManifest> {
        let config = self.ctx.cfg.render();
        let echo = format!("{}/{}.config", manifest::MANIFEST_DIR, self.stage);
        fs::create_dir_all(self.path(manifest::MANIFEST_DIR))?;
        self.write_text(&echo, &config)?;
        let mut outputs = BTreeMap::new();
        for rel in &self.outputs {
            let path = self.path(rel);
            outputs.insert(rel.clone(), sha256_file(&path).with_context(|| format!("hashing {}", path.display()))?);
        }
        let m = RunManifest {
            stage: self.stage.to_string(),
            seed: self.ctx.cfg.seed,
            precision: self.ctx.cfg.precision.to_string(),
            config_sha256: sha256_bytes(config.as_bytes()),
            inputs: std::mem::take(&mut self.inputs),
            outputs,
            formats: std::mem::take(&mut self.formats),
            wall_time_secs: self.start.elapsed().as_secs_f64(),
        };
        manifest::write_manifest(&self.ctx.out, &m)?;
        println!("{}: done in {:.1}s, manifest {}", self.stage, m.wall_time_secs, manifest::manifest_path(&self.ctx.out, self.stage).display());
        Ok(m)
    }
}

fn bundle_files() -> [String; 3] {
    [REGIONS_FILE, IMAGES_FILE, MANIFEST_FILE].map(|f| format!("{BUNDLE_DIR}/{f}"))
}

fn load_bundle(run: &mut StageRun) -> Result<DatasetBundle> {
    let files = bundle_files();
    run.depend(GENERATE, &files.each_ref().map(String::as_str))?;
    let dir = run.path(BUNDLE_DIR);
    read_bundle(&dir).with_context(|| format!("reading bundle {}", dir.display()))
}

fn region_ids(bundle: &DatasetBundle) -> Vec<u32> {
    bundle.regions.iter().map(|r| r.region_id).collect()
}

fn history_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,mean_loss\n");
    for (e, l) in history.iter().enumerate() {
        writeln!(s, "{},{l}", e + 1).expect("string write");
    }
    s
}

fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    mscl::read_file(path).with_context(|| format!("reading {}", path.display()))
}

fn write_checkpoint<T: Float>(run: &mut StageRun, rel: &str, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let path = run.output(rel);
    run.formats.insert("mscl".into(), mscl::VERSION);
    mscl::write_file(&path, entries).with_context(|| format!("writing {}", path.display()))
}

fn encoder_from<T: Float>(cfg: &PipelineConfig, entries: &[(String, Tensor<f32>)], modality: Modality) -> Result<EncoderParams<T>> {
    let prefix = format!("{}_encoder/", modality.name().to_lowercase());
    let set = ParamSet::from_prefixed(entries, &prefix);
    if set.is_empty() {
        bail!("checkpoint has no tensors under {prefix}");
    }
    Ok(EncoderParams::from_params(&pipeline::encoder_config(cfg, modality), set.cast())?)
}

fn tensor_named<'e>(entries: &'e [(String, Tensor<f32>)], name: &str) -> Result<&'e Tensor<f32>> {
    match entries.iter().find(|(n, _)| n == name) {
        Some((_, t)) => Ok(t),
        None => bail!("checkpoint has no tensor {name}"),
    }
}

pub fn generate(ctx: &Ctx) -> Result<()> {
    let mut run = StageRun::start(ctx, GENERATE)?;
    let bundle = pipeline::generate(&ctx.cfg)?;
    write_bundle(&bundle, run.path(BUNDLE_DIR))?;
    for f in bundle_files() {
        run.output(&f);
    }
    run.formats.insert("bundle".into(), BUNDLE_VERSION);
    run.formats.insert("mscl".into(), mscl::VERSION);
    println!("generate: {} regions, {} indicators", bundle.len(), bundle.indicator_names().len());
    run.finish()?;
    Ok(())
}

pub fn mine(ctx: &Ctx) -> Result<()> {
    let mut run = StageRun::start(ctx, MINE)?;
    let bundle = load_bundle(&mut run)?;
    let mined = pipeline::mine(&ctx.cfg, &bundle, ctx.exec)?;
    let all: Vec<_> = mined.sv.triplets.iter().chain(&mined.rv.triplets).cloned().collect();
    let path = run.output(TRIPLETS);
    write_triplets_csv(&path, &region_ids(&bundle), &all)?;
    for (name, m) in [("sv", &mined.sv), ("rv", &mined.rv)] {
        println!(
            "mine: {name} {} triplets, {} anchors without a strict negative",
            m.triplets.len(),
            m.degenerate_anchors.len()
        );
    }
    run.finish()?;
    Ok(())
}

pub fn train_visual<T: Float>(ctx: &Ctx) -> Result<()> {
    let mut run = StageRun::start(ctx, TRAIN_VISUAL)?;
    let bundle = load_bundle(&mut run)?;
    run.depend(MINE, &[TRIPLETS])?;
    let triplets = read_triplets_csv(run.path(TRIPLETS), &region_ids(&bundle))?;
    let mut entries = Vec::new();
    for modality in [Modality::Sv, Modality::Rv] {
        let mine: Vec<_> = triplets.iter().filter(|t| t.modality == modality).cloned().collect();
        let config = pipeline::encoder_config(&ctx.cfg, modality);
        let trained = train_visual_encoder::<T>(&bundle, &mine, modality, &config, ctx.exec)?;
        let name = modality.name().to_lowercase();
        println!(
            "train-visual: {name} {} triplets, loss {:.4} -> {:.4}",
            mine.len(),
            trained.history.first().copied().unwrap_or(f64::NAN),
            trained.history.last().copied().unwrap_or(f64::NAN)
        );
        run.write_text(&format!("history_{name}.csv"), &history_csv(&trained.history))?;
        entries.extend(trained.params.params.prefixed(&format!("{name}_encoder/")));
    }
    write_checkpoint(&mut run, VISUAL, &entries)?;
    run.finish()?;
    Ok(())
}

pub fn train_text<T: Float>(ctx: &Ctx) -> Result<()> {
    let mut run = StageRun::start(ctx, TRAIN_TEXT)?;
    let bundle = load_bundle(&mut run)?;
    let model = pipeline::train_text::<T>(&ctx.cfg, &bundle)?;
    println!(
        "train-text: vocabulary {}, {} pairs, {} out-of-vocabulary tokens skipped",
        model.vocab.len(),
        model.params.pairs,
        model.params.skipped
    );
    let entries = vec![("text/W".to_string(), model.params.w.clone()), ("text/inner".to_string(), model.params.inner.clone())];
    write_checkpoint(&mut run, TEXT, &entries)?;
    let path = run.output(VOCAB);
    model.vocab.write_tsv(&path)?;
    run.finish()?;
    Ok(())
}

/// Region tables from the saved visual and text checkpoints. When the
/// alignment stage also updated the encoders, those take precedence.
fn load_tables<T: Float>(run: &mut StageRun, bundle: &DatasetBundle, fusion: Option<&[(String, Tensor<f32>)]>) -> Result<(RegionTables<T>, (EncoderParams<T>, EncoderParams<T>))> {
    run.depend(TRAIN_VISUAL, &[VISUAL])?;
    run.depend(TRAIN_TEXT, &[TEXT, VOCAB])?;
    let cfg = &run.ctx.cfg;
    let visual = read_checkpoint(&run.path(VISUAL))?;
    let source = match fusion {
        Some(f) if f.iter().any(|(n, _)| n.starts_with("sv_encoder/")) => f,
        _ => &visual,
    };
    let sv = encoder_from::<T>(cfg, source, Modality::Sv)?;
    let rv = encoder_from::<T>(cfg, source, Modality::Rv)?;
    let text = read_checkpoint(&run.path(TEXT))?;
    let w: Tensor<T> = tensor_named(&text, "text/W")?.cast();
    let vocab = Vocab::read_tsv(run.path(VOCAB), cfg.text.min_count)?;
    let tables = pipeline::region_tables(bundle, &sv, &rv, &w, &vocab, run.ctx.exec)?;
    Ok((tables, (sv, rv)))
}

pub fn fuse<T: Float>(ctx: &Ctx) -> Result<()> {
    let mut run = StageRun::start(ctx, FUSE)?;
    let bundle = load_bundle(&mut run)?;
    let (tables, (sv, rv)) = load_tables::<T>(&mut run, &bundle, None)?;
    let fusion = pipeline::fuse(&ctx.cfg, &bundle, &tables, (&sv, &rv), ctx.exec)?;
    println!(
        "fuse: {} epochs, InfoNCE {:.4} -> {:.4}",
        fusion.history.len(),
        fusion.history.first().copied().unwrap_or(f64::NAN),
        fusion.history.last().copied().unwrap_or(f64::NAN)
    );
    let ids = region_ids(&bundle);
    let mut entries = fusion.params.params.prefixed("fusion/");
    entries.extend(fusion.initial.params.prefixed("fusion_init/"));
    if let Some((sv, rv)) = &fusion.encoders {
        entries.extend(sv.params.prefixed("sv_encoder/"));
        entries.extend(rv.params.prefixed("rv_encoder/"));
    }
    write_checkpoint(&mut run, FUSION, &entries)?;
    run.write_text("history_fusion.csv", &history_csv(&fusion.history))?;
    let mut att = String::from("region_id,beta_sv,beta_rv\n");
    for (id, (a, b)) in ids.iter().zip(&fusion.betas) {
        writeln!(att, "{id},{a},{b}").expect("string write");
    }
    run.write_text("attention.csv", &att)?;
    let path = run.output(EMBEDDINGS);
    fusion.embeddings.write_csv(&path, &ids)?;
    run.finish()?;
    Ok(())
}

pub fn evaluate<T: Float>(ctx: &Ctx) -> Result<()> {
    let mut run = StageRun::start(ctx, EVALUATE)?;
    let bundle = load_bundle(&mut run)?;
    run.depend(FUSE, &[FUSION, EMBEDDINGS])?;
    let fusion = read_checkpoint(&run.path(FUSION))?;
    let (tables, _) = load_tables::<T>(&mut run, &bundle, Some(&fusion))?;
    let untrained = FusionParams::<T>::from_params(ParamSet::from_prefixed(&fusion, "fusion_init/").cast())?;
    let ids = region_ids(&bundle);
    let full = EmbeddingTable::<T>::read_csv(run.path(EMBEDDINGS), &ids)?;
    let ev = pipeline::evaluate(&ctx.cfg, &bundle, &tables, &untrained, &full, ctx.exec)?;

    ev.ablation.write(&ctx.out)?;
    let mut indicators = bundle.indicator_names();
    indicators.sort();
    for ind in &indicators {
        run.output(&format!("report_{ind}.csv"));
    }
    run.output("ablation.csv");
    run.write_text("control.csv", &ev.control.long_csv())?;
    let path = run.output("clusters.csv");
    write_clusters_csv(&path, &ids, &ev.clusters)?;

    for v in &ev.ablation.variants {
        println!("evaluate: {v:<12} mean test R2 {}", fmt_opt(ev.ablation.mean_test_r2(v)));
    }
    println!("evaluate: {CONTROL:<12} mean test R2 {}", fmt_opt(ev.control.mean_test_r2(CONTROL)));
    println!(
        "evaluate: k-means on PCA, ARI {}{}",
        fmt_opt(ev.clusters.ari),
        if ev.clusters.rank_deficient { " (rank deficient)" } else { "" }
    );
    run.finish()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

pub fn gradcheck(ctx: &Ctx, seeds: u64) -> Result<()> {
    let mut run = StageRun::start(ctx, GRADCHECK)?;
    let seeds: Vec<u64> = (0..seeds).collect();
    let records = gradient_suite(&seeds)?;
    let mut csv = String::from("op,seed,max_rel_error,passed\n");
    for r in &records {
        writeln!(csv, "{},{},{:e},{}", r.op, r.seed, r.max_rel_error, r.passed()).expect("string write");
    }
    run.write_text("gradcheck.csv", &csv)?;
    let failed: Vec<_> = records.iter().filter(|r| !r.passed()).collect();
    let worst = records.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("gradcheck: {} checks over {} seeds, worst relative error {worst:e}", records.len(), seeds.len());
    run.finish()?;
    if !failed.is_empty() {
        for r in &failed {
            eprintln!("gradcheck: {} seed {} relative error {:e} >= {TOLERANCE:e}", r.op, r.seed, r.max_rel_error);
        }
        bail!("{} of {} gradient checks failed", failed.len(), records.len());
    }
    Ok(())
}
