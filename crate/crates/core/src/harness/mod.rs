//! Experiment orchestration: world → splits → planner → training → decoding
//! → evaluation for every cell of a configuration, with a resumable
//! manifest and aggregate reports.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{Cell, DecodeConfig, ExperimentConfig};
pub use report::{emit_report, load_reports, Report, Stat};

use crate::captioner::{
    build_caption_data, decode_scene, early_stopped_train, Captioner, DecodeRecord, Hypothesis, ModelConfig,
    TeacherBatch, TrainOutcome,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, generation_set, EvalInputs, MetricsReport};
use crate::numerics::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor};
use crate::planner::{build_vocabulary, encode, reference_tags, Approach, TagSet, Vocabulary};
use crate::ranker::{rerank, retrieval_recall, Ranker, RankerConfig};
use crate::splits::{build_splits, write_split_manifest, ConceptPair, DatasetSplit, Partition};
use crate::world::{generate_corpus, write_corpus, CorpusRecord, Lexicon};

/// Version string in the style of `git describe`, falling back to the
/// package version outside a checkout.
pub fn version_string() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| format!("v{}-{}", env!("CARGO_PKG_VERSION"), s.trim()))
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// Write via a temporary file and rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: Cell,
    pub status: CellStatus,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    /// Seconds per stage.
    pub timings: BTreeMap<String, f64>,
    /// Paths relative to the output directory.
    pub checkpoint: Option<PathBuf>,
    pub decode: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub best_epoch: Option<usize>,
    pub stopped_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub timings: BTreeMap<String, f64>,
    pub cells: BTreeMap<String, CellRecord>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = Self::path(dir);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&Self::path(dir), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn completed(&self) -> impl Iterator<Item = &CellRecord> {
        self.cells.values().filter(|c| c.status == CellStatus::Done)
    }
}

/// Scenes of a partition, in id order.
pub fn partition_records<'a>(corpus: &'a [CorpusRecord], split: &DatasetSplit, p: Partition) -> Vec<&'a CorpusRecord> {
    let by_id: BTreeMap<u64, &CorpusRecord> = corpus.iter().map(|r| (r.scene.id, r)).collect();
    split.ids(p).iter().filter_map(|id| by_id.get(id).copied()).collect()
}

/// Vocabulary over training references with every configured tag set.
pub fn split_vocabulary(train: &[&CorpusRecord], tagsets: &[TagSet]) -> Result<Vocabulary> {
    build_vocabulary(train.iter().flat_map(|r| &r.references), tagsets)
}

/// A trained model and everything needed to use it.
pub struct LoadedModel {
    pub captioner: Captioner,
    pub ranker: Option<Ranker>,
    pub store: ParamStore<f32>,
    pub vocab: Vocabulary,
    pub approach: Approach,
    pub tagset: TagSet,
    pub meta: serde_json::Value,
}

pub fn save_model(path: &Path, m: &LoadedModel) -> Result<()> {
    save_checkpoint(path, &m.store.named_values(), &m.meta)
}

/// Build the metadata record stored next to the weights.
#[allow(clippy::too_many_arguments)]
pub fn model_meta(
    model: &ModelConfig,
    ranker: Option<&RankerConfig>,
    vocab: &Vocabulary,
    feat_dim: usize,
    approach: Approach,
    tagset: TagSet,
    config_hash: &str,
    outcome: Option<&TrainOutcome>,
) -> serde_json::Value {
    json!({
        "model": model,
        "ranker": ranker,
        "vocab": vocab.to_tsv(),
        "feat_dim": feat_dim,
        "approach": approach,
        "tagset": tagset,
        "config_hash": config_hash,
        "epoch": outcome.map(|o| o.best_epoch),
        "history": outcome.map(|o| &o.history),
    })
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ck = load_checkpoint::<f32>(path)?;
    let meta = ck.meta;
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Data(format!("{}: checkpoint metadata lacks {k}", path.display())))
    };
    let model: ModelConfig = serde_json::from_value(field("model")?)?;
    let ranker_cfg: Option<RankerConfig> = serde_json::from_value(field("ranker")?)?;
    let vocab = Vocabulary::from_tsv(field("vocab")?.as_str().unwrap_or_default())?;
    let feat_dim: usize = serde_json::from_value(field("feat_dim")?)?;
    let approach: Approach = serde_json::from_value(field("approach")?)?;
    let tagset: TagSet = serde_json::from_value(field("tagset")?)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let captioner = Captioner::new(model, vocab.len(), feat_dim, &mut store, &mut rng)?;
    let ranker = ranker_cfg
        .map(|c| Ranker::new(&mut store, c, captioner.state_dim(), feat_dim, &mut rng))
        .transpose()?;
    store.load_values(&ck.tensors)?;
    Ok(LoadedModel {
        captioner,
        ranker,
        store,
        vocab,
        approach,
        tagset,
        meta,
    })
}

/// Train one model with early stopping on validation BLEU.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    cfg: &ExperimentConfig,
    train: &[&CorpusRecord],
    val: &[&CorpusRecord],
    vocab: &Vocabulary,
    approach: Approach,
    tagset: TagSet,
    seed: u64,
) -> Result<(LoadedModel, TrainOutcome)> {
    let train_data = build_caption_data::<f32>(train, approach, tagset, vocab).map_err(|e| e.in_stage("planner"))?;
    let val_data = build_caption_data::<f32>(val, approach, tagset, vocab).map_err(|e| e.in_stage("planner"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let feat_dim = train_data.feat_dim();
    let captioner = Captioner::new(cfg.model.clone(), vocab.len(), feat_dim, &mut store, &mut rng)?;
    let ranker = cfg
        .ranker
        .clone()
        .map(|c| Ranker::new(&mut store, c, captioner.state_dim(), feat_dim, &mut rng))
        .transpose()?;
    let outcome = early_stopped_train(
        &captioner,
        ranker.as_ref(),
        &mut store,
        &train_data,
        &val_data,
        vocab,
        &cfg.train,
        seed,
    )
    .map_err(|e| e.in_stage("train"))?;
    let tagset = if approach.uses_tags() { tagset } else { TagSet::None };
    let meta = model_meta(
        &cfg.model,
        cfg.ranker.as_ref(),
        vocab,
        feat_dim,
        approach,
        tagset,
        &cfg.content_hash(),
        Some(&outcome),
    );
    Ok((
        LoadedModel {
            captioner,
            ranker,
            store,
            vocab: vocab.clone(),
            approach,
            tagset,
            meta,
        },
        outcome,
    ))
}

/// Beam-decode scenes, optionally re-ranking the full beam.
pub fn decode_records(m: &LoadedModel, scenes: &[&CorpusRecord], decode: &DecodeConfig, max_len: usize) -> Result<Vec<DecodeRecord>> {
    let mut out = Vec::new();
    let mut beam = crate::captioner::BeamConfig {
        beam: decode.beam,
        max_len,
        top_k: decode.top_k,
        length_normalize: decode.length_normalize,
    };
    let ranker = if decode.rerank {
        Some(m.ranker.as_ref().ok_or_else(|| Error::Config("rerank requires a ranker".into()))?)
    } else {
        None
    };
    if ranker.is_some() {
        beam.top_k = beam.beam;
    }
    for rec in scenes {
        let feats: Tensor<f32> = rec.features().cast();
        let hyps: Vec<Hypothesis> = decode_scene(&m.captioner, &m.store, &feats, m.approach, &beam)?;
        match ranker {
            Some(rk) => {
                let img = rk.embed_image(&m.store, &feats)?;
                for (rank, (h, score)) in rerank(hyps, &img, rk, &m.store, decode.top_k)?.into_iter().enumerate() {
                    let mut r = DecodeRecord::from_hypothesis(rec.scene.id, rank, &h, m.approach, &m.vocab);
                    r.rerank_score = Some(score);
                    out.push(r);
                }
            }
            None => {
                for (rank, h) in hyps.iter().enumerate() {
                    out.push(DecodeRecord::from_hypothesis(rec.scene.id, rank, h, m.approach, &m.vocab));
                }
            }
        }
    }
    Ok(out)
}

/// Caption metrics of decoded scenes against their references.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_records(
    records: &[DecodeRecord],
    scenes: &[&CorpusRecord],
    train: &[&CorpusRecord],
    pairs: &[ConceptPair],
    approach: Approach,
    tagset: TagSet,
    k: usize,
    n_refs: usize,
    lex: &Lexicon,
) -> Result<MetricsReport> {
    let gens = generation_set(records, lex);
    let by_id: BTreeMap<u64, &CorpusRecord> = scenes.iter().map(|r| (r.scene.id, *r)).collect();
    let references = gens
        .iter()
        .map(|g| {
            by_id
                .get(&g.scene)
                .map(|r| r.references.as_slice())
                .ok_or_else(|| Error::Data(format!("decoded scene {} not in the evaluation set", g.scene)))
        })
        .collect::<Result<Vec<_>>>()?;
    let train_captions: Vec<Vec<String>> = train.iter().flat_map(|r| r.references.iter().map(|x| x.tokens.clone())).collect();
    let inputs = EvalInputs {
        gens: &gens,
        references,
        train_captions: &train_captions,
        pairs,
        k,
        n_refs,
    };
    evaluate(&inputs, approach, tagset, lex)
}

/// Text and image retrieval over a gallery: each scene's image against the
/// layer-1 states of its gold captions.
pub fn retrieval_metrics(m: &LoadedModel, gallery: &[&CorpusRecord]) -> Result<Vec<crate::ranker::RecallRecord>> {
    let rk = m
        .ranker
        .as_ref()
        .ok_or_else(|| Error::Config("retrieval requires a ranker".into()))?;
    let kind = m.approach.caption_kind();
    let mut images = Vec::with_capacity(gallery.len());
    let mut sentences = Vec::new();
    let mut owner = Vec::new();
    for (i, rec) in gallery.iter().enumerate() {
        let feats: Tensor<f32> = rec.features().cast();
        images.push(rk.embed_image(&m.store, &feats)?);
        let seqs: Vec<Vec<usize>> = rec
            .references
            .iter()
            .map(|r| {
                let tags = reference_tags(r, m.tagset);
                let streams = encode(&r.tokens, tags.as_deref(), m.approach, m.tagset, &m.vocab)?;
                Ok(streams.into_iter().find(|s| s.kind == kind).expect("caption stream").ids)
            })
            .collect::<Result<_>>()?;
        let n = seqs.len();
        let r = feats.rows();
        let stacked = Tensor::matrix(n * r, feats.cols(), feats.data().repeat(n));
        let batch = TeacherBatch {
            feats: stacked,
            regions: r,
            seqs,
        };
        let mut g = Graph::new(&m.store);
        let out = m.captioner.teacher_forward(&mut g, &batch)?;
        let lens = batch.input_lens();
        let e = rk.sentence_embeddings(&mut g, out.layer1, out.steps, &lens, rk.config.pooling)?;
        for j in 0..n {
            sentences.push(g.value(e).row(j).iter().map(|&v| v as f64).collect());
            owner.push(i);
        }
    }
    retrieval_recall(&images, &sentences, &owner, &[1, 5, 10])
}

struct SetContext<'a> {
    split: DatasetSplit,
    train: Vec<&'a CorpusRecord>,
    val: Vec<&'a CorpusRecord>,
    eval: Vec<&'a CorpusRecord>,
    /// The whole evaluation partition, ignoring `eval_limit`.
    gallery: Vec<&'a CorpusRecord>,
    vocab: Vocabulary,
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn run_cell(cfg: &ExperimentConfig, ctx: &SetContext, cell: &Cell, dir: &Path, lex: &Lexicon, rec: &mut CellRecord) -> Result<()> {
    let cell_dir = dir.join("cells").join(cell.id());
    fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e).in_stage("setup"))?;
    let rel = |name: &str| PathBuf::from("cells").join(cell.id()).join(name);

    let t = Instant::now();
    let (model, outcome) = train_model(cfg, &ctx.train, &ctx.val, &ctx.vocab, cell.approach, cell.tagset, cell.seed)?;
    save_model(&dir.join(rel("model.ckpt")), &model).map_err(|e| e.in_stage("train"))?;
    rec.timings.insert("train".into(), secs(t));
    rec.checkpoint = Some(rel("model.ckpt"));
    rec.best_epoch = Some(outcome.best_epoch);
    rec.stopped_epoch = Some(outcome.stopped_epoch);

    let t = Instant::now();
    let records = decode_records(&model, &ctx.eval, &cfg.decode, cfg.train.max_len(cell.approach)).map_err(|e| e.in_stage("decode"))?;
    write_jsonl(&dir.join(rel("decode.jsonl")), &records).map_err(|e| e.in_stage("decode"))?;
    rec.timings.insert("decode".into(), secs(t));
    rec.decode = Some(rel("decode.jsonl"));

    let t = Instant::now();
    let mut report = evaluate_records(
        &records,
        &ctx.eval,
        &ctx.train,
        ctx.split.spec.active(),
        cell.approach,
        cell.tagset,
        cfg.decode.top_k,
        cfg.world.n_refs,
        lex,
    )
    .map_err(|e| e.in_stage("eval"))?;
    report.backend = cfg.model.backend.to_string();
    report.heldout_set = cell.set;
    report.split = format!("{:?}", cfg.eval_split).to_lowercase();
    report.seed = cell.seed;
    if model.ranker.is_some() && cfg.retrieval_gallery > 0 {
        let n = cfg.retrieval_gallery.min(ctx.gallery.len());
        report.retrieval = Some(retrieval_metrics(&model, &ctx.gallery[..n]).map_err(|e| e.in_stage("eval"))?);
    }
    report.validate().map_err(|e| e.in_stage("eval"))?;
    write_json(&dir.join(rel("metrics.json")), &report)?;
    rec.timings.insert("eval".into(), secs(t));
    rec.metrics = Some(rel("metrics.json"));
    Ok(())
}

fn stage_name(e: &Error) -> String {
    match e {
        Error::Stage { stage, .. } => stage.clone(),
        _ => "cell".into(),
    }
}

/// Run (or resume) every cell of the configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let hash = cfg.content_hash();
    let mut manifest = match RunManifest::load(&dir) {
        Ok(m) if m.config_hash == hash => m,
        Ok(m) => {
            return Err(Error::Config(format!(
                "{} holds a run of config {}, not {hash}",
                dir.display(),
                m.config_hash
            )))
        }
        Err(_) => RunManifest {
            config_hash: hash.clone(),
            version: version_string(),
            timings: BTreeMap::new(),
            cells: BTreeMap::new(),
            warnings: Vec::new(),
        },
    };
    write_atomic(&dir.join("config.toml"), cfg.to_run_toml()?.as_bytes())?;
    write_atomic(&dir.join("config.sha256"), format!("{hash}\n").as_bytes())?;
    manifest.save(&dir)?;

    let lex = Lexicon::default();
    let t = Instant::now();
    let corpus = generate_corpus(cfg.scenes, cfg.world_seed, &cfg.world, &lex).map_err(|e| e.in_stage("world"))?;
    let corpus_path = dir.join("corpus.jsonl");
    if !corpus_path.exists() {
        write_corpus(&corpus_path, &corpus).map_err(|e| e.in_stage("world"))?;
    }
    manifest.timings.insert("world".into(), secs(t));
    manifest.save(&dir)?;

    for set in cfg.sets() {
        let t = Instant::now();
        let spec = cfg.split_spec(set, &lex).map_err(|e| e.in_stage("splits"))?;
        let split = build_splits(&corpus, &spec, cfg.split_ratios, cfg.split_seed, &lex).map_err(|e| e.in_stage("splits"))?;
        let splits_dir = dir.join("splits");
        fs::create_dir_all(&splits_dir).map_err(|e| Error::io(&splits_dir, e))?;
        write_split_manifest(&splits_dir.join(format!("set{set}.jsonl")), &split).map_err(|e| e.in_stage("splits"))?;
        for w in &split.warnings {
            let w = format!("set {set}: {w}");
            if !manifest.warnings.contains(&w) {
                manifest.warnings.push(w);
            }
        }
        let train = partition_records(&corpus, &split, Partition::Train);
        let val = partition_records(&corpus, &split, Partition::Val);
        let gallery = partition_records(&corpus, &split, cfg.eval_split);
        let mut eval = gallery.clone();
        if let Some(n) = cfg.eval_limit {
            eval.truncate(n);
        }
        let vocab = split_vocabulary(&train, &cfg.tagsets).map_err(|e| e.in_stage("planner"))?;
        vocab.write_tsv(&splits_dir.join(format!("set{set}.vocab.tsv")))?;
        manifest.timings.insert(format!("splits.set{set}"), secs(t));
        manifest.save(&dir)?;
        let ctx = SetContext {
            split,
            train,
            val,
            eval,
            gallery,
            vocab,
        };
        for cell in cfg.cells().into_iter().filter(|c| c.set == set) {
            let id = cell.id();
            if let Some(r) = manifest.cells.get(&id) {
                let done = r.status == CellStatus::Done && r.metrics.as_ref().is_some_and(|p| dir.join(p).exists());
                if done {
                    continue;
                }
            }
            log::info!("cell {id}");
            let mut rec = CellRecord {
                cell: cell.clone(),
                status: CellStatus::Done,
                failed_stage: None,
                error: None,
                timings: BTreeMap::new(),
                checkpoint: None,
                decode: None,
                metrics: None,
                best_epoch: None,
                stopped_epoch: None,
            };
            if let Err(e) = run_cell(cfg, &ctx, &cell, &dir, &lex, &mut rec) {
                log::warn!("cell {id} failed: {e}");
                rec.status = CellStatus::Failed;
                rec.failed_stage = Some(stage_name(&e));
                rec.error = Some(e.to_string());
            }
            manifest.cells.insert(id, rec);
            manifest.save(&dir)?;
        }
    }
    Ok(manifest)
}
