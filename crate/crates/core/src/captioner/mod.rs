//! Caption decoders trained by teacher forcing on planned sequences, with
//! two interchangeable backends and beam decoding.

pub mod beam;
mod recurrent;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use beam::{beam_search, greedy_decode, BeamConfig, Hypothesis, StepModel, StepOutput};
pub use recurrent::{RecState, RecurrentModel};
pub use transformer::{TfState, TransformerModel};

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Graph, ParamStore, Real, Tensor, Var};
use crate::planner::{encode, parse_generated, reference_tags, strip, Approach, PlannedSequence, TagSet, Vocabulary, EOS};
use crate::ranker::Ranker;
use crate::world::CorpusRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Recurrent,
    Transformer,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Recurrent => "recurrent",
            Backend::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(Backend::Recurrent),
            "transformer" => Ok(Backend::Transformer),
            _ => Err(Error::Config(format!("unknown backend {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backend: Backend,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub tf_layers: usize,
    pub tf_heads: usize,
    pub tf_width: usize,
    pub tf_ff: usize,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backend: Backend::Recurrent,
            embed_dim: 64,
            hidden_dim: 128,
            tf_layers: 2,
            tf_heads: 4,
            tf_width: 64,
            tf_ff: 256,
            max_positions: 64,
        }
    }
}

/// One teacher-forced batch: region rows of every sequence's scene stacked
/// as `[n * regions, d]`, and full sequences (start control .. `</s>`).
pub struct TeacherBatch<T> {
    pub feats: Tensor<T>,
    pub regions: usize,
    pub seqs: Vec<Vec<usize>>,
}

impl<T: Real> TeacherBatch<T> {
    /// Longest input length (sequence length minus the final target).
    pub fn max_inputs(&self) -> usize {
        self.seqs.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0)
    }

    pub fn input_lens(&self) -> Vec<usize> {
        self.seqs.iter().map(|s| s.len().saturating_sub(1)).collect()
    }
}

pub struct TeacherOutput {
    /// Summed negative log-likelihood over non-pad targets.
    pub loss_sum: Var,
    pub n_targets: usize,
    /// Batch-major layer-1 states `[n * steps, d_h]`; row `i * steps + t` is
    /// the state after input `t`, from which target `t + 1` is predicted.
    pub layer1: Var,
    pub steps: usize,
}

pub struct StepOutputs {
    pub logprobs: Vec<Vec<f64>>,
    pub snapshots: Vec<Vec<f32>>,
}

pub fn log_softmax_rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let row: Vec<f64> = t.row(i).iter().map(|v| v.as_f64()).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            row.iter().map(|v| v - z).collect()
        })
        .collect()
}

#[derive(Clone, Debug)]
enum Backbone {
    Recurrent(RecurrentModel),
    Transformer(TransformerModel),
}

#[derive(Clone, Debug)]
pub struct Captioner {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub feat_dim: usize,
    backbone: Backbone,
}

impl Captioner {
    pub fn new<T: Real>(
        config: ModelConfig,
        vocab_size: usize,
        feat_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if vocab_size == 0 || feat_dim == 0 {
            return Err(Error::Config("vocabulary and feature width must be positive".into()));
        }
        let backbone = match config.backend {
            Backend::Recurrent => {
                if config.embed_dim == 0 || config.hidden_dim == 0 {
                    return Err(Error::Config("recurrent dimensions must be positive".into()));
                }
                Backbone::Recurrent(RecurrentModel::new(
                    store,
                    vocab_size,
                    feat_dim,
                    config.embed_dim,
                    config.hidden_dim,
                    rng,
                ))
            }
            Backend::Transformer => Backbone::Transformer(TransformerModel::new(
                store,
                vocab_size,
                feat_dim,
                config.tf_width,
                config.tf_layers,
                config.tf_heads,
                config.tf_ff,
                config.max_positions,
                rng,
            )?),
        };
        Ok(Captioner {
            config,
            vocab_size,
            feat_dim,
            backbone,
        })
    }

    /// Width of the layer-1 states handed to the ranker.
    pub fn state_dim(&self) -> usize {
        match &self.backbone {
            Backbone::Recurrent(m) => m.hidden,
            Backbone::Transformer(m) => m.width,
        }
    }

    pub fn teacher_forward<T: Real>(&self, g: &mut Graph<T>, batch: &TeacherBatch<T>) -> Result<TeacherOutput> {
        if batch.seqs.is_empty() || batch.seqs.iter().any(|s| s.len() < 2) {
            return Err(Error::EmptySequence);
        }
        if batch.feats.rows() != batch.seqs.len() * batch.regions || batch.feats.cols() != self.feat_dim {
            return Err(Error::Shape(format!(
                "features {:?} for {} sequences of {} regions x {}",
                batch.feats.shape(),
                batch.seqs.len(),
                batch.regions,
                self.feat_dim
            )));
        }
        if let Some(&bad) = batch.seqs.iter().flatten().find(|&&id| id >= self.vocab_size) {
            return Err(Error::Index {
                index: bad,
                size: self.vocab_size,
            });
        }
        match &self.backbone {
            Backbone::Recurrent(m) => m.teacher_forward(g, batch),
            Backbone::Transformer(m) => m.teacher_forward(g, batch),
        }
    }

    pub fn decoder<'a, T: Real>(&'a self, store: &'a ParamStore<T>) -> Decoder<'a, T> {
        Decoder { model: self, store }
    }
}

#[derive(Clone)]
pub enum DecState<T> {
    Rec(RecState<T>),
    Tf(TfState<T>),
}

/// Incremental scorer over a trained parameter store.
pub struct Decoder<'a, T: Real> {
    model: &'a Captioner,
    store: &'a ParamStore<T>,
}

impl<T: Real> Decoder<'_, T> {
    /// Initial state for a scene; the first symbol fed must be a start control.
    pub fn start(&self, feats: &Tensor<T>) -> Result<DecState<T>> {
        if feats.rows() == 0 {
            return Err(Error::EmptyAttention);
        }
        if feats.cols() != self.model.feat_dim {
            return Err(Error::Shape(format!(
                "feature width {} vs model {}",
                feats.cols(),
                self.model.feat_dim
            )));
        }
        Ok(match &self.model.backbone {
            Backbone::Recurrent(m) => DecState::Rec(m.start(self.store, feats)?),
            Backbone::Transformer(m) => DecState::Tf(m.start(self.store, feats)),
        })
    }

    /// Log-probability of `ids[1..]` given `ids[0]` by step-wise scoring.
    pub fn score_sequence(&self, feats: &Tensor<T>, ids: &[usize]) -> Result<f64> {
        let mut state = vec![self.start(feats)?];
        let mut total = 0.0;
        for w in ids.windows(2) {
            let out = self.step(&mut state, &[w[0]])?;
            total += out[0].logprobs[w[1]];
        }
        Ok(total)
    }
}

impl<T: Real> StepModel for Decoder<'_, T> {
    type State = DecState<T>;

    fn step(&self, states: &mut [DecState<T>], tokens: &[usize]) -> Result<Vec<StepOutput>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.model.vocab_size) {
            return Err(Error::Index {
                index: bad,
                size: self.model.vocab_size,
            });
        }
        let outs = match &self.model.backbone {
            Backbone::Recurrent(m) => {
                let mut inner: Vec<RecState<T>> = states
                    .iter()
                    .map(|s| match s {
                        DecState::Rec(r) => Ok(r.clone()),
                        DecState::Tf(_) => Err(Error::Config("transformer state fed to recurrent model".into())),
                    })
                    .collect::<Result<_>>()?;
                let o = m.step(self.store, &mut inner, tokens)?;
                for (s, r) in states.iter_mut().zip(inner) {
                    *s = DecState::Rec(r);
                }
                o
            }
            Backbone::Transformer(m) => {
                let mut inner: Vec<TfState<T>> = states
                    .iter()
                    .map(|s| match s {
                        DecState::Tf(r) => Ok(r.clone()),
                        DecState::Rec(_) => Err(Error::Config("recurrent state fed to transformer model".into())),
                    })
                    .collect::<Result<_>>()?;
                let o = m.step(self.store, &mut inner, tokens)?;
                for (s, r) in states.iter_mut().zip(inner) {
                    *s = DecState::Tf(r);
                }
                o
            }
        };
        Ok(outs
            .logprobs
            .into_iter()
            .zip(outs.snapshots)
            .map(|(logprobs, snapshot)| StepOutput { logprobs, snapshot })
            .collect())
    }

    fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }
}

/// One scene's training material.
#[derive(Clone, Debug)]
pub struct SceneData<T> {
    pub id: u64,
    pub feats: Tensor<T>,
    /// Planned streams per reference (two for multitask).
    pub streams: Vec<Vec<PlannedSequence>>,
    /// Reference token lists, for BLEU.
    pub ref_tokens: Vec<Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct CaptionData<T> {
    pub approach: Approach,
    pub tagset: TagSet,
    pub scenes: Vec<SceneData<T>>,
}

impl<T: Real> CaptionData<T> {
    pub fn regions(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.feats.rows())
    }

    pub fn feat_dim(&self) -> usize {
        self.scenes.first().map_or(0, |s| s.feats.cols())
    }
}

pub fn build_caption_data<T: Real>(
    records: &[&CorpusRecord],
    approach: Approach,
    tagset: TagSet,
    vocab: &Vocabulary,
) -> Result<CaptionData<T>> {
    let tagset = if approach.uses_tags() { tagset } else { TagSet::None };
    if approach.uses_tags() && tagset == TagSet::None {
        return Err(Error::Config(format!("approach {approach} needs a tag set")));
    }
    let mut scenes = Vec::with_capacity(records.len());
    for rec in records {
        let mut streams = Vec::with_capacity(rec.references.len());
        for r in &rec.references {
            let tags = reference_tags(r, tagset);
            streams.push(encode(&r.tokens, tags.as_deref(), approach, tagset, vocab)?);
        }
        let feats = rec.features().cast();
        scenes.push(SceneData {
            id: rec.scene.id,
            feats,
            streams,
            ref_tokens: rec.references.iter().map(|r| r.tokens.clone()).collect(),
        });
    }
    let regions = scenes.first().map_or(0, |s| s.feats.rows());
    if scenes.iter().any(|s| s.feats.rows() != regions) {
        return Err(Error::Data("scenes disagree on region count".into()));
    }
    Ok(CaptionData {
        approach,
        tagset,
        scenes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Linear learning-rate warm-up length in optimizer steps (0 = none).
    pub warmup_steps: usize,
    /// References sampled per scene per epoch (`None` = all).
    pub refs_per_scene: Option<usize>,
    pub max_len_words: usize,
    pub max_len_tags: usize,
    /// Cap on validation scenes decoded for early stopping (`None` = all).
    pub val_scenes: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            warmup_steps: 0,
            refs_per_scene: None,
            max_len_words: 20,
            max_len_tags: 40,
            val_scenes: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        if self.refs_per_scene == Some(0) || self.val_scenes == Some(0) {
            return Err(Error::Config("refs_per_scene and val_scenes must be positive".into()));
        }
        Ok(())
    }

    pub fn max_len(&self, approach: Approach) -> usize {
        if approach.caption_kind().has_tags() {
            self.max_len_tags
        } else {
            self.max_len_words
        }
    }

    fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.adam.lr
        } else {
            self.adam.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean per-token negative log-likelihood.
    pub loss: f64,
    /// Mean ranking loss over batches that had one (0 without a ranker).
    pub rank_loss: f64,
}

/// Epoch-specific shuffling seed.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// One pass over the data in seeded shuffled order.
pub fn train_epoch<T: Real>(
    model: &Captioner,
    ranker: Option<&Ranker>,
    store: &mut ParamStore<T>,
    data: &CaptionData<T>,
    cfg: &TrainConfig,
    seed: u64,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    let mut rng = epoch_rng(seed, epoch);
    // (scene index, stream)
    let mut examples: Vec<(usize, &PlannedSequence)> = Vec::new();
    for (si, scene) in data.scenes.iter().enumerate() {
        let mut refs: Vec<usize> = (0..scene.streams.len()).collect();
        if let Some(k) = cfg.refs_per_scene {
            refs.shuffle(&mut rng);
            refs.truncate(k);
            refs.sort_unstable();
        }
        for r in refs {
            examples.extend(scene.streams[r].iter().map(|s| (si, s)));
        }
    }
    if examples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    examples.shuffle(&mut rng);
    let caption_kind = data.approach.caption_kind();
    let regions = data.regions();
    let (mut nll, mut tokens) = (0.0, 0usize);
    let (mut rank_total, mut rank_batches) = (0.0, 0usize);
    for (bi, chunk) in examples.chunks(cfg.batch_size).enumerate() {
        let mut feats = Vec::with_capacity(chunk.len() * regions * data.feat_dim());
        for (si, _) in chunk {
            feats.extend_from_slice(data.scenes[*si].feats.data());
        }
        let batch = TeacherBatch {
            feats: Tensor::matrix(chunk.len() * regions, data.feat_dim(), feats),
            regions,
            seqs: chunk.iter().map(|(_, s)| s.ids.clone()).collect(),
        };
        let diverged = |detail: String| Error::Divergence {
            epoch,
            batch: bi,
            detail,
        };
        let grads = {
            let mut g = Graph::new(&*store);
            let out = model.teacher_forward(&mut g, &batch)?;
            let sum = g.value(out.loss_sum).data()[0].as_f64();
            if !sum.is_finite() {
                return Err(diverged(format!("non-finite caption loss {sum}")));
            }
            nll += sum;
            tokens += out.n_targets;
            let mut loss = g.scale(out.loss_sum, T::one() / T::lit(out.n_targets as f64));
            if let Some(rk) = ranker {
                let members: Vec<usize> = (0..chunk.len()).filter(|&i| chunk[i].1.kind == caption_kind).collect();
                let scenes: Vec<u64> = members.iter().map(|&i| data.scenes[chunk[i].0].id).collect();
                let distinct = scenes.iter().collect::<std::collections::BTreeSet<_>>().len();
                if distinct >= 2 {
                    let steps = out.steps;
                    let rows: Vec<usize> = members.iter().flat_map(|&i| i * steps..(i + 1) * steps).collect();
                    let states = g.select_rows(out.layer1, &rows);
                    let lens: Vec<usize> = members.iter().map(|&i| batch.seqs[i].len() - 1).collect();
                    let sent = rk.sentence_embeddings(&mut g, states, steps, &lens, rk.config.pooling)?;
                    let feat_rows: Vec<usize> = members.iter().flat_map(|&i| i * regions..(i + 1) * regions).collect();
                    let fv = g.input(batch.feats.clone());
                    let fsel = g.select_rows(fv, &feat_rows);
                    let img = rk.image_embeddings(&mut g, fsel, members.len())?;
                    let rl = rk.batch_loss(&mut g, img, sent, &scenes);
                    let rv = g.value(rl).data()[0].as_f64();
                    if !rv.is_finite() {
                        return Err(diverged(format!("non-finite ranking loss {rv}")));
                    }
                    rank_total += rv;
                    rank_batches += 1;
                    let weighted = g.scale(rl, T::lit(rk.config.loss_weight));
                    loss = g.add(loss, weighted);
                }
            }
            g.backward(loss).params
        };
        store.set_grads(&grads);
        let lr = cfg.lr_at(store.steps());
        store
            .adam_step(&cfg.adam, lr)
            .map_err(|e| diverged(e.to_string()))?;
    }
    Ok(EpochStats {
        loss: nll / tokens.max(1) as f64,
        rank_loss: if rank_batches == 0 {
            0.0
        } else {
            rank_total / rank_batches as f64
        },
    })
}

/// Patience-based stopping on a score that should increase.
#[derive(Clone, Debug, Default)]
pub struct EarlyStopper {
    pub patience: usize,
    best: Option<(usize, f64)>,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            bad: 0,
        }
    }

    /// Record an epoch's score; returns `true` when training should stop.
    /// Only strict improvements reset the counter; training stops once the
    /// count of non-improving epochs exceeds the patience.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some((_, b)) if score <= b => {
                self.bad += 1;
                self.bad > self.patience
            }
            _ => {
                self.best = Some((epoch, score));
                self.bad = 0;
                false
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.bad == 0 && self.best.map(|b| b.0) == Some(epoch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub rank_loss: f64,
    pub val_bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_bleu: f64,
    pub stopped_epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Greedy-decode scenes (in batches) and return stripped token lists.
pub fn greedy_captions<T: Real>(
    model: &Captioner,
    store: &ParamStore<T>,
    scenes: &[SceneData<T>],
    approach: Approach,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Vec<String>>> {
    let dec = model.decoder(store);
    let start = approach.caption_kind().start();
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(64) {
        let states = chunk.iter().map(|s| dec.start(&s.feats)).collect::<Result<Vec<_>>>()?;
        for h in greedy_decode(&dec, states, start, EOS, max_len)? {
            out.push(strip(&h.ids, vocab));
        }
    }
    Ok(out)
}

/// Train until validation BLEU stops improving; `store` ends holding the
/// parameters of the best epoch.
#[allow(clippy::too_many_arguments)]
pub fn early_stopped_train<T: Real>(
    model: &Captioner,
    ranker: Option<&Ranker>,
    store: &mut ParamStore<T>,
    train: &CaptionData<T>,
    val: &CaptionData<T>,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val.scenes.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let val_scenes = &val.scenes[..cfg.val_scenes.map_or(val.scenes.len(), |n| n.min(val.scenes.len()))];
    let refs: Vec<Vec<Vec<String>>> = val_scenes.iter().map(|s| s.ref_tokens.clone()).collect();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_values = store.named_values();
    let mut history = Vec::new();
    let mut stopped = 0;
    for epoch in 1..=cfg.max_epochs {
        let stats = train_epoch(model, ranker, store, train, cfg, seed, epoch)?;
        let caps = greedy_captions(model, store, val_scenes, train.approach, vocab, cfg.max_len(train.approach))?;
        let bleu = crate::eval::bleu(&caps, &refs, 4)?;
        history.push(EpochLog {
            epoch,
            loss: stats.loss,
            rank_loss: stats.rank_loss,
            val_bleu: bleu,
        });
        stopped = epoch;
        let stop = stopper.observe(epoch, bleu);
        if stopper.improved_at(epoch) {
            best_values = store.named_values();
        }
        if stop {
            break;
        }
    }
    store.load_values(&best_values)?;
    let (best_epoch, best_bleu) = stopper.best().expect("at least one epoch");
    Ok(TrainOutcome {
        best_epoch,
        best_bleu,
        stopped_epoch: stopped,
        history,
    })
}

/// One decoded caption, as written to decode files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub scene: u64,
    pub rank: usize,
    pub ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub logprob: f64,
    pub wellformed: bool,
    pub finished: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_score: Option<f64>,
}

impl DecodeRecord {
    pub fn from_hypothesis(scene: u64, rank: usize, h: &Hypothesis, approach: Approach, vocab: &Vocabulary) -> Self {
        let parsed = parse_generated(&h.ids, approach.caption_kind(), vocab);
        DecodeRecord {
            scene,
            rank,
            ids: h.ids.clone(),
            tokens: parsed.tokens,
            tags: parsed.tags,
            logprob: h.logprob,
            wellformed: parsed.wellformed,
            finished: h.finished,
            rerank_score: None,
        }
    }
}

/// Beam-decode one scene's caption stream.
pub fn decode_scene<T: Real>(
    model: &Captioner,
    store: &ParamStore<T>,
    feats: &Tensor<T>,
    approach: Approach,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    let dec = model.decoder(store);
    let init = dec.start(feats)?;
    beam_search(&dec, init, approach.caption_kind().start(), EOS, cfg)
}
