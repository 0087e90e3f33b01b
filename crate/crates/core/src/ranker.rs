//! Joint image–sentence embedding over decoder states, used for retrieval
//! and for re-ranking beam candidates.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::Hypothesis;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Large negative logit that removes padded steps from a softmax.
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Final,
    Mean,
    Weight,
}

impl Pooling {
    pub const ALL: [Pooling; 3] = [Pooling::Final, Pooling::Mean, Pooling::Weight];

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Final => "final",
            Pooling::Mean => "mean",
            Pooling::Weight => "weight",
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pooling::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerConfig {
    pub pooling: Pooling,
    pub embed_dim: usize,
    pub margin: f64,
    /// Fixed weight of the ranking loss next to the captioning loss.
    pub loss_weight: f64,
    /// Re-ranking mix: `lambda * logprob/len + (1 - lambda) * cosine`.
    pub rerank_lambda: f64,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            pooling: Pooling::Weight,
            embed_dim: 64,
            margin: 0.2,
            loss_weight: 1.0,
            rerank_lambda: 0.0,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("ranker embed_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rerank_lambda) {
            return Err(Error::Config(format!(
                "rerank_lambda {} outside [0, 1]",
                self.rerank_lambda
            )));
        }
        if !(self.margin.is_finite() && self.loss_weight.is_finite()) {
            return Err(Error::Config("ranker margin and loss weight must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Ranker {
    pub config: RankerConfig,
    w_sent: ParamId,
    w_alpha: ParamId,
    img_score: ParamId,
    w_img: ParamId,
    pub state_dim: usize,
    pub feat_dim: usize,
}

impl Ranker {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: RankerConfig,
        state_dim: usize,
        feat_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d_e = config.embed_dim;
        Ok(Ranker {
            w_sent: store.add_matrix("rank.sent.w", state_dim, d_e, rng),
            w_alpha: store.add_matrix("rank.sent.alpha", state_dim, 1, rng),
            img_score: store.add_matrix("rank.img.alpha", feat_dim, 1, rng),
            w_img: store.add_matrix("rank.img.w", feat_dim, d_e, rng),
            config,
            state_dim,
            feat_dim,
        })
    }

    /// Sentence embeddings from batch-major states `[n * steps, d_h]`, where
    /// sequence `i` occupies its first `lens[i]` steps. Rows are unit length.
    pub fn sentence_embeddings<T: Real>(
        &self,
        g: &mut Graph<T>,
        states: Var,
        steps: usize,
        lens: &[usize],
        mode: Pooling,
    ) -> Result<Var> {
        let n = lens.len();
        if g.value(states).rows() != n * steps || g.value(states).cols() != self.state_dim {
            return Err(Error::Shape(format!(
                "ranker states {:?} vs {n} x {steps} x {}",
                g.value(states).shape(),
                self.state_dim
            )));
        }
        if let Some(&bad) = lens.iter().find(|&&l| l == 0 || l > steps) {
            return Err(if bad == 0 {
                Error::EmptySequence
            } else {
                Error::Index { index: bad, size: steps }
            });
        }
        let pooled = match mode {
            Pooling::Final => {
                let last: Vec<usize> = lens.iter().enumerate().map(|(i, &l)| i * steps + l - 1).collect();
                g.select_rows(states, &last)
            }
            Pooling::Mean => {
                let mut w = Tensor::zeros(&[n, steps]);
                for (i, &l) in lens.iter().enumerate() {
                    w.row_mut(i)[..l].fill(T::one() / T::lit(l as f64));
                }
                let w = g.input(w);
                g.group_weighted_sum(w, states)
            }
            Pooling::Weight => {
                let omega = g.linear(states, self.w_alpha, None);
                let omega = g.reshape(omega, n, steps);
                let omega = if lens.iter().all(|&l| l == steps) {
                    omega
                } else {
                    let mut mask = Tensor::zeros(&[n, steps]);
                    for (i, &l) in lens.iter().enumerate() {
                        mask.row_mut(i)[l..].fill(T::lit(MASKED));
                    }
                    let mask = g.input(mask);
                    g.add(omega, mask)
                };
                let alpha = g.softmax_rows(omega);
                g.group_weighted_sum(alpha, states)
            }
        };
        let s = g.linear(pooled, self.w_sent, None);
        Ok(g.l2_normalize_rows(s))
    }

    /// Image embeddings from `[n * R, d]` region rows. Rows are unit length.
    pub fn image_embeddings<T: Real>(&self, g: &mut Graph<T>, feats: Var, n: usize) -> Result<Var> {
        let rows = g.value(feats).rows();
        if n == 0 || rows % n != 0 || rows == 0 {
            return Err(Error::Shape(format!("{rows} region rows for {n} images")));
        }
        let r = rows / n;
        let score = g.linear(feats, self.img_score, None);
        let score = g.reshape(score, n, r);
        let alpha = g.softmax_rows(score);
        let pooled = g.group_weighted_sum(alpha, feats);
        let e = g.linear(pooled, self.w_img, None);
        Ok(g.l2_normalize_rows(e))
    }

    /// Mean over the batch of the hardest-negative hinge; pairs from the same
    /// scene are never negatives of each other.
    pub fn batch_loss<T: Real>(&self, g: &mut Graph<T>, img: Var, sent: Var, scenes: &[u64]) -> Var {
        let sim = g.matmul_t(img, false, sent, true);
        let hinge = g.hardest_negative_hinge(sim, T::lit(self.config.margin), |i, j| scenes[i] != scenes[j]);
        g.scale(hinge, T::one() / T::lit(scenes.len() as f64))
    }

    pub fn embed_sentence<T: Real>(&self, store: &ParamStore<T>, states: &Tensor<T>, mode: Pooling) -> Result<Vec<f64>> {
        if states.rows() == 0 {
            return Err(Error::EmptySequence);
        }
        let mut g = Graph::new(store);
        let s = g.input(states.clone());
        let e = self.sentence_embeddings(&mut g, s, states.rows(), &[states.rows()], mode)?;
        Ok(g.value(e).data().iter().map(|v| v.as_f64()).collect())
    }

    pub fn embed_image<T: Real>(&self, store: &ParamStore<T>, feats: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let f = g.input(feats.clone());
        let e = self.image_embeddings(&mut g, f, 1)?;
        Ok(g.value(e).data().iter().map(|v| v.as_f64()).collect())
    }

    /// Pooling weights of weight mode (for inspection and tests).
    pub fn pooling_weights<T: Real>(&self, store: &ParamStore<T>, states: &Tensor<T>) -> Vec<f64> {
        let mut g = Graph::new(store);
        let s = g.input(states.clone());
        let omega = g.linear(s, self.w_alpha, None);
        let omega = g.reshape(omega, 1, states.rows());
        let alpha = g.softmax_rows(omega);
        g.value(alpha).data().iter().map(|v| v.as_f64()).collect()
    }

    /// Embed a hypothesis from its state snapshots.
    pub fn embed_hypothesis<T: Real>(&self, store: &ParamStore<T>, h: &Hypothesis) -> Result<Vec<f64>> {
        let data: Vec<T> = h.states.iter().flatten().map(|&v| T::lit(v as f64)).collect();
        self.embed_sentence(store, &Tensor::matrix(h.states.len(), self.state_dim, data), self.config.pooling)
    }
}

/// Summed bidirectional hardest-negative hinge over a matched batch of unit
/// embeddings (row `i` of each side is a positive pair).
pub fn contrastive_loss(images: &Tensor<f64>, sentences: &Tensor<f64>, margin: f64) -> Result<f64> {
    if images.rows() < 2 || images.shape() != sentences.shape() {
        return Err(Error::Shape(format!(
            "contrastive batch needs N >= 2 matched rows, got {:?} and {:?}",
            images.shape(),
            sentences.shape()
        )));
    }
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let i = g.input(images.clone());
    let s = g.input(sentences.clone());
    let sim = g.matmul_t(i, false, s, true);
    let l = g.hardest_negative_hinge(sim, margin, |_, _| true);
    Ok(g.value(l).data()[0])
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Image query, sentence gallery.
    Text,
    /// Sentence query, image gallery.
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRecord {
    pub direction: Direction,
    pub k: usize,
    pub recall: f64,
}

/// Rank of the best gold item for a query, with ties broken by index order.
fn best_gold_rank(scores: &[f64], gold: impl Fn(usize) -> bool) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.iter().position(|&i| gold(i)).unwrap_or(usize::MAX)
}

/// Text retrieval (each image retrieves sentences) and image retrieval (each
/// sentence retrieves images) by cosine similarity. `owner[j]` is the image
/// index of sentence `j`.
pub fn retrieval_recall(
    images: &[Vec<f64>],
    sentences: &[Vec<f64>],
    owner: &[usize],
    ks: &[usize],
) -> Result<Vec<RecallRecord>> {
    if sentences.len() != owner.len() {
        return Err(Error::Shape(format!(
            "{} sentences but {} owners",
            sentences.len(),
            owner.len()
        )));
    }
    if let Some(&o) = owner.iter().find(|&&o| o >= images.len()) {
        return Err(Error::Index { index: o, size: images.len() });
    }
    if images.is_empty() || sentences.is_empty() {
        return Err(Error::UndefinedRecall);
    }
    let text_ranks: Vec<usize> = images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let scores: Vec<f64> = sentences.iter().map(|s| cosine(im, s)).collect();
            best_gold_rank(&scores, |j| owner[j] == i)
        })
        .collect();
    let image_ranks: Vec<usize> = sentences
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let scores: Vec<f64> = images.iter().map(|im| cosine(im, s)).collect();
            best_gold_rank(&scores, |i| owner[j] == i)
        })
        .collect();
    let frac = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64;
    let mut out = Vec::new();
    for &k in ks {
        out.push(RecallRecord {
            direction: Direction::Text,
            k,
            recall: frac(&text_ranks, k),
        });
    }
    for &k in ks {
        out.push(RecallRecord {
            direction: Direction::Image,
            k,
            recall: frac(&image_ranks, k),
        });
    }
    Ok(out)
}

/// Mixed re-ranking score of one candidate.
pub fn rerank_score(logprob: f64, len: usize, similarity: f64, lambda: f64) -> f64 {
    lambda * (logprob / len.max(1) as f64) + (1.0 - lambda) * similarity
}

/// Reorder candidates by [`rerank_score`] (stable) and keep `top_k`.
pub fn rerank_by(
    hyps: Vec<Hypothesis>,
    similarities: &[f64],
    lambda: f64,
    top_k: usize,
) -> Vec<(Hypothesis, f64)> {
    let mut scored: Vec<(Hypothesis, f64)> = hyps
        .into_iter()
        .zip(similarities)
        .map(|(h, &s)| {
            let sc = rerank_score(h.logprob, h.ids.len(), s, lambda);
            (h, sc)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(top_k);
    scored
}

/// Re-rank beam candidates against an image embedding.
pub fn rerank<T: Real>(
    hyps: Vec<Hypothesis>,
    image: &[f64],
    ranker: &Ranker,
    store: &ParamStore<T>,
    top_k: usize,
) -> Result<Vec<(Hypothesis, f64)>> {
    let sims = hyps
        .iter()
        .map(|h| Ok(cosine(image, &ranker.embed_hypothesis(store, h)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(rerank_by(hyps, &sims, ranker.config.rerank_lambda, top_k))
}
