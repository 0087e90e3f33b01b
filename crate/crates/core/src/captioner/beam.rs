//! Length-capped beam search over any incremental scorer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An incremental next-symbol model.
pub trait StepModel {
    type State: Clone;

    /// Feed one symbol to each state; returns per-state log-probabilities
    /// over the vocabulary and the layer-1 state snapshot after the symbol.
    fn step(&self, states: &mut [Self::State], tokens: &[usize]) -> Result<Vec<StepOutput>>;

    fn vocab_size(&self) -> usize;
}

pub struct StepOutput {
    pub logprobs: Vec<f64>,
    pub snapshot: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated symbols, without the start control; ends with `</s>` when
    /// finished.
    pub ids: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
    /// Layer-1 states from which each symbol was predicted.
    #[serde(skip)]
    pub states: Vec<Vec<f32>>,
}

#[derive(Clone, Copy, Debug)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    pub top_k: usize,
    /// Score finished hypotheses by mean per-symbol log-probability.
    pub length_normalize: bool,
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.beam < self.top_k {
            return Err(Error::Config(format!(
                "beam size {} must be >= K = {} >= 1",
                self.beam, self.top_k
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

fn score(h: &Hypothesis, cfg: &BeamConfig) -> f64 {
    if cfg.length_normalize && !h.ids.is_empty() {
        h.logprob / h.ids.len() as f64
    } else {
        h.logprob
    }
}

struct Live<S> {
    hyp: Hypothesis,
    state: S,
}

/// Beam search from `init` after feeding `start`.
///
/// Each step expands every live hypothesis by every symbol and keeps the
/// best `beam - finished` expansions; expansions ending in `eos` retire to
/// the pool. Hypotheses alive at `max_len` retire unfinished. Returns the
/// best `top_k` of the pool.
pub fn beam_search<M: StepModel>(
    model: &M,
    init: M::State,
    start: usize,
    eos: usize,
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let mut live = vec![Live {
        hyp: Hypothesis {
            ids: vec![],
            logprob: 0.0,
            finished: false,
            states: vec![],
        },
        state: init,
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        let capacity = cfg.beam.saturating_sub(pool.len());
        if live.is_empty() || capacity == 0 {
            break;
        }
        let tokens: Vec<usize> = live
            .iter()
            .map(|l| *l.hyp.ids.last().unwrap_or(&start))
            .collect();
        let mut states: Vec<M::State> = live.iter().map(|l| l.state.clone()).collect();
        let outs = model.step(&mut states, &tokens)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, out) in outs.iter().enumerate() {
            for (v, &lp) in out.logprobs.iter().enumerate() {
                cands.push((live[hi].hyp.logprob + lp, hi, v));
            }
        }
        // stable: equal scores keep (hypothesis, symbol) order
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(capacity);
        let last = step + 1 == cfg.max_len;
        let mut next = Vec::with_capacity(cands.len());
        for (lp, hi, v) in cands {
            let mut hyp = live[hi].hyp.clone();
            hyp.ids.push(v);
            hyp.logprob = lp;
            hyp.states.push(outs[hi].snapshot.clone());
            if v == eos {
                hyp.finished = true;
                pool.push(hyp);
            } else if last {
                pool.push(hyp);
            } else {
                next.push(Live {
                    hyp,
                    state: states[hi].clone(),
                });
            }
        }
        live = next;
    }
    pool.sort_by(|a, b| score(b, cfg).total_cmp(&score(a, cfg)));
    pool.truncate(cfg.top_k);
    Ok(pool)
}

/// Batched greedy decoding: one hypothesis per initial state.
pub fn greedy_decode<M: StepModel>(
    model: &M,
    mut states: Vec<M::State>,
    start: usize,
    eos: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    let n = states.len();
    let mut hyps: Vec<Hypothesis> = (0..n)
        .map(|_| Hypothesis {
            ids: vec![],
            logprob: 0.0,
            finished: false,
            states: vec![],
        })
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let tokens: Vec<usize> = active
            .iter()
            .map(|&i| *hyps[i].ids.last().unwrap_or(&start))
            .collect();
        let mut batch: Vec<M::State> = active.iter().map(|&i| states[i].clone()).collect();
        let outs = model.step(&mut batch, &tokens)?;
        let mut still = Vec::with_capacity(active.len());
        for ((&i, out), st) in active.iter().zip(&outs).zip(batch) {
            // first maximum, matching the beam's tie order
            let (v, lp) = out
                .logprobs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (v, &lp)| if lp > acc.1 { (v, lp) } else { acc });
            let h = &mut hyps[i];
            h.ids.push(v);
            h.logprob += lp;
            h.states.push(out.snapshot.clone());
            states[i] = st;
            if v == eos {
                h.finished = true;
            } else {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(hyps)
}

pub mod toy {
    //! A hand-set model whose log-probabilities depend on the whole prefix;
    //! small enough to enumerate, so decoders can be checked exhaustively.
    use super::*;
    use rand::Rng;
    use std::collections::HashMap;

    pub struct ToyModel {
        pub vocab: usize,
        pub table: HashMap<Vec<usize>, Vec<f64>>,
    }

    impl ToyModel {
        /// Random logits for every prefix up to `depth` symbols.
        pub fn random(vocab: usize, depth: usize, rng: &mut impl Rng) -> Self {
            let mut table = HashMap::new();
            let mut frontier = vec![vec![]];
            for _ in 0..=depth {
                let mut next = Vec::new();
                for p in frontier {
                    let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
                    table.insert(p.clone(), logits.iter().map(|l| l - z).collect());
                    for v in 0..vocab {
                        let mut q: Vec<usize> = p.clone();
                        q.push(v);
                        next.push(q);
                    }
                }
                frontier = next;
            }
            ToyModel { vocab, table }
        }

        /// Model from explicit (prefix, log-probabilities) rows.
        pub fn from_rows(vocab: usize, rows: Vec<(Vec<usize>, Vec<f64>)>) -> Self {
            ToyModel {
                vocab,
                table: rows.into_iter().collect(),
            }
        }

        pub fn logprob(&self, seq: &[usize]) -> f64 {
            (0..seq.len()).map(|i| self.table[&seq[..i]][seq[i]]).sum()
        }
    }

    impl StepModel for ToyModel {
        /// The prefix generated so far.
        type State = Option<Vec<usize>>;

        fn step(&self, states: &mut [Self::State], tokens: &[usize]) -> Result<Vec<StepOutput>> {
            Ok(states
                .iter_mut()
                .zip(tokens)
                .map(|(s, &t)| {
                    let prefix = match s.take() {
                        None => vec![],
                        Some(mut p) => {
                            p.push(t);
                            p
                        }
                    };
                    let out = StepOutput {
                        logprobs: self.table[&prefix].clone(),
                        snapshot: vec![prefix.len() as f32],
                    };
                    *s = Some(prefix);
                    out
                })
                .collect())
        }

        fn vocab_size(&self) -> usize {
            self.vocab
        }
    }

    /// Every finished sequence of length <= max_len plus every unfinished
    /// sequence of exactly max_len, best first.
    pub fn enumerate(model: &ToyModel, eos: usize, max_len: usize) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::new();
        let mut frontier: Vec<Vec<usize>> = vec![vec![]];
        for len in 1..=max_len {
            let mut next = Vec::new();
            for p in &frontier {
                for v in 0..model.vocab {
                    let mut q = p.clone();
                    q.push(v);
                    if v == eos || len == max_len {
                        let lp = model.logprob(&q);
                        out.push((q, lp));
                    } else {
                        next.push(q);
                    }
                }
            }
            frontier = next;
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::toy::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exhaustive_beam_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let m = ToyModel::random(3, 3, &mut rng);
            let cfg = BeamConfig {
                beam: 100,
                max_len: 3,
                top_k: 5,
                length_normalize: false,
            };
            let got = beam_search(&m, None, 0, 2, &cfg).unwrap();
            let want = enumerate(&m, 2, 3);
            for (h, (seq, lp)) in got.iter().zip(&want) {
                assert_eq!(&h.ids, seq);
                assert!((h.logprob - lp).abs() < 1e-12);
                assert_eq!(h.finished, seq.last() == Some(&2));
            }
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let m = ToyModel::random(4, 5, &mut rng);
            let cfg = BeamConfig {
                beam: 1,
                max_len: 5,
                top_k: 1,
                length_normalize: false,
            };
            let b = beam_search(&m, None, 0, 3, &cfg).unwrap();
            let g = greedy_decode(&m, vec![None], 0, 3, 5).unwrap();
            assert_eq!(b[0].ids, g[0].ids);
            assert!((b[0].logprob - g[0].logprob).abs() < 1e-12);
        }
    }

    #[test]
    fn k_larger_than_beam_rejected() {
        let m = ToyModel::random(3, 1, &mut ChaCha8Rng::seed_from_u64(2));
        let cfg = BeamConfig {
            beam: 2,
            max_len: 2,
            top_k: 3,
            length_normalize: false,
        };
        assert!(matches!(beam_search(&m, None, 0, 2, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn snapshots_align_with_symbols() {
        let m = ToyModel::random(3, 4, &mut ChaCha8Rng::seed_from_u64(3));
        let cfg = BeamConfig {
            beam: 4,
            max_len: 4,
            top_k: 4,
            length_normalize: false,
        };
        for h in beam_search(&m, None, 0, 2, &cfg).unwrap() {
            assert_eq!(h.states.len(), h.ids.len());
            let lp = m.logprob(&h.ids);
            assert!((lp - h.logprob).abs() < 1e-12);
        }
    }
}
