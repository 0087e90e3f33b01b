//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p capplan --test acceptance` runs everything (about half an
//! hour); `cargo test -p capplan --test acceptance -- 1 3 9` runs a subset.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use capplan::captioner::beam::toy::ToyModel;
use capplan::captioner::{beam_search, Backend, BeamConfig, Captioner, Hypothesis, ModelConfig, TeacherBatch};
use capplan::eval::{bleu, diversity_metrics, recall_at_k, Generation, SceneGenerations, TTR_SEGMENT};
use capplan::harness::{emit_report, run_experiment, ExperimentConfig, Report};
use capplan::numerics::{finite_diff_check, Gradients, Graph, ParamStore, Tensor};
use capplan::planner::{
    build_vocabulary, encode, parse_generated, reference_tags, strip, Approach, SeqKind, TagSet, EOS,
};
use capplan::ranker::{rerank, rerank_by, rerank_score, Pooling, Ranker, RankerConfig};
use capplan::splits::{build_splits, pair_occurs, ConceptPair, Partition, SplitSpec, DEFAULT_HELDOUT};
use capplan::world::{generate_corpus, oracle_tags, CorpusRecord, Lexicon, Reference, WorldConfig};

// ---- pinned tolerances and budgets ----

const CODEC_CAPTIONS: usize = 10_000;
const CODEC_BUDGET: Duration = Duration::from_secs(10);
const GAP_SCENES: usize = 5_000;
const GAP_BUDGET: Duration = Duration::from_secs(30);
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_INSTANCES: usize = 200;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
/// Paired R@5 gain (points): the mean must be positive and the 95% CI lower
/// bound above this.
const GAIN_CI_FLOOR: f64 = -0.5;
/// Reported, not gated: the gain the directional claim leads one to expect.
const GAIN_EXPECTED: f64 = 1.0;
const MATRIX_BUDGET: Duration = Duration::from_secs(45 * 60);
/// Non-inferiority margin (points) of the idle control.
const IDLE_MARGIN: f64 = 0.5;
const POOLING_SEEDS: usize = 5;
const GALLERY: usize = 500;
const WELLFORMED_MIN: f64 = 99.0;
const TAG_ACC_MIN: f64 = 95.0;
const METRIC_BUDGET: Duration = Duration::from_secs(10);

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(t: Instant, budget: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e <= budget, format!("{:.1}s / {}s", e.as_secs_f64(), budget.as_secs()))
}

fn corpus(n: usize, seed: u64) -> Vec<CorpusRecord> {
    generate_corpus(n, seed, &WorldConfig::default(), &Lexicon::default()).unwrap()
}

// ---- 1: codec ----

fn codec_suite() -> Outcome {
    let t = Instant::now();
    let cfg = WorldConfig::default();
    let data = corpus(CODEC_CAPTIONS.div_ceil(cfg.n_refs), 101);
    let refs: Vec<&Reference> = data.iter().flat_map(|r| &r.references).take(CODEC_CAPTIONS).collect();
    let tagsets = [TagSet::Pos, TagSet::Dep, TagSet::Chunk, TagSet::Ccg, TagSet::Idle];
    let vocab = build_vocabulary(refs.iter().copied(), &tagsets).unwrap();
    let mut kinds = BTreeSet::new();
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for r in &refs {
        let tt = r.tokens.len();
        for approach in Approach::ALL {
            let sets: &[TagSet] = if approach.uses_tags() { &tagsets } else { &[TagSet::None] };
            for &ts in sets {
                let tags = reference_tags(r, ts);
                let streams = encode(&r.tokens, tags.as_deref(), approach, ts, &vocab).unwrap();
                for s in &streams {
                    kinds.insert(s.kind);
                    checked += 1;
                    let want_len = match s.kind {
                        SeqKind::Sequential | SeqKind::Interleave => 2 * tt + 2,
                        _ => tt + 2,
                    };
                    let words = strip(&s.ids, &vocab);
                    let want_words: &[String] = if s.kind == SeqKind::MultitaskTags { &[] } else { &r.tokens };
                    let parsed = parse_generated(&s.ids, s.kind, &vocab);
                    let want_tags: Vec<String> = match (s.kind.has_tags(), ts) {
                        (false, _) => vec![],
                        (true, TagSet::Idle) => vec!["<idle>".into(); tt],
                        (true, _) => tags.clone().unwrap(),
                    };
                    let ok = s.ids.len() == want_len
                        && s.ids.first() == Some(&s.kind.start())
                        && s.ids.last() == Some(&EOS)
                        && words == want_words
                        && parsed.wellformed
                        && parsed.tags == want_tags;
                    if !ok && failures.len() < 3 {
                        failures.push(format!("{approach}/{ts} {:?}: {:?}", s.kind, r.tokens));
                    }
                }
            }
        }
    }
    let (fast, time) = within(t, CODEC_BUDGET);
    Outcome::new(
        failures.is_empty() && kinds.len() == 5 && refs.len() == CODEC_CAPTIONS && fast,
        format!(
            "{} captions, {checked} streams over {} stream kinds, {} failures {failures:?}; {time}",
            refs.len(),
            kinds.len(),
            failures.len()
        ),
    )
}

// ---- 2: gap ----

/// Lemma bigram scan: a held-out adjective directly before its noun.
fn adjacent(r: &Reference, pair: &ConceptPair, lex: &Lexicon) -> bool {
    r.tokens
        .windows(2)
        .any(|w| lex.lemma(&w[0]) == pair.dependent && lex.lemma(&w[1]) == pair.noun)
}

fn gap_suite() -> Outcome {
    let t = Instant::now();
    let lex = Lexicon::default();
    let data = corpus(GAP_SCENES, 202);
    let by_id: HashMap<u64, &CorpusRecord> = data.iter().map(|r| (r.scene.id, r)).collect();
    let mut leaks = 0usize;
    let mut heldout_refs = 0usize;
    let mut orphaned = Vec::new();
    for set in 0..DEFAULT_HELDOUT.len() {
        let spec = SplitSpec::default_sets(&lex, set).unwrap();
        let split = build_splits(&data, &spec, (0.7, 0.1, 0.2), 7, &lex).unwrap();
        let train: Vec<&CorpusRecord> = split.ids(Partition::Train).iter().map(|id| by_id[id]).collect();
        let all_ids: usize = [Partition::Train, Partition::Val, Partition::Test]
            .iter()
            .map(|&p| split.ids(p).len())
            .sum();
        assert_eq!(all_ids, data.len());
        for pair in spec.active() {
            for rec in &train {
                for r in &rec.references {
                    if pair_occurs(r, pair, &lex) || adjacent(r, pair, &lex) {
                        leaks += 1;
                    }
                }
            }
            heldout_refs += data
                .iter()
                .flat_map(|r| &r.references)
                .filter(|r| pair_occurs(r, pair, &lex))
                .count();
            // a gap, not an absence: both members still occur in training
            let seen = |w: &str| {
                train
                    .iter()
                    .flat_map(|r| &r.references)
                    .any(|r| r.tokens.iter().any(|t| lex.lemma(t) == w))
            };
            if !seen(&pair.dependent) || !seen(&pair.noun) {
                orphaned.push(pair.to_string());
            }
        }
    }
    let (fast, time) = within(t, GAP_BUDGET);
    Outcome::new(
        leaks == 0 && heldout_refs > 0 && orphaned.is_empty() && fast,
        format!("{leaks} leaking train references over 4 sets ({heldout_refs} held-out references in the corpus), members missing from train: {orphaned:?}; {time}"),
    )
}

// ---- 3: gradients ----

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn captioner_batch(rng: &mut impl Rng, n: usize, vocab: usize, d: usize, regions: usize) -> TeacherBatch<f64> {
    let seqs = (0..n)
        .map(|_| {
            let mut s = vec![0];
            s.extend((0..rng.gen_range(2..5)).map(|_| rng.gen_range(3..vocab)));
            s.push(EOS);
            s
        })
        .collect();
    TeacherBatch {
        feats: random_matrix(n * regions, d, rng),
        regions,
        seqs,
    }
}

fn captioner_grad(backend: Backend, rng: &mut impl Rng) -> (f64, usize) {
    let cfg = ModelConfig {
        backend,
        embed_dim: 6,
        hidden_dim: 8,
        tf_layers: 2,
        tf_heads: 2,
        tf_width: 8,
        tf_ff: 12,
        max_positions: 16,
    };
    let mut store = ParamStore::<f64>::new();
    let m = Captioner::new(cfg, 9, 4, &mut store, rng).unwrap();
    let batch = captioner_batch(rng, 2, 9, 4, 3);
    let loss = |s: &ParamStore<f64>| {
        let mut g = Graph::new(s);
        let out = m.teacher_forward(&mut g, &batch)?;
        Ok(g.value(out.loss_sum).data()[0])
    };
    let grads = {
        let mut g = Graph::new(&store);
        let out = m.teacher_forward(&mut g, &batch).unwrap();
        g.backward(out.loss_sum).params
    };
    let rep = finite_diff_check(&mut store, loss, &grads, GRAD_TOL, None).unwrap();
    (rep.max_rel_err, rep.checked)
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut lines = Vec::new();
    let mut worst: f64 = 0.0;

    for backend in [Backend::Recurrent, Backend::Transformer] {
        let (e, n) = captioner_grad(backend, &mut rng);
        worst = worst.max(e);
        lines.push(format!("{backend} {e:.1e} ({n} elements)"));
    }

    let ranker_cfg = RankerConfig {
        embed_dim: 5,
        margin: 1.5,
        ..RankerConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let ranker = Ranker::new(&mut store, ranker_cfg, 6, 4, &mut rng).unwrap();
    let states = random_matrix(2 * 3, 6, &mut rng);
    let feats = random_matrix(2 * 3, 4, &mut rng);
    let probe = random_matrix(2, 5, &mut rng);

    // weight-mode pooling alone, through a fixed linear probe
    let pooled = |s: &ParamStore<f64>| -> capplan::Result<(f64, Gradients<f64>)> {
        let mut g = Graph::new(s);
        let x = g.input(states.clone());
        let e = ranker.sentence_embeddings(&mut g, x, 3, &[3, 2], Pooling::Weight)?;
        let p = g.input(probe.clone());
        let m = g.mul(e, p);
        let l = g.sum_all(m);
        Ok((g.value(l).data()[0], g.backward(l).params))
    };
    let (_, grads) = pooled(&store).unwrap();
    let rep = finite_diff_check(&mut store, |s| Ok(pooled(s)?.0), &grads, GRAD_TOL, None).unwrap();
    worst = worst.max(rep.max_rel_err);
    lines.push(format!("weight pooling {:.1e}", rep.max_rel_err));

    // the batch ranking loss on two image/sentence pairs
    let contrastive = |s: &ParamStore<f64>| -> capplan::Result<(f64, Gradients<f64>)> {
        let mut g = Graph::new(s);
        let f = g.input(feats.clone());
        let x = g.input(states.clone());
        let img = ranker.image_embeddings(&mut g, f, 2)?;
        let sent = ranker.sentence_embeddings(&mut g, x, 3, &[3, 3], Pooling::Weight)?;
        let l = ranker.batch_loss(&mut g, img, sent, &[0, 1]);
        Ok((g.value(l).data()[0], g.backward(l).params))
    };
    let (value, grads) = contrastive(&store).unwrap();
    let rep = finite_diff_check(&mut store, |s| Ok(contrastive(s)?.0), &grads, GRAD_TOL, None).unwrap();
    worst = worst.max(rep.max_rel_err);
    lines.push(format!("contrastive {:.1e} (loss {value:.3})", rep.max_rel_err));

    let (fast, time) = within(t, GRAD_BUDGET);
    Outcome::new(
        worst < GRAD_TOL && value > 0.0 && fast,
        format!("max rel err {worst:.1e} < {GRAD_TOL:.0e}: {}; {time}", lines.join(", ")),
    )
}

// ---- 4: oracles ----

/// Independent recall: a scene counts when any of its first `k` captions
/// realises the pair in the gold dependency annotation.
fn recall_oracle(scenes: &[Vec<&Reference>], pair: &ConceptPair, k: usize, lex: &Lexicon) -> f64 {
    let mut hits = 0;
    for caps in scenes {
        let mut found = false;
        for c in caps.iter().take(k) {
            if pair_occurs(c, pair, lex) {
                found = true;
            }
        }
        if found {
            hits += 1;
        }
    }
    hits as f64 / scenes.len() as f64
}

fn recall_instances(rng: &mut impl Rng, lex: &Lexicon, pool: &[&Reference], pairs: &[ConceptPair]) -> (usize, usize) {
    let (mut agree, mut hits) = (0, 0);
    for _ in 0..ORACLE_INSTANCES {
        let pair = &pairs[rng.gen_range(0..pairs.len())];
        let with: Vec<&&Reference> = pool.iter().filter(|r| pair_occurs(r, pair, lex)).collect();
        let scenes: Vec<Vec<&Reference>> = (0..rng.gen_range(1..12))
            .map(|_| {
                (0..rng.gen_range(1..7))
                    .map(|_| {
                        if !with.is_empty() && rng.gen_bool(0.2) {
                            **with.choose_one(rng)
                        } else {
                            pool[rng.gen_range(0..pool.len())]
                        }
                    })
                    .collect()
            })
            .collect();
        let gens: Vec<SceneGenerations> = scenes
            .iter()
            .enumerate()
            .map(|(i, caps)| SceneGenerations {
                scene: i as u64,
                captions: caps
                    .iter()
                    .map(|r| Generation::new(r.tokens.clone(), vec![], true, lex))
                    .collect(),
            })
            .collect();
        let k = rng.gen_range(1..8);
        let got = recall_at_k(&gens, pair, k, lex).unwrap();
        let want = recall_oracle(&scenes, pair, k, lex);
        if got == want {
            agree += 1;
        }
        if want > 0.0 {
            hits += 1;
        }
    }
    (agree, hits)
}

trait ChooseOne<T> {
    fn choose_one(&self, rng: &mut impl Rng) -> &T;
}

impl<T> ChooseOne<T> for Vec<T> {
    fn choose_one(&self, rng: &mut impl Rng) -> &T {
        &self[rng.gen_range(0..self.len())]
    }
}

fn hyp(rng: &mut impl Rng, len: usize, dim: usize) -> Hypothesis {
    Hypothesis {
        ids: (0..len).map(|_| rng.gen_range(3..50)).collect(),
        logprob: -rng.gen_range(0.0..12.0),
        finished: true,
        states: (0..len).map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect(),
    }
}

/// Brute-force re-ranking: score every candidate, then repeatedly take the
/// best remaining one (earliest on ties).
fn rerank_oracle(hyps: &[Hypothesis], sims: &[f64], lambda: f64, k: usize) -> Vec<(usize, f64)> {
    let scores: Vec<f64> = hyps
        .iter()
        .zip(sims)
        .map(|(h, s)| lambda * (h.logprob / h.ids.len().max(1) as f64) + (1.0 - lambda) * s)
        .collect();
    let mut taken = vec![false; hyps.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(hyps.len()) {
        let mut best: Option<usize> = None;
        for i in 0..hyps.len() {
            if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push((b, scores[b]));
    }
    out
}

fn rerank_instances(rng: &mut impl Rng) -> usize {
    let mut agree = 0;
    for inst in 0..ORACLE_INSTANCES {
        let n = rng.gen_range(1..12);
        let mut hyps: Vec<Hypothesis> = (0..n).map(|_| {
                let len = rng.gen_range(1..9);
                hyp(rng, len, 3)
            }).collect();
        let mut sims: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // exact ties must keep beam order
        if n > 2 && inst % 4 == 0 {
            hyps[1] = hyps[0].clone();
            sims[1] = sims[0];
        }
        let lambda = [0.0, 1.0, rng.gen_range(0.0..1.0)][inst % 3];
        let k = rng.gen_range(1..=n);
        let got = rerank_by(hyps.clone(), &sims, lambda, k);
        let want = rerank_oracle(&hyps, &sims, lambda, k);
        let same = got.len() == want.len()
            && got
                .iter()
                .zip(&want)
                .all(|((h, s), (i, ws))| *h == hyps[*i] && s == ws && *s == rerank_score(h.logprob, h.ids.len(), sims[*i], lambda));
        if same {
            agree += 1;
        }
    }
    agree
}

/// Full re-ranking through a ranker equals the oracle on explicit cosines.
fn rerank_with_ranker(rng: &mut impl Rng) -> bool {
    let mut store = ParamStore::<f64>::new();
    let cfg = RankerConfig {
        embed_dim: 4,
        rerank_lambda: 0.3,
        ..RankerConfig::default()
    };
    let ranker = Ranker::new(&mut store, cfg, 3, 5, rng).unwrap();
    let image = ranker.embed_image(&store, &random_matrix(4, 5, rng)).unwrap();
    let hyps: Vec<Hypothesis> = (0..8).map(|_| {
            let len = rng.gen_range(1..6);
            hyp(rng, len, 3)
        }).collect();
    let sims: Vec<f64> = hyps
        .iter()
        .map(|h| {
            let e = ranker.embed_hypothesis(&store, h).unwrap();
            let dot: f64 = e.iter().zip(&image).map(|(a, b)| a * b).sum();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (norm(&e) * norm(&image))
        })
        .collect();
    let got = rerank(hyps.clone(), &image, &ranker, &store, 5).unwrap();
    let want = rerank_oracle(&hyps, &sims, 0.3, 5);
    got.len() == 5
        && got
            .iter()
            .zip(&want)
            .all(|((h, s), (i, ws))| *h == hyps[*i] && (s - ws).abs() < 1e-9)
}

/// Every complete sequence (ends in eos, or reaches max_len), best first.
fn enumerate_sequences(m: &ToyModel, eos: usize, max_len: usize) -> Vec<(Vec<usize>, f64)> {
    let mut done = Vec::new();
    let mut stack: Vec<Vec<usize>> = vec![vec![]];
    while let Some(prefix) = stack.pop() {
        for v in 0..m.vocab {
            let mut s = prefix.clone();
            s.push(v);
            if v == eos || s.len() == max_len {
                let lp: f64 = (0..s.len()).map(|i| m.table[&s[..i]][s[i]]).sum();
                done.push((s, lp));
            } else {
                stack.push(s);
            }
        }
    }
    done.sort_by(|a, b| b.1.total_cmp(&a.1));
    done
}

fn beam_instances(rng: &mut impl Rng) -> usize {
    let mut agree = 0;
    for _ in 0..ORACLE_INSTANCES {
        let vocab = rng.gen_range(2..5);
        let depth = rng.gen_range(1..5);
        let m = ToyModel::random(vocab, depth, rng);
        let eos = rng.gen_range(0..vocab);
        let all = enumerate_sequences(&m, eos, depth);
        let top_k = rng.gen_range(1..=all.len().min(6));
        let cfg = BeamConfig {
            beam: all.len(),
            max_len: depth,
            top_k,
            length_normalize: false,
        };
        let got = beam_search(&m, None, 0, eos, &cfg).unwrap();
        let same = got.len() == top_k
            && got.iter().zip(&all).all(|(h, (s, lp))| {
                h.ids == *s && (h.logprob - lp).abs() < 1e-12 && h.finished == (s.last() == Some(&eos))
            });
        if same {
            agree += 1;
        }
    }
    agree
}

/// A hand-set table where the greedy first step leads to a worse sequence.
fn beam_beats_greedy() -> bool {
    let ln = f64::ln;
    let tiny = 1e-9f64.ln();
    let third = ln(1.0 / 3.0);
    let m = ToyModel::from_rows(
        3,
        vec![
            (vec![], vec![ln(0.6), ln(0.4), tiny]),
            (vec![0], vec![tiny, ln(0.5), ln(0.5)]),
            (vec![1], vec![tiny, tiny, ln(1.0 - 2e-9)]),
            (vec![0, 1], vec![third; 3]),
            (vec![0, 2], vec![third; 3]),
            (vec![1, 2], vec![third; 3]),
        ],
    );
    let cfg = |beam| BeamConfig {
        beam,
        max_len: 2,
        top_k: 1,
        length_normalize: false,
    };
    let greedy = beam_search(&m, None, 0, 2, &cfg(1)).unwrap();
    let wide = beam_search(&m, None, 0, 2, &cfg(2)).unwrap();
    // greedy: 0 then 0.5 → 0.3; beam: 1, 2 → 0.4
    greedy[0].ids[0] == 0 && wide[0].ids == vec![1, 2] && (wide[0].logprob - ln(0.4)).abs() < 1e-6
}

fn oracle_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let lex = Lexicon::default();
    let data = corpus(400, 404);
    let pool: Vec<&Reference> = data.iter().flat_map(|r| &r.references).collect();
    let pairs: Vec<ConceptPair> = DEFAULT_HELDOUT
        .iter()
        .flatten()
        .map(|p| ConceptPair::parse(p, &lex).unwrap())
        .collect();
    let (recall_ok, nonzero) = recall_instances(&mut rng, &lex, &pool, &pairs);
    let rerank_ok = rerank_instances(&mut rng);
    let ranker_ok = rerank_with_ranker(&mut rng);
    let beam_ok = beam_instances(&mut rng);
    let hand = beam_beats_greedy();
    let (fast, time) = within(t, ORACLE_BUDGET);
    let n = ORACLE_INSTANCES;
    Outcome::new(
        recall_ok == n && nonzero > n / 10 && rerank_ok == n && ranker_ok && beam_ok == n && hand && fast,
        format!(
            "recall {recall_ok}/{n} ({nonzero} with hits), rerank {rerank_ok}/{n} (+ranker {ranker_ok}), beam {beam_ok}/{n} (+hand-set {hand}); {time}"
        ),
    )
}

// ---- 5, 6, 8: the planning matrix ----

/// The shared protocol: a 3,000-scene world, recurrent backend, five seeds,
/// two held-out sets; standard vs interleave with pos and idle tags.
fn matrix_config(dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
name = "acceptance-planning"
scenes = 3000
active_sets = [0, 1]
seeds = [1, 2, 3, 4, 5]
approaches = ["standard", "interleave"]
tagsets = ["pos", "idle"]
retrieval_gallery = 0
output_dir = "{}"

[model]
backend = "recurrent"
embed_dim = 32
hidden_dim = 64

[train]
batch_size = 32
max_epochs = 25
patience = 5
refs_per_scene = 1
val_scenes = 100

[train.adam]
lr = 0.01

[decode]
beam = 20
top_k = 5
"#,
        dir.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

struct Matrix {
    report: Report,
    elapsed: Duration,
    failed: usize,
}

fn run_matrix(root: &Path) -> Matrix {
    let t = Instant::now();
    let cfg = matrix_config(&root.join("planning"));
    let manifest = run_experiment(&cfg).unwrap();
    let failed = manifest.cells.values().filter(|c| c.metrics.is_none()).count();
    let report = emit_report(&[cfg.output_dir.clone()], &root.join("planning-report")).unwrap();
    Matrix {
        report,
        elapsed: t.elapsed(),
        failed,
    }
}

fn fmt_stat(s: &capplan::harness::Stat) -> String {
    match s.ci95 {
        Some((lo, hi)) => format!("{:+.2} [{lo:+.2}, {hi:+.2}] (n={})", s.mean, s.n),
        None => format!("{:+.2} (n={})", s.mean, s.n),
    }
}

fn pos_gain(m: &Matrix) -> Outcome {
    let Some(g) = m.report.gain(Approach::Interleave, TagSet::Pos).and_then(|g| g.metrics.get("R@5")) else {
        return Outcome::new(false, "no paired R@5 gain for interleave+pos");
    };
    let lo = g.ci95.map_or(f64::NEG_INFINITY, |c| c.0);
    let fast = m.elapsed <= MATRIX_BUDGET;
    Outcome::new(
        g.mean > 0.0 && lo > GAIN_CI_FLOOR && g.n >= 10 && m.failed == 0 && fast,
        format!(
            "R@5 gain interleave+pos - standard = {} points; gate mean > 0, CI low > {GAIN_CI_FLOOR}; expected >= +{GAIN_EXPECTED}: {}; {} failed cells; {:.1} min / {} min",
            fmt_stat(g),
            if g.mean >= GAIN_EXPECTED { "met" } else { "not met" },
            m.failed,
            m.elapsed.as_secs_f64() / 60.0,
            MATRIX_BUDGET.as_secs() / 60
        ),
    )
}

fn idle_noninferior(m: &Matrix) -> Outcome {
    let r5 = |a, t| m.report.row(a, t).and_then(|r| r.metrics.get("R@5")).map(|s| s.mean);
    match (r5(Approach::Interleave, TagSet::Idle), r5(Approach::Standard, TagSet::None)) {
        (Some(idle), Some(std)) => Outcome::new(
            idle >= std - IDLE_MARGIN,
            format!("R@5 interleave+idle {idle:.2} vs standard {std:.2} - {IDLE_MARGIN} points"),
        ),
        _ => Outcome::new(false, "missing interleave+idle or standard rows"),
    }
}

fn tag_validity(m: &Matrix) -> Outcome {
    let get = |t: TagSet, k: &str| {
        m.report
            .row(Approach::Interleave, t)
            .and_then(|r| r.metrics.get(k))
            .map(|s| s.mean)
    };
    let wf_pos = get(TagSet::Pos, "wellformed").unwrap_or(0.0);
    let wf_idle = get(TagSet::Idle, "wellformed").unwrap_or(0.0);
    let acc = get(TagSet::Pos, "tag_acc").unwrap_or(0.0);
    Outcome::new(
        wf_pos >= WELLFORMED_MIN && wf_idle >= WELLFORMED_MIN && acc >= TAG_ACC_MIN,
        format!(
            "wellformed pos {wf_pos:.2}% idle {wf_idle:.2}% (>= {WELLFORMED_MIN}), pos tag accuracy {acc:.2}% (>= {TAG_ACC_MIN})"
        ),
    )
}

// ---- 7: pooling ----

fn pooling_config(dir: &Path, pooling: Pooling) -> ExperimentConfig {
    let text = format!(
        r#"
name = "acceptance-pooling"
scenes = 2500
heldout_sets = []
seeds = [1, 2, 3, 4, 5]
approaches = ["standard"]
tagsets = []
eval_limit = 20
retrieval_gallery = {GALLERY}
output_dir = "{}"

[model]
backend = "recurrent"
embed_dim = 32
hidden_dim = 64

[ranker]
pooling = "{}"
embed_dim = 64

[train]
batch_size = 32
max_epochs = 15
patience = 3
refs_per_scene = 1
val_scenes = 100

[train.adam]
lr = 0.01

[decode]
beam = 5
top_k = 5
"#,
        dir.display(),
        pooling.name()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn pooling_suite(root: &Path) -> Outcome {
    let mut means = Vec::new();
    let mut gallery = 0;
    let mut seeds = 0;
    for pooling in [Pooling::Weight, Pooling::Final] {
        let cfg = pooling_config(&root.join(format!("pooling-{}", pooling.name())), pooling);
        run_experiment(&cfg).unwrap();
        let rep = emit_report(&[cfg.output_dir.clone()], &root.join(format!("pooling-{}-report", pooling.name()))).unwrap();
        let s = rep.rows[0].metrics.get("textR@1").cloned();
        seeds = rep.rows[0].cells;
        gallery = cfg.retrieval_gallery;
        means.push(s);
    }
    match (&means[0], &means[1]) {
        (Some(w), Some(f)) => Outcome::new(
            w.mean >= f.mean && seeds >= POOLING_SEEDS && gallery == GALLERY,
            format!(
                "text R@1 weight {:.2} vs final {:.2} over {seeds} seeds, {gallery}-scene gallery",
                w.mean, f.mean
            ),
        ),
        _ => Outcome::new(false, "retrieval metrics missing"),
    }
}

// ---- 9: metric sanity ----

fn ttr_oracle(captions: &[Vec<String>], n: usize) -> f64 {
    let mut stream = Vec::new();
    for c in captions {
        stream.extend(c.iter().cloned());
    }
    let mut ratios = Vec::new();
    let mut start = 0;
    while start < stream.len() {
        let end = (start + TTR_SEGMENT).min(stream.len());
        let full = end - start == TTR_SEGMENT;
        if full || start == 0 && end == stream.len() {
            let seg = &stream[start..end];
            if seg.len() >= n {
                let mut seen = HashSet::new();
                let mut total = 0;
                for i in 0..=seg.len() - n {
                    seen.insert(seg[i..i + n].join("\u{1}"));
                    total += 1;
                }
                ratios.push(seen.len() as f64 / total as f64);
            }
        }
        start = end;
    }
    if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    }
}

fn metric_suite() -> Outcome {
    let t = Instant::now();
    let lex = Lexicon::default();
    let data = corpus(300, 909);
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut fails = Vec::new();

    // BLEU of a corpus against itself
    let cands: Vec<Vec<String>> = data.iter().map(|r| r.references[0].tokens.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = cands.iter().map(|c| vec![c.clone()]).collect();
    let b = bleu(&cands, &refs, 4).unwrap();
    if (b - 100.0).abs() > 1e-9 {
        fails.push(format!("BLEU(self) = {b}"));
    }

    // recall is monotone in K
    let pool: Vec<&Reference> = data.iter().flat_map(|r| &r.references).collect();
    let pairs: Vec<ConceptPair> = DEFAULT_HELDOUT
        .iter()
        .flatten()
        .map(|p| ConceptPair::parse(p, &lex).unwrap())
        .collect();
    for _ in 0..100 {
        let gens: Vec<SceneGenerations> = (0..rng.gen_range(1..10))
            .map(|i| SceneGenerations {
                scene: i,
                captions: (0..5)
                    .map(|_| {
                        let r = pool[rng.gen_range(0..pool.len())];
                        Generation::new(r.tokens.clone(), vec![], true, &lex)
                    })
                    .collect(),
            })
            .collect();
        let pair = &pairs[rng.gen_range(0..pairs.len())];
        let rs: Vec<f64> = (1..=5).map(|k| recall_at_k(&gens, pair, k, &lex).unwrap()).collect();
        if rs.windows(2).any(|w| w[1] < w[0]) {
            fails.push(format!("recall not monotone: {rs:?}"));
        }
    }

    // diversity against a direct recomputation
    let train: Vec<Vec<String>> = data[..200].iter().flat_map(|r| r.references.iter().map(|x| x.tokens.clone())).collect();
    let scenes = &data[200..];
    let captions: Vec<Vec<String>> = scenes
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if i % 3 == 0 {
                train[i].clone()
            } else {
                r.references[i % 5].tokens.clone()
            }
        })
        .collect();
    let references: Vec<&[Reference]> = scenes.iter().map(|r| r.references.as_slice()).collect();
    let got = diversity_metrics(&captions, &train, &references, &lex).unwrap();

    let tokens: usize = captions.iter().map(Vec::len).sum();
    let asl = tokens as f64 / captions.len() as f64;
    let mut gen_types = HashSet::new();
    for c in &captions {
        for w in c {
            gen_types.insert(w.as_str());
        }
    }
    let train_set: HashSet<String> = train.iter().map(|c| c.join(" ")).collect();
    let novel = 100.0 * captions.iter().filter(|c| !train_set.contains(&c.join(" "))).count() as f64 / captions.len() as f64;
    let train_types: HashSet<&str> = train.iter().flatten().map(String::as_str).collect();
    let coverage = 100.0 * gen_types.iter().filter(|w| train_types.contains(*w)).count() as f64 / train_types.len() as f64;
    let content = |tag: &str| tag == "NOUN" || tag == "VERB" || tag == "ADJ";
    let mut local = Vec::new();
    for (cap, refs) in captions.iter().zip(&references) {
        let mut want = HashSet::new();
        for r in refs.iter() {
            for (w, tag) in r.tokens.iter().zip(&r.tags.pos) {
                if content(tag) {
                    want.insert(w.clone());
                }
            }
        }
        if want.is_empty() {
            continue;
        }
        let tags = oracle_tags(cap, &lex);
        let have: HashSet<&String> = cap.iter().zip(&tags.pos).filter(|(_, t)| content(t)).map(|(w, _)| w).collect();
        local.push(100.0 * want.iter().filter(|w| have.contains(w)).count() as f64 / want.len() as f64);
    }
    let local5 = local.iter().sum::<f64>() / local.len() as f64;
    let want = (
        asl,
        gen_types.len(),
        ttr_oracle(&captions, 1),
        ttr_oracle(&captions, 2),
        novel,
        coverage,
        local5,
    );
    let have = (got.asl, got.types, got.ttr1, got.ttr2, got.novel, got.coverage, got.local5);
    if want != have {
        fails.push(format!("diversity {have:?} != oracle {want:?}"));
    }
    if novel == 0.0 || novel == 100.0 {
        fails.push(format!("degenerate novelty fixture ({novel})"));
    }

    let (fast, time) = within(t, METRIC_BUDGET);
    Outcome::new(
        fails.is_empty() && fast,
        format!("BLEU(self) {b:.6}, 100 recall curves, diversity exact: {fails:?}; {time}"),
    )
}

// ---- 10: determinism ----

fn determinism_config(dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
scenes = 400
active_sets = [0]
seeds = [1, 2]
approaches = ["standard", "interleave"]
tagsets = ["pos"]
eval_limit = 40
retrieval_gallery = 40
output_dir = "{}"

[model]
embed_dim = 16
hidden_dim = 24

[ranker]
embed_dim = 16

[train]
max_epochs = 3
refs_per_scene = 2
val_scenes = 30

[decode]
beam = 5
top_k = 5
rerank = true
"#,
        dir.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism_suite(root: &Path) -> Outcome {
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let cfg = determinism_config(&root.join(format!("det-{run}")));
        run_experiment(&cfg).unwrap();
        let out = root.join(format!("det-{run}-report"));
        emit_report(&[cfg.output_dir.clone()], &out).unwrap();
        dirs.push((cfg.output_dir, out));
    }
    let mut compared = 0;
    let mut differ = Vec::new();
    for (a, b) in [(&dirs[0].1, &dirs[1].1), (&dirs[0].0, &dirs[1].0)] {
        for f in files_under(a) {
            // the manifest records wall-clock timings
            if f.file_name().is_some_and(|n| n == "manifest.json") {
                continue;
            }
            compared += 1;
            if std::fs::read(a.join(&f)).ok() != std::fs::read(b.join(&f)).ok() {
                differ.push(f.display().to_string());
            }
        }
    }
    Outcome::new(
        differ.is_empty() && compared > 10,
        format!("{compared} report, metrics, decode, checkpoint and data files compared; differing: {differ:?}"),
    )
}

// ---- driver ----

fn main() {
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |n: usize| args.is_empty() || args.iter().any(|a| a == &n.to_string());
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        println!("criterion {n:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    run(1, "codec", &mut codec_suite);
    run(2, "paradigmatic gap", &mut gap_suite);
    run(3, "gradients", &mut gradient_suite);
    run(4, "oracles", &mut oracle_suite);
    let matrix = if [5, 6, 8].iter().any(|&n| wanted(n)) {
        catch_unwind(AssertUnwindSafe(|| run_matrix(root))).ok()
    } else {
        None
    };
    let missing = || Outcome::new(false, "planning matrix did not complete");
    run(5, "pos gain", &mut || matrix.as_ref().map_or_else(missing, pos_gain));
    run(6, "idle control", &mut || matrix.as_ref().map_or_else(missing, idle_noninferior));
    run(7, "weight pooling", &mut || pooling_suite(root));
    run(8, "tag validity", &mut || matrix.as_ref().map_or_else(missing, tag_validity));
    run(9, "metric sanity", &mut metric_suite);
    run(10, "determinism", &mut || determinism_suite(root));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed {failed:?}",
        results.len() - failed.len(),
        failed.len()
    );
    // exit() skips destructors
    drop(tmp);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
