use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use capplan::captioner::Hypothesis;
use capplan::eval::{bleu, segmented_ttr};
use capplan::harness::Stat;
use capplan::numerics::{ParamStore, Tensor};
use capplan::planner::{build_vocabulary, encode, parse_generated, reference_tags, strip, Approach, TagSet};
use capplan::ranker::{rerank_by, rerank_score, retrieval_recall, Pooling, Ranker, RankerConfig};
use capplan::world::{generate_corpus, CorpusRecord, Lexicon, WorldConfig};

fn corpus() -> &'static [CorpusRecord] {
    use std::sync::OnceLock;
    static C: OnceLock<Vec<CorpusRecord>> = OnceLock::new();
    C.get_or_init(|| generate_corpus(60, 11, &WorldConfig::default(), &Lexicon::default()).unwrap())
}

const APPROACHES: [Approach; 4] = [
    Approach::Standard,
    Approach::Sequential,
    Approach::Interleave,
    Approach::Multitask,
];
const TAGSETS: [TagSet; 5] = [TagSet::Pos, TagSet::Dep, TagSet::Chunk, TagSet::Ccg, TagSet::Idle];

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_stream_strips_back_to_the_caption(scene in 0usize..60, r in 0usize..5, a in 0usize..4, t in 0usize..5) {
        let c = corpus();
        let vocab = build_vocabulary(c.iter().flat_map(|x| &x.references), &TAGSETS).unwrap();
        let reference = &c[scene].references[r % c[scene].references.len()];
        let (approach, tagset) = (APPROACHES[a], TAGSETS[t]);
        let tags = reference_tags(reference, tagset);
        let seqs = encode(&reference.tokens, tags.as_deref(), approach, tagset, &vocab).unwrap();
        let n = reference.tokens.len();
        for s in &seqs {
            let p = parse_generated(&s.ids, s.kind, &vocab);
            prop_assert!(p.wellformed);
            if s.kind.has_words() {
                prop_assert_eq!(&strip(&s.ids, &vocab), &reference.tokens);
            }
            let body = s.ids.len() - 2;
            let expect = match approach {
                Approach::Standard | Approach::Multitask => n,
                Approach::Sequential | Approach::Interleave => 2 * n,
            };
            prop_assert_eq!(body, expect);
        }
    }

    #[test]
    fn bleu_is_bounded_and_perfect_on_itself(
        caps in prop::collection::vec(prop::collection::vec(0u8..12, 1..12), 1..20),
        other in prop::collection::vec(prop::collection::vec(0u8..12, 1..12), 1..20),
    ) {
        let words = |v: &Vec<Vec<u8>>| -> Vec<Vec<String>> {
            v.iter().map(|s| s.iter().map(|w| format!("w{w}")).collect()).collect()
        };
        let c = words(&caps);
        let self_refs: Vec<Vec<Vec<String>>> = c.iter().map(|x| vec![x.clone()]).collect();
        prop_assert!((bleu(&c, &self_refs, 4).unwrap() - 100.0).abs() < 1e-9);
        let o = words(&other);
        let refs: Vec<Vec<Vec<String>>> = (0..c.len()).map(|i| vec![o[i % o.len()].clone()]).collect();
        let b = bleu(&c, &refs, 4).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
    }

    #[test]
    fn ttr_is_a_ratio(caps in prop::collection::vec(prop::collection::vec(0u8..30, 0..15), 0..40), n in 1usize..3) {
        let c: Vec<Vec<String>> = caps.iter().map(|s| s.iter().map(|w| w.to_string()).collect()).collect();
        let t = segmented_ttr(&c, n);
        prop_assert!((0.0..=1.0).contains(&t));
    }

    #[test]
    fn retrieval_recall_grows_with_k(
        imgs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..8),
        sents in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 4), 0usize..8), 1..16),
    ) {
        let owner: Vec<usize> = sents.iter().map(|(_, o)| o % imgs.len()).collect();
        let s: Vec<Vec<f64>> = sents.into_iter().map(|(v, _)| v).collect();
        let ks: Vec<usize> = (1..=s.len().max(imgs.len())).collect();
        let recs = retrieval_recall(&imgs, &s, &owner, &ks).unwrap();
        for dir in [capplan::ranker::Direction::Text, capplan::ranker::Direction::Image] {
            let r: Vec<f64> = recs.iter().filter(|x| x.direction == dir).map(|x| x.recall).collect();
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(r.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        // every sentence finds its image once K covers the gallery
        let full = recs.iter().find(|x| x.direction == capplan::ranker::Direction::Image && x.k >= imgs.len()).unwrap();
        prop_assert_eq!(full.recall, 1.0);
    }

    #[test]
    fn rerank_keeps_the_best_scores_in_order(
        cands in prop::collection::vec((1usize..10, -20.0f64..0.0, -1.0f64..1.0), 1..25),
        lambda in 0.0f64..=1.0,
        top_k in 1usize..10,
    ) {
        let hyps: Vec<Hypothesis> = cands.iter().map(|&(len, lp, _)| Hypothesis {
            ids: vec![7; len],
            logprob: lp,
            finished: true,
            states: vec![],
        }).collect();
        let sims: Vec<f64> = cands.iter().map(|c| c.2).collect();
        let out = rerank_by(hyps, &sims, lambda, top_k);
        prop_assert_eq!(out.len(), top_k.min(cands.len()));
        prop_assert!(out.windows(2).all(|w| w[0].1 >= w[1].1));
        let mut all: Vec<f64> = cands.iter().map(|&(len, lp, s)| rerank_score(lp, len, s, lambda)).collect();
        all.sort_by(|a, b| b.total_cmp(a));
        for (got, want) in out.iter().zip(&all) {
            prop_assert_eq!(got.1, *want);
        }
    }

    #[test]
    fn pooling_modes_agree_on_one_step(state in prop::collection::vec(-1.0f64..1.0, 6), seed in 0u64..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let cfg = RankerConfig { embed_dim: 5, ..RankerConfig::default() };
        let ranker = Ranker::new(&mut store, cfg, 6, 3, &mut rng).unwrap();
        let s = Tensor::matrix(1, 6, state);
        let base = ranker.embed_sentence(&store, &s, Pooling::Final).unwrap();
        for mode in [Pooling::Mean, Pooling::Weight] {
            let e = ranker.embed_sentence(&store, &s, mode).unwrap();
            for (a, b) in base.iter().zip(&e) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
        let w = ranker.pooling_weights(&store, &s);
        prop_assert!((w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sentence_embeddings_are_unit_length(rows in 1usize..6, seed in 0u64..50, m in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let ranker = Ranker::new(&mut store, RankerConfig::default(), 4, 3, &mut rng).unwrap();
        let data = unit((0..rows * 4).map(|i| ((i as f64 + seed as f64) * 0.37).sin()).collect());
        let e = ranker.embed_sentence(&store, &Tensor::matrix(rows, 4, data), Pooling::ALL[m]).unwrap();
        let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn stat_interval_brackets_the_mean(xs in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let s = Stat::of(&xs).unwrap();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.mean >= lo - 1e-9 && s.mean <= hi + 1e-9);
        prop_assert_eq!(s.n, xs.len());
        if let Some((a, b)) = s.ci95 {
            prop_assert!(a <= s.mean + 1e-9 && s.mean <= b + 1e-9);
            prop_assert!(((a + b) / 2.0 - s.mean).abs() < 1e-6);
        } else {
            prop_assert_eq!(xs.len(), 1);
        }
    }
}
