//! Synthetic scenes, grammar-rendered captions with gold annotation, and
//! region-style feature matrices standing in for image features.

pub mod grammar;
pub mod lexicon;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use grammar::{
    annotate, is_tree, oracle_tags, parse, rule_arcs, Adjunct, Clause, DepArc, Link, NounPhrase,
    Sentence, TagKind, Tags, VerbPhrase,
};
pub use lexicon::{Animacy, Lexicon, Transitivity, Verb, WordClass};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub verb: String,
    /// Index of the scene entity acted upon (transitive verbs only).
    pub object: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub category: String,
    pub animacy: Animacy,
    pub color: Option<String>,
    pub size: Option<String>,
    pub action: Option<Action>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub rng_seed: u64,
    pub entities: Vec<Entity>,
}

impl Scene {
    /// Check the entity invariants against a lexicon.
    pub fn validate(&self, lex: &Lexicon, max_entities: usize) -> Result<()> {
        if self.entities.is_empty() || self.entities.len() > max_entities {
            return Err(Error::Data(format!(
                "scene {} has {} entities",
                self.id,
                self.entities.len()
            )));
        }
        for (i, e) in self.entities.iter().enumerate() {
            if lex.animacy(&e.category) != Some(e.animacy) {
                return Err(Error::Data(format!("scene {}: bad category {}", self.id, e.category)));
            }
            if let Some(a) = &e.action {
                let verb = lex
                    .verb(&a.verb)
                    .ok_or_else(|| Error::Data(format!("unknown verb {}", a.verb)))?;
                let ok = e.animacy == Animacy::Animate
                    && match (verb.transitivity, a.object) {
                        (Transitivity::Transitive, Some(o)) => o != i && o < self.entities.len(),
                        (Transitivity::Intransitive, None) => true,
                        _ => false,
                    };
                if !ok {
                    return Err(Error::Data(format!("scene {}: bad action on entity {i}", self.id)));
                }
            }
        }
        Ok(())
    }
}

/// A rendered caption with its gold annotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub tokens: Vec<String>,
    pub tags: Tags,
    pub dep_arcs: Vec<DepArc>,
    pub source_template: String,
}

impl Reference {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub max_entities: usize,
    pub p_color: f64,
    pub p_size: f64,
    /// Probability that an animate entity performs an action.
    pub p_action: f64,
    pub mention_color: f64,
    pub mention_size: f64,
    pub mention_action: f64,
    /// Probability of the copular shape when the subject's colour is
    /// mentioned and its action is not.
    pub p_copular: f64,
    /// Weights of participial / relative / finite shapes for mentioned actions.
    pub clause_weights: [f64; 3],
    /// Probability that a further entity is coordinated rather than attached
    /// with a preposition (when the clause allows it).
    pub p_and: f64,
    pub n_refs: usize,
    pub regions: usize,
    pub noise_sigma: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            max_entities: 3,
            p_color: 0.7,
            p_size: 0.5,
            p_action: 0.7,
            mention_color: 0.8,
            mention_size: 0.8,
            mention_action: 0.8,
            p_copular: 0.2,
            clause_weights: [0.6, 0.2, 0.2],
            p_and: 0.3,
            n_refs: 5,
            regions: 6,
            noise_sigma: 0.1,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_color", self.p_color),
            ("p_size", self.p_size),
            ("p_action", self.p_action),
            ("mention_color", self.mention_color),
            ("mention_size", self.mention_size),
            ("mention_action", self.mention_action),
            ("p_copular", self.p_copular),
            ("p_and", self.p_and),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.clause_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.clause_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("clause_weights must be non-negative, not all zero".into()));
        }
        if self.max_entities == 0 || self.max_entities > self.regions {
            return Err(Error::Config(format!(
                "max_entities {} must be in 1..={}",
                self.max_entities, self.regions
            )));
        }
        if self.n_refs == 0 {
            return Err(Error::Config("n_refs must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Sample a scene. The same generator state and config give the same scene.
pub fn generate_scene(
    rng: &mut impl Rng,
    lex: &Lexicon,
    config: &WorldConfig,
    id: u64,
    rng_seed: u64,
) -> Result<Scene> {
    config.validate()?;
    lex.validate()?;
    let n = rng.gen_range(1..=config.max_entities);
    let mut entities: Vec<Entity> = (0..n)
        .map(|_| {
            let (category, animacy) = lex.nouns.choose(rng).expect("nouns").clone();
            let color = rng
                .gen_bool(config.p_color)
                .then(|| lex.colors.choose(rng).expect("colors").clone());
            let size = rng
                .gen_bool(config.p_size)
                .then(|| lex.sizes.choose(rng).expect("sizes").clone());
            Entity {
                category,
                animacy,
                color,
                size,
                action: None,
            }
        })
        .collect();
    let intransitive: Vec<&Verb> = lex
        .verbs
        .iter()
        .filter(|v| v.transitivity == Transitivity::Intransitive)
        .collect();
    for i in 0..n {
        if entities[i].animacy != Animacy::Animate || !rng.gen_bool(config.p_action) {
            continue;
        }
        let verb = lex.verbs.choose(rng).expect("verbs");
        let action = if verb.transitivity == Transitivity::Transitive {
            // objects never act transitively themselves and are targeted once
            let targeted: Vec<usize> = entities
                .iter()
                .filter_map(|e| e.action.as_ref().and_then(|a| a.object))
                .collect();
            let candidates: Vec<usize> = (0..n)
                .filter(|&j| {
                    j != i
                        && !targeted.contains(&j)
                        && entities[j].action.as_ref().map_or(true, |a| a.object.is_none())
                        && !entities.iter().any(|e| {
                            e.action.as_ref().and_then(|a| a.object) == Some(i)
                        })
                })
                .collect();
            match candidates.choose(rng) {
                Some(&j) => Action {
                    verb: verb.lemma.clone(),
                    object: Some(j),
                },
                None => Action {
                    verb: intransitive.choose(rng).expect("intransitive verbs").lemma.clone(),
                    object: None,
                },
            }
        } else {
            Action {
                verb: verb.lemma.clone(),
                object: None,
            }
        };
        entities[i].action = Some(action);
    }
    let scene = Scene {
        id,
        rng_seed,
        entities,
    };
    debug_assert!(scene.validate(lex, config.max_entities).is_ok());
    Ok(scene)
}

struct Mention {
    color: bool,
    size: bool,
    action: bool,
}

fn noun_phrase(e: &Entity, m: &Mention, with_color: bool) -> NounPhrase {
    NounPhrase {
        size: e.size.clone().filter(|_| m.size),
        color: e.color.clone().filter(|_| m.color && with_color),
        noun: e.category.clone(),
    }
}

fn verb_phrase(scene: &Scene, i: usize, mentions: &[Mention]) -> Option<VerbPhrase> {
    let e = &scene.entities[i];
    let a = e.action.as_ref().filter(|_| mentions[i].action)?;
    Some(VerbPhrase {
        verb: a.verb.clone(),
        object: a
            .object
            .map(|o| noun_phrase(&scene.entities[o], &mentions[o], true)),
    })
}

/// Plan one caption for a scene.
pub fn plan_sentence(scene: &Scene, rng: &mut impl Rng, config: &WorldConfig, lex: &Lexicon) -> Sentence {
    let mentions: Vec<Mention> = scene
        .entities
        .iter()
        .map(|e| Mention {
            color: e.color.is_some() && rng.gen_bool(config.mention_color),
            size: e.size.is_some() && rng.gen_bool(config.mention_size),
            action: e.action.is_some() && rng.gen_bool(config.mention_action),
        })
        .collect();
    let consumed: Vec<usize> = scene
        .entities
        .iter()
        .enumerate()
        .filter(|(i, _)| mentions[*i].action)
        .filter_map(|(_, e)| e.action.as_ref().and_then(|a| a.object))
        .collect();
    let mut free: Vec<usize> = (0..scene.entities.len())
        .filter(|i| !consumed.contains(i))
        .collect();
    free.shuffle(rng);
    let subj = free[0];
    let e = &scene.entities[subj];
    let m = &mentions[subj];
    let clause = match verb_phrase(scene, subj, &mentions) {
        Some(vp) => {
            let w = config.clause_weights;
            let r = rng.gen::<f64>() * w.iter().sum::<f64>();
            if r < w[0] {
                Clause::Participial(vp)
            } else if r < w[0] + w[1] {
                Clause::Relative(vp)
            } else {
                Clause::Finite(vp)
            }
        }
        None if m.color && rng.gen_bool(config.p_copular) => {
            Clause::Copular(e.color.clone().expect("mentioned colour"))
        }
        None => Clause::Bare,
    };
    let subject = noun_phrase(e, m, !matches!(clause, Clause::Copular(_)));
    let allows_and = matches!(clause, Clause::Bare | Clause::Participial(_));
    let adjuncts = free[1..]
        .iter()
        .map(|&j| {
            let link = if allows_and && rng.gen_bool(config.p_and) {
                Link::And
            } else {
                Link::Prep(lex.prepositions.choose(rng).expect("prepositions").clone())
            };
            Adjunct {
                link,
                np: noun_phrase(&scene.entities[j], &mentions[j], true),
                participle: verb_phrase(scene, j, &mentions),
            }
        })
        .collect();
    Sentence {
        subject,
        clause,
        adjuncts,
    }
}

/// Render `n_refs` annotated captions of a scene.
pub fn render_references(
    scene: &Scene,
    rng: &mut impl Rng,
    n_refs: usize,
    config: &WorldConfig,
    lex: &Lexicon,
) -> Result<Vec<Reference>> {
    if n_refs == 0 {
        return Err(Error::Config("n_refs must be at least 1".into()));
    }
    scene.validate(lex, usize::MAX)?;
    Ok((0..n_refs)
        .map(|_| {
            let s = plan_sentence(scene, rng, config, lex);
            let a = annotate(&s, lex);
            Reference {
                tokens: a.tokens,
                tags: a.tags,
                dep_arcs: a.arcs,
                source_template: s.template_id(),
            }
        })
        .collect())
}

/// `[R, d]` region features: one noisy one-hot row per entity, zero padding.
pub fn scene_features(
    scene: &Scene,
    config: &WorldConfig,
    lex: &Lexicon,
    rng: &mut impl Rng,
) -> Result<Tensor<f64>> {
    let d = lex.feature_width();
    let r = config.regions;
    if scene.entities.len() > r {
        return Err(Error::Shape(format!(
            "{} entities but only {r} regions",
            scene.entities.len()
        )));
    }
    let mut t = Tensor::zeros(&[r, d]);
    let (nc, cc, sc) = (lex.nouns.len(), lex.colors.len(), lex.sizes.len());
    for (i, e) in scene.entities.iter().enumerate() {
        let row = t.row_mut(i);
        let missing = |w: &str| Error::Data(format!("{w} not in lexicon"));
        row[lex.noun_index(&e.category).ok_or_else(|| missing(&e.category))?] = 1.0;
        if let Some(c) = &e.color {
            row[nc + lex.color_index(c).ok_or_else(|| missing(c))?] = 1.0;
        }
        if let Some(s) = &e.size {
            row[nc + cc + lex.size_index(s).ok_or_else(|| missing(s))?] = 1.0;
        }
        if let Some(a) = &e.action {
            row[nc + cc + sc + lex.verb_index(&a.verb).ok_or_else(|| missing(&a.verb))?] = 1.0;
        }
    }
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma)
            .map_err(|e| Error::Config(format!("noise: {e}")))?;
        for v in t.data_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(t)
}

/// A scene with its captions and features, as stored in the corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub scene: Scene,
    pub references: Vec<Reference>,
    pub feature_rows: usize,
    pub feature_cols: usize,
    /// Row-major feature matrix.
    pub features: Vec<f64>,
}

impl CorpusRecord {
    pub fn features(&self) -> Tensor<f64> {
        Tensor::matrix(self.feature_rows, self.feature_cols, self.features.clone())
    }
}

/// Per-scene seed derived from the world seed, independent of other scenes.
pub fn scene_seed(world_seed: u64, id: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(world_seed);
    rng.set_stream(id);
    rng.gen()
}

/// Generate `n` scenes with references and features.
pub fn generate_corpus(
    n: usize,
    world_seed: u64,
    config: &WorldConfig,
    lex: &Lexicon,
) -> Result<Vec<CorpusRecord>> {
    config.validate()?;
    lex.validate()?;
    (0..n as u64)
        .map(|id| {
            let seed = scene_seed(world_seed, id);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = generate_scene(&mut rng, lex, config, id, seed)?;
            let references = render_references(&scene, &mut rng, config.n_refs, config, lex)?;
            let f = scene_features(&scene, config, lex, &mut rng)?;
            Ok(CorpusRecord {
                scene,
                references,
                feature_rows: f.rows(),
                feature_cols: f.cols(),
                features: f.into_data(),
            })
        })
        .collect()
}

pub fn write_corpus(path: &Path, corpus: &[CorpusRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for rec in corpus {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
