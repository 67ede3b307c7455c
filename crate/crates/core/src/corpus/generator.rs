//! Synthetic corpus with a hidden entity type and a knowledge graph.
//!
//! Every entity belongs to one of `num_categories` types. Names are sequences
//! of syllable tokens drawn independently of the type, so the type of an
//! entity can only be learned from its own occurrences or read off its facts.
//! Same-type entities are joined by relation `P0`; other relations are noise.
//!
//! QA contexts list a few entities of distinct types and ask for the one of a
//! given type. Tagging contexts tag each name with its type. Test contexts in
//! the unseen regime mention entities that never occur in training but have
//! `P0` facts to entities that do.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Zipf;
use serde::{Deserialize, Serialize};

use super::example::TaskKind;
use super::records::{AnswerSpan, Document, EntityRecord, FactRecord};
use super::Corpus;
use crate::error::{KalaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub task: TaskKind,
    pub num_categories: usize,
    /// Entities per type that may appear in training.
    pub entities_per_category: usize,
    /// Entities per type reserved for unseen test contexts.
    pub unseen_per_category: usize,
    pub syllables: usize,
    pub name_tokens: usize,
    pub num_relations: usize,
    pub mentions_per_context: usize,
    pub train_contexts: usize,
    pub val_contexts: usize,
    pub test_contexts: usize,
    /// Fraction of val/test contexts whose answer is an unseen entity.
    pub unseen_fraction: f64,
    /// Unseen entities mentioned in such a context.
    pub unseen_per_context: usize,
    /// Same-type facts per entity.
    pub links_per_entity: usize,
    /// Noise facts per entity.
    pub noise_facts: usize,
    pub zipf_exponent: f64,
    pub filler_words: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Qa,
            num_categories: 6,
            entities_per_category: 20,
            unseen_per_category: 12,
            syllables: 30,
            name_tokens: 2,
            num_relations: 4,
            mentions_per_context: 4,
            train_contexts: 1200,
            val_contexts: 100,
            test_contexts: 200,
            unseen_fraction: 0.5,
            unseen_per_context: 3,
            links_per_entity: 2,
            noise_facts: 1,
            zipf_exponent: 1.1,
            filler_words: 16,
        }
    }
}

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
const FILLERS: &[&str] = &[
    "the", "near", "with", "saw", "from", "after", "beside", "met", "under", "behind", "past", "over", "via",
    "toward", "around", "without", "among", "beyond", "despite", "within",
];

impl GeneratorConfig {
    pub fn total_entities(&self) -> usize {
        self.num_categories * (self.entities_per_category + self.unseen_per_category)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(KalaError::Config(m));
        if self.mentions_per_context == 0 || self.mentions_per_context > self.num_categories {
            return err(format!(
                "mentions_per_context must be in 1..={} (one entity per type)",
                self.num_categories
            ));
        }
        if self.entities_per_category < 2 {
            return err("entities_per_category must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.unseen_fraction) {
            return err(format!("unseen_fraction {} outside [0, 1]", self.unseen_fraction));
        }
        if self.unseen_fraction > 0.0 {
            if self.links_per_entity == 0 {
                return err("unseen entities requested but links_per_entity is 0: they would have no facts".into());
            }
            if self.unseen_per_category == 0 {
                return err("unseen entities requested but unseen_per_category is 0".into());
            }
            if self.unseen_per_context == 0 || self.unseen_per_context > self.mentions_per_context {
                return err("unseen_per_context must be in 1..=mentions_per_context".into());
            }
        }
        if self.num_relations == 0 || (self.noise_facts > 0 && self.num_relations < 2) {
            return err("need relation P0 plus at least one noise relation".into());
        }
        if self.syllables == 0 || self.syllables > CONSONANTS.len() * VOWELS.len() || self.name_tokens == 0 {
            return err(format!("syllables must be in 1..={}", CONSONANTS.len() * VOWELS.len()));
        }
        let names = (self.syllables as f64).powi(self.name_tokens as i32);
        if names < self.total_entities() as f64 {
            return err(format!("{names} distinct names for {} entities", self.total_entities()));
        }
        if self.filler_words == 0 || self.filler_words > FILLERS.len() {
            return err(format!("filler_words must be in 1..={}", FILLERS.len()));
        }
        if !(self.zipf_exponent > 0.0) {
            return err("zipf_exponent must be positive".into());
        }
        if self.train_contexts == 0 {
            return err("train_contexts must be positive".into());
        }
        Ok(())
    }

    /// Mention-frequency mass of the top 10% ranks within a type.
    pub fn expected_head_mass(&self) -> f64 {
        let n = self.entities_per_category;
        let w: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-self.zipf_exponent)).collect();
        let head = n.div_ceil(10);
        w[..head].iter().sum::<f64>() / w.iter().sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedEntity {
    pub id: String,
    pub name: String,
    pub category: usize,
    /// Popularity rank within the type, 1-based; 0 for the unseen pool.
    pub rank: usize,
    pub pool: Pool,
}

#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub corpus: Corpus,
    pub entities: Vec<GeneratedEntity>,
}

pub fn category_word(c: usize) -> String {
    format!("kind{c}")
}

/// Rank sampler for training mentions: Zipf over `1..=n`.
pub fn rank_sampler(cfg: &GeneratorConfig) -> Result<Zipf<f64>> {
    Zipf::new(cfg.entities_per_category as f64, cfg.zipf_exponent).map_err(|e| KalaError::Config(format!("zipf: {e}")))
}

struct Plan {
    doc_id: String,
    entities: Vec<usize>,
    answer: usize,
}

struct Sampler<'a> {
    cfg: &'a GeneratorConfig,
    zipf: Zipf<f64>,
    /// `by_cat[c][r]` is the entity index of rank `r+1`.
    by_cat: Vec<Vec<usize>>,
    unseen_by_cat: Vec<Vec<usize>>,
}

impl Sampler<'_> {
    fn categories(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        rand::seq::index::sample(rng, self.cfg.num_categories, self.cfg.mentions_per_context).into_vec()
    }

    fn zipf_entity(&self, c: usize, rng: &mut ChaCha8Rng) -> usize {
        let r = self.zipf.sample(rng) as usize;
        self.by_cat[c][r.clamp(1, self.cfg.entities_per_category) - 1]
    }
}

pub fn generate_synthetic_corpus(cfg: &GeneratorConfig, seed: u64) -> Result<GeneratedCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut sylls: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}")))
        .collect();
    sylls.shuffle(&mut rng);
    sylls.truncate(cfg.syllables);
    let total = cfg.total_entities();
    let combos = cfg.syllables.pow(cfg.name_tokens as u32);
    let name_codes = rand::seq::index::sample(&mut rng, combos, total).into_vec();
    let mut id_codes: Vec<usize> = (0..total).collect();
    id_codes.shuffle(&mut rng);

    let mut entities = Vec::with_capacity(total);
    let mut by_cat = vec![Vec::new(); cfg.num_categories];
    let mut unseen_by_cat = vec![Vec::new(); cfg.num_categories];
    for c in 0..cfg.num_categories {
        for k in 0..cfg.entities_per_category + cfg.unseen_per_category {
            let idx = entities.len();
            let mut code = name_codes[idx];
            let mut parts = Vec::with_capacity(cfg.name_tokens);
            for _ in 0..cfg.name_tokens {
                parts.push(sylls[code % cfg.syllables].clone());
                code /= cfg.syllables;
            }
            let seen = k < cfg.entities_per_category;
            entities.push(GeneratedEntity {
                id: format!("Q{}", 1000 + id_codes[idx]),
                name: parts.join(" "),
                category: c,
                rank: if seen { k + 1 } else { 0 },
                pool: if seen { Pool::Seen } else { Pool::Unseen },
            });
            if seen {
                by_cat[c].push(idx);
            } else {
                unseen_by_cat[c].push(idx);
            }
        }
    }
    let sampler = Sampler { cfg, zipf: rank_sampler(cfg)?, by_cat, unseen_by_cat };

    let mut train = Vec::with_capacity(cfg.train_contexts);
    for i in 0..cfg.train_contexts {
        let cats = sampler.categories(&mut rng);
        let ents: Vec<usize> = cats.iter().map(|&c| sampler.zipf_entity(c, &mut rng)).collect();
        let answer = rng.random_range(0..ents.len());
        train.push(Plan { doc_id: format!("train-{i:05}"), entities: ents, answer });
    }
    let known: BTreeSet<usize> = train.iter().flat_map(|p| p.entities.iter().copied()).collect();
    let mut known_by_cat: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_categories];
    for &e in &known {
        known_by_cat[entities[e].category].push(e);
    }
    let mut known_samplers = Vec::with_capacity(cfg.num_categories);
    for (c, list) in known_by_cat.iter().enumerate() {
        if list.len() < 2 {
            return Err(KalaError::Config(format!(
                "type {c} has {} entities in training; increase train_contexts",
                list.len()
            )));
        }
        let w: Vec<f64> = list.iter().map(|&e| (entities[e].rank as f64).powf(-cfg.zipf_exponent)).collect();
        known_samplers.push(WeightedIndex::new(&w).map_err(|e| KalaError::Config(e.to_string()))?);
    }
    let known_entity = |c: usize, rng: &mut ChaCha8Rng| known_by_cat[c][known_samplers[c].sample(rng)];

    let held_out = |name: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<Plan> {
        let n_unseen = (cfg.unseen_fraction * n as f64).round() as usize;
        let mut regime: Vec<bool> = (0..n).map(|i| i < n_unseen).collect();
        regime.shuffle(rng);
        let mut plans = Vec::with_capacity(n);
        for (i, unseen) in regime.into_iter().enumerate() {
            let cats = sampler.categories(rng);
            let mut ents = Vec::with_capacity(cats.len());
            for (j, &c) in cats.iter().enumerate() {
                if unseen && j < cfg.unseen_per_context {
                    let pool = &sampler.unseen_by_cat[c];
                    ents.push(pool[rng.random_range(0..pool.len())]);
                } else {
                    ents.push(known_entity(c, rng));
                }
            }
            let answer_ent = if unseen {
                ents[rng.random_range(0..cfg.unseen_per_context)]
            } else {
                ents[rng.random_range(0..ents.len())]
            };
            ents.shuffle(rng);
            let answer = ents.iter().position(|&e| e == answer_ent).unwrap_or(0);
            plans.push(Plan { doc_id: format!("{name}-{i:05}"), entities: ents, answer });
        }
        plans
    };
    let val = held_out("val", cfg.val_contexts, &mut rng);
    let test = held_out("test", cfg.test_contexts, &mut rng);

    // Global knowledge graph: every entity gets links to known same-type
    // entities and noise links to known entities of other types.
    let mut kg: Vec<Vec<FactRecord>> = vec![Vec::new(); total];
    for (e, ent) in entities.iter().enumerate() {
        let c = ent.category;
        let mut targets = BTreeSet::new();
        let mut tries = 0;
        while targets.len() < cfg.links_per_entity && tries < 50 * cfg.links_per_entity {
            tries += 1;
            let t = known_entity(c, &mut rng);
            if t != e {
                targets.insert(t);
            }
        }
        for t in targets {
            kg[e].push(FactRecord { h: ent.id.clone(), r: "P0".into(), t: entities[t].id.clone() });
        }
        for j in 0..cfg.noise_facts {
            let mut oc = rng.random_range(0..cfg.num_categories - 1);
            if oc >= c {
                oc += 1;
            }
            let t = known_entity(oc, &mut rng);
            let r = 1 + j % (cfg.num_relations - 1);
            kg[e].push(FactRecord { h: ent.id.clone(), r: format!("P{r}"), t: entities[t].id.clone() });
        }
    }

    let mut out = Corpus { task: cfg.task, ..Corpus::default() };
    for (plans, split) in [(train, 0), (val, 1), (test, 2)] {
        for plan in plans {
            let (doc, mentions) = render(cfg, &plan, &entities, &mut rng);
            let mut facts = BTreeSet::new();
            for &e in &plan.entities {
                facts.extend(kg[e].iter().cloned());
            }
            out.facts.extend(facts.into_iter().map(|f| (plan.doc_id.clone(), f)));
            out.entities.extend(mentions.into_iter().map(|m| (plan.doc_id.clone(), m)));
            match split {
                0 => out.train.push(doc),
                1 => out.val.push(doc),
                _ => out.test.push(doc),
            }
        }
    }
    Ok(GeneratedCorpus { corpus: out, entities })
}

fn render(
    cfg: &GeneratorConfig,
    plan: &Plan,
    entities: &[GeneratedEntity],
    rng: &mut ChaCha8Rng,
) -> (Document, Vec<EntityRecord>) {
    let mut text = String::new();
    let mut tags = Vec::new();
    let mut mentions = Vec::new();
    let mut answer = None;
    let word = |w: &str, tag: String, text: &mut String, tags: &mut Vec<String>| {
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(w);
        tags.push(tag);
    };
    for (i, &e) in plan.entities.iter().enumerate() {
        let ent = &entities[e];
        let filler = FILLERS[rng.random_range(0..cfg.filler_words)];
        word(filler, "O".into(), &mut text, &mut tags);
        let start = text.len() + 1;
        let kind = category_word(ent.category);
        for (j, part) in ent.name.split(' ').enumerate() {
            let tag = if j == 0 { format!("B-{kind}") } else { format!("I-{kind}") };
            word(part, tag, &mut text, &mut tags);
        }
        let rec = EntityRecord { text: ent.name.clone(), start, end: text.len(), id: ent.id.clone() };
        if i == plan.answer {
            answer = Some(AnswerSpan { text: rec.text.clone(), start: rec.start, end: rec.end });
        }
        mentions.push(rec);
        let punct = if i + 1 == plan.entities.len() { "." } else { "," };
        word(punct, "O".into(), &mut text, &mut tags);
    }
    let doc = match cfg.task {
        TaskKind::Qa => {
            let c = entities[plan.entities[plan.answer]].category;
            Document {
                doc_id: plan.doc_id.clone(),
                context: text,
                question: Some(format!("which is {} ?", category_word(c))),
                answer,
                tags: None,
            }
        }
        TaskKind::Tagging => {
            Document { doc_id: plan.doc_id.clone(), context: text, question: None, answer: None, tags: Some(tags) }
        }
    };
    (doc, mentions)
}

/// Entities mentioned per split, keyed by id.
pub fn mentioned_ids(corpus: &Corpus) -> BTreeMap<&'static str, BTreeSet<String>> {
    let mut out: BTreeMap<&'static str, BTreeSet<String>> = BTreeMap::new();
    let split_of = |doc: &str| -> &'static str {
        if doc.starts_with("train") {
            "train"
        } else if doc.starts_with("val") {
            "val"
        } else {
            "test"
        }
    };
    for (doc, m) in &corpus.entities {
        out.entry(split_of(doc)).or_default().insert(m.id.clone());
    }
    out
}
