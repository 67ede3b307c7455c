//! Corpus formats, vocabularies, synthetic generation and example assembly.

mod example;
mod generator;
mod records;
mod relation_select;
mod tokenize;
mod vocab;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use example::{
    align_mentions, assemble_example, split_seen_unseen, AssemblyContext, AssemblyOptions, Payload, TaskExample,
    TaskKind, TokenMention,
};
pub use generator::{
    category_word, generate_synthetic_corpus, mentioned_ids, rank_sampler, GeneratedCorpus, GeneratedEntity,
    GeneratorConfig, Pool,
};
pub use records::{
    parse_documents, parse_entity_file, parse_fact_file, validate_entity_boundaries, write_documents,
    write_entity_file, write_fact_file, AnswerSpan, Document, EntityRecord, FactFile, FactRecord,
};
pub use relation_select::{select_relation, DEFAULT_RELATION_THRESHOLD, NO_RELATION};
pub use tokenize::{tokenize, Token, TokenVocab, CLS, PAD, SEP, UNK};
pub use vocab::{entity_frequency_histogram, EntityVocabulary, FrequencyHistogram, HistogramSummary, RelationVocab, TagSet};

use crate::error::{KalaError, Result};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const ENTITY_FILE: &str = "entities.jsonl";
pub const FACT_FILE: &str = "facts.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Documents of the three splits with their mention and fact records.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub task: TaskKind,
    pub train: Vec<Document>,
    pub val: Vec<Document>,
    pub test: Vec<Document>,
    pub entities: Vec<(String, EntityRecord)>,
    pub facts: Vec<(String, FactRecord)>,
}

impl Default for Corpus {
    fn default() -> Self {
        Self {
            task: TaskKind::Qa,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            entities: Vec::new(),
            facts: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: TaskKind,
    pub seed: Option<u64>,
    pub generator: Option<GeneratorConfig>,
    pub splits: BTreeMap<String, Vec<String>>,
    /// SHA-256 of each data file.
    pub files: BTreeMap<String, String>,
    pub unseen_test_contexts: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Corpus {
    pub fn all_documents(&self) -> impl Iterator<Item = &Document> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Write the five data files and a manifest; returns the manifest and its hash.
    pub fn save(&self, dir: &Path, seed: Option<u64>, generator: Option<&GeneratorConfig>) -> Result<(Manifest, String)> {
        fs::create_dir_all(dir).map_err(|e| KalaError::io(format!("creating {}", dir.display()), e))?;
        write_documents(&dir.join(TRAIN_FILE), &self.train)?;
        write_documents(&dir.join(VAL_FILE), &self.val)?;
        write_documents(&dir.join(TEST_FILE), &self.test)?;
        write_entity_file(&dir.join(ENTITY_FILE), &self.entities)?;
        write_fact_file(&dir.join(FACT_FILE), &self.facts)?;
        let mut files = BTreeMap::new();
        for f in [TRAIN_FILE, VAL_FILE, TEST_FILE, ENTITY_FILE, FACT_FILE] {
            let p = dir.join(f);
            let bytes = fs::read(&p).map_err(|e| KalaError::io(format!("reading {}", p.display()), e))?;
            files.insert(f.to_string(), sha256_hex(&bytes));
        }
        let mut splits = BTreeMap::new();
        for (name, docs) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            splits.insert(name.to_string(), docs.iter().map(|d| d.doc_id.clone()).collect());
        }
        let manifest = Manifest {
            task: self.task,
            seed,
            generator: generator.cloned(),
            splits,
            files,
            unseen_test_contexts: self.unseen_test_contexts(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, &bytes).map_err(|e| KalaError::io(format!("writing {}", p.display()), e))?;
        Ok((manifest, sha256_hex(&bytes)))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let task = if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path)
                .map_err(|e| KalaError::io(format!("reading {}", manifest_path.display()), e))?;
            let m: Manifest = serde_json::from_str(&text)?;
            m.task
        } else {
            TaskKind::Qa
        };
        let train = parse_documents(&dir.join(TRAIN_FILE))?;
        let val = parse_documents(&dir.join(VAL_FILE))?;
        let test = parse_documents(&dir.join(TEST_FILE))?;
        let entities = parse_entity_file(&dir.join(ENTITY_FILE))?;
        let facts = parse_fact_file(&dir.join(FACT_FILE))?.facts;
        let corpus = Self { task, train, val, test, entities, facts };
        let docs: Vec<Document> = corpus.all_documents().cloned().collect();
        validate_entity_boundaries(&corpus.entities, &docs)?;
        Ok(corpus)
    }

    /// Test contexts with at least three mentioned entities absent from training.
    pub fn unseen_test_contexts(&self) -> usize {
        let train_docs: std::collections::BTreeSet<&str> = self.train.iter().map(|d| d.doc_id.as_str()).collect();
        let train_ids: std::collections::BTreeSet<&str> = self
            .entities
            .iter()
            .filter(|(d, _)| train_docs.contains(d.as_str()))
            .map(|(_, m)| m.id.as_str())
            .collect();
        let mut per_doc: BTreeMap<&str, std::collections::BTreeSet<&str>> = BTreeMap::new();
        for (d, m) in &self.entities {
            if !train_ids.contains(m.id.as_str()) {
                per_doc.entry(d.as_str()).or_default().insert(m.id.as_str());
            }
        }
        self.test.iter().filter(|d| per_doc.get(d.doc_id.as_str()).is_some_and(|s| s.len() >= 3)).count()
    }
}

/// Vocabularies and assembled examples ready for training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub task: TaskKind,
    pub tokens: TokenVocab,
    pub entities: EntityVocabulary,
    pub relations: RelationVocab,
    pub tags: Option<TagSet>,
    pub train: Vec<TaskExample>,
    pub val: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

fn group<T: Clone>(items: &[(String, T)]) -> BTreeMap<&str, Vec<T>> {
    let mut out: BTreeMap<&str, Vec<T>> = BTreeMap::new();
    for (d, x) in items {
        out.entry(d.as_str()).or_default().push(x.clone());
    }
    out
}

/// Assemble `docs` (one split of `corpus`) against fixed vocabularies.
pub fn assemble_documents(corpus: &Corpus, docs: &[Document], ctx: &AssemblyContext) -> Result<Vec<TaskExample>> {
    let mentions = group(&corpus.entities);
    let facts = group(&corpus.facts);
    let mut out = Vec::with_capacity(docs.len());
    for d in docs {
        let m = mentions.get(d.doc_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let f = facts.get(d.doc_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        if let Some(ex) = assemble_example(d, m, f, ctx)? {
            out.push(ex);
        }
    }
    Ok(out)
}

/// Build vocabularies from the training split and assemble every split.
pub fn prepare(corpus: &Corpus, options: AssemblyOptions, min_entity_frequency: usize) -> Result<Prepared> {
    let mentions = group(&corpus.entities);

    let tokens = TokenVocab::build(
        corpus.train.iter().flat_map(|d| std::iter::once(d.context.as_str()).chain(d.question.as_deref())),
    );
    let mut train_ids = Vec::new();
    for d in &corpus.train {
        let toks = tokenize(&d.context);
        let recs = mentions.get(d.doc_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        train_ids.extend(align_mentions(&d.doc_id, &toks, recs)?.into_iter().map(|m| m.id));
    }
    let mut entities = EntityVocabulary::build(train_ids.iter().map(String::as_str));
    if min_entity_frequency > 0 {
        entities = entities.pruned(min_entity_frequency);
    }
    let mut relations = RelationVocab::default();
    for (_, f) in &corpus.facts {
        relations.register(&f.r);
    }
    let tags = match corpus.task {
        TaskKind::Tagging => {
            Some(TagSet::from_tag_sequences(corpus.train.iter().filter_map(|d| d.tags.as_deref())))
        }
        TaskKind::Qa => None,
    };
    let ctx = AssemblyContext { tokens: &tokens, entities: &entities, relations: &relations, tags: tags.as_ref(), options };
    let train = assemble_documents(corpus, &corpus.train, &ctx)?;
    let val = assemble_documents(corpus, &corpus.val, &ctx)?;
    let test = assemble_documents(corpus, &corpus.test, &ctx)?;
    Ok(Prepared { task: corpus.task, tokens, entities, relations, tags, train, val, test })
}
