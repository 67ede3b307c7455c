use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::records::{Document, EntityRecord, FactRecord};
use super::tokenize::{tokenize, Token, TokenVocab, CLS, SEP};
use super::vocab::{EntityVocabulary, RelationVocab, TagSet};
use crate::error::{KalaError, Result};
use crate::kfm::MentionSpan;
use crate::knowledge::{KnowledgeGraphView, RelationLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Qa,
    Tagging,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Gold answer as inclusive input positions.
    Span { start: usize, end: usize },
    /// Gold tag id per input position; only context positions are scored.
    Tags(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample {
    pub doc_id: String,
    pub token_ids: Vec<usize>,
    /// Surface form per input position.
    pub tokens: Vec<String>,
    /// Input positions `start..end` holding context tokens.
    pub context_range: (usize, usize),
    /// Mentions in input coordinates; `slot` indexes `entities`.
    pub mentions: Vec<MentionSpan>,
    pub entities: Vec<String>,
    pub memory_rows: Vec<usize>,
    pub kg: KnowledgeGraphView,
    pub payload: Payload,
}

impl TaskExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of mentioned entities outside the training vocabulary.
    pub fn unseen_count(&self, vocab: &EntityVocabulary) -> usize {
        self.entities.iter().filter(|e| !vocab.contains(e)).count()
    }
}

/// A mention converted to context token coordinates (inclusive).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMention {
    pub id: String,
    pub start: usize,
    pub end: usize,
}

/// Map character-level mentions onto tokens. Mentions whose boundary does
/// not coincide with token boundaries are dropped with a warning; overlapping
/// mentions are an annotation error.
pub fn align_mentions(doc_id: &str, tokens: &[Token], records: &[EntityRecord]) -> Result<Vec<TokenMention>> {
    let starts: BTreeMap<usize, usize> = tokens.iter().enumerate().map(|(i, t)| (t.start, i)).collect();
    let ends: BTreeMap<usize, usize> = tokens.iter().enumerate().map(|(i, t)| (t.end, i)).collect();
    let mut out = Vec::new();
    for r in records {
        match (starts.get(&r.start), ends.get(&r.end)) {
            (Some(&s), Some(&e)) if s <= e => out.push(TokenMention { id: r.id.clone(), start: s, end: e }),
            _ => log::warn!("{doc_id}: mention {:?} at {}..{} is not token aligned; dropped", r.text, r.start, r.end),
        }
    }
    out.sort_by_key(|m| (m.start, m.end));
    for w in out.windows(2) {
        if w[1].start <= w[0].end {
            return Err(KalaError::Annotation(format!(
                "{doc_id}: mentions of {} and {} overlap",
                w[0].id, w[1].id
            )));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct AssemblyOptions {
    pub max_len: usize,
    pub self_loops: bool,
}

pub struct AssemblyContext<'a> {
    pub tokens: &'a TokenVocab,
    pub entities: &'a EntityVocabulary,
    pub relations: &'a RelationVocab,
    pub tags: Option<&'a TagSet>,
    pub options: AssemblyOptions,
}

fn char_span_to_tokens(tokens: &[Token], start: usize, end: usize) -> Option<(usize, usize)> {
    let s = tokens.iter().position(|t| t.start == start)?;
    let e = tokens.iter().position(|t| t.end == end)?;
    (s <= e).then_some((s, e))
}

/// Build a model input from a document. Returns `Ok(None)` when the gold
/// answer cannot be placed inside the (possibly truncated) input.
pub fn assemble_example(
    doc: &Document,
    records: &[EntityRecord],
    facts: &[FactRecord],
    ctx: &AssemblyContext<'_>,
) -> Result<Option<TaskExample>> {
    let ctx_tokens = tokenize(&doc.context);
    let q_tokens = doc.question.as_deref().map(tokenize).unwrap_or_default();

    let mut surface = vec![CLS.to_string()];
    if !q_tokens.is_empty() {
        surface.extend(q_tokens.iter().map(|t| t.text.clone()));
        surface.push(SEP.to_string());
    }
    let offset = surface.len();
    let room = ctx.options.max_len.saturating_sub(offset + 1);
    if room == 0 {
        return Err(KalaError::Config(format!("{}: question leaves no room for context", doc.doc_id)));
    }
    let kept = ctx_tokens.len().min(room);
    surface.extend(ctx_tokens[..kept].iter().map(|t| t.text.clone()));
    surface.push(SEP.to_string());
    let token_ids = surface.iter().map(|t| ctx.tokens.id(t)).collect();

    let aligned = align_mentions(&doc.doc_id, &ctx_tokens, records)?;
    let mut slots: BTreeMap<&str, usize> = BTreeMap::new();
    let mut entities = Vec::new();
    let mut mentions = Vec::new();
    for m in aligned.iter().filter(|m| m.end < kept) {
        let slot = *slots.entry(m.id.as_str()).or_insert_with(|| {
            entities.push(m.id.clone());
            entities.len() - 1
        });
        mentions.push(MentionSpan { slot, start: m.start + offset, end: m.end + offset });
    }
    let memory_rows: Vec<usize> = entities.iter().map(|e| ctx.entities.row(e)).collect();

    let mut fact_idx = Vec::with_capacity(facts.len());
    for f in facts {
        let r = ctx.relations.get(&f.r).ok_or_else(|| KalaError::Lookup(format!("relation {} not registered", f.r)))?;
        fact_idx.push((f.h.clone(), r, f.t.clone()));
    }
    let targets: Vec<(String, usize)> = entities.iter().cloned().zip(memory_rows.iter().copied()).collect();
    let kg = KnowledgeGraphView::build(
        &targets,
        &fact_idx,
        |k| ctx.entities.row(k),
        RelationLayout { num_relations: ctx.relations.len() },
        ctx.options.self_loops,
    )?;

    let payload = if let Some(tags) = &doc.tags {
        let set = ctx.tags.ok_or_else(|| KalaError::Config("tagging document without a tag set".into()))?;
        if tags.len() != ctx_tokens.len() {
            return Err(KalaError::Annotation(format!(
                "{}: {} tags for {} tokens",
                doc.doc_id,
                tags.len(),
                ctx_tokens.len()
            )));
        }
        let mut ids = vec![0; surface.len()];
        for (i, t) in tags[..kept].iter().enumerate() {
            ids[offset + i] = set.id(t).ok_or_else(|| KalaError::Annotation(format!("{}: unknown tag {t}", doc.doc_id)))?;
        }
        Payload::Tags(ids)
    } else if let Some(a) = &doc.answer {
        match char_span_to_tokens(&ctx_tokens, a.start, a.end) {
            Some((s, e)) if e < kept => Payload::Span { start: s + offset, end: e + offset },
            Some(_) => {
                log::warn!("{}: answer truncated away; example skipped", doc.doc_id);
                return Ok(None);
            }
            None => {
                log::warn!("{}: answer not token aligned; example skipped", doc.doc_id);
                return Ok(None);
            }
        }
    } else {
        return Err(KalaError::Annotation(format!("{}: document has neither answer nor tags", doc.doc_id)));
    };

    Ok(Some(TaskExample {
        doc_id: doc.doc_id.clone(),
        token_ids,
        tokens: surface,
        context_range: (offset, offset + kept),
        mentions,
        entities,
        memory_rows,
        kg,
        payload,
    }))
}

/// Indices of examples with fewer than three unseen entities, then the rest.
pub fn split_seen_unseen(examples: &[TaskExample], vocab: &EntityVocabulary) -> (Vec<usize>, Vec<usize>) {
    (0..examples.len()).partition(|&i| examples[i].unseen_count(vocab) < 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::records::AnswerSpan;

    fn rec(text: &str, start: usize, id: &str) -> EntityRecord {
        EntityRecord { text: text.into(), start, end: start + text.chars().count(), id: id.into() }
    }

    #[test]
    fn definition_example_mentions() {
        let toks = tokenize("New York is a city");
        let m = align_mentions("d", &toks, &[rec("New York", 0, "New_York"), rec("city", 14, "city")]).unwrap();
        let one_based: Vec<_> = m.iter().map(|m| (m.start + 1, m.end + 1)).collect();
        assert_eq!(one_based, vec![(1, 2), (5, 5)]);
    }

    #[test]
    fn misaligned_mention_dropped_overlap_rejected() {
        let toks = tokenize("New York is a city");
        let m = align_mentions("d", &toks, &[rec("ew York", 1, "x")]).unwrap();
        assert!(m.is_empty());
        let err = align_mentions("d", &toks, &[rec("New York", 0, "a"), rec("York", 4, "b")]);
        assert!(matches!(err, Err(KalaError::Annotation(_))));
    }

    fn fixture() -> (Document, Vec<EntityRecord>, Vec<FactRecord>) {
        let doc = Document {
            doc_id: "d".into(),
            context: "New York is a city near Boston".into(),
            question: Some("which city ?".into()),
            answer: Some(AnswerSpan { text: "Boston".into(), start: 24, end: 30 }),
            tags: None,
        };
        let recs = vec![rec("New York", 0, "Q60"), rec("city", 14, "Q515"), rec("Boston", 24, "Q100")];
        let facts = vec![FactRecord { h: "Q60".into(), r: "P31".into(), t: "Q515".into() }];
        (doc, recs, facts)
    }

    #[test]
    fn assembles_qa_example() {
        let (doc, recs, facts) = fixture();
        let tv = TokenVocab::build([doc.context.as_str(), doc.question.as_deref().unwrap()]);
        let ev = EntityVocabulary::build(["Q60", "Q515"]);
        let mut rv = RelationVocab::default();
        rv.register("P31");
        let ctx = AssemblyContext {
            tokens: &tv,
            entities: &ev,
            relations: &rv,
            tags: None,
            options: AssemblyOptions { max_len: 32, self_loops: true },
        };
        let ex = assemble_example(&doc, &recs, &facts, &ctx).unwrap().unwrap();
        assert_eq!(ex.tokens[..5], ["[CLS]", "which", "city", "?", "[SEP]"]);
        assert_eq!(ex.context_range, (5, 12));
        assert_eq!(ex.payload, Payload::Span { start: 11, end: 11 });
        assert_eq!(ex.entities, vec!["Q60", "Q515", "Q100"]);
        assert_eq!(ex.memory_rows, vec![2, 1, 0]);
        assert_eq!(ex.mentions[0], MentionSpan { slot: 0, start: 5, end: 6 });
        assert_eq!(ex.kg.num_fact_edges(), 2);
        assert_eq!(ex.unseen_count(&ev), 1);
    }

    #[test]
    fn truncated_answer_skips_example() {
        let (doc, recs, facts) = fixture();
        let tv = TokenVocab::build([doc.context.as_str()]);
        let ev = EntityVocabulary::default();
        let mut rv = RelationVocab::default();
        rv.register("P31");
        let ctx = AssemblyContext {
            tokens: &tv,
            entities: &ev,
            relations: &rv,
            tags: None,
            options: AssemblyOptions { max_len: 8, self_loops: true },
        };
        assert!(assemble_example(&doc, &recs, &facts, &ctx).unwrap().is_none());
    }

    #[test]
    fn seen_unseen_boundary() {
        let (doc, _, _) = fixture();
        let tv = TokenVocab::build([doc.context.as_str()]);
        let ev = EntityVocabulary::build(["s"]);
        let rv = RelationVocab::default();
        let ctx = AssemblyContext {
            tokens: &tv,
            entities: &ev,
            relations: &rv,
            tags: None,
            options: AssemblyOptions { max_len: 32, self_loops: true },
        };
        // Word-aligned mentions at 0 ("New"), 4 ("York"), 9 ("is"), 12 ("a").
        let words = [("New", 0), ("York", 4), ("is", 9), ("a", 12)];
        let mut examples = Vec::new();
        for unseen in 0..=3 {
            let mut recs = Vec::new();
            for (i, (w, s)) in words.iter().enumerate() {
                let id = if i < unseen { format!("u{i}") } else { "s".to_string() };
                recs.push(rec(w, *s, &id));
            }
            examples.push(assemble_example(&doc, &recs, &[], &ctx).unwrap().unwrap());
        }
        let (seen, unseen) = split_seen_unseen(&examples, &ev);
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(unseen, vec![3]);
    }
}
