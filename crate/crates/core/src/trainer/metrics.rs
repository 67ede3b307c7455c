use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityVocabulary, Payload, TagSet, TaskExample, TaskKind};
use crate::error::{KalaError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    /// Inclusive input positions.
    Span { start: usize, end: usize },
    /// Tag id per context position.
    Tags(Vec<usize>),
}

/// Lowercase and drop tokens made only of punctuation.
pub fn normalize_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens
        .iter()
        .map(|t| t.as_ref().to_lowercase())
        .filter(|t| !t.is_empty() && !t.chars().all(|c| c.is_ascii_punctuation()))
        .collect()
}

pub fn exact_match<S: AsRef<str>>(pred: &[S], gold: &[S]) -> bool {
    normalize_tokens(pred) == normalize_tokens(gold)
}

/// Bag-of-tokens F1 after normalization.
pub fn token_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    let p = normalize_tokens(pred);
    let g = normalize_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p == g { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `(type, start, end)` chunks of a BIO sequence. A stray `I-x` opens a chunk.
pub fn bio_chunks<S: AsRef<str>>(tags: &[S]) -> BTreeSet<(String, usize, usize)> {
    let mut out = BTreeSet::new();
    let mut open: Option<(String, usize)> = None;
    for (i, t) in tags.iter().enumerate() {
        let t = t.as_ref();
        let (kind, ty) = match t.split_once('-') {
            Some((k, ty)) if k == "B" || k == "I" => (k, ty),
            _ => ("O", ""),
        };
        let continues = kind == "I" && open.as_ref().is_some_and(|(o, _)| o == ty);
        if !continues {
            if let Some((o, s)) = open.take() {
                out.insert((o, s, i - 1));
            }
            if kind != "O" {
                open = Some((ty.to_string(), i));
            }
        }
    }
    if let Some((o, s)) = open {
        out.insert((o, s, tags.len() - 1));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    /// Exact match, QA only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub em: Option<f64>,
    pub f1: f64,
}

/// A subset score, or an explicit marker when the subset has no examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Empty,
    Scored(Metrics),
}

impl Subset {
    pub fn metrics(&self) -> Option<&Metrics> {
        match self {
            Subset::Empty => None,
            Subset::Scored(m) => Some(m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub overall: Metrics,
    pub seen: Subset,
    pub unseen: Subset,
}

fn span_tokens(ex: &TaskExample, start: usize, end: usize) -> &[String] {
    &ex.tokens[start..=end]
}

fn score_qa(examples: &[&TaskExample], preds: &[&Prediction]) -> Result<Metrics> {
    let (mut em, mut f1) = (0.0, 0.0);
    for (ex, p) in examples.iter().zip(preds) {
        let (Payload::Span { start, end }, Prediction::Span { start: ps, end: pe }) = (&ex.payload, p) else {
            return Err(KalaError::Contract(format!("{}: QA scoring needs span gold and prediction", ex.doc_id)));
        };
        if ps > pe || *pe >= ex.len() {
            return Err(KalaError::Contract(format!("{}: predicted span ({ps}, {pe}) out of range", ex.doc_id)));
        }
        let gold = span_tokens(ex, *start, *end);
        let pred = span_tokens(ex, *ps, *pe);
        em += f64::from(u8::from(exact_match(pred, gold)));
        f1 += token_f1(pred, gold);
    }
    let n = examples.len();
    let avg = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
    Ok(Metrics { count: n, em: Some(avg(em)), f1: avg(f1) })
}

fn score_tagging(examples: &[&TaskExample], preds: &[&Prediction], tags: &TagSet) -> Result<Metrics> {
    let name = |i: usize| tags.tags.get(i).map(String::as_str).unwrap_or("O");
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (ex, p) in examples.iter().zip(preds) {
        let (Payload::Tags(gold), Prediction::Tags(pred)) = (&ex.payload, p) else {
            return Err(KalaError::Contract(format!("{}: tagging needs tag gold and prediction", ex.doc_id)));
        };
        let (a, b) = ex.context_range;
        if pred.len() != b - a {
            return Err(KalaError::Contract(format!(
                "{}: {} predicted tags for {} context positions",
                ex.doc_id,
                pred.len(),
                b - a
            )));
        }
        let g = bio_chunks(&gold[a..b].iter().map(|&t| name(t)).collect::<Vec<_>>());
        let p = bio_chunks(&pred.iter().map(|&t| name(t)).collect::<Vec<_>>());
        tp += g.intersection(&p).count();
        n_pred += p.len();
        n_gold += g.len();
    }
    let f1 = if n_pred + n_gold == 0 { 1.0 } else { 2.0 * tp as f64 / (n_pred + n_gold) as f64 };
    Ok(Metrics { count: examples.len(), em: None, f1 })
}

fn score_subset(
    task: TaskKind,
    examples: &[TaskExample],
    preds: &[Prediction],
    idx: &[usize],
    tags: Option<&TagSet>,
) -> Result<Metrics> {
    let ex: Vec<&TaskExample> = idx.iter().map(|&i| &examples[i]).collect();
    let pr: Vec<&Prediction> = idx.iter().map(|&i| &preds[i]).collect();
    match task {
        TaskKind::Qa => score_qa(&ex, &pr),
        TaskKind::Tagging => {
            let tags = tags.ok_or_else(|| KalaError::Contract("tagging evaluation needs a tag set".into()))?;
            score_tagging(&ex, &pr, tags)
        }
    }
}

/// Score predictions overall and on the Seen/Unseen breakdown.
pub fn score_predictions(
    task: TaskKind,
    examples: &[TaskExample],
    preds: &[Prediction],
    entities: &EntityVocabulary,
    tags: Option<&TagSet>,
) -> Result<EvalReport> {
    if examples.len() != preds.len() {
        return Err(KalaError::Contract(format!("{} predictions for {} examples", preds.len(), examples.len())));
    }
    let all: Vec<usize> = (0..examples.len()).collect();
    let overall = score_subset(task, examples, preds, &all, tags)?;
    let (seen, unseen) = crate::corpus::split_seen_unseen(examples, entities);
    let sub = |idx: &[usize]| -> Result<Subset> {
        if idx.is_empty() {
            return Ok(Subset::Empty);
        }
        Ok(Subset::Scored(score_subset(task, examples, preds, idx, tags)?))
    };
    Ok(EvalReport { task, overall, seen: sub(&seen)?, unseen: sub(&unseen)? })
}

/// The gold answer of an example as a prediction.
pub fn gold_prediction(ex: &TaskExample) -> Prediction {
    match &ex.payload {
        Payload::Span { start, end } => Prediction::Span { start: *start, end: *end },
        Payload::Tags(t) => Prediction::Tags(t[ex.context_range.0..ex.context_range.1].to_vec()),
    }
}
