use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::knowledge::NULL_ROW;

/// Entities seen in training, in sorted id order. Row `i+1` of the entity
/// memory belongs to `ids[i]`; row 0 is the null entity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "EntityVocabRepr", into = "EntityVocabRepr")]
pub struct EntityVocabulary {
    ids: Vec<String>,
    frequencies: Vec<usize>,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct EntityVocabRepr {
    ids: Vec<String>,
    frequencies: Vec<usize>,
}

impl From<EntityVocabRepr> for EntityVocabulary {
    fn from(r: EntityVocabRepr) -> Self {
        Self::from_parts(r.ids, r.frequencies)
    }
}

impl From<EntityVocabulary> for EntityVocabRepr {
    fn from(v: EntityVocabulary) -> Self {
        Self { ids: v.ids, frequencies: v.frequencies }
    }
}

impl EntityVocabulary {
    /// Tally mention counts over the training mentions.
    pub fn build<'a>(mention_ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for id in mention_ids {
            *counts.entry(id.to_string()).or_default() += 1;
        }
        let (ids, frequencies) = counts.into_iter().unzip();
        Self::from_parts(ids, frequencies)
    }

    pub fn from_parts(ids: Vec<String>, frequencies: Vec<usize>) -> Self {
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i + 1)).collect();
        Self { ids, frequencies, index }
    }

    /// Keep only entities with frequency above `min_frequency`.
    pub fn pruned(&self, min_frequency: usize) -> Self {
        let (ids, freqs) = self
            .ids
            .iter()
            .zip(&self.frequencies)
            .filter(|(_, &f)| f > min_frequency)
            .map(|(i, &f)| (i.clone(), f))
            .unzip();
        Self::from_parts(ids, freqs)
    }

    /// Memory row of an entity id; unknown ids map to the null entity.
    pub fn row(&self, id: &str) -> usize {
        self.index.get(id).copied().unwrap_or(NULL_ROW)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Rows in the entity memory, including the null entity.
    pub fn memory_rows(&self) -> usize {
        self.ids.len() + 1
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn frequency(&self, id: &str) -> usize {
        match self.index.get(id) {
            Some(&row) => self.frequencies[row - 1],
            None => 0,
        }
    }

    pub fn id_of_row(&self, row: usize) -> Option<&str> {
        if row == NULL_ROW {
            return None;
        }
        self.ids.get(row - 1).map(String::as_str)
    }
}

/// Relation ids in order of first registration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct RelationVocab {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for RelationVocab {
    fn from(ids: Vec<String>) -> Self {
        Self::from_ids(ids)
    }
}

impl From<RelationVocab> for Vec<String> {
    fn from(v: RelationVocab) -> Self {
        v.ids
    }
}

impl RelationVocab {
    pub fn from_ids(ids: Vec<String>) -> Self {
        let index = ids.iter().enumerate().map(|(i, r)| (r.clone(), i)).collect();
        Self { ids, index }
    }

    /// Index of `id`, registering a fresh row when unknown.
    pub fn register(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), self.ids.len() - 1);
        self.ids.len() - 1
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramSummary {
    pub entities: usize,
    pub mentions: usize,
    pub singletons: usize,
    pub max_frequency: usize,
    /// Share of mentions going to the most frequent 10% of entities.
    pub head_mass: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyHistogram {
    pub rows: Vec<(String, usize)>,
    pub summary: HistogramSummary,
}

impl FrequencyHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("entity_id,frequency\n");
        for (id, f) in &self.rows {
            let _ = writeln!(s, "{id},{f}");
        }
        s
    }
}

/// Counts sorted descending, ties by entity id.
pub fn entity_frequency_histogram(vocab: &EntityVocabulary) -> FrequencyHistogram {
    let mut rows: Vec<(String, usize)> = vocab.ids.iter().cloned().zip(vocab.frequencies.iter().copied()).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mentions: usize = rows.iter().map(|r| r.1).sum();
    let head = rows.len().div_ceil(10);
    let head_mentions: usize = rows.iter().take(head).map(|r| r.1).sum();
    let summary = HistogramSummary {
        entities: rows.len(),
        mentions,
        singletons: rows.iter().filter(|r| r.1 == 1).count(),
        max_frequency: rows.first().map_or(0, |r| r.1),
        head_mass: if mentions == 0 { 0.0 } else { head_mentions as f64 / mentions as f64 },
    };
    FrequencyHistogram { rows, summary }
}

/// BIO tag inventory: `O`, then `B-x`, `I-x` per entity type in sorted order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagSet {
    pub tags: Vec<String>,
}

impl TagSet {
    pub fn from_types<'a>(types: impl IntoIterator<Item = &'a str>) -> Self {
        let set: std::collections::BTreeSet<&str> = types.into_iter().collect();
        let mut tags = vec!["O".to_string()];
        for t in set {
            tags.push(format!("B-{t}"));
            tags.push(format!("I-{t}"));
        }
        Self { tags }
    }

    /// Collect types from tag strings such as `B-x`.
    pub fn from_tag_sequences<'a>(seqs: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut types = std::collections::BTreeSet::new();
        for s in seqs {
            for t in s {
                if let Some(x) = t.strip_prefix("B-").or_else(|| t.strip_prefix("I-")) {
                    types.insert(x.to_string());
                }
            }
        }
        Self::from_types(types.iter().map(String::as_str))
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}
