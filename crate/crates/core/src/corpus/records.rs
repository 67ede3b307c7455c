//! Line-delimited JSON record files.
//!
//! Entity file, one mention per line:
//! `{"doc_id":"d0","text":"New York","start":0,"end":8,"id":"Q60"}`
//!
//! Fact file, one triplet per line:
//! `{"doc_id":"d0","h":"Q60","r":"P31","t":"Q515"}`
//!
//! Split files hold one [`Document`] per line.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{KalaError, Result};

/// A mention with a character-level boundary `start..end` (end exclusive).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactRecord {
    pub h: String,
    pub r: String,
    pub t: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntityLine {
    doc_id: String,
    text: String,
    start: usize,
    end: usize,
    id: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactLine {
    doc_id: String,
    h: String,
    r: String,
    t: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// One context with its task payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub doc_id: String,
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<AnswerSpan>,
    /// One tag per whitespace/punctuation token of the context.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
}

/// Parsed fact file with the number of duplicate triplets dropped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FactFile {
    pub facts: Vec<(String, FactRecord)>,
    pub duplicates: usize,
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(|e| KalaError::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| KalaError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| KalaError::io(format!("creating {}", path.display()), e))?;
    f.write_all(&buf).map_err(|e| KalaError::io(format!("writing {}", path.display()), e))
}

pub fn parse_entity_file(path: &Path) -> Result<Vec<(String, EntityRecord)>> {
    let mut out = Vec::new();
    for (line, e) in read_lines::<EntityLine>(path)? {
        if e.end <= e.start {
            return Err(KalaError::Range(format!(
                "{}:{line}: mention boundary {}..{} is empty or reversed",
                path.display(),
                e.start,
                e.end
            )));
        }
        out.push((e.doc_id, EntityRecord { text: e.text, start: e.start, end: e.end, id: e.id }));
    }
    Ok(out)
}

/// Check every mention against its document's length and surface text.
pub fn validate_entity_boundaries(records: &[(String, EntityRecord)], docs: &[Document]) -> Result<()> {
    let lens: std::collections::HashMap<&str, &str> = docs.iter().map(|d| (d.doc_id.as_str(), d.context.as_str())).collect();
    for (doc, r) in records {
        let Some(ctx) = lens.get(doc.as_str()) else {
            return Err(KalaError::Range(format!("mention of {} refers to unknown document {doc}", r.id)));
        };
        let n = ctx.chars().count();
        if r.end > n {
            return Err(KalaError::Range(format!(
                "mention {}..{} of {} outside document {doc} of {n} characters",
                r.start, r.end, r.id
            )));
        }
    }
    Ok(())
}

pub fn write_entity_file(path: &Path, records: &[(String, EntityRecord)]) -> Result<()> {
    write_lines(
        path,
        records.iter().map(|(d, r)| EntityLine {
            doc_id: d.clone(),
            text: r.text.clone(),
            start: r.start,
            end: r.end,
            id: r.id.clone(),
        }),
    )
}

pub fn parse_fact_file(path: &Path) -> Result<FactFile> {
    let mut seen = BTreeSet::new();
    let mut out = FactFile::default();
    for (_, f) in read_lines::<FactLine>(path)? {
        let rec = FactRecord { h: f.h, r: f.r, t: f.t };
        if seen.insert((f.doc_id.clone(), rec.clone())) {
            out.facts.push((f.doc_id, rec));
        } else {
            out.duplicates += 1;
        }
    }
    if out.duplicates > 0 {
        log::info!("{}: dropped {} duplicate triplets", path.display(), out.duplicates);
    }
    Ok(out)
}

pub fn write_fact_file(path: &Path, facts: &[(String, FactRecord)]) -> Result<()> {
    write_lines(
        path,
        facts.iter().map(|(d, f)| FactLine { doc_id: d.clone(), h: f.h.clone(), r: f.r.clone(), t: f.t.clone() }),
    )
}

pub fn parse_documents(path: &Path) -> Result<Vec<Document>> {
    Ok(read_lines::<Document>(path)?.into_iter().map(|(_, d)| d).collect())
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    write_lines(path, docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entity_line_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        fs::write(&p, "{\"doc_id\":\"d0\",\"text\":\"New York\",\"start\":0,\"end\":8,\"id\":\"Q60\"}\n").unwrap();
        let recs = parse_entity_file(&p).unwrap();
        assert_eq!(
            recs,
            vec![("d0".to_string(), EntityRecord { text: "New York".into(), start: 0, end: 8, id: "Q60".into() })]
        );
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        fs::write(&p, "").unwrap();
        assert!(parse_entity_file(&p).unwrap().is_empty());
        assert!(parse_fact_file(&p).unwrap().facts.is_empty());
    }

    #[test]
    fn reversed_boundary_is_range_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        fs::write(&p, "{\"doc_id\":\"d0\",\"text\":\"x\",\"start\":5,\"end\":3,\"id\":\"Q1\"}\n").unwrap();
        assert!(matches!(parse_entity_file(&p), Err(KalaError::Range(_))));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        fs::write(&p, "{\"doc_id\":\"d\",\"h\":\"a\",\"r\":\"P1\",\"t\":\"b\"}\n{\"doc_id\":\"d\",\"h\":\"a\"\n").unwrap();
        match parse_fact_file(&p) {
            Err(KalaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_facts_are_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jsonl");
        let line = "{\"doc_id\":\"d\",\"h\":\"E1\",\"r\":\"instance_of\",\"t\":\"E2\"}\n";
        fs::write(&p, format!("{line}{line}")).unwrap();
        let f = parse_fact_file(&p).unwrap();
        assert_eq!(f.facts.len(), 1);
        assert_eq!(f.duplicates, 1);
        assert_eq!(f.facts[0].1, FactRecord { h: "E1".into(), r: "instance_of".into(), t: "E2".into() });
    }

    #[test]
    fn boundary_outside_document() {
        let docs = vec![Document { doc_id: "d".into(), context: "abc".into(), question: None, answer: None, tags: None }];
        let ok = vec![("d".to_string(), EntityRecord { text: "abc".into(), start: 0, end: 3, id: "x".into() })];
        assert!(validate_entity_boundaries(&ok, &docs).is_ok());
        let bad = vec![("d".to_string(), EntityRecord { text: "abcd".into(), start: 0, end: 4, id: "x".into() })];
        assert!(matches!(validate_entity_boundaries(&bad, &docs), Err(KalaError::Range(_))));
    }
}
