//! Corpus records and JSONL serialization.
//!
//! A labeled corpus is one JSON object per line:
//! `{"doc_id": ..., "html": ..., "labels": {"<node_id>": [6 bools]}}`.
//! Label keys refer to the node ids the DOM pipeline assigns; retained nodes
//! without an entry default to all-false.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::LabelSet;

/// One page with ground-truth node labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledDocument {
    pub doc_id: String,
    pub html: String,
    #[serde(default)]
    pub labels: BTreeMap<usize, LabelSet>,
}

impl LabeledDocument {
    pub fn label_for(&self, node_id: usize) -> LabelSet {
        self.labels.get(&node_id).copied().unwrap_or_default()
    }
}

/// One page without labels (scrape/bench input). A labeled corpus line also
/// parses as a `CorpusRecord`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub html: String,
}

pub fn read_labeled_corpus(path: &Path) -> Result<Vec<LabeledDocument>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut docs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(serde_json::from_str(&line)?);
    }
    Ok(docs)
}

pub fn write_labeled_corpus(path: &Path, docs: &[LabeledDocument]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for doc in docs {
        serde_json::to_writer(&mut w, doc)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LABEL_PRIMARY;

    #[test]
    fn labeled_document_roundtrips_with_string_keys() {
        let mut labels = BTreeMap::new();
        labels.insert(0usize, LabelSet::none().with(LABEL_PRIMARY));
        labels.insert(3usize, LabelSet::none());
        let doc = LabeledDocument {
            doc_id: "d1".into(),
            html: "<p>x</p>".into(),
            labels,
        };
        let line = serde_json::to_string(&doc).unwrap();
        assert!(line.contains("\"0\":[true,false,false,false,false,false]"), "{line}");
        let back: LabeledDocument = serde_json::from_str(&line).unwrap();
        assert_eq!(back.labels.len(), 2);
        assert!(back.label_for(0).is_primary());
        assert!(!back.label_for(3).is_primary());
        // unlabeled nodes default to all-false
        assert_eq!(back.label_for(99), LabelSet::none());
    }

    #[test]
    fn labeled_line_parses_as_plain_record() {
        let line = r#"{"doc_id":"a","html":"<p>x</p>","labels":{"0":[true,false,false,false,false,false]}}"#;
        let rec: CorpusRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.doc_id, "a");
        assert_eq!(rec.url, None);
    }
}
