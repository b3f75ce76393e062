//! JSON-lines records for tokenized corpora and ground-truth pairs.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bpe::{build_model_input, Vocabulary};
use crate::error::{Error, Result};
use crate::ir::{to_token_stream, IRDocument, Origin};
use crate::triplet::{Pair, PairedCorpus, PairedDoc};

/// One normalized document as stored in `corpus.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub doc_id: String,
    pub origin: Origin,
    #[serde(default)]
    pub language_tag: Option<String>,
    pub tokens: Vec<String>,
}

impl CorpusRecord {
    pub fn from_document(doc: &IRDocument) -> Self {
        Self {
            doc_id: doc.doc_id.clone(),
            origin: doc.origin,
            language_tag: doc.language_tag.clone(),
            tokens: to_token_stream(doc),
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::format("jsonl", format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Model inputs for every record, keyed by doc id, for pairing.
pub fn paired_corpus(
    records: &[CorpusRecord],
    pairs: Vec<Pair>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PairedCorpus> {
    let docs: HashMap<String, PairedDoc> = records
        .iter()
        .map(|r| {
            (
                r.doc_id.clone(),
                PairedDoc { origin: r.origin, input: build_model_input(&vocab.encode(&r.tokens), None, max_len) },
            )
        })
        .collect();
    PairedCorpus::new(pairs, docs)
}
