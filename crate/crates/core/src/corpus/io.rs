//! On-disk formats: JSONL documents, alignment TSV, pair TSV, vocabulary.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{AlignmentRow, RawDocument, RetrievalPair, Vocab};
use crate::error::{Error, Result};

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn lines(path: &Path) -> Result<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

pub fn write_documents(path: &Path, docs: &[RawDocument]) -> Result<()> {
    let mut w = create(path)?;
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_documents(path: &Path) -> Result<Vec<RawDocument>> {
    let mut docs = Vec::new();
    for (i, line) in lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDocument =
            serde_json::from_str(line).map_err(|e| format_err(path, i + 1, e.to_string()))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_alignment(path: &Path, rows: &[AlignmentRow]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        writeln!(w, "{}\t{}\t{}", r.latent_id, r.lang, r.doc_id).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_alignment(path: &Path) -> Result<Vec<AlignmentRow>> {
    let mut rows = Vec::new();
    for (i, line) in lines(path)?.iter().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(format_err(path, i + 1, "expected 3 tab-separated fields"));
        }
        let latent_id = f[0]
            .parse()
            .map_err(|_| format_err(path, i + 1, "latent id is not an integer"))?;
        rows.push(AlignmentRow {
            latent_id,
            lang: f[1].to_string(),
            doc_id: f[2].to_string(),
        });
    }
    Ok(rows)
}

/// `query_text \t positive_doc_id \t positive_text`; the query id is
/// `q:<positive_doc_id>` and is not stored.
pub fn write_pairs(path: &Path, pairs: &[RetrievalPair]) -> Result<()> {
    let mut w = create(path)?;
    for p in pairs {
        writeln!(w, "{}\t{}\t{}", p.query_text, p.passage_id, p.passage_text)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: &Path) -> Result<Vec<RetrievalPair>> {
    let mut pairs = Vec::new();
    for (i, line) in lines(path)?.iter().enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(format_err(path, i + 1, "expected 3 tab-separated fields"));
        }
        pairs.push(RetrievalPair {
            query_id: format!("q:{}", f[1]),
            query_text: f[0].to_string(),
            passage_id: f[1].to_string(),
            passage_text: f[2].to_string(),
        });
    }
    Ok(pairs)
}

/// One token per line, id = line number.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut w = create(path)?;
    for t in vocab.tokens() {
        writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    Vocab::from_tokens(lines(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_and_pairs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let docs = vec![RawDocument {
            doc_id: "d1".into(),
            lang: "L0".into(),
            text: "a b\nc \"quoted\"".into(),
        }];
        let p = dir.path().join("docs.jsonl");
        write_documents(&p, &docs).unwrap();
        assert_eq!(read_documents(&p).unwrap(), docs);
        let first = fs::read_to_string(&p).unwrap();
        assert!(first.starts_with("{\"doc_id\":\"d1\",\"lang\":\"L0\",\"text\":"));

        let pairs = vec![RetrievalPair {
            query_id: "q:d1@0".into(),
            query_text: "a".into(),
            passage_id: "d1@0".into(),
            passage_text: "c quoted".into(),
        }];
        let pp = dir.path().join("pairs.tsv");
        write_pairs(&pp, &pairs).unwrap();
        assert_eq!(read_pairs(&pp).unwrap(), pairs);
    }

    #[test]
    fn malformed_alignment_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("align.tsv");
        fs::write(&p, "0\tL0\tdoc0\nx\tL1\n").unwrap();
        match read_alignment(&p) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
