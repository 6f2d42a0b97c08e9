use std::fmt::Write as _;
use std::path::Path;

use super::{EncodedCorpus, Qrels, Run};
use crate::numerics::Tensor;
use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, line: usize, message: String) -> Error {
    Error::Format {
        path: path.display().to_string(),
        line,
        message,
    }
}

/// `qid Q0 docid rank score tag`, ranks starting at 1.
pub fn write_run(path: &Path, run: &Run, tag: &str) -> Result<()> {
    let mut out = String::new();
    for (qid, ranked) in run {
        for (i, (d, s)) in ranked.iter().enumerate() {
            writeln!(out, "{qid} Q0 {d} {} {s} {tag}", i + 1).expect("write to string");
        }
    }
    write(path, &out)
}

/// Lines are re-sorted by rank within each query.
pub fn read_run(path: &Path) -> Result<Run> {
    let mut ranked: std::collections::BTreeMap<String, Vec<(usize, String, f64)>> = Default::default();
    for (i, line) in read(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(format_err(path, i + 1, format!("expected 6 fields, found {}", f.len())));
        }
        let rank = f[3]
            .parse()
            .map_err(|e| format_err(path, i + 1, format!("rank `{}`: {e}", f[3])))?;
        let score = f[4]
            .parse()
            .map_err(|e| format_err(path, i + 1, format!("score `{}`: {e}", f[4])))?;
        ranked
            .entry(f[0].to_string())
            .or_default()
            .push((rank, f[2].to_string(), score));
    }
    Ok(ranked
        .into_iter()
        .map(|(q, mut v)| {
            v.sort_by_key(|(r, _, _)| *r);
            (q, v.into_iter().map(|(_, d, s)| (d, s)).collect())
        })
        .collect())
}

/// `qid<TAB>docid<TAB>1` for every relevant pair.
pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let mut out = String::new();
    for (q, rel) in qrels {
        for d in rel {
            writeln!(out, "{q}\t{d}\t1").expect("write to string");
        }
    }
    write(path, &out)
}

/// Accepts tab- or space-separated `qid docid grade`; grades <= 0 are
/// dropped.
pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, line) in read(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(format_err(path, i + 1, format!("expected 3 fields, found {}", f.len())));
        }
        let grade: i64 = f[2]
            .parse()
            .map_err(|e| format_err(path, i + 1, format!("grade `{}`: {e}", f[2])))?;
        let entry = qrels.entry(f[0].to_string()).or_default();
        if grade > 0 {
            entry.insert(f[1].to_string());
        }
    }
    Ok(qrels)
}

/// `id<TAB>v1 v2 ...` per row, values in shortest round-trip form.
pub fn write_vectors(path: &Path, corpus: &EncodedCorpus) -> Result<()> {
    let mut out = String::new();
    for (i, id) in corpus.ids.iter().enumerate() {
        let row: Vec<String> = corpus.vectors.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{id}\t{}", row.join(" ")).expect("write to string");
    }
    write(path, &out)
}

pub fn read_vectors(path: &Path) -> Result<EncodedCorpus> {
    let mut ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in read(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, vals) = line
            .split_once('\t')
            .ok_or_else(|| format_err(path, i + 1, "expected id<TAB>values".into()))?;
        let row = vals
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format_err(path, i + 1, e.to_string()))?;
        if rows.first().is_some_and(|r| r.len() != row.len()) {
            return Err(format_err(path, i + 1, "row length differs from the first row".into()));
        }
        ids.push(id.to_string());
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(EncodedCorpus {
        ids,
        vectors: Tensor::from_rows(&rows)?,
    })
}
