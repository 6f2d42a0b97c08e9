use rand::seq::index::sample;
use rand::Rng;

use super::RawDocument;
use crate::error::{Error, Result};
use crate::seed::{rng, sub_seed};

/// Which sentences form the positive passage for a query sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassageWindow {
    /// The two sentences around the query (previous and next; the two
    /// nearest ones at a document edge). The query sentence is left out.
    Neighbors,
    /// Two consecutive sentences, one of which is the query sentence.
    Containing,
}

crate::model::str_enum!(PassageWindow { "neighbors" => Neighbors, "containing" => Containing });

#[derive(Clone, Debug, PartialEq)]
pub struct PairOptions {
    /// Probability of dropping each query token.
    pub dropout: f64,
    pub pairs_per_doc: usize,
    pub window: PassageWindow,
    pub seed: u64,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            dropout: 0.2,
            pairs_per_doc: 1,
            window: PassageWindow::Neighbors,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalPair {
    pub query_id: String,
    pub query_text: String,
    pub passage_id: String,
    pub passage_text: String,
}

fn window(n: usize, t: usize, kind: PassageWindow) -> Vec<usize> {
    match kind {
        PassageWindow::Neighbors => {
            let mut w: Vec<usize> = (0..n).filter(|&i| i != t).collect();
            w.sort_by_key(|&i| (i.abs_diff(t), i));
            w.truncate(2);
            w.sort_unstable();
            w
        }
        PassageWindow::Containing if t + 1 < n => vec![t, t + 1],
        PassageWindow::Containing => vec![t - 1, t],
    }
}

/// Query/positive-passage pairs from the documents of one language.
///
/// Documents with fewer than two sentences are skipped. Output is a pure
/// function of the inputs.
pub fn make_retrieval_pairs(
    docs: &[RawDocument],
    lang: &str,
    opts: &PairOptions,
) -> Result<Vec<RetrievalPair>> {
    if !(0.0..1.0).contains(&opts.dropout) {
        return Err(Error::invalid(format!("dropout {} outside [0, 1)", opts.dropout)));
    }
    let mut pairs = Vec::new();
    for (index, doc) in docs.iter().filter(|d| d.lang == lang).enumerate() {
        let sentences: Vec<Vec<&str>> = doc
            .sentences()
            .map(|s| s.split_whitespace().collect())
            .collect();
        let n = sentences.len();
        if n < 2 {
            continue;
        }
        let mut r = rng(sub_seed(opts.seed, index as u64));
        let mut positions = sample(&mut r, n, opts.pairs_per_doc.min(n)).into_vec();
        positions.sort_unstable();
        for t in positions {
            let source = &sentences[t];
            let mut kept: Vec<&str> = source
                .iter()
                .copied()
                .filter(|_| opts.dropout == 0.0 || r.random::<f64>() >= opts.dropout)
                .collect();
            if kept.is_empty() {
                kept.push(source[r.random_range(0..source.len())]);
            }
            let passage = window(n, t, opts.window)
                .into_iter()
                .flat_map(|i| sentences[i].iter().copied())
                .collect::<Vec<_>>()
                .join(" ");
            pairs.push(RetrievalPair {
                query_id: format!("q:{}@{t}", doc.doc_id),
                query_text: kept.join(" "),
                passage_id: format!("{}@{t}", doc.doc_id),
                passage_text: passage,
            });
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, lines: &[&str]) -> RawDocument {
        RawDocument {
            doc_id: id.into(),
            lang: "L0".into(),
            text: lines.join("\n"),
        }
    }

    #[test]
    fn window_rules() {
        assert_eq!(window(3, 1, PassageWindow::Neighbors), vec![0, 2]);
        assert_eq!(window(5, 0, PassageWindow::Neighbors), vec![1, 2]);
        assert_eq!(window(5, 4, PassageWindow::Neighbors), vec![2, 3]);
        assert_eq!(window(2, 1, PassageWindow::Neighbors), vec![0]);
        assert_eq!(window(3, 1, PassageWindow::Containing), vec![1, 2]);
        assert_eq!(window(3, 2, PassageWindow::Containing), vec![1, 2]);
    }

    #[test]
    fn zero_dropout_copies_the_sentence() {
        let docs = [doc("a", &["s1 x", "s2 y z", "s3 w"])];
        let opts = PairOptions {
            dropout: 0.0,
            pairs_per_doc: 3,
            ..PairOptions::default()
        };
        let pairs = make_retrieval_pairs(&docs, "L0", &opts).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[1].query_text, "s2 y z");
        assert_eq!(pairs[1].passage_text, "s1 x s3 w");
        assert_eq!(pairs[1].passage_id, "a@1");
    }

    #[test]
    fn short_documents_skipped_and_other_languages_ignored() {
        let mut other = doc("b", &["p q", "r s"]);
        other.lang = "L1".into();
        let docs = [doc("a", &["only"]), other];
        assert!(make_retrieval_pairs(&docs, "L0", &PairOptions::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn dropout_removes_tokens_but_never_all() {
        let line = (0..50).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
        let docs = [doc("a", &[&line, "u v", "w"])];
        let opts = PairOptions {
            pairs_per_doc: 3,
            dropout: 0.2,
            ..PairOptions::default()
        };
        let pairs = make_retrieval_pairs(&docs, "L0", &opts).unwrap();
        let q0 = pairs[0].query_text.split(' ').count();
        assert!(q0 < 50 && q0 > 25, "{q0}");
        assert!(pairs.iter().all(|p| !p.query_text.is_empty()));
    }
}
