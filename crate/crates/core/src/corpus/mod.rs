//! Tokenisation, sentence/document segmentation, synthetic parallel corpora,
//! retrieval pairs and MLM masking.

pub mod io;
mod mlm;
mod pairs;
mod synthetic;

use std::collections::HashMap;

use crate::error::{Error, Result};

pub use mlm::{make_mlm_mask, MlmMaskedBatch};
pub use pairs::{make_retrieval_pairs, PairOptions, PassageWindow, RetrievalPair};
pub use synthetic::{
    generate_synthetic_corpus, surface_token, AlignmentRow, LatentDocument, SyntheticCorpus,
    SyntheticCorpusSpec,
};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Content tokens kept per sentence.
pub const MAX_SENTENCE_TOKENS: usize = 64;
/// Sentences per document after splitting.
pub const MAX_DOC_SENTENCES: usize = 32;
/// `[CLS]` + content + `[SEP]`.
pub const MAX_SEQUENCE_LEN: usize = MAX_SENTENCE_TOKENS + 2;

/// Frequency-ranked whitespace vocabulary with the five reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::invalid("vocabulary must start with the reserved tokens"));
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if id_of.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, id_of })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, `[UNK]` when absent.
    pub fn id(&self, token: &str) -> usize {
        self.id_of.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Rank whitespace tokens by frequency (ties lexicographic) and keep the top
/// `max_size - 5` after the reserved tokens.
pub fn build_vocab<S: AsRef<str>>(raw_corpus: &[S], max_size: usize) -> Result<Vocab> {
    if max_size < 16 {
        return Err(Error::invalid(format!("max_size {max_size} < 16")));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in raw_corpus {
        for tok in line.as_ref().split_whitespace() {
            if !RESERVED.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        ranked
            .into_iter()
            .take(max_size - RESERVED.len())
            .map(|(t, _)| t.to_string()),
    );
    Vocab::from_tokens(tokens)
}

/// `[CLS] content... [SEP]`, content capped at [`MAX_SENTENCE_TOKENS`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sentence {
    token_ids: Vec<usize>,
}

impl Sentence {
    /// Wrap content ids; anything past the cap is dropped.
    pub fn from_content(content: &[usize]) -> Self {
        let kept = &content[..content.len().min(MAX_SENTENCE_TOKENS)];
        let mut token_ids = Vec::with_capacity(kept.len() + 2);
        token_ids.push(CLS);
        token_ids.extend_from_slice(kept);
        token_ids.push(SEP);
        Self { token_ids }
    }

    pub fn from_text(text: &str, vocab: &Vocab) -> Self {
        Self::from_content(&vocab.encode(text))
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.token_ids
    }

    pub fn content(&self) -> &[usize] {
        &self.token_ids[1..self.token_ids.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content().is_empty()
    }
}

/// Untokenised document as stored on disk: one sentence per line of `text`.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub lang: String,
    pub text: String,
}

impl RawDocument {
    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.text.lines().map(str::trim).filter(|l| !l.is_empty())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub lang: String,
    pub sentences: Vec<Sentence>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// One sentence per non-empty line; documents longer than
/// [`MAX_DOC_SENTENCES`] become consecutive chunks `doc_id#0`, `doc_id#1`, ...
pub fn segment_and_split(raw: &RawDocument, vocab: &Vocab) -> Result<Vec<Document>> {
    let sentences: Vec<Sentence> = raw
        .sentences()
        .map(|line| Sentence::from_text(line, vocab))
        .collect();
    if sentences.is_empty() {
        return Err(Error::EmptyDocument);
    }
    if sentences.len() <= MAX_DOC_SENTENCES {
        return Ok(vec![Document {
            doc_id: raw.doc_id.clone(),
            lang: raw.lang.clone(),
            sentences,
        }]);
    }
    Ok(sentences
        .chunks(MAX_DOC_SENTENCES)
        .enumerate()
        .map(|(i, chunk)| Document {
            doc_id: format!("{}#{i}", raw.doc_id),
            lang: raw.lang.clone(),
            sentences: chunk.to_vec(),
        })
        .collect())
}

pub fn segment_all(raw: &[RawDocument], vocab: &Vocab) -> Result<Vec<Document>> {
    let mut out = Vec::with_capacity(raw.len());
    for doc in raw {
        out.extend(segment_and_split(doc, vocab)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(text: &str) -> RawDocument {
        RawDocument {
            doc_id: "d".into(),
            lang: "L0".into(),
            text: text.into(),
        }
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = build_vocab(&["a b", "a c"], 16).unwrap();
        assert_eq!(&v.tokens()[..5], &RESERVED);
        assert_eq!(v.token(5), "a");
        assert_eq!(v.token(6), "b");
        assert_eq!(v.token(7), "c");
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn single_type_corpus() {
        let v = build_vocab(&["x"; 7], 16).unwrap();
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(build_vocab(&empty, 16), Err(Error::EmptyCorpus)));
        assert!(matches!(build_vocab(&["  "], 16), Err(Error::EmptyCorpus)));
        assert!(build_vocab(&["a"], 8).is_err());
    }

    #[test]
    fn seventy_sentences_split_greedily() {
        let text: Vec<String> = (0..70).map(|i| format!("w{i}")).collect();
        let v = build_vocab(&text, 128).unwrap();
        let docs = segment_and_split(&raw(&text.join("\n")), &v).unwrap();
        let sizes: Vec<usize> = docs.iter().map(Document::len).collect();
        assert_eq!(sizes, vec![32, 32, 6]);
        assert_eq!(docs[2].doc_id, "d#2");
        assert_eq!(v.decode(docs[1].sentences[0].content()), "w32");
    }

    #[test]
    fn long_sentence_truncated_to_cap() {
        let line: Vec<String> = (0..100).map(|i| format!("t{i}")).collect();
        let line = line.join(" ");
        let v = build_vocab(&[line.as_str()], 128).unwrap();
        let docs = segment_and_split(&raw(&line), &v).unwrap();
        assert_eq!(docs.len(), 1);
        let s = &docs[0].sentences[0];
        assert_eq!(s.content().len(), 64);
        assert_eq!(s.token_ids()[0], CLS);
        assert_eq!(*s.token_ids().last().unwrap(), SEP);
        assert_eq!(v.token(s.content()[63]), "t63");
    }

    #[test]
    fn single_sentence_and_empty_documents() {
        let v = build_vocab(&["a b"], 16).unwrap();
        let docs = segment_and_split(&raw("a b\n\n"), &v).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].len(), 1);
        assert!(matches!(
            segment_and_split(&raw("\n  \n"), &v),
            Err(Error::EmptyDocument)
        ));
    }
}
