use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ranked `(passage_id, score)` lists per query, best first.
pub type Run = BTreeMap<String, Vec<(String, f64)>>;

/// Relevant passage ids per query.
pub type Qrels = BTreeMap<String, BTreeSet<String>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Mrr(usize),
    Recall(usize),
    Map(usize),
    /// Recall within a budget of this many passage tokens.
    KiloTokenRecall(usize),
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown metric `{s}` (expected mrr@K, recall@K, map@K or r@Nkt)"));
        let (name, arg) = s.split_once('@').ok_or_else(bad)?;
        let num = |a: &str| a.parse::<usize>().ok().filter(|&k| k > 0).ok_or_else(bad);
        match name {
            "mrr" => Ok(Metric::Mrr(num(arg)?)),
            "recall" => Ok(Metric::Recall(num(arg)?)),
            "map" => Ok(Metric::Map(num(arg)?)),
            "r" => {
                let k = arg.strip_suffix("kt").ok_or_else(bad)?;
                Ok(Metric::KiloTokenRecall(num(k)? * 1000))
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
            Metric::Map(k) => write!(f, "map@{k}"),
            Metric::KiloTokenRecall(t) if t % 1000 == 0 => write!(f, "r@{}kt", t / 1000),
            Metric::KiloTokenRecall(t) => write!(f, "r@{t}t"),
        }
    }
}

/// Mean of `per_query` over judged queries that have at least one relevant
/// passage. Queries absent from the run score zero.
fn average(run: &Run, qrels: &Qrels, per_query: impl Fn(&[(String, f64)], &BTreeSet<String>) -> f64) -> Result<f64> {
    let empty = Vec::new();
    let mut total = 0.0;
    let mut n = 0usize;
    for (qid, rel) in qrels {
        if rel.is_empty() {
            continue;
        }
        total += per_query(run.get(qid).unwrap_or(&empty), rel);
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("qrels contain no relevant passages"));
    }
    Ok(total / n as f64)
}

pub fn mrr_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    average(run, qrels, |ranked, rel| {
        ranked
            .iter()
            .take(k)
            .position(|(d, _)| rel.contains(d))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    })
}

pub fn recall_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    average(run, qrels, |ranked, rel| {
        let hits = ranked.iter().take(k).filter(|(d, _)| rel.contains(d)).count();
        hits as f64 / rel.len() as f64
    })
}

/// Sum of precision at each relevant rank `i <= k`, divided by
/// `min(|relevant|, k)`.
pub fn map_at_k(run: &Run, qrels: &Qrels, k: usize) -> Result<f64> {
    average(run, qrels, |ranked, rel| {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (i, (d, _)) in ranked.iter().take(k).enumerate() {
            if rel.contains(d) {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
        }
        sum / rel.len().min(k) as f64
    })
}

/// Recall over the ranked prefix whose cumulative passage length first
/// reaches `budget` tokens; the passage that crosses the budget counts.
pub fn recall_at_kilotokens(
    run: &Run,
    qrels: &Qrels,
    lengths: &HashMap<String, usize>,
    budget: usize,
) -> Result<f64> {
    for ranked in run.values() {
        if let Some((d, _)) = ranked.iter().find(|(d, _)| !lengths.contains_key(d)) {
            return Err(Error::invalid(format!("no token length for passage `{d}`")));
        }
    }
    average(run, qrels, |ranked, rel| {
        let mut used = 0usize;
        let mut hits = 0usize;
        for (d, _) in ranked {
            if used >= budget {
                break;
            }
            used += lengths[d];
            if rel.contains(d) {
                hits += 1;
            }
        }
        hits as f64 / rel.len() as f64
    })
}

pub fn evaluate(
    run: &Run,
    qrels: &Qrels,
    metrics: &[Metric],
    lengths: Option<&HashMap<String, usize>>,
) -> Result<Vec<(Metric, f64)>> {
    metrics
        .iter()
        .map(|&m| {
            let v = match m {
                Metric::Mrr(k) => mrr_at_k(run, qrels, k)?,
                Metric::Recall(k) => recall_at_k(run, qrels, k)?,
                Metric::Map(k) => map_at_k(run, qrels, k)?,
                Metric::KiloTokenRecall(t) => {
                    let l = lengths.ok_or_else(|| {
                        Error::invalid(format!("{m} needs passage token lengths"))
                    })?;
                    recall_at_kilotokens(run, qrels, l, t)?
                }
            };
            Ok((m, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_names_round_trip() {
        for s in ["mrr@100", "recall@100", "map@20", "r@2kt"] {
            assert_eq!(s.parse::<Metric>().unwrap().to_string(), s);
        }
        assert_eq!("r@2kt".parse::<Metric>().unwrap(), Metric::KiloTokenRecall(2000));
        for bad in ["mrr", "mrr@0", "ndcg@10", "r@2k", "recall@x"] {
            assert!(bad.parse::<Metric>().is_err(), "{bad}");
        }
    }
}
