use std::collections::{BTreeMap, BTreeSet, HashMap};

use msm_core::numerics::Tensor;
use msm_core::retriever::{
    evaluate, map_at_k, mrr_at_k, read_qrels, read_run, read_vectors, recall_at_k,
    recall_at_kilotokens, search, write_qrels, write_run, write_vectors, EncodedCorpus, Metric,
    Qrels, Run,
};
use proptest::prelude::*;

fn brute_force(queries: &Tensor, corpus: &EncodedCorpus, k: usize) -> Vec<Vec<(String, f64)>> {
    (0..queries.rows())
        .map(|q| {
            let mut scored: Vec<(String, f64)> = corpus
                .ids
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    let s = queries.row(q).iter().zip(corpus.vectors.row(i)).map(|(a, b)| a * b).sum();
                    (id.clone(), s)
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            scored.truncate(k);
            scored
        })
        .collect()
}

fn int_matrix(rows: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3i32..=3, rows * d)
        .prop_map(move |v| Tensor::new(vec![rows, d], v.into_iter().map(f64::from).collect()).unwrap())
}

fn ranked_ids(n: usize) -> impl Strategy<Value = Vec<String>> {
    Just((0..n).map(|i| format!("p{i}")).collect::<Vec<_>>()).prop_shuffle()
}

fn as_run(ids: &[String]) -> Run {
    let ranked = ids.iter().enumerate().map(|(i, d)| (d.clone(), -(i as f64))).collect();
    BTreeMap::from([("q".to_string(), ranked)])
}

fn as_qrels(rel: &[usize]) -> Qrels {
    BTreeMap::from([("q".to_string(), rel.iter().map(|i| format!("p{i}")).collect())])
}

proptest! {
    // Small integer entries make every dot product exact, so ties are real
    // ties and the id tie-break decides.
    #[test]
    fn search_matches_brute_force(
        (q, v, k) in (1usize..5, 1usize..30, 1usize..6, 1usize..35)
            .prop_flat_map(|(nq, np, d, k)| (int_matrix(nq, d), int_matrix(np, d), Just(k))),
    ) {
        let np = v.rows();
        let corpus = EncodedCorpus { ids: (0..np).map(|i| format!("d{:03}", (i * 7) % 101)).collect(), vectors: v };
        let got = search(&q, &corpus, k).unwrap();
        prop_assert_eq!(got, brute_force(&q, &corpus, k));
    }

    #[test]
    fn metrics_stay_in_unit_interval_and_grow_with_k(
        ids in ranked_ids(12),
        rel in prop::collection::btree_set(0usize..12, 1..5),
    ) {
        let rel: Vec<usize> = rel.into_iter().collect();
        let (run, qrels) = (as_run(&ids), as_qrels(&rel));
        let mut last_recall = 0.0;
        for k in 1..=12 {
            let r = recall_at_k(&run, &qrels, k).unwrap();
            let m = mrr_at_k(&run, &qrels, k).unwrap();
            let ap = map_at_k(&run, &qrels, k).unwrap();
            for x in [r, m, ap] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            prop_assert!(r >= last_recall);
            prop_assert_eq!(m > 0.0, r > 0.0);
            last_recall = r;
        }
        prop_assert_eq!(last_recall, 1.0);
    }

    #[test]
    fn token_budget_recall_matches_its_rank_cutoff(
        ids in ranked_ids(10),
        rel in prop::collection::btree_set(0usize..10, 1..4),
        lens in prop::collection::vec(1usize..50, 10),
        budget in 1usize..300,
    ) {
        let rel: Vec<usize> = rel.into_iter().collect();
        let (run, qrels) = (as_run(&ids), as_qrels(&rel));
        let lengths: HashMap<String, usize> = (0..10).map(|i| (format!("p{i}"), lens[i])).collect();
        // Number of passages read before the budget is reached.
        let mut used = 0;
        let mut cutoff = 0;
        for id in &ids {
            if used >= budget { break; }
            used += lengths[id];
            cutoff += 1;
        }
        let got = recall_at_kilotokens(&run, &qrels, &lengths, budget).unwrap();
        prop_assert_eq!(got, recall_at_k(&run, &qrels, cutoff).unwrap());
    }
}

#[test]
fn queries_missing_from_the_run_score_zero() {
    let run: Run = BTreeMap::from([("a".to_string(), vec![("x".to_string(), 1.0)])]);
    let qrels: Qrels = BTreeMap::from([
        ("a".to_string(), BTreeSet::from(["x".to_string()])),
        ("b".to_string(), BTreeSet::from(["y".to_string()])),
    ]);
    assert_eq!(mrr_at_k(&run, &qrels, 10).unwrap(), 0.5);
    assert_eq!(recall_at_k(&run, &qrels, 10).unwrap(), 0.5);
}

#[test]
fn token_budget_needs_lengths() {
    let run = as_run(&["p0".to_string()]);
    let qrels = as_qrels(&[0]);
    assert!(evaluate(&run, &qrels, &[Metric::KiloTokenRecall(1000)], None).is_err());
    assert!(recall_at_kilotokens(&run, &qrels, &HashMap::new(), 1000).is_err());
}

#[test]
fn trec_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run: Run = BTreeMap::from([
        ("q1".to_string(), vec![("d2".to_string(), 3.25), ("d1".to_string(), -0.1 + 0.2)]),
        ("q2".to_string(), vec![("d9".to_string(), 1e-300)]),
    ]);
    let p = dir.path().join("run.trec");
    write_run(&p, &run, "tag").unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next().unwrap(), "q1 Q0 d2 1 3.25 tag");
    assert_eq!(read_run(&p).unwrap(), run);

    let qrels: Qrels = BTreeMap::from([("q1".to_string(), BTreeSet::from(["d1".to_string(), "d3".to_string()]))]);
    let p = dir.path().join("qrels");
    write_qrels(&p, &qrels).unwrap();
    assert_eq!(read_qrels(&p).unwrap(), qrels);

    let corpus = EncodedCorpus {
        ids: vec!["a".into(), "b".into()],
        vectors: Tensor::new(vec![2, 3], vec![0.1, -2.0, 1.0 / 3.0, 5e-17, 0.0, -7.25]).unwrap(),
    };
    let p = dir.path().join("vec.tsv");
    write_vectors(&p, &corpus).unwrap();
    assert_eq!(read_vectors(&p).unwrap(), corpus);
}

#[test]
fn qrels_with_zero_grade_are_not_relevant() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("qrels");
    std::fs::write(&p, "q1 d1 1\nq1 d2 0\n").unwrap();
    let qrels = read_qrels(&p).unwrap();
    assert_eq!(qrels["q1"], BTreeSet::from(["d1".to_string()]));
}
