use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use msm_core::corpus::{Document, Sentence};
use msm_core::loss::{msm_graph_loss, AlphaMode, LossConfig, MsmBatch};
use msm_core::model::{DocSharing, ModelConfig, MsmModel};
use msm_core::numerics::{Graph, ParamStore, Segment, Tensor};
use msm_core::retriever::{encode_batch, search, EncodedCorpus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 2000;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn random_sentence(rng: &mut ChaCha8Rng) -> Sentence {
    let n = rng.random_range(6..=12);
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(5..VOCAB)).collect();
    Sentence::from_content(&ids)
}

fn random_docs(rng: &mut ChaCha8Rng, count: usize) -> Vec<Document> {
    (0..count)
        .map(|i| {
            let lang = if i % 2 == 0 { "L0" } else { "L1" };
            Document {
                doc_id: format!("{lang}-{i}"),
                lang: lang.to_string(),
                sentences: (0..rng.random_range(4..=8)).map(|_| random_sentence(rng)).collect(),
            }
        })
        .collect()
}

fn model(sharing: DocSharing) -> MsmModel {
    let config = ModelConfig {
        doc_sharing: sharing,
        ..ModelConfig::new(VOCAB)
    };
    MsmModel::new(config, 1).unwrap()
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (rows, d) = (64 * 12, 64);
    let q = random_tensor(&mut rng, rows, d);
    let segments: Vec<Segment> = (0..64).map(|i| Segment { start: i * 12, len: 12 }).collect();
    let params = ParamStore::default();
    c.bench_function("attention_forward_64x12_d64", |b| {
        b.iter(|| {
            let mut g = Graph::new(&params);
            let x = g.input(q.clone());
            let y = g.attention(x, x, x, &segments, 4).unwrap();
            black_box(g.value(y).data()[0]);
        })
    });
}

fn sentence_encoder(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = model(DocSharing::ShareAll);
    let sentences: Vec<Sentence> = (0..64).map(|_| random_sentence(&mut rng)).collect();
    let refs: Vec<&Sentence> = sentences.iter().collect();
    c.bench_function("encode_64_sentences_d64", |b| {
        b.iter(|| black_box(encode_batch(&m, &refs).unwrap()))
    });
}

fn msm_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let docs = random_docs(&mut rng, 16);
    let refs: Vec<&Document> = docs.iter().collect();
    let loss = LossConfig::default();
    for sharing in [DocSharing::ShareAll, DocSharing::SepDocHead] {
        let m = model(sharing);
        let name = format!("msm_forward_backward_16docs_{sharing}");
        c.bench_function(&name, |b| {
            b.iter_batched(
                || MsmBatch::build(&refs, &m.config, 512, &mut ChaCha8Rng::seed_from_u64(3)).unwrap(),
                |batch| {
                    let mut g = Graph::new(&m.params);
                    let out = msm_graph_loss(&mut g, &m, &batch, &loss, &AlphaMode::Detached).unwrap();
                    black_box(g.backward(out.loss).unwrap());
                },
                BatchSize::SmallInput,
            )
        });
    }
}

fn exact_search(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let corpus = EncodedCorpus {
        ids: (0..5000).map(|i| format!("p{i}")).collect(),
        vectors: random_tensor(&mut rng, 5000, 64),
    };
    let queries = random_tensor(&mut rng, 64, 64);
    c.bench_function("search_64q_5000p_top100", |b| {
        b.iter(|| black_box(search(&queries, &corpus, 100).unwrap()))
    });
}

criterion_group!(benches, attention, sentence_encoder, msm_step, exact_search);
criterion_main!(benches);
