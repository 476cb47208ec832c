//! Sequential versus rayon execution for the two data-parallel hot loops:
//! scoring one query's candidate list and a mini-batch training step.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use gazby::encoder::EncoderConfig;
use gazby::harness::{SynthConfig, SyntheticCorpus};
use gazby::parallel::Execution;
use gazby::ranker::{train_ranker, CrossEncoder, CrossEncoderConfig, Ranker, RankerTrainConfig};

fn desk_ranker(corpus: &SyntheticCorpus) -> CrossEncoder {
    let cfg = CrossEncoderConfig {
        encoder: EncoderConfig {
            layers: 2,
            heads: 4,
            d_model: 32,
            d_ff: 64,
            max_len: 64,
            attn_dropout: 0.0,
        },
        max_len: 64,
        ..CrossEncoderConfig::default()
    };
    CrossEncoder::new(cfg, corpus.tokenizer(), 0).expect("desk config")
}

fn bench(c: &mut Criterion) {
    let corpus = SyntheticCorpus::generate(&SynthConfig {
        triples: 64,
        gaze_sentences: 0,
        ..SynthConfig::default()
    })
    .expect("synthetic corpus");
    let model = desk_ranker(&corpus);
    let docs = corpus.documents();
    let (qid, cands) = corpus.candidates.iter().next().expect("a query");
    let query = &corpus.queries.iter().find(|q| &q.id == qid).expect("query text").text;
    let texts: Vec<&str> = cands.iter().map(|d| docs[d.as_str()]).collect();

    let mut group = c.benchmark_group("rerank_20_candidates");
    group.measurement_time(Duration::from_secs(10));
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| model.score_candidates(query, &texts, exec).expect("scores"))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("train_step_batch_16");
    group.sample_size(10);
    group.measurement_time(Duration::from_secs(10));
    for exec in [Execution::Sequential, Execution::Parallel] {
        let cfg = RankerTrainConfig {
            batch_size: 16,
            max_steps: Some(1),
            lr: 1e-3,
            exec,
            ..RankerTrainConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &cfg, |b, cfg| {
            b.iter_batched(
                || model.clone(),
                |mut m| train_ranker(&mut m, &corpus.triples, cfg).expect("step"),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
