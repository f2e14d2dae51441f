use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use adrcm_bench::{entity, kb, query};
use adrcm_core::kb::{build_index, chunk_text, retrieve, ChunkParams, RetrievalOptions, ScopeMode};
use adrcm_core::llm::HashEmbedder;

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieve");
    for docs in [1_000, 10_000] {
        let index = build_index(&kb(7, docs, 500, 48), &HashEmbedder, ChunkParams::default()).unwrap();
        let (head, tail) = (entity("H", 3), entity("T", 11));
        let q = query(1);
        for (name, scope) in [("cui", ScopeMode::Cui), ("unscoped", ScopeMode::Unscoped)] {
            let options = RetrievalOptions { k: 4, scope, per_entity_quota: None };
            group.bench_with_input(BenchmarkId::new(name, docs), &index, |b, index| {
                b.iter(|| retrieve(index, &head, &tail, black_box(&q), &HashEmbedder, &options).unwrap())
            });
        }
    }
    group.finish();
}

fn indexing(c: &mut Criterion) {
    let docs = kb(9, 2_000, 200, 600);
    c.bench_function("build_index/2000x600", |b| {
        b.iter(|| build_index(black_box(&docs), &HashEmbedder, ChunkParams::default()).unwrap())
    });
    let long = docs.iter().map(|d| d.text.as_str()).collect::<Vec<_>>().join(" ");
    c.bench_function("chunk_text/1.2M tokens", |b| b.iter(|| chunk_text(black_box(&long), 256, 32).unwrap()));
}

criterion_group!(benches, retrieval, indexing);
criterion_main!(benches);
