//! Sequential vs rayon execution of the two data-parallel hot paths.
//! Without the `parallel` feature both variants run sequentially.

use std::hint::black_box;

use biaffine::exec::Execution;
use biaffine::model::{ModelDims, Parser};
use biaffine::synth::{generate_treebank, GrammarSpec, DEFAULT_CLASS_SIZES};
use biaffine::trainer::{batch_gradient, Noise};
use biaffine::vocab::{build_vocab, encode_sentence};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn setup() -> (Parser, biaffine::conllu::Treebank) {
    let g = GrammarSpec::base(DEFAULT_CLASS_SIZES, 3);
    let tb = generate_treebank(&g, 32, 4).unwrap();
    let vocab = build_vocab(&tb, 1);
    (Parser::new(vocab, &ModelDims::default(), 5), tb)
}

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn gradient(c: &mut Criterion) {
    let (parser, tb) = setup();
    let encoded: Vec<_> = tb.sentences.iter().map(|s| encode_sentence(&parser.vocab, s).unwrap()).collect();
    let batch: Vec<_> = encoded.iter().take(16).collect();
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| batch_gradient(&parser.params, black_box(&batch), 1e-6, Noise::On { rate: 0.33, stream: 1 }, exec).unwrap())
        });
    }
    group.finish();
}

fn parsing(c: &mut Criterion) {
    let (parser, tb) = setup();
    let mut group = c.benchmark_group("parse_treebank");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| parser.parse_treebank(black_box(&tb), true, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gradient, parsing);
criterion_main!(benches);
