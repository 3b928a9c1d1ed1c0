//! Sequential versus rayon execution of the data-parallel hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use subitize::eval;
use subitize::nnet::model::{batch_loss_and_grads, ModelState, Sample, SubitNetSpec};
use subitize::nnet::Tensor;
use subitize::synth::{self, procedural, SynthConfig};
use subitize::{CountLabel, Execution};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch_gradients(c: &mut Criterion) {
    let spec = SubitNetSpec::default();
    let state = ModelState::fresh(&spec, 1).unwrap();
    let side = spec.input_side;
    let inputs: Vec<Tensor> = (0..32)
        .map(|i| {
            let data = (0..3 * side * side).map(|k| ((k * 31 + i * 7) % 97) as f32 / 48.0 - 1.0).collect();
            Tensor::new(vec![3, side, side], data).unwrap()
        })
        .collect();
    let batch: Vec<Sample> = inputs.iter().enumerate().map(|(i, input)| Sample { input, label: i % 5 }).collect();
    let mut g = c.benchmark_group("batch_loss_and_grads_32");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_loss_and_grads(&state, &batch, false, exec).unwrap())
        });
    }
    g.finish();
}

fn corpus_generation(c: &mut Criterion) {
    let lib = procedural::generate_library(&procedural::LibraryStyle::primary(), 8, 8, 3);
    let cfg = SynthConfig {
        canvas_size: 128,
        ..SynthConfig::default()
    };
    let mut g = c.benchmark_group("generate_corpus_40");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut n = 0;
                synth::generate_corpus(&lib, &cfg, 8, 5, true, exec, |_| {
                    n += 1;
                    Ok(())
                })
                .unwrap();
                n
            })
        });
    }
    g.finish();
}

fn chance_trials(c: &mut Criterion) {
    let labels: Vec<CountLabel> = (0..2000).map(|i| CountLabel::from_index(i % 5).unwrap()).collect();
    let mut g = c.benchmark_group("chance_baseline_20_trials");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| eval::chance_baseline(&labels, 20, 1, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batch_gradients, corpus_generation, chance_trials);
criterion_main!(benches);
