use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jzig::mesh::Location;
use jzig::model::ModelState;
use jzig::par::Execution;
use jzig::predict::{predict, PredictionRequest, Predictor};
use jzig::rng::stream;
use jzig::sampler::{run_chain, SamplerConfig};
use jzig::synth::{desk_priors, simulate_dataset, TrueConfig};
use jzig::validation::{jitter_study, JitterConfig};

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn prediction(c: &mut Criterion) {
    let cfg = TrueConfig {
        n_plots: 150,
        buffer_x: 3.0,
        buffer_yz: 3.0,
        ..TrueConfig::tiny()
    };
    let sim = simulate_dataset(&cfg, &mut stream(1)).unwrap();
    let model = sim.model().unwrap();
    let sampler = SamplerConfig {
        n_iterations: 300,
        n_burnin: 100,
        thin: 2,
        range_cap_factor: 2.0,
        ..SamplerConfig::default()
    };
    let post = run_chain(&model, &desk_priors(), &sampler).unwrap();
    let states: &[ModelState] = &post.states;

    let centers: Vec<Location> = sim.dataset.cells.iter().map(|c| c.center).collect();
    let ids: Vec<String> = sim.dataset.cells.iter().map(|c| c.cell_id.clone()).collect();
    let request = PredictionRequest::cell_centers(ids, &centers).unwrap();
    let predictor = Predictor::new(model.mesh_x(), model.mesh_yz(), request).unwrap();

    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| predict(&predictor, states, 7, exec).unwrap())
        });
    }
    group.finish();

    let jitter = JitterConfig {
        iterations: 8,
        ..JitterConfig::default()
    };
    let mut group = c.benchmark_group("jitter");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| jitter_study(&model, &post, &jitter, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, prediction);
criterion_main!(benches);
