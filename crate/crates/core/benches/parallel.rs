use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vin_core::diffusion::{draw_noise, loss_and_grads, sample, ChunkOrder, SampleOptions, TrainExample, TrainOptions};
use vin_core::harness::{ExperimentConfig, Trainer};
use vin_core::metrics::{estimate_video_flows, FlowParams};
use vin_core::model::GlobalMode;
use vin_core::numcore::Tensor;
use vin_core::par::Execution;
use vin_core::patchio::generate_synthetic;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_loss(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let tr = Trainer::new(&cfg).unwrap();
    let frames = cfg.data.frames;
    let meta = tr.model.meta(frames).unwrap();
    let layout = cfg.layout(frames).unwrap();
    let sched = cfg.schedule().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch: Vec<TrainExample> = (0..2)
        .map(|c| TrainExample { raw: Tensor::randn(&[meta.len(), cfg.model.voxel_len()], 0.5, &mut rng), class: c })
        .collect();
    let noise = draw_noise(&batch, &sched, &mut rng);
    let mut g = c.benchmark_group("loss_and_grads");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                loss_and_grads(&tr.model, &batch, &noise, &meta, &layout, &sched, TrainOptions { global: GlobalMode::Learned, exec })
                    .unwrap()
            })
        });
    }
    g.finish();
}

fn bench_sample(c: &mut Criterion) {
    let mut cfg = ExperimentConfig::default();
    cfg.set("schedule.steps", "6").unwrap();
    cfg.t_alpha = 3;
    let tr = Trainer::new(&cfg).unwrap();
    let frames = cfg.sample_frames;
    let layout = cfg.layout(frames).unwrap();
    let sched = cfg.schedule().unwrap();
    let mut g = c.benchmark_group("sample");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = SampleOptions { class: 0, fusion: cfg.fusion(), global: GlobalMode::Learned, order: ChunkOrder::Forward, exec };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sample(&tr.model, frames, &layout, &sched, &opts, 1).unwrap())
        });
    }
    g.finish();
}

fn bench_flow(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let v = generate_synthetic(&cfg.dataset(), 0).unwrap().video;
    let mut g = c.benchmark_group("optical_flow");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| estimate_video_flows(&v, FlowParams::default(), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_loss, bench_sample, bench_flow);
criterion_main!(benches);
