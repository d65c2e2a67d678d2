use clapdesk::audio::{log_mel, MelConfig, Waveform};
use clapdesk::config::RunConfig;
use clapdesk::contrastive::ClapModel;
use clapdesk::corpus::AudioFeatures;
use clapdesk::text::{TokenSequence, EOT};
use clapdesk::{ParameterStore, Tape, Tensor};
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParameterStore::new();
    store.insert("a", Tensor::randn(vec![256, 256], 1.0, &mut rng)).unwrap();
    store.insert("b", Tensor::randn(vec![256, 256], 1.0, &mut rng)).unwrap();
    c.bench_function("matmul_256_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (x, y) = (t.param(&store, "a").unwrap(), t.param(&store, "b").unwrap());
            let z = t.matmul(x, y).unwrap();
            let s = t.sum_all(z);
            black_box(t.backward(s).unwrap());
        })
    });
}

fn mel(c: &mut Criterion) {
    let cfg = MelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let samples: Vec<f64> = (0..cfg.clip_samples()).map(|_| rng.random_range(-0.5..0.5)).collect();
    let w = Waveform::new(samples, cfg.sample_rate_hz).unwrap();
    c.bench_function("log_mel_7s_clip", |bench| bench.iter(|| black_box(log_mel(&w, &cfg).unwrap())));
}

fn clap_step(c: &mut Criterion) {
    let cfg = RunConfig::reference();
    let model = ClapModel::new(&cfg.audio_encoder, &cfg.text_encoder, &cfg.clap, 256).unwrap();
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    model.init(&mut store, &mut rng).unwrap();
    let frames = cfg.mel.frame_count(cfg.mel.clip_samples()).unwrap();
    let feats: Vec<AudioFeatures> = (0..8)
        .map(|_| AudioFeatures {
            n_mels: cfg.mel.n_mels,
            n_frames: frames,
            values: (0..cfg.mel.n_mels * frames).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let seqs: Vec<TokenSequence> = (0..8)
        .map(|i| TokenSequence::from_ids(vec![3 + i, 4 + i, 5, EOT]).unwrap())
        .collect();
    let a: Vec<&AudioFeatures> = feats.iter().collect();
    let s: Vec<&TokenSequence> = seqs.iter().collect();
    c.bench_function("clap_loss_batch8_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let l = model.loss(&mut t, &store, &a, &s).unwrap();
            black_box(t.backward(l).unwrap());
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matmul, mel, clap_step
}
criterion_main!(benches);
