use super::*;
use crate::audio::MelConfig;
use crate::corpus::{generate_corpus, CorpusConfig};
use crate::numerics::{grad_check, GradCheckOptions};
use crate::text::UNK;

fn tiny_model(vocab: usize, prefix_tokens: usize) -> PretrainModel {
    let audio = AudioEncoderConfig {
        patch_freq: 2,
        patch_time: 3,
        width: 8,
        depth: 1,
        heads: 2,
        max_patches: 8,
        input_center: 0.0,
        input_scale: 1.0,
    };
    let text = TextEncoderConfig {
        width: 8,
        depth: 1,
        heads: 2,
        max_text_len: 12,
        max_prefix: 4,
    };
    let mapper = MapperConfig {
        prefix_tokens,
        hidden: 16,
    };
    PretrainModel::new(&audio, &text, &mapper, vocab).unwrap()
}

fn random_features(n: usize, seed: u64) -> Vec<AudioFeatures> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| AudioFeatures {
            n_mels: 4,
            n_frames: 6,
            values: (0..24).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        })
        .collect()
}

fn target(ids: &[usize]) -> CaptionTarget {
    CaptionTarget::new(ids.to_vec()).unwrap()
}

fn small_manifest() -> crate::corpus::Manifest {
    let cfg = CorpusConfig {
        train: 24,
        val: 4,
        test: 4,
        ..Default::default()
    };
    generate_corpus(&cfg, &MelConfig::default()).unwrap()
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - z).collect()
}

#[test]
fn target_validation() {
    assert!(matches!(CaptionTarget::new(vec![]), Err(Error::Contract(_))));
    assert!(CaptionTarget::new(vec![3, 4]).is_err());
    assert!(CaptionTarget::new(vec![3, EOT, 4, EOT]).is_err());
    assert!(CaptionTarget::new(vec![3, PAD, EOT]).is_err());
    assert_eq!(target(&[EOT]).len(), 1);
}

#[test]
fn teacher_inputs_shift_and_pad() {
    let a = target(&[5, 6, 7, EOT]);
    let b = target(&[8, EOT]);
    assert_eq!(teacher_inputs(&[&a, &b]), vec![vec![5, 6, 7], vec![8, PAD, PAD]]);
}

#[test]
fn uniform_logits_give_length_times_ln_vocab() {
    for (vocab, len, p) in [(7usize, 1usize, 1usize), (50, 4, 3), (13, 9, 8)] {
        let ids: Vec<usize> = (0..len - 1).map(|i| 3 + i % (vocab - 3)).chain([EOT]).collect();
        let t = target(&ids);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::filled(vec![2, p + len - 1, vocab], 0.3));
        let loss = captioning_loss_from_logits(&mut tape, logits, &[&t, &t], p).unwrap();
        let expected = len as f64 * (vocab as f64).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-9);
    }
}

#[test]
fn loss_matches_per_token_oracle() {
    let vocab = 9;
    let p = 2;
    let targets = [target(&[3, 4, 5, EOT]), target(&[6, EOT])];
    let refs: Vec<&CaptionTarget> = targets.iter().collect();
    let seq = p + 3;
    let logits = Tensor::randn(vec![2, seq, vocab], 1.5, &mut ChaCha8Rng::seed_from_u64(1));
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let loss = captioning_loss_from_logits(&mut tape, v, &refs, p).unwrap();
    let mut total = 0.0;
    for (b, t) in targets.iter().enumerate() {
        for (j, &id) in t.ids().iter().enumerate() {
            let pos = p - 1 + j;
            let start = (b * seq + pos) * vocab;
            total -= log_softmax_row(&logits.data()[start..start + vocab])[id];
        }
    }
    assert!((tape.value(loss).item() - total / 2.0).abs() < 1e-12);
}

#[test]
fn confident_logits_give_near_zero_loss() {
    let t = target(&[3, EOT]);
    let mut logits = Tensor::zeros(vec![1, 2, 5]);
    logits.data_mut()[3] = 60.0;
    logits.data_mut()[5 + EOT] = 60.0;
    let mut tape = Tape::new();
    let v = tape.constant(logits);
    let loss = captioning_loss_from_logits(&mut tape, v, &[&t], 1).unwrap();
    assert!(tape.value(loss).item() < 1e-20);
}

#[test]
fn single_token_vocabulary_gives_zero_loss() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::randn(vec![2, 4, 1], 3.0, &mut ChaCha8Rng::seed_from_u64(2)));
    let ids: [&[usize]; 2] = [&[0, 0, 0], &[0]];
    let loss = summed_target_nll(&mut tape, logits, &ids, 2).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
}

#[test]
fn loss_rejects_bad_shapes() {
    let t = target(&[3, 4, EOT]);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(vec![1, 2, 6]));
    assert!(captioning_loss_from_logits(&mut tape, v, &[&t], 1).is_err());
    assert!(captioning_loss_from_logits(&mut tape, v, &[], 1).is_err());
    assert!(captioning_loss_from_logits(&mut tape, v, &[&t], 0).is_err());
}

#[test]
fn zero_mapper_weights_give_zero_prefix() {
    let mapper = MapperNetwork::new("m", 5, 3, &MapperConfig { prefix_tokens: 4, hidden: 7 }).unwrap();
    let mut store = ParameterStore::new();
    mapper.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let p = mapper.map_prefix(&store, &[0.3, -1.0, 2.0, 0.5, 0.1]).unwrap();
    assert_eq!(p.shape(), &[4, 3]);
    assert!(p.data().iter().all(|&x| x == 0.0));
}

#[test]
fn mapper_rows_are_grouped_per_input() {
    let mapper = MapperNetwork::new("m", 3, 2, &MapperConfig { prefix_tokens: 2, hidden: 5 }).unwrap();
    let mut store = ParameterStore::new();
    mapper.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let x = [[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]];
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::from_rows(&[x[0].to_vec(), x[1].to_vec()]).unwrap());
    let out = mapper.forward(&mut tape, &store, v).unwrap();
    let both = tape.value(out).clone();
    for (i, row) in x.iter().enumerate() {
        let single = mapper.map_prefix(&store, row).unwrap();
        assert_eq!(&both.data()[i * 4..(i + 1) * 4], single.data());
    }
}

#[test]
fn gradients_through_mapper_match_finite_differences() {
    let model = tiny_model(12, 2);
    let mut store = ParameterStore::new();
    model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let feats = random_features(2, 4);
    let targets = [target(&[3, 4, EOT]), target(&[5, EOT])];
    let report = grad_check(
        |tape: &mut Tape, s: &ParameterStore| {
            let a: Vec<&AudioFeatures> = feats.iter().collect();
            let t: Vec<&CaptionTarget> = targets.iter().collect();
            model.loss(tape, s, &a, &t)
        },
        &store,
        GradCheckOptions {
            max_elements: Some(8),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_err());
}

fn fit(model: &PretrainModel, store: &mut ParameterStore, feats: &[AudioFeatures], targets: &[CaptionTarget], steps: usize) -> f64 {
    let a: Vec<&AudioFeatures> = feats.iter().collect();
    let t: Vec<&CaptionTarget> = targets.iter().collect();
    let mut adam = AdamState::new(1e-2);
    let mut last = f64::INFINITY;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, store, &a, &t).unwrap();
        last = tape.value(loss).item();
        tape.backward_into(loss, store).unwrap();
        adam_step(store, &mut adam).unwrap();
    }
    last
}

fn pair_loss(model: &PretrainModel, store: &ParameterStore, feat: &AudioFeatures, t: &CaptionTarget) -> f64 {
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, store, &[feat], &[t]).unwrap();
    tape.value(loss).item()
}

#[test]
fn single_pair_is_memorized() {
    let model = tiny_model(12, 2);
    let mut store = ParameterStore::new();
    model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let feats = random_features(1, 6);
    let targets = [target(&[3, 7, 4, 9, EOT])];
    let start = pair_loss(&model, &store, &feats[0], &targets[0]);
    fit(&model, &mut store, &feats, &targets, 300);
    let end = pair_loss(&model, &store, &feats[0], &targets[0]);
    assert!(end < 0.1, "{start} -> {end}");
}

#[test]
fn conditioning_on_audio_matters() {
    let model = tiny_model(12, 2);
    let mut store = ParameterStore::new();
    model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let feats = random_features(2, 8);
    let targets = [target(&[3, 4, EOT]), target(&[5, 6, EOT])];
    fit(&model, &mut store, &feats, &targets, 400);
    let matched = pair_loss(&model, &store, &feats[0], &targets[0]) + pair_loss(&model, &store, &feats[1], &targets[1]);
    let swapped = pair_loss(&model, &store, &feats[0], &targets[1]) + pair_loss(&model, &store, &feats[1], &targets[0]);
    assert!(matched < 0.2, "{matched}");
    assert!(swapped > matched + 2.0, "{matched} vs {swapped}");
}

#[test]
fn templates_render_expected_text() {
    let m = small_manifest();
    let single = m.entries.iter().find(|e| e.is_single_event()).unwrap();
    let noun = &single.labels[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(
        TaskTemplate::Classification.render(single, &mut rng),
        format!("this is a sound of {noun}")
    );
    for _ in 0..20 {
        let qa = TaskTemplate::Qa.render(single, &mut rng);
        assert!(qa.starts_with("question ") && qa.contains(" answer "), "{qa}");
        let cap = TaskTemplate::Captioning.render(single, &mut rng);
        assert!(single.captions.contains(&cap));
    }
    let attr = TaskTemplate::Attributes.render(single, &mut rng);
    assert!(attr.ends_with(" sound") && attr.contains("pitched"), "{attr}");
    let mix = m.entries.iter().find(|e| !e.is_single_event()).unwrap();
    assert!(!TaskTemplate::Attributes.applies(mix));
    assert!(TaskTemplate::Classification.applies(mix));
}

#[test]
fn template_text_is_in_vocabulary() {
    let m = small_manifest();
    let vocab = Vocabulary::build(&template_words(), 200).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for e in &m.entries {
        for t in [TaskTemplate::Classification, TaskTemplate::Qa, TaskTemplate::Attributes] {
            if t.applies(e) {
                let target = CaptionTarget::from_text(&t.render(e, &mut rng), &vocab, 32).unwrap();
                assert!(!target.ids().contains(&UNK), "{}", t.render(e, &mut rng));
            }
        }
    }
}

fn run_small(seed: u64, epochs: usize) -> PretrainOutcome {
    run_small_with_init(seed, epochs).1
}

fn run_small_with_init(seed: u64, epochs: usize) -> (ParameterStore, PretrainOutcome) {
    let m = small_manifest();
    let entries: Vec<&ManifestEntry> = m.entries.iter().filter(|e| e.split == crate::corpus::Split::Train).collect();
    let mut texts = template_words();
    texts.extend(entries.iter().flat_map(|e| e.captions.iter().cloned()));
    let vocab = Vocabulary::build(&texts, 80).unwrap();
    let feats = random_features(entries.len(), 11);
    let audio: Vec<&AudioFeatures> = feats.iter().collect();
    let tasks: Vec<GenerationTask> = TaskTemplate::ALL
        .iter()
        .map(|&t| GenerationTask::from_entries(t, &entries))
        .collect();
    let model = tiny_model(vocab.len(), 2);
    let mut store = ParameterStore::new();
    model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let cfg = PretrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 3e-3,
        seed,
        ..Default::default()
    };
    let out = pretrain_audio_encoder(&model, store.clone(), &tasks, &entries, &audio, &vocab, &cfg).unwrap();
    (store, out)
}

#[test]
fn moving_average_loss_decreases() {
    let out = run_small(1, 10);
    let losses: Vec<f64> = out.history.iter().flat_map(|r| r.step_losses.iter().copied()).collect();
    assert!(losses.len() >= 100, "{}", losses.len());
    let first = losses[..50].iter().sum::<f64>() / 50.0;
    let last = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn pretraining_is_deterministic() {
    let a = run_small(2, 2);
    let b = run_small(2, 2);
    assert_eq!(a.store, b.store);
    assert_eq!(a.history, b.history);
}

#[test]
fn pretraining_touches_every_component() {
    let (before, out) = run_small_with_init(3, 1);
    let after = out.store;
    for prefix in ["audio.", "mapper.", "decoder."] {
        let changed = after
            .names()
            .filter(|n| n.starts_with(prefix))
            .any(|n| !after.values_bit_equal(&before, n));
        assert!(changed, "{prefix}");
    }
}

#[test]
fn prefix_longer_than_decoder_allows_is_rejected() {
    let audio = AudioEncoderConfig::default();
    let text = TextEncoderConfig::default();
    let mapper = MapperConfig {
        prefix_tokens: text.max_prefix + 1,
        hidden: 4,
    };
    assert!(matches!(PretrainModel::new(&audio, &text, &mapper, 20), Err(Error::Config(_))));
}
