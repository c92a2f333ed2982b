use avsr::assembly::Task;
use avsr::checkpoint::{self, Scope};
use avsr::data::{generate_corpus, load_corpus, save_corpus, Snr, Split, SplitSizes, ToyCorpusSpec};
use avsr::eval::{evaluate, noise_sweep, EvalConfig};
use avsr::lora::LoraConfig;
use avsr::model::{AvsrModel, ModelConfig};
use avsr::train::{train, TrainConfig};

fn spec() -> ToyCorpusSpec {
    ToyCorpusSpec {
        vocab_size: 8,
        min_words: 2,
        max_words: 5,
        d_audio: 6,
        d_video: 4,
        seed: 11,
        ..ToyCorpusSpec::default()
    }
}

fn small(task: Task) -> ModelConfig {
    let s = spec();
    let mut cfg = ModelConfig::toy(task, s.vocab_size, s.d_audio, s.d_video);
    cfg.decoder.n_layers = 1;
    cfg.decoder.d_model = 16;
    cfg.decoder.n_heads = 2;
    for e in [&mut cfg.audio_encoder, &mut cfg.video_encoder] {
        e.d_model = 8;
        e.n_layers = 1;
        e.n_heads = 2;
    }
    cfg.k_audio = 2;
    cfg.k_video = 1;
    cfg.llm_lora = LoraConfig::with_rank(4);
    cfg
}

fn scratch(name: &str) -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("avsr-pipeline-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

#[test]
fn disk_round_trip_then_train_and_restore() {
    let corpus = generate_corpus(&spec(), SplitSizes { train: 40, valid: 4, test: 8 }).unwrap();
    let dir = scratch("corpus");
    save_corpus(&corpus, &dir, false).unwrap();
    let loaded = load_corpus(&dir).unwrap();
    assert_eq!(loaded, corpus);

    let mut model = AvsrModel::<f32>::new(small(Task::Avsr)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        lr_peak: Some(3e-3),
        ..TrainConfig::default()
    };
    let report = train(&mut model, &loaded, &cfg, |_| {}).unwrap();
    assert!(report.frozen_unchanged());
    assert_eq!(report.epochs.len(), 3);
    let last = report.epochs.last().unwrap().probe_loss;
    assert!(last < report.initial_probe_loss, "{last} vs {}", report.initial_probe_loss);

    let eval = EvalConfig {
        greedy: true,
        ..EvalConfig::default()
    };
    let before = evaluate(&model, &loaded, &eval).unwrap();
    let path = dir.join("model.ckpt");
    checkpoint::save(&model, &path, Scope::Trainable).unwrap();
    let restored = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(evaluate(&restored, &loaded, &eval).unwrap(), before);
    assert_eq!(restored.store.frozen_digest(), model.store.frozen_digest());

    // Merged adapters decode the same text.
    let mut merged = restored.clone();
    merged.merge_lora().unwrap();
    let m = evaluate(&merged, &loaded, &eval).unwrap();
    let same = m
        .utterances
        .iter()
        .zip(&before.utterances)
        .filter(|(a, b)| a.hypothesis == b.hypothesis)
        .count();
    assert!(same + 1 >= before.n_utts, "{same} of {}", before.n_utts);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn noise_sweep_layout_and_clean_column() {
    let corpus = generate_corpus(&spec(), SplitSizes { train: 12, valid: 0, test: 5 }).unwrap();
    let asr = AvsrModel::<f32>::new(small(Task::Asr)).unwrap();
    let avsr = AvsrModel::<f32>::new(small(Task::Avsr)).unwrap();
    let eval = EvalConfig {
        greedy: true,
        ..EvalConfig::default()
    };
    let snrs = [Snr::CLEAN, Snr(0.0), Snr(-5.0)];
    let (table, records) = noise_sweep(&[&asr, &avsr], &corpus, &snrs, &eval).unwrap();
    assert_eq!(records.len(), 6);
    assert_eq!(table.rows.len(), 2);
    assert_eq!((table.rows[0].k_a, table.rows[0].k_v), (Some(2), None));
    assert_eq!((table.rows[1].k_a, table.rows[1].k_v), (Some(2), Some(1)));
    let clean = evaluate(&asr, &corpus, &eval).unwrap();
    assert_eq!(records[0].wer, avsr::eval::round2(clean.wer));
    let text = table.render();
    assert!(text.contains('∞') && text.contains('/'), "{text}");
    assert_eq!(corpus.split_len(Split::Test), records[0].n_utts);
}

#[test]
fn video_only_model_ignores_audio_noise() {
    let corpus = generate_corpus(&spec(), SplitSizes { train: 12, valid: 0, test: 5 }).unwrap();
    let vsr = AvsrModel::<f32>::new(small(Task::Vsr)).unwrap();
    let eval = |snr| EvalConfig {
        greedy: true,
        snr,
        ..EvalConfig::default()
    };
    let clean = evaluate(&vsr, &corpus, &eval(Snr::CLEAN)).unwrap();
    let noisy = evaluate(&vsr, &corpus, &eval(Snr(-5.0))).unwrap();
    assert_eq!(clean, noisy);
}
