use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use avsr::assembly::{render_prompt, Task};
use avsr::checkpoint::{self, Scope};
use avsr::data::{generate_corpus, load_corpus, save_corpus, Corpus, Snr, Split};
use avsr::eval::{decode_utterance, evaluate as run_eval, noise_sweep, round2, with_k, EvalConfig, MetricRecord};
use avsr::model::{AvsrModel, ModelConfig};
use avsr::train::{train as run_training, TrainConfig};
use avsr::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::plot::{Chart, Series};

fn archive(cfg: &RunConfig, dir: &Path, name: &str) -> Result<()> {
    fs::write(dir.join(name), cfg.to_toml())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn append_jsonl<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut f = File::options().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(v)?)?;
    Ok(())
}

/// The config as actually run: corpus spec and sizes come from the corpus
/// on disk.
fn effective(cfg: &RunConfig, corpus: &Corpus) -> RunConfig {
    let mut c = cfg.clone();
    c.corpus = corpus.spec.clone();
    c.sizes.train = corpus.split_len(Split::Train);
    c.sizes.valid = corpus.split_len(Split::Valid);
    c.sizes.test = corpus.split_len(Split::Test);
    c
}

fn open_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let dir = cfg.corpus_dir();
    if !dir.join("corpus.json").exists() {
        return Err(Error::Config(format!(
            "no corpus at {}; run generate-data first",
            dir.display()
        )));
    }
    load_corpus(&dir)
}

/// The run directory, refusing to clobber earlier results unless forced.
fn fresh_dir(dir: &Path, marker: &str, force: bool) -> Result<()> {
    if dir.join(marker).exists() && !force {
        return Err(Error::Config(format!(
            "{} already holds {marker}; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn check_compatible(model: &ModelConfig, corpus: &Corpus) -> Result<()> {
    let s = &corpus.spec;
    if model.vocab_words != s.vocab_size || model.audio_encoder.d_in != s.d_audio || model.video_encoder.d_in != s.d_video {
        return Err(Error::Config(
            "checkpoint vocabulary or feature widths do not match the corpus".into(),
        ));
    }
    Ok(())
}

fn describe_decoding(e: &EvalConfig) -> String {
    if e.greedy {
        "greedy decoding".into()
    } else {
        format!(
            "beam width {}, temperature {}",
            e.decode.beam_width, e.decode.temperature
        )
    }
}

pub fn generate_data(cfg: &RunConfig, force: bool) -> Result<()> {
    cfg.corpus.validate()?;
    let corpus = generate_corpus(&cfg.corpus, cfg.sizes.into())?;
    let dir = cfg.corpus_dir();
    save_corpus(&corpus, &dir, force)?;
    archive(cfg, &dir, "run_config.toml")?;
    println!("corpus written to {}", dir.display());
    for s in [Split::Train, Split::Valid, Split::Test] {
        println!("  {:<5} {}", s.name(), corpus.split_len(s));
    }
    Ok(())
}

fn print_header(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<()> {
    let task = model_cfg.task;
    let lr = train_cfg.lr_peak.unwrap_or(task.default_lr());
    let source = if train_cfg.lr_peak.is_some() { "set" } else { "task default" };
    println!(
        "task {task}  K_a {}  K_v {}  lr {lr:e} ({source})  epochs {}  batch {}  seed {}",
        model_cfg.k_audio, model_cfg.k_video, train_cfg.epochs, train_cfg.batch_size, model_cfg.seed
    );
    let breakdown = model_cfg.trainable_breakdown()?;
    println!("trainable parameters {}", model_cfg.analytic_trainable()?);
    for (name, n) in breakdown {
        println!("  {name:<16} {n}");
    }
    Ok(())
}

/// Expected decoder tokens per epoch, averaging over the uniform
/// utterance-length distribution of the corpus spec.
fn token_budget(cfg: &RunConfig, model_cfg: &ModelConfig) -> (f64, f64) {
    let c = &cfg.corpus;
    let lens = c.min_words..=c.max_words;
    let n = lens.clone().count() as f64;
    let mean = lens
        .map(|w| {
            model_cfg.sequence_len(w * c.audio_frames_per_word, w * c.video_frames_per_word, w + 1) as f64
        })
        .sum::<f64>()
        / n;
    (mean, mean * cfg.sizes.train as f64)
}

pub fn train(cfg: &RunConfig, force: bool, dry_run: bool) -> Result<()> {
    cfg.validate()?;
    let model_cfg = cfg.model_config(cfg.task)?;
    let train_cfg = cfg.train_config();
    print_header(&model_cfg, &train_cfg)?;
    if dry_run {
        let (mean, per_epoch) = token_budget(cfg, &model_cfg);
        println!(
            "token budget: mean sequence {mean:.1} tokens, {per_epoch:.0} per epoch, {:.0} over {} epochs",
            per_epoch * train_cfg.epochs as f64,
            train_cfg.epochs
        );
        println!("dry run: config is valid, nothing trained");
        return Ok(());
    }

    let corpus = open_corpus(cfg)?;
    let cfg = &effective(cfg, &corpus);
    let model_cfg = cfg.model_config(cfg.task)?;
    let dir = cfg.out_dir();
    fresh_dir(&dir, "model.ckpt", force)?;
    let metrics = dir.join("train_metrics.jsonl");
    if metrics.exists() {
        fs::remove_file(&metrics)?;
    }
    archive(cfg, &dir, "run_config.toml")?;

    let mut model = AvsrModel::<f32>::new(model_cfg)?;
    let mut log_err = None;
    let report = run_training(&mut model, &corpus, &train_cfg, |e| {
        println!(
            "epoch {:>3}  train loss {:.4}  probe loss {:.4}  lr {:.2e}  {:.1}s",
            e.epoch, e.train_loss, e.probe_loss, e.lr_end, e.seconds
        );
        if let Err(err) = append_jsonl(&metrics, e) {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    checkpoint::save(&model, &dir.join("model.ckpt"), Scope::Trainable)?;
    write_json(&dir.join("train_report.json"), &report)?;
    write_json(
        &dir.join("freeze_audit.json"),
        &serde_json::json!({
            "trainable_names": report.trainable_names,
            "trainable_count": report.trainable_count,
            "analytic_breakdown": report.analytic_breakdown,
            "frozen_digest_before": report.frozen_digest_before,
            "frozen_digest_after": report.frozen_digest_after,
            "frozen_unchanged": report.frozen_unchanged(),
        }),
    )?;
    println!(
        "done in {:.1}s; frozen weights unchanged: {}; checkpoint {}",
        report.wall_clock_s,
        report.frozen_unchanged(),
        dir.join("model.ckpt").display()
    );
    Ok(())
}

fn load_model(path: &Path, corpus: &Corpus) -> Result<AvsrModel<f32>> {
    if !path.exists() {
        return Err(Error::Config(format!("no checkpoint at {}", path.display())));
    }
    let model = checkpoint::load::<f32>(path)?;
    check_compatible(&model.cfg, corpus)?;
    Ok(model)
}

fn snr_tag(s: Snr) -> String {
    if s.is_clean() {
        "inf".into()
    } else {
        format!("{}", s.0).replace('-', "m")
    }
}

pub fn evaluate(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    cfg.eval.decode.validate()?;
    let dir = cfg.out_dir();
    let ckpt = checkpoint.unwrap_or_else(|| dir.join("model.ckpt"));
    let corpus = open_corpus(cfg)?;
    let model = load_model(&ckpt, &corpus)?;
    fs::create_dir_all(&dir)?;
    archive(&effective(cfg, &corpus), &dir, "eval_config.toml")?;
    println!(
        "evaluating {} (task {}) on the {} split at SNR {}: {}",
        ckpt.display(),
        model.task(),
        cfg.eval.split.name(),
        cfg.eval.snr,
        describe_decoding(&cfg.eval)
    );
    let r = evaluate_and_log(&model, &corpus, &cfg.eval, &dir)?;
    let summary = format!(
        "task {}  snr {}  WER {:.2}%  ({} errors / {} words, {} utterances, {:.2} modality tokens each)\n",
        model.task(),
        cfg.eval.snr,
        round2(r.wer),
        r.errors,
        r.ref_words,
        r.n_utts,
        r.mean_tokens()
    );
    print!("{summary}");
    fs::write(dir.join(format!("eval_summary_snr{}.txt", snr_tag(cfg.eval.snr))), summary)?;
    Ok(())
}

fn evaluate_and_log(model: &AvsrModel<f32>, corpus: &Corpus, e: &EvalConfig, dir: &Path) -> Result<avsr::eval::EvalResult> {
    let r = run_eval(model, corpus, e)?;
    append_jsonl(&dir.join("metrics.jsonl"), &MetricRecord::new(&model.cfg, e.snr, &r))?;
    let hyps = dir.join(format!("hyps_{}_snr{}.jsonl", model.task().name(), snr_tag(e.snr)));
    let mut f = File::create(hyps)?;
    for u in &r.utterances {
        writeln!(f, "{}", serde_json::to_string(u)?)?;
    }
    Ok(r)
}

pub struct SweepOptions {
    pub k_series: bool,
    pub noise_table: bool,
    pub asr_checkpoint: Option<PathBuf>,
    pub avsr_checkpoint: Option<PathBuf>,
    pub force: bool,
}

fn train_quiet(model_cfg: ModelConfig, corpus: &Corpus, train_cfg: &TrainConfig) -> Result<AvsrModel<f32>> {
    let mut model = AvsrModel::<f32>::new(model_cfg)?;
    let rep = run_training(&mut model, corpus, train_cfg, |_| {})?;
    println!("    trained in {:.1}s", rep.wall_clock_s);
    Ok(model)
}

pub fn sweep(cfg: &RunConfig, opts: &SweepOptions) -> Result<()> {
    cfg.validate()?;
    if opts.k_series && (cfg.sweep.ks.is_empty() || cfg.sweep.k_tasks.is_empty()) {
        return Err(Error::Config("the K grid is empty".into()));
    }
    if opts.noise_table && cfg.sweep.snrs.is_empty() {
        return Err(Error::Config("the SNR grid is empty".into()));
    }
    if let Some(&bad) = cfg.sweep.ks.iter().find(|&&k| !(1..=8).contains(&k)) {
        return Err(Error::Param(format!("compression rate {bad} outside [1, 8]")));
    }
    let corpus = open_corpus(cfg)?;
    let cfg = &effective(cfg, &corpus);
    let dir = cfg.out_dir.clone().unwrap_or_else(|| cfg.out_dir().with_file_name("sweep"));
    fresh_dir(&dir, "metrics.jsonl", opts.force)?;
    if dir.join("metrics.jsonl").exists() {
        fs::remove_file(dir.join("metrics.jsonl"))?;
    }
    let cells = dir.join("cells");
    fs::create_dir_all(&cells)?;
    archive(cfg, &dir, "run_config.toml")?;
    let train_cfg = cfg.train_config();
    println!("decoding: {}", describe_decoding(&cfg.eval));

    if opts.k_series {
        let e = EvalConfig {
            snr: Snr::CLEAN,
            ..cfg.eval.clone()
        };
        let mut series = Vec::new();
        let mut table = format!("{:<5} {:>2} {:>8} {:>8}\n", "task", "K", "WER", "tokens");
        for &task in &cfg.sweep.k_tasks {
            let base = cfg.model_config(task)?;
            let mut points = Vec::new();
            for (i, &k) in cfg.sweep.ks.iter().enumerate() {
                println!("  {task} K={k}");
                let mc = with_k(&base, k);
                let model = train_quiet(mc, &corpus, &train_cfg)?;
                let r = evaluate_and_log(&model, &corpus, &e, &dir)?;
                let rec = MetricRecord::new(&model.cfg, e.snr, &r);
                write_json(&cells.join(format!("{}_k{k}_snrinf.json", task.name())), &rec)?;
                println!("    WER {:.2}  mean tokens {:.2}", rec.wer, rec.mean_tokens);
                table.push_str(&format!("{:<5} {k:>2} {:>8.2} {:>8.2}\n", task.to_string(), rec.wer, rec.mean_tokens));
                points.push((i, rec.wer));
            }
            series.push(Series {
                name: task.to_string(),
                points,
            });
        }
        print!("{table}");
        fs::write(dir.join("wer_vs_k.txt"), &table)?;
        let chart = Chart {
            title: "WER vs compression rate (clean)".into(),
            x_label: "compression rate K".into(),
            y_label: "WER (%)".into(),
            x_ticks: cfg.sweep.ks.iter().map(|k| k.to_string()).collect(),
            series,
        };
        fs::write(dir.join("wer_vs_k.svg"), chart.render())?;
    }

    if opts.noise_table {
        let mut models = Vec::new();
        for (task, ckpt) in [(Task::Asr, &opts.asr_checkpoint), (Task::Avsr, &opts.avsr_checkpoint)] {
            let m = match ckpt {
                Some(p) => load_model(p, &corpus)?,
                None => {
                    println!("  {task} for the noise table");
                    train_quiet(cfg.model_config(task)?, &corpus, &train_cfg)?
                }
            };
            models.push(m);
        }
        let refs: Vec<&AvsrModel<f32>> = models.iter().collect();
        let (table, records) = noise_sweep(&refs, &corpus, &cfg.sweep.snrs, &cfg.eval)?;
        for rec in &records {
            append_jsonl(&dir.join("metrics.jsonl"), rec)?;
            write_json(
                &cells.join(format!("{}_snr{}.json", rec.task.name(), snr_tag(rec.snr_db))),
                rec,
            )?;
        }
        let text = table.render();
        print!("{text}");
        fs::write(dir.join("wer_vs_snr.txt"), &text)?;
        let ticks = table
            .snrs
            .iter()
            .map(|s| if s.is_clean() { "∞".to_string() } else { s.to_string() })
            .collect();
        let chart = Chart {
            title: "WER vs SNR (babble)".into(),
            x_label: "SNR (dB)".into(),
            y_label: "WER (%)".into(),
            x_ticks: ticks,
            series: table
                .rows
                .iter()
                .map(|r| Series {
                    name: r.task.to_string(),
                    points: r.wers.iter().copied().enumerate().collect(),
                })
                .collect(),
        };
        fs::write(dir.join("wer_vs_snr.svg"), chart.render())?;
    }
    println!("sweep written to {}", dir.display());
    Ok(())
}

pub fn decode(cfg: &RunConfig, checkpoint: Option<PathBuf>, index: usize) -> Result<()> {
    let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir().join("model.ckpt"));
    let corpus = open_corpus(cfg)?;
    let model = load_model(&ckpt, &corpus)?;
    let (i, u) = corpus
        .split(cfg.eval.split)
        .nth(index)
        .ok_or_else(|| Error::Param(format!("the {} split has no utterance {index}", cfg.eval.split.name())))?;
    println!("utterance  {} (audio {} frames, video {} frames)", u.id, u.audio.rows(), u.video.rows());
    println!("prompt     {}", render_prompt(&model.prompt().ids, &model.vocab));
    println!("reference  {}", u.words.join(" "));
    println!("snr        {}", cfg.eval.snr);
    for greedy in [true, false] {
        let e = EvalConfig {
            greedy,
            ..cfg.eval.clone()
        };
        let r = decode_utterance(&model, &corpus, i, &e)?;
        println!(
            "{:<10} {}  [{} errors, log score {:.4}{}]",
            if greedy { "greedy" } else { "beam" },
            r.hypothesis,
            r.errors,
            r.log_score,
            if r.finished { "" } else { ", unfinished" }
        );
    }
    println!("modality tokens {}", avsr::eval::modality_tokens(&model.cfg, u.audio.rows(), u.video.rows()));
    Ok(())
}
