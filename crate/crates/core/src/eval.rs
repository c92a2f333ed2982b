//! Word error rate, test-split evaluation, and the noise and compression
//! sweeps.

use serde::{Deserialize, Serialize};

use crate::assembly::Task;
use crate::data::{stream, Corpus, Preprocessor, Snr, Split, Stage};
use crate::decoding::{beam_search, greedy_decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{AvsrModel, ModelConfig, Sample};
use crate::nn::Modality;
use crate::projector::compressed_len;
use crate::tensor::Float;
use crate::train::{train, TrainConfig, TrainReport};

/// Minimal number of substitutions, deletions and insertions turning `a`
/// into `b` (uniform costs).
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(S + D + I) / N_ref` as a fraction.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Degenerate("WER needs a non-empty reference".into()));
    }
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Rounds to the two decimals used in reports.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    /// Greedy decoding instead of beam search.
    pub greedy: bool,
    pub snr: Snr,
    pub split: Split,
    pub max_utterances: Option<usize>,
    /// Seed of the evaluation babble; fixed across SNR levels so only the
    /// gain changes between columns.
    pub noise_seed: u64,
    pub babble_speakers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            decode: DecodeConfig::default(),
            greedy: false,
            snr: Snr::CLEAN,
            split: Split::Test,
            max_utterances: None,
            noise_seed: 1234,
            babble_speakers: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UttResult {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub errors: usize,
    pub ref_words: usize,
    /// Modality tokens entering the decoder.
    pub tokens: usize,
    pub log_score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Corpus-level WER in percent.
    pub wer: f64,
    pub errors: usize,
    pub ref_words: usize,
    pub n_utts: usize,
    pub total_tokens: usize,
    pub utterances: Vec<UttResult>,
}

impl EvalResult {
    pub fn mean_tokens(&self) -> f64 {
        self.total_tokens as f64 / self.n_utts.max(1) as f64
    }
}

const EVAL_NOISE: u64 = 21;

/// Modality tokens an utterance contributes under `cfg`.
pub fn modality_tokens(cfg: &ModelConfig, audio_frames: usize, video_frames: usize) -> usize {
    let mut n = 0;
    if cfg.task.uses(Modality::Audio) {
        n += compressed_len(audio_frames, cfg.k_audio);
    }
    if cfg.task.uses(Modality::Video) {
        n += compressed_len(video_frames, cfg.k_video);
    }
    n
}

/// Decodes one utterance of `corpus` (by index) under `cfg`.
pub fn decode_utterance<F: Float>(model: &AvsrModel<F>, corpus: &Corpus, index: usize, cfg: &EvalConfig) -> Result<UttResult> {
    let pre = Preprocessor::new(Stage::Eval, 0.0, cfg.babble_speakers);
    let u = &corpus.utterances[index];
    let mut rng = stream(cfg.noise_seed, EVAL_NOISE, index as u64);
    let (a, v) = pre.prepare(corpus, index, cfg.snr, &mut rng)?;
    let sess = model.session(Sample {
        audio: Some(&a),
        video: Some(&v),
        response: &[],
    })?;
    let hyp = if cfg.greedy {
        greedy_decode(&sess, &cfg.decode)?
    } else {
        beam_search(&sess, &cfg.decode)?.remove(0)
    };
    let words = model.vocab.decode_response(&hyp.tokens);
    let errors = edit_distance(&u.words, &words);
    Ok(UttResult {
        id: u.id.clone(),
        reference: u.words.join(" "),
        hypothesis: words.join(" "),
        errors,
        ref_words: u.words.len(),
        tokens: modality_tokens(&model.cfg, u.audio.rows(), u.video.rows()),
        log_score: hyp.log_score,
        finished: hyp.finished,
    })
}

/// Decodes a split and reports corpus-level WER.
pub fn evaluate<F: Float>(model: &AvsrModel<F>, corpus: &Corpus, cfg: &EvalConfig) -> Result<EvalResult> {
    cfg.decode.validate()?;
    let idx: Vec<usize> = corpus
        .split(cfg.split)
        .map(|(i, _)| i)
        .take(cfg.max_utterances.unwrap_or(usize::MAX))
        .collect();
    if idx.is_empty() {
        return Err(Error::Config(format!("the {} split is empty", cfg.split.name())));
    }
    let utterances = idx
        .iter()
        .map(|&i| decode_utterance(model, corpus, i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let errors = utterances.iter().map(|u| u.errors).sum();
    let ref_words: usize = utterances.iter().map(|u| u.ref_words).sum();
    Ok(EvalResult {
        wer: 100.0 * errors as f64 / ref_words as f64,
        errors,
        ref_words,
        n_utts: utterances.len(),
        total_tokens: utterances.iter().map(|u| u.tokens).sum(),
        utterances,
    })
}

/// One evaluation cell, serialized as a line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub task: Task,
    pub k_a: Option<usize>,
    pub k_v: Option<usize>,
    pub snr_db: Snr,
    pub wer: f64,
    pub tokens: usize,
    pub mean_tokens: f64,
    pub n_utts: usize,
    pub seed: u64,
}

impl MetricRecord {
    pub fn new(cfg: &ModelConfig, snr: Snr, r: &EvalResult) -> Self {
        MetricRecord {
            task: cfg.task,
            k_a: cfg.task.uses(Modality::Audio).then_some(cfg.k_audio),
            k_v: cfg.task.uses(Modality::Video).then_some(cfg.k_video),
            snr_db: snr,
            wer: round2(r.wer),
            tokens: r.total_tokens,
            mean_tokens: round2(r.mean_tokens()),
            n_utts: r.n_utts,
            seed: cfg.seed,
        }
    }
}

/// WER grid laid out with compression rates as row labels and SNR levels as
/// columns; `/` marks an absent modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub snrs: Vec<Snr>,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: Task,
    pub k_a: Option<usize>,
    pub k_v: Option<usize>,
    pub wers: Vec<f64>,
}

impl SweepTable {
    pub fn render(&self) -> String {
        let label = |k: Option<usize>| k.map_or("/".to_string(), |k| k.to_string());
        let mut out = format!("{:>3} {:>3} |", "A", "V");
        for s in &self.snrs {
            let h = if s.is_clean() { "∞".to_string() } else { s.to_string() };
            out.push_str(&format!(" {h:>6}"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(9 + 7 * self.snrs.len()));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:>3} {:>3} |", label(r.k_a), label(r.k_v)));
            for w in &r.wers {
                out.push_str(&format!(" {w:>6.2}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates each model at each SNR level. Returns the table and one metric
/// record per cell.
pub fn noise_sweep<F: Float>(
    models: &[&AvsrModel<F>],
    corpus: &Corpus,
    snrs: &[Snr],
    cfg: &EvalConfig,
) -> Result<(SweepTable, Vec<MetricRecord>)> {
    if models.is_empty() || snrs.is_empty() {
        return Err(Error::Config("noise sweep needs at least one model and one SNR level".into()));
    }
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for m in models {
        let mut wers = Vec::new();
        for &snr in snrs {
            let r = evaluate(m, corpus, &EvalConfig { snr, ..cfg.clone() })?;
            records.push(MetricRecord::new(&m.cfg, snr, &r));
            wers.push(round2(r.wer));
        }
        let rec = &records[records.len() - 1];
        rows.push(SweepRow {
            task: m.task(),
            k_a: rec.k_a,
            k_v: rec.k_v,
            wers,
        });
    }
    Ok((
        SweepTable {
            snrs: snrs.to_vec(),
            rows,
        },
        records,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionPoint {
    pub k: usize,
    pub record: MetricRecord,
    pub train: TrainReport,
}

/// Sets the compression rate of the task's modalities to `k`.
pub fn with_k(cfg: &ModelConfig, k: usize) -> ModelConfig {
    let mut c = cfg.clone();
    match cfg.task {
        Task::Asr => c.k_audio = k,
        Task::Vsr => c.k_video = k,
        Task::Avsr => {
            c.k_audio = k;
            c.k_video = k;
        }
    }
    c
}

/// Trains and evaluates one model per compression rate.
pub fn compression_sweep(
    base: &ModelConfig,
    corpus: &Corpus,
    ks: &[usize],
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    mut progress: impl FnMut(usize, &EvalResult),
) -> Result<Vec<CompressionPoint>> {
    if ks.is_empty() {
        return Err(Error::Config("compression sweep needs at least one K".into()));
    }
    if let Some(&bad) = ks.iter().find(|&&k| !(1..=8).contains(&k)) {
        return Err(Error::Param(format!("compression rate {bad} outside [1, 8]")));
    }
    let mut out = Vec::new();
    for &k in ks {
        let cfg = with_k(base, k);
        let mut model = AvsrModel::<f32>::new(cfg.clone())?;
        let report = train(&mut model, corpus, train_cfg, |_| {})?;
        let r = evaluate(&model, corpus, eval_cfg)?;
        progress(k, &r);
        out.push(CompressionPoint {
            k,
            record: MetricRecord::new(&cfg, eval_cfg.snr, &r),
            train: report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive minimum over all edit scripts, written as plain recursion.
    fn brute(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let keep = brute(ra, rb) + usize::from(x != y);
                keep.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
            }
        }
    }

    fn all_strings(max: usize) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut layer = vec![vec![]];
        for _ in 0..max {
            let mut next = Vec::new();
            for s in &layer {
                for c in 0..3u8 {
                    let mut t: Vec<u8> = s.clone();
                    t.push(c);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            layer = next;
        }
        out
    }

    #[test]
    fn worked_examples() {
        assert_eq!(wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 0.0);
        assert_eq!(wer(&["a", "b", "c", "d"], &["a", "x", "c"]).unwrap(), 0.5);
        assert!(matches!(wer::<&str>(&[], &["a"]), Err(Error::Degenerate(_))));
        assert_eq!(wer(&["a"], &[]).unwrap(), 1.0);
        assert_eq!(wer(&["a"], &["b", "c", "d"]).unwrap(), 3.0);
    }

    #[test]
    fn matches_brute_force_exhaustively() {
        let strings = all_strings(4);
        for a in strings.iter().filter(|s| !s.is_empty()) {
            for b in &strings {
                assert_eq!(edit_distance(a, b), brute(a, b), "{a:?} {b:?}");
            }
        }
    }

    #[test]
    fn table_renders_absent_modalities() {
        let t = SweepTable {
            snrs: vec![Snr::CLEAN, Snr(0.0)],
            rows: vec![SweepRow {
                task: Task::Asr,
                k_a: Some(3),
                k_v: None,
                wers: vec![1.1, 12.345],
            }],
        };
        let s = t.render();
        assert!(s.contains("  3   / |   1.10  12.35"), "{s}");
        assert!(s.contains('∞'));
    }
}
