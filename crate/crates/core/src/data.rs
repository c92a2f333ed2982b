//! Synthetic audio-visual corpus and its perturbations.
//!
//! Every content word owns a fixed audio template (two frames) and an
//! independent video template (one frame). An utterance renders its words
//! through both tables and adds Gaussian emission noise.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::assembly::{content_word, MAX_CONTENT_WORDS};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Signal-to-noise ratio in dB; `+∞` is the clean condition.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Snr(pub f64);

impl Snr {
    pub const CLEAN: Snr = Snr(f64::INFINITY);

    pub fn is_clean(self) -> bool {
        self.0 == f64::INFINITY
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for Snr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "∞" | "+inf" | "clean" => Ok(Snr::CLEAN),
            t => t
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Snr)
                .ok_or_else(|| Error::Param(format!("bad SNR level {s:?}"))),
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_clean() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Snr(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusSpec {
    pub vocab_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub audio_frames_per_word: usize,
    pub video_frames_per_word: usize,
    pub d_audio: usize,
    pub d_video: usize,
    pub emission_noise_std: f64,
    /// Emission noise on the video stream, relative to its unit-scale templates.
    pub video_noise_std: f64,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            vocab_size: 32,
            min_words: 4,
            max_words: 16,
            audio_frames_per_word: 2,
            video_frames_per_word: 1,
            d_audio: 16,
            d_video: 16,
            emission_noise_std: 0.3,
            video_noise_std: 0.3,
            seed: 0,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.vocab_size > MAX_CONTENT_WORDS {
            return Err(Error::Config(format!(
                "vocab_size must be in 1..={MAX_CONTENT_WORDS}, got {}",
                self.vocab_size
            )));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config(format!(
                "utterance length range [{}, {}] is empty or starts at zero",
                self.min_words, self.max_words
            )));
        }
        if self.audio_frames_per_word == 0 || self.video_frames_per_word == 0 || self.d_audio == 0 || self.d_video == 0 {
            return Err(Error::Config("frame counts and feature widths must be positive".into()));
        }
        if !(self.emission_noise_std >= 0.0) || !(self.video_noise_std >= 0.0) {
            return Err(Error::Config("emission noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    pub words: Vec<String>,
    pub audio: Tensor<f32>,
    pub video: Tensor<f32>,
    /// Condition the features were stored at (`∞` for generated corpora).
    pub snr_db: Snr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: ToyCorpusSpec,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &Utterance)> {
        self.utterances.iter().enumerate().filter(move |(_, u)| u.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Independent stream for a `(seed, purpose, index)` triple.
pub(crate) fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const TABLES: u64 = 1;
const UTTERANCES: u64 = 2;

/// Generates `sizes.total()` utterances; the first `train` go to the train
/// split, then `valid`, then `test`.
pub fn generate_corpus(spec: &ToyCorpusSpec, sizes: SplitSizes) -> Result<Corpus> {
    spec.validate()?;
    let n = sizes.total();
    if n == 0 {
        return Err(Error::Config("corpus needs at least one utterance".into()));
    }
    let mut trng = stream(spec.seed, TABLES, 0);
    let audio_table = Tensor::<f32>::randn(&[spec.vocab_size * spec.audio_frames_per_word, spec.d_audio], 1.0, &mut trng);
    let video_table = Tensor::<f32>::randn(&[spec.vocab_size * spec.video_frames_per_word, spec.d_video], 1.0, &mut trng);

    let utterances = (0..n)
        .map(|i| {
            let split = if i < sizes.train {
                Split::Train
            } else if i < sizes.train + sizes.valid {
                Split::Valid
            } else {
                Split::Test
            };
            let mut rng = stream(spec.seed, UTTERANCES, i as u64);
            let len = rng.random_range(spec.min_words..=spec.max_words);
            let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.vocab_size)).collect();
            let audio = render(&ids, &audio_table, spec.audio_frames_per_word, spec.emission_noise_std, &mut rng);
            let video = render(&ids, &video_table, spec.video_frames_per_word, spec.video_noise_std, &mut rng);
            Utterance {
                id: format!("utt{i:06}"),
                split,
                words: ids.iter().map(|&w| content_word(w)).collect(),
                audio,
                video,
                snr_db: Snr::CLEAN,
            }
        })
        .collect();
    Ok(Corpus {
        spec: spec.clone(),
        utterances,
    })
}

fn render(ids: &[usize], table: &Tensor<f32>, per_word: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let d = table.cols();
    let mut out = Vec::with_capacity(ids.len() * per_word * d);
    let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
    for &w in ids {
        for f in 0..per_word {
            for &x in table.row(w * per_word + f) {
                let e = if std > 0.0 { normal.sample(rng) } else { 0.0 };
                out.push(x + e as f32);
            }
        }
    }
    Tensor::new(&[ids.len() * per_word, d], out).expect("rendered shape")
}

fn power(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64
}

/// Noise gain that places `noise` at `snr` dB below `clean`.
pub fn snr_gain(clean: &[f32], noise: &[f32], snr: Snr) -> Result<f64> {
    let pc = power(clean);
    let pn = power(noise);
    if !(pc > 0.0) {
        return Err(Error::Degenerate("clean signal has zero power".into()));
    }
    if !(pn > 0.0) {
        return Err(Error::Degenerate("noise has zero power at a finite SNR".into()));
    }
    Ok((pc / (pn * 10f64.powf(snr.0 / 10.0))).sqrt())
}

/// `clean + g·noise` with `g` chosen so the mixture sits at exactly `snr`
/// dB (powers as mean squares). `∞` returns `clean` untouched.
pub fn mix_noise_at_snr(clean: &Tensor<f32>, noise: &Tensor<f32>, snr: Snr) -> Result<Tensor<f32>> {
    if clean.shape() != noise.shape() {
        return Err(shape_err("mix_noise_at_snr", clean.shape(), noise.shape()));
    }
    if snr.is_clean() {
        return Ok(clean.clone());
    }
    if snr.0.is_nan() {
        return Err(Error::Param("SNR is NaN".into()));
    }
    let g = snr_gain(clean.data(), noise.data(), snr)?;
    let data = clean
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&c, &n)| (c as f64 + g * n as f64) as f32)
        .collect();
    Tensor::new(clean.shape(), data)
}

/// Babble: the mean of `k` other utterances' audio, each cyclically shifted
/// by a random offset and tiled to `frames` rows.
pub fn babble<R: Rng + ?Sized>(pool: &[&Tensor<f32>], frames: usize, k: usize, rng: &mut R) -> Result<Tensor<f32>> {
    if pool.is_empty() || k == 0 {
        return Err(Error::Degenerate("babble needs a non-empty pool".into()));
    }
    let d = pool[0].cols();
    let mut out = vec![0.0f32; frames * d];
    let picks: Vec<usize> = if pool.len() >= k {
        sample(rng, pool.len(), k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..pool.len())).collect()
    };
    for &p in &picks {
        let src = pool[p];
        if src.cols() != d {
            return Err(shape_err("babble", pool[0].shape(), src.shape()));
        }
        let len = src.rows();
        let shift = rng.random_range(0..len);
        for t in 0..frames {
            let row = src.row((t + shift) % len);
            for (o, &x) in out[t * d..(t + 1) * d].iter_mut().zip(row) {
                *o += x / k as f32;
            }
        }
    }
    Tensor::new(&[frames, d], out)
}

/// Per-utterance standardization over all `T·d` entries.
pub fn z_normalize(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = x.numel();
    if n < 2 {
        return Err(Error::Degenerate("z-normalization needs at least two values".into()));
    }
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(1e-8);
    let data = x.data().iter().map(|&v| ((v as f64 - mean) / std) as f32).collect();
    Tensor::new(x.shape(), data)
}

/// Masks `S = max(1, ⌊T/25⌋)` spans whose widths sum to at most `⌊ρ·T⌋`,
/// filling them with the utterance's mean frame. Returns the output and the
/// number of distinct masked frames.
pub fn adaptive_time_mask<R: Rng + ?Sized>(x: &Tensor<f32>, rho: f64, rng: &mut R) -> Result<(Tensor<f32>, usize)> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Param(format!("mask ratio must lie in [0, 1), got {rho}")));
    }
    let (t, d) = (x.rows(), x.cols());
    let budget = (rho * t as f64).floor() as usize;
    if budget == 0 {
        return Ok((x.clone(), 0));
    }
    let spans = (t / 25).max(1);
    let max_w = budget / spans;
    let mut mean = vec![0.0f64; d];
    for r in 0..t {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v as f64 / t as f64;
        }
    }
    let mut masked = vec![false; t];
    for _ in 0..spans {
        let w = rng.random_range(0..=max_w);
        let start = rng.random_range(0..=t - w);
        masked[start..start + w].iter_mut().for_each(|m| *m = true);
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for (r, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
        for (o, &m) in data[r * d..(r + 1) * d].iter_mut().zip(&mean) {
            *o = m as f32;
        }
    }
    Ok((out, masked.iter().filter(|&&m| m).count()))
}

/// Default SNR levels drawn uniformly during training.
pub fn default_snr_levels() -> Vec<Snr> {
    [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, f64::INFINITY].into_iter().map(Snr).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub snr_levels_db: Vec<Snr>,
    /// Number of utterances mixed into one babble track.
    pub babble_speakers: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            snr_levels_db: default_snr_levels(),
            babble_speakers: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Train,
    Eval,
}

/// Feature pipeline: babble at a given SNR, per-utterance z-normalization of
/// audio, then (train stage only) time masking of both streams.
#[derive(Debug)]
pub struct Preprocessor {
    pub stage: Stage,
    pub mask_rho: f64,
    pub babble_speakers: usize,
    mask_calls: AtomicUsize,
}

impl Preprocessor {
    pub fn new(stage: Stage, mask_rho: f64, babble_speakers: usize) -> Self {
        Preprocessor {
            stage,
            mask_rho,
            babble_speakers,
            mask_calls: AtomicUsize::new(0),
        }
    }

    /// Number of times masking has run through this pipeline.
    pub fn mask_calls(&self) -> usize {
        self.mask_calls.load(Ordering::Relaxed)
    }

    /// Returns `(audio, video)` ready for the encoders. `index` is the
    /// utterance's position in the corpus; babble draws from the train split
    /// excluding it.
    pub fn prepare<R: Rng + ?Sized>(
        &self,
        corpus: &Corpus,
        index: usize,
        snr: Snr,
        rng: &mut R,
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let u = &corpus.utterances[index];
        let mut audio = u.audio.clone();
        if !snr.is_clean() {
            let pool: Vec<&Tensor<f32>> = corpus
                .split(Split::Train)
                .filter(|&(i, _)| i != index)
                .map(|(_, o)| &o.audio)
                .collect();
            let noise = babble(&pool, audio.rows(), self.babble_speakers, rng)?;
            audio = mix_noise_at_snr(&audio, &noise, snr)?;
        }
        audio = z_normalize(&audio)?;
        let mut video = u.video.clone();
        if self.stage == Stage::Train && self.mask_rho > 0.0 {
            self.mask_calls.fetch_add(1, Ordering::Relaxed);
            audio = adaptive_time_mask(&audio, self.mask_rho, rng)?.0;
            video = adaptive_time_mask(&video, self.mask_rho, rng)?.0;
        }
        Ok((audio, video))
    }
}

// ------------------------------------------------------------ on-disk format

/// Version of the corpus directory layout.
pub const CORPUS_FORMAT_VERSION: u32 = 1;
const FEAT_MAGIC: &[u8; 4] = b"AVSF";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusHeader {
    format_version: u32,
    spec: ToyCorpusSpec,
    sizes: SplitSizes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    split: Split,
    words: String,
    snr_db: Snr,
    audio_frames: usize,
    video_frames: usize,
}

/// Writes one feature file: `AVSF`, u32 version, u32 rows, u32 cols, then
/// `rows·cols` little-endian f32 values.
pub fn write_features(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FEAT_MAGIC)?;
    for v in [CORPUS_FORMAT_VERSION, t.rows() as u32, t.cols() as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != FEAT_MAGIC {
        return Err(bad("not a feature file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    if word(4) as u32 != CORPUS_FORMAT_VERSION {
        return Err(bad("unsupported feature file version"));
    }
    let (rows, cols) = (word(8), word(12));
    if bytes.len() != 16 + rows * cols * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&[rows, cols], data)
}

fn dir_is_empty(dir: &Path) -> Result<bool> {
    Ok(!dir.exists() || fs::read_dir(dir)?.next().is_none())
}

/// Serializes a corpus as `corpus.json`, `manifest.jsonl` and
/// `features/<id>.{audio,video}.f32`. Refuses a non-empty directory unless
/// `force` is set.
pub fn save_corpus(corpus: &Corpus, dir: &Path, force: bool) -> Result<()> {
    if !dir_is_empty(dir)? {
        if !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir.join("features"))?;
    let sizes = SplitSizes {
        train: corpus.split_len(Split::Train),
        valid: corpus.split_len(Split::Valid),
        test: corpus.split_len(Split::Test),
    };
    let header = CorpusHeader {
        format_version: CORPUS_FORMAT_VERSION,
        spec: corpus.spec.clone(),
        sizes,
    };
    fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&header)? + "\n")?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for u in &corpus.utterances {
        let line = ManifestLine {
            id: u.id.clone(),
            split: u.split,
            words: u.words.join(" "),
            snr_db: u.snr_db,
            audio_frames: u.audio.rows(),
            video_frames: u.video.rows(),
        };
        writeln!(manifest, "{}", serde_json::to_string(&line)?)?;
        write_features(&dir.join("features").join(format!("{}.audio.f32", u.id)), &u.audio)?;
        write_features(&dir.join("features").join(format!("{}.video.f32", u.id)), &u.video)?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let header: CorpusHeader = serde_json::from_str(&fs::read_to_string(dir.join("corpus.json"))?)?;
    if header.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "corpus format version {} is not supported",
            header.format_version
        )));
    }
    let mut utterances = Vec::new();
    for line in BufReader::new(fs::File::open(dir.join("manifest.jsonl"))?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line)?;
        let audio = read_features(&dir.join("features").join(format!("{}.audio.f32", m.id)))?;
        let video = read_features(&dir.join("features").join(format!("{}.video.f32", m.id)))?;
        if audio.rows() != m.audio_frames || video.rows() != m.video_frames {
            return Err(Error::Format(format!("{}: frame counts disagree with the manifest", m.id)));
        }
        utterances.push(Utterance {
            id: m.id,
            split: m.split,
            words: m.words.split_whitespace().map(str::to_string).collect(),
            audio,
            video,
            snr_db: m.snr_db,
        });
    }
    Ok(Corpus {
        spec: header.spec,
        utterances,
    })
}
