//! Fused decoder input: `[audio][video][prompt][response]`, with a loss mask
//! over the response span only.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{embed_tokens, Modality};
use crate::tensor::{log_softmax_rows, Float, ParamStore, Tape, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];
const PROMPT_WORDS: [&str; 7] = ["Transcribe", "speech", "and", "video", "to", "text", "."];
const NAMED: [&str; 32] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet", "kilo", "lima",
    "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "uniform", "victor", "whiskey",
    "xray", "yankee", "zulu", "one", "two", "three", "four", "five", "six",
];

/// Largest content vocabulary the word-level tokenizer will build.
pub const MAX_CONTENT_WORDS: usize = 1024;

/// Word-level vocabulary: specials, prompt words, then content words.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    n_content: usize,
}

impl Vocab {
    pub fn new(n_content: usize) -> Result<Self> {
        if n_content == 0 || n_content > MAX_CONTENT_WORDS {
            return Err(Error::Config(format!(
                "content vocabulary must hold 1..={MAX_CONTENT_WORDS} words, got {n_content}"
            )));
        }
        let mut words: Vec<String> = SPECIALS.iter().chain(&PROMPT_WORDS).map(|s| s.to_string()).collect();
        words.extend((0..n_content).map(content_word));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Vocab {
            words,
            index,
            n_content,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn n_content(&self) -> usize {
        self.n_content
    }

    pub fn content_offset(&self) -> usize {
        SPECIALS.len() + PROMPT_WORDS.len()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Param(format!("word {word:?} is not in the vocabulary")))
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Response ids for a transcription: the words followed by EOS.
    pub fn response_ids<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        let mut ids = self.encode(words)?;
        ids.push(EOS);
        Ok(ids)
    }

    /// Words of a generated response, stopping at EOS and dropping specials.
    pub fn decode_response(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&t| t != EOS)
            .filter(|&&t| t >= SPECIALS.len())
            .map(|&t| self.word(t).to_string())
            .collect()
    }
}

/// Name of content word `i`.
pub fn content_word(i: usize) -> String {
    NAMED.get(i).map_or_else(|| format!("w{i}"), |s| s.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    Vsr,
    Avsr,
}

impl Task {
    pub fn modalities(self) -> &'static [Modality] {
        match self {
            Task::Asr => &[Modality::Audio],
            Task::Vsr => &[Modality::Video],
            Task::Avsr => &[Modality::Audio, Modality::Video],
        }
    }

    pub fn uses(self, m: Modality) -> bool {
        self.modalities().contains(&m)
    }

    pub fn task_prompt(self) -> &'static str {
        match self {
            Task::Asr => "speech",
            Task::Vsr => "video",
            Task::Avsr => "speech and video",
        }
    }

    /// Peak learning rate used for this task by default.
    pub fn default_lr(self) -> f64 {
        match self {
            Task::Vsr => 5e-4,
            Task::Asr | Task::Avsr => 1e-3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Asr => "asr",
            Task::Vsr => "vsr",
            Task::Avsr => "avsr",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name().to_uppercase())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asr" => Ok(Task::Asr),
            "vsr" => Ok(Task::Vsr),
            "avsr" => Ok(Task::Avsr),
            _ => Err(Error::Param(format!("unknown task {s:?} (expected asr, vsr or avsr)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub task: Task,
    pub text: String,
    pub ids: Vec<usize>,
}

pub fn build_prompt(task: Task, vocab: &Vocab) -> Result<PromptTemplate> {
    let text = format!("Transcribe {} to text.", task.task_prompt());
    let mut words: Vec<&str> = text.trim_end_matches('.').split(' ').collect();
    words.push(".");
    let ids = vocab.encode(&words)?;
    Ok(PromptTemplate { task, text, ids })
}

/// Renders prompt ids back to text, attaching the full stop to its word.
pub fn render_prompt(ids: &[usize], vocab: &Vocab) -> String {
    let words: Vec<&str> = ids.iter().map(|&i| vocab.word(i)).collect();
    words.join(" ").replace(" .", ".")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Half-open position ranges of each part of a fused sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spans {
    pub audio: Range<usize>,
    pub video: Range<usize>,
    pub prompt: Range<usize>,
    pub response: Range<usize>,
}

impl Spans {
    pub fn total(&self) -> usize {
        self.response.end
    }

    /// True when the spans are ordered and tile `[0, total)` without gaps.
    pub fn tiles(&self) -> bool {
        self.audio.start == 0
            && self.audio.end == self.video.start
            && self.video.end == self.prompt.start
            && self.prompt.end == self.response.start
            && [&self.audio, &self.video, &self.prompt, &self.response]
                .iter()
                .all(|r| r.start <= r.end)
    }
}

/// One assembled sample. `embeddings` lives on the tape it was built on.
#[derive(Debug, Clone)]
pub struct FusedSequence {
    pub embeddings: Var,
    pub spans: Spans,
    pub loss_mask: Vec<bool>,
    /// Response ids `Y` (transcription + EOS in train mode, empty in infer mode).
    pub target_ids: Vec<usize>,
    /// Text token at each position; `None` over modality tokens.
    pub text_ids: Vec<Option<usize>>,
}

impl FusedSequence {
    pub fn len(&self) -> usize {
        self.loss_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss_mask.is_empty()
    }

    /// Next-token targets: row `t` predicts position `t+1`. The last row and
    /// every row whose successor lies outside the response are masked.
    pub fn shifted_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n = self.len();
        let mut targets = vec![PAD; n];
        let mut mask = vec![false; n];
        for t in 0..n.saturating_sub(1) {
            targets[t] = self.text_ids[t + 1].unwrap_or(PAD);
            mask[t] = self.loss_mask[t + 1];
        }
        (targets, mask)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuseOptions {
    /// Append a SEP token after each modality block (counted in its span).
    pub separator: bool,
}

/// Concatenates modality tokens, prompt and (in train mode) the response.
#[allow(clippy::too_many_arguments)]
pub fn fuse<F: Float>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    audio: Option<Var>,
    video: Option<Var>,
    prompt: &PromptTemplate,
    target: &[usize],
    mode: Mode,
    opts: FuseOptions,
) -> Result<FusedSequence> {
    let task = prompt.task;
    for (m, v) in [(Modality::Audio, audio), (Modality::Video, video)] {
        match (task.uses(m), v) {
            (true, None) => {
                return Err(Error::Config(format!("{task} needs {} tokens", m.name())));
            }
            (false, Some(_)) => {
                return Err(Error::Config(format!("{task} takes no {} tokens", m.name())));
            }
            (true, Some(v)) if tape.shape(v).first().copied().unwrap_or(0) == 0 => {
                return Err(Error::Config(format!("{task} got zero-length {} tokens", m.name())));
            }
            _ => {}
        }
    }
    let response: &[usize] = match mode {
        Mode::Train if target.is_empty() => {
            return Err(Error::Degenerate("training sample has an empty response".into()));
        }
        Mode::Train => target,
        Mode::Infer => &[],
    };

    let mut parts = Vec::new();
    let mut text_ids = Vec::new();
    let block = |tape: &mut Tape<F>, v: Option<Var>, parts: &mut Vec<Var>, text_ids: &mut Vec<Option<usize>>| -> Result<Range<usize>> {
        let start = text_ids.len();
        if let Some(v) = v {
            parts.push(v);
            text_ids.extend(std::iter::repeat_n(None, tape.shape(v)[0]));
            if opts.separator {
                parts.push(embed_tokens(tape, store, &[SEP])?);
                text_ids.push(Some(SEP));
            }
        }
        Ok(start..text_ids.len())
    };
    let a = block(tape, audio, &mut parts, &mut text_ids)?;
    let v = block(tape, video, &mut parts, &mut text_ids)?;

    let p0 = text_ids.len();
    let mut ids = prompt.ids.clone();
    ids.extend_from_slice(response);
    text_ids.extend(ids.iter().map(|&t| Some(t)));
    parts.push(embed_tokens(tape, store, &ids)?);
    let r0 = p0 + prompt.ids.len();
    let total = text_ids.len();
    let embeddings = tape.concat_rows(&parts)?;
    let loss_mask = (0..total).map(|i| i >= r0).collect();
    Ok(FusedSequence {
        embeddings,
        spans: Spans {
            audio: a,
            video: v,
            prompt: p0..r0,
            response: r0..total,
        },
        loss_mask,
        target_ids: response.to_vec(),
        text_ids,
    })
}

/// `Σᵢ log p(yᵢ | modality tokens, prompt, y₍<ᵢ₎)` from teacher-forced logits
/// `[T×V]` aligned to the fused positions.
pub fn sequence_log_prob(fused: &FusedSequence, logits: &[f64], vocab_size: usize) -> Result<f64> {
    let r = &fused.spans.response;
    if r.is_empty() {
        return Err(Error::Degenerate("sequence log-prob needs a non-empty response".into()));
    }
    if logits.len() != fused.len() * vocab_size {
        return Err(Error::Contract(format!(
            "logits hold {} values, expected {}×{vocab_size}",
            logits.len(),
            fused.len()
        )));
    }
    let mut total = 0.0;
    for p in r.clone() {
        let row = &logits[(p - 1) * vocab_size..p * vocab_size];
        let lp = log_softmax_rows(row, vocab_size, 1.0);
        let y = fused.text_ids[p].expect("response positions hold text");
        total += lp[y];
    }
    Ok(total)
}
