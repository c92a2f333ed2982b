//! The assembled recognizer: frozen encoders, one projector per modality in
//! use, and a frozen decoder with low-rank adapters.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{build_prompt, fuse, FuseOptions, FusedSequence, Mode, PromptTemplate, Task, Vocab, EOS};
use crate::data::stream;
use crate::decoding::LmSession;
use crate::error::{Error, Result};
use crate::lora::{self, count_lora_params, LoraConfig};
use crate::nn::{self, decoder_forward, encoder_forward, EncoderConfig, LoraBinding, Modality, TransformerConfig};
use crate::projector::{self, ProjectorConfig};
use crate::tensor::{Float, ParamStore, Tape, Tensor, Var};

/// Compression rates used with the full-size models: 3 for audio alone, 2
/// for video alone, and 4/2 when both are fused.
pub fn full_size_k(task: Task) -> (usize, usize) {
    match task {
        Task::Asr => (3, 2),
        Task::Vsr => (4, 2),
        Task::Avsr => (4, 2),
    }
}

/// Compression rate used for both modalities in the low-resource setting.
pub const LOW_RESOURCE_K: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    /// Content words in the tokenizer (specials and prompt words are added).
    pub vocab_words: usize,
    pub decoder: TransformerConfig,
    pub audio_encoder: EncoderConfig,
    pub video_encoder: EncoderConfig,
    pub k_audio: usize,
    pub k_video: usize,
    /// Projector hidden width; defaults to the decoder width.
    pub projector_hidden: Option<usize>,
    pub llm_lora: LoraConfig,
    /// Adapters on the video encoder; only allowed for VSR.
    pub video_encoder_lora: Option<LoraConfig>,
    #[serde(default)]
    pub fuse: FuseOptions,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for `task` over features of the given widths.
    pub fn toy(task: Task, vocab_words: usize, d_audio: usize, d_video: usize) -> Self {
        let (k_audio, k_video) = full_size_k(task);
        let vocab_size = vocab_words + Vocab::new(1).map_or(0, |v| v.content_offset());
        ModelConfig {
            task,
            vocab_words,
            decoder: TransformerConfig::toy(vocab_size),
            audio_encoder: EncoderConfig::toy(Modality::Audio, d_audio),
            video_encoder: EncoderConfig::toy(Modality::Video, d_video),
            k_audio,
            k_video,
            projector_hidden: None,
            llm_lora: LoraConfig::with_rank(TOY_LORA_RANK),
            video_encoder_lora: None,
            fuse: FuseOptions::default(),
            seed: 0,
        }
    }

    pub fn encoder(&self, m: Modality) -> &EncoderConfig {
        match m {
            Modality::Audio => &self.audio_encoder,
            Modality::Video => &self.video_encoder,
        }
    }

    pub fn k(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.k_audio,
            Modality::Video => self.k_video,
        }
    }

    pub fn projector(&self, m: Modality) -> ProjectorConfig {
        let mut p = ProjectorConfig::new(self.k(m), self.encoder(m).d_model, self.decoder.d_model);
        if let Some(h) = self.projector_hidden {
            p.d_hidden = h;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = Vocab::new(self.vocab_words)?;
        if self.decoder.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "decoder vocab_size {} does not match the tokenizer ({} entries)",
                self.decoder.vocab_size,
                vocab.len()
            )));
        }
        self.decoder.validate()?;
        self.llm_lora.validate()?;
        for &m in self.task.modalities() {
            self.encoder(m).validate()?;
            if self.encoder(m).modality != m {
                return Err(Error::Config(format!("{} encoder config has the wrong modality", m.name())));
            }
            self.projector(m).validate()?;
        }
        if let Some(l) = &self.video_encoder_lora {
            if self.task != Task::Vsr {
                return Err(Error::Config(format!(
                    "video-encoder adapters are only trained for VSR, not {}",
                    self.task
                )));
            }
            l.validate()?;
        }
        Ok(())
    }

    /// Analytic trainable-parameter counts per component.
    pub fn trainable_breakdown(&self) -> Result<Vec<(String, usize)>> {
        let mut out = Vec::new();
        for &m in self.task.modalities() {
            out.push((projector::prefix(m), self.projector(m).param_count()));
        }
        out.push(("lora.llm".into(), count_lora_params(&self.decoder.attention_shapes(), &self.llm_lora)?));
        if let Some(l) = &self.video_encoder_lora {
            out.push(("lora.enc.video".into(), count_lora_params(&self.video_encoder.attention_shapes(), l)?));
        }
        Ok(out)
    }

    pub fn analytic_trainable(&self) -> Result<usize> {
        Ok(self.trainable_breakdown()?.iter().map(|(_, n)| n).sum())
    }

    /// LLM input length for an utterance with the given frame counts.
    pub fn sequence_len(&self, audio_frames: usize, video_frames: usize, response: usize) -> usize {
        let prompt = Vocab::new(self.vocab_words)
            .and_then(|v| build_prompt(self.task, &v))
            .map_or(0, |p| p.ids.len());
        let sep = usize::from(self.fuse.separator);
        let mut n = prompt + response;
        if self.task.uses(Modality::Audio) {
            n += projector::compressed_len(audio_frames, self.k_audio) + sep;
        }
        if self.task.uses(Modality::Video) {
            n += projector::compressed_len(video_frames, self.k_video) + sep;
        }
        n
    }
}

/// Adapter rank used by the toy presets.
pub const TOY_LORA_RANK: usize = 32;

/// Inputs of one sample. Features are raw encoder inputs; `response` holds
/// the target ids (with EOS) in training and is ignored at inference.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub audio: Option<&'a Tensor<f32>>,
    pub video: Option<&'a Tensor<f32>>,
    pub response: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct AvsrModel<F: Float> {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore<F>,
    prompt: PromptTemplate,
    merged: bool,
}

fn component_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    stream(seed, h, 0)
}

impl<F: Float> AvsrModel<F> {
    /// Builds all weights from `cfg.seed`. Each component draws from its own
    /// stream, so the frozen decoder and encoders are identical across tasks
    /// and compression rates for a given seed.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::new(cfg.vocab_words)?;
        let prompt = build_prompt(cfg.task, &vocab)?;
        let mut store = ParamStore::new();
        nn::init_decoder(&mut store, &cfg.decoder, &mut component_rng(cfg.seed, "llm"))?;
        nn::attach_decoder_lora(&mut store, &cfg.decoder, &cfg.llm_lora, &mut component_rng(cfg.seed, "lora.llm"))?;
        for &m in cfg.task.modalities() {
            let e = cfg.encoder(m);
            nn::init_encoder(&mut store, e, &mut component_rng(cfg.seed, &e.prefix()))?;
            let p = projector::prefix(m);
            let mut rng = component_rng(cfg.seed, &format!("{p}.k{}", cfg.k(m)));
            projector::init_projector(&mut store, m, &cfg.projector(m), &mut rng)?;
        }
        if let Some(l) = &cfg.video_encoder_lora {
            nn::attach_encoder_lora(&mut store, &cfg.video_encoder, l, &mut component_rng(cfg.seed, "lora.enc.video"))?;
        }
        Ok(AvsrModel {
            cfg,
            vocab,
            store,
            prompt,
            merged: false,
        })
    }

    pub fn task(&self) -> Task {
        self.cfg.task
    }

    pub fn prompt(&self) -> &PromptTemplate {
        &self.prompt
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    fn llm_lora(&self) -> Option<LoraBinding<'_>> {
        (!self.merged).then_some(LoraBinding { cfg: &self.cfg.llm_lora })
    }

    fn encoder_lora(&self, m: Modality) -> Option<LoraBinding<'_>> {
        match (m, &self.cfg.video_encoder_lora) {
            (Modality::Video, Some(cfg)) if !self.merged => Some(LoraBinding { cfg }),
            _ => None,
        }
    }

    fn adapter_targets(&self) -> Vec<(String, f64)> {
        let mut t: Vec<(String, f64)> = nn::block_targets("llm", self.cfg.decoder.n_layers, &self.cfg.llm_lora)
            .into_iter()
            .map(|n| (n, self.cfg.llm_lora.scale()))
            .collect();
        if let Some(l) = &self.cfg.video_encoder_lora {
            t.extend(
                nn::block_targets(&self.cfg.video_encoder.prefix(), self.cfg.video_encoder.n_layers, l)
                    .into_iter()
                    .map(|n| (n, l.scale())),
            );
        }
        t
    }

    /// Folds every adapter into its base weight; the forward pass then skips
    /// the adapter path.
    pub fn merge_lora(&mut self) -> Result<()> {
        if self.merged {
            return Err(Error::State("adapters are already merged".into()));
        }
        for (t, s) in self.adapter_targets() {
            lora::fold_into_base(&mut self.store, &t, F::from_f64c(s), F::one())?;
        }
        self.merged = true;
        Ok(())
    }

    pub fn unmerge_lora(&mut self) -> Result<()> {
        if !self.merged {
            return Err(Error::State("adapters are not merged".into()));
        }
        for (t, s) in self.adapter_targets() {
            lora::fold_into_base(&mut self.store, &t, F::from_f64c(s), -F::one())?;
        }
        self.merged = false;
        Ok(())
    }

    /// Checks that the trainable set is exactly projectors and adapters (plus
    /// video-encoder adapters for VSR) and returns it.
    pub fn audit_trainable(&self) -> Result<Vec<String>> {
        let names = self.store.trainable_names();
        let enc_lora = format!("lora.{}.", self.cfg.video_encoder.prefix());
        for n in &names {
            let ok = n.starts_with("proj.")
                || n.starts_with("lora.llm.")
                || (self.cfg.video_encoder_lora.is_some() && n.starts_with(&enc_lora));
            if !ok {
                return Err(Error::Policy(format!("{n} is trainable but is neither a projector nor an adapter")));
            }
        }
        let count = self.store.count_trainable();
        let analytic = self.cfg.analytic_trainable()?;
        if count != analytic {
            return Err(Error::Policy(format!(
                "trainable count {count} differs from the analytic {analytic}"
            )));
        }
        Ok(names)
    }

    /// Encodes and projects one modality for a batch, returning one token
    /// matrix per sample on `tape`. Frozen encoders run on a private
    /// no-grad tape.
    pub fn modality_tokens(&self, tape: &mut Tape<F>, m: Modality, raws: &[&Tensor<f32>]) -> Result<Vec<Var>> {
        let ecfg = self.cfg.encoder(m);
        let lens: Vec<usize> = raws.iter().map(|r| r.rows()).collect();
        let mut packed = Vec::with_capacity(lens.iter().sum::<usize>() * ecfg.d_in);
        for r in raws {
            if r.cols() != ecfg.d_in {
                return Err(Error::Config(format!(
                    "{} features have width {}, encoder expects {}",
                    m.name(),
                    r.cols(),
                    ecfg.d_in
                )));
            }
            packed.extend(r.data().iter().map(|&x| F::from_f64c(x as f64)));
        }
        let packed = Tensor::new(&[lens.iter().sum(), ecfg.d_in], packed)?;
        let lora = self.encoder_lora(m);
        let feats = if lora.is_some() && tape.grad_enabled() {
            let x = tape.leaf(&packed);
            encoder_forward(tape, &self.store, ecfg, lora, x, &lens)?
        } else {
            let mut t = Tape::no_grad();
            let x = t.leaf(&packed);
            let o = encoder_forward(&mut t, &self.store, ecfg, lora, x, &lens)?;
            tape.leaf(&t.tensor(o))
        };
        let pcfg = self.cfg.projector(m);
        let mut stacked = Vec::with_capacity(lens.len());
        let mut counts = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &l in &lens {
            let s = if lens.len() == 1 { feats } else { tape.slice_rows(feats, off, l)? };
            stacked.push(tape.stack_compress(s, pcfg.k)?);
            counts.push(projector::compressed_len(l, pcfg.k));
            off += l;
        }
        let all = if stacked.len() == 1 { stacked[0] } else { tape.concat_rows(&stacked)? };
        let proj = projector::project(tape, &self.store, m, &pcfg, all)?;
        if counts.len() == 1 {
            return Ok(vec![proj]);
        }
        let mut out = Vec::with_capacity(counts.len());
        let mut off = 0;
        for c in counts {
            out.push(tape.slice_rows(proj, off, c)?);
            off += c;
        }
        Ok(out)
    }

    /// Assembles fused sequences for a batch.
    pub fn fuse_batch(&self, tape: &mut Tape<F>, samples: &[Sample<'_>], mode: Mode) -> Result<Vec<FusedSequence>> {
        let mut tokens: [Option<Vec<Var>>; 2] = [None, None];
        for (slot, m) in [Modality::Audio, Modality::Video].into_iter().enumerate() {
            if !self.task().uses(m) {
                continue;
            }
            let raws: Vec<&Tensor<f32>> = samples
                .iter()
                .map(|s| match m {
                    Modality::Audio => s.audio,
                    Modality::Video => s.video,
                })
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Config(format!("{} needs {} features", self.task(), m.name())))?;
            tokens[slot] = Some(self.modality_tokens(tape, m, &raws)?);
        }
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let a = tokens[0].as_ref().map(|t| t[i]);
                let v = tokens[1].as_ref().map(|t| t[i]);
                fuse(tape, &self.store, a, v, &self.prompt, s.response, mode, self.cfg.fuse)
            })
            .collect()
    }

    /// Mean next-token cross-entropy over every response token in the batch.
    pub fn loss(&self, tape: &mut Tape<F>, samples: &[Sample<'_>]) -> Result<Var> {
        let fused = self.fuse_batch(tape, samples, Mode::Train)?;
        let (logits, fused) = self.packed_logits(tape, fused)?;
        let mut targets = Vec::new();
        let mut mask = Vec::new();
        for f in &fused {
            let (t, m) = f.shifted_targets();
            targets.extend(t);
            mask.extend(m);
        }
        tape.masked_cross_entropy(logits, &targets, &mask)
    }

    fn packed_logits(&self, tape: &mut Tape<F>, fused: Vec<FusedSequence>) -> Result<(Var, Vec<FusedSequence>)> {
        let lens: Vec<usize> = fused.iter().map(FusedSequence::len).collect();
        let parts: Vec<Var> = fused.iter().map(|f| f.embeddings).collect();
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let logits = decoder_forward(tape, &self.store, &self.cfg.decoder, self.llm_lora(), x, &lens, None)?;
        Ok((logits, fused))
    }

    /// Teacher-forced logits `[T×V]` for one sample, with its fused layout.
    pub fn teacher_forced(&self, sample: Sample<'_>) -> Result<(FusedSequence, Vec<f64>)> {
        let mut tape = Tape::no_grad();
        let fused = self.fuse_batch(&mut tape, &[sample], Mode::Train)?;
        let (logits, mut fused) = self.packed_logits(&mut tape, fused)?;
        let vals = tape.value(logits).iter().map(|x| x.as_f64()).collect();
        Ok((fused.remove(0), vals))
    }

    /// Inference-mode prefix for one sample, ready for decoding.
    pub fn session(&self, sample: Sample<'_>) -> Result<LmSession<'_, F>> {
        let mut tape = Tape::no_grad();
        let mut fused = self.fuse_batch(&mut tape, &[Sample { response: &[], ..sample }], Mode::Infer)?;
        let f = fused.remove(0);
        Ok(LmSession {
            cfg: &self.cfg.decoder,
            store: &self.store,
            lora: self.llm_lora(),
            prefix: tape.tensor(f.embeddings),
            eos: EOS,
        })
    }
}
