//! Run configuration: a TOML file whose every section is optional.
//!
//! ```toml
//! task = "avsr"
//! seed = 0
//!
//! [corpus]
//! vocab_size = 32
//!
//! [sizes]
//! train = 2000
//!
//! [model]
//! k_audio = 2
//! k_video = 1
//!
//! [train]
//! epochs = 10
//!
//! [eval.decode]
//! beam_width = 15
//!
//! [sweep]
//! ks = [1, 2, 3, 4, 5]
//! ```

use std::path::{Path, PathBuf};

use avsr::assembly::Task;
use avsr::data::{Snr, SplitSizes, ToyCorpusSpec};
use avsr::eval::EvalConfig;
use avsr::lora::LoraConfig;
use avsr::model::{ModelConfig, TOY_LORA_RANK};
use avsr::train::TrainConfig;
use avsr::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "AVSR_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Seeds the model initialization and the training order.
    pub seed: u64,
    /// Run artifacts; defaults to `$AVSR_OUT/<task>`.
    pub out_dir: Option<PathBuf>,
    /// Corpus location; defaults to `$AVSR_OUT/corpus`.
    pub corpus_dir: Option<PathBuf>,
    pub corpus: ToyCorpusSpec,
    pub sizes: Sizes,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Asr,
            seed: 0,
            out_dir: None,
            corpus_dir: None,
            corpus: ToyCorpusSpec::default(),
            sizes: Sizes::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Sizes {
            train: 2000,
            valid: 200,
            test: 200,
        }
    }
}

impl From<Sizes> for SplitSizes {
    fn from(s: Sizes) -> Self {
        SplitSizes {
            train: s.train,
            valid: s.valid,
            test: s.test,
        }
    }
}

/// Knobs layered over the toy model preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub k_audio: usize,
    pub k_video: usize,
    pub lora_rank: usize,
    /// Adapter rank on the video encoder (VSR only).
    pub video_encoder_lora_rank: Option<usize>,
    /// Separator token after each modality block.
    pub separator: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            k_audio: 2,
            k_video: 1,
            lora_rank: TOY_LORA_RANK,
            video_encoder_lora_rank: None,
            separator: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Compression rates for the WER-vs-K series.
    pub ks: Vec<usize>,
    /// SNR columns for the noise table.
    pub snrs: Vec<Snr>,
    /// Tasks trained for the WER-vs-K series.
    pub k_tasks: Vec<Task>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            ks: vec![1, 2, 3, 4, 5],
            snrs: avsr::data::default_snr_levels(),
            k_tasks: vec![Task::Asr, Task::Vsr],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    fn out_root() -> PathBuf {
        std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .unwrap_or_else(|| Self::out_root().join(self.task.name()))
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| Self::out_root().join("corpus"))
    }

    pub fn model_config(&self, task: Task) -> Result<ModelConfig> {
        let c = &self.corpus;
        let mut cfg = ModelConfig::toy(task, c.vocab_size, c.d_audio, c.d_video);
        cfg.k_audio = self.model.k_audio;
        cfg.k_video = self.model.k_video;
        cfg.llm_lora = LoraConfig::with_rank(self.model.lora_rank);
        cfg.video_encoder_lora = self.model.video_encoder_lora_rank.map(LoraConfig::with_rank);
        cfg.fuse.separator = self.model.separator;
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model_config(self.task)?;
        self.train_config().validate()?;
        self.eval.decode.validate()?;
        if self.sizes.train == 0 || self.sizes.test == 0 {
            return Err(Error::Config("train and test splits must be non-empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn archived_config_round_trips() {
        let mut cfg = RunConfig::from_toml("task = \"vsr\"\n[model]\nk_video = 3\n[eval]\nsnr = 5.0\n").unwrap();
        cfg.out_dir = Some("x/y".into());
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.task, Task::Vsr);
        assert_eq!(back.model.k_video, 3);
        assert_eq!(back.eval.snr, Snr(5.0));
    }

    #[test]
    fn clean_snr_spellings() {
        for s in ["snrs = [\"inf\", 0.0]", "snrs = [inf, 0]"] {
            let cfg = RunConfig::from_toml(&format!("[sweep]\n{s}\n")).unwrap();
            assert_eq!(cfg.sweep.snrs, vec![Snr::CLEAN, Snr(0.0)]);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("tsak = \"asr\""), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nk = 2"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nepoch = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[eval.decode]\nbeam = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn model_knobs_reach_the_model_config() {
        let cfg = RunConfig::from_toml("seed = 7\n[model]\nk_audio = 5\nlora_rank = 4\n").unwrap();
        let m = cfg.model_config(Task::Asr).unwrap();
        assert_eq!((m.k_audio, m.llm_lora.rank, m.seed), (5, 4, 7));
        assert_eq!(cfg.train_config().seed, 7);
    }
}
