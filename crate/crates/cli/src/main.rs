//! `avsr`: generate the toy corpus, train, evaluate, sweep and decode.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 runtime
//! abort.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use avsr::assembly::Task;
use avsr::data::Snr;
use avsr::Error;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "avsr", version, about = "Toy audio-visual speech recognition with a frozen LLM")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        valid_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
        /// Corpus seed.
        #[arg(long)]
        data_seed: Option<u64>,
    },
    /// Train projectors and adapters on the train split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        /// Validate the config and print the token budget without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Decode the test split and report WER.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// WER against compression rate and against SNR, with SVG plots.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        eval: EvalArgs,
        /// Compression rates, comma separated.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// SNR levels in dB, comma separated; `inf` is clean.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snrs: Option<Vec<Snr>>,
        /// Tasks of the compression series, comma separated.
        #[arg(long, value_delimiter = ',')]
        k_tasks: Option<Vec<Task>>,
        #[arg(long)]
        skip_k: bool,
        #[arg(long)]
        skip_noise: bool,
        /// Reuse a trained ASR model for the noise table.
        #[arg(long)]
        asr_checkpoint: Option<PathBuf>,
        /// Reuse a trained AVSR model for the noise table.
        #[arg(long)]
        avsr_checkpoint: Option<PathBuf>,
    },
    /// Decode one test utterance and show the details.
    Decode {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Position within the test split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run config; flags override its values.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default `$AVSR_OUT/<task>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus directory (default `$AVSR_OUT/corpus`).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    k_audio: Option<usize>,
    #[arg(long)]
    k_video: Option<usize>,
    #[arg(long)]
    lora_rank: Option<usize>,
    /// Disable babble augmentation during training.
    #[arg(long)]
    clean_train: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Greedy decoding instead of beam search.
    #[arg(long)]
    greedy: bool,
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<Snr>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_utterances: Option<usize>,
}

impl Common {
    fn load(&self) -> avsr::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
                e => e,
            })?,
            None => RunConfig::default(),
        };
        if let Some(t) = self.task {
            cfg.task = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        if let Some(c) = &self.corpus {
            cfg.corpus_dir = Some(c.clone());
        }
        Ok(cfg)
    }
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(e) = self.epochs {
            t.epochs = e;
        }
        if self.lr.is_some() {
            t.lr_peak = self.lr;
        }
        if let Some(b) = self.batch_size {
            t.batch_size = b;
        }
        if self.clean_train {
            t.noise = None;
        }
        let m = &mut cfg.model;
        if let Some(k) = self.k_audio {
            m.k_audio = k;
        }
        if let Some(k) = self.k_video {
            m.k_video = k;
        }
        if let Some(r) = self.lora_rank {
            m.lora_rank = r;
        }
    }
}

impl EvalArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let e = &mut cfg.eval;
        e.greedy |= self.greedy;
        if let Some(s) = self.snr {
            e.snr = s;
        }
        if let Some(b) = self.beam_width {
            e.decode.beam_width = b;
        }
        if let Some(t) = self.temperature {
            e.decode.temperature = t;
        }
        if self.max_utterances.is_some() {
            e.max_utterances = self.max_utterances;
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Param(_) | Error::Format(_) | Error::Json(_) => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> avsr::Result<()> {
    match cli.cmd {
        Cmd::GenerateData {
            common,
            vocab_size,
            train_size,
            valid_size,
            test_size,
            data_seed,
        } => {
            let mut cfg = common.load()?;
            if let Some(v) = vocab_size {
                cfg.corpus.vocab_size = v;
            }
            if let Some(n) = train_size {
                cfg.sizes.train = n;
            }
            if let Some(n) = valid_size {
                cfg.sizes.valid = n;
            }
            if let Some(n) = test_size {
                cfg.sizes.test = n;
            }
            if let Some(s) = data_seed {
                cfg.corpus.seed = s;
            }
            commands::generate_data(&cfg, common.force)
        }
        Cmd::Train { common, train, dry_run } => {
            let mut cfg = common.load()?;
            train.apply(&mut cfg);
            commands::train(&cfg, common.force, dry_run)
        }
        Cmd::Evaluate { common, eval, checkpoint } => {
            let mut cfg = common.load()?;
            eval.apply(&mut cfg);
            commands::evaluate(&cfg, checkpoint)
        }
        Cmd::Sweep {
            common,
            train,
            eval,
            ks,
            snrs,
            k_tasks,
            skip_k,
            skip_noise,
            asr_checkpoint,
            avsr_checkpoint,
        } => {
            let mut cfg = common.load()?;
            train.apply(&mut cfg);
            eval.apply(&mut cfg);
            if let Some(k) = ks {
                cfg.sweep.ks = k;
            }
            if let Some(s) = snrs {
                cfg.sweep.snrs = s;
            }
            if let Some(t) = k_tasks {
                cfg.sweep.k_tasks = t;
            }
            let opts = commands::SweepOptions {
                k_series: !skip_k,
                noise_table: !skip_noise,
                asr_checkpoint,
                avsr_checkpoint,
                force: common.force,
            };
            commands::sweep(&cfg, &opts)
        }
        Cmd::Decode {
            common,
            eval,
            checkpoint,
            index,
        } => {
            let mut cfg = common.load()?;
            eval.apply(&mut cfg);
            commands::decode(&cfg, checkpoint, index)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
