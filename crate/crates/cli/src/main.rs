//! `cipherdaug`: one binary for encipherment, subwords, training, decoding,
//! evaluation and analysis. Every command writes `manifest.json` into its
//! `--out` directory.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cipherdaug::trainer::TrainError;

/// Invalid flags or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A significance assertion that did not hold.
#[derive(Debug)]
pub struct AssertionFailed(pub String);

impl std::fmt::Display for AssertionFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for AssertionFailed {}

#[derive(Parser, Debug)]
#[command(name = "cipherdaug", version, about = "ROT-k ciphertext data augmentation for NMT")]
pub struct Cli {
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Encipher (or decipher) a text file with ROT-k.
    Encipher(EncipherArgs),
    /// Learn BPE merges over one or more files.
    LearnBpe(LearnBpeArgs),
    /// Segment a file with learned merges.
    ApplyBpe(ApplyBpeArgs),
    /// Write enciphered views and the multi-source union of a parallel corpus.
    Augment(AugmentArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Translate a file with a trained model.
    Translate(TranslateArgs),
    /// Score translations.
    #[command(subcommand)]
    Evaluate(EvaluateCmd),
    /// Diagnostics over models and corpora.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Generate the synthetic toy translation task.
    ToyData(ToyDataArgs),
}

#[derive(Args, Debug)]
pub struct AlphabetArgs {
    /// `de`, `en` or a file of letters.
    #[arg(long, default_value = "de")]
    pub alphabet: String,
    /// Leave uppercase letters unchanged.
    #[arg(long)]
    pub lowercase_only: bool,
}

#[derive(Args, Debug)]
pub struct EncipherArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub key: u32,
    #[command(flatten)]
    pub alphabet: AlphabetArgs,
    /// Extra codepoint block `start:size`, rotated by the same key (repeatable).
    #[arg(long = "codepoint-block")]
    pub blocks: Vec<String>,
    /// Rotate backwards.
    #[arg(long)]
    pub decipher: bool,
}

#[derive(Args, Debug)]
pub struct LearnBpeArgs {
    /// Input files; learned jointly unless `--separate`.
    #[arg(long = "in", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub merges: usize,
    #[arg(long, default_value_t = cipherdaug::subword::DEFAULT_MARKER)]
    pub marker: char,
    /// One merge table per input file.
    #[arg(long)]
    pub separate: bool,
    /// Tag tokens registered in the vocabulary, e.g. `de,en`.
    #[arg(long, default_value = "")]
    pub tags: String,
}

#[derive(Args, Debug)]
pub struct ApplyBpeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "merges")]
    pub merges: PathBuf,
    #[arg(long, default_value_t = cipherdaug::subword::DEFAULT_MARKER)]
    pub marker: char,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, default_value = "de")]
    pub src_lang: String,
    #[arg(long, default_value = "en")]
    pub tgt_lang: String,
    #[arg(long, default_value = "1,2")]
    pub keys: String,
    /// Add cipher-to-source directions.
    #[arg(long)]
    pub pivot: bool,
    /// Prepend target-language tags to union sources.
    #[arg(long)]
    pub tagged: bool,
    #[command(flatten)]
    pub alphabet: AlphabetArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory with `train.<lang>` and `dev.<lang>` files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "cipherdaug")]
    pub mode: cipherdaug::trainer::Mode,
    /// TOML with [data], [model], [train] and [loss] tables; overrides flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "de")]
    pub src_lang: String,
    #[arg(long, default_value = "en")]
    pub tgt_lang: String,
    /// Cipher keys; defaults to `1,2`, or none in baseline mode.
    #[arg(long)]
    pub keys: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub merges: usize,
    #[command(flatten)]
    pub alphabet: AlphabetArgs,
    /// `desk` or `transformer_iwslt`.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub patience: Option<u64>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// `avg`, `last` or a checkpoint path.
    #[arg(long, default_value = "avg")]
    pub checkpoint: String,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 1.0)]
    pub len_penalty: f64,
}

#[derive(Subcommand, Debug)]
pub enum EvaluateCmd {
    /// Corpus BLEU of whitespace-tokenized hypotheses.
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired bootstrap resampling between two systems.
    Bootstrap {
        #[arg(long)]
        sys_a: PathBuf,
        #[arg(long)]
        sys_b: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Exit 1 unless the p-value is below this.
        #[arg(long)]
        assert_p: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCmd {
    /// Count sentences whose translation collapses under inserted subwords.
    Hallucinations {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of most frequent learned subwords used as perturbations.
        #[arg(long, default_value_t = 50)]
        top_m: usize,
        /// Sentence BLEU (percent) below which a change counts.
        #[arg(long, default_value_t = 1.0)]
        threshold: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        beam: usize,
    },
    /// Rarest subword of each sentence in plaintext and its cipher views.
    Rarity {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        merges: PathBuf,
        /// `token<TAB>frequency` table.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "1,2")]
        keys: String,
        #[command(flatten)]
        alphabet: AlphabetArgs,
        #[arg(long, default_value_t = cipherdaug::subword::DEFAULT_MARKER)]
        marker: char,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quality bucketed by token frequency and reference length.
    Buckets {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// `token<TAB>frequency` table of training counts.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "2,10,100,1000")]
        freq_edges: String,
        #[arg(long, default_value = "10,20,30,40")]
        len_edges: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// PWCCA between encoder layers of two models or two input encodings.
    Pwcca {
        #[command(flatten)]
        model: ModelArgs,
        /// Second model directory; defaults to `--model`.
        #[arg(long)]
        other_model: Option<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        /// Cipher key applied to the input for the first model (0 = plain).
        #[arg(long, default_value_t = 0)]
        key_a: u32,
        #[arg(long, default_value_t = 0)]
        key_b: u32,
        #[arg(long, value_enum, default_value_t = PoolingArg::AllPositions)]
        pooling: PoolingArg,
        #[arg(long)]
        max_rows: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum PoolingArg {
    AllPositions,
    MeanPerSentence,
}

#[derive(Args, Debug)]
pub struct ToyDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML overriding generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub train_pairs: Option<usize>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<AssertionFailed>() {
            return 1;
        }
        if let Some(TrainError::NonFinite { .. }) = cause.downcast_ref::<TrainError>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
