use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use cipherdaug::analysis::{
    collect_activations, count_hallucinations, heatmap_csv, pwcca_heatmap, rare_subword_stats, bucketed_quality,
    ModelTranslator, PerturbationSpec, Pooling,
};
use cipherdaug::cipher::{encipher_corpus, encipher_text, CipherKey, CipherSpec, CodepointBlock, TextCipher};
use cipherdaug::corpus::{build_naive_lines, read_lines, ParallelCorpus};
use cipherdaug::eval::{bootstrap_compare, corpus_bleu, Smoothing};
use cipherdaug::io::RunManifest;
use cipherdaug::model::{load_checkpoint, Precision, Transformer};
use cipherdaug::pipeline::{prepare, translate_sentences};
use cipherdaug::subword::{apply_bpe, learn_bpe, learn_bpe_separate, tag_token, vocab_stats, MergeTable, Vocab, DEFAULT_MARKER};
use cipherdaug::synthetic::{generate, ToyTaskConfig};
use cipherdaug::trainer::{source_prefix, train, LogRecord, Mode, TrainError, TrainOptions, TrainData};
use cipherdaug::Execution;

use crate::config::{self, parse_keys, parse_list, DataConfig, RunConfig};
use crate::{
    AnalyzeCmd, ApplyBpeArgs, AssertionFailed, AugmentArgs, Cli, Command, EncipherArgs, EvaluateCmd, LearnBpeArgs, ModelArgs,
    PoolingArg, PrecisionArg, ToyDataArgs, TrainArgs, TranslateArgs, UsageError,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const MERGES_FILE: &str = "merges.txt";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const LOG_FILE: &str = "train_log.jsonl";

pub fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    match cli.command {
        Command::Encipher(a) => encipher(a),
        Command::LearnBpe(a) => learn(a),
        Command::ApplyBpe(a) => apply(a),
        Command::Augment(a) => augment(a, exec),
        Command::Train(a) => train_cmd(a, exec),
        Command::Translate(a) => translate(a, exec),
        Command::Evaluate(c) => evaluate(c, exec),
        Command::Analyze(c) => analyze(c, exec),
        Command::ToyData(a) => toy_data(a),
    }
}

fn manifest(subcommand: &str) -> RunManifest {
    let mut m = RunManifest::new(subcommand);
    m.args = std::env::args().collect();
    m
}

fn add_inputs(m: &mut RunManifest, paths: &[&Path]) -> Result<()> {
    for p in paths {
        m.add_input(p).with_context(|| format!("reading {}", p.display()))?;
    }
    Ok(())
}

/// Records every file under `out` as an artifact and writes the manifest.
fn finish(mut m: RunManifest, out: &Path) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != cipherdaug::io::MANIFEST_FILE))
        .collect();
    files.sort();
    for f in &files {
        m.add_artifact(f);
    }
    m.write(out).with_context(|| format!("writing manifest in {}", out.display()))
}

fn out_dir(out: &Path, inputs: &[&Path]) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    inputs.iter().try_for_each(|i| check_not_input(i, out))
}

/// Refuses to write `out`'s files over an input.
fn check_not_input(input: &Path, out: &Path) -> Result<()> {
    let target = out.join(input.file_name().unwrap_or_default());
    if let (Ok(a), Ok(b)) = (input.canonicalize(), target.canonicalize()) {
        if a == b {
            return Err(UsageError(format!("--out would overwrite input {}", input.display())).into());
        }
    }
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into())
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for l in lines {
        writeln!(w, "{}", l.as_ref())?;
    }
    Ok(w.flush()?)
}

fn encipher(a: EncipherArgs) -> Result<()> {
    out_dir(&a.out, &[&a.input])?;
    let mut cipher = TextCipher::new(config::alphabet(&a.alphabet.alphabet, a.alphabet.lowercase_only)?);
    for b in &a.blocks {
        cipher = cipher.with_block(CodepointBlock::parse(b).map_err(UsageError)?);
    }
    let text = read_text(&a.input)?;
    let key = CipherKey(a.key);
    let out = if a.decipher { cipher.decipher(&text, key) } else { cipher.encipher(&text, key) };
    fs::write(a.out.join(file_name(&a.input)), out)?;
    let mut m = manifest("encipher");
    m.config = serde_json::json!({
        "key": a.key,
        "decipher": a.decipher,
        "alphabet": a.alphabet.alphabet,
        "lowercase_only": a.alphabet.lowercase_only,
        "codepoint_blocks": a.blocks,
    });
    add_inputs(&mut m, &[&a.input])?;
    finish(m, &a.out)
}

fn side_names(inputs: &[PathBuf]) -> Vec<String> {
    let names: Vec<String> = inputs.iter().map(|p| file_name(p)).collect();
    names
        .iter()
        .enumerate()
        .map(|(i, n)| if names.iter().filter(|o| *o == n).count() > 1 { format!("{n}#{i}") } else { n.clone() })
        .collect()
}

fn stats_table(sides: &[(String, usize)], total: usize) -> String {
    let mut s = String::from("side\ttypes\n");
    for (name, n) in sides {
        s.push_str(&format!("{name}\t{n}\n"));
    }
    s.push_str(&format!("joint\t{total}\n"));
    s
}

fn learn(a: LearnBpeArgs) -> Result<()> {
    let refs: Vec<&Path> = a.inputs.iter().map(PathBuf::as_path).collect();
    out_dir(&a.out, &refs)?;
    let corpora: Vec<Vec<String>> = a.inputs.iter().map(|p| read_lines(p)).collect::<Result<_, _>>()?;
    let slices: Vec<&[String]> = corpora.iter().map(Vec::as_slice).collect();
    let names = side_names(&a.inputs);
    let tags: Vec<String> = parse_list::<String>(&a.tags)?.iter().map(|t| tag_token(t)).collect();
    let all: Vec<&str> = corpora.iter().flatten().map(String::as_str).collect();
    if a.separate {
        let tables = learn_bpe_separate(&slices, a.merges, a.marker)?;
        for ((name, table), lines) in names.iter().zip(&tables).zip(&corpora) {
            table.save(&a.out.join(format!("merges.{name}.txt")))?;
            Vocab::from_corpus(&tags, lines, table)?.save(&a.out.join(format!("vocab.{name}.tsv")))?;
            let st = vocab_stats(&[(name.as_str(), &lines[..])], table);
            fs::write(a.out.join(format!("stats.{name}.tsv")), stats_table(&st.sides, st.total))?;
        }
    } else {
        let merges = learn_bpe(&slices, a.merges, a.marker)?;
        merges.save(&a.out.join(MERGES_FILE))?;
        Vocab::from_corpus(&tags, &all, &merges)?.save(&a.out.join(VOCAB_FILE))?;
        let sides: Vec<(&str, &[String])> = names.iter().map(String::as_str).zip(slices.iter().copied()).collect();
        let st = vocab_stats(&sides, &merges);
        let table = stats_table(&st.sides, st.total);
        emit(&table)?;
        fs::write(a.out.join("stats.tsv"), table)?;
    }
    let mut m = manifest("learn-bpe");
    m.config = serde_json::json!({
        "merges": a.merges,
        "marker": a.marker.to_string(),
        "separate": a.separate,
        "tags": tags,
    });
    add_inputs(&mut m, &refs)?;
    finish(m, &a.out)
}

fn apply(a: ApplyBpeArgs) -> Result<()> {
    out_dir(&a.out, &[&a.input])?;
    let merges = MergeTable::load(&a.merges, a.marker)?;
    let text = read_text(&a.input)?;
    let lines: Vec<String> = text.lines().map(|l| merges.segment(l).join(" ")).collect();
    write_lines(&a.out.join(file_name(&a.input)), &lines)?;
    let mut m = manifest("apply-bpe");
    m.config = serde_json::json!({ "marker": a.marker.to_string() });
    add_inputs(&mut m, &[&a.input, &a.merges])?;
    finish(m, &a.out)
}

fn augment(a: AugmentArgs, exec: Execution) -> Result<()> {
    out_dir(&a.out, &[&a.src, &a.tgt])?;
    let corpus = ParallelCorpus::load(&a.src_lang, &a.tgt_lang, &a.src, &a.tgt)?;
    let keys = parse_keys(&a.keys)?;
    let alphabet = config::alphabet(&a.alphabet.alphabet, a.alphabet.lowercase_only)?;
    let spec = CipherSpec::new(alphabet, keys.iter().map(|&k| CipherKey(k)).collect())?;
    let ciphered = encipher_corpus(&corpus, &spec, exec)?;
    for ds in &ciphered {
        write_lines(&a.out.join(format!("source.{}", ds.lang)), &ds.sources())?;
    }
    let union = build_naive_lines(&corpus, &ciphered, a.pivot)?;
    let src: Vec<String> = union
        .iter()
        .map(|l| if a.tagged { l.tagged_source() } else { l.source.clone() })
        .collect();
    let tgt: Vec<&str> = union.iter().map(|l| l.target.as_str()).collect();
    write_lines(&a.out.join("union.src"), &src)?;
    write_lines(&a.out.join("union.tgt"), &tgt)?;
    let mut m = manifest("augment");
    m.config = serde_json::json!({
        "keys": keys,
        "pivot": a.pivot,
        "tagged": a.tagged,
        "alphabet": a.alphabet.alphabet,
        "lowercase_only": a.alphabet.lowercase_only,
        "pairs": corpus.len(),
        "union_lines": union.len(),
    });
    add_inputs(&mut m, &[&a.src, &a.tgt])?;
    finish(m, &a.out)
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let keys = match &a.keys {
        Some(s) => parse_keys(s)?,
        None if a.mode == Mode::Baseline => Vec::new(),
        None => vec![1, 2],
    };
    cfg.data = DataConfig {
        dir: a.data.clone(),
        src_lang: a.src_lang.clone(),
        tgt_lang: a.tgt_lang.clone(),
        keys,
        merges: a.merges,
        alphabet: a.alphabet.alphabet.clone(),
        lowercase_only: a.alphabet.lowercase_only,
        precision: match a.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        },
    };
    cfg.model = cipherdaug::model::ModelConfig::preset(&a.preset, 0)
        .ok_or_else(|| UsageError(format!("unknown preset {:?}", a.preset)))?;
    cfg.model.seed = a.seed;
    cfg.train.seed = a.seed;
    cfg.train.mode = a.mode;
    if let Some(b) = a.beta {
        cfg.loss.beta = b;
    }
    if let Some(t) = a.tau {
        cfg.loss.tau = t;
    }
    if let Some(s) = a.max_steps {
        cfg.train.max_steps = s;
    }
    if let Some(p) = a.patience {
        cfg.train.patience = p;
    }
    if let Some(path) = &a.config {
        cfg = cfg.overlay_file(path)?;
    }
    cfg.train.validate().map_err(|e| UsageError(e.to_string()))?;
    cfg.loss.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn split_paths(data: &DataConfig, split: &str) -> (PathBuf, PathBuf) {
    (
        data.dir.join(format!("{split}.{}", data.src_lang)),
        data.dir.join(format!("{split}.{}", data.tgt_lang)),
    )
}

#[derive(Serialize)]
struct TrainSummary {
    steps: u64,
    stop: cipherdaug::trainer::StopReason,
    best_dev_nll: f64,
    best_step: u64,
    dropped: usize,
    vocab_size: usize,
}

fn train_cmd(a: TrainArgs, exec: Execution) -> Result<()> {
    let mut cfg = resolve_train_config(&a)?;
    let (train_src, train_tgt) = split_paths(&cfg.data, "train");
    let (dev_src, dev_tgt) = split_paths(&cfg.data, "dev");
    out_dir(&a.out, &[&train_src, &train_tgt, &dev_src, &dev_tgt])?;
    let d = &cfg.data;
    let train_corpus = ParallelCorpus::load(&d.src_lang, &d.tgt_lang, &train_src, &train_tgt)?;
    let dev_corpus = ParallelCorpus::load(&d.src_lang, &d.tgt_lang, &dev_src, &dev_tgt)?;
    let alphabet = config::alphabet(&d.alphabet, d.lowercase_only)?;
    let prep = prepare(&train_corpus, &dev_corpus, &alphabet, &d.cipher_keys(), d.merges, exec)?;
    cfg.model.vocab_size = prep.vocab.len();
    cfg.model.validate().map_err(|e| UsageError(e.to_string()))?;
    prep.merges.save(&a.out.join(MERGES_FILE))?;
    prep.vocab.save(&a.out.join(VOCAB_FILE))?;
    let echo = cfg.to_toml()?;
    fs::write(a.out.join(CONFIG_FILE), &echo)?;

    let mut log = BufWriter::new(fs::File::create(a.out.join(LOG_FILE))?);
    let mut log_err: Option<std::io::Error> = None;
    let mut on_record = |r: &LogRecord| {
        let line = serde_json::to_string(r).expect("log records serialize");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    };
    let opts = TrainOptions {
        exec,
        checkpoint_dir: Some(a.out.clone()),
        config_echo: echo,
        on_record: Some(&mut on_record),
    };
    let data = TrainData {
        train: &prep.train,
        dev: &prep.dev,
        vocab: &prep.vocab,
    };
    let result = match cfg.data.precision {
        Precision::F32 => {
            let mut model = Transformer::<f32>::new(cfg.model.clone())?;
            train(&mut model, data, &cfg.train, &cfg.loss, opts).map(|o| (o.steps, o.stop, o.best_dev_nll, o.best_step, o.dropped))
        }
        Precision::F64 => {
            let mut model = Transformer::<f64>::new(cfg.model.clone())?;
            train(&mut model, data, &cfg.train, &cfg.loss, opts).map(|o| (o.steps, o.stop, o.best_dev_nll, o.best_step, o.dropped))
        }
    };
    log.flush()?;
    if let Some(e) = log_err {
        return Err(e).context("writing training log");
    }
    let mut m = manifest("train");
    m.config = serde_json::to_value(&cfg)?;
    m.seed = Some(a.seed);
    m.derived_seeds.insert("model_init".into(), cfg.model.seed);
    m.derived_seeds.insert("dropout_and_batches".into(), cfg.train.seed);
    let mut inputs: Vec<&Path> = vec![&train_src, &train_tgt, &dev_src, &dev_tgt];
    if let Some(c) = &a.config {
        inputs.push(c);
    }
    add_inputs(&mut m, &inputs)?;
    match result {
        Ok((steps, stop, best_dev_nll, best_step, dropped)) => {
            let summary = TrainSummary {
                steps,
                stop,
                best_dev_nll,
                best_step,
                dropped,
                vocab_size: cfg.model.vocab_size,
            };
            write_json(&a.out.join("summary.json"), &summary)?;
            emit(&format!("{}\n", serde_json::to_string(&summary)?))?;
            finish(m, &a.out)
        }
        Err(e) => {
            if let TrainError::NonFinite { dump, .. } = &e {
                fs::write(a.out.join("nonfinite_dump.txt"), dump)?;
            }
            finish(m, &a.out)?;
            Err(e.into())
        }
    }
}

struct LoadedModel {
    cfg: RunConfig,
    checkpoint: PathBuf,
    merges: MergeTable,
    vocab: Vocab,
    model: Transformer<f32>,
    prefix: Option<u32>,
}

fn load_model(dir: &Path, which: &str) -> Result<LoadedModel> {
    let checkpoint = match which {
        "avg" => dir.join("checkpoint_avg.ckpt"),
        "last" => dir.join("checkpoint_last.ckpt"),
        path => PathBuf::from(path),
    };
    let ckpt = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cfg: RunConfig = toml::from_str(&ckpt.config).context("checkpoint config echo")?;
    let merges = MergeTable::load(&dir.join(MERGES_FILE), DEFAULT_MARKER)?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != cfg.model.vocab_size {
        return Err(anyhow!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            cfg.model.vocab_size
        ));
    }
    let model = Transformer::with_params(cfg.model.clone(), ckpt.params)?;
    let prefix = source_prefix(cfg.train.mode, &vocab, &cfg.data.tgt_lang);
    Ok(LoadedModel {
        cfg,
        checkpoint,
        merges,
        vocab,
        model,
        prefix,
    })
}

fn model_inputs<'a>(m: &'a LoadedModel, dir: &'a Path) -> [PathBuf; 3] {
    [m.checkpoint.clone(), dir.join(MERGES_FILE), dir.join(VOCAB_FILE)]
}

fn translate(a: TranslateArgs, exec: Execution) -> Result<()> {
    if a.beam == 0 {
        return Err(UsageError("--beam must be at least 1".into()).into());
    }
    out_dir(&a.out, &[&a.input])?;
    let lm = load_model(&a.model.model, &a.model.checkpoint)?;
    let text = read_text(&a.input)?;
    let sources: Vec<&str> = text.lines().collect();
    let hyps = translate_sentences(&lm.model, &lm.merges, &lm.vocab, &sources, lm.prefix, a.beam, a.len_penalty, exec)?;
    write_lines(&a.out.join("hyp.txt"), &hyps)?;
    let mut m = manifest("translate");
    m.config = serde_json::json!({ "beam": a.beam, "len_penalty": a.len_penalty, "model": lm.cfg });
    let extra = model_inputs(&lm, &a.model.model);
    add_inputs(&mut m, &[&a.input, &extra[0], &extra[1], &extra[2]])?;
    finish(m, &a.out)
}

fn lines_of(p: &Path) -> Result<Vec<String>> {
    Ok(read_text(p)?.lines().map(str::to_string).collect())
}

fn evaluate(c: EvaluateCmd, exec: Execution) -> Result<()> {
    match c {
        EvaluateCmd::Bleu { hyp, reference, out } => {
            let (h, r) = (lines_of(&hyp)?, lines_of(&reference)?);
            let report = corpus_bleu(&h, &r, 4, Smoothing::Exp)?;
            emit(&format!("{}\n", serde_json::to_string_pretty(&report)?))?;
            if let Some(out) = out {
                out_dir(&out, &[])?;
                write_json(&out.join("bleu.json"), &report)?;
                let mut m = manifest("evaluate-bleu");
                m.config = serde_json::json!({ "max_n": 4, "smoothing": "exp" });
                add_inputs(&mut m, &[&hyp, &reference])?;
                finish(m, &out)?;
            }
            Ok(())
        }
        EvaluateCmd::Bootstrap {
            sys_a,
            sys_b,
            reference,
            samples,
            seed,
            assert_p,
            out,
        } => {
            let (a, b, r) = (lines_of(&sys_a)?, lines_of(&sys_b)?, lines_of(&reference)?);
            let res = bootstrap_compare(&a, &b, &r, samples, seed, exec)?;
            emit(&format!("{}\n", serde_json::to_string_pretty(&res)?))?;
            if let Some(out) = out {
                out_dir(&out, &[])?;
                write_json(&out.join("bootstrap.json"), &res)?;
                let mut m = manifest("evaluate-bootstrap");
                m.config = serde_json::json!({ "samples": samples, "assert_p": assert_p });
                m.seed = Some(seed);
                add_inputs(&mut m, &[&sys_a, &sys_b, &reference])?;
                finish(m, &out)?;
            }
            match assert_p {
                Some(t) if res.p_value >= t => Err(AssertionFailed(format!("p-value {} is not below {t}", res.p_value)).into()),
                _ => Ok(()),
            }
        }
    }
}

fn analyze(c: AnalyzeCmd, exec: Execution) -> Result<()> {
    match c {
        AnalyzeCmd::Hallucinations {
            model,
            input,
            out,
            top_m,
            threshold,
            seed,
            beam,
        } => hallucinations(&model, &input, &out, top_m, threshold, seed, beam, exec),
        AnalyzeCmd::Rarity {
            input,
            merges,
            vocab,
            keys,
            alphabet,
            marker,
            out,
        } => {
            out_dir(&out, &[&input])?;
            let merges_t = MergeTable::load(&merges, marker)?;
            let freq = Vocab::load(&vocab)?;
            let alpha = config::alphabet(&alphabet.alphabet, alphabet.lowercase_only)?;
            let keys = parse_keys(&keys)?;
            let lines = read_lines(&input)?;
            let mut sides: Vec<(String, Vec<Vec<String>>)> =
                vec![("plain".into(), lines.iter().map(|l| merges_t.segment(l)).collect())];
            for &k in &keys {
                let seg = lines.iter().map(|l| merges_t.segment(&encipher_text(l, CipherKey(k), &alpha))).collect();
                sides.push((format!("rot{k}"), seg));
            }
            let refs: Vec<(&str, &[Vec<String>])> = sides.iter().map(|(n, s)| (n.as_str(), &s[..])).collect();
            let report = rare_subword_stats(&refs, |t| freq.frequency(t));
            for (i, row) in report.rarest.iter().enumerate() {
                let cells: Vec<String> = row.iter().zip(&report.min_freq[i]).map(|(t, f)| format!("{t}\t{f}")).collect();
                emit(&format!("{}\n", cells.join("\t")))?;
            }
            write_json(&out.join("rarity.json"), &report)?;
            let mut m = manifest("analyze-rarity");
            m.config = serde_json::json!({ "keys": keys, "alphabet": alphabet.alphabet, "marker": marker.to_string() });
            add_inputs(&mut m, &[&input, &merges, &vocab])?;
            finish(m, &out)
        }
        AnalyzeCmd::Buckets {
            hyp,
            reference,
            vocab,
            freq_edges,
            len_edges,
            out,
        } => {
            out_dir(&out, &[])?;
            let freq = Vocab::load(&vocab)?;
            let fe: Vec<u64> = parse_list(&freq_edges)?;
            let le: Vec<usize> = parse_list(&len_edges)?;
            if !fe.windows(2).all(|w| w[0] < w[1]) || !le.windows(2).all(|w| w[0] < w[1]) {
                return Err(UsageError("bucket edges must be strictly increasing".into()).into());
            }
            let tok = |p: &Path| -> Result<Vec<Vec<String>>> {
                Ok(lines_of(p)?.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect())
            };
            let (h, r) = (tok(&hyp)?, tok(&reference)?);
            if h.len() != r.len() {
                return Err(anyhow!("{} hypotheses for {} references", h.len(), r.len()));
            }
            let report = bucketed_quality(&h, &r, |t| freq.frequency(t), &fe, &le);
            emit(&format!("{}\n", serde_json::to_string_pretty(&report)?))?;
            write_json(&out.join("buckets.json"), &report)?;
            let mut m = manifest("analyze-buckets");
            m.config = serde_json::json!({ "freq_edges": fe, "len_edges": le });
            add_inputs(&mut m, &[&hyp, &reference, &vocab])?;
            finish(m, &out)
        }
        AnalyzeCmd::Pwcca {
            model,
            other_model,
            input,
            key_a,
            key_b,
            pooling,
            max_rows,
            out,
        } => {
            out_dir(&out, &[&input])?;
            let a = load_model(&model.model, &model.checkpoint)?;
            let b_dir = other_model.unwrap_or_else(|| model.model.clone());
            let b = load_model(&b_dir, &model.checkpoint)?;
            let lines = lines_of(&input)?;
            let encode = |m: &LoadedModel, key: u32| -> Result<Vec<Vec<u32>>> {
                let alpha = config::alphabet(&m.cfg.data.alphabet, m.cfg.data.lowercase_only)?;
                Ok(lines
                    .iter()
                    .map(|l| {
                        let text = encipher_text(l, CipherKey(key), &alpha);
                        m.prefix
                            .into_iter()
                            .chain(apply_bpe(&text, &m.merges, &m.vocab).tokens)
                            .take(m.model.config.max_len)
                            .collect()
                    })
                    .collect())
            };
            let (ids_a, ids_b) = (encode(&a, key_a)?, encode(&b, key_b)?);
            let mut pool = match pooling {
                PoolingArg::AllPositions => Pooling::AllPositions,
                PoolingArg::MeanPerSentence => Pooling::MeanPerSentence,
            };
            let misaligned = ids_a.iter().zip(&ids_b).filter(|(x, y)| x.len() != y.len()).count();
            let fallback = pool == Pooling::AllPositions && misaligned > 0;
            if fallback {
                eprintln!("{misaligned} sentences segment to different lengths; using mean-per-sentence rows");
                pool = Pooling::MeanPerSentence;
            }
            let label = |k: u32| if k == 0 { "plain".to_string() } else { format!("rot{k}") };
            let acts_a = collect_activations(&a.model, &ids_a, &label(key_a), pool, max_rows, exec)?;
            let acts_b = collect_activations(&b.model, &ids_b, &label(key_b), pool, max_rows, exec)?;
            let heat = pwcca_heatmap(&acts_a, &acts_b, exec)?;
            let rows: Vec<String> = acts_a.iter().map(|m| format!("a{}:{}", m.layer, m.encoding)).collect();
            let cols: Vec<String> = acts_b.iter().map(|m| format!("b{}:{}", m.layer, m.encoding)).collect();
            let csv = heatmap_csv(&heat, &rows, &cols);
            emit(&csv)?;
            fs::write(out.join("pwcca.csv"), csv)?;
            let mut m = manifest("analyze-pwcca");
            m.config = serde_json::json!({
                "key_a": key_a,
                "key_b": key_b,
                "requested_pooling": pooling_name(pooling),
                "pooling": pool,
                "pooling_fallback": fallback,
                "misaligned_sentences": misaligned,
                "max_rows": max_rows,
                "rows": acts_a.first().map(|x| x.data.nrows()),
            });
            let mut inputs: Vec<PathBuf> = vec![input.clone()];
            inputs.extend(model_inputs(&a, &model.model));
            if b_dir != model.model {
                inputs.extend(model_inputs(&b, &b_dir));
            }
            let refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            add_inputs(&mut m, &refs)?;
            finish(m, &out)
        }
    }
}

fn pooling_name(p: PoolingArg) -> &'static str {
    match p {
        PoolingArg::AllPositions => "all-positions",
        PoolingArg::MeanPerSentence => "mean-per-sentence",
    }
}

#[allow(clippy::too_many_arguments)]
fn hallucinations(
    model: &ModelArgs,
    input: &Path,
    out: &Path,
    top_m: usize,
    threshold: f64,
    seed: u64,
    beam: usize,
    exec: Execution,
) -> Result<()> {
    out_dir(out, &[input])?;
    let lm = load_model(&model.model, &model.checkpoint)?;
    let spec = PerturbationSpec::top_m(&lm.vocab, top_m, threshold, seed);
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let sources: Vec<Vec<String>> = lines_of(input)?.iter().map(|l| lm.merges.segment(l)).collect();
    let translator = ModelTranslator {
        model: &lm.model,
        vocab: &lm.vocab,
        prefix: lm.prefix,
        beam,
        len_penalty: 1.0,
        max_len: lm.model.config.max_len.saturating_sub(1),
    };
    let report = count_hallucinations(&translator, &sources, &spec, exec)?;
    emit(&format!("{} of {} sentences hallucinate\n", report.count, report.sentences))?;
    write_json(&out.join("hallucinations.json"), &report)?;
    let mut m = manifest("analyze-hallucinations");
    m.config = serde_json::json!({ "perturbation": spec, "beam": beam });
    m.seed = Some(seed);
    let extra = model_inputs(&lm, &model.model);
    add_inputs(&mut m, &[input, &extra[0], &extra[1], &extra[2]])?;
    finish(m, out)
}

fn toy_data(a: ToyDataArgs) -> Result<()> {
    out_dir(&a.out, &[])?;
    let mut cfg = ToyTaskConfig {
        seed: a.seed,
        ..Default::default()
    };
    if let Some(n) = a.train_pairs {
        cfg.train_pairs = n;
    }
    if let Some(path) = &a.config {
        cfg = config::overlay(&cfg, path, None)?;
    }
    let task = generate(&cfg);
    for (split, corpus) in [("train", &task.train), ("dev", &task.dev), ("test", &task.test)] {
        write_lines(&a.out.join(format!("{split}.{}", corpus.src_lang)), &corpus.sources())?;
        write_lines(&a.out.join(format!("{split}.{}", corpus.tgt_lang)), &corpus.targets())?;
    }
    let mut m = manifest("toy-data");
    m.config = serde_json::to_value(&cfg)?;
    m.seed = Some(cfg.seed);
    if let Some(c) = &a.config {
        add_inputs(&mut m, &[c])?;
    }
    finish(m, &a.out)
}
