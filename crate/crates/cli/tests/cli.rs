use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cipherdaug::model::load_checkpoint;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cipherdaug"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}", path.display()))).unwrap()
}

fn line_count(path: PathBuf) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(name)
}

const TINY: &str = "\
[model]
layers = 1
embed_dim = 32
ffn_dim = 64
dropout = 0.0
[train]
max_steps = 40
warmup_steps = 10
validate_every = 20
log_every = 10
peak_lr = 0.002
batch_tokens = 300
checkpoint_keep = 2
average_last = 2
[loss]
agreement_warmup_steps = 10
";

fn toy(dir: &Path, pairs: &str) {
    ok(dir, &["toy-data", "--out", "data", "--train-pairs", pairs]);
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
}

#[test]
fn encipher_appendix_goldens() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("plain.txt"), "hey, warum nicht?\nwir alle lieben baseball, oder?\n").unwrap();
    ok(t.path(), &["encipher", "--in", "plain.txt", "--out", "k1", "--key", "1"]);
    ok(t.path(), &["encipher", "--in", "plain.txt", "--out", "k2", "--key", "2"]);
    assert_eq!(
        fs::read_to_string(t.path().join("k1/plain.txt")).unwrap(),
        "ifz, xbsvn ojdiu?\nxjs bmmf mjfcfo cbtfcbmm, pefs?\n"
    );
    assert_eq!(
        fs::read_to_string(t.path().join("k2/plain.txt")).unwrap(),
        "jgß, yctwo pkejv?\nykt cnng nkgdgp dcugdcnn, qfgt?\n"
    );
    let m = json(t.path().join("k1/manifest.json"));
    assert_eq!(m["subcommand"], "encipher");
    assert_eq!(m["config"]["key"], 1);
    assert_eq!(m["inputs"].as_object().unwrap().len(), 1);
}

#[test]
fn key_zero_copies_and_keys_compose() {
    let t = TempDir::new().unwrap();
    let text = "Grüße aus Köln!\r\nzebra 42 ✓\n\nno newline";
    fs::write(t.path().join("in.txt"), text).unwrap();
    ok(t.path(), &["encipher", "--in", "in.txt", "--out", "k0", "--key", "0"]);
    assert_eq!(fs::read(t.path().join("k0/in.txt")).unwrap(), text.as_bytes());
    assert!(t.path().join("k0/manifest.json").exists());

    ok(t.path(), &["encipher", "--alphabet", "en", "--in", "in.txt", "--out", "a", "--key", "1"]);
    ok(t.path(), &["encipher", "--alphabet", "en", "--in", "a/in.txt", "--out", "b", "--key", "25"]);
    assert_eq!(fs::read(t.path().join("b/in.txt")).unwrap(), text.as_bytes());
    ok(t.path(), &["encipher", "--in", "a/in.txt", "--out", "c", "--key", "1", "--alphabet", "en", "--decipher"]);
    assert_eq!(fs::read(t.path().join("c/in.txt")).unwrap(), text.as_bytes());
}

#[test]
fn encipher_refuses_to_overwrite_input() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("in.txt"), "abc\n").unwrap();
    let out = run(t.path(), &["encipher", "--in", "in.txt", "--out", ".", "--key", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fs::read_to_string(t.path().join("in.txt")).unwrap(), "abc\n");
}

#[test]
fn augment_line_counts() {
    let t = TempDir::new().unwrap();
    toy(t.path(), "30");
    let n = line_count(t.path().join("data/train.de"));
    ok(t.path(), &["augment", "--src", "data/train.de", "--tgt", "data/train.en", "--keys", "1,2", "--out", "plain"]);
    assert_eq!(line_count(t.path().join("plain/union.src")), 3 * n);
    assert_eq!(line_count(t.path().join("plain/union.tgt")), 3 * n);
    assert_eq!(line_count(t.path().join("plain/source.de1")), n);
    ok(
        t.path(),
        &["augment", "--src", "data/train.de", "--tgt", "data/train.en", "--keys", "1,2", "--pivot", "--tagged", "--out", "pivot"],
    );
    let src = fs::read_to_string(t.path().join("pivot/union.src")).unwrap();
    assert_eq!(src.lines().count(), 5 * n);
    assert!(src.lines().all(|l| l.starts_with("<2en> ") || l.starts_with("<2de> ")));
    assert_eq!(src.lines().filter(|l| l.starts_with("<2de> ")).count(), 2 * n);
}

#[test]
fn learn_and_apply_bpe() {
    let t = TempDir::new().unwrap();
    toy(t.path(), "50");
    let stdout = ok(
        t.path(),
        &["learn-bpe", "--in", "data/train.de", "data/train.en", "--merges", "50", "--tags", "de,en", "--out", "bpe"],
    );
    assert!(stdout.starts_with("side\ttypes\ntrain.de\t"));
    assert!(stdout.contains("\njoint\t"));
    assert_eq!(line_count(t.path().join("bpe/merges.txt")), 50);
    let vocab = fs::read_to_string(t.path().join("bpe/vocab.tsv")).unwrap();
    assert!(vocab.starts_with("<2de>\t0\n<2en>\t0\n"));
    ok(t.path(), &["apply-bpe", "--in", "data/train.de", "--merges", "bpe/merges.txt", "--out", "seg"]);
    let orig = fs::read_to_string(t.path().join("data/train.de")).unwrap();
    let seg = fs::read_to_string(t.path().join("seg/train.de")).unwrap();
    for (o, s) in orig.lines().zip(seg.lines()) {
        let joined: String = s.split(' ').collect();
        assert_eq!(joined.replace('\u{2581}', " ").trim_start(), o);
    }
}

#[test]
fn train_translate_evaluate_round_trip() {
    let t = TempDir::new().unwrap();
    toy(t.path(), "60");
    let summary = ok(
        t.path(),
        &["train", "--data", "data", "--out", "model", "--config", "tiny.toml", "--merges", "100"],
    );
    assert!(summary.contains("\"steps\":40"));
    for f in ["checkpoint_avg.ckpt", "checkpoint_last.ckpt", "config.toml", "merges.txt", "vocab.tsv", "train_log.jsonl", "manifest.json"] {
        assert!(t.path().join("model").join(f).exists(), "missing {f}");
    }
    let m = json(t.path().join("model/manifest.json"));
    assert_eq!(m["config"]["train"]["max_steps"], 40);
    assert_eq!(m["config"]["model"]["embed_dim"], 32);
    assert_eq!(m["inputs"].as_object().unwrap().len(), 5);

    ok(t.path(), &["translate", "--model", "model", "--in", "data/test.de", "--out", "tr", "--beam", "2"]);
    assert_eq!(line_count(t.path().join("tr/hyp.txt")), line_count(t.path().join("data/test.de")));
    ok(t.path(), &["translate", "--model", "model", "--checkpoint", "last", "--in", "data/test.de", "--out", "tr1", "--beam", "1"]);
    assert!(t.path().join("tr1/manifest.json").exists());

    let report: Value = serde_json::from_str(&ok(
        t.path(),
        &["evaluate", "bleu", "--hyp", "data/test.en", "--ref", "data/test.en", "--out", "self"],
    ))
    .unwrap();
    assert_eq!(report["bleu"], 100.0);
    assert!(t.path().join("self/manifest.json").exists());
}

fn train_log(dir: &Path) -> String {
    fs::read_to_string(dir.join("train_log.jsonl")).unwrap()
}

#[test]
fn baseline_equals_keyless_cipherdaug() {
    let t = TempDir::new().unwrap();
    toy(t.path(), "40");
    let common = ["--data", "data", "--config", "tiny.toml", "--merges", "80", "--seed", "3"];
    let mut a = vec!["train", "--out", "base", "--mode", "baseline"];
    a.extend(common);
    ok(t.path(), &a);
    let mut b = vec!["train", "--out", "cd", "--mode", "cipherdaug", "--keys", "", "--beta", "0"];
    b.extend(common);
    ok(t.path(), &b);
    assert_eq!(train_log(&t.path().join("base")), train_log(&t.path().join("cd")));
    let params = |d: &str| load_checkpoint(&t.path().join(d).join("checkpoint_last.ckpt")).unwrap().params;
    assert_eq!(params("base"), params("cd"));
}

#[test]
fn config_file_overrides_flags() {
    let t = TempDir::new().unwrap();
    toy(t.path(), "20");
    fs::write(t.path().join("c.toml"), format!("{TINY}[data]\nmerges = 30\n")).unwrap();
    ok(
        t.path(),
        &["train", "--data", "data", "--out", "m", "--config", "c.toml", "--merges", "500", "--max-steps", "7"],
    );
    let m = json(t.path().join("m/manifest.json"));
    assert_eq!(m["config"]["data"]["merges"], 30);
    assert_eq!(m["config"]["train"]["max_steps"], 40);
}

#[test]
fn exit_codes() {
    let t = TempDir::new().unwrap();
    assert_eq!(run(t.path(), &["encipher", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(t.path(), &[]).status.code(), Some(1));
    assert_eq!(run(t.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(
        run(t.path(), &["encipher", "--in", "missing.txt", "--out", "o", "--key", "1"]).status.code(),
        Some(2)
    );
    toy(t.path(), "20");
    fs::write(t.path().join("bad.toml"), "[nonsense]\nx = 1\n").unwrap();
    let out = run(t.path(), &["train", "--data", "data", "--out", "m", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn non_finite_training_exits_three() {
    let t = TempDir::new().unwrap();
    toy(t.path(), "20");
    let cfg = TINY.replace("peak_lr = 0.002", "peak_lr = 1e300");
    fs::write(t.path().join("boom.toml"), cfg).unwrap();
    let out = run(t.path(), &["train", "--data", "data", "--out", "m", "--config", "boom.toml", "--merges", "30"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(t.path().join("m/nonfinite_dump.txt").exists());
    assert!(t.path().join("m/manifest.json").exists());
}

#[test]
fn bootstrap_assertion() {
    let t = TempDir::new().unwrap();
    let refs: Vec<String> = (0..40).map(|i| format!("the cat number {i} sat on the mat")).collect();
    let junk: Vec<String> = (0..40).map(|i| format!("zz{i} qq")).collect();
    fs::write(t.path().join("ref.txt"), refs.join("\n")).unwrap();
    fs::write(t.path().join("junk.txt"), junk.join("\n")).unwrap();
    ok(
        t.path(),
        &["evaluate", "bootstrap", "--sys-a", "ref.txt", "--sys-b", "junk.txt", "--ref", "ref.txt", "--assert-p", "0.01", "--out", "bs"],
    );
    assert!(json(t.path().join("bs/bootstrap.json"))["p_value"].as_f64().unwrap() < 0.01);
    let same = run(
        t.path(),
        &["evaluate", "bootstrap", "--sys-a", "ref.txt", "--sys-b", "ref.txt", "--ref", "ref.txt", "--assert-p", "0.05"],
    );
    assert_eq!(same.status.code(), Some(1));
}

#[test]
fn rarity_reproduces_appendix_counts() {
    let t = TempDir::new().unwrap();
    let plain = fixture("rarity_plain.txt");
    let merges = fixture("rarity_merges.txt");
    let vocab = fixture("rarity_vocab.tsv");
    ok(
        t.path(),
        &[
            "analyze",
            "rarity",
            "--in",
            plain.to_str().unwrap(),
            "--merges",
            merges.to_str().unwrap(),
            "--vocab",
            vocab.to_str().unwrap(),
            "--keys",
            "1,2",
            "--out",
            "rar",
        ],
    );
    let r = json(t.path().join("rar/rarity.json"));
    assert_eq!(r["min_freq"], serde_json::json!([[2, 26, 15], [7, 14, 14]]));
    assert_eq!(r["rarest"][0], serde_json::json!(["\u{2581}hey", "\u{2581}if", "\u{2581}jg"]));
}

#[test]
fn analyses_on_a_trained_model() {
    let t = TempDir::new().unwrap();
    toy(t.path(), "60");
    ok(t.path(), &["train", "--data", "data", "--out", "model", "--config", "tiny.toml", "--merges", "100"]);
    let heat = ok(t.path(), &["analyze", "pwcca", "--model", "model", "--in", "data/dev.de", "--out", "pw"]);
    let row: Vec<&str> = heat.lines().nth(1).unwrap().split(',').collect();
    let v: f64 = row[1].parse().unwrap();
    assert!((v - 1.0).abs() < 1e-6, "self similarity {v}");
    assert_eq!(json(t.path().join("pw/manifest.json"))["config"]["pooling_fallback"], false);

    ok(t.path(), &["analyze", "pwcca", "--model", "model", "--in", "data/dev.de", "--key-b", "1", "--out", "pw1"]);
    let m = json(t.path().join("pw1/manifest.json"));
    if m["config"]["misaligned_sentences"].as_u64().unwrap() > 0 {
        assert_eq!(m["config"]["pooling_fallback"], true);
        assert_eq!(m["config"]["pooling"], "mean-per-sentence");
    }

    let head: String = fs::read_to_string(t.path().join("data/test.de")).unwrap().lines().take(8).map(|l| format!("{l}\n")).collect();
    fs::write(t.path().join("few.de"), head).unwrap();
    ok(
        t.path(),
        &["analyze", "hallucinations", "--model", "model", "--in", "few.de", "--top-m", "3", "--beam", "1", "--out", "hal"],
    );
    let h = json(t.path().join("hal/hallucinations.json"));
    assert_eq!(h["sentences"], 8);

    ok(t.path(), &["translate", "--model", "model", "--in", "data/test.de", "--out", "tr", "--beam", "1"]);
    ok(
        t.path(),
        &["analyze", "buckets", "--hyp", "tr/hyp.txt", "--ref", "data/test.en", "--vocab", "model/vocab.tsv", "--out", "bk"],
    );
    assert!(json(t.path().join("bk/buckets.json"))["length"].is_array());
}
