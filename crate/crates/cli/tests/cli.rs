use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use biaffine::checkpoint::load_checkpoint;
use biaffine::conllu::{read_conllu, write_conllu};
use biaffine::synth::{generate_treebank, GrammarSpec, DEFAULT_CLASS_SIZES};
use tempfile::TempDir;

fn biaffine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biaffine")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_fixture(dir: &Path, name: &str, sentences: usize, seed: u64) -> PathBuf {
    let g = GrammarSpec::base(DEFAULT_CLASS_SIZES, 7);
    let tb = generate_treebank(&g, sentences, seed).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, write_conllu(&tb).unwrap()).unwrap();
    path
}

/// Small model, high learning rate: memorizes a handful of sentences in seconds.
const FAST_CONFIG: &str = "\
# tiny model for tests
word_dim=16
char_dim=8
char_hidden=8
feat_dim=8
lstm_hidden=32
arc_dim=32
rel_dim=16
min_word_freq=1
dropout=0
learning_rate=0.01
batch_size=4
max_epochs=60
patience=60
";

#[test]
fn evaluate_identical_files() {
    let dir = TempDir::new().unwrap();
    let gold = write_fixture(dir.path(), "gold.conllu", 5, 1);
    let out = biaffine(&["evaluate", "--gold", path_str(&gold), "--pred", path_str(&gold)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().next(), Some("UAS 100.0% LAS 100.0%"));
}

#[test]
fn missing_file_is_a_one_line_error() {
    let out = biaffine(&["evaluate", "--gold", "/no/such/gold.conllu", "--pred", "/no/such/pred.conllu"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("/no/such/gold.conllu"), "{err}");
    assert!(stdout(&out).is_empty());
}

#[test]
fn malformed_config_is_rejected_before_training() {
    let dir = TempDir::new().unwrap();
    let data = write_fixture(dir.path(), "d.conllu", 3, 1);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "learning_rate=fast\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let d = path_str(&data);
    let out = biaffine(&["train", "--train", d, "--dev", d, "--out", path_str(&ckpt), "--config", path_str(&cfg)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
    assert!(!ckpt.exists());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = TempDir::new().unwrap();
    let data = write_fixture(dir.path(), "d.conllu", 3, 1);
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, "biaffine-checkpoint 99\n").unwrap();
    let out =
        biaffine(&["parse", "--model", path_str(&ckpt), "--input", path_str(&data), "--output", path_str(&dir.path().join("o.conllu"))]);
    assert!(!out.status.success());
    assert_eq!(stderr(&out).trim_end().lines().count(), 1);
}

#[test]
fn split_partitions_the_input() {
    let dir = TempDir::new().unwrap();
    let data = write_fixture(dir.path(), "all.conllu", 20, 3);
    let (tr, dv) = (dir.path().join("tr.conllu"), dir.path().join("dv.conllu"));
    let out = biaffine(&[
        "split",
        "--input",
        path_str(&data),
        "--fraction",
        "0.8",
        "--seed",
        "4",
        "--out-train",
        path_str(&tr),
        "--out-dev",
        path_str(&dv),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let n = |p: &Path| read_conllu(&std::fs::read_to_string(p).unwrap()).unwrap().len();
    assert_eq!((n(&tr), n(&dv)), (16, 4));
}

#[test]
fn gradcheck_passes() {
    let out = biaffine(&["gradcheck", "--seed", "2"]);
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("ok")).count(), 3);
}

#[test]
fn train_parse_evaluate_pipeline() {
    let dir = TempDir::new().unwrap();
    let data = write_fixture(dir.path(), "train.conllu", 8, 5);
    let cfg = dir.path().join("fast.cfg");
    std::fs::write(&cfg, format!("{FAST_CONFIG}seed=3\n")).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let d = path_str(&data);
    // the flag beats the file
    let out = biaffine(&["train", "--train", d, "--dev", d, "--out", path_str(&ckpt), "--config", path_str(&cfg), "--seed", "11"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).lines().any(|l| l.starts_with("epoch   1")));
    let ck = load_checkpoint(&ckpt).unwrap();
    assert_eq!((ck.config.seed, ck.config.dims.lstm_hidden), (11, 32));

    let pred = dir.path().join("pred.conllu");
    let out = biaffine(&["parse", "--model", path_str(&ckpt), "--input", d, "--output", path_str(&pred)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("single root"));
    read_conllu(&std::fs::read_to_string(&pred).unwrap()).unwrap();

    let out = biaffine(&["evaluate", "--gold", d, "--pred", path_str(&pred)]);
    let first = stdout(&out).lines().next().unwrap().to_owned();
    let uas: f64 = first.split_whitespace().nth(1).unwrap().trim_end_matches('%').parse().unwrap();
    assert!(uas >= 99.0, "{first}");

    let tuned = dir.path().join("t.ckpt");
    let more = write_fixture(dir.path(), "more.conllu", 4, 9);
    let out = biaffine(&[
        "finetune",
        "--base",
        path_str(&ckpt),
        "--train",
        path_str(&more),
        "--dev",
        path_str(&more),
        "--out",
        path_str(&tuned),
        "--config",
        path_str(&cfg),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("vocabulary extended"));
    let out = biaffine(&["parse", "--model", path_str(&tuned), "--input", d, "--output", path_str(&pred), "--no-single-root"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("unconstrained"));
}

#[test]
fn synth_generate_writes_all_treebanks() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("synth.cfg");
    std::fs::write(&cfg, "a_sentences=30\nb_sentences=10\nc_sentences=5\n").unwrap();
    let out_dir = dir.path().join("data");
    let out = biaffine(&["synth", "generate", "--config", path_str(&cfg), "--out-dir", path_str(&out_dir), "--seed", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let count = |name: &str| read_conllu(&std::fs::read_to_string(out_dir.join(name)).unwrap()).unwrap().len();
    assert_eq!((count("a.conllu"), count("b_train.conllu") + count("b_dev.conllu"), count("c_test.conllu")), (30, 10, 5));
    let written = std::fs::read_to_string(out_dir.join("experiment.cfg")).unwrap();
    assert!(written.contains("seed=2"));
}

#[test]
fn synth_experiment_reports_three_regimes() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("synth.cfg");
    let small = "a_sentences=24\nb_sentences=12\nc_sentences=6\nmax_epochs=2\nfinetune_max_epochs=2\n\
                 word_dim=8\nchar_dim=4\nchar_hidden=4\nfeat_dim=4\nlstm_hidden=8\narc_dim=8\nrel_dim=4\n";
    std::fs::write(&cfg, small).unwrap();
    let out_dir = dir.path().join("exp");
    let out = biaffine(&["synth", "experiment", "--config", path_str(&cfg), "--out-dir", path_str(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = std::fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert_eq!(report.lines().count(), 4, "{report}");
    for ck in ["a-only.ckpt", "b-only.ckpt", "a_to_b.ckpt"] {
        assert!(out_dir.join(ck).exists(), "{ck}");
    }
}
