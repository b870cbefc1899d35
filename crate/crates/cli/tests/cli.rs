use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TRAIN: &str = "Context,Utterance,Label
hello there __eou__ __eot__ how are you __eou__,fine thanks,1
hello there __eou__ __eot__ how are you __eou__,the printer is broken,0
my disk is full __eou__ __eot__,run du to find big files,1
my disk is full __eou__ __eot__,hello there,0
how do i install vim __eou__,sudo apt install vim,1
how do i install vim __eou__,fine thanks,0
";

const TEST: &str = "Context,Ground Truth Utterance,Distractor_0,Distractor_1
my disk is full __eou__,run du to find big files,hello there,fine thanks
how do i install vim __eou__ __eot__,sudo apt install vim,the printer is broken,hello
";

const GLOVE: &str = "hello 0.1 0.2 0.3
there 0.0 0.5 -0.1
disk 0.4 0.4 0.1
vim -0.3 0.2 0.9
install -0.2 0.1 0.8
";

const MODEL: [&str; 10] = [
    "--set", "esim.char_hidden=3",
    "--set", "esim.ctx_hidden=4",
    "--set", "esim.mlp_hidden=5",
    "--set", "esim.batch_size=4",
    "--set", "esim.epochs=2",
];

fn nextutt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nextutt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = nextutt(args);
    assert!(out.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err_line(args: &[&str]) -> String {
    let out = nextutt(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let stderr = String::from_utf8(out.stderr).unwrap();
    stderr.lines().find(|l| l.starts_with("error: ")).unwrap_or_else(|| panic!("no error line in {stderr}")).to_string()
}

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Work {
    fn new() -> Work {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("train.csv"), TRAIN).unwrap();
        fs::write(root.join("test.csv"), TEST).unwrap();
        fs::write(root.join("glove.txt"), GLOVE).unwrap();
        Work { _dir: dir, root }
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).to_string_lossy().into_owned()
    }

    /// word2vec (dim 4) + GloVe (dim 3) combined into `combined.txt`.
    fn embeddings(&self) -> String {
        ok(&["train-w2v", "--input", &self.p("train.csv"), "--output", &self.p("w2v.txt"), "--dim", "4", "--min-count", "1"]);
        ok(&["combine", "--pretrained", &self.p("glove.txt"), "--trained", &self.p("w2v.txt"), "--corpus", &self.p("train.csv"), "--output", &self.p("combined.txt")]);
        self.p("combined.txt")
    }

    fn train(&self, out: &str, seed: &str) -> String {
        let (emb, train, test, dir) = (self.embeddings(), self.p("train.csv"), self.p("test.csv"), self.p(out));
        let mut args = vec!["train", "--train", &train, "--valid", &test, "--embeddings", &emb, "--output", &dir];
        args.extend(["--seed", seed, "--set", "esim.word_dim=7"]);
        args.extend(MODEL);
        ok(&args);
        self.p(out)
    }
}

#[test]
fn stats_report() {
    let w = Work::new();
    let out = ok(&["stats", "--input", &w.p("train.csv")]);
    assert!(out.contains("positive_pairs: 3"), "{out}");
    assert!(out.contains("contexts: 3"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&ok(&["stats", "--input", &w.p("train.csv"), "--json"])).unwrap();
    assert_eq!(json["n_negative_pairs"], 3);
}

#[test]
fn combine_concatenates_dims() {
    let w = Work::new();
    let combined = w.embeddings();
    let header = fs::read_to_string(&combined).unwrap();
    let dim: usize = header.lines().next().unwrap().split(' ').nth(1).unwrap().parse().unwrap();
    assert_eq!(dim, 3 + 4);

    let cov = ok(&["coverage", "--corpus", &w.p("train.csv"), "--table", &format!("glove={}", w.p("glove.txt")), "--table", &format!("combined={combined}")]);
    assert!(cov.contains("glove") && cov.contains("combined") && cov.contains("__eou__"), "{cov}");

    let base = ok(&["baseline-eval", "--test", &w.p("test.csv"), "--table", &format!("glove={}", w.p("glove.txt")), "--table", &format!("combined={combined}"), "--csv"]);
    assert_eq!(base.lines().next(), Some("table,metric,value"));
    assert_eq!(base.lines().count(), 1 + 2 * 6);
}

#[test]
fn train_eval_and_cached_scores() {
    let w = Work::new();
    let ckpt = w.train("model", "0");
    assert!(Path::new(&ckpt).join("params.ntar").exists());
    let log = fs::read_to_string(Path::new(&ckpt).join("train.log")).unwrap();
    assert!(log.contains("# seed = 0") && log.contains("valid_r@1="), "{log}");

    let scores = w.p("scores.csv");
    let direct = ok(&["eval", "--checkpoint", &ckpt, "--test", &w.p("test.csv"), "--save-scores", &scores]);
    let cached = ok(&["eval", "--scores", &scores]);
    assert_eq!(direct, cached);
    assert!(direct.contains("R@1"), "{direct}");

    let ensemble = ok(&["eval", "--ensemble", &format!("{ckpt},{ckpt}"), "--test", &w.p("test.csv")]);
    assert_eq!(ensemble, direct);

    let paired = ok(&["eval", "--checkpoint", &ckpt, "--test", &w.p("test.csv"), "--paired"]);
    assert!(paired.contains("with tags") && paired.contains("without tags") && paired.contains("delta"), "{paired}");
    let stripped = ok(&["eval", "--checkpoint", &ckpt, "--test", &w.p("test.csv"), "--strip-tags"]);
    assert!(paired.contains(&format!("without tags\n{stripped}")), "{paired}\n{stripped}");
}

#[test]
fn training_is_reproducible() {
    let w = Work::new();
    let a = w.train("a", "3");
    let b = w.train("b", "3");
    for f in ["params.ntar", "vocab.txt", "config.json", "train.log"] {
        assert_eq!(fs::read(Path::new(&a).join(f)).unwrap(), fs::read(Path::new(&b).join(f)).unwrap(), "{f}");
    }
}

#[test]
fn rank_and_explain() {
    let w = Work::new();
    let ckpt = w.train("model", "0");
    fs::write(w.root.join("cands.txt"), "fine thanks\n\nsudo apt install vim\nhello\n").unwrap();
    let ranked = ok(&["rank", "--checkpoint", &ckpt, "--context", "how do i install vim __eou__", "--candidates", &w.p("cands.txt")]);
    let lines: Vec<&str> = ranked.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("1\t"));

    let one = ok(&["explain", "--checkpoint", &ckpt, "--context", "vim", "--response", "sudo apt install vim"]);
    assert!(one.contains("context:  [vim]"), "{one}");
    let ctx_rank: Vec<&str> = one.lines().skip_while(|l| !l.starts_with("context tokens")).skip(1).take_while(|l| l.starts_with(' ')).collect();
    assert_eq!(ctx_rank.len(), 1);
    assert!(ctx_rank[0].trim_end().ends_with("vim"));
}

#[test]
fn errors_are_one_line_and_named() {
    let w = Work::new();
    let e = err_line(&["stats", "--input", &w.p("nope.csv")]);
    assert!(e.starts_with("error: kind=missing-file msg="), "{e}");

    let e = err_line(&["stats", "--input", &w.p("train.csv"), "--set", "esim.epochs=0"]);
    assert!(e.starts_with("error: kind=config"), "{e}");

    fs::write(w.root.join("bad.toml"), "[esim]\nunknown_field = 1\n").unwrap();
    let e = err_line(&["stats", "--input", &w.p("train.csv"), "--config", &w.p("bad.toml")]);
    assert!(e.starts_with("error: kind=config"), "{e}");

    let e = err_line(&["train", "--train", &w.p("train.csv")]);
    assert!(e.starts_with("error: kind=config") && e.contains("--embeddings"), "{e}");

    let ckpt = w.train("model", "0");
    let manifest = Path::new(&ckpt).join("config.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("\"ctx_hidden\": 4", "\"ctx_hidden\": 6")).unwrap();
    let e = err_line(&["eval", "--checkpoint", &ckpt, "--test", &w.p("test.csv")]);
    assert!(e.starts_with("error: kind=checkpoint"), "{e}");
    assert!(!e.contains('\n'));
}

#[test]
fn config_file_paths_and_echo() {
    let w = Work::new();
    fs::write(
        w.root.join("run.toml"),
        format!("[paths]\ntrain = {:?}\n[word2vec]\ndim = 5\nmin_count = 1\nseed = 9\n", w.p("train.csv")),
    )
    .unwrap();
    let out = nextutt(&["--config", &w.p("run.toml"), "train-w2v", "--output", &w.p("v.txt")]);
    assert!(out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("# [word2vec]") && stderr.contains("# seed = 9"), "{stderr}");
    assert!(fs::read_to_string(w.p("v.txt")).unwrap().lines().next().unwrap().ends_with(" 5"));
}
