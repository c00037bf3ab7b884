use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rewardlab::eval::{strip_eos, DecodeMode};
use rewardlab::{Checkpoint, ScorerConfig, ScorerParams};

const TINY: &[&str] = &[
    "task.n_parallel=60",
    "task.n_nonparallel=80",
    "task.n_test=20",
    "task.max_len=6",
    "horizon=8",
    "embed_dim=8",
    "hidden_dim=16",
    "tf.max_epochs=40",
    "tf.peak_lr=2e-2",
    "tf.warmup=10",
    "self_train.max_epochs=3",
    "rl.updates=6",
    "rl.k=3",
    "rl.batch_size=4",
    "rl.eval_every=3",
    "regressor.epochs=2",
    "regressor.hypotheses=1",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rewardlab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn rewardlab")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.cfg");
    let mut text = String::from("# desk-size settings for tests\n");
    for kv in TINY {
        text.push_str(kv);
        text.push('\n');
    }
    fs::write(&path, text).unwrap();
    path
}

fn gen(dir: &Path, task: &str, seed: u64) -> PathBuf {
    let data = dir.join(format!("data-{task}-{seed}"));
    let cfg = write_config(dir);
    ok(&[
        "gen-data",
        "--task",
        task,
        "--seed",
        &seed.to_string(),
        "--out",
        p(&data),
        "--config",
        p(&cfg),
    ]);
    data
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_reproducible_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "synonym", 3);
    let b = dir.path().join("again");
    let cfg = write_config(dir.path());
    ok(&[
        "gen-data",
        "--task",
        "synonym",
        "--seed",
        "3",
        "--out",
        p(&b),
        "--config",
        p(&cfg),
    ]);
    for split in ["parallel", "nonparallel", "test"] {
        let name = format!("synonym.{split}.jsonl");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
    let nonparallel = fs::read_to_string(a.join("synonym.nonparallel.jsonl")).unwrap();
    assert!(!nonparallel.contains("tgt"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn eval_of_untrained_checkpoint_is_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "cipher", 0);
    let ckpt = dir.path().join("untrained.json");
    let params = ScorerParams::init(ScorerConfig::new(27, 8), 1).unwrap();
    Checkpoint::from_params(&params, 1, None).save(&ckpt).unwrap();
    let report = dir.path().join("report.csv");
    let outputs = dir.path().join("outputs.jsonl");
    ok(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--decode",
        "beam5",
        "--report",
        p(&report),
        "--outputs",
        p(&outputs),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "method,bleu2,bleu4,sbleu4,ibleu4,n_pairs");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let bleu4: f64 = row[2].parse().unwrap();
    assert!(bleu4 < 5.0, "untrained BLEU-4 {bleu4}");
    assert_eq!(row[5], "20");
    assert_eq!(fs::read_to_string(&outputs).unwrap().lines().count(), 20);
    assert!(dir.path().join("report.csv.manifest.json").exists());
}

#[test]
fn full_pipeline_runs_and_leaves_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "cipher", 1);
    let cfg = write_config(d);
    let before = snapshot(&data);

    let sup = d.join("sup.json");
    ok(&[
        "train-tf",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--seed",
        "1",
        "--out",
        p(&sup),
    ]);
    assert!(d.join("sup.json.curve.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("sup.json.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["rl"]["sync_period"], 3);
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 5);

    let st = d.join("st.json");
    ok(&[
        "self-train",
        "--data",
        p(&data),
        "--init",
        p(&sup),
        "--config",
        p(&cfg),
        "--out",
        p(&st),
    ]);

    let reg = d.join("reg.json");
    ok(&[
        "train-regressor",
        "--data",
        p(&data),
        "--init",
        p(&sup),
        "--config",
        p(&cfg),
        "--out",
        p(&reg),
    ]);

    let snaps = d.join("snaps");
    for reward in ["induced", "induced-sparse", "rregress-sparse", "rregress-dense"] {
        let out = d.join(format!("rl-{reward}.json"));
        ok(&[
            "train-rl",
            "--data",
            p(&data),
            "--init",
            p(&sup),
            "--reward",
            reward,
            "--regressor",
            p(&reg),
            "--snapshots",
            p(&snaps),
            "--config",
            p(&cfg),
            "--out",
            p(&out),
        ]);
        let curve = fs::read_to_string(d.join(format!("rl-{reward}.json.curve.csv"))).unwrap();
        assert_eq!(curve.lines().count(), 7, "{curve}");
        assert!(curve.lines().next().unwrap().ends_with("sync_flag,method"));
    }
    assert!(snaps.join("update000003.json").exists());
    assert!(snaps.join("update000006.json").exists());
    let ckpt = Checkpoint::load(&d.join("rl-induced.json")).unwrap();
    assert!(ckpt.optimizer().unwrap().is_some());

    let hist = d.join("hist.csv");
    ok(&[
        "reward-hist",
        "--ckpt",
        p(&sup),
        "--data",
        p(&data),
        "--methods",
        "induced,sentence-bleu,rregress-dense",
        "--regressor",
        p(&reg),
        "--trajectories",
        "30",
        "--config",
        p(&cfg),
        "--out",
        p(&hist),
    ]);
    let text = fs::read_to_string(&hist).unwrap();
    assert_eq!(text.lines().next().unwrap(), "bin_lo,bin_hi,count,method");
    for m in ["induced", "sentence-bleu", "rregress-dense"] {
        let total: usize = text
            .lines()
            .skip(1)
            .filter(|l| l.ends_with(&format!(",{m}")))
            .map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap())
            .sum();
        assert!(total >= 30, "{m}: {total}");
    }

    assert_eq!(before, snapshot(&data));
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "cipher", 2);
    let cfg = write_config(d);
    let a = d.join("a.json");
    let b = d.join("b.json");
    ok(&[
        "--threads",
        "1",
        "train-tf",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&a),
    ]);
    ok(&[
        "--threads",
        "3",
        "train-tf",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&b),
    ]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ra = d.join("ra.json");
    let rb = d.join("rb.json");
    for (threads, out) in [("1", &ra), ("2", &rb)] {
        ok(&[
            "--threads",
            threads,
            "train-rl",
            "--data",
            p(&data),
            "--init",
            p(&a),
            "--reward",
            "induced",
            "--config",
            p(&cfg),
            "--out",
            p(out),
        ]);
    }
    assert_eq!(fs::read(&ra).unwrap(), fs::read(&rb).unwrap());

    let params = Checkpoint::load(&a).unwrap().params().unwrap();
    let out = rewardlab::eval::decode(&params, &[3, 4, 5], DecodeMode::Greedy).unwrap();
    assert!(strip_eos(&out).len() <= 8);
}

#[test]
fn usage_and_schema_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["verify", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["verify", "--suite", "thm9"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let data = gen(d, "cipher", 0);
    let sup = d.join("sup.json");
    let params = ScorerParams::init(ScorerConfig::new(27, 8), 0).unwrap();
    Checkpoint::from_params(&params, 0, None).save(&sup).unwrap();
    let out = d.join("rl.json");
    let k0 = run(&[
        "train-rl",
        "--data",
        p(&data),
        "--init",
        p(&sup),
        "--reward",
        "induced",
        "--k",
        "0",
        "--out",
        p(&out),
    ]);
    assert_eq!(k0.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&k0.stderr).contains("sync"),
        "{}",
        String::from_utf8_lossy(&k0.stderr)
    );
    assert!(!out.exists());

    let missing = run(&[
        "eval",
        "--ckpt",
        p(&d.join("nope.json")),
        "--data",
        p(&data),
        "--report",
        p(&d.join("r.csv")),
    ]);
    assert_eq!(missing.status.code(), Some(1));

    let wrong_vocab = d.join("wrong.json");
    let params = ScorerParams::init(ScorerConfig::new(9, 8), 0).unwrap();
    Checkpoint::from_params(&params, 0, None)
        .save(&wrong_vocab)
        .unwrap();
    let r = run(&[
        "eval",
        "--ckpt",
        p(&wrong_vocab),
        "--data",
        p(&data),
        "--report",
        p(&d.join("r.csv")),
    ]);
    assert_eq!(r.status.code(), Some(1));

    let bad = d.join("bad.cfg");
    fs::write(&bad, "rl.k = 2\nnot a setting\n").unwrap();
    let r = run(&[
        "train-tf",
        "--data",
        p(&data),
        "--config",
        p(&bad),
        "--out",
        p(&d.join("x.json")),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains(":2:"));

    let np = data.join("cipher.nonparallel.jsonl");
    let text = fs::read_to_string(&np).unwrap();
    let first = text.lines().next().unwrap().replace('}', ",\"tgt\":[1]}");
    fs::write(&np, format!("{first}\n")).unwrap();
    let r = run(&["train-tf", "--data", p(&data), "--out", p(&d.join("y.json"))]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "cipher", 0);
    let cfg = write_config(d);
    let r = run(&[
        "train-tf",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--set",
        "tf.peak_lr=1e300",
        "--out",
        p(&d.join("z.json")),
    ]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn verify_reports_each_suite() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("verify.json");
    let out = ok(&["verify", "--suite", "thm1", "--report", p(&report)]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("[PASS] thm1"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v[0]["suite"], "thm1");
    assert_eq!(v[0]["passed"], true);
    let r = run(&["verify", "--suite", "is-unbiased"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stdout).starts_with("[FAIL] is-unbiased"));
}

#[test]
fn sweep_k_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("k.csv");
    ok(&[
        "sweep-k",
        "--values",
        "1,3",
        "--seeds",
        "0",
        "--task",
        "cipher",
        "--config",
        p(&cfg),
        "--out",
        p(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "sweep,value,seed,method,update,bleu2,bleu4,sbleu4,ibleu4"
    );
    assert_eq!(text.lines().count(), 1 + 2 * (3 + 1));
}
