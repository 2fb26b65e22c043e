use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 7] = ["train", "eval", "sweep", "trace", "probe-gnn", "gradcheck", "flops"];
const FLAGS: [&str; 10] = [
    "--config",
    "--ckpt",
    "--data",
    "--capacity-override",
    "--grid",
    "--seed",
    "--threads",
    "--out",
    "--text",
    "--epsilon",
];

fn itt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &str = r#"{
    "seq_len": 16, "batch_size": 2, "steps": 4, "eval_every": 2, "eval_batches": 1,
    "d_model": 16, "n_heads": 2, "n_layers": 2, "lr": 0.01, "warmup_steps": 1,
    "variant": "itt", "thinking_steps": 4
}"#;

fn write_inputs(dir: &Path) {
    fs::write(dir.join("tiny.json"), TINY).unwrap();
    let text = "the cat sat on the mat and the dog sat on the log. ".repeat(8);
    fs::write(dir.join("data.txt"), text).unwrap();
}

fn train_into(dir: &Path, name: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let o = itt(&[
        "train",
        "--config",
        dir.join("tiny.json").to_str().unwrap(),
        "--data",
        dir.join("data.txt").to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn every_subcommand_has_help_listing_all_flags() {
    for sub in SUBCOMMANDS {
        let o = itt(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for flag in FLAGS {
            assert!(text.contains(flag), "{sub} --help misses {flag}");
        }
    }
    assert_eq!(code(&itt(&["--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let o = itt(&["train", "--text", "hello", "--out", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--text cannot be used with `train`"));

    let o = itt(&["gradcheck", "--ckpt", "a", "--epsilon", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--ckpt, --epsilon"));

    assert_eq!(code(&itt(&["eval", "--no-such-flag"])), 1);
    assert_eq!(code(&itt(&["nonsense"])), 1);
    assert_eq!(code(&itt(&[])), 1);
    assert_eq!(code(&itt(&["eval", "--data", "d.txt"])), 1);
    assert_eq!(code(&itt(&["flops", "--config", "a", "--ckpt", "b"])), 1);
    assert_eq!(code(&itt(&["gradcheck", "--threads", "0"])), 1);
    assert_eq!(code(&itt(&["gradcheck", "--seed", "many"])), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ittc");
    let o = itt(&["eval", "--ckpt", missing.to_str().unwrap(), "--data", "x.txt"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.ittc"));

    let bad = dir.path().join("bad.ittc");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = itt(&["trace", "--ckpt", bad.to_str().unwrap(), "--text", "hi"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn flops_reports_seventy_percent_for_four_steps_at_half_capacity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    fs::write(&cfg, r#"{"variant": "itt", "thinking_steps": 4, "capacities": [0.5, 0.5, 0.5]}"#).unwrap();
    let o = itt(&["flops", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("70.00% of Loop x4"), "{}", stdout(&o));

    let o = itt(&["flops", "--config", cfg.to_str().unwrap(), "--capacity-override", "s4=0.5"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_passes_for_a_seed() {
    let o = itt(&["gradcheck", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    assert!(text.contains("itt_layer"));
}

#[test]
fn train_is_reproducible_and_feeds_every_probe() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_inputs(d);
    let a = train_into(d, "a");
    let b = train_into(d, "b");
    for f in ["metrics.jsonl", "model.ittc", "config.json", "invocation.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let ckpt = a.join("model.ittc");
    let ckpt = ckpt.to_str().unwrap();
    let data = d.join("data.txt");
    let data = data.to_str().unwrap();

    let o = itt(&["eval", "--ckpt", ckpt, "--data", data, "--capacity-override", "s1=0.7,s2=0.7,s3=0.9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("loss ") && line.contains(" ppl ") && line.contains("0.7/0.7/0.9"), "{line}");

    let report = d.join("eval.json");
    let o = itt(&[
        "eval", "--ckpt", ckpt, "--data", data, "--epsilon", "inf", "--threads", "2", "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["threads"], 2);
    let hist = json["early_exit"]["histogram"].as_array().unwrap();
    assert_eq!(hist.len(), 5);
    assert_eq!(hist[0], json["tokens"]);

    let sweeps: Vec<String> = (0..2)
        .map(|_| {
            let o = itt(&["sweep", "--ckpt", ckpt, "--data", data]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            stdout(&o)
        })
        .collect();
    assert_eq!(sweeps[0], sweeps[1]);
    assert_eq!(sweeps[0].lines().count(), 2 + 6);

    let grid = d.join("grid.txt");
    fs::write(&grid, "0.5/0.5/0.5\n0.7,0.7,off\n").unwrap();
    let o = itt(&["sweep", "--ckpt", ckpt, "--data", data, "--grid", grid.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("# grid=0.5/0.5/0.5;0.7/0.7/off\n"));

    let o = itt(&["trace", "--ckpt", ckpt, "--text", "the cat", "--capacity-override", "s3=off"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(trace["tokens"].as_array().unwrap().len(), 7);
    assert!(trace["layers"][0]["steps"][2]["capacity"].is_null());

    let gnn = d.join("gnn");
    let o = itt(&["probe-gnn", "--ckpt", ckpt, "--seed", "1", "--out", gnn.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = fs::read_to_string(gnn.join("gnn.csv")).unwrap();
    assert!(rows.starts_with("sample_id,label,layer,wq,wk,wv,wo,sum\n"));
    assert_eq!(rows.lines().count(), 1 + 50 * 2);
    assert!(gnn.join("gnn_summary.csv").exists());

    let o = itt(&["flops", "--ckpt", ckpt]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("of Loop x4"));
}
