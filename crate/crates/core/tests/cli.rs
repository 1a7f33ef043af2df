use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn xview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xview"))
        .args(args)
        .args(["--threads", "1"])
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_dataset(dir: &Path) {
    let out = dir.to_str().unwrap();
    let o = xview(&["synth-gen", "--pairs", "40", "--test-pairs", "10", "--gallery-extra", "10", "--seed", "3", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn every_subcommand_help_lists_flags_and_defaults() {
    let cases: [(&str, &[&str]); 6] = [
        ("synth-gen", &["--pairs", "--test-pairs", "--gallery-extra", "--image-size", "--frames", "--config", "--seed", "--out"]),
        ("train", &["--data", "--config", "--steps", "--batch-size", "--seed", "--no-pmd", "--no-pfr", "--box-input", "--resume", "--save-every", "--out"]),
        ("eval", &["--data", "--ckpt", "--shortlist", "--no-rerank", "--text", "--out"]),
        ("ablate", &["--data", "--rows", "--seeds", "--shortlist", "--out"]),
        ("export-attn", &["--data", "--ckpt", "--pair", "--reduce", "--out"]),
        ("grad-check", &["--config", "--seed", "--tolerance"]),
    ];
    for (cmd, flags) in cases {
        let o = xview(&[cmd, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help misses {f}");
        }
        assert!(text.contains("[default:"), "{cmd} --help shows no defaults");
        assert!(text.contains("--threads"));
    }
}

#[test]
fn unknown_flag_and_invalid_config_exit_1() {
    assert_eq!(code(&xview(&["train", "--bogus"])), 1);
    assert_eq!(code(&xview(&["no-such-command"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds");
    tiny_dataset(&data);
    let o = xview(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--batch-size",
        "1",
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = xview(&[
        "eval",
        "--data",
        dir.path().join("absent").to_str().unwrap(),
        "--ckpt",
        dir.path().join("absent.bin").to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn synth_gen_writes_requested_record_count() {
    let dir = tempfile::tempdir().unwrap();
    let o = xview(&["synth-gen", "--pairs", "600", "--seed", "7", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 600);
    assert!(dir.path().join("images").is_dir() && dir.path().join("clips/0/frame_000.png").is_file());
}

#[test]
fn grad_check_passes_on_the_micro_model() {
    let o = xview(&["grad-check"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("objective"));
}

#[test]
fn train_eval_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ds");
    tiny_dataset(&data);
    let d = data.to_str().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = xview(&["train", "--data", d, "--steps", "4", "--batch-size", "4", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o).trim().to_string()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.len(), 64);
    assert_eq!(a, b);
    let loss = fs::read_to_string(dir.path().join("a/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 5);

    let ckpt = dir.path().join("a/model.bin");
    let ckpt = ckpt.to_str().unwrap();
    let eval_out = dir.path().join("eval");
    let o = xview(&["eval", "--data", d, "--ckpt", ckpt, "--out", eval_out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(eval_out.join("report.csv").is_file() && eval_out.join("report.json").is_file());

    let attn_out = dir.path().join("attn");
    let o = xview(&["export-attn", "--data", d, "--ckpt", ckpt, "--pair", "0", "--reduce", "mean", "--out", attn_out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(attn_out.join("attn.bin").is_file());
    let pgm = fs::read(attn_out.join("frame_000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
}
