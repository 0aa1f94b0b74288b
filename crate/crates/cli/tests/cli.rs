use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "
env.kind = seq_bandit
env.k = 3
env.n_primitive = 3
net.d_model = 8
net.ff_hidden = 8
diffusion.n_steps = 3
value.hidden = 8
pmd.m = 4
pmd.states = 2
learner.batch = 8
total_env_steps = 100
eval_every = 50
eval_episodes = 10
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffpolicy")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_tiny(dir: &Path) -> String {
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out_dir = format!("out_dir={}", dir.join("out").display());
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--set", &out_dir]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    text.lines().filter_map(|l| l.strip_prefix("checkpoint ")).last().expect("a checkpoint line").to_string()
}

#[test]
fn train_then_eval_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    assert!(dir.path().join("out/metrics.jsonl").exists());

    let o = run(&["eval", "--checkpoint", &ckpt, "--episodes", "20"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("episodes 20 mean_return"));

    let o = run(&["sample", "--checkpoint", &ckpt, "--n", "5"]);
    assert!(o.status.success());
    let lines: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 5);
    for line in lines {
        let tokens: Vec<usize> = line.split(' ').map(|t| t.parse().unwrap()).collect();
        assert_eq!(tokens.len(), 3);
        assert!(tokens.iter().all(|&t| t < 3));
    }
}

#[test]
fn same_seed_same_samples() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let a = run(&["sample", "--checkpoint", &ckpt, "--n", "8", "--seed", "3"]);
    let b = run(&["sample", "--checkpoint", &ckpt, "--n", "8", "--seed", "3"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "env.kind = seq_bandit\nnot.a.key = 1\n").unwrap();
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));

    std::fs::write(&cfg, TINY).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--set", "pmd.lambda=-1"]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(run(&["train", "--config", "/nonexistent/x.cfg"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["eval"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_fails() {
    let o = run(&["eval", "--checkpoint", "/nonexistent/ckpt_1.rld2"]);
    assert!(!o.status.success());
}

#[test]
fn quick_oracle_check_passes() {
    let o = run(&["oracle-check", "--quick"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(!text.contains("FAIL"));
    assert!(text.trim_end().ends_with("checks passed"));
}
