use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "encoder.mode=passthrough",
    "--set",
    "run.num_envs=2",
    "--set",
    "run.total_steps=64",
    "--set",
    "run.max_episode_steps=30",
    "--set",
    "ppo.rollout_steps=16",
    "--set",
    "ppo.actor_hidden=[8]",
    "--set",
    "ppo.critic_hidden=[8]",
];

fn lidtwist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lidtwist"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn with_tiny<'a>(head: &[&'a str], out: &'a str) -> Vec<&'a str> {
    let mut args = head.to_vec();
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--out", out]);
    args
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_lists_subcommands() {
    let out = lidtwist(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["train", "eval", "ablate", "pretrain-encoder", "export"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn train_is_deterministic_and_echoes_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let a = format!("{root}/a");
    let b = format!("{root}/b");
    for out in [&a, &b] {
        let args = with_tiny(&["train", "--quiet", "--reward-set", "baseline", "--seed", "7"], out);
        let o = lidtwist(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let run = "train-baseline-cylinder-seed7";
    let csv_a = std::fs::read(Path::new(&a).join(run).join("training.csv")).unwrap();
    let csv_b = std::fs::read(Path::new(&b).join(run).join("training.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let config = std::fs::read_to_string(Path::new(&a).join(run).join("config.toml")).unwrap();
    assert!(config.contains("set = \"baseline\""));
    assert!(config.contains("seed = 7"));
    for (key, value) in [
        ("cpr", "8.0"),
        ("crr", "2.0"),
        ("rr", "850.0"),
        ("angle", "20.0"),
        ("action", "0.001"),
        ("work", "1.0"),
        ("gaiting", "8.0"),
    ] {
        assert!(config.contains(&format!("{key} = {value}")), "{key} missing:\n{config}");
    }
    assert!(Path::new(&a).join(run).join("build.txt").exists());
    assert!(Path::new(&a).join(run).join("checkpoints/final.ckpt").exists());
}

#[test]
fn unknown_key_fails_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = lidtwist(&["train", "--set", "ppo.bogus_knob=3", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bogus_knob"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let args = with_tiny(&["eval", "--checkpoint", "/no/such/file.ckpt"], dir.path().to_str().unwrap());
    let o = lidtwist(&args);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does not exist"));
}

#[test]
fn single_episode_eval_then_export() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let args = with_tiny(&["eval", "--scripted", "--episodes", "1"], root);
    let o = lidtwist(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("eval-scripted-cylinder-seed0");
    let traces = run.join("traces");
    assert_eq!(std::fs::read_dir(&traces).unwrap().count(), 1);
    let export = dir.path().join("export");
    let o = lidtwist(&["export", "--traces", traces.to_str().unwrap(), "--out", export.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(run.join("report.csv")).unwrap(),
        std::fs::read(export.join("report.csv")).unwrap()
    );
}

#[test]
fn pretrained_encoder_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.bin");
    let o = lidtwist(&[
        "pretrain-encoder",
        "--set",
        "encoder.pretrain_episodes=4",
        "--set",
        "encoder.pretrain_steps=60",
        "--set",
        "encoder.pretrain_epochs=1",
        "--output",
        path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(&path).unwrap();
    let params = lidtwist::tactile_encoder::EncoderParams::from_bytes(&bytes, &path).unwrap();
    assert_eq!((params.window, params.sensors_per_finger, params.embed_dim), (10, 9, 16));
    assert_eq!(params.to_bytes(), bytes);
}
