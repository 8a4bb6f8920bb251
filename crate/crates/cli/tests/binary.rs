use std::process::Command;

fn clare() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clare"))
}

const TINY: &[&str] = &[
    "--set", "suite.n_pretrain=2",
    "--set", "suite.n_stream=2",
    "--set", "suite.demos=3",
    "--set", "model.width=16",
    "--set", "model.ffn_hidden=16",
    "--set", "model.decoder_width=16",
    "--set", "model.decoder_hidden=16",
    "--set", "model.decoder_blocks=1",
    "--set", "model.time_embed_dim=8",
    "--set", "model.horizon=4",
    "--set", "model.exec_horizon=2",
    "--set", "pretrain.steps=10",
    "--set", "stage.adapter_steps=10",
    "--set", "stage.disc_steps=10",
    "--set", "eval.episodes=2",
];

#[test]
fn end_to_end_run_is_reproducible_across_processes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let out = clare().arg("all").args(TINY).arg("--run").arg(&dir).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("AUC"), "{stdout}");
        metrics.push(std::fs::read(dir.join("metrics.json")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);

    let dir = tmp.path().join("a");
    let out = clare().arg("inspect").arg(&dir).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("stage 2"));
    let out = clare().arg("inspect").arg(dir.join("checkpoints/stage_002.json")).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 discriminators"));
    let out = clare().arg("report").arg(&dir).output().unwrap();
    assert!(out.status.success());
}

#[test]
fn bad_configuration_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = clare()
        .args(["pretrain", "--set", "stage.gamma=-1", "--run"])
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = clare()
        .args(["pretrain", "--set", "nope.key=1", "--run"])
        .arg(tmp.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupted_checkpoint_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let out = clare().arg("pretrain").args(TINY).arg("--run").arg(&dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bin = dir.join("checkpoints/stage_000.bin");
    let mut b = std::fs::read(&bin).unwrap();
    let last = b.len() - 1;
    b[last] ^= 0xFF;
    std::fs::write(&bin, b).unwrap();
    let out = clare().arg("learn").arg("--run").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn demos_are_written_and_inspectable() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("demos");
    let out = clare().arg("demos").args(TINY).arg("--out").arg(&out_dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = std::fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 4);
    let out = clare().arg("inspect").arg(&files[0]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("episodes 3"));
}
