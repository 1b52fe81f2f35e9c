mod common;

use std::process::Command;

use common::{read, tiny_config};
use mentor::env::EnvKind;
use mentor::trainer::Trainer;

#[test]
fn same_seed_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        Trainer::new(tiny_config(30)).unwrap().run(Some(&dir.path().join(name))).unwrap();
    }
    let a = read(&dir.path().join("a/metrics.csv"));
    assert_eq!(a, read(&dir.path().join("b/metrics.csv")));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 31);

    let mut other = tiny_config(30);
    other.seed = 1;
    Trainer::new(other).unwrap().run(Some(&dir.path().join("c"))).unwrap();
    assert_ne!(read(&dir.path().join("a/metrics.csv")), read(&dir.path().join("c/metrics.csv")));
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let with_buffers = |episodes| {
        let mut c = tiny_config(episodes);
        c.checkpoint_buffers = true;
        c
    };
    let dir = tempfile::tempdir().unwrap();
    Trainer::new(with_buffers(30)).unwrap().run(Some(&dir.path().join("full"))).unwrap();

    let part = dir.path().join("part");
    Trainer::new(with_buffers(15)).unwrap().run(Some(&part)).unwrap();
    let mut t = Trainer::load(&part.join("checkpoint.bin")).unwrap();
    t.state_mut().config.episodes = 30;
    t.run(Some(&part)).unwrap();

    assert_eq!(read(&dir.path().join("full/metrics.csv")), read(&part.join("metrics.csv")));
}

#[test]
fn lean_checkpoints_drop_the_buffers() {
    let mut t = Trainer::new(tiny_config(5)).unwrap();
    t.run(None).unwrap();
    assert!(t.state().high_buffer.len() > 0);
    let back = Trainer::from_checkpoint_bytes(&t.checkpoint_bytes().unwrap()).unwrap();
    assert_eq!(back.state().high_buffer.len(), 0);
    assert_eq!(back.state().low_buffer.len(), 0);
    assert_eq!(back.state().episode, 5);
    assert_eq!(back.state().high.actor().parameters(), t.state().high.actor().parameters());
    // the live trainer keeps its buffers
    assert!(t.state().high_buffer.len() > 0);
}

#[test]
fn ablations_and_point_push_run() {
    for tweak in [
        |c: &mut mentor::trainer::TrainConfig| c.no_hf = true,
        |c: &mut mentor::trainer::TrainConfig| c.no_ddc = true,
        |c: &mut mentor::trainer::TrainConfig| c.no_eed = true,
        |c: &mut mentor::trainer::TrainConfig| c.env = EnvKind::PointPush,
    ] {
        let mut cfg = tiny_config(6);
        tweak(&mut cfg);
        let summary = Trainer::new(cfg).unwrap().run(None).unwrap();
        assert_eq!(summary.episodes, 6);
        assert!(summary.rows.iter().all(|r| r.alpha >= 0.0 && (0.0..=1.0).contains(&r.k)));
    }
}

#[test]
fn no_ddc_leaves_the_curriculum_alone() {
    let mut cfg = tiny_config(10);
    cfg.no_ddc = true;
    let mut t = Trainer::new(cfg).unwrap();
    let k0 = t.state().curriculum.k;
    t.run(None).unwrap();
    assert!(t.state().k_events.is_empty());
    assert_eq!(t.state().curriculum.k, k0);
}

#[test]
fn cli_trains_evaluates_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, tiny_config(4).to_toml_string()).unwrap();
    let out = dir.path().join("run");
    let bin = env!("CARGO_BIN_EXE_mentor");
    let run = |args: &[&str]| {
        let o = Command::new(bin).args(args).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let o = out.to_str().unwrap();
    assert!(run(&["train", "--config", cfg.to_str().unwrap(), "--out", o]).starts_with("episodes: 4"));
    assert!(run(&["train", "--resume", "--episodes", "6", "--out", o]).starts_with("episodes: 6"));
    let ckpt = out.join("checkpoint.bin");
    assert!(run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "2"]).contains("success"));
    let heat = dir.path().join("heat.csv");
    run(&["export-heatmaps", "--checkpoint", ckpt.to_str().unwrap(), "--resolution", "5", "--out", heat.to_str().unwrap()]);
    assert!(std::fs::read_to_string(&heat).unwrap().lines().count() > 25);
    assert!(run(&["default-config"]).contains("episodes"));

    let bad = Command::new(bin).args(["train", "--labeler", "human", "--out", o]).output().unwrap();
    assert!(!bad.status.success());
}
