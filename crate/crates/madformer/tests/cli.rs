use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_madformer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn madformer")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SHORT: &str = "\
# short run
train.steps = 12
train.checkpoint_every = 4
train.batch_size = 4
train.ema_decay = 0.9
eval.samples = 6
eval.reference = 16
sampler.steps = 3
";

#[test]
fn mask_dump_two_block_clean_example() {
    let o = run(&["mask-dump", "--ar-length", "2", "--tokens-per-block", "2", "--clean"]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        "11......\n11......\n1111....\n1111....\n....11..\n....11..\n11....11\n11....11\n"
    );
    let o = run(&[
        "mask-dump",
        "--ar-length",
        "2",
        "--tokens-per-block",
        "2",
        "--clean",
        "--mode",
        "mlp",
    ]);
    assert_eq!(stdout(&o).lines().nth(6), Some("......11"));
}

#[test]
fn mask_dump_with_delimiters_covers_whole_plan() {
    let o = run(&[
        "mask-dump",
        "--ar-length",
        "1",
        "--tokens-per-block",
        "2",
        "--text-len",
        "1",
        "--with-delimiters",
    ]);
    // TEXT, BOI, NOISY x2, EOI
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 5);
    assert_eq!(text.lines().next(), Some("1...."));
}

#[test]
fn schedule_dump_lists_timesteps() {
    let o = run(&["schedule-dump", "--steps", "4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("[1000,750,500,250]"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn usage_errors_exit_two() {
    let o = run(&["mask-dump", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["schedule-dump", "--steps", "0"]).status.code(), Some(1));
}

#[test]
fn config_errors_exit_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.steps = 3\nmodel.nonsense = 1\n");
    let o = run(&["schedule-dump", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let cfg = write_config(dir.path(), "model.ar_length = 5\n");
    assert_eq!(run(&["train", "--config", &cfg, "--out", "x"]).status.code(), Some(2));
    let o = run(&["train", "--config", "/nonexistent.cfg", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = run(&["train", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "metrics.csv",
        "final.ckpt",
        "ckpt_000004.state",
        "ckpt_000008.state",
        "ckpt_000012.state",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,lr,total,text_nll,image_mse,hidden_mse,tower_mse,grad_norm,wall_ms\n"));
    assert_eq!(csv.lines().count(), 13);

    let samples = dir.path().join("s.bin");
    let ck = out.join("final.ckpt");
    let o = run(&[
        "sample",
        "--config",
        &cfg,
        "--checkpoint",
        ck.to_str().unwrap(),
        "--count",
        "3",
        "--out",
        samples.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grids = madformer::dump::read_samples(&samples).unwrap();
    assert_eq!(grids.len(), 3);
    assert!(samples.with_extension("pgm").exists());

    let o = run(&["eval", "--config", &cfg, "--dir", out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("checkpoints = 4,8,12"), "{text}");
    assert!(out.join("eval.txt").exists());
}

#[test]
fn resume_reproduces_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&["train", "--config", &cfg, "--out", a.to_str().unwrap()])
        .status
        .success());
    std::fs::create_dir_all(&b).unwrap();
    // resume from step 4 with a CSV that already ran further
    std::fs::copy(a.join("metrics.csv"), b.join("metrics.csv")).unwrap();
    let from = a.join("ckpt_000004.state");
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--resume",
        from.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "ckpt_000012.state", "final.ckpt"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_rejects_other_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let a = dir.path().join("a");
    assert!(run(&["train", "--config", &cfg, "--out", a.to_str().unwrap()])
        .status
        .success());
    let other = write_config(dir.path(), &format!("{SHORT}model.n_layers = 6\n"));
    let from = a.join("ckpt_000004.state");
    let o = run(&[
        "train",
        "--config",
        &other,
        "--out",
        a.to_str().unwrap(),
        "--resume",
        from.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_flag_changes_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(
        run(&["train", "--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "1"])
            .status
            .success()
    );
    assert!(
        run(&["--seed", "2", "train", "--config", &cfg, "--out", b.to_str().unwrap()])
            .status
            .success()
    );
    assert_ne!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn ablate_writes_row_per_cell_and_survives_bad_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SHORT}ablate.diffusion_depth = 2, 9\nablate.seeds = 0\n"),
    );
    let out = dir.path().join("ablate.csv");
    let o = run(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    let header = rdr.headers().unwrap().clone();
    assert_eq!(&header[0], "schema_version");
    let status = header.iter().position(|h| h == "status").unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][status], "ok");
    assert!(rows[1][status].starts_with("error"));
}
