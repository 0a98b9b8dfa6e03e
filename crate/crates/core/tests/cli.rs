mod support;

use std::fs;

use support::{cookstate, run_pipeline, write_png_dataset, CLASSES};

fn path(p: &std::path::Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = run_pipeline(dir.path()).unwrap();
    let last = stdout.lines().last().unwrap();
    let acc: f64 = last.strip_prefix("accuracy=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let kv = fs::read_to_string(dir.path().join("eval/report.kv")).unwrap();
    assert!(kv.starts_with(&format!("accuracy={acc}\n")));
    let history = fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    assert_eq!(
        history.lines().next(),
        Some("step,lr,train_loss,val_accuracy")
    );
    assert_eq!(history.lines().count(), 51);
    let csv = fs::read_to_string(dir.path().join("attend/img_000.rollout.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().all(|l| l.split(',').count() == 4));

    let split = fs::read_to_string(dir.path().join("split.txt")).unwrap();
    let aug = fs::read_to_string(dir.path().join("aug/split.txt")).unwrap();
    let train_lines = |s: &str| s.lines().filter(|l| l.starts_with("train")).count();
    assert_eq!(train_lines(&aug), 5 * train_lines(&split));
}

#[test]
fn split_is_byte_identical_on_rerun_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_png_dataset(&data, &CLASSES, 6, 8, 1);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = cookstate(&[
            "split",
            "--root",
            &path(&data),
            "--seed",
            seed,
            "--out",
            &path(&out),
        ]);
        assert!(o.status.success());
        fs::read(out).unwrap()
    };
    let a = run("a.txt", "3");
    assert_eq!(a, run("b.txt", "3"));
    assert_ne!(a, run("c.txt", "4"));
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_png_dataset(&data, &CLASSES, 10, 8, 2);
    let cfg = dir.path().join("split.cfg");
    fs::write(&cfg, "# exact sizes\ncounts=20,4,6\nstratified=false\n").unwrap();
    let out = dir.path().join("s.txt");
    let o = cookstate(&[
        "split",
        "--config",
        &path(&cfg),
        "--root",
        &path(&data),
        "--out",
        &path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let count = |p: &str| text.lines().filter(|l| l.starts_with(p)).count();
    assert_eq!(
        (count("train\t"), count("val\t"), count("test\t")),
        (20, 4, 6)
    );

    let o = cookstate(&[
        "split",
        "--config",
        &path(&cfg),
        "--root",
        &path(&data),
        "--counts",
        "10,10,10",
        "--out",
        &path(&out),
    ]);
    assert!(o.status.success());
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("val\t")).count(), 10);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_png_dataset(&data, &CLASSES, 2, 8, 3);
    let bad_fractions = cookstate(&["split", "--root", &path(&data), "--fractions", "0.9,0.3"]);
    assert_eq!(bad_fractions.status.code(), Some(2));
    let missing_root = cookstate(&["split", "--root", &path(&dir.path().join("nope"))]);
    assert_eq!(missing_root.status.code(), Some(2));
    let unknown_flag = cookstate(&["train", "--bogus"]);
    assert_eq!(unknown_flag.status.code(), Some(2));
    let both = cookstate(&[
        "train",
        "--root",
        "x",
        "--manifest",
        "y",
        "--out",
        "z",
        "--pretrained",
        "w",
        "--from-scratch",
    ]);
    assert_eq!(both.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_png_dataset(&data, &CLASSES, 6, 32, 4);
    let split = dir.path().join("split.txt");
    assert!(
        cookstate(&["split", "--root", &path(&data), "--out", &path(&split)])
            .status
            .success()
    );
    let o = cookstate(&[
        "train",
        "--root",
        &path(&data),
        "--manifest",
        &path(&split),
        "--out",
        &path(&dir.path().join("run")),
        "--preset",
        "tiny",
        "--steps",
        "20",
        "--batch",
        "4",
        "--lr",
        "1e12",
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn artifact_mismatches_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_png_dataset(&data, &CLASSES, 6, 32, 5);
    let split = dir.path().join("split.txt");
    assert!(
        cookstate(&["split", "--root", &path(&data), "--out", &path(&split)])
            .status
            .success()
    );
    let run = dir.path().join("run");
    let o = cookstate(&[
        "train",
        "--root",
        &path(&data),
        "--manifest",
        &path(&split),
        "--out",
        &path(&run),
        "--preset",
        "tiny",
        "--steps",
        "2",
        "--batch",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("model.vitc");

    let corrupt = dir.path().join("corrupt.vitc");
    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&corrupt, bytes).unwrap();
    let img = path(&data.join("raw/img_000.png"));
    let o = cookstate(&[
        "attend",
        "--checkpoint",
        &path(&corrupt),
        "--out",
        &path(&dir.path().join("a")),
        &img,
    ]);
    assert_eq!(o.status.code(), Some(4));

    let fewer = dir.path().join("fewer");
    write_png_dataset(&fewer, &CLASSES[..2], 6, 32, 6);
    let split2 = dir.path().join("split2.txt");
    assert!(
        cookstate(&["split", "--root", &path(&fewer), "--out", &path(&split2)])
            .status
            .success()
    );
    let o = cookstate(&[
        "eval",
        "--root",
        &path(&fewer),
        "--manifest",
        &path(&split2),
        "--checkpoint",
        &path(&ckpt),
        "--out",
        &path(&dir.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn attend_skips_unreadable_images() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_png_dataset(&data, &CLASSES, 4, 32, 8);
    let split = dir.path().join("split.txt");
    assert!(
        cookstate(&["split", "--root", &path(&data), "--out", &path(&split)])
            .status
            .success()
    );
    let run = dir.path().join("run");
    assert!(cookstate(&[
        "train",
        "--root",
        &path(&data),
        "--manifest",
        &path(&split),
        "--out",
        &path(&run),
        "--preset",
        "tiny",
        "--steps",
        "1",
        "--batch",
        "2",
    ])
    .status
    .success());
    let junk = dir.path().join("junk.png");
    fs::write(&junk, b"not an image").unwrap();
    let out = dir.path().join("att");
    let good = path(&data.join("done/img_001.png"));
    let ckpt = path(&run.join("model.vitc"));
    let o = cookstate(&[
        "attend",
        "--checkpoint",
        &ckpt,
        "--out",
        &path(&out),
        &path(&junk),
        &good,
    ]);
    assert!(o.status.success());
    assert!(out.join("img_001.rollout.png").is_file());
    assert!(!out.join("junk.rollout.png").exists());
    let o = cookstate(&[
        "attend",
        "--checkpoint",
        &ckpt,
        "--out",
        &path(&out),
        &path(&junk),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
