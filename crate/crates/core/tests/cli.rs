use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use upw::mixed::{read_mixed, MixedRecord};
use upw::ppm::{decode_ppm, encode_ppm};
use upw::tokenizer::RgbImage;

fn upw(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_upw"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn upw")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_image(dir: &Path, name: &str, w: usize, h: usize) -> RgbImage {
    let data = (0..w * h * 3).map(|i| (i * 37 % 251) as u8).collect();
    let img = RgbImage::new(w, h, data).unwrap();
    fs::write(dir.join(name), encode_ppm(&img)).unwrap();
    img
}

#[test]
fn fold_viz_happy_path_and_bad_factor() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path(), "a.ppm", 5, 3);
    let o = upw(
        &[
            "fold-viz", "--factor", "16", "--in", "a.ppm", "--out", "b.ppm",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let b = decode_ppm(&fs::read(dir.path().join("b.ppm")).unwrap()).unwrap();
    assert_eq!((b.width(), b.height()), (5, 3));
    // every reconstructed channel is a bin midpoint
    assert!(b.data().iter().all(|&c| c % 16 == 8));

    let o = upw(
        &[
            "fold-viz", "--factor", "3", "--in", "a.ppm", "--out", "c.ppm",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("{2, 4, 8, 16, 32}"), "{}", stderr(&o));
    assert!(!dir.path().join("c.ppm").exists());
}

#[test]
fn fold_viz_all_writes_one_file_per_factor() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path(), "a.ppm", 4, 4);
    let o = upw(
        &[
            "fold-viz", "--factor", "all", "--in", "a.ppm", "--out", "v.ppm",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [2, 4, 8, 16, 32] {
        assert!(
            dir.path().join(format!("v_f{f}.ppm")).exists(),
            "missing f={f}"
        );
    }
}

#[test]
fn pack_keeps_command_line_order_and_inspect_lists_records() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path(), "a.ppm", 2, 2);
    write_image(dir.path(), "b.ppm", 3, 1);
    fs::write(dir.path().join("t.txt"), "caption ü").unwrap();
    let o = upw(
        &[
            "pack", "--image", "a.ppm", "--text", "t.txt", "--image", "b.ppm", "--out", "d.upwmix",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let recs = read_mixed(&fs::read(dir.path().join("d.upwmix")).unwrap()).unwrap();
    assert!(matches!(&recs[0], MixedRecord::Image(i) if i.width() == 2));
    assert_eq!(recs[1], MixedRecord::Text("caption ü".into()));
    assert!(matches!(&recs[2], MixedRecord::Image(i) if i.width() == 3));

    let o = upw(&["inspect", "mixed", "d.upwmix"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let table = stdout(&o);
    assert!(table.contains("declared records: 3"));
    assert_eq!(table.lines().filter(|l| l.contains("image")).count(), 2);
}

#[test]
fn truncated_mixed_file_is_a_data_error_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.txt"), "hello world").unwrap();
    let o = upw(
        &["pack", "--text", "t.txt", "--out", "d.upwmix"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let bytes = fs::read(dir.path().join("d.upwmix")).unwrap();
    fs::write(dir.path().join("cut.upwmix"), &bytes[..bytes.len() - 4]).unwrap();
    let o = upw(&["inspect", "mixed", "cut.upwmix"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("byte offset 29"), "{}", stderr(&o));

    let o = upw(&["inspect", "mixed", "missing.upwmix"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inspect_vocab_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    let o = upw(&["inspect", "vocab", "--factor", "32"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("total     773"));

    let o = upw(
        &["inspect", "mask", "--window", "2", "--condition", "1"],
        dir.path(),
    );
    assert_eq!(stdout(&o), "1 1 0 0 0\n1 1 1 0 0\n1 1 1 1 0\n1 1 1 1 1\n");

    let o = upw(
        &["inspect", "mask", "--window", "4", "--sub", "3"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn tokenize_emits_self_describing_json() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path(), "a.ppm", 5, 3);
    let o = upw(
        &[
            "tokenize", "--factor", "32", "--window", "4", "--sub", "2", "--in", "a.ppm", "--out",
            "t.json",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("t.json")).unwrap()).unwrap();
    assert_eq!(v["width"], 5);
    assert_eq!(v["height"], 3);
    assert_eq!(v["windows_x"], 2);
    assert_eq!(v["windows_y"], 1);
    assert_eq!(v["pad_id"], 512);
    assert_eq!(v["windows"].as_array().unwrap().len(), 2);
    assert_eq!(v["sub_windows"][0].as_array().unwrap().len(), 4);
    // second window covers x 4..8 of a 5-wide image: three pad columns
    let w1 = v["windows"][1].as_array().unwrap();
    assert_eq!(w1.iter().filter(|t| **t == 512).count(), 4 * 4 - 3);
}

#[test]
fn usage_errors_and_help() {
    let dir = tempfile::tempdir().unwrap();
    let o = upw(
        &[
            "fold-viz", "--factor", "16", "--in", "a.ppm", "--out", "b.ppm", "--bogus",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(upw(&[], dir.path()).status.code(), Some(1));
    assert_eq!(upw(&["frobnicate"], dir.path()).status.code(), Some(1));

    let cases: [(&[&str], &[&str]); 9] = [
        (&["fold-viz"], &["--factor", "--in", "--out"]),
        (
            &["tokenize"],
            &["--factor", "--window", "--sub", "--in", "--out"],
        ),
        (&["pack"], &["--text", "--image", "--out"]),
        (&["inspect", "vocab"], &["--factor"]),
        (&["inspect", "mask"], &["--window", "--sub", "--condition"]),
        (&["inspect", "mixed"], &["FILE"]),
        (&["train"], &["--config", "--data", "--out", "--sequential"]),
        (&["sample"], &["--ckpt", "--seed", "--out", "--temperature"]),
        (
            &["gradcheck"],
            &["--config", "--eps", "--stride", "--tolerance", "--seed"],
        ),
    ];
    for (cmd, flags) in cases {
        let mut args = cmd.to_vec();
        args.push("--help");
        let o = upw(&args, dir.path());
        assert_eq!(o.status.code(), Some(0), "{cmd:?}");
        let help = stdout(&o);
        for f in flags {
            assert!(help.contains(f), "{cmd:?} help lacks {f}:\n{help}");
        }
        assert!(help.contains("Exit codes"), "{cmd:?}");
    }
}

#[test]
fn bad_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ppm"), b"P3\n1 1\n255\n0 0 0\n").unwrap();
    let o = upw(
        &[
            "fold-viz", "--factor", "8", "--in", "bad.ppm", "--out", "o.ppm",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("c.cfg"), "warp = 9\n").unwrap();
    fs::create_dir(dir.path().join("imgs")).unwrap();
    write_image(&dir.path().join("imgs"), "a.ppm", 8, 8);
    let o = upw(
        &[
            "train", "--config", "c.cfg", "--data", "imgs", "--out", "run",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("warp"));
    fs::write(dir.path().join("junk.ckpt"), b"nope").unwrap();
    let o = upw(
        &["sample", "--ckpt", "junk.ckpt", "--out", "s.ppm"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergent_training_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("imgs")).unwrap();
    write_image(&dir.path().join("imgs"), "a.ppm", 8, 8);
    fs::write(
        dir.path().join("c.cfg"),
        "steps = 5\noptimizer = sgd\nlearning_rate = 1e300\n",
    )
    .unwrap();
    let o = upw(
        &[
            "train", "--config", "c.cfg", "--data", "imgs", "--out", "run",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("at step"), "{}", stderr(&o));
}

#[test]
fn train_then_sample_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("imgs")).unwrap();
    write_image(&dir.path().join("imgs"), "b.ppm", 8, 8);
    write_image(&dir.path().join("imgs"), "a.ppm", 6, 7);
    fs::write(
        dir.path().join("c.cfg"),
        "# short run\nsteps = 6\nlog_every = 2\nbatch_size = 2\n",
    )
    .unwrap();
    for run in ["r1", "r2"] {
        let o = upw(
            &["train", "--config", "c.cfg", "--data", "imgs", "--out", run],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let csv = fs::read_to_string(dir.path().join("r1/loss.csv")).unwrap();
    let steps: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(csv.lines().next(), Some("step,loss"));
    assert_eq!(steps, ["0", "2", "4", "5"]);
    assert_eq!(
        fs::read(dir.path().join("r1/model.ckpt")).unwrap(),
        fs::read(dir.path().join("r2/model.ckpt")).unwrap()
    );

    for out in ["s1.ppm", "s2.ppm"] {
        let o = upw(
            &[
                "sample",
                "--ckpt",
                "r1/model.ckpt",
                "--seed",
                "4",
                "--out",
                out,
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let s1 = fs::read(dir.path().join("s1.ppm")).unwrap();
    assert_eq!(s1, fs::read(dir.path().join("s2.ppm")).unwrap());
    let img = decode_ppm(&s1).unwrap();
    assert_eq!((img.width(), img.height()), (8, 8));
}

#[test]
fn gradcheck_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = upw(&["gradcheck", "--stride", "1"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("max relative error"));
    let o = upw(&["gradcheck", "--eps", "0.1"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = upw(
        &["gradcheck", "--stride", "1", "--tolerance", "0"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));
}
