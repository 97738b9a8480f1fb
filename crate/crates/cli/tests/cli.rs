use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vesselprior"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
# small model for fast tests
depth = 3
base_channels = 2
input_size = 32
latent_channels = 4
epochs = 1
ae.epochs = 1
batch_size = 4
ae.batch_size = 4
augment = false
ae.augment = false
prior = none
folds = 2
";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let o = run(&["synth", "--count", "8", "--size", "32", "--seed", "7", "--out", "data"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn synth_is_deterministic() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(fs::read_dir(d.join("data/images")).unwrap().count(), 8);
    assert_eq!(fs::read_dir(d.join("data/masks")).unwrap().count(), 8);
    let manifest = fs::read_to_string(d.join("data/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 9);
    run(&["synth", "--count", "8", "--size", "32", "--seed", "7", "--out", "again"], d);
    for f in ["manifest.csv", "images/0003.png", "masks/0005.png"] {
        assert_eq!(fs::read(d.join("data").join(f)).unwrap(), fs::read(d.join("again").join(f)).unwrap());
    }
}

#[test]
fn eval_of_identical_masks_is_perfect() {
    let dir = setup();
    let o = run(&["eval", "--gt", "data/masks/0001.png", "--pred", "data/masks/0001.png"], dir.path());
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("DSC 1.000000"), "{out}");
    assert!(out.contains("HD 0.000000"), "{out}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&run(&["no-such-command"], d)), 1);
    assert_eq!(code(&run(&[], d)), 1);
    let o = run(&["cross-validate", "--data", "data", "--config", "tiny.cfg", "--override", "bogus=1"], d);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    let o = run(&["predict", "--checkpoint", "missing.ckpt", "--image", "data/images/0000.png", "--out", "p"], d);
    assert_eq!(code(&o), 1);
    // Nothing is written when validation fails.
    assert!(!d.join("runs").exists());
    assert!(!d.join("p").exists());
    let o = run(&["train-seg", "--data", "data", "--config", "tiny.cfg", "--override", "prior=socae"], d);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_predict_and_cross_validate() {
    let dir = setup();
    let d = dir.path();
    let o = run(
        &["train-seg", "--data", "data", "--config", "tiny.cfg", "--run-id", "seg", "--override", "lambda=40"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = fs::read_to_string(d.join("runs/seg/config.cfg")).unwrap();
    assert!(cfg.contains("lambda = 40"));
    assert!(d.join("runs/seg/seg.ckpt").is_file());
    assert!(d.join("runs/seg/seg_steps.csv").is_file());

    let o = run(
        &[
            "predict", "--checkpoint", "runs/seg/seg.ckpt", "--image", "data/images/0002.png", "--gt",
            "data/masks/0002.png", "--out", "pred",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["prob.png", "mask.png", "overlay.png"] {
        assert!(d.join("pred").join(f).is_file(), "{f}");
    }
    assert!(stdout(&o).contains("DSC"));

    // A 64x64 image does not fit a 32x32 model unless resizing is requested.
    run(&["synth", "--count", "1", "--size", "64", "--seed", "1", "--out", "big"], d);
    let args = ["predict", "--checkpoint", "runs/seg/seg.ckpt", "--image", "big/images/0000.png", "--out", "p2"];
    assert_eq!(code(&run(&args, d)), 1);
    let mut resized = args.to_vec();
    resized.push("--resize");
    assert_eq!(code(&run(&resized, d)), 0);

    let o = run(&["train-ae", "--data", "data", "--config", "tiny.cfg", "--kind", "cae", "--run-id", "ae"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(
        &[
            "train-seg", "--data", "data", "--config", "tiny.cfg", "--override", "prior=cae", "--prior-checkpoint",
            "runs/ae/ae.ckpt", "--run-id", "seg-prior",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    for id in ["cv1", "cv2"] {
        let o = run(&["cross-validate", "--data", "data", "--config", "tiny.cfg", "--seed", "3", "--run-id", id], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "audit.csv", "fold0_seg.ckpt", "fold1_seg.ckpt"] {
        assert_eq!(
            fs::read(d.join("runs/cv1").join(f)).unwrap(),
            fs::read(d.join("runs/cv2").join(f)).unwrap(),
            "{f}"
        );
    }
    let metrics = fs::read_to_string(d.join("runs/cv1/metrics.csv")).unwrap();
    assert!(metrics.starts_with("case_id,dsc,avd,assd,hd\n"));
    assert_eq!(metrics.lines().filter(|l| !l.starts_with("case_id") && !l.starts_with("summary")).count(), 8);
}
