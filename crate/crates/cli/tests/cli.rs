use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lwat(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lwat"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const BASE: &str = "\
# small synthetic run
data = synthetic
synthetic_classes = 3
synthetic_per_class = 24
synthetic_side = 4
synthetic_spread = 0.5
arch = toy-fc
hidden = 12,8
epochs = 3
batch = 8
lr = 0.05
";

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("{BASE}{extra}")).unwrap();
    p
}

fn final_accuracy(o: &Output) -> String {
    stdout(o)
        .lines()
        .find(|l| l.starts_with("final test accuracy"))
        .unwrap_or_else(|| panic!("no accuracy line in {}", stdout(o)))
        .to_string()
}

fn run_dir(o: &Output) -> PathBuf {
    PathBuf::from(stdout(o).lines().last().unwrap().trim())
}

fn checkpoint_in(dir: &Path) -> PathBuf {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "lwck"))
        .expect("checkpoint written")
}

#[test]
fn zero_eps_ours_matches_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_config(tmp.path(), "a.txt", "mode = baseline\n");
    let b = write_config(
        tmp.path(),
        "b.txt",
        "mode = ours-orig\neps = 0\ndrop_last = false\n",
    );
    let oa = lwat(&["train", a.to_str().unwrap()], tmp.path());
    let ob = lwat(&["train", b.to_str().unwrap()], tmp.path());
    assert!(oa.status.success(), "{}", stderr(&oa));
    assert!(ob.status.success(), "{}", stderr(&ob));
    assert_eq!(final_accuracy(&oa), final_accuracy(&ob));
}

#[test]
fn train_writes_hashed_artifacts_and_reruns_are_noops() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.txt",
        "eval_eps = 0,0.1\nattack_batch = 4\nspectrum = true\nspectrum_samples = 3\ntop_k = 5\n",
    );
    let o = lwat(
        &["train", cfg.to_str().unwrap(), "--out", "out"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join(run_dir(&o));
    let hash = dir.file_name().unwrap().to_str().unwrap().to_string();
    for f in ["config", "trace", "eval", "spectrum"] {
        assert!(
            dir.join(format!("{f}-{hash}.csv")).is_file()
                || dir.join(format!("{f}-{hash}.txt")).is_file(),
            "{f}"
        );
    }
    assert!(dir.join(format!("model-{hash}.lwck")).is_file());
    let manifest = fs::read_to_string(dir.join(format!("manifest-train-{hash}.json"))).unwrap();
    assert!(manifest.contains(&hash));

    let again = lwat(
        &["train", cfg.to_str().unwrap(), "--out", "out"],
        tmp.path(),
    );
    assert!(again.status.success());
    assert!(stderr(&again).contains("up to date"));
    let forced = lwat(
        &["train", cfg.to_str().unwrap(), "--out", "out", "--force"],
        tmp.path(),
    );
    assert!(forced.status.success());
    assert!(!stderr(&forced).contains("up to date"));
    assert_eq!(final_accuracy(&o), final_accuracy(&forced));
}

#[test]
fn eval_spectrum_bound_on_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.txt", "");
    let o = lwat(
        &["train", cfg.to_str().unwrap(), "--out", "out"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let clean = final_accuracy(&o);
    let clean: f64 = clean
        .trim_start_matches("final test accuracy: ")
        .trim_end_matches('%')
        .parse()
        .unwrap();
    let ckpt = checkpoint_in(&tmp.path().join(run_dir(&o)));
    let ck = ckpt.to_str().unwrap();

    let e = lwat(&["eval", ck, "--eps", "0"], tmp.path());
    assert!(e.status.success(), "{}", stderr(&e));
    let rows: Vec<String> = stdout(&e).lines().map(str::to_string).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0], format!("eps {:<6} accuracy {clean:.2}%", 0));

    let e = lwat(
        &[
            "eval",
            ck,
            "--eps",
            "0,0.1,0.2",
            "--attack",
            "cached-layerwise",
            "--batch",
            "4",
        ],
        tmp.path(),
    );
    assert!(e.status.success(), "{}", stderr(&e));
    assert_eq!(stdout(&e).lines().count(), 3);

    let s = lwat(
        &[
            "spectrum",
            ck,
            "--samples",
            "4",
            "--top-k",
            "6",
            "--threads",
            "2",
        ],
        tmp.path(),
    );
    assert!(s.status.success(), "{}", stderr(&s));
    assert!(stdout(&s).contains("sigma[1]"));

    let b = lwat(&["bound", ck, "--trials", "20", "--seed", "3"], tmp.path());
    assert!(b.status.success(), "{}", stderr(&b));
    assert!(stdout(&b).starts_with("20/20 checks passed"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "bad.txt", "epoch = 3\n");
    let o = lwat(&["train", bad.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"));

    let o = lwat(&["frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(2));

    let missing = tmp.path().join("m.txt");
    fs::write(&missing, "data = cifar10\ndata_dir = nowhere\n").unwrap();
    let o = lwat(&["train", missing.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nowhere"));

    let o = lwat(
        &[
            "eval",
            "model-x.lwck",
            "--config",
            missing.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(3));

    let diverge = tmp.path().join("nan.txt");
    fs::write(&diverge, BASE.replace("lr = 0.05", "lr = 1e30")).unwrap();
    let o = lwat(&["train", diverge.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn repro_toy_on_synthetic_data() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lwat(
        &[
            "repro",
            "toy",
            "--synthetic",
            "--epochs",
            "2",
            "--batch",
            "16",
            "--spectrum-samples",
            "4",
            "--threads",
            "3",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for name in ["baseline", "fgs", "ours"] {
        assert!(out.contains(&format!("| {name} |")), "{out}");
    }
}

#[test]
fn repro_without_data_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lwat"))
        .args(["repro", "variants", "--data-dir", "absent"])
        .current_dir(tmp.path())
        .env_remove("LWAT_CIFAR10_DIR")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("absent"));
}
