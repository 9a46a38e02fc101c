use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stt")).args(args).output().unwrap()
}

fn write_config(dir: &Path, epochs: usize) -> String {
    let out = dir.display();
    let text = format!(
        r#"[model]
dim = 16
heads = 2
blocks = 1
mlp_hidden = 32
stem_channels = 8

[optimizer]
epochs = {epochs}

[data]
height = 8
width = 8
train_size = 16
test_size = 16

[output]
checkpoint = "{out}/model.ckpt"
log = "{out}/log.csv"
report = "{out}/report.txt"
metrics = "{out}/metrics.txt"
confusion = "{out}/confusion.csv"
ablation = "{out}/ablation.csv"
gradcheck = "{out}/gradcheck.csv"
train_data = "{out}/train.sttd"
test_data = "{out}/test.sttd"
eval_every = 1
"#
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_eval_resume_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2);
    ok(&stt(&["gen-data", "--config", &cfg, "--seed", "3"]));
    assert!(dir.path().join("train.sttd").exists());

    let t = stt(&["train", "--config", &cfg, "--seed", "3"]);
    ok(&t);
    assert!(String::from_utf8_lossy(&t.stderr).contains("epoch   1"));
    let metrics = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("war=")));
    assert!(metrics.contains("epochs=2"));
    assert_eq!(fs::read_to_string(dir.path().join("log.csv")).unwrap().lines().count(), 3);
    let confusion = fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
    assert!(confusion.starts_with("true\\pred,0,1"));

    let ckpt = dir.path().join("model.ckpt");
    let first = fs::read(&ckpt).unwrap();
    ok(&stt(&["eval", "--config", &cfg, "--seed", "3", "--ckpt", ckpt.to_str().unwrap()]));
    let again = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
    assert_eq!(again.lines().find(|l| l.starts_with("war=")), metrics.lines().find(|l| l.starts_with("war=")));

    // two more epochs from the saved state equal a four-epoch run
    let saved = dir.path().join("two.ckpt");
    fs::copy(&ckpt, &saved).unwrap();
    let cfg4 = write_config(dir.path(), 4);
    ok(&stt(&["train", "--config", &cfg4, "--seed", "3", "--resume", saved.to_str().unwrap()]));
    let resumed = fs::read(&ckpt).unwrap();
    assert_ne!(resumed, first);
    let fresh_dir = tempfile::tempdir().unwrap();
    let fresh_cfg = write_config(fresh_dir.path(), 4);
    ok(&stt(&["train", "--config", &fresh_cfg, "--seed", "3"]));
    // digests differ only through the output section, which is excluded
    assert_eq!(fs::read(fresh_dir.path().join("model.ckpt")).unwrap(), resumed);
}

#[test]
fn eval_rejects_a_checkpoint_of_another_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    ok(&stt(&["train", "--config", &cfg, "--seed", "1"]));
    let other = dir.path().join("other.toml");
    fs::write(&other, fs::read_to_string(&cfg).unwrap().replace("dim = 16", "dim = 32")).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let o = stt(&["eval", "--config", other.to_str().unwrap(), "--ckpt", ckpt.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("geometry"));
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[optimizer]\nlearning_rate = 0.1\n").unwrap();
    let o = stt(&["train", "--config", path.to_str().unwrap(), "--seed", "0"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn ablate_and_grad_check_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    ok(&stt(&["ablate", "--config", &cfg, "--seed", "2"]));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.contains("temporal-only"));
    ok(&stt(&["grad-check", "--config", &cfg, "--seed", "0"]));
    let grad = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(grad.lines().skip(1).all(|l| l.ends_with(",true")));
}
