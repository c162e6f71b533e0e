use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_codec-lm"))
}

fn micro() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.toml")
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

fn checkpointing_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(micro()).unwrap() + "\n[run]\ncheckpoint_every = 10\n";
    let path = dir.join("micro.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_train_resume_synth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = checkpointing_config(d);
    run(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(d.join("data")));
    let data = d.join("data/corpus.tsv");
    assert_eq!(lines(&data).len(), 8);
    assert!(d.join("data/effective_config.toml").exists());

    run(bin().args(["train", "--config"]).arg(&cfg).arg("--data").arg(&data).arg("--out").arg(d.join("full")));
    let full = lines(&d.join("full/metrics.jsonl"));
    assert_eq!(full.len(), 20);
    assert!(d.join("full/checkpoint-10.ckpt").exists());

    // resume from the step-10 checkpoint: steps 11..20 match the uninterrupted run
    std::fs::create_dir_all(d.join("resumed")).unwrap();
    std::fs::write(d.join("resumed/metrics.jsonl"), full[..12].join("\n") + "\n").unwrap();
    run(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(d.join("resumed"))
        .arg("--checkpoint")
        .arg(d.join("full/checkpoint-10.ckpt")));
    let resumed = lines(&d.join("resumed/metrics.jsonl"));
    assert_eq!(resumed, full);
    let first: serde_json::Value = serde_json::from_str(&resumed[10]).unwrap();
    assert_eq!(first["step"], 11);

    let synth = |out: &str| {
        run(bin()
            .args(["synth", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(d.join("full/checkpoint.ckpt"))
            .arg("--data")
            .arg(&data)
            .args(["--prompt-id", "utt00000", "--prompt-frames", "3", "--text", "ab du"])
            .args(["--gamma", "1", "--alpha", "1", "--beta", "1", "--debug-dump-scores"])
            .arg("--out")
            .arg(d.join(out)));
    };
    synth("s1");
    synth("s2");
    for f in ["result.json", "output.tsv", "output.wav", "scores.jsonl"] {
        let a = std::fs::read(d.join("s1").join(f)).unwrap();
        assert_eq!(a, std::fs::read(d.join("s2").join(f)).unwrap(), "{f}");
        assert!(!a.is_empty(), "{f}");
    }
    let wav = hound::WavReader::open(d.join("s1/output.wav")).unwrap();
    assert_eq!(wav.spec().sample_rate, 16000);
}

#[test]
fn segment_short_text_passes_through() {
    let out = run(bin().args(["segment", "--text", "abcdefghij, klmnopqr"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().collect::<Vec<_>>(), vec!["abcdefghij, klmnopqr"]);
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["synth", "--checkpoint"])
        .arg(dir.path().join("none.ckpt"))
        .args(["--text", "ab"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
