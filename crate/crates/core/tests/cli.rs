use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use murmur::audio::{read_wav, write_wav, AudioClip};
use murmur::dataset::Manifest;

fn murmur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_murmur"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("MURMUR_ENCODER")
        .output()
        .expect("binary runs")
}

fn murmur_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_murmur"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn wav_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(wav_files(&p));
        } else if p.extension().is_some_and(|e| e == "wav") {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn synth(dir: &Path, per_class: usize, seed: u64) -> PathBuf {
    let o = murmur(&[
        "synth",
        "--out",
        s(dir),
        "--per-class",
        &per_class.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    dir.join("manifest.jsonl")
}

#[test]
fn synth_writes_a_reproducible_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), 20, 5);
    let b = synth(&tmp.path().join("b"), 20, 5);
    let m = Manifest::load(&a).unwrap();
    assert_eq!(m.len(), 100);
    assert_eq!(m.originals().count(), 100);
    let fa = wav_files(&tmp.path().join("a"));
    let fb = wav_files(&tmp.path().join("b"));
    assert_eq!(fa.len(), 100);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
        let d = read_wav(x).unwrap().duration_secs();
        assert!((1.0..=4.0).contains(&d), "{d}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn augment_builtin_resumes_and_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("syn"), 2, 1);
    let out = tmp.path().join("aug");
    let args = [
        "augment",
        "--manifest",
        s(&m),
        "--out",
        s(&out),
        "--engine",
        "builtin",
        "--jobs",
        "2",
    ];
    let o = murmur(&args);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let aug = Manifest::load(out.join("manifest.jsonl")).unwrap();
    assert_eq!(aug.len(), 40);
    let first: Vec<_> = wav_files(&out).iter().map(|p| std::fs::read(p).unwrap()).collect();

    let o = murmur(&args);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(Manifest::load(out.join("manifest.jsonl")).unwrap(), aug);
    let second: Vec<_> = wav_files(&out).iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(first, second);

    // folds accepts what augment wrote
    let plan = tmp.path().join("plan.json");
    let o = murmur(&[
        "folds",
        "--manifest",
        s(&out.join("manifest.jsonl")),
        "--out",
        s(&plan),
        "--k",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(plan.is_file());
}

#[test]
fn augment_external_engine_and_override() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("syn"), 1, 1);
    let out = tmp.path().join("aug");
    let copy = "cp {input} {temp} && cp {temp} {output}";
    let o = murmur(&[
        "augment",
        "--manifest",
        s(&m),
        "--out",
        s(&out),
        "--bitrates",
        "4500",
        "--encoder-template",
        copy,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let aug = Manifest::load(out.join("manifest.jsonl")).unwrap();
    assert_eq!(aug.len(), 10);
    for e in aug.codec_entries() {
        assert_eq!(read_wav(&e.path).unwrap().sample_rate, 8000);
    }

    // the environment variable replaces a bare program name
    let out2 = tmp.path().join("aug2");
    let args = [
        "augment",
        "--manifest",
        s(&m),
        "--out",
        s(&out2),
        "--bitrates",
        "4.5k",
        "--encoder-template",
        "no-such-transcoder {input} {output}",
    ];
    let o = murmur(&args);
    assert_eq!(o.status.code(), Some(2));
    let msg = text(&o);
    assert!(
        msg.contains("no-such-transcoder") && msg.contains("MURMUR_ENCODER"),
        "{msg}"
    );
    let o = murmur_env(&args, "MURMUR_ENCODER", "cp");
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
}

#[test]
fn default_engine_without_transcoder_is_an_environment_error() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("syn"), 1, 1);
    let o = murmur_env(
        &["augment", "--manifest", s(&m), "--out", s(&tmp.path().join("aug"))],
        "MURMUR_ENCODER",
        "/nonexistent/ffmpeg-missing",
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(
        text(&o).contains("--engine builtin") || text(&o).contains("MURMUR_ENCODER"),
        "{}",
        text(&o)
    );
}

#[test]
fn scan_counts_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("y18");
    for class in ["N", "AS_New", "MS_New", "MR_New", "MVP_New"] {
        std::fs::create_dir_all(root.join(class)).unwrap();
        for i in 0..3 {
            write_wav(
                &AudioClip::new(vec![0.1; 8000], 8000),
                root.join(class).join(format!("{i}.wav")),
            )
            .unwrap();
        }
    }
    let manifest = tmp.path().join("y18.jsonl");
    let o = murmur(&["scan", "--root", s(&root), "--out", s(&manifest)]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("total: 15"), "{out}");
    assert_eq!(out.matches(": 3").count(), 5, "{out}");
    let o = murmur(&[
        "folds",
        "--manifest",
        s(&manifest),
        "--out",
        s(&tmp.path().join("p.json")),
        "--k",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));

    let missing = tmp.path().join("nowhere");
    let o = murmur(&["scan", "--root", s(&missing), "--out", s(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains(s(&missing)));
}

#[test]
fn train_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("syn"), 2, 1);
    let out = tmp.path().join("run");
    let o = murmur(&[
        "train",
        "--manifest",
        s(&m),
        "--out",
        s(&out),
        "--epochs",
        "1",
        "--k",
        "2",
        "--jobs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("mean original CER"));
    assert!(text(&o).contains("no codec entries"));
    let report = out.join("report.json");
    assert!(report.is_file());
    let ckpt = std::fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path()
        .join("fold0.json");
    assert!(ckpt.is_file());

    let eval = |subset: &str, json: &Path| {
        let o = murmur(&[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--manifest",
            s(&m),
            "--subset",
            subset,
            "--out",
            s(json),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o));
        (text(&o), std::fs::read_to_string(json).unwrap())
    };
    let (a, ja) = eval("both", &tmp.path().join("e1.json"));
    let (b, jb) = eval("both", &tmp.path().join("e2.json"));
    assert_eq!((a.clone(), ja), (b, jb));
    assert!(a.contains("no codec entries"), "{a}");
    let (c, _) = eval("codec", &tmp.path().join("e3.json"));
    assert!(!c.contains("original:"), "{c}");

    let missing = tmp.path().join("missing.json");
    let o = murmur(&["eval", "--checkpoint", s(&missing), "--manifest", s(&m)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains(s(&missing)));
}

#[test]
fn flags_are_validated_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let m = synth(&tmp.path().join("syn"), 1, 1);
    let out = tmp.path().join("never");
    for args in [
        vec!["augment", "--manifest", s(&m), "--out", s(&out), "--bitrates", "4.5x"],
        vec!["augment", "--manifest", s(&m), "--out", s(&out), "--engine", "lame"],
        vec!["train", "--manifest", s(&m), "--out", s(&out), "--batch-size", "0"],
        vec!["train", "--manifest", s(&m), "--out", s(&out), "--lr", "-1"],
        vec![
            "train",
            "--manifest",
            s(&m),
            "--out",
            s(&out),
            "--augmented-train",
            "maybe",
        ],
        vec!["train", "--manifest", s(&m), "--out", s(&out), "--frobnicate"],
        vec!["train", "--manifest", s(&m), "--out", s(&out), "--jobs", "0"],
        vec!["gradcheck", "--mode", "16"],
        vec!["synth", "--out", s(&out), "--per-class", "0"],
    ] {
        let o = murmur(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", text(&o));
        assert!(!out.exists(), "{args:?} wrote output");
    }
    assert_eq!(murmur(&["--help"]).status.code(), Some(0));
    assert_eq!(murmur(&[]).status.code(), Some(2));
}

#[test]
fn gradcheck_64_passes() {
    let o = murmur(&["gradcheck", "--mode", "64", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("all ") && !out.contains("FAIL"), "{out}");
}
