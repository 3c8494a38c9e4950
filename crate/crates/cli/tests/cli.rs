use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

/// Desk config with every path moved under `root` and a short schedule.
fn write_config(root: &Path) -> PathBuf {
    let text = std::fs::read_to_string(repo_config()).unwrap();
    let mut value: toml::Value = text.parse().unwrap();
    let paths = value["paths"].as_table_mut().unwrap();
    for (key, rel) in [
        ("manifest", "data/manifest.jsonl"),
        ("feature_dir", "data/features"),
        ("checkpoint_dir", "checkpoints"),
        ("output_dir", "outputs"),
        ("report_dir", "reports"),
    ] {
        paths.insert(key.into(), root.join(rel).display().to_string().into());
    }
    value["synthesis"].as_table_mut().unwrap().insert(
        "ppg_to_spec".into(),
        root.join("checkpoints/ppg_to_spec.vsck").display().to_string().into(),
    );
    value["synthetic"].as_table_mut().unwrap().insert("n".into(), 10.into());
    value["synthesis"]
        .as_table_mut()
        .unwrap()
        .insert("griffin_lim_iterations".into(), 2.into());
    let path = root.join("config.toml");
    std::fs::write(&path, toml::to_string(&value).unwrap()).unwrap();
    path
}

fn vshadow(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vshadow"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn checked_in_config_parses() {
    let cfg = vshadow::pipeline::PipelineConfig::load(repo_config()).unwrap();
    assert_eq!(cfg.phases.len(), 5);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vshadow"))
        .args(["frobnicate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let missing = vshadow(&dir.path().join("nope.toml"), &["extract"]);
    assert_eq!(missing.status.code(), Some(2));
    let cfg = write_config(dir.path());
    let bad_phase = vshadow(&cfg, &["train", "--phase", "warp_speed"]);
    assert_eq!(bad_phase.status.code(), Some(2));
}

#[test]
fn end_to_end_verbs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());

    ok(&vshadow(&cfg, &["gen-synthetic"]));
    let first: serde_json::Value = serde_json::from_str(&ok(&vshadow(&cfg, &["extract"]))).unwrap();
    assert_eq!(first["written"], 60);
    let again: serde_json::Value = serde_json::from_str(&ok(&vshadow(&cfg, &["extract"]))).unwrap();
    assert_eq!(again["written"], 0);

    // stage 2 without its stage-1 checkpoint is a domain error
    let orphan = vshadow(&cfg, &["train", "--phase", "dec_ft_stage2", "--steps", "2"]);
    assert_eq!(orphan.status.code(), Some(1));

    ok(&vshadow(&cfg, &["train", "--phase", "one_step", "--steps", "3"]));
    assert!(dir.path().join("checkpoints/one_step.vsck").is_file());
    assert!(dir.path().join("checkpoints/one_step.log.jsonl").is_file());

    let run: serde_json::Value =
        serde_json::from_str(&ok(&vshadow(&cfg, &["convert", "--phase", "one_step"]))).unwrap();
    assert_eq!(run["utterances"], 2);

    let table = ok(&vshadow(&cfg, &["eval", "--system", "one_step"]));
    assert!(table.contains("id\tS1-CER\tS1-WER\tUTMOS\tSpeechBERTScore"));
    assert!(dir.path().join("reports/one_step.tsv").is_file());
    assert!(dir.path().join("reports/one_step.jsonl").is_file());

    let refs = ok(&vshadow(&cfg, &["eval", "--references"]));
    for line in refs.lines().filter(|l| l.starts_with("syn")) {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[1], "0.000000");
        assert_eq!(cols[2], "0.000000");
    }

    // one missing output: report still written, exit status 1
    std::fs::remove_file(dir.path().join("outputs/one_step/syn0008.mel.vshd")).unwrap();
    let partial = vshadow(&cfg, &["eval", "--system", "one_step"]);
    assert_eq!(partial.status.code(), Some(1));
    let tsv = std::fs::read_to_string(dir.path().join("reports/one_step.tsv")).unwrap();
    assert!(tsv.contains("# warning: 1 utterance(s) without converted output: syn0008"));

    let a = dir.path().join("data/features/syn0001/L1_S1.mel.vshd");
    let b = dir.path().join("data/features/syn0001/L1_SS.mel.vshd");
    let s3r = dir.path().join("data/features/syn0001/L2_R.s3r.vshd");
    let out = dir.path().join("profile.json");
    let msg = ok(&vshadow(
        &cfg,
        &["align", a.to_str().unwrap(), b.to_str().unwrap(), "--out", out.to_str().unwrap()],
    ));
    assert!(msg.contains("flagged"));
    let mismatch = vshadow(
        &cfg,
        &["align", a.to_str().unwrap(), s3r.to_str().unwrap(), "--out", out.to_str().unwrap()],
    );
    assert_eq!(mismatch.status.code(), Some(1));
}

#[test]
fn ppg_target_without_decoder_fails_before_converting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    ok(&vshadow(&cfg, &["gen-synthetic"]));
    ok(&vshadow(&cfg, &["extract"]));
    // a checkpoint whose target is ppg_bnf
    let text = std::fs::read_to_string(&cfg).unwrap();
    let mut value: toml::Value = text.parse().unwrap();
    for phase in value["phases"].as_array_mut().unwrap() {
        if phase["phase"].as_str() == Some("one_step") {
            phase
                .as_table_mut()
                .unwrap()
                .insert("target_feature".into(), "ppg_bnf".into());
        }
    }
    value["synthesis"].as_table_mut().unwrap().remove("ppg_to_spec");
    std::fs::write(&cfg, toml::to_string(&value).unwrap()).unwrap();
    ok(&vshadow(&cfg, &["train", "--phase", "one_step", "--steps", "1"]));
    let out = vshadow(&cfg, &["convert", "--phase", "one_step"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("PPG-to-Spec"), "{err}");
    assert!(!dir.path().join("outputs/one_step").exists());

    // with a trained decoder the same conversion goes through
    let decoder = dir.path().join("checkpoints/ppg_to_spec.vsck");
    value["synthesis"]
        .as_table_mut()
        .unwrap()
        .insert("ppg_to_spec".into(), decoder.display().to_string().into());
    std::fs::write(&cfg, toml::to_string(&value).unwrap()).unwrap();
    ok(&vshadow(&cfg, &["train", "--phase", "ppg_to_spec", "--steps", "2"]));
    ok(&vshadow(&cfg, &["convert", "--phase", "one_step"]));
    let out_dir = dir.path().join("outputs/one_step");
    assert!(out_dir.join("syn0008.ppg_bnf.vshd").is_file());
    assert!(out_dir.join("syn0008.mel.vshd").is_file());
    assert!(out_dir.join("syn0008.wav").is_file());
}
