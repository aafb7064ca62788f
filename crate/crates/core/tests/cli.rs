use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_plus-lab"));
    c.env("RUST_LOG", "warn").env_remove("PLUS_LAB_SEED");
    c
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn code(c: &mut Command) -> i32 {
    c.status().unwrap().code().unwrap()
}

fn gen(dir: &Path, cfg: &str) {
    assert_eq!(code(bin().args(["gen-data", "--config"]).arg(config(cfg)).arg("--out").arg(dir)), 0);
}

#[test]
fn gen_data_is_deterministic_and_flags_controversial_worlds() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "smoke.toml");
    gen(&b, "smoke.toml");
    for f in ["train.jsonl", "test_seen.jsonl", "test_ood.jsonl", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["controversial_filter"], false);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("noseed.toml");
    std::fs::write(&cfg, "[world.counts]\ntrain = 20\ntest_seen = 5\ntest_ood = 5\nrecords_per_user = 1\n").unwrap();
    let out = tmp.path().join("d");
    let mut c = bin();
    c.env("PLUS_LAB_SEED", "11").args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&out);
    assert_eq!(code(&mut c), 0);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    let mut c = bin();
    c.env("PLUS_LAB_SEED", "eleven").args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&out);
    assert_eq!(code(&mut c), 2);
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[joint]\nrm_stepz = 1\n").unwrap();
    let out = bin().args(["gen-data", "--config"]).arg(&bad).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rm_stepz") && err.contains("line 2"), "{err}");
    assert_eq!(code(bin().args(["--threads", "2", "report", "--input", "x"])), 2);
}

#[test]
fn train_bench_and_summarize_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, "smoke.toml");
    let art = tmp.path().join("art");
    let train = |variant: &str| {
        code(bin().args(["train", "--config"]).arg(config("smoke.toml")).args(["--variant", variant, "--data"]).arg(&data).arg("--out").arg(&art))
    };
    assert_eq!(train("plus"), 0);
    assert_eq!(train("btl"), 0);
    let ckpts = |v: &str| {
        let mut names: Vec<String> = std::fs::read_dir(art.join(v).join("seed-0"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".ckpt"))
            .collect();
        names.sort();
        names
    };
    assert_eq!(ckpts("plus"), ["critic.ckpt", "pi.ckpt", "rm.ckpt"]);
    assert_eq!(ckpts("btl"), ["rm.ckpt"]);
    // A second run finds the artifact and leaves it alone.
    let before = std::fs::read(art.join("plus/seed-0/pi.ckpt")).unwrap();
    assert_eq!(train("plus"), 0);
    assert_eq!(std::fs::read(art.join("plus/seed-0/pi.ckpt")).unwrap(), before);

    let out = tmp.path().join("report");
    let status = code(
        bin().args(["bench", "--config"]).arg(config("smoke.toml")).arg("--data").arg(&data).arg("--artifacts").arg(&art).arg("--out").arg(&out)
            .args(["--variants", "btl,plus", "--splits", "test-ood", "--no-train"]),
    );
    assert_eq!(status, 0);
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(md.starts_with("| variant | test-ood |"), "{md}");
    assert!(md.contains("| btl |") && md.contains("| plus |"));

    // Artifacts stamped by another config are refused.
    let other = tmp.path().join("other.toml");
    let text = std::fs::read_to_string(config("smoke.toml")).unwrap().replace("win_records = 10", "win_records = 12");
    std::fs::write(&other, text).unwrap();
    let status = code(
        bin().args(["bench", "--config"]).arg(&other).arg("--data").arg(&data).arg("--artifacts").arg(&art).arg("--out").arg(&out)
            .args(["--variants", "btl", "--no-train"]),
    );
    assert_eq!(status, 4);

    let summaries = tmp.path().join("s.jsonl");
    let summarize = |cfg: &str, data: &Path| {
        code(bin().args(["summarize", "--config"]).arg(config(cfg)).arg("--checkpoint").arg(art.join("plus/seed-0/pi.ckpt")).arg("--data").arg(data).arg("--out").arg(&summaries))
    };
    assert_eq!(summarize("smoke.toml", &data), 0);
    assert_eq!(std::fs::read_to_string(&summaries).unwrap().lines().count(), 40);

    let ufp = tmp.path().join("ufp");
    gen(&ufp, "ufp4.toml");
    assert_eq!(summarize("ufp4.toml", &ufp), 4);

    // A split without records gives empty output and success.
    let no_ood = tmp.path().join("no-ood.toml");
    let text = std::fs::read_to_string(config("smoke.toml")).unwrap().replace("test_ood = 40", "test_ood = 0");
    std::fs::write(&no_ood, text).unwrap();
    let empty = tmp.path().join("empty");
    assert_eq!(code(bin().args(["gen-data", "--config"]).arg(&no_ood).arg("--out").arg(&empty)), 0);
    let status = code(
        bin().args(["summarize", "--config"]).arg(&no_ood).arg("--checkpoint").arg(art.join("plus/seed-0/pi.ckpt")).arg("--data").arg(&empty)
            .args(["--split", "test-ood"]).arg("--out").arg(&summaries),
    );
    assert_eq!(status, 0);
    assert!(std::fs::read_to_string(&summaries).unwrap().is_empty());
}
