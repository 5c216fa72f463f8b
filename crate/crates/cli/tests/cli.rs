use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn magnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

/// Deterministic pseudo-random bytes: SHA-256 in counter mode.
fn pseudo_random(len: usize, seed: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(len + 32);
    let mut i = 0u64;
    while out.len() < len {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(i.to_le_bytes());
        out.extend_from_slice(&h.finalize());
        i += 1;
    }
    out.truncate(len);
    out
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn encode(dir: &Path, data: &[u8]) -> PathBuf {
    let input = dir.join("input.bin");
    fs::write(&input, data).unwrap();
    let shards = dir.join("shards");
    let out = magnet(&["rs", "encode", p(&input), "-k", "4", "-m", "2", "--out", p(&shards)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    shards
}

#[test]
fn rs_round_trip_survives_any_two_losses() {
    let dir = tempfile::tempdir().unwrap();
    let data = pseudo_random(1 << 20, 9);
    let want = Sha256::digest(&data);
    let shards = encode(dir.path(), &data);
    for a in 0..6 {
        for b in a + 1..6 {
            let keep: Vec<String> = (0..6)
                .filter(|i| *i != a && *i != b)
                .map(|i| shards.join(format!("shard-{i}.bin")).to_string_lossy().into_owned())
                .collect();
            let restored = dir.path().join(format!("restored-{a}-{b}.bin"));
            let mut args = vec!["rs", "decode"];
            args.extend(keep.iter().map(String::as_str));
            args.extend(["--out", p(&restored)]);
            let out = magnet(&args);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            assert_eq!(Sha256::digest(fs::read(&restored).unwrap()), want, "lost {a},{b}");
        }
    }
}

#[test]
fn rs_decode_from_directory_after_deleting_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = pseudo_random(5000, 1);
    let shards = encode(dir.path(), &data);
    fs::remove_file(shards.join("shard-0.bin")).unwrap();
    fs::remove_file(shards.join("shard-5.bin")).unwrap();
    let restored = dir.path().join("restored.bin");
    let out = magnet(&["rs", "decode", p(&shards), "--out", p(&restored)]);
    assert!(out.status.success());
    assert_eq!(fs::read(&restored).unwrap(), data);
}

#[test]
fn rs_decode_with_three_shards_fails() {
    let dir = tempfile::tempdir().unwrap();
    let shards = encode(dir.path(), &pseudo_random(4096, 2));
    let files: Vec<String> = (0..3)
        .map(|i| shards.join(format!("shard-{i}.bin")).to_string_lossy().into_owned())
        .collect();
    let restored = dir.path().join("restored.bin");
    let out = magnet(&["rs", "decode", &files[0], &files[1], &files[2], "--out", p(&restored)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("3 distinct shards available, 4 needed"), "{err}");
    assert!(!restored.exists());
}

#[test]
fn rs_encode_empty_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.bin");
    fs::write(&input, b"").unwrap();
    let out = magnet(&["rs", "encode", p(&input), "--out", p(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty blob"));
}

#[test]
fn rs_encode_rejects_bad_params() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("x.bin");
    fs::write(&input, b"abc").unwrap();
    let out = magnet(&["rs", "encode", p(&input), "-k", "0", "--out", p(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(1));
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn scenarios_are_byte_identical_on_rerun() {
    for (cmd, file) in [
        ("diloco", "diloco_lossy.toml"),
        ("storage", "storage.toml"),
        ("ledger", "ledger.toml"),
        ("autoloop", "autoloop.toml"),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        for out in [&a, &b] {
            let o = magnet(&[cmd, &scenario(file), "--out", p(out)]);
            assert_eq!(o.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        }
        let (fa, fb) = (read_dir_sorted(&a), read_dir_sorted(&b));
        assert!(fa.iter().any(|(n, _)| n == "summary.json"));
        assert_eq!(fa, fb, "{cmd} outputs differ between runs");
    }
}

#[test]
fn diloco_writes_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = magnet(&["diloco", &scenario("diloco.toml"), "--out", p(dir.path())]);
    assert!(out.status.success());
    let table = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let ratio: f64 = table
        .lines()
        .find_map(|l| l.strip_prefix("loss_ratio,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(ratio <= 1.10, "{ratio}");
    for f in ["rounds.csv", "merges.jsonl", "baseline.csv", "trace.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn config_errors_exit_one_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[diloco]\nrounds = 3\ninner_stepz = 4\n").unwrap();
    let out = magnet(&["diloco", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");

    fs::write(&cfg, "seed = 1\n").unwrap();
    let out = magnet(&["storage", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing [storage]"));
}

#[test]
fn data_loss_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("loss.toml");
    let batches: Vec<String> = (0..6)
        .map(|i| format!("{{ at_secs = {}, nodes = [\"node-{:02}\", \"node-{:02}\"] }}", 10 * (i + 1), 2 * i, 2 * i + 1))
        .collect();
    fs::write(
        &cfg,
        format!("seed = 4\n[storage]\nduration_secs = 600\nfailures = [{}]\n", batches.join(", ")),
    )
    .unwrap();
    let out = magnet(&["storage", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not decodable"));
}

#[test]
fn model_check_passes() {
    let out = magnet(&["model-check"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("interleavings"));
}
