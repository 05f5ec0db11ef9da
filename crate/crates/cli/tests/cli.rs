use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fbp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Rows of a CSV file without its header.
fn rows(p: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect()
}

fn last_col(p: &Path) -> Vec<f64> {
    rows(p).iter().map(|r| r.last().unwrap().parse().unwrap()).collect()
}

fn pgm(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(px);
    out
}

#[test]
fn heat_preset_conserves_mass() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("heat");
    let o = fbp(&["solve", "--preset", "heat", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["u.csv", "gradient_max.csv", "mass.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let drift = last_col(&out.join("mass.csv"));
    assert_eq!(drift.len(), 201);
    assert!(drift.iter().all(|d| d.abs() <= 1e-10));
    let header = std::fs::read_to_string(out.join("u.csv")).unwrap();
    assert!(header.starts_with("level,t,x,u\n"));
}

#[test]
fn bad_window_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.ini");
    std::fs::write(&cfg, "[window]\nr1 = 0.45\nr2 = 0.6\n").unwrap();
    let o = fbp(&["solve", "--config", path(&cfg), "--out", path(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("clause `r2 < peak"), "{err}");
}

#[test]
fn unknown_key_value_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.ini");
    std::fs::write(&cfg, "[grid]\nnx = many\n").unwrap();
    let o = fbp(&["solve", "--config", path(&cfg), "--out", path(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_stages_reports_boundary_function() {
    let dir = tempfile::tempdir().unwrap();
    let (p0, full, solve) = (dir.path().join("p0"), dir.path().join("full"), dir.path().join("solve"));
    let small = dir.path().join("small.ini");
    std::fs::write(&small, "[grid]\nnx = 96\nnt = 96\n").unwrap();
    let cfg = path(&small);
    assert!(fbp(&["pipeline", "--config", cfg, "--stages", "0", "--out", path(&p0)]).status.success());
    assert!(fbp(&["pipeline", "--config", cfg, "--stages", "2", "--out", path(&full)]).status.success());
    assert!(fbp(&["solve", "--config", cfg, "--out", path(&solve)]).status.success());
    let s0 = rows(&p0.join("stages.csv"));
    assert_eq!(s0.len(), 1);
    assert_eq!(s0[0], rows(&full.join("stages.csv"))[0]);
    let (a, b) = (last_col(&p0.join("u.csv")), last_col(&solve.join("u.csv")));
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(diff <= 1e-12, "u* differs from the solver output by {diff:e}");
}

#[test]
fn seeds_select_distinct_solutions() {
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small.ini");
    std::fs::write(&small, "[grid]\nnx = 96\nnt = 96\n[schedule]\nstages = 2\n").unwrap();
    let run = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = fbp(&["pipeline", "--config", path(&small), "--seed", seed, "--out", path(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b, a2) = (run("1", "a"), run("2", "b"), run("1", "a2"));
    let (ua, ub) = (last_col(&a.join("u.csv")), last_col(&b.join("u.csv")));
    let diff = ua.iter().zip(&ub).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(diff > 0.0);
    for f in ["u.csv", "stages.csv", "verification.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(a2.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn case_two_preset_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c2");
    let o = fbp(&["pipeline", "--case", "II", "--stages", "2", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let res: Vec<f64> = rows(&out.join("stages.csv")).iter().map(|r| r[6].parse().unwrap()).collect();
    assert!(res.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn case_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fbp(&["pipeline", "--preset", "case1", "--case", "II", "--out", path(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn rectangle_run_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let o = fbp(&["solve", "--preset", "rect2d", "--out", path(&dir.path().join("r"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(t.elapsed() < Duration::from_secs(60));
}

#[test]
fn malformed_pgm_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.pgm");
    std::fs::write(&bad, b"P5\n4 4\n255\n\x01\x02").unwrap();
    let o = fbp(&["denoise", path(&bad), path(&dir.path().join("o.pgm"))]);
    assert_eq!(o.status.code(), Some(4));
    let ascii = dir.path().join("ascii.pgm");
    std::fs::write(&ascii, b"P2\n2 1\n255\n1 2\n").unwrap();
    let o = fbp(&["denoise", path(&ascii), path(&dir.path().join("o.pgm"))]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn denoise_keeps_constant_image_and_range() {
    let dir = tempfile::tempdir().unwrap();
    let flat = dir.path().join("flat.pgm");
    let bytes = pgm(10, 7, &[93u8; 70]);
    std::fs::write(&flat, &bytes).unwrap();
    let out = dir.path().join("flat_out.pgm");
    assert!(fbp(&["denoise", path(&flat), path(&out)]).status.success());
    let got = std::fs::read(&out).unwrap();
    assert_eq!(&got[got.len() - 70..], &bytes[bytes.len() - 70..]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let px: Vec<u8> = (0..32 * 24).map(|_| rng.random_range(60u8..200)).collect();
    let noisy = dir.path().join("noisy.pgm");
    std::fs::write(&noisy, pgm(32, 24, &px)).unwrap();
    let out = dir.path().join("noisy_out.pgm");
    assert!(fbp(&["denoise", path(&noisy), path(&out), "--steps", "10"]).status.success());
    let got = std::fs::read(&out).unwrap();
    let body = &got[got.len() - px.len()..];
    let (lo, hi) = (*px.iter().min().unwrap(), *px.iter().max().unwrap());
    assert!(body.iter().all(|&x| x >= lo && x <= hi));
}
