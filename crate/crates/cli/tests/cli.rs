use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn voxrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxrecon"))
        .args(args)
        .output()
        .expect("spawn voxrecon")
}

fn ok(args: &[&str]) -> Output {
    let out = voxrecon(args);
    assert!(
        out.status.success(),
        "voxrecon {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    voxrecon(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_dataset(dir: &Path) {
    ok(&["gen", "--views", "4", "--width", "16", "--height", "16", "--out", p(dir)]);
}

fn files_under(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen", "--scene", "textured-box", "--views", "3", "--width", "12", "--height", "10", "--out", p(d)]);
    }
    let fa = files_under(&a);
    // scene, cameras, one image and one mask per view
    assert_eq!(fa.len(), 2 + 2 * 3);
    for f in &fa {
        let g = b.join(f.strip_prefix(&a).unwrap());
        assert_eq!(fs::read(f).unwrap(), fs::read(g).unwrap(), "{}", f.display());
    }
}

#[test]
fn gen_accepts_scene_json() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    small_dataset(&d);
    let scene = d.join("scene.json");
    let e = tmp.path().join("e");
    ok(&["gen", "--scene", p(&scene), "--views", "4", "--width", "16", "--height", "16", "--out", p(&e)]);
    assert_eq!(fs::read(d.join("cameras.json")).unwrap(), fs::read(e.join("cameras.json")).unwrap());
}

#[test]
fn usage_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(code(&["gen", "--scene", "no-such-scene", "--out", p(&out)]), 1);
    assert_eq!(code(&["--bogus-flag"]), 1);
    assert_eq!(code(&["bench-reg", "--mode", "nope"]), 1);
    assert_eq!(code(&["mesh", "--checkpoint", p(&out), "--out", p(&out), "--sigma", "-1"]), 1);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
}

#[test]
fn invalid_config_exits_one() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    small_dataset(&d);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"batch_rays": 0}"#).unwrap();
    let r = tmp.path().join("r");
    assert_eq!(code(&["train", "--data", p(&d), "--config", p(&cfg), "--out", p(&r)]), 1);
    fs::write(&cfg, r#"{"not_a_field": 1}"#).unwrap();
    assert_ne!(code(&["train", "--data", p(&d), "--config", p(&cfg), "--out", p(&r)]), 0);
}

#[test]
fn missing_files_exit_two() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing");
    let out = tmp.path().join("o.ply");
    assert_eq!(code(&["mesh", "--checkpoint", p(&missing), "--out", p(&out)]), 2);
    assert_eq!(code(&["eval", "--mesh", p(&missing), "--scene", "sphere"]), 2);
    assert_eq!(code(&["train", "--data", p(&missing), "--steps", "1", "--out", p(&out)]), 2);
}

#[test]
fn train_mesh_eval_pipeline() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    small_dataset(&d);
    let r = tmp.path().join("r");
    ok(&["--seed", "5", "train", "--data", p(&d), "--steps", "3", "--out", p(&r)]);
    for f in ["checkpoint/grid.sdfg", "checkpoint/radiance.radf", "checkpoint/optimizer.bin", "metrics.csv", "config.json"] {
        assert!(r.join(f).exists(), "{f}");
    }
    let report = read_json(&r.join("report.json"));
    assert_eq!(report["steps"], 3);
    assert_eq!(report["seed"], 5);
    let csv = fs::read_to_string(r.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let mesh = tmp.path().join("m.ply");
    ok(&["mesh", "--checkpoint", p(&r), "--out", p(&mesh)]);
    let self_eval = tmp.path().join("self.json");
    ok(&["eval", "--mesh", p(&mesh), "--reference", p(&mesh), "--samples", "500", "--out", p(&self_eval)]);
    assert_eq!(read_json(&self_eval)["chamfer"].as_f64().unwrap(), 0.0);

    let out = ok(&["eval", "--checkpoint", p(&r), "--scene", "sphere", "--samples", "500"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let c = v["chamfer"].as_f64().unwrap();
    assert!(c.is_finite() && c > 0.0);
    assert!(v["grid_spacing"].as_f64().unwrap() > 0.0);
}

#[test]
fn sigma_zero_matches_unfiltered() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    small_dataset(&d);
    let r = tmp.path().join("r");
    ok(&["train", "--data", p(&d), "--steps", "1", "--out", p(&r)]);
    let (a, b, c) = (tmp.path().join("a.ply"), tmp.path().join("b.ply"), tmp.path().join("c.ply"));
    ok(&["mesh", "--checkpoint", p(&r), "--out", p(&a)]);
    ok(&["mesh", "--checkpoint", p(&r.join("checkpoint").join("grid.sdfg")), "--sigma", "0", "--out", p(&b)]);
    ok(&["mesh", "--checkpoint", p(&r), "--sigma", "0.1", "--out", p(&c)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn level_outside_range_gives_empty_mesh() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    small_dataset(&d);
    let r = tmp.path().join("r");
    ok(&["train", "--data", p(&d), "--steps", "1", "--out", p(&r)]);
    let m = tmp.path().join("m.ply");
    ok(&["mesh", "--checkpoint", p(&r), "--level", "100", "--out", p(&m)]);
    let text = fs::read_to_string(&m).unwrap();
    assert!(text.contains("element vertex 0"));
    assert!(text.contains("element face 0"));
}

#[test]
fn estimators_give_different_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    small_dataset(&d);
    let grids: Vec<Vec<u8>> = ["analytical", "interpolated"]
        .iter()
        .map(|g| {
            let r = tmp.path().join(g);
            ok(&["train", "--data", p(&d), "--steps", "3", "--gradient", g, "--out", p(&r)]);
            fs::read(r.join("checkpoint").join("grid.sdfg")).unwrap()
        })
        .collect();
    assert_ne!(grids[0], grids[1]);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("d");
    small_dataset(&d);
    let full = tmp.path().join("full");
    let split = tmp.path().join("split");
    let common = ["--seed", "9", "train", "--data", p(&d), "--steps", "6"];
    ok(&[&common[..], &["--out", p(&full)]].concat());
    ok(&[&common[..], &["--out", p(&split), "--stop-after", "2"]].concat());
    assert_eq!(read_json(&split.join("report.json"))["steps"], 2);
    ok(&[&common[..], &["--out", p(&split), "--resume"]].concat());
    for f in ["checkpoint/grid.sdfg", "checkpoint/radiance.radf", "checkpoint/optimizer.bin", "metrics.csv"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn diagnose_report() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("diag");
    ok(&["diagnose", "--trials", "20", "--samples", "64", "--out", p(&out)]);
    let r = read_json(&out.join("report.json"));
    assert_eq!(r["max_interpolated_gap"].as_f64().unwrap(), 0.0);
    assert!(r["max_analytical_gap"].as_f64().unwrap() > 0.0);
    for key in ["analytical", "interpolated", "ratio", "refinement_ratio"] {
        assert!(r["glitch"][key].as_f64().unwrap().is_finite(), "{key}");
    }
    let trace = fs::read_to_string(out.join("trace_64.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "t,f,cos_a,cos_i,alpha_a,alpha_i,w_a,w_i");
    assert_eq!(trace.lines().count(), 65);
    assert!(out.join("trace_128.csv").exists());
}

#[test]
fn bench_reg_schema() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bench.json");
    ok(&[
        "--threads", "1", "bench-reg", "--resolution", "16", "--batch", "32", "--samples", "16", "--reps", "1", "--out",
        p(&out),
    ]);
    let r = read_json(&out);
    assert_eq!(r["threads"], 1);
    let results = r["results"].as_array().unwrap();
    let modes: Vec<&str> = results.iter().map(|m| m["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["tape-oracle", "manual-serial", "manual-parallel"]);
    for m in results {
        assert!(m["batches_per_second"].as_f64().unwrap() > 0.0);
        assert!(m["peak_heap_bytes"].as_u64().unwrap() > 0);
        assert!(m["vertices"].as_u64().unwrap() > 0);
        assert!(m["max_rel_err_vs_oracle"].as_f64().unwrap() < 1e-6);
    }
}
