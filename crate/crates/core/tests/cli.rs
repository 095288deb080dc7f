use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use spikefield::field::FnField;
use spikefield::geometry::{marching_cubes, read_mesh, sample_density_grid, write_mesh, Inside};
use spikefield::math::{norm, Aabb, Vec3};
use spikefield::trainer::{initial_checkpoint, TrainConfig};

const TINY: &str = r#"{
  "scene": {"synthetic": {"n_train": 4, "n_eval": 1, "width": 12, "height": 12, "focal": 15.0, "reference_samples": 64}},
  "sampler": {"n_samples": 8},
  "batch_rays": 16,
  "network": {"density_hidden": 8, "color_hidden": 8, "density_layers": 1, "color_layers": 1},
  "losses": {"regularizer_rays": 2, "eikonal_points": 4},
  "schedule": {"rounds": 2}
}"#;

fn spikefield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikefield"))
        .args(args)
        .env_remove("SPIKEFIELD_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr is JSON: {}", String::from_utf8_lossy(&o.stderr)))
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

fn train(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", s(config), "--out", s(out)];
    args.extend_from_slice(extra);
    spikefield(&args)
}

fn with_rounds(rounds: u64) -> String {
    let mut v: Value = serde_json::from_str(TINY).unwrap();
    v["schedule"]["rounds"] = rounds.into();
    v.to_string()
}

#[test]
fn train_zero_rounds_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let text = with_rounds(0);
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("run");
    let o = train(&cfg, &out, &["--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let mut config = TrainConfig::from_json(&text).unwrap();
    config.seed = 3;
    let dataset = config.scene.load(config.seed).unwrap();
    let expected = initial_checkpoint(&config, &dataset).unwrap();
    assert_eq!(std::fs::read(out.join("checkpoint.spkf")).unwrap(), expected);

    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["iterations"], 0);
    for key in ["config_sha256", "input_content_hash", "checkpoint_sha256"] {
        assert_eq!(manifest[key].as_str().unwrap().len(), 64, "{key}");
    }
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"schedule": {"rounds": "many"}}"#);
    let o = train(&cfg, &dir.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["exit_code"], 2);
    assert!(e.to_string().contains("schedule.rounds"), "{e}");

    let cfg = write_config(dir.path(), r#"{"batch_rayz": 3}"#);
    let o = train(&cfg, &dir.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o).to_string().contains("batch_rayz"));
}

#[test]
fn missing_config_and_unknown_flag_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(&dir.path().join("absent.json"), &dir.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["exit_code"], 2);
    let o = spikefield(&["extract", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let o = spikefield(&["train", "--config", "x.json", "--out", "y", "--preset", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn same_config_and_seed_train_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train(&cfg, out, &["--seed", "11"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["checkpoint.spkf", "train_log.ndjson"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(a.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 10);
}

#[test]
fn threads_flag_and_env_do_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(train(&cfg, &a, &["--threads", "1"]).status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_spikefield"))
        .args(["train", "--config", s(&cfg), "--out", s(&b)])
        .env("SPIKEFIELD_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(a.join("checkpoint.spkf")).unwrap(),
        std::fs::read(b.join("checkpoint.spkf")).unwrap()
    );
}

#[test]
fn extract_defaults_to_learned_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &with_rounds(40));
    let run = dir.path().join("run");
    assert_eq!(train(&cfg, &run, &[]).status.code(), Some(0));
    let ckpt = dir.path().join("set.spkf");
    let mut field = spikefield::checkpoint::load(&run.join("checkpoint.spkf")).unwrap();
    field.set_threshold(0.3);
    spikefield::checkpoint::save(&field, &ckpt).unwrap();

    let mesh_a = dir.path().join("a.obj");
    let o = spikefield(&["extract", "--checkpoint", s(&ckpt), "--out", s(&mesh_a), "--resolution", "24"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("a.obj.json")).unwrap()).unwrap();
    assert_eq!(report["level"], 0.3);
    assert_eq!(report["resolution"], 24);

    let mesh_b = dir.path().join("b.ply");
    let o = spikefield(&[
        "extract", "--checkpoint", s(&ckpt), "--out", s(&mesh_b), "--resolution", "24", "--level", "0.01",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let report_b: Value = serde_json::from_slice(&std::fs::read(dir.path().join("b.ply.json")).unwrap()).unwrap();
    assert_eq!(report_b["level"], 0.01);
    let (a, b) = (read_mesh(&mesh_a).unwrap(), read_mesh(&mesh_b).unwrap());
    assert!(!a.is_empty() || !b.is_empty());
    assert_ne!(a, b);
}

#[test]
fn empty_extraction_warns_and_eval_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &with_rounds(0));
    let run = dir.path().join("run");
    assert_eq!(train(&cfg, &run, &[]).status.code(), Some(0));
    let mesh = dir.path().join("empty.obj");
    let o = spikefield(&[
        "extract", "--checkpoint", s(&run.join("checkpoint.spkf")), "--out", s(&mesh), "--resolution", "8",
        "--level", "1e9",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("warning"));
    let report: Value = serde_json::from_slice(&std::fs::read(dir.path().join("empty.obj.json")).unwrap()).unwrap();
    assert_eq!(report["n_triangles"], 0);
    assert!(report["warning"].is_string());

    let o = spikefield(&["eval", "--mesh", s(&mesh), "--reference", "analytic:sphere"]);
    assert_eq!(o.status.code(), Some(4));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r["chamfer"].is_null());
    assert!(r["warning"].is_string());
}

#[test]
fn unreadable_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.spkf");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    for ckpt in [bad, dir.path().join("absent.spkf")] {
        let o = spikefield(&["extract", "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("m.obj"))]);
        assert_eq!(o.status.code(), Some(2));
        assert_eq!(stderr_json(&o)["exit_code"], 2);
    }
}

/// Marching Cubes mesh of the sphere of radius `r` on a `res`³ lattice over
/// the cube of half-width 1.5.
fn sphere_mesh(r: f64, res: usize) -> spikefield::geometry::TriangleMesh {
    let f = FnField(move |x: Vec3| r - norm(x));
    let grid = sample_density_grid(&f, [res; 3], Aabb::cube(1.5)).unwrap();
    marching_cubes(&grid, 0.0, Inside::Above).unwrap()
}

#[test]
fn eval_against_itself_and_analytic_sphere() {
    let dir = tempfile::tempdir().unwrap();
    let res = 48;
    let mesh = dir.path().join("unit.ply");
    write_mesh(&sphere_mesh(1.0, res), &mesh).unwrap();

    let self_ref = format!("mesh:{}", s(&mesh));
    let o = spikefield(&["eval", "--mesh", s(&mesh), "--reference", &self_ref, "--samples", "5000"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["chamfer"], 0.0);

    let report = dir.path().join("r.json");
    let o = spikefield(&[
        "eval", "--mesh", s(&mesh), "--reference", "analytic:sphere:r=1", "--samples", "20000", "--seed", "4",
        "--report", s(&report),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let voxel = 3.0 / (res - 1) as f64;
    let cd = r["chamfer"].as_f64().unwrap();
    assert!(cd < 1.5 * voxel, "cd {cd} voxel {voxel}");
    let again: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(again, r);
}

#[test]
fn eval_reference_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mesh = dir.path().join("m.obj");
    write_mesh(&sphere_mesh(0.5, 16), &mesh).unwrap();
    let absent = format!("mesh:{}", s(&dir.path().join("absent.obj")));
    for reference in [absent.as_str(), "analytic:cone", "analytic:sphere:r=-1", "sphere"] {
        let o = spikefield(&["eval", "--mesh", s(&mesh), "--reference", reference]);
        assert_eq!(o.status.code(), Some(2), "{reference}");
        assert_eq!(stderr_json(&o)["exit_code"], 2);
    }
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let o = spikefield(&["gradcheck", "--points", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    for suite in ["diffcore", "encoding", "field", "rendering", "losses", "spiking"] {
        assert!(text.contains(suite), "{suite} missing from\n{text}");
    }
    assert!(text.contains("surrogate"));

    let o = spikefield(&["gradcheck", "--points", "10", "--inject-fault", "softplus"]);
    assert_eq!(o.status.code(), Some(5));
    let e = stderr_json(&o);
    assert_eq!(e["exit_code"], 5);
    assert!(e["failed_ops"].as_array().unwrap().iter().any(|v| v == "softplus"), "{e}");

    let o = spikefield(&["gradcheck", "--inject-fault", "no_such_op"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn make_scene_then_train_on_it() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let o = spikefield(&[
        "make-scene", "--out", s(&scene), "--shape", "torus", "--views", "3", "--eval-views", "1", "--size", "10",
        "--seed", "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["transforms_train.json", "transforms_test.json", "scene_config.json"] {
        assert!(scene.join(f).exists(), "{f}");
    }
    let mut v: Value = serde_json::from_str(TINY).unwrap();
    v["scene"] = serde_json::json!({"blender": {"path": scene}});
    let cfg = write_config(dir.path(), &v.to_string());
    let out = dir.path().join("run");
    let o = train(&cfg, &out, &["--preset", "wo-fix"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["preset"], "wo-fix");

    let o = spikefield(&["make-scene", "--out", s(&dir.path().join("bad")), "--views", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_every_subcommand() {
    let o = spikefield(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for cmd in ["train", "extract", "eval", "gradcheck", "make-scene"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
