use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const GRID: &str = "v 0 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\nv 1 1 0\nv 2 1 0\n\
                    f 1 2 5\nf 1 5 4\nf 2 3 6\nf 2 6 5\n";

const CUBE: &str = "v -0.5 -0.5 -0.5\nv 0.5 -0.5 -0.5\nv 0.5 0.5 -0.5\nv -0.5 0.5 -0.5\n\
                    v -0.5 -0.5 0.5\nv 0.5 -0.5 0.5\nv 0.5 0.5 0.5\nv -0.5 0.5 0.5\n\
                    f 1 3 2\nf 1 4 3\nf 5 6 7\nf 5 7 8\nf 1 2 6\nf 1 6 5\n\
                    f 2 3 7\nf 2 7 6\nf 3 4 8\nf 3 8 7\nf 4 1 5\nf 4 5 8\n";

fn seamkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seamkit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn schema_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name)
}

fn assert_valid(schema: &str, value: &Value) {
    let schema: Value = serde_json::from_str(&fs::read_to_string(schema_path(schema)).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let errors: Vec<String> = validator.iter_errors(value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{value} violates schema: {errors:?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Cube whose six faces are separate UV squares.
fn textured_cube() -> String {
    let mut text: String = CUBE.lines().filter(|l| l.starts_with("v ")).map(|l| format!("{l}\n")).collect();
    for k in 0..6 {
        let x = 2.0 * k as f64;
        text += &format!("vt {x} 0\nvt {} 0\nvt {} 1\nvt {x} 1\n", x + 1.0, x + 1.0);
    }
    let quads = [[1, 4, 3, 2], [5, 6, 7, 8], [1, 2, 6, 5], [2, 3, 7, 6], [3, 4, 8, 7], [4, 1, 5, 8]];
    for (k, q) in quads.iter().enumerate() {
        let t = |c: usize| 4 * k + c + 1;
        text += &format!("f {}/{} {}/{} {}/{}\n", q[0], t(0), q[1], t(1), q[2], t(2));
        text += &format!("f {}/{} {}/{} {}/{}\n", q[0], t(0), q[2], t(2), q[3], t(3));
    }
    text
}

#[test]
fn planar_grid_without_seams_is_one_undistorted_island() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("grid.obj"), GRID).unwrap();
    let stdout = ok(&seamkit(dir.path(), &["evaluate", "grid.obj", "--json-out", "m.json", "--svg", "a.svg"]));
    let printed: Value = serde_json::from_str(&stdout).unwrap();
    let written = read_json(&dir.path().join("m.json"));
    assert_eq!(printed, written);
    assert_valid("metrics.schema.json", &written);
    assert_eq!(written["fragments"], 1);
    assert!(written["distortion"].as_f64().unwrap().abs() <= 1e-9);
    assert!(fs::read_to_string(dir.path().join("a.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn from_uv_reproduces_the_stored_islands() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("cube.obj"), textured_cube()).unwrap();
    let stdout = ok(&seamkit(dir.path(), &["evaluate", "cube.obj", "--from-uv"]));
    let metrics: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(metrics["fragments"], 6);
    assert!(metrics["distortion"].as_f64().unwrap() < 1e-9);

    // The unwrapped OBJ carries its own UVs, which must describe the same cut.
    ok(&seamkit(dir.path(), &["unwrap", "cube.obj", "--from-uv", "-o", "flat.obj"]));
    let again: Value = serde_json::from_str(&ok(&seamkit(dir.path(), &["evaluate", "flat.obj", "--from-uv"]))).unwrap();
    assert_eq!(again["fragments"], 6);

    let err = seamkit(dir.path(), &["evaluate", "flat.obj", "--from-uv", "x.seams"]);
    assert_eq!(err.status.code(), Some(2));
}

#[test]
fn from_uv_without_texture_coordinates_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("cube.obj"), CUBE).unwrap();
    let out = seamkit(dir.path(), &["evaluate", "cube.obj", "--from-uv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_exits_2_without_outputs() {
    let dir = TempDir::new().unwrap();
    let out = seamkit(dir.path(), &["evaluate", "absent.obj", "--json-out", "m.json", "--svg", "a.svg"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.obj"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn degenerate_mesh_is_a_pipeline_error_naming_the_stage() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("flat.obj"), "v 1 1 1\nv 1 1 1\nv 1 1 1\nf 1 2 3\n").unwrap();
    let out = seamkit(dir.path(), &["evaluate", "flat.obj", "--json-out", "m.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("normalize"));
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn tokenize_round_trip_is_stable() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("a.seams"), "0.1 -0.2 0.3 0.4 0.25 -0.45\n-0.5 0.5 0 0.5 -0.5 0.1\n").unwrap();
    ok(&seamkit(dir.path(), &["tokenize", "a.seams", "-o", "a.tok"]));
    ok(&seamkit(dir.path(), &["detokenize", "a.tok", "-o", "b.seams"]));
    ok(&seamkit(dir.path(), &["tokenize", "b.seams", "-o", "b.tok"]));
    assert_eq!(fs::read(dir.path().join("a.tok")).unwrap(), fs::read(dir.path().join("b.tok")).unwrap());

    fs::write(dir.path().join("empty.seams"), "").unwrap();
    ok(&seamkit(dir.path(), &["tokenize", "empty.seams", "-o", "e.tok"]));
    assert_eq!(fs::read_to_string(dir.path().join("e.tok")).unwrap(), "1024\n1025\n");
}

#[test]
fn project_maps_an_edge_segment_to_one_line() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("grid.obj"), GRID).unwrap();
    // The grid normalizes to x in [-0.5, 0.5], y in [-0.25, 0.25].
    fs::write(dir.path().join("s.seams"), "0 -0.25 0 0.5 -0.25 0\n").unwrap();
    ok(&seamkit(dir.path(), &["project", "grid.obj", "s.seams", "-o", "e.txt"]));
    assert_eq!(fs::read_to_string(dir.path().join("e.txt")).unwrap(), "1 2\n");
}

#[test]
fn project_skips_segments_between_components() {
    let dir = TempDir::new().unwrap();
    let mesh = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 3 0 0\nv 4 0 0\nv 3 1 0\nf 1 2 3\nf 4 5 6\n";
    fs::write(dir.path().join("two.obj"), mesh).unwrap();
    fs::write(dir.path().join("s.seams"), "-0.5 -0.125 0 0.5 -0.125 0\n").unwrap();
    let out = seamkit(dir.path(), &["project", "two.obj", "s.seams", "-o", "e.txt"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipped"));
    assert_eq!(fs::read_to_string(dir.path().join("e.txt")).unwrap(), "");
}

#[test]
fn edge_list_must_reference_mesh_edges() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("grid.obj"), GRID).unwrap();
    fs::write(dir.path().join("bad.edges"), "0 5\n").unwrap();
    let out = seamkit(dir.path(), &["evaluate", "grid.obj", "bad.edges", "--edges"]);
    assert_eq!(out.status.code(), Some(2));
    // The middle edge runs boundary to boundary, so it splits the grid.
    fs::write(dir.path().join("cut.edges"), "1 4\n").unwrap();
    let m: Value = serde_json::from_str(&ok(&seamkit(dir.path(), &["evaluate", "grid.obj", "cut.edges", "--edges"]))).unwrap();
    assert_eq!(m["fragments"], 2);
}

#[test]
fn unknown_config_keys_are_listed() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("run.cfg"), "seed=1\nbetta=0.1\nsteps=3\nlearning_rate=2\n").unwrap();
    let out = seamkit(dir.path(), &["--config", "run.cfg", "dpo", "--checkpoint", "c", "--pairs", "p", "-o", "o"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("betta") && stderr.contains("learning_rate"), "{stderr}");
}

fn brute_force_joint(metrics: &[(f64, u64)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..metrics.len() {
        for j in 0..metrics.len() {
            if metrics[i].0 < metrics[j].0 && metrics[i].1 < metrics[j].1 {
                out.push((i, j));
            }
        }
    }
    out
}

/// pretrain, sample, prefpairs and dpo on a tiny model.
#[test]
fn sampling_pairs_and_dpo_stages() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("cube.obj"), CUBE).unwrap();
    fs::write(d.join("pre.cfg"), "steps=3\nmax_segments=16\npoints=64\n").unwrap();
    ok(&seamkit(d, &["--config", "pre.cfg", "--seed", "2", "pretrain", "-o", "ck.bin", "--json-out", "pre.json"]));
    assert_valid("pretrain-report.schema.json", &read_json(&d.join("pre.json")));
    assert_valid("manifest.schema.json", &read_json(&d.join("ck.bin.manifest.json")));

    fs::write(d.join("s.cfg"), "count=5\npoints=64\ntemperature=1.5\n").unwrap();
    let sample = ["--config", "s.cfg", "--seed", "11", "sample", "cube.obj", "--checkpoint", "ck.bin", "-o"];
    ok(&seamkit(d, &[&sample[..], &["run1"]].concat()));
    ok(&seamkit(d, &[&sample[..], &["run2"]].concat()));
    let list = d.join("run1/candidates.jsonl");
    let records = jsonl(&list);
    assert_eq!(records.len(), 5);
    for (k, r) in records.iter().enumerate() {
        assert_valid("candidate.schema.json", r);
        let file = format!("candidate_{k}.seams");
        assert_eq!(r["seams"], file.as_str());
        let a = fs::read(d.join("run1").join(&file)).unwrap();
        assert_eq!(a, fs::read(d.join("run2").join(&file)).unwrap(), "sampling is seeded");
    }
    let manifest = read_json(&d.join("run1/candidates.jsonl.manifest.json"));
    assert_valid("manifest.schema.json", &manifest);
    for out in manifest["outputs"].as_array().unwrap() {
        assert!(d.join(out.as_str().unwrap()).exists(), "{out}");
    }

    ok(&seamkit(d, &["prefpairs", "run1/candidates.jsonl", "-o", "pairs.jsonl"]));
    let pairs = jsonl(&d.join("pairs.jsonl"));
    let scored: Vec<(f64, u64)> = records
        .iter()
        .map(|r| (r["metrics"]["distortion"].as_f64().unwrap(), r["metrics"]["fragments"].as_u64().unwrap()))
        .collect();
    let got: Vec<(usize, usize)> = pairs
        .iter()
        .map(|p| (p["positive"].as_u64().unwrap() as usize, p["negative"].as_u64().unwrap() as usize))
        .collect();
    assert_eq!(got, brute_force_joint(&scored));
    for p in &pairs {
        assert_valid("pair.schema.json", p);
    }

    fs::write(d.join("d.cfg"), "steps=0\n").unwrap();
    ok(&seamkit(d, &["--config", "d.cfg", "dpo", "--checkpoint", "ck.bin", "--pairs", "pairs.jsonl", "-o", "out.bin", "--json-out", "dpo.json"]));
    assert_eq!(fs::read(d.join("ck.bin")).unwrap(), fs::read(d.join("out.bin")).unwrap());
    assert_valid("dpo-report.schema.json", &read_json(&d.join("dpo.json")));
    assert_valid("manifest.schema.json", &read_json(&d.join("out.bin.manifest.json")));
}

#[test]
fn dpo_steps_zero_keeps_the_checkpoint_without_pairs() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("pre.cfg"), "steps=1\nmax_segments=8\npoints=32\n").unwrap();
    ok(&seamkit(d, &["--config", "pre.cfg", "pretrain", "-o", "ck.bin"]));
    fs::write(d.join("pairs.jsonl"), "").unwrap();
    fs::write(d.join("d.cfg"), "steps=0\n").unwrap();
    ok(&seamkit(d, &["--config", "d.cfg", "dpo", "--checkpoint", "ck.bin", "--pairs", "pairs.jsonl", "-o", "out.bin"]));
    assert_eq!(fs::read(d.join("ck.bin")).unwrap(), fs::read(d.join("out.bin")).unwrap());
}

#[test]
fn sample_points_writes_both_clouds() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("cube.obj"), CUBE).unwrap();
    ok(&seamkit(dir.path(), &["--seed", "5", "sample-points", "cube.obj", "-o", "pc", "--points", "40"]));
    for suffix in ["topo", "geom"] {
        let text = fs::read_to_string(dir.path().join(format!("pc.{suffix}.xyz"))).unwrap();
        assert_eq!(text.lines().count(), 40, "{suffix}");
    }
}
