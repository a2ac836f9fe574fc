use aerograph_core::archive::RolloutArchive;
use aerograph_core::mesh::graph::load_graph;
use aerograph_core::mesh::room::{build_room_mesh, RoomSpec};
use aerograph_core::refsim::{sweep_specs, write_foam_case, CaseSpec};
use serde_json::{json, Value};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aerograph"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn stderr_json(o: &Output) -> Value {
    let s = String::from_utf8_lossy(&o.stderr);
    let line = s.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {s}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_spec(name: &str, v_in: f64, u_mag: f64, seed: u64) -> CaseSpec {
    CaseSpec {
        name: name.into(),
        v_in,
        u_mag,
        theta: 20.0,
        seed,
        n_tracked: 30,
        n_frames: 12,
        duration: 3.5,
        ..CaseSpec::toy(v_in, seed)
    }
}

fn write_spec(dir: &Path, spec: &CaseSpec) -> PathBuf {
    let f = dir.join(format!("{}.json", spec.name));
    std::fs::write(&f, serde_json::to_string(spec).unwrap()).unwrap();
    f
}

#[test]
fn extract_fixture_case() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("case");
    let room = RoomSpec::with_cells(8, 6);
    write_foam_case(&CaseSpec::default(), &room, &case).unwrap();
    let mesh_dir = case.join("constant/polyMesh");
    let out = dir.path().join("mesh.egrf");
    ok(&["extract", "--mesh-dir", p(&mesh_dir), "--out", p(&out)]);
    let g = load_graph(&out).unwrap();
    assert_eq!(g.n_cells(), build_room_mesh(&room).unwrap().n_cells());
    let first = std::fs::read(&out).unwrap();
    ok(&["extract", "--mesh-dir", p(&mesh_dir), "--fields-dir", p(&case.join("0")), "--out", p(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), first);

    std::fs::remove_file(mesh_dir.join("boundary")).unwrap();
    let o = run(&["extract", "--mesh-dir", p(&mesh_dir), "--out", p(&dir.path().join("x.egrf"))]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["kind"], "not_found");
}

#[test]
fn synth_records_metadata_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec("Sweep_Case_03", 0.10, 30.0, 5);
    let cfg = write_spec(dir.path(), &spec);
    let (a, b) = (dir.path().join("a.elgn"), dir.path().join("b.elgn"));
    ok(&["synth", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["synth", "--config", p(&cfg), "--out", p(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let arc = RolloutArchive::load(&a).unwrap();
    assert_eq!((arc.meta.v_in, arc.meta.u_mag, arc.meta.theta), (0.10, 30.0, 20.0));
    assert_eq!(arc.frames.len(), 12);

    ok(&["synth", "--config", p(&cfg), "--seed", "6", "--out", p(&b)]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(RolloutArchive::load(&b).unwrap().meta.seed, 6);
}

#[test]
fn synth_zero_duration_fails_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CaseSpec {
        duration: 0.0,
        ..small_spec("zero", 0.1, 30.0, 0)
    };
    let cfg = write_spec(dir.path(), &spec);
    let o = run(&["synth", "--config", p(&cfg), "--out", p(&dir.path().join("z.elgn"))]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"]["kind"], "config");
    assert!(!dir.path().join("z.elgn").exists());
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.elgn");
    let o = run(&["eval", "--pred", p(&missing), "--ref", p(&missing), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["kind"], "not_found");

    let o = run(&["synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["kind"], "usage");
}

#[test]
fn eval_identical_archives_gives_zero_mde() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_spec(dir.path(), &small_spec("c", 0.2, 20.0, 1));
    let a = dir.path().join("a.elgn");
    ok(&["synth", "--config", p(&cfg), "--out", p(&a)]);
    let out = dir.path().join("eval");
    let o = ok(&["eval", "--pred", p(&a), "--ref", p(&a), "--out", p(&out)]);
    let m: Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["mde_mean"], 0.0);
    assert_eq!(m["rg_err_mean"], 0.0);
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, m);
    assert!(out.join("timeseries.csv").is_file());
    assert!(out.join("dispersion.csv").is_file());
}

#[test]
fn train_rollout_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.elgn");
    let spec = CaseSpec {
        n_frames: 10,
        duration: 3.0,
        ..small_spec("train", 0.1, 30.0, 2)
    };
    ok(&["synth", "--config", p(&write_spec(dir.path(), &spec)), "--out", p(&data)]);
    let cfg = json!({
        "variant": "M0",
        "d_h": 8,
        "depth": 1,
        "stages": { "epochs": [0, 1, 1, 1] },
        "data": { "cases": [data] },
    });
    let cfg_path = dir.path().join("train.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let run_dir = dir.path().join("run");
    ok(&["train", "--config", p(&cfg_path), "--seed", "4", "--out", p(&run_dir)]);
    let log = std::fs::read_to_string(run_dir.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
    let saved: Value = serde_json::from_slice(&std::fs::read(run_dir.join("train_config.json")).unwrap()).unwrap();
    assert_eq!(saved["seed"], 4);

    let pred = dir.path().join("pred.elgn");
    ok(&["rollout", "--checkpoint", p(&run_dir.join("checkpoint.bin")), "--case", p(&data), "--out", p(&pred)]);
    let pa = RolloutArchive::load(&pred).unwrap();
    assert_eq!(pa.frames.len(), 10 - aerograph_core::consts::HISTORY);
    let out = dir.path().join("eval");
    ok(&["eval", "--pred", p(&pred), "--ref", p(&data), "--out", p(&out)]);
    let m: Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert!(m["mde_mean"].as_f64().unwrap().is_finite());
}

#[test]
fn analyze_sweep_has_constant_peclet() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for s in sweep_specs(0) {
        let spec = CaseSpec {
            n_tracked: 20,
            n_frames: 8,
            duration: 3.0,
            ..s
        };
        let cfg = write_spec(dir.path(), &spec);
        let f = dir.path().join(format!("{}.elgn", spec.name));
        ok(&["synth", "--config", p(&cfg), "--out", p(&f)]);
        files.push(f);
    }
    let out = dir.path().join("analysis");
    let mut args = vec!["analyze", "--grid", "--out", p(&out)];
    args.extend(files.iter().map(|f| p(f)));
    ok(&args);
    for name in ["nondim.csv", "dispersion.csv", "ach_fit.csv", "nondim_grid.csv"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let csv = std::fs::read_to_string(out.join("nondim.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "pe_t").unwrap();
    let pe: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    assert_eq!(pe.len(), 20);
    for v in &pe {
        assert!((v / 49_690.0 - 1.0).abs() < 0.005, "Pe_T {v}");
    }
    let grid = std::fs::read_to_string(out.join("nondim_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 21);
}

#[test]
fn serve_binary_answers_health() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = bin()
        .args(["serve", "--port", "0"])
        .env("AEROGRAPH_DATA_DIR", dir.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let info: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(info["data_dir"], p(dir.path()));
    let addr = info["listening"].as_str().unwrap().to_string();
    let mut s = std::net::TcpStream::connect(&addr).unwrap();
    write!(s, "GET /health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.ends_with(r#"{"status":"ok"}"#), "{resp}");
}
