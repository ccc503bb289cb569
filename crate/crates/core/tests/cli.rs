use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vista::atlas::validate_bundle;

fn vista(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vista"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn vista")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let corpus = dir.join("corpus.jsonl");
    if !corpus.exists() {
        let o = vista(&["synth", "--out", p(&corpus), "--per-cluster", "40"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let cfg = dir.join("cfg.json");
    fs::write(
        &cfg,
        format!(
            r#"{{
  "corpus": "corpus.jsonl",
  "dim": 32,
  "latent_id": 31,
  "out_dir": "out",
  "selection": {{"count": 200}},
  "layout": {{"epochs": 100}},
  "cartography": {{"grid_w": 128}},
  "panorama": {{"width_px": 320, "height_px": 180, "steps": 4{extra}}}
}}"#
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn run_writes_a_valid_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let o = vista(&["run", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = validate_bundle(&dir.path().join("out")).unwrap();
    assert_eq!(m.n, 200);
    assert!(!dir.path().join("out/.vista.lock").exists());
}

#[test]
fn staged_chain_matches_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let c = p(&cfg);
    assert_eq!(code(&vista(&["run", "--config", c])), 0);
    let d = |s: &str| dir.path().join(s);
    let corpus = d("corpus.jsonl");
    let steps: [(&str, &Path, std::path::PathBuf); 5] = [
        ("select", &corpus, d("s1")),
        ("layout", &d("s1"), d("s2")),
        ("map", &d("s2"), d("s3")),
        ("render", &d("s3"), d("s4")),
        ("export", &d("s4"), d("bundle")),
    ];
    for (name, input, out) in &steps {
        let o = vista(&[name, "--config", c, "--in", p(input), "--out", p(out)]);
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(d("out/atlas.json")).unwrap();
    let b = fs::read(d("bundle/atlas.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_override_changes_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let c = p(&cfg);
    let corpus = dir.path().join("corpus.jsonl");
    let s = dir.path().join("s");
    assert_eq!(
        code(&vista(&["select", "--config", c, "--in", p(&corpus), "--out", p(&s)])),
        0
    );
    let emb = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        let o = vista(&["layout", "--config", c, "--seed", seed, "--in", p(&s), "--out", p(&out)]);
        assert_eq!(code(&o), 0);
        fs::read_to_string(out.join("embedding.csv")).unwrap()
    };
    assert_eq!(emb("3", "a"), emb("3", "b"));
    assert_ne!(emb("3", "a"), emb("4", "c"));
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&vista(&["run", "--config", p(&missing)])), 1);
    let cfg = small_config(dir.path(), "");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("\"latent_id\": 31", "\"latent_id\": 40");
    fs::write(&cfg, text).unwrap();
    assert_eq!(code(&vista(&["run", "--config", p(&cfg)])), 1);
    assert_eq!(code(&vista(&["run", "--bogus"])), 1);
    assert_eq!(code(&vista(&["--help"])), 0);
}

#[test]
fn unreachable_backend_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let backend = format!(
        r#", "backend": {{"kind": "remote", "url": "http://127.0.0.1:{port}", "retries": 0, "timeout_secs": 5}}"#
    );
    let cfg = small_config(dir.path(), &backend);
    let o = vista(&["run", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stage render failed"), "{err}");
    // earlier stages keep their artifacts, the bundle is not written
    let out = dir.path().join("out");
    assert!(out.join("intermediate/render_plan.json").is_file());
    assert!(!out.join("atlas.json").exists());
    assert!(!out.join(".vista.lock").exists());
}

#[test]
fn busy_output_directory_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    fs::create_dir_all(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/.vista.lock"), "1").unwrap();
    assert_eq!(code(&vista(&["run", "--config", p(&cfg)])), 2);
}

#[test]
fn gain_matches_ids_across_files() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<(String, f64, f64)> = (0..30)
        .map(|i| (format!("p{i}"), (i * 7 % 30) as f64, (i * i % 11) as f64))
        .collect();
    let write = |name: &str, order: &mut dyn Iterator<Item = &(String, f64, f64)>| {
        let mut s = String::from("id,x,y\n");
        for (id, x, y) in order {
            s.push_str(&format!("{id},{x},{y}\n"));
        }
        let path = dir.path().join(name);
        fs::write(&path, s).unwrap();
        path
    };
    let a = write("a.csv", &mut rows.iter());
    let b = write("b.csv", &mut rows.iter().rev());
    let o = vista(&["gain", "--a", p(&a), "--b", p(&b), "--k", "0.1,0.2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "k_fraction,k,mknn,gain");
    let gain: f64 = lines[1].split(',').nth(3).unwrap().parse().unwrap();
    assert!((gain - (1.0 - 3.0 / 29.0)).abs() < 1e-12, "{out}");

    let short = write("c.csv", &mut rows.iter().take(20));
    assert_eq!(code(&vista(&["gain", "--a", p(&a), "--b", p(&short)])), 1);
}
