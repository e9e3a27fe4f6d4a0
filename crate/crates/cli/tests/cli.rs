use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

/// Keeps training fast in tests that only need some checkpoint.
const TINY: [&str; 10] = [
    "--set",
    "routegan.hidden_dim=8",
    "--set",
    "routegan.mlp_width=8",
    "--set",
    "routegan.embed_dim=4",
    "--set",
    "routegan.conv_channels=2,4",
    "--set",
    "routegan.batch=4",
];

fn routegan(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_routegan"))
        .args(args)
        .env("ROUTEGAN_OUT", root)
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// A small dataset and a briefly trained tiny checkpoint shared by tests.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    data: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        ok(&routegan(&root, &["gen-data", "--safe", "30", "--critical", "30", "--seed", "3"]));
        let mut args = vec!["train", "--steps", "3", "--seed", "3"];
        args.extend(TINY);
        ok(&routegan(&root, &args));
        Fixture {
            data: root.join("gen-data"),
            checkpoint: root.join("train").join("checkpoint.json"),
            root,
            _dir: dir,
        }
    })
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_writes_counts_and_manifest() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&routegan(dir.path(), &["gen-data", "--safe", "500", "--critical", "500", "--seed", "7"]));
    assert!(stdout.contains("safe 500") && stdout.contains("critical 500"), "{stdout}");
    let out = dir.path().join("gen-data");
    assert_eq!(read(out.join("episodes.jsonl")).lines().count(), 1000);
    let manifest: serde_json::Value = serde_json::from_str(&read(out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["counts"]["SAFE"], 500);
    assert_eq!(manifest["counts"]["CRITICAL"], 500);
    assert_eq!(manifest["seed"], 7);
    for scene in ["straight", "intersection", "roundabout"] {
        assert!(out.join("scenes").join(format!("{scene}.pgm")).exists());
        assert!(out.join("scenes").join(format!("{scene}.json")).exists());
    }
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let dir = TempDir::new().unwrap();
    for out in ["a", "b"] {
        ok(&routegan(dir.path(), &["gen-data", "--safe", "40", "--critical", "40", "--seed", "11", "--out", out]));
    }
    let (a, b) = (files_under(&dir.path().join("a")), files_under(&dir.path().join("b")));
    assert_eq!(a.len(), b.len());
    for (fa, fb) in a.iter().zip(&b) {
        if fa.ends_with("resolved_config.txt") {
            continue;
        }
        assert_eq!(std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap(), "{}", fa.display());
    }
}

#[test]
fn training_without_critical_episodes_fails_fast() {
    let dir = TempDir::new().unwrap();
    ok(&routegan(dir.path(), &["gen-data", "--safe", "20", "--critical", "0"]));
    let out = routegan(dir.path(), &["train", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("both labels"), "{}", stderr(&out));
}

#[test]
fn train_twice_gives_identical_checkpoints() {
    let f = fixture();
    let data = f.data.to_string_lossy().into_owned();
    let mut hashes = Vec::new();
    for out in ["t1", "t2"] {
        let dir = f.root.join(out);
        let dir_s = dir.to_string_lossy().into_owned();
        let mut args = vec!["train", "--steps", "4", "--seed", "0", "--data", &data, "--out", &dir_s];
        args.extend(TINY);
        let stdout = ok(&routegan(&f.root, &args));
        let hash = stdout.split("sha256 ").nth(1).unwrap()[..64].to_string();
        assert_eq!(read(dir.join("metrics.csv")).lines().count(), 1 + 4);
        hashes.push((hash, std::fs::read(dir.join("checkpoint.json")).unwrap()));
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn train_echoes_loss_weights_and_snapshot_reproduces_the_run() {
    let f = fixture();
    let data = f.data.to_string_lossy().into_owned();
    let dir = f.root.join("echo");
    let dir_s = dir.to_string_lossy().into_owned();
    let mut args = vec![
        "train", "--steps", "2", "--alpha", "0.5", "--lambda1", "1", "--lambda2", "10", "--data", &data, "--out", &dir_s,
    ];
    args.extend(TINY);
    ok(&routegan(&f.root, &args));
    let snap = read(dir.join("resolved_config.txt"));
    for line in ["routegan.alpha = 0.5", "routegan.lambda1 = 1.0", "routegan.lambda2 = 10.0", "routegan.steps = 2"] {
        assert!(snap.lines().any(|l| l == line), "missing {line:?}");
    }
    let first = std::fs::read(dir.join("checkpoint.json")).unwrap();
    let snap_path = dir.join("resolved_config.txt").to_string_lossy().into_owned();
    ok(&routegan(&f.root, &["train", "--config", &snap_path]));
    assert_eq!(std::fs::read(dir.join("checkpoint.json")).unwrap(), first);
}

#[test]
fn non_finite_training_exits_3_and_keeps_a_checkpoint() {
    let f = fixture();
    let data = f.data.to_string_lossy().into_owned();
    let dir = f.root.join("nan");
    let dir_s = dir.to_string_lossy().into_owned();
    let mut args = vec!["train", "--steps", "5", "--data", &data, "--out", &dir_s, "--set", "routegan.lr=1e300"];
    args.extend(TINY);
    let out = routegan(&f.root, &args);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"));
    assert!(dir.join("checkpoint.json").exists());
    let rows = read(dir.join("metrics.csv")).lines().count() - 1;
    let ck: serde_json::Value = serde_json::from_str(&read(dir.join("checkpoint.json"))).unwrap();
    assert_eq!(ck["step"], rows as u64);
    assert!(rows < 5);
}

#[test]
fn training_samples_are_rendered_when_requested() {
    let f = fixture();
    let data = f.data.to_string_lossy().into_owned();
    let dir = f.root.join("samples");
    let dir_s = dir.to_string_lossy().into_owned();
    let mut args = vec!["train", "--steps", "4", "--sample-every", "2", "--data", &data, "--out", &dir_s];
    args.extend(TINY);
    ok(&routegan(&f.root, &args));
    let svgs = files_under(&dir.join("samples"));
    let names: Vec<_> = svgs.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["step_000002.svg", "step_000004.svg"]);
}

#[test]
fn eval_report_shape_and_values() {
    let f = fixture();
    let ck = f.checkpoint.to_string_lossy().into_owned();
    let dir = f.root.join("eval50");
    let dir_s = dir.to_string_lossy().into_owned();
    ok(&routegan(&f.root, &["eval", "--checkpoint", &ck, "--episodes", "50", "--out", &dir_s, "--set", "eval.reconstruction=10"]));
    let csv = read(dir.join("report.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(header.iter().filter(|h| h.starts_with("rate@")).count(), 5);
    let planners: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(planners, ["Data", "IDM", "Astar"]);
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        for q in 0..5 {
            let n: usize = cols[2 + 3 * q].parse().unwrap();
            let invalid: usize = cols[3 + 3 * q].parse().unwrap();
            assert_eq!(n + invalid, 50);
            if n > 0 {
                let rate: f64 = cols[1 + 3 * q].parse().unwrap();
                assert!((0.0..=1.0).contains(&rate));
            }
        }
    }
    let report: serde_json::Value = serde_json::from_str(&read(dir.join("report.json"))).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);
    let style: serde_json::Value = serde_json::from_str(&read(dir.join("style.json"))).unwrap();
    assert_eq!(style["pairs"].as_array().unwrap().len(), 10);
}

#[test]
fn eval_report_does_not_depend_on_workers() {
    let f = fixture();
    let ck = f.checkpoint.to_string_lossy().into_owned();
    let mut reports = Vec::new();
    for w in ["1", "3"] {
        let dir = f.root.join(format!("eval_w{w}"));
        let dir_s = dir.to_string_lossy().into_owned();
        ok(&routegan(&f.root, &["eval", "--checkpoint", &ck, "--episodes", "12", "--workers", w, "--out", &dir_s]));
        reports.push((read(dir.join("report.csv")), read(dir.join("report.json"))));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn missing_checkpoint_exits_2() {
    let f = fixture();
    for cmd in ["eval", "sweep"] {
        let out = routegan(&f.root, &[cmd, "--checkpoint", "does/not/exist.json"]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert!(stderr(&out).contains("does/not/exist.json"));
    }
}

#[test]
fn sweep_writes_25_cells_and_a_grid_deterministically() {
    let f = fixture();
    let ck = f.checkpoint.to_string_lossy().into_owned();
    let mut contents = Vec::new();
    for out in ["sw_a", "sw_b"] {
        let dir = f.root.join(out);
        let dir_s = dir.to_string_lossy().into_owned();
        ok(&routegan(&f.root, &["sweep", "--checkpoint", &ck, "--out", &dir_s, "--seed", "4"]));
        let svgs: Vec<PathBuf> = files_under(&dir).into_iter().filter(|p| p.extension().is_some_and(|e| e == "svg")).collect();
        let cells = svgs.iter().filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("cell_")).count();
        assert_eq!(cells, 25);
        assert_eq!(svgs.len(), 26);
        assert_eq!(read(dir.join("rollouts.jsonl")).lines().count(), 25);
        contents.push(svgs.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(contents[0], contents[1]);
}

#[test]
fn joint_sweep_names_carry_both_styles() {
    let f = fixture();
    let ck = f.checkpoint.to_string_lossy().into_owned();
    let dir = f.root.join("joint");
    let dir_s = dir.to_string_lossy().into_owned();
    ok(&routegan(&f.root, &["sweep", "--joint", "--checkpoint", &ck, "--out", &dir_s]));
    for (a, b) in [("-2", "+2"), ("+0", "+0"), ("+2", "-1")] {
        assert!(dir.join(format!("joint_v1q1{a}_v2q1{b}.svg")).exists(), "{a} {b}");
    }
    assert!(dir.join("grid.svg").exists());
}

#[test]
fn render_draws_full_trajectories() {
    let f = fixture();
    let input = f.data.join("episodes.jsonl").to_string_lossy().into_owned();
    let svg_path = f.root.join("r").join("ep.svg");
    let svg_s = svg_path.to_string_lossy().into_owned();
    ok(&routegan(&f.root, &["render", "--input", &input, "--line", "2", "--out", &svg_s]));
    let svg = read(&svg_path);
    assert!(svg.starts_with("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\""));
    assert!(svg.trim_end().ends_with("</svg>"));
    let polylines: Vec<&str> = svg.lines().filter(|l| l.starts_with("<polyline")).collect();
    assert_eq!(polylines.len(), 2);
    for p in &polylines {
        let pts = p.split("points=\"").nth(1).unwrap();
        assert_eq!(pts[..pts.find('"').unwrap()].split(' ').count(), 101);
    }
    let radius = |class: &str| -> Vec<f64> {
        svg.lines()
            .filter(|l| l.contains(&format!("class=\"{class}\"")))
            .map(|l| {
                let r = l.split(" r=\"").nth(1).unwrap();
                r[..r.find('"').unwrap()].parse().unwrap()
            })
            .collect()
    };
    let start_min = radius("start").into_iter().fold(f64::INFINITY, f64::min);
    assert!(radius("keypoint").into_iter().all(|r| r < start_min));
    assert!(svg_path.parent().unwrap().join("resolved_config.txt").exists());
}

#[test]
fn render_reports_the_line_of_a_malformed_record() {
    let f = fixture();
    let bad = f.root.join("bad.jsonl");
    let good = read(f.data.join("episodes.jsonl")).lines().next().unwrap().to_string();
    std::fs::write(&bad, format!("{good}\n{{\"scene_id\": 3}}\n")).unwrap();
    let bad_s = bad.to_string_lossy().into_owned();
    let out = routegan(&f.root, &["render", "--input", &bad_s, "--line", "2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
    let out = routegan(&f.root, &["render", "--input", &bad_s, "--line", "9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 9"));
}

#[test]
fn usage_errors_exit_2() {
    let f = fixture();
    for args in [
        vec!["frobnicate"],
        vec!["eval", "--set", "no.such.key=1"],
        vec!["eval", "--set", "seed=minus"],
        vec!["gen-data", "--safe", "many"],
    ] {
        assert_eq!(routegan(&f.root, &args).status.code(), Some(2), "{args:?}");
    }
    assert_eq!(routegan(&f.root, &["--help"]).status.code(), Some(0));
}

#[test]
fn unwritable_output_exits_2() {
    let f = fixture();
    let blocker = f.root.join("blocker");
    std::fs::write(&blocker, "file, not a directory").unwrap();
    let out_s = blocker.join("sub").to_string_lossy().into_owned();
    let out = routegan(&f.root, &["gen-data", "--safe", "3", "--critical", "3", "--out", &out_s]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("blocker"));
}
