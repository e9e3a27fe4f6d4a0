//! The five subcommands. Each takes a resolved [`ConfigTable`], writes its
//! outputs plus the resolved-config snapshot, and reports on stdout.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use routegan_core::data::{
    build_dataset, episode_from_json, label_counts, read_jsonl, write_jsonl, Label, Manifest, SceneBank, SceneEntry,
};
use routegan_core::nn::{sha256_hex, Checkpoint};
use routegan_core::planners::DataPlanner;
use routegan_core::routegan::{self, MetricsRow, RouteGanConfig, RouteGanModel, SceneSet, StyleCode, TrainData};
use routegan_core::scene::{Scene, SceneKind};
use routegan_core::sim::{
    adversary_rollout, evaluate_table, joint_generation, latent_sweep, sample_episode, spearman,
    style_reconstruction, style_with_q1, EvalConfig, EvalEpisode, RolloutResult, SWEEP_VALUES,
};
use serde::Serialize;

use crate::config::{write_snapshot, ConfigTable, Settings};
use crate::error::{CliError, Result};
use crate::svg::{episode_body, episode_svg, grid_svg, Panel};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const EPISODES_NAME: &str = "episodes.jsonl";
pub const CHECKPOINT_NAME: &str = "checkpoint.json";
pub const METRICS_NAME: &str = "metrics.csv";
pub const REPORT_CSV_NAME: &str = "report.csv";
pub const REPORT_JSON_NAME: &str = "report.json";
pub const STYLE_NAME: &str = "style.json";
pub const GRID_NAME: &str = "grid.svg";
pub const ROLLOUTS_NAME: &str = "rollouts.jsonl";
pub const CELLS_NAME: &str = "cells.csv";

/// q1 of the adversary in periodic training samples.
const SAMPLE_Q1: f64 = 2.0;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(CliError::io(path))
}

fn to_json_pretty(v: &impl Serialize) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Core(e.into()))
}

pub fn load_model(path: &Path) -> Result<RouteGanModel> {
    let ck = Checkpoint::<RouteGanConfig>::load(path).map_err(CliError::at(path))?;
    Ok(RouteGanModel::from_checkpoint(&ck)?)
}

/// Scenes and episodes of a `gen-data` directory.
pub struct Dataset {
    pub manifest: Manifest,
    pub bank: SceneBank,
    pub episodes: Vec<routegan_core::data::InteractionEpisode>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_NAME);
    let manifest = Manifest::load(&mpath).map_err(CliError::at(&mpath))?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| {
            let pgm = dir.join(&e.pgm);
            Scene::read(&pgm, &dir.join(&e.meta)).map_err(CliError::at(&pgm))
        })
        .collect::<Result<Vec<_>>>()?;
    let bank = SceneBank::new(scenes)?;
    let epath = dir.join(&manifest.episodes);
    let episodes = read_jsonl(&epath, &manifest.config.rule).map_err(CliError::at(&epath))?;
    Ok(Dataset {
        manifest,
        bank,
        episodes,
    })
}

fn label_name(label: Label) -> &'static str {
    match label {
        Label::Safe => "safe",
        Label::Critical => "critical",
    }
}

pub fn gen_data(table: &ConfigTable) -> Result<()> {
    let s = table.settings()?;
    let out = PathBuf::from(&s.out);
    let scene_dir = out.join("scenes");
    create_dir(&scene_dir)?;
    let bank = SceneBank::default();
    let d = &s.data.dataset;
    let episodes = build_dataset(&bank, d, s.data.safe, s.data.critical, s.seed)?;
    let mut entries = Vec::new();
    for scene in bank.scenes() {
        let entry = SceneEntry {
            id: scene.id().to_string(),
            pgm: format!("scenes/{}.pgm", scene.id()),
            meta: format!("scenes/{}.json", scene.id()),
        };
        let pgm = out.join(&entry.pgm);
        scene.write_pgm(&pgm).map_err(CliError::at(&pgm))?;
        let meta = out.join(&entry.meta);
        scene.write_sidecar(&meta).map_err(CliError::at(&meta))?;
        entries.push(entry);
    }
    let epath = out.join(EPISODES_NAME);
    write_jsonl(&epath, &episodes).map_err(CliError::at(&epath))?;
    let counts = label_counts(&episodes);
    let manifest = Manifest {
        episodes: EPISODES_NAME.to_string(),
        scenes: entries,
        counts: counts.clone(),
        seed: s.seed,
        stride: d.stride,
        dt: d.scenario.dt,
        collision_radius: d.rule.collision_radius,
        critical_margin: d.rule.critical_margin,
        config: *d,
    };
    let mpath = out.join(MANIFEST_NAME);
    manifest.save(&mpath).map_err(CliError::at(&mpath))?;
    write_snapshot(table, "gen-data", &out)?;
    println!("wrote {} episodes to {}", episodes.len(), out.display());
    for (label, n) in counts {
        println!("{} {n}", label_name(label));
    }
    Ok(())
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = MetricsRow::csv_header();
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    write_file(path, text)
}

fn sample_svg(model: &RouteGanModel, bank: &SceneBank, ep: &EvalEpisode, s: &Settings, title: &str) -> Result<String> {
    let q = style_with_q1(SAMPLE_Q1, model.config.style_dims)?;
    let r = adversary_rollout(model, bank, ep, &q, &mut DataPlanner, &s.sim)?;
    let scene = &bank.scenes()[ep.scene];
    Ok(episode_svg(scene, &r.x1, &r.x2, model.config.stride, s.render.size, title))
}

pub fn train(table: &ConfigTable) -> Result<()> {
    let s = table.settings()?;
    let data_dir = PathBuf::from(&s.data.dir);
    let ds = load_dataset(&data_dir)?;
    let cfg = RouteGanConfig {
        seed: s.seed,
        stride: ds.manifest.stride,
        dt: ds.manifest.dt,
        ..s.routegan.clone()
    };
    let scenes = SceneSet::new(&ds.bank);
    let data = TrainData::new(&ds.episodes, &scenes, cfg.stride, cfg.keypoints)?;
    let mut model = RouteGanModel::new(cfg.clone())?;
    let out = PathBuf::from(&s.out);
    create_dir(&out)?;
    write_snapshot(table, "train", &out)?;
    println!(
        "training {} steps (alpha {}, lambda1 {}, lambda2 {}) on {} episodes",
        cfg.steps,
        cfg.alpha,
        cfg.lambda1,
        cfg.lambda2,
        ds.episodes.len()
    );

    let every = s.train.sample_every;
    let sample = if every > 0 {
        create_dir(&out.join("samples"))?;
        Some(sample_episode(&ds.bank, &ds.manifest.config.scenario, cfg.noise_dims, s.eval_seed(), 0)?)
    } else {
        None
    };
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut sample_err = None;
    let outcome = routegan::train(&mut model, &data, &scenes, |m, row| {
        rows.push(*row);
        let done = row.step + 1;
        if let Some(ep) = &sample {
            if done % every == 0 && sample_err.is_none() {
                let path = out.join("samples").join(format!("step_{done:06}.svg"));
                let written = sample_svg(m, &ds.bank, ep, &s, &format!("step {done} q1 {SAMPLE_Q1:+}"))
                    .and_then(|svg| write_file(&path, svg));
                sample_err = written.err();
            }
        }
    });

    write_metrics(&out.join(METRICS_NAME), &rows)?;
    let ck = model.checkpoint(rows.len() as u64)?;
    let bytes = ck.to_bytes()?;
    write_file(&out.join(CHECKPOINT_NAME), &bytes)?;
    println!("checkpoint {} after {} steps, sha256 {}", out.join(CHECKPOINT_NAME).display(), rows.len(), sha256_hex(&bytes));
    if let Err(e) = outcome {
        eprintln!("kept the checkpoint of the last finite step");
        return Err(e.into());
    }
    if let Some(e) = sample_err {
        return Err(e);
    }
    if let Some(last) = rows.last() {
        println!("{}\n{}", MetricsRow::csv_header(), last.csv_row());
    }
    Ok(())
}

#[derive(Serialize)]
struct StyleReport {
    n: usize,
    seed: u64,
    spearman: Option<f64>,
    /// (input q1, reconstructed q1) per held-out rollout.
    pairs: Vec<(f64, f64)>,
}

pub fn eval(table: &ConfigTable) -> Result<()> {
    let s = table.settings()?;
    let model = load_model(Path::new(&s.checkpoint))?;
    let kinds = s.planner_kinds()?;
    let bank = SceneBank::default();
    let cfg = EvalConfig {
        q_values: s.eval.q_values.clone(),
        n_episodes: s.eval.episodes,
        seed: s.eval_seed(),
        workers: s.workers.max(1),
        scenario: s.data.dataset.scenario,
        sim: s.sim,
        planners: s.planner.settings,
    };
    let report = evaluate_table(&model, &bank, &kinds, &cfg)?;
    let out = PathBuf::from(&s.out);
    create_dir(&out)?;
    let csv = report.to_csv();
    write_file(&out.join(REPORT_CSV_NAME), &csv)?;
    write_file(&out.join(REPORT_JSON_NAME), report.to_json()?)?;
    print!("{csv}");
    if s.eval.reconstruction > 0 {
        let pairs = style_reconstruction(&model, &bank, &cfg.scenario, s.eval.reconstruction, cfg.seed)?;
        let (q, qhat): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
        let style = StyleReport {
            n: pairs.len(),
            seed: cfg.seed,
            spearman: spearman(&q, &qhat),
            pairs,
        };
        write_file(&out.join(STYLE_NAME), to_json_pretty(&style)?)?;
        match style.spearman {
            Some(r) => println!("style reconstruction spearman {r:.4} over {} rollouts", style.n),
            None => println!("style reconstruction spearman undefined"),
        }
    }
    write_snapshot(table, "eval", &out)?;
    Ok(())
}

/// One sweep cell before it is written out.
struct Cell {
    name: String,
    qi: f64,
    qj: f64,
    result: RolloutResult,
}

pub fn sweep(table: &ConfigTable) -> Result<()> {
    let s = table.settings()?;
    let model = load_model(Path::new(&s.checkpoint))?;
    let bank = SceneBank::default();
    let scenario = &s.data.dataset.scenario;
    let dims = model.config.noise_dims;
    let ep = sample_episode(&bank, scenario, dims, s.eval_seed(), s.sweep.episode)?;
    let scene = &bank.scenes()[ep.scene];
    let mut cells = Vec::with_capacity(25);
    let header;
    if s.sweep.joint {
        // V2's noise comes from the next held-out episode's independent stream.
        let z2 = sample_episode(&bank, scenario, dims, s.eval_seed(), s.sweep.episode + 1)?.z;
        let c = model.config.style_dims;
        for &a in &SWEEP_VALUES {
            for &b in &SWEEP_VALUES {
                let (q1, q2) = (style_with_q1(a, c)?, style_with_q1(b, c)?);
                let result = joint_generation(&model, scene, &ep.spec, &q1, &q2, &ep.z, &z2, &s.sim)?;
                cells.push(Cell {
                    name: format!("joint_v1q1{a:+}_v2q1{b:+}"),
                    qi: a,
                    qj: b,
                    result,
                });
            }
        }
        header = "name,v1_q1,v2_q1,collided,min_distance";
    } else {
        let (i, j) = s.sweep_dims()?;
        let base = StyleCode::new(vec![0.0; model.config.style_dims])?;
        let grid = latent_sweep(&model, scene, &ep.spec, (i, j), &base, &ep.z, &s.sim)?;
        for c in grid.cells {
            cells.push(Cell {
                name: format!("cell_q{i}{:+}_q{j}{:+}", c.qi, c.qj),
                qi: c.qi,
                qj: c.qj,
                result: c.result,
            });
        }
        header = "name,qi,qj,collided,min_distance";
    }

    let out = PathBuf::from(&s.out);
    create_dir(&out)?;
    let size = s.render.size;
    let stride = model.config.stride;
    let mut jsonl = Vec::new();
    let mut summary = format!("{header}\n");
    let mut panels = Vec::with_capacity(cells.len());
    for c in &cells {
        let r = &c.result;
        write_file(
            &out.join(format!("{}.svg", c.name)),
            episode_svg(scene, &r.x1, &r.x2, stride, size, &c.name),
        )?;
        let episode = r.to_episode(scene.id(), s.sim.dt, &s.data.dataset.rule)?;
        writeln!(jsonl, "{}", routegan_core::data::episode_to_json(&episode)?).map_err(CliError::io(&out))?;
        summary.push_str(&format!("{},{},{},{},{:.6}\n", c.name, c.qi, c.qj, r.collided, r.min_distance));
        panels.push(Panel {
            label: c.name.clone(),
            body: episode_body(scene, &r.x1, &r.x2, stride, size),
        });
    }
    write_file(&out.join(ROLLOUTS_NAME), jsonl)?;
    write_file(&out.join(CELLS_NAME), &summary)?;
    let title = format!("sweep on {} episode {}", scene.id(), s.sweep.episode);
    write_file(&out.join(GRID_NAME), grid_svg(&panels, SWEEP_VALUES.len(), size, &title))?;
    write_snapshot(table, "sweep", &out)?;
    print!("{summary}");
    Ok(())
}

/// Scene `id` from a `scenes/` directory beside `input`, else the built-in
/// scene of that kind.
fn scene_for(input: &Path, id: &str) -> Result<Scene> {
    let dir = input.parent().unwrap_or(Path::new(".")).join("scenes");
    let (pgm, meta) = (dir.join(format!("{id}.pgm")), dir.join(format!("{id}.json")));
    if pgm.exists() && meta.exists() {
        return Scene::read(&pgm, &meta).map_err(CliError::at(&pgm));
    }
    Ok(Scene::default_for(id.parse::<SceneKind>()?))
}

pub fn render(table: &ConfigTable) -> Result<()> {
    let s = table.settings()?;
    if s.render.input.is_empty() {
        return Err(CliError::usage("render needs an episode file (--input)"));
    }
    let input = PathBuf::from(&s.render.input);
    let n = s.render.line;
    if n == 0 {
        return Err(CliError::usage("record numbers start at 1"));
    }
    let text = std::fs::read_to_string(&input).map_err(CliError::io(&input))?;
    let at = |msg: String| CliError::usage(format!("{}: line {n}: {msg}", input.display()));
    let line = text.lines().nth(n - 1).ok_or_else(|| at("no such record".into()))?;
    let ep = episode_from_json(line, &s.data.dataset.rule).map_err(|e| at(e.to_string()))?;
    let scene = scene_for(&input, &ep.scene_id)?;
    let title = format!("{} line {n} {}", ep.scene_id, label_name(ep.label));
    let svg = episode_svg(
        &scene,
        &ep.x1.positions,
        &ep.x2.positions,
        s.data.dataset.stride,
        s.render.size,
        &title,
    );
    let out = PathBuf::from(&s.out);
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    write_file(&out, svg)?;
    write_snapshot(table, "render", dir)?;
    println!("wrote {}", out.display());
    Ok(())
}
