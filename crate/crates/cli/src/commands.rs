//! One function per verb. Each reads what it needs from the run directory,
//! falling back to regenerating deterministic inputs, and writes its
//! artifacts there.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use worldkit_core::bev::rasterize_bev;
use worldkit_core::flow::{flow_samples, read_flwh, train_flow_head, write_flwh, FlowHead, FlowRefiner, FlowTrainOptions};
use worldkit_core::geometry::{read_gset, write_gset};
use worldkit_core::gradcheck::random_case;
use worldkit_core::metrics::{collision_rate, forecast_metrics, l2_error, semantic_iou, IouReport};
use worldkit_core::occupancy::{
    forecast_rollout, read_occ3, splat_to_occupancy, write_occ3, write_topdown_ppm, ForecastOptions, IdentityRefiner, Refiner,
};
use worldkit_core::optim::{evaluate_fit, fit_views, init_gaussians, scene_views, FitOptions};
use worldkit_core::plan::{average_l2, constant_velocity_scenes, plan_samples, read_plnw, train_planner, write_plnw, Planner};
use worldkit_core::splat::{render_views, write_depth_pgm, write_semantic_ppm};
use worldkit_core::synth::{
    generate_scene, next_from_current, oracle_gaussians, scene_occupancy_gt, CLASS_COUNT, CLASS_GROUND,
};
use worldkit_core::{GaussianSet, OccupancyGrid, SceneSpec};

use crate::config::{RefinerKind, RunConfig};
use crate::CliError;

pub const SCENE_FILE: &str = "scene.json";
pub const GAUSSIANS_FILE: &str = "gaussians.gset";
pub const FLOW_FILE: &str = "flow_head.flwh";
pub const PLANNER_FILE: &str = "planner.plnw";

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_csv<R: Serialize>(dir: &Path, name: &str, rows: impl IntoIterator<Item = R>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(dir.join(name)).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_with<T>(path: &Path, f: impl FnOnce(&mut BufReader<File>) -> worldkit_core::Result<T>) -> Result<T, CliError> {
    let mut r = BufReader::new(File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?);
    f(&mut r).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// The scene written by `synth`, or a fresh one from the configured seed.
pub fn load_scene(cfg: &RunConfig, dir: &Path) -> Result<SceneSpec, CliError> {
    let path = dir.join(SCENE_FILE);
    if path.exists() {
        return Ok(SceneSpec::from_json(&fs::read_to_string(&path)?)?);
    }
    Ok(generate_scene(cfg.seed, &cfg.scene)?)
}

fn gt_name(t: usize) -> String {
    format!("gt_t{t}.occ3")
}

fn forecast_name(k: usize) -> String {
    format!("forecast_t{k}.occ3")
}

fn write_grid(dir: &Path, name: &str, grid: &OccupancyGrid) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    write_occ3(&mut w, grid)?;
    w.flush()?;
    Ok(())
}

pub fn synth(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let scene = generate_scene(cfg.seed, &cfg.scene)?;
    fs::write(dir.join(SCENE_FILE), scene.to_json()? + "\n")?;
    for t in 0..scene.frame_count() {
        write_grid(dir, &gt_name(t), &scene_occupancy_gt(&scene, t, &cfg.occupancy)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FitRow {
    iter: usize,
    total: f64,
    depth: f64,
    pseudo_depth: f64,
    semantic: f64,
}

pub fn fit(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let scene = load_scene(cfg, dir)?;
    let f = &cfg.fit;
    let init = init_gaussians(&scene.cameras, f.gaussians, CLASS_COUNT, 1, f.init_near, f.init_far, cfg.seed)?;
    let views = scene_views(&scene, &f.frames, f.sparse_rate)?;
    let opts = FitOptions { iters: f.iters, adam: f.adam, weights: cfg.loss.recon, validity_warmup: f.validity_warmup };
    let (set, trace) = fit_views(&init, &views, &opts)?;
    let mut w = create(dir, GAUSSIANS_FILE)?;
    write_gset(&mut w, &set)?;
    w.flush()?;
    write_csv(
        dir,
        "fit_trace.csv",
        trace.iter().enumerate().map(|(iter, l)| FitRow {
            iter,
            total: l.total,
            depth: l.depth,
            pseudo_depth: l.pseudo_depth,
            semantic: l.semantic,
        }),
    )?;
    let (before, after) = (evaluate_fit(&init, &views), evaluate_fit(&set, &views));
    write_json(
        dir,
        "fit_report.json",
        &json!({
            "initial_depth_l1": before.depth_l1,
            "final_depth_l1": after.depth_l1,
            "depth_ratio": after.depth_l1 / before.depth_l1,
            "initial_accuracy": before.accuracy,
            "final_accuracy": after.accuracy,
        }),
    )
}

/// Returns whether every case passed.
pub fn gradcheck(cfg: &RunConfig, dir: &Path) -> Result<bool, CliError> {
    let g = &cfg.gradcheck;
    let mut cases = Vec::with_capacity(g.scenes);
    let mut worst: f64 = 0.0;
    for i in 0..g.scenes {
        let seed = cfg.seed.wrapping_add(i as u64);
        let report = random_case(seed, g.gaussians, g.classes, g.image)?.check(&cfg.loss.recon, g.step)?;
        worst = worst.max(report.max_rel_error);
        cases.push(json!({
            "seed": seed,
            "max_rel_error": report.max_rel_error,
            "checked": report.checked,
            "skipped": report.skipped,
        }));
    }
    let passed = worst < g.tolerance;
    write_json(dir, "gradcheck.json", &json!({ "max_rel_error": worst, "tolerance": g.tolerance, "passed": passed, "cases": cases }))?;
    Ok(passed)
}

#[derive(Serialize)]
struct FlowRow {
    step: usize,
    render_loss: f64,
    bev_loss: f64,
}

pub fn flow_pretrain(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let scene = load_scene(cfg, dir)?;
    let samples = flow_samples(&scene, &cfg.flow.frames, &cfg.perception, &cfg.bev, cfg.flow.sparse_rate)?;
    let dim = samples.first().map_or(worldkit_core::synth::FEATURE_DIM, |s| s.set.feature_dim());
    let head = FlowHead::random(dim, cfg.flow.hidden, cfg.seed);
    let opts = FlowTrainOptions { steps: cfg.flow.steps, adam: cfg.flow.adam, weights: cfg.loss };
    let (head, trace) = train_flow_head(&head, &samples, &opts)?;
    let mut w = create(dir, FLOW_FILE)?;
    write_flwh(&mut w, &head)?;
    w.flush()?;
    write_csv(
        dir,
        "flow_trace.csv",
        trace.iter().enumerate().map(|(step, l)| FlowRow { step, render_loss: l.render.total, bev_loss: l.bev }),
    )
}

fn plan_data(cfg: &RunConfig) -> Result<Vec<worldkit_core::plan::PlanSample>, CliError> {
    let p = &cfg.plan;
    let scenes = constant_velocity_scenes(p.scenes, cfg.seed, p.model.horizon, p.min_speed, p.max_speed)?;
    Ok(plan_samples(&scenes, 0, p.model.horizon, &cfg.perception, &cfg.bev)?)
}

#[derive(Serialize)]
struct PlanRow {
    step: usize,
    total: f64,
    reg: f64,
    bev: f64,
}

#[derive(Serialize)]
struct WaypointRow {
    t: f64,
    x: f64,
    y: f64,
}

pub fn plan_train(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let samples = plan_data(cfg)?;
    let init = Planner::new(cfg.plan.model, samples[0].bev.channels(), cfg.seed)?;
    let (planner, trace) = train_planner(&init, &samples, &cfg.plan.train)?;
    let mut w = create(dir, PLANNER_FILE)?;
    write_plnw(&mut w, &planner)?;
    w.flush()?;
    write_csv(
        dir,
        "plan_trace.csv",
        trace.iter().enumerate().map(|(step, l)| PlanRow { step, total: l.total, reg: l.reg, bev: l.bev }),
    )?;
    let traj = planner.forward(&samples[0].bev)?.trajectory;
    let dt = worldkit_core::synth::FRAME_DT;
    write_csv(
        dir,
        "trajectory.csv",
        traj.waypoints.iter().enumerate().map(|(i, w)| WaypointRow { t: (i + 1) as f64 * dt, x: w[0], y: w[1] }),
    )?;
    write_json(
        dir,
        "plan_report.json",
        &json!({ "initial_l2": average_l2(&init, &samples)?, "final_l2": average_l2(&planner, &samples)? }),
    )
}

fn perceived(cfg: &RunConfig, scene: &SceneSpec, t: usize) -> Result<GaussianSet, CliError> {
    Ok(oracle_gaussians(scene, t, &cfg.perception)?.set)
}

pub fn forecast(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let scene = load_scene(cfg, dir)?;
    let set = perceived(cfg, &scene, 0)?;
    let poses = (0..cfg.forecast.steps).map(|t| next_from_current(&scene, t)).collect::<worldkit_core::Result<Vec<_>>>()?;
    let refiner: Box<dyn Refiner> = match cfg.forecast.refiner {
        RefinerKind::Identity => Box::new(IdentityRefiner),
        RefinerKind::Flow => {
            let path = dir.join(FLOW_FILE);
            if !path.exists() {
                return Err(CliError::Validation(format!("forecast.refiner = flow needs {FLOW_FILE}; run flow-pretrain first")));
            }
            Box::new(FlowRefiner(read_with(&path, |r| read_flwh(r))?))
        }
    };
    let opts = ForecastOptions { tau: cfg.forecast.tau, completion: cfg.forecast.completion, seed: cfg.seed };
    let current = splat_to_occupancy(&set, &cfg.occupancy, cfg.forecast.tau)?;
    write_grid(dir, &forecast_name(0), &current)?;
    let grids = forecast_rollout(&set, &poses, &cfg.occupancy, &opts, refiner.as_ref())?;
    for (k, g) in grids.iter().enumerate() {
        write_grid(dir, &forecast_name(k + 1), g)?;
        let mut w = create(dir, &format!("forecast_t{}.ppm", k + 1))?;
        write_topdown_ppm(&mut w, g)?;
        w.flush()?;
    }
    Ok(())
}

fn iou_json(r: &IouReport) -> serde_json::Value {
    json!({ "miou": r.miou, "iou": r.iou, "per_class": r.per_class })
}

/// Compares explicit grids, or every `forecast_t{k}.occ3` in the run
/// directory against ground truth. Also scores a trained planner if one is
/// present.
pub fn eval(cfg: &RunConfig, dir: &Path, pred: Option<&Path>, gt: Option<&Path>) -> Result<(), CliError> {
    let report = match (pred, gt) {
        (Some(p), Some(g)) => {
            let r = semantic_iou(&read_with(p, |r| read_occ3(r))?, &read_with(g, |r| read_occ3(r))?)?;
            json!({ "pair": iou_json(&r) })
        }
        (None, None) => eval_run(cfg, dir)?,
        _ => return Err(CliError::Validation("eval takes both --pred and --gt, or neither".into())),
    };
    if let Some(r) = report.pointer("/pair/miou") {
        println!("mIoU = {:.3}", r.as_f64().unwrap_or(f64::NAN));
    }
    write_json(dir, "eval.json", &report)
}

fn eval_run(cfg: &RunConfig, dir: &Path) -> Result<serde_json::Value, CliError> {
    let scene = load_scene(cfg, dir)?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut k = 0;
    while dir.join(forecast_name(k)).exists() {
        preds.push(read_with(&dir.join(forecast_name(k)), |r| read_occ3(r))?);
        let gt_path = dir.join(gt_name(k));
        gts.push(if gt_path.exists() { read_with(&gt_path, |r| read_occ3(r))? } else { scene_occupancy_gt(&scene, k, &cfg.occupancy)? });
        k += 1;
    }
    let mut out = serde_json::Map::new();
    if preds.len() > 1 {
        let current = semantic_iou(&preds[0], &gts[0])?;
        let future = forecast_metrics(&preds[1..], &gts[1..])?;
        out.insert(
            "forecast".into(),
            json!({
                "t0": iou_json(&current),
                "miou": future.miou,
                "iou": future.iou,
                "steps": future.steps.iter().map(iou_json).collect::<Vec<_>>(),
            }),
        );
    }
    let planner_path = dir.join(PLANNER_FILE);
    if planner_path.exists() {
        let planner = read_with(&planner_path, |r| read_plnw(r))?;
        let p = &cfg.plan;
        let scenes = constant_velocity_scenes(p.scenes, cfg.seed, p.model.horizon, p.min_speed, p.max_speed)?;
        let samples = plan_samples(&scenes, 0, p.model.horizon, &cfg.perception, &cfg.bev)?;
        let mut l2 = 0.0;
        let mut plans = Vec::new();
        for s in &samples {
            let traj = planner.forward(&s.bev)?.trajectory;
            l2 += l2_error(&traj, &s.gt)?;
            plans.push((traj, p.footprint));
        }
        let grids = scenes.iter().map(|s| scene_occupancy_gt(s, 0, &cfg.occupancy)).collect::<worldkit_core::Result<Vec<_>>>()?;
        let rate = collision_rate(&plans, &grids, Some(CLASS_GROUND as u8))?;
        out.insert("plan".into(), json!({ "l2": l2 / samples.len() as f64, "collision_rate": rate }));
    }
    if out.is_empty() {
        return Err(CliError::Validation("nothing to evaluate: run forecast or plan-train first, or pass --pred/--gt".into()));
    }
    Ok(serde_json::Value::Object(out))
}

/// Depth and semantic images of the fitted Gaussians (or the perceived set
/// when nothing was fitted) from every camera at frame 0.
pub fn render(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let scene = load_scene(cfg, dir)?;
    let fitted = dir.join(GAUSSIANS_FILE);
    let set = if fitted.exists() { read_with(&fitted, |r| read_gset(r))? } else { perceived(cfg, &scene, 0)? };
    let mut written = Vec::new();
    for i in 0..scene.cameras.len() {
        let (depth, sem) = render_views(&set, scene.camera(i)?);
        for (name, is_depth) in [(format!("render_cam{i}_depth.pgm"), true), (format!("render_cam{i}_semantic.ppm"), false)] {
            let mut w = create(dir, &name)?;
            if is_depth {
                write_depth_pgm(&mut w, &depth)?;
            } else {
                write_semantic_ppm(&mut w, &sem)?;
            }
            w.flush()?;
            written.push(dir.join(name));
        }
    }
    let bev = rasterize_bev(&perceived(cfg, &scene, 0)?, &cfg.bev)?;
    let mut w = create(dir, "bev_t0.bevg")?;
    worldkit_core::bev::write_bevg(&mut w, &bev)?;
    w.flush()?;
    Ok(written)
}
