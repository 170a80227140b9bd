//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use worldkit_cli::config::RunConfig;
use worldkit_core::bev::{bev_l2_loss, rasterize_bev};
use worldkit_core::flow::{
    flow_samples, flow_stage2_loss_with_flow, predict_future_latent, propagate_gaussians, FlowField, FlowHead, Stage2Weights,
};
use worldkit_core::gradcheck::random_case;
use worldkit_core::metrics::{collides, collision_rate, l2_error, obstacle_cells, semantic_iou, EgoFootprint};
use worldkit_core::occupancy::{forecast_rollout, splat_to_occupancy, ForecastOptions, IdentityRefiner, DEFAULT_TAU};
use worldkit_core::optim::{evaluate_fit, fit_views, init_gaussians, scene_views, FitOptions};
use worldkit_core::plan::{average_l2, constant_velocity_scenes, plan_loss, plan_samples, train_planner, PlanTrainOptions};
use worldkit_core::splat::render_views;
use worldkit_core::synth::{
    canonical_scene, generate_scene, moving_box_scene, next_from_current, oracle_gaussians, scene_occupancy_gt, PerceptionOptions,
    SceneKnobs, CLASS_COUNT, FEATURE_DIM,
};
use worldkit_core::{BevSpec, LossWeights, OccSpec, OccupancyGrid, Planner, PlannerConfig, Pose, Trajectory};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let (worst, checked) = single_threaded(|| {
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for seed in 0..20 {
            let r = random_case(seed, 32, CLASS_COUNT, 32).unwrap().check(&LossWeights::default(), 1e-4).unwrap();
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
        }
        (worst, checked)
    });
    let t = start.elapsed();
    check(
        worst < 1e-3 && t < Duration::from_secs(60),
        format!("20 scenes, {checked} parameters, max rel error {worst:.2e}, {:.1} s on one thread", t.as_secs_f64()),
    )
}

fn compositing_conservation() -> Outcome {
    let mut violations = 0;
    let mut pixels = 0;
    for seed in 0..1000u64 {
        let n = 1 + (seed as usize * 7) % 48;
        let case = random_case(10_000 + seed, n, CLASS_COUNT, 16 + (seed as usize % 3) * 8).unwrap();
        let (_, sem) = render_views(&case.set, &case.camera);
        pixels += sem.weight.len();
        violations += sem.weight.iter().filter(|w| !(0.0..=1.0).contains(*w)).count();
    }
    check(violations == 0, format!("1000 renders, {pixels} pixels, {violations} violations"))
}

fn fitting_regression() -> Outcome {
    let start = Instant::now();
    let scene = canonical_scene();
    let views = scene_views(&scene, &[0], 0.05).unwrap();
    let init = init_gaussians(&scene.cameras, 64, CLASS_COUNT, 1, 1.0, 10.0, 0).unwrap();
    let (set, _) = fit_views(&init, &views, &FitOptions { iters: 500, ..Default::default() }).unwrap();
    let (before, after) = (evaluate_fit(&init, &views), evaluate_fit(&set, &views));
    let ratio = after.depth_l1 / before.depth_l1;
    let t = start.elapsed();
    check(
        ratio <= 0.2 && after.accuracy >= 0.9 && t < Duration::from_secs(300),
        format!(
            "depth L1 {:.3} -> {:.3} (ratio {ratio:.3}), accuracy {:.1}%, {:.1} s",
            before.depth_l1,
            after.depth_l1,
            100.0 * after.accuracy,
            t.as_secs_f64()
        ),
    )
}

fn flow_identity() -> Outcome {
    let spec = BevSpec::default();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let scene = generate_scene(seed, &SceneKnobs::default()).unwrap();
        let set = oracle_gaussians(&scene, 0, &PerceptionOptions::default()).unwrap().set;
        let current = rasterize_bev(&set, &spec).unwrap();
        let moved = propagate_gaussians(&set, &FlowField::zeros(set.len()), &Pose::identity()).unwrap();
        let via_head = predict_future_latent(&set, &FlowHead::zeros(FEATURE_DIM, 8), &Pose::identity(), &spec).unwrap();
        for next in [rasterize_bev(&moved, &spec).unwrap(), via_head] {
            for (a, b) in current.features.iter().chain(&current.weights).zip(next.features.iter().chain(&next.weights)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(worst <= 1e-6, format!("5 scenes, max |ΔBEV| {worst:.1e}"))
}

fn ego_alignment() -> Outcome {
    let spec = OccSpec::default();
    let p = PerceptionOptions::default();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let knobs = SceneKnobs { moving_fraction: 0.0, frames: 4, ..Default::default() };
        let scene = generate_scene(seed, &knobs).unwrap();
        let set = oracle_gaussians(&scene, 0, &p).unwrap().set;
        let current = splat_to_occupancy(&set, &spec, DEFAULT_TAU).unwrap();
        let iou0 = semantic_iou(&current, &scene_occupancy_gt(&scene, 0, &spec).unwrap()).unwrap().iou;
        let poses: Vec<Pose> = (0..3).map(|t| next_from_current(&scene, t).unwrap()).collect();
        let grids = forecast_rollout(&set, &poses, &spec, &ForecastOptions { seed, ..Default::default() }, &IdentityRefiner).unwrap();
        for (k, g) in grids.iter().enumerate() {
            let iou = semantic_iou(g, &scene_occupancy_gt(&scene, k + 1, &spec).unwrap()).unwrap().iou;
            worst = worst.max(100.0 * (iou - iou0).abs());
        }
    }
    check(worst <= 2.0, format!("5 static scenes, t+1..t+3, max |IoU - IoU(t=0)| {worst:.2} points"))
}

fn flow_benefit() -> Outcome {
    let scene = moving_box_scene();
    let p = PerceptionOptions::default();
    let samples = flow_samples(&scene, &[0], &p, &BevSpec::default(), 0.0).unwrap();
    let oracle = FlowField(oracle_gaussians(&scene, 0, &p).unwrap().flow);
    let w = Stage2Weights::default();
    let with = flow_stage2_loss_with_flow(&samples[0], &oracle, &w).unwrap();
    let zero = flow_stage2_loss_with_flow(&samples[0], &FlowField::zeros(oracle.len()), &w).unwrap();
    check(with.total < zero.total, format!("stage-2 loss oracle flow {:.5} < zero flow {:.5}", with.total, zero.total))
}

fn brute_iou(pred: &OccupancyGrid, gt: &OccupancyGrid) -> (f64, f64) {
    let s = &gt.spec;
    let count = |hit: &dyn Fn(u8, u8) -> (bool, bool)| {
        let (mut i, mut u) = (0u32, 0u32);
        for ix in 0..s.nx {
            for iy in 0..s.ny {
                for iz in 0..s.nz {
                    let (p, g) = hit(pred.get(ix, iy, iz), gt.get(ix, iy, iz));
                    i += (p && g) as u32;
                    u += (p || g) as u32;
                }
            }
        }
        (i, u)
    };
    let mut per_class = Vec::new();
    for c in 1..s.class_count as u8 {
        let (i, u) = count(&|p, g| (p == c, g == c));
        if u > 0 {
            per_class.push(i as f64 / u as f64);
        }
    }
    let (i, u) = count(&|p, g| (p != 0, g != 0));
    let miou = if per_class.is_empty() { 1.0 } else { per_class.iter().sum::<f64>() / per_class.len() as f64 };
    (miou, if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Samples the ego box at a 0.05 m pitch, edges included.
fn sampled_collision(traj: &Trajectory, ego: &EgoFootprint, grid: &OccupancyGrid) -> bool {
    let cells = obstacle_cells(grid, None);
    let (nl, nw) = ((ego.length / 0.05).round() as usize, (ego.width / 0.05).round() as usize);
    ego.poses(traj).into_iter().any(|(x, y, yaw)| {
        let (s, c) = yaw.sin_cos();
        (0..=nl).any(|i| {
            (0..=nw).any(|j| {
                let a = ego.length * (i as f64 / nl as f64 - 0.5);
                let b = ego.width * (j as f64 / nw as f64 - 0.5);
                let (px, py) = (x + c * a - s * b, y + s * a + c * b);
                cells.iter().any(|k| k[0] <= px && px <= k[1] && k[2] <= py && py <= k[3])
            })
        })
    })
}

fn metric_oracles() -> Outcome {
    let s = OccSpec { x_min: 0.0, x_max: 8.0, y_min: 0.0, y_max: 8.0, z_min: 0.0, z_max: 4.0, nx: 8, ny: 8, nz: 4, class_count: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..100 {
        let mut random = || OccupancyGrid { spec: s, labels: (0..256).map(|_| rng.random_range(0..4)).collect() };
        let (p, g) = (random(), random());
        let r = semantic_iou(&p, &g).unwrap();
        mismatches += ((r.miou, r.iou) != brute_iou(&p, &g)) as usize;
    }

    let t = |v: &[[f64; 2]]| Trajectory::new(v.to_vec());
    let a = t(&[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
    let l2 = [
        (l2_error(&a, &a).unwrap(), 0.0),
        (l2_error(&a, &t(&[[1.0, 0.0], [2.0, 0.0], [3.0, 1.0]])).unwrap(), 1.0 / 3.0),
        (l2_error(&t(&[[1.3, 0.4], [2.3, 0.4], [3.3, 0.4]]), &a).unwrap(), 0.5),
    ];
    let l2_ok = l2.iter().all(|(got, want)| (got - want).abs() < 1e-12);

    let ego = EgoFootprint::default();
    let mut grid = OccupancyGrid::empty(OccSpec::default());
    let free = collision_rate(&[(a.clone(), ego)], &[grid.clone()], None).unwrap();
    let c = grid.spec.voxel_center(24, 5, 3);
    grid.set(24, 5, 3, 2);
    let through = t(&[[0.0, 0.0], [c.x, c.y], [c.x + 1.0, c.y]]);
    let hit = collision_rate(&[(through, ego)], &[grid], None).unwrap();
    // Obstacle column y ∈ [1, 2]; a 2 m wide ego on y = 0 touches its edge.
    let mut graze = OccupancyGrid::empty(OccSpec::default());
    graze.set(19, 17, 2, 2);
    let wide = EgoFootprint { length: 4.0, width: 2.0 };
    let narrow = EgoFootprint { length: 4.0, width: 1.9 };
    let line = t(&(1..=6).map(|i| [i as f64, 0.0]).collect::<Vec<_>>());
    let graze_ok = collides(&line, &wide, &graze, None)
        && sampled_collision(&line, &wide, &graze)
        && !collides(&line, &narrow, &graze, None)
        && !sampled_collision(&line, &narrow, &graze);

    check(
        mismatches == 0 && l2_ok && free == 0.0 && hit == 100.0 && graze_ok,
        format!(
            "IoU mismatches {mismatches}/100, L2 fixtures {}, collision free {free}% / hit {hit}% / grazing {}",
            if l2_ok { "ok" } else { "wrong" },
            if graze_ok { "ok" } else { "wrong" }
        ),
    )
}

fn planner_trainability() -> Outcome {
    let config = PlannerConfig::default();
    let scenes = constant_velocity_scenes(8, 0, config.horizon, 1.0, 8.0).unwrap();
    let samples = plan_samples(&scenes, 0, config.horizon, &PerceptionOptions::default(), &BevSpec::default()).unwrap();
    let init = Planner::new(config, samples[0].bev.channels(), 0).unwrap();
    let (trained, _) = train_planner(&init, &samples, &PlanTrainOptions { steps: 2000, ..Default::default() }).unwrap();
    let (l0, l1) = (average_l2(&init, &samples).unwrap(), average_l2(&trained, &samples).unwrap());
    let mut exact = true;
    for s in &samples {
        for planner in [&init, &trained] {
            let out = planner.forward(&s.bev).unwrap();
            let loss = plan_loss(&out.trajectory, &s.gt, &out.future_bev, &s.target_bev).unwrap();
            let reg = out.trajectory.waypoints.iter().zip(&s.gt.waypoints).map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs()).sum::<f64>()
                / (2 * s.gt.len()) as f64;
            let bev = bev_l2_loss(&out.future_bev, &s.target_bev).unwrap();
            exact &= loss.total == loss.reg + loss.bev && loss.reg == reg && loss.bev == bev;
        }
    }
    check(
        l1 < 0.1 * l0 && exact,
        format!("average L2 {l0:.3} m -> {l1:.3} m (ratio {:.3}), L = L_reg + L_bev exact: {exact}", l1 / l0),
    )
}

fn loss_constants() -> Outcome {
    let w = LossWeights::default().as_array();
    let run = RunConfig::default().loss.recon.as_array();
    let empty = worldkit_cli::parse_config(None, &[]).map_err(|e| e.to_string())?.loss.recon.as_array();
    check(w == [1.0, 0.05, 1.0] && run == w && empty == w, format!("ω = {w:?}"))
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

fn pipeline(cwd: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let sets = [
        "seed=3",
        "scene.frames=4",
        "fit.iters=40",
        "fit.validity_warmup=30",
        "flow.steps=5",
        "flow.frames=[0]",
        "forecast.steps=3",
        "forecast.refiner=flow",
    ];
    for verb in ["synth", "fit", "flow-pretrain", "forecast", "eval"] {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_worldkit"));
        cmd.current_dir(cwd).arg(verb).arg("--deterministic").env_remove(worldkit_cli::THREADS_ENV);
        for s in sets {
            cmd.args(["--set", s]);
        }
        let out = cmd.output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{verb} failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    let root = cwd.join("runs");
    Ok(walk(&root).into_iter().map(|p| (p.strip_prefix(&root).unwrap().display().to_string(), std::fs::read(&p).unwrap())).collect())
}

fn reproducibility() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline(a.path())?, pipeline(b.path())?);
    let differing: Vec<&String> = ra.keys().filter(|k| ra.get(*k) != rb.get(*k)).collect();
    check(
        ra.len() > 10 && ra.keys().eq(rb.keys()) && differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", ra.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("compositing conservation", compositing_conservation),
        ("stage-1 fitting regression", fitting_regression),
        ("flow-world identity", flow_identity),
        ("ego-alignment correctness", ego_alignment),
        ("flow benefit ordering", flow_benefit),
        ("metric oracle equivalence", metric_oracles),
        ("planner trainability", planner_trainability),
        ("loss constants", loss_constants),
        ("end-to-end reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(d) => println!("criterion {:>2} {name}: PASS ({d})", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({d})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
