use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_gradient, FD_TOLERANCE};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mat(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

fn grid_spec(n: usize, bins: usize) -> BevSpec {
    BevSpec { x_min: -4.0, x_max: 4.0, y_min: -4.0, y_max: 4.0, z_min: 0.0, z_max: 2.0, nx: n, ny: n, z_bins: bins }
}

fn random_grid(n: usize, bins: usize, d: usize, seed: u64) -> BevGrid {
    let mut r = rng(seed);
    let mut g = BevGrid::zeros(grid_spec(n, bins), d);
    g.features.iter_mut().for_each(|f| *f = r.random_range(-1.0..1.0));
    g.weights.iter_mut().for_each(|w| *w = r.random_range(0.0..2.0));
    g
}

fn randomize_norms(b: &mut AttentionBlock, r: &mut ChaCha8Rng) {
    let d = b.dim();
    b.norm1_gain = random_mat(1, d, r);
    b.norm1_bias = random_mat(1, d, r);
    b.norm2_gain = random_mat(1, d, r);
    b.norm2_bias = random_mat(1, d, r);
    b.ff1.bias = random_mat(1, b.ff1.bias.ncols(), r);
    b.ff2.bias = random_mat(1, d, r);
}

// Independent oracles, written row by row.

fn ln(row: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    row.iter().map(|x| (x - mu) / (var + LN_EPS).sqrt()).collect()
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vecmat(v: &[f64], w: &Mat) -> Vec<f64> {
    (0..w.ncols()).map(|c| (0..w.nrows()).map(|k| v[k] * w[(k, c)]).sum()).collect()
}

fn affine_row(v: &[f64], a: &Affine) -> Vec<f64> {
    vecmat(v, &a.weight).iter().enumerate().map(|(c, x)| x + a.bias[(0, c)]).collect()
}

fn norm_row(v: &[f64], g: &Mat, b: &Mat) -> Vec<f64> {
    ln(v).iter().enumerate().map(|(i, x)| x * g[(0, i)] + b[(0, i)]).collect()
}

fn oracle_block(b: &AttentionBlock, x: &Mat, c: &Mat) -> (Mat, Mat) {
    let d = b.dim() as f64;
    let xn: Vec<_> = rows(x).iter().map(|r| norm_row(r, &b.norm1_gain, &b.norm1_bias)).collect();
    let cn: Vec<_> = rows(c).iter().map(|r| norm_row(r, &b.norm1_gain, &b.norm1_bias)).collect();
    let k: Vec<_> = cn.iter().map(|r| vecmat(r, &b.wk)).collect();
    let v: Vec<_> = cn.iter().map(|r| vecmat(r, &b.wv)).collect();
    let mut weights = Mat::zeros(x.nrows(), c.nrows());
    let mut out = x.clone();
    for (i, xr) in xn.iter().enumerate() {
        let q = vecmat(xr, &b.wq);
        let s: Vec<f64> = k.iter().map(|kr| q.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut h = vec![0.0; b.dim()];
        for (j, ej) in e.iter().enumerate() {
            weights[(i, j)] = ej / z;
            for (hh, vv) in h.iter_mut().zip(&v[j]) {
                *hh += ej / z * vv;
            }
        }
        let h = vecmat(&h, &b.wo);
        let x1: Vec<f64> = (0..b.dim()).map(|c| x[(i, c)] + h[c]).collect();
        let f = affine_row(&norm_row(&x1, &b.norm2_gain, &b.norm2_bias), &b.ff1);
        let f: Vec<f64> = f.iter().map(|v| v.max(0.0)).collect();
        let f = affine_row(&f, &b.ff2);
        for c in 0..b.dim() {
            out[(i, c)] = x1[c] + f[c];
        }
    }
    (weights, out)
}

fn assert_mat_eq(a: &Mat, b: &Mat, eps: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.iter().zip(b.iter()) {
        assert_abs_diff_eq!(x, y, epsilon = eps);
    }
}

#[test]
fn scene_queries_of_constant_grid_are_identical() {
    let mut g = BevGrid::zeros(grid_spec(8, 2), 3);
    g.features.iter_mut().enumerate().for_each(|(i, f)| *f = (i % 6) as f64 * 0.25);
    let proj = Affine::random(6, 5, &mut rng(1));
    let q = extract_scene_queries(&g, 4, &proj).unwrap();
    assert_eq!(q.len(), 16);
    for r in 1..16 {
        assert_eq!(q.queries.row(r), q.queries.row(0));
    }
    assert_eq!(q.patch_origins[5], (2, 2));
    assert_eq!(q.patch_size, (2, 2));
}

#[test]
fn one_nonzero_patch_changes_one_query() {
    let mut g = BevGrid::zeros(grid_spec(8, 1), 2);
    let i = g.cell_index(5, 2) * 2;
    g.features[i] = 1.0;
    let mut proj = Affine::random(2, 4, &mut rng(2));
    proj.bias = random_mat(1, 4, &mut rng(3));
    let q = extract_scene_queries(&g, 4, &proj).unwrap();
    let changed: Vec<usize> = (0..16).filter(|&r| q.queries.row(r) != proj.bias.row(0)).collect();
    assert_eq!(changed, vec![4 + 2]);
}

#[test]
fn scene_queries_match_pooling_oracle() {
    let g = random_grid(12, 3, 4, 4);
    let mut r = rng(5);
    let mut proj = Affine::random(12, 7, &mut r);
    proj.bias = random_mat(1, 7, &mut r);
    let q = extract_scene_queries(&g, 3, &proj).unwrap();
    for py in 0..3 {
        for px in 0..3 {
            let mut mean = vec![0.0; 12];
            for iy in py * 4..py * 4 + 4 {
                for ix in px * 4..px * 4 + 4 {
                    let base = (iy * 12 + ix) * 12;
                    for c in 0..12 {
                        mean[c] += g.features[base + c] / 16.0;
                    }
                }
            }
            let want = affine_row(&mean, &proj);
            for c in 0..7 {
                assert_abs_diff_eq!(q.queries[(py * 3 + px, c)], want[c], epsilon = 1e-6);
            }
        }
    }
    assert!(extract_scene_queries(&g, 5, &proj).is_err());
}

#[test]
fn single_context_attention_closed_form() {
    let mut r = rng(6);
    let mut b = AttentionBlock::random(4, 6, &mut r);
    randomize_norms(&mut b, &mut r);
    let x = random_mat(1, 4, &mut r);
    let c = random_mat(1, 4, &mut r);
    // One key: the weight is 1 and the attention output is the value path.
    let cn = norm_row(&rows(&c)[0], &b.norm1_gain, &b.norm1_bias);
    let h = vecmat(&vecmat(&cn, &b.wv), &b.wo);
    let x1: Vec<f64> = (0..4).map(|i| x[(0, i)] + h[i]).collect();
    let f = affine_row(&norm_row(&x1, &b.norm2_gain, &b.norm2_bias), &b.ff1);
    let f = affine_row(&f.iter().map(|v| v.max(0.0)).collect::<Vec<_>>(), &b.ff2);
    let want = Mat::from_fn(1, 4, |_, i| x1[i] + f[i]);
    assert_eq!(attention_weights(&b, &x, &c).unwrap()[(0, 0)], 1.0);
    assert_mat_eq(&attention_block(&b, &x, &c).unwrap(), &want, 1e-12);
    let doubled = Mat::from_fn(2, 4, |_, i| c[(0, i)]);
    assert_mat_eq(&attention_block(&b, &x, &doubled).unwrap(), &want, 1e-12);
}

#[test]
fn attention_matches_matrix_oracle() {
    let mut r = rng(7);
    let mut b = AttentionBlock::random(8, 16, &mut r);
    randomize_norms(&mut b, &mut r);
    let x = random_mat(5, 8, &mut r);
    let c = random_mat(7, 8, &mut r);
    let (w, y) = oracle_block(&b, &x, &c);
    assert_mat_eq(&attention_block(&b, &x, &c).unwrap(), &y, 1e-5);
    let weights = attention_weights(&b, &x, &c).unwrap();
    assert_mat_eq(&weights, &w, 1e-6);
    for row in weights.row_iter() {
        assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
    }
    assert!(attention_block(&b, &random_mat(2, 6, &mut r), &c).is_err());
    assert!(attention_block(&b, &x, &random_mat(2, 6, &mut r)).is_err());
}

#[test]
fn attention_permutation_properties() {
    let mut r = rng(8);
    let mut b = AttentionBlock::random(6, 12, &mut r);
    randomize_norms(&mut b, &mut r);
    let x = random_mat(4, 6, &mut r);
    let c = random_mat(5, 6, &mut r);
    let perm = [3, 0, 4, 1, 2];
    let cp = Mat::from_fn(5, 6, |i, j| c[(perm[i], j)]);
    assert_mat_eq(&attention_block(&b, &x, &c).unwrap(), &attention_block(&b, &x, &cp).unwrap(), 1e-6);

    let p4 = [2, 0, 3, 1];
    let xp4 = Mat::from_fn(4, 6, |i, j| x[(p4[i], j)]);
    let y = attention_block(&b, &x, &x).unwrap();
    let yp = attention_block(&b, &xp4, &xp4).unwrap();
    assert_mat_eq(&yp, &Mat::from_fn(4, 6, |i, j| y[(p4[i], j)]), 1e-6);
}

fn toy_scene(n: usize, d: usize, seed: u64) -> QuerySet {
    QuerySet {
        queries: random_mat(n * n, d, &mut rng(seed)),
        patch_origins: (0..n * n).map(|i| (2 * (i % n), 2 * (i / n))).collect(),
        patch_size: (2, 2),
    }
}

#[test]
fn trajectory_head_examples() {
    let mut r = rng(9);
    let scene = toy_scene(2, 8, 10);
    let blocks: Vec<_> = (0..2).map(|_| AttentionBlock::random(8, 16, &mut r)).collect();
    let wp = random_mat(6, 8, &mut r);
    let zero = Affine::zeros(8, 2);
    let t = predict_trajectory(&wp, &scene, &blocks, &zero).unwrap();
    assert_eq!(t.waypoints, vec![[0.0, 0.0]; 6]);
    let mut bias = Affine::zeros(8, 2);
    bias.bias[(0, 0)] = 1.0;
    let t = predict_trajectory(&wp, &scene, &blocks, &bias).unwrap();
    assert_eq!(t.waypoints, vec![[1.0, 0.0]; 6]);

    let mut head = Affine::random(8, 2, &mut r);
    head.bias = random_mat(1, 2, &mut r);
    let mut w = wp.clone();
    for b in &blocks {
        w = oracle_block(b, &w, &scene.queries).1;
    }
    let t = predict_trajectory(&wp, &scene, &blocks, &head).unwrap();
    for (i, row) in rows(&w).iter().enumerate() {
        let want = affine_row(row, &head);
        assert_abs_diff_eq!(t.waypoints[i][0], want[0], epsilon = 1e-5);
        assert_abs_diff_eq!(t.waypoints[i][1], want[1], epsilon = 1e-5);
    }
}

fn random_traj(n: usize, seed: u64) -> Trajectory {
    let mut r = rng(seed);
    Trajectory::new((0..n).map(|_| [r.random_range(0.0..10.0), r.random_range(-2.0..2.0)]).collect())
}

#[test]
fn mln_examples() {
    let scene = toy_scene(2, 6, 11);
    let traj = random_traj(3, 12);
    let zero = Mln { gamma: Affine::zeros(6, 6), beta: Affine::zeros(6, 6) };
    let plain = mln_condition(&scene, &traj, &zero).unwrap();
    for (i, row) in rows(&scene.queries).iter().enumerate() {
        let want = ln(row);
        let got: Vec<f64> = plain.queries.row(i).iter().copied().collect();
        let mean = got.iter().sum::<f64>() / 6.0;
        let var = got.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
        for c in 0..6 {
            assert_abs_diff_eq!(got[c], want[c], epsilon = 1e-12);
        }
    }
    assert_eq!(plain.patch_origins, scene.patch_origins);

    let mut r = rng(13);
    let mln = Mln { gamma: Affine::random(6, 6, &mut r), beta: Affine::random(6, 6, &mut r) };
    let constant = QuerySet { queries: Mat::from_element(4, 6, 0.5), ..scene.clone() };
    let out = mln_condition(&constant, &traj, &mln).unwrap();
    let flat: Vec<f64> = traj.waypoints.iter().flatten().copied().collect();
    let beta = affine_row(&flat, &mln.beta);
    for row in rows(&out.queries) {
        for c in 0..6 {
            assert_eq!(row[c], beta[c]);
        }
    }
    let a = mln_condition(&scene, &traj, &mln).unwrap();
    let b = mln_condition(&scene, &random_traj(3, 14), &mln).unwrap();
    assert_ne!(a.queries, b.queries);
    assert!(mln_condition(&scene, &random_traj(4, 1), &mln).is_err());
}

#[test]
fn next_queries_compose() {
    let mut r = rng(15);
    let scene = toy_scene(2, 8, 16);
    let traj = random_traj(3, 17);
    let mln = Mln { gamma: Affine::random(6, 8, &mut r), beta: Affine::random(6, 8, &mut r) };
    let blocks: Vec<_> = (0..2).map(|_| AttentionBlock::random(8, 16, &mut r)).collect();
    let got = predict_next_queries(&scene, &traj, &mln, &blocks).unwrap();

    let mut manual = mln_condition(&scene, &traj, &mln).unwrap().queries;
    for b in &blocks {
        manual = attention_block(b, &manual, &manual).unwrap();
    }
    assert_eq!(got.queries, manual);
    assert_eq!(got.patch_origins, scene.patch_origins);

    let zero = Mln { gamma: Affine::zeros(6, 8), beta: Affine::zeros(6, 8) };
    assert_eq!(predict_next_queries(&scene, &traj, &zero, &[]).unwrap(), mln_condition(&scene, &traj, &zero).unwrap());

    let mut oracle: Mat = Mat::from_fn(4, 8, |_, _| 0.0);
    let flat: Vec<f64> = traj.waypoints.iter().flatten().copied().collect();
    let (g, b) = (affine_row(&flat, &mln.gamma), affine_row(&flat, &mln.beta));
    for (i, row) in rows(&scene.queries).iter().enumerate() {
        let n = ln(row);
        for c in 0..8 {
            oracle[(i, c)] = n[c] * (1.0 + g[c]) + b[c];
        }
    }
    for blk in &blocks {
        oracle = oracle_block(blk, &oracle, &oracle).1;
    }
    assert_mat_eq(&got.queries, &oracle, 1e-5);
}

#[test]
fn fusion_examples() {
    let grid = random_grid(4, 2, 3, 18);
    let next = toy_scene(2, 5, 19);
    let zero = Affine::zeros(5, 6);
    assert_eq!(fuse_future_bev(&next, &grid, &zero).unwrap(), grid);

    let mut r = rng(20);
    let mut unproj = Affine::random(5, 6, &mut r);
    unproj.bias = random_mat(1, 6, &mut r);
    // Only query 3 maps to a nonzero residual.
    let mut single = next.clone();
    single.queries.fill(0.0);
    single.queries.row_mut(3).copy_from(&next.queries.row(3));
    let mut no_bias = unproj.clone();
    no_bias.bias.fill(0.0);
    let out = fuse_future_bev(&single, &grid, &no_bias).unwrap();
    let changed: Vec<usize> = (0..16).filter(|&c| out.features[c * 6..c * 6 + 6] != grid.features[c * 6..c * 6 + 6]).collect();
    assert_eq!(changed, vec![10, 11, 14, 15]);

    let out = fuse_future_bev(&next, &grid, &unproj).unwrap();
    let mut oracle = grid.features.clone();
    for (q, &(ox, oy)) in next.patch_origins.iter().enumerate() {
        let u = affine_row(&rows(&next.queries)[q], &unproj);
        for iy in oy..oy + 2 {
            for ix in ox..ox + 2 {
                for c in 0..6 {
                    oracle[(iy * 4 + ix) * 6 + c] += u[c];
                }
            }
        }
    }
    for (a, b) in out.features.iter().zip(&oracle) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-6);
    }
    assert_eq!(out.weights, grid.weights);

    let mut bad = next.clone();
    bad.patch_origins[0] = (3, 0);
    assert!(fuse_future_bev(&bad, &grid, &unproj).is_err());
}

#[test]
fn plan_loss_examples() {
    let gt = random_traj(6, 21);
    let grid = random_grid(4, 1, 2, 22);
    assert_eq!(plan_loss(&gt, &gt, &grid, &grid).unwrap(), PlanLoss::default());
    let shifted = Trajectory::new(gt.waypoints.iter().map(|w| [w[0] + 1.0, w[1]]).collect());
    let l = plan_loss(&shifted, &gt, &grid, &grid).unwrap();
    assert_abs_diff_eq!(l.reg, 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(l.total, 0.5, epsilon = 1e-12);
    let mut off = grid.clone();
    off.features.iter_mut().for_each(|f| *f += 2.0);
    let l = plan_loss(&gt, &gt, &off, &grid).unwrap();
    assert_abs_diff_eq!(l.total, 4.0, epsilon = 1e-12);
    assert_eq!(l.total, l.reg + l.bev);
    assert!(plan_loss(&random_traj(5, 1), &gt, &grid, &grid).is_err());
}

fn toy_config() -> PlannerConfig {
    PlannerConfig {
        query_dim: 6,
        patches_per_side: 2,
        horizon: 3,
        ff_hidden: 8,
        scene_layers: 2,
        waypoint_layers: 2,
        future_layers: 2,
    }
}

fn toy_sample(seed: u64) -> PlanSample {
    PlanSample { bev: random_grid(4, 2, 2, seed), target_bev: random_grid(4, 2, 2, seed + 1), gt: random_traj(3, seed + 2) }
}

#[test]
fn forward_matches_component_chain() {
    let planner = Planner::new(toy_config(), 4, 23).unwrap();
    let s = toy_sample(24);
    let out = planner.forward(&s.bev).unwrap();
    let mut q = extract_scene_queries(&s.bev, 2, &planner.proj).unwrap();
    for b in &planner.scene_blocks {
        q.queries = attention_block(b, &q.queries, &q.queries).unwrap();
    }
    let traj = predict_trajectory(&planner.waypoints, &q, &planner.waypoint_blocks, &planner.head).unwrap();
    let next = predict_next_queries(&q, &traj, &planner.mln, &planner.future_blocks).unwrap();
    let fused = fuse_future_bev(&next, &s.bev, &planner.unproj).unwrap();
    for (a, b) in out.trajectory.waypoints.iter().zip(&traj.waypoints) {
        assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-12);
    }
    for (a, b) in out.future_bev.features.iter().zip(&fused.features) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
    let p = PreparedSample::new(&s, &planner.config).unwrap();
    let (l, _) = plan_sample_loss(&planner, &p).unwrap();
    let direct = plan_loss(&out.trajectory, &s.gt, &out.future_bev, &s.target_bev).unwrap();
    assert_abs_diff_eq!(l.reg, direct.reg, epsilon = 1e-12);
    assert_abs_diff_eq!(l.bev, direct.bev, epsilon = 1e-12);
    assert_eq!(l.total, l.reg + l.bev);
}

#[test]
fn planner_gradients_match_finite_differences() {
    let mut planner = Planner::new(toy_config(), 4, 25).unwrap();
    // Non-trivial norms and biases so every tensor is exercised.
    let mut r = rng(26);
    for b in planner.scene_blocks.iter_mut().chain(&mut planner.waypoint_blocks).chain(&mut planner.future_blocks) {
        randomize_norms(b, &mut r);
    }
    planner.waypoints = random_mat(3, 6, &mut r);
    let s = PreparedSample::new(&toy_sample(27), &planner.config).unwrap();
    assert_eq!(s.input.pooled.nrows(), 4);
    let (_, analytic) = plan_loss_and_gradients(&planner, &s).unwrap();
    let params = planner.to_flat();
    let report = check_gradient(&params, &analytic, 1e-5, |p| {
        let (l, sig) = plan_sample_loss(&planner.from_flat(p).unwrap(), &s).unwrap();
        (l.total, sig)
    });
    assert!(report.checked > params.len() * 9 / 10, "{report:?}");
    assert!(report.max_rel_error < FD_TOLERANCE, "{report:?}");
}

#[test]
fn training_reduces_loss() {
    let planner = Planner::new(toy_config(), 4, 28).unwrap();
    let samples = vec![toy_sample(29), toy_sample(33)];
    let opts = PlanTrainOptions { steps: 60, adam: AdamConfig { lr: 1e-2, ..Default::default() } };
    let (trained, trace) = train_planner(&planner, &samples, &opts).unwrap();
    assert_eq!(trace.len(), 60);
    assert!(trace[59].total < 0.5 * trace[0].total, "{:?} {:?}", trace[0], trace[59]);
    assert!(average_l2(&trained, &samples).unwrap() < average_l2(&planner, &samples).unwrap());
}

#[test]
fn plnw_round_trip() {
    let planner = Planner::new(toy_config(), 4, 30).unwrap();
    let mut buf = Vec::new();
    write_plnw(&mut buf, &planner).unwrap();
    assert_eq!(&buf[..4], b"PLNW");
    let back = read_plnw(&mut buf.as_slice()).unwrap();
    assert_eq!(back, planner);
    let mut again = Vec::new();
    write_plnw(&mut again, &back).unwrap();
    assert_eq!(again, buf);
    buf.truncate(buf.len() - 1);
    assert!(read_plnw(&mut buf.as_slice()).is_err());
}

#[test]
fn flat_round_trip_and_shapes() {
    let planner = Planner::new(PlannerConfig::default(), 40, 31).unwrap();
    assert_eq!(planner.from_flat(&planner.to_flat()).unwrap(), planner);
    assert_eq!(planner.scene_blocks.len(), 2);
    assert_eq!(planner.waypoints.shape(), (6, 32));
    assert!(planner.waypoints.iter().all(|w| w.abs() < 0.2));
    assert!(planner.forward(&random_grid(8, 2, 3, 32)).is_err());
}
