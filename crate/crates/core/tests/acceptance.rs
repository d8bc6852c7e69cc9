//! Acceptance suite: one check per criterion, each printing a PASS/FAIL line.
//!
//! Runs without the libtest harness so the lines are always visible. Pass
//! criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 3 5`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use floornav::agents::{AgentKind, AgentSpec, EvalRecord, Localizer};
use floornav::diffusion::{
    forward_noise, gaussian, predict_x0, reverse_step, sample_clipped, square_cosine_schedule, EpsNet, EpsNetShape,
};
use floornav::episodes::{EpisodeParams, EpisodeSampler};
use floornav::eval::{
    mean_collisions, run_benchmark, spl, sr, BenchmarkConfig, BenchmarkResult, ResultTable, TAU_C, TAU_D,
};
use floornav::floorgrid::{load_scene, synth_scene, Cell, GridMap, Scene, SceneParams, SizeClass};
use floornav::geometry::{Pose, WorldPoint};
use floornav::nn::{AdamW, Graph, ParamStore, Tensor};
use floornav::planner::{astar, dijkstra};
use floornav::policy::{
    load_checkpoint, ContextInput, Lambdas, Normalizer, PlanFrame, Policy, PolicyConfig, Sample, TrainConfig, Variant,
};
use floornav::seeds::derive_seed;
use floornav::simulator::{observe, replay, CollisionLimit, SimConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn(&mut Shared) -> Outcome;

/// Desk-scale runs reused across criteria.
#[derive(Default)]
struct Shared {
    desk: HashMap<u64, (tempfile::TempDir, BenchmarkResult)>,
}

fn main() {
    let checks: [(u32, &str, Check); 10] = [
        (1, "planner optimality", c1_planner),
        (2, "metric oracle", c2_metrics),
        (3, "ddpm algebra", c3_ddpm),
        (4, "gradient correctness", c4_gradients),
        (5, "toy-distribution sampling", c5_toy),
        (6, "replay fidelity", c6_replay),
        (7, "baseline sanity", c7_baseline),
        (8, "trend reproduction", c8_trend),
        (9, "determinism", c9_determinism),
        (10, "goal-conditioned divergence", c10_divergence),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    for (id, name, check) in checks {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let o = check(&mut shared);
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {name:<28} {verdict}  {} [{:.1}s]",
            o.detail,
            t0.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn c1_planner(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut solvable, mut mismatches) = (0, 0);
    for _ in 0..200 {
        let mut g = GridMap::new(64, 64, 0.1, WorldPoint::new(0.0, 0.0), Cell::Free).unwrap();
        let mut free = Vec::new();
        for r in 0..64 {
            for c in 0..64 {
                let u = floornav::geometry::PixelCoord::new(c, r);
                if rng.random_bool(0.3) {
                    g.set(u, Cell::Occupied);
                } else {
                    free.push(u);
                }
            }
        }
        let s = free[rng.random_range(0..free.len())];
        let t = free[rng.random_range(0..free.len())];
        let (a, d) = (astar(&g, s, t).unwrap(), dijkstra(&g, s, t).unwrap());
        match (a, d) {
            (Some(a), Some(d)) => {
                solvable += 1;
                if a.cost != d.cost {
                    mismatches += 1;
                }
            }
            (None, None) => {}
            _ => mismatches += 1,
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 10.0,
        format!("{solvable} solvable of 200, {mismatches} cost mismatches, {secs:.2}s"),
    )
}

fn rec(d: f64, c: u32, p: f64, l: f64) -> EvalRecord {
    EvalRecord {
        method: "fixture".into(),
        scene_id: "s".into(),
        pair_index: 0,
        final_distance: d,
        collisions: c,
        traveled: p,
        shortest: l,
        max_travel: 100.0,
        steps: 0,
        replans: 0,
        log: None,
    }
}

fn c2_metrics(_: &mut Shared) -> Outcome {
    // (final distance, collisions, traveled, shortest); SPL terms are dyadic
    let recs = vec![
        rec(0.10, 0, 8.0, 8.0),
        rec(0.20, 5, 8.0, 4.0),
        rec(0.30, 12, 4.0, 3.0),
        rec(0.31, 0, 5.0, 5.0),
        rec(0.05, 30, 8.0, 5.0),
        rec(0.05, 31, 5.0, 5.0),
        rec(0.25, 2, 2.0, 4.0),
        rec(0.50, 0, 9.0, 9.0),
        rec(0.15, 8, 8.0, 7.0),
        rec(0.29, 29, 4.0, 1.0),
        rec(0.00, 0, 101.0, 100.0),
        rec(1.20, 50, 20.0, 6.0),
        rec(0.26, 10, 16.0, 8.0),
        rec(0.12, 40, 6.0, 6.0),
        rec(0.34, 3, 6.0, 6.0),
        rec(0.22, 0, 8.0, 6.0),
        rec(0.08, 1, 8.0, 2.0),
        rec(0.40, 0, 4.0, 4.0),
        rec(0.18, 20, 12.0, 12.0),
        rec(0.27, 9, 16.0, 10.0),
    ];
    let b = CollisionLimit::Bounded;
    // hand-counted: successes 12 / 16 / 6, SPL sums 8.125 / 12.125 / 4.375,
    // collision sums over successes 126 / 200 / 16
    let expected = [
        (0.30, b(30), 0.6, 8.125 / 20.0, 126.0 / 12.0),
        (0.35, CollisionLimit::Unbounded, 0.8, 12.125 / 20.0, 200.0 / 16.0),
        (0.25, b(10), 0.3, 4.375 / 20.0, 16.0 / 6.0),
    ];
    let mut bad = Vec::new();
    for (td, tc, want_sr, want_spl, want_mc) in expected {
        let got = (
            sr(&recs, td, tc).unwrap(),
            spl(&recs, td, tc).unwrap(),
            mean_collisions(&recs, td, tc),
        );
        if got != (want_sr, want_spl, Some(want_mc)) {
            bad.push(format!("({td}, {tc}): got {got:?}"));
        }
    }
    if mean_collisions(&recs, 0.01, b(0)).is_some() {
        bad.push("no-success cell is not undefined".into());
    }
    let table = ResultTable::from_records(&recs).unwrap();
    let cell = |td: f64, tc: CollisionLimit| table.get("fixture", td, tc).unwrap();
    let mut order_ok = true;
    for (i, &td) in TAU_D.iter().enumerate() {
        for (j, &tc) in TAU_C.iter().enumerate() {
            let c = cell(td, tc);
            order_ok &= c.spl <= c.sr;
            if i > 0 {
                order_ok &= cell(TAU_D[i - 1], tc).sr <= c.sr;
            }
            if j > 0 {
                order_ok &= cell(td, TAU_C[j - 1]).sr <= c.sr;
            }
        }
    }
    if !order_ok {
        bad.push("sweep ordering violated".into());
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            "3 cells exact, 12-cell sweep ordered".into()
        } else {
            bad.join("; ")
        },
    )
}

fn c3_ddpm(_: &mut Shared) -> Outcome {
    let s = square_cosine_schedule(10).unwrap();
    let mut bad = Vec::new();
    if s.alpha_bar[0] != 1.0 {
        bad.push("alpha_bar[0] != 1".to_string());
    }
    if !s.alpha_bar.windows(2).all(|w| w[1] < w[0]) {
        bad.push("alpha_bar not strictly decreasing".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut inv_err: f64 = 0.0;
    let mut rec_err: f64 = 0.0;
    for _ in 0..50 {
        let a0 = gaussian(4, 16, &mut rng).map(|v| v.clamp(-1.0, 1.0));
        let eps = gaussian(4, 16, &mut rng);
        for k in 0..=10 {
            let ak = forward_noise(&a0, k, &eps, &s).unwrap();
            let x0 = predict_x0(&ak, k, &eps, &s).unwrap();
            inv_err = inv_err.max(max_abs_diff(&x0, &a0));
        }
        let a1 = forward_noise(&a0, 1, &eps, &s).unwrap();
        let z = Tensor::zeros(4, 16);
        let back = reverse_step(&a1, &eps, 1, &z, &s).unwrap();
        rec_err = rec_err.max(max_abs_diff(&back, &a0));
    }
    if inv_err > 1e-12 {
        bad.push(format!("x0 inversion error {inv_err:e}"));
    }
    if rec_err > 1e-12 {
        bad.push(format!("k=1 recovery error {rec_err:e}"));
    }
    // full chain on a scalar with a linear denoiser, against a direct
    // evaluation of the closed-form coefficients
    let off = 0.008;
    let f = |t: f64| ((t + off) / (1.0 + off) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let mut ab_prev = 1.0;
    let mut x = 0.9;
    let mut y = Tensor::scalar(0.9);
    let zs: Vec<f64> = (0..=10).map(|i| (i as f64 * 0.37).sin()).collect();
    let coeffs: Vec<(f64, f64)> = (1..=10)
        .map(|k| {
            let beta = (1.0 - f(k as f64 / 10.0) / f((k - 1) as f64 / 10.0)).min(0.999);
            let ab = ab_prev * (1.0 - beta);
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            ab_prev = ab;
            (beta, sigma)
        })
        .collect();
    let mut abs = vec![1.0];
    for (beta, _) in &coeffs {
        abs.push(abs.last().unwrap() * (1.0 - beta));
    }
    for k in (1..=10).rev() {
        let (beta, sigma) = coeffs[k - 1];
        let e = 0.3 * x;
        let z = if k == 1 { 0.0 } else { zs[k] };
        x = (x - beta / (1.0 - abs[k]).sqrt() * e) / (1.0 - beta).sqrt() + sigma * z;
        let eh = y.map(|v| 0.3 * v);
        y = reverse_step(&y, &eh, k, &Tensor::scalar(zs[k]), &s).unwrap();
    }
    let chain_err = (x - y.data[0]).abs();
    if chain_err > 1e-10 {
        bad.push(format!("scalar chain error {chain_err:e}"));
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("inversion {inv_err:.1e}, k=1 recovery {rec_err:.1e}, chain {chain_err:.1e}")
        } else {
            bad.join("; ")
        },
    )
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn c4_gradients(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    // eight features per token keeps every LayerNorm input well spread, so
    // central differences at h = 1e-5 stay in their h² regime
    let cfg = PolicyConfig {
        rays: 4,
        context_len: 1,
        plan_side: 2,
        ctx_dim: 8,
        enc_hidden: 4,
        layers: 1,
        heads: 2,
        horizon: 2,
        exec_horizon: 1,
        diffusion_steps: 4,
        eps_width: 8,
        eps_blocks: 1,
        step_embed: 4,
        head_hidden: 4,
        ..PolicyConfig::default()
    };
    let norm = Normalizer {
        action_scale: 0.1,
        pos_center: [2.0, 1.5],
        pos_scale: 3.0,
        dist_scale: 8.0,
    };
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for seed in 0..5u64 {
        for variant in [Variant::Naive, Variant::Loc] {
            let mut p = Policy::new(variant, cfg.clone(), norm, seed).unwrap();
            params = params.max(p.num_params());
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let batch: Vec<Sample> = (0..3).map(|_| random_sample(&cfg, variant, &norm, &mut rng)).collect();
            let lam = p.lambdas(&TrainConfig::default());
            worst = worst.max(gradcheck(&mut p, &batch, lam));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        params <= 2000 && worst <= 1e-4 && secs < 60.0,
        format!("{params} params, max relative error {worst:.2e} over 5 seeds x 2 losses"),
    )
}

fn random_sample(cfg: &PolicyConfig, variant: Variant, norm: &Normalizer, rng: &mut ChaCha8Rng) -> Sample {
    let obs = (0..=cfg.context_len)
        .map(|_| (0..cfg.rays).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let plan: Vec<f64> = (0..cfg.plan_side * cfg.plan_side)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let pose = Pose::new(
        rng.random_range(0.0..4.0),
        rng.random_range(0.0..3.0),
        rng.random_range(-3.0..3.0),
    );
    Sample {
        input: ContextInput {
            obs_history: obs,
            floorplan: plan.into(),
            frame: PlanFrame {
                min: WorldPoint::new(-0.5, -0.2),
                max: WorldPoint::new(4.5, 3.3),
            },
            goal: WorldPoint::new(rng.random_range(0.0..4.0), rng.random_range(0.0..3.0)),
            pose: (variant == Variant::Loc).then_some(pose),
        },
        actions: gaussian(1, cfg.action_dim(), rng).map(|v| v.clamp(-1.0, 1.0)),
        dist: rng.random_range(0.0..1.0),
        pose_target: norm.pose_features(&pose),
        k: rng.random_range(1..=cfg.diffusion_steps),
        eps: gaussian(1, cfg.action_dim(), rng),
    }
}

fn gradcheck(policy: &mut Policy, batch: &[Sample], lam: Lambdas) -> f64 {
    let analytic = policy.loss_and_grad(batch, lam).unwrap().1.flat();
    let base = policy.store.flat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        policy.store.set_flat(&p);
        let up = policy.loss(batch, lam).total;
        p[i] = base[i] - h;
        policy.store.set_flat(&p);
        let down = policy.loss(batch, lam).total;
        let num = (up - down) / (2.0 * h);
        worst = worst.max((num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6));
    }
    policy.store.set_flat(&base);
    worst
}

fn c5_toy(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    // modes are the constant sequences ±0.5 of shape H_p × 2
    let dim = 2 * PolicyConfig::default().horizon;
    let mode = vec![0.5; dim];
    let sched = square_cosine_schedule(10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let shape = EpsNetShape {
        dim,
        cond_dim: 0,
        width: 128,
        blocks: 2,
        step_embed: 16,
    };
    let net = EpsNet::new(&mut store, "toy", shape, &mut rng);
    let mut opt = AdamW::new(1e-3, 0.0);
    let batch = 128;
    for _ in 0..3000 {
        let mut a0 = Tensor::zeros(batch, dim);
        for r in 0..batch {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for (x, m) in a0.data[r * dim..(r + 1) * dim].iter_mut().zip(&mode) {
                *x = sign * m;
            }
        }
        let eps = gaussian(batch, dim, &mut rng);
        let ks: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=10)).collect();
        let mut noisy = Tensor::zeros(batch, dim);
        for (r, &k) in ks.iter().enumerate() {
            let (ca, ce) = (sched.alpha_bar[k].sqrt(), (1.0 - sched.alpha_bar[k]).sqrt());
            for c in 0..dim {
                let i = r * dim + c;
                noisy.data[i] = ca * a0.data[i] + ce * eps.data[i];
            }
        }
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.constant(noisy);
            let out = net.forward(&mut g, x, &ks, None);
            let loss = g.mse(out, eps);
            g.backward(loss)
        };
        opt.step(&mut store, &grads);
    }
    let denoise = |x: &Tensor, k: usize| {
        let mut g = Graph::new(&store);
        let v = g.constant(x.clone());
        let out = net.forward(&mut g, v, &vec![k; x.rows], None);
        g.value(out).clone()
    };
    let samples = sample_clipped(&denoise, 1000, dim, &sched, Some(1.0), &mut rng);
    let near = (0..1000)
        .filter(|&r| {
            let row = &samples.data[r * dim..(r + 1) * dim];
            [1.0, -1.0]
                .iter()
                .any(|s| row.iter().zip(&mode).all(|(x, m)| (x - s * m).abs() <= 0.15))
        })
        .count();
    let positive = (0..1000).filter(|&r| samples.data[r * dim] > 0.0).count();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        near >= 950 && secs < 300.0,
        format!("{near}/1000 samples within 0.15 of a mode in every component, {positive} on the positive mode"),
    )
}

fn c6_replay(_: &mut Shared) -> Outcome {
    let sim = SimConfig::default();
    let params = EpisodeParams::default();
    let mut total = 0;
    let mut bad = 0;
    for i in 0..10u64 {
        let scene = synth_scene(
            derive_seed(6, "scene", i) % 1_000_000,
            SizeClass::Small,
            0.15,
            &SceneParams::default(),
        )
        .unwrap();
        let sampler = EpisodeSampler::new(&scene, &params);
        for j in 0..20u64 {
            let e = sampler.sample(derive_seed(6, "episode", i * 100 + j)).unwrap();
            let end = replay(e.start, &e.actions, &scene.truth_map, &sim);
            let grid = &scene.truth_map;
            let (a, b) = (grid.world_to_signed(end.pose.position), grid.world_to_signed(e.goal));
            let cell_gap = (a.0 - b.0).abs().max((a.1 - b.1).abs());
            if end.collision_count != 0 || cell_gap > 1 {
                bad += 1;
            }
            total += 1;
        }
    }
    outcome(
        total == 200 && bad == 0,
        format!("{total} episodes replayed, {bad} with collisions or off-goal endings"),
    )
}

fn c7_baseline(_: &mut Shared) -> Outcome {
    let scenes = |density: f64| -> Vec<Scene> {
        (0..10u64)
            .map(|i| {
                synth_scene(
                    derive_seed(7, "scene", i) % 1_000_000,
                    SizeClass::Small,
                    density,
                    &SceneParams::default(),
                )
                .unwrap()
            })
            .collect()
    };
    let agents = [(
        AgentSpec::new("loc_astar_gt", AgentKind::LocAstar, Localizer::GroundTruth),
        None,
    )];
    let cfg = BenchmarkConfig::default();
    let clear = run_benchmark(&agents, &scenes(0.0), &cfg, 7).unwrap();
    let row = clear.table.get("loc_astar_gt", 0.3, CollisionLimit::Unbounded).unwrap();
    let furnished = run_benchmark(&agents, &scenes(0.15), &cfg, 7).unwrap();
    // per-episode mean; the success-only table cell is reported alongside
    let per_episode =
        furnished.records.iter().map(|r| r.collisions as f64).sum::<f64>() / furnished.records.len() as f64;
    let success_only = furnished
        .table
        .get("loc_astar_gt", 0.3, CollisionLimit::Unbounded)
        .unwrap()
        .mean_collisions;
    outcome(
        row.n_episodes == 100 && row.sr == 1.0 && row.spl >= 0.95 && per_episode > 0.0,
        format!(
            "furniture-free SR {:.3} SPL {:.3} over {}; furnished mean collisions {per_episode:.1} per episode ({} over successes)",
            row.sr,
            row.spl,
            row.n_episodes,
            success_only.map_or("NA".into(), |c| format!("{c:.1}"))
        ),
    )
}

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_floornav"));
    c.env("RUST_LOG", "warn");
    c
}

fn run_cli(dir: &Path, args: &[&str], sets: &[String]) -> Result<(), String> {
    let mut c = cli();
    c.args(args).arg("--out").arg(dir);
    for s in sets {
        c.arg("--set").arg(s);
    }
    let out = c.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(())
}

const TREND_METHODS: &str = r#"eval.methods=[
  {name = "loc_gt", kind = "flo_diff_loc"},
  {name = "loc_noisy", kind = "flo_diff_loc", localizer = {type = "noisy", pos_var = 0.3, orientation = "keep"}},
  {name = "naive", kind = "flo_diff_naive"},
  {name = "random", kind = "random_walk"},
]"#;

/// Full desk-scale pipeline through the CLI with default settings:
/// 20 small scenes x 20 demonstrations, both variants, 10 pairs per scene.
fn desk_run(shared: &mut Shared, seed: u64) -> Result<&(tempfile::TempDir, BenchmarkResult), String> {
    use std::collections::hash_map::Entry;
    let slot = match shared.desk.entry(seed) {
        Entry::Occupied(o) => return Ok(o.into_mut()),
        Entry::Vacant(v) => v,
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sets = vec![format!("seed={seed}"), TREND_METHODS.replace('\n', " ")];
    run_cli(dir.path(), &["synth-scenes"], &sets)?;
    run_cli(dir.path(), &["gen-episodes"], &sets)?;
    run_cli(dir.path(), &["train", "--variant", "loc"], &sets)?;
    run_cli(dir.path(), &["train", "--variant", "naive"], &sets)?;
    run_cli(dir.path(), &["eval"], &sets)?;
    let text = fs::read_to_string(dir.path().join("results/results.json")).map_err(|e| e.to_string())?;
    let res: BenchmarkResult = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok(slot.insert((dir, res)))
}

fn c8_trend(shared: &mut Shared) -> Outcome {
    let methods = ["loc_gt", "loc_noisy", "naive", "random"];
    let mut per_seed: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..3 {
        let res = match desk_run(shared, seed) {
            Ok((_, r)) => r,
            Err(e) => return outcome(false, e),
        };
        for m in methods {
            let row = res.table.get(m, 0.3, CollisionLimit::Bounded(50)).unwrap();
            per_seed.entry(m).or_default().push(row.sr);
        }
    }
    let mean = |m: &str| per_seed[m].iter().sum::<f64>() / 3.0;
    let gt = mean("loc_gt");
    let parts = [
        ("a", gt > mean("naive")),
        ("b", gt > mean("loc_noisy")),
        ("c", gt > mean("random")),
    ];
    let seeds: Vec<String> = methods
        .iter()
        .map(|m| {
            format!(
                "{m} {:.3} {:?}",
                mean(m),
                per_seed[m]
                    .iter()
                    .map(|v| (v * 1000.0).round() / 1000.0)
                    .collect::<Vec<_>>()
            )
        })
        .collect();
    let verdicts: Vec<String> = parts
        .iter()
        .map(|(n, ok)| format!("({n}) {}", if *ok { "holds" } else { "fails" }))
        .collect();
    outcome(
        parts.iter().all(|(_, ok)| *ok),
        format!("mean SR [per seed]: {}; {}", seeds.join(", "), verdicts.join(" ")),
    )
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c9_determinism(_: &mut Shared) -> Outcome {
    let sets: Vec<String> = [
        "seed=9",
        "scenes.small=2",
        "episodes.per_scene=5",
        "train.epochs=2",
        "train.steps_per_epoch=4",
        "eval.pairs_per_scene=2",
        "eval.keep_logs=true",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut trees = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let steps: [&[&str]; 6] = [
            &["synth-scenes"],
            &["gen-episodes"],
            &["train", "--variant", "loc", "--workers", "1"],
            &["train", "--variant", "naive", "--workers", "1"],
            &["eval", "--workers", "1"],
            &["render"],
        ];
        for s in steps {
            if let Err(e) = run_cli(dir.path(), s, &sets) {
                return outcome(false, e);
            }
        }
        trees.push(tree(dir.path()));
    }
    let files = trees[0].len();
    let same = trees[0] == trees[1];
    let pngs = trees[0]
        .keys()
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .count();
    outcome(
        same && pngs > 0,
        format!(
            "{files} output files ({pngs} PNG) {}",
            if same { "byte-identical" } else { "differ" }
        ),
    )
}

fn c10_divergence(shared: &mut Shared) -> Outcome {
    let dir = match desk_run(shared, 0) {
        Ok((d, _)) => d.path().to_path_buf(),
        Err(e) => return outcome(false, e),
    };
    let (policy, _) = load_checkpoint(&dir.join("checkpoints/loc.json")).unwrap();
    let index = fs::read_to_string(dir.join("scenes/index.txt")).unwrap();
    let scene = load_scene(&dir.join("scenes").join(index.lines().next().unwrap())).unwrap();
    let sim = SimConfig::default();
    let sampler = EpisodeSampler::new(&scene, &EpisodeParams::default());
    let pool: Vec<_> = (0..24)
        .map(|j| sampler.sample(derive_seed(10, "pairs", j)).unwrap())
        .collect();
    let start = pool[0].start;
    // Three goals whose bearings from the start are maximally spread, so the
    // paths toward them are geometrically distinct before the policy is asked.
    let bearing = |g: WorldPoint| (g.y - start.position.y).atan2(g.x - start.position.x);
    let gap = |a: f64, b: f64| {
        let d = (a - b).rem_euclid(std::f64::consts::TAU);
        d.min(std::f64::consts::TAU - d)
    };
    let far: Vec<_> = pool.iter().filter(|p| p.goal.distance(start.position) >= 1.5).collect();
    if far.len() < 3 {
        return outcome(false, format!("only {} goals at least 1.5 m from the start", far.len()));
    }
    let mut best = (f64::NEG_INFINITY, [0, 0, 0]);
    for i in 0..far.len() {
        for j in i + 1..far.len() {
            for k in j + 1..far.len() {
                let b = [far[i], far[j], far[k]].map(|p| bearing(p.goal));
                let spread = gap(b[0], b[1]).min(gap(b[0], b[2])).min(gap(b[1], b[2]));
                if spread > best.0 {
                    best = (spread, [i, j, k]);
                }
            }
        }
    }
    let pairs = best.1.map(|i| far[i]);
    let rays = observe(&start, &scene.truth_map, &sim).rays;
    let global: Arc<[f64]> = scene.floor_plan.occupancy_patch(policy.config.plan_side).into();
    let raster = policy.config.plan_raster(&scene.floor_plan, &global, Some(&start));
    let plans: Vec<Vec<(f64, f64)>> = pairs
        .iter()
        .map(|p| {
            let input = ContextInput::with_history(
                std::slice::from_ref(&rays),
                policy.config.context_len,
                raster.clone(),
                PlanFrame::of(&scene.floor_plan),
                p.goal,
                Some(start),
            );
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let out = policy.act(&input, false, &mut rng).unwrap();
            out.full
                .iter()
                .map(|a| a.rotated(start.theta))
                .map(|a| (a.dx, a.dy))
                .collect()
        })
        .collect();
    let disp = |a: &[(f64, f64)], b: &[(f64, f64)]| {
        a.iter().zip(b).map(|(x, y)| (x.0 - y.0).hypot(x.1 - y.1)).sum::<f64>() / a.len() as f64
    };
    let d = [
        disp(&plans[0], &plans[1]),
        disp(&plans[0], &plans[2]),
        disp(&plans[1], &plans[2]),
    ];
    let goals: Vec<String> = pairs
        .iter()
        .map(|p| {
            format!(
                "({:.1}, {:.1}) at {:.0} deg",
                p.goal.x,
                p.goal.y,
                bearing(p.goal).to_degrees()
            )
        })
        .collect();
    outcome(
        d.iter().all(|&v| v > 0.05),
        format!(
            "start ({:.1}, {:.1}) goals {}: pairwise mean displacement {:.3} / {:.3} / {:.3} m",
            start.position.x,
            start.position.y,
            goals.join(", "),
            d[0],
            d[1],
            d[2]
        ),
    )
}
