//! Acceptance criteria for the whole pipeline. Each criterion prints one
//! PASS/FAIL line straight to stdout so the summary survives output capture.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::time::Instant;

use dlo_core::data::{collect, relabel, CollectConfig, CommandKind, CommandSampler, Dataset, RelabelMode};
use dlo_core::eval::{
    make_goal_sequence, run_eval, BaselineRunner, EvalReport, Goal, GoalSequence, PolicyRunner, ShapeTag,
    GOAL_BUDGET,
};
use dlo_core::learn::{
    actor_objective, bc_update, compute_lambda, critic_input, critic_objective, critic_targets, prepare, td3bc_update,
    train, TrainConfig,
};
use dlo_core::mdp::{decode_input, encode_input, reward, GripperPose, Observation, Shape, Side, Vec2, Workspace, INPUT_DIM, N_POINTS};
use dlo_core::motion::{DualArmController, MotionParams, PdGains};
use dlo_core::nn::{Mode, Net};
use dlo_core::servo::{dr_jacobian, ServoConfig};
use dlo_core::sim::{MaterialParams, SimConfig, SimState, Simulator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    Shape::new((0..N_POINTS).map(|_| Vec2::new(rng.gen_range(0.2..0.7), rng.gen_range(-0.35..0.35))).collect())
        .unwrap()
}

fn brute_rmse(a: &Shape, b: &Shape) -> f64 {
    let mut acc = 0.0;
    for j in 0..a.len() {
        let dx = a.points()[j].x - b.points()[j].x;
        let dy = a.points()[j].y - b.points()[j].y;
        acc += dx * dx + dy * dy;
    }
    (acc / a.len() as f64).sqrt()
}

fn reward_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (g, c) = (random_shape(&mut rng), random_shape(&mut rng));
        worst = worst.max((reward(&g, &c).unwrap() + brute_rmse(&g, &c)).abs());
    }
    // Coordinates on a 2^-12 grid so every offset point is representable.
    let mut exact = true;
    for delta in [0.25, 0.125, 0.0625, 0.03125] {
        let g = Shape::new(
            (0..N_POINTS)
                .map(|_| Vec2::new(rng.gen_range(1000..3000) as f64 / 4096.0, rng.gen_range(-1000..1000) as f64 / 4096.0))
                .collect(),
        )
        .unwrap();
        exact &= reward(&g, &g.translated(Vec2::new(delta, 0.0))).unwrap() == -delta;
    }
    check(worst <= 1e-12 && exact, format!("max |error| {worst:.1e} over 1000 pairs, uniform offsets exact: {exact}"))
}

fn encoding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let goal = random_shape(&mut rng);
        let obs = Observation {
            shape: random_shape(&mut rng),
            left: GripperPose::new(rng.gen(), rng.gen(), rng.gen_range(-0.7..0.7)),
            right: GripperPose::new(rng.gen(), rng.gen(), rng.gen_range(-0.7..0.7)),
        };
        let v = encode_input(&goal, &obs);
        if v.len() != 78 || v.len() != INPUT_DIM || v[..36] != goal.flatten()[..] {
            return Err(format!("length {} or goal block misplaced", v.len()));
        }
        let (g2, o2) = decode_input(&v).unwrap();
        if g2 != goal || o2 != obs {
            return Err("decode differs from the encoded values".into());
        }
    }
    Ok("200 random inputs: 78 entries, goal first, exact round trip".into())
}

fn step_key(s: &dlo_core::data::Step) -> Vec<u64> {
    let o = &s.observation;
    o.shape
        .flatten()
        .into_iter()
        .chain([o.left.p.x, o.left.p.y, o.left.o, o.right.p.x, o.right.p.y, o.right.o])
        .chain(s.action.to_array())
        .map(f64::to_bits)
        .collect()
}

fn augmentation_exactness(base: &Dataset) -> Outcome {
    let start = Instant::now();
    let known: HashSet<Vec<u64>> = base.episodes.iter().flat_map(|e| &e.steps).map(step_key).collect();
    let n = base.len();
    let mut runs = vec![(RelabelMode::Intra, 2), (RelabelMode::Intra, 4), (RelabelMode::Intra, 6), (RelabelMode::Intra, 8)];
    runs.extend([(RelabelMode::Inter, 2), (RelabelMode::Mixed, 2)]);
    for (mode, ratio) in runs {
        let out = relabel(base, mode, ratio, 3).map_err(|e| e.to_string())?;
        if out.len() != ratio * n || out.episodes[..n] != base.episodes[..] {
            return Err(format!("{mode:?} {ratio}x: {} episodes or originals changed", out.len()));
        }
        for ep in &out.episodes[n..] {
            for s in &ep.steps {
                if s.reward != -brute_rmse(&ep.goal, &s.observation.shape) {
                    return Err(format!("{mode:?} {ratio}x: reward differs from recomputation"));
                }
                if !known.contains(&step_key(s)) {
                    return Err(format!("{mode:?} {ratio}x: observation/action not found in the source"));
                }
            }
            if mode == RelabelMode::Intra && ep.steps.last().unwrap().reward != 0.0 {
                return Err("intra final reward is not zero".into());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 30.0, format!("{n} episodes, intra 2/4/6/8x plus inter/mixed 2x, {secs:.1} s"))
}

fn lambda_formula() -> Outcome {
    let all_alpha = compute_lambda(&[2.5; 7], 2.5);
    let pair = compute_lambda(&[2.5, 5.0], 2.5);
    let zero = compute_lambda(&[0.3, -1.2], 0.0);
    check(
        all_alpha == 1.0 && pair == 0.75 && zero == 0.0,
        format!("Q=alpha -> {all_alpha}, Q={{2.5, 5.0}} -> {pair}, alpha=0 -> {zero}"),
    )
}

/// Relative error `|fd - analytic| / max(|fd|, |analytic|)` per parameter block, worst block.
fn gradient_error(net: &Net, analytic: &[f64], loss: impl Fn(&Net) -> f64) -> f64 {
    let h = 1e-5;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for b in net.spec.blocks() {
        let (mut diff, mut fd_norm, mut an_norm) = (0.0, 0.0, 0.0);
        for i in b.offset..b.offset + b.len {
            let p0 = probe.params[i];
            probe.params[i] = p0 + h;
            let up = loss(&probe);
            probe.params[i] = p0 - h;
            let down = loss(&probe);
            probe.params[i] = p0;
            let fd = (up - down) / (2.0 * h);
            diff += (fd - analytic[i]).powi(2);
            fd_norm += fd * fd;
            an_norm += analytic[i] * analytic[i];
        }
        let scale = f64::max(fd_norm, an_norm).sqrt();
        if scale > 0.0 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}

fn gradient_suite(small: &Dataset) -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig { hidden_width: 16, batch_size: 8, seed: 4, ..TrainConfig::default() };
    let (mut params, table) = prepare(small, &cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for net in [&mut params.actor, &mut params.critic1, &mut params.critic2] {
        net.running_mean.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        net.running_var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
    }
    let (mut actor_worst, mut critic_worst) = (0.0f64, 0.0f64);
    for k in 0..10 {
        let b = table.sample(cfg.seed, k, cfg.batch_size);
        let obj = actor_objective(&params.actor, Some(&params.critic1), &b.states, &b.actions, Mode::Eval, None, |q| {
            compute_lambda(q, cfg.alpha)
        });
        let lambda = obj.lambda;
        actor_worst = actor_worst.max(gradient_error(&params.actor, &obj.grad, |n| {
            actor_objective(n, Some(&params.critic1), &b.states, &b.actions, Mode::Eval, None, |_| lambda).loss
        }));

        let target = critic_targets(&params, &b, &mut rng);
        let x = critic_input(&b.states, &b.actions);
        let (_, grad, _) = critic_objective(&params.critic1, &x, &target, Mode::Eval, None);
        critic_worst = critic_worst.max(gradient_error(&params.critic1, &grad, |n| {
            critic_objective(n, &x, &target, Mode::Eval, None).0
        }));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        actor_worst <= 1e-4 && critic_worst <= 1e-4 && secs < 120.0,
        format!("10 batches, worst block error actor {actor_worst:.1e} critic {critic_worst:.1e}, {secs:.1} s"),
    )
}

fn bc_collapse(small: &Dataset) -> Outcome {
    let cfg = TrainConfig { alpha: 0.0, hidden_width: 32, batch_size: 64, seed: 6, ..TrainConfig::default() };
    let (mut rl, table) = prepare(small, &cfg).map_err(|e| e.to_string())?;
    let mut bc = rl.clone();
    let mut updates = 0;
    let mut step = 0;
    while updates < 100 {
        let batch = table.sample(cfg.seed, step, cfg.batch_size);
        if td3bc_update(&mut rl, &batch, step).map_err(|e| e.to_string())?.actor_loss.is_some() {
            bc_update(&mut bc, &batch, step).map_err(|e| e.to_string())?;
            updates += 1;
        }
        step += 1;
    }
    let worst = rl.actor.params.iter().zip(&bc.actor.params).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let moved = rl.actor.params != prepare(small, &cfg).unwrap().0.actor.params;
    check(worst <= 1e-10 && moved, format!("100 actor updates, max |difference| {worst:.1e}"))
}

fn random_rollout(material: MaterialParams, seed: u64) -> Result<(SimState, f64, f64), String> {
    let ws = Workspace::default();
    let config = SimConfig { rng_seed: seed, ..SimConfig::default() };
    let sim = Simulator::new(config, material, ws).map_err(|e| e.to_string())?;
    let mut state = sim.init_straight(0.5).map_err(|e| e.to_string())?;
    let mut ctrl = DualArmController::new(&state, MotionParams::default(), PdGains::default());
    let sampler = CommandSampler::new(ws, sim.material.rest_length);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queue = Vec::new();
    let mut deadline = 0.0;
    let (mut strain, mut pin): (f64, f64) = (0.0, 0.0);
    for _ in 0..10_000 {
        if state.time >= deadline || ctrl.settled(&state, 1e-3) {
            if queue.is_empty() {
                let bulge = sim.resample_shape(&state, N_POINTS).map_err(|e| e.to_string())?.bulge();
                queue = sampler.sample(&mut rng, &state.left, &state.right, bulge).waypoints;
                queue.reverse();
            }
            let target = queue.pop().unwrap();
            ctrl.set_target(&state, &target, &ws).map_err(|e| e.to_string())?;
            deadline = ctrl.trajectory(Side::Left).end_time().max(ctrl.trajectory(Side::Right).end_time()) + 1.0;
        }
        ctrl.tick(&sim, &mut state).map_err(|e| format!("diverged: {e}"))?;
        strain = strain.max(state.max_strain(sim.segment_length()));
        let m = state.nodes.len();
        pin = pin.max((state.nodes[0] - state.left.p).norm()).max((state.nodes[m - 1] - state.right.p).norm());
    }
    Ok((state, strain, pin))
}

fn simulator_conservation() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for material in [MaterialParams::soft(), MaterialParams::elastic()] {
        let name = material.name.clone();
        let (a, strain, pin) = random_rollout(material.clone(), 21)?;
        let (b, _, _) = random_rollout(material, 21)?;
        let same = a.nodes.iter().zip(&b.nodes).all(|(p, q)| p.x.to_bits() == q.x.to_bits() && p.y.to_bits() == q.y.to_bits());
        ok &= strain <= 0.01 && pin <= 1e-9 && same;
        parts.push(format!("{name}: strain {:.3}% pin {pin:.1e} m reproducible {same}", 100.0 * strain));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 30.0, format!("10,000 steps each; {}; {secs:.1} s", parts.join("; ")))
}

fn baseline_sanity() -> Outcome {
    let material = MaterialParams::soft();
    let ws = Workspace::default();
    let sim = Simulator::new(SimConfig::default(), material.clone(), ws).unwrap();
    let start = sim.resample_shape(&sim.init_straight(0.5).unwrap(), N_POINTS).unwrap();
    let offset = Vec2::new(0.05, 0.02);
    let (l, r) = (start.points()[0] + offset, start.points()[N_POINTS - 1] + offset);
    let seq = GoalSequence {
        goals: vec![Goal {
            shape: start.translated(offset),
            tag: ShapeTag::Straight,
            left: GripperPose::new(l.x, l.y, 0.0),
            right: GripperPose::new(r.x, r.y, 0.0),
        }],
        budget: GOAL_BUDGET,
        seed: 0,
        material: material.name.clone(),
    };
    let mut runner = BaselineRunner { config: ServoConfig::default(), workspace: ws };
    let report = run_eval(&mut runner, &seq, &material, 0).map_err(|e| e.to_string())?;
    let final_rmse = report.finals()[0];

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut identity = true;
    for _ in 0..20 {
        let shape = random_shape(&mut rng);
        let j = dr_jacobian(&shape, &GripperPose::new(0.4, 0.2, 0.3), &GripperPose::new(0.5, -0.2, -0.1), 0.0);
        for i in 0..N_POINTS {
            for c in [0, 2] {
                identity &= j[(2 * i, c)] == 1.0 && j[(2 * i + 1, c + 1)] == 1.0;
                identity &= j[(2 * i, c + 1)] == 0.0 && j[(2 * i + 1, c)] == 0.0;
            }
        }
    }
    check(
        final_rmse < 0.005 && identity,
        format!("translated goal final RMSE {final_rmse:.4} m in {GOAL_BUDGET} s; k=0 translation blocks identity: {identity}"),
    )
}

fn collection_statistics() -> Outcome {
    let ws = Workspace::default();
    let sampler = CommandSampler::new(ws, MaterialParams::soft().rest_length);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut l, mut r) = (GripperPose::new(0.5, 0.275, 0.0), GripperPose::new(0.5, -0.275, 0.0));
    let mut counts: HashMap<CommandKind, usize> = HashMap::new();
    let mut inside = true;
    for k in 0..10_000 {
        let cmd = sampler.sample(&mut rng, &l, &r, if k % 3 == 0 { -0.02 } else { 0.02 });
        *counts.entry(cmd.kind).or_default() += 1;
        for a in &cmd.waypoints {
            inside &= ws.contains(Side::Left, &a.left) && ws.contains(Side::Right, &a.right);
        }
        let last = cmd.waypoints.last().unwrap();
        (l, r) = (last.left, last.right);
    }
    let mut ok = inside;
    let mut freq = Vec::new();
    for (kind, p) in [(CommandKind::Left, 0.3), (CommandKind::Right, 0.3), (CommandKind::Both, 0.3), (CommandKind::Inversion, 0.1)] {
        let f = counts.get(&kind).copied().unwrap_or(0) as f64 / 10_000.0;
        ok &= (f - p).abs() <= 0.02;
        freq.push(format!("{f:.3}"));
    }
    check(ok, format!("frequencies ({}), all targets inside the workspace: {inside}", freq.join(", ")))
}

fn fmt_finals(r: &EvalReport) -> String {
    r.finals().iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

struct Trained {
    report: EvalReport,
    raw: Dataset,
}

fn train_and_eval(data: &Dataset, seed: u64, seq: &GoalSequence, material: &MaterialParams) -> Result<EvalReport, String> {
    let cfg = TrainConfig { alpha: 2.5, gamma: 0.95, seed, ..TrainConfig::desk() };
    let policy = train(data, &cfg).map_err(|e| e.to_string())?;
    let mut runner = PolicyRunner { policy: &policy, name: format!("td3bc seed {seed}") };
    run_eval(&mut runner, seq, material, 0).map_err(|e| e.to_string())
}

/// Collect 200 soft episodes, relabel 4x intra, train 50,000 steps and compare
/// with the k=1 baseline on the shared goal sequence, for seeds 0, 1 and 2.
fn end_to_end(seq: &GoalSequence, baseline: &EvalReport, first: &mut Option<Trained>) -> Outcome {
    let start = Instant::now();
    let material = MaterialParams::soft();
    let inversions = seq.inversions();
    let mut held = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let raw = collect(&CollectConfig::new(200, seed, material.clone())).map_err(|e| e.to_string())?;
        let data = relabel(&raw, RelabelMode::Intra, 4, seed).map_err(|e| e.to_string())?;
        let report = train_and_eval(&data, seed, seq, &material)?;
        let (rl, base) = (report.finals(), baseline.finals());
        let lower_mean = report.aborted.is_none() && report.mean() < baseline.mean();
        let inverted: Vec<usize> = inversions.iter().copied().filter(|&i| base[i] > 0.05 && rl[i] < 0.05).collect();
        if lower_mean && !inverted.is_empty() {
            held += 1;
        }
        lines.push(format!(
            "seed {seed}: mean {:.4} vs {:.4}, inversions won {:?} [{}]",
            report.mean(),
            baseline.mean(),
            inverted,
            fmt_finals(&report)
        ));
        if seed == 0 {
            *first = Some(Trained { report, raw });
        }
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    check(
        held >= 2 && mins <= 45.0,
        format!("{held}/3 seeds hold, {mins:.1} min; baseline [{}]; {}", fmt_finals(baseline), lines.join("; ")),
    )
}

fn augmentation_trend(seq: &GoalSequence, first: &Option<Trained>) -> Outcome {
    let Some(t) = first else {
        return Err("no 4x run to compare against".into());
    };
    let one = train_and_eval(&t.raw, 0, seq, &MaterialParams::soft())?;
    check(
        one.aborted.is_none() && t.report.mean() <= one.mean(),
        format!("mean final RMSE 4x {:.4} vs 1x {:.4}", t.report.mean(), one.mean()),
    )
}

#[test]
fn acceptance_criteria() {
    let mut out = std::io::stdout();
    let mut failed = Vec::new();
    let mut report = |name: &str, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        writeln!(out, "{tag} {name}: {detail}").unwrap();
        out.flush().unwrap();
        if outcome.is_err() {
            failed.push(name.to_string());
        }
    };

    report("reward oracle", reward_oracle());
    report("encoding", encoding());
    let thousand = collect(&CollectConfig::new(1000, 100, MaterialParams::soft())).expect("collection");
    report("augmentation exactness", augmentation_exactness(&thousand));
    let small = Dataset { episodes: thousand.episodes[..20].to_vec(), ..thousand.clone() };
    drop(thousand);
    report("lambda formula", lambda_formula());
    report("gradient suite", gradient_suite(&small));
    report("bc collapse", bc_collapse(&small));
    report("simulator conservation", simulator_conservation());
    report("baseline sanity", baseline_sanity());
    report("collection statistics", collection_statistics());

    let material = MaterialParams::soft();
    let seq = make_goal_sequence(&material, 0).expect("goal sequence");
    let mut runner = BaselineRunner { config: ServoConfig::default(), workspace: Workspace::default() };
    let baseline = run_eval(&mut runner, &seq, &material, 0).expect("baseline run");
    let mut first = None;
    report("end-to-end reproduction", end_to_end(&seq, &baseline, &mut first));
    report("augmentation trend", augmentation_trend(&seq, &first));

    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
