use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{grad_check, GradCheckConfig, Graph, ParamTree, Tensor};
use crate::graphnet::{hetero_graph_conv, run_decentralized, FilterBank, GraphShiftOperator, HeteroFilterBank, ShiftConfig};
use crate::gridworld::{Action, Env, EnvConfig, EnvMode};
use crate::policy::{actor_forward, stack_obs, stack_shifts, Binder, ParamAssignment, Policy, PolicyConfig};
use crate::trainer::compute_gae;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).expect("shape matches data")
}

fn random_edges(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen::<f64>() < p {
                e.push((a, b));
                e.push((b, a));
            }
        }
    }
    e
}

/// Finite differences of the full actor on a small coverage world.
pub fn check_actor_gradients() -> CheckResult {
    let env_cfg = super::desk_env(crate::gridworld::TaskKind::Coverage);
    let run = || -> Result<f64, String> {
        let policy = Policy::init(PolicyConfig::desk(&env_cfg), ParamAssignment::with_self_interested(3, 0).map_err(|e| e.to_string())?, 5)
            .map_err(|e| e.to_string())?;
        let params: ParamTree<f64> = policy
            .introduce_self_interested(0, 6)
            .map_err(|e| e.to_string())?
            .params
            .cast();
        let env = Env::new(env_cfg.clone(), 3, EnvMode::Train).map_err(|e| e.to_string())?;
        let obs: Tensor<f64> = stack_obs(&env.observations()).map_err(|e| e.to_string())?;
        let s = GraphShiftOperator::build(&env.edges(), 3, ShiftConfig::default()).map_err(|e| e.to_string())?;
        let shift: Tensor<f64> = stack_shifts(&[s]).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let weights = random_tensor(&[3, 5], &mut rng);
        let cfg = policy.config.clone();
        let assign = ParamAssignment::with_self_interested(3, 0).map_err(|e| e.to_string())?;
        let rep = grad_check(
            &params,
            |g: &mut Graph<f64>, p: &ParamTree<f64>| {
                let all = |path: &str| path.starts_with("actor.");
                let b = Binder::new(p, &all);
                let o = g.input(obs.clone());
                let sv = g.input(shift.clone());
                let v = actor_forward(g, &b, &cfg, &assign, o, sv).map_err(|e| crate::diffcore::DiffError::Format(e.to_string()))?;
                let w = g.input(weights.clone());
                let m = g.mul(v.log_probs, w)?;
                Ok(g.sum(m))
            },
            &GradCheckConfig {
                sample: Some(60),
                skip_kinks: true,
                ..GradCheckConfig::default()
            },
        )
        .map_err(|e| e.to_string())?;
        if rep.passed {
            Ok(rep.max_rel_err)
        } else {
            Err(format!("max relative error {:.3e}", rep.max_rel_err))
        }
    };
    match run() {
        Ok(e) => CheckResult {
            name: "actor gradients",
            passed: true,
            detail: format!("max relative error {:.3e}", e),
        },
        Err(d) => CheckResult {
            name: "actor gradients",
            passed: false,
            detail: d,
        },
    }
}

/// Stacked local node execution against the centralized convolution.
pub fn check_decentralized(instances: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(0..=3);
        let (f, g) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let edges = random_edges(n, 0.4, &mut rng);
        let s = GraphShiftOperator::build(&edges, n, ShiftConfig::default()).expect("edges in range");
        let x = random_tensor(&[n, f], &mut rng);
        let banks: Vec<FilterBank> = (0..2)
            .map(|_| FilterBank::new((0..=k).map(|_| random_tensor(&[f, g], &mut rng)).collect()).expect("taps"))
            .collect();
        let assign = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let h = HeteroFilterBank::new(banks, assign).expect("banks agree");
        let a = hetero_graph_conv(&x, &s, &h).expect("centralized");
        let b = run_decentralized(&x, &s, &h).expect("decentralized");
        worst = worst.max(a.max_abs_diff(&b));
    }
    CheckResult {
        name: "centralized = decentralized",
        passed: worst <= 1e-6,
        detail: format!("{} graphs, max abs diff {:.3e}", instances, worst),
    }
}

/// Team return equals the number of newly covered cells.
pub fn check_conservation(episodes: usize, seed: u64) -> CheckResult {
    let cfg = EnvConfig {
        width: 10,
        height: 10,
        n_agents: 4,
        fov_w: 5,
        fov_h: 5,
        comm_range: 4.0,
        horizon: 60,
        ..EnvConfig::coverage()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..episodes {
        let mut env = Env::new(cfg.clone(), rng.gen(), EnvMode::Train).expect("desk world generates");
        let start = env.state().global_coverage().count();
        let mut team = 0.0;
        loop {
            let acts: Vec<Action> = (0..cfg.n_agents).map(|_| Action::ALL[rng.gen_range(0..Action::COUNT)]).collect();
            let r = env.step(&acts).expect("valid actions");
            team += r.rewards.iter().sum::<f64>();
            if r.done() {
                break;
            }
        }
        let newly = (env.state().global_coverage().count() - start) as f64;
        if team != newly {
            bad += 1;
        }
    }
    CheckResult {
        name: "coverage conservation",
        passed: bad == 0,
        detail: format!("{} of {} episodes violated", bad, episodes),
    }
}

/// Backward recursion against the direct double sum.
pub fn check_gae(trajectories: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trajectories {
        let len = rng.gen_range(1..12);
        let r: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let boot = rng.gen_range(-1.0..1.0);
        let (gamma, lambda) = (0.9, 0.95);
        let est = compute_gae(&r, &v, boot, gamma, lambda).expect("aligned");
        for t in 0..len {
            let mut direct = 0.0;
            for l in 0..len - t {
                let next = if t + l + 1 < len { v[t + l + 1] } else { boot };
                direct += (gamma * lambda).powi(l as i32) * (r[t + l] + gamma * next - v[t + l]);
            }
            worst = worst.max((direct - est.advantages[t]).abs());
        }
    }
    CheckResult {
        name: "GAE recursion",
        passed: worst <= 1e-9,
        detail: format!("{} trajectories, max abs diff {:.3e}", trajectories, worst),
    }
}

pub fn selfcheck() -> Vec<CheckResult> {
    vec![
        check_actor_gradients(),
        check_decentralized(100, 1),
        check_conservation(200, 2),
        check_gae(200, 3),
    ]
}
