//! Browser bindings for three small demos over the `advcomm` library. Every
//! entry point returns a JSON string; the plain `*_json` functions are the
//! same thing without wasm-bindgen so they run natively too.

use advcomm::diffcore::Tensor;
use advcomm::graphnet::{graph_conv, hetero_graph_conv, run_decentralized, FilterBank, GraphShiftOperator, HeteroFilterBank, ShiftConfig};
use advcomm::gridworld::{Action, Env, EnvConfig, EnvMode, Snapshot, TaskKind};
use advcomm::trainer::{compute_gae, td_residuals};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_STEPS: usize = 500;
const MAX_NODES: usize = 16;

#[derive(Serialize)]
struct Frame {
    world: Snapshot,
    edges: Vec<(usize, usize)>,
    rewards: Vec<f64>,
}

#[derive(Serialize)]
struct Rollout {
    frames: Vec<Frame>,
    returns: Vec<f64>,
    terminated: bool,
}

fn parse_task(task: &str) -> Result<TaskKind, String> {
    serde_json::from_value(serde_json::Value::String(task.into())).map_err(|_| format!("unknown task {:?}", task))
}

/// Random-walk rollout of one episode. Agents never pick `Wait`, which makes
/// stall termination visible on coverage tasks.
pub fn rollout_json(task: &str, seed: u64, steps: usize) -> Result<String, String> {
    let cfg = EnvConfig::for_task(parse_task(task)?);
    let mut env = Env::new(cfg.clone(), seed, EnvMode::Train).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut frames = vec![Frame {
        world: Snapshot::capture(cfg.task, env.state()),
        edges: env.edges(),
        rewards: vec![0.0; cfg.n_agents],
    }];
    let mut returns = vec![0.0; cfg.n_agents];
    let mut terminated = false;
    for _ in 0..steps.min(MAX_STEPS) {
        let acts: Vec<Action> = (0..cfg.n_agents).map(|_| Action::ALL[rng.gen_range(0..4)]).collect();
        let r = env.step(&acts).map_err(|e| e.to_string())?;
        for (g, x) in returns.iter_mut().zip(&r.rewards) {
            *g += x;
        }
        frames.push(Frame {
            world: Snapshot::capture(cfg.task, env.state()),
            edges: r.edges.clone(),
            rewards: r.rewards.clone(),
        });
        if r.done() {
            terminated = r.terminated;
            break;
        }
    }
    serde_json::to_string(&Rollout { frames, returns, terminated }).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ConvCompare {
    n: usize,
    edges: Vec<(usize, usize)>,
    assignment: Vec<usize>,
    input: Vec<Vec<f64>>,
    centralized: Vec<Vec<f64>>,
    decentralized: Vec<Vec<f64>>,
    shared_bank: Vec<Vec<f64>>,
    max_abs_diff: f64,
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(|r| r.to_vec()).collect()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Random graph with two filter banks; agent 0 uses the second one. Returns
/// the matrix-form heterogeneous convolution next to the message-passing
/// execution, plus the homogeneous output with bank 0 everywhere.
pub fn conv_compare_json(n: usize, hops: usize, features: usize, edge_prob: f64, seed: u64) -> Result<String, String> {
    if n == 0 || n > MAX_NODES || features == 0 {
        return Err(format!("need 1..={} nodes and at least one feature", MAX_NODES));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(edge_prob.clamp(0.0, 1.0)) {
                edges.push((i, j));
            }
        }
    }
    let s = GraphShiftOperator::build(&edges, n, ShiftConfig::default()).map_err(|e| e.to_string())?;
    let mut bank = || FilterBank::new((0..=hops).map(|_| random_tensor(&[features, features], &mut rng)).collect());
    let coop = bank().map_err(|e| e.to_string())?;
    let si = bank().map_err(|e| e.to_string())?;
    let assignment: Vec<usize> = (0..n).map(|i| usize::from(i == 0)).collect();
    let x = random_tensor(&[n, features], &mut rng);
    let hb = HeteroFilterBank::new(vec![coop.clone(), si], assignment.clone()).map_err(|e| e.to_string())?;
    let c = hetero_graph_conv(&x, &s, &hb).map_err(|e| e.to_string())?;
    let d = run_decentralized(&x, &s, &hb).map_err(|e| e.to_string())?;
    let h = graph_conv(&x, &s, &coop).map_err(|e| e.to_string())?;
    let max_abs_diff = c.data().iter().zip(d.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let out = ConvCompare {
        n,
        edges,
        assignment,
        input: rows(&x),
        centralized: rows(&c),
        decentralized: rows(&d),
        shared_bank: rows(&h),
        max_abs_diff,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct GaeView {
    deltas: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split([',', ' ', '\n'])
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("not a number: {:?}", t)))
        .collect()
}

/// Comma or space separated rewards and values.
pub fn gae_json(rewards: &str, values: &str, bootstrap: f64, gamma: f64, lambda: f64) -> Result<String, String> {
    let (r, v) = (parse_list(rewards)?, parse_list(values)?);
    let deltas = td_residuals(&r, &v, bootstrap, gamma).map_err(|e| e.to_string())?;
    let e = compute_gae(&r, &v, bootstrap, gamma, lambda).map_err(|e| e.to_string())?;
    serde_json::to_string(&GaeView {
        deltas,
        advantages: e.advantages,
        returns: e.returns,
    })
    .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn rollout(task: &str, seed: u32, steps: u32) -> Result<String, JsValue> {
    rollout_json(task, seed as u64, steps as usize).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn conv_compare(n: u32, hops: u32, features: u32, edge_prob: f64, seed: u32) -> Result<String, JsValue> {
    conv_compare_json(n as usize, hops as usize, features as usize, edge_prob, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn gae(rewards: &str, values: &str, bootstrap: f64, gamma: f64, lambda: f64) -> Result<String, JsValue> {
    gae_json(rewards, values, bootstrap, gamma, lambda).map_err(|e| JsValue::from_str(&e))
}
