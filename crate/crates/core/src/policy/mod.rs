//! Actor (CNN encoder → AGNN → softmax head) and per-group centralized critics
//! with cooperative / self-interested parameter assignment.

mod actor;
mod config;
mod nets;

pub use actor::{
    critic_value, critic_values, decentralized_forward, greedy_actions, joint_forward, sample_actions,
    sample_categorical, stack_obs, stack_shifts, JointAction, JointPolicyOutput, Policy, META_PATH,
};
pub use config::{cnn_out_hw, shift_for, CommMode, Group, ParamAssignment, PolicyConfig};
pub use nets::{
    actor_forward, actor_prefix, clone_actor_group, cnn_forward, critic_forward, critic_prefix, group_rows,
    init_actor, init_critic, mlp_forward, per_group, tap_path, ActorVars, Binder,
};

use thiserror::Error;

use crate::diffcore::DiffError;
use crate::graphnet::GraphError;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("agent {agent} unknown for {n} agents")]
    UnknownAgent { agent: usize, n: usize },
    #[error("missing parameter {0}")]
    MissingParams(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::gridworld::{Env, EnvConfig, EnvMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_env() -> EnvConfig {
        EnvConfig {
            width: 8,
            height: 8,
            n_agents: 3,
            obstacle_fraction: 0.2,
            fov_w: 7,
            fov_h: 7,
            comm_range: 4.0,
            ..EnvConfig::coverage()
        }
    }

    fn random_obs(n: usize, seed: u64) -> Vec<Tensor<f32>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::new(vec![2, 7, 7], (0..98).map(|_| rng.gen_range(0..2) as f32).collect()).unwrap())
            .collect()
    }

    fn policy(si: Option<usize>) -> Policy {
        let env = small_env();
        let cfg = PolicyConfig::desk(&env);
        let p = Policy::init(cfg, ParamAssignment::cooperative(3), 7).unwrap();
        match si {
            Some(i) => {
                let mut q = p.introduce_self_interested(i, 8).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let fresh = init_actor::<f32, _>(&q.config, Group::SelfInterested, &mut rng).unwrap();
                q.params.merge(&fresh);
                q
            }
            None => p,
        }
    }

    fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn distributions_sum_to_one() {
        let p = policy(Some(0));
        let out = p.forward(&random_obs(3, 1), &[(0, 1), (1, 2)], CommMode::Full).unwrap();
        for row in &out.probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(row.len(), 5);
        }
    }

    #[test]
    fn no_comms_isolates_agents() {
        let p = policy(None);
        let obs = random_obs(3, 2);
        let mut other = obs.clone();
        other[1] = random_obs(1, 3).remove(0);
        let edges = [(0, 1), (1, 2), (0, 2)];
        let a = p.forward(&obs, &edges, CommMode::NoComms).unwrap();
        let b = p.forward(&other, &edges, CommMode::NoComms).unwrap();
        assert_eq!(a.probs[0], b.probs[0]);
        assert_eq!(a.probs[2], b.probs[2]);
        let c = p.forward(&obs, &edges, CommMode::Full).unwrap();
        let d = p.forward(&other, &edges, CommMode::Full).unwrap();
        assert_ne!(c.log_probs[0], d.log_probs[0]);
    }

    #[test]
    fn masked_si_has_no_influence() {
        let p = policy(Some(0));
        let obs = random_obs(3, 4);
        let mut other = obs.clone();
        other[0] = random_obs(1, 5).remove(0);
        let edges = [(0, 1), (1, 2), (0, 2)];
        let a = p.forward(&obs, &edges, CommMode::MaskSiOutgoing).unwrap();
        let b = p.forward(&other, &edges, CommMode::MaskSiOutgoing).unwrap();
        assert_eq!(a.probs[1], b.probs[1]);
        assert_eq!(a.probs[2], b.probs[2]);
        assert_ne!(a.probs[0], b.probs[0]);
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let p = policy(None);
        let o = random_obs(1, 6).remove(0);
        let out = p.forward(&[o.clone(), o.clone(), o], &[], CommMode::Full).unwrap();
        assert_eq!(out.probs[0], out.probs[1]);
        assert_eq!(out.probs[1], out.probs[2]);
    }

    #[test]
    fn decentralized_matches_centralized() {
        let p = policy(Some(1));
        let p64 = p.params.cast::<f64>();
        let obs = random_obs(3, 7);
        for mode in [CommMode::Full, CommMode::NoComms, CommMode::MaskSiOutgoing] {
            let a = joint_forward(&p64, &p.config, &p.assignment, &obs, &[(0, 1), (1, 2)], mode).unwrap();
            let b = decentralized_forward(&p64, &p.config, &p.assignment, &obs, &[(0, 1), (1, 2)], mode).unwrap();
            assert!(max_diff(&a.probs, &b.probs) < 1e-6);
            assert!(max_diff(&a.gnn_out, &b.gnn_out) < 1e-9);
        }
    }

    #[test]
    fn degenerate_distributions_sample_as_expected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = JointPolicyOutput {
            probs: vec![vec![0.0, 0.0, 1.0, 0.0, 0.0], vec![0.2; 5]],
            log_probs: vec![
                vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
                vec![(0.2f64).ln(); 5],
            ],
            messages: vec![],
            gnn_out: vec![],
        };
        for _ in 0..100 {
            let a = sample_actions(&out, &mut rng);
            assert_eq!(a.actions[0].index(), 2);
            assert_eq!(a.log_probs[0], 0.0);
            assert!((a.log_probs[1] - (0.2f64).ln()).abs() < 1e-15);
            assert!((a.joint_log_prob() - (0.2f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn zeroed_value_head_returns_bias() {
        let mut p = policy(None);
        let w = p.params.get_mut("critic.coop.head.out.w").unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        p.params.get_mut("critic.coop.head.out.b").unwrap().data_mut()[0] = 0.75;
        let env = Env::new(small_env(), 1, EnvMode::Train).unwrap();
        let v = p.values(&env.observations(), &env.global_state()).unwrap();
        assert!(v.iter().all(|&x| x == 0.75f32 as f64));
    }

    #[test]
    fn critic_not_constant() {
        let p = policy(None);
        let a = Env::new(small_env(), 1, EnvMode::Train).unwrap();
        let b = Env::new(small_env(), 2, EnvMode::Train).unwrap();
        let va = p.values(&a.observations(), &a.global_state()).unwrap();
        let vb = p.values(&b.observations(), &b.global_state()).unwrap();
        assert_ne!(va, vb);
    }

    #[test]
    fn si_starts_as_copy_of_team() {
        let base = policy(None);
        let p = base.introduce_self_interested(0, 3).unwrap();
        assert_eq!(p.assignment.si_agent(), Some(0));
        for (path, t) in p.params.subtree("actor.coop.").iter() {
            let si = path.replacen("actor.coop.", "actor.si.", 1);
            assert_eq!(p.params.get(&si).unwrap(), t);
        }
        assert!(p.params.contains("critic.si.head.out.w"));
        let obs = random_obs(3, 9);
        let a = base.forward(&obs, &[(0, 1)], CommMode::Full).unwrap();
        let b = p.forward(&obs, &[(0, 1)], CommMode::Full).unwrap();
        assert!(max_diff(&a.probs, &b.probs) < 1e-6);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut p = policy(Some(2));
        p.env = Some(small_env());
        p.manifest = Some("abc123".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.advc");
        p.save(&path).unwrap();
        let q = Policy::load(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn wrong_counts_rejected() {
        let p = policy(None);
        assert!(p.forward(&random_obs(2, 1), &[], CommMode::Full).is_err());
        assert!(p.forward(&random_obs(3, 1), &[(0, 5)], CommMode::Full).is_err());
    }
}
