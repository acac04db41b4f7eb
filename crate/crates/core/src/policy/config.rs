use serde::{Deserialize, Serialize};

use crate::graphnet::{GraphShiftOperator, Nonlinearity, ShiftConfig};
use crate::gridworld::{EnvConfig, GLOBAL_CHANNELS};

use super::PolicyError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CommMode {
    #[default]
    Full,
    /// `S = 0`: every agent sees only its own encoding.
    NoComms,
    /// The self-interested agent still receives but reaches no one.
    MaskSiOutgoing,
}

impl CommMode {
    pub fn name(self) -> &'static str {
        match self {
            CommMode::Full => "full",
            CommMode::NoComms => "no_comms",
            CommMode::MaskSiOutgoing => "mask_si_outgoing",
        }
    }
}

impl std::str::FromStr for CommMode {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" | "with_comms" => Ok(CommMode::Full),
            "no_comms" | "none" => Ok(CommMode::NoComms),
            "mask_si_outgoing" | "mask" => Ok(CommMode::MaskSiOutgoing),
            _ => Err(PolicyError::Config(format!("unknown comm mode '{}'", s))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Cooperative,
    SelfInterested,
}

impl Group {
    /// Path segment used in parameter names.
    pub fn key(self) -> &'static str {
        match self {
            Group::Cooperative => "coop",
            Group::SelfInterested => "si",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Group::Cooperative => "C",
            Group::SelfInterested => "SI",
        }
    }
}

/// Which parameter set each agent uses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamAssignment {
    groups: Vec<Group>,
}

impl ParamAssignment {
    pub fn cooperative(n: usize) -> Self {
        Self {
            groups: vec![Group::Cooperative; n],
        }
    }

    pub fn with_self_interested(n: usize, si: usize) -> Result<Self, PolicyError> {
        if si >= n {
            return Err(PolicyError::UnknownAgent { agent: si, n });
        }
        let mut groups = vec![Group::Cooperative; n];
        groups[si] = Group::SelfInterested;
        Ok(Self { groups })
    }

    pub fn n_agents(&self) -> usize {
        self.groups.len()
    }

    pub fn group_of(&self, agent: usize) -> Group {
        self.groups[agent]
    }

    pub fn si_agent(&self) -> Option<usize> {
        self.groups.iter().position(|&g| g == Group::SelfInterested)
    }

    pub fn agents_in(&self, group: Group) -> Vec<usize> {
        (0..self.groups.len()).filter(|&i| self.groups[i] == group).collect()
    }

    /// Non-empty groups with their agents, cooperative first.
    pub fn groups(&self) -> Vec<(Group, Vec<usize>)> {
        [Group::Cooperative, Group::SelfInterested]
            .into_iter()
            .map(|g| (g, self.agents_in(g)))
            .filter(|(_, a)| !a.is_empty())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub obs_channels: usize,
    pub fov_h: usize,
    pub fov_w: usize,
    /// Encoder conv widths; 2×2 average pooling between consecutive convs.
    pub conv_channels: Vec<usize>,
    /// Message width `F` (encoder output and GNN width).
    pub features: usize,
    pub hops: usize,
    pub gnn_layers: usize,
    pub head_hidden: usize,
    pub critic_conv_channels: Vec<usize>,
    pub critic_features: usize,
    pub critic_hidden: usize,
    pub global_channels: usize,
    pub global_h: usize,
    pub global_w: usize,
    pub shift: ShiftConfig,
    pub nonlinearity: Nonlinearity,
}

impl PolicyConfig {
    /// Full-size defaults: 16/32/64 encoder, F = 64, K = 3, L = 1.
    pub fn standard(env: &EnvConfig) -> Self {
        Self {
            obs_channels: 2,
            fov_h: env.fov_h,
            fov_w: env.fov_w,
            conv_channels: vec![16, 32, 64],
            features: 64,
            hops: 3,
            gnn_layers: 1,
            head_hidden: 64,
            critic_conv_channels: vec![16, 32, 64],
            critic_features: 64,
            critic_hidden: 64,
            global_channels: GLOBAL_CHANNELS,
            global_h: env.height,
            global_w: env.width,
            shift: ShiftConfig::default(),
            nonlinearity: Nonlinearity::LeakyRelu,
        }
    }

    /// Small network for single-core desk-scale runs.
    pub fn desk(env: &EnvConfig) -> Self {
        Self {
            conv_channels: vec![8, 16],
            features: 32,
            hops: 2,
            head_hidden: 32,
            critic_conv_channels: vec![8, 16],
            critic_features: 32,
            critic_hidden: 32,
            ..Self::standard(env)
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.conv_channels.is_empty() || self.critic_conv_channels.is_empty() {
            return Err(PolicyError::Config("encoders need at least one conv layer".into()));
        }
        if self.features == 0 || self.gnn_layers == 0 || self.head_hidden == 0 {
            return Err(PolicyError::Config("zero-width layer".into()));
        }
        cnn_out_hw(self.fov_h, self.fov_w, self.conv_channels.len())?;
        cnn_out_hw(self.global_h, self.global_w, self.critic_conv_channels.len())?;
        Ok(())
    }

    pub fn check_env(&self, env: &EnvConfig) -> Result<(), PolicyError> {
        if env.fov_h != self.fov_h || env.fov_w != self.fov_w || env.height != self.global_h || env.width != self.global_w
        {
            return Err(PolicyError::Config(format!(
                "policy expects FOV {}x{} in a {}x{} world, env has {}x{} in {}x{}",
                self.fov_w, self.fov_h, self.global_w, self.global_h, env.fov_w, env.fov_h, env.width, env.height
            )));
        }
        Ok(())
    }
}

/// Spatial size after `convs` conv layers with pooling between them.
pub fn cnn_out_hw(h: usize, w: usize, convs: usize) -> Result<(usize, usize), PolicyError> {
    let (mut h, mut w) = (h, w);
    for _ in 1..convs {
        if h < 2 || w < 2 {
            return Err(PolicyError::Config(format!("{}x{} too small to pool", w, h)));
        }
        h /= 2;
        w /= 2;
    }
    Ok((h, w))
}

/// Shift operator for one time step under `mode`.
pub fn shift_for(
    edges: &[(usize, usize)],
    n: usize,
    mode: CommMode,
    si: Option<usize>,
    cfg: ShiftConfig,
) -> Result<GraphShiftOperator, PolicyError> {
    match mode {
        CommMode::NoComms => Ok(GraphShiftOperator::zero(n)),
        CommMode::Full => Ok(GraphShiftOperator::build(edges, n, cfg)?),
        CommMode::MaskSiOutgoing => {
            let s = GraphShiftOperator::build(edges, n, cfg)?;
            match si {
                Some(i) => Ok(s.mask_outgoing(i)?),
                None => Ok(s),
            }
        }
    }
}
