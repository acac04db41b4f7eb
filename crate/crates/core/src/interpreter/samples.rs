use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gridworld::{Env, EnvConfig, EnvMode, WorldState};
use crate::policy::{sample_actions, CommMode, Group, Policy};

use super::InterpError;

pub const SAMPLES_MAGIC: &[u8; 4] = b"ADVS";
pub const SAMPLES_VERSION: u32 = 1;

/// What the decoder reconstructs from what.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Transmitted encoding `[X]ᵢ` to the agent's own channel-1 plane.
    FirstMessage,
    /// AGNN output row to the global coverage inside the agent's window.
    AgnnOutputCoverage,
}

impl TargetKind {
    pub fn name(self) -> &'static str {
        match self {
            TargetKind::FirstMessage => "first_message",
            TargetKind::AgnnOutputCoverage => "agnn_output_coverage",
        }
    }

    fn code(self) -> u8 {
        match self {
            TargetKind::FirstMessage => 0,
            TargetKind::AgnnOutputCoverage => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self, InterpError> {
        match c {
            0 => Ok(TargetKind::FirstMessage),
            1 => Ok(TargetKind::AgnnOutputCoverage),
            _ => Err(InterpError::Format(format!("target kind {}", c))),
        }
    }
}

impl std::str::FromStr for TargetKind {
    type Err = InterpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first_message" => Ok(TargetKind::FirstMessage),
            "agnn_output_coverage" => Ok(TargetKind::AgnnOutputCoverage),
            o => Err(InterpError::Config(format!("unknown target kind {:?}", o))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self, InterpError> {
        Split::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| InterpError::Format(format!("split {}", c)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub episode: u64,
    pub t: u32,
    pub agent: u32,
    pub group: Group,
    pub split: Split,
    pub encoding: Vec<f32>,
    /// Binary target plane, row-major `h × w`.
    pub target: Vec<u8>,
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub kind: TargetKind,
    pub enc_dim: usize,
    pub h: usize,
    pub w: usize,
    pub samples: Vec<Sample>,
}

/// Requested pair counts per split (cooperative agents only).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub kind: TargetKind,
    pub sizes: SplitSizes,
    pub sample_prob: f64,
    pub mode: CommMode,
    /// Give up after this many environment steps.
    pub max_steps: usize,
    pub seed: u64,
}

impl SampleSet {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |x| x.split == s)
    }

    pub fn count(&self, s: Split, g: Group) -> usize {
        self.split(s).filter(|x| x.group == g).count()
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Fraction of positive pixels under the mask in `split`.
    pub fn prevalence(&self, s: Split, g: Group) -> f64 {
        let (mut pos, mut tot) = (0usize, 0usize);
        for x in self.split(s).filter(|x| x.group == g) {
            for (t, m) in x.target.iter().zip(&x.mask) {
                if *m != 0 {
                    tot += 1;
                    pos += usize::from(*t != 0);
                }
            }
        }
        pos as f64 / tot.max(1) as f64
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), InterpError> {
        w.write_all(SAMPLES_MAGIC)?;
        for v in [
            SAMPLES_VERSION,
            self.samples.len() as u32,
            self.enc_dim as u32,
            self.h as u32,
            self.w as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[self.kind.code()])?;
        for s in &self.samples {
            w.write_all(&s.episode.to_le_bytes())?;
            w.write_all(&s.t.to_le_bytes())?;
            w.write_all(&s.agent.to_le_bytes())?;
            w.write_all(&[u8::from(s.group == Group::SelfInterested), s.split.code()])?;
            for v in &s.encoding {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&s.target)?;
            w.write_all(&s.mask)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, InterpError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SAMPLES_MAGIC {
            return Err(InterpError::Format("bad magic".into()));
        }
        let mut u32s = [0u32; 5];
        for v in u32s.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, count, enc_dim, h, w] = u32s.map(|v| v as usize);
        if version != SAMPLES_VERSION as usize {
            return Err(InterpError::Format(format!("version {}", version)));
        }
        let mut kb = [0u8; 1];
        r.read_exact(&mut kb)?;
        let kind = TargetKind::from_code(kb[0])?;
        let rec = 8 + 4 + 4 + 2 + 4 * enc_dim + 2 * h * w;
        let mut buf = vec![0u8; rec];
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
            let episode = u64::from_le_bytes(buf[0..8].try_into().expect("8 bytes"));
            let group = match buf[16] {
                0 => Group::Cooperative,
                1 => Group::SelfInterested,
                g => return Err(InterpError::Format(format!("group {}", g))),
            };
            let encoding = buf[18..18 + 4 * enc_dim]
                .chunks(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let o = 18 + 4 * enc_dim;
            samples.push(Sample {
                episode,
                t: u32_at(8),
                agent: u32_at(12),
                group,
                split: Split::from_code(buf[17])?,
                encoding,
                target: buf[o..o + h * w].to_vec(),
                mask: buf[o + h * w..].to_vec(),
            });
        }
        Ok(SampleSet {
            kind,
            enc_dim,
            h,
            w,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), InterpError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, InterpError> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Target plane and mask for `agent` in the current state.
pub fn target_for(cfg: &EnvConfig, state: &WorldState, agent: usize, kind: TargetKind) -> (Vec<u8>, Vec<u8>) {
    let (fw, fh) = (cfg.fov_w, cfg.fov_h);
    let (rw, rh) = ((fw / 2) as i64, (fh / 2) as i64);
    let p = state.positions[agent];
    let mut target = vec![0u8; fw * fh];
    let mut mask = vec![0u8; fw * fh];
    let global = state.global_coverage();
    if kind == TargetKind::FirstMessage && !cfg.task.is_coverage() {
        let obs = crate::gridworld::observe(cfg, state, agent);
        for (i, v) in obs.data()[fw * fh..].iter().enumerate() {
            target[i] = u8::from(*v > 0.5);
        }
        mask.iter_mut().for_each(|m| *m = 1);
        return (target, mask);
    }
    for r in 0..fh as i64 {
        for c in 0..fw as i64 {
            let (x, y) = (p.x as i64 + c - rw, p.y as i64 + r - rh);
            let idx = r as usize * fw + c as usize;
            let inside = x >= 0 && y >= 0 && (x as usize) < cfg.width && (y as usize) < cfg.height;
            mask[idx] = u8::from(inside);
            target[idx] = u8::from(match kind {
                TargetKind::FirstMessage => state.coverage[agent].get_signed(x, y, false),
                TargetKind::AgnnOutputCoverage => global.get_signed(x, y, false),
            });
        }
    }
    (target, mask)
}

/// Pairs from one episode: every step is kept with probability `sample_prob`
/// and contributes one pair per agent, tagged with `split`.
pub fn sample_episode<R: Rng>(
    policy: &Policy,
    env_cfg: &EnvConfig,
    kind: TargetKind,
    mode: CommMode,
    sample_prob: f64,
    episode_seed: u64,
    rng: &mut R,
    mut split_for_step: impl FnMut(&mut R) -> Option<Split>,
) -> Result<(Vec<Sample>, usize), InterpError> {
    let mut env = Env::new(env_cfg.clone(), episode_seed, EnvMode::Train)?;
    let n = env.n_agents();
    let mut out = Vec::new();
    let mut steps = 0;
    loop {
        let obs = env.observations();
        let edges = env.edges();
        let fwd = policy.forward(&obs, &edges, mode)?;
        if rng.gen::<f64>() < sample_prob {
            if let Some(split) = split_for_step(rng) {
                for a in 0..n {
                    let (target, mask) = target_for(env_cfg, env.state(), a, kind);
                    let enc = match kind {
                        TargetKind::FirstMessage => &fwd.messages[a],
                        TargetKind::AgnnOutputCoverage => &fwd.gnn_out[a],
                    };
                    out.push(Sample {
                        episode: episode_seed,
                        t: env.state().t as u32,
                        agent: a as u32,
                        group: policy.assignment.group_of(a),
                        split,
                        encoding: enc.iter().map(|&v| v as f32).collect(),
                        target,
                        mask,
                    });
                }
            }
        }
        let joint = sample_actions(&fwd, rng);
        let res = env.step(&joint.actions)?;
        steps += 1;
        if res.done() {
            return Ok((out, steps));
        }
    }
}

/// Rolls out episodes until each split holds exactly its configured number of
/// cooperative pairs. Sampled steps go to a split chosen with probability
/// proportional to its remaining capacity, so `(episode, t)` keys never cross
/// splits. Self-interested pairs of test steps are kept for evaluation.
pub fn collect_samples(policy: &Policy, env_cfg: &EnvConfig, cfg: &CollectConfig) -> Result<SampleSet, InterpError> {
    if !(cfg.sample_prob > 0.0) || cfg.sizes.total() == 0 {
        return Err(InterpError::Empty("sample_prob and sizes must be positive".into()));
    }
    policy.config.check_env(env_cfg)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1_2345_6789);
    let mut have = [0usize; 3];
    let mut samples = Vec::new();
    let mut steps = 0;
    while Split::ALL.iter().any(|&s| have[s as usize] < cfg.sizes.get(s)) {
        if steps >= cfg.max_steps {
            return Err(InterpError::Budget {
                steps,
                have: have.to_vec(),
            });
        }
        let snapshot = have;
        let (batch, n) = sample_episode(
            policy,
            env_cfg,
            cfg.kind,
            cfg.mode,
            cfg.sample_prob,
            seeds.gen(),
            &mut rng,
            |r| {
                let rem: Vec<usize> = Split::ALL.iter().map(|&s| cfg.sizes.get(s).saturating_sub(snapshot[s as usize])).collect();
                let total: usize = rem.iter().sum();
                if total == 0 {
                    return None;
                }
                let mut u = r.gen_range(0..total);
                for (i, &k) in rem.iter().enumerate() {
                    if u < k {
                        return Some(Split::ALL[i]);
                    }
                    u -= k;
                }
                None
            },
        )?;
        steps += n;
        for s in batch {
            let i = s.split as usize;
            if s.group == Group::SelfInterested {
                if s.split == Split::Test {
                    samples.push(s);
                }
            } else if have[i] < cfg.sizes.get(s.split) {
                have[i] += 1;
                samples.push(s);
            }
        }
    }
    let enc_dim = samples.first().map(|s| s.encoding.len()).unwrap_or(0);
    Ok(SampleSet {
        kind: cfg.kind,
        enc_dim,
        h: env_cfg.fov_h,
        w: env_cfg.fov_w,
        samples,
    })
}
