use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gridworld::{Env, EnvConfig, EnvMode};
use crate::policy::{sample_actions, CommMode, Group, Policy};

use super::decoder::Decoder;
use super::samples::{target_for, TargetKind};
use super::InterpError;

const SCALE: usize = 8;
const GAP: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PanelKind {
    Truth,
    Reconstruction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub row: usize,
    pub col: usize,
    pub t: usize,
    pub agent: usize,
    pub kind: PanelKind,
    /// `h × w` 8-bit intensities.
    pub pixels: Vec<u8>,
}

/// Rows are time steps; each agent contributes a truth and a reconstruction
/// column, the self-interested agent first.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub panel_h: usize,
    pub panel_w: usize,
    pub rows: usize,
    pub cols: usize,
    pub panels: Vec<Panel>,
}

pub fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Column order: self-interested agent first, then cooperative agents by index.
pub fn column_order(policy: &Policy) -> Vec<usize> {
    let mut a = policy.assignment.agents_in(Group::SelfInterested);
    a.extend(policy.assignment.agents_in(Group::Cooperative));
    a
}

pub fn reconstruct_grid(
    decoder: &Decoder,
    policy: &Policy,
    env_cfg: &EnvConfig,
    kind: TargetKind,
    mode: CommMode,
    episode_seed: u64,
    timesteps: &[usize],
) -> Result<ImageGrid, InterpError> {
    let mut env = Env::new(env_cfg.clone(), episode_seed, EnvMode::Eval)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let order = column_order(policy);
    let mut wanted: Vec<usize> = timesteps.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let last = wanted.last().copied();
    let mut panels = Vec::new();
    let mut row = 0;
    let mut t = 0;
    while let Some(last) = last {
        let obs = env.observations();
        let fwd = policy.forward(&obs, &env.edges(), mode)?;
        if wanted.binary_search(&t).is_ok() {
            for (ci, &a) in order.iter().enumerate() {
                let (target, mask) = target_for(env_cfg, env.state(), a, kind);
                let enc: Vec<f32> = match kind {
                    TargetKind::FirstMessage => &fwd.messages[a],
                    TargetKind::AgnnOutputCoverage => &fwd.gnn_out[a],
                }
                .iter()
                .map(|&v| v as f32)
                .collect();
                let pred = decoder.predict(&[enc.as_slice()])?.remove(0);
                let truth = target.iter().zip(&mask).map(|(&v, &m)| if m == 0 { 64 } else { v * 255 }).collect();
                panels.push(Panel {
                    row,
                    col: 2 * ci,
                    t,
                    agent: a,
                    kind: PanelKind::Truth,
                    pixels: truth,
                });
                panels.push(Panel {
                    row,
                    col: 2 * ci + 1,
                    t,
                    agent: a,
                    kind: PanelKind::Reconstruction,
                    pixels: pred.iter().map(|&p| quantize(p)).collect(),
                });
            }
            row += 1;
        }
        if t >= last {
            break;
        }
        let res = env.step(&sample_actions(&fwd, &mut rng).actions)?;
        t += 1;
        if res.done() {
            break;
        }
    }
    Ok(ImageGrid {
        panel_h: env_cfg.fov_h,
        panel_w: env_cfg.fov_w,
        rows: row,
        cols: 2 * order.len(),
        panels,
    })
}

impl ImageGrid {
    /// Grayscale raster with each panel pixel drawn as a square block.
    pub fn raster(&self) -> (usize, usize, Vec<u8>) {
        let cell_w = self.panel_w * SCALE + GAP;
        let cell_h = self.panel_h * SCALE + GAP;
        let width = (self.cols * cell_w + GAP).max(1);
        let height = (self.rows * cell_h + GAP).max(1);
        let mut img = vec![255u8; width * height];
        for p in &self.panels {
            let (ox, oy) = (GAP + p.col * cell_w, GAP + p.row * cell_h);
            for (i, &v) in p.pixels.iter().enumerate() {
                let (r, c) = (i / self.panel_w, i % self.panel_w);
                for dy in 0..SCALE {
                    let y = oy + r * SCALE + dy;
                    let x0 = ox + c * SCALE;
                    img[y * width + x0..y * width + x0 + SCALE].fill(v);
                }
            }
        }
        (width, height, img)
    }

    pub fn write_png(&self, path: &Path) -> Result<(), InterpError> {
        let (w, h, data) = self.raster();
        write_gray_png(path, w, h, &data)
    }
}

pub fn write_gray_png(path: &Path, w: usize, h: usize, data: &[u8]) -> Result<(), InterpError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(f, w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut wr = enc.write_header().map_err(|e| InterpError::Image(e.to_string()))?;
    wr.write_image_data(data).map_err(|e| InterpError::Image(e.to_string()))?;
    Ok(())
}
