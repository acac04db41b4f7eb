//! Central finite-difference verification of reverse-mode gradients, run in `f64`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamTree;
use super::DiffError;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub path: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinates left out because an activation kink lies within `±h`.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen coordinates overall; `None`
    /// checks every coordinate.
    pub sample: Option<usize>,
    pub seed: u64,
    /// Gradients smaller than this on both sides are compared absolutely.
    pub floor: f64,
    /// Leave out coordinates whose `±h` probes put some relu input on
    /// different sides of zero, where central differences are meaningless.
    pub skip_kinks: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            tol: 1e-4,
            sample: None,
            seed: 0,
            floor: 1e-6,
            skip_kinks: false,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `graph.param_grads` against central differences of `loss_fn`.
pub fn grad_check<F>(params: &ParamTree<f64>, loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<f64>, &ParamTree<f64>) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let analytic = g.param_grads(loss, params)?;

    let eval = |p: &ParamTree<f64>| -> Result<(f64, Vec<bool>), DiffError> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, p)?;
        let signs = if cfg.skip_kinks { g.kink_signs() } else { Vec::new() };
        Ok((g.value(l).item(), signs))
    };

    let mut coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k.clone(), i)))
        .collect();
    if let Some(n) = cfg.sample {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        coords.shuffle(&mut rng);
        coords.truncate(n);
        coords.sort();
    }

    let mut per_param: Vec<ParamCheck> = Vec::new();
    let mut work = params.clone();
    for (path, i) in coords {
        let orig = work.get(&path).expect("path from params").data()[i];
        work.get_mut(&path).expect("path").data_mut()[i] = orig + cfg.h;
        let (up, up_signs) = eval(&work)?;
        work.get_mut(&path).expect("path").data_mut()[i] = orig - cfg.h;
        let (down, down_signs) = eval(&work)?;
        work.get_mut(&path).expect("path").data_mut()[i] = orig;
        if per_param.last().map_or(true, |pc| pc.path != path) {
            per_param.push(ParamCheck {
                path: path.clone(),
                checked: 0,
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                skipped: 0,
            });
        }
        let pc = per_param.last_mut().expect("pushed above");
        if up_signs != down_signs {
            pc.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * cfg.h);
        let a = analytic.get(&path).expect("same structure").data()[i];
        pc.checked += 1;
        pc.max_rel_err = pc.max_rel_err.max(rel_err(a, numeric, cfg.floor));
        pc.max_abs_err = pc.max_abs_err.max((a - numeric).abs());
    }
    let max_rel_err = per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err < cfg.tol,
        per_param,
        max_rel_err,
        tol: cfg.tol,
    })
}
