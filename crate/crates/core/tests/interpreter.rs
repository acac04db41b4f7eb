use std::collections::HashSet;

use advcomm::diffcore::{grad_check, GradCheckConfig, Graph, ParamTree};
use advcomm::gridworld::{EnvConfig, TaskKind};
use advcomm::interpreter::{
    average_precision, collect_samples, init_decoder, masked_bce, mean_average_precision, quantize, reconstruct_grid,
    sample_episode, train_decoder, CollectConfig, Decoder, DecoderConfig, DecoderShape, ImageGrid, InterpError, Sample,
    SampleSet, Split, SplitSizes, TargetKind, P_MIN,
};
use advcomm::policy::{CommMode, Group, ParamAssignment, Policy, PolicyConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn env_cfg() -> EnvConfig {
    EnvConfig {
        width: 8,
        height: 8,
        n_agents: 4,
        obstacle_fraction: 0.2,
        fov_w: 5,
        fov_h: 5,
        comm_range: 4.0,
        horizon: 10,
        si_agent: Some(1),
        ..EnvConfig::for_task(TaskKind::Coverage)
    }
}

fn policy() -> Policy {
    let env = env_cfg();
    let p = Policy::init(PolicyConfig::desk(&env), ParamAssignment::cooperative(4), 3).unwrap();
    p.introduce_self_interested(1, 4).unwrap()
}

fn synthetic(n: usize, enc_dim: usize, split: Split, seed: u64, target: impl Fn(&[f32]) -> Vec<u8>) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let encoding: Vec<f32> = (0..enc_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let target = target(&encoding);
            Sample {
                episode: seed,
                t: i as u32,
                agent: 0,
                group: Group::Cooperative,
                split,
                mask: vec![1; target.len()],
                encoding,
                target,
            }
        })
        .collect()
}

// ---------- average precision ----------

#[test]
fn ap_hand_cases() {
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0], &[1; 4]).unwrap();
    assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(average_precision(&[0.1, 0.9, 0.2], &[0, 1, 0], &[1; 3]), Some(1.0));
    assert_eq!(average_precision(&[0.5, 0.5, 0.5], &[1, 1, 1], &[1; 3]), Some(1.0));
    // a tie with a negative ranks the negative first
    let ap = average_precision(&[0.5, 0.5], &[1, 0], &[1, 1]).unwrap();
    assert!((ap - 0.5).abs() < 1e-12);
    let s = mean_average_precision(
        [(&[0.9, 0.1][..], &[1u8, 0][..], &[1u8, 1][..]), (&[0.9, 0.1][..], &[0u8, 0][..], &[1u8, 1][..])].into_iter(),
    );
    assert_eq!((s.map, s.evaluated, s.skipped), (1.0, 1, 1));
}

// precision over the set of pixels scoring at least as high, for distinct scores
fn ap_oracle(scores: &[f64], targets: &[u8]) -> f64 {
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| targets[i] != 0).collect();
    pos.iter()
        .map(|&p| {
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[p]).collect();
            above.iter().filter(|&&j| targets[j] != 0).count() as f64 / above.len() as f64
        })
        .sum::<f64>()
        / pos.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ap_matches_threshold_oracle(seed in 0u64..100_000, n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let mut targets: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        targets[0] = 1;
        let ap = average_precision(&scores, &targets, &vec![1; n]).unwrap();
        prop_assert!((ap - ap_oracle(&scores, &targets)).abs() < 1e-12);
        prop_assert!(ap > 0.0 && ap <= 1.0);
    }

    #[test]
    fn masked_pixels_do_not_matter(seed in 0u64..100_000, n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let targets: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let mask: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        let (mut s2, mut t2) = (scores.clone(), targets.clone());
        for i in (0..n).filter(|&i| mask[i] == 0) {
            s2[i] = rng.gen();
            t2[i] = 1 - t2[i];
        }
        prop_assert_eq!(average_precision(&scores, &targets, &mask), average_precision(&s2, &t2, &mask));
    }
}

// ---------- sample collection ----------

#[test]
fn every_step_gives_one_pair_per_agent() {
    let p = policy();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (out, steps) = sample_episode(
        &p,
        &env_cfg(),
        TargetKind::FirstMessage,
        CommMode::Full,
        1.0,
        7,
        &mut rng,
        |_| Some(Split::Train),
    )
    .unwrap();
    assert!(steps >= 1 && steps <= 10);
    assert_eq!(out.len(), 4 * steps);
    let full = EnvConfig {
        stall_limit: 1000,
        ..env_cfg()
    };
    let (out, steps) =
        sample_episode(&p, &full, TargetKind::FirstMessage, CommMode::Full, 1.0, 7, &mut rng, |_| Some(Split::Train))
            .unwrap();
    assert_eq!((steps, out.len()), (10, 40));
}

fn collect(sizes: SplitSizes, prob: f64) -> Result<SampleSet, InterpError> {
    collect_samples(
        &policy(),
        &env_cfg(),
        &CollectConfig {
            kind: TargetKind::AgnnOutputCoverage,
            sizes,
            sample_prob: prob,
            mode: CommMode::Full,
            max_steps: 100_000,
            seed: 9,
        },
    )
}

#[test]
fn splits_have_exact_sizes_and_disjoint_steps() {
    let sizes = SplitSizes {
        train: 50,
        val: 13,
        test: 21,
    };
    let set = collect(sizes, 0.3).unwrap();
    let mut keys: Vec<HashSet<(u64, u32)>> = vec![HashSet::new(); 3];
    for s in Split::ALL {
        assert_eq!(set.count(s, Group::Cooperative), sizes.get(s));
        for x in set.split(s) {
            keys[s as usize].insert((x.episode, x.t));
        }
    }
    for a in 0..3 {
        for b in a + 1..3 {
            assert!(keys[a].is_disjoint(&keys[b]));
        }
    }
    assert_eq!(set.count(Split::Train, Group::SelfInterested), 0);
    assert!(set.count(Split::Test, Group::SelfInterested) > 0);
    assert!(set.samples.iter().all(|s| s.target.len() == 25 && s.mask.len() == 25 && s.encoding.len() == set.enc_dim));
    assert!(matches!(collect(sizes, 0.0), Err(InterpError::Empty(_))));
}

#[test]
fn sample_file_round_trips() {
    let set = collect(SplitSizes { train: 10, val: 5, test: 5 }, 0.5).unwrap();
    let mut buf = Vec::new();
    set.write_to(&mut buf).unwrap();
    assert_eq!(SampleSet::read_from(&mut buf.as_slice()).unwrap(), set);
    assert!(SampleSet::read_from(&mut &buf[..buf.len() - 3]).is_err());
    buf[0] = b'X';
    assert!(SampleSet::read_from(&mut buf.as_slice()).is_err());
}

// ---------- decoder ----------

#[test]
fn decoder_gradients() {
    let shape = DecoderShape::new(6, 4, 5, 5).unwrap();
    let params: ParamTree<f64> = init_decoder(&shape, 2);
    let mut samples = synthetic(3, 6, Split::Train, 3, |e| (0..25).map(|i| u8::from(e[i % 6] > 0.0)).collect());
    samples[1].mask[3] = 0;
    let refs: Vec<&Sample> = samples.iter().collect();
    let r = grad_check(
        &params,
        |g: &mut Graph<f64>, t| masked_bce(g, t, &shape, &refs).map_err(|e| advcomm::diffcore::DiffError::Format(e.to_string())),
        &GradCheckConfig {
            skip_kinks: true,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(r.passed, "{:?}", r.per_param);
    let (checked, skipped): (usize, usize) = r.per_param.iter().fold((0, 0), |a, c| (a.0 + c.checked, a.1 + c.skipped));
    assert!(checked > 4 * skipped, "{} checked, {} skipped", checked, skipped);
}

#[test]
fn predictions_are_strict_probabilities() {
    for (h, w) in [(5, 5), (7, 7), (1, 1), (4, 6)] {
        let shape = DecoderShape::new(8, 4, h, w).unwrap();
        let mut dec = Decoder::new(shape, 1);
        // push logits far into saturation
        for (_, t) in dec.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 400.0);
        }
        let enc = vec![1.0f32; 8];
        let p = dec.predict(&[&enc, &vec![-1.0; 8]]).unwrap();
        assert_eq!(p[0].len(), h * w);
        assert!(p.iter().flatten().all(|&v| v >= P_MIN && v <= 1.0 - P_MIN));
    }
    assert!(Decoder::new(DecoderShape::new(8, 4, 5, 5).unwrap(), 1).predict(&[&[0.0; 3]]).is_err());
}

fn set_of(samples: Vec<Sample>) -> SampleSet {
    SampleSet {
        kind: TargetKind::FirstMessage,
        enc_dim: samples[0].encoding.len(),
        h: 5,
        w: 5,
        samples,
    }
}

#[test]
fn constant_target_is_learned() {
    let mut samples = synthetic(64, 6, Split::Train, 1, |_| vec![0; 25]);
    samples.extend(synthetic(16, 6, Split::Val, 2, |_| {
        let mut t = vec![0; 25];
        t[0] = 1;
        t
    }));
    samples.extend(synthetic(8, 6, Split::Test, 3, |_| vec![0; 25]));
    let cfg = DecoderConfig {
        epochs: 40,
        batch_size: 16,
        lr: 3e-3,
        eval_every: 10,
        ..DecoderConfig::default()
    };
    let set = set_of(samples);
    let (dec, report) = train_decoder(&set, &cfg).unwrap();
    let enc: Vec<&[f32]> = set.split(Split::Test).map(|s| s.encoding.as_slice()).collect();
    let p = dec.predict(&enc).unwrap();
    let mean = p.iter().flatten().sum::<f64>() / (p.len() * 25) as f64;
    assert!(mean < 0.05, "mean prediction {}", mean);
    assert!(report.curve.last().unwrap().train_loss < report.curve[0].train_loss);
    assert_eq!(report.test_cooperative.evaluated, 0);
}

#[test]
fn fully_masked_batch_is_inert() {
    let shape = DecoderShape::new(6, 4, 5, 5).unwrap();
    let params: ParamTree<f32> = init_decoder(&shape, 5);
    let mut samples = synthetic(4, 6, Split::Train, 4, |_| vec![1; 25]);
    samples.iter_mut().for_each(|s| s.mask = vec![0; 25]);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut g = Graph::<f32>::new();
    let loss = masked_bce(&mut g, &params, &shape, &refs).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
    let grads = g.param_grads(loss, &params).unwrap();
    assert!(grads.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn best_validation_checkpoint_is_returned() {
    let rule = |e: &[f32]| (0..25).map(|i| u8::from(e[i % 6] > 0.2)).collect::<Vec<u8>>();
    let mut samples = synthetic(96, 6, Split::Train, 11, rule);
    samples.extend(synthetic(24, 6, Split::Val, 12, rule));
    samples.extend(synthetic(24, 6, Split::Test, 13, rule));
    let set = set_of(samples);
    let cfg = DecoderConfig {
        epochs: 12,
        batch_size: 16,
        eval_every: 3,
        ..DecoderConfig::default()
    };
    let (dec, report) = train_decoder(&set, &cfg).unwrap();
    let scored: Vec<(usize, f64)> = report.curve.iter().filter_map(|r| r.val_map.map(|m| (r.epoch, m))).collect();
    assert_eq!(scored.iter().map(|s| s.0).collect::<Vec<_>>(), vec![3, 6, 9, 12]);
    let best = scored.iter().cloned().fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    assert_eq!((report.best_epoch, report.best_val_map), best);
    let again = dec.evaluate(set.split(Split::Val)).unwrap().map;
    assert!((again - best.1).abs() < 1e-9);
    assert!(report.test_overall.evaluated > 0);
}

// ---------- image grid ----------

#[test]
fn quantization_error_is_half_a_level() {
    for i in 0..=10_000 {
        let p = i as f64 / 10_000.0;
        assert!((quantize(p) as f64 / 255.0 - p).abs() <= 1.0 / 510.0 + 1e-12);
    }
    assert_eq!((quantize(-1.0), quantize(2.0)), (0, 255));
}

#[test]
fn grid_has_one_pair_of_panels_per_agent_and_step() {
    let p = policy();
    let shape = DecoderShape::new(p.config.features, 4, 5, 5).unwrap();
    let dec = Decoder::new(shape, 1);
    let grid = reconstruct_grid(&dec, &p, &env_cfg(), TargetKind::AgnnOutputCoverage, CommMode::Full, 3, &[0, 2, 4]).unwrap();
    assert_eq!((grid.rows, grid.cols), (3, 8));
    assert_eq!(grid.panels.len(), 3 * 8);
    assert!(grid.panels.iter().filter(|q| q.col < 2).all(|q| q.agent == 1));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.png");
    grid.write_png(&path).unwrap();
    let (w, h, _) = grid.raster();
    let dec = png::Decoder::new(std::fs::File::open(&path).unwrap());
    let info = dec.read_info().unwrap().info().clone();
    assert_eq!((info.width as usize, info.height as usize), (w, h));
}

#[test]
fn empty_grid_is_still_an_image() {
    let grid = ImageGrid {
        panel_h: 5,
        panel_w: 5,
        rows: 0,
        cols: 0,
        panels: vec![],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.png");
    grid.write_png(&path).unwrap();
    assert!(png::Decoder::new(std::fs::File::open(&path).unwrap()).read_info().is_ok());
}
