use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{init, Graph, Optimizer, OptimizerConfig, ParamTree, Scalar, Tensor, Var};
use crate::graphnet::LEAKY_SLOPE;
use crate::policy::Group;

use super::metrics::{mean_average_precision, MapScore};
use super::samples::{Sample, SampleSet, Split};
use super::InterpError;

/// Output probabilities are kept inside `[P_MIN, 1 − P_MIN]`.
pub const P_MIN: f64 = 1e-7;
const UPSAMPLES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            eval_every: 10,
            seed: 0,
        }
    }
}

/// Decoder geometry derived from the encoding size and the target plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderShape {
    pub enc_dim: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub seed_h: usize,
    pub seed_w: usize,
}

impl DecoderShape {
    pub fn new(enc_dim: usize, channels: usize, h: usize, w: usize) -> Result<Self, InterpError> {
        if enc_dim == 0 || channels == 0 || h == 0 || w == 0 {
            return Err(InterpError::Config("decoder dimensions must be positive".into()));
        }
        let f = 1 << UPSAMPLES;
        Ok(Self {
            enc_dim,
            channels,
            h,
            w,
            seed_h: h.div_ceil(f),
            seed_w: w.div_ceil(f),
        })
    }

    /// Final kernel that trims the upsampled map to `h × w` without padding.
    pub fn out_kernel(&self) -> (usize, usize) {
        let f = 1 << UPSAMPLES;
        (self.seed_h * f - self.h + 1, self.seed_w * f - self.w + 1)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub shape: DecoderShape,
    pub params: ParamTree<f32>,
}

pub fn init_decoder<T: Scalar>(shape: &DecoderShape, seed: u64) -> ParamTree<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamTree::new();
    let c = shape.channels;
    let gain = 2f64.sqrt();
    p.insert(
        "dec.fc.w",
        init::dense_weight(shape.enc_dim, c * shape.seed_h * shape.seed_w, gain, &mut rng),
    );
    p.insert("dec.fc.b", Tensor::zeros(&[c * shape.seed_h * shape.seed_w]));
    for i in 0..UPSAMPLES {
        p.insert(format!("dec.up{}.w", i), init::orthogonal(&[c, c, 3, 3], gain, &mut rng));
        p.insert(format!("dec.up{}.b", i), Tensor::zeros(&[c]));
    }
    let (kh, kw) = shape.out_kernel();
    p.insert("dec.out.w", init::orthogonal(&[1, c, kh, kw], 1.0, &mut rng));
    p.insert("dec.out.b", Tensor::zeros(&[1]));
    p
}

/// Logits `[B, h·w]` for encodings `x` of shape `[B, enc_dim]`.
pub fn decoder_logits<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamTree<T>,
    shape: &DecoderShape,
    x: Var,
) -> Result<Var, InterpError> {
    let bs = g.shape(x)[0];
    let w = g.param_from(params, "dec.fc.w")?;
    let b = g.param_from(params, "dec.fc.b")?;
    let h = g.dense(x, w, b)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let mut h = g.reshape(h, &[bs, shape.channels, shape.seed_h, shape.seed_w])?;
    for i in 0..UPSAMPLES {
        h = g.upsample2(h)?;
        let w = g.param_from(params, &format!("dec.up{}.w", i))?;
        let b = g.param_from(params, &format!("dec.up{}.b", i))?;
        h = g.conv2d(h, w, b, 1)?;
        h = g.leaky_relu(h, LEAKY_SLOPE);
    }
    let w = g.param_from(params, "dec.out.w")?;
    let b = g.param_from(params, "dec.out.b")?;
    let out = g.conv2d(h, w, b, 0)?;
    Ok(g.reshape(out, &[bs, shape.h * shape.w])?)
}

fn batch_input<T: Scalar>(samples: &[&Sample], enc_dim: usize) -> Result<Tensor<T>, InterpError> {
    let data: Vec<f64> = samples.iter().flat_map(|s| s.encoding.iter().map(|&v| v as f64)).collect();
    Ok(Tensor::from_f64(&[samples.len(), enc_dim], &data)?)
}

fn planes<T: Scalar>(samples: &[&Sample], f: impl Fn(&Sample) -> &[u8], px: usize) -> Result<Tensor<T>, InterpError> {
    let data: Vec<f64> = samples.iter().flat_map(|s| f(s).iter().map(|&v| v as f64)).collect();
    Ok(Tensor::from_f64(&[samples.len(), px], &data)?)
}

/// Mean masked binary cross-entropy of one minibatch.
pub fn masked_bce<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamTree<T>,
    shape: &DecoderShape,
    samples: &[&Sample],
) -> Result<Var, InterpError> {
    let px = shape.h * shape.w;
    let x = g.input(batch_input(samples, shape.enc_dim)?);
    let logits = decoder_logits(g, params, shape, x)?;
    let target = planes(samples, |s| &s.target, px)?;
    let mask = planes(samples, |s| &s.mask, px)?;
    Ok(g.bce_with_mask(logits, target, mask)?)
}

fn sigmoid_clamped(l: f64) -> f64 {
    (1.0 / (1.0 + (-l).exp())).clamp(P_MIN, 1.0 - P_MIN)
}

impl Decoder {
    pub fn new(shape: DecoderShape, seed: u64) -> Self {
        Self {
            shape,
            params: init_decoder(&shape, seed),
        }
    }

    /// Pixel probabilities in `(0, 1)` for each encoding.
    pub fn predict(&self, encodings: &[&[f32]]) -> Result<Vec<Vec<f64>>, InterpError> {
        if encodings.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(e) = encodings.iter().find(|e| e.len() != self.shape.enc_dim) {
            return Err(InterpError::Config(format!(
                "encoding of length {}, decoder expects {}",
                e.len(),
                self.shape.enc_dim
            )));
        }
        let data: Vec<f64> = encodings.iter().flat_map(|e| e.iter().map(|&v| v as f64)).collect();
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_f64(&[encodings.len(), self.shape.enc_dim], &data)?);
        let logits = decoder_logits(&mut g, &self.params, &self.shape, x)?;
        let px = self.shape.h * self.shape.w;
        Ok(g.value(logits)
            .to_f64_vec()
            .chunks(px)
            .map(|r| r.iter().map(|&l| sigmoid_clamped(l)).collect())
            .collect())
    }

    pub fn evaluate<'a>(&self, samples: impl Iterator<Item = &'a Sample>) -> Result<MapScore, InterpError> {
        let items: Vec<&Sample> = samples.collect();
        let mut preds = Vec::with_capacity(items.len());
        for chunk in items.chunks(256) {
            let enc: Vec<&[f32]> = chunk.iter().map(|s| s.encoding.as_slice()).collect();
            preds.extend(self.predict(&enc)?);
        }
        Ok(mean_average_precision(
            preds
                .iter()
                .zip(&items)
                .map(|(p, s)| (p.as_slice(), s.target.as_slice(), s.mask.as_slice())),
        ))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), InterpError> {
        let mut t = self.params.clone();
        let s = self.shape;
        let meta = [s.enc_dim, s.channels, s.h, s.w, s.seed_h, s.seed_w].map(|v| v as f64);
        t.insert("meta.shape", Tensor::from_f64(&[6], &meta)?);
        t.save(path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, InterpError> {
        let mut t = ParamTree::<f32>::load(path)?;
        let m = t
            .remove("meta.shape")
            .ok_or_else(|| InterpError::Format("decoder checkpoint without shape".into()))?
            .to_f64_vec();
        let v: Vec<usize> = m.iter().map(|&x| x as usize).collect();
        let shape = DecoderShape::new(v[0], v[1], v[2], v[3])?;
        if (shape.seed_h, shape.seed_w) != (v[4], v[5]) {
            return Err(InterpError::Format("decoder shape mismatch".into()));
        }
        Ok(Self { shape, params: t })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map: Option<f64>,
}

/// mAP per agent group and overall on the test split, plus the training curve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_map: f64,
    pub test_cooperative: MapScore,
    pub test_self_interested: MapScore,
    pub test_overall: MapScore,
}

/// Minibatch Adam on masked BCE over the cooperative training pairs, scoring
/// validation mAP every `eval_every` epochs and after the last one; returns the
/// decoder of the best-scoring evaluation.
pub fn train_decoder(set: &SampleSet, cfg: &DecoderConfig) -> Result<(Decoder, MetricsReport), InterpError> {
    let train: Vec<&Sample> = set
        .split(Split::Train)
        .filter(|s| s.group == Group::Cooperative)
        .collect();
    let val: Vec<&Sample> = set.split(Split::Val).filter(|s| s.group == Group::Cooperative).collect();
    if train.is_empty() || val.is_empty() {
        return Err(InterpError::Empty("train and validation splits must be non-empty".into()));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(InterpError::Config("batch size and eval interval must be positive".into()));
    }
    let shape = DecoderShape::new(set.enc_dim, cfg.channels, set.h, set.w)?;
    let mut dec = Decoder::new(shape, cfg.seed);
    let mut opt = Optimizer::new(OptimizerConfig {
        lr: cfg.lr,
        clip_norm: None,
        ..OptimizerConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xdec0de);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = MetricsReport {
        best_val_map: f64::NEG_INFINITY,
        ..MetricsReport::default()
    };
    let mut best = dec.params.clone();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let mb: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let mut g = Graph::<f32>::new();
            let loss = masked_bce(&mut g, &dec.params, &shape, &mb)?;
            let l = g.value(loss).item() as f64;
            if !l.is_finite() {
                return Err(InterpError::Diverged { epoch });
            }
            let grads = g.param_grads(loss, &dec.params)?;
            opt.descend(&mut dec.params, &grads, |_| true)?;
            loss_sum += l;
            batches += 1;
        }
        let mut rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_map: None,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let m = dec.evaluate(val.iter().copied())?.map;
            rec.val_map = Some(m);
            if m > report.best_val_map {
                report.best_val_map = m;
                report.best_epoch = epoch;
                best = dec.params.clone();
            }
        }
        report.curve.push(rec);
    }
    dec.params = best;
    let test = |g: Option<Group>| dec.evaluate(set.split(Split::Test).filter(move |s| g.map_or(true, |g| s.group == g)));
    report.test_cooperative = test(Some(Group::Cooperative))?;
    report.test_self_interested = test(Some(Group::SelfInterested))?;
    report.test_overall = test(None)?;
    Ok((dec, report))
}
