//! SGD training with momentum, weight decay and a cosine learning rate.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, NetGraph, ParamRole};
use crate::erf::Normalization;
use crate::error::{Error, Result};
use crate::micro::dataset::{MicroDataset, MicroSplit};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hflip: bool,
    pub normalization: Normalization,
    /// Running-statistics momentum of batch norm.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            hflip: true,
            normalization: Normalization::imagenet(),
            bn_momentum: 0.1,
        }
    }
}

/// Cosine annealing per optimizer step: `lr0` at step 0, zero at `total`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Learning rate of the first step of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub records: Vec<EpochRecord>,
    /// Names of the parameters weight decay was applied to.
    pub decayed: Vec<String>,
    pub wall_time_s: f64,
    pub weights: Option<String>,
}

impl TrainLog {
    /// The per-epoch table; wall time is left out so reruns compare equal.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,test_acc,lr\n");
        for r in &self.records {
            s.push_str(&format!("{},{:?},{:?},{:?},{:?}\n", r.epoch, r.train_loss, r.train_acc, r.test_acc, r.lr));
        }
        s
    }
}

/// First 1-indexed epoch whose test accuracy strictly exceeds `threshold`,
/// or the configured epoch budget if none does.
pub fn epochs_to_threshold(log: &TrainLog, threshold: f64) -> usize {
    log.records.iter().find(|r| r.test_acc > threshold).map_or(log.config.epochs, |r| r.epoch)
}

/// Converts a split to normalised 1x3xHxW tensors.
pub fn split_tensors(split: &MicroSplit, norm: &Normalization) -> Vec<Tensor4> {
    split.samples.iter().map(|s| rgb_tensor(&s.rgb, split.height, split.width, norm, false)).collect()
}

fn rgb_tensor(rgb: &[u8], h: usize, w: usize, norm: &Normalization, flip: bool) -> Tensor4 {
    let mut t = Tensor4::from_fn([1, 3, h, w], |_, c, y, x| {
        let sx = if flip { w - 1 - x } else { x };
        rgb[(y * w + sx) * 3 + c] as f64 / 255.0
    });
    norm.apply(&mut t);
    t
}

/// Mean cross-entropy of softmax(logits) and its gradient w.r.t. the logits;
/// also the number of correct argmax predictions.
pub fn softmax_cross_entropy(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4, usize)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 || s.n != labels.len() {
        return Err(Error::InvalidArgument(format!("logits {s} do not match {} labels", labels.len())));
    }
    let k = s.c;
    let mut grad = Tensor4::zeros(s);
    let mut loss = 0.0;
    let mut correct = 0;
    let inv_n = 1.0 / s.n as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidArgument(format!("label {label} out of range for {k} logits")));
        }
        let z = logits.item(n);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        loss += m + sum.ln() - z[label];
        if argmax(z) == label {
            correct += 1;
        }
        let g = grad.item_mut(n);
        for c in 0..k {
            g[c] = ((z[c] - m).exp() / sum - f64::from(c == label)) * inv_n;
        }
    }
    Ok((loss * inv_n, grad, correct))
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `images` classified correctly in eval mode.
pub fn evaluate(graph: &NetGraph, images: &[Tensor4], labels: &[usize], batch: usize) -> Result<f64> {
    let mut correct = 0;
    for (xs, ys) in images.chunks(batch.max(1)).zip(labels.chunks(batch.max(1))) {
        let refs: Vec<&Tensor4> = xs.iter().collect();
        let acts = graph.forward(&Tensor4::stack(&refs)?, Mode::Eval)?;
        let out = acts.output();
        correct += ys.iter().enumerate().filter(|(n, &y)| argmax(out.item(*n)) == y).count();
    }
    Ok(correct as f64 / images.len().max(1) as f64)
}

/// Trains `graph` in place on the train split and evaluates on the test
/// split after every epoch.
pub fn train(graph: &mut NetGraph, data: &MicroDataset, cfg: &TrainConfig) -> Result<TrainLog> {
    let started = Instant::now();
    let topo = graph.topology();
    let out = &topo.nodes()[topo.output()];
    if out.out != [2, 1, 1] {
        return Err(Error::shape(&out.name, format!("micro task needs a 2-logit head, got {:?}", out.out)));
    }
    if cfg.batch_size == 0 || data.train.is_empty() {
        return Err(Error::InvalidArgument("batch size and training set must be nonempty".into()));
    }
    let (h, w) = (data.train.height, data.train.width);
    let norm = &cfg.normalization;
    let test_x = split_tensors(&data.test, norm);
    let test_y: Vec<usize> = data.test.samples.iter().map(|s| s.label).collect();

    let n = data.train.len();
    // A trailing batch of one has no batch variance; it is dropped.
    let steps_per_epoch = n / cfg.batch_size + usize::from(n % cfg.batch_size > 1);
    let total_steps = steps_per_epoch * cfg.epochs;

    let decayed: Vec<String> =
        graph.param_slots().into_iter().filter(|s| s.role == ParamRole::Weight).map(|s| s.name).collect();
    let mut velocity: Vec<Vec<f64>> = graph.param_slots().iter().map(|s| vec![0.0; s.values.len()]).collect();
    let mut fresh = true;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let epoch_lr = cosine_lr(cfg.lr, step, total_steps);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).take(steps_per_epoch).enumerate() {
            let lr = cosine_lr(cfg.lr, step, total_steps);
            let xs: Vec<Tensor4> = idx
                .iter()
                .map(|&i| {
                    let flip = cfg.hflip && rng.random::<bool>();
                    rgb_tensor(&data.train.samples[i].rgb, h, w, norm, flip)
                })
                .collect();
            let ys: Vec<usize> = idx.iter().map(|&i| data.train.samples[i].label).collect();
            let refs: Vec<&Tensor4> = xs.iter().collect();
            let acts = graph.forward(&Tensor4::stack(&refs)?, Mode::Train)?;
            let (loss, seed, ok) = softmax_cross_entropy(acts.output(), &ys)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {}, lr {lr:e}",
                    b + 1
                )));
            }
            let grads = graph.backward(&acts, vec![(graph.topology().output(), seed)], true)?;
            graph.update_running_stats(&acts, cfg.bn_momentum);
            let gslices = grads.param_slices();
            for ((slot, g), v) in graph.param_slots().into_iter().zip(gslices).zip(velocity.iter_mut()) {
                let wd = if slot.role == ParamRole::Weight { cfg.weight_decay } else { 0.0 };
                for ((p, &gi), vi) in slot.values.iter_mut().zip(g).zip(v.iter_mut()) {
                    let d = gi + wd * *p;
                    *vi = if fresh { d } else { cfg.momentum * *vi + d };
                    *p -= lr * *vi;
                }
            }
            fresh = false;
            loss_sum += loss * ys.len() as f64;
            correct += ok;
            seen += ys.len();
            step += 1;
        }
        let test_acc = evaluate(graph, &test_x, &test_y, 100)?;
        log::debug!("epoch {epoch}: loss {:.4} test {:.3}", loss_sum / seen as f64, test_acc);
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc,
            lr: epoch_lr,
        });
    }
    Ok(TrainLog {
        config: cfg.clone(),
        records,
        decayed,
        wall_time_s: started.elapsed().as_secs_f64(),
        weights: None,
    })
}
