//! Optimization loop: augmentation, Adam with a cosine-annealed learning
//! rate, validation, checkpoints and metrics.
//!
//! All randomness is drawn from generators keyed by `(seed, purpose, index)`
//! rather than a running stream, so the batch seen at step `s` depends only
//! on the seed and `s`. That is what makes a resumed run identical to an
//! uninterrupted one without persisting generator state.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ops, Tape};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{index_dataset, load_pairs, HazePair};
use crate::error::{Error, Result};
use crate::eval::{psnr, PsnrMode};
use crate::losses::{total_op, LossConfig, PerceptualEncoder};
use crate::network::{Binder, Hdn, ModelConfig, NetworkWeights};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Square training patch side; must be divisible by 4.
    pub crop: usize,
    pub batch: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub lambda: f64,
    pub epsilon: f64,
    /// Validate every this many steps (and after the last); 0 disables.
    pub val_every: u64,
    /// Pairs held out from the end of the training set when `val_dir` is unset.
    pub val_count: usize,
    pub val_dir: Option<PathBuf>,
    /// Checkpoint every this many steps; the final checkpoint is always written.
    pub ckpt_every: u64,
    /// Global gradient-norm clip; off when unset.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop: 240,
            batch: 16,
            lr_init: 2e-4,
            lr_final: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            total_steps: 1000,
            seed: 0,
            lambda: 0.1,
            epsilon: 1e-3,
            val_every: 0,
            val_count: 0,
            val_dir: None,
            ckpt_every: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 4 != 0 {
            return Err(Error::Config(format!("train.crop must be a positive multiple of 4, got {}", self.crop)));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if !(self.lr_final >= 0.0 && self.lr_final <= self.lr_init && self.lr_init.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= train.lr_final <= train.lr_init, got {} and {}",
                self.lr_final, self.lr_init
            )));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("train.{k} must lie in [0, 1), got {v}")));
            }
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("train.grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn loss(&self, use_hcl: bool) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            epsilon: self.epsilon,
            use_hcl,
        }
    }
}

/// `lr_final + (lr_init - lr_final) * (1 + cos(pi * step / total)) / 2`.
///
/// The two endpoints and the midpoint are returned in closed form so they
/// hold exactly rather than up to the rounding of `cos`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    let t = cfg.total_steps;
    if step > t {
        return Err(Error::invalid(format!("step {step} is past total_steps {t}")));
    }
    if step == 0 {
        return Ok(cfg.lr_init);
    }
    if step == t {
        return Ok(cfg.lr_final);
    }
    if 2 * step == t {
        return Ok((cfg.lr_init + cfg.lr_final) / 2.0);
    }
    let c = (std::f64::consts::PI * step as f64 / t as f64).cos();
    Ok(cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + c))
}

/// One row of `metrics.csv`. Training rows leave `val_psnr` empty;
/// validation rows leave the loss columns empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub char: Option<f64>,
    pub hcl: Option<f64>,
    pub total: Option<f64>,
    pub val_psnr: Option<f64>,
    pub wall_ms: u64,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub weights: NetworkWeights,
    pub adam_m: NetworkWeights,
    pub adam_v: NetworkWeights,
    pub seed: u64,
    pub history: Vec<MetricRow>,
}

impl TrainState {
    pub fn new(weights: NetworkWeights, seed: u64) -> Self {
        Self {
            step: 0,
            adam_m: weights.zeros_like(),
            adam_v: weights.zeros_like(),
            weights,
            seed,
            history: Vec::new(),
        }
    }
}

const PURPOSE_EPOCH: u64 = 0x6570_6f63;
const PURPOSE_AUGMENT: u64 = 0x6175_676d;

fn keyed_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.rotate_left(32));
    rng.set_stream(index);
    rng
}

/// Dataset indices of the samples in batch `step`: consecutive slices of
/// per-epoch permutations.
pub fn batch_indices(seed: u64, step: u64, batch: usize, len: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|b| {
            let pos = step * batch as u64 + b;
            let epoch = pos / len as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..len).collect();
                perm.shuffle(&mut keyed_rng(seed, PURPOSE_EPOCH, epoch));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("cached permutation").1[(pos % len as u64) as usize]
        })
        .collect()
}

/// The random choices behind one augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub y0: usize,
    pub x0: usize,
    /// Counter-clockwise quarter turns, 0..4.
    pub quarter_turns: u8,
}

/// Identical random `crop x crop` window and rotation for both images.
/// Images smaller than the crop are reflect-padded first.
pub fn augment_pair(pair: &HazePair, crop: usize, rng: &mut impl Rng) -> Result<(HazePair, AugmentDraw)> {
    pair.hazy.expect_same_shape("augment", &pair.clear)?;
    let s = pair.hazy.shape();
    let (hazy, clear) = if s.h < crop || s.w < crop {
        (pair.hazy.pad_reflect_to(crop, crop), pair.clear.pad_reflect_to(crop, crop))
    } else {
        (pair.hazy.clone(), pair.clear.clone())
    };
    let s = hazy.shape();
    let draw = AugmentDraw {
        y0: rng.random_range(0..=s.h - crop),
        x0: rng.random_range(0..=s.w - crop),
        quarter_turns: rng.random_range(0..4),
    };
    let f = |t: &Tensor| -> Result<Tensor> { Ok(t.crop(draw.y0, draw.x0, crop, crop)?.rot90(draw.quarter_turns)) };
    let mut out = HazePair::new(f(&hazy)?, f(&clear)?)?;
    out.meta = pair.meta.clone();
    Ok((out, draw))
}

/// The augmented batch for `step`, as `(hazy, clear, sample indices)`.
pub fn make_batch(data: &[HazePair], cfg: &TrainConfig, step: u64) -> Result<(Tensor, Tensor, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let idx = batch_indices(cfg.seed, step, cfg.batch, data.len());
    let mut hazy = Vec::with_capacity(idx.len());
    let mut clear = Vec::with_capacity(idx.len());
    for (b, &i) in idx.iter().enumerate() {
        let mut rng = keyed_rng(cfg.seed, PURPOSE_AUGMENT, step * cfg.batch as u64 + b as u64);
        let (p, _) = augment_pair(&data[i], cfg.crop, &mut rng)?;
        hazy.push(p.hazy);
        clear.push(p.clear);
    }
    let stack = |v: &[Tensor]| Tensor::stack(&v.iter().collect::<Vec<_>>());
    Ok((stack(&hazy)?, stack(&clear)?, idx))
}

/// Loss parts and gradients of one batch.
pub struct BatchGrad {
    pub char: f64,
    pub hcl: Option<f64>,
    pub total: f64,
    pub grads: Vec<Tensor>,
}

/// Forward, objective and backward for one batch.
pub fn batch_gradient(
    net: &Hdn,
    weights: &NetworkWeights,
    hazy: &Tensor,
    clear: &Tensor,
    loss: &LossConfig,
    enc: Option<&PerceptualEncoder>,
) -> Result<BatchGrad> {
    let mut t = Tape::new();
    let mut p = Binder::trainable(weights);
    let x = t.constant(hazy.clone());
    let outs = net.forward(&mut t, &mut p, &x)?;
    let gt = t.constant(clear.clone());
    let targets = [1, 2, 4].map(|k| t.area_down(&gt, k));
    let negatives = [1, 2, 4].map(|k| t.area_down(&x, k));
    let nodes = total_op(&mut t, enc, &outs, &targets, &negatives, loss)?;
    let grads = t.backward(nodes.total);
    Ok(BatchGrad {
        char: t.scalar(nodes.char),
        hcl: nodes.hcl.map(|h| t.scalar(h)),
        total: t.scalar(nodes.total),
        grads: p.collect(&grads),
    })
}

/// Shared, read-only inputs of the optimization loop.
pub struct Trainer<'a> {
    pub net: &'a Hdn,
    pub cfg: &'a TrainConfig,
    pub encoder: Option<&'a PerceptualEncoder>,
}

impl Trainer<'_> {
    fn loss_config(&self) -> LossConfig {
        self.cfg.loss(self.net.config().use_hcl)
    }

    /// One optimizer step on the batch for `state.step`. Appends a metrics
    /// row. Non-finite losses, gradients or weights abort with the
    /// offending batch's sample indices and leave `state` untouched.
    pub fn step(&self, state: &mut TrainState, data: &[HazePair]) -> Result<MetricRow> {
        let started = Instant::now();
        let cfg = self.cfg;
        let lr = lr_at(state.step, cfg)?;
        let (hazy, clear, samples) = make_batch(data, cfg, state.step)?;
        let g = batch_gradient(self.net, &state.weights, &hazy, &clear, &self.loss_config(), self.encoder)?;
        let nonfinite = |detail: String| Error::NonFinite {
            step: state.step + 1,
            samples: samples.clone(),
            detail,
        };
        if !g.total.is_finite() {
            return Err(nonfinite(format!("loss char={} hcl={:?} total={}", g.char, g.hcl, g.total)));
        }
        if let Some(((name, _), _)) = state.weights.iter().zip(&g.grads).find(|(_, t)| !t.is_finite()) {
            return Err(nonfinite(format!("gradient of {name}")));
        }
        let mut grads = g.grads;
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.iter().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            if norm > clip {
                let k = clip / norm;
                grads.iter_mut().for_each(|t| *t = t.scale(k));
            }
        }
        let mut next = state.clone();
        adam_update(&mut next, &grads, cfg, lr);
        if let Some((name, _)) = next.weights.iter().find(|(_, t)| !t.is_finite()) {
            return Err(nonfinite(format!("weight {name} after the update")));
        }
        next.step += 1;
        let row = MetricRow {
            step: next.step,
            lr,
            char: Some(g.char),
            hcl: g.hcl,
            total: Some(g.total),
            val_psnr: None,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        next.history.push(row.clone());
        *state = next;
        Ok(row)
    }
}

fn adam_update(state: &mut TrainState, grads: &[Tensor], cfg: &TrainConfig, lr: f64) {
    let t = (state.step + 1) as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let params = state.weights.tensors_mut().zip(state.adam_m.tensors_mut()).zip(state.adam_v.tensors_mut());
    for (((w, m), v), g) in params.zip(grads) {
        let (w, m, v) = (w.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..w.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Mean PSNR of the clamped full-image A1 against the clear images.
pub fn validate(net: &Hdn, weights: &NetworkWeights, pairs: &[HazePair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let [a1, _, _] = net.dehaze_padded(weights, &p.hazy)?;
        total += psnr(&a1.clamp(0.0, 1.0), &p.clear, PsnrMode::Rgb)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Where to start and stop a training run.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint instead of fresh weights.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps (the schedule still spans
    /// `total_steps`).
    pub stop_at: Option<u64>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Train on `dataset_dir` and write checkpoints and `metrics.csv` into
/// `out_dir`.
pub fn run_training(
    model: &ModelConfig,
    cfg: &TrainConfig,
    encoder: Option<&PerceptualEncoder>,
    dataset_dir: &Path,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = Hdn::new(model.clone())?;
    let mut state = match &opts.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.model != *model {
                return Err(Error::Config(format!(
                    "checkpoint {} was written for a different model configuration",
                    p.display()
                )));
            }
            ck.state.weights.check_layout(net.specs())?;
            ck.state
        }
        None => TrainState::new(net.init_weights(), cfg.seed),
    };
    let (train, val) = load_split(cfg, dataset_dir)?;
    if cfg.total_steps > state.step && train.is_empty() {
        return Err(Error::Config(format!("no training pairs under {}", dataset_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics = out_dir.join(METRICS_FILE);
    let trainer = Trainer {
        net: &net,
        cfg,
        encoder,
    };
    let stop = opts.stop_at.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    while state.step < stop {
        let row = match trainer.step(&mut state, &train) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                dump_nonfinite(out_dir, &e);
                write_metrics(&metrics, &state.history)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log::info!(
            "step {} lr {:.3e} char {:.5} hcl {} total {:.5}",
            row.step,
            row.lr,
            row.char.unwrap_or(f64::NAN),
            row.hcl.map_or("-".to_string(), |h| format!("{h:.5}")),
            row.total.unwrap_or(f64::NAN)
        );
        let s = state.step;
        let due = cfg.val_every > 0 && (s % cfg.val_every == 0 || s == cfg.total_steps);
        if due && !val.is_empty() {
            let started = Instant::now();
            let v = validate(&net, &state.weights, &val)?;
            log::info!("step {s} validation psnr {v:.3} dB");
            state.history.push(MetricRow {
                step: s,
                lr: row.lr,
                char: None,
                hcl: None,
                total: None,
                val_psnr: Some(v),
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
        if cfg.ckpt_every > 0 && s % cfg.ckpt_every == 0 && s < stop {
            save_checkpoint(&out_dir.join(format!("step_{s:08}.ckpt")), model, cfg, &state)?;
            write_metrics(&metrics, &state.history)?;
        }
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, model, cfg, &state)?;
    write_metrics(&metrics, &state.history)?;
    Ok(TrainOutcome {
        state,
        final_checkpoint,
        metrics,
    })
}

fn load_split(cfg: &TrainConfig, dataset_dir: &Path) -> Result<(Vec<HazePair>, Vec<HazePair>)> {
    let mut train: Vec<HazePair> = load_pairs(&index_dataset(dataset_dir)?)?.into_iter().map(|(_, p)| p).collect();
    let val = match &cfg.val_dir {
        Some(d) => load_pairs(&index_dataset(d)?)?.into_iter().map(|(_, p)| p).collect(),
        None => {
            let keep = train.len().saturating_sub(cfg.val_count);
            train.split_off(keep)
        }
    };
    Ok((train, val))
}

fn dump_nonfinite(out_dir: &Path, e: &Error) {
    if let Error::NonFinite { step, samples, detail } = e {
        let body = serde_json::json!({ "step": step, "samples": samples, "detail": detail });
        let p = out_dir.join("nonfinite.json");
        if let Err(err) = std::fs::write(&p, body.to_string()) {
            log::error!("could not write {}: {err}", p.display());
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    if rows.is_empty() {
        w.write_record(["step", "lr", "char", "hcl", "total", "val_psnr", "wall_ms"])
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                reason: e.to_string(),
            })?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn cfg(total: u64) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_anchors() {
        let c = cfg(1000);
        assert_eq!(lr_at(0, &c).unwrap(), 2e-4);
        assert_eq!(lr_at(1000, &c).unwrap(), 1e-6);
        assert_eq!(lr_at(500, &c).unwrap(), 1.005e-4);
        assert!(lr_at(1001, &c).is_err());
        let lrs: Vec<f64> = (0..=1000).map(|s| lr_at(s, &c).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(7, s, 2, 10)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(7, 3, 4, 10), batch_indices(7, 3, 4, 10));
    }

    #[test]
    fn augmentation_keeps_pairs_aligned() {
        let mut hazy = Tensor::zeros(Shape::new(1, 3, 12, 10));
        let mut clear = Tensor::zeros(hazy.shape());
        hazy.set(0, 1, 5, 6, 1.0);
        clear.set(0, 1, 5, 6, 1.0);
        let pair = HazePair::new(hazy, clear).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, d) = augment_pair(&pair, 8, &mut rng).unwrap();
            assert_eq!(out.hazy, out.clear);
            let undone = out.hazy.rot90((4 - d.quarter_turns) % 4);
            assert_eq!(undone, pair.hazy.crop(d.y0, d.x0, 8, 8).unwrap());
        }
        let small = HazePair::new(Tensor::zeros(Shape::new(1, 3, 4, 4)), Tensor::zeros(Shape::new(1, 3, 4, 4))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_pair(&small, 8, &mut rng).unwrap().0.hazy.shape(), Shape::new(1, 3, 8, 8));
    }
}
