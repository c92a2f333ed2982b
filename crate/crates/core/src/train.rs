//! Optimizer, schedule and the training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stream, Corpus, NoiseSpec, Preprocessor, Snr, Split, Stage};
use crate::error::{Error, Result};
use crate::model::{AvsrModel, Sample};
use crate::tensor::{Float, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate; `None` takes the task default.
    pub lr_peak: Option<f64>,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub warmup_fraction: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    /// Time-mask ratio applied to both streams during training.
    pub time_mask_rho: f64,
    /// Babble augmentation; `None` trains on clean audio only.
    pub noise: Option<NoiseSpec>,
    /// Utterances used to track the clean loss before and after each epoch.
    pub probe_utterances: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: None,
            weight_decay: 0.1,
            epochs: 10,
            batch_size: 4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            warmup_fraction: 0.03,
            grad_clip_norm: None,
            seed: 0,
            time_mask_rho: 0.1,
            noise: Some(NoiseSpec::default()),
            probe_utterances: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if let Some(lr) = self.lr_peak {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("lr_peak must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.time_mask_rho) {
            return Err(Error::Config("time_mask_rho must lie in [0, 1)".into()));
        }
        if let Some(n) = &self.noise {
            if n.snr_levels_db.is_empty() {
                return Err(Error::Config("noise augmentation needs at least one SNR level".into()));
            }
        }
        Ok(())
    }
}

/// Linear warmup over `round(warmup_fraction·total)` steps, then cosine
/// decay from `lr_peak` to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_peak: f64, warmup_fraction: f64) -> f64 {
    let step = step.min(total);
    let warm = (warmup_fraction * total as f64).round() as usize;
    if step < warm {
        return lr_peak * step as f64 / warm as f64;
    }
    if total == warm {
        return lr_peak;
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    (lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moment buffers for a fixed set of trainable parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    /// Registers `names`; each must be a trainable parameter of `store`.
    pub fn new<F: Float>(store: &ParamStore<F>, names: &[String]) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for n in names {
            let p = store.param(n)?;
            if !p.trainable() {
                return Err(Error::Policy(format!("optimizer refuses frozen parameter {n}")));
            }
            let k = p.tensor.numel();
            moments.insert(n.clone(), (vec![0.0; k], vec![0.0; k]));
        }
        Ok(AdamState { t: 0, moments })
    }
}

/// One decoupled-weight-decay Adam update:
/// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`. Missing gradients count as zero.
pub fn adamw_step<F: Float>(store: &mut ParamStore<F>, state: &mut AdamState, cfg: &AdamWConfig, lr: f64) -> Result<()> {
    for name in state.moments.keys() {
        if !store.param(name)?.trainable() {
            return Err(Error::Policy(format!("optimizer step on frozen parameter {name}")));
        }
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, (m, v)) in state.moments.iter_mut() {
        let p = store.get_mut(name)?;
        let grad: Vec<f64> = match &p.grad {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; m.len()],
        };
        for (i, th) in p.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            let old = th.as_f64();
            *th = F::from_f64c(old - lr * mh / (vh.sqrt() + cfg.eps) - lr * cfg.weight_decay * old);
        }
    }
    Ok(())
}

fn clip_grads<F: Float>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let norm = store.global_grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64c(max_norm / norm);
        for (_, p) in store.iter_mut() {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the epoch's training batches (augmented inputs).
    pub train_loss: f64,
    /// Clean loss on the probe subset after the epoch.
    pub probe_loss: f64,
    pub lr_end: f64,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub lr_peak: f64,
    pub initial_probe_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub trainable_names: Vec<String>,
    pub trainable_count: usize,
    pub analytic_breakdown: Vec<(String, usize)>,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn frozen_unchanged(&self) -> bool {
        self.frozen_digest_before == self.frozen_digest_after
    }
}

/// Features, responses and ids of a batch, owned so samples can borrow them.
struct Batch {
    audio: Vec<Tensor<f32>>,
    video: Vec<Tensor<f32>>,
    responses: Vec<Vec<usize>>,
}

impl Batch {
    fn samples(&self) -> Vec<Sample<'_>> {
        (0..self.responses.len())
            .map(|i| Sample {
                audio: Some(&self.audio[i]),
                video: Some(&self.video[i]),
                response: &self.responses[i],
            })
            .collect()
    }
}

const TRAIN_AUG: u64 = 11;

fn build_batch<F: Float, R: Rng>(
    model: &AvsrModel<F>,
    corpus: &Corpus,
    idx: &[usize],
    pre: &Preprocessor,
    snr_for: impl Fn(&mut R) -> Snr,
    rng_for: impl Fn(usize) -> R,
) -> Result<Batch> {
    let mut b = Batch {
        audio: Vec::with_capacity(idx.len()),
        video: Vec::with_capacity(idx.len()),
        responses: Vec::with_capacity(idx.len()),
    };
    for &i in idx {
        let mut rng = rng_for(i);
        let snr = snr_for(&mut rng);
        let (a, v) = pre.prepare(corpus, i, snr, &mut rng)?;
        b.audio.push(a);
        b.video.push(v);
        b.responses.push(model.vocab.response_ids(&corpus.utterances[i].words)?);
    }
    Ok(b)
}

/// Mean clean loss over `idx`, evaluated in batches without gradients.
pub fn mean_loss<F: Float>(model: &AvsrModel<F>, corpus: &Corpus, idx: &[usize], batch_size: usize) -> Result<f64> {
    let pre = Preprocessor::new(Stage::Eval, 0.0, 5);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = build_batch(model, corpus, chunk, &pre, |_| Snr::CLEAN, |i| stream(0, TRAIN_AUG, i as u64))?;
        let mut tape = Tape::no_grad();
        let l = model.loss(&mut tape, &b.samples())?;
        let n: usize = b.responses.iter().map(Vec::len).sum();
        total += tape.value(l)[0].as_f64() * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Trains the projectors and adapters of `model` on the train split.
///
/// Deterministic for a fixed `(model seed, cfg.seed, corpus)`. Aborts with
/// [`Error::NonFinite`] if the loss or gradient norm stops being finite.
pub fn train<F: Float>(
    model: &mut AvsrModel<F>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let trainable_names = model.audit_trainable()?;
    let frozen_digest_before = model.store.frozen_digest();
    let lr_peak = cfg.lr_peak.unwrap_or_else(|| model.task().default_lr());
    let opt = AdamWConfig {
        betas: cfg.betas,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    let mut state = AdamState::new(&model.store, &trainable_names)?;

    let train_idx: Vec<usize> = corpus.split(Split::Train).map(|(i, _)| i).collect();
    if train_idx.is_empty() {
        return Err(Error::Config("corpus has no training utterances".into()));
    }
    let probe: Vec<usize> = train_idx.iter().copied().take(cfg.probe_utterances.max(1)).collect();
    let initial_probe_loss = mean_loss(model, corpus, &probe, cfg.batch_size)?;

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let pre = Preprocessor::new(
        Stage::Train,
        cfg.time_mask_rho,
        cfg.noise.as_ref().map_or(5, |n| n.babble_speakers),
    );
    let levels: Vec<Snr> = cfg.noise.as_ref().map_or_else(|| vec![Snr::CLEAN], |n| n.snr_levels_db.clone());

    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut last_finite = initial_probe_loss;
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut stream(cfg.seed, TRAIN_AUG, (epoch as u64) << 32));
        let mut sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let aug_seed = cfg.seed ^ ((epoch as u64 + 1) << 40);
            let b = build_batch(
                model,
                corpus,
                chunk,
                &pre,
                |r: &mut rand_chacha::ChaCha8Rng| levels[r.random_range(0..levels.len())],
                |i| stream(aug_seed, TRAIN_AUG, i as u64),
            )?;
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &b.samples())?;
            let lv = tape.value(loss)[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {lv} at epoch {epoch}, step {step}; last finite loss {last_finite:.6}; lr {lr:.3e}"
                )));
            }
            last_finite = lv;
            tape.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate_grads(&tape)?;
            drop(tape);
            let norm = match cfg.grad_clip_norm {
                Some(c) => clip_grads(&mut model.store, c),
                None => model.store.global_grad_norm(),
            };
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient norm {norm} at epoch {epoch}, step {step}; loss {lv:.6}"
                )));
            }
            step += 1;
            lr = cosine_lr(step, total, lr_peak, cfg.warmup_fraction);
            adamw_step(&mut model.store, &mut state, &opt, lr)?;
            sum += lv;
        }
        model.store.zero_grad();
        let probe_loss = mean_loss(model, corpus, &probe, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: sum / steps_per_epoch as f64,
            probe_loss,
            lr_end: lr,
            steps: step,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        epochs.push(rec);
    }

    let frozen_digest_after = model.store.frozen_digest();
    Ok(TrainReport {
        lr_peak,
        initial_probe_loss,
        epochs,
        steps: step,
        trainable_count: model.store.count_trainable(),
        analytic_breakdown: model.cfg.trainable_breakdown()?,
        trainable_names,
        frozen_digest_before,
        frozen_digest_after,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(vals: &[f64], trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[vals.len()], vals).unwrap(), trainable).unwrap();
        s
    }

    #[test]
    fn single_step_closed_form() {
        let cfg = AdamWConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let theta = [0.5, -1.0, 2.0];
        let g = [0.3, -2.0, 1e-3];
        let mut s = store_with(&theta, true);
        s.get_mut("w").unwrap().grad = Some(g.to_vec());
        let mut st = AdamState::new(&s, &["w".into()]).unwrap();
        adamw_step(&mut s, &mut st, &cfg, 0.01).unwrap();
        // Bias correction makes m̂ = g and v̂ = g², so the step is lr·g/(|g|+eps).
        for i in 0..3 {
            let want = theta[i] - 0.01 * g[i] / (g[i].abs() + 1e-8);
            assert!((s.get("w").unwrap().data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = AdamWConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut s = store_with(&[2.0], true);
        let mut st = AdamState::new(&s, &["w".into()]).unwrap();
        adamw_step(&mut s, &mut st, &cfg, 0.5).unwrap();
        assert!((s.get("w").unwrap().data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_fixed_point() {
        let cfg = AdamWConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut s = store_with(&[1.5, -0.25], true);
        s.get_mut("w").unwrap().grad = Some(vec![0.0, 0.0]);
        let mut st = AdamState::new(&s, &["w".into()]).unwrap();
        for _ in 0..10 {
            adamw_step(&mut s, &mut st, &cfg, 0.1).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data(), &[1.5, -0.25]);
    }

    #[test]
    fn frozen_parameters_rejected() {
        let s = store_with(&[1.0], false);
        assert!(matches!(AdamState::new(&s, &["w".into()]), Err(Error::Policy(_))));
        let mut s = store_with(&[1.0], true);
        let mut st = AdamState::new(&s, &["w".into()]).unwrap();
        s.set_trainable("w", false).unwrap();
        let cfg = AdamWConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        };
        assert!(matches!(adamw_step(&mut s, &mut st, &cfg, 0.1), Err(Error::Policy(_))));
    }

    #[test]
    fn schedule_boundaries() {
        let (total, peak, wf) = (1000, 1e-3, 0.03);
        assert_eq!(cosine_lr(0, total, peak, wf), 0.0);
        assert_eq!(cosine_lr(30, total, peak, wf), peak);
        assert!(cosine_lr(total, total, peak, wf).abs() < 1e-12);
        let mid = 30 + (total - 30) / 2;
        assert!((cosine_lr(mid, total, peak, wf) - peak / 2.0).abs() < 1e-12);
        assert!((cosine_lr(15, total, peak, wf) - peak / 2.0).abs() < 1e-15);
        for s in 0..=total {
            let lr = cosine_lr(s, total, peak, wf);
            assert!((0.0..=peak).contains(&lr));
        }
        assert_eq!(cosine_lr(0, 10, 1.0, 0.0), 1.0);
    }
}
