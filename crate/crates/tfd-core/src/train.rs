//! Tri-objective training: L1 reconstruction, noise classification, and
//! feature consistency, optimized with bias-corrected Adam under cosine
//! annealing. Denoising is schedule-gated: the per-sample confidence gate
//! only arms once the detector's running accuracy (EMA, decay 0.99) exceeds
//! the threshold, and stays armed from then on.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::image::{to_tensor, PatchSet};
use crate::math;
use crate::model::TfdNet;
use crate::rng::Rng;
use crate::tensor::{stack_batch, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lambda_cls: f64,
    pub lambda_feat: f64,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub iters: usize,
    pub gate_threshold: f64,
    pub seed: u64,
    pub eps_adam: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_cls: 0.10,
            lambda_feat: 0.01,
            lr0: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch: 8,
            iters: 2000,
            gate_threshold: 0.75,
            seed: 0,
            eps_adam: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cls < 0.0 || self.lambda_feat < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(0.0 < self.gate_threshold && self.gate_threshold < 1.0) {
            return Err(Error::invalid("gate threshold must lie in (0, 1)"));
        }
        if self.batch == 0 || self.iters == 0 {
            return Err(Error::invalid("batch and iters must be positive"));
        }
        Ok(())
    }
}

/// Optimizer moments, step counter, and the gate-activation schedule flag.
pub struct TrainState {
    pub step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub gate_active: bool,
    /// Exponential running average (decay 0.99) of detector batch accuracy.
    pub det_acc_ema: f64,
}

impl TrainState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, t, _)| Tensor::zeros(t.shape())).collect();
        let v = store.iter().map(|(_, t, _)| Tensor::zeros(t.shape())).collect();
        TrainState {
            step: 0,
            m,
            v,
            gate_active: false,
            det_acc_ema: 0.0,
        }
    }
}

/// Cosine-annealed learning rate: lr0 * 0.5 * (1 + cos(pi * step / iters)).
pub fn cosine_lr(cfg: &TrainConfig, step: usize) -> f64 {
    cfg.lr0 * 0.5 * (1.0 + math::cos(math::PI * step as f64 / cfg.iters as f64))
}

/// Mean absolute error between the SR output and its target.
pub fn loss_rec(sr: &Var, hr: &Var) -> Result<Var> {
    Ok(sr.sub(hr)?.abs().mean())
}

/// Mean cross-entropy of detector logits against noise labels.
pub fn loss_cls(logits: &Var, labels: &[usize]) -> Result<Var> {
    logits.cross_entropy(labels)
}

/// Mean absolute error between denoised features and clean references.
pub fn loss_feat(h_denoised: &Var, h_ref: &Var) -> Result<Var> {
    Ok(h_denoised.sub(h_ref)?.abs().mean())
}

/// Scalar composition of the objective: rec + lambda_cls * cls, plus
/// lambda_feat * feat only for denoised samples once the gate schedule is
/// active. The classification term is always on so the detector can train
/// before the gate arms.
pub fn total_loss(
    rec: f64,
    cls: f64,
    feat: f64,
    cfg: &TrainConfig,
    gate_active: bool,
    sample_is_denoised: bool,
) -> f64 {
    let feat_term = if gate_active && sample_is_denoised {
        cfg.lambda_feat * feat
    } else {
        0.0
    };
    rec + cfg.lambda_cls * cls + feat_term
}

/// Bias-corrected Adam update over every parameter, then gradient reset.
pub fn adam_step(store: &mut ParamStore, state: &mut TrainState, cfg: &TrainConfig) {
    let lr = cosine_lr(cfg, state.step);
    let t = (state.step + 1) as f64;
    let bc1 = 1.0 - math::pow(cfg.beta1, t);
    let bc2 = 1.0 - math::pow(cfg.beta2, t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = store.grad(id).clone();
        {
            let m = state.m[i].data_mut();
            for (mv, &gv) in m.iter_mut().zip(g.data()) {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            }
        }
        {
            let v = state.v[i].data_mut();
            for (vv, &gv) in v.iter_mut().zip(g.data()) {
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            }
        }
        let mut value = store.value(id).clone();
        {
            let p = value.data_mut();
            let m = state.m[i].data();
            let v = state.v[i].data();
            for k in 0..p.len() {
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (math::sqrt(v_hat) + cfg.eps_adam);
            }
        }
        store.set_value(id, value);
    }
    store.zero_grad();
    state.step += 1;
}

/// One line of the training log.
#[derive(Clone, Copy, Debug)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub loss_rec: f64,
    pub loss_cls: f64,
    pub loss_feat: f64,
    pub det_acc: f64,
    pub gate: bool,
}

/// Deterministic shuffled batch sampler: a fresh permutation per epoch,
/// partial tails dropped.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchSampler {
            order: (0..n).collect(),
            pos: n, // force an initial shuffle
            batch,
            rng: Rng::stream(seed, 0x5A5A),
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        b
    }
}

/// Train in place, logging one history row per step. The observer runs
/// before each step with the current step index, and once more after the
/// final step; probes hook in there.
pub fn run_training_observed(
    net: &mut TfdNet,
    data: &PatchSet,
    cfg: &TrainConfig,
    mut observer: impl FnMut(usize, &TfdNet),
) -> Result<Vec<HistoryRow>> {
    cfg.validate()?;
    data.validate()?;
    if data.pairs.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.batch > data.pairs.len() {
        return Err(Error::Data(alloc::format!(
            "batch {} exceeds dataset size {}",
            cfg.batch,
            data.pairs.len()
        )));
    }
    let has_noisy = data.pairs.iter().any(|p| p.noisy);
    let has_clean = data.pairs.iter().any(|p| !p.noisy);
    if !has_noisy || !has_clean {
        return Err(Error::Data(
            "training set must contain both noisy and clean labels".into(),
        ));
    }

    let mut state = TrainState::new(&net.store);
    let mut history = Vec::with_capacity(cfg.iters);
    let mut sampler = BatchSampler::new(data.pairs.len(), cfg.batch, cfg.seed);

    for step in 0..cfg.iters {
        observer(step, net);
        let idx = sampler.next_batch().to_vec();
        let lr_batch = stack_batch(
            &idx.iter().map(|&i| to_tensor(&data.pairs[i].lr)).collect::<Vec<_>>(),
        )?;
        let hr_batch = stack_batch(
            &idx.iter().map(|&i| to_tensor(&data.pairs[i].hr)).collect::<Vec<_>>(),
        )?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.pairs[i].noisy as usize).collect();

        let tape = Tape::new();
        let out = net.forward(&tape, &lr_batch, state.gate_active, cfg.gate_threshold)?;

        let hr_var = tape.constant(hr_batch);
        let l_rec = loss_rec(&out.sr, &hr_var)?;
        let mut total = l_rec.clone();

        let mut cls_value = 0.0;
        let mut batch_acc = 0.0;
        if let Some(logits) = &out.logits {
            let l_cls = loss_cls(logits, &labels)?;
            cls_value = l_cls.value().item();
            total = total.add(&l_cls.scale(cfg.lambda_cls))?;
            let correct = out
                .confidence
                .iter()
                .zip(labels.iter())
                .filter(|(&p, &l)| (p > 0.5) == (l == 1))
                .count();
            batch_acc = correct as f64 / labels.len() as f64;
        }

        let mut feat_value = 0.0;
        let routed_count = out.routed.iter().filter(|&&r| r).count();
        if state.gate_active && routed_count > 0 {
            if let Some(h_denoised) = &out.h_denoised {
                // Clean-reference features with gradient tracking disabled:
                // a scratch tape that never reaches backward.
                let lr_clean_batch = stack_batch(
                    &idx.iter()
                        .map(|&i| to_tensor(&data.pairs[i].lr_clean))
                        .collect::<Vec<_>>(),
                )?;
                let h_ref = {
                    let scratch = Tape::new();
                    let r = net.prefix(&scratch, &scratch.constant(lr_clean_batch))?;
                    r.value().clone()
                };
                let h_ref_var = tape.constant(h_ref);
                // Mean absolute error over routed samples only.
                let shape = h_denoised.shape();
                let mask = {
                    let mut t = Tensor::zeros(shape);
                    let per = shape.c * shape.h * shape.w;
                    let d = t.data_mut();
                    for (n, &r) in out.routed.iter().enumerate() {
                        if r {
                            d[n * per..(n + 1) * per].fill(1.0);
                        }
                    }
                    t
                };
                let denom = (routed_count * shape.c * shape.h * shape.w) as f64;
                let l_feat = h_denoised
                    .sub(&h_ref_var)?
                    .abs()
                    .mask_mul(&mask)?
                    .sum()
                    .scale(1.0 / denom);
                feat_value = l_feat.value().item();
                total = total.add(&l_feat.scale(cfg.lambda_feat))?;
            }
        }

        total.backward(&mut net.store)?;
        let lr_now = cosine_lr(cfg, state.step);
        let rec_value = l_rec.value().item();
        adam_step(&mut net.store, &mut state, cfg);

        if out.logits.is_some() {
            state.det_acc_ema = 0.99 * state.det_acc_ema + 0.01 * batch_acc;
            if !state.gate_active && state.det_acc_ema > cfg.gate_threshold {
                state.gate_active = true;
            }
        }

        history.push(HistoryRow {
            step,
            lr: lr_now,
            loss_rec: rec_value,
            loss_cls: cls_value,
            loss_feat: feat_value,
            det_acc: state.det_acc_ema,
            gate: state.gate_active,
        });
    }
    observer(cfg.iters, net);
    Ok(history)
}

/// Train without an observer.
pub fn run_training(net: &mut TfdNet, data: &PatchSet, cfg: &TrainConfig) -> Result<Vec<HistoryRow>> {
    run_training_observed(net, data, cfg, |_, _| {})
}
