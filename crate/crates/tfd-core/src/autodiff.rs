//! Reverse-mode differentiation over an append-only gradient tape.
//!
//! A `Tape` is single-owner: one training step builds one tape, calls
//! `backward`, and drops it. Node parents always precede the node, so the
//! reverse sweep visits each node exactly once in reverse topological order.
//! Parameter gradients accumulate into the `ParamStore` until `zero_grad`.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::kernels;
use crate::math;
use crate::rng::Rng;
use crate::spectral;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub usize);

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named parameter tensors with stable (registration) iteration order and
/// per-parameter gradient accumulators.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(alloc::format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        debug_assert_eq!(value.shape(), self.entries[id.0].value.shape());
        self.entries[id.0].value = value;
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        self.entries[id.0].grad.axpy(1.0, g)
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = Tensor::zeros(e.value.shape());
        }
    }

    /// (name, value, grad) triples in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value, &e.grad))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

enum Op {
    Leaf { param: Option<ParamId> },
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Abs,
    Sqrt,
    Scale(f64),
    Conv2d { stride: usize, pad: usize, has_bias: bool },
    Depthwise { has_bias: bool },
    LayerNorm { means: Vec<f64>, invs: Vec<f64> },
    Gap,
    ChannelScale,
    NearestUp2,
    ConcatC { split: usize },
    SliceC { lo: usize },
    BiasAdd,
    Dft2,
    Idft2,
    BroadcastMulChw,
    MaskMul(Tensor),
    Sum,
    Mean,
    CrossEntropy { labels: Vec<usize> },
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Op,
}

#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, op: Op) -> Var {
        let mut nodes = self.inner.borrow_mut();
        let id = nodes.len();
        debug_assert!(parents.iter().all(|&p| p < id));
        nodes.push(Node {
            value: value.clone(),
            parents,
            op,
        });
        Var {
            tape: self.clone(),
            id,
            value,
        }
    }

    /// Tracked leaf with no gradient destination (stop-gradient wrapper).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, vec![], Op::Leaf { param: None })
    }

    /// Tracked leaf whose gradient accumulates into the store entry.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), vec![], Op::Leaf { param: Some(id) })
    }
}

/// A tensor tracked on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    value: Tensor,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    fn same_tape(&self, other: &Var) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            return Err(Error::invalid("operands recorded on different tapes"));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let v = self.value.add(&other.value)?;
        Ok(self.tape.push(v, vec![self.id, other.id], Op::Add))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let v = self.value.sub(&other.value)?;
        Ok(self.tape.push(v, vec![self.id, other.id], Op::Sub))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let v = self.value.mul(&other.value)?;
        Ok(self.tape.push(v, vec![self.id, other.id], Op::Mul))
    }

    pub fn relu(&self) -> Var {
        let v = self.value.map(|x| if x > 0.0 { x } else { 0.0 });
        self.tape.push(v, vec![self.id], Op::Relu)
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value.map(math::sigmoid);
        self.tape.push(v, vec![self.id], Op::Sigmoid)
    }

    pub fn abs(&self) -> Var {
        let v = self.value.map(math::abs);
        self.tape.push(v, vec![self.id], Op::Abs)
    }

    pub fn sqrt(&self) -> Var {
        let v = self.value.map(math::sqrt);
        self.tape.push(v, vec![self.id], Op::Sqrt)
    }

    pub fn scale(&self, k: f64) -> Var {
        let v = self.value.scale(k);
        self.tape.push(v, vec![self.id], Op::Scale(k))
    }

    pub fn conv2d(&self, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        self.same_tape(w)?;
        let v = kernels::conv2d_fwd(&self.value, &w.value, b.map(|b| &b.value), stride, pad)?;
        let mut parents = vec![self.id, w.id];
        if let Some(b) = b {
            self.same_tape(b)?;
            parents.push(b.id);
        }
        Ok(self.tape.push(
            v,
            parents,
            Op::Conv2d {
                stride,
                pad,
                has_bias: b.is_some(),
            },
        ))
    }

    pub fn depthwise_conv2d(&self, w: &Var, b: Option<&Var>) -> Result<Var> {
        self.same_tape(w)?;
        let v = kernels::depthwise_fwd(&self.value, &w.value, b.map(|b| &b.value))?;
        let mut parents = vec![self.id, w.id];
        if let Some(b) = b {
            self.same_tape(b)?;
            parents.push(b.id);
        }
        Ok(self
            .tape
            .push(v, parents, Op::Depthwise { has_bias: b.is_some() }))
    }

    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let (v, means, invs) = kernels::layer_norm_fwd(&self.value, &gamma.value, &beta.value, eps);
        Ok(self.tape.push(
            v,
            vec![self.id, gamma.id, beta.id],
            Op::LayerNorm { means, invs },
        ))
    }

    pub fn gap(&self) -> Var {
        let v = kernels::gap_fwd(&self.value);
        self.tape.push(v, vec![self.id], Op::Gap)
    }

    pub fn channel_scale(&self, s: &Var) -> Result<Var> {
        self.same_tape(s)?;
        let v = kernels::channel_scale_fwd(&self.value, &s.value)?;
        Ok(self.tape.push(v, vec![self.id, s.id], Op::ChannelScale))
    }

    pub fn nearest_up2(&self) -> Var {
        let v = kernels::nearest_up2_fwd(&self.value);
        self.tape.push(v, vec![self.id], Op::NearestUp2)
    }

    pub fn concat_c(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let split = self.shape().c;
        let v = kernels::concat_c_fwd(&self.value, &other.value)?;
        Ok(self
            .tape
            .push(v, vec![self.id, other.id], Op::ConcatC { split }))
    }

    pub fn slice_c(&self, lo: usize, hi: usize) -> Result<Var> {
        let v = kernels::slice_c_fwd(&self.value, lo, hi)?;
        Ok(self.tape.push(v, vec![self.id], Op::SliceC { lo }))
    }

    pub fn bias_add(&self, b: &Var) -> Result<Var> {
        self.same_tape(b)?;
        let v = kernels::bias_add_fwd(&self.value, &b.value)?;
        Ok(self.tape.push(v, vec![self.id, b.id], Op::BiasAdd))
    }

    /// Forward 2D DFT; output stacks real then imaginary channel blocks, so
    /// N x C x H x W becomes N x 2C x H x W.
    pub fn dft2(&self) -> Var {
        let v = spectral::dft2_stacked(&self.value);
        self.tape.push(v, vec![self.id], Op::Dft2)
    }

    /// Inverse 2D DFT of a stacked spectrum, returning the real part with the
    /// 1/(HW) factor.
    pub fn idft2(&self) -> Result<Var> {
        let v = spectral::idft2_stacked(&self.value)?;
        Ok(self.tape.push(v, vec![self.id], Op::Idft2))
    }

    /// Multiply by a 1 x K x H x W weight broadcast over the batch.
    pub fn broadcast_mul_chw(&self, w: &Var) -> Result<Var> {
        self.same_tape(w)?;
        let xs = self.shape();
        let ws = w.shape();
        if ws.n != 1 || ws.c != xs.c || ws.h != xs.h || ws.w != xs.w {
            return Err(Error::shape("broadcast_mul weight", &xs, &ws));
        }
        let mut out = Tensor::zeros(xs);
        {
            let od = out.data_mut();
            let xd = self.value.data();
            let wd = w.value.data();
            let per = ws.numel();
            for n in 0..xs.n {
                for i in 0..per {
                    od[n * per + i] = xd[n * per + i] * wd[i];
                }
            }
        }
        Ok(self
            .tape
            .push(out, vec![self.id, w.id], Op::BroadcastMulChw))
    }

    /// Elementwise multiply by an untracked constant (gate masks).
    pub fn mask_mul(&self, mask: &Tensor) -> Result<Var> {
        let v = self.value.mul(mask)?;
        Ok(self
            .tape
            .push(v, vec![self.id], Op::MaskMul(mask.clone())))
    }

    pub fn sum(&self) -> Var {
        let v = Tensor::scalar(self.value.sum());
        self.tape.push(v, vec![self.id], Op::Sum)
    }

    pub fn mean(&self) -> Var {
        let v = Tensor::scalar(self.value.mean());
        self.tape.push(v, vec![self.id], Op::Mean)
    }

    /// Mean cross-entropy of N x 2 logits against {0,1} labels, stabilized
    /// with log-sum-exp.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var> {
        let s = self.shape();
        if s.c != 2 || s.h != 1 || s.w != 1 {
            return Err(Error::invalid(alloc::format!(
                "cross_entropy expects Nx2 logits, got {s}"
            )));
        }
        if labels.len() != s.n {
            return Err(Error::Data(alloc::format!(
                "{} labels for {} logits rows",
                labels.len(),
                s.n
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data(String::from("labels must be 0 or 1")));
        }
        let d = self.value.data();
        let mut total = 0.0;
        for (n, &label) in labels.iter().enumerate() {
            let (l0, l1) = (d[2 * n], d[2 * n + 1]);
            let lse = math::log_sum_exp2(l0, l1);
            total += lse - if label == 0 { l0 } else { l1 };
        }
        let v = Tensor::scalar(total / s.n as f64);
        Ok(self.tape.push(
            v,
            vec![self.id],
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
        ))
    }

    /// Run the reverse sweep from this scalar and deposit parameter gradients
    /// into the store. Accumulates on top of existing gradients.
    pub fn backward(&self, store: &mut ParamStore) -> Result<()> {
        if !self.value.shape().is_scalar() {
            return Err(Error::invalid(alloc::format!(
                "backward requires a scalar loss, got {}",
                self.value.shape()
            )));
        }
        let nodes = self.tape.inner.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.id + 1];
        grads[self.id] = Some(Tensor::scalar(1.0));
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let parent_value = |k: usize| &nodes[node.parents[k]].value;
            let send = |grads: &mut Vec<Option<Tensor>>, k: usize, t: Tensor| {
                let pid = node.parents[k];
                match &mut grads[pid] {
                    Some(acc) => acc.axpy(1.0, &t).expect("gradient shapes agree"),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        store.accumulate(*pid, &g)?;
                    }
                }
                Op::Add => {
                    send(&mut grads, 0, g.clone());
                    send(&mut grads, 1, g);
                }
                Op::Sub => {
                    send(&mut grads, 0, g.clone());
                    send(&mut grads, 1, g.scale(-1.0));
                }
                Op::Mul => {
                    send(&mut grads, 0, g.mul(parent_value(1))?);
                    send(&mut grads, 1, g.mul(parent_value(0))?);
                }
                Op::Relu => {
                    let x = parent_value(0);
                    send(&mut grads, 0, g.zip(x, "relu bwd", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?);
                }
                Op::Sigmoid => {
                    let y = &node.value;
                    send(&mut grads, 0, g.zip(y, "sigmoid bwd", |gv, yv| gv * yv * (1.0 - yv))?);
                }
                Op::Abs => {
                    let x = parent_value(0);
                    send(
                        &mut grads,
                        0,
                        g.zip(x, "abs bwd", |gv, xv| {
                            if xv > 0.0 {
                                gv
                            } else if xv < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })?,
                    );
                }
                Op::Sqrt => {
                    let y = &node.value;
                    send(&mut grads, 0, g.zip(y, "sqrt bwd", |gv, yv| 0.5 * gv / yv)?);
                }
                Op::Scale(k) => send(&mut grads, 0, g.scale(*k)),
                Op::Conv2d { stride, pad, has_bias } => {
                    let x = parent_value(0);
                    let w = parent_value(1);
                    send(&mut grads, 0, kernels::conv2d_bwd_x(&g, w, x.shape(), *stride, *pad));
                    send(&mut grads, 1, kernels::conv2d_bwd_w(&g, x, w.shape(), *stride, *pad));
                    if *has_bias {
                        send(&mut grads, 2, kernels::conv2d_bwd_b(&g));
                    }
                }
                Op::Depthwise { has_bias } => {
                    let x = parent_value(0);
                    let w = parent_value(1);
                    let (gx, gw) = kernels::depthwise_bwd(&g, x, w);
                    send(&mut grads, 0, gx);
                    send(&mut grads, 1, gw);
                    if *has_bias {
                        send(&mut grads, 2, kernels::conv2d_bwd_b(&g));
                    }
                }
                Op::LayerNorm { means, invs } => {
                    let x = parent_value(0);
                    let gamma = parent_value(1);
                    let (gx, ggamma, gbeta) = kernels::layer_norm_bwd(&g, x, gamma, means, invs);
                    send(&mut grads, 0, gx);
                    send(&mut grads, 1, ggamma);
                    send(&mut grads, 2, gbeta);
                }
                Op::Gap => send(&mut grads, 0, kernels::gap_bwd(&g, parent_value(0).shape())),
                Op::ChannelScale => {
                    let x = parent_value(0);
                    let s = parent_value(1);
                    let (gx, gs) = kernels::channel_scale_bwd(&g, x, s);
                    send(&mut grads, 0, gx);
                    send(&mut grads, 1, gs);
                }
                Op::NearestUp2 => {
                    send(&mut grads, 0, kernels::nearest_up2_bwd(&g, parent_value(0).shape()));
                }
                Op::ConcatC { split } => {
                    let gs = g.shape();
                    send(&mut grads, 0, kernels::slice_c_fwd(&g, 0, *split)?);
                    send(&mut grads, 1, kernels::slice_c_fwd(&g, *split, gs.c)?);
                }
                Op::SliceC { lo } => {
                    send(&mut grads, 0, kernels::slice_c_bwd(&g, parent_value(0).shape(), *lo));
                }
                Op::BiasAdd => {
                    send(&mut grads, 0, g.clone());
                    send(&mut grads, 1, kernels::conv2d_bwd_b(&g));
                }
                Op::Dft2 => send(&mut grads, 0, spectral::dft2_adjoint(&g)?),
                Op::Idft2 => send(&mut grads, 0, spectral::idft2_adjoint(&g)),
                Op::BroadcastMulChw => {
                    let x = parent_value(0);
                    let w = parent_value(1);
                    let xs = x.shape();
                    let per = w.numel();
                    let mut gx = Tensor::zeros(xs);
                    let mut gw = Tensor::zeros(w.shape());
                    {
                        let gxd = gx.data_mut();
                        let gd = g.data();
                        let wd = w.data();
                        for n in 0..xs.n {
                            for i in 0..per {
                                gxd[n * per + i] = gd[n * per + i] * wd[i];
                            }
                        }
                    }
                    {
                        let gwd = gw.data_mut();
                        let gd = g.data();
                        let xd = x.data();
                        for n in 0..xs.n {
                            for i in 0..per {
                                gwd[i] += gd[n * per + i] * xd[n * per + i];
                            }
                        }
                    }
                    send(&mut grads, 0, gx);
                    send(&mut grads, 1, gw);
                }
                Op::MaskMul(mask) => send(&mut grads, 0, g.mul(mask)?),
                Op::Sum => {
                    let xs = parent_value(0).shape();
                    send(&mut grads, 0, Tensor::full(xs, g.item()));
                }
                Op::Mean => {
                    let xs = parent_value(0).shape();
                    send(&mut grads, 0, Tensor::full(xs, g.item() / xs.numel() as f64));
                }
                Op::CrossEntropy { labels } => {
                    let logits = parent_value(0);
                    let d = logits.data();
                    let n = labels.len();
                    let scale = g.item() / n as f64;
                    let mut gl = vec![0.0; 2 * n];
                    for (i, &label) in labels.iter().enumerate() {
                        let (l0, l1) = (d[2 * i], d[2 * i + 1]);
                        let lse = math::log_sum_exp2(l0, l1);
                        let p0 = math::exp(l0 - lse);
                        let p1 = math::exp(l1 - lse);
                        gl[2 * i] = scale * (p0 - if label == 0 { 1.0 } else { 0.0 });
                        gl[2 * i + 1] = scale * (p1 - if label == 1 { 1.0 } else { 0.0 });
                    }
                    send(
                        &mut grads,
                        0,
                        Tensor::from_vec(logits.shape(), gl)?,
                    );
                }
            }
        }
        Ok(())
    }
}

/// Squeeze-and-excite channel attention: scales `x` per channel by
/// sigmoid(w2 . relu(w1 . gap(x))). `w1` is (C/r) x C x 1 x 1, `w2` is
/// C x (C/r) x 1 x 1; neither carries a bias.
pub fn channel_attention(x: &Var, w1: &Var, w2: &Var) -> Result<Var> {
    let c = x.shape().c;
    let w1s = w1.shape();
    if w1s.c != c || c % w1s.n != 0 {
        return Err(Error::invalid(alloc::format!(
            "channel attention reduction {} must divide channel count {c}",
            w1s.n
        )));
    }
    let pooled = x.gap();
    let hidden = pooled.conv2d(w1, None, 1, 0)?.relu();
    let scores = hidden.conv2d(w2, None, 1, 0)?.sigmoid();
    x.channel_scale(&scores)
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel: f64,
    pub checked: usize,
}

/// Central finite-difference check of `backward` against a scalar-valued
/// graph builder. Each entry of `inputs` is registered as a parameter; up to
/// `samples` coordinates per input are probed with h = 1e-5 * max(1, |x|).
/// Relative error uses an absolute floor of 1e-6.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor],
    samples: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| store.register(alloc::format!("input{i}"), t.clone()))
            .collect::<Result<_>>()?;
        let tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(&store, id)).collect();
        let loss = build(&tape, &vars)?;
        let value = loss.value().item();
        loss.backward(&mut store)?;
        let grads = ids.iter().map(|&id| store.grad(id).clone()).collect();
        Ok((value, Some(grads)))
    };

    let (_, grads) = eval(inputs)?;
    let grads = grads.expect("gradients present");
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            (0..samples).map(|_| rng.below(n)).collect()
        };
        for &coord in &coords {
            let x0 = input.data()[coord];
            let h = 1e-5 * math::abs(x0).max(1.0);
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[coord] = x0 + h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[coord] = x0 - h;
            let eval_only = |ts: &[Tensor]| -> Result<f64> {
                let tape = Tape::new();
                let store = ParamStore::new();
                let _ = &store;
                let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
                Ok(build(&tape, &vars)?.value().item())
            };
            let fd = (eval_only(&plus)? - eval_only(&minus)?) / (2.0 * h);
            let analytic = grads[i].data()[coord];
            let diff = math::abs(analytic - fd);
            let denom = math::abs(analytic).max(math::abs(fd));
            if diff > 1e-6 {
                max_rel = max_rel.max(diff / denom.max(1e-12));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel, checked })
}
